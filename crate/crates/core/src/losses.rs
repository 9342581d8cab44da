//! Attention losses: total-variation attendance, JSD binding, the max-attention
//! baseline and their weighted combination.
//!
//! Each loss comes in two forms: a value-only evaluation and `*_with_grad`,
//! which also returns the gradient with respect to every entry of the input
//! stack (same `(i, j, l)` layout). Hard minima and maxima pass their
//! subgradient through the first index attaining them, and `|x|` has
//! subgradient 0 at 0.

use std::collections::BTreeMap;

use crate::attention::{
    rescale_range, rescale_range_vjp, scatter_token_grad, spatial_softmax_normalize, spatial_softmax_vjp,
    token_map, AttentionStack, GaussianSmoother, Grid2D, NormalizedMap, PromptSpec, TokenMap,
};
use crate::error::{Error, Result};

/// A scalar loss along with what produced it.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossValue {
    pub value: f64,
    /// Attendance and baseline losses: per-object statistic (TV or max).
    /// Binding loss: per-attribute-token JSD.
    pub per_token_breakdown: BTreeMap<usize, f64>,
    /// Object token attaining the minimum, for the attendance-style losses.
    pub selected_token: Option<usize>,
    pub pairs: Vec<BindingPairLoss>,
    /// Set when some attribute map was constant and had to be rescaled degenerately.
    pub degenerate_rescale: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BindingPairLoss {
    pub attribute: usize,
    pub object: usize,
    pub jsd_value: f64,
}

/// Finite-difference total variation: sum of absolute differences between
/// right and down neighbours, no wraparound.
pub fn tv(map: &Grid2D) -> f64 {
    let (h, w) = (map.height(), map.width());
    let v = map.values();
    let mut acc = 0.0;
    for i in 0..h {
        for j in 0..w {
            let here = v[i * w + j];
            if j + 1 < w {
                acc += (v[i * w + j + 1] - here).abs();
            }
            if i + 1 < h {
                acc += (v[(i + 1) * w + j] - here).abs();
            }
        }
    }
    acc
}

/// Subgradient of [`tv`] with `sign(0) = 0`.
pub fn tv_grad(map: &Grid2D) -> Vec<f64> {
    let (h, w) = (map.height(), map.width());
    let v = map.values();
    let mut g = vec![0.0; v.len()];
    let mut pair = |p: usize, q: usize| {
        let s = sign(v[q] - v[p]);
        g[q] += s;
        g[p] -= s;
    };
    for i in 0..h {
        for j in 0..w {
            if j + 1 < w {
                pair(i * w + j, i * w + j + 1);
            }
            if i + 1 < h {
                pair(i * w + j, (i + 1) * w + j);
            }
        }
    }
    g
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Jensen-Shannon divergence in nats, `0 log 0 = 0`.
pub fn jsd(p: &NormalizedMap, q: &NormalizedMap) -> Result<f64> {
    check_pmf_shapes(p, q)?;
    let mut left = 0.0;
    let mut right = 0.0;
    for (&a, &b) in p.values().iter().zip(q.values()) {
        let m = 0.5 * (a + b);
        left += xlogx_over(a, m);
        right += xlogx_over(b, m);
    }
    Ok((0.5 * left + 0.5 * right).max(0.0))
}

/// Gradients of [`jsd`] with respect to `p` and `q`, each entry treated as free.
pub fn jsd_grad(p: &NormalizedMap, q: &NormalizedMap) -> Result<(Vec<f64>, Vec<f64>)> {
    check_pmf_shapes(p, q)?;
    let half_log = |x: f64, m: f64| if x > 0.0 { 0.5 * (x / m).ln() } else { 0.0 };
    Ok(p
        .values()
        .iter()
        .zip(q.values())
        .map(|(&a, &b)| {
            let m = 0.5 * (a + b);
            (half_log(a, m), half_log(b, m))
        })
        .unzip())
}

fn xlogx_over(x: f64, m: f64) -> f64 {
    if x > 0.0 {
        x * (x / m).ln()
    } else {
        0.0
    }
}

fn check_pmf_shapes(p: &NormalizedMap, q: &NormalizedMap) -> Result<()> {
    if p.grid.height() != q.grid.height() || p.grid.width() != q.grid.width() {
        return Err(Error::Shape(format!(
            "distributions {}x{} and {}x{} differ in shape",
            p.grid.height(),
            p.grid.width(),
            q.grid.height(),
            q.grid.width()
        )));
    }
    Ok(())
}

/// Stack prepared for loss evaluation (validated spec, optional start-token exclusion).
struct Prepared<'a> {
    source: &'a AttentionStack,
    stack: std::borrow::Cow<'a, AttentionStack>,
    smoother: Option<GaussianSmoother>,
    spec: &'a PromptSpec,
}

impl<'a> Prepared<'a> {
    fn new(stack: &'a AttentionStack, spec: &'a PromptSpec, use_smoothing: bool) -> Result<Self> {
        spec.validate().map_err(|e| Error::Parameter(e.to_string()))?;
        if spec.sequence_length != stack.token_count() {
            return Err(Error::Shape(format!(
                "prompt has {} tokens but the stack has {}",
                spec.sequence_length,
                stack.token_count()
            )));
        }
        let prepared = if spec.exclude_token_zero {
            std::borrow::Cow::Owned(stack.without_start_token()?)
        } else {
            std::borrow::Cow::Borrowed(stack)
        };
        let smoother = if use_smoothing {
            let s = GaussianSmoother::default();
            // Maps smaller than the kernel are left unsmoothed.
            (s.kernel_size() <= stack.height().min(stack.width())).then_some(s)
        } else {
            None
        };
        Ok(Self { source: stack, stack: prepared, smoother, spec })
    }

    fn map(&self, s: usize) -> Result<TokenMap> {
        let raw = token_map(&self.stack, s)?;
        match &self.smoother {
            Some(sm) => sm.apply(&raw),
            None => Ok(raw),
        }
    }

    /// Adds the gradient of a (possibly smoothed) token map into the prepared-stack buffer.
    fn push_map_grad(&self, buf: &mut [f64], s: usize, g: &[f64]) {
        let (h, w) = (self.stack.height(), self.stack.width());
        match &self.smoother {
            Some(sm) => scatter_token_grad(buf, self.stack.token_count(), s, &sm.vjp(g, h, w)),
            None => scatter_token_grad(buf, self.stack.token_count(), s, g),
        }
    }

    /// Maps a gradient on the prepared stack back to the caller's stack.
    fn finish(&self, buf: Vec<f64>) -> Vec<f64> {
        if self.spec.exclude_token_zero {
            self.source.without_start_token_vjp(&self.stack, &buf)
        } else {
            buf
        }
    }

    fn zero_grad(&self) -> Vec<f64> {
        vec![0.0; self.stack.values().len()]
    }
}

/// Hard minimum over object tokens; ties go to the lowest token index.
fn select_min(stats: &BTreeMap<usize, f64>) -> (usize, f64) {
    let mut best: Option<(usize, f64)> = None;
    for (&s, &v) in stats {
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((s, v));
        }
    }
    best.expect("object token set is nonempty")
}

fn per_object<F>(prep: &Prepared<'_>, stat: F) -> Result<(BTreeMap<usize, f64>, BTreeMap<usize, TokenMap>)>
where
    F: Fn(&Grid2D) -> f64,
{
    let mut stats = BTreeMap::new();
    let mut maps = BTreeMap::new();
    for &s in &prep.spec.object_tokens {
        let m = prep.map(s)?;
        stats.insert(s, stat(&m.grid));
        maps.insert(s, m);
    }
    Ok((stats, maps))
}

/// `-min_{s in S} TV(A^s)`.
pub fn attend_loss(stack: &AttentionStack, spec: &PromptSpec, use_smoothing: bool) -> Result<LossValue> {
    attend_impl(stack, spec, use_smoothing, false).map(|(v, _)| v)
}

pub fn attend_loss_with_grad(
    stack: &AttentionStack,
    spec: &PromptSpec,
    use_smoothing: bool,
) -> Result<(LossValue, Vec<f64>)> {
    attend_impl(stack, spec, use_smoothing, true).map(|(v, g)| (v, g.expect("gradient requested")))
}

fn attend_impl(
    stack: &AttentionStack,
    spec: &PromptSpec,
    use_smoothing: bool,
    want_grad: bool,
) -> Result<(LossValue, Option<Vec<f64>>)> {
    let prep = Prepared::new(stack, spec, use_smoothing)?;
    let (stats, maps) = per_object(&prep, tv)?;
    let (selected, worst) = select_min(&stats);
    let value = LossValue {
        value: -worst,
        per_token_breakdown: stats,
        selected_token: Some(selected),
        ..Default::default()
    };
    let grad = want_grad.then(|| {
        let mut buf = prep.zero_grad();
        let g: Vec<f64> = tv_grad(&maps[&selected].grid).into_iter().map(|v| -v).collect();
        prep.push_map_grad(&mut buf, selected, &g);
        prep.finish(buf)
    });
    Ok((value, grad))
}

/// `-min_{s in S} max_{i,j} A^s[i, j]`.
pub fn ae_loss(stack: &AttentionStack, spec: &PromptSpec, use_smoothing: bool) -> Result<LossValue> {
    ae_impl(stack, spec, use_smoothing, false).map(|(v, _)| v)
}

pub fn ae_loss_with_grad(
    stack: &AttentionStack,
    spec: &PromptSpec,
    use_smoothing: bool,
) -> Result<(LossValue, Vec<f64>)> {
    ae_impl(stack, spec, use_smoothing, true).map(|(v, g)| (v, g.expect("gradient requested")))
}

fn ae_impl(
    stack: &AttentionStack,
    spec: &PromptSpec,
    use_smoothing: bool,
    want_grad: bool,
) -> Result<(LossValue, Option<Vec<f64>>)> {
    let prep = Prepared::new(stack, spec, use_smoothing)?;
    let (stats, maps) = per_object(&prep, |g| g.min_max().1)?;
    let (selected, worst) = select_min(&stats);
    let value = LossValue {
        value: -worst,
        per_token_breakdown: stats,
        selected_token: Some(selected),
        ..Default::default()
    };
    let grad = want_grad.then(|| {
        let mut buf = prep.zero_grad();
        let m = &maps[&selected].grid;
        let mut g = vec![0.0; m.len()];
        g[m.argmax()] = -1.0;
        prep.push_map_grad(&mut buf, selected, &g);
        prep.finish(buf)
    });
    Ok((value, grad))
}

/// Mean over attribute pairs of `JSD(softmax(rescale(A^r, A^s)) || softmax(A^s))`.
pub fn bind_loss(stack: &AttentionStack, spec: &PromptSpec, use_smoothing: bool) -> Result<LossValue> {
    bind_impl(stack, spec, use_smoothing, false).map(|(v, _)| v)
}

pub fn bind_loss_with_grad(
    stack: &AttentionStack,
    spec: &PromptSpec,
    use_smoothing: bool,
) -> Result<(LossValue, Vec<f64>)> {
    bind_impl(stack, spec, use_smoothing, true).map(|(v, g)| (v, g.expect("gradient requested")))
}

fn bind_impl(
    stack: &AttentionStack,
    spec: &PromptSpec,
    use_smoothing: bool,
    want_grad: bool,
) -> Result<(LossValue, Option<Vec<f64>>)> {
    if spec.attribute_pairs.is_empty() {
        return Err(Error::Parameter("binding loss needs at least one attribute pair".into()));
    }
    let prep = Prepared::new(stack, spec, use_smoothing)?;
    let n_pairs = spec.attribute_pairs.len() as f64;
    let mut buf = want_grad.then(|| prep.zero_grad());
    let mut out = LossValue::default();
    let mut total = 0.0;
    for &(r, s) in &spec.attribute_pairs {
        let attr = prep.map(r)?;
        let obj = prep.map(s)?;
        let rescaled = rescale_range(&attr, &obj)?;
        out.degenerate_rescale |= rescaled.degenerate;
        let p = spatial_softmax_normalize(&rescaled.map)?;
        let q = spatial_softmax_normalize(&obj)?;
        let j = jsd(&p, &q)?;
        total += j;
        out.per_token_breakdown.insert(r, j);
        out.pairs.push(BindingPairLoss { attribute: r, object: s, jsd_value: j });
        if let Some(buf) = buf.as_mut() {
            let (gp, gq) = jsd_grad(&p, &q)?;
            let scale = |v: Vec<f64>| -> Vec<f64> { v.into_iter().map(|x| x / n_pairs).collect() };
            let g_rescaled = spatial_softmax_vjp(&p, &scale(gp));
            let mut g_obj = spatial_softmax_vjp(&q, &scale(gq));
            let (g_attr, g_obj_range) = rescale_range_vjp(&attr, &obj, &g_rescaled);
            g_obj.iter_mut().zip(&g_obj_range).for_each(|(a, b)| *a += b);
            prep.push_map_grad(buf, r, &g_attr);
            prep.push_map_grad(buf, s, &g_obj);
        }
    }
    out.value = total / n_pairs;
    Ok((out, buf.map(|b| prep.finish(b))))
}

/// `attend + lambda * bind`; `lambda = 0` skips the binding term entirely.
pub fn divide_and_bind_loss(
    stack: &AttentionStack,
    spec: &PromptSpec,
    lambda: f64,
    use_smoothing: bool,
) -> Result<LossValue> {
    dnb_impl(stack, spec, lambda, use_smoothing, false).map(|(v, _)| v)
}

pub fn divide_and_bind_loss_with_grad(
    stack: &AttentionStack,
    spec: &PromptSpec,
    lambda: f64,
    use_smoothing: bool,
) -> Result<(LossValue, Vec<f64>)> {
    dnb_impl(stack, spec, lambda, use_smoothing, true).map(|(v, g)| (v, g.expect("gradient requested")))
}

fn dnb_impl(
    stack: &AttentionStack,
    spec: &PromptSpec,
    lambda: f64,
    use_smoothing: bool,
    want_grad: bool,
) -> Result<(LossValue, Option<Vec<f64>>)> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Parameter(format!("lambda must be finite and nonnegative, got {lambda}")));
    }
    if lambda > 0.0 && spec.attribute_pairs.is_empty() {
        return Err(Error::Parameter("lambda > 0 requires at least one attribute pair".into()));
    }
    let (mut value, mut grad) = attend_impl(stack, spec, use_smoothing, want_grad)?;
    if lambda > 0.0 {
        let (bind, bind_grad) = bind_impl(stack, spec, use_smoothing, want_grad)?;
        value.value += lambda * bind.value;
        value.pairs = bind.pairs;
        value.degenerate_rescale = bind.degenerate_rescale;
        if let (Some(g), Some(bg)) = (grad.as_mut(), bind_grad) {
            g.iter_mut().zip(bg).for_each(|(a, b)| *a += lambda * b);
        }
    }
    Ok((value, grad))
}

/// Which loss drives a nursing update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// Max-attention baseline.
    AttendExcite,
    /// Attendance plus `lambda` times binding.
    DivideAndBind { lambda: f64 },
}

impl Objective {
    pub fn evaluate(&self, stack: &AttentionStack, spec: &PromptSpec, use_smoothing: bool) -> Result<LossValue> {
        match *self {
            Objective::AttendExcite => ae_loss(stack, spec, use_smoothing),
            Objective::DivideAndBind { lambda } => divide_and_bind_loss(stack, spec, lambda, use_smoothing),
        }
    }

    pub fn evaluate_with_grad(
        &self,
        stack: &AttentionStack,
        spec: &PromptSpec,
        use_smoothing: bool,
    ) -> Result<(LossValue, Vec<f64>)> {
        match *self {
            Objective::AttendExcite => ae_loss_with_grad(stack, spec, use_smoothing),
            Objective::DivideAndBind { lambda } => {
                divide_and_bind_loss_with_grad(stack, spec, lambda, use_smoothing)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::Grid2D;

    fn grid(h: usize, w: usize, v: Vec<f64>) -> Grid2D {
        Grid2D::new(h, w, v).unwrap()
    }

    fn pmf(v: Vec<f64>) -> NormalizedMap {
        let n = v.len();
        NormalizedMap::new(grid(1, n, v)).unwrap()
    }

    fn spike() -> Grid2D {
        let mut v = vec![0.0; 16];
        v[5] = 0.5;
        grid(4, 4, v)
    }

    /// Stack whose per-token maps are given explicitly; not simplex-normalized.
    fn stack_from_maps(h: usize, w: usize, maps: &[Vec<f64>]) -> AttentionStack {
        let l = maps.len();
        let mut values = vec![0.0; h * w * l];
        for (t, m) in maps.iter().enumerate() {
            for (p, v) in m.iter().enumerate() {
                values[p * l + t] = *v;
            }
        }
        AttentionStack::from_raw(h, w, l, values).unwrap()
    }

    fn raw_spec(l: usize, objects: Vec<usize>, pairs: Vec<(usize, usize)>) -> PromptSpec {
        PromptSpec { sequence_length: l, object_tokens: objects, attribute_pairs: pairs, exclude_token_zero: false }
    }

    #[test]
    fn tv_examples() {
        assert_eq!(tv(&grid(3, 4, vec![0.7; 12])), 0.0);
        assert_eq!(tv(&grid(1, 1, vec![0.3])), 0.0);
        assert_eq!(tv(&spike()), 2.0);
    }

    #[test]
    fn jsd_examples() {
        let p = pmf(vec![0.2, 0.3, 0.5]);
        assert_eq!(jsd(&p, &p).unwrap(), 0.0);
        let a = pmf(vec![1.0, 0.0, 0.0]);
        let b = pmf(vec![0.0, 0.0, 1.0]);
        assert!((jsd(&a, &b).unwrap() - 2f64.ln()).abs() < 1e-12);
        let expected = 0.5 * (1.0f64 / 0.75).ln() + 0.5 * (0.5 * (0.5f64 / 0.75).ln() + 0.5 * 2f64.ln());
        let got = jsd(&pmf(vec![1.0, 0.0]), &pmf(vec![0.5, 0.5])).unwrap();
        assert!((got - expected).abs() < 1e-15);
        // KL(q || m) alone is 0.1438; the divergence averages both terms.
        assert!((got - 0.2158).abs() < 1e-4);
        let wide = NormalizedMap::new(grid(2, 1, vec![0.5, 0.5])).unwrap();
        assert!(matches!(jsd(&pmf(vec![0.5, 0.5]), &wide), Err(Error::Shape(_))));
    }

    #[test]
    fn attend_examples() {
        let uniform = AttentionStack::uniform(4, 4, 3).unwrap();
        let loss = attend_loss(&uniform, &raw_spec(3, vec![2, 1], vec![]), false).unwrap();
        assert_eq!(loss.value, 0.0);
        assert_eq!(loss.selected_token, Some(1));

        let stack = stack_from_maps(4, 4, &[spike().into_values(), vec![0.25; 16]]);
        let single = attend_loss(&stack, &raw_spec(2, vec![0], vec![]), false).unwrap();
        assert_eq!(single.value, -2.0);
        let both = attend_loss(&stack, &raw_spec(2, vec![0, 1], vec![]), false).unwrap();
        assert_eq!(both.value, 0.0);
        assert_eq!(both.selected_token, Some(1));
        assert_eq!(both.per_token_breakdown[&0], 2.0);
    }

    #[test]
    fn empty_objects_rejected() {
        let stack = AttentionStack::uniform(2, 2, 2).unwrap();
        let spec = raw_spec(2, vec![], vec![]);
        assert!(matches!(attend_loss(&stack, &spec, false), Err(Error::Parameter(_))));
        assert!(matches!(ae_loss(&stack, &spec, false), Err(Error::Parameter(_))));
    }

    #[test]
    fn ae_examples() {
        let uniform = AttentionStack::uniform(3, 3, 4).unwrap();
        let loss = ae_loss(&uniform, &raw_spec(4, vec![1, 3], vec![]), false).unwrap();
        assert_eq!(loss.value, -0.25);

        let mut a = vec![0.1; 9];
        a[4] = 0.9;
        let mut b = vec![0.1; 9];
        b[0] = 0.3;
        let stack = stack_from_maps(3, 3, &[a, b]);
        assert_eq!(ae_loss(&stack, &raw_spec(2, vec![0], vec![]), false).unwrap().value, -0.9);
        let both = ae_loss(&stack, &raw_spec(2, vec![0, 1], vec![]), false).unwrap();
        assert_eq!(both.value, -0.3);
        assert_eq!(both.selected_token, Some(1));
    }

    #[test]
    fn bind_examples() {
        let m: Vec<f64> = (0..9).map(|v| 0.05 * v as f64).collect();
        let stack = stack_from_maps(3, 3, &[m.clone(), m.clone(), vec![0.0; 9]]);
        let spec = raw_spec(3, vec![1], vec![(0, 1)]);
        assert!(bind_loss(&stack, &spec, false).unwrap().value.abs() < 1e-15);

        // Two pairs: mean of the individual pair losses.
        let other: Vec<f64> = (0..9).map(|v| 0.4 - 0.04 * v as f64).collect();
        let stack = stack_from_maps(3, 3, &[m.clone(), other.clone(), m.clone(), other.clone()]);
        let j1 = bind_loss(&stack, &raw_spec(4, vec![1], vec![(0, 1)]), false).unwrap().value;
        let j2 = bind_loss(&stack, &raw_spec(4, vec![3], vec![(2, 3)]), false).unwrap().value;
        let both = bind_loss(&stack, &raw_spec(4, vec![1, 3], vec![(0, 1), (2, 3)]), false).unwrap();
        assert!(j1 > 0.0);
        assert!((both.value - 0.5 * (j1 + j2)).abs() < 1e-15);
        assert_eq!(both.pairs.len(), 2);

        let err = bind_loss(&stack, &raw_spec(4, vec![1], vec![]), false);
        assert!(matches!(err, Err(Error::Parameter(_))));
    }

    #[test]
    fn dnb_examples() {
        let uniform = AttentionStack::uniform(4, 4, 4).unwrap();
        let spec = PromptSpec::new(4, vec![1, 3], vec![(2, 1)]).unwrap();
        assert_eq!(divide_and_bind_loss(&uniform, &spec, 1.0, false).unwrap().value, 0.0);

        let values: Vec<f64> = (0..64).map(|k| 0.1 + ((k * 37) % 11) as f64 * 0.03).collect();
        let stack = AttentionStack::from_raw(4, 4, 4, values).unwrap();
        let attend = attend_loss(&stack, &spec, false).unwrap();
        let bind = bind_loss(&stack, &spec, false).unwrap();
        let zero = divide_and_bind_loss(&stack, &spec, 0.0, false).unwrap();
        assert_eq!(zero.value, attend.value);
        let one = divide_and_bind_loss(&stack, &spec, 1.0, false).unwrap();
        assert_eq!(one.value, attend.value + bind.value);

        let no_pairs = PromptSpec::new(4, vec![1, 3], vec![]).unwrap();
        assert!(matches!(divide_and_bind_loss(&stack, &no_pairs, 1.0, false), Err(Error::Parameter(_))));
        assert!(divide_and_bind_loss(&stack, &no_pairs, 0.0, false).is_ok());
        assert!(matches!(divide_and_bind_loss(&stack, &spec, -1.0, false), Err(Error::Parameter(_))));
    }

    #[test]
    fn tv_grad_signs() {
        let g = tv_grad(&spike());
        assert_eq!(g[5], 4.0);
        assert_eq!(g[1], -1.0);
        assert_eq!(g[4], -1.0);
        assert_eq!(g[6], -1.0);
        assert_eq!(g[9], -1.0);
        assert_eq!(g[0], 0.0);
    }
}
