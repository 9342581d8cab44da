//! Cross-attention primitives.
//!
//! Grid types, softmax, the scaled dot-product attention volume, per-token map
//! extraction, Gaussian smoothing and the two normalizations used by the
//! binding loss. Every differentiable operation has a matching `*_vjp`
//! function that pulls a downstream gradient back onto its real inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when validating freshly computed attention stacks.
pub const STACK_TOLERANCE: f64 = 1e-9;

/// A dense row-major `height x width` grid of finite reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2D {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Grid2D {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("grid dimensions must be positive, got {height}x{width}")));
        }
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "grid {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite grid value at index {pos}")));
        }
        Ok(Self { height, width, values })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.width + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Index of the first maximum in row-major order.
    pub fn argmax(&self) -> usize {
        first_extremum(&self.values, |a, b| a > b)
    }

    /// Index of the first minimum in row-major order.
    pub fn argmin(&self) -> usize {
        first_extremum(&self.values, |a, b| a < b)
    }

    fn same_shape(&self, other: &Grid2D) -> bool {
        self.height == other.height && self.width == other.width
    }
}

fn first_extremum(values: &[f64], better: impl Fn(f64, f64) -> bool) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate().skip(1) {
        if better(v, values[best]) {
            best = k;
        }
    }
    best
}

/// Spatial attention map of one text token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMap {
    pub grid: Grid2D,
    pub token_index: usize,
}

impl TokenMap {
    pub fn new(grid: Grid2D, token_index: usize) -> Result<Self> {
        if let Some(pos) = grid.values().iter().position(|&v| v < 0.0) {
            return Err(Error::InvalidInput(format!("token map entry {pos} is negative")));
        }
        Ok(Self { grid, token_index })
    }
}

/// A token map normalized into a probability mass function over `h x w` cells.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedMap {
    pub grid: Grid2D,
}

impl NormalizedMap {
    pub fn new(grid: Grid2D) -> Result<Self> {
        if grid.values().iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidInput("normalized map has negative mass".into()));
        }
        let total = grid.sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("normalized map sums to {total}, expected 1")));
        }
        Ok(Self { grid })
    }

    pub fn values(&self) -> &[f64] {
        self.grid.values()
    }
}

/// The `h x w x L` cross-attention volume. Layout is `(i, j, l)` with the token
/// axis fastest; every spatial location holds a distribution over tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    height: usize,
    width: usize,
    tokens: usize,
    values: Vec<f64>,
}

impl AttentionStack {
    /// Builds a stack and checks the per-location simplex constraint within [`STACK_TOLERANCE`].
    pub fn new(height: usize, width: usize, tokens: usize, values: Vec<f64>) -> Result<Self> {
        Self::with_tolerance(height, width, tokens, values, STACK_TOLERANCE)
    }

    /// Builds a stack and checks that every location sums to one within `tolerance`.
    pub fn with_tolerance(
        height: usize,
        width: usize,
        tokens: usize,
        values: Vec<f64>,
        tolerance: f64,
    ) -> Result<Self> {
        let stack = Self::from_raw(height, width, tokens, values)?;
        if let Some((i, j, sum)) = stack.first_simplex_violation(tolerance) {
            return Err(Error::Contract(format!(
                "attention at location ({i}, {j}) sums to {sum} over tokens"
            )));
        }
        Ok(stack)
    }

    /// Builds a stack checking only shape, finiteness and nonnegativity.
    ///
    /// Losses are defined on any nonnegative volume, which is what gradient
    /// checks need when they perturb a single entry.
    pub fn from_raw(height: usize, width: usize, tokens: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || tokens == 0 {
            return Err(Error::Shape(format!(
                "attention stack dimensions must be positive, got {height}x{width}x{tokens}"
            )));
        }
        if values.len() != height * width * tokens {
            return Err(Error::Shape(format!(
                "stack {height}x{width}x{tokens} needs {} values, got {}",
                height * width * tokens,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput(format!(
                "attention value at index {pos} is negative or non-finite"
            )));
        }
        Ok(Self { height, width, tokens, values })
    }

    pub fn uniform(height: usize, width: usize, tokens: usize) -> Result<Self> {
        Self::new(height, width, tokens, vec![1.0 / tokens as f64; height * width * tokens])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn token_count(&self) -> usize {
        self.tokens
    }

    pub fn spatial_len(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize, l: usize) -> f64 {
        self.values[(i * self.width + j) * self.tokens + l]
    }

    /// First location whose token distribution misses the simplex by more than `tolerance`.
    pub fn first_simplex_violation(&self, tolerance: f64) -> Option<(usize, usize, f64)> {
        self.values.chunks(self.tokens).enumerate().find_map(|(p, row)| {
            let sum: f64 = row.iter().sum();
            ((sum - 1.0).abs() > tolerance).then(|| (p / self.width, p % self.width, sum))
        })
    }

    /// Renormalizes over tokens `1..L`, zeroing the start token.
    ///
    /// The start-of-text token soaks up most raw attention; losses read the
    /// remaining tokens as a distribution of their own.
    pub fn without_start_token(&self) -> Result<AttentionStack> {
        if self.tokens < 2 {
            return Err(Error::Parameter("excluding token 0 needs at least two tokens".into()));
        }
        let mut values = self.values.clone();
        for row in values.chunks_mut(self.tokens) {
            let rest: f64 = row[1..].iter().sum();
            if rest <= 0.0 {
                return Err(Error::InvalidInput(
                    "no attention mass left after excluding token 0".into(),
                ));
            }
            row[0] = 0.0;
            for v in &mut row[1..] {
                *v /= rest;
            }
        }
        Ok(AttentionStack { values, ..*self })
    }

    /// Pulls a gradient on [`AttentionStack::without_start_token`]'s output back onto `self`.
    pub fn without_start_token_vjp(&self, renormalized: &AttentionStack, grad: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.values.len()];
        for ((src, dst), (g, r)) in self
            .values
            .chunks(self.tokens)
            .zip(out.chunks_mut(self.tokens))
            .zip(grad.chunks(self.tokens).zip(renormalized.values.chunks(self.tokens)))
        {
            let rest: f64 = src[1..].iter().sum();
            let dot: f64 = g[1..].iter().zip(&r[1..]).map(|(a, b)| a * b).sum();
            for l in 1..self.tokens {
                dst[l] = (g[l] - dot) / rest;
            }
        }
        out
    }
}

/// The slice of `stack` belonging to token `s`.
pub fn token_map(stack: &AttentionStack, s: usize) -> Result<TokenMap> {
    if s >= stack.tokens {
        return Err(Error::Index(format!(
            "token index {s} out of range for {} tokens",
            stack.tokens
        )));
    }
    let values = stack.values.iter().skip(s).step_by(stack.tokens).copied().collect();
    Ok(TokenMap {
        grid: Grid2D { height: stack.height, width: stack.width, values },
        token_index: s,
    })
}

/// Adds a per-token map gradient into the stack-shaped gradient buffer.
pub fn scatter_token_grad(stack_grad: &mut [f64], tokens: usize, s: usize, map_grad: &[f64]) {
    for (p, g) in map_grad.iter().enumerate() {
        stack_grad[p * tokens + s] += g;
    }
}

/// Token indices and their roles within a prompt of `sequence_length` tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSpec {
    pub sequence_length: usize,
    pub object_tokens: Vec<usize>,
    /// `(attribute, object)` pairs.
    #[serde(default)]
    pub attribute_pairs: Vec<(usize, usize)>,
    #[serde(default = "default_exclude")]
    pub exclude_token_zero: bool,
}

fn default_exclude() -> bool {
    true
}

impl PromptSpec {
    pub fn new(
        sequence_length: usize,
        object_tokens: Vec<usize>,
        attribute_pairs: Vec<(usize, usize)>,
    ) -> Result<Self> {
        let spec = Self { sequence_length, object_tokens, attribute_pairs, exclude_token_zero: true };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.sequence_length;
        if l == 0 {
            return Err(Error::Validation("sequence_length must be positive".into()));
        }
        if self.object_tokens.is_empty() {
            return Err(Error::Validation("object token set S must be nonempty".into()));
        }
        let lowest = usize::from(self.exclude_token_zero);
        let check = |idx: usize, role: &str| -> Result<()> {
            if idx >= l {
                return Err(Error::Validation(format!("{role} token {idx} outside [0, {l})")));
            }
            if idx < lowest {
                return Err(Error::Validation(format!(
                    "{role} token {idx} refers to the excluded start token"
                )));
            }
            Ok(())
        };
        let mut seen = std::collections::BTreeSet::new();
        for &s in &self.object_tokens {
            check(s, "object")?;
            if !seen.insert(s) {
                return Err(Error::Validation(format!("object token {s} listed twice")));
            }
        }
        let mut attrs = std::collections::BTreeSet::new();
        for &(r, s) in &self.attribute_pairs {
            check(r, "attribute")?;
            if !self.object_tokens.contains(&s) {
                return Err(Error::Validation(format!(
                    "pair ({r}, {s}) binds to a token that is not an object"
                )));
            }
            if self.object_tokens.contains(&r) {
                return Err(Error::Validation(format!("attribute token {r} is also an object")));
            }
            if !attrs.insert(r) {
                return Err(Error::Validation(format!("attribute token {r} listed twice")));
            }
        }
        Ok(())
    }
}

/// `softmax(scale * values)` with max subtraction.
pub fn softmax(values: &[f64], scale: f64) -> Result<Vec<f64>> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Parameter(format!("softmax scale must be positive, got {scale}")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("softmax input contains non-finite values".into()));
    }
    let mut out = values.to_vec();
    softmax_in_place(&mut out, scale);
    Ok(out)
}

pub(crate) fn softmax_in_place(values: &mut [f64], scale: f64) {
    let max = values.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut total = 0.0;
    for v in values.iter_mut() {
        *v = ((*v - max) * scale).exp();
        total += *v;
    }
    for v in values.iter_mut() {
        *v /= total;
    }
}

/// Gradient of a scalar with respect to softmax inputs, given the softmax output.
pub fn softmax_vjp(output: &[f64], grad: &[f64], scale: f64) -> Vec<f64> {
    let dot: f64 = output.iter().zip(grad).map(|(y, g)| y * g).sum();
    output.iter().zip(grad).map(|(y, g)| scale * y * (g - dot)).collect()
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Scaled dot-product attention of spatial features over token features.
///
/// `score[p, l] = <spatial[p], tokens[l]> / sqrt(d)` with a softmax over `l`
/// at every spatial location `p`, reshaped to `(h, w, L)`.
pub fn cross_attention(
    token_features: &Matrix,
    spatial_features: &Matrix,
    d: usize,
    h: usize,
    w: usize,
) -> Result<AttentionStack> {
    if d == 0 {
        return Err(Error::Parameter("feature dimension must be positive".into()));
    }
    cross_attention_scaled(token_features, spatial_features, 1.0 / (d as f64).sqrt(), d, h, w)
}

pub(crate) fn cross_attention_scaled(
    token_features: &Matrix,
    spatial_features: &Matrix,
    scale: f64,
    d: usize,
    h: usize,
    w: usize,
) -> Result<AttentionStack> {
    if token_features.cols != d || spatial_features.cols != d {
        return Err(Error::Shape(format!(
            "feature widths {} and {} must both equal d = {d}",
            token_features.cols, spatial_features.cols
        )));
    }
    if spatial_features.rows != h * w {
        return Err(Error::Shape(format!(
            "{} spatial rows cannot be reshaped to {h}x{w}",
            spatial_features.rows
        )));
    }
    if token_features.rows == 0 {
        return Err(Error::Shape("at least one token is required".into()));
    }
    if token_features.data.iter().chain(&spatial_features.data).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite attention features".into()));
    }
    let tokens = token_features.rows;
    let mut values = vec![0.0; h * w * tokens];
    for (p, row) in values.chunks_mut(tokens).enumerate() {
        let feat = spatial_features.row(p);
        for (l, out) in row.iter_mut().enumerate() {
            *out = dot(feat, token_features.row(l));
        }
        softmax_in_place(row, scale);
    }
    AttentionStack::from_raw(h, w, tokens, values)
}

/// Gradients of a downstream scalar with respect to token and spatial features.
pub fn cross_attention_vjp(
    stack: &AttentionStack,
    token_features: &Matrix,
    spatial_features: &Matrix,
    d: usize,
    grad_stack: &[f64],
) -> (Matrix, Matrix) {
    cross_attention_scaled_vjp(
        stack,
        token_features,
        spatial_features,
        1.0 / (d as f64).sqrt(),
        grad_stack,
    )
}

pub(crate) fn cross_attention_scaled_vjp(
    stack: &AttentionStack,
    token_features: &Matrix,
    spatial_features: &Matrix,
    scale: f64,
    grad_stack: &[f64],
) -> (Matrix, Matrix) {
    let tokens = stack.tokens;
    let d = token_features.cols;
    let mut g_tok = Matrix::zeros(tokens, d);
    let mut g_sp = Matrix::zeros(spatial_features.rows, d);
    for (p, (probs, g)) in stack.values.chunks(tokens).zip(grad_stack.chunks(tokens)).enumerate() {
        let g_scores = softmax_vjp(probs, g, scale);
        let feat = spatial_features.row(p);
        let g_feat = &mut g_sp.data[p * d..(p + 1) * d];
        for (l, &gs) in g_scores.iter().enumerate() {
            if gs == 0.0 {
                continue;
            }
            let tok = token_features.row(l);
            for k in 0..d {
                g_feat[k] += gs * tok[k];
            }
            let g_t = &mut g_tok.data[l * d..(l + 1) * d];
            for k in 0..d {
                g_t[k] += gs * feat[k];
            }
        }
    }
    (g_tok, g_sp)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Separable Gaussian blur with half-sample symmetric boundary reflection.
///
/// Symmetric reflection (edge sample repeated) keeps the total mass of the map
/// unchanged for any symmetric kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSmoother {
    kernel_size: usize,
    sigma: f64,
    weights: Vec<f64>,
}

impl GaussianSmoother {
    pub fn new(kernel_size: usize, sigma: f64) -> Result<Self> {
        if kernel_size == 0 || kernel_size.is_multiple_of(2) {
            return Err(Error::Parameter(format!(
                "kernel size must be odd and positive, got {kernel_size}"
            )));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Parameter(format!("sigma must be positive, got {sigma}")));
        }
        let radius = (kernel_size / 2) as f64;
        let raw: Vec<f64> = (0..kernel_size)
            .map(|k| {
                let x = k as f64 - radius;
                (-x * x / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        Ok(Self { kernel_size, sigma, weights: raw.into_iter().map(|v| v / total).collect() })
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Normalized 1-D kernel; the 2-D kernel is its outer product.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn check(&self, h: usize, w: usize) -> Result<()> {
        if self.kernel_size > h.min(w) {
            return Err(Error::Parameter(format!(
                "kernel size {} exceeds map size {h}x{w}",
                self.kernel_size
            )));
        }
        Ok(())
    }

    pub fn apply(&self, map: &TokenMap) -> Result<TokenMap> {
        let (h, w) = (map.grid.height, map.grid.width);
        self.check(h, w)?;
        let values = self.forward(map.grid.values(), h, w);
        Ok(TokenMap { grid: Grid2D { height: h, width: w, values }, token_index: map.token_index })
    }

    /// Adjoint of [`GaussianSmoother::apply`]; since the blur is linear this is also its VJP.
    pub fn vjp(&self, grad: &[f64], h: usize, w: usize) -> Vec<f64> {
        let tmp = self.pass_adjoint(grad, h, w, true);
        self.pass_adjoint(&tmp, h, w, false)
    }

    fn forward(&self, values: &[f64], h: usize, w: usize) -> Vec<f64> {
        let tmp = self.pass(values, h, w, false);
        self.pass(&tmp, h, w, true)
    }

    // `vertical` selects the axis; out[p] = sum_k w_k in[fold(p + k - r)].
    fn pass(&self, input: &[f64], h: usize, w: usize, vertical: bool) -> Vec<f64> {
        let r = (self.kernel_size / 2) as isize;
        let mut out = vec![0.0; input.len()];
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (k, wk) in self.weights.iter().enumerate() {
                    let off = k as isize - r;
                    let (si, sj) = if vertical {
                        (fold(i as isize + off, h), j)
                    } else {
                        (i, fold(j as isize + off, w))
                    };
                    acc += wk * input[si * w + sj];
                }
                out[i * w + j] = acc;
            }
        }
        out
    }

    fn pass_adjoint(&self, grad: &[f64], h: usize, w: usize, vertical: bool) -> Vec<f64> {
        let r = (self.kernel_size / 2) as isize;
        let mut out = vec![0.0; grad.len()];
        for i in 0..h {
            for j in 0..w {
                let g = grad[i * w + j];
                for (k, wk) in self.weights.iter().enumerate() {
                    let off = k as isize - r;
                    let (si, sj) = if vertical {
                        (fold(i as isize + off, h), j)
                    } else {
                        (i, fold(j as isize + off, w))
                    };
                    out[si * w + sj] += wk * g;
                }
            }
        }
        out
    }
}

impl Default for GaussianSmoother {
    fn default() -> Self {
        Self::new(3, 0.5).expect("default smoothing parameters are valid")
    }
}

// Half-sample symmetric reflection: -1 -> 0, n -> n - 1.
fn fold(idx: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = idx.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Gaussian smoothing of a token map.
pub fn smooth(map: &TokenMap, kernel_size: usize, sigma: f64) -> Result<TokenMap> {
    GaussianSmoother::new(kernel_size, sigma)?.apply(map)
}

/// `exp(map) / sum(exp(map))` over all spatial cells.
pub fn spatial_softmax_normalize(map: &TokenMap) -> Result<NormalizedMap> {
    let values = softmax(map.grid.values(), 1.0)?;
    Ok(NormalizedMap { grid: Grid2D { height: map.grid.height, width: map.grid.width, values } })
}

pub fn spatial_softmax_vjp(normalized: &NormalizedMap, grad: &[f64]) -> Vec<f64> {
    softmax_vjp(normalized.values(), grad, 1.0)
}

/// Result of [`rescale_range`]. `degenerate` flags a constant attribute map.
#[derive(Debug, Clone, PartialEq)]
pub struct Rescaled {
    pub map: TokenMap,
    pub degenerate: bool,
}

/// Affinely maps `attr_map` onto the value range of `obj_map`.
///
/// A constant attribute map has no range to stretch; it becomes a constant
/// map at the object map's mean and the result is flagged degenerate.
pub fn rescale_range(attr_map: &TokenMap, obj_map: &TokenMap) -> Result<Rescaled> {
    if !attr_map.grid.same_shape(&obj_map.grid) {
        return Err(Error::Shape(format!(
            "attribute map {}x{} and object map {}x{} differ",
            attr_map.grid.height, attr_map.grid.width, obj_map.grid.height, obj_map.grid.width
        )));
    }
    let (a_min, a_max) = attr_map.grid.min_max();
    let (o_min, o_max) = obj_map.grid.min_max();
    let (values, degenerate) = if a_max > a_min {
        let ratio = (o_max - o_min) / (a_max - a_min);
        (attr_map.grid.values().iter().map(|a| o_min + (a - a_min) * ratio).collect(), false)
    } else {
        let mean = obj_map.grid.sum() / obj_map.grid.len() as f64;
        (vec![mean; attr_map.grid.len()], true)
    };
    Ok(Rescaled {
        map: TokenMap {
            grid: Grid2D { height: attr_map.grid.height, width: attr_map.grid.width, values },
            token_index: attr_map.token_index,
        },
        degenerate,
    })
}

/// Gradients of a downstream scalar with respect to the attribute and object maps.
///
/// The min and max enter through the first index attaining them.
pub fn rescale_range_vjp(attr_map: &TokenMap, obj_map: &TokenMap, grad: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = attr_map.grid.len();
    let mut g_attr = vec![0.0; n];
    let mut g_obj = vec![0.0; n];
    let (a_min, a_max) = attr_map.grid.min_max();
    if a_max <= a_min {
        let share = grad.iter().sum::<f64>() / n as f64;
        g_obj.iter_mut().for_each(|g| *g = share);
        return (g_attr, g_obj);
    }
    let (o_min, o_max) = obj_map.grid.min_max();
    let span = a_max - a_min;
    let ratio = (o_max - o_min) / span;
    let (mut to_amin, mut to_amax, mut to_omin, mut to_omax) = (0.0, 0.0, 0.0, 0.0);
    for (k, (&a, &g)) in attr_map.grid.values().iter().zip(grad).enumerate() {
        let u = (a - a_min) / span;
        g_attr[k] += g * ratio;
        to_amin += g * (u - 1.0) * ratio;
        to_amax -= g * u * ratio;
        to_omin += g * (1.0 - u);
        to_omax += g * u;
    }
    g_attr[attr_map.grid.argmin()] += to_amin;
    g_attr[attr_map.grid.argmax()] += to_amax;
    g_obj[obj_map.grid.argmin()] += to_omin;
    g_obj[obj_map.grid.argmax()] += to_omax;
    (g_attr, g_obj)
}
