//! Analytic gradients against central finite differences, 64-bit throughout.

mod common;

use common::*;
use gsn_core::attention::{
    cross_attention, cross_attention_vjp, rescale_range, rescale_range_vjp, spatial_softmax_normalize,
    spatial_softmax_vjp, AttentionStack, GaussianSmoother, Grid2D, Matrix, NormalizedMap, TokenMap,
};
use gsn_core::losses::{
    ae_loss, ae_loss_with_grad, attend_loss, attend_loss_with_grad, bind_loss, bind_loss_with_grad, jsd, jsd_grad,
    tv, tv_grad, Objective,
};
use gsn_core::nursing::{AttentionField, Latent};
use rand::Rng;

const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-6;

fn weighted(weights: &[f64], values: &[f64]) -> f64 {
    weights.iter().zip(values).map(|(a, b)| a * b).sum()
}

fn token_map(h: usize, w: usize, values: Vec<f64>) -> TokenMap {
    TokenMap { grid: Grid2D::new(h, w, values).unwrap(), token_index: 0 }
}

#[test]
fn cross_attention_features() {
    let mut r = rng(11);
    let (h, w, l, d) = (3, 4, 5, 6);
    let tokens = normals(&mut r, l * d);
    let spatial = normals(&mut r, h * w * d);
    let weights = normals(&mut r, h * w * l);
    let eval = |t: &[f64], s: &[f64]| {
        let stack = cross_attention(
            &Matrix::new(l, d, t.to_vec()).unwrap(),
            &Matrix::new(h * w, d, s.to_vec()).unwrap(),
            d,
            h,
            w,
        )
        .unwrap();
        weighted(&weights, stack.values())
    };
    let tm = Matrix::new(l, d, tokens.clone()).unwrap();
    let sm = Matrix::new(h * w, d, spatial.clone()).unwrap();
    let stack = cross_attention(&tm, &sm, d, h, w).unwrap();
    let (g_tok, g_sp) = cross_attention_vjp(&stack, &tm, &sm, d, &weights);
    let fd_tok = central_difference(&|t| eval(t, &spatial), &tokens, STEP);
    let fd_sp = central_difference(&|s| eval(&tokens, s), &spatial, STEP);
    assert!(relative_error(&g_tok.data, &fd_tok) <= TOLERANCE);
    assert!(relative_error(&g_sp.data, &fd_sp) <= TOLERANCE);
}

#[test]
fn smoothing_adjoint() {
    let mut r = rng(12);
    for (h, w) in [(3, 3), (3, 5), (4, 3), (8, 8)] {
        let s = GaussianSmoother::default();
        let x = normals(&mut r, h * w);
        let weights = normals(&mut r, h * w);
        let f = |v: &[f64]| weighted(&weights, s.apply(&token_map(h, w, v.to_vec())).unwrap().grid.values());
        let g = s.vjp(&weights, h, w);
        assert!(relative_error(&g, &central_difference(&f, &x, STEP)) <= TOLERANCE, "{h}x{w}");
    }
}

#[test]
fn spatial_softmax() {
    let mut r = rng(13);
    let x: Vec<f64> = (0..30).map(|_| r.random::<f64>()).collect();
    let weights = normals(&mut r, 30);
    let f = |v: &[f64]| weighted(&weights, spatial_softmax_normalize(&token_map(5, 6, v.to_vec())).unwrap().values());
    let n = spatial_softmax_normalize(&token_map(5, 6, x.clone())).unwrap();
    let g = spatial_softmax_vjp(&n, &weights);
    assert!(relative_error(&g, &central_difference(&f, &x, STEP)) <= TOLERANCE);
}

#[test]
fn rescale() {
    let mut r = rng(14);
    let a: Vec<f64> = (0..20).map(|_| r.random::<f64>()).collect();
    let o: Vec<f64> = (0..20).map(|_| r.random::<f64>()).collect();
    let weights = normals(&mut r, 20);
    let eval = |a: &[f64], o: &[f64]| {
        weighted(&weights, rescale_range(&token_map(4, 5, a.to_vec()), &token_map(4, 5, o.to_vec())).unwrap().map.grid.values())
    };
    let (ga, go) = rescale_range_vjp(&token_map(4, 5, a.clone()), &token_map(4, 5, o.clone()), &weights);
    assert!(relative_error(&ga, &central_difference(&|v| eval(v, &o), &a, STEP)) <= TOLERANCE);
    assert!(relative_error(&go, &central_difference(&|v| eval(&a, v), &o, STEP)) <= TOLERANCE);
}

#[test]
fn tv_and_jsd() {
    let mut r = rng(15);
    let x = normals(&mut r, 35);
    let f = |v: &[f64]| tv(&Grid2D::new(5, 7, v.to_vec()).unwrap());
    assert!(relative_error(&tv_grad(&Grid2D::new(5, 7, x.clone()).unwrap()), &central_difference(&f, &x, STEP)) <= TOLERANCE);

    let pmf = |r: &mut rand_chacha::ChaCha8Rng| {
        let v: Vec<f64> = (0..12).map(|_| 0.1 + r.random::<f64>()).collect();
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect::<Vec<_>>()
    };
    let (p, q) = (pmf(&mut r), pmf(&mut r));
    let nm = |v: &[f64]| NormalizedMap { grid: Grid2D::new(3, 4, v.to_vec()).unwrap() };
    let (gp, gq) = jsd_grad(&nm(&p), &nm(&q)).unwrap();
    let fp = central_difference(&|v| jsd(&nm(v), &nm(&q)).unwrap(), &p, STEP);
    let fq = central_difference(&|v| jsd(&nm(&p), &nm(v)).unwrap(), &q, STEP);
    assert!(relative_error(&gp, &fp) <= TOLERANCE);
    assert!(relative_error(&gq, &fq) <= TOLERANCE);
}

fn stack_fd(stack: &AttentionStack, f: &dyn Fn(&AttentionStack) -> f64) -> Vec<f64> {
    let (h, w, l) = (stack.height(), stack.width(), stack.token_count());
    central_difference(&|v| f(&AttentionStack::from_raw(h, w, l, v.to_vec()).unwrap()), stack.values(), STEP)
}

#[test]
fn losses_on_random_stacks() {
    let spec = oracle_spec();
    for seed in 0..5 {
        let mut r = rng(100 + seed);
        let stack = random_stack(&mut r, 8, 8, 4, 2.0);
        for smoothing in [true, false] {
            let (_, g) = attend_loss_with_grad(&stack, &spec, smoothing).unwrap();
            let fd = stack_fd(&stack, &|s| attend_loss(s, &spec, smoothing).unwrap().value);
            assert!(relative_error(&g, &fd) <= TOLERANCE, "attend seed {seed}");
            let (_, g) = bind_loss_with_grad(&stack, &spec, smoothing).unwrap();
            let fd = stack_fd(&stack, &|s| bind_loss(s, &spec, smoothing).unwrap().value);
            assert!(relative_error(&g, &fd) <= TOLERANCE, "bind seed {seed}");
            let (_, g) = ae_loss_with_grad(&stack, &spec, smoothing).unwrap();
            let fd = stack_fd(&stack, &|s| ae_loss(s, &spec, smoothing).unwrap().value);
            assert!(relative_error(&g, &fd) <= TOLERANCE, "ae seed {seed}");
        }
    }
}

#[test]
fn end_to_end_through_analytic_field() {
    let spec = oracle_spec();
    let objective = Objective::DivideAndBind { lambda: 1.0 };
    for seed in 0..3 {
        let inst = analytic_instance(seed);
        let (c, h, w) = inst.latent.shape();
        let (stack, tape) = inst.field.forward(&inst.latent).unwrap();
        let (_, g_stack) = objective.evaluate_with_grad(&stack, &spec, true).unwrap();
        let g = inst.field.backward(&tape, &g_stack).unwrap();
        let f = |v: &[f64]| {
            let z = Latent::new(c, h, w, v.to_vec()).unwrap();
            objective.evaluate(&inst.field.attention(&z).unwrap(), &spec, true).unwrap().value
        };
        let fd = central_difference(&f, inst.latent.values(), STEP);
        assert!(relative_error(&g, &fd) <= TOLERANCE, "seed {seed}");
    }
}
