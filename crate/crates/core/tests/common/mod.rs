#![allow(dead_code)]

use gsn_core::attention::{softmax, AttentionStack, PromptSpec};
use gsn_core::nursing::Latent;
use gsn_core::testbed::{AnalyticAttention, TokenEmbeddingTable};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Softmax over random scores at every location; entries are strictly
/// positive and almost surely free of ties.
pub fn random_stack(rng: &mut ChaCha8Rng, h: usize, w: usize, l: usize, spread: f64) -> AttentionStack {
    let mut values = Vec::with_capacity(h * w * l);
    for _ in 0..h * w {
        values.extend(softmax(&normals(rng, l), spread).unwrap());
    }
    AttentionStack::new(h, w, l, values).unwrap()
}

/// Independent neighbour-pair enumeration in row-major order of the first cell.
pub fn brute_tv(values: &[f64], h: usize, w: usize) -> f64 {
    let n = h * w;
    let mut acc = 0.0;
    for p in 0..n {
        let (pi, pj) = (p / w, p % w);
        for q in p + 1..n {
            let (qi, qj) = (q / w, q % w);
            if pi.abs_diff(qi) + pj.abs_diff(qj) == 1 {
                acc += (values[q] - values[p]).abs();
            }
        }
    }
    acc
}

pub fn central_difference(f: &dyn Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `||a - b|| / max(||a||, ||b||)`; zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Four-token prompt used by the gradient and descent oracles: objects at
/// positions 1 and 2, the attribute at 3 bound to object 1.
pub fn oracle_spec() -> PromptSpec {
    PromptSpec::new(4, vec![1, 2], vec![(3, 1)]).unwrap()
}

pub struct AnalyticInstance {
    pub field: AnalyticAttention,
    pub latent: Latent,
}

/// Jittered 8x8 analytic field over four tokens with a seeded latent.
pub fn analytic_instance(seed: u64) -> AnalyticInstance {
    let dim = 4;
    let table = TokenEmbeddingTable::random(4, dim, 1000 + seed).unwrap();
    let mut r = rng(seed);
    let scale = 1.0 + r.random::<f64>();
    let field = AnalyticAttention::with_scale(&table, &[0, 1, 2, 3], scale).unwrap();
    let latent = Latent::standard_normal(dim, 8, 8, seed);
    AnalyticInstance { field, latent }
}

/// Every file under `root`, keyed by its path relative to `root`.
pub fn read_tree(root: &std::path::Path) -> std::collections::BTreeMap<std::path::PathBuf, Vec<u8>> {
    let mut out = std::collections::BTreeMap::new();
    let mut pending = vec![root.to_path_buf()];
    while let Some(dir) = pending.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                pending.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

pub struct Output {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

/// Runs the `gsn` binary built for this test crate.
pub fn gsn(args: &[&str]) -> Output {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_gsn")).args(args).output().unwrap();
    Output {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}
