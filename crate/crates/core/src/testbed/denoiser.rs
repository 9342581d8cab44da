//! A small trainable noise predictor with one cross-attention block.
//!
//! ```text
//! x -> conv3x3 + time bias -> silu -> conv3x3 -> silu = h
//! A = softmax_l(<h Wq, e_l Wk> / sqrt(dk))            (the attention stack)
//! g = h + A (E Wv)
//! g -> conv3x3 -> silu -> conv3x3 = noise estimate
//! ```
//!
//! Queries come from spatial features and keys and values from the frozen
//! token embeddings, so the attention stack is differentiable in the latent.
//! Scores pass through `c * tanh(s / c)` before the softmax, which keeps every
//! token's share strictly positive after training.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{dot, softmax_in_place, softmax_vjp, AttentionStack, Matrix};
use crate::error::{Error, Result};
use crate::nursing::{AttentionField, DenoiseOutput, GuidedModel, Latent};
use crate::testbed::embedding::TokenEmbeddingTable;
use crate::testbed::nn::{
    conv3x3, conv3x3_backward, conv3x3_input_grad, matmul, matmul_input_grad, matmul_weight_grad, silu, silu_grad,
    ConvShape,
};
use crate::testbed::scene::SceneSample;
use crate::testbed::schedule::{add_noise, DdimSampler, NoiseSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyDenoiserConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub features: usize,
    pub key_dim: usize,
    pub embed_dim: usize,
    pub vocabulary_size: usize,
    pub time_features: usize,
    pub train_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub table_seed: u64,
}

impl Default for ToyDenoiserConfig {
    fn default() -> Self {
        Self {
            channels: crate::testbed::scene::SCENE_CHANNELS,
            height: 16,
            width: 16,
            features: 16,
            key_dim: 8,
            embed_dim: 8,
            vocabulary_size: crate::testbed::scene::VOCABULARY_SIZE,
            time_features: 8,
            train_timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            table_seed: 0,
        }
    }
}

impl ToyDenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.channels,
            self.height,
            self.width,
            self.features,
            self.key_dim,
            self.embed_dim,
            self.vocabulary_size,
            self.time_features,
            self.train_timesteps,
        ];
        if dims.contains(&0) {
            return Err(Error::Parameter("denoiser dimensions must be positive".into()));
        }
        if !self.time_features.is_multiple_of(2) {
            return Err(Error::Parameter("time features must be even".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.train_timesteps, self.beta_start, self.beta_end)
    }

    pub fn table(&self) -> Result<TokenEmbeddingTable> {
        TokenEmbeddingTable::random(self.vocabulary_size, self.embed_dim, self.table_seed)
    }
}

/// Offsets of every parameter block inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub wt: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
    pub wq: Range<usize>,
    pub wk: Range<usize>,
    pub wv: Range<usize>,
    pub w3: Range<usize>,
    pub b3: Range<usize>,
    pub wo: Range<usize>,
    pub bo: Range<usize>,
    pub total: usize,
}

impl Layout {
    fn new(c: &ToyDenoiserConfig) -> Self {
        let (ch, f, dk, d) = (c.channels, c.features, c.key_dim, c.embed_dim);
        let mut at = 0;
        let mut next = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let w1 = next(9 * ch * f);
        let b1 = next(f);
        let wt = next(c.time_features * f);
        let w2 = next(9 * f * f);
        let b2 = next(f);
        let wq = next(f * dk);
        let wk = next(d * dk);
        let wv = next(d * f);
        let w3 = next(9 * f * f);
        let b3 = next(f);
        let wo = next(9 * f * ch);
        let bo = next(ch);
        let total = at;
        Self { w1, b1, wt, w2, b2, wq, wk, wv, w3, b3, wo, bo, total }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser {
    config: ToyDenoiserConfig,
    layout: Layout,
    params: Vec<f64>,
    table: TokenEmbeddingTable,
    schedule: NoiseSchedule,
}

/// Intermediate values of the layers up to the attention stack.
pub struct Trunk {
    x: Vec<f64>,
    temb: Vec<f64>,
    a1: Vec<f64>,
    h1: Vec<f64>,
    a2: Vec<f64>,
    h2: Vec<f64>,
    emb: Matrix,
    q: Matrix,
    k: Matrix,
    squashed: Vec<f64>,
    stack: AttentionStack,
}

/// Everything the training backward pass needs.
struct Activations {
    trunk: Trunk,
    v: Vec<f64>,
    g: Vec<f64>,
    a3: Vec<f64>,
    h3: Vec<f64>,
    out: Vec<f64>,
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

impl ToyDenoiser {
    /// Freshly initialized model; parameters are exactly representable in 32 bits.
    pub fn init(config: ToyDenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; layout.total];
        let (ch, f, d) = (config.channels, config.features, config.embed_dim);
        let blocks = [
            (layout.w1.clone(), (2.0 / (9 * ch) as f64).sqrt()),
            (layout.wt.clone(), (1.0 / config.time_features as f64).sqrt()),
            (layout.w2.clone(), (2.0 / (9 * f) as f64).sqrt()),
            (layout.wq.clone(), (1.0 / f as f64).sqrt()),
            (layout.wk.clone(), (1.0 / d as f64).sqrt()),
            (layout.wv.clone(), (1.0 / d as f64).sqrt()),
            (layout.w3.clone(), (2.0 / (9 * f) as f64).sqrt()),
            (layout.wo.clone(), 0.1 * (1.0 / (9 * f) as f64).sqrt()),
        ];
        for (range, std) in blocks {
            let dist = Normal::new(0.0, std).expect("positive std");
            for p in &mut params[range] {
                *p = round_f32(dist.sample(&mut rng));
            }
        }
        Self::from_parts(config, params)
    }

    pub(crate) fn from_parts(config: ToyDenoiserConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::Shape(format!(
                "configuration needs {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidInput("non-finite model parameter".into()));
        }
        let table = config.table()?;
        let schedule = config.schedule()?;
        Ok(Self { config, layout, params, table, schedule })
    }

    pub fn config(&self) -> &ToyDenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn table(&self) -> &TokenEmbeddingTable {
        &self.table
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn p(&self, r: &Range<usize>) -> &[f64] {
        &self.params[r.clone()]
    }

    fn pixels(&self) -> usize {
        self.config.height * self.config.width
    }

    fn conv_in(&self) -> ConvShape {
        ConvShape { height: self.config.height, width: self.config.width, c_in: self.config.channels, c_out: self.config.features }
    }

    fn conv_mid(&self) -> ConvShape {
        ConvShape { height: self.config.height, width: self.config.width, c_in: self.config.features, c_out: self.config.features }
    }

    fn conv_out(&self) -> ConvShape {
        ConvShape { height: self.config.height, width: self.config.width, c_in: self.config.features, c_out: self.config.channels }
    }

    fn attention_scale(&self) -> f64 {
        1.0 / (self.config.key_dim as f64).sqrt()
    }

    fn time_embedding(&self, t: usize) -> Vec<f64> {
        let tau = t as f64 / self.config.train_timesteps as f64;
        let half = self.config.time_features / 2;
        let mut out = Vec::with_capacity(2 * half);
        for i in 0..half {
            let w = std::f64::consts::PI * (1u64 << i) as f64;
            out.push((w * tau).sin());
            out.push((w * tau).cos());
        }
        out
    }

    fn check_input(&self, z: &Latent, tokens: &[usize], t: usize) -> Result<()> {
        let c = &self.config;
        if z.shape() != (c.channels, c.height, c.width) {
            return Err(Error::Shape(format!(
                "latent shape {:?} does not match the model's {:?}",
                z.shape(),
                (c.channels, c.height, c.width)
            )));
        }
        if tokens.is_empty() {
            return Err(Error::InvalidInput("token list is empty".into()));
        }
        if t >= c.train_timesteps {
            return Err(Error::Index(format!("timestep {t} outside [0, {})", c.train_timesteps)));
        }
        Ok(())
    }

    fn trunk(&self, z: &Latent, tokens: &[usize], t: usize) -> Result<Trunk> {
        self.check_input(z, tokens, t)?;
        let l = &self.layout;
        let (c, f, dk) = (self.config.channels, self.config.features, self.config.key_dim);
        let n = self.pixels();
        let mut x = vec![0.0; n * c];
        for ch in 0..c {
            for (p, v) in z.channel(ch).iter().enumerate() {
                x[p * c + ch] = *v;
            }
        }
        let temb = self.time_embedding(t);
        let tbias = matmul(&temb, 1, temb.len(), self.p(&l.wt), f);
        let mut a1 = conv3x3(self.conv_in(), &x, self.p(&l.w1), self.p(&l.b1));
        for row in a1.chunks_mut(f) {
            for (a, b) in row.iter_mut().zip(&tbias) {
                *a += b;
            }
        }
        let h1: Vec<f64> = a1.iter().map(|&v| silu(v)).collect();
        let a2 = conv3x3(self.conv_mid(), &h1, self.p(&l.w2), self.p(&l.b2));
        let h2: Vec<f64> = a2.iter().map(|&v| silu(v)).collect();
        let emb = self.table.lookup(tokens)?;
        let q = Matrix::new(n, dk, matmul(&h2, n, f, self.p(&l.wq), dk))?;
        let k = Matrix::new(tokens.len(), dk, matmul(&emb.data, tokens.len(), self.config.embed_dim, self.p(&l.wk), dk))?;
        let (stack, squashed) = bounded_attention(&k, &q, self.attention_scale(), self.config.height, self.config.width)?;
        Ok(Trunk { x, temb, a1, h1, a2, h2, emb, q, k, squashed, stack })
    }

    fn forward(&self, z: &Latent, tokens: &[usize], t: usize) -> Result<Activations> {
        let trunk = self.trunk(z, tokens, t)?;
        let lay = &self.layout;
        let f = self.config.features;
        let len = tokens.len();
        let v = matmul(&trunk.emb.data, len, self.config.embed_dim, self.p(&lay.wv), f);
        let u = matmul(trunk.stack.values(), self.pixels(), len, &v, f);
        let g: Vec<f64> = trunk.h2.iter().zip(&u).map(|(a, b)| a + b).collect();
        let a3 = conv3x3(self.conv_mid(), &g, self.p(&lay.w3), self.p(&lay.b3));
        let h3: Vec<f64> = a3.iter().map(|&v| silu(v)).collect();
        let out = conv3x3(self.conv_out(), &h3, self.p(&lay.wo), self.p(&lay.bo));
        Ok(Activations { trunk, v, g, a3, h3, out })
    }

    fn to_latent(&self, hwc: &[f64]) -> Result<Latent> {
        let c = self.config.channels;
        let n = self.pixels();
        let mut values = vec![0.0; n * c];
        for p in 0..n {
            for ch in 0..c {
                values[ch * n + p] = hwc[p * c + ch];
            }
        }
        Latent::new(c, self.config.height, self.config.width, values)
    }

    /// Parameter gradient of `<grad_out, eps_hat>`.
    fn backward(&self, act: &Activations, grad_out: &[f64], grads: &mut [f64]) {
        let l = &self.layout;
        let (f, dk, d) = (self.config.features, self.config.key_dim, self.config.embed_dim);
        let n = self.pixels();
        let tr = &act.trunk;
        let len = tr.emb.rows;
        let scale = self.attention_scale();

        let (gw, gb) = split_two(grads, &l.wo, &l.bo);
        let g_h3 = conv3x3_backward(self.conv_out(), &act.h3, self.p(&l.wo), grad_out, gw, gb, true).unwrap();
        let g_a3: Vec<f64> = g_h3.iter().zip(&act.a3).map(|(g, a)| g * silu_grad(*a)).collect();
        let (gw, gb) = split_two(grads, &l.w3, &l.b3);
        let g_g = conv3x3_backward(self.conv_mid(), &act.g, self.p(&l.w3), &g_a3, gw, gb, true).unwrap();

        // u = A V: gradients for A and V.
        let mut g_attn = vec![0.0; n * len];
        let mut g_v = vec![0.0; len * f];
        let attn = tr.stack.values();
        for p in 0..n {
            let gu = &g_g[p * f..(p + 1) * f];
            for t in 0..len {
                let vrow = &act.v[t * f..(t + 1) * f];
                g_attn[p * len + t] = dot(gu, vrow);
                let a = attn[p * len + t];
                for (gv, g) in g_v[t * f..(t + 1) * f].iter_mut().zip(gu) {
                    *gv += a * g;
                }
            }
        }
        matmul_weight_grad(&tr.emb.data, len, d, &g_v, f, &mut grads[l.wv.clone()]);
        let (g_k, g_q) = bounded_attention_vjp(tr, scale, &g_attn);
        matmul_weight_grad(&tr.emb.data, len, d, &g_k.data, dk, &mut grads[l.wk.clone()]);
        matmul_weight_grad(&tr.h2, n, f, &g_q.data, dk, &mut grads[l.wq.clone()]);
        let g_h2_q = matmul_input_grad(&g_q.data, n, f, self.p(&l.wq), dk);

        let g_a2: Vec<f64> = g_g
            .iter()
            .zip(&g_h2_q)
            .zip(&tr.a2)
            .map(|((a, b), x)| (a + b) * silu_grad(*x))
            .collect();
        let (gw, gb) = split_two(grads, &l.w2, &l.b2);
        let g_h1 = conv3x3_backward(self.conv_mid(), &tr.h1, self.p(&l.w2), &g_a2, gw, gb, true).unwrap();
        let g_a1: Vec<f64> = g_h1.iter().zip(&tr.a1).map(|(g, a)| g * silu_grad(*a)).collect();
        let (gw, gb) = split_two(grads, &l.w1, &l.b1);
        conv3x3_backward(self.conv_in(), &tr.x, self.p(&l.w1), &g_a1, gw, gb, false);
        let mut g_tbias = vec![0.0; f];
        for row in g_a1.chunks(f) {
            for (a, b) in g_tbias.iter_mut().zip(row) {
                *a += b;
            }
        }
        matmul_weight_grad(&tr.temb, 1, tr.temb.len(), &g_tbias, f, &mut grads[l.wt.clone()]);
    }

    /// Latent gradient of a scalar whose gradient on the attention stack is `grad_stack`.
    fn attention_backward(&self, tr: &Trunk, grad_stack: &[f64]) -> Result<Vec<f64>> {
        if grad_stack.len() != tr.stack.values().len() {
            return Err(Error::Shape("gradient does not match the attention stack".into()));
        }
        let l = &self.layout;
        let (f, dk) = (self.config.features, self.config.key_dim);
        let n = self.pixels();
        let (_, g_q) = bounded_attention_vjp(tr, self.attention_scale(), grad_stack);
        let g_h2 = matmul_input_grad(&g_q.data, n, f, self.p(&l.wq), dk);
        let g_a2: Vec<f64> = g_h2.iter().zip(&tr.a2).map(|(g, a)| g * silu_grad(*a)).collect();
        let g_h1 = conv3x3_input_grad(self.conv_mid(), self.p(&l.w2), &g_a2);
        let g_a1: Vec<f64> = g_h1.iter().zip(&tr.a1).map(|(g, a)| g * silu_grad(*a)).collect();
        let g_x = conv3x3_input_grad(self.conv_in(), self.p(&l.w1), &g_a1);
        Ok(self.to_latent(&g_x)?.values().to_vec())
    }

    /// Mean squared noise-prediction error over explicit `(sample, t, eps)` triples.
    fn mse(&self, z0: &Latent, tokens: &[usize], t: usize, eps: &Latent) -> Result<(f64, Activations)> {
        let z_t = add_noise(z0, eps, t, &self.schedule)?;
        let act = self.forward(&z_t, tokens, t)?;
        let c = self.config.channels;
        let n = self.pixels();
        let mut loss = 0.0;
        for p in 0..n {
            for ch in 0..c {
                let diff = act.out[p * c + ch] - eps.values()[ch * n + p];
                loss += diff * diff;
            }
        }
        Ok((loss / (n * c) as f64, act))
    }
}

/// Bound on the magnitude of an attention score.
const SCORE_BOUND: f64 = 4.0;

/// Softmax over `c * tanh(scale * <q_p, k_l> / c)`; also returns the tanh values.
fn bounded_attention(k: &Matrix, q: &Matrix, scale: f64, h: usize, w: usize) -> Result<(AttentionStack, Vec<f64>)> {
    let tokens = k.rows;
    let mut values = vec![0.0; q.rows * tokens];
    let mut squashed = vec![0.0; q.rows * tokens];
    for p in 0..q.rows {
        let row = &mut values[p * tokens..(p + 1) * tokens];
        for (l, out) in row.iter_mut().enumerate() {
            let u = (scale * dot(q.row(p), k.row(l)) / SCORE_BOUND).tanh();
            squashed[p * tokens + l] = u;
            *out = SCORE_BOUND * u;
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite attention features".into()));
        }
        softmax_in_place(row, 1.0);
    }
    Ok((AttentionStack::from_raw(h, w, tokens, values)?, squashed))
}

/// `(grad_k, grad_q)` of a scalar whose gradient on the stack is `grad`.
fn bounded_attention_vjp(tr: &Trunk, scale: f64, grad: &[f64]) -> (Matrix, Matrix) {
    let tokens = tr.k.rows;
    let dk = tr.k.cols;
    let mut g_k = Matrix::zeros(tokens, dk);
    let mut g_q = Matrix::zeros(tr.q.rows, dk);
    for (p, (probs, g)) in tr.stack.values().chunks(tokens).zip(grad.chunks(tokens)).enumerate() {
        let g_b = softmax_vjp(probs, g, 1.0);
        for l in 0..tokens {
            let u = tr.squashed[p * tokens + l];
            let gs = g_b[l] * (1.0 - u * u) * scale;
            if gs == 0.0 {
                continue;
            }
            let (qrow, krow) = (tr.q.row(p), tr.k.row(l));
            for a in 0..dk {
                g_q.data[p * dk + a] += gs * krow[a];
                g_k.data[l * dk + a] += gs * qrow[a];
            }
        }
    }
    (g_k, g_q)
}

fn split_two<'a>(grads: &'a mut [f64], w: &Range<usize>, b: &Range<usize>) -> (&'a mut [f64], &'a mut [f64]) {
    debug_assert_eq!(w.end, b.start);
    let (head, tail) = grads[w.start..b.end].split_at_mut(w.len());
    (head, tail)
}

/// Anything that predicts noise and exposes its attention for one step.
pub trait NoisePredictor {
    fn predict_noise(&self, z_t: &Latent, tokens: &[usize], t: usize) -> Result<(Latent, AttentionStack)>;
}

impl NoisePredictor for ToyDenoiser {
    fn predict_noise(&self, z_t: &Latent, tokens: &[usize], t: usize) -> Result<(Latent, AttentionStack)> {
        let act = self.forward(z_t, tokens, t)?;
        Ok((self.to_latent(&act.out)?, act.trunk.stack))
    }
}

fn denoise_full<P: NoisePredictor>(
    model: &P,
    z_t: &Latent,
    tokens: &[usize],
    t: usize,
    sampler: &DdimSampler,
) -> Result<DenoiseOutput> {
    if t == 0 {
        return Err(Error::Index("denoising needs t >= 1".into()));
    }
    let train_t = sampler.train_timestep(t)?;
    let (eps, attention) = model.predict_noise(z_t, tokens, train_t)?;
    let (latent, predicted_clean) = sampler.step(z_t, &eps, t)?;
    Ok(DenoiseOutput { latent, attention, predicted_clean })
}

/// Deterministic update from sampling index `t` to `t - 1`.
pub fn denoise_step<P: NoisePredictor>(
    model: &P,
    z_t: &Latent,
    tokens: &[usize],
    t: usize,
    sampler: &DdimSampler,
) -> Result<(Latent, AttentionStack)> {
    let out = denoise_full(model, z_t, tokens, t, sampler)?;
    Ok((out.latent, out.attention))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 5000, batch_size: 8, learning_rate: 3e-3, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    /// Mean batch loss per optimizer step.
    pub losses: Vec<f64>,
}

const GRAD_CLIP: f64 = 5.0;

/// Adam on the noise-prediction loss; the result is rounded to 32-bit parameters.
pub fn train_toy_denoiser(
    dataset: &[SceneSample],
    config: ToyDenoiserConfig,
    train: &TrainConfig,
) -> Result<(ToyDenoiser, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::Parameter("training dataset is empty".into()));
    }
    if train.batch_size == 0 || !(train.learning_rate > 0.0 && train.learning_rate.is_finite()) {
        return Err(Error::Parameter("batch size and learning rate must be positive".into()));
    }
    let mut model = ToyDenoiser::init(config, train.seed)?;
    let shape = (model.config.channels, model.config.height, model.config.width);
    if let Some(s) = dataset.iter().find(|s| s.latent.shape() != shape) {
        return Err(Error::Shape(format!("sample shape {:?} does not match model {:?}", s.latent.shape(), shape)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    rng.set_stream(1);
    let total = model.layout.total;
    let (mut m, mut v) = (vec![0.0; total], vec![0.0; total]);
    let (b1, b2, eps_adam) = (0.9f64, 0.999f64, 1e-8);
    let mut losses = Vec::with_capacity(train.steps);
    let train_t = model.config.train_timesteps;
    for step in 0..train.steps {
        let mut grads = vec![0.0; total];
        let mut batch_loss = 0.0;
        for _ in 0..train.batch_size {
            let sample = &dataset[rng.random_range(0..dataset.len())];
            let t = rng.random_range(0..train_t);
            let (c, h, w) = shape;
            let eps = Latent::standard_normal_from(c, h, w, &mut rng);
            let (loss, act) = model.mse(&sample.latent, &sample.tokens, t, &eps).map_err(|e| {
                Error::Training(format!(
                    "forward pass failed at step {step} ({e}); previous batch loss {}",
                    losses.last().copied().unwrap_or(f64::NAN)
                ))
            })?;
            batch_loss += loss;
            let n = (c * h * w) as f64;
            let scale = 2.0 / (n * train.batch_size as f64);
            let hw = h * w;
            let mut g = vec![0.0; c * hw];
            for p in 0..hw {
                for ch in 0..c {
                    g[p * c + ch] = scale * (act.out[p * c + ch] - eps.values()[ch * hw + p]);
                }
            }
            model.backward(&act, &g, &mut grads);
        }
        batch_loss /= train.batch_size as f64;
        if !batch_loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            let last = losses.last().copied().unwrap_or(f64::NAN);
            return Err(Error::Training(format!(
                "loss became {batch_loss} at step {step} (previous batch loss {last}, learning rate {})",
                train.learning_rate
            )));
        }
        losses.push(batch_loss);
        let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
        let clip = if norm > GRAD_CLIP { GRAD_CLIP / norm } else { 1.0 };
        let progress = step as f64 / train.steps as f64;
        let lr = train.learning_rate * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        let n = (step + 1) as i32;
        let (c1, c2) = (1.0 - b1.powi(n), 1.0 - b2.powi(n));
        for i in 0..total {
            let g = grads[i] * clip;
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            model.params[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps_adam);
        }
    }
    for p in &mut model.params {
        *p = round_f32(*p);
    }
    Ok((model, TrainReport { losses }))
}

/// Mean noise-prediction loss with noise and timesteps fixed by `seed`.
pub fn heldout_loss(model: &ToyDenoiser, samples: &[SceneSample], seed: u64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Parameter("held-out set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = (model.config.channels, model.config.height, model.config.width);
    let mut total = 0.0;
    for s in samples {
        let t = rng.random_range(0..model.config.train_timesteps);
        let eps = Latent::standard_normal_from(c, h, w, &mut rng);
        total += model.mse(&s.latent, &s.tokens, t, &eps)?.0;
    }
    Ok(total / samples.len() as f64)
}

/// A trained model bound to one prompt and a sampler.
pub struct PromptedDenoiser<'m> {
    model: &'m ToyDenoiser,
    tokens: Vec<usize>,
    sampler: DdimSampler,
}

impl<'m> PromptedDenoiser<'m> {
    pub fn new(model: &'m ToyDenoiser, tokens: Vec<usize>, sampling_steps: usize) -> Result<Self> {
        model.table.lookup(&tokens)?;
        let sampler = DdimSampler::new(model.schedule.clone(), sampling_steps)?;
        Ok(Self { model, tokens, sampler })
    }

    pub fn sampler(&self) -> &DdimSampler {
        &self.sampler
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }
}

/// The prompted model's attention at a fixed training timestep.
pub struct DenoiserAttention<'a> {
    model: &'a ToyDenoiser,
    tokens: &'a [usize],
    t: usize,
}

impl AttentionField for DenoiserAttention<'_> {
    type Tape = Trunk;

    fn token_count(&self) -> usize {
        self.tokens.len()
    }

    fn forward(&self, z: &Latent) -> Result<(AttentionStack, Self::Tape)> {
        let trunk = self.model.trunk(z, self.tokens, self.t)?;
        Ok((trunk.stack.clone(), trunk))
    }

    fn backward(&self, tape: &Self::Tape, grad_stack: &[f64]) -> Result<Vec<f64>> {
        self.model.attention_backward(tape, grad_stack)
    }
}

impl GuidedModel for PromptedDenoiser<'_> {
    type Field<'a>
        = DenoiserAttention<'a>
    where
        Self: 'a;

    fn latent_shape(&self) -> (usize, usize, usize) {
        let c = &self.model.config;
        (c.channels, c.height, c.width)
    }

    fn token_count(&self) -> usize {
        self.tokens.len()
    }

    fn sampling_steps(&self) -> usize {
        self.sampler.steps()
    }

    fn attention_field(&self, k: usize) -> DenoiserAttention<'_> {
        let t = self.sampler.steps() - k.min(self.sampler.steps() - 1);
        let t = self.sampler.train_timestep(t).expect("index inside the sampler range");
        DenoiserAttention { model: self.model, tokens: &self.tokens, t }
    }

    fn denoise(&self, z: &Latent, k: usize) -> Result<DenoiseOutput> {
        if k >= self.sampler.steps() {
            return Err(Error::Index(format!("step {k} outside [0, {})", self.sampler.steps())));
        }
        denoise_full(self.model, z, &self.tokens, self.sampler.steps() - k, &self.sampler)
    }
}
