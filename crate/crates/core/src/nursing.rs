//! Inference-time latent nursing.
//!
//! During the first `T - t_end` sampling steps the latent is moved against the
//! gradient of an attention loss, `z' = z - alpha_k * grad_z L`, before the
//! denoiser takes its regular step. Steps are counted by elapsed sampling
//! steps `k = 0..T`; the diffusion timestep is `t = T - k`, so the nursing
//! window `k < T - t_end` is exactly `t > t_end`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionStack, PromptSpec};
use crate::error::{Error, Result};
use crate::losses::{attend_loss, bind_loss, Objective};

/// Optimized latent variable, `channels x height x width`, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Latent {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "latent dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if values.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "latent {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("latent contains non-finite values".into()));
        }
        Ok(Self { channels, height, width, values })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, values: vec![0.0; channels * height * width] }
    }

    /// Standard normal draw from a ChaCha8 stream seeded with `seed`.
    pub fn standard_normal(channels: usize, height: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::standard_normal_from(channels, height, width, &mut rng)
    }

    pub fn standard_normal_from(channels: usize, height: usize, width: usize, rng: &mut impl rand::Rng) -> Self {
        let values = (0..channels * height * width).map(|_| StandardNormal.sample(rng)).collect();
        Self { channels, height, width, values }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.values[(c * self.height + i) * self.width + j]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.values[c * n..(c + 1) * n]
    }

    pub fn norm(&self) -> f64 {
        l2(&self.values)
    }
}

pub(crate) fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `z - alpha * gradient`, elementwise.
pub fn latent_update(z: &Latent, gradient: &[f64], alpha: f64) -> Result<Latent> {
    if gradient.len() != z.values.len() {
        return Err(Error::Shape(format!(
            "gradient has {} entries, latent has {}",
            gradient.len(),
            z.values.len()
        )));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Parameter(format!("step size must be finite and nonnegative, got {alpha}")));
    }
    let values = z.values.iter().zip(gradient).map(|(v, g)| v - alpha * g).collect();
    Ok(Latent { values, ..*z })
}

/// When and how hard to nurse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NursingSchedule {
    pub total_steps: usize,
    pub nursing_end: usize,
    /// One step size per elapsed sampling step `k`.
    pub step_sizes: Vec<f64>,
    pub lambda: f64,
    pub use_smoothing: bool,
}

pub const DEFAULT_TOTAL_STEPS: usize = 50;
pub const DEFAULT_NURSING_END: usize = 25;
pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const DEFAULT_BASE_STEP_SIZE: f64 = 20.0;

impl NursingSchedule {
    /// Step sizes decaying linearly, `alpha_k = alpha0 * (1 - k / T)`.
    pub fn linear(total_steps: usize, nursing_end: usize, alpha0: f64, lambda: f64, use_smoothing: bool) -> Result<Self> {
        let step_sizes = (0..total_steps)
            .map(|k| alpha0 * (1.0 - k as f64 / total_steps as f64))
            .collect();
        let schedule = Self { total_steps, nursing_end, step_sizes, lambda, use_smoothing };
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Validation("total_steps T must be positive".into()));
        }
        if self.nursing_end > self.total_steps {
            return Err(Error::Validation(format!(
                "nursing_end t_end = {} exceeds total_steps T = {} (need t_end <= T)",
                self.nursing_end, self.total_steps
            )));
        }
        if self.step_sizes.len() != self.total_steps {
            return Err(Error::Validation(format!(
                "expected {} step sizes, got {}",
                self.total_steps,
                self.step_sizes.len()
            )));
        }
        if let Some(k) = self.step_sizes.iter().position(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::Validation(format!("step size at k = {k} must be finite and >= 0")));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Validation(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        Ok(())
    }

    /// Whether elapsed step `k` falls inside the nursing window.
    pub fn in_window(&self, k: usize) -> bool {
        k < self.total_steps - self.nursing_end
    }

    pub fn timestep(&self, k: usize) -> usize {
        self.total_steps - k
    }

    /// Same window, all step sizes zero.
    pub fn disabled(&self) -> Self {
        Self { step_sizes: vec![0.0; self.total_steps], ..self.clone() }
    }
}

impl Default for NursingSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_TOTAL_STEPS, DEFAULT_NURSING_END, DEFAULT_BASE_STEP_SIZE, DEFAULT_LAMBDA, true)
            .expect("default schedule is valid")
    }
}

/// A differentiable map from a latent to an attention stack.
pub trait AttentionField {
    /// Whatever the backward pass needs from the forward pass.
    type Tape;

    fn token_count(&self) -> usize;

    fn forward(&self, z: &Latent) -> Result<(AttentionStack, Self::Tape)>;

    /// Gradient with respect to `z` of a scalar whose gradient on the stack is `grad_stack`.
    fn backward(&self, tape: &Self::Tape, grad_stack: &[f64]) -> Result<Vec<f64>>;

    fn attention(&self, z: &Latent) -> Result<AttentionStack> {
        self.forward(z).map(|(stack, _)| stack)
    }
}

/// Loss, gradient and update statistics of one sampling step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NursingRecord {
    pub step: usize,
    pub timestep: usize,
    pub nursed: bool,
    pub alpha: f64,
    pub loss: Option<f64>,
    pub selected_token: Option<usize>,
    /// `(attribute, object, jsd)` for every binding pair the objective evaluated.
    pub pair_jsd: Vec<(usize, usize, f64)>,
    pub grad_norm: f64,
    pub update_norm: f64,
}

impl NursingRecord {
    fn idle(step: usize, timestep: usize) -> Self {
        Self {
            step,
            timestep,
            nursed: false,
            alpha: 0.0,
            loss: None,
            selected_token: None,
            pair_jsd: Vec::new(),
            grad_norm: 0.0,
            update_norm: 0.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct NursingTrace {
    pub records: Vec<NursingRecord>,
}

impl NursingTrace {
    pub fn nursed_steps(&self) -> usize {
        self.records.iter().filter(|r| r.update_norm > 0.0).count()
    }
}

/// One nursing step at elapsed step `step`.
///
/// Inside the window this evaluates `objective` on `field(z)`, pulls its
/// gradient back to `z` and applies [`latent_update`] with `alpha_k`. Outside
/// it returns `z` untouched.
pub fn nurse_step<F: AttentionField>(
    z: &Latent,
    field: &F,
    spec: &PromptSpec,
    schedule: &NursingSchedule,
    objective: Objective,
    step: usize,
) -> Result<(Latent, NursingRecord)> {
    if step >= schedule.total_steps {
        return Err(Error::Index(format!("step {step} outside [0, {})", schedule.total_steps)));
    }
    let timestep = schedule.timestep(step);
    if !schedule.in_window(step) {
        return Ok((z.clone(), NursingRecord::idle(step, timestep)));
    }
    if field.token_count() != spec.sequence_length {
        return Err(Error::Contract(format!(
            "attention field has {} tokens, prompt spec has {}",
            field.token_count(),
            spec.sequence_length
        )));
    }
    let (stack, tape) = field.forward(z)?;
    if let Some((i, j, sum)) = stack.first_simplex_violation(1e-6) {
        return Err(Error::Contract(format!(
            "attention field output sums to {sum} at ({i}, {j})"
        )));
    }
    let (loss, grad_stack) = objective.evaluate_with_grad(&stack, spec, schedule.use_smoothing)?;
    let grad = field.backward(&tape, &grad_stack)?;
    let alpha = schedule.step_sizes[step];
    let updated = if alpha == 0.0 { z.clone() } else { latent_update(z, &grad, alpha)? };
    let update_norm = alpha * l2(&grad);
    let record = NursingRecord {
        step,
        timestep,
        nursed: true,
        alpha,
        loss: Some(loss.value),
        selected_token: loss.selected_token,
        pair_jsd: loss.pairs.iter().map(|p| (p.attribute, p.object, p.jsd_value)).collect(),
        grad_norm: l2(&grad),
        update_norm,
    };
    Ok((updated, record))
}

/// Sampling mode compared by the benchmark harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Vanilla,
    Ae,
    DivideAndBind,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Vanilla, Mode::Ae, Mode::DivideAndBind];

    pub fn name(&self) -> &'static str {
        match self {
            Mode::Vanilla => "vanilla",
            Mode::Ae => "ae",
            Mode::DivideAndBind => "divide_and_bind",
        }
    }

    pub fn objective(&self, lambda: f64) -> Option<Objective> {
        match self {
            Mode::Vanilla => None,
            Mode::Ae => Some(Objective::AttendExcite),
            Mode::DivideAndBind => Some(Objective::DivideAndBind { lambda }),
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Mode::Vanilla),
            "ae" => Ok(Mode::Ae),
            "divide_and_bind" | "dnb" => Ok(Mode::DivideAndBind),
            other => Err(Error::Validation(format!(
                "unknown mode '{other}' (expected vanilla, ae or divide_and_bind)"
            ))),
        }
    }
}

/// Output of one denoising step as seen by the sampling loop.
#[derive(Debug, Clone)]
pub struct DenoiseOutput {
    pub latent: Latent,
    pub attention: AttentionStack,
    pub predicted_clean: Latent,
}

/// A prompt-conditioned denoiser that the sampling loop can nurse.
pub trait GuidedModel: Sync {
    type Field<'a>: AttentionField
    where
        Self: 'a;

    /// `(channels, height, width)` of the latent.
    fn latent_shape(&self) -> (usize, usize, usize);

    fn token_count(&self) -> usize;

    /// Number of sampling steps the model's sampler is set up for.
    fn sampling_steps(&self) -> usize;

    /// Attention as a differentiable function of the latent at elapsed step `k`.
    fn attention_field(&self, k: usize) -> Self::Field<'_>;

    /// Denoising step taken at elapsed step `k`.
    fn denoise(&self, z: &Latent, k: usize) -> Result<DenoiseOutput>;
}

/// Per-step attention statistics observed on the denoiser's own attention,
/// recorded in every mode so that trajectories are comparable.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepObservation {
    pub step: usize,
    /// Attendance plus `lambda` times binding on the step's attention.
    /// Pair divergences are recorded whenever the prompt has pairs, whatever `lambda` is.
    pub loss: f64,
    pub min_tv: f64,
    pub pair_jsd: Vec<(usize, usize, f64)>,
}

#[derive(Debug, Clone)]
pub struct GuidedRun {
    pub latent: Latent,
    pub trace: NursingTrace,
    pub observations: Vec<StepObservation>,
    /// Attention recorded at every denoising step.
    pub attention: Vec<AttentionStack>,
    /// Predicted clean latents, only when requested.
    pub frames: Vec<Latent>,
}

impl GuidedRun {
    pub fn final_attention(&self) -> &AttentionStack {
        self.attention.last().expect("a run has at least one step")
    }
}

/// Full sampling run from the seeded initial latent.
///
/// Every step applies [`nurse_step`] (for the guided modes) and then the
/// model's denoising step. The whole run is a pure function of its inputs.
pub fn run_guided_sampling<M: GuidedModel>(
    model: &M,
    spec: &PromptSpec,
    schedule: &NursingSchedule,
    seed: u64,
    mode: Mode,
    keep_frames: bool,
) -> Result<GuidedRun> {
    schedule.validate()?;
    spec.validate()?;
    if model.token_count() != spec.sequence_length {
        return Err(Error::Contract(format!(
            "model is conditioned on {} tokens, prompt spec has {}",
            model.token_count(),
            spec.sequence_length
        )));
    }
    if model.sampling_steps() != schedule.total_steps {
        return Err(Error::Contract(format!(
            "model samples in {} steps, schedule has T = {}",
            model.sampling_steps(),
            schedule.total_steps
        )));
    }
    // Without attribute pairs there is nothing to bind, so the binding weight drops out.
    let lambda = if spec.attribute_pairs.is_empty() { 0.0 } else { schedule.lambda };
    let objective = mode.objective(lambda);
    let monitor_lambda = lambda;

    let (c, h, w) = model.latent_shape();
    let mut z = Latent::standard_normal(c, h, w, seed);
    let mut trace = NursingTrace::default();
    let mut observations = Vec::with_capacity(schedule.total_steps);
    let mut attention = Vec::with_capacity(schedule.total_steps);
    let mut frames = Vec::new();

    for k in 0..schedule.total_steps {
        let record = match objective {
            Some(obj) => {
                let field = model.attention_field(k);
                let (next, record) = nurse_step(&z, &field, spec, schedule, obj, k)?;
                z = next;
                record
            }
            None => NursingRecord::idle(k, schedule.timestep(k)),
        };
        trace.records.push(record);

        let out = model.denoise(&z, k)?;
        let attend = attend_loss(&out.attention, spec, schedule.use_smoothing)?;
        let min_tv = -attend.value;
        let (bind_value, pair_jsd) = if spec.attribute_pairs.is_empty() {
            (0.0, Vec::new())
        } else {
            let bind = bind_loss(&out.attention, spec, schedule.use_smoothing)?;
            (bind.value, bind.pairs.iter().map(|p| (p.attribute, p.object, p.jsd_value)).collect())
        };
        observations.push(StepObservation { step: k, loss: attend.value + monitor_lambda * bind_value, min_tv, pair_jsd });
        if keep_frames {
            frames.push(out.predicted_clean);
        }
        attention.push(out.attention);
        z = out.latent;
    }
    Ok(GuidedRun { latent: z, trace, observations, attention, frames })
}

/// Worst-object total variation of a stack under the spec's preprocessing.
pub fn worst_object_tv(stack: &AttentionStack, spec: &PromptSpec, use_smoothing: bool) -> Result<f64> {
    let loss = crate::losses::attend_loss(stack, spec, use_smoothing)?;
    Ok(-loss.value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn update_examples() {
        let z = Latent::new(1, 1, 2, vec![1.0, 1.0]).unwrap();
        assert_eq!(latent_update(&z, &[2.0, -2.0], 0.5).unwrap().values(), &[0.0, 2.0]);
        let z = Latent::new(1, 2, 2, vec![0.3, -0.0, 1e-300, -7.0]).unwrap();
        let same = latent_update(&z, &[0.0; 4], 3.0).unwrap();
        let bits = |l: &Latent| l.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&same), bits(&z));
        let same = latent_update(&z, &[1.0, 2.0, 3.0, 4.0], 0.0).unwrap();
        assert_eq!(bits(&same), bits(&z));
        assert!(matches!(latent_update(&z, &[1.0], 0.1), Err(Error::Shape(_))));
    }

    #[test]
    fn schedule_defaults_and_window() {
        let s = NursingSchedule::default();
        assert_eq!(s.total_steps, 50);
        assert_eq!(s.nursing_end, 25);
        assert_eq!(s.lambda, 1.0);
        assert_eq!((0..50).filter(|&k| s.in_window(k)).count(), 25);
        assert_eq!(s.step_sizes[0], 20.0);
        assert_eq!(s.step_sizes[25], 10.0);
        assert_eq!(s.timestep(0), 50);
        assert!(s.in_window(24) && !s.in_window(25));
        assert!(NursingSchedule::linear(50, 51, 20.0, 1.0, true).is_err());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("dnb".parse::<Mode>().unwrap(), Mode::DivideAndBind);
        assert_eq!("ae".parse::<Mode>().unwrap(), Mode::Ae);
        assert!("foo".parse::<Mode>().is_err());
    }
}
