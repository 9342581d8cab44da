//! Seeded comparisons of vanilla, Attend-and-Excite and Divide-and-Bind sampling.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nursing::{run_guided_sampling, Latent, Mode, NursingSchedule};
use crate::testbed::denoiser::{PromptedDenoiser, ToyDenoiser};
use crate::testbed::occurrence::{count_occurrences, OCCURRENCE_THRESHOLD};
use crate::testbed::scene::{OccurrenceTarget, SceneFamily, TaskPrompt};

pub const DEFAULT_SEED_COUNT: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchTask {
    pub family: SceneFamily,
    pub seed_start: u64,
    pub seed_count: usize,
    pub schedule: NursingSchedule,
    pub modes: Vec<Mode>,
}

impl BenchTask {
    pub fn new(family: SceneFamily, seed_count: usize) -> Self {
        Self { family, seed_start: 0, seed_count, schedule: NursingSchedule::default(), modes: Mode::ALL.to_vec() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() {
            return Err(Error::Parameter("benchmark needs at least one mode".into()));
        }
        for (i, m) in self.modes.iter().enumerate() {
            if self.modes[..i].contains(m) {
                return Err(Error::Parameter(format!("mode {} listed twice", m.name())));
            }
        }
        if self.seed_count == 0 {
            return Err(Error::Parameter("seed range is empty".into()));
        }
        if self.seed_start.checked_add(self.seed_count as u64).is_none() {
            return Err(Error::Parameter("seed range overflows".into()));
        }
        self.schedule.validate()
    }

    fn seeds(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.seed_count as u64).map(move |i| self.seed_start + i)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenOutcome {
    pub token: usize,
    pub occurred: bool,
    pub score: f64,
}

/// Raw result of one `(seed, mode)` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub mode: Mode,
    pub tokens: Vec<TokenOutcome>,
    /// Mean over pairs of the last step's divergence, when the prompt has pairs.
    pub final_bind_jsd: Option<f64>,
    pub loss_trajectory: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRate {
    pub token: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: Mode,
    pub occurrence: Vec<TokenRate>,
    pub worst_token_occurrence: f64,
    pub mean_final_bind_jsd: Option<f64>,
    pub mean_loss_trajectory: Vec<f64>,
}

/// Aggregated benchmark results. Serialized fields are deterministic;
/// the timing and raw outcomes are kept beside them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub family: SceneFamily,
    pub seed_start: u64,
    pub seed_count: usize,
    pub modes: Vec<ModeSummary>,
    #[serde(skip)]
    pub wall_clock_seconds: f64,
    #[serde(skip)]
    pub outcomes: Vec<SeedOutcome>,
}

impl BenchReport {
    pub fn mode(&self, mode: Mode) -> Option<&ModeSummary> {
        self.modes.iter().find(|m| m.mode == mode)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::InvalidInput(e.to_string()))
    }

    /// One row per `(seed, mode, token)`.
    pub fn per_seed_csv(&self) -> String {
        let mut out = String::from("seed,mode,token,occurred,score,final_bind_jsd\n");
        for o in &self.outcomes {
            let jsd = o.final_bind_jsd.map(|v| v.to_string()).unwrap_or_default();
            for t in &o.tokens {
                writeln!(out, "{},{},{},{},{},{}", o.seed, o.mode.name(), t.token, u8::from(t.occurred), t.score, jsd)
                    .unwrap();
            }
        }
        out
    }
}

/// Score of the `required_count`-th distinct detection, zero if there are fewer.
pub fn target_score(image: &Latent, target: &OccurrenceTarget) -> f64 {
    let hits = count_occurrences(image, &target.template, f64::MIN_POSITIVE);
    hits.get(target.required_count.saturating_sub(1)).map_or(0.0, |h| h.2)
}

fn run_one(model: &PromptedDenoiser<'_>, prompt: &TaskPrompt, schedule: &NursingSchedule, seed: u64, mode: Mode) -> Result<SeedOutcome> {
    let run = run_guided_sampling(model, &prompt.spec, schedule, seed, mode, false)?;
    let tokens = prompt
        .targets
        .iter()
        .map(|t| {
            let score = target_score(&run.latent, t);
            TokenOutcome { token: t.position, occurred: score >= OCCURRENCE_THRESHOLD, score }
        })
        .collect();
    let last = run.observations.last().expect("runs have steps");
    let final_bind_jsd = (!last.pair_jsd.is_empty())
        .then(|| last.pair_jsd.iter().map(|p| p.2).sum::<f64>() / last.pair_jsd.len() as f64);
    let loss_trajectory = run.observations.iter().map(|o| o.loss).collect();
    Ok(SeedOutcome { seed, mode, tokens, final_bind_jsd, loss_trajectory })
}

/// Aggregates raw outcomes into per-mode summaries, modes in task order.
pub fn aggregate(task: &BenchTask, prompt: &TaskPrompt, outcomes: &[SeedOutcome]) -> Vec<ModeSummary> {
    task.modes
        .iter()
        .map(|&mode| {
            let runs: Vec<&SeedOutcome> = outcomes.iter().filter(|o| o.mode == mode).collect();
            let n = runs.len() as f64;
            let occurrence: Vec<TokenRate> = prompt
                .targets
                .iter()
                .enumerate()
                .map(|(k, t)| {
                    let hits = runs.iter().filter(|o| o.tokens[k].occurred).count();
                    TokenRate { token: t.position, rate: hits as f64 / n }
                })
                .collect();
            let worst = occurrence.iter().map(|r| r.rate).fold(f64::INFINITY, f64::min);
            let jsds: Vec<f64> = runs.iter().filter_map(|o| o.final_bind_jsd).collect();
            let mean_final_bind_jsd = (!jsds.is_empty()).then(|| jsds.iter().sum::<f64>() / jsds.len() as f64);
            let steps = runs.first().map_or(0, |o| o.loss_trajectory.len());
            let mean_loss_trajectory =
                (0..steps).map(|k| runs.iter().map(|o| o.loss_trajectory[k]).sum::<f64>() / n).collect();
            ModeSummary { mode, occurrence, worst_token_occurrence: worst, mean_final_bind_jsd, mean_loss_trajectory }
        })
        .collect()
}

/// Runs every `(seed, mode)` pair; results are independent of thread count.
pub fn run_benchmark(task: &BenchTask, model: &ToyDenoiser, prompt: &TaskPrompt) -> Result<BenchReport> {
    task.validate()?;
    prompt.spec.validate()?;
    let started = Instant::now();
    let prompted = PromptedDenoiser::new(model, prompt.tokens.clone(), task.schedule.total_steps)?;
    let jobs: Vec<(u64, Mode)> = task.seeds().flat_map(|s| task.modes.iter().map(move |&m| (s, m))).collect();
    let outcomes = jobs
        .par_iter()
        .map(|&(seed, mode)| run_one(&prompted, prompt, &task.schedule, seed, mode))
        .collect::<Result<Vec<_>>>()?;
    let modes = aggregate(task, prompt, &outcomes);
    Ok(BenchReport {
        family: task.family,
        seed_start: task.seed_start,
        seed_count: task.seed_count,
        modes,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        outcomes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedMode {
    pub mode: Mode,
    pub value: f64,
    /// 1-based; tied values share a rank.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Delta {
    pub mode: Mode,
    pub baseline: Mode,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRanking {
    pub metric: String,
    pub higher_is_better: bool,
    pub ranking: Vec<RankedMode>,
    /// `mode - baseline` for every pair, baseline earlier in canonical order.
    pub deltas: Vec<Delta>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub metrics: Vec<MetricRanking>,
    pub verdict: String,
}

fn rank_metric(metric: String, higher_is_better: bool, values: &[(Mode, f64)]) -> MetricRanking {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| {
        let ord = if higher_is_better { b.1.total_cmp(&a.1) } else { a.1.total_cmp(&b.1) };
        ord.then(a.0.cmp(&b.0))
    });
    let mut ranking: Vec<RankedMode> = Vec::with_capacity(sorted.len());
    for (i, &(mode, value)) in sorted.iter().enumerate() {
        let rank = match ranking.last() {
            Some(prev) if prev.value == value => prev.rank,
            _ => i + 1,
        };
        ranking.push(RankedMode { mode, value, rank });
    }
    let mut deltas = Vec::new();
    for (i, &(baseline, b)) in values.iter().enumerate() {
        for &(mode, a) in &values[i + 1..] {
            deltas.push(Delta { mode, baseline, delta: a - b });
        }
    }
    deltas.sort_by(|x, y| y.mode.cmp(&x.mode).then(x.baseline.cmp(&y.baseline)));
    MetricRanking { metric, higher_is_better, ranking, deltas }
}

/// Ranks modes per metric and renders a plain-text verdict table.
pub fn compare_modes(report: &BenchReport) -> Result<Comparison> {
    if report.modes.len() < 2 {
        return Err(Error::Parameter(format!(
            "comparison needs at least two modes, report has {}",
            report.modes.len()
        )));
    }
    let mut summaries: Vec<&ModeSummary> = report.modes.iter().collect();
    summaries.sort_by_key(|m| m.mode);
    let column = |f: &dyn Fn(&ModeSummary) -> f64| -> Vec<(Mode, f64)> { summaries.iter().map(|m| (m.mode, f(m))).collect() };

    let mut metrics = vec![rank_metric("worst_token_occurrence".into(), true, &column(&|m| m.worst_token_occurrence))];
    for (k, rate) in summaries[0].occurrence.iter().enumerate() {
        metrics.push(rank_metric(format!("occurrence[token {}]", rate.token), true, &column(&|m| m.occurrence[k].rate)));
    }
    if summaries.iter().all(|m| m.mean_final_bind_jsd.is_some()) {
        metrics.push(rank_metric(
            "mean_final_bind_jsd".into(),
            false,
            &column(&|m| m.mean_final_bind_jsd.unwrap()),
        ));
    }

    let mut verdict = String::new();
    write!(verdict, "{:<28}", "metric").unwrap();
    for m in &summaries {
        write!(verdict, " {:>16}", m.mode.name()).unwrap();
    }
    verdict.push('\n');
    for metric in &metrics {
        write!(verdict, "{:<28}", metric.metric).unwrap();
        for m in &summaries {
            let r = metric.ranking.iter().find(|r| r.mode == m.mode).unwrap();
            write!(verdict, " {:>11.4} (#{})", r.value, r.rank).unwrap();
        }
        verdict.push('\n');
    }
    verdict.push('\n');
    for metric in &metrics {
        for d in &metric.deltas {
            writeln!(verdict, "{} vs {}: {} {:+.4}", d.mode.name(), d.baseline.name(), metric.metric, d.delta).unwrap();
        }
    }
    Ok(Comparison { metrics, verdict })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(mode: Mode, rates: &[f64]) -> ModeSummary {
        let occurrence: Vec<TokenRate> =
            rates.iter().enumerate().map(|(i, &rate)| TokenRate { token: 2 * i + 1, rate }).collect();
        let worst = rates.iter().copied().fold(f64::INFINITY, f64::min);
        ModeSummary { mode, occurrence, worst_token_occurrence: worst, mean_final_bind_jsd: None, mean_loss_trajectory: vec![] }
    }

    fn report(modes: Vec<ModeSummary>) -> BenchReport {
        BenchReport {
            family: SceneFamily::TwoObject,
            seed_start: 0,
            seed_count: 10,
            modes,
            wall_clock_seconds: 0.0,
            outcomes: vec![],
        }
    }

    #[test]
    fn single_mode_rejected() {
        let r = report(vec![summary(Mode::Vanilla, &[0.5])]);
        assert!(matches!(compare_modes(&r), Err(Error::Parameter(_))));
    }

    #[test]
    fn ties_keep_canonical_order() {
        let r = report(vec![summary(Mode::DivideAndBind, &[0.5]), summary(Mode::Vanilla, &[0.5])]);
        let c = compare_modes(&r).unwrap();
        let w = &c.metrics[0];
        assert_eq!(w.ranking[0].mode, Mode::Vanilla);
        assert_eq!(w.ranking[1].mode, Mode::DivideAndBind);
        assert_eq!(w.ranking[0].rank, w.ranking[1].rank);
        assert_eq!(w.deltas[0].delta, 0.0);
    }

    #[test]
    fn delta_arithmetic() {
        let r = report(vec![summary(Mode::Vanilla, &[0.6]), summary(Mode::DivideAndBind, &[0.8])]);
        let c = compare_modes(&r).unwrap();
        let d = &c.metrics[0].deltas[0];
        assert_eq!((d.mode, d.baseline), (Mode::DivideAndBind, Mode::Vanilla));
        assert!((d.delta - 0.2).abs() < 1e-12);
        assert!(c.verdict.contains("divide_and_bind vs vanilla: worst_token_occurrence +0.2000"));
    }

    #[test]
    fn three_modes_list_both_deltas() {
        let r = report(vec![
            summary(Mode::Vanilla, &[0.6, 0.9]),
            summary(Mode::Ae, &[0.7, 0.9]),
            summary(Mode::DivideAndBind, &[0.8, 0.95]),
        ]);
        let c = compare_modes(&r).unwrap();
        assert!(c.verdict.contains("divide_and_bind vs vanilla: worst_token_occurrence"));
        assert!(c.verdict.contains("divide_and_bind vs ae: worst_token_occurrence"));
        assert_eq!(c.metrics.len(), 3);
    }

    #[test]
    fn task_validation() {
        let mut t = BenchTask::new(SceneFamily::TwoObject, 3);
        t.modes.clear();
        assert!(matches!(t.validate(), Err(Error::Parameter(_))));
        let mut t = BenchTask::new(SceneFamily::TwoObject, 0);
        assert!(t.validate().is_err());
        t.seed_count = 1;
        t.modes = vec![Mode::Ae, Mode::Ae];
        assert!(t.validate().is_err());
    }
}
