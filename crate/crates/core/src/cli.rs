//! The `gsn` command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid
//! configuration. Failures print a single `error: <kind>: <message>` line on
//! stderr.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand};

use crate::attention::{token_map, AttentionStack, PromptSpec};
use crate::bench::{compare_modes, run_benchmark, target_score, BenchTask, DEFAULT_SEED_COUNT};
use crate::error::{Error, Result};
use crate::io::config::RunConfig;
use crate::io::dump::{read_dump, write_dump};
use crate::io::render::{heatmap_image, latent_image, loss_plot, ImageFormat};
use crate::losses::{ae_loss, attend_loss, bind_loss, divide_and_bind_loss};
use crate::nursing::{run_guided_sampling, GuidedRun, Mode, NursingSchedule};
use crate::testbed::checkpoint;
use crate::testbed::recipe::{self, TRAIN_SAMPLES};
use crate::testbed::scene::{SceneFamily, SceneGenerator};
use crate::testbed::{PromptedDenoiser, ToyDenoiser, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;

const LOSS_PLOT_SIZE: (usize, usize) = (200, 100);

#[derive(Debug, Parser)]
#[command(name = "gsn", version, about = "Attention-guided latent nursing on a toy diffusion testbed")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Guided sampling for every seed of a run configuration.
    Run(RunArgs),
    /// Evaluate the attendance, binding, max-attention and combined losses on every step of a dump.
    Losses(LossesArgs),
    /// Compare sampling modes on a scene family and write a report.
    Bench(BenchArgs),
    /// Train a toy denoiser on synthetic scenes and save a checkpoint.
    TrainToy(TrainArgs),
    /// Render attention heatmaps from a dump, or a loss curve from a CSV trace.
    #[command(
        long_about = "Render attention heatmaps from a dump, or a loss curve from a CSV trace.\n\n\
        Each heatmap is scaled on its own: v -> floor(255 * (v - min) / (max - min)), so \
        the minimum maps to 0 and the maximum to 255. A constant map renders as uniform 128."
    )]
    Render(RenderArgs),
}

/// Schedule overrides shared by `run` and `bench`.
#[derive(Debug, Args)]
struct ScheduleArgs {
    /// Total sampling steps T.
    #[arg(long)]
    steps: Option<usize>,
    /// Nursing stops once T - k reaches this timestep.
    #[arg(long)]
    t_end: Option<usize>,
    /// Weight of the binding term.
    #[arg(long)]
    lambda: Option<f64>,
    /// Base step size; sizes decay linearly from it.
    #[arg(long)]
    step_size: Option<f64>,
    /// Skip Gaussian smoothing of the attention maps.
    #[arg(long)]
    no_smoothing: bool,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Toy denoiser checkpoint.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Scene family whose evaluation prompt is used when the config has none.
    #[arg(long)]
    family: Option<SceneFamily>,
    /// Sampling seed; repeat for several runs.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// vanilla, ae or divide_and_bind.
    #[arg(long)]
    mode: Option<Mode>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    schedule: ScheduleArgs,
    /// Also write the predicted clean image of every step.
    #[arg(long)]
    frames: bool,
}

#[derive(Debug, Args)]
struct LossesArgs {
    /// Attention dump to evaluate.
    #[arg(long)]
    dump: PathBuf,
    /// Object token positions, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    objects: Vec<usize>,
    /// Attribute bindings as attribute:object, comma separated.
    #[arg(long, value_delimiter = ',')]
    pairs: Vec<String>,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long)]
    no_smoothing: bool,
    /// Keep token 0 in the distribution instead of renormalizing without it.
    #[arg(long)]
    keep_start_token: bool,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Toy denoiser checkpoint.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "two-object")]
    family: SceneFamily,
    /// Number of seeds per mode.
    #[arg(long, default_value_t = DEFAULT_SEED_COUNT)]
    seeds: usize,
    #[arg(long, default_value_t = 0)]
    seed_start: u64,
    /// Modes to compare, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "vanilla,ae,divide_and_bind")]
    modes: Vec<Mode>,
    #[command(flatten)]
    schedule: ScheduleArgs,
    /// Output directory for report.json, per_seed.csv and verdict.txt.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, default_value = "two-object")]
    family: SceneFamily,
    /// Share of two-object scenes whose second object is removed.
    #[arg(long)]
    drop: Option<f64>,
    #[arg(long, default_value_t = TRAIN_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = TrainConfig::default().steps)]
    steps: usize,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch: usize,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint destination.
    #[arg(long)]
    out: PathBuf,
    /// Optional CSV of per-step batch losses.
    #[arg(long)]
    losses: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["dump", "trace"])))]
struct RenderArgs {
    /// Attention dump; every token map of every step is rendered.
    #[arg(long)]
    dump: Option<PathBuf>,
    /// CSV with a `loss` column; blank cells are skipped.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Render only this step of the dump.
    #[arg(long, requires = "dump")]
    step: Option<usize>,
    /// Renormalize each location without token 0 before rendering.
    #[arg(long, requires = "dump")]
    drop_start_token: bool,
    #[arg(long, default_value = "pgm")]
    format: ImageFormat,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

impl std::str::FromStr for ImageFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pgm" => Ok(ImageFormat::Pgm),
            "png" => Ok(ImageFormat::Png),
            other => Err(Error::Validation(format!("unknown image format '{other}' (expected pgm or png)"))),
        }
    }
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run_cli<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{}", e.render());
                return EXIT_OK;
            }
            if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                let _ = write!(stderr, "{}", e.render());
                return EXIT_USAGE;
            }
            let text = e.to_string();
            let detail: Vec<&str> = text
                .lines()
                .map(str::trim)
                .take_while(|l| !l.starts_with("Usage:") && !l.starts_with("tip:"))
                .filter(|l| !l.is_empty())
                .collect();
            let _ = writeln!(stderr, "error: usage: {}", detail.join(" ").trim_start_matches("error: "));
            return EXIT_USAGE;
        }
    };
    match dispatch(cli.command, stdout, stderr) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            let _ = writeln!(stderr, "error: {}: {message}", e.kind());
            match e {
                Error::Validation(_) => EXIT_VALIDATION,
                _ => EXIT_FAILURE,
            }
        }
    }
}

fn dispatch(command: Command, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<()> {
    match command {
        Command::Run(a) => cmd_run(a, stdout),
        Command::Losses(a) => cmd_losses(a, stdout),
        Command::Bench(a) => cmd_bench(a, stdout, stderr),
        Command::TrainToy(a) => cmd_train(a, stdout),
        Command::Render(a) => cmd_render(a, stdout),
    }
}

fn schedule_with(base: NursingSchedule, a: &ScheduleArgs) -> Result<NursingSchedule> {
    let total = a.steps.unwrap_or(base.total_steps);
    let t_end = a.t_end.unwrap_or(base.nursing_end);
    let lambda = a.lambda.unwrap_or(base.lambda);
    let smoothing = base.use_smoothing && !a.no_smoothing;
    let alpha0 = a.step_size.unwrap_or(crate::nursing::DEFAULT_BASE_STEP_SIZE);
    let s = NursingSchedule::linear(total, t_end, alpha0, lambda, smoothing).map_err(as_validation)?;
    s.validate().map_err(as_validation)?;
    Ok(s)
}

fn as_validation(e: Error) -> Error {
    match e {
        Error::Validation(m) => Error::Validation(m),
        other => Error::Validation(other.to_string()),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn save_image(img: &crate::io::render::GrayImage, path: &Path) -> Result<()> {
    write_file(path, &img.encode(ImageFormat::from_path(path)?)?)
}

fn load_model(path: &Path) -> Result<ToyDenoiser> {
    checkpoint::load(path)
}

/// Applies command-line overrides to a loaded or default configuration.
fn resolve_run_config(a: &RunArgs) -> Result<RunConfig> {
    let mut config = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(f) = a.family {
        config.family = f;
    }
    if let Some(m) = &a.model {
        config.model = Some(m.clone());
    }
    if !a.seeds.is_empty() {
        config.seeds = a.seeds.clone();
    }
    if let Some(m) = a.mode {
        config.mode = m;
    }
    if let Some(o) = &a.out {
        config.output_dir = Some(o.clone());
    }
    let s = &a.schedule;
    if let Some(v) = s.steps {
        config.schedule.total_steps = v;
    }
    if let Some(v) = s.t_end {
        config.schedule.nursing_end = v;
    }
    if let Some(v) = s.lambda {
        config.schedule.lambda = v;
    }
    if let Some(v) = s.step_size {
        config.schedule.base_step_size = v;
        config.schedule.step_sizes = None;
    }
    if s.no_smoothing {
        config.schedule.use_smoothing = false;
    }
    if a.frames {
        config.render.frames = true;
    }
    config.validate()?;
    Ok(config)
}

fn cmd_run(a: RunArgs, stdout: &mut dyn Write) -> Result<()> {
    let config = resolve_run_config(&a)?;
    let model_path = config
        .model
        .clone()
        .ok_or_else(|| Error::Validation("no model checkpoint given (set \"model\" or pass --model)".into()))?;
    let out = config
        .output_dir
        .clone()
        .ok_or_else(|| Error::Validation("no output directory given (set \"output_dir\" or pass --out)".into()))?;
    let model = load_model(&model_path)?;
    let mc = model.config();
    if config.attention_resolution != [mc.height, mc.width] {
        return Err(Error::Validation(format!(
            "attention_resolution {:?} does not match the model's {}x{} attention",
            config.attention_resolution, mc.height, mc.width
        )));
    }
    let prompt = config.resolved_prompt();
    if let Some(&bad) = prompt.tokens.iter().find(|&&t| t >= mc.vocabulary_size) {
        return Err(Error::Validation(format!("prompt token id {bad} outside the model vocabulary of {}", mc.vocabulary_size)));
    }
    let spec = prompt.spec();
    let schedule = config.nursing_schedule()?;
    let targets = config.prompt.is_none().then(|| SceneGenerator::new(config.family).task_prompt().targets);
    let prompted = PromptedDenoiser::new(&model, prompt.tokens.clone(), schedule.total_steps)?;

    fs::create_dir_all(&out)?;
    // The tree records what was run, not where it was written.
    let recorded = RunConfig { output_dir: None, ..config.clone() };
    write_file(&out.join("config.json"), recorded.to_json().as_bytes())?;
    for &seed in &config.seeds {
        let run = run_guided_sampling(&prompted, &spec, &schedule, seed, config.mode, config.render.frames)?;
        let dir = out.join(format!("seed_{seed}"));
        write_seed_outputs(&dir, &run, &config, targets.as_deref())?;
        let last = run.observations.last().expect("runs have steps");
        writeln!(
            stdout,
            "seed {seed}: mode {} nursed {} final loss {} final min tv {}",
            config.mode.name(),
            run.trace.nursed_steps(),
            last.loss,
            last.min_tv
        )?;
    }
    Ok(())
}

fn trace_csv(run: &GuidedRun) -> String {
    let mut s = String::from("step,timestep,nursed,alpha,loss,selected_token,grad_norm,update_norm\n");
    for r in &run.trace.records {
        let loss = r.loss.map(|v| v.to_string()).unwrap_or_default();
        let tok = r.selected_token.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{loss},{tok},{},{}",
            r.step, r.timestep, r.nursed, r.alpha, r.grad_norm, r.update_norm
        );
    }
    s
}

fn observations_csv(run: &GuidedRun) -> String {
    let mut s = String::from("step,loss,min_tv,mean_pair_jsd\n");
    for o in &run.observations {
        let jsd = if o.pair_jsd.is_empty() {
            String::new()
        } else {
            (o.pair_jsd.iter().map(|p| p.2).sum::<f64>() / o.pair_jsd.len() as f64).to_string()
        };
        let _ = writeln!(s, "{},{},{},{jsd}", o.step, o.loss, o.min_tv);
    }
    s
}

fn write_seed_outputs(
    dir: &Path,
    run: &GuidedRun,
    config: &RunConfig,
    targets: Option<&[crate::testbed::scene::OccurrenceTarget]>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_file(&dir.join("trace.csv"), trace_csv(run).as_bytes())?;
    write_file(&dir.join("observations.csv"), observations_csv(run).as_bytes())?;
    write_dump(&dir.join("attention.admp"), &run.attention)?;
    save_image(&latent_image(&run.latent), &dir.join("final.pgm"))?;
    if let Some(targets) = targets {
        let mut s = String::from("token,required_count,score,occurred\n");
        for t in targets {
            let score = target_score(&run.latent, t);
            let hit = score >= crate::testbed::occurrence::OCCURRENCE_THRESHOLD;
            let _ = writeln!(s, "{},{},{score},{hit}", t.position, t.required_count);
        }
        write_file(&dir.join("occurrence.csv"), s.as_bytes())?;
    }
    if config.render.heatmaps {
        let stack = run.final_attention();
        for l in 0..stack.token_count() {
            let img = heatmap_image(&token_map(stack, l)?);
            save_image(&img, &dir.join("heatmaps").join(format!("token_{l}.pgm")))?;
        }
    }
    if config.render.frames {
        for (k, frame) in run.frames.iter().enumerate() {
            save_image(&latent_image(frame), &dir.join("frames").join(format!("step_{k:03}.pgm")))?;
        }
    }
    if config.render.loss_plot {
        let losses: Vec<f64> = run.observations.iter().map(|o| o.loss).collect();
        save_image(&loss_plot(&losses, LOSS_PLOT_SIZE.0, LOSS_PLOT_SIZE.1)?, &dir.join("loss.pgm"))?;
    }
    Ok(())
}

fn parse_pair(text: &str) -> Result<(usize, usize)> {
    let bad = || Error::Validation(format!("pair '{text}' is not of the form attribute:object"));
    let (r, s) = text.split_once(':').ok_or_else(bad)?;
    Ok((r.trim().parse().map_err(|_| bad())?, s.trim().parse().map_err(|_| bad())?))
}

/// One CSV row per dump step with the losses the nursing loop would see.
pub fn losses_table(stacks: &[AttentionStack], spec: &PromptSpec, lambda: f64, use_smoothing: bool) -> Result<String> {
    let mut s = String::from("step,attend,bind,ae,dnb\n");
    let effective_lambda = if spec.attribute_pairs.is_empty() { 0.0 } else { lambda };
    for (k, stack) in stacks.iter().enumerate() {
        let attend = attend_loss(stack, spec, use_smoothing)?.value;
        let bind = if spec.attribute_pairs.is_empty() {
            String::new()
        } else {
            bind_loss(stack, spec, use_smoothing)?.value.to_string()
        };
        let ae = ae_loss(stack, spec, use_smoothing)?.value;
        let dnb = divide_and_bind_loss(stack, spec, effective_lambda, use_smoothing)?.value;
        let _ = writeln!(s, "{k},{attend},{bind},{ae},{dnb}");
    }
    Ok(s)
}

fn cmd_losses(a: LossesArgs, stdout: &mut dyn Write) -> Result<()> {
    let stacks = read_dump(&a.dump)?;
    let pairs = a.pairs.iter().map(|p| parse_pair(p)).collect::<Result<Vec<_>>>()?;
    let spec = PromptSpec {
        sequence_length: stacks[0].token_count(),
        object_tokens: a.objects.clone(),
        attribute_pairs: pairs,
        exclude_token_zero: !a.keep_start_token,
    };
    spec.validate().map_err(as_validation)?;
    if !(a.lambda >= 0.0 && a.lambda.is_finite()) {
        return Err(Error::Validation(format!("lambda must be finite and nonnegative, got {}", a.lambda)));
    }
    let table = losses_table(&stacks, &spec, a.lambda, !a.no_smoothing)?;
    match &a.out {
        Some(p) => write_file(p, table.as_bytes()),
        None => Ok(stdout.write_all(table.as_bytes())?),
    }
}

fn cmd_bench(a: BenchArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<()> {
    let mut task = BenchTask::new(a.family, a.seeds);
    task.seed_start = a.seed_start;
    task.modes = a.modes.clone();
    task.schedule = schedule_with(task.schedule.clone(), &a.schedule)?;
    task.validate().map_err(as_validation)?;
    let model = load_model(&a.model)?;
    let prompt = SceneGenerator::new(a.family).with_size(model.config().height, model.config().width).task_prompt();
    let report = run_benchmark(&task, &model, &prompt)?;
    fs::create_dir_all(&a.out)?;
    write_file(&a.out.join("report.json"), report.to_json()?.as_bytes())?;
    write_file(&a.out.join("per_seed.csv"), report.per_seed_csv().as_bytes())?;
    let mut verdict = String::new();
    for m in &report.modes {
        let _ = writeln!(verdict, "{}: worst_token_occurrence {:.4}", m.mode.name(), m.worst_token_occurrence);
    }
    if task.modes.len() >= 2 {
        verdict.push_str(&compare_modes(&report)?.verdict);
        if !verdict.ends_with('\n') {
            verdict.push('\n');
        }
    }
    write_file(&a.out.join("verdict.txt"), verdict.as_bytes())?;
    stdout.write_all(verdict.as_bytes())?;
    writeln!(stderr, "wall clock {:.1} s", report.wall_clock_seconds)?;
    Ok(())
}

fn cmd_train(a: TrainArgs, stdout: &mut dyn Write) -> Result<()> {
    let mut generator = recipe::training_generator(a.family);
    if let Some(d) = a.drop {
        if !(0.0..=1.0).contains(&d) {
            return Err(Error::Validation(format!("drop must lie in [0, 1], got {d}")));
        }
        generator = generator.with_drop(d);
    }
    if a.samples == 0 || a.batch == 0 || !(a.lr > 0.0 && a.lr.is_finite()) {
        return Err(Error::Validation("samples, batch and lr must be positive".into()));
    }
    let train = TrainConfig { steps: a.steps, batch_size: a.batch, learning_rate: a.lr, seed: a.seed };
    let trained = recipe::train_reference(&generator, a.samples, &train)?;
    checkpoint::save(&trained.model, &a.out)?;
    if let Some(p) = &a.losses {
        let mut s = String::from("step,batch_loss\n");
        for (k, l) in trained.batch_losses.iter().enumerate() {
            let _ = writeln!(s, "{k},{l}");
        }
        write_file(p, s.as_bytes())?;
    }
    writeln!(stdout, "initial held-out loss {}", trained.initial_heldout)?;
    writeln!(stdout, "final held-out loss {}", trained.final_heldout)?;
    Ok(())
}

/// Values of the `loss` column; blank cells are skipped.
fn read_loss_column(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::InvalidInput(format!("{} is empty", path.display())))?;
    let col = header
        .split(',')
        .position(|h| h.trim() == "loss")
        .ok_or_else(|| Error::InvalidInput(format!("{} has no loss column", path.display())))?;
    let mut values = Vec::new();
    for (n, line) in lines.enumerate() {
        let cell = line.split(',').nth(col).unwrap_or("").trim();
        if cell.is_empty() {
            continue;
        }
        let v: f64 = cell
            .parse()
            .map_err(|_| Error::InvalidInput(format!("line {}: '{cell}' is not a number", n + 2)))?;
        values.push(v);
    }
    Ok(values)
}

fn cmd_render(a: RenderArgs, stdout: &mut dyn Write) -> Result<()> {
    let ext = a.format.extension();
    let mut written = 0usize;
    if let Some(dump) = &a.dump {
        let stacks = read_dump(dump)?;
        let steps: Vec<usize> = match a.step {
            Some(k) if k >= stacks.len() => {
                return Err(Error::Validation(format!("step {k} outside the dump's {} steps", stacks.len())))
            }
            Some(k) => vec![k],
            None => (0..stacks.len()).collect(),
        };
        for k in steps {
            let stack = if a.drop_start_token { stacks[k].without_start_token()? } else { stacks[k].clone() };
            for l in 0..stack.token_count() {
                let img = heatmap_image(&token_map(&stack, l)?);
                write_file(&a.out.join(format!("step_{k:03}_token_{l}.{ext}")), &img.encode(a.format)?)?;
                written += 1;
            }
        }
    }
    if let Some(trace) = &a.trace {
        let losses = read_loss_column(trace)?;
        let img = loss_plot(&losses, LOSS_PLOT_SIZE.0, LOSS_PLOT_SIZE.1)?;
        write_file(&a.out.join(format!("loss.{ext}")), &img.encode(a.format)?)?;
        written += 1;
    }
    writeln!(stdout, "wrote {written} image(s) to {}", a.out.display())?;
    Ok(())
}
