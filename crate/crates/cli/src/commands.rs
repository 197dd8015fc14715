use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::Args;
use rand::Rng;
use rayon::prelude::*;
use rpg_core::autodiff::Tape;
use rpg_core::divergences::{divergence_exact, divergence_mc, DivergenceSpec, EstimatorKind};
use rpg_core::grpo_audit::{audit_bias, AuditReport};
use rpg_core::measures::{enumeration_batch, rng_from_seed, sample_batch, FiniteMeasure, RpgRng, SoftmaxPolicy};
use rpg_core::objectives::{exact_gradient, exact_objective, register_policy, surrogate_loss, LossStyle, RpgConfig};
use rpg_core::training::{run_training, TrainError, TrainTrace};
use serde::Serialize;

use crate::config::{Command, ExperimentConfig, ResolvedRun};
use crate::error::{CliError, CliResult};
use crate::metrics::{emit_both, to_json_bytes, write_atomic, MetricRow, Value};

pub const OUTPUT_DIR_ENV: &str = "RPG_OUTPUT_DIR";
pub const MANIFEST_FILE: &str = "run-manifest.json";

/// `--out`, then the config's `output_dir`, then `$RPG_OUTPUT_DIR/<command>`,
/// then `./rpg-output/<command>`.
pub fn output_dir(flag: Option<&Path>, config: Option<&Path>, command: Command) -> PathBuf {
    if let Some(p) = flag.or(config) {
        return p.to_path_buf();
    }
    let base = std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("rpg-output"));
    base.join(command.name())
}

#[derive(Serialize)]
struct Manifest<'a, S: Serialize> {
    command: &'a str,
    version: &'a str,
    created_unix_ms: u128,
    argv: &'a [String],
    files: &'a [String],
    resolved: &'a S,
}

/// The only file that carries a timestamp.
fn write_manifest<S: Serialize>(dir: &Path, command: Command, argv: &[String], files: &[String], resolved: &S) -> CliResult<()> {
    let created_unix_ms = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
    let manifest = Manifest {
        command: command.name(),
        version: env!("CARGO_PKG_VERSION"),
        created_unix_ms,
        argv,
        files,
        resolved,
    };
    write_atomic(&dir.join(MANIFEST_FILE), &to_json_bytes(&manifest)?)
}

fn parse_variants(list: &str) -> CliResult<Vec<(DivergenceSpec, LossStyle)>> {
    if list.trim().eq_ignore_ascii_case("all") {
        return Ok(DivergenceSpec::ALL.into_iter().flat_map(|d| LossStyle::ALL.map(|s| (d, s))).collect());
    }
    let mut out = Vec::new();
    for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (div, style) = match item.split_once('-') {
            Some((d, s)) => (d, Some(s)),
            None => (item, None),
        };
        let spec: DivergenceSpec = div.parse().map_err(|e| CliError::Config(format!("--variants: {e}")))?;
        match style {
            None => out.extend(LossStyle::ALL.map(|s| (spec, s))),
            Some(s) => {
                let style = LossStyle::ALL
                    .into_iter()
                    .find(|l| l.name() == s)
                    .ok_or_else(|| CliError::Config(format!("--variants: unknown loss style `{s}`")))?;
                out.push((spec, style));
            }
        }
    }
    if out.is_empty() {
        return Err(CliError::Config("--variants: no variants selected".into()));
    }
    Ok(out)
}

fn parse_seed_list(text: &str) -> Result<Vec<u64>, String> {
    let mut out = Vec::new();
    for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if let Some((a, b)) = item.split_once("..") {
            let a: u64 = a.parse().map_err(|_| format!("bad seed range `{item}`"))?;
            let b: u64 = b.parse().map_err(|_| format!("bad seed range `{item}`"))?;
            out.extend(a..b);
        } else {
            out.push(item.parse().map_err(|_| format!("bad seed `{item}`"))?);
        }
    }
    Ok(out)
}

fn random_measure(rng: &mut RpgRng, n: usize, mass: f64) -> CliResult<FiniteMeasure<f64>> {
    let w = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    Ok(FiniteMeasure::new(w)?.with_total_mass(mass)?)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().map(|x| x.abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- gradcheck

#[derive(Debug, Clone, Args, Serialize)]
pub struct GradcheckArgs {
    /// `all`, or a comma list such as `rkl,urkl-reinforce`.
    #[arg(long, default_value = "all")]
    pub variants: String,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// Max FD error relative to `max(1, ‖g‖∞)`.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub n_min: usize,
    #[arg(long, default_value_t = 8)]
    pub n_max: usize,
    /// Fixed β; drawn from [0, 1] per trial when absent.
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckRow {
    pub variant: String,
    pub trials: usize,
    pub max_fd_error: f64,
    pub max_exact_error: f64,
    pub passed: bool,
}

impl MetricRow for GradcheckRow {
    fn schema() -> &'static [&'static str] {
        &["variant", "trials", "max_fd_error", "max_exact_error", "passed"]
    }

    fn values(&self) -> Vec<Value> {
        vec![
            Value::Text(self.variant.clone()),
            Value::Int(self.trials as u64),
            Value::Float(self.max_fd_error),
            Value::Float(self.max_exact_error),
            Value::Bool(self.passed),
        ]
    }
}

struct Trial {
    policy: SoftmaxPolicy<f64>,
    reference: FiniteMeasure<f64>,
    rewards: Vec<f64>,
    beta: f64,
}

fn draw_trial(seed: u64, args: &GradcheckArgs) -> CliResult<Trial> {
    let mut rng = rng_from_seed(seed);
    let n = rng.random_range(args.n_min..=args.n_max);
    let logits = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let z = rng.random_range(0.5..2.0);
    let reference = random_measure(&mut rng, n, z)?;
    let rewards = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let beta = args.beta.unwrap_or_else(|| rng.random_range(0.0..1.0));
    Ok(Trial { policy: SoftmaxPolicy::new(logits)?, reference, rewards, beta })
}

/// Returns the FD error and the closed-form error of the surrogate gradient.
fn check_variant(trial: &Trial, cfg: &RpgConfig<f64>) -> CliResult<(f64, f64)> {
    let batch = enumeration_batch(&trial.reference, |x| trial.rewards[x])?;
    let mut tape = Tape::new();
    let pv = register_policy(&mut tape, &trial.policy)?;
    let loss = surrogate_loss(&mut tape, &pv, cfg, &batch, 0.0)?;
    let ascent: Vec<f64> = tape.backward(loss).iter().map(|g| -g).collect();

    let h = 6e-6;
    let logits = trial.policy.logits();
    let mut fd = Vec::with_capacity(logits.len());
    for i in 0..logits.len() {
        let eval = |delta: f64| -> CliResult<f64> {
            let mut l = logits.to_vec();
            l[i] += delta;
            Ok(exact_objective(cfg, &SoftmaxPolicy::new(l)?, &trial.reference, &trial.rewards)?)
        };
        fd.push((eval(h)? - eval(-h)?) / (2.0 * h));
    }
    let exact = exact_gradient(cfg, &trial.policy, &trial.reference, &trial.rewards)?;
    let fd_err = max_abs_diff(&ascent, &fd) / max_abs(&fd).max(1.0);
    let exact_err = max_abs_diff(&ascent, &exact) / max_abs(&exact).max(1.0);
    Ok((fd_err, exact_err))
}

pub fn gradcheck(args: &GradcheckArgs, argv: &[String]) -> CliResult<()> {
    let variants = parse_variants(&args.variants)?;
    if args.n_min < 2 || args.n_max < args.n_min {
        return Err(CliError::Config(format!("need 2 <= --n-min <= --n-max, got {}..{}", args.n_min, args.n_max)));
    }
    if args.trials == 0 || !(args.tol > 0.0) {
        return Err(CliError::Config("--trials must be >= 1 and --tol > 0".into()));
    }
    if let Some(b) = args.beta {
        if !(b >= 0.0) {
            return Err(CliError::Config(format!("--beta must be >= 0, got {b}")));
        }
    }
    let mut seeder = rng_from_seed(args.seed);
    let seeds: Vec<u64> = (0..args.trials).map(|_| seeder.random()).collect();

    let per_trial: Vec<Vec<(f64, f64)>> = seeds
        .par_iter()
        .map(|&s| {
            let trial = draw_trial(s, args)?;
            variants
                .iter()
                .map(|&(spec, style)| check_variant(&trial, &RpgConfig::new(spec, style, trial.beta)?))
                .collect()
        })
        .collect::<CliResult<_>>()?;

    let rows: Vec<GradcheckRow> = variants
        .iter()
        .enumerate()
        .map(|(v, (spec, style))| {
            let fd = per_trial.iter().map(|t| t[v].0).fold(0.0, f64::max);
            let ex = per_trial.iter().map(|t| t[v].1).fold(0.0, f64::max);
            GradcheckRow {
                variant: format!("{}-{}", spec.name(), style.name()),
                trials: args.trials,
                max_fd_error: fd,
                max_exact_error: ex,
                passed: fd <= args.tol && ex <= args.tol,
            }
        })
        .collect();

    println!("{:<22} {:>14} {:>14}  status", "variant", "max fd err", "max exact err");
    for r in &rows {
        let status = if r.passed { "ok" } else { "FAIL" };
        println!("{:<22} {:>14.3e} {:>14.3e}  {status}", r.variant, r.max_fd_error, r.max_exact_error);
    }

    let dir = output_dir(args.out.as_deref(), None, Command::Gradcheck);
    let files = emit_both(&rows, &dir, "gradcheck")?;
    write_manifest(&dir, Command::Gradcheck, argv, &files, args)?;

    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.variant.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Assertion(format!("gradient error above {} for {}", args.tol, failed.join(", "))))
    }
}

// ---------------------------------------------------------------- audit-grpo

#[derive(Debug, Clone, Args, Serialize)]
pub struct AuditArgs {
    /// Logit perturbation sizes away from the sampling policy.
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.5")]
    pub perturb: Vec<f64>,
    #[arg(long, default_value_t = 4)]
    pub n_arms: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Allowed error of the importance-corrected gradient.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditEntry {
    pub perturb: f64,
    #[serde(flatten)]
    pub report: AuditReport<f64>,
}

impl MetricRow for AuditEntry {
    fn schema() -> &'static [&'static str] {
        &["perturb", "bias_norm", "bias_inf", "relative_bias", "corrected_error"]
    }

    fn values(&self) -> Vec<Value> {
        let r = &self.report;
        vec![
            Value::Float(self.perturb),
            Value::Float(r.bias_norm),
            Value::Float(r.bias_inf),
            Value::Float(r.relative_bias),
            Value::Float(r.corrected_error),
        ]
    }
}

pub fn audit_grpo(args: &AuditArgs, argv: &[String]) -> CliResult<()> {
    if args.n_arms < 2 {
        return Err(CliError::Config(format!("--n-arms must be >= 2, got {}", args.n_arms)));
    }
    if args.perturb.is_empty() || args.perturb.iter().any(|p| !p.is_finite()) {
        return Err(CliError::Config("--perturb needs finite values".into()));
    }
    let mut rng = rng_from_seed(args.seed);
    let old = random_measure(&mut rng, args.n_arms, 1.0)?;
    let reference = random_measure(&mut rng, args.n_arms, 1.0)?;
    let direction: Vec<f64> = (0..args.n_arms).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = direction.iter().map(|d| d * d).sum::<f64>().sqrt();
    let base = SoftmaxPolicy::from_measure(&old)?;

    let mut entries = Vec::with_capacity(args.perturb.len());
    for &eps in &args.perturb {
        let logits = base.logits().iter().zip(&direction).map(|(l, d)| l + eps * d / norm).collect();
        let report = audit_bias(&SoftmaxPolicy::new(logits)?, &reference, &old)?;
        println!(
            "perturb={eps} bias_norm={:.6e} relative_bias={:.6e} corrected_error={:.3e}",
            report.bias_norm, report.relative_bias, report.corrected_error
        );
        entries.push(AuditEntry { perturb: eps, report });
    }

    let dir = output_dir(args.out.as_deref(), None, Command::AuditGrpo);
    let csv_name = "audit.csv".to_string();
    crate::metrics::emit_metrics(&entries, crate::metrics::Format::Csv, &dir.join(&csv_name))?;
    let json_name = "audit.json".to_string();
    write_atomic(&dir.join(&json_name), &to_json_bytes(&entries)?)?;
    write_manifest(&dir, Command::AuditGrpo, argv, &[csv_name, json_name], args)?;

    match entries.iter().find(|e| !e.report.corrected_within(args.tol)) {
        None => Ok(()),
        Some(e) => Err(CliError::Assertion(format!(
            "corrected gradient error {:.3e} above {} at perturb={}",
            e.report.corrected_error, args.tol, e.perturb
        ))),
    }
}

// ---------------------------------------------------------------- estimate

#[derive(Debug, Clone, Args, Serialize)]
pub struct EstimateArgs {
    #[arg(long, default_value_t = 4)]
    pub n_arms: usize,
    /// Samples drawn from the normalized reference.
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    /// Total mass of the reference measure.
    #[arg(long, default_value_t = 1.0)]
    pub z: f64,
    /// Logit distance of the policy from the reference.
    #[arg(long, default_value_t = 0.5)]
    pub shift: f64,
    /// Allowed |estimate − exact| in standard errors, for the unbiased pairs.
    #[arg(long, default_value_t = 4.0)]
    pub sigmas: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateRow {
    pub divergence: String,
    pub estimator: String,
    pub samples: usize,
    pub exact: f64,
    pub estimate: f64,
    pub stderr: f64,
    pub sample_std: f64,
    pub bias: f64,
    pub z_score: f64,
    /// Whether the estimator is unbiased for this divergence. k2 never is;
    /// k1 misses the mass term of the unnormalized divergences.
    pub checked: bool,
    pub passed: bool,
}

impl MetricRow for EstimateRow {
    fn schema() -> &'static [&'static str] {
        &[
            "divergence",
            "estimator",
            "samples",
            "exact",
            "estimate",
            "stderr",
            "sample_std",
            "bias",
            "z_score",
            "checked",
            "passed",
        ]
    }

    fn values(&self) -> Vec<Value> {
        vec![
            Value::Text(self.divergence.clone()),
            Value::Text(self.estimator.clone()),
            Value::Int(self.samples as u64),
            Value::Float(self.exact),
            Value::Float(self.estimate),
            Value::Float(self.stderr),
            Value::Float(self.sample_std),
            Value::Float(self.bias),
            Value::Float(self.z_score),
            Value::Bool(self.checked),
            Value::Bool(self.passed),
        ]
    }
}

pub fn estimate(args: &EstimateArgs, argv: &[String]) -> CliResult<()> {
    if args.n_arms < 2 || args.samples < 2 {
        return Err(CliError::Config("--n-arms and --samples must be >= 2".into()));
    }
    if !(args.z > 0.0) || !args.z.is_finite() || !(args.sigmas > 0.0) || !args.shift.is_finite() {
        return Err(CliError::Config("--z and --sigmas must be positive, --shift finite".into()));
    }
    let mut rng = rng_from_seed(args.seed);
    let reference = random_measure(&mut rng, args.n_arms, args.z)?;
    let base = SoftmaxPolicy::from_measure(&reference)?;
    let logits = base.logits().iter().map(|l| l + args.shift * rng.random_range(-1.0..1.0)).collect();
    let policy = SoftmaxPolicy::new(logits)?;
    let batch = sample_batch(&reference, |_| 0.0, args.samples, rng.random())?;

    let mut rows = Vec::new();
    for spec in DivergenceSpec::ALL {
        let exact = divergence_exact(spec, &policy, &reference)?;
        for kind in EstimatorKind::ALL {
            let mc = divergence_mc(spec, kind, &batch, &policy)?;
            let bias = mc.estimate - exact;
            let z_score = if mc.stderr > 0.0 { bias / mc.stderr } else { 0.0 };
            let checked = kind == EstimatorKind::K3 || (kind == EstimatorKind::K1 && spec.is_normalized());
            rows.push(EstimateRow {
                divergence: spec.name().into(),
                estimator: kind.name().into(),
                samples: mc.n,
                exact,
                estimate: mc.estimate,
                stderr: mc.stderr,
                sample_std: mc.stderr * (mc.n as f64).sqrt(),
                bias,
                z_score,
                checked,
                passed: !checked || z_score.abs() <= args.sigmas,
            });
        }
    }

    println!("{:<5} {:<3} {:>13} {:>13} {:>11} {:>8}", "div", "est", "exact", "estimate", "stderr", "z");
    for r in &rows {
        let mark = if !r.checked { " (biased, reported only)" } else if r.passed { "" } else { "  FAIL" };
        println!(
            "{:<5} {:<3} {:>13.6e} {:>13.6e} {:>11.3e} {:>8.3}{mark}",
            r.divergence, r.estimator, r.exact, r.estimate, r.stderr, r.z_score
        );
    }

    let dir = output_dir(args.out.as_deref(), None, Command::Estimate);
    let files = emit_both(&rows, &dir, "estimate")?;
    write_manifest(&dir, Command::Estimate, argv, &files, args)?;

    let failed: Vec<String> =
        rows.iter().filter(|r| !r.passed).map(|r| format!("{}/{}", r.divergence, r.estimator)).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Assertion(format!("estimate off by more than {} stderr for {}", args.sigmas, failed.join(", "))))
    }
}

// ---------------------------------------------------------------- train / sweep

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Comma list; `a..b` is the half-open range. Overrides `[sweep] seeds`.
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Runs one training job into `dir`. A diverged run still writes its partial trace.
fn train_into(run: &ResolvedRun, dir: &Path) -> CliResult<(TrainTrace<f64>, Vec<String>)> {
    let env = run.env()?;
    let (trace, failure) = match run_training(&env, &run.train) {
        Ok(t) => (t, None),
        Err(TrainError::Invalid(e)) => return Err(e.into()),
        Err(e @ TrainError::Diverged { .. }) => {
            let msg = e.to_string();
            let TrainError::Diverged { partial, .. } = e else { unreachable!() };
            (partial, Some(msg))
        }
    };
    let files = emit_both(&trace.records, dir, "trace")?;
    match failure {
        None => Ok((trace, files)),
        Some(msg) => Err(CliError::Runtime(format!("{msg} (partial trace in {})", dir.display()))),
    }
}

fn load_config(path: &Path, command: Command) -> CliResult<ExperimentConfig> {
    let cfg = ExperimentConfig::load(path)?;
    cfg.check_command(command)?;
    Ok(cfg)
}

pub fn train(args: &TrainArgs, argv: &[String]) -> CliResult<()> {
    let cfg = load_config(&args.config, Command::Train)?;
    let mut run = cfg.resolve()?;
    if let Some(s) = args.seed {
        run = run.with_seed(s);
    }
    let dir = output_dir(args.out.as_deref(), cfg.output_dir.as_deref(), Command::Train);
    let result = train_into(&run, &dir);
    let files = match &result {
        Ok((_, f)) => f.clone(),
        Err(_) => vec!["trace.csv".into(), "trace.json".into()],
    };
    write_manifest(&dir, Command::Train, argv, &files, &run)?;
    let (trace, _) = result?;

    let policy = trace.final_policy()?;
    let env = run.env()?;
    let last = trace.records.last().expect("at least one iteration");
    println!(
        "{}: {} iterations, J = {:.6e}, p(best arm {}) = {:.6}, reference updates = {}",
        run.train.rpg,
        trace.records.len(),
        last.j_exact,
        env.best_arm(),
        policy.prob(env.best_arm())?,
        trace.records.iter().filter(|r| r.ref_updated).count(),
    );
    println!("wrote {}", dir.display());
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub seed: u64,
    pub status: String,
    pub final_j_exact: f64,
    pub final_mean_reward: f64,
    pub final_entropy: f64,
    pub final_div_to_initial: f64,
    pub best_arm_prob: f64,
}

impl MetricRow for SweepRow {
    fn schema() -> &'static [&'static str] {
        &["seed", "status", "final_j_exact", "final_mean_reward", "final_entropy", "final_div_to_initial", "best_arm_prob"]
    }

    fn values(&self) -> Vec<Value> {
        vec![
            Value::Int(self.seed),
            Value::Text(self.status.clone()),
            Value::Float(self.final_j_exact),
            Value::Float(self.final_mean_reward),
            Value::Float(self.final_entropy),
            Value::Float(self.final_div_to_initial),
            Value::Float(self.best_arm_prob),
        ]
    }
}

pub fn sweep(args: &SweepArgs, argv: &[String]) -> CliResult<()> {
    let cfg = load_config(&args.config, Command::Sweep)?;
    let run = cfg.resolve()?;
    let seeds = match &args.seeds {
        Some(text) => parse_seed_list(text).map_err(|e| CliError::Config(format!("--seeds: {e}")))?,
        None => cfg.sweep.seeds.clone(),
    };
    if seeds.is_empty() {
        return Err(CliError::Config("no seeds: pass --seeds or set `seeds` in [sweep]".into()));
    }
    let dir = output_dir(args.out.as_deref(), cfg.output_dir.as_deref(), Command::Sweep);
    let env = run.env()?;
    let best = env.best_arm();

    let mut rows: Vec<SweepRow> = seeds
        .par_iter()
        .map(|&seed| {
            let seeded = run.with_seed(seed);
            match train_into(&seeded, &dir.join(format!("seed-{seed}"))) {
                Ok((trace, _)) => {
                    let last = trace.records.last().expect("at least one iteration");
                    Ok(SweepRow {
                        seed,
                        status: "ok".into(),
                        final_j_exact: last.j_exact,
                        final_mean_reward: last.mean_reward,
                        final_entropy: last.entropy,
                        final_div_to_initial: last.div_to_initial,
                        best_arm_prob: trace.final_policy()?.prob(best)?,
                    })
                }
                Err(CliError::Runtime(msg)) => {
                    eprintln!("seed {seed}: {msg}");
                    Ok(SweepRow {
                        seed,
                        status: "diverged".into(),
                        final_j_exact: f64::NAN,
                        final_mean_reward: f64::NAN,
                        final_entropy: f64::NAN,
                        final_div_to_initial: f64::NAN,
                        best_arm_prob: f64::NAN,
                    })
                }
                Err(e) => Err(e),
            }
        })
        .collect::<CliResult<_>>()?;
    rows.sort_by_key(|r| r.seed);

    for r in &rows {
        println!("seed {:>6}: {} J = {:.6e}, p(best) = {:.6}", r.seed, r.status, r.final_j_exact, r.best_arm_prob);
    }
    let mut files = emit_both(&rows, &dir, "sweep")?;
    files.extend(rows.iter().map(|r| format!("seed-{}/trace.csv", r.seed)));
    #[derive(Serialize)]
    struct Resolved<'a> {
        seeds: &'a [u64],
        run: &'a ResolvedRun,
    }
    write_manifest(&dir, Command::Sweep, argv, &files, &Resolved { seeds: &seeds, run: &run })?;

    let diverged = rows.iter().filter(|r| r.status != "ok").count();
    if diverged == 0 {
        Ok(())
    } else {
        Err(CliError::Runtime(format!("{diverged} of {} runs diverged", rows.len())))
    }
}
