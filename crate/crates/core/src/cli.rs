//! Command-line front end: `synth`, `split`, `train`, `eval`, `oracle`,
//! `gradcheck` and `diag`.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime errors (and on a
//! failed gradient check).

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::admm::{self, AdmmConfig};
use crate::dataset::{openness_split, MultiViewDataset, OpennessSplit, SplitRatios};
use crate::error::OvError;
use crate::eval::{
    contraction_diagnostic, gradcheck_pipeline, gradient_bound_spot_check, oscr_curve,
    scaling_benchmark, score_test_set, summarize, ContractionReport, GradcheckConfig, ScalingRow,
    ScalingSetup, ScoreMode,
};
use crate::io;
use crate::synth::{generate, Planted, SynthSpec};
use crate::trainer::{train, BoundRecord, Checkpoint, TrainConfig};
use crate::unfold::init_params;

/// Gradient checks pass below this relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Relative slack when judging an objective trace non-increasing.
pub const TRACE_SLACK: f64 = 1e-12;

#[derive(Debug, Parser)]
#[command(
    name = "openviewer",
    about = "Open-set multi-view classification with an unfolded sparse coding network",
    disable_version_flag = true
)]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed applied to every stage of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Print version and config schema, then exit.
    #[arg(long)]
    pub version: bool,
    /// Only print errors.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-view dataset with planted factors.
    Synth(SynthArgs),
    /// Partition classes into known/unknown and samples into train/val/test.
    Split(SplitArgs),
    /// Train the unfolded network.
    Train(TrainArgs),
    /// Score the test split and write OSCR results.
    Eval(EvalArgs),
    /// Run the ADMM solver on a dataset.
    Oracle(OracleArgs),
    /// Finite-difference check of every network parameter gradient.
    Gradcheck,
    /// Contraction, gradient-bound and scaling diagnostics.
    Diag(DiagArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON generator spec; replaces the `synth` config section.
    #[arg(long)]
    pub spec: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub openness: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub layers: Option<usize>,
    /// One of `full`, `no_cd_dn`, `no_dn`.
    #[arg(long)]
    pub ablation: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    /// One of `max_softmax`, `logit_norm`.
    #[arg(long)]
    pub score: Option<String>,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub atoms: Option<usize>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// `planted.json` from `synth`; enables the noise-support F1.
    #[arg(long)]
    pub planted: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiagArgs {
    /// Diagnose trained parameters instead of a fresh initialization.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// With `--checkpoint` and `--split`, also spot-check the gradient bound.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub skip_scaling: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub openness: f64,
    pub ratios: SplitRatios,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            openness: 0.1,
            ratios: SplitRatios::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub score: ScoreMode,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    /// Defaults to the dataset's class count.
    pub atoms: Option<usize>,
    pub admm: AdmmConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagConfig {
    pub trials: usize,
    pub spot_batches: usize,
    pub scaling_ns: Vec<usize>,
    pub scaling: ScalingSetup,
    pub seed: u64,
}

impl Default for DiagConfig {
    fn default() -> Self {
        DiagConfig {
            trials: 1000,
            spot_batches: 5,
            scaling_ns: vec![512, 1024, 2048],
            scaling: ScalingSetup::default(),
            seed: 0,
        }
    }
}

/// One file describes an experiment; each subcommand reads its section.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthSpec,
    pub split: SplitConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub oracle: OracleConfig,
    pub gradcheck: GradcheckConfig,
    pub diag: DiagConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> crate::Result<RunConfig> {
        io::read_json(path)
    }

    pub fn with_seed(mut self, seed: u64) -> RunConfig {
        self.synth.seed = seed;
        self.split.seed = seed;
        self.train.seed = seed;
        self.train.admm.seed = seed;
        self.oracle.admm.seed = seed;
        self.gradcheck.seed = seed;
        self.diag.seed = seed;
        self.diag.scaling.seed = seed;
        self
    }
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Run(OvError),
}

impl From<OvError> for CliError {
    fn from(e: OvError) -> Self {
        CliError::Run(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    if cli.version {
        println!("{}", crate::version_info());
        return 0;
    }
    let Some(command) = &cli.command else {
        eprintln!(
            "error: a subcommand is required\n\n{}",
            Cli::command().render_usage()
        );
        return 1;
    };
    let level = if cli.quiet { "error" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .try_init();

    match execute(&cli, command) {
        Ok(code) => code,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\n{}", Cli::command().render_usage());
            1
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn execute(cli: &Cli, command: &Command) -> CliResult<i32> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    match command {
        Command::Synth(a) => synth_cmd(cli, &cfg, a),
        Command::Split(a) => split_cmd(cli, &cfg, a),
        Command::Train(a) => train_cmd(cli, &cfg, a),
        Command::Eval(a) => eval_cmd(cli, &cfg, a),
        Command::Oracle(a) => oracle_cmd(cli, &cfg, a),
        Command::Gradcheck => gradcheck_cmd(cli, &cfg),
        Command::Diag(a) => diag_cmd(cli, &cfg, a),
    }
}

fn out_dir(cli: &Cli) -> CliResult<&Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| CliError::Usage("this subcommand needs --out DIR".into()))
}

fn say(cli: &Cli, msg: impl AsRef<str>) {
    if !cli.quiet {
        println!("{}", msg.as_ref());
    }
}

/// Parses a snake_case enum name through its serde representation.
fn parse_name<T: DeserializeOwned>(flag: &str, value: &str) -> CliResult<T> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|_| CliError::Usage(format!("invalid value '{value}' for --{flag}")))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    Ok(io::write_atomic(path, text.as_bytes())?)
}

fn synth_cmd(cli: &Cli, cfg: &RunConfig, a: &SynthArgs) -> CliResult<i32> {
    let out = out_dir(cli)?;
    let mut spec = match &a.spec {
        Some(path) => io::read_json::<SynthSpec>(path)?,
        None => cfg.synth.clone(),
    };
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    let (dataset, planted) = generate(&spec)?;
    let manifest = dataset.save(out)?;
    planted.save(out)?;
    io::write_json(&out.join("synth_spec.json"), &spec)?;
    say(
        cli,
        format!(
            "wrote {} ({} samples, {} views, {} classes)",
            manifest.display(),
            dataset.len(),
            dataset.view_count(),
            dataset.class_count
        ),
    );
    Ok(0)
}

fn split_cmd(cli: &Cli, cfg: &RunConfig, a: &SplitArgs) -> CliResult<i32> {
    let out = out_dir(cli)?;
    let dataset = MultiViewDataset::load(&a.manifest)?;
    let openness = a.openness.unwrap_or(cfg.split.openness);
    let split = openness_split(&dataset, openness, cfg.split.ratios, cfg.split.seed)?;
    let path = out.join("split.json");
    split.save(&path)?;
    say(
        cli,
        format!(
            "wrote {}: {} known / {} unknown classes, openness {:.4}, {} train / {} val / {} test",
            path.display(),
            split.known_classes.len(),
            split.unknown_classes.len(),
            split.openness_achieved,
            split.train_idx.len(),
            split.val_idx.len(),
            split.test_idx.len()
        ),
    );
    Ok(0)
}

fn bounds_csv(records: &[BoundRecord]) -> String {
    let mut s = String::from("epoch,batch,grad_norm,bound,holds\n");
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.epoch,
            r.batch,
            r.grad_norm,
            r.bound,
            r.holds()
        );
    }
    s
}

fn train_cmd(cli: &Cli, cfg: &RunConfig, a: &TrainArgs) -> CliResult<i32> {
    let out = out_dir(cli)?;
    let mut tc = cfg.train.clone();
    if let Some(v) = a.epochs {
        tc.epochs = v;
    }
    if let Some(v) = a.learning_rate {
        tc.learning_rate = v;
    }
    if let Some(v) = a.layers {
        tc.layers = v;
    }
    if let Some(v) = &a.ablation {
        tc.ablation = parse_name("ablation", v)?;
    }
    let dataset = MultiViewDataset::load(&a.manifest)?;
    let split = OpennessSplit::load(&a.split)?;
    let outcome = train(&dataset, &split, &tc)?;

    outcome.checkpoint.save(&out.join("checkpoint.json"))?;
    write_text(&out.join("train_log.csv"), &outcome.log.to_csv())?;
    write_text(&out.join("timing.csv"), &outcome.log.timing_csv())?;
    write_text(&out.join("bounds.csv"), &bounds_csv(&outcome.log.bounds))?;
    io::write_json(
        &out.join("fusion_weights.json"),
        &outcome.checkpoint.params.fusion_snapshot,
    )?;

    let last = outcome
        .log
        .epochs
        .last()
        .map(|e| e.loss)
        .unwrap_or(f64::NAN);
    say(
        cli,
        format!(
            "trained {} epochs, final loss {last:.6}, gradient bound violations {}/{}",
            outcome.log.epochs.len(),
            outcome.log.bound_violations(),
            outcome.log.bounds.len()
        ),
    );
    Ok(0)
}

fn eval_cmd(cli: &Cli, cfg: &RunConfig, a: &EvalArgs) -> CliResult<i32> {
    let out = out_dir(cli)?;
    let mode = match &a.score {
        Some(v) => parse_name("score", v)?,
        None => cfg.eval.score,
    };
    let checkpoint = Checkpoint::load(&a.checkpoint)?;
    let dataset = MultiViewDataset::load(&a.manifest)?;
    let split = OpennessSplit::load(&a.split)?;
    let (preds, fused) = score_test_set(&checkpoint, &dataset, &split, mode)?;
    let curve = oscr_curve(&preds)?;
    let summary = summarize(&preds, &curve, mode)?;

    let mut table = String::from("index,label,predicted,confidence,unknown\n");
    for p in &preds {
        let _ = writeln!(
            table,
            "{},{},{},{},{}",
            p.index,
            p.label,
            p.predicted,
            p.confidence,
            p.is_unknown()
        );
    }
    write_text(&out.join("oscr.csv"), &curve.to_csv())?;
    io::write_json(&out.join("summary.json"), &summary)?;
    write_text(&out.join("predictions.csv"), &table)?;
    io::write_matrix_csv(&out.join("fused.csv"), &fused)?;
    io::write_matrix_csv(&out.join("similarity.csv"), &fused.matmul_t(&fused)?)?;

    say(
        cli,
        format!("closed-set accuracy {:.4}", summary.closed_set_accuracy),
    );
    for &(fpr, ccr) in &summary.ccr_at_fpr {
        say(cli, format!("CCR@FPR={:<6} {ccr:.4}", fpr));
    }
    Ok(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSummary {
    pub atoms: usize,
    pub iterations: usize,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub relative_reconstruction_error: f64,
    pub trace_non_increasing: bool,
    /// Per-view F1 of recovered noise groups, when planted noise is given.
    pub noise_support_f1: Option<Vec<f64>>,
}

fn oracle_cmd(cli: &Cli, cfg: &RunConfig, a: &OracleArgs) -> CliResult<i32> {
    let out = out_dir(cli)?;
    let dataset = MultiViewDataset::load(&a.manifest)?;
    let atoms = a.atoms.or(cfg.oracle.atoms).unwrap_or(dataset.class_count);
    let mut admm_cfg = cfg.oracle.admm.clone();
    if let Some(v) = a.max_iter {
        admm_cfg.max_iter = v;
    }
    let state = admm::solve(&dataset.views, atoms, &admm_cfg)?;
    let planted = a.planted.as_deref().map(Planted::load).transpose()?;
    if let Some(p) = &planted {
        if p.noise.len() != dataset.view_count() {
            return Err(CliError::Run(OvError::Dataset(format!(
                "planted noise has {} views, dataset has {}",
                p.noise.len(),
                dataset.view_count()
            ))));
        }
    }

    let mut trace = String::from("iteration,objective\n");
    for (i, v) in state.objective_trace.iter().enumerate() {
        let _ = writeln!(trace, "{i},{v}");
    }
    write_text(&out.join("trace.csv"), &trace)?;
    for (v, s) in state.views.iter().enumerate() {
        io::write_matrix_csv(&out.join(format!("z_{v}.csv")), &s.z)?;
        io::write_matrix_csv(&out.join(format!("d_{v}.csv")), &s.d)?;
        io::write_matrix_csv(&out.join(format!("e_{v}.csv")), &s.e)?;
    }
    let summary = OracleSummary {
        atoms,
        iterations: state.iterations,
        initial_objective: state.objective_trace[0],
        final_objective: *state
            .objective_trace
            .last()
            .expect("trace starts non-empty"),
        relative_reconstruction_error: admm::relative_reconstruction_error(&state, &dataset.views)?,
        trace_non_increasing: admm::trace_non_increasing(&state.objective_trace, TRACE_SLACK),
        noise_support_f1: planted.map(|p| {
            state
                .views
                .iter()
                .enumerate()
                .map(|(v, s)| {
                    admm::noise_support_f1(&s.e, &p.noise_columns(v), admm_cfg.group_axis)
                })
                .collect()
        }),
    };
    io::write_json(&out.join("oracle_summary.json"), &summary)?;
    say(
        cli,
        format!(
            "{} iterations, objective {:.6} -> {:.6}, relative reconstruction error {:.4}",
            summary.iterations,
            summary.initial_objective,
            summary.final_objective,
            summary.relative_reconstruction_error
        ),
    );
    if let Some(f1) = &summary.noise_support_f1 {
        say(cli, format!("noise support F1 per view: {f1:?}"));
    }
    Ok(0)
}

fn gradcheck_cmd(cli: &Cli, cfg: &RunConfig) -> CliResult<i32> {
    let outcome = gradcheck_pipeline(&cfg.gradcheck)?;
    if let Some(out) = &cli.out {
        io::write_json(&out.join("gradcheck.json"), &outcome)?;
    }
    for (name, err) in &outcome.per_param {
        say(cli, format!("{name:<20} {err:.3e}"));
    }
    println!("max relative error: {:e}", outcome.max_relative_error);
    Ok(if outcome.max_relative_error < GRADCHECK_TOLERANCE {
        0
    } else {
        2
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagReport {
    pub contraction: Vec<ContractionReport>,
    pub gradient_bound: Vec<BoundRecord>,
    pub scaling: Vec<ScalingRow>,
}

fn diag_cmd(cli: &Cli, cfg: &RunConfig, a: &DiagArgs) -> CliResult<i32> {
    let out = out_dir(cli)?;
    let dc = &cfg.diag;
    let checkpoint = a.checkpoint.as_deref().map(Checkpoint::load).transpose()?;
    let params = match &checkpoint {
        Some(cp) => cp.params.clone(),
        None => init_params(
            &cfg.synth.dims,
            cfg.synth.classes,
            cfg.train.layers,
            &cfg.train.admm,
            dc.seed,
            None,
        )?,
    };
    let trials = a.trials.unwrap_or(dc.trials);
    let mut contraction = Vec::new();
    for (v, view) in params.views.iter().enumerate() {
        for l in 0..view.layers.len() {
            contraction.push(contraction_diagnostic(&params, v, l, trials, dc.seed)?);
        }
    }

    let gradient_bound =
        match (&checkpoint, &a.manifest, &a.split) {
            (Some(cp), Some(m), Some(s)) => {
                let dataset = MultiViewDataset::load(m)?;
                let split = OpennessSplit::load(s)?;
                gradient_bound_spot_check(cp, &dataset, &split, dc.spot_batches, dc.seed)?
            }
            (_, None, None) => Vec::new(),
            _ => return Err(CliError::Usage(
                "the gradient-bound spot check needs --checkpoint, --manifest and --split together"
                    .into(),
            )),
        };

    let scaling = if a.skip_scaling {
        Vec::new()
    } else {
        scaling_benchmark(&dc.scaling_ns, &dc.scaling)?
    };

    let mut scaling_csv = String::from("n,layers,seconds,ratio_to_previous\n");
    for (i, r) in scaling.iter().enumerate() {
        let ratio = if i > 0 {
            (r.seconds / scaling[i - 1].seconds).to_string()
        } else {
            String::new()
        };
        let _ = writeln!(scaling_csv, "{},{},{},{ratio}", r.n, r.layers, r.seconds);
    }
    write_text(&out.join("scaling.csv"), &scaling_csv)?;
    write_text(&out.join("bounds.csv"), &bounds_csv(&gradient_bound))?;
    let report = DiagReport {
        contraction,
        gradient_bound,
        scaling,
    };
    io::write_json(&out.join("diag.json"), &report)?;

    for c in &report.contraction {
        say(
            cli,
            format!(
                "view {} layer {}: |R|_2 {:.4} max ratio {:.4} bound {} {}",
                c.view,
                c.layer,
                c.r_norm,
                c.max_ratio,
                if c.bound_holds { "holds" } else { "VIOLATED" },
                if c.contractive {
                    "(contractive)"
                } else {
                    "(not contractive)"
                }
            ),
        );
    }
    if !report.gradient_bound.is_empty() {
        let held = report.gradient_bound.iter().filter(|r| r.holds()).count();
        say(
            cli,
            format!(
                "gradient bound held on {held}/{} batches",
                report.gradient_bound.len()
            ),
        );
    }
    for r in &report.scaling {
        say(cli, format!("N={:<6} {:.6}s", r.n, r.seconds));
    }
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_unknown_keys() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let partial: RunConfig = serde_json::from_str(r#"{"train": {"epochs": 3}}"#).unwrap();
        assert_eq!(partial.train.epochs, 3);
        assert_eq!(partial.train.batch_size, TrainConfig::default().batch_size);
        assert!(serde_json::from_str::<RunConfig>(r#"{"trian": {}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"epoch": 3}}"#).is_err());
        assert!(
            serde_json::from_str::<RunConfig>(r#"{"split": {"ratios": {"train": 0.5}}}"#).is_err()
        );
    }

    #[test]
    fn seed_reaches_every_section() {
        let cfg = RunConfig::default().with_seed(9);
        assert_eq!(
            [
                cfg.synth.seed,
                cfg.split.seed,
                cfg.train.seed,
                cfg.oracle.admm.seed,
                cfg.gradcheck.seed,
                cfg.diag.seed
            ],
            [9; 6]
        );
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["openviewer", "frobnicate"]), 1);
        assert_eq!(run(["openviewer", "gradcheck", "--bogus"]), 1);
        assert_eq!(run(["openviewer"]), 1);
        assert_eq!(run(["openviewer", "split", "--manifest", "x.json"]), 1);
        assert_eq!(run(["openviewer", "--help"]), 0);
        assert_eq!(run(["openviewer", "--version"]), 0);
    }

    #[test]
    fn enum_names_parse() {
        assert_eq!(
            parse_name::<ScoreMode>("score", "logit_norm").unwrap(),
            ScoreMode::LogitNorm
        );
        assert!(matches!(
            parse_name::<ScoreMode>("score", "entropy"),
            Err(CliError::Usage(_))
        ));
    }
}
