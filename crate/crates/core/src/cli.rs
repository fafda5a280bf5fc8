//! The `monoview` command line: `train`, `synthesize`, `interpolate`,
//! `evaluate` and `inspect`.
//!
//! Usage errors exit with status 2, runtime failures with status 1 and a
//! one-line diagnostic on stderr.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::datapipe::{self, TrainingData, EVAL_CROP};
use crate::error::{Error, Result};
use crate::metrics;
use crate::netdef::{build_model, ModelGraph, ParameterCount};
use crate::synth::{self, InterpolationRequest, SynthesisRequest};
use crate::trainer::{Checkpoint, Schedule, Trainer};
use crate::warp::WarpDirection;

/// Environment variable naming the default dataset root.
pub const DATA_ROOT_ENV: &str = "MONOVIEW_DATA_ROOT";

#[derive(Debug, Parser)]
#[command(name = "monoview", version, about = "Monocular stereo view synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model through the phase schedule.
    Train(TrainArgs),
    /// Synthesize the other stereo view of one image.
    Synthesize(SynthArgs),
    /// Render intermediate views by scaling the estimated disparity.
    Interpolate(InterpArgs),
    /// Compare predicted and ground-truth image folders.
    Evaluate(EvalArgs),
    /// Print the layer tables and parameter counts.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Configuration file (`key = value` lines); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root holding the left/right folders.
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Output directory for checkpoints and the training log.
    #[arg(long)]
    out: PathBuf,
    /// Phases to run: 1, 2, 3, all, or a list such as 1,3 or III-e2e.
    #[arg(long)]
    phase: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Single-threaded, ordered execution.
    #[arg(long)]
    deterministic: bool,
    /// Checkpoint to continue from.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Extra `key=value` settings, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input PNG.
    #[arg(long)]
    input: PathBuf,
    /// `lr` synthesizes the right view from a left input, `rl` the reverse.
    #[arg(long, default_value = "lr")]
    direction: WarpDirection,
    /// Comma-separated subset of view, disparity, confidence, dbp, ref.
    #[arg(long, default_value = "view,disparity,confidence")]
    outputs: String,
    #[arg(long)]
    out: PathBuf,
    /// Center-crop the input to 256x512 (height x width) first.
    #[arg(long)]
    eval_crop: bool,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InterpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "lr")]
    direction: WarpDirection,
    /// Comma-separated ascending factors in [0, 1].
    #[arg(long, default_value = "0,0.25,0.5,0.75,1")]
    alphas: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Folder of predicted PNGs.
    #[arg(long)]
    pred: PathBuf,
    /// Folder of ground-truth PNGs with the same names.
    #[arg(long)]
    gt: PathBuf,
    /// Optional folder of disocclusion masks (nonzero = disoccluded).
    #[arg(long)]
    masks: Option<PathBuf>,
    /// Where to write metrics.txt and metrics.jsonl.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Center-crop images and masks to 256x512 (height x width) first.
    #[arg(long)]
    eval_crop: bool,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    /// Checkpoint or weight directory to verify against the architecture.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                2
            } else {
                let _ = write!(out, "{text}");
                0
            };
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<()> {
    let text = match cmd {
        Command::Train(a) => train(a)?,
        Command::Synthesize(a) => synthesize(a)?,
        Command::Interpolate(a) => interpolate(a)?,
        Command::Evaluate(a) => evaluate(a)?,
        Command::Inspect(a) => inspect(a)?,
    };
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

fn base_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn train(a: TrainArgs) -> Result<String> {
    let mut cfg = base_config(a.config.as_deref())?;
    if let Some(root) = a.data_root {
        cfg.data.root = root;
        cfg.data_root_set = true;
    } else if !cfg.data_root_set {
        if let Some(root) = std::env::var_os(DATA_ROOT_ENV) {
            cfg.data.root = root.into();
        }
    }
    if let Some(p) = &a.phase {
        cfg.schedule = p.parse::<Schedule>()?;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if a.deterministic {
        cfg.train.deterministic = true;
    }
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("expected KEY=VALUE, got `{kv}`")))?;
        cfg.set(k, v)?;
    }
    cfg.validate()?;

    let index = datapipe::load_dataset(&cfg.data, cfg.train.seed)?;
    index.write_split(&a.out)?;
    let data = TrainingData::from_index(&index);
    let graph = build_model(cfg.train.seed, cfg.encoder_weights.as_deref())?;
    let mut trainer = match &a.checkpoint {
        Some(c) => Trainer::from_checkpoint(graph, &Checkpoint::load(c)?, cfg.train.clone())?,
        None => Trainer::new(graph, cfg.train.clone())?,
    };
    let ck = trainer.run_schedule(&cfg.schedule, &data, Some(&a.out))?;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "trained {} on {} train / {} val pairs; best metric {:.6} at epoch {}",
        cfg.schedule.tag(),
        index.train.len(),
        index.val.len(),
        ck.meta.best_metric,
        ck.meta.epoch
    );
    let _ = writeln!(s, "final checkpoint: {}", a.out.join("final").display());
    Ok(s)
}

fn synthesize(a: SynthArgs) -> Result<String> {
    base_config(a.config.as_deref())?;
    let req = SynthesisRequest {
        input: a.input,
        direction: a.direction,
        checkpoint: a.checkpoint,
        outputs: synth::parse_artifacts(&a.outputs)?,
        out_dir: a.out,
        eval_crop: a.eval_crop,
    };
    let (_, written) = synth::synthesize(&req)?;
    Ok(written
        .iter()
        .map(|p| format!("{}\n", p.display()))
        .collect())
}

fn parse_alphas(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("bad interpolation factor `{p}`")))
        })
        .collect()
}

fn interpolate(a: InterpArgs) -> Result<String> {
    base_config(a.config.as_deref())?;
    let req = InterpolationRequest {
        input: a.input,
        direction: a.direction,
        alphas: parse_alphas(&a.alphas)?,
        checkpoint: a.checkpoint,
        out_dir: a.out,
    };
    let (_, written) = synth::interpolate(&req)?;
    Ok(written
        .iter()
        .map(|p| format!("{}\n", p.display()))
        .collect())
}

fn evaluate(a: EvalArgs) -> Result<String> {
    base_config(a.config.as_deref())?;
    let report = metrics::evaluate_directory(
        &a.pred,
        &a.gt,
        a.masks.as_deref(),
        a.eval_crop.then_some(EVAL_CROP),
    )?;
    if let Some(dir) = &a.out {
        report.write(dir)?;
    }
    Ok(report.to_table())
}

/// Layer tables and parameter counts of every component.
pub fn inspect_report(graph: &ModelGraph) -> String {
    let mut s = String::new();
    for c in graph.components() {
        let _ = writeln!(s, "== {} ({} layers)", c.name(), c.layers().len());
        let _ = writeln!(
            s,
            "{:>5} {:<14} {:>6} {:>7} {:>6} {:<8} {:>6} {:>12} {:>10}",
            "row", "kind", "stride", "filters", "kernel", "act", "concat", "in->out", "params"
        );
        for l in c.layers() {
            let sp = &l.spec;
            let row = if sp.inserted {
                format!("{}+", sp.index)
            } else {
                sp.index.to_string()
            };
            let _ = writeln!(
                s,
                "{:>5} {:<14} {:>6} {:>7} {:>6} {:<8} {:>6} {:>12} {:>10}",
                row,
                sp.kind.name(),
                sp.stride,
                sp.filters
                    .map(|f| f.to_string())
                    .unwrap_or_else(|| "-".into()),
                sp.kernel
                    .map(|(kh, kw)| format!("{kh}x{kw}"))
                    .unwrap_or_else(|| "-".into()),
                sp.activation.name(),
                sp.concat_target
                    .map(|t| t.to_string())
                    .unwrap_or_else(|| "-".into()),
                format!("{}->{}", l.in_channels, l.out_channels),
                l.parameter_count()
            );
        }
    }
    let _ = writeln!(s, "== parameter counts");
    for c in graph.components() {
        let _ = writeln!(s, "{:<12} {:>10}", c.name(), c.parameter_count());
    }
    let _ = writeln!(s, "{:<12} {:>10}", "dbp", graph.dbp_parameter_count());
    let _ = writeln!(s, "{:<12} {:>10}", "total", graph.parameter_count());
    s
}

fn inspect(a: InspectArgs) -> Result<String> {
    base_config(a.config.as_deref())?;
    let graph = match &a.checkpoint {
        Some(c) => synth::load_graph(c)?,
        None => ModelGraph::zeroed()?,
    };
    Ok(inspect_report(&graph))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        let code = run(args.iter().copied(), &mut o, &mut e);
        (
            code,
            String::from_utf8(o).unwrap(),
            String::from_utf8(e).unwrap(),
        )
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run_capture(&["monoview"]).0, 2);
        assert_eq!(run_capture(&["monoview", "fly"]).0, 2);
        let (code, _, err) = run_capture(&["monoview", "synthesize", "--input", "x.png"]);
        assert_eq!(code, 2);
        assert!(err.contains("--checkpoint"), "{err}");
        assert_eq!(run_capture(&["monoview", "inspect", "--bogus"]).0, 2);
    }

    #[test]
    fn help_exits_0() {
        let (code, out, _) = run_capture(&["monoview", "--help"]);
        assert_eq!(code, 0);
        assert!(out.contains("interpolate"));
    }

    #[test]
    fn inspect_lists_components() {
        let (code, out, _) = run_capture(&["monoview", "inspect"]);
        assert_eq!(code, 0);
        assert!(out.contains("== encoder (27 layers)"));
        assert!(out.contains("total"));
    }

    #[test]
    fn runtime_errors_exit_1() {
        let (code, _, err) =
            run_capture(&["monoview", "inspect", "--checkpoint", "/nonexistent/ck"]);
        assert_eq!(code, 1);
        assert!(err.starts_with("error: "));
        assert_eq!(err.lines().count(), 1);
    }

    #[test]
    fn alpha_lists() {
        assert_eq!(parse_alphas("0, 0.5,1").unwrap(), vec![0.0, 0.5, 1.0]);
        assert!(parse_alphas("0,x").is_err());
    }
}
