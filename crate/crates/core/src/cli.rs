//! Command-line front end: `synth`, `encode`, `train`, `eval`, `gradcheck`,
//! `dump-image` and `stats`.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric
//! failure (non-finite values, failed gradient check).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgMatches, Args, Command, FromArgMatches, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{RawDataset, Split};
use crate::error::{Error, Result};
use crate::gafenc::io::{read_gaf6, write_gaf6, write_pgm};
use crate::gafenc::{encode_stack, ChannelSet, GafVariant, STACK_CHANNELS};
use crate::ingest::{parse_signature, KinematicChannels};
use crate::synthgen::{make_raw_dataset, SynthConfig, DEFAULT_WARP};
use crate::trainer::{
    gradient_check, load_checkpoint, metrics_csv, run_steps, save_checkpoint, TrainConfig, TrainState, CONFIG_KEYS,
    METRICS_HEADER,
};
use crate::verify::{embed_all, evaluate, margin_stats, MarginStats, WriterEmbeddings};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const CHECKPOINT_FILE: &str = "checkpoint.gafw";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Debug, Parser)]
#[command(name = "gafsv", version, about = "Online signature verification with Gramian Angular Field encodings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Generate a synthetic signature dataset.
    Synth(SynthArgs),
    /// Encode one signature file into a GAF6 stack.
    Encode(EncodeArgs),
    /// Train an encoder on a dataset directory.
    Train(TrainArgs),
    /// Score held-out writers and report EERs.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients of the total loss.
    Gradcheck(GradcheckArgs),
    /// Write one channel of a GAF6 stack as a PGM image.
    DumpImage(DumpImageArgs),
    /// Genuine and forgery cosine margins of a checkpoint.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 50)]
    pub writers: usize,
    /// Genuine samples per writer.
    #[arg(long, default_value_t = 10)]
    pub genuine: usize,
    /// Skilled forgeries per writer.
    #[arg(long, default_value_t = 6)]
    pub forgeries: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Series length every sample must encode at.
    #[arg(long = "M", default_value_t = 64)]
    pub m: usize,
    /// Time-warp amplitude of skilled forgeries.
    #[arg(long, default_value_t = DEFAULT_WARP)]
    pub warp: f64,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    /// Signature text file.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// GAF6 output file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "M", default_value_t = 64)]
    pub m: usize,
    /// asym or sym.
    #[arg(long = "gaf-variant", default_value = "asym")]
    pub gaf_variant: String,
    /// Kinematic channels to keep, a subset of v,dp,theta.
    #[arg(long, default_value = "v,dp,theta")]
    pub channels: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Config file of `key = value` lines; flags win on conflict.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for the checkpoint, metrics and resolved config.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint up to `steps` total steps.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Print a loss line every this many steps; 0 is silent.
    #[arg(long = "log-every", default_value_t = 100)]
    pub log_every: usize,
    #[command(flatten)]
    pub overrides: ConfigFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Enrollment references per writer.
    #[arg(long, default_value_t = 4)]
    pub enroll: usize,
    /// JSON report path; printed to stdout when absent.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Seed for drawing random impostors.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Config file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Parameter coordinates to check.
    #[arg(long, default_value_t = 200)]
    pub coords: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct DumpImageArgs {
    /// GAF6 input file.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Channel index, 0-5.
    #[arg(long, default_value_t = 0)]
    pub channel: usize,
    /// PGM output file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// JSON report path; printed to stdout when absent.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Writers to use: train, eval or all.
    #[arg(long, default_value = "eval")]
    pub split: String,
}

/// One optional flag per config key, `--M` for `M` and dashes elsewhere.
#[derive(Debug, Clone, Default)]
pub struct ConfigFlags(pub Vec<(String, String)>);

fn flag_name(key: &str) -> String {
    if key == "M" {
        key.to_string()
    } else {
        key.replace('_', "-")
    }
}

impl FromArgMatches for ConfigFlags {
    fn from_arg_matches(m: &ArgMatches) -> std::result::Result<Self, clap::Error> {
        Ok(ConfigFlags(
            CONFIG_KEYS.iter().filter_map(|k| m.get_one::<String>(k).map(|v| (k.to_string(), v.clone()))).collect(),
        ))
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> std::result::Result<(), clap::Error> {
        *self = Self::from_arg_matches(m)?;
        Ok(())
    }
}

impl Args for ConfigFlags {
    fn augment_args(cmd: Command) -> Command {
        let d = TrainConfig::default();
        CONFIG_KEYS.iter().fold(cmd, |c, k| {
            c.arg(
                Arg::new(*k)
                    .long(flag_name(k))
                    .value_name("VALUE")
                    .help(format!("[default: {}]", d.get(k).expect("known key")))
                    .help_heading("Config overrides"),
            )
        })
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numeric() {
        EXIT_NUMERIC
    } else if matches!(e, Error::Config(_) | Error::InvalidArgument(_)) {
        EXIT_USAGE
    } else {
        EXIT_DATA
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Synth(a) => synth(a),
        Cmd::Encode(a) => encode(a),
        Cmd::Train(a) => train(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Gradcheck(a) => gradcheck(a),
        Cmd::DumpImage(a) => dump_image(a),
        Cmd::Stats(a) => stats(a),
    }
}

fn print_resolved(pairs: &[(&str, String)]) {
    for (k, v) in pairs {
        println!("{k} = {v}");
    }
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

fn synth(a: SynthArgs) -> Result<()> {
    print_resolved(&[
        ("writers", a.writers.to_string()),
        ("genuine", a.genuine.to_string()),
        ("forgeries", a.forgeries.to_string()),
        ("seed", a.seed.to_string()),
        ("M", a.m.to_string()),
        ("warp", a.warp.to_string()),
        ("out", show(&a.out)),
    ]);
    if a.m < 4 || a.m % 2 != 0 {
        return Err(Error::InvalidArgument(format!("M must be even and at least 4, got {}", a.m)));
    }
    let cfg = SynthConfig { writers: a.writers, genuine: a.genuine, forgeries: a.forgeries, seed: a.seed, warp: a.warp };
    let ds = make_raw_dataset(&cfg)?;
    for (sig, path) in ds.signatures.iter().zip(&ds.paths) {
        KinematicChannels::extract(sig, a.m).map_err(|e| Error::InsufficientData(format!("{path}: {e}")))?;
    }
    ds.save(&a.out)?;
    println!("wrote {} signatures ({} train writers, {} eval writers)", ds.signatures.len(), ds.train.len(), ds.eval.len());
    Ok(())
}

fn encode(a: EncodeArgs) -> Result<()> {
    print_resolved(&[
        ("in", show(&a.input)),
        ("out", show(&a.out)),
        ("M", a.m.to_string()),
        ("gaf_variant", a.gaf_variant.clone()),
        ("channels", a.channels.clone()),
    ]);
    let variant: GafVariant = a.gaf_variant.parse()?;
    let channels: ChannelSet = a.channels.parse()?;
    let sig = parse_signature(&fs::read_to_string(&a.input)?)?;
    let k = KinematicChannels::extract(&sig, a.m)?;
    let stack = encode_stack(&k, variant, channels)?;
    fs::write(&a.out, write_gaf6(&stack))?;
    println!("wrote {} ({STACK_CHANNELS} x {side} x {side})", show(&a.out), side = stack.side);
    Ok(())
}

fn resolve_config(file: Option<&Path>, overrides: &ConfigFlags) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(p) = file {
        cfg.apply_text(&fs::read_to_string(p)?)?;
    }
    for (k, v) in &overrides.0 {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<()> {
    let (mut cfg, resumed) = match &a.resume {
        Some(p) => {
            let (mut cfg, state) = load_checkpoint(&fs::read(p)?)?;
            if let Some(f) = &a.config {
                cfg.apply_text(&fs::read_to_string(f)?)?;
            }
            (cfg, Some(state))
        }
        None => (resolve_config(a.config.as_deref(), &ConfigFlags::default())?, None),
    };
    for (k, v) in &a.overrides.0 {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    print!("{}", cfg.to_text());
    let mut state = match resumed {
        Some(s) => {
            if s.encoder.config != cfg.encoder {
                return Err(Error::Config("encoder settings differ from the resumed checkpoint".into()));
            }
            s
        }
        None => TrainState::new(&cfg)?,
    };
    let data = RawDataset::load(&a.data)?.encode(&cfg.encoding())?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join(CONFIG_FILE), cfg.to_text())?;

    let start = state.step;
    let remaining = cfg.steps.saturating_sub(start);
    let log_every = a.log_every;
    let rows = run_steps(&mut state, &data, &cfg, remaining, |row, report| {
        if log_every > 0 && row.step % log_every == 0 {
            let v = &row.values;
            println!(
                "step {} loss {:.6} sample {:.6} cluster {:.6} unif {:.6} semihard {:.3}",
                row.step,
                v.total,
                v.sample,
                v.cluster,
                v.unif,
                report.semi_hard_fraction()
            );
        }
    })?;

    let metrics_path = a.out.join(METRICS_FILE);
    let mut csv = String::new();
    if start > 0 {
        csv = previous_rows(&metrics_path, start);
    }
    if csv.is_empty() {
        csv = metrics_csv(&rows);
    } else {
        csv.push_str(metrics_csv(&rows).split_once('\n').map_or("", |(_, body)| body));
    }
    fs::write(&metrics_path, csv)?;
    fs::write(a.out.join(CHECKPOINT_FILE), save_checkpoint(&state, &cfg)?)?;
    println!("trained {} steps, checkpoint at {}", state.step, show(&a.out.join(CHECKPOINT_FILE)));
    Ok(())
}

/// Header plus the rows up to `step` of an existing metrics file, or empty.
fn previous_rows(path: &Path, step: usize) -> String {
    let Ok(text) = fs::read_to_string(path) else {
        return String::new();
    };
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return String::new();
    }
    let mut out = format!("{METRICS_HEADER}\n");
    for l in lines {
        match l.split(',').next().and_then(|s| s.parse::<usize>().ok()) {
            Some(s) if s <= step => {
                out.push_str(l);
                out.push('\n');
            }
            _ => break,
        }
    }
    out
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => Ok(fs::write(p, text)?),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let (cfg, state) = load_checkpoint(&fs::read(&a.checkpoint)?)?;
    print!("{}", cfg.to_text());
    print_resolved(&[
        ("completed_steps", state.step.to_string()),
        ("enroll", a.enroll.to_string()),
        ("eval_seed", a.seed.to_string()),
    ]);
    let data = RawDataset::load(&a.data)?.encode(&cfg.encoding())?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let (report, _) = evaluate(&state.encoder, &data, a.enroll, &mut rng)?;
    println!(
        "sf_eer {:.4} rf_eer {:.4} mu_g {:.4} mu_f {:.4} delta {:.4}",
        report.sf_eer, report.rf_eer, report.mu_g, report.mu_f, report.delta
    );
    write_or_print(a.report.as_deref(), &report.to_json())
}

/// A small synthetic set large enough for one default episode.
const GRADCHECK_DATA: SynthConfig = SynthConfig { writers: 12, genuine: 5, forgeries: 2, seed: 0, warp: DEFAULT_WARP };

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let mut cfg = resolve_config(a.config.as_deref(), &ConfigFlags::default())?;
    cfg.set("seed", &a.seed.to_string())?;
    print!("{}", cfg.to_text());
    print_resolved(&[
        ("coords", a.coords.to_string()),
        ("step", a.step.to_string()),
        ("tolerance", a.tolerance.to_string()),
    ]);
    let writers = GRADCHECK_DATA.writers.max(cfg.writers_per_step * 5 / 4 + 2);
    let genuine = GRADCHECK_DATA.genuine.max(cfg.extra_genuine + 2);
    let synth = SynthConfig { writers, genuine, seed: a.seed, ..GRADCHECK_DATA };
    let data = make_raw_dataset(&synth)?.encode(&cfg.encoding())?;
    let state = TrainState::new(&cfg)?;
    let r = gradient_check(&state.encoder, &data, &cfg, a.coords, a.step, a.seed)?;
    let (name, idx, analytic, numeric) = &r.worst;
    println!("checked {} coordinates, max relative error {:.3e}", r.checked, r.max_rel_error);
    println!("worst {name}[{idx}] analytic {analytic:.9e} numeric {numeric:.9e}");
    if r.max_rel_error >= a.tolerance {
        return Err(Error::Numeric(format!(
            "gradient check relative error {:.3e} is not below {:.1e}",
            r.max_rel_error, a.tolerance
        )));
    }
    Ok(())
}

fn dump_image(a: DumpImageArgs) -> Result<()> {
    print_resolved(&[("in", show(&a.input)), ("channel", a.channel.to_string()), ("out", show(&a.out))]);
    if a.channel >= STACK_CHANNELS {
        return Err(Error::InvalidArgument(format!("channel must be below {STACK_CHANNELS}, got {}", a.channel)));
    }
    let stack = read_gaf6(&fs::read(&a.input)?)?;
    fs::write(&a.out, write_pgm(stack.channel(a.channel), stack.side)?)?;
    println!("wrote {} ({side} x {side})", show(&a.out), side = stack.side);
    Ok(())
}

#[derive(Serialize)]
struct StatsReport<'a> {
    split: &'a str,
    #[serde(flatten)]
    margins: &'a MarginStats,
}

fn stats(a: StatsArgs) -> Result<()> {
    let (cfg, state) = load_checkpoint(&fs::read(&a.checkpoint)?)?;
    print!("{}", cfg.to_text());
    print_resolved(&[("completed_steps", state.step.to_string()), ("split", a.split.clone())]);
    let data = RawDataset::load(&a.data)?.encode(&cfg.encoding())?;
    let writers: Vec<String> = match a.split.as_str() {
        "train" => data.split(Split::Train).to_vec(),
        "eval" => data.split(Split::Eval).to_vec(),
        "all" => data.writers.keys().cloned().collect(),
        s => return Err(Error::InvalidArgument(format!("unknown split `{s}` (expected train|eval|all)"))),
    };
    let mut groups = Vec::with_capacity(writers.len());
    for w in &writers {
        let s = data.writer(w)?;
        groups.push(WriterEmbeddings {
            writer: w.clone(),
            genuine: embed_all(&state.encoder, &s.genuine)?,
            forgeries: embed_all(&state.encoder, &s.forgeries)?,
        });
    }
    let m = margin_stats(&groups)?;
    for w in &m.warnings {
        eprintln!("warning: {w}");
    }
    println!("mu_g {:.4} mu_f {:.4} delta {:.4}", m.mu_g, m.mu_f, m.delta);
    let json = serde_json::to_string_pretty(&StatsReport { split: &a.split, margins: &m })?;
    write_or_print(a.report.as_deref(), &json)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn config_flags_cover_every_key() {
        let help = Cli::command().find_subcommand_mut("train").unwrap().render_long_help().to_string();
        for k in CONFIG_KEYS {
            assert!(help.contains(&format!("--{}", flag_name(k))), "missing --{k}");
        }
        assert!(help.contains("[default: 2000]"));
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["gafsv", "eval", "--data", "x"]), EXIT_USAGE);
        assert_eq!(run(["gafsv", "train", "--data", "x", "--out", "y", "--bogus", "1"]), EXIT_USAGE);
        assert_eq!(run(["gafsv", "frobnicate"]), EXIT_USAGE);
    }

    #[test]
    fn error_classes_map_to_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_USAGE);
        assert_eq!(exit_code(&Error::Format("x".into())), EXIT_DATA);
        assert_eq!(exit_code(&Error::Io(std::io::Error::other("x"))), EXIT_DATA);
        assert_eq!(exit_code(&Error::NonFinite { path: "loss".into() }), EXIT_NUMERIC);
    }

    #[test]
    fn previous_rows_truncates_at_step() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        fs::write(&p, format!("{METRICS_HEADER}\n1,0,0,0,0\n2,0,0,0,0\n3,0,0,0,0\n")).unwrap();
        assert_eq!(previous_rows(&p, 2), format!("{METRICS_HEADER}\n1,0,0,0,0\n2,0,0,0,0\n"));
        assert_eq!(previous_rows(&dir.path().join("none"), 2), "");
    }
}
