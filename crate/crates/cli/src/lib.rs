//! `group-muon`: verify, sweep, train, profile and oracle subcommands.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error,
//! 3 divergence only, 4 property failure.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use groupmuon_core::{aligned_closed_form, build_groups, transfer_lr, GroupingRule};
use groupmuon_harness::metrics::{write_csv, write_jsonl, MetricsRecord};
use groupmuon_harness::sweep::write_rows_csv;
use groupmuon_harness::{
    run_battery, run_sweep, run_training, HarnessError, OutputFormat, RunConfig, Split, Status, SweepSpec,
};
use log::info;
use serde_json::json;

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_PROPERTY: i32 = 4;

pub const LOG_ENV: &str = "GROUP_MUON_LOG";

pub const ORACLE_KINDS: [&str; 3] = ["aligned-gain", "lr-transfer", "grouping"];

#[derive(Debug, Parser)]
#[command(name = "group-muon", version, about = "Full, head-wise and grouped Muon experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the property battery and write a JSON report.
    Verify(Common),
    /// Train one cell per (target, rule, group size, repetition).
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        sweep: PathBuf,
        #[arg(long)]
        parallel: Option<usize>,
    },
    /// Train the toy model once.
    Train(Common),
    /// Train with the rank and norm-gap profilers attached.
    Profile(Common),
    /// Print closed-form values: aligned-gain, lr-transfer, grouping.
    Oracle {
        kind: String,
        /// key=value pairs
        params: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
    Both,
}

impl From<Format> for OutputFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => OutputFormat::Csv,
            Format::Json => OutputFormat::Json,
            Format::Both => OutputFormat::Both,
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        let code = match &e {
            HarnessError::Config(_) | HarnessError::TomlParse(_) => EXIT_CONFIG,
            HarnessError::Core(groupmuon_core::Error::InvalidConfiguration(_)) => EXIT_CONFIG,
            HarnessError::Diverged { .. } => EXIT_DIVERGED,
            _ => EXIT_OTHER,
        };
        Self::new(code, e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::new(EXIT_OTHER, e.to_string())
    }
}

type CliResult<T> = Result<T, Failure>;

pub fn init_logging() {
    let env = env_logger::Env::new().filter_or(LOG_ENV, "info");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Runs a parsed command, writing the summary to `out`; returns the exit code.
pub fn run(cli: &Cli, out: &mut dyn Write) -> i32 {
    let result = match &cli.command {
        Command::Verify(c) => cmd_verify(c, out),
        Command::Sweep { common, sweep, parallel } => cmd_sweep(common, sweep, *parallel, out),
        Command::Train(c) => cmd_train(c, out, false),
        Command::Profile(c) => cmd_train(c, out, true),
        Command::Oracle { kind, params, out: path } => cmd_oracle(kind, params, path.as_deref(), out),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn load_config(c: &Common) -> CliResult<RunConfig> {
    let mut config = match &c.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::new(EXIT_CONFIG, format!("cannot read {}: {e}", path.display())))?;
            RunConfig::from_toml_str(&text)
                .map_err(|e| Failure::new(EXIT_CONFIG, format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(dir) = &c.out {
        config.output.directory = dir.clone();
    }
    if let Some(f) = c.format {
        config.output.format = f.into();
    }
    Ok(config)
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_records(dir: &Path, stem: &str, format: OutputFormat, records: &[MetricsRecord]) -> CliResult<()> {
    if format.csv() {
        write_csv(records, create(&dir.join(format!("{stem}.csv")))?)?;
    }
    if format.json() {
        let mut w = create(&dir.join(format!("{stem}.jsonl")))?;
        write_jsonl(records, &mut w)?;
        w.flush()?;
    }
    Ok(())
}

fn cmd_verify(c: &Common, out: &mut dyn Write) -> CliResult<i32> {
    let config = load_config(c)?;
    let report = run_battery(&config.verify)?;
    let path = config.output.directory.join("verify_report.json");
    let mut w = create(&path)?;
    serde_json::to_writer_pretty(&mut w, &report).map_err(HarnessError::from)?;
    w.flush()?;
    writeln!(out, "{:<24} {:>6} {:>8} {:>8}", "suite", "status", "checks", "failures")?;
    for s in &report.suites {
        let status = if s.status == Status::Pass { "pass" } else { "FAIL" };
        writeln!(out, "{:<24} {:>6} {:>8} {:>8}", s.name, status, s.checks, s.failures)?;
    }
    writeln!(out, "report: {}", path.display())?;
    Ok(if report.passed { EXIT_OK } else { EXIT_PROPERTY })
}

fn cmd_train(c: &Common, out: &mut dyn Write, profile: bool) -> CliResult<i32> {
    let mut config = load_config(c)?;
    if profile && config.training.profile_every == 0 {
        config.training.profile_every = config.training.eval_every;
    }
    let outcome = run_training(&config)?;
    let dir = &config.output.directory;
    let stem = if profile { "profile" } else { "metrics" };
    write_records(dir, stem, config.output.format, &outcome.records)?;
    writeln!(out, "steps completed  {}", outcome.steps_completed)?;
    if let Some(v) = outcome.final_val_loss {
        writeln!(out, "final val loss   {v:.6}")?;
    }
    if let Some(v) = outcome.best_val_loss {
        writeln!(out, "best val loss    {v:.6}")?;
    }
    if profile {
        writeln!(out, "{:<12} {:>18} {:>12}", "parameter", "median rank ratio", "median gap")?;
        let mut ids: Vec<&str> = Vec::new();
        for r in outcome.records.iter().filter(|r| r.split == Split::Profile) {
            let id = r.parameter_id.as_deref().unwrap_or("");
            if !ids.contains(&id) {
                ids.push(id);
            }
        }
        for id in ids {
            let rows = || outcome.records.iter().filter(|r| r.parameter_id.as_deref() == Some(id));
            let ratio = median(rows().filter_map(|r| r.full_rank_ratio).collect());
            let gap = median(rows().filter_map(|r| r.gap).collect());
            writeln!(out, "{id:<12} {ratio:>18.4} {gap:>12.4}")?;
        }
    }
    writeln!(out, "output: {}", dir.display())?;
    Ok(match outcome.diverged_at {
        Some(step) => {
            writeln!(out, "diverged at step {step}")?;
            EXIT_DIVERGED
        }
        None => EXIT_OK,
    })
}

pub fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn cmd_sweep(c: &Common, sweep: &Path, parallel: Option<usize>, out: &mut dyn Write) -> CliResult<i32> {
    let config = load_config(c)?;
    let spec = SweepSpec::from_path(sweep).map_err(|e| Failure::new(EXIT_CONFIG, format!("{}: {e}", sweep.display())))?;
    let plan = spec.plan(&config)?;
    let workers = parallel.unwrap_or(spec.parallel);
    if workers == 0 {
        return Err(Failure::new(EXIT_CONFIG, "--parallel must be at least 1"));
    }
    let dir = config.output.directory.clone();
    let format = config.output.format;
    info!("sweep: {} cells on {workers} worker(s)", plan.len());
    let rows = run_sweep(&plan, workers, |i, _, records| {
        write_records(&dir.join("cells"), &format!("cell_{i:03}"), format, records).map_err(|f| HarnessError::Config(f.message))
    })
    .map_err(Failure::from)?;

    if format.csv() {
        write_rows_csv(&rows, create(&dir.join("sweep.csv"))?)?;
    }
    if format.json() {
        let mut w = create(&dir.join("sweep.json"))?;
        serde_json::to_writer_pretty(&mut w, &rows).map_err(HarnessError::from)?;
        w.flush()?;
    }
    writeln!(out, "{:<11} {:<9} {:>3} {:>4} {:>10} {:>10} {:>6} {:>8}", "target", "rule", "g", "rep", "final", "best", "steps", "diverged")?;
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    for r in &rows {
        writeln!(
            out,
            "{:<11} {:<9} {:>3} {:>4} {:>10} {:>10} {:>6} {:>8}",
            r.target.name(),
            r.rule.name(),
            r.group_size,
            r.repetition,
            fmt(r.final_val_loss),
            fmt(r.best_val_loss),
            r.steps,
            r.diverged
        )?;
    }
    writeln!(out, "output: {}", dir.display())?;
    Ok(if rows.iter().any(|r| !r.diverged) { EXIT_OK } else { EXIT_DIVERGED })
}

fn parse_params(params: &[String]) -> CliResult<Vec<(String, String)>> {
    params
        .iter()
        .map(|p| {
            p.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Failure::new(EXIT_CONFIG, format!("expected key=value, got {p:?}")))
        })
        .collect()
}

fn param<T: std::str::FromStr>(kv: &[(String, String)], keys: &[&str], default: Option<T>) -> CliResult<T> {
    match kv.iter().rev().find(|(k, _)| keys.contains(&k.as_str())) {
        Some((k, v)) => v.parse().map_err(|_| Failure::new(EXIT_CONFIG, format!("cannot parse {k}={v}"))),
        None => default.ok_or_else(|| Failure::new(EXIT_CONFIG, format!("missing parameter {}", keys[0]))),
    }
}

fn check_keys(kv: &[(String, String)], allowed: &[&str]) -> CliResult<()> {
    match kv.iter().find(|(k, _)| !allowed.contains(&k.as_str())) {
        Some((k, _)) => Err(Failure::new(EXIT_CONFIG, format!("unknown parameter {k}; expected one of {}", allowed.join(", ")))),
        None => Ok(()),
    }
}

fn shape(s: &str) -> CliResult<(usize, usize)> {
    let bad = || Failure::new(EXIT_CONFIG, format!("expected ROWSxCOLS, got {s:?}"));
    let (r, c) = s.split_once('x').ok_or_else(bad)?;
    let (r, c): (usize, usize) = (r.parse().map_err(|_| bad())?, c.parse().map_err(|_| bad())?);
    if r == 0 || c == 0 {
        return Err(bad());
    }
    Ok((r, c))
}

/// Closed-form value for an oracle kind, as JSON.
pub fn oracle_value(kind: &str, params: &[String]) -> CliResult<serde_json::Value> {
    let kv = parse_params(params)?;
    match kind {
        "aligned-gain" => {
            check_keys(&kv, &["k", "a", "strengths"])?;
            let strengths: Vec<f64> = match kv.iter().rev().find(|(k, _)| k == "strengths") {
                Some((_, v)) => v
                    .split(',')
                    .map(|x| x.trim().parse().map_err(|_| Failure::new(EXIT_CONFIG, format!("cannot parse strength {x:?}"))))
                    .collect::<CliResult<_>>()?,
                None => {
                    let k: usize = param(&kv, &["k"], Some(4))?;
                    let a: f64 = param(&kv, &["a"], Some(1.0))?;
                    vec![a; k]
                }
            };
            if strengths.is_empty() || strengths.iter().any(|a| *a == 0.0 || !a.is_finite()) {
                return Err(Failure::new(EXIT_CONFIG, "strengths must be finite and nonzero, k >= 1"));
            }
            let (gain, gap) = aligned_closed_form(&strengths);
            Ok(json!({ "kind": kind, "k": strengths.len(), "strengths": strengths, "gain": gain, "rank_gap": gap }))
        }
        "lr-transfer" => {
            check_keys(&kv, &["base_lr", "lr", "full", "group"])?;
            let base: f64 = param(&kv, &["base_lr", "lr"], Some(1.0))?;
            let full = shape(&param::<String>(&kv, &["full"], None)?)?;
            let group = shape(&param::<String>(&kv, &["group"], None)?)?;
            let lr = transfer_lr(base, full, group);
            Ok(json!({ "kind": kind, "base_lr": base, "full": [full.0, full.1], "group": [group.0, group.1], "lr": lr, "factor": lr / base }))
        }
        "grouping" => {
            check_keys(&kv, &["H", "h", "num_heads", "g", "group_size", "rule", "seed", "step", "resample"])?;
            let h: usize = param(&kv, &["H", "h", "num_heads"], Some(12))?;
            let g: usize = param(&kv, &["g", "group_size"], None)?;
            let seed: u64 = param(&kv, &["seed"], Some(0))?;
            let step: u64 = param(&kv, &["step"], Some(0))?;
            let resample: bool = param(&kv, &["resample"], Some(true))?;
            let rule = match param::<String>(&kv, &["rule"], Some("adjacent".into()))?.as_str() {
                "adjacent" => GroupingRule::Adjacent,
                "interval" => GroupingRule::Interval,
                "random" => GroupingRule::Random { seed, resample_each_step: resample },
                other => {
                    return Err(Failure::new(EXIT_CONFIG, format!("unknown rule {other:?}; expected adjacent, interval, random")))
                }
            };
            let grouping = build_groups(h, g, rule, step).map_err(|e| Failure::new(EXIT_CONFIG, e.to_string()))?;
            Ok(json!({ "kind": kind, "num_heads": h, "group_size": g, "rule": rule.name(), "seed": seed, "step": step, "groups": grouping.groups() }))
        }
        other => Err(Failure::new(
            EXIT_CONFIG,
            format!("unknown oracle kind {other:?}; valid kinds: {}", ORACLE_KINDS.join(", ")),
        )),
    }
}

fn cmd_oracle(kind: &str, params: &[String], path: Option<&Path>, out: &mut dyn Write) -> CliResult<i32> {
    let v = oracle_value(kind, params)?;
    match kind {
        "aligned-gain" => writeln!(out, "gain {} rank_gap {}", v["gain"], v["rank_gap"])?,
        "lr-transfer" => writeln!(out, "lr {} (factor {})", v["lr"], v["factor"])?,
        _ => {
            let groups: Vec<String> = v["groups"]
                .as_array()
                .expect("groups array")
                .iter()
                .map(|g| {
                    let members: Vec<String> = g.as_array().expect("group").iter().map(|x| x.to_string()).collect();
                    format!("{{{}}}", members.join(","))
                })
                .collect();
            writeln!(out, "{}", groups.join(","))?;
        }
    }
    writeln!(out, "{v}")?;
    if let Some(p) = path {
        let mut w = create(p)?;
        serde_json::to_writer_pretty(&mut w, &v).map_err(HarnessError::from)?;
        w.flush()?;
    }
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn aligned_gain_default_cell() {
        let v = oracle_value("aligned-gain", &params(&["k=4", "a=1"])).unwrap();
        assert_eq!(v["gain"], 2.0);
        assert_eq!(v["rank_gap"], 3);
        let v = oracle_value("aligned-gain", &params(&["strengths=3,4"])).unwrap();
        assert_eq!(v["gain"], 2.0);
        assert_eq!(v["rank_gap"], 1);
    }

    #[test]
    fn grouping_examples() {
        let v = oracle_value("grouping", &params(&["H=12", "g=3", "rule=interval"])).unwrap();
        assert_eq!(v["groups"], json!([[0, 4, 8], [1, 5, 9], [2, 6, 10], [3, 7, 11]]));
        let v = oracle_value("grouping", &params(&["H=12", "g=12", "rule=adjacent"])).unwrap();
        assert_eq!(v["groups"], json!([(0..12).collect::<Vec<_>>()]));
        let err = oracle_value("grouping", &params(&["H=12", "g=5"])).unwrap_err();
        assert_eq!(err.code, EXIT_CONFIG);
    }

    #[test]
    fn lr_transfer() {
        let v = oracle_value("lr-transfer", &params(&["base_lr=0.02", "full=768x768", "group=64x768"])).unwrap();
        assert_eq!(v["lr"], 0.02);
        let v = oracle_value("lr-transfer", &params(&["full=96x96", "group=8x24"])).unwrap();
        assert!((v["factor"].as_f64().unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn unknown_kind_lists_kinds() {
        let err = oracle_value("spectrum", &[]).unwrap_err();
        assert_eq!(err.code, EXIT_CONFIG);
        for k in ORACLE_KINDS {
            assert!(err.message.contains(k));
        }
    }

    #[test]
    fn bad_params() {
        assert!(oracle_value("aligned-gain", &params(&["k4"])).is_err());
        assert!(oracle_value("aligned-gain", &params(&["z=1"])).unwrap_err().message.contains("unknown parameter z"));
        assert!(oracle_value("aligned-gain", &params(&["a=0"])).is_err());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(vec![]).is_nan());
    }
}
