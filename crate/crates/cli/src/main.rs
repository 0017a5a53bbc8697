//! Thin command-line shell over the library: every behavior here is a
//! library call plus argument plumbing, so anything scriptable from the CLI
//! is equally reachable from code.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tally_core::harness::{
    csv_string, parse_noise_mode, run_trials, summary_json, ExperimentConfig,
};
use tally_core::privacy_audit::{audit_partial_dp, AuditConfig, AuditVerdict};

#[derive(Parser)]
#[command(name = "tally", about = "Distributed count tracking simulator", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write per-trial metrics as CSV.
    Run(RunOpts),
    /// Monte Carlo check of the tracker's output-distribution closeness on
    /// a pinned pair of neighboring inputs.
    Audit(AuditOpts),
    /// Run a list of configurations and write one aggregate row each.
    Sweep(SweepOpts),
}

/// Experiment knobs. Every field can also come from `--config` as a
/// `key=value` line (same names); explicit flags win over the file.
#[derive(Args, Clone, Default)]
struct RunOpts {
    /// robust, oblivious, or deterministic
    #[arg(long)]
    mechanism: Option<String>,
    /// replay, replay:single_site:<i>, stop_on_fire, or update_chaser
    #[arg(long)]
    adversary: Option<String>,
    /// Number of sites.
    #[arg(long)]
    k: Option<u32>,
    /// Relative accuracy target, in (0, 1).
    #[arg(long)]
    alpha: Option<f64>,
    /// Whole-run failure probability budget, in (0, 1).
    #[arg(long)]
    delta: Option<f64>,
    /// Items delivered per trial.
    #[arg(long)]
    items: Option<u64>,
    #[arg(long)]
    trials: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// standard or disabled
    #[arg(long)]
    noise_mode: Option<String>,
    /// CSV destination; the aggregate summary lands next to it as
    /// <stem>.summary.json.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for trials; 0 means all cores.
    #[arg(long)]
    workers: Option<usize>,
    /// key=value file with any of the other options.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl RunOpts {
    /// File values fill whatever the flags left unset.
    fn or(self, fallback: RunOpts) -> RunOpts {
        RunOpts {
            mechanism: self.mechanism.or(fallback.mechanism),
            adversary: self.adversary.or(fallback.adversary),
            k: self.k.or(fallback.k),
            alpha: self.alpha.or(fallback.alpha),
            delta: self.delta.or(fallback.delta),
            items: self.items.or(fallback.items),
            trials: self.trials.or(fallback.trials),
            seed: self.seed.or(fallback.seed),
            noise_mode: self.noise_mode.or(fallback.noise_mode),
            out: self.out.or(fallback.out),
            workers: self.workers.or(fallback.workers),
            config: None,
        }
    }
}

#[derive(Args)]
struct AuditOpts {
    /// Number of sites; capped so the signature space stays samplable.
    #[arg(long)]
    k: Option<u32>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    trials: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// standard or disabled
    #[arg(long)]
    noise_mode: Option<String>,
    /// Threshold offset of the target block in the first input.
    #[arg(long)]
    offset_a: Option<u64>,
    /// Threshold offset of the target block in the second input; equal
    /// offsets give the identical-inputs null check.
    #[arg(long)]
    offset_b: Option<u64>,
    /// Smallest combined signature count an event needs to be evaluated.
    #[arg(long)]
    min_count: Option<u64>,
    /// Items the driven run delivers.
    #[arg(long)]
    budget: Option<u64>,
    /// Write the event table here as well as stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepOpts {
    #[command(flatten)]
    base: RunOpts,
    /// Comma-separated site counts, one sweep point each.
    #[arg(long, value_delimiter = ',')]
    k_list: Vec<u32>,
    /// Comma-separated accuracy targets, one sweep point each.
    #[arg(long, value_delimiter = ',')]
    alpha_list: Vec<f64>,
    /// Comma-separated mechanisms to compare at every point.
    #[arg(long, value_delimiter = ',')]
    mechanisms: Vec<String>,
}

fn read_config_file(path: &Path) -> Result<RunOpts, String> {
    let text =
        fs::read_to_string(path).map_err(|e| format!("config {}: {e}", path.display()))?;
    let mut opts = RunOpts::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("config line {}: expected key=value", lineno + 1))?;
        let (key, value) = (key.trim(), value.trim());
        let bad = |e: &dyn std::fmt::Display| format!("config key {key}: {e}");
        match key {
            "mechanism" => opts.mechanism = Some(value.to_string()),
            "adversary" => opts.adversary = Some(value.to_string()),
            "k" => opts.k = Some(value.parse().map_err(|e| bad(&e))?),
            "alpha" => opts.alpha = Some(value.parse().map_err(|e| bad(&e))?),
            "delta" => opts.delta = Some(value.parse().map_err(|e| bad(&e))?),
            "items" => opts.items = Some(value.parse().map_err(|e| bad(&e))?),
            "trials" => opts.trials = Some(value.parse().map_err(|e| bad(&e))?),
            "seed" => opts.seed = Some(value.parse().map_err(|e| bad(&e))?),
            "noise_mode" => opts.noise_mode = Some(value.to_string()),
            "out" => opts.out = Some(PathBuf::from(value)),
            "workers" => opts.workers = Some(value.parse().map_err(|e| bad(&e))?),
            other => return Err(format!("config line {}: unknown key '{other}'", lineno + 1)),
        }
    }
    Ok(opts)
}

fn build_config(opts: &RunOpts) -> Result<(ExperimentConfig, Option<PathBuf>), String> {
    let merged = match &opts.config {
        Some(path) => opts.clone().or(read_config_file(path)?),
        None => opts.clone(),
    };
    let mut cfg = ExperimentConfig::default();
    if let Some(m) = &merged.mechanism {
        cfg.mechanism = m.parse().map_err(|e| format!("{e}"))?;
    }
    if let Some(a) = &merged.adversary {
        cfg.adversary = a.parse().map_err(|e| format!("{e}"))?;
    }
    if let Some(k) = merged.k {
        cfg.k = k;
    }
    if let Some(alpha) = merged.alpha {
        cfg.alpha = alpha;
    }
    if let Some(delta) = merged.delta {
        cfg.delta = delta;
    }
    if let Some(items) = merged.items {
        cfg.item_budget = items;
    }
    if let Some(trials) = merged.trials {
        cfg.trials = trials;
    }
    if let Some(seed) = merged.seed {
        cfg.master_seed = seed;
    }
    if let Some(mode) = &merged.noise_mode {
        cfg.noise = parse_noise_mode(mode).map_err(|e| format!("{e}"))?;
    }
    if let Some(workers) = merged.workers {
        cfg.workers = workers;
    }
    Ok((cfg, merged.out))
}

fn cmd_run(opts: &RunOpts) -> Result<ExitCode, String> {
    let (cfg, out) = build_config(opts)?;
    let out = out.unwrap_or_else(|| PathBuf::from("run.csv"));
    let report = run_trials(&cfg).map_err(|e| format!("{e}"))?;
    fs::write(&out, csv_string(&cfg, &report))
        .map_err(|e| format!("write {}: {e}", out.display()))?;
    let summary_path = out.with_extension("summary.json");
    fs::write(&summary_path, summary_json(&cfg, &report))
        .map_err(|e| format!("write {}: {e}", summary_path.display()))?;
    println!(
        "run: {} trials, failure_fraction {}, mean_words {:.1}, csv {}",
        report.aggregate.trials,
        report.aggregate.failure_fraction,
        report.aggregate.mean_total_words,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_audit(opts: &AuditOpts) -> Result<ExitCode, String> {
    let mut cfg = AuditConfig::default();
    if let Some(k) = opts.k {
        cfg.k = k;
    }
    // ceil(sqrt(k)) <= 4: beyond that the signature space outgrows any
    // feasible trial count and every event starves below min_count
    if cfg.k > 16 {
        return Err(format!("audit supports k <= 16, got {}", cfg.k));
    }
    if let Some(alpha) = opts.alpha {
        cfg.alpha = alpha;
    }
    if let Some(trials) = opts.trials {
        cfg.trials = trials;
    }
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = &opts.noise_mode {
        cfg.noise = parse_noise_mode(mode).map_err(|e| format!("{e}"))?;
    }
    if let Some(offset) = opts.offset_a {
        cfg.offset_a = offset;
    }
    if let Some(offset) = opts.offset_b {
        cfg.offset_b = offset;
    }
    if let Some(min_count) = opts.min_count {
        cfg.min_count = min_count;
    }
    if let Some(budget) = opts.budget {
        cfg.budget = budget;
    }
    let report = audit_partial_dp(&cfg).map_err(|e| format!("{e}"))?;
    let table = report.render_table();
    print!("{table}");
    if let Some(out) = &opts.out {
        fs::write(out, &table).map_err(|e| format!("write {}: {e}", out.display()))?;
    }
    Ok(ExitCode::from(match report.verdict {
        AuditVerdict::NoViolation => 0,
        AuditVerdict::Violation => 1,
        AuditVerdict::Inconclusive => 3,
    }))
}

fn cmd_sweep(opts: &SweepOpts) -> Result<ExitCode, String> {
    let (base, out) = build_config(&opts.base)?;
    let out = out.unwrap_or_else(|| PathBuf::from("sweep.csv"));
    let ks = if opts.k_list.is_empty() { vec![base.k] } else { opts.k_list.clone() };
    let alphas =
        if opts.alpha_list.is_empty() { vec![base.alpha] } else { opts.alpha_list.clone() };
    let mechanisms = if opts.mechanisms.is_empty() {
        vec![base.mechanism]
    } else {
        opts.mechanisms
            .iter()
            .map(|m| m.parse().map_err(|e| format!("{e}")))
            .collect::<Result<Vec<_>, _>>()?
    };
    let mut csv = String::from("k,alpha,mechanism,mean_total_words,failure_fraction\n");
    for mechanism in &mechanisms {
        for &k in &ks {
            for &alpha in &alphas {
                let cfg =
                    ExperimentConfig { mechanism: *mechanism, k, alpha, ..base.clone() };
                let report = run_trials(&cfg).map_err(|e| format!("{e}"))?;
                csv.push_str(&format!(
                    "{k},{alpha},{mechanism},{},{}\n",
                    report.aggregate.mean_total_words, report.aggregate.failure_fraction
                ));
            }
        }
    }
    fs::write(&out, &csv).map_err(|e| format!("write {}: {e}", out.display()))?;
    println!(
        "sweep: {} configurations, csv {}",
        mechanisms.len() * ks.len() * alphas.len(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(opts) => cmd_run(opts),
        Command::Audit(opts) => cmd_audit(opts),
        Command::Sweep(opts) => cmd_sweep(opts),
    };
    match result {
        Ok(code) => code,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
    }
}
