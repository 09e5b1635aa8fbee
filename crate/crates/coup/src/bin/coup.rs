//! Command-line front end: adaptive runs, the uniform baseline, top-K
//! re-evaluation, plot-ready report tables, verification suites, and
//! snapshot resume. Exit codes: 0 success, 2 config error, 3 backend
//! error, 4 verification failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use coup::config::{BackendSpec, RunConfig, RunMode};
use coup::optimizer::{CertPolicy, RankBy, RunState};
use coup::report::{
    cumulative_curve, curve_tsv, expected_curve_tsv, expected_tie_broken_curve, ranking_rows,
    ranking_tsv, tie_groups, tie_groups_tsv, whiskers, whiskers_tsv,
};
use coup::runner::{
    append_reeval_to_trace, load_snapshot, outcome_snapshot, reevaluate, run_uniform,
    save_snapshot, ReevalReport, Runner,
};
use coup::trace::read_header;
use coup::verify::{coverage_suite, g1_suite, g2_suite};
use coup::{Error, Result};

#[derive(Parser)]
#[command(name = "coup", version, about = "Confidence-bounded best-arm search")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Adaptive run: certify, expand, and batch until the budget is spent
    Run(RunCmd),
    /// Uniform-sampling baseline with the same budget and bookkeeping
    Uniform(UniformCmd),
    /// Top up the ranked arms with fresh draws and write reeval.json
    Reeval(ReevalCmd),
    /// Write ranking/curve/whisker tables from a re-evaluated run
    Report(ReportCmd),
    /// Run the seeded verification suites and report PASS/FAIL
    Verify(VerifyCmd),
    /// Continue an interrupted adaptive run from its snapshot
    Resume(ResumeCmd),
}

/// Config file plus scalar overrides mirroring its fields.
#[derive(Args)]
struct ConfigArgs {
    /// TOML config defining space, backend, utility, and policies
    #[arg(long)]
    config: Option<PathBuf>,
    /// Synthetic preset backend: needles, cert_tiered, two_cluster, dyval_shaped
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    budget_total: Option<u64>,
    #[arg(long)]
    batch_size: Option<u64>,
    #[arg(long)]
    initial_pool: Option<u64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    expansion_c: Option<f64>,
    #[arg(long)]
    rejection_cap: Option<u32>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    reevaluation_min_samples: Option<u64>,
    /// Feed the schedule simulation frozen lcbs instead of means
    #[arg(long)]
    pessimistic_schedule: bool,
    /// Turn off surrogate-model proposals
    #[arg(long)]
    no_surrogate: bool,
    /// Certification policy: none, fixed:TAU, or adaptive:TAU0
    #[arg(long)]
    cert: Option<String>,
    /// Repulsion strength; enables the penalty when positive
    #[arg(long)]
    repulsion_lambda: Option<f64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(name) = &self.preset {
            config.backend = BackendSpec::Preset { name: name.clone() };
        }
        if let Some(v) = self.seed {
            config.seed = v;
        }
        if let Some(v) = self.budget_total {
            config.budget_total = v;
        }
        if let Some(v) = self.batch_size {
            config.batch_size = v;
        }
        if let Some(v) = self.initial_pool {
            config.initial_pool = v;
        }
        if let Some(v) = self.delta {
            config.delta = v;
        }
        if let Some(v) = self.expansion_c {
            config.expansion_c = v;
        }
        if let Some(v) = self.rejection_cap {
            config.rejection_cap = v;
        }
        if let Some(v) = self.parallelism {
            config.parallelism = v;
        }
        if let Some(v) = self.reevaluation_min_samples {
            config.reevaluation_min_samples = v;
        }
        if self.pessimistic_schedule {
            config.pessimistic_schedule = true;
        }
        if self.no_surrogate {
            config.surrogate.enabled = false;
        }
        if let Some(spec) = &self.cert {
            config.cert = parse_cert(spec)?;
        }
        if let Some(lambda) = self.repulsion_lambda {
            config.repulsion.enabled = lambda > 0.0;
            config.repulsion.lambda = lambda;
        }
        apply_env(&mut config)?;
        Ok(config)
    }
}

fn parse_cert(spec: &str) -> Result<CertPolicy> {
    if spec == "none" {
        return Ok(CertPolicy::None);
    }
    let parse_tau = |rest: &str| {
        rest.parse::<f64>()
            .map_err(|_| Error::Config(format!("bad certification threshold {rest:?}")))
    };
    if let Some(rest) = spec.strip_prefix("fixed:") {
        return Ok(CertPolicy::Fixed {
            tau: parse_tau(rest)?,
        });
    }
    if let Some(rest) = spec.strip_prefix("adaptive:") {
        return Ok(CertPolicy::Adaptive {
            tau0: parse_tau(rest)?,
        });
    }
    Err(Error::Config(format!(
        "certification policy {spec:?} is not none, fixed:TAU, or adaptive:TAU0"
    )))
}

fn apply_env(config: &mut RunConfig) -> Result<()> {
    let cmd = std::env::var("COUP_ORACLE_CMD").ok();
    let width = std::env::var("COUP_PARALLELISM").ok();
    config.apply_env_overrides(cmd.as_deref(), width.as_deref())
}

#[derive(Args)]
struct RunCmd {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output directory for trace.jsonl and snapshot.json
    #[arg(long)]
    out: PathBuf,
    /// Stop after this many batches and snapshot (resume later)
    #[arg(long)]
    max_batches: Option<u64>,
}

#[derive(Args)]
struct UniformCmd {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output directory for trace.jsonl and snapshot.json
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReevalCmd {
    /// Directory holding trace.jsonl and snapshot.json
    #[arg(long)]
    out: PathBuf,
    /// How many ranked arms to re-evaluate
    #[arg(long, default_value_t = 100)]
    top_k: usize,
    /// Override the config's re-evaluation sample floor
    #[arg(long)]
    min_samples: Option<u64>,
    #[arg(long)]
    parallelism: Option<usize>,
}

#[derive(Args)]
struct ReportCmd {
    /// Directory holding snapshot.json and reeval.json
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyCmd {
    #[arg(long, value_enum, default_value_t = Suite::All)]
    suite: Suite,
    /// Override each suite's default seed count
    #[arg(long)]
    seeds: Option<u64>,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Suite {
    All,
    Coverage,
    G1,
    G2,
}

#[derive(Args)]
struct ResumeCmd {
    /// Directory holding trace.jsonl and snapshot.json
    #[arg(long)]
    out: PathBuf,
    /// Config file; defaults to the one stored in the trace header
    #[arg(long)]
    config: Option<PathBuf>,
    /// Stop again after this many further batches
    #[arg(long)]
    max_batches: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::InvalidSpace(_)
        | Error::Expr(_)
        | Error::Snapshot(_)
        | Error::Json(_) => 2,
        Error::Backend(_) | Error::Io(_) => 3,
        Error::Verification(_) => 4,
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Run(a) => cmd_run(a),
        Cmd::Uniform(a) => cmd_uniform(a),
        Cmd::Reeval(a) => cmd_reeval(a),
        Cmd::Report(a) => cmd_report(a),
        Cmd::Verify(a) => cmd_verify(a),
        Cmd::Resume(a) => cmd_resume(a),
    }
}

fn print_summary(kind: &str, state: &RunState, batches: u64) {
    let incumbent = state
        .incumbent
        .map(|i| {
            format!(
                "{} (lcb {:.4})",
                state.arms[i].id, state.arms[i].bounds.lcb
            )
        })
        .unwrap_or_else(|| "none".into());
    println!(
        "{kind}: {}/{} draws in {batches} batches, pool {}, certified {}, incumbent {incumbent}",
        state.budget_used,
        state.budget_total,
        state.pool_size(),
        state.certified.len(),
    );
}

fn drive(runner: &mut Runner, max_batches: Option<u64>) -> Result<u64> {
    let mut batches = 0;
    while max_batches.is_none_or(|k| batches < k) {
        if !runner.step_batch()? {
            break;
        }
        batches += 1;
    }
    Ok(batches)
}

fn cmd_run(a: RunCmd) -> Result<()> {
    let config = a.cfg.load()?;
    let env = config.resolve()?;
    fs::create_dir_all(&a.out)?;
    let trace_path = a.out.join("trace.jsonl");
    let mut runner = Runner::new(&config, &env.space, &env.oracle, Some(&trace_path))?;
    let batches = drive(&mut runner, a.max_batches)?;
    let snap = runner.snapshot()?;
    save_snapshot(&a.out.join("snapshot.json"), &snap)?;
    print_summary("run", &runner.state, batches);
    Ok(())
}

fn cmd_uniform(a: UniformCmd) -> Result<()> {
    let config = a.cfg.load()?;
    let env = config.resolve()?;
    fs::create_dir_all(&a.out)?;
    let trace_path = a.out.join("trace.jsonl");
    let out = run_uniform(&config, &env.space, &env.oracle, Some(&trace_path))?;
    let snap = outcome_snapshot(&out, &config, RunMode::Uniform);
    save_snapshot(&a.out.join("snapshot.json"), &snap)?;
    print_summary("uniform", &out.state, 0);
    Ok(())
}

fn cmd_resume(a: ResumeCmd) -> Result<()> {
    let trace_path = a.out.join("trace.jsonl");
    let snap_path = a.out.join("snapshot.json");
    let mut config = match &a.config {
        Some(path) => RunConfig::load(path)?,
        None => read_header(&trace_path)?.config,
    };
    apply_env(&mut config)?;
    let env = config.resolve()?;
    let mut runner = Runner::resume(&config, &env.space, &env.oracle, &snap_path, &trace_path)?;
    let batches = drive(&mut runner, a.max_batches)?;
    let snap = runner.snapshot()?;
    save_snapshot(&snap_path, &snap)?;
    print_summary("resume", &runner.state, batches);
    Ok(())
}

fn cmd_reeval(a: ReevalCmd) -> Result<()> {
    let trace_path = a.out.join("trace.jsonl");
    let header = read_header(&trace_path)?;
    let mut config = header.config;
    apply_env(&mut config)?;
    if let Some(width) = a.parallelism {
        config.parallelism = width;
    }
    let snap = load_snapshot(&a.out.join("snapshot.json"))?;
    if snap.config_digest != header.config_digest {
        return Err(Error::Snapshot(
            "snapshot belongs to a different trace".into(),
        ));
    }
    let env = config.resolve()?;
    let mut state = snap.state.clone();
    state.rebuild_index();
    let rank_by = match snap.mode {
        RunMode::Coup => RankBy::Lcb,
        RunMode::Uniform => RankBy::Mean,
    };
    let min_samples = a.min_samples.unwrap_or(config.reevaluation_min_samples);
    let report = reevaluate(
        &state,
        rank_by,
        a.top_k,
        min_samples,
        &env.oracle,
        &config.utility,
        config.parallelism,
    )?;
    fs::write(
        a.out.join("reeval.json"),
        serde_json::to_string_pretty(&report).map_err(Error::from)?,
    )?;
    append_reeval_to_trace(&trace_path, &snap, &report)?;
    let fresh: u64 = report.entries.iter().map(|e| e.fresh_m).sum();
    println!(
        "reeval: {} arms topped up with {fresh} fresh draws (floor {min_samples})",
        report.entries.len(),
    );
    Ok(())
}

fn write_table(dir: &Path, name: &str, text: String, written: &mut Vec<String>) -> Result<()> {
    fs::write(dir.join(name), text)?;
    written.push(name.to_string());
    Ok(())
}

fn cmd_report(a: ReportCmd) -> Result<()> {
    let snap = load_snapshot(&a.out.join("snapshot.json"))?;
    let text = fs::read_to_string(a.out.join("reeval.json"))?;
    let report: ReevalReport = serde_json::from_str(&text).map_err(Error::from)?;
    let mut written = Vec::new();
    write_table(
        &a.out,
        "ranking.tsv",
        ranking_tsv(&ranking_rows(&report)),
        &mut written,
    )?;
    write_table(
        &a.out,
        "curve.tsv",
        curve_tsv(&cumulative_curve(&report)),
        &mut written,
    )?;
    write_table(
        &a.out,
        "whiskers.tsv",
        whiskers_tsv(&whiskers(&report)),
        &mut written,
    )?;
    if snap.mode == RunMode::Uniform {
        write_table(
            &a.out,
            "expected_curve.tsv",
            expected_curve_tsv(&expected_tie_broken_curve(&report)),
            &mut written,
        )?;
        write_table(
            &a.out,
            "tie_groups.tsv",
            tie_groups_tsv(&tie_groups(&report)),
            &mut written,
        )?;
    }
    println!("report: wrote {}", written.join(", "));
    Ok(())
}

fn cmd_verify(a: VerifyCmd) -> Result<()> {
    let delta = 0.01;
    let mut failures = Vec::new();
    let mut record = |name: &str, pass: bool, detail: String| {
        println!("{name}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
        if !pass {
            failures.push(name.to_string());
        }
    };
    if matches!(a.suite, Suite::All | Suite::Coverage) {
        let r = coverage_suite(a.seeds.unwrap_or(10_000))?;
        record(
            "coverage",
            r.passes(delta),
            format!(
                "{}/{} runs left the interval, fraction {:.5} vs delta {delta}",
                r.violation_runs, r.runs, r.violation_fraction
            ),
        );
    }
    if matches!(a.suite, Suite::All | Suite::G1) {
        let r = g1_suite(a.seeds.unwrap_or(1_000))?;
        record(
            "g1",
            r.passes(delta),
            format!(
                "{}/{} seeds violated, {} lcb-valid",
                r.violation_seeds, r.seeds, r.lcb_valid_seeds
            ),
        );
    }
    if matches!(a.suite, Suite::All | Suite::G2) {
        let r = g2_suite(a.seeds.unwrap_or(500))?;
        record(
            "g2",
            r.passes(delta),
            format!(
                "containment {:.4}, {} strict cases, {} allocation violations",
                r.containment_fraction, r.strict_seeds, r.allocation_violations
            ),
        );
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::Verification(format!(
            "suite failures: {}",
            failures.join(", ")
        )))
    }
}
