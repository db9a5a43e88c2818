//! `lodadac` command-line driver.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 run or check failure,
//! 3 theory-mode violation.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use lodadac::compression::{certify_contraction, CompressorSpec};
use lodadac::engine::{default_gamma, pre_run_checks};
use lodadac::experiment::{parse_config, report, run_experiments, write_series, Summary};
use lodadac::problems::make_problem;
use lodadac::rng::{stream, Purpose};
use lodadac::topology::{build_topology, validate_mixing, Graph, MixingMatrix};
use lodadac::Error;

#[derive(Parser)]
#[command(name = "lodadac", version, about = "Decentralized adaptive optimization with compressed gossip")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a config, expand its grid and print the pre-run checks.
    Validate { config: PathBuf },
    /// Execute every run of a config and write CSVs plus summary.json.
    Run {
        config: PathBuf,
        /// Output directory (overrides `output.dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Comparison table across one or more summary.json files.
    Report {
        #[arg(required = true)]
        summaries: Vec<PathBuf>,
        /// Also write a downsampled long-format series CSV.
        #[arg(long)]
        series: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        points: usize,
    },
    /// Monte-Carlo check of every compressor's contraction constant.
    CertifyCompressors {
        #[arg(long, default_value_t = 10)]
        d: usize,
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sparsifier size (default: round(0.3 d), at least 1).
        #[arg(long)]
        k: Option<usize>,
    },
    /// Build Metropolis weights for an edge-list file and validate them.
    CheckTopology { edgelist: PathBuf },
}

/// Errors carrying their own exit code.
struct Exit(u8, anyhow::Error);

fn classify(e: anyhow::Error) -> Exit {
    let code = match e.downcast_ref::<Error>() {
        Some(Error::Config { .. }) | Some(Error::Io(_)) | Some(Error::Json(_)) => 1,
        Some(Error::Theory(_)) => 3,
        _ => 2,
    };
    Exit(code, e)
}

fn validate(path: PathBuf) -> Result<u8> {
    let config = parse_config(&path)?;
    let runs = config.expand()?;
    println!("{}: {} run(s)", path.display(), runs.len());
    for spec in &runs {
        let c = &spec.config;
        let rc = c.run_config()?;
        let problem = make_problem(&c.problem.params(), &c.problem.partition.plan())?;
        let mixing = build_topology(&rc.topology, rc.n)?;
        let eta = lodadac::compression::eta_of(&rc.compressor, problem.dim())?;
        let gamma = rc.gamma.unwrap_or_else(|| default_gamma(rc.theory_mode, mixing.rho(), eta));
        let checks = pre_run_checks(&rc, &problem, mixing.rho(), eta, gamma);
        println!(
            "  {}: rounds={} rho={:.6} eta={:.6} gamma={:.6} ({} ceiling {:.3e}) L={:.4}{}",
            spec.name,
            rc.rounds,
            mixing.rho(),
            eta,
            gamma,
            if checks.gamma_ok { "within" } else { "above" },
            checks.gamma_ceiling,
            problem.smoothness(),
            match (checks.alpha_ceiling, checks.alpha_ok) {
                (Some(a), Some(ok)) => format!(" alpha {} ceiling {a:.3e}", if ok { "within" } else { "above" }),
                _ => String::new(),
            }
        );
        if let Some(w) = checks.beta2_warning {
            println!("    warning: {w}");
        }
    }
    Ok(0)
}

fn run(path: PathBuf, out: Option<PathBuf>) -> Result<u8> {
    let config = parse_config(&path)?;
    let outcome = run_experiments(&config, out.as_deref())?;
    for r in &outcome.summary.runs {
        match &r.error {
            None => log::info!("{}: final loss {:?}", r.name, r.final_loss),
            Some(e) => eprintln!("{}: {e}", r.name),
        }
        for w in &r.warnings {
            eprintln!("{}: warning: {w}", r.name);
        }
    }
    if let Some(p) = &outcome.summary_path {
        println!("{}", p.display());
    }
    Ok(outcome.exit_code() as u8)
}

fn report_cmd(paths: Vec<PathBuf>, series: Option<PathBuf>, points: usize) -> Result<u8> {
    let summaries = paths
        .iter()
        .map(|p| Summary::load(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    print!("{}", report(&summaries)?);
    if let Some(out) = series {
        let file = std::fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?;
        write_series(&paths, file, points)?;
    }
    Ok(0)
}

fn certify(d: usize, trials: usize, seed: u64, k: Option<usize>) -> Result<u8> {
    if d == 0 {
        return Err(Error::config("d", "must be at least 1").into());
    }
    let k = k.unwrap_or_else(|| lodadac::experiment::k_from_fraction(0.3, d));
    let roster = [
        CompressorSpec::Identity,
        CompressorSpec::TopK { k },
        CompressorSpec::RandomK { k },
        CompressorSpec::QsgdRescaled { s: 1 },
        CompressorSpec::QsgdRescaled { s: 4 },
        CompressorSpec::GossipDrop { p: 0.5 },
    ];
    let mut all = true;
    for (i, spec) in roster.iter().enumerate() {
        let mut rng = stream(seed, Purpose::Certify, i as u64);
        let rep = certify_contraction(spec, d, trials, &mut rng)?;
        println!(
            "{} {spec} d={d} eta={:.6} nominal={:.6}",
            if rep.passed() { "PASS" } else { "FAIL" },
            rep.eta,
            rep.nominal_eta
        );
        for p in &rep.probes {
            println!(
                "    {:<12} mean={:.6} se={:.2e} bound={:.6} margin={:+.3e}",
                p.probe,
                p.mean_ratio,
                p.std_error,
                rep.eta * rep.eta,
                p.margin
            );
        }
        all &= rep.passed();
    }
    Ok(if all { 0 } else { 2 })
}

fn check_topology(path: PathBuf) -> Result<u8> {
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let graph = Graph::from_edge_list(&text).map_err(|e| Error::config("edgelist", e.to_string()))?;
    let n = graph.n();
    let mixing = MixingMatrix::from_weights(lodadac::topology::metropolis_weights(&graph), Some(graph))?;
    let rep = validate_mixing(&mixing);
    println!("n = {n}");
    println!("{rep}");
    Ok(if rep.all_passed() { 0 } else { 2 })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Validate { config } => validate(config),
        Command::Run { config, out } => run(config, out),
        Command::Report {
            summaries,
            series,
            points,
        } => report_cmd(summaries, series, points),
        Command::CertifyCompressors { d, trials, seed, k } => certify(d, trials, seed, k),
        Command::CheckTopology { edgelist } => check_topology(edgelist),
    };
    match result.map_err(classify) {
        Ok(code) => ExitCode::from(code),
        Err(Exit(code, e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
