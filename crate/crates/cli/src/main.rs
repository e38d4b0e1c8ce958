use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use betel_core::compare::ModelRanking;
use betel_core::dgp::generate;
use betel_core::experiment::{compare_on, run_replication, ExperimentConfig};
use betel_core::misspec::{estimate_pseudo_true, Population};
use betel_core::posterior::{sample_posterior, summarize, BetelPosterior};
use betel_core::{BetelError, Dataset};
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "betel", version, about = "Bayesian ETEL inference and model comparison for moment condition models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample the posterior of every configured model and write summaries and chains.
    Fit(CommonArgs),
    /// Estimate marginal likelihoods of the configured models and rank them.
    Compare(CommonArgs),
    /// Run seeded replication trials and tabulate selection frequencies.
    Replicate(CommonArgs),
    /// Compute pseudo-true values and KL divergences on a simulated population.
    PseudoTrue(CommonArgs),
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Observations (CSV with header); simulated from [dgp] when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Master seed; overrides `master_seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Trial count; overrides `trials` in the config.
    #[arg(long)]
    trials: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, env = "BETEL_THREADS")]
    threads: Option<usize>,
}

/// Failure classes mapped to exit codes 1 and 2.
enum Failure {
    Config(String),
    Numerical(String),
}

impl From<BetelError> for Failure {
    fn from(e: BetelError) -> Self {
        if e.is_config_error() { Failure::Config(e.to_string()) } else { Failure::Numerical(e.to_string()) }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Config(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

struct Context {
    config: ExperimentConfig,
    data_path: Option<PathBuf>,
    out: PathBuf,
}

impl Context {
    fn load(args: &CommonArgs) -> CliResult<Self> {
        let text = fs::read_to_string(&args.config)
            .map_err(|e| Failure::Config(format!("cannot read {}: {e}", args.config.display())))?;
        let mut config = ExperimentConfig::from_toml(&text)?;
        if let Some(s) = args.seed {
            config.master_seed = s;
        }
        if let Some(t) = args.trials {
            config.trials = t;
            config.full_scale = false;
        }
        config.validate()?;
        let out = args
            .out
            .clone()
            .or_else(|| config.output.clone())
            .unwrap_or_else(|| PathBuf::from("betel-out"));
        fs::create_dir_all(&out)?;
        Ok(Self { config, data_path: args.data.clone(), out })
    }

    fn data(&self) -> CliResult<Dataset> {
        match (&self.data_path, &self.config.dgp) {
            (Some(p), _) => Ok(Dataset::read_csv_path(p)?),
            (None, Some(_)) => {
                let dgp = self.config.dgp.as_ref().expect("matched");
                Ok(generate(&dgp.with(self.config.rows_per_trial()?, self.config.master_seed))?)
            }
            (None, None) => Err(Failure::Config("pass --data or add a [dgp] section".into())),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn write_with<F>(path: &Path, f: F) -> CliResult<()>
where
    F: FnOnce(&mut Vec<u8>) -> betel_core::Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

fn file_stem(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn fit(ctx: &Context) -> CliResult<()> {
    let data = ctx.data()?;
    let (training, analysis) = ctx.config.split_training(&data)?;
    let models = ctx.config.models()?;
    let priors = ctx.config.priors(&models, training.as_ref())?;
    let hash = ctx.config.hash();
    for (k, (model, prior)) in models.iter().zip(&priors).enumerate() {
        let post = BetelPosterior::new(model, prior, &analysis)?;
        let seed = betel_core::seed::derive_seed(ctx.config.master_seed, k as u64);
        let (chain, _) = sample_posterior(&post, &ctx.config.mcmc, seed)?;
        let stem = file_stem(model.name());
        let summary = summarize(&chain);
        write_with(&ctx.path(&format!("summary_{stem}.csv")), |w| summary.write_csv(w))?;
        write_with(&ctx.path(&format!("chain_{stem}.csv")), |w| chain.write_csv(w))?;
        let meta = serde_json::to_string_pretty(&chain.metadata(&hash)).expect("metadata serializes");
        fs::write(ctx.path(&format!("chain_{stem}.json")), meta + "\n")?;
        println!("{}: acceptance rate {:.3}", model.name(), summary.acceptance_rate);
        for r in &summary.rows {
            println!(
                "  {:<16} mean {:>10.4} sd {:>9.4} [{:.4}, {:.4}] ineff {:.2}",
                r.parameter, r.mean, r.sd, r.lower, r.upper, r.ineff
            );
        }
    }
    Ok(())
}

fn report_ranking(ranking: &ModelRanking) {
    for id in &ranking.order {
        let m = &ranking.models[*id];
        let e = m.estimate.as_ref().expect("ranked models have estimates");
        println!("{:<12} log m(x) = {:.3} (se {:.3})", m.name, e.log_ml, e.mc_error);
    }
    for m in ranking.models.iter().filter(|m| m.error.is_some()) {
        eprintln!("{}: failed: {}", m.name, m.error.as_deref().unwrap_or(""));
    }
}

fn compare(ctx: &Context) -> CliResult<()> {
    let data = ctx.data()?;
    let bundle = ctx.config.bundle()?;
    for note in &bundle.notes {
        eprintln!("note: {note}");
    }
    let ranking = compare_on(&ctx.config, &bundle, &data, ctx.config.master_seed)?;
    fs::write(ctx.path("ranking.json"), ranking.to_json()? + "\n")?;
    write_with(&ctx.path("ranking.csv"), |w| ranking.write_csv(w))?;
    report_ranking(&ranking);
    if ranking.order.is_empty() {
        return Err(Failure::Numerical("every model failed".into()));
    }
    Ok(())
}

fn replicate(ctx: &Context) -> CliResult<()> {
    let outcome = run_replication(&ctx.config)?;
    write_with(&ctx.path("selection.csv"), |w| outcome.table.write_csv(w))?;
    write_with(&ctx.path("trials.csv"), |w| outcome.write_trials_csv(w))?;
    let t = &outcome.table;
    println!("n = {}, trials = {}, failed = {}", t.n, t.trials, t.failed_trials);
    for (m, p) in t.models.iter().zip(&t.percent) {
        println!("{m:<12} {p:6.1}%");
    }
    if t.failed_trials == t.trials {
        return Err(Failure::Numerical("every trial failed".into()));
    }
    Ok(())
}

fn pseudo_true(ctx: &Context) -> CliResult<()> {
    let pt = ctx
        .config
        .pseudo_true
        .as_ref()
        .ok_or_else(|| Failure::Config("pseudo-true needs a [pseudo_true] section".into()))?;
    let dgp = ctx.config.dgp.clone().ok_or_else(|| Failure::Config("pseudo-true needs a [dgp] section".into()))?;
    let pop = Population::new(dgp, pt.population, ctx.config.master_seed)?;
    let mut results = Vec::new();
    for model in ctx.config.models()? {
        let est = estimate_pseudo_true(&model, &pop, &pt.search)?;
        if !est.curve.is_empty() {
            write_with(&ctx.path(&format!("curve_{}.csv", file_stem(model.name()))), |w| est.write_curve_csv(w))?;
        }
        println!(
            "{:<12} psi = {:?}  KL = {:.6} (se {:.6})",
            est.model, est.psi_circ, est.kl_divergence, est.mc_se
        );
        results.push(est);
    }
    let json = serde_json::to_string_pretty(&results).expect("estimates serialize");
    fs::write(ctx.path("pseudo_true.json"), json + "\n")?;
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let args = match &cli.command {
        Command::Fit(a) | Command::Compare(a) | Command::Replicate(a) | Command::PseudoTrue(a) => a,
    };
    if let Some(n) = args.threads {
        if n == 0 {
            return Err(Failure::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Config(e.to_string()))?;
    }
    let ctx = Context::load(args)?;
    match cli.command {
        Command::Fit(_) => fit(&ctx),
        Command::Compare(_) => compare(&ctx),
        Command::Replicate(_) => replicate(&ctx),
        Command::PseudoTrue(_) => pseudo_true(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(2)
        }
    }
}
