//! The `mirt` command-line tool.
//!
//! Exit codes: 0 success, 1 check failure, 2 invalid input, 3 numerical divergence.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::curriculum::{select, CompetenceSource, CurriculumConfig};
use crate::error::MirtError;
use crate::gradcheck::{self, GradcheckConfig};
use crate::io::{self, IoError, PosteriorFile, SelectionStats, SimFile};
use crate::sim::run_loop;
use crate::vi::{fit, FitConfig, PriorSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "mirt", version, about = "Multi-dimensional IRT fitting and competence-aware curricula")]
pub struct Cli {
    /// Seed for every random stream the command uses.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output path (defaults depend on the command).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Suppress summaries on standard output.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CompetenceArg {
    Latest,
    PosteriorMean,
}

impl From<CompetenceArg> for CompetenceSource {
    fn from(a: CompetenceArg) -> Self {
        match a {
            CompetenceArg::Latest => CompetenceSource::LatestSnapshot,
            CompetenceArg::PosteriorMean => CompetenceSource::PosteriorMeanLatest,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the variational posterior to a response file.
    Fit {
        responses: PathBuf,
        bank: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        learning_rate: f64,
        #[arg(long, default_value_t = 1000)]
        max_iters: usize,
        #[arg(long, default_value_t = 4)]
        mc_samples: usize,
        #[arg(long, default_value_t = 1.0)]
        prior_stddev: f64,
        /// Posterior file whose factors initialize the fit.
        #[arg(long)]
        warm_start: Option<PathBuf>,
    },
    /// Select the questions whose log-probability lies in [lb, ub].
    Select {
        bank: PathBuf,
        posterior: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        lb: f64,
        #[arg(long, allow_negative_numbers = true)]
        ub: f64,
        /// Epoch 0 returns the seeding set instead of a score-based selection.
        #[arg(long, default_value_t = 1)]
        epoch: usize,
        #[arg(long, default_value_t = 5000)]
        seed_count: usize,
        #[arg(long, default_value_t = 2)]
        seed_max_concepts: u32,
        #[arg(long, value_enum, default_value_t = CompetenceArg::Latest)]
        competence: CompetenceArg,
    },
    /// Run the closed training loop with a simulated learner.
    Simulate {
        /// Simulation config; the built-in defaults apply when omitted.
        config: Option<PathBuf>,
    },
    /// Compare analytic gradients with finite differences on random instances.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Relative tolerance for the likelihood gradient.
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        /// Relative tolerance for the fixed-noise ELBO gradient.
        #[arg(long, default_value_t = 1e-4)]
        elbo_tol: f64,
    },
}

struct Failure {
    code: i32,
    message: String,
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        Failure {
            code: EXIT_INVALID,
            message: e.to_string(),
        }
    }
}

impl From<MirtError> for Failure {
    fn from(e: MirtError) -> Self {
        let code = match e {
            MirtError::NonFiniteObjective { .. } => EXIT_DIVERGED,
            _ => EXIT_INVALID,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_INVALID,
        message: message.into(),
    }
}

struct Output {
    quiet: bool,
}

impl Output {
    fn line(&self, s: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", s.as_ref());
        }
    }
}

/// Parses `args` (including the program name) and runs the command, returning the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn out_or(cli_out: &Option<PathBuf>, default: &str) -> PathBuf {
    cli_out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn execute(cli: Cli) -> Result<i32, Failure> {
    let out = Output { quiet: cli.quiet };
    match cli.command {
        Command::Fit {
            ref responses,
            ref bank,
            learning_rate,
            max_iters,
            mc_samples,
            prior_stddev,
            ref warm_start,
        } => {
            let seed = cli.seed.unwrap_or(0);
            let config = FitConfig {
                learning_rate,
                max_iters,
                mc_samples,
                seed,
                ..FitConfig::default()
            };
            config.validate()?;
            let prior = PriorSpec::centered(prior_stddev)?;
            let path = out_or(&cli.out, "posterior.json");
            cmd_fit(responses, bank, &config, &prior, warm_start.as_deref(), &path, &out)
        }
        Command::Select {
            ref bank,
            ref posterior,
            lb,
            ub,
            epoch,
            seed_count,
            seed_max_concepts,
            competence,
        } => {
            let config = CurriculumConfig {
                lb_log: lb,
                ub_log: ub,
                seed_max_concepts,
                seed_count,
                competence_source: competence.into(),
            };
            config.validate()?;
            let path = out_or(&cli.out, "selected.txt");
            cmd_select(bank, posterior, &config, epoch, cli.seed.unwrap_or(0), &path, &out)
        }
        Command::Simulate { ref config } => {
            let mut file = match config {
                Some(p) => io::load_sim_file(p)?,
                None => SimFile::default(),
            };
            if let Some(s) = cli.seed {
                file.sim.seed = s;
                file.fit.seed = s;
            }
            let path = out_or(&cli.out, "trace.jsonl");
            cmd_simulate(&file, &path, &out)
        }
        Command::Gradcheck {
            trials,
            tol,
            elbo_tol,
        } => {
            if !(tol >= 0.0) || !(elbo_tol >= 0.0) {
                return Err(invalid("tolerances must be non-negative"));
            }
            let config = GradcheckConfig {
                trials,
                likelihood_tol: tol,
                elbo_tol,
                seed: cli.seed.unwrap_or(0),
            };
            cmd_gradcheck(&config, cli.out.as_deref(), &out)
        }
    }
}

fn cmd_fit(
    responses_path: &Path,
    bank_path: &Path,
    config: &FitConfig,
    prior: &PriorSpec,
    warm_start: Option<&Path>,
    out_path: &Path,
    out: &Output,
) -> Result<i32, Failure> {
    let bank = io::load_bank(bank_path)?;
    let responses = io::load_responses(responses_path, &bank)?;
    if responses.matrix.is_empty() {
        return Err(invalid(format!("{}: no responses", responses_path.display())));
    }
    let warm = match warm_start {
        Some(p) => {
            let file = io::load_posterior(p)?;
            let params = file
                .to_params_for(bank.concept_names(), &responses.snapshot_ids, prior)
                .map_err(|m| invalid(format!("{}: {m}", p.display())))?;
            Some(params)
        }
        None => None,
    };
    let (post, report) = fit(&responses.matrix, &bank, prior, config, warm.as_ref())?;
    let file = PosteriorFile::from_fit(bank.concept_names(), &responses.snapshot_ids, &post, &report);
    io::save_posterior(out_path, &file)?;
    out.line(format!(
        "fit: iterations={} elbo_final={} converged={} snapshots={} concepts={} seed={} out={}",
        report.iterations_run,
        file.fit.elbo_final,
        report.converged,
        responses.snapshot_ids.len(),
        bank.num_concepts(),
        config.seed,
        out_path.display()
    ));
    Ok(EXIT_OK)
}

fn cmd_select(
    bank_path: &Path,
    posterior_path: &Path,
    config: &CurriculumConfig,
    epoch: usize,
    seed: u64,
    out_path: &Path,
    out: &Output,
) -> Result<i32, Failure> {
    let bank = io::load_bank(bank_path)?;
    let file = io::load_posterior(posterior_path)?;
    let post = io::posterior_params(posterior_path, &file, bank.concept_names())?;
    let result = select(&bank, &post, config, epoch);
    let stats = SelectionStats::new(&result, &bank, config, epoch, seed);
    io::save_selection(out_path, &result, &stats)?;
    if result.is_early_stop() {
        out.line(format!(
            "EARLY-STOP: no question scores inside [{}, {}]; stage={} below_lb={} above_ub={} seed={seed} out={}",
            config.lb_log,
            config.ub_log,
            stats.stage,
            stats.below_lb,
            stats.above_ub,
            out_path.display()
        ));
    } else {
        out.line(format!(
            "select: count={} mean_concepts={:.4} stage={} below_lb={} above_ub={} seed={seed} out={}",
            stats.count,
            stats.mean_concepts,
            stats.stage,
            stats.below_lb,
            stats.above_ub,
            out_path.display()
        ));
    }
    Ok(EXIT_OK)
}

fn cmd_simulate(file: &SimFile, out_path: &Path, out: &Output) -> Result<i32, Failure> {
    let prior = file.prior()?;
    match run_loop(&file.sim, &file.curriculum, &file.fit, &prior) {
        Ok(trace) => {
            io::save_trace(out_path, &trace)?;
            let last = trace.records.last();
            out.line(format!(
                "simulate: epochs={} final_stage={} early_stop={} seed={} out={}",
                trace.records.len(),
                last.map_or("none", |r| r.stage.as_str()),
                trace.early_stopped(),
                file.sim.seed,
                out_path.display()
            ));
            Ok(EXIT_OK)
        }
        Err(failure) => {
            io::save_trace(out_path, &failure.trace)?;
            let code = Failure::from(failure.source.clone()).code;
            eprintln!(
                "error: {failure}; partial trace of {} epochs written to {} (seed={})",
                failure.trace.records.len(),
                out_path.display(),
                file.sim.seed
            );
            Ok(code)
        }
    }
}

fn cmd_gradcheck(config: &GradcheckConfig, out_path: Option<&Path>, out: &Output) -> Result<i32, Failure> {
    let report = gradcheck::run(config)?;
    let failures: Vec<_> = report.failures().collect();
    for f in &failures {
        eprintln!(
            "FAIL trial={} instance_seed={} likelihood_err={:.3e} elbo_err={:.3e}",
            f.trial, f.instance_seed, f.likelihood_error, f.elbo_error
        );
    }
    let summary = format!(
        "gradcheck: trials={} failures={} worst_likelihood_err={:.3e} (tol {:e}) worst_elbo_err={:.3e} (tol {:e}) seed={}",
        report.outcomes.len(),
        failures.len(),
        report.worst_likelihood_error(),
        config.likelihood_tol,
        report.worst_elbo_error(),
        config.elbo_tol,
        config.seed
    );
    if let Some(p) = out_path {
        let mut body = String::from("trial,instance_seed,likelihood_err,elbo_err\n");
        for o in &report.outcomes {
            body.push_str(&format!(
                "{},{},{:e},{:e}\n",
                o.trial, o.instance_seed, o.likelihood_error, o.elbo_error
            ));
        }
        io::write_atomic(p, body.as_bytes())?;
    }
    out.line(summary);
    Ok(if failures.is_empty() { EXIT_OK } else { EXIT_CHECK_FAILED })
}
