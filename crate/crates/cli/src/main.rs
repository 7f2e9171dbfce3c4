//! `mixmed`: mediation analysis for correlated exposure mixtures.

mod artifact;
mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{DataSection, FileConfig, DEFAULT_SEED};
use error::{CliError, CliResult};

#[derive(Parser, Debug)]
#[command(name = "mixmed", version, about = "Mediation analysis for correlated exposure mixtures")]
struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory for artifacts.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,

    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct DataArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    exposures: Option<Vec<String>>,
    #[arg(long)]
    mediator: Option<String>,
    #[arg(long)]
    outcome: Option<String>,
    #[arg(long, value_delimiter = ',')]
    confounders: Option<Vec<String>>,
    /// Confounders to expand into indicator columns.
    #[arg(long, value_delimiter = ',')]
    categorical: Option<Vec<String>>,
}

impl DataArgs {
    fn apply(self, d: &mut DataSection) {
        if let Some(v) = self.data {
            d.path = Some(v);
        }
        if let Some(v) = self.exposures {
            d.exposures = v;
        }
        if let Some(v) = self.mediator {
            d.mediator = v;
        }
        if let Some(v) = self.outcome {
            d.outcome = v;
        }
        if let Some(v) = self.confounders {
            d.confounders = v;
        }
        if let Some(v) = self.categorical {
            d.categorical = v;
        }
    }
}

#[derive(Args, Debug)]
struct KernelArgs {
    #[arg(long)]
    iterations: Option<usize>,
    /// Turn off variable selection.
    #[arg(long)]
    no_varsel: bool,
    /// Hierarchical selection with groups from clustering exposure correlations.
    #[arg(long)]
    clusters: Option<usize>,
    /// Store posterior draws of h.
    #[arg(long)]
    est_h: bool,
}

impl KernelArgs {
    fn apply(self, b: &mut config::BkmrSection) {
        if let Some(v) = self.iterations {
            b.kernel.iterations = v;
        }
        if self.no_varsel {
            b.kernel.varsel = false;
        }
        if let Some(v) = self.clusters {
            b.clusters = Some(v);
        }
        if self.est_h {
            b.kernel.est_h = true;
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Single-exposure mediation, one model pair per exposure.
    Sema {
        #[command(flatten)]
        data: DataArgs,
        /// Omit co-exposures from the models (biased; for comparison only).
        #[arg(long)]
        unadjusted: bool,
        #[arg(long)]
        fdr: Option<f64>,
        #[arg(long)]
        level: Option<f64>,
    },
    /// Principal-component mediation.
    Pcma {
        #[command(flatten)]
        data: DataArgs,
        /// cum:<θ>, first:<k> or kaiser.
        #[arg(long)]
        rule: Option<String>,
        #[arg(long)]
        level: Option<f64>,
    },
    /// Environmental-risk-score mediation.
    Ersma {
        #[command(flatten)]
        data: DataArgs,
        /// main or full.
        #[arg(long)]
        features: Option<String>,
        /// iqr or custom:<reference>,<comparative>.
        #[arg(long)]
        contrast: Option<String>,
        #[arg(long)]
        level: Option<f64>,
    },
    /// Fit the mediator, outcome and total-effect BKMR models.
    BkmrFit {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        kernel: KernelArgs,
    },
    /// Posterior mediation effects from BKMR fits.
    BkmrCma {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        kernel: KernelArgs,
        /// A bkmr-fit JSON artifact; fits from the data when absent.
        #[arg(long)]
        chains: Option<PathBuf>,
        /// Comparative exposure levels.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        a: Option<Vec<f64>>,
        /// Reference exposure levels.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        astar: Option<Vec<f64>>,
        #[arg(long)]
        draws: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Run the simulation study.
    Simulate {
        #[arg(long)]
        replicates: Option<usize>,
        /// Comma-separated <n>:<R²_M> pairs.
        #[arg(long, value_delimiter = ',')]
        scenarios: Option<Vec<String>>,
        /// Comma-separated method labels (sema_adjusted, pcma_first1, ersma_main, bkmr_hierarchical, ...).
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        #[arg(long)]
        reference_n: Option<usize>,
        #[arg(long)]
        bkmr_replicates: Option<usize>,
        #[arg(long)]
        bkmr_iterations: Option<usize>,
        #[arg(long)]
        bkmr_subsample: Option<usize>,
    },
    /// Tabulate a previously written JSON artifact.
    Report {
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> CliResult<Vec<PathBuf>> {
    let mut file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let seed = cli.seed.or(file.seed).unwrap_or(DEFAULT_SEED);
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let out = cli.out.as_path();
    match cli.command {
        Command::Sema { data, unadjusted, fdr, level } => {
            data.apply(&mut file.data);
            if unadjusted {
                file.sema.adjust = false;
            }
            if let Some(v) = fdr {
                file.sema.fdr = v;
            }
            if let Some(v) = level {
                file.sema.level = v;
            }
            commands::run_sema(seed, &file.data, &file.sema, out)
        }
        Command::Pcma { data, rule, level } => {
            data.apply(&mut file.data);
            if let Some(v) = rule {
                file.pcma.rule = v;
            }
            if let Some(v) = level {
                file.pcma.level = v;
            }
            commands::run_pcma(seed, &file.data, &file.pcma, out)
        }
        Command::Ersma { data, features, contrast, level } => {
            data.apply(&mut file.data);
            if let Some(v) = features {
                file.ersma.features = v;
            }
            if let Some(v) = contrast {
                file.ersma.contrast = v;
            }
            if let Some(v) = level {
                file.ersma.level = v;
            }
            commands::run_ersma(seed, &file.data, &file.ersma, out)
        }
        Command::BkmrFit { data, kernel } => {
            data.apply(&mut file.data);
            kernel.apply(&mut file.bkmr);
            commands::run_bkmr_fit(seed, &file.data, &file.bkmr, out)
        }
        Command::BkmrCma { data, kernel, chains, a, astar, draws, alpha } => {
            data.apply(&mut file.data);
            kernel.apply(&mut file.bkmr);
            let c = &mut file.cma;
            if let Some(v) = chains {
                c.chains = Some(v);
            }
            if let Some(v) = a {
                c.cma.a = v;
            }
            if let Some(v) = astar {
                c.cma.astar = v;
            }
            if let Some(v) = draws {
                c.cma.draws = v;
            }
            if let Some(v) = alpha {
                c.cma.alpha = v;
            }
            commands::run_bkmr_cma(seed, &file.data, &file.bkmr, &file.cma, out)
        }
        Command::Simulate {
            replicates,
            scenarios,
            methods,
            reference_n,
            bkmr_replicates,
            bkmr_iterations,
            bkmr_subsample,
        } => {
            let s = &mut file.simulate;
            if let Some(v) = replicates {
                s.replicates = v;
            }
            if let Some(v) = scenarios {
                s.scenarios = v;
            }
            if let Some(v) = methods {
                s.methods = v;
            }
            if let Some(v) = reference_n {
                s.reference_n = v;
            }
            if let Some(v) = bkmr_replicates {
                s.bkmr.replicates = v;
            }
            if let Some(v) = bkmr_iterations {
                s.bkmr.iterations = v;
            }
            if let Some(v) = bkmr_subsample {
                s.bkmr.subsample = Some(v);
            }
            commands::run_simulate(seed, &file.simulate, out)
        }
        Command::Report { input } => {
            if let Some(v) = input {
                file.report.input = Some(v);
            }
            commands::run_report(seed, &file.report, out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let out = cli.out.clone();
    match run(cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let report = e.report();
            let json = serde_json::to_string_pretty(&serde_json::json!({ "error": report }))
                .unwrap_or_else(|_| format!("{{\"error\": \"{}\"}}", report.message));
            eprintln!("{json}");
            if std::fs::create_dir_all(&out).is_ok() {
                let _ = std::fs::write(out.join("error.json"), format!("{json}\n"));
            }
            ExitCode::from(report.exit_code as u8)
        }
    }
}
