use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use genex::eval::{dataset_stats, EvalReport, GoldLabels};
use genex::filter::{read_exemplars, ExemplarStatus};
use genex::pipeline::{self, EvalOptions, PipelineConfig};
use genex::rank::NliFilterMode;
use genex::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

#[derive(Parser)]
#[command(name = "genex", version, about = "Generate and evaluate exemplars of generic statements")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    beam_size: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    /// Filter candidates by NLI label before the discriminators.
    #[arg(long, value_parser = parse_mode)]
    nli_filter: Option<NliFilterMode>,
}

#[derive(Subcommand)]
enum Command {
    /// Run generation and write exemplars.jsonl and manifest.json.
    Generate {
        #[command(flatten)]
        run: RunArgs,
        /// Plain beam search without lexical constraints.
        #[arg(long)]
        unconstrained: bool,
    },
    /// Score an exemplar file against gold labels.
    Eval {
        #[arg(long)]
        exemplars: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Second exemplar file to compare against.
        #[arg(long)]
        compare: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,5")]
        k: Vec<usize>,
        /// Exemplars per template for the per-template validity table.
        #[arg(long)]
        per_template: Option<usize>,
        /// Count every exemplar, not only selected ones.
        #[arg(long)]
        all: bool,
        /// Directory for report.json and report.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run with and without constraints and compare the two.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Print statistics of an exemplar file.
    Stats {
        #[arg(long)]
        exemplars: PathBuf,
    },
    /// Check a configuration file without running anything.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

fn parse_mode(s: &str) -> Result<NliFilterMode, String> {
    NliFilterMode::ALL
        .into_iter()
        .find(|m| m.as_str() == s)
        .ok_or_else(|| format!("expected one of {:?}", NliFilterMode::ALL.map(NliFilterMode::as_str)))
}

fn load_config(args: &RunArgs) -> genex::Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.set_seed(seed);
    }
    if let Some(dir) = &args.output_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(w) = args.workers {
        cfg.run.workers = w;
    }
    if let Some(b) = args.beam_size {
        cfg.decoder.beam_size = b;
    }
    if let Some(m) = args.max_len {
        cfg.decoder.max_len = m;
    }
    if let Some(mode) = args.nli_filter {
        cfg.filter.nli_filter = Some(mode);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::Generate { run, unconstrained } => {
            let mut cfg = load_config(&run)?;
            if unconstrained {
                cfg.run.constrained = false;
            }
            let summary = pipeline::run_generate(&cfg)?;
            let m = &summary.manifest;
            println!("exemplars: {}", summary.exemplars_path.display());
            println!("manifest:  {} (sha256 {})", summary.manifest_path.display(), summary.manifest_sha256);
            println!(
                "generics {}/{}  selected {} ({} exceptions, {} instantiations)",
                m.tallies.generics.passed,
                m.tallies.generics.input,
                m.stats.n_total,
                m.stats.n_exceptions,
                m.stats.n_instantiations
            );
            Ok(if m.is_partial() { EXIT_PARTIAL } else { 0 })
        }
        Command::Eval { exemplars, labels, compare, k, per_template, all, out } => {
            let opts = EvalOptions { ks: k, n_per_template: per_template, selected_only: !all };
            let report = pipeline::run_eval(&exemplars, labels.as_deref(), compare.as_deref(), &opts)?;
            print!("{}", report.render_text());
            if let Some(dir) = out {
                pipeline::write_report(&report, &dir)?;
            }
            Ok(0)
        }
        Command::Ablate { run, labels } => {
            let cfg = load_config(&run)?;
            let labels = labels.as_deref().map(GoldLabels::load).transpose()?;
            let result = pipeline::run_ablation(&cfg, labels.as_ref())?;
            let report = EvalReport { ablation_rows: result.rows, ..EvalReport::default() };
            print!("{}", report.render_text());
            pipeline::write_report(&report, &cfg.output_dir)?;
            let partial = result.constrained.manifest.is_partial() || result.unconstrained.manifest.is_partial();
            Ok(if partial { EXIT_PARTIAL } else { 0 })
        }
        Command::Stats { exemplars } => {
            let exs = read_exemplars(&exemplars)?;
            let selected: Vec<_> = exs.into_iter().filter(|e| e.status == ExemplarStatus::SelectedValid).collect();
            let report = EvalReport { stats: dataset_stats(&selected), ..EvalReport::default() };
            print!("{}", report.render_text());
            Ok(0)
        }
        Command::ValidateConfig { config } => {
            let cfg = PipelineConfig::load(&config)?;
            cfg.validate()?;
            println!("ok: config hash {}", cfg.hash());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_error = matches!(e.downcast_ref::<Error>(), Some(Error::Configuration(_) | Error::Io { .. }));
            ExitCode::from(if config_error { EXIT_CONFIG } else { 1 })
        }
    }
}
