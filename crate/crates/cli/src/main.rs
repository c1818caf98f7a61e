use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use lad_core::config::RunConfig;
use lad_core::data::{generate_corpus, read_corpus, write_corpus, Corpus, Manifest, MANIFEST_FILE};
use lad_core::experiment::{evaluate_run, train_method, Comparison, Method, REPORT_FILE};
use lad_core::evaluate::MetricsReport;
use log::{info, warn};

/// Root for outputs whose location is not given explicitly.
const OUTPUT_ROOT_VAR: &str = "LAD_OUTPUT_ROOT";

#[derive(Parser, Debug)]
#[command(name = "lad", version, about = "Layer-wise ambiguity distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus: three split files and a manifest.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Corpus directory [default: <output root>/data]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one method and write its run directory.
    Train {
        /// One of: lad, lad-rc, ord, ls, mc, ts, ldl
        #[arg(value_name = "METHOD", value_parser = parse_method)]
        method: Option<Method>,
        /// Same as the positional METHOD
        #[arg(long = "method", value_name = "METHOD", value_parser = parse_method, conflicts_with = "method")]
        method_flag: Option<Method>,
        #[command(flatten)]
        common: Common,
        /// Corpus directory written by `generate`; without it the corpus is generated from [corpus]
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory [default: <output root>/<method>-seed<seed>]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-score a run's final model on an eval split.
    Evaluate {
        /// Run directory written by `train`
        run: PathBuf,
        /// Corpus directory; without it the corpus is regenerated from the run's resolved config
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also write the report here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate the reports of several runs.
    Compare {
        /// Run directories
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// CSV output [default: <output root>/comparison.csv]
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; omitted values take their defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed (the corpus seed for `generate`)
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: lad_core::Error| e.to_string())
}

impl Common {
    /// The parsed config and the text to echo into a run directory.
    fn load(&self) -> Result<(RunConfig, Option<String>)> {
        match &self.config {
            Some(path) => {
                let (cfg, text) = RunConfig::load(path)?;
                Ok((cfg, Some(text)))
            }
            None => Ok((RunConfig::default(), None)),
        }
    }
}

fn output_root(cfg: Option<&RunConfig>) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_VAR) {
        Some(root) if !root.is_empty() => PathBuf::from(root),
        _ => cfg.map_or_else(|| RunConfig::default().output_dir, |c| c.output_dir.clone()),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { common, out } => generate(&common, out),
        Command::Train {
            method,
            method_flag,
            common,
            data,
            out,
        } => {
            let Some(method) = method.or(method_flag) else {
                bail!("no method given; valid methods: {}", Method::valid_names());
            };
            train(method, &common, data.as_deref(), out)
        }
        Command::Evaluate { run, data, out } => evaluate(&run, data.as_deref(), out.as_deref()),
        Command::Compare { runs, out } => compare(&runs, out),
    }
}

fn generate(common: &Common, out: Option<PathBuf>) -> Result<()> {
    let (mut cfg, _) = common.load()?;
    if let Some(seed) = common.seed {
        cfg.corpus.seed = seed;
    }
    cfg.corpus.validate().map_err(|e| e.within("corpus"))?;
    let dir = out.unwrap_or_else(|| output_root(Some(&cfg)).join("data"));
    let generated = generate_corpus(&cfg.corpus)?;
    let manifest = write_corpus(&generated, &cfg.corpus, &dir)?;
    // Read back so that a zero exit means the files verify against the manifest.
    read_corpus(&dir).context("generated corpus failed verification")?;
    for (name, entry) in &manifest.splits {
        println!("{name:<10} {:>6} samples  {}  {}", entry.samples, entry.sha256, dir.join(&entry.file).display());
    }
    println!("manifest   {}", dir.join(MANIFEST_FILE).display());
    Ok(())
}

/// Loads `--data`, making the resolved config's [corpus] describe it.
fn load_data(cfg: &mut RunConfig, dir: &Path) -> Result<Corpus> {
    let corpus = read_corpus(dir)?;
    if dir.join(MANIFEST_FILE).exists() {
        let manifest = Manifest::read(dir)?;
        if manifest.config != cfg.corpus {
            warn!(
                "[corpus] differs from {}; using the corpus settings recorded there",
                dir.join(MANIFEST_FILE).display()
            );
            cfg.corpus = manifest.config;
        }
    }
    Ok(corpus)
}

fn train(method: Method, common: &Common, data: Option<&Path>, out: Option<PathBuf>) -> Result<()> {
    let (mut cfg, text) = common.load()?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let corpus = match data {
        Some(dir) => load_data(&mut cfg, dir)?,
        None => {
            info!("no --data given; generating the corpus from [corpus]");
            generate_corpus(&cfg.corpus)?.corpus
        }
    };
    cfg.validate()?;
    let dir = out.unwrap_or_else(|| output_root(Some(&cfg)).join(format!("{}-seed{}", method.name(), cfg.seed)));
    let outcome = train_method(method, &cfg, text.as_deref(), &corpus, &dir)?;
    let written = MetricsReport::read(&dir.join(REPORT_FILE)).context("report failed verification")?;
    if written != outcome.report {
        bail!("{} does not read back as written", dir.join(REPORT_FILE).display());
    }
    print!("{}", outcome.report.to_text());
    println!("run directory: {}", dir.display());
    Ok(())
}

fn evaluate(run: &Path, data: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let eval = match data {
        Some(dir) => read_corpus(dir)?.eval,
        None => {
            let path = run.join("resolved_config.toml");
            let (cfg, _) = RunConfig::load(&path)?;
            generate_corpus(&cfg.corpus)?.corpus.eval
        }
    };
    let report = evaluate_run(run, &eval)?;
    let stored = MetricsReport::read(&run.join(REPORT_FILE))?;
    print!("{}", report.to_text());
    if stored.eval_checksum == report.eval_checksum {
        if stored.metrics == report.metrics {
            println!("matches {}", run.join(REPORT_FILE).display());
        } else {
            warn!("differs from {} on the same eval split", run.join(REPORT_FILE).display());
        }
    }
    if let Some(path) = out {
        report.write(path)?;
    }
    Ok(())
}

fn compare(runs: &[PathBuf], out: Option<PathBuf>) -> Result<()> {
    let table = Comparison::from_run_dirs(runs)?;
    print!("{}", table.to_text());
    let path = out.unwrap_or_else(|| output_root(None).join("comparison.csv"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("cannot create {}", parent.display()))?;
    }
    fs::write(&path, table.to_csv()).with_context(|| format!("cannot write {}", path.display()))?;
    println!("csv: {}", path.display());
    Ok(())
}
