use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use jobloss_core::dgp::DgpConfig;
use jobloss_core::forest::ForestParams;
use jobloss_core::ingest::IngestConfig;
use jobloss_core::pipeline::{self, FoldConfig, MatchingConfig, PartialsConfig, PipelineConfig, PolicyConfig};
use jobloss_core::policy::PolicyTreeParams;
use jobloss_core::report::EvaluateParams;
use jobloss_core::{Error, Result};
use serde_json::json;

/// Environment variable holding the default worker thread count.
const THREADS_ENV: &str = "JOBLOSS_THREADS";

#[derive(Parser)]
#[command(name = "jobloss", version, about = "Heterogeneous job-displacement effects with clustered causal forests")]
struct Cli {
    /// Worker threads (defaults to $JOBLOSS_THREADS, then all cores).
    #[arg(long, global = true, env = THREADS_ENV)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic worker dataset with known effects.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the displaced-worker dataset from a raw worker-year panel.
    Ingest {
        #[arg(long)]
        panel: PathBuf,
        /// Event years as `first:last`.
        #[arg(long, value_parser = parse_range)]
        year_range: (i32, i32),
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Propensity-score matching of controls to displaced workers.
    Match {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long)]
        caliper: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        balance: PathBuf,
    },
    /// Fit one causal forest outside the test fold.
    Fit {
        #[arg(long)]
        dataset: PathBuf,
        /// Fold assignment written by `crossfit`; without it every row trains.
        #[arg(long)]
        folds: Option<PathBuf>,
        #[command(flatten)]
        forest: ForestArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-fitted CATE predictions.
    Crossfit {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value_t = 0.2)]
        test: f64,
        #[command(flatten)]
        forest: ForestArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluation tables for cross-fitted CATEs.
    Evaluate {
        #[arg(long)]
        cates: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 200)]
        bootstrap: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fit a policy tree and compare targeting rules.
    Policy {
        #[arg(long)]
        cates: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Evaluation rows; defaults to the test fold.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        cost: f64,
        #[arg(long, default_value_t = 2)]
        depth: usize,
        #[arg(long, default_value_t = 50)]
        thresholds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Directory for targeting tables; defaults to the policy file's directory.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Partial effects of location, industry and worker characteristics.
    Partials {
        #[arg(long)]
        forest: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        partition: Option<PathBuf>,
        #[arg(long)]
        max_rows: Option<usize>,
        #[arg(long, default_value_t = 200)]
        max_markets: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Redraw the SVG plots of a report directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Check that every file under a directory is recorded by a manifest.
    Audit {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Run the whole pipeline from a configuration file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ForestArgs {
    /// JSON forest parameters; flags below override it.
    #[arg(long)]
    forest_config: Option<PathBuf>,
    #[arg(long)]
    trees: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "y_1")]
    outcome: String,
}

impl ForestArgs {
    fn params(&self) -> Result<ForestParams> {
        let mut p = match &self.forest_config {
            Some(path) => {
                serde_json::from_str(&read(path)?).map_err(|e| Error::Config(format!("forest config: {e}")))?
            }
            None => ForestParams::default(),
        };
        if let Some(t) = self.trees {
            p.num_trees = t;
        }
        if let Some(s) = self.seed {
            p.seed = s;
        }
        p.validate()?;
        Ok(p)
    }
}

fn parse_range(s: &str) -> std::result::Result<(i32, i32), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected `first:last`, got `{s}`"))?;
    let a: i32 = a.trim().parse().map_err(|_| format!("bad year `{a}`"))?;
    let b: i32 = b.trim().parse().map_err(|_| format!("bad year `{b}`"))?;
    if a > b {
        return Err(format!("empty year range {a}:{b}"));
    }
    Ok((a, b))
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn load_ingest_config(path: Option<&PathBuf>) -> Result<IngestConfig> {
    match path {
        Some(p) => serde_json::from_str(&read(p)?).map_err(|e| Error::Config(format!("ingest config: {e}"))),
        None => Ok(IngestConfig::default()),
    }
}

fn manifest(
    cmd: &str,
    config: serde_json::Value,
    seed: u64,
    inputs: &[&Path],
    outputs: &[PathBuf],
    out: &Path,
    started: Instant,
) -> Result<()> {
    let inputs: Vec<PathBuf> = inputs.iter().map(|p| p.to_path_buf()).collect();
    pipeline::write_command_manifest(cmd, &config, seed, &inputs, outputs, out, started)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let started = Instant::now();
    match cli.command {
        Command::Simulate { config, out } => {
            let dgp: DgpConfig = match &config {
                Some(p) => DgpConfig::from_json(&read(p)?)?,
                None => DgpConfig::default(),
            };
            dgp.validate()?;
            let written = pipeline::step_simulate(&dgp, &out)?;
            let inputs: Vec<&Path> = config.iter().map(PathBuf::as_path).collect();
            manifest("simulate", serde_json::to_value(&dgp)?, dgp.seed, &inputs, &written, &out, started)?;
            eprintln!("wrote {} and {}", written[0].display(), written[1].display());
        }
        Command::Ingest { panel, year_range: (a, b), config, out } => {
            let cfg = load_ingest_config(config.as_ref())?;
            cfg.validate()?;
            let written = pipeline::step_ingest(&panel, a, b, &cfg, &out)?;
            let conf = json!({ "ingest": cfg, "first_year": a, "last_year": b });
            manifest("ingest", conf, 0, &[&panel], &written, &out, started)?;
            eprintln!("wrote {}", out.display());
        }
        Command::Match { dataset, k, caliper, out, balance } => {
            let cfg = MatchingConfig { enabled: true, k, caliper };
            let written = pipeline::step_match(&dataset, &cfg, &out, &balance)?;
            manifest("match", serde_json::to_value(&cfg)?, 0, &[&dataset], &written, &out, started)?;
            eprintln!("wrote {} and {}", out.display(), balance.display());
        }
        Command::Fit { dataset, folds, forest, out } => {
            let params = forest.params()?;
            let written = pipeline::step_fit(&dataset, folds.as_deref(), &params, &forest.outcome, &out)?;
            let mut inputs = vec![dataset.as_path()];
            inputs.extend(folds.as_deref());
            let conf = json!({ "forest": params, "outcome": forest.outcome });
            manifest("fit", conf, params.seed, &inputs, &written, &out, started)?;
            eprintln!("wrote {}", out.display());
        }
        Command::Crossfit { dataset, folds, test, forest, out } => {
            let params = forest.params()?;
            let fc = FoldConfig { n_folds: folds, test_fraction: test };
            let written = pipeline::step_crossfit(&dataset, &fc, &params, &forest.outcome, params.seed, &out)?;
            let conf = json!({ "folds": fc, "forest": params, "outcome": forest.outcome });
            manifest("crossfit", conf, params.seed, &[&dataset], &written, &out, started)?;
            eprintln!("wrote {}", out.display());
        }
        Command::Evaluate { cates, dataset, report, bootstrap, seed } => {
            let params = EvaluateParams { n_bootstrap: bootstrap, seed, ..EvaluateParams::default() };
            let mut written = pipeline::step_evaluate(&dataset, &cates, &params, &report)?;
            written.extend(pipeline::step_report(&report)?.0);
            manifest(
                "evaluate",
                serde_json::to_value(&params)?,
                seed,
                &[&dataset, &cates],
                &written,
                &report,
                started,
            )?;
            eprintln!("wrote {} files to {}", written.len(), report.display());
        }
        Command::Policy { cates, dataset, test, cost, depth, thresholds, seed, out, report } => {
            let cfg = PolicyConfig {
                cost,
                tree: PolicyTreeParams { depth, n_thresholds: thresholds },
                ..PolicyConfig::default()
            };
            let report = report.unwrap_or_else(|| out.parent().map(Path::to_path_buf).unwrap_or_default());
            let written = pipeline::step_policy(&dataset, &cates, test.as_deref(), &cfg, seed, &out, &report)?;
            let mut inputs = vec![dataset.as_path(), cates.as_path()];
            inputs.extend(test.as_deref());
            manifest("policy", serde_json::to_value(&cfg)?, seed, &inputs, &written, &out, started)?;
            eprintln!("wrote {}", out.display());
        }
        Command::Partials { forest, dataset, partition, max_rows, max_markets, seed, out } => {
            let cfg = PartialsConfig { max_rows, max_markets, ..PartialsConfig::default() };
            let written = pipeline::step_partials(&forest, &dataset, partition.as_deref(), &cfg, seed, &out)?;
            let mut inputs = vec![forest.as_path(), dataset.as_path()];
            inputs.extend(partition.as_deref());
            manifest("partials", serde_json::to_value(&cfg)?, seed, &inputs, &written, &out, started)?;
            eprintln!("wrote {} files to {}", written.len(), out.display());
        }
        Command::Report { dir } => {
            let (written, missing) = pipeline::step_report(&dir)?;
            for m in &missing {
                eprintln!("missing upstream artifact: {}", dir.join(m).display());
            }
            eprintln!("wrote {} plots to {}", written.len(), dir.display());
            let mp = pipeline::manifest_path_for(&dir);
            let mut all = written.clone();
            if let Ok(prev) = pipeline::RunManifest::load(&mp) {
                all.extend(prev.output_digests.keys().map(|k| dir.join(k)).filter(|p| p.exists()));
                all.sort();
                all.dedup();
            }
            manifest("report", json!({ "dir": dir }), 0, &[], &all, &dir, started)?;
        }
        Command::Audit { dir } => {
            let rep = pipeline::audit(&dir)?;
            for p in &rep.orphans {
                println!("orphan {}", p.display());
            }
            for p in &rep.mismatched {
                println!("changed {}", p.display());
            }
            println!(
                "{} manifests, {} recorded files, {} orphans, {} changed",
                rep.manifests.len(),
                rep.checked,
                rep.orphans.len(),
                rep.mismatched.len()
            );
            if !rep.ok() {
                return Err(Error::Data("audit failed".into()));
            }
        }
        Command::Run { config, out } => {
            let mut cfg = PipelineConfig::load(&config)?;
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            let m = pipeline::run_pipeline(&cfg, &mut |stage, skipped| {
                eprintln!("{stage}: {}", if skipped { "up to date" } else { "done" });
            })?;
            eprintln!(
                "{} outputs recorded in {}",
                m.output_digests.len(),
                cfg.out_dir.join(pipeline::MANIFEST_NAME).display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
