use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use strat_forge_core::config::ToolConfig;
use strat_forge_core::eval::{Approach, BenchSettings, Bm25Params, LeakageMode};
use strat_forge_core::optimizer::AblationMode;
use strat_forge_core::perf::{compare, identify_hotspots, parse_perf_report, run_variant, ProfileEntry, ProjectManifest};
use strat_forge_core::pipeline::{default_stages, run_pipeline, write_json, PipelineInputs, Runner, Services, Stage};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "strat-forge", version, about = "Mine optimization strategies, turn them into semgrep rules, apply them")]
struct Cli {
    /// TOML configuration; defaults apply for anything unset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Answer model calls from a recorded script instead of the network.
    #[arg(long, global = true)]
    replay: Option<PathBuf>,
    /// Overrides `pipeline.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Re-run stages even when their inputs are unchanged.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter a commit corpus down to single-function optimization commits.
    Mine {
        #[arg(long)]
        corpus: PathBuf,
        /// One keyword per line; replaces `miner.keywords`.
        #[arg(long)]
        keywords: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize each mined commit into one strategy sentence.
    Summarize {
        #[arg(long)]
        commits: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster summaries into a strategy library (no rules yet).
    Cluster {
        #[arg(long)]
        summaries: PathBuf,
        #[arg(long)]
        library: PathBuf,
    },
    /// Generate and validate analysis rules for every cluster.
    Rules {
        #[arg(long)]
        library: PathBuf,
        #[arg(long)]
        commits: PathBuf,
        /// Output library; defaults to updating `--library` in place.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        traces: Option<PathBuf>,
    },
    /// Re-validate every stored rule against its source commit.
    Verify {
        #[arg(long)]
        library: PathBuf,
        #[arg(long)]
        commits: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the library's rules over a target and rank locations.
    Scan {
        #[arg(long)]
        library: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scan, then ask the model for optimized code at each location.
    Optimize {
        #[arg(long)]
        library: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        mode: Option<AblationMode>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact-match benchmark over a task file.
    Eval(EvalArgs),
    /// Performance measurement and variant combination.
    Perf {
        #[command(subcommand)]
        command: PerfCommand,
    },
    /// Run pipeline stages into a work directory.
    Run {
        #[arg(long)]
        work: PathBuf,
        /// Comma-separated subset; defaults to every stage whose inputs were given.
        #[arg(long, value_delimiter = ',')]
        stages: Vec<Stage>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        keywords: Option<PathBuf>,
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long)]
        bench: Option<PathBuf>,
        #[arg(long)]
        kb: Option<PathBuf>,
        #[arg(long)]
        perf_reports: Option<PathBuf>,
        #[arg(long)]
        profile: Option<PathBuf>,
        #[arg(long)]
        mode: Option<AblationMode>,
    },
}

#[derive(Args)]
struct EvalArgs {
    /// JSONL of benchmark tasks.
    #[arg(long)]
    bench: PathBuf,
    /// JSONL of commit records used for retrieval.
    #[arg(long)]
    kb: Option<PathBuf>,
    #[arg(long)]
    library: Option<PathBuf>,
    #[arg(long)]
    approach: Option<Approach>,
    #[arg(long)]
    leakage: Option<LeakageMode>,
    #[arg(long)]
    repeats: Option<u32>,
    #[arg(long)]
    mode: Option<AblationMode>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum PerfCommand {
    /// List functions whose self time is above the threshold.
    Hotspots {
        /// `perf report --stdio` text, or a JSON list of profile entries.
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Measure a variant against a baseline and write a variant report.
    Run {
        /// Project manifest (JSON): build, unit_test, perf, metrics.
        #[arg(long)]
        project: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        variant: PathBuf,
        #[arg(long)]
        function: String,
        #[arg(long)]
        variant_id: String,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pick one effective variant per function from a report directory.
    Combine {
        #[arg(long)]
        reports: PathBuf,
        #[arg(long)]
        profile: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<ToolConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ToolConfig::load(p)?,
        None => ToolConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.pipeline.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn sibling_manifest(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    Ok(())
}

fn read_profile(path: &Path) -> Result<Vec<ProfileEntry>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if text.trim_start().starts_with('[') {
        return Ok(serde_json::from_str(&text)?);
    }
    Ok(parse_perf_report(&text))
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    if cfg.workers > 0 {
        rayon_pool(cfg.workers)?;
    }
    // perf subcommands that never touch a model
    if let Command::Perf { command } = &cli.command {
        match command {
            PerfCommand::Hotspots { profile, threshold } => {
                let entries = read_profile(profile)?;
                let hot = identify_hotspots(&entries, threshold.unwrap_or(cfg.perf.hotspot_threshold));
                println!("{}", serde_json::to_string_pretty(&hot)?);
                return Ok(());
            }
            PerfCommand::Run { project, baseline, variant, function, variant_id, runs, out } => {
                let manifest = ProjectManifest::load(project)?;
                let runs = runs.unwrap_or(cfg.perf.runs);
                let base = run_variant(&manifest, baseline, runs).context("baseline")?;
                let var = run_variant(&manifest, variant, runs).context("variant")?;
                let report = compare(function, variant_id, &base, &var)?;
                ensure_parent(out)?;
                write_json(out, &report)?;
                println!("effective: {}", report.effective);
                return Ok(());
            }
            PerfCommand::Combine { .. } => {}
        }
    }

    let services = Services::from_config(&cfg, cli.replay.as_deref())?;
    let runner = Runner { config: &cfg, services: &services, force: cli.force };
    let status = match &cli.command {
        Command::Mine { corpus, keywords, out } => {
            ensure_parent(out)?;
            runner.mine(corpus, keywords.as_deref(), out, &sibling_manifest(out))?
        }
        Command::Summarize { commits, out } => {
            ensure_parent(out)?;
            runner.summarize(commits, out, &sibling_manifest(out))?
        }
        Command::Cluster { summaries, library } => runner.cluster(summaries, library, &library.join("manifest.json"))?,
        Command::Rules { library, commits, out, traces } => {
            let out = out.as_ref().unwrap_or(library);
            runner.rules(library, commits, out, traces.as_deref(), &out.join("manifest.json"))?
        }
        Command::Verify { library, commits, out } => {
            ensure_parent(out)?;
            runner.verify(library, commits, out, &sibling_manifest(out))?
        }
        Command::Scan { library, target, out } => {
            ensure_parent(out)?;
            runner.scan(library, target, out, &sibling_manifest(out))?
        }
        Command::Optimize { library, target, mode, out } => {
            std::fs::create_dir_all(out)?;
            runner.optimize(library, target, mode.unwrap_or(cfg.eval.mode), out, &out.join("manifest.json"))?
        }
        Command::Eval(a) => {
            if a.library.is_none() && a.approach.unwrap_or(cfg.eval.approach) == Approach::StrategyLib {
                bail!("--approach strategy-lib needs --library");
            }
            let e = &cfg.eval;
            let settings = BenchSettings {
                approach: a.approach.unwrap_or(e.approach),
                leakage: a.leakage.unwrap_or(e.leakage),
                repeats: a.repeats.unwrap_or(e.repeats),
                k: e.k,
                bm25: Bm25Params { k1: e.bm25_k1, b: e.bm25_b },
                mode: a.mode.unwrap_or(e.mode),
                top_k_locations: cfg.pipeline.top_k_locations,
                temperature: cfg.pipeline.temperature,
            };
            std::fs::create_dir_all(&a.out)?;
            runner.eval(&a.bench, &settings, a.library.as_deref(), a.kb.as_deref(), &a.out, &a.out.join("manifest.json"))?
        }
        Command::Perf { command: PerfCommand::Combine { reports, profile, out } } => {
            std::fs::create_dir_all(out)?;
            runner.perf(reports, profile.as_deref(), out, &out.join("manifest.json"))?
        }
        Command::Perf { .. } => unreachable!("handled above"),
        Command::Run { work, stages, corpus, keywords, target, bench, kb, perf_reports, profile, mode } => {
            let inputs = PipelineInputs {
                corpus: corpus.clone(),
                keywords: keywords.clone(),
                target: target.clone(),
                bench: bench.clone(),
                kb: kb.clone(),
                perf_reports: perf_reports.clone(),
                profile: profile.clone(),
                mode: *mode,
            };
            let stages = if stages.is_empty() { default_stages(&inputs) } else { stages.clone() };
            for (stage, status) in run_pipeline(&runner, work, &inputs, &stages)? {
                println!("{:<10} {:?}", stage.name(), status);
            }
            return Ok(());
        }
    };
    println!("{status:?}");
    Ok(())
}

fn rayon_pool(workers: usize) -> Result<()> {
    strat_forge_core::configure_workers(workers).context("configuring worker pool")
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
