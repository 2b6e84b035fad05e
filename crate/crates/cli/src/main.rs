use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use vtprompt_core::cassette::CassetteMode;
use vtprompt_core::dataset::{build_cooccurrence, build_pope_queries, load_annotations, PopeSetting};
use vtprompt_core::detector::DetectorKind;
use vtprompt_core::pipeline::{
    report_runs, run_ablation, run_eval, score_run, AblationAxes, ReportFormat, RunConfig, RunOptions, RunSummary,
    SampleSpec, METRICS_MD,
};
use vtprompt_core::render::VPromptStyle;
use vtprompt_core::tprompt::PromptStrategy;

/// Visual and text prompting evaluation harness for MME, MMBench and POPE.
#[derive(Parser, Debug)]
#[command(name = "vtprompt", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Evaluate one configuration and write records, annotated images and a manifest.
    Run(RunArgs),
    /// Run a grid of configurations and write a combined report.
    Ablate(AblateArgs),
    /// Score a finished run, optionally against a baseline run.
    Score(ScoreArgs),
    /// Print a combined report for several runs.
    Report(ReportArgs),
    /// Build POPE yes/no queries from object annotations.
    PopeQueries(PopeArgs),
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Serve every remote call from cassettes; never touch the network.
    #[arg(long, conflicts_with = "record")]
    replay: bool,
    /// Call the backends on a cassette miss and record the reply.
    #[arg(long)]
    record: bool,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg =
            RunConfig::load(&self.config).with_context(|| format!("loading {}", self.config.display()))?;
        if self.replay {
            cfg.cassette_mode = CassetteMode::Replay;
        } else if self.record {
            cfg.cassette_mode = CassetteMode::Record;
        }
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Evaluate a seeded subsample of N instances.
    #[arg(long)]
    sample: Option<usize>,
    /// Seed for --sample.
    #[arg(long, default_value_t = 0, requires = "sample")]
    seed: u64,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Prompt strategies: plain, zero_shot_cot, least_to_most, tprompt.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    strategies: Vec<PromptStrategy>,
    /// Visual prompt styles: type_a .. type_e.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    styles: Vec<VPromptStyle>,
    /// Detector kinds: grounding_box, segment_everything, conditional_segment.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    detectors: Vec<DetectorKind>,
    /// Add an original-image run with no visual prompt.
    #[arg(long)]
    baseline: bool,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    /// Run directory holding records.jsonl.
    #[arg(long)]
    run: PathBuf,
    /// Baseline run directory for deltas.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// JSONL of manual error-category labels for incorrect records.
    #[arg(long)]
    error_labels: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Run directories, one report column each.
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    /// Output format: md or csv.
    #[arg(long, default_value = "md")]
    format: ReportFormat,
}

#[derive(Args, Debug)]
struct PopeArgs {
    /// JSONL of {"image_id", "objects": [...]} records.
    #[arg(long)]
    annotations: PathBuf,
    /// random, popular or adversarial.
    #[arg(long)]
    setting: PopeSetting,
    /// Positive (and negative) queries per image.
    #[arg(long, default_value_t = 3)]
    per_image: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run(args) => cmd_run(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Score(args) => cmd_score(args),
        Command::Report(args) => cmd_report(args),
        Command::PopeQueries(args) => cmd_pope_queries(args),
    }
}

fn summarize(summary: &RunSummary) {
    match &summary.manifest {
        Some(m) => {
            println!("run {} -> {}", m.run_id, summary.run_dir.display());
            println!(
                "records {} (failed {}), resumed {}, network calls {}, {:.2}s",
                m.records, m.failed, summary.resumed, m.network_calls, m.wall_time_secs
            );
            for (stage, hm) in &m.stages {
                println!("  {stage:<12} hits {:>5}  misses {:>5}", hm.hits, hm.misses);
            }
            if m.failed > 0 {
                warn!("{} instances failed; see the failure field in records.jsonl", m.failed);
            }
        }
        None => println!("run stopped early after {} records: {}", summary.written, summary.run_dir.display()),
    }
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let mut cfg = args.config.load()?;
    if let Some(n) = args.sample {
        cfg.sample = Some(SampleSpec { n, seed: args.seed });
        cfg.validate()?;
    }
    info!("{}", cfg.describe());
    let summary = run_eval(&cfg, &RunOptions::default())?;
    summarize(&summary);
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let axes = AblationAxes {
        strategies: args.strategies,
        styles: args.styles,
        detectors: args.detectors,
        include_baseline: args.baseline,
    };
    let result = run_ablation(&cfg, &axes, &RunOptions::default())?;
    print!("{}", result.markdown);
    let failed = result.cells.iter().filter(|c| c.error.is_some()).count();
    if failed == result.cells.len() {
        bail!("every ablation cell failed");
    }
    if failed > 0 {
        warn!("{failed} of {} ablation cells failed", result.cells.len());
    }
    Ok(())
}

fn cmd_score(args: ScoreArgs) -> Result<()> {
    score_run(&args.run, args.baseline.as_deref(), args.error_labels.as_deref())
        .with_context(|| format!("scoring {}", args.run.display()))?;
    let md = args.run.join(METRICS_MD);
    let text = std::fs::read_to_string(&md).with_context(|| format!("reading {}", md.display()))?;
    print!("{text}");
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    print!("{}", report_runs(&args.runs, args.format)?);
    Ok(())
}

fn write_output(out: Option<&Path>, body: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, body).with_context(|| format!("writing {}", p.display())),
        None => Ok(std::io::stdout().lock().write_all(body.as_bytes())?),
    }
}

fn cmd_pope_queries(args: PopeArgs) -> Result<()> {
    let ann = load_annotations(&args.annotations)?;
    let stats = build_cooccurrence(&ann);
    let queries = build_pope_queries(&ann, args.setting, &stats, args.per_image, args.seed)?;
    let mut body = String::new();
    for q in &queries {
        let line = serde_json::json!({
            "image_id": q.image_id,
            "question": q.question(),
            "object": q.object_name,
            "answer": if q.label { "yes" } else { "no" },
            "setting": q.setting,
        });
        body.push_str(&line.to_string());
        body.push('\n');
    }
    info!("{} queries over {} images", queries.len(), ann.len());
    write_output(args.out.as_deref(), &body)
}
