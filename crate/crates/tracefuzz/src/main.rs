use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tracefuzz::harness::{
    self, call_chain_histogram, config::feedback_name, coverage_diff, dry_run, load_corpus_dir,
    load_target, print_summaries, resolve_max_tip, run_fuzz, HarnessError, MaxTip, Settings,
};
use tracefuzz::pipeline::FeedbackMode;

#[derive(Parser)]
#[command(
    name = "tracefuzz",
    about = "Coverage-guided fuzzer with branch-packet path feedback",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct TargetArgs {
    /// Built-in benchmark target: chunk-name, deep-recursion, or maze.
    #[arg(long, conflicts_with = "program")]
    benchmark: Option<String>,
    /// Path to a target program in text form.
    #[arg(long)]
    program: Option<PathBuf>,
    /// Seed corpus directory (required with --program, optional otherwise).
    #[arg(long)]
    seeds: Option<PathBuf>,
}

#[derive(Args)]
struct SettingsArgs {
    /// Config file with key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Individual setting overrides, e.g. -s feedback=path-slice.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Feedback mode: path-slice, edge-pt, or direct-edge.
    #[arg(long)]
    feedback: Option<String>,
    /// Pipeline mode: sequential or parallel.
    #[arg(long)]
    pipeline: Option<String>,
    /// Packets per slice, or `auto` to calibrate.
    #[arg(long)]
    max_tip: Option<String>,
    /// Campaign RNG seed.
    #[arg(long)]
    rng_seed: Option<u64>,
    /// Execution budget.
    #[arg(long)]
    execs: Option<u64>,
}

impl SettingsArgs {
    fn resolve(&self) -> Result<Settings, HarnessError> {
        let mut s = Settings::default();
        if let Some(path) = &self.config {
            s.apply_file(path)?;
        }
        s.apply_env()?;
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| {
                HarnessError::Usage(format!("--set expects KEY=VALUE, got `{kv}`"))
            })?;
            s.apply(k.trim(), v.trim())?;
        }
        if let Some(v) = &self.feedback {
            s.apply("feedback", v)?;
        }
        if let Some(v) = &self.pipeline {
            s.apply("pipeline", v)?;
        }
        if let Some(v) = &self.max_tip {
            s.apply("max_tip", v)?;
        }
        if let Some(v) = self.rng_seed {
            s.apply("rng_seed", &v.to_string())?;
        }
        if let Some(v) = self.execs {
            s.apply("execs", &v.to_string())?;
        }
        Ok(s)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a fuzzing campaign.
    Fuzz {
        #[command(flatten)]
        target: TargetArgs,
        #[command(flatten)]
        settings: SettingsArgs,
        /// Output directory for queue/, crashes/, hangs/, stats.csv.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Independent campaigns with consecutive RNG seeds.
        #[arg(long, default_value_t = 1)]
        trials: u32,
    },
    /// Execute a corpus once and report feedback throughput.
    Dryrun {
        #[command(flatten)]
        target: TargetArgs,
        #[command(flatten)]
        settings: SettingsArgs,
        /// Corpus directory to replay (defaults to the target's seeds).
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Contrast which corpus inputs two feedback modes would retain.
    Covdiff {
        #[command(flatten)]
        target: TargetArgs,
        #[command(flatten)]
        settings: SettingsArgs,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// First mode to compare.
        #[arg(long, default_value = "path-slice")]
        mode_a: String,
        /// Second mode to compare.
        #[arg(long, default_value = "direct-edge")]
        mode_b: String,
    },
    /// Report sampled call-chain depths over a corpus.
    Callchains {
        #[command(flatten)]
        target: TargetArgs,
        #[command(flatten)]
        settings: SettingsArgs,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Calibrate the slice length for a target.
    Calibrate {
        #[command(flatten)]
        target: TargetArgs,
        #[command(flatten)]
        settings: SettingsArgs,
    },
}

fn corpus_or_seeds(
    corpus: &Option<PathBuf>,
    target: &harness::Target,
) -> Result<Vec<Vec<u8>>, HarnessError> {
    match corpus {
        Some(dir) => load_corpus_dir(dir),
        None => Ok(target.seeds.clone()),
    }
}

fn fixed_max_tip(settings: &Settings, target: &harness::Target) -> u32 {
    resolve_max_tip(settings, target).0
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let stdout = std::io::stdout();
    let mut out_h = stdout.lock();
    match cli.command {
        Command::Fuzz {
            target,
            settings,
            out,
            trials,
        } => {
            let settings = settings.resolve()?;
            let target = load_target(
                target.benchmark.as_deref(),
                target.program.as_deref(),
                target.seeds.as_deref(),
            )?;
            let summaries = run_fuzz(&target, &settings, out.as_deref(), trials)?;
            print_summaries(&mut out_h, &summaries).map_err(|source| HarnessError::Io {
                path: PathBuf::from("<stdout>"),
                source,
            })?;
        }
        Command::Dryrun {
            target,
            settings,
            corpus,
        } => {
            let settings = settings.resolve()?;
            let target = load_target(
                target.benchmark.as_deref(),
                target.program.as_deref(),
                target.seeds.as_deref(),
            )?;
            let corpus = corpus_or_seeds(&corpus, &target)?;
            let max_tip = fixed_max_tip(&settings, &target);
            let r = dry_run(&target.program, &corpus, &settings, max_tip)?;
            println!(
                "{}: {} execs in {:.3}s ({:.0} exec/s), {} new-coverage inputs, occupancy {}",
                feedback_name(r.feedback),
                r.execs,
                r.elapsed.as_secs_f64(),
                r.execs_per_sec(),
                r.new_coverage_inputs,
                r.occupancy
            );
        }
        Command::Covdiff {
            target,
            settings,
            corpus,
            mode_a,
            mode_b,
        } => {
            let settings = settings.resolve()?;
            let target = load_target(
                target.benchmark.as_deref(),
                target.program.as_deref(),
                target.seeds.as_deref(),
            )?;
            let corpus = corpus_or_seeds(&corpus, &target)?;
            let parse = |s: &str| -> Result<FeedbackMode, HarnessError> {
                harness::config::parse_feedback(s).map_err(HarnessError::Usage)
            };
            let max_tip = fixed_max_tip(&settings, &target);
            let d = coverage_diff(
                &target.program,
                &corpus,
                &settings,
                parse(&mode_a)?,
                parse(&mode_b)?,
                max_tip,
            )?;
            for r in [&d.a, &d.b] {
                println!(
                    "{}: {} new-coverage inputs, occupancy {}",
                    feedback_name(r.feedback),
                    r.new_coverage_inputs,
                    r.occupancy
                );
            }
            println!(
                "retained only by {}: {}; only by {}: {}; by both: {}",
                feedback_name(d.a.feedback),
                d.new_only_a,
                feedback_name(d.b.feedback),
                d.new_only_b,
                d.new_both
            );
        }
        Command::Callchains {
            target,
            settings,
            corpus,
        } => {
            let settings = settings.resolve()?;
            let target = load_target(
                target.benchmark.as_deref(),
                target.program.as_deref(),
                target.seeds.as_deref(),
            )?;
            let corpus = corpus_or_seeds(&corpus, &target)?;
            let hist = call_chain_histogram(&target.program, &corpus, &settings.limits());
            if hist.is_empty() {
                println!("no call chains sampled");
            }
            for (depth, count) in &hist {
                println!("depth {depth}: {count}");
            }
            if let Some(max) = hist.keys().max() {
                println!("max sampled depth: {max}");
            }
        }
        Command::Calibrate { target, settings } => {
            let mut settings = settings.resolve()?;
            settings.max_tip = MaxTip::Auto;
            let target = load_target(
                target.benchmark.as_deref(),
                target.program.as_deref(),
                target.seeds.as_deref(),
            )?;
            let (chosen, report) = resolve_max_tip(&settings, &target);
            let report = report.expect("auto mode always calibrates");
            println!("candidate  occ@half  occ@full  growth  collisions  qualifies");
            for c in &report.candidates {
                println!(
                    "{:<9}  {:<8}  {:<8}  {:<6.3}  {:<10.4}  {}",
                    c.max_tip,
                    c.occupancy_half,
                    c.occupancy_full,
                    c.growth,
                    c.collision_rate,
                    c.qualifies
                );
            }
            println!("chosen max_tip: {chosen}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
