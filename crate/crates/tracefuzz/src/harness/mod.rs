//! Command-layer glue: target/corpus loading, campaign persistence, and the
//! operations behind each CLI subcommand.

pub mod config;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::feedback::{has_new_bits, FeedbackConfig, NewBits};
use crate::fuzzer::{calibrate_max_tip, CalibrationReport, Campaign, StatsRow};
use crate::pipeline::{FeedbackMode, Pipeline, PipelineError};
use crate::vm::{
    build_benchmark, execute, load_program, seed_corpus, Benchmark, ExecLimits, NullTraceSink,
    ParseError, TargetProgram,
};

pub use config::{ConfigError, MaxTip, Settings};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot load target program: {0}")]
    Program(#[from] ParseError),
    #[error("execution pipeline failed: {0}")]
    Pipeline(#[from] PipelineError),
    #[error("{0}")]
    Usage(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A resolved fuzzing target: the program plus its starting corpus.
pub struct Target {
    pub name: String,
    pub program: TargetProgram,
    pub seeds: Vec<Vec<u8>>,
}

/// Resolves a target from either a built-in benchmark name or a program
/// file; file targets need a seed directory.
pub fn load_target(
    benchmark: Option<&str>,
    program_path: Option<&Path>,
    seeds_dir: Option<&Path>,
) -> Result<Target, HarnessError> {
    match (benchmark, program_path) {
        (Some(name), None) => {
            let which: Benchmark = name
                .parse()
                .map_err(|e: String| HarnessError::Usage(e))?;
            let mut seeds = seed_corpus(which);
            if let Some(dir) = seeds_dir {
                seeds = load_corpus_dir(dir)?;
            }
            Ok(Target {
                name: name.to_string(),
                program: build_benchmark(which),
                seeds,
            })
        }
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path).map_err(io_err(path))?;
            let program = load_program(&text)?;
            let dir = seeds_dir.ok_or_else(|| {
                HarnessError::Usage("--seeds is required with --program".into())
            })?;
            let seeds = load_corpus_dir(dir)?;
            if seeds.is_empty() {
                return Err(HarnessError::Usage(format!(
                    "seed directory {} is empty",
                    dir.display()
                )));
            }
            Ok(Target {
                name: path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "program".into()),
                program,
                seeds,
            })
        }
        _ => Err(HarnessError::Usage(
            "specify exactly one of --benchmark or --program".into(),
        )),
    }
}

/// Reads every file in `dir` as one input, in filename order.
pub fn load_corpus_dir(dir: &Path) -> Result<Vec<Vec<u8>>, HarnessError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| std::fs::read(p).map_err(io_err(p)))
        .collect()
}

/// Resolves `max_tip = auto` by calibrating against the target.
pub fn resolve_max_tip(
    settings: &Settings,
    target: &Target,
) -> (u32, Option<CalibrationReport>) {
    match settings.max_tip {
        MaxTip::Fixed(n) => (n, None),
        MaxTip::Auto => {
            let base = settings.campaign_config(0);
            let report = calibrate_max_tip(
                &target.program,
                &target.seeds,
                settings.calibration_execs,
                &base,
            );
            (report.chosen, Some(report))
        }
    }
}

pub const STATS_HEADER: &str =
    "exec_index,wall_ms,ground_truth_edges_covered,bitmap_occupancy,queue_len,crashes,hangs";

pub fn stats_csv(rows: &[StatsRow]) -> String {
    let mut out = String::from(STATS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.exec_index,
            r.wall_ms,
            r.ground_truth_edges_covered,
            r.bitmap_occupancy,
            r.queue_len,
            r.crashes,
            r.hangs
        ));
    }
    out
}

/// Writes `queue/`, `crashes/`, `hangs/`, and `stats.csv` under `dir`.
/// Identical campaigns produce byte-identical directory trees.
pub fn persist_campaign(campaign: &Campaign, dir: &Path) -> Result<(), HarnessError> {
    let write = |path: &Path, bytes: &[u8]| -> Result<(), HarnessError> {
        std::fs::write(path, bytes).map_err(io_err(path))
    };
    for sub in ["queue", "crashes", "hangs"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    for seed in &campaign.queue {
        let origin = match seed.src {
            Some(src) => format!("src{src:06}"),
            None => "orig".to_string(),
        };
        let name = format!("id{:06}-{}-{}", seed.id, origin, seed.op);
        write(&dir.join("queue").join(name), &seed.data)?;
    }
    for (sub, artifacts) in [("crashes", &campaign.crashes), ("hangs", &campaign.hangs)] {
        for (i, a) in artifacts.iter().enumerate() {
            let name = format!("id{:06}-{}-{}", i, a.label, a.op);
            write(&dir.join(sub).join(name), &a.data)?;
        }
    }
    write(&dir.join("stats.csv"), stats_csv(&campaign.stats).as_bytes())
}

#[derive(Debug, Clone)]
pub struct TrialSummary {
    pub rng_seed: u64,
    pub execs: u64,
    pub edges_covered: u64,
    pub occupancy: u64,
    pub queue_len: u64,
    pub crashes: u64,
    pub hangs: u64,
}

/// Runs `trials` campaigns with consecutive RNG seeds; trial `t` persists
/// under `out/trial-t` (or directly under `out` for a single trial).
pub fn run_fuzz(
    target: &Target,
    settings: &Settings,
    out: Option<&Path>,
    trials: u32,
) -> Result<Vec<TrialSummary>, HarnessError> {
    assert!(trials >= 1);
    let (max_tip, _) = resolve_max_tip(settings, target);
    let mut summaries = Vec::new();
    for t in 0..trials {
        let mut config = settings.campaign_config(max_tip);
        config.rng_seed = settings.rng_seed + t as u64;
        let rng_seed = config.rng_seed;
        let mut campaign = Campaign::new(target.program.clone(), target.seeds.clone(), config);
        campaign.run(settings.execs);
        if let Some(base) = out {
            let dir = if trials == 1 {
                base.to_path_buf()
            } else {
                base.join(format!("trial-{t}"))
            };
            persist_campaign(&campaign, &dir)?;
        }
        summaries.push(TrialSummary {
            rng_seed,
            execs: campaign.execs(),
            edges_covered: campaign.edges_covered(),
            occupancy: campaign.occupancy(),
            queue_len: campaign.queue.len() as u64,
            crashes: campaign.crashes.len() as u64,
            hangs: campaign.hangs.len() as u64,
        });
    }
    Ok(summaries)
}

pub fn mean_stddev(values: impl IntoIterator<Item = u64>) -> (f64, f64) {
    let v: Vec<f64> = values.into_iter().map(|x| x as f64).collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone)]
pub struct DryRunReport {
    pub feedback: FeedbackMode,
    pub execs: u64,
    pub elapsed: Duration,
    /// Inputs whose execution contributed coverage not seen before it.
    pub new_coverage_inputs: u64,
    pub occupancy: u64,
}

impl DryRunReport {
    pub fn execs_per_sec(&self) -> f64 {
        self.execs as f64 / self.elapsed.as_secs_f64().max(1e-9)
    }
}

/// Executes `corpus` once, in order, measuring end-to-end feedback
/// throughput for the configured mode.
pub fn dry_run(
    program: &TargetProgram,
    corpus: &[Vec<u8>],
    settings: &Settings,
    max_tip: u32,
) -> Result<DryRunReport, HarnessError> {
    let feedback_config = FeedbackConfig {
        max_tip,
        bitmap_size: settings.bitmap_size,
        ..FeedbackConfig::for_program(program)
    };
    let pipeline = Pipeline::new(
        program,
        settings.feedback,
        settings.pipeline,
        settings.elastic(),
        feedback_config,
        settings.limits(),
    );
    let mut scratch = pipeline.make_bitmap();
    let mut global = pipeline.make_bitmap();
    let mut new_coverage_inputs = 0u64;
    let start = Instant::now();
    for input in corpus {
        pipeline.run(program, input, &mut scratch, |_, _| {})?;
        if has_new_bits(&scratch, &mut global).expect("matching bitmaps") == NewBits::NewCoverage
        {
            new_coverage_inputs += 1;
        }
    }
    let elapsed = start.elapsed();
    Ok(DryRunReport {
        feedback: settings.feedback,
        execs: corpus.len() as u64,
        elapsed,
        new_coverage_inputs,
        occupancy: global.occupancy(),
    })
}

#[derive(Debug, Clone)]
pub struct CoverageDiff {
    pub a: DryRunReport,
    pub b: DryRunReport,
    /// Inputs contributing new coverage under A but not B, and vice versa.
    pub new_only_a: u64,
    pub new_only_b: u64,
    pub new_both: u64,
}

/// Replays one corpus under two feedback modes and contrasts which inputs
/// each mode would have retained.
pub fn coverage_diff(
    program: &TargetProgram,
    corpus: &[Vec<u8>],
    settings: &Settings,
    mode_a: FeedbackMode,
    mode_b: FeedbackMode,
    max_tip: u32,
) -> Result<CoverageDiff, HarnessError> {
    let flags = |mode: FeedbackMode| -> Result<(DryRunReport, Vec<bool>), HarnessError> {
        let mut s = settings.clone();
        s.feedback = mode;
        let feedback_config = FeedbackConfig {
            max_tip,
            bitmap_size: s.bitmap_size,
            ..FeedbackConfig::for_program(program)
        };
        let pipeline = Pipeline::new(
            program,
            mode,
            s.pipeline,
            s.elastic(),
            feedback_config,
            s.limits(),
        );
        let mut scratch = pipeline.make_bitmap();
        let mut global = pipeline.make_bitmap();
        let mut flags = Vec::with_capacity(corpus.len());
        let start = Instant::now();
        for input in corpus {
            pipeline.run(program, input, &mut scratch, |_, _| {})?;
            flags.push(
                has_new_bits(&scratch, &mut global).expect("matching bitmaps")
                    == NewBits::NewCoverage,
            );
        }
        let elapsed = start.elapsed();
        Ok((
            DryRunReport {
                feedback: mode,
                execs: corpus.len() as u64,
                elapsed,
                new_coverage_inputs: flags.iter().filter(|&&f| f).count() as u64,
                occupancy: global.occupancy(),
            },
            flags,
        ))
    };
    let (a, fa) = flags(mode_a)?;
    let (b, fb) = flags(mode_b)?;
    let mut new_only_a = 0;
    let mut new_only_b = 0;
    let mut new_both = 0;
    for (&x, &y) in fa.iter().zip(&fb) {
        match (x, y) {
            (true, true) => new_both += 1,
            (true, false) => new_only_a += 1,
            (false, true) => new_only_b += 1,
            (false, false) => {}
        }
    }
    Ok(CoverageDiff {
        a,
        b,
        new_only_a,
        new_only_b,
        new_both,
    })
}

/// Sampled dynamic leaf call-chain depths over a corpus.
pub fn call_chain_histogram(
    program: &TargetProgram,
    corpus: &[Vec<u8>],
    limits: &ExecLimits,
) -> BTreeMap<u32, u64> {
    let mut hist = BTreeMap::new();
    for input in corpus {
        let outcome = execute(program, input, &mut NullTraceSink, |_, _| {}, limits);
        for depth in outcome.call_chains {
            *hist.entry(depth).or_insert(0) += 1;
        }
    }
    hist
}

pub fn print_summaries(out: &mut impl Write, summaries: &[TrialSummary]) -> std::io::Result<()> {
    for s in summaries {
        writeln!(
            out,
            "trial seed={}: execs={} edges={} occupancy={} queue={} crashes={} hangs={}",
            s.rng_seed, s.execs, s.edges_covered, s.occupancy, s.queue_len, s.crashes, s.hangs
        )?;
    }
    if summaries.len() > 1 {
        let (em, es) = mean_stddev(summaries.iter().map(|s| s.edges_covered));
        let (cm, cs) = mean_stddev(summaries.iter().map(|s| s.crashes));
        writeln!(out, "edges covered: mean={em:.1} stddev={es:.1}")?;
        writeln!(out, "unique crashes: mean={cm:.2} stddev={cs:.2}")?;
    }
    Ok(())
}
