//! The fuzzing loop: queue scheduling, mutation stages, coverage-driven
//! seed retention, crash/hang triage, and campaign statistics.

use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::feedback::{has_new_bits, Bitmap, FeedbackConfig, NewBits, DEFAULT_BITMAP_SIZE};
use crate::fuzzer::mutate::{deterministic_mutations, havoc, splice};
use crate::pipeline::{ElasticParams, FeedbackMode, Pipeline, PipelineMode};
use crate::vm::{BlockId, ExecLimits, ExecStatus, TargetProgram, TrapKind};

/// Whether to run the deterministic stage walk on newly picked seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetMode {
    /// Deterministic stages only for short inputs, where the walk is cheap.
    Auto,
    Always,
    Never,
}

const DET_AUTO_MAX_LEN: usize = 32;
/// Virtual clock rate: executed VM blocks per reported millisecond. Keeps
/// campaign trajectories and their logs a pure function of the seed.
const STEPS_PER_MS: u64 = 1_000;

#[derive(Debug, Clone)]
pub struct CampaignConfig {
    pub feedback: FeedbackMode,
    pub pipeline_mode: PipelineMode,
    pub elastic: ElasticParams,
    pub max_tip: u32,
    pub literal_encoding: bool,
    pub bitmap_size: usize,
    pub limits: ExecLimits,
    pub rng_seed: u64,
    pub det_stages: DetMode,
    /// Record one stats row every this many executions.
    pub stats_every: u64,
    pub havoc_rounds: u32,
    pub splice_rounds: u32,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            feedback: FeedbackMode::PathSlice,
            pipeline_mode: PipelineMode::Sequential,
            elastic: ElasticParams::default(),
            max_tip: crate::feedback::DEFAULT_MAX_TIP,
            literal_encoding: false,
            bitmap_size: DEFAULT_BITMAP_SIZE,
            limits: ExecLimits::default(),
            rng_seed: 1,
            det_stages: DetMode::Auto,
            stats_every: 10_000,
            havoc_rounds: 64,
            splice_rounds: 16,
        }
    }
}

/// A retained queue entry.
#[derive(Debug, Clone)]
pub struct Seed {
    pub id: usize,
    pub data: Vec<u8>,
    /// Mutation stage that produced it; "seed" for the initial corpus.
    pub op: &'static str,
    /// Queue id of the parent, if any.
    pub src: Option<usize>,
    pub exec_index: u64,
    pub steps: u64,
    pub tnt_total: u64,
    pub favored: bool,
    pub was_fuzzed: bool,
    /// Bitmap slots this entry covers; used for favored selection.
    slots: Vec<u64>,
}

/// A deduplicated crash or hang.
#[derive(Debug, Clone)]
pub struct Artifact {
    pub data: Vec<u8>,
    pub op: &'static str,
    pub src: Option<usize>,
    pub exec_index: u64,
    /// Stable triage label, e.g. `stack-exhaustion.block12`.
    pub label: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatsRow {
    pub exec_index: u64,
    pub wall_ms: u64,
    pub ground_truth_edges_covered: u64,
    pub bitmap_occupancy: u64,
    pub queue_len: u64,
    pub crashes: u64,
    pub hangs: u64,
}

pub struct Campaign {
    program: TargetProgram,
    pipeline: Pipeline,
    config: CampaignConfig,
    global: Bitmap,
    scratch: Bitmap,
    rng: ChaCha8Rng,
    pub queue: Vec<Seed>,
    pub crashes: Vec<Artifact>,
    pub hangs: Vec<Artifact>,
    pub stats: Vec<StatsRow>,
    /// Histogram of sampled dynamic leaf call-chain depths.
    pub call_chain_hist: BTreeMap<u32, u64>,
    edges: HashSet<(BlockId, BlockId)>,
    crash_keys: HashSet<(TrapKind, BlockId)>,
    hang_keys: HashSet<BlockId>,
    top_rated: BTreeMap<u64, usize>,
    cursor: usize,
    execs: u64,
    steps_total: u64,
    seeds_pending: Vec<Vec<u8>>,
}

impl Campaign {
    pub fn new(program: TargetProgram, seeds: Vec<Vec<u8>>, config: CampaignConfig) -> Self {
        assert!(!seeds.is_empty(), "campaign needs at least one seed");
        let feedback_config = FeedbackConfig {
            max_tip: config.max_tip,
            bitmap_size: config.bitmap_size,
            literal_encoding: config.literal_encoding,
            ..FeedbackConfig::for_program(&program)
        };
        let pipeline = Pipeline::new(
            &program,
            config.feedback,
            config.pipeline_mode,
            config.elastic,
            feedback_config,
            config.limits,
        );
        let global = pipeline.make_bitmap();
        let scratch = pipeline.make_bitmap();
        let rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        Self {
            program,
            pipeline,
            config,
            global,
            scratch,
            rng,
            queue: Vec::new(),
            crashes: Vec::new(),
            hangs: Vec::new(),
            stats: Vec::new(),
            call_chain_hist: BTreeMap::new(),
            edges: HashSet::new(),
            crash_keys: HashSet::new(),
            hang_keys: HashSet::new(),
            top_rated: BTreeMap::new(),
            cursor: 0,
            execs: 0,
            steps_total: 0,
            seeds_pending: seeds,
        }
    }

    pub fn execs(&self) -> u64 {
        self.execs
    }

    pub fn wall_ms(&self) -> u64 {
        self.steps_total / STEPS_PER_MS
    }

    pub fn occupancy(&self) -> u64 {
        self.global.occupancy()
    }

    pub fn edges_covered(&self) -> u64 {
        self.edges.len() as u64
    }

    pub fn global_bitmap(&self) -> &Bitmap {
        &self.global
    }

    pub fn program(&self) -> &TargetProgram {
        &self.program
    }

    pub fn config(&self) -> &CampaignConfig {
        &self.config
    }

    /// Whether any executed input has ever transitioned into `block`.
    pub fn reached_block(&self, block: BlockId) -> bool {
        self.edges.iter().any(|&(_, b)| b == block)
    }

    /// Runs until `until_execs` total executions have been performed.
    pub fn run(&mut self, until_execs: u64) {
        // The initial corpus is executed first and retained unconditionally.
        while !self.seeds_pending.is_empty() && self.execs < until_execs {
            let data = self.seeds_pending.remove(0);
            self.ingest(data, "seed", None, true);
        }
        while self.execs < until_execs && !self.queue.is_empty() {
            let idx = self.schedule_next();
            self.fuzz_one(idx, until_execs);
        }
        self.record_stats_row(true);
    }

    fn schedule_next(&mut self) -> usize {
        loop {
            if self.cursor >= self.queue.len() {
                self.cursor = 0;
            }
            let idx = self.cursor;
            self.cursor += 1;
            let s = &self.queue[idx];
            let skip_pct = if s.favored {
                0
            } else if s.was_fuzzed {
                95
            } else {
                75
            };
            if skip_pct == 0 || self.rng.gen_range(0..100) >= skip_pct {
                return idx;
            }
        }
    }

    fn det_enabled(&self, len: usize) -> bool {
        match self.config.det_stages {
            DetMode::Always => true,
            DetMode::Never => false,
            DetMode::Auto => len <= DET_AUTO_MAX_LEN,
        }
    }

    fn fuzz_one(&mut self, idx: usize, until_execs: u64) {
        let data = self.queue[idx].data.clone();

        if !self.queue[idx].was_fuzzed && self.det_enabled(data.len()) {
            for (mutated, op) in deterministic_mutations(&data) {
                if self.execs >= until_execs {
                    return;
                }
                self.ingest(mutated, op, Some(idx), false);
            }
        }

        for _ in 0..self.config.havoc_rounds {
            if self.execs >= until_execs {
                return;
            }
            let mutated = havoc(&mut self.rng, &data);
            self.ingest(mutated, "havoc", Some(idx), false);
        }

        if self.queue.len() > 1 {
            for _ in 0..self.config.splice_rounds {
                if self.execs >= until_execs {
                    return;
                }
                let other = self.rng.gen_range(0..self.queue.len());
                let mutated = splice(&mut self.rng, &data, &self.queue[other].data);
                self.ingest(mutated, "splice", Some(idx), false);
            }
        }

        self.queue[idx].was_fuzzed = true;
    }

    /// Executes one input, judges the result, and updates all campaign
    /// state. `keep` forces queue retention (initial corpus).
    fn ingest(&mut self, data: Vec<u8>, op: &'static str, src: Option<usize>, keep: bool) {
        let outcome = {
            let edges = &mut self.edges;
            self.pipeline
                .run(&self.program, &data, &mut self.scratch, |a, b| {
                    edges.insert((a, b));
                })
                .expect("self-produced trace must decode")
        };
        self.execs += 1;
        self.steps_total += outcome.steps;
        for &depth in &outcome.call_chains {
            *self.call_chain_hist.entry(depth).or_insert(0) += 1;
        }

        let new = has_new_bits(&self.scratch, &mut self.global).expect("matching bitmaps");

        match outcome.status {
            ExecStatus::Crash(kind) => {
                if self.crash_keys.insert((kind, outcome.final_block)) {
                    self.crashes.push(Artifact {
                        data,
                        op,
                        src: src.map(|i| self.queue[i].id),
                        exec_index: self.execs,
                        label: format!("{kind}.block{}", outcome.final_block),
                    });
                }
            }
            ExecStatus::Hang => {
                if self.hang_keys.insert(outcome.final_block) {
                    self.hangs.push(Artifact {
                        data,
                        op,
                        src: src.map(|i| self.queue[i].id),
                        exec_index: self.execs,
                        label: format!("hang.block{}", outcome.final_block),
                    });
                }
            }
            ExecStatus::Exit(_) => {
                if keep || new == NewBits::NewCoverage {
                    self.add_to_queue(data, op, src, &outcome);
                }
            }
        }

        self.record_stats_row(false);
    }

    fn add_to_queue(
        &mut self,
        data: Vec<u8>,
        op: &'static str,
        src: Option<usize>,
        outcome: &crate::vm::ExecOutcome,
    ) {
        let id = self.queue.len();
        let slots = self.scratch.touched_slots();
        self.queue.push(Seed {
            id,
            data,
            op,
            src: src.map(|i| self.queue[i].id),
            exec_index: self.execs,
            steps: outcome.steps,
            tnt_total: outcome.tnt_total,
            favored: false,
            was_fuzzed: false,
            slots,
        });

        // A seed owns a slot if it reaches it with fewer branch executions
        // (shorter path), breaking ties by speed then age.
        let rank = |s: &Seed| (s.tnt_total, s.steps, s.id);
        for slot in self.queue[id].slots.clone() {
            let challenger = rank(&self.queue[id]);
            match self.top_rated.get(&slot) {
                Some(&holder) if rank(&self.queue[holder]) <= challenger => {}
                _ => {
                    self.top_rated.insert(slot, id);
                }
            }
        }
        for s in &mut self.queue {
            s.favored = false;
        }
        for &idx in self.top_rated.values() {
            self.queue[idx].favored = true;
        }
    }

    fn record_stats_row(&mut self, force: bool) {
        let due = force || self.execs % self.config.stats_every == 0;
        if !due {
            return;
        }
        let row = StatsRow {
            exec_index: self.execs,
            wall_ms: self.wall_ms(),
            ground_truth_edges_covered: self.edges.len() as u64,
            bitmap_occupancy: self.global.occupancy(),
            queue_len: self.queue.len() as u64,
            crashes: self.crashes.len() as u64,
            hangs: self.hangs.len() as u64,
        };
        if self.stats.last() != Some(&row) {
            self.stats.push(row);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vm::{build_benchmark, seed_corpus, Benchmark};

    fn quick_config(seed: u64) -> CampaignConfig {
        CampaignConfig {
            rng_seed: seed,
            stats_every: 1_000,
            ..CampaignConfig::default()
        }
    }

    #[test]
    fn campaign_is_deterministic_per_seed() {
        let run = || {
            let program = build_benchmark(Benchmark::ChunkName);
            let mut c = Campaign::new(
                program,
                seed_corpus(Benchmark::ChunkName),
                quick_config(7),
            );
            c.run(3_000);
            (
                c.stats.clone(),
                c.queue.iter().map(|s| s.data.clone()).collect::<Vec<_>>(),
                c.global_bitmap().clone(),
            )
        };
        let a = run();
        let b = run();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
    }

    #[test]
    fn different_seeds_diverge() {
        let run = |seed| {
            let program = build_benchmark(Benchmark::ChunkName);
            let mut c = Campaign::new(
                program,
                seed_corpus(Benchmark::ChunkName),
                quick_config(seed),
            );
            c.run(2_000);
            c.queue.iter().map(|s| s.data.clone()).collect::<Vec<_>>()
        };
        assert_ne!(run(1), run(2));
    }

    #[test]
    fn initial_corpus_is_always_retained() {
        let program = build_benchmark(Benchmark::Maze);
        let seeds = seed_corpus(Benchmark::Maze);
        let n = seeds.len();
        let mut c = Campaign::new(program, seeds.clone(), quick_config(3));
        c.run(n as u64);
        assert_eq!(c.queue.len(), n);
        for (s, original) in c.queue.iter().zip(&seeds) {
            assert_eq!(&s.data, original);
            assert_eq!(s.op, "seed");
        }
    }

    #[test]
    fn finds_the_recursion_crash_and_dedups_it() {
        let program = build_benchmark(Benchmark::DeepRecursion);
        let mut c = Campaign::new(
            program,
            seed_corpus(Benchmark::DeepRecursion),
            CampaignConfig {
                rng_seed: 11,
                max_tip: 2,
                ..quick_config(11)
            },
        );
        c.run(150_000);
        // Every stack-exhaustion crash shares one (kind, block) key, so at
        // most one artifact per kind/site no matter how often it fires.
        let exhaustion = c
            .crashes
            .iter()
            .filter(|a| a.label.starts_with("stack-exhaustion"))
            .count();
        assert!(exhaustion <= 1);
    }

    #[test]
    fn stats_rows_are_monotone() {
        let program = build_benchmark(Benchmark::ChunkName);
        let mut c = Campaign::new(
            program,
            seed_corpus(Benchmark::ChunkName),
            quick_config(5),
        );
        c.run(5_000);
        assert!(!c.stats.is_empty());
        for w in c.stats.windows(2) {
            assert!(w[1].exec_index >= w[0].exec_index);
            assert!(w[1].wall_ms >= w[0].wall_ms);
            assert!(w[1].ground_truth_edges_covered >= w[0].ground_truth_edges_covered);
        }
        assert_eq!(c.stats.last().unwrap().exec_index, 5_000);
    }

    #[test]
    fn favored_seeds_exist_and_cover_all_top_slots() {
        let program = build_benchmark(Benchmark::ChunkName);
        let mut c = Campaign::new(
            program,
            seed_corpus(Benchmark::ChunkName),
            quick_config(9),
        );
        c.run(5_000);
        assert!(c.queue.iter().any(|s| s.favored));
        for &idx in c.top_rated.values() {
            assert!(c.queue[idx].favored);
        }
    }
}
