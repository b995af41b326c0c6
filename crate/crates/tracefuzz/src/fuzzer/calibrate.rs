//! Per-target slice-length calibration.
//!
//! A slice length is acceptable when the bitmap stops discovering at a high
//! rate once exploration settles (occupancy growth over the second half of a
//! probe run below 30%) and when distinct slice hashes rarely collapse onto
//! the same bitmap slot (< 1% on the retained corpus). Among acceptable
//! candidates the longest wins: longer slices mean fewer bitmap updates.

use std::collections::HashSet;

use crate::feedback::{Bitmap, BitmapMode, FeedbackConfig, SliceHasher};
use crate::fuzzer::campaign::{Campaign, CampaignConfig};
use crate::pipeline::FeedbackMode;
use crate::vm::{execute, TargetProgram, VecTraceSink};

pub const CANDIDATES: [u32; 6] = [2, 4, 8, 16, 32, 64];
const MAX_GROWTH: f64 = 0.30;
const MAX_COLLISION: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct CandidateReport {
    pub max_tip: u32,
    pub occupancy_half: u64,
    pub occupancy_full: u64,
    /// Second-half occupancy growth relative to the halfway point.
    pub growth: f64,
    /// Fraction of distinct slice hashes lost to index collisions.
    pub collision_rate: f64,
    pub qualifies: bool,
}

#[derive(Debug, Clone)]
pub struct CalibrationReport {
    pub chosen: u32,
    pub candidates: Vec<CandidateReport>,
}

/// Probes each candidate slice length with a short campaign and picks the
/// largest one that passes both saturation and collision checks. Falls back
/// to the smallest candidate when nothing qualifies.
pub fn calibrate_max_tip(
    program: &TargetProgram,
    seeds: &[Vec<u8>],
    budget_execs: u64,
    base: &CampaignConfig,
) -> CalibrationReport {
    let mut candidates = Vec::new();
    for &max_tip in &CANDIDATES {
        let config = CampaignConfig {
            feedback: FeedbackMode::PathSlice,
            max_tip,
            ..base.clone()
        };
        let mut campaign = Campaign::new(program.clone(), seeds.to_vec(), config.clone());
        campaign.run(budget_execs / 2);
        let occupancy_half = campaign.occupancy();
        campaign.run(budget_execs);
        let occupancy_full = campaign.occupancy();
        let growth =
            (occupancy_full - occupancy_half) as f64 / (occupancy_half.max(1)) as f64;

        let corpus: Vec<Vec<u8>> = campaign.queue.iter().map(|s| s.data.clone()).collect();
        let collision_rate = collision_rate(program, &corpus, &config);

        candidates.push(CandidateReport {
            max_tip,
            occupancy_half,
            occupancy_full,
            growth,
            collision_rate,
            qualifies: growth < MAX_GROWTH && collision_rate < MAX_COLLISION,
        });
    }
    let chosen = candidates
        .iter()
        .rev()
        .find(|c| c.qualifies)
        .map(|c| c.max_tip)
        .unwrap_or(CANDIDATES[0]);
    CalibrationReport { chosen, candidates }
}

/// Fraction of distinct slice hashes that share a bitmap slot with a
/// different hash, measured over fresh executions of `corpus`.
fn collision_rate(program: &TargetProgram, corpus: &[Vec<u8>], config: &CampaignConfig) -> f64 {
    let feedback_config = FeedbackConfig {
        max_tip: config.max_tip,
        bitmap_size: config.bitmap_size,
        literal_encoding: config.literal_encoding,
        ..FeedbackConfig::for_program(program)
    };
    let mut hashes = HashSet::new();
    let mut indices = HashSet::new();
    let mut bitmap = Bitmap::new(BitmapMode::BitGranular, config.bitmap_size);
    for input in corpus {
        let mut sink = VecTraceSink::default();
        execute(program, input, &mut sink, |_, _| {}, &config.limits);
        let mut hasher = SliceHasher::new(&feedback_config);
        let mut observe = |h: u64, i: u64| {
            hashes.insert(h);
            indices.insert(i);
        };
        for p in &sink.0 {
            hasher.update_observed(p, &mut bitmap, &mut observe);
        }
        hasher.finalize_observed(&mut bitmap, &mut observe);
        bitmap.clear();
    }
    if hashes.is_empty() {
        return 0.0;
    }
    (hashes.len() - indices.len()) as f64 / hashes.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vm::{build_benchmark, seed_corpus, Benchmark};

    #[test]
    fn calibration_returns_a_candidate_and_reports_all() {
        let program = build_benchmark(Benchmark::Maze);
        let report = calibrate_max_tip(
            &program,
            &seed_corpus(Benchmark::Maze),
            4_000,
            &CampaignConfig::default(),
        );
        assert!(CANDIDATES.contains(&report.chosen));
        assert_eq!(report.candidates.len(), CANDIDATES.len());
        for c in &report.candidates {
            assert!(c.occupancy_full >= c.occupancy_half);
            assert!((0.0..=1.0).contains(&c.collision_rate));
        }
    }

    #[test]
    fn calibration_is_deterministic() {
        let program = build_benchmark(Benchmark::Maze);
        let run = || {
            let r = calibrate_max_tip(
                &program,
                &seed_corpus(Benchmark::Maze),
                2_000,
                &CampaignConfig::default(),
            );
            (
                r.chosen,
                r.candidates
                    .iter()
                    .map(|c| (c.occupancy_half, c.occupancy_full))
                    .collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }
}
