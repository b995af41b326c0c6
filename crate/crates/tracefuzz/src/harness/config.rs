//! Campaign settings with layered resolution: built-in defaults, then a
//! key=value config file, then `TRACEFUZZ_*` environment variables, then
//! command-line flags. Later layers win.

use std::path::Path;

use thiserror::Error;

use crate::fuzzer::campaign::DetMode;
use crate::pipeline::{ElasticParams, FeedbackMode, PipelineMode};
use crate::vm::ExecLimits;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file: {0}")]
    Io(#[from] std::io::Error),
    #[error("config line {line}: expected key=value, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown setting `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
}

/// Slice length: fixed, or calibrated against the target before fuzzing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaxTip {
    Auto,
    Fixed(u32),
}

#[derive(Debug, Clone)]
pub struct Settings {
    pub feedback: FeedbackMode,
    pub pipeline: PipelineMode,
    pub max_tip: MaxTip,
    pub bitmap_size: usize,
    pub step_budget: u64,
    pub call_depth: usize,
    pub rng_seed: u64,
    pub execs: u64,
    pub stats_every: u64,
    pub det_stages: DetMode,
    pub havoc_rounds: u32,
    pub splice_rounds: u32,
    pub elastic_min: u64,
    pub elastic_max: u64,
    pub elastic_increment: u64,
    pub elastic_threshold: usize,
    /// Probe budget used when `max_tip = auto`.
    pub calibration_execs: u64,
}

impl Default for Settings {
    fn default() -> Self {
        let elastic = ElasticParams::default();
        let limits = ExecLimits::default();
        Self {
            feedback: FeedbackMode::PathSlice,
            pipeline: PipelineMode::Sequential,
            max_tip: MaxTip::Fixed(crate::feedback::DEFAULT_MAX_TIP),
            bitmap_size: crate::feedback::DEFAULT_BITMAP_SIZE,
            step_budget: limits.step_budget,
            call_depth: limits.call_depth,
            rng_seed: 1,
            execs: 100_000,
            stats_every: 10_000,
            det_stages: DetMode::Auto,
            havoc_rounds: 64,
            splice_rounds: 16,
            elastic_min: elastic.min_interval,
            elastic_max: elastic.max_interval,
            elastic_increment: elastic.increment,
            elastic_threshold: elastic.backlog_threshold,
            calibration_execs: 20_000,
        }
    }
}

pub const KEYS: &[&str] = &[
    "feedback",
    "pipeline",
    "max_tip",
    "bitmap_size",
    "step_budget",
    "call_depth",
    "rng_seed",
    "execs",
    "stats_every",
    "det_stages",
    "havoc_rounds",
    "splice_rounds",
    "elastic_min",
    "elastic_max",
    "elastic_increment",
    "elastic_threshold",
    "calibration_execs",
];

pub fn parse_feedback(s: &str) -> Result<FeedbackMode, String> {
    match s {
        "path-slice" => Ok(FeedbackMode::PathSlice),
        "edge-pt" => Ok(FeedbackMode::EdgePt),
        "direct-edge" => Ok(FeedbackMode::DirectEdge),
        _ => Err("expected path-slice, edge-pt, or direct-edge".into()),
    }
}

pub fn feedback_name(mode: FeedbackMode) -> &'static str {
    match mode {
        FeedbackMode::PathSlice => "path-slice",
        FeedbackMode::EdgePt => "edge-pt",
        FeedbackMode::DirectEdge => "direct-edge",
    }
}

pub fn parse_pipeline(s: &str) -> Result<PipelineMode, String> {
    match s {
        "sequential" => Ok(PipelineMode::Sequential),
        "parallel" => Ok(PipelineMode::Parallel),
        _ => Err("expected sequential or parallel".into()),
    }
}

fn parse_det(s: &str) -> Result<DetMode, String> {
    match s {
        "auto" => Ok(DetMode::Auto),
        "always" => Ok(DetMode::Always),
        "never" => Ok(DetMode::Never),
        _ => Err("expected auto, always, or never".into()),
    }
}

fn parse_max_tip(s: &str) -> Result<MaxTip, String> {
    if s == "auto" {
        return Ok(MaxTip::Auto);
    }
    let n: u32 = s.parse().map_err(|_| "expected a number or `auto`".to_string())?;
    if n == 0 {
        return Err("must be at least 1".into());
    }
    Ok(MaxTip::Fixed(n))
}

impl Settings {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |reason: &str| ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            reason: reason.to_string(),
        };
        macro_rules! num {
            () => {
                value.parse().map_err(|_| bad("expected a number"))?
            };
        }
        match key {
            "feedback" => self.feedback = parse_feedback(value).map_err(|e| bad(&e))?,
            "pipeline" => self.pipeline = parse_pipeline(value).map_err(|e| bad(&e))?,
            "max_tip" => self.max_tip = parse_max_tip(value).map_err(|e| bad(&e))?,
            "bitmap_size" => {
                let n: usize = num!();
                if !n.is_power_of_two() || n < 8 {
                    return Err(bad("must be a power of two >= 8"));
                }
                self.bitmap_size = n;
            }
            "step_budget" => self.step_budget = num!(),
            "call_depth" => self.call_depth = num!(),
            "rng_seed" => self.rng_seed = num!(),
            "execs" => self.execs = num!(),
            "stats_every" => {
                let n: u64 = num!();
                if n == 0 {
                    return Err(bad("must be at least 1"));
                }
                self.stats_every = n;
            }
            "det_stages" => self.det_stages = parse_det(value).map_err(|e| bad(&e))?,
            "havoc_rounds" => self.havoc_rounds = num!(),
            "splice_rounds" => self.splice_rounds = num!(),
            "elastic_min" => self.elastic_min = num!(),
            "elastic_max" => self.elastic_max = num!(),
            "elastic_increment" => self.elastic_increment = num!(),
            "elastic_threshold" => self.elastic_threshold = num!(),
            "calibration_execs" => self.calibration_execs = num!(),
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Loads `# comment`-tolerant key=value lines from `path`.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path)?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: lineno + 1,
                text: raw.to_string(),
            })?;
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Applies `TRACEFUZZ_<KEY>` environment variables.
    pub fn apply_env(&mut self) -> Result<(), ConfigError> {
        for key in KEYS {
            let var = format!("TRACEFUZZ_{}", key.to_uppercase());
            if let Ok(value) = std::env::var(&var) {
                self.apply(key, &value)?;
            }
        }
        Ok(())
    }

    pub fn elastic(&self) -> ElasticParams {
        ElasticParams {
            min_interval: self.elastic_min,
            max_interval: self.elastic_max,
            increment: self.elastic_increment,
            backlog_threshold: self.elastic_threshold,
        }
    }

    pub fn limits(&self) -> ExecLimits {
        ExecLimits {
            step_budget: self.step_budget,
            call_depth: self.call_depth,
        }
    }

    /// The campaign configuration, with `max_tip` already resolved.
    pub fn campaign_config(&self, max_tip: u32) -> crate::fuzzer::CampaignConfig {
        crate::fuzzer::CampaignConfig {
            feedback: self.feedback,
            pipeline_mode: self.pipeline,
            elastic: self.elastic(),
            max_tip,
            literal_encoding: false,
            bitmap_size: self.bitmap_size,
            limits: self.limits(),
            rng_seed: self.rng_seed,
            det_stages: self.det_stages,
            stats_every: self.stats_every,
            havoc_rounds: self.havoc_rounds,
            splice_rounds: self.splice_rounds,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn file_then_direct_override() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "# a comment\nfeedback = edge-pt\nexecs=500  # trailing").unwrap();
        let mut s = Settings::default();
        s.apply_file(f.path()).unwrap();
        assert_eq!(s.feedback, FeedbackMode::EdgePt);
        assert_eq!(s.execs, 500);
        s.apply("feedback", "path-slice").unwrap();
        assert_eq!(s.feedback, FeedbackMode::PathSlice);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let mut s = Settings::default();
        assert!(matches!(
            s.apply("no_such_key", "1"),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            s.apply("bitmap_size", "1000"),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(matches!(
            s.apply("max_tip", "zero"),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(s.apply("max_tip", "auto").is_ok());
        assert_eq!(s.max_tip, MaxTip::Auto);
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "execs=5\nnot a kv line").unwrap();
        let mut s = Settings::default();
        match s.apply_file(f.path()) {
            Err(ConfigError::Syntax { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected syntax error, got {other:?}"),
        }
    }

    #[test]
    fn every_key_is_applicable() {
        let mut s = Settings::default();
        for key in KEYS {
            let value = match *key {
                "feedback" => "direct-edge",
                "pipeline" => "parallel",
                "max_tip" => "16",
                "det_stages" => "never",
                "bitmap_size" => "1024",
                _ => "64",
            };
            s.apply(key, value).unwrap_or_else(|e| panic!("{key}: {e}"));
        }
    }
}
