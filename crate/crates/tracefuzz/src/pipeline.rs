//! Per-execution plumbing from the VM to a filled coverage bitmap: the
//! elastic flush controller, the trace ring producer/consumer pair, and the
//! three feedback modes.

use std::sync::atomic::{AtomicBool, Ordering};

use thiserror::Error;

use crate::codec::{encode_packet, CodecError, Packet, TraceRing};
use crate::feedback::{
    reconstruct_edges, Bitmap, BitmapMode, EdgeLabels, EdgeState, FeedbackConfig, FeedbackError,
    SliceHasher,
};
use crate::vm::{
    execute, BlockId, ExecLimits, ExecOutcome, NullTraceSink, TargetProgram, TraceSink,
};

/// What the coverage bitmap is computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeedbackMode {
    /// Slice hashes over the raw packet stream; no decoding to edges.
    PathSlice,
    /// Edges reconstructed from the packet stream, AFL hit-count map.
    EdgePt,
    /// Edges taken straight from the VM, no tracing at all; the
    /// compiler-instrumentation baseline.
    DirectEdge,
}

impl FeedbackMode {
    pub fn bitmap_mode(self) -> BitmapMode {
        match self {
            FeedbackMode::PathSlice => BitmapMode::BitGranular,
            FeedbackMode::EdgePt | FeedbackMode::DirectEdge => BitmapMode::ByteHitcount,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineMode {
    /// Producer and consumer on separate threads, concurrently.
    Parallel,
    /// Trace fully, then decode; same observable results.
    Sequential,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("trace decoding failed: {0}")]
    Codec(#[from] CodecError),
    #[error("feedback failed: {0}")]
    Feedback(#[from] FeedbackError),
    #[error("bitmap mode/size does not match the feedback mode")]
    BitmapMismatch,
}

/// AIMD control of the producer's flush interval, measured in executed
/// blocks between ring publishes.
#[derive(Debug, Clone, Copy)]
pub struct ElasticParams {
    pub min_interval: u64,
    pub max_interval: u64,
    pub increment: u64,
    /// Ring backlog (bytes) above which the producer flushes more often.
    pub backlog_threshold: usize,
}

impl Default for ElasticParams {
    fn default() -> Self {
        Self {
            min_interval: 64,
            max_interval: 65_536,
            increment: 64,
            backlog_threshold: 64 * 1024,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ElasticController {
    params: ElasticParams,
    interval: u64,
}

impl ElasticController {
    pub fn new(params: ElasticParams) -> Self {
        assert!(params.min_interval >= 1 && params.min_interval <= params.max_interval);
        Self {
            params,
            interval: params.min_interval,
        }
    }

    pub fn interval(&self) -> u64 {
        self.interval
    }

    /// One control step after a flush: back off multiplicatively while the
    /// consumer lags, otherwise lengthen the interval additively.
    pub fn adjust(&mut self, backlog: usize) -> u64 {
        if backlog > self.params.backlog_threshold {
            self.interval = (self.interval / 2).max(self.params.min_interval);
        } else {
            self.interval = (self.interval + self.params.increment).min(self.params.max_interval);
        }
        self.interval
    }
}

/// TraceSink that encodes packets and publishes them to the ring at
/// controller-chosen block boundaries.
struct RingProducer<'a> {
    ring: &'a TraceRing,
    controller: ElasticController,
    buf: Vec<u8>,
    blocks_since_flush: u64,
}

impl<'a> RingProducer<'a> {
    fn new(ring: &'a TraceRing, params: ElasticParams) -> Self {
        Self {
            ring,
            controller: ElasticController::new(params),
            buf: Vec::with_capacity(256),
            blocks_since_flush: 0,
        }
    }

    fn flush(&mut self) {
        self.ring.publish(&self.buf);
        self.buf.clear();
        self.blocks_since_flush = 0;
        self.controller.adjust(self.ring.backlog());
    }
}

impl TraceSink for RingProducer<'_> {
    fn packet(&mut self, p: &Packet) {
        encode_packet(p, &mut self.buf);
    }

    fn step(&mut self) {
        self.blocks_since_flush += 1;
        if self.blocks_since_flush >= self.controller.interval() {
            self.flush();
        }
    }
}

/// One fuzzing execution: runs the target, computes coverage into `bitmap`
/// (which is cleared first), and reports ground-truth edges to `edge`
/// regardless of feedback mode.
pub struct Pipeline {
    pub feedback: FeedbackMode,
    pub mode: PipelineMode,
    pub elastic: ElasticParams,
    pub config: FeedbackConfig,
    pub limits: ExecLimits,
    labels: EdgeLabels,
}

impl Pipeline {
    pub fn new(
        program: &TargetProgram,
        feedback: FeedbackMode,
        mode: PipelineMode,
        elastic: ElasticParams,
        config: FeedbackConfig,
        limits: ExecLimits,
    ) -> Self {
        Self {
            feedback,
            mode,
            elastic,
            config,
            limits,
            labels: EdgeLabels::for_program(program, config.bitmap_size),
        }
    }

    pub fn make_bitmap(&self) -> Bitmap {
        Bitmap::new(self.feedback.bitmap_mode(), self.config.bitmap_size)
    }

    pub fn run(
        &self,
        program: &TargetProgram,
        input: &[u8],
        bitmap: &mut Bitmap,
        mut edge: impl FnMut(BlockId, BlockId) + Send,
    ) -> Result<ExecOutcome, PipelineError> {
        if bitmap.mode() != self.feedback.bitmap_mode()
            || bitmap.size() != self.config.bitmap_size
        {
            return Err(PipelineError::BitmapMismatch);
        }
        bitmap.clear();
        match self.feedback {
            FeedbackMode::DirectEdge => {
                let mut state = EdgeState::default();
                state.update(&self.labels, program.entry(), bitmap);
                let outcome = execute(
                    program,
                    input,
                    &mut NullTraceSink,
                    |a, b| {
                        state.update(&self.labels, b, bitmap);
                        edge(a, b);
                    },
                    &self.limits,
                );
                Ok(outcome)
            }
            FeedbackMode::PathSlice | FeedbackMode::EdgePt => match self.mode {
                PipelineMode::Sequential => self.run_sequential(program, input, bitmap, edge),
                PipelineMode::Parallel => self.run_parallel(program, input, bitmap, edge),
            },
        }
    }

    fn apply_packets(
        &self,
        program: &TargetProgram,
        packets: &[Packet],
        bitmap: &mut Bitmap,
    ) -> Result<(), PipelineError> {
        debug_assert_eq!(self.feedback, FeedbackMode::EdgePt);
        let edges = reconstruct_edges(program, packets)?;
        let mut state = EdgeState::default();
        state.update(&self.labels, program.entry(), bitmap);
        for (_, b) in edges {
            state.update(&self.labels, b, bitmap);
        }
        Ok(())
    }

    fn run_sequential(
        &self,
        program: &TargetProgram,
        input: &[u8],
        bitmap: &mut Bitmap,
        edge: impl FnMut(BlockId, BlockId) + Send,
    ) -> Result<ExecOutcome, PipelineError> {
        let ring = TraceRing::with_capacity(4_096);
        let mut producer = RingProducer::new(&ring, self.elastic);
        let outcome = execute(program, input, &mut producer, edge, &self.limits);
        producer.flush();
        match self.feedback {
            FeedbackMode::PathSlice => {
                // The stream is complete, so one in-place pass consumes it
                // all; no packet materialization, no copy.
                let mut hasher = SliceHasher::new(&self.config);
                let mut err = None;
                ring.consume_in_place(|bytes| match hasher.update_bytes(bytes, bitmap) {
                    Ok(used) => {
                        debug_assert_eq!(used, bytes.len());
                        used
                    }
                    Err(e) => {
                        err = Some(e);
                        bytes.len()
                    }
                });
                if let Some(e) = err {
                    return Err(PipelineError::Codec(e));
                }
                hasher.finalize(bitmap);
            }
            FeedbackMode::EdgePt => {
                let mut all = Vec::new();
                loop {
                    let packets = ring.consume().map_err(PipelineError::Codec)?;
                    if packets.is_empty() {
                        break;
                    }
                    all.extend(packets);
                }
                self.apply_packets(program, &all, bitmap)?;
            }
            FeedbackMode::DirectEdge => unreachable!(),
        }
        debug_assert_eq!(ring.backlog(), 0);
        Ok(outcome)
    }

    fn run_parallel(
        &self,
        program: &TargetProgram,
        input: &[u8],
        bitmap: &mut Bitmap,
        edge: impl FnMut(BlockId, BlockId) + Send,
    ) -> Result<ExecOutcome, PipelineError> {
        let ring = TraceRing::with_capacity(4_096);
        let done = AtomicBool::new(false);
        let mut outcome = None;
        let mut consumer_result: Result<(), PipelineError> = Ok(());

        std::thread::scope(|scope| {
            let producer_handle = scope.spawn(|| {
                let mut producer = RingProducer::new(&ring, self.elastic);
                let out = execute(program, input, &mut producer, edge, &self.limits);
                producer.flush();
                // Publish-then-flag: a consumer that observes `done` is
                // guaranteed to observe the final pt_off as well.
                done.store(true, Ordering::Release);
                out
            });

            consumer_result = (|| {
                match self.feedback {
                    FeedbackMode::PathSlice => {
                        let mut hasher = SliceHasher::new(&self.config);
                        let mut tail = Vec::new();
                        loop {
                            let finished = done.load(Ordering::Acquire);
                            let got = ring.consume_raw(&mut tail);
                            if !tail.is_empty() {
                                let used = hasher
                                    .update_bytes(&tail, bitmap)
                                    .map_err(PipelineError::Codec)?;
                                tail.drain(..used);
                            }
                            if finished && ring.backlog() == 0 && tail.is_empty() {
                                break;
                            }
                            if got == 0 {
                                std::thread::yield_now();
                            }
                        }
                        hasher.finalize(bitmap);
                    }
                    FeedbackMode::EdgePt => {
                        let mut all = Vec::new();
                        loop {
                            let finished = done.load(Ordering::Acquire);
                            let packets = ring.consume().map_err(PipelineError::Codec)?;
                            all.extend(packets);
                            if finished && ring.backlog() == 0 {
                                break;
                            }
                        }
                        self.apply_packets(program, &all, bitmap)?;
                    }
                    FeedbackMode::DirectEdge => unreachable!(),
                }
                Ok(())
            })();

            outcome = Some(producer_handle.join().expect("producer panicked"));
        });

        consumer_result?;
        Ok(outcome.expect("scope joined"))
    }
}
