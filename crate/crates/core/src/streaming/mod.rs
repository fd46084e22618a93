//! Streaming inference with a keyed cache of context representations.

mod cache;
mod stream;

pub use cache::{CacheCounters, CacheEntry, ContextCache, DEFAULT_CAPACITY};
pub use stream::{
    make_trace, percentile, run_stream, validate_trace, PassSummary, StreamConfig, StreamEvent, StreamModel,
    StreamReport, StreamSample, TraceSpec,
};
