use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::cache::{CacheEntry, ContextCache, DEFAULT_CAPACITY};
use crate::encoders::{ContextRecord, Encoders, SensorSegment};
use crate::error::{config, contract, Result};
use crate::gating::{raw_features_unit, unit, GateDecision, HeadInput, HeadParams};
use crate::numerics::{streams, RngState};
use crate::shiftlab::Dataset;

/// One timestamped sample of a trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamEvent {
    pub index: u64,
    pub segment: SensorSegment,
    pub context_id: String,
    #[serde(default)]
    pub description: Option<String>,
    #[serde(default)]
    pub true_label: Option<usize>,
}

pub fn validate_trace(events: &[StreamEvent]) -> Result<()> {
    if events.is_empty() {
        return Err(contract("trace is empty"));
    }
    for w in events.windows(2) {
        if w[1].index <= w[0].index {
            return Err(contract(format!(
                "trace indices must increase strictly ({} then {})",
                w[0].index, w[1].index
            )));
        }
    }
    Ok(())
}

/// A trace made of consecutive blocks, one per context.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraceSpec {
    pub contexts: Vec<String>,
    /// Indices where the next block starts.
    pub switch_points: Vec<usize>,
    pub length: usize,
    pub seed: u64,
}

impl Default for TraceSpec {
    fn default() -> Self {
        Self {
            contexts: vec!["Belt".into(), "Wrist".into(), "Left pocket".into()],
            switch_points: vec![1000, 2000],
            length: 3000,
            seed: 0,
        }
    }
}

impl TraceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return Err(config("trace.length", "must be positive"));
        }
        if self.contexts.len() != self.switch_points.len() + 1 {
            return Err(config(
                "trace.switch_points",
                format!(
                    "{} contexts need {} switch points, got {}",
                    self.contexts.len(),
                    self.contexts.len().saturating_sub(1),
                    self.switch_points.len()
                ),
            ));
        }
        let mut prev = 0;
        for &p in &self.switch_points {
            if p <= prev || p >= self.length {
                return Err(config(
                    "trace.switch_points",
                    "must increase strictly and lie inside the trace",
                ));
            }
            prev = p;
        }
        Ok(())
    }
}

/// Builds a trace by drawing (with replacement) from each block's context.
pub fn make_trace(dataset: &Dataset, spec: &TraceSpec) -> Result<Vec<StreamEvent>> {
    spec.validate()?;
    let mut bounds = vec![0];
    bounds.extend(&spec.switch_points);
    bounds.push(spec.length);
    let root = RngState::new(spec.seed, streams::TRACE);
    let mut events = Vec::with_capacity(spec.length);
    for (b, name) in spec.contexts.iter().enumerate() {
        let rec = dataset
            .context_record(name)
            .ok_or_else(|| config("trace.contexts", format!("unknown context `{name}`")))?;
        let pool: Vec<&SensorSegment> = dataset.samples_in(name).collect();
        if pool.is_empty() {
            return Err(config("trace.contexts", format!("context `{name}` has no samples")));
        }
        let mut rng = root.derive(b as u64).rng();
        for i in bounds[b]..bounds[b + 1] {
            let seg = pool[rng.random_range(0..pool.len())];
            events.push(StreamEvent {
                index: i as u64,
                segment: seg.clone(),
                context_id: name.clone(),
                description: Some(rec.description.clone()),
                true_label: seg.label,
            });
        }
    }
    Ok(events)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    pub capacity: usize,
    /// Also run the identical trace with no cache.
    pub compare_uncached: bool,
    /// Untimed inferences on the first events before each pass.
    pub warmup: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            capacity: DEFAULT_CAPACITY,
            compare_uncached: true,
            warmup: 16,
        }
    }
}

/// Frozen encoders and a trained head.
#[derive(Clone, Copy)]
pub struct StreamModel<'a> {
    pub encoders: &'a Encoders<f32>,
    pub head: &'a HeadParams<f32>,
}

impl StreamModel<'_> {
    /// The full context stack: featurize, encode, normalize.
    pub fn encode_context(&self, id: &str, description: &str) -> Result<CacheEntry> {
        let rec = ContextRecord::new(id, description, self.encoders.dims.text);
        let z_c = self.encoders.context_embedding(&rec)?;
        Ok(CacheEntry {
            zc_unit: unit(&z_c),
            z_c,
        })
    }

    pub fn infer(&self, seg: &SensorSegment, ctx: &CacheEntry) -> Result<GateDecision> {
        let z_x = self.encoders.encode_sensor(seg)?;
        let raw = raw_features_unit(&z_x, &ctx.zc_unit, seg)?;
        self.head.decide(&HeadInput {
            z_x,
            z_c: ctx.z_c.clone(),
            raw,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamSample {
    pub index: u64,
    pub context_id: String,
    pub hit: bool,
    pub predicted: usize,
    pub correct: Option<bool>,
    pub alpha_context: f64,
    pub latency_ns: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PassSummary {
    pub cached: bool,
    pub samples: usize,
    pub accuracy: Option<f64>,
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    pub encoder_invocations: u64,
    pub hit_rate: f64,
    pub mean_latency_ns: f64,
    pub p95_latency_ns: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamReport {
    pub capacity: usize,
    pub cached: PassSummary,
    pub uncached: Option<PassSummary>,
    /// Per-sample agreement of the two passes, when both ran.
    pub identical_predictions: Option<bool>,
    /// Per-sample records of the cached pass.
    pub samples: Vec<StreamSample>,
    #[serde(skip)]
    pub uncached_samples: Vec<StreamSample>,
}

impl StreamReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,context_id,hit,correct,alpha_context,latency_ns\n");
        for s in &self.samples {
            let correct = match s.correct {
                Some(true) => "1",
                Some(false) => "0",
                None => "",
            };
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                s.index,
                crate::shiftlab::tiers::csv_field(&s.context_id),
                u8::from(s.hit),
                correct,
                s.alpha_context,
                s.latency_ns
            ));
        }
        out
    }
}

/// Nearest-rank percentile of unsorted values.
pub fn percentile(values: &[u64], q: f64) -> u64 {
    if values.is_empty() {
        return 0;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

fn summarize(samples: &[StreamSample], cached: bool, hits: u64, misses: u64, evictions: u64) -> PassSummary {
    let lat: Vec<u64> = samples.iter().map(|s| s.latency_ns).collect();
    let judged: Vec<bool> = samples.iter().filter_map(|s| s.correct).collect();
    let n = samples.len();
    PassSummary {
        cached,
        samples: n,
        accuracy: (!judged.is_empty())
            .then(|| judged.iter().filter(|&&c| c).count() as f64 / judged.len() as f64),
        hits,
        misses,
        evictions,
        encoder_invocations: misses,
        hit_rate: if n == 0 { 0.0 } else { hits as f64 / n as f64 },
        mean_latency_ns: lat.iter().map(|&l| l as f64).sum::<f64>() / n.max(1) as f64,
        p95_latency_ns: percentile(&lat, 0.95),
    }
}

fn record(ev: &StreamEvent, d: &GateDecision, hit: bool, latency_ns: u64) -> StreamSample {
    StreamSample {
        index: ev.index,
        context_id: ev.context_id.clone(),
        hit,
        predicted: d.y_hat,
        correct: ev.true_label.map(|y| y == d.y_hat),
        alpha_context: d.alpha[1],
        latency_ns,
    }
}

fn warm_up(model: &StreamModel<'_>, events: &[StreamEvent], n: usize) -> Result<()> {
    for ev in events.iter().take(n) {
        if let Some(desc) = &ev.description {
            let ctx = model.encode_context(&ev.context_id, desc)?;
            model.infer(&ev.segment, &ctx)?;
        }
    }
    Ok(())
}

fn cached_pass(model: &StreamModel<'_>, events: &[StreamEvent], capacity: usize) -> Result<(Vec<StreamSample>, PassSummary)> {
    let mut cache = ContextCache::new(capacity)?;
    let mut out = Vec::with_capacity(events.len());
    for ev in events {
        let t = Instant::now();
        let (ctx, hit) = cache.get_or_encode(&ev.context_id, ev.description.as_deref(), |desc| {
            model.encode_context(&ev.context_id, desc)
        })?;
        let d = model.infer(&ev.segment, ctx)?;
        let ns = t.elapsed().as_nanos() as u64;
        out.push(record(ev, &d, hit, ns));
    }
    let c = cache.counters();
    let summary = summarize(&out, true, c.hits, c.misses, c.evictions);
    Ok((out, summary))
}

fn uncached_pass(model: &StreamModel<'_>, events: &[StreamEvent]) -> Result<(Vec<StreamSample>, PassSummary)> {
    let mut out = Vec::with_capacity(events.len());
    for ev in events {
        let t = Instant::now();
        let desc = ev
            .description
            .as_deref()
            .ok_or_else(|| contract(format!("event {} has no description", ev.index)))?;
        let ctx = model.encode_context(&ev.context_id, desc)?;
        let d = model.infer(&ev.segment, &ctx)?;
        let ns = t.elapsed().as_nanos() as u64;
        out.push(record(ev, &d, false, ns));
    }
    let n = out.len() as u64;
    let summary = summarize(&out, false, 0, n, 0);
    Ok((out, summary))
}

/// Processes the trace in order with the cache and, optionally, without it.
pub fn run_stream(model: &StreamModel<'_>, events: &[StreamEvent], cfg: &StreamConfig) -> Result<StreamReport> {
    validate_trace(events)?;
    if cfg.capacity == 0 {
        return Err(config("stream.capacity", "must be positive"));
    }
    warm_up(model, events, cfg.warmup)?;
    let (uncached_samples, uncached) = if cfg.compare_uncached {
        let (s, p) = uncached_pass(model, events)?;
        (s, Some(p))
    } else {
        (Vec::new(), None)
    };
    let (samples, cached) = cached_pass(model, events, cfg.capacity)?;
    let identical_predictions = cfg.compare_uncached.then(|| {
        samples
            .iter()
            .zip(&uncached_samples)
            .all(|(a, b)| a.predicted == b.predicted && a.alpha_context.to_bits() == b.alpha_context.to_bits())
    });
    Ok(StreamReport {
        capacity: cfg.capacity,
        cached,
        uncached,
        identical_predictions,
        samples,
        uncached_samples,
    })
}
