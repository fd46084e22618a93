//! One function per verb. Each reads its inputs from the output directory (or the
//! configured paths) and returns the files it wrote.

use std::path::{Path, PathBuf};

use chorus_core::encoders::{ContextRecord, Dims, SensorSegment};
use chorus_core::experiments::{compute_metrics, probe_context_embeddings, run_plan_with, source_split, Metrics};
use chorus_core::gating::{head_inputs, run_customize, HeadInput, HeadParams, HeadShape};
use chorus_core::parallel::Exec;
use chorus_core::pretraining::{run_pretrain, RegimeConfig, RegimeName};
use chorus_core::shiftlab::{build_tiers, csv_field, generate_dataset_with, Dataset, ShiftReport, Tier};
use chorus_core::streaming::{make_trace, run_stream, StreamModel, StreamReport};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::io::{read_dataset, read_json, read_trace, write_atomic, write_dataset, write_json, write_trace};

/// Everything a command needs besides its own inputs.
#[derive(Clone, Debug)]
pub struct Ctx {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub force: bool,
    /// Zero every timing field so outputs are byte-comparable.
    pub canonical: bool,
    pub exec: Exec,
}

impl Ctx {
    pub fn new(cfg: RunConfig, out: impl Into<PathBuf>) -> Self {
        Self {
            cfg,
            out: out.into(),
            force: false,
            canonical: false,
            exec: Exec::available(),
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out.join(p)
        }
    }

    fn output(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn dataset(&self) -> CliResult<Dataset> {
        let ds = read_dataset(&self.resolve(&self.cfg.paths.dataset))?;
        check_dims(&ds, &self.cfg.dims)?;
        Ok(ds)
    }

    fn json<T: Serialize>(&self, name: &str, v: &T, written: &mut Vec<PathBuf>) -> CliResult<()> {
        let p = self.output(name);
        write_json(&p, v, self.force)?;
        written.push(p);
        Ok(())
    }

    fn text(&self, name: &str, s: &str, written: &mut Vec<PathBuf>) -> CliResult<()> {
        let p = self.output(name);
        write_atomic(&p, s.as_bytes(), self.force)?;
        written.push(p);
        Ok(())
    }
}

fn check_dims(ds: &Dataset, dims: &Dims) -> CliResult<()> {
    let s = &ds.spec;
    if (s.channels, s.length, s.text_dim) != (dims.channels, dims.length, dims.text) {
        return Err(CliError::config(
            "dims",
            format!(
                "dataset has {} channels x {} steps and text dim {}, dims say {} x {} and {}",
                s.channels, s.length, s.text_dim, dims.channels, dims.length, dims.text
            ),
        ));
    }
    Ok(())
}

/// Source samples and source context records, in dataset order.
fn source_view<'a>(ds: &'a Dataset, cfg: &RunConfig) -> (Vec<&'a SensorSegment>, Vec<ContextRecord>) {
    let srcs = &cfg.experiment.sources;
    let samples = ds.samples.iter().filter(|s| srcs.contains(&s.context_id)).collect();
    let ctx = ds.contexts.iter().filter(|c| srcs.contains(&c.context_id)).cloned().collect();
    (samples, ctx)
}

pub fn cmd_generate(ctx: &Ctx) -> CliResult<Vec<PathBuf>> {
    let ds = generate_dataset_with(&ctx.cfg.dataset, ctx.exec)?;
    let p = ctx.resolve(&ctx.cfg.paths.dataset);
    write_dataset(&p, &ds, ctx.force)?;
    log::info!("wrote {} records", ds.samples.len());
    Ok(vec![p])
}

pub fn cmd_shift(ctx: &Ctx) -> CliResult<Vec<PathBuf>> {
    let cfg = &ctx.cfg;
    let ds = ctx.dataset()?;
    let mut report = build_tiers(
        &ds,
        &cfg.experiment.sources,
        &cfg.experiment.targets,
        &cfg.tier_config(),
        ctx.exec,
    )?;
    if let (Some(lo), Some(hi)) = (cfg.shift.perf_low, cfg.shift.perf_high) {
        report.attach_severity(lo, hi, &cfg.shift.thresholds)?;
    }
    let mut written = Vec::new();
    let p = ctx.resolve(&cfg.paths.shift);
    write_json(&p, &report, ctx.force)?;
    written.push(p);
    ctx.text("shift.csv", &report.to_csv(), &mut written)?;
    Ok(written)
}

fn chosen_regime(ctx: &Ctx) -> CliResult<RegimeName> {
    if let Some(r) = ctx.cfg.regime.fixed() {
        return Ok(r);
    }
    let p = ctx.resolve(&ctx.cfg.paths.shift);
    if !p.exists() {
        return Err(CliError::config(
            "regime",
            "`auto` needs a shift report with a severity index; run `shift` first or name a regime",
        ));
    }
    let report: ShiftReport = read_json(&p)?;
    report.regime.ok_or_else(|| {
        CliError::config(
            "regime",
            "the shift report has no severity index; set shift.perf_low and shift.perf_high or name a regime",
        )
    })
}

pub fn cmd_pretrain(ctx: &Ctx) -> CliResult<Vec<PathBuf>> {
    let cfg = &ctx.cfg;
    let regime = chosen_regime(ctx)?;
    let ds = ctx.dataset()?;
    let (source, source_ctx) = source_view(&ds, cfg);
    let split = source_split(&source, cfg.experiment.pretrain_fraction, cfg.experiment.budget, cfg.seed)?;
    let pool: Vec<&SensorSegment> = split.pool.iter().map(|&i| source[i]).collect();
    let (encoders, report) = run_pretrain(
        &pool,
        &source_ctx,
        cfg.dims,
        &RegimeConfig::named(regime),
        &cfg.pretrain,
        cfg.seed,
    )?;
    let ck = Checkpoint {
        regime: Some(regime),
        seed: cfg.seed,
        encoders,
        head: None,
    };
    let mut written = Vec::new();
    let p = ctx.resolve(&cfg.paths.encoders);
    ck.save(&p, ctx.force)?;
    written.push(p);
    ctx.json("pretrain_report.json", &report, &mut written)?;
    Ok(written)
}

pub fn cmd_customize(ctx: &Ctx) -> CliResult<Vec<PathBuf>> {
    let cfg = &ctx.cfg;
    let mut ck = Checkpoint::load(&ctx.resolve(&cfg.paths.encoders))?;
    let ds = ctx.dataset()?;
    let (source, source_ctx) = source_view(&ds, cfg);
    let split = source_split(&source, cfg.experiment.pretrain_fraction, cfg.experiment.budget, cfg.seed)?;
    let labeled: Vec<&SensorSegment> = split.labeled.iter().map(|&i| source[i]).collect();
    let (head, report) = run_customize(
        &ck.encoders,
        &labeled,
        &source_ctx,
        cfg.head.kind,
        cfg.head.mask,
        ds.spec.num_classes,
        &cfg.customize,
        cfg.seed,
    )?;
    ck.head = Some(head);
    let mut written = Vec::new();
    let p = ctx.resolve(&cfg.paths.model);
    ck.save(&p, ctx.force)?;
    written.push(p);
    ctx.json("customize_report.json", &report, &mut written)?;
    Ok(written)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextEval {
    pub context: String,
    pub tier: Option<Tier>,
    pub samples: usize,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// True when the checkpoint had no head and a freshly initialized one was used.
    pub untrained: bool,
    pub head_kind: String,
    pub contexts: Vec<ContextEval>,
    pub mean_accuracy: f64,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("context,tier,samples,accuracy,f1,precision,recall\n");
        for c in &self.contexts {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                csv_field(&c.context),
                c.tier.map(|t| t.to_string()).unwrap_or_default(),
                c.samples,
                c.metrics.accuracy,
                c.metrics.f1,
                c.metrics.precision,
                c.metrics.recall
            ));
        }
        out
    }
}

fn untrained_head(cfg: &RunConfig, k: usize) -> CliResult<HeadParams<f32>> {
    let shape = HeadShape {
        latent: cfg.dims.latent,
        hidden: cfg.customize.hidden,
        controller_hidden: cfg.customize.controller_hidden,
        channels: cfg.dims.channels,
        num_classes: k,
    };
    Ok(HeadParams::init(
        cfg.head.kind,
        cfg.head.mask,
        shape,
        cfg.customize.dropout,
        cfg.seed,
    )?)
}

pub fn evaluate_checkpoint(ctx: &Ctx, ck: &Checkpoint, ds: &Dataset) -> CliResult<EvalReport> {
    let cfg = &ctx.cfg;
    let k = ds.spec.num_classes;
    let (head, untrained) = match &ck.head {
        Some(h) => (h.clone(), false),
        None => {
            log::warn!("checkpoint has no head; evaluating a freshly initialized one");
            (untrained_head(cfg, k)?, true)
        }
    };
    let shift_path = ctx.resolve(&cfg.paths.shift);
    let shift: Option<ShiftReport> = if shift_path.exists() { Some(read_json(&shift_path)?) } else { None };
    let mut contexts = Vec::new();
    for t in &cfg.experiment.targets {
        let segs: Vec<&SensorSegment> = ds.samples.iter().filter(|s| &s.context_id == t).collect();
        if segs.is_empty() {
            return Err(CliError::config("experiment.targets", format!("no samples for `{t}`")));
        }
        let inputs = head_inputs(&ck.encoders, &segs, &ds.contexts, ctx.exec)?;
        let refs: Vec<&HeadInput> = inputs.iter().collect();
        let preds: Vec<usize> = head.decide_batch(&refs, ctx.exec)?.iter().map(|d| d.y_hat).collect();
        let labels: Vec<usize> = segs.iter().map(|s| s.label.unwrap_or(0)).collect();
        contexts.push(ContextEval {
            context: t.clone(),
            tier: shift.as_ref().and_then(|s| s.tier_of(t)),
            samples: segs.len(),
            metrics: compute_metrics(&labels, &preds, k)?,
        });
    }
    let mean_accuracy = contexts.iter().map(|c| c.metrics.accuracy).sum::<f64>() / contexts.len().max(1) as f64;
    Ok(EvalReport {
        untrained,
        head_kind: head.kind.as_str().to_string(),
        contexts,
        mean_accuracy,
    })
}

pub fn cmd_evaluate(ctx: &Ctx) -> CliResult<Vec<PathBuf>> {
    let model = ctx.resolve(&ctx.cfg.paths.model);
    let ck = if model.exists() {
        Checkpoint::load(&model)?
    } else {
        Checkpoint::load(&ctx.resolve(&ctx.cfg.paths.encoders))?
    };
    let ds = ctx.dataset()?;
    let report = evaluate_checkpoint(ctx, &ck, &ds)?;
    let mut written = Vec::new();
    ctx.json("evaluation.json", &report, &mut written)?;
    ctx.text("evaluation.csv", &report.to_csv(), &mut written)?;
    Ok(written)
}

/// Zeroes latency fields.
pub fn canonicalize_stream(r: &mut StreamReport) {
    for s in r.samples.iter_mut().chain(r.uncached_samples.iter_mut()) {
        s.latency_ns = 0;
    }
    for p in std::iter::once(&mut r.cached).chain(r.uncached.as_mut()) {
        p.mean_latency_ns = 0.0;
        p.p95_latency_ns = 0;
    }
}

pub fn cmd_stream(ctx: &Ctx) -> CliResult<Vec<PathBuf>> {
    let cfg = &ctx.cfg;
    let ck = Checkpoint::load(&ctx.resolve(&cfg.paths.model))?;
    let head = ck
        .head
        .as_ref()
        .ok_or_else(|| CliError::config("paths.model", "checkpoint has no head; run `customize` first"))?;
    let mut written = Vec::new();
    let events = match &cfg.paths.trace {
        Some(p) if ctx.resolve(p).exists() => read_trace(&ctx.resolve(p))?,
        _ => {
            let ds = ctx.dataset()?;
            let ev = make_trace(&ds, &cfg.trace)?;
            let p = ctx.output("trace.jsonl");
            write_trace(&p, &ev, ctx.force)?;
            written.push(p);
            ev
        }
    };
    let model = StreamModel {
        encoders: &ck.encoders,
        head,
    };
    let mut report = run_stream(&model, &events, &cfg.stream)?;
    if ctx.canonical {
        canonicalize_stream(&mut report);
    }
    ctx.json("stream.json", &report, &mut written)?;
    ctx.text("stream.csv", &report.to_csv(), &mut written)?;
    Ok(written)
}

pub fn cmd_experiment(ctx: &Ctx) -> CliResult<Vec<PathBuf>> {
    let table = run_plan_with(&ctx.cfg.plan(), ctx.exec)?;
    let mut written = Vec::new();
    ctx.text("results.csv", &table.to_csv(), &mut written)?;
    ctx.text("summary.csv", &table.summary_csv(), &mut written)?;
    ctx.text("diagnostics.csv", &table.diagnostics_csv(), &mut written)?;
    ctx.json("experiment.json", &table, &mut written)?;
    if !table.failures.is_empty() {
        log::warn!("{} seed(s) failed; see experiment.json", table.failures.len());
    }
    Ok(written)
}

pub fn cmd_probe(ctx: &Ctx) -> CliResult<Vec<PathBuf>> {
    let ck = Checkpoint::load(&ctx.resolve(&ctx.cfg.paths.encoders))?;
    let ds = ctx.dataset()?;
    let ids: Vec<&str> = ds.samples.iter().map(|s| s.context_id.as_str()).collect();
    let report = probe_context_embeddings(&ck.encoders, &ds.contexts, &ids, ctx.cfg.seed)?;
    let mut written = Vec::new();
    ctx.json("probe.json", &report, &mut written)?;
    Ok(written)
}
