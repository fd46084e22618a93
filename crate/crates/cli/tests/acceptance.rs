//! The acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use chorus_core::experiments::{run_plan, ExperimentPlan, Method, ResultTable};
use chorus_core::gating::balance_loss;
use chorus_core::numerics::{Graph, Tensor};
use chorus_core::pretraining::{kl_loss, RegimeName};
use chorus_core::shiftlab::{compute_cm, gaussian_kernel, mmd, select_regime, MmdKind, Tier};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

// 1 ------------------------------------------------------------------------

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let rows = support::grad_suite::run_suite(10);
    let secs = t.elapsed().as_secs_f64();
    let mut parts = Vec::new();
    for r in &rows {
        ensure(
            r.worst < support::grad_suite::TOLERANCE,
            format!("{} worst relative error {:.3e}", r.loss, r.worst),
        )?;
        parts.push(format!("{} {:.1e} ({} skipped)", r.loss, r.worst, r.skipped));
    }
    ensure(secs < 30.0, format!("took {secs:.1} s"))?;
    Ok(format!("{}; {secs:.1} s", parts.join(", ")))
}

// 2 ------------------------------------------------------------------------

fn kl_value(mu: &[f64], lv: &[f64]) -> f64 {
    let mut g = Graph::<f64>::new();
    let m = g.input(Tensor::from_vec(&[1, mu.len()], mu.to_vec()));
    let l = g.input(Tensor::from_vec(&[1, lv.len()], lv.to_vec()));
    let v = kl_loss(&mut g, m, l).unwrap();
    g.scalar(v)
}

fn closed_forms() -> Outcome {
    let e = std::f64::consts::E;
    let mut g = Graph::<f64>::new();
    let z = g.input(Tensor::from_vec(&[3, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]));
    let con = g.supcon(z, &[0, 0, 1], 1.0);
    let logits = g.input(Tensor::zeros(&[4, 6]));
    let ce = g.cross_entropy(logits, &[0, 1, 2, 5]);
    let checks = [
        ("kl prior", kl_value(&[0.0], &[0.0]), 0.0),
        ("kl mean", kl_value(&[1.0], &[0.0]), 0.5),
        ("kl variance", kl_value(&[0.0], &[1.0]), 0.5 * (e - 2.0)),
        ("supcon", g.scalar(con), -(e / (e + 1.0)).ln()),
        ("ce", g.scalar(ce), 6f64.ln()),
        ("balance", balance_loss(&[&[1.0, 0.0], &[1.0, 0.0]], 2).unwrap(), 1.0),
    ];
    let mut worst: f64 = 0.0;
    for (name, got, want) in checks {
        ensure((got - want).abs() < 1e-6, format!("{name}: {got} vs {want}"))?;
        worst = worst.max((got - want).abs());
    }
    ensure((-(e / (e + 1.0)).ln() - 0.31326).abs() < 1e-5, "supcon reference")?;
    Ok(format!("6 values, worst deviation {worst:.1e}"))
}

// 3 ------------------------------------------------------------------------

fn brute_mmd2(x: &[Vec<f64>], y: &[Vec<f64>], sigma: f64, kind: MmdKind) -> f64 {
    let k = |a: &[f64], b: &[f64]| {
        let d: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
        (-d / (2.0 * sigma * sigma)).exp()
    };
    let within = |s: &[Vec<f64>]| {
        let mut acc = 0.0;
        let mut count = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if kind == MmdKind::Unbiased && i == j {
                    continue;
                }
                acc += k(&s[i], &s[j]);
                count += 1.0;
            }
        }
        acc / count
    };
    let mut cross = 0.0;
    for a in x {
        for b in y {
            cross += k(a, b);
        }
    }
    within(x) + within(y) - 2.0 * cross / (x.len() * y.len()) as f64
}

fn mmd_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let d = rng.random_range(2..=8);
        let (m, n) = (rng.random_range(2..=16), rng.random_range(2..=16));
        let set = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
        };
        let (x, y) = (set(m, &mut rng), set(n, &mut rng));
        let sigma = rng.random_range(0.3..3.0);
        let xr: Vec<&[f64]> = x.iter().map(Vec::as_slice).collect();
        let yr: Vec<&[f64]> = y.iter().map(Vec::as_slice).collect();
        for kind in [MmdKind::Biased, MmdKind::Unbiased] {
            let got = mmd(&xr, &yr, sigma, kind).map_err(|e| e.to_string())?.mmd2;
            let want = brute_mmd2(&x, &y, sigma, kind);
            ensure((got - want).abs() <= 1e-9, format!("{kind:?}: {got} vs {want}"))?;
            worst = worst.max((got - want).abs());
        }
        let same = mmd(&xr, &xr, sigma, MmdKind::Biased).map_err(|e| e.to_string())?.mmd2;
        ensure(same == 0.0, format!("biased MMD of a set with itself is {same:e}"))?;
    }
    let (x, y) = ([0.3, -1.2, 2.0], [1.1, 0.4, -0.5]);
    let sigma = 1.7;
    let got = mmd(&[&x], &[&y], sigma, MmdKind::Biased).map_err(|e| e.to_string())?.mmd2;
    let want = 2.0 * (1.0 - gaussian_kernel(&x, &y, sigma));
    let d2: f64 = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum();
    let closed = 2.0 * (1.0 - (-d2 / (2.0 * sigma * sigma)).exp());
    ensure((got - closed).abs() <= 1e-12 && (want - closed).abs() <= 1e-12, format!("singleton {got} vs {closed}"))?;
    Ok(format!("400 estimates, worst deviation {worst:.1e}"))
}

// 4 ------------------------------------------------------------------------

fn regime_mapping() -> Outcome {
    let mut seen = Vec::new();
    for (perf_low, perf_high, want) in [
        (0.90, 0.729, RegimeName::Weak),
        (0.80, 0.504, RegimeName::Medium),
        (0.75, 0.39, RegimeName::Strong),
    ] {
        let c = compute_cm(perf_low, perf_high).map_err(|e| e.to_string())?;
        let got = select_regime(c).map_err(|e| e.to_string())?.name;
        ensure(got == want, format!("C = {c:.3} maps to {got}, expected {want}"))?;
        seen.push(format!("{c:.2} -> {got}"));
    }
    Ok(seen.join(", "))
}

// 5, 6, 7, 10, 12 ------------------------------------------------------------

fn means(t: &ResultTable, m: Method) -> Result<[f64; 3], String> {
    let mut out = [0.0; 3];
    for (i, tier) in [Tier::Low, Tier::Mid, Tier::High].into_iter().enumerate() {
        out[i] = t.mean_accuracy(m, tier).ok_or(format!("no rows for {} on {tier:?}", m.as_str()))?;
    }
    Ok(out)
}

fn shift_monotonicity(t: &ResultTable, elapsed: Duration) -> Outcome {
    ensure(t.failures.is_empty(), format!("failed seeds: {:?}", t.failures))?;
    ensure(t.seeds.len() == 5, format!("{} seeds", t.seeds.len()))?;
    let acc = means(t, Method::SensorOnly)?;
    ensure(acc[0] > acc[1] && acc[1] > acc[2], format!("sensor_only accuracy {acc:.3?}"))?;
    let mut mmd = [0.0; 3];
    for s in &t.seeds {
        for e in &s.shift.entries {
            mmd[e.tier as usize] += e.mmd / t.seeds.len() as f64;
        }
    }
    ensure(mmd[0] < mmd[1] && mmd[1] < mmd[2], format!("MMD {mmd:.4?}"))?;
    ensure(elapsed.as_secs_f64() < 300.0, format!("plan took {:.0} s", elapsed.as_secs_f64()))?;
    Ok(format!("accuracy {acc:.3?}, MMD {mmd:.4?}, {:.0} s", elapsed.as_secs_f64()))
}

fn ablation_ordering(t: &ResultTable) -> Outcome {
    let h = |m: Method| means(t, m).map(|v| v[2]);
    let (so, c1, c1c2, ch) = (h(Method::SensorOnly)?, h(Method::C1)?, h(Method::C1c2)?, h(Method::Chorus)?);
    let summary = format!("sensor_only {so:.3}, c1 {c1:.3}, c1c2 {c1c2:.3}, chorus {ch:.3}");
    ensure(so <= c1 && c1 <= c1c2 && c1c2 <= ch, format!("ordering broken: {summary}"))?;
    ensure(ch - so >= 0.05, format!("gap {:.3}: {summary}", ch - so))?;
    let chorus = t.accuracies(Method::Chorus, Tier::High);
    let base = t.accuracies(Method::SensorOnly, Tier::High);
    let wins = chorus
        .iter()
        .filter(|(s, a)| base.iter().any(|(s2, b)| s2 == s && a > b))
        .count();
    ensure(wins >= 4, format!("chorus beats sensor_only in {wins} of 5 seeds: {summary}"))?;
    Ok(format!("{summary}; chorus wins {wins}/5 seeds"))
}

fn adaptive_vs_fixed(t: &ResultTable) -> Outcome {
    let ch = means(t, Method::Chorus)?;
    let fc = means(t, Method::FixConcat)?;
    let so = means(t, Method::SensorOnly)?;
    ensure(ch[2] >= fc[2], format!("High: chorus {:.3} < fix_concat {:.3}", ch[2], fc[2]))?;
    ensure(ch[0] >= so[0] - 0.01, format!("Low: chorus {:.3} < sensor_only {:.3} - 0.01", ch[0], so[0]))?;
    Ok(format!(
        "High chorus {:.3} vs fix_concat {:.3}; Low chorus {:.3} vs sensor_only {:.3}",
        ch[2], fc[2], ch[0], so[0]
    ))
}

fn embedding_probe(t: &ResultTable) -> Outcome {
    let mut acc = 0.0;
    let mut sil = [0.0; 2];
    for s in &t.seeds {
        for (regime, p) in &s.probes {
            let n = t.seeds.len() as f64;
            match regime {
                RegimeName::Strong => {
                    acc += p.probe_accuracy.ok_or("probe without accuracy")? / n;
                    sil[1] += p.silhouette / n;
                }
                RegimeName::Weak => sil[0] += p.silhouette / n,
                _ => {}
            }
        }
    }
    ensure(acc >= 0.95, format!("strong probe accuracy {acc:.3}"))?;
    ensure(sil[1] >= 0.5, format!("strong silhouette {:.3}", sil[1]))?;
    ensure(sil[1] >= sil[0], format!("strong silhouette {:.3} < weak {:.3}", sil[1], sil[0]))?;
    Ok(format!("strong accuracy {acc:.3}, silhouette strong {:.3} weak {:.3}", sil[1], sil[0]))
}

fn budget(elapsed: Duration) -> Outcome {
    let secs = elapsed.as_secs_f64();
    ensure(secs < 1800.0, format!("{secs:.0} s"))?;
    Ok(format!("{secs:.0} s on {} thread(s)", rayon_threads()))
}

fn rayon_threads() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

// 8, 9, 11 -------------------------------------------------------------------

fn chorus(dir: &Path, config: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_chorus"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(
        out.status.success(),
        format!("chorus {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)),
    )
}

struct Pipeline {
    _root: tempfile::TempDir,
    runs: [PathBuf; 2],
    stream: PathBuf,
    config: PathBuf,
}

fn pipeline() -> Result<Pipeline, String> {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = root.path().join("run.toml");
    std::fs::write(&config, "seed = 0\nregime = \"strong\"\n").map_err(|e| e.to_string())?;
    let runs = [root.path().join("a"), root.path().join("b")];
    for dir in &runs {
        for verb in ["generate", "pretrain", "customize", "evaluate"] {
            chorus(dir, &config, &["--canonical-timing", verb])?;
        }
    }
    Ok(Pipeline {
        stream: root.path().join("stream"),
        _root: root,
        runs,
        config,
    })
}

fn files(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| e.to_string())? {
        let e = e.map_err(|e| e.to_string())?;
        let bytes = std::fs::read(e.path()).map_err(|e| e.to_string())?;
        out.push((e.file_name().to_string_lossy().into_owned(), bytes));
    }
    out.sort();
    Ok(out)
}

fn determinism(p: &Pipeline) -> Outcome {
    let (a, b) = (files(&p.runs[0])?, files(&p.runs[1])?);
    let names: Vec<&str> = a.iter().map(|f| f.0.as_str()).collect();
    ensure(names == b.iter().map(|f| f.0.as_str()).collect::<Vec<_>>(), "different file sets")?;
    for (x, y) in a.iter().zip(&b) {
        ensure(x.1 == y.1, format!("{} differs", x.0))?;
    }
    Ok(format!("{} files identical: {}", names.len(), names.join(" ")))
}

/// Streams with run A's model into a separate directory.
fn stream_json(p: &Pipeline, capacity: usize, timed: bool) -> Result<Value, String> {
    let dir = &p.stream;
    std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let config = dir.join(format!("stream{capacity}.toml"));
    let base = std::fs::read_to_string(&p.config).map_err(|e| e.to_string())?;
    let a = &p.runs[0];
    std::fs::write(
        &config,
        format!(
            "{base}[stream]\ncapacity = {capacity}\n[paths]\ndataset = {:?}\nmodel = {:?}\n",
            a.join("dataset.jsonl"),
            a.join("model.chor")
        ),
    )
    .map_err(|e| e.to_string())?;
    let mut args = vec!["--force"];
    if !timed {
        args.push("--canonical-timing");
    }
    args.push("stream");
    chorus(dir, &config, &args)?;
    let text = std::fs::read_to_string(dir.join("stream.json")).map_err(|e| e.to_string())?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn trace_shape(p: &Pipeline) -> Result<(usize, usize), String> {
    let text = std::fs::read_to_string(p.stream.join("trace.jsonl")).map_err(|e| e.to_string())?;
    let ids: Vec<String> = text
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).map(|v| v["context_id"].as_str().unwrap_or("").to_string()))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let switches: Vec<usize> = (1..ids.len()).filter(|&i| ids[i] != ids[i - 1]).collect();
    ensure(switches == [1000, 2000], format!("switches at {switches:?}"))?;
    Ok((ids.len(), switches.len()))
}

fn cache_correctness(p: &Pipeline) -> Outcome {
    let mut parts = Vec::new();
    for capacity in [3usize, 16, 1] {
        let r = stream_json(p, capacity, false)?;
        let (len, _) = trace_shape(p)?;
        ensure(len == 3000, format!("trace has {len} events"))?;
        let inv = r["cached"]["encoder_invocations"].as_u64();
        ensure(inv == Some(3), format!("capacity {capacity}: {inv:?} encoder invocations"))?;
        ensure(
            r["identical_predictions"] == Value::Bool(true),
            format!("capacity {capacity}: predictions differ without the cache"),
        )?;
        parts.push(format!("capacity {capacity}: 3 invocations"));
    }
    support::lru_oracle::check_traces(1000, 0)?;
    parts.push("1000 oracle traces agree".into());
    Ok(parts.join(", "))
}

fn cache_performance(p: &Pipeline) -> Outcome {
    let r = stream_json(p, 3, true)?;
    let hits = r["cached"]["hits"].as_u64().ok_or("missing hits")?;
    let samples = r["cached"]["samples"].as_u64().ok_or("missing samples")?;
    ensure((hits, samples) == (2997, 3000), format!("hit rate {hits}/{samples}"))?;
    let cached = r["cached"]["mean_latency_ns"].as_f64().ok_or("missing latency")?;
    let uncached = r["uncached"]["mean_latency_ns"].as_f64().ok_or("missing latency")?;
    ensure(cached > 0.0 && uncached > 0.0, "latencies were not measured")?;
    ensure(
        cached <= 1.05 * uncached,
        format!("cached {cached:.0} ns > 1.05 x uncached {uncached:.0} ns"),
    )?;
    Ok(format!("hit rate {hits}/{samples}, mean latency {cached:.0} ns cached vs {uncached:.0} ns uncached"))
}

// ---------------------------------------------------------------------------

fn run(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let secs = t.elapsed().as_secs_f64();
    match &r {
        Ok(detail) => println!("PASS {n:>2} {name} [{secs:.1} s]: {detail}"),
        Err(why) => println!("FAIL {n:>2} {name} [{secs:.1} s]: {why}"),
    }
    r.is_ok()
}

fn on_table(table: &Option<ResultTable>, f: impl FnOnce(&ResultTable) -> Outcome) -> Outcome {
    table.as_ref().ok_or_else(|| "no plan results".to_string()).and_then(f)
}

fn on_pipe(pipe: &Result<Pipeline, String>, f: impl FnOnce(&Pipeline) -> Outcome) -> Outcome {
    pipe.as_ref().map_err(|e| format!("pipeline: {e}")).and_then(f)
}

fn main() {
    let mut ok = true;
    ok &= run(1, "gradient suite", gradient_suite);
    ok &= run(2, "closed-form losses", closed_forms);
    ok &= run(3, "mmd oracle", mmd_oracle);
    ok &= run(4, "regime mapping", regime_mapping);

    let t = Instant::now();
    let table = match catch_unwind(|| run_plan(&ExperimentPlan::default_synthetic())) {
        Ok(Ok(t)) => Some(t),
        Ok(Err(e)) => {
            println!("default plan failed: {e}");
            None
        }
        Err(_) => {
            println!("default plan panicked");
            None
        }
    };
    let elapsed = t.elapsed();
    ok &= run(5, "shift monotonicity", || on_table(&table, |t| shift_monotonicity(t, elapsed)));
    ok &= run(6, "ablation ordering", || on_table(&table, ablation_ordering));
    ok &= run(7, "adaptive vs fixed fusion", || on_table(&table, adaptive_vs_fixed));

    let pipe = pipeline();
    ok &= run(8, "cache correctness", || on_pipe(&pipe, cache_correctness));
    ok &= run(9, "cache performance", || on_pipe(&pipe, cache_performance));
    ok &= run(10, "context embedding probe", || on_table(&table, embedding_probe));
    ok &= run(11, "determinism", || on_pipe(&pipe, determinism));
    ok &= run(12, "end-to-end budget", || on_table(&table, |_| budget(elapsed)));

    if !ok {
        std::process::exit(1);
    }
}
