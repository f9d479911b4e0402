//! Acceptance suite: one PASS/FAIL line per primary criterion.
//!
//! Run with `cargo test -p colearn-sim --test acceptance`. The process exits
//! non-zero if any criterion fails; a panic inside a check counts as FAIL.

// `ensure!` negates comparisons on purpose: a NaN measurement must fail.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use colearn_core::aggregation::{fedavg, secure_aggregate, secure_contribution, Contribution, ShareMatrix, Weighting};
use colearn_core::data::Dataset;
use colearn_core::model::{init_params, loss_and_gradient, forward_loss, train_epochs, Batch, ModelSpec};
use colearn_core::params::{LayerShape, ParamVector};
use colearn_core::privacy::{clip_update, privatize, FixedPointCodec, PrivacyConfig, DEFAULT_SCALE_BITS};
use colearn_core::rng::{derive_key, draw, normal_at, CounterRng};
use colearn_core::task::Scheme;
use colearn_core::wire::{decode_msg, Message};
use colearn_sim::{run_scenario, ClientData, ExperimentReport, FrameLog, Scenario, Simulation};

// Tolerances and budgets, as fixed by the acceptance criteria.

/// Aggregation events in the MNIST run: one per two-epoch round.
const FIG_AGGREGATIONS: usize = 10;
const FIG_MIN_ACCURACY: f64 = 0.85;
const FIG_MAX_RUNTIME: Duration = Duration::from_secs(5 * 60);
/// Secure sums may differ from plain averages by one fixed-point step per party.
fn secure_tolerance(k: usize) -> f64 {
    k as f64 * 2f64.powi(-(DEFAULT_SCALE_BITS as i32))
}
const SECURE_PARTY_COUNTS: [usize; 4] = [2, 3, 5, 8];
const SECURE_SEEDS: u64 = 50;
const CROSS_SCHEME_TOLERANCE: f64 = 1e-12;
const CLIP_DRAWS: usize = 1_000;
const NOISE_SAMPLES: usize = 100_000;
const NOISE_STD_REL_TOLERANCE: f64 = 0.05;
const GRADIENT_DRAWS: u64 = 20;
const GRADIENT_REL_TOLERANCE: f64 = 1e-4;

type Outcome = Result<String, String>;
type Check = fn(&mut Cache) -> Outcome;

fn scenario(name: &str) -> Scenario {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(format!("{name}.json"));
    Scenario::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

/// Reports shared between checks so the MNIST run is not repeated needlessly.
#[derive(Default)]
struct Cache {
    mnist: Option<ExperimentReport>,
}

fn fig_pattern(cache: &mut Cache) -> Outcome {
    let s = scenario("mnist-fed");
    ensure!(s.num_clients == 3, "scenario has {} clients", s.num_clients);
    ensure!(
        s.task.model == ModelSpec::new(784, 32, 10, s.task.model.seed),
        "model is {:?}",
        s.task.model
    );
    ensure!(
        s.task.total_rounds == 10 && s.task.train.epochs_per_round == 2,
        "{} rounds x {} epochs",
        s.task.total_rounds,
        s.task.train.epochs_per_round
    );
    let started = Instant::now();
    let report = run_scenario(&s).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let samples: Vec<usize> = report.clients.iter().map(|c| c.samples).collect();
    ensure!(samples == vec![2000; 3], "client sample counts {samples:?}");
    let aggregations = report.aggregation_count();
    let accuracy = report.final_accuracy.unwrap_or(f64::NAN);
    let epochs: Vec<usize> = report.clients.iter().map(|c| c.epochs.len()).collect();
    cache.mnist = Some(report);
    ensure!(epochs == vec![20; 3], "client epochs {epochs:?}");
    ensure!(aggregations == FIG_AGGREGATIONS, "{aggregations} aggregation events");
    ensure!(accuracy >= FIG_MIN_ACCURACY, "global held-out accuracy {accuracy:.4}");
    ensure!(elapsed < FIG_MAX_RUNTIME, "runtime {elapsed:?}");
    Ok(format!(
        "{aggregations} aggregations, held-out accuracy {accuracy:.4}, runtime {:.1} s",
        elapsed.as_secs_f64()
    ))
}

fn random_update(len: usize, key: u64) -> ParamVector {
    let values = (0..len as u64).map(|i| 4.0 * normal_at(key, i)).collect();
    ParamVector::new(vec![LayerShape::new("u", vec![len])], values).unwrap()
}

fn secure_plain_equivalence(_: &mut Cache) -> Outcome {
    let codec = FixedPointCodec::new(DEFAULT_SCALE_BITS).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let mut runs = 0;
    for &k in &SECURE_PARTY_COUNTS {
        for seed in 0..SECURE_SEEDS {
            let key = derive_key(derive_key(0x5ec, k as u64), seed);
            let weighting = if seed % 2 == 0 { Weighting::Samples } else { Weighting::Uniform };
            let len = 64 + (draw(key, 0) % 200) as usize;
            let contribs: Vec<Contribution> = (0..k)
                .map(|i| Contribution {
                    client_id: 3 * i as u64 + 1,
                    round: seed,
                    payload: random_update(len, derive_key(key, i as u64 + 1)),
                    sample_count: Some(1 + draw(key, 100 + i as u64) % 5000),
                })
                .collect();
            let plain = fedavg(&contribs, weighting).map_err(|e| e.to_string())?;
            let mut matrix = ShareMatrix::new(seed, contribs.iter().map(|c| c.client_id));
            let mut counts = BTreeMap::new();
            for c in &contribs {
                let shares = secure_contribution(
                    &c.payload,
                    c.sample_count,
                    weighting,
                    &codec,
                    k,
                    c.client_id,
                    seed,
                    derive_key(key, 1000 + c.client_id),
                )
                .map_err(|e| e.to_string())?;
                matrix.insert_split(c.client_id, shares);
                counts.insert(c.client_id, c.sample_count);
            }
            let secure = secure_aggregate(&matrix, &counts, weighting, &codec, &contribs[0].payload)
                .map_err(|e| format!("k={k} seed={seed}: {e}"))?;
            let gap = plain.global_update.max_abs_diff(&secure.global_update);
            ensure!(
                gap <= secure_tolerance(k),
                "k={k} seed={seed}: gap {gap:e} exceeds {:e}",
                secure_tolerance(k)
            );
            worst = worst.max(gap / secure_tolerance(k));
            runs += 1;
        }
    }
    Ok(format!("{runs} runs, zero failures, worst gap {worst:.3} of the k*2^-20 budget"))
}

fn cross_scheme_equivalence(_: &mut Cache) -> Outcome {
    let mut fed = scenario("smoke");
    fed.task.weighting = Weighting::Uniform;
    fed.task.scheme = Scheme::Federated;
    let mut dec = fed.clone();
    dec.task.scheme = Scheme::Decentralized;
    dec.task.secure_aggregation = false;
    dec.task.ready_threshold = dec.num_clients;
    let a = run_scenario(&fed).map_err(|e| e.to_string())?;
    let b = run_scenario(&dec).map_err(|e| e.to_string())?;
    ensure!(
        a.rounds_completed == b.rounds_completed,
        "{} vs {} rounds",
        a.rounds_completed,
        b.rounds_completed
    );
    let (pa, pb) = (a.final_params.ok_or("no federated model")?, b.final_params.ok_or("no peer model")?);
    let gap = pa.max_abs_diff(&pb);
    ensure!(gap <= CROSS_SCHEME_TOLERANCE, "final models differ by {gap:e}");
    Ok(format!("{} rounds, max coordinate gap {gap:e}", a.rounds_completed))
}

/// Values unlikely to arise by chance, written into a few rows of every shard.
fn sentinel(slot: usize, row: usize, col: usize) -> f64 {
    0.731_592_653_589_793 + slot as f64 * 1e-3 + row as f64 * 1e-5 + col as f64 * 1e-7
}

const SENTINEL_ROWS: usize = 3;

fn with_sentinels(data: ClientData) -> (ClientData, Vec<f64>) {
    let mut values = Vec::new();
    let shards = data
        .shards
        .into_iter()
        .enumerate()
        .map(|(slot, d)| {
            let mut x = d.features().to_vec();
            let f = d.n_features();
            for row in 0..SENTINEL_ROWS.min(d.len()) {
                for col in 0..f {
                    let v = sentinel(slot, row, col);
                    x[row * f + col] = v;
                    values.push(v);
                }
            }
            Dataset::new(x, f, d.labels().to_vec(), d.num_classes(), d.source_tag.clone())
        })
        .collect();
    (
        ClientData {
            shards,
            holdout: data.holdout,
        },
        values,
    )
}

fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    haystack.windows(needle.len()).any(|w| w == needle)
}

/// Looks for sentinel values in a frame: as JSON text, inside decoded
/// parameter vectors, and as fixed-point ring elements inside shares.
fn leaks(bytes: &[u8], sentinels: &[f64], codec: &FixedPointCodec) -> Option<String> {
    for v in sentinels {
        if contains(bytes, v.to_string().as_bytes()) {
            return Some(format!("text {v}"));
        }
    }
    let env = decode_msg(bytes).ok()?;
    let params: Vec<&ParamVector> = match &env.body {
        Message::RoundStart {
            global_params: Some(p), ..
        } => vec![p],
        Message::UpdateUpload { payload, .. } => vec![payload],
        Message::PeerUpdate { params, .. } => vec![params],
        Message::GlobalUpdate { params, .. } => vec![params],
        _ => Vec::new(),
    };
    for p in params {
        if let Some(v) = p.values().iter().find(|v| sentinels.contains(v)) {
            return Some(format!("parameter value {v}"));
        }
    }
    if let Message::PeerShare { share, .. } = &env.body {
        let encoded: Vec<u64> = sentinels.iter().filter_map(|v| codec.encode_value(*v).ok()).collect();
        if share.values.as_slice().iter().any(|r| encoded.contains(r)) {
            return Some("share element".into());
        }
    }
    None
}

fn privacy_boundary(_: &mut Cache) -> Outcome {
    let codec = FixedPointCodec::new(DEFAULT_SCALE_BITS).map_err(|e| e.to_string())?;
    let mut summary = Vec::new();
    for (label, scheme, secure) in [
        ("federated", Scheme::Federated, false),
        ("decentralized", Scheme::Decentralized, false),
        ("decentralized-secure", Scheme::Decentralized, true),
    ] {
        let mut s = scenario("decentralized");
        s.faults.clear();
        s.task.scheme = scheme;
        s.task.secure_aggregation = secure;
        let (data, sentinels) = with_sentinels(s.materialize().map_err(|e| e.to_string())?);
        let sim = Simulation::with_tap(&s, data, FrameLog::default()).map_err(|e| e.to_string())?;
        let (report, log) = sim.run_with_tap().map_err(|e| e.to_string())?;
        ensure!(report.session_finished, "{label}: session did not finish");
        if scheme == Scheme::Decentralized {
            let carrying: Vec<&str> = log
                .frames
                .iter()
                .filter(|f| f.touches_coordinator() && f.carries_model_payload)
                .map(|f| f.kind)
                .collect();
            ensure!(
                carrying.is_empty(),
                "{label}: coordinator saw {} payload frames ({:?})",
                carrying.len(),
                carrying.first()
            );
        }
        for f in &log.frames {
            if let Some(what) = leaks(&f.bytes, &sentinels, &codec) {
                return Err(format!(
                    "{label}: raw data ({what}) in a {} frame at t={} ms",
                    f.kind, f.at_ms
                ));
            }
        }
        let coordinator_frames = log.frames.iter().filter(|f| f.touches_coordinator()).count();
        summary.push(format!(
            "{label}: {} frames scanned, {coordinator_frames} at the coordinator",
            log.frames.len()
        ));
    }
    Ok(summary.join("; "))
}

fn dp_mechanics(_: &mut Cache) -> Outcome {
    // Clipping bound.
    let mut rng = CounterRng::new(0xc11f);
    let mut clipped = 0;
    for i in 0..CLIP_DRAWS {
        let len = 1 + rng.below(300) as usize;
        let scale = 10f64.powf(rng.next_f64() * 6.0 - 3.0);
        let u = random_update(len, derive_key(0xc11f, i as u64)).scaled(scale).unwrap();
        let radius = 10f64.powf(rng.next_f64() * 4.0 - 2.0);
        let c = clip_update(&u, radius).map_err(|e| e.to_string())?;
        ensure!(c.l2_norm() <= radius, "draw {i}: norm {} above radius {radius}", c.l2_norm());
        if u.l2_norm() > radius {
            clipped += 1;
        }
    }
    // Noise calibration.
    let (clip, scale) = (2.0, 0.5);
    let cfg = PrivacyConfig {
        clip_radius: clip,
        noise_scale: scale,
        noise_seed: 77,
    };
    let zero = ParamVector::zeros(vec![LayerShape::new("u", vec![NOISE_SAMPLES])]);
    let noisy = privatize(&zero, &cfg).map_err(|e| e.to_string())?;
    let n = NOISE_SAMPLES as f64;
    let mean = noisy.values().iter().sum::<f64>() / n;
    let std = (noisy.values().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let target = scale * clip;
    let rel = (std - target).abs() / target;
    ensure!(rel <= NOISE_STD_REL_TOLERANCE, "noise std {std} vs {target} ({:.2}% off)", rel * 100.0);
    // Disabled privacy is the identity, bit for bit.
    let off = PrivacyConfig {
        clip_radius: 0.0,
        noise_scale: 0.0,
        noise_seed: 12345,
    };
    for i in 0..CLIP_DRAWS as u64 {
        let u = random_update(50, derive_key(0xd15, i));
        let p = privatize(&u, &off).map_err(|e| e.to_string())?;
        ensure!(
            p.values().iter().zip(u.values()).all(|(a, b)| a.to_bits() == b.to_bits()),
            "disabled privacy changed draw {i}"
        );
    }
    // ...and a whole session reproduces a privacy-free federated computation.
    let mut s = scenario("smoke");
    s.task.privacy = off;
    let report = run_scenario(&s).map_err(|e| e.to_string())?;
    let data = s.materialize().map_err(|e| e.to_string())?;
    let mut global = init_params(&s.task.model).map_err(|e| e.to_string())?;
    let e = s.task.train.epochs_per_round;
    for round in 0..s.task.total_rounds {
        let contribs = data
            .shards
            .iter()
            .enumerate()
            .map(|(i, shard)| {
                let local = train_epochs(&global, shard, &s.task.train, round * e, e).unwrap().params;
                Contribution {
                    client_id: i as u64 + 1,
                    round,
                    payload: local.sub(&global).unwrap(),
                    sample_count: Some(shard.len() as u64),
                }
            })
            .collect::<Vec<_>>();
        let mean = fedavg(&contribs, s.task.weighting).map_err(|e| e.to_string())?;
        global = global.add(&mean.global_update).map_err(|e| e.to_string())?;
    }
    let simulated = report.final_params.ok_or("no final model")?;
    ensure!(
        simulated.values().iter().zip(global.values()).all(|(a, b)| a.to_bits() == b.to_bits()),
        "session with disabled privacy differs from the privacy-free computation by {:e}",
        simulated.max_abs_diff(&global)
    );
    Ok(format!(
        "{CLIP_DRAWS} clips within radius ({clipped} active); noise std {std:.4} vs {target} ({:.2}% off); disabled privacy bitwise identical",
        rel * 100.0
    ))
}

fn churn(_: &mut Cache) -> Outcome {
    let report = run_scenario(&scenario("churn")).map_err(|e| e.to_string())?;
    ensure!(report.session_finished, "churn session did not finish");
    ensure!(
        report.rounds_completed == report.total_rounds,
        "{} of {} rounds",
        report.rounds_completed,
        report.total_rounds
    );
    let counts: Vec<usize> = report.rounds.iter().map(|r| r.participants.len()).collect();
    ensure!(counts[4..].iter().all(|&c| c == 2), "participants per round {counts:?}");

    let report = run_scenario(&scenario("churn-rejoin")).map_err(|e| e.to_string())?;
    let paused = report
        .timeline
        .iter()
        .position(|t| t.event.contains("paused: insufficient participants"))
        .ok_or("no pause for insufficient participants")?;
    ensure!(
        report.message_counts.get("SessionPaused").copied().unwrap_or(0) > 0,
        "no SessionPaused frame was sent"
    );
    let rejoin = report
        .timeline
        .iter()
        .position(|t| t.event.contains("rejoins"))
        .ok_or("no rejoin")?;
    ensure!(paused < rejoin, "pause came after the rejoin");
    ensure!(
        report.session_finished && report.rounds_completed == report.total_rounds,
        "session did not resume to completion ({} rounds)",
        report.rounds_completed
    );
    Ok(format!(
        "dropout of 1/3: rounds 4..9 aggregate 2 ({counts:?}); dropout of 2/3 paused at t={} ms, resumed on rejoin, {} rounds completed",
        report.timeline[paused].at_ms, report.rounds_completed
    ))
}

fn gradient_check(_: &mut Cache) -> Outcome {
    let mut worst = 0.0f64;
    for draw_i in 0..GRADIENT_DRAWS {
        let key = derive_key(0x9AD, draw_i);
        let input = 2 + (draw(key, 0) % 6) as usize;
        let hidden = if draw_i % 2 == 0 { 0 } else { 3 + (draw(key, 1) % 5) as usize };
        let output = 2 + (draw(key, 2) % 4) as usize;
        let spec = ModelSpec::new(input, hidden, output, draw(key, 3));
        let base = init_params(&spec).map_err(|e| e.to_string())?;
        let params = base
            .with_values(base.values().iter().enumerate().map(|(i, v)| v + 0.3 * normal_at(key, 1000 + i as u64)).collect())
            .unwrap();
        let rows = 6;
        let x: Vec<f64> = (0..rows * input).map(|i| normal_at(key, 5000 + i as u64)).collect();
        let y: Vec<usize> = (0..rows).map(|i| (draw(key, 9000 + i as u64) % output as u64) as usize).collect();
        let data = Dataset::new(x, input, y, output, "fd");
        let batch = Batch::whole(&data);
        let analytic = loss_and_gradient(&params, &batch).map_err(|e| e.to_string())?.gradient;
        let h = 1e-5;
        let mut numeric = Vec::with_capacity(params.len());
        for i in 0..params.len() {
            let mut plus = params.clone();
            plus.values_mut()[i] += h;
            let mut minus = params.clone();
            minus.values_mut()[i] -= h;
            let lp = forward_loss(&plus, &batch).map_err(|e| e.to_string())?.loss;
            let lm = forward_loss(&minus, &batch).map_err(|e| e.to_string())?.loss;
            numeric.push((lp - lm) / (2.0 * h));
        }
        let diff: f64 = numeric.iter().zip(analytic.values()).map(|(n, a)| (n - a).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt().max(analytic.l2_norm()).max(1e-12);
        let rel = diff / norm;
        ensure!(rel <= GRADIENT_REL_TOLERANCE, "draw {draw_i} ({spec:?}): relative error {rel:e}");
        worst = worst.max(rel);
    }
    Ok(format!("{GRADIENT_DRAWS} draws, worst relative error {worst:.2e}"))
}

fn determinism(cache: &mut Cache) -> Outcome {
    let names = ["smoke", "mnist-fed", "churn", "churn-rejoin", "decentralized", "secure"];
    for name in names {
        let s = scenario(name);
        let first = match (name, cache.mnist.take()) {
            ("mnist-fed", Some(r)) => r,
            _ => run_scenario(&s).map_err(|e| format!("{name}: {e}"))?,
        };
        let second = run_scenario(&s).map_err(|e| format!("{name}: {e}"))?;
        let e = s.task.train.epochs_per_round;
        ensure!(
            first.to_json().unwrap() == second.to_json().unwrap(),
            "{name}: report.json differs between runs"
        );
        ensure!(
            first.to_csv(e).unwrap() == second.to_csv(e).unwrap(),
            "{name}: metrics.csv differs between runs"
        );
    }
    Ok(format!("{} bundled scenarios replayed byte-identically", names.len()))
}

fn main() {
    let checks: [(&str, Check); 8] = [
        ("fig1-pattern", fig_pattern),
        ("secure-plain-equivalence", secure_plain_equivalence),
        ("decentralized-federated-equivalence", cross_scheme_equivalence),
        ("privacy-boundary", privacy_boundary),
        ("dp-mechanics", dp_mechanics),
        ("churn", churn),
        ("gradient-correctness", gradient_check),
        ("determinism", determinism),
    ];
    let mut cache = Cache::default();
    let mut failed = 0;
    for (name, check) in checks {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| check(&mut cache)))
            .unwrap_or_else(|panic| {
                let msg = panic
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panicked".into());
                Err(format!("panic: {msg}"))
            });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.1} s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1} s): {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
