//! Acceptance suite. Runs every criterion in sequence, prints one PASS/FAIL
//! line each, and exits non-zero if any failed.
//!
//! Runs without the libtest harness so the lines always reach the output.

mod common;

use std::time::{Duration, Instant};

use fdsim_core::aggregation::{
    aggregate, enhanced_era, era, log_ratio_enhanced_era, log_ratio_era, majorization_holds, AggregationPolicy,
};
use fdsim_core::cache::{CacheSignal, ExpiryMode, GlobalCache};
use fdsim_core::hitsim::{mean_over_rounds, simulate_hit_ratio, HitSimConfig};
use fdsim_core::learner::{predict_soft_labels, LinearSoftmaxModel, LossKind};
use fdsim_core::orchestrator::{run_transport, ExperimentConfig, Method, Simulation, TransportConfig};
use fdsim_core::soft_label::{entropy, mean_soft_labels, SoftLabel, SoftLabelBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// All sub-checks must hold; details are joined for the report line.
fn all(parts: Vec<Outcome>) -> Outcome {
    let pass = parts.iter().all(|o| o.pass);
    let detail = parts
        .iter()
        .map(|o| {
            if o.pass {
                o.detail.clone()
            } else {
                format!("FAILED {}", o.detail)
            }
        })
        .collect::<Vec<_>>()
        .join("; ");
    Outcome { pass, detail }
}

fn random_simplex(rng: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| -rng.random_range(1e-6..1.0f64).ln()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let mut identity_err = 0.0f64;
    let mut majorization_failures = 0;
    let mut entropy_violation = 0.0f64;
    for _ in 0..10_000 {
        let n = rng.random_range(2..=12);
        let mut z = random_simplex(&mut rng, n);
        let id = enhanced_era(&z, 1.0).unwrap();
        identity_err = identity_err.max(id.iter().zip(&z).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));

        let b1 = rng.random_range(0.05..8.0);
        let b2: f64 = rng.random_range(b1..=8.0f64).max(b1 + 1e-3);
        z.sort_by(f64::total_cmp);
        if !majorization_holds(&z, b1, b2).unwrap() {
            majorization_failures += 1;
        }
        let h1 = entropy(&SoftLabel::new(enhanced_era(&z, b1).unwrap()).unwrap());
        let h2 = entropy(&SoftLabel::new(enhanced_era(&z, b2).unwrap()).unwrap());
        entropy_violation = entropy_violation.max(h2 - h1);
    }

    // log-ratio identities on aggregate output
    let mut era_ratio_err = 0.0f64;
    let mut eera_ratio_err = 0.0f64;
    for _ in 0..2000 {
        let n = rng.random_range(2..=8);
        let clients: Vec<SoftLabelBatch> = (0..3)
            .map(|_| SoftLabelBatch::new(vec![SoftLabel::new(random_simplex(&mut rng, n)).unwrap()], vec![0]).unwrap())
            .collect();
        let mean = mean_soft_labels(&clients).unwrap();
        let zb = mean.labels()[0].probs().to_vec();
        let t = rng.random_range(0.1..5.0);
        let beta = rng.random_range(0.2..5.0);
        let e = aggregate(&clients, AggregationPolicy::Era { temperature: t }).unwrap();
        let p = aggregate(&clients, AggregationPolicy::EnhancedEra { beta }).unwrap();
        let (ez, pz) = (e.labels()[0].probs(), p.labels()[0].probs());
        for i in 0..n {
            for j in 0..n {
                era_ratio_err = era_ratio_err.max(((ez[i] / ez[j]).ln() - log_ratio_era(zb[i], zb[j], t)).abs());
                eera_ratio_err =
                    eera_ratio_err.max(((pz[i] / pz[j]).ln() - log_ratio_enhanced_era(zb[i], zb[j], beta)).abs());
            }
        }
    }

    // sensitivity of ln(ẑ_i / ẑ_j) to T and to β, by central differences
    let z = [0.15, 0.10, 0.75];
    let era_lr = |t: f64| {
        let o = era(&z, t);
        (o[0] / o[1]).ln()
    };
    let eera_lr = |b: f64| {
        let o = enhanced_era(&z, b).unwrap();
        (o[0] / o[1]).ln()
    };
    let d_dt = |t: f64| {
        let h = t * 1e-4;
        (era_lr(t + h) - era_lr(t - h)) / (2.0 * h)
    };
    let d_db = |b: f64| (eera_lr(b + 1e-3) - eera_lr(b - 1e-3)) / 2e-3;
    let sens_ratio = d_dt(0.5) / d_dt(1.0);
    let slopes: Vec<f64> = [0.5, 1.0, 1.5, 2.0, 3.0].iter().map(|&b| d_db(b)).collect();
    let slope_spread =
        slopes.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v)) - slopes.iter().fold(f64::INFINITY, |m, v| m.min(*v));

    let worked = [
        (log_ratio_era(0.15, 0.10, 1.0), 0.05),
        (log_ratio_era(0.30, 0.20, 1.0), 0.10),
        (log_ratio_enhanced_era(0.15, 0.10, 1.0), 1.5f64.ln()),
        (log_ratio_enhanced_era(0.30, 0.20, 1.0), 1.5f64.ln()),
    ];
    let worked_err = worked.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let pair_gap = (worked[2].0 - worked[3].0).abs();

    all(vec![
        check(
            identity_err <= 1e-12,
            format!("beta=1 identity max err {identity_err:.1e} (<= 1e-12)"),
        ),
        check(
            majorization_failures == 0,
            format!("majorization failures {majorization_failures}/10000"),
        ),
        check(
            entropy_violation <= 1e-10,
            format!("entropy increase {entropy_violation:.1e} (<= 1e-10)"),
        ),
        check(
            era_ratio_err <= 1e-9,
            format!("ERA log-ratio err {era_ratio_err:.1e} (<= 1e-9)"),
        ),
        check(
            eera_ratio_err <= 1e-9,
            format!("power log-ratio err {eera_ratio_err:.1e} (<= 1e-9)"),
        ),
        check(
            (sens_ratio - 4.0).abs() <= 0.2,
            format!("ERA sensitivity ratio T/2 vs T {sens_ratio:.4} (4 +- 5%)"),
        ),
        check(
            slope_spread <= 1e-9,
            format!("power sensitivity spread over beta {slope_spread:.1e} (<= 1e-9)"),
        ),
        check(
            worked_err <= 1e-12 && pair_gap <= 1e-12,
            format!("worked pairs err {worked_err:.1e}, ln(1.5) pair gap {pair_gap:.1e} (<= 1e-12)"),
        ),
    ])
}

fn criterion_2() -> Outcome {
    // full participation: 1,000 rounds, randomized uploads and durations
    let mut rounds_checked = 0u32;
    let mut ttl_violations = 0;
    let mut conservation_violations = 0;
    let mut errors = Vec::new();
    let mut run = |cfg: TransportConfig| -> u32 {
        let d = cfg.cache_duration;
        let mut rounds = 0;
        let res = run_transport(&cfg, |r| {
            rounds += 1;
            if r.protocol.last_max_age() > d {
                ttl_violations += 1;
            }
            let pkg = r.protocol.last_package().unwrap();
            let non_cached = pkg.signals.iter().filter(|s| **s != CacheSignal::Cached).count();
            if pkg.signals.len() != r.plan.indices.len()
                || pkg.fresh_count() != non_cached
                || pkg.fresh_count() != r.plan.requested.len()
            {
                conservation_violations += 1;
            }
        });
        if let Err(e) = res {
            errors.push(e.to_string());
        }
        rounds
    };
    let base = TransportConfig {
        num_clients: 10,
        num_classes: 10,
        pool_size: 1000,
        per_round: 100,
        replay_clients: true,
        ..TransportConfig::full_scale(Method::Scarlet, 250, 0)
    };
    for (seed, d, expiry) in [
        (1, 3, ExpiryMode::Evict),
        (2, 10, ExpiryMode::Refresh),
        (3, 25, ExpiryMode::Evict),
        (4, 50, ExpiryMode::Refresh),
    ] {
        rounds_checked += run(TransportConfig {
            seed,
            cache_duration: d,
            expiry,
            ..base
        });
    }
    let full_rounds = rounds_checked;
    for (seed, p) in [(5, 0.1), (6, 0.3), (7, 0.5), (8, 1.0)] {
        for expiry in [ExpiryMode::Evict, ExpiryMode::Refresh] {
            rounds_checked += run(TransportConfig {
                seed,
                num_clients: 20,
                participation_ratio: p,
                cache_duration: 8,
                expiry,
                ..base
            });
        }
    }

    let mut g = GlobalCache::new(50, ExpiryMode::Evict);
    let label = SoftLabelBatch::new(vec![SoftLabel::uniform(3).unwrap()], vec![5]).unwrap();
    g.update(&[5], &label, 10).unwrap();
    let boundary_hit = g.is_hit(5, 60) && !g.is_hit(5, 61);

    all(vec![
        check(errors.is_empty(), format!("bit-exact reconstruction over {full_rounds} full-participation rounds and p in {{0.1,0.3,0.5,1.0}} ({} errors{})", errors.len(), errors.first().map(|e| format!(": {e}")).unwrap_or_default())),
        check(ttl_violations == 0, format!("TTL violations {ttl_violations}")),
        check(conservation_violations == 0, format!("signal/queue conservation violations {conservation_violations} over {rounds_checked} rounds")),
        check(boundary_hit, "age = D is a hit, D+1 is not"),
        check(full_rounds >= 1000, format!("{full_rounds} full-participation rounds (>= 1000)")),
    ])
}

fn criterion_3() -> Outcome {
    let durations = [0u32, 25, 50, 100, 200];
    let mut means = Vec::new();
    let mut zero_ok = true;
    let mut peak_200 = 0.0f64;
    for &d in &durations {
        let trace = simulate_hit_ratio(&HitSimConfig::new(10_000, 1000, d, 2000, 0)).unwrap();
        if d == 0 {
            zero_ok = trace.iter().all(|r| *r == 0.0);
        }
        if d == 200 {
            peak_200 = trace.iter().copied().fold(0.0, f64::max);
        }
        means.push(mean_over_rounds(&trace, 100, 2000));
    }
    let monotone = means.windows(2).all(|w| w[1] >= w[0] - 0.01);

    let mut traces_equal = true;
    for expiry in [ExpiryMode::Refresh, ExpiryMode::Evict] {
        let sim = simulate_hit_ratio(&HitSimConfig::new(10_000, 1000, 50, 400, 9).with_expiry(expiry)).unwrap();
        let cfg = TransportConfig {
            num_clients: 1,
            expiry,
            ..TransportConfig::full_scale(Method::Scarlet, 400, 9)
        };
        let proto = run_transport(&cfg, |_| {}).unwrap();
        traces_equal &= proto.ledger().hit_ratios() == sim.as_slice();
    }
    let fmt = means.iter().map(|m| format!("{m:.3}")).collect::<Vec<_>>().join(",");
    all(vec![
        check(zero_ok, "D=0 all zeros"),
        check(
            monotone,
            format!("mean ratio rounds 100-2000 for D=0,25,50,100,200: {fmt} (non-decreasing, 0.01 slack)"),
        ),
        check(peak_200 >= 0.99, format!("D=200 peak {peak_200:.4} (>= 0.99)")),
        check(
            traces_equal,
            "simulator trace == orchestrator trace (refresh and evict)",
        ),
    ])
}

fn criterion_4() -> Outcome {
    const MB: f64 = 1e6;
    let dsfl = run_transport(&TransportConfig::full_scale(Method::Dsfl, 3000, 0), |_| {}).unwrap();
    let dsfl_exact = dsfl.ledger().costs().iter().all(|c| c.uplink_bytes == 4_800_000);
    let dsfl_down = dsfl
        .ledger()
        .costs()
        .iter()
        .skip(1)
        .map(|c| c.downlink_bytes as f64)
        .sum::<f64>()
        / 2999.0
        / MB;

    let scarlet = run_transport(&TransportConfig::full_scale(Method::Scarlet, 3000, 0), |_| {}).unwrap();
    let costs = scarlet.ledger().costs();
    let up: Vec<f64> = costs.iter().map(|c| c.uplink_bytes as f64 / MB).collect();
    let down: Vec<f64> = costs.iter().map(|c| c.downlink_bytes as f64 / MB).collect();
    let mean_up = up.iter().sum::<f64>() / up.len() as f64;
    let sd_up = (up.iter().map(|u| (u - mean_up).powi(2)).sum::<f64>() / up.len() as f64).sqrt();
    let max_up = up.iter().copied().fold(0.0, f64::max);
    let mean_down = down.iter().sum::<f64>() / down.len() as f64;
    let max_down = down.iter().copied().fold(0.0, f64::max);

    all(vec![
        check(dsfl_exact, "DSFL uplink 4.80 MB every round"),
        check(
            (mean_up - 1.37).abs() <= 0.15 * 1.37,
            format!("cached uplink mean {mean_up:.3} +- {sd_up:.2} MB (1.37 +- 15%)"),
        ),
        check(max_up <= 4.80, format!("cached uplink max {max_up:.2} MB (<= 4.80)")),
        check(
            (max_down - 6.32).abs() <= 0.15 * 6.32,
            format!("cached downlink max {max_down:.2} MB (6.32 +- 15%), mean {mean_down:.2} MB"),
        ),
        check(true, format!("DSFL downlink {dsfl_down:.2} MB/round (reported only)")),
    ])
}

fn criterion_5() -> Outcome {
    let mut worst = [0.0f64; 2];
    for (k, kind) in [LossKind::CrossEntropy, LossKind::KlToTeacher].into_iter().enumerate() {
        for seed in 0..100 {
            let inst = common::random_instance(1000 + seed, kind);
            worst[k] = worst[k].max(common::finite_difference_error(&inst, kind, 1e-5));
        }
    }

    let mut eq_grad = 0.0f64;
    let mut onehot_gap = 0.0f64;
    for seed in 0..100 {
        let inst = common::random_instance(2000 + seed, LossKind::KlToTeacher);
        let xs: Vec<&[f64]> = inst.xs.iter().map(Vec::as_slice).collect();
        let own = predict_soft_labels(&inst.model, &inst.xs).unwrap();
        let qs: Vec<&[f64]> = own.labels().iter().map(SoftLabel::probs).collect();
        let (_, g) = inst.model.loss_and_gradient(&xs, &qs, LossKind::KlToTeacher).unwrap();
        eq_grad = eq_grad.max(g.parameters().map(f64::abs).fold(0.0, f64::max));

        let inst = common::random_instance(3000 + seed, LossKind::CrossEntropy);
        let xs: Vec<&[f64]> = inst.xs.iter().map(Vec::as_slice).collect();
        let qs: Vec<&[f64]> = inst.targets.iter().map(Vec::as_slice).collect();
        let (_, a) = inst.model.loss_and_gradient(&xs, &qs, LossKind::CrossEntropy).unwrap();
        let (_, b) = inst.model.loss_and_gradient(&xs, &qs, LossKind::KlToTeacher).unwrap();
        onehot_gap = onehot_gap.max(
            a.parameters()
                .zip(b.parameters())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max),
        );
    }
    all(vec![
        check(
            worst[0] <= 1e-5,
            format!("CE finite-difference rel err {:.1e} (<= 1e-5)", worst[0]),
        ),
        check(
            worst[1] <= 1e-5,
            format!("KL finite-difference rel err {:.1e} (<= 1e-5)", worst[1]),
        ),
        check(
            eq_grad <= 1e-12,
            format!("KL gradient at teacher = student {eq_grad:.1e}"),
        ),
        check(
            onehot_gap <= 1e-12,
            format!("one-hot KL vs CE gradient gap {onehot_gap:.1e} (<= 1e-12)"),
        ),
    ])
}

struct RunResult {
    final_server: f64,
    best_client_global: f64,
    uplink: u64,
}

fn learning_run(method: Method, aggregation: AggregationPolicy, seed: u64) -> RunResult {
    let cfg = ExperimentConfig {
        method,
        aggregation,
        ..Default::default()
    }
    .with_seed(seed);
    let mut sim = Simulation::<LinearSoftmaxModel>::new(cfg).unwrap();
    sim.run().unwrap();
    let m = sim.metrics();
    RunResult {
        final_server: m.last().unwrap().server_test_accuracy,
        best_client_global: m.iter().map(|r| r.mean_client_global_accuracy).fold(0.0, f64::max),
        uplink: sim.ledger().totals().uplink_bytes,
    }
}

fn criterion_6() -> Outcome {
    let sharp = AggregationPolicy::EnhancedEra { beta: 1.5 };
    let seeds = 0..5u64;
    let mut scarlet = Vec::new();
    let mut individual = Vec::new();
    let mut dsfl = Vec::new();
    let mut plain = Vec::new();
    for seed in seeds {
        scarlet.push(learning_run(Method::Scarlet, sharp, seed));
        individual.push(learning_run(Method::Individual, AggregationPolicy::PlainMean, seed));
        dsfl.push(learning_run(Method::Dsfl, sharp, seed));
        plain.push(learning_run(Method::Scarlet, AggregationPolicy::PlainMean, seed));
    }
    let mean = |v: &[RunResult], f: fn(&RunResult) -> f64| v.iter().map(f).sum::<f64>() / v.len() as f64;
    let s_acc = mean(&scarlet, |r| r.final_server);
    let i_acc = mean(&individual, |r| r.best_client_global);
    let d_acc = mean(&dsfl, |r| r.final_server);
    let p_acc = mean(&plain, |r| r.final_server);
    let s_up: u64 = scarlet.iter().map(|r| r.uplink).sum();
    let d_up: u64 = dsfl.iter().map(|r| r.uplink).sum();
    let ratio = s_up as f64 / d_up as f64;
    all(vec![
        check(
            s_acc - i_acc >= 0.10,
            format!(
                "(a) cached server {:.2}% vs individual best client mean {:.2}% (gap >= 10 pts)",
                100.0 * s_acc,
                100.0 * i_acc
            ),
        ),
        check(
            ratio <= 0.5,
            format!("(b) uplink ratio cached/DSFL {ratio:.3} (<= 0.5)"),
        ),
        check(
            (s_acc - d_acc).abs() <= 0.02,
            format!(
                "(b) server accuracy cached {:.2}% vs DSFL {:.2}% (within 2 pts)",
                100.0 * s_acc,
                100.0 * d_acc
            ),
        ),
        check(
            s_acc >= p_acc - 0.01,
            format!(
                "(c) beta=1.5 {:.2}% vs plain mean {:.2}% (>= -1 pt)",
                100.0 * s_acc,
                100.0 * p_acc
            ),
        ),
    ])
}

fn criterion_7() -> Outcome {
    let base = ExperimentConfig {
        rounds: 100,
        aggregation: AggregationPolicy::PlainMean,
        ..Default::default()
    }
    .with_seed(7);
    let mut cached = Simulation::<LinearSoftmaxModel>::new(ExperimentConfig {
        method: Method::Scarlet,
        cache_duration: 0,
        ..base.clone()
    })
    .unwrap();
    let mut plain = Simulation::<LinearSoftmaxModel>::new(ExperimentConfig {
        method: Method::Dsfl,
        ..base
    })
    .unwrap();
    let mut label_mismatch = 0;
    let mut byte_mismatch = 0;
    for _ in 0..100 {
        cached.run_round().unwrap();
        plain.run_round().unwrap();
        if cached.protocol().last_assembled() != plain.protocol().last_assembled() {
            label_mismatch += 1;
        }
        let (a, b) = (
            cached.ledger().costs().last().unwrap(),
            plain.ledger().costs().last().unwrap(),
        );
        if a.uplink_softlabel_bytes != b.uplink_softlabel_bytes {
            byte_mismatch += 1;
        }
    }
    all(vec![
        check(
            label_mismatch == 0,
            format!("aggregated labels differ in {label_mismatch}/100 rounds"),
        ),
        check(
            byte_mismatch == 0,
            format!("uplink soft-label bytes differ in {byte_mismatch}/100 rounds"),
        ),
    ])
}

fn outputs(cfg: &ExperimentConfig, threads: usize) -> (Vec<u8>, Vec<u8>) {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| {
        let mut sim = Simulation::<LinearSoftmaxModel>::new(cfg.clone()).unwrap();
        sim.run().unwrap();
        let (mut metrics, mut comm) = (Vec::new(), Vec::new());
        sim.write_metrics_csv(&mut metrics).unwrap();
        sim.ledger().write_csv(&mut comm).unwrap();
        (metrics, comm)
    })
}

fn criterion_8() -> Outcome {
    let mut parts = Vec::new();
    for (name, cfg) in [
        (
            "cached p=0.5",
            ExperimentConfig {
                rounds: 60,
                participation_ratio: 0.5,
                ..Default::default()
            }
            .with_seed(21),
        ),
        (
            "DSFL",
            ExperimentConfig {
                rounds: 40,
                method: Method::Dsfl,
                ..Default::default()
            }
            .with_seed(22),
        ),
    ] {
        let a = outputs(&cfg, 1);
        let b = outputs(&cfg, 1);
        let c = outputs(&cfg, 4);
        parts.push(check(
            a == b && a == c,
            format!("{name}: metrics.csv and comm.csv identical across 2 runs at 1 thread and 1 at 4 threads"),
        ));
    }
    all(parts)
}

type Criterion = (u32, &'static str, Duration, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 8] = [
        (1, "aggregation math", Duration::from_secs(5), criterion_1),
        (2, "cache protocol", Duration::from_secs(30), criterion_2),
        (3, "cache-hit simulation", Duration::from_secs(10), criterion_3),
        (4, "communication accounting", Duration::from_secs(60), criterion_4),
        (5, "learner numerics", Duration::from_secs(10), criterion_5),
        (6, "end-to-end learning", Duration::from_secs(300), criterion_6),
        (7, "equivalence", Duration::from_secs(60), criterion_7),
        (8, "determinism", Duration::from_secs(60), criterion_8),
    ];
    let mut failed = 0;
    for (id, name, budget, run) in criteria {
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let pass = outcome.pass && elapsed <= budget;
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {id} {name}: {} [{:.1}s of {}s] {}",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            budget.as_secs(),
            outcome.detail
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
