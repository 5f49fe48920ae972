//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any fails.


use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use slowfast_core::data::{make_synthetic_stream_with, SyntheticConfig, TaskStream};
use slowfast_core::dreaming::{dream_objective, dream_roster, initial_noise, DreamConfig};
use slowfast_core::fusion::{
    barrier_sweep, fuse_linear, fuse_weighted, meta_fuse, EvalSet, FusionWeights, Granularity, MetaConfig,
};
use slowfast_core::harness::{run_continual, ExperimentConfig, FusionMethod, ProjectionMode, StreamConfig, TrunkConfig};
use slowfast_core::metrics::AccMatrix;
use slowfast_core::projector::{accumulate_task, build_basis, ProjectorKind, RankPolicy};
use slowfast_core::rng::derive_seed;
use slowfast_core::tape::one_hot;
use slowfast_core::trainer::{train_fast, train_first_task, train_slow, PhaseConfig};
use slowfast_core::{Network, Tensor};

const SEEDS: u64 = 10;

type Outcome = Result<String, String>;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Runs `f`, turning panics into failures.
fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(msg)
    })
}

fn within(limit: Duration, t0: Instant, out: Outcome) -> Outcome {
    let took = t0.elapsed();
    let out = out.map(|d| format!("{d}; {:.1}s", took.as_secs_f64()));
    match out {
        Ok(d) if took > limit => Err(format!("{d} exceeds {}s", limit.as_secs())),
        other => other,
    }
}

fn synthetic(tasks: usize, seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        tasks,
        seed,
        overlap: 0.75,
        ..SyntheticConfig::default()
    }
}

/// Desk-scale continual configuration shared by the ordering criteria.
fn experiment(tasks: usize, seed: u64, method: &str) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed,
        stream: StreamConfig::synthetic(synthetic(tasks, seed)),
        trunk: TrunkConfig::Mlp { hidden: vec![16, 16] },
        first: PhaseConfig::new(20, 3e-3),
        slow: PhaseConfig::new(10, 1e-3),
        fast: PhaseConfig::new(5, 1e-2),
        dream: DreamConfig {
            steps: 200,
            ..DreamConfig::default()
        },
        ..ExperimentConfig::default()
    };
    cfg.projector.policy = RankPolicy::RelativeThreshold { epsilon: 0.02 };
    cfg.fusion.meta = MetaConfig {
        steps: 100,
        ..MetaConfig::default()
    };
    match method {
        "naive" => {
            cfg.projector.mode = ProjectionMode::None;
            cfg.fusion.method = FusionMethod::None;
        }
        "tpnsp" => cfg.fusion.method = FusionMethod::SlowOnly,
        "nsp" => {
            cfg.projector.mode = ProjectionMode::Nsp;
            cfg.fusion.method = FusionMethod::SlowOnly;
        }
        "linear" => cfg.fusion.method = FusionMethod::LinearAuto,
        "meta" => cfg.fusion.method = FusionMethod::Meta,
        other => panic!("unknown method {other}"),
    }
    cfg
}

struct Sweep {
    acc: f64,
    bwt: f64,
    drop: f64,
}

fn sweep(tasks: usize, method: &str) -> Sweep {
    let (mut accs, mut bwts, mut drops) = (vec![], vec![], vec![]);
    for seed in 0..SEEDS {
        let r = run_continual(&experiment(tasks, seed, method)).unwrap();
        accs.push(r.acc.acc().unwrap());
        bwts.push(r.acc.bwt().unwrap());
        let drop = r
            .tasks
            .iter()
            .flat_map(|t| t.old_acc_before_slow.iter().zip(&t.old_acc_after_slow).map(|(b, a)| b - a))
            .fold(f64::MIN, f64::max);
        drops.push(drop);
    }
    Sweep {
        acc: median(accs),
        bwt: median(bwts),
        drop: median(drops),
    }
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let checks: [(&str, fn()); 8] = [
        ("matmul", gradcheck::matmul),
        ("add_sub_mul", gradcheck::add_sub_mul),
        ("scale_sum_bias_row_mean", gradcheck::scale_sum_bias_row_mean),
        ("relu", gradcheck::relu),
        ("gather_and_transpose", gradcheck::gather_and_transpose),
        ("softmax_cross_entropy_and_kl", gradcheck::softmax_cross_entropy_and_kl),
        ("batch_norm", gradcheck::batch_norm),
        ("networks_end_to_end", gradcheck::networks_end_to_end),
    ];
    for (name, f) in checks {
        guarded(|| {
            f();
            Ok(String::new())
        })
        .map_err(|e| format!("{name}: {e}"))?;
    }
    within(Duration::from_secs(60), t0, Ok(format!("{} primitive groups", checks.len())))
}

fn criterion_2() -> Outcome {
    projection::capture_reproduces_weight_gradients();
    Ok("linear and conv layers, train and eval modes, 1e-10".into())
}

fn criterion_3() -> Outcome {
    projection::exact_null_projection_kills_held_out_first_order_change();
    Ok(format!("{SEEDS} seeds, every held-out batch ≥ 100x"))
}

fn criterion_4() -> Outcome {
    for i in 0..256u64 {
        let dim = 2 + (i % 9) as usize;
        projection::check_projector(dim, (i as usize / 9) % (dim + 1), 1 + (i % 5) as usize, i);
    }
    projection::slow_phase_steps_stay_in_span();
    projection::svd_agrees_with_independent_eigensolver();
    projection::tpnsp_rank_at_least_nsp_rank();
    Ok("256 random spans; slow steps within 1e-8; SVD matches eigensolver".into())
}

fn criterion_5() -> Outcome {
    let t0 = Instant::now();
    let tp = sweep(5, "tpnsp");
    let nsp = sweep(5, "nsp");
    let naive = sweep(5, "naive");
    let detail = format!(
        "ACC tpnsp {:.2} > nsp {:.2}; BWT nsp {:.2} > naive {:.2}; tpnsp slow-phase drop {:.2}",
        tp.acc, nsp.acc, nsp.bwt, naive.bwt, tp.drop
    );
    let ok = tp.acc > nsp.acc && nsp.bwt > naive.bwt && tp.drop <= 2.0;
    within(Duration::from_secs(600), t0, ensure(ok, detail))
}

fn fusion_parents(seed: u64) -> (Network, Network, Network) {
    let stream = make_synthetic_stream_with(&synthetic(2, seed)).unwrap();
    let specs = TrunkConfig::Mlp { hidden: vec![16, 16] }.specs(&stream.input_shape).unwrap();
    let init = Network::new(&stream.input_shape, &specs, seed).unwrap();
    let prev = train_first_task(&init, &stream.tasks[0], &PhaseConfig::new(3, 3e-3)).unwrap().net;
    let acc = accumulate_task(&prev, 0, &stream.tasks[0].train, ProjectorKind::Tpnsp, 256).unwrap();
    let basis = build_basis(&[&acc], RankPolicy::default()).unwrap();
    let slow = train_slow(&prev, &stream.tasks[1], &basis, &PhaseConfig::new(2, 1e-3)).unwrap().net;
    let fast = train_fast(&slow, &stream.tasks[1], &PhaseConfig::new(2, 1e-2)).unwrap().net;
    (prev, slow, fast)
}

fn max_diff(a: &Network, b: &Network) -> f64 {
    let mut d: f64 = 0.0;
    for (x, y) in a.layers().iter().zip(b.layers()) {
        for (p, q) in x.params.iter().chain(&x.buffers).zip(y.params.iter().chain(&y.buffers)) {
            d = d.max(p.max_abs_diff(q));
        }
    }
    for (t, h) in a.heads() {
        let g = b.head(*t).unwrap();
        d = d.max(h.weight.max_abs_diff(&g.weight)).max(h.bias.max_abs_diff(&g.bias));
    }
    d
}

fn criterion_6() -> Outcome {
    let (prev, slow, fast) = fusion_parents(0);
    let mut worst = [0.0f64; 3];
    if fuse_linear(&slow, &fast, 1.0).unwrap() != slow || fuse_linear(&slow, &fast, 0.0).unwrap() != fast {
        return Err("linear endpoints are not bitwise parents".into());
    }
    for gran in [Granularity::PerLayer, Granularity::PerChannel, Granularity::PerParameter] {
        for (pre, parent) in [(40.0, &slow), (-40.0, &fast)] {
            let w = FusionWeights::constant_pre(&slow, Some(1), gran, pre).unwrap();
            worst[0] = worst[0].max(max_diff(&fuse_weighted(Some(&prev), &slow, &fast, &w).unwrap(), parent));
        }
        let mut w = FusionWeights::constant(&slow, Some(1), gran, 0.5).unwrap();
        let lin = fuse_linear(&slow, &fast, 0.5).unwrap();
        worst[2] = worst[2].max(max_diff(&fuse_weighted(Some(&prev), &slow, &fast, &w).unwrap(), &lin));
        for (k, g) in w.groups.iter_mut().enumerate() {
            for (i, p) in g.pre.iter_mut().enumerate() {
                *p = ((3 * k + i) as f64 * 0.7).sin() * 3.0;
            }
        }
        let delta_form = fuse_weighted(Some(&prev), &slow, &fast, &w).unwrap();
        let direct_form = fuse_weighted(None, &slow, &fast, &w).unwrap();
        worst[1] = worst[1].max(max_diff(&delta_form, &direct_form));
    }
    let detail = format!(
        "linear endpoints bitwise; saturated A {:.1e}; delta vs direct form {:.1e}; A=0.5 vs α=0.5 {:.1e}",
        worst[0], worst[1], worst[2]
    );
    ensure(worst[0] <= 1e-6 && worst[1] <= 1e-12 && worst[2] <= 1e-12, detail)
}

fn criterion_7() -> Outcome {
    let mut pass = 0;
    let mut gaps = Vec::new();
    for seed in 0..SEEDS {
        let stream: TaskStream = make_synthetic_stream_with(&synthetic(2, seed)).unwrap();
        let specs = TrunkConfig::Mlp { hidden: vec![16, 16] }.specs(&stream.input_shape).unwrap();
        let init = Network::new(&stream.input_shape, &specs, derive_seed(seed, "init", 0)).unwrap();
        let w0 = train_first_task(&init, &stream.tasks[0], &PhaseConfig::new(20, 3e-3).with_seed(seed)).unwrap().net;
        let acc = accumulate_task(&w0, 0, &stream.tasks[0].train, ProjectorKind::Tpnsp, 256).unwrap();
        let basis = build_basis(&[&acc], RankPolicy::RelativeThreshold { epsilon: 0.02 }).unwrap();
        let slow = train_slow(&w0, &stream.tasks[1], &basis, &PhaseConfig::new(10, 1e-3).with_seed(seed + 1)).unwrap().net;
        let fast = train_fast(&slow, &stream.tasks[1], &PhaseConfig::new(5, 1e-2).with_seed(seed + 2)).unwrap().net;
        let range = (stream.normalization.min, stream.normalization.max);
        let dc = DreamConfig {
            steps: 200,
            ..DreamConfig::default()
        };
        let mut dreams = dream_roster(&slow, &[(0, 2)], &dc, seed, range).unwrap();
        dreams.extend(dream_roster(&fast, &[(1, 2)], &dc, seed + 7, range).unwrap());
        let fused = meta_fuse(&w0, &slow, &fast, 1, &dreams, &MetaConfig::default()).unwrap();
        let sets: Vec<EvalSet> = dreams.values().cloned().map(EvalSet::Dreams).collect();
        let (_, linear_best) = barrier_sweep(&slow, &fast, &sets, 21).unwrap().best();
        if fused.loss_end <= linear_best + 1e-6 {
            pass += 1;
        }
        gaps.push(linear_best - fused.loss_end);
    }
    ensure(
        pass >= 9,
        format!("{pass}/{SEEDS} seeds meta ≤ best of 21 α; median margin {:.4}", median(gaps)),
    )
}

fn criterion_8() -> Outcome {
    let t0 = Instant::now();
    let mut ok = true;
    let mut detail = Vec::new();
    for tasks in [2, 5] {
        let meta = sweep(tasks, "meta");
        let linear = sweep(tasks, "linear");
        let naive = sweep(tasks, "naive");
        ok &= meta.acc >= linear.acc && linear.acc >= naive.acc && meta.bwt >= naive.bwt + 5.0;
        detail.push(format!(
            "{tasks}-task ACC meta {:.2} ≥ linear {:.2} ≥ naive {:.2}, BWT meta {:.2} vs naive {:.2}",
            meta.acc, linear.acc, naive.acc, meta.bwt, naive.bwt
        ));
    }
    within(Duration::from_secs(1200), t0, ensure(ok, detail.join("; ")))
}

fn criterion_9() -> Outcome {
    let (mut fidelity, mut worse) = (Vec::new(), 0);
    for seed in 0..SEEDS {
        let stream = make_synthetic_stream_with(&synthetic(1, seed)).unwrap();
        let specs = TrunkConfig::Mlp { hidden: vec![16, 16] }.specs(&stream.input_shape).unwrap();
        let init = Network::new(&stream.input_shape, &specs, seed).unwrap();
        let model = train_first_task(&init, &stream.tasks[0], &PhaseConfig::new(20, 3e-3).with_seed(seed)).unwrap().net;
        let range = (stream.normalization.min, stream.normalization.max);
        let cfg = DreamConfig {
            steps: 200,
            ..DreamConfig::default()
        };
        let before = model.clone();
        let d = dream_roster(&model, &[(0, 2)], &cfg, seed, range).unwrap().remove(&0).unwrap();
        if model != before {
            return Err(format!("seed {seed}: dreaming changed the model"));
        }
        fidelity.push(d.fidelity());
        let targets: Tensor = one_hot(&d.query_labels, 2).unwrap();
        let dreamed = dream_objective(&model, &d.inputs, 0, &targets, 1.0).unwrap().bn;
        let noise = initial_noise(&model, d.len(), derive_seed(seed, "raw-noise", 0), range);
        let raw = dream_objective(&model, &noise, 0, &targets, 1.0).unwrap().bn;
        if dreamed >= raw {
            worse += 1;
        }
    }
    let min = fidelity.iter().copied().fold(f64::MAX, f64::min);
    ensure(
        min >= 0.9 && worse == 0,
        format!("lowest fidelity {:.1}% over {SEEDS} seeds; BN penalty above noise on {worse}", 100.0 * min),
    )
}

fn criterion_10() -> Outcome {
    let constant = AccMatrix::from_rows(&[vec![70.0], vec![70.0, 70.0], vec![70.0, 70.0, 70.0]]).unwrap();
    let two = AccMatrix::from_rows(&[vec![90.0], vec![80.0, 60.0]]).unwrap();
    let (b0, b1, a1) = (constant.bwt().unwrap(), two.bwt().unwrap(), two.acc().unwrap());
    ensure(
        b0 == 0.0 && b1 == -10.0 && a1 == 70.0,
        format!("constant BWT {b0}; two-task BWT {b1}, ACC {a1}"),
    )
}

fn criterion_11() -> Outcome {
    let cfg = experiment(5, 3, "meta");
    let a = run_continual(&cfg).unwrap().acc;
    let b = run_continual(&cfg).unwrap().acc;
    let bits = |m: &AccMatrix| -> Vec<Option<u64>> {
        (0..m.tasks())
            .flat_map(|r| (0..m.tasks()).map(move |c| (r, c)))
            .map(|(r, c)| m.get(r, c).map(f64::to_bits))
            .collect()
    };
    ensure(bits(&a) == bits(&b), "5-task meta run repeated, every entry bitwise equal".into())
}

fn main() {
    let criteria: BTreeMap<u32, (&str, fn() -> Outcome)> = BTreeMap::from([
        (1, ("gradient correctness", criterion_1 as fn() -> Outcome)),
        (2, ("capture identity", criterion_2)),
        (3, ("projection nullity", criterion_3)),
        (4, ("projection algebra", criterion_4)),
        (5, ("stability/plasticity ordering", criterion_5)),
        (6, ("fusion identities", criterion_6)),
        (7, ("meta beats linear on dreams", criterion_7)),
        (8, ("end-to-end ordering", criterion_8)),
        (9, ("dream fidelity", criterion_9)),
        (10, ("metric hand cases", criterion_10)),
        (11, ("reproducibility", criterion_11)),
    ]);
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (n, (name, f)) in &criteria {
        match guarded(f) {
            Ok(d) => println!("criterion {n:>2} {name}: PASS ({d})"),
            Err(d) => {
                failed += 1;
                println!("criterion {n:>2} {name}: FAIL ({d})");
            }
        }
    }
    println!("acceptance: {} of {} criteria pass", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
