//! Acceptance suite. Runs every criterion, prints one `criterion N ... PASS|FAIL`
//! line for each, and exits nonzero when any fails.

use std::time::{Duration, Instant};

use generalist::generalist::{EpochSource, GlobalState};
use generalist::harness::config::{ExperimentConfig, Method};
use generalist::harness::data::{gen_gaussians, EpochPlan};
use generalist::harness::experiment::Experiment;
use generalist::harness::metrics::union_rounded;
use generalist::model::per_example_ce;
use generalist::theory::{check_mixing_lemma, check_error_bound, small_probe_setup, stability_probe, stability_probe_random, ConvexFamily};
use generalist::{
    ema_aggregate, finite_diff_grad, gamma_at, lp_norm, pgd_attack, should_redistribute, train_generalist, Activation,
    AttackSpec, BaseLearner, Batch, GammaSchedule, GeneralistConfig, GeneralistRun, LayoutId, Matrix, Model, Norm,
    OptimizerKind, OptimizerState, ParameterVector, RngStream, ScheduleSpec, SyncSchedule, Task, Variant,
};

fn report(n: usize, name: &str, pass: bool, detail: String) {
    println!("criterion {n:>2} {name}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
}

fn random_batch(rng: &mut RngStream, n: usize, d: usize, k: usize) -> Batch {
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.uniform()).collect()).collect();
    let labels = (0..n).map(|_| rng.below(k)).collect();
    Batch::new(Matrix::from_rows(&rows).unwrap(), labels, k).unwrap()
}

/// Pre-activations of every hidden unit, from a scalar-loop forward pass.
fn hidden_preactivations(model: &Model, x: &[f64]) -> Vec<f64> {
    let sizes = model.layer_sizes();
    let p = model.params().as_slice();
    let mut off = 0;
    let mut a = x.to_vec();
    let mut out = Vec::new();
    for l in 0..sizes.len() - 1 {
        let (fi, fo) = (sizes[l], sizes[l + 1]);
        let w = &p[off..off + fi * fo];
        let b = &p[off + fi * fo..off + fi * fo + fo];
        off += fi * fo + fo;
        let z: Vec<f64> = (0..fo)
            .map(|r| b[r] + (0..fi).map(|c| w[r * fi + c] * a[c]).sum::<f64>())
            .collect();
        if l + 1 < sizes.len() - 1 {
            out.extend(&z);
            a = z.iter().map(|v| v.max(0.0)).collect();
        }
    }
    out
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn criterion_01_gradient_correctness() {
    let start = Instant::now();
    let mut rng = RngStream::new(2024, 1);
    let mut worst: f64 = 0.0;
    let mut made = 0;
    let mut resampled = 0;
    while made < 50 {
        let depth = 1 + rng.below(3);
        let d = 1 + rng.below(5);
        let mut sizes = vec![d];
        for _ in 0..depth - 1 {
            sizes.push(1 + rng.below(6));
        }
        sizes.push(2 + rng.below(3));
        let k = *sizes.last().unwrap();
        let act = if made % 2 == 0 { Activation::Tanh } else { Activation::Relu };
        let model = Model::init(sizes, act, &mut rng).unwrap();
        let n = 1 + rng.below(6);
        let batch = random_batch(&mut rng, n, d, k);
        if act == Activation::Relu {
            // finite differences across a kink are meaningless
            let near_kink = batch
                .inputs
                .iter_rows()
                .any(|x| hidden_preactivations(&model, x).iter().any(|z| z.abs() < 1e-3));
            if near_kink {
                resampled += 1;
                continue;
            }
        }
        made += 1;
        let g = model.backward(&batch).unwrap();
        let f = |p: &ParameterVector| {
            let m = model.with_params(p.clone()).unwrap();
            per_example_ce(&m.forward(&batch.inputs).unwrap(), &batch.labels).unwrap().iter().sum::<f64>()
                / batch.len() as f64
        };
        let fd = finite_diff_grad(f, model.params(), 1e-6).unwrap();
        for (a, b) in g.params.as_slice().iter().zip(fd.as_slice()) {
            worst = worst.max(rel_err(*a, *b));
        }
        let h = 1e-6;
        for i in 0..batch.len() {
            for j in 0..d {
                let mut up = batch.inputs.clone();
                let mut dn = batch.inputs.clone();
                up.row_mut(i)[j] += h;
                dn.row_mut(i)[j] -= h;
                let loss = |x: &Matrix| {
                    let v = per_example_ce(&model.forward(x).unwrap(), &batch.labels).unwrap();
                    v.iter().sum::<f64>() / v.len() as f64
                };
                let num = (loss(&up) - loss(&dn)) / (2.0 * h);
                worst = worst.max(rel_err(g.inputs.get(i, j), num));
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-4 && elapsed < Duration::from_secs(30);
    report(
        1,
        "gradient correctness",
        pass,
        format!("50 models, max rel err {worst:.2e}, {resampled} relu cases resampled, {:.1}s", elapsed.as_secs_f64()),
    );
    assert!(pass);
}

fn criterion_02_pgd_feasibility() {
    let start = Instant::now();
    let mut rng = RngStream::new(77, 2);
    let mut worst_excess = f64::NEG_INFINITY;
    let mut box_ok = true;
    let mut monotone_checked = 0;
    let mut monotone_fail = 0;
    for trial in 0..1000 {
        let d = 1 + rng.below(6);
        let k = 2 + rng.below(3);
        let act = if rng.below(2) == 0 { Activation::Tanh } else { Activation::Relu };
        let model = Model::init(vec![d, 1 + rng.below(6), k], act, &mut rng).unwrap();
        let n = 1 + rng.below(8);
        let batch = random_batch(&mut rng, n, d, k);
        let norm = if trial % 2 == 0 { Norm::Linf } else { Norm::L2 };
        let eps = 0.5 * rng.uniform();
        // the last 200 trials exercise the ascent property
        let ascent = trial >= 800;
        let spec = AttackSpec {
            norm,
            epsilon: eps,
            step_size: eps * (0.05 + 0.45 * rng.uniform()),
            steps: if ascent { 1 + rng.below(25) } else { rng.below(26) },
            random_start: !ascent && rng.below(2) == 0,
        };
        let mut attack_rng = RngStream::new(trial as u64, 9);
        let adv = pgd_attack(&model, &batch, &spec, &mut attack_rng).unwrap();
        for i in 0..batch.len() {
            let delta: Vec<f64> = adv.row(i).iter().zip(batch.inputs.row(i)).map(|(a, b)| a - b).collect();
            worst_excess = worst_excess.max(lp_norm(&delta, norm).unwrap() - eps);
            box_ok &= adv.row(i).iter().all(|v| (0.0..=1.0).contains(v));
        }
        if ascent {
            monotone_checked += 1;
            let mean = |x: &Matrix| {
                let v = per_example_ce(&model.forward(x).unwrap(), &batch.labels).unwrap();
                v.iter().sum::<f64>() / v.len() as f64
            };
            if mean(&adv) < mean(&batch.inputs) {
                monotone_fail += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = worst_excess <= 1e-9 && box_ok && monotone_fail == 0 && elapsed < Duration::from_secs(60);
    report(
        2,
        "PGD feasibility",
        pass,
        format!(
            "1000 attacks, max ||x'-x|| - eps = {worst_excess:.2e}, box {}, ascent failures {monotone_fail}/{monotone_checked}, {:.1}s",
            if box_ok { "ok" } else { "violated" },
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

fn criterion_03_ema_closed_form() {
    let layout = LayoutId(1);
    let mut s = GlobalState::new(ParameterVector::new(vec![0.0], layout).unwrap());
    let m = ParameterVector::new(vec![1.0], layout).unwrap();
    for _ in 0..100 {
        ema_aggregate(&mut s, &m, 0.999, &[1.0]).unwrap();
    }
    let closed = 1.0 - 0.999f64.powi(100);
    let err = (s.theta_g.as_slice()[0] - closed).abs();
    let pass = err <= 1e-12;
    report(
        3,
        "EMA closed form",
        pass,
        format!("theta_g {:.12}, closed form {closed:.12}, err {err:.1e}", s.theta_g.as_slice()[0]),
    );
    assert!(pass);
}

fn criterion_04_schedule_gate() {
    let sync = SyncSchedule {
        t_prime: 75,
        c: 5,
        total_epochs: 200,
    };
    let fired: Vec<usize> = (0..=200).filter(|&t| should_redistribute(&sync, t)).collect();
    let expected: Vec<usize> = (75..=200).step_by(5).collect();
    let g = GammaSchedule::default();
    let hold = (0..=750).all(|i| gamma_at(&g, i as f64 / 1000.0).unwrap() == 1.0);
    let mid = gamma_at(&g, 0.875).unwrap();
    let pass = fired == expected && hold && mid == 0.5;
    report(
        4,
        "schedule gate",
        pass,
        format!("{} firings from {} to {}, gamma hold {hold}, gamma(0.875) = {mid}", fired.len(), fired[0], fired[fired.len() - 1]),
    );
    assert!(pass);
}

fn criterion_05_union_arithmetic() {
    let a = union_rounded(46.07, 58.11, 2);
    let b = union_rounded(46.65, 67.12, 2);
    let pass = a == 52.09 && b == 56.89;
    report(5, "union arithmetic", pass, format!("(46.07, 58.11) -> {a}, (46.65, 67.12) -> {b}"));
    assert!(pass);
}

fn criterion_06_mixing_lemma() {
    let start = Instant::now();
    let r = check_mixing_lemma(10_000, 6);
    let elapsed = start.elapsed();
    let pass = r.passed() && elapsed < Duration::from_secs(30);
    let worst = r
        .worst_case
        .as_ref()
        .map(|c| format!("; worst case gamma {:?}, lhs {:.4}, rhs {:.4}", c.gamma, c.lhs, c.rhs))
        .unwrap_or_default();
    report(
        6,
        "mixing lemma",
        pass,
        format!(
            "{} violations in {} trials, worst slack {:.3e}{worst}, {:.1}s",
            r.violations,
            r.trials,
            r.worst_slack,
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass, "{} of {} trials violate the inequality", r.violations, r.trials);
}

fn criterion_07_expected_error_bound() {
    let start = Instant::now();
    let r = check_error_bound(&ConvexFamily::default(), 200, 0.1, 100, 7).unwrap();
    let elapsed = start.elapsed();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let pass = r.trials >= 200 && r.violation_fraction <= 0.15 && elapsed < Duration::from_secs(300);
    report(
        7,
        "expected-error bound",
        pass,
        format!(
            "{} trials, violation fraction {:.3}, mean lhs {:.4}, mean rhs {:.4}, mean R_T/T {:.4}, {:.1}s",
            r.trials,
            r.violation_fraction,
            mean(&r.lhs),
            mean(&r.rhs),
            mean(&r.regret) / r.rounds as f64,
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

fn criterion_08_degeneracy_collapse() {
    let epochs = 6;
    let data = gen_gaussians(8, 48, 16, 3, 2, 0.5).unwrap();
    let plan = EpochPlan {
        data: &data.train,
        batch_size: 12,
        seed: 8,
    };
    let model = Model::init(vec![3, 5, 2], Activation::Relu, &mut RngStream::new(8, 0)).unwrap();
    let learner = || {
        let opt = OptimizerState::new(OptimizerKind::sgd(0.9), 0.1, 1e-3, model.params()).unwrap();
        BaseLearner::new(Task::Natural, model.clone(), opt, None, Some(0.9), ScheduleSpec::constant(epochs), RngStream::new(8, 100))
            .unwrap()
    };
    let config = GeneralistConfig {
        ema_decay: 0.8,
        sync: SyncSchedule {
            t_prime: 2,
            c: 2,
            total_epochs: epochs,
        },
        ..GeneralistConfig::new(Variant::DNatLinf, epochs)
    };
    let alpha = config.ema_decay;
    let mut run = GeneralistRun::new(config.clone(), vec![learner(), learner()], model.params().clone()).unwrap();
    let mut trajectory = Vec::new();
    train_generalist(&mut run, &plan, |r| {
        trajectory.push(r.global.theta_g.clone());
        Ok(())
    })
    .unwrap();
    // single model with the same moving average applied
    let mut single = learner();
    let mut theta_g = model.params().clone();
    let mut reference = Vec::new();
    for epoch in 0..epochs {
        for b in plan.epoch_batches(epoch) {
            single.train_batch(&b, epoch).unwrap();
            for (g, m) in theta_g.as_mut_slice().iter_mut().zip(single.model.params().as_slice()) {
                *g = alpha * *g + (1.0 - alpha) * m;
            }
        }
        if should_redistribute(&config.sync, epoch + 1) {
            single.reset_to(&theta_g, true).unwrap();
        }
        reference.push(theta_g.clone());
    }
    let same = trajectory.len() == reference.len()
        && trajectory
            .iter()
            .zip(&reference)
            .all(|(a, b)| a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()));
    report(
        8,
        "degeneracy collapse",
        same,
        format!("{epochs}-epoch theta_g trajectory, bit-identical: {same}"),
    );
    assert!(same);
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn criterion_09_tradeoff_trend() {
    let start = Instant::now();
    let base = ExperimentConfig::load(&std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/default.toml")).unwrap();
    let final_record = |method: Method, seed: u64| {
        let cfg = ExperimentConfig {
            method,
            seed,
            ..base.clone()
        };
        let mut e = Experiment::new(cfg).unwrap();
        e.run(|_, _| Ok(())).unwrap().pop().unwrap()
    };
    let seeds = 0..5u64;
    let collect = |m: Method| seeds.clone().map(|s| final_record(m, s)).collect::<Vec<_>>();
    let nat_linf = collect(Method::GeneralistDNatLinf);
    let linf_l2 = collect(Method::GeneralistDLinfL2);
    let vanilla = collect(Method::AtVanilla);
    let med = |rs: &[generalist::harness::metrics::MetricsRecord], f: fn(&generalist::harness::metrics::MetricsRecord) -> f64| {
        median(rs.iter().map(f).collect())
    };
    let g_nat = med(&nat_linf, |r| r.natural_acc);
    let v_nat = med(&vanilla, |r| r.natural_acc);
    let g_linf = med(&nat_linf, |r| r.robust_acc_linf);
    let v_linf = med(&vanilla, |r| r.robust_acc_linf);
    let g_union = med(&linf_l2, |r| r.union);
    let v_union = med(&vanilla, |r| r.union);
    let elapsed = start.elapsed();
    let pass = g_nat >= v_nat && (g_linf - v_linf).abs() <= 0.05 && g_union >= v_union && elapsed < Duration::from_secs(600);
    report(
        9,
        "trade-off trend",
        pass,
        format!(
            "medians over 5 seeds: natural {g_nat:.4} vs {v_nat:.4}, pgd_linf {g_linf:.4} vs {v_linf:.4}, union (linf+l2) {g_union:.4} vs {v_union:.4}, {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

fn small_config(method: Method) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.method = method;
    c.seed = 10;
    c.data.n_train = 120;
    c.data.n_test = 60;
    c.data.dim = 3;
    c.data.batch_size = 30;
    c.model.hidden = vec![6];
    c.train.epochs = 6;
    c.train.constant_until = 3;
    c.sync.t_prime = Some(2);
    c.sync.c = Some(2);
    c.learner.natural.wa_decay = Some(0.9);
    c.generalist.aggregate_wa = false;
    c
}

fn jsonl(recs: &[generalist::harness::metrics::MetricsRecord]) -> String {
    recs.iter().map(|r| r.to_json_line() + "\n").collect()
}

fn criterion_10_determinism_and_persistence() {
    let mut ok = true;
    let mut details = Vec::new();
    for method in Method::ALL {
        let cfg = small_config(method);
        let mut seq = Experiment::new(cfg.clone()).unwrap();
        let a = jsonl(&seq.run(|_, _| Ok(())).unwrap());
        let mut par_cfg = cfg.clone();
        par_cfg.generalist.parallel = true;
        let b = jsonl(&Experiment::new(par_cfg).unwrap().run(|_, _| Ok(())).unwrap());
        let again = jsonl(&Experiment::new(cfg.clone()).unwrap().run(|_, _| Ok(())).unwrap());
        let parallel_same = a == b && a == again;
        let mut resume_same = true;
        for stop in 1..cfg.train.epochs {
            let mut e = Experiment::new(cfg.clone()).unwrap();
            let mut recs = Vec::new();
            for _ in 0..stop {
                recs.push(e.run_epoch().unwrap());
            }
            let bytes = e.checkpoint().to_bytes();
            let ck = generalist::harness::checkpoint::Checkpoint::from_bytes(&bytes).unwrap();
            let mut r = Experiment::from_checkpoint(&ck).unwrap();
            recs.extend(r.run(|_, _| Ok(())).unwrap());
            resume_same &= jsonl(&recs) == a && r.checkpoint() == seq.checkpoint();
        }
        ok &= parallel_same && resume_same;
        details.push(format!("{}: parallel {parallel_same}, resume {resume_same}", method.name()));
    }
    report(10, "determinism and persistence", ok, details.join("; "));
    assert!(ok);
}

fn criterion_11_stability_probe() {
    let setup = small_probe_setup(11, None, 0.9).unwrap();
    let noop = stability_probe(&setup, &[(5, 5)]).unwrap();
    let degenerate = stability_probe_random(&small_probe_setup(11, Some(1.0), 0.0).unwrap(), 4, 11).unwrap();
    let probe = stability_probe_random(&setup, 4, 11).unwrap();
    let identities = [&noop, &degenerate, &probe].iter().all(|p| {
        let oplus: f64 = p.gamma.iter().zip(&p.per_task_eps).map(|(g, e)| g * e).sum();
        p.eps_oplus == oplus
            && p.global_eps.is_finite()
            && p.global_eps >= 0.0
            && p.drift >= 0.0
            && p.per_task_eps.iter().all(|e| *e >= 0.0)
    });
    let pass = noop.global_eps == 0.0 && degenerate.global_eps == degenerate.per_task_eps[0] && identities;
    report(
        11,
        "stability probe",
        pass,
        format!(
            "no-op eps_g {}, degenerate eps_g {:.6e} vs eps_1 {:.6e}, identities {identities}; random swaps eps_g {:.3e}, eps_oplus {:.3e}, drift {:.3e}",
            noop.global_eps, degenerate.global_eps, degenerate.per_task_eps[0], probe.global_eps, probe.eps_oplus, probe.drift
        ),
    );
    assert!(pass);
}

fn main() {
    let criteria: [(&str, fn()); 11] = [
        ("criterion_01_gradient_correctness", criterion_01_gradient_correctness),
        ("criterion_02_pgd_feasibility", criterion_02_pgd_feasibility),
        ("criterion_03_ema_closed_form", criterion_03_ema_closed_form),
        ("criterion_04_schedule_gate", criterion_04_schedule_gate),
        ("criterion_05_union_arithmetic", criterion_05_union_arithmetic),
        ("criterion_06_mixing_lemma", criterion_06_mixing_lemma),
        ("criterion_07_expected_error_bound", criterion_07_expected_error_bound),
        ("criterion_08_degeneracy_collapse", criterion_08_degeneracy_collapse),
        ("criterion_09_tradeoff_trend", criterion_09_tradeoff_trend),
        ("criterion_10_determinism_and_persistence", criterion_10_determinism_and_persistence),
        ("criterion_11_stability_probe", criterion_11_stability_probe),
    ];
    let mut failed = Vec::new();
    for (name, run) in criteria {
        if std::panic::catch_unwind(run).is_err() {
            failed.push(name);
        }
    }
    if failed.is_empty() {
        println!("all 11 criteria pass");
    } else {
        println!("{} of 11 criteria fail: {}", failed.len(), failed.join(", "));
        std::process::exit(1);
    }
}
