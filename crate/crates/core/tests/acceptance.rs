//! Acceptance suite. Runs every criterion at its stated tolerance and prints
//! one PASS/FAIL line per criterion; exits nonzero if any fail.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use uapath::data::{generate_bags, generate_synthetic, make_splits, BagSpec, PatchDataset, SplitTag, SyntheticSpec};
use uapath::evidential::{
    evidential_mse_loss, kl_to_uniform, one_hot, opinion_from_evidence, total_evidential_loss,
    total_evidential_loss_grad, AnnealSchedule, Reduction,
};
use uapath::mil::{
    attention_map, dtfd_loss, dtfd_loss_grad, split_pseudo_bags, train_mil, Bag, DistillStrategy, MilConfig, MilNet,
};
use uapath::model::{EncoderConfig, HeadKind, ModelCheckpoint, ProjectionHeadConfig};
use uapath::report::{binary_auc, compute_metrics, macro_f1};
use uapath::sslpipe::{distill, evaluate, finetune, ntxent_loss, ntxent_loss_grad, pretrain, StageConfig};
use uapath::ualoop::{run_ua_loop, Selection, UaLoopConfig};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// ||a - n|| / max(||a||, ||n||), or the absolute difference norm when both
/// are below 1e-8.
fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale = analytic
        .iter()
        .map(|a| a * a)
        .sum::<f64>()
        .sqrt()
        .max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt());
    if scale < 1e-8 {
        diff
    } else {
        diff / scale
    }
}

fn central_diff(x: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + eps;
            let up = f(&x);
            x[i] = orig - eps;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let k = r.random_range(2..=10);
        let e: Vec<f64> = (0..k)
            .map(|_| if r.random_bool(0.2) { 0.0 } else { r.random_range(0.0..50.0) })
            .collect();
        let o = opinion_from_evidence(&e).unwrap();
        worst = worst.max((o.uncertainty + o.beliefs.iter().sum::<f64>() - 1.0).abs());
    }
    let zero_exact = (2..=10).all(|k| opinion_from_evidence(&vec![0.0; k]).unwrap().uncertainty == 1.0);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-9 && zero_exact && secs < 1.0,
        format!("max |u + sum b - 1| = {worst:.1e}, zero evidence u == 1: {zero_exact}, {secs:.3}s"),
    )
}

/// Monte-Carlo estimate of E||y - p||^2 under Dir(alpha): mean and standard error.
fn mc_bayes_risk(alpha: &[f64], y: &[f64], draws: usize, seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let gammas: Vec<Gamma<f64>> = alpha.iter().map(|&a| Gamma::new(a, 1.0).unwrap()).collect();
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    let mut g = vec![0.0; alpha.len()];
    for _ in 0..draws {
        for (v, d) in g.iter_mut().zip(&gammas) {
            *v = d.sample(&mut r);
        }
        let total: f64 = g.iter().sum();
        let sq: f64 = g.iter().zip(y).map(|(v, yk)| (yk - v / total).powi(2)).sum();
        sum += sq;
        sum_sq += sq * sq;
    }
    let n = draws as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean) * n / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let draws = 200_000;
    let mut r = rng(2);
    let mut worst_z = 0.0f64;
    for case in 0..50 {
        let k = r.random_range(2..=5);
        let alpha: Vec<f64> = (0..k).map(|_| r.random_range(1.0..20.0)).collect();
        let y = one_hot(r.random_range(0..k), k);
        let closed = evidential_mse_loss(&alpha, &y).unwrap();
        let (mc, se) = mc_bayes_risk(&alpha, &y, draws, 1000 + case);
        worst_z = worst_z.max((closed - mc).abs() / se);
    }
    let f1 = evidential_mse_loss(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
    let f2 = evidential_mse_loss(&[101.0, 1.0], &[1.0, 0.0]).unwrap();
    let fixtures = (f1 - 0.66667).abs() < 5e-6 && (f2 - 3.81e-4).abs() < 5e-7;
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_z <= 3.0 && fixtures && secs < 60.0,
        format!("worst |closed - MC| = {worst_z:.2} SE over 50 cases; fixtures {f1:.5}, {f2:.3e}; {secs:.1}s"),
    )
}

/// KL(Beta(a, b) || Beta(1, 1)) = integral of f ln f, by composite Simpson.
fn kl_quadrature(a: f64, b: f64) -> f64 {
    let ln_beta = statrs::function::gamma::ln_gamma(a) + statrs::function::gamma::ln_gamma(b)
        - statrs::function::gamma::ln_gamma(a + b);
    let integrand = |p: f64| {
        if p <= 0.0 || p >= 1.0 {
            // a, b >= 1: the density is finite at the ends, f ln f -> 0 or finite
            let lf = if p <= 0.0 {
                if a == 1.0 { -ln_beta } else { f64::NEG_INFINITY }
            } else if b == 1.0 {
                -ln_beta
            } else {
                f64::NEG_INFINITY
            };
            return if lf.is_finite() { lf.exp() * lf } else { 0.0 };
        }
        let lf = (a - 1.0) * p.ln() + (b - 1.0) * (1.0 - p).ln() - ln_beta;
        lf.exp() * lf
    };
    let n = 200_000;
    let h = 1.0 / n as f64;
    let mut s = integrand(0.0) + integrand(1.0);
    for i in 1..n {
        s += integrand(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn criterion_3() -> Outcome {
    let mut r = rng(3);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let a = r.random_range(1.0..12.0);
        let b = r.random_range(1.0..12.0);
        worst = worst.max((kl_to_uniform(&[a, b]).unwrap() - kl_quadrature(a, b)).abs());
    }
    let uniform_zero = (2..=8).all(|k| kl_to_uniform(&vec![1.0; k]).unwrap() == 0.0);
    let two_one = kl_to_uniform(&[2.0, 1.0]).unwrap();
    let fixture = (two_one - (2f64.ln() - 0.5)).abs() <= 1e-6;
    outcome(
        worst <= 1e-4 && uniform_zero && fixture,
        format!("max |KL - quadrature| = {worst:.1e}; KL(1..1) == 0: {uniform_zero}; KL(2,1) = {two_one:.8}"),
    )
}

fn criterion_4() -> Outcome {
    let eps = 1e-3;
    let mut r = rng(4);
    let schedule = AnnealSchedule::default();

    let mut evid = 0.0f64;
    for _ in 0..20 {
        let k = r.random_range(2..=5);
        let n = r.random_range(1..=4);
        let t = r.random_range(1..=15);
        let reduction = if r.random_bool(0.5) { Reduction::Sum } else { Reduction::Mean };
        let ys: Vec<Vec<f64>> = (0..n).map(|_| one_hot(r.random_range(0..k), k)).collect();
        let flat: Vec<f64> = (0..n * k).map(|_| r.random_range(1.2..15.0)).collect();
        let batch = |x: &[f64]| -> Vec<(Vec<f64>, Vec<f64>)> {
            x.chunks(k).zip(&ys).map(|(a, y)| (a.to_vec(), y.clone())).collect()
        };
        let (_, g) = total_evidential_loss_grad(&batch(&flat), t, &schedule, reduction).unwrap();
        let analytic: Vec<f64> = g.into_iter().flatten().collect();
        let numeric = central_diff(&flat, eps, |x| total_evidential_loss(&batch(x), t, &schedule, reduction).unwrap());
        evid = evid.max(rel_err(&analytic, &numeric));
    }

    let mut ntx = 0.0f64;
    for _ in 0..20 {
        let pairs = r.random_range(2..=4);
        let dim = r.random_range(2..=5);
        let tau = r.random_range(0.2..1.0);
        let z: Vec<f64> = (0..2 * pairs * dim).map(|_| r.random_range(-1.0..1.0)).collect();
        let (_, analytic) = ntxent_loss_grad(&z, dim, tau).unwrap();
        let numeric = central_diff(&z, eps, |x| ntxent_loss(x, dim, tau).unwrap());
        ntx = ntx.max(rel_err(&analytic, &numeric));
    }

    let mut dtfd = 0.0f64;
    for _ in 0..20 {
        let m = r.random_range(1..=5);
        let label = r.random_bool(0.5);
        let mut x: Vec<f64> = (0..m).map(|_| r.random_range(-3.0..3.0)).collect();
        x.push(r.random_range(0.05..0.95));
        let (_, dl, dp) = dtfd_loss_grad(&x[..m], x[m], label);
        let analytic: Vec<f64> = dl.into_iter().chain([dp]).collect();
        let numeric = central_diff(&x, eps, |v| dtfd_loss(&v[..m], v[m], label));
        dtfd = dtfd.max(rel_err(&analytic, &numeric));
    }

    // the same objective through the whole two-tier network
    let mut net_err = 0.0f64;
    for case in 0..20u64 {
        let dim = r.random_range(2..=4);
        let n = r.random_range(3..=8);
        let features: Vec<f64> = (0..n * dim).map(|_| r.random_range(-1.5..1.5)).collect();
        let bag = Bag::new(format!("b{case}"), r.random_bool(0.5), features, dim, None).unwrap();
        let mut net = MilNet::new(dim, None, 3, DistillStrategy::Afs, case).unwrap();
        let parts = split_pseudo_bags(&bag, 2.min(n), case).unwrap();
        let (_, analytic) = net.loss_and_grad(&bag, &parts).unwrap();
        let theta = net.theta.clone();
        let numeric = central_diff(&theta, eps, |t| {
            net.theta.copy_from_slice(t);
            net.loss(&bag, &parts).unwrap()
        });
        net_err = net_err.max(rel_err(&analytic, &numeric));
    }

    let worst = evid.max(ntx).max(dtfd).max(net_err);
    outcome(
        worst < 1e-4,
        format!(
            "max rel err: evidential {evid:.1e}, NT-Xent {ntx:.1e}, DTFD loss {dtfd:.1e}, DTFD network {net_err:.1e}"
        ),
    )
}

fn criterion_5() -> Outcome {
    // two pairs of identical views, the pairs orthogonal to each other
    let z = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0];
    let fixture = ntxent_loss(&z, 2, 1.0).unwrap();
    let mut worst = 0.0f64;
    for pairs in 2..=8usize {
        let z: Vec<f64> = (0..2 * pairs).flat_map(|_| [0.3, -1.2, 0.5]).collect();
        let expected = ((2 * pairs - 1) as f64).ln();
        worst = worst.max((ntxent_loss(&z, 3, 0.5).unwrap() - expected).abs());
    }
    outcome(
        (fixture - 0.5514).abs() <= 1e-4 && worst <= 1e-6,
        format!("orthogonal pairs {fixture:.5}; max |identical - ln(2N-1)| = {worst:.1e}"),
    )
}

fn three_class(seed: u64, samples_per_class: usize, extra: impl FnOnce(&mut SyntheticSpec)) -> PatchDataset {
    let mut spec = SyntheticSpec {
        samples_per_class,
        texture_seed: seed,
        ..Default::default()
    };
    extra(&mut spec);
    generate_synthetic(&spec).unwrap()
}

fn criterion_6() -> Outcome {
    let mut teacher_acc = Vec::new();
    let mut student_acc = Vec::new();
    let mut secs = Vec::new();
    for seed in SEEDS {
        let all = three_class(seed, 1200, |_| {});
        let (train, _, test) = make_splits(&all, (5.0 / 6.0, 0.0, 1.0 / 6.0), seed).unwrap();
        assert_eq!((train.len(), test.len()), (3000, 600));
        let start = Instant::now();
        let pre_cfg = StageConfig {
            seed,
            ..StageConfig::pretrain_default()
        };
        let pre = pretrain(&train, &EncoderConfig::default(), &ProjectionHeadConfig::default(), &pre_cfg).unwrap();
        let ft_cfg = StageConfig {
            seed,
            label_fraction: 0.05,
            ..StageConfig::finetune_default()
        };
        let teacher = finetune(&pre.checkpoint, &train, HeadKind::Softmax, &ft_cfg).unwrap();
        let d_cfg = StageConfig {
            seed,
            ..StageConfig::distill_default()
        };
        let arch = teacher.checkpoint.meta.architecture.clone();
        let student = distill(&teacher.checkpoint, &train, &arch, &d_cfg).unwrap();
        secs.push(start.elapsed().as_secs_f64());
        teacher_acc.push(evaluate(&teacher.checkpoint.model().unwrap(), &test).unwrap().metrics.accuracy);
        student_acc.push(evaluate(&student.checkpoint.model().unwrap(), &test).unwrap().metrics.accuracy);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (t, s, w) = (mean(&teacher_acc), mean(&student_acc), mean(&secs));
    let threads = rayon::current_num_threads();
    outcome(
        s >= 0.90 && t - s <= 0.02 && w < 600.0,
        format!(
            "student acc {s:.4}, teacher {t:.4} (per seed {student_acc:.3?}); mean wall time {w:.0}s on {threads} thread(s)"
        ),
    )
}

/// Hard, class-imbalanced data shared by the uncertainty criteria.
fn imbalanced(seed: u64) -> (PatchDataset, PatchDataset) {
    let all = three_class(seed, 1000, |s| {
        s.class_separation = 0.8;
        s.class_weights = Some(vec![6.0, 3.0, 1.0]);
    });
    let (train, _, test) = make_splits(&all, (0.8, 0.0, 0.2), seed).unwrap();
    (train, test)
}

fn imbalanced_pretrain(train: &PatchDataset, seed: u64) -> ModelCheckpoint {
    let cfg = StageConfig {
        seed,
        epochs: 10,
        ..StageConfig::pretrain_default()
    };
    pretrain(train, &EncoderConfig::default(), &ProjectionHeadConfig::default(), &cfg)
        .unwrap()
        .checkpoint
}

fn criteria_7_and_8() -> (Outcome, Outcome) {
    let mut separated = 0;
    let mut u_detail = Vec::new();
    let mut ua_acc = Vec::new();
    let mut random_acc = Vec::new();
    let mut leak_ok = true;
    for seed in SEEDS {
        let (train, test) = imbalanced(seed);
        let pre = imbalanced_pretrain(&train, seed);

        let ft_cfg = StageConfig {
            seed,
            label_fraction: 0.05,
            ..StageConfig::finetune_default()
        };
        let ft = finetune(&pre, &train, HeadKind::Evidential, &ft_cfg).unwrap();
        let eval = evaluate(&ft.checkpoint.model().unwrap(), &test).unwrap();
        let u = eval.uncertainty.unwrap();
        if let (Some(c), Some(i)) = (u.mean_u_correct, u.mean_u_incorrect) {
            if i > c {
                separated += 1;
            }
            u_detail.push(format!("{c:.3}/{i:.3}"));
        } else {
            u_detail.push("n/a".into());
        }

        let loop_cfg = UaLoopConfig {
            rounds: 4,
            per_round_fraction: 0.01,
            seed,
            finetune: StageConfig {
                seed,
                ..StageConfig::finetune_default()
            },
            ..Default::default()
        };
        let ua = run_ua_loop(&pre, &train, &test, &loop_cfg).unwrap();
        let control = run_ua_loop(
            &pre,
            &train,
            &test,
            &UaLoopConfig {
                selection: Selection::Random,
                ..loop_cfg.clone()
            },
        )
        .unwrap();
        ua_acc.push(ua.rounds.last().unwrap().record.acc);
        random_acc.push(control.rounds.last().unwrap().record.acc);

        if seed == SEEDS[0] {
            let chosen: BTreeSet<String> = ua.state.labeled_ids.clone();
            let k = train.class_count();
            let corrupted = PatchDataset::new(
                train
                    .items()
                    .iter()
                    .map(|it| {
                        let mut it = it.clone();
                        if !chosen.contains(&it.id) {
                            it.label = it.label.map(|l| (l + 1) % k);
                        }
                        it
                    })
                    .collect(),
                k,
                SplitTag::Train,
            )
            .unwrap();
            let again = run_ua_loop(&pre, &corrupted, &test, &loop_cfg).unwrap();
            leak_ok = ua
                .rounds
                .iter()
                .zip(&again.rounds)
                .all(|(a, b)| a.record.added_ids == b.record.added_ids);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let c7 = outcome(
        separated >= 4,
        format!("u(incorrect) > u(correct) in {separated}/5 seeds; mean u correct/incorrect {u_detail:?}"),
    );
    let (a, b) = (mean(&ua_acc), mean(&random_acc));
    let c8 = outcome(
        a >= b && leak_ok,
        format!(
            "4% budget acc: uncertainty {a:.4} vs random {b:.4} (per seed {ua_acc:.3?} vs {random_acc:.3?}); leak guard {}",
            if leak_ok { "ok" } else { "FAILED" }
        ),
    );
    (c7, c8)
}

fn criterion_9() -> Outcome {
    let start = Instant::now();
    let spec = BagSpec {
        bag_count: 100,
        instances_per_bag: 50,
        positive_instance_rate: 0.05,
        signal: 5.0,
        ..Default::default()
    };
    let cfg = MilConfig {
        attention_dim: 32,
        weight_decay: 1e-3,
        ..Default::default()
    };
    let mut aucs = Vec::new();
    let mut attention_ok = 0;
    for seed in SEEDS {
        let train = generate_bags(&spec, 2 * seed).unwrap();
        let test = generate_bags(&spec, 2 * seed + 1).unwrap();
        let run = train_mil(&train, &test, &cfg, seed).unwrap();
        aucs.push(run.report.auc.unwrap());
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for bag in test.iter().filter(|b| b.label) {
            let labels = bag.instance_labels.as_ref().unwrap();
            for row in attention_map(&run.net, bag, cfg.pseudo_bags, seed).unwrap() {
                if labels[row.instance] {
                    pos.push(row.tier1_attention);
                } else {
                    neg.push(row.tier1_attention);
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        if mean(&pos) > mean(&neg) {
            attention_ok += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let min = aucs.iter().copied().fold(f64::INFINITY, f64::min);
    outcome(
        min >= 0.95 && attention_ok == SEEDS.len() && secs < 180.0,
        format!("bag AUC per seed {aucs:.4?}; positive attention > negative in {attention_ok}/5 seeds; {secs:.1}s"),
    )
}

fn pairwise_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (_, &si) in scores.iter().enumerate().filter(|&(i, _)| positive[i]) {
        for (j, &sj) in scores.iter().enumerate() {
            if positive[j] {
                continue;
            }
            pairs += 1.0;
            wins += if si > sj {
                1.0
            } else if si == sj {
                0.5
            } else {
                0.0
            };
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

fn criterion_10() -> Outcome {
    let mut r = rng(10);
    let mut worst = 0.0f64;
    let mut fixtures = 0;
    for n in [2usize, 3, 10, 37, 100, 250, 500] {
        for ties in [false, true] {
            let scores: Vec<f64> = (0..n)
                .map(|_| {
                    let s: f64 = r.random();
                    if ties { (s * 5.0).floor() / 5.0 } else { s }
                })
                .collect();
            let mut positive: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
            positive[0] = true;
            positive[1] = false;
            let oracle = pairwise_auc(&scores, &positive).unwrap();
            worst = worst.max((binary_auc(&scores, &positive).unwrap() - oracle).abs());
            let rows: Vec<Vec<f64>> = scores.iter().map(|&s| vec![1.0 - s, s]).collect();
            let labels: Vec<usize> = positive.iter().map(|&p| usize::from(p)).collect();
            worst = worst.max((compute_metrics(&rows, &labels).unwrap().auc.unwrap() - oracle).abs());
            fixtures += 1;
        }
    }
    // confusion[true][pred]; per-class F1 = 2TP / (2TP + FP + FN):
    // class 0: 10 / 15, class 1: 6 / 10, class 2: 8 / 11
    let confusion = vec![vec![5, 2, 0], vec![1, 3, 1], vec![2, 0, 4]];
    let expected = (10.0 / 15.0 + 6.0 / 10.0 + 8.0 / 11.0) / 3.0;
    let got = macro_f1(&confusion);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (t, row) in confusion.iter().enumerate() {
        for (p, &count) in row.iter().enumerate() {
            for _ in 0..count {
                rows.push(one_hot(p, 3));
                labels.push(t);
            }
        }
    }
    let via_metrics = compute_metrics(&rows, &labels).unwrap().macro_f1;
    outcome(
        worst == 0.0 && got == expected && via_metrics == expected,
        format!(
            "max |AUC - pairwise oracle| = {worst:.1e} over {fixtures} fixtures (n <= 500); macro-F1 {got} vs hand {expected}"
        ),
    )
}

/// A reduced end-to-end run through every stage, serialized to JSON.
fn small_run() -> String {
    let all = three_class(7, 40, |s| s.image_side = 16);
    let (train, _, test) = make_splits(&all, (0.75, 0.0, 0.25), 7).unwrap();
    let enc = EncoderConfig {
        input_side: 16,
        embedding_dim: 16,
        width_multiplier: 0.5,
        ..Default::default()
    };
    let proj = ProjectionHeadConfig {
        hidden_dim: 16,
        output_dim: 8,
        ..Default::default()
    };
    let pre = pretrain(
        &train,
        &enc,
        &proj,
        &StageConfig {
            seed: 7,
            epochs: 2,
            batch_size: 16,
            ..StageConfig::pretrain_default()
        },
    )
    .unwrap();
    let ft_cfg = StageConfig {
        seed: 7,
        epochs: 3,
        label_fraction: 0.5,
        ..StageConfig::finetune_default()
    };
    let ft = finetune(&pre.checkpoint, &train, HeadKind::Evidential, &ft_cfg).unwrap();
    let arch = ft.checkpoint.meta.architecture.clone();
    let st = distill(
        &ft.checkpoint,
        &train,
        &arch,
        &StageConfig {
            seed: 7,
            epochs: 2,
            batch_size: 16,
            ..StageConfig::distill_default()
        },
    )
    .unwrap();
    let ua = run_ua_loop(
        &pre.checkpoint,
        &train,
        &test,
        &UaLoopConfig {
            rounds: 2,
            per_round_fraction: 0.1,
            seed: 7,
            finetune: ft_cfg.clone(),
            ..Default::default()
        },
    )
    .unwrap();
    let bags = generate_bags(
        &BagSpec {
            bag_count: 12,
            instances_per_bag: 10,
            positive_instance_rate: 0.2,
            feature_dim: 4,
            ..Default::default()
        },
        7,
    )
    .unwrap();
    let mil = train_mil(
        &bags,
        &bags,
        &MilConfig {
            attention_dim: 8,
            epochs: 3,
            ..Default::default()
        },
        7,
    )
    .unwrap();
    let records: Vec<_> = ua.rounds.iter().map(|r| &r.record).collect();
    serde_json::to_string_pretty(&serde_json::json!({
        "pretrain_loss": pre.report.loss_curve,
        "finetune": evaluate(&ft.checkpoint.model().unwrap(), &test).unwrap().metrics,
        "distill": evaluate(&st.checkpoint.model().unwrap(), &test).unwrap().metrics,
        "checkpoint": st.checkpoint.content_hash(),
        "ualoop": records,
        "mil": mil.report,
        "mil_probs": mil.eval_probs,
    }))
    .unwrap()
}

fn criterion_11() -> Outcome {
    let in_pool = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(small_run)
    };
    let a = in_pool(1);
    let b = in_pool(1);
    let c = in_pool(3);
    outcome(
        a == b && a == c,
        format!(
            "repeat identical: {}; 1 vs 3 worker threads identical: {}; {} bytes",
            a == b,
            a == c,
            a.len()
        ),
    )
}

fn record(results: &mut Vec<(u32, Outcome)>, n: u32, name: &str, o: Outcome) {
    println!("[{}] criterion {n:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    results.push((n, o));
}

fn main() {
    // optional criterion numbers on the command line select a subset
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |n: u32| filter.is_empty() || filter.iter().any(|f| f == &n.to_string());
    let mut results = Vec::new();
    let simple: [(u32, &str, fn() -> Outcome); 6] = [
        (1, "evidential balance", criterion_1),
        (2, "Bayes-risk MSE vs Monte Carlo", criterion_2),
        (3, "KL to uniform vs quadrature", criterion_3),
        (4, "analytic vs finite-difference gradients", criterion_4),
        (5, "NT-Xent fixtures", criterion_5),
        (6, "pretrain -> fine-tune -> distill", criterion_6),
    ];
    for (n, name, f) in simple {
        if wanted(n) {
            record(&mut results, n, name, f());
        }
    }
    if wanted(7) || wanted(8) {
        let (c7, c8) = criteria_7_and_8();
        if wanted(7) {
            record(&mut results, 7, "uncertainty separates errors", c7);
        }
        if wanted(8) {
            record(&mut results, 8, "uncertainty-driven labeling", c8);
        }
    }
    let rest: [(u32, &str, fn() -> Outcome); 3] = [
        (9, "double-tier MIL", criterion_9),
        (10, "metric oracles", criterion_10),
        (11, "determinism", criterion_11),
    ];
    for (n, name, f) in rest {
        if wanted(n) {
            record(&mut results, n, name, f());
        }
    }

    let failed: Vec<u32> = results.iter().filter(|r| !r.1.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(" {failed:?}") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
