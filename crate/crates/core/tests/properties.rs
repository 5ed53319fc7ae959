use std::collections::BTreeSet;

use proptest::prelude::*;
use uapath::data::{decode_manifest, decode_png, generate_bags, BagSpec};
use uapath::evidential::{opinion_from_evidence, AnnealSchedule};
use uapath::mil::{decode_bag, encode_bag, split_pseudo_bags, Bag, DistillStrategy, MilNet};
use uapath::model::{
    decode_checkpoint, encode_checkpoint, Architecture, EncoderConfig, HeadKind, Model, ModelCheckpoint,
    ProjectionHeadConfig, Stage,
};
use uapath::report::{binary_auc, compute_metrics};
use uapath::ualoop::{round_budget, LabelBudgetState};

fn tiny_arch(head: HeadKind) -> Architecture {
    Architecture {
        encoder: EncoderConfig {
            input_side: 8,
            width_multiplier: 0.25,
            embedding_dim: 4,
            input_channels: 1,
            ..Default::default()
        },
        projection: ProjectionHeadConfig {
            layer_count: 1,
            hidden_dim: 4,
            output_dim: 3,
            reattach_depth: 0,
        },
        class_count: (head != HeadKind::Projection).then_some(3),
        head,
    }
}

fn lcg(state: &mut u64) -> f64 {
    *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    ((*state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn opinion_mass_balances(evidence in proptest::collection::vec(0.0f64..1e4, 2..=10)) {
        let o = opinion_from_evidence(&evidence).unwrap();
        let total = o.uncertainty + o.beliefs.iter().sum::<f64>();
        prop_assert!((total - 1.0).abs() < 1e-9);
        prop_assert!(o.beliefs.iter().all(|&b| b >= 0.0) && (0.0..=1.0).contains(&o.uncertainty));
    }

    #[test]
    fn anneal_is_monotone_and_clamped(den in 0.5f64..50.0, t in 0u32..200) {
        let s = AnnealSchedule { denominator: den, epoch_index_base: 1 };
        let (a, b) = (s.lambda(t), s.lambda(t + 1));
        prop_assert!((0.0..=1.0).contains(&a) && a <= b);
    }

    #[test]
    fn generated_bags_obey_the_mil_assumption(
        bags in 1usize..12,
        inst in 1usize..30,
        rate in 0.01f64..1.0,
        frac in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let spec = BagSpec {
            bag_count: bags,
            instances_per_bag: inst,
            positive_instance_rate: rate,
            positive_bag_fraction: frac,
            feature_dim: 3,
            ..Default::default()
        };
        prop_assume!(spec.positives_per_bag().is_ok());
        for b in generate_bags(&spec, seed).unwrap() {
            let labels = b.instance_labels.clone().unwrap();
            prop_assert_eq!(b.label, labels.iter().any(|&l| l));
        }
    }

    #[test]
    fn pseudo_bags_partition_the_parent(n in 1usize..60, m in 1usize..12, seed in any::<u64>()) {
        let m = m.min(n);
        let bag = Bag::new("p".into(), true, vec![0.0; n], 1, None).unwrap();
        let parts = split_pseudo_bags(&bag, m, seed).unwrap();
        prop_assert_eq!(parts.len(), m);
        let mut all: Vec<usize> = parts.iter().flat_map(|p| p.indices.iter().copied()).collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let sizes: Vec<usize> = parts.iter().map(|p| p.indices.len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn attention_normalizes_and_ignores_order(n in 2usize..20, m in 1usize..5, seed in any::<u64>()) {
        let dim = 4;
        let mut s = seed;
        let rows: Vec<f64> = (0..n * dim).map(|_| lcg(&mut s) * 3.0).collect();
        let net = MilNet::new(dim, None, 6, DistillStrategy::Afs, seed).unwrap();
        let bag = Bag::new("b".into(), true, rows.clone(), dim, None).unwrap();
        let out = net.forward(&bag, &split_pseudo_bags(&bag, m.min(n), seed).unwrap()).unwrap();
        for t1 in &out.tier1 {
            prop_assert!((t1.record.attention.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        prop_assert!((out.tier2.attention.iter().sum::<f64>() - 1.0).abs() < 1e-6);

        let a = net.tier1_forward(&rows, n);
        let mut rev = Vec::with_capacity(rows.len());
        for i in (0..n).rev() {
            rev.extend_from_slice(&rows[i * dim..(i + 1) * dim]);
        }
        let b = net.tier1_forward(&rev, n);
        prop_assert!((a.logit - b.logit).abs() < 1e-5);
        for (x, y) in a.embedding.iter().zip(&b.embedding) {
            prop_assert!((x - y).abs() < 1e-5);
        }
        let hd = a.embedding.len();
        let vecs: Vec<f64> = (0..n * hd).map(|_| lcg(&mut s)).collect();
        let mut vrev = Vec::with_capacity(vecs.len());
        for i in (0..n).rev() {
            vrev.extend_from_slice(&vecs[i * hd..(i + 1) * hd]);
        }
        let (p, q) = (net.tier2_forward(&vecs, n), net.tier2_forward(&vrev, n));
        prop_assert!((p.probability - q.probability).abs() < 1e-5);
    }

    #[test]
    fn budget_state_stays_a_partition(n in 20usize..200, rounds in 1usize..10, seed in any::<u64>()) {
        let frac = 1.0 / (rounds as f64 * 2.0);
        let ids: BTreeSet<String> = (0..n).map(|i| format!("id{i:04}")).collect();
        let mut st = LabelBudgetState::new(ids.iter().cloned(), frac);
        let mut s = seed;
        let mut prev = 0;
        for r in 1..=rounds {
            let b = round_budget(n, frac, rounds, r);
            let mut pool: Vec<String> = st.pool_ids.iter().cloned().collect();
            let mut picked = Vec::new();
            for _ in 0..b.min(pool.len()) {
                let k = ((lcg(&mut s) + 1.0) / 2.0 * pool.len() as f64) as usize % pool.len();
                picked.push(pool.swap_remove(k));
            }
            st.label(&picked).unwrap();
            st.check(&ids).unwrap();
            prop_assert!(st.labeled_ids.len() > prev || b == 0);
            prop_assert!(st.label(&picked[..picked.len().min(1)]).is_err() || picked.is_empty());
            prev = st.labeled_ids.len();
        }
        let total = ((rounds as f64 * frac * n as f64).round() as usize).min(n);
        prop_assert_eq!(prev, total);
    }

    #[test]
    fn auc_matches_pairwise_count(
        items in proptest::collection::vec((0u8..6, any::<bool>()), 2..120),
    ) {
        let scores: Vec<f64> = items.iter().map(|&(s, _)| f64::from(s) / 5.0).collect();
        let pos: Vec<bool> = items.iter().map(|&(_, p)| p).collect();
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in 0..items.len() {
            for j in 0..items.len() {
                if pos[i] && !pos[j] {
                    pairs += 1.0;
                    wins += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
                }
            }
        }
        let auc = binary_auc(&scores, &pos);
        if pairs == 0.0 {
            prop_assert!(auc.is_none());
        } else {
            prop_assert!((auc.unwrap() - wins / pairs).abs() < 1e-12);
        }
    }

    #[test]
    fn metrics_ignore_item_order(
        items in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0, 0usize..3), 3..60),
        rot in 0usize..60,
    ) {
        let scores: Vec<Vec<f64>> = items.iter().map(|&(a, b, c, _)| vec![a, b, c]).collect();
        let labels: Vec<usize> = items.iter().map(|&(.., l)| l).collect();
        let r = rot % items.len();
        let mut s2 = scores.clone();
        let mut l2 = labels.clone();
        s2.rotate_left(r);
        l2.rotate_left(r);
        s2.reverse();
        l2.reverse();
        let (a, b) = (compute_metrics(&scores, &labels).unwrap(), compute_metrics(&s2, &l2).unwrap());
        prop_assert_eq!(&a.confusion, &b.confusion);
        prop_assert_eq!(a.accuracy, b.accuracy);
        prop_assert!((a.macro_f1 - b.macro_f1).abs() < 1e-12);
        match (a.auc, b.auc) {
            (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
            (x, y) => prop_assert_eq!(x, y),
        }
    }

    #[test]
    fn decoders_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..512)) {
        let _ = decode_checkpoint(&bytes);
        let _ = decode_bag(&bytes);
        let _ = decode_png(&bytes);
        let _ = decode_manifest(&bytes, std::path::Path::new("p.csv"));
    }

    #[test]
    fn bag_cache_round_trips(n in 1usize..10, dim in 1usize..6, label in any::<bool>(), seed in any::<u64>()) {
        let mut s = seed;
        let feats: Vec<f64> = (0..n * dim).map(|_| lcg(&mut s) * 1e3).collect();
        let inst: Vec<bool> = (0..n).map(|_| lcg(&mut s) > 0.0).collect();
        let bag = Bag::new(format!("b{seed}"), label, feats, dim, Some(inst)).unwrap();
        prop_assert_eq!(decode_bag(&encode_bag(&bag)).unwrap(), bag);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn checkpoint_round_trip_is_bit_exact(seed in any::<u64>(), evidential in any::<bool>()) {
        let head = if evidential { HeadKind::Evidential } else { HeadKind::Projection };
        let mut model = Model::build(tiny_arch(head), seed).unwrap();
        let mut s = seed;
        for v in model.params.data.iter_mut() {
            *v += lcg(&mut s) as f32;
        }
        let ckpt = ModelCheckpoint::new(&model, Stage::Pretrained, seed, "fp".into(), 3);
        let bytes = encode_checkpoint(&ckpt);
        let back = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(&back.meta, &ckpt.meta);
        let bits = |d: &[f32]| d.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back.params.data), bits(&ckpt.params.data));
        prop_assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn evidential_outputs_are_nonnegative_and_deterministic(seed in any::<u64>()) {
        let mut model = Model::build(tiny_arch(HeadKind::Evidential), seed).unwrap();
        let mut s = seed;
        for v in model.params.data.iter_mut() {
            *v += lcg(&mut s) as f32;
        }
        let x: Vec<f32> = (0..8 * 64).map(|_| (lcg(&mut s) * 4.0) as f32).collect();
        let out = model.forward(&x).unwrap();
        prop_assert_eq!(out.len(), 8 * 3);
        prop_assert!(out.iter().all(|&e| e >= 0.0 && e.is_finite()));
        prop_assert_eq!(model.forward(&x).unwrap(), out);
    }
}
