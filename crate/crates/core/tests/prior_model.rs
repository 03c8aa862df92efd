use itap::diffmath::{softmax_with_temperature, AdamConfig};
use itap::prior::{
    sample_stack, stack_log_prob, DepthSchedule, PriorConfig, PriorModel, PriorQuery, PriorSample,
};
use itap::rqvae::CodeStack;
use itap::ItapError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

fn config(k: usize, d: usize) -> PriorConfig {
    let mut cfg = PriorConfig::new(k, d, 4, 2, 3);
    cfg.width = 16;
    cfg.heads = 2;
    cfg.layers = 1;
    cfg.ffn = 32;
    cfg.head_width = 32;
    cfg
}

fn entries(k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..k).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

fn model(k: usize, d: usize, seed: u64) -> PriorModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PriorModel::new(config(k, d), &entries(k, &mut rng), seed).unwrap()
}

fn random_sample(rng: &mut ChaCha8Rng, k: usize, d: usize, pads: usize) -> PriorSample {
    let seq = 5;
    PriorSample {
        codes: (0..seq)
            .map(|u| (u >= pads).then(|| CodeStack::new((0..d).map(|_| rng.gen_range(0..k)).collect())))
            .collect(),
        observations: (0..seq).map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect(),
    }
}

fn zero_head_output(m: &mut PriorModel) {
    let p = m.params_mut();
    for name in ["prior.head.2.weight", "prior.head.2.bias"] {
        let id = p.find(name).unwrap();
        p.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

#[test]
fn uniform_logits_give_log_k_per_slot() {
    let mut m = model(5, 2, 0);
    zero_head_output(&mut m);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = vec![random_sample(&mut rng, 5, 2, 0), random_sample(&mut rng, 5, 2, 2)];
    let slots = (5 * 2 + 3 * 2) as f64 / 2.0;
    let nll = m.prior_nll(&batch).unwrap();
    assert!((nll - slots * 5f64.ln()).abs() < 1e-9, "{nll}");
}

#[test]
fn certain_targets_give_zero_nll() {
    let mut m = model(4, 2, 1);
    zero_head_output(&mut m);
    let id = m.params().find("prior.head.2.bias").unwrap();
    m.params_mut().value_mut(id).data_mut()[3] = 1e3;
    let sample = PriorSample {
        codes: vec![Some(CodeStack::new(vec![3, 3])); 5],
        observations: vec![vec![0.0, 0.0]; 5],
    };
    assert!(m.prior_nll(&[sample]).unwrap() < 1e-12);
}

#[test]
fn invalid_code_rejected() {
    let m = model(4, 2, 2);
    let bad = [CodeStack::new(vec![0, 4])];
    let err = m
        .trunk_forward(&[PriorQuery {
            context: &bad,
            observation: &[0.0, 0.0],
        }])
        .unwrap_err();
    assert!(matches!(err, ItapError::IndexOutOfRange { index: 4, size: 4 }));
}

#[test]
fn trunk_properties() {
    let m = model(6, 2, 3);
    let obs = [0.3, -0.2];
    let a = [CodeStack::new(vec![1, 4]), CodeStack::new(vec![2, 5])];
    let b = [CodeStack::new(vec![4, 1]), CodeStack::new(vec![5, 2])];
    let h = m
        .trunk_forward(&[
            PriorQuery { context: &a, observation: &obs },
            PriorQuery { context: &b, observation: &obs },
            PriorQuery { context: &[], observation: &obs },
            PriorQuery { context: &a[1..], observation: &obs },
        ])
        .unwrap();
    // within-stack order is irrelevant to the trunk
    assert_eq!(h[0], h[1]);
    assert_eq!(h[0].len(), 16);
    assert!(h[2].iter().all(|v| v.is_finite()));
    // batching with other queries does not change a query's state
    let alone = m
        .trunk_forward(&[PriorQuery { context: &a[1..], observation: &obs }])
        .unwrap();
    for (x, y) in alone[0].iter().zip(&h[3]) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn depth_head_properties() {
    let m = model(6, 3, 4);
    let h = m
        .trunk_forward(&[PriorQuery { context: &[], observation: &[0.1, 0.1] }])
        .unwrap()
        .pop()
        .unwrap();
    let base = m.depth_logits(&h, &[]).unwrap();
    assert_eq!(base.len(), 6);
    let p = softmax_with_temperature(&base, 1.0).unwrap();
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    let x = m.depth_logits(&h, &[1]).unwrap();
    let y = m.depth_logits(&h, &[2]).unwrap();
    assert_ne!(x, y);
    assert!(m.depth_logits(&h, &[1, 2, 3]).is_err());
}

#[test]
fn nll_is_causal_in_targets() {
    let m = model(5, 2, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s = random_sample(&mut rng, 5, 2, 1);
    let base = m.position_nll(&s).unwrap();
    assert_eq!(base[0], 0.0);
    for t in 1..4 {
        let mut shuffled = s.clone();
        for u in t + 1..5 {
            shuffled.codes[u] = Some(CodeStack::new(vec![rng.gen_range(0..5), rng.gen_range(0..5)]));
        }
        let other = m.position_nll(&shuffled).unwrap();
        for u in 0..=t {
            assert!((base[u] - other[u]).abs() < 1e-12, "t={t} u={u}");
        }
    }
    let total: f64 = base.iter().sum();
    assert!((total - m.prior_nll(&[s]).unwrap()).abs() < 1e-9);
}

#[test]
fn greedy_sampling_is_argmax_chain() {
    let m = model(5, 3, 6);
    let h = m
        .trunk_forward(&[PriorQuery { context: &[], observation: &[0.5, 0.0] }])
        .unwrap()
        .pop()
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let s = sample_stack(&m, &h, &DepthSchedule::greedy(3), &mut rng).unwrap();
    let mut prefix = Vec::new();
    for _ in 0..3 {
        let l = m.depth_logits(&h, &prefix).unwrap();
        let best = (0..5).fold(0, |b, i| if l[i] > l[b] { i } else { b });
        prefix.push(best);
    }
    assert_eq!(s.indices(), prefix.as_slice());
    let mut other = ChaCha8Rng::seed_from_u64(99);
    assert_eq!(sample_stack(&m, &h, &DepthSchedule::greedy(3), &mut other).unwrap(), s);
}

#[test]
fn sampled_stacks_follow_chain_rule() {
    let m = model(3, 2, 7);
    let h = m
        .trunk_forward(&[PriorQuery {
            context: &[CodeStack::new(vec![1, 2])],
            observation: &[0.2, -0.4],
        }])
        .unwrap()
        .pop()
        .unwrap();
    // exact distribution by enumeration
    let mut exact = HashMap::new();
    let mut total = 0.0;
    for a in 0..3 {
        for b in 0..3 {
            let s = CodeStack::new(vec![a, b]);
            let p = stack_log_prob(&m, &h, &s).unwrap().exp();
            total += p;
            exact.insert(s, p);
        }
    }
    assert!((total - 1.0).abs() < 1e-9);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 20_000;
    let mut counts: HashMap<CodeStack, usize> = HashMap::new();
    let schedule = DepthSchedule::uniform(2, 1.0, 3);
    for _ in 0..n {
        let s = sample_stack(&m, &h, &schedule, &mut rng).unwrap();
        assert!(s.depth() == 2 && s.indices().iter().all(|&k| k < 3));
        *counts.entry(s).or_default() += 1;
    }
    let tv: f64 = exact
        .iter()
        .map(|(s, p)| (p - *counts.get(s).unwrap_or(&0) as f64 / n as f64).abs())
        .sum::<f64>()
        / 2.0;
    assert!(tv < 0.02, "total variation {tv}");
}

#[test]
fn overfits_small_set() {
    let k = 8;
    let mut m = model(k, 2, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let batch: Vec<PriorSample> = (0..16).map(|i| random_sample(&mut rng, k, 2, i % 3)).collect();
    let adam = AdamConfig {
        lr: 3e-3,
        ..AdamConfig::default()
    };
    for _ in 0..2000 {
        m.train_step(&batch, &adam, 1.0).unwrap();
    }
    let slots: usize = batch.iter().map(|s| s.codes.iter().flatten().count() * 2).sum();
    let per_slot = m.prior_nll(&batch).unwrap() * batch.len() as f64 / slots as f64;
    assert!(per_slot < 0.1 * (k as f64).ln(), "per-slot NLL {per_slot}");
}

#[test]
fn truncation_pads_oldest_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let s = random_sample(&mut rng, 4, 2, 0);
    let t = s.truncate_context(1);
    assert_eq!(t.codes.iter().filter(|c| c.is_none()).count(), 2);
    assert_eq!(t.codes[2..], s.codes[2..]);
    assert_eq!(s.truncate_context(5), s);
}
