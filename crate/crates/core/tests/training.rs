mod common;

use common::*;
use mlim_core::config::{AdamConfig, FinetuneConfig, MamConfig, MdoConfig, ModelConfig, PretrainConfig};
use mlim_core::data::{generate_pair_split, sample_corpus, PairExample};
use mlim_core::optim::Adam;
use mlim_core::params::{Grads, ParamId};
use mlim_core::tensor::Matrix;
use mlim_core::training::{finetune, pretrain, Corpus, DataOrder};
use mlim_core::{Mlim, ParamStore};

fn small() -> ModelConfig {
    ModelConfig { image_side: 32, embedder_channels: vec![4], decoder_channels: vec![4], ..narrow() }
}

fn corpus(n: usize, seed: u64, side: usize) -> Corpus {
    Corpus::from_items(&sample_corpus(n, seed, side).unwrap(), side).unwrap()
}

fn short(steps: usize, lr: f64) -> PretrainConfig {
    PretrainConfig { steps, batch_size: 4, micro_batch: 2, optimizer: AdamConfig { lr, ..Default::default() }, ..Default::default() }
}

fn losses(m: &Mlim, p: &mut ParamStore, c: &Corpus, steps: usize, seed: u64) -> Vec<u64> {
    let run = pretrain(m, p, c, &short(steps, 1e-3), &MamConfig::default(), seed, |_| {}).unwrap();
    run.records.iter().map(|r| r.total.to_bits()).collect()
}

#[test]
fn zero_learning_rate_leaves_parameters_bitwise() {
    let (m, p) = model(small(), 1);
    let c = corpus(16, 1, 32);
    let mut q = p.clone();
    pretrain(&m, &mut q, &c, &short(3, 0.0), &MamConfig::default(), 1, |_| {}).unwrap();
    assert_eq!(q, p);
    let (train, _) = generate_pair_split(16, 2, 1, 0.5, 32).unwrap();
    let fc = FinetuneConfig { steps: 2, batch_size: 4, micro_batch: 2, optimizer: AdamConfig { lr: 0.0, ..Default::default() }, clip_norm: Some(1.0) };
    finetune(&m, &mut q, &train, &fc, &MdoConfig::default(), 1, |_| {}).unwrap();
    assert_eq!(q, p);
}

#[test]
fn first_ten_losses_repeat_bitwise() {
    let (m, p0) = model(ModelConfig { dropout: 0.1, ..small() }, 2);
    let c = corpus(32, 2, 32);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let mut p = p0.clone();
            let l = losses(&m, &mut p, &c, 10, 7);
            (l, p.digest())
        })
    };
    let a = run(1);
    assert_eq!(a, run(1));
    assert_eq!(a, run(3));
    let mut p = p0.clone();
    assert_ne!(a.0, losses(&m, &mut p, &c, 10, 8));
}

#[test]
fn data_order_is_a_seeded_permutation_per_epoch() {
    let mut o = DataOrder::new(10, 3);
    let mut first = o.next_indices(10);
    first.sort();
    assert_eq!(first, (0..10).collect::<Vec<_>>());
    let mut a = DataOrder::new(10, 3);
    let mut b = DataOrder::new(10, 3);
    for _ in 0..7 {
        assert_eq!(a.next_indices(3), b.next_indices(3));
    }
    assert_eq!(a.digest(), b.digest());
}

#[test]
fn adam_single_step_matches_the_update_rule() {
    let mut p = ParamStore::new();
    p.insert("w", Matrix::from_vec(1, 3, vec![0.5, -1.0, 2.0])).unwrap();
    let cfg = AdamConfig { lr: 0.01, beta1: 0.8, beta2: 0.95, eps: 1e-6 };
    let mut opt = Adam::new(cfg.clone(), &p);
    let g1 = [0.3, -2.0, 0.0];
    let g2 = [-0.1, 1.5, 4.0];
    let mut want = [0.5, -1.0, 2.0];
    let (mut m, mut v) = ([0.0; 3], [0.0; 3]);
    for (t, g) in [g1, g2].iter().enumerate() {
        let mut grads = Grads::zeros_like(&p);
        grads.get_mut(ParamId(0)).data_mut().copy_from_slice(g);
        opt.update(&mut p, &grads).unwrap();
        let t = (t + 1) as i32;
        for k in 0..3 {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let mh = m[k] / (1.0 - cfg.beta1.powi(t));
            let vh = v[k] / (1.0 - cfg.beta2.powi(t));
            want[k] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
        for k in 0..3 {
            assert!((p.get(ParamId(0)).data()[k] - want[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn adam_minimises_a_parabola() {
    let mut p = ParamStore::new();
    p.insert("x", Matrix::scalar(1.0)).unwrap();
    let mut opt = Adam::new(AdamConfig { lr: 0.05, ..Default::default() }, &p);
    for _ in 0..200 {
        let x = p.get(ParamId(0)).scalar_value();
        let mut g = Grads::zeros_like(&p);
        g.get_mut(ParamId(0)).data_mut()[0] = 2.0 * x;
        opt.update(&mut p, &g).unwrap();
    }
    assert!(p.get(ParamId(0)).scalar_value().abs() < 1e-2);
}

#[test]
fn always_both_modalities_equals_disabled_dropout() {
    let (m, p0) = model(small(), 4);
    let (train, _): (Vec<PairExample>, _) = generate_pair_split(24, 2, 4, 0.5, 32).unwrap();
    let fc = FinetuneConfig { steps: 3, batch_size: 4, micro_batch: 2, ..Default::default() };
    let go = |mdo: MdoConfig| {
        let mut p = p0.clone();
        let run = finetune(&m, &mut p, &train, &fc, &mdo, 4, |_| {}).unwrap();
        (run.records.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>(), p)
    };
    let both = go(MdoConfig { enabled: true, mode_weights: [0.0, 0.0, 1.0] });
    assert_eq!(both, go(MdoConfig::disabled()));
    assert_ne!(both.0, go(MdoConfig { enabled: true, mode_weights: [1.0, 0.0, 0.0] }).0);
}

#[test]
fn pretraining_lowers_the_loss() {
    let c = corpus(64, 5, 32);
    let mut ratios: Vec<f64> = (0..3)
        .map(|seed| {
            let (m, mut p) = model(small(), seed);
            let run = pretrain(&m, &mut p, &c, &short(500, 2e-3), &MamConfig::default(), seed, |_| {}).unwrap();
            let mean = |r: &[mlim_core::training::StepRecord]| r.iter().map(|x| x.total).sum::<f64>() / r.len() as f64;
            mean(&run.records[450..]) / mean(&run.records[..50])
        })
        .collect();
    ratios.sort_by(f64::total_cmp);
    assert!(ratios[1] < 0.8, "{ratios:?}");
}

#[test]
fn invalid_training_setups_are_rejected() {
    let (m, mut p) = model(small(), 6);
    let c = corpus(4, 6, 32);
    let bad = PretrainConfig { micro_batch: 3, ..short(1, 1e-3) };
    assert!(pretrain(&m, &mut p, &c, &bad, &MamConfig::default(), 0, |_| {}).is_err());
    assert!(pretrain(&m, &mut p, &Corpus::new(32), &short(1, 1e-3), &MamConfig::default(), 0, |_| {}).is_err());
    let skewed = MamConfig { mode_weights: [0.5, 0.5, 0.5], ..Default::default() };
    assert!(pretrain(&m, &mut p, &c, &short(1, 1e-3), &skewed, 0, |_| {}).is_err());
    let fc = FinetuneConfig { steps: 1, batch_size: 4, micro_batch: 2, ..Default::default() };
    assert!(finetune(&m, &mut p, &[], &fc, &MdoConfig::default(), 0, |_| {}).is_err());
    let (other, _) = model(ModelConfig { d_model: 12, heads: 2, ..small() }, 6);
    assert!(pretrain(&other, &mut p, &c, &short(1, 1e-3), &MamConfig::default(), 0, |_| {}).is_err());
}
