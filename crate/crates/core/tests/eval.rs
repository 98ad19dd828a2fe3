mod common;

use common::*;
use mlim_core::config::{FinetuneConfig, MaskingPolicy, MamConfig, ModelConfig, PretrainConfig, ProbeConfig, RunConfig, VariantSpec};
use mlim_core::data::{generate_pair_split, sample_corpus};
use mlim_core::eval::*;
use mlim_core::training::{plan_micro_batch, Corpus};
use proptest::prelude::*;
use rand::Rng as _;

fn small() -> ModelConfig {
    ModelConfig { image_side: 32, embedder_channels: vec![4], decoder_channels: vec![4], ..narrow() }
}

fn corpus(n: usize, seed: u64, side: usize) -> Corpus {
    Corpus::from_items(&sample_corpus(n, seed, side).unwrap(), side).unwrap()
}

/// Mean over positives of the precision at that positive's score threshold.
fn brute_force_ap(scores: &[f64], labels: &[u8]) -> f64 {
    let positives = labels.iter().filter(|&&l| l == 1).count() as f64;
    let mut total = 0.0;
    for (i, &s) in scores.iter().enumerate() {
        if labels[i] == 1 {
            let above: Vec<usize> = (0..scores.len()).filter(|&j| scores[j] >= s).collect();
            let tp = above.iter().filter(|&&j| labels[j] == 1).count() as f64;
            total += tp / above.len() as f64;
        }
    }
    total / positives
}

#[test]
fn pr_auc_matches_brute_force() {
    let mut r = rng(1);
    for k in 0..200 {
        let n = r.random_range(2..60);
        let levels = if k % 2 == 0 { 5 } else { 1_000_000 };
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..levels) as f64 / levels as f64).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let got = pr_auc(&scores, &labels).unwrap();
        assert!((got - brute_force_ap(&scores, &labels)).abs() < 1e-12);
    }
}

#[test]
fn pr_auc_rejects_bad_inputs() {
    assert!(pr_auc(&[0.1, 0.2], &[0]).is_err());
    assert!(pr_auc(&[0.1, f64::NAN], &[0, 1]).is_err());
    assert!(pr_auc(&[0.1, 0.2], &[0, 2]).is_err());
}

proptest! {
    #[test]
    fn pr_auc_depends_only_on_the_ranking(
        raw in prop::collection::vec((0u32..500, 0u8..2), 2..80),
        scale in 0.5f64..4.0,
    ) {
        let mut labels: Vec<u8> = raw.iter().map(|r| r.1).collect();
        labels[0] = 0;
        labels[1] = 1;
        let scores: Vec<f64> = raw.iter().map(|r| r.0 as f64 / 500.0).collect();
        let moved: Vec<f64> = scores.iter().map(|s| (scale * s).exp() - 3.0).collect();
        let a = pr_auc(&scores, &labels).unwrap();
        prop_assert!((a - pr_auc(&moved, &labels).unwrap()).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }
}

#[test]
fn substitutions_change_one_modality() {
    let c = corpus(12, 2, 32);
    for i in 0..c.len() {
        let o = substitute(&c, i, ProbeCondition::ORIGINAL, 0.5, 9);
        assert_eq!(o.image, c.image(i));
        assert_eq!(o.tokens, c.tokens(i));
        let ri = substitute(&c, i, ProbeCondition::image(ImageCondition::RandomImage), 0.5, 9);
        let rt = substitute(&c, i, ProbeCondition::text(TextCondition::RandomText), 0.5, 9);
        assert_eq!(ri.tokens, c.tokens(i));
        assert_eq!(rt.image, c.image(i));
        let j = (0..c.len()).find(|&j| c.image(j) == ri.image).unwrap();
        assert_ne!(j, i);
        assert_eq!(rt.tokens, c.tokens(j));
        let g = substitute(&c, i, ProbeCondition::image(ImageCondition::GrayImage), 0.25, 9);
        assert!(g.image.data().iter().all(|&v| v == 0.25));
        assert!(substitute(&c, i, ProbeCondition::text(TextCondition::EmptyText), 0.5, 9).tokens.is_empty());
    }
}

#[test]
fn probe_curves_cover_the_requested_probabilities() {
    let (m, p) = model(small(), 3);
    let c = corpus(10, 3, 32);
    let cfg = ProbeConfig { mask_probs: vec![0.0, 0.5, 0.75], n_eval: 6, gray_level: 0.5 };
    let curves = probe_all(&m, &p, &c, &cfg, 3).unwrap();
    assert_eq!(curves.len(), 6);
    for curve in &curves {
        let probs: Vec<f64> = curve.points.iter().map(|q| q.mask_prob).collect();
        match curve.task {
            ProbeTask::Mlm => assert_eq!(probs, [0.5, 0.75]),
            ProbeTask::Recon => assert_eq!(probs, [0.0, 0.5, 0.75]),
        }
        assert!(curve.points.iter().all(|q| q.n == 6 && q.mean.is_finite() && q.std >= 0.0));
    }
    assert_eq!(curves, probe_all(&m, &p, &c, &cfg, 3).unwrap());
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    assert_eq!(curves, pool.install(|| probe_all(&m, &p, &c, &cfg, 3).unwrap()));
}

#[test]
fn probes_reject_empty_sets_and_wrong_conditions() {
    let (m, p) = model(small(), 4);
    let c = corpus(4, 4, 32);
    let cfg = ProbeConfig { mask_probs: vec![0.5], n_eval: 4, gray_level: 0.5 };
    assert!(probe_mlm(&m, &p, &Corpus::new(32), ProbeCondition::ORIGINAL, &cfg, 0).is_err());
    assert!(probe_recon(&m, &p, &c, ProbeCondition::ORIGINAL, &ProbeConfig { n_eval: 0, ..cfg.clone() }, 0).is_err());
    assert!(probe_mlm(&m, &p, &c, ProbeCondition::text(TextCondition::EmptyText), &cfg, 0).is_err());
    assert!(probe_recon(&m, &p, &c, ProbeCondition::image(ImageCondition::GrayImage), &cfg, 0).is_err());
}

#[test]
fn curve_comparisons() {
    let curve = |means: &[f64], std: f64| ProbeCurve {
        task: ProbeTask::Mlm,
        condition: ProbeCondition::ORIGINAL,
        points: means
            .iter()
            .zip([0.3, 0.5])
            .map(|(&mean, mask_prob)| ProbePoint { mask_prob, mean, std, n: 10 })
            .collect(),
    };
    let a = curve(&[1.0, 2.0], 0.1);
    let b = curve(&[1.5, 2.5], 0.1);
    assert!(a.below(&b, &[0.3, 0.5]));
    assert!(!b.below(&a, &[0.3]));
    assert!(!a.below(&b, &[0.75]));
    assert!(!a.overlaps(&b, 2.0));
    assert!(a.overlaps(&curve(&[1.3, 2.3], 0.1), 2.0));
    let d = relative_degradation(&a, &b).unwrap();
    assert!((d - (0.5 + 0.25) / 2.0).abs() < 1e-12);
}

#[test]
fn naive_masking_ignores_modes() {
    let c = corpus(8, 5, 32);
    let cfg = PretrainConfig { masking: MaskingPolicy::Naive, naive_prob: 0.2, ..Default::default() };
    let mut mrng = rng(5);
    let mut irng = rng(6);
    let (mut text, mut text_n, mut image, mut image_n) = (0usize, 0usize, 0usize, 0usize);
    for _ in 0..2000 {
        let mb = plan_micro_batch(&c, (0..8).collect(), 16, &cfg, &MamConfig::default(), &mut mrng, &mut irng).unwrap();
        assert!(mb.mode.is_none());
        for plan in &mb.plans {
            text += plan.masked_text();
            text_n += plan.text_mask.len();
            image += plan.masked_image();
            image_n += plan.image_mask.len();
        }
    }
    for (k, n) in [(text, text_n), (image, image_n)] {
        let rate = k as f64 / n as f64;
        let sigma = (0.2 * 0.8 / n as f64).sqrt();
        assert!((rate - 0.2).abs() < 3.0 * sigma, "{rate}");
    }
}

#[test]
fn ablation_rows_and_fairness() {
    let mut base = RunConfig::default();
    base.model = small();
    base.pretrain = PretrainConfig { steps: 2, batch_size: 4, micro_batch: 2, ..Default::default() };
    base.finetune = FinetuneConfig { steps: 2, batch_size: 4, micro_batch: 2, ..Default::default() };
    let c = corpus(8, 6, 32);
    let (train, test) = generate_pair_split(8, 8, 6, 0.5, 32).unwrap();
    let data = AblationData { corpus: &c, train_pairs: &train, test_pairs: &test };
    let variants = VariantSpec::standard_matrix();
    let mut pretrained = 0;
    let rep = run_ablation(&base, &variants, &[0, 1], &data, |e| {
        if let AblationEvent::Pretrained { .. } = e {
            pretrained += 1;
        }
    })
    .unwrap();
    assert_eq!(pretrained, 2 * 5);
    assert_eq!(rep.rows.len(), 2 * 6 + 6);
    assert!(rep.is_fair());
    for v in &variants {
        let per: Vec<f64> = rep.rows.iter().filter(|r| !r.median && r.name == v.name).map(|r| r.pr_auc).collect();
        assert_eq!(per.len(), 2);
        assert_eq!(rep.median_of(&v.name), Some(median(&per)));
    }
    assert!(run_ablation(&base, &variants, &[], &data, |_| {}).is_err());
}
