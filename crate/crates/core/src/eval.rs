//! Cross-modality probes, PR-AUC and the ablation harness.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::config::{MdoConfig, ProbeConfig, RunConfig, VariantSpec};
use crate::data::{ImageTensor, PairExample, TokenId};
use crate::error::{Error, Result};
use crate::masking::{bernoulli_plan, MaskPlan};
use crate::model::Mlim;
use crate::par::map_indexed;
use crate::params::ParamStore;
use crate::rng::{self, Rng, Stream};
use crate::training::{self, evaluate_item, Corpus};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageCondition {
    Original,
    RandomImage,
    GrayImage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextCondition {
    Original,
    RandomText,
    EmptyText,
}

/// Which modality is substituted. At most one of the two differs from
/// `Original`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProbeCondition {
    pub image: ImageCondition,
    pub text: TextCondition,
}

impl ProbeCondition {
    pub const ORIGINAL: Self = Self { image: ImageCondition::Original, text: TextCondition::Original };

    pub fn image(image: ImageCondition) -> Self {
        Self { image, text: TextCondition::Original }
    }

    pub fn text(text: TextCondition) -> Self {
        Self { image: ImageCondition::Original, text }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image != ImageCondition::Original && self.text != TextCondition::Original {
            return Err(Error::Invalid("a probe varies exactly one modality".into()));
        }
        Ok(())
    }

    /// File-name stem: `original`, `random_image`, `gray_image`, ...
    pub fn label(&self) -> &'static str {
        match (self.image, self.text) {
            (ImageCondition::RandomImage, _) => "random_image",
            (ImageCondition::GrayImage, _) => "gray_image",
            (_, TextCondition::RandomText) => "random_text",
            (_, TextCondition::EmptyText) => "empty_text",
            _ => "original",
        }
    }

    /// Conditions swept by the MLM probe.
    pub fn mlm_sweep() -> [Self; 3] {
        [Self::ORIGINAL, Self::image(ImageCondition::RandomImage), Self::image(ImageCondition::GrayImage)]
    }

    /// Conditions swept by the RECON probe.
    pub fn recon_sweep() -> [Self; 3] {
        [Self::ORIGINAL, Self::text(TextCondition::RandomText), Self::text(TextCondition::EmptyText)]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTask {
    Mlm,
    Recon,
}

impl ProbeTask {
    pub fn label(self) -> &'static str {
        match self {
            ProbeTask::Mlm => "mlm",
            ProbeTask::Recon => "recon",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbePoint {
    pub mask_prob: f64,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeCurve {
    pub task: ProbeTask,
    pub condition: ProbeCondition,
    pub points: Vec<ProbePoint>,
}

impl ProbeCurve {
    pub fn at(&self, mask_prob: f64) -> Option<&ProbePoint> {
        self.points.iter().find(|p| (p.mask_prob - mask_prob).abs() < 1e-12)
    }

    /// Strictly below `other` at every listed probability.
    pub fn below(&self, other: &ProbeCurve, probs: &[f64]) -> bool {
        probs.iter().all(|&p| match (self.at(p), other.at(p)) {
            (Some(a), Some(b)) => a.mean < b.mean,
            _ => false,
        })
    }

    /// The `mean ± k·std` bands of both curves intersect at every shared point.
    pub fn overlaps(&self, other: &ProbeCurve, k: f64) -> bool {
        self.points.iter().all(|a| match other.at(a.mask_prob) {
            Some(b) => (a.mean - b.mean).abs() <= k * (a.std + b.std),
            None => true,
        })
    }
}

/// Inputs of one probe item after substitution.
pub struct ProbeInputs<'a> {
    pub image: ImageTensor,
    pub tokens: &'a [TokenId],
}

/// Applies `condition` to item `i`. The partner index for random
/// substitution depends only on `(seed, i)`, never on the condition.
pub fn substitute<'a>(
    corpus: &'a Corpus,
    i: usize,
    condition: ProbeCondition,
    gray_level: f64,
    seed: u64,
) -> ProbeInputs<'a> {
    let partner = || {
        let mut rng = rng::item_rng(seed, u64::MAX, i as u64);
        let n = corpus.len();
        if n < 2 {
            return i;
        }
        let j = rng.random_range(0..n - 1);
        if j >= i {
            j + 1
        } else {
            j
        }
    };
    let image = match condition.image {
        ImageCondition::Original => corpus.image(i),
        ImageCondition::RandomImage => corpus.image(partner()),
        ImageCondition::GrayImage => ImageTensor::filled(corpus.side(), corpus.side(), gray_level),
    };
    let tokens: &[TokenId] = match condition.text {
        TextCondition::Original => corpus.tokens(i),
        TextCondition::RandomText => corpus.tokens(partner()),
        TextCondition::EmptyText => &[],
    };
    ProbeInputs { image, tokens }
}

fn mask_rng(seed: u64, point: usize, item: usize) -> Rng {
    rng::item_rng(seed ^ 0x5eed_0f_9a5c, point as u64, item as u64)
}

/// Text-only mask with at least one masked content token whenever `p > 0`.
fn text_probe_plan(tokens: &[TokenId], image_len: usize, p: f64, rng: &mut Rng) -> MaskPlan {
    loop {
        let mut plan = bernoulli_plan(tokens.len(), image_len, p, 0.0, rng);
        plan.protect_specials(tokens);
        if plan.masked_text() > 0 || p <= 0.0 || tokens.is_empty() {
            return plan;
        }
    }
}

fn summarize(mask_prob: f64, losses: &[f64]) -> Result<ProbePoint> {
    let n = losses.len();
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite(format!("probe loss at mask probability {mask_prob}")));
    }
    let mean = losses.iter().sum::<f64>() / n as f64;
    let var = if n > 1 { losses.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
    Ok(ProbePoint { mask_prob, mean, std: libm::sqrt(var), n })
}

fn eval_set(corpus: &Corpus, cfg: &ProbeConfig) -> Result<usize> {
    if corpus.is_empty() || cfg.n_eval == 0 {
        return Err(Error::Invalid("empty probe dataset".into()));
    }
    Ok(cfg.n_eval.min(corpus.len()))
}

/// Mean MLM loss per text-mask probability with images substituted per
/// `condition`. Probability 0 masks nothing and is left out of the curve.
pub fn probe_mlm(
    model: &Mlim,
    params: &ParamStore,
    corpus: &Corpus,
    condition: ProbeCondition,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeCurve> {
    condition.validate()?;
    if condition.text != TextCondition::Original {
        return Err(Error::Invalid("the MLM probe substitutes images only".into()));
    }
    let n = eval_set(corpus, cfg)?;
    let image_len = model.config().image_positions();
    let mut points = Vec::new();
    for (k, &p) in cfg.mask_probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        let losses = map_indexed(n, |i| -> Result<f64> {
            let inputs = substitute(corpus, i, condition, cfg.gray_level, seed);
            let plan = text_probe_plan(inputs.tokens, image_len, p, &mut mask_rng(seed, k, i));
            let (mlm, _) = evaluate_item(model, params, &inputs.image, inputs.tokens, &plan, false)?;
            Ok(mlm.value)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        points.push(summarize(p, &losses)?);
    }
    Ok(ProbeCurve { task: ProbeTask::Mlm, condition, points })
}

/// Mean RECON loss per image-mask probability with texts substituted per
/// `condition`.
pub fn probe_recon(
    model: &Mlim,
    params: &ParamStore,
    corpus: &Corpus,
    condition: ProbeCondition,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeCurve> {
    condition.validate()?;
    if condition.image != ImageCondition::Original {
        return Err(Error::Invalid("the RECON probe substitutes texts only".into()));
    }
    let n = eval_set(corpus, cfg)?;
    let image_len = model.config().image_positions();
    let mut points = Vec::new();
    for (k, &p) in cfg.mask_probs.iter().enumerate() {
        let losses = map_indexed(n, |i| -> Result<f64> {
            let inputs = substitute(corpus, i, condition, cfg.gray_level, seed);
            let plan = bernoulli_plan(inputs.tokens.len(), image_len, 0.0, p, &mut mask_rng(seed, k, i));
            let (_, recon) = evaluate_item(model, params, &inputs.image, inputs.tokens, &plan, true)?;
            Ok(recon.expect("reconstruction requested"))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        points.push(summarize(p, &losses)?);
    }
    Ok(ProbeCurve { task: ProbeTask::Recon, condition, points })
}

/// All six probe curves (three MLM, three RECON).
pub fn probe_all(model: &Mlim, params: &ParamStore, corpus: &Corpus, cfg: &ProbeConfig, seed: u64) -> Result<Vec<ProbeCurve>> {
    let mut out = Vec::with_capacity(6);
    for c in ProbeCondition::mlm_sweep() {
        out.push(probe_mlm(model, params, corpus, c, cfg, seed)?);
    }
    for c in ProbeCondition::recon_sweep() {
        out.push(probe_recon(model, params, corpus, c, cfg, seed)?);
    }
    Ok(out)
}

/// Mean relative increase of `degraded` over `original` across shared points.
pub fn relative_degradation(original: &ProbeCurve, degraded: &ProbeCurve) -> Option<f64> {
    let rel: Vec<f64> = original
        .points
        .iter()
        .filter_map(|o| degraded.at(o.mask_prob).map(|d| (d.mean - o.mean) / o.mean))
        .filter(|r| r.is_finite())
        .collect();
    (!rel.is_empty()).then(|| rel.iter().sum::<f64>() / rel.len() as f64)
}

/// Relative RECON degradation under random texts next to relative MLM
/// degradation under random images.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Asymmetry {
    pub recon_random_text: f64,
    pub mlm_random_image: f64,
}

pub fn asymmetry(curves: &[ProbeCurve]) -> Option<Asymmetry> {
    let find = |task, cond| curves.iter().find(|c| c.task == task && c.condition == cond);
    let recon = relative_degradation(
        find(ProbeTask::Recon, ProbeCondition::ORIGINAL)?,
        find(ProbeTask::Recon, ProbeCondition::text(TextCondition::RandomText))?,
    )?;
    let mlm = relative_degradation(
        find(ProbeTask::Mlm, ProbeCondition::ORIGINAL)?,
        find(ProbeTask::Mlm, ProbeCondition::image(ImageCondition::RandomImage))?,
    )?;
    Some(Asymmetry { recon_random_text: recon, mlm_random_image: mlm })
}

/// Average precision: scores sorted descending, tied scores form one
/// threshold, `AP = Σ (Rₙ − Rₙ₋₁)·Pₙ`.
pub fn pr_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("scores".into()));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Invalid("labels must be 0 or 1".into()));
    }
    if positives == 0 || positives == labels.len() {
        return Err(Error::Invalid("PR-AUC needs at least one positive and one negative".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut ap, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            tp += labels[order[k]] as usize;
            seen += 1;
            k += 1;
        }
        let recall = tp as f64 / positives as f64;
        ap += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
    }
    Ok(ap)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    /// One seed for per-seed rows; every seed for the median row.
    pub seeds: Vec<u64>,
    pub pr_auc: f64,
    pub median: bool,
}

/// Digests proving every variant saw the same initial parameters and data
/// order for a given seed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FairnessAudit {
    pub seed: u64,
    pub variant: String,
    pub init: [u8; 32],
    pub pretrain_order: [u8; 32],
    pub finetune_order: [u8; 32],
}

pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub audits: Vec<FairnessAudit>,
}

impl AblationReport {
    pub fn median_of(&self, name: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.median && r.name == name).map(|r| r.pr_auc)
    }

    /// All variants share init and data-order digests within each seed.
    pub fn is_fair(&self) -> bool {
        self.audits.iter().all(|a| {
            self.audits.iter().filter(|b| b.seed == a.seed).all(|b| {
                a.init == b.init && a.pretrain_order == b.pretrain_order && a.finetune_order == b.finetune_order
            })
        })
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Data shared by every variant of an ablation.
pub struct AblationData<'a> {
    pub corpus: &'a Corpus,
    pub train_pairs: &'a [PairExample],
    pub test_pairs: &'a [PairExample],
}

/// Progress notifications from [`run_ablation`].
pub enum AblationEvent<'a> {
    Started { variant: &'a str, seed: u64 },
    /// Emitted once per distinct pre-training recipe and seed.
    Pretrained { variant: &'a str, seed: u64, params: &'a ParamStore },
    Finished { variant: &'a str, seed: u64, pr_auc: f64 },
}

/// Pre-trains and fine-tunes every variant for every seed, scores the test
/// pairs and reports per-seed and median PR-AUC. Variants differing only in
/// fine-tuning reuse the same pre-trained parameters.
pub fn run_ablation(
    base: &RunConfig,
    variants: &[VariantSpec],
    seeds: &[u64],
    data: &AblationData<'_>,
    mut progress: impl FnMut(AblationEvent<'_>),
) -> Result<AblationReport> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one variant and one seed".into()));
    }
    for v in variants {
        v.validate()?;
    }
    let labels: Vec<u8> = data.test_pairs.iter().map(|p| p.label).collect();
    let model = Mlim::new(base.model.clone())?;
    let mut per_variant = vec![Vec::with_capacity(seeds.len()); variants.len()];
    let mut audits = Vec::new();
    let mut rows = Vec::new();
    for &seed in seeds {
        let init = model.init_params(&mut rng::stream(seed, Stream::Init));
        let mut pretrained: Vec<(usize, ParamStore, [u8; 32])> = Vec::new();
        for (vi, v) in variants.iter().enumerate() {
            progress(AblationEvent::Started { variant: &v.name, seed });
            let cached = pretrained.iter().find(|(j, _, _)| variants[*j].same_pretraining(v));
            let (mut params, pretrain_order) = match cached {
                Some((_, p, order)) => (p.clone(), *order),
                None => {
                    let mut p = init.clone();
                    let cfg = v.apply(&base.pretrain);
                    let run = training::pretrain(&model, &mut p, data.corpus, &cfg, &base.mam, seed, |_| {})?;
                    progress(AblationEvent::Pretrained { variant: &v.name, seed, params: &p });
                    pretrained.push((vi, p.clone(), run.order_digest));
                    (p, run.order_digest)
                }
            };
            let mdo = if v.mdo { base.mdo.clone() } else { MdoConfig::disabled() };
            let ft = training::finetune(&model, &mut params, data.train_pairs, &base.finetune, &mdo, seed, |_| {})?;
            let scores = training::score_pairs(&model, &params, data.test_pairs)?;
            let auc = pr_auc(&scores, &labels)?;
            progress(AblationEvent::Finished { variant: &v.name, seed, pr_auc: auc });
            per_variant[vi].push(auc);
            audits.push(FairnessAudit {
                seed,
                variant: v.name.clone(),
                init: init.digest(),
                pretrain_order,
                finetune_order: ft.order_digest,
            });
            rows.push(AblationRow { name: v.name.clone(), seeds: vec![seed], pr_auc: auc, median: false });
        }
    }
    for (v, aucs) in variants.iter().zip(&per_variant) {
        rows.push(AblationRow { name: v.name.clone(), seeds: seeds.to_vec(), pr_auc: median(aucs), median: true });
    }
    Ok(AblationReport { rows, audits })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        let ap = pr_auc(&[0.9, 0.8, 0.3], &[1, 0, 1]).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_ranking() {
        assert_eq!(pr_auc(&[0.9, 0.7, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
    }

    #[test]
    fn ties_form_one_threshold() {
        // one group holding everything: precision = base rate
        let ap = pr_auc(&[0.5; 4], &[1, 0, 0, 0]).unwrap();
        assert!((ap - 0.25).abs() < 1e-15);
    }

    #[test]
    fn single_class_rejected() {
        assert!(pr_auc(&[0.1, 0.2], &[1, 1]).is_err());
        assert!(pr_auc(&[0.1, 0.2], &[0, 0]).is_err());
        assert!(pr_auc(&[0.1], &[0, 1]).is_err());
    }

    #[test]
    fn both_modalities_varied_is_invalid() {
        let c = ProbeCondition { image: ImageCondition::GrayImage, text: TextCondition::EmptyText };
        assert!(c.validate().is_err());
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0]), 2.5);
    }
}
