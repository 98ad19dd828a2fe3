//! Run configuration. Every struct rejects unknown keys and fills omitted
//! keys from its defaults.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{Vocab, DEFAULT_IMAGE_SIDE, MAX_TEXT_LEN};
use crate::error::{Error, Result};

const THIRD: f64 = 1.0 / 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_side: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    /// Pre-norm blocks with a final layer norm; `false` selects post-norm.
    pub pre_norm: bool,
    /// Hidden widths of the patch embedder; the last stage always emits `d_model`.
    pub embedder_channels: Vec<usize>,
    /// Hidden widths of the transposed-conv decoder; the last stage emits 3 channels.
    pub decoder_channels: Vec<usize>,
    pub max_text_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_side: DEFAULT_IMAGE_SIDE,
            d_model: 128,
            layers: 4,
            heads: 4,
            d_ff: 512,
            dropout: 0.1,
            pre_norm: true,
            embedder_channels: vec![32, 64],
            decoder_channels: vec![64, 32],
            max_text_len: MAX_TEXT_LEN,
        }
    }
}

impl ModelConfig {
    pub fn embedder_stages(&self) -> usize {
        self.embedder_channels.len() + 1
    }

    pub fn grid_side(&self) -> usize {
        self.image_side >> self.embedder_stages()
    }

    pub fn image_positions(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn vocab_size(&self) -> usize {
        Vocab::standard().len()
    }

    /// Longest assembled input: a pair of full captions and two images plus
    /// one `[CLS]` and three `[SEP]`.
    pub fn max_seq(&self) -> usize {
        4 + 2 * self.max_text_len + 2 * self.image_positions()
    }

    pub fn validate(&self) -> Result<()> {
        let stages = self.embedder_stages();
        if self.image_side == 0 || self.image_side % (1 << stages) != 0 {
            return Err(Error::Config(format!(
                "image side {} is not divisible by 2^{stages}",
                self.image_side
            )));
        }
        if self.decoder_channels.len() != self.embedder_channels.len() {
            return Err(Error::Config(
                "decoder must have as many upsampling stages as the embedder has downsampling stages".into(),
            ));
        }
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!("d_model {} not divisible by {} heads", self.d_model, self.heads)));
        }
        if self.embedder_channels.iter().chain(&self.decoder_channels).any(|&c| c == 0) || self.d_ff == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if self.max_text_len == 0 {
            return Err(Error::Config("max_text_len must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MamConfig {
    pub p_heavy: f64,
    pub p_light: f64,
    /// Weights of (heavy image, heavy text, light/light).
    pub mode_weights: [f64; 3],
}

impl Default for MamConfig {
    fn default() -> Self {
        Self { p_heavy: 0.6, p_light: 0.15, mode_weights: [THIRD; 3] }
    }
}

impl MamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.p_light && self.p_light <= self.p_heavy && self.p_heavy <= 1.0) {
            return Err(Error::Config(format!(
                "mam probabilities must satisfy 0 <= p_light ({}) <= p_heavy ({}) <= 1",
                self.p_light, self.p_heavy
            )));
        }
        validate_weights("mam.mode_weights", &self.mode_weights)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MdoConfig {
    pub enabled: bool,
    /// Weights of (text only, image only, image and text).
    pub mode_weights: [f64; 3],
}

impl Default for MdoConfig {
    fn default() -> Self {
        Self { enabled: true, mode_weights: [THIRD; 3] }
    }
}

impl MdoConfig {
    pub fn disabled() -> Self {
        Self { enabled: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        validate_weights("mdo.mode_weights", &self.mode_weights)
    }
}

fn validate_weights(key: &str, w: &[f64; 3]) -> Result<()> {
    let sum: f64 = w.iter().sum();
    if w.iter().any(|&x| !(x >= 0.0)) || libm::fabs(sum - 1.0) > 1e-6 {
        return Err(Error::Config(format!("{key} must be non-negative and sum to 1, got {w:?}")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskingPolicy {
    /// Modality-aware masking with one sampled mode per micro-batch.
    Mam,
    /// Fixed Bernoulli rate on both modalities, no modes.
    Naive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub mlm: f64,
    pub recon: f64,
    pub itm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { mlm: 1.0, recon: 1.0, itm: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 8e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub micro_batch: usize,
    pub optimizer: AdamConfig,
    pub clip_norm: Option<f64>,
    pub loss_weights: LossWeights,
    pub masking: MaskingPolicy,
    pub naive_prob: f64,
    /// Fraction of items whose image is swapped for another in-batch image
    /// when the ITM loss is active.
    pub itm_negative_rate: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            micro_batch: 8,
            optimizer: AdamConfig::default(),
            clip_norm: Some(1.0),
            loss_weights: LossWeights::default(),
            masking: MaskingPolicy::Mam,
            naive_prob: 0.2,
            itm_negative_rate: 0.5,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        validate_batching("pretrain", self.batch_size, self.micro_batch)?;
        let w = &self.loss_weights;
        if [w.mlm, w.recon, w.itm].iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if w.itm > 0.0 && self.micro_batch < 2 {
            return Err(Error::Config("ITM negatives need micro-batches of at least 2 items".into()));
        }
        if !(0.0..=1.0).contains(&self.naive_prob) || !(0.0..=1.0).contains(&self.itm_negative_rate) {
            return Err(Error::Config("probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

fn validate_batching(section: &str, batch: usize, micro: usize) -> Result<()> {
    if micro == 0 || batch == 0 || batch % micro != 0 {
        return Err(Error::Config(format!(
            "{section}.micro_batch ({micro}) must divide {section}.batch_size ({batch})"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub micro_batch: usize,
    pub optimizer: AdamConfig,
    pub clip_norm: Option<f64>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { steps: 1000, batch_size: 32, micro_batch: 8, optimizer: AdamConfig::default(), clip_norm: Some(1.0) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_items: usize,
    pub n_pairs_train: usize,
    pub n_pairs_test: usize,
    pub match_fraction: f64,
    /// Directory holding a generated corpus (`manifest.jsonl` plus images).
    /// When absent the corpus is sampled in memory from the run seed.
    pub corpus_dir: Option<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n_items: 2000, n_pairs_train: 30_000, n_pairs_test: 10_000, match_fraction: 0.5, corpus_dir: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub mask_probs: Vec<f64>,
    pub n_eval: usize,
    pub gray_level: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { mask_probs: vec![0.1, 0.3, 0.5, 0.75], n_eval: 256, gray_level: 0.5 }
    }
}

/// One row of the loss/masking ablation matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantSpec {
    pub name: String,
    pub recon: bool,
    pub itm: bool,
    pub mam: bool,
    /// Fixed masking rate applied to both modalities; exclusive with `mam`.
    pub naive_prob: Option<f64>,
    pub mdo: bool,
}

impl VariantSpec {
    fn new(name: &str, recon: bool, itm: bool, mam: bool, mdo: bool) -> Self {
        Self { name: name.into(), recon, itm, mam, naive_prob: if mam { None } else { Some(0.2) }, mdo }
    }

    /// The loss/masking variants plus the fine-tuning-without-dropout variant.
    pub fn standard_matrix() -> Vec<VariantSpec> {
        vec![
            Self::new("RECON + ITM + MLM + MAM", true, true, true, true),
            Self::new("RECON + MLM + MAM", true, false, true, true),
            Self::new("RECON + MLM + Naive Masking", true, false, false, true),
            Self::new("ITM + MLM + MAM", false, true, true, true),
            Self::new("ITM + MLM + Naive Masking", false, true, false, true),
            Self::new("RECON + MLM + MAM, fine-tuned without MDO", true, false, true, false),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        match (self.mam, self.naive_prob) {
            (true, Some(_)) => Err(Error::Config(format!(
                "variant `{}` enables both modality-aware and naive masking",
                self.name
            ))),
            (false, None) => Err(Error::Config(format!("variant `{}` selects no masking policy", self.name))),
            (false, Some(p)) if !(0.0..=1.0).contains(&p) => {
                Err(Error::Config(format!("variant `{}` naive_prob {p} not in [0, 1]", self.name)))
            }
            _ => Ok(()),
        }
    }

    /// Same pre-training recipe (loss set and masking) as `other`.
    pub fn same_pretraining(&self, other: &VariantSpec) -> bool {
        self.recon == other.recon && self.itm == other.itm && self.mam == other.mam && self.naive_prob == other.naive_prob
    }

    /// Applies the variant's loss and masking choices to a pre-training config.
    pub fn apply(&self, base: &PretrainConfig) -> PretrainConfig {
        // a disabled loss in the base config falls back to unit weight when the variant enables it
        let pick = |on: bool, w: f64| match (on, w > 0.0) {
            (false, _) => 0.0,
            (true, true) => w,
            (true, false) => 1.0,
        };
        let mut cfg = base.clone();
        cfg.loss_weights.recon = pick(self.recon, base.loss_weights.recon);
        cfg.loss_weights.itm = pick(self.itm, base.loss_weights.itm);
        match self.naive_prob {
            Some(p) => {
                cfg.masking = MaskingPolicy::Naive;
                cfg.naive_prob = p;
            }
            None => cfg.masking = MaskingPolicy::Mam,
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub variants: Vec<VariantSpec>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { seeds: vec![0, 1, 2], variants: VariantSpec::standard_matrix() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub mam: MamConfig,
    pub mdo: MdoConfig,
    pub probe: ProbeConfig,
    pub ablation: AblationConfig,
    /// Checkpoint consumed by `finetune` and `probe`.
    pub checkpoint: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 1,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            mam: MamConfig::default(),
            mdo: MdoConfig::default(),
            probe: ProbeConfig::default(),
            ablation: AblationConfig::default(),
            checkpoint: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        validate_batching("finetune", self.finetune.batch_size, self.finetune.micro_batch)?;
        self.mam.validate()?;
        self.mdo.validate()?;
        if !(self.data.match_fraction > 0.0 && self.data.match_fraction < 1.0) {
            return Err(Error::Config("data.match_fraction must lie in (0, 1)".into()));
        }
        if self.data.n_items == 0 {
            return Err(Error::Config("data.n_items must be at least 1".into()));
        }
        if self.probe.mask_probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("probe.mask_probs must lie in [0, 1]".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        for v in &self.ablation.variants {
            v.validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        assert_eq!(ModelConfig::default().image_positions(), 64);
    }

    #[test]
    fn conflicting_variant_rejected() {
        let mut v = VariantSpec::standard_matrix().remove(1);
        v.naive_prob = Some(0.2);
        assert!(v.validate().is_err());
    }

    #[test]
    fn micro_batch_must_divide() {
        let mut c = RunConfig::default();
        c.pretrain.micro_batch = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn mam_bounds() {
        let c = MamConfig { p_heavy: 0.1, p_light: 0.2, ..Default::default() };
        assert!(c.validate().is_err());
        let c = MamConfig { mode_weights: [0.5, 0.5, 0.5], ..Default::default() };
        assert!(c.validate().is_err());
    }
}
