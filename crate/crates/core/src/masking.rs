//! Modality-aware masking for pre-training and modality dropout for
//! fine-tuning.
//!
//! Masking replaces an embedding, of either modality, with the single
//! `[MASK]` row of the word-embedding table. It runs on pre-positional
//! embeddings; positions are added afterwards.

use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use rand::Rng as _;

use crate::config::MamConfig;
use crate::data::{TokenId, Vocab, MASK};
use crate::error::{Error, Result};
use crate::model::Mlim;
use crate::rng::Rng;
use crate::tape::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskMode {
    HeavyImage,
    HeavyText,
    LightLight,
}

impl MaskMode {
    pub const ALL: [MaskMode; 3] = [MaskMode::HeavyImage, MaskMode::HeavyText, MaskMode::LightLight];

    pub fn label(self) -> &'static str {
        match self {
            MaskMode::HeavyImage => "heavy_image",
            MaskMode::HeavyText => "heavy_text",
            MaskMode::LightLight => "light_light",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MdoMode {
    TextOnly,
    ImageOnly,
    ImageText,
}

impl MdoMode {
    pub const ALL: [MdoMode; 3] = [MdoMode::TextOnly, MdoMode::ImageOnly, MdoMode::ImageText];

    pub fn keeps_text(self) -> bool {
        self != MdoMode::ImageOnly
    }

    pub fn keeps_image(self) -> bool {
        self != MdoMode::TextOnly
    }

    pub fn label(self) -> &'static str {
        match self {
            MdoMode::TextOnly => "text_only",
            MdoMode::ImageOnly => "image_only",
            MdoMode::ImageText => "image_text",
        }
    }
}

/// Per-position mask decisions for one item.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub text_mask: Vec<bool>,
    pub image_mask: Vec<bool>,
    /// `None` for naive fixed-rate masking and for probes.
    pub mode: Option<MaskMode>,
}

impl MaskPlan {
    pub fn empty(text_len: usize, image_len: usize) -> Self {
        Self { text_mask: alloc::vec![false; text_len], image_mask: alloc::vec![false; image_len], mode: None }
    }

    pub fn masked_text(&self) -> usize {
        self.text_mask.iter().filter(|&&m| m).count()
    }

    pub fn masked_image(&self) -> usize {
        self.image_mask.iter().filter(|&&m| m).count()
    }

    /// Clears positions holding special tokens.
    pub fn protect_specials(&mut self, tokens: &[TokenId]) {
        for (m, &t) in self.text_mask.iter_mut().zip(tokens) {
            if Vocab::is_special(t) {
                *m = false;
            }
        }
    }
}

static PLANS_BUILT: AtomicU64 = AtomicU64::new(0);

/// Number of mask plans constructed by this process so far.
pub fn plans_built() -> u64 {
    PLANS_BUILT.load(Ordering::Relaxed)
}

/// Categorical draw over `(heavy image, heavy text, light/light)`.
pub fn sample_mode(rng: &mut Rng, config: &MamConfig) -> MaskMode {
    MaskMode::ALL[categorical(rng, &config.mode_weights)]
}

pub fn sample_mdo_mode(rng: &mut Rng, weights: &[f64; 3]) -> MdoMode {
    MdoMode::ALL[categorical(rng, weights)]
}

fn categorical(rng: &mut Rng, weights: &[f64; 3]) -> usize {
    let total: f64 = weights.iter().sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc && w > 0.0 {
            return i;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(2)
}

/// Independent Bernoulli draws per position at the mode's rates.
pub fn make_plan(mode: MaskMode, text_len: usize, image_len: usize, rng: &mut Rng, config: &MamConfig) -> MaskPlan {
    let (p_text, p_image) = match mode {
        MaskMode::HeavyImage => (config.p_light, config.p_heavy),
        MaskMode::HeavyText => (config.p_heavy, config.p_light),
        MaskMode::LightLight => (config.p_light, config.p_light),
    };
    let mut plan = bernoulli_plan(text_len, image_len, p_text, p_image, rng);
    plan.mode = Some(mode);
    plan
}

/// Mode-free plan with explicit per-modality rates (naive masking, probes).
pub fn bernoulli_plan(text_len: usize, image_len: usize, p_text: f64, p_image: f64, rng: &mut Rng) -> MaskPlan {
    PLANS_BUILT.fetch_add(1, Ordering::Relaxed);
    let text_mask = (0..text_len).map(|_| draw(rng, p_text)).collect();
    let image_mask = (0..image_len).map(|_| draw(rng, p_image)).collect();
    MaskPlan { text_mask, image_mask, mode: None }
}

fn draw(rng: &mut Rng, p: f64) -> bool {
    if p <= 0.0 {
        false
    } else if p >= 1.0 {
        true
    } else {
        rng.random::<f64>() < p
    }
}

/// The four content segments of a pair input; `None` segments are left out
/// of the assembled sequence entirely.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairSegments<T> {
    pub text_a: Option<T>,
    pub image_a: Option<T>,
    pub text_b: Option<T>,
    pub image_b: Option<T>,
}

impl<T> PairSegments<T> {
    pub fn full(text_a: T, image_a: T, text_b: T, image_b: T) -> Self {
        Self { text_a: Some(text_a), image_a: Some(image_a), text_b: Some(text_b), image_b: Some(image_b) }
    }
}

/// Modality dropout: drops every segment of the dropped modality. The
/// separators are added at assembly time and always survive.
pub fn apply_mdo<T>(pair: PairSegments<T>, mode: MdoMode) -> PairSegments<T> {
    let keep_text = mode.keeps_text();
    let keep_image = mode.keeps_image();
    PairSegments {
        text_a: pair.text_a.filter(|_| keep_text),
        image_a: pair.image_a.filter(|_| keep_image),
        text_b: pair.text_b.filter(|_| keep_text),
        image_b: pair.image_b.filter(|_| keep_image),
    }
}

/// Output of [`Mlim::apply_masking`].
pub struct Masked {
    pub text: Var,
    pub image: Var,
    /// Positions (within the text sequence) and original ids of masked tokens.
    pub mlm_positions: Vec<usize>,
    pub mlm_targets: Vec<TokenId>,
}

impl Mlim {
    /// Substitutes the shared `[MASK]` word embedding at every masked
    /// position of both sequences.
    pub fn apply_masking(
        &self,
        g: &mut Graph<'_>,
        text: Var,
        tokens: &[TokenId],
        image: Var,
        plan: &MaskPlan,
    ) -> Result<Masked> {
        let (tl, il) = (g.value(text).rows(), g.value(image).rows());
        if plan.text_mask.len() != tl || plan.image_mask.len() != il || tokens.len() != tl {
            return Err(Error::Shape(alloc::format!(
                "mask plan covers {}+{} positions, sequences have {tl}+{il}",
                plan.text_mask.len(),
                plan.image_mask.len()
            )));
        }
        let table = g.param(self.layout.word_embeddings);
        let fill = MASK as usize;
        let text_out = if plan.masked_text() > 0 {
            g.replace_rows(text, table, fill, plan.text_mask.clone())
        } else {
            text
        };
        let image_out = if plan.masked_image() > 0 {
            g.replace_rows(image, table, fill, plan.image_mask.clone())
        } else {
            image
        };
        let mlm_positions: Vec<usize> = (0..tl).filter(|&i| plan.text_mask[i]).collect();
        let mlm_targets = mlm_positions.iter().map(|&i| tokens[i]).collect();
        Ok(Masked { text: text_out, image: image_out, mlm_positions, mlm_targets })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn degenerate_weights() {
        let cfg = MamConfig { mode_weights: [1.0, 0.0, 0.0], ..Default::default() };
        let mut rng = stream(3, Stream::Masking);
        assert!((0..1000).all(|_| sample_mode(&mut rng, &cfg) == MaskMode::HeavyImage));
        let cfg = MamConfig { mode_weights: [0.0, 0.0, 1.0], ..Default::default() };
        assert!((0..1000).all(|_| sample_mode(&mut rng, &cfg) == MaskMode::LightLight));
    }

    #[test]
    fn extreme_rates() {
        let mut rng = stream(3, Stream::Masking);
        let cfg = MamConfig { p_heavy: 1.0, ..Default::default() };
        let plan = make_plan(MaskMode::HeavyImage, 8, 64, &mut rng, &cfg);
        assert_eq!(plan.masked_image(), 64);
        let cfg = MamConfig { p_light: 0.0, ..Default::default() };
        let plan = make_plan(MaskMode::LightLight, 8, 64, &mut rng, &cfg);
        assert_eq!(plan.masked_image() + plan.masked_text(), 0);
    }

    #[test]
    fn specials_are_protected() {
        let mut plan = MaskPlan { text_mask: alloc::vec![true; 4], image_mask: alloc::vec![], mode: None };
        plan.protect_specials(&[2, 5, 3, 0]);
        assert_eq!(plan.text_mask, [false, true, false, false]);
    }

    #[test]
    fn same_seed_same_modes() {
        let cfg = MamConfig::default();
        let mut a = stream(9, Stream::Masking);
        let mut b = stream(9, Stream::Masking);
        for _ in 0..100 {
            assert_eq!(sample_mode(&mut a, &cfg), sample_mode(&mut b, &cfg));
        }
    }
}
