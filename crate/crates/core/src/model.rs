//! Parameter layout, input assembly, transformer encoder, heads and losses.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::config::ModelConfig;
use crate::data::{ImageTensor, TokenId, Vocab, CLS, SEP};
use crate::error::{Error, Result};
use crate::masking::PairSegments;
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{log_softmax_at, Graph, Var};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal(f64),
    Uniform(f64),
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub(crate) struct BlockIds {
    pub ln1: (ParamId, ParamId),
    pub q: (ParamId, ParamId),
    pub k: (ParamId, ParamId),
    pub v: (ParamId, ParamId),
    pub out: (ParamId, ParamId),
    pub ln2: (ParamId, ParamId),
    pub ff_in: (ParamId, ParamId),
    pub ff_out: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub word_embeddings: ParamId,
    pub text_positions: ParamId,
    pub image_positions: ParamId,
    pub embedder: Vec<(ParamId, ParamId)>,
    pub blocks: Vec<BlockIds>,
    pub final_norm: (ParamId, ParamId),
    pub mlm_dense: (ParamId, ParamId),
    pub mlm_out: (ParamId, ParamId),
    pub decoder_proj: (ParamId, ParamId),
    pub decoder: Vec<(ParamId, ParamId)>,
    pub itm: (ParamId, ParamId),
    pub pair: (ParamId, ParamId),
}

struct LayoutBuilder {
    specs: Vec<(String, (usize, usize), Init)>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: (usize, usize), init: Init) -> ParamId {
        self.specs.push((name, shape, init));
        ParamId(self.specs.len() - 1)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> (ParamId, ParamId) {
        let bound = 1.0 / libm::sqrt(fan_in as f64);
        (
            self.add(format!("{name}.weight"), (fan_in, fan_out), Init::Uniform(bound)),
            self.add(format!("{name}.bias"), (1, fan_out), Init::Zeros),
        )
    }

    fn conv(&mut self, name: &str, rows: usize, cols: usize, out_channels: usize, fan_in: usize) -> (ParamId, ParamId) {
        let bound = 1.0 / libm::sqrt(fan_in as f64);
        (
            self.add(format!("{name}.weight"), (rows, cols), Init::Uniform(bound)),
            self.add(format!("{name}.bias"), (1, out_channels), Init::Uniform(bound)),
        )
    }

    fn norm(&mut self, name: &str, d: usize) -> (ParamId, ParamId) {
        (
            self.add(format!("{name}.gain"), (1, d), Init::Ones),
            self.add(format!("{name}.bias"), (1, d), Init::Zeros),
        )
    }
}

/// The full model: patch embedder, word and position tables, transformer
/// encoder, MLM head, image decoder, and the ITM and pair-matching heads.
///
/// `Mlim` holds only the architecture; learnable values live in a
/// [`ParamStore`] produced by [`Mlim::init_params`] or loaded from a
/// checkpoint and checked with [`Mlim::check_params`].
#[derive(Clone, Debug)]
pub struct Mlim {
    cfg: ModelConfig,
    vocab: usize,
    pub(crate) layout: Layout,
    specs: Vec<(String, (usize, usize), Init)>,
}

/// Role of a span of positions in an assembled input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SegmentKind {
    Cls,
    Sep,
    TextA,
    ImageA,
    TextB,
    ImageB,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub kind: SegmentKind,
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

/// Partition of assembled positions into tagged segments.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SegmentMap {
    segments: Vec<Segment>,
    len: usize,
}

impl SegmentMap {
    fn push(&mut self, kind: SegmentKind, len: usize) {
        self.segments.push(Segment { kind, start: self.len, len });
        self.len += len;
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn find(&self, kind: SegmentKind) -> Option<Range<usize>> {
        self.segments.iter().find(|s| s.kind == kind).map(Segment::range)
    }

    /// Role of one position.
    pub fn role(&self, pos: usize) -> Option<SegmentKind> {
        self.segments.iter().find(|s| s.range().contains(&pos)).map(|s| s.kind)
    }
}

/// Transformer input after masking and positions, with its segment map.
pub struct Assembled {
    pub input: Var,
    pub map: SegmentMap,
}

impl Mlim {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let vocab = Vocab::standard().len();
        let d = cfg.d_model;
        let mut b = LayoutBuilder { specs: Vec::new() };
        let word_embeddings = b.add("word_embeddings".into(), (vocab, d), Init::Normal(0.02));
        let text_positions = b.add("text_positions".into(), (cfg.max_text_len, d), Init::Normal(0.02));
        let image_positions = b.add("image_positions".into(), (cfg.image_positions(), d), Init::Normal(0.02));

        let mut embedder = Vec::new();
        let mut c_in = 3;
        let widths: Vec<usize> = cfg.embedder_channels.iter().copied().chain([d]).collect();
        for (i, &c_out) in widths.iter().enumerate() {
            embedder.push(b.conv(&format!("embedder.{i}"), 4 * c_in, c_out, c_out, 4 * c_in));
            c_in = c_out;
        }

        let blocks = (0..cfg.layers)
            .map(|l| {
                let p = format!("encoder.{l}");
                BlockIds {
                    ln1: b.norm(&format!("{p}.ln1"), d),
                    q: b.linear(&format!("{p}.attn.query"), d, d),
                    k: b.linear(&format!("{p}.attn.key"), d, d),
                    v: b.linear(&format!("{p}.attn.value"), d, d),
                    out: b.linear(&format!("{p}.attn.output"), d, d),
                    ln2: b.norm(&format!("{p}.ln2"), d),
                    ff_in: b.linear(&format!("{p}.ff.input"), d, cfg.d_ff),
                    ff_out: b.linear(&format!("{p}.ff.output"), cfg.d_ff, d),
                }
            })
            .collect();
        let final_norm = b.norm("encoder.final_norm", d);
        let mlm_dense = b.linear("mlm_head.dense", d, d);
        let mlm_out = b.linear("mlm_head.output", d, vocab);

        let decoder_proj = b.linear("decoder.project", d, d);
        let mut decoder = Vec::new();
        let mut c_in = d;
        let widths: Vec<usize> = cfg.decoder_channels.iter().copied().chain([3]).collect();
        for (i, &c_out) in widths.iter().enumerate() {
            decoder.push(b.conv(&format!("decoder.{i}"), c_in, 4 * c_out, c_out, c_in));
            c_in = c_out;
        }
        let itm = b.linear("itm_head", d, 2);
        let pair = b.linear("pair_head", d, 1);

        let layout = Layout {
            word_embeddings,
            text_positions,
            image_positions,
            embedder,
            blocks,
            final_norm,
            mlm_dense,
            mlm_out,
            decoder_proj,
            decoder,
            itm,
            pair,
        };
        Ok(Self { cfg, vocab, layout, specs: b.specs })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    pub(crate) fn shape_of(&self, id: ParamId) -> (usize, usize) {
        self.specs[id.0].1
    }

    /// `(name, shape)` for every parameter in registration order.
    pub fn param_shapes(&self) -> impl Iterator<Item = (&str, (usize, usize))> {
        self.specs.iter().map(|(n, s, _)| (n.as_str(), *s))
    }

    /// Word/position tables ~ N(0, 0.02²); conv filters and biases uniform
    /// in ±1/√fan_in; dense weights uniform in ±1/√fan_in with zero bias;
    /// norms start at unit gain.
    pub fn init_params(&self, rng: &mut Rng) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, (r, c), init) in &self.specs {
            let n = r * c;
            let data: Vec<f64> = match *init {
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("valid std");
                    (0..n).map(|_| dist.sample(rng)).collect()
                }
                Init::Uniform(bound) => (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
                Init::Zeros => alloc::vec![0.0; n],
                Init::Ones => alloc::vec![1.0; n],
            };
            store.insert(name.clone(), Matrix::from_vec(*r, *c, data)).expect("unique layout names");
        }
        store
    }

    /// Checks that `params` has exactly this model's names and shapes, in order.
    pub fn check_params(&self, params: &ParamStore) -> Result<()> {
        if params.len() != self.specs.len() {
            return Err(Error::Shape(format!(
                "model has {} parameters, store has {}",
                self.specs.len(),
                params.len()
            )));
        }
        for ((name, shape, _), (_, pname, t)) in self.specs.iter().zip(params.iter()) {
            if name != pname || *shape != t.shape() {
                return Err(Error::Shape(format!(
                    "parameter `{pname}` {:?} does not match `{name}` {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Parameter ids owned by the image decoder (removed when fine-tuning).
    pub fn decoder_param_ids(&self) -> Vec<ParamId> {
        let mut ids = alloc::vec![self.layout.decoder_proj.0, self.layout.decoder_proj.1];
        for &(w, b) in &self.layout.decoder {
            ids.push(w);
            ids.push(b);
        }
        ids
    }

    pub fn decoder_param_count(&self) -> usize {
        self.decoder_param_ids().iter().map(|&id| self.shape_of(id).0 * self.shape_of(id).1).sum()
    }

    /// Trainable set while fine-tuning: everything except the decoder.
    pub fn finetune_trainable(&self) -> Vec<bool> {
        let mut t = alloc::vec![true; self.specs.len()];
        for id in self.decoder_param_ids() {
            t[id.0] = false;
        }
        t
    }

    fn special(&self, g: &mut Graph<'_>, id: TokenId) -> Var {
        let table = g.param(self.layout.word_embeddings);
        g.gather_rows(table, alloc::vec![id as usize])
    }

    fn check_seq(&self, len: usize) -> Result<()> {
        let max = self.cfg.max_seq();
        if len > max {
            return Err(Error::SequenceOverflow { len, max });
        }
        Ok(())
    }

    /// `[CLS] ⊕ text ⊕ [SEP] ⊕ image`; the image segment may be absent.
    pub fn assemble(&self, g: &mut Graph<'_>, text: Var, image: Option<Var>) -> Result<Assembled> {
        let mut map = SegmentMap::default();
        let mut parts = Vec::new();
        parts.push(self.special(g, CLS));
        map.push(SegmentKind::Cls, 1);
        parts.push(text);
        map.push(SegmentKind::TextA, g.value(text).rows());
        parts.push(self.special(g, SEP));
        map.push(SegmentKind::Sep, 1);
        if let Some(image) = image {
            parts.push(image);
            map.push(SegmentKind::ImageA, g.value(image).rows());
        }
        self.check_seq(map.len())?;
        Ok(Assembled { input: g.concat_rows(parts), map })
    }

    /// `[CLS] ⊕ textA ⊕ [SEP] ⊕ imageA ⊕ [SEP] ⊕ textB ⊕ [SEP] ⊕ imageB`,
    /// skipping absent segments but keeping every separator.
    pub fn assemble_pair(&self, g: &mut Graph<'_>, pair: PairSegments<Var>) -> Result<Assembled> {
        let mut map = SegmentMap::default();
        let mut parts = Vec::new();
        parts.push(self.special(g, CLS));
        map.push(SegmentKind::Cls, 1);
        let segments = [
            (pair.text_a, SegmentKind::TextA),
            (pair.image_a, SegmentKind::ImageA),
            (pair.text_b, SegmentKind::TextB),
            (pair.image_b, SegmentKind::ImageB),
        ];
        for (i, (seg, kind)) in segments.into_iter().enumerate() {
            if i > 0 {
                parts.push(self.special(g, SEP));
                map.push(SegmentKind::Sep, 1);
            }
            if let Some(v) = seg {
                let n = g.value(v).rows();
                if n > 0 {
                    parts.push(v);
                }
                map.push(kind, n);
            }
        }
        self.check_seq(map.len())?;
        Ok(Assembled { input: g.concat_rows(parts), map })
    }

    /// Encoder stack. Dropout is active only when `dropout_rng` is given.
    pub fn transformer_forward(&self, g: &mut Graph<'_>, input: Var, mut dropout_rng: Option<&mut Rng>) -> Result<Var> {
        if !g.value(input).is_finite() {
            return Err(Error::NonFinite("transformer input".into()));
        }
        let heads = self.cfg.heads;
        let mut x = input;
        for blk in &self.layout.blocks {
            if self.cfg.pre_norm {
                let h = self.norm(g, x, blk.ln1);
                let a = self.self_attention(g, h, blk, heads);
                let a = self.dropout(g, a, dropout_rng.as_deref_mut());
                x = g.add(x, a);
                let h = self.norm(g, x, blk.ln2);
                let f = self.feed_forward(g, h, blk);
                let f = self.dropout(g, f, dropout_rng.as_deref_mut());
                x = g.add(x, f);
            } else {
                let a = self.self_attention(g, x, blk, heads);
                let a = self.dropout(g, a, dropout_rng.as_deref_mut());
                let s = g.add(x, a);
                x = self.norm(g, s, blk.ln1);
                let f = self.feed_forward(g, x, blk);
                let f = self.dropout(g, f, dropout_rng.as_deref_mut());
                let s = g.add(x, f);
                x = self.norm(g, s, blk.ln2);
            }
        }
        if self.cfg.pre_norm {
            x = self.norm(g, x, self.layout.final_norm);
        }
        if !g.value(x).is_finite() {
            return Err(Error::NonFinite("transformer output".into()));
        }
        Ok(x)
    }

    fn norm(&self, g: &mut Graph<'_>, x: Var, (gain, bias): (ParamId, ParamId)) -> Var {
        let (gain, bias) = (g.param(gain), g.param(bias));
        g.layer_norm(x, gain, bias)
    }

    fn dense(&self, g: &mut Graph<'_>, x: Var, (w, b): (ParamId, ParamId)) -> Var {
        let (w, b) = (g.param(w), g.param(b));
        g.linear(x, w, Some(b))
    }

    fn self_attention(&self, g: &mut Graph<'_>, x: Var, blk: &BlockIds, heads: usize) -> Var {
        let q = self.dense(g, x, blk.q);
        let k = self.dense(g, x, blk.k);
        let v = self.dense(g, x, blk.v);
        let a = g.attention(q, k, v, heads);
        self.dense(g, a, blk.out)
    }

    fn feed_forward(&self, g: &mut Graph<'_>, x: Var, blk: &BlockIds) -> Var {
        let h = self.dense(g, x, blk.ff_in);
        let h = g.gelu(h);
        self.dense(g, h, blk.ff_out)
    }

    fn dropout(&self, g: &mut Graph<'_>, x: Var, rng: Option<&mut Rng>) -> Var {
        let p = self.cfg.dropout;
        match rng {
            Some(rng) if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                let n = g.value(x).len();
                let mask = (0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
                g.dropout_with_mask(x, mask)
            }
            _ => x,
        }
    }

    /// Two-layer MLP (dense → GELU → vocabulary projection) on the selected
    /// output positions.
    pub fn mlm_logits(&self, g: &mut Graph<'_>, outputs: Var, positions: &[usize]) -> Var {
        let h = g.select_rows(outputs, positions.to_vec());
        let h = self.dense(g, h, self.layout.mlm_dense);
        let h = g.gelu(h);
        self.dense(g, h, self.layout.mlm_out)
    }

    /// Pointwise projection, then transposed 2×2/stride-2 convolutions back to
    /// full resolution, then an element-wise sigmoid. Output is `[side², 3]`.
    pub fn decode_image(&self, g: &mut Graph<'_>, outputs: Var, image_positions: Range<usize>) -> Result<Var> {
        let expected = self.cfg.image_positions();
        if image_positions.len() != expected {
            return Err(Error::Shape(format!(
                "decoder needs {expected} image positions, got {}",
                image_positions.len()
            )));
        }
        let x = g.select_rows(outputs, image_positions.collect());
        let x = self.dense(g, x, self.layout.decoder_proj);
        let mut x = g.relu(x);
        let mut side = self.cfg.grid_side();
        let n = self.layout.decoder.len();
        for (i, &(w, b)) in self.layout.decoder.iter().enumerate() {
            let (w, b) = (g.param(w), g.param(b));
            x = g.linear(x, w, None);
            x = g.depth_to_space(x, side);
            side *= 2;
            x = g.add_bias(x, b);
            if i + 1 < n {
                x = g.relu(x);
            }
        }
        Ok(g.sigmoid(x))
    }

    /// Two-class aligned/misaligned logits from the `[CLS]` output.
    pub fn itm_logits(&self, g: &mut Graph<'_>, outputs: Var) -> Var {
        let cls = g.select_rows(outputs, alloc::vec![0]);
        self.dense(g, cls, self.layout.itm)
    }

    /// Match logit from the `[CLS]` output; its sigmoid is the match score.
    pub fn pairwise_logit(&self, g: &mut Graph<'_>, outputs: Var) -> Var {
        let cls = g.select_rows(outputs, alloc::vec![0]);
        self.dense(g, cls, self.layout.pair)
    }
}

/// Mean negative log-likelihood over masked positions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MlmLoss {
    pub value: f64,
    /// No masked positions; `value` is 0.
    pub skipped: bool,
}

pub fn mlm_loss(logits: &Matrix, targets: &[TokenId]) -> Result<MlmLoss> {
    if logits.rows() != targets.len() {
        return Err(Error::Shape(format!("{} logit rows for {} targets", logits.rows(), targets.len())));
    }
    if targets.is_empty() {
        return Ok(MlmLoss { value: 0.0, skipped: true });
    }
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t as usize >= logits.cols() {
            return Err(Error::TokenOutOfRange { id: t, vocab: logits.cols() });
        }
        total -= log_softmax_at(logits.row(r), t as usize);
    }
    Ok(MlmLoss { value: total / targets.len() as f64, skipped: false })
}

/// Per pixel, the squared error summed over the three channels; averaged
/// over all pixels.
pub fn recon_loss(recon: &ImageTensor, original: &ImageTensor) -> Result<f64> {
    if recon.height() != original.height() || recon.width() != original.width() {
        return Err(Error::Shape(format!(
            "reconstruction {}×{} vs original {}×{}",
            recon.height(),
            recon.width(),
            original.height(),
            original.width()
        )));
    }
    let pixels = (recon.height() * recon.width()) as f64;
    let sse: f64 = recon.data().iter().zip(original.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sse / pixels)
}

/// [`recon_loss`] averaged over a batch.
pub fn recon_loss_batch(pairs: &[(ImageTensor, ImageTensor)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let mut total = 0.0;
    for (r, o) in pairs {
        total += recon_loss(r, o)?;
    }
    Ok(total / pairs.len() as f64)
}
