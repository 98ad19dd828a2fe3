//! Pre-training and fine-tuning loops.
//!
//! One optimizer step consumes one batch made of `batch_size / micro_batch`
//! micro-batches. Each micro-batch shares one masking mode (pre-training) or
//! one modality-dropout mode (fine-tuning). Items are forwarded one graph at
//! a time, possibly in parallel, and their gradients are summed in item
//! order so results do not depend on the thread count.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use sha2::{Digest, Sha256};

use crate::config::{FinetuneConfig, MamConfig, MaskingPolicy, MdoConfig, PretrainConfig};
use crate::data::{CorpusItem, ImageTensor, PairExample, TokenId};
use crate::embedding::Modality;
use crate::error::{Error, Result};
use crate::masking::{self, apply_mdo, MaskMode, MaskPlan, MdoMode, PairSegments};
use crate::model::{mlm_loss, Mlim, MlmLoss, SegmentKind};
use crate::optim::Adam;
use crate::par::map_indexed;
use crate::params::{Grads, ParamStore};
use crate::rng::{self, Rng, Stream};
use crate::tape::{sigmoid, Graph};

/// Image–caption items held as quantized pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    side: usize,
    images: Vec<Vec<u8>>,
    tokens: Vec<Vec<TokenId>>,
}

impl Corpus {
    pub fn new(side: usize) -> Self {
        Self { side, images: Vec::new(), tokens: Vec::new() }
    }

    /// Renders every scene.
    pub fn from_items(items: &[CorpusItem], side: usize) -> Result<Self> {
        let mut c = Self::new(side);
        for it in items {
            c.push(&crate::data::generate_scene(&it.spec, side)?, it.tokens.clone())?;
        }
        Ok(c)
    }

    pub fn push(&mut self, image: &ImageTensor, tokens: Vec<TokenId>) -> Result<()> {
        if image.height() != self.side || image.width() != self.side {
            return Err(Error::Shape(format!("corpus holds {0}×{0} images", self.side)));
        }
        self.images.push(image.to_bytes());
        self.tokens.push(tokens);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn image(&self, i: usize) -> ImageTensor {
        ImageTensor::from_bytes(self.side, self.side, &self.images[i]).expect("stored image size")
    }

    pub fn tokens(&self, i: usize) -> &[TokenId] {
        &self.tokens[i]
    }

    /// First `n` items.
    pub fn truncated(&self, n: usize) -> Corpus {
        Corpus { side: self.side, images: self.images[..n].to_vec(), tokens: self.tokens[..n].to_vec() }
    }
}

/// Epoch-wise shuffled item order.
pub struct DataOrder {
    rng: Rng,
    order: Vec<usize>,
    cursor: usize,
    digest: Sha256,
}

impl DataOrder {
    pub fn new(n: usize, seed: u64) -> Self {
        Self { rng: rng::stream(seed, Stream::DataOrder), order: (0..n).collect(), cursor: n, digest: Sha256::new() }
    }

    pub fn next_indices(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        for &i in &out {
            self.digest.update((i as u64).to_le_bytes());
        }
        out
    }

    /// SHA-256 of every index handed out so far.
    pub fn digest(&self) -> [u8; 32] {
        self.digest.clone().finalize().into()
    }
}

/// Per-item scale factors turning summed losses into the batch objective.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossScales {
    pub mlm: f64,
    pub recon: f64,
    pub itm: f64,
}

/// One pre-training item, ready to forward.
pub struct PretrainItem<'a> {
    pub image: &'a ImageTensor,
    pub tokens: &'a [TokenId],
    pub plan: &'a MaskPlan,
    /// `Some(true)` aligned, `Some(false)` image swapped; `None` without ITM.
    pub itm_aligned: Option<bool>,
}

/// Raw (unweighted) loss terms of one item.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ItemLosses {
    pub mlm_sum: f64,
    pub mlm_count: usize,
    pub recon: Option<f64>,
    pub itm: Option<f64>,
}

/// Forward and backward for one pre-training item. Gradients of the scaled
/// objective are added to `grads`.
pub fn pretrain_item(
    model: &Mlim,
    params: &ParamStore,
    item: &PretrainItem<'_>,
    scales: LossScales,
    dropout: Option<&mut Rng>,
    grads: Option<&mut Grads>,
) -> Result<ItemLosses> {
    let mut g = Graph::new(params);
    let image = model.embed_image(&mut g, item.image)?;
    let text = model.embed_text(&mut g, item.tokens)?;
    let masked = model.apply_masking(&mut g, text, item.tokens, image, item.plan)?;
    let text = model.add_positions(&mut g, masked.text, Modality::Text)?;
    let image = model.add_positions(&mut g, masked.image, Modality::Image)?;
    let asm = model.assemble(&mut g, text, Some(image))?;
    let out = model.transformer_forward(&mut g, asm.input, dropout)?;

    let mut terms = Vec::new();
    let mut losses = ItemLosses { mlm_count: masked.mlm_positions.len(), ..Default::default() };
    let text_start = asm.map.find(SegmentKind::TextA).map(|r| r.start).unwrap_or(0);
    if !masked.mlm_positions.is_empty() {
        let pos: Vec<usize> = masked.mlm_positions.iter().map(|p| text_start + p).collect();
        let logits = model.mlm_logits(&mut g, out, &pos);
        let raw = mlm_loss(g.value(logits), &masked.mlm_targets)?;
        losses.mlm_sum = raw.value * pos.len() as f64;
        if scales.mlm > 0.0 {
            let targets = masked.mlm_targets.iter().map(|&t| t as usize).collect();
            terms.push(g.cross_entropy(logits, targets, scales.mlm));
        }
    }
    if scales.recon > 0.0 {
        let range = asm.map.find(SegmentKind::ImageA).expect("image segment");
        let recon = model.decode_image(&mut g, out, range)?;
        let pixels = (item.image.height() * item.image.width()) as f64;
        let se = g.squared_error(recon, item.image.to_matrix(), scales.recon);
        losses.recon = Some(g.value(se).scalar_value() / scales.recon / pixels);
        terms.push(se);
    }
    if let (Some(aligned), true) = (item.itm_aligned, scales.itm > 0.0) {
        let logits = model.itm_logits(&mut g, out);
        let ce = g.cross_entropy(logits, vec![aligned as usize], scales.itm);
        losses.itm = Some(g.value(ce).scalar_value() / scales.itm);
        terms.push(ce);
    }
    if !losses.mlm_sum.is_finite() || losses.recon.is_some_and(|r| !r.is_finite()) {
        return Err(Error::NonFinite("pre-training loss".into()));
    }
    if let (Some(grads), false) = (grads, terms.is_empty()) {
        let total = g.sum(terms);
        g.backward(total).accumulate_into(grads);
    }
    Ok(losses)
}

/// Items of one micro-batch together with their masking decisions.
#[derive(Clone, Debug)]
pub struct MicroBatch {
    pub items: Vec<usize>,
    /// Corpus index of the image actually fed for each item (differs from
    /// `items` for ITM negatives).
    pub images: Vec<usize>,
    pub plans: Vec<MaskPlan>,
    pub mode: Option<MaskMode>,
    pub itm_aligned: Option<Vec<bool>>,
}

/// Losses of one micro-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct MicroLosses {
    pub mode: Option<MaskMode>,
    pub mlm: MlmLoss,
    pub recon: Option<f64>,
    pub itm: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub micro: Vec<MicroLosses>,
    pub mlm: f64,
    pub recon: f64,
    pub itm: f64,
    pub total: f64,
    pub grad_norm: f64,
}

/// Draws the masking decisions (and ITM negatives) for one micro-batch.
pub fn plan_micro_batch(
    corpus: &Corpus,
    items: Vec<usize>,
    image_len: usize,
    cfg: &PretrainConfig,
    mam: &MamConfig,
    mask_rng: &mut Rng,
    itm_rng: &mut Rng,
) -> Result<MicroBatch> {
    let mode = match cfg.masking {
        MaskingPolicy::Mam => Some(masking::sample_mode(mask_rng, mam)),
        MaskingPolicy::Naive => None,
    };
    let plans = items
        .iter()
        .map(|&i| {
            let tokens = corpus.tokens(i);
            let mut plan = match mode {
                Some(m) => masking::make_plan(m, tokens.len(), image_len, mask_rng, mam),
                None => masking::bernoulli_plan(tokens.len(), image_len, cfg.naive_prob, cfg.naive_prob, mask_rng),
            };
            plan.protect_specials(tokens);
            plan
        })
        .collect();
    let (images, itm_aligned) = if cfg.loss_weights.itm > 0.0 {
        let (images, aligned) = itm_negatives(&items, cfg.itm_negative_rate, itm_rng)?;
        (images, Some(aligned))
    } else {
        (items.clone(), None)
    };
    Ok(MicroBatch { items, images, plans, mode, itm_aligned })
}

/// In-batch image shuffling: each item is turned into a negative with
/// probability `rate` by pairing it with the image of a different item.
pub fn itm_negatives(items: &[usize], rate: f64, rng: &mut Rng) -> Result<(Vec<usize>, Vec<bool>)> {
    if items.len() < 2 {
        return Err(Error::Invalid("ITM negatives need at least two items per micro-batch".into()));
    }
    let mut images = Vec::with_capacity(items.len());
    let mut aligned = Vec::with_capacity(items.len());
    for (k, &i) in items.iter().enumerate() {
        if rng.random::<f64>() < rate {
            let mut j = rng.random_range(0..items.len() - 1);
            if j >= k {
                j += 1;
            }
            images.push(items[j]);
            aligned.push(false);
        } else {
            images.push(i);
            aligned.push(true);
        }
    }
    Ok((images, aligned))
}

/// One optimizer step over a batch of micro-batches: weighted MLM + RECON
/// (+ ITM) objective, gradient clipping, one Adam update.
pub fn pretrain_step(
    model: &Mlim,
    params: &mut ParamStore,
    opt: &mut Adam,
    corpus: &Corpus,
    batch: &[MicroBatch],
    cfg: &PretrainConfig,
    step: usize,
    dropout_seed: Option<u64>,
) -> Result<StepRecord> {
    let w = &cfg.loss_weights;
    let mut grads = Grads::zeros_like(params);
    let mut micro = Vec::with_capacity(batch.len());
    let per_micro = 1.0 / batch.len() as f64;
    let mut offset = 0u64;
    for mb in batch {
        let n = mb.items.len();
        let masked: usize = mb.plans.iter().map(MaskPlan::masked_text).sum();
        let scales = LossScales {
            mlm: if masked > 0 { w.mlm * per_micro / masked as f64 } else { 0.0 },
            recon: w.recon * per_micro / (n as f64 * (corpus.side() * corpus.side()) as f64),
            itm: if mb.itm_aligned.is_some() { w.itm * per_micro / n as f64 } else { 0.0 },
        };
        let frozen: &ParamStore = params;
        let results = map_indexed(n, |k| -> Result<(Grads, ItemLosses)> {
            let image = corpus.image(mb.images[k]);
            let item = PretrainItem {
                image: &image,
                tokens: corpus.tokens(mb.items[k]),
                plan: &mb.plans[k],
                itm_aligned: mb.itm_aligned.as_ref().map(|a| a[k]),
            };
            let mut rng = dropout_seed.map(|s| rng::item_rng(s, step as u64, offset + k as u64));
            let mut g = Grads::zeros_like(frozen);
            let l = pretrain_item(model, frozen, &item, scales, rng.as_mut(), Some(&mut g))?;
            Ok((g, l))
        });
        offset += n as u64;
        let mut mlm_sum = 0.0;
        let mut recon = 0.0;
        let mut itm = 0.0;
        for r in results {
            let (g, l) = r?;
            grads.add_assign(&g);
            mlm_sum += l.mlm_sum;
            recon += l.recon.unwrap_or(0.0);
            itm += l.itm.unwrap_or(0.0);
        }
        let mlm = if masked > 0 {
            MlmLoss { value: mlm_sum / masked as f64, skipped: false }
        } else {
            MlmLoss { value: 0.0, skipped: true }
        };
        let recon = (w.recon > 0.0).then_some(recon / n as f64);
        let itm = mb.itm_aligned.as_ref().map(|_| itm / n as f64);
        let total = w.mlm * mlm.value + w.recon * recon.unwrap_or(0.0) + w.itm * itm.unwrap_or(0.0);
        micro.push(MicroLosses { mode: mb.mode, mlm, recon, itm, total });
    }
    if !micro.iter().all(|m| m.total.is_finite()) {
        return Err(Error::NonFinite(format!("pre-training loss at step {step}")));
    }
    let grad_norm = match cfg.clip_norm {
        Some(c) => grads.clip_global_norm(c),
        None => grads.global_norm(),
    };
    opt.update(params, &grads)?;
    Ok(summarize(step, micro, grad_norm))
}

fn summarize(step: usize, micro: Vec<MicroLosses>, grad_norm: f64) -> StepRecord {
    let mean = |f: &dyn Fn(&MicroLosses) -> Option<f64>| {
        let v: Vec<f64> = micro.iter().filter_map(f).collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    StepRecord {
        step,
        mlm: mean(&|m| (!m.mlm.skipped).then_some(m.mlm.value)),
        recon: mean(&|m| m.recon),
        itm: mean(&|m| m.itm),
        total: mean(&|m| Some(m.total)),
        grad_norm,
        micro,
    }
}

/// Outcome of [`pretrain`].
pub struct PretrainRun {
    pub records: Vec<StepRecord>,
    pub optimizer: Adam,
    pub init_digest: [u8; 32],
    pub order_digest: [u8; 32],
}

/// Step-by-step pre-training driver owning the optimizer and every random
/// stream, so callers can checkpoint between steps.
pub struct Pretrainer<'a> {
    model: &'a Mlim,
    corpus: &'a Corpus,
    cfg: PretrainConfig,
    mam: MamConfig,
    pub optimizer: Adam,
    order: DataOrder,
    mask_rng: Rng,
    itm_rng: Rng,
    dropout_seed: Option<u64>,
    init_digest: [u8; 32],
    step: usize,
}

impl<'a> Pretrainer<'a> {
    pub fn new(
        model: &'a Mlim,
        params: &ParamStore,
        corpus: &'a Corpus,
        cfg: &PretrainConfig,
        mam: &MamConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        mam.validate()?;
        model.check_params(params)?;
        if corpus.is_empty() {
            return Err(Error::Invalid("empty corpus".into()));
        }
        Ok(Self {
            model,
            corpus,
            cfg: cfg.clone(),
            mam: mam.clone(),
            optimizer: Adam::new(cfg.optimizer.clone(), params),
            order: DataOrder::new(corpus.len(), seed),
            mask_rng: rng::stream(seed, Stream::Masking),
            itm_rng: rng::stream(seed, Stream::ItmShuffle),
            dropout_seed: (model.config().dropout > 0.0).then(|| rng::stream(seed, Stream::Dropout).random::<u64>()),
            init_digest: params.digest(),
            step: 0,
        })
    }

    /// Steps taken so far.
    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn finished(&self) -> bool {
        self.step >= self.cfg.steps
    }

    pub fn step(&mut self, params: &mut ParamStore) -> Result<StepRecord> {
        let image_len = self.model.config().image_positions();
        let mut batch = Vec::with_capacity(self.cfg.batch_size / self.cfg.micro_batch);
        for _ in 0..self.cfg.batch_size / self.cfg.micro_batch {
            let items = self.order.next_indices(self.cfg.micro_batch);
            batch.push(plan_micro_batch(
                self.corpus,
                items,
                image_len,
                &self.cfg,
                &self.mam,
                &mut self.mask_rng,
                &mut self.itm_rng,
            )?);
        }
        let rec = pretrain_step(
            self.model,
            params,
            &mut self.optimizer,
            self.corpus,
            &batch,
            &self.cfg,
            self.step,
            self.dropout_seed,
        )?;
        self.step += 1;
        Ok(rec)
    }

    pub fn into_run(self, records: Vec<StepRecord>) -> PretrainRun {
        PretrainRun { records, optimizer: self.optimizer, init_digest: self.init_digest, order_digest: self.order.digest() }
    }
}

/// Full pre-training loop from the parameters currently in `params`.
pub fn pretrain(
    model: &Mlim,
    params: &mut ParamStore,
    corpus: &Corpus,
    cfg: &PretrainConfig,
    mam: &MamConfig,
    seed: u64,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<PretrainRun> {
    let mut trainer = Pretrainer::new(model, params, corpus, cfg, mam, seed)?;
    let mut records = Vec::with_capacity(cfg.steps);
    while !trainer.finished() {
        let rec = trainer.step(params)?;
        on_step(&rec);
        records.push(rec);
    }
    Ok(trainer.into_run(records))
}

/// Forward-only losses of one item under an explicit plan (no dropout).
pub fn evaluate_item(
    model: &Mlim,
    params: &ParamStore,
    image: &ImageTensor,
    tokens: &[TokenId],
    plan: &MaskPlan,
    with_recon: bool,
) -> Result<(MlmLoss, Option<f64>)> {
    let item = PretrainItem { image, tokens, plan, itm_aligned: None };
    let scales = LossScales { mlm: 0.0, recon: if with_recon { 1.0 } else { 0.0 }, itm: 0.0 };
    let l = pretrain_item(model, params, &item, scales, None, None)?;
    let mlm = if l.mlm_count > 0 {
        MlmLoss { value: l.mlm_sum / l.mlm_count as f64, skipped: false }
    } else {
        MlmLoss { value: 0.0, skipped: true }
    };
    Ok((mlm, l.recon))
}

/// A pair with rendered images.
pub struct PairInput<'a> {
    pub image_a: &'a ImageTensor,
    pub tokens_a: &'a [TokenId],
    pub image_b: &'a ImageTensor,
    pub tokens_b: &'a [TokenId],
}

/// Forward of the pair-matching head; returns the logit. When `label` and
/// `grads` are given, the scaled BCE gradient is accumulated.
pub fn pair_forward(
    model: &Mlim,
    params: &ParamStore,
    pair: &PairInput<'_>,
    mode: MdoMode,
    train: Option<(f64, f64, &mut Grads)>,
    dropout: Option<&mut Rng>,
) -> Result<f64> {
    let mut g = Graph::new(params);
    let seg = |g: &mut Graph<'_>, img: Option<&ImageTensor>, toks: Option<&[TokenId]>| -> Result<_> {
        Ok(match (img, toks) {
            (Some(img), _) => {
                let e = model.embed_image(g, img)?;
                model.add_positions(g, e, Modality::Image)?
            }
            (_, Some(t)) => {
                let e = model.embed_text(g, t)?;
                model.add_positions(g, e, Modality::Text)?
            }
            _ => unreachable!(),
        })
    };
    let keep = apply_mdo(PairSegments::full((), (), (), ()), mode);
    let segments = PairSegments {
        text_a: keep.text_a.map(|_| seg(&mut g, None, Some(pair.tokens_a))).transpose()?,
        image_a: keep.image_a.map(|_| seg(&mut g, Some(pair.image_a), None)).transpose()?,
        text_b: keep.text_b.map(|_| seg(&mut g, None, Some(pair.tokens_b))).transpose()?,
        image_b: keep.image_b.map(|_| seg(&mut g, Some(pair.image_b), None)).transpose()?,
    };
    let asm = model.assemble_pair(&mut g, segments)?;
    let out = model.transformer_forward(&mut g, asm.input, dropout)?;
    let logit = model.pairwise_logit(&mut g, out);
    let z = g.value(logit).scalar_value();
    if let Some((label, scale, grads)) = train {
        let loss = g.bce_with_logits(logit, vec![label], scale);
        g.backward(loss).accumulate_into(grads);
    }
    Ok(z)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneRecord {
    pub step: usize,
    pub modes: Vec<MdoMode>,
    /// Mean binary cross-entropy of each micro-batch.
    pub micro_losses: Vec<f64>,
    pub loss: f64,
    pub grad_norm: f64,
    /// Norm of the gradient reaching decoder parameters; always 0.
    pub decoder_grad_norm: f64,
}

pub struct PairMicroBatch {
    pub items: Vec<usize>,
    pub mode: MdoMode,
}

/// One optimizer step of binary cross-entropy on the match logit. The
/// decoder is not part of the graph and is excluded from the update.
pub fn finetune_step(
    model: &Mlim,
    params: &mut ParamStore,
    opt: &mut Adam,
    pairs: &[PairExample],
    batch: &[PairMicroBatch],
    cfg: &FinetuneConfig,
    trainable: &[bool],
    step: usize,
    dropout_seed: Option<u64>,
) -> Result<FinetuneRecord> {
    let side = model.config().image_side;
    let mut grads = Grads::zeros_like(params);
    let per_micro = 1.0 / batch.len() as f64;
    let mut micro_losses = Vec::with_capacity(batch.len());
    let mut offset = 0u64;
    for mb in batch {
        let n = mb.items.len();
        let scale = per_micro / n as f64;
        let frozen: &ParamStore = params;
        let results = map_indexed(n, |k| -> Result<(Grads, f64)> {
            let p = &pairs[mb.items[k]];
            let (ia, ib) = (
                crate::data::generate_scene(&p.a.spec, side)?,
                crate::data::generate_scene(&p.b.spec, side)?,
            );
            let input = PairInput { image_a: &ia, tokens_a: &p.a.tokens, image_b: &ib, tokens_b: &p.b.tokens };
            let mut g = Grads::zeros_like(frozen);
            let y = p.label as f64;
            let mut rng = dropout_seed.map(|s| rng::item_rng(s, step as u64, offset + k as u64));
            let z = pair_forward(model, frozen, &input, mb.mode, Some((y, scale, &mut g)), rng.as_mut())?;
            Ok((g, crate::tape::softplus(z) - y * z))
        });
        offset += n as u64;
        let mut loss = 0.0;
        for r in results {
            let (g, l) = r?;
            grads.add_assign(&g);
            loss += l;
        }
        micro_losses.push(loss / n as f64);
    }
    let loss = micro_losses.iter().sum::<f64>() / micro_losses.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("fine-tuning loss at step {step}")));
    }
    let decoder_grad_norm =
        libm::sqrt(model.decoder_param_ids().iter().map(|&id| grads.get(id).sum_squares()).sum::<f64>());
    let grad_norm = match cfg.clip_norm {
        Some(c) => grads.clip_global_norm(c),
        None => grads.global_norm(),
    };
    opt.update_masked(params, &grads, Some(trainable))?;
    Ok(FinetuneRecord {
        step,
        modes: batch.iter().map(|m| m.mode).collect(),
        micro_losses,
        loss,
        grad_norm,
        decoder_grad_norm,
    })
}

pub struct FinetuneRun {
    pub records: Vec<FinetuneRecord>,
    pub optimizer: Adam,
    pub order_digest: [u8; 32],
}

/// Step-by-step fine-tuning driver. Modality dropout samples one mode per
/// micro-batch when enabled; otherwise every micro-batch sees both
/// modalities.
pub struct Finetuner<'a> {
    model: &'a Mlim,
    pairs: &'a [PairExample],
    cfg: FinetuneConfig,
    mdo: MdoConfig,
    trainable: Vec<bool>,
    pub optimizer: Adam,
    order: DataOrder,
    mode_rng: Rng,
    dropout_seed: Option<u64>,
    step: usize,
}

impl<'a> Finetuner<'a> {
    pub fn new(
        model: &'a Mlim,
        params: &ParamStore,
        pairs: &'a [PairExample],
        cfg: &FinetuneConfig,
        mdo: &MdoConfig,
        seed: u64,
    ) -> Result<Self> {
        mdo.validate()?;
        model.check_params(params)?;
        if pairs.is_empty() {
            return Err(Error::Invalid("no training pairs".into()));
        }
        if cfg.micro_batch == 0 || cfg.batch_size % cfg.micro_batch != 0 {
            return Err(Error::Config("finetune.micro_batch must divide finetune.batch_size".into()));
        }
        Ok(Self {
            model,
            pairs,
            cfg: cfg.clone(),
            mdo: mdo.clone(),
            trainable: model.finetune_trainable(),
            optimizer: Adam::new(cfg.optimizer.clone(), params),
            order: DataOrder::new(pairs.len(), seed),
            mode_rng: rng::stream(seed, Stream::Modality),
            dropout_seed: (model.config().dropout > 0.0).then(|| rng::stream(seed, Stream::Dropout).random::<u64>()),
            step: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn finished(&self) -> bool {
        self.step >= self.cfg.steps
    }

    pub fn step(&mut self, params: &mut ParamStore) -> Result<FinetuneRecord> {
        let batch: Vec<PairMicroBatch> = (0..self.cfg.batch_size / self.cfg.micro_batch)
            .map(|_| {
                let mode = if self.mdo.enabled {
                    masking::sample_mdo_mode(&mut self.mode_rng, &self.mdo.mode_weights)
                } else {
                    MdoMode::ImageText
                };
                PairMicroBatch { items: self.order.next_indices(self.cfg.micro_batch), mode }
            })
            .collect();
        let rec = finetune_step(
            self.model,
            params,
            &mut self.optimizer,
            self.pairs,
            &batch,
            &self.cfg,
            &self.trainable,
            self.step,
            self.dropout_seed,
        )?;
        self.step += 1;
        Ok(rec)
    }

    pub fn into_run(self, records: Vec<FinetuneRecord>) -> FinetuneRun {
        FinetuneRun { records, optimizer: self.optimizer, order_digest: self.order.digest() }
    }
}

/// Full fine-tuning loop.
pub fn finetune(
    model: &Mlim,
    params: &mut ParamStore,
    pairs: &[PairExample],
    cfg: &FinetuneConfig,
    mdo: &MdoConfig,
    seed: u64,
    mut on_step: impl FnMut(&FinetuneRecord),
) -> Result<FinetuneRun> {
    let mut trainer = Finetuner::new(model, params, pairs, cfg, mdo, seed)?;
    let mut records = Vec::with_capacity(cfg.steps);
    while !trainer.finished() {
        let rec = trainer.step(params)?;
        on_step(&rec);
        records.push(rec);
    }
    Ok(trainer.into_run(records))
}

/// Match scores (sigmoid of the logit) with both modalities present.
pub fn score_pairs(model: &Mlim, params: &ParamStore, pairs: &[PairExample]) -> Result<Vec<f64>> {
    let side = model.config().image_side;
    map_indexed(pairs.len(), |i| {
        let p = &pairs[i];
        let ia = crate::data::generate_scene(&p.a.spec, side)?;
        let ib = crate::data::generate_scene(&p.b.spec, side)?;
        let input = PairInput { image_a: &ia, tokens_a: &p.a.tokens, image_b: &ib, tokens_b: &p.b.tokens };
        Ok(sigmoid(pair_forward(model, params, &input, MdoMode::ImageText, None, None)?))
    })
    .into_iter()
    .collect()
}

/// Lowercase hex of a digest.
pub fn hex(digest: &[u8]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
