//! Central finite-difference verification of the reverse-mode gradients of
//! every differentiable component, at width 8 in double precision.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::config::ModelConfig;
use crate::data::{ImageTensor, TokenId};
use crate::embedding::Modality;
use crate::masking::{MaskPlan, MdoMode};
use crate::rng::{item_rng, stream, Rng, Stream};
use crate::tape::{softplus, Graph, Var};
use crate::training::{pair_forward, pretrain_item, LossScales, PairInput, PretrainItem};
use crate::{Grads, Matrix, Mlim, ParamStore};

pub const STEP: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    libm::fabs(analytic - numeric) / libm::fmax(libm::fmax(libm::fabs(analytic), libm::fabs(numeric)), 1e-6)
}

/// Worst relative error of one component and where it occurred.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub component: String,
    pub worst: f64,
    pub at: String,
}

/// Worst relative error over every scalar of every parameter.
pub fn check_params(params: &ParamStore, analytic: &Grads, loss: impl Fn(&ParamStore) -> f64) -> (f64, String) {
    let mut p = params.clone();
    let mut worst = (0.0, String::new());
    for (id, name, t) in params.iter() {
        for k in 0..t.len() {
            let orig = t.data()[k];
            p.get_mut(id).data_mut()[k] = orig + STEP;
            let up = loss(&p);
            p.get_mut(id).data_mut()[k] = orig - STEP;
            let down = loss(&p);
            p.get_mut(id).data_mut()[k] = orig;
            let e = rel_err(analytic.get(id).data()[k], (up - down) / (2.0 * STEP));
            if e > worst.0 {
                worst = (e, format!("{name}[{k}]"));
            }
        }
    }
    worst
}

fn check_input(x: &Matrix, analytic: &Matrix, loss: impl Fn(&Matrix) -> f64) -> (f64, String) {
    let mut x = x.clone();
    let mut worst = (0.0, String::new());
    for k in 0..x.len() {
        let orig = x.data()[k];
        x.data_mut()[k] = orig + STEP;
        let up = loss(&x);
        x.data_mut()[k] = orig - STEP;
        let down = loss(&x);
        x.data_mut()[k] = orig;
        let e = rel_err(analytic.data()[k], (up - down) / (2.0 * STEP));
        if e > worst.0 {
            worst = (e, format!("input[{k}]"));
        }
    }
    worst
}

/// Checks `build(graph, input)` with respect to every parameter and every
/// scalar of `input`.
pub fn check_graph(
    component: &str,
    params: &ParamStore,
    input: &Matrix,
    build: impl Fn(&mut Graph<'_>, Var) -> Var,
) -> GradCheck {
    let mut g = Graph::new(params);
    let x = g.input(input.clone());
    let loss = build(&mut g, x);
    let back = g.backward(loss);
    let mut grads = Grads::zeros_like(params);
    back.accumulate_into(&mut grads);
    let dx = back.wrt(x).cloned().unwrap_or_else(|| Matrix::zeros(input.rows(), input.cols()));

    let eval = |p: &ParamStore, inp: &Matrix| {
        let mut g = Graph::new(p);
        let x = g.input(inp.clone());
        let l = build(&mut g, x);
        g.value(l).scalar_value()
    };
    let wp = check_params(params, &grads, |p| eval(p, input));
    let wx = check_input(input, &dx, |inp| eval(params, inp));
    let (worst, at) = if wp.0 >= wx.0 { wp } else { wx };
    GradCheck { component: component.into(), worst, at }
}

/// 16×16 images on a 2×2 grid, width 8.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        image_side: 16,
        d_model: 8,
        layers: 2,
        heads: 2,
        d_ff: 16,
        dropout: 0.0,
        embedder_channels: vec![4, 4],
        decoder_channels: vec![4, 4],
        ..ModelConfig::default()
    }
}

fn model_with(cfg: ModelConfig, seed: u64) -> (Mlim, ParamStore) {
    let m = Mlim::new(cfg).expect("valid tiny config");
    let p = m.init_params(&mut stream(seed, Stream::Init));
    (m, p)
}

fn random_matrix(rows: usize, cols: usize, rng: &mut Rng, scale: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| scale * (2.0 * rng.random::<f64>() - 1.0)).collect())
}

fn noise_image(side: usize, rng: &mut Rng) -> ImageTensor {
    ImageTensor::new(side, side, (0..side * side * 3).map(|_| rng.random::<f64>()).collect()).expect("values in [0, 1]")
}

pub fn embedder(seed: u64) -> GradCheck {
    let (m, p) = model_with(tiny_config(), seed);
    let mut r = stream(seed, Stream::Probe);
    let img = noise_image(16, &mut r).to_matrix();
    let target = random_matrix(4, 8, &mut r, 1.0);
    check_graph("embedder", &p, &img, |g, x| {
        let e = m.embed_pixels(g, x);
        g.squared_error(e, target.clone(), 0.5)
    })
}

/// Word lookup, shared-mask substitution on both modalities, positions.
pub fn embeddings_and_masking(seed: u64) -> GradCheck {
    let (m, p) = model_with(tiny_config(), seed);
    let mut r = stream(seed, Stream::Probe);
    let img = noise_image(16, &mut r).to_matrix();
    let tokens: Vec<TokenId> = vec![5, 9, 12, 7, 5];
    let plan = MaskPlan {
        text_mask: vec![false, true, false, true, false],
        image_mask: vec![true, false, false, true],
        mode: None,
    };
    let target = random_matrix(9, 8, &mut r, 1.0);
    check_graph("embeddings + masking", &p, &img, |g, x| {
        let image = m.embed_pixels(g, x);
        let text = m.embed_text(g, &tokens).expect("ids in range");
        let masked = m.apply_masking(g, text, &tokens, image, &plan).expect("plan fits");
        let t = m.add_positions(g, masked.text, Modality::Text).expect("fits table");
        let i = m.add_positions(g, masked.image, Modality::Image).expect("fits table");
        let both = g.concat_rows(vec![t, i]);
        g.squared_error(both, target.clone(), 0.5)
    })
}

pub fn transformer(component: &str, cfg: ModelConfig, seed: u64, dropout_seed: Option<u64>) -> GradCheck {
    let (m, p) = model_with(cfg, seed);
    let mut r = stream(seed, Stream::Probe);
    let input = random_matrix(7, 8, &mut r, 1.0);
    let target = random_matrix(7, 8, &mut r, 1.0);
    check_graph(component, &p, &input, |g, x| {
        let mut rng = dropout_seed.map(|s| item_rng(s, 0, 0));
        let y = m.transformer_forward(g, x, rng.as_mut()).expect("finite forward");
        g.squared_error(y, target.clone(), 0.5)
    })
}

pub fn mlm_head(seed: u64) -> GradCheck {
    let (m, p) = model_with(tiny_config(), seed);
    let mut r = stream(seed, Stream::Probe);
    let out = random_matrix(6, 8, &mut r, 1.0);
    check_graph("MLM head + NLL", &p, &out, |g, x| {
        let logits = m.mlm_logits(g, x, &[1, 3, 4]);
        g.cross_entropy(logits, vec![5, 17, 9], 1.0 / 3.0)
    })
}

pub fn decoder(seed: u64) -> GradCheck {
    let (m, p) = model_with(tiny_config(), seed);
    let mut r = stream(seed, Stream::Probe);
    let out = random_matrix(7, 8, &mut r, 1.0);
    let target = noise_image(16, &mut r).to_matrix();
    check_graph("decoder + SSE", &p, &out, |g, x| {
        let rec = m.decode_image(g, x, 2..6).expect("grid positions");
        g.squared_error(rec, target.clone(), 1.0 / 256.0)
    })
}

pub fn itm_head(seed: u64) -> GradCheck {
    let (m, p) = model_with(tiny_config(), seed);
    let out = random_matrix(5, 8, &mut stream(seed, Stream::Probe), 1.0);
    check_graph("ITM head", &p, &out, |g, x| {
        let l = m.itm_logits(g, x);
        g.cross_entropy(l, vec![1], 1.0)
    })
}

pub fn pair_head(seed: u64) -> GradCheck {
    let (m, p) = model_with(tiny_config(), seed);
    let out = random_matrix(5, 8, &mut stream(seed, Stream::Probe), 1.0);
    check_graph("pairwise head + BCE", &p, &out, |g, x| {
        let l = m.pairwise_logit(g, x);
        g.bce_with_logits(l, vec![0.0], 1.0)
    })
}

/// Loss and activation nodes with respect to their inputs.
pub fn pointwise(seed: u64) -> Vec<GradCheck> {
    let p = ParamStore::new();
    let mut r = stream(seed, Stream::Probe);
    let logits = random_matrix(3, 6, &mut r, 3.0);
    let target = random_matrix(3, 6, &mut r, 1.0);
    let z = random_matrix(1, 4, &mut r, 4.0);
    vec![
        check_graph("cross-entropy", &p, &logits, |g, x| g.cross_entropy(x, vec![0, 5, 2], 0.7)),
        check_graph("squared error", &p, &logits, |g, x| g.squared_error(x, target.clone(), 0.3)),
        check_graph("binary cross-entropy", &p, &z, |g, x| g.bce_with_logits(x, vec![1.0, 0.0, 1.0, 0.0], 0.25)),
        check_graph("sigmoid", &p, &z, |g, x| {
            let s = g.sigmoid(x);
            g.squared_error(s, Matrix::filled(1, 4, 0.2), 1.0)
        }),
        check_graph("gelu", &p, &z, |g, x| {
            let s = g.gelu(x);
            g.squared_error(s, Matrix::filled(1, 4, 0.2), 1.0)
        }),
    ]
}

/// Weighted MLM + RECON + ITM objective of one masked item, end to end.
pub fn pretraining_objective(seed: u64) -> GradCheck {
    let (m, p) = model_with(tiny_config(), seed);
    let image = noise_image(16, &mut stream(seed, Stream::Probe));
    let tokens: Vec<TokenId> = vec![5, 9, 12, 7, 5, 20];
    let plan = MaskPlan {
        text_mask: vec![false, true, false, true, false, true],
        image_mask: vec![false, true, false, false],
        mode: None,
    };
    let item = PretrainItem { image: &image, tokens: &tokens, plan: &plan, itm_aligned: Some(false) };
    let s = LossScales { mlm: 1.0 / 3.0, recon: 1.0 / 256.0, itm: 0.5 };
    let objective = |q: &ParamStore, grads: Option<&mut Grads>| {
        let l = pretrain_item(&m, q, &item, s, None, grads).expect("finite");
        s.mlm * l.mlm_sum + s.recon * l.recon.unwrap_or(0.0) * 256.0 + s.itm * l.itm.unwrap_or(0.0)
    };
    let mut grads = Grads::zeros_like(&p);
    objective(&p, Some(&mut grads));
    let (worst, at) = check_params(&p, &grads, |q| objective(q, None));
    GradCheck { component: "pre-training objective".into(), worst, at }
}

/// Pair-matching objective under one modality-dropout mode, end to end.
pub fn pair_objective(seed: u64, mode: MdoMode) -> GradCheck {
    let (m, p) = model_with(tiny_config(), seed);
    let mut r = stream(seed, Stream::Probe);
    let (ia, ib) = (noise_image(16, &mut r), noise_image(16, &mut r));
    let (ta, tb): (Vec<TokenId>, Vec<TokenId>) = (vec![5, 9, 12], vec![6, 10, 13, 8]);
    let pair = PairInput { image_a: &ia, tokens_a: &ta, image_b: &ib, tokens_b: &tb };
    let mut grads = Grads::zeros_like(&p);
    pair_forward(&m, &p, &pair, mode, Some((1.0, 1.0, &mut grads)), None).expect("finite");
    let (worst, at) = check_params(&p, &grads, |q| {
        let z = pair_forward(&m, q, &pair, mode, None, None).expect("finite");
        softplus(z) - z
    });
    GradCheck { component: format!("pair objective ({})", mode.label()), worst, at }
}

/// Every check above.
pub fn suite(seed: u64) -> Vec<GradCheck> {
    let mut out = vec![
        embedder(seed),
        embeddings_and_masking(seed),
        transformer("encoder (pre-norm)", tiny_config(), seed, None),
        transformer("encoder (post-norm)", ModelConfig { pre_norm: false, ..tiny_config() }, seed, None),
        transformer("encoder (dropout)", ModelConfig { dropout: 0.2, ..tiny_config() }, seed, Some(seed ^ 11)),
        mlm_head(seed),
        decoder(seed),
        itm_head(seed),
        pair_head(seed),
    ];
    out.extend(pointwise(seed));
    out.push(pretraining_objective(seed));
    out.extend(MdoMode::ALL.iter().map(|&m| pair_objective(seed, m)));
    out
}
