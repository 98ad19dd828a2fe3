mod common;

use common::*;
use mlim_core::data::{ImageTensor, MASK};
use mlim_core::embedding::{block_pixels, EmbeddingSequence, Modality};
use mlim_core::tape::Graph;
use mlim_core::tensor::Matrix;
use mlim_core::Error;
use rand::Rng as _;

fn perturb_block(img: &ImageTensor, block: usize, r: &mut mlim_core::rng::Rng) -> ImageTensor {
    let mut data = img.data().to_vec();
    for (x, y) in block_pixels(64, 8, block) {
        for c in 0..3 {
            let i = (y * 64 + x) * 3 + c;
            data[i] = (data[i] + r.random_range(0.05..0.5)) % 1.0;
        }
    }
    ImageTensor::new(64, 64, data).unwrap()
}

#[test]
fn perturbing_one_block_changes_exactly_one_embedding() {
    let (m, p) = model(narrow(), 1);
    let mut r = rng(1);
    let img = noise_image(64, &mut r);
    let base = m.image_embeddings(&p, &img).unwrap().vectors;
    assert_eq!(base.rows(), 64);
    for block in 0..64 {
        let moved = m.image_embeddings(&p, &perturb_block(&img, block, &mut r)).unwrap().vectors;
        let changed: Vec<usize> = (0..64).filter(|&i| moved.row(i) != base.row(i)).collect();
        assert_eq!(changed, vec![block]);
    }
}

#[test]
fn embedding_jacobian_is_block_sparse() {
    let (m, p) = model(narrow(), 2);
    let mut r = rng(2);
    let img = noise_image(64, &mut r);
    for block in [0, 7, 9, 36, 63] {
        let mut g = Graph::new(&p);
        let x = g.input(img.to_matrix());
        let e = m.embed_pixels(&mut g, x);
        let pick = g.select_rows(e, vec![block]);
        let target = random_matrix(1, 8, &mut r);
        let loss = g.squared_error(pick, target, 1.0);
        let grads = g.backward(loss);
        let dx = grads.wrt(x).unwrap();
        let inside: std::collections::HashSet<usize> =
            block_pixels(64, 8, block).into_iter().map(|(x, y)| y * 64 + x).collect();
        for pix in 0..64 * 64 {
            let nonzero = dx.row(pix).iter().any(|&v| v != 0.0);
            if !inside.contains(&pix) {
                assert!(!nonzero, "block {block}: pixel {pix} leaks");
            }
        }
        assert!(inside.iter().any(|&pix| dx.row(pix).iter().any(|&v| v != 0.0)));
    }
}

#[test]
fn all_zero_image_gives_identical_vectors() {
    let (m, p) = model(narrow(), 3);
    let e = m.image_embeddings(&p, &ImageTensor::filled(64, 64, 0.0)).unwrap().vectors;
    assert!((1..64).all(|i| e.row(i) == e.row(0)));
}

#[test]
fn text_lookup_and_range() {
    let (m, p) = model(narrow(), 4);
    let e = m.text_embeddings(&p, &[5, 5, 9]).unwrap().vectors;
    assert_eq!(e.rows(), 3);
    assert_eq!(e.row(0), e.row(1));
    let v = m.vocab_size() as u32;
    assert!(matches!(m.text_embeddings(&p, &[v]), Err(Error::TokenOutOfRange { .. })));
}

#[test]
fn zero_position_table_is_identity() {
    let (m, mut p) = model(narrow(), 5);
    for name in ["text_positions", "image_positions"] {
        let id = p.id(name).unwrap();
        p.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let mut r = rng(5);
    for (modality, n) in [(Modality::Text, 8), (Modality::Image, 64)] {
        let seq = EmbeddingSequence { modality, vectors: random_matrix(n, 8, &mut r) };
        assert_eq!(m.with_positions(&p, &seq).unwrap(), seq);
    }
}

#[test]
fn masked_positions_differ_only_by_position_rows() {
    let (m, p) = model(narrow(), 6);
    let mask = p.by_name("word_embeddings").unwrap().row(MASK as usize).to_vec();
    let pos = p.by_name("text_positions").unwrap();
    let seq = EmbeddingSequence { modality: Modality::Text, vectors: Matrix::from_vec(2, 8, [mask.clone(), mask].concat()) };
    let out = m.with_positions(&p, &seq).unwrap().vectors;
    for c in 0..8 {
        let lhs = out.get(0, c) - out.get(1, c);
        let rhs = pos.get(0, c) - pos.get(1, c);
        assert!((lhs - rhs).abs() < 1e-15, "{lhs} vs {rhs}");
    }
}

#[test]
fn position_tables_are_separate() {
    let (m, mut p) = model(narrow(), 7);
    let mut r = rng(7);
    let text = EmbeddingSequence { modality: Modality::Text, vectors: random_matrix(8, 8, &mut r) };
    let image = EmbeddingSequence { modality: Modality::Image, vectors: random_matrix(64, 8, &mut r) };
    let (t0, i0) = (m.with_positions(&p, &text).unwrap(), m.with_positions(&p, &image).unwrap());
    let id = p.id("image_positions").unwrap();
    p.get_mut(id).data_mut().iter_mut().for_each(|x| *x += 1.0);
    assert_eq!(m.with_positions(&p, &text).unwrap(), t0);
    assert_ne!(m.with_positions(&p, &image).unwrap(), i0);
    let id = p.id("text_positions").unwrap();
    p.get_mut(id).data_mut().iter_mut().for_each(|x| *x += 1.0);
    assert_ne!(m.with_positions(&p, &text).unwrap(), t0);
}

#[test]
fn encoder_is_lighter_than_decoder() {
    let m = mlim_core::Mlim::new(mlim_core::config::ModelConfig::default()).unwrap();
    assert!(m.embedder_param_count() < m.decoder_param_count());
}
