//! Patch-local image embedder, word embeddings and per-modality position
//! tables.
//!
//! Every embedder stage is a 2×2 convolution with stride 2, so each output
//! vector of the final 8×8 grid depends on exactly one 8×8 pixel block and
//! on nothing else. Positions are *not* added here; they are added after
//! masking by [`Mlim::add_positions`].

use alloc::format;
use alloc::vec::Vec;

use crate::data::{ImageTensor, TokenId};
use crate::error::{Error, Result};
use crate::model::Mlim;
use crate::params::ParamStore;
use crate::tape::{Graph, Var};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Text,
    Image,
}

/// Ordered `d_model` vectors of one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSequence {
    pub modality: Modality,
    pub vectors: Matrix,
}

impl EmbeddingSequence {
    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }
}

impl Mlim {
    /// Image → `grid_side²` vectors in row-major grid order.
    pub fn embed_image(&self, g: &mut Graph<'_>, image: &ImageTensor) -> Result<Var> {
        let side = self.config().image_side;
        if image.height() != side || image.width() != side {
            return Err(Error::Shape(format!(
                "expected a {side}×{side} image, got {}×{}",
                image.height(),
                image.width()
            )));
        }
        let pixels = g.input(image.to_matrix());
        Ok(self.embed_pixels(g, pixels))
    }

    /// Embedder applied to a `[side², 3]` pixel node.
    pub fn embed_pixels(&self, g: &mut Graph<'_>, pixels: Var) -> Var {
        let mut x = pixels;
        let mut side = self.config().image_side;
        let n = self.layout.embedder.len();
        for (i, &(w, b)) in self.layout.embedder.iter().enumerate() {
            x = g.space_to_depth(x, side);
            side /= 2;
            let (w, b) = (g.param(w), g.param(b));
            x = g.linear(x, w, Some(b));
            if i + 1 < n {
                x = g.relu(x);
            }
        }
        x
    }

    /// Row lookup into the word-embedding table.
    pub fn embed_text(&self, g: &mut Graph<'_>, ids: &[TokenId]) -> Result<Var> {
        let vocab = self.vocab_size();
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= vocab) {
            return Err(Error::TokenOutOfRange { id, vocab });
        }
        let table = g.param(self.layout.word_embeddings);
        Ok(g.gather_rows(table, ids.iter().map(|&i| i as usize).collect()))
    }

    /// Adds row `i` of the modality's own position table to vector `i`.
    pub fn add_positions(&self, g: &mut Graph<'_>, seq: Var, modality: Modality) -> Result<Var> {
        let table_id = match modality {
            Modality::Text => self.layout.text_positions,
            Modality::Image => self.layout.image_positions,
        };
        let len = g.value(seq).rows();
        let max = g.params().get(table_id).rows();
        if len > max {
            return Err(Error::SequenceOverflow { len, max });
        }
        let table = g.param(table_id);
        Ok(g.add_table_rows(seq, table, 0))
    }

    /// Forward-only image embedding.
    pub fn image_embeddings(&self, params: &ParamStore, image: &ImageTensor) -> Result<EmbeddingSequence> {
        let mut g = Graph::new(params);
        let v = self.embed_image(&mut g, image)?;
        Ok(EmbeddingSequence { modality: Modality::Image, vectors: g.value(v).clone() })
    }

    /// Forward-only word embedding.
    pub fn text_embeddings(&self, params: &ParamStore, ids: &[TokenId]) -> Result<EmbeddingSequence> {
        let mut g = Graph::new(params);
        let v = self.embed_text(&mut g, ids)?;
        Ok(EmbeddingSequence { modality: Modality::Text, vectors: g.value(v).clone() })
    }

    /// Forward-only position addition.
    pub fn with_positions(&self, params: &ParamStore, seq: &EmbeddingSequence) -> Result<EmbeddingSequence> {
        let mut g = Graph::new(params);
        let x = g.input(seq.vectors.clone());
        let v = self.add_positions(&mut g, x, seq.modality)?;
        Ok(EmbeddingSequence { modality: seq.modality, vectors: g.value(v).clone() })
    }

    /// Scalar count of the patch embedder (filters and biases).
    pub fn embedder_param_count(&self) -> usize {
        self.layout.embedder.iter().map(|&(w, b)| self.shape_of(w).0 * self.shape_of(w).1 + self.shape_of(b).1).sum()
    }

    /// Pixel block `(row, col)` of the final grid covers these pixel rows/cols.
    pub fn block_extent(&self) -> usize {
        self.config().image_side / self.config().grid_side()
    }
}

/// Pixel indices (row-major over the image) inside grid block `block`.
pub fn block_pixels(image_side: usize, grid_side: usize, block: usize) -> Vec<(usize, usize)> {
    let extent = image_side / grid_side;
    let (br, bc) = (block / grid_side, block % grid_side);
    (0..extent)
        .flat_map(|dy| (0..extent).map(move |dx| (bc * extent + dx, br * extent + dy)))
        .collect()
}
