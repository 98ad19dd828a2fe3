//! Synthetic single-object scenes, their template captions, and the
//! pair-matching downstream task.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng, Stream};
use crate::tensor::Matrix;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const MASK: TokenId = 1;
pub const CLS: TokenId = 2;
pub const SEP: TokenId = 3;
pub const UNK: TokenId = 4;

pub const DEFAULT_IMAGE_SIDE: usize = 64;
pub const MAX_TEXT_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
    White,
    Gray,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Cyan,
        Color::Magenta,
        Color::White,
        Color::Gray,
    ];

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [255, 0, 0],
            Color::Green => [0, 255, 0],
            Color::Blue => [0, 0, 255],
            Color::Yellow => [255, 255, 0],
            Color::Cyan => [0, 255, 255],
            Color::Magenta => [255, 0, 255],
            Color::White => [255, 255, 255],
            Color::Gray => [128, 128, 128],
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Cyan => "cyan",
            Color::Magenta => "magenta",
            Color::White => "white",
            Color::Gray => "gray",
        }
    }

    pub fn from_rgb(rgb: [u8; 3]) -> Option<Color> {
        Color::ALL.into_iter().find(|c| c.rgb() == rgb)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Medium,
    Large,
}

impl Size {
    pub const ALL: [Size; 3] = [Size::Small, Size::Medium, Size::Large];

    pub fn radius(self) -> u32 {
        match self {
            Size::Small => 8,
            Size::Medium => 12,
            Size::Large => 16,
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Medium => "medium",
            Size::Large => "large",
        }
    }
}

/// One single-object scene.
///
/// A shape of radius `r` covers pixels whose offset from `center` is at most
/// `r - 1` along each axis, so it lies inside a `side × side` image exactly
/// when `r - 1 <= x <= side - r` (and likewise for `y`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub shape: Shape,
    pub fg_color: Color,
    pub bg_color: Color,
    pub size: Size,
    pub center: (u32, u32),
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self, side: usize) -> Result<()> {
        if self.fg_color == self.bg_color {
            return Err(Error::InvalidScene("foreground and background colors are equal".into()));
        }
        let r = self.size.radius() as i64;
        let side = side as i64;
        let (x, y) = (self.center.0 as i64, self.center.1 as i64);
        if x < r - 1 || x > side - r || y < r - 1 || y > side - r {
            return Err(Error::InvalidScene(format!(
                "{} {} at ({x}, {y}) leaves a {side}×{side} image",
                self.size.word(),
                self.shape.word()
            )));
        }
        Ok(())
    }

    /// Pixel-center membership test; no anti-aliasing.
    pub fn covers(&self, px: u32, py: u32) -> bool {
        let r = self.size.radius() as i64;
        let dx = px as i64 - self.center.0 as i64;
        let dy = py as i64 - self.center.1 as i64;
        match self.shape {
            Shape::Square => dx.abs() < r && dy.abs() < r,
            Shape::Circle => dx * dx + dy * dy < r * r,
            Shape::Triangle => dy.abs() < r && 2 * dx.abs() <= dy + r - 1,
        }
    }

    /// Pair-task label rule: same shape and same foreground color.
    pub fn matches(&self, other: &SceneSpec) -> bool {
        self.shape == other.shape && self.fg_color == other.fg_color
    }
}

/// `H × W × 3` intensities in `[0, 1]`, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{} values for a {height}×{width}×3 image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("pixel intensity {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, level: f64) -> Self {
        Self { height, width, data: vec![level.clamp(0.0, 1.0); height * width * 3] }
    }

    /// Maps each byte `v` to `v / 255`.
    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{} bytes for a {height}×{width}×3 image",
                bytes.len()
            )));
        }
        let data = bytes.iter().map(|&b| b as f64 / 255.0).collect();
        Ok(Self { height, width, data })
    }

    /// Quantizes to bytes by rounding `v · 255`.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|v| libm::round(v * 255.0) as u8).collect()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixel_bytes(&self, x: usize, y: usize) -> [u8; 3] {
        let p = self.pixel(x, y);
        [0, 1, 2].map(|c| libm::round(p[c] * 255.0) as u8)
    }

    /// `[pixels, 3]` view used by the model.
    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(self.height * self.width, 3, self.data.clone())
    }

    /// Inverse of [`ImageTensor::to_matrix`]; values must lie in `[0, 1]`.
    pub fn from_matrix(height: usize, width: usize, m: &Matrix) -> Result<Self> {
        if m.shape() != (height * width, 3) {
            return Err(Error::Shape(format!("{:?} is not a {height}×{width}×3 image", m.shape())));
        }
        Self::new(height, width, m.data().to_vec())
    }
}

/// Renders the scene: background fill, then the shape in its foreground color.
pub fn generate_scene(spec: &SceneSpec, side: usize) -> Result<ImageTensor> {
    spec.validate(side)?;
    let fg = spec.fg_color.rgb();
    let bg = spec.bg_color.rgb();
    let mut bytes = Vec::with_capacity(side * side * 3);
    for y in 0..side as u32 {
        for x in 0..side as u32 {
            let c = if spec.covers(x, y) { fg } else { bg };
            bytes.extend_from_slice(&c);
        }
    }
    ImageTensor::from_bytes(side, side, &bytes)
}

/// Closed vocabulary: five specials followed by every template word.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: BTreeMap<String, TokenId>,
}

impl Vocab {
    pub fn standard() -> Self {
        let mut tokens: Vec<String> =
            ["[PAD]", "[MASK]", "[CLS]", "[SEP]", "[UNK]", "a", "on", "background"]
                .iter()
                .map(|s| s.to_string())
                .collect();
        tokens.extend(Size::ALL.iter().map(|s| s.word().to_string()));
        tokens.extend(Color::ALL.iter().map(|c| c.word().to_string()));
        tokens.extend(Shape::ALL.iter().map(|s| s.word().to_string()));
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as TokenId)).collect();
        Self { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, words: &[&str]) -> Vec<TokenId> {
        words.iter().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i).unwrap_or("[UNK]")).collect()
    }

    pub fn is_special(id: TokenId) -> bool {
        id <= UNK
    }
}

/// "a <size> <fg_color> <shape> on a <bg_color> background"
pub fn caption_words(spec: &SceneSpec) -> [&'static str; 8] {
    [
        "a",
        spec.size.word(),
        spec.fg_color.word(),
        spec.shape.word(),
        "on",
        "a",
        spec.bg_color.word(),
        "background",
    ]
}

pub fn caption_of(spec: &SceneSpec, vocab: &Vocab) -> Vec<TokenId> {
    vocab.encode(&caption_words(spec))
}

/// Draws attributes uniformly and the center uniformly over the image,
/// rejecting centers that would push the shape out of bounds.
pub fn sample_spec(rng: &mut Rng, side: usize, seed: u64) -> SceneSpec {
    let shape = Shape::ALL[rng.random_range(0..3)];
    let fg_color = Color::ALL[rng.random_range(0..8)];
    let bg_color = loop {
        let c = Color::ALL[rng.random_range(0..8)];
        if c != fg_color {
            break c;
        }
    };
    let size = Size::ALL[rng.random_range(0..3)];
    loop {
        let center = (rng.random_range(0..side as u32), rng.random_range(0..side as u32));
        let spec = SceneSpec { shape, fg_color, bg_color, size, center, seed };
        if spec.validate(side).is_ok() {
            return spec;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusItem {
    pub spec: SceneSpec,
    pub tokens: Vec<TokenId>,
}

/// `n` scene specs with their captions, reproducible from `seed`.
pub fn sample_corpus(n: usize, seed: u64, side: usize) -> Result<Vec<CorpusItem>> {
    sample_items(n, rng::stream(seed, Stream::Corpus), seed, side)
}

/// Held-out items for evaluation, drawn from a stream disjoint from
/// [`sample_corpus`] with the same seed.
pub fn sample_eval_corpus(n: usize, seed: u64, side: usize) -> Result<Vec<CorpusItem>> {
    sample_items(n, rng::stream(seed, Stream::Probe), seed, side)
}

fn sample_items(n: usize, mut rng: Rng, seed: u64, side: usize) -> Result<Vec<CorpusItem>> {
    if n == 0 {
        return Err(Error::Invalid("corpus size must be at least 1".into()));
    }
    let vocab = Vocab::standard();
    Ok((0..n)
        .map(|i| {
            let spec = sample_spec(&mut rng, side, seed.wrapping_add(i as u64));
            CorpusItem { tokens: caption_of(&spec, &vocab), spec }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairExample {
    pub a: CorpusItem,
    pub b: CorpusItem,
    pub label: u8,
}

impl PairExample {
    pub fn from_specs(a: SceneSpec, b: SceneSpec, vocab: &Vocab) -> Self {
        let label = a.matches(&b) as u8;
        Self {
            a: CorpusItem { tokens: caption_of(&a, vocab), spec: a },
            b: CorpusItem { tokens: caption_of(&b, vocab), spec: b },
            label,
        }
    }
}

/// `n` pairs with exactly `round(n · match_fraction)` matches, in shuffled order.
///
/// Matched pairs share shape and foreground color and differ in at least one
/// of size, center and background; mismatched pairs differ in shape or
/// foreground color.
pub fn generate_pairs(n: usize, seed: u64, match_fraction: f64, side: usize) -> Result<Vec<PairExample>> {
    generate_pairs_with(n, rng::stream(seed, Stream::PairsTrain), seed, match_fraction, side)
}

/// Train/test pair sets drawn from disjoint random streams of one seed.
pub fn generate_pair_split(
    n_train: usize,
    n_test: usize,
    seed: u64,
    match_fraction: f64,
    side: usize,
) -> Result<(Vec<PairExample>, Vec<PairExample>)> {
    let train = generate_pairs(n_train, seed, match_fraction, side)?;
    let test = generate_pairs_with(n_test, rng::stream(seed, Stream::PairsTest), seed, match_fraction, side)?;
    Ok((train, test))
}

fn generate_pairs_with(
    n: usize,
    mut rng: Rng,
    seed: u64,
    match_fraction: f64,
    side: usize,
) -> Result<Vec<PairExample>> {
    if !(match_fraction > 0.0 && match_fraction < 1.0) {
        return Err(Error::Invalid(format!("match fraction {match_fraction} not in (0, 1)")));
    }
    let vocab = Vocab::standard();
    let n_match = libm::round(n as f64 * match_fraction) as usize;
    let mut labels: Vec<bool> = (0..n).map(|i| i < n_match).collect();
    labels.shuffle(&mut rng);
    let mut out = Vec::with_capacity(n);
    for (i, matched) in labels.into_iter().enumerate() {
        let item_seed = seed.wrapping_add(2 * i as u64);
        let a = sample_spec(&mut rng, side, item_seed);
        let b = if matched {
            loop {
                let mut b = sample_spec(&mut rng, side, item_seed + 1);
                b.shape = a.shape;
                b.fg_color = a.fg_color;
                let differs = b.size != a.size || b.center != a.center || b.bg_color != a.bg_color;
                if b.bg_color != b.fg_color && b.validate(side).is_ok() && differs {
                    break b;
                }
            }
        } else {
            loop {
                let b = sample_spec(&mut rng, side, item_seed + 1);
                if !a.matches(&b) {
                    break b;
                }
            }
        };
        out.push(PairExample::from_specs(a, b, &vocab));
    }
    Ok(out)
}
