//! Corpus manifest and pair files, both JSON lines.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use mlim_core::data::{generate_scene, CorpusItem, PairExample, SceneSpec, TokenId, Vocab};
use mlim_core::training::Corpus;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};
use crate::ppm;

pub const MANIFEST: &str = "manifest.jsonl";
pub const PAIRS_TRAIN: &str = "pairs_train.jsonl";
pub const PAIRS_TEST: &str = "pairs_test.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    /// File name relative to the manifest's directory.
    pub image: String,
    pub tokens: Vec<TokenId>,
    pub spec: SceneSpec,
}

/// One side of a pair. The image is a pure function of the spec and is
/// rendered on load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairItem {
    pub tokens: Vec<TokenId>,
    pub spec: SceneSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub a: PairItem,
    pub b: PairItem,
    pub label: u8,
}

fn create(path: &Path) -> AppResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| AppError::io(path, e))
}

fn write_lines<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> AppResult<()> {
    let mut w = create(path)?;
    for row in rows {
        serde_json::to_writer(&mut w, &row).map_err(|e| AppError::format(path, e.to_string()))?;
        w.write_all(b"\n").map_err(|e| AppError::io(path, e))?;
    }
    w.flush().map_err(|e| AppError::io(path, e))
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> AppResult<Vec<T>> {
    let f = File::open(path).map_err(|e| AppError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| AppError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line).map_err(|e| AppError::format(path, format!("line {}: {e}", n + 1)))?;
        out.push(row);
    }
    Ok(out)
}

pub fn image_name(i: usize) -> String {
    format!("item_{i:06}.ppm")
}

/// Renders every item to `dir` and writes `manifest.jsonl` next to the images.
pub fn write_corpus(items: &[CorpusItem], side: usize, dir: &Path) -> AppResult<Vec<ManifestRecord>> {
    fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    let mut records = Vec::with_capacity(items.len());
    for (i, it) in items.iter().enumerate() {
        let name = image_name(i);
        ppm::save_image(&generate_scene(&it.spec, side)?, &dir.join(&name))?;
        records.push(ManifestRecord { image: name, tokens: it.tokens.clone(), spec: it.spec });
    }
    write_lines(&dir.join(MANIFEST), &records)?;
    Ok(records)
}

pub fn read_manifest(path: &Path) -> AppResult<Vec<ManifestRecord>> {
    read_lines(path)
}

fn check_tokens(path: &Path, tokens: &[TokenId], vocab: usize) -> AppResult<()> {
    match tokens.iter().find(|&&t| t as usize >= vocab) {
        Some(&t) => Err(AppError::format(path, format!("token id {t} outside vocabulary of {vocab}"))),
        None => Ok(()),
    }
}

/// Loads a corpus written by [`write_corpus`].
pub fn load_corpus(dir: &Path, side: usize) -> AppResult<Corpus> {
    let manifest = dir.join(MANIFEST);
    let vocab = Vocab::standard().len();
    let mut corpus = Corpus::new(side);
    for rec in read_manifest(&manifest)? {
        check_tokens(&manifest, &rec.tokens, vocab)?;
        let path: PathBuf = dir.join(&rec.image);
        let image = ppm::load_image(&path)?;
        if image.width() != side || image.height() != side {
            return Err(AppError::format(&path, format!("expected {side}×{side} pixels")));
        }
        corpus.push(&image, rec.tokens)?;
    }
    if corpus.is_empty() {
        return Err(AppError::format(&manifest, "empty manifest"));
    }
    Ok(corpus)
}

pub fn write_pairs(pairs: &[PairExample], path: &Path) -> AppResult<()> {
    let item = |c: &CorpusItem| PairItem { tokens: c.tokens.clone(), spec: c.spec };
    write_lines(path, pairs.iter().map(|p| PairRecord { a: item(&p.a), b: item(&p.b), label: p.label }))
}

/// Reads a pair file; labels must agree with the shape-and-color rule.
pub fn read_pairs(path: &Path) -> AppResult<Vec<PairExample>> {
    let vocab = Vocab::standard().len();
    let mut out = Vec::new();
    for (n, r) in read_lines::<PairRecord>(path)?.into_iter().enumerate() {
        check_tokens(path, &r.a.tokens, vocab)?;
        check_tokens(path, &r.b.tokens, vocab)?;
        if r.label != r.a.spec.matches(&r.b.spec) as u8 {
            return Err(AppError::format(path, format!("pair {}: label contradicts the specs", n + 1)));
        }
        out.push(PairExample {
            a: CorpusItem { spec: r.a.spec, tokens: r.a.tokens },
            b: CorpusItem { spec: r.b.spec, tokens: r.b.tokens },
            label: r.label,
        });
    }
    Ok(out)
}
