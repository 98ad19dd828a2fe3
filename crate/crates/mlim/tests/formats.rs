use std::fs;

use mlim::checkpoint::{self, Checkpoint, Dtype};
use mlim::manifest;
use mlim::ppm::{self, PpmError};
use mlim::AppError;
use mlim_core::config::{ModelConfig, RunConfig};
use mlim_core::data::{generate_pair_split, generate_scene, sample_corpus, ImageTensor};
use mlim_core::optim::Adam;
use mlim_core::rng::{stream, Stream};
use mlim_core::{Mlim, ParamStore};
use rand::Rng;

fn small_config() -> RunConfig {
    RunConfig {
        model: ModelConfig {
            image_side: 16,
            d_model: 8,
            layers: 1,
            heads: 2,
            d_ff: 16,
            embedder_channels: vec![4],
            decoder_channels: vec![4],
            ..ModelConfig::default()
        },
        ..RunConfig::default()
    }
}

fn small_checkpoint(with_optimizer: bool) -> Checkpoint {
    let config = small_config();
    let model = Mlim::new(config.model.clone()).unwrap();
    let params = model.init_params(&mut stream(3, Stream::Init));
    let optimizer = with_optimizer.then(|| {
        let mut opt = Adam::new(config.pretrain.optimizer.clone(), &params);
        opt.step = 17;
        let mut r = stream(4, Stream::Init);
        for t in opt.m.iter_mut().chain(opt.v.iter_mut()) {
            t.data_mut().iter_mut().for_each(|x| *x = r.random::<f64>());
        }
        opt
    });
    Checkpoint { params, optimizer, config }
}

fn as_f32(p: &ParamStore) -> ParamStore {
    let mut out = ParamStore::new();
    for (_, name, t) in p.iter() {
        let mut t = t.clone();
        t.data_mut().iter_mut().for_each(|x| *x = *x as f32 as f64);
        out.insert(name, t).unwrap();
    }
    out
}

#[test]
fn ppm_round_trip_within_quantization() {
    let mut r = stream(1, Stream::Probe);
    let data: Vec<f64> = (0..3 * 12 * 20).map(|_| r.random::<f64>()).collect();
    let img = ImageTensor::new(12, 20, data).unwrap();
    let back = ppm::decode(&ppm::encode(&img)).unwrap();
    assert_eq!((back.height(), back.width()), (12, 20));
    let worst = img.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst <= 1.0 / 510.0 + 1e-12, "max error {worst}");
}

#[test]
fn ppm_byte_images_round_trip_exactly() {
    let spec = sample_corpus(1, 9, 64).unwrap()[0].spec;
    let img = generate_scene(&spec, 64).unwrap();
    let bytes = ppm::encode(&img);
    assert!(bytes.starts_with(b"P6\n64 64\n255\n"));
    assert_eq!(ppm::decode(&bytes).unwrap(), img);
}

#[test]
fn black_image_has_zero_payload() {
    let bytes = ppm::encode(&ImageTensor::filled(4, 6, 0.0));
    assert!(bytes.starts_with(b"P6\n6 4\n255\n"));
    assert_eq!(bytes.len(), 11 + 4 * 6 * 3);
    assert!(bytes[11..].iter().all(|&b| b == 0));
}

#[test]
fn ppm_header_comments_are_skipped() {
    let mut bytes = b"P6\n# made by hand\n2 1\n255\n".to_vec();
    bytes.extend_from_slice(&[255, 0, 0, 0, 0, 255]);
    let img = ppm::decode(&bytes).unwrap();
    assert_eq!(img.pixel_bytes(0, 0), [255, 0, 0]);
    assert_eq!(img.pixel_bytes(1, 0), [0, 0, 255]);
}

#[test]
fn malformed_ppm_is_rejected() {
    let good = ppm::encode(&ImageTensor::filled(4, 4, 0.5));
    assert_eq!(ppm::decode(b"P3\n1 1\n255\n0 0 0"), Err(PpmError::BadMagic));
    assert!(matches!(ppm::decode(&good[..good.len() - 5]), Err(PpmError::Truncated { expected: 48, found: 43 })));
    let mut long = good.clone();
    long.push(0);
    assert_eq!(ppm::decode(&long), Err(PpmError::TrailingBytes(1)));
    assert_eq!(ppm::decode(b"P6\n1 1\n65535\n\0\0\0\0\0\0"), Err(PpmError::UnsupportedMaxval(65535)));
    assert!(matches!(ppm::decode(b"P6\n0 4\n255\n"), Err(PpmError::BadHeader(_))));
    assert!(matches!(ppm::decode(b"P6\nx 4\n255\n"), Err(PpmError::BadHeader(_))));
}

#[test]
fn load_image_error_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.ppm");
    fs::write(&path, b"P6\n4 4\n255\n\x01\x02").unwrap();
    let err = ppm::load_image(&path).unwrap_err();
    assert!(err.to_string().contains("broken.ppm"), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn corpus_written_twice_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        manifest::write_corpus(&sample_corpus(100, 7, 32).unwrap(), 32, d.path()).unwrap();
    }
    let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 101);
    for n in names {
        assert_eq!(fs::read(a.path().join(&n)).unwrap(), fs::read(b.path().join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn manifest_records_have_the_documented_fields() {
    let dir = tempfile::tempdir().unwrap();
    let items = sample_corpus(5, 2, 32).unwrap();
    manifest::write_corpus(&items, 32, dir.path()).unwrap();
    let text = fs::read_to_string(dir.path().join(manifest::MANIFEST)).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    let v: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort();
    assert_eq!(keys, ["image", "spec", "tokens"]);
    assert_eq!(v["image"], "item_000000.ppm");
    let tokens: Vec<u32> = serde_json::from_value(v["tokens"].clone()).unwrap();
    assert_eq!(tokens, items[0].tokens);
}

#[test]
fn corpus_loads_back_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let items = sample_corpus(6, 5, 32).unwrap();
    manifest::write_corpus(&items, 32, dir.path()).unwrap();
    let corpus = manifest::load_corpus(dir.path(), 32).unwrap();
    assert_eq!(corpus.len(), 6);
    for (i, it) in items.iter().enumerate() {
        assert_eq!(corpus.tokens(i), it.tokens.as_slice());
        assert_eq!(corpus.image(i), generate_scene(&it.spec, 32).unwrap());
    }
    let err = manifest::load_corpus(dir.path(), 64).unwrap_err();
    assert!(err.to_string().contains("item_000000.ppm"), "{err}");
}

#[test]
fn manifest_with_unknown_key_or_bad_token_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    manifest::write_corpus(&sample_corpus(2, 5, 32).unwrap(), 32, dir.path()).unwrap();
    let path = dir.path().join(manifest::MANIFEST);
    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, text.replacen("\"image\"", "\"extra\":1,\"image\"", 1)).unwrap();
    assert!(matches!(manifest::load_corpus(dir.path(), 32), Err(AppError::Format { .. })));
    fs::write(&path, text.replacen("\"tokens\":[", "\"tokens\":[9999,", 1)).unwrap();
    let err = manifest::load_corpus(dir.path(), 32).unwrap_err();
    assert!(err.to_string().contains("9999"), "{err}");
}

#[test]
fn pairs_round_trip_and_labels_are_checked() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = generate_pair_split(40, 1, 3, 0.5, 32).unwrap();
    let path = dir.path().join(manifest::PAIRS_TRAIN);
    manifest::write_pairs(&train, &path).unwrap();
    assert_eq!(manifest::read_pairs(&path).unwrap(), train);
    let line = fs::read_to_string(&path).unwrap().lines().next().unwrap().to_string();
    let v: serde_json::Value = serde_json::from_str(&line).unwrap();
    let flipped = 1 - v["label"].as_u64().unwrap();
    let mut w = v.clone();
    w["label"] = flipped.into();
    fs::write(&path, format!("{w}\n")).unwrap();
    assert!(matches!(manifest::read_pairs(&path), Err(AppError::Format { .. })));
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for (dtype, opt) in [(Dtype::F32, true), (Dtype::F32, false), (Dtype::F64, true)] {
        let ckpt = small_checkpoint(opt);
        let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        checkpoint::save(&ckpt, &p1, dtype).unwrap();
        let loaded = checkpoint::load(&p1).unwrap();
        checkpoint::save(&loaded, &p2, dtype).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(loaded.config, ckpt.config);
        assert_eq!(loaded.optimizer.as_ref().map(|o| o.step), ckpt.optimizer.as_ref().map(|o| o.step));
        match dtype {
            Dtype::F64 => assert_eq!(loaded.params, ckpt.params),
            Dtype::F32 => assert_eq!(loaded.params, as_f32(&ckpt.params)),
        }
        loaded.model().unwrap();
    }
}

#[test]
fn checkpoint_layout_is_magic_length_header_payload() {
    let ckpt = small_checkpoint(false);
    let bytes = checkpoint::to_bytes(&ckpt, Dtype::F32).unwrap();
    assert_eq!(&bytes[..8], b"MLIMCKPT");
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
    assert_eq!(header["format_version"], 1);
    assert_eq!(header["dtype"], "f32");
    let numel: usize = ckpt.params.iter().map(|(_, _, t)| t.rows() * t.cols()).sum();
    assert_eq!(bytes.len() - 16 - hlen, 4 * numel);
    let first = &header["tensors"][0];
    let name = first["name"].as_str().unwrap();
    let (_, _, t) = ckpt.params.iter().find(|(_, n, _)| *n == name).unwrap();
    let x = f32::from_le_bytes(bytes[16 + hlen..20 + hlen].try_into().unwrap());
    assert_eq!(x, t.data()[0] as f32);
}

fn rewrite_header(bytes: &[u8], edit: impl FnOnce(&mut serde_json::Value)) -> Vec<u8> {
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let mut header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
    edit(&mut header);
    let json = serde_json::to_vec(&header).unwrap();
    let mut out = b"MLIMCKPT".to_vec();
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&bytes[16 + hlen..]);
    out
}

fn load_err(bytes: &[u8]) -> String {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    fs::write(&path, bytes).unwrap();
    let err = checkpoint::load(&path).unwrap_err();
    assert!(matches!(err, AppError::Format { .. }), "{err}");
    assert_eq!(err.exit_code(), 2);
    err.to_string()
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let bytes = checkpoint::to_bytes(&small_checkpoint(true), Dtype::F32).unwrap();
    assert!(load_err(&bytes[..bytes.len() - 3]).contains("truncated"));
    assert!(load_err(&bytes[..20]).contains("truncated"));
    assert!(load_err(b"NOTACKPT\0\0\0\0\0\0\0\0").contains("not a checkpoint"));
    let v2 = rewrite_header(&bytes, |h| h["format_version"] = 2.into());
    assert!(load_err(&v2).contains("version 2"));
    let shifted = rewrite_header(&bytes, |h| h["tensors"][1]["offset"] = 4.into());
    assert!(load_err(&shifted).contains("corrupt offsets"));
    let mut trailing = bytes.clone();
    trailing.extend_from_slice(&[0; 4]);
    assert!(load_err(&trailing).contains("corrupt offsets"));
    let unknown = rewrite_header(&bytes, |h| h["extra"] = 1.into());
    load_err(&unknown);
}

#[test]
fn checkpoint_shape_mismatch_is_detected() {
    let mut ckpt = small_checkpoint(false);
    ckpt.config.model.d_model = 16;
    ckpt.config.model.d_ff = 32;
    let err = ckpt.model().unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn f64_payloads_are_accepted() {
    let ckpt = small_checkpoint(true);
    let bytes = checkpoint::to_bytes(&ckpt, Dtype::F64).unwrap();
    let back = checkpoint::from_bytes(&bytes, std::path::Path::new("mem")).unwrap();
    assert_eq!(back.params, ckpt.params);
    assert_eq!(back.optimizer, ckpt.optimizer);
}
