use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use cstyle_core::correspondence::text::{parse_maps, parse_masks};
use cstyle_core::pipeline::manifest::HEADER as MANIFEST_HEADER;
use cstyle_core::pipeline::store::INDEX_FILE;
use cstyle_core::pipeline::{Manifest, ValueStore};
use cstyle_core::tensor::io::{decode, MAGIC};
use cstyle_core::{Error, Result};
use sha2::{Digest, Sha256};

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Human-readable summary of an artifact, chosen by what `path` holds.
pub fn describe(path: &Path) -> Result<String> {
    if path.is_dir() {
        if path.join(INDEX_FILE).is_file() {
            return store(path);
        }
        let manifest = path.join("manifest.tsv");
        if manifest.is_file() {
            return manifest_file(&manifest);
        }
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            reason: "directory holds neither a value store nor a run manifest".into(),
        });
    }
    let bytes = read(path)?;
    if bytes.starts_with(MAGIC) || path.extension().is_some_and(|e| e == "csty") {
        return tensor(path, &bytes);
    }
    let text = String::from_utf8(bytes.clone()).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        reason: format!("not a tensor and not UTF-8 text ({e})"),
    })?;
    let mut out = String::new();
    if text.starts_with(MANIFEST_HEADER) {
        return manifest_file(path);
    } else if text.contains("mask=") || text.starts_with("# grid=") {
        let masks = parse_masks(&text, path)?;
        writeln!(out, "masks {}", path.display()).unwrap();
        if let Some(first) = masks.first() {
            let (h, w) = first.grid();
            writeln!(out, "grid = {h}x{w}").unwrap();
        }
        for m in &masks {
            writeln!(out, "image {}: {} of {} patches", m.image_index(), m.len(), m.patches()).unwrap();
        }
    } else if text.contains("map=") || text.trim().is_empty() {
        let maps = parse_maps(&text, path)?;
        writeln!(out, "maps {}", path.display()).unwrap();
        for m in &maps {
            let mut anchors: Vec<usize> = m.entries.iter().map(|e| e.anchor).collect();
            anchors.sort_unstable();
            anchors.dedup();
            writeln!(
                out,
                "image {}: {} matched patches, anchors {:?}",
                m.image_index,
                m.len(),
                anchors
            )
            .unwrap();
        }
    } else {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            reason: "unrecognized artifact".into(),
        });
    }
    writeln!(out, "sha256 = {}", sha256_hex(&bytes)).unwrap();
    Ok(out)
}

fn tensor(path: &Path, bytes: &[u8]) -> Result<String> {
    let t = decode(bytes, path)?;
    let mut out = String::new();
    writeln!(out, "tensor {}", path.display()).unwrap();
    writeln!(out, "dims = {:?}", t.dims).unwrap();
    writeln!(out, "elements = {}", t.data.len()).unwrap();
    if !t.data.is_empty() {
        let min = t.data.iter().copied().fold(f32::INFINITY, f32::min);
        let max = t.data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mean = t.data.iter().map(|&x| f64::from(x)).sum::<f64>() / t.data.len() as f64;
        writeln!(out, "min = {min:.6}\nmax = {max:.6}\nmean = {mean:.6}").unwrap();
    }
    writeln!(out, "sha256 = {}", sha256_hex(bytes)).unwrap();
    Ok(out)
}

fn store(dir: &Path) -> Result<String> {
    let store = ValueStore::load(dir)?;
    let window = store.window();
    let mut out = String::new();
    writeln!(out, "value store {}", dir.display()).unwrap();
    writeln!(out, "layer = {}", ValueStore::layer()).unwrap();
    writeln!(out, "steps = {}", store.total_steps()).unwrap();
    writeln!(out, "window = {window}").unwrap();
    writeln!(out, "batch = {}", store.batch()).unwrap();
    let expected = window.len() * store.batch();
    writeln!(out, "entries = {} of {expected}", store.len()).unwrap();
    for step in window.steps() {
        for image in 0..store.batch() {
            match store.get(step, ValueStore::layer(), image) {
                Some(t) => {
                    let bytes = cstyle_core::tensor::io::encode(&t.dims(), t.data());
                    writeln!(
                        out,
                        "step {step} image {image}: dims {:?} sha256 {}",
                        t.dims(),
                        sha256_hex(&bytes)
                    )
                    .unwrap();
                }
                None => writeln!(out, "step {step} image {image}: MISSING").unwrap(),
            }
        }
    }
    Ok(out)
}

fn manifest_file(path: &Path) -> Result<String> {
    let manifest = Manifest::load(path)?;
    let root = path.parent().unwrap_or(Path::new("."));
    let mut out = String::new();
    writeln!(out, "manifest {}", path.display()).unwrap();
    writeln!(out, "rows = {}", manifest.rows.len()).unwrap();
    let mut missing = 0;
    for row in &manifest.rows {
        let file = root.join(&row.path);
        let sum = match fs::read(&file) {
            Ok(bytes) => sha256_hex(&bytes),
            Err(_) => {
                missing += 1;
                "MISSING".into()
            }
        };
        writeln!(out, "{}\t{}\t{sum}", row.phase, row.path).unwrap();
    }
    writeln!(out, "missing = {missing}").unwrap();
    Ok(out)
}
