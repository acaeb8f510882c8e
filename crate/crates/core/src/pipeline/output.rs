//! The on-disk run tree. Each phase writes its own files and its rows of
//! `manifest.tsv`, so running the phases one by one produces the same tree
//! as a single `run`.

use std::fs;
use std::path::{Path, PathBuf};

use super::config::RunConfig;
use super::manifest::{Manifest, ManifestRow};
use super::phases::{
    phase1_vanilla, phase2_correspondence, phase3_final, Phase1Output, Phase2Output, Phase3Output, Session,
};
use super::store::ValueStore;
use crate::correspondence::text::{format_maps, format_masks, parse_maps, parse_masks};
use crate::correspondence::{CorrespondenceMap, SubjectMask};
use crate::diffusion::decode_grayscale;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::tensor::{FeatureTensor, Matrix};

pub const STORE_DIR: &str = "store";
pub const MASKS_FILE: &str = "masks.txt";
pub const MAPS_FILE: &str = "maps.txt";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const CONFIG_FILE: &str = "config.resolved";
/// Nearest-neighbour upscaling of decoded images.
pub const IMAGE_SCALE: usize = 8;

/// `<out_root>/<run-id>`.
pub fn run_dir(config: &RunConfig, out_root: &Path) -> PathBuf {
    out_root.join(config.run_id())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Binary greyscale PGM of a decoded latent.
pub fn encode_pgm(latent: &Matrix, grid: (usize, usize)) -> Vec<u8> {
    let (h, w) = grid;
    let grey = decode_grayscale(latent);
    let (sh, sw) = (h * IMAGE_SCALE, w * IMAGE_SCALE);
    let mut out = format!("P5\n{sw} {sh}\n255\n").into_bytes();
    out.reserve(sh * sw);
    for y in 0..sh {
        for x in 0..sw {
            out.push(grey[(y / IMAGE_SCALE) * w + x / IMAGE_SCALE]);
        }
    }
    out
}

/// Collects files written under one directory for the manifest.
struct Writer<'a> {
    root: &'a Path,
    prefix: PathBuf,
    phase: String,
    rows: Vec<ManifestRow>,
}

impl<'a> Writer<'a> {
    fn new(root: &'a Path, prefix: impl Into<PathBuf>, phase: impl Into<String>) -> Self {
        Self {
            root,
            prefix: prefix.into(),
            phase: phase.into(),
            rows: Vec::new(),
        }
    }

    fn target(&mut self, rel: &str, image: Option<usize>, kind: &str) -> Result<PathBuf> {
        let rel_path = self.prefix.join(rel);
        let full = self.root.join(&rel_path);
        if let Some(parent) = full.parent() {
            create_dir(parent)?;
        }
        self.rows.push(ManifestRow::file(
            &self.phase,
            image,
            kind,
            rel_path.to_string_lossy().replace('\\', "/"),
        ));
        Ok(full)
    }

    fn matrix(&mut self, rel: &str, image: usize, kind: &str, m: &Matrix) -> Result<()> {
        let path = self.target(rel, Some(image), kind)?;
        m.save(&path)
    }

    fn bytes(&mut self, rel: &str, image: Option<usize>, kind: &str, bytes: &[u8]) -> Result<()> {
        let path = self.target(rel, image, kind)?;
        fs::write(&path, bytes).map_err(|e| Error::io(path, e))
    }

    fn finish(self) -> Result<()> {
        Manifest::merge_phase(&self.root.join(MANIFEST_FILE), &self.phase, self.rows)
    }
}

fn start(config: &RunConfig, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    write_text(&dir.join(CONFIG_FILE), &config.resolved())
}

/// Phase 1 into `dir`: the value store, vanilla latents, images and the
/// style reference features.
pub fn write_phase1(session: &Session, dir: &Path) -> Result<Phase1Output> {
    let cfg = session.config();
    start(cfg, dir)?;
    let out = phase1_vanilla(session)?;
    let grid = cfg.model.grid;
    let wrap = |e: Error| e.in_phase("phase1");
    out.store.save(&dir.join(STORE_DIR)).map_err(wrap)?;
    let mut w = Writer::new(dir, "", "phase1");
    let store_rows = Manifest::load(&dir.join(STORE_DIR).join(super::store::MANIFEST_FILE)).map_err(wrap)?;
    for mut row in store_rows.rows {
        row.path = format!("{STORE_DIR}/{}", row.path);
        w.rows.push(row);
    }
    for (b, z) in out.latents.iter().enumerate() {
        w.matrix(&format!("latents/vanilla_i{b}.csty"), b, "latent", z)
            .map_err(wrap)?;
        w.bytes(
            &format!("images/vanilla_i{b}.pgm"),
            Some(b),
            "image",
            &encode_pgm(z, grid),
        )
        .map_err(wrap)?;
    }
    for (b, f) in out.reference.iter().enumerate() {
        w.matrix(&format!("features/reference_i{b}.csty"), b, "reference", f)
            .map_err(wrap)?;
    }
    w.finish().map_err(wrap)?;
    Ok(out)
}

/// Phase 2 into `dir`: masks, maps and the features they came from.
pub fn write_phase2(session: &Session, dir: &Path) -> Result<Phase2Output> {
    let cfg = session.config();
    start(cfg, dir)?;
    let out = phase2_correspondence(session)?;
    let wrap = |e: Error| e.in_phase("phase2");
    let mut w = Writer::new(dir, "", "phase2");
    w.bytes(MASKS_FILE, None, "masks", format_masks(&out.masks).as_bytes())
        .map_err(wrap)?;
    w.bytes(MAPS_FILE, None, "maps", format_maps(&out.maps).as_bytes())
        .map_err(wrap)?;
    for (b, f) in out.features.iter().enumerate() {
        w.matrix(&format!("features/correspondence_i{b}.csty"), b, "features", f)
            .map_err(wrap)?;
    }
    for (b, a) in out.attention.iter().enumerate() {
        let t = FeatureTensor::new(1, cfg.model.grid, 1, a.clone()).map_err(wrap)?;
        let path = w
            .target(&format!("features/subject_attention_i{b}.csty"), Some(b), "subject-map")
            .map_err(wrap)?;
        t.save(&path).map_err(wrap)?;
    }
    w.finish().map_err(wrap)?;
    Ok(out)
}

/// What phase 3 reads from a run tree.
#[derive(Clone, Debug)]
pub struct Phase3Inputs {
    pub store: ValueStore,
    pub masks: Vec<SubjectMask>,
    pub maps: Vec<CorrespondenceMap>,
    pub reference: Vec<Matrix>,
}

impl Phase3Inputs {
    pub fn load(dir: &Path, batch: usize) -> Result<Self> {
        let load = || -> Result<Self> {
            let store = ValueStore::load(&dir.join(STORE_DIR))?;
            let masks_path = dir.join(MASKS_FILE);
            let masks = parse_masks(&read_text(&masks_path)?, &masks_path)?;
            let maps_path = dir.join(MAPS_FILE);
            let maps = parse_maps(&read_text(&maps_path)?, &maps_path)?;
            let reference = (0..batch)
                .map(|b| Matrix::load(&dir.join(format!("features/reference_i{b}.csty"))))
                .collect::<Result<Vec<_>>>()?;
            Ok(Self {
                store,
                masks,
                maps,
                reference,
            })
        };
        load().map_err(|e| e.in_phase("phase3"))
    }
}

#[derive(Clone, Debug)]
pub struct Phase3Artifacts {
    pub output: Phase3Output,
    pub metrics: MetricsReport,
}

/// Phase 3 into `dir/prefix`, listed in the manifest under `tag`.
pub fn write_phase3(
    session: &Session,
    inputs: &Phase3Inputs,
    dir: &Path,
    prefix: &str,
    tag: &str,
) -> Result<Phase3Artifacts> {
    let cfg = session.config();
    let sub = dir.join(prefix);
    start(cfg, &sub)?;
    let output = phase3_final(session, &inputs.store, &inputs.masks, &inputs.maps, false)?;
    let wrap = |e: Error| e.in_phase("phase3");
    let metrics = MetricsReport::compute(&output.hidden, &inputs.reference, &inputs.masks).map_err(wrap)?;
    let mut w = Writer::new(dir, prefix, tag);
    for (b, z) in output.latents.iter().enumerate() {
        w.matrix(&format!("latents/final_i{b}.csty"), b, "latent", z)
            .map_err(wrap)?;
        w.bytes(
            &format!("images/final_i{b}.pgm"),
            Some(b),
            "image",
            &encode_pgm(z, cfg.model.grid),
        )
        .map_err(wrap)?;
    }
    for (b, f) in output.hidden.iter().enumerate() {
        w.matrix(&format!("features/final_i{b}.csty"), b, "hidden", f)
            .map_err(wrap)?;
    }
    w.bytes(METRICS_FILE, None, "metrics", metrics.to_tsv().as_bytes())
        .map_err(wrap)?;
    w.finish().map_err(wrap)?;
    Ok(Phase3Artifacts { output, metrics })
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub phase1: Phase1Output,
    pub phase2: Phase2Output,
    pub phase3: Phase3Artifacts,
}

/// All three phases into `<out_root>/<run-id>`.
pub fn run_all(config: &RunConfig, out_root: &Path) -> Result<RunArtifacts> {
    let session = Session::new(config.clone())?;
    let dir = run_dir(config, out_root);
    let phase1 = write_phase1(&session, &dir)?;
    let phase2 = write_phase2(&session, &dir)?;
    let inputs = Phase3Inputs::load(&dir, config.batch_size)?;
    let phase3 = write_phase3(&session, &inputs, &dir, "", "phase3")?;
    Ok(RunArtifacts {
        dir,
        phase1,
        phase2,
        phase3,
    })
}
