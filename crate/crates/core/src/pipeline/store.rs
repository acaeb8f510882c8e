//! Recorded vanilla-pass self-attention values, replayed in the final pass.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::manifest::{Manifest, ManifestRow};
use crate::diffusion::{LayerId, TensorKind};
use crate::error::{Error, Result};
use crate::schemes::StepWindow;
use crate::tensor::FeatureTensor;

pub const INDEX_FILE: &str = "index.txt";
pub const MANIFEST_FILE: &str = "manifest.tsv";

/// `(step, layer, image) → V`, each entry a batch of two: `[unguided, guided]`.
///
/// Only the configured window at the highest-resolution decoder layer may be
/// populated, and entries are never overwritten.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueStore {
    total_steps: usize,
    window: StepWindow,
    batch: usize,
    entries: BTreeMap<(usize, LayerId, usize), FeatureTensor>,
}

impl ValueStore {
    pub fn new(total_steps: usize, window: StepWindow, batch: usize) -> Self {
        Self {
            total_steps,
            window,
            batch,
            entries: BTreeMap::new(),
        }
    }

    pub fn layer() -> LayerId {
        LayerId::DECODER
    }

    pub fn window(&self) -> StepWindow {
        self.window
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn insert(&mut self, step: usize, layer: LayerId, image: usize, values: FeatureTensor) -> Result<()> {
        if layer != Self::layer() {
            return Err(Error::Precondition(format!(
                "value store only records layer {}, not {layer}",
                Self::layer()
            )));
        }
        if !self.window.contains(step) {
            return Err(Error::Precondition(format!(
                "step {step} is outside the recording window {}",
                self.window
            )));
        }
        if image >= self.batch {
            return Err(Error::Precondition(format!(
                "image {image} outside batch of {}",
                self.batch
            )));
        }
        if values.batch() != 2 {
            return Err(Error::InvalidShape(format!(
                "stored values need both guidance halves, got batch {}",
                values.batch()
            )));
        }
        if self.entries.contains_key(&(step, layer, image)) {
            return Err(Error::Precondition(format!(
                "value store entry ({step}, {layer}, {image}) is already written"
            )));
        }
        self.entries.insert((step, layer, image), values);
        Ok(())
    }

    pub fn get(&self, step: usize, layer: LayerId, image: usize) -> Option<&FeatureTensor> {
        self.entries.get(&(step, layer, image))
    }

    pub fn remove(&mut self, step: usize, layer: LayerId, image: usize) -> Option<FeatureTensor> {
        self.entries.remove(&(step, layer, image))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = (usize, LayerId, usize)> + '_ {
        self.entries.keys().copied()
    }

    fn file_name(step: usize, layer: LayerId, image: usize) -> String {
        format!("v_s{step:03}_{layer}_i{image}.csty")
    }

    /// Writes one tensor per entry plus `index.txt` and `manifest.tsv`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = Manifest::default();
        for (&(step, layer, image), tensor) in &self.entries {
            let name = Self::file_name(step, layer, image);
            tensor.save(&dir.join(&name))?;
            manifest.rows.push(ManifestRow {
                phase: "phase1".into(),
                step: Some(step),
                layer: Some(layer),
                image: Some(image),
                kind: TensorKind::Values.name().into(),
                path: name,
            });
        }
        let mut index = String::new();
        writeln!(index, "layer={}", Self::layer()).unwrap();
        writeln!(index, "steps={}", self.total_steps).unwrap();
        writeln!(index, "window={}..{}", self.window.start, self.window.end).unwrap();
        writeln!(index, "batch={}", self.batch).unwrap();
        let index_path = dir.join(INDEX_FILE);
        fs::write(&index_path, index).map_err(|e| Error::io(index_path, e))?;
        manifest.save(&dir.join(MANIFEST_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index_path = dir.join(INDEX_FILE);
        let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let parse_err = |line: usize, reason: String| Error::Parse {
            path: index_path.clone(),
            line,
            reason,
        };
        let (mut steps, mut window, mut batch) = (None, None, None);
        for (k, line) in text.lines().enumerate() {
            let Some((key, value)) = line.split_once('=') else {
                return Err(parse_err(k + 1, format!("expected key=value, got `{line}`")));
            };
            let bad = || parse_err(k + 1, format!("bad value for `{key}`"));
            match key {
                "layer" => {
                    if value.parse::<LayerId>().ok() != Some(Self::layer()) {
                        return Err(bad());
                    }
                }
                "steps" => steps = Some(value.parse::<usize>().map_err(|_| bad())?),
                "window" => {
                    let (a, b) = value.split_once("..").ok_or_else(bad)?;
                    window = Some(StepWindow {
                        start: a.parse().map_err(|_| bad())?,
                        end: b.parse().map_err(|_| bad())?,
                    });
                }
                "batch" => batch = Some(value.parse::<usize>().map_err(|_| bad())?),
                _ => return Err(parse_err(k + 1, format!("unknown key `{key}`"))),
            }
        }
        let missing = |what: &str| parse_err(0, format!("missing `{what}`"));
        let mut store = ValueStore::new(
            steps.ok_or_else(|| missing("steps"))?,
            window.ok_or_else(|| missing("window"))?,
            batch.ok_or_else(|| missing("batch"))?,
        );
        let manifest = Manifest::load(&dir.join(MANIFEST_FILE))?;
        for row in manifest.rows {
            let (Some(step), Some(layer), Some(image)) = (row.step, row.layer, row.image) else {
                return Err(Error::Parse {
                    path: dir.join(MANIFEST_FILE),
                    line: 0,
                    reason: format!("store row `{}` lacks step, layer or image", row.path),
                });
            };
            let tensor = FeatureTensor::load(&dir.join(&row.path))?;
            store.insert(step, layer, image, tensor)?;
        }
        Ok(store)
    }
}
