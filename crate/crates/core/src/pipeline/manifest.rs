use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::diffusion::LayerId;
use crate::error::{Error, Result};

pub const HEADER: &str = "phase\tstep\tlayer\timage\tkind\tpath";

/// One artifact file; `-` stands for a missing field.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ManifestRow {
    pub phase: String,
    pub step: Option<usize>,
    pub layer: Option<LayerId>,
    pub image: Option<usize>,
    pub kind: String,
    /// Relative to the manifest's directory.
    pub path: String,
}

impl ManifestRow {
    pub fn file(phase: &str, image: Option<usize>, kind: &str, path: impl Into<String>) -> Self {
        Self {
            phase: phase.into(),
            step: None,
            layer: None,
            image,
            kind: kind.into(),
            path: path.into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "-".into(), T::to_string)
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{HEADER}").unwrap();
        for r in &self.rows {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.phase,
                opt(&r.step),
                opt(&r.layer),
                opt(&r.image),
                r.kind,
                r.path
            )
            .unwrap();
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, reason: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == HEADER => {}
            _ => return Err(err(1, "missing manifest header".into())),
        }
        let mut rows = Vec::new();
        for (k, line) in lines {
            let n = k + 1;
            let fields: Vec<&str> = line.split('\t').collect();
            let [phase, step, layer, image, kind, file] = fields[..] else {
                return Err(err(n, format!("expected 6 fields, got {}", fields.len())));
            };
            fn field<T: std::str::FromStr>(s: &str) -> Option<Option<T>> {
                if s == "-" {
                    Some(None)
                } else {
                    s.parse().ok().map(Some)
                }
            }
            let bad = |what: &str| err(n, format!("bad {what}"));
            rows.push(ManifestRow {
                phase: phase.into(),
                step: field(step).ok_or_else(|| bad("step"))?,
                layer: field(layer).ok_or_else(|| bad("layer"))?,
                image: field(image).ok_or_else(|| bad("image"))?,
                kind: kind.into(),
                path: file.into(),
            });
        }
        Ok(Self { rows })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Replaces every row of `phase` in the manifest at `path` with `rows`,
    /// keeping phases in order.
    pub fn merge_phase(path: &Path, phase: &str, rows: Vec<ManifestRow>) -> Result<()> {
        let mut manifest = if path.exists() {
            Self::load(path)?
        } else {
            Self::default()
        };
        manifest.rows.retain(|r| r.phase != phase);
        manifest.rows.extend(rows);
        manifest.rows.sort();
        manifest.save(path)
    }
}
