//! Desk-scale style and subject-consistency proxies computed from the
//! denoiser's own features.

use std::fmt::Write as _;

use crate::correspondence::SubjectMask;
use crate::error::{Error, Result};
use crate::tensor::{gram_l2, Matrix};

/// Gram-matrix distance between final features and their vanilla reference.
pub fn style_distance(final_features: &Matrix, vanilla_features: &Matrix) -> Result<f32> {
    if final_features.cols() != vanilla_features.cols() {
        return Err(Error::ShapeMismatch {
            op: "style_distance",
            lhs: final_features.shape().to_vec(),
            rhs: vanilla_features.shape().to_vec(),
        });
    }
    gram_l2(final_features, vanilla_features)
}

fn masked_mean(features: &Matrix, mask: &SubjectMask) -> Result<Vec<f64>> {
    if mask.is_empty() {
        return Err(Error::EmptySubjectMask {
            image: mask.image_index(),
            max_weight: 0.0,
        });
    }
    let mut acc = vec![0.0f64; features.cols()];
    for &p in mask.indices() {
        if p >= features.rows() {
            return Err(Error::MaskOutOfRange {
                image: mask.image_index(),
                index: p,
                patches: features.rows(),
            });
        }
        for (a, &x) in acc.iter_mut().zip(features.row(p)) {
            *a += f64::from(x);
        }
    }
    let n = mask.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// `B × B` cosine similarities of the mean-pooled subject features.
pub fn subject_consistency(features: &[Matrix], masks: &[SubjectMask]) -> Result<Matrix> {
    if features.len() != masks.len() {
        return Err(Error::ShapeMismatch {
            op: "subject_consistency",
            lhs: vec![features.len()],
            rhs: vec![masks.len()],
        });
    }
    let pooled = features
        .iter()
        .zip(masks)
        .map(|(f, m)| masked_mean(f, m))
        .collect::<Result<Vec<_>>>()?;
    let norms: Vec<f64> = pooled
        .iter()
        .map(|p| p.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::ZeroNorm {
            role: "pooled subject",
            patch: i,
        });
    }
    let b = pooled.len();
    let mut out = Matrix::zeros(b, b);
    for i in 0..b {
        out.set(i, i, 1.0);
        for j in i + 1..b {
            let dot: f64 = pooled[i].iter().zip(&pooled[j]).map(|(x, y)| x * y).sum();
            let c = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0) as f32;
            out.set(i, j, c);
            out.set(j, i, c);
        }
    }
    Ok(out)
}

/// Per-image style distances and pairwise subject consistency of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub style: Vec<f32>,
    pub consistency: Matrix,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub const TSV_HEADER: &str =
    "row\tgram_l2_proxy\tgram_l2_proxy_sd\tsubject_consistency_proxy\tsubject_consistency_proxy_sd";

impl MetricsReport {
    pub fn compute(final_features: &[Matrix], vanilla_features: &[Matrix], masks: &[SubjectMask]) -> Result<Self> {
        if final_features.len() != vanilla_features.len() {
            return Err(Error::ShapeMismatch {
                op: "MetricsReport::compute",
                lhs: vec![final_features.len()],
                rhs: vec![vanilla_features.len()],
            });
        }
        let style = final_features
            .iter()
            .zip(vanilla_features)
            .map(|(f, v)| style_distance(f, v))
            .collect::<Result<Vec<_>>>()?;
        let consistency = subject_consistency(final_features, masks)?;
        let report = Self { style, consistency };
        if report
            .style
            .iter()
            .chain(report.consistency.data())
            .any(|x| !x.is_finite())
        {
            return Err(Error::NonFinite {
                op: "MetricsReport::compute",
                row: 0,
            });
        }
        Ok(report)
    }

    pub fn batch(&self) -> usize {
        self.style.len()
    }

    /// Mean consistency of image `i` with every other image; 1 for a
    /// single image.
    pub fn image_consistency(&self, i: usize) -> f32 {
        let others: Vec<f64> = (0..self.batch())
            .filter(|&j| j != i)
            .map(|j| f64::from(self.consistency.get(i, j)))
            .collect();
        if others.is_empty() {
            1.0
        } else {
            (others.iter().sum::<f64>() / others.len() as f64) as f32
        }
    }

    pub fn mean_style(&self) -> f32 {
        self.style_summary().0 as f32
    }

    /// Mean and standard deviation over images.
    pub fn style_summary(&self) -> (f64, f64) {
        let values: Vec<f64> = self.style.iter().map(|&x| f64::from(x)).collect();
        mean_std(&values)
    }

    /// Mean and standard deviation over unordered image pairs.
    pub fn consistency_summary(&self) -> (f64, f64) {
        let b = self.batch();
        let pairs: Vec<f64> = (0..b)
            .flat_map(|i| (i + 1..b).map(move |j| (i, j)))
            .map(|(i, j)| f64::from(self.consistency.get(i, j)))
            .collect();
        if pairs.is_empty() {
            return (1.0, 0.0);
        }
        mean_std(&pairs)
    }

    /// Summary row cells without the row label.
    pub fn summary_cells(&self) -> String {
        let (sm, ss) = self.style_summary();
        let (cm, cs) = self.consistency_summary();
        format!("{sm:.6}\t{ss:.6}\t{cm:.6}\t{cs:.6}")
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{TSV_HEADER}").unwrap();
        for i in 0..self.batch() {
            writeln!(
                out,
                "image{i}\t{:.6}\t-\t{:.6}\t-",
                self.style[i],
                self.image_consistency(i)
            )
            .unwrap();
        }
        writeln!(out, "batch\t{}", self.summary_cells()).unwrap();
        out
    }
}
