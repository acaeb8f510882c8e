//! Subject masks from cross-attention maps, and patch correspondences
//! between each image and its anchor(s).

pub mod text;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Patch indices occupied by the subject in one image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubjectMask {
    image_index: usize,
    indices: Vec<usize>,
    grid: (usize, usize),
}

impl SubjectMask {
    /// Indices must be strictly ascending and below `H · W`.
    pub fn new(image_index: usize, indices: Vec<usize>, grid: (usize, usize)) -> Result<Self> {
        let patches = grid.0 * grid.1;
        for (k, &i) in indices.iter().enumerate() {
            if i >= patches {
                return Err(Error::MaskOutOfRange {
                    image: image_index,
                    index: i,
                    patches,
                });
            }
            if k > 0 && indices[k - 1] >= i {
                return Err(Error::Precondition(format!(
                    "mask indices for image {image_index} are not strictly ascending at position {k}"
                )));
            }
        }
        Ok(Self {
            image_index,
            indices,
            grid,
        })
    }

    /// Every patch of the grid.
    pub fn full(image_index: usize, grid: (usize, usize)) -> Self {
        Self {
            image_index,
            indices: (0..grid.0 * grid.1).collect(),
            grid,
        }
    }

    pub fn image_index(&self) -> usize {
        self.image_index
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Max-normalizes `attn_map` to `[0, 1]` and keeps patches at or above `tau`.
///
/// An empty result is returned as an empty mask; the caller decides whether
/// that is fatal.
pub fn extract_subject_mask(
    image_index: usize,
    attn_map: &[f32],
    grid: (usize, usize),
    tau: f32,
) -> Result<SubjectMask> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Precondition(format!("tau must lie in (0, 1], got {tau}")));
    }
    if attn_map.len() != grid.0 * grid.1 {
        return Err(Error::ShapeMismatch {
            op: "extract_subject_mask",
            lhs: vec![attn_map.len()],
            rhs: vec![grid.0, grid.1],
        });
    }
    if let Some(p) = attn_map.iter().position(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::Precondition(format!(
            "attention weight at patch {p} is {} (must be finite and non-negative)",
            attn_map[p]
        )));
    }
    let max = attn_map.iter().copied().fold(0.0f32, f32::max);
    if max == 0.0 {
        return Err(Error::NoSubjectSignal);
    }
    let indices = attn_map
        .iter()
        .enumerate()
        .filter(|(_, &w)| w / max >= tau)
        .map(|(p, _)| p)
        .collect();
    SubjectMask::new(image_index, indices, grid)
}

/// Elementwise mean of equally long maps.
pub fn aggregate_attention<M: AsRef<[f32]>>(maps: &[M]) -> Result<Vec<f32>> {
    let first = maps.first().ok_or(Error::Empty {
        op: "aggregate_attention",
    })?;
    let n = first.as_ref().len();
    let mut acc = vec![0.0f64; n];
    for m in maps {
        let m = m.as_ref();
        if m.len() != n {
            return Err(Error::ShapeMismatch {
                op: "aggregate_attention",
                lhs: vec![n],
                rhs: vec![m.len()],
            });
        }
        for (a, &w) in acc.iter_mut().zip(m) {
            *a += f64::from(w);
        }
    }
    let k = maps.len() as f64;
    Ok(acc.into_iter().map(|a| (a / k) as f32).collect())
}

/// Which anchor patches a target patch may be matched to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SearchSpace {
    /// Only the anchor's own subject patches.
    #[default]
    SubjectPatches,
    /// Any patch of the anchor image.
    AllPatches,
}

/// One anchor's features and subject mask.
#[derive(Clone, Copy, Debug)]
pub struct AnchorView<'a> {
    pub index: usize,
    pub features: &'a Matrix,
    pub mask: &'a SubjectMask,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchMatch {
    pub patch: usize,
    pub anchor: usize,
    pub anchor_patch: usize,
    /// Cosine similarity; unknown when the map was read back from text.
    pub similarity: Option<f32>,
}

/// Best anchor patch for every subject patch of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceMap {
    pub image_index: usize,
    pub entries: Vec<PatchMatch>,
}

impl CorrespondenceMap {
    /// Entries must be ascending in `patch` and unique.
    pub fn new(image_index: usize, entries: Vec<PatchMatch>) -> Result<Self> {
        if entries.windows(2).any(|w| w[0].patch >= w[1].patch) {
            return Err(Error::Precondition(format!(
                "correspondence entries for image {image_index} are not strictly ascending"
            )));
        }
        Ok(Self { image_index, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn patches(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|e| e.patch)
    }

    /// Same patch set, in the same order, as `mask`.
    pub fn covers(&self, mask: &SubjectMask) -> bool {
        self.entries.len() == mask.len() && self.patches().zip(mask.indices()).all(|(a, &b)| a == b)
    }
}

fn row_norm(features: &Matrix, patch: usize, role: &'static str) -> Result<f64> {
    let norm = features
        .row(patch)
        .iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt();
    if !norm.is_finite() || norm <= 0.0 {
        return Err(Error::ZeroNorm { role, patch });
    }
    Ok(norm)
}

/// Cosine similarity with the dot product accumulated in f64, ascending.
#[inline]
fn cosine(a: &[f32], norm_a: f64, b: &[f32], norm_b: f64) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum();
    dot / (norm_a * norm_b)
}

struct Candidate<'a> {
    anchor: usize,
    patch: usize,
    row: &'a [f32],
    norm: f64,
}

fn check_target(target_features: &Matrix, target_mask: &SubjectMask) -> Result<()> {
    if target_features.rows() != target_mask.patches() {
        return Err(Error::ShapeMismatch {
            op: "build_correspondence",
            lhs: target_features.shape().to_vec(),
            rhs: vec![target_mask.patches()],
        });
    }
    Ok(())
}

fn candidates<'a>(anchor: &AnchorView<'a>, d: usize, search: SearchSpace) -> Result<Vec<Candidate<'a>>> {
    if anchor.features.cols() != d {
        return Err(Error::ShapeMismatch {
            op: "build_correspondence",
            lhs: vec![d],
            rhs: anchor.features.shape().to_vec(),
        });
    }
    if anchor.features.rows() != anchor.mask.patches() {
        return Err(Error::ShapeMismatch {
            op: "build_correspondence",
            lhs: anchor.features.shape().to_vec(),
            rhs: vec![anchor.mask.patches()],
        });
    }
    if anchor.mask.is_empty() {
        return Err(Error::EmptyAnchorMask { anchor: anchor.index });
    }
    let patches: Vec<usize> = match search {
        SearchSpace::SubjectPatches => anchor.mask.indices().to_vec(),
        SearchSpace::AllPatches => (0..anchor.features.rows()).collect(),
    };
    let features: &'a Matrix = anchor.features;
    patches
        .into_iter()
        .map(|p| {
            Ok(Candidate {
                anchor: anchor.index,
                patch: p,
                row: features.row(p),
                norm: row_norm(features, p, "anchor")?,
            })
        })
        .collect()
}

fn to_similarity(s: f64) -> Option<f32> {
    Some(s.clamp(-1.0, 1.0) as f32)
}

/// Matches each subject patch of the target to the most cosine-similar
/// subject patch across all anchors.
///
/// Ties go to the lower anchor image index, then the lower anchor patch.
pub fn build_correspondence(
    target_features: &Matrix,
    target_mask: &SubjectMask,
    anchors: &[AnchorView<'_>],
    search: SearchSpace,
) -> Result<CorrespondenceMap> {
    check_target(target_features, target_mask)?;
    if anchors.is_empty() {
        return Err(Error::Precondition("at least one anchor is required".into()));
    }
    let d = target_features.cols();
    let mut ordered: Vec<&AnchorView<'_>> = anchors.iter().collect();
    ordered.sort_by_key(|a| a.index);
    let mut pool: Vec<Candidate<'_>> = Vec::new();
    for anchor in ordered {
        pool.extend(candidates(anchor, d, search)?);
    }

    let mut entries = Vec::with_capacity(target_mask.len());
    for &p in target_mask.indices() {
        let (t, tn) = (target_features.row(p), row_norm(target_features, p, "target")?);
        let mut best: Option<(usize, usize, f64)> = None;
        for c in &pool {
            let s = cosine(t, tn, c.row, c.norm);
            if best.is_none_or(|(_, _, b)| s > b) {
                best = Some((c.anchor, c.patch, s));
            }
        }
        let (anchor, anchor_patch, s) = best.expect("pool is non-empty");
        entries.push(PatchMatch {
            patch: p,
            anchor,
            anchor_patch,
            similarity: to_similarity(s),
        });
    }
    CorrespondenceMap::new(target_mask.image_index(), entries)
}

/// Single-anchor path; agrees with [`build_correspondence`] called with one
/// anchor.
pub fn build_correspondence_single(
    target_features: &Matrix,
    target_mask: &SubjectMask,
    anchor: AnchorView<'_>,
    search: SearchSpace,
) -> Result<CorrespondenceMap> {
    check_target(target_features, target_mask)?;
    let cands = candidates(&anchor, target_features.cols(), search)?;
    let mut entries = Vec::with_capacity(target_mask.len());
    for &p in target_mask.indices() {
        let (t, tn) = (target_features.row(p), row_norm(target_features, p, "target")?);
        let (mut best_patch, mut best) = (cands[0].patch, cosine(t, tn, cands[0].row, cands[0].norm));
        for c in &cands[1..] {
            let s = cosine(t, tn, c.row, c.norm);
            if s > best {
                best = s;
                best_patch = c.patch;
            }
        }
        entries.push(PatchMatch {
            patch: p,
            anchor: anchor.index,
            anchor_patch: best_patch,
            similarity: to_similarity(best),
        });
    }
    CorrespondenceMap::new(target_mask.image_index(), entries)
}
