use super::Matrix;
use crate::error::{Error, Result};

/// Floor on `σ(x)` when normalizing in [`adain`].
pub const ADAIN_EPS: f64 = 1e-5;

/// Per-channel mean and population standard deviation over the patch axis.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl ChannelStats {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Polynomial `exp` (Cephes `expf` reduction) written so that loops over it
/// vectorize. Inputs below `-87` flush to `exp(-87)`; callers only feed it
/// max-subtracted logits.
#[inline(always)]
pub(crate) fn fast_exp(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    // 1.5 * 2^23: adding and subtracting rounds to the nearest integer.
    const ROUND: f32 = 12_582_912.0;

    let x = x.clamp(-87.0, 88.0);
    let t = x * LOG2E + ROUND;
    let n = t - ROUND;
    // The rounded integer sits in the low mantissa bits of `t`.
    let ni = (t.to_bits() as i32).wrapping_sub(ROUND.to_bits() as i32);
    let r = x - n * LN2_HI - n * LN2_LO;
    let z = r * r;
    let mut p = 1.987_569_1e-4_f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 0.5;
    let y = p * z + r + 1.0;
    let pow2 = f32::from_bits((ni.wrapping_add(127) as u32) << 23);
    y * pow2
}

/// In-place stabilized softmax of one row.
#[inline(always)]
fn softmax_in_place(row: &mut [f32]) {
    let max = lane_max(row);
    for x in row.iter_mut() {
        *x = fast_exp(*x - max);
    }
    let sum: f32 = lane_sum(row);
    let inv = 1.0 / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// Lane count of the fixed-order reductions below: four independent
/// vector accumulators, combined in a fixed order.
const LANES: usize = 32;

/// Maximum of a NaN-free row, vectorizable.
#[inline(always)]
fn lane_max(xs: &[f32]) -> f32 {
    let mut lanes = [f32::NEG_INFINITY; LANES];
    let chunks = xs.chunks_exact(LANES);
    let tail = chunks.remainder();
    for chunk in chunks {
        for l in 0..LANES {
            lanes[l] = if chunk[l] > lanes[l] { chunk[l] } else { lanes[l] };
        }
    }
    lanes
        .into_iter()
        .chain(tail.iter().copied())
        .fold(f32::NEG_INFINITY, |m, x| if x > m { x } else { m })
}

/// Fixed-order dot product over interleaved lanes.
#[inline(always)]
fn lane_dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f32; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut sum = 0.0;
    for l in lanes {
        sum += l;
    }
    for (&x, &y) in ta.iter().zip(tb) {
        sum += x * y;
    }
    sum
}

/// Fixed-order sum over interleaved lanes.
#[inline(always)]
fn lane_sum(xs: &[f32]) -> f32 {
    let mut lanes = [0.0f32; LANES];
    let chunks = xs.chunks_exact(LANES);
    let tail = chunks.remainder();
    for chunk in chunks {
        for l in 0..LANES {
            lanes[l] += chunk[l];
        }
    }
    let mut sum = 0.0;
    for l in lanes {
        sum += l;
    }
    for &x in tail {
        sum += x;
    }
    sum
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(m: &Matrix) -> Result<Matrix> {
    if let Some(row) = m.first_non_finite_row() {
        return Err(Error::NonFinite {
            op: "softmax_rows",
            row,
        });
    }
    let mut out = m.clone();
    if out.cols() == 0 {
        return Ok(out);
    }
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    Ok(out)
}

/// `softmax(Q Kᵀ / √d) V` for a single head.
pub fn scaled_dot_attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    multi_head_attention(q, k, v, 1)
}

/// Attention with `d` split into `heads` contiguous column blocks of width
/// `C = d / heads`; each block is scaled by `1/√C`.
pub fn multi_head_attention(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize) -> Result<Matrix> {
    if q.cols() != k.cols() || k.rows() != v.rows() || v.cols() != q.cols() {
        return Err(Error::ShapeMismatch {
            op: "scaled_dot_attention",
            lhs: vec![q.rows(), q.cols(), k.rows(), k.cols()],
            rhs: vec![v.rows(), v.cols()],
        });
    }
    if k.rows() == 0 {
        return Err(Error::Empty {
            op: "scaled_dot_attention",
        });
    }
    if heads == 0 || q.cols() % heads != 0 {
        return Err(Error::Precondition(format!(
            "{} channels cannot be split into {heads} heads",
            q.cols()
        )));
    }
    for (name, m) in [("q", q), ("k", k), ("v", v)] {
        if let Some(row) = m.first_non_finite_row() {
            log::debug!("non-finite {name} input to attention");
            return Err(Error::NonFinite {
                op: "scaled_dot_attention",
                row,
            });
        }
    }

    let mut out = Matrix::zeros(q.rows(), q.cols());
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        unsafe { attention_avx2(q, k, v, heads, &mut out) };
        return Ok(out);
    }
    attention_kernel(q, k, v, heads, &mut out);
    Ok(out)
}

// Same arithmetic in the same order as the baseline build; no FMA is
// enabled, so results are bitwise identical on either path.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn attention_avx2(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize, out: &mut Matrix) {
    attention_kernel(q, k, v, heads, out);
}

#[inline(always)]
fn attention_kernel(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize, out: &mut Matrix) {
    let d = q.cols();
    let head_dim = d / heads;
    let n_keys = k.rows();
    let scale = 1.0 / (head_dim as f32).sqrt();
    // Keys are regrouped per head into blocks of eight, laid out
    // `[block][channel][lane]`, so scoring runs in registers; values are
    // transposed so each output channel is one dot product over keys.
    let blocks = n_keys / 8;
    let full = blocks * 8;
    let mut keys_b = vec![[0.0f32; 8]; blocks * head_dim];
    let mut values_t = vec![0.0f32; head_dim * n_keys];
    let mut scores = vec![0.0f32; n_keys];
    let mut qs = vec![0.0f32; head_dim];

    for h in 0..heads {
        let c0 = h * head_dim;
        for j in 0..n_keys {
            let krow = &k.row(j)[c0..c0 + head_dim];
            let vrow = &v.row(j)[c0..c0 + head_dim];
            for c in 0..head_dim {
                if j < full {
                    keys_b[(j / 8) * head_dim + c][j % 8] = krow[c];
                }
                values_t[c * n_keys + j] = vrow[c];
            }
        }
        for i in 0..q.rows() {
            for (s, &x) in qs.iter_mut().zip(&q.row(i)[c0..c0 + head_dim]) {
                *s = x * scale;
            }
            score_blocks(&qs, &keys_b, &mut scores[..full]);
            for (j, slot) in scores.iter_mut().enumerate().skip(full) {
                let krow = &k.row(j)[c0..c0 + head_dim];
                let mut acc = 0.0f32;
                for (&qv, &kv) in qs.iter().zip(krow) {
                    acc += qv * kv;
                }
                *slot = acc;
            }
            softmax_in_place(&mut scores);
            let orow = &mut out.row_mut(i)[c0..c0 + head_dim];
            for (c, o) in orow.iter_mut().enumerate() {
                *o = lane_dot(&scores, &values_t[c * n_keys..(c + 1) * n_keys]);
            }
        }
    }
}

/// Scores of eight-key blocks laid out `[block][channel][lane]`.
#[inline(always)]
fn score_blocks(qs: &[f32], keys_b: &[[f32; 8]], scores: &mut [f32]) {
    for (kb, out) in keys_b.chunks_exact(qs.len()).zip(scores.chunks_exact_mut(8)) {
        let mut acc = [0.0f32; 8];
        for (kc, &qv) in kb.iter().zip(qs) {
            for l in 0..8 {
                acc[l] += qv * kc[l];
            }
        }
        out.copy_from_slice(&acc);
    }
}

/// f64 mean and population std per channel, reduced in ascending patch order.
pub(crate) fn stats_f64(x: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = x.rows() as f64;
    let d = x.cols();
    let mut mean = vec![0.0f64; d];
    for row in x.row_iter() {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += f64::from(v);
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0f64; d];
    for row in x.row_iter() {
        for ((acc, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            let dv = f64::from(v) - m;
            *acc += dv * dv;
        }
    }
    let std = var.into_iter().map(|s| (s / n).sqrt()).collect();
    (mean, std)
}

pub fn channel_stats(x: &Matrix) -> Result<ChannelStats> {
    if x.rows() == 0 {
        return Err(Error::Empty { op: "channel_stats" });
    }
    let (mean, std) = stats_f64(x);
    Ok(ChannelStats {
        mean: mean.into_iter().map(|m| m as f32).collect(),
        std: std.into_iter().map(|s| s as f32).collect(),
    })
}

/// Adaptive instance normalization: re-standardizes each channel of `x`
/// to the mean and standard deviation of the same channel of `y`.
///
/// The source deviation is floored as `max(σ(x), ε)`: exact whenever
/// `σ(x) ≥ ε`, and a constant source channel collapses to `μ(y)` instead of
/// dividing by zero.
pub fn adain(x: &Matrix, y: &Matrix) -> Result<Matrix> {
    if x.cols() != y.cols() {
        return Err(Error::ShapeMismatch {
            op: "adain",
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    if x.rows() == 0 || y.rows() == 0 {
        return Err(Error::Empty { op: "adain" });
    }
    let (mx, sx) = stats_f64(x);
    let (my, sy) = stats_f64(y);
    let gain: Vec<f64> = sx.iter().zip(&sy).map(|(&sx, &sy)| sy / sx.max(ADAIN_EPS)).collect();

    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let src = x.row(r);
        let dst = out.row_mut(r);
        for c in 0..src.len() {
            dst[c] = (gain[c] * (f64::from(src[c]) - mx[c]) + my[c]) as f32;
        }
    }
    if let Some(row) = out.first_non_finite_row() {
        return Err(Error::NonFinite { op: "adain", row });
    }
    Ok(out)
}

/// Channel Gram matrix `FᵀF / N`.
pub fn gram_matrix(f: &Matrix) -> Result<Matrix> {
    if f.rows() == 0 {
        return Err(Error::Empty { op: "gram_matrix" });
    }
    let d = f.cols();
    let mut acc = vec![0.0f64; d * d];
    for row in f.row_iter() {
        for a in 0..d {
            let fa = f64::from(row[a]);
            for b in a..d {
                acc[a * d + b] += fa * f64::from(row[b]);
            }
        }
    }
    let n = f.rows() as f64;
    let mut g = Matrix::zeros(d, d);
    for a in 0..d {
        for b in a..d {
            let v = (acc[a * d + b] / n) as f32;
            g.set(a, b, v);
            g.set(b, a, v);
        }
    }
    Ok(g)
}

/// Frobenius distance between the Gram matrices of two feature maps.
pub fn gram_l2(f1: &Matrix, f2: &Matrix) -> Result<f32> {
    if f1.cols() != f2.cols() {
        return Err(Error::ShapeMismatch {
            op: "gram_l2",
            lhs: f1.shape().to_vec(),
            rhs: f2.shape().to_vec(),
        });
    }
    let g1 = gram_matrix(f1)?;
    let g2 = gram_matrix(f2)?;
    let sum: f64 = g1
        .data()
        .iter()
        .zip(g2.data())
        .map(|(&a, &b)| {
            let d = f64::from(a) - f64::from(b);
            d * d
        })
        .sum();
    Ok(sum.sqrt() as f32)
}

/// Stacks matrices with equal column counts top to bottom.
pub fn concat_rows(parts: &[&Matrix]) -> Result<Matrix> {
    let cols = parts.first().map_or(0, |m| m.cols());
    let mut data = Vec::with_capacity(parts.iter().map(|m| m.data().len()).sum());
    let mut rows = 0;
    for m in parts {
        if m.cols() != cols {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                lhs: vec![rows, cols],
                rhs: m.shape().to_vec(),
            });
        }
        data.extend_from_slice(m.data());
        rows += m.rows();
    }
    Matrix::new(rows, cols, data)
}
