//! Frame-level feature post-processing: mean normalization, regression deltas,
//! context splicing and additive noise at a target SNR.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Half-width of the delta regression window.
pub const DELTA_WINDOW: usize = 2;

/// A `T × d` sequence of feature frames, `T ≥ 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    frames: Matrix,
}

impl FeatureSequence {
    pub fn new(frames: Matrix) -> Result<Self> {
        if frames.rows() == 0 {
            return Err(Error::Empty("feature sequence has no frames"));
        }
        if !frames.is_finite() {
            return Err(Error::NonFinite("feature sequence"));
        }
        Ok(FeatureSequence { frames })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.frames.row(t)
    }

    pub fn frames(&self) -> &Matrix {
        &self.frames
    }

    pub fn into_matrix(self) -> Matrix {
        self.frames
    }

    /// Mean squared value over every entry.
    pub fn power(&self) -> f64 {
        let n = self.frames.as_slice().len();
        if n == 0 {
            return 0.0;
        }
        self.frames.sum_squares() / n as f64
    }

    /// Overwrites columns `range` of every frame with `value`.
    pub fn fill_columns(&mut self, range: std::ops::Range<usize>, value: f64) {
        for t in 0..self.len() {
            self.frames.row_mut(t)[range.clone()].fill(value);
        }
    }

    pub fn column_means(&self) -> Vec<f64> {
        let mut means = vec![0.0; self.dim()];
        for row in self.frames.row_iter() {
            for (m, v) in means.iter_mut().zip(row) {
                *m += v;
            }
        }
        let n = self.len() as f64;
        means.iter_mut().for_each(|m| *m /= n);
        means
    }
}

/// Subtracts the per-utterance mean of every dimension.
pub fn mean_normalize(seq: &FeatureSequence) -> FeatureSequence {
    let means = seq.column_means();
    let mut frames = seq.frames.clone();
    for t in 0..frames.rows() {
        for (v, m) in frames.row_mut(t).iter_mut().zip(&means) {
            *v -= m;
        }
    }
    FeatureSequence { frames }
}

fn regression_delta(frames: &Matrix) -> Matrix {
    let (len, dim) = frames.shape();
    let denom: f64 = 2.0 * (1..=DELTA_WINDOW).map(|n| (n * n) as f64).sum::<f64>();
    let mut out = Matrix::zeros(len, dim);
    let last = len - 1;
    for t in 0..len {
        let row = out.row_mut(t);
        for n in 1..=DELTA_WINDOW {
            let ahead = frames.row((t + n).min(last));
            let behind = frames.row(t.saturating_sub(n));
            for ((o, a), b) in row.iter_mut().zip(ahead).zip(behind) {
                *o += n as f64 * (a - b);
            }
        }
        row.iter_mut().for_each(|v| *v /= denom);
    }
    out
}

/// `[static, Δ, ΔΔ]` with regression window ±2 and replicated edge frames.
pub fn append_deltas(seq: &FeatureSequence) -> FeatureSequence {
    let delta = regression_delta(&seq.frames);
    let delta2 = regression_delta(&delta);
    let dim = seq.dim();
    let mut frames = Matrix::zeros(seq.len(), dim * 3);
    for t in 0..seq.len() {
        let row = frames.row_mut(t);
        row[..dim].copy_from_slice(seq.frame(t));
        row[dim..2 * dim].copy_from_slice(delta.row(t));
        row[2 * dim..].copy_from_slice(delta2.row(t));
    }
    FeatureSequence { frames }
}

/// Stacks `left` past and `right` future frames around every frame, oldest first.
pub fn splice(seq: &FeatureSequence, left: usize, right: usize) -> FeatureSequence {
    let (len, dim) = seq.frames.shape();
    let width = left + right + 1;
    let mut frames = Matrix::zeros(len, dim * width);
    for t in 0..len {
        let row = frames.row_mut(t);
        for j in 0..width {
            let src = (t + j).saturating_sub(left).min(len - 1);
            row[j * dim..(j + 1) * dim].copy_from_slice(seq.frame(src));
        }
    }
    FeatureSequence { frames }
}

/// Scale applied to `noise` so that the mixture has the requested SNR, with
/// both powers measured on the mean-normalized sequences.
pub fn noise_scale(clean: &FeatureSequence, noise: &FeatureSequence, snr_db: f64) -> Result<f64> {
    let p_clean = mean_normalize(clean).power();
    let p_noise = mean_normalize(noise).power();
    if p_noise <= 0.0 {
        return Err(Error::ZeroPowerNoise);
    }
    Ok((p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt())
}

/// `clean + α·noise`, using the first `clean.len()` noise frames.
pub fn mix_noise_at_snr(
    clean: &FeatureSequence,
    noise: &FeatureSequence,
    snr_db: f64,
) -> Result<FeatureSequence> {
    if clean.dim() != noise.dim() {
        return Err(Error::DimensionMismatch {
            context: "mix_noise_at_snr",
            expected: clean.dim(),
            found: noise.dim(),
        });
    }
    if noise.len() < clean.len() {
        return Err(Error::InvalidArgument(format!(
            "noise has {} frames but the clean sequence has {}",
            noise.len(),
            clean.len()
        )));
    }
    let noise = truncate(noise, clean.len());
    let alpha = noise_scale(clean, &noise, snr_db)?;
    let mut frames = clean.frames.clone();
    frames.add_scaled(&noise.frames, alpha)?;
    Ok(FeatureSequence { frames })
}

/// First `len` frames (`len ≥ 1`, clamped to the sequence length).
pub fn truncate(seq: &FeatureSequence, len: usize) -> FeatureSequence {
    let len = len.clamp(1, seq.len());
    let dim = seq.dim();
    let data = seq.frames.as_slice()[..len * dim].to_vec();
    FeatureSequence {
        frames: Matrix::from_vec(len, dim, data).expect("slice length matches shape"),
    }
}

/// Per-frame concatenation `[a_t ‖ b_t]`.
pub fn concat(a: &FeatureSequence, b: &FeatureSequence) -> Result<FeatureSequence> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            context: "concat (frame count)",
            expected: a.len(),
            found: b.len(),
        });
    }
    let (da, db) = (a.dim(), b.dim());
    let mut frames = Matrix::zeros(a.len(), da + db);
    for t in 0..a.len() {
        let row = frames.row_mut(t);
        row[..da].copy_from_slice(a.frame(t));
        row[da..].copy_from_slice(b.frame(t));
    }
    Ok(FeatureSequence { frames })
}
