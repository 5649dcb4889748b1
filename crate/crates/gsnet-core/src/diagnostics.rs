//! Model diagnostics: finite-difference gradient checking, pixel-matrix
//! linear-independence probes, and attention/feature-map export.

use std::path::Path;

use serde::Serialize;

use crate::error::{GsError, Result};
use crate::pgm;
use crate::tensor::Tensor;

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Relative error with the guarded denominator max(|a|,|b|,1e-8).
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    /// Largest relative error over the checked coordinates.
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    /// Flat coordinate index with the largest error.
    pub worst_coordinate: usize,
    pub coordinates_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, threshold: f64) -> bool {
        self.max_rel_error < threshold
    }
}

/// Compare the autodiff gradient of `f` at `x` against central finite
/// differences over every coordinate of `x`. `f` must be scalar-valued.
pub fn grad_check(
    f: impl Fn(&Tensor) -> Result<Tensor>,
    x: &Tensor,
    h: f64,
) -> Result<GradCheckReport> {
    let coords: Vec<usize> = (0..x.numel()).collect();
    grad_check_coords(f, x, h, &coords)
}

/// Like [`grad_check`] but only finite-differences the given coordinates.
/// Used to spot-check large parameter tensors where an exhaustive sweep is
/// prohibitively slow; the autodiff side is still a full backward pass.
pub fn grad_check_coords(
    f: impl Fn(&Tensor) -> Result<Tensor>,
    x: &Tensor,
    h: f64,
    coords: &[usize],
) -> Result<GradCheckReport> {
    if h <= 0.0 {
        return Err(GsError::Input(format!("grad_check step must be > 0, got {h}")));
    }
    let probe = x.requires_grad_(true);
    let loss = f(&probe)?;
    if loss.numel() != 1 {
        return Err(GsError::Input(format!(
            "grad_check requires a scalar-valued map, got shape {:?}",
            loss.shape()
        )));
    }
    loss.backward()?;
    let analytic = probe
        .grad()
        .ok_or_else(|| GsError::Input("map does not depend on x".to_string()))?;

    let base = x.to_vec();
    let shape = x.shape().to_vec();
    let eval = |data: Vec<f64>| -> Result<f64> {
        let t = Tensor::from_vec(data, &shape)?;
        let out = crate::tensor::no_grad(|| f(&t));
        Ok(out?.item())
    };

    let mut max_rel = 0.0;
    let mut sum_rel = 0.0;
    let mut worst = 0;
    for &i in coords {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let rel = relative_error(analytic[i], fd);
        sum_rel += rel;
        if rel > max_rel {
            max_rel = rel;
            worst = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        mean_rel_error: sum_rel / coords.len().max(1) as f64,
        worst_coordinate: worst,
        coordinates_checked: coords.len(),
    })
}

/// Per-channel log-determinant report for one [B,C,H,W] feature map.
#[derive(Debug, Clone, Serialize)]
pub struct IndependenceReport {
    /// log|det A| per (sample, channel) slice; None marks exact singularity.
    pub log_abs_det: Vec<Option<f64>>,
    /// true where the slice is singular (determinant exactly zero)
    pub singular: Vec<bool>,
    /// matrix dimension the determinant was taken over
    pub matrix_dim: usize,
    /// identifies the probed tensor for the report consumer
    pub input_id: String,
    pub mean_log_abs_det: Option<f64>,
}

/// For each sample/channel slice A[H,W]: log|det A| when square, else
/// (1/2)·log det(AᵀA + eps·I) with eps = 1e-12.
pub fn independence_probe(feat: &Tensor, input_id: &str) -> Result<IndependenceReport> {
    let s = feat.shape();
    if s.len() != 4 {
        return Err(GsError::Dim(format!(
            "independence_probe expects [B,C,H,W], got {s:?}"
        )));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let data = feat.data();
    let mut logs = Vec::with_capacity(b * c);
    let mut singular = Vec::with_capacity(b * c);
    for slice in 0..b * c {
        let a = &data[slice * h * w..(slice + 1) * h * w];
        let v = if h == w {
            log_abs_det(a, h)
        } else {
            gram_log_abs_det(a, h, w)
        };
        singular.push(v.is_none());
        logs.push(v);
    }
    let finite: Vec<f64> = logs.iter().flatten().copied().collect();
    let mean = if finite.is_empty() {
        None
    } else {
        Some(finite.iter().sum::<f64>() / finite.len() as f64)
    };
    Ok(IndependenceReport {
        log_abs_det: logs,
        singular,
        matrix_dim: if h == w { h } else { w },
        input_id: input_id.to_string(),
        mean_log_abs_det: mean,
    })
}

/// log|det A| by LU with partial pivoting; None for an exactly singular A.
pub fn log_abs_det(a: &[f64], n: usize) -> Option<f64> {
    assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    let mut log_det = 0.0;
    for col in 0..n {
        let mut pivot_row = col;
        let mut pivot_val = m[col * n + col].abs();
        for r in col + 1..n {
            let v = m[r * n + col].abs();
            if v > pivot_val {
                pivot_val = v;
                pivot_row = r;
            }
        }
        if pivot_val == 0.0 {
            return None;
        }
        if pivot_row != col {
            for k in 0..n {
                m.swap(col * n + k, pivot_row * n + k);
            }
        }
        let pivot = m[col * n + col];
        log_det += pivot.abs().ln();
        for r in col + 1..n {
            let factor = m[r * n + col] / pivot;
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                m[r * n + k] -= factor * m[col * n + k];
            }
        }
    }
    Some(log_det)
}

/// (1/2)·log det(AᵀA + eps·I) for a rectangular A[h,w].
fn gram_log_abs_det(a: &[f64], h: usize, w: usize) -> Option<f64> {
    const EPS: f64 = 1e-12;
    let mut gram = vec![0.0; w * w];
    for i in 0..w {
        for j in 0..w {
            let mut s = 0.0;
            for r in 0..h {
                s += a[r * w + i] * a[r * w + j];
            }
            gram[i * w + j] = s;
        }
    }
    for i in 0..w {
        gram[i * w + i] += EPS;
    }
    log_abs_det(&gram, w).map(|l| 0.5 * l)
}

/// Min-max normalize a nonnegative map to [0,1] (constant maps go to 0.5)
/// and write it as an 8-bit PGM.
pub fn export_attention_map(weights: &Tensor, path: &Path) -> Result<()> {
    let s = weights.shape();
    if s.len() != 2 {
        return Err(GsError::Dim(format!(
            "export_attention_map expects a [H,W] map, got {s:?}"
        )));
    }
    let data = weights.data();
    if data.iter().any(|&v| v < 0.0) {
        return Err(GsError::Input(
            "export_attention_map requires nonnegative weights".to_string(),
        ));
    }
    let min = data.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let normalized: Vec<f64> = if range == 0.0 {
        vec![0.5; data.len()]
    } else {
        data.iter().map(|&v| (v - min) / range).collect()
    };
    pgm::write_pgm8(path, &normalized, s[0], s[1])
}
