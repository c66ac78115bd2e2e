//! Training objectives for the scene field and the instance decoder.
//!
//! Every integral is a Monte-Carlo mean over the sampled point set, so loss
//! magnitudes do not depend on batch size. The per-point helpers also return
//! derivatives with respect to the network outputs; the field module chains
//! those through the network.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::SceneField;
use crate::geometry::{Point3, Vec3};

/// On-surface samples (SDF target 0, with normals and labels) plus
/// off-surface samples.
#[derive(Debug, Clone, Default)]
pub struct TrainBatch {
    pub on_points: Vec<Point3>,
    pub on_normals: Vec<Vec3>,
    pub on_labels: Vec<u32>,
    pub off_points: Vec<Point3>,
}

impl TrainBatch {
    pub fn on_count(&self) -> usize {
        self.on_points.len()
    }

    pub fn off_count(&self) -> usize {
        self.off_points.len()
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.on_normals.len() != self.on_points.len() || self.on_labels.len() != self.on_points.len()
        {
            return Err(Error::param("on-surface points, normals and labels differ in length"));
        }
        if let Some(n) = self.on_normals.iter().find(|n| (n.norm() - 1.0).abs() > 1e-6) {
            return Err(Error::param(format!("normal {n:?} is not unit length")));
        }
        if let Some(l) = self.on_labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::param(format!("label {l} outside [0, {classes})")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_eik: f64,
    pub w_surf: f64,
    pub w_normal: f64,
    pub w_off: f64,
    pub w_seg: f64,
    /// Direct `|F - off_target|` regression on off-surface points; off by default.
    pub w_off_reg: f64,
    pub alpha: f64,
    pub off_target: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_eik: 50.0,
            w_surf: 3000.0,
            w_normal: 100.0,
            w_off: 100.0,
            w_seg: 100.0,
            w_off_reg: 0.0,
            alpha: 100.0,
            off_target: -1.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            w_eik: 0.0,
            w_surf: 0.0,
            w_normal: 0.0,
            w_off: 0.0,
            w_seg: 0.0,
            w_off_reg: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ws = [
            self.w_eik,
            self.w_surf,
            self.w_normal,
            self.w_off,
            self.w_seg,
            self.w_off_reg,
        ];
        if ws.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::param("loss weights must be finite and non-negative"));
        }
        if !(self.alpha >= 1.0 && self.alpha.is_finite()) {
            return Err(Error::param(format!("alpha must be >= 1, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Weighted loss components of one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub eikonal: f64,
    pub surface: f64,
    pub normal: f64,
    pub off_surface: f64,
    pub off_regression: f64,
    pub semantic: f64,
}

impl LossBreakdown {
    /// The geometry part (`L_sdf`).
    pub fn sdf(&self) -> f64 {
        self.eikonal + self.surface + self.normal
    }

    /// The off-surface part (`L_off`).
    pub fn off(&self) -> f64 {
        self.off_surface + self.off_regression
    }

    pub fn total(&self) -> f64 {
        self.sdf() + self.off() + self.semantic
    }

    /// Term-wise mean; zero for an empty slice.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        if items.is_empty() {
            return LossBreakdown::default();
        }
        let n = items.len() as f64;
        let sum = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        LossBreakdown {
            eikonal: sum(|l| l.eikonal),
            surface: sum(|l| l.surface),
            normal: sum(|l| l.normal),
            off_surface: sum(|l| l.off_surface),
            off_regression: sum(|l| l.off_regression),
            semantic: sum(|l| l.semantic),
        }
    }

    pub(crate) fn check_finite(&self, step: u64) -> Result<()> {
        let terms = [
            ("eikonal", self.eikonal),
            ("surface", self.surface),
            ("normal", self.normal),
            ("off_surface", self.off_surface),
            ("off_regression", self.off_regression),
            ("semantic", self.semantic),
        ];
        match terms.iter().find(|(_, v)| !v.is_finite()) {
            Some((term, _)) => Err(Error::NonFinite { term, step }),
            None => Ok(()),
        }
    }
}

/// `| |g| - 1 |`.
pub fn eikonal_residual(g: &Vec3) -> f64 {
    (g.norm() - 1.0).abs()
}

fn eikonal_residual_grad(g: &Vec3) -> Vec3 {
    let norm = g.norm();
    if norm == 0.0 || norm == 1.0 {
        return Vec3::zeros();
    }
    g * ((norm - 1.0).signum() / norm)
}

/// `ψ = exp(-α |F|)`.
pub fn off_surface_psi(s: f64, alpha: f64) -> f64 {
    (-alpha * s.abs()).exp()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Numerically stable softmax of one logit row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `-log pr[label]` from probabilities.
pub fn cross_entropy_from_probs(probs: &[f64], label: u32) -> f64 {
    -probs[label as usize].ln()
}

fn cross_entropy_with_grad(logits: &[f64], label: u32, grad: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
    let log_z = max + sum.ln();
    for (g, &l) in grad.iter_mut().zip(logits) {
        *g = (l - log_z).exp();
    }
    grad[label as usize] -= 1.0;
    log_z - logits[label as usize]
}

/// `min(δ, max(-δ, x))`.
pub fn clamp(x: f64, delta: f64) -> f64 {
    x.max(-delta).min(delta)
}

/// `|clamp(pred, δ) - clamp(truth, δ)|`.
pub fn instance_clamp_loss(pred: f64, truth: f64, delta: f64) -> f64 {
    (clamp(pred, delta) - clamp(truth, delta)).abs()
}

/// Derivative of [`instance_clamp_loss`] with respect to `pred`.
pub fn instance_clamp_loss_grad(pred: f64, truth: f64, delta: f64) -> f64 {
    if pred.abs() >= delta {
        return 0.0;
    }
    sign(pred - clamp(truth, delta))
}

/// Normalizers for one batch: the Eikonal term averages over every point,
/// surface and semantic terms over on-surface points, ψ over off-surface points.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BatchCounts {
    pub on: usize,
    pub off: usize,
}

impl BatchCounts {
    fn all(&self) -> f64 {
        (self.on + self.off) as f64
    }
}

/// `1 - cos(∇F, n)`; 1 where the gradient vanishes.
pub fn normal_residual(g: &Vec3, n: &Vec3) -> f64 {
    let len = g.norm();
    if len < 1e-12 {
        return 1.0;
    }
    1.0 - g.dot(n) / len
}

pub fn normal_residual_grad(g: &Vec3, n: &Vec3) -> Vec3 {
    let len = g.norm();
    if len < 1e-12 {
        return Vec3::zeros();
    }
    -(n / len - g * (g.dot(n) / (len * len * len)))
}

/// Adds one on-surface chunk's weighted contributions to `acc` and returns
/// `(dL/ds, dL/d∇s)` per point.
pub(crate) fn on_surface_chunk(
    s: &[f64],
    g: &[Vec3],
    normals: &[Vec3],
    w: &LossWeights,
    counts: BatchCounts,
    acc: &mut LossBreakdown,
) -> (Vec<f64>, Vec<Vec3>) {
    let n_on = counts.on as f64;
    let n_all = counts.all();
    let mut ds = Vec::with_capacity(s.len());
    let mut dg = Vec::with_capacity(s.len());
    for i in 0..s.len() {
        acc.eikonal += w.w_eik * eikonal_residual(&g[i]) / n_all;
        acc.surface += w.w_surf * s[i].abs() / n_on;
        acc.normal += w.w_normal * normal_residual(&g[i], &normals[i]) / n_on;
        ds.push(w.w_surf * sign(s[i]) / n_on);
        dg.push(
            eikonal_residual_grad(&g[i]) * (w.w_eik / n_all)
                + normal_residual_grad(&g[i], &normals[i]) * (w.w_normal / n_on),
        );
    }
    (ds, dg)
}

pub(crate) fn off_surface_chunk(
    s: &[f64],
    g: &[Vec3],
    w: &LossWeights,
    counts: BatchCounts,
    acc: &mut LossBreakdown,
) -> (Vec<f64>, Vec<Vec3>) {
    let n_off = counts.off as f64;
    let n_all = counts.all();
    let mut ds = Vec::with_capacity(s.len());
    let mut dg = Vec::with_capacity(s.len());
    for i in 0..s.len() {
        let psi = off_surface_psi(s[i], w.alpha);
        acc.eikonal += w.w_eik * eikonal_residual(&g[i]) / n_all;
        acc.off_surface += w.w_off * psi / n_off;
        let mut d = -w.w_off * w.alpha * sign(s[i]) * psi / n_off;
        if w.w_off_reg > 0.0 {
            acc.off_regression += w.w_off_reg * (s[i] - w.off_target).abs() / n_off;
            d += w.w_off_reg * sign(s[i] - w.off_target) / n_off;
        }
        ds.push(d);
        dg.push(eikonal_residual_grad(&g[i]) * (w.w_eik / n_all));
    }
    (ds, dg)
}

/// Weighted cross-entropy of a chunk of logits; returns `dL/dlogits`.
pub(crate) fn semantic_chunk(
    logits: ArrayView2<f64>,
    labels: &[u32],
    w_seg: f64,
    counts: BatchCounts,
    acc: &mut LossBreakdown,
) -> Array2<f64> {
    let n_on = counts.on as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    for (i, row) in logits.outer_iter().enumerate() {
        let row = row.to_vec();
        let mut g = vec![0.0; row.len()];
        acc.semantic += w_seg * cross_entropy_with_grad(&row, labels[i], &mut g) / n_on;
        for (c, v) in g.into_iter().enumerate() {
            grad[[i, c]] = v * w_seg / n_on;
        }
    }
    grad
}

/// Eikonal, surface and normal terms of `batch` under `field`.
pub fn sdf_loss(field: &SceneField, batch: &TrainBatch, weights: &LossWeights) -> LossBreakdown {
    let counts = BatchCounts {
        on: batch.on_count(),
        off: batch.off_count(),
    };
    let mut acc = LossBreakdown::default();
    if counts.on > 0 {
        let (s, g) = field.eval_sdf_grad_batch(&batch.on_points);
        on_surface_chunk(&s, &g, &batch.on_normals, weights, counts, &mut acc);
    }
    if counts.off > 0 {
        let (_, g) = field.eval_sdf_grad_batch(&batch.off_points);
        for gi in &g {
            acc.eikonal += weights.w_eik * eikonal_residual(gi) / counts.all();
        }
    }
    LossBreakdown {
        off_surface: 0.0,
        off_regression: 0.0,
        semantic: 0.0,
        ..acc
    }
}

/// `w_off · mean ψ(F(p))` over `off_points`.
pub fn off_surface_penalty(field: &SceneField, off_points: &[Point3], alpha: f64, w_off: f64) -> f64 {
    if off_points.is_empty() {
        return 0.0;
    }
    let s = field.eval_sdf_batch(off_points);
    w_off * s.iter().map(|&v| off_surface_psi(v, alpha)).sum::<f64>() / s.len() as f64
}

/// Mean negative log-likelihood of the true class.
pub fn semantic_loss(field: &SceneField, on_points: &[Point3], labels: &[u32]) -> Result<f64> {
    if on_points.len() != labels.len() {
        return Err(Error::param("points and labels differ in length"));
    }
    if let Some(l) = labels.iter().find(|&&l| l as usize >= field.classes()) {
        return Err(Error::param(format!("label {l} outside [0, {})", field.classes())));
    }
    if on_points.is_empty() {
        return Ok(0.0);
    }
    let probs = field.eval_semantic_batch(on_points);
    Ok(probs
        .iter()
        .zip(labels)
        .map(|(p, &l)| cross_entropy_from_probs(p, l))
        .sum::<f64>()
        / labels.len() as f64)
}

/// `L_sdf + L_off + L_seg` with every component reported.
pub fn total_loss(field: &SceneField, batch: &TrainBatch, weights: &LossWeights) -> Result<LossBreakdown> {
    batch.validate(field.classes())?;
    weights.validate()?;
    let counts = BatchCounts {
        on: batch.on_count(),
        off: batch.off_count(),
    };
    let mut acc = LossBreakdown::default();
    if counts.on > 0 {
        let (s, g) = field.eval_sdf_grad_batch(&batch.on_points);
        on_surface_chunk(&s, &g, &batch.on_normals, weights, counts, &mut acc);
        let logits = field.eval_logits_batch(&batch.on_points);
        semantic_chunk(logits.view(), &batch.on_labels, weights.w_seg, counts, &mut acc);
    }
    if counts.off > 0 {
        let (s, g) = field.eval_sdf_grad_batch(&batch.off_points);
        off_surface_chunk(&s, &g, weights, counts, &mut acc);
    }
    Ok(acc)
}
