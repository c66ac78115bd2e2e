//! The scene field: a shared input encoding feeding a sine-MLP geometry head
//! (signed distance) and a parallel sine-MLP semantic head (class logits).

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::encoding::{Encoding, EncodingKind, FourierEncoding};
use crate::error::{Error, Result};
use crate::geometry::{Point3, Vec3};
use crate::losses::{self, BatchCounts, LossBreakdown, LossWeights, TrainBatch};
use crate::optim::Adam;
use crate::siren::{FirstLayerInit, SineMlp};

/// Points per forward/backward chunk; bounds activation memory.
pub const CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    pub encoding: EncodingKind,
    /// Number of Fourier frequencies `m` (the encoding has `2m` features).
    pub fourier_features: usize,
    /// Standard deviation of the Gaussian frequency matrix.
    pub sigma_enc: f64,
    pub positional_levels: usize,
    pub hidden: Vec<usize>,
    pub omega0: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            encoding: EncodingKind::Fourier,
            fourier_features: 128,
            sigma_enc: 8.0,
            positional_levels: 10,
            hidden: vec![256; 4],
            omega0: 30.0,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::param("hidden widths must be non-empty and positive"));
        }
        if self.encoding == EncodingKind::Fourier
            && (self.fourier_features == 0 || !(self.sigma_enc >= 0.0))
        {
            return Err(Error::param("fourier encoding needs m >= 1 and sigma_enc >= 0"));
        }
        if !(self.omega0 > 0.0 && self.omega0.is_finite()) {
            return Err(Error::param("omega0 must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneField {
    pub(crate) encoding: Encoding,
    pub(crate) sigma_enc: f64,
    pub(crate) geometry: SineMlp,
    pub(crate) semantic: SineMlp,
}

/// Parameter gradients, shaped like the two heads.
#[derive(Debug, Clone)]
pub struct FieldGrads {
    pub geometry: SineMlp,
    pub semantic: SineMlp,
}

impl FieldGrads {
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.geometry.param_slices().concat();
        v.extend(self.semantic.param_slices().concat());
        v
    }

    pub fn scaled(mut self, c: f64) -> Self {
        self.geometry.scale(c);
        self.semantic.scale(c);
        self
    }
}

impl SceneField {
    pub fn new(config: &FieldConfig, classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if classes == 0 {
            return Err(Error::param("need at least one semantic class"));
        }
        let encoding = match config.encoding {
            EncodingKind::Fourier => Encoding::Fourier(FourierEncoding::sample(
                config.fourier_features,
                config.sigma_enc,
                seed,
            )),
            EncodingKind::Positional => Encoding::Positional {
                levels: config.positional_levels,
            },
            EncodingKind::None => Encoding::None,
        };
        let first = match config.encoding {
            EncodingKind::None => FirstLayerInit::Coordinate,
            _ => FirstLayerInit::Hidden,
        };
        let widths = |out: usize| {
            let mut w = vec![encoding.dim()];
            w.extend(&config.hidden);
            w.push(out);
            w
        };
        let omega0 = config.omega0 as f32 as f64;
        let geometry = SineMlp::new(&widths(1), omega0, first, seed.wrapping_add(1));
        let semantic = SineMlp::new(&widths(classes), omega0, first, seed.wrapping_add(2));
        Ok(Self {
            encoding,
            sigma_enc: if config.encoding == EncodingKind::Fourier {
                config.sigma_enc as f32 as f64
            } else {
                0.0
            },
            geometry,
            semantic,
        })
    }

    pub fn classes(&self) -> usize {
        self.semantic.outputs()
    }

    pub fn encoding(&self) -> &Encoding {
        &self.encoding
    }

    pub fn geometry_head(&self) -> &SineMlp {
        &self.geometry
    }

    pub fn geometry_head_mut(&mut self) -> &mut SineMlp {
        &mut self.geometry
    }

    pub fn semantic_head(&self) -> &SineMlp {
        &self.semantic
    }

    pub fn semantic_head_mut(&mut self) -> &mut SineMlp {
        &mut self.semantic
    }

    pub fn param_count(&self) -> usize {
        self.geometry.param_count() + self.semantic.param_count()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut v = self.geometry.param_slices().concat();
        v.extend(self.semantic.param_slices().concat());
        v
    }

    pub fn zero_grads(&self) -> FieldGrads {
        FieldGrads {
            geometry: self.geometry.zeros_like(),
            semantic: self.semantic.zeros_like(),
        }
    }

    pub fn eval_sdf(&self, p: &Point3) -> f64 {
        self.eval_sdf_batch(std::slice::from_ref(p))[0]
    }

    pub fn eval_sdf_batch(&self, points: &[Point3]) -> Vec<f64> {
        let mut out = Vec::with_capacity(points.len());
        for chunk in points.chunks(CHUNK) {
            let x = self.encoding.encode_batch(chunk, false);
            let y = self.geometry.forward_values(x.view());
            out.extend(y.column(0).iter().copied());
        }
        out
    }

    /// Signed distance and its exact spatial gradient.
    pub fn eval_sdf_grad(&self, p: &Point3) -> (f64, Vec3) {
        let (s, g) = self.eval_sdf_grad_batch(std::slice::from_ref(p));
        (s[0], g[0])
    }

    pub fn eval_sdf_grad_batch(&self, points: &[Point3]) -> (Vec<f64>, Vec<Vec3>) {
        let mut values = Vec::with_capacity(points.len());
        let mut grads = Vec::with_capacity(points.len());
        for chunk in points.chunks(CHUNK) {
            let n = chunk.len();
            let x = self.encoding.encode_batch(chunk, true);
            let (y, _) = self.geometry.forward(x, 4);
            for i in 0..n {
                values.push(y[[i, 0]]);
                grads.push(Vec3::new(y[[n + i, 0]], y[[2 * n + i, 0]], y[[3 * n + i, 0]]));
            }
        }
        (values, grads)
    }

    pub fn eval_logits_batch(&self, points: &[Point3]) -> Array2<f64> {
        let mut out = Array2::zeros((points.len(), self.classes()));
        for (c, chunk) in points.chunks(CHUNK).enumerate() {
            let x = self.encoding.encode_batch(chunk, false);
            let y = self.semantic.forward_values(x.view());
            out.slice_mut(s![c * CHUNK..c * CHUNK + chunk.len(), ..])
                .assign(&y);
        }
        out
    }

    /// Class probabilities (softmax of the semantic head).
    pub fn eval_semantic(&self, p: &Point3) -> Vec<f64> {
        self.eval_semantic_batch(std::slice::from_ref(p)).remove(0)
    }

    pub fn eval_semantic_batch(&self, points: &[Point3]) -> Vec<Vec<f64>> {
        self.eval_logits_batch(points)
            .outer_iter()
            .map(|row| losses::softmax(row.as_slice().expect("row-major logits")))
            .collect()
    }

    pub fn predict_labels(&self, points: &[Point3]) -> Vec<u32> {
        self.eval_logits_batch(points)
            .outer_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                    .map_or(0, |(i, _)| i as u32)
            })
            .collect()
    }

    /// Gradients of the full training objective with respect to every
    /// parameter, including the dependence of the Eikonal and normal terms on
    /// `∇_p F`.
    pub fn loss_gradients(
        &self,
        batch: &TrainBatch,
        weights: &LossWeights,
    ) -> Result<(FieldGrads, LossBreakdown)> {
        batch.validate(self.classes())?;
        weights.validate()?;
        let counts = BatchCounts {
            on: batch.on_count(),
            off: batch.off_count(),
        };
        let mut grads = self.zero_grads();
        let mut acc = LossBreakdown::default();

        for (c, chunk) in batch.on_points.chunks(CHUNK).enumerate() {
            let range = c * CHUNK..c * CHUNK + chunk.len();
            let n = chunk.len();
            let x = self.encoding.encode_batch(chunk, true);
            if weights.w_seg > 0.0 {
                let xv = x.slice(s![0..n, ..]).to_owned();
                let (logits, tape) = self.semantic.forward(xv, 1);
                let d = losses::semantic_chunk(
                    logits.view(),
                    &batch.on_labels[range.clone()],
                    weights.w_seg,
                    counts,
                    &mut acc,
                );
                self.semantic.backward(&tape, d, &mut grads.semantic);
            }
            let (y, tape) = self.geometry.forward(x, 4);
            let (sv, gv) = split_outputs(&y, n);
            let (ds, dg) = losses::on_surface_chunk(
                &sv,
                &gv,
                &batch.on_normals[range],
                weights,
                counts,
                &mut acc,
            );
            self.geometry
                .backward(&tape, stack_adjoints(&ds, &dg), &mut grads.geometry);
        }

        for chunk in batch.off_points.chunks(CHUNK) {
            let n = chunk.len();
            let x = self.encoding.encode_batch(chunk, true);
            let (y, tape) = self.geometry.forward(x, 4);
            let (sv, gv) = split_outputs(&y, n);
            let (ds, dg) = losses::off_surface_chunk(&sv, &gv, weights, counts, &mut acc);
            self.geometry
                .backward(&tape, stack_adjoints(&ds, &dg), &mut grads.geometry);
        }

        acc.check_finite(0)?;
        Ok((grads, acc))
    }

    /// One optimizer update with `grads`.
    pub fn apply_gradients(&mut self, adam: &mut Adam, grads: &FieldGrads) {
        let mut params = self.geometry.param_slices_mut();
        params.extend(self.semantic.param_slices_mut());
        let mut g = grads.geometry.param_slices();
        g.extend(grads.semantic.param_slices());
        adam.step(params, g);
    }
}

fn split_outputs(y: &Array2<f64>, n: usize) -> (Vec<f64>, Vec<Vec3>) {
    let s = (0..n).map(|i| y[[i, 0]]).collect();
    let g = (0..n)
        .map(|i| Vec3::new(y[[n + i, 0]], y[[2 * n + i, 0]], y[[3 * n + i, 0]]))
        .collect();
    (s, g)
}

fn stack_adjoints(ds: &[f64], dg: &[Vec3]) -> Array2<f64> {
    let n = ds.len();
    let mut d = Array2::zeros((4 * n, 1));
    for i in 0..n {
        d[[i, 0]] = ds[i];
        for k in 0..3 {
            d[[(k + 1) * n + i, 0]] = dg[i][k];
        }
    }
    d
}
