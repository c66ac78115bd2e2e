//! Category-level shape prior (an auto-decoder over latent codes), latent
//! fitting to partial observations, and reconstruction back into the scene.
//!
//! Instance coordinates live in the box-normalized cube `[-0.5, 0.5]^3`.

use std::fs;
use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{denormalize_instance_point, Obb, Point3, SceneBounds, Vec3};
use crate::losses::{clamp, instance_clamp_loss, instance_clamp_loss_grad};
use crate::mesh::{extract_isosurface, GridSpec, Mesh};
use crate::optim::{Adam, AdamConfig};
use crate::siren::Linear;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InstanceConfig {
    pub latent_dim: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    /// Clamp half-width.
    pub delta: f64,
    /// `1/σ²` of the Gaussian latent prior while training the prior.
    pub inv_sigma2: f64,
    /// `1/σ²` of the latent prior while fitting a single observation. Partial
    /// observations need a tighter prior than training does.
    pub fit_inv_sigma2: f64,
    pub n_shapes: usize,
    pub surface_samples: usize,
    pub space_samples: usize,
    pub epochs: usize,
    pub shapes_per_batch: usize,
    pub points_per_shape: usize,
    pub decoder_lr: f64,
    pub latent_lr: f64,
    pub fit_steps: usize,
    pub fit_lr: f64,
    /// Weight of the bounding-box-corner free-space term during fitting.
    pub free_space_weight: f64,
    pub yaw_search: bool,
    pub grid_res: usize,
}

impl Default for InstanceConfig {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            hidden_width: 512,
            hidden_layers: 8,
            delta: 0.1,
            inv_sigma2: 1e-4,
            fit_inv_sigma2: 1e-2,
            n_shapes: 50,
            surface_samples: 2000,
            space_samples: 500,
            epochs: 200,
            shapes_per_batch: 10,
            points_per_shape: 256,
            decoder_lr: 5e-4,
            latent_lr: 1e-3,
            fit_steps: 400,
            fit_lr: 5e-3,
            free_space_weight: 0.1,
            yaw_search: false,
            grid_res: 64,
        }
    }
}

impl InstanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.hidden_width == 0 || self.hidden_layers == 0 {
            return Err(Error::param("decoder dimensions must be positive"));
        }
        if !(self.delta > 0.0) || !(self.inv_sigma2 >= 0.0) || !(self.fit_inv_sigma2 >= 0.0) {
            return Err(Error::param("need delta > 0 and non-negative latent prior weights"));
        }
        Ok(())
    }
}

/// Rounded box: `|p - c| <= half`, edges rounded by `radius`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundedBox {
    pub center: Point3,
    pub half: Vec3,
    pub radius: f64,
}

impl RoundedBox {
    pub fn sdf(&self, p: &Point3) -> f64 {
        let q = (p - self.center).abs() - self.half.add_scalar(-self.radius);
        let outside = q.map(|v| v.max(0.0)).norm();
        outside + q.max().min(0.0) - self.radius
    }
}

/// Car-like solid: a body slab with a cabin on top.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CarShape {
    pub body: RoundedBox,
    pub cabin: RoundedBox,
}

impl CarShape {
    /// Signed distance (negative inside).
    pub fn sdf(&self, p: &Point3) -> f64 {
        self.body.sdf(p).min(self.cabin.sdf(p))
    }

    pub fn gradient(&self, p: &Point3) -> Vec3 {
        let h = 1e-6;
        Vec3::from_fn(|k, _| {
            let (mut a, mut b) = (*p, *p);
            a[k] += h;
            b[k] -= h;
            (self.sdf(&a) - self.sdf(&b)) / (2.0 * h)
        })
    }

    /// Moves `p` onto the zero level set along the gradient.
    fn project(&self, p: &Point3) -> Option<Point3> {
        let mut q = *p;
        for _ in 0..16 {
            let d = self.sdf(&q);
            if d.abs() < 1e-9 {
                return Some(q);
            }
            let g = self.gradient(&q);
            let n = g.norm();
            if n < 1e-6 {
                return None;
            }
            q -= g * (d / (n * n));
        }
        (self.sdf(&q).abs() < 1e-7).then_some(q)
    }
}

/// Parametric family of car-like shapes inside `[-0.5, 0.5]^3`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticShapeFamily {
    pub seed: u64,
}

impl SyntheticShapeFamily {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn shape(&self, index: usize) -> CarShape {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let body_half = Vec3::new(u(0.42, 0.47), u(0.40, 0.46), u(0.13, 0.2));
        let gap = u(0.03, 0.07);
        let body_z = -0.5 + gap + body_half.z;
        let body = RoundedBox {
            center: Point3::new(0.0, 0.0, body_z),
            half: body_half,
            radius: u(0.03, 0.07),
        };
        let cabin_half = Vec3::new(u(0.18, 0.28), u(0.3, 0.4), u(0.1, 0.16));
        let overlap = 0.04;
        let top = body_z + body_half.z;
        let cabin_z = (top + cabin_half.z - overlap).min(0.47 - cabin_half.z);
        let cabin_x = u(-0.12, 0.06).clamp(-0.46 + cabin_half.x, 0.46 - cabin_half.x);
        let cabin = RoundedBox {
            center: Point3::new(cabin_x, 0.0, cabin_z),
            half: cabin_half,
            radius: u(0.04, 0.09).min(cabin_half.z * 0.9),
        };
        CarShape { body, cabin }
    }
}

/// Training pairs for one shape: jittered surface points and uniform cube
/// points, each with its exact signed distance.
pub fn sample_shape_sdf<R: Rng + ?Sized>(
    shape: &CarShape,
    n_surface: usize,
    n_space: usize,
    rng: &mut R,
) -> (Vec<Point3>, Vec<f64>) {
    let wide = Normal::new(0.0, 0.025).expect("valid std");
    let narrow = Normal::new(0.0, 0.005).expect("valid std");
    let mut points = Vec::with_capacity(n_surface + n_space);
    for s in surface_points(shape, n_surface, rng) {
        let d = if points.len() % 2 == 0 { &narrow } else { &wide };
        let off = Vec3::new(d.sample(rng), d.sample(rng), d.sample(rng));
        points.push(s + off);
    }
    for _ in 0..n_space {
        points.push(Point3::new(
            rng.random_range(-0.5..=0.5),
            rng.random_range(-0.5..=0.5),
            rng.random_range(-0.5..=0.5),
        ));
    }
    let sdf = points.iter().map(|p| shape.sdf(p)).collect();
    (points, sdf)
}

/// Points on the zero level set, by projecting uniform cube samples.
pub fn surface_points<R: Rng + ?Sized>(shape: &CarShape, n: usize, rng: &mut R) -> Vec<Point3> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let p = Point3::new(
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
        );
        if let Some(q) = shape.project(&p) {
            out.push(q);
        }
    }
    out
}

/// ReLU MLP on `z ⊕ p` with a skip connection re-injecting the input at the
/// middle layer and a tanh output.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub latent_dim: usize,
    pub layers: Vec<Linear>,
    /// Layer whose input is `[h, z ⊕ p]`.
    pub skip: Option<usize>,
}

struct DecoderTape {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    out: Array1<f64>,
}

impl Decoder {
    pub fn new(latent_dim: usize, width: usize, hidden_layers: usize, seed: u64) -> Self {
        let d = latent_dim + 3;
        let skip = (hidden_layers >= 2).then_some(hidden_layers / 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (0..=hidden_layers)
            .map(|l| {
                let mut fan_in = if l == 0 { d } else { width };
                if Some(l) == skip {
                    fan_in += d;
                }
                let fan_out = if l == hidden_layers { 1 } else { width };
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut draw = || rng.random_range(-bound..=bound) as f32 as f64;
                Linear {
                    weight: Array2::from_shape_fn((fan_out, fan_in), |_| draw()),
                    bias: Array1::from_shape_fn(fan_out, |_| draw()),
                }
            })
            .collect();
        Self {
            latent_dim,
            layers,
            skip,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.latent_dim + 3
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(Linear::outputs)
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Linear::param_count).sum()
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice().unwrap(), l.bias.as_slice().unwrap()])
            .collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_slice_mut().unwrap(), l.bias.as_slice_mut().unwrap()])
            .collect()
    }

    fn zero_grads(&self) -> Vec<Linear> {
        self.layers
            .iter()
            .map(|l| Linear::zeros(l.inputs(), l.outputs()))
            .collect()
    }

    fn forward(&self, x: &Array2<f64>) -> DecoderTape {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let input = if Some(l) == self.skip {
                concatenate(Axis(1), &[h.view(), x.view()]).expect("matching rows")
            } else {
                h
            };
            let z = input.dot(&layer.weight.t()) + &layer.bias;
            h = z.mapv(|v| v.max(0.0));
            inputs.push(input);
            pre.push(z);
        }
        let out = pre.last().unwrap().column(0).mapv(f64::tanh);
        DecoderTape { inputs, pre, out }
    }

    /// Accumulates parameter gradients for `d_out = dL/dout`; returns `dL/dx`.
    fn backward(&self, tape: &DecoderTape, d_out: &[f64], grads: Option<&mut Vec<Linear>>) -> Array2<f64> {
        let n = d_out.len();
        let mut dx = Array2::zeros((n, self.input_dim()));
        let mut g = Array2::from_shape_fn((n, 1), |(i, _)| d_out[i] * (1.0 - tape.out[i] * tape.out[i]));
        let mut grads = grads;
        for l in (0..self.layers.len()).rev() {
            if let Some(gr) = grads.as_deref_mut() {
                gr[l].weight += &g.t().dot(&tape.inputs[l]);
                gr[l].bias += &g.sum_axis(Axis(0));
            }
            let d_in = g.dot(&self.layers[l].weight);
            if l == 0 {
                dx += &d_in;
                break;
            }
            let hidden = self.layers[l - 1].outputs();
            let dh = if Some(l) == self.skip {
                dx += &d_in.slice(s![.., hidden..]);
                d_in.slice(s![.., ..hidden]).to_owned()
            } else {
                d_in
            };
            g = dh * tape.pre[l - 1].mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        }
        dx
    }

    fn stack(&self, z: &[f64], points: &[Point3]) -> Array2<f64> {
        let l = self.latent_dim;
        Array2::from_shape_fn((points.len(), l + 3), |(i, c)| {
            if c < l {
                z[c]
            } else {
                points[i][c - l]
            }
        })
    }

    /// `f_ε(z, p)` for every point.
    pub fn eval(&self, z: &[f64], points: &[Point3]) -> Vec<f64> {
        let mut out = Vec::with_capacity(points.len());
        for chunk in points.chunks(4096) {
            out.extend(self.forward(&self.stack(z, chunk)).out.iter().copied());
        }
        out
    }
}

/// Decoder plus the latent table learned with it.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapePrior {
    pub decoder: Decoder,
    /// One row per training shape.
    pub latents: Array2<f64>,
    pub delta: f64,
    pub inv_sigma2: f64,
}

impl ShapePrior {
    pub fn latent(&self, i: usize) -> Vec<f64> {
        self.latents.row(i).to_vec()
    }

    /// Order-sensitive digest of every parameter, for change detection.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: f64| {
            for b in v.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        };
        self.decoder.param_slices().iter().for_each(|s| s.iter().for_each(|&v| eat(v)));
        self.latents.iter().for_each(|&v| eat(v));
        eat(self.delta);
        eat(self.inv_sigma2);
        h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorReport {
    pub shapes: usize,
    pub epochs: usize,
    pub final_mean_loss: f64,
    pub final_data_loss: f64,
}

/// Jointly fits decoder and latent table to shapes `0..n_shapes` of `family`.
pub fn train_prior(
    family: &SyntheticShapeFamily,
    config: &InstanceConfig,
    seed: u64,
) -> Result<(ShapePrior, PriorReport)> {
    config.validate()?;
    let n_shapes = config.n_shapes;
    if n_shapes < 2 {
        return Err(Error::param("a shape prior needs at least two training shapes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<(Vec<Point3>, Vec<f64>)> = (0..n_shapes)
        .map(|i| sample_shape_sdf(&family.shape(i), config.surface_samples, config.space_samples, &mut rng))
        .collect();
    let mut decoder = Decoder::new(config.latent_dim, config.hidden_width, config.hidden_layers, seed ^ 0xdec0);
    let init = Normal::new(0.0, 0.01).expect("valid std");
    let mut latents = Array2::from_shape_fn((n_shapes, config.latent_dim), |_| init.sample(&mut rng) as f32 as f64);
    let mut dec_opt = Adam::new(
        AdamConfig {
            learning_rate: config.decoder_lr,
            ..Default::default()
        },
        decoder.param_count(),
    );
    let mut lat_opt = Adam::new(
        AdamConfig {
            learning_rate: config.latent_lr,
            ..Default::default()
        },
        latents.len(),
    );
    let delta = config.delta;
    let per_shape = config.points_per_shape.max(1);
    let mut order: Vec<usize> = (0..n_shapes).collect();
    let mut last = (0.0, 0.0);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut epoch_loss, mut epoch_data, mut batches) = (0.0, 0.0, 0usize);
        for group in order.chunks(config.shapes_per_batch.max(1)) {
            let mut rows: Vec<Vec<f64>> = Vec::new();
            let mut truth = Vec::new();
            let mut owner = Vec::new();
            for &s in group {
                let (pts, sdf) = &data[s];
                let z = latents.row(s);
                for _ in 0..per_shape {
                    let j = rng.random_range(0..pts.len());
                    let mut row = z.to_vec();
                    row.extend(pts[j].iter());
                    rows.push(row);
                    truth.push(sdf[j]);
                    owner.push(s);
                }
            }
            let n = rows.len();
            let x = Array2::from_shape_vec((n, config.latent_dim + 3), rows.concat()).expect("shape");
            let tape = decoder.forward(&x);
            let mut data_loss = 0.0;
            let d_out: Vec<f64> = (0..n)
                .map(|i| {
                    data_loss += instance_clamp_loss(tape.out[i], truth[i], delta) / n as f64;
                    instance_clamp_loss_grad(tape.out[i], truth[i], delta) / n as f64
                })
                .collect();
            let mut grads = decoder.zero_grads();
            let dx = decoder.backward(&tape, &d_out, Some(&mut grads));
            let mut lat_grad = Array2::<f64>::zeros(latents.raw_dim());
            for (i, &s) in owner.iter().enumerate() {
                let mut row = lat_grad.row_mut(s);
                row += &dx.slice(s![i, ..config.latent_dim]);
            }
            let mut reg = 0.0;
            for &s in group {
                let z = latents.row(s);
                reg += config.inv_sigma2 * z.dot(&z) / group.len() as f64;
                let mut row = lat_grad.row_mut(s);
                row.scaled_add(2.0 * config.inv_sigma2 / group.len() as f64, &z);
            }
            let loss = data_loss + reg;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    term: "instance",
                    step: epoch as u64,
                });
            }
            let g: Vec<&[f64]> = grads
                .iter()
                .flat_map(|l| [l.weight.as_slice().unwrap(), l.bias.as_slice().unwrap()])
                .collect();
            dec_opt.step(decoder.param_slices_mut(), g);
            lat_opt.step(
                vec![latents.as_slice_mut().unwrap()],
                vec![lat_grad.as_slice().unwrap()],
            );
            epoch_loss += loss;
            epoch_data += data_loss;
            batches += 1;
        }
        last = (epoch_loss / batches as f64, epoch_data / batches as f64);
    }
    Ok((
        ShapePrior {
            decoder,
            latents,
            delta,
            inv_sigma2: config.inv_sigma2,
        },
        PriorReport {
            shapes: n_shapes,
            epochs: config.epochs,
            final_mean_loss: last.0,
            final_data_loss: last.1,
        },
    ))
}

const PRIOR_MAGIC: &[u8; 4] = b"SEMP";
const PRIOR_VERSION: u32 = 1;

/// Layout (little-endian): magic `SEMP`, `u32` version, `u32` latent dim,
/// `u32` hidden count, one `u32` per hidden width, `u32` skip layer (or
/// `u32::MAX`), `f64` delta, `f64` 1/σ², `u32` latent rows, then an `f32` blob
/// of decoder layers (weight row-major then bias) and the latent table.
pub fn prior_to_bytes(prior: &ShapePrior) -> Vec<u8> {
    let d = &prior.decoder;
    let mut out = Vec::new();
    out.extend_from_slice(PRIOR_MAGIC);
    let hidden = d.hidden_widths();
    let mut header = vec![PRIOR_VERSION, d.latent_dim as u32, hidden.len() as u32];
    header.extend(hidden.iter().map(|&w| w as u32));
    header.push(d.skip.map_or(u32::MAX, |s| s as u32));
    for v in header {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&prior.delta.to_le_bytes());
    out.extend_from_slice(&prior.inv_sigma2.to_le_bytes());
    out.extend_from_slice(&(prior.latents.nrows() as u32).to_le_bytes());
    for s in d.param_slices() {
        for &v in s {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    for &v in &prior.latents {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn prior_from_bytes(bytes: &[u8]) -> Result<ShapePrior> {
    if bytes.len() < 4 || &bytes[..4] != PRIOR_MAGIC {
        return Err(Error::format("not a shape prior file (bad magic)"));
    }
    let mut pos = 4;
    let mut word = || -> Result<[u8; 4]> {
        let w = bytes
            .get(pos..pos + 4)
            .ok_or_else(|| Error::format("shape prior truncated"))?;
        pos += 4;
        Ok(w.try_into().unwrap())
    };
    let version = u32::from_le_bytes(word()?);
    if version != PRIOR_VERSION {
        return Err(Error::format(format!("unsupported prior version {version}")));
    }
    let latent_dim = u32::from_le_bytes(word()?) as usize;
    let n_hidden = u32::from_le_bytes(word()?) as usize;
    if latent_dim == 0 || n_hidden == 0 || n_hidden > 64 {
        return Err(Error::format("implausible prior header"));
    }
    let hidden = (0..n_hidden)
        .map(|_| word().map(|w| u32::from_le_bytes(w) as usize))
        .collect::<Result<Vec<_>>>()?;
    let skip = match u32::from_le_bytes(word()?) {
        u32::MAX => None,
        s if (1..n_hidden + 1).contains(&(s as usize)) => Some(s as usize),
        s => return Err(Error::format(format!("bad skip layer {s}"))),
    };
    let mut double = || -> Result<f64> {
        let (a, b) = (word()?, word()?);
        Ok(f64::from_le_bytes([a, b].concat().try_into().unwrap()))
    };
    let delta = double()?;
    let inv_sigma2 = double()?;
    let rows = u32::from_le_bytes(word()?) as usize;
    let d = latent_dim + 3;
    let mut shapes = Vec::new();
    let mut prev = d;
    for (l, &w) in hidden.iter().chain(std::iter::once(&1)).enumerate() {
        let fan_in = prev + if Some(l) == skip { d } else { 0 };
        shapes.push((w, fan_in));
        prev = w;
    }
    let floats: usize = shapes.iter().map(|(o, i)| o * i + o).sum::<usize>() + rows * latent_dim;
    let header_len = 4 * (3 + n_hidden + 1 + 1) + 16 + 4;
    if bytes.len() != header_len + 4 * floats {
        return Err(Error::format(format!(
            "prior is {} bytes, header implies {}",
            bytes.len(),
            header_len + 4 * floats
        )));
    }
    let mut blob = bytes[header_len..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())));
    let mut take = |n: usize| blob.by_ref().take(n).collect::<Vec<f64>>();
    let layers = shapes
        .iter()
        .map(|&(o, i)| Linear {
            weight: Array2::from_shape_vec((o, i), take(o * i)).unwrap(),
            bias: Array1::from(take(o)),
        })
        .collect();
    let latents = Array2::from_shape_vec((rows, latent_dim), take(rows * latent_dim)).unwrap();
    Ok(ShapePrior {
        decoder: Decoder {
            latent_dim,
            layers,
            skip,
        },
        latents,
        delta,
        inv_sigma2,
    })
}

pub fn save_prior(prior: &ShapePrior, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, prior_to_bytes(prior))?;
    Ok(())
}

pub fn load_prior(path: &Path) -> Result<ShapePrior> {
    let bytes = fs::read(path).map_err(|e| Error::input(path, e.to_string()))?;
    prior_from_bytes(&bytes)
}

/// A partial instance in box-normalized coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceObservation {
    pub points: Vec<Point3>,
    pub obb: Obb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub data_term: f64,
    pub free_space_term: f64,
    pub latent_norm: f64,
    pub final_loss: f64,
    /// Rotation (radians, about z) applied to the observation before fitting.
    pub yaw: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub z: Vec<f64>,
    pub report: FitReport,
}

fn rotate_z(p: &Point3, yaw: f64) -> Point3 {
    let (s, c) = yaw.sin_cos();
    Point3::new(c * p.x - s * p.y, s * p.x + c * p.y, p.z)
}

fn cube_corners() -> Vec<Point3> {
    (0..8)
        .map(|i| {
            let c = |b: usize| if i & (1 << b) != 0 { 0.5 } else { -0.5 };
            Point3::new(c(0), c(1), c(2))
        })
        .collect()
}

fn fit_once(prior: &ShapePrior, points: &[Point3], config: &InstanceConfig, seed: u64) -> Result<FitResult> {
    let dec = &prior.decoder;
    let l = dec.latent_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = Normal::new(0.0, 0.01).expect("valid std");
    let mut z: Vec<f64> = (0..l).map(|_| init.sample(&mut rng)).collect();
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: config.fit_lr,
            ..Default::default()
        },
        l,
    )
    .without_rounding();
    let corners = cube_corners();
    let delta = prior.delta;
    let evaluate = |z: &[f64], want_grad: bool| -> (f64, f64, Vec<f64>) {
        let mut grad = vec![0.0; l];
        let mut terms = [0.0; 2];
        for (t, (pts, target, weight)) in [
            (points, 0.0, 1.0),
            (&corners[..], delta, config.free_space_weight),
        ]
        .into_iter()
        .enumerate()
        {
            if weight == 0.0 || pts.is_empty() {
                continue;
            }
            let n = pts.len() as f64;
            let tape = dec.forward(&dec.stack(z, pts));
            let mut d_out = Vec::with_capacity(pts.len());
            for &o in tape.out.iter() {
                terms[t] += instance_clamp_loss(o, target, delta) / n;
                d_out.push(weight * instance_clamp_loss_grad(o, target, delta) / n);
            }
            if want_grad {
                let dx = dec.backward(&tape, &d_out, None);
                for (g, col) in grad.iter_mut().zip(dx.slice(s![.., ..l]).axis_iter(Axis(1))) {
                    *g += col.sum();
                }
            }
        }
        (terms[0], terms[1], grad)
    };
    for _ in 0..config.fit_steps {
        let (_, _, mut g) = evaluate(&z, true);
        for (gi, zi) in g.iter_mut().zip(&z) {
            *gi += 2.0 * config.fit_inv_sigma2 * zi;
        }
        adam.step(vec![&mut z[..]], vec![&g[..]]);
    }
    let (data, free, _) = evaluate(&z, false);
    let norm2: f64 = z.iter().map(|v| v * v).sum();
    if !(data.is_finite() && norm2.is_finite()) {
        return Err(Error::NonFinite {
            term: "latent fit",
            step: config.fit_steps as u64,
        });
    }
    Ok(FitResult {
        report: FitReport {
            data_term: data,
            free_space_term: free,
            latent_norm: norm2.sqrt(),
            final_loss: data + config.free_space_weight * free + config.fit_inv_sigma2 * norm2,
            yaw: 0.0,
            steps: config.fit_steps,
        },
        z,
    })
}

/// MAP latent code for `points` (box-normalized) under a frozen prior. With
/// `yaw_search`, the observation is also tried rotated by ±10° in 2° steps
/// and the fit with the lowest final loss is kept.
pub fn fit_latent(
    prior: &ShapePrior,
    points: &[Point3],
    config: &InstanceConfig,
    seed: u64,
) -> Result<FitResult> {
    if points.is_empty() {
        return Err(Error::param("cannot fit a latent code to an empty observation"));
    }
    if prior.decoder.latent_dim == 0 {
        return Err(Error::param("prior has no latent dimensions"));
    }
    let yaws: Vec<f64> = if config.yaw_search {
        (-5..=5).map(|k| (2.0 * k as f64).to_radians()).collect()
    } else {
        vec![0.0]
    };
    let mut best: Option<FitResult> = None;
    for yaw in yaws {
        let rotated: Vec<Point3> = points.iter().map(|p| rotate_z(p, yaw)).collect();
        let mut fit = fit_once(prior, &rotated, config, seed)?;
        fit.report.yaw = yaw;
        if best
            .as_ref()
            .is_none_or(|b| fit.report.final_loss < b.report.final_loss)
        {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one yaw"))
}

pub const MIN_GRID_RES: usize = 8;

/// Marching cubes of `f_ε(z, ·)` on a `grid_res³` grid over the instance cube.
pub fn reconstruct_instance(prior: &ShapePrior, z: &[f64], grid_res: usize) -> Result<Mesh> {
    if grid_res < MIN_GRID_RES {
        return Err(Error::param(format!(
            "instance grid resolution must be >= {MIN_GRID_RES}, got {grid_res}"
        )));
    }
    if z.len() != prior.decoder.latent_dim {
        return Err(Error::param("latent code length does not match the prior"));
    }
    let grid = GridSpec::cube(SceneBounds::new(-0.5, 0.5)?, grid_res)?;
    let mesh = extract_isosurface(&grid, |pts: &[Point3]| prior.decoder.eval(z, pts), 0.0, true).mesh;
    if mesh.is_empty() {
        return Err(Error::DegenerateCode);
    }
    Ok(mesh)
}

/// Undoes a fit-time yaw so the mesh lines up with the original observation.
pub fn undo_yaw(mesh: &mut Mesh, yaw: f64) {
    mesh.map_vertices(|p| rotate_z(p, -yaw));
}

/// Maps an instance-cube mesh into world coordinates through the box.
pub fn place_in_scene(mesh: &Mesh, obb: &Obb) -> Mesh {
    let mut out = mesh.clone();
    out.map_vertices(|p| denormalize_instance_point(p, obb));
    out
}

/// Clamped signed distance, exposed for diagnostics.
pub fn clamped(prior: &ShapePrior, z: &[f64], p: &Point3) -> f64 {
    clamp(prior.decoder.eval(z, std::slice::from_ref(p))[0], prior.delta)
}
