//! Input encodings for the coordinate network.
//!
//! Every encoding produces the feature matrix together with its exact
//! derivative along each input axis, stacked as `[value; d/dx; d/dy; d/dz]`
//! row blocks so the network can propagate spatial tangents alongside values.

use std::f64::consts::PI;

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::Point3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncodingKind {
    /// Random Fourier features with Gaussian frequencies.
    Fourier,
    /// Axis-aligned octave sinusoids plus the raw coordinate.
    Positional,
    /// Raw coordinates.
    None,
}

impl EncodingKind {
    pub(crate) fn tag(self) -> u32 {
        match self {
            EncodingKind::Fourier => 0,
            EncodingKind::Positional => 1,
            EncodingKind::None => 2,
        }
    }

    pub(crate) fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(EncodingKind::Fourier),
            1 => Some(EncodingKind::Positional),
            2 => Some(EncodingKind::None),
            _ => None,
        }
    }
}

/// `γ(p) = [a_j cos(2π b_jᵀp), a_j sin(2π b_jᵀp)]_j`, interleaved per frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierEncoding {
    /// `m x 3` frequency matrix.
    pub frequencies: Array2<f64>,
    pub amplitudes: Vec<f64>,
}

impl FourierEncoding {
    /// Frequencies drawn from `N(0, sigma^2)`, rounded to `f32` so checkpoints
    /// reproduce them exactly.
    pub fn sample(m: usize, sigma: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
        let frequencies =
            Array2::from_shape_fn((m, 3), |_| normal.sample(&mut rng) as f32 as f64);
        Self {
            frequencies,
            amplitudes: vec![1.0; m],
        }
    }

    pub fn from_parts(frequencies: Array2<f64>, amplitudes: Vec<f64>) -> Self {
        assert_eq!(frequencies.ncols(), 3);
        assert_eq!(frequencies.nrows(), amplitudes.len());
        Self {
            frequencies,
            amplitudes,
        }
    }

    pub fn features(&self) -> usize {
        self.frequencies.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Encoding {
    Fourier(FourierEncoding),
    Positional { levels: usize },
    None,
}

impl Encoding {
    pub fn kind(&self) -> EncodingKind {
        match self {
            Encoding::Fourier(_) => EncodingKind::Fourier,
            Encoding::Positional { .. } => EncodingKind::Positional,
            Encoding::None => EncodingKind::None,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Encoding::Fourier(f) => 2 * f.features(),
            Encoding::Positional { levels } => 3 + 6 * levels,
            Encoding::None => 3,
        }
    }

    /// Single-point encoding.
    pub fn encode(&self, p: &Point3) -> Vec<f64> {
        self.encode_batch(std::slice::from_ref(p), false).row(0).to_vec()
    }

    /// Encodes `points`. With `tangents`, the result has `4n` rows: values
    /// followed by the x, y and z derivative blocks.
    pub fn encode_batch(&self, points: &[Point3], tangents: bool) -> Array2<f64> {
        let n = points.len();
        let streams = if tangents { 4 } else { 1 };
        let mut out = Array2::zeros((streams * n, self.dim()));
        match self {
            Encoding::Fourier(enc) => {
                for (j, b) in enc.frequencies.outer_iter().enumerate() {
                    let a = enc.amplitudes[j];
                    for (i, p) in points.iter().enumerate() {
                        let arg = 2.0 * PI * (b[0] * p.x + b[1] * p.y + b[2] * p.z);
                        let (sn, cs) = arg.sin_cos();
                        out[[i, 2 * j]] = a * cs;
                        out[[i, 2 * j + 1]] = a * sn;
                        if tangents {
                            for k in 0..3 {
                                let w = 2.0 * PI * b[k] * a;
                                out[[(k + 1) * n + i, 2 * j]] = -w * sn;
                                out[[(k + 1) * n + i, 2 * j + 1]] = w * cs;
                            }
                        }
                    }
                }
            }
            Encoding::Positional { levels } => {
                for (i, p) in points.iter().enumerate() {
                    for k in 0..3 {
                        out[[i, k]] = p[k];
                        if tangents {
                            out[[(k + 1) * n + i, k]] = 1.0;
                        }
                        for l in 0..*levels {
                            let freq = (1u64 << l) as f64 * PI;
                            let (sn, cs) = (freq * p[k]).sin_cos();
                            let col = 3 + 6 * l + 2 * k;
                            out[[i, col]] = sn;
                            out[[i, col + 1]] = cs;
                            if tangents {
                                out[[(k + 1) * n + i, col]] = freq * cs;
                                out[[(k + 1) * n + i, col + 1]] = -freq * sn;
                            }
                        }
                    }
                }
            }
            Encoding::None => {
                for (i, p) in points.iter().enumerate() {
                    for k in 0..3 {
                        out[[i, k]] = p[k];
                        if tangents {
                            out[[(k + 1) * n + i, k]] = 1.0;
                        }
                    }
                }
            }
        }
        out
    }
}

/// Value rows of a stacked encoding.
pub fn value_block(stacked: &Array2<f64>, n: usize) -> ndarray::ArrayView2<'_, f64> {
    stacked.slice(s![0..n, ..])
}
