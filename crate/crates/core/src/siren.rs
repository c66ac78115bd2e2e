//! Sine-activated MLP with forward spatial tangents and reverse-mode
//! gradients through both values and tangents.
//!
//! Activations are carried as stacked row blocks: block 0 holds the values,
//! blocks 1..=3 hold the derivatives of those values along x, y and z. A
//! hidden layer computes `z = W h + b`, `h' = sin(ω z)` on the value block and
//! `dz = W dh`, `dh' = ω cos(ω z) ⊙ dz` on the tangent blocks, so one GEMM
//! covers all blocks. The backward pass differentiates that whole system,
//! which is what losses on `∇_p F` need.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dense layer, `weight` is `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// First-layer init scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FirstLayerInit {
    /// `U(±1/fan_in)`, for raw coordinate inputs.
    Coordinate,
    /// Same as the hidden layers, for already-periodic features.
    Hidden,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SineMlp {
    pub layers: Vec<Linear>,
    pub omega0: f64,
}

/// Cached activations of one forward pass.
pub struct Tape {
    rows: usize,
    streams: usize,
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    sin: Vec<Array2<f64>>,
    cos: Vec<Array2<f64>>,
}

impl SineMlp {
    /// `widths = [in, hidden.., out]`. Parameters are rounded to `f32`.
    pub fn new(widths: &[usize], omega0: f64, first: FirstLayerInit, seed: u64) -> Self {
        assert!(widths.len() >= 2, "need at least input and output widths");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = if i == 0 && first == FirstLayerInit::Coordinate {
                    1.0 / fan_in as f64
                } else {
                    (6.0 / fan_in as f64).sqrt() / omega0
                };
                let bias_bound = 1.0 / (fan_in as f64).sqrt();
                Linear {
                    weight: Array2::from_shape_fn((fan_out, fan_in), |_| {
                        rng.random_range(-bound..=bound) as f32 as f64
                    }),
                    bias: Array1::from_shape_fn(fan_out, |_| {
                        rng.random_range(-bias_bound..=bias_bound) as f32 as f64
                    }),
                }
            })
            .collect();
        Self { layers, omega0 }
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].inputs()];
        w.extend(self.layers.iter().map(Linear::outputs));
        w
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map_or(0, Linear::outputs)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Linear::param_count).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Linear::zeros(l.inputs(), l.outputs()))
                .collect(),
            omega0: self.omega0,
        }
    }

    /// Parameters in storage order: per layer, weight (row-major) then bias.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.weight.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weight.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn scale(&mut self, c: f64) {
        for l in &mut self.layers {
            l.weight *= c;
            l.bias *= c;
        }
    }

    pub fn add_assign(&mut self, other: &SineMlp) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    /// Value-only evaluation of `x` (`n x in`).
    pub fn forward_values(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut h = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight.t());
            z += &layer.bias;
            if i < last {
                let w0 = self.omega0;
                z.mapv_inplace(|v| (w0 * v).sin());
            }
            h = z;
        }
        h
    }

    /// Forward pass over `streams` stacked row blocks of `rows` rows each.
    /// Block 0 is the value block; the rest are tangents.
    pub fn forward(&self, x: Array2<f64>, streams: usize) -> (Array2<f64>, Tape) {
        assert_eq!(x.nrows() % streams, 0);
        let rows = x.nrows() / streams;
        let last = self.layers.len() - 1;
        let mut tape = Tape {
            rows,
            streams,
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(last),
            sin: Vec::with_capacity(last),
            cos: Vec::with_capacity(last),
        };
        let w0 = self.omega0;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight.t());
            {
                let mut zv = z.slice_mut(s![0..rows, ..]);
                zv += &layer.bias;
            }
            tape.inputs.push(h);
            if i == last {
                h = z;
                break;
            }
            let zv = z.slice(s![0..rows, ..]);
            let sn = zv.mapv(|v| (w0 * v).sin());
            let cs = zv.mapv(|v| w0 * (w0 * v).cos());
            let mut next = Array2::zeros(z.raw_dim());
            next.slice_mut(s![0..rows, ..]).assign(&sn);
            for k in 1..streams {
                let blk = s![k * rows..(k + 1) * rows, ..];
                Zip::from(next.slice_mut(blk))
                    .and(z.slice(blk))
                    .and(&cs)
                    .for_each(|o, &dz, &c| *o = c * dz);
            }
            tape.pre.push(z);
            tape.sin.push(sn);
            tape.cos.push(cs);
            h = next;
        }
        (h, tape)
    }

    /// Accumulates parameter gradients into `grads` given the adjoint of the
    /// stacked output.
    pub fn backward(&self, tape: &Tape, d_out: Array2<f64>, grads: &mut SineMlp) {
        self.backward_impl(tape, d_out, grads, false);
    }

    /// As [`SineMlp::backward`], also returning the adjoint of the stacked input.
    pub fn backward_with_input(
        &self,
        tape: &Tape,
        d_out: Array2<f64>,
        grads: &mut SineMlp,
    ) -> Array2<f64> {
        self.backward_impl(tape, d_out, grads, true)
            .expect("input adjoint requested")
    }

    fn backward_impl(
        &self,
        tape: &Tape,
        d_out: Array2<f64>,
        grads: &mut SineMlp,
        want_input: bool,
    ) -> Option<Array2<f64>> {
        let rows = tape.rows;
        let streams = tape.streams;
        let w0sq = self.omega0 * self.omega0;
        let last = self.layers.len() - 1;
        let mut delta = d_out;
        for i in (0..=last).rev() {
            let layer = &self.layers[i];
            let g = &mut grads.layers[i];
            if i < last {
                // delta is the adjoint of this layer's output h.
                let sn = &tape.sin[i];
                let cs = &tape.cos[i];
                let pre = &tape.pre[i];
                let mut dz = Array2::zeros(delta.raw_dim());
                {
                    let mut dzv = dz.slice_mut(s![0..rows, ..]);
                    Zip::from(&mut dzv)
                        .and(delta.slice(s![0..rows, ..]))
                        .and(cs)
                        .for_each(|o, &d, &c| *o = d * c);
                    for k in 1..streams {
                        let blk = s![k * rows..(k + 1) * rows, ..];
                        Zip::from(&mut dzv)
                            .and(delta.slice(blk))
                            .and(pre.slice(blk))
                            .and(sn)
                            .for_each(|o, &d, &t, &sv| *o -= d * t * w0sq * sv);
                    }
                }
                for k in 1..streams {
                    let blk = s![k * rows..(k + 1) * rows, ..];
                    Zip::from(dz.slice_mut(blk))
                        .and(delta.slice(blk))
                        .and(cs)
                        .for_each(|o, &d, &c| *o = d * c);
                }
                delta = dz;
            }
            // delta is now the adjoint of this layer's pre-activation.
            let input = &tape.inputs[i];
            ndarray::linalg::general_mat_mul(1.0, &delta.t(), input, 1.0, &mut g.weight);
            g.bias += &delta.slice(s![0..rows, ..]).sum_axis(Axis(0));
            if i == 0 && !want_input {
                return None;
            }
            delta = delta.dot(&layer.weight);
        }
        Some(delta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_input(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn init_is_f32_representable() {
        let mlp = SineMlp::new(&[6, 8, 8, 1], 30.0, FirstLayerInit::Hidden, 4);
        for p in mlp.param_slices().concat() {
            assert_eq!(p, p as f32 as f64);
        }
        assert_eq!(mlp.widths(), vec![6, 8, 8, 1]);
        assert_eq!(mlp.param_count(), 6 * 8 + 8 + 8 * 8 + 8 + 8 + 1);
    }

    #[test]
    fn value_forward_matches_stacked_forward() {
        let mlp = SineMlp::new(&[5, 7, 7, 2], 30.0, FirstLayerInit::Hidden, 1);
        let x = random_input(12, 5, 2);
        let values = mlp.forward_values(x.view());
        let (stacked, _) = mlp.forward(x, 1);
        assert_eq!(values, stacked);
    }

    #[test]
    fn tangent_stream_is_directional_derivative() {
        // Feed x and a direction v; the tangent output must match FD of f along v.
        let mlp = SineMlp::new(&[4, 6, 6, 1], 5.0, FirstLayerInit::Hidden, 3);
        let x = random_input(3, 4, 5);
        let v = random_input(3, 4, 6);
        let mut stacked = Array2::zeros((6, 4));
        stacked.slice_mut(s![0..3, ..]).assign(&x);
        stacked.slice_mut(s![3..6, ..]).assign(&v);
        let (out, _) = mlp.forward(stacked, 2);
        let h = 1e-6;
        let fp = mlp.forward_values((&x + &(&v * h)).view());
        let fm = mlp.forward_values((&x - &(&v * h)).view());
        for r in 0..3 {
            let fd = (fp[[r, 0]] - fm[[r, 0]]) / (2.0 * h);
            assert!((out[[3 + r, 0]] - fd).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn backward_matches_finite_differences_on_mixed_objective() {
        // Objective: sum of values plus sum of squared tangents, with weights.
        let mut mlp = SineMlp::new(&[3, 5, 5, 1], 3.0, FirstLayerInit::Coordinate, 8);
        let x = random_input(8, 3, 9);
        let objective = |m: &SineMlp| {
            let (out, _) = m.forward(x.clone(), 2);
            (0..4).map(|r| 0.7 * out[[r, 0]] + out[[4 + r, 0]].powi(2)).sum::<f64>()
        };
        let (out, tape) = mlp.forward(x.clone(), 2);
        let mut d_out = Array2::zeros(out.raw_dim());
        for r in 0..4 {
            d_out[[r, 0]] = 0.7;
            d_out[[4 + r, 0]] = 2.0 * out[[4 + r, 0]];
        }
        let mut grads = mlp.zeros_like();
        mlp.backward(&tape, d_out, &mut grads);
        let analytic: Vec<f64> = grads.param_slices().concat();
        let h = 1e-6;
        let mut idx = 0;
        for slot in 0..mlp.param_slices().len() {
            let len = mlp.param_slices()[slot].len();
            for j in 0..len {
                let orig = mlp.param_slices()[slot][j];
                mlp.param_slices_mut()[slot][j] = orig + h;
                let fp = objective(&mlp);
                mlp.param_slices_mut()[slot][j] = orig - h;
                let fm = objective(&mlp);
                mlp.param_slices_mut()[slot][j] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let a = analytic[idx];
                let denom = a.abs().max(fd.abs()).max(1e-6);
                assert!((a - fd).abs() / denom < 1e-5, "param {idx}: {a} vs {fd}");
                idx += 1;
            }
        }
    }
}
