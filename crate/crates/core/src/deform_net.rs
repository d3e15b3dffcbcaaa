//! Per-part mouth deformation: a small MLP mapping expression, pose and an
//! encoded timestep to one translation per mouth part.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Vec3;
use crate::scalar::Real;

/// Sinusoidal encoding of a scalar with `num_freqs` octaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PosEncoding {
    pub num_freqs: usize,
    pub include_input: bool,
}

impl Default for PosEncoding {
    fn default() -> Self {
        Self {
            num_freqs: 6,
            include_input: true,
        }
    }
}

impl PosEncoding {
    pub fn output_dim(&self) -> usize {
        usize::from(self.include_input) + 2 * self.num_freqs
    }
}

/// `[T] ++ [sin(2^k π T), cos(2^k π T)]` for `k = 0..L`.
pub fn encode_timestep<T: Real>(t: T, enc: &PosEncoding) -> Vec<T> {
    let mut out = Vec::with_capacity(enc.output_dim());
    if enc.include_input {
        out.push(t);
    }
    let mut freq = T::PI();
    for _ in 0..enc.num_freqs {
        let (s, c) = (freq * t).sin_cos();
        out.push(s);
        out.push(c);
        freq = freq * T::lit(2.0);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeformConfig {
    pub hidden: Vec<usize>,
    pub encoding: PosEncoding,
}

impl Default for DeformConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64, 64],
            encoding: PosEncoding::default(),
        }
    }
}

/// Dense network with tanh hidden layers and a linear 3-vector output.
/// Parameters live in one flat buffer: per layer, row-major weights then biases.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformMLP<T> {
    pub expr_dim: usize,
    pub pose_dim: usize,
    pub encoding: PosEncoding,
    widths: Vec<usize>,
    params: Vec<T>,
}

/// Activations recorded by [`DeformMLP::forward_train`].
#[derive(Clone, Debug)]
pub struct MlpCache<T> {
    /// Input of every layer; `layer_inputs[0]` is the network input.
    layer_inputs: Vec<Vec<T>>,
}

impl<T: Real> DeformMLP<T> {
    /// Xavier-uniform hidden layers, zero output layer.
    pub fn new(expr_dim: usize, pose_dim: usize, cfg: &DeformConfig, seed: u64) -> Self {
        let in_dim = expr_dim + pose_dim + cfg.encoding.output_dim();
        let mut widths = vec![in_dim];
        widths.extend(&cfg.hidden);
        widths.push(3);
        let n_params = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let mut params = vec![T::zero(); n_params];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut off = 0;
        let n_layers = widths.len() - 1;
        for (l, w) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            if l + 1 < n_layers {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                for p in &mut params[off..off + fan_in * fan_out] {
                    *p = T::lit(rng.random_range(-bound..bound));
                }
            }
            off += fan_in * fan_out + fan_out;
        }
        Self {
            expr_dim,
            pose_dim,
            encoding: cfg.encoding,
            widths,
            params,
        }
    }

    /// Rebuilds a network from its layer widths and flat parameters.
    pub fn from_parts(
        expr_dim: usize,
        pose_dim: usize,
        encoding: PosEncoding,
        widths: Vec<usize>,
        params: Vec<T>,
    ) -> Result<Self> {
        let expected: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        if widths.len() < 2
            || widths[0] != expr_dim + pose_dim + encoding.output_dim()
            || *widths.last().unwrap() != 3
            || params.len() != expected
        {
            return Err(Error::DimensionMismatch(format!(
                "deformation network widths {widths:?} with {} params",
                params.len()
            )));
        }
        Ok(Self {
            expr_dim,
            pose_dim,
            encoding,
            widths,
            params,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Concatenates `psi`, `theta` and the encoded timestep.
    pub fn assemble_input(&self, psi: &[T], theta: &[T], t: T) -> Result<Vec<T>> {
        if psi.len() != self.expr_dim || theta.len() != self.pose_dim {
            return Err(Error::DimensionMismatch(format!(
                "expected expression {} and pose {}, got {} and {}",
                self.expr_dim,
                self.pose_dim,
                psi.len(),
                theta.len()
            )));
        }
        let mut x = Vec::with_capacity(self.input_dim());
        x.extend_from_slice(psi);
        x.extend_from_slice(theta);
        x.extend(encode_timestep(t, &self.encoding));
        Ok(x)
    }

    pub fn forward(&self, psi: &[T], theta: &[T], t: T) -> Result<Vec3<T>> {
        let x = self.assemble_input(psi, theta, t)?;
        Ok(self.forward_train(&x)?.0)
    }

    /// Offset used at inference time, where the timestep is pinned to zero.
    pub fn forward_inference(&self, psi: &[T], theta: &[T]) -> Result<Vec3<T>> {
        self.forward(psi, theta, T::zero())
    }

    /// Forward pass on an assembled input, keeping the activations.
    pub fn forward_train(&self, x: &[T]) -> Result<(Vec3<T>, MlpCache<T>)> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "network input {} != {}",
                x.len(),
                self.input_dim()
            )));
        }
        let n_layers = self.widths.len() - 1;
        let mut layer_inputs = Vec::with_capacity(n_layers);
        let mut h = x.to_vec();
        let mut off = 0;
        for l in 0..n_layers {
            let (fi, fo) = (self.widths[l], self.widths[l + 1]);
            let w = &self.params[off..off + fi * fo];
            let b = &self.params[off + fi * fo..off + fi * fo + fo];
            let mut out: Vec<T> = (0..fo)
                .map(|o| {
                    let row = &w[o * fi..(o + 1) * fi];
                    row.iter().zip(&h).fold(b[o], |acc, (wv, hv)| acc + *wv * *hv)
                })
                .collect();
            if l + 1 < n_layers {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            layer_inputs.push(std::mem::replace(&mut h, out));
            off += fi * fo + fo;
        }
        Ok((Vec3::new(h[0], h[1], h[2]), MlpCache { layer_inputs }))
    }

    /// Reverse pass: gradients for the flat parameters and for the input.
    pub fn backward(&self, cache: &MlpCache<T>, upstream: Vec3<T>) -> (Vec<T>, Vec<T>) {
        let n_layers = self.widths.len() - 1;
        let mut grad = vec![T::zero(); self.params.len()];
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for l in 0..n_layers {
            offsets.push(off);
            off += self.widths[l] * self.widths[l + 1] + self.widths[l + 1];
        }
        // dL/d(pre-activation) of the current layer.
        let mut delta = upstream.to_array().to_vec();
        for l in (0..n_layers).rev() {
            let (fi, fo) = (self.widths[l], self.widths[l + 1]);
            let off = offsets[l];
            let input = &cache.layer_inputs[l];
            for o in 0..fo {
                let d = delta[o];
                let gw = &mut grad[off + o * fi..off + (o + 1) * fi];
                for (g, x) in gw.iter_mut().zip(input) {
                    *g += d * *x;
                }
                grad[off + fi * fo + o] += d;
            }
            let w = &self.params[off..off + fi * fo];
            let mut d_in = vec![T::zero(); fi];
            for o in 0..fo {
                let d = delta[o];
                for (di, wv) in d_in.iter_mut().zip(&w[o * fi..(o + 1) * fi]) {
                    *di += d * *wv;
                }
            }
            if l > 0 {
                // input of layer l is tanh of the previous pre-activation
                for (di, a) in d_in.iter_mut().zip(input) {
                    *di *= T::one() - *a * *a;
                }
            }
            delta = d_in;
        }
        (grad, delta)
    }
}

/// The two mouth networks, structurally identical with independent weights.
#[derive(Clone, Debug, PartialEq)]
pub struct PartNets<T> {
    pub upper: DeformMLP<T>,
    pub lower: DeformMLP<T>,
}

impl<T: Real> PartNets<T> {
    pub fn new(expr_dim: usize, pose_dim: usize, cfg: &DeformConfig, seed: u64) -> Self {
        Self {
            upper: DeformMLP::new(expr_dim, pose_dim, cfg, seed.wrapping_mul(2).wrapping_add(1)),
            lower: DeformMLP::new(expr_dim, pose_dim, cfg, seed.wrapping_mul(2).wrapping_add(2)),
        }
    }
}

pub const DIFF_OPS: &[&str] = &["deform_net.params", "deform_net.input"];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoding_examples() {
        let enc = PosEncoding {
            num_freqs: 4,
            include_input: true,
        };
        assert_eq!(encode_timestep(0.0, &enc), vec![0., 0., 1., 0., 1., 0., 1., 0., 1.]);
        let e = encode_timestep(0.5f64, &enc);
        assert!((e[1] - 1.0).abs() < 1e-15 && e[2].abs() < 1e-15);
        let bare = PosEncoding {
            num_freqs: 0,
            include_input: true,
        };
        assert_eq!(encode_timestep(0.37, &bare), vec![0.37]);
        assert_eq!(enc.output_dim(), 9);
    }

    #[test]
    fn zero_output_layer_gives_zero_offset() {
        let net = DeformMLP::<f64>::new(4, 3, &DeformConfig::default(), 5);
        let dv = net.forward(&[0.3, -1.0, 0.2, 0.9], &[0.1, 0.0, 0.4], 0.7).unwrap();
        assert_eq!(dv, Vec3::zero());
    }

    #[test]
    fn dimension_mismatch() {
        let net = DeformMLP::<f64>::new(4, 3, &DeformConfig::default(), 5);
        assert!(matches!(net.forward(&[0.3], &[0.1, 0.0, 0.4], 0.0), Err(Error::DimensionMismatch(_))));
    }

    fn random_net(seed: u64) -> DeformMLP<f64> {
        let cfg = DeformConfig {
            hidden: vec![8, 6],
            encoding: PosEncoding {
                num_freqs: 2,
                include_input: true,
            },
        };
        let mut net = DeformMLP::new(2, 1, &cfg, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        net.params_mut().iter_mut().for_each(|p| *p = rng.random_range(-0.8..0.8));
        net
    }

    #[test]
    fn inference_pins_timestep() {
        let net = random_net(1);
        let a = net.forward_inference(&[0.2, 0.1], &[0.3]).unwrap();
        assert_eq!(a, net.forward(&[0.2, 0.1], &[0.3], 0.0).unwrap());
        assert_ne!(a, net.forward(&[0.2, 0.1], &[0.3], 0.6).unwrap());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let net = random_net(2);
        let x = net.assemble_input(&[0.2, 0.1], &[0.3], 0.4).unwrap();
        let (_, cache) = net.forward_train(&x).unwrap();
        let (gp, gx) = net.backward(&cache, Vec3::zero());
        assert!(gp.iter().chain(&gx).all(|g| *g == 0.0));
    }

    #[test]
    fn linear_layer_gradient_is_outer_product() {
        let cfg = DeformConfig {
            hidden: vec![],
            encoding: PosEncoding {
                num_freqs: 0,
                include_input: false,
            },
        };
        let net = DeformMLP::<f64>::new(2, 0, &cfg, 0);
        let x = [0.5, -2.0];
        let (_, cache) = net.forward_train(&x).unwrap();
        let up = Vec3::new(1.0, 2.0, 3.0);
        let (gp, _) = net.backward(&cache, up);
        for o in 0..3 {
            for i in 0..2 {
                assert_eq!(gp[o * 2 + i], up[o] * x[i]);
            }
            assert_eq!(gp[6 + o], up[o]);
        }
    }

    #[test]
    fn backward_matches_central_differences() {
        let net = random_net(3);
        let x = net.assemble_input(&[0.2, -0.4], &[0.3], 0.35).unwrap();
        let up = Vec3::new(0.7, -1.3, 0.4);
        let (_, cache) = net.forward_train(&x).unwrap();
        let (gp, gx) = net.backward(&cache, up);
        let h = 1e-6;
        let f = |n: &DeformMLP<f64>, x: &[f64]| n.forward_train(x).unwrap().0.dot(up);
        for k in 0..net.num_params() {
            let mut p = net.clone();
            let mut m = net.clone();
            p.params_mut()[k] += h;
            m.params_mut()[k] -= h;
            let fd = (f(&p, &x) - f(&m, &x)) / (2.0 * h);
            let denom = fd.abs().max(gp[k].abs()).max(1e-6);
            assert!((fd - gp[k]).abs() / denom < 1e-5, "param {k}: {fd} vs {}", gp[k]);
        }
        for k in 0..x.len() {
            let mut p = x.clone();
            let mut m = x.clone();
            p[k] += h;
            m[k] -= h;
            let fd = (f(&net, &p) - f(&net, &m)) / (2.0 * h);
            let denom = fd.abs().max(gx[k].abs()).max(1e-6);
            assert!((fd - gx[k]).abs() / denom < 1e-5);
        }
    }

    #[test]
    fn part_nets_are_independent() {
        let mut nets = PartNets::<f64>::new(2, 1, &DeformConfig::default(), 4);
        assert_eq!(nets.upper.widths(), nets.lower.widths());
        let before = nets.lower.forward(&[0.1, 0.2], &[0.3], 0.1).unwrap();
        nets.upper.params_mut().iter_mut().for_each(|p| *p += 0.5);
        assert_eq!(before, nets.lower.forward(&[0.1, 0.2], &[0.3], 0.1).unwrap());
        assert_ne!(nets.upper.params(), nets.lower.params());
    }
}
