//! Feed-forward feature extractor with an explicit backward pass.
//!
//! Hidden layers use `tanh`; the output layer is linear and followed by L2
//! normalization, so every feature lies on the unit sphere. The same type
//! serves as the query encoder and as its momentum-averaged key copy.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{axpy, dot, norm, Mat, NORM_EPS};
use crate::rng::{self, Stream};

/// Layer widths from input to output, e.g. `[32, 64, 64, 16]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch(pub Vec<usize>);

impl Arch {
    pub fn input_dim(&self) -> usize {
        self.0[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.0.last().unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.len() < 2 {
            return Err(Error::ConfigInvalid(
                "encoder needs an input and an output width".into(),
            ));
        }
        if self.0.contains(&0) {
            return Err(Error::ConfigInvalid("encoder widths must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for Arch {
    fn default() -> Self {
        Arch(vec![32, 64, 64, 16])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out × in`
    pub weight: Mat,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub layers: Vec<Layer>,
}

/// Gradient with the same layout as [`EncoderParams`].
pub type EncoderGrad = EncoderParams;

/// Cached intermediate values from a forward pass.
#[derive(Debug, Clone)]
pub struct ActivationTape {
    /// Input to each layer; `inputs[0]` is the raw sample.
    inputs: Vec<Vec<f64>>,
    /// Pre-normalization output.
    out: Vec<f64>,
    out_norm: f64,
    feature: Vec<f64>,
}

impl ActivationTape {
    pub fn feature(&self) -> &[f64] {
        &self.feature
    }
}

impl EncoderParams {
    /// Weights are `N(0, 1) / √fan_in`; biases start at zero.
    pub fn init(arch: &Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng::stream(seed, Stream::Init);
        let layers = arch
            .0
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let s = 1.0 / (fan_in as f64).sqrt();
                let weight = Mat::from_fn(fan_out, fan_in, |_, _| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * s
                });
                Layer {
                    weight,
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn zeros(arch: &Arch) -> Result<Self> {
        arch.validate()?;
        let layers = arch
            .0
            .windows(2)
            .map(|w| Layer {
                weight: Mat::zeros(w[1], w[0]),
                bias: vec![0.0; w[1]],
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Mat::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn arch(&self) -> Arch {
        let mut dims = vec![self.layers[0].weight.cols()];
        dims.extend(self.layers.iter().map(|l| l.weight.rows()));
        Arch(dims)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.rows()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weight.rows() == b.weight.rows()
                    && a.weight.cols() == b.weight.cols()
                    && a.bias.len() == b.bias.len()
            })
    }

    /// Flat view in layer order, weights then bias per layer.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Inverse of [`to_flat`](Self::to_flat) onto this parameter shape.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let w = l.weight.as_mut_slice();
            w.copy_from_slice(&flat[off..off + w.len()]);
            off += w.len();
            let n = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for l in &mut self.layers {
            l.weight.as_mut_slice().iter_mut().for_each(&mut f);
            l.bias.iter_mut().for_each(&mut f);
        }
    }

    pub fn zip_mut(&mut self, other: &Self, mut f: impl FnMut(&mut f64, f64)) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch(
                "encoder parameter shapes differ".into(),
            ));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, &y) in a.weight.as_mut_slice().iter_mut().zip(b.weight.as_slice()) {
                f(x, y);
            }
            for (x, &y) in a.bias.iter_mut().zip(&b.bias) {
                f(x, y);
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    pub fn forward(&self, x: &[f64]) -> Result<ActivationTape> {
        if x.len() != self.input_dim() {
            return Err(Error::DimMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut a = x.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = l.weight.matvec(&a);
            axpy(1.0, &l.bias, &mut z);
            inputs.push(a);
            if i < last {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            a = z;
        }
        let out_norm = norm(&a);
        if !out_norm.is_finite() {
            return Err(Error::NonFinite("encoder output".into()));
        }
        if out_norm <= NORM_EPS {
            return Err(Error::ZeroNorm { norm: out_norm });
        }
        let feature = a.iter().map(|v| v / out_norm).collect();
        Ok(ActivationTape {
            inputs,
            out: a,
            out_norm,
            feature,
        })
    }

    /// Unit-norm feature only.
    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.feature)
    }

    /// Gradient of `grad_featureᵀ · feature` with respect to the parameters.
    pub fn backward(&self, tape: &ActivationTape, grad_feature: &[f64]) -> Result<EncoderGrad> {
        let mut grad = self.zeros_like();
        self.backward_into(tape, grad_feature, &mut grad)?;
        Ok(grad)
    }

    /// Like [`backward`](Self::backward) but accumulates into `acc` and
    /// returns the gradient with respect to the input sample.
    pub fn backward_into(
        &self,
        tape: &ActivationTape,
        grad_feature: &[f64],
        acc: &mut EncoderGrad,
    ) -> Result<Vec<f64>> {
        if grad_feature.len() != self.output_dim() {
            return Err(Error::ShapeMismatch(format!(
                "feature gradient of length {} for output dim {}",
                grad_feature.len(),
                self.output_dim()
            )));
        }
        if tape.inputs.len() != self.layers.len()
            || tape.out.len() != self.output_dim()
            || !acc.same_shape(self)
        {
            return Err(Error::ShapeMismatch(
                "tape or accumulator does not match params".into(),
            ));
        }

        // Through the normalization: (I − f fᵀ) g / ‖z‖.
        let f = &tape.feature;
        let radial = dot(f, grad_feature);
        let mut delta: Vec<f64> = grad_feature
            .iter()
            .zip(f)
            .map(|(g, fi)| (g - radial * fi) / tape.out_norm)
            .collect();

        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let input = &tape.inputs[i];
            let g = &mut acc.layers[i];
            let cols = layer.weight.cols();
            let gw = g.weight.as_mut_slice();
            for (r, &d) in delta.iter().enumerate() {
                if d != 0.0 {
                    axpy(d, input, &mut gw[r * cols..(r + 1) * cols]);
                }
            }
            axpy(1.0, &delta, &mut g.bias);
            let mut back = layer.weight.matvec_t(&delta);
            if i > 0 {
                // input[i] = tanh(z_{i-1})
                for (b, a) in back.iter_mut().zip(input) {
                    *b *= 1.0 - a * a;
                }
            }
            delta = back;
        }
        Ok(delta)
    }

    /// `θ′ ← m·θ′ + (1 − m)·θ`, applied to `self` as the key encoder.
    pub fn momentum_update(&mut self, query: &EncoderParams, m: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&m) || m.is_nan() {
            return Err(Error::BadMomentum(m));
        }
        self.zip_mut(query, |k, q| {
            if *k != q {
                *k = m * *k + (1.0 - m) * q;
            }
        })
    }
}
