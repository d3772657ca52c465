//! Fully connected feed-forward network with hand-written reverse mode.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::optim::ParamGroup;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
    Sigmoid,
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
            Activation::Sigmoid => sigmoid(z),
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
        }
    }
}

/// One affine layer followed by an activation. `weight` is `fan_in x fan_out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix,
    #[serde(serialize_with = "super::fmt::serialize_vec")]
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    /// Uniform `±sqrt(6 / fan_in)` weights, zero biases.
    pub fn init<R: Rng + ?Sized>(
        fan_in: usize,
        fan_out: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / fan_in.max(1) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Self {
            weight: Matrix::from_vec(fan_in, fan_out, data).expect("sized above"),
            bias: vec![0.0; fan_out],
            activation,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpRecord")]
pub struct Mlp {
    layers: Vec<Layer>,
}

#[derive(Deserialize)]
struct MlpRecord {
    layers: Vec<Layer>,
}

impl TryFrom<MlpRecord> for Mlp {
    type Error = Error;

    fn try_from(r: MlpRecord) -> Result<Self> {
        Mlp::from_layers(r.layers)
    }
}

/// Per-layer inputs and pre-activations recorded by [`Mlp::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    dims: Vec<(usize, usize)>,
    inputs: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.inputs.first().map_or(0, Matrix::rows)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrads>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            layers: mlp
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weight: Matrix::zeros(l.fan_in(), l.fan_out()),
                    bias: vec![0.0; l.fan_out()],
                })
                .collect(),
        }
    }

    /// Flattened in the same order as [`Mlp::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }
}

impl Mlp {
    /// Builds a network with layer widths `dims[0] -> dims[1] -> ...`.
    ///
    /// Hidden layers use `hidden`, the last layer uses `output`.
    pub fn new<R: Rng + ?Sized>(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Invalid(format!(
                "MLP needs at least two non-zero widths, got {dims:?}"
            )));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { hidden };
                Layer::init(dims[i], dims[i + 1], act, rng)
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Invalid("MLP needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.fan_out() {
                return Err(Error::shape("MLP layer bias", l.fan_out(), l.bias.len()));
            }
            if i > 0 && layers[i - 1].fan_out() != l.fan_in() {
                return Err(Error::shape(
                    "MLP layer chain",
                    layers[i - 1].fan_out(),
                    l.fan_in(),
                ));
            }
            if !l.weight.all_finite() || !l.bias.iter().all(|b| b.is_finite()) {
                return Err(Error::NonFinite(format!("MLP layer {i}")));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    /// Widths from input to output.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.in_dim()];
        d.extend(self.layers.iter().map(Layer::fan_out));
        d
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.fan_in() * l.fan_out() + l.fan_out())
            .sum()
    }

    pub fn forward(&self, input: &Matrix) -> Result<(Matrix, ForwardCache)> {
        if input.cols() != self.in_dim() {
            return Err(Error::shape("MLP input width", self.in_dim(), input.cols()));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut current = input.clone();
        for layer in &self.layers {
            let mut z = current.matmul(&layer.weight)?;
            z.add_row_vector(&layer.bias)?;
            let mut a = z.clone();
            a.as_mut_slice()
                .iter_mut()
                .for_each(|v| *v = layer.activation.apply(*v));
            inputs.push(current);
            pre_activations.push(z);
            current = a;
        }
        let cache = ForwardCache {
            dims: self.layers.iter().map(|l| (l.fan_in(), l.fan_out())).collect(),
            inputs,
            pre_activations,
        };
        Ok((current, cache))
    }

    /// Forward pass without recording a cache.
    pub fn predict(&self, input: &Matrix) -> Result<Matrix> {
        if input.cols() != self.in_dim() {
            return Err(Error::shape("MLP input width", self.in_dim(), input.cols()));
        }
        let mut current = input.matmul(&self.layers[0].weight)?;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                current = current.matmul(&layer.weight)?;
            }
            current.add_row_vector(&layer.bias)?;
            current
                .as_mut_slice()
                .iter_mut()
                .for_each(|v| *v = layer.activation.apply(*v));
        }
        Ok(current)
    }

    /// Reverse-mode pass: returns parameter gradients and the gradient with
    /// respect to the network input.
    pub fn backward(&self, cache: &ForwardCache, output_grad: &Matrix) -> Result<(MlpGrads, Matrix)> {
        let dims: Vec<(usize, usize)> = self.layers.iter().map(|l| (l.fan_in(), l.fan_out())).collect();
        if cache.dims != dims {
            return Err(Error::Contract(format!(
                "forward cache was recorded for layer dims {:?}, network has {:?}",
                cache.dims, dims
            )));
        }
        let batch = cache.batch_size();
        if output_grad.shape() != (batch, self.out_dim()) {
            return Err(Error::shape(
                "MLP output gradient",
                format!("{}x{}", batch, self.out_dim()),
                format!("{}x{}", output_grad.rows(), output_grad.cols()),
            ));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut upstream = output_grad.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let z = &cache.pre_activations[l];
            let mut delta = upstream;
            if layer.activation != Activation::Identity {
                for (d, &zv) in delta.as_mut_slice().iter_mut().zip(z.as_slice()) {
                    *d *= layer.activation.derivative(zv);
                }
            }
            let weight = cache.inputs[l].t_matmul(&delta)?;
            let bias = delta.column_sums();
            upstream = delta.matmul_t(&layer.weight)?;
            grads.push(LayerGrads { weight, bias });
        }
        grads.reverse();
        Ok((MlpGrads { layers: grads }, upstream))
    }

    /// All parameters, layer by layer (weights row-major, then biases).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Inverse of [`Mlp::flatten`].
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape("Mlp::set_flat", self.param_count(), flat.len()));
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let n = l.weight.as_slice().len();
            l.weight.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
            let n = l.bias.len();
            l.bias.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Pairs each parameter tensor with its gradient for an optimizer step.
    pub fn param_groups<'a>(&'a mut self, grads: &'a MlpGrads, prefix: &str) -> Vec<ParamGroup<'a>> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (i, (l, g)) in self.layers.iter_mut().zip(&grads.layers).enumerate() {
            out.push(ParamGroup::new(
                format!("{prefix}.layer{i}.weight"),
                l.weight.as_mut_slice(),
                g.weight.as_slice(),
            ));
            out.push(ParamGroup::new(
                format!("{prefix}.layer{i}.bias"),
                &mut l.bias,
                &g.bias,
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::gradcheck::grad_check;
    use crate::numeric::rng::SeededRng;

    fn single(weight: Matrix, bias: Vec<f64>, activation: Activation) -> Mlp {
        Mlp::from_layers(vec![Layer {
            weight,
            bias,
            activation,
        }])
        .unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = single(Matrix::identity(3), vec![0.0; 3], Activation::Identity);
        let x = Matrix::from_rows(&[[0.5, -2.0, 7.0]]).unwrap();
        let (y, _) = net.forward(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn relu_clips_negative_preactivation() {
        let w = Matrix::from_rows(&[[1.0], [-1.0]]).unwrap();
        let net = single(w, vec![0.0], Activation::Relu);
        let x = Matrix::from_rows(&[[2.0, 3.0]]).unwrap();
        let (y, cache) = net.forward(&x).unwrap();
        assert_eq!(cache.pre_activations[0].as_slice(), &[-1.0]);
        assert_eq!(y.as_slice(), &[0.0]);

        // gradient through the dead unit is zero
        let (g, dx) = net.backward(&cache, &Matrix::from_rows(&[[1.0]]).unwrap()).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
        assert!(dx.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_input_zero_bias_relu_is_zero() {
        let mut rng = SeededRng::new(3);
        let net = Mlp::new(&[4, 6, 2], Activation::Relu, Activation::Relu, &mut rng).unwrap();
        let (y, _) = net.forward(&Matrix::zeros(3, 4)).unwrap();
        assert!(y.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sum_loss_through_identity_gives_ones() {
        let net = single(Matrix::identity(4), vec![0.0; 4], Activation::Identity);
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.0, 4.0], [0.0, 0.0, 1.0, 1.0]]).unwrap();
        let (y, cache) = net.forward(&x).unwrap();
        let ones = Matrix::from_vec(y.rows(), y.cols(), vec![1.0; y.rows() * y.cols()]).unwrap();
        let (_, dx) = net.backward(&cache, &ones).unwrap();
        assert!(dx.as_slice().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn rejects_bad_input_and_stale_cache() {
        let mut rng = SeededRng::new(1);
        let a = Mlp::new(&[3, 4, 2], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        let b = Mlp::new(&[3, 5, 2], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        assert!(matches!(a.forward(&Matrix::zeros(1, 2)), Err(Error::Shape { .. })));
        let (_, cache) = a.forward(&Matrix::zeros(2, 3)).unwrap();
        assert!(matches!(
            b.backward(&cache, &Matrix::zeros(2, 2)),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            a.backward(&cache, &Matrix::zeros(3, 2)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn predict_matches_forward() {
        let mut rng = SeededRng::new(9);
        let net = Mlp::new(&[5, 7, 3], Activation::Relu, Activation::Sigmoid, &mut rng).unwrap();
        let x = Matrix::from_vec(4, 5, (0..20).map(|i| (i as f64).cos()).collect()).unwrap();
        assert_eq!(net.predict(&x).unwrap(), net.forward(&x).unwrap().0);
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        for (seed, out_act) in [(11, Activation::Identity), (12, Activation::Sigmoid)] {
            let mut rng = SeededRng::new(seed);
            let net = Mlp::new(&[4, 6, 5, 3], Activation::Relu, out_act, &mut rng).unwrap();
            let x = Matrix::from_vec(3, 4, (0..12).map(|i| ((i * 7) as f64).sin()).collect()).unwrap();
            // loss = sum(c ⊙ y) with fixed coefficients
            let coef: Vec<f64> = (0..9).map(|i| 0.3 + 0.1 * i as f64).collect();
            let mut probe = net.clone();
            let report = grad_check(
                |p| {
                    probe.set_flat(p).unwrap();
                    let (y, cache) = probe.forward(&x).unwrap();
                    let loss = y.as_slice().iter().zip(&coef).map(|(a, b)| a * b).sum();
                    let g = Matrix::from_vec(3, 3, coef.clone()).unwrap();
                    let (grads, _) = probe.backward(&cache, &g).unwrap();
                    (loss, grads.flatten())
                },
                &net.flatten(),
                1e-5,
            );
            assert!(report.pass, "{report:?}");
        }
    }

    #[test]
    fn flatten_round_trip() {
        let mut rng = SeededRng::new(2);
        let net = Mlp::new(&[3, 2, 1], Activation::Relu, Activation::Sigmoid, &mut rng).unwrap();
        let mut other = Mlp::new(&[3, 2, 1], Activation::Relu, Activation::Sigmoid, &mut rng).unwrap();
        other.set_flat(&net.flatten()).unwrap();
        assert_eq!(net, other);
        assert!(other.set_flat(&[0.0; 3]).is_err());
    }
}
