//! Fixed-graph multilayer perceptrons with exact backpropagation.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DenseTensor, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply<T: Real>(self, v: T) -> T {
        match self {
            Activation::Relu => v.max(T::zero()),
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative<T: Real>(self, z: T, a: T) -> T {
        match self {
            Activation::Relu => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - a * a,
            Activation::Identity => T::one(),
        }
    }
}

/// Layer widths plus one activation per hidden layer. The output layer is
/// always linear.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub hidden_activations: Vec<Activation>,
    pub seed: u64,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, hidden: Activation, seed: u64) -> Result<Self> {
        let n_hidden = layer_widths.len().saturating_sub(2);
        Self::with_activations(layer_widths, vec![hidden; n_hidden], seed)
    }

    pub fn with_activations(
        layer_widths: Vec<usize>,
        hidden_activations: Vec<Activation>,
        seed: u64,
    ) -> Result<Self> {
        let spec = Self {
            layer_widths,
            hidden_activations,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::invalid("an MLP needs at least input and output widths"));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        if self.hidden_activations.len() != self.layer_widths.len() - 2 {
            return Err(Error::invalid(format!(
                "{} hidden layers but {} activations",
                self.layer_widths.len() - 2,
                self.hidden_activations.len()
            )));
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn activation(&self, layer: usize) -> Activation {
        self.hidden_activations
            .get(layer)
            .copied()
            .unwrap_or(Activation::Identity)
    }
}

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone)]
pub struct Mlp<T = f32> {
    spec: MlpSpec,
    /// Layer `l` maps `widths[l]` to `widths[l + 1]`; stored `in x out`.
    weights: Vec<DenseTensor<T>>,
    biases: Vec<DenseTensor<T>>,
    generation: u64,
}

/// Activation trace of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T = f32> {
    generation: u64,
    widths: Vec<usize>,
    /// `layer_inputs[l]` feeds layer `l`; the last entry is the network output.
    layer_inputs: Vec<DenseTensor<T>>,
    pre_activations: Vec<DenseTensor<T>>,
}

impl<T: Real> ForwardCache<T> {
    pub fn batch_size(&self) -> usize {
        self.layer_inputs[0].rows()
    }
}

#[derive(Debug, Clone)]
pub struct MlpGradients<T = f32> {
    pub weights: Vec<DenseTensor<T>>,
    pub biases: Vec<DenseTensor<T>>,
    /// Gradient with respect to the network input.
    pub input: DenseTensor<T>,
}

impl<T: Real> MlpGradients<T> {
    /// Parameter gradients in the order of [`Mlp::parameters`].
    pub fn tensors(&self) -> Vec<&DenseTensor<T>> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        for (a, b) in self
            .weights
            .iter_mut()
            .chain(self.biases.iter_mut())
            .zip(other.weights.iter().chain(&other.biases))
        {
            if a.shape() != b.shape() {
                return Err(Error::Shape("gradient sets differ".into()));
            }
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x = *x + *y;
            }
        }
        Ok(())
    }
}

impl<T: Real> Mlp<T> {
    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut weights = Vec::with_capacity(spec.n_layers());
        let mut biases = Vec::with_capacity(spec.n_layers());
        for pair in spec.layer_widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| T::of(rng.random_range(-limit..limit)))
                .collect();
            weights.push(DenseTensor::new(vec![fan_in, fan_out], data)?);
            biases.push(DenseTensor::zeros(&[fan_out]));
        }
        Ok(Self {
            spec,
            weights,
            biases,
            generation: next_generation(),
        })
    }

    pub fn from_parts(
        spec: MlpSpec,
        weights: Vec<DenseTensor<T>>,
        biases: Vec<DenseTensor<T>>,
    ) -> Result<Self> {
        spec.validate()?;
        if weights.len() != spec.n_layers() || biases.len() != spec.n_layers() {
            return Err(Error::Shape(format!(
                "expected {} layers of parameters",
                spec.n_layers()
            )));
        }
        for (l, pair) in spec.layer_widths.windows(2).enumerate() {
            if weights[l].shape() != [pair[0], pair[1]] || biases[l].shape() != [pair[1]] {
                return Err(Error::Shape(format!(
                    "layer {l}: weight {:?} / bias {:?} do not match widths {}->{}",
                    weights[l].shape(),
                    biases[l].shape(),
                    pair[0],
                    pair[1]
                )));
            }
        }
        Ok(Self {
            spec,
            weights,
            biases,
            generation: next_generation(),
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn weights(&self) -> &[DenseTensor<T>] {
        &self.weights
    }

    pub fn biases(&self) -> &[DenseTensor<T>] {
        &self.biases
    }

    /// Interleaved `w0, b0, w1, b1, ...`.
    pub fn parameters(&self) -> Vec<&DenseTensor<T>> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    /// Mutable parameters; any outstanding forward cache becomes stale.
    pub fn parameters_mut(&mut self) -> Vec<&mut DenseTensor<T>> {
        self.generation = next_generation();
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn parameter_names(&self, prefix: &str) -> Vec<String> {
        (0..self.spec.n_layers())
            .flat_map(|l| [format!("{prefix}.w{l}"), format!("{prefix}.b{l}")])
            .collect()
    }

    pub fn cast<U: Real>(&self) -> Mlp<U> {
        Mlp {
            spec: self.spec.clone(),
            weights: self.weights.iter().map(DenseTensor::cast).collect(),
            biases: self.biases.iter().map(DenseTensor::cast).collect(),
            generation: next_generation(),
        }
    }

    fn check_input(&self, input: &DenseTensor<T>) -> Result<()> {
        if input.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "expected a batch matrix, got shape {:?}",
                input.shape()
            )));
        }
        if input.cols() != self.spec.input_width() {
            return Err(Error::Dimension {
                layer: 0,
                expected: self.spec.input_width(),
                got: input.cols(),
            });
        }
        Ok(())
    }

    fn affine(&self, l: usize, input: &DenseTensor<T>) -> Result<DenseTensor<T>> {
        let (m, k) = (input.rows(), input.cols());
        let n = self.spec.layer_widths[l + 1];
        if k != self.spec.layer_widths[l] {
            return Err(Error::Dimension {
                layer: l,
                expected: self.spec.layer_widths[l],
                got: k,
            });
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            input.data(),
            false,
            self.weights[l].data(),
            false,
            T::zero(),
            &mut out,
        );
        let bias = self.biases[l].data();
        for row in out.chunks_exact_mut(n) {
            for (v, b) in row.iter_mut().zip(bias) {
                *v = *v + *b;
            }
        }
        DenseTensor::new(vec![m, n], out)
    }

    /// Forward pass without keeping the trace.
    pub fn predict(&self, input: &DenseTensor<T>) -> Result<DenseTensor<T>> {
        self.check_input(input)?;
        let mut a = input.clone();
        for l in 0..self.spec.n_layers() {
            let mut z = self.affine(l, &a)?;
            let act = self.spec.activation(l);
            if act != Activation::Identity {
                for v in z.data_mut() {
                    *v = act.apply(*v);
                }
            }
            a = z;
        }
        Ok(a)
    }

    pub fn forward(&self, input: &DenseTensor<T>) -> Result<(DenseTensor<T>, ForwardCache<T>)> {
        self.check_input(input)?;
        let n_layers = self.spec.n_layers();
        let mut layer_inputs = Vec::with_capacity(n_layers + 1);
        let mut pre_activations = Vec::with_capacity(n_layers);
        layer_inputs.push(input.clone());
        for l in 0..n_layers {
            let z = self.affine(l, &layer_inputs[l])?;
            let act = self.spec.activation(l);
            let mut a = z.clone();
            if act != Activation::Identity {
                for v in a.data_mut() {
                    *v = act.apply(*v);
                }
            }
            pre_activations.push(z);
            layer_inputs.push(a);
        }
        let output = layer_inputs.last().unwrap().clone();
        Ok((
            output,
            ForwardCache {
                generation: self.generation,
                widths: self.spec.layer_widths.clone(),
                layer_inputs,
                pre_activations,
            },
        ))
    }

    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        output_gradient: &DenseTensor<T>,
    ) -> Result<MlpGradients<T>> {
        if cache.widths != self.spec.layer_widths {
            return Err(Error::Contract(
                "forward cache was produced by a network with different widths".into(),
            ));
        }
        if cache.generation != self.generation {
            return Err(Error::Contract(
                "forward cache is stale: parameters changed since the forward pass".into(),
            ));
        }
        let batch = cache.batch_size();
        if output_gradient.shape() != [batch, self.spec.output_width()] {
            return Err(Error::Shape(format!(
                "output gradient {:?}, expected [{batch}, {}]",
                output_gradient.shape(),
                self.spec.output_width()
            )));
        }

        let n_layers = self.spec.n_layers();
        let mut grad_w = vec![None; n_layers];
        let mut grad_b = vec![None; n_layers];
        let mut upstream = output_gradient.clone();
        for l in (0..n_layers).rev() {
            let act = self.spec.activation(l);
            let (fan_in, fan_out) = (self.spec.layer_widths[l], self.spec.layer_widths[l + 1]);
            let mut delta = upstream;
            if act != Activation::Identity {
                let z = cache.pre_activations[l].data();
                let a = cache.layer_inputs[l + 1].data();
                for ((d, &zv), &av) in delta.data_mut().iter_mut().zip(z).zip(a) {
                    *d = *d * act.derivative(zv, av);
                }
            }
            let input = &cache.layer_inputs[l];
            let mut gw = vec![T::zero(); fan_in * fan_out];
            T::gemm(
                fan_in,
                batch,
                fan_out,
                T::one(),
                input.data(),
                true,
                delta.data(),
                false,
                T::zero(),
                &mut gw,
            );
            let mut gb = vec![T::zero(); fan_out];
            for row in delta.data().chunks_exact(fan_out) {
                for (g, d) in gb.iter_mut().zip(row) {
                    *g = *g + *d;
                }
            }
            let mut gin = vec![T::zero(); batch * fan_in];
            T::gemm(
                batch,
                fan_out,
                fan_in,
                T::one(),
                delta.data(),
                false,
                self.weights[l].data(),
                true,
                T::zero(),
                &mut gin,
            );
            grad_w[l] = Some(DenseTensor::new(vec![fan_in, fan_out], gw)?);
            grad_b[l] = Some(DenseTensor::new(vec![fan_out], gb)?);
            upstream = DenseTensor::new(vec![batch, fan_in], gin)?;
        }
        Ok(MlpGradients {
            weights: grad_w.into_iter().map(Option::unwrap).collect(),
            biases: grad_b.into_iter().map(Option::unwrap).collect(),
            input: upstream,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(weights: Vec<Vec<f64>>, bias: Vec<f64>) -> Mlp<f64> {
        let fan_in = weights.len();
        let fan_out = bias.len();
        let spec = MlpSpec::new(vec![fan_in, fan_out], Activation::Identity, 0).unwrap();
        Mlp::from_parts(
            spec,
            vec![DenseTensor::from_rows(&weights).unwrap()],
            vec![DenseTensor::new(vec![fan_out], bias).unwrap()],
        )
        .unwrap()
    }

    #[test]
    fn identity_network_passes_input_through() {
        let spec = MlpSpec::new(vec![2, 2, 2], Activation::Identity, 0).unwrap();
        let eye = DenseTensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let net = Mlp::from_parts(
            spec,
            vec![eye.clone(), eye],
            vec![DenseTensor::zeros(&[2]), DenseTensor::zeros(&[2])],
        )
        .unwrap();
        let x = DenseTensor::from_rows(&[[1.0, 2.0]]).unwrap();
        assert_eq!(net.predict(&x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn single_linear_unit() {
        let net = linear(vec![vec![2.0]], vec![1.0]);
        let x = DenseTensor::from_rows(&[[3.0]]).unwrap();
        assert_eq!(net.predict(&x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn scalar_chain_rule() {
        let net = linear(vec![vec![0.5]], vec![0.0]);
        let x = DenseTensor::from_rows(&[[2.0]]).unwrap();
        let (_, cache) = net.forward(&x).unwrap();
        let g = net
            .backward(&cache, &DenseTensor::from_rows(&[[1.0]]).unwrap())
            .unwrap();
        assert_eq!(g.weights[0].data(), &[2.0]);
        assert_eq!(g.biases[0].data(), &[1.0]);
        assert_eq!(g.input.data(), &[0.5]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let net = Mlp::<f64>::init(MlpSpec::new(vec![3, 5, 2], Activation::Tanh, 9).unwrap()).unwrap();
        let x = DenseTensor::from_rows(&[[0.1, -0.3, 0.7], [1.0, 0.5, -2.0]]).unwrap();
        let (_, cache) = net.forward(&x).unwrap();
        let g = net.backward(&cache, &DenseTensor::zeros(&[2, 2])).unwrap();
        assert!(g.tensors().iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn dimension_error_names_layer() {
        let net = Mlp::<f32>::init(MlpSpec::new(vec![3, 4, 2], Activation::Relu, 1).unwrap()).unwrap();
        let x = DenseTensor::from_rows(&[[1.0f32, 2.0]]).unwrap();
        match net.forward(&x) {
            Err(Error::Dimension { layer: 0, expected: 3, got: 2 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn stale_or_foreign_cache_is_rejected() {
        let spec = MlpSpec::new(vec![2, 3, 1], Activation::Relu, 4).unwrap();
        let mut net = Mlp::<f32>::init(spec).unwrap();
        let x = DenseTensor::from_rows(&[[1.0f32, 2.0]]).unwrap();
        let (_, cache) = net.forward(&x).unwrap();
        let g = DenseTensor::zeros(&[1, 1]);

        let other = Mlp::<f32>::init(MlpSpec::new(vec![2, 4, 1], Activation::Relu, 4).unwrap()).unwrap();
        assert!(matches!(other.backward(&cache, &g), Err(Error::Contract(_))));

        net.parameters_mut()[0].data_mut()[0] += 1.0;
        assert!(matches!(net.backward(&cache, &g), Err(Error::Contract(_))));
    }

    #[test]
    fn spec_rejects_bad_layouts() {
        assert!(MlpSpec::new(vec![3], Activation::Relu, 0).is_err());
        assert!(MlpSpec::new(vec![3, 0, 1], Activation::Relu, 0).is_err());
        assert!(MlpSpec::with_activations(vec![3, 2, 1], vec![], 0).is_err());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let spec = MlpSpec::new(vec![10, 6, 4], Activation::Relu, 42).unwrap();
        let a = Mlp::<f32>::init(spec.clone()).unwrap();
        let b = Mlp::<f32>::init(spec).unwrap();
        assert_eq!(a.weights(), b.weights());
        let limit = (6.0f32 / 16.0).sqrt();
        assert!(a.weights()[0].data().iter().all(|v| v.abs() <= limit));
    }
}
