//! Parameter storage and the handful of layers the decoder and classifier
//! are assembled from.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{ConvGeometry, Gradients, Tape, Var};
use crate::error::Result;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Places every parameter on `tape`, differentiable when `trainable`.
    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.var(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Gradients for every parameter in store order; zeros where the loss
    /// does not depend on a parameter.
    pub fn collect_grads(&self, bound: &Bound, grads: &mut Gradients<F>) -> Vec<Tensor<F>> {
        bound
            .vars
            .iter()
            .zip(&self.tensors)
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect()
    }
}

/// Tape handles for one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// He-normal initializer over `fan_in`.
pub(crate) fn he_normal<F: Float>(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor<F> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| F::of(std * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Tensor::new(shape, data).expect("init extents")
}

pub(crate) fn init_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeometry,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        geom: ConvGeometry,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            he_normal(rng, vec![c_out, c_in, kernel, kernel], c_in * kernel * kernel),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![c_out]));
        Self { weight, bias, geom }
    }

    pub fn forward<F: Float>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, p.var(self.weight), self.geom)?;
        tape.add_channel_bias(y, p.var(self.bias))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DeconvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeometry,
}

impl DeconvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        geom: ConvGeometry,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        // each output pixel sees about c_in·k²/s² inputs
        let fan_in = (c_in * kernel * kernel / (geom.stride * geom.stride)).max(1);
        let weight = store.add(
            format!("{name}.weight"),
            he_normal(rng, vec![c_in, c_out, kernel, kernel], fan_in),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![c_out]));
        Self { weight, bias, geom }
    }

    pub fn forward<F: Float>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv_transpose2d(x, p.var(self.weight), self.geom)?;
        tape.add_channel_bias(y, p.var(self.bias))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl DenseLayer {
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            he_normal(rng, vec![outputs, inputs], inputs),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![outputs]));
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    /// `[inputs] → [outputs]`.
    pub fn forward<F: Float>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        let col = tape.reshape(x, vec![self.inputs, 1])?;
        let y = tape.matmul(p.var(self.weight), col)?;
        let y = tape.reshape(y, vec![self.outputs])?;
        tape.add_channel_bias(y, p.var(self.bias))
    }
}
