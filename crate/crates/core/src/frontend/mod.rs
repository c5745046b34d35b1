//! The defense frontend: patch projection onto the dictionary, top-T
//! selection per patch, the quantizing activation, and a transposed-conv
//! decoder back to image size.
//!
//! Public tensors use the fiber-last layout `[m, m, L]` (and `[N, N, 3]` for
//! images). Inside a [`Tape`] the same data is channel-first, `[L, m, m]`,
//! so that the projection is an ordinary strided convolution whose filters
//! are the atoms.

mod decoder;

pub use decoder::{DeconvSpec, Decoder, DecoderConfig};

use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeometry, Tape, Var};
use crate::dictlearn::Dictionary;
use crate::error::{Error, Result};
use crate::patches::{PatchGrid, CHANNELS};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontendConfig {
    /// Coefficients kept per patch.
    pub top_t: usize,
    /// Threshold multiplier, > 1.
    pub beta: f64,
    /// Design ℓ∞ budget the thresholds are tuned for (pixel units).
    pub eps: f64,
    pub patch_size: usize,
    pub stride: usize,
    pub decoder: DecoderConfig,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            top_t: 15,
            beta: 3.0,
            eps: 8.0 / 255.0,
            patch_size: 4,
            stride: 2,
            decoder: DecoderConfig::default(),
        }
    }
}

impl FrontendConfig {
    pub fn grid(&self, image_size: usize) -> Result<PatchGrid> {
        PatchGrid::new(image_size, self.patch_size, self.stride)
    }

    pub fn validate(&self, atoms: usize) -> Result<()> {
        if self.top_t == 0 || self.top_t > atoms {
            return Err(Error::Config(format!(
                "top_t = {} must lie in 1..={atoms}",
                self.top_t
            )));
        }
        if !(self.beta > 1.0) {
            return Err(Error::Config(format!("beta = {} must exceed 1", self.beta)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps = {} must be positive", self.eps)));
        }
        Ok(())
    }
}

/// Projection, selection and quantization outputs, each `[m, m, L]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput<F> {
    pub projections: Tensor<F>,
    pub selected: Tensor<F>,
    pub quantized: Tensor<F>,
}

/// Tape handles for the encoder stages, each `[L, m, m]`.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub projection: Var,
    pub selected: Var,
    pub quantized: Var,
}

/// Frozen encoder: dictionary filters plus selection/activation settings.
#[derive(Clone, Debug)]
pub struct Encoder<F> {
    grid: PatchGrid,
    dictionary: Dictionary,
    filters: Tensor<F>,
    scales: Vec<F>,
    top_t: usize,
    eps: F,
    beta: F,
}

impl<F: Float> Encoder<F> {
    pub fn new(dictionary: Dictionary, grid: PatchGrid, top_t: usize, eps: f64, beta: f64) -> Result<Self> {
        if dictionary.patch_dim() != grid.patch_dim() {
            return Err(Error::shape(
                "encoder",
                &[dictionary.patch_dim()],
                &[grid.patch_dim()],
            ));
        }
        let l = dictionary.num_atoms();
        if top_t == 0 || top_t > l {
            return Err(Error::invalid(format!("top_t = {top_t} must lie in 1..={l}")));
        }
        if !(beta > 1.0) {
            return Err(Error::invalid(format!("beta = {beta} must exceed 1")));
        }
        if !(eps > 0.0) {
            return Err(Error::invalid(format!("eps = {eps} must be positive")));
        }
        let n = grid.patch_size;
        // channel-major patch flattening makes the column-major atoms exactly
        // the [L, 3, n, n] filter bank
        let filters = Tensor::new(
            vec![l, CHANNELS, n, n],
            dictionary.columns().iter().map(|&v| F::of(v)).collect(),
        )?;
        let scales = dictionary.l1_norms().iter().map(|&v| F::of(v)).collect();
        Ok(Self {
            grid,
            dictionary,
            filters,
            scales,
            top_t,
            eps: F::of(eps),
            beta: F::of(beta),
        })
    }

    pub fn from_config(dictionary: Dictionary, image_size: usize, config: &FrontendConfig) -> Result<Self> {
        config.validate(dictionary.num_atoms())?;
        let grid = config.grid(image_size)?;
        Self::new(dictionary, grid, config.top_t, config.eps, config.beta)
    }

    pub fn grid(&self) -> &PatchGrid {
        &self.grid
    }

    pub fn dictionary(&self) -> &Dictionary {
        &self.dictionary
    }

    pub fn num_atoms(&self) -> usize {
        self.scales.len()
    }

    pub fn top_t(&self) -> usize {
        self.top_t
    }

    pub fn eps(&self) -> F {
        self.eps
    }

    pub fn beta(&self) -> F {
        self.beta
    }

    /// Records the encoder on `tape` for a channel-first image `[3, N, N]`.
    pub fn forward(&self, tape: &mut Tape<F>, image_chw: Var) -> Result<EncoderVars> {
        let shape = tape.shape(image_chw);
        let n = self.grid.image_size;
        if shape != [CHANNELS, n, n] {
            return Err(Error::shape("encoder", shape, &[CHANNELS, n, n]));
        }
        let filters = tape.constant(self.filters.clone());
        let projection = tape.conv2d(image_chw, filters, ConvGeometry::new(self.grid.stride, 0))?;
        let selected = tape.top_t(projection, self.top_t)?;
        let quantized = tape.quantize(selected, &self.scales, self.eps, self.beta)?;
        Ok(EncoderVars {
            projection,
            selected,
            quantized,
        })
    }

    /// Runs the encoder on an `[N, N, 3]` image, returning all stages.
    pub fn encode(&self, image: &Tensor<F>) -> Result<EncoderOutput<F>> {
        let mut tape = Tape::new();
        let x = tape.constant(hwc_to_chw(image)?);
        let vars = self.forward(&mut tape, x)?;
        Ok(EncoderOutput {
            projections: chw_to_hwc(tape.value(vars.projection))?,
            selected: chw_to_hwc(tape.value(vars.selected))?,
            quantized: chw_to_hwc(tape.value(vars.quantized))?,
        })
    }
}

/// `[H, W, C] → [C, H, W]`.
pub fn hwc_to_chw<F: Float>(t: &Tensor<F>) -> Result<Tensor<F>> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(Error::shape("hwc_to_chw", s, &[0, 0, 0]));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let src = t.data();
    let mut out = vec![F::zero(); t.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[(ch * h + y) * w + x] = src[(y * w + x) * c + ch];
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// `[C, H, W] → [H, W, C]`.
pub fn chw_to_hwc<F: Float>(t: &Tensor<F>) -> Result<Tensor<F>> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(Error::shape("chw_to_hwc", s, &[0, 0, 0]));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let src = t.data();
    let mut out = vec![F::zero(); t.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(y * w + x) * c + ch] = src[(ch * h + y) * w + x];
            }
        }
    }
    Tensor::new(vec![h, w, c], out)
}

/// Projections `Dᵀx_ij` of every patch of `image: [N, N, 3]`, as `[m, m, L]`.
pub fn project<F: Float>(image: &Tensor<F>, dict: &Dictionary, grid: &PatchGrid) -> Result<Tensor<F>> {
    image.check_shape("project", &grid.image_shape())?;
    if dict.patch_dim() != grid.patch_dim() {
        return Err(Error::shape("project", &[dict.patch_dim()], &[grid.patch_dim()]));
    }
    let n = grid.patch_size;
    let filters = Tensor::new(
        vec![dict.num_atoms(), CHANNELS, n, n],
        dict.columns().iter().map(|&v| F::of(v)).collect(),
    )?;
    let mut tape = Tape::new();
    let x = tape.constant(hwc_to_chw(image)?);
    let w = tape.constant(filters);
    let y = tape.conv2d(x, w, ConvGeometry::new(grid.stride, 0))?;
    chw_to_hwc(tape.value(y))
}

fn fiber_last(op: &'static str, x: &Tensor<impl Float>) -> Result<(usize, usize)> {
    match x.shape() {
        [m1, m2, l] if *l > 0 => Ok((m1 * m2, *l)),
        s => Err(Error::shape(op, s, &[0, 0, 0])),
    }
}

/// Keeps the `t` largest-magnitude entries of each `[.., .., L]` fiber;
/// ties go to the lower atom index.
pub fn top_t<F: Float>(projections: &Tensor<F>, t: usize) -> Result<Tensor<F>> {
    let (fibers, l) = fiber_last("top_t", projections)?;
    if t == 0 || t > l {
        return Err(Error::invalid(format!("top_t: T={t} outside 1..={l}")));
    }
    let mut out = Tensor::zeros(projections.shape().to_vec());
    for f in 0..fibers {
        let src = &projections.data()[f * l..(f + 1) * l];
        for i in crate::autodiff::top_k_indices(src, t) {
            out.data_mut()[f * l + i] = src[i];
        }
    }
    Ok(out)
}

/// `sign(x̂)·‖d_l‖₁` where `|x̂| / (ε‖d_l‖₁) ≥ β`, else 0, on `[m, m, L]`.
pub fn quantized_activation<F: Float>(selected: &Tensor<F>, l1_norms: &[F], eps: F, beta: F) -> Result<Tensor<F>> {
    let (_, l) = fiber_last("quantized_activation", selected)?;
    if l != l1_norms.len() {
        return Err(Error::shape("quantized_activation", selected.shape(), &[l1_norms.len()]));
    }
    if !(eps > F::zero()) {
        return Err(Error::invalid("quantized_activation: eps must be positive"));
    }
    // reuse the tape kernel on a [L, fibers, 1] view
    let chw = fiber_to_channels(selected, l);
    let q = crate::autodiff::quantize_values(&chw, l1_norms, eps, beta);
    Ok(channels_to_fiber(&q, selected.shape()))
}

fn fiber_to_channels<F: Float>(x: &Tensor<F>, l: usize) -> Tensor<F> {
    let fibers = x.len() / l;
    let mut out = vec![F::zero(); x.len()];
    for f in 0..fibers {
        for c in 0..l {
            out[c * fibers + f] = x.data()[f * l + c];
        }
    }
    Tensor::new(vec![l, fibers, 1], out).expect("extents")
}

fn channels_to_fiber<F: Float>(x: &Tensor<F>, shape: &[usize]) -> Tensor<F> {
    let l = x.shape()[0];
    let fibers = x.len() / l;
    let mut out = vec![F::zero(); x.len()];
    for c in 0..l {
        for f in 0..fibers {
            out[f * l + c] = x.data()[c * fibers + f];
        }
    }
    Tensor::new(shape.to_vec(), out).expect("extents")
}

/// Project, select and quantize `image: [N, N, 3]`.
pub fn encode<F: Float>(image: &Tensor<F>, encoder: &Encoder<F>) -> Result<EncoderOutput<F>> {
    encoder.encode(image)
}

/// Decoder forward pass on `quantized: [m, m, L]`, giving `[N, N, 3]`.
pub fn decode<F: Float>(quantized: &Tensor<F>, decoder: &Decoder<F>) -> Result<Tensor<F>> {
    let mut tape = Tape::new();
    let x = tape.constant(hwc_to_chw(quantized)?);
    let p = decoder.params().bind(&mut tape, false);
    let y = decoder.forward(&mut tape, &p, x)?;
    chw_to_hwc(tape.value(y))
}
