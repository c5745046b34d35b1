use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeometry, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{init_rng, Bound, DeconvLayer, ParamStore};
use crate::patches::{PatchGrid, CHANNELS};
use crate::tensor::Float;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeconvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Three transposed-conv layers, each followed by ReLU.
///
/// Without explicit `layers` the stack is `k3 s1 p1` (keeps `m`), `k4 s2 p1`
/// (doubles to `2m`), then `k(N − 2m + 1) s1 p0` (lands on `N`). For the
/// 32-pixel, stride-2 grid that is 15 → 15 → 30 → 32.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub hidden: [usize; 2],
    pub layers: Option<Vec<DeconvSpec>>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            hidden: [128, 64],
            layers: None,
        }
    }
}

impl DecoderConfig {
    pub fn resolve(&self, grid: &PatchGrid) -> Result<Vec<DeconvSpec>> {
        let specs = match &self.layers {
            Some(layers) => layers.clone(),
            None => {
                let m = grid.per_side;
                let last = (grid.image_size + 1)
                    .checked_sub(2 * m)
                    .filter(|&k| k >= 1)
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "default decoder cannot grow a {m}x{m} grid to {0}x{0}; give explicit layers",
                            grid.image_size
                        ))
                    })?;
                vec![
                    DeconvSpec { out_channels: self.hidden[0], kernel: 3, stride: 1, padding: 1 },
                    DeconvSpec { out_channels: self.hidden[1], kernel: 4, stride: 2, padding: 1 },
                    DeconvSpec { out_channels: CHANNELS, kernel: last, stride: 1, padding: 0 },
                ]
            }
        };
        if specs.len() != 3 {
            return Err(Error::Config(format!("decoder needs 3 layers, got {}", specs.len())));
        }
        if specs[2].out_channels != CHANNELS {
            return Err(Error::Config("decoder must end in 3 channels".into()));
        }
        let mut side = grid.per_side;
        for s in &specs {
            if s.out_channels == 0 || s.kernel == 0 {
                return Err(Error::Config("decoder layers need channels and kernel >= 1".into()));
            }
            side = ConvGeometry::new(s.stride, s.padding).transposed_out(side, s.kernel)?;
        }
        if side != grid.image_size {
            return Err(Error::Config(format!(
                "decoder produces {side}x{side}, image is {0}x{0}",
                grid.image_size
            )));
        }
        Ok(specs)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder<F> {
    params: ParamStore<F>,
    layers: Vec<DeconvLayer>,
    specs: Vec<DeconvSpec>,
    in_channels: usize,
    grid: PatchGrid,
}

impl<F: Float> Decoder<F> {
    pub fn new(config: &DecoderConfig, grid: PatchGrid, atoms: usize, seed: u64) -> Result<Self> {
        let specs = config.resolve(&grid)?;
        let mut rng = init_rng(seed, 1);
        let mut params = ParamStore::new();
        let mut c_in = atoms;
        let layers = specs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let layer = DeconvLayer::new(
                    &mut params,
                    &format!("decoder.{i}"),
                    c_in,
                    s.out_channels,
                    s.kernel,
                    ConvGeometry::new(s.stride, s.padding),
                    &mut rng,
                );
                c_in = s.out_channels;
                layer
            })
            .collect();
        Ok(Self {
            params,
            layers,
            specs,
            in_channels: atoms,
            grid,
        })
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn specs(&self) -> &[DeconvSpec] {
        &self.specs
    }

    pub fn grid(&self) -> &PatchGrid {
        &self.grid
    }

    /// `[L, m, m] → [3, N, N]`.
    pub fn forward(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        let m = self.grid.per_side;
        let shape = tape.shape(x);
        if shape != [self.in_channels, m, m] {
            return Err(Error::shape("decoder", shape, &[self.in_channels, m, m]));
        }
        let mut h = x;
        for layer in &self.layers {
            let y = layer.forward(tape, p, h)?;
            h = tape.relu(y);
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::decode;
    use crate::tensor::Tensor;

    #[test]
    fn default_stack_restores_image_size() {
        let cifar = PatchGrid::new(32, 4, 2).unwrap();
        let specs = DecoderConfig::default().resolve(&cifar).unwrap();
        assert_eq!(specs[2].kernel, 3);
        let small = PatchGrid::new(16, 4, 2).unwrap();
        assert_eq!(DecoderConfig::default().resolve(&small).unwrap()[2].kernel, 3);
        // a grid too large for the default doubling
        let dense = PatchGrid::new(16, 2, 1).unwrap();
        assert!(DecoderConfig::default().resolve(&dense).is_err());
    }

    #[test]
    fn explicit_layers_are_shape_checked() {
        let grid = PatchGrid::new(16, 4, 2).unwrap();
        let bad = DecoderConfig {
            layers: Some(vec![
                DeconvSpec { out_channels: 8, kernel: 3, stride: 1, padding: 0 },
                DeconvSpec { out_channels: 8, kernel: 3, stride: 1, padding: 0 },
                DeconvSpec { out_channels: 3, kernel: 3, stride: 1, padding: 0 },
            ]),
            ..Default::default()
        };
        assert!(bad.resolve(&grid).is_err());
        let good = DecoderConfig {
            layers: Some(vec![
                DeconvSpec { out_channels: 8, kernel: 3, stride: 1, padding: 0 },
                DeconvSpec { out_channels: 8, kernel: 3, stride: 1, padding: 0 },
                DeconvSpec { out_channels: 3, kernel: 6, stride: 1, padding: 0 },
            ]),
            ..Default::default()
        };
        assert_eq!(good.resolve(&grid).unwrap().len(), 3);
    }

    #[test]
    fn cifar_shapes_and_zero_input() {
        let grid = PatchGrid::new(32, 4, 2).unwrap();
        let cfg = DecoderConfig { hidden: [8, 4], layers: None };
        let mut dec = Decoder::<f32>::new(&cfg, grid, 500, 0).unwrap();
        let out = decode(&Tensor::zeros(vec![15, 15, 500]), &dec).unwrap();
        assert_eq!(out.shape(), &[32, 32, 3]);
        assert!(out.data().iter().all(|&v| v == 0.0));
        // nonzero biases survive the ReLUs
        for (name, t) in dec.params_mut().tensors_mut().iter_mut().enumerate() {
            if name % 2 == 1 {
                t.data_mut().iter_mut().for_each(|v| *v = 0.5);
            }
        }
        let out = decode(&Tensor::zeros(vec![15, 15, 500]), &dec).unwrap();
        assert!(out.data().iter().any(|&v| v > 0.0));
        assert!(decode(&Tensor::zeros(vec![15, 15, 499]), &dec).is_err());
    }
}
