//! Overlapping square patches on an `N × N × 3` image.
//!
//! Images are stored height-width-channel (`[N, N, 3]`). A patch is flattened
//! channel-major: entry `(c, r, q)` of the `n × n × 3` block lands at
//! `c·n² + r·n + q`. Dictionary learning and the encoder both rely on this
//! order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    /// Image side in pixels.
    pub image_size: usize,
    /// Patch side in pixels.
    pub patch_size: usize,
    pub stride: usize,
    /// Patches per side.
    pub per_side: usize,
}

impl PatchGrid {
    pub fn new(image_size: usize, patch_size: usize, stride: usize) -> Result<Self> {
        if patch_size == 0 || stride == 0 {
            return Err(Error::invalid("patch size and stride must be >= 1"));
        }
        if patch_size > image_size {
            return Err(Error::invalid(format!(
                "patch size {patch_size} exceeds image size {image_size}"
            )));
        }
        Ok(Self {
            image_size,
            patch_size,
            stride,
            per_side: (image_size - patch_size) / stride + 1,
        })
    }

    /// Flattened patch length, `3n²`.
    pub fn patch_dim(&self) -> usize {
        CHANNELS * self.patch_size * self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.per_side * self.per_side
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_size, self.image_size, CHANNELS]
    }

    /// Copies patch `(i, j)` (top-left pixel `(i·S, j·S)`) into `out`.
    pub fn patch_into<F: Float>(&self, image: &[F], i: usize, j: usize, out: &mut [F]) {
        let (n, big) = (self.patch_size, self.image_size);
        let (y0, x0) = (i * self.stride, j * self.stride);
        for c in 0..CHANNELS {
            for r in 0..n {
                for q in 0..n {
                    out[(c * n + r) * n + q] = image[((y0 + r) * big + x0 + q) * CHANNELS + c];
                }
            }
        }
    }
}

/// All patches of `image: [N, N, 3]` as a `[m, m, 3n²]` tensor.
pub fn extract_patches<F: Float>(image: &Tensor<F>, grid: &PatchGrid) -> Result<Tensor<F>> {
    image.check_shape("extract_patches", &grid.image_shape())?;
    let (m, dim) = (grid.per_side, grid.patch_dim());
    let mut out = vec![F::zero(); m * m * dim];
    for i in 0..m {
        for j in 0..m {
            let at = (i * m + j) * dim;
            grid.patch_into(image.data(), i, j, &mut out[at..at + dim]);
        }
    }
    Tensor::new(vec![m, m, dim], out)
}
