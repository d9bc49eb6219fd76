//! Grayscale images to patch tokens and back.

use serde::{Deserialize, Serialize};

use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};
use crate::{Error, Result};

/// Square image tiled by square, non-overlapping patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchConfig {
    pub image_side: usize,
    pub patch_side: usize,
    /// Token width produced by the patch projection.
    pub embed_dim: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig {
            image_side: 64,
            patch_side: 8,
            embed_dim: 64,
        }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_side == 0 || self.patch_side == 0 || self.embed_dim == 0 {
            return Err(Error::config("patch sizes must be positive"));
        }
        if self.image_side % self.patch_side != 0 {
            return Err(Error::config(format!(
                "image_side {} is not divisible by patch_side {}",
                self.image_side, self.patch_side
            )));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_side / self.patch_side
    }

    pub fn num_tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Pixels per patch (P²).
    pub fn patch_len(&self) -> usize {
        self.patch_side * self.patch_side
    }
}

/// Square grayscale image with row-major intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGray {
    side: usize,
    pixels: Vec<f32>,
}

impl ImageGray {
    pub fn new(side: usize, pixels: Vec<f32>) -> Result<Self> {
        if side == 0 || pixels.len() != side * side {
            return Err(Error::shape("image", &[side, side], &[pixels.len()]));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(ImageGray { side, pixels })
    }

    pub fn filled(side: usize, value: f32) -> Self {
        ImageGray {
            side,
            pixels: vec![value.clamp(0.0, 1.0); side * side],
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.side + col]
    }
}

/// Splits an image into `[N, P²]`; row `k` is the patch at grid `(k / g, k % g)`.
pub fn patchify<T: Real>(img: &ImageGray, cfg: &PatchConfig) -> Result<Tensor<T>> {
    cfg.validate()?;
    if img.side != cfg.image_side {
        return Err(Error::shape("patchify", &[img.side], &[cfg.image_side]));
    }
    let (g, p) = (cfg.grid_side(), cfg.patch_side);
    let mut data = Vec::with_capacity(img.pixels.len());
    for gr in 0..g {
        for gc in 0..g {
            for r in 0..p {
                let start = (gr * p + r) * img.side + gc * p;
                data.extend(img.pixels[start..start + p].iter().map(|&v| T::of(v as f64)));
            }
        }
    }
    Tensor::new(vec![g * g, p * p], data)
}

/// Reassembles patches produced by [`patchify`]. Values are clamped into `[0, 1]`.
pub fn unpatchify<T: Real>(patches: &Tensor<T>, cfg: &PatchConfig) -> Result<ImageGray> {
    cfg.validate()?;
    let (g, p) = (cfg.grid_side(), cfg.patch_side);
    if patches.shape() != [g * g, p * p] {
        return Err(Error::shape("unpatchify", patches.shape(), &[g * g, p * p]));
    }
    let side = cfg.image_side;
    let mut pixels = vec![0f32; side * side];
    for k in 0..g * g {
        let (gr, gc) = (k / g, k % g);
        for (i, &v) in patches.row(k).iter().enumerate() {
            let (r, c) = (i / p, i % p);
            pixels[(gr * p + r) * side + gc * p + c] = (v.as_f64() as f32).clamp(0.0, 1.0);
        }
    }
    Ok(ImageGray { side, pixels })
}

/// `patches @ proj_w + proj_b` on the tape.
pub fn embed_patches<T: Real>(
    tape: &mut Tape<'_, T>,
    patches: Var,
    proj_w: Var,
    proj_b: Var,
) -> Result<Var> {
    tape.linear(patches, proj_w, proj_b)
}

/// Fixed 2-D sine-cosine position table of shape `[g², dim]`.
///
/// Channels `0..dim/2` encode the grid row, channels `dim/2..dim` the grid
/// column. Within each half, channel `2i` is `sin(pos·ωᵢ)` and `2i+1` is
/// `cos(pos·ωᵢ)` with `ωᵢ = 10000^(-i/(dim/4))`, `i in 0..dim/4`.
pub fn sincos_table<T: Real>(grid_side: usize, dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || dim % 4 != 0 {
        return Err(Error::config(format!(
            "position encoding width {dim} must be a positive multiple of 4"
        )));
    }
    let quarter = dim / 4;
    let half = dim / 2;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 10000f64.powf(-(i as f64) / quarter as f64))
        .collect();
    let n = grid_side * grid_side;
    let mut data = vec![T::zero(); n * dim];
    for k in 0..n {
        let (row, col) = ((k / grid_side) as f64, (k % grid_side) as f64);
        let out = &mut data[k * dim..(k + 1) * dim];
        for (i, w) in omega.iter().enumerate() {
            out[2 * i] = T::of((row * w).sin());
            out[2 * i + 1] = T::of((row * w).cos());
            out[half + 2 * i] = T::of((col * w).sin());
            out[half + 2 * i + 1] = T::of((col * w).cos());
        }
    }
    Tensor::new(vec![n, dim], data)
}

/// Position table for the encoder tokens of `cfg`.
pub fn sincos_pos_embed<T: Real>(cfg: &PatchConfig) -> Result<Tensor<T>> {
    cfg.validate()?;
    sincos_table(cfg.grid_side(), cfg.embed_dim)
}
