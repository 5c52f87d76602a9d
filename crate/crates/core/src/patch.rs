//! Reversible image <-> patch-sequence conversion.
//!
//! Patches are enumerated row-major (top-left to bottom-right). Inside a
//! patch, values are laid out as `(row, col, channel)` so a flattened patch
//! has length `patch_size^2 * channels`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Images;

#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub batch: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_size: usize,
    pub channels: usize,
    /// `[batch, grid_h * grid_w, patch_size^2 * channels]`.
    pub patches: Vec<f64>,
}

impl PatchGrid {
    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn patch(&self, b: usize, j: usize) -> &[f64] {
        let l = self.patch_dim();
        let off = (b * self.num_patches() + j) * l;
        &self.patches[off..off + l]
    }

    /// Patches of sample `b` as one contiguous `[N, L]` block.
    pub fn sample(&self, b: usize) -> &[f64] {
        let l = self.patch_dim() * self.num_patches();
        &self.patches[b * l..(b + 1) * l]
    }
}

pub fn patchify(images: &Images, patch_size: usize) -> Result<PatchGrid> {
    if patch_size == 0
        || !images.h.is_multiple_of(patch_size)
        || !images.w.is_multiple_of(patch_size)
    {
        return Err(Error::Shape(format!(
            "{}x{} image is not divisible into {patch_size}x{patch_size} patches",
            images.h, images.w
        )));
    }
    let (c, h, w, p) = (images.c, images.h, images.w, patch_size);
    let (gh, gw) = (h / p, w / p);
    let l = p * p * c;
    let mut patches = vec![0.0; images.n * gh * gw * l];
    for b in 0..images.n {
        let img = images.image(b);
        for gy in 0..gh {
            for gx in 0..gw {
                let base = ((b * gh + gy) * gw + gx) * l;
                for py in 0..p {
                    for px in 0..p {
                        let (y, x) = (gy * p + py, gx * p + px);
                        for ch in 0..c {
                            patches[base + (py * p + px) * c + ch] = img[(ch * h + y) * w + x];
                        }
                    }
                }
            }
        }
    }
    Ok(PatchGrid {
        batch: images.n,
        grid_h: gh,
        grid_w: gw,
        patch_size: p,
        channels: c,
        patches,
    })
}

pub fn unpatchify(grid: &PatchGrid) -> Images {
    let (p, c) = (grid.patch_size, grid.channels);
    let (h, w) = (grid.grid_h * p, grid.grid_w * p);
    let l = grid.patch_dim();
    let mut out = Images::zeros(grid.batch, c, h, w);
    for b in 0..grid.batch {
        let img = out.image_mut(b);
        for gy in 0..grid.grid_h {
            for gx in 0..grid.grid_w {
                let base = ((b * grid.grid_h + gy) * grid.grid_w + gx) * l;
                for py in 0..p {
                    for px in 0..p {
                        let (y, x) = (gy * p + py, gx * p + px);
                        for ch in 0..c {
                            img[(ch * h + y) * w + x] = grid.patches[base + (py * p + px) * c + ch];
                        }
                    }
                }
            }
        }
    }
    out
}
