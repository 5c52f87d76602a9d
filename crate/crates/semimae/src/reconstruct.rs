//! Original / masked / reconstructed triptychs as PNG files.
//!
//! Masked patch cells are painted mid-grey (0.5) in the middle panel. The
//! right panel shows predictions at masked cells and the input at visible
//! ones.

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};
use semimae_core::mae::denormalize_patch;
use semimae_core::patch::{patchify, unpatchify};
use semimae_core::{Images, MaskPlan, Model};

pub const MASK_GREY: f64 = 0.5;
const GAP: u32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum ReconstructError {
    #[error(transparent)]
    Core(#[from] semimae_core::Error),
    #[error("cannot write {path}: {message}")]
    Write { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, ReconstructError>;

/// The three panels in image layout.
#[derive(Clone, Debug)]
pub struct Panels {
    pub original: Images,
    pub masked: Images,
    pub reconstructed: Images,
}

pub fn panels(model: &Model, images: &Images, plan: &MaskPlan) -> Result<Panels> {
    let patch = model.vit.encoder.patch_size;
    let grid = patchify(images, patch)?;
    let rec = model.reconstruct(images, plan)?;
    let norm_pix = model.branch.as_ref().is_some_and(|b| b.norm_pix_target);
    let mut masked = grid.clone();
    let mut filled = grid.clone();
    let d = grid.patch_dim();
    for b in 0..grid.batch {
        for &j in plan.masked(b) {
            let off = (b * grid.num_patches() + j) * d;
            masked.patches[off..off + d].fill(MASK_GREY);
            let pred = if norm_pix {
                denormalize_patch(rec.patch(b, j), grid.patch(b, j))
            } else {
                rec.patch(b, j).to_vec()
            };
            filled.patches[off..off + d].copy_from_slice(&pred);
        }
    }
    Ok(Panels {
        original: images.clone(),
        masked: unpatchify(&masked),
        reconstructed: unpatchify(&filled),
    })
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn pixel(img: &Images, i: usize, y: usize, x: usize) -> Rgb<u8> {
    let s = img.image(i);
    let hw = img.h * img.w;
    let at = |c: usize| to_u8(s[c * hw + y * img.w + x]);
    if img.c >= 3 {
        Rgb([at(0), at(1), at(2)])
    } else {
        let g = at(0);
        Rgb([g, g, g])
    }
}

/// Renders sample `i` with nearest-neighbour upscaling by `scale`.
pub fn render(p: &Panels, i: usize, scale: u32) -> RgbImage {
    let (h, w) = (p.original.h as u32, p.original.w as u32);
    let (ph, pw) = (h * scale, w * scale);
    let mut out: RgbImage = ImageBuffer::from_pixel(3 * pw + 2 * GAP, ph, Rgb([255, 255, 255]));
    for (k, panel) in [&p.original, &p.masked, &p.reconstructed]
        .into_iter()
        .enumerate()
    {
        let x0 = k as u32 * (pw + GAP);
        for y in 0..ph {
            for x in 0..pw {
                out.put_pixel(
                    x0 + x,
                    y,
                    pixel(panel, i, (y / scale) as usize, (x / scale) as usize),
                );
            }
        }
    }
    out
}

/// Upscale factor giving panels of at least 128 pixels.
pub fn default_scale(side: usize) -> u32 {
    (128 / side.max(1)).max(1) as u32
}

/// Writes `<dir>/reconstruction_<i>.png` for every sample.
pub fn write_triptychs(
    model: &Model,
    images: &Images,
    plan: &MaskPlan,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let p = panels(model, images, plan)?;
    let scale = default_scale(images.w);
    let mut paths = Vec::with_capacity(images.n);
    for i in 0..images.n {
        let path = dir.join(format!("reconstruction_{i:03}.png"));
        render(&p, i, scale)
            .save(&path)
            .map_err(|e| ReconstructError::Write {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        paths.push(path);
    }
    Ok(paths)
}

/// Fraction of patch cells in the middle panel of a rendered triptych that
/// are uniformly mask-grey.
pub fn grey_cell_fraction(triptych: &RgbImage, side: usize, patch: usize, scale: u32) -> f64 {
    let grey = to_u8(MASK_GREY);
    let cells = side / patch;
    let x0 = side as u32 * scale + GAP;
    let cell_px = patch as u32 * scale;
    let mut count = 0;
    for gy in 0..cells as u32 {
        for gx in 0..cells as u32 {
            let all_grey = (0..cell_px).all(|y| {
                (0..cell_px).all(|x| {
                    triptych
                        .get_pixel(x0 + gx * cell_px + x, gy * cell_px + y)
                        .0
                        == [grey; 3]
                })
            });
            count += all_grey as usize;
        }
    }
    count as f64 / (cells * cells) as f64
}
