//! Weak and strong augmentation operators on single `[C, H, W]` images with
//! values in `[0, 1]`.
//!
//! The weak view is a random horizontal flip plus a random resized crop. The
//! strong view applies `k` operations drawn at random from a configurable
//! list, each with a random magnitude, followed by random erasing.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::AugmentConfig;

/// Image geometry for a single `[C, H, W]` buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

const FILL: f64 = 0.5;

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Bilinear sample of channel `ch` at continuous pixel-center coordinates;
/// points outside the image read `fill`.
fn bilinear(img: &[f64], g: Geometry, ch: usize, y: f64, x: f64, fill: f64) -> f64 {
    let (h, w) = (g.h as f64, g.w as f64);
    if y < -0.5 || x < -0.5 || y > h - 0.5 || x > w - 0.5 {
        return fill;
    }
    let y = y.clamp(0.0, h - 1.0);
    let x = x.clamp(0.0, w - 1.0);
    let (y0, x0) = (libm::floor(y) as usize, libm::floor(x) as usize);
    let (y1, x1) = ((y0 + 1).min(g.h - 1), (x0 + 1).min(g.w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |yy: usize, xx: usize| img[(ch * g.h + yy) * g.w + xx];
    let top = if fx == 0.0 {
        at(y0, x0)
    } else {
        at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx
    };
    let bot = if fx == 0.0 {
        at(y1, x0)
    } else {
        at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx
    };
    if fy == 0.0 {
        top
    } else {
        top * (1.0 - fy) + bot * fy
    }
}

/// Applies an inverse affine map (output pixel -> input pixel) about the
/// image center.
fn affine(img: &[f64], g: Geometry, inv: [[f64; 3]; 2]) -> Vec<f64> {
    let (cy, cx) = ((g.h as f64 - 1.0) / 2.0, (g.w as f64 - 1.0) / 2.0);
    let mut out = vec![0.0; img.len()];
    for y in 0..g.h {
        for x in 0..g.w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = inv[0][0] * dx + inv[0][1] * dy + inv[0][2] + cx;
            let sy = inv[1][0] * dx + inv[1][1] * dy + inv[1][2] + cy;
            for ch in 0..g.c {
                out[(ch * g.h + y) * g.w + x] = bilinear(img, g, ch, sy, sx, FILL);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeakAugment {
    pub flip_prob: f64,
    pub scale: (f64, f64),
    pub ratio: (f64, f64),
}

impl WeakAugment {
    pub fn from_config(cfg: &AugmentConfig) -> Self {
        Self {
            flip_prob: cfg.flip_prob,
            scale: (cfg.crop_scale_min, cfg.crop_scale_max),
            ratio: (cfg.crop_ratio_min, cfg.crop_ratio_max),
        }
    }

    /// Degenerate parameters: no flip, full-image crop.
    pub fn identity() -> Self {
        Self {
            flip_prob: 0.0,
            scale: (1.0, 1.0),
            ratio: (1.0, 1.0),
        }
    }

    pub fn apply<R: Rng + ?Sized>(&self, img: &[f64], g: Geometry, rng: &mut R) -> Vec<f64> {
        // Draws happen unconditionally so the stream advances the same way
        // regardless of parameter values.
        let flip = rng.gen::<f64>() < self.flip_prob;
        let area_frac = sample(rng, self.scale);
        let log_ratio = sample(rng, (libm::log(self.ratio.0), libm::log(self.ratio.1)));
        let (u, v): (f64, f64) = (rng.gen(), rng.gen());

        let area = area_frac * (g.h * g.w) as f64;
        let ratio = libm::exp(log_ratio);
        let cw = libm::sqrt(area * ratio).clamp(1.0, g.w as f64);
        let ch = libm::sqrt(area / ratio).clamp(1.0, g.h as f64);
        let x0 = u * (g.w as f64 - cw);
        let y0 = v * (g.h as f64 - ch);

        let full = cw == g.w as f64 && ch == g.h as f64;
        let mut out = if full {
            img.to_vec()
        } else {
            let (sy, sx) = (ch / g.h as f64, cw / g.w as f64);
            let mut out = vec![0.0; img.len()];
            for y in 0..g.h {
                let src_y = y0 + (y as f64 + 0.5) * sy - 0.5;
                for x in 0..g.w {
                    let src_x = x0 + (x as f64 + 0.5) * sx - 0.5;
                    for c in 0..g.c {
                        out[(c * g.h + y) * g.w + x] = bilinear(img, g, c, src_y, src_x, FILL);
                    }
                }
            }
            out
        };
        if flip {
            for c in 0..g.c {
                for y in 0..g.h {
                    out[(c * g.h + y) * g.w..(c * g.h + y + 1) * g.w].reverse();
                }
            }
        }
        out.iter_mut().for_each(|v| *v = clamp01(*v));
        out
    }
}

fn sample<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    let u: f64 = rng.gen();
    lo + (hi - lo) * u
}

/// Operations available to the strong policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrongOp {
    Identity,
    AutoContrast,
    Brightness,
    Color,
    Contrast,
    Equalize,
    Posterize,
    Rotate,
    Sharpness,
    ShearX,
    ShearY,
    Solarize,
    TranslateX,
    TranslateY,
}

impl StrongOp {
    pub const ALL: [StrongOp; 14] = [
        StrongOp::Identity,
        StrongOp::AutoContrast,
        StrongOp::Brightness,
        StrongOp::Color,
        StrongOp::Contrast,
        StrongOp::Equalize,
        StrongOp::Posterize,
        StrongOp::Rotate,
        StrongOp::Sharpness,
        StrongOp::ShearX,
        StrongOp::ShearY,
        StrongOp::Solarize,
        StrongOp::TranslateX,
        StrongOp::TranslateY,
    ];

    /// Applies the op at magnitude `m` in `[0, 1]`; `sign` flips the
    /// direction for signed ops.
    pub fn apply(self, img: &[f64], g: Geometry, m: f64, sign: f64) -> Vec<f64> {
        let mut out = match self {
            StrongOp::Identity => img.to_vec(),
            StrongOp::AutoContrast => autocontrast(img, g),
            StrongOp::Brightness => blend(img, &vec![0.0; img.len()], 1.0 + sign * 0.9 * m),
            StrongOp::Color => blend(img, &grayscale(img, g), 1.0 + sign * 0.9 * m),
            StrongOp::Contrast => {
                let gray = grayscale(img, g);
                let mean = gray.iter().sum::<f64>() / gray.len() as f64;
                blend(img, &vec![mean; img.len()], 1.0 + sign * 0.9 * m)
            }
            StrongOp::Equalize => equalize(img, g),
            StrongOp::Posterize => {
                let bits = 8 - libm::round(4.0 * m) as u32;
                let mask = !((1u32 << (8 - bits)) - 1) & 0xff;
                img.iter()
                    .map(|&v| ((libm::round(v * 255.0) as u32) & mask) as f64 / 255.0)
                    .collect()
            }
            StrongOp::Rotate => {
                let a = sign * m * 30f64.to_radians();
                let (s, c) = (libm::sin(a), libm::cos(a));
                affine(img, g, [[c, s, 0.0], [-s, c, 0.0]])
            }
            StrongOp::Sharpness => blend(img, &smooth(img, g), 1.0 + sign * 0.9 * m),
            StrongOp::ShearX => affine(img, g, [[1.0, sign * 0.3 * m, 0.0], [0.0, 1.0, 0.0]]),
            StrongOp::ShearY => affine(img, g, [[1.0, 0.0, 0.0], [sign * 0.3 * m, 1.0, 0.0]]),
            StrongOp::Solarize => {
                let threshold = 1.0 - m;
                img.iter()
                    .map(|&v| if v > threshold { 1.0 - v } else { v })
                    .collect()
            }
            StrongOp::TranslateX => affine(
                img,
                g,
                [[1.0, 0.0, sign * 0.3 * m * g.w as f64], [0.0, 1.0, 0.0]],
            ),
            StrongOp::TranslateY => affine(
                img,
                g,
                [[1.0, 0.0, 0.0], [0.0, 1.0, sign * 0.3 * m * g.h as f64]],
            ),
        };
        out.iter_mut().for_each(|v| *v = clamp01(*v));
        out
    }
}

/// `base + factor * (img - base)`.
fn blend(img: &[f64], base: &[f64], factor: f64) -> Vec<f64> {
    img.iter()
        .zip(base)
        .map(|(&x, &b)| b + factor * (x - b))
        .collect()
}

/// Luma broadcast to every channel (single-channel images pass through).
fn grayscale(img: &[f64], g: Geometry) -> Vec<f64> {
    if g.c != 3 {
        return img.to_vec();
    }
    let plane = g.h * g.w;
    let mut out = vec![0.0; img.len()];
    for i in 0..plane {
        let y = 0.299 * img[i] + 0.587 * img[plane + i] + 0.114 * img[2 * plane + i];
        for c in 0..3 {
            out[c * plane + i] = y;
        }
    }
    out
}

fn autocontrast(img: &[f64], g: Geometry) -> Vec<f64> {
    let plane = g.h * g.w;
    let mut out = img.to_vec();
    for c in 0..g.c {
        let ch = &mut out[c * plane..(c + 1) * plane];
        let lo = ch.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = ch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            ch.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
        }
    }
    out
}

/// Per-channel histogram equalization over 256 levels.
fn equalize(img: &[f64], g: Geometry) -> Vec<f64> {
    let plane = g.h * g.w;
    let mut out = img.to_vec();
    for c in 0..g.c {
        let ch = &mut out[c * plane..(c + 1) * plane];
        let levels: Vec<usize> = ch
            .iter()
            .map(|&v| libm::round(clamp01(v) * 255.0) as usize)
            .collect();
        let mut hist = [0usize; 256];
        for &l in &levels {
            hist[l] += 1;
        }
        let mut cdf = [0usize; 256];
        let mut acc = 0;
        for (i, h) in hist.iter().enumerate() {
            acc += h;
            cdf[i] = acc;
        }
        let cdf_min = cdf.iter().copied().find(|&v| v > 0).unwrap_or(0);
        if plane == cdf_min {
            continue;
        }
        for (v, &l) in ch.iter_mut().zip(&levels) {
            *v = (cdf[l] - cdf_min) as f64 / (plane - cdf_min) as f64;
        }
    }
    out
}

/// 3x3 smoothing with center weight 5 and neighbour weight 1; borders are
/// left unchanged.
fn smooth(img: &[f64], g: Geometry) -> Vec<f64> {
    let mut out = img.to_vec();
    if g.h < 3 || g.w < 3 {
        return out;
    }
    for c in 0..g.c {
        for y in 1..g.h - 1 {
            for x in 1..g.w - 1 {
                let mut acc = 0.0;
                for dy in 0..3 {
                    for dx in 0..3 {
                        let wgt = if dy == 1 && dx == 1 { 5.0 } else { 1.0 };
                        acc += wgt * img[(c * g.h + y + dy - 1) * g.w + x + dx - 1];
                    }
                }
                out[(c * g.h + y) * g.w + x] = acc / 13.0;
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct RandomErasing {
    pub prob: f64,
    pub scale: (f64, f64),
    pub ratio: (f64, f64),
}

impl RandomErasing {
    /// Replaces a random rectangle with uniform noise.
    pub fn apply<R: Rng + ?Sized>(&self, img: &mut [f64], g: Geometry, rng: &mut R) {
        if self.prob <= 0.0 || rng.gen::<f64>() >= self.prob {
            return;
        }
        let area = sample(rng, self.scale) * (g.h * g.w) as f64;
        let ratio = libm::exp(sample(
            rng,
            (libm::log(self.ratio.0), libm::log(self.ratio.1)),
        ));
        let eh = (libm::round(libm::sqrt(area * ratio)) as usize).clamp(1, g.h);
        let ew = (libm::round(libm::sqrt(area / ratio)) as usize).clamp(1, g.w);
        let y0 = rng.gen_range(0..=g.h - eh);
        let x0 = rng.gen_range(0..=g.w - ew);
        for c in 0..g.c {
            for y in y0..y0 + eh {
                for x in x0..x0 + ew {
                    img[(c * g.h + y) * g.w + x] = rng.gen::<f64>();
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StrongAugment {
    /// Flip and crop drawn independently of the weak view.
    pub base: WeakAugment,
    pub ops: Vec<StrongOp>,
    pub num_ops: usize,
    pub magnitude_max: f64,
    pub erasing: RandomErasing,
}

impl StrongAugment {
    pub fn from_config(cfg: &AugmentConfig) -> Self {
        Self {
            base: WeakAugment::from_config(cfg),
            ops: cfg.strong_ops.clone(),
            num_ops: cfg.strong_num_ops,
            magnitude_max: cfg.strong_magnitude_max,
            erasing: RandomErasing {
                prob: cfg.erase_prob,
                scale: (cfg.erase_scale_min, cfg.erase_scale_max),
                ratio: (cfg.erase_ratio_min, cfg.erase_ratio_max),
            },
        }
    }

    /// No flip or crop, zero ops and erasing disabled.
    pub fn identity() -> Self {
        Self {
            base: WeakAugment::identity(),
            ops: StrongOp::ALL.to_vec(),
            num_ops: 0,
            magnitude_max: 1.0,
            erasing: RandomErasing {
                prob: 0.0,
                scale: (0.02, 0.25),
                ratio: (0.3, 3.3),
            },
        }
    }

    pub fn apply<R: Rng + ?Sized>(&self, img: &[f64], g: Geometry, rng: &mut R) -> Vec<f64> {
        let mut out = self.base.apply(img, g, rng);
        if !self.ops.is_empty() {
            for _ in 0..self.num_ops {
                let op = self.ops[rng.gen_range(0..self.ops.len())];
                let m = self.magnitude_max * rng.gen::<f64>();
                let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                out = op.apply(&out, g, m, sign);
            }
        }
        self.erasing.apply(&mut out, g, rng);
        out.iter_mut().for_each(|v| *v = clamp01(*v));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;
    use rand_core::SeedableRng;

    const G: Geometry = Geometry { c: 3, h: 16, w: 16 };

    fn image(seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..G.c * G.h * G.w).map(|_| rng.gen()).collect()
    }

    #[test]
    fn degenerate_parameters_are_identity() {
        let img = image(0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(WeakAugment::identity().apply(&img, G, &mut rng), img);
        assert_eq!(StrongAugment::identity().apply(&img, G, &mut rng), img);
        for op in StrongOp::ALL {
            if op == StrongOp::Equalize || op == StrongOp::AutoContrast || op == StrongOp::Posterize
            {
                continue;
            }
            let out = op.apply(&img, G, 0.0, 1.0);
            for (a, b) in out.iter().zip(&img) {
                assert!((a - b).abs() < 1e-12, "{op:?}");
            }
        }
    }

    #[test]
    fn shapes_ranges_and_determinism() {
        let cfg = AugmentConfig::default();
        let weak = WeakAugment::from_config(&cfg);
        let strong = StrongAugment::from_config(&cfg);
        let img = image(2);
        for seed in 0..50 {
            let a = weak.apply(&img, G, &mut ChaCha8Rng::seed_from_u64(seed));
            let b = strong.apply(&img, G, &mut ChaCha8Rng::seed_from_u64(seed));
            assert_eq!(a.len(), img.len());
            assert_eq!(b.len(), img.len());
            assert!(a.iter().chain(&b).all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(a, weak.apply(&img, G, &mut ChaCha8Rng::seed_from_u64(seed)));
            assert_eq!(
                b,
                strong.apply(&img, G, &mut ChaCha8Rng::seed_from_u64(seed))
            );
        }
        for op in StrongOp::ALL {
            let out = op.apply(&img, G, 1.0, -1.0);
            assert!(out.iter().all(|v| (0.0..=1.0).contains(v)), "{op:?}");
        }
    }

    #[test]
    fn flip_mirrors_columns() {
        let img = image(3);
        let aug = WeakAugment {
            flip_prob: 1.0,
            ..WeakAugment::identity()
        };
        let out = aug.apply(&img, G, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(out[0], img[G.w - 1]);
        assert_eq!(out[G.w + 3], img[2 * G.w - 4]);
    }

    #[test]
    fn strong_view_moves_pixels_further_than_weak_view() {
        let cfg = AugmentConfig::default();
        let weak = WeakAugment::from_config(&cfg);
        let strong = StrongAugment::from_config(&cfg);
        // Smooth fixture so that geometric ops are not dominated by noise.
        let img: Vec<f64> = (0..G.c * G.h * G.w)
            .map(|i| {
                let (c, y, x) = (i / 256, (i / 16) % 16, i % 16);
                0.5 + 0.4 * libm::sin(0.3 * x as f64 + 0.2 * y as f64 + c as f64)
            })
            .collect();
        let l1 = |a: &[f64]| {
            a.iter().zip(&img).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 1000;
        let (mut w, mut s) = (0.0, 0.0);
        for _ in 0..draws {
            w += l1(&weak.apply(&img, G, &mut rng));
            s += l1(&strong.apply(&img, G, &mut rng));
        }
        assert!(s / draws as f64 > w / draws as f64, "strong {s} weak {w}");
    }
}
