//! The ten colour-space operations of the search space.
//!
//! All arithmetic is fixed so that other implementations can match outputs
//! byte for byte:
//!
//! * Blends (`Brightness`, `Color`, `Contrast`, `Sharpness`) compute
//!   `(1 - a) * d + a * v` in `f64`, round half away from zero, then clamp to
//!   `[0, 255]`, where `v` is the source value, `d` the degenerate image and `a`
//!   the magnitude.
//! * Luminance is `round(0.299 * r + 0.587 * g + 0.114 * b)`.
//! * The `Contrast` degenerate is the constant `round(sum(L) / N)` over integer
//!   luminances `L`.
//! * The `Sharpness` degenerate smooths interior pixels with
//!   `[[1,1,1],[1,5,1],[1,1,1]] / 13` (integer sum, then `round(sum / 13)`) and
//!   copies border pixels.
//! * `Equalize` builds a per-channel LUT with `step = (N - h_last) / 255`
//!   (integer division, `h_last` the count of the highest occupied bin) and
//!   `LUT[i] = min(255, (cum[i-1] + step / 2) / step)`; `step == 0` leaves the
//!   channel untouched. The pass is repeated on its own output while the
//!   recomputed step differs from the one just used.
//! * `AutoContrast` maps `v -> round((v - lo) * 255 / (hi - lo))` per channel;
//!   constant channels are untouched.
//! * `Cutout` draws the patch centre as `cy = below(H)` then `cx = below(W)`
//!   from the [`SplitMix64`] stream, side `round(m * min(H, W))`, top-left at
//!   `(cy - side / 2, cx - side / 2)` (integer division), clipped to the
//!   image, filled with 0. The mask is never touched.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::image::Image;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    AutoContrast,
    Brightness,
    Color,
    Contrast,
    Cutout,
    Equalize,
    Invert,
    Posterize,
    Sharpness,
    Solarize,
}

impl OpKind {
    /// Token order used by the controller's operation head.
    pub const ALL: [OpKind; 10] = [
        OpKind::AutoContrast,
        OpKind::Brightness,
        OpKind::Color,
        OpKind::Contrast,
        OpKind::Cutout,
        OpKind::Equalize,
        OpKind::Invert,
        OpKind::Posterize,
        OpKind::Sharpness,
        OpKind::Solarize,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).unwrap()
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::AutoContrast => "AutoContrast",
            OpKind::Brightness => "Brightness",
            OpKind::Color => "Color",
            OpKind::Contrast => "Contrast",
            OpKind::Cutout => "Cutout",
            OpKind::Equalize => "Equalize",
            OpKind::Invert => "Invert",
            OpKind::Posterize => "Posterize",
            OpKind::Sharpness => "Sharpness",
            OpKind::Solarize => "Solarize",
        }
    }

    /// Closed magnitude interval, or `None` for parameterless kinds.
    pub fn magnitude_range(self) -> Option<(f64, f64)> {
        match self {
            OpKind::Brightness | OpKind::Color | OpKind::Contrast | OpKind::Sharpness => {
                Some((0.1, 1.9))
            }
            OpKind::Cutout => Some((0.0, 0.2)),
            OpKind::Posterize => Some((4.0, 8.0)),
            OpKind::Solarize => Some((0.0, 256.0)),
            OpKind::AutoContrast | OpKind::Equalize | OpKind::Invert => None,
        }
    }

    pub fn is_parameterless(self) -> bool {
        self.magnitude_range().is_none()
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::schema("op", format!("unknown operation name {s:?}")))
    }
}

/// Magnitude for grid index `level` of an `resolution`-point grid.
///
/// Computed as `lo + (hi - lo) * level / (resolution - 1)`; Posterize and
/// Solarize are rounded to integers, parameterless kinds return 0.
pub fn magnitude_value(kind: OpKind, level: u32, resolution: u32) -> Result<f64> {
    if resolution < 2 {
        return Err(Error::domain(format!(
            "magnitude grid needs at least 2 points, got {resolution}"
        )));
    }
    if level >= resolution {
        return Err(Error::domain(format!(
            "level {level} outside grid [0, {resolution})"
        )));
    }
    let Some((lo, hi)) = kind.magnitude_range() else {
        return Ok(0.0);
    };
    let v = lo + (hi - lo) * f64::from(level) / f64::from(resolution - 1);
    Ok(match kind {
        OpKind::Posterize | OpKind::Solarize => v.round(),
        _ => v,
    })
}

/// One transform with its discretized magnitude.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Operation {
    kind: OpKind,
    level: u32,
    resolution: u32,
}

impl Operation {
    pub fn new(kind: OpKind, level: u32, resolution: u32) -> Result<Self> {
        magnitude_value(kind, level, resolution)?;
        Ok(Self {
            kind,
            level,
            resolution,
        })
    }

    pub fn kind(&self) -> OpKind {
        self.kind
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn resolution(&self) -> u32 {
        self.resolution
    }

    pub fn magnitude(&self) -> f64 {
        magnitude_value(self.kind, self.level, self.resolution)
            .expect("operation validated at construction")
    }
}

/// Occluded rectangle, `[y0, y1) x [x0, x1)`, plus the drawn centre.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CutoutRect {
    pub cy: usize,
    pub cx: usize,
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

/// Applies one operation. Only Cutout draws from `rng`.
pub fn apply_op(img: &Image, op: &Operation, rng: &mut SplitMix64) -> Image {
    apply_op_traced(img, op, rng).0
}

/// Like [`apply_op`], also returning the Cutout patch when one was placed.
pub fn apply_op_traced(
    img: &Image,
    op: &Operation,
    rng: &mut SplitMix64,
) -> (Image, Option<CutoutRect>) {
    let m = op.magnitude();
    match op.kind {
        OpKind::AutoContrast => (autocontrast(img), None),
        OpKind::Brightness => (blend(img, &vec![0u8; img.pixels().len()], m), None),
        OpKind::Color => (blend(img, &grayscale(img), m), None),
        OpKind::Contrast => (blend(img, &mean_luminance_image(img), m), None),
        OpKind::Cutout => {
            let (out, rect) = cutout(img, m, rng);
            (out, Some(rect))
        }
        OpKind::Equalize => (equalize(img), None),
        OpKind::Invert => (invert(img), None),
        OpKind::Posterize => (posterize(img, m as u32), None),
        OpKind::Sharpness => (blend(img, &smooth(img), m), None),
        OpKind::Solarize => (solarize(img, m as u32), None),
    }
}

fn round_clamp(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn blend(img: &Image, degenerate: &[u8], alpha: f64) -> Image {
    let pixels = img
        .pixels()
        .iter()
        .zip(degenerate)
        .map(|(&v, &d)| round_clamp((1.0 - alpha) * f64::from(d) + alpha * f64::from(v)))
        .collect();
    img.with_pixels(pixels)
}

pub(crate) fn luminance(px: [u8; 3]) -> u8 {
    round_clamp(0.299 * f64::from(px[0]) + 0.587 * f64::from(px[1]) + 0.114 * f64::from(px[2]))
}

fn grayscale(img: &Image) -> Vec<u8> {
    img.pixels()
        .chunks_exact(3)
        .flat_map(|px| {
            let l = luminance([px[0], px[1], px[2]]);
            [l, l, l]
        })
        .collect()
}

fn mean_luminance_image(img: &Image) -> Vec<u8> {
    let sum: u64 = img
        .pixels()
        .chunks_exact(3)
        .map(|px| u64::from(luminance([px[0], px[1], px[2]])))
        .sum();
    let n = (img.width() * img.height()) as f64;
    let mean = round_clamp(sum as f64 / n);
    vec![mean; img.pixels().len()]
}

fn smooth(img: &Image) -> Vec<u8> {
    let (w, h) = (img.width(), img.height());
    let src = img.pixels();
    let mut out = src.to_vec();
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            for c in 0..3 {
                let mut acc = 0u32;
                for dy in 0..3 {
                    for dx in 0..3 {
                        let weight = if dy == 1 && dx == 1 { 5 } else { 1 };
                        acc += weight * u32::from(src[((y + dy - 1) * w + (x + dx - 1)) * 3 + c]);
                    }
                }
                out[(y * w + x) * 3 + c] = round_clamp(f64::from(acc) / 13.0);
            }
        }
    }
    out
}

fn channel_histogram(pixels: &[u8], channel: usize) -> [u64; 256] {
    let mut hist = [0u64; 256];
    for px in pixels.chunks_exact(3) {
        hist[px[channel] as usize] += 1;
    }
    hist
}

fn autocontrast(img: &Image) -> Image {
    let mut pixels = img.pixels().to_vec();
    for c in 0..3 {
        let hist = channel_histogram(&pixels, c);
        let lo = hist.iter().position(|&n| n > 0).unwrap();
        let hi = hist.iter().rposition(|&n| n > 0).unwrap();
        if lo == hi {
            continue;
        }
        let span = (hi - lo) as f64;
        let mut lut = [0u8; 256];
        for (v, slot) in lut.iter_mut().enumerate() {
            *slot = if v <= lo {
                0
            } else if v >= hi {
                255
            } else {
                round_clamp((v - lo) as f64 * 255.0 / span)
            };
        }
        Image::map_channel(&mut pixels, c, &lut);
    }
    img.with_pixels(pixels)
}

fn equalize_step(hist: &[u64; 256]) -> u64 {
    let total: u64 = hist.iter().sum();
    let last = hist[hist.iter().rposition(|&n| n > 0).unwrap()];
    (total - last) / 255
}

/// Classic cumulative-histogram equalization, repeated per channel until the
/// step stops changing. A single pass unless values merged into the top bin,
/// which lowers the step; the repeat makes the result a fixed point.
fn equalize(img: &Image) -> Image {
    let mut pixels = img.pixels().to_vec();
    for c in 0..3 {
        let mut hist = channel_histogram(&pixels, c);
        let mut step = equalize_step(&hist);
        while step > 0 {
            let mut lut = [0u8; 256];
            let mut acc = step / 2;
            for (slot, &count) in lut.iter_mut().zip(hist.iter()) {
                *slot = (acc / step).min(255) as u8;
                acc += count;
            }
            Image::map_channel(&mut pixels, c, &lut);
            hist = channel_histogram(&pixels, c);
            let next = equalize_step(&hist);
            if next == step {
                break;
            }
            step = next;
        }
    }
    img.with_pixels(pixels)
}

fn invert(img: &Image) -> Image {
    img.with_pixels(img.pixels().iter().map(|&v| 255 - v).collect())
}

fn posterize(img: &Image, bits: u32) -> Image {
    let mask = (256 - (1u32 << (8 - bits))) as u8;
    img.with_pixels(img.pixels().iter().map(|&v| v & mask).collect())
}

fn solarize(img: &Image, threshold: u32) -> Image {
    img.with_pixels(
        img.pixels()
            .iter()
            .map(|&v| if u32::from(v) >= threshold { 255 - v } else { v })
            .collect(),
    )
}

fn cutout(img: &Image, fraction: f64, rng: &mut SplitMix64) -> (Image, CutoutRect) {
    let (w, h) = (img.width(), img.height());
    let side = (fraction * w.min(h) as f64).round() as usize;
    let cy = rng.below(h as u64) as usize;
    let cx = rng.below(w as u64) as usize;
    let y0 = cy.saturating_sub(side / 2);
    let x0 = cx.saturating_sub(side / 2);
    let y1 = (cy + side - side / 2).min(h);
    let x1 = (cx + side - side / 2).min(w);
    // A zero side yields an empty rectangle.
    let (y1, x1) = if side == 0 { (y0, x0) } else { (y1, x1) };
    let mut pixels = img.pixels().to_vec();
    for y in y0..y1 {
        pixels[(y * w + x0) * 3..(y * w + x1) * 3].fill(0);
    }
    (
        img.with_pixels(pixels),
        CutoutRect {
            cy,
            cx,
            y0,
            x0,
            y1,
            x1,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn op(kind: OpKind, level: u32) -> Operation {
        Operation::new(kind, level, 10).unwrap()
    }

    fn gray(v: u8) -> Image {
        Image::filled(4, 4, [v, v, v]).unwrap()
    }

    fn rng() -> SplitMix64 {
        SplitMix64::new(7)
    }

    #[test]
    fn magnitude_grid_endpoints() {
        assert!((magnitude_value(OpKind::Brightness, 5, 10).unwrap() - 1.1).abs() < 1e-12);
        assert!((magnitude_value(OpKind::Brightness, 0, 10).unwrap() - 0.1).abs() < 1e-12);
        assert!((magnitude_value(OpKind::Brightness, 9, 10).unwrap() - 1.9).abs() < 1e-12);
        assert_eq!(magnitude_value(OpKind::Posterize, 9, 10).unwrap(), 8.0);
        assert_eq!(magnitude_value(OpKind::Posterize, 0, 10).unwrap(), 4.0);
        assert_eq!(magnitude_value(OpKind::Solarize, 9, 10).unwrap(), 256.0);
        assert_eq!(magnitude_value(OpKind::Solarize, 4, 10).unwrap(), 114.0);
        assert_eq!(magnitude_value(OpKind::Cutout, 9, 10).unwrap(), 0.2);
        assert_eq!(magnitude_value(OpKind::Invert, 3, 10).unwrap(), 0.0);
    }

    #[test]
    fn magnitude_rejects_out_of_grid() {
        assert!(matches!(
            magnitude_value(OpKind::Brightness, 10, 10),
            Err(Error::Domain(_))
        ));
        assert!(magnitude_value(OpKind::Brightness, 0, 1).is_err());
        assert!(Operation::new(OpKind::Invert, 12, 10).is_err());
    }

    #[test]
    fn op_names_are_case_sensitive() {
        assert_eq!("Solarize".parse::<OpKind>().unwrap(), OpKind::Solarize);
        assert!("solarize".parse::<OpKind>().is_err());
        for k in OpKind::ALL {
            assert_eq!(k.name().parse::<OpKind>().unwrap(), k);
            assert_eq!(OpKind::from_index(k.index()), Some(k));
        }
    }

    #[test]
    fn invert_zero_is_white() {
        let out = apply_op(&gray(0), &op(OpKind::Invert, 0), &mut rng());
        assert!(out.pixels().iter().all(|&v| v == 255));
    }

    #[test]
    fn posterize_keeps_top_bits() {
        let out = apply_op(&gray(173), &op(OpKind::Posterize, 0), &mut rng());
        assert!(out.pixels().iter().all(|&v| v == 160));
    }

    #[test]
    fn solarize_threshold() {
        // Level 5 of 10 on [0, 256] is round(142.2) = 142.
        let img = Image::new(2, 1, vec![200, 200, 200, 100, 100, 100]).unwrap();
        let out = apply_op(&img, &op(OpKind::Solarize, 5), &mut rng());
        assert_eq!(out.pixels(), &[55, 55, 55, 100, 100, 100]);
        let noop = apply_op(&img, &op(OpKind::Solarize, 9), &mut rng());
        assert_eq!(noop, img);
    }

    #[test]
    fn solarize_at_128_inverts_bright_values() {
        let img = Image::new(1, 1, vec![200, 128, 127]).unwrap();
        assert_eq!(solarize(&img, 128).pixels(), &[55, 127, 127]);
    }

    #[test]
    fn brightness_scales_towards_black() {
        let out = apply_op(&gray(100), &op(OpKind::Brightness, 0), &mut rng());
        assert!(out.pixels().iter().all(|&v| v == 10));
        let out = apply_op(&gray(200), &op(OpKind::Brightness, 9), &mut rng());
        assert!(out.pixels().iter().all(|&v| v == 255));
    }

    #[test]
    fn color_on_gray_is_identity() {
        // A gray pixel equals its own luminance, so any blend leaves it.
        for level in 0..10 {
            let out = apply_op(&gray(77), &op(OpKind::Color, level), &mut rng());
            assert_eq!(out, gray(77));
        }
    }

    #[test]
    fn contrast_blends_towards_mean_luminance() {
        let img = Image::new(2, 1, vec![0, 0, 0, 200, 200, 200]).unwrap();
        let out = apply_op(&img, &op(OpKind::Contrast, 0), &mut rng());
        // mean = 100; 0.9 * 100 + 0.1 * v
        assert_eq!(out.pixels(), &[90, 90, 90, 110, 110, 110]);
    }

    #[test]
    fn sharpness_copies_borders() {
        let mut pixels = vec![0u8; 3 * 3 * 3];
        pixels[4 * 3] = 130; // centre, red channel
        let img = Image::new(3, 3, pixels).unwrap();
        let out = apply_op(&img, &op(OpKind::Sharpness, 0), &mut rng());
        // degenerate centre = round(5 * 130 / 13) = 50; 0.9 * 50 + 0.1 * 130 = 58
        assert_eq!(out.pixels()[12], 58);
        assert_eq!(out.pixels()[0], 0);
        // Tiny images are all border.
        let small = Image::new(2, 2, vec![9; 12]).unwrap();
        assert_eq!(apply_op(&small, &op(OpKind::Sharpness, 0), &mut rng()), small);
    }

    #[test]
    fn equalize_matches_hand_lut() {
        // 510 pixels at 0, 255 at 100, 255 at 200 in every channel.
        // step = (1020 - 255) / 255 = 3; LUT[0] = 1/3 = 0,
        // LUT[100] = (1 + 510) / 3 = 170, LUT[200] = (1 + 765) / 3 = 255.
        let mut pixels = Vec::new();
        for v in std::iter::repeat_n(0u8, 510)
            .chain(std::iter::repeat_n(100, 255))
            .chain(std::iter::repeat_n(200, 255))
        {
            pixels.extend([v, v, v]);
        }
        let img = Image::new(1020, 1, pixels).unwrap();
        let out = apply_op(&img, &op(OpKind::Equalize, 0), &mut rng());
        assert_eq!(out.pixel(0, 0), [0, 0, 0]);
        assert_eq!(out.pixel(600, 0), [170, 170, 170]);
        assert_eq!(out.pixel(1000, 0), [255, 255, 255]);
    }

    #[test]
    fn equalize_is_a_fixed_point_when_top_values_merge() {
        // 513 pixels give step 2 on the first pass; the brightest values all
        // land on 255, which drops the step to 1 for a second pass.
        let px: Vec<u8> = (0..513u32).flat_map(|i| [(i * 37 % 256) as u8; 3]).collect();
        let img = Image::new(513, 1, px).unwrap();
        let op = Operation::new(OpKind::Equalize, 0, 10).unwrap();
        let once = apply_op(&img, &op, &mut SplitMix64::new(0));
        assert_eq!(apply_op(&once, &op, &mut SplitMix64::new(0)), once);
        assert_eq!(*once.pixels().iter().max().unwrap(), 255);
    }

    #[test]
    fn equalize_small_image_unchanged() {
        let img = Image::new(2, 1, vec![10, 20, 30, 40, 50, 60]).unwrap();
        assert_eq!(apply_op(&img, &op(OpKind::Equalize, 0), &mut rng()), img);
    }

    #[test]
    fn autocontrast_stretches_each_channel() {
        let img = Image::new(3, 1, vec![50, 0, 7, 100, 10, 7, 150, 255, 7]).unwrap();
        let out = apply_op(&img, &op(OpKind::AutoContrast, 0), &mut rng());
        assert_eq!(out.pixels(), &[0, 0, 7, 128, 10, 7, 255, 255, 7]);
    }

    #[test]
    fn cutout_blanks_pixels_but_not_mask() {
        let img = gray(200).with_mask(vec![1; 16]).unwrap();
        let big = Image::filled(20, 10, [200, 200, 200]).unwrap().with_mask(vec![1; 200]).unwrap();
        let (out, rect) = apply_op_traced(&big, &op(OpKind::Cutout, 9), &mut rng());
        let rect = rect.unwrap();
        // side = round(0.2 * 10) = 2
        assert!(rect.y1 - rect.y0 <= 2 && rect.x1 - rect.x0 <= 2);
        assert!(rect.y1 > rect.y0);
        let zeros = out.pixels().iter().filter(|&&v| v == 0).count();
        assert_eq!(zeros, 3 * (rect.y1 - rect.y0) * (rect.x1 - rect.x0));
        assert_eq!(out.mask(), big.mask());
        // Zero-size patch still draws a centre but changes nothing.
        let mut r = rng();
        let (same, rect) = apply_op_traced(&img, &op(OpKind::Cutout, 0), &mut r);
        assert_eq!(same, img);
        assert_eq!(rect.unwrap().y0, rect.unwrap().y1);
        assert_ne!(r, rng());
    }
}
