//! Photometric and geometric augmentation of scene views and instance crops.
//!
//! Order is fixed: crop + resize, horizontal flip, color jitter, grayscale,
//! Gaussian blur, solarization. Values are clamped to `[0, 1]` after every
//! step.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Bbox;
use crate::image::Image;
use crate::profile::Profile;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Transform probabilities and strengths for one branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewAugment {
    pub flip_p: f64,
    pub jitter_p: f64,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
    pub gray_p: f64,
    pub blur_p: f64,
    /// Gaussian sigma range in output pixels.
    pub blur_sigma: (f32, f32),
    pub solarize_p: f64,
    pub solarize_threshold: f32,
}

impl ViewAugment {
    /// Asymmetric recipe; `first` selects the always-blurred branch.
    pub fn standard(first: bool, out_size: usize) -> Self {
        let s = out_size as f32 / 224.0;
        ViewAugment {
            flip_p: 0.5,
            jitter_p: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            hue: 0.1,
            gray_p: 0.2,
            blur_p: if first { 1.0 } else { 0.1 },
            blur_sigma: (0.1 * s, 2.0 * s),
            solarize_p: if first { 0.0 } else { 0.2 },
            solarize_threshold: 0.5,
        }
    }

    /// No transform beyond crop and resize.
    pub fn identity() -> Self {
        ViewAugment {
            flip_p: 0.0,
            jitter_p: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            gray_p: 0.0,
            blur_p: 0.0,
            blur_sigma: (0.1, 0.1),
            solarize_p: 0.0,
            solarize_threshold: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [self.flip_p, self.jitter_p, self.gray_p, self.blur_p, self.solarize_p];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument(format!(
                "augmentation probability outside [0, 1]: {self:?}"
            )));
        }
        if self.blur_sigma.0 <= 0.0 || self.blur_sigma.0 > self.blur_sigma.1 {
            return Err(Error::InvalidArgument(format!(
                "invalid blur sigma range {:?}",
                self.blur_sigma
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub scene_size: usize,
    pub instance_size: usize,
    pub view1: ViewAugment,
    pub view2: ViewAugment,
    /// Applied to every instance crop.
    pub instance: ViewAugment,
}

impl AugmentConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let (scene, instance) = (profile.scene_size(), profile.instance_size());
        AugmentConfig {
            scene_size: scene,
            instance_size: instance,
            view1: ViewAugment::standard(true, scene),
            view2: ViewAugment::standard(false, scene),
            instance: ViewAugment::standard(true, instance),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scene_size < 8 || self.instance_size < 8 {
            return Err(Error::InvalidArgument("output sizes must be at least 8".into()));
        }
        self.view1.validate()?;
        self.view2.validate()?;
        self.instance.validate()
    }
}

/// Mirror a planar `[3, size, size]` buffer left to right.
pub fn hflip(buf: &mut [f32], size: usize) {
    for row in buf.chunks_mut(size) {
        row.reverse();
    }
}

fn clamp01(buf: &mut [f32]) {
    for v in buf {
        *v = v.clamp(0.0, 1.0);
    }
}

fn luminance(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn planes(buf: &mut [f32]) -> (&mut [f32], &mut [f32], &mut [f32]) {
    let n = buf.len() / 3;
    let (r, rest) = buf.split_at_mut(n);
    let (g, b) = rest.split_at_mut(n);
    (r, g, b)
}

fn adjust_brightness(buf: &mut [f32], factor: f32) {
    for v in buf.iter_mut() {
        *v *= factor;
    }
    clamp01(buf);
}

fn adjust_contrast(buf: &mut [f32], factor: f32) {
    let (r, g, b) = planes(buf);
    let n = r.len() as f32;
    let mean = r
        .iter()
        .zip(g.iter())
        .zip(b.iter())
        .map(|((&r, &g), &b)| luminance(r, g, b))
        .sum::<f32>()
        / n;
    for v in buf.iter_mut() {
        *v = (*v - mean) * factor + mean;
    }
    clamp01(buf);
}

fn adjust_saturation(buf: &mut [f32], factor: f32) {
    let (r, g, b) = planes(buf);
    for i in 0..r.len() {
        let y = luminance(r[i], g[i], b[i]);
        r[i] = (r[i] - y) * factor + y;
        g[i] = (g[i] - y) * factor + y;
        b[i] = (b[i] - y) * factor + y;
    }
    clamp01(buf);
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

fn adjust_hue(buf: &mut [f32], shift: f32) {
    let (r, g, b) = planes(buf);
    for i in 0..r.len() {
        let (h, s, v) = rgb_to_hsv(r[i], g[i], b[i]);
        let (nr, ng, nb) = hsv_to_rgb(h + shift, s, v);
        r[i] = nr;
        g[i] = ng;
        b[i] = nb;
    }
    clamp01(buf);
}

fn grayscale(buf: &mut [f32]) {
    let (r, g, b) = planes(buf);
    for i in 0..r.len() {
        let y = luminance(r[i], g[i], b[i]);
        r[i] = y;
        g[i] = y;
        b[i] = y;
    }
}

/// Separable Gaussian blur with reflected borders.
pub fn gaussian_blur(buf: &mut [f32], size: usize, sigma: f32) {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|d| (-(d * d) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f32 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= total;
    }
    let reflect = |i: isize| -> usize {
        let n = size as isize;
        let mut i = i;
        while i < 0 || i >= n {
            i = if i < 0 { -i - 1 } else { 2 * n - i - 1 };
        }
        i as usize
    };
    let mut tmp = vec![0.0f32; size * size];
    for plane in buf.chunks_mut(size * size) {
        for y in 0..size {
            for x in 0..size {
                tmp[y * size + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &w)| w * plane[y * size + reflect(x as isize + k as isize - radius)])
                    .sum();
            }
        }
        for y in 0..size {
            for x in 0..size {
                plane[y * size + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &w)| w * tmp[reflect(y as isize + k as isize - radius) * size + x])
                    .sum();
            }
        }
    }
    clamp01(buf);
}

/// `v ↦ 1 − v` for values at or above the threshold.
pub fn solarize(buf: &mut [f32], threshold: f32) {
    for v in buf {
        if *v >= threshold {
            *v = 1.0 - *v;
        }
    }
}

/// Crop `region` out of `image`, resize to `size × size` and apply `aug`.
pub fn augment_region(image: &Image, region: &Bbox, aug: &ViewAugment, size: usize, rng: &mut Rng) -> Tensor<f32> {
    let mut buf = image.crop_resize(region, size, size);
    if rng.gen_bool(aug.flip_p) {
        hflip(&mut buf, size);
    }
    if rng.gen_bool(aug.jitter_p) {
        let factor = |rng: &mut Rng, strength: f32| {
            if strength > 0.0 {
                rng.gen_range(1.0 - strength..=1.0 + strength)
            } else {
                1.0
            }
        };
        let b = factor(rng, aug.brightness);
        let c = factor(rng, aug.contrast);
        let s = factor(rng, aug.saturation);
        let h = if aug.hue > 0.0 {
            rng.gen_range(-aug.hue..=aug.hue)
        } else {
            0.0
        };
        adjust_brightness(&mut buf, b);
        adjust_contrast(&mut buf, c);
        adjust_saturation(&mut buf, s);
        adjust_hue(&mut buf, h);
    }
    if rng.gen_bool(aug.gray_p) {
        grayscale(&mut buf);
    }
    if rng.gen_bool(aug.blur_p) {
        let sigma = rng.gen_range(aug.blur_sigma.0..=aug.blur_sigma.1);
        gaussian_blur(&mut buf, size, sigma);
    }
    if rng.gen_bool(aug.solarize_p) {
        solarize(&mut buf, aug.solarize_threshold);
    }
    clamp01(&mut buf);
    Tensor::new(&[3, size, size], buf).expect("planar buffer")
}

pub fn augment_scene(image: &Image, crop: &Bbox, aug: &ViewAugment, size: usize, rng: &mut Rng) -> Tensor<f32> {
    augment_region(image, crop, aug, size, rng)
}

pub fn crop_resize_instance(image: &Image, bbox: &Bbox, aug: &ViewAugment, size: usize, rng: &mut Rng) -> Tensor<f32> {
    augment_region(image, bbox, aug, size, rng)
}
