//! Two scene views whose overlap holds `K` candidate instances.
//!
//! Each attempt draws two random-resized crops and counts the proposals
//! lying inside their intersection. The first attempt with at least `K`
//! contained proposals wins and keeps the `K` largest. When every attempt
//! falls short, the attempt with the most contained proposals is kept and
//! its overlap is topped up with random constraint-satisfying boxes.

mod augment;

use log::warn;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use augment::{
    augment_region, augment_scene, crop_resize_instance, gaussian_blur, hflip, solarize, AugmentConfig, ViewAugment,
};

use crate::error::{Error, Result};
use crate::geometry::Bbox;
use crate::image::Image;
use crate::profile::Profile;
use crate::rng::{rng_from, Rng};
use crate::tensor::Tensor;

/// Random-resized-crop distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropConfig {
    /// Fraction of the source area.
    pub scale: (f64, f64),
    /// Width over height.
    pub ratio: (f64, f64),
}

impl Default for CropConfig {
    fn default() -> Self {
        CropConfig {
            scale: (0.4, 1.0),
            ratio: (3.0 / 4.0, 4.0 / 3.0),
        }
    }
}

/// Constraints on fallback boxes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NaiveConfig {
    pub min_scale: u32,
    pub aspect_ratio_min: f64,
    pub aspect_ratio_max: f64,
    pub max_iou: f64,
    pub attempts_per_box: usize,
    pub relax_step: f64,
    pub relax_cap: f64,
}

impl NaiveConfig {
    pub fn for_profile(profile: Profile) -> Self {
        NaiveConfig {
            min_scale: profile.min_scale(),
            aspect_ratio_min: 1.0 / 3.0,
            aspect_ratio_max: 3.0,
            max_iou: 0.5,
            attempts_per_box: 100,
            relax_step: 0.1,
            relax_cap: 0.9,
        }
    }

    fn can_host(&self, region: &Bbox) -> bool {
        region.w >= self.min_scale && region.h >= self.min_scale
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewConfig {
    pub k: usize,
    pub iters: usize,
    pub crop: CropConfig,
    pub naive: NaiveConfig,
    /// Extra draws allowed when no attempt produced an overlap able to host
    /// a fallback box.
    pub max_extra_draws: usize,
}

impl ViewConfig {
    pub fn for_profile(profile: Profile) -> Self {
        ViewConfig {
            k: 4,
            iters: 20,
            crop: CropConfig::default(),
            naive: NaiveConfig::for_profile(profile),
            max_extra_draws: 1000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.iters == 0 {
            return Err(Error::InvalidArgument("k and iters must be at least 1".into()));
        }
        let (s, r) = (self.crop.scale, self.crop.ratio);
        if !(s.0 > 0.0 && s.0 <= s.1 && s.1 <= 1.0 && r.0 > 0.0 && r.0 <= r.1) {
            return Err(Error::InvalidArgument(format!("invalid crop config {:?}", self.crop)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewPair {
    pub s1: Bbox,
    pub s2: Bbox,
    pub overlap: Bbox,
    pub instance_boxes: Vec<Bbox>,
    pub fallback_used: bool,
    /// Attempts drawn before returning.
    pub iterations_used: usize,
    /// Number of instance boxes taken from the proposals; the rest are naive.
    pub from_proposals: usize,
    /// IoU ceiling finally used for naive boxes when it had to be raised.
    pub relaxed_iou: Option<f64>,
}

/// Draw a crop of `width × height` following the random-resized-crop recipe;
/// after ten rejected draws, a central crop clamped to the ratio range.
pub fn sample_crop(width: u32, height: u32, cfg: &CropConfig, rng: &mut Rng) -> Bbox {
    let area = (width * height) as f64;
    let (log_lo, log_hi) = (cfg.ratio.0.ln(), cfg.ratio.1.ln());
    for _ in 0..10 {
        let target = area * rng.gen_range(cfg.scale.0..=cfg.scale.1);
        let ratio = rng.gen_range(log_lo..=log_hi).exp();
        let w = (target * ratio).sqrt().round() as u32;
        let h = (target / ratio).sqrt().round() as u32;
        if w >= 1 && h >= 1 && w <= width && h <= height {
            let x = rng.gen_range(0..=width - w);
            let y = rng.gen_range(0..=height - h);
            return Bbox { x, y, w, h };
        }
    }
    let in_ratio = width as f64 / height as f64;
    let (w, h) = if in_ratio < cfg.ratio.0 {
        (width, ((width as f64 / cfg.ratio.0).round() as u32).clamp(1, height))
    } else if in_ratio > cfg.ratio.1 {
        (((height as f64 * cfg.ratio.1).round() as u32).clamp(1, width), height)
    } else {
        (width, height)
    };
    Bbox {
        x: (width - w) / 2,
        y: (height - h) / 2,
        w,
        h,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NaiveBoxes {
    pub boxes: Vec<Bbox>,
    /// Final IoU ceiling when it had to be raised above the configured one.
    pub relaxed_iou: Option<f64>,
}

fn draw_naive(overlap: &Bbox, cfg: &NaiveConfig, rng: &mut Rng) -> Option<Bbox> {
    let w = rng.gen_range(cfg.min_scale..=overlap.w);
    let h_lo = cfg.min_scale.max((w as f64 / cfg.aspect_ratio_max).ceil() as u32);
    let h_hi = overlap.h.min((w as f64 / cfg.aspect_ratio_min).floor() as u32);
    if h_lo > h_hi {
        return None;
    }
    let h = rng.gen_range(h_lo..=h_hi);
    let x = overlap.x + rng.gen_range(0..=overlap.w - w);
    let y = overlap.y + rng.gen_range(0..=overlap.h - h);
    let b = Bbox { x, y, w, h };
    let ar = b.aspect_ratio();
    (ar >= cfg.aspect_ratio_min && ar <= cfg.aspect_ratio_max).then_some(b)
}

/// Rejection-sample `need` boxes inside `overlap` with side at least
/// `min_scale`, aspect ratio in range, and IoU at most the ceiling against
/// each other and against `existing`. After `attempts_per_box` failures for
/// one box the ceiling rises by `relax_step` up to `relax_cap`; failing
/// beyond that is an error.
pub fn naive_boxes(
    overlap: &Bbox,
    existing: &[Bbox],
    need: usize,
    cfg: &NaiveConfig,
    rng: &mut Rng,
) -> Result<NaiveBoxes> {
    if need == 0 {
        return Ok(NaiveBoxes {
            boxes: Vec::new(),
            relaxed_iou: None,
        });
    }
    if !cfg.can_host(overlap) {
        return Err(Error::InvalidArgument(format!(
            "overlap {overlap} cannot host a {0}x{0} box",
            cfg.min_scale
        )));
    }
    let mut ceiling = cfg.max_iou;
    let mut relaxed = None;
    let mut placed: Vec<Bbox> = Vec::with_capacity(need);
    while placed.len() < need {
        let mut found = None;
        for _ in 0..cfg.attempts_per_box {
            if let Some(b) = draw_naive(overlap, cfg, rng) {
                if existing.iter().chain(&placed).all(|o| o.iou(&b) <= ceiling) {
                    found = Some(b);
                    break;
                }
            }
        }
        match found {
            Some(b) => placed.push(b),
            None if ceiling + 1e-12 < cfg.relax_cap => {
                ceiling = (ceiling + cfg.relax_step).min(cfg.relax_cap);
                relaxed = Some(ceiling);
                warn!("naive boxes: relaxing IoU ceiling to {ceiling:.1} inside overlap {overlap}");
            }
            None => {
                return Err(Error::Degenerate(format!(
                    "could not place {need} naive boxes in {overlap} at IoU ceiling {ceiling:.1}"
                )));
            }
        }
    }
    Ok(NaiveBoxes {
        boxes: placed,
        relaxed_iou: relaxed,
    })
}

struct Attempt {
    s1: Bbox,
    s2: Bbox,
    overlap: Option<Bbox>,
    contained: Vec<Bbox>,
}

fn draw_attempt(width: u32, height: u32, proposals: &[Bbox], cfg: &ViewConfig, rng: &mut Rng) -> Attempt {
    let s1 = sample_crop(width, height, &cfg.crop, rng);
    let s2 = sample_crop(width, height, &cfg.crop, rng);
    let overlap = s1.intersect(&s2);
    let contained = overlap
        .map(|o| proposals.iter().filter(|p| o.contains(p)).copied().collect())
        .unwrap_or_default();
    Attempt {
        s1,
        s2,
        overlap,
        contained,
    }
}

/// K largest, ties in input order.
fn largest(mut boxes: Vec<Bbox>, k: usize) -> Vec<Bbox> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(boxes[i].area()));
    order.truncate(k);
    order.sort_unstable();
    let picked = order.iter().map(|&i| boxes[i]).collect();
    boxes.clear();
    picked
}

/// Build a [`ViewPair`] over a `width × height` source image.
pub fn create_overlapping_views(
    width: u32,
    height: u32,
    proposals: &[Bbox],
    cfg: &ViewConfig,
    rng: &mut Rng,
) -> Result<ViewPair> {
    cfg.validate()?;
    if width < cfg.naive.min_scale || height < cfg.naive.min_scale {
        return Err(Error::InvalidArgument(format!(
            "image {width}x{height} is smaller than the minimum crop {0}x{0}",
            cfg.naive.min_scale
        )));
    }
    let mut attempts = Vec::with_capacity(cfg.iters);
    for i in 0..cfg.iters {
        let a = draw_attempt(width, height, proposals, cfg, rng);
        if a.contained.len() >= cfg.k {
            return Ok(ViewPair {
                s1: a.s1,
                s2: a.s2,
                overlap: a.overlap.expect("contained boxes imply an overlap"),
                instance_boxes: largest(a.contained, cfg.k),
                fallback_used: false,
                iterations_used: i + 1,
                from_proposals: cfg.k,
                relaxed_iou: None,
            });
        }
        attempts.push(a);
    }

    let mut draws = cfg.iters;
    let hostable = |a: &Attempt| a.overlap.is_some_and(|o| cfg.naive.can_host(&o));
    while !attempts.iter().any(hostable) {
        if draws >= cfg.iters + cfg.max_extra_draws {
            return Err(Error::Degenerate(format!(
                "no pair of crops produced an overlap of at least {0}x{0}",
                cfg.naive.min_scale
            )));
        }
        attempts.push(draw_attempt(width, height, proposals, cfg, rng));
        draws += 1;
    }

    // best attempt first: most contained proposals, then largest overlap
    let mut ranked: Vec<&Attempt> = attempts.iter().filter(|a| hostable(a)).collect();
    ranked.sort_by_key(|a| {
        (
            std::cmp::Reverse(a.contained.len()),
            std::cmp::Reverse(a.overlap.map_or(0, |o| o.area())),
        )
    });
    let mut last_err = None;
    for a in ranked {
        let overlap = a.overlap.expect("hostable overlap");
        let kept = largest(a.contained.clone(), cfg.k);
        match naive_boxes(&overlap, &kept, cfg.k - kept.len(), &cfg.naive, rng) {
            Ok(fill) => {
                let from_proposals = kept.len();
                let mut instance_boxes = kept;
                instance_boxes.extend(fill.boxes);
                return Ok(ViewPair {
                    s1: a.s1,
                    s2: a.s2,
                    overlap,
                    instance_boxes,
                    fallback_used: true,
                    iterations_used: draws,
                    from_proposals,
                    relaxed_iou: fill.relaxed_iou,
                });
            }
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.expect("at least one hostable attempt"))
}

/// Augmented tensors for one training example.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub scenes: [Tensor<f32>; 2],
    pub instances: Vec<Tensor<f32>>,
    pub view: ViewPair,
    pub seed: u64,
}

/// Views, scene augmentation and instance crops for one image, all drawn
/// from `seed`.
pub fn build_training_sample(
    image: &Image,
    proposals: &[Bbox],
    views: &ViewConfig,
    aug: &AugmentConfig,
    seed: u64,
) -> Result<TrainingSample> {
    let mut rng = rng_from(seed);
    let view = create_overlapping_views(image.width(), image.height(), proposals, views, &mut rng)?;
    let s1 = augment_scene(image, &view.s1, &aug.view1, aug.scene_size, &mut rng);
    let s2 = augment_scene(image, &view.s2, &aug.view2, aug.scene_size, &mut rng);
    let instances = view
        .instance_boxes
        .iter()
        .map(|b| crop_resize_instance(image, b, &aug.instance, aug.instance_size, &mut rng))
        .collect();
    Ok(TrainingSample {
        scenes: [s1, s2],
        instances,
        view,
        seed,
    })
}
