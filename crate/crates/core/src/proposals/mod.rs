//! Unsupervised candidate-instance boxes: oversegment, group bottom-up,
//! then filter redundant boxes.

mod grouping;
mod segment;

use serde::{Deserialize, Serialize};

pub use grouping::{hierarchical_group, regions_from_labels, MergeTree, Region, TreeNode, HIST_BINS};
pub use segment::{graph_segment, LabelMap};

use crate::geometry::{filter_proposals, Bbox, FilterConfig};
use crate::image::Image;
use crate::profile::Profile;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposalConfig {
    /// Segmentation scale; larger values give larger segments.
    pub scale_k: f32,
    /// Minimum segment size in pixels.
    pub min_size: usize,
    pub filter: FilterConfig,
    /// Maximum proposals kept per image after filtering.
    pub max_proposals: usize,
}

impl ProposalConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let (scale_k, min_size) = match profile {
            Profile::Desk => (5.0, 6),
            Profile::Paper => (300.0, 150),
        };
        ProposalConfig {
            scale_k,
            min_size,
            filter: FilterConfig::with_min_scale(profile.min_scale()),
            max_proposals: 64,
        }
    }
}

/// Segment, group and filter. Survivors keep merge-tree order (finer regions
/// first) and are truncated to `max_proposals`.
pub fn generate_proposals(image: &Image, cfg: &ProposalConfig) -> Vec<Bbox> {
    let map = graph_segment(image, cfg.scale_k, cfg.min_size);
    let regions = regions_from_labels(image, &map);
    let area = (image.width() * image.height()) as f64;
    let tree = hierarchical_group(regions, area);
    let mut boxes = filter_proposals(&tree.boxes(), &cfg.filter);
    boxes.truncate(cfg.max_proposals);
    boxes
}

/// Ground-truth boxes matched by at least one proposal with IoU `>= iou`,
/// as `(hits, total)`.
pub fn recall_counts(proposals: &[Bbox], truth: &[Bbox], iou: f64) -> (usize, usize) {
    let hits = truth
        .iter()
        .filter(|t| proposals.iter().any(|p| p.iou(t) >= iou))
        .count();
    (hits, truth.len())
}
