//! Bottom-up grouping of segments: repeatedly merge the most similar pair of
//! adjacent regions and record the bounding box of every node of the
//! resulting merge tree.

use std::collections::{BTreeMap, BTreeSet};

use super::segment::LabelMap;
use crate::geometry::Bbox;
use crate::image::Image;

pub const HIST_BINS: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub bbox: Bbox,
    pub size: usize,
    /// `3 × HIST_BINS` color histogram; each channel sums to one.
    pub hist: Vec<f64>,
    pub neighbors: BTreeSet<usize>,
}

/// Regions of a label map with tight boxes, histograms and 4-adjacency.
pub fn regions_from_labels(image: &Image, map: &LabelMap) -> Vec<Region> {
    let n = map.count;
    let mut bounds = vec![(u32::MAX, u32::MAX, 0u32, 0u32); n];
    let mut sizes = vec![0usize; n];
    let mut hist = vec![vec![0.0f64; 3 * HIST_BINS]; n];
    let mut neighbors = vec![BTreeSet::new(); n];
    for y in 0..map.height {
        for x in 0..map.width {
            let l = map.label(x, y) as usize;
            let b = &mut bounds[l];
            *b = (b.0.min(x), b.1.min(y), b.2.max(x + 1), b.3.max(y + 1));
            sizes[l] += 1;
            for (c, v) in image.pixel(x, y).into_iter().enumerate() {
                let bin = ((v * HIST_BINS as f32) as usize).min(HIST_BINS - 1);
                hist[l][c * HIST_BINS + bin] += 1.0;
            }
            let mut link = |other: u32| {
                let o = other as usize;
                if o != l {
                    neighbors[l].insert(o);
                    neighbors[o].insert(l);
                }
            };
            if x + 1 < map.width {
                link(map.label(x + 1, y));
            }
            if y + 1 < map.height {
                link(map.label(x, y + 1));
            }
        }
    }
    (0..n)
        .map(|l| {
            let (x0, y0, x1, y1) = bounds[l];
            let total = sizes[l] as f64;
            Region {
                bbox: Bbox::from_corners(x0, y0, x1, y1).expect("non-empty segment"),
                size: sizes[l],
                hist: hist[l].iter().map(|&h| h / total).collect(),
                neighbors: std::mem::take(&mut neighbors[l]),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeNode {
    pub bbox: Bbox,
    pub size: usize,
    pub children: Option<(usize, usize)>,
}

/// Binary merge tree: the first `leaves` nodes are the input regions, each
/// later node merges two earlier ones, and the last node is the root.
#[derive(Clone, Debug, PartialEq)]
pub struct MergeTree {
    pub nodes: Vec<TreeNode>,
    pub leaves: usize,
}

impl MergeTree {
    pub fn boxes(&self) -> Vec<Bbox> {
        self.nodes.iter().map(|n| n.bbox).collect()
    }
}

fn similarity(a: &Region, b: &Region, image_area: f64) -> f64 {
    let color: f64 = a.hist.iter().zip(&b.hist).map(|(x, y)| x.min(*y)).sum::<f64>() / 3.0;
    let size = 1.0 - (a.size + b.size) as f64 / image_area;
    color + size
}

/// Merge regions until one remains. The most similar adjacent pair merges
/// first; ties go to the smallest combined size, then to the lowest ids.
/// Regions left without adjacent partners are paired among themselves so the
/// tree always has a single root.
pub fn hierarchical_group(regions: Vec<Region>, image_area: f64) -> MergeTree {
    let leaves = regions.len();
    let mut tree: Vec<TreeNode> = regions
        .iter()
        .map(|r| TreeNode {
            bbox: r.bbox,
            size: r.size,
            children: None,
        })
        .collect();
    let mut regions: Vec<Option<Region>> = regions.into_iter().map(Some).collect();
    let mut active: BTreeSet<usize> = (0..leaves).collect();
    let mut pairs: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (i, r) in regions.iter().enumerate() {
        let r = r.as_ref().expect("fresh region");
        for &j in r.neighbors.range(i + 1..) {
            let other = regions[j].as_ref().expect("fresh region");
            pairs.insert((i, j), similarity(r, other, image_area));
        }
    }

    while active.len() > 1 {
        if pairs.is_empty() {
            // disconnected components: fall back to all active pairs
            let ids: Vec<usize> = active.iter().copied().collect();
            for (k, &i) in ids.iter().enumerate() {
                for &j in &ids[k + 1..] {
                    let (a, b) = (regions[i].as_ref().unwrap(), regions[j].as_ref().unwrap());
                    pairs.insert((i, j), similarity(a, b, image_area));
                }
            }
        }
        let size_of = |p: &(usize, usize)| tree[p.0].size + tree[p.1].size;
        let (&(i, j), _) = pairs
            .iter()
            .max_by(|(p, s), (q, t)| {
                s.total_cmp(t)
                    .then_with(|| size_of(q).cmp(&size_of(p)))
                    .then_with(|| q.cmp(p))
            })
            .expect("at least one candidate pair");

        let a = regions[i].take().expect("active region");
        let b = regions[j].take().expect("active region");
        active.remove(&i);
        active.remove(&j);
        pairs.retain(|&(p, q), _| p != i && p != j && q != i && q != j);

        let id = tree.len();
        let size = a.size + b.size;
        let (wa, wb) = (a.size as f64 / size as f64, b.size as f64 / size as f64);
        let mut neighbors: BTreeSet<usize> = a.neighbors.union(&b.neighbors).copied().collect();
        neighbors.remove(&i);
        neighbors.remove(&j);
        let merged = Region {
            bbox: a.bbox.union_hull(&b.bbox),
            size,
            hist: a.hist.iter().zip(&b.hist).map(|(x, y)| wa * x + wb * y).collect(),
            neighbors,
        };
        for &nb in &merged.neighbors {
            let other = regions[nb].as_mut().expect("neighbor is active");
            other.neighbors.remove(&i);
            other.neighbors.remove(&j);
            other.neighbors.insert(id);
            pairs.insert((nb, id), similarity(other, &merged, image_area));
        }
        tree.push(TreeNode {
            bbox: merged.bbox,
            size,
            children: Some((i, j)),
        });
        regions.push(Some(merged));
        active.insert(id);
    }
    MergeTree { nodes: tree, leaves }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proposals::segment::graph_segment;

    fn region(x: u32, y: u32, w: u32, h: u32, color_bin: usize, neighbors: &[usize]) -> Region {
        let mut hist = vec![0.0; 3 * HIST_BINS];
        for c in 0..3 {
            hist[c * HIST_BINS + color_bin] = 1.0;
        }
        Region {
            bbox: Bbox::new(x, y, w, h).unwrap(),
            size: (w * h) as usize,
            hist,
            neighbors: neighbors.iter().copied().collect(),
        }
    }

    #[test]
    fn single_region_gives_its_box() {
        let r = region(1, 2, 3, 4, 0, &[]);
        let tree = hierarchical_group(vec![r.clone()], 100.0);
        assert_eq!(tree.boxes(), vec![r.bbox]);
    }

    #[test]
    fn chain_of_regions() {
        let regions = vec![
            region(0, 0, 4, 4, 0, &[1]),
            region(4, 0, 4, 4, 1, &[0, 2]),
            region(8, 0, 4, 4, 1, &[1, 3]),
            region(12, 0, 4, 4, 7, &[2]),
        ];
        let tree = hierarchical_group(regions, 64.0);
        assert_eq!(tree.nodes.len(), 7);
        // identical histograms merge first
        assert_eq!(tree.nodes[4].children, Some((1, 2)));
        assert_eq!(tree.nodes[6].bbox, Bbox::new(0, 0, 16, 4).unwrap());
    }

    #[test]
    fn disconnected_regions_still_reach_one_root() {
        let regions = vec![
            region(0, 0, 2, 2, 0, &[]),
            region(5, 5, 2, 2, 3, &[]),
            region(9, 0, 2, 2, 3, &[]),
        ];
        let tree = hierarchical_group(regions, 144.0);
        assert_eq!(tree.nodes.len(), 5);
        assert_eq!(tree.nodes[4].bbox, Bbox::new(0, 0, 11, 7).unwrap());
    }

    #[test]
    fn regions_from_labels_are_tight() {
        let mut data = vec![0.2f32; 3 * 16 * 16];
        for y in 4..9 {
            for x in 3..12 {
                data[y * 16 + x] = 0.9;
            }
        }
        let img = Image::new(16, 16, data).unwrap();
        let map = graph_segment(&img, 100.0, 1);
        let regions = regions_from_labels(&img, &map);
        assert_eq!(regions.len(), 2);
        let inner = regions.iter().find(|r| r.size == 45).unwrap();
        assert_eq!(inner.bbox, Bbox::new(3, 4, 9, 5).unwrap());
        for r in &regions {
            for c in 0..3 {
                let s: f64 = r.hist[c * HIST_BINS..(c + 1) * HIST_BINS].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        assert!(regions[0].neighbors.contains(&1));
    }
}
