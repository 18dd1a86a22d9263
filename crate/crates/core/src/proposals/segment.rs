//! Graph-based oversegmentation over an 8-connected pixel grid.
//!
//! Edges are processed by increasing weight; two components merge when the
//! edge between them is no heavier than the internal difference of either
//! component plus `scale_k / size`. A final sweep merges components smaller
//! than `min_size` into their cheapest neighbor.

use crate::image::Image;

/// Per-pixel segment ids in `0..count`, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub width: u32,
    pub height: u32,
    pub labels: Vec<u32>,
    pub count: usize,
}

impl LabelMap {
    pub fn label(&self, x: u32, y: u32) -> u32 {
        self.labels[(y * self.width + x) as usize]
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.count];
        for &l in &self.labels {
            sizes[l as usize] += 1;
        }
        sizes
    }
}

struct DisjointSet {
    parent: Vec<usize>,
    size: Vec<usize>,
    internal: Vec<f32>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n).collect(),
            size: vec![1; n],
            internal: vec![0.0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize, weight: f32) {
        let (big, small) = if self.size[a] >= self.size[b] { (a, b) } else { (b, a) };
        self.parent[small] = big;
        self.size[big] += self.size[small];
        self.internal[big] = weight;
    }
}

struct Edge {
    a: usize,
    b: usize,
    weight: f32,
}

fn build_edges(image: &Image) -> Vec<Edge> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let planes = [image.plane(0), image.plane(1), image.plane(2)];
    let dist = |i: usize, j: usize| -> f32 {
        planes
            .iter()
            .map(|p| (p[i] - p[j]) * 255.0)
            .map(|d| d * d)
            .sum::<f32>()
            .sqrt()
    };
    let mut edges = Vec::with_capacity(4 * w * h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mut push = |j: usize| {
                edges.push(Edge {
                    a: i,
                    b: j,
                    weight: dist(i, j),
                })
            };
            if x + 1 < w {
                push(i + 1);
            }
            if y + 1 < h {
                push(i + w);
                if x + 1 < w {
                    push(i + w + 1);
                }
                if x > 0 {
                    push(i + w - 1);
                }
            }
        }
    }
    // stable: equal weights keep construction order
    edges.sort_by(|p, q| p.weight.total_cmp(&q.weight));
    edges
}

/// Segment `image`; every returned segment has at least
/// `min(min_size, pixel count)` pixels. Labels are numbered in raster order of
/// first appearance.
pub fn graph_segment(image: &Image, scale_k: f32, min_size: usize) -> LabelMap {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let edges = build_edges(image);
    let mut sets = DisjointSet::new(w * h);
    for e in &edges {
        let (a, b) = (sets.find(e.a), sets.find(e.b));
        if a == b {
            continue;
        }
        let ta = sets.internal[a] + scale_k / sets.size[a] as f32;
        let tb = sets.internal[b] + scale_k / sets.size[b] as f32;
        if e.weight <= ta.min(tb) {
            sets.union(a, b, e.weight);
        }
    }
    loop {
        let mut merged = false;
        for e in &edges {
            let (a, b) = (sets.find(e.a), sets.find(e.b));
            if a != b && (sets.size[a] < min_size || sets.size[b] < min_size) {
                let internal = sets.internal[a].max(sets.internal[b]).max(e.weight);
                sets.union(a, b, internal);
                merged = true;
            }
        }
        if !merged {
            break;
        }
    }
    let mut remap = vec![u32::MAX; w * h];
    let mut count = 0usize;
    let labels = (0..w * h)
        .map(|i| {
            let root = sets.find(i);
            if remap[root] == u32::MAX {
                remap[root] = count as u32;
                count += 1;
            }
            remap[root]
        })
        .collect();
    LabelMap {
        width: w as u32,
        height: h as u32,
        labels,
        count,
    }
}
