//! Axis-aligned boxes in integer pixel coordinates.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rectangle with top-left corner `(x, y)` and extents `w × h`, covering
/// pixels `x..x+w` and `y..y+h`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Bbox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Bbox {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Result<Self> {
        if w == 0 || h == 0 {
            return Err(Error::InvalidArgument(format!("box {x} {y} {w} {h} has zero extent")));
        }
        Ok(Bbox { x, y, w, h })
    }

    /// Box spanning the half-open pixel ranges `x0..x1`, `y0..y1`.
    pub fn from_corners(x0: u32, y0: u32, x1: u32, y1: u32) -> Option<Self> {
        (x1 > x0 && y1 > y0).then(|| Bbox {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
        })
    }

    pub fn right(&self) -> u32 {
        self.x + self.w
    }

    pub fn bottom(&self) -> u32 {
        self.y + self.h
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn min_side(&self) -> u32 {
        self.w.min(self.h)
    }

    /// Width over height.
    pub fn aspect_ratio(&self) -> f64 {
        self.w as f64 / self.h as f64
    }

    pub fn fits_in(&self, width: u32, height: u32) -> bool {
        self.right() <= width && self.bottom() <= height
    }

    pub fn intersect(&self, other: &Bbox) -> Option<Bbox> {
        Bbox::from_corners(
            self.x.max(other.x),
            self.y.max(other.y),
            self.right().min(other.right()),
            self.bottom().min(other.bottom()),
        )
    }

    /// Smallest box covering both.
    pub fn union_hull(&self, other: &Bbox) -> Bbox {
        Bbox {
            x: self.x.min(other.x),
            y: self.y.min(other.y),
            w: self.right().max(other.right()) - self.x.min(other.x),
            h: self.bottom().max(other.bottom()) - self.y.min(other.y),
        }
    }

    pub fn iou(&self, other: &Bbox) -> f64 {
        let inter = self.intersect(other).map_or(0, |b| b.area());
        if inter == 0 {
            return 0.0;
        }
        inter as f64 / (self.area() + other.area() - inter) as f64
    }

    /// `inner` lies within `self`, borders inclusive.
    pub fn contains(&self, inner: &Bbox) -> bool {
        self.x <= inner.x && self.y <= inner.y && inner.right() <= self.right() && inner.bottom() <= self.bottom()
    }

    /// Map `self` into the frame of `view` rescaled to `out_size × out_size`,
    /// clipped to the view.
    pub fn to_local(&self, view: &Bbox, out_size: f64) -> Result<LocalBox> {
        let clipped = self
            .intersect(view)
            .ok_or_else(|| Error::InvalidArgument(format!("box {self} does not intersect view {view}")))?;
        let sx = out_size / view.w as f64;
        let sy = out_size / view.h as f64;
        Ok(LocalBox {
            x0: (clipped.x - view.x) as f64 * sx,
            y0: (clipped.y - view.y) as f64 * sy,
            x1: (clipped.right() - view.x) as f64 * sx,
            y1: (clipped.bottom() - view.y) as f64 * sy,
        })
    }
}

impl fmt::Display for Bbox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {}", self.x, self.y, self.w, self.h)
    }
}

/// Box in fractional coordinates of a resized view, as corners.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

/// Thresholds for discarding redundant proposals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    /// Minimum of width and height, pixels.
    pub min_scale: u32,
    pub aspect_ratio_min: f64,
    pub aspect_ratio_max: f64,
    pub max_iou: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            min_scale: 64,
            aspect_ratio_min: 1.0 / 3.0,
            aspect_ratio_max: 3.0,
            max_iou: 0.5,
        }
    }
}

impl FilterConfig {
    pub fn with_min_scale(min_scale: u32) -> Self {
        FilterConfig {
            min_scale,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.aspect_ratio_min > 0.0
            && self.aspect_ratio_min <= self.aspect_ratio_max
            && (0.0..=1.0).contains(&self.max_iou);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid filter config {self:?}")))
        }
    }

    /// Scale and aspect-ratio test for a single box.
    pub fn admits(&self, b: &Bbox) -> bool {
        let ar = b.aspect_ratio();
        b.min_side() >= self.min_scale && ar >= self.aspect_ratio_min && ar <= self.aspect_ratio_max
    }
}

/// Drop boxes failing the scale or aspect-ratio test, then greedily
/// deduplicate: boxes are visited by area, largest first (ties keep input
/// order), and a box survives if its IoU with every earlier survivor is at
/// most `max_iou`. Survivors are returned in input order.
pub fn filter_proposals(boxes: &[Bbox], cfg: &FilterConfig) -> Vec<Bbox> {
    let mut order: Vec<usize> = (0..boxes.len()).filter(|&i| cfg.admits(&boxes[i])).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(boxes[i].area()));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| boxes[k].iou(&boxes[i]) <= cfg.max_iou) {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    kept.into_iter().map(|i| boxes[i]).collect()
}

/// One line of the box text format: `x y w h [label]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoxRecord {
    pub bbox: Bbox,
    pub label: Option<String>,
}

/// Parse the box text format. Blank lines and `#` comments are skipped;
/// `origin` only appears in diagnostics.
pub fn parse_boxes(text: &str, origin: &Path) -> Result<Vec<BoxRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let content = line.split('#').next().unwrap_or("");
        if content.trim().is_empty() {
            continue;
        }
        let err = |column: usize, message: String| Error::Parse {
            path: origin.to_path_buf(),
            line: lineno + 1,
            column,
            message,
        };
        let mut fields = Vec::new();
        let mut start = None;
        for (i, ch) in content.char_indices().chain(std::iter::once((content.len(), ' '))) {
            match (ch.is_whitespace(), start) {
                (false, None) => start = Some(i),
                (true, Some(s)) => {
                    fields.push((s + 1, &content[s..i]));
                    start = None;
                }
                _ => {}
            }
        }
        if fields.len() < 4 || fields.len() > 5 {
            return Err(err(
                1,
                format!("expected `x y w h [label]`, found {} fields", fields.len()),
            ));
        }
        let mut nums = [0u32; 4];
        for (slot, &(col, tok)) in nums.iter_mut().zip(&fields) {
            *slot = tok
                .parse()
                .map_err(|_| err(col, format!("`{tok}` is not a non-negative integer")))?;
        }
        let bbox = Bbox::new(nums[0], nums[1], nums[2], nums[3]).map_err(|e| err(fields[2].0, e.to_string()))?;
        out.push(BoxRecord {
            bbox,
            label: fields.get(4).map(|&(_, l)| l.to_string()),
        });
    }
    Ok(out)
}

pub fn format_boxes(records: &[BoxRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&r.bbox.to_string());
        if let Some(l) = &r.label {
            s.push(' ');
            s.push_str(l);
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x: u32, y: u32, w: u32, h: u32) -> Bbox {
        Bbox::new(x, y, w, h).unwrap()
    }

    fn pixels(b: &Bbox) -> std::collections::HashSet<(u32, u32)> {
        (b.x..b.right())
            .flat_map(|x| (b.y..b.bottom()).map(move |y| (x, y)))
            .collect()
    }

    fn arb_box() -> impl Strategy<Value = Bbox> {
        (0u32..40, 0u32..40, 1u32..30, 1u32..30).prop_map(|(x, y, w, h)| b(x, y, w, h))
    }

    #[test]
    fn iou_examples() {
        let a = b(3, 4, 10, 7);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(b(0, 0, 2, 2).iou(&b(5, 5, 2, 2)), 0.0);
        // touching edges share no pixels
        assert_eq!(b(0, 0, 2, 2).iou(&b(2, 0, 2, 2)), 0.0);
        let (p, q) = (b(0, 0, 2, 2), b(1, 1, 2, 2));
        let (sp, sq) = (pixels(&p), pixels(&q));
        let oracle = sp.intersection(&sq).count() as f64 / sp.union(&sq).count() as f64;
        assert!((oracle - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(p.iou(&q), oracle);
    }

    #[test]
    fn intersect_examples() {
        let a = b(2, 3, 4, 5);
        assert_eq!(a.intersect(&a), Some(a));
        assert_eq!(b(0, 0, 2, 2).intersect(&b(4, 4, 2, 2)), None);
        let i = b(0, 0, 4, 4).intersect(&b(2, 2, 4, 4)).unwrap();
        assert_eq!(i, b(2, 2, 2, 2));
        let oracle: std::collections::HashSet<_> = pixels(&b(0, 0, 4, 4))
            .intersection(&pixels(&b(2, 2, 4, 4)))
            .copied()
            .collect();
        assert_eq!(pixels(&i), oracle);
    }

    #[test]
    fn contains_examples() {
        let a = b(5, 5, 10, 10);
        assert!(a.contains(&a));
        assert!(!a.contains(&b(4, 5, 10, 10)));
        assert!(!a.contains(&b(6, 5, 10, 10)));
        assert!(a.contains(&b(6, 6, 9, 9)));
    }

    #[test]
    fn filter_examples() {
        let cfg = FilterConfig::default();
        let compliant = vec![b(0, 0, 64, 64), b(100, 100, 80, 70), b(0, 200, 150, 64)];
        assert_eq!(filter_proposals(&compliant, &cfg), compliant);
        assert!(filter_proposals(&[b(0, 0, 10, 10)], &cfg).is_empty());
        let twins = vec![b(5, 5, 64, 64), b(5, 5, 64, 64)];
        let out = filter_proposals(&twins, &cfg);
        assert_eq!(out.len(), 1);
        // aspect ratio bounds are inclusive
        assert_eq!(filter_proposals(&[b(0, 0, 192, 64)], &cfg).len(), 1);
        assert!(filter_proposals(&[b(0, 0, 193, 64)], &cfg).is_empty());
    }

    #[test]
    fn filter_prefers_larger_boxes() {
        let cfg = FilterConfig::with_min_scale(1);
        let small = b(0, 0, 10, 10);
        let large = b(0, 0, 11, 11);
        assert_eq!(filter_proposals(&[small, large], &cfg), vec![large]);
    }

    #[test]
    fn to_local_examples() {
        let view = b(10, 20, 40, 40);
        assert_eq!(
            view.to_local(&view, 48.0).unwrap(),
            LocalBox {
                x0: 0.0,
                y0: 0.0,
                x1: 48.0,
                y1: 48.0
            }
        );
        let centered = b(20, 30, 20, 20);
        assert_eq!(
            centered.to_local(&view, 48.0).unwrap(),
            LocalBox {
                x0: 12.0,
                y0: 12.0,
                x1: 36.0,
                y1: 36.0
            }
        );
        assert!(b(0, 0, 5, 5).to_local(&view, 48.0).is_err());
        // partially outside gets clipped
        let l = b(0, 20, 20, 10).to_local(&view, 40.0).unwrap();
        assert_eq!(
            l,
            LocalBox {
                x0: 0.0,
                y0: 0.0,
                x1: 10.0,
                y1: 10.0
            }
        );
    }

    #[test]
    fn box_text_round_trip_and_diagnostics() {
        let text = "# header\n1 2 3 4 circle\n\n5 6 7 8\n";
        let recs = parse_boxes(text, Path::new("b.txt")).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].label.as_deref(), Some("circle"));
        assert_eq!(parse_boxes(&format_boxes(&recs), Path::new("x")).unwrap(), recs);

        match parse_boxes("1 2 3 4\n1 2 x 4\n", Path::new("b.txt")) {
            Err(Error::Parse { line, column, .. }) => assert_eq!((line, column), (2, 5)),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_boxes("1 2 0 4\n", Path::new("b.txt")).is_err());
        assert!(parse_boxes("1 2 3\n", Path::new("b.txt")).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn iou_symmetric_bounded(a in arb_box(), c in arb_box()) {
            let (x, y) = (a.iou(&c), c.iou(&a));
            prop_assert_eq!(x, y);
            prop_assert!((0.0..=1.0).contains(&x));
            prop_assert_eq!(x == 1.0, a == c);
        }

        #[test]
        fn contains_matches_corner_oracle(a in arb_box(), c in arb_box()) {
            let corners = [(c.x, c.y), (c.right() - 1, c.y), (c.x, c.bottom() - 1), (c.right() - 1, c.bottom() - 1)];
            let oracle = corners.iter().all(|&(px, py)| px >= a.x && px < a.right() && py >= a.y && py < a.bottom());
            prop_assert_eq!(a.contains(&c), oracle);
            if a.contains(&c) && c.contains(&a) {
                prop_assert_eq!(a, c);
            }
        }

        #[test]
        fn filter_is_idempotent_and_pairwise_bounded(
            boxes in proptest::collection::vec(arb_box(), 0..25),
            max_iou in 0.0f64..1.0,
        ) {
            let cfg = FilterConfig { min_scale: 3, max_iou, ..FilterConfig::default() };
            let once = filter_proposals(&boxes, &cfg);
            prop_assert_eq!(filter_proposals(&once, &cfg), once.clone());
            for (i, p) in once.iter().enumerate() {
                prop_assert!(cfg.admits(p));
                prop_assert!(boxes.contains(p));
                for q in &once[i + 1..] {
                    prop_assert!(p.iou(q) <= max_iou);
                }
            }
        }

        #[test]
        fn to_local_matches_corner_map(
            (vx, vy, vw, vh) in (0u32..20, 0u32..20, 8u32..40, 8u32..40),
            (dx, dy, w, h) in (0u32..4, 0u32..4, 1u32..4, 1u32..4),
        ) {
            let view = b(vx, vy, vw, vh);
            let inner = b(vx + dx, vy + dy, w, h);
            let out = 96.0;
            let l = inner.to_local(&view, out).unwrap();
            let map = |p: u32, origin: u32, extent: u32| (p as f64 - origin as f64) / extent as f64 * out;
            prop_assert!((l.x0 - map(inner.x, vx, vw)).abs() < 1e-9);
            prop_assert!((l.y0 - map(inner.y, vy, vh)).abs() < 1e-9);
            prop_assert!((l.x1 - map(inner.right(), vx, vw)).abs() < 1e-9);
            prop_assert!((l.y1 - map(inner.bottom(), vy, vh)).abs() < 1e-9);
        }
    }
}
