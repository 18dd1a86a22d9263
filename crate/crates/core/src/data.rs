//! Synthetic multi-instance scenes with ground-truth boxes and class labels,
//! and the on-disk dataset layout (PPM images plus box sidecar files).

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{format_boxes, parse_boxes, Bbox, BoxRecord};
use crate::image::{snap, Image};
use crate::profile::Profile;
use crate::rng::{derive_seed, rng_from, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 4] = [
        ShapeClass::Circle,
        ShapeClass::Square,
        ShapeClass::Triangle,
        ShapeClass::Cross,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Circle => "circle",
            ShapeClass::Square => "square",
            ShapeClass::Triangle => "triangle",
            ShapeClass::Cross => "cross",
        }
    }

    /// Coverage test in box-normalized coordinates `u, v ∈ [0, 1]`.
    fn covers(self, u: f64, v: f64) -> bool {
        match self {
            ShapeClass::Circle => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
            ShapeClass::Square => true,
            ShapeClass::Triangle => (u - 0.5).abs() <= v / 2.0,
            ShapeClass::Cross => (u - 0.5).abs() <= 1.0 / 6.0 || (v - 0.5).abs() <= 1.0 / 6.0,
        }
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeClass {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        ShapeClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown shape class `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub class: ShapeClass,
    pub color: [f32; 3],
    pub bbox: Bbox,
    /// Draw order; later shapes occlude earlier ones.
    pub order: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub canvas: u32,
    pub background_seed: u64,
    pub background: [f32; 3],
    pub shapes: Vec<ShapeSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub canvas: u32,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub min_side: u32,
    pub max_side: u32,
    /// Upper bound on IoU between any two shape boxes.
    pub max_pair_iou: f64,
    pub placement_attempts: usize,
    pub scene_retries: usize,
}

impl SynthConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let min_side = profile.min_scale();
        SynthConfig {
            canvas: profile.canvas(),
            min_shapes: 2,
            max_shapes: 6,
            min_side,
            max_side: min_side * 3 / 2,
            max_pair_iou: 0.1,
            placement_attempts: 200,
            scene_retries: 20,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.min_shapes >= 1
            && self.min_shapes <= self.max_shapes
            && self.min_side >= 2
            && self.min_side <= self.max_side
            && self.max_side <= self.canvas
            && self.canvas >= crate::image::MIN_SIDE;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid synth config {self:?}")))
        }
    }
}

/// Rendered scene with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub image: Image,
}

impl Scene {
    pub fn boxes(&self) -> Vec<Bbox> {
        self.spec.shapes.iter().map(|s| s.bbox).collect()
    }

    pub fn labels(&self) -> Vec<ShapeClass> {
        self.spec.shapes.iter().map(|s| s.class).collect()
    }
}

fn random_color(rng: &mut Rng, away_from: [f32; 3]) -> [f32; 3] {
    loop {
        let c = [rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()];
        let d2: f32 = c.iter().zip(&away_from).map(|(a, b)| (a - b).powi(2)).sum();
        if d2 >= 0.4 * 0.4 {
            return c;
        }
    }
}

fn place_shapes(rng: &mut Rng, cfg: &SynthConfig, count: usize, background: [f32; 3]) -> Option<Vec<ShapeSpec>> {
    let mut shapes: Vec<ShapeSpec> = Vec::with_capacity(count);
    for order in 0..count {
        let class = ShapeClass::ALL[rng.gen_range(0..4)];
        let color = random_color(rng, background);
        let mut placed = None;
        for _ in 0..cfg.placement_attempts {
            let w = rng.gen_range(cfg.min_side..=cfg.max_side);
            let h = match class {
                ShapeClass::Circle | ShapeClass::Square => w,
                _ => {
                    let h = (w as f64 * rng.gen_range(0.8..1.25)).round() as u32;
                    h.clamp(cfg.min_side, cfg.max_side)
                }
            };
            let x = rng.gen_range(0..=cfg.canvas - w);
            let y = rng.gen_range(0..=cfg.canvas - h);
            let bbox = Bbox { x, y, w, h };
            if shapes.iter().all(|s| s.bbox.iou(&bbox) <= cfg.max_pair_iou) {
                placed = Some(bbox);
                break;
            }
        }
        shapes.push(ShapeSpec {
            class,
            color,
            bbox: placed?,
            order,
        });
    }
    Some(shapes)
}

/// Draw a scene layout. Placement failures restart the layout up to
/// `scene_retries` times.
pub fn sample_spec(rng: &mut Rng, cfg: &SynthConfig) -> Result<SceneSpec> {
    cfg.validate()?;
    let count = rng.gen_range(cfg.min_shapes..=cfg.max_shapes);
    let background_seed = rng.gen();
    let background = [
        rng.gen_range(0.25..0.75f32),
        rng.gen_range(0.25..0.75f32),
        rng.gen_range(0.25..0.75f32),
    ];
    for _ in 0..=cfg.scene_retries {
        if let Some(shapes) = place_shapes(rng, cfg, count, background) {
            return Ok(SceneSpec {
                canvas: cfg.canvas,
                background_seed,
                background,
                shapes,
            });
        }
    }
    Err(Error::InvalidArgument(format!(
        "could not place {count} shapes on a {0}x{0} canvas",
        cfg.canvas
    )))
}

const BACKGROUND_GRID: usize = 4;
const BACKGROUND_AMPLITUDE: f32 = 0.08;
const SUPERSAMPLE: usize = 4;

/// Rasterize a layout: low-frequency noise background, then shapes in draw
/// order with supersampled coverage. Values are snapped to 8-bit levels.
pub fn render(spec: &SceneSpec) -> Result<Image> {
    let n = spec.canvas as usize;
    let mut bg_rng = rng_from(spec.background_seed);
    let g = BACKGROUND_GRID + 1;
    let grid: Vec<f32> = (0..3 * g * g)
        .map(|_| bg_rng.gen_range(-BACKGROUND_AMPLITUDE..BACKGROUND_AMPLITUDE))
        .collect();
    let mut data = vec![0.0f32; 3 * n * n];
    for c in 0..3 {
        let cell = &grid[c * g * g..(c + 1) * g * g];
        for y in 0..n {
            let gy = (y as f32 + 0.5) / n as f32 * BACKGROUND_GRID as f32;
            let (y0, fy) = (gy.floor() as usize, gy.fract());
            for x in 0..n {
                let gx = (x as f32 + 0.5) / n as f32 * BACKGROUND_GRID as f32;
                let (x0, fx) = (gx.floor() as usize, gx.fract());
                let top = cell[y0 * g + x0] * (1.0 - fx) + cell[y0 * g + x0 + 1] * fx;
                let bottom = cell[(y0 + 1) * g + x0] * (1.0 - fx) + cell[(y0 + 1) * g + x0 + 1] * fx;
                data[c * n * n + y * n + x] = spec.background[c] + top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    let mut shapes: Vec<&ShapeSpec> = spec.shapes.iter().collect();
    shapes.sort_by_key(|s| s.order);
    let ss = SUPERSAMPLE as f64;
    for s in shapes {
        let b = s.bbox;
        for py in b.y..b.bottom() {
            for px in b.x..b.right() {
                let mut hits = 0;
                for sy in 0..SUPERSAMPLE {
                    let v = ((py - b.y) as f64 + (sy as f64 + 0.5) / ss) / b.h as f64;
                    for sx in 0..SUPERSAMPLE {
                        let u = ((px - b.x) as f64 + (sx as f64 + 0.5) / ss) / b.w as f64;
                        hits += s.class.covers(u, v) as usize;
                    }
                }
                if hits == 0 {
                    continue;
                }
                let alpha = hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
                let i = py as usize * n + px as usize;
                for c in 0..3 {
                    let d = &mut data[c * n * n + i];
                    *d = *d * (1.0 - alpha) + s.color[c] * alpha;
                }
            }
        }
    }
    for v in &mut data {
        *v = snap(*v);
    }
    Image::new(spec.canvas, spec.canvas, data)
}

pub fn generate_scene(rng: &mut Rng, cfg: &SynthConfig) -> Result<Scene> {
    let spec = sample_spec(rng, cfg)?;
    let image = render(&spec)?;
    Ok(Scene { spec, image })
}

pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub image: PathBuf,
    pub boxes: PathBuf,
}

/// Index of a generated dataset. Paths inside are relative to `root`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(skip)]
    pub root: PathBuf,
    pub seed: u64,
    pub count: usize,
    pub profile: Profile,
    pub samples: Vec<SampleEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub boxes: Vec<Bbox>,
    pub labels: Vec<ShapeClass>,
}

impl DatasetManifest {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut manifest: DatasetManifest = toml::from_str(&text).map_err(|e| {
            let (line, column) = e.span().map(|s| line_col(&text, s.start)).unwrap_or((1, 1));
            Error::Parse {
                path: path.clone(),
                line,
                column,
                message: e.message().to_string(),
            }
        })?;
        if manifest.samples.len() != manifest.count {
            return Err(Error::Parse {
                path,
                line: 1,
                column: 1,
                message: format!(
                    "count = {} but {} samples listed",
                    manifest.count,
                    manifest.samples.len()
                ),
            });
        }
        manifest.root = root.to_path_buf();
        Ok(manifest)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn read_sample(&self, index: usize) -> Result<Sample> {
        let entry = self.samples.get(index).ok_or_else(|| {
            Error::InvalidArgument(format!("sample {index} out of range (dataset has {})", self.len()))
        })?;
        let image = Image::read_ppm(&self.root.join(&entry.image))?;
        let box_path = self.root.join(&entry.boxes);
        let text = fs::read_to_string(&box_path).map_err(|e| Error::io(&box_path, e))?;
        let records = parse_boxes(&text, &box_path)?;
        let mut boxes = Vec::with_capacity(records.len());
        let mut labels = Vec::with_capacity(records.len());
        for (i, r) in records.into_iter().enumerate() {
            let label = r.label.as_deref().ok_or_else(|| Error::Parse {
                path: box_path.clone(),
                line: i + 1,
                column: 1,
                message: "missing class label".into(),
            })?;
            labels.push(label.parse().map_err(|message| Error::Parse {
                path: box_path.clone(),
                line: i + 1,
                column: 1,
                message,
            })?);
            if !r.bbox.fits_in(image.width(), image.height()) {
                return Err(Error::Parse {
                    path: box_path.clone(),
                    line: i + 1,
                    column: 1,
                    message: format!("box {} outside image", r.bbox),
                });
            }
            boxes.push(r.bbox);
        }
        Ok(Sample { image, boxes, labels })
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = offset - before.rfind('\n').map_or(0, |p| p + 1) + 1;
    (line, column)
}

/// Generate `count` scenes under `root`; sample `i` is drawn from
/// `derive_seed(seed, i)` so the dataset depends only on
/// `(seed, count, profile)`.
pub fn write_dataset(root: &Path, seed: u64, count: usize, profile: Profile) -> Result<DatasetManifest> {
    let cfg = SynthConfig::for_profile(profile);
    for dir in ["images", "boxes"] {
        let p = root.join(dir);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = rng_from(derive_seed(seed, i as u64));
        let scene = generate_scene(&mut rng, &cfg)?;
        let entry = SampleEntry {
            image: PathBuf::from(format!("images/{i:06}.ppm")),
            boxes: PathBuf::from(format!("boxes/{i:06}.txt")),
        };
        scene.image.write_ppm(&root.join(&entry.image))?;
        let records: Vec<BoxRecord> = scene
            .spec
            .shapes
            .iter()
            .map(|s| BoxRecord {
                bbox: s.bbox,
                label: Some(s.class.name().to_string()),
            })
            .collect();
        let box_path = root.join(&entry.boxes);
        fs::write(&box_path, format_boxes(&records)).map_err(|e| Error::io(&box_path, e))?;
        samples.push(entry);
    }
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        seed,
        count,
        profile,
        samples,
    };
    let path = root.join(MANIFEST_FILE);
    let text =
        toml::to_string(&manifest).map_err(|e| Error::InvalidArgument(format!("manifest serialization: {e}")))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_shape_config() {
        let cfg = SynthConfig {
            min_shapes: 1,
            max_shapes: 1,
            ..SynthConfig::for_profile(Profile::Desk)
        };
        let scene = generate_scene(&mut rng_from(3), &cfg).unwrap();
        assert_eq!(scene.boxes().len(), 1);
        assert_eq!(scene.labels()[0], scene.spec.shapes[0].class);
    }

    #[test]
    fn same_seed_same_pixels() {
        let cfg = SynthConfig::for_profile(Profile::Desk);
        let a = generate_scene(&mut rng_from(11), &cfg).unwrap();
        let b = generate_scene(&mut rng_from(11), &cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&mut rng_from(12), &cfg).unwrap();
        assert_ne!(a.image, c.image);
    }

    /// Pixels whose color departs from the pure background must lie inside
    /// some shape box dilated by one pixel.
    #[test]
    fn shape_pixels_inside_dilated_boxes() {
        for profile in [Profile::Desk, Profile::Paper] {
            let cfg = SynthConfig::for_profile(profile);
            for seed in 0..20 {
                let scene = generate_scene(&mut rng_from(seed), &cfg).unwrap();
                let bare = render(&SceneSpec {
                    shapes: Vec::new(),
                    ..scene.spec.clone()
                })
                .unwrap();
                let n = cfg.canvas;
                for y in 0..n {
                    for x in 0..n {
                        if scene.image.pixel(x, y) == bare.pixel(x, y) {
                            continue;
                        }
                        let inside = scene
                            .boxes()
                            .iter()
                            .any(|b| x + 1 >= b.x && x <= b.right() && y + 1 >= b.y && y <= b.bottom());
                        assert!(inside, "seed {seed}: stray pixel ({x}, {y})");
                    }
                }
            }
        }
    }

    #[test]
    fn layouts_respect_config() {
        for profile in [Profile::Desk, Profile::Paper] {
            let cfg = SynthConfig::for_profile(profile);
            for seed in 0..200 {
                let spec = sample_spec(&mut rng_from(seed), &cfg).unwrap();
                assert!((2..=6).contains(&spec.shapes.len()));
                for (i, s) in spec.shapes.iter().enumerate() {
                    assert!(s.bbox.fits_in(cfg.canvas, cfg.canvas));
                    assert!(s.bbox.min_side() >= profile.min_scale());
                    for t in &spec.shapes[i + 1..] {
                        assert!(s.bbox.iou(&t.bbox) <= cfg.max_pair_iou);
                    }
                }
            }
        }
    }

    #[test]
    fn infeasible_layout_is_an_error() {
        let cfg = SynthConfig {
            min_shapes: 6,
            max_shapes: 6,
            min_side: 60,
            max_side: 64,
            max_pair_iou: 0.0,
            placement_attempts: 5,
            scene_retries: 2,
            ..SynthConfig::for_profile(Profile::Desk)
        };
        assert!(generate_scene(&mut rng_from(0), &cfg).is_err());
    }
}
