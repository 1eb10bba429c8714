//! Two-domain toy detection scenes: flat-colored shapes on a textured
//! background for the source domain, and the same kind of scene pushed
//! through haze, blur, a color cast and sensor noise for the target domain.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{read_annotations, write_annotations, AnnotatedScene, AnnotationRecord, BoxAnnotation, Image};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Disk,
    Square,
    Triangle,
    Cross,
    Ring,
    Diamond,
}

impl Shape {
    pub const ALL: [Shape; 6] = [Shape::Disk, Shape::Square, Shape::Triangle, Shape::Cross, Shape::Ring, Shape::Diamond];

    pub fn for_class(class: usize) -> Shape {
        Self::ALL[class % Self::ALL.len()]
    }

    /// Whether the point at offset `(dx, dy)` from the center of a shape of
    /// half-size `r` is inside.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        let (ax, ay) = (dx.abs(), dy.abs());
        match self {
            Shape::Disk => dx * dx + dy * dy <= r * r,
            Shape::Square => ax <= r * 0.85 && ay <= r * 0.85,
            Shape::Triangle => {
                // apex up, base at +r
                let t = (dy + r) / (2.0 * r);
                (0.0..=1.0).contains(&t) && ax <= t * r
            }
            Shape::Cross => (ax <= r * 0.35 && ay <= r) || (ay <= r * 0.35 && ax <= r),
            Shape::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= (0.55 * r).powi(2)
            }
            Shape::Diamond => ax + ay <= r,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub image_size: usize,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object side length range in pixels.
    pub min_size: usize,
    pub max_size: usize,
    /// Largest allowed intersection with an already placed box, as a
    /// fraction of the smaller box's area.
    pub max_overlap: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_classes: 3,
            min_objects: 1,
            max_objects: 4,
            min_size: 10,
            max_size: 22,
            max_overlap: 0.4,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.image_size < 32 {
            return bad(format!("image_size must be >= 32, got {}", self.image_size));
        }
        if self.min_objects > self.max_objects {
            return bad("min_objects exceeds max_objects".into());
        }
        if self.min_size < 3 || self.min_size > self.max_size || self.max_size > self.image_size {
            return bad(format!("object size range {}..={} invalid", self.min_size, self.max_size));
        }
        if !(0.0..=1.0).contains(&self.max_overlap) {
            return bad("max_overlap must lie in [0, 1]".into());
        }
        Ok(())
    }
}

/// Pixel-space shift toward the target domain. All zero is the identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShiftParams {
    /// Blend weight toward `haze_color`, in [0, 1].
    pub haze: f64,
    pub haze_color: [f64; 3],
    pub noise_sigma: f64,
    /// Added per channel after hazing.
    pub color_shift: [f64; 3],
    pub blur_radius: usize,
}

impl Default for ShiftParams {
    fn default() -> Self {
        Self {
            haze: 0.0,
            haze_color: [0.8, 0.8, 0.82],
            noise_sigma: 0.0,
            color_shift: [0.0; 3],
            blur_radius: 0,
        }
    }
}

impl ShiftParams {
    /// The foggy target domain used by default.
    pub fn foggy() -> Self {
        Self {
            haze: 0.5,
            haze_color: [0.8, 0.8, 0.82],
            noise_sigma: 0.04,
            color_shift: [-0.06, 0.0, 0.08],
            blur_radius: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.haze) || !(self.noise_sigma >= 0.0) || self.color_shift.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidConfig("shift parameters out of range".into()));
        }
        Ok(())
    }
}

fn overlap_fraction(a: &BoxAnnotation, b: &BoxAnnotation) -> f64 {
    let inter = a.rect().intersection_area(&b.rect()) as f64;
    inter / a.rect().area().min(b.rect().area()).max(1) as f64
}

/// Background: a smooth two-tone gradient plus faint stripes.
fn background(size: usize, rng: &mut impl Rng) -> Image {
    let mut img = Image::filled(size, size, 3, 0.0);
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.35));
    let tilt: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.1..0.1));
    let freq = rng.random_range(0.2..0.5);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let n = size as f64;
    for y in 0..size {
        for x in 0..size {
            let stripe = 0.03 * ((x as f64 + y as f64) * freq + phase).sin();
            for c in 0..3 {
                let i = img.index(y, x, c);
                img.data[i] = (base[c] + tilt[c] * (x as f64 / n - 0.5) + stripe).clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Draws one shape, returning its tight pixel box, or `None` if no pixel
/// was covered.
fn draw(img: &mut Image, shape: Shape, cx: f64, cy: f64, r: f64, color: [f64; 3], class_id: usize) -> Option<BoxAnnotation> {
    let (mut x0, mut y0, mut x1, mut y1) = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
    let lo_y = (cy - r - 1.0).floor().max(0.0) as usize;
    let hi_y = ((cy + r + 1.0).ceil() as usize).min(img.height);
    let lo_x = (cx - r - 1.0).floor().max(0.0) as usize;
    let hi_x = ((cx + r + 1.0).ceil() as usize).min(img.width);
    for y in lo_y..hi_y {
        for x in lo_x..hi_x {
            if shape.contains(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r) {
                for (c, v) in color.iter().enumerate() {
                    let i = img.index(y, x, c);
                    img.data[i] = *v;
                }
                let (xi, yi) = (x as i64, y as i64);
                x0 = x0.min(xi);
                y0 = y0.min(yi);
                x1 = x1.max(xi + 1);
                y1 = y1.max(yi + 1);
            }
        }
    }
    (x0 < x1).then(|| BoxAnnotation::new(x0, y0, x1, y1, class_id))
}

/// One source-domain scene. Objects that cannot be placed within the overlap
/// allowance after a bounded number of tries are skipped with a warning.
pub fn generate_scene(cfg: &SceneConfig, rng: &mut impl Rng) -> Result<AnnotatedScene> {
    cfg.validate()?;
    let mut image = background(cfg.image_size, rng);
    let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut boxes: Vec<BoxAnnotation> = Vec::with_capacity(n);
    for _ in 0..n {
        let class_id = rng.random_range(0..cfg.num_classes);
        let shape = Shape::for_class(class_id);
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.55..1.0));
        let mut placed = false;
        for _attempt in 0..50 {
            let side = rng.random_range(cfg.min_size..=cfg.max_size) as f64;
            let r = side / 2.0;
            let cx = rng.random_range(r..=cfg.image_size as f64 - r);
            let cy = rng.random_range(r..=cfg.image_size as f64 - r);
            let footprint = BoxAnnotation::new(
                (cx - r).floor() as i64,
                (cy - r).floor() as i64,
                (cx + r).ceil() as i64,
                (cy + r).ceil() as i64,
                class_id,
            );
            if boxes.iter().any(|b| overlap_fraction(b, &footprint) > cfg.max_overlap) {
                continue;
            }
            if let Some(b) = draw(&mut image, shape, cx, cy, r, color, class_id) {
                boxes.push(b);
                placed = true;
                break;
            }
        }
        if !placed {
            tracing::warn!(class_id, "could not place object, scene has fewer objects");
        }
    }
    Ok(AnnotatedScene { image, boxes })
}

fn box_blur(img: &Image, radius: usize) -> Image {
    let mut out = img.clone();
    let r = radius as i64;
    let (h, w) = (img.height as i64, img.width as i64);
    for y in 0..h {
        for x in 0..w {
            for c in 0..img.channels {
                let mut s = 0.0;
                let mut n = 0.0;
                for yy in (y - r).max(0)..=(y + r).min(h - 1) {
                    for xx in (x - r).max(0)..=(x + r).min(w - 1) {
                        s += img.get(yy as usize, xx as usize, c);
                        n += 1.0;
                    }
                }
                let i = out.index(y as usize, x as usize, c);
                out.data[i] = s / n;
            }
        }
    }
    out
}

/// Blur, then haze blend, then color shift, then Gaussian noise drawn in
/// row-major pixel/channel order; values clamped to [0, 1]. Boxes are kept.
pub fn apply_domain_shift(scene: &AnnotatedScene, p: &ShiftParams, rng: &mut impl Rng) -> Result<AnnotatedScene> {
    p.validate()?;
    let mut img = if p.blur_radius > 0 {
        box_blur(&scene.image, p.blur_radius)
    } else {
        scene.image.clone()
    };
    let noise = (p.noise_sigma > 0.0).then(|| Normal::new(0.0, p.noise_sigma).expect("sigma >= 0"));
    let touched = p.haze > 0.0 || p.color_shift.iter().any(|&c| c != 0.0) || noise.is_some();
    if touched {
        let ch = img.channels;
        for (i, v) in img.data.iter_mut().enumerate() {
            let c = (i % ch).min(2);
            let mut x = (1.0 - p.haze) * *v + p.haze * p.haze_color[c] + p.color_shift[c];
            if let Some(n) = &noise {
                x += n.sample(rng);
            }
            *v = x.clamp(0.0, 1.0);
        }
    }
    Ok(AnnotatedScene {
        image: img,
        boxes: scene.boxes.clone(),
    })
}

/// Sizes and seeds of a generated two-domain dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub scene: SceneConfig,
    pub shift: ShiftParams,
    pub source_train: usize,
    pub target_train: usize,
    pub source_val: usize,
    pub target_val: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            shift: ShiftParams::foggy(),
            source_train: 256,
            target_train: 256,
            source_val: 64,
            target_val: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    SourceTrain,
    TargetTrain,
    SourceVal,
    TargetVal,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::SourceTrain, Split::TargetTrain, Split::SourceVal, Split::TargetVal];

    pub fn name(self) -> &'static str {
        match self {
            Split::SourceTrain => "source_train",
            Split::TargetTrain => "target_train",
            Split::SourceVal => "source_val",
            Split::TargetVal => "target_val",
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }

    fn is_target(self) -> bool {
        matches!(self, Split::TargetTrain | Split::TargetVal)
    }
}

/// Seed of scene `index` in `split`, independent of every other scene.
pub fn scene_seed(base: u64, split: Split, index: usize) -> u64 {
    let mut z = base ^ split.tag().wrapping_mul(0x9e3779b97f4a7c15) ^ (index as u64).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub source_train: Vec<AnnotatedScene>,
    pub target_train: Vec<AnnotatedScene>,
    pub source_val: Vec<AnnotatedScene>,
    pub target_val: Vec<AnnotatedScene>,
}

impl SynthDataset {
    pub fn split(&self, s: Split) -> &[AnnotatedScene] {
        match s {
            Split::SourceTrain => &self.source_train,
            Split::TargetTrain => &self.target_train,
            Split::SourceVal => &self.source_val,
            Split::TargetVal => &self.target_val,
        }
    }
}

fn generate_split(cfg: &SynthConfig, split: Split, count: usize) -> Result<Vec<AnnotatedScene>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(count.max(1));
    let chunk = count.div_ceil(workers.max(1)).max(1);
    let indices: Vec<usize> = (0..count).collect();
    let parts: Vec<Result<Vec<AnnotatedScene>>> = std::thread::scope(|scope| {
        indices
            .chunks(chunk)
            .map(|idx| {
                scope.spawn(move || {
                    idx.iter()
                        .map(|&i| {
                            let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(cfg.scene.seed, split, i));
                            let scene = generate_scene(&cfg.scene, &mut rng)?;
                            if split.is_target() {
                                apply_domain_shift(&scene, &cfg.shift, &mut rng)
                            } else {
                                Ok(scene)
                            }
                        })
                        .collect()
                })
            })
            .collect::<Vec<_>>()
            .into_iter()
            .map(|h| h.join().expect("generator thread panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(count);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn generate_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.scene.validate()?;
    cfg.shift.validate()?;
    Ok(SynthDataset {
        source_train: generate_split(cfg, Split::SourceTrain, cfg.source_train)?,
        target_train: generate_split(cfg, Split::TargetTrain, cfg.target_train)?,
        source_val: generate_split(cfg, Split::SourceVal, cfg.source_val)?,
        target_val: generate_split(cfg, Split::TargetVal, cfg.target_val)?,
    })
}

/// Writes `<dir>/<split>/scene_NNNN.png` and `<dir>/<split>/annotations.jsonl`
/// for every split. Returns the annotation file paths.
pub fn write_dataset(ds: &SynthDataset, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for split in Split::ALL {
        let sub = dir.join(split.name());
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let mut records = Vec::new();
        for (i, scene) in ds.split(split).iter().enumerate() {
            let name = format!("scene_{i:04}.png");
            scene.image.save_png(&sub.join(&name))?;
            records.push(AnnotationRecord {
                image: name,
                boxes: scene.boxes.clone(),
            });
        }
        let ann = sub.join("annotations.jsonl");
        let file = std::fs::File::create(&ann).map_err(|e| Error::io(&ann, e))?;
        write_annotations(std::io::BufWriter::new(file), &records)?;
        written.push(ann);
    }
    Ok(written)
}

/// Reads one split written by [`write_dataset`]. Image paths in the
/// annotation file are relative to the split directory.
pub fn read_split(dir: &Path, split: Split) -> Result<Vec<AnnotatedScene>> {
    let sub = dir.join(split.name());
    let records = read_annotations(&sub.join("annotations.jsonl"))?;
    records
        .into_iter()
        .map(|r| {
            let image = Image::load_png(&sub.join(&r.image))?;
            let boxes = crate::scene::sanitize_boxes(&r.boxes, image.height, image.width);
            Ok(AnnotatedScene { image, boxes })
        })
        .collect()
}

pub fn read_dataset(dir: &Path) -> Result<SynthDataset> {
    Ok(SynthDataset {
        source_train: read_split(dir, Split::SourceTrain)?,
        target_train: read_split(dir, Split::TargetTrain)?,
        source_val: read_split(dir, Split::SourceVal)?,
        target_val: read_split(dir, Split::TargetVal)?,
    })
}
