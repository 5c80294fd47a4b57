//! Procedural detection scenes.
//!
//! Each scene is a grayscale square image with a few shape objects drawn on a
//! textured background. Aleatoric noise is injected into the labels (box
//! jitter, occluded renderings) and pixels; epistemic sparsity comes from
//! skewed class and size frequencies. Generation is a pure function of the
//! [`DatasetSpec`].

pub mod io;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::bbox::{iou, BoundingBox};
use crate::error::{MdalError, Result};
use crate::seed::{rng_for, TAG_SCENE, TAG_SPLIT};

/// Number of distinct shapes the renderer can draw.
pub const MAX_SHAPE_CLASSES: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub n_scenes: usize,
    /// Side length H = W in pixels.
    pub image_size: usize,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object side-length range in pixels, before aspect-ratio distortion.
    pub min_object_size: f64,
    pub max_object_size: f64,
    /// Standard deviation in pixels of the noise added to each GT box coordinate.
    pub box_jitter_sd: f64,
    pub occlusion_prob: f64,
    pub pixel_noise_sd: f64,
    /// Sampling weights per class (index 0 is class 1).
    pub class_weights: Vec<f64>,
    /// Exponent applied to the uniform draw of object size; values above 1
    /// make large objects rare.
    pub size_skew: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_scenes: 2500,
            image_size: 64,
            num_classes: 4,
            min_objects: 1,
            max_objects: 3,
            min_object_size: 14.0,
            max_object_size: 30.0,
            box_jitter_sd: 0.0,
            occlusion_prob: 0.0,
            pixel_noise_sd: 0.03,
            class_weights: vec![0.4, 0.3, 0.2, 0.1],
            size_skew: 1.0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MdalError::InvalidSpec(m));
        if self.num_classes == 0 || self.num_classes > MAX_SHAPE_CLASSES {
            return bad(format!(
                "num_classes must be in 1..={MAX_SHAPE_CLASSES}, got {}",
                self.num_classes
            ));
        }
        if self.class_weights.len() != self.num_classes {
            return bad(format!(
                "{} class weights for {} classes",
                self.class_weights.len(),
                self.num_classes
            ));
        }
        if self.class_weights.iter().any(|w| !(*w >= 0.0)) {
            return bad("class weights must be non-negative".into());
        }
        let total: f64 = self.class_weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("class weights sum to {total}, expected 1"));
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return bad(format!("occlusion_prob {} outside [0,1]", self.occlusion_prob));
        }
        if !(self.box_jitter_sd >= 0.0) || !(self.pixel_noise_sd >= 0.0) {
            return bad("noise standard deviations must be non-negative".into());
        }
        if !(self.size_skew > 0.0) {
            return bad("size_skew must be positive".into());
        }
        if self.image_size < 8 {
            return bad(format!("image_size {} too small", self.image_size));
        }
        if self.min_objects > self.max_objects {
            return Err(MdalError::Infeasible(format!(
                "min_objects {} > max_objects {}",
                self.min_objects, self.max_objects
            )));
        }
        let size = self.image_size as f64;
        if !(self.min_object_size >= 4.0)
            || self.min_object_size > self.max_object_size
            || self.max_object_size > size
        {
            return Err(MdalError::Infeasible(format!(
                "object sizes [{}, {}] do not fit a {}px image",
                self.min_object_size, self.max_object_size, self.image_size
            )));
        }
        let needed = self.max_objects as f64 * self.min_object_size * self.min_object_size;
        if needed > size * size {
            return Err(MdalError::Infeasible(format!(
                "{} objects of at least {}px cannot fit a {}px image",
                self.max_objects, self.min_object_size, self.image_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    /// Class id in `1..=C`.
    pub class: usize,
    /// Ground-truth label as annotated (possibly jittered).
    pub bbox: BoundingBox,
    /// Tight extent of the rendered shape before occlusion.
    pub rendered: BoundingBox,
    pub jittered: bool,
    pub occluded: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: usize,
    pub size: usize,
    /// Row-major `size × size` intensities in `[0, 1]`.
    pub image: Vec<f64>,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    /// Labels as `(class, box)` pairs, the form consumed by anchor matching.
    pub fn labels(&self) -> Vec<(usize, BoundingBox)> {
        self.objects.iter().map(|o| (o.class, o.bbox)).collect()
    }

    /// Clean object extents, used as evaluation ground truth.
    pub fn true_boxes(&self) -> Vec<(usize, BoundingBox)> {
        self.objects.iter().map(|o| (o.class, o.rendered)).collect()
    }
}

/// Membership test for shape `class` in normalized object coordinates
/// (`u`, `v` in `[-1, 1]` span the object box).
fn shape_contains(class: usize, u: f64, v: f64) -> bool {
    let r2 = u * u + v * v;
    match class {
        1 => u.abs() <= 1.0 && v.abs() <= 1.0,
        2 => r2 <= 1.0,
        3 => (u.abs() <= 0.34 && v.abs() <= 1.0) || (v.abs() <= 0.34 && u.abs() <= 1.0),
        4 => (0.3..=1.0).contains(&r2),
        5 => v <= 1.0 && u.abs() <= 0.5 * (v + 1.0),
        6 => u.abs() <= 1.0 && v.abs() <= 1.0 && (u.abs() >= 0.55 || v.abs() >= 0.55),
        _ => false,
    }
}

struct Placement {
    class: usize,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

fn sample_placement(
    spec: &DatasetSpec,
    rng: &mut ChaCha8Rng,
    classes: &WeightedIndex<f64>,
    placed: &[BoundingBox],
) -> Placement {
    let size = spec.image_size as f64;
    let class = classes.sample(rng) + 1;
    let mut best: Option<(f64, Placement)> = None;
    for _ in 0..50 {
        let u: f64 = rng.gen();
        let side = spec.min_object_size
            + (spec.max_object_size - spec.min_object_size) * u.powf(spec.size_skew);
        let aspect: f64 = rng.gen_range(0.75..1.33);
        let w = (side * aspect.sqrt()).min(size);
        let h = (side / aspect.sqrt()).min(size);
        let cx = rng.gen_range(0.5 * w..=size - 0.5 * w);
        let cy = rng.gen_range(0.5 * h..=size - 0.5 * h);
        let candidate = BoundingBox::new(cx, cy, w, h);
        let overlap = placed
            .iter()
            .map(|b| iou(b, &candidate))
            .fold(0.0, f64::max);
        let p = Placement { class, cx, cy, w, h };
        if overlap <= 0.1 {
            return p;
        }
        if best.as_ref().map_or(true, |(o, _)| overlap < *o) {
            best = Some((overlap, p));
        }
    }
    best.expect("at least one attempt").1
}

/// Renders one object into `image`, returning the tight mask extent, or
/// `None` if the shape covers no pixel center.
fn render_object(image: &mut [f64], size: usize, p: &Placement, intensity: f64) -> Option<BoundingBox> {
    let x_lo = (p.cx - 0.5 * p.w).floor().max(0.0) as usize;
    let x_hi = ((p.cx + 0.5 * p.w).ceil() as usize).min(size);
    let y_lo = (p.cy - 0.5 * p.h).floor().max(0.0) as usize;
    let y_hi = ((p.cy + 0.5 * p.h).ceil() as usize).min(size);
    let mut extent: Option<(usize, usize, usize, usize)> = None;
    for py in y_lo..y_hi {
        for px in x_lo..x_hi {
            let u = (px as f64 + 0.5 - p.cx) / (0.5 * p.w);
            let v = (py as f64 + 0.5 - p.cy) / (0.5 * p.h);
            if shape_contains(p.class, u, v) {
                image[py * size + px] = intensity;
                extent = Some(match extent {
                    None => (px, py, px, py),
                    Some((a, b, c, d)) => (a.min(px), b.min(py), c.max(px), d.max(py)),
                });
            }
        }
    }
    extent.map(|(x0, y0, x1, y1)| {
        BoundingBox::from_corners(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64)
    })
}

fn background(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let base: f64 = rng.gen_range(0.1..0.3);
    let amp: f64 = rng.gen_range(0.02..0.08);
    let fx: f64 = rng.gen_range(0.05..0.3);
    let fy: f64 = rng.gen_range(0.05..0.3);
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut img = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            img[y * size + x] = base + amp * (fx * x as f64 + fy * y as f64 + phase).sin();
        }
    }
    img
}

fn jitter_box(b: &BoundingBox, sd: f64, size: f64, rng: &mut ChaCha8Rng) -> BoundingBox {
    let n = Normal::new(0.0, sd).expect("sd validated");
    let j = BoundingBox::new(
        b.x + n.sample(rng),
        b.y + n.sample(rng),
        (b.w + n.sample(rng)).max(1.0),
        (b.h + n.sample(rng)).max(1.0),
    );
    let c = j.clamped(size);
    if c.w >= 1.0 && c.h >= 1.0 {
        c
    } else {
        *b
    }
}

fn occlude(image: &mut [f64], size: usize, b: &BoundingBox, level: f64, rng: &mut ChaCha8Rng) {
    let (x0, y0, x1, y1) = b.corners();
    let frac: f64 = rng.gen_range(0.3..0.5);
    let (ox0, oy0, ox1, oy1) = match rng.gen_range(0..4) {
        0 => (x0, y0, x0 + frac * b.w, y1),
        1 => (x1 - frac * b.w, y0, x1, y1),
        2 => (x0, y0, x1, y0 + frac * b.h),
        _ => (x0, y1 - frac * b.h, x1, y1),
    };
    for py in (oy0.floor().max(0.0) as usize)..(oy1.ceil() as usize).min(size) {
        for px in (ox0.floor().max(0.0) as usize)..(ox1.ceil() as usize).min(size) {
            let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
            if cx >= ox0 && cx <= ox1 && cy >= oy0 && cy <= oy1 {
                image[py * size + px] = level;
            }
        }
    }
}

/// Generates scene `index` of the dataset described by `spec`.
pub fn generate_scene(spec: &DatasetSpec, index: usize) -> Result<Scene> {
    spec.validate()?;
    let classes = WeightedIndex::new(&spec.class_weights)
        .map_err(|e| MdalError::InvalidSpec(e.to_string()))?;
    Ok(render_scene(spec, &classes, index))
}

fn render_scene(spec: &DatasetSpec, classes: &WeightedIndex<f64>, index: usize) -> Scene {
    let size = spec.image_size;
    let mut rng = rng_for(spec.seed, &[TAG_SCENE, index as u64]);
    let mut image = background(&mut rng, size);
    let n_objects = rng.gen_range(spec.min_objects..=spec.max_objects);

    let mut placed: Vec<BoundingBox> = Vec::new();
    let mut objects = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let mut rendered = None;
        let mut class = 1;
        for _ in 0..20 {
            let p = sample_placement(spec, &mut rng, classes, &placed);
            let intensity: f64 = rng.gen_range(0.65..1.0);
            // Render into scratch first so an empty mask leaves no trace.
            let mut scratch = image.clone();
            if let Some(ext) = render_object(&mut scratch, size, &p, intensity) {
                image = scratch;
                rendered = Some(ext);
                class = p.class;
                break;
            }
        }
        let Some(rendered) = rendered else { continue };
        placed.push(rendered);

        let occluded = rng.gen_bool(spec.occlusion_prob);
        if occluded {
            let level = image[0];
            occlude(&mut image, size, &rendered, level, &mut rng);
        }
        let jittered = spec.box_jitter_sd > 0.0;
        let bbox = if jittered {
            jitter_box(&rendered, spec.box_jitter_sd, size as f64, &mut rng)
        } else {
            rendered
        };
        objects.push(SceneObject {
            class,
            bbox,
            rendered,
            jittered,
            occluded,
        });
    }

    if spec.pixel_noise_sd > 0.0 {
        let n = Normal::new(0.0, spec.pixel_noise_sd).expect("sd validated");
        for v in image.iter_mut() {
            *v += n.sample(&mut rng);
        }
    }
    for v in image.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Scene {
        id: index,
        size,
        image,
        objects,
    }
}

/// Generates the full dataset; scene `i` has id `i`.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<Scene>> {
    spec.validate()?;
    let classes = WeightedIndex::new(&spec.class_weights)
        .map_err(|e| MdalError::InvalidSpec(e.to_string()))?;
    Ok((0..spec.n_scenes)
        .map(|i| render_scene(spec, &classes, i))
        .collect())
}

/// Splits scene ids into a train pool and a test set.
///
/// Both parts are returned sorted by id.
pub fn split(ids: &[usize], fractions: (f64, f64), seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let (ftrain, ftest) = fractions;
    if ftrain < 0.0 || ftest < 0.0 || (ftrain + ftest - 1.0).abs() > 1e-9 {
        return Err(MdalError::Config(format!(
            "split fractions {ftrain} + {ftest} must sum to 1"
        )));
    }
    let n_train = (ids.len() as f64 * ftrain).round() as usize;
    let n_test = ids.len() - n_train;
    if n_train == 0 || n_test == 0 {
        return Err(MdalError::EmptyPartition {
            train: n_train,
            test: n_test,
        });
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut rng_for(seed, &[TAG_SPLIT]));
    let mut train = shuffled[..n_train].to_vec();
    let mut test = shuffled[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}
