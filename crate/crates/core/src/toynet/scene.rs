use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::boxes::{BBox, GtBox, Occlusion};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lighting {
    Day,
    Night,
}

impl Lighting {
    pub fn name(self) -> &'static str {
        match self {
            Lighting::Day => "day",
            Lighting::Night => "night",
        }
    }
}

/// Parameters of the synthetic pedestrian benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub width: usize,
    pub height: usize,
    pub image_channels: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_height: f64,
    pub max_height: f64,
    /// Box width as a fraction of its height.
    pub aspect: f64,
    /// Chance that an object is placed overlapping an earlier one.
    pub occlusion_prob: f64,
    pub night_fraction: f64,
    pub noise: f64,
    /// Object contrast `[rgb, tir]` in day scenes.
    pub day_contrast: [f64; 2],
    pub night_contrast: [f64; 2],
    /// Per-object contrast multiplier range `[low, high)`.
    pub object_gain: [f64; 2],
    /// Non-pedestrian blobs per scene, each visible in one modality only.
    pub clutter: usize,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            width: 96,
            height: 96,
            image_channels: 1,
            min_objects: 1,
            max_objects: 3,
            min_height: 24.0,
            max_height: 88.0,
            aspect: 0.4,
            occlusion_prob: 0.25,
            night_fraction: 0.5,
            noise: 0.2,
            day_contrast: [1.0, 0.7],
            night_contrast: [0.2, 1.0],
            object_gain: [0.8, 1.2],
            clutter: 2,
            train_scenes: 200,
            test_scenes: 100,
            seed: 7,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::BadSpec(m.to_string()));
        if self.width == 0 || self.height == 0 || self.image_channels == 0 {
            return bad("image extents must be positive");
        }
        if self.min_objects > self.max_objects {
            return bad("min_objects exceeds max_objects");
        }
        if !(self.min_height >= 2.0 && self.min_height <= self.max_height) {
            return bad("object heights must satisfy 2 ≤ min_height ≤ max_height");
        }
        if self.max_height > self.height as f64 || self.max_height * self.aspect > self.width as f64
        {
            return bad("objects do not fit in the image");
        }
        if !(self.aspect > 0.0 && self.aspect.is_finite()) {
            return bad("aspect must be positive");
        }
        for (name, p) in [
            ("occlusion_prob", self.occlusion_prob),
            ("night_fraction", self.night_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        let contrasts = self.day_contrast.iter().chain(&self.night_contrast);
        if !(self.noise >= 0.0 && self.noise.is_finite())
            || contrasts.clone().any(|c| !c.is_finite())
        {
            return bad("noise and contrasts must be finite, noise ≥ 0");
        }
        let [lo, hi] = self.object_gain;
        if !(lo >= 0.0 && lo < hi && hi.is_finite()) {
            return bad("object_gain must satisfy 0 ≤ low < high");
        }
        Ok(())
    }

    pub fn contrast(&self, lighting: Lighting) -> [f64; 2] {
        match lighting {
            Lighting::Day => self.day_contrast,
            Lighting::Night => self.night_contrast,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub rgb: Tensor,
    pub tir: Tensor,
    pub annotations: Vec<GtBox>,
    pub lighting: Lighting,
    pub seed: u64,
}

impl Scene {
    pub fn boxes(&self) -> Vec<BBox> {
        self.annotations.iter().map(|a| a.bbox).collect()
    }

    pub fn extent(&self) -> (usize, usize) {
        let s = self.rgb.shape();
        (s[1], s[2])
    }
}

/// SplitMix64 finalizer over `(base, stream, index)`; decorrelates sibling seeds.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fraction of each box covered by boxes drawn after it. Objects are drawn
/// back to front by bottom edge (`y2`), later index first among equals.
pub fn occlusion_fractions(boxes: &[BBox]) -> Vec<f64> {
    let order = draw_order(boxes);
    let mut rank = vec![0; boxes.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    boxes
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let front: Vec<&BBox> = boxes
                .iter()
                .enumerate()
                .filter(|&(j, _)| rank[j] > rank[i])
                .map(|(_, f)| f)
                .collect();
            covered_fraction(b, &front)
        })
        .collect()
}

fn draw_order(boxes: &[BBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[a].y2.total_cmp(&boxes[b].y2).then(a.cmp(&b)));
    order
}

/// Covered area of `b` by the union of `front`, computed exactly on the grid
/// of all box edges.
fn covered_fraction(b: &BBox, front: &[&BBox]) -> f64 {
    let clipped: Vec<BBox> = front
        .iter()
        .filter_map(|f| {
            BBox::new(
                f.x1.max(b.x1),
                f.y1.max(b.y1),
                f.x2.min(b.x2),
                f.y2.min(b.y2),
            )
        })
        .collect();
    if clipped.is_empty() {
        return 0.0;
    }
    let mut xs: Vec<f64> = clipped.iter().flat_map(|c| [c.x1, c.x2]).collect();
    let mut ys: Vec<f64> = clipped.iter().flat_map(|c| [c.y1, c.y2]).collect();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    xs.dedup();
    ys.dedup();
    let mut area = 0.0;
    for xw in xs.windows(2) {
        for yw in ys.windows(2) {
            let (mx, my) = (0.5 * (xw[0] + xw[1]), 0.5 * (yw[0] + yw[1]));
            if clipped
                .iter()
                .any(|c| c.x1 <= mx && mx <= c.x2 && c.y1 <= my && my <= c.y2)
            {
                area += (xw[1] - xw[0]) * (yw[1] - yw[0]);
            }
        }
    }
    area / b.area()
}

fn place_box(spec: &DatasetSpec, rng: &mut ChaCha8Rng, placed: &[BBox]) -> BBox {
    let h = rng.random_range(spec.min_height..=spec.max_height).round();
    let w = (spec.aspect * h).round().max(2.0);
    let (iw, ih) = (spec.width as f64, spec.height as f64);
    let (x1, y1) = if !placed.is_empty() && rng.random::<f64>() < spec.occlusion_prob {
        let other = placed[rng.random_range(0..placed.len())];
        let shift = rng.random_range(0.2..0.9) * w;
        let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let x = other.x1 + side * shift;
        let y = other.y2 - h + rng.random_range(-0.2..0.2) * h;
        (x, y)
    } else {
        (
            rng.random_range(0.0..=iw - w),
            rng.random_range(0.0..=ih - h),
        )
    };
    let x1 = x1.round().clamp(0.0, iw - w);
    let y1 = y1.round().clamp(0.0, ih - h);
    BBox::new(x1, y1, x1 + w, y1 + h).expect("positive extents")
}

/// Soft elliptical body: 1 at the centre, fading to 0 at the box outline.
fn body_alpha(b: &BBox, px: f64, py: f64) -> f64 {
    let (cx, cy) = b.center();
    let dx = (px - cx) / (0.5 * b.width());
    let dy = (py - cy) / (0.5 * b.height());
    ((1.0 - dx * dx - dy * dy) * 3.0).clamp(0.0, 1.0)
}

fn paint(img: &mut [f64], (h, w): (usize, usize), b: &BBox, value: f64) {
    let (x0, x1) = (
        b.x1.floor().max(0.0) as usize,
        (b.x2.ceil() as usize).min(w),
    );
    let (y0, y1) = (
        b.y1.floor().max(0.0) as usize,
        (b.y2.ceil() as usize).min(h),
    );
    for y in y0..y1 {
        for x in x0..x1 {
            let a = body_alpha(b, x as f64 + 0.5, y as f64 + 0.5);
            let p = &mut img[y * w + x];
            *p = *p * (1.0 - a) + value * a;
        }
    }
}

/// Renders one deterministic scene.
pub fn generate_scene(spec: &DatasetSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lighting = if rng.random::<f64>() < spec.night_fraction {
        Lighting::Night
    } else {
        Lighting::Day
    };
    let count = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut boxes: Vec<BBox> = Vec::with_capacity(count);
    for _ in 0..count {
        let b = place_box(spec, &mut rng, &boxes);
        boxes.push(b);
    }
    let gains: Vec<f64> = (0..count).map(|_| rng.random_range(spec.object_gain[0]..spec.object_gain[1])).collect();
    let clutter: Vec<(BBox, usize, f64)> = (0..spec.clutter)
        .map(|_| {
            let side = rng.random_range(0.25..0.6) * spec.min_height;
            let x = rng.random_range(0.0..=spec.width as f64 - side);
            let y = rng.random_range(0.0..=spec.height as f64 - side);
            let b = BBox::new(x, y, x + side, y + side).expect("positive extents");
            (b, rng.random_range(0..2usize), rng.random_range(0.5..1.0))
        })
        .collect();

    let (h, w) = (spec.height, spec.width);
    let c = spec.image_channels;
    let channel_gain: Vec<[f64; 2]> = (0..c)
        .map(|k| {
            if k == 0 {
                [1.0, 1.0]
            } else {
                [rng.random_range(0.5..1.0), rng.random_range(0.5..1.0)]
            }
        })
        .collect();
    let contrast = spec.contrast(lighting);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::BadSpec(e.to_string()))?;
    let mut images = [vec![0.0; c * h * w], vec![0.0; c * h * w]];
    for (m, img) in images.iter_mut().enumerate() {
        for k in 0..c {
            let plane = &mut img[k * h * w..(k + 1) * h * w];
            let base = contrast[m] * channel_gain[k][m];
            for (b, modality, strength) in &clutter {
                if *modality == m {
                    paint(plane, (h, w), b, strength * channel_gain[k][m]);
                }
            }
            for &i in &draw_order(&boxes) {
                paint(plane, (h, w), &boxes[i], base * gains[i]);
            }
        }
        for v in img.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }

    let fractions = occlusion_fractions(&boxes);
    let annotations = boxes
        .iter()
        .zip(fractions)
        .map(|(&b, f)| GtBox::pedestrian(b, Occlusion::from_fraction(f)))
        .collect();
    let [rgb, tir] = images;
    Ok(Scene {
        rgb: Tensor::new(&[c, h, w], rgb)?,
        tir: Tensor::new(&[c, h, w], tir)?,
        annotations,
        lighting,
        seed,
    })
}

/// `count` scenes with seeds derived from `(spec.seed, stream, index)`.
pub fn generate_split(spec: &DatasetSpec, stream: u64, count: usize) -> Result<Vec<Scene>> {
    (0..count)
        .map(|i| generate_scene(spec, derive_seed(spec.seed, stream, i as u64)))
        .collect()
}

pub const TRAIN_STREAM: u64 = 1;
pub const TEST_STREAM: u64 = 2;
