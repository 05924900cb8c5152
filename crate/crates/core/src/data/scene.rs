//! Synthetic RGB-thermal scenes with classes that only thermal can separate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// Values are quantized to 8 bits so that a scene survives a PNG round trip unchanged.
pub fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dim("label map", &[height, width], &[data.len()]));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub rgb: Tensor<f32>,
    pub thermal: Tensor<f32>,
    pub labels: LabelMap,
}

impl SamplePair {
    pub fn new(rgb: Tensor<f32>, thermal: Tensor<f32>, labels: LabelMap) -> Result<Self> {
        let want = [3, labels.height, labels.width];
        rgb.expect_shape("sample rgb", &want)?;
        thermal.expect_shape("sample thermal", &want)?;
        Ok(Self {
            rgb,
            thermal,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.labels.height
    }

    pub fn width(&self) -> usize {
        self.labels.width
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassAppearance {
    pub rgb: [f64; 3],
    pub thermal: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Shape extent as a fraction of the canvas side.
    pub min_extent: f64,
    pub max_extent: f64,
    /// Index 0 is the background.
    pub classes: Vec<ClassAppearance>,
    pub ambiguous_pairs: Vec<(u8, u8)>,
    pub rgb_noise: f64,
    pub thermal_noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        let c = |rgb: [f64; 3], thermal: f64| ClassAppearance { rgb, thermal };
        Self {
            num_classes: 6,
            height: 64,
            width: 64,
            min_shapes: 3,
            max_shapes: 6,
            min_extent: 0.15,
            max_extent: 0.45,
            classes: vec![
                c([0.40, 0.40, 0.40], 0.45),
                c([0.80, 0.25, 0.20], 0.15),
                c([0.80, 0.25, 0.20], 0.85),
                c([0.20, 0.65, 0.30], 0.25),
                c([0.20, 0.65, 0.30], 0.75),
                c([0.20, 0.30, 0.85], 0.55),
            ],
            ambiguous_pairs: vec![(1, 2), (3, 4)],
            rgb_noise: 0.04,
            thermal_noise: 0.04,
        }
    }
}

pub const MIN_THERMAL_GAP: f64 = 0.3;

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.height == 0
            || self.width == 0
            || !self.height.is_multiple_of(32)
            || !self.width.is_multiple_of(32)
        {
            return bad(format!(
                "canvas {}x{} must be a positive multiple of 32",
                self.height, self.width
            ));
        }
        if self.num_classes < 2 || self.num_classes > 255 || self.classes.len() != self.num_classes
        {
            return bad(format!(
                "need 2..=255 classes with one appearance each (got K={}, {} appearances)",
                self.num_classes,
                self.classes.len()
            ));
        }
        if self.min_shapes > self.max_shapes {
            return bad("min_shapes exceeds max_shapes".into());
        }
        if !(0.0 < self.min_extent && self.min_extent <= self.max_extent && self.max_extent <= 1.0)
        {
            return bad("shape extents must satisfy 0 < min <= max <= 1".into());
        }
        if self.rgb_noise < 0.0 || self.thermal_noise < 0.0 {
            return bad("noise must be non-negative".into());
        }
        for &(a, b) in &self.ambiguous_pairs {
            let (a, b) = (a as usize, b as usize);
            if a >= self.num_classes || b >= self.num_classes || a == b {
                return bad(format!(
                    "ambiguous pair ({a}, {b}) is not two distinct classes"
                ));
            }
            let (ca, cb) = (&self.classes[a], &self.classes[b]);
            if ca.rgb.map(f64::to_bits) != cb.rgb.map(f64::to_bits) {
                return bad(format!(
                    "ambiguous pair ({a}, {b}) must share an identical rgb color"
                ));
            }
            if (ca.thermal - cb.thermal).abs() < MIN_THERMAL_GAP {
                return bad(format!(
                    "ambiguous pair ({a}, {b}) thermal gap below {MIN_THERMAL_GAP}"
                ));
            }
        }
        Ok(())
    }
}

/// Random rectangles and ellipses over the background; later shapes occlude earlier ones.
pub fn generate_scene(spec: &SceneSpec, rng: &mut Rng) -> Result<SamplePair> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut labels = vec![0u8; h * w];
    let shapes = rng.int_inclusive(spec.min_shapes, spec.max_shapes);
    for _ in 0..shapes {
        let class = rng.int_inclusive(1, spec.num_classes - 1) as u8;
        let kind = if rng.bernoulli(0.5) {
            ShapeKind::Rectangle
        } else {
            ShapeKind::Ellipse
        };
        let sh = rng.uniform_range(spec.min_extent, spec.max_extent) * h as f64;
        let sw = rng.uniform_range(spec.min_extent, spec.max_extent) * w as f64;
        let cy = rng.uniform_range(0.0, h as f64);
        let cx = rng.uniform_range(0.0, w as f64);
        for y in 0..h {
            for x in 0..w {
                let dy = (y as f64 + 0.5 - cy) / (sh / 2.0);
                let dx = (x as f64 + 0.5 - cx) / (sw / 2.0);
                let inside = match kind {
                    ShapeKind::Rectangle => dy.abs() <= 1.0 && dx.abs() <= 1.0,
                    ShapeKind::Ellipse => dy * dy + dx * dx <= 1.0,
                };
                if inside {
                    labels[y * w + x] = class;
                }
            }
        }
    }
    let hw = h * w;
    let mut rgb = vec![0.0f32; 3 * hw];
    let mut thermal = vec![0.0f32; 3 * hw];
    for (p, &l) in labels.iter().enumerate() {
        let app = &spec.classes[l as usize];
        for ch in 0..3 {
            rgb[ch * hw + p] = quantize(app.rgb[ch] + spec.rgb_noise * rng.normal());
        }
        // single-channel source, replicated
        let t = quantize(app.thermal + spec.thermal_noise * rng.normal());
        for ch in 0..3 {
            thermal[ch * hw + p] = t;
        }
    }
    SamplePair::new(
        Tensor::from_vec(&[3, h, w], rgb)?,
        Tensor::from_vec(&[3, h, w], thermal)?,
        LabelMap::new(h, w, labels)?,
    )
}

/// `count` scenes, scene `i` drawn from `rng.split(i)`.
pub fn generate_scenes(spec: &SceneSpec, rng: &Rng, count: usize) -> Result<Vec<SamplePair>> {
    (0..count)
        .map(|i| generate_scene(spec, &mut rng.split(i as u64)))
        .collect()
}
