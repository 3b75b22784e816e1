use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{LabelMap, Tensor};
use crate::seed::hash_unit;

pub const MAX_CLASSES: usize = 32;

const MIN_INTENSITY: f64 = 0.01;

fn default_texture() -> f64 {
    0.08
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    /// Axis-aligned rectangle with top-left corner `(x, y)`.
    Rect { x: f64, y: f64, w: f64, h: f64 },
    Disc { cx: f64, cy: f64, r: f64 },
}

impl Shape {
    /// Whether the point `(px, py)`, shifted back by `(dx, dy)`, is covered.
    fn contains(&self, px: f64, py: f64, dx: f64, dy: f64) -> bool {
        let (u, v) = (px - dx, py - dy);
        match *self {
            Shape::Rect { x, y, w, h } => u >= x && u < x + w && v >= y && v < y + h,
            Shape::Disc { cx, cy, r } => {
                let (a, b) = (u - cx, v - cy);
                a * a + b * b <= r * r
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class: u8,
    pub shape: Shape,
    /// Pixels per step along x.
    #[serde(default)]
    pub vx: f64,
    /// Pixels per step along y.
    #[serde(default)]
    pub vy: f64,
}

/// A synthetic scene: textured background plus objects drawn back-to-front.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub objects: Vec<SceneObject>,
    #[serde(default)]
    pub background: u8,
    #[serde(default)]
    pub seed: u64,
    /// Amplitude of the deterministic per-pixel texture noise.
    #[serde(default = "default_texture")]
    pub texture: f64,
    /// Global log-intensity change per step (illumination ramp).
    #[serde(default)]
    pub brightness_ramp: f64,
}

impl SceneSpec {
    pub fn empty(width: usize, height: usize, num_classes: usize, seed: u64) -> Self {
        Self {
            width,
            height,
            num_classes,
            objects: Vec::new(),
            background: 0,
            seed,
            texture: default_texture(),
            brightness_ramp: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > MAX_CLASSES {
            return Err(Error::InvalidSpec(format!(
                "num_classes must be in 1..={MAX_CLASSES}, got {}",
                self.num_classes
            )));
        }
        if self.width == 0 || self.height == 0 || self.width > 65535 || self.height > 65535 {
            return Err(Error::InvalidSpec(format!(
                "canvas {}x{} out of range",
                self.width, self.height
            )));
        }
        if self.background as usize >= self.num_classes {
            return Err(Error::InvalidSpec(format!(
                "background class {} not below K={}",
                self.background, self.num_classes
            )));
        }
        if let Some(o) = self
            .objects
            .iter()
            .find(|o| o.class as usize >= self.num_classes)
        {
            return Err(Error::InvalidSpec(format!(
                "object class {} not below K={}",
                o.class, self.num_classes
            )));
        }
        if !(self.texture >= 0.0) || !self.brightness_ramp.is_finite() {
            return Err(Error::InvalidSpec("texture/ramp must be finite".into()));
        }
        Ok(())
    }
}

/// Fixed grey level of a class, spread over `[0.1, 0.9)` by a golden-ratio
/// sequence starting mid-grey, so objects come out both darker and brighter
/// than a class-0 background.
pub fn class_shade(class: u8) -> f64 {
    let frac = (0.5 + f64::from(class) * 0.618_033_988_749_895).fract();
    0.1 + 0.8 * frac
}

/// Renders the scene at `step`: intensity image in `[0, 1]` (shape `H×W`) and
/// the topmost class per pixel.
pub fn render_scene(spec: &SceneSpec, step: u64) -> Result<(Tensor<f64>, LabelMap)> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let t = step as f64;
    let mut image = vec![0.0f64; w * h];
    let mut labels = vec![spec.background; w * h];
    let bg_shade = class_shade(spec.background);
    for y in 0..h {
        for x in 0..w {
            let noise = hash_unit(spec.seed, 0, x as i64, y as i64);
            image[y * w + x] = bg_shade + spec.texture * noise;
        }
    }
    for (i, obj) in spec.objects.iter().enumerate() {
        let (dx, dy) = (obj.vx * t, obj.vy * t);
        let shade = class_shade(obj.class);
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if obj.shape.contains(px, py, dx, dy) {
                    // Texture is attached to the object so it moves with it.
                    let (u, v) = ((px - dx).floor() as i64, (py - dy).floor() as i64);
                    let noise = hash_unit(spec.seed, i as i64 + 1, u, v);
                    image[y * w + x] = shade + spec.texture * noise;
                    labels[y * w + x] = obj.class;
                }
            }
        }
    }
    for v in &mut image {
        *v = v.clamp(MIN_INTENSITY, 1.0);
    }
    Ok((
        Tensor::from_vec(&[h, w], image)?,
        LabelMap::from_vec(h, w, labels)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(class: u8, x: f64, y: f64, w: f64, h: f64) -> SceneObject {
        SceneObject {
            class,
            shape: Shape::Rect { x, y, w, h },
            vx: 0.0,
            vy: 0.0,
        }
    }

    #[test]
    fn empty_scene_is_background() {
        let mut spec = SceneSpec::empty(8, 6, 3, 1);
        spec.background = 2;
        spec.texture = 0.0;
        let (img, labels) = render_scene(&spec, 5).unwrap();
        assert!(labels.data().iter().all(|&c| c == 2));
        assert!(img.data().iter().all(|&v| v == class_shade(2)));
    }

    #[test]
    fn rendering_is_deterministic() {
        let mut spec = SceneSpec::empty(16, 16, 4, 9);
        spec.objects.push(SceneObject {
            class: 1,
            shape: Shape::Disc {
                cx: 5.0,
                cy: 7.0,
                r: 3.0,
            },
            vx: 0.7,
            vy: -0.3,
        });
        let a = render_scene(&spec, 3).unwrap();
        let b = render_scene(&spec, 3).unwrap();
        assert_eq!(a.0.data(), b.0.data());
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn four_by_four_rect_covers_sixteen_pixels() {
        let mut spec = SceneSpec::empty(8, 8, 2, 0);
        spec.objects.push(rect(1, 2.0, 2.0, 4.0, 4.0));
        let (_, labels) = render_scene(&spec, 0).unwrap();
        // Independent rasterization check: pixels (2..6, 2..6).
        let mut expected = 0;
        for y in 0..8 {
            for x in 0..8 {
                let inside = (2..6).contains(&x) && (2..6).contains(&y);
                assert_eq!(labels.get(y, x) == 1, inside);
                expected += usize::from(inside);
            }
        }
        assert_eq!(expected, 16);
        assert_eq!(labels.histogram(2)[1], 16);
    }

    #[test]
    fn objects_leaving_canvas_are_clipped() {
        let mut spec = SceneSpec::empty(8, 8, 2, 0);
        let mut o = rect(1, 6.0, 0.0, 4.0, 2.0);
        o.vx = 1.0;
        spec.objects.push(o);
        let (_, labels) = render_scene(&spec, 1).unwrap();
        assert_eq!(labels.histogram(2)[1], 2);
        let (_, labels) = render_scene(&spec, 10).unwrap();
        assert_eq!(labels.histogram(2)[1], 0);
    }

    #[test]
    fn later_objects_draw_on_top() {
        let mut spec = SceneSpec::empty(8, 8, 3, 0);
        spec.objects.push(rect(1, 0.0, 0.0, 4.0, 4.0));
        spec.objects.push(rect(2, 2.0, 2.0, 4.0, 4.0));
        let (_, labels) = render_scene(&spec, 0).unwrap();
        assert_eq!(labels.get(3, 3), 2);
        assert_eq!(labels.get(0, 0), 1);
    }

    #[test]
    fn invalid_specs() {
        let spec = SceneSpec::empty(8, 8, 0, 0);
        assert!(matches!(render_scene(&spec, 0), Err(Error::InvalidSpec(_))));
        let mut spec = SceneSpec::empty(8, 8, 2, 0);
        spec.objects.push(rect(5, 0.0, 0.0, 1.0, 1.0));
        assert!(matches!(spec.validate(), Err(Error::InvalidSpec(_))));
        let mut spec = SceneSpec::empty(8, 8, 33, 0);
        spec.background = 0;
        assert!(spec.validate().is_err());
    }
}
