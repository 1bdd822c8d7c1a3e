//! Procedural scenes of a few colored shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{AnchorError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Ellipse, ShapeKind::Rectangle, ShapeKind::Triangle];

    /// Segmentation label; 0 is background.
    pub fn class_index(self) -> usize {
        match self {
            ShapeKind::Ellipse => 1,
            ShapeKind::Rectangle => 2,
            ShapeKind::Triangle => 3,
        }
    }

    /// Base hue of the kind's palette, in turns.
    fn hue(self) -> f64 {
        match self {
            ShapeKind::Ellipse => 0.02,
            ShapeKind::Rectangle => 0.33,
            ShapeKind::Triangle => 0.61,
        }
    }
}

/// Number of segmentation classes including background.
pub const SEGMENTATION_CLASSES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    /// `(y, x)` in normalized canvas coordinates.
    pub center: [f64; 2],
    /// Normalized size: semi-major axis, half-width, or circumradius.
    pub scale: f64,
    pub rotation: f64,
    /// RGB in `[0, 1]`.
    pub color: [f64; 3],
}

impl Shape {
    /// Whether the normalized point `(y, x)` lies inside the shape.
    pub fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.center[0], x - self.center[1]);
        let (s, c) = self.rotation.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        let r = self.scale;
        match self.kind {
            ShapeKind::Ellipse => (u / r).powi(2) + (v / (0.6 * r)).powi(2) <= 1.0,
            ShapeKind::Rectangle => u.abs() <= r && v.abs() <= 0.7 * r,
            ShapeKind::Triangle => {
                // Equilateral: inradius is half the circumradius.
                [-90.0f64, 30.0, 150.0].iter().all(|deg| {
                    let (ns, nc) = deg.to_radians().sin_cos();
                    u * nc + v * ns <= 0.5 * r
                })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    /// `(height, width)` in pixels.
    pub canvas: (usize, usize),
    pub shapes: Vec<Shape>,
}

impl SceneSpec {
    /// Index of the last shape (painter's order) covering a normalized point.
    pub fn top_shape(&self, y: f64, x: f64) -> Option<usize> {
        self.shapes.iter().rposition(|s| s.contains(y, x))
    }
}

/// Generation parameters for [`generate_scene`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub canvas: (usize, usize),
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub scale_range: (f64, f64),
    /// Centers are drawn from `[margin, 1 - margin]` on both axes.
    pub center_margin: f64,
    /// Mixed into every scene seed; part of the dataset identity.
    pub world_seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            canvas: (64, 64),
            min_shapes: 1,
            max_shapes: 4,
            scale_range: (0.12, 0.3),
            center_margin: 0.15,
            world_seed: 0,
        }
    }
}

pub const MAX_SHAPES: usize = 4;
pub const SCALE_BOUNDS: (f64, f64) = (0.05, 0.4);

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AnchorError::Config(m));
        if self.canvas.0 == 0 || self.canvas.1 == 0 {
            return bad(format!("canvas must be positive, got {:?}", self.canvas));
        }
        if self.min_shapes < 1 || self.max_shapes < self.min_shapes || self.max_shapes > MAX_SHAPES {
            return bad(format!(
                "shape count bounds must satisfy 1 <= min <= max <= {MAX_SHAPES}, got [{}, {}]",
                self.min_shapes, self.max_shapes
            ));
        }
        let (lo, hi) = self.scale_range;
        if !(SCALE_BOUNDS.0..=SCALE_BOUNDS.1).contains(&lo) || !(lo..=SCALE_BOUNDS.1).contains(&hi) {
            return bad(format!(
                "scale range {:?} must lie within {SCALE_BOUNDS:?}",
                self.scale_range
            ));
        }
        if !(0.0..0.5).contains(&self.center_margin) {
            return bad(format!(
                "center margin {} must be in [0, 0.5)",
                self.center_margin
            ));
        }
        Ok(())
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Deterministic RNG for one scene.
pub(crate) fn scene_rng(seed: u64, world_seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed) ^ splitmix(world_seed.wrapping_add(0x5eed)))
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Samples a scene; a pure function of `(seed, config)`.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<SceneSpec> {
    config.validate()?;
    let mut rng = scene_rng(seed, config.world_seed);
    let count = rng.random_range(config.min_shapes..=config.max_shapes);
    let (m, (slo, shi)) = (config.center_margin, config.scale_range);
    let shapes = (0..count)
        .map(|_| {
            let kind = ShapeKind::ALL[rng.random_range(0..3)];
            let center = [rng.random_range(m..=1.0 - m), rng.random_range(m..=1.0 - m)];
            let scale = if shi > slo {
                rng.random_range(slo..shi)
            } else {
                slo
            };
            let rotation = rng.random_range(0.0..std::f64::consts::TAU);
            // Each kind keeps a characteristic hue, like semantic parts of a face.
            let hue = kind.hue() + rng.random_range(-0.06..0.06);
            let color = hsv_to_rgb(hue, rng.random_range(0.55..0.95), rng.random_range(0.65..1.0));
            Shape {
                kind,
                center,
                scale,
                rotation,
                color,
            }
        })
        .collect();
    Ok(SceneSpec {
        seed,
        canvas: config.canvas,
        shapes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene_bytes() {
        let cfg = SceneConfig::default();
        let a = serde_json::to_vec(&generate_scene(7, &cfg).unwrap()).unwrap();
        let b = serde_json::to_vec(&generate_scene(7, &cfg).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn neighbouring_seeds_differ() {
        let cfg = SceneConfig::default();
        for s in 0..100u64 {
            assert_ne!(
                generate_scene(s, &cfg).unwrap().shapes,
                generate_scene(s + 1, &cfg).unwrap().shapes
            );
        }
    }

    #[test]
    fn zero_max_shapes_is_config_error() {
        let cfg = SceneConfig {
            max_shapes: 0,
            ..SceneConfig::default()
        };
        assert!(matches!(generate_scene(7, &cfg), Err(AnchorError::Config(_))));
        let cfg = SceneConfig {
            canvas: (0, 32),
            ..SceneConfig::default()
        };
        assert!(matches!(generate_scene(7, &cfg), Err(AnchorError::Config(_))));
    }

    #[test]
    fn scenes_respect_bounds() {
        let cfg = SceneConfig::default();
        for s in 0..300 {
            let sc = generate_scene(s, &cfg).unwrap();
            assert!((1..=4).contains(&sc.shapes.len()));
            for sh in &sc.shapes {
                assert!(sh.center.iter().all(|c| (0.0..=1.0).contains(c)));
                assert!((SCALE_BOUNDS.0..=SCALE_BOUNDS.1).contains(&sh.scale));
                assert!(sh.color.iter().all(|c| (0.0..=1.0).contains(c)));
            }
        }
    }

    #[test]
    fn shape_contains_its_center_but_not_far_points() {
        for kind in ShapeKind::ALL {
            let s = Shape {
                kind,
                center: [0.5, 0.5],
                scale: 0.2,
                rotation: 0.7,
                color: [1.0; 3],
            };
            assert!(s.contains(0.5, 0.5), "{kind:?}");
            assert!(!s.contains(0.95, 0.95), "{kind:?}");
        }
    }
}
