//! Rasterizes a [`SceneSpec`] into each visual domain.
//!
//! Every domain is derived from the same scene, so renders of one seed are
//! pixel-aligned across domains.

use std::fmt;
use std::str::FromStr;

use anchor_nn::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use super::image::{DomainImage, DomainKind};
use super::scene::{SceneSpec, SEGMENTATION_CLASSES};
use crate::{AnchorError, Result};

/// Supersampling factor per axis for anti-aliased domains.
const SUPERSAMPLE: usize = 4;

pub const BACKGROUND: [f64; 3] = [0.1, 0.1, 0.12];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderKind {
    Rgb,
    Segmentation,
    Edge,
    Keypoint,
    /// Two-class foreground mask, a coarse segmentation.
    Silhouette,
}

impl RenderKind {
    pub const ALL: [RenderKind; 5] = [
        RenderKind::Rgb,
        RenderKind::Segmentation,
        RenderKind::Edge,
        RenderKind::Keypoint,
        RenderKind::Silhouette,
    ];

    pub fn domain_kind(self) -> DomainKind {
        match self {
            RenderKind::Rgb => DomainKind::Continuous { channels: 3 },
            RenderKind::Segmentation => DomainKind::Categorical {
                classes: SEGMENTATION_CLASSES,
            },
            RenderKind::Edge | RenderKind::Keypoint => DomainKind::Continuous { channels: 1 },
            RenderKind::Silhouette => DomainKind::Categorical { classes: 2 },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RenderKind::Rgb => "rgb",
            RenderKind::Segmentation => "segmentation",
            RenderKind::Edge => "edge",
            RenderKind::Keypoint => "keypoint",
            RenderKind::Silhouette => "silhouette",
        }
    }
}

impl fmt::Display for RenderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RenderKind {
    type Err = AnchorError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(RenderKind::Rgb),
            "segmentation" | "seg" => Ok(RenderKind::Segmentation),
            "edge" => Ok(RenderKind::Edge),
            "keypoint" => Ok(RenderKind::Keypoint),
            "silhouette" => Ok(RenderKind::Silhouette),
            other => Err(AnchorError::Domain(format!("unsupported domain kind `{other}`"))),
        }
    }
}

/// Top-shape label (0 = background, `i + 1` = shape `i`) on a supersampled grid.
fn label_grid(scene: &SceneSpec, factor: usize) -> (Vec<usize>, usize, usize) {
    let (h, w) = (scene.canvas.0 * factor, scene.canvas.1 * factor);
    let mut labels = vec![0; h * w];
    for y in 0..h {
        let ny = (y as f64 + 0.5) / h as f64;
        for x in 0..w {
            let nx = (x as f64 + 0.5) / w as f64;
            labels[y * w + x] = scene.top_shape(ny, nx).map_or(0, |i| i + 1);
        }
    }
    (labels, h, w)
}

fn to_image<T: Scalar>(
    domain_id: &str,
    kind: DomainKind,
    shape: [usize; 3],
    values: Vec<f64>,
) -> DomainImage<T> {
    let pixels = Tensor::new(&shape, values.into_iter().map(T::lit).collect());
    DomainImage {
        domain_id: domain_id.to_string(),
        pixels,
        kind,
    }
}

/// Renders `scene` into domain `kind`, tagging the result with `domain_id`.
pub fn render_domain<T: Scalar>(scene: &SceneSpec, kind: RenderKind, domain_id: &str) -> DomainImage<T> {
    let (h, w) = scene.canvas;
    let dk = kind.domain_kind();
    match kind {
        RenderKind::Rgb => {
            let (labels, _, sw) = label_grid(scene, SUPERSAMPLE);
            let per_pixel = (SUPERSAMPLE * SUPERSAMPLE) as f64;
            let mut out = vec![0.0; 3 * h * w];
            let mut counts = vec![0usize; scene.shapes.len() + 1];
            for y in 0..h {
                for x in 0..w {
                    counts.iter_mut().for_each(|c| *c = 0);
                    for sy in 0..SUPERSAMPLE {
                        for sx in 0..SUPERSAMPLE {
                            counts[labels[(y * SUPERSAMPLE + sy) * sw + x * SUPERSAMPLE + sx]] += 1;
                        }
                    }
                    for ch in 0..3 {
                        // Skipping empty layers keeps fully covered pixels exactly
                        // equal to their shape's color.
                        let mut acc = 0.0;
                        for (layer, &n) in counts.iter().enumerate() {
                            if n == 0 {
                                continue;
                            }
                            let color = if layer == 0 {
                                BACKGROUND[ch]
                            } else {
                                scene.shapes[layer - 1].color[ch]
                            };
                            acc += (n as f64 / per_pixel) * color;
                        }
                        out[(ch * h + y) * w + x] = 2.0 * acc - 1.0;
                    }
                }
            }
            to_image(domain_id, dk, [3, h, w], out)
        }
        RenderKind::Segmentation => {
            let (labels, _, _) = label_grid(scene, 1);
            let classes = labels.iter().map(|&l| {
                if l == 0 {
                    0.0
                } else {
                    scene.shapes[l - 1].kind.class_index() as f64
                }
            });
            to_image(domain_id, dk, [1, h, w], classes.collect())
        }
        RenderKind::Silhouette => {
            let (labels, _, _) = label_grid(scene, 1);
            to_image(
                domain_id,
                dk,
                [1, h, w],
                labels.iter().map(|&l| (l != 0) as u8 as f64).collect(),
            )
        }
        RenderKind::Edge => {
            let (labels, sh, sw) = label_grid(scene, SUPERSAMPLE);
            let is_edge = |y: usize, x: usize| {
                let l = labels[y * sw + x];
                (y > 0 && labels[(y - 1) * sw + x] != l)
                    || (y + 1 < sh && labels[(y + 1) * sw + x] != l)
                    || (x > 0 && labels[y * sw + x - 1] != l)
                    || (x + 1 < sw && labels[y * sw + x + 1] != l)
            };
            let per_pixel = (SUPERSAMPLE * SUPERSAMPLE) as f64;
            let mut out = vec![0.0; h * w];
            for y in 0..h {
                for x in 0..w {
                    let mut n = 0;
                    for sy in 0..SUPERSAMPLE {
                        for sx in 0..SUPERSAMPLE {
                            n += is_edge(y * SUPERSAMPLE + sy, x * SUPERSAMPLE + sx) as usize;
                        }
                    }
                    let strength = (2.0 * n as f64 / per_pixel).min(1.0);
                    out[y * w + x] = 2.0 * strength - 1.0;
                }
            }
            to_image(domain_id, dk, [1, h, w], out)
        }
        RenderKind::Keypoint => {
            let sigma = 0.035 * h.min(w) as f64;
            let mut out = vec![0.0f64; h * w];
            for y in 0..h {
                for x in 0..w {
                    let v = scene
                        .shapes
                        .iter()
                        .map(|s| {
                            let dy = y as f64 + 0.5 - s.center[0] * h as f64;
                            let dx = x as f64 + 0.5 - s.center[1] * w as f64;
                            (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp()
                        })
                        .fold(0.0, f64::max);
                    out[y * w + x] = 2.0 * v - 1.0;
                }
            }
            to_image(domain_id, dk, [1, h, w], out)
        }
    }
}
