use std::fmt;
use std::str::FromStr;

use anchor_nn::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::{AnchorError, Result};

/// How a domain's pixels are valued.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainKind {
    /// `channels` planes with values in `[-1, 1]`.
    Continuous { channels: usize },
    /// One plane of class indices in `[0, classes)`.
    Categorical { classes: usize },
}

impl DomainKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DomainKind::Continuous { channels } if channels >= 1 => Ok(()),
            DomainKind::Categorical { classes } if classes >= 2 => Ok(()),
            other => Err(AnchorError::Config(format!("invalid domain kind {other}"))),
        }
    }

    /// Channels seen by an encoder (categorical maps are one-hot) and
    /// produced by a regressor (categorical maps are logits).
    pub fn network_channels(&self) -> usize {
        match *self {
            DomainKind::Continuous { channels } => channels,
            DomainKind::Categorical { classes } => classes,
        }
    }

    /// Planes stored in a [`DomainImage`].
    pub fn stored_channels(&self) -> usize {
        match *self {
            DomainKind::Continuous { channels } => channels,
            DomainKind::Categorical { .. } => 1,
        }
    }

    pub fn is_categorical(&self) -> bool {
        matches!(self, DomainKind::Categorical { .. })
    }
}

impl fmt::Display for DomainKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DomainKind::Continuous { channels } => write!(f, "continuous:{channels}"),
            DomainKind::Categorical { classes } => write!(f, "categorical:{classes}"),
        }
    }
}

impl FromStr for DomainKind {
    type Err = AnchorError;

    /// Parses `continuous:<channels>` or `categorical:<classes>`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, count) = s.split_once(':').ok_or_else(|| {
            AnchorError::Config(format!("domain kind `{s}` must look like `categorical:4`"))
        })?;
        let n: usize = count
            .trim()
            .parse()
            .map_err(|_| AnchorError::Config(format!("bad count in domain kind `{s}`")))?;
        let kind = match name.trim() {
            "continuous" => DomainKind::Continuous { channels: n },
            "categorical" => DomainKind::Categorical { classes: n },
            other => return Err(AnchorError::Config(format!("unknown value model `{other}`"))),
        };
        kind.validate()?;
        Ok(kind)
    }
}

/// One image of a visual domain, stored `(channels, height, width)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainImage<T> {
    pub domain_id: String,
    pub pixels: Tensor<T>,
    pub kind: DomainKind,
}

impl<T: Scalar> DomainImage<T> {
    /// Validates shape and value range before wrapping.
    pub fn new(domain_id: impl Into<String>, pixels: Tensor<T>, kind: DomainKind) -> Result<Self> {
        let img = Self {
            domain_id: domain_id.into(),
            pixels,
            kind,
        };
        img.check()?;
        Ok(img)
    }

    pub fn check(&self) -> Result<()> {
        let s = self.pixels.shape();
        if s.len() != 3 || s[0] != self.kind.stored_channels() {
            return Err(AnchorError::Spec(format!(
                "image of kind {} must be ({}, h, w), got {s:?}",
                self.kind,
                self.kind.stored_channels()
            )));
        }
        match self.kind {
            DomainKind::Continuous { .. } => {
                if let Some(v) = self.pixels.data().iter().find(|v| !(v.abs() <= T::one())) {
                    return Err(AnchorError::Data(format!("continuous value {v} outside [-1, 1]")));
                }
            }
            DomainKind::Categorical { classes } => {
                for &v in self.pixels.data() {
                    let ok = v >= T::zero() && v.fract() == T::zero() && v.as_f64() < classes as f64;
                    if !ok {
                        return Err(AnchorError::Data(format!(
                            "class index {v} outside [0, {classes})"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.pixels.dim(1)
    }

    pub fn width(&self) -> usize {
        self.pixels.dim(2)
    }

    /// Class indices of a categorical map in row-major order.
    pub fn class_indices(&self) -> Vec<usize> {
        self.pixels.data().iter().map(|v| v.as_f64() as usize).collect()
    }

    /// Network-facing planes: one-hot for categorical maps, the pixels otherwise.
    pub fn network_input(&self) -> Tensor<T> {
        match self.kind {
            DomainKind::Continuous { .. } => self.pixels.clone(),
            DomainKind::Categorical { classes } => {
                let (h, w) = (self.height(), self.width());
                let mut out = Tensor::zeros(&[classes, h, w]);
                for (i, c) in self.class_indices().into_iter().enumerate() {
                    out.data_mut()[c * h * w + i] = T::one();
                }
                out
            }
        }
    }
}
