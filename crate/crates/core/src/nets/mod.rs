//! Small trainable networks: a shared encoder with a segmentation decoder, and
//! a domain decoder that maps encoder features onto the unit sphere.
//!
//! Gradients are hand-written reverse passes over a fixed layer set. Every
//! model keeps its parameters in one flat `f64` vector.

mod domain;
pub mod layers;
mod optim;
mod seg;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transform::Image;

pub use domain::{domain_embed_and_loss, group_by_domain, DomainArch, DomainClassifier, DomainOutput};
pub use optim::{grad_check, sgd_step, Adam, AdamState, StepOutcome};
pub use seg::{encode, seg_loss, SegArch, SegModel};

/// Channel-major `(c, h, w)` feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(Error::domain(format!(
                "tensor data has {} values, expected {c}x{h}x{w}",
                data.len()
            )));
        }
        Ok(Self { c, h, w, data })
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    /// RGB image scaled to `[0, 1]`, one plane per channel.
    pub fn from_image(img: &Image) -> Self {
        let (w, h) = (img.width(), img.height());
        let mut data = vec![0.0; 3 * h * w];
        for (i, px) in img.pixels().chunks_exact(3).enumerate() {
            for ch in 0..3 {
                data[ch * h * w + i] = px[ch] as f64 / 255.0;
            }
        }
        Self { c: 3, h, w, data }
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }
}

/// Images with binary masks and domain labels.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub images: Vec<Tensor>,
    pub masks: Vec<Vec<f64>>,
    pub domains: Vec<usize>,
    pub num_domains: usize,
}

impl TrainBatch {
    pub fn new(
        images: Vec<Tensor>,
        masks: Vec<Vec<f64>>,
        domains: Vec<usize>,
        num_domains: usize,
    ) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::domain("empty batch"));
        }
        if images.len() != masks.len() || images.len() != domains.len() {
            return Err(Error::domain("images, masks and domains differ in count"));
        }
        for (img, m) in images.iter().zip(&masks) {
            if m.len() != img.hw() {
                return Err(Error::domain("mask size does not match image"));
            }
            if m.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::domain("masks must be binary"));
            }
        }
        if let Some(&d) = domains.iter().find(|&&d| d >= num_domains) {
            return Err(Error::domain(format!("domain code {d} outside 0..{num_domains}")));
        }
        Ok(Self {
            images,
            masks,
            domains,
            num_domains,
        })
    }

    /// Builds a batch from masked 8-bit images.
    pub fn from_images(images: &[Image], domains: &[usize], num_domains: usize) -> Result<Self> {
        let mut masks = Vec::with_capacity(images.len());
        for img in images {
            let m = img
                .mask()
                .ok_or_else(|| Error::domain("training images need masks"))?;
            masks.push(m.iter().map(|&v| v as f64).collect());
        }
        Self::new(
            images.iter().map(Tensor::from_image).collect(),
            masks,
            domains.to_vec(),
            num_domains,
        )
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// One-hot domain codes, one row per sample.
    pub fn z(&self) -> Vec<Vec<f64>> {
        self.domains
            .iter()
            .map(|&d| {
                let mut row = vec![0.0; self.num_domains];
                row[d] = 1.0;
                row
            })
            .collect()
    }
}

/// Fan-in scaled uniform initialisation `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
pub(crate) fn init_uniform(params: &mut [f64], fan_in: usize, rng: &mut ChaCha8Rng) {
    let bound = (6.0 / fan_in as f64).sqrt();
    for p in params {
        *p = rng.random_range(-bound..bound);
    }
}

pub(crate) fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub const CHECKPOINT_FORMAT: &str = "augsearch-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk parameter dump.
///
/// ```json
/// { "format": "augsearch-checkpoint", "version": 1,
///   "kind": "seg_model" | "domain_classifier" | "controller",
///   "architecture": { ... }, "params": [f64, ...] }
/// ```
///
/// `params` is the model's flat parameter vector in its documented layer
/// order; floats are written with shortest round-trip formatting.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint<A> {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub architecture: A,
    pub params: Vec<f64>,
}

impl<A: Serialize + DeserializeOwned> Checkpoint<A> {
    pub fn new(kind: &str, architecture: A, params: Vec<f64>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            kind: kind.into(),
            architecture,
            params,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    /// Reads and checks the header fields. The parameter count is checked
    /// against the architecture by each model's `from_checkpoint`.
    pub fn load(path: impl AsRef<Path>, kind: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::schema("format", format!("expected {CHECKPOINT_FORMAT}")));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::schema(
                "version",
                format!("unsupported checkpoint version {}", ck.version),
            ));
        }
        if ck.kind != kind {
            return Err(Error::schema("kind", format!("expected {kind}, found {}", ck.kind)));
        }
        if ck.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::schema("params", "non-finite parameter"));
        }
        Ok(ck)
    }
}

pub(crate) fn check_param_count(found: usize, expected: usize) -> Result<()> {
    if found != expected {
        return Err(Error::schema(
            "params",
            format!("expected {expected} values for the architecture, found {found}"),
        ));
    }
    Ok(())
}
