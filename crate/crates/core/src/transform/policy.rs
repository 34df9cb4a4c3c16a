use std::path::Path;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use super::image::Image;
use super::ops::{apply_op_traced, CutoutRect, OpKind, Operation};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Version tag written into every policy document.
pub const POLICY_SCHEMA_VERSION: u32 = 1;

/// Ordered chain of operations applied as one unit.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SubPolicy {
    ops: Vec<Operation>,
}

impl SubPolicy {
    pub fn new(ops: Vec<Operation>) -> Result<Self> {
        if ops.is_empty() {
            return Err(Error::domain("sub-policy needs at least one operation"));
        }
        Ok(Self { ops })
    }

    pub fn ops(&self) -> &[Operation] {
        &self.ops
    }
}

/// A set of sub-policies; one is drawn uniformly per image.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Policy {
    resolution: u32,
    subpolicies: Vec<SubPolicy>,
}

/// What happened when a policy was applied to one image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Application {
    pub image: Image,
    pub subpolicy: usize,
    pub cutouts: Vec<CutoutRect>,
}

impl Policy {
    /// All sub-policies must share length and grid resolution.
    pub fn new(resolution: u32, subpolicies: Vec<SubPolicy>) -> Result<Self> {
        let Some(first) = subpolicies.first() else {
            return Err(Error::domain("policy needs at least one sub-policy"));
        };
        let len = first.ops.len();
        for sp in &subpolicies {
            if sp.ops.len() != len {
                return Err(Error::domain("sub-policies differ in length"));
            }
            if sp.ops.iter().any(|op| op.resolution() != resolution) {
                return Err(Error::domain("operation resolution differs from policy"));
            }
        }
        Ok(Self {
            resolution,
            subpolicies,
        })
    }

    /// `S` sub-policies of `L` ops, each a no-op on any image.
    pub fn identity(resolution: u32, s: usize, l: usize) -> Result<Self> {
        let op = Operation::new(OpKind::Posterize, resolution - 1, resolution)?;
        let sp = SubPolicy::new(vec![op; l])?;
        Self::new(resolution, vec![sp; s])
    }

    /// Every slot filled with the same operation.
    pub fn uniform(op: Operation, s: usize, l: usize) -> Result<Self> {
        Self::new(op.resolution(), vec![SubPolicy::new(vec![op; l])?; s])
    }

    pub fn resolution(&self) -> u32 {
        self.resolution
    }

    pub fn subpolicies(&self) -> &[SubPolicy] {
        &self.subpolicies
    }

    pub fn num_subpolicies(&self) -> usize {
        self.subpolicies.len()
    }

    pub fn subpolicy_len(&self) -> usize {
        self.subpolicies[0].ops.len()
    }

    pub fn to_document(&self) -> PolicyDocument {
        PolicyDocument {
            version: POLICY_SCHEMA_VERSION,
            r: self.resolution,
            s: self.subpolicies.len() as u32,
            l: self.subpolicy_len() as u32,
            cutout_fill: 0,
            subpolicies: self
                .subpolicies
                .iter()
                .map(|sp| {
                    sp.ops
                        .iter()
                        .map(|op| OpEntry {
                            op: op.kind(),
                            level: op.level(),
                        })
                        .collect()
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("policy serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: PolicyDocument = serde_json::from_str(text)?;
        doc.into_policy()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }
}

/// Wire form of a policy.
///
/// ```json
/// {"version":1,"R":10,"S":5,"L":2,"cutout_fill":0,
///  "subpolicies":[[{"op":"Brightness","level":3},{"op":"Invert","level":0}], ...]}
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyDocument {
    pub version: u32,
    #[serde(rename = "R")]
    pub r: u32,
    #[serde(rename = "S")]
    pub s: u32,
    #[serde(rename = "L")]
    pub l: u32,
    pub cutout_fill: u8,
    pub subpolicies: Vec<Vec<OpEntry>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpEntry {
    pub op: OpKind,
    pub level: u32,
}

impl PolicyDocument {
    pub fn into_policy(self) -> Result<Policy> {
        if self.version != POLICY_SCHEMA_VERSION {
            return Err(Error::schema(
                "version",
                format!("unsupported version {} (expected {POLICY_SCHEMA_VERSION})", self.version),
            ));
        }
        if self.r < 2 {
            return Err(Error::schema("R", "magnitude grid needs R >= 2"));
        }
        if self.cutout_fill != 0 {
            return Err(Error::schema("cutout_fill", "only fill value 0 is supported"));
        }
        if self.subpolicies.len() != self.s as usize || self.s == 0 {
            return Err(Error::schema(
                "S",
                format!("S = {} but {} sub-policies listed", self.s, self.subpolicies.len()),
            ));
        }
        let mut subpolicies = Vec::with_capacity(self.subpolicies.len());
        for (i, entries) in self.subpolicies.into_iter().enumerate() {
            if entries.len() != self.l as usize || self.l == 0 {
                return Err(Error::schema(
                    format!("subpolicies[{i}]"),
                    format!("expected L = {} operations, found {}", self.l, entries.len()),
                ));
            }
            let ops = entries
                .into_iter()
                .enumerate()
                .map(|(j, e)| {
                    Operation::new(e.op, e.level, self.r).map_err(|_| {
                        Error::schema(
                            format!("subpolicies[{i}][{j}].level"),
                            format!("level {} outside [0, {})", e.level, self.r),
                        )
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            subpolicies.push(SubPolicy::new(ops)?);
        }
        Policy::new(self.r, subpolicies)
    }
}

/// Applies the operations of `sp` in list order.
pub fn apply_subpolicy(img: &Image, sp: &SubPolicy, rng: &mut SplitMix64) -> Image {
    apply_subpolicy_traced(img, sp, rng).0
}

pub fn apply_subpolicy_traced(
    img: &Image,
    sp: &SubPolicy,
    rng: &mut SplitMix64,
) -> (Image, Vec<CutoutRect>) {
    let mut cutouts = Vec::new();
    let mut cur = img.clone();
    for op in &sp.ops {
        let (next, rect) = apply_op_traced(&cur, op, rng);
        cutouts.extend(rect);
        cur = next;
    }
    (cur, cutouts)
}

/// Draws a sub-policy uniformly (`rng.below(S)`) and applies it.
pub fn apply_policy(img: &Image, policy: &Policy, rng: &mut SplitMix64) -> (Image, usize) {
    let app = apply_policy_traced(img, policy, rng);
    (app.image, app.subpolicy)
}

pub fn apply_policy_traced(img: &Image, policy: &Policy, rng: &mut SplitMix64) -> Application {
    let idx = rng.below(policy.subpolicies.len() as u64) as usize;
    let (image, cutouts) = apply_subpolicy_traced(img, &policy.subpolicies[idx], rng);
    Application {
        image,
        subpolicy: idx,
        cutouts,
    }
}

/// Number of distinct policies: `(10 * R)^(S * L)`.
pub fn search_space_size(r: u32, s: u32, l: u32) -> BigUint {
    BigUint::from(10u32 * r).pow(s * l)
}
