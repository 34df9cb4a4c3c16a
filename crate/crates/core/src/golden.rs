//! Cross-implementation conformance corpus for the transform kernels.
//!
//! Five fixed 32x32 inputs, every operation at levels 0, 5 and 9 of a
//! ten-point grid. Each pair records the SplitMix64 state its op was applied
//! with (`SplitMix64::new(seed)`), which only matters for Cutout.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::{domain_rng, generate_domain, DomainSpec};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::transform::{apply_op, Image, OpKind, Operation};

pub const GOLDEN_FORMAT: &str = "augsearch-golden";
pub const GOLDEN_VERSION: u32 = 1;
pub const GOLDEN_SEED: u64 = 0x601D_E11;
pub const GOLDEN_RESOLUTION: u32 = 10;
pub const GOLDEN_LEVELS: [u32; 3] = [0, 5, 9];
pub const GOLDEN_IMAGES: usize = 5;
pub const GOLDEN_SIDE: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldenEntry {
    pub op: OpKind,
    pub level: u32,
    pub resolution: u32,
    /// Initial SplitMix64 state for this pair.
    pub seed: u64,
    pub image_index: usize,
    pub input: String,
    pub output: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldenManifest {
    pub format: String,
    pub version: u32,
    pub prng: String,
    pub entries: Vec<GoldenEntry>,
}

/// The fixed inputs: four benchmark renders and one pixel-noise image.
pub fn golden_inputs() -> Result<Vec<Image>> {
    let specs = DomainSpec::defaults();
    let mut out = Vec::with_capacity(GOLDEN_IMAGES);
    for (i, spec) in specs.iter().enumerate().take(GOLDEN_IMAGES - 1) {
        let mut rng = domain_rng(GOLDEN_SEED + i as u64, spec.domain_id);
        let s = generate_domain(spec, 1, GOLDEN_SIDE, &mut rng)?.remove(0);
        out.push(Image::new(GOLDEN_SIDE, GOLDEN_SIDE, s.image.pixels().to_vec())?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(GOLDEN_SEED);
    let px = (0..GOLDEN_SIDE * GOLDEN_SIDE * 3).map(|_| rng.random()).collect();
    out.push(Image::new(GOLDEN_SIDE, GOLDEN_SIDE, px)?);
    Ok(out)
}

/// Writes `inputs/`, `outputs/` and `manifest.json` under `dir`.
pub fn export_golden(dir: impl AsRef<Path>) -> Result<GoldenManifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("inputs"))?;
    std::fs::create_dir_all(dir.join("outputs"))?;
    let inputs = golden_inputs()?;
    for (i, img) in inputs.iter().enumerate() {
        img.save_png(dir.join(format!("inputs/img_{i}.png")))?;
    }
    let mut entries = Vec::new();
    for kind in OpKind::ALL {
        for level in GOLDEN_LEVELS {
            let op = Operation::new(kind, level, GOLDEN_RESOLUTION)?;
            for (i, img) in inputs.iter().enumerate() {
                let seed = SplitMix64::for_item(GOLDEN_SEED, entries.len() as u64).next_u64();
                let out = apply_op(img, &op, &mut SplitMix64::new(seed));
                let output = format!("outputs/{}_{level}_{i}.png", kind.name());
                out.save_png(dir.join(&output))?;
                entries.push(GoldenEntry {
                    op: kind,
                    level,
                    resolution: GOLDEN_RESOLUTION,
                    seed,
                    image_index: i,
                    input: format!("inputs/img_{i}.png"),
                    output,
                });
            }
        }
    }
    let manifest = GoldenManifest {
        format: GOLDEN_FORMAT.into(),
        version: GOLDEN_VERSION,
        prng: "splitmix64".into(),
        entries,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Replays every pair of a corpus and returns the outputs that differ.
pub fn verify_golden(dir: impl AsRef<Path>) -> Result<Vec<String>> {
    let dir = dir.as_ref();
    let manifest: GoldenManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.format != GOLDEN_FORMAT || manifest.version != GOLDEN_VERSION {
        return Err(Error::schema("format", "not a version 1 golden corpus"));
    }
    if manifest.entries.is_empty() {
        return Err(Error::schema("entries", "empty corpus"));
    }
    let mut bad = Vec::new();
    for e in &manifest.entries {
        let input = Image::load_png(dir.join(&e.input))?;
        let expected = Image::load_png(dir.join(&e.output))?;
        let op = Operation::new(e.op, e.level, e.resolution)?;
        if apply_op(&input, &op, &mut SplitMix64::new(e.seed)) != expected {
            bad.push(e.output.clone());
        }
    }
    Ok(bad)
}
