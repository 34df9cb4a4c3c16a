//! Procedural multi-domain segmentation benchmark and its metrics.
//!
//! Each domain renders thin curved structures ("vessels") over a shaded,
//! textured background, then applies a global contrast/brightness change and
//! Gaussian noise. Domains differ only in these appearance parameters, so a
//! model that overfits the source appearance loses accuracy on a held-out one.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transform::Image;

/// Appearance parameters of one synthetic domain. Colours are in `[0, 1]`.
///
/// Valid ranges: `gradient` in `[0, 0.6]` (radial darkening towards the
/// corners), `brightness` in `[-0.5, 0.5]`, `contrast` in `[0.25, 3]` (about
/// mid-grey), `noise` in `[0, 0.25]`, `texture_freq` in `[0, 0.5]` cycles per
/// pixel and `texture_amp` in `[0, 0.3]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub domain_id: usize,
    pub name: String,
    pub background: [f64; 3],
    pub gradient: f64,
    /// Structure colour at its centre line; it fades to 40% of the way back
    /// to the background at the edge.
    pub foreground: [f64; 3],
    pub brightness: f64,
    pub contrast: f64,
    pub noise: f64,
    pub texture_freq: f64,
    pub texture_amp: f64,
}

fn check_range(field: &str, v: f64, lo: f64, hi: f64) -> Result<()> {
    if !(lo..=hi).contains(&v) {
        return Err(Error::domain(format!("{field} = {v} outside [{lo}, {hi}]")));
    }
    Ok(())
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        for (i, (&b, &f)) in self.background.iter().zip(&self.foreground).enumerate() {
            check_range(&format!("background[{i}]"), b, 0.0, 1.0)?;
            check_range(&format!("foreground[{i}]"), f, 0.0, 1.0)?;
        }
        check_range("gradient", self.gradient, 0.0, 0.6)?;
        check_range("brightness", self.brightness, -0.5, 0.5)?;
        check_range("contrast", self.contrast, 0.25, 3.0)?;
        check_range("noise", self.noise, 0.0, 0.25)?;
        check_range("texture_freq", self.texture_freq, 0.0, 0.5)?;
        check_range("texture_amp", self.texture_amp, 0.0, 0.3)?;
        Ok(())
    }

    /// The four shipped domains.
    pub fn defaults() -> Vec<DomainSpec> {
        vec![
            DomainSpec {
                domain_id: 0,
                name: "warm".into(),
                background: [0.78, 0.38, 0.16],
                gradient: 0.30,
                foreground: [0.46, 0.13, 0.05],
                brightness: 0.0,
                contrast: 1.0,
                noise: 0.03,
                texture_freq: 0.10,
                texture_amp: 0.03,
            },
            DomainSpec {
                domain_id: 1,
                name: "dim".into(),
                background: [0.58, 0.30, 0.20],
                gradient: 0.45,
                foreground: [0.38, 0.17, 0.12],
                brightness: -0.15,
                contrast: 0.8,
                noise: 0.05,
                texture_freq: 0.20,
                texture_amp: 0.05,
            },
            DomainSpec {
                domain_id: 2,
                name: "pale".into(),
                background: [0.82, 0.62, 0.34],
                gradient: 0.15,
                foreground: [0.52, 0.32, 0.17],
                brightness: 0.08,
                contrast: 1.3,
                noise: 0.04,
                texture_freq: 0.05,
                texture_amp: 0.02,
            },
            DomainSpec {
                domain_id: 3,
                name: "hazy".into(),
                background: [0.62, 0.47, 0.42],
                gradient: 0.25,
                foreground: [0.42, 0.29, 0.27],
                brightness: 0.05,
                contrast: 0.7,
                noise: 0.07,
                texture_freq: 0.30,
                texture_amp: 0.06,
            },
        ]
    }
}

/// An image with its exact mask and the domain it came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledSample {
    pub image: Image,
    pub domain_id: usize,
}

impl LabeledSample {
    pub fn mask(&self) -> &[u8] {
        self.image.mask().expect("labelled samples always carry a mask")
    }
}

pub const MIN_FOREGROUND: f64 = 0.02;
pub const MAX_FOREGROUND: f64 = 0.3;

/// Per-pixel closest normalised distance to any curve centre (`d / r`).
fn render_curves(side: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let scale = side as f64 / 32.0;
    let mut closest = vec![f64::INFINITY; side * side];
    let curves = rng.random_range(2..=5);
    for _ in 0..curves {
        let mut x = rng.random_range(0.0..side as f64);
        let mut y = rng.random_range(0.0..side as f64);
        let mut heading = rng.random_range(0.0..std::f64::consts::TAU);
        let mut turn = 0.0;
        let base_r = rng.random_range(0.7..1.4) * scale;
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let wobble = rng.random_range(0.02..0.08);
        let length = rng.random_range(1.0..2.0) * side as f64;
        let steps = (length / 0.5) as usize;
        for t in 0..steps {
            turn = 0.9 * turn + rng.random_range(-0.05..0.05);
            heading += turn;
            x += 0.5 * heading.cos();
            y += 0.5 * heading.sin();
            let m = 3.0 * scale;
            if x < -m || y < -m || x > side as f64 + m || y > side as f64 + m {
                break;
            }
            let r = base_r * (1.0 + 0.35 * (phase + wobble * t as f64).sin());
            let (x0, x1) = ((x - r).floor().max(0.0) as usize, (x + r).ceil().max(0.0) as usize);
            let (y0, y1) = ((y - r).floor().max(0.0) as usize, (y + r).ceil().max(0.0) as usize);
            for py in y0..y1.min(side) {
                for px in x0..x1.min(side) {
                    let d = ((px as f64 + 0.5 - x).powi(2) + (py as f64 + 0.5 - y).powi(2)).sqrt();
                    let v = d / r;
                    let cell = &mut closest[py * side + px];
                    if v < *cell {
                        *cell = v;
                    }
                }
            }
        }
    }
    closest
}

fn render(spec: &DomainSpec, side: usize, closest: &[f64], rng: &mut ChaCha8Rng) -> Result<Image> {
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let tex_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let noise = Normal::new(0.0, spec.noise.max(1e-300)).expect("noise sigma validated");
    let c = (side as f64 - 1.0) / 2.0;
    let mut pixels = Vec::with_capacity(side * side * 3);
    let mut mask = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let (dx, dy) = ((x as f64 - c) / c.max(1.0), (y as f64 - c) / c.max(1.0));
            let shade = 1.0 - spec.gradient * (dx * dx + dy * dy) / 2.0;
            let tex = spec.texture_amp
                * (std::f64::consts::TAU * spec.texture_freq * (x as f64 * ca + y as f64 * sa)
                    + tex_phase)
                    .sin();
            let v = closest[y * side + x];
            let fg = v <= 1.0;
            mask.push(fg as u8);
            for ch in 0..3 {
                let bg = spec.background[ch] * shade + tex;
                let mut val = if fg {
                    let s = 1.0 - 0.6 * v * v;
                    bg + (spec.foreground[ch] * shade - bg) * s
                } else {
                    bg
                };
                val = (val - 0.5) * spec.contrast + 0.5 + spec.brightness;
                if spec.noise > 0.0 {
                    val += noise.sample(rng);
                }
                pixels.push((val * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Image::new(side, side, pixels)?.with_mask(mask)
}

/// Renders `count` labelled samples of side `side` for one domain.
pub fn generate_domain(
    spec: &DomainSpec,
    count: usize,
    side: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<LabeledSample>> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::domain("count must be at least 1"));
    }
    if side < 8 {
        return Err(Error::domain("image side must be at least 8"));
    }
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut tries = 0;
        let closest = loop {
            let c = render_curves(side, rng);
            let frac = c.iter().filter(|&&v| v <= 1.0).count() as f64 / (side * side) as f64;
            if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac) {
                break c;
            }
            tries += 1;
            if tries > 1000 {
                return Err(Error::domain("could not render a mask within the foreground bounds"));
            }
        };
        out.push(LabeledSample {
            image: render(spec, side, &closest, rng)?,
            domain_id: spec.domain_id,
        });
    }
    Ok(out)
}

/// Train and test splits of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainData {
    pub spec: DomainSpec,
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

/// Per-domain stream: `seed + (domain_id + 1) * 0x9E3779B97F4A7C15`.
pub fn domain_rng(seed: u64, domain_id: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        seed.wrapping_add((domain_id as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
    )
}

pub fn generate_benchmark(
    specs: &[DomainSpec],
    train: usize,
    test: usize,
    side: usize,
    seed: u64,
) -> Result<Vec<DomainData>> {
    specs
        .iter()
        .map(|spec| {
            let mut rng = domain_rng(seed, spec.domain_id);
            Ok(DomainData {
                spec: spec.clone(),
                train: generate_domain(spec, train, side, &mut rng)?,
                test: generate_domain(spec, test, side, &mut rng)?,
            })
        })
        .collect()
}

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::domain(format!("shape mismatch: {a} vs {b}")));
    }
    Ok(())
}

/// `2|P∩G| / (|P|+|G|)`; two empty masks score 1.
pub fn dice(pred: &[u8], gt: &[u8]) -> Result<f64> {
    same_len(pred.len(), gt.len())?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p != 0, g != 0);
        inter += (p && g) as usize;
        total += p as usize + g as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

pub fn accuracy(pred: &[u8], gt: &[u8]) -> Result<f64> {
    same_len(pred.len(), gt.len())?;
    if gt.is_empty() {
        return Err(Error::domain("accuracy of an empty mask"));
    }
    let ok = pred.iter().zip(gt).filter(|(&p, &g)| (p != 0) == (g != 0)).count();
    Ok(ok as f64 / gt.len() as f64)
}

/// Area under the ROC curve via the Mann-Whitney statistic with midranks.
/// Errors when the labels contain a single class.
pub fn auc_roc(scores: &[f64], gt: &[u8]) -> Result<f64> {
    same_len(scores.len(), gt.len())?;
    let pos = gt.iter().filter(|&&g| g != 0).count();
    let neg = gt.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::domain("AUC undefined: labels contain a single class"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based: positions i..=j share (i + j) / 2 + 1
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| gt[k] != 0).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

pub const THRESHOLD: f64 = 0.5;

/// Metrics of one evaluated set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub domain: String,
    /// Mean of per-image Dice at threshold 0.5.
    pub dice: f64,
    /// Pixel accuracy pooled over the set.
    pub accuracy: f64,
    /// Pooled pixel AUC; `None` when the set has a single label class.
    pub auc: Option<f64>,
}

/// Scores images in `samples` given per-pixel probabilities.
pub fn evaluate(domain: &str, scores: &[Vec<f64>], samples: &[LabeledSample]) -> Result<MetricsRow> {
    same_len(scores.len(), samples.len())?;
    if samples.is_empty() {
        return Err(Error::domain("nothing to evaluate"));
    }
    let mut dice_sum = 0.0;
    let mut all_scores = Vec::new();
    let mut all_gt = Vec::new();
    for (s, smp) in scores.iter().zip(samples) {
        let gt = smp.mask();
        same_len(s.len(), gt.len())?;
        let pred: Vec<u8> = s.iter().map(|&p| (p >= THRESHOLD) as u8).collect();
        dice_sum += dice(&pred, gt)?;
        all_scores.extend_from_slice(s);
        all_gt.extend_from_slice(gt);
    }
    let pred: Vec<u8> = all_scores.iter().map(|&p| (p >= THRESHOLD) as u8).collect();
    Ok(MetricsRow {
        domain: domain.to_string(),
        dice: dice_sum / samples.len() as f64,
        accuracy: accuracy(&pred, &all_gt)?,
        auc: auc_roc(&all_scores, &all_gt).ok(),
    })
}

/// Per-domain rows followed by an `average` row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn from_rows(mut rows: Vec<MetricsRow>) -> Self {
        let n = rows.len() as f64;
        let aucs: Vec<f64> = rows.iter().filter_map(|r| r.auc).collect();
        let avg = MetricsRow {
            domain: "average".into(),
            dice: rows.iter().map(|r| r.dice).sum::<f64>() / n,
            accuracy: rows.iter().map(|r| r.accuracy).sum::<f64>() / n,
            auc: (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64),
        };
        rows.push(avg);
        Self { rows }
    }

    pub fn average(&self) -> &MetricsRow {
        self.rows.last().expect("table always has an average row")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("domain,dice,accuracy,auc\n");
        for r in &self.rows {
            let auc = r.auc.map_or_else(|| "NA".to_string(), |a| format!("{a:.6}"));
            s.push_str(&format!("{},{:.6},{:.6},{auc}\n", r.domain, r.dice, r.accuracy));
        }
        s
    }
}

/// For each domain, `runner(sources, target)` trains on the other domains and
/// returns per-pixel probabilities for `target.test`.
pub fn leave_one_domain_out<F>(data: &[DomainData], mut runner: F) -> Result<MetricsTable>
where
    F: FnMut(&[&DomainData], &DomainData) -> Result<Vec<Vec<f64>>>,
{
    if data.len() < 3 {
        return Err(Error::domain("leave-one-domain-out needs at least 3 domains"));
    }
    let mut rows = Vec::with_capacity(data.len());
    for (k, target) in data.iter().enumerate() {
        let sources: Vec<&DomainData> = data
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != k)
            .map(|(_, d)| d)
            .collect();
        let scores = runner(&sources, target)?;
        rows.push(evaluate(&target.spec.name, &scores, &target.test)?);
    }
    Ok(MetricsTable::from_rows(rows))
}

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image: String,
    pub mask: String,
    pub domain_id: usize,
    pub split: String,
}

/// `manifest.json` of an exported dataset; paths are relative to it.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub domains: Vec<DomainSpec>,
    pub samples: Vec<ManifestEntry>,
}

pub fn export_dataset(dir: impl AsRef<Path>, data: &[DomainData]) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("images"))?;
    let mut samples = Vec::new();
    for d in data {
        for (split, set) in [("train", &d.train), ("test", &d.test)] {
            for (i, s) in set.iter().enumerate() {
                let stem = format!("images/d{}_{split}_{i:04}", d.spec.domain_id);
                let (image, mask) = (format!("{stem}.png"), format!("{stem}_mask.png"));
                s.image.save_png(dir.join(&image))?;
                s.image.save_mask_png(dir.join(&mask))?;
                samples.push(ManifestEntry {
                    image,
                    mask,
                    domain_id: d.spec.domain_id,
                    split: split.into(),
                });
            }
        }
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        domains: data.iter().map(|d| d.spec.clone()).collect(),
        samples,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<DomainData>> {
    let dir = dir.as_ref();
    let manifest: DatasetManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::schema("version", format!("unsupported manifest version {}", manifest.version)));
    }
    let mut out: Vec<DomainData> = manifest
        .domains
        .iter()
        .map(|spec| {
            spec.validate()?;
            Ok(DomainData {
                spec: spec.clone(),
                train: Vec::new(),
                test: Vec::new(),
            })
        })
        .collect::<Result<_>>()?;
    for (i, e) in manifest.samples.iter().enumerate() {
        let slot = out
            .iter_mut()
            .find(|d| d.spec.domain_id == e.domain_id)
            .ok_or_else(|| Error::schema(format!("samples[{i}].domain_id"), "unknown domain"))?;
        let img = Image::load_png(dir.join(&e.image))?.with_mask(Image::load_mask_png(dir.join(&e.mask))?)?;
        let sample = LabeledSample {
            image: img,
            domain_id: e.domain_id,
        };
        match e.split.as_str() {
            "train" => slot.train.push(sample),
            "test" => slot.test.push(sample),
            other => {
                return Err(Error::schema(format!("samples[{i}].split"), format!("unknown split {other}")))
            }
        }
    }
    Ok(out)
}
