//! The joint adversarial search loop.
//!
//! Per epoch: sample `B` policies; for each of `T` steps draw a mini-batch
//! balanced across source domains, apply the fixed geometric augmentation,
//! make one copy per policy, update the domain decoder on the copy-averaged
//! cross-entropy, then the segmentation model on the copy-averaged pixel loss,
//! and fold each copy's diversity into that policy's running-mean reward.
//! After `T` steps the rewards are standardized and the controller steps.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::{leave_one_domain_out, DomainData, DomainSpec, LabeledSample, MetricsTable};
use crate::controller::{
    normalize_rewards, ppo_update, reinforce_update, ControllerArch, ControllerState, SampleTrace,
};
use crate::error::{Error, Result};
use crate::nets::{
    group_by_domain, sgd_step, AdamState, DomainArch, DomainClassifier, SegArch, SegModel,
    StepOutcome, Tensor, TrainBatch,
};
use crate::ot::{diversity_loss, SinkhornParams};
use crate::rng::SplitMix64;
use crate::transform::{apply_policy, search_space_size, Image, OpKind, Policy, PolicyDocument};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Reinforce,
    Ppo,
}

/// Where the training images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub image_size: usize,
    pub train_per_domain: usize,
    pub test_per_domain: usize,
    pub source_domains: Vec<usize>,
    /// Domain specs; `None` selects the four shipped ones.
    pub specs: Option<Vec<DomainSpec>>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            train_per_domain: 40,
            test_per_domain: 20,
            source_domains: vec![0, 1, 2],
            specs: None,
        }
    }
}

impl DataConfig {
    pub fn specs(&self) -> Vec<DomainSpec> {
        self.specs.clone().unwrap_or_else(DomainSpec::defaults)
    }
}

/// Full experiment configuration, read from JSON. Missing keys take the
/// desk-scale defaults below; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    #[serde(rename = "R")]
    pub r: u32,
    #[serde(rename = "S")]
    pub s: usize,
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(rename = "B")]
    pub b: usize,
    #[serde(rename = "E")]
    pub e: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub batch_size: usize,
    pub lr_model: f64,
    pub lr_classifier: f64,
    pub lr_controller: f64,
    pub entropy_weight: f64,
    pub embed_dim: usize,
    pub seg_widths: [usize; 3],
    pub controller_hidden: usize,
    pub controller_embed: usize,
    pub tanh_constant: f64,
    pub temperature: f64,
    pub sinkhorn: SinkhornParams,
    pub algorithm: Algorithm,
    pub ppo_clip: f64,
    /// Operations in the search space.
    pub ops: Vec<OpKind>,
    /// Random flips, quarter turns and crop-rescale before policy augmentation.
    pub default_augment: bool,
    /// Keep the domain decoder at its random initialisation.
    pub freeze_classifier: bool,
    pub seed: u64,
    pub data: DataConfig,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            r: 10,
            s: 5,
            l: 2,
            b: 6,
            e: 60,
            t: 25,
            batch_size: 12,
            lr_model: 1e-3,
            lr_classifier: 1e-3,
            lr_controller: 3.5e-4,
            entropy_weight: 1e-5,
            embed_dim: 32,
            seg_widths: [8, 16, 32],
            controller_hidden: 100,
            controller_embed: 32,
            tanh_constant: 2.5,
            temperature: 2.0,
            sinkhorn: SinkhornParams::default(),
            algorithm: Algorithm::Reinforce,
            ppo_clip: 0.2,
            ops: OpKind::ALL.to_vec(),
            default_augment: true,
            freeze_classifier: false,
            seed: 0,
            data: DataConfig::default(),
        }
    }
}

fn positive(field: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::config(field, "must be positive"));
    }
    Ok(())
}

fn positive_f(field: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::config(field, "must be a positive finite number"));
    }
    Ok(())
}

impl SearchConfig {
    /// Full-size schedule: 150 epochs, batch 24, 256-pixel inputs.
    pub fn full_scale() -> Self {
        Self {
            e: 150,
            batch_size: 24,
            data: DataConfig {
                image_size: 256,
                ..DataConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.r < 2 {
            return Err(Error::config("R", "magnitude grid needs R >= 2"));
        }
        positive("S", self.s)?;
        positive("L", self.l)?;
        positive("B", self.b)?;
        positive("E", self.e)?;
        positive("T", self.t)?;
        positive("batch_size", self.batch_size)?;
        positive_f("lr_model", self.lr_model)?;
        positive_f("lr_classifier", self.lr_classifier)?;
        positive_f("lr_controller", self.lr_controller)?;
        if !(self.entropy_weight >= 0.0 && self.entropy_weight.is_finite()) {
            return Err(Error::config("entropy_weight", "must be non-negative"));
        }
        positive("embed_dim", self.embed_dim)?;
        if self.seg_widths.contains(&0) {
            return Err(Error::config("seg_widths", "widths must be positive"));
        }
        positive("controller_hidden", self.controller_hidden)?;
        positive("controller_embed", self.controller_embed)?;
        positive_f("tanh_constant", self.tanh_constant)?;
        positive_f("temperature", self.temperature)?;
        positive_f("sinkhorn.epsilon", self.sinkhorn.epsilon)?;
        positive_f("sinkhorn.tol", self.sinkhorn.tol)?;
        positive("sinkhorn.max_iters", self.sinkhorn.max_iters)?;
        positive_f("ppo_clip", self.ppo_clip)?;
        if self.ops.is_empty() {
            return Err(Error::config("ops", "search space needs at least one operation"));
        }
        let d = &self.data;
        if d.image_size == 0 || d.image_size % 8 != 0 {
            return Err(Error::config("data.image_size", "must be a positive multiple of 8"));
        }
        positive("data.train_per_domain", d.train_per_domain)?;
        positive("data.test_per_domain", d.test_per_domain)?;
        let specs = d.specs();
        for (i, s) in specs.iter().enumerate() {
            s.validate()
                .map_err(|e| Error::config(format!("data.specs[{i}]"), e.to_string()))?;
        }
        if d.source_domains.len() < 2 {
            return Err(Error::config("data.source_domains", "need at least 2 source domains"));
        }
        for &id in &d.source_domains {
            if !specs.iter().any(|s| s.domain_id == id) {
                return Err(Error::config("data.source_domains", format!("unknown domain {id}")));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn controller_arch(&self) -> ControllerArch {
        ControllerArch {
            hidden: self.controller_hidden,
            embed: self.controller_embed,
            resolution: self.r,
            subpolicies: self.s,
            ops_per_subpolicy: self.l,
            tanh_constant: self.tanh_constant,
            temperature: self.temperature,
            ops: self.ops.clone(),
        }
    }

    pub fn seg_arch(&self) -> SegArch {
        SegArch {
            in_channels: 3,
            widths: self.seg_widths,
        }
    }
}

/// How the `B` policies of each epoch are chosen.
#[derive(Clone, Debug, PartialEq)]
pub enum Mode {
    /// Learned controller with policy-gradient updates.
    Aadg,
    /// Uniform draws from the search space; the controller never changes.
    Radg,
    /// The same policy for every copy in every epoch.
    Fixed(Policy),
    /// No policy augmentation: one copy of the (geometrically augmented) batch.
    Baseline,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Aadg => "aadg",
            Mode::Radg => "radg",
            Mode::Fixed(_) => "fixed",
            Mode::Baseline => "baseline",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub policies: Vec<PolicyDocument>,
    /// Token sequence of each policy (operation index, level, ...).
    pub tokens: Vec<Vec<usize>>,
    /// Controller log-probability of each sampled policy, when one sampled it.
    pub log_probs: Option<Vec<f64>>,
    pub raw_rewards: Vec<f64>,
    pub normalized_rewards: Vec<f64>,
    /// `step_rewards[b][t]`: diversity of copy `b` at inner step `t`.
    pub step_rewards: Vec<Vec<f64>>,
    pub mean_seg_loss: f64,
    pub mean_domain_loss: f64,
    /// Optimizer steps skipped because of non-finite gradients.
    pub skipped_updates: usize,
}

pub const REPORT_FORMAT: &str = "augsearch-run-report";
pub const REPORT_VERSION: u32 = 1;

/// Everything needed to audit a run. Contains no timing data, so equal
/// configurations serialize to identical bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format: String,
    pub version: u32,
    pub mode: String,
    pub seed: u64,
    pub config: SearchConfig,
    pub source_domains: Vec<usize>,
    pub search_space_size: String,
    pub epochs: Vec<EpochRecord>,
    /// Highest-reward policy of the final epoch.
    pub best_policy: Option<PolicyDocument>,
    pub best_reward: Option<f64>,
    /// Final-epoch policies, highest reward first.
    pub final_policies: Vec<PolicyDocument>,
    pub heldout: Option<MetricsTable>,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Flat per-epoch scalars.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "epoch,mean_raw_reward,max_raw_reward,min_raw_reward,mean_seg_loss,mean_domain_loss,skipped_updates\n",
        );
        for e in &self.epochs {
            let n = e.raw_rewards.len() as f64;
            let mean = e.raw_rewards.iter().sum::<f64>() / n;
            let max = e.raw_rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let min = e.raw_rewards.iter().copied().fold(f64::INFINITY, f64::min);
            s.push_str(&format!(
                "{},{mean:.9},{max:.9},{min:.9},{:.9},{:.9},{}\n",
                e.epoch, e.mean_seg_loss, e.mean_domain_loss, e.skipped_updates
            ));
        }
        s
    }
}

pub struct SearchOutcome {
    pub seg: SegModel,
    pub classifier: DomainClassifier,
    pub controller: ControllerState,
    pub report: RunReport,
}

/// Arithmetic running mean after the `t`-th value (`t >= 1`).
pub fn update_running_reward(current: f64, new_value: f64, t: usize) -> f64 {
    assert!(t >= 1, "running mean index starts at 1");
    current + (new_value - current) / t as f64
}

/// Independent ChaCha stream `k` of a run seed.
pub fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(SplitMix64::for_item(seed, k).next_u64())
}

const STREAM_SEG_INIT: u64 = 1;
const STREAM_CLF_INIT: u64 = 2;
const STREAM_CONTROLLER_INIT: u64 = 3;
const STREAM_BATCHES: u64 = 4;
const STREAM_GEOMETRY: u64 = 5;
const STREAM_POLICIES: u64 = 6;
const STREAM_APPLY: u64 = 7;

/// One uniformly random policy token sequence over the allowed operations.
pub fn uniform_tokens<R: Rng + ?Sized>(arch: &ControllerArch, rng: &mut R) -> Vec<usize> {
    (0..arch.trace_len())
        .map(|t| {
            if t % 2 == 0 {
                arch.ops[rng.random_range(0..arch.ops.len())].index()
            } else {
                rng.random_range(0..arch.resolution as usize)
            }
        })
        .collect()
}

pub fn tokens_to_policy(arch: &ControllerArch, tokens: &[usize]) -> Result<Policy> {
    SampleTrace {
        tokens: tokens.to_vec(),
        log_probs: vec![0.0; tokens.len()],
        entropies: vec![0.0; tokens.len()],
    }
    .to_policy(arch)
}

/// Random flips, quarter turns and a crop of 75-100% of each side rescaled
/// back with nearest-neighbour sampling. The mask follows the pixels.
pub fn geometric_augment<R: Rng + ?Sized>(img: &Image, rng: &mut R) -> Result<Image> {
    let (w, h) = (img.width(), img.height());
    let frac = rng.random_range(0.75..=1.0);
    let cw = ((w as f64 * frac).round() as usize).clamp(1, w);
    let ch = ((h as f64 * frac).round() as usize).clamp(1, h);
    let x0 = rng.random_range(0..=w - cw);
    let y0 = rng.random_range(0..=h - ch);
    let turns = if w == h {
        rng.random_range(0..4u8)
    } else {
        2 * rng.random_range(0..2u8)
    };
    let flip = rng.random::<bool>();
    let src = img.pixels();
    let mask = img.mask();
    let mut pixels = vec![0u8; w * h * 3];
    let mut out_mask = mask.map(|_| vec![0u8; w * h]);
    for y in 0..h {
        for x in 0..w {
            let fx = if flip { w - 1 - x } else { x };
            let (rx, ry) = match turns {
                0 => (fx, y),
                1 => (y, w - 1 - fx),
                2 => (w - 1 - fx, h - 1 - y),
                _ => (h - 1 - y, fx),
            };
            let sx = x0 + rx * cw / w;
            let sy = y0 + ry * ch / h;
            let si = sy * w + sx;
            let di = y * w + x;
            pixels[3 * di..3 * di + 3].copy_from_slice(&src[3 * si..3 * si + 3]);
            if let (Some(m), Some(om)) = (mask, out_mask.as_mut()) {
                om[di] = m[si];
            }
        }
    }
    let out = Image::new(w, h, pixels)?;
    match out_mask {
        Some(m) => out.with_mask(m),
        None => Ok(out),
    }
}

struct CopyResult {
    seg_loss: f64,
    seg_grad: Vec<f64>,
    dom_loss: f64,
    dom_grad: Vec<f64>,
    diversity: f64,
}

fn process_copy(
    seg: &SegModel,
    clf: &DomainClassifier,
    batch: &TrainBatch,
    sinkhorn: &SinkhornParams,
) -> Result<CopyResult> {
    let (seg_loss, seg_grad, feats) = seg.loss_and_grad(batch)?;
    let (out, dom_grad) = clf.loss_and_grad(&feats, &batch.domains)?;
    let groups = group_by_domain(&out.embeddings, &batch.domains)?;
    let diversity = diversity_loss(&groups, sinkhorn)?;
    Ok(CopyResult {
        seg_loss,
        seg_grad,
        dom_loss: out.loss,
        dom_grad,
        diversity,
    })
}

/// Indices of a mini-batch with `batch_size` images split as evenly as
/// possible across domains (earlier domains take the remainder).
fn balanced_batch(sizes: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let k = sizes.len();
    let mut out = Vec::with_capacity(batch_size);
    for (d, &n) in sizes.iter().enumerate() {
        let want = batch_size / k + usize::from(d < batch_size % k);
        if want <= n {
            out.extend(sample(rng, n, want).into_iter().map(|i| (d, i)));
        } else {
            out.extend((0..want).map(|_| (d, rng.random_range(0..n))));
        }
    }
    out
}

fn check_sources(config: &SearchConfig, sources: &[&DomainData]) -> Result<()> {
    if sources.len() < 2 {
        return Err(Error::domain("the search needs K >= 2 source domains"));
    }
    if let Some(d) = sources.iter().find(|d| d.train.is_empty()) {
        return Err(Error::domain(format!("source domain {} has no training images", d.spec.domain_id)));
    }
    if config.batch_size < sources.len() {
        return Err(Error::config(
            "batch_size",
            format!("needs at least one image per source domain ({})", sources.len()),
        ));
    }
    Ok(())
}

/// The adversarial search loop with the learned controller.
pub fn run_search(config: &SearchConfig, sources: &[&DomainData]) -> Result<SearchOutcome> {
    run_mode(config, sources, &Mode::Aadg)
}

/// The same loop with uniformly drawn policies and no controller updates.
pub fn run_radg(config: &SearchConfig, sources: &[&DomainData]) -> Result<SearchOutcome> {
    run_mode(config, sources, &Mode::Radg)
}

pub fn run_mode(config: &SearchConfig, sources: &[&DomainData], mode: &Mode) -> Result<SearchOutcome> {
    let mut s = Searcher::new(config, sources)?;
    for _ in 0..config.e {
        s.run_epoch(mode)?;
    }
    Ok(s.finish(mode))
}

/// The loop state between epochs. `run_mode` drives it for `E` epochs; it can
/// also be stepped by hand, e.g. to train first and then score a forced policy.
#[derive(Clone)]
pub struct Searcher<'a> {
    config: SearchConfig,
    sources: Vec<&'a DomainData>,
    arch: ControllerArch,
    seg: SegModel,
    clf: DomainClassifier,
    controller: ControllerState,
    seg_opt: AdamState,
    clf_opt: AdamState,
    batch_rng: ChaCha8Rng,
    geo_rng: ChaCha8Rng,
    policy_rng: ChaCha8Rng,
    apply_rng: ChaCha8Rng,
    epochs: Vec<EpochRecord>,
}

impl<'a> Searcher<'a> {
    pub fn new(config: &SearchConfig, sources: &[&'a DomainData]) -> Result<Self> {
        config.validate()?;
        check_sources(config, sources)?;
        let k = sources.len();
        let seed = config.seed;
        let arch = config.controller_arch();
        let seg = SegModel::new(config.seg_arch(), stream(seed, STREAM_SEG_INIT).random())?;
        let clf = DomainClassifier::new(
            DomainArch {
                feature_dim: config.seg_widths[2],
                embed_dim: config.embed_dim,
                num_domains: k,
            },
            stream(seed, STREAM_CLF_INIT).random(),
        )?;
        let mut controller =
            ControllerState::new(arch.clone(), stream(seed, STREAM_CONTROLLER_INIT).random())?;
        controller.lr = config.lr_controller;
        controller.entropy_weight = config.entropy_weight;
        Ok(Self {
            config: config.clone(),
            sources: sources.to_vec(),
            arch,
            seg_opt: AdamState::new(seg.num_params()),
            clf_opt: AdamState::new(clf.num_params()),
            seg,
            clf,
            controller,
            batch_rng: stream(seed, STREAM_BATCHES),
            geo_rng: stream(seed, STREAM_GEOMETRY),
            policy_rng: stream(seed, STREAM_POLICIES),
            apply_rng: stream(seed, STREAM_APPLY),
            epochs: Vec::new(),
        })
    }

    pub fn seg(&self) -> &SegModel {
        &self.seg
    }

    pub fn classifier(&self) -> &DomainClassifier {
        &self.clf
    }

    pub fn controller(&self) -> &ControllerState {
        &self.controller
    }

    pub fn epochs(&self) -> &[EpochRecord] {
        &self.epochs
    }

    fn draw_policies(&mut self, mode: &Mode) -> Result<(Vec<Option<Policy>>, Vec<Option<SampleTrace>>)> {
        let b = self.config.b;
        Ok(match mode {
            Mode::Aadg => self
                .controller
                .sample_policies(b, &mut self.policy_rng)?
                .into_iter()
                .map(|(p, t)| (Some(p), Some(t)))
                .unzip(),
            Mode::Radg => (0..b)
                .map(|_| {
                    let toks = uniform_tokens(&self.arch, &mut self.policy_rng);
                    Ok((Some(tokens_to_policy(&self.arch, &toks)?), None))
                })
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .unzip(),
            Mode::Fixed(p) => {
                if p.resolution() != self.config.r {
                    return Err(Error::domain("forced policy resolution differs from config R"));
                }
                (vec![Some(p.clone()); b], vec![None; b])
            }
            Mode::Baseline => (vec![None], vec![None]),
        })
    }

    fn base_batch(&mut self) -> Result<Vec<(Image, usize)>> {
        let sizes: Vec<usize> = self.sources.iter().map(|d| d.train.len()).collect();
        let picks = balanced_batch(&sizes, self.config.batch_size, &mut self.batch_rng);
        picks
            .into_iter()
            .map(|(d, i)| {
                let img = &self.sources[d].train[i].image;
                let img = if self.config.default_augment {
                    geometric_augment(img, &mut self.geo_rng)?
                } else {
                    img.clone()
                };
                Ok((img, d))
            })
            .collect()
    }

    /// One epoch: `T` inner steps under freshly drawn policies, then the
    /// controller update (learned mode only).
    pub fn run_epoch(&mut self, mode: &Mode) -> Result<&EpochRecord> {
        let cfg = self.config.clone();
        let k = self.sources.len();
        let (policies, traces) = self.draw_policies(mode)?;
        let copies = policies.len();

        let mut rewards = vec![0.0; copies];
        let mut step_rewards = vec![Vec::with_capacity(cfg.t); copies];
        let (mut seg_loss_sum, mut dom_loss_sum) = (0.0, 0.0);
        let mut skipped = 0;
        for t in 1..=cfg.t {
            let base = self.base_batch()?;
            let domains: Vec<usize> = base.iter().map(|(_, d)| *d).collect();
            let step_seed = self.apply_rng.random::<u64>();
            let batches = policies
                .iter()
                .enumerate()
                .map(|(b, p)| {
                    let imgs: Vec<Image> = base
                        .iter()
                        .enumerate()
                        .map(|(i, (img, _))| match p {
                            Some(p) => {
                                let mut r = SplitMix64::for_item(step_seed, (b * base.len() + i) as u64);
                                apply_policy(img, p, &mut r).0
                            }
                            None => img.clone(),
                        })
                        .collect();
                    TrainBatch::from_images(&imgs, &domains, k)
                })
                .collect::<Result<Vec<_>>>()?;

            let (seg, clf) = (&self.seg, &self.clf);
            let results = batches
                .par_iter()
                .map(|batch| process_copy(seg, clf, batch, &cfg.sinkhorn))
                .collect::<Result<Vec<_>>>()?;

            let scale = 1.0 / copies as f64;
            let mut g_seg = vec![0.0; self.seg.num_params()];
            let mut g_clf = vec![0.0; self.clf.num_params()];
            let (mut ls, mut lc) = (0.0, 0.0);
            for (b, r) in results.iter().enumerate() {
                for (g, v) in g_seg.iter_mut().zip(&r.seg_grad) {
                    *g += v * scale;
                }
                for (g, v) in g_clf.iter_mut().zip(&r.dom_grad) {
                    *g += v * scale;
                }
                ls += r.seg_loss * scale;
                lc += r.dom_loss * scale;
                rewards[b] = update_running_reward(rewards[b], r.diversity, t);
                step_rewards[b].push(r.diversity);
            }
            if !cfg.freeze_classifier
                && sgd_step(self.clf.params_mut(), &g_clf, &mut self.clf_opt, cfg.lr_classifier)?
                    == StepOutcome::SkippedNonFinite
            {
                skipped += 1;
            }
            if sgd_step(self.seg.params_mut(), &g_seg, &mut self.seg_opt, cfg.lr_model)?
                == StepOutcome::SkippedNonFinite
            {
                skipped += 1;
            }
            seg_loss_sum += ls;
            dom_loss_sum += lc;
        }

        let normalized = if copies >= 2 {
            match mode {
                Mode::Aadg => {
                    let tr: Vec<SampleTrace> = traces.iter().map(|t| t.clone().expect("sampled")).collect();
                    match cfg.algorithm {
                        Algorithm::Reinforce => reinforce_update(&mut self.controller, &tr, &rewards)?,
                        Algorithm::Ppo => ppo_update(&mut self.controller, &tr, &rewards, cfg.ppo_clip)?,
                    }
                }
                _ => normalize_rewards(&rewards)?,
            }
        } else {
            vec![0.0; copies]
        };

        let (docs, tokens) = policies
            .iter()
            .map(|p| match p {
                Some(p) => (p.to_document(), policy_tokens(p)),
                None => (Policy::identity(cfg.r, 1, 1).expect("R validated").to_document(), Vec::new()),
            })
            .unzip();
        let log_probs = match mode {
            Mode::Aadg => Some(traces.iter().flatten().map(SampleTrace::log_prob).collect()),
            _ => None,
        };
        self.epochs.push(EpochRecord {
            epoch: self.epochs.len() + 1,
            policies: docs,
            tokens,
            log_probs,
            raw_rewards: rewards,
            normalized_rewards: normalized,
            step_rewards,
            mean_seg_loss: seg_loss_sum / cfg.t as f64,
            mean_domain_loss: dom_loss_sum / cfg.t as f64,
            skipped_updates: skipped,
        });
        Ok(self.epochs.last().expect("just pushed"))
    }

    /// Packs the models and the report. `mode` labels the report.
    pub fn finish(self, mode: &Mode) -> SearchOutcome {
        let has_policies = !matches!(mode, Mode::Baseline);
        let (best_policy, best_reward, final_policies) = match self.epochs.last() {
            Some(last) if has_policies => {
                let mut order: Vec<usize> = (0..last.raw_rewards.len()).collect();
                order.sort_by(|&a, &b| last.raw_rewards[b].total_cmp(&last.raw_rewards[a]));
                (
                    Some(last.policies[order[0]].clone()),
                    Some(last.raw_rewards[order[0]]),
                    order.iter().map(|&i| last.policies[i].clone()).collect(),
                )
            }
            _ => (None, None, Vec::new()),
        };
        let c = &self.config;
        let report = RunReport {
            format: REPORT_FORMAT.into(),
            version: REPORT_VERSION,
            mode: mode.name().into(),
            seed: c.seed,
            config: c.clone(),
            source_domains: self.sources.iter().map(|d| d.spec.domain_id).collect(),
            search_space_size: search_space_size(c.r, c.s as u32, c.l as u32).to_string(),
            epochs: self.epochs,
            best_policy,
            best_reward,
            final_policies,
            heldout: None,
        };
        SearchOutcome {
            seg: self.seg,
            classifier: self.clf,
            controller: self.controller,
            report,
        }
    }
}

/// Token sequence of a policy (operation index, level, ...).
pub fn policy_tokens(p: &Policy) -> Vec<usize> {
    p.subpolicies()
        .iter()
        .flat_map(|sp| sp.ops().iter().flat_map(|op| [op.kind().index(), op.level() as usize]))
        .collect()
}

/// Sigmoid probabilities of every pixel of every sample.
pub fn predict_scores(seg: &SegModel, samples: &[LabeledSample]) -> Result<Vec<Vec<f64>>> {
    samples
        .par_iter()
        .map(|s| seg.predict(&Tensor::from_image(&s.image)))
        .collect()
}

/// Trains with `mode` on the sources and scores the target's test split.
pub fn train_and_predict(
    config: &SearchConfig,
    mode: &Mode,
    sources: &[&DomainData],
    target: &DomainData,
) -> Result<Vec<Vec<f64>>> {
    let out = run_mode(config, sources, mode)?;
    predict_scores(&out.seg, &target.test)
}

/// Leave-one-domain-out table for one mode over every domain in `data`.
pub fn lodo_eval(config: &SearchConfig, data: &[DomainData], mode: &Mode) -> Result<MetricsTable> {
    leave_one_domain_out(data, |sources, target| train_and_predict(config, mode, sources, target))
}
