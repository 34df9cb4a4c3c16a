//! Recurrent policy controller.
//!
//! A single-layer LSTM emits `2·L` tokens per sub-policy (operation, then
//! magnitude level, repeated `L` times) for `S` sub-policies, carrying its
//! state across the whole policy. The previous token's embedding is the next
//! input; the first input is a learned start vector. Both heads shape their
//! raw logits as `tanh_constant · tanh(raw / temperature)` before the softmax.
//!
//! Parameter layout (flat vector, row-major blocks in this order):
//! `embedding [(10+R) x E]`, `start [E]`, `w_x [4H x E]`, `w_h [4H x H]`,
//! `b [4H]` (gate order input, forget, cell, output), `op_w [10 x H]`,
//! `op_b [10]`, `mag_w [R x H]`, `mag_b [R]`. Operation tokens embed at rows
//! `0..10`, magnitude tokens at `10 + level`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{check_param_count, seeded, sgd_step, AdamState, Checkpoint};
use crate::transform::{OpKind, Operation, Policy, SubPolicy};

pub const NUM_OPS: usize = 10;

/// Guard added to the population standard deviation of rewards.
pub const REWARD_STD_GUARD: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerArch {
    pub hidden: usize,
    pub embed: usize,
    pub resolution: u32,
    pub subpolicies: usize,
    pub ops_per_subpolicy: usize,
    pub tanh_constant: f64,
    pub temperature: f64,
    /// Operations the controller may emit; the others get zero probability.
    pub ops: Vec<OpKind>,
}

impl Default for ControllerArch {
    fn default() -> Self {
        Self {
            hidden: 100,
            embed: 32,
            resolution: 10,
            subpolicies: 5,
            ops_per_subpolicy: 2,
            tanh_constant: 2.5,
            temperature: 2.0,
            ops: OpKind::ALL.to_vec(),
        }
    }
}

impl ControllerArch {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.embed == 0 {
            return Err(Error::domain("controller widths must be positive"));
        }
        if self.resolution < 2 {
            return Err(Error::domain("magnitude resolution R must be at least 2"));
        }
        if self.subpolicies == 0 || self.ops_per_subpolicy == 0 {
            return Err(Error::domain("S and L must be positive"));
        }
        if !(self.tanh_constant > 0.0 && self.temperature > 0.0) {
            return Err(Error::domain("tanh constant and temperature must be positive"));
        }
        if self.ops.is_empty() {
            return Err(Error::domain("the operation set is empty"));
        }
        Ok(())
    }

    pub fn trace_len(&self) -> usize {
        2 * self.subpolicies * self.ops_per_subpolicy
    }

    fn op_allowed(&self) -> [bool; NUM_OPS] {
        let mut m = [false; NUM_OPS];
        for op in &self.ops {
            m[op.index()] = true;
        }
        m
    }
}

#[derive(Clone, Copy, Debug)]
struct Layout {
    h: usize,
    e: usize,
    r: usize,
    emb: usize,
    start: usize,
    wx: usize,
    wh: usize,
    b: usize,
    op_w: usize,
    op_b: usize,
    mag_w: usize,
    mag_b: usize,
    len: usize,
}

impl Layout {
    fn new(a: &ControllerArch) -> Self {
        let (h, e, r) = (a.hidden, a.embed, a.resolution as usize);
        let emb = 0;
        let start = emb + (NUM_OPS + r) * e;
        let wx = start + e;
        let wh = wx + 4 * h * e;
        let b = wh + 4 * h * h;
        let op_w = b + 4 * h;
        let op_b = op_w + NUM_OPS * h;
        let mag_w = op_b + NUM_OPS;
        let mag_b = mag_w + r * h;
        let len = mag_b + r;
        Self {
            h,
            e,
            r,
            emb,
            start,
            wx,
            wh,
            b,
            op_w,
            op_b,
            mag_w,
            mag_b,
            len,
        }
    }
}

/// Tokens of one sampled policy with their log-probabilities and entropies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleTrace {
    /// Alternating operation index (`OpKind::index`) and magnitude level.
    pub tokens: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub entropies: Vec<f64>,
}

impl SampleTrace {
    pub fn log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }

    pub fn to_policy(&self, arch: &ControllerArch) -> Result<Policy> {
        if self.tokens.len() != arch.trace_len() {
            return Err(Error::domain("trace length does not match S and L"));
        }
        let subs = self
            .tokens
            .chunks(2 * arch.ops_per_subpolicy)
            .map(|chunk| {
                let ops = chunk
                    .chunks(2)
                    .map(|pair| {
                        let kind = OpKind::from_index(pair[0])
                            .ok_or_else(|| Error::domain("operation token out of range"))?;
                        Operation::new(kind, pair[1] as u32, arch.resolution)
                    })
                    .collect::<Result<Vec<_>>>()?;
                SubPolicy::new(ops)
            })
            .collect::<Result<Vec<_>>>()?;
        Policy::new(arch.resolution, subs)
    }
}

/// Cached activations of one LSTM step and its head.
struct Step {
    input_row: Option<usize>,
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Post-activation gates `i, f, g, o`.
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
    h: Vec<f64>,
    c: Vec<f64>,
    raw: Vec<f64>,
    probs: Vec<f64>,
    logp: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    crate::nets::layers::sigmoid(x)
}

/// Controller parameters, architecture and optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct ControllerState {
    arch: ControllerArch,
    params: Vec<f64>,
    adam: AdamState,
    pub lr: f64,
    pub entropy_weight: f64,
}

impl ControllerState {
    /// LSTM and embedding weights `U(-0.1, 0.1)`, zero LSTM biases and zero
    /// heads, so the first samples are uniform over the allowed tokens.
    pub fn new(arch: ControllerArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let lay = Layout::new(&arch);
        let mut params = vec![0.0; lay.len];
        let mut rng = seeded(seed);
        for p in &mut params[..lay.b] {
            *p = rng.random_range(-0.1..0.1);
        }
        Ok(Self {
            arch,
            adam: AdamState::new(lay.len),
            params,
            lr: 3.5e-4,
            entropy_weight: 1e-5,
        })
    }

    pub fn arch(&self) -> &ControllerArch {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn optimizer(&self) -> &AdamState {
        &self.adam
    }

    fn step(&self, p: &[f64], lay: &Layout, input_row: Option<usize>, h_prev: &[f64], c_prev: &[f64], mag: bool) -> Step {
        let (h, e) = (lay.h, lay.e);
        let x = match input_row {
            None => p[lay.start..lay.start + e].to_vec(),
            Some(r) => p[lay.emb + r * e..lay.emb + (r + 1) * e].to_vec(),
        };
        let mut pre = p[lay.b..lay.b + 4 * h].to_vec();
        for (k, v) in pre.iter_mut().enumerate() {
            let wx = &p[lay.wx + k * e..lay.wx + (k + 1) * e];
            let wh = &p[lay.wh + k * h..lay.wh + (k + 1) * h];
            *v += dot(wx, &x) + dot(wh, h_prev);
        }
        let mut gates = pre;
        for k in 0..h {
            gates[k] = sigmoid(gates[k]);
            gates[h + k] = sigmoid(gates[h + k]);
            gates[2 * h + k] = gates[2 * h + k].tanh();
            gates[3 * h + k] = sigmoid(gates[3 * h + k]);
        }
        let mut c = vec![0.0; h];
        let mut tanh_c = vec![0.0; h];
        let mut hn = vec![0.0; h];
        for k in 0..h {
            c[k] = gates[h + k] * c_prev[k] + gates[k] * gates[2 * h + k];
            tanh_c[k] = c[k].tanh();
            hn[k] = gates[3 * h + k] * tanh_c[k];
        }
        let (w, b, n) = if mag {
            (lay.mag_w, lay.mag_b, lay.r)
        } else {
            (lay.op_w, lay.op_b, NUM_OPS)
        };
        let raw: Vec<f64> = (0..n)
            .map(|j| p[b + j] + dot(&p[w + j * h..w + (j + 1) * h], &hn))
            .collect();
        let allowed = self.arch.op_allowed();
        let shaped: Vec<f64> = raw
            .iter()
            .enumerate()
            .map(|(j, &z)| {
                if !mag && !allowed[j] {
                    f64::NEG_INFINITY
                } else {
                    self.arch.tanh_constant * (z / self.arch.temperature).tanh()
                }
            })
            .collect();
        let max = shaped.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + shaped.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        let logp: Vec<f64> = shaped.iter().map(|s| s - lse).collect();
        let probs = logp.iter().map(|l| l.exp()).collect();
        Step {
            input_row,
            x,
            h_prev: h_prev.to_vec(),
            c_prev: c_prev.to_vec(),
            gates,
            tanh_c,
            h: hn,
            c,
            raw,
            probs,
            logp,
        }
    }

    /// Runs the LSTM over `tokens`; when `pick` is given it chooses each
    /// token (sampling), otherwise the supplied tokens are replayed.
    fn unroll<F>(&self, p: &[f64], len: usize, mut pick: F) -> (Vec<Step>, Vec<usize>)
    where
        F: FnMut(usize, &[f64]) -> usize,
    {
        let lay = Layout::new(&self.arch);
        let mut h = vec![0.0; lay.h];
        let mut c = vec![0.0; lay.h];
        let mut input = None;
        let mut steps = Vec::with_capacity(len);
        let mut tokens = Vec::with_capacity(len);
        for t in 0..len {
            let mag = t % 2 == 1;
            let st = self.step(p, &lay, input, &h, &c, mag);
            let tok = pick(t, &st.probs);
            input = Some(if mag { NUM_OPS + tok } else { tok });
            h.clone_from(&st.h);
            c.clone_from(&st.c);
            tokens.push(tok);
            steps.push(st);
        }
        (steps, tokens)
    }

    fn trace_from_steps(steps: &[Step], tokens: Vec<usize>) -> SampleTrace {
        let log_probs = steps.iter().zip(&tokens).map(|(s, &t)| s.logp[t]).collect();
        let entropies = steps.iter().map(entropy).collect();
        SampleTrace {
            tokens,
            log_probs,
            entropies,
        }
    }

    /// Draws one autoregressive rollout.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SampleTrace {
        let (steps, tokens) = self.unroll(&self.params, self.arch.trace_len(), |_, probs| {
            categorical(probs, rng.random::<f64>())
        });
        Self::trace_from_steps(&steps, tokens)
    }

    /// `b` independent rollouts with their decoded policies.
    pub fn sample_policies<R: Rng + ?Sized>(
        &self,
        b: usize,
        rng: &mut R,
    ) -> Result<Vec<(Policy, SampleTrace)>> {
        if b == 0 {
            return Err(Error::domain("B must be at least 1"));
        }
        (0..b)
            .map(|_| {
                let tr = self.sample(rng);
                Ok((tr.to_policy(&self.arch)?, tr))
            })
            .collect()
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.len() != self.arch.trace_len() {
            return Err(Error::domain("trace length does not match S and L"));
        }
        let allowed = self.arch.op_allowed();
        for (t, &tok) in tokens.iter().enumerate() {
            let ok = if t % 2 == 1 {
                tok < self.arch.resolution as usize
            } else {
                tok < NUM_OPS && allowed[tok]
            };
            if !ok {
                return Err(Error::domain(format!("token {tok} at position {t} is not in the action space")));
            }
        }
        Ok(())
    }

    /// Replays `tokens` under `params`, returning log-probabilities and entropies.
    pub fn evaluate_at(&self, params: &[f64], tokens: &[usize]) -> Result<SampleTrace> {
        self.check_tokens(tokens)?;
        check_param_count(params.len(), self.params.len())?;
        let (steps, toks) = self.unroll(params, tokens.len(), |t, _| tokens[t]);
        Ok(Self::trace_from_steps(&steps, toks))
    }

    pub fn evaluate(&self, tokens: &[usize]) -> Result<SampleTrace> {
        self.evaluate_at(&self.params, tokens)
    }

    /// Gradient of `Σ_t coeff_t · log p_t + entropy_coeff · Σ_t H_t` for one
    /// token sequence, accumulated into `grads`.
    fn accumulate_grad(
        &self,
        p: &[f64],
        tokens: &[usize],
        coeffs: &[f64],
        entropy_coeff: f64,
        grads: &mut [f64],
    ) {
        let lay = Layout::new(&self.arch);
        let (h, e) = (lay.h, lay.e);
        let (steps, _) = self.unroll(p, tokens.len(), |t, _| tokens[t]);
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        let (tc, temp) = (self.arch.tanh_constant, self.arch.temperature);
        for t in (0..steps.len()).rev() {
            let st = &steps[t];
            let mag = t % 2 == 1;
            let ent = entropy(st);
            // d objective / d shaped logit
            let dshaped: Vec<f64> = st
                .probs
                .iter()
                .enumerate()
                .map(|(j, &pj)| {
                    let onehot = if j == tokens[t] { 1.0 } else { 0.0 };
                    let mut g = coeffs[t] * (onehot - pj);
                    if pj > 0.0 {
                        g -= entropy_coeff * pj * (st.logp[j] + ent);
                    }
                    g
                })
                .collect();
            let (w, b) = if mag {
                (lay.mag_w, lay.mag_b)
            } else {
                (lay.op_w, lay.op_b)
            };
            let mut dh = dh_next.clone();
            for (j, &ds) in dshaped.iter().enumerate() {
                if st.probs[j] == 0.0 {
                    continue;
                }
                let th = (st.raw[j] / temp).tanh();
                let draw = ds * tc * (1.0 - th * th) / temp;
                grads[b + j] += draw;
                let row = w + j * h;
                for k in 0..h {
                    grads[row + k] += draw * st.h[k];
                    dh[k] += draw * p[row + k];
                }
            }
            // LSTM cell backward.
            let mut dpre = vec![0.0; 4 * h];
            let mut dc_prev = vec![0.0; h];
            for k in 0..h {
                let (i, f, g, o) = (
                    st.gates[k],
                    st.gates[h + k],
                    st.gates[2 * h + k],
                    st.gates[3 * h + k],
                );
                let dc = dc_next[k] + dh[k] * o * (1.0 - st.tanh_c[k] * st.tanh_c[k]);
                dpre[3 * h + k] = dh[k] * st.tanh_c[k] * o * (1.0 - o);
                dpre[k] = dc * g * i * (1.0 - i);
                dpre[h + k] = dc * st.c_prev[k] * f * (1.0 - f);
                dpre[2 * h + k] = dc * i * (1.0 - g * g);
                dc_prev[k] = dc * f;
            }
            let mut dx = vec![0.0; e];
            let mut dh_prev = vec![0.0; h];
            for (r, &d) in dpre.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                grads[lay.b + r] += d;
                let wx = lay.wx + r * e;
                for k in 0..e {
                    grads[wx + k] += d * st.x[k];
                    dx[k] += d * p[wx + k];
                }
                let wh = lay.wh + r * h;
                for k in 0..h {
                    grads[wh + k] += d * st.h_prev[k];
                    dh_prev[k] += d * p[wh + k];
                }
            }
            let base = match st.input_row {
                None => lay.start,
                Some(row) => lay.emb + row * e,
            };
            for k in 0..e {
                grads[base + k] += dx[k];
            }
            dh_next = dh_prev;
            dc_next = dc_prev;
        }
    }

    /// Gradient of `log p(tokens)` at `params`.
    pub fn log_prob_grad_at(&self, params: &[f64], tokens: &[usize]) -> Result<(f64, Vec<f64>)> {
        let tr = self.evaluate_at(params, tokens)?;
        let mut g = vec![0.0; params.len()];
        self.accumulate_grad(params, tokens, &vec![1.0; tokens.len()], 0.0, &mut g);
        Ok((tr.log_prob(), g))
    }

    /// Gradient of `Σ_b Σ_t coeffs[b][t] · log p_{b,t} + w · mean_{b,t} H_{b,t}`.
    pub fn objective_grad(
        &self,
        traces: &[SampleTrace],
        coeffs: &[Vec<f64>],
        entropy_weight: f64,
    ) -> Result<Vec<f64>> {
        let total: usize = traces.iter().map(|t| t.tokens.len()).sum();
        let mut g = vec![0.0; self.params.len()];
        for (tr, c) in traces.iter().zip(coeffs) {
            self.check_tokens(&tr.tokens)?;
            self.accumulate_grad(&self.params, &tr.tokens, c, entropy_weight / total as f64, &mut g);
        }
        Ok(g)
    }

    fn ascend(&mut self, grad_objective: &[f64]) -> Result<()> {
        let neg: Vec<f64> = grad_objective.iter().map(|g| -g).collect();
        let lr = self.lr;
        sgd_step(&mut self.params, &neg, &mut self.adam, lr)?;
        Ok(())
    }

    /// Probability of every (operation, level) pair at the first position of
    /// the first sub-policy, indexed `[op][level]`.
    pub fn first_pair_distribution(&self) -> Vec<Vec<f64>> {
        let lay = Layout::new(&self.arch);
        let zero = vec![0.0; lay.h];
        let first = self.step(&self.params, &lay, None, &zero, &zero, false);
        (0..NUM_OPS)
            .map(|op| {
                if first.probs[op] == 0.0 {
                    return vec![0.0; lay.r];
                }
                let second = self.step(&self.params, &lay, Some(op), &first.h, &first.c, true);
                second.probs.iter().map(|q| q * first.probs[op]).collect()
            })
            .collect()
    }

    /// Most probable first (operation, level) pair.
    pub fn modal_first_pair(&self) -> (OpKind, u32) {
        let dist = self.first_pair_distribution();
        let mut best = (0, 0, f64::NEG_INFINITY);
        for (op, row) in dist.iter().enumerate() {
            for (lv, &p) in row.iter().enumerate() {
                if p > best.2 {
                    best = (op, lv, p);
                }
            }
        }
        (OpKind::from_index(best.0).unwrap(), best.1 as u32)
    }

    pub fn checkpoint(&self) -> Checkpoint<ControllerArch> {
        Checkpoint::new("controller", self.arch.clone(), self.params.clone())
    }

    pub fn from_checkpoint(ck: Checkpoint<ControllerArch>) -> Result<Self> {
        let mut st = Self::new(ck.architecture, 0)?;
        check_param_count(ck.params.len(), st.params.len())?;
        st.params = ck.params;
        Ok(st)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn entropy(st: &Step) -> f64 {
    st.probs
        .iter()
        .zip(&st.logp)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, l)| -p * l)
        .sum()
}

/// Inverse-CDF draw; `u` in `[0, 1)`.
fn categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Standardizes rewards to zero mean and unit population variance.
///
/// All-equal rewards map to zeros. Fewer than two rewards is a domain error.
pub fn normalize_rewards(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::domain("reward normalization needs at least two samples"));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::domain("non-finite reward"));
    }
    if rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt() + REWARD_STD_GUARD;
    Ok(rewards.iter().map(|r| (r - mean) / sd).collect())
}

fn check_rollouts(traces: &[SampleTrace], rewards: &[f64]) -> Result<()> {
    if traces.len() != rewards.len() {
        return Err(Error::domain("one reward per trace is required"));
    }
    if traces.len() < 2 {
        return Err(Error::domain("policy updates need B >= 2 rollouts"));
    }
    Ok(())
}

/// Normalized-reward policy gradient step. Returns the normalized rewards.
pub fn reinforce_update(
    state: &mut ControllerState,
    traces: &[SampleTrace],
    rewards: &[f64],
) -> Result<Vec<f64>> {
    check_rollouts(traces, rewards)?;
    let adv = normalize_rewards(rewards)?;
    let coeffs: Vec<Vec<f64>> = traces
        .iter()
        .zip(&adv)
        .map(|(t, &a)| vec![a; t.tokens.len()])
        .collect();
    let g = state.objective_grad(traces, &coeffs, state.entropy_weight)?;
    state.ascend(&g)?;
    Ok(adv)
}

/// Derivative coefficient of the clipped surrogate
/// `min(r·A, clip(r, 1-ε, 1+ε)·A)` with respect to `log p`.
pub fn ppo_token_coeff(advantage: f64, ratio: f64, clip: f64) -> f64 {
    let clipped = (advantage > 0.0 && ratio > 1.0 + clip) || (advantage < 0.0 && ratio < 1.0 - clip);
    if clipped {
        0.0
    } else {
        advantage * ratio
    }
}

/// Per-token coefficients of the clipped surrogate for the current parameters.
pub fn ppo_coefficients(
    state: &ControllerState,
    traces: &[SampleTrace],
    advantages: &[f64],
    clip: f64,
) -> Result<Vec<Vec<f64>>> {
    traces
        .iter()
        .zip(advantages)
        .map(|(tr, &a)| {
            let now = state.evaluate(&tr.tokens)?;
            Ok(now
                .log_probs
                .iter()
                .zip(&tr.log_probs)
                .map(|(n, old)| ppo_token_coeff(a, (n - old).exp(), clip))
                .collect())
        })
        .collect()
}

/// One epoch of the clipped-surrogate objective. Returns the normalized rewards.
pub fn ppo_update(
    state: &mut ControllerState,
    traces: &[SampleTrace],
    rewards: &[f64],
    clip: f64,
) -> Result<Vec<f64>> {
    if !(clip > 0.0) {
        return Err(Error::domain("PPO clip must be positive"));
    }
    check_rollouts(traces, rewards)?;
    let adv = normalize_rewards(rewards)?;
    let coeffs = ppo_coefficients(state, traces, &adv, clip)?;
    let g = state.objective_grad(traces, &coeffs, state.entropy_weight)?;
    state.ascend(&g)?;
    Ok(adv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::grad_check;

    fn mini() -> ControllerArch {
        ControllerArch {
            hidden: 4,
            embed: 3,
            resolution: 5,
            subpolicies: 2,
            ops_per_subpolicy: 2,
            ..ControllerArch::default()
        }
    }

    fn randomized(arch: ControllerArch, seed: u64) -> ControllerState {
        let mut st = ControllerState::new(arch, seed).unwrap();
        let mut rng = seeded(seed + 1000);
        for p in st.params_mut() {
            *p = rng.random_range(-0.8..0.8);
        }
        st
    }

    #[test]
    fn default_trace_has_twenty_tokens() {
        let st = ControllerState::new(ControllerArch::default(), 1).unwrap();
        let mut rng = seeded(2);
        let out = st.sample_policies(3, &mut rng).unwrap();
        for (p, t) in &out {
            assert_eq!(t.tokens.len(), 20);
            assert_eq!(p.num_subpolicies(), 5);
            assert_eq!(p.subpolicy_len(), 2);
            assert!(t.log_probs.iter().all(|&l| l <= 0.0));
        }
        assert!(st.sample_policies(0, &mut rng).is_err());
    }

    #[test]
    fn log_prob_matches_replay() {
        let st = randomized(mini(), 3);
        let mut rng = seeded(4);
        let tr = st.sample(&mut rng);
        let replay = st.evaluate(&tr.tokens).unwrap();
        assert_eq!(replay, tr);
    }

    #[test]
    fn shaping_keeps_probabilities_off_the_boundary() {
        let mut st = ControllerState::new(mini(), 5).unwrap();
        let mut rng = seeded(5);
        for p in st.params_mut() {
            *p = rng.random_range(-50.0..50.0);
        }
        let tr = st.sample(&mut seeded(6));
        // Shaped logits span at most 5 nats, so p >= e^-5 / n.
        let floor = (-5.0f64).exp() / NUM_OPS as f64;
        for &l in &tr.log_probs {
            assert!(l < 0.0 && l.exp() >= floor, "{l}");
        }
    }

    #[test]
    fn log_prob_gradient_matches_finite_differences() {
        for draw in 0..5 {
            let st = randomized(mini(), 10 + draw);
            let tr = st.sample(&mut seeded(draw));
            let err = grad_check(
                |p| st.log_prob_grad_at(p, &tr.tokens).unwrap(),
                st.params(),
                1e-6,
                60,
                draw,
            );
            assert!(err < 1e-3, "draw {draw}: {err}");
        }
    }

    #[test]
    fn entropy_gradient_matches_finite_differences() {
        let st = randomized(mini(), 21);
        let tr = st.sample(&mut seeded(22));
        let err = grad_check(
            |p| {
                let e = st.evaluate_at(p, &tr.tokens).unwrap();
                let mut g = vec![0.0; p.len()];
                let coeffs = vec![0.0; tr.tokens.len()];
                st.accumulate_grad(p, &tr.tokens, &coeffs, 1.0, &mut g);
                (e.entropies.iter().sum(), g)
            },
            st.params(),
            1e-6,
            60,
            23,
        );
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn reward_normalization_examples() {
        let n = normalize_rewards(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert!((n[0] + 1.4638501).abs() < 1e-6);
        assert_eq!(normalize_rewards(&[2.0; 6]).unwrap(), vec![0.0; 6]);
        assert!(normalize_rewards(&[1.0]).is_err());
    }

    #[test]
    fn equal_rewards_move_only_through_entropy() {
        let mut st = randomized(mini(), 30);
        st.entropy_weight = 0.0;
        let mut rng = seeded(31);
        let traces: Vec<_> = (0..4).map(|_| st.sample(&mut rng)).collect();
        let before = st.params().to_vec();
        reinforce_update(&mut st, &traces, &[0.7; 4]).unwrap();
        assert_eq!(st.params(), &before[..]);
    }

    #[test]
    fn dominant_reward_raises_its_probability() {
        let mut st = randomized(mini(), 40);
        st.lr = 1e-3;
        let mut rng = seeded(41);
        let traces: Vec<_> = (0..6).map(|_| st.sample(&mut rng)).collect();
        let before = st.evaluate(&traces[2].tokens).unwrap().log_prob();
        reinforce_update(&mut st, &traces, &[0.0, 0.0, 10.0, 0.0, 0.0, 0.0]).unwrap();
        let after = st.evaluate(&traces[2].tokens).unwrap().log_prob();
        assert!(after > before, "{after} <= {before}");
    }

    #[test]
    fn ppo_at_ratio_one_equals_reinforce() {
        let st = randomized(mini(), 50);
        let mut rng = seeded(51);
        let traces: Vec<_> = (0..6).map(|_| st.sample(&mut rng)).collect();
        let rewards = [0.3, 1.2, -0.4, 2.0, 0.0, 0.9];
        let mut a = st.clone();
        let mut b = st.clone();
        reinforce_update(&mut a, &traces, &rewards).unwrap();
        ppo_update(&mut b, &traces, &rewards, 0.2).unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn clipped_token_contributes_nothing() {
        assert_eq!(ppo_token_coeff(1.0, 1.3, 0.2), 0.0);
        assert_eq!(ppo_token_coeff(-1.0, 0.7, 0.2), 0.0);
        assert_eq!(ppo_token_coeff(1.0, 1.1, 0.2), 1.1);
        assert_eq!(ppo_token_coeff(-1.0, 1.3, 0.2), -1.3);
    }

    #[test]
    fn too_few_rollouts_is_an_error() {
        let mut st = ControllerState::new(mini(), 1).unwrap();
        let tr = st.sample(&mut seeded(1));
        assert!(reinforce_update(&mut st, &[tr.clone()], &[1.0]).is_err());
        assert!(ppo_update(&mut st, &[tr], &[1.0], 0.2).is_err());
    }

    #[test]
    fn restricted_op_set_is_respected() {
        let arch = ControllerArch {
            ops: vec![OpKind::Invert],
            ..mini()
        };
        let st = randomized(arch, 60);
        let tr = st.sample(&mut seeded(61));
        for t in (0..tr.tokens.len()).step_by(2) {
            assert_eq!(tr.tokens[t], OpKind::Invert.index());
            assert_eq!(tr.log_probs[t], 0.0);
        }
        let dist = st.first_pair_distribution();
        let total: f64 = dist.iter().flatten().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let st = randomized(mini(), 70);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        st.checkpoint().save(&path).unwrap();
        let back = ControllerState::from_checkpoint(Checkpoint::load(&path, "controller").unwrap()).unwrap();
        assert_eq!(back.params(), st.params());
        assert_eq!(back.arch(), st.arch());
    }
}
