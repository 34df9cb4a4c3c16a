use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ot::EmbeddingBatch;

use super::layers::{global_avg_pool, l2_normalize, l2_normalize_backward, log_softmax, Dense};
use super::{check_param_count, init_uniform, seeded, Checkpoint, Tensor};

/// Domain decoder shape. Parameter layout: `embed` (`embed_dim x feature_dim`
/// weights, then biases) followed by `classify` (`num_domains x embed_dim`,
/// then biases).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainArch {
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub num_domains: usize,
}

/// Global average pool, dense to the embedding, unit normalisation, dense to
/// `K` logits.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainClassifier {
    arch: DomainArch,
    params: Vec<f64>,
}

/// Per-sample embeddings and the mean cross-entropy of a batch.
#[derive(Clone, Debug)]
pub struct DomainOutput {
    pub embeddings: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
    pub loss: f64,
}

impl DomainClassifier {
    pub fn new(arch: DomainArch, seed: u64) -> Result<Self> {
        if arch.feature_dim == 0 || arch.embed_dim == 0 {
            return Err(Error::domain("classifier widths must be positive"));
        }
        if arch.num_domains < 2 {
            return Err(Error::domain("a domain classifier needs K >= 2"));
        }
        let (embed, classify) = Self::layers(&arch);
        let mut params = vec![0.0; classify.end()];
        let mut rng = seeded(seed);
        init_uniform(
            &mut params[..embed.num_weights()],
            embed.inputs,
            &mut rng,
        );
        init_uniform(
            &mut params[classify.offset..classify.offset + classify.num_weights()],
            classify.inputs,
            &mut rng,
        );
        Ok(Self { arch, params })
    }

    fn layers(a: &DomainArch) -> (Dense, Dense) {
        let embed = Dense::new(a.feature_dim, a.embed_dim, 0);
        let classify = Dense::new(a.embed_dim, a.num_domains, embed.end());
        (embed, classify)
    }

    pub fn arch(&self) -> &DomainArch {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn pooled(&self, f: &Tensor) -> Result<Vec<f64>> {
        if f.c != self.arch.feature_dim {
            return Err(Error::domain(format!(
                "expected {} feature channels, got {}",
                self.arch.feature_dim, f.c
            )));
        }
        Ok(global_avg_pool(&f.data, f.c, f.hw()))
    }

    /// Unit-norm embedding of one feature map.
    pub fn embed(&self, f: &Tensor) -> Result<Vec<f64>> {
        let (embed, _) = Self::layers(&self.arch);
        let pre = embed.forward(&self.params, &self.pooled(f)?);
        Ok(l2_normalize(&pre).0)
    }

    fn check_labels(&self, features: &[Tensor], domains: &[usize]) -> Result<()> {
        if features.len() != domains.len() || features.is_empty() {
            return Err(Error::domain("features and domain codes differ in count"));
        }
        if domains.iter().any(|&d| d >= self.arch.num_domains) {
            return Err(Error::domain("domain code out of range"));
        }
        Ok(())
    }

    /// Mean softmax cross-entropy evaluated at `params`, with its gradient.
    pub fn loss_and_grad_at(
        &self,
        params: &[f64],
        features: &[Tensor],
        domains: &[usize],
    ) -> Result<(DomainOutput, Vec<f64>)> {
        self.check_labels(features, domains)?;
        check_param_count(params.len(), self.params.len())?;
        let (embed, classify) = Self::layers(&self.arch);
        let scale = 1.0 / features.len() as f64;
        let mut grads = vec![0.0; params.len()];
        let mut out = DomainOutput {
            embeddings: Vec::with_capacity(features.len()),
            logits: Vec::with_capacity(features.len()),
            loss: 0.0,
        };
        for (f, &d) in features.iter().zip(domains) {
            let pooled = self.pooled(f)?;
            let pre = embed.forward(params, &pooled);
            let (unit, norm) = l2_normalize(&pre);
            let logits = classify.forward(params, &unit);
            let logp = log_softmax(&logits);
            out.loss -= logp[d] * scale;
            let mut g_logits: Vec<f64> = logp.iter().map(|l| l.exp() * scale).collect();
            g_logits[d] -= scale;
            let g_unit = classify.backward(params, &unit, &g_logits, &mut grads);
            let g_pre = l2_normalize_backward(&unit, norm, &g_unit);
            embed.backward(params, &pooled, &g_pre, &mut grads);
            out.embeddings.push(unit);
            out.logits.push(logits);
        }
        Ok((out, grads))
    }

    pub fn loss_and_grad(
        &self,
        features: &[Tensor],
        domains: &[usize],
    ) -> Result<(DomainOutput, Vec<f64>)> {
        self.loss_and_grad_at(&self.params, features, domains)
    }

    /// Forward pass only.
    pub fn evaluate(&self, features: &[Tensor], domains: &[usize]) -> Result<DomainOutput> {
        self.check_labels(features, domains)?;
        let (embed, classify) = Self::layers(&self.arch);
        let mut out = DomainOutput {
            embeddings: Vec::with_capacity(features.len()),
            logits: Vec::with_capacity(features.len()),
            loss: 0.0,
        };
        for (f, &d) in features.iter().zip(domains) {
            let unit = l2_normalize(&embed.forward(&self.params, &self.pooled(f)?)).0;
            let logits = classify.forward(&self.params, &unit);
            out.loss -= log_softmax(&logits)[d] / features.len() as f64;
            out.embeddings.push(unit);
            out.logits.push(logits);
        }
        Ok(out)
    }

    pub fn checkpoint(&self) -> Checkpoint<DomainArch> {
        Checkpoint::new("domain_classifier", self.arch, self.params.clone())
    }

    pub fn from_checkpoint(ck: Checkpoint<DomainArch>) -> Result<Self> {
        let fresh = Self::new(ck.architecture, 0)?;
        check_param_count(ck.params.len(), fresh.params.len())?;
        Ok(Self {
            arch: ck.architecture,
            params: ck.params,
        })
    }
}

/// Groups embeddings by domain of origin, ascending by domain id.
pub fn group_by_domain(embeddings: &[Vec<f64>], domains: &[usize]) -> Result<Vec<EmbeddingBatch>> {
    let mut ids: Vec<usize> = domains.to_vec();
    ids.sort_unstable();
    ids.dedup();
    ids.into_iter()
        .map(|d| {
            let vs = embeddings
                .iter()
                .zip(domains)
                .filter(|(_, &o)| o == d)
                .map(|(v, _)| v.clone())
                .collect();
            EmbeddingBatch::new(vs, d)
        })
        .collect()
}

/// Embeddings per domain plus the mean cross-entropy against one-hot codes `z`.
pub fn domain_embed_and_loss(
    classifier: &DomainClassifier,
    features: &[Tensor],
    z: &[Vec<f64>],
) -> Result<(Vec<EmbeddingBatch>, f64)> {
    let domains = z
        .iter()
        .map(|row| {
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || zeros + 1 != row.len() || row.len() != classifier.arch.num_domains {
                return Err(Error::domain("domain codes must be one-hot over K"));
            }
            Ok(row.iter().position(|&v| v == 1.0).unwrap())
        })
        .collect::<Result<Vec<_>>>()?;
    let out = classifier.evaluate(features, &domains)?;
    Ok((group_by_domain(&out.embeddings, &domains)?, out.loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{grad_check, sgd_step, AdamState};
    use rand::Rng;

    fn arch(k: usize) -> DomainArch {
        DomainArch {
            feature_dim: 8,
            embed_dim: 6,
            num_domains: k,
        }
    }

    fn random_features(seed: u64, n: usize) -> Vec<Tensor> {
        let mut rng = seeded(seed);
        (0..n)
            .map(|_| {
                let data = (0..8 * 4).map(|_| rng.random::<f64>()).collect();
                Tensor::new(8, 2, 2, data).unwrap()
            })
            .collect()
    }

    fn one_hot(d: &[usize], k: usize) -> Vec<Vec<f64>> {
        d.iter()
            .map(|&i| (0..k).map(|j| if j == i { 1.0 } else { 0.0 }).collect())
            .collect()
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let mut c = DomainClassifier::new(arch(3), 1).unwrap();
        let (_, classify) = DomainClassifier::layers(c.arch());
        c.params_mut()[classify.offset..].fill(0.0);
        let f = random_features(2, 4);
        let (_, loss) = domain_embed_and_loss(&c, &f, &one_hot(&[0, 1, 2, 1], 3)).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_class_gives_zero_loss() {
        let mut c = DomainClassifier::new(arch(2), 1).unwrap();
        let (_, classify) = DomainClassifier::layers(c.arch());
        let p = c.params_mut();
        p[classify.offset..].fill(0.0);
        // Bias of class 0 dominates.
        p[classify.offset + classify.num_weights()] = 800.0;
        let f = random_features(3, 2);
        let (_, loss) = domain_embed_and_loss(&c, &f, &one_hot(&[0, 0], 2)).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn embeddings_are_unit_norm_and_grouped() {
        let c = DomainClassifier::new(arch(3), 5).unwrap();
        let f = random_features(6, 6);
        let (b, _) = domain_embed_and_loss(&c, &f, &one_hot(&[2, 0, 2, 0, 1, 1], 3)).unwrap();
        assert_eq!(b.iter().map(|x| x.domain()).collect::<Vec<_>>(), vec![0, 1, 2]);
        for batch in &b {
            assert_eq!(batch.len(), 2);
            for i in 0..batch.len() {
                let n: f64 = batch.vector(i).iter().map(|v| v * v).sum();
                assert!((n.sqrt() - 1.0).abs() < 1e-6);
            }
        }
        assert!(domain_embed_and_loss(&c, &f[..1], &[vec![0.5, 0.5, 0.0]]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let c = DomainClassifier::new(arch(3), 9).unwrap();
        let f = random_features(10, 5);
        let d = [0, 1, 2, 0, 1];
        let err = grad_check(
            |p| {
                let (o, g) = c.loss_and_grad_at(p, &f, &d).unwrap();
                (o.loss, g)
            },
            c.params(),
            1e-6,
            60,
            2,
        );
        assert!(err < 1e-3, "relative error {err}");
    }

    #[test]
    fn separable_toy_reaches_full_accuracy() {
        let mut c = DomainClassifier::new(arch(2), 12).unwrap();
        let mut rng = seeded(13);
        let mut f = Vec::new();
        let mut d = Vec::new();
        for i in 0..20 {
            let dom = i % 2;
            let data = (0..32)
                .map(|j| {
                    let shift = if (j / 4) % 2 == dom { 1.0 } else { 0.0 };
                    shift + 0.3 * rng.random::<f64>()
                })
                .collect();
            f.push(Tensor::new(8, 2, 2, data).unwrap());
            d.push(dom);
        }
        let mut st = AdamState::new(c.num_params());
        for _ in 0..200 {
            let (_, g) = c.loss_and_grad(&f, &d).unwrap();
            sgd_step(c.params_mut(), &g, &mut st, 1e-2).unwrap();
        }
        let out = c.evaluate(&f, &d).unwrap();
        let correct = out
            .logits
            .iter()
            .zip(&d)
            .filter(|(l, &y)| (l[1] > l[0]) as usize == y)
            .count();
        assert_eq!(correct, 20);
    }
}
