//! Alternating pretraining of the two encoders on a fixed triplet set.
//!
//! Epoch `e` (0-based) updates the sample encoder when `e` is even and the
//! rule encoder when `e` is odd; the frozen encoder is bitwise unchanged.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::triplets::{gen_synthetic_triplets, triplet_loss_grads, TripletConfig, TripletSet};
use super::{EncoderPair, RuleEncoder, SampleEncoder};
use crate::error::{Error, Result};
use crate::features::FeatureLayout;
use crate::numeric::{Matrix, Optimizer, SeededRng};
use crate::rules::{Rule, RuleSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub rule_hidden: Vec<usize>,
    pub sample_hidden: Vec<usize>,
    pub margin: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub holdout_fraction: f64,
    pub triplets: TripletConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            embed_dim: 16,
            rule_hidden: vec![64],
            sample_hidden: vec![128, 64],
            margin: 1.0,
            learning_rate: 1e-3,
            batch_size: 256,
            epochs: 50,
            holdout_fraction: 0.1,
            triplets: TripletConfig::default(),
            seed: 0,
        }
    }
}

impl PretrainConfig {
    fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.embed_dim == 0 || self.batch_size == 0 {
            return Err(Error::Invalid("latent_dim, embed_dim and batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Invalid(format!(
                "holdout_fraction must be in [0, 1), got {}",
                self.holdout_fraction
            )));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::Invalid(format!("margin must be finite and >= 0, got {}", self.margin)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdatedEncoder {
    Sample,
    Rule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub updated: UpdatedEncoder,
    pub mean_loss: f64,
    pub heldout_loss: f64,
    pub heldout_separation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutcome {
    pub encoders: EncoderPair,
    pub history: Vec<EpochRecord>,
    pub initial_separation: f64,
    pub train_triplets: usize,
    pub heldout_triplets: usize,
}

struct BatchPass {
    loss_sum: f64,
    separated: usize,
    rule_grad: Matrix,
    sample_grad: Matrix,
    rule_cache: crate::numeric::ForwardCache,
    sample_cache: crate::numeric::ForwardCache,
}

/// Forward pass over a batch with per-row loss gradients scaled by `scale`.
fn batch_pass(
    re: &RuleEncoder,
    se: &SampleEncoder,
    rules: &[&Rule],
    weights: &[f64],
    batch: &TripletSet,
    margin: f64,
    scale: f64,
) -> Result<BatchPass> {
    let b = batch.len();
    let (er, rule_cache) = re.forward(rules)?;
    let stacked = batch.positives.vstack(&batch.negatives)?;
    let (es, sample_cache) = se.mlp.forward(&stacked)?;
    let l = er.cols();
    let mut rule_grad = Matrix::zeros(b, l);
    let mut sample_grad = Matrix::zeros(2 * b, l);
    let mut loss_sum = 0.0;
    let mut separated = 0;
    for k in 0..b {
        let (r, p, n) = (er.row(k), es.row(k), es.row(b + k));
        let (loss, gr, gp, gn) = triplet_loss_grads(r, p, n, weights[k], margin)?;
        let dp: f64 = p.iter().zip(r).map(|(x, y)| (x - y) * (x - y)).sum();
        let dn: f64 = n.iter().zip(r).map(|(x, y)| (x - y) * (x - y)).sum();
        if dp < dn {
            separated += 1;
        }
        loss_sum += loss;
        for (a, g) in rule_grad.row_mut(k).iter_mut().zip(&gr) {
            *a = g * scale;
        }
        for (a, g) in sample_grad.row_mut(k).iter_mut().zip(&gp) {
            *a = g * scale;
        }
        for (a, g) in sample_grad.row_mut(b + k).iter_mut().zip(&gn) {
            *a = g * scale;
        }
    }
    Ok(BatchPass {
        loss_sum,
        separated,
        rule_grad,
        sample_grad,
        rule_cache,
        sample_cache,
    })
}

fn batch_rules<'a>(ruleset: &'a RuleSet, t: &TripletSet) -> (Vec<&'a Rule>, Vec<f64>) {
    let rules: Vec<&Rule> = t.rules.iter().map(|&j| ruleset.get(j)).collect();
    let weights = rules.iter().map(|r| r.weight).collect();
    (rules, weights)
}

/// Mean weighted triplet loss and fraction with `d+ < d-` over a triplet set.
fn evaluate(pair: (&RuleEncoder, &SampleEncoder), ruleset: &RuleSet, t: &TripletSet, margin: f64) -> Result<(f64, f64)> {
    if t.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let (rules, weights) = batch_rules(ruleset, t);
    let pass = batch_pass(pair.0, pair.1, &rules, &weights, t, margin, 0.0)?;
    let n = t.len() as f64;
    Ok((pass.loss_sum / n, pass.separated as f64 / n))
}

/// Fraction of triplets whose satisfying sample embeds closer to the rule
/// embedding than the violating one (squared Euclidean distance).
pub fn separation_rate(encoders: &EncoderPair, ruleset: &RuleSet, triplets: &TripletSet) -> Result<f64> {
    Ok(evaluate((&encoders.rule_encoder, &encoders.sample_encoder), ruleset, triplets, 0.0)?.1)
}

pub fn pretrain(ruleset: &RuleSet, layout: FeatureLayout, config: &PretrainConfig) -> Result<PretrainOutcome> {
    config.validate()?;
    let mut init_rng = SeededRng::for_stage(config.seed, "pretrain.init");
    let mut re = RuleEncoder::new(
        ruleset.vocabulary().len(),
        config.embed_dim,
        &config.rule_hidden,
        config.latent_dim,
        &mut init_rng,
    )?;
    let width = ruleset.len() * layout.width_per_rule();
    let mut se = SampleEncoder::new(width, &config.sample_hidden, config.latent_dim, &mut init_rng)?;

    let mut trip_rng = SeededRng::for_stage(config.seed, "pretrain.triplets");
    let all = gen_synthetic_triplets(ruleset, layout.width_per_rule(), &config.triplets, &mut trip_rng)?;
    let n = all.len();
    let held = ((n as f64 * config.holdout_fraction).round() as usize).min(n.saturating_sub(1));
    let train_idx: Vec<usize> = (0..n - held).collect();
    let heldout = all.select(&(n - held..n).collect::<Vec<_>>());

    let (_, initial_separation) = evaluate((&re, &se), ruleset, &heldout, config.margin)?;
    let mut opt_se = Optimizer::adam(config.learning_rate)?;
    let mut opt_re = Optimizer::adam(config.learning_rate)?;
    let mut shuffle_rng = SeededRng::for_stage(config.seed, "pretrain.shuffle");
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let updated = if epoch % 2 == 0 {
            UpdatedEncoder::Sample
        } else {
            UpdatedEncoder::Rule
        };
        let mut order = train_idx.clone();
        order.shuffle(&mut shuffle_rng);
        let mut loss_total = 0.0;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = all.select(chunk);
            let (rules, weights) = batch_rules(ruleset, &batch);
            let pass = batch_pass(&re, &se, &rules, &weights, &batch, config.margin, 1.0 / chunk.len() as f64)?;
            if !pass.loss_sum.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite triplet loss at epoch {epoch}, batch {bi}"
                )));
            }
            loss_total += pass.loss_sum;
            match updated {
                UpdatedEncoder::Sample => {
                    let (grads, _) = se.mlp.backward(&pass.sample_cache, &pass.sample_grad)?;
                    opt_se.step(&mut se.mlp.param_groups(&grads, "sample_encoder"))?;
                }
                UpdatedEncoder::Rule => {
                    let grads = re.backward(&rules, &pass.rule_cache, &pass.rule_grad)?;
                    opt_re.step(&mut re.param_groups(&grads))?;
                }
            }
        }
        let (heldout_loss, heldout_separation) = evaluate((&re, &se), ruleset, &heldout, config.margin)?;
        let record = EpochRecord {
            epoch,
            updated,
            mean_loss: loss_total / train_idx.len().max(1) as f64,
            heldout_loss,
            heldout_separation,
        };
        log::debug!("pretrain {record:?}");
        history.push(record);
    }

    Ok(PretrainOutcome {
        encoders: EncoderPair {
            ruleset_fingerprint: ruleset.fingerprint(),
            rule_encoder: re,
            sample_encoder: se,
        },
        history,
        initial_separation,
        train_triplets: train_idx.len(),
        heldout_triplets: held,
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::numeric::grad_check;
    use crate::rules::{DrugVocabulary, NamedRule};

    fn toy_ruleset(r: usize) -> RuleSet {
        let names: Vec<String> = (0..12).map(|i| format!("D{i}")).collect();
        let vocab = Arc::new(DrugVocabulary::from_names(&names).unwrap());
        let mut named = Vec::new();
        let mut k = 0;
        'outer: for p in 0..12 {
            for q in 0..12 {
                if p != q && (p + q) % 3 == 0 {
                    named.push(NamedRule::binary(&names[p], &names[q], 0.2 + 0.04 * k as f64));
                    k += 1;
                    if named.len() == r {
                        break 'outer;
                    }
                }
            }
        }
        RuleSet::from_named(&named, vocab).unwrap()
    }

    fn small_config(epochs: usize) -> PretrainConfig {
        PretrainConfig {
            latent_dim: 4,
            embed_dim: 3,
            rule_hidden: vec![6],
            sample_hidden: vec![8],
            batch_size: 16,
            epochs,
            triplets: TripletConfig {
                count: 64,
                ..Default::default()
            },
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initial_encoders() {
        let rs = toy_ruleset(3);
        let a = pretrain(&rs, FeatureLayout::Full, &small_config(0)).unwrap();
        assert!(a.history.is_empty());
        let mut rng = SeededRng::for_stage(5, "pretrain.init");
        let re = RuleEncoder::new(12, 3, &[6], 4, &mut rng).unwrap();
        assert_eq!(a.encoders.rule_encoder, re);
    }

    #[test]
    fn alternation_freezes_the_other_encoder() {
        let rs = toy_ruleset(3);
        let e0 = pretrain(&rs, FeatureLayout::Full, &small_config(0)).unwrap().encoders;
        let e1 = pretrain(&rs, FeatureLayout::Full, &small_config(1)).unwrap().encoders;
        let e2 = pretrain(&rs, FeatureLayout::Full, &small_config(2)).unwrap().encoders;
        assert_eq!(e0.rule_encoder, e1.rule_encoder);
        assert_ne!(e0.sample_encoder, e1.sample_encoder);
        assert_eq!(e1.sample_encoder, e2.sample_encoder);
        assert_ne!(e1.rule_encoder, e2.rule_encoder);
    }

    #[test]
    fn deterministic_parameter_files() {
        let rs = toy_ruleset(4);
        let a = pretrain(&rs, FeatureLayout::Full, &small_config(3)).unwrap();
        let b = pretrain(&rs, FeatureLayout::Full, &small_config(3)).unwrap();
        assert_eq!(a.encoders.to_json().unwrap(), b.encoders.to_json().unwrap());
    }

    #[test]
    fn batch_gradients_match_finite_differences() {
        let rs = toy_ruleset(3);
        let cfg = small_config(0);
        let mut rng = SeededRng::new(9);
        let re = RuleEncoder::new(12, 3, &[6], 4, &mut rng).unwrap();
        let se = SampleEncoder::new(45, &[8], 4, &mut rng).unwrap();
        let t = gen_synthetic_triplets(&rs, 15, &TripletConfig { count: 6, ..Default::default() }, &mut rng).unwrap();
        let (rules, weights) = batch_rules(&rs, &t);
        let margin = 5.0; // keeps every hinge active
        let scale = 1.0 / t.len() as f64;

        let se_base = se.clone();
        let f = |flat: &[f64]| {
            let mut s = se_base.clone();
            s.mlp.set_flat(flat).unwrap();
            let pass = batch_pass(&re, &s, &rules, &weights, &t, margin, scale).unwrap();
            let (g, _) = s.mlp.backward(&pass.sample_cache, &pass.sample_grad).unwrap();
            (pass.loss_sum * scale, g.flatten())
        };
        let rep = grad_check(f, &se.mlp.flatten(), 1e-5);
        assert!(rep.pass, "sample encoder {rep:?}");

        let re_base = re.clone();
        let f = |flat: &[f64]| {
            let mut r = re_base.clone();
            r.set_flat(flat).unwrap();
            let pass = batch_pass(&r, &se, &rules, &weights, &t, margin, scale).unwrap();
            let g = r.backward(&rules, &pass.rule_cache, &pass.rule_grad).unwrap();
            (pass.loss_sum * scale, g.flatten())
        };
        let rep = grad_check(f, &re.flatten(), 1e-5);
        assert!(rep.pass, "rule encoder {rep:?}");
        drop(cfg);
    }

    #[test]
    fn toy_ruleset_separates_heldout_triplets() {
        let rs = toy_ruleset(20);
        let out = pretrain(&rs, FeatureLayout::Full, &PretrainConfig { seed: 1, ..Default::default() }).unwrap();
        let last = out.history.last().unwrap();
        assert!(last.heldout_separation >= 0.90, "{last:?}");
        assert!(out.history.iter().all(|h| h.mean_loss.is_finite()));
    }
}
