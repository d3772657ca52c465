//! Synthetic (rule, satisfying, violating) triplets and the weighted
//! hinge loss on squared distances.

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Matrix;
use crate::rules::RuleSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TripletConfig {
    pub count: usize,
    /// Standard deviation of background coordinates.
    pub noise_sigma: f64,
    pub band_lo: f64,
    pub band_hi: f64,
    /// Sampling weight floor so low-weight rules still appear.
    pub weight_floor: f64,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            count: 20_000,
            noise_sigma: 0.1,
            band_lo: 0.5,
            band_hi: 1.0,
            weight_floor: 0.05,
        }
    }
}

/// Triplets stored column-aligned: row `k` of `positives` and `negatives`
/// belongs to rule `rules[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletSet {
    pub rules: Vec<usize>,
    pub positives: Matrix,
    pub negatives: Matrix,
    /// Columns owned by each rule.
    pub block_width: usize,
}

impl TripletSet {
    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> TripletSet {
        TripletSet {
            rules: idx.iter().map(|&i| self.rules[i]).collect(),
            positives: self.positives.select_rows(idx),
            negatives: self.negatives.select_rows(idx),
            block_width: self.block_width,
        }
    }
}

/// Draws `config.count` triplets. Each picks rule `j` with probability
/// proportional to `max(w_j, weight_floor)`; background coordinates are
/// clipped normal noise and the rule-`j` block is `U[lo, hi]` for the
/// satisfying sample and `U[-hi, -lo]` for the violating one.
pub fn gen_synthetic_triplets<R: Rng + ?Sized>(
    ruleset: &RuleSet,
    block_width: usize,
    config: &TripletConfig,
    rng: &mut R,
) -> Result<TripletSet> {
    let r = ruleset.len();
    if r == 0 {
        return Err(Error::Invalid("cannot generate triplets for an empty rule set".into()));
    }
    if config.count < r {
        return Err(Error::Invalid(format!(
            "triplet count {} is below the rule count {r}",
            config.count
        )));
    }
    if !(0.0 < config.band_lo && config.band_lo < config.band_hi && config.band_hi <= 1.0) {
        return Err(Error::Invalid(format!(
            "triplet band must satisfy 0 < lo < hi <= 1, got [{}, {}]",
            config.band_lo, config.band_hi
        )));
    }
    if !(config.noise_sigma >= 0.0 && config.noise_sigma.is_finite()) || block_width == 0 {
        return Err(Error::Invalid("noise sigma must be finite and >= 0, block width > 0".into()));
    }
    let weights: Vec<f64> = ruleset.weights().iter().map(|w| w.max(config.weight_floor)).collect();
    let picker = WeightedIndex::new(&weights)
        .map_err(|e| Error::Invalid(format!("rule sampling weights: {e}")))?;
    let noise = Normal::new(0.0, config.noise_sigma).expect("validated sigma");
    let band = Uniform::new_inclusive(config.band_lo, config.band_hi).expect("validated band");
    let width = r * block_width;
    let mut rules = Vec::with_capacity(config.count);
    let mut pos = Vec::with_capacity(config.count * width);
    let mut neg = Vec::with_capacity(config.count * width);
    let fill = |out: &mut Vec<f64>, j: usize, sign: f64, rng: &mut R| {
        let start = out.len();
        out.extend((0..width).map(|_| {
            if config.noise_sigma == 0.0 {
                0.0
            } else {
                noise.sample(rng).clamp(-1.0, 1.0)
            }
        }));
        for v in &mut out[start + j * block_width..start + (j + 1) * block_width] {
            *v = sign * band.sample(rng);
        }
    };
    for _ in 0..config.count {
        let j = picker.sample(rng);
        rules.push(j);
        fill(&mut pos, j, 1.0, rng);
        fill(&mut neg, j, -1.0, rng);
    }
    Ok(TripletSet {
        positives: Matrix::from_vec(config.count, width, pos)?,
        negatives: Matrix::from_vec(config.count, width, neg)?,
        rules,
        block_width,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check(e_r: &[f64], e_plus: &[f64], e_minus: &[f64], w: f64, margin: f64) -> Result<()> {
    if e_plus.len() != e_r.len() || e_minus.len() != e_r.len() {
        return Err(Error::shape(
            "triplet loss embeddings",
            e_r.len(),
            format!("{} / {}", e_plus.len(), e_minus.len()),
        ));
    }
    if !(0.0..=1.0).contains(&w) || !(margin >= 0.0) {
        return Err(Error::Invalid(format!("need w in [0,1] and m >= 0, got w={w}, m={margin}")));
    }
    Ok(())
}

/// `w * max(0, |e+ - r|^2 - |e- - r|^2 + m)`.
pub fn triplet_loss(e_r: &[f64], e_plus: &[f64], e_minus: &[f64], w: f64, margin: f64) -> Result<f64> {
    check(e_r, e_plus, e_minus, w, margin)?;
    let h = sq_dist(e_plus, e_r) - sq_dist(e_minus, e_r) + margin;
    Ok(w * h.max(0.0))
}

/// Loss together with its gradients `(d/de_r, d/de+, d/de-)`. Gradients are
/// zero where the hinge is inactive.
#[allow(clippy::type_complexity)]
pub fn triplet_loss_grads(
    e_r: &[f64],
    e_plus: &[f64],
    e_minus: &[f64],
    w: f64,
    margin: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>, Vec<f64>)> {
    let loss = triplet_loss(e_r, e_plus, e_minus, w, margin)?;
    let n = e_r.len();
    let (mut gr, mut gp, mut gn) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    if loss > 0.0 {
        for k in 0..n {
            gp[k] = 2.0 * w * (e_plus[k] - e_r[k]);
            gn[k] = -2.0 * w * (e_minus[k] - e_r[k]);
            gr[k] = 2.0 * w * (e_minus[k] - e_plus[k]);
        }
    }
    Ok((loss, gr, gp, gn))
}
