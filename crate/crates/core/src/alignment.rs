//! Entropic optimal transport between sample and rule embeddings, and the
//! calibrated pseudo-labels derived from per-sample transport costs.

use serde::{Deserialize, Serialize};

use crate::embedding::EncoderPair;
use crate::error::{Error, Result};
use crate::numeric::{sigmoid, Matrix};
use crate::rules::RuleSet;

/// `C_ij = |s_i - r_j|^2`, computed coordinate-wise so entries are never negative.
pub fn cost_matrix(samples: &Matrix, rules: &Matrix) -> Result<Matrix> {
    if samples.cols() != rules.cols() {
        return Err(Error::shape("cost matrix embedding width", samples.cols(), rules.cols()));
    }
    let mut c = Matrix::zeros(samples.rows(), rules.rows());
    for i in 0..samples.rows() {
        let s = samples.row(i);
        for j in 0..rules.rows() {
            let d: f64 = s.iter().zip(rules.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            c.set(i, j, d);
        }
    }
    if !c.all_finite() {
        return Err(Error::NonFinite("cost matrix".into()));
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornResult {
    pub plan: Matrix,
    pub converged: bool,
    pub iterations: usize,
    /// Largest absolute marginal violation of the returned plan.
    pub max_violation: f64,
    pub log_domain: bool,
    pub epsilon: f64,
}

fn validate_marginal(m: &[f64], name: &str) -> Result<()> {
    if m.is_empty() || m.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Invalid(format!("marginal {name} must be non-empty and strictly positive")));
    }
    let s: f64 = m.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!("marginal {name} sums to {s}, expected 1")));
    }
    Ok(())
}

fn violation(plan: &Matrix, a: &[f64], b: &[f64]) -> f64 {
    let rows = plan.row_sums();
    let cols = plan.column_sums();
    let r = rows.iter().zip(a).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let c = cols.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    r.max(c)
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Scaling iterations on `K = exp(-C / eps)`. Switches to log-domain
/// potentials when `eps < 0.05 * max(C)` or when the kernel underflows.
/// Non-convergence is reported through `converged`, not an error.
pub fn sinkhorn(c: &Matrix, epsilon: f64, a: &[f64], b: &[f64], max_iters: usize, tol: f64) -> Result<SinkhornResult> {
    let (n, r) = c.shape();
    if a.len() != n || b.len() != r {
        return Err(Error::shape("sinkhorn marginals", format!("{n} and {r}"), format!("{} and {}", a.len(), b.len())));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Invalid(format!("sinkhorn epsilon must be positive, got {epsilon}")));
    }
    validate_marginal(a, "a")?;
    validate_marginal(b, "b")?;
    if !c.all_finite() {
        return Err(Error::NonFinite("sinkhorn cost matrix".into()));
    }
    let cmax = c.as_slice().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if epsilon >= 0.05 * cmax {
        if let Some(res) = sinkhorn_scaling(c, epsilon, a, b, max_iters, tol) {
            return Ok(res);
        }
    }
    Ok(sinkhorn_log(c, epsilon, a, b, max_iters, tol))
}

/// Returns `None` when the kernel or a scaling vector leaves the float range.
fn sinkhorn_scaling(c: &Matrix, eps: f64, a: &[f64], b: &[f64], max_iters: usize, tol: f64) -> Option<SinkhornResult> {
    let (n, r) = c.shape();
    let cmin = c.as_slice().iter().cloned().fold(f64::INFINITY, f64::min);
    // shifting C by a constant rescales K uniformly and leaves the plan unchanged
    let mut k = c.clone();
    for v in k.as_mut_slice() {
        *v = (-(*v - cmin) / eps).exp();
    }
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; r];
    let build = |u: &[f64], v: &[f64]| {
        let mut t = k.clone();
        for i in 0..n {
            for (j, x) in t.row_mut(i).iter_mut().enumerate() {
                *x *= u[i] * v[j];
            }
        }
        t
    };
    let mut iterations = 0;
    let mut viol = f64::INFINITY;
    while iterations < max_iters {
        iterations += 1;
        for i in 0..n {
            let kv: f64 = k.row(i).iter().zip(&v).map(|(x, y)| x * y).sum();
            u[i] = a[i] / kv;
        }
        let mut ktu = vec![0.0; r];
        for i in 0..n {
            for (j, x) in k.row(i).iter().enumerate() {
                ktu[j] += x * u[i];
            }
        }
        for j in 0..r {
            v[j] = b[j] / ktu[j];
        }
        if u.iter().chain(&v).any(|x| !x.is_finite() || *x == 0.0) {
            return None;
        }
        // columns are exact after the v update, so only rows can violate
        viol = (0..n)
            .map(|i| {
                let s: f64 = k.row(i).iter().zip(&v).map(|(x, y)| x * y).sum::<f64>() * u[i];
                (s - a[i]).abs()
            })
            .fold(0.0, f64::max);
        if viol < tol {
            break;
        }
    }
    let plan = build(&u, &v);
    if !plan.all_finite() {
        return None;
    }
    let max_violation = violation(&plan, a, b).max(viol.min(f64::MAX));
    Some(SinkhornResult {
        converged: max_violation < tol,
        max_violation,
        plan,
        iterations,
        log_domain: false,
        epsilon: eps,
    })
}

fn sinkhorn_log(c: &Matrix, eps: f64, a: &[f64], b: &[f64], max_iters: usize, tol: f64) -> SinkhornResult {
    let (n, r) = c.shape();
    let la: Vec<f64> = a.iter().map(|x| x.ln()).collect();
    let lb: Vec<f64> = b.iter().map(|x| x.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; r];
    let plan_of = |f: &[f64], g: &[f64]| {
        let mut t = Matrix::zeros(n, r);
        for i in 0..n {
            for j in 0..r {
                t.set(i, j, ((f[i] + g[j] - c.get(i, j)) / eps).exp());
            }
        }
        t
    };
    let mut iterations = 0;
    let mut viol = f64::INFINITY;
    while iterations < max_iters {
        iterations += 1;
        for i in 0..n {
            let row = c.row(i);
            f[i] = eps * la[i] - eps * log_sum_exp(row.iter().zip(&g).map(|(cij, gj)| (gj - cij) / eps));
        }
        for j in 0..r {
            g[j] = eps * lb[j] - eps * log_sum_exp((0..n).map(|i| (f[i] - c.get(i, j)) / eps));
        }
        viol = (0..n)
            .map(|i| {
                let row = c.row(i);
                let s = log_sum_exp(row.iter().zip(&g).map(|(cij, gj)| (f[i] + gj - cij) / eps)).exp();
                (s - a[i]).abs()
            })
            .fold(0.0, f64::max);
        if viol < tol {
            break;
        }
    }
    let plan = plan_of(&f, &g);
    let max_violation = violation(&plan, a, b).max(viol);
    SinkhornResult {
        converged: max_violation < tol,
        max_violation,
        plan,
        iterations,
        log_domain: true,
        epsilon: eps,
    }
}

/// `c_i = sum_j T_ij C_ij / sum_j T_ij`.
pub fn transport_cost(plan: &Matrix, c: &Matrix) -> Result<Vec<f64>> {
    if plan.shape() != c.shape() {
        return Err(Error::shape(
            "transport cost",
            format!("{:?}", c.shape()),
            format!("{:?}", plan.shape()),
        ));
    }
    (0..plan.rows())
        .map(|i| {
            let t = plan.row(i);
            let mass: f64 = t.iter().sum();
            if !(mass > 0.0) {
                return Err(Error::NonFinite(format!("transport plan row {i} has zero mass")));
            }
            Ok(t.iter().zip(c.row(i)).map(|(x, y)| x * y).sum::<f64>() / mass)
        })
        .collect()
}

/// Running mean and standard deviation of transport costs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationState {
    pub mean: f64,
    pub std: f64,
    pub momentum: f64,
    pub initialized: bool,
}

impl CalibrationState {
    pub fn new(momentum: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::Invalid(format!("calibration momentum must be in (0,1), got {momentum}")));
        }
        Ok(Self {
            mean: 0.0,
            std: 0.0,
            momentum,
            initialized: false,
        })
    }

    /// First batch sets the statistics, later batches blend in with weight `1 - momentum`.
    pub fn update(&mut self, costs: &[f64]) -> Result<()> {
        if costs.is_empty() {
            return Err(Error::Invalid("calibration update with an empty batch".into()));
        }
        let n = costs.len() as f64;
        let mean = costs.iter().sum::<f64>() / n;
        let std = (costs.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / n).sqrt();
        if self.initialized {
            let rho = self.momentum;
            self.mean = rho * self.mean + (1.0 - rho) * mean;
            self.std = rho * self.std + (1.0 - rho) * std;
        } else {
            self.mean = mean;
            self.std = std;
            self.initialized = true;
        }
        Ok(())
    }
}

/// `sigmoid((mean - c_i) / (tau * std + eps))`.
pub fn pseudo_labels(costs: &[f64], state: &CalibrationState, tau: f64, eps: f64) -> Result<Vec<f64>> {
    if !state.initialized {
        return Err(Error::Contract("pseudo-labels need an initialized calibration state".into()));
    }
    if !(tau > 0.0 && eps > 0.0) {
        return Err(Error::Invalid(format!("need tau > 0 and eps > 0, got tau={tau}, eps={eps}")));
    }
    let denom = tau * state.std + eps;
    Ok(costs.iter().map(|c| sigmoid((state.mean - c) / denom)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignmentConfig {
    /// Per-batch `eps_s = epsilon_factor * median(C)`.
    pub epsilon_factor: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub tau: f64,
    pub eps: f64,
    pub momentum: f64,
    /// Column marginal proportional to `max(w_j, weight_floor)` instead of uniform.
    pub weighted_marginals: bool,
    pub weight_floor: f64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            epsilon_factor: 0.05,
            max_iters: 500,
            tol: 1e-9,
            tau: 1.0,
            eps: 1e-6,
            momentum: 0.99,
            weighted_marginals: false,
            weight_floor: 0.05,
        }
    }
}

/// `factor * median(C)`, falling back to `factor * max(C)` and then 1 when
/// those are zero.
pub fn default_epsilon(c: &Matrix, factor: f64) -> f64 {
    let mut v = c.as_slice().to_vec();
    if v.is_empty() {
        return 1.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
    let max = v[n - 1];
    [factor * median, factor * max, 1.0].into_iter().find(|e| *e > 0.0).expect("1.0 is positive")
}

/// Transport costs for one batch, with the solver diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchCosts {
    pub costs: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub epsilon: f64,
}

/// Frozen encoders plus precomputed rule embeddings and marginals.
#[derive(Debug, Clone)]
pub struct Aligner {
    encoders: EncoderPair,
    rule_embeds: Matrix,
    b: Vec<f64>,
    pub config: AlignmentConfig,
}

impl Aligner {
    pub fn new(encoders: EncoderPair, ruleset: &RuleSet, config: AlignmentConfig) -> Result<Self> {
        encoders.check_ruleset(ruleset)?;
        let rule_embeds = encoders.rule_encoder.encode_all(ruleset)?;
        let b = if config.weighted_marginals {
            let w: Vec<f64> = ruleset.weights().iter().map(|w| w.max(config.weight_floor)).collect();
            let s: f64 = w.iter().sum();
            if !(s > 0.0) {
                return Err(Error::Invalid("weighted marginals need a positive weight floor or weights".into()));
            }
            w.iter().map(|x| x / s).collect()
        } else {
            vec![1.0 / ruleset.len() as f64; ruleset.len()]
        };
        Ok(Self {
            encoders,
            rule_embeds,
            b,
            config,
        })
    }

    pub fn encoders(&self) -> &EncoderPair {
        &self.encoders
    }

    pub fn rule_embeddings(&self) -> &Matrix {
        &self.rule_embeds
    }

    pub fn input_dim(&self) -> usize {
        self.encoders.sample_encoder.input_dim()
    }

    pub fn batch_costs(&self, features: &Matrix) -> Result<BatchCosts> {
        let n = features.rows();
        if n == 0 {
            return Err(Error::Invalid("cannot align an empty batch".into()));
        }
        let emb = self.encoders.sample_encoder.encode(features)?;
        let c = cost_matrix(&emb, &self.rule_embeds)?;
        let epsilon = default_epsilon(&c, self.config.epsilon_factor);
        let a = vec![1.0 / n as f64; n];
        let res = sinkhorn(&c, epsilon, &a, &self.b, self.config.max_iters, self.config.tol)?;
        if !res.converged {
            log::debug!(
                "sinkhorn stopped after {} iterations with violation {:.3e}",
                res.iterations,
                res.max_violation
            );
        }
        Ok(BatchCosts {
            costs: transport_cost(&res.plan, &c)?,
            converged: res.converged,
            iterations: res.iterations,
            epsilon,
        })
    }

    /// Costs over all rows, calibrated in one pass from their own statistics.
    pub fn one_pass_labels(&self, features: &Matrix) -> Result<(Vec<f64>, Vec<f64>, CalibrationState)> {
        let bc = self.batch_costs(features)?;
        let mut state = CalibrationState::new(self.config.momentum)?;
        state.update(&bc.costs)?;
        let labels = pseudo_labels(&bc.costs, &state, self.config.tau, self.config.eps)?;
        Ok((bc.costs, labels, state))
    }
}
