//! Sigmoid-output MLP detector trained on labeled BCE plus a weighted BCE
//! against OT pseudo-labels.

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{pseudo_labels, Aligner, CalibrationState};
use crate::error::{Error, Result};
use crate::evaluation::descending_order;
use crate::numeric::{Activation, Matrix, Mlp, Optimizer, SeededRng};

pub const DETECTOR_FORMAT_VERSION: u32 = 1;
pub const PROB_CLAMP: f64 = 1e-7;

fn clamp_prob(s: f64) -> f64 {
    s.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

fn bce(s: f64, y: f64) -> f64 {
    let s = clamp_prob(s);
    -(y * s.ln() + (1.0 - y) * (1.0 - s).ln())
}

/// Derivative of the clamped BCE with respect to the raw score; zero where
/// the clamp is active.
fn bce_grad(s: f64, y: f64) -> f64 {
    if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&s) {
        0.0
    } else {
        (s - y) / (s * (1.0 - s))
    }
}

/// Mean BCE over labeled entries; rows with `None` are ignored.
pub fn supervised_loss(scores: &[f64], labels: &[Option<bool>]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("supervised loss", scores.len(), labels.len()));
    }
    let (sum, n) = scores
        .iter()
        .zip(labels)
        .filter_map(|(&s, y)| y.map(|y| bce(s, y as u8 as f64)))
        .fold((0.0, 0usize), |(a, n), l| (a + l, n + 1));
    if n == 0 {
        return Err(Error::UndefinedMetric("supervised loss over an empty labeled set".into()));
    }
    Ok(sum / n as f64)
}

/// Gradient of [`supervised_loss`] with respect to each score.
pub fn supervised_loss_grad(scores: &[f64], labels: &[Option<bool>]) -> Result<Vec<f64>> {
    if scores.len() != labels.len() {
        return Err(Error::shape("supervised loss", scores.len(), labels.len()));
    }
    let n = labels.iter().filter(|y| y.is_some()).count();
    if n == 0 {
        return Err(Error::UndefinedMetric("supervised loss over an empty labeled set".into()));
    }
    Ok(scores
        .iter()
        .zip(labels)
        .map(|(&s, y)| y.map_or(0.0, |y| bce_grad(s, y as u8 as f64) / n as f64))
        .collect())
}

/// Mean BCE against soft targets in `[0, 1]`.
pub fn alignment_loss(scores: &[f64], targets: &[f64]) -> Result<f64> {
    if scores.len() != targets.len() {
        return Err(Error::shape("alignment loss", scores.len(), targets.len()));
    }
    if scores.is_empty() {
        return Ok(0.0);
    }
    Ok(scores.iter().zip(targets).map(|(&s, &y)| bce(s, y)).sum::<f64>() / scores.len() as f64)
}

pub fn alignment_loss_grad(scores: &[f64], targets: &[f64]) -> Result<Vec<f64>> {
    if scores.len() != targets.len() {
        return Err(Error::shape("alignment loss", scores.len(), targets.len()));
    }
    let n = scores.len() as f64;
    Ok(scores.iter().zip(targets).map(|(&s, &y)| bce_grad(s, y) / n).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub hidden: Vec<usize>,
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 32],
            lambda: 0.5,
            epochs: 30,
            batch_size: 256,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl DetectorConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Invalid(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub output: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub mlp: Mlp,
    pub lambda: f64,
    pub seed: u64,
    pub encoder_fingerprint: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct DetectorFile {
    format_version: u32,
    input_width: usize,
    architecture: Architecture,
    weights: Mlp,
    lambda: f64,
    seed: u64,
    encoder_fingerprint: Option<String>,
}

impl Detector {
    pub fn init(input_width: usize, config: &DetectorConfig) -> Result<Self> {
        let mut dims = vec![input_width];
        dims.extend_from_slice(&config.hidden);
        dims.push(1);
        let mut rng = SeededRng::for_stage(config.seed, "detector.init");
        Ok(Self {
            mlp: Mlp::new(&dims, Activation::Relu, Activation::Sigmoid, &mut rng)?,
            lambda: config.lambda,
            seed: config.seed,
            encoder_fingerprint: None,
        })
    }

    pub fn input_width(&self) -> usize {
        self.mlp.in_dim()
    }

    /// Scores in `(0, 1)` for each row.
    pub fn predict(&self, features: &Matrix) -> Result<Vec<f64>> {
        if features.cols() != self.input_width() {
            return Err(Error::shape("detector input width", self.input_width(), features.cols()));
        }
        const CHUNK: usize = 2048;
        let chunks: Vec<Vec<usize>> = (0..features.rows())
            .collect::<Vec<_>>()
            .chunks(CHUNK)
            .map(<[usize]>::to_vec)
            .collect();
        let parts = chunks
            .par_iter()
            .map(|idx| Ok(self.mlp.predict(&features.select_rows(idx))?.into_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok(parts.concat())
    }

    pub fn to_json(&self) -> Result<String> {
        let hidden = self.mlp.dims()[1..self.mlp.layers().len()].to_vec();
        let file = DetectorFile {
            format_version: DETECTOR_FORMAT_VERSION,
            input_width: self.input_width(),
            architecture: Architecture {
                hidden,
                activation: Activation::Relu,
                output: Activation::Sigmoid,
            },
            weights: self.mlp.clone(),
            lambda: self.lambda,
            seed: self.seed,
            encoder_fingerprint: self.encoder_fingerprint.clone(),
        };
        Ok(serde_json::to_string(&file)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: DetectorFile = serde_json::from_str(text)?;
        if f.format_version != DETECTOR_FORMAT_VERSION {
            return Err(Error::Invalid(format!("unsupported detector format_version {}", f.format_version)));
        }
        let mut dims = vec![f.input_width];
        dims.extend_from_slice(&f.architecture.hidden);
        dims.push(1);
        if f.weights.dims() != dims {
            return Err(Error::shape("detector architecture", format!("{dims:?}"), format!("{:?}", f.weights.dims())));
        }
        Ok(Self {
            mlp: f.weights,
            lambda: f.lambda,
            seed: f.seed,
            encoder_fingerprint: f.encoder_fingerprint,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainEpoch {
    pub epoch: usize,
    /// Mean supervised BCE over labeled rows seen this epoch.
    pub supervised_loss: f64,
    /// Mean alignment BCE over all rows; NaN when the term is disabled.
    pub alignment_loss: f64,
    pub mean_pseudo_label: f64,
    pub unconverged_batches: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub detector: Detector,
    pub history: Vec<TrainEpoch>,
    pub calibration: Option<CalibrationState>,
}

fn epoch_order(n: usize, rng: &mut SeededRng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

fn check_inputs(features: &Matrix, labels: &[Option<bool>]) -> Result<()> {
    if features.rows() != labels.len() {
        return Err(Error::shape("labels vs feature rows", features.rows(), labels.len()));
    }
    if !labels.iter().any(Option::is_some) {
        return Err(Error::UndefinedMetric("training needs at least one labeled row".into()));
    }
    Ok(())
}

fn diverged(epoch: usize, batch: usize) -> Error {
    Error::Diverged(format!("non-finite detector loss at epoch {epoch}, batch {batch}"))
}

/// Minimises `mean_labeled BCE + lambda * mean_batch BCE(pseudo-label)`.
///
/// With `lambda == 0` the alignment pathway is never evaluated, so the result
/// is bitwise identical to [`train_supervised`].
pub fn hybrid_train(
    features: &Matrix,
    labels: &[Option<bool>],
    aligner: Option<&Aligner>,
    config: &DetectorConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_inputs(features, labels)?;
    let aligner = if config.lambda > 0.0 {
        let a = aligner.ok_or_else(|| Error::Contract("lambda > 0 requires pretrained encoders".into()))?;
        if a.input_dim() != features.cols() {
            return Err(Error::shape("sample encoder input width", a.input_dim(), features.cols()));
        }
        Some(a)
    } else {
        None
    };
    let mut det = Detector::init(features.cols(), config)?;
    det.encoder_fingerprint = aligner.map(|a| a.encoders().ruleset_fingerprint.clone());
    let mut opt = Optimizer::adam(config.learning_rate)?;
    let mut rng = SeededRng::for_stage(config.seed, "detector.shuffle");
    let mut calib = match aligner {
        Some(a) => Some(CalibrationState::new(a.config.momentum)?),
        None => None,
    };
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let order = epoch_order(features.rows(), &mut rng);
        let (mut sup_sum, mut sup_n) = (0.0, 0usize);
        let (mut al_sum, mut al_n, mut pl_sum, mut unconverged) = (0.0, 0usize, 0.0, 0usize);
        for (bi, idx) in order.chunks(config.batch_size).enumerate() {
            let x = features.select_rows(idx);
            let y: Vec<Option<bool>> = idx.iter().map(|&i| labels[i]).collect();
            let (out, cache) = det.mlp.forward(&x)?;
            let s = out.as_slice();
            let labeled = y.iter().filter(|v| v.is_some()).count();
            let mut grad = if labeled > 0 {
                let l = supervised_loss(s, &y)?;
                if !l.is_finite() {
                    return Err(diverged(epoch, bi));
                }
                sup_sum += l * labeled as f64;
                sup_n += labeled;
                supervised_loss_grad(s, &y)?
            } else {
                vec![0.0; s.len()]
            };
            if let (Some(a), Some(state)) = (aligner, calib.as_mut()) {
                let bc = a.batch_costs(&x)?;
                if !bc.converged {
                    unconverged += 1;
                }
                state.update(&bc.costs)?;
                let yhat = pseudo_labels(&bc.costs, state, a.config.tau, a.config.eps)?;
                let l = alignment_loss(s, &yhat)?;
                if !l.is_finite() {
                    return Err(diverged(epoch, bi));
                }
                al_sum += l * s.len() as f64;
                al_n += s.len();
                pl_sum += yhat.iter().sum::<f64>();
                for (g, ga) in grad.iter_mut().zip(alignment_loss_grad(s, &yhat)?) {
                    *g += config.lambda * ga;
                }
            }
            let g = Matrix::from_vec(s.len(), 1, grad)?;
            let (grads, _) = det.mlp.backward(&cache, &g)?;
            opt.step(&mut det.mlp.param_groups(&grads, "detector"))?;
        }
        history.push(TrainEpoch {
            epoch,
            supervised_loss: if sup_n > 0 { sup_sum / sup_n as f64 } else { f64::NAN },
            alignment_loss: if al_n > 0 { al_sum / al_n as f64 } else { f64::NAN },
            mean_pseudo_label: if al_n > 0 { pl_sum / al_n as f64 } else { f64::NAN },
            unconverged_batches: unconverged,
        });
    }
    Ok(TrainOutcome {
        detector: det,
        history,
        calibration: calib,
    })
}

/// Labeled-BCE-only training with the same initialisation and batch schedule
/// as [`hybrid_train`].
pub fn train_supervised(features: &Matrix, labels: &[Option<bool>], config: &DetectorConfig) -> Result<Detector> {
    config.validate()?;
    check_inputs(features, labels)?;
    let mut det = Detector::init(features.cols(), config)?;
    let mut opt = Optimizer::adam(config.learning_rate)?;
    let mut rng = SeededRng::for_stage(config.seed, "detector.shuffle");
    for epoch in 0..config.epochs {
        for (bi, idx) in epoch_order(features.rows(), &mut rng).chunks(config.batch_size).enumerate() {
            let x = features.select_rows(idx);
            let y: Vec<Option<bool>> = idx.iter().map(|&i| labels[i]).collect();
            let (out, cache) = det.mlp.forward(&x)?;
            let grad = match supervised_loss(out.as_slice(), &y) {
                Ok(l) if !l.is_finite() => return Err(diverged(epoch, bi)),
                Ok(_) => supervised_loss_grad(out.as_slice(), &y)?,
                Err(Error::UndefinedMetric(_)) => vec![0.0; idx.len()],
                Err(e) => return Err(e),
            };
            let (grads, _) = det.mlp.backward(&cache, &Matrix::from_vec(idx.len(), 1, grad)?)?;
            opt.step(&mut det.mlp.param_groups(&grads, "detector"))?;
        }
    }
    Ok(det)
}

/// Scores with 1-based ranks by descending score, ties by ascending index.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub scores: Vec<f64>,
    pub ranks: Vec<usize>,
}

impl ScoreReport {
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let mut ranks = vec![0; scores.len()];
        for (pos, i) in descending_order(&scores).into_iter().enumerate() {
            ranks[i] = pos + 1;
        }
        Self { scores, ranks }
    }

    /// Writes `npi,score,rank` in prescriber order.
    pub fn write_csv<W: std::io::Write>(&self, npis: &[String], writer: W) -> Result<()> {
        if npis.len() != self.scores.len() {
            return Err(Error::shape("score report npis", self.scores.len(), npis.len()));
        }
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["npi", "score", "rank"])?;
        for ((npi, s), r) in npis.iter().zip(&self.scores).zip(&self.ranks) {
            w.write_record([npi.clone(), crate::numeric::fmt::fmt17(*s), r.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<scores writer>", e))?;
        Ok(())
    }
}

pub fn score(detector: &Detector, features: &Matrix) -> Result<ScoreReport> {
    Ok(ScoreReport::from_scores(detector.predict(features)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelPredictions {
    pub costs: Vec<f64>,
    pub scores: Vec<f64>,
    pub predictions: Vec<bool>,
    pub calibration: CalibrationState,
}

/// Pseudo-labels over the whole dataset with one-pass calibration;
/// a row is flagged when its label is strictly above `threshold`.
pub fn pseudo_label_classifier(features: &Matrix, aligner: &Aligner, threshold: f64) -> Result<PseudoLabelPredictions> {
    let (costs, scores, calibration) = aligner.one_pass_labels(features)?;
    let predictions = scores.iter().map(|&s| s > threshold).collect();
    Ok(PseudoLabelPredictions {
        costs,
        scores,
        predictions,
        calibration,
    })
}
