//! Ranking metrics, PR-curve export, and the rule-group ablation protocol.
//!
//! Ranking is by descending score with ties broken by ascending index.
//! Average precision treats tied scores as one threshold: every positive in
//! a tie group is credited with the precision of the whole group.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignment::{AlignmentConfig, Aligner};
use crate::detector::{hybrid_train, score, DetectorConfig};
use crate::embedding::{pretrain, PretrainConfig};
use crate::error::{Error, Result};
use crate::features::{build_feature_matrix, FeatureLayout};
use crate::ingest::{ClaimsTable, LabelTable};
use crate::numeric::fmt::fmt17;
use crate::rules::{RuleGroup, RuleSet};

pub const DEFAULT_KS: [usize; 4] = [10, 20, 50, 100];
pub const RECALL_DENOMINATOR_NOTE: &str = "# r@K denominator: all positives in the evaluated set";

/// Indices sorted by descending score, ties by ascending index.
pub fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

fn check(scores: &[f64], labels: &[bool]) -> Result<usize> {
    if scores.len() != labels.len() {
        return Err(Error::shape("scores vs labels", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores".into()));
    }
    Ok(labels.iter().filter(|&&y| y).count())
}

/// Average precision with tie groups scored at their shared threshold.
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let positives = check(scores, labels)?;
    if positives == 0 {
        return Err(Error::UndefinedMetric("PR-AUC needs at least one positive".into()));
    }
    let order = descending_order(scores);
    let (mut seen, mut tp, mut sum) = (0usize, 0usize, 0.0);
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        let mut group_tp = 0;
        let start = k;
        while k < order.len() && scores[order[k]] == s {
            group_tp += labels[order[k]] as usize;
            k += 1;
        }
        seen += k - start;
        tp += group_tp;
        let precision = tp as f64 / seen as f64;
        for _ in 0..group_tp {
            sum += precision;
        }
    }
    Ok(sum / positives as f64)
}

/// Fraction of all positives found among the top `k`.
pub fn recall_at_k(scores: &[f64], labels: &[bool], k: usize) -> Result<f64> {
    let positives = check(scores, labels)?;
    if k == 0 || k > scores.len() {
        return Err(Error::Invalid(format!("K={k} outside 1..={}", scores.len())));
    }
    if positives == 0 {
        return Err(Error::UndefinedMetric("recall needs at least one positive".into()));
    }
    let hits = descending_order(scores)[..k].iter().filter(|&&i| labels[i]).count();
    Ok(hits as f64 / positives as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Rows with `score > threshold` are flagged. Precision is 0 when nothing is
/// flagged, recall is 0 without positives, F1 is 0 when both are 0.
pub fn prf_at_threshold(scores: &[f64], labels: &[bool], threshold: f64) -> Result<Prf> {
    let positives = check(scores, labels)?;
    let (mut flagged, mut tp) = (0usize, 0usize);
    for (&s, &y) in scores.iter().zip(labels) {
        if s > threshold {
            flagged += 1;
            tp += y as usize;
        }
    }
    let precision = if flagged > 0 { tp as f64 / flagged as f64 } else { 0.0 };
    let recall = if positives > 0 { tp as f64 / positives as f64 } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(Prf { precision, recall, f1 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// One point per distinct score, in descending threshold order (rows with
/// `score >= threshold` flagged), so recall is non-decreasing.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<PrPoint>> {
    let positives = check(scores, labels)?;
    if positives == 0 {
        return Err(Error::UndefinedMetric("PR curve needs at least one positive".into()));
    }
    let order = descending_order(scores);
    let mut out = Vec::new();
    let (mut seen, mut tp, mut k) = (0usize, 0usize, 0usize);
    while k < order.len() {
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            tp += labels[order[k]] as usize;
            seen += 1;
            k += 1;
        }
        out.push(PrPoint {
            threshold: s,
            precision: tp as f64 / seen as f64,
            recall: tp as f64 / positives as f64,
        });
    }
    Ok(out)
}

pub fn write_pr_curve<W: Write>(points: &[PrPoint], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["threshold", "precision", "recall"])?;
    for p in points {
        w.write_record([fmt17(p.threshold), fmt17(p.precision), fmt17(p.recall)])?;
    }
    w.flush().map_err(|e| Error::io("<pr curve writer>", e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: DEFAULT_KS.to_vec(),
            threshold: 0.5,
        }
    }
}

/// One line of the evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub config: String,
    pub seed: u64,
    pub pr_auc: f64,
    pub recall_at: Vec<(usize, f64)>,
    pub prf: Prf,
}

impl EvalRow {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recall_at.iter().find(|(kk, _)| *kk == k).map(|e| e.1)
    }
}

pub fn evaluate(config_name: &str, seed: u64, scores: &[f64], labels: &[bool], eval: &EvalConfig) -> Result<EvalRow> {
    let recall_at = eval
        .ks
        .iter()
        .map(|&k| Ok((k, recall_at_k(scores, labels, k)?)))
        .collect::<Result<_>>()?;
    Ok(EvalRow {
        config: config_name.to_owned(),
        seed,
        pr_auc: pr_auc(scores, labels)?,
        recall_at,
        prf: prf_at_threshold(scores, labels, eval.threshold)?,
    })
}

/// `config,seed,pr_auc,r@K...,precision,recall,f1` preceded by a comment line
/// stating the recall denominator.
pub fn write_report<W: Write>(rows: &[EvalRow], ks: &[usize], mut writer: W) -> Result<()> {
    writeln!(writer, "{RECALL_DENOMINATOR_NOTE}").map_err(|e| Error::io("<report writer>", e))?;
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["config".to_string(), "seed".into(), "pr_auc".into()];
    header.extend(ks.iter().map(|k| format!("r@{k}")));
    header.extend(["precision".into(), "recall".into(), "f1".into()]);
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.config.clone(), r.seed.to_string(), fmt17(r.pr_auc)];
        for &k in ks {
            rec.push(r.recall(k).map_or_else(String::new, fmt17));
        }
        rec.extend([fmt17(r.prf.precision), fmt17(r.prf.recall), fmt17(r.prf.f1)]);
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<report writer>", e))?;
    Ok(())
}

/// Reads an external `npi,score` file.
pub fn read_scores<R: Read>(reader: R, origin: &Path) -> Result<Vec<(String, f64)>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let h = rdr.headers()?.clone();
    if h.get(0) != Some("npi") || h.get(1) != Some("score") {
        return Err(Error::parse(origin, 1, "expected header starting `npi,score`"));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let s: f64 = rec[1]
            .parse()
            .map_err(|_| Error::parse(origin, line, format!("malformed score {:?}", &rec[1])))?;
        if !s.is_finite() {
            return Err(Error::parse(origin, line, "non-finite score"));
        }
        out.push((rec[0].to_owned(), s));
    }
    Ok(out)
}

/// Aligns external scores with ground-truth labels by npi; npis without a
/// label are dropped and counted.
pub fn join_scores(scores: &[(String, f64)], truth: &HashMap<String, bool>) -> (Vec<f64>, Vec<bool>, usize) {
    let (mut s, mut y, mut dropped) = (Vec::new(), Vec::new(), 0);
    for (npi, v) in scores {
        match truth.get(npi) {
            Some(&l) => {
                s.push(*v);
                y.push(l);
            }
            None => dropped += 1,
        }
    }
    (s, y, dropped)
}

/// All configuration needed to run features through scoring.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub layout: FeatureLayout,
    pub pretrain: PretrainConfig,
    pub alignment: AlignmentConfig,
    pub detector: DetectorConfig,
    pub eval: EvalConfig,
}

/// Claims plus the labels visible to training and the held-out truth.
#[derive(Debug, Clone, Copy)]
pub struct DatasetBundle<'a> {
    pub claims: &'a ClaimsTable,
    pub train_labels: &'a LabelTable,
    pub truth: &'a LabelTable,
    /// Prescribers to score; those missing from `truth` are skipped.
    pub eval_rows: &'a [usize],
}

impl DatasetBundle<'_> {
    /// Every prescriber that has ground truth but no training label.
    pub fn heldout_rows(claims: &ClaimsTable, train: &LabelTable, truth: &LabelTable) -> Vec<usize> {
        (0..claims.num_prescribers())
            .filter(|&i| train.get(i).is_none() && truth.get(i).is_some())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationConfig {
    Full,
    MinusCost,
    MinusOpioid,
    Lambda0,
}

impl AblationConfig {
    pub const ALL: [AblationConfig; 4] = [
        AblationConfig::Full,
        AblationConfig::MinusCost,
        AblationConfig::MinusOpioid,
        AblationConfig::Lambda0,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationConfig::Full => "full",
            AblationConfig::MinusCost => "minus_cost",
            AblationConfig::MinusOpioid => "minus_opioid",
            AblationConfig::Lambda0 => "lambda0",
        }
    }

    fn removed(self) -> &'static [RuleGroup] {
        match self {
            AblationConfig::MinusCost => &[RuleGroup::CostPreference],
            AblationConfig::MinusOpioid => &[RuleGroup::Opioid],
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AblationReport {
    pub rows: Vec<EvalRow>,
    pub notes: Vec<String>,
}

impl AblationReport {
    pub fn row(&self, config: AblationConfig, seed: u64) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.config == config.as_str() && r.seed == seed)
    }

    /// `(config, seed, delta pr_auc, delta r@k)` relative to the full run.
    pub fn deltas(&self, k: usize) -> Vec<(String, u64, f64, f64)> {
        let mut out = Vec::new();
        for r in &self.rows {
            if r.config == AblationConfig::Full.as_str() {
                continue;
            }
            if let Some(full) = self.row(AblationConfig::Full, r.seed) {
                let dr = r.recall(k).zip(full.recall(k)).map_or(f64::NAN, |(a, b)| a - b);
                out.push((r.config.clone(), r.seed, r.pr_auc - full.pr_auc, dr));
            }
        }
        out
    }
}

/// Trains and scores one configuration, returning held-out scores and labels.
pub fn run_pipeline(
    bundle: &DatasetBundle<'_>,
    ruleset: &RuleSet,
    config: &PipelineConfig,
    seed: u64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<bool>)> {
    let fm = build_feature_matrix(bundle.claims, ruleset, config.layout)?;
    let labels = bundle.train_labels.to_dense(fm.rows());
    let det_cfg = DetectorConfig {
        lambda,
        seed,
        ..config.detector.clone()
    };
    let aligner = if lambda > 0.0 {
        let pre = pretrain(
            ruleset,
            config.layout,
            &PretrainConfig {
                seed,
                ..config.pretrain.clone()
            },
        )?;
        Some(Aligner::new(pre.encoders, ruleset, config.alignment)?)
    } else {
        None
    };
    let out = hybrid_train(&fm.values, &labels, aligner.as_ref(), &det_cfg)?;
    let report = score(&out.detector, &fm.values)?;
    let (mut s, mut y) = (Vec::new(), Vec::new());
    for &i in bundle.eval_rows {
        if let Some(l) = bundle.truth.get(i) {
            s.push(report.scores[i]);
            y.push(l);
        }
    }
    Ok((s, y))
}

/// Runs every ablation configuration for every seed, in order.
pub fn ablation_run(
    bundle: &DatasetBundle<'_>,
    ruleset: &RuleSet,
    seeds: &[u64],
    configs: &[AblationConfig],
    config: &PipelineConfig,
) -> Result<AblationReport> {
    let mut report = AblationReport::default();
    let mut skipped = BTreeSet::new();
    for &seed in seeds {
        for &cfg in configs {
            let (rules, lambda) = match cfg {
                AblationConfig::Lambda0 => (ruleset.clone(), 0.0),
                AblationConfig::Full => (ruleset.clone(), config.detector.lambda),
                other => match ruleset.without_groups(other.removed()) {
                    Ok(r) => (r, config.detector.lambda),
                    Err(_) => {
                        if skipped.insert(cfg.as_str()) {
                            report
                                .notes
                                .push(format!("{}: no rules remain after removal, configuration skipped", cfg.as_str()));
                        }
                        continue;
                    }
                },
            };
            let (s, y) = run_pipeline(bundle, &rules, config, seed, lambda)?;
            let row = evaluate(cfg.as_str(), seed, &s, &y, &config.eval)?;
            log::info!("ablation {} seed {seed}: pr_auc {:.4}", cfg.as_str(), row.pr_auc);
            report.rows.push(row);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Precision at each positive's tie-group threshold, computed pairwise
    /// and accumulated from the highest-ranked positive down.
    pub(crate) fn ap_oracle(s: &[f64], y: &[bool]) -> f64 {
        let p = y.iter().filter(|&&v| v).count() as f64;
        let ahead = |i: usize| (0..s.len()).filter(|&j| s[j] > s[i] || (s[j] == s[i] && j < i)).count();
        let mut pos: Vec<usize> = (0..s.len()).filter(|&i| y[i]).collect();
        pos.sort_by_key(|&i| ahead(i));
        let mut sum = 0.0;
        for i in pos {
            let above: Vec<usize> = (0..s.len()).filter(|&j| s[j] >= s[i]).collect();
            let tp = above.iter().filter(|&&j| y[j]).count() as f64;
            sum += tp / above.len() as f64;
        }
        sum / p
    }

    fn recall_oracle(s: &[f64], y: &[bool], k: usize) -> f64 {
        // rank of i = number of rows strictly ahead of it
        let p = y.iter().filter(|&&v| v).count() as f64;
        let hits = (0..s.len())
            .filter(|&i| y[i])
            .filter(|&i| (0..s.len()).filter(|&j| s[j] > s[i] || (s[j] == s[i] && j < i)).count() < k)
            .count();
        hits as f64 / p
    }

    #[test]
    fn exhaustive_small_oracle() {
        let score_sets = [
            [0.9, 0.1, 0.5, 0.7, 0.3],
            [0.2, 0.2, 0.8, 0.2, 0.8],
            [0.4, 0.6, 0.6, 0.1, 0.95],
        ];
        for s in &score_sets {
            for mask in 0u32..32 {
                let y: Vec<bool> = (0..5).map(|i| mask >> i & 1 == 1).collect();
                let pos = y.iter().filter(|&&v| v).count();
                if pos == 0 {
                    assert!(pr_auc(s, &y).is_err());
                    continue;
                }
                assert_eq!(pr_auc(s, &y).unwrap(), ap_oracle(s, &y));
                for k in 1..=5 {
                    assert_eq!(recall_at_k(s, &y, k).unwrap(), recall_oracle(s, &y, k));
                }
                let prf = prf_at_threshold(s, &y, 0.5).unwrap();
                let flagged: Vec<usize> = (0..5).filter(|&i| s[i] > 0.5).collect();
                let tp = flagged.iter().filter(|&&i| y[i]).count() as f64;
                let p = if flagged.is_empty() { 0.0 } else { tp / flagged.len() as f64 };
                let r = tp / pos as f64;
                assert_eq!(prf.precision, p);
                assert_eq!(prf.recall, r);
                assert_eq!(prf.f1, if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 });
            }
        }
    }

    #[test]
    fn metric_examples() {
        let y = [true, true, false, false];
        assert_eq!(pr_auc(&[0.9, 0.8, 0.2, 0.1], &y).unwrap(), 1.0);
        let y = [true, false, false, false, true];
        assert!((pr_auc(&[0.5; 5], &y).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(recall_at_k(&[0.3, 0.2, 0.9, 0.1, 0.5], &y, 5).unwrap(), 1.0);
        assert_eq!(recall_at_k(&[0.9, 0.8, 0.3, 0.1, 0.5], &y, 2).unwrap(), 0.5);
        assert_eq!(recall_at_k(&[0.1, 0.9, 0.8, 0.7, 0.2], &y, 3).unwrap(), 0.0);
        assert!(recall_at_k(&[0.1; 5], &y, 6).is_err());
        assert!(recall_at_k(&[0.1; 5], &y, 0).is_err());

        let perfect = prf_at_threshold(&[0.9, 0.1], &[true, false], 0.5).unwrap();
        assert_eq!((perfect.precision, perfect.recall, perfect.f1), (1.0, 1.0, 1.0));
        let none = prf_at_threshold(&[0.1, 0.2], &[true, false], 0.5).unwrap();
        assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));
        // 3 flagged, 2 of them among 4 positives
        let s = [0.9, 0.8, 0.7, 0.1, 0.2, 0.3];
        let y = [true, true, false, true, true, false];
        let m = prf_at_threshold(&s, &y, 0.5).unwrap();
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.recall, 0.5);
        assert!((m.f1 - 4.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn pr_curve_and_report() {
        let s = [0.9, 0.5, 0.5, 0.1];
        let y = [true, false, true, false];
        let c = pr_curve(&s, &y).unwrap();
        assert_eq!(c.len(), 3);
        assert!(c.windows(2).all(|w| w[0].recall <= w[1].recall));
        assert_eq!(c[1].precision, 2.0 / 3.0);

        let row = evaluate("full", 7, &s, &y, &EvalConfig { ks: vec![1, 2], threshold: 0.5 }).unwrap();
        let mut buf = Vec::new();
        write_report(&[row], &[1, 2], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with('#'));
        assert_eq!(lines[1], "config,seed,pr_auc,r@1,r@2,precision,recall,f1");
        assert!(lines[2].starts_with("full,7,"));
    }

    #[test]
    fn external_scores_join() {
        let s = read_scores("npi,score\na,0.5\nb,0.1\nz,0.9\n".as_bytes(), Path::new("s")).unwrap();
        let truth: HashMap<String, bool> = [("a".to_string(), true), ("b".to_string(), false)].into_iter().collect();
        let (sc, y, dropped) = join_scores(&s, &truth);
        assert_eq!((sc.len(), y, dropped), (2, vec![true, false], 1));
        assert!(read_scores("npi,score\na,x\n".as_bytes(), Path::new("s")).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn input() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
            (2usize..40).prop_flat_map(|n| {
                (
                    proptest::collection::vec((0u8..20).prop_map(|v| v as f64 / 20.0), n),
                    proptest::collection::vec(any::<bool>(), n),
                )
            })
            .prop_filter("need a positive", |(_, y)| y.iter().any(|&v| v))
        }

        proptest! {
            #[test]
            fn matches_oracle_and_rank_invariant((s, y) in input()) {
                let ap = pr_auc(&s, &y).unwrap();
                prop_assert_eq!(ap, ap_oracle(&s, &y));
                prop_assert!((0.0..=1.0).contains(&ap));
                let cubed: Vec<f64> = s.iter().map(|v| v * v * v).collect();
                prop_assert_eq!(pr_auc(&cubed, &y).unwrap(), ap);
                let mut prev = 0.0;
                for k in 1..=s.len() {
                    let r = recall_at_k(&s, &y, k).unwrap();
                    prop_assert!(r >= prev);
                    prop_assert_eq!(recall_at_k(&cubed, &y, k).unwrap(), r);
                    prev = r;
                }
                prop_assert_eq!(prev, 1.0);
            }
        }
    }
}
