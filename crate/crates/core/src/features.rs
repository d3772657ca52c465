//! Rule-contrast features.
//!
//! For every prescriber-year the share of each drug in each channel is
//! `total / prescriber-year total`, or 0 when that total is 0. A rule's
//! contrast is `share(p) - share(q)` (with `share(q) = 0` for unary rules),
//! summarised over the prescriber's observed years by min, mean and max.
//!
//! Columns are rule-major, channel-middle, stat-minor and named
//! `rule{j}_{channel}_{stat}` with `j` starting at 1.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Channel, ClaimsTable, Metrics};
use crate::numeric::fmt::fmt17;
use crate::numeric::Matrix;
use crate::rules::{DrugId, Rule, RuleSet};

pub const BINARY_MAGIC: &[u8; 5] = b"CCFM1";
pub const FEATURES_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stat {
    Min,
    Mean,
    Max,
}

impl Stat {
    pub const ALL: [Stat; 3] = [Stat::Min, Stat::Mean, Stat::Max];

    pub fn as_str(self) -> &'static str {
        match self {
            Stat::Min => "min",
            Stat::Mean => "mean",
            Stat::Max => "max",
        }
    }
}

/// Which (channel, stat) cells each rule contributes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureLayout {
    /// 15 columns per rule.
    #[default]
    #[serde(rename = "full")]
    Full,
    /// One column per rule: the mean claims contrast.
    #[serde(rename = "mean-claims-only")]
    MeanClaimsOnly,
}

impl FeatureLayout {
    pub fn width_per_rule(self) -> usize {
        match self {
            FeatureLayout::Full => 15,
            FeatureLayout::MeanClaimsOnly => 1,
        }
    }

    pub fn cells(self) -> Vec<(Channel, Stat)> {
        match self {
            FeatureLayout::Full => Channel::ALL
                .iter()
                .flat_map(|&c| Stat::ALL.iter().map(move |&s| (c, s)))
                .collect(),
            FeatureLayout::MeanClaimsOnly => vec![(Channel::Clm, Stat::Mean)],
        }
    }

    pub fn column_names(self, num_rules: usize) -> Vec<String> {
        let cells = self.cells();
        (1..=num_rules)
            .flat_map(|j| {
                cells
                    .iter()
                    .map(move |(c, s)| format!("rule{j}_{}_{}", c.as_str(), s.as_str()))
            })
            .collect()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureLayout::Full => "full",
            FeatureLayout::MeanClaimsOnly => "mean-claims-only",
        }
    }
}

impl FromStr for FeatureLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(FeatureLayout::Full),
            "mean-claims-only" => Ok(FeatureLayout::MeanClaimsOnly),
            other => Err(Error::Invalid(format!(
                "unknown feature layout {other:?} (expected full or mean-claims-only)"
            ))),
        }
    }
}

impl fmt::Display for FeatureLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Shares for one prescriber-year.
#[derive(Debug, Clone, PartialEq)]
pub struct YearShares {
    pub year: i32,
    pub totals: Metrics,
    pub shares: BTreeMap<DrugId, Metrics>,
}

impl YearShares {
    #[inline]
    pub fn share(&self, drug: DrugId, channel: Channel) -> f64 {
        self.shares.get(&drug).map_or(0.0, |m| m[channel.index()])
    }
}

/// Per-prescriber observed years, each list sorted by year.
#[derive(Debug, Clone, PartialEq)]
pub struct ShareTable {
    by_prescriber: Vec<Vec<YearShares>>,
}

impl ShareTable {
    pub fn num_prescribers(&self) -> usize {
        self.by_prescriber.len()
    }

    pub fn years_of(&self, prescriber: usize) -> &[YearShares] {
        &self.by_prescriber[prescriber]
    }
}

pub fn compute_shares(claims: &ClaimsTable) -> ShareTable {
    let mut raw: Vec<BTreeMap<i32, BTreeMap<DrugId, Metrics>>> =
        vec![BTreeMap::new(); claims.num_prescribers()];
    for r in claims.records() {
        let e = raw[r.prescriber]
            .entry(r.year)
            .or_default()
            .entry(r.drug)
            .or_insert([0.0; 5]);
        for (a, b) in e.iter_mut().zip(r.metrics) {
            *a += b;
        }
    }
    let by_prescriber = raw
        .into_iter()
        .map(|years| {
            years
                .into_iter()
                .map(|(year, drugs)| {
                    let mut totals = [0.0; 5];
                    for m in drugs.values() {
                        for (t, v) in totals.iter_mut().zip(m) {
                            *t += v;
                        }
                    }
                    let shares = drugs
                        .into_iter()
                        .map(|(d, m)| {
                            let mut s = [0.0; 5];
                            for k in 0..5 {
                                if totals[k] > 0.0 {
                                    s[k] = m[k] / totals[k];
                                }
                            }
                            (d, s)
                        })
                        .collect();
                    YearShares {
                        year,
                        totals,
                        shares,
                    }
                })
                .collect()
        })
        .collect();
    ShareTable { by_prescriber }
}

/// `share(p) - share(q)` in every channel, with `share(q) = 0` for unary rules.
pub fn rule_contrast(year: &YearShares, rule: &Rule) -> Metrics {
    let mut out = [0.0; 5];
    for c in Channel::ALL {
        let sp = year.share(rule.p, c);
        let sq = rule.q.map_or(0.0, |q| year.share(q, c));
        out[c.index()] = sp - sq;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl Summary {
    pub fn get(&self, stat: Stat) -> f64 {
        match stat {
            Stat::Min => self.min,
            Stat::Mean => self.mean,
            Stat::Max => self.max,
        }
    }
}

pub fn aggregate_over_years(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::Invalid(
            "cannot summarise an empty year set: prescriber has no records".into(),
        ));
    }
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0;
    for &v in values {
        min = min.min(v);
        max = max.max(v);
        sum += v;
    }
    // the rounded mean can stray outside [min, max] by an ulp for constant series
    let mean = (sum / values.len() as f64).clamp(min, max);
    Ok(Summary { min, mean, max })
}

/// Header information that travels with a feature matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMeta {
    pub format_version: u32,
    pub ruleset_fingerprint: String,
    pub layout: FeatureLayout,
    pub num_rules: usize,
    pub drug_vocabulary: Vec<String>,
    pub npis: Vec<String>,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub meta: FeatureMeta,
    pub values: Matrix,
}

impl FeatureMatrix {
    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn cols(&self) -> usize {
        self.values.cols()
    }

    pub fn npis(&self) -> &[String] {
        &self.meta.npis
    }

    pub fn column_names(&self) -> Vec<String> {
        self.meta.layout.column_names(self.meta.num_rules)
    }
}

/// Checks that a rule set and a claims table share one drug vocabulary.
pub fn check_vocabulary(claims: &ClaimsTable, ruleset: &RuleSet) -> Result<()> {
    if claims.vocabulary().names() != ruleset.vocabulary().names() {
        return Err(Error::Contract(format!(
            "rule set vocabulary ({} drugs) differs from claims vocabulary ({} drugs)",
            ruleset.vocabulary().len(),
            claims.num_drugs()
        )));
    }
    Ok(())
}

fn prescriber_row(years: &[YearShares], ruleset: &RuleSet, layout: FeatureLayout) -> Result<Vec<f64>> {
    let cells = layout.cells();
    let mut row = Vec::with_capacity(ruleset.len() * cells.len());
    let mut series: [Vec<f64>; 5] = Default::default();
    for rule in ruleset.rules() {
        for s in series.iter_mut() {
            s.clear();
        }
        for y in years {
            let c = rule_contrast(y, rule);
            for k in 0..5 {
                series[k].push(c[k]);
            }
        }
        let mut summaries = [None; 5];
        for &(c, stat) in &cells {
            let k = c.index();
            if summaries[k].is_none() {
                summaries[k] = Some(aggregate_over_years(&series[k])?);
            }
            row.push(summaries[k].unwrap().get(stat));
        }
    }
    Ok(row)
}

/// One row per prescriber in ingest order, `layout.width_per_rule() * R` columns.
pub fn build_feature_matrix(
    claims: &ClaimsTable,
    ruleset: &RuleSet,
    layout: FeatureLayout,
) -> Result<FeatureMatrix> {
    check_vocabulary(claims, ruleset)?;
    let shares = compute_shares(claims);
    let cols = ruleset.len() * layout.width_per_rule();
    let rows: Vec<Vec<f64>> = (0..shares.num_prescribers())
        .into_par_iter()
        .map(|i| {
            prescriber_row(shares.years_of(i), ruleset, layout)
                .map_err(|e| Error::Invalid(format!("prescriber {}: {e}", claims.npis()[i])))
        })
        .collect::<Result<_>>()?;
    let mut data = Vec::with_capacity(rows.len() * cols);
    for r in &rows {
        data.extend_from_slice(r);
    }
    let values = Matrix::from_vec(rows.len(), cols, data)?;
    if !values.all_finite() {
        return Err(Error::NonFinite("feature matrix".into()));
    }
    Ok(FeatureMatrix {
        meta: FeatureMeta {
            format_version: FEATURES_FORMAT_VERSION,
            ruleset_fingerprint: ruleset.fingerprint(),
            layout,
            num_rules: ruleset.len(),
            drug_vocabulary: ruleset.vocabulary().names().to_vec(),
            npis: claims.npis().to_vec(),
            rows: values.rows(),
            cols,
        },
        values,
    })
}

/// `features.csv` -> `features.meta.json`.
pub fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureFormat {
    Csv,
    Binary,
}

impl FeatureFormat {
    /// `.bin` and `.ccfm` select the binary container, anything else CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin" | "ccfm") => FeatureFormat::Binary,
            _ => FeatureFormat::Csv,
        }
    }
}

pub fn write_features_csv<W: Write>(fm: &FeatureMatrix, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["npi".to_string()];
    header.extend(fm.column_names());
    w.write_record(&header)?;
    for (npi, row) in fm.meta.npis.iter().zip(fm.values.row_iter()) {
        let mut rec = Vec::with_capacity(row.len() + 1);
        rec.push(npi.clone());
        rec.extend(row.iter().map(|&v| fmt17(v)));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<features writer>", e))?;
    Ok(())
}

pub fn write_features_binary<W: Write>(values: &Matrix, mut writer: W) -> Result<()> {
    let io = |e| Error::io("<features writer>", e);
    writer.write_all(BINARY_MAGIC).map_err(io)?;
    writer.write_all(&(values.rows() as u64).to_le_bytes()).map_err(io)?;
    writer.write_all(&(values.cols() as u64).to_le_bytes()).map_err(io)?;
    for v in values.as_slice() {
        writer.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    writer.flush().map_err(io)
}

pub fn read_features_binary<R: Read>(mut reader: R, origin: &Path) -> Result<Matrix> {
    let io = |e| Error::io(origin, e);
    let mut magic = [0u8; 5];
    reader.read_exact(&mut magic).map_err(io)?;
    if &magic != BINARY_MAGIC {
        return Err(Error::parse(origin, 0, "missing CCFM1 magic"));
    }
    let mut word = [0u8; 8];
    reader.read_exact(&mut word).map_err(io)?;
    let rows = u64::from_le_bytes(word) as usize;
    reader.read_exact(&mut word).map_err(io)?;
    let cols = u64::from_le_bytes(word) as usize;
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::parse(origin, 0, "dimensions overflow"))?;
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes).map_err(io)?;
    if bytes.len() != n * 8 {
        return Err(Error::parse(
            origin,
            0,
            format!("expected {} payload bytes, found {}", n * 8, bytes.len()),
        ));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let m = Matrix::from_vec(rows, cols, data)?;
    if !m.all_finite() {
        return Err(Error::NonFinite(format!("{}", origin.display())));
    }
    Ok(m)
}

/// Parses the CSV form, returning npis, column names and values.
pub fn read_features_csv<R: Read>(reader: R, origin: &Path) -> Result<(Vec<String>, Vec<String>, Matrix)> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.get(0) != Some("npi") {
        return Err(Error::parse(origin, 1, "features header must start with `npi`"));
    }
    let columns: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
    let mut npis = Vec::new();
    let mut data = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        npis.push(rec[0].to_owned());
        for field in rec.iter().skip(1) {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::parse(origin, line, format!("malformed number {field:?}")))?;
            if !v.is_finite() {
                return Err(Error::parse(origin, line, "non-finite feature"));
            }
            data.push(v);
        }
    }
    let m = Matrix::from_vec(npis.len(), columns.len(), data)?;
    Ok((npis, columns, m))
}

/// Writes the matrix in the format implied by the extension plus the meta sidecar.
pub fn save_features(fm: &FeatureMatrix, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    match FeatureFormat::from_path(path) {
        FeatureFormat::Csv => write_features_csv(fm, BufWriter::new(f))?,
        FeatureFormat::Binary => write_features_binary(&fm.values, BufWriter::new(f))?,
    }
    let mp = meta_path(path);
    let json = serde_json::to_string_pretty(&fm.meta)?;
    std::fs::write(&mp, json + "\n").map_err(|e| Error::io(&mp, e))
}

/// Reads a feature file (format sniffed from its first bytes) and its sidecar.
pub fn load_features(path: &Path) -> Result<FeatureMatrix> {
    let mp = meta_path(path);
    let meta_text = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let meta: FeatureMeta = serde_json::from_str(&meta_text)?;
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(f);
    let is_binary = reader.fill_buf().map_err(|e| Error::io(path, e))?.starts_with(BINARY_MAGIC);
    let values = if is_binary {
        read_features_binary(reader, path)?
    } else {
        let (npis, columns, values) = read_features_csv(reader, path)?;
        if npis != meta.npis {
            return Err(Error::Contract(format!(
                "{}: npi column disagrees with {}",
                path.display(),
                mp.display()
            )));
        }
        if columns != meta.layout.column_names(meta.num_rules) {
            return Err(Error::Contract(format!(
                "{}: column names disagree with layout {} for {} rules",
                path.display(),
                meta.layout,
                meta.num_rules
            )));
        }
        values
    };
    if values.shape() != (meta.rows, meta.cols) || meta.npis.len() != meta.rows {
        return Err(Error::shape(
            "feature file vs sidecar",
            format!("{}x{}", meta.rows, meta.cols),
            format!("{}x{}", values.rows(), values.cols()),
        ));
    }
    Ok(FeatureMatrix { meta, values })
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;
    use std::sync::Arc;

    use super::*;
    use crate::ingest::ClaimsBuilder;
    use crate::rules::{DrugVocabulary, NamedRule};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_year(drugs: &[(&str, f64)]) -> ClaimsTable {
        let mut b = ClaimsBuilder::new();
        for &(d, c) in drugs {
            b.push("p", 2020, "GP", d, [c, c, c, c, c]).unwrap();
        }
        b.finish()
    }

    #[test]
    fn share_examples() {
        let t = one_year(&[("A", 20.0), ("B", 80.0)]);
        let s = compute_shares(&t);
        let y = &s.years_of(0)[0];
        let a = t.vocabulary().get("A").unwrap();
        let b = t.vocabulary().get("B").unwrap();
        assert_eq!(y.share(a, Channel::Clm), 0.2);
        assert_eq!(y.share(b, Channel::Clm), 0.8);

        let mut bld = ClaimsBuilder::new();
        bld.push("p", 2020, "GP", "A", [0.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        bld.push("p", 2020, "GP", "B", [0.0, 3.0, 1.0, 1.0, 1.0]).unwrap();
        let t = bld.finish();
        let st = compute_shares(&t);
        let y = &st.years_of(0)[0];
        assert!(y.shares.values().all(|m| m[Channel::Clm.index()] == 0.0));

        let t = one_year(&[("A", 5.0)]);
        let st = compute_shares(&t);
        let y = &st.years_of(0)[0];
        assert!(y.shares[&DrugId(0)].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn contrast_examples() {
        let vocab = Arc::new(DrugVocabulary::from_names(["P", "Q"]).unwrap());
        let mk = |sp: f64, sq: f64| YearShares {
            year: 2020,
            totals: [1.0; 5],
            shares: [(DrugId(0), [sp; 5]), (DrugId(1), [sq; 5])].into_iter().collect(),
        };
        let bin = Rule::binary(DrugId(0), DrugId(1), 1.0).unwrap();
        assert_eq!(rule_contrast(&mk(0.3, 0.3), &bin), [0.0; 5]);
        assert!((rule_contrast(&mk(0.7, 0.1), &bin)[0] - 0.6).abs() < 1e-15);
        let un = Rule::unary(DrugId(0), 1.0).unwrap();
        assert_eq!(rule_contrast(&mk(0.3, 0.9), &un), [0.3; 5]);
        drop(vocab);
    }

    #[test]
    fn aggregate_examples() {
        let s = aggregate_over_years(&[-0.1, 0.2, 0.5]).unwrap();
        assert_eq!((s.min, s.max), (-0.1, 0.5));
        assert!((s.mean - 0.2).abs() < 1e-15);
        let s = aggregate_over_years(&[0.7]).unwrap();
        assert_eq!((s.min, s.mean, s.max), (0.7, 0.7, 0.7));
        let s = aggregate_over_years(&[0.1, 0.1, 0.1]).unwrap();
        assert!(s.min == s.mean && s.mean == s.max);
        assert!(aggregate_over_years(&[]).is_err());
    }

    #[test]
    fn widths_and_names() {
        assert_eq!(FeatureLayout::Full.column_names(1).len(), 15);
        assert_eq!(FeatureLayout::Full.column_names(413).len(), 6195);
        assert_eq!(FeatureLayout::MeanClaimsOnly.column_names(413).len(), 413);
        let names = FeatureLayout::Full.column_names(2);
        assert_eq!(names[0], "rule1_clm_min");
        assert_eq!(names[4], "rule1_fill30_mean");
        assert_eq!(names[14], "rule1_bene_max");
        assert_eq!(names[15], "rule2_clm_min");
    }

    fn random_table(seed: u64, prescribers: usize, drugs: usize) -> ClaimsTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names: Vec<String> = (0..drugs).map(|d| format!("D{d}")).collect();
        let mut b = ClaimsBuilder::with_drugs(&names);
        for i in 0..prescribers {
            for year in 2019..2022 {
                if rng.random_bool(0.25) && year != 2020 {
                    continue;
                }
                for d in &names {
                    if rng.random_bool(0.4) {
                        let mut m = [0.0; 5];
                        for v in m.iter_mut() {
                            *v = if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.0..50.0f64).floor() };
                        }
                        b.push(&format!("n{i}"), year, "GP", d, m).unwrap();
                    }
                }
            }
        }
        b.finish()
    }

    fn random_rules(vocab: &Arc<DrugVocabulary>, seed: u64) -> RuleSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = vocab.len();
        let mut named = Vec::new();
        let mut seen = std::collections::HashSet::new();
        while named.len() < 6 {
            let p = rng.random_range(0..d);
            let q = rng.random_range(0..=d);
            if p == q || !seen.insert((p, q)) {
                continue;
            }
            let w = rng.random_range(0.0..=1.0);
            named.push(if q == d {
                NamedRule::unary(format!("D{p}"), w)
            } else {
                NamedRule::binary(format!("D{p}"), format!("D{q}"), w)
            });
        }
        RuleSet::from_named(&named, vocab.clone()).unwrap()
    }

    /// Straight-line evaluation of the three feature formulas from raw records.
    fn brute_force(claims: &ClaimsTable, rules: &RuleSet) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for i in 0..claims.num_prescribers() {
            let recs: Vec<_> = claims.records().iter().filter(|r| r.prescriber == i).collect();
            let mut years: Vec<i32> = recs.iter().map(|r| r.year).collect();
            years.sort();
            years.dedup();
            let mut row = Vec::new();
            for rule in rules.rules() {
                for k in 0..5 {
                    let mut deltas = Vec::new();
                    for &t in &years {
                        let total: f64 = recs.iter().filter(|r| r.year == t).map(|r| r.metrics[k]).sum();
                        let tot = |d: DrugId| -> f64 {
                            recs.iter().filter(|r| r.year == t && r.drug == d).map(|r| r.metrics[k]).sum()
                        };
                        let share = |d: DrugId| if total > 0.0 { tot(d) / total } else { 0.0 };
                        let sq = rule.q.map_or(0.0, share);
                        deltas.push(share(rule.p) - sq);
                    }
                    let min = deltas.iter().cloned().fold(f64::INFINITY, f64::min);
                    let max = deltas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mean = deltas.iter().sum::<f64>() / deltas.len() as f64;
                    row.extend([min, mean, max]);
                }
            }
            out.push(row);
        }
        out
    }

    #[test]
    fn matches_brute_force_oracle() {
        let t = random_table(11, 10, 6);
        let rules = random_rules(t.vocabulary(), 12);
        let fm = build_feature_matrix(&t, &rules, FeatureLayout::Full).unwrap();
        assert_eq!(fm.cols(), 15 * rules.len());
        let oracle = brute_force(&t, &rules);
        for (i, expect) in oracle.iter().enumerate() {
            for (a, b) in fm.values.row(i).iter().zip(expect) {
                assert!((a - b).abs() <= 1e-12, "row {i}: {a} vs {b}");
            }
        }
        let mc = build_feature_matrix(&t, &rules, FeatureLayout::MeanClaimsOnly).unwrap();
        for i in 0..t.num_prescribers() {
            for j in 0..rules.len() {
                assert_eq!(mc.values.get(i, j), fm.values.get(i, j * 15 + 1));
            }
        }
    }

    #[test]
    fn vocabulary_mismatch_is_rejected() {
        let t = one_year(&[("A", 1.0), ("B", 1.0)]);
        let other = Arc::new(DrugVocabulary::from_names(["B", "A"]).unwrap());
        let rules = RuleSet::from_named(&[NamedRule::unary("A", 0.5)], other).unwrap();
        assert!(build_feature_matrix(&t, &rules, FeatureLayout::Full).is_err());
    }

    #[test]
    fn file_round_trips() {
        let t = random_table(3, 7, 5);
        let rules = random_rules(t.vocabulary(), 4);
        let fm = build_feature_matrix(&t, &rules, FeatureLayout::Full).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for name in ["features.csv", "features.bin"] {
            let p = dir.path().join(name);
            save_features(&fm, &p).unwrap();
            let back = load_features(&p).unwrap();
            assert_eq!(back, fm, "{name}");
        }
        let bytes = std::fs::read(dir.path().join("features.bin")).unwrap();
        assert_eq!(&bytes[..5], b"CCFM1");
        assert_eq!(u64::from_le_bytes(bytes[5..13].try_into().unwrap()), 7);
        assert_eq!(u64::from_le_bytes(bytes[13..21].try_into().unwrap()), 90);
        assert_eq!(bytes.len(), 21 + 7 * 90 * 8);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn table_strategy() -> impl Strategy<Value = ClaimsTable> {
            proptest::collection::vec(
                (0usize..4, 2019i32..2022, 0usize..4, proptest::array::uniform5(0.0f64..100.0)),
                1..30,
            )
            .prop_map(|rows| {
                let names: Vec<String> = (0..4).map(|d| format!("D{d}")).collect();
                let mut b = ClaimsBuilder::with_drugs(&names);
                for (p, y, d, m) in rows {
                    b.push(&format!("n{p}"), y, "GP", &names[d], m).unwrap();
                }
                b.finish()
            })
        }

        fn all_rules(vocab: &Arc<DrugVocabulary>) -> RuleSet {
            let mut named = Vec::new();
            for p in 0..4 {
                named.push(NamedRule::unary(format!("D{p}"), 0.5));
                for q in 0..4 {
                    if p != q {
                        named.push(NamedRule::binary(format!("D{p}"), format!("D{q}"), 0.5));
                    }
                }
            }
            RuleSet::from_named(&named, vocab.clone()).unwrap()
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn bounded_ordered_and_antisymmetric(t in table_strategy()) {
                let rules = all_rules(t.vocabulary());
                let fm = build_feature_matrix(&t, &rules, FeatureLayout::Full).unwrap();
                let col_of: HashMap<(DrugId, Option<DrugId>), usize> = rules
                    .rules()
                    .iter()
                    .enumerate()
                    .map(|(j, r)| ((r.p, r.q), j))
                    .collect();
                for i in 0..fm.rows() {
                    let row = fm.values.row(i);
                    prop_assert!(row.iter().all(|v| (-1.0..=1.0).contains(v)));
                    for block in row.chunks(3) {
                        prop_assert!(block[0] <= block[1] && block[1] <= block[2]);
                    }
                    for (j, r) in rules.rules().iter().enumerate() {
                        if let Some(q) = r.q {
                            let k = col_of[&(q, Some(r.p))];
                            for c in 0..5 {
                                // min of the reverse rule is minus the max, mean negates
                                let a = &row[j * 15 + c * 3..j * 15 + c * 3 + 3];
                                let b = &row[k * 15 + c * 3..k * 15 + c * 3 + 3];
                                prop_assert!((a[0] + b[2]).abs() < 1e-12);
                                prop_assert!((a[1] + b[1]).abs() < 1e-12);
                                prop_assert!((a[2] + b[0]).abs() < 1e-12);
                            }
                        }
                    }
                }
                let shares = compute_shares(&t);
                for i in 0..shares.num_prescribers() {
                    for y in shares.years_of(i) {
                        for k in 0..5 {
                            let s: f64 = y.shares.values().map(|m| m[k]).sum();
                            if y.totals[k] > 0.0 {
                                prop_assert!((s - 1.0).abs() < 1e-9);
                            } else {
                                prop_assert_eq!(s, 0.0);
                            }
                        }
                    }
                }
            }

            #[test]
            fn channel_scale_invariance(t in table_strategy(), k in 0.01f64..100.0, ch in 0usize..5) {
                let rules = all_rules(t.vocabulary());
                let base = build_feature_matrix(&t, &rules, FeatureLayout::Full).unwrap();
                let mut b = ClaimsBuilder::with_drugs(t.vocabulary().names());
                for r in t.records() {
                    let mut m = r.metrics;
                    m[ch] *= k;
                    b.push(&t.npis()[r.prescriber], r.year, "GP", t.vocabulary().name(r.drug), m).unwrap();
                }
                let scaled = build_feature_matrix(&b.finish(), &rules, FeatureLayout::Full).unwrap();
                for (a, b) in base.values.as_slice().iter().zip(scaled.values.as_slice()) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}
