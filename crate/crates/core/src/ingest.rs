//! Claims and label tables.
//!
//! Vocabularies are assigned in first-appearance order, so identical input
//! bytes always produce identical drug and prescriber indices.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rules::{DrugId, DrugVocabulary};

pub const CLAIMS_HEADER: [&str; 9] = [
    "npi",
    "year",
    "specialty",
    "drug",
    "total_claims",
    "total_30day_fills",
    "total_day_supply",
    "total_cost",
    "total_beneficiaries",
];

pub const LABELS_HEADER: [&str; 2] = ["npi", "label"];

/// The five metric channels, in canonical feature order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Clm,
    Fill30,
    Days,
    Cost,
    Bene,
}

impl Channel {
    pub const ALL: [Channel; 5] = [
        Channel::Clm,
        Channel::Fill30,
        Channel::Days,
        Channel::Cost,
        Channel::Bene,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Channel::Clm => "clm",
            Channel::Fill30 => "fill30",
            Channel::Days => "days",
            Channel::Cost => "cost",
            Channel::Bene => "bene",
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Metric totals indexed by [`Channel::index`].
pub type Metrics = [f64; 5];

#[derive(Debug, Clone, PartialEq)]
pub struct ClaimRecord {
    pub prescriber: usize,
    pub year: i32,
    pub drug: DrugId,
    pub metrics: Metrics,
}

impl ClaimRecord {
    #[inline]
    pub fn metric(&self, channel: Channel) -> f64 {
        self.metrics[channel.index()]
    }
}

/// Immutable table of claim records, at most one per (prescriber, year, drug).
#[derive(Debug, Clone)]
pub struct ClaimsTable {
    records: Vec<ClaimRecord>,
    vocabulary: Arc<DrugVocabulary>,
    npis: Vec<String>,
    npi_index: HashMap<String, usize>,
    specialties: Vec<String>,
    years: BTreeSet<i32>,
    warnings: Vec<String>,
}

impl ClaimsTable {
    pub fn records(&self) -> &[ClaimRecord] {
        &self.records
    }

    pub fn vocabulary(&self) -> &Arc<DrugVocabulary> {
        &self.vocabulary
    }

    pub fn num_drugs(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn num_prescribers(&self) -> usize {
        self.npis.len()
    }

    pub fn npis(&self) -> &[String] {
        &self.npis
    }

    pub fn prescriber(&self, npi: &str) -> Option<usize> {
        self.npi_index.get(npi).copied()
    }

    /// Specialty as first seen for each prescriber.
    pub fn specialties(&self) -> &[String] {
        &self.specialties
    }

    pub fn years(&self) -> &BTreeSet<i32> {
        &self.years
    }

    /// Non-fatal notes produced while building the table.
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Record indices grouped by prescriber, each group in record order.
    pub fn records_by_prescriber(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.npis.len()];
        for (k, r) in self.records.iter().enumerate() {
            groups[r.prescriber].push(k);
        }
        groups
    }

    /// Sum of each metric over all records.
    pub fn metric_totals(&self) -> Metrics {
        let mut out = [0.0; 5];
        for r in &self.records {
            for (o, v) in out.iter_mut().zip(r.metrics) {
                *o += v;
            }
        }
        out
    }

    /// Per-drug (total cost, total claims), indexed by `DrugId`.
    pub fn drug_cost_claims(&self) -> Vec<(f64, f64)> {
        let mut out = vec![(0.0, 0.0); self.vocabulary.len()];
        for r in &self.records {
            let e = &mut out[r.drug.0];
            e.0 += r.metric(Channel::Cost);
            e.1 += r.metric(Channel::Clm);
        }
        out
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(CLAIMS_HEADER)?;
        for r in &self.records {
            let mut row = vec![
                self.npis[r.prescriber].clone(),
                r.year.to_string(),
                self.specialties[r.prescriber].clone(),
                self.vocabulary.name(r.drug).to_owned(),
            ];
            row.extend(r.metrics.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<claims writer>", e))?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Incremental constructor shared by the CSV parser and in-memory producers.
#[derive(Debug, Default)]
pub struct ClaimsBuilder {
    records: Vec<ClaimRecord>,
    key_index: HashMap<(usize, i32, usize), usize>,
    vocabulary: DrugVocabulary,
    npis: Vec<String>,
    npi_index: HashMap<String, usize>,
    specialties: Vec<String>,
    years: BTreeSet<i32>,
    warnings: Vec<String>,
}

impl ClaimsBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Seeds the drug vocabulary so indices follow the given order.
    pub fn with_drugs<S: AsRef<str>>(names: &[S]) -> Self {
        let mut b = Self::default();
        for n in names {
            b.vocabulary.intern(n.as_ref());
        }
        b
    }

    /// Adds one row. Duplicate keys are summed into the existing record.
    pub fn push(
        &mut self,
        npi: &str,
        year: i32,
        specialty: &str,
        drug: &str,
        metrics: Metrics,
    ) -> Result<()> {
        for (c, v) in Channel::ALL.iter().zip(metrics) {
            if !v.is_finite() {
                return Err(Error::Invalid(format!("non-finite {c} value {v}")));
            }
            if v < 0.0 {
                return Err(Error::Invalid(format!("negative {c} value {v}")));
            }
        }
        let prescriber = match self.npi_index.get(npi) {
            Some(&i) => i,
            None => {
                let i = self.npis.len();
                self.npis.push(npi.to_owned());
                self.specialties.push(specialty.to_owned());
                self.npi_index.insert(npi.to_owned(), i);
                i
            }
        };
        let drug = self.vocabulary.intern(drug);
        self.years.insert(year);
        let key = (prescriber, year, drug.0);
        if let Some(&k) = self.key_index.get(&key) {
            let rec = &mut self.records[k];
            for (a, b) in rec.metrics.iter_mut().zip(metrics) {
                *a += b;
            }
            let name = self.vocabulary.name(drug);
            let msg = format!("duplicate row for npi {npi}, year {year}, drug {name}: values summed");
            log::warn!("{msg}");
            self.warnings.push(msg);
        } else {
            self.key_index.insert(key, self.records.len());
            self.records.push(ClaimRecord {
                prescriber,
                year,
                drug,
                metrics,
            });
        }
        Ok(())
    }

    pub fn finish(self) -> ClaimsTable {
        ClaimsTable {
            records: self.records,
            vocabulary: Arc::new(self.vocabulary),
            npis: self.npis,
            npi_index: self.npi_index,
            specialties: self.specialties,
            years: self.years,
            warnings: self.warnings,
        }
    }
}

fn check_header(got: &csv::StringRecord, want: &[&str], origin: &Path) -> Result<()> {
    if got.iter().ne(want.iter().copied()) {
        return Err(Error::parse(
            origin,
            1,
            format!(
                "expected header `{}`, found `{}`",
                want.join(","),
                got.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }
    Ok(())
}

pub fn read_claims<R: Read>(reader: R, origin: &Path) -> Result<ClaimsTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    if rdr.headers()?.is_empty() {
        return Ok(ClaimsBuilder::new().finish());
    }
    check_header(rdr.headers()?, &CLAIMS_HEADER, origin)?;
    let mut b = ClaimsBuilder::new();
    let mut rec = csv::StringRecord::new();
    loop {
        match rdr.read_record(&mut rec) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                return Err(Error::parse(origin, line, e.to_string()));
            }
        }
        let line = rec.position().map_or(0, |p| p.line());
        let year: i32 = rec[1]
            .trim()
            .parse()
            .map_err(|_| Error::parse(origin, line, format!("malformed year {:?}", &rec[1])))?;
        let mut metrics = [0.0; 5];
        for (k, m) in metrics.iter_mut().enumerate() {
            let raw = rec[4 + k].trim();
            let v: f64 = raw.parse().map_err(|_| {
                Error::parse(origin, line, format!("malformed number {raw:?} in {}", CLAIMS_HEADER[4 + k]))
            })?;
            if !v.is_finite() {
                return Err(Error::parse(origin, line, format!("non-finite {}", CLAIMS_HEADER[4 + k])));
            }
            if v < 0.0 {
                return Err(Error::parse(
                    origin,
                    line,
                    format!("negative value {v} in {}", CLAIMS_HEADER[4 + k]),
                ));
            }
            *m = v;
        }
        if rec[0].is_empty() || rec[3].is_empty() {
            return Err(Error::parse(origin, line, "empty npi or drug"));
        }
        b.push(&rec[0], year, &rec[2], &rec[3], metrics)
            .map_err(|e| Error::parse(origin, line, e.to_string()))?;
    }
    Ok(b.finish())
}

pub fn parse_claims_csv(path: &Path) -> Result<ClaimsTable> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_claims(std::io::BufReader::new(f), path)
}

/// What to do with a label whose npi has no claims.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnknownNpiPolicy {
    #[default]
    Skip,
    Error,
}

/// Labels for the labeled subset, keyed by prescriber index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelTable {
    entries: Vec<(usize, bool)>,
    index: HashMap<usize, bool>,
    skipped: Vec<String>,
}

impl LabelTable {
    pub fn from_entries(entries: Vec<(usize, bool)>) -> Result<Self> {
        let mut t = LabelTable::default();
        for (p, y) in entries {
            t.insert(p, y)?;
        }
        Ok(t)
    }

    fn insert(&mut self, prescriber: usize, label: bool) -> Result<bool> {
        match self.index.get(&prescriber) {
            Some(&old) if old != label => Err(Error::Invalid(format!(
                "conflicting labels for prescriber index {prescriber}"
            ))),
            Some(_) => Ok(false),
            None => {
                self.index.insert(prescriber, label);
                self.entries.push((prescriber, label));
                Ok(true)
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, prescriber: usize) -> Option<bool> {
        self.index.get(&prescriber).copied()
    }

    /// Labeled prescribers in file order.
    pub fn entries(&self) -> &[(usize, bool)] {
        &self.entries
    }

    /// npis that were skipped because they do not appear in the claims.
    pub fn skipped(&self) -> &[String] {
        &self.skipped
    }

    pub fn positives(&self) -> usize {
        self.entries.iter().filter(|e| e.1).count()
    }

    /// Dense per-prescriber view: `Some(label)` for labeled rows.
    pub fn to_dense(&self, n: usize) -> Vec<Option<bool>> {
        let mut out = vec![None; n];
        for &(p, y) in &self.entries {
            if p < n {
                out[p] = Some(y);
            }
        }
        out
    }

    /// Keeps only the listed prescribers.
    pub fn restricted_to(&self, keep: &BTreeSet<usize>) -> LabelTable {
        let entries = self.entries.iter().copied().filter(|(p, _)| keep.contains(p)).collect();
        LabelTable::from_entries(entries).expect("subset of a consistent table")
    }
}

pub fn read_labels<R: Read>(
    reader: R,
    origin: &Path,
    npi_index: impl Fn(&str) -> Option<usize>,
    policy: UnknownNpiPolicy,
) -> Result<LabelTable> {
    let mut rdr = csv::Reader::from_reader(reader);
    check_header(rdr.headers()?, &LABELS_HEADER, origin)?;
    let mut table = LabelTable::default();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let label = match rec[1].trim() {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::parse(
                    origin,
                    line,
                    format!("label must be 0 or 1, found {other:?}"),
                ))
            }
        };
        let npi = &rec[0];
        match npi_index(npi) {
            Some(p) => {
                table
                    .insert(p, label)
                    .map_err(|_| Error::parse(origin, line, format!("conflicting label for npi {npi}")))?;
            }
            None if policy == UnknownNpiPolicy::Error => {
                return Err(Error::parse(origin, line, format!("npi {npi} does not appear in claims")));
            }
            None => table.skipped.push(npi.to_owned()),
        }
    }
    if !table.skipped.is_empty() {
        log::warn!(
            "{}: skipped {} label(s) whose npi has no claims",
            origin.display(),
            table.skipped.len()
        );
    }
    Ok(table)
}

pub fn parse_labels(path: &Path, claims: &ClaimsTable, policy: UnknownNpiPolicy) -> Result<LabelTable> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_labels(f, path, |n| claims.prescriber(n), policy)
}

/// Writes `npi,label` rows for the given (npi, label) pairs.
pub fn write_labels<W: Write>(writer: W, rows: &[(String, bool)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(LABELS_HEADER)?;
    for (npi, y) in rows {
        w.write_record([npi.as_str(), if *y { "1" } else { "0" }])?;
    }
    w.flush().map_err(|e| Error::io("<labels writer>", e))?;
    Ok(())
}
