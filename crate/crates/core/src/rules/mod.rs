//! Weighted domain rules over a drug vocabulary.
//!
//! A binary rule `(p, q, w)` reads "drug p should not be preferred over its
//! equivalent q"; a unary rule `(p, w)` reads "drug p should stay low". The
//! order of rules in a [`RuleSet`] fixes the feature-block layout downstream.

pub mod derive;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DrugId(pub usize);

/// Ordered drug names with reverse lookup.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DrugVocabulary {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl DrugVocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_names<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self::new();
        for n in names {
            let n = n.into();
            if v.index.contains_key(&n) {
                return Err(Error::Invalid(format!("duplicate drug name {n:?} in vocabulary")));
            }
            v.intern(&n);
        }
        Ok(v)
    }

    /// Returns the id for `name`, adding it at the end if unseen.
    pub fn intern(&mut self, name: &str) -> DrugId {
        if let Some(&i) = self.index.get(name) {
            return DrugId(i);
        }
        let i = self.names.len();
        self.names.push(name.to_owned());
        self.index.insert(name.to_owned(), i);
        DrugId(i)
    }

    pub fn get(&self, name: &str) -> Option<DrugId> {
        self.index.get(name).map(|&i| DrugId(i))
    }

    pub fn name(&self, id: DrugId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleKind {
    Binary,
    Unary,
}

impl RuleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RuleKind::Binary => "binary",
            RuleKind::Unary => "unary",
        }
    }
}

impl std::str::FromStr for RuleKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "binary" => Ok(RuleKind::Binary),
            "unary" => Ok(RuleKind::Unary),
            other => Err(format!("unknown rule kind {other:?} (expected binary or unary)")),
        }
    }
}

/// Rule families used by the ablation protocol. Binary rules encode cost
/// preference between equivalent drugs, unary rules encode opioid overuse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleGroup {
    CostPreference,
    Opioid,
}

impl RuleGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            RuleGroup::CostPreference => "cost_preference",
            RuleGroup::Opioid => "opioid",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rule {
    pub kind: RuleKind,
    pub p: DrugId,
    pub q: Option<DrugId>,
    pub weight: f64,
}

fn check_weight(w: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Invalid(format!("weight out of range [0,1]: {w}")));
    }
    Ok(())
}

impl Rule {
    pub fn binary(p: DrugId, q: DrugId, weight: f64) -> Result<Self> {
        check_weight(weight)?;
        if p == q {
            return Err(Error::Invalid(format!(
                "binary rule needs two different drugs, got p = q = {}",
                p.0
            )));
        }
        Ok(Self {
            kind: RuleKind::Binary,
            p,
            q: Some(q),
            weight,
        })
    }

    pub fn unary(p: DrugId, weight: f64) -> Result<Self> {
        check_weight(weight)?;
        Ok(Self {
            kind: RuleKind::Unary,
            p,
            q: None,
            weight,
        })
    }

    pub fn group(&self) -> RuleGroup {
        match self.kind {
            RuleKind::Binary => RuleGroup::CostPreference,
            RuleKind::Unary => RuleGroup::Opioid,
        }
    }
}

/// A rule referring to drugs by name, as written in a rules file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedRule {
    pub kind: RuleKind,
    pub p: String,
    pub q: Option<String>,
    pub weight: f64,
}

impl NamedRule {
    pub fn binary(p: impl Into<String>, q: impl Into<String>, weight: f64) -> Self {
        Self {
            kind: RuleKind::Binary,
            p: p.into(),
            q: Some(q.into()),
            weight,
        }
    }

    pub fn unary(p: impl Into<String>, weight: f64) -> Self {
        Self {
            kind: RuleKind::Unary,
            p: p.into(),
            q: None,
            weight,
        }
    }
}

/// Ordered, validated rules bound to a drug vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleSet {
    rules: Vec<Rule>,
    vocabulary: Arc<DrugVocabulary>,
}

impl RuleSet {
    pub fn new(rules: Vec<Rule>, vocabulary: Arc<DrugVocabulary>) -> Result<Self> {
        if rules.is_empty() {
            return Err(Error::Invalid("rule set is empty".into()));
        }
        let mut seen = HashSet::new();
        for (j, r) in rules.iter().enumerate() {
            for id in std::iter::once(r.p).chain(r.q) {
                if id.0 >= vocabulary.len() {
                    return Err(Error::Invalid(format!(
                        "rule {} refers to drug index {} outside vocabulary of size {}",
                        j + 1,
                        id.0,
                        vocabulary.len()
                    )));
                }
            }
            match (r.kind, r.q) {
                (RuleKind::Binary, Some(q)) if q != r.p => {}
                (RuleKind::Unary, None) => {}
                _ => {
                    return Err(Error::Invalid(format!(
                        "rule {} has inconsistent kind and comparator",
                        j + 1
                    )))
                }
            }
            check_weight(r.weight)?;
            if !seen.insert((r.kind, r.p, r.q)) {
                return Err(Error::Invalid(format!("duplicate rule at position {}", j + 1)));
            }
        }
        Ok(Self { rules, vocabulary })
    }

    /// Resolves named rules against `vocabulary`.
    pub fn from_named(named: &[NamedRule], vocabulary: Arc<DrugVocabulary>) -> Result<Self> {
        let resolve = |name: &str| {
            vocabulary
                .get(name)
                .ok_or_else(|| Error::Invalid(format!("unknown drug name {name:?}")))
        };
        let mut rules = Vec::with_capacity(named.len());
        for n in named {
            let p = resolve(&n.p)?;
            let rule = match (n.kind, &n.q) {
                (RuleKind::Binary, Some(q)) => Rule::binary(p, resolve(q)?, n.weight)?,
                (RuleKind::Unary, None) => Rule::unary(p, n.weight)?,
                (RuleKind::Binary, None) => {
                    return Err(Error::Invalid(format!("binary rule on {:?} lacks drug_q", n.p)))
                }
                (RuleKind::Unary, Some(_)) => {
                    return Err(Error::Invalid(format!("unary rule on {:?} must leave drug_q empty", n.p)))
                }
            };
            rules.push(rule);
        }
        Self::new(rules, vocabulary)
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn get(&self, j: usize) -> &Rule {
        &self.rules[j]
    }

    pub fn vocabulary(&self) -> &Arc<DrugVocabulary> {
        &self.vocabulary
    }

    pub fn weights(&self) -> Vec<f64> {
        self.rules.iter().map(|r| r.weight).collect()
    }

    pub fn to_named(&self) -> Vec<NamedRule> {
        self.rules
            .iter()
            .map(|r| NamedRule {
                kind: r.kind,
                p: self.vocabulary.name(r.p).to_owned(),
                q: r.q.map(|q| self.vocabulary.name(q).to_owned()),
                weight: r.weight,
            })
            .collect()
    }

    /// Rules not belonging to any of `groups`, in original order.
    pub fn without_groups(&self, groups: &[RuleGroup]) -> Result<Self> {
        let kept = self
            .rules
            .iter()
            .filter(|r| !groups.contains(&r.group()))
            .copied()
            .collect();
        Self::new(kept, Arc::clone(&self.vocabulary))
    }

    /// Canonical CSV text; the basis of [`RuleSet::fingerprint`].
    pub fn to_csv_string(&self) -> String {
        named_rules_to_csv(&self.to_named())
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_csv_string().as_bytes()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }
}

impl fmt::Display for RuleSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_csv_string())
    }
}

pub const RULES_HEADER: &str = "kind,drug_p,drug_q,weight";

/// Serializes rules in file order. Weights use the shortest exact decimal.
pub fn named_rules_to_csv(rules: &[NamedRule]) -> String {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(RULES_HEADER.split(',')).expect("in-memory write");
    for r in rules {
        w.write_record([
            r.kind.as_str(),
            r.p.as_str(),
            r.q.as_deref().unwrap_or(""),
            &r.weight.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
}

pub fn write_named_rules(path: &Path, rules: &[NamedRule]) -> Result<()> {
    std::fs::write(path, named_rules_to_csv(rules)).map_err(|e| Error::io(path, e))
}

/// Reads a rules CSV into name-level rules without resolving drugs.
pub fn read_named_rules<R: Read>(reader: R, origin: &Path) -> Result<Vec<NamedRule>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != RULES_HEADER.split(',').collect::<Vec<_>>() {
        return Err(Error::parse(
            origin,
            1,
            format!("expected header `{RULES_HEADER}`, found `{}`", headers.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 4 {
            return Err(Error::parse(origin, line, format!("expected 4 fields, found {}", rec.len())));
        }
        let kind: RuleKind = rec[0].parse().map_err(|m| Error::parse(origin, line, m))?;
        let weight: f64 = rec[3]
            .trim()
            .parse()
            .map_err(|_| Error::parse(origin, line, format!("malformed weight {:?}", &rec[3])))?;
        if !(0.0..=1.0).contains(&weight) {
            return Err(Error::parse(origin, line, format!("weight out of range [0,1]: {weight}")));
        }
        let q = (!rec[2].is_empty()).then(|| rec[2].to_owned());
        out.push(NamedRule {
            kind,
            p: rec[1].to_owned(),
            q,
            weight,
        });
    }
    Ok(out)
}

/// Parses a rules file against the claims vocabulary.
pub fn parse_rules(path: &Path, vocabulary: Arc<DrugVocabulary>) -> Result<RuleSet> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_rules_from_reader(file, path, vocabulary)
}

pub fn parse_rules_from_reader<R: Read>(
    reader: R,
    origin: &Path,
    vocabulary: Arc<DrugVocabulary>,
) -> Result<RuleSet> {
    let named = read_named_rules(reader, origin)?;
    // resolve line by line so errors carry a position
    let mut seen = HashSet::new();
    for (i, n) in named.iter().enumerate() {
        let line = i as u64 + 2;
        for name in std::iter::once(&n.p).chain(n.q.as_ref()) {
            if vocabulary.get(name).is_none() {
                return Err(Error::parse(origin, line, format!("unknown drug name {name:?}")));
            }
        }
        match (n.kind, &n.q) {
            (RuleKind::Binary, Some(q)) if *q == n.p => {
                return Err(Error::parse(origin, line, format!("binary rule with p = q = {q:?}")))
            }
            (RuleKind::Binary, None) => {
                return Err(Error::parse(origin, line, "binary rule lacks drug_q"))
            }
            (RuleKind::Unary, Some(_)) => {
                return Err(Error::parse(origin, line, "unary rule must leave drug_q empty"))
            }
            _ => {}
        }
        if !seen.insert((n.kind, n.p.clone(), n.q.clone())) {
            return Err(Error::parse(origin, line, "duplicate rule"));
        }
    }
    RuleSet::from_named(&named, vocabulary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Arc<DrugVocabulary> {
        Arc::new(DrugVocabulary::from_names(["DrugX", "DrugY", "OpioidZ"]).unwrap())
    }

    fn parse(text: &str) -> Result<RuleSet> {
        parse_rules_from_reader(text.as_bytes(), Path::new("rules.csv"), vocab())
    }

    #[test]
    fn parses_binary_rule() {
        let rs = parse("kind,drug_p,drug_q,weight\nbinary,DrugX,DrugY,0.8\n").unwrap();
        assert_eq!(rs.len(), 1);
        let r = rs.get(0);
        assert_eq!(r.kind, RuleKind::Binary);
        assert_eq!((r.p, r.q), (DrugId(0), Some(DrugId(1))));
        assert_eq!(r.weight, 0.8);
    }

    #[test]
    fn parses_unary_rule() {
        let rs = parse("kind,drug_p,drug_q,weight\nunary,OpioidZ,,0.6\n").unwrap();
        let r = rs.get(0);
        assert_eq!(r.kind, RuleKind::Unary);
        assert_eq!(r.q, None);
        assert_eq!(r.weight, 0.6);
        assert_eq!(r.group(), RuleGroup::Opioid);
    }

    #[test]
    fn rejects_bad_rules() {
        let err = parse("kind,drug_p,drug_q,weight\nbinary,DrugX,DrugY,1.2\n").unwrap_err();
        assert!(err.to_string().contains("weight out of range"), "{err}");
        assert!(err.to_string().contains(":2:"), "{err}");
        let err = parse("kind,drug_p,drug_q,weight\nbinary,DrugX,Nope,0.5\n").unwrap_err();
        assert!(err.to_string().contains("unknown drug"), "{err}");
        let err = parse("kind,drug_p,drug_q,weight\nbinary,DrugX,DrugX,0.5\n").unwrap_err();
        assert!(err.to_string().contains("p = q"), "{err}");
        let err = parse("kind,drug_p,drug_q,weight\nunary,DrugX,,0.5\nbinary,DrugX,DrugY,0.5\nunary,DrugX,,0.1\n")
            .unwrap_err();
        assert!(err.to_string().contains("duplicate") && err.to_string().contains(":4:"), "{err}");
        assert!(parse("kind,drug_p,drug_q,weight\n").is_err());
        assert!(parse("kind,p,q,w\nunary,DrugX,,0.5\n").is_err());
        assert!(parse("kind,drug_p,drug_q,weight\nternary,DrugX,,0.5\n").is_err());
    }

    #[test]
    fn round_trip_and_fingerprint() {
        let text = "kind,drug_p,drug_q,weight\nbinary,DrugY,DrugX,0.3333333333333333\nunary,OpioidZ,,0.6\n";
        let rs = parse(text).unwrap();
        assert_eq!(rs.to_csv_string(), text);
        let again = parse(&rs.to_csv_string()).unwrap();
        assert_eq!(rs, again);
        assert_eq!(rs.fingerprint(), again.fingerprint());
        assert_eq!(rs.fingerprint().len(), 64);
        let other = parse("kind,drug_p,drug_q,weight\nunary,OpioidZ,,0.6\nbinary,DrugY,DrugX,0.3333333333333333\n").unwrap();
        assert_ne!(rs.fingerprint(), other.fingerprint());
    }

    #[test]
    fn group_filtering() {
        let rs = parse("kind,drug_p,drug_q,weight\nbinary,DrugY,DrugX,0.5\nunary,OpioidZ,,0.6\nunary,DrugX,,0.2\n").unwrap();
        let no_opioid = rs.without_groups(&[RuleGroup::Opioid]).unwrap();
        assert_eq!(no_opioid.len(), 1);
        let no_cost = rs.without_groups(&[RuleGroup::CostPreference]).unwrap();
        assert_eq!(no_cost.len(), 2);
        assert!(rs.without_groups(&[RuleGroup::Opioid, RuleGroup::CostPreference]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn serialize_parse_round_trip(
                picks in proptest::collection::btree_set((0usize..6, 0usize..7), 1..12),
                weights in proptest::collection::vec(0.0f64..=1.0, 12),
            ) {
                let names: Vec<String> = (0..6).map(|i| format!("drug {i}, \"quoted\"")).collect();
                let vocab = Arc::new(DrugVocabulary::from_names(names).unwrap());
                let rules: Vec<Rule> = picks
                    .iter()
                    .zip(&weights)
                    .filter_map(|(&(p, q), &w)| {
                        if q == 6 {
                            Some(Rule::unary(DrugId(p), w).unwrap())
                        } else if q != p {
                            Some(Rule::binary(DrugId(p), DrugId(q), w).unwrap())
                        } else {
                            None
                        }
                    })
                    .collect();
                prop_assume!(!rules.is_empty());
                let rs = RuleSet::new(rules, Arc::clone(&vocab)).unwrap();
                let back = parse_rules_from_reader(rs.to_csv_string().as_bytes(), Path::new("x"), vocab).unwrap();
                prop_assert_eq!(rs, back);
            }
        }
    }
}
