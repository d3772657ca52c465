//! Offline rule authoring: cost-preference pairs from drug-target overlap and
//! price gaps, unary rules from opioid annotations.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::NamedRule;
use crate::error::{Error, Result};

pub type TargetSet = BTreeSet<String>;

/// Drug name to its set of protein targets.
pub type DrugTargetMap = BTreeMap<String, TargetSet>;

/// Ratio of intersection to union. Both sets must be non-empty.
pub fn jaccard(a: &TargetSet, b: &TargetSet) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::UndefinedMetric(
            "jaccard similarity of an empty target set".into(),
        ));
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    Ok(inter as f64 / union as f64)
}

/// Reads `drug,target` lines into a target map.
pub fn read_drug_targets<R: Read>(reader: R, origin: &Path) -> Result<DrugTargetMap> {
    let mut rdr = csv::Reader::from_reader(reader);
    expect_header(&mut rdr, &["drug", "target"], origin)?;
    let mut map = DrugTargetMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 2 || rec[0].is_empty() || rec[1].is_empty() {
            return Err(Error::parse(origin, line, "expected non-empty `drug,target`"));
        }
        map.entry(rec[0].to_owned())
            .or_default()
            .insert(rec[1].to_owned());
    }
    Ok(map)
}

pub fn parse_drug_targets(path: &Path) -> Result<DrugTargetMap> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_drug_targets(f, path)
}

fn expect_header<R: Read>(rdr: &mut csv::Reader<R>, want: &[&str], origin: &Path) -> Result<()> {
    let got: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if got.len() < want.len() || got[..want.len()] != *want {
        return Err(Error::parse(
            origin,
            1,
            format!("expected header starting `{}`, found `{}`", want.join(","), got.join(",")),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceStats {
    pub total_cost: f64,
    pub total_claims: f64,
}

impl PriceStats {
    pub fn cost_per_claim(&self) -> Option<f64> {
        (self.total_claims > 0.0).then(|| self.total_cost / self.total_claims)
    }
}

/// Relative-gap cutoffs, `(costlier - cheaper) / cheaper`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GapThresholds {
    pub moderate: f64,
    pub high: f64,
    pub extreme: f64,
}

impl Default for GapThresholds {
    fn default() -> Self {
        Self {
            moderate: 0.5,
            high: 1.0,
            extreme: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriceTier {
    Moderate,
    High,
    Extreme,
}

impl GapThresholds {
    pub fn tier(&self, gap: f64) -> Option<PriceTier> {
        if gap >= self.extreme {
            Some(PriceTier::Extreme)
        } else if gap >= self.high {
            Some(PriceTier::High)
        } else if gap >= self.moderate {
            Some(PriceTier::Moderate)
        } else {
            None
        }
    }

    /// `min(1, gap / extreme)`.
    pub fn weight(&self, gap: f64) -> f64 {
        (gap / self.extreme).min(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRuleCandidate {
    pub costlier: String,
    pub cheaper: String,
    pub gap: f64,
    pub weight: f64,
    pub tier: PriceTier,
}

impl CostRuleCandidate {
    pub fn to_rule(&self) -> NamedRule {
        NamedRule::binary(&self.costlier, &self.cheaper, self.weight)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CostDerivation {
    pub candidates: Vec<CostRuleCandidate>,
    /// Human-readable notes for pairs skipped for lack of price data.
    pub warnings: Vec<String>,
}

/// Emits a binary rule (costlier, cheaper) for every pair of drugs with
/// identical target sets whose relative price gap reaches the moderate tier.
///
/// Output is sorted by drug names, each unordered pair at most once.
pub fn derive_cost_preference_rules(
    targets: &DrugTargetMap,
    prices: &BTreeMap<String, PriceStats>,
    thresholds: &GapThresholds,
) -> Result<CostDerivation> {
    if !(0.0 < thresholds.moderate
        && thresholds.moderate <= thresholds.high
        && thresholds.high <= thresholds.extreme)
    {
        return Err(Error::Invalid(format!(
            "gap thresholds must satisfy 0 < moderate <= high <= extreme, got {thresholds:?}"
        )));
    }
    let drugs: Vec<(&String, &TargetSet)> = targets.iter().filter(|(_, t)| !t.is_empty()).collect();
    let mut out = CostDerivation::default();
    for i in 0..drugs.len() {
        for j in i + 1..drugs.len() {
            let (a, ta) = drugs[i];
            let (b, tb) = drugs[j];
            if jaccard(ta, tb)? < 1.0 {
                continue;
            }
            let cpc = |d: &String| prices.get(d).and_then(PriceStats::cost_per_claim);
            let (Some(ca), Some(cb)) = (cpc(a), cpc(b)) else {
                let msg = format!("skipping pair ({a}, {b}): missing or zero-claim price stats");
                log::warn!("{msg}");
                out.warnings.push(msg);
                continue;
            };
            let (costlier, cheaper, hi, lo) = if ca >= cb { (a, b, ca, cb) } else { (b, a, cb, ca) };
            if lo <= 0.0 || hi == lo {
                continue;
            }
            let gap = (hi - lo) / lo;
            if let Some(tier) = thresholds.tier(gap) {
                out.candidates.push(CostRuleCandidate {
                    costlier: costlier.clone(),
                    cheaper: cheaper.clone(),
                    gap,
                    weight: thresholds.weight(gap),
                    tier,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FraudLikelihood {
    Low,
    High,
}

impl FraudLikelihood {
    pub fn as_str(self) -> &'static str {
        match self {
            FraudLikelihood::Low => "low",
            FraudLikelihood::High => "high",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpioidAnnotation {
    pub drug: String,
    pub likelihood: FraudLikelihood,
    pub weight: Option<f64>,
}

pub const DEFAULT_UNARY_WEIGHT: f64 = 0.5;

/// Reads `drug,likelihood[,weight]`.
pub fn read_opioid_annotations<R: Read>(reader: R, origin: &Path) -> Result<Vec<OpioidAnnotation>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    expect_header(&mut rdr, &["drug", "likelihood"], origin)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() < 2 || rec.len() > 3 {
            return Err(Error::parse(origin, line, "expected `drug,likelihood[,weight]`"));
        }
        let likelihood = match &rec[1] {
            "low" => FraudLikelihood::Low,
            "high" => FraudLikelihood::High,
            other => {
                return Err(Error::parse(
                    origin,
                    line,
                    format!("unknown likelihood label {other:?} (expected low or high)"),
                ))
            }
        };
        let weight = match rec.get(2).filter(|s| !s.is_empty()) {
            None => None,
            Some(s) => {
                let w: f64 = s
                    .parse()
                    .map_err(|_| Error::parse(origin, line, format!("malformed weight {s:?}")))?;
                if !(0.0..=1.0).contains(&w) {
                    return Err(Error::parse(origin, line, format!("weight out of range [0,1]: {w}")));
                }
                Some(w)
            }
        };
        out.push(OpioidAnnotation {
            drug: rec[0].to_owned(),
            likelihood,
            weight,
        });
    }
    Ok(out)
}

pub fn parse_opioid_annotations(path: &Path) -> Result<Vec<OpioidAnnotation>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_opioid_annotations(f, path)
}

/// One unary rule per high-likelihood drug, in file order.
pub fn derive_opioid_rules(annotations: &[OpioidAnnotation]) -> Vec<NamedRule> {
    annotations
        .iter()
        .filter(|a| a.likelihood == FraudLikelihood::High)
        .map(|a| NamedRule::unary(&a.drug, a.weight.unwrap_or(DEFAULT_UNARY_WEIGHT)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rules::RuleKind;

    fn set(items: &[&str]) -> TargetSet {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn jaccard_examples() {
        let a = set(&["t1", "t2"]);
        assert_eq!(jaccard(&a, &a).unwrap(), 1.0);
        assert_eq!(jaccard(&a, &set(&["t3"])).unwrap(), 0.0);
        assert!((jaccard(&a, &set(&["t2", "t3"])).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(jaccard(&a, &set(&[])).is_err());
    }

    fn prices(entries: &[(&str, f64, f64)]) -> BTreeMap<String, PriceStats> {
        entries
            .iter()
            .map(|&(d, cost, claims)| {
                (
                    d.to_string(),
                    PriceStats {
                        total_cost: cost,
                        total_claims: claims,
                    },
                )
            })
            .collect()
    }

    #[test]
    fn equal_prices_emit_nothing() {
        let mut t = DrugTargetMap::new();
        t.insert("A".into(), set(&["x"]));
        t.insert("B".into(), set(&["x"]));
        let d = derive_cost_preference_rules(
            &t,
            &prices(&[("A", 1000.0, 10.0), ("B", 500.0, 5.0)]),
            &GapThresholds::default(),
        )
        .unwrap();
        assert!(d.candidates.is_empty());
    }

    #[test]
    fn extreme_gap_gets_full_weight() {
        let mut t = DrugTargetMap::new();
        t.insert("Cheap".into(), set(&["x", "y"]));
        t.insert("Pricey".into(), set(&["x", "y"]));
        let d = derive_cost_preference_rules(
            &t,
            &prices(&[("Cheap", 1000.0, 10.0), ("Pricey", 3000.0, 10.0)]),
            &GapThresholds::default(),
        )
        .unwrap();
        assert_eq!(d.candidates.len(), 1);
        let c = &d.candidates[0];
        assert_eq!((c.costlier.as_str(), c.cheaper.as_str()), ("Pricey", "Cheap"));
        assert_eq!(c.gap, 2.0);
        assert_eq!(c.weight, 1.0);
        assert_eq!(c.tier, PriceTier::Extreme);
        let r = c.to_rule();
        assert_eq!(r.kind, RuleKind::Binary);
        assert_eq!(r.p, "Pricey");
    }

    #[test]
    fn partial_overlap_is_excluded() {
        let mut t = DrugTargetMap::new();
        t.insert("A".into(), set(&["x", "y"]));
        t.insert("B".into(), set(&["y", "z", "x"]));
        t.insert("C".into(), set(&["x"]));
        let d = derive_cost_preference_rules(
            &t,
            &prices(&[("A", 100.0, 1.0), ("B", 900.0, 1.0), ("C", 9000.0, 1.0)]),
            &GapThresholds::default(),
        )
        .unwrap();
        assert!(d.candidates.is_empty());
    }

    #[test]
    fn tiers_and_missing_prices() {
        let mut t = DrugTargetMap::new();
        for d in ["A", "B", "C", "D"] {
            t.insert(d.into(), set(&["x"]));
        }
        let p = prices(&[("A", 100.0, 1.0), ("B", 160.0, 1.0), ("C", 110.0, 1.0)]);
        let d = derive_cost_preference_rules(&t, &p, &GapThresholds::default()).unwrap();
        // A-B gap 0.6 (moderate), B-C gap 0.4545 (none), A-C 0.1 (none); D has no price
        assert_eq!(d.candidates.len(), 1);
        assert_eq!(d.candidates[0].tier, PriceTier::Moderate);
        assert!((d.candidates[0].weight - 0.3).abs() < 1e-12);
        assert_eq!(d.warnings.len(), 3);
    }

    #[test]
    fn opioid_rules_from_annotations() {
        let mut text = String::from("drug,likelihood,weight\n");
        for i in 0..37 {
            text.push_str(&format!("opioid{i},high,\n"));
        }
        for i in 0..5 {
            text.push_str(&format!("other{i},low,\n"));
        }
        text.push_str("special,high,0.9\n");
        let ann = read_opioid_annotations(text.as_bytes(), Path::new("o.csv")).unwrap();
        let rules = derive_opioid_rules(&ann);
        assert_eq!(rules.len(), 38);
        assert_eq!(rules[0].weight, DEFAULT_UNARY_WEIGHT);
        assert_eq!(rules[37].weight, 0.9);
        assert!(rules.iter().all(|r| r.kind == RuleKind::Unary));

        let low_only = read_opioid_annotations("drug,likelihood\na,low\n".as_bytes(), Path::new("o")).unwrap();
        assert!(derive_opioid_rules(&low_only).is_empty());

        let err = read_opioid_annotations("drug,likelihood\na,medium\n".as_bytes(), Path::new("o")).unwrap_err();
        assert!(err.to_string().contains("unknown likelihood"));
    }

    #[test]
    fn drug_target_file() {
        let m = read_drug_targets("drug,target\nA,t1\nA,t2\nB,t1\n".as_bytes(), Path::new("t")).unwrap();
        assert_eq!(m["A"].len(), 2);
        assert_eq!(m["B"].len(), 1);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn target_set() -> impl Strategy<Value = TargetSet> {
            proptest::collection::btree_set("[a-e]", 1..5)
        }

        proptest! {
            #[test]
            fn jaccard_properties(a in target_set(), b in target_set()) {
                let ab = jaccard(&a, &b).unwrap();
                prop_assert_eq!(ab, jaccard(&b, &a).unwrap());
                prop_assert!((0.0..=1.0).contains(&ab));
                prop_assert_eq!(ab == 1.0, a == b);
            }

            #[test]
            fn each_pair_once_costlier_first(
                groups in proptest::collection::vec(0usize..3, 2..8),
                costs in proptest::collection::vec(1.0f64..100.0, 8),
            ) {
                let mut t = DrugTargetMap::new();
                let mut p = BTreeMap::new();
                for (i, g) in groups.iter().enumerate() {
                    t.insert(format!("d{i}"), set(&[&format!("g{g}")]));
                    p.insert(format!("d{i}"), PriceStats { total_cost: costs[i], total_claims: 1.0 });
                }
                let d = derive_cost_preference_rules(&t, &p, &GapThresholds::default()).unwrap();
                let mut seen = BTreeSet::new();
                for c in &d.candidates {
                    let key = if c.costlier < c.cheaper { (c.costlier.clone(), c.cheaper.clone()) } else { (c.cheaper.clone(), c.costlier.clone()) };
                    prop_assert!(seen.insert(key));
                    prop_assert!(p[&c.costlier].total_cost > p[&c.cheaper].total_cost);
                    prop_assert!(c.weight > 0.0 && c.weight <= 1.0);
                }
            }
        }
    }
}
