//! Synthetic claims with planted cost-preference and opioid fraud.
//!
//! Each provider holds a persistent prescribing profile: class shares from a
//! sparse Dirichlet, where a class is one interchangeable pair or one single
//! drug, and a near-balanced split inside each pair. Every year draws drug
//! shares from a Dirichlet centred on that profile. Planted frauds distort
//! the yearly shares before claims are sampled, so every metric channel
//! carries the distortion. Drugs are laid out as `n_pairs`
//! interchangeable pairs (costlier member first), then `n_opioids` opioids,
//! then unconstrained fillers.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Binomial, Distribution, Gamma, LogNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{write_labels, ClaimsBuilder, ClaimsTable, LabelTable, Metrics};
use crate::numeric::SeededRng;
use crate::rules::derive::FraudLikelihood;
use crate::rules::{named_rules_to_csv, NamedRule};

pub const MANIFEST_VERSION: u32 = 1;
pub const OPIOID_RULE_WEIGHT: f64 = 0.7;
/// Relative price gaps assigned to pairs in turn; they span the moderate,
/// high, and extreme derivation tiers.
pub const PAIR_GAPS: [f64; 6] = [0.6, 1.2, 2.5, 0.8, 1.5, 3.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub n_providers: usize,
    pub n_drugs: usize,
    pub n_years: usize,
    pub first_year: i32,
    pub fraud_rate: f64,
    /// Fraction of frauds that are cost-preference; the rest are opioid.
    pub scenario_mix: f64,
    pub beta: f64,
    pub n_pairs: usize,
    pub n_opioids: usize,
    /// Dirichlet concentration of a filler drug in the provider profile.
    pub concentration: f64,
    /// Concentration multiplier for pair classes, which model high-volume
    /// interchangeable generics.
    pub pair_boost: f64,
    /// Concentration multiplier for opioids.
    pub opioid_boost: f64,
    /// Beta concentration of the within-pair split; larger is more uniform
    /// across providers.
    pub pair_balance: f64,
    /// Mean share of the costlier member within a pair for honest providers.
    pub costly_fraction: f64,
    /// Concentration of yearly shares around the profile; larger is steadier.
    pub year_stability: f64,
    /// Minimum profile share of the planted pair class for a provider to be
    /// eligible for cost-preference fraud.
    pub min_pair_share: f64,
    /// Minimum total opioid profile share for opioid-fraud eligibility.
    pub min_opioid_share: f64,
    /// Median yearly claim volume per provider.
    pub mean_volume: f64,
    /// Fraction of providers whose label appears in the training label file.
    pub labeled_fraction: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_providers: 2000,
            n_drugs: 18,
            n_years: 3,
            first_year: 2019,
            fraud_rate: 0.05,
            scenario_mix: 0.7,
            beta: 4.0,
            n_pairs: 6,
            n_opioids: 3,
            concentration: 0.3,
            pair_boost: 5.0,
            opioid_boost: 1.0,
            pair_balance: 10.0,
            costly_fraction: 0.2,
            year_stability: 50.0,
            min_pair_share: 0.3,
            min_opioid_share: 0.15,
            mean_volume: 600.0,
            labeled_fraction: 0.1,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.n_drugs < 4 {
            return bad(format!("n_drugs must be >= 4, got {}", self.n_drugs));
        }
        if 2 * self.n_pairs + self.n_opioids > self.n_drugs {
            return bad(format!(
                "{} pairs and {} opioids need {} drugs, only {} configured",
                self.n_pairs,
                self.n_opioids,
                2 * self.n_pairs + self.n_opioids,
                self.n_drugs
            ));
        }
        if self.n_pairs + self.n_opioids == 0 {
            return bad("at least one pair or opioid is required".into());
        }
        if self.n_providers == 0 || self.n_years == 0 {
            return bad("n_providers and n_years must be positive".into());
        }
        if !(0.0..1.0).contains(&self.fraud_rate) {
            return bad(format!("fraud_rate must lie in [0, 1), got {}", self.fraud_rate));
        }
        if self.fraud_rate > 0.0 && self.fraud_count() == 0 {
            return bad(format!(
                "fraud_rate {} plants no fraud among {} providers",
                self.fraud_rate, self.n_providers
            ));
        }
        if !(0.0..=1.0).contains(&self.scenario_mix) {
            return bad(format!("scenario_mix must lie in [0, 1], got {}", self.scenario_mix));
        }
        let (n_cost, n_opioid) = self.scenario_counts();
        if n_cost > 0 && self.n_pairs == 0 || n_opioid > 0 && self.n_opioids == 0 {
            return bad("scenario_mix plants a fraud type with no drugs to plant it on".into());
        }
        if !(self.beta > 1.0 && self.beta.is_finite()) {
            return bad(format!("beta must be finite and > 1, got {}", self.beta));
        }
        for (name, v) in [
            ("concentration", self.concentration),
            ("pair_boost", self.pair_boost),
            ("opioid_boost", self.opioid_boost),
            ("pair_balance", self.pair_balance),
            ("year_stability", self.year_stability),
            ("mean_volume", self.mean_volume),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and > 0, got {v}"));
            }
        }
        for (name, v) in [("min_pair_share", self.min_pair_share), ("min_opioid_share", self.min_opioid_share)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        if !(self.costly_fraction > 0.0 && self.costly_fraction < 1.0) {
            return bad(format!("costly_fraction must lie in (0, 1), got {}", self.costly_fraction));
        }
        if !(0.0..=1.0).contains(&self.labeled_fraction) {
            return bad(format!("labeled_fraction must lie in [0, 1], got {}", self.labeled_fraction));
        }
        Ok(())
    }

    pub fn fraud_count(&self) -> usize {
        (self.fraud_rate * self.n_providers as f64).round() as usize
    }

    /// `(cost-preference, opioid)` fraud counts.
    pub fn scenario_counts(&self) -> (usize, usize) {
        let n = self.fraud_count();
        let cost = (self.scenario_mix * n as f64).round() as usize;
        (cost, n - cost)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrugRole {
    PairCostly,
    PairCheap,
    Opioid,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrugInfo {
    pub name: String,
    pub role: DrugRole,
    pub price: f64,
    pub fill_ratio: f64,
    pub days_per_fill: f64,
    pub bene_ratio: f64,
    pub concentration: f64,
    pub pair: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    CostPreference,
    Opioid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FraudTag {
    pub npi: String,
    pub scenario: Scenario,
    /// Index into the planted rules; opioid frauds inflate every opioid.
    pub rule: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimManifest {
    pub format_version: u32,
    pub config: SimConfig,
    pub drugs: Vec<DrugInfo>,
    pub planted_rules: Vec<NamedRule>,
    pub frauds: Vec<FraudTag>,
    pub prevalence: f64,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub claims: ClaimsTable,
    pub labels: Vec<(String, bool)>,
    pub train_labels: Vec<(String, bool)>,
    pub rules: Vec<NamedRule>,
    pub manifest: SimManifest,
}

impl SimOutput {
    /// `drug,target` rows: pair members share a target, all others are unique.
    pub fn drug_targets(&self) -> Vec<(String, String)> {
        self.manifest
            .drugs
            .iter()
            .map(|d| {
                let t = match d.pair {
                    Some(k) => format!("target_pair_{:02}", k + 1),
                    None => format!("target_{}", d.name),
                };
                (d.name.clone(), t)
            })
            .collect()
    }

    /// `(truth, train)` label tables indexed by the claims prescribers.
    pub fn label_tables(&self) -> Result<(LabelTable, LabelTable)> {
        let index = |rows: &[(String, bool)]| {
            let entries = rows
                .iter()
                .map(|(npi, y)| {
                    self.claims
                        .prescriber(npi)
                        .map(|i| (i, *y))
                        .ok_or_else(|| Error::Invalid(format!("labelled npi {npi} has no claims")))
                })
                .collect::<Result<Vec<_>>>()?;
            LabelTable::from_entries(entries)
        };
        Ok((index(&self.labels)?, index(&self.train_labels)?))
    }

    /// `drug,likelihood` rows for the opioids.
    pub fn opioid_annotations(&self) -> Vec<(String, FraudLikelihood)> {
        self.manifest
            .drugs
            .iter()
            .filter(|d| d.role == DrugRole::Opioid)
            .map(|d| (d.name.clone(), FraudLikelihood::High))
            .collect()
    }
}

/// File names written by [`write_dataset`].
pub struct DatasetPaths {
    pub claims: PathBuf,
    pub labels: PathBuf,
    pub train_labels: PathBuf,
    pub rules: PathBuf,
    pub manifest: PathBuf,
    pub drug_targets: PathBuf,
    pub opioids: PathBuf,
}

impl DatasetPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            claims: dir.join("claims.csv"),
            labels: dir.join("labels.csv"),
            train_labels: dir.join("labels_train.csv"),
            rules: dir.join("rules.csv"),
            manifest: dir.join("manifest.json"),
            drug_targets: dir.join("drug_targets.csv"),
            opioids: dir.join("opioids.csv"),
        }
    }

    pub fn all(&self) -> [&Path; 7] {
        [
            &self.claims,
            &self.labels,
            &self.train_labels,
            &self.rules,
            &self.manifest,
            &self.drug_targets,
            &self.opioids,
        ]
    }
}

fn dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Vec<f64> {
    loop {
        let g: Vec<f64> = alpha
            .iter()
            .map(|&a| Gamma::new(a, 1.0).expect("validated concentration").sample(rng))
            .collect();
        let total: f64 = g.iter().sum();
        if total > 0.0 && total.is_finite() {
            return g.into_iter().map(|v| v / total).collect();
        }
    }
}

fn multinomial<R: Rng + ?Sized>(n: u64, p: &[f64], rng: &mut R) -> Vec<u64> {
    let mut left = n;
    let mut mass = 1.0;
    let mut out = vec![0; p.len()];
    for (k, &pk) in p.iter().enumerate() {
        if left == 0 {
            break;
        }
        if k + 1 == p.len() {
            out[k] = left;
            break;
        }
        let q = (pk / mass).clamp(0.0, 1.0);
        let draw = Binomial::new(left, q).expect("probability in [0, 1]").sample(rng);
        out[k] = draw;
        left -= draw;
        mass -= pk;
        if mass <= 0.0 {
            break;
        }
    }
    out
}

/// Divides the cheap share by `beta` and moves the freed mass to the costly
/// member, so the pair total is unchanged.
fn plant_cost(shares: &mut [f64], costly: usize, cheap: usize, beta: f64) {
    let moved = shares[cheap] * (1.0 - 1.0 / beta);
    shares[cheap] -= moved;
    shares[costly] += moved;
}

/// Multiplies opioid shares by `beta`, then renormalizes.
fn plant_opioid(shares: &mut [f64], opioids: &[usize], beta: f64) {
    for &o in opioids {
        shares[o] *= beta;
    }
    let total: f64 = shares.iter().sum();
    for s in shares.iter_mut() {
        *s /= total;
    }
}

type Assignment = Option<(Scenario, Option<usize>)>;

/// Picks fraudulent providers in a seeded random order. A cost-preference
/// fraud plants on the pair class it prescribes most and needs that class to
/// hold `min_pair_share`; an opioid fraud needs `min_opioid_share` of opioids.
fn assign_scenarios(cfg: &SimConfig, profiles: &[Vec<f64>], opioids: &[usize]) -> Result<Vec<Assignment>> {
    let mut rng = SeededRng::for_stage(cfg.seed, "simulate.assign");
    let mut order: Vec<usize> = (0..cfg.n_providers).collect();
    order.shuffle(&mut rng);
    let (mut n_cost, mut n_opioid) = cfg.scenario_counts();
    let mut out: Vec<Assignment> = vec![None; cfg.n_providers];
    for i in order {
        if n_cost == 0 && n_opioid == 0 {
            break;
        }
        let theta = &profiles[i];
        let pair_share = |k: usize| theta[2 * k] + theta[2 * k + 1];
        if n_cost > 0 {
            let top = (0..cfg.n_pairs).max_by(|&a, &b| pair_share(a).total_cmp(&pair_share(b)).then(b.cmp(&a)));
            if let Some(k) = top.filter(|&k| pair_share(k) >= cfg.min_pair_share) {
                out[i] = Some((Scenario::CostPreference, Some(k)));
                n_cost -= 1;
                continue;
            }
        }
        if n_opioid > 0 && opioids.iter().map(|&o| theta[o]).sum::<f64>() >= cfg.min_opioid_share {
            out[i] = Some((Scenario::Opioid, None));
            n_opioid -= 1;
        }
    }
    if n_cost > 0 || n_opioid > 0 {
        return Err(Error::Invalid(format!(
            "too few eligible providers: {n_cost} cost-preference and {n_opioid} opioid frauds unplaced"
        )));
    }
    Ok(out)
}

/// Dirichlet mass added to every drug in the yearly draw so that rarely
/// prescribed drugs still occur.
const YEAR_FLOOR: f64 = 0.01;

/// Drug-level profile: class shares, with each pair split by a Beta whose
/// mean is `costly_fraction`.
fn provider_profile<R: Rng + ?Sized>(cfg: &SimConfig, drugs: &[DrugInfo], rng: &mut R) -> Vec<f64> {
    let n_classes = drugs.len() - cfg.n_pairs;
    let class_alpha: Vec<f64> = (0..n_classes)
        .map(|c| if c < cfg.n_pairs { drugs[2 * c].concentration } else { drugs[c + cfg.n_pairs].concentration })
        .collect();
    let classes = dirichlet(&class_alpha, rng);
    let split = Beta::new(
        cfg.pair_balance * cfg.costly_fraction,
        cfg.pair_balance * (1.0 - cfg.costly_fraction),
    )
    .expect("validated balance");
    let mut theta = Vec::with_capacity(drugs.len());
    for (c, &share) in classes.iter().enumerate() {
        if c < cfg.n_pairs {
            let u = split.sample(rng);
            theta.push(share * u);
            theta.push(share * (1.0 - u));
        } else {
            theta.push(share);
        }
    }
    theta
}

fn build_drugs<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> Vec<DrugInfo> {
    let base_price = LogNormal::new(40f64.ln(), 0.7).expect("valid lognormal");
    let other_price = LogNormal::new(60f64.ln(), 0.8).expect("valid lognormal");
    let fill = Uniform::new(1.0, 1.4).expect("valid range");
    let days = Uniform::new(25.0, 35.0).expect("valid range");
    let bene = Uniform::new(0.5, 0.7).expect("valid range");
    let mut drugs = Vec::with_capacity(cfg.n_drugs);
    let mut push = |role, price: f64, conc, pair, rng: &mut R| {
        let name = format!("drug_{:02}", drugs.len() + 1);
        drugs.push(DrugInfo {
            name,
            role,
            price: (price * 100.0).round() / 100.0,
            fill_ratio: fill.sample(rng),
            days_per_fill: days.sample(rng),
            bene_ratio: bene.sample(rng),
            concentration: conc,
            pair,
        });
    };
    for k in 0..cfg.n_pairs {
        let cheap = base_price.sample(rng);
        let gap = PAIR_GAPS[k % PAIR_GAPS.len()];
        let c = cfg.concentration * cfg.pair_boost;
        push(DrugRole::PairCostly, cheap * (1.0 + gap), c, Some(k), rng);
        push(DrugRole::PairCheap, cheap, c, Some(k), rng);
    }
    for _ in 0..cfg.n_opioids {
        let p = other_price.sample(rng);
        push(DrugRole::Opioid, p, cfg.concentration * cfg.opioid_boost, None, rng);
    }
    for _ in 2 * cfg.n_pairs + cfg.n_opioids..cfg.n_drugs {
        let p = other_price.sample(rng);
        push(DrugRole::Other, p, cfg.concentration, None, rng);
    }
    drugs
}

fn planted_rules(cfg: &SimConfig, drugs: &[DrugInfo]) -> Vec<NamedRule> {
    let mut rules = Vec::new();
    for k in 0..cfg.n_pairs {
        let (hi, lo) = (&drugs[2 * k], &drugs[2 * k + 1]);
        let gap = (hi.price - lo.price) / lo.price;
        rules.push(NamedRule::binary(&hi.name, &lo.name, (gap / 2.0).min(1.0)));
    }
    for d in drugs.iter().filter(|d| d.role == DrugRole::Opioid) {
        rules.push(NamedRule::unary(&d.name, OPIOID_RULE_WEIGHT));
    }
    rules
}

/// Generates a full dataset. Identical configs give identical output.
pub fn simulate(cfg: &SimConfig) -> Result<SimOutput> {
    cfg.validate()?;
    let drugs = build_drugs(cfg, &mut SeededRng::for_stage(cfg.seed, "simulate.drugs"));
    let rules = planted_rules(cfg, &drugs);
    let npis: Vec<String> = (0..cfg.n_providers).map(|i| format!("1{:09}", i + 1)).collect();

    let mut profile_rng = SeededRng::for_stage(cfg.seed, "simulate.profiles");
    let profiles: Vec<Vec<f64>> = (0..cfg.n_providers)
        .map(|_| provider_profile(cfg, &drugs, &mut profile_rng))
        .collect();

    let opioids: Vec<usize> = (0..drugs.len()).filter(|&j| drugs[j].role == DrugRole::Opioid).collect();
    let scenario = assign_scenarios(cfg, &profiles, &opioids)?;

    let names: Vec<&str> = drugs.iter().map(|d| d.name.as_str()).collect();
    let volume = LogNormal::new(cfg.mean_volume.ln(), 0.5).expect("validated volume");
    let jitter = Uniform::new(0.8, 1.2).expect("valid range");
    let cost_noise = Uniform::new(0.9, 1.1).expect("valid range");
    let mut rng = SeededRng::for_stage(cfg.seed, "simulate.claims");
    let mut builder = ClaimsBuilder::with_drugs(&names);
    for (i, npi) in npis.iter().enumerate() {
        let base = volume.sample(&mut rng);
        for y in 0..cfg.n_years {
            let year = cfg.first_year + y as i32;
            let alpha: Vec<f64> = profiles[i]
                .iter()
                .map(|&t| cfg.year_stability * t + YEAR_FLOOR)
                .collect();
            let mut shares = dirichlet(&alpha, &mut rng);
            match scenario[i] {
                Some((Scenario::CostPreference, Some(k))) => plant_cost(&mut shares, 2 * k, 2 * k + 1, cfg.beta),
                Some((Scenario::Opioid, _)) => plant_opioid(&mut shares, &opioids, cfg.beta),
                _ => {}
            }
            let n = (base * jitter.sample(&mut rng)).round().max(1.0) as u64;
            let claims = multinomial(n, &shares, &mut rng);
            for (j, &c) in claims.iter().enumerate() {
                if c == 0 {
                    continue;
                }
                let d = &drugs[j];
                let clm = c as f64;
                let fills = (clm * d.fill_ratio).round();
                let metrics: Metrics = [
                    clm,
                    fills,
                    (fills * d.days_per_fill).round(),
                    (clm * d.price * cost_noise.sample(&mut rng)).round(),
                    (clm * d.bene_ratio).round().max(1.0),
                ];
                builder.push(npi, year, "general", &d.name, metrics)?;
            }
        }
    }
    let claims = builder.finish();

    let mut used = BTreeSet::new();
    for r in claims.records() {
        used.insert(r.drug.0);
    }
    for r in &rules {
        for name in std::iter::once(&r.p).chain(r.q.as_ref()) {
            let id = claims.vocabulary().get(name).expect("seeded vocabulary");
            if !used.contains(&id.0) {
                return Err(Error::Invalid(format!(
                    "rule drug {name} received no claims; increase n_providers or mean_volume"
                )));
            }
        }
    }

    let labels: Vec<(String, bool)> = npis.iter().zip(&scenario).map(|(n, s)| (n.clone(), s.is_some())).collect();
    let train_labels = split_train(cfg, &labels);
    let frauds = npis
        .iter()
        .zip(&scenario)
        .filter_map(|(npi, s)| {
            s.map(|(scenario, pair)| FraudTag {
                npi: npi.clone(),
                scenario,
                rule: match scenario {
                    Scenario::CostPreference => pair,
                    Scenario::Opioid => None,
                },
            })
        })
        .collect();
    let manifest = SimManifest {
        format_version: MANIFEST_VERSION,
        config: cfg.clone(),
        drugs,
        planted_rules: rules.clone(),
        frauds,
        prevalence: cfg.fraud_count() as f64 / cfg.n_providers as f64,
    };
    Ok(SimOutput {
        claims,
        labels,
        train_labels,
        rules,
        manifest,
    })
}

/// Stratified subset: the same fraction of frauds and of honest providers.
fn split_train(cfg: &SimConfig, labels: &[(String, bool)]) -> Vec<(String, bool)> {
    let mut rng = SeededRng::for_stage(cfg.seed, "simulate.split");
    let mut keep = BTreeSet::new();
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].1 == class).collect();
        idx.shuffle(&mut rng);
        let n = (cfg.labeled_fraction * idx.len() as f64).round() as usize;
        keep.extend(idx.into_iter().take(n));
    }
    keep.into_iter().map(|i| labels[i].clone()).collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes every dataset file into `dir`, creating it if needed.
pub fn write_dataset(out: &SimOutput, dir: &Path) -> Result<DatasetPaths> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = DatasetPaths::in_dir(dir);
    out.claims.write_csv_file(&paths.claims)?;
    for (path, rows) in [(&paths.labels, &out.labels), (&paths.train_labels, &out.train_labels)] {
        let mut buf = Vec::new();
        write_labels(&mut buf, rows)?;
        write_file(path, &buf)?;
    }
    write_file(&paths.rules, named_rules_to_csv(&out.rules).as_bytes())?;
    let mut manifest = serde_json::to_string_pretty(&out.manifest)?;
    manifest.push('\n');
    write_file(&paths.manifest, manifest.as_bytes())?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["drug", "target"])?;
    for (d, t) in out.drug_targets() {
        w.write_record([d, t])?;
    }
    write_file(&paths.drug_targets, &w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["drug", "likelihood", "weight"])?;
    for (d, l) in out.opioid_annotations() {
        w.write_record([d.as_str(), l.as_str(), &OPIOID_RULE_WEIGHT.to_string()])?;
    }
    write_file(&paths.opioids, &w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?)?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{compute_shares, rule_contrast};
    use crate::ingest::{parse_claims_csv, Channel};
    use crate::rules::{parse_rules, RuleSet};
    use std::sync::Arc;

    fn small() -> SimConfig {
        SimConfig {
            n_providers: 200,
            fraud_rate: 0.1,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(SimConfig::default().validate().is_ok());
        for bad in [
            SimConfig { n_drugs: 3, ..Default::default() },
            SimConfig { n_drugs: 10, ..Default::default() },
            SimConfig { beta: 1.0, ..Default::default() },
            SimConfig { fraud_rate: 1e-5, ..Default::default() },
            SimConfig { fraud_rate: 1.0, ..Default::default() },
            SimConfig { scenario_mix: 1.5, ..Default::default() },
            SimConfig { n_opioids: 0, scenario_mix: 0.5, ..Default::default() },
        ] {
            assert!(simulate(&bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn counts_and_prevalence() {
        let cfg = small();
        let out = simulate(&cfg).unwrap();
        assert_eq!(out.claims.num_prescribers(), 200);
        assert_eq!(out.claims.years().len(), 3);
        let pos = out.labels.iter().filter(|l| l.1).count();
        assert!((pos as f64 / 200.0 - cfg.fraud_rate).abs() <= 1.0 / 200.0);
        assert_eq!(out.manifest.frauds.len(), pos);
        let cost = out
            .manifest
            .frauds
            .iter()
            .filter(|f| f.scenario == Scenario::CostPreference)
            .count();
        assert_eq!(cost, 14);
        assert_eq!(out.rules.len(), cfg.n_pairs + cfg.n_opioids);
        assert_eq!(out.train_labels.len(), 20);
        assert_eq!(out.train_labels.iter().filter(|l| l.1).count(), 2);
        for r in out.claims.records() {
            assert!(r.metrics.iter().all(|&v| v >= 0.0 && v.fract() == 0.0));
        }
    }

    #[test]
    fn no_fraud_means_all_negative() {
        let out = simulate(&SimConfig { fraud_rate: 0.0, ..small() }).unwrap();
        assert!(out.labels.iter().all(|l| !l.1));
        assert!(out.manifest.frauds.is_empty());
    }

    #[test]
    fn files_are_deterministic_and_parse() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let pa = write_dataset(&simulate(&small()).unwrap(), a.path()).unwrap();
        let pb = write_dataset(&simulate(&small()).unwrap(), b.path()).unwrap();
        for (x, y) in pa.all().iter().zip(pb.all()) {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{x:?}");
        }
        let other = simulate(&SimConfig { seed: 4, ..small() }).unwrap();
        let mut buf = Vec::new();
        other.claims.write_csv(&mut buf).unwrap();
        assert_ne!(buf, std::fs::read(&pa.claims).unwrap());

        let claims = parse_claims_csv(&pa.claims).unwrap();
        let rules = parse_rules(&pa.rules, claims.vocabulary().clone()).unwrap();
        assert_eq!(rules.len(), 9);
    }

    fn mean_clm_contrast(claims: &ClaimsTable, rules: &RuleSet, j: usize) -> Vec<f64> {
        let shares = compute_shares(claims);
        (0..claims.num_prescribers())
            .map(|i| {
                let ys = shares.years_of(i);
                let sum: f64 = ys
                    .iter()
                    .map(|y| rule_contrast(y, rules.get(j))[Channel::Clm.index()])
                    .sum();
                sum / ys.len() as f64
            })
            .collect()
    }

    #[test]
    fn planted_frauds_show_higher_contrast() {
        let cfg = SimConfig::default();
        let out = simulate(&cfg).unwrap();
        let vocab = out.claims.vocabulary().clone();
        let rules = RuleSet::from_named(&out.rules, Arc::clone(&vocab)).unwrap();
        let fraud_of: std::collections::HashMap<&str, &FraudTag> =
            out.manifest.frauds.iter().map(|f| (f.npi.as_str(), f)).collect();
        for j in 0..rules.len() {
            let m = mean_clm_contrast(&out.claims, &rules, j);
            let (mut planted, mut honest) = (Vec::new(), Vec::new());
            for (i, npi) in out.claims.npis().iter().enumerate() {
                match fraud_of.get(npi.as_str()) {
                    None => honest.push(m[i]),
                    Some(f) => {
                        let hit = match f.scenario {
                            Scenario::CostPreference => f.rule == Some(j),
                            Scenario::Opioid => j >= cfg.n_pairs,
                        };
                        if hit {
                            planted.push(m[i]);
                        }
                    }
                }
            }
            let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            assert!(!planted.is_empty());
            assert!(avg(&planted) > avg(&honest), "rule {j}");
            if j < cfg.n_pairs {
                assert!(planted.iter().all(|&v| v > 0.0), "rule {j}");
                assert!(avg(&honest).abs() < 0.1, "rule {j}: {}", avg(&honest));
            }
        }
    }

    #[test]
    fn planting_preserves_totals() {
        let mut s = vec![0.2, 0.1, 0.3, 0.4];
        plant_cost(&mut s, 0, 1, 4.0);
        assert!((s[0] + s[1] - 0.3).abs() < 1e-15);
        assert!((s[1] - 0.025).abs() < 1e-15);
        plant_opioid(&mut s, &[2], 4.0);
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let counts = multinomial(1000, &[0.5, 0.0, 0.5], &mut SeededRng::new(1));
        assert_eq!(counts.iter().sum::<u64>(), 1000);
        assert_eq!(counts[1], 0);
    }
}
