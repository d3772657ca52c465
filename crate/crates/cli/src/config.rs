use std::fmt;
use std::path::{Path, PathBuf};

use clevercatch_core::alignment::AlignmentConfig;
use clevercatch_core::detector::DetectorConfig;
use clevercatch_core::embedding::PretrainConfig;
use clevercatch_core::evaluation::{AblationConfig, EvalConfig, PipelineConfig};
use clevercatch_core::features::FeatureLayout;
use clevercatch_core::rules::derive::GapThresholds;
use clevercatch_core::simulator::SimConfig;
use serde::{Deserialize, Serialize};

/// A configuration problem detected before any stage runs.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Optional input locations; a command-line flag wins over these.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub claims: Option<PathBuf>,
    pub rules: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub encoders: Option<PathBuf>,
    pub detector: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    pub drug_targets: Option<PathBuf>,
    pub opioids: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeaturesSection {
    pub layout: FeatureLayout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub configs: Vec<AblationConfig>,
    /// Empty means "the root seed only".
    pub seeds: Vec<u64>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            configs: AblationConfig::ALL.to_vec(),
            seeds: Vec::new(),
        }
    }
}

/// Every tunable of every stage. Section-level `seed` keys are replaced by
/// the root seed when the config is resolved.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub simulate: SimConfig,
    pub features: FeaturesSection,
    pub pretrain: PretrainConfig,
    pub alignment: AlignmentConfig,
    pub detector: DetectorConfig,
    pub eval: EvalConfig,
    pub ablation: AblationSection,
    pub derive: GapThresholds,
}

impl RunConfig {
    /// Reads the optional config file, applies `key=value` overrides and the
    /// seed flag, and rejects unknown keys.
    pub fn load(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self, ConfigError> {
        let mut table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| ConfigError(format!("{}: {}", path.display(), one_line(&e.to_string()))))?
            }
            None => toml::Table::new(),
        };
        for item in overrides {
            apply_override(&mut table, item)?;
        }
        let mut config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError(one_line(&e.to_string())))?;
        if let Some(s) = seed {
            config.seed = s;
        }
        config.simulate.seed = config.seed;
        config.pretrain.seed = config.seed;
        config.detector.seed = config.seed;
        if config.ablation.seeds.is_empty() {
            config.ablation.seeds.push(config.seed);
        }
        Ok(config)
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            layout: self.features.layout,
            pretrain: self.pretrain.clone(),
            alignment: self.alignment,
            detector: self.detector.clone(),
            eval: self.eval.clone(),
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// `a.b.c=value`, where value is any TOML literal; bare words become strings.
fn apply_override(table: &mut toml::Table, item: &str) -> Result<(), ConfigError> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| ConfigError(format!("override {item:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError(format!("override {item:?} has an empty key segment")));
    }
    let value = match format!("v = {}", raw.trim()).parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_owned()),
    };
    let (last, parents) = parts.split_last().expect("non-empty key");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError(format!("override {item:?}: {p} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_seed_fan_out() {
        let over = vec![
            "detector.lambda=0".to_string(),
            "features.layout=mean-claims-only".to_string(),
            "eval.ks=[5, 10]".to_string(),
        ];
        let c = RunConfig::load(None, &over, Some(7)).unwrap();
        assert_eq!(c.detector.lambda, 0.0);
        assert_eq!(c.features.layout, FeatureLayout::MeanClaimsOnly);
        assert_eq!(c.eval.ks, vec![5, 10]);
        assert_eq!((c.simulate.seed, c.pretrain.seed, c.detector.seed), (7, 7, 7));
        assert_eq!(c.ablation.seeds, vec![7]);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::load(None, &["detector.lambdaa=1".into()], None).is_err());
        assert!(RunConfig::load(None, &["nosection.x=1".into()], None).is_err());
        assert!(RunConfig::load(None, &["novalue".into()], None).is_err());
    }

    #[test]
    fn file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 3\n[detector]\nepochs = 2\nlambda = 0.25\n").unwrap();
        let c = RunConfig::load(Some(&p), &["detector.epochs=4".into()], None).unwrap();
        assert_eq!((c.seed, c.detector.epochs, c.detector.lambda), (3, 4, 0.25));
        std::fs::write(&p, "[detector]\nepoch = 2\n").unwrap();
        assert!(RunConfig::load(Some(&p), &[], None).is_err());
    }
}
