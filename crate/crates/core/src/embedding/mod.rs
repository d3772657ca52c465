//! Rule and sample encoders sharing one latent space.

mod pretrain;
mod triplets;

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Activation, ForwardCache, Matrix, Mlp, MlpGrads, ParamGroup};
use crate::rules::{Rule, RuleSet};

pub use pretrain::{pretrain, separation_rate, EpochRecord, PretrainConfig, PretrainOutcome, UpdatedEncoder};
pub use triplets::{gen_synthetic_triplets, triplet_loss, triplet_loss_grads, TripletConfig, TripletSet};

pub const ENCODER_FORMAT_VERSION: u32 = 1;

/// Index embeddings `E` (D x d), a null vector for unary rules, and an MLP
/// mapping `[E_p; E_q or e_null]` to the latent space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleEncoder {
    pub embedding: Matrix,
    #[serde(skip)]
    pub e_null: Vec<f64>,
    pub mlp: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuleEncoderGrads {
    pub embedding: Matrix,
    pub e_null: Vec<f64>,
    pub mlp: MlpGrads,
}

impl RuleEncoder {
    pub fn new<R: Rng + ?Sized>(
        num_drugs: usize,
        embed_dim: usize,
        hidden: &[usize],
        latent_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_drugs == 0 || embed_dim == 0 {
            return Err(Error::Invalid(format!(
                "rule encoder needs D > 0 and d > 0, got D={num_drugs}, d={embed_dim}"
            )));
        }
        let normal = Normal::new(0.0, 1.0 / (embed_dim as f64).sqrt()).expect("positive std");
        let embedding = Matrix::from_vec(
            num_drugs,
            embed_dim,
            (0..num_drugs * embed_dim).map(|_| normal.sample(rng)).collect(),
        )?;
        let e_null = (0..embed_dim).map(|_| normal.sample(rng)).collect();
        let mut dims = vec![2 * embed_dim];
        dims.extend_from_slice(hidden);
        dims.push(latent_dim);
        let mlp = Mlp::new(&dims, Activation::Relu, Activation::Identity, rng)?;
        Ok(Self {
            embedding,
            e_null,
            mlp,
        })
    }

    pub fn num_drugs(&self) -> usize {
        self.embedding.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.embedding.cols()
    }

    pub fn latent_dim(&self) -> usize {
        self.mlp.out_dim()
    }

    /// Concatenated index embeddings, one row per rule.
    pub fn inputs(&self, rules: &[&Rule]) -> Result<Matrix> {
        let d = self.embed_dim();
        let mut m = Matrix::zeros(rules.len(), 2 * d);
        for (i, r) in rules.iter().enumerate() {
            let check = |id: usize| {
                if id >= self.num_drugs() {
                    Err(Error::Contract(format!(
                        "drug index {id} outside rule encoder vocabulary of {}",
                        self.num_drugs()
                    )))
                } else {
                    Ok(())
                }
            };
            check(r.p.0)?;
            let row = m.row_mut(i);
            row[..d].copy_from_slice(self.embedding.row(r.p.0));
            match r.q {
                Some(q) => {
                    check(q.0)?;
                    row[d..].copy_from_slice(self.embedding.row(q.0));
                }
                None => row[d..].copy_from_slice(&self.e_null),
            }
        }
        Ok(m)
    }

    pub fn forward(&self, rules: &[&Rule]) -> Result<(Matrix, ForwardCache)> {
        self.mlp.forward(&self.inputs(rules)?)
    }

    pub fn encode(&self, rule: &Rule) -> Result<Vec<f64>> {
        Ok(self.forward(&[rule])?.0.into_vec())
    }

    /// Embeddings of every rule in order, `R x L`.
    pub fn encode_all(&self, ruleset: &RuleSet) -> Result<Matrix> {
        let refs: Vec<&Rule> = ruleset.rules().iter().collect();
        Ok(self.forward(&refs)?.0)
    }

    /// Back-propagates into the MLP and scatters the input gradient onto
    /// the embedding rows and null vector that produced each input row.
    pub fn backward(&self, rules: &[&Rule], cache: &ForwardCache, output_grad: &Matrix) -> Result<RuleEncoderGrads> {
        let (mlp, input_grad) = self.mlp.backward(cache, output_grad)?;
        let d = self.embed_dim();
        let mut embedding = Matrix::zeros(self.num_drugs(), d);
        let mut e_null = vec![0.0; d];
        for (i, r) in rules.iter().enumerate() {
            let g = input_grad.row(i);
            for (a, b) in embedding.row_mut(r.p.0).iter_mut().zip(&g[..d]) {
                *a += b;
            }
            let target = match r.q {
                Some(q) => embedding.row_mut(q.0),
                None => e_null.as_mut_slice(),
            };
            for (a, b) in target.iter_mut().zip(&g[d..]) {
                *a += b;
            }
        }
        Ok(RuleEncoderGrads {
            embedding,
            e_null,
            mlp,
        })
    }

    pub fn param_groups<'a>(&'a mut self, grads: &'a RuleEncoderGrads) -> Vec<ParamGroup<'a>> {
        let mut out = vec![
            ParamGroup::new("rule_encoder.embedding", self.embedding.as_mut_slice(), grads.embedding.as_slice()),
            ParamGroup::new("rule_encoder.e_null", &mut self.e_null, &grads.e_null),
        ];
        out.extend(self.mlp.param_groups(&grads.mlp, "rule_encoder.mlp"));
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.embedding.as_slice().to_vec();
        v.extend_from_slice(&self.e_null);
        v.extend(self.mlp.flatten());
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let ne = self.embedding.as_slice().len();
        let nn = self.e_null.len();
        if flat.len() != ne + nn + self.mlp.param_count() {
            return Err(Error::shape(
                "RuleEncoder::set_flat",
                ne + nn + self.mlp.param_count(),
                flat.len(),
            ));
        }
        self.embedding.as_mut_slice().copy_from_slice(&flat[..ne]);
        self.e_null.copy_from_slice(&flat[ne..ne + nn]);
        self.mlp.set_flat(&flat[ne + nn..])
    }
}

impl RuleEncoderGrads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.embedding.as_slice().to_vec();
        v.extend_from_slice(&self.e_null);
        v.extend(self.mlp.flatten());
        v
    }
}

/// MLP from a rule-contrast vector to the latent space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SampleEncoder {
    pub mlp: Mlp,
}

impl SampleEncoder {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden: &[usize], latent_dim: usize, rng: &mut R) -> Result<Self> {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(latent_dim);
        Ok(Self {
            mlp: Mlp::new(&dims, Activation::Relu, Activation::Identity, rng)?,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.in_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.mlp.out_dim()
    }

    /// Embeds each row of `samples`.
    pub fn encode(&self, samples: &Matrix) -> Result<Matrix> {
        if samples.cols() != self.input_dim() {
            return Err(Error::shape("sample encoder input", self.input_dim(), samples.cols()));
        }
        self.mlp.predict(samples)
    }

    pub fn encode_one(&self, sample: &[f64]) -> Result<Vec<f64>> {
        let m = Matrix::from_vec(1, sample.len(), sample.to_vec())?;
        Ok(self.encode(&m)?.into_vec())
    }
}

/// Trained encoders bound to one rule set.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderPair {
    pub ruleset_fingerprint: String,
    pub rule_encoder: RuleEncoder,
    pub sample_encoder: SampleEncoder,
}

#[derive(Serialize, Deserialize)]
struct EncoderFile {
    format_version: u32,
    #[serde(rename = "L")]
    latent_dim: usize,
    d: usize,
    ruleset_fingerprint: String,
    rule_encoder: RuleEncoder,
    #[serde(serialize_with = "crate::numeric::fmt::serialize_vec")]
    e_null: Vec<f64>,
    sample_encoder: SampleEncoder,
}

impl EncoderPair {
    pub fn latent_dim(&self) -> usize {
        self.sample_encoder.latent_dim()
    }

    /// Fails with both fingerprints when `ruleset` is not the bound rule set.
    pub fn check_ruleset(&self, ruleset: &RuleSet) -> Result<()> {
        let found = ruleset.fingerprint();
        if found != self.ruleset_fingerprint {
            return Err(Error::Fingerprint {
                expected: self.ruleset_fingerprint.clone(),
                found,
            });
        }
        if ruleset.vocabulary().len() != self.rule_encoder.num_drugs() {
            return Err(Error::Contract(format!(
                "rule encoder covers {} drugs, vocabulary has {}",
                self.rule_encoder.num_drugs(),
                ruleset.vocabulary().len()
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = EncoderFile {
            format_version: ENCODER_FORMAT_VERSION,
            latent_dim: self.latent_dim(),
            d: self.rule_encoder.embed_dim(),
            ruleset_fingerprint: self.ruleset_fingerprint.clone(),
            rule_encoder: self.rule_encoder.clone(),
            e_null: self.rule_encoder.e_null.clone(),
            sample_encoder: self.sample_encoder.clone(),
        };
        Ok(serde_json::to_string(&file)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: EncoderFile = serde_json::from_str(text)?;
        if file.format_version != ENCODER_FORMAT_VERSION {
            return Err(Error::Invalid(format!(
                "unsupported encoder format_version {}",
                file.format_version
            )));
        }
        let mut rule_encoder = file.rule_encoder;
        rule_encoder.e_null = file.e_null;
        let d = rule_encoder.embed_dim();
        if rule_encoder.e_null.len() != d || rule_encoder.mlp.in_dim() != 2 * d || file.d != d {
            return Err(Error::shape("rule encoder widths", format!("d={}", file.d), format!("d={d}")));
        }
        if !rule_encoder.e_null.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("e_null".into()));
        }
        if rule_encoder.latent_dim() != file.latent_dim || file.sample_encoder.latent_dim() != file.latent_dim {
            return Err(Error::shape(
                "encoder latent width",
                file.latent_dim,
                format!("{} / {}", rule_encoder.latent_dim(), file.sample_encoder.latent_dim()),
            ));
        }
        Ok(Self {
            ruleset_fingerprint: file.ruleset_fingerprint,
            rule_encoder,
            sample_encoder: file.sample_encoder,
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

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::numeric::{grad_check, SeededRng};
    use crate::rules::{DrugId, DrugVocabulary, NamedRule};

    fn encoder(seed: u64) -> RuleEncoder {
        RuleEncoder::new(5, 4, &[8], 3, &mut SeededRng::new(seed)).unwrap()
    }

    #[test]
    fn shapes_and_order_sensitivity() {
        let re = encoder(1);
        let pq = Rule::binary(DrugId(0), DrugId(1), 1.0).unwrap();
        let qp = Rule::binary(DrugId(1), DrugId(0), 1.0).unwrap();
        let u = Rule::unary(DrugId(2), 1.0).unwrap();
        let a = re.encode(&pq).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(re.encode(&u).unwrap().len(), 3);
        assert_ne!(a, re.encode(&qp).unwrap());
        assert_eq!(a, re.encode(&pq).unwrap());
        assert_eq!(a, encoder(1).encode(&pq).unwrap());
        let bad = Rule::unary(DrugId(9), 1.0).unwrap();
        assert!(re.encode(&bad).is_err());
    }

    #[test]
    fn sample_encoder_contract() {
        let se = SampleEncoder::new(6, &[5], 3, &mut SeededRng::new(2)).unwrap();
        let x = [0.1, -0.2, 0.3, 0.0, 0.5, -1.0];
        let a = se.encode_one(&x).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a, se.encode_one(&x).unwrap());
        assert!(se.encode_one(&x[..5]).is_err());
    }

    #[test]
    fn rule_encoder_gradients() {
        let re = encoder(3);
        let rules = [
            Rule::binary(DrugId(0), DrugId(1), 1.0).unwrap(),
            Rule::binary(DrugId(1), DrugId(0), 1.0).unwrap(),
            Rule::unary(DrugId(3), 1.0).unwrap(),
            Rule::binary(DrugId(3), DrugId(0), 1.0).unwrap(),
        ];
        let refs: Vec<&Rule> = rules.iter().collect();
        let target = Matrix::from_vec(4, 3, (0..12).map(|i| (i as f64 * 0.7).cos()).collect()).unwrap();
        let base = re.clone();
        let loss = |flat: &[f64]| {
            let mut r = base.clone();
            r.set_flat(flat).unwrap();
            let (out, cache) = r.forward(&refs).unwrap();
            let mut g = out.clone();
            let mut l = 0.0;
            for (gv, t) in g.as_mut_slice().iter_mut().zip(target.as_slice()) {
                let diff = *gv - t;
                l += 0.5 * diff * diff;
                *gv = diff;
            }
            let grads = r.backward(&refs, &cache, &g).unwrap();
            (l, grads.flatten())
        };
        let report = grad_check(loss, &re.flatten(), 1e-5);
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn json_round_trip_and_fingerprint_check() {
        let vocab = Arc::new(DrugVocabulary::from_names(["A", "B", "C", "D", "E"]).unwrap());
        let rs = RuleSet::from_named(&[NamedRule::binary("A", "B", 0.5)], vocab.clone()).unwrap();
        let pair = EncoderPair {
            ruleset_fingerprint: rs.fingerprint(),
            rule_encoder: encoder(4),
            sample_encoder: SampleEncoder::new(15, &[4], 3, &mut SeededRng::new(5)).unwrap(),
        };
        let text = pair.to_json().unwrap();
        let keys = ["\"format_version\"", "\"L\"", "\"d\"", "\"ruleset_fingerprint\"", "\"rule_encoder\"", "\"e_null\"", "\"sample_encoder\""];
        let pos: Vec<usize> = keys.iter().map(|k| text.find(k).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]), "{pos:?}");
        let back = EncoderPair::from_json(&text).unwrap();
        assert_eq!(back, pair);
        assert_eq!(back.to_json().unwrap(), text);
        pair.check_ruleset(&rs).unwrap();
        let other = RuleSet::from_named(&[NamedRule::binary("B", "A", 0.5)], vocab).unwrap();
        match pair.check_ruleset(&other) {
            Err(Error::Fingerprint { expected, found }) => {
                assert_eq!(expected, rs.fingerprint());
                assert_eq!(found, other.fingerprint());
            }
            other => panic!("{other:?}"),
        }
    }
}
