use std::collections::HashMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clevercatch_core::alignment::Aligner;
use clevercatch_core::detector::{self, Detector};
use clevercatch_core::embedding::{self, EncoderPair};
use clevercatch_core::evaluation::{self, DatasetBundle};
use clevercatch_core::features::{self, FeatureMatrix};
use clevercatch_core::ingest::{self, ClaimsTable, LabelTable, UnknownNpiPolicy};
use clevercatch_core::numeric::fmt::fmt17;
use clevercatch_core::rules::derive::{self, PriceStats};
use clevercatch_core::rules::{self, DrugVocabulary, RuleSet};
use clevercatch_core::simulator;
use clevercatch_core::Error;

use crate::config::RunConfig;
use crate::manifest::Recorder;

pub struct Ctx {
    pub config: RunConfig,
    pub out_dir: PathBuf,
}

impl Ctx {
    /// Flag, then config path, then `<out-dir>/<default>`.
    fn input(&self, flag: Option<PathBuf>, configured: &Option<PathBuf>, default: &str) -> PathBuf {
        flag.or_else(|| configured.clone())
            .unwrap_or_else(|| self.out_dir.join(default))
    }

    fn output(&self, flag: Option<PathBuf>, default: &str) -> Result<PathBuf> {
        let p = flag.unwrap_or_else(|| self.out_dir.join(default));
        if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        Ok(p)
    }

    fn finish(&self, rec: Recorder) -> Result<()> {
        let path = rec.finish(&self.config, &self.out_dir)?;
        log::info!("wrote {}", path.display());
        Ok(())
    }
}

fn load_claims(path: &Path, rec: &mut Recorder) -> Result<ClaimsTable> {
    rec.input(path);
    let claims = ingest::parse_claims_csv(path)?;
    for w in claims.warnings() {
        log::warn!("{w}");
    }
    Ok(claims)
}

/// Loads features and the rules they were built from, checking the binding.
fn load_bound_features(features: &Path, rules: &Path, rec: &mut Recorder) -> Result<(FeatureMatrix, RuleSet)> {
    rec.input(features);
    rec.input(&features::meta_path(features));
    rec.input(rules);
    let fm = features::load_features(features)?;
    let vocab = Arc::new(DrugVocabulary::from_names(fm.meta.drug_vocabulary.iter())?);
    let ruleset = rules::parse_rules(rules, vocab)?;
    let found = ruleset.fingerprint();
    if found != fm.meta.ruleset_fingerprint {
        return Err(Error::Fingerprint {
            expected: fm.meta.ruleset_fingerprint.clone(),
            found,
        })
        .with_context(|| format!("{} was not built from {}", features.display(), rules.display()));
    }
    Ok((fm, ruleset))
}

fn load_encoders(path: &Path, fm: &FeatureMatrix, rec: &mut Recorder) -> Result<EncoderPair> {
    rec.input(path);
    let enc = EncoderPair::load(path)?;
    if enc.ruleset_fingerprint != fm.meta.ruleset_fingerprint {
        return Err(Error::Fingerprint {
            expected: fm.meta.ruleset_fingerprint.clone(),
            found: enc.ruleset_fingerprint.clone(),
        })
        .with_context(|| format!("encoders {} do not match the feature rule set", path.display()));
    }
    Ok(enc)
}

fn load_detector(path: &Path, fm: &FeatureMatrix, rec: &mut Recorder) -> Result<Detector> {
    rec.input(path);
    let det = Detector::load(path)?;
    if let Some(fp) = &det.encoder_fingerprint {
        if *fp != fm.meta.ruleset_fingerprint {
            return Err(Error::Fingerprint {
                expected: fp.clone(),
                found: fm.meta.ruleset_fingerprint.clone(),
            })
            .with_context(|| format!("detector {} was trained on a different rule set", path.display()));
        }
    }
    Ok(det)
}

/// Labels keyed by row of `npis`; npis absent from the list are skipped.
fn load_labels(path: &Path, npis: &[String], rec: &mut Recorder) -> Result<LabelTable> {
    rec.input(path);
    let index: HashMap<&str, usize> = npis.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let f = File::open(path).map_err(|e| anyhow::Error::new(e).context(path.display().to_string()))?;
    Ok(ingest::read_labels(f, path, |n| index.get(n).copied(), UnknownNpiPolicy::Skip)?)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

pub fn simulate(ctx: &Ctx) -> Result<()> {
    let mut rec = Recorder::new("simulate");
    let out = rec.stage("simulate", || Ok(simulator::simulate(&ctx.config.simulate)?))?;
    let paths = rec.stage("write", || Ok(simulator::write_dataset(&out, &ctx.out_dir)?))?;
    for p in paths.all() {
        rec.output(p);
    }
    println!(
        "simulated {} providers, {} planted frauds -> {}",
        ctx.config.simulate.n_providers,
        out.manifest.frauds.len(),
        ctx.out_dir.display()
    );
    ctx.finish(rec)
}

pub fn featurize(ctx: &Ctx, claims: Option<PathBuf>, rules: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let paths = &ctx.config.paths;
    let mut rec = Recorder::new("featurize");
    let claims_path = ctx.input(claims, &paths.claims, "claims.csv");
    let rules_path = ctx.input(rules, &paths.rules, "rules.csv");
    let out = ctx.output(out, "features.csv")?;
    let claims = load_claims(&claims_path, &mut rec)?;
    rec.input(&rules_path);
    let ruleset = rules::parse_rules(&rules_path, claims.vocabulary().clone())?;
    let fm = rec.stage("features", || {
        Ok(features::build_feature_matrix(&claims, &ruleset, ctx.config.features.layout)?)
    })?;
    rec.stage("write", || Ok(features::save_features(&fm, &out)?))?;
    rec.output(&out);
    rec.output(&features::meta_path(&out));
    println!("features {} x {} -> {}", fm.rows(), fm.cols(), out.display());
    ctx.finish(rec)
}

pub fn pretrain(ctx: &Ctx, claims: Option<PathBuf>, rules: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let paths = &ctx.config.paths;
    let mut rec = Recorder::new("pretrain");
    let claims_path = ctx.input(claims, &paths.claims, "claims.csv");
    let rules_path = ctx.input(rules, &paths.rules, "rules.csv");
    let out = ctx.output(out, "encoders.json")?;
    let claims = load_claims(&claims_path, &mut rec)?;
    rec.input(&rules_path);
    let ruleset = rules::parse_rules(&rules_path, claims.vocabulary().clone())?;
    let outcome = rec.stage("pretrain", || {
        Ok(embedding::pretrain(&ruleset, ctx.config.features.layout, &ctx.config.pretrain)?)
    })?;
    outcome.encoders.save(&out)?;
    rec.output(&out);
    let sep = outcome.history.last().map_or(outcome.initial_separation, |h| h.heldout_separation);
    println!(
        "pretrained encoders for {} rules, held-out separation {sep:.4} -> {}",
        ruleset.len(),
        out.display()
    );
    ctx.finish(rec)
}

pub fn pseudolabel(
    ctx: &Ctx,
    features: Option<PathBuf>,
    rules: Option<PathBuf>,
    encoders: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let paths = &ctx.config.paths;
    let mut rec = Recorder::new("pseudolabel");
    let features = ctx.input(features, &paths.features, "features.csv");
    let rules = ctx.input(rules, &paths.rules, "rules.csv");
    let encoders = ctx.input(encoders, &paths.encoders, "encoders.json");
    let out = ctx.output(out, "pseudo_labels.csv")?;
    let (fm, ruleset) = load_bound_features(&features, &rules, &mut rec)?;
    let enc = load_encoders(&encoders, &fm, &mut rec)?;
    let pl = rec.stage("align", || {
        let aligner = Aligner::new(enc, &ruleset, ctx.config.alignment)?;
        Ok(detector::pseudo_label_classifier(
            &fm.values,
            &aligner,
            ctx.config.eval.threshold,
        )?)
    })?;
    let mut w = csv::Writer::from_writer(create(&out)?);
    w.write_record(["npi", "cost", "pseudo_label"])?;
    for ((npi, c), s) in fm.npis().iter().zip(&pl.costs).zip(&pl.scores) {
        w.write_record([npi.as_str(), &fmt17(*c), &fmt17(*s)])?;
    }
    w.flush()?;
    drop(w);
    rec.output(&out);
    let flagged = pl.predictions.iter().filter(|&&p| p).count();
    println!("pseudo-labels for {} prescribers ({flagged} above threshold) -> {}", fm.rows(), out.display());
    ctx.finish(rec)
}

pub fn train(
    ctx: &Ctx,
    features: Option<PathBuf>,
    labels: Option<PathBuf>,
    rules: Option<PathBuf>,
    encoders: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let paths = &ctx.config.paths;
    let cfg = &ctx.config.detector;
    let mut rec = Recorder::new("train");
    let features = ctx.input(features, &paths.features, "features.csv");
    let labels = ctx.input(labels, &paths.train_labels, "labels_train.csv");
    let out = ctx.output(out, "detector.json")?;
    let (fm, aligner) = if cfg.lambda > 0.0 {
        let rules = ctx.input(rules, &paths.rules, "rules.csv");
        let encoders = ctx.input(encoders, &paths.encoders, "encoders.json");
        let (fm, ruleset) = load_bound_features(&features, &rules, &mut rec)?;
        let enc = load_encoders(&encoders, &fm, &mut rec)?;
        let aligner = Aligner::new(enc, &ruleset, ctx.config.alignment)?;
        (fm, Some(aligner))
    } else {
        rec.input(&features);
        rec.input(&features::meta_path(&features));
        (features::load_features(&features)?, None)
    };
    let table = load_labels(&labels, fm.npis(), &mut rec)?;
    let dense = table.to_dense(fm.rows());
    let outcome = rec.stage("train", || {
        Ok(detector::hybrid_train(&fm.values, &dense, aligner.as_ref(), cfg)?)
    })?;
    outcome.detector.save(&out)?;
    rec.output(&out);
    if let Some(last) = outcome.history.last() {
        println!(
            "trained detector on {} labeled rows (lambda {}), final supervised loss {:.5} -> {}",
            table.len(),
            cfg.lambda,
            last.supervised_loss,
            out.display()
        );
    }
    ctx.finish(rec)
}

pub fn score(ctx: &Ctx, detector: Option<PathBuf>, features: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let paths = &ctx.config.paths;
    let mut rec = Recorder::new("score");
    let detector = ctx.input(detector, &paths.detector, "detector.json");
    let features = ctx.input(features, &paths.features, "features.csv");
    let out = ctx.output(out, "scores.csv")?;
    rec.input(&features);
    rec.input(&features::meta_path(&features));
    let fm = features::load_features(&features)?;
    let det = load_detector(&detector, &fm, &mut rec)?;
    let report = rec.stage("score", || Ok(detector::score(&det, &fm.values)?))?;
    let mut w = create(&out)?;
    report.write_csv(fm.npis(), &mut w)?;
    drop(w);
    rec.output(&out);
    println!("scored {} prescribers -> {}", fm.rows(), out.display());
    ctx.finish(rec)
}

pub struct EvaluateInputs {
    pub scores: Option<PathBuf>,
    pub detector: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub exclude: Vec<PathBuf>,
    pub name: String,
    pub out: Option<PathBuf>,
    pub curve_out: Option<PathBuf>,
}

pub fn evaluate(ctx: &Ctx, inp: EvaluateInputs) -> Result<()> {
    let paths = &ctx.config.paths;
    let mut rec = Recorder::new("evaluate");
    let scored: Vec<(String, f64)> = match inp.scores.or_else(|| paths.scores.clone()) {
        Some(path) => {
            rec.input(&path);
            let f = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
            evaluation::read_scores(f, &path)?
        }
        None => {
            let detector = ctx.input(inp.detector, &paths.detector, "detector.json");
            let features = ctx.input(inp.features, &paths.features, "features.csv");
            rec.input(&features);
            rec.input(&features::meta_path(&features));
            let fm = features::load_features(&features)?;
            let det = load_detector(&detector, &fm, &mut rec)?;
            let s = rec.stage("score", || Ok(det.predict(&fm.values)?))?;
            fm.npis().iter().cloned().zip(s).collect()
        }
    };
    let labels = ctx.input(inp.labels, &paths.labels, "labels.csv");
    let out = ctx.output(inp.out, "report.csv")?;
    let curve_out = ctx.output(inp.curve_out, "pr_curve.csv")?;

    let npis: Vec<String> = scored.iter().map(|(n, _)| n.clone()).collect();
    let truth = load_labels(&labels, &npis, &mut rec)?;
    let mut excluded = vec![false; npis.len()];
    for path in &inp.exclude {
        for &(i, _) in load_labels(path, &npis, &mut rec)?.entries() {
            excluded[i] = true;
        }
    }
    let (mut s, mut y) = (Vec::new(), Vec::new());
    for (i, (_, v)) in scored.iter().enumerate() {
        if let (false, Some(l)) = (excluded[i], truth.get(i)) {
            s.push(*v);
            y.push(l);
        }
    }
    let dropped = npis.len() - s.len();
    if dropped > 0 {
        log::info!("{dropped} scored prescribers are unlabeled or excluded");
    }
    let eval_cfg = &ctx.config.eval;
    let ks: Vec<usize> = eval_cfg.ks.iter().copied().filter(|&k| k <= s.len()).collect();
    if ks.len() < eval_cfg.ks.len() {
        bail!(Error::Invalid(format!(
            "recall cutoffs {:?} exceed the {} evaluated prescribers",
            eval_cfg.ks,
            s.len()
        )));
    }
    let row = rec.stage("metrics", || Ok(evaluation::evaluate(&inp.name, ctx.config.seed, &s, &y, eval_cfg)?))?;
    let curve = evaluation::pr_curve(&s, &y)?;
    evaluation::write_report(std::slice::from_ref(&row), &eval_cfg.ks, create(&out)?)?;
    evaluation::write_pr_curve(&curve, create(&curve_out)?)?;
    rec.output(&out);
    rec.output(&curve_out);
    let recalls: Vec<String> = row.recall_at.iter().map(|(k, r)| format!("R@{k} {r:.4}")).collect();
    println!(
        "evaluated {} prescribers ({} positive): PR-AUC {:.4}, {}",
        s.len(),
        y.iter().filter(|&&v| v).count(),
        row.pr_auc,
        recalls.join(", ")
    );
    ctx.finish(rec)
}

pub fn ablate(ctx: &Ctx, data_dir: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let paths = &ctx.config.paths;
    let dir = data_dir.unwrap_or_else(|| ctx.out_dir.clone());
    let pick = |p: &Option<PathBuf>, name: &str| p.clone().unwrap_or_else(|| dir.join(name));
    let mut rec = Recorder::new("ablate");
    let claims = load_claims(&pick(&paths.claims, "claims.csv"), &mut rec)?;
    let rules_path = pick(&paths.rules, "rules.csv");
    rec.input(&rules_path);
    let ruleset = rules::parse_rules(&rules_path, claims.vocabulary().clone())?;
    let truth = load_labels(&pick(&paths.labels, "labels.csv"), claims.npis(), &mut rec)?;
    let train = load_labels(&pick(&paths.train_labels, "labels_train.csv"), claims.npis(), &mut rec)?;
    let eval_rows = DatasetBundle::heldout_rows(&claims, &train, &truth);
    let bundle = DatasetBundle {
        claims: &claims,
        train_labels: &train,
        truth: &truth,
        eval_rows: &eval_rows,
    };
    let ab = &ctx.config.ablation;
    let report = rec.stage("ablate", || {
        Ok(evaluation::ablation_run(
            &bundle,
            &ruleset,
            &ab.seeds,
            &ab.configs,
            &ctx.config.pipeline(),
        )?)
    })?;
    let out = ctx.output(out, "ablation.csv")?;
    let mut w = create(&out)?;
    evaluation::write_report(&report.rows, &ctx.config.eval.ks, &mut w)?;
    for note in &report.notes {
        use std::io::Write;
        writeln!(w, "# {note}").with_context(|| format!("writing {}", out.display()))?;
    }
    drop(w);
    rec.output(&out);
    for (cfg, seed, d_auc, d_r) in report.deltas(ctx.config.eval.ks.last().copied().unwrap_or(100)) {
        println!("{cfg} seed {seed}: delta PR-AUC {d_auc:+.4}, delta R@K {d_r:+.4}");
    }
    println!("ablation report ({} rows) -> {}", report.rows.len(), out.display());
    ctx.finish(rec)
}

pub fn derive_rules(
    ctx: &Ctx,
    claims: Option<PathBuf>,
    targets: Option<PathBuf>,
    opioids: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let paths = &ctx.config.paths;
    let mut rec = Recorder::new("derive-rules");
    let claims = load_claims(&ctx.input(claims, &paths.claims, "claims.csv"), &mut rec)?;
    let targets_path = ctx.input(targets, &paths.drug_targets, "drug_targets.csv");
    rec.input(&targets_path);
    let targets = derive::parse_drug_targets(&targets_path)?;
    let vocab = claims.vocabulary();
    let prices = claims
        .drug_cost_claims()
        .into_iter()
        .enumerate()
        .map(|(i, (cost, clm))| {
            let name = vocab.names()[i].clone();
            (
                name,
                PriceStats {
                    total_cost: cost,
                    total_claims: clm,
                },
            )
        })
        .collect();
    let cost = derive::derive_cost_preference_rules(&targets, &prices, &ctx.config.derive)?;
    let mut named: Vec<_> = cost.candidates.iter().map(|c| c.to_rule()).collect();
    if let Some(path) = opioids.or_else(|| paths.opioids.clone()) {
        rec.input(&path);
        named.extend(derive::derive_opioid_rules(&derive::parse_opioid_annotations(&path)?));
    }
    // resolving against the claims vocabulary rejects unknown or duplicate rules
    let ruleset = RuleSet::from_named(&named, vocab.clone())?;
    let out = ctx.output(out, "rules.csv")?;
    ruleset.write_csv(&out)?;
    rec.output(&out);
    println!(
        "derived {} rules ({} cost-preference) -> {}",
        ruleset.len(),
        cost.candidates.len(),
        out.display()
    );
    ctx.finish(rec)
}
