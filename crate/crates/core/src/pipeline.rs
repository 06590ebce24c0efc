//! The experiment commands. Each reads its inputs from, and writes its
//! outputs to, the run directory `RunConfig::out_dir`; every artifact carries
//! the config fingerprint.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribute_bank::{corrupt_bank, load_bank, save_bank, AttributeBank, CorruptionMode, CorruptionSpec};
use crate::classifier::{train_classifier, ClassifierEpochLog, CnnArch, TaskClassifier, TinyCnn};
use crate::config::{DatasetSource, RunConfig, CALIBRATION_SPLIT, EVALUATION_SPLIT};
use crate::dataset::{Dataset, Sample, Split};
use crate::embedding::{build_provider, embed_bank, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::explain::{explain_sample, render_summary, SampleExplanation};
use crate::metrics::{
    calibrate_per_domain, calibrate_threshold, evaluate, evaluate_per_domain, EvaluationReport, ScorerMetrics,
    Threshold,
};
use crate::nn::argmax;
use crate::pim::{pim_predict, PimHead, PimInit};
use crate::report::write_metric_plots;
use crate::scenario::{apply_corruption, generate_imbalanced, generate_spurious, oracle_bank};
use crate::scoring::{
    read_scores_csv, score_dataset, write_scores_csv, write_scores_jsonl, Ensemble, ScoreRecord, ScorerId,
    ScoringContext,
};
use crate::training::{train_pim, write_log_jsonl, TrainState};

/// File layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn run_config(&self) -> PathBuf {
        self.root.join("run.json")
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.root.join("dataset")
    }

    pub fn dataset_stamp(&self) -> PathBuf {
        self.dataset_dir().join("fingerprint.txt")
    }

    pub fn classifier(&self) -> PathBuf {
        self.root.join("classifier.ckpt")
    }

    pub fn classifier_log(&self) -> PathBuf {
        self.root.join("classifier_log.jsonl")
    }

    pub fn ensemble_member(&self, k: usize) -> PathBuf {
        self.root.join("ensemble").join(format!("member_{k}.ckpt"))
    }

    pub fn bank(&self) -> PathBuf {
        self.root.join("bank.json")
    }

    pub fn pim(&self) -> PathBuf {
        self.root.join("pim.ckpt")
    }

    pub fn pim_log(&self) -> PathBuf {
        self.root.join("pim_log.jsonl")
    }

    pub fn scores_csv(&self, scorer: ScorerId, split: Split) -> PathBuf {
        self.root.join("scores").join(format!("{scorer}_{split}.csv"))
    }

    pub fn scores_jsonl(&self, scorer: ScorerId, split: Split) -> PathBuf {
        self.root.join("scores").join(format!("{scorer}_{split}.jsonl"))
    }

    pub fn thresholds(&self, scorer: ScorerId) -> PathBuf {
        self.root.join("thresholds").join(format!("{scorer}.json"))
    }

    pub fn report_json(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn report_txt(&self) -> PathBuf {
        self.root.join("report.txt")
    }

    pub fn plots_dir(&self) -> PathBuf {
        self.root.join("plots")
    }

    pub fn explanations_json(&self) -> PathBuf {
        self.root.join("explanations.json")
    }

    pub fn explanations_txt(&self) -> PathBuf {
        self.root.join("explanations.txt")
    }

    pub fn ablation(&self, variant: BankVariant) -> RunPaths {
        RunPaths::new(self.root.join("ablation").join(variant.as_str()))
    }

    pub fn ablation_summary(&self) -> PathBuf {
        self.root.join("ablation").join("summary.json")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdFile {
    pub fingerprint: String,
    pub thresholds: Vec<Threshold>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationFile {
    pub fingerprint: String,
    pub explanations: Vec<SampleExplanation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankVariant {
    Clean,
    Irrelevant,
    Insufficient,
}

impl BankVariant {
    pub const ALL: [BankVariant; 3] = [BankVariant::Clean, BankVariant::Irrelevant, BankVariant::Insufficient];

    pub fn as_str(self) -> &'static str {
        match self {
            BankVariant::Clean => "clean",
            BankVariant::Irrelevant => "irrelevant",
            BankVariant::Insufficient => "insufficient",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub variant: BankVariant,
    pub bank_fingerprint: String,
    pub report: EvaluationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub fingerprint: String,
    pub entries: Vec<AblationEntry>,
}

impl AblationSummary {
    pub fn decider_mcc(&self, variant: BankVariant) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.variant == variant)
            .and_then(|e| e.report.entry(ScorerId::Decider))
            .map(|m| m.mcc)
    }
}

#[derive(Serialize)]
struct RunStamp<'a> {
    fingerprint: &'a str,
    config: &'a RunConfig,
}

/// Validated config plus its fingerprint and run directory.
struct Run {
    cfg: RunConfig,
    fp: String,
    paths: RunPaths,
}

impl Run {
    fn start(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let fp = cfg.fingerprint()?;
        let paths = RunPaths::new(&cfg.out_dir);
        fs::create_dir_all(&paths.root)?;
        write_json(&paths.run_config(), &RunStamp { fingerprint: &fp, config: cfg })?;
        Ok(Self { cfg: cfg.clone(), fp, paths })
    }

    fn dataset(&self) -> Result<Dataset> {
        let dir = match &self.cfg.dataset.source {
            DatasetSource::Path { dir } => dir.clone(),
            _ => self.paths.dataset_dir(),
        };
        if !dir.join("dataset.json").exists() {
            return Err(Error::MissingArtifact(format!("dataset at {} (run gen-scenario first)", dir.display())));
        }
        Dataset::load(&dir)
    }

    fn classifier(&self) -> Result<TinyCnn> {
        let path = self.cfg.classifier.checkpoint.clone().unwrap_or_else(|| self.paths.classifier());
        if !path.exists() {
            return Err(Error::MissingArtifact(format!(
                "classifier checkpoint {} (run train-classifier first)",
                path.display()
            )));
        }
        Ok(TinyCnn::load(&path)?.0)
    }

    fn ensemble(&self) -> Result<Ensemble> {
        let mut members: Vec<Box<dyn TaskClassifier>> = Vec::new();
        for k in 0..self.cfg.classifier.ensemble_size {
            let path = self.paths.ensemble_member(k);
            if !path.exists() {
                return Err(Error::MissingArtifact(format!(
                    "ensemble member {} (run train-classifier with the gde scorer enabled)",
                    path.display()
                )));
            }
            members.push(Box::new(TinyCnn::load(&path)?.0));
        }
        Ensemble::new(members)
    }

    fn bank(&self) -> Result<AttributeBank> {
        match &self.cfg.bank {
            Some(p) => load_bank(p),
            None => Ok(oracle_bank()),
        }
    }

    fn provider(&self) -> Result<Box<dyn EmbeddingProvider>> {
        build_provider(&self.cfg.provider)
    }

    fn pim(&self, paths: &RunPaths, bank: &AttributeBank, provider: &dyn EmbeddingProvider) -> Result<PimHead> {
        let path = paths.pim();
        if !path.exists() {
            return Err(Error::MissingArtifact(format!("PIM checkpoint {} (run train-pim first)", path.display())));
        }
        Ok(PimHead::load(&path, bank, provider)?.0)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), message: e.to_string() })
}

fn dataset_id(cfg: &RunConfig) -> String {
    let base = match &cfg.dataset.source {
        DatasetSource::Spurious(s) => format!("spurious-rho{}-seed{}", s.rho_train, s.seed),
        DatasetSource::Imbalanced(s) => format!("imbalanced-seed{}", s.seed),
        DatasetSource::Path { dir } => dir.display().to_string(),
    };
    match &cfg.dataset.test_corruption {
        Some(c) => format!("{base}-{:?}{}", c.kind, c.severity).to_lowercase(),
        None => base,
    }
}

fn default_arch(ds: &Dataset) -> Result<CnnArch> {
    let first = ds.samples.first().ok_or_else(|| Error::validation("dataset has no samples"))?;
    if first.image.height != first.image.width {
        return Err(Error::validation("the default architecture expects square images"));
    }
    Ok(CnnArch::desk_default(ds.num_classes(), first.image.height))
}

fn has_domains(samples: &[&Sample]) -> bool {
    samples.iter().any(|s| s.domain.is_some())
}

/// Generates the configured scenario and writes it to `<out>/dataset`.
pub fn cmd_gen_scenario(cfg: &RunConfig) -> Result<Dataset> {
    let run = Run::start(cfg)?;
    let mut ds = match &cfg.dataset.source {
        DatasetSource::Spurious(spec) => generate_spurious(spec)?,
        DatasetSource::Imbalanced(spec) => generate_imbalanced(spec)?,
        DatasetSource::Path { dir } => {
            return Err(Error::validation(format!(
                "dataset source is the existing directory {}; nothing to generate",
                dir.display()
            )))
        }
    };
    if let Some(spec) = &cfg.dataset.test_corruption {
        let test = Dataset { samples: ds.split_owned(Split::Test), ..ds.clone() };
        let corrupted = apply_corruption(&test, spec)?;
        let mut it = corrupted.samples.into_iter();
        for s in ds.samples.iter_mut().filter(|s| s.split == Split::Test) {
            *s = it.next().expect("one corrupted sample per test sample");
        }
    }
    let dir = run.paths.dataset_dir();
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    ds.save(&dir)?;
    fs::write(run.paths.dataset_stamp(), &run.fp)?;
    Ok(ds)
}

/// Trains the task classifier and, when GDE is requested, its ensemble.
pub fn cmd_train_classifier(cfg: &RunConfig) -> Result<Vec<ClassifierEpochLog>> {
    let run = Run::start(cfg)?;
    if cfg.classifier.checkpoint.is_some() {
        return Err(Error::validation("classifier.checkpoint is set; remove it to train a new classifier"));
    }
    let ds = run.dataset()?;
    let arch = match &cfg.classifier.arch {
        Some(a) => a.clone(),
        None => default_arch(&ds)?,
    };
    let train = ds.split(Split::Train);
    let (f, log) = train_classifier(&arch, &train, &cfg.classifier.train)?;
    f.save(&run.paths.classifier(), &run.fp)?;
    let mut text = String::new();
    for e in &log {
        text.push_str(&serde_json::to_string(e)?);
        text.push('\n');
    }
    fs::write(run.paths.classifier_log(), text)?;
    if cfg.scorers.contains(&ScorerId::Gde) {
        for k in 0..cfg.classifier.ensemble_size {
            let member_cfg = crate::classifier::ClassifierTrainConfig {
                seed: cfg.seed.wrapping_add(1 + k as u64),
                ..cfg.classifier.train.clone()
            };
            let (m, _) = train_classifier(&arch, &train, &member_cfg)?;
            let path = run.paths.ensemble_member(k);
            fs::create_dir_all(path.parent().expect("member path has a parent"))?;
            m.save(&path, &run.fp)?;
        }
    }
    Ok(log)
}

fn fit_pim(
    cfg: &RunConfig,
    f: &TinyCnn,
    train: &[&Sample],
    bank: &AttributeBank,
    provider: &dyn EmbeddingProvider,
) -> Result<(PimHead, TrainState)> {
    let table = embed_bank(provider, bank)?;
    let backbone = match cfg.pim.init {
        PimInit::Pretrained { .. } => Some(f),
        PimInit::Random { .. } => None,
    };
    let mut head = PimHead::new(cfg.pim.clone(), &f.arch, table, bank.fingerprint(), backbone)?;
    let state = train_pim(&mut head, f, train, &cfg.train, &cfg.loss_weights)?;
    Ok((head, state))
}

fn train_pim_into(
    run: &Run,
    paths: &RunPaths,
    f: &TinyCnn,
    ds: &Dataset,
    bank: &AttributeBank,
    provider: &dyn EmbeddingProvider,
    fp: &str,
) -> Result<(PimHead, TrainState)> {
    let (head, state) = fit_pim(&run.cfg, f, &ds.split(Split::Train), bank, provider)?;
    fs::create_dir_all(&paths.root)?;
    save_bank(bank, &paths.bank())?;
    head.save(&paths.pim(), fp)?;
    write_log_jsonl(&paths.pim_log(), &state.log)?;
    Ok((head, state))
}

/// Trains the PIM on the training split; writes the checkpoint, the bank it
/// was trained with and the per-epoch log.
pub fn cmd_train_pim(cfg: &RunConfig) -> Result<TrainState> {
    let run = Run::start(cfg)?;
    let ds = run.dataset()?;
    let f = run.classifier()?;
    let bank = run.bank()?;
    let provider = run.provider()?;
    let (_, state) = train_pim_into(&run, &run.paths, &f, &ds, &bank, provider.as_ref(), &run.fp)?;
    Ok(state)
}

fn write_scores(paths: &RunPaths, scorer: ScorerId, split: Split, records: &[ScoreRecord], fp: &str) -> Result<()> {
    write_scores_csv(&paths.scores_csv(scorer, split), records, fp)?;
    write_scores_jsonl(&paths.scores_jsonl(scorer, split), records, fp)
}

/// Scores the calibration and evaluation splits with every configured scorer.
pub fn cmd_score(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let run = Run::start(cfg)?;
    let ds = run.dataset()?;
    let f = run.classifier()?;
    let pim = if cfg.scorers.contains(&ScorerId::Decider) {
        let bank = run.bank()?;
        let provider = run.provider()?;
        Some(run.pim(&run.paths, &bank, provider.as_ref())?)
    } else {
        None
    };
    let ensemble = if cfg.scorers.contains(&ScorerId::Gde) { Some(run.ensemble()?) } else { None };
    let ctx = ScoringContext {
        classifier: &f,
        pim: pim.as_ref(),
        ensemble: ensemble.as_ref(),
        energy_temperature: cfg.energy_temperature,
    };
    let mut written = Vec::new();
    for split in [CALIBRATION_SPLIT, EVALUATION_SPLIT] {
        let samples = ds.split(split);
        if samples.is_empty() {
            return Err(Error::validation(format!("the {split} split is empty")));
        }
        for &scorer in &cfg.scorers {
            let records = score_dataset(scorer, &ctx, &samples)?;
            write_scores(&run.paths, scorer, split, &records, &run.fp)?;
            written.push(run.paths.scores_csv(scorer, split));
        }
    }
    Ok(written)
}

fn read_scores_for(paths: &RunPaths, scorer: ScorerId, split: Split) -> Result<(String, Vec<ScoreRecord>)> {
    let path = paths.scores_csv(scorer, split);
    if !path.exists() {
        return Err(Error::MissingArtifact(format!(
            "missing scores for {scorer} on the {split} split at {} (run score first)",
            path.display()
        )));
    }
    read_scores_csv(&path)
}

fn check_fingerprint(found: &str, expected: &str, what: &str) -> Result<()> {
    if found != expected {
        return Err(Error::Fingerprint(format!(
            "{what} was produced by config {} but the current config is {}",
            short(found),
            short(expected)
        )));
    }
    Ok(())
}

fn short(fp: &str) -> &str {
    &fp[..fp.len().min(12)]
}

fn domain_lookup(ds: &Dataset) -> impl Fn(&str) -> Option<String> + '_ {
    let map: std::collections::HashMap<&str, Option<String>> =
        ds.samples.iter().map(|s| (s.id.as_str(), s.domain.clone())).collect();
    move |id| map.get(id).cloned().flatten()
}

fn calibrate_records(records: &[ScoreRecord], ds: &Dataset) -> Result<Vec<Threshold>> {
    let set_id = CALIBRATION_SPLIT.to_string();
    if has_domains(&ds.split(CALIBRATION_SPLIT)) {
        calibrate_per_domain(records, &set_id, domain_lookup(ds))
    } else {
        Ok(vec![calibrate_threshold(records, &set_id)?])
    }
}

/// Writes one threshold file per scorer, with a threshold per domain when the
/// calibration split is annotated with domains.
pub fn cmd_calibrate(cfg: &RunConfig) -> Result<Vec<ThresholdFile>> {
    let run = Run::start(cfg)?;
    let ds = run.dataset()?;
    let mut out = Vec::new();
    for &scorer in &cfg.scorers {
        let (fp, records) = read_scores_for(&run.paths, scorer, CALIBRATION_SPLIT)?;
        check_fingerprint(&fp, &run.fp, &format!("{scorer} calibration scores"))?;
        let file = ThresholdFile { fingerprint: run.fp.clone(), thresholds: calibrate_records(&records, &ds)? };
        write_json(&run.paths.thresholds(scorer), &file)?;
        out.push(file);
    }
    Ok(out)
}

fn evaluate_records(records: &[ScoreRecord], thresholds: &[Threshold], ds: &Dataset) -> Result<ScorerMetrics> {
    if thresholds.iter().any(|t| t.domain.is_some()) {
        evaluate_per_domain(records, thresholds, domain_lookup(ds))
    } else {
        let t = thresholds.first().ok_or_else(|| Error::validation("threshold file holds no thresholds"))?;
        evaluate(records, t)
    }
}

fn write_report(paths: &RunPaths, report: &EvaluationReport) -> Result<()> {
    write_json(&paths.report_json(), report)?;
    fs::write(paths.report_txt(), report.to_table())?;
    write_metric_plots(report, &paths.plots_dir())?;
    Ok(())
}

/// Evaluates every scorer on the evaluation split against its calibrated
/// threshold. All inputs must come from the current config.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<EvaluationReport> {
    let run = Run::start(cfg)?;
    let ds = run.dataset()?;
    let mut inputs = Vec::new();
    for &scorer in &cfg.scorers {
        let (score_fp, records) = read_scores_for(&run.paths, scorer, EVALUATION_SPLIT)?;
        let tpath = run.paths.thresholds(scorer);
        if !tpath.exists() {
            return Err(Error::MissingArtifact(format!(
                "missing thresholds for {scorer} at {} (run calibrate first)",
                tpath.display()
            )));
        }
        let tfile: ThresholdFile = read_json(&tpath)?;
        inputs.push((scorer, score_fp, tfile, records));
    }
    let fps: BTreeSet<&str> = inputs.iter().flat_map(|(_, s, t, _)| [s.as_str(), t.fingerprint.as_str()]).collect();
    if fps.len() > 1 {
        let list: Vec<&str> = fps.iter().map(|f| short(f)).collect();
        return Err(Error::Fingerprint(format!("inputs mix fingerprints {list:?}")));
    }
    if let Some(fp) = fps.iter().next() {
        check_fingerprint(fp, &run.fp, "scores and thresholds")?;
    }
    let entries = inputs
        .iter()
        .map(|(_, _, t, records)| evaluate_records(records, &t.thresholds, &ds))
        .collect::<Result<Vec<_>>>()?;
    let report = EvaluationReport {
        fingerprint: run.fp.clone(),
        dataset_id: dataset_id(cfg),
        calibration_set_id: CALIBRATION_SPLIT.to_string(),
        entries,
    };
    write_report(&run.paths, &report)?;
    Ok(report)
}

/// Explains the given samples, or the configured ones, or else the first
/// test samples on which the classifier and the PIM disagree.
pub fn cmd_explain(cfg: &RunConfig, sample_ids: &[String]) -> Result<Vec<SampleExplanation>> {
    let run = Run::start(cfg)?;
    let ds = run.dataset()?;
    let f = run.classifier()?;
    let bank = run.bank()?;
    let provider = run.provider()?;
    let head = run.pim(&run.paths, &bank, provider.as_ref())?;
    let requested = if sample_ids.is_empty() { &cfg.explain.sample_ids[..] } else { sample_ids };
    let chosen: Vec<&Sample> = if requested.is_empty() {
        let test = ds.split(EVALUATION_SPLIT);
        let disagree: Vec<bool> = test
            .par_iter()
            .map(|s| Ok(f.predict(&s.image)? != argmax(&pim_predict(&head, &f, &s.image)?)))
            .collect::<Result<_>>()?;
        test.into_iter().zip(disagree).filter(|(_, d)| *d).map(|(s, _)| s).take(cfg.explain.max_samples).collect()
    } else {
        requested
            .iter()
            .map(|id| {
                ds.samples
                    .iter()
                    .find(|s| &s.id == id)
                    .ok_or_else(|| Error::validation(format!("unknown sample id '{id}'")))
            })
            .collect::<Result<_>>()?
    };
    let explanations = chosen
        .par_iter()
        .map(|s| explain_sample(&s.id, &head, &f, &bank, &s.image, &cfg.explain.options, cfg.explain.top_k))
        .collect::<Result<Vec<_>>>()?;
    write_json(
        &run.paths.explanations_json(),
        &ExplanationFile { fingerprint: run.fp.clone(), explanations: explanations.clone() },
    )?;
    fs::write(run.paths.explanations_txt(), render_summary(&explanations, bank.classes()))?;
    Ok(explanations)
}

fn variant_bank(bank: &AttributeBank, variant: BankVariant, count: usize, seed: u64) -> Result<AttributeBank> {
    let mode = match variant {
        BankVariant::Clean => return Ok(bank.clone()),
        BankVariant::Irrelevant => CorruptionMode::Irrelevant,
        BankVariant::Insufficient => CorruptionMode::Insufficient,
    };
    corrupt_bank(bank, &CorruptionSpec { mode, count, seed })
}

/// Trains one PIM per bank variant (clean, irrelevant, insufficient) against
/// the same classifier and evaluates DECIDER with each.
pub fn cmd_ablate_attributes(cfg: &RunConfig) -> Result<AblationSummary> {
    let run = Run::start(cfg)?;
    let ds = run.dataset()?;
    let f = run.classifier()?;
    let bank = run.bank()?;
    let provider = run.provider()?;
    let cal = ds.split(CALIBRATION_SPLIT);
    let test = ds.split(EVALUATION_SPLIT);
    let mut entries = Vec::new();
    for variant in BankVariant::ALL {
        let vbank = variant_bank(&bank, variant, cfg.ablation.count, cfg.seed)?;
        let paths = run.paths.ablation(variant);
        let (head, _) = train_pim_into(&run, &paths, &f, &ds, &vbank, provider.as_ref(), &run.fp)?;
        let ctx = ScoringContext { pim: Some(&head), ..ScoringContext::new(&f) };
        let cal_records = score_dataset(ScorerId::Decider, &ctx, &cal)?;
        let test_records = score_dataset(ScorerId::Decider, &ctx, &test)?;
        write_scores(&paths, ScorerId::Decider, CALIBRATION_SPLIT, &cal_records, &run.fp)?;
        write_scores(&paths, ScorerId::Decider, EVALUATION_SPLIT, &test_records, &run.fp)?;
        let thresholds = calibrate_records(&cal_records, &ds)?;
        write_json(
            &paths.thresholds(ScorerId::Decider),
            &ThresholdFile { fingerprint: run.fp.clone(), thresholds: thresholds.clone() },
        )?;
        let report = EvaluationReport {
            fingerprint: run.fp.clone(),
            dataset_id: dataset_id(cfg),
            calibration_set_id: CALIBRATION_SPLIT.to_string(),
            entries: vec![evaluate_records(&test_records, &thresholds, &ds)?],
        };
        write_report(&paths, &report)?;
        entries.push(AblationEntry { variant, bank_fingerprint: vbank.fingerprint(), report });
    }
    let summary = AblationSummary { fingerprint: run.fp.clone(), entries };
    write_json(&run.paths.ablation_summary(), &summary)?;
    Ok(summary)
}

/// gen-scenario, train-classifier, train-pim, score, calibrate, evaluate.
pub fn run_all(cfg: &RunConfig) -> Result<EvaluationReport> {
    if !matches!(cfg.dataset.source, DatasetSource::Path { .. }) {
        cmd_gen_scenario(cfg)?;
    }
    if cfg.classifier.checkpoint.is_none() {
        cmd_train_classifier(cfg)?;
    }
    if cfg.scorers.contains(&ScorerId::Decider) {
        cmd_train_pim(cfg)?;
    }
    cmd_score(cfg)?;
    cmd_calibrate(cfg)?;
    cmd_evaluate(cfg)
}
