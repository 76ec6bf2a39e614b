//! Stage drivers behind the command-line subcommands.
//!
//! Every stage writes under the run directory and records the SHA-256 of each
//! artifact in a JSON manifest. Directory layout:
//!
//! ```text
//! <out>/panel.bin, data.json            cached panel and its manifest
//! <out>/seed-<s>/teachers/<kind>.ckpt   teacher checkpoints + manifest.json
//! <out>/seed-<s>/students/<tag>.ckpt    student checkpoints + <tag>.json
//! <out>/seed-<s>/backtest/<model>.json  metric report (+ daily .csv)
//! <out>/analysis.json, inference_cost.json, report.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backtest::{
    apply_costs, metrics, portfolio_returns, select_top_k, write_daily_csv, CostModel, MetricReport,
};
use crate::config::{DataSource, RunConfig};
use crate::data::{
    ingest_csv, read_panel, synth_market, write_panel, DayBatch, MarketPanel, SplitSpec,
};
use crate::diagnostics::{
    alignment_from_vectors, conditional_similarity_runs, ols_attribution, portfolio_attention,
    teacher_student_rank_similarity, AlignmentTable, AttributionResult, ConditionalSimilarity,
    RankSimilarity,
};
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::model::{predict_days, train_teachers, ModelParams, TrainData, TrainReport};
use crate::objectives::{
    teacher_logits, train_student, DistillConfig, StudentReport, TeacherModel,
};
use crate::priors::{PriorKind, PriorSpec};
use crate::stats;

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes =
        fs::read(path).map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    Ok(sha256_bytes(&bytes))
}

/// Hash of the canonical JSON form of `v`.
pub fn config_hash<T: Serialize>(v: &T) -> Result<String> {
    Ok(sha256_bytes(&serde_json::to_vec(v)?))
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
    /// Hash of the configuration that produced the artifact.
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub seed: Option<u64>,
    pub artifacts: BTreeMap<String, ArtifactRecord>,
    pub created_unix: u64,
    pub updated_unix: u64,
}

impl RunManifest {
    pub fn new(stage: &str, seed: Option<u64>) -> Self {
        let t = now_unix();
        Self {
            stage: stage.into(),
            seed,
            artifacts: BTreeMap::new(),
            created_unix: t,
            updated_unix: t,
        }
    }

    pub fn load(path: &Path) -> Result<Option<Self>> {
        if path.exists() {
            read_json(path).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        self.updated_unix = now_unix();
        write_json(path, self)
    }

    /// Records `file` (inside `root`) under `key`.
    pub fn record(&mut self, root: &Path, key: &str, file: &Path, config_hash: &str) -> Result<()> {
        let rel = file
            .strip_prefix(root)
            .unwrap_or(file)
            .to_string_lossy()
            .into_owned();
        self.artifacts.insert(
            key.into(),
            ArtifactRecord {
                path: rel,
                sha256: sha256_file(file)?,
                config_hash: config_hash.into(),
            },
        );
        Ok(())
    }

    /// True when `key` exists on disk with its recorded hash and was built
    /// from `config_hash`.
    pub fn is_current(&self, root: &Path, key: &str, config_hash: &str) -> bool {
        self.artifacts.get(key).is_some_and(|a| {
            a.config_hash == config_hash
                && sha256_file(&root.join(&a.path)).is_ok_and(|h| h == a.sha256)
        })
    }

    /// Every artifact exists and matches its hash.
    pub fn verify(&self, root: &Path) -> Result<()> {
        for (key, a) in &self.artifacts {
            let p = root.join(&a.path);
            if !p.exists() {
                return Err(Error::data(format!(
                    "artifact `{key}` missing: {}",
                    p.display()
                )));
            }
            if sha256_file(&p)? != a.sha256 {
                return Err(Error::data(format!(
                    "artifact `{key}` does not match its recorded hash: {}",
                    p.display()
                )));
            }
        }
        Ok(())
    }
}

/// Applies the configured worker count to the global pool.
pub fn apply_workers(workers: Option<usize>) -> Result<()> {
    match workers {
        Some(0) => Err(Error::config("worker count must be positive")),
        Some(1) => {
            exec::set_mode(ExecMode::Sequential);
            Ok(())
        }
        Some(n) => {
            #[cfg(feature = "parallel")]
            {
                // A pool already configured by an earlier call is kept.
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
            let _ = n;
            exec::set_mode(ExecMode::Parallel);
            Ok(())
        }
        None => Ok(()),
    }
}

pub struct Paths {
    pub root: PathBuf,
}

impl Paths {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            root: cfg.out_dir.clone(),
        }
    }

    pub fn panel(&self) -> PathBuf {
        self.root.join("panel.bin")
    }

    pub fn data_manifest(&self) -> PathBuf {
        self.root.join("data.json")
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(format!("seed-{seed}"))
    }

    pub fn teachers(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("teachers")
    }

    pub fn teacher_ckpt(&self, seed: u64, kind: PriorKind) -> PathBuf {
        self.teachers(seed).join(format!("{kind}.ckpt"))
    }

    pub fn teacher_manifest(&self, seed: u64) -> PathBuf {
        self.teachers(seed).join("manifest.json")
    }

    pub fn student_ckpt(&self, seed: u64, tag: &str) -> PathBuf {
        self.seed_dir(seed)
            .join("students")
            .join(format!("{tag}.ckpt"))
    }

    pub fn student_manifest(&self, seed: u64, tag: &str) -> PathBuf {
        self.seed_dir(seed)
            .join("students")
            .join(format!("{tag}.json"))
    }

    pub fn backtest(&self, seed: u64, model: &str) -> PathBuf {
        self.seed_dir(seed)
            .join("backtest")
            .join(format!("{model}.json"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub stocks: usize,
    pub days: usize,
    pub usable_days: usize,
    pub first_date: String,
    pub last_date: String,
    /// `regime x length` per synthetic segment; empty for CSV input.
    pub segments: Vec<String>,
    /// Mean over stocks of the lag-1 autocorrelation of daily returns.
    pub lag1_autocorr: f64,
    pub dropped_symbols: Vec<String>,
}

fn summarize(panel: &MarketPanel, segments: Vec<String>, dropped: Vec<String>) -> DataSummary {
    let (s, t) = (panel.num_stocks(), panel.num_days());
    let ret = panel.next_day_returns.data();
    let acs: Vec<f64> = (0..s)
        .filter_map(|i| {
            let series: Vec<f64> = ret[i * t..(i + 1) * t]
                .iter()
                .copied()
                .filter(|v| v.is_finite())
                .collect();
            stats::autocorrelation(&series, 1)
        })
        .collect();
    DataSummary {
        stocks: s,
        days: t,
        usable_days: panel.usable_days().len(),
        first_date: panel.dates.first().cloned().unwrap_or_default(),
        last_date: panel.dates.last().cloned().unwrap_or_default(),
        segments,
        lag1_autocorr: stats::mean(&acs),
        dropped_symbols: dropped,
    }
}

fn data_hash(cfg: &RunConfig) -> Result<String> {
    match &cfg.data {
        DataSource::Synthetic { synth } => {
            config_hash(&(synth, cfg.seeds.first().copied().unwrap_or(0)))
        }
        DataSource::Csv { path, horizon_q } => config_hash(&(sha256_file(path)?, horizon_q)),
    }
}

/// Builds the panel from the configured source and caches it.
pub fn prepare_data(cfg: &RunConfig) -> Result<(MarketPanel, DataSummary)> {
    let paths = Paths::new(cfg);
    let (panel, summary) = match &cfg.data {
        DataSource::Synthetic { synth } => {
            // The market itself is one fixed draw shared by all model seeds.
            let seed = cfg.seeds.first().copied().unwrap_or(0);
            let panel = synth_market(synth, seed)?;
            let segs = synth
                .segments
                .iter()
                .map(|s| format!("{} x {}", regime_name(&s.regime), s.length))
                .collect();
            let summary = summarize(&panel, segs, vec![]);
            (panel, summary)
        }
        DataSource::Csv { path, horizon_q } => {
            let (panel, report) = ingest_csv(path, *horizon_q)?;
            let summary = summarize(
                &panel,
                vec![],
                report.dropped.iter().map(|(s, _)| s.clone()).collect(),
            );
            (panel, summary)
        }
    };
    fs::create_dir_all(&paths.root)?;
    write_panel(&paths.panel(), &panel)?;
    let mut m = RunManifest::new("data", None);
    m.record(&paths.root, "panel", &paths.panel(), &data_hash(cfg)?)?;
    m.save(&paths.data_manifest())?;
    write_json(&paths.root.join("data_summary.json"), &summary)?;
    Ok((panel, summary))
}

fn regime_name(r: &crate::data::Regime) -> String {
    use crate::data::Regime;
    match r {
        Regime::Momentum { coef } => format!("momentum({coef})"),
        Regime::MeanRevert { coef } => format!("mean-revert({coef})"),
        Regime::Periodic { period } => format!("periodic({period})"),
        Regime::Noise => "noise".into(),
    }
}

/// The cached panel when it matches the configuration, otherwise a fresh one.
pub fn load_panel(cfg: &RunConfig) -> Result<MarketPanel> {
    let paths = Paths::new(cfg);
    if let Some(m) = RunManifest::load(&paths.data_manifest())? {
        if m.is_current(&paths.root, "panel", &data_hash(cfg)?) {
            return read_panel(&paths.panel());
        }
    }
    Ok(prepare_data(cfg)?.0)
}

pub fn split_for(cfg: &RunConfig, panel: &MarketPanel) -> Result<SplitSpec> {
    SplitSpec::by_ratio(
        panel,
        cfg.backbone.lookback,
        cfg.split.train,
        cfg.split.valid,
    )
}

pub fn test_batches(cfg: &RunConfig, panel: &MarketPanel) -> Result<Vec<DayBatch>> {
    let split = split_for(cfg, panel)?;
    Ok(panel.batches(&split.test_days(), cfg.backbone.lookback))
}

fn teacher_hash(cfg: &RunConfig, seed: u64, spec: &PriorSpec) -> Result<String> {
    config_hash(&(
        data_hash(cfg)?,
        &cfg.split,
        &cfg.backbone,
        &cfg.teachers.train,
        seed,
        spec,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherStageReport {
    pub seed: u64,
    pub trained: Vec<PriorKind>,
    pub reused: Vec<PriorKind>,
    pub reports: Vec<TrainReport>,
}

/// Trains every configured teacher whose checkpoint is missing or stale.
pub fn train_teachers_stage(
    cfg: &RunConfig,
    panel: &MarketPanel,
    seed: u64,
) -> Result<TeacherStageReport> {
    let paths = Paths::new(cfg);
    let mpath = paths.teacher_manifest(seed);
    let mut manifest =
        RunManifest::load(&mpath)?.unwrap_or_else(|| RunManifest::new("teachers", Some(seed)));
    let specs = cfg.teacher_specs();
    let mut todo = Vec::new();
    let mut reused = Vec::new();
    for spec in &specs {
        if manifest.is_current(
            &paths.root,
            spec.kind().name(),
            &teacher_hash(cfg, seed, spec)?,
        ) {
            reused.push(spec.kind());
        } else {
            todo.push(spec.clone());
        }
    }
    let mut reports = Vec::new();
    if !todo.is_empty() {
        let split = split_for(cfg, panel)?;
        let data = TrainData::new(panel, &split, cfg.backbone.lookback);
        let tcfg = crate::model::TrainConfig {
            seed,
            ..cfg.teachers.train.clone()
        };
        let trained = train_teachers(&data, &cfg.backbone, &todo, &tcfg)?;
        fs::create_dir_all(paths.teachers(seed))?;
        for (spec, (params, report)) in todo.iter().zip(trained) {
            let ckpt = paths.teacher_ckpt(seed, spec.kind());
            params.save(&ckpt)?;
            write_json(
                &paths
                    .teachers(seed)
                    .join(format!("{}.report.json", spec.kind())),
                &report,
            )?;
            manifest.record(
                &paths.root,
                spec.kind().name(),
                &ckpt,
                &teacher_hash(cfg, seed, spec)?,
            )?;
            reports.push(report);
        }
        manifest.save(&mpath)?;
    }
    Ok(TeacherStageReport {
        seed,
        trained: todo.iter().map(|s| s.kind()).collect(),
        reused,
        reports,
    })
}

/// Loads the configured teachers of one seed, failing on the first missing or
/// corrupted checkpoint.
pub fn load_teachers(cfg: &RunConfig, seed: u64) -> Result<Vec<TeacherModel>> {
    let paths = Paths::new(cfg);
    let manifest = RunManifest::load(&paths.teacher_manifest(seed))?;
    cfg.teacher_specs()
        .iter()
        .map(|spec| {
            let ckpt = paths.teacher_ckpt(seed, spec.kind());
            if !ckpt.exists() {
                return Err(Error::data(format!(
                    "missing {} teacher checkpoint {}",
                    spec.kind(),
                    ckpt.display()
                )));
            }
            if let Some(a) = manifest
                .as_ref()
                .and_then(|m| m.artifacts.get(spec.kind().name()))
            {
                if sha256_file(&ckpt)? != a.sha256 {
                    return Err(Error::data(format!(
                        "teacher checkpoint {} does not match its manifest",
                        ckpt.display()
                    )));
                }
            }
            TeacherModel::new(ModelParams::load(&ckpt, &cfg.backbone, spec)?, spec)
        })
        .collect()
}

/// File-name tag of a student trained with `d` from the configured teachers.
pub fn student_tag(cfg: &RunConfig) -> String {
    let d = &cfg.distill;
    let base = DistillConfig::default();
    let mut tag = if d.use_ls && d.use_swa && d.temperature == base.temperature && d.lambda == 1.0 {
        "tips".to_string()
    } else {
        let mut t = format!("student-t{}", d.temperature);
        if !d.use_ls {
            t.push_str("-nols");
        }
        if !d.use_swa {
            t.push_str("-noswa");
        }
        if d.lambda < 1.0 {
            t.push_str(&format!("-l{}", d.lambda));
        }
        t
    };
    if cfg.teachers.groups.len() < crate::priors::BiasGroup::ALL.len() {
        for g in &cfg.teachers.groups {
            tag.push('-');
            tag.push_str(g.name());
        }
    }
    tag
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentManifest {
    pub tag: String,
    pub distill: DistillConfig,
    pub teachers: Vec<PriorKind>,
    pub report: StudentReport,
    pub manifest: RunManifest,
}

pub fn distill_stage(cfg: &RunConfig, panel: &MarketPanel, seed: u64) -> Result<StudentManifest> {
    let teachers = load_teachers(cfg, seed)?;
    let split = split_for(cfg, panel)?;
    let data = TrainData::new(panel, &split, cfg.backbone.lookback);
    let dcfg = DistillConfig {
        seed,
        ..cfg.distill.clone()
    };
    let (params, report) = train_student(&data, &cfg.backbone, &teachers, &dcfg)?;
    let paths = Paths::new(cfg);
    let tag = student_tag(cfg);
    let ckpt = paths.student_ckpt(seed, &tag);
    fs::create_dir_all(ckpt.parent().expect("student dir"))?;
    params.save(&ckpt)?;
    let mut manifest = RunManifest::new("distill", Some(seed));
    let hash = config_hash(&(
        data_hash(cfg)?,
        &cfg.split,
        &cfg.backbone,
        &cfg.teachers,
        &dcfg,
    ))?;
    manifest.record(&paths.root, &tag, &ckpt, &hash)?;
    let out = StudentManifest {
        tag: tag.clone(),
        distill: dcfg,
        teachers: teachers.iter().map(|t| t.prior.spec.kind()).collect(),
        report,
        manifest,
    };
    write_json(&paths.student_manifest(seed, &tag), &out)?;
    Ok(out)
}

pub fn load_student(cfg: &RunConfig, seed: u64, tag: &str) -> Result<ModelParams> {
    let paths = Paths::new(cfg);
    let ckpt = paths.student_ckpt(seed, tag);
    if !ckpt.exists() {
        return Err(Error::data(format!(
            "missing student checkpoint {}",
            ckpt.display()
        )));
    }
    let m: StudentManifest = read_json(&paths.student_manifest(seed, tag))?;
    m.manifest.verify(&paths.root)?;
    ModelParams::load(&ckpt, &cfg.backbone, &PriorSpec::Vanilla)
}

/// What a backtest scores.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ModelRef {
    Student(String),
    Teacher(PriorKind),
    /// Mean of the configured teachers' logits.
    Ensemble,
}

impl ModelRef {
    pub fn parse(s: &str) -> Self {
        if s == "ensemble" {
            ModelRef::Ensemble
        } else if let Ok(k) = s.parse::<PriorKind>() {
            ModelRef::Teacher(k)
        } else {
            ModelRef::Student(s.to_string())
        }
    }

    pub fn name(&self) -> String {
        match self {
            ModelRef::Student(t) => t.clone(),
            ModelRef::Teacher(k) => format!("teacher-{k}"),
            ModelRef::Ensemble => "ensemble".into(),
        }
    }
}

fn mean_logits(per_model: &[Vec<f64>]) -> Vec<f64> {
    let n = per_model.len() as f64;
    (0..per_model[0].len())
        .map(|i| per_model.iter().map(|l| l[i]).sum::<f64>() / n)
        .collect()
}

/// Per-day scores of `model` on `batches`.
pub fn predict_model(
    cfg: &RunConfig,
    seed: u64,
    model: &ModelRef,
    batches: &[DayBatch],
) -> Result<Vec<Vec<f64>>> {
    let vanilla = PriorSpec::Vanilla.build(cfg.backbone.lookback, cfg.backbone.heads)?;
    match model {
        ModelRef::Student(tag) => predict_days(&load_student(cfg, seed, tag)?, &vanilla, batches),
        ModelRef::Teacher(kind) => {
            let teachers = load_teachers(cfg, seed)?;
            let t = teachers
                .iter()
                .find(|t| t.prior.spec.kind() == *kind)
                .ok_or_else(|| {
                    Error::config(format!("teacher `{kind}` is not in the configured subset"))
                })?;
            predict_days(&t.params, &t.prior, batches)
        }
        ModelRef::Ensemble => {
            let teachers = load_teachers(cfg, seed)?;
            batches
                .iter()
                .map(|b| Ok(mean_logits(&teacher_logits(&teachers, b)?)))
                .collect()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub model: String,
    pub seed: u64,
    pub k: usize,
    pub window: usize,
    pub costs: CostModel,
    pub gross: MetricReport,
    pub net: MetricReport,
    pub top1_concentration: f64,
    pub first_date: String,
    pub last_date: String,
}

pub fn backtest_predictions(
    cfg: &RunConfig,
    panel: &MarketPanel,
    batches: &[DayBatch],
    preds: &[Vec<f64>],
    model: &str,
    seed: u64,
    csv_out: Option<&Path>,
) -> Result<BacktestReport> {
    let returns: Vec<Vec<f64>> = batches.iter().map(|b| b.next_returns.clone()).collect();
    let run = portfolio_returns(preds, &returns, cfg.backtest.k, cfg.backtest.window)?;
    let costs = cfg.backtest.costs.model()?;
    let net = apply_costs(&run.daily, &costs)?;
    let dates: Vec<String> = batches.iter().map(|b| panel.dates[b.day].clone()).collect();
    if let Some(p) = csv_out {
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        write_daily_csv(fs::File::create(p)?, &dates, &run.daily, &net)?;
    }
    Ok(BacktestReport {
        model: model.into(),
        seed,
        k: cfg.backtest.k,
        window: cfg.backtest.window,
        costs,
        gross: metrics(&run.daily)?,
        net: metrics(&net)?,
        top1_concentration: run.top1_concentration(),
        first_date: dates.first().cloned().unwrap_or_default(),
        last_date: dates.last().cloned().unwrap_or_default(),
    })
}

/// Backtests `model` on the test period and writes its JSON and daily CSV.
pub fn backtest_stage(
    cfg: &RunConfig,
    panel: &MarketPanel,
    seed: u64,
    model: &ModelRef,
) -> Result<BacktestReport> {
    let batches = test_batches(cfg, panel)?;
    let preds = predict_model(cfg, seed, model, &batches)?;
    let paths = Paths::new(cfg);
    let json = paths.backtest(seed, &model.name());
    let report = backtest_predictions(
        cfg,
        panel,
        &batches,
        &preds,
        &model.name(),
        seed,
        Some(&json.with_extension("csv")),
    )?;
    write_json(&json, &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceCost {
    pub student_passes: usize,
    pub ensemble_passes: usize,
    pub student_params: usize,
    pub ensemble_params: usize,
    pub student_secs: f64,
    pub ensemble_secs: f64,
    /// `student_secs / ensemble_secs`.
    pub ratio: f64,
    pub days: usize,
}

/// Times single-threaded forward passes of the student and of every teacher
/// over the same batches; the fastest of `repeats` runs counts.
pub fn measure_inference(
    student: &ModelParams,
    teachers: &[TeacherModel],
    batches: &[DayBatch],
    repeats: usize,
) -> Result<InferenceCost> {
    let vanilla = PriorSpec::Vanilla.build(student.config.lookback, student.config.heads)?;
    let time = |f: &dyn Fn() -> Result<()>| -> Result<f64> {
        let mut best = f64::INFINITY;
        for _ in 0..repeats.max(1) {
            let t = Instant::now();
            f()?;
            best = best.min(t.elapsed().as_secs_f64());
        }
        Ok(best)
    };
    let (s, e) = exec::with_mode(ExecMode::Sequential, || -> Result<(f64, f64)> {
        let s = time(&|| {
            for b in batches {
                std::hint::black_box(student.logits(&vanilla, &b.x)?);
            }
            Ok(())
        })?;
        let e = time(&|| {
            for b in batches {
                std::hint::black_box(teacher_logits(teachers, b)?);
            }
            Ok(())
        })?;
        Ok((s, e))
    })?;
    Ok(InferenceCost {
        student_passes: 1,
        ensemble_passes: teachers.len(),
        student_params: student.parameter_count(),
        ensemble_params: teachers.iter().map(|t| t.params.parameter_count()).sum(),
        student_secs: s,
        ensemble_secs: e,
        ratio: s / e,
        days: batches.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub student: String,
    pub seeds: Vec<u64>,
    pub missing_seeds: Vec<u64>,
    pub low_power: bool,
    /// Seed-averaged TIPS returns regressed on each baseline's.
    pub attribution: BTreeMap<String, AttributionResult>,
    /// Teacher–student Spearman similarity for every available student tag.
    pub similarity: BTreeMap<String, RankSimilarity>,
    pub alignment: AlignmentTable,
    /// Conditional MA5 strategy similarity against each baseline.
    pub conditional: BTreeMap<String, ConditionalSimilarity>,
    pub backtests: BTreeMap<String, MetricReport>,
}

fn available_students(cfg: &RunConfig, seeds: &[u64]) -> Vec<String> {
    let paths = Paths::new(cfg);
    let mut tags: Vec<String> = match fs::read_dir(paths.seed_dir(seeds[0]).join("students")) {
        Ok(rd) => rd
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let p = e.path();
                if p.extension()? != "ckpt" {
                    return None;
                }
                Some(p.file_stem()?.to_string_lossy().into_owned())
            })
            .collect(),
        Err(_) => vec![],
    };
    tags.retain(|t| seeds.iter().all(|&s| paths.student_ckpt(s, t).exists()));
    tags.sort();
    tags
}

fn seed_mean(per_seed: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    (0..per_seed[0].len())
        .map(|d| mean_logits(&per_seed.iter().map(|p| p[d].clone()).collect::<Vec<_>>()))
        .collect()
}

/// Diagnostics over all seeds with a trained student; statistics use the
/// seed-averaged prediction series.
pub fn analyze(cfg: &RunConfig, panel: &MarketPanel) -> Result<(AnalysisReport, InferenceCost)> {
    let paths = Paths::new(cfg);
    let tag = student_tag(cfg);
    let (seeds, missing): (Vec<u64>, Vec<u64>) = cfg
        .seeds
        .iter()
        .partition(|&&s| paths.student_ckpt(s, &tag).exists());
    if seeds.is_empty() {
        return Err(Error::data(format!(
            "no seed has a trained `{tag}` student; run distill first"
        )));
    }
    let low_power = seeds.len() < 5;
    if low_power {
        log::warn!(
            "analysis over {} seed(s) only; statistics are low-power",
            seeds.len()
        );
    }
    let batches = test_batches(cfg, panel)?;
    let days: Vec<usize> = batches.iter().map(|b| b.day).collect();
    let kinds: Vec<PriorKind> = cfg.teacher_specs().iter().map(|s| s.kind()).collect();
    let vanilla = PriorSpec::Vanilla.build(cfg.backbone.lookback, cfg.backbone.heads)?;

    let mut student_preds = Vec::new();
    let mut teacher_preds: Vec<Vec<Vec<Vec<f64>>>> = vec![Vec::new(); kinds.len()];
    for &seed in &seeds {
        student_preds.push(predict_days(
            &load_student(cfg, seed, &tag)?,
            &vanilla,
            &batches,
        )?);
        for (j, t) in load_teachers(cfg, seed)?.iter().enumerate() {
            teacher_preds[j].push(predict_days(&t.params, &t.prior, &batches)?);
        }
    }
    let tips = seed_mean(&student_preds);
    let teachers: Vec<Vec<Vec<f64>>> = teacher_preds.iter().map(|p| seed_mean(p)).collect();
    let ensemble: Vec<Vec<f64>> = (0..days.len())
        .map(|d| mean_logits(&teachers.iter().map(|t| t[d].clone()).collect::<Vec<_>>()))
        .collect();

    let returns: Vec<Vec<f64>> = batches.iter().map(|b| b.next_returns.clone()).collect();
    let (k, w) = (cfg.backtest.k, cfg.backtest.window);
    let tips_run = portfolio_returns(&tips, &returns, k, w)?;
    let mut baselines = vec![(
        "ensemble".to_string(),
        portfolio_returns(&ensemble, &returns, k, w)?,
    )];
    if let Some(j) = kinds.iter().position(|&k| k == PriorKind::Vanilla) {
        baselines.push((
            "vanilla".to_string(),
            portfolio_returns(&teachers[j], &returns, k, w)?,
        ));
    }
    let mut attribution = BTreeMap::new();
    let mut conditional = BTreeMap::new();
    let mut backtests = BTreeMap::new();
    backtests.insert(tag.clone(), metrics(&tips_run.daily)?);
    for (name, run) in &baselines {
        attribution.insert(name.clone(), ols_attribution(&tips_run.daily, &run.daily)?);
        conditional.insert(
            name.clone(),
            conditional_similarity_runs(
                &tips_run,
                run,
                panel,
                &days,
                cfg.backbone.lookback,
                cfg.analyze.quantile,
            )?,
        );
        backtests.insert(name.clone(), metrics(&run.daily)?);
    }

    let mut similarity = BTreeMap::new();
    for other in available_students(cfg, &seeds) {
        let per_seed: Vec<Vec<Vec<f64>>> = seeds
            .iter()
            .map(|&s| predict_days(&load_student(cfg, s, &other)?, &vanilla, &batches))
            .collect::<Result<_>>()?;
        similarity.insert(
            other,
            teacher_student_rank_similarity(&seed_mean(&per_seed), &teachers)?,
        );
    }

    // Attention maps are large, so each day is reduced to its portfolio
    // vectors before moving on.
    let seed0 = seeds[0];
    let student0 = load_student(cfg, seed0, &tag)?;
    let teachers0 = load_teachers(cfg, seed0)?;
    let tokens = cfg.backbone.lookback;
    let mut sv = Vec::with_capacity(days.len());
    let mut tv: Vec<(PriorKind, Vec<Vec<f64>>)> = kinds.iter().map(|&k| (k, Vec::new())).collect();
    for b in &batches {
        let art = student0.predict(&vanilla, &b.x)?;
        let (sel, wts) = select_top_k(&art.logits, k);
        sv.push(portfolio_attention(&art.attention, &sel, &wts, tokens));
        let arts = exec::map(&teachers0, |t| t.params.predict(&t.prior, &b.x));
        for (slot, a) in tv.iter_mut().zip(arts) {
            slot.1
                .push(portfolio_attention(&a?.attention, &sel, &wts, tokens));
        }
    }
    let alignment = alignment_from_vectors(&sv, &tv)?;

    let cost = measure_inference(&student0, &teachers0, &batches, cfg.analyze.timing_repeats)?;
    let report = AnalysisReport {
        student: tag,
        seeds,
        missing_seeds: missing,
        low_power,
        attribution,
        similarity,
        alignment,
        conditional,
        backtests,
    };
    write_json(&paths.root.join("analysis.json"), &report)?;
    write_json(&paths.root.join("inference_cost.json"), &cost)?;
    Ok((report, cost))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub seeds: usize,
    pub annual_return: f64,
    pub sharpe: f64,
    pub calmar: f64,
    pub max_drawdown: f64,
    pub net_annual_return: f64,
    pub net_sharpe: f64,
}

/// Seed means of every backtest on disk, keyed by model name.
pub fn collect_report(cfg: &RunConfig) -> Result<BTreeMap<String, ModelSummary>> {
    let paths = Paths::new(cfg);
    let mut by_model: BTreeMap<String, Vec<BacktestReport>> = BTreeMap::new();
    for &seed in &cfg.seeds {
        let dir = paths.seed_dir(seed).join("backtest");
        let Ok(rd) = fs::read_dir(&dir) else { continue };
        let mut files: Vec<PathBuf> = rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        for f in files {
            let r: BacktestReport = read_json(&f)?;
            by_model.entry(r.model.clone()).or_default().push(r);
        }
    }
    if by_model.is_empty() {
        return Err(Error::data("no backtest results found; run backtest first"));
    }
    let out: BTreeMap<String, ModelSummary> = by_model
        .into_iter()
        .map(|(name, rs)| {
            let m = |f: &dyn Fn(&BacktestReport) -> f64| {
                stats::mean(&rs.iter().map(f).collect::<Vec<_>>())
            };
            let s = ModelSummary {
                seeds: rs.len(),
                annual_return: m(&|r| r.gross.annual_return),
                sharpe: m(&|r| r.gross.sharpe.unwrap_or(f64::NAN)),
                calmar: m(&|r| r.gross.calmar),
                max_drawdown: m(&|r| r.gross.max_drawdown),
                net_annual_return: m(&|r| r.net.annual_return),
                net_sharpe: m(&|r| r.net.sharpe.unwrap_or(f64::NAN)),
            };
            (name, s)
        })
        .collect();
    write_json(&paths.root.join("report.json"), &out)?;
    Ok(out)
}

pub fn render_report(rows: &BTreeMap<String, ModelSummary>) -> String {
    let mut s = format!(
        "{:<28} {:>5} {:>9} {:>8} {:>9} {:>8} {:>9} {:>8}\n",
        "model", "seeds", "AR", "SR", "CR", "MDD", "AR(net)", "SR(net)"
    );
    for (name, r) in rows {
        s.push_str(&format!(
            "{:<28} {:>5} {:>9.4} {:>8.3} {:>9.3} {:>8.4} {:>9.4} {:>8.3}\n",
            name,
            r.seeds,
            r.annual_return,
            r.sharpe,
            r.calmar,
            r.max_drawdown,
            r.net_annual_return,
            r.net_sharpe
        ));
    }
    s
}

/// Data, teachers, distillation and student/ensemble backtests for every
/// seed. Returns the path of the combined metric JSON.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let (panel, _) = prepare_data(cfg)?;
    let tag = student_tag(cfg);
    let mut all: BTreeMap<String, BacktestReport> = BTreeMap::new();
    for &seed in &cfg.seeds {
        train_teachers_stage(cfg, &panel, seed)?;
        distill_stage(cfg, &panel, seed)?;
        for model in [ModelRef::Student(tag.clone()), ModelRef::Ensemble] {
            let r = backtest_stage(cfg, &panel, seed, &model)?;
            all.insert(format!("seed-{seed}/{}", model.name()), r);
        }
    }
    let path = Paths::new(cfg).root.join("metrics.json");
    write_json(&path, &all)?;
    Ok(path)
}
