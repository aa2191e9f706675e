//! Cross-validated end-to-end run: cohort generation, preprocessing,
//! per-fold training, inference, fusion and evaluation.

pub mod cache;
pub mod plots;
pub mod report;

use std::fs;
use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::TrainConfig;
use crate::cohort::{fold_assignment, generate_subject, substream, CohortSpec, RadarConfig, SubjectProfile, SubjectRecord};
use crate::detector::{train_detector, DetectorConfig, DetectorModel, DetectorSample, DetectorTrainConfig};
use crate::error::{Error, Result};
use crate::metrics::{ahi_and_severity, average_precision, ApInput, AhiReport};
use crate::oximetry::{
    build_fusion_dataset, clean_trace, odi3, soft_fuse, tune_omega, FusedDetection, FusionNet, FusionSubject,
    OMEGA_GRID,
};
use crate::preproc::{compute_spectrogram_stack, range_transform, read_dump, write_dump, NormStats, PreprocConfig, SpectrogramStack};
use crate::stager::{
    two_stage_train, StagePrediction, StagerConfig, StagerModel, StagerSample, StagerTrainConfig, STAGES,
};
use crate::types::{AnnotatedEvent, DetectedSegment, Granularity, Hypnogram, SpO2Trace};

pub use cache::{content_hash, Cache, ARTIFACT_VERSION};
pub use report::{Agreement, BlockReport, FoldBlock, RunReport, StagingStats, SubjectResult, REPORT_SCHEMA_VERSION};

/// Candidate minimum scores for counting detections in the AHI.
pub const SCORE_GRID: [f64; 19] = [
    0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95,
];

/// Everything a run depends on. `seed` replaces the cohort seed and the seeds
/// inside the training configs, which are derived per fold from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub cohort: CohortSpec,
    /// Replaces `cohort.radar` when set.
    pub radar: Option<RadarConfig>,
    pub preproc: PreprocConfig,
    pub detector: DetectorConfig,
    pub detector_train: DetectorTrainConfig,
    pub stager: StagerConfig,
    pub stager_train: StagerTrainConfig,
    pub fusion_train: TrainConfig,
    /// Fusion weight; tuned on the validation fold over [`OMEGA_GRID`] when unset.
    pub omega: Option<f64>,
    /// Minimum fused score for a detection to count in the AHI; calibrated on
    /// the validation fold over [`SCORE_GRID`] when unset.
    pub ahi_min_score: Option<f64>,
    pub folds: usize,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            cohort: CohortSpec::default(),
            radar: None,
            preproc: PreprocConfig::default(),
            detector: DetectorConfig::default(),
            detector_train: DetectorTrainConfig {
                optim: TrainConfig::new(1e-3, 60, 0),
                steps_per_epoch: 32,
                ..DetectorTrainConfig::default()
            },
            stager: StagerConfig::default(),
            stager_train: StagerTrainConfig::default(),
            fusion_train: TrainConfig::new(1e-2, 300, 0),
            omega: None,
            ahi_min_score: None,
            folds: 4,
            out_dir: PathBuf::from("out"),
            seed: 7,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::invalid(format!("fold count {} must be at least 2", self.folds)));
        }
        if self.cohort.subjects < self.folds {
            return Err(Error::invalid(format!(
                "{} subjects cannot fill {} folds",
                self.cohort.subjects, self.folds
            )));
        }
        if let Some(w) = self.omega {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::invalid(format!("fusion weight {w} outside [0, 1]")));
            }
        }
        self.detector.validate()?;
        self.detector_train.optim.validate()?;
        self.fusion_train.validate()?;
        Ok(())
    }

    /// Cohort recipe with the run seed and radar override applied.
    pub fn cohort_spec(&self) -> CohortSpec {
        let mut c = self.cohort.clone();
        c.seed = self.seed;
        if let Some(r) = self.radar {
            c.radar = r;
        }
        c
    }

    pub fn cache(&self) -> Cache {
        Cache::new(self.out_dir.join("cache"))
    }

    fn fold_seed(&self, fold: usize, stream: u64) -> u64 {
        substream(self.seed, 50_000 + stream * 1000 + fold as u64).gen()
    }

    /// Hash of every field that influences results (the output directory
    /// does not).
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        content_hash("pipeline", &c)
    }
}

fn stage_err(stage: &str, subject: &str) -> impl FnOnce(Error) -> Error {
    let (stage, subject) = (stage.to_string(), subject.to_string());
    move |e| match e {
        Error::Stage { .. } => e,
        e => Error::Stage {
            stage,
            subject,
            source: Box::new(e),
        },
    }
}

/// Simulated records for every subject of the cohort.
pub fn generate_cohort(config: &PipelineConfig) -> Result<Vec<SubjectRecord>> {
    config
        .cohort_spec()
        .profiles()
        .iter()
        .map(|p| generate_subject(p).map_err(stage_err("generate", &p.id)))
        .collect()
}

/// One preprocessed night: the raw (un-normalised) stack, the cleaned SpO₂
/// trace and the reference annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectData {
    pub id: String,
    pub hash: String,
    pub stack: SpectrogramStack,
    pub spo2: SpO2Trace,
    pub events: Vec<AnnotatedEvent>,
    pub hypnogram: Hypnogram,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SubjectMeta {
    id: String,
    spo2: SpO2Trace,
    events: Vec<AnnotatedEvent>,
    hypnogram: Hypnogram,
}

/// Preprocesses a record that is already in memory.
pub fn preprocess_record(record: &SubjectRecord, preproc: &PreprocConfig, hash: String) -> Result<SubjectData> {
    let rtm = range_transform(&record.beat, &record.config).map_err(stage_err("preprocess", &record.id))?;
    let stack = compute_spectrogram_stack(&rtm, preproc).map_err(stage_err("preprocess", &record.id))?;
    Ok(SubjectData {
        id: record.id.clone(),
        hash,
        stack,
        spo2: clean_trace(&record.spo2),
        events: record.truth_events.clone(),
        hypnogram: record.truth_hypnogram.clone(),
    })
}

/// Generates and preprocesses one subject, reusing a cached result when the
/// profile and preprocessing settings are unchanged.
pub fn prepare_subject(profile: &SubjectProfile, preproc: &PreprocConfig, cache: &Cache) -> Result<SubjectData> {
    let hash = content_hash("subject", &(profile, preproc))?;
    let dir = cache.entry("subjects", &profile.id, &hash);
    let io = stage_err("preprocess", &profile.id);
    if cache.is_complete(&dir) {
        let load = || -> Result<SubjectData> {
            let meta: SubjectMeta = serde_json::from_slice(&fs::read(dir.join("meta.json"))?)?;
            Ok(SubjectData {
                id: meta.id,
                hash: hash.clone(),
                stack: read_dump(&dir, "stack")?,
                spo2: meta.spo2,
                events: meta.events,
                hypnogram: meta.hypnogram,
            })
        };
        return load().map_err(io);
    }
    let record = generate_subject(profile).map_err(stage_err("generate", &profile.id))?;
    let data = preprocess_record(&record, preproc, hash.clone())?;
    drop(record);
    let save = || -> Result<()> {
        cache.begin(&dir)?;
        write_dump(&data.stack, &dir, "stack")?;
        let meta = SubjectMeta {
            id: data.id.clone(),
            spo2: data.spo2.clone(),
            events: data.events.clone(),
            hypnogram: data.hypnogram.clone(),
        };
        fs::write(dir.join("meta.json"), serde_json::to_vec(&meta)?)?;
        cache.finish(&dir, &hash)
    };
    save().map_err(io)?;
    Ok(data)
}

pub fn prepare_subjects(config: &PipelineConfig) -> Result<Vec<SubjectData>> {
    let cache = config.cache();
    config
        .cohort_spec()
        .profiles()
        .iter()
        .map(|p| {
            log::info!("preparing subject {}", p.id);
            prepare_subject(p, &config.preproc, &cache)
        })
        .collect()
}

/// Subject indices for one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub fold: usize,
    pub train: Vec<usize>,
    /// Used for detector model selection and fusion/AHI calibration.
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Round-robin folds. Validation is the next fold when there are at least
/// three, otherwise the first non-test subject.
pub fn fold_plans(subjects: usize, folds: usize) -> Result<Vec<FoldPlan>> {
    if folds < 2 || subjects < folds {
        return Err(Error::invalid(format!("cannot split {subjects} subjects into {folds} folds")));
    }
    let assign = fold_assignment(subjects, folds);
    let plans = (0..folds)
        .map(|k| {
            let test: Vec<usize> = (0..subjects).filter(|&i| assign[i] == k).collect();
            let rest: Vec<usize> = (0..subjects).filter(|&i| assign[i] != k).collect();
            let val: Vec<usize> = if folds >= 3 {
                rest.iter().copied().filter(|&i| assign[i] == (k + 1) % folds).collect()
            } else {
                rest[..1].to_vec()
            };
            let train = rest.into_iter().filter(|i| !val.contains(i)).collect();
            FoldPlan { fold: k, train, val, test }
        })
        .collect::<Vec<_>>();
    if plans.iter().any(|p| p.train.is_empty()) {
        return Err(Error::invalid(format!("{subjects} subjects leave a fold without training data")));
    }
    Ok(plans)
}

/// Training-side summary stored with each fold's models.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FoldTraining {
    pub detector_best_epoch: Option<usize>,
    pub detector_val_ap: Vec<(usize, f64)>,
    pub detector_diverged: bool,
    pub stager_final_loss: Option<f64>,
    pub stager_diverged: bool,
    pub fusion_samples: usize,
    pub fusion_with_replacement: bool,
    pub fusion_final_loss: Option<f64>,
    /// Validation AP for every fusion weight tried.
    pub omega_scan: Vec<(f64, f64)>,
    pub omega: f64,
    pub ahi_min_score: f64,
}

/// Trained networks and calibrated settings for one fold.
#[derive(Debug, Clone)]
pub struct FoldModels {
    pub plan: FoldPlan,
    pub hash: String,
    pub dir: PathBuf,
    pub norm: NormStats,
    pub detector: DetectorModel,
    pub stager: StagerModel,
    pub fusion: FusionNet,
    pub training: FoldTraining,
}

/// Content hash of everything a fold's models depend on.
pub fn fold_hash(config: &PipelineConfig, plan: &FoldPlan, subjects: &[SubjectData]) -> Result<String> {
    let ids = |v: &[usize]| v.iter().map(|&i| subjects[i].hash.clone()).collect::<Vec<_>>();
    let key = serde_json::json!({
        "fold": plan.fold,
        "train": ids(&plan.train),
        "val": ids(&plan.val),
        "detector": config.detector,
        "detector_train": config.detector_train,
        "stager": config.stager,
        "stager_train": config.stager_train,
        "fusion_train": config.fusion_train,
        "omega": config.omega,
        "ahi_min_score": config.ahi_min_score,
        "seed": config.seed,
    });
    content_hash("fold", &key)
}

fn detector_samples<'a>(
    stacks: &'a [SpectrogramStack],
    idx: &[usize],
    subjects: &'a [SubjectData],
) -> Vec<DetectorSample<'a>> {
    stacks
        .iter()
        .zip(idx)
        .map(|(s, &i)| DetectorSample {
            stack: s,
            events: &subjects[i].events,
        })
        .collect()
}

fn fold_name(fold: usize) -> String {
    format!("fold-{fold}")
}

/// Radar detections for a normalised stack.
fn detect(model: &DetectorModel, stack: &SpectrogramStack, id: &str) -> Result<Vec<DetectedSegment>> {
    Ok(model.detect_events(stack).map_err(stage_err("detect", id))?.segments)
}

fn fuse(
    models: &FoldModels,
    radar: &[DetectedSegment],
    spo2: &SpO2Trace,
    omega: f64,
    id: &str,
) -> Result<Vec<FusedDetection>> {
    let c = &models.detector.config;
    soft_fuse(radar, spo2, &models.fusion, omega, c.score_threshold, c.nms_iou).map_err(stage_err("fuse", id))
}

fn fused_segments(f: &[FusedDetection]) -> Vec<DetectedSegment> {
    f.iter().map(|d| d.segment).collect()
}

fn truth_ahi(events: &[AnnotatedEvent], hypnogram: &Hypnogram) -> Result<AhiReport> {
    let segs: Vec<DetectedSegment> = events
        .iter()
        .map(|e| DetectedSegment {
            kind: e.kind,
            score: 1.0,
            t_start: e.t_start,
            t_end: e.t_end,
        })
        .collect();
    ahi_and_severity(&segs, hypnogram, 0.0)
}

/// Trains (or loads from cache) the detector, stager and fusion network of
/// one fold and calibrates ω and the AHI score threshold on its validation
/// subjects.
pub fn train_fold(config: &PipelineConfig, plan: &FoldPlan, subjects: &[SubjectData]) -> Result<FoldModels> {
    let cache = config.cache();
    let hash = fold_hash(config, plan, subjects)?;
    let name = fold_name(plan.fold);
    let dir = cache.entry("models", &name, &hash);
    let io = |e| stage_err("train", &name)(e);
    if cache.is_complete(&dir) {
        let load = || -> Result<FoldModels> {
            Ok(FoldModels {
                plan: plan.clone(),
                hash: hash.clone(),
                norm: serde_json::from_slice(&fs::read(dir.join("norm.json"))?)?,
                detector: DetectorModel::load(&dir, "detector")?,
                stager: StagerModel::load(&dir, "stager")?,
                fusion: FusionNet::load(&dir, "fusion")?,
                training: serde_json::from_slice(&fs::read(dir.join("fold.json"))?)?,
                dir: dir.clone(),
            })
        };
        return load().map_err(io);
    }
    log::info!("training {name}");
    let train_stacks: Vec<&SpectrogramStack> = plan.train.iter().map(|&i| &subjects[i].stack).collect();
    let norm = NormStats::fit(&train_stacks).map_err(io)?;
    let normed = |idx: &[usize]| idx.iter().map(|&i| norm.apply(&subjects[i].stack)).collect::<Vec<_>>();
    let train_n = normed(&plan.train);
    let val_n = normed(&plan.val);
    let mut training = FoldTraining::default();

    let mut rng = substream(config.fold_seed(plan.fold, 1), 0);
    let mut detector = DetectorModel::new(config.detector.clone(), &mut rng).map_err(io)?;
    let mut det_cfg = config.detector_train.clone();
    det_cfg.optim.seed = config.fold_seed(plan.fold, 2);
    let det_report = train_detector(
        &mut detector,
        &detector_samples(&train_n, &plan.train, subjects),
        &detector_samples(&val_n, &plan.val, subjects),
        &det_cfg,
    )
    .map_err(stage_err("train-detector", &name))?;
    training.detector_best_epoch = det_report.best_epoch;
    training.detector_val_ap = det_report.val_ap.clone();
    training.detector_diverged = det_report.diverged;

    // The stager has no model selection, so it also learns from the
    // validation nights.
    let stager_idx: Vec<usize> = plan.train.iter().chain(&plan.val).copied().collect();
    let stager_stacks: Vec<&SpectrogramStack> = train_n.iter().chain(&val_n).collect();
    let st_samples: Vec<StagerSample<'_>> = stager_stacks
        .iter()
        .zip(&stager_idx)
        .map(|(s, &i)| StagerSample {
            stack: s,
            hypnogram: &subjects[i].hypnogram.epochs,
        })
        .collect();
    let mut stager = StagerModel::new(config.stager.clone(), &mut rng).map_err(io)?;
    let mut st_cfg = config.stager_train.clone();
    st_cfg.seed = config.fold_seed(plan.fold, 3);
    let st_report = two_stage_train(&mut stager, &st_samples, &st_cfg).map_err(stage_err("train-stager", &name))?;
    training.stager_final_loss = st_report.stage2_loss.last().or(st_report.stage1_loss.last()).copied();
    training.stager_diverged = st_report.diverged;

    let fusion_subjects: Vec<FusionSubject<'_>> = plan
        .train
        .iter()
        .map(|&i| FusionSubject {
            trace: &subjects[i].spo2,
            events: &subjects[i].events,
            hypnogram: &subjects[i].hypnogram,
        })
        .collect();
    let dataset = build_fusion_dataset(&fusion_subjects, config.fold_seed(plan.fold, 4))
        .map_err(stage_err("fusion-dataset", &name))?;
    training.fusion_samples = dataset.len();
    training.fusion_with_replacement = dataset.with_replacement;
    let mut fusion = FusionNet::new(&mut rng);
    let mut fu_cfg = config.fusion_train.clone();
    fu_cfg.seed = config.fold_seed(plan.fold, 5);
    let fu_report = fusion.train(&dataset, &fu_cfg).map_err(stage_err("train-fusion", &name))?;
    training.fusion_final_loss = fu_report.loss.last().copied();

    let mut models = FoldModels {
        plan: plan.clone(),
        hash: hash.clone(),
        dir: dir.clone(),
        norm,
        detector,
        stager,
        fusion,
        training,
    };
    calibrate(config, &mut models, subjects, &val_n)?;

    let save = || -> Result<()> {
        cache.begin(&dir)?;
        models.detector.save(&dir, "detector")?;
        models.stager.save(&dir, "stager")?;
        models.fusion.save(&dir, "fusion")?;
        fs::write(dir.join("norm.json"), serde_json::to_vec_pretty(&models.norm)?)?;
        fs::write(dir.join("fold.json"), serde_json::to_vec_pretty(&models.training)?)?;
        cache.finish(&dir, &hash)
    };
    save().map_err(io)?;
    Ok(models)
}

/// Picks ω by validation AP@0.5 and the AHI score threshold by the smallest
/// total absolute AHI error on the validation subjects.
fn calibrate(
    config: &PipelineConfig,
    models: &mut FoldModels,
    subjects: &[SubjectData],
    val_n: &[SpectrogramStack],
) -> Result<()> {
    let plan = models.plan.clone();
    let radar = plan
        .val
        .iter()
        .zip(val_n)
        .map(|(&i, s)| detect(&models.detector, s, &subjects[i].id))
        .collect::<Result<Vec<_>>>()?;
    let fused_at = |w: f64| -> Result<Vec<Vec<FusedDetection>>> {
        plan.val
            .iter()
            .zip(&radar)
            .map(|(&i, r)| fuse(models, r, &subjects[i].spo2, w, &subjects[i].id))
            .collect()
    };
    let mut scan = Vec::new();
    let omega = match config.omega {
        Some(w) => w,
        None => {
            let (w, _) = tune_omega(&OMEGA_GRID, |w| {
                let fused = fused_at(w)?;
                let segs: Vec<Vec<DetectedSegment>> = fused.iter().map(|f| fused_segments(f)).collect();
                let inputs: Vec<ApInput<'_>> = segs
                    .iter()
                    .zip(&plan.val)
                    .map(|(d, &i)| ApInput {
                        detections: d,
                        truths: &subjects[i].events,
                    })
                    .collect();
                let ap = average_precision(&inputs, 0.5, None).unwrap_or(0.0);
                scan.push((w, ap));
                Ok(ap)
            })?;
            w
        }
    };
    let min_score = match config.ahi_min_score {
        Some(s) => s,
        None => {
            let fused = fused_at(omega)?;
            let mut cases = Vec::new();
            for ((&i, s), f) in plan.val.iter().zip(val_n).zip(&fused) {
                let id = &subjects[i].id;
                let hyp = models
                    .stager
                    .predict(s, Granularity::WRNN)
                    .map_err(stage_err("stage", id))?
                    .hypnogram;
                let truth = truth_ahi(&subjects[i].events, &subjects[i].hypnogram).map_err(stage_err("evaluate", id))?;
                cases.push((fused_segments(f), hyp, truth.ahi));
            }
            let mut best = (f64::INFINITY, 0.5);
            for &thr in &SCORE_GRID {
                let err: f64 = cases
                    .iter()
                    .map(|(d, h, t)| ahi_and_severity(d, h, thr).map_or(*t, |r| (r.ahi - t).abs()))
                    .sum();
                if err < best.0 {
                    best = (err, thr);
                }
            }
            best.1
        }
    };
    models.training.omega_scan = scan;
    models.training.omega = omega;
    models.training.ahi_min_score = min_score;
    Ok(())
}

/// Inference and per-subject scoring for one test subject.
pub fn evaluate_subject(models: &FoldModels, subject: &SubjectData) -> Result<SubjectResult> {
    let id = &subject.id;
    let stack = models.norm.apply(&subject.stack);
    let radar = detect(&models.detector, &stack, id)?;
    let fused = fuse(models, &radar, &subject.spo2, models.training.omega, id)?;
    let pred = models.stager.predict(&stack, Granularity::WRNN).map_err(stage_err("stage", id))?;
    let eval = stage_err("evaluate", id);
    let truth = truth_ahi(&subject.events, &subject.hypnogram).map_err(eval)?;
    let min = models.training.ahi_min_score;
    let est = ahi_and_severity(&fused_segments(&fused), &pred.hypnogram, min).ok();
    let radar_only = ahi_and_severity(&radar, &pred.hypnogram, min).ok();
    let n = pred.hypnogram.epochs.len().min(subject.hypnogram.epochs.len());
    let mut confusion = vec![vec![0usize; STAGES]; STAGES];
    for (t, p) in subject.hypnogram.epochs[..n].iter().zip(&pred.hypnogram.epochs[..n]) {
        confusion[t.index()][p.index()] += 1;
    }
    Ok(SubjectResult {
        id: id.clone(),
        fold: models.plan.fold,
        duration: subject.stack.duration(),
        true_ahi: truth,
        est_ahi: est,
        radar_only_ahi: radar_only,
        odi3: odi3(&subject.spo2, pred.tst_hours).ok(),
        true_tst: subject.hypnogram.tst_hours(),
        est_tst: pred.tst_hours,
        staging_confusion: confusion,
        radar,
        fused,
        truth: subject.events.clone(),
    })
}

/// Trains (or loads) every fold's models. Folds are independent given their
/// derived seeds, so they run on scoped threads and are joined in fold order.
pub fn train_folds(config: &PipelineConfig, plans: &[FoldPlan], subjects: &[SubjectData]) -> Result<Vec<FoldModels>> {
    in_parallel(plans, |plan| train_fold(config, plan, subjects))
}

fn in_parallel<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    std::thread::scope(|scope| {
        let f = &f;
        let handles: Vec<_> = items.iter().map(|item| scope.spawn(move || f(item))).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
            .collect()
    })
}

/// Radar-only detections for one subject.
pub fn radar_detections(models: &FoldModels, subject: &SubjectData) -> Result<Vec<DetectedSegment>> {
    detect(&models.detector, &models.norm.apply(&subject.stack), &subject.id)
}

/// Detections after soft fusion with the fold's calibrated ω.
pub fn fused_detections(models: &FoldModels, subject: &SubjectData) -> Result<Vec<FusedDetection>> {
    let radar = radar_detections(models, subject)?;
    fuse(models, &radar, &subject.spo2, models.training.omega, &subject.id)
}

/// Five-stage hypnogram predicted for one subject.
pub fn predicted_hypnogram(models: &FoldModels, subject: &SubjectData) -> Result<StagePrediction> {
    models
        .stager
        .predict(&models.norm.apply(&subject.stack), Granularity::WRNN)
        .map_err(stage_err("stage", &subject.id))
}

/// Full run: prepare every subject, train each fold, evaluate its test
/// subjects, assemble the report. Completed subjects and fold models are
/// cached under `out_dir/cache`, so a failed run keeps its finished work.
pub fn run_pipeline(config: &PipelineConfig) -> Result<RunReport> {
    config.validate()?;
    let subjects = prepare_subjects(config)?;
    let plans = fold_plans(subjects.len(), config.folds)?;
    let models = train_folds(config, &plans, &subjects)?;
    let per_fold = in_parallel(&models, |m| {
        in_parallel(&m.plan.test, |&i| evaluate_subject(m, &subjects[i]))
    })?;
    let mut folds = Vec::new();
    let mut results = Vec::new();
    for (m, r) in models.into_iter().zip(per_fold) {
        folds.push((m, r.len()));
        results.extend(r);
    }
    report::assemble(config, &folds, results)
}

/// One row of an ω sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OmegaRow {
    pub omega: f64,
    /// AP@0.5 over every test subject, `None` without reference events.
    pub ap: Option<f64>,
}

/// Pooled test AP@0.5 for each fusion weight, reusing cached fold models.
/// Row ω = 0 equals the radar-only AP.
pub fn sweep_omega(config: &PipelineConfig, omegas: &[f64]) -> Result<(Option<f64>, Vec<OmegaRow>)> {
    config.validate()?;
    let subjects = prepare_subjects(config)?;
    let plans = fold_plans(subjects.len(), config.folds)?;
    let models = train_folds(config, &plans, &subjects)?;
    let mut cases: Vec<(usize, usize, Vec<DetectedSegment>)> = Vec::new();
    for (k, m) in models.iter().enumerate() {
        for &i in &m.plan.test {
            cases.push((k, i, radar_detections(m, &subjects[i])?));
        }
    }
    let ap_of = |dets: &[Vec<DetectedSegment>]| {
        let inputs: Vec<ApInput<'_>> = dets
            .iter()
            .zip(&cases)
            .map(|(d, (_, i, _))| ApInput {
                detections: d,
                truths: &subjects[*i].events,
            })
            .collect();
        average_precision(&inputs, 0.5, None)
    };
    let radar: Vec<Vec<DetectedSegment>> = cases.iter().map(|c| c.2.clone()).collect();
    let radar_ap = ap_of(&radar);
    let rows = omegas
        .iter()
        .map(|&w| {
            let fused = cases
                .iter()
                .map(|(m, i, r)| fuse(&models[*m], r, &subjects[*i].spo2, w, &subjects[*i].id).map(|f| fused_segments(&f)))
                .collect::<Result<Vec<_>>>()?;
            Ok(OmegaRow {
                omega: w,
                ap: ap_of(&fused),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((radar_ap, rows))
}
