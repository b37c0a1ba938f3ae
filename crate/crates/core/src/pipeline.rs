//! Config-driven stages: generate → pseudolabel → train → evaluate.
//!
//! Each stage writes under `output_dir` and records the configuration it
//! ran with in a `stage.json`. A later call with an identical upstream
//! configuration reuses the outputs unless `force` is set. Nothing written
//! depends on wall-clock time or thread count, so reruns are byte-identical.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{
    auc, bootstrap_pvalue, bootstrap_pvalue_pooled, dsc_per_subject, dsc_pooled, pool_voxels, roc_curve,
    roc_point_single, BootstrapStatistic, EvalReport, Overlap, PerClass, RocPoint, Selector, SubjectScores, TableRow,
};
use crate::nifti::{read_labelmap, read_nifti, write_labelmap, write_nifti};
use crate::nn::checkpoint::{load_checkpoint, save_checkpoint};
use crate::nn::train::{log_from_csv, log_to_csv, EpochLog, SliceDataset, TrainConfig, Trainer};
use crate::nn::unet::{UNet, UNetConfig};
use crate::nn::{predict_volume, segment_binary};
use crate::phantom::{generate_cohort, Manifest, PhantomSpec, Split, MANIFEST_FILE};
use crate::preprocess::{preprocess_channels, BrainMask};
use crate::rng::substream;
use crate::volume::{LabelMap, Volume, BACKGROUND};
use crate::watershed::{pseudo_label_preprocessed, SeedSet, WatershedConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig { n_train: 30, n_val: 5, n_test: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub threshold: f64,
    pub n_thresholds: usize,
    pub n_bootstraps: usize,
    pub bootstrap_statistic: BootstrapStatistic,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold: 0.5,
            n_thresholds: 200,
            n_bootstraps: 1000,
            bootstrap_statistic: BootstrapStatistic::MeanDsc,
            seed: 0,
        }
    }
}

/// Everything one run needs. The defaults are the desk-scale headline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub phantom: PhantomSpec,
    pub cohort: CohortConfig,
    pub watershed: WatershedConfig,
    pub unet: UNetConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("segnl-run"),
            phantom: headline_phantom(),
            cohort: CohortConfig::default(),
            watershed: headline_watershed(),
            unet: UNetConfig::default(),
            train: headline_train(),
            eval: EvalConfig::default(),
        }
    }
}

/// Phantom grid for the headline run: 48×48 slices keep a full-depth U-net
/// trainable on a desktop CPU within the time budget.
pub fn headline_phantom() -> PhantomSpec {
    PhantomSpec {
        dims: [48, 48, 24],
        brain_semi_axes: [20.0, 22.0, 10.0],
        ventricle_offset_x: 6.5,
        ventricle_offset_yz: [-1.5, 0.0],
        ventricle_semi_axes: [4.0, 10.0, 4.0],
        center_jitter_std: 0.8,
        axis_jitter_std: 0.6,
        ..PhantomSpec::default()
    }
}

/// Watershed noise calibrated on the headline phantom to a cohort DSC of
/// about 0.76, mostly under-segmentation with rare leaks.
pub fn headline_watershed() -> WatershedConfig {
    WatershedConfig {
        smoothing_sigma: 0.5,
        stop_quantile: 0.045,
        seed_jitter_std: 1.0,
        barrier_noise_std: 0.15,
        ..WatershedConfig::default()
    }
}

pub fn headline_train() -> TrainConfig {
    TrainConfig { epochs: 10, lr_drop_epoch: 9, batch_size: 1, ..TrainConfig::default() }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.watershed.validate()?;
        self.unet.validate()?;
        self.train.validate()?;
        let c = &self.cohort;
        if c.n_train == 0 || c.n_val == 0 || c.n_test < 2 {
            return Err(Error::Config("need at least one training and validation subject and two test subjects".into()));
        }
        if self.unet.in_channels != 2 || self.unet.out_classes != 3 {
            return Err(Error::Config("the pipeline feeds two channels and expects three classes".into()));
        }
        let e = &self.eval;
        if !(0.0..1.0).contains(&e.threshold) || e.n_thresholds < 2 || e.n_bootstraps == 0 {
            return Err(Error::Config("threshold in [0,1), >= 2 ROC thresholds, >= 1 bootstrap required".into()));
        }
        Ok(())
    }

    pub fn cohort_dir(&self) -> PathBuf {
        self.output_dir.join("cohort")
    }

    pub fn pseudo_dir(&self) -> PathBuf {
        self.output_dir.join("pseudolabels")
    }

    pub fn model_dir(&self) -> PathBuf {
        self.output_dir.join("model")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.output_dir.join("evaluation")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    Cached,
}

const STAGE_FILE: &str = "stage.json";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

fn stage_is_current(dir: &Path, fingerprint: &serde_json::Value) -> bool {
    read_json::<serde_json::Value>(&dir.join(STAGE_FILE)).is_ok_and(|v| &v == fingerprint)
}

/// Clears `dir` and recreates it empty.
fn fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn cohort_fingerprint(cfg: &RunConfig) -> Result<serde_json::Value> {
    Ok(serde_json::json!({ "phantom": cfg.phantom, "cohort": cfg.cohort }))
}

fn pseudo_fingerprint(cfg: &RunConfig) -> Result<serde_json::Value> {
    Ok(serde_json::json!({ "upstream": cohort_fingerprint(cfg)?, "watershed": cfg.watershed }))
}

/// Leaves out the epoch count: the first `k` epochs of any run are the
/// same, so a longer run can resume a shorter one.
fn train_fingerprint(cfg: &RunConfig) -> Result<serde_json::Value> {
    let mut train = serde_json::to_value(&cfg.train)?;
    if let Some(obj) = train.as_object_mut() {
        obj.remove("epochs");
    }
    Ok(serde_json::json!({ "upstream": pseudo_fingerprint(cfg)?, "unet": cfg.unet, "train": train }))
}

fn eval_fingerprint(cfg: &RunConfig) -> Result<serde_json::Value> {
    Ok(serde_json::json!({ "upstream": train_fingerprint(cfg)?, "epochs": cfg.train.epochs, "eval": cfg.eval }))
}

/// Writes the phantom cohort and its manifest.
pub fn generate(cfg: &RunConfig, force: bool) -> Result<StageOutcome> {
    cfg.validate()?;
    let dir = cfg.cohort_dir();
    let fp = cohort_fingerprint(cfg)?;
    if !force && stage_is_current(&dir, &fp) {
        info!("generate: cached in {}", dir.display());
        return Ok(StageOutcome::Cached);
    }
    fresh_dir(&dir)?;
    let c = &cfg.cohort;
    generate_cohort(&cfg.phantom, c.n_train, c.n_val, c.n_test, &dir)?;
    write_json(&dir.join(STAGE_FILE), &fp)?;
    info!("generate: {} subjects in {}", c.n_train + c.n_val + c.n_test, dir.display());
    Ok(StageOutcome::Ran)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelStatus {
    Ok,
    Failed,
}

/// Per-subject pseudo-label bookkeeping, relative paths under the stage dir.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudoRecord {
    pub id: String,
    pub split: Split,
    pub status: LabelStatus,
    pub reason: Option<String>,
    pub seeds: Option<SeedSet>,
    pub divisor_channel1: Option<f32>,
    pub divisor_channel2: Option<f32>,
    pub dsc_vs_truth: Option<f64>,
    /// `(pseudo − truth) / truth` foreground volume.
    pub volume_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudoSummary {
    pub subjects: usize,
    pub failed: Vec<String>,
    /// Mean DSC vs truth over subjects that did not fail.
    pub mean_dsc: f64,
    pub mean_volume_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudoManifest {
    pub records: Vec<PseudoRecord>,
    pub summary: PseudoSummary,
}

pub const PSEUDO_MANIFEST: &str = "pseudolabels.json";

fn subject_dir(stage: &Path, id: &str) -> PathBuf {
    stage.join("subjects").join(id)
}

/// Preprocesses every subject and runs the watershed on it. Failures are
/// recorded, not raised; failed subjects are left out of training and
/// evaluation.
pub fn pseudolabel(cfg: &RunConfig, force: bool) -> Result<StageOutcome> {
    cfg.validate()?;
    let dir = cfg.pseudo_dir();
    let fp = pseudo_fingerprint(cfg)?;
    if !force && stage_is_current(&dir, &fp) {
        info!("pseudolabel: cached in {}", dir.display());
        return Ok(StageOutcome::Cached);
    }
    let cohort = cfg.cohort_dir();
    let manifest = Manifest::load(cohort.join(MANIFEST_FILE))
        .map_err(|e| Error::Precondition(format!("cohort missing, run generate first: {e}")))?;
    fresh_dir(&dir)?;
    let records: Vec<PseudoRecord> = manifest
        .subjects
        .par_iter()
        .map(|entry| -> Result<PseudoRecord> {
            let subject = manifest.load_subject(&cohort, entry)?;
            let mut rec = PseudoRecord {
                id: entry.id.clone(),
                split: entry.split,
                status: LabelStatus::Failed,
                reason: None,
                seeds: None,
                divisor_channel1: None,
                divisor_channel2: None,
                dsc_vs_truth: None,
                volume_error: None,
            };
            let pre = match preprocess_channels(&subject.channel1, &subject.channel2) {
                Ok(p) => p,
                Err(e) => {
                    rec.reason = Some(e.to_string());
                    return Ok(rec);
                }
            };
            let sd = subject_dir(&dir, &entry.id);
            fs::create_dir_all(&sd)?;
            write_nifti(&pre.channel1, sd.join("channel1.nii"))?;
            write_nifti(&pre.channel2, sd.join("channel2.nii"))?;
            write_nifti(&pre.mask.to_volume(subject.channel1.spacing)?, sd.join("mask.nii"))?;
            rec.divisor_channel1 = Some(pre.norm1.divisor);
            rec.divisor_channel2 = Some(pre.norm2.divisor);
            match pseudo_label_preprocessed(&pre, Some(&subject.truth), &cfg.watershed, entry.index) {
                Ok(p) => {
                    write_labelmap(&p.labels, sd.join("pseudolabel.nii"))?;
                    let fg = |l: &LabelMap| l.data.iter().filter(|&&v| v != BACKGROUND).count() as f64;
                    rec.seeds = Some(p.seeds);
                    rec.dsc_vs_truth = Some(p.dsc_vs_truth);
                    rec.volume_error = Some((fg(&p.labels) - fg(&subject.truth)) / fg(&subject.truth).max(1.0));
                    match p.failure {
                        Some(reason) => rec.reason = Some(reason),
                        None => rec.status = LabelStatus::Ok,
                    }
                }
                Err(e) => rec.reason = Some(e.to_string()),
            }
            Ok(rec)
        })
        .collect::<Result<_>>()?;

    let ok: Vec<&PseudoRecord> = records.iter().filter(|r| r.status == LabelStatus::Ok).collect();
    let mean = |f: &dyn Fn(&PseudoRecord) -> f64| ok.iter().map(|r| f(r)).sum::<f64>() / ok.len().max(1) as f64;
    let summary = PseudoSummary {
        subjects: records.len(),
        failed: records.iter().filter(|r| r.status == LabelStatus::Failed).map(|r| r.id.clone()).collect(),
        mean_dsc: mean(&|r| r.dsc_vs_truth.unwrap_or(0.0)),
        mean_volume_error: mean(&|r| r.volume_error.unwrap_or(0.0)),
    };
    info!(
        "pseudolabel: mean DSC vs truth {:.3}, mean volume error {:+.3}, {} failed",
        summary.mean_dsc,
        summary.mean_volume_error,
        summary.failed.len()
    );
    write_json(&dir.join(PSEUDO_MANIFEST), &PseudoManifest { records, summary })?;
    write_json(&dir.join(STAGE_FILE), &fp)?;
    Ok(StageOutcome::Ran)
}

fn load_pseudo_manifest(cfg: &RunConfig) -> Result<PseudoManifest> {
    read_json(&cfg.pseudo_dir().join(PSEUDO_MANIFEST))
        .map_err(|e| Error::Precondition(format!("pseudo-labels missing, run pseudolabel first: {e}")))
}

fn slice_dataset(cfg: &RunConfig, records: &[&PseudoRecord]) -> Result<SliceDataset> {
    let m = cfg.unet.size_multiple();
    let [nx, ny, _] = cfg.phantom.dims;
    let mut data = SliceDataset::new(2, ny.div_ceil(m) * m, nx.div_ceil(m) * m);
    let dir = cfg.pseudo_dir();
    for r in records {
        let sd = subject_dir(&dir, &r.id);
        let c1 = read_nifti(sd.join("channel1.nii"))?;
        let c2 = read_nifti(sd.join("channel2.nii"))?;
        let labels = read_labelmap(sd.join("pseudolabel.nii"))?;
        data.push_volume(&[&c1, &c2], &labels)?;
    }
    Ok(data)
}

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const OPTIMIZER_STATE: &str = "optimizer.bin";
pub const TRAIN_LOG: &str = "train_log.csv";

/// Trains on pseudo-labels of non-failed training subjects. With `resume`,
/// continues from the last completed epoch of a matching earlier run.
pub fn train(cfg: &RunConfig, force: bool, resume: bool) -> Result<StageOutcome> {
    cfg.validate()?;
    let dir = cfg.model_dir();
    let fp = train_fingerprint(cfg)?;
    let current = stage_is_current(&dir, &fp);
    let done = current && dir.join(BEST_CHECKPOINT).exists() && {
        let log = fs::read_to_string(dir.join(TRAIN_LOG)).ok().and_then(|t| log_from_csv(&t).ok());
        log.is_some_and(|l| l.len() == cfg.train.epochs as usize)
    };
    if !force && done {
        info!("train: cached in {}", dir.display());
        return Ok(StageOutcome::Cached);
    }

    let manifest = load_pseudo_manifest(cfg)?;
    let pick = |split: Split| -> Vec<&PseudoRecord> {
        manifest.records.iter().filter(|r| r.split == split && r.status == LabelStatus::Ok).collect()
    };
    let train_set = slice_dataset(cfg, &pick(Split::Train))?;
    let val_set = slice_dataset(cfg, &pick(Split::Val))?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Training("no usable training or validation subjects after pseudo-labeling".into()));
    }

    let last = dir.join(LAST_CHECKPOINT);
    let partial = match resume && !force && current && last.exists() {
        true => Some(load_checkpoint(&last)?).filter(|m| m.epoch <= cfg.train.epochs),
        false => None,
    };
    let mut trainer = if let Some(model) = partial {
        let best = load_checkpoint(&dir.join(BEST_CHECKPOINT))?;
        let log = log_from_csv(&fs::read_to_string(dir.join(TRAIN_LOG))?)?;
        let opt = fs::read(dir.join(OPTIMIZER_STATE))?;
        info!("train: resuming after epoch {}", model.epoch);
        Trainer::resume(model, best, log, &opt)?
    } else {
        fresh_dir(&dir)?;
        write_json(&dir.join(STAGE_FILE), &fp)?;
        let model = UNet::<f32>::new(&cfg.unet, &mut substream(cfg.train.seed, "init", 0))?;
        Trainer::new(model)
    };
    info!("train: {} training and {} validation slices", train_set.len(), val_set.len());
    trainer.run(&train_set, &val_set, &cfg.train, |row: &EpochLog, t: &Trainer| {
        info!(
            "train: epoch {:>3}  train loss {:.5}  val loss {:.5}  lr {:e}",
            row.epoch, row.train_loss, row.val_loss, row.lr
        );
        save_checkpoint(&t.model, &dir.join(LAST_CHECKPOINT))?;
        save_checkpoint(&t.best, &dir.join(BEST_CHECKPOINT))?;
        fs::write(dir.join(OPTIMIZER_STATE), t.encode_optimizer())?;
        fs::write(dir.join(TRAIN_LOG), log_to_csv(&t.log))?;
        Ok(())
    })?;
    Ok(StageOutcome::Ran)
}

pub const REPORT_FILE: &str = "report.json";
pub const ROC_CSV: &str = "roc.csv";
pub const ROC_SVG: &str = "roc.svg";
pub const TABLE_FILE: &str = "table.txt";

/// Scores the best checkpoint and the watershed on the test split against
/// the phantom truth.
pub fn evaluate(cfg: &RunConfig, force: bool) -> Result<EvalReport> {
    cfg.validate()?;
    let dir = cfg.eval_dir();
    let fp = eval_fingerprint(cfg)?;
    if !force && stage_is_current(&dir, &fp) {
        if let Ok(report) = read_json::<EvalReport>(&dir.join(REPORT_FILE)) {
            info!("evaluate: cached in {}", dir.display());
            return Ok(report);
        }
    }
    let mut model = load_checkpoint(&cfg.model_dir().join(BEST_CHECKPOINT))
        .map_err(|e| Error::Precondition(format!("no trained model, run train first: {e}")))?;
    let manifest = load_pseudo_manifest(cfg)?;
    let cohort = Manifest::load(cfg.cohort_dir().join(MANIFEST_FILE))?;
    fresh_dir(&dir)?;

    let test: Vec<&PseudoRecord> = manifest.records.iter().filter(|r| r.split == Split::Test).collect();
    let excluded: Vec<String> = test.iter().filter(|r| r.status == LabelStatus::Failed).map(|r| r.id.clone()).collect();
    let used: Vec<&PseudoRecord> = test.into_iter().filter(|r| r.status == LabelStatus::Ok).collect();
    if used.len() < 2 {
        return Err(Error::Precondition(format!("only {} usable test subjects; need 2", used.len())));
    }

    let pdir = cfg.pseudo_dir();
    let mut truths = Vec::new();
    let mut watershed = Vec::new();
    let mut network = Vec::new();
    let mut probs: Vec<[Volume; 3]> = Vec::new();
    let mut masks = Vec::new();
    for r in &used {
        let entry = cohort.subjects.iter().find(|e| e.id == r.id).ok_or_else(|| Error::Format(format!("{} not in cohort", r.id)))?;
        let sd = subject_dir(&pdir, &r.id);
        let c1 = read_nifti(sd.join("channel1.nii"))?;
        let c2 = read_nifti(sd.join("channel2.nii"))?;
        let p: [Volume; 3] = predict_volume(&mut model, &[&c1, &c2])?
            .try_into()
            .map_err(|_| Error::Shape("expected three class volumes".into()))?;
        let seg = segment_binary(&p, cfg.eval.threshold)?;
        let od = dir.join("subjects").join(&r.id);
        fs::create_dir_all(&od)?;
        for (vol, name) in p.iter().zip(["prob_background", "prob_left", "prob_right"]) {
            write_nifti(vol, od.join(format!("{name}.nii")))?;
        }
        write_labelmap(&seg, od.join("segmentation.nii"))?;
        truths.push(read_labelmap(cohort_dir_join(cfg, &entry.paths.truth))?);
        watershed.push(read_labelmap(sd.join("pseudolabel.nii"))?);
        network.push(seg);
        probs.push(p);
        masks.push(BrainMask::from_volume(&read_nifti(sd.join("mask.nii"))?));
    }

    let subjects: Vec<SubjectScores> = used
        .iter()
        .enumerate()
        .map(|(i, r)| {
            Ok(SubjectScores {
                id: r.id.clone(),
                watershed: PerClass::from_fn(|s| dsc_per_subject(&truths[i], &watershed[i], s))?,
                network: PerClass::from_fn(|s| dsc_per_subject(&truths[i], &network[i], s))?,
            })
        })
        .collect::<Result<_>>()?;
    let dsc_watershed = PerClass::from_fn(|s| dsc_pooled(&truths, &watershed, s))?;
    let dsc_network = PerClass::from_fn(|s| dsc_pooled(&truths, &network, s))?;
    let mut roc_both = Vec::new();
    let auc_network = PerClass::from_fn(|s| {
        let curve = roc_curve(&pool_voxels(&probs, &truths, &masks, s)?, cfg.eval.n_thresholds)?;
        let a = auc(&curve)?;
        if s == Selector::Both {
            roc_both = curve;
        }
        Ok(a)
    })?;
    let (fpr, tpr) = roc_point_single(&watershed, &truths, &masks, Selector::Both)?;
    let (nb, seed) = (cfg.eval.n_bootstraps, cfg.eval.seed);
    let p_value = PerClass::from_fn(|s| match cfg.eval.bootstrap_statistic {
        BootstrapStatistic::MeanDsc => {
            let a: Vec<f64> = subjects.iter().map(|x| x.network.get(s)).collect();
            let b: Vec<f64> = subjects.iter().map(|x| x.watershed.get(s)).collect();
            bootstrap_pvalue(&a, &b, nb, seed)
        }
        BootstrapStatistic::PooledDsc => {
            let overlaps = |preds: &[LabelMap]| -> Result<Vec<Overlap>> {
                truths.iter().zip(preds).map(|(t, p)| Overlap::of(t, p, s)).collect()
            };
            bootstrap_pvalue_pooled(&overlaps(&network)?, &overlaps(&watershed)?, nb, seed)
        }
    })?;
    let report = EvalReport {
        subjects,
        excluded,
        dsc_watershed,
        dsc_network,
        auc_network,
        roc_network: roc_both,
        roc_watershed: [fpr, tpr],
        p_value,
        n_bootstraps: cfg.eval.n_bootstraps,
        table: vec![
            TableRow { name: "DSC (region growing)".into(), values: dsc_watershed },
            TableRow { name: "DSC (network)".into(), values: dsc_network },
            TableRow { name: "AUC (network)".into(), values: auc_network },
        ],
    };
    report.validate()?;
    write_json(&dir.join(REPORT_FILE), &report)?;
    fs::write(dir.join(ROC_CSV), roc_csv(&report.roc_network))?;
    fs::write(dir.join(ROC_SVG), roc_svg(&report.roc_network, report.roc_watershed))?;
    fs::write(dir.join(TABLE_FILE), report.format_table())?;
    write_json(&dir.join(STAGE_FILE), &fp)?;
    info!("evaluate:\n{}", report.format_table());
    Ok(report)
}

fn cohort_dir_join(cfg: &RunConfig, rel: &Path) -> PathBuf {
    cfg.cohort_dir().join(rel)
}

/// All four stages in order.
pub fn experiment(cfg: &RunConfig, force: bool) -> Result<EvalReport> {
    generate(cfg, force)?;
    pseudolabel(cfg, force)?;
    train(cfg, force, false)?;
    evaluate(cfg, force)
}

/// The comparison behind the CLI's exit status: the network's pooled DSC
/// over both ventricles must beat the watershed's.
pub fn network_beats_watershed(report: &EvalReport) -> bool {
    report.dsc_network.both > report.dsc_watershed.both
}

pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut s = String::from("threshold,fpr,tpr\n");
    for p in points {
        s.push_str(&format!("{},{},{}\n", p.threshold, p.fpr, p.tpr));
    }
    s
}

/// ROC curve as one polyline plus the watershed operating point as a circle.
pub fn roc_svg(points: &[RocPoint], single: [f64; 2]) -> String {
    const SIZE: f64 = 400.0;
    const PAD: f64 = 40.0;
    let px = |fpr: f64| PAD + fpr * SIZE;
    let py = |tpr: f64| PAD + (1.0 - tpr) * SIZE;
    let coords: Vec<String> = points.iter().map(|p| format!("{:.2},{:.2}", px(p.fpr), py(p.tpr))).collect();
    let total = SIZE + 2.0 * PAD;
    format!(
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{total}" height="{total}" viewBox="0 0 {total} {total}">
<rect x="{PAD}" y="{PAD}" width="{SIZE}" height="{SIZE}" fill="none" stroke="#888"/>
<text x="{cx}" y="{ty}" font-size="12" text-anchor="middle">false positive rate</text>
<text x="12" y="{cx}" font-size="12" text-anchor="middle" transform="rotate(-90 12 {cx})">true positive rate</text>
<polyline fill="none" stroke="#1f4e9c" stroke-width="2" points="{pts}"/>
<circle cx="{sx:.2}" cy="{sy:.2}" r="5" fill="#c0392b"/>
</svg>
"##,
        cx = PAD + SIZE / 2.0,
        ty = total - 8.0,
        pts = coords.join(" "),
        sx = px(single[0]),
        sy = py(single[1]),
    )
}
