//! Pipeline commands driven by one JSON run configuration.
//!
//! Every command validates the configuration and its inputs before creating
//! anything under the output directory, then echoes the effective
//! configuration there as `run_config.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cropnet::{load_checkpoint, save_checkpoint, CropNetConfig};
use crate::detect_eval::{
    detect, froc, load_detections_csv, mean_afp_at, run_cv, save_detections_csv, save_froc_csv, save_mean_curve_csv, CvConfig,
    CvOutcome, DatasetResult, FrocPoint, PatientResult, NMS_RADIUS_MM,
};
use crate::error::{Error, Result};
use crate::phantom::{generate_cohort, read_cohort, write_cohort, PhantomConfig, PhantomPatient};
use crate::rng;
use crate::scalespace::{default_grid, tune_parameters, ScaleSpaceParams, TuneOutcome};
use crate::trainer::{save_log_csv, train, DatasetView, TrainConfig};
use crate::volume::{load_volume, resample_isotropic, Mask3, Volume3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub n_patients: usize,
    pub phantom: PhantomConfig,
    pub theta: f64,
    pub grid: Vec<ScaleSpaceParams>,
    pub network: CropNetConfig,
    pub train: TrainConfig,
    pub k: usize,
    pub nms_radius_mm: f64,
    /// Cohort directory read by `tune`, `train`, `cv` and `froc`.
    pub cohort: Option<PathBuf>,
    /// Patients used by `tune` and `train`; all when absent.
    pub patients: Option<Vec<String>>,
    /// Candidate-selection parameters file written by `tune`.
    pub scale_space: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub volume: Option<PathBuf>,
    /// Directory of `<patient>/<dataset>.csv` detection dumps.
    pub detections: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_patients: 30,
            phantom: PhantomConfig::default(),
            theta: 0.95,
            grid: default_grid(),
            network: CropNetConfig::default(),
            train: TrainConfig::default(),
            k: 5,
            nms_radius_mm: NMS_RADIUS_MM,
            cohort: None,
            patients: None,
            scale_space: None,
            checkpoint: None,
            volume: None,
            detections: None,
            out: PathBuf::from("out"),
        }
    }
}

fn within(section: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Config { field, detail } => Error::Config { field: format!("{section}.{field}"), detail },
        other => Error::config(section, other.to_string()),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))
    }

    /// Checks every nested section; errors name the offending field path.
    pub fn validate(&self) -> Result<()> {
        self.phantom.validate().map_err(within("phantom"))?;
        if self.n_patients == 0 {
            return Err(Error::config("n_patients", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::config("theta", format!("{} outside [0, 1]", self.theta)));
        }
        if self.grid.is_empty() {
            return Err(Error::config("grid", "empty"));
        }
        for (i, p) in self.grid.iter().enumerate() {
            p.validate().map_err(|e| Error::config(format!("grid[{i}]"), e.to_string()))?;
        }
        self.network.validate().map_err(within("network"))?;
        self.train.validate(&self.network).map_err(within("train"))?;
        if self.k < 2 {
            return Err(Error::config("k", "need at least 2 folds"));
        }
        if !(self.nms_radius_mm >= 0.0 && self.nms_radius_mm.is_finite()) {
            return Err(Error::config("nms_radius_mm", "must be finite and >= 0"));
        }
        if self.out.as_os_str().is_empty() {
            return Err(Error::config("out", "empty path"));
        }
        Ok(())
    }

    fn cv_config(&self) -> CvConfig {
        CvConfig {
            k: self.k,
            theta: self.theta,
            grid: self.grid.clone(),
            network: self.network,
            train: self.train.clone(),
            nms_radius_mm: self.nms_radius_mm,
            seed: self.seed,
        }
    }
}

/// Process exit status for an error: 2 validation, 3 infeasible constraint,
/// 4 input/output.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::MissingFile(_)
        | Error::IoFailure { .. }
        | Error::Malformed { .. }
        | Error::HeaderMismatch { .. }
        | Error::UnsupportedDtype { .. } => 4,
        Error::Infeasible { .. } | Error::SensitivityUnreachable { .. } => 3,
        _ => 2,
    }
}

fn required<'a>(p: &'a Option<PathBuf>, field: &str) -> Result<&'a Path> {
    let p = p.as_deref().ok_or_else(|| Error::config(field, "required by this command"))?;
    if !p.exists() {
        return Err(Error::MissingFile(p.to_path_buf()));
    }
    Ok(p)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable value");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Malformed { path: path.into(), detail: e.to_string() })
}

/// Creates the output directory and echoes the configuration into it.
fn open_output(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    write_json(&cfg.out.join("run_config.json"), cfg)?;
    Ok(&cfg.out)
}

fn selected<'a>(cohort: &'a [PhantomPatient], names: &Option<Vec<String>>) -> Result<Vec<&'a PhantomPatient>> {
    match names {
        None => Ok(cohort.iter().collect()),
        Some(names) => names
            .iter()
            .map(|n| {
                cohort
                    .iter()
                    .find(|p| &p.patient_id == n)
                    .ok_or_else(|| Error::config("patients", format!("unknown patient `{n}`")))
            })
            .collect(),
    }
}

fn views<'a>(patients: &[&'a PhantomPatient]) -> Vec<DatasetView<'a>> {
    patients
        .iter()
        .flat_map(|p| {
            p.datasets.iter().map(move |d| DatasetView {
                patient_id: &p.patient_id,
                volume: &d.volume,
                mask: &d.mask,
                lesions: &d.lesions,
            })
        })
        .collect()
}

/// Generates a cohort of `n_patients` and writes it to the output directory.
pub fn cmd_phantom(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let cohort = generate_cohort(cfg.n_patients, &cfg.phantom, &mut rng::seeded(cfg.seed))?;
    let out = open_output(cfg)?;
    write_cohort(out, &cohort, &cfg.phantom, cfg.seed)
}

/// Tunes the candidate-selection parameters on the selected patients and
/// writes `scale_space.json` plus the full `tune_report.json`.
pub fn cmd_tune(cfg: &RunConfig) -> Result<TuneOutcome> {
    cfg.validate()?;
    let cohort = read_cohort(required(&cfg.cohort, "cohort")?)?;
    let patients = selected(&cohort, &cfg.patients)?;
    let data = views(&patients);
    let pairs: Vec<(&Volume3, &Mask3)> = data.iter().map(|d| (d.volume, d.mask)).collect();
    let outcome = tune_parameters(&pairs, cfg.theta, &cfg.grid)?;
    let out = open_output(cfg)?;
    write_json(&out.join("scale_space.json"), &outcome.params)?;
    write_json(&out.join("tune_report.json"), &outcome)?;
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub best_iteration: usize,
    pub train_patients: Vec<String>,
    pub val_patients: Vec<String>,
    pub excluded_datasets: usize,
    pub synthetic_positives: usize,
}

/// Trains one network and writes `checkpoint.json` (+ payload),
/// `train_log.csv` and `train_summary.json`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let cohort = read_cohort(required(&cfg.cohort, "cohort")?)?;
    let ss: ScaleSpaceParams = read_json(required(&cfg.scale_space, "scale_space")?)?;
    ss.validate()?;
    let patients = selected(&cohort, &cfg.patients)?;
    let tcfg = TrainConfig { seed: cfg.seed, ..cfg.train.clone() };
    let outcome = train(&views(&patients), &ss, &cfg.network, &tcfg)?;
    let out = open_output(cfg)?;
    save_checkpoint(&out.join("checkpoint.json"), &outcome.params, outcome.best_iteration as u64, &outcome.train_losses())?;
    save_log_csv(&outcome.log, &out.join("train_log.csv"))?;
    let summary = TrainSummary {
        best_iteration: outcome.best_iteration,
        train_patients: outcome.train_patients,
        val_patients: outcome.val_patients,
        excluded_datasets: outcome.excluded.len(),
        synthetic_positives: outcome.synthetic_positives,
    };
    write_json(&out.join("train_summary.json"), &summary)?;
    Ok(summary)
}

/// Sensitivities reported in the cross-validation summary.
pub fn summary_sensitivities() -> Vec<f64> {
    (85..=90).map(|i| i as f64 / 100.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub sensitivity: f64,
    pub afp_mean: Option<f64>,
    pub baseline_afp_mean: Option<f64>,
}

pub fn summary_rows(cv: &CvOutcome) -> Vec<SummaryRow> {
    summary_sensitivities()
        .into_iter()
        .map(|s| SummaryRow {
            sensitivity: s,
            afp_mean: mean_afp_at(&cv.mean_curve, s),
            baseline_afp_mean: mean_afp_at(&cv.baseline_mean_curve, s),
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "unreached".to_string(), |x| format!("{x:.4}"))
}

/// Plain-text table of [`summary_rows`].
pub fn format_summary(rows: &[SummaryRow]) -> String {
    let mut s = String::from("sensitivity  afp_mean  baseline_afp_mean\n");
    for r in rows {
        s.push_str(&format!("{:.2}  {}  {}\n", r.sensitivity, fmt_opt(r.afp_mean), fmt_opt(r.baseline_afp_mean)));
    }
    s
}

/// Full k-fold pipeline. Writes per fold `fold_<f>/froc.csv`,
/// `fold_<f>/baseline_froc.csv`, `fold_<f>/train_log.csv` and detection dumps
/// under `fold_<f>/detections/`, plus `mean_curve.csv`,
/// `baseline_mean_curve.csv`, `summary.csv`, `summary.txt` and `cv_report.json`.
pub fn cmd_cv(cfg: &RunConfig) -> Result<CvOutcome> {
    cfg.validate()?;
    let cohort = read_cohort(required(&cfg.cohort, "cohort")?)?;
    if cohort.len() < cfg.k {
        return Err(Error::BadK { k: cfg.k, n: cohort.len() });
    }
    let cv = run_cv(&cohort, &cfg.cv_config())?;
    let out = open_output(cfg)?;
    for r in &cv.folds {
        let dir = out.join(format!("fold_{}", r.fold));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        save_froc_csv(&r.curve, &dir.join("froc.csv"))?;
        save_froc_csv(&r.baseline_curve, &dir.join("baseline_froc.csv"))?;
        save_log_csv(&r.train_log, &dir.join("train_log.csv"))?;
        for d in &r.detections {
            save_detections_csv(
                &d.detections,
                &dir.join("detections").join(&d.patient_id).join(format!("{}.csv", d.dataset_id)),
            )?;
        }
    }
    save_mean_curve_csv(&cv.mean_curve, &out.join("mean_curve.csv"))?;
    save_mean_curve_csv(&cv.baseline_mean_curve, &out.join("baseline_mean_curve.csv"))?;
    let rows = summary_rows(&cv);
    let mut csv = String::from("sensitivity,afp_mean,baseline_afp_mean\n");
    for r in &rows {
        let cell = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        csv.push_str(&format!("{},{},{}\n", r.sensitivity, cell(r.afp_mean), cell(r.baseline_afp_mean)));
    }
    let path = out.join("summary.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    let path = out.join("summary.txt");
    fs::write(&path, format_summary(&rows)).map_err(|e| Error::io(&path, e))?;
    write_json(&out.join("cv_report.json"), &cv)?;
    Ok(cv)
}

/// Detections for one volume, written to `detections.csv`.
pub fn cmd_detect(cfg: &RunConfig) -> Result<usize> {
    cfg.validate()?;
    let v = load_volume(required(&cfg.volume, "volume")?)?;
    let ss: ScaleSpaceParams = read_json(required(&cfg.scale_space, "scale_space")?)?;
    ss.validate()?;
    let (params, _) = load_checkpoint(required(&cfg.checkpoint, "checkpoint")?)?;
    let v = if v.spacing_mm() == [1.0; 3] { v } else { resample_isotropic(&v, 1.0)? };
    let dets = detect(&v, &ss, &params)?;
    let out = open_output(cfg)?;
    save_detections_csv(&dets, &out.join("detections.csv"))?;
    Ok(dets.len())
}

/// FROC curve recomputed from detection dumps `<patient>/<dataset>.csv`
/// against the cohort's ground truth, written to `froc.csv`. Patients
/// without a dump directory are skipped.
pub fn cmd_froc(cfg: &RunConfig) -> Result<Vec<FrocPoint>> {
    cfg.validate()?;
    let cohort = read_cohort(required(&cfg.cohort, "cohort")?)?;
    let dumps = required(&cfg.detections, "detections")?;
    let mut results = Vec::new();
    for p in &cohort {
        let dir = dumps.join(&p.patient_id);
        if !dir.is_dir() {
            continue;
        }
        let datasets = p
            .datasets
            .iter()
            .map(|d| {
                Ok(DatasetResult {
                    detections: load_detections_csv(&dir.join(format!("{}.csv", d.dataset_id)))?,
                    mask: d.mask.clone(),
                    lesions: d.lesions.clone(),
                })
            })
            .collect::<Result<_>>()?;
        results.push(PatientResult { patient_id: p.patient_id.clone(), datasets });
    }
    if results.is_empty() {
        return Err(Error::config("detections", format!("no patient directories under {}", dumps.display())));
    }
    let curve = froc(&results)?;
    let out = open_output(cfg)?;
    save_froc_csv(&curve, &out.join("froc.csv"))?;
    Ok(curve)
}
