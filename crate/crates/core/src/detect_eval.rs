//! Detection, lesion matching, FROC analysis and patient-wise k-fold
//! cross-validation.
//!
//! Detection scores every scale-space candidate with the network and thins the
//! result with greedy non-maximum suppression. Evaluation counts lesions hit
//! and false positives per patient across a sweep of score thresholds.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cropnet::{predict, CropNetConfig, CropNetParams, Tensor4};
use crate::error::{Error, Result};
use crate::par;
use crate::phantom::PhantomPatient;
use crate::rng;
use crate::scalespace::{detect_blobs, tune_parameters, Candidate, ScaleSpaceParams, TuneOutcome};
use crate::trainer::{plain_crop, train_with_candidates, DatasetView, LogRow, TrainConfig};
use crate::volume::{LabelMap, LesionRecord, Mask3, Volume3};

pub const NMS_RADIUS_MM: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub position_mm: [f64; 3],
    pub score: f64,
}

/// Greedy suppression: detections are visited by descending score, ties by
/// ascending `(z, y, x)` position (scan order for voxel-centered positions),
/// and one is kept unless it lies within `radius_mm` of a kept detection.
pub fn non_max_suppression(dets: &[Detection], radius_mm: f64) -> Vec<Detection> {
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| {
        b.score.total_cmp(&a.score).then_with(|| {
            let key = |d: &Detection| [d.position_mm[2], d.position_mm[1], d.position_mm[0]];
            let (ka, kb) = (key(a), key(b));
            ka.iter().zip(&kb).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let r2 = radius_mm * radius_mm;
    let mut kept: Vec<Detection> = Vec::new();
    for d in order {
        let near = kept.iter().any(|k| {
            let s: f64 = k.position_mm.iter().zip(&d.position_mm).map(|(a, b)| (a - b) * (a - b)).sum();
            s < r2
        });
        if !near {
            kept.push(*d);
        }
    }
    kept
}

/// Network probability for each candidate position, in candidate order.
pub fn score_candidates(v: &Volume3, cands: &[Candidate], params: &CropNetParams<f32>) -> Result<Vec<Detection>> {
    let c = params.config().edge_mm;
    par::map(cands, |cand| {
        let crop = plain_crop(v, cand.position_mm, c)?;
        let p = predict(params, &Tensor4::from_volume(&crop)?)?;
        Ok(Detection { position_mm: cand.position_mm, score: p as f64 })
    })
    .into_iter()
    .collect()
}

/// Scores precomputed candidates and applies non-maximum suppression.
pub fn detect_with_candidates(
    v: &Volume3,
    cands: &[Candidate],
    params: &CropNetParams<f32>,
    radius_mm: f64,
) -> Result<Vec<Detection>> {
    Ok(non_max_suppression(&score_candidates(v, cands, params)?, radius_mm))
}

/// Candidates from `ssparams`, scored by the network, thinned by NMS at
/// [`NMS_RADIUS_MM`].
pub fn detect(v: &Volume3, ssparams: &ScaleSpaceParams, params: &CropNetParams<f32>) -> Result<Vec<Detection>> {
    let cands = detect_blobs(v, ssparams)?;
    detect_with_candidates(v, &cands, params, NMS_RADIUS_MM)
}

/// Every candidate as a detection with score 1.
pub fn candidate_detections(cands: &[Candidate]) -> Vec<Detection> {
    cands.iter().map(|c| Detection { position_mm: c.position_mm, score: 1.0 }).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchResult {
    /// Indices into the lesion list, ascending.
    pub hit_lesions: Vec<usize>,
    /// Indices into the detection list.
    pub false_positives: Vec<usize>,
}

/// Lesions hit and false positives among detections scoring at least
/// `threshold`. A detection hits the lesion whose component contains its
/// nearest voxel; detections outside every component are false positives.
pub fn match_detections(dets: &[Detection], mask: &Mask3, lesions: &[LesionRecord], threshold: f64) -> Result<MatchResult> {
    let labels = LabelMap::new(mask, lesions)?;
    let mut hit = vec![false; lesions.len()];
    let mut false_positives = Vec::new();
    for (i, d) in dets.iter().enumerate() {
        if d.score < threshold {
            continue;
        }
        match labels.lesion_at(d.position_mm)? {
            Some(l) => hit[l] = true,
            None => false_positives.push(i),
        }
    }
    let hit_lesions = hit.iter().enumerate().filter_map(|(i, &h)| h.then_some(i)).collect();
    Ok(MatchResult { hit_lesions, false_positives })
}

#[derive(Clone, Debug)]
pub struct DatasetResult {
    pub detections: Vec<Detection>,
    pub mask: Mask3,
    pub lesions: Vec<LesionRecord>,
}

#[derive(Clone, Debug)]
pub struct PatientResult {
    pub patient_id: String,
    pub datasets: Vec<DatasetResult>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrocPoint {
    pub threshold: f64,
    pub sensitivity: f64,
    pub afp_mean: f64,
    pub afp_std: f64,
}

/// Threshold-independent summary of one patient: for each lesion the best
/// score among detections hitting it, and the scores of false positives.
struct PatientScores {
    lesion_best: Vec<Option<f64>>,
    fp_scores: Vec<f64>,
}

fn summarize(p: &PatientResult) -> Result<PatientScores> {
    let mut lesion_best = Vec::new();
    let mut fp_scores = Vec::new();
    for d in &p.datasets {
        let labels = LabelMap::new(&d.mask, &d.lesions)?;
        let mut best: Vec<Option<f64>> = vec![None; d.lesions.len()];
        for det in &d.detections {
            match labels.lesion_at(det.position_mm)? {
                Some(l) => best[l] = Some(best[l].map_or(det.score, |b: f64| b.max(det.score))),
                None => fp_scores.push(det.score),
            }
        }
        lesion_best.extend(best);
    }
    Ok(PatientScores { lesion_best, fp_scores })
}

/// Operating point with every score above `max` rejected.
pub fn reject_all_threshold(max: f64) -> f64 {
    let m = max.max(1.0);
    f64::from_bits(m.to_bits() + 1)
}

/// FROC curve, ascending in threshold. Thresholds are the distinct detection
/// scores together with 0, 1 and one value above every score. Sensitivity
/// pools lesions over all patients; false positives are counted per patient
/// (pooling that patient's datasets) and summarized by mean and population
/// standard deviation.
pub fn froc(results: &[PatientResult]) -> Result<Vec<FrocPoint>> {
    let summaries: Vec<PatientScores> = results.iter().map(summarize).collect::<Result<_>>()?;
    let n_lesions: usize = summaries.iter().map(|s| s.lesion_best.len()).sum();
    if n_lesions == 0 {
        return Err(Error::NoLesions);
    }
    let mut thresholds: Vec<f64> = vec![0.0, 1.0];
    thresholds.extend(results.iter().flat_map(|p| p.datasets.iter().flat_map(|d| d.detections.iter().map(|x| x.score))));
    let max = thresholds.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    thresholds.push(reject_all_threshold(max));
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    let n_patients = summaries.len() as f64;
    Ok(thresholds
        .into_iter()
        .map(|t| {
            let hits: usize = summaries.iter().map(|s| s.lesion_best.iter().filter(|b| b.is_some_and(|v| v >= t)).count()).sum();
            let fps: Vec<f64> = summaries.iter().map(|s| s.fp_scores.iter().filter(|&&v| v >= t).count() as f64).collect();
            let mean = fps.iter().sum::<f64>() / n_patients;
            let var = fps.iter().map(|f| (f - mean) * (f - mean)).sum::<f64>() / n_patients;
            FrocPoint { threshold: t, sensitivity: hits as f64 / n_lesions as f64, afp_mean: mean, afp_std: var.sqrt() }
        })
        .collect())
}

/// Smallest mean AFP among curve points with sensitivity at least `target`.
pub fn afp_at_sensitivity(curve: &[FrocPoint], target: f64) -> Result<f64> {
    curve
        .iter()
        .filter(|p| p.sensitivity >= target)
        .map(|p| p.afp_mean)
        .min_by(f64::total_cmp)
        .ok_or_else(|| Error::SensitivityUnreachable { target, max: curve.iter().map(|p| p.sensitivity).fold(0.0, f64::max) })
}

/// Lower envelope of a curve: for each distinct sensitivity the smallest
/// AFP, ascending in sensitivity.
fn envelope(curve: &[FrocPoint]) -> Vec<(f64, f64)> {
    let mut by_sens: BTreeMap<u64, (f64, f64)> = BTreeMap::new();
    for p in curve {
        let e = by_sens.entry(p.sensitivity.to_bits()).or_insert((p.sensitivity, p.afp_mean));
        e.1 = e.1.min(p.afp_mean);
    }
    let mut pts: Vec<(f64, f64)> = by_sens.into_values().collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    pts
}

/// AFP at sensitivity `s` by linear interpolation of the lower envelope;
/// `None` above the curve's maximum sensitivity.
pub fn interpolate_afp(curve: &[FrocPoint], s: f64) -> Option<f64> {
    let pts = envelope(curve);
    let hi = pts.iter().position(|&(x, _)| x >= s)?;
    let (x1, y1) = pts[hi];
    if x1 == s || hi == 0 {
        return Some(y1);
    }
    let (x0, y0) = pts[hi - 1];
    Some(y0 + (y1 - y0) * (s - x0) / (x1 - x0))
}

/// Shared sensitivity grid of the mean curve: 0.50, 0.51, ..., 1.00.
pub fn sensitivity_grid() -> Vec<f64> {
    (50..=100).map(|i| i as f64 / 100.0).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanPoint {
    pub sensitivity: f64,
    pub afp_mean: f64,
}

/// Average over curves of the interpolated AFP at each grid sensitivity that
/// every curve reaches.
pub fn mean_curve(curves: &[Vec<FrocPoint>]) -> Vec<MeanPoint> {
    if curves.is_empty() {
        return Vec::new();
    }
    sensitivity_grid()
        .into_iter()
        .filter_map(|s| {
            let vals: Option<Vec<f64>> = curves.iter().map(|c| interpolate_afp(c, s)).collect();
            vals.map(|v| MeanPoint { sensitivity: s, afp_mean: v.iter().sum::<f64>() / v.len() as f64 })
        })
        .collect()
}

/// Mean-curve AFP at exactly the grid sensitivity `s`.
pub fn mean_afp_at(curve: &[MeanPoint], s: f64) -> Option<f64> {
    curve.iter().find(|p| (p.sensitivity - s).abs() < 1e-9).map(|p| p.afp_mean)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub folds: BTreeMap<String, usize>,
}

impl FoldAssignment {
    /// Patients of fold `f`, sorted by id.
    pub fn members(&self, f: usize) -> Vec<&str> {
        self.folds.iter().filter(|(_, &g)| g == f).map(|(p, _)| p.as_str()).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &f in self.folds.values() {
            s[f] += 1;
        }
        s
    }

    pub fn fold_of(&self, patient: &str) -> Option<usize> {
        self.folds.get(patient).copied()
    }
}

/// Uniformly random partition of the patients into `k` groups whose sizes
/// differ by at most one; the smaller groups come first.
pub fn make_folds<R: Rng + ?Sized>(patient_ids: &[String], k: usize, rng: &mut R) -> Result<FoldAssignment> {
    let n = patient_ids.len();
    if k < 2 || n < k {
        return Err(Error::BadK { k, n });
    }
    let mut ids: Vec<&String> = patient_ids.iter().collect();
    ids.sort();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidParams("duplicate patient id".into()));
    }
    ids.shuffle(rng);
    let (base, extra) = (n / k, n % k);
    let mut folds = BTreeMap::new();
    let mut it = ids.into_iter();
    for f in 0..k {
        let size = base + usize::from(f >= k - extra);
        for id in it.by_ref().take(size) {
            folds.insert(id.clone(), f);
        }
    }
    Ok(FoldAssignment { k, folds })
}

pub const FROC_CSV_HEADER: &str = "threshold,sensitivity,afp_mean,afp_std";
pub const MEAN_CURVE_CSV_HEADER: &str = "sensitivity,afp_mean";
pub const DETECTION_CSV_HEADER: &str = "x_mm,y_mm,z_mm,score";

pub fn write_froc_csv(curve: &[FrocPoint], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "{FROC_CSV_HEADER}")?;
    for p in curve {
        writeln!(w, "{},{},{},{}", p.threshold, p.sensitivity, p.afp_mean, p.afp_std)?;
    }
    Ok(())
}

pub fn write_mean_curve_csv(curve: &[MeanPoint], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "{MEAN_CURVE_CSV_HEADER}")?;
    for p in curve {
        writeln!(w, "{},{}", p.sensitivity, p.afp_mean)?;
    }
    Ok(())
}

pub fn write_detections_csv(dets: &[Detection], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "{DETECTION_CSV_HEADER}")?;
    for d in dets {
        let [x, y, z] = d.position_mm;
        writeln!(w, "{x},{y},{z},{}", d.score)?;
    }
    Ok(())
}

fn save_with(path: &Path, write: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    write(&mut buf).expect("write to memory");
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn save_froc_csv(curve: &[FrocPoint], path: &Path) -> Result<()> {
    save_with(path, |b| write_froc_csv(curve, b))
}

pub fn save_mean_curve_csv(curve: &[MeanPoint], path: &Path) -> Result<()> {
    save_with(path, |b| write_mean_curve_csv(curve, b))
}

pub fn save_detections_csv(dets: &[Detection], path: &Path) -> Result<()> {
    save_with(path, |b| write_detections_csv(dets, b))
}

/// Reads a detection dump written by [`write_detections_csv`].
pub fn load_detections_csv(path: &Path) -> Result<Vec<Detection>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header.trim() != DETECTION_CSV_HEADER {
        return Err(Error::HeaderMismatch {
            path: path.into(),
            detail: format!("expected `{DETECTION_CSV_HEADER}`, found `{header}`"),
        });
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = || Error::Malformed { path: path.into(), detail: format!("line {}: `{line}`", i + 2) };
            let vals: Vec<f64> =
                line.split(',').map(|f| f.trim().parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
            match vals[..] {
                [x, y, z, score] => Ok(Detection { position_mm: [x, y, z], score }),
                _ => Err(bad()),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub k: usize,
    pub theta: f64,
    pub grid: Vec<ScaleSpaceParams>,
    pub network: CropNetConfig,
    pub train: TrainConfig,
    pub nms_radius_mm: f64,
    pub seed: u64,
}

impl CvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::config("k", "need at least 2 folds"));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::config("theta", "must lie in [0, 1]"));
        }
        if self.grid.is_empty() {
            return Err(Error::config("grid", "empty"));
        }
        for p in &self.grid {
            p.validate()?;
        }
        if !(self.nms_radius_mm >= 0.0 && self.nms_radius_mm.is_finite()) {
            return Err(Error::config("nms_radius_mm", "must be finite and >= 0"));
        }
        self.train.validate(&self.network)
    }
}

/// Detections of one held-out dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetDetections {
    pub patient_id: String,
    pub dataset_id: String,
    pub detections: Vec<Detection>,
    pub candidates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FoldStatus {
    Completed,
    Infeasible { best_sensitivity: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train_patients: Vec<String>,
    pub test_patients: Vec<String>,
    pub status: FoldStatus,
    pub tune: Option<TuneOutcome>,
    pub best_iteration: Option<usize>,
    pub curve: Vec<FrocPoint>,
    pub baseline_curve: Vec<FrocPoint>,
    pub detections: Vec<DatasetDetections>,
    pub train_log: Vec<LogRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvOutcome {
    pub assignment: FoldAssignment,
    pub folds: Vec<FoldReport>,
    pub mean_curve: Vec<MeanPoint>,
    pub baseline_mean_curve: Vec<MeanPoint>,
}

const FOLD_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;

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

fn patient_results(test: &[&PhantomPatient], dets: &[Vec<Detection>]) -> Vec<PatientResult> {
    let mut it = dets.iter();
    test.iter()
        .map(|p| PatientResult {
            patient_id: p.patient_id.clone(),
            datasets: p
                .datasets
                .iter()
                .map(|d| DatasetResult {
                    detections: it.next().expect("one list per dataset").clone(),
                    mask: d.mask.clone(),
                    lesions: d.lesions.clone(),
                })
                .collect(),
        })
        .collect()
}

fn run_fold(cohort: &[PhantomPatient], assignment: &FoldAssignment, f: usize, cfg: &CvConfig) -> Result<FoldReport> {
    let (train, test): (Vec<&PhantomPatient>, Vec<&PhantomPatient>) =
        cohort.iter().partition(|p| assignment.fold_of(&p.patient_id) != Some(f));
    let ids = |ps: &[&PhantomPatient]| ps.iter().map(|p| p.patient_id.clone()).collect::<Vec<_>>();
    let mut report = FoldReport {
        fold: f,
        train_patients: ids(&train),
        test_patients: ids(&test),
        status: FoldStatus::Completed,
        tune: None,
        best_iteration: None,
        curve: Vec::new(),
        baseline_curve: Vec::new(),
        detections: Vec::new(),
        train_log: Vec::new(),
    };

    let train_views = views(&train);
    let pairs: Vec<(&Volume3, &Mask3)> = train_views.iter().map(|d| (d.volume, d.mask)).collect();
    let tune = match tune_parameters(&pairs, cfg.theta, &cfg.grid) {
        Ok(t) => t,
        Err(Error::Infeasible { best_sensitivity, .. }) => {
            report.status = FoldStatus::Infeasible { best_sensitivity };
            return Ok(report);
        }
        Err(e) => return Err(e),
    };
    let ss = tune.params;
    report.tune = Some(tune);

    let train_cands: Vec<Vec<Candidate>> =
        par::map(&train_views, |d| detect_blobs(d.volume, &ss)).into_iter().collect::<Result<_>>()?;
    let tcfg = TrainConfig { seed: rng::derive_seed(cfg.seed, &[TRAIN_STREAM, f as u64]), ..cfg.train.clone() };
    let trained = train_with_candidates(&train_views, &train_cands, &cfg.network, &tcfg)?;
    report.best_iteration = Some(trained.best_iteration);
    report.train_log = trained.log;

    let test_views = views(&test);
    let test_cands: Vec<Vec<Candidate>> =
        par::map(&test_views, |d| detect_blobs(d.volume, &ss)).into_iter().collect::<Result<_>>()?;
    let mut dets = Vec::with_capacity(test_views.len());
    for (d, cands) in test_views.iter().zip(&test_cands) {
        dets.push(detect_with_candidates(d.volume, cands, &trained.params, cfg.nms_radius_mm)?);
    }
    let baseline: Vec<Vec<Detection>> = test_cands.iter().map(|c| candidate_detections(c)).collect();
    report.curve = froc(&patient_results(&test, &dets))?;
    report.baseline_curve = froc(&patient_results(&test, &baseline))?;
    let dataset_ids = test.iter().flat_map(|p| p.datasets.iter().map(move |d| (p.patient_id.clone(), d.dataset_id.clone())));
    report.detections = dataset_ids
        .zip(dets)
        .zip(&test_cands)
        .map(|(((patient_id, dataset_id), detections), c)| DatasetDetections {
            patient_id,
            dataset_id,
            detections,
            candidates: c.len(),
        })
        .collect();
    Ok(report)
}

/// Patient-wise k-fold cross-validation: per fold the candidate parameters
/// are tuned on the training patients, a network is trained on them and the
/// held-out patients are scored. Folds whose tuning is infeasible are
/// reported and left out of the mean curves.
pub fn run_cv(cohort: &[PhantomPatient], cfg: &CvConfig) -> Result<CvOutcome> {
    cfg.validate()?;
    let ids: Vec<String> = cohort.iter().map(|p| p.patient_id.clone()).collect();
    let assignment = make_folds(&ids, cfg.k, &mut rng::stream(cfg.seed, &[FOLD_STREAM]))?;
    let folds: Vec<FoldReport> = (0..cfg.k).map(|f| run_fold(cohort, &assignment, f, cfg)).collect::<Result<_>>()?;
    let done: Vec<&FoldReport> = folds.iter().filter(|r| r.status == FoldStatus::Completed).collect();
    let mean = mean_curve(&done.iter().map(|r| r.curve.clone()).collect::<Vec<_>>());
    let baseline = mean_curve(&done.iter().map(|r| r.baseline_curve.clone()).collect::<Vec<_>>());
    Ok(CvOutcome { assignment, folds, mean_curve: mean, baseline_mean_curve: baseline })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_cohort, PhantomConfig};
    use crate::volume::connected_components;
    use proptest::prelude::*;

    fn det(p: [f64; 3], score: f64) -> Detection {
        Detection { position_mm: p, score }
    }

    /// Mask with one 2×2×2 cube per corner in `corners`.
    fn cubes(n: usize, corners: &[[usize; 3]]) -> (Mask3, Vec<LesionRecord>) {
        let mut m = Mask3::empty([n; 3], [1.0; 3]).unwrap();
        for c in corners {
            for k in 0..8 {
                m.set(c[0] + k % 2, c[1] + (k / 2) % 2, c[2] + k / 4, true);
            }
        }
        let l = connected_components(&m);
        (m, l)
    }

    fn patient(id: &str, n: usize, corners: &[[usize; 3]], dets: Vec<Detection>) -> PatientResult {
        let (mask, lesions) = cubes(n, corners);
        PatientResult { patient_id: id.into(), datasets: vec![DatasetResult { detections: dets, mask, lesions }] }
    }

    #[test]
    fn nms_keeps_the_stronger_of_close_pairs() {
        let kept = non_max_suppression(&[det([10.0, 10.0, 10.0], 0.8), det([13.0, 10.0, 10.0], 0.9)], NMS_RADIUS_MM);
        assert_eq!(kept, vec![det([13.0, 10.0, 10.0], 0.9)]);
        let far = non_max_suppression(&[det([0.0; 3], 0.8), det([9.0, 0.0, 0.0], 0.9)], NMS_RADIUS_MM);
        assert_eq!(far.len(), 2);
    }

    #[test]
    fn nms_ties_resolve_in_scan_order() {
        let kept = non_max_suppression(&[det([5.0, 1.0, 2.0], 0.5), det([1.0, 1.0, 2.0], 0.5), det([9.0, 9.0, 1.0], 0.5)], 6.0);
        assert_eq!(kept[0].position_mm, [9.0, 9.0, 1.0]);
        assert_eq!(kept[1].position_mm, [1.0, 1.0, 2.0]);
        assert_eq!(kept.len(), 2);
    }

    proptest! {
        #[test]
        fn nms_is_separated_and_idempotent(pts in prop::collection::vec((0u8..20, 0u8..20, 0u8..20, 0u8..10), 0..40)) {
            let dets: Vec<Detection> = pts.iter().map(|&(x, y, z, s)| det([x as f64, y as f64, z as f64], s as f64 / 10.0)).collect();
            let kept = non_max_suppression(&dets, NMS_RADIUS_MM);
            for (i, a) in kept.iter().enumerate() {
                for b in &kept[i + 1..] {
                    let d2: f64 = a.position_mm.iter().zip(&b.position_mm).map(|(p, q)| (p - q).powi(2)).sum();
                    prop_assert!(d2 >= NMS_RADIUS_MM * NMS_RADIUS_MM);
                }
            }
            prop_assert_eq!(non_max_suppression(&kept, NMS_RADIUS_MM), kept);
        }
    }

    #[test]
    fn matching_counts() {
        let (mask, lesions) = cubes(12, &[[1, 1, 1], [6, 6, 6], [1, 8, 1]]);
        let inside = [det([1.0, 1.0, 1.0], 0.9), det([7.0, 6.0, 6.0], 0.8), det([2.0, 9.0, 2.0], 0.7)];
        let m = match_detections(&inside, &mask, &lesions, 0.5).unwrap();
        assert_eq!((m.hit_lesions.len(), m.false_positives.len()), (3, 0));
        let m = match_detections(&inside, &mask, &lesions, 0.95).unwrap();
        assert_eq!((m.hit_lesions.len(), m.false_positives.len()), (0, 0));
        let two_in_one = [det([1.0, 1.0, 1.0], 0.9), det([2.0, 2.0, 2.0], 0.9), det([10.0, 1.0, 10.0], 0.9)];
        let m = match_detections(&two_in_one, &mask, &lesions, 0.5).unwrap();
        assert_eq!((m.hit_lesions.len(), m.false_positives.clone()), (1, vec![2]));
        assert!(matches!(match_detections(&[det([40.0; 3], 0.9)], &mask, &lesions, 0.5), Err(Error::FrameMismatch(_))));
    }

    fn toy() -> Vec<PatientResult> {
        vec![
            patient(
                "a",
                10,
                &[[1, 1, 1], [6, 6, 6]],
                vec![det([1.0, 1.0, 1.0], 0.9), det([7.0, 7.0, 7.0], 0.4), det([5.0, 1.0, 8.0], 0.7)],
            ),
            patient("b", 10, &[[4, 4, 4]], vec![det([5.0, 5.0, 4.0], 0.6), det([0.0, 9.0, 0.0], 0.95)]),
        ]
    }

    #[test]
    fn froc_on_hand_counted_toy() {
        let curve = froc(&toy()).unwrap();
        let third = 1.0 / 3.0;
        let want = [
            (0.0, 1.0, 1.0, 0.0),
            (0.4, 1.0, 1.0, 0.0),
            (0.6, 2.0 * third, 1.0, 0.0),
            (0.7, third, 1.0, 0.0),
            (0.9, third, 0.5, 0.5),
            (0.95, 0.0, 0.5, 0.5),
            (1.0, 0.0, 0.0, 0.0),
        ];
        assert_eq!(curve.len(), want.len() + 1);
        for (p, &(t, s, m, sd)) in curve.iter().zip(&want) {
            assert_eq!((p.threshold, p.sensitivity, p.afp_mean, p.afp_std), (t, s, m, sd));
        }
        let last = curve.last().unwrap();
        assert!(last.threshold > 1.0);
        assert_eq!((last.sensitivity, last.afp_mean), (0.0, 0.0));
        for w in curve.windows(2) {
            assert!(w[1].sensitivity <= w[0].sensitivity && w[1].afp_mean <= w[0].afp_mean);
        }
    }

    #[test]
    fn froc_pools_datasets_per_patient() {
        let (m1, l1) = cubes(10, &[[1, 1, 1]]);
        let (m2, l2) = cubes(10, &[[5, 5, 5]]);
        let p = PatientResult {
            patient_id: "p".into(),
            datasets: vec![
                DatasetResult { detections: vec![det([8.0; 3], 0.5)], mask: m1, lesions: l1 },
                DatasetResult { detections: vec![det([5.0; 3], 0.5), det([1.0, 8.0, 1.0], 0.5)], mask: m2, lesions: l2 },
            ],
        };
        let q = patient("q", 10, &[[1, 1, 1]], vec![]);
        let curve = froc(&[p, q]).unwrap();
        let at = curve.iter().find(|c| c.threshold == 0.5).unwrap();
        assert_eq!((at.sensitivity, at.afp_mean, at.afp_std), (1.0 / 3.0, 1.0, 1.0));
    }

    #[test]
    fn perfect_scores_reach_full_sensitivity_without_false_positives() {
        let p = patient("a", 10, &[[1, 1, 1], [6, 6, 6]], vec![det([1.0; 3], 1.0), det([6.0; 3], 1.0)]);
        let curve = froc(&[p]).unwrap();
        assert!(curve.iter().any(|c| c.sensitivity == 1.0 && c.afp_mean == 0.0));
    }

    #[test]
    fn froc_without_lesions_fails() {
        assert!(matches!(froc(&[patient("a", 6, &[], vec![det([1.0; 3], 0.5)])]), Err(Error::NoLesions)));
    }

    fn point(s: f64, a: f64) -> FrocPoint {
        FrocPoint { threshold: 0.5, sensitivity: s, afp_mean: a, afp_std: 0.0 }
    }

    #[test]
    fn afp_lookup() {
        let curve = [point(0.0, 0.0), point(0.85, 5.85), point(0.9, 9.12), point(0.9, 10.5), point(0.95, 14.0)];
        assert_eq!(afp_at_sensitivity(&curve, 0.9).unwrap(), 9.12);
        assert_eq!(afp_at_sensitivity(&curve, 0.0).unwrap(), 0.0);
        assert!(matches!(afp_at_sensitivity(&curve, 0.99), Err(Error::SensitivityUnreachable { .. })));
    }

    #[test]
    fn interpolation_and_mean_curve() {
        let a = vec![point(0.0, 0.0), point(0.8, 2.0), point(1.0, 6.0)];
        let b = vec![point(0.0, 0.0), point(0.6, 1.0), point(0.95, 8.0)];
        assert_eq!(interpolate_afp(&a, 0.9), Some(4.0));
        assert_eq!(interpolate_afp(&a, 0.8), Some(2.0));
        assert_eq!(interpolate_afp(&b, 0.96), None);
        let ib = interpolate_afp(&b, 0.9).unwrap();
        assert!((ib - 7.0).abs() < 1e-12);
        let mean = mean_curve(&[a.clone(), b.clone()]);
        assert_eq!(mean.first().unwrap().sensitivity, 0.5);
        assert_eq!(mean.last().unwrap().sensitivity, 0.95);
        let m90 = mean_afp_at(&mean, 0.9).unwrap();
        assert_eq!(m90, (interpolate_afp(&a, 0.9).unwrap() + ib) / 2.0);
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i:03}")).collect()
    }

    #[test]
    fn fold_sizes() {
        let f = make_folds(&ids(158), 5, &mut rng::seeded(1)).unwrap();
        let mut s = f.sizes();
        s.sort();
        assert_eq!(s, vec![31, 31, 32, 32, 32]);
        assert_eq!(make_folds(&ids(10), 5, &mut rng::seeded(1)).unwrap().sizes(), vec![2; 5]);
        assert!(matches!(make_folds(&ids(10), 1, &mut rng::seeded(1)), Err(Error::BadK { k: 1, n: 10 })));
        assert!(matches!(make_folds(&ids(3), 4, &mut rng::seeded(1)), Err(Error::BadK { .. })));
    }

    proptest! {
        #[test]
        fn folds_partition_and_reproduce(n in 2usize..60, k in 2usize..8, seed in 0u64..1000) {
            prop_assume!(k <= n);
            let a = make_folds(&ids(n), k, &mut rng::seeded(seed)).unwrap();
            let b = make_folds(&ids(n), k, &mut rng::seeded(seed)).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.folds.len(), n);
            let s = a.sizes();
            prop_assert!(s.iter().max().unwrap() - s.iter().min().unwrap() <= 1);
            prop_assert_eq!(s.iter().sum::<usize>(), n);
        }
    }

    #[test]
    fn detection_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let dets = vec![det([1.0, 2.5, 3.25], 0.123456789012345), det([0.0, 0.0, 63.0], 1e-7)];
        save_detections_csv(&dets, &path).unwrap();
        assert_eq!(load_detections_csv(&path).unwrap(), dets);
        save_detections_csv(&[], &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), format!("{DETECTION_CSV_HEADER}\n"));
        std::fs::write(&path, "x,y,z\n").unwrap();
        assert!(matches!(load_detections_csv(&path), Err(Error::HeaderMismatch { .. })));
    }

    #[test]
    fn zero_weight_network_scores_one_half() {
        let cfg = PhantomConfig { dims: [32; 3], lesions_mean: 2.0, ..PhantomConfig::default() };
        let cohort = generate_cohort(1, &cfg, &mut rng::seeded(3)).unwrap();
        let v = &cohort[0].datasets[0].volume;
        let ss = ScaleSpaceParams { sigma_min_mm: 1.5, sigma_max_mm: 4.0, n_scales: 4, log_threshold: 0.02 };
        let params = CropNetParams::<f32>::zeros(CropNetConfig::default()).unwrap();
        let cands = detect_blobs(v, &ss).unwrap();
        assert!(!cands.is_empty());
        let scored = score_candidates(v, &cands, &params).unwrap();
        assert!(scored.iter().all(|d| d.score == 0.5));
        let flat = Volume3::filled([32; 3], [1.0; 3], 0.3).unwrap();
        assert!(detect(&flat, &ss, &params).unwrap().is_empty());
    }

    #[test]
    fn cross_validation_keeps_patients_on_one_side() {
        let cfg = PhantomConfig { dims: [32; 3], lesions_mean: 6.0, ..PhantomConfig::default() };
        let cohort = generate_cohort(4, &cfg, &mut rng::seeded(8)).unwrap();
        assert!(cohort.iter().all(|p| p.datasets.iter().any(|d| !d.lesions.is_empty())));
        let grid = vec![
            ScaleSpaceParams { sigma_min_mm: 1.0, sigma_max_mm: 4.0, n_scales: 4, log_threshold: 0.01 },
            ScaleSpaceParams { sigma_min_mm: 1.0, sigma_max_mm: 4.0, n_scales: 4, log_threshold: 0.03 },
        ];
        let cv = CvConfig {
            k: 2,
            theta: 0.5,
            grid,
            network: CropNetConfig::default(),
            train: TrainConfig { max_iterations: 2, val_window: 1, val_fraction: 0.5, ..TrainConfig::default() },
            nms_radius_mm: NMS_RADIUS_MM,
            seed: 4,
        };
        let out = run_cv(&cohort, &cv).unwrap();
        assert_eq!(out.folds.len(), 2);
        for r in &out.folds {
            assert!(r.train_patients.iter().all(|p| !r.test_patients.contains(p)));
            assert_eq!(r.train_patients.len() + r.test_patients.len(), 4);
            let tested: Vec<&str> = r.detections.iter().map(|d| d.patient_id.as_str()).collect();
            for p in &cohort {
                let n = tested.iter().filter(|&&t| t == p.patient_id).count();
                assert!(n == 0 || n == p.datasets.len());
                assert_eq!(n > 0, r.test_patients.contains(&p.patient_id));
            }
        }
        assert_eq!(run_cv(&cohort, &cv).unwrap(), out);
    }
}
