//! Paired-batch training with best-model selection.
//!
//! Every batch holds one positive and one negative crop per pairable training
//! dataset. After each optimizer step the network is scored on a fixed,
//! unaugmented validation set; the snapshot with the lowest moving average of
//! that loss is kept.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_sample, AugmentConfig};
use crate::cropnet::{
    backward, bce_loss, forward, init_params, predict, AdamConfig, CropNetConfig, CropNetParams, Gradients, Mode, OptimizerState,
    Tensor4,
};
use crate::error::{Error, Result};
use crate::par;
use crate::rng;
use crate::scalespace::{detect_blobs, Candidate, ScaleSpaceParams};
use crate::volume::{crop_centered, LabelMap, LesionRecord, Mask3, Volume3};

/// Borrowed view of one labeled dataset and the patient it belongs to.
#[derive(Clone, Copy, Debug)]
pub struct DatasetView<'a> {
    pub patient_id: &'a str,
    pub volume: &'a Volume3,
    pub mask: &'a Mask3,
    pub lesions: &'a [LesionRecord],
}

/// Positive and negative sample centers of one dataset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSamples {
    pub positives: Vec<[f64; 3]>,
    pub negatives: Vec<[f64; 3]>,
    /// Lesion centroids added because no candidate hit the lesion.
    pub synthetic_positives: usize,
}

impl DatasetSamples {
    pub fn pairable(&self) -> bool {
        !self.positives.is_empty() && !self.negatives.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleIndex {
    pub datasets: Vec<DatasetSamples>,
}

impl SampleIndex {
    /// Indices of datasets that take part in paired sampling.
    pub fn pairable(&self) -> Vec<usize> {
        (0..self.datasets.len()).filter(|&i| self.datasets[i].pairable()).collect()
    }

    /// Indices of datasets left out of paired sampling.
    pub fn excluded(&self) -> Vec<usize> {
        (0..self.datasets.len()).filter(|&i| !self.datasets[i].pairable()).collect()
    }
}

/// Splits each dataset's candidates into positives (nearest voxel inside a
/// lesion) and negatives. Lesions without a hitting candidate contribute
/// their centroid as a positive.
pub fn build_sample_index(datasets: &[(DatasetView<'_>, &[Candidate])]) -> Result<SampleIndex> {
    let datasets = datasets
        .iter()
        .map(|(d, cands)| {
            let labels = LabelMap::new(d.mask, d.lesions)?;
            let mut s = DatasetSamples::default();
            let mut hit = vec![false; d.lesions.len()];
            for c in *cands {
                match labels.lesion_at(c.position_mm)? {
                    Some(l) => {
                        hit[l] = true;
                        s.positives.push(c.position_mm);
                    }
                    None => s.negatives.push(c.position_mm),
                }
            }
            for (lesion, _) in d.lesions.iter().zip(&hit).filter(|(_, &h)| !h) {
                s.positives.push(lesion.center_mm);
                s.synthetic_positives += 1;
            }
            Ok(s)
        })
        .collect::<Result<_>>()?;
    Ok(SampleIndex { datasets })
}

/// One network input with its label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledCrop {
    pub dataset: usize,
    pub center_mm: [f64; 3],
    pub label: f32,
    pub crop: Volume3,
}

/// Crop of edge `2c` around `center_mm`, pushed through [`augment_sample`].
pub fn augmented_crop<R: Rng + ?Sized>(v: &Volume3, center_mm: [f64; 3], aug: &AugmentConfig, rng: &mut R) -> Result<Volume3> {
    let big = crop_centered(v, center_mm, 2.0 * aug.crop_edge_mm as f64)?;
    augment_sample(&big, aug, rng)
}

/// The unaugmented network input for a center: the `2c` crop is scaled to
/// `[0, 1]` and its central `c` cube kept.
pub fn plain_crop(v: &Volume3, center_mm: [f64; 3], crop_edge_mm: usize) -> Result<Volume3> {
    augmented_crop(v, center_mm, &AugmentConfig::identity(crop_edge_mm), &mut rng::seeded(0))
}

/// Dataset index, crop center in mm and label of one sample.
pub type Pick = (usize, [f64; 3], f32);

/// Centers and labels of one paired batch: per pairable dataset, in index
/// order, a uniform positive then a uniform negative.
pub fn select_pairs<R: Rng + ?Sized>(index: &SampleIndex, rng: &mut R) -> Result<Vec<Pick>> {
    let pairable = index.pairable();
    if pairable.is_empty() {
        return Err(Error::NoPairableDatasets);
    }
    let mut out = Vec::with_capacity(2 * pairable.len());
    for i in pairable {
        let d = &index.datasets[i];
        out.push((i, d.positives[rng.random_range(0..d.positives.len())], 1.0));
        out.push((i, d.negatives[rng.random_range(0..d.negatives.len())], 0.0));
    }
    Ok(out)
}

/// A batch of `2N` augmented crops. Each sample is augmented from its own
/// stream split off `rng`, so the result is independent of thread count.
pub fn sample_paired_batch<R: Rng + ?Sized>(
    index: &SampleIndex,
    volumes: &[&Volume3],
    aug: &AugmentConfig,
    rng: &mut R,
) -> Result<Vec<LabeledCrop>> {
    if volumes.len() != index.datasets.len() {
        return Err(Error::ShapeMismatch(format!("{} volumes for {} indexed datasets", volumes.len(), index.datasets.len())));
    }
    let picks = select_pairs(index, rng)?;
    let batch_seed: u64 = rng.random();
    let jobs: Vec<(usize, Pick)> = picks.into_iter().enumerate().collect();
    par::map(&jobs, |&(j, (dataset, center_mm, label))| {
        let mut r = rng::stream(batch_seed, &[j as u64]);
        let crop = augmented_crop(volumes[dataset], center_mm, aug, &mut r)?;
        Ok(LabeledCrop { dataset, center_mm, label, crop })
    })
    .into_iter()
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_iterations: usize,
    pub val_window: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_iterations: 20000,
            val_window: 30,
            val_fraction: 0.2,
            seed: 0,
            augment: AugmentConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, net: &CropNetConfig) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::config("train.max_iterations", "must be >= 1"));
        }
        if self.val_window == 0 {
            return Err(Error::config("train.val_window", "must be >= 1"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::config("train.val_fraction", format!("{} outside (0, 1)", self.val_fraction)));
        }
        if self.augment.crop_edge_mm != net.edge_mm {
            return Err(Error::config(
                "train.augment.crop_edge_mm",
                format!("{} differs from network edge {}", self.augment.crop_edge_mm, net.edge_mm),
            ));
        }
        self.augment.validate()?;
        self.adam.validate()?;
        net.validate_shape()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_moving_avg: f64,
}

pub const LOG_HEADER: &str = "iteration,train_loss,val_loss,val_moving_avg";

pub fn write_log_csv(rows: &[LogRow], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "{LOG_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.iteration, r.train_loss, r.val_loss, r.val_moving_avg)?;
    }
    Ok(())
}

pub fn save_log_csv(rows: &[LogRow], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_log_csv(rows, &mut buf).expect("write to memory");
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Patient-wise split: `(training patients, validation patients)`, each in
/// first-appearance order.
pub fn split_patients<R: Rng + ?Sized>(patients: &[&str], val_fraction: f64, rng: &mut R) -> Result<(Vec<String>, Vec<String>)> {
    let mut ids: Vec<String> = Vec::new();
    for p in patients {
        if !ids.iter().any(|q| q == p) {
            ids.push(p.to_string());
        }
    }
    if ids.len() < 2 {
        return Err(Error::InsufficientPatients { needed: 2, got: ids.len() });
    }
    let n_val = ((val_fraction * ids.len() as f64).round() as usize).clamp(1, ids.len() - 1);
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(rng);
    let mut is_val = vec![false; ids.len()];
    for &k in &order[..n_val] {
        is_val[k] = true;
    }
    let (val, train): (Vec<_>, Vec<_>) = ids.into_iter().zip(is_val).partition(|(_, v)| *v);
    Ok((train.into_iter().map(|(p, _)| p).collect(), val.into_iter().map(|(p, _)| p).collect()))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: CropNetParams<f32>,
    pub best_iteration: usize,
    pub log: Vec<LogRow>,
    pub train_patients: Vec<String>,
    pub val_patients: Vec<String>,
    /// Training datasets (indices into the input) left out of pairing.
    pub excluded: Vec<usize>,
    pub synthetic_positives: usize,
}

impl TrainOutcome {
    pub fn train_losses(&self) -> Vec<f64> {
        self.log.iter().map(|r| r.train_loss).collect()
    }
}

// stream ids
const SPLIT: u64 = 1;
const INIT: u64 = 2;
const VALSET: u64 = 3;
const BATCH: u64 = 4;
const DROPOUT: u64 = 5;

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// One forward/backward per sample, reduced in batch order.
fn batch_gradients(
    params: &CropNetParams<f32>,
    batch: &[(Tensor4<f32>, f32)],
    seed: u64,
    iteration: usize,
) -> Result<(Gradients<f32>, f64)> {
    let jobs: Vec<usize> = (0..batch.len()).collect();
    let per_sample = par::map(&jobs, |&j| -> Result<(Gradients<f32>, f64)> {
        let (x, y) = &batch[j];
        let mut r = rng::stream(seed, &[DROPOUT, iteration as u64, j as u64]);
        let (p, cache) = forward(params, x, Mode::Train, &mut r)?;
        Ok((backward(params, &cache, *y)?, bce_loss(p as f64, *y as f64)))
    });
    let mut total = Gradients::zeros(params.len());
    let mut loss = 0.0;
    for r in per_sample {
        let (g, l) = r?;
        total.add_assign(&g);
        loss += l;
    }
    let n = batch.len() as f32;
    total.scale(1.0 / n);
    Ok((total, loss / batch.len() as f64))
}

fn mean_loss(params: &CropNetParams<f32>, set: &[(Tensor4<f32>, f32)]) -> Result<f64> {
    let losses = par::map(set, |(x, y)| predict(params, x).map(|p| bce_loss(p as f64, *y as f64)));
    let losses: Vec<f64> = losses.into_iter().collect::<Result<_>>()?;
    Ok(mean(&losses))
}

/// Trains a network on `datasets`, computing candidates with `ssparams`.
pub fn train(
    datasets: &[DatasetView<'_>],
    ssparams: &ScaleSpaceParams,
    netcfg: &CropNetConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate(netcfg)?;
    ssparams.validate()?;
    let candidates: Vec<Vec<Candidate>> =
        par::map(datasets, |d| detect_blobs(d.volume, ssparams)).into_iter().collect::<Result<_>>()?;
    train_with_candidates(datasets, &candidates, netcfg, cfg)
}

/// Training on precomputed per-dataset candidates.
pub fn train_with_candidates(
    datasets: &[DatasetView<'_>],
    candidates: &[Vec<Candidate>],
    netcfg: &CropNetConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate(netcfg)?;
    if candidates.len() != datasets.len() {
        return Err(Error::ShapeMismatch(format!("{} candidate lists for {} datasets", candidates.len(), datasets.len())));
    }
    let c = netcfg.edge_mm;
    let patients: Vec<&str> = datasets.iter().map(|d| d.patient_id).collect();
    let (train_patients, val_patients) = split_patients(&patients, cfg.val_fraction, &mut rng::stream(cfg.seed, &[SPLIT]))?;
    let in_val = |d: &DatasetView<'_>| val_patients.iter().any(|p| p == d.patient_id);

    let (train_idx, val_idx): (Vec<usize>, Vec<usize>) = (0..datasets.len()).partition(|&i| !in_val(&datasets[i]));
    let entries = |idx: &[usize]| -> Vec<(DatasetView<'_>, &[Candidate])> {
        idx.iter().map(|&i| (datasets[i], candidates[i].as_slice())).collect()
    };
    let train_index = build_sample_index(&entries(&train_idx))?;
    let val_index = build_sample_index(&entries(&val_idx))?;
    let train_volumes: Vec<&Volume3> = train_idx.iter().map(|&i| datasets[i].volume).collect();
    if train_index.pairable().is_empty() {
        return Err(Error::NoPairableDatasets);
    }

    let mut vr = rng::stream(cfg.seed, &[VALSET]);
    let mut val_set: Vec<(Tensor4<f32>, f32)> = Vec::new();
    for (k, d) in val_index.datasets.iter().enumerate() {
        let v = datasets[val_idx[k]].volume;
        if !d.positives.is_empty() {
            let center = d.positives[vr.random_range(0..d.positives.len())];
            val_set.push((Tensor4::from_volume(&plain_crop(v, center, c)?)?, 1.0));
        }
        if !d.negatives.is_empty() {
            let center = d.negatives[vr.random_range(0..d.negatives.len())];
            val_set.push((Tensor4::from_volume(&plain_crop(v, center, c)?)?, 0.0));
        }
    }
    if val_set.is_empty() {
        return Err(Error::NoPairableDatasets);
    }

    let mut params: CropNetParams<f32> = init_params(*netcfg, &mut rng::stream(cfg.seed, &[INIT]))?;
    let mut opt = OptimizerState::new(cfg.adam, params.len());
    let mut window: VecDeque<f64> = VecDeque::with_capacity(cfg.val_window);
    let mut log = Vec::with_capacity(cfg.max_iterations);
    let mut best: Option<(f64, usize, CropNetParams<f32>)> = None;
    let first_eligible = cfg.val_window.min(cfg.max_iterations);

    for t in 1..=cfg.max_iterations {
        let mut br = rng::stream(cfg.seed, &[BATCH, t as u64]);
        let batch = sample_paired_batch(&train_index, &train_volumes, &cfg.augment, &mut br)?;
        let inputs: Vec<(Tensor4<f32>, f32)> =
            batch.iter().map(|s| Ok((Tensor4::from_volume(&s.crop)?, s.label))).collect::<Result<_>>()?;
        let (grads, train_loss) = batch_gradients(&params, &inputs, cfg.seed, t)?;
        params = opt.step(&params, &grads)?;

        let val_loss = mean_loss(&params, &val_set)?;
        if window.len() == cfg.val_window {
            window.pop_front();
        }
        window.push_back(val_loss);
        let val_moving_avg = window.iter().sum::<f64>() / window.len() as f64;
        log.push(LogRow { iteration: t, train_loss, val_loss, val_moving_avg });

        if t >= first_eligible && best.as_ref().is_none_or(|(b, _, _)| val_moving_avg < *b) {
            best = Some((val_moving_avg, t, params.clone()));
        }
    }

    let (_, best_iteration, best_params) = best.expect("at least one eligible iteration");
    Ok(TrainOutcome {
        params: best_params,
        best_iteration,
        log,
        train_patients,
        val_patients,
        excluded: train_index.excluded().into_iter().map(|k| train_idx[k]).collect(),
        synthetic_positives: train_index.datasets.iter().map(|d| d.synthetic_positives).sum(),
    })
}
