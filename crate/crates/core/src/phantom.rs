//! Synthetic cohorts with known ground truth.
//!
//! Each dataset is a smooth background with a multiplicative bias field,
//! vessel-like tubes as confounders, raised-cosine spherical lesions and
//! additive Gaussian noise. The lesion mask is the half-maximum isocontour of
//! each lesion bump, so mask components and lesion records always agree.

use std::fs;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::{LogNormal, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::rng;
use crate::volume::{connected_components, load_mask, load_volume, save_mask, save_volume, Dims, LesionRecord, Mask3, Volume3};

/// Relative frequencies of patients with 1, 2, 3 and 4 datasets.
pub const DATASETS_PER_PATIENT_WEIGHTS: [u32; 4] = [113, 33, 10, 2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub dims: Dims,
    pub background: f64,
    pub lesions_mean: f64,
    pub lesions_max: usize,
    pub diameter_mean_mm: f64,
    pub diameter_median_mm: f64,
    pub diameter_min_mm: f64,
    pub diameter_max_mm: f64,
    pub contrast_lo: f64,
    pub contrast_hi: f64,
    pub n_vessels: usize,
    pub vessel_radius_lo_mm: f64,
    pub vessel_radius_hi_mm: f64,
    pub noise_sigma: f64,
    pub bias_amplitude: f64,
    pub border_margin_vox: usize,
    pub placement_attempts: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: [64; 3],
            background: 0.3,
            lesions_mean: 4.29,
            lesions_max: 20,
            diameter_mean_mm: 5.45,
            diameter_median_mm: 4.57,
            diameter_min_mm: 2.0,
            diameter_max_mm: 15.0,
            contrast_lo: 0.2,
            contrast_hi: 0.6,
            n_vessels: 6,
            vessel_radius_lo_mm: 0.5,
            vessel_radius_hi_mm: 1.5,
            noise_sigma: 0.02,
            bias_amplitude: 0.1,
            border_margin_vox: 2,
            placement_attempts: 200,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidPhantom(m));
        if self.dims.iter().any(|&d| d < 8) {
            return bad(format!("dims {:?} must be >= 8 per axis", self.dims));
        }
        if !(self.background > 0.0 && self.background < 1.0) {
            return bad(format!("background {} outside (0, 1)", self.background));
        }
        if !(self.lesions_mean >= 0.0 && self.lesions_mean.is_finite()) {
            return bad(format!("lesions_mean {} must be >= 0", self.lesions_mean));
        }
        if !(self.diameter_min_mm > 0.0 && self.diameter_min_mm < self.diameter_max_mm) {
            return bad("need 0 < diameter_min_mm < diameter_max_mm".into());
        }
        let (lo, hi) = (self.diameter_min_mm, self.diameter_max_mm);
        if !(self.diameter_median_mm > lo
            && self.diameter_median_mm < hi
            && self.diameter_mean_mm > self.diameter_median_mm
            && self.diameter_mean_mm < hi)
        {
            return bad("need diameter_min < median < mean < diameter_max".into());
        }
        if !(self.contrast_lo > 0.0 && self.contrast_hi >= self.contrast_lo) {
            return bad("need 0 < contrast_lo <= contrast_hi".into());
        }
        if !(self.vessel_radius_lo_mm > 0.0 && self.vessel_radius_hi_mm >= self.vessel_radius_lo_mm) {
            return bad("need 0 < vessel_radius_lo_mm <= vessel_radius_hi_mm".into());
        }
        if !(self.noise_sigma >= 0.0 && self.bias_amplitude >= 0.0 && self.bias_amplitude < 1.0) {
            return bad("need noise_sigma >= 0 and 0 <= bias_amplitude < 1".into());
        }
        if self.placement_attempts == 0 {
            return bad("placement_attempts must be positive".into());
        }
        let span = *self.dims.iter().min().expect("three dims") as f64 - 1.0 - 2.0 * self.border_margin_vox as f64;
        if span < self.diameter_max_mm {
            return bad(format!("dims {:?} too small for {} mm lesions", self.dims, self.diameter_max_mm));
        }
        Ok(())
    }
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Mean and median of a log-normal `(mu, s)` truncated to `[lo, hi]`.
pub fn truncated_lognormal_stats(mu: f64, s: f64, lo: f64, hi: f64) -> (f64, f64) {
    let (a, b) = ((lo.ln() - mu) / s, (hi.ln() - mu) / s);
    let (fa, fb) = (normal_cdf(a), normal_cdf(b));
    let mass = fb - fa;
    let mean = (mu + 0.5 * s * s).exp() * (normal_cdf(b - s) - normal_cdf(a - s)) / mass;
    let target = 0.5 * (fa + fb);
    let (mut zl, mut zh) = (a, b);
    for _ in 0..64 {
        let zm = 0.5 * (zl + zh);
        if normal_cdf(zm) < target {
            zl = zm;
        } else {
            zh = zm;
        }
    }
    (mean, (mu + s * 0.5 * (zl + zh)).exp())
}

fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    // f increasing; returns the root
    for _ in 0..64 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Log-normal `(mu, s)` whose truncation to `[lo, hi]` has the given mean
/// and median.
pub fn fit_truncated_lognormal(mean: f64, median: f64, lo: f64, hi: f64) -> (f64, f64) {
    let mu_for = |s: f64| bisect(lo.ln() - 10.0, hi.ln() + 10.0, |mu| truncated_lognormal_stats(mu, s, lo, hi).1 - median);
    let s = bisect(1e-3, 5.0, |s| truncated_lognormal_stats(mu_for(s), s, lo, hi).0 - mean);
    (mu_for(s), s)
}

/// Sampler for lesion diameters: a fitted log-normal, rejection-truncated.
#[derive(Clone, Debug)]
pub struct DiameterSampler {
    dist: LogNormal<f64>,
    lo: f64,
    hi: f64,
}

impl DiameterSampler {
    pub fn new(cfg: &PhantomConfig) -> Result<Self> {
        let (lo, hi) = (cfg.diameter_min_mm, cfg.diameter_max_mm);
        let (mu, s) = fit_truncated_lognormal(cfg.diameter_mean_mm, cfg.diameter_median_mm, lo, hi);
        let dist = LogNormal::new(mu, s).map_err(|e| Error::InvalidPhantom(format!("diameter distribution: {e}")))?;
        Ok(Self { dist, lo, hi })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        loop {
            let d = self.dist.sample(rng);
            if d >= self.lo && d <= self.hi {
                return d;
            }
        }
    }
}

/// One planned lesion: integer voxel center, diameter and contrast.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionSpec {
    pub center_vox: [usize; 3],
    pub diameter_mm: f64,
    pub contrast: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VesselSpec {
    pub vertices: Vec<[f64; 3]>,
    pub radius_mm: f64,
    pub contrast: f64,
}

/// Everything that defines a dataset except its noise.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub lesions: Vec<LesionSpec>,
    pub vessels: Vec<VesselSpec>,
    pub bias: [f64; 6],
}

fn lesion_count<R: Rng + ?Sized>(cfg: &PhantomConfig, rng: &mut R) -> usize {
    if cfg.lesions_mean == 0.0 {
        return 0;
    }
    let k: f64 = Poisson::new(cfg.lesions_mean).expect("positive mean").sample(rng);
    (k as usize).min(cfg.lesions_max)
}

fn fits(cfg: &PhantomConfig, placed: &[LesionSpec], c: [usize; 3], d: f64) -> bool {
    let reach = (0.5 * d).ceil() as usize + cfg.border_margin_vox;
    if (0..3).any(|a| c[a] < reach || c[a] + reach >= cfg.dims[a]) {
        return false;
    }
    placed.iter().all(|o| {
        let dist = (0..3).map(|a| (c[a] as f64 - o.center_vox[a] as f64).powi(2)).sum::<f64>().sqrt();
        dist >= d.max(o.diameter_mm) && dist >= 0.5 * (d + o.diameter_mm) + 2.0
    })
}

fn place_lesions<R: Rng + ?Sized>(cfg: &PhantomConfig, sizes: &DiameterSampler, rng: &mut R) -> Result<Vec<LesionSpec>> {
    const ROUNDS: usize = 50;
    for _ in 0..ROUNDS {
        let n = lesion_count(cfg, rng);
        let mut placed: Vec<LesionSpec> = Vec::with_capacity(n);
        'lesion: for _ in 0..n {
            let d = sizes.sample(rng);
            let contrast = rng.random_range(cfg.contrast_lo..=cfg.contrast_hi);
            for _ in 0..cfg.placement_attempts {
                let c = [0, 1, 2].map(|a| rng.random_range(0..cfg.dims[a]));
                if fits(cfg, &placed, c, d) {
                    placed.push(LesionSpec { center_vox: c, diameter_mm: d, contrast });
                    continue 'lesion;
                }
            }
            break;
        }
        if placed.len() == n {
            return Ok(placed);
        }
    }
    Err(Error::PlacementFailure(ROUNDS))
}

fn random_vessel<R: Rng + ?Sized>(cfg: &PhantomConfig, rng: &mut R) -> VesselSpec {
    let n_vertices = rng.random_range(3..=5);
    let vertices = (0..n_vertices).map(|_| [0, 1, 2].map(|a| rng.random_range(0.0..(cfg.dims[a] - 1) as f64))).collect();
    VesselSpec {
        vertices,
        radius_mm: rng.random_range(cfg.vessel_radius_lo_mm..=cfg.vessel_radius_hi_mm),
        contrast: rng.random_range(cfg.contrast_lo..=cfg.contrast_hi),
    }
}

pub fn random_layout<R: Rng + ?Sized>(cfg: &PhantomConfig, rng: &mut R) -> Result<Layout> {
    cfg.validate()?;
    layout_with(cfg, &DiameterSampler::new(cfg)?, rng)
}

fn layout_with<R: Rng + ?Sized>(cfg: &PhantomConfig, sizes: &DiameterSampler, rng: &mut R) -> Result<Layout> {
    let lesions = place_lesions(cfg, sizes, rng)?;
    let vessels = (0..cfg.n_vessels).map(|_| random_vessel(cfg, rng)).collect();
    let mut bias = [0.0; 6];
    for b in &mut bias[..3] {
        *b = rng.random_range(-1.0..=1.0);
    }
    for b in &mut bias[3..] {
        *b = rng.random_range(0.0..std::f64::consts::TAU);
    }
    Ok(Layout { lesions, vessels, bias })
}

/// Follow-up variant of a layout: each lesion moves by at most one voxel per
/// axis when the move keeps every placement constraint.
pub fn jitter_layout<R: Rng + ?Sized>(cfg: &PhantomConfig, base: &Layout, rng: &mut R) -> Layout {
    let mut lesions = base.lesions.clone();
    for k in 0..lesions.len() {
        let shift = [0, 1, 2].map(|_| rng.random_range(-1i64..=1));
        let old = lesions[k];
        let c = [0, 1, 2].map(|a| (old.center_vox[a] as i64 + shift[a]).max(0) as usize);
        let others: Vec<LesionSpec> = lesions.iter().enumerate().filter(|&(j, _)| j != k).map(|(_, l)| *l).collect();
        if fits(cfg, &others, c, old.diameter_mm) {
            lesions[k].center_vox = c;
        }
    }
    Layout { lesions, ..base.clone() }
}

/// Raised-cosine bump: 1 at the center, 0 at `r >= outer`.
fn bump(r: f64, outer: f64) -> f64 {
    if r >= outer {
        0.0
    } else {
        0.5 * (1.0 + (std::f64::consts::PI * r / outer).cos())
    }
}

fn segment_distance(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let len2 = ab.iter().map(|v| v * v).sum::<f64>();
    let t = if len2 > 0.0 { (ab.iter().zip(&ap).map(|(u, v)| u * v).sum::<f64>() / len2).clamp(0.0, 1.0) } else { 0.0 };
    (0..3).map(|i| (ap[i] - t * ab[i]).powi(2)).sum::<f64>().sqrt()
}

fn bias_field(cfg: &PhantomConfig, layout: &Layout, x: usize, y: usize, z: usize) -> f64 {
    let p = [x, y, z];
    let norm = layout.bias[..3].iter().map(|c| c.abs()).sum::<f64>().max(1.0);
    let s: f64 = (0..3)
        .map(|a| {
            let u = p[a] as f64 / (cfg.dims[a] - 1) as f64;
            layout.bias[a] * (std::f64::consts::PI * u + layout.bias[3 + a]).cos()
        })
        .sum();
    1.0 + cfg.bias_amplitude * s / norm
}

/// Noise-free intensities, the local background and the lesion mask.
pub fn render_clean(cfg: &PhantomConfig, layout: &Layout) -> Result<(Volume3, Volume3, Mask3)> {
    let dims = cfg.dims;
    let n = dims.iter().product();
    let mut background = vec![0f32; n];
    let mut clean = vec![0f64; n];
    let mut i = 0;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let b = cfg.background * bias_field(cfg, layout, x, y, z);
                background[i] = b as f32;
                clean[i] = b;
                i += 1;
            }
        }
    }

    let mut vessel = vec![0f64; n];
    for v in &layout.vessels {
        let outer = 2.0 * v.radius_mm;
        for w in v.vertices.windows(2) {
            let (a, b) = (w[0], w[1]);
            let lo = [0, 1, 2].map(|k| (a[k].min(b[k]) - outer).floor().max(0.0) as usize);
            let hi = [0, 1, 2].map(|k| ((a[k].max(b[k]) + outer).ceil() as usize).min(dims[k] - 1));
            for z in lo[2]..=hi[2] {
                for y in lo[1]..=hi[1] {
                    for x in lo[0]..=hi[0] {
                        let r = segment_distance([x as f64, y as f64, z as f64], a, b);
                        let idx = x + dims[0] * (y + dims[1] * z);
                        vessel[idx] = vessel[idx].max(v.contrast * bump(r, outer));
                    }
                }
            }
        }
    }
    for (c, v) in clean.iter_mut().zip(&vessel) {
        *c += v;
    }

    let mut mask = vec![0u8; n];
    for l in &layout.lesions {
        let outer = l.diameter_mm;
        let reach = outer.ceil() as i64;
        let c = l.center_vox.map(|v| v as i64);
        for z in (c[2] - reach).max(0)..=(c[2] + reach).min(dims[2] as i64 - 1) {
            for y in (c[1] - reach).max(0)..=(c[1] + reach).min(dims[1] as i64 - 1) {
                for x in (c[0] - reach).max(0)..=(c[0] + reach).min(dims[0] as i64 - 1) {
                    let r = (((x - c[0]).pow(2) + (y - c[1]).pow(2) + (z - c[2]).pow(2)) as f64).sqrt();
                    let idx = x as usize + dims[0] * (y as usize + dims[1] * z as usize);
                    clean[idx] += l.contrast * bump(r, outer);
                    if r <= 0.5 * outer {
                        mask[idx] = 1;
                    }
                }
            }
        }
    }

    let spacing = [1.0; 3];
    Ok((
        Volume3::new(dims, spacing, clean.into_iter().map(|v| v as f32).collect())?,
        Volume3::new(dims, spacing, background)?,
        Mask3::new(dims, spacing, mask)?,
    ))
}

/// Noisy, clamped volume with its mask and lesion records.
pub fn render<R: Rng + ?Sized>(cfg: &PhantomConfig, layout: &Layout, rng: &mut R) -> Result<(Volume3, Mask3, Vec<LesionRecord>)> {
    let (clean, _, mask) = render_clean(cfg, layout)?;
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::InvalidPhantom(format!("noise: {e}")))?;
    let voxels = clean.voxels().iter().map(|&v| (v as f64 + noise.sample(rng)).clamp(0.0, 1.0) as f32).collect();
    let volume = Volume3::new(cfg.dims, [1.0; 3], voxels)?;
    let lesions = connected_components(&mask);
    Ok((volume, mask, lesions))
}

pub fn generate_dataset<R: Rng + ?Sized>(cfg: &PhantomConfig, rng: &mut R) -> Result<(Volume3, Mask3, Vec<LesionRecord>)> {
    let layout = random_layout(cfg, rng)?;
    render(cfg, &layout, rng)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomDataset {
    pub dataset_id: String,
    pub seed: u64,
    pub volume: Volume3,
    pub mask: Mask3,
    pub lesions: Vec<LesionRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomPatient {
    pub patient_id: String,
    pub seed: u64,
    pub datasets: Vec<PhantomDataset>,
}

pub fn patient_id(k: usize) -> String {
    format!("p{k:03}")
}

pub fn dataset_id(k: usize) -> String {
    format!("d{k}")
}

fn generate_patient(cfg: &PhantomConfig, sizes: &DiameterSampler, k: usize, seed: u64) -> Result<PhantomPatient> {
    let mut r = rng::seeded(seed);
    let n_datasets = WeightedIndex::new(DATASETS_PER_PATIENT_WEIGHTS).expect("positive weights").sample(&mut r) + 1;
    let base = layout_with(cfg, sizes, &mut r)?;
    let datasets = (0..n_datasets)
        .map(|d| {
            let ds_seed = rng::derive_seed(seed, &[d as u64]);
            let mut dr = rng::seeded(ds_seed);
            let layout = if d == 0 { base.clone() } else { jitter_layout(cfg, &base, &mut dr) };
            let (volume, mask, lesions) = render(cfg, &layout, &mut dr)?;
            Ok(PhantomDataset { dataset_id: dataset_id(d), seed: ds_seed, volume, mask, lesions })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PhantomPatient { patient_id: patient_id(k), seed, datasets })
}

/// Cohort of `n_patients`; patients are generated from independent streams
/// split off one draw of `rng`, so the result does not depend on threading.
pub fn generate_cohort<R: Rng + ?Sized>(n_patients: usize, cfg: &PhantomConfig, rng: &mut R) -> Result<Vec<PhantomPatient>> {
    cfg.validate()?;
    if n_patients == 0 {
        return Err(Error::InvalidPhantom("n_patients must be >= 1".into()));
    }
    let sizes = DiameterSampler::new(cfg)?;
    let root: u64 = rng.random();
    par::map_range(n_patients, |k| generate_patient(cfg, &sizes, k, rng::derive_seed(root, &[k as u64]))).into_iter().collect()
}

// ---- cohort files ----

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionSummary {
    pub id: usize,
    pub center_mm: [f64; 3],
    pub volume_mm3: f64,
    pub equivalent_diameter_mm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub dataset_id: String,
    pub seed: u64,
    pub lesions: Vec<LesionSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientEntry {
    pub patient_id: String,
    pub seed: u64,
    pub datasets: Vec<DatasetEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub seed: u64,
    pub config: PhantomConfig,
    pub contrast_model: String,
    pub patients: Vec<PatientEntry>,
}

fn dataset_dir(root: &Path, patient: &str, dataset: &str) -> PathBuf {
    root.join(patient).join(dataset)
}

/// Writes `<root>/<patient>/<dataset>/{volume,mask}.{json,raw}` and
/// `<root>/manifest.json`.
pub fn write_cohort(root: &Path, patients: &[PhantomPatient], cfg: &PhantomConfig, seed: u64) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut entries = Vec::with_capacity(patients.len());
    for p in patients {
        let mut datasets = Vec::with_capacity(p.datasets.len());
        for d in &p.datasets {
            let dir = dataset_dir(root, &p.patient_id, &d.dataset_id);
            save_volume(&d.volume, &dir.join("volume"))?;
            save_mask(&d.mask, &dir.join("mask"))?;
            datasets.push(DatasetEntry {
                dataset_id: d.dataset_id.clone(),
                seed: d.seed,
                lesions: d
                    .lesions
                    .iter()
                    .map(|l| LesionSummary {
                        id: l.id,
                        center_mm: l.center_mm,
                        volume_mm3: l.volume_mm3,
                        equivalent_diameter_mm: l.equivalent_diameter_mm,
                    })
                    .collect(),
            });
        }
        entries.push(PatientEntry { patient_id: p.patient_id.clone(), seed: p.seed, datasets });
    }
    let manifest = CohortManifest {
        seed,
        config: cfg.clone(),
        contrast_model: format!(
            "lesion and vessel contrast uniform in [{}, {}] above local background (modeling choice)",
            cfg.contrast_lo, cfg.contrast_hi
        ),
        patients: entries,
    };
    let path = root.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(root: &Path) -> Result<CohortManifest> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Malformed { path, detail: e.to_string() })
}

/// Loads a cohort written by [`write_cohort`]; lesion records are recomputed
/// from the masks.
pub fn read_cohort(root: &Path) -> Result<Vec<PhantomPatient>> {
    let manifest = read_manifest(root)?;
    manifest
        .patients
        .iter()
        .map(|p| {
            let datasets = p
                .datasets
                .iter()
                .map(|d| {
                    let dir = dataset_dir(root, &p.patient_id, &d.dataset_id);
                    let volume = load_volume(&dir.join("volume"))?;
                    let mask = load_mask(&dir.join("mask"))?;
                    if !volume.same_frame(&mask) {
                        return Err(Error::FrameMismatch(format!("{}/{}", p.patient_id, d.dataset_id)));
                    }
                    let lesions = connected_components(&mask);
                    Ok(PhantomDataset { dataset_id: d.dataset_id.clone(), seed: d.seed, volume, mask, lesions })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(PhantomPatient { patient_id: p.patient_id.clone(), seed: p.seed, datasets })
        })
        .collect()
}
