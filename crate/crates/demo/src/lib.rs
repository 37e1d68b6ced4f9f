//! Browser bindings for three interactive operations on a synthetic scan:
//! generating a phantom, running blob candidate selection and augmenting a
//! training crop around a chosen point.

use lesiondet::augment::AugmentConfig;
use lesiondet::error::Result;
use lesiondet::phantom::{generate_dataset, PhantomConfig};
use lesiondet::rng;
use lesiondet::scalespace::{candidate_sensitivity, detect_blobs, Candidate, ScaleSpaceParams};
use lesiondet::trainer::augmented_crop;
use lesiondet::volume::{LesionRecord, Mask3, Volume3};
use wasm_bindgen::prelude::*;

/// Edge of the network input crop in millimetres.
pub const CROP_EDGE: usize = 16;

fn js(e: lesiondet::error::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Grayscale RGBA pixels of slice `z`, intensities mapped from `[lo, hi]`.
/// Voxels flagged by `mask` are tinted red.
pub fn slice_rgba(v: &Volume3, mask: Option<&Mask3>, z: usize, lo: f32, hi: f32) -> Vec<u8> {
    let [nx, ny, nz] = v.dims();
    let z = z.min(nz - 1);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = Vec::with_capacity(nx * ny * 4);
    for y in 0..ny {
        for x in 0..nx {
            let g = (((v.get(x, y, z) - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8;
            if mask.is_some_and(|m| m.get(x, y, z)) {
                out.extend_from_slice(&[g.saturating_add(90), g / 2, g / 2, 255]);
            } else {
                out.extend_from_slice(&[g, g, g, 255]);
            }
        }
    }
    out
}

/// Candidates whose blob sphere intersects slice `z`, as flat
/// `x, y, radius_in_slice` triples in voxels.
pub fn candidates_in_slice(cands: &[Candidate], spacing_mm: f64, z: usize) -> Vec<f64> {
    cands
        .iter()
        .filter_map(|c| {
            let radius = c.sigma_mm * 3f64.sqrt() / spacing_mm;
            let dz = c.position_mm[2] / spacing_mm - z as f64;
            (dz.abs() <= radius).then(|| {
                [c.position_mm[0] / spacing_mm, c.position_mm[1] / spacing_mm, (radius * radius - dz * dz).sqrt().max(1.0)]
            })
        })
        .flatten()
        .collect()
}

/// One synthetic scan with its ground truth and the latest candidates.
#[wasm_bindgen]
pub struct Scan {
    volume: Volume3,
    mask: Mask3,
    lesions: Vec<LesionRecord>,
    candidates: Vec<Candidate>,
    range: (f32, f32),
}

impl Scan {
    pub fn generate(seed: u32, lesions_mean: f64, noise_sigma: f64) -> Result<Self> {
        let cfg = PhantomConfig { lesions_mean, noise_sigma, ..PhantomConfig::default() };
        cfg.validate()?;
        let (volume, mask, lesions) = generate_dataset(&cfg, &mut rng::seeded(seed as u64))?;
        let range = volume.min_max();
        Ok(Self { volume, mask, lesions, candidates: Vec::new(), range })
    }

    pub fn run_detection(&mut self, p: &ScaleSpaceParams) -> Result<f64> {
        self.candidates = detect_blobs(&self.volume, p)?;
        candidate_sensitivity(&[(&self.candidates, &self.mask, &self.lesions)])
    }

    pub fn crop(&self, x: usize, y: usize, z: usize, seed: u32, aug: &AugmentConfig) -> Result<Volume3> {
        let s = self.volume.spacing_mm()[0];
        let center = [x as f64 * s, y as f64 * s, z as f64 * s];
        augmented_crop(&self.volume, center, aug, &mut rng::seeded(seed as u64))
    }

    pub fn candidates(&self) -> &[Candidate] {
        &self.candidates
    }
}

#[wasm_bindgen]
impl Scan {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, lesions_mean: f64, noise_sigma: f64) -> std::result::Result<Scan, JsError> {
        Self::generate(seed, lesions_mean, noise_sigma).map_err(js)
    }

    pub fn edge(&self) -> usize {
        self.volume.dims()[0]
    }

    #[wasm_bindgen(js_name = lesionCount)]
    pub fn lesion_count(&self) -> usize {
        self.lesions.len()
    }

    /// Z index of the centroid of each lesion.
    #[wasm_bindgen(js_name = lesionSlices)]
    pub fn lesion_slices(&self) -> Vec<u32> {
        let s = self.volume.spacing_mm()[2];
        self.lesions.iter().map(|l| (l.center_mm[2] / s).round() as u32).collect()
    }

    pub fn slice(&self, z: usize, show_mask: bool) -> Vec<u8> {
        slice_rgba(&self.volume, show_mask.then_some(&self.mask), z, self.range.0, self.range.1)
    }

    /// Runs candidate selection; returns the fraction of lesions hit.
    pub fn detect(
        &mut self,
        sigma_min_mm: f64,
        sigma_max_mm: f64,
        n_scales: usize,
        threshold: f64,
    ) -> std::result::Result<f64, JsError> {
        let p = ScaleSpaceParams { sigma_min_mm, sigma_max_mm, n_scales, log_threshold: threshold };
        self.run_detection(&p).map_err(js)
    }

    #[wasm_bindgen(js_name = candidateCount)]
    pub fn candidate_count(&self) -> usize {
        self.candidates.len()
    }

    #[wasm_bindgen(js_name = candidatesInSlice)]
    pub fn candidates_in_slice(&self, z: usize) -> Vec<f64> {
        candidates_in_slice(&self.candidates, self.volume.spacing_mm()[0], z)
    }

    /// Middle slice of a network crop centered on voxel `(x, y, z)`. With
    /// every option off this is the plain crop seen at detection time.
    #[wasm_bindgen(js_name = cropSlice)]
    #[allow(clippy::too_many_arguments)]
    pub fn crop_slice(
        &self,
        x: usize,
        y: usize,
        z: usize,
        seed: u32,
        alpha: f64,
        gamma_spread: f64,
        flips: bool,
        rotation: bool,
    ) -> std::result::Result<Vec<u8>, JsError> {
        let aug = AugmentConfig {
            alpha,
            gamma_lo: 1.0 - gamma_spread,
            gamma_hi: 1.0 + gamma_spread,
            enable_flips: flips,
            enable_rotation: rotation,
            crop_edge_mm: CROP_EDGE,
            ..AugmentConfig::default()
        };
        aug.validate().map_err(js)?;
        let crop = self.crop(x, y, z, seed, &aug).map_err(js)?;
        Ok(slice_rgba(&crop, None, CROP_EDGE / 2, 0.0, 1.0))
    }
}
