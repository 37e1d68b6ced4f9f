//! Gaussian scale space and scale-normalized Laplacian blob detection.
//!
//! Blob candidates are strict extrema of `σ²·∇²L` jointly over space and a
//! geometric ladder of scales. `tune_parameters` picks the ladder and the
//! response threshold that yield the fewest candidates while keeping lesion
//! sensitivity on the training data at or above a floor.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::simd::dispatch;
use crate::volume::{connected_components, linear_index, Dims, LabelMap, LesionRecord, Mask3, Volume3};

/// Sampled, sum-normalized Gaussian truncated at `ceil(3σ)` voxels.
pub fn gaussian_kernel(sigma_vox: f64) -> Vec<f32> {
    if sigma_vox <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma_vox).ceil() as i64;
    let w: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma_vox * sigma_vox)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| (x / s) as f32).collect()
}

/// Half-sample symmetric boundary: `-1 -> 0`, `n -> n - 1`, periodic in `2n`.
#[inline]
pub(crate) fn mirror(i: i64, n: usize) -> usize {
    let n = n as i64;
    let m = i.rem_euclid(2 * n);
    (if m >= n { 2 * n - 1 - m } else { m }) as usize
}

/// Source index for each position of an axis padded by `r` on both sides.
fn mirror_table(n: usize, r: usize) -> Vec<usize> {
    (0..n + 2 * r).map(|j| mirror(j as i64 - r as i64, n)).collect()
}

/// `out[j] = Σ_t k[t]·row(t)[j]`, summed over taps in order from zero,
/// with accumulators held in registers.
#[inline(always)]
fn tap_sum<'a>(out: &mut [f32], k: &[f32], row: impl Fn(usize) -> &'a [f32]) {
    #[inline(always)]
    fn chunk<'a, const C: usize>(out: &mut [f32], j0: usize, k: &[f32], row: &impl Fn(usize) -> &'a [f32]) {
        let mut acc = [0f32; C];
        for (t, &w) in k.iter().enumerate() {
            let r: &[f32; C] = row(t)[j0..j0 + C].try_into().expect("row spans the chunk");
            for (a, &v) in acc.iter_mut().zip(r) {
                *a += w * v;
            }
        }
        out[j0..j0 + C].copy_from_slice(&acc);
    }
    let n = out.len();
    let mut j0 = 0;
    while j0 + 32 <= n {
        chunk::<32>(out, j0, k, &row);
        j0 += 32;
    }
    while j0 + 8 <= n {
        chunk::<8>(out, j0, k, &row);
        j0 += 8;
    }
    while j0 < n {
        chunk::<1>(out, j0, k, &row);
        j0 += 1;
    }
}

pub(crate) fn convolve_x(src: &[f32], dst: &mut [f32], dims: Dims, k: &[f32]) {
    dispatch!(convolve_x_avx2, convolve_x_body, src, dst, dims, k)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn convolve_x_avx2(src: &[f32], dst: &mut [f32], dims: Dims, k: &[f32]) {
    convolve_x_body(src, dst, dims, k)
}

#[inline(always)]
fn convolve_x_body(src: &[f32], dst: &mut [f32], dims: Dims, k: &[f32]) {
    let nx = dims[0];
    let idx = mirror_table(nx, k.len() / 2);
    let mut buf = vec![0f32; idx.len()];
    for (row_in, row_out) in src.chunks_exact(nx).zip(dst.chunks_exact_mut(nx)) {
        for (b, &j) in buf.iter_mut().zip(&idx) {
            *b = row_in[j];
        }
        tap_sum(row_out, k, |t| &buf[t..]);
    }
}

pub(crate) fn convolve_y(src: &[f32], dst: &mut [f32], dims: Dims, k: &[f32]) {
    dispatch!(convolve_y_avx2, convolve_y_body, src, dst, dims, k)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn convolve_y_avx2(src: &[f32], dst: &mut [f32], dims: Dims, k: &[f32]) {
    convolve_y_body(src, dst, dims, k)
}

#[inline(always)]
fn convolve_y_body(src: &[f32], dst: &mut [f32], dims: Dims, k: &[f32]) {
    let [nx, ny, _] = dims;
    let idx = mirror_table(ny, k.len() / 2);
    let plane = nx * ny;
    for (p_in, p_out) in src.chunks_exact(plane).zip(dst.chunks_exact_mut(plane)) {
        for (y, out) in p_out.chunks_exact_mut(nx).enumerate() {
            tap_sum(out, k, |t| &p_in[idx[y + t] * nx..]);
        }
    }
}

pub(crate) fn convolve_z(src: &[f32], dst: &mut [f32], dims: Dims, k: &[f32]) {
    dispatch!(convolve_z_avx2, convolve_z_body, src, dst, dims, k)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn convolve_z_avx2(src: &[f32], dst: &mut [f32], dims: Dims, k: &[f32]) {
    convolve_z_body(src, dst, dims, k)
}

#[inline(always)]
fn convolve_z_body(src: &[f32], dst: &mut [f32], dims: Dims, k: &[f32]) {
    let [nx, ny, _] = dims;
    let plane = nx * ny;
    let idx = mirror_table(dims[2], k.len() / 2);
    for (z, out) in dst.chunks_exact_mut(plane).enumerate() {
        tap_sum(out, k, |t| &src[idx[z + t] * plane..]);
    }
}

/// Separable blur of a raw buffer; `sigma_vox` in voxel units.
pub(crate) fn blur_buffer(data: &[f32], dims: Dims, sigma_vox: f64) -> Vec<f32> {
    if sigma_vox == 0.0 {
        return data.to_vec();
    }
    let k = gaussian_kernel(sigma_vox);
    let mut a = vec![0f32; data.len()];
    let mut b = vec![0f32; data.len()];
    convolve_x(data, &mut a, dims, &k);
    convolve_y(&a, &mut b, dims, &k);
    convolve_z(&b, &mut a, dims, &k);
    a
}

pub fn gaussian_blur(v: &Volume3, sigma_mm: f64) -> Result<Volume3> {
    if sigma_mm < 0.0 || sigma_mm.is_nan() {
        return Err(Error::NegativeSigma(sigma_mm));
    }
    let s = v.isotropic_spacing()?;
    if sigma_mm == 0.0 {
        return Ok(v.clone());
    }
    Ok(Volume3::from_parts(v.dims(), v.spacing_mm(), blur_buffer(v.voxels(), v.dims(), sigma_mm / s)))
}

/// `σ² (Lxx + Lyy + Lzz)` of a buffer with central differences and mirror
/// boundaries; `scale` is `σ² / spacing²`.
fn normalized_laplacian_buffer(l: &[f32], dims: Dims, scale: f32) -> Vec<f32> {
    let [nx, ny, nz] = dims;
    let plane = nx * ny;
    let mut out = vec![0f32; l.len()];
    for z in 0..nz {
        let zm = mirror(z as i64 - 1, nz) * plane;
        let zp = mirror(z as i64 + 1, nz) * plane;
        for y in 0..ny {
            let ym = mirror(y as i64 - 1, ny) * nx;
            let yp = mirror(y as i64 + 1, ny) * nx;
            let row = z * plane + y * nx;
            for x in 0..nx {
                let xm = mirror(x as i64 - 1, nx);
                let xp = mirror(x as i64 + 1, nx);
                let c = l[row + x];
                let d = (l[row + xm] - 2.0 * c + l[row + xp])
                    + (l[z * plane + ym + x] - 2.0 * c + l[z * plane + yp + x])
                    + (l[zm + y * nx + x] - 2.0 * c + l[zp + y * nx + x]);
                out[row + x] = scale * d;
            }
        }
    }
    out
}

fn response_layer(v: &Volume3, spacing: f64, sigma_mm: f64) -> Vec<f32> {
    let l = blur_buffer(v.voxels(), v.dims(), sigma_mm / spacing);
    normalized_laplacian_buffer(&l, v.dims(), (sigma_mm * sigma_mm / (spacing * spacing)) as f32)
}

pub fn scale_normalized_laplacian(v: &Volume3, sigma_mm: f64) -> Result<Volume3> {
    if sigma_mm.is_nan() || sigma_mm <= 0.0 {
        return Err(Error::NegativeSigma(sigma_mm));
    }
    let s = v.isotropic_spacing()?;
    Ok(Volume3::from_parts(v.dims(), v.spacing_mm(), response_layer(v, s, sigma_mm)))
}

/// Candidate-selection parameters: a geometric ladder of scales plus an
/// absolute lower bound on the response magnitude.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleSpaceParams {
    pub sigma_min_mm: f64,
    pub sigma_max_mm: f64,
    pub n_scales: usize,
    pub log_threshold: f64,
}

impl Default for ScaleSpaceParams {
    fn default() -> Self {
        Self { sigma_min_mm: 1.0, sigma_max_mm: 4.0, n_scales: 4, log_threshold: 0.01 }
    }
}

impl ScaleSpaceParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        if !(self.sigma_min_mm > 0.0 && self.sigma_min_mm.is_finite()) {
            return bad(format!("sigma_min_mm {} must be > 0", self.sigma_min_mm));
        }
        if !(self.sigma_max_mm >= self.sigma_min_mm && self.sigma_max_mm.is_finite()) {
            return bad(format!("sigma_max_mm {} < sigma_min_mm {}", self.sigma_max_mm, self.sigma_min_mm));
        }
        if self.n_scales == 0 {
            return bad("n_scales must be >= 1".into());
        }
        if self.sigma_max_mm > self.sigma_min_mm && self.n_scales < 2 {
            return bad("n_scales must be >= 2 when sigma_min < sigma_max".into());
        }
        if !(self.log_threshold >= 0.0 && self.log_threshold.is_finite()) {
            return bad(format!("log_threshold {} must be >= 0", self.log_threshold));
        }
        Ok(())
    }

    /// Geometrically spaced scales from `sigma_min_mm` to `sigma_max_mm`.
    pub fn sigmas(&self) -> Vec<f64> {
        if self.n_scales == 1 {
            return vec![self.sigma_min_mm];
        }
        let ratio = self.sigma_max_mm / self.sigma_min_mm;
        let last = (self.n_scales - 1) as f64;
        (0..self.n_scales)
            .map(|k| match k {
                0 => self.sigma_min_mm,
                k if k + 1 == self.n_scales => self.sigma_max_mm,
                k => self.sigma_min_mm * ratio.powf(k as f64 / last),
            })
            .collect()
    }
}

/// The default tuning grid: 3 × 3 × 2 × 4 = 72 points, in nested order
/// `sigma_min`, `sigma_max`, `n_scales`, `log_threshold`.
pub fn default_grid() -> Vec<ScaleSpaceParams> {
    let mut grid = Vec::new();
    for sigma_min_mm in [1.0, 1.5, 2.0] {
        for sigma_max_mm in [4.0, 6.0, 8.0] {
            for n_scales in [4, 6] {
                for log_threshold in [0.005, 0.01, 0.02, 0.04] {
                    grid.push(ScaleSpaceParams { sigma_min_mm, sigma_max_mm, n_scales, log_threshold });
                }
            }
        }
    }
    grid
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub position_mm: [f64; 3],
    pub sigma_mm: f64,
    pub response: f32,
    pub voxel: [usize; 3],
    pub scale_index: usize,
}

/// Response volumes for a ladder of scales.
pub struct ResponseStack {
    pub sigmas: Vec<f64>,
    pub dims: Dims,
    pub spacing_mm: [f64; 3],
    pub layers: Vec<Vec<f32>>,
}

impl ResponseStack {
    pub fn compute(v: &Volume3, sigmas: &[f64]) -> Result<Self> {
        let s = v.isotropic_spacing()?;
        if let Some(&bad) = sigmas.iter().find(|&&x| x.is_nan() || x <= 0.0) {
            return Err(Error::NegativeSigma(bad));
        }
        let layers = par::map(sigmas, |&sigma| response_layer(v, s, sigma));
        Ok(Self { sigmas: sigmas.to_vec(), dims: v.dims(), spacing_mm: v.spacing_mm(), layers })
    }

    pub fn at(&self, scale: usize, voxel: [usize; 3]) -> f32 {
        self.layers[scale][linear_index(self.dims, voxel[0], voxel[1], voxel[2])]
    }

    pub fn extrema(&self, threshold: f64) -> Vec<Candidate> {
        let layers: Vec<&[f32]> = self.layers.iter().map(|l| l.as_slice()).collect();
        find_extrema(&layers, &self.sigmas, self.dims, self.spacing_mm, threshold)
    }
}

/// Strict space-scale extrema with `|response| >= threshold`, sorted by
/// descending magnitude, then linear voxel index, then scale index.
///
/// Under mirror extension a border voxel's outside neighbor equals the voxel
/// itself, so border voxels are never strict extrema and are skipped.
fn find_extrema(layers: &[&[f32]], sigmas: &[f64], dims: Dims, spacing: [f64; 3], threshold: f64) -> Vec<Candidate> {
    let [nx, ny, nz] = dims;
    if nx < 3 || ny < 3 || nz < 3 {
        return Vec::new();
    }
    let plane = (nx * ny) as isize;
    let mut offsets = Vec::with_capacity(26);
    for dz in -1isize..=1 {
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                if (dx, dy, dz) != (0, 0, 0) {
                    offsets.push(dx + dy * nx as isize + dz * plane);
                }
            }
        }
    }
    let thr = threshold as f32;
    let per_scale = par::map_range(layers.len(), |k| {
        let cur = layers[k];
        let below = (k > 0).then(|| layers[k - 1]);
        let above = layers.get(k + 1).copied();
        let mut found = Vec::new();
        for z in 1..nz - 1 {
            for y in 1..ny - 1 {
                for x in 1..nx - 1 {
                    let i = linear_index(dims, x, y, z);
                    let r = cur[i];
                    if r.abs() < thr || r.is_nan() {
                        continue;
                    }
                    let ii = i as isize;
                    let is_max = offsets.iter().all(|&o| cur[(ii + o) as usize] < r)
                        && [below, above].iter().flatten().all(|l| l[i] < r && offsets.iter().all(|&o| l[(ii + o) as usize] < r));
                    let is_min = !is_max
                        && offsets.iter().all(|&o| cur[(ii + o) as usize] > r)
                        && [below, above].iter().flatten().all(|l| l[i] > r && offsets.iter().all(|&o| l[(ii + o) as usize] > r));
                    if is_max || is_min {
                        found.push(Candidate {
                            position_mm: [x as f64 * spacing[0], y as f64 * spacing[1], z as f64 * spacing[2]],
                            sigma_mm: sigmas[k],
                            response: r,
                            voxel: [x, y, z],
                            scale_index: k,
                        });
                    }
                }
            }
        }
        found
    });
    let mut all: Vec<Candidate> = per_scale.into_iter().flatten().collect();
    sort_candidates(&mut all, dims);
    all
}

pub(crate) fn sort_candidates(c: &mut [Candidate], dims: Dims) {
    c.sort_by(|a, b| {
        b.response
            .abs()
            .total_cmp(&a.response.abs())
            .then_with(|| {
                linear_index(dims, a.voxel[0], a.voxel[1], a.voxel[2])
                    .cmp(&linear_index(dims, b.voxel[0], b.voxel[1], b.voxel[2]))
            })
            .then_with(|| a.scale_index.cmp(&b.scale_index))
    });
}

pub fn detect_blobs(v: &Volume3, p: &ScaleSpaceParams) -> Result<Vec<Candidate>> {
    p.validate()?;
    let stack = ResponseStack::compute(v, &p.sigmas())?;
    Ok(stack.extrema(p.log_threshold))
}

/// Per-lesion hit flags: a lesion is hit when some candidate's nearest voxel
/// lies inside its component.
pub fn lesions_hit(cands: &[Candidate], labels: &LabelMap) -> Result<Vec<bool>> {
    let mut hit = vec![false; labels.n_lesions()];
    for c in cands {
        if let Some(l) = labels.lesion_at(c.position_mm)? {
            hit[l] = true;
        }
    }
    Ok(hit)
}

/// Fraction of lesions, pooled over datasets, hit by at least one candidate.
/// Returns 1.0 when there are no lesions at all.
pub fn candidate_sensitivity(per_dataset: &[(&[Candidate], &Mask3, &[LesionRecord])]) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (cands, mask, lesions) in per_dataset {
        let labels = LabelMap::new(mask, lesions)?;
        let h = lesions_hit(cands, &labels)?;
        hits += h.iter().filter(|&&b| b).count();
        total += h.len();
    }
    Ok(if total == 0 { 1.0 } else { hits as f64 / total as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridEvaluation {
    pub params: ScaleSpaceParams,
    pub sensitivity: f64,
    pub mean_candidates: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneOutcome {
    pub params: ScaleSpaceParams,
    pub sensitivity: f64,
    pub mean_candidates: f64,
    pub evaluations: Vec<GridEvaluation>,
}

/// What one ladder of scales yields on one dataset, independent of the
/// threshold: candidate magnitudes and, per lesion, the strongest hitting one.
struct LadderSummary {
    magnitudes_desc: Vec<f32>,
    lesion_best: Vec<Option<f32>>,
}

impl LadderSummary {
    fn count_at(&self, thr: f32) -> usize {
        self.magnitudes_desc.partition_point(|&m| m >= thr)
    }

    fn hits_at(&self, thr: f32) -> usize {
        self.lesion_best.iter().filter(|b| b.is_some_and(|m| m >= thr)).count()
    }
}

fn ladder_key(p: &ScaleSpaceParams) -> (u64, u64, usize) {
    (p.sigma_min_mm.to_bits(), p.sigma_max_mm.to_bits(), p.n_scales)
}

/// Grid search for the candidate-selection parameters: among grid points
/// whose pooled training sensitivity is at least `theta`, the one with the
/// fewest candidates per dataset. Ties go to higher sensitivity, then to the
/// earlier grid point.
pub fn tune_parameters(training: &[(&Volume3, &Mask3)], theta: f64, grid: &[ScaleSpaceParams]) -> Result<TuneOutcome> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::InvalidParams(format!("theta {theta} outside [0, 1]")));
    }
    if grid.is_empty() {
        return Err(Error::InvalidParams("empty grid".into()));
    }
    for p in grid {
        p.validate()?;
    }
    if training.is_empty() {
        return Err(Error::InvalidParams("no training datasets".into()));
    }
    for (v, m) in training {
        if !v.same_frame(m) {
            return Err(Error::FrameMismatch(format!(
                "volume {:?}/{:?} vs mask {:?}/{:?}",
                v.dims(),
                v.spacing_mm(),
                m.dims(),
                m.spacing_mm()
            )));
        }
    }

    let mut ladders: Vec<ScaleSpaceParams> = Vec::new();
    let mut ladder_of: HashMap<(u64, u64, usize), usize> = HashMap::new();
    for p in grid {
        ladder_of.entry(ladder_key(p)).or_insert_with(|| {
            ladders.push(*p);
            ladders.len() - 1
        });
    }

    // summaries[dataset][ladder]
    let mut summaries: Vec<Vec<LadderSummary>> = Vec::with_capacity(training.len());
    let mut total_lesions = 0usize;
    for (v, m) in training {
        let lesions = connected_components(m);
        total_lesions += lesions.len();
        let labels = LabelMap::new(m, &lesions)?;
        let mut sigma_set: Vec<f64> = ladders.iter().flat_map(|l| l.sigmas()).collect();
        sigma_set.sort_by(f64::total_cmp);
        sigma_set.dedup();
        let s = v.isotropic_spacing()?;
        let layers = par::map(&sigma_set, |&sigma| response_layer(v, s, sigma));
        let layer_of = |sigma: f64| &layers[sigma_set.binary_search_by(|x| x.total_cmp(&sigma)).expect("sigma cached")];

        let per_ladder = par::map(&ladders, |ladder| -> Result<LadderSummary> {
            let sigmas = ladder.sigmas();
            let refs: Vec<&[f32]> = sigmas.iter().map(|&sg| layer_of(sg).as_slice()).collect();
            let cands = find_extrema(&refs, &sigmas, v.dims(), v.spacing_mm(), 0.0);
            let mut lesion_best: Vec<Option<f32>> = vec![None; lesions.len()];
            for c in &cands {
                if let Some(l) = labels.lesion_at(c.position_mm)? {
                    let m = c.response.abs();
                    lesion_best[l] = Some(lesion_best[l].map_or(m, |b: f32| b.max(m)));
                }
            }
            Ok(LadderSummary { magnitudes_desc: cands.iter().map(|c| c.response.abs()).collect(), lesion_best })
        });
        summaries.push(per_ladder.into_iter().collect::<Result<_>>()?);
    }

    let n = training.len() as f64;
    let evaluations: Vec<(GridEvaluation, usize)> = grid
        .iter()
        .map(|p| {
            let li = ladder_of[&ladder_key(p)];
            let thr = p.log_threshold as f32;
            let (count, hits) = summaries
                .iter()
                .map(|s| (s[li].count_at(thr), s[li].hits_at(thr)))
                .fold((0usize, 0usize), |(c, h), (dc, dh)| (c + dc, h + dh));
            let sensitivity = if total_lesions == 0 { 1.0 } else { hits as f64 / total_lesions as f64 };
            (GridEvaluation { params: *p, sensitivity, mean_candidates: count as f64 / n }, count)
        })
        .collect();

    let best =
        evaluations.iter().enumerate().filter(|(_, (e, _))| e.sensitivity >= theta).min_by(|(ia, (a, ca)), (ib, (b, cb))| {
            ca.cmp(cb).then_with(|| b.sensitivity.total_cmp(&a.sensitivity)).then_with(|| ia.cmp(ib))
        });
    match best {
        Some((_, (e, _))) => Ok(TuneOutcome {
            params: e.params,
            sensitivity: e.sensitivity,
            mean_candidates: e.mean_candidates,
            evaluations: evaluations.iter().map(|(e, _)| e.clone()).collect(),
        }),
        None => {
            Err(Error::Infeasible { theta, best_sensitivity: evaluations.iter().map(|(e, _)| e.sensitivity).fold(0.0, f64::max) })
        }
    }
}

pub const CANDIDATE_CSV_HEADER: &str = "x_mm,y_mm,z_mm,sigma_mm,response";

pub fn write_candidates_csv(cands: &[Candidate], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "{CANDIDATE_CSV_HEADER}")?;
    for c in cands {
        let [x, y, z] = c.position_mm;
        writeln!(w, "{x},{y},{z},{},{}", c.sigma_mm, c.response)?;
    }
    Ok(())
}

pub fn save_candidates_csv(cands: &[Candidate], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_candidates_csv(cands, &mut buf).expect("write to memory");
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}
