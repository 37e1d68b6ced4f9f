//! Dense volumetric grids with physical spacing.
//!
//! Voxels are stored x-fastest, then y, then z. Physical positions use the
//! center of voxel `(0, 0, 0)` as origin, so voxel `i` along an axis sits at
//! `i * spacing` millimeters.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Dims = [usize; 3];

#[inline]
pub fn linear_index(dims: Dims, x: usize, y: usize, z: usize) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

#[inline]
pub fn unravel(dims: Dims, i: usize) -> [usize; 3] {
    let x = i % dims[0];
    let y = (i / dims[0]) % dims[1];
    let z = i / (dims[0] * dims[1]);
    [x, y, z]
}

fn check_geometry(dims: Dims, spacing_mm: [f64; 3], len: usize) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::InvalidGeometry(format!("zero dimension in {dims:?}")));
    }
    if spacing_mm.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::InvalidSpacing(format!("{spacing_mm:?}")));
    }
    let n = dims[0] * dims[1] * dims[2];
    if n != len {
        return Err(Error::InvalidGeometry(format!("dims {dims:?} need {n} voxels, got {len}")));
    }
    Ok(())
}

/// Scalar volume with physical voxel spacing.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3 {
    dims: Dims,
    spacing_mm: [f64; 3],
    voxels: Vec<f32>,
}

impl Volume3 {
    pub fn new(dims: Dims, spacing_mm: [f64; 3], voxels: Vec<f32>) -> Result<Self> {
        check_geometry(dims, spacing_mm, voxels.len())?;
        if let Some(v) = voxels.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidGeometry(format!("non-finite voxel value {v}")));
        }
        Ok(Self { dims, spacing_mm, voxels })
    }

    pub fn filled(dims: Dims, spacing_mm: [f64; 3], value: f32) -> Result<Self> {
        Self::new(dims, spacing_mm, vec![value; dims[0] * dims[1] * dims[2]])
    }

    pub fn from_fn(dims: Dims, spacing_mm: [f64; 3], mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut voxels = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    voxels.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, spacing_mm, voxels)
    }

    /// Builds a volume whose values were produced by an operation that
    /// preserves finiteness. Geometry is still validated in debug builds.
    pub(crate) fn from_parts(dims: Dims, spacing_mm: [f64; 3], voxels: Vec<f32>) -> Self {
        debug_assert!(check_geometry(dims, spacing_mm, voxels.len()).is_ok());
        Self { dims, spacing_mm, voxels }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn into_voxels(self) -> Vec<f32> {
        self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[linear_index(self.dims, x, y, z)]
    }

    pub fn is_isotropic(&self) -> bool {
        let [a, b, c] = self.spacing_mm;
        (a - b).abs() <= 1e-9 * a && (a - c).abs() <= 1e-9 * a
    }

    pub(crate) fn isotropic_spacing(&self) -> Result<f64> {
        if self.is_isotropic() {
            Ok(self.spacing_mm[0])
        } else {
            Err(Error::NotIsotropic(self.spacing_mm))
        }
    }

    pub fn is_cubic(&self) -> bool {
        self.dims[0] == self.dims[1] && self.dims[1] == self.dims[2]
    }

    pub fn same_frame(&self, mask: &Mask3) -> bool {
        self.dims == mask.dims && self.spacing_mm == mask.spacing_mm
    }

    /// Voxel nearest to a physical position, or `None` outside the grid.
    pub fn nearest_voxel(&self, position_mm: [f64; 3]) -> Option<[usize; 3]> {
        nearest_voxel(self.dims, self.spacing_mm, position_mm)
    }

    /// Trilinear sample at continuous voxel coordinates; coordinates outside
    /// the grid clamp to the nearest border voxel.
    #[inline]
    pub fn sample_clamped(&self, fx: f32, fy: f32, fz: f32) -> f32 {
        trilinear_clamped(&self.voxels, self.dims, fx, fy, fz)
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.voxels.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn sum(&self) -> f64 {
        self.voxels.iter().map(|&v| v as f64).sum()
    }
}

pub(crate) fn nearest_voxel(dims: Dims, spacing_mm: [f64; 3], p: [f64; 3]) -> Option<[usize; 3]> {
    let mut out = [0usize; 3];
    for a in 0..3 {
        let i = (p[a] / spacing_mm[a]).round();
        if !(i >= 0.0 && i < dims[a] as f64) {
            return None;
        }
        out[a] = i as usize;
    }
    Some(out)
}

#[inline]
pub(crate) fn trilinear_clamped(v: &[f32], dims: Dims, fx: f32, fy: f32, fz: f32) -> f32 {
    /// Lower corner, step to the upper corner and fractional weight.
    #[inline(always)]
    fn axis(f: f32, n: usize) -> (usize, usize, f32) {
        // `max` maps NaN to zero
        let f = f.max(0.0).min((n - 1) as f32);
        let i0 = f as i32 as usize;
        (i0, usize::from(i0 + 1 < n), f - i0 as f32)
    }
    let (nx, plane) = (dims[0], dims[0] * dims[1]);
    let (x0, sx, tx) = axis(fx, dims[0]);
    let (y0, sy, ty) = axis(fy, dims[1]);
    let (z0, sz, tz) = axis(fz, dims[2]);
    let (sy, sz) = (sy * nx, sz * plane);
    let base = x0 + nx * y0 + plane * z0;
    let c = &v[base..=base + sx + sy + sz];
    let lerp = |a: f32, b: f32, t: f32| a + (b - a) * t;
    let c00 = lerp(c[0], c[sx], tx);
    let c10 = lerp(c[sy], c[sx + sy], tx);
    let c01 = lerp(c[sz], c[sx + sz], tx);
    let c11 = lerp(c[sy + sz], c[sx + sy + sz], tx);
    let c0 = lerp(c00, c10, ty);
    let c1 = lerp(c01, c11, ty);
    lerp(c0, c1, tz)
}

/// Binary volume sharing the geometry conventions of [`Volume3`].
#[derive(Clone, Debug, PartialEq)]
pub struct Mask3 {
    dims: Dims,
    spacing_mm: [f64; 3],
    voxels: Vec<u8>,
}

impl Mask3 {
    pub fn new(dims: Dims, spacing_mm: [f64; 3], voxels: Vec<u8>) -> Result<Self> {
        check_geometry(dims, spacing_mm, voxels.len())?;
        if let Some(v) = voxels.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidGeometry(format!("mask value {v} not in {{0,1}}")));
        }
        Ok(Self { dims, spacing_mm, voxels })
    }

    pub fn empty(dims: Dims, spacing_mm: [f64; 3]) -> Result<Self> {
        Self::new(dims, spacing_mm, vec![0; dims[0] * dims[1] * dims[2]])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn voxels(&self) -> &[u8] {
        &self.voxels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.voxels[linear_index(self.dims, x, y, z)] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, on: bool) {
        let i = linear_index(self.dims, x, y, z);
        self.voxels[i] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v != 0).count()
    }

    pub fn nearest_voxel(&self, position_mm: [f64; 3]) -> Option<[usize; 3]> {
        nearest_voxel(self.dims, self.spacing_mm, position_mm)
    }
}

/// One connected lesion component of a ground-truth mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionRecord {
    pub id: usize,
    pub center_mm: [f64; 3],
    pub volume_mm3: f64,
    pub equivalent_diameter_mm: f64,
    pub voxel_ids: Vec<usize>,
}

pub fn equivalent_diameter(volume_mm3: f64) -> f64 {
    (6.0 * volume_mm3 / std::f64::consts::PI).cbrt()
}

/// 26-connected components of a mask. Ids start at 1 and follow the minimum
/// linear voxel index of each component; `voxel_ids` are ascending.
pub fn connected_components(mask: &Mask3) -> Vec<LesionRecord> {
    let dims = mask.dims;
    let n = mask.voxels.len();
    let mut seen = vec![false; n];
    let mut queue = VecDeque::new();
    let mut out = Vec::new();
    let voxel_mm3 = mask.spacing_mm.iter().product::<f64>();

    for start in 0..n {
        if mask.voxels[start] == 0 || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut ids = Vec::new();
        while let Some(i) = queue.pop_front() {
            ids.push(i);
            let [x, y, z] = unravel(dims, i);
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dx == 0 && dy == 0 && dz == 0 {
                            continue;
                        }
                        let (nx, ny, nz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                        if nx < 0 || ny < 0 || nz < 0 {
                            continue;
                        }
                        let (nx, ny, nz) = (nx as usize, ny as usize, nz as usize);
                        if nx >= dims[0] || ny >= dims[1] || nz >= dims[2] {
                            continue;
                        }
                        let j = linear_index(dims, nx, ny, nz);
                        if mask.voxels[j] != 0 && !seen[j] {
                            seen[j] = true;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
        ids.sort_unstable();
        let mut c = [0.0f64; 3];
        for &i in &ids {
            let p = unravel(dims, i);
            for a in 0..3 {
                c[a] += p[a] as f64 * mask.spacing_mm[a];
            }
        }
        let count = ids.len() as f64;
        let volume_mm3 = count * voxel_mm3;
        out.push(LesionRecord {
            id: out.len() + 1,
            center_mm: c.map(|s| s / count),
            volume_mm3,
            equivalent_diameter_mm: equivalent_diameter(volume_mm3),
            voxel_ids: ids,
        });
    }
    out
}

/// Per-voxel lesion id (0 = background) built from lesion records.
#[derive(Clone, Debug)]
pub struct LabelMap {
    dims: Dims,
    spacing_mm: [f64; 3],
    labels: Vec<u32>,
    n_lesions: usize,
}

impl LabelMap {
    pub fn new(mask: &Mask3, lesions: &[LesionRecord]) -> Result<Self> {
        let n = mask.voxels.len();
        let mut labels = vec![0u32; n];
        for (k, lesion) in lesions.iter().enumerate() {
            for &i in &lesion.voxel_ids {
                if i >= n {
                    return Err(Error::FrameMismatch(format!("lesion {} voxel {i} outside mask of {n} voxels", lesion.id)));
                }
                labels[i] = k as u32 + 1;
            }
        }
        Ok(Self { dims: mask.dims, spacing_mm: mask.spacing_mm, labels, n_lesions: lesions.len() })
    }

    pub fn n_lesions(&self) -> usize {
        self.n_lesions
    }

    /// Index (into the lesion list) of the lesion containing the voxel
    /// nearest `position_mm`. Positions outside the grid are a frame error.
    pub fn lesion_at(&self, position_mm: [f64; 3]) -> Result<Option<usize>> {
        let v = nearest_voxel(self.dims, self.spacing_mm, position_mm)
            .ok_or_else(|| Error::FrameMismatch(format!("position {position_mm:?} outside grid {:?}", self.dims)))?;
        let l = self.labels[linear_index(self.dims, v[0], v[1], v[2])];
        Ok(if l == 0 { None } else { Some(l as usize - 1) })
    }
}

/// Resamples onto an isotropic grid by trilinear interpolation.
pub fn resample_isotropic(v: &Volume3, target_mm: f64) -> Result<Volume3> {
    if !(target_mm.is_finite() && target_mm > 0.0) {
        return Err(Error::InvalidSpacing(format!("target spacing {target_mm}")));
    }
    let mut dims = [0usize; 3];
    let mut scale = [0f32; 3];
    for a in 0..3 {
        let extent = v.dims[a] as f64 * v.spacing_mm[a];
        dims[a] = ((extent / target_mm).round() as usize).max(1);
        scale[a] = (target_mm / v.spacing_mm[a]) as f32;
    }
    if dims == v.dims && v.spacing_mm.iter().all(|&s| s == target_mm) {
        return Ok(v.clone());
    }
    let mut out = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                out.push(v.sample_clamped(x as f32 * scale[0], y as f32 * scale[1], z as f32 * scale[2]));
            }
        }
    }
    Ok(Volume3::from_parts(dims, [target_mm; 3], out))
}

/// Cube of `edge_mm / spacing` voxels around the voxel nearest `center_mm`.
///
/// For an edge of `n` voxels and center voxel `c`, the crop covers
/// `c - n/2 ..= c + (n - 1) - n/2` along each axis; voxels outside the source
/// are zero.
pub fn crop_centered(v: &Volume3, center_mm: [f64; 3], edge_mm: f64) -> Result<Volume3> {
    let s = v.isotropic_spacing()?;
    let n = (edge_mm / s).round();
    if n.is_nan() || n < 1.0 || ((n * s) - edge_mm).abs() > 1e-6 * edge_mm.max(1.0) {
        return Err(Error::InvalidGeometry(format!("edge {edge_mm} mm is not a positive multiple of spacing {s}")));
    }
    let center = center_mm.map(|c| (c / s).round() as i64);
    Ok(crop_voxels(v, center, n as usize))
}

pub(crate) fn crop_voxels(v: &Volume3, center: [i64; 3], n: usize) -> Volume3 {
    let half = (n / 2) as i64;
    let start = [center[0] - half, center[1] - half, center[2] - half];
    let dims = v.dims;
    let mut out = vec![0f32; n * n * n];
    // x-range of valid source voxels is contiguous, so copy row slices.
    let x_lo = (-start[0]).clamp(0, n as i64) as usize;
    let x_hi = (dims[0] as i64 - start[0]).clamp(0, n as i64) as usize;
    if x_lo < x_hi {
        for lz in 0..n {
            let sz = start[2] + lz as i64;
            if sz < 0 || sz >= dims[2] as i64 {
                continue;
            }
            for ly in 0..n {
                let sy = start[1] + ly as i64;
                if sy < 0 || sy >= dims[1] as i64 {
                    continue;
                }
                let src = linear_index(dims, (start[0] + x_lo as i64) as usize, sy as usize, sz as usize);
                let dst = lz * n * n + ly * n + x_lo;
                out[dst..dst + (x_hi - x_lo)].copy_from_slice(&v.voxels[src..src + (x_hi - x_lo)]);
            }
        }
    }
    Volume3::from_parts([n; 3], v.spacing_mm, out)
}

/// Affine map of intensities onto `[0, 1]`; constant volumes map to zeros.
pub fn scale_to_unit(v: &Volume3) -> Volume3 {
    let (lo, hi) = v.min_max();
    let voxels = if hi > lo {
        let range = hi - lo;
        v.voxels.iter().map(|&x| ((x - lo) / range).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; v.voxels.len()]
    };
    Volume3::from_parts(v.dims, v.spacing_mm, voxels)
}

// ---- file I/O ----

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    dtype: String,
    order: String,
}

const ORDER: &str = "x-fastest";

/// Splits `path` into the `<name>.json` / `<name>.raw` pair. Accepts the bare
/// name or either file.
pub fn file_pair(path: &Path) -> (PathBuf, PathBuf) {
    let base = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut json = base.clone().into_os_string();
    json.push(".json");
    let mut raw = base.into_os_string();
    raw.push(".raw");
    (PathBuf::from(json), PathBuf::from(raw))
}

fn read_header(path: &Path, expected_dtype: &'static str) -> Result<(Header, Vec<u8>, PathBuf)> {
    let (json, raw) = file_pair(path);
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let header: Header =
        serde_json::from_str(&text).map_err(|e| Error::Malformed { path: json.clone(), detail: e.to_string() })?;
    if header.dtype != expected_dtype {
        return Err(Error::UnsupportedDtype { dtype: header.dtype, expected: expected_dtype });
    }
    if header.order != ORDER {
        return Err(Error::HeaderMismatch { path: json, detail: format!("order {:?}, expected {ORDER:?}", header.order) });
    }
    let payload = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    Ok((header, payload, raw))
}

fn write_pair(path: &Path, header: &Header, payload: &[u8]) -> Result<()> {
    let (json, raw) = file_pair(path);
    if let Some(dir) = json.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(header).expect("header serializes");
    fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))?;
    fs::write(&raw, payload).map_err(|e| Error::io(&raw, e))?;
    Ok(())
}

pub fn load_volume(path: &Path) -> Result<Volume3> {
    let (h, payload, raw) = read_header(path, "f32le")?;
    let n: usize = h.dims.iter().product();
    if payload.len() != n * 4 {
        return Err(Error::HeaderMismatch {
            path: raw,
            detail: format!("payload has {} bytes, dims {:?} need {}", payload.len(), h.dims, n * 4),
        });
    }
    let voxels = payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Volume3::new(h.dims, h.spacing_mm, voxels)
}

pub fn save_volume(v: &Volume3, path: &Path) -> Result<()> {
    let header = Header { dims: v.dims, spacing_mm: v.spacing_mm, dtype: "f32le".into(), order: ORDER.into() };
    let payload: Vec<u8> = v.voxels.iter().flat_map(|x| x.to_le_bytes()).collect();
    write_pair(path, &header, &payload)
}

pub fn load_mask(path: &Path) -> Result<Mask3> {
    let (h, payload, raw) = read_header(path, "u8")?;
    let n: usize = h.dims.iter().product();
    if payload.len() != n {
        return Err(Error::HeaderMismatch {
            path: raw,
            detail: format!("payload has {} bytes, dims {:?} need {n}", payload.len(), h.dims),
        });
    }
    Mask3::new(h.dims, h.spacing_mm, payload)
}

pub fn save_mask(m: &Mask3, path: &Path) -> Result<()> {
    let header = Header { dims: m.dims, spacing_mm: m.spacing_mm, dtype: "u8".into(), order: ORDER.into() };
    write_pair(path, &header, &m.voxels)
}
