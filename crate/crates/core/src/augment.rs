//! Stochastic augmentation of training crops.
//!
//! A `2c`-edge crop goes through elastic deformation, intensity scaling,
//! random gamma, random axis flips and a random axial rotation, and the
//! central `c`-edge cube is kept. Border-clamp artifacts from the geometric
//! stages stay outside the retained cube.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalespace::blur_buffer;
use crate::volume::{crop_voxels, scale_to_unit, trilinear_clamped, Dims, Volume3};

/// Per-voxel displacements in voxel units (1 voxel = 1 mm after isotropic
/// resampling).
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    pub dims: Dims,
    pub dx: Vec<f32>,
    pub dy: Vec<f32>,
    pub dz: Vec<f32>,
}

impl DeformationField {
    pub fn zeros(dims: Dims) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        Self { dims, dx: vec![0.0; n], dy: vec![0.0; n], dz: vec![0.0; n] }
    }

    pub fn constant(dims: Dims, d: [f32; 3]) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        Self { dims, dx: vec![d[0]; n], dy: vec![d[1]; n], dz: vec![d[2]; n] }
    }

    pub fn max_abs(&self) -> f32 {
        self.dx.iter().chain(&self.dy).chain(&self.dz).fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub sigma_def_mm: f64,
    pub alpha: f64,
    pub gamma_lo: f64,
    pub gamma_hi: f64,
    pub enable_flips: bool,
    pub enable_rotation: bool,
    pub crop_edge_mm: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            sigma_def_mm: 4.0,
            alpha: 34.0,
            gamma_lo: 0.8,
            gamma_hi: 1.2,
            enable_flips: true,
            enable_rotation: true,
            crop_edge_mm: 16,
        }
    }
}

impl AugmentConfig {
    /// Every stochastic stage disabled: the pipeline reduces to intensity
    /// scaling and the center crop.
    pub fn identity(crop_edge_mm: usize) -> Self {
        Self {
            sigma_def_mm: 0.0,
            alpha: 0.0,
            gamma_lo: 1.0,
            gamma_hi: 1.0,
            enable_flips: false,
            enable_rotation: false,
            crop_edge_mm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidAugment(m.to_string()));
        if !(self.gamma_lo > 0.0 && self.gamma_hi >= self.gamma_lo && self.gamma_hi.is_finite()) {
            return bad("need 0 < gamma_lo <= gamma_hi");
        }
        if !(self.sigma_def_mm >= 0.0 && self.sigma_def_mm.is_finite()) {
            return bad("sigma_def_mm must be >= 0");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be >= 0");
        }
        if self.crop_edge_mm == 0 {
            return bad("crop_edge_mm must be positive");
        }
        Ok(())
    }
}

/// Uniform `(-1, 1)` noise per component, blurred with a sum-normalized
/// Gaussian, scaled by `alpha`.
pub fn random_deformation_field<R: Rng + ?Sized>(dims: Dims, sigma_def_mm: f64, alpha: f64, rng: &mut R) -> DeformationField {
    let n = dims[0] * dims[1] * dims[2];
    let a = alpha as f32;
    let mut draws = vec![0u32; 3 * n];
    rng.fill(&mut draws[..]);
    let component = |bits: &[u32]| {
        // midpoints of 2²⁴ equal cells spanning (-1, 1)
        let noise: Vec<f32> = bits.iter().map(|&u| ((u >> 8) as f32 + 0.5) * (1.0 / 8_388_608.0) - 1.0).collect();
        let mut s = blur_buffer(&noise, dims, sigma_def_mm);
        // A normalized non-negative kernel is a convex combination; the clamp
        // only absorbs f32 rounding of the weight sum.
        for v in &mut s {
            *v = v.clamp(-1.0, 1.0) * a;
        }
        s
    };
    let mut parts = draws.chunks_exact(n).map(component);
    let (dx, dy, dz) = (parts.next().unwrap_or_default(), parts.next().unwrap_or_default(), parts.next().unwrap_or_default());
    DeformationField { dims, dx, dy, dz }
}

/// Backward warp: `out(p) = v(p + f(p))`, trilinear with border clamp.
pub fn apply_deformation(v: &Volume3, f: &DeformationField) -> Result<Volume3> {
    if f.dims != v.dims() {
        return Err(Error::DimsMismatch(v.dims(), f.dims));
    }
    let dims = v.dims();
    let src = v.voxels();
    #[cfg(target_arch = "x86_64")]
    if dims[0].is_multiple_of(8) && std::is_x86_feature_detected!("avx2") {
        let mut out = vec![0f32; src.len()];
        // SAFETY: AVX2 support was detected at runtime.
        unsafe { crate::avx::warp(src, dims, [&f.dx, &f.dy, &f.dz], &mut out) };
        return Ok(Volume3::from_parts(dims, v.spacing_mm(), out));
    }
    let mut out = Vec::with_capacity(src.len());
    let mut i = 0;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                out.push(trilinear_clamped(src, dims, x as f32 + f.dx[i], y as f32 + f.dy[i], z as f32 + f.dz[i]));
                i += 1;
            }
        }
    }
    Ok(Volume3::from_parts(dims, v.spacing_mm(), out))
}

/// `v^(1/γ)` on `[0, 1]` intensities.
pub fn gamma_correct(v: &Volume3, gamma: f64) -> Result<Volume3> {
    gamma_correct_slab(v, gamma, 0..v.dims()[2])
}

/// [`gamma_correct`] applied to the z-slices in `slab` only; other slices
/// pass through unchanged.
fn gamma_correct_slab(v: &Volume3, gamma: f64, slab: Range<usize>) -> Result<Volume3> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::NonPositiveGamma(gamma));
    }
    if let Some(&bad) = v.voxels().iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::OutOfRangeInput(bad));
    }
    if gamma == 1.0 {
        return Ok(v.clone());
    }
    let e = (1.0 / gamma) as f32;
    let plane = v.dims()[0] * v.dims()[1];
    let mut out = v.voxels().to_vec();
    for x in &mut out[slab.start * plane..slab.end * plane] {
        *x = x.powf(e).clamp(0.0, 1.0);
    }
    Ok(Volume3::from_parts(v.dims(), v.spacing_mm(), out))
}

pub fn flip_axes(v: &Volume3, flips: [bool; 3]) -> Volume3 {
    if flips == [false; 3] {
        return v.clone();
    }
    let d = v.dims();
    let src = v.voxels();
    let mut out = Vec::with_capacity(src.len());
    let pick = |i: usize, n: usize, f: bool| if f { n - 1 - i } else { i };
    for z in 0..d[2] {
        let sz = pick(z, d[2], flips[2]);
        for y in 0..d[1] {
            let sy = pick(y, d[1], flips[1]);
            let row = (sz * d[1] + sy) * d[0];
            if flips[0] {
                out.extend(src[row..row + d[0]].iter().rev());
            } else {
                out.extend_from_slice(&src[row..row + d[0]]);
            }
        }
    }
    Volume3::from_parts(d, v.spacing_mm(), out)
}

/// Flips each axis independently with probability 1/2.
pub fn random_flip<R: Rng + ?Sized>(v: &Volume3, rng: &mut R) -> Volume3 {
    let flips = [rng.random_bool(0.5), rng.random_bool(0.5), rng.random_bool(0.5)];
    flip_axes(v, flips)
}

/// Rotation about the z axis through the cube center, sampled only on the
/// window `[start, start + n)` of each axis.
fn rotate_z_window(v: &Volume3, angle: f64, start: usize, n: usize) -> Volume3 {
    let d = v.dims();
    let c = (d[0] as f64 - 1.0) / 2.0;
    let (s, co) = angle.sin_cos();
    let src = v.voxels();
    let mut out = Vec::with_capacity(n * n * n);
    for z in start..start + n {
        for y in start..start + n {
            for x in start..start + n {
                // inverse rotation maps output coordinates into the source
                let (px, py) = (x as f64 - c, y as f64 - c);
                let sx = co * px + s * py + c;
                let sy = -s * px + co * py + c;
                out.push(trilinear_clamped(src, d, sx as f32, sy as f32, z as f32));
            }
        }
    }
    Volume3::from_parts([n; 3], v.spacing_mm(), out)
}

pub fn rotate_z(v: &Volume3, angle: f64) -> Result<Volume3> {
    if !v.is_cubic() {
        return Err(Error::NotCubic(v.dims()));
    }
    if angle == 0.0 {
        return Ok(v.clone());
    }
    Ok(rotate_z_window(v, angle, 0, v.dims()[0]))
}

/// Rotates about the axial axis by an angle drawn from `[0, 2π)`.
pub fn random_rotate<R: Rng + ?Sized>(v: &Volume3, rng: &mut R) -> Result<Volume3> {
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    rotate_z(v, angle)
}

/// Full augmentation of a `2c` crop down to a `c` crop with values in `[0, 1]`.
pub fn augment_sample<R: Rng + ?Sized>(v: &Volume3, cfg: &AugmentConfig, rng: &mut R) -> Result<Volume3> {
    cfg.validate()?;
    let c = cfg.crop_edge_mm;
    let big = 2 * c;
    if v.dims() != [big; 3] || v.spacing_mm() != [1.0; 3] {
        return Err(Error::BadInputSize(format!("expected {big}^3 at 1 mm, got {:?} at {:?}", v.dims(), v.spacing_mm())));
    }

    let deformed = if cfg.alpha > 0.0 {
        let field = random_deformation_field(v.dims(), cfg.sigma_def_mm, cfg.alpha, rng);
        apply_deformation(v, &field)?
    } else {
        v.clone()
    };
    let scaled = scale_to_unit(&deformed);
    let gamma = if cfg.gamma_hi > cfg.gamma_lo { rng.random_range(cfg.gamma_lo..=cfg.gamma_hi) } else { cfg.gamma_lo };
    // flips and the final window only read this z-slab
    let start = c / 2;
    let corrected = gamma_correct_slab(&scaled, gamma, start..start + c)?;
    let flipped = if cfg.enable_flips { random_flip(&corrected, rng) } else { corrected };
    if cfg.enable_rotation {
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        Ok(rotate_z_window(&flipped, angle, start, c))
    } else {
        Ok(center_crop(&flipped, c))
    }
}

/// Central `n`-edge cube of a cubic volume.
pub fn center_crop(v: &Volume3, n: usize) -> Volume3 {
    let big = v.dims()[0];
    let center = (big / 2) as i64;
    crop_voxels(v, [center; 3], n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::scalespace::gaussian_kernel;

    fn random_volume(n: usize, seed: u64) -> Volume3 {
        let mut r = rng::seeded(seed);
        Volume3::from_fn([n; 3], [1.0; 3], |_, _, _| r.random()).unwrap()
    }

    #[test]
    fn zero_alpha_field_is_zero_and_bounded() {
        let mut r = rng::seeded(1);
        let f = random_deformation_field([8; 3], 4.0, 0.0, &mut r);
        assert_eq!(f.max_abs(), 0.0);
        for alpha in [0.5, 34.0] {
            let f = random_deformation_field([12; 3], 1.0, alpha, &mut r);
            assert!(f.max_abs() as f64 <= alpha);
            let f = random_deformation_field([12; 3], 0.0, alpha, &mut r);
            assert!(f.max_abs() as f64 <= alpha);
        }
    }

    #[test]
    fn displacement_spread_matches_kernel_norm() {
        // Var of a normalized blur of i.i.d. U[-1,1] noise: (1/3)·Σ w³ over the
        // 3D kernel, i.e. (1/3)·(Σ_1d w²)³.
        let k: Vec<f64> = gaussian_kernel(4.0).iter().map(|&w| w as f64).collect();
        let l2_3d = k.iter().map(|w| w * w).sum::<f64>().powi(3).sqrt();
        let expected = 34.0 * l2_3d / 3f64.sqrt();

        let mut r = rng::seeded(2024);
        let probes = [[16usize, 16, 16], [14, 18, 15], [17, 15, 18], [15, 16, 14]];
        let mut samples = Vec::new();
        for _ in 0..100 {
            let f = random_deformation_field([32; 3], 4.0, 34.0, &mut r);
            for p in probes {
                let i = p[0] + 32 * (p[1] + 32 * p[2]);
                samples.extend([f.dx[i], f.dy[i], f.dz[i]].map(|v| v as f64));
            }
        }
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (samples.len() - 1) as f64;
        let std = var.sqrt();
        assert!((std - expected).abs() <= 0.1 * expected, "std {std} expected {expected}");
    }

    #[test]
    fn warp_matches_pointwise_sampler() {
        let v = random_volume(16, 8);
        let mut f = random_deformation_field([16; 3], 2.0, 40.0, &mut rng::seeded(9));
        f.dx[5] = f32::NAN;
        f.dy[77] = 1e9;
        f.dz[300] = -1e9;
        f.dx[301] = -0.0;
        let warped = apply_deformation(&v, &f).unwrap();
        let mut i = 0;
        for z in 0..16 {
            for y in 0..16 {
                for x in 0..16 {
                    let (px, py, pz) = (x as f32 + f.dx[i], y as f32 + f.dy[i], z as f32 + f.dz[i]);
                    let want = v.sample_clamped(px, py, pz);
                    assert_eq!(warped.get(x, y, z).to_bits(), want.to_bits(), "voxel {x},{y},{z}");
                    i += 1;
                }
            }
        }
    }

    #[test]
    fn deformation_identities() {
        let v = random_volume(10, 3);
        assert_eq!(apply_deformation(&v, &DeformationField::zeros([10; 3])).unwrap(), v);

        let ramp = Volume3::from_fn([12; 3], [1.0; 3], |x, y, _| 0.5 * x as f32 + 0.1 * y as f32).unwrap();
        let shifted = apply_deformation(&ramp, &DeformationField::constant([12; 3], [1.0, 0.0, 0.0])).unwrap();
        for z in 0..12 {
            for y in 0..12 {
                for x in 0..11 {
                    assert!((shifted.get(x, y, z) - ramp.get(x + 1, y, z)).abs() < 1e-6);
                }
            }
        }

        let c = Volume3::filled([10; 3], [1.0; 3], 0.3).unwrap();
        let mut r = rng::seeded(4);
        let f = random_deformation_field([10; 3], 2.0, 5.0, &mut r);
        assert!(apply_deformation(&c, &f).unwrap().voxels().iter().all(|&x| (x - 0.3).abs() < 1e-6));

        assert!(matches!(apply_deformation(&c, &DeformationField::zeros([9; 3])), Err(Error::DimsMismatch(..))));
    }

    #[test]
    fn gamma_cases() {
        let v = random_volume(6, 5);
        assert_eq!(gamma_correct(&v, 1.0).unwrap(), v);
        let q = Volume3::new([3, 1, 1], [1.0; 3], vec![0.25, 0.0, 1.0]).unwrap();
        let g = gamma_correct(&q, 0.5).unwrap();
        assert_eq!(g.voxels(), &[0.0625, 0.0, 1.0]);
        for gamma in [0.8, 1.1, 3.0] {
            let g = gamma_correct(&q, gamma).unwrap();
            assert_eq!(g.voxels()[1], 0.0);
            assert_eq!(g.voxels()[2], 1.0);
        }
        assert!(matches!(gamma_correct(&q, 0.0), Err(Error::NonPositiveGamma(_))));
        let out = Volume3::new([1, 1, 1], [1.0; 3], vec![1.5]).unwrap();
        assert!(matches!(gamma_correct(&out, 1.0), Err(Error::OutOfRangeInput(_))));
    }

    #[test]
    fn flips_are_involutions_that_commute() {
        let v = random_volume(7, 6);
        assert_eq!(flip_axes(&v, [false; 3]), v);
        for f in [[true, false, false], [false, true, false], [false, false, true], [true, true, true]] {
            assert_eq!(flip_axes(&flip_axes(&v, f), f), v);
        }
        let xy = flip_axes(&flip_axes(&v, [true, false, false]), [false, true, false]);
        let yx = flip_axes(&flip_axes(&v, [false, true, false]), [true, false, false]);
        assert_eq!(xy, yx);
        assert_eq!(xy, flip_axes(&v, [true, true, false]));

        let mut r = rng::seeded(7);
        let f = random_flip(&v, &mut r);
        let mut a: Vec<f32> = v.voxels().to_vec();
        let mut b: Vec<f32> = f.voxels().to_vec();
        a.sort_by(f32::total_cmp);
        b.sort_by(f32::total_cmp);
        assert_eq!(a, b);
    }

    #[test]
    fn rotation_cases() {
        let v = random_volume(9, 8);
        assert_eq!(rotate_z(&v, 0.0).unwrap(), v);
        let c = Volume3::filled([9; 3], [1.0; 3], 0.6).unwrap();
        let mut r = rng::seeded(9);
        assert!(random_rotate(&c, &mut r).unwrap().voxels().iter().all(|&x| (x - 0.6).abs() < 1e-6));
        let flat = Volume3::filled([9, 9, 4], [1.0; 3], 0.0).unwrap();
        assert!(matches!(rotate_z(&flat, 1.0), Err(Error::NotCubic(_))));

        // Radially symmetric in-plane profile about the z axis through the center.
        let n = 33;
        let cc = (n as f64 - 1.0) / 2.0;
        let blob = Volume3::from_fn([n; 3], [1.0; 3], |x, y, z| {
            let r2 = (x as f64 - cc).powi(2) + (y as f64 - cc).powi(2);
            ((-r2 / (2.0 * 25.0)).exp() * (1.0 - (z as f64 - cc).abs() / 40.0)) as f32
        })
        .unwrap();
        for angle in [0.3, 1.0, 2.5, 4.0] {
            let rot = rotate_z(&blob, angle).unwrap();
            let mut err = 0f32;
            for z in 0..n {
                for y in 0..n {
                    for x in 0..n {
                        if (x as f64 - cc).hypot(y as f64 - cc) <= cc {
                            err = err.max((rot.get(x, y, z) - blob.get(x, y, z)).abs());
                        }
                    }
                }
            }
            assert!(err <= 1e-2, "angle {angle}: {err}");
        }
    }

    #[test]
    fn identity_config_reduces_to_scale_and_crop() {
        let v = Volume3::from_fn([32; 3], [1.0; 3], |x, y, z| (x * 3 + y * 5 + z * 7) as f32 * 0.01 - 2.0).unwrap();
        let mut r = rng::seeded(10);
        let out = augment_sample(&v, &AugmentConfig::identity(16), &mut r).unwrap();
        assert_eq!(out, center_crop(&scale_to_unit(&v), 16));
        assert_eq!(out.dims(), [16; 3]);
        assert!(matches!(
            augment_sample(&Volume3::filled([30; 3], [1.0; 3], 0.0).unwrap(), &AugmentConfig::identity(16), &mut r),
            Err(Error::BadInputSize(_))
        ));
    }

    #[test]
    fn center_crop_matches_crop_centered_convention() {
        let v = random_volume(32, 12);
        let a = center_crop(&v, 16);
        let b = crate::volume::crop_centered(&v, [16.0; 3], 16.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn augmentation_is_deterministic_and_in_range() {
        let v = random_volume(32, 11);
        let cfg = AugmentConfig::default();
        let a = augment_sample(&v, &cfg, &mut rng::seeded(99)).unwrap();
        let b = augment_sample(&v, &cfg, &mut rng::seeded(99)).unwrap();
        assert_eq!(a.voxels(), b.voxels());
        assert_eq!(a.dims(), [16; 3]);
        assert!(a.voxels().iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn gamma_monotone_over_range() {
        let ramp = Volume3::from_fn([50, 1, 1], [1.0; 3], |x, _, _| x as f32 / 49.0).unwrap();
        for gamma in [0.8, 0.9, 1.0, 1.1, 1.2] {
            let g = gamma_correct(&ramp, gamma).unwrap();
            assert!(g.voxels().windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn mean_augmentation_resembles_original() {
        let n = 32;
        let lesion = Volume3::from_fn([n; 3], [1.0; 3], |x, y, z| {
            let d2 = [x, y, z].iter().map(|&i| (i as f64 - 16.3).powi(2)).sum::<f64>();
            (0.2 + 0.7 * (-d2 / (2.0 * 9.0)).exp()) as f32
        })
        .unwrap();
        let cfg = AugmentConfig::default();
        let mut r = rng::seeded(31337);
        let mut mean = vec![0f64; 16 * 16 * 16];
        let runs = 1000;
        for _ in 0..runs {
            let a = augment_sample(&lesion, &cfg, &mut r).unwrap();
            for (m, &v) in mean.iter_mut().zip(a.voxels()) {
                *m += v as f64 / runs as f64;
            }
        }
        let reference: Vec<f64> = center_crop(&scale_to_unit(&lesion), 16).voxels().iter().map(|&v| v as f64).collect();
        let r = pearson(&mean, &reference);
        assert!(r > 0.5, "pearson {r}");
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }
}
