//! Explicit AVX2 kernels for `f32` hot loops.
//!
//! The convolution kernels put lanes over output channels. Activations use the
//! padded `(n+2)³` layout of the network; `off` holds the 27 flat tap offsets.
//! Every output accumulates its bias first, then input channels in order, then
//! taps in order, one fused multiply-add at a time. The warp kernel rounds
//! exactly like the scalar trilinear sampler.

#![cfg(target_arch = "x86_64")]

use std::arch::x86_64::*;

/// Geometry of one padded activation grid.
#[derive(Clone, Copy, Debug)]
pub(crate) struct PaddedGrid {
    pub n: usize,
    pub np: usize,
    pub off: [isize; 27],
}

impl PaddedGrid {
    fn plane(&self) -> usize {
        self.np * self.np * self.np
    }

    fn index(&self, x: usize, y: usize, z: usize) -> usize {
        ((z + 1) * self.np + y + 1) * self.np + x + 1
    }
}

pub(crate) fn available() -> bool {
    std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma")
}

/// Same-padded convolution; `wt` is laid out `[i][k][o]` and `cout` must be
/// a multiple of 8.
///
/// # Safety
/// The CPU must support AVX2 and FMA.
#[target_feature(enable = "avx2,fma")]
pub(crate) unsafe fn conv(
    inp: &[f32],
    cin: usize,
    wt: &[f32],
    bias: Option<&[f32]>,
    cout: usize,
    g: PaddedGrid,
    out: &mut [f32],
) {
    assert!(
        cout.is_multiple_of(8) && inp.len() >= cin * g.plane() && out.len() >= cout * g.plane() && wt.len() >= cin * 27 * cout
    );
    assert!(bias.is_none_or(|b| b.len() >= cout));
    match (cout.is_multiple_of(16), g.n.is_multiple_of(4)) {
        (true, true) => conv_tiles::<2, 4>(inp, cin, wt, bias, cout, g, out),
        (false, true) => conv_tiles::<1, 4>(inp, cin, wt, bias, cout, g, out),
        (true, false) => conv_tiles::<2, 1>(inp, cin, wt, bias, cout, g, out),
        (false, false) => conv_tiles::<1, 1>(inp, cin, wt, bias, cout, g, out),
    }
}

/// Tiles of `P` voxels along x times `8·V` output channels.
#[inline(always)]
unsafe fn conv_tiles<const V: usize, const P: usize>(
    inp: &[f32],
    cin: usize,
    wt: &[f32],
    bias: Option<&[f32]>,
    cout: usize,
    g: PaddedGrid,
    out: &mut [f32],
) {
    let plane = g.plane();
    let (ip, wp, op) = (inp.as_ptr(), wt.as_ptr(), out.as_mut_ptr());
    for o0 in (0..cout).step_by(8 * V) {
        let init: [__m256; V] = std::array::from_fn(|v| match bias {
            Some(b) => _mm256_loadu_ps(b.as_ptr().add(o0 + 8 * v)),
            None => _mm256_setzero_ps(),
        });
        for z in 0..g.n {
            for y in 0..g.n {
                for x0 in (0..g.n).step_by(P) {
                    let p = g.index(x0, y, z);
                    let mut acc = [init; P];
                    for i in 0..cin {
                        let src = ip.add(i * plane + p);
                        let wrow = wp.add(i * 27 * cout + o0);
                        for k in 0..27 {
                            let wv: [__m256; V] = std::array::from_fn(|v| _mm256_loadu_ps(wrow.add(k * cout + 8 * v)));
                            let sp = src.offset(g.off[k]);
                            for (j, a) in acc.iter_mut().enumerate() {
                                let s = _mm256_broadcast_ss(&*sp.add(j));
                                for v in 0..V {
                                    a[v] = _mm256_fmadd_ps(s, wv[v], a[v]);
                                }
                            }
                        }
                    }
                    let mut lanes = [0f32; 8];
                    for (j, a) in acc.iter().enumerate() {
                        for v in 0..V {
                            _mm256_storeu_ps(lanes.as_mut_ptr(), a[v]);
                            for (b, &x) in lanes.iter().enumerate() {
                                *op.add((o0 + 8 * v + b) * plane + p + j) = x;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adds the weight gradient to `dw` (`[o][i][k]`); `gt` is the output
/// gradient laid out `[interior voxel][o]` and `cout` a multiple of 8. Each
/// weight sums voxels in scan order.
///
/// # Safety
/// The CPU must support AVX2 and FMA.
#[target_feature(enable = "avx2,fma")]
pub(crate) unsafe fn param_grad(inp: &[f32], cin: usize, gt: &[f32], cout: usize, g: PaddedGrid, dw: &mut [f32]) {
    const KB: usize = 9;
    let plane = g.plane();
    let n3 = g.n * g.n * g.n;
    assert!(cout.is_multiple_of(8) && inp.len() >= cin * plane && gt.len() >= n3 * cout && dw.len() >= cout * cin * 27);
    let (ip, gp) = (inp.as_ptr(), gt.as_ptr());
    let mut lanes = [0f32; 8];
    for o0 in (0..cout).step_by(8) {
        for i in 0..cin {
            for kb in 0..27 / KB {
                let offs: [isize; KB] = std::array::from_fn(|kk| g.off[kb * KB + kk]);
                let mut acc = [_mm256_setzero_ps(); KB];
                let mut q = 0;
                for z in 0..g.n {
                    for y in 0..g.n {
                        let row = ip.add(i * plane + g.index(0, y, z));
                        for x in 0..g.n {
                            let gv = _mm256_loadu_ps(gp.add(q * cout + o0));
                            let sp = row.add(x);
                            for kk in 0..KB {
                                let s = _mm256_broadcast_ss(&*sp.offset(offs[kk]));
                                acc[kk] = _mm256_fmadd_ps(s, gv, acc[kk]);
                            }
                            q += 1;
                        }
                    }
                }
                for (kk, a) in acc.iter().enumerate() {
                    _mm256_storeu_ps(lanes.as_mut_ptr(), *a);
                    for (b, &x) in lanes.iter().enumerate() {
                        let idx = ((o0 + b) * cin + i) * 27 + kb * KB + kk;
                        dw[idx] += x;
                    }
                }
            }
        }
    }
}

/// Backward warp `out(p) = v(p + d(p))` with clamped trilinear sampling, eight
/// voxels along x at a time; `nx` must be a multiple of 8.
///
/// # Safety
/// The CPU must support AVX2.
#[target_feature(enable = "avx2")]
pub(crate) unsafe fn warp(src: &[f32], dims: [usize; 3], d: [&[f32]; 3], out: &mut [f32]) {
    let [nx, ny, nz] = dims;
    let len = nx * ny * nz;
    assert!(nx % 8 == 0 && len > 0 && len < i32::MAX as usize && src.len() == len && out.len() == len);
    assert!(d.iter().all(|c| c.len() == len));
    let plane = nx * ny;
    let zero = _mm256_setzero_ps();
    let one = _mm256_set1_epi32(1);
    let hi = |n: usize| (_mm256_set1_ps((n - 1) as f32), _mm256_set1_epi32(n as i32 - 1));
    let (hx, hy, hz) = (hi(nx), hi(ny), hi(nz));
    // lower corner, step to the upper corner and weight along one axis
    let axis = |f: __m256, (hf, hi): (__m256, __m256i)| {
        let f = _mm256_min_ps(_mm256_max_ps(f, zero), hf);
        let i0 = _mm256_cvttps_epi32(f);
        let step = _mm256_and_si256(_mm256_cmpgt_epi32(hi, i0), one);
        (i0, step, _mm256_sub_ps(f, _mm256_cvtepi32_ps(i0)))
    };
    let lerp = |a: __m256, b: __m256, t: __m256| _mm256_add_ps(a, _mm256_mul_ps(_mm256_sub_ps(b, a), t));
    let lane = _mm256_setr_ps(0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0);
    let (vnx, vplane) = (_mm256_set1_epi32(nx as i32), _mm256_set1_epi32(plane as i32));
    let sp = src.as_ptr();
    let mut i = 0;
    for z in 0..nz {
        for y in 0..ny {
            for x0 in (0..nx).step_by(8) {
                let px = _mm256_add_ps(lane, _mm256_set1_ps(x0 as f32));
                let fx = _mm256_add_ps(px, _mm256_loadu_ps(d[0].as_ptr().add(i)));
                let fy = _mm256_add_ps(_mm256_set1_ps(y as f32), _mm256_loadu_ps(d[1].as_ptr().add(i)));
                let fz = _mm256_add_ps(_mm256_set1_ps(z as f32), _mm256_loadu_ps(d[2].as_ptr().add(i)));
                let (x0v, sx, tx) = axis(fx, hx);
                let (y0v, sy, ty) = axis(fy, hy);
                let (z0v, sz, tz) = axis(fz, hz);
                let (sy, sz) = (_mm256_mullo_epi32(sy, vnx), _mm256_mullo_epi32(sz, vplane));
                let base = _mm256_add_epi32(x0v, _mm256_add_epi32(_mm256_mullo_epi32(y0v, vnx), _mm256_mullo_epi32(z0v, vplane)));
                let at = |o: __m256i| _mm256_i32gather_ps::<4>(sp, _mm256_add_epi32(base, o));
                let sxy = _mm256_add_epi32(sx, sy);
                let c00 = lerp(at(_mm256_setzero_si256()), at(sx), tx);
                let c10 = lerp(at(sy), at(sxy), tx);
                let c01 = lerp(at(sz), at(_mm256_add_epi32(sx, sz)), tx);
                let c11 = lerp(at(_mm256_add_epi32(sy, sz)), at(_mm256_add_epi32(sxy, sz)), tx);
                let v = lerp(lerp(c00, c10, ty), lerp(c01, c11, ty), tz);
                _mm256_storeu_ps(out.as_mut_ptr().add(i), v);
                i += 8;
            }
        }
    }
}
