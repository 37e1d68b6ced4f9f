//! CropNet: a contracting 3D convolutional classifier.
//!
//! Each resolution level holds `B` blocks of same-padded 3×3×3 convolution,
//! ReLU and inverted dropout, followed by 2×2×2 max-pooling; channel width
//! doubles per level. The final 2³ map is flattened into one dense unit with
//! a sigmoid. Parameters live in one flat buffer in checkpoint order:
//! levels outer to inner, blocks in order, weight then bias, head last.
//!
//! Everything is generic over [`Real`] so gradients can be verified in `f64`
//! while training runs in `f32`.

use std::fmt::Debug;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use num_traits::{Float, FromPrimitive, NumCast};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[cfg(target_arch = "x86_64")]
use crate::avx;
use crate::error::{Error, Result};
use crate::simd::{dispatch, madd};
use crate::volume::Volume3;

/// Floating-point element type the network is generic over.
pub trait Real: Float + FromPrimitive + Send + Sync + Default + Debug + 'static {
    /// Views the slice as `f32` when `Self` is `f32`.
    #[doc(hidden)]
    fn as_f32(s: &[Self]) -> Option<&[f32]> {
        let _ = s;
        None
    }

    /// Mutable counterpart of [`Real::as_f32`].
    #[doc(hidden)]
    fn as_f32_mut(s: &mut [Self]) -> Option<&mut [f32]> {
        let _ = s;
        None
    }
}

impl Real for f32 {
    fn as_f32(s: &[Self]) -> Option<&[f32]> {
        Some(s)
    }

    fn as_f32_mut(s: &mut [Self]) -> Option<&mut [f32]> {
        Some(s)
    }
}

impl Real for f64 {}

fn cast<T: Real>(v: f64) -> T {
    T::from_f64(v).expect("representable constant")
}

/// Dense activations: `(channels, nx, ny, nz)`, channel-major then x-fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T = f32> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: Real> Tensor4<T> {
    pub fn new(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::ShapeMismatch(format!("tensor dims must be positive, got {dims:?}")));
        }
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch(format!("{} values for tensor dims {dims:?}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("non-finite tensor value".into()));
        }
        Ok(Self { dims, data })
    }

    /// Single-channel tensor from a volume.
    pub fn from_volume(v: &Volume3) -> Result<Self> {
        let d = v.dims();
        let data = v.voxels().iter().map(|&x| <T as NumCast>::from(x).expect("f32 converts")).collect();
        Self::new([1, d[0], d[1], d[2]], data)
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CropNetConfig {
    pub edge_mm: usize,
    pub blocks_per_level: usize,
    pub base_channels: usize,
    pub dropout_rate: f64,
}

impl Default for CropNetConfig {
    fn default() -> Self {
        Self { edge_mm: 16, blocks_per_level: 2, base_channels: 8, dropout_rate: 0.1 }
    }
}

impl CropNetConfig {
    /// Number of resolution levels; the spatial edge halves per level down to 2.
    pub fn levels(&self) -> usize {
        self.edge_mm.trailing_zeros() as usize - 1
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Length of the flattened feature vector seen by the head.
    pub fn head_inputs(&self) -> usize {
        self.level_channels(self.levels() - 1) * 8
    }

    /// Configurations accepted for experiments.
    pub fn validate(&self) -> Result<()> {
        if ![16, 32, 64].contains(&self.edge_mm) {
            return Err(Error::InvalidNetwork(format!("edge_mm must be 16, 32 or 64, got {}", self.edge_mm)));
        }
        self.validate_shape()
    }

    /// Structural validity only; also admits the small edges used for
    /// gradient verification.
    pub fn validate_shape(&self) -> Result<()> {
        if !self.edge_mm.is_power_of_two() || self.edge_mm < 4 || self.edge_mm > 64 {
            return Err(Error::InvalidNetwork(format!("edge_mm must be a power of two in 4..=64, got {}", self.edge_mm)));
        }
        if self.blocks_per_level == 0 {
            return Err(Error::InvalidNetwork("blocks_per_level must be >= 1".into()));
        }
        if self.base_channels == 0 {
            return Err(Error::InvalidNetwork("base_channels must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidNetwork(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate)));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        Layout::new(self).total
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct ConvSpec {
    cin: usize,
    cout: usize,
    w_off: usize,
    b_off: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    levels: Vec<Vec<ConvSpec>>,
    head_w_off: usize,
    head_b_off: usize,
    total: usize,
}

impl Layout {
    fn new(cfg: &CropNetConfig) -> Self {
        let mut off = 0;
        let mut cin = 1;
        let mut levels = Vec::with_capacity(cfg.levels());
        for l in 0..cfg.levels() {
            let cout = cfg.level_channels(l);
            let mut blocks = Vec::with_capacity(cfg.blocks_per_level);
            for _ in 0..cfg.blocks_per_level {
                let w_off = off;
                off += cout * cin * 27;
                let b_off = off;
                off += cout;
                blocks.push(ConvSpec { cin, cout, w_off, b_off });
                cin = cout;
            }
            levels.push(blocks);
        }
        let head_w_off = off;
        off += cfg.head_inputs();
        let head_b_off = off;
        off += 1;
        Self { levels, head_w_off, head_b_off, total: off }
    }
}

static NEXT_GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    NEXT_GENERATION.fetch_add(1, Ordering::Relaxed)
}

/// An immutable parameter snapshot. Every new snapshot gets a fresh
/// generation id, which forward caches record.
#[derive(Clone, Debug)]
pub struct CropNetParams<T = f32> {
    config: CropNetConfig,
    layout: Layout,
    values: Vec<T>,
    generation: u64,
}

impl<T: Real> PartialEq for CropNetParams<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.values == other.values
    }
}

impl<T: Real> CropNetParams<T> {
    pub fn from_values(config: CropNetConfig, values: Vec<T>) -> Result<Self> {
        config.validate_shape()?;
        let layout = Layout::new(&config);
        if values.len() != layout.total {
            return Err(Error::ShapeMismatch(format!("{} parameters, config needs {}", values.len(), layout.total)));
        }
        Ok(Self { config, layout, values, generation: next_generation() })
    }

    pub fn zeros(config: CropNetConfig) -> Result<Self> {
        config.validate_shape()?;
        let n = config.param_count();
        Self::from_values(config, vec![T::zero(); n])
    }

    pub fn config(&self) -> &CropNetConfig {
        &self.config
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn head_bias(&self) -> T {
        self.values[self.layout.head_b_off]
    }

    /// A new snapshot with the head bias replaced.
    pub fn with_head_bias(&self, b: T) -> Self {
        let mut values = self.values.clone();
        values[self.layout.head_b_off] = b;
        Self { values, generation: next_generation(), ..self.clone() }
    }

    /// Converts element precision.
    pub fn cast<U: Real>(&self) -> CropNetParams<U> {
        CropNetParams {
            config: self.config,
            layout: self.layout.clone(),
            values: self.values.iter().map(|&v| <U as NumCast>::from(v).expect("float converts")).collect(),
            generation: next_generation(),
        }
    }

    /// Glorot-uniform weight bounds per layer: `(offset, len, bound)`.
    fn weight_blocks(&self) -> Vec<(usize, usize, f64)> {
        let mut out: Vec<(usize, usize, f64)> = self
            .layout
            .levels
            .iter()
            .flatten()
            .map(|s| (s.w_off, s.cout * s.cin * 27, glorot_bound(s.cin * 27, s.cout * 27)))
            .collect();
        let h = self.config.head_inputs();
        out.push((self.layout.head_w_off, h, glorot_bound(h, 1)));
        out
    }
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Glorot-uniform weights, zero biases.
pub fn init_params<T: Real, R: Rng + ?Sized>(config: CropNetConfig, rng: &mut R) -> Result<CropNetParams<T>> {
    let mut p = CropNetParams::<T>::zeros(config)?;
    for (off, len, b) in p.weight_blocks() {
        for w in &mut p.values[off..off + len] {
            // open interval: resample the (measure-zero) lower endpoint
            let mut u = rng.random_range(-b..b);
            while u == -b {
                u = rng.random_range(-b..b);
            }
            *w = cast(u);
        }
    }
    Ok(p)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Debug)]
struct ConvCache<T> {
    input: Vec<T>,
    act: Vec<T>,
    mask: Option<Vec<T>>,
}

#[derive(Clone, Debug)]
struct LevelCache<T> {
    edge: usize,
    convs: Vec<ConvCache<T>>,
    argmax: Vec<u32>,
}

/// Activations and dropout masks retained for [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache<T = f32> {
    generation: u64,
    mode: Mode,
    levels: Vec<LevelCache<T>>,
    features: Vec<T>,
    probability: T,
}

impl<T: Real> ForwardCache<T> {
    pub fn probability(&self) -> T {
        self.probability
    }
}

/// Activations are stored per channel on an `(n+2)³` grid whose one-voxel
/// border is kept at zero, which implements same padding for free.
#[derive(Clone, Copy, Debug)]
struct Grid {
    n: usize,
    np: usize,
}

impl Grid {
    fn new(n: usize) -> Self {
        Self { n, np: n + 2 }
    }

    fn plane(&self) -> usize {
        self.np * self.np * self.np
    }

    fn index(&self, x: usize, y: usize, z: usize) -> usize {
        ((z + 1) * self.np + y + 1) * self.np + x + 1
    }

    #[cfg(target_arch = "x86_64")]
    fn padded(&self) -> avx::PaddedGrid {
        avx::PaddedGrid { n: self.n, np: self.np, off: self.offsets() }
    }

    /// Flat range `[lo, hi)` covering every interior voxel.
    fn span(&self) -> (usize, usize) {
        let lo = self.index(0, 0, 0);
        (lo, self.n * lo + 1)
    }

    /// Flat offset of kernel tap `k = (dz·3 + dy)·3 + dx`.
    fn offsets(&self) -> [isize; 27] {
        let np = self.np as isize;
        std::array::from_fn(|k| {
            let (dx, dy, dz) = ((k % 3) as isize - 1, ((k / 3) % 3) as isize - 1, (k / 9) as isize - 1);
            (dz * np + dy) * np + dx
        })
    }

    fn pad<T: Real>(&self, data: &[T], channels: usize) -> Vec<T> {
        let n = self.n;
        let mut out = vec![T::zero(); channels * self.plane()];
        for (c, src) in data.chunks_exact(n * n * n).enumerate().take(channels) {
            for (r, row) in src.chunks_exact(n).enumerate() {
                let (y, z) = (r % n, r / n);
                let at = c * self.plane() + self.index(0, y, z);
                out[at..at + n].copy_from_slice(row);
            }
        }
        out
    }

    fn interior<T: Real>(&self, data: &[T], channels: usize) -> Vec<T> {
        let n = self.n;
        let mut out = Vec::with_capacity(channels * n * n * n);
        for c in 0..channels {
            for z in 0..n {
                for y in 0..n {
                    let at = c * self.plane() + self.index(0, y, z);
                    out.extend_from_slice(&data[at..at + n]);
                }
            }
        }
        out
    }
}

/// Largest grid edge routed to the channel-lane convolution.
const SMALL_GRID: usize = 8;

/// Widest register tile, in voxels along x.
const LANES: usize = 16;

/// Calls `$f::<T, B, W>` with the tile width `W` matching the grid edge.
macro_rules! by_width {
    ($f:ident, $t:ty, $b:literal, $n:expr, $($arg:expr),*) => {
        match $n {
            2 => $f::<$t, $b, 2>($($arg),*),
            4 => $f::<$t, $b, 4>($($arg),*),
            8 => $f::<$t, $b, 8>($($arg),*),
            n if n % LANES == 0 => $f::<$t, $b, LANES>($($arg),*),
            _ => $f::<$t, $b, 1>($($arg),*),
        }
    };
}

/// Same-padded 3×3×3 convolution on padded grids:
/// `out[o][p] = bias[o] + Σ_i Σ_k w[(o·cin + i)·27 + k] · inp[i][p + off_k]`.
/// Only interior voxels are written; `out` must arrive with zero borders.
fn conv3<T: Real>(inp: &[T], cin: usize, w: &[T], bias: Option<&[T]>, cout: usize, g: Grid, out: &mut [T]) {
    if g.n <= SMALL_GRID && conv3_lanes(inp, cin, w, bias, cout, g, out) {
        return;
    }
    let mut o = 0;
    while o + 4 <= cout {
        by_width!(conv_block, T, 4, g.n, inp, cin, w, bias, o, g, out);
        o += 4;
    }
    while o < cout {
        by_width!(conv_block, T, 1, g.n, inp, cin, w, bias, o, g, out);
        o += 1;
    }
}

fn conv_block<T: Real, const B: usize, const W: usize>(
    inp: &[T],
    cin: usize,
    w: &[T],
    bias: Option<&[T]>,
    o0: usize,
    g: Grid,
    out: &mut [T],
) {
    dispatch!(conv_block_avx2::<T, B, W>, conv_block_body::<T, B, W, false>, inp, cin, w, bias, o0, g, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn conv_block_avx2<T: Real, const B: usize, const W: usize>(
    inp: &[T],
    cin: usize,
    w: &[T],
    bias: Option<&[T]>,
    o0: usize,
    g: Grid,
    out: &mut [T],
) {
    conv_block_body::<T, B, W, true>(inp, cin, w, bias, o0, g, out)
}

/// `B` output channels at a time over tiles of `W` voxels along x.
#[inline(always)]
fn conv_block_body<T: Real, const B: usize, const W: usize, const FUSED: bool>(
    inp: &[T],
    cin: usize,
    w: &[T],
    bias: Option<&[T]>,
    o0: usize,
    g: Grid,
    out: &mut [T],
) {
    let plane = g.plane();
    let off = g.offsets();
    for z in 0..g.n {
        for y in 0..g.n {
            for x0 in (0..g.n).step_by(W) {
                let p = g.index(x0, y, z);
                let mut acc = [[T::zero(); W]; B];
                if let Some(bs) = bias {
                    for b in 0..B {
                        acc[b] = [bs[o0 + b]; W];
                    }
                }
                for i in 0..cin {
                    let src = &inp[i * plane..(i + 1) * plane];
                    let mut taps = [[T::zero(); 27]; B];
                    for b in 0..B {
                        taps[b].copy_from_slice(&w[((o0 + b) * cin + i) * 27..][..27]);
                    }
                    for k in 0..27 {
                        let at = (p as isize + off[k]) as usize;
                        let s: [T; W] = src[at..at + W].try_into().expect("tile in bounds");
                        for b in 0..B {
                            let wv = taps[b][k];
                            for j in 0..W {
                                acc[b][j] = madd::<T, FUSED>(wv, s[j], acc[b][j]);
                            }
                        }
                    }
                }
                for b in 0..B {
                    let at = (o0 + b) * plane + p;
                    out[at..at + W].copy_from_slice(&acc[b]);
                }
            }
        }
    }
}

/// Accumulates weight and bias gradients of [`conv3`] given the output
/// gradient `gout` (zero on grid borders).
fn conv3_param_grad<T: Real>(inp: &[T], cin: usize, gout: &[T], cout: usize, g: Grid, dw: &mut [T], db: &mut [T]) {
    let plane = g.plane();
    let (lo, hi) = g.span();
    for (o, d) in db.iter_mut().enumerate().take(cout) {
        *d = gout[o * plane + lo..o * plane + hi].iter().fold(*d, |s, &v| s + v);
    }
    if param_grad_lanes(inp, cin, gout, cout, g, dw) {
        return;
    }
    let mut o = 0;
    while o + 4 <= cout {
        by_width!(param_block, T, 4, g.n, inp, cin, gout, o, g, dw);
        o += 4;
    }
    while o < cout {
        by_width!(param_block, T, 1, g.n, inp, cin, gout, o, g, dw);
        o += 1;
    }
}

fn param_block<T: Real, const B: usize, const W: usize>(inp: &[T], cin: usize, gout: &[T], o0: usize, g: Grid, dw: &mut [T]) {
    dispatch!(param_block_avx2::<T, B, W>, param_block_body::<T, B, W, false>, inp, cin, gout, o0, g, dw)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn param_block_avx2<T: Real, const B: usize, const W: usize>(
    inp: &[T],
    cin: usize,
    gout: &[T],
    o0: usize,
    g: Grid,
    dw: &mut [T],
) {
    param_block_body::<T, B, W, true>(inp, cin, gout, o0, g, dw)
}

/// Lane-split dot products of `B` output-gradient channels against each
/// shifted input channel over interior tiles; lanes are reduced in a fixed
/// order.
#[inline(always)]
fn param_block_body<T: Real, const B: usize, const W: usize, const FUSED: bool>(
    inp: &[T],
    cin: usize,
    gout: &[T],
    o0: usize,
    g: Grid,
    dw: &mut [T],
) {
    let plane = g.plane();
    let off = g.offsets();
    let rows: [&[T]; B] = std::array::from_fn(|b| &gout[(o0 + b) * plane..(o0 + b + 1) * plane]);
    for i in 0..cin {
        let src = &inp[i * plane..(i + 1) * plane];
        for k in 0..27 {
            let mut acc = [[T::zero(); W]; B];
            for z in 0..g.n {
                for y in 0..g.n {
                    for x0 in (0..g.n).step_by(W) {
                        let p = g.index(x0, y, z);
                        let at = (p as isize + off[k]) as usize;
                        let s: [T; W] = src[at..at + W].try_into().expect("tile in bounds");
                        for b in 0..B {
                            let r: [T; W] = rows[b][p..p + W].try_into().expect("tile in bounds");
                            for j in 0..W {
                                acc[b][j] = madd::<T, FUSED>(r[j], s[j], acc[b][j]);
                            }
                        }
                    }
                }
            }
            for b in 0..B {
                let idx = ((o0 + b) * cin + i) * 27 + k;
                dw[idx] = acc[b].iter().fold(dw[idx], |t, &v| t + v);
            }
        }
    }
}

/// Runs [`conv3`] on the channel-lane `f32` kernel when available.
#[cfg(target_arch = "x86_64")]
fn conv3_lanes<T: Real>(inp: &[T], cin: usize, w: &[T], bias: Option<&[T]>, cout: usize, g: Grid, out: &mut [T]) -> bool {
    let (Some(inp), Some(w), Some(out)) = (T::as_f32(inp), T::as_f32(w), T::as_f32_mut(out)) else {
        return false;
    };
    if !cout.is_multiple_of(8) || !avx::available() {
        return false;
    }
    let bias = bias.and_then(T::as_f32);
    let mut wt = vec![0f32; w.len()];
    for o in 0..cout {
        for i in 0..cin {
            for k in 0..27 {
                wt[(i * 27 + k) * cout + o] = w[(o * cin + i) * 27 + k];
            }
        }
    }
    // SAFETY: `avx::available` confirmed AVX2 and FMA.
    unsafe { avx::conv(inp, cin, &wt, bias, cout, g.padded(), out) };
    true
}

#[cfg(not(target_arch = "x86_64"))]
fn conv3_lanes<T: Real>(_: &[T], _: usize, _: &[T], _: Option<&[T]>, _: usize, _: Grid, _: &mut [T]) -> bool {
    false
}

/// Runs the weight part of [`conv3_param_grad`] on the channel-lane `f32`
/// kernel when available.
#[cfg(target_arch = "x86_64")]
fn param_grad_lanes<T: Real>(inp: &[T], cin: usize, gout: &[T], cout: usize, g: Grid, dw: &mut [T]) -> bool {
    let (Some(inp), Some(gout), Some(dw)) = (T::as_f32(inp), T::as_f32(gout), T::as_f32_mut(dw)) else {
        return false;
    };
    if !cout.is_multiple_of(8) || !avx::available() {
        return false;
    }
    let plane = g.plane();
    let mut gt = vec![0f32; g.n * g.n * g.n * cout];
    for o in 0..cout {
        let mut q = 0;
        for z in 0..g.n {
            for y in 0..g.n {
                let at = o * plane + g.index(0, y, z);
                for &v in &gout[at..at + g.n] {
                    gt[q * cout + o] = v;
                    q += 1;
                }
            }
        }
    }
    // SAFETY: `avx::available` confirmed AVX2 and FMA.
    unsafe { avx::param_grad(inp, cin, &gt, cout, g.padded(), dw) };
    true
}

#[cfg(not(target_arch = "x86_64"))]
fn param_grad_lanes<T: Real>(_: &[T], _: usize, _: &[T], _: usize, _: Grid, _: &mut [T]) -> bool {
    false
}

/// Gradient with respect to the convolution input: a convolution of `gout`
/// with the channel-transposed, spatially flipped kernel.
fn conv3_input_grad<T: Real>(gout: &[T], cout: usize, w: &[T], cin: usize, g: Grid) -> Vec<T> {
    let mut wt = vec![T::zero(); w.len()];
    for o in 0..cout {
        for i in 0..cin {
            for k in 0..27 {
                wt[(i * cout + o) * 27 + 26 - k] = w[(o * cin + i) * 27 + k];
            }
        }
    }
    let mut out = vec![T::zero(); cin * g.plane()];
    conv3(gout, cout, &wt, None, cin, g, &mut out);
    out
}

/// 2×2×2 stride-2 max-pool per channel between padded grids. Returns the
/// pooled grid and, in interior scan order, the flat index of each window's
/// first maximum.
fn max_pool<T: Real>(input: &[T], channels: usize, g: Grid) -> (Vec<T>, Vec<u32>) {
    let h = Grid::new(g.n / 2);
    let mut out = vec![T::zero(); channels * h.plane()];
    let mut arg = Vec::with_capacity(channels * h.n * h.n * h.n);
    for c in 0..channels {
        let base = c * g.plane();
        for z in 0..h.n {
            for y in 0..h.n {
                for x in 0..h.n {
                    let mut best = base + g.index(2 * x, 2 * y, 2 * z);
                    let mut bv = input[best];
                    for k in 1..8 {
                        let i = base + g.index(2 * x + k % 2, 2 * y + (k / 2) % 2, 2 * z + k / 4);
                        if input[i] > bv {
                            bv = input[i];
                            best = i;
                        }
                    }
                    out[c * h.plane() + h.index(x, y, z)] = bv;
                    arg.push(best as u32);
                }
            }
        }
    }
    (out, arg)
}

/// Logistic function kept strictly inside `(0, 1)` in finite precision.
fn sigmoid<T: Real>(z: T) -> T {
    let p = if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    };
    let half_ulp = T::epsilon() / cast(2.0);
    p.max(T::min_positive_value()).min(T::one() - half_ulp)
}

fn forward_impl<T: Real, R: Rng + ?Sized>(
    params: &CropNetParams<T>,
    input: &Tensor4<T>,
    mode: Mode,
    rng: &mut R,
    keep: bool,
) -> Result<(T, Option<ForwardCache<T>>)> {
    let cfg = params.config;
    let c = cfg.edge_mm;
    if input.dims != [1, c, c, c] {
        return Err(Error::ShapeMismatch(format!("input dims {:?}, network expects [1, {c}, {c}, {c}]", input.dims)));
    }
    let rate = cfg.dropout_rate;
    let dropout = mode == Mode::Train && rate > 0.0;
    let keep_scale: T = cast(1.0 / (1.0 - rate));
    // an activation is dropped when its draw falls below rate·2³²
    let drop_below = (rate * 4_294_967_296.0).round().min(u32::MAX as f64) as u32;

    let mut g = Grid::new(c);
    let mut act = g.pad(&input.data, 1);
    let mut channels = 1;
    let mut levels = Vec::new();
    for specs in &params.layout.levels {
        let mut convs = Vec::new();
        for s in specs {
            let w = &params.values[s.w_off..s.w_off + s.cout * s.cin * 27];
            let bias = &params.values[s.b_off..s.b_off + s.cout];
            let mut out = vec![T::zero(); s.cout * g.plane()];
            conv3(&act, s.cin, w, Some(bias), s.cout, g, &mut out);
            for v in &mut out {
                *v = v.max(T::zero());
            }
            let mask = dropout.then(|| {
                // one uniform u32 per interior activation, in scan order
                let mut draws = vec![0u32; s.cout * g.n * g.n * g.n];
                rng.fill(&mut draws[..]);
                let mut m = vec![T::zero(); out.len()];
                for (r, row) in draws.chunks_exact(g.n).enumerate() {
                    let (ch, y, z) = (r / (g.n * g.n), r % g.n, (r / g.n) % g.n);
                    let at = ch * g.plane() + g.index(0, y, z);
                    let (mr, or) = (&mut m[at..at + g.n], &mut out[at..at + g.n]);
                    for j in 0..g.n {
                        mr[j] = if row[j] >= drop_below { keep_scale } else { T::zero() };
                        or[j] = or[j] * mr[j];
                    }
                }
                m
            });
            let prev = std::mem::replace(&mut act, out);
            if keep {
                convs.push(ConvCache { input: prev, act: act.clone(), mask });
            }
            channels = s.cout;
        }
        let (pooled, argmax) = max_pool(&act, channels, g);
        if keep {
            levels.push(LevelCache { edge: g.n, convs, argmax });
        }
        act = pooled;
        g = Grid::new(g.n / 2);
    }

    let features = g.interior(&act, channels);
    let w = &params.values[params.layout.head_w_off..params.layout.head_b_off];
    let z = w.iter().zip(&features).fold(params.head_bias(), |s, (&a, &b)| s + a * b);
    let p = sigmoid(z);
    let cache = keep.then_some(ForwardCache { generation: params.generation, mode, levels, features, probability: p });
    Ok((p, cache))
}

/// Forward pass returning the probability and the cache for [`backward`].
/// Dropout is sampled from `rng` in train mode only.
pub fn forward<T: Real, R: Rng + ?Sized>(
    params: &CropNetParams<T>,
    input: &Tensor4<T>,
    mode: Mode,
    rng: &mut R,
) -> Result<(T, ForwardCache<T>)> {
    let (p, cache) = forward_impl(params, input, mode, rng, true)?;
    Ok((p, cache.expect("cache requested")))
}

/// Deterministic inference without retaining activations.
pub fn predict<T: Real>(params: &CropNetParams<T>, input: &Tensor4<T>) -> Result<T> {
    let mut unused = crate::rng::seeded(0);
    forward_impl(params, input, Mode::Infer, &mut unused, false).map(|(p, _)| p)
}

pub const PROB_CLAMP: f64 = 1e-7;

/// Binary cross-entropy with `p` clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss<T: Real>(p: T, y: T) -> T {
    let lo: T = cast(PROB_CLAMP);
    let pc = p.max(lo).min(T::one() - lo);
    -(y * pc.ln() + (T::one() - y) * (T::one() - pc).ln())
}

/// Gradient buffer laid out like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T = f32> {
    values: Vec<T>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros(len: usize) -> Self {
        Self { values: vec![T::zero(); len] }
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a = *a + b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for a in &mut self.values {
            *a = *a * s;
        }
    }
}

/// Exact gradients of `bce_loss(forward(input), y)` with the cached dropout
/// masks held fixed.
pub fn backward<T: Real>(params: &CropNetParams<T>, cache: &ForwardCache<T>, y: T) -> Result<Gradients<T>> {
    if cache.generation != params.generation {
        return Err(Error::StaleCache(format!(
            "cache from parameter generation {}, parameters are generation {}",
            cache.generation, params.generation
        )));
    }
    if cache.mode != Mode::Train {
        return Err(Error::StaleCache("cache comes from an inference-mode forward".into()));
    }
    let lo: T = cast(PROB_CLAMP);
    let p = cache.probability;
    let mut g = Gradients::zeros(params.len());
    // d(loss)/dz vanishes where the clamp is active
    let dz = if p > lo && p < T::one() - lo { p - y } else { T::zero() };
    if dz == T::zero() {
        return Ok(g);
    }

    let l = &params.layout;
    for (gw, &f) in g.values[l.head_w_off..l.head_b_off].iter_mut().zip(&cache.features) {
        *gw = dz * f;
    }
    g.values[l.head_b_off] = dz;
    // gradient of the pooled output, interior scan order
    let mut pooled_grad: Vec<T> = params.values[l.head_w_off..l.head_b_off].iter().map(|&w| dz * w).collect();

    for (li, (specs, lc)) in l.levels.iter().zip(&cache.levels).enumerate().rev() {
        let grid = Grid::new(lc.edge);
        let channels = specs.last().map_or(1, |s| s.cout);
        let mut grad = vec![T::zero(); channels * grid.plane()];
        for (&a, &gv) in lc.argmax.iter().zip(&pooled_grad) {
            grad[a as usize] = grad[a as usize] + gv;
        }
        for (bi, (s, cc)) in specs.iter().zip(&lc.convs).enumerate().rev() {
            if let Some(m) = &cc.mask {
                for (gv, &f) in grad.iter_mut().zip(m) {
                    *gv = *gv * f;
                }
            }
            for (gv, &a) in grad.iter_mut().zip(&cc.act) {
                if a <= T::zero() {
                    *gv = T::zero();
                }
            }
            let k = s.cin * 27;
            let (head, tail) = g.values.split_at_mut(s.b_off);
            conv3_param_grad(
                &cc.input,
                s.cin,
                &grad,
                s.cout,
                grid,
                &mut head[s.w_off..s.w_off + s.cout * k],
                &mut tail[..s.cout],
            );
            if li == 0 && bi == 0 {
                break;
            }
            let w = &params.values[s.w_off..s.w_off + s.cout * k];
            grad = conv3_input_grad(&grad, s.cout, w, s.cin, grid);
        }
        if li > 0 {
            pooled_grad = grid.interior(&grad, specs[0].cin);
        }
    }
    Ok(g)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidNetwork(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Adaptive-moment optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T = f32> {
    pub config: AdamConfig,
    m: Vec<T>,
    v: Vec<T>,
    step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Self { config, m: vec![T::zero(); len], v: vec![T::zero(); len], step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update; returns the new parameter snapshot.
    pub fn step(&mut self, params: &CropNetParams<T>, grads: &Gradients<T>) -> Result<CropNetParams<T>> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} gradients and {} moments for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let (b1, b2): (T, T) = (cast(c.beta1), cast(c.beta2));
        let corr1: T = cast(1.0 - c.beta1.powi(t));
        let corr2: T = cast(1.0 - c.beta2.powi(t));
        let (lr, eps): (T, T) = (cast(c.learning_rate), cast(c.epsilon));
        let mut values = params.values.clone();
        for (((p, &g), m), v) in values.iter_mut().zip(&grads.values).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let mh = *m / corr1;
            let vh = *v / corr2;
            *p = *p - lr * mh / (vh.sqrt() + eps);
        }
        Ok(CropNetParams { values, generation: next_generation(), ..params.clone() })
    }
}

/// Order of the raw parameter payload, recorded in checkpoint manifests.
pub const PAYLOAD_ORDER: &str = "levels outer->inner, blocks in order, conv weight (out x in x 27, kernel index (dz*3+dy)*3+dx) then bias, head weight then head bias";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: CropNetConfig,
    pub step: u64,
    pub loss_history_sha256: String,
    pub param_count: usize,
    pub dtype: String,
    pub order: String,
    pub payload: String,
}

/// SHA-256 over the little-endian `f64` bytes of a loss history.
pub fn loss_digest(losses: &[f64]) -> String {
    let mut h = Sha256::new();
    for l in losses {
        h.update(l.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn payload_path(manifest: &Path) -> std::path::PathBuf {
    manifest.with_extension("bin")
}

/// Writes `path` (JSON manifest) and a sibling `.bin` payload of `f32` LE values.
pub fn save_checkpoint(path: &Path, params: &CropNetParams<f32>, step: u64, losses: &[f64]) -> Result<()> {
    let bin = payload_path(path);
    let manifest = CheckpointManifest {
        config: params.config,
        step,
        loss_history_sha256: loss_digest(losses),
        param_count: params.len(),
        dtype: "f32le".into(),
        order: PAYLOAD_ORDER.into(),
        payload: bin.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bytes: Vec<u8> = params.values.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(CropNetParams<f32>, CheckpointManifest)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::Malformed { path: path.to_path_buf(), detail: e.to_string() })?;
    if manifest.dtype != "f32le" {
        return Err(Error::UnsupportedDtype { dtype: manifest.dtype, expected: "f32le" });
    }
    let bin = path.with_file_name(&manifest.payload);
    let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let expected = manifest.config.param_count();
    if manifest.param_count != expected || bytes.len() != expected * 4 {
        return Err(Error::HeaderMismatch {
            path: bin,
            detail: format!("{} payload bytes, config needs {} parameters", bytes.len(), expected),
        });
    }
    let values = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    let params = CropNetParams::from_values(manifest.config, values)?;
    Ok((params, manifest))
}
