//! Runtime selection of wider vector code paths.
//!
//! Hot loops are written once as `#[inline(always)]` bodies and instantiated
//! a second time inside a function compiled for AVX2 and FMA. Kernels that opt
//! into fused multiply-add round differently on the two paths; on a given CPU
//! the chosen path is fixed, so results never depend on thread count.

/// Calls `$avx` when the CPU supports AVX2 and FMA, `$portable` otherwise.
macro_rules! dispatch {
    ($avx:expr, $portable:expr, $($arg:expr),* $(,)?) => {{
        #[cfg(target_arch = "x86_64")]
        {
            if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
                // SAFETY: the required CPU features were detected at runtime.
                return unsafe { $avx($($arg),*) };
            }
        }
        $portable($($arg),*)
    }};
}

pub(crate) use dispatch;

/// `a·b + c`, fused into one rounding when `FUSED`.
#[inline(always)]
pub(crate) fn madd<T: num_traits::Float, const FUSED: bool>(a: T, b: T, c: T) -> T {
    if FUSED {
        a.mul_add(b, c)
    } else {
        a * b + c
    }
}
