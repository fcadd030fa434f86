//! Vectorizable elementwise kernels with runtime CPU dispatch.
//!
//! Every path evaluates the same expression sequence (no FMA contraction),
//! so results are bit-identical whichever path runs.

const SHIFTER: f64 = 6_755_399_441_055_744.0; // 1.5 * 2^52
const LN2_HI: f64 = 0.693_147_180_369_123_8;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;

/// `exp(x)` via `2^k · e^r`, `|r| ≤ ln2/2`, degree-12 Taylor polynomial.
/// Relative error stays near one ulp over the clamped domain
/// `[-708, 709]`.
#[inline(always)]
pub(crate) fn exp(x: f64) -> f64 {
    let x = x.clamp(-708.0, 709.0);
    let t = x * std::f64::consts::LOG2_E + SHIFTER;
    let k = t - SHIFTER;
    let r = x - k * LN2_HI - k * LN2_LO;
    // Estrin evaluation of the degree-12 Taylor polynomial.
    let r2 = r * r;
    let r4 = r2 * r2;
    let r8 = r4 * r4;
    let c01 = 1.0 + r;
    let c23 = 0.5 + r * (1.0 / 6.0);
    let c45 = 1.0 / 24.0 + r * (1.0 / 120.0);
    let c67 = 1.0 / 720.0 + r * (1.0 / 5_040.0);
    let c89 = 1.0 / 40_320.0 + r * (1.0 / 362_880.0);
    let c1011 = 1.0 / 3_628_800.0 + r * (1.0 / 39_916_800.0);
    let c12 = 1.0 / 479_001_600.0;
    let lo = (c01 + r2 * c23) + r4 * (c45 + r2 * c67);
    let hi = (c89 + r2 * c1011) + r4 * c12;
    let p = lo + r8 * hi;
    let bits = t
        .to_bits()
        .wrapping_sub(SHIFTER.to_bits())
        .wrapping_add(1023)
        << 52;
    p * f64::from_bits(bits)
}

#[inline(always)]
fn exp_slice_generic(v: &mut [f64]) {
    for x in v.iter_mut() {
        *x = exp(*x);
    }
}

const LANES: usize = 8;

/// Sum with `LANES` independent accumulators, combined in a fixed order.
pub(crate) fn sum(v: &[f64]) -> f64 {
    let mut acc = [0.0; LANES];
    let chunks = v.chunks_exact(LANES);
    let tail: f64 = chunks.remainder().iter().sum();
    for c in chunks {
        for (a, x) in acc.iter_mut().zip(c) {
            *a += x;
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Maximum, ignoring NaN ordering subtleties (`-inf` for an empty slice).
pub(crate) fn max(v: &[f64]) -> f64 {
    let mut acc = [f64::NEG_INFINITY; LANES];
    let chunks = v.chunks_exact(LANES);
    let mut m = chunks.remainder().iter().fold(f64::NEG_INFINITY, |a, &b| if b > a { b } else { a });
    for c in chunks {
        for (a, &x) in acc.iter_mut().zip(c) {
            *a = if x > *a { x } else { *a };
        }
    }
    for a in acc {
        m = if a > m { a } else { m };
    }
    m
}

#[inline(always)]
fn softmax_generic(v: &mut [f64], scale: f64) {
    let m = max(v);
    v.iter_mut().for_each(|x| *x = (*x - m) * scale);
    exp_slice_generic(v);
    let inv = 1.0 / sum(v);
    v.iter_mut().for_each(|x| *x *= inv);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn softmax_avx512(v: &mut [f64], scale: f64) {
    softmax_generic(v, scale)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn softmax_avx2(v: &mut [f64], scale: f64) {
    softmax_generic(v, scale)
}

/// In-place `softmax(scale * v)` for `scale > 0`.
pub(crate) fn softmax_scaled(v: &mut [f64], scale: f64) {
    debug_assert!(scale > 0.0);
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx512f") {
            // SAFETY: the CPU supports the enabled target feature.
            return unsafe { softmax_avx512(v, scale) };
        }
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: as above.
            return unsafe { softmax_avx2(v, scale) };
        }
    }
    softmax_generic(v, scale)
}
