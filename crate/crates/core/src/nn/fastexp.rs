//! Vectorizable `exp` for the non-positive arguments softmax produces.
//!
//! Range reduction `x = n ln2 + r` with `|r| <= ln2 / 2`, a degree-13 Taylor
//! polynomial in `r`, then scaling by `2^n` through the exponent bits. Every
//! step uses fused multiply-adds, so the AVX2 path and the portable path
//! produce identical bits.

const LOG2E: f64 = std::f64::consts::LOG2_E;
const LN2_HI: f64 = 6.931_471_803_691_238e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
/// `1.5 * 2^52`: adding it rounds to an integer held in the low mantissa bits.
const ROUND: f64 = 6_755_399_441_055_744.0;
/// Below this the result is subnormal; it is flushed to zero.
const FLUSH: f64 = -708.0;

/// `1 / k!` for `k = 13, 12, ..., 2`.
const INV_FACT: [f64; 12] = [
    1.0 / 6_227_020_800.0,
    1.0 / 479_001_600.0,
    1.0 / 39_916_800.0,
    1.0 / 3_628_800.0,
    1.0 / 362_880.0,
    1.0 / 40_320.0,
    1.0 / 5_040.0,
    1.0 / 720.0,
    1.0 / 120.0,
    1.0 / 24.0,
    1.0 / 6.0,
    0.5,
];

/// `e^x` for `x <= 0`; zero below `-708`, NaN propagates.
#[inline(always)]
pub(crate) fn exp_nonpos(x: f64) -> f64 {
    let xc = x.max(FLUSH);
    let shifted = xc * LOG2E + ROUND;
    let n = shifted - ROUND;
    let r = (-n).mul_add(LN2_HI, xc);
    let r = (-n).mul_add(LN2_LO, r);
    let mut p = INV_FACT[0];
    for c in &INV_FACT[1..] {
        p = p.mul_add(r, *c);
    }
    p = p.mul_add(r, 1.0);
    p = p.mul_add(r, 1.0);
    // Low mantissa bits of `shifted` hold n; the constant's low 12 bits are zero.
    let scale = f64::from_bits(shifted.to_bits().wrapping_add(1023) << 52);
    if x.is_nan() {
        x
    } else if x < FLUSH {
        0.0
    } else {
        p * scale
    }
}

#[inline(always)]
fn exp_slice_generic(xs: &mut [f64]) -> f64 {
    for x in xs.iter_mut() {
        *x = exp_nonpos(*x);
    }
    // Four interleaved partial sums, combined pairwise.
    let mut acc = [0.0; 4];
    let mut chunks = xs.chunks_exact(4);
    for c in &mut chunks {
        for (a, v) in acc.iter_mut().zip(c) {
            *a += v;
        }
    }
    let tail: f64 = chunks.remainder().iter().sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn exp_slice_avx2(xs: &mut [f64]) -> f64 {
    exp_slice_generic(xs)
}

/// Replaces each `x` (all `<= 0`) with `e^x` and returns their sum.
pub(crate) fn exp_slice(xs: &mut [f64]) -> f64 {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
        // SAFETY: the required CPU features were detected at runtime.
        return unsafe { exp_slice_avx2(xs) };
    }
    exp_slice_generic(xs)
}
