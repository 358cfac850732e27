//! Branch-free hyperbolic tangent that the compiler can vectorize.
//!
//! The libm routine goes through `expm1` one element at a time and
//! dominated the forward pass of the networks.

#![allow(clippy::excessive_precision)]

const SMALL: f64 = 0.625;
const LOG2E: f64 = std::f64::consts::LOG2_E;
const LN2_HI: f64 = 6.931_471_803_691_238_164_9e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_700_0e-10;
/// Adding and subtracting this rounds to the nearest integer.
const ROUND: f64 = 6_755_399_441_055_744.0;

/// Rational approximation on `|x| ≤ 0.625`, as in Cephes.
const P: [f64; 3] = [
    -9.643_991_794_250_522_386_28e-1,
    -9.928_772_310_019_185_865_64e1,
    -1.614_687_684_417_083_479_52e3,
];
const Q: [f64; 3] = [
    1.128_116_784_916_329_314_02e2,
    2.235_488_390_601_004_485_83e3,
    4.844_063_053_251_254_860_48e3,
];

/// `exp(y)` for `y ∈ [−45, 0]`.
#[inline(always)]
fn exp_neg(y: f64) -> f64 {
    let kf = (y * LOG2E + ROUND) - ROUND;
    let r = (y - kf * LN2_HI) - kf * LN2_LO;
    // Taylor series to degree 13: |r| ≤ ln2/2 keeps the tail below 1 ulp.
    let mut p = 1.0 / 6_227_020_800.0;
    for c in [
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
        1.0,
        1.0,
    ] {
        p = p * r + c;
    }
    let k = kf as i64;
    p * f64::from_bits(((k + 1023) as u64) << 52)
}

#[inline(always)]
pub fn tanh(x: f64) -> f64 {
    let a = x.abs().min(22.0);
    let s = a * a;
    let num = (P[0] * s + P[1]) * s + P[2];
    let den = ((s + Q[0]) * s + Q[1]) * s + Q[2];
    let small = a + a * s * (num / den);
    let t = exp_neg(-2.0 * a);
    let large = (1.0 - t) / (1.0 + t);
    let y = if a <= SMALL { small } else { large };
    if x.is_nan() {
        x
    } else {
        y.copysign(x)
    }
}

/// Element-wise `tanh`, using AVX2 and FMA registers when the CPU has them.
/// Both paths perform the same IEEE operations, so results are identical.
pub fn tanh_slice(xs: &[f64]) -> Vec<f64> {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
            // SAFETY: the required features were detected at runtime.
            return unsafe { tanh_slice_avx2(xs) };
        }
    }
    xs.iter().map(|&x| tanh(x)).collect()
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn tanh_slice_avx2(xs: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; xs.len()];
    for (o, &x) in out.iter_mut().zip(xs) {
        *o = tanh(x);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ulps(a: f64, b: f64) -> u64 {
        if a == b {
            return 0;
        }
        (a.to_bits() as i64 - b.to_bits() as i64).unsigned_abs()
    }

    #[test]
    fn matches_libm() {
        let mut worst = 0;
        let mut x = -25.0;
        while x < 25.0 {
            for y in [x, x * 1e-3, x * 1e-9] {
                worst = worst.max(ulps(tanh(y), y.tanh()));
            }
            x += 0.000_37;
        }
        assert!(worst <= 3, "{worst} ulps");
    }

    #[test]
    fn slice_matches_scalar() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64 - 500.0) * 0.031).collect();
        let out = tanh_slice(&xs);
        for (x, y) in xs.iter().zip(out) {
            assert_eq!(y.to_bits(), tanh(*x).to_bits());
        }
    }

    #[test]
    fn special_values() {
        assert_eq!(tanh(0.0), 0.0);
        assert!(tanh(-0.0).is_sign_negative());
        assert_eq!(tanh(f64::INFINITY), 1.0);
        assert_eq!(tanh(f64::NEG_INFINITY), -1.0);
        assert_eq!(tanh(1e300), 1.0);
        assert!(tanh(f64::NAN).is_nan());
        assert_eq!(tanh(1e-300), 1e-300);
    }
}
