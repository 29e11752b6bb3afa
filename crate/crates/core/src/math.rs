//! A vectorizable joint `(e^z, e^z - 1)` kernel.

const LOG2E: f64 = std::f64::consts::LOG2_E;
const LN2_HI: f64 = 6.931_471_803_691_238e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
/// `1.5 · 2^52`: adding it rounds to an integer held in the low mantissa bits.
const SHIFT: f64 = 6_755_399_441_055_744.0;
/// `1/k!` for `k = 2..=13`.
const INV_FACT: [f64; 12] = [
    1.0 / 2.0,
    1.0 / 6.0,
    1.0 / 24.0,
    1.0 / 120.0,
    1.0 / 720.0,
    1.0 / 5_040.0,
    1.0 / 40_320.0,
    1.0 / 362_880.0,
    1.0 / 3_628_800.0,
    1.0 / 39_916_800.0,
    1.0 / 479_001_600.0,
    1.0 / 6_227_020_800.0,
];

/// `a·b + c`, fused when the target has FMA.
#[inline(always)]
fn madd(a: f64, b: f64, c: f64) -> f64 {
    if cfg!(target_feature = "fma") {
        a.mul_add(b, c)
    } else {
        a * b + c
    }
}

/// Inputs in `[-EXP_RANGE, EXP_RANGE]` are handled by [`exp_expm1_unchecked`].
pub const EXP_RANGE: f64 = 708.0;

/// `(e^z, e^z - 1)`, each within a few ulp, for `|z| ≤ EXP_RANGE`.
/// Branch-free so loops over it vectorize; outside the range the result is
/// meaningless.
#[inline(always)]
pub fn exp_expm1_unchecked(z: f64) -> (f64, f64) {
    let t = madd(z, LOG2E, SHIFT);
    let k = t - SHIFT;
    let r = madd(-k, LN2_LO, madd(-k, LN2_HI, z));
    let mut s = INV_FACT[11];
    for &c in INV_FACT[..11].iter().rev() {
        s = madd(r, s, c);
    }
    let p = r * madd(r, s, 1.0);
    let kbits = t.to_bits().wrapping_sub(SHIFT.to_bits());
    let scale = f64::from_bits(kbits.wrapping_add(1023) << 52);
    (madd(scale, p, scale), madd(scale, p, scale - 1.0))
}

/// `(e^z, e^z - 1)` for any `z`.
#[inline]
pub fn exp_expm1(z: f64) -> (f64, f64) {
    if z.abs() <= EXP_RANGE {
        exp_expm1_unchecked(z)
    } else {
        (z.exp(), z.exp_m1())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ulps(a: f64, b: f64) -> f64 {
        if a == b {
            0.0
        } else {
            (a - b).abs() / (b.abs() * f64::EPSILON)
        }
    }

    #[test]
    fn matches_std_on_a_grid() {
        let mut worst = (0.0f64, 0.0f64);
        for i in -200_000..=200_000 {
            let z = i as f64 * 3.5e-3;
            let (e, m) = exp_expm1(z);
            worst.0 = worst.0.max(ulps(e, z.exp()));
            worst.1 = worst.1.max(ulps(m, z.exp_m1()));
        }
        assert!(worst.0 < 4.0 && worst.1 < 4.0, "{worst:?}");
    }

    #[test]
    fn tiny_and_extreme_inputs() {
        for z in [0.0, 1e-300, -1e-300, 1e-12, -1e-9, 1e-6, -3e-5] {
            let (e, m) = exp_expm1(z);
            assert!(ulps(m, z.exp_m1()) < 2.0, "{z}");
            assert!(ulps(e, z.exp()) < 2.0, "{z}");
        }
        assert_eq!(exp_expm1(-800.0), (0.0, -1.0));
        assert_eq!(exp_expm1(800.0).0, f64::INFINITY);
        let (e, m) = exp_expm1(-EXP_RANGE);
        assert!(e > 0.0 && ulps(e, (-EXP_RANGE).exp()) < 4.0);
        assert_eq!(m, -1.0);
    }

    proptest! {
        #[test]
        fn random_inputs(z in -700.0f64..700.0) {
            let (e, m) = exp_expm1(z);
            prop_assert!(ulps(e, z.exp()) < 4.0);
            prop_assert!(ulps(m, z.exp_m1()) < 4.0);
        }
    }
}
