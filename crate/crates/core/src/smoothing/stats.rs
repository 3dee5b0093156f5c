//! Normal quantile, exact binomial bounds and the certified radius.

// Published coefficients are kept digit for digit.
#![allow(clippy::excessive_precision)]

use crate::error::{Error, Result};

/// Smallest distance kept from 0 and 1 before taking a normal quantile.
pub const PROB_CLAMP: f64 = 1e-12;

fn poly(coef: &[f64], x: f64) -> f64 {
    coef.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

/// Standard normal quantile Φ⁻¹(p) by Wichura's AS241 (PPND16), accurate to
/// about 1e-16 relative. Returns ±∞ at the endpoints and NaN outside [0,1].
pub fn norm_ppf(p: f64) -> f64 {
    const A: [f64; 8] = [
        3.387_132_872_796_366_608,
        133.141_667_891_784_377_45,
        1_971.590_950_306_551_442_7,
        13_731.693_765_509_461_125,
        45_921.953_931_549_871_457,
        67_265.770_927_008_700_853,
        33_430.575_583_588_128_105,
        2_509.080_928_730_122_672_7,
    ];
    const B: [f64; 8] = [
        1.0,
        42.313_330_701_600_911_252,
        687.187_007_492_057_908_3,
        5_394.196_021_424_751_107_7,
        21_213.794_301_586_595_867,
        39_307.895_800_092_710_61,
        28_729.085_735_721_942_674,
        5_226.495_278_852_854_561,
    ];
    const C: [f64; 8] = [
        1.423_437_110_749_683_577_34,
        4.630_337_846_156_545_295_9,
        5.769_497_221_460_691_405_5,
        3.647_848_324_763_204_605_04,
        1.270_458_252_452_368_382_58,
        0.241_780_725_177_450_611_77,
        0.022_723_844_989_269_184_583_3,
        7.745_450_142_783_414_076_4e-4,
    ];
    const D: [f64; 8] = [
        1.0,
        2.053_191_626_637_758_821_87,
        1.676_384_830_183_803_849_4,
        0.689_767_334_985_100_004_55,
        0.148_103_976_427_480_074_59,
        0.015_198_666_563_616_457_196_6,
        5.475_938_084_995_344_946e-4,
        1.050_750_071_644_416_843_24e-9,
    ];
    const E: [f64; 8] = [
        6.657_904_643_501_103_777_2,
        5.463_784_911_164_114_369_9,
        1.784_826_539_917_291_335_8,
        0.296_560_571_828_504_891_23,
        0.026_532_189_526_576_123_093,
        0.001_242_660_947_388_078_438_6,
        2.711_555_568_743_487_578_15e-5,
        2.010_334_399_292_288_132_65e-7,
    ];
    const F: [f64; 8] = [
        1.0,
        0.599_832_206_555_887_937_69,
        0.136_929_880_922_735_805_31,
        0.014_875_361_290_850_614_852_5,
        7.868_691_311_456_132_591e-4,
        1.846_318_317_510_054_681_8e-5,
        1.421_511_758_316_445_888_7e-7,
        2.044_263_103_389_939_785_64e-15,
    ];

    if p.is_nan() || !(0.0..=1.0).contains(&p) {
        return f64::NAN;
    }
    if p == 0.0 {
        return f64::NEG_INFINITY;
    }
    if p == 1.0 {
        return f64::INFINITY;
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q * poly(&A, r) / poly(&B, r);
    }
    let r = (-(if q < 0.0 { p } else { 1.0 - p }).ln()).sqrt();
    let val = if r <= 5.0 {
        let r = r - 1.6;
        poly(&C, r) / poly(&D, r)
    } else {
        let r = r - 5.0;
        poly(&E, r) / poly(&F, r)
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

/// ln Γ(x) for x > 0 (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

fn ln_choose(n: u64, k: u64) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// Σ_{j ∈ range} C(n,j) p^j (1-p)^(n-j), accumulated in log space.
fn binom_mass(n: u64, p: f64, lo: u64, hi: u64) -> f64 {
    if lo > hi {
        return 0.0;
    }
    if p <= 0.0 {
        return if lo == 0 { 1.0 } else { 0.0 };
    }
    if p >= 1.0 {
        return if hi == n { 1.0 } else { 0.0 };
    }
    let (lp, lq) = (p.ln(), (-p).ln_1p());
    let log_terms: Vec<f64> = (lo..=hi)
        .map(|j| ln_choose(n, j) + j as f64 * lp + (n - j) as f64 * lq)
        .collect();
    let m = log_terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return 0.0;
    }
    m.exp() * log_terms.iter().map(|t| (t - m).exp()).sum::<f64>()
}

/// P(X ≥ k) for X ~ Binomial(n, p).
pub fn binom_sf(k: u64, n: u64, p: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    if n - k + 1 <= k {
        binom_mass(n, p, k, n)
    } else {
        (1.0 - binom_mass(n, p, 0, k - 1)).max(0.0)
    }
}

/// P(X ≤ k) for X ~ Binomial(n, p).
pub fn binom_cdf(k: u64, n: u64, p: f64) -> f64 {
    if k >= n {
        return 1.0;
    }
    1.0 - binom_sf(k + 1, n, p)
}

fn check_counts(k: u64, n: u64, alpha: f64) -> Result<()> {
    if n == 0 || k > n {
        return Err(Error::Contract(format!("need 0 ≤ k ≤ n with n ≥ 1, got k={k}, n={n}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Contract(format!("alpha must lie in (0,1), got {alpha}")));
    }
    Ok(())
}

/// One-sided Clopper–Pearson lower bound at level 1−α: the `p` at which
/// P(X ≥ k; n, p) = α.
pub fn lower_conf_bound(k: u64, n: u64, alpha: f64) -> Result<f64> {
    check_counts(k, n, alpha)?;
    if k == 0 {
        return Ok(0.0);
    }
    if k == n {
        return Ok(alpha.powf(1.0 / n as f64));
    }
    let (mut lo, mut hi) = (0.0f64, k as f64 / n as f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if binom_sf(k, n, mid) > alpha {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// One-sided Clopper–Pearson upper bound at level 1−α.
pub fn upper_conf_bound(k: u64, n: u64, alpha: f64) -> Result<f64> {
    Ok(1.0 - lower_conf_bound(n - k.min(n), n, alpha)?)
}

/// Exact two-sided binomial test of H0: p = ½ given `k` successes in `n`.
pub fn binom_test_half(k: u64, n: u64) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let m = k.min(n - k);
    if 2 * m == n {
        return 1.0;
    }
    (2.0 * binom_cdf(m, n, 0.5)).min(1.0)
}

/// Certified ℓ2 radius σ/2·(Φ⁻¹(pA) − Φ⁻¹(pB)); zero when pA ≤ pB.
pub fn radius(sigma: f64, pa_lower: f64, pb_upper: f64) -> f64 {
    if pa_lower <= pb_upper {
        return 0.0;
    }
    let clamp = |p: f64| p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    0.5 * sigma * (norm_ppf(clamp(pa_lower)) - norm_ppf(clamp(pb_upper)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn quantile_fixed_points() {
        assert_eq!(norm_ppf(0.5), 0.0);
        assert_abs_diff_eq!(norm_ppf(0.975), 1.959_963_984_540_054, epsilon = 1e-14);
        assert_abs_diff_eq!(norm_ppf(0.8), 0.841_621_233_572_914_3, epsilon = 1e-14);
        assert_abs_diff_eq!(norm_ppf(1e-10), -6.361_340_902_404_056, epsilon = 1e-12);
        assert!(norm_ppf(1.5).is_nan());
    }

    #[test]
    fn ln_gamma_on_factorials() {
        let mut lf = 0.0f64;
        for n in 1..60u32 {
            lf += (n as f64).ln();
            assert_abs_diff_eq!(ln_gamma(n as f64 + 1.0), lf, epsilon = 1e-10 * lf.max(1.0));
        }
    }

    #[test]
    fn clopper_pearson_edges() {
        assert_eq!(lower_conf_bound(0, 10, 0.05).unwrap(), 0.0);
        assert_abs_diff_eq!(lower_conf_bound(1000, 1000, 0.001).unwrap(), 0.001f64.powf(1e-3), epsilon = 1e-15);
        assert!(lower_conf_bound(11, 10, 0.05).is_err());
        assert!(lower_conf_bound(5, 10, 1.0).is_err());
        let lo = lower_conf_bound(7, 10, 0.05).unwrap();
        assert_abs_diff_eq!(binom_sf(7, 10, lo), 0.05, epsilon = 1e-12);
        assert!(upper_conf_bound(3, 10, 0.05).unwrap() > 0.3);
    }

    #[test]
    fn binomial_test_examples() {
        assert!(binom_test_half(100, 100) < 1e-25);
        let p = binom_test_half(60, 100);
        assert_abs_diff_eq!(p, 0.056_887_933_640_980_45, epsilon = 1e-10);
        assert_eq!(binom_test_half(50, 100), 1.0);
        assert_eq!(binom_test_half(40, 100), p);
    }

    #[test]
    fn radius_examples() {
        assert_eq!(radius(1.0, 0.5, 0.5), 0.0);
        assert_eq!(radius(1.0, 0.4, 0.6), 0.0);
        assert_abs_diff_eq!(radius(0.5, 0.8, 0.2), 0.420_810_616_786_457, epsilon = 1e-12);
        assert_abs_diff_eq!(radius(1.0, 0.9, 0.1), 1.281_551_565_544_600_5, epsilon = 1e-12);
        assert!(radius(1.0, 1.0, 0.0).is_finite());
    }
}
