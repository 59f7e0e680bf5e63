//! Standard-normal CDF, its inverse, and the chi-square(1) quantile the
//! Goodman bounds need.
//!
//! `erfc` follows Cody's rational Chebyshev approximations (the SPECFUN
//! coefficients), accurate to a few ulp. The inverse CDF is Acklam's rational
//! approximation polished by one Halley step against that `erfc`, which takes
//! the round-trip error |Phi(Phi^-1(p)) - p| to machine noise.

use crate::error::{Error, Result};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const SQRT_2PI: f64 = 2.506_628_274_631_000_7;
/// 1/sqrt(pi)
const FRAC_1_SQRT_PI: f64 = 0.564_189_583_547_756_3;

/// Complementary error function.
pub fn erfc(x: f64) -> f64 {
    let y = x.abs();
    let result = if y <= 0.46875 {
        return 1.0 - erf_small(x);
    } else if y <= 4.0 {
        erfc_mid(y)
    } else {
        erfc_large(y)
    };
    if x < 0.0 {
        2.0 - result
    } else {
        result
    }
}

/// Error function.
pub fn erf(x: f64) -> f64 {
    if x.abs() <= 0.46875 {
        erf_small(x)
    } else {
        1.0 - erfc(x)
    }
}

/// erf on |x| <= 0.46875.
fn erf_small(x: f64) -> f64 {
    const A: [f64; 5] = [
        3.161_123_743_870_565_6e0,
        1.138_641_541_510_501_6e2,
        3.774_852_376_853_020_2e2,
        3.209_377_589_138_469_5e3,
        1.857_777_061_846_031_5e-1,
    ];
    const B: [f64; 4] = [
        2.360_129_095_234_412_1e1,
        2.440_246_379_344_441_7e2,
        1.282_616_526_077_372_3e3,
        2.844_236_833_439_170_6e3,
    ];
    let z = x * x;
    let mut xnum = A[4] * z;
    let mut xden = z;
    for i in 0..3 {
        xnum = (xnum + A[i]) * z;
        xden = (xden + B[i]) * z;
    }
    x * (xnum + A[3]) / (xden + B[3])
}

/// exp(-y^2) computed with a split argument to avoid rounding in the exponent.
fn exp_neg_y_squared(y: f64) -> f64 {
    let z = (y * 16.0).trunc() / 16.0;
    let del = (y - z) * (y + z);
    (-z * z).exp() * (-del).exp()
}

/// erfc on 0.46875 < y <= 4.
fn erfc_mid(y: f64) -> f64 {
    const C: [f64; 9] = [
        5.641_884_969_886_700_9e-1,
        8.883_149_794_388_375_9e0,
        6.611_919_063_714_163e1,
        2.986_351_381_974_001_3e2,
        8.819_522_212_417_690_9e2,
        1.712_047_612_634_070_6e3,
        2.051_078_377_826_071_5e3,
        1.230_339_354_797_997_2e3,
        2.153_115_354_744_038_5e-8,
    ];
    const D: [f64; 8] = [
        1.574_492_611_070_983_5e1,
        1.176_939_508_913_125e2,
        5.371_811_018_620_098_6e2,
        1.621_389_574_566_690_2e3,
        3.290_799_235_733_459_6e3,
        4.362_619_090_143_247e3,
        3.439_367_674_143_721_6e3,
        1.230_339_354_803_749_4e3,
    ];
    let mut xnum = C[8] * y;
    let mut xden = y;
    for i in 0..7 {
        xnum = (xnum + C[i]) * y;
        xden = (xden + D[i]) * y;
    }
    let result = (xnum + C[7]) / (xden + D[7]);
    exp_neg_y_squared(y) * result
}

/// erfc on y > 4.
fn erfc_large(y: f64) -> f64 {
    const P: [f64; 6] = [
        3.053_266_349_612_323_4e-1,
        3.603_448_999_498_044_4e-1,
        1.257_817_261_112_292_5e-1,
        1.608_378_514_874_227_7e-2,
        6.587_491_615_298_378e-4,
        1.631_538_713_730_209_8e-2,
    ];
    const Q: [f64; 5] = [
        2.568_520_192_289_822_4e0,
        1.872_952_849_923_460_5e0,
        5.279_051_029_514_284e-1,
        6.051_834_131_244_132e-2,
        2.335_204_976_268_691_8e-3,
    ];
    if y >= 26.6 {
        return 0.0; // below the smallest positive normal result
    }
    let z = 1.0 / (y * y);
    let mut xnum = P[5] * z;
    let mut xden = z;
    for i in 0..4 {
        xnum = (xnum + P[i]) * z;
        xden = (xden + Q[i]) * z;
    }
    let mut result = z * (xnum + P[4]) / (xden + Q[4]);
    result = (FRAC_1_SQRT_PI - result) / y;
    exp_neg_y_squared(y) * result
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// Standard normal quantile function. Domain error outside (0, 1).
pub fn inverse_normal_cdf(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!(
            "inverse normal CDF needs p in (0, 1), got {p}"
        )));
    }
    let x = acklam(p);
    // One Halley step against the high-accuracy CDF.
    let e = normal_cdf(x) - p;
    let u = e * SQRT_2PI * (x * x / 2.0).exp();
    Ok(x - u / (1.0 + x * u / 2.0))
}

/// Acklam's rational approximation, |relative error| < 1.15e-9.
fn acklam(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_690e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239e0,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838e0,
        -2.549_732_539_343_734e0,
        4.374_664_141_464_968e0,
        2.938_163_982_698_783e0,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996e0,
        3.754_408_661_907_416e0,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// Quantile of the chi-square distribution with one degree of freedom:
/// if Z ~ N(0,1) then Z^2 ~ chi2(1), so the quantile at `p` is
/// `Phi^-1((1+p)/2)^2`.
pub fn chi_square_quantile_1df(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!(
            "chi-square quantile needs p in (0, 1), got {p}"
        )));
    }
    let z = inverse_normal_cdf((1.0 + p) / 2.0)?;
    Ok(z * z)
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Series-based standard normal CDF, independent of the Cody/Acklam path.
    //! erf is evaluated through the all-positive-term confluent series
    //! `erf(x) = 2/sqrt(pi) * exp(-x^2) * sum_n 2^n x^(2n+1) / (2n+1)!!`,
    //! which is cancellation-free for every x.

    pub fn erf_series(x: f64) -> f64 {
        let ax = x.abs();
        if ax == 0.0 {
            return 0.0;
        }
        if ax > 9.0 {
            return x.signum();
        }
        let mut term = ax; // n = 0: x / 1!!
        let mut sum = term;
        let mut n = 1u32;
        loop {
            term *= 2.0 * ax * ax / (2.0 * n as f64 + 1.0);
            sum += term;
            n += 1;
            if term < sum * 1e-18 || n > 2000 {
                break;
            }
        }
        let value = 2.0 / std::f64::consts::PI.sqrt() * (-ax * ax).exp() * sum;
        value.copysign(x)
    }

    pub fn normal_cdf_series(x: f64) -> f64 {
        0.5 * (1.0 + erf_series(x / std::f64::consts::SQRT_2))
    }

    /// Bisection inverse of the chi-square(1) CDF `2*Phi(sqrt(b)) - 1`.
    pub fn chi_square_quantile_1df_bisect(p: f64) -> f64 {
        let cdf = |b: f64| 2.0 * normal_cdf_series(b.sqrt()) - 1.0;
        let (mut lo, mut hi) = (0.0f64, 200.0f64);
        for _ in 0..200 {
            let mid = (lo + hi) / 2.0;
            if cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (lo + hi) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_at_half_is_zero() {
        assert!(inverse_normal_cdf(0.5).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn inverse_at_phi_of_one() {
        // Phi(1) = 0.8413447461...
        let x = inverse_normal_cdf(0.8413447461).unwrap();
        assert!((x - 1.0).abs() <= 1e-6, "x = {x}");
    }

    #[test]
    fn symmetry_identity() {
        for &p in &[0.001, 0.1, 0.25, 0.37, 0.49, 0.73, 0.9, 0.999] {
            let a = inverse_normal_cdf(p).unwrap();
            let b = inverse_normal_cdf(1.0 - p).unwrap();
            assert!((a + b).abs() <= 1e-9, "p = {p}: {a} vs {b}");
        }
    }

    #[test]
    fn domain_errors() {
        for bad in [0.0, 1.0, -0.5, 1.5, f64::NAN] {
            assert!(inverse_normal_cdf(bad).is_err());
        }
    }

    #[test]
    fn roundtrip_against_series_oracle() {
        // |Phi(Phi^-1(p)) - p| <= 1e-9 across the full working range, with the
        // CDF evaluated by the independent series oracle.
        let mut worst = 0.0f64;
        let mut grid = vec![1e-12, 1e-10, 1e-8, 1e-6, 1e-4];
        for i in 1..100 {
            grid.push(i as f64 / 100.0);
        }
        for &lo in &[1e-12, 1e-10, 1e-8, 1e-6, 1e-4] {
            grid.push(1.0 - lo);
        }
        for &p in &grid {
            let x = inverse_normal_cdf(p).unwrap();
            let back = oracle::normal_cdf_series(x);
            worst = worst.max((back - p).abs());
        }
        assert!(worst <= 1e-9, "worst abs error {worst}");
    }

    #[test]
    fn cdf_agrees_with_series_oracle() {
        let mut worst = 0.0f64;
        let mut x = -8.0;
        while x <= 8.0 {
            worst = worst.max((normal_cdf(x) - oracle::normal_cdf_series(x)).abs());
            x += 0.05;
        }
        assert!(worst <= 1e-13, "worst abs error {worst}");
    }

    #[test]
    fn chi_square_quantile_matches_bisection_oracle() {
        for &p in &[0.5, 0.9, 0.95, 0.975, 0.9875, 0.99, 0.999] {
            let b = chi_square_quantile_1df(p).unwrap();
            let oracle_b = oracle::chi_square_quantile_1df_bisect(p);
            assert!((b - oracle_b).abs() <= 1e-7, "p = {p}: {b} vs {oracle_b}");
        }
        // Spot value: chi2(1) quantile at 0.95 is 3.841458820694124.
        assert!((chi_square_quantile_1df(0.95).unwrap() - 3.841458820694124).abs() <= 1e-9);
    }
}
