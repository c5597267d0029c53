use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZTest {
    pub n: usize,
    pub mean_difference: f64,
    pub z: f64,
    /// Two-sided p-value `2(1 - Φ(|z|))`.
    pub p_two_sided: f64,
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Paired Z-test on the differences `a[i] - b[i]`, using the sample standard
/// deviation (n - 1 denominator).
pub fn paired_z_test(a: &[f64], b: &[f64]) -> Result<ZTest> {
    if a.len() != b.len() {
        return Err(Error::dim(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Degenerate(format!("need at least 2 pairs, got {n}")));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if !(var > 0.0) {
        return Err(Error::Degenerate("paired differences have zero variance".into()));
    }
    let z = mean / (var.sqrt() / (n as f64).sqrt());
    // erfc avoids the cancellation in 1 - Φ for large |z|.
    let p = libm::erfc(z.abs() / std::f64::consts::SQRT_2);
    Ok(ZTest {
        n,
        mean_difference: mean,
        z,
        p_two_sided: p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_differences() {
        let t = paired_z_test(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(t.z, 0.0);
        assert_eq!(t.p_two_sided, 1.0);
    }

    #[test]
    fn zero_variance_is_degenerate() {
        let a = [0.3, 0.5, 0.9];
        assert!(matches!(paired_z_test(&a, &a), Err(Error::Degenerate(_))));
        assert!(matches!(paired_z_test(&[1.0, 2.0], &[0.0, 1.0]), Err(Error::Degenerate(_))));
        assert!(paired_z_test(&[1.0], &[0.0]).is_err());
        assert!(paired_z_test(&[1.0, 2.0], &[0.0]).is_err());
    }

    #[test]
    fn known_quantiles() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-16);
        assert!((normal_cdf(1.959963984540054) - 0.975).abs() < 1e-12);
        assert!((normal_cdf(-1.0) - 0.15865525393145707).abs() < 1e-15);
    }
}
