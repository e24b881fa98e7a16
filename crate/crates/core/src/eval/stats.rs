use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    /// Two-sided.
    pub p: f64,
    pub df: f64,
}

/// Paired t-test on `a - b`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Input(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Input(format!("paired t-test needs at least 2 pairs, got {n}")));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if diffs.iter().all(|&d| d == 0.0) {
        return Err(Error::Degenerate("identical runs".into()));
    }
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    let df = (n - 1) as f64;
    if var == 0.0 {
        return Ok(TTest { t: mean.signum() * f64::INFINITY, p: 0.0, df });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("df >= 1");
    let p = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(TTest { t, p, df })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_runs_are_degenerate() {
        let a = [0.7, 0.71, 0.69];
        assert!(matches!(paired_ttest(&a, &a), Err(Error::Degenerate(_))));
        assert!(matches!(paired_ttest(&[1.0], &[0.0]), Err(Error::Input(_))));
    }

    #[test]
    fn matches_reference_values() {
        // Reference from scipy.stats.ttest_rel.
        let a = [0.74, 0.75, 0.73, 0.76, 0.745];
        let b = [0.72, 0.74, 0.725, 0.741, 0.72];
        let r = paired_ttest(&a, &b).unwrap();
        assert!((r.t - 4.358_724_346_639_138).abs() < 1e-9, "{}", r.t);
        assert!((r.p - 0.012_074_196_231_391_719).abs() < 1e-9, "{}", r.p);
    }

    #[test]
    fn constant_shift_with_jitter_is_significant() {
        let a: Vec<f64> = (0..10).map(|i| 0.7 + 0.001 * ((i * 7) % 3) as f64).collect();
        let b: Vec<f64> = a.iter().enumerate().map(|(i, v)| v - 0.05 - 1e-4 * (i % 2) as f64).collect();
        let r = paired_ttest(&a, &b).unwrap();
        assert!(r.t > 0.0 && r.p < 1e-10);
    }
}
