use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, DiscreteCDF, StudentsT};

use crate::error::{Error, Result};

/// p-values are reported no smaller than this when the statistic diverges.
pub const P_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: usize,
    pub p: f64,
    pub mean_diff: f64,
}

/// Two-sided paired t-test on `a − b` with `n − 1` degrees of freedom.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            op: "paired_t_test",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::contract(format!("paired t-test needs n >= 2, got {n}")));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    if var == 0.0 {
        // Degenerate: identical pairs, or a perfectly constant shift.
        return Ok(if mean == 0.0 {
            TTest {
                t: 0.0,
                df,
                p: 1.0,
                mean_diff: 0.0,
            }
        } else {
            TTest {
                t: f64::INFINITY.copysign(mean),
                df,
                p: P_FLOOR,
                mean_diff: mean,
            }
        });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::NumericDomain {
        op: "paired_t_test",
        detail: e.to_string(),
    })?;
    let p = (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0);
    Ok(TTest {
        t,
        df,
        p,
        mean_diff: mean,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McNemar {
    /// Items only the first classifier got right.
    pub b: usize,
    /// Items only the second classifier got right.
    pub c: usize,
    /// Exact two-sided binomial p on the discordant pairs.
    pub p_exact: f64,
    /// Continuity-corrected chi-square p, when `b + c >= 25`.
    pub p_chi2: Option<f64>,
    pub note: Option<String>,
}

pub fn mcnemar_from_counts(b: usize, c: usize) -> Result<McNemar> {
    let n = b + c;
    if n == 0 {
        return Ok(McNemar {
            b,
            c,
            p_exact: 1.0,
            p_chi2: None,
            note: Some("no discordant pairs".into()),
        });
    }
    let k = b.min(c) as u64;
    let binom = Binomial::new(0.5, n as u64).map_err(|e| Error::NumericDomain {
        op: "mcnemar",
        detail: e.to_string(),
    })?;
    let p_exact = (2.0 * binom.cdf(k)).min(1.0);
    let p_chi2 = if n >= 25 {
        let stat = ((b as f64 - c as f64).abs() - 1.0).max(0.0).powi(2) / n as f64;
        let chi = ChiSquared::new(1.0).expect("one degree of freedom");
        Some(chi.sf(stat))
    } else {
        None
    };
    Ok(McNemar {
        b,
        c,
        p_exact,
        p_chi2,
        note: None,
    })
}

pub fn mcnemar_test(correct_a: &[bool], correct_b: &[bool]) -> Result<McNemar> {
    if correct_a.len() != correct_b.len() {
        return Err(Error::Dimension {
            op: "mcnemar_test",
            lhs: vec![correct_a.len()],
            rhs: vec![correct_b.len()],
        });
    }
    let b = correct_a.iter().zip(correct_b).filter(|(a, b)| **a && !**b).count();
    let c = correct_a.iter().zip(correct_b).filter(|(a, b)| !**a && **b).count();
    mcnemar_from_counts(b, c)
}
