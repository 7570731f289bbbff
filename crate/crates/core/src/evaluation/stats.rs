//! Paired t-test and Pearson correlation.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("need equal-length samples of at least {min}, got {left} and {right}")]
    Length { min: usize, left: usize, right: usize },
    #[error("zero variance; statistic undefined")]
    ZeroVariance,
}

/// A statistic that may be infinite. Serialized as a number, or as the
/// strings `"+inf"` / `"-inf"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat(pub f64);

impl Serialize for Stat {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self.0 {
            v if v == f64::INFINITY => s.serialize_str("+inf"),
            v if v == f64::NEG_INFINITY => s.serialize_str("-inf"),
            v => s.serialize_f64(v),
        }
    }
}

impl<'de> Deserialize<'de> for Stat {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(f64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(v) => Ok(Stat(v)),
            Raw::S(s) if s == "+inf" => Ok(Stat(f64::INFINITY)),
            Raw::S(s) if s == "-inf" => Ok(Stat(f64::NEG_INFINITY)),
            Raw::S(s) => Err(serde::de::Error::custom(format!("bad statistic {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: Stat,
    pub p: f64,
    pub df: usize,
    pub mean_diff: f64,
    pub n: usize,
}

fn two_sided_p(t: f64, df: f64) -> f64 {
    let dist = StudentsT::new(0.0, 1.0, df).expect("df is positive");
    (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
}

/// Paired t on `post - pre`. Zero variance of the differences gives t = 0,
/// p = 1 for equal means and an infinite t with p = 0 otherwise.
pub fn paired_t(pre: &[f64], post: &[f64]) -> Result<TTest, StatsError> {
    if pre.len() != post.len() || pre.len() < 2 {
        return Err(StatsError::Length { min: 2, left: pre.len(), right: post.len() });
    }
    let n = pre.len();
    let d: Vec<f64> = pre.iter().zip(post).map(|(a, b)| b - a).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    if var == 0.0 {
        let (t, p) = if mean == 0.0 { (0.0, 1.0) } else { (mean.signum() * f64::INFINITY, 0.0) };
        return Ok(TTest { t: Stat(t), p, df, mean_diff: mean, n });
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    Ok(TTest { t: Stat(t), p: two_sided_p(t, df as f64), df, mean_diff: mean, n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    pub p: f64,
    pub n: usize,
}

/// Sample Pearson r with a two-sided p from `t = r √((n-2)/(1-r²))`.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<Correlation, StatsError> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(StatsError::Length { min: 3, left: x.len(), right: y.len() });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let p = if r.abs() >= 1.0 {
        0.0
    } else {
        two_sided_p(r * ((n - 2.0) / (1.0 - r * r)).sqrt(), n - 2.0)
    };
    Ok(Correlation { r, p, n: x.len() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_paired_t() {
        let v = [1.0, 2.0, 3.0];
        let same = paired_t(&v, &v).unwrap();
        assert_eq!((same.t, same.p), (Stat(0.0), 1.0));
        let plus_one: Vec<f64> = [1.0, 2.0, 3.0, 4.0, 5.0].iter().map(|x| x + 1.0).collect();
        let inf = paired_t(&[1.0, 2.0, 3.0, 4.0, 5.0], &plus_one).unwrap();
        assert_eq!((inf.t, inf.p), (Stat(f64::INFINITY), 0.0));
        assert_eq!(serde_json::to_string(&inf.t).unwrap(), "\"+inf\"");
        assert!(paired_t(&[1.0], &[2.0]).is_err());
    }

    #[test]
    fn pearson_edges() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson_r(&x, &y).unwrap().r + 1.0).abs() < 1e-12);
        assert_eq!(pearson_r(&x, &[1.0; 4]), Err(StatsError::ZeroVariance));
        assert!(pearson_r(&x[..2], &y[..2]).is_err());
    }
}
