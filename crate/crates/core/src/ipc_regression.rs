//! Linear regression of IPC columns on covariates.
//!
//! Point estimates are OLS. Robust standard errors use the HC1 sandwich
//! `n/(n−k) (Z'Z)⁻¹ Z' diag(e²) Z (Z'Z)⁻¹` and t statistics are referred to
//! Student-t with `n − k` degrees of freedom. Rows with a missing response or
//! covariate are dropped.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::data::Dataset;
use crate::error::{Result, SemError};
use crate::ipc_core::IpcMatrix;
use crate::linalg;

pub const INTERCEPT: &str = "(intercept)";

/// Covariate matrix with named columns; the first column is the intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub names: Vec<String>,
    /// `n × k`; NaN marks a missing value.
    pub z: DMatrix<f64>,
}

impl Design {
    pub fn intercept_only(n: usize) -> Design {
        Design {
            names: vec![INTERCEPT.to_string()],
            z: DMatrix::from_element(n, 1, 1.0),
        }
    }

    /// Intercept followed by `columns`, each of length `n`.
    pub fn with_intercept(columns: &[(&str, &[f64])], n: usize) -> Result<Design> {
        let mut design = Design::intercept_only(n);
        for (name, values) in columns {
            design.push(name, values)?;
        }
        Ok(design)
    }

    pub fn from_dataset(data: &Dataset, covariates: &[String]) -> Result<Design> {
        let mut design = Design::intercept_only(data.n_rows());
        for name in covariates {
            design.push(name, data.column(name)?)?;
        }
        Ok(design)
    }

    fn push(&mut self, name: &str, values: &[f64]) -> Result<()> {
        if values.len() != self.z.nrows() {
            return Err(SemError::DimensionMismatch(format!(
                "covariate `{name}` has {} rows, design has {}",
                values.len(),
                self.z.nrows()
            )));
        }
        if self.names.iter().any(|n| n == name) {
            return Err(SemError::ColumnCollision(name.to_string()));
        }
        let k = self.z.ncols();
        self.z = self.z.clone().insert_column(k, 0.0);
        self.z.column_mut(k).copy_from_slice(values);
        self.names.push(name.to_string());
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.z.nrows()
    }

    pub fn k(&self) -> usize {
        self.z.ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub covariate: String,
    pub gamma_hat: f64,
    pub se_robust: f64,
    pub se_classical: f64,
    /// `None` when the robust standard error is zero.
    pub t_stat: Option<f64>,
    pub p_value: Option<f64>,
}

impl Coefficient {
    pub fn degenerate(&self) -> bool {
        self.t_stat.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    pub coefficients: Vec<Coefficient>,
    /// `None` when the response is constant.
    pub r_squared: Option<f64>,
    pub n_used: usize,
    pub df_resid: usize,
}

impl RegressionFit {
    pub fn coefficient(&self, covariate: &str) -> Option<&Coefficient> {
        self.coefficients.iter().find(|c| c.covariate == covariate)
    }

    /// Two-sided `level` interval for a coefficient from the t reference.
    pub fn confidence_interval(&self, covariate: &str, level: f64) -> Option<(f64, f64)> {
        let c = self.coefficient(covariate)?;
        let dist = StudentsT::new(0.0, 1.0, self.df_resid as f64).ok()?;
        let crit = dist.inverse_cdf(0.5 + level / 2.0);
        Some((c.gamma_hat - crit * c.se_robust, c.gamma_hat + crit * c.se_robust))
    }
}

/// OLS of `y` on `design` with HC1 standard errors.
pub fn regress(y: &[f64], design: &Design) -> Result<RegressionFit> {
    if y.len() != design.n() {
        return Err(SemError::DimensionMismatch(format!(
            "response has {} rows, design has {}",
            y.len(),
            design.n()
        )));
    }
    let keep: Vec<usize> = (0..y.len())
        .filter(|&i| y[i].is_finite() && design.z.row(i).iter().all(|v| v.is_finite()))
        .collect();
    let n = keep.len();
    let k = design.k();
    if n <= k {
        return Err(SemError::RankDeficient);
    }
    let z = design.z.select_rows(&keep);
    let yv = DVector::from_iterator(n, keep.iter().map(|&i| y[i]));

    let mut ztz = z.tr_mul(&z);
    linalg::symmetrize(&mut ztz);
    let ztz_inv = linalg::information_inverse(&ztz, 1e-12).map_err(|_| SemError::RankDeficient)?;
    let gamma = &ztz_inv * z.tr_mul(&yv);
    let resid = &yv - &z * &gamma;

    let mut meat = DMatrix::zeros(k, k);
    for (i, row) in z.row_iter().enumerate() {
        meat += row.transpose() * row * resid[i].powi(2);
    }
    let df = n - k;
    let hc1 = &ztz_inv * meat * &ztz_inv * (n as f64 / df as f64);
    let sigma2 = resid.norm_squared() / df as f64;

    let ybar = yv.mean();
    let sst: f64 = yv.iter().map(|v| (v - ybar).powi(2)).sum();
    let sse = resid.norm_squared();
    let r_squared = (sst > 1e-14 * (1.0 + ybar * ybar) * n as f64).then(|| 1.0 - sse / sst);

    let tdist = StudentsT::new(0.0, 1.0, df as f64).expect("positive degrees of freedom");
    let coefficients = (0..k)
        .map(|j| {
            let se_robust = hc1[(j, j)].max(0.0).sqrt();
            let se_classical = (sigma2 * ztz_inv[(j, j)]).max(0.0).sqrt();
            let degenerate = se_robust <= 1e-12 * (1.0 + gamma[j].abs());
            let t_stat = (!degenerate).then(|| gamma[j] / se_robust);
            Coefficient {
                covariate: design.names[j].clone(),
                gamma_hat: gamma[j],
                se_robust: if degenerate { 0.0 } else { se_robust },
                se_classical,
                t_stat,
                p_value: t_stat.map(|t| 2.0 * tdist.sf(t.abs())),
            }
        })
        .collect();
    Ok(RegressionFit {
        coefficients,
        r_squared,
        n_used: n,
        df_resid: df,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupDifference {
    /// Mean in the group coded 1 minus mean in the group coded 0.
    pub diff: f64,
    /// `√(s₁²/n₁ + s₀²/n₀)` with divisor `n_g`.
    pub se: f64,
    pub z: f64,
    /// Two-sided, standard normal reference.
    pub p: f64,
    pub n0: usize,
    pub n1: usize,
}

/// Two-sample comparison of an IPC column across a 0/1 indicator.
pub fn group_difference_test(values: &[f64], group: &[f64]) -> Result<GroupDifference> {
    if values.len() != group.len() {
        return Err(SemError::DimensionMismatch("values and group differ in length".into()));
    }
    let mut parts: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for (&v, &g) in values.iter().zip(group) {
        if !v.is_finite() || !g.is_finite() {
            continue;
        }
        match g {
            g if g == 0.0 => parts[0].push(v),
            g if g == 1.0 => parts[1].push(v),
            g => return Err(SemError::InvalidInput(format!("group indicator must be 0 or 1, got {g}"))),
        }
    }
    for (label, part) in ["0", "1"].iter().zip(&parts) {
        if part.is_empty() {
            return Err(SemError::EmptyGroup(label.to_string()));
        }
    }
    let stats = |x: &[f64]| {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
        (m, v / n)
    };
    let (m0, v0) = stats(&parts[0]);
    let (m1, v1) = stats(&parts[1]);
    let diff = m1 - m0;
    let se = (v0 + v1).sqrt();
    let z = diff / se;
    let normal = Normal::standard();
    Ok(GroupDifference {
        diff,
        se,
        z,
        p: 2.0 * normal.sf(z.abs()),
        n0: parts[0].len(),
        n1: parts[1].len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterRegression {
    pub parameter: String,
    #[serde(flatten)]
    pub fit: RegressionFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IpcRegressionResult {
    pub covariates: Vec<String>,
    pub parameters: Vec<ParameterRegression>,
}

impl IpcRegressionResult {
    pub fn parameter(&self, name: &str) -> Option<&RegressionFit> {
        self.parameters.iter().find(|p| p.parameter == name).map(|p| &p.fit)
    }
}

/// Regresses each selected IPC column on `design`; an empty selection means all.
pub fn multi_regress(ipcs: &IpcMatrix, design: &Design, selection: &[String]) -> Result<IpcRegressionResult> {
    let chosen: Vec<String> = if selection.is_empty() {
        ipcs.param_names.clone()
    } else {
        selection.to_vec()
    };
    let columns: Vec<(String, Vec<f64>)> = chosen
        .iter()
        .map(|name| {
            ipcs.column_by_name(name)
                .map(|c| (name.clone(), c))
                .ok_or_else(|| SemError::UnknownParameter(name.clone()))
        })
        .collect::<Result<_>>()?;
    let parameters = columns
        .par_iter()
        .map(|(name, y)| {
            Ok(ParameterRegression {
                parameter: name.clone(),
                fit: regress(y, design)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(IpcRegressionResult {
        covariates: design.names.clone(),
        parameters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g: Vec<f64> = (0..n).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let y = g
            .iter()
            .map(|&gi| 1.0 + 0.5 * gi + rng.random_range(-1.0..1.0) * (1.0 + 2.0 * gi))
            .collect();
        (y, g)
    }

    #[test]
    fn dummy_slope_is_the_mean_difference() {
        let (y, g) = sample(301, 1);
        let design = Design::with_intercept(&[("g", &g)], y.len()).unwrap();
        let fit = regress(&y, &design).unwrap();
        let test = group_difference_test(&y, &g).unwrap();
        let slope = fit.coefficient("g").unwrap();
        assert_relative_eq!(slope.gamma_hat, test.diff, epsilon = 1e-12);
        // HC1 on a dummy is the unpooled two-sample form times √(n/(n−2))
        let n = y.len() as f64;
        assert_relative_eq!(slope.se_robust, test.se * (n / (n - 2.0)).sqrt(), max_relative = 1e-10);
        assert!(fit.r_squared.unwrap() > 0.0);
    }

    #[test]
    fn intercept_only_gives_the_mean() {
        let (y, _) = sample(50, 2);
        let fit = regress(&y, &Design::intercept_only(50)).unwrap();
        let mean = y.iter().sum::<f64>() / 50.0;
        assert_relative_eq!(fit.coefficients[0].gamma_hat, mean, epsilon = 1e-12);
        assert!(fit.r_squared.is_none() || fit.r_squared.unwrap().abs() < 1e-12);
    }

    #[test]
    fn constant_response_is_degenerate() {
        let g: Vec<f64> = (0..20).map(|i| (i % 2) as f64).collect();
        let design = Design::with_intercept(&[("g", &g)], 20).unwrap();
        let fit = regress(&[3.0; 20], &design).unwrap();
        let slope = fit.coefficient("g").unwrap();
        assert!(slope.gamma_hat.abs() < 1e-12 && slope.degenerate());
        assert_eq!(slope.se_robust, 0.0);
        assert!(fit.r_squared.is_none());
    }

    #[test]
    fn rank_deficiency_and_small_n() {
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let design = Design::with_intercept(&[("x", &x), ("x2", &x2)], 10).unwrap();
        assert!(matches!(regress(&x, &design), Err(SemError::RankDeficient)));
        let tiny = Design::with_intercept(&[("x", &x[..2])], 2).unwrap();
        assert!(matches!(regress(&x[..2], &tiny), Err(SemError::RankDeficient)));
    }

    #[test]
    fn listwise_deletion() {
        let (mut y, mut g) = sample(40, 3);
        y[0] = f64::NAN;
        g[5] = f64::NAN;
        let design = Design::with_intercept(&[("g", &g)], 40).unwrap();
        assert_eq!(regress(&y, &design).unwrap().n_used, 38);
    }

    #[test]
    fn group_test_errors() {
        assert!(matches!(group_difference_test(&[1.0, 2.0], &[0.0, 0.0]), Err(SemError::EmptyGroup(_))));
        assert!(group_difference_test(&[1.0, 2.0], &[0.0, 2.0]).is_err());
    }

    #[test]
    fn shift_statistic_grows_with_root_n() {
        let z_at = |n: usize| {
            let g: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
            let y: Vec<f64> = (0..n).map(|i| g[i] + ((i / 2) % 5) as f64).collect();
            group_difference_test(&y, &g).unwrap().z
        };
        assert_relative_eq!(z_at(400) / z_at(100), 2.0, max_relative = 1e-12);
    }
}
