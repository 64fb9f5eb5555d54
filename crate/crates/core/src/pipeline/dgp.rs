use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{Covariate, Matrix, PanelDataset};

/// Linear interactive-fixed-effects DGP:
/// `Y = alpha_i + beta x + gamma z + Lambda_i'F_t + theta D + e`
/// with standard-normal factors and loadings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearFactorDgp {
    pub n: usize,
    pub t: usize,
    pub n0: usize,
    pub r: usize,
    /// First adoption row.
    pub first_adoption: usize,
    /// Treated units adopt uniformly within `first_adoption + 0..=stagger`.
    pub stagger: usize,
    pub theta: f64,
    pub noise: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LinearFactorDgp {
    fn default() -> Self {
        LinearFactorDgp {
            n: 55,
            t: 61,
            n0: 16,
            r: 2,
            first_adoption: 28,
            stagger: 15,
            theta: -0.098,
            noise: 0.05,
            beta: 0.5,
            gamma: 0.3,
        }
    }
}

/// A generated panel with its planted untreated outcomes and effects.
#[derive(Debug, Clone)]
pub struct SyntheticPanel {
    pub dataset: PanelDataset,
    pub y0: Matrix,
    /// Planted effects on treated cells, `NaN` elsewhere.
    pub theta_it: Matrix,
}

impl SyntheticPanel {
    /// Mean planted effect at event time `s` over treated units observed then.
    pub fn true_att(&self, s: usize) -> f64 {
        self.true_mean(s, None)
    }

    pub fn true_group_att(&self, s: usize, members: &[usize]) -> f64 {
        self.true_mean(s, Some(members))
    }

    fn true_mean(&self, s: usize, members: Option<&[usize]>) -> f64 {
        let t = self.dataset.n_periods();
        let (mut sum, mut count) = (0.0, 0usize);
        for i in 0..self.dataset.n_units() {
            if members.is_some_and(|m| !m.contains(&i)) {
                continue;
            }
            let row = self.dataset.t0()[i] + s;
            if row < t && self.theta_it[(row, i)].is_finite() {
                sum += self.theta_it[(row, i)];
                count += 1;
            }
        }
        sum / count as f64
    }

    /// Names of the first `k` treated units.
    pub fn treated_names(&self, k: usize) -> Vec<String> {
        let ds = &self.dataset;
        (0..ds.n_units())
            .filter(|&i| ds.is_treated(i))
            .take(k)
            .map(|i| ds.units()[i].clone())
            .collect()
    }
}

impl LinearFactorDgp {
    pub fn generate(&self, seed: u64) -> Result<SyntheticPanel> {
        if self.n0 > self.n || self.first_adoption + self.stagger >= self.t {
            return Err(Error::Config(format!(
                "linear DGP needs n0 <= n and adoption before T (n0={}, n={}, adoption up to {}, T={})",
                self.n0,
                self.n,
                self.first_adoption + self.stagger,
                self.t
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |rows: usize, cols: usize| -> Matrix {
            Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
        };
        let f = normal(self.t, self.r);
        let lam = normal(self.n, self.r);
        let alpha = normal(1, self.n);
        let common = &f * lam.transpose();
        // mobility correlates with the common component
        let x = normal(self.t, self.n) + &common * 0.5;
        let z = normal(self.t, self.n);
        let e = normal(self.t, self.n) * self.noise;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let adoption: Vec<Option<usize>> = (0..self.n)
            .map(|i| {
                (i >= self.n0).then(|| self.first_adoption + rng.random_range(0..=self.stagger))
            })
            .collect();

        let y0 = Matrix::from_fn(self.t, self.n, |s, i| {
            alpha[(0, i)] + self.beta * x[(s, i)] + self.gamma * z[(s, i)] + common[(s, i)] + e[(s, i)]
        });
        let theta_it = Matrix::from_fn(self.t, self.n, |s, i| match adoption[i] {
            Some(a) if s >= a => self.theta,
            _ => f64::NAN,
        });
        let y = Matrix::from_fn(self.t, self.n, |s, i| {
            let th = theta_it[(s, i)];
            y0[(s, i)] + if th.is_finite() { th } else { 0.0 }
        });
        let d0 = NaiveDate::from_ymd_opt(2020, 2, 20).expect("valid date");
        let dates = (0..self.t).map(|s| d0 + chrono::Days::new(s as u64)).collect();
        let units = (0..self.n).map(|i| format!("U{i:02}")).collect();
        let dataset = PanelDataset::from_adoption(
            units,
            dates,
            y,
            &adoption,
            vec![Covariate::new("mobility", x)],
            vec![Covariate::new("tests", z)],
        )?;
        Ok(SyntheticPanel {
            dataset,
            y0,
            theta_it,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planted_structure() {
        let p = LinearFactorDgp::default().generate(3).unwrap();
        assert_eq!(p.dataset.y().shape(), (61, 55));
        assert_eq!((0..55).filter(|&i| !p.dataset.is_treated(i)).count(), 16);
        assert_eq!(*p.dataset.t0().iter().filter(|&&t| t < 61).min().unwrap(), 28);
        for s in 0..10 {
            assert!((p.true_att(s) + 0.098).abs() < 1e-15);
        }
        let d = p.dataset.y() - &p.y0;
        for i in 0..55 {
            for s in 0..61 {
                let th = p.theta_it[(s, i)];
                assert_eq!(d[(s, i)].abs() > 0.0, th.is_finite());
            }
        }
    }
}
