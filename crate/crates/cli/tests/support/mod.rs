//! Independent oracles and generators for the acceptance suite. Nothing here
//! calls into the estimation code paths it is used to check.

use chrono::NaiveDate;
use panel_impute::panel::{Covariate, Matrix, PanelDataset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Cyclic Jacobi eigendecomposition of a symmetric matrix; eigenvalues in
/// descending order with matching eigenvector columns.
pub fn jacobi_eigen(a: &Matrix) -> (Vec<f64>, Matrix) {
    let n = a.nrows();
    let mut m = a.clone();
    let mut v = Matrix::identity(n, n);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)].powi(2))
            .sum();
        if off < 1e-30 * (1.0 + m.norm_squared()) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[(p, q)].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * m[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[(k, p)], m[(k, q)]);
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[(p, k)], m[(q, k)]);
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].partial_cmp(&m[(i, i)]).unwrap());
    let vals = order.iter().map(|&i| m[(i, i)]).collect();
    let vecs = Matrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    (vals, vecs)
}

/// Rank-`r` common component of `m` (`T x N`): projection of `m` onto the
/// leading `r` eigenvectors of `m m'`.
pub fn pca_common_oracle(m: &Matrix, r: usize) -> (Matrix, Vec<f64>) {
    let (vals, vecs) = jacobi_eigen(&(m * m.transpose()));
    let v = vecs.columns(0, r).into_owned();
    let scale = (m.nrows() * m.ncols()) as f64;
    (&v * (v.transpose() * m), vals.iter().map(|x| x / scale).collect())
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Planted linear interactive-fixed-effects panel.
#[derive(Debug, Clone)]
pub struct PlantedSpec {
    pub n: usize,
    pub t: usize,
    pub n0: usize,
    pub r: usize,
    pub first_adoption: usize,
    pub stagger: usize,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub noise: f64,
    pub theta: f64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        PlantedSpec {
            n: 55,
            t: 61,
            n0: 16,
            r: 2,
            first_adoption: 28,
            stagger: 15,
            beta: vec![0.5],
            gamma: vec![0.3],
            noise: 0.0,
            theta: -0.098,
        }
    }
}

pub struct Planted {
    pub dataset: PanelDataset,
    /// Untreated outcomes.
    pub y0: Matrix,
    pub x: Vec<Matrix>,
    pub z: Vec<Matrix>,
}

/// `y0 = alpha_i + sum beta x + sum gamma z + lambda_i' f_t + noise * e`;
/// treated units (the last `n - n0`) add `theta` from their adoption row.
/// Covariates load on the common component so that ignoring the factors
/// biases the slopes.
pub fn planted_panel(spec: &PlantedSpec, seed: u64) -> Planted {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0xacce);
    let f = normal_matrix(&mut rng, spec.t, spec.r);
    let lam = normal_matrix(&mut rng, spec.n, spec.r);
    let common = &f * lam.transpose();
    let alpha: Vec<f64> = (0..spec.n).map(|_| rng.sample(StandardNormal)).collect();
    let covariate = |rng: &mut ChaCha8Rng, w: f64| normal_matrix(rng, spec.t, spec.n) + &common * w;
    let x: Vec<Matrix> = (0..spec.beta.len()).map(|k| covariate(&mut rng, 0.5 / (k + 1) as f64)).collect();
    let z: Vec<Matrix> = (0..spec.gamma.len()).map(|k| covariate(&mut rng, -0.3 / (k + 1) as f64)).collect();
    let e = normal_matrix(&mut rng, spec.t, spec.n);
    let adoption: Vec<Option<usize>> = (0..spec.n)
        .map(|i| (i >= spec.n0).then(|| spec.first_adoption + rng.random_range(0..=spec.stagger)))
        .collect();
    let y0 = Matrix::from_fn(spec.t, spec.n, |s, i| {
        let mut v = alpha[i] + common[(s, i)] + spec.noise * e[(s, i)];
        for (b, m) in spec.beta.iter().zip(&x) {
            v += b * m[(s, i)];
        }
        for (g, m) in spec.gamma.iter().zip(&z) {
            v += g * m[(s, i)];
        }
        v
    });
    let y = Matrix::from_fn(spec.t, spec.n, |s, i| match adoption[i] {
        Some(a) if s >= a => y0[(s, i)] + spec.theta,
        _ => y0[(s, i)],
    });
    let d0 = NaiveDate::from_ymd_opt(2020, 2, 20).unwrap();
    let dates = (0..spec.t).map(|s| d0 + chrono::Days::new(s as u64)).collect();
    let units = (0..spec.n).map(|i| format!("P{i:02}")).collect();
    let named = |prefix: &str, ms: &[Matrix]| -> Vec<Covariate> {
        ms.iter()
            .enumerate()
            .map(|(k, m)| Covariate::new(format!("{prefix}{k}"), m.clone()))
            .collect()
    };
    let dataset = PanelDataset::from_adoption(units, dates, y, &adoption, named("x", &x), named("z", &z))
        .expect("planted panel is well formed");
    Planted { dataset, y0, x, z }
}

/// One day of the printed SEIR law of motion by direct substitution.
/// Layout: `[S, E1, E2, I1, I2, Q, C, D, E1j, E2j, I1j, I2j, Qj, Cj, Dj]`,
/// parameters `[sigma, gamma, kappa, eta, f, N]`.
pub fn seir_substitution(x: &[f64; 15], p: &[f64; 6], beta: f64) -> [f64; 15] {
    let [s, e1, e2, i1, i2, q, c, d, e1j, e2j, i1j, i2j, qj, cj, dj] = *x;
    let [sigma, gamma, kappa, eta, f, n] = *p;
    let inflow = beta * s * (i1 + i2) / n;
    let report = (-gamma * kappa).exp();
    [
        s - inflow,
        e1 + (1.0 - f) * inflow - 2.0 * sigma * e1,
        e2 + 2.0 * sigma * e1 - 2.0 * sigma * e2,
        i1 + 2.0 * sigma * e2 - 2.0 * gamma * i1,
        i2 + 2.0 * gamma * i1 - 2.0 * gamma * i2,
        q + 2.0 * sigma * e2 * report - kappa * q,
        c + (1.0 - kappa) * eta * q,
        d + kappa * eta * q,
        e1j + f * inflow - 2.0 * sigma * e1j,
        e2j + 2.0 * sigma * e1j - 2.0 * sigma * e2j,
        i1j + 2.0 * sigma * e2j - 2.0 * gamma * i1j,
        i2j + 2.0 * gamma * i1j - 2.0 * gamma * i2j,
        qj + 2.0 * sigma * e2j * report - kappa * qj,
        cj + (1.0 - kappa) * eta * qj,
        dj + kappa * eta * qj,
    ]
}
