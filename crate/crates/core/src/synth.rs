//! Seeded synthetic series used by fixtures and tests.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::task::{TaskError, TimeSeriesFrame};

const BURN_IN: usize = 200;

fn names(d: usize) -> Vec<String> {
    (0..d).map(|j| format!("x{j}")).collect()
}

/// Coupled VAR(2): x_t = A1 x_{t-1} + A2 x_{t-2} + e_t with
/// A1 = 0.4 I + 0.1 J (J all ones), A2 = -0.3 I and e_t ~ N(0, I).
pub fn ar2(t: usize, d: usize, seed: u64) -> Result<TimeSeriesFrame<f64>, TaskError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prev2 = Array1::<f64>::zeros(d);
    let mut prev1 = Array1::<f64>::zeros(d);
    let mut values = Array2::<f64>::zeros((t, d));
    for step in 0..t + BURN_IN {
        let total: f64 = prev1.sum();
        let mut x = Array1::<f64>::zeros(d);
        for j in 0..d {
            let e: f64 = StandardNormal.sample(&mut rng);
            x[j] = 0.4 * prev1[j] + 0.1 * total - 0.3 * prev2[j] + e;
        }
        if step >= BURN_IN {
            values.row_mut(step - BURN_IN).assign(&x);
        }
        prev2 = std::mem::replace(&mut prev1, x);
    }
    TimeSeriesFrame::new(values, names(d), None)
}

/// Independent rows from N(mu, L L^T) with a fixed lower-triangular L:
/// unit diagonal scaled by 0.8 and 0.3 below the diagonal; mu_j = j.
pub fn gaussian(t: usize, d: usize, seed: u64) -> Result<TimeSeriesFrame<f64>, TaskError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut l = Array2::<f64>::zeros((d, d));
    for i in 0..d {
        for j in 0..i {
            l[[i, j]] = 0.3;
        }
        l[[i, i]] = 0.8;
    }
    let mut values = Array2::<f64>::zeros((t, d));
    for mut row in values.rows_mut() {
        let z: Array1<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let x = l.dot(&z);
        for j in 0..d {
            row[j] = x[j] + j as f64;
        }
    }
    TimeSeriesFrame::new(values, names(d), None)
}
