use ndarray::Array2;

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub(crate) fn cholesky(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return None;
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if !(sum > 0.0) || !sum.is_finite() {
                    return None;
                }
                l[[i, i]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    Some(l)
}

/// Cholesky with escalating diagonal jitter for nearly singular covariances.
pub(crate) fn cholesky_jittered(a: &Array2<f64>) -> Option<(Array2<f64>, f64)> {
    if let Some(l) = cholesky(a) {
        return Some((l, 0.0));
    }
    let n = a.nrows().max(1);
    let scale = (a.diag().sum() / n as f64).abs().max(1e-12);
    let mut eps = 1e-10;
    while eps <= 1e-1 {
        let mut b = a.clone();
        for i in 0..a.nrows() {
            b[[i, i]] += eps * scale;
        }
        if let Some(l) = cholesky(&b) {
            return Some((l, eps * scale));
        }
        eps *= 10.0;
    }
    None
}
