//! Independent oracles for the test suites.
//!
//! Nothing here is used by the training path. Each oracle takes a different
//! arithmetic route from the code it checks: central finite differences for
//! the analytic gradients, cyclic Jacobi rotations for the power-iteration
//! spectral gap, and a plain coordinatewise mean for gossip averaging.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiniteDiffSpec {
    pub step: f64,
    pub rel_tol: f64,
    pub magnitude_floor: f64,
}

impl Default for FiniteDiffSpec {
    fn default() -> Self {
        FiniteDiffSpec {
            step: 1e-5,
            rel_tol: 1e-5,
            magnitude_floor: 1e-8,
        }
    }
}

impl FiniteDiffSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) || !(self.rel_tol > 0.0) || !(self.magnitude_floor >= 0.0) {
            return Err(Error::InvalidInput(format!("bad finite-difference spec {self:?}")));
        }
        Ok(())
    }
}

/// Central differences `(f(x + h e_k) - f(x - h e_k)) / 2h` per coordinate.
pub fn finite_diff_grad<F>(f: F, params: &[f64], spec: &FiniteDiffSpec) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    spec.validate()?;
    let h = spec.step;
    let mut x = params.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        let orig = x[k];
        x[k] = orig + h;
        let up = f(&x);
        x[k] = orig - h;
        let down = f(&x);
        x[k] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NumericalFailure {
                what: format!("non-finite probe at coordinate {k}"),
                iterations: k,
            });
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Outcome of comparing an analytic gradient against a numerical one.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
}

impl GradCheck {
    pub fn passes(&self, spec: &FiniteDiffSpec) -> bool {
        self.max_rel_error < spec.rel_tol
    }
}

/// Per-coordinate relative error `|a - n| / max(|a|, |n|)`, skipping
/// coordinates where both magnitudes are below the floor.
pub fn compare_gradients(analytic: &[f64], numeric: &[f64], spec: &FiniteDiffSpec) -> GradCheck {
    let mut out = GradCheck {
        checked: 0,
        max_rel_error: 0.0,
        worst_index: None,
    };
    for (k, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let scale = a.abs().max(n.abs());
        if scale <= spec.magnitude_floor {
            continue;
        }
        out.checked += 1;
        let rel = (a - n).abs() / scale;
        if rel > out.max_rel_error {
            out.max_rel_error = rel;
            out.worst_index = Some(k);
        }
    }
    out
}

/// All eigenvalues of a symmetric row-major `n × n` matrix, by cyclic Jacobi
/// sweeps until the off-diagonal Frobenius norm drops below `1e-12`.
/// Returned in descending order.
pub fn symmetric_eigenvalues(n: usize, matrix: &[f64]) -> Result<Vec<f64>> {
    if matrix.len() != n * n {
        return Err(Error::shape("matrix entries", n * n, matrix.len()));
    }
    for i in 0..n {
        for j in 0..i {
            let (a, b) = (matrix[i * n + j], matrix[j * n + i]);
            if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                return Err(Error::InvalidInput(format!(
                    "matrix not symmetric at ({i},{j}): {a} vs {b}"
                )));
            }
        }
    }
    let mut a = matrix.to_vec();
    let off = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[i * n + j] * a[i * n + j];
                }
            }
        }
        s.sqrt()
    };
    let mut sweeps = 0;
    while off(&a) > 1e-12 {
        sweeps += 1;
        if sweeps > 100 {
            return Err(Error::NumericalFailure {
                what: "Jacobi sweeps did not converge".into(),
                iterations: sweeps,
            });
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    eig.sort_by(|x, y| y.partial_cmp(x).unwrap());
    Ok(eig)
}

/// Magnitude of the eigenvalue with the second-largest magnitude. Intended
/// for matrices up to 32 × 32.
pub fn dense_second_eigenvalue(n: usize, matrix: &[f64]) -> Result<f64> {
    if n > 32 {
        return Err(Error::InvalidInput(format!("oracle limited to n <= 32, got {n}")));
    }
    let mut mags: Vec<f64> = symmetric_eigenvalues(n, matrix)?.into_iter().map(f64::abs).collect();
    mags.sort_by(|x, y| y.partial_cmp(x).unwrap());
    Ok(mags.get(1).copied().unwrap_or(0.0))
}

/// Exact coordinatewise mean of equally sized vectors.
pub fn centralized_average_oracle(vectors: &[&[f64]]) -> Result<Vec<f64>> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::InvalidInput("no vectors to average".into()))?;
    let len = first.len();
    let mut acc = vec![0.0; len];
    for v in vectors {
        if v.len() != len {
            return Err(Error::shape("adapter length", len, v.len()));
        }
        for (a, x) in acc.iter_mut().zip(v.iter()) {
            *a += x;
        }
    }
    let n = vectors.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// Row-major `rows × cols` matrix times vector with an explicit double loop.
pub fn naive_matvec(rows: usize, cols: usize, m: &[f64], x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; rows];
    for r in 0..rows {
        let mut s = 0.0;
        for c in 0..cols {
            s += m[r * cols + c] * x[c];
        }
        y[r] = s;
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let f = |x: &[f64]| 0.5 * x.iter().map(|v| v * v).sum::<f64>();
        let g = finite_diff_grad(f, &[1.0, 2.0], &FiniteDiffSpec::default()).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-9 && (g[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn constant_functional_has_zero_gradient() {
        let g = finite_diff_grad(|_| 3.5, &[0.3, -1.0, 7.0], &FiniteDiffSpec::default()).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_probe_names_coordinate() {
        let f = |x: &[f64]| if x[1] > 0.5 { f64::NAN } else { 0.0 };
        let err = finite_diff_grad(f, &[0.0, 0.5], &FiniteDiffSpec::default()).unwrap_err();
        assert!(err.to_string().contains("coordinate 1"), "{err}");
    }

    #[test]
    fn jacobi_identity_and_uniform() {
        let mut id = vec![0.0; 16];
        for i in 0..4 {
            id[i * 5] = 1.0;
        }
        assert_eq!(dense_second_eigenvalue(4, &id).unwrap(), 1.0);
        let u = vec![0.25; 16];
        assert!(dense_second_eigenvalue(4, &u).unwrap().abs() < 1e-12);
    }

    #[test]
    fn jacobi_ring_four_circulant() {
        let t = 1.0 / 3.0;
        #[rustfmt::skip]
        let p = [
            t, t, 0.0, t,
            t, t, t, 0.0,
            0.0, t, t, t,
            t, 0.0, t, t,
        ];
        let eig = symmetric_eigenvalues(4, &p).unwrap();
        let expect = [1.0, t, t, -t];
        for (a, b) in eig.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{eig:?}");
        }
    }

    #[test]
    fn jacobi_rejects_asymmetric() {
        let m = [1.0, 2.0, 0.0, 1.0];
        assert_eq!(dense_second_eigenvalue(2, &m).unwrap_err().category(), "invalid-input");
    }

    #[test]
    fn average_oracle_cases() {
        let a = [1.0, -2.0, 3.0];
        assert_eq!(centralized_average_oracle(&[&a]).unwrap(), a.to_vec());
        let b = [-1.0, 2.0, -3.0];
        assert_eq!(centralized_average_oracle(&[&a, &b]).unwrap(), vec![0.0; 3]);
        assert!(centralized_average_oracle(&[&a, &[1.0][..]]).is_err());
    }
}
