use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One Parseval-style retraction `W <- (1 + beta) W - beta W W^T W`,
/// pulling the singular values of `W` toward 1.
pub fn orthogonality_step(w: &Tensor, beta: f64) -> Result<Tensor> {
    if !(beta > 0.0 && beta <= 0.01) {
        return Err(Error::invalid(format!(
            "beta must lie in (0, 0.01], got {beta}"
        )));
    }
    w.expect_rank(2, "orthogonality_step")?;
    let wwt_w = w.matmul(&w.transpose()?)?.matmul(w)?;
    w.zip_map(&wwt_w, "orthogonality_step", |a, b| {
        (1.0 + beta) * a - beta * b
    })
}

/// `||W^T W - I||_F`.
pub fn orthogonality_defect(w: &Tensor) -> Result<f64> {
    let g = w.transpose()?.matmul(w)?;
    Ok(g.sub(&Tensor::identity(g.rows()))?.frobenius())
}

/// Singular values of `W`, largest first, from the eigenvalues of `W^T W`
/// (cyclic Jacobi sweeps until the off-diagonal mass vanishes).
pub fn singular_values(w: &Tensor) -> Result<Vec<f64>> {
    w.expect_rank(2, "singular_values")?;
    let mut a = w.transpose()?.matmul(w)?;
    let n = a.rows();
    for _ in 0..100 {
        let mut off = 0.0;
        let mut diag = 0.0;
        for p in 0..n {
            diag += a.get(p, p).abs();
            for q in (p + 1)..n {
                off += a.get(p, q).abs();
            }
        }
        if off <= 1e-18 * diag {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = if theta == 0.0 {
                    1.0
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a.get(k, p), a.get(k, q));
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let (apk, aqk) = (a.get(p, k), a.get(q, k));
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
            }
        }
    }
    let mut sv: Vec<f64> = (0..n).map(|i| a.get(i, i).max(0.0).sqrt()).collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    Ok(sv)
}

pub fn spectral_norm(w: &Tensor) -> Result<f64> {
    Ok(singular_values(w)?.first().copied().unwrap_or(0.0))
}

/// Rescales `W` so its spectral norm is at most `max`; returns the factor used.
pub fn clip_spectral_norm(w: &mut Tensor, max: f64) -> Result<f64> {
    if !(max > 0.0) {
        return Err(Error::invalid(format!(
            "spectral cap must be positive, got {max}"
        )));
    }
    let s = spectral_norm(w)?;
    if s <= max {
        return Ok(1.0);
    }
    let c = max / s;
    *w = w.scale(c);
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    #[test]
    fn orthonormal_rows_are_fixed() {
        let (c, s) = (0.6, 0.8);
        let w = Tensor::from_rows(&[[c, -s, 0.0], [s, c, 0.0]]).unwrap();
        let next = orthogonality_step(&w, 0.01).unwrap();
        for (a, b) in next.data().iter().zip(w.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn scaled_identity_converges() {
        // the contraction factor near the fixed point is 1 - 2 beta
        let mut w = Tensor::identity(2).scale(2.0);
        for _ in 0..800 {
            w = orthogonality_step(&w, 0.01).unwrap();
        }
        assert!(orthogonality_defect(&w).unwrap() < 1e-6);
    }

    #[test]
    fn random_matrices_reach_unit_singular_values() {
        for seed in 0..5 {
            let mut r = rng::stream(seed, &[]);
            let mut w = Tensor::matrix(4, 4, (0..16).map(|_| r.random_range(-0.5..=0.5)).collect())
                .unwrap();
            let mut last = orthogonality_defect(&w).unwrap();
            for it in 0..3000 {
                w = orthogonality_step(&w, 0.01).unwrap();
                let now = orthogonality_defect(&w).unwrap();
                if it > 0 {
                    assert!(now <= last + 1e-12, "defect rose at {it}");
                }
                last = now;
            }
            for s in singular_values(&w).unwrap() {
                assert!((s - 1.0).abs() < 1e-3, "seed {seed}: {s}");
            }
        }
    }

    #[test]
    fn clip_caps_spectral_norm() {
        let mut w = Tensor::from_rows(&[[3.0, 0.0], [0.0, 0.5]]).unwrap();
        assert!((spectral_norm(&w).unwrap() - 3.0).abs() < 1e-12);
        let c = clip_spectral_norm(&mut w, 1.0).unwrap();
        assert!((c - 1.0 / 3.0).abs() < 1e-15);
        assert!((spectral_norm(&w).unwrap() - 1.0).abs() < 1e-12);
        let mut small = Tensor::identity(3).scale(0.5);
        assert_eq!(clip_spectral_norm(&mut small, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn rotation_singular_values() {
        let (c, s) = (0.6, 0.8);
        let w = Tensor::from_rows(&[[2.0 * c, -2.0 * s], [s, c]]).unwrap();
        let sv = singular_values(&w).unwrap();
        assert!(
            (sv[0] - 2.0).abs() < 1e-12 && (sv[1] - 1.0).abs() < 1e-12,
            "{sv:?}"
        );
    }

    #[test]
    fn beta_out_of_range() {
        let w = Tensor::identity(2);
        assert!(orthogonality_step(&w, 0.0).is_err());
        assert!(orthogonality_step(&w, 0.02).is_err());
    }
}
