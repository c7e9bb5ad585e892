//! Proximal maps of the deviation penalty and an exact solver for a single
//! penalized quadratic block
//!
//! ```text
//! minimize_d  ½ dᵀ H d − cᵀ d + λ ‖d‖_p
//! ```
//!
//! with `H` symmetric positive semidefinite and `c` in the range of `H`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::model::PNorm;

pub fn soft_threshold(v: f64, kappa: f64) -> f64 {
    if v > kappa {
        v - kappa
    } else if v < -kappa {
        v + kappa
    } else {
        0.0
    }
}

/// `argmin_x κ‖x‖₂ + ½‖x − v‖²`
pub fn block_soft_threshold(v: &DVector<f64>, kappa: f64) -> DVector<f64> {
    let norm = v.norm();
    if norm <= kappa {
        DVector::zeros(v.len())
    } else {
        v * (1.0 - kappa / norm)
    }
}

/// `argmin_x κ‖x‖_p + ½‖x − v‖²`
pub fn prox(p: PNorm, v: &DVector<f64>, kappa: f64) -> DVector<f64> {
    match p {
        PNorm::L1 => v.map(|x| soft_threshold(x, kappa)),
        PNorm::L2 => block_soft_threshold(v, kappa),
    }
}

/// A penalized quadratic block with a cached eigendecomposition of `H`.
#[derive(Debug, Clone)]
pub struct QuadraticBlock {
    hessian: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
}

impl QuadraticBlock {
    pub fn new(hessian: DMatrix<f64>) -> Self {
        let eig = SymmetricEigen::new(hessian.clone());
        let eigenvalues = eig.eigenvalues.map(|h| h.max(0.0));
        Self {
            hessian,
            eigenvalues,
            eigenvectors: eig.eigenvectors,
        }
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    /// Minimizer of `½ dᵀHd − cᵀd + λ‖d‖_p`. `warm` seeds the ℓ1 iteration.
    pub fn solve(&self, p: PNorm, c: &DVector<f64>, lambda: f64, warm: Option<&DVector<f64>>) -> DVector<f64> {
        match p {
            PNorm::L2 => self.solve_l2(c, lambda),
            PNorm::L1 => lasso_block(&self.hessian, c, lambda, warm),
        }
    }

    fn solve_l2(&self, c: &DVector<f64>, lambda: f64) -> DVector<f64> {
        let m = c.len();
        let cnorm = c.norm();
        if cnorm <= lambda {
            return DVector::zeros(m);
        }
        let ct = self.eigenvectors.tr_mul(c);
        let h = &self.eigenvalues;
        if lambda == 0.0 {
            // Plain least squares on the range of H.
            let coords = DVector::from_iterator(
                m,
                (0..m).map(|j| if h[j] > 0.0 { ct[j] / h[j] } else { 0.0 }),
            );
            return &self.eigenvectors * coords;
        }
        // The minimizer is d = (H + tI)⁻¹c where t = λ/‖d‖ solves
        // ψ(t) = Σ c̃ⱼ² (t / (hⱼ + t))² − λ² = 0; ψ is increasing in t.
        let r = lambda / cnorm;
        let hmin = h.iter().cloned().fold(f64::INFINITY, f64::min);
        let hmax = h.iter().cloned().fold(0.0_f64, f64::max);
        let psi = |t: f64| -> (f64, f64) {
            let mut val = -lambda * lambda;
            let mut der = 0.0;
            for j in 0..m {
                let denom = h[j] + t;
                let frac = t / denom;
                val += ct[j] * ct[j] * frac * frac;
                der += 2.0 * ct[j] * ct[j] * frac * h[j] / (denom * denom);
            }
            (val, der)
        };
        let mut lo = hmin * r / (1.0 - r);
        let mut hi = (hmax * r / (1.0 - r)) * (1.0 + 1e-12) + f64::MIN_POSITIVE;
        while psi(hi).0 < 0.0 {
            hi *= 2.0;
        }
        let mut t = 0.5 * (lo + hi);
        for _ in 0..200 {
            let (val, der) = psi(t);
            if val == 0.0 {
                break;
            }
            if val < 0.0 {
                lo = t;
            } else {
                hi = t;
            }
            let newton = if der > 0.0 { t - val / der } else { f64::NAN };
            t = if newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if hi - lo <= 4.0 * f64::EPSILON * hi {
                break;
            }
        }
        let coords = DVector::from_iterator(m, (0..m).map(|j| ct[j] / (h[j] + t)));
        &self.eigenvectors * coords
    }

    /// Hessian of the block's value function `θ ↦ min_d q(θ + d) + λ‖d‖_p`
    /// at a solution `d`, where `q` is the quadratic with Hessian `H`.
    pub fn envelope_hessian(&self, p: PNorm, d: &DVector<f64>, lambda: f64) -> DMatrix<f64> {
        let m = d.len();
        let h = &self.hessian;
        if d.iter().all(|&x| x == 0.0) {
            return h.clone();
        }
        match p {
            PNorm::L2 => {
                let s = d.norm();
                let u = d / s;
                let curvature =
                    (DMatrix::identity(m, m) - &u * u.transpose()) * (lambda / s);
                let sum = h + &curvature;
                match sum.clone().lu().solve(&curvature) {
                    Some(x) => {
                        let out = h * x;
                        (&out + out.transpose()) * 0.5
                    }
                    None => DMatrix::zeros(m, m),
                }
            }
            PNorm::L1 => {
                let active: Vec<usize> = (0..m).filter(|&q| d[q] != 0.0).collect();
                let hs = h.select_rows(&active).select_columns(&active);
                let cross = h.select_columns(&active);
                match hs.clone().cholesky() {
                    Some(ch) => {
                        let x = ch.solve(&cross.transpose());
                        let out = h - &cross * x;
                        (&out + out.transpose()) * 0.5
                    }
                    None => DMatrix::zeros(m, m),
                }
            }
        }
    }
}

/// Cyclic coordinate descent for `½dᵀHd − cᵀd + λ‖d‖₁`, finished by an
/// exact solve on the detected support once the sign pattern settles.
pub fn lasso_block(
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    lambda: f64,
    warm: Option<&DVector<f64>>,
) -> DVector<f64> {
    let m = c.len();
    let mut d = warm.cloned().unwrap_or_else(|| DVector::zeros(m));
    for sweep in 0..20_000 {
        let mut change = 0.0_f64;
        for q in 0..m {
            let hqq = h[(q, q)];
            if hqq <= 0.0 {
                d[q] = 0.0;
                continue;
            }
            let mut z = c[q];
            for r in 0..m {
                if r != q {
                    z -= h[(q, r)] * d[r];
                }
            }
            let new = soft_threshold(z, lambda) / hqq;
            change = change.max((new - d[q]).abs());
            d[q] = new;
        }
        if sweep % 8 == 7 || change == 0.0 {
            if let Some(exact) = polish_support(h, c, lambda, &d) {
                return exact;
            }
        }
        if change <= 1e-15 * (1.0 + d.amax()) {
            break;
        }
    }
    d
}

/// Solves the lasso block on the current support/sign pattern and accepts it
/// only if the full optimality conditions hold.
fn polish_support(h: &DMatrix<f64>, c: &DVector<f64>, lambda: f64, d: &DVector<f64>) -> Option<DVector<f64>> {
    let m = c.len();
    let active: Vec<usize> = (0..m).filter(|&q| d[q] != 0.0).collect();
    let mut out = DVector::zeros(m);
    if !active.is_empty() {
        let hs = h.select_rows(&active).select_columns(&active);
        let rhs = DVector::from_iterator(
            active.len(),
            active.iter().map(|&q| c[q] - lambda * d[q].signum()),
        );
        let sol = hs.cholesky()?.solve(&rhs);
        for (k, &q) in active.iter().enumerate() {
            if sol[k] == 0.0 || sol[k].signum() != d[q].signum() {
                return None;
            }
            out[q] = sol[k];
        }
    }
    let grad = c - h * &out;
    let slack = lambda * (1.0 + 1e-12) + 1e-12 * c.amax();
    if (0..m).filter(|q| out[*q] == 0.0).all(|q| grad[q].abs() <= slack) {
        Some(out)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn objective(h: &DMatrix<f64>, c: &DVector<f64>, lambda: f64, p: PNorm, d: &DVector<f64>) -> f64 {
        0.5 * d.dot(&(h * d)) - c.dot(d) + lambda * p.norm(d)
    }

    fn spd() -> DMatrix<f64> {
        DMatrix::from_row_slice(3, 3, &[5.0, 1.0, 0.5, 1.0, 3.0, -0.4, 0.5, -0.4, 2.0])
    }

    #[test]
    fn thresholds() {
        assert_eq!(soft_threshold(3.0, 1.0), 2.0);
        assert_eq!(soft_threshold(-3.0, 1.0), -2.0);
        assert_eq!(soft_threshold(0.5, 1.0), 0.0);
        let v = DVector::from_vec(vec![3.0, 4.0]);
        assert_eq!(block_soft_threshold(&v, 10.0), DVector::zeros(2));
        let s = block_soft_threshold(&v, 2.5);
        assert!((s - DVector::from_vec(vec![1.5, 2.0])).norm() < 1e-15);
    }

    #[test]
    fn l2_block_zero_inside_dual_ball() {
        let blk = QuadraticBlock::new(spd());
        let c = DVector::from_vec(vec![0.3, -0.2, 0.1]);
        assert_eq!(blk.solve(PNorm::L2, &c, 1.0, None), DVector::zeros(3));
    }

    #[test]
    fn l2_block_satisfies_stationarity() {
        let h = spd();
        let blk = QuadraticBlock::new(h.clone());
        let c = DVector::from_vec(vec![4.0, -2.0, 3.0]);
        let lambda = 1.7;
        let d = blk.solve(PNorm::L2, &c, lambda, None);
        let resid = &h * &d - &c + &d * (lambda / d.norm());
        assert!(resid.amax() < 1e-12, "{resid}");
    }

    #[test]
    fn l1_block_beats_probes() {
        let h = spd();
        let blk = QuadraticBlock::new(h.clone());
        let c = DVector::from_vec(vec![4.0, -0.5, 3.0]);
        let lambda = 1.2;
        let d = blk.solve(PNorm::L1, &c, lambda, None);
        let best = objective(&h, &c, lambda, PNorm::L1, &d);
        for k in 0..500 {
            let probe = &d
                + DVector::from_iterator(3, (0..3).map(|j| ((k * 7 + j * 13) as f64).sin() * 1e-3));
            assert!(objective(&h, &c, lambda, PNorm::L1, &probe) >= best - 1e-14);
        }
        // Middle coordinate sits at zero for this data.
        assert_eq!(d[1], 0.0);
    }

    #[test]
    fn singular_hessian_with_range_gradient() {
        let v = DVector::from_vec(vec![1.0, 2.0]);
        let h = &v * v.transpose();
        let blk = QuadraticBlock::new(h.clone());
        let c = &v * 3.0;
        let d = blk.solve(PNorm::L2, &c, 1.0, None);
        let resid = &h * &d - &c + &d * (1.0 / d.norm());
        assert!(resid.amax() < 1e-10);
    }
}
