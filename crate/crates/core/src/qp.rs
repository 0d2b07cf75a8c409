//! Dense convex QP solver.
//!
//! Solves `min 1/2 z'Hz + f'z  s.t.  A_eq z = b_eq,  A_in z <= b_in` with the
//! Goldfarb-Idnani dual active-set method. Positive semidefinite Hessians are
//! handled by an outer proximal-point loop over strictly convex subproblems.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("Hessian is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("non-finite problem data")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
}

impl QpProblem {
    pub fn new(
        h: DMatrix<f64>,
        f: DVector<f64>,
        a_eq: DMatrix<f64>,
        b_eq: DVector<f64>,
        a_in: DMatrix<f64>,
        b_in: DVector<f64>,
    ) -> Result<Self, QpError> {
        let n = f.len();
        if h.nrows() != n || h.ncols() != n {
            return Err(QpError::DimensionMismatch(format!(
                "H is {}x{}, f has {n} entries",
                h.nrows(),
                h.ncols()
            )));
        }
        if a_eq.ncols() != n || a_eq.nrows() != b_eq.len() {
            return Err(QpError::DimensionMismatch(format!(
                "A_eq is {}x{}, b_eq has {} entries",
                a_eq.nrows(),
                a_eq.ncols(),
                b_eq.len()
            )));
        }
        if a_in.ncols() != n || a_in.nrows() != b_in.len() {
            return Err(QpError::DimensionMismatch(format!(
                "A_in is {}x{}, b_in has {} entries",
                a_in.nrows(),
                a_in.ncols(),
                b_in.len()
            )));
        }
        let finite = h.iter().chain(f.iter()).chain(a_eq.iter()).chain(b_eq.iter());
        if !finite.chain(a_in.iter()).chain(b_in.iter()).all(|v| v.is_finite()) {
            return Err(QpError::NonFinite);
        }
        let asym = (&h - h.transpose()).amax();
        if asym > 1e-12 * (1.0 + h.amax()) {
            return Err(QpError::NotSymmetric(asym));
        }
        Ok(Self { h, f, a_eq, b_eq, a_in, b_in })
    }

    pub fn unconstrained(h: DMatrix<f64>, f: DVector<f64>) -> Result<Self, QpError> {
        let n = f.len();
        Self::new(h, f, DMatrix::zeros(0, n), DVector::zeros(0), DMatrix::zeros(0, n), DVector::zeros(0))
    }

    pub fn inequality(
        h: DMatrix<f64>,
        f: DVector<f64>,
        a_in: DMatrix<f64>,
        b_in: DVector<f64>,
    ) -> Result<Self, QpError> {
        let n = f.len();
        Self::new(h, f, DMatrix::zeros(0, n), DVector::zeros(0), a_in, b_in)
    }

    pub fn dim(&self) -> usize {
        self.f.len()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.h * z)) + self.f.dot(z)
    }

    /// Same problem with `(H, f)` multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut p = self.clone();
        p.h *= c;
        p.f *= c;
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

/// Infinity norms of the four KKT conditions. Complementarity uses the
/// natural residual `min(mu_i, b_i - a_i'z)`, which does not grow with the
/// multiplier scale.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.dual).max(self.complementarity)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub lambda_eq: DVector<f64>,
    pub mu_in: DVector<f64>,
    pub status: QpStatus,
    pub kkt: KktResiduals,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 4000 }
    }
}

/// Recomputes the KKT residuals of `s` directly from the problem data.
pub fn check_kkt(p: &QpProblem, s: &QpSolution) -> KktResiduals {
    let grad = &p.h * &s.z + &p.f + p.a_eq.transpose() * &s.lambda_eq + p.a_in.transpose() * &s.mu_in;
    let eq = &p.a_eq * &s.z - &p.b_eq;
    let slack = &p.a_in * &s.z - &p.b_in;
    let primal_in = slack.iter().fold(0.0f64, |acc, v| acc.max(*v));
    let primal_eq = eq.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let dual = s.mu_in.iter().fold(0.0f64, |acc, v| acc.max(-v));
    let complementarity = s
        .mu_in
        .iter()
        .zip(slack.iter())
        .fold(0.0f64, |acc, (m, r)| acc.max(m.min(-r).abs()));
    KktResiduals {
        stationarity: grad.amax(),
        primal: primal_eq.max(primal_in),
        dual,
        complementarity,
    }
}

pub fn solve(p: &QpProblem, settings: &QpSettings) -> QpSolution {
    match Cholesky::new(p.h.clone()) {
        Some(chol) => {
            let mut sol = dual_active_set(p, &p.h, &chol, &p.f, settings, settings.max_iter);
            finish(p, &mut sol, settings);
            sol
        }
        None => proximal(p, settings),
    }
}

fn finish(p: &QpProblem, sol: &mut QpSolution, settings: &QpSettings) {
    sol.kkt = check_kkt(p, sol);
    if sol.status == QpStatus::Optimal && sol.kkt.max() > settings.tol {
        sol.status = QpStatus::MaxIter;
    }
}

/// Proximal-point outer loop for singular `H`: each subproblem adds
/// `rho/2 |z - z_k|^2`, which is strictly convex.
fn proximal(p: &QpProblem, settings: &QpSettings) -> QpSolution {
    let n = p.dim();
    let rho = 1e-6 * (1.0 + p.h.amax());
    let mut hr = p.h.clone();
    for i in 0..n {
        hr[(i, i)] += rho;
    }
    let chol = match Cholesky::new(hr.clone()) {
        Some(c) => c,
        None => {
            // Indefinite beyond rounding: not a convex problem we can certify.
            let mut sol = empty_solution(p, QpStatus::MaxIter);
            finish(p, &mut sol, settings);
            return sol;
        }
    };
    let mut z = DVector::zeros(n);
    let mut used = 0;
    let mut last = empty_solution(p, QpStatus::MaxIter);
    while used < settings.max_iter {
        let f = &p.f - &z * rho;
        let sol = dual_active_set(p, &hr, &chol, &f, settings, settings.max_iter - used);
        used += sol.iterations.max(1);
        if sol.status != QpStatus::Optimal {
            let mut out = sol;
            out.iterations = used;
            finish(p, &mut out, settings);
            return out;
        }
        let step = (&sol.z - &z).amax();
        z = sol.z.clone();
        last = sol;
        last.iterations = used;
        let kkt = check_kkt(p, &last);
        if step <= 0.1 * settings.tol && kkt.max() <= settings.tol {
            last.kkt = kkt;
            return last;
        }
    }
    last.status = QpStatus::MaxIter;
    last.iterations = used;
    last.kkt = check_kkt(p, &last);
    last
}

fn empty_solution(p: &QpProblem, status: QpStatus) -> QpSolution {
    QpSolution {
        z: DVector::zeros(p.dim()),
        lambda_eq: DVector::zeros(p.a_eq.nrows()),
        mu_in: DVector::zeros(p.a_in.nrows()),
        status,
        kkt: KktResiduals::default(),
        iterations: 0,
    }
}

/// A constraint in `n'z >= b` form.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Row {
    /// Equality row `i`, negated when `sign < 0`.
    Eq { index: usize, sign: f64 },
    In { index: usize },
}

impl Row {
    fn normal(&self, p: &QpProblem) -> DVector<f64> {
        match *self {
            Row::Eq { index, sign } => p.a_eq.row(index).transpose() * sign,
            Row::In { index } => -p.a_in.row(index).transpose(),
        }
    }

    fn rhs(&self, p: &QpProblem) -> f64 {
        match *self {
            Row::Eq { index, sign } => p.b_eq[index] * sign,
            Row::In { index } => -p.b_in[index],
        }
    }

    fn is_equality(&self) -> bool {
        matches!(self, Row::Eq { .. })
    }
}

/// Goldfarb-Idnani iterations on `1/2 z'Hz + f'z` with `H = L L'`.
fn dual_active_set(
    p: &QpProblem,
    h: &DMatrix<f64>,
    chol: &Cholesky<f64, Dyn>,
    f: &DVector<f64>,
    settings: &QpSettings,
    max_iter: usize,
) -> QpSolution {
    let n = p.dim();
    let l = chol.l();
    let mut x = -chol.solve(f);
    let mut active: Vec<Row> = Vec::new();
    let mut normals: Vec<DVector<f64>> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let mut iterations = 0;
    let mut pending_eq: Vec<usize> = (0..p.a_eq.nrows()).collect();
    pending_eq.reverse();

    let status = 'outer: loop {
        // Pick the next constraint to add: equalities first, then the most
        // violated inequality.
        let candidate = if let Some(index) = pending_eq.pop() {
            let r = p.a_eq.row(index).dot(&x.transpose()) - p.b_eq[index];
            let sign = if r > 0.0 { -1.0 } else { 1.0 };
            Row::Eq { index, sign }
        } else {
            let mut worst: Option<(usize, f64)> = None;
            for i in 0..p.a_in.nrows() {
                if active.iter().any(|r| *r == Row::In { index: i }) {
                    continue;
                }
                let viol = p.a_in.row(i).dot(&x.transpose()) - p.b_in[i];
                let thresh = 1e-3 * settings.tol * (1.0 + p.b_in[i].abs());
                if viol > thresh && worst.is_none_or(|(_, w)| viol > w) {
                    worst = Some((i, viol));
                }
            }
            match worst {
                Some((index, _)) => Row::In { index },
                None => break QpStatus::Optimal,
            }
        };
        let np = candidate.normal(p);
        let bp = candidate.rhs(p);
        let mut u_plus = 0.0;

        loop {
            iterations += 1;
            if iterations > max_iter {
                break 'outer QpStatus::MaxIter;
            }
            let (z, r) = directions(&l, &normals, &np, n);
            let mut t1 = f64::INFINITY;
            let mut drop: Option<usize> = None;
            for (j, row) in active.iter().enumerate() {
                if !row.is_equality() && r[j] > 0.0 {
                    let ratio = u[j] / r[j];
                    if ratio < t1 {
                        t1 = ratio;
                        drop = Some(j);
                    }
                }
            }
            let s_p = np.dot(&x) - bp;
            let znp = z.dot(&np);
            let t2 = if znp > 1e-14 * np.norm_squared().max(1e-300) * z.norm().max(1.0) && z.amax() > 0.0
            {
                (-s_p / znp).max(0.0)
            } else {
                f64::INFINITY
            };

            if t1.is_infinite() && t2.is_infinite() {
                break 'outer QpStatus::Infeasible;
            }
            if t2.is_infinite() {
                for (j, uj) in u.iter_mut().enumerate() {
                    *uj -= t1 * r[j];
                }
                u_plus += t1;
                let k = drop.expect("finite t1 has a drop index");
                active.remove(k);
                normals.remove(k);
                u.remove(k);
                continue;
            }
            let t = t1.min(t2);
            x += &z * t;
            for (j, uj) in u.iter_mut().enumerate() {
                *uj -= t * r[j];
            }
            u_plus += t;
            if t2 <= t1 {
                active.push(candidate);
                normals.push(np.clone());
                u.push(u_plus);
                break;
            }
            let k = drop.expect("finite t1 has a drop index");
            active.remove(k);
            normals.remove(k);
            u.remove(k);
        }
    };

    if status == QpStatus::Optimal && !active.is_empty() {
        refine(p, h, f, &active, &normals, &mut x, &mut u);
    }

    let mut lambda_eq = DVector::zeros(p.a_eq.nrows());
    let mut mu_in = DVector::zeros(p.a_in.nrows());
    for (row, uj) in active.iter().zip(u.iter()) {
        match *row {
            Row::Eq { index, sign } => lambda_eq[index] = -sign * uj,
            Row::In { index } => mu_in[index] = *uj,
        }
    }
    QpSolution { z: x, lambda_eq, mu_in, status, kkt: KktResiduals::default(), iterations }
}

/// Primal step `z = H^-1 (I - N (N'H^-1N)^-1 N'H^-1) n_p` and dual step
/// `r = (N'H^-1N)^-1 N'H^-1 n_p`, via a QR of `L^-1 N`.
fn directions(
    l: &DMatrix<f64>,
    normals: &[DVector<f64>],
    np: &DVector<f64>,
    n: usize,
) -> (DVector<f64>, DVector<f64>) {
    let d = l.solve_lower_triangular(np).expect("Cholesky factor is nonsingular");
    if normals.is_empty() {
        let z = l.transpose().solve_upper_triangular(&d).expect("nonsingular");
        return (z, DVector::zeros(0));
    }
    let q = normals.len();
    let mut nmat = DMatrix::zeros(n, q);
    for (j, col) in normals.iter().enumerate() {
        nmat.set_column(j, col);
    }
    let m = l.solve_lower_triangular(&nmat).expect("nonsingular");
    let qr = m.qr();
    let q1 = qr.q();
    let rmat = qr.r();
    let proj = q1.transpose() * &d;
    let z_local = &d - &q1 * &proj;
    let z = l.transpose().solve_upper_triangular(&z_local).expect("nonsingular");
    let r = rmat.solve_upper_triangular(&proj).unwrap_or_else(|| DVector::zeros(q));
    (z, r)
}

/// Re-solves the KKT system of the final working set to clean up rounding
/// accumulated over the active-set updates; kept only if it is no worse.
fn refine(
    p: &QpProblem,
    h: &DMatrix<f64>,
    f: &DVector<f64>,
    active: &[Row],
    normals: &[DVector<f64>],
    x: &mut DVector<f64>,
    u: &mut [f64],
) {
    let n = p.dim();
    let q = active.len();
    let mut k = DMatrix::zeros(n + q, n + q);
    let mut rhs = DVector::zeros(n + q);
    k.view_mut((0, 0), (n, n)).copy_from(h);
    for (j, (row, nj)) in active.iter().zip(normals.iter()).enumerate() {
        k.view_mut((0, n + j), (n, 1)).copy_from(nj);
        k.view_mut((n + j, 0), (1, n)).copy_from(&nj.transpose());
        rhs[n + j] = row.rhs(p);
    }
    rhs.rows_mut(0, n).copy_from(&(-f));
    let Some(sol) = k.lu().solve(&rhs) else { return };
    let new_x = sol.rows(0, n).into_owned();
    let new_u: Vec<f64> = (0..q).map(|j| -sol[n + j]).collect();
    if !new_x.iter().all(|v| v.is_finite()) {
        return;
    }
    if active.iter().zip(new_u.iter()).any(|(r, v)| !r.is_equality() && *v < 0.0) {
        return;
    }
    let residual = |xv: &DVector<f64>, uv: &[f64]| {
        let mut g = h * xv + f;
        for (nj, uj) in normals.iter().zip(uv) {
            g -= nj * *uj;
        }
        g.amax()
    };
    if residual(&new_x, &new_u) <= residual(x, u) {
        *x = new_x;
        u.copy_from_slice(&new_u);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn unconstrained_minimum() {
        let p = QpProblem::unconstrained(DMatrix::identity(2, 2), DVector::from_vec(vec![-1.0, -2.0])).unwrap();
        let s = solve(&p, &QpSettings::default());
        assert_eq!(s.status, QpStatus::Optimal);
        assert_abs_diff_eq!(s.z[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(s.z[1], 2.0, epsilon = 1e-14);
    }

    fn clipped() -> QpProblem {
        QpProblem::inequality(
            DMatrix::from_element(1, 1, 2.0),
            DVector::from_element(1, -4.0),
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn clipped_one_dimensional() {
        let p = clipped();
        let s = solve(&p, &QpSettings::default());
        assert_eq!(s.status, QpStatus::Optimal);
        assert_abs_diff_eq!(s.z[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(s.mu_in[0], 2.0, epsilon = 1e-14);
    }

    #[test]
    fn kkt_of_exact_solution() {
        let p = clipped();
        let exact = QpSolution {
            z: DVector::from_element(1, 1.0),
            lambda_eq: DVector::zeros(0),
            mu_in: DVector::from_element(1, 2.0),
            status: QpStatus::Optimal,
            kkt: KktResiduals::default(),
            iterations: 0,
        };
        let r = check_kkt(&p, &exact);
        assert!(r.max() <= 1e-14);
        let mut moved = exact.clone();
        moved.z[0] += 1e-3;
        assert!(check_kkt(&p, &moved).stationarity > r.stationarity);
    }

    #[test]
    fn equality_constrained() {
        // min z1^2 + z2^2 s.t. z1 + z2 = 1
        let p = QpProblem::new(
            DMatrix::identity(2, 2) * 2.0,
            DVector::zeros(2),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DVector::from_element(1, 1.0),
            DMatrix::zeros(0, 2),
            DVector::zeros(0),
        )
        .unwrap();
        let s = solve(&p, &QpSettings::default());
        assert_eq!(s.status, QpStatus::Optimal);
        assert_abs_diff_eq!(s.z[0], 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(s.lambda_eq[0], -1.0, epsilon = 1e-14);
    }

    #[test]
    fn detects_infeasibility() {
        // z <= -1 and -z <= -1 (z >= 1)
        let p = QpProblem::inequality(
            DMatrix::identity(1, 1),
            DVector::zeros(1),
            DMatrix::from_column_slice(2, 1, &[1.0, -1.0]),
            DVector::from_vec(vec![-1.0, -1.0]),
        )
        .unwrap();
        assert_eq!(solve(&p, &QpSettings::default()).status, QpStatus::Infeasible);
    }

    #[test]
    fn semidefinite_hessian() {
        // min z1^2 - z2 s.t. z2 <= 3
        let mut h = DMatrix::zeros(2, 2);
        h[(0, 0)] = 2.0;
        let p = QpProblem::inequality(
            h,
            DVector::from_vec(vec![0.0, -1.0]),
            DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
            DVector::from_element(1, 3.0),
        )
        .unwrap();
        let s = solve(&p, &QpSettings::default());
        assert_eq!(s.status, QpStatus::Optimal);
        assert_abs_diff_eq!(s.z[1], 3.0, epsilon = 1e-7);
        assert_abs_diff_eq!(s.mu_in[0], 1.0, epsilon = 1e-7);
    }

    #[test]
    fn rejects_bad_dimensions_and_asymmetry() {
        assert!(QpProblem::unconstrained(DMatrix::identity(2, 2), DVector::zeros(3)).is_err());
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(
            QpProblem::unconstrained(h, DVector::zeros(2)),
            Err(QpError::NotSymmetric(_))
        ));
    }

    #[test]
    fn iteration_budget() {
        let p = clipped();
        let s = solve(&p, &QpSettings { tol: 1e-8, max_iter: 0 });
        assert_eq!(s.status, QpStatus::MaxIter);
    }
}
