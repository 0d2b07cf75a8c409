//! Reference computations shared by the oracle suites and the acceptance run.
#![allow(dead_code)]

use alip_stepper::alip::{AlipParams, AlipState};
use alip_stepper::qp::QpProblem;
use nalgebra::{DMatrix, DVector, Matrix2, Matrix4, Vector2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Classic RK4 on the matrix ODE `Phi' = A Phi`.
pub fn rk4_exp(a: &Matrix4<f64>, t: f64, h: f64) -> Matrix4<f64> {
    let n = (t / h).round().max(1.0) as usize;
    let h = t / n as f64;
    let mut p = Matrix4::identity();
    for _ in 0..n {
        let k1 = a * p;
        let k2 = a * (p + k1 * (0.5 * h));
        let k3 = a * (p + k2 * (0.5 * h));
        let k4 = a * (p + k3 * h);
        p += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    p
}

pub fn closed_form(m: f64, g: f64, zh: f64, t: f64) -> Matrix4<f64> {
    let lam = (g / zh).sqrt();
    let (c, s) = ((lam * t).cosh(), (lam * t).sinh());
    let k = m * zh * lam;
    let mut p = Matrix4::zeros();
    p[(0, 0)] = c;
    p[(0, 3)] = s / k;
    p[(3, 0)] = k * s;
    p[(3, 3)] = c;
    p[(1, 1)] = c;
    p[(1, 2)] = -s / k;
    p[(2, 1)] = -k * s;
    p[(2, 2)] = c;
    p
}

/// Period-2 orbit by iteration: the sagittal plane uses the deadbeat foothold,
/// the lateral plane iterates its stable mode forward and its unstable mode
/// through the inverse map.
pub fn orbit_by_iteration(p: &AlipParams, ly_des: f64, sigma: f64) -> (AlipState, f64) {
    let ts = p.step_duration();
    let lam = p.omega();
    let k = p.mass_height() * lam;
    let (c, s) = ((lam * ts).cosh(), (lam * ts).sinh());
    let w = p.step_width();

    // Sagittal: x_end = c (x - u) + s L / k with (x - u) chosen so L_end = ly_des.
    let (mut x, mut ly) = (0.0, 0.0);
    for _ in 0..50 {
        let rel = (ly_des - c * ly) / (k * s);
        x = c * rel + s * ly / k;
        ly = ly_des;
    }

    // Lateral (y, L_x): one step matrix and its inverse.
    let phi = Matrix2::new(c, -s / k, -k * s, c);
    let inv = phi.try_inverse().unwrap();
    let forward = |z: Vector2<f64>| {
        let zb = phi * (z + Vector2::new(sigma * w, 0.0));
        phi * (zb + Vector2::new(-sigma * w, 0.0))
    };
    let backward = |z: Vector2<f64>| {
        let zb = inv * z - Vector2::new(-sigma * w, 0.0);
        inv * zb - Vector2::new(sigma * w, 0.0)
    };
    // Unstable and stable eigenvectors of the lateral block.
    let basis = Matrix2::new(1.0, 1.0, -k, k);
    let to_modes = basis.try_inverse().unwrap();
    let mut z = Vector2::zeros();
    for _ in 0..200 {
        let f = to_modes * forward(z);
        let b = to_modes * backward(z);
        let next = basis * Vector2::new(b[0], f[1]);
        let done = (next - z).amax() < 1e-14 * (1.0 + z.amax());
        z = next;
        if done {
            break;
        }
    }
    let state = AlipState::new(x, z[0], z[1], ly);
    let closure = (forward(z) - z).amax();
    (state, closure)
}

/// Minimizer found by trying every active set of a strictly convex QP.
pub fn enumerate(p: &QpProblem) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = p.dim();
    let m = p.b_in.len();
    let mut best: Option<(DVector<f64>, DVector<f64>, f64)> = None;
    for mask in 0u32..(1 << m) {
        let act: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        let k = act.len();
        let mut kkt = DMatrix::zeros(n + k, n + k);
        let mut rhs = DVector::zeros(n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&p.h);
        for i in 0..n {
            rhs[i] = -p.f[i];
        }
        for (j, &r) in act.iter().enumerate() {
            for c in 0..n {
                kkt[(n + j, c)] = p.a_in[(r, c)];
                kkt[(c, n + j)] = p.a_in[(r, c)];
            }
            rhs[n + j] = p.b_in[r];
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        if !sol.iter().all(|v| v.is_finite()) {
            continue;
        }
        let z = sol.rows(0, n).into_owned();
        let primal_ok = (&p.a_in * &z - &p.b_in).iter().all(|v| *v <= 1e-9);
        let dual_ok = (0..k).all(|j| sol[n + j] >= -1e-9);
        if primal_ok && dual_ok {
            let mut mu = DVector::zeros(m);
            for (j, &r) in act.iter().enumerate() {
                mu[r] = sol[n + j];
            }
            let obj = p.objective(&z);
            if best.as_ref().is_none_or(|b| obj < b.2) {
                best = Some((z, mu, obj));
            }
        }
    }
    best.map(|(z, mu, _)| (z, mu))
}

pub fn random_qp(rng: &mut ChaCha8Rng) -> QpProblem {
    let n = rng.random_range(1..=6);
    let m = rng.random_range(0..=6);
    let r = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let h = &r * r.transpose() + DMatrix::identity(n, n) * 0.1;
    let h = (&h + h.transpose()) * 0.5;
    let f = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
    let a = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
    // Feasible by construction around a random point.
    let z0 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let b = &a * &z0 + DVector::from_fn(m, |_, _| rng.random_range(0.0..0.5));
    QpProblem::inequality(h, f, a, b).unwrap()
}

pub const H: f64 = 1e-5;
/// Denominator floor for gradients that are zero up to rounding.
pub const FLOOR: f64 = 1e-4;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

pub fn central_diff(params: &mut [f64], i: usize, f: &mut dyn FnMut(&[f64]) -> f64) -> f64 {
    let orig = params[i];
    params[i] = orig + H;
    let up = f(params);
    params[i] = orig - H;
    let down = f(params);
    params[i] = orig;
    (up - down) / (2.0 * H)
}

