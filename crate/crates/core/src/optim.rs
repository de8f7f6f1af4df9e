//! Small deterministic optimizers: a log-barrier damped Newton method for
//! linearly constrained smooth problems, golden-section search and a
//! box-clamped Nelder-Mead.

use nalgebra::{DMatrix, DVector};

/// Linear constraint `a . theta <= b`.
#[derive(Debug, Clone)]
pub(crate) struct LinCon {
    pub a: Vec<(usize, f64)>,
    pub b: f64,
}

impl LinCon {
    pub(crate) fn upper(i: usize, b: f64) -> Self {
        LinCon { a: vec![(i, 1.0)], b }
    }
    pub(crate) fn lower(i: usize, b: f64) -> Self {
        LinCon { a: vec![(i, -1.0)], b: -b }
    }
    /// `theta_i <= theta_j`
    pub(crate) fn ordered(i: usize, j: usize) -> Self {
        LinCon { a: vec![(i, 1.0), (j, -1.0)], b: 0.0 }
    }
    fn slack(&self, x: &[f64]) -> f64 {
        self.b - self.a.iter().map(|&(i, c)| c * x[i]).sum::<f64>()
    }
    fn dot(&self, d: &[f64]) -> f64 {
        self.a.iter().map(|&(i, c)| c * d[i]).sum()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BarrierResult {
    pub x: Vec<f64>,
    pub value: f64,
}

fn barrier_value<F: Fn(&[f64]) -> (f64, Vec<f64>)>(f: &F, cons: &[LinCon], x: &[f64], mu: f64) -> f64 {
    let mut v = f(x).0;
    for c in cons {
        let s = c.slack(x);
        if s <= 0.0 {
            return f64::INFINITY;
        }
        v -= mu * s.ln();
    }
    v
}

/// Minimizes `f` over the interior of the polytope described by `cons`,
/// following the central path down to `mu = 1e-13`. `f` returns the value and
/// the analytic gradient; the Hessian is a finite difference of the gradient.
pub(crate) fn barrier_minimize<F: Fn(&[f64]) -> (f64, Vec<f64>)>(f: &F, cons: &[LinCon], x0: Vec<f64>) -> BarrierResult {
    let n = x0.len();
    let mut x = x0;
    if n == 0 {
        let value = f(&x).0;
        return BarrierResult { x, value };
    }
    let mut mu = 1e-2;
    while mu >= 1e-13 {
        for _ in 0..60 {
            let (_, g0) = f(&x);
            let slacks: Vec<f64> = cons.iter().map(|c| c.slack(&x)).collect();
            let mut g = DVector::from_vec(g0.clone());
            let mut h = DMatrix::<f64>::zeros(n, n);
            for (c, &s) in cons.iter().zip(&slacks) {
                for &(i, ai) in &c.a {
                    g[i] += mu * ai / s;
                    for &(j, aj) in &c.a {
                        h[(i, j)] += mu * ai * aj / (s * s);
                    }
                }
            }
            // Finite-difference Hessian of the objective, steps kept inside.
            for j in 0..n {
                let mut room = f64::INFINITY;
                for (c, &s) in cons.iter().zip(&slacks) {
                    if let Some(&(_, aj)) = c.a.iter().find(|p| p.0 == j) {
                        room = room.min(s / aj.abs());
                    }
                }
                let step = (1e-6 * x[j].abs().max(1e-2)).min(0.25 * room);
                let mut xp = x.clone();
                xp[j] += step;
                let mut xm = x.clone();
                xm[j] -= step;
                let gp = f(&xp).1;
                let gm = f(&xm).1;
                for i in 0..n {
                    h[(i, j)] += (gp[i] - gm[i]) / (2.0 * step);
                }
            }
            let hs = (&h + h.transpose()) * 0.5;
            let scale = (0..n).map(|i| hs[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
            let mut lambda = 0.0;
            let d = loop {
                let mut m = hs.clone();
                for i in 0..n {
                    m[(i, i)] += lambda;
                }
                if let Some(ch) = m.cholesky() {
                    break ch.solve(&(-&g));
                }
                lambda = if lambda == 0.0 { 1e-10 * scale } else { lambda * 10.0 };
                if lambda > 1e20 * scale {
                    break -&g / scale;
                }
            };
            let dec = -g.dot(&d);
            if !(dec > 1e-22) {
                break;
            }
            let dv: Vec<f64> = d.iter().copied().collect();
            let mut alpha: f64 = 1.0;
            for (c, &s) in cons.iter().zip(&slacks) {
                let ad = c.dot(&dv);
                if ad > 0.0 {
                    alpha = alpha.min(0.99 * s / ad);
                }
            }
            let cur = barrier_value(f, cons, &x, mu);
            let mut moved = false;
            for _ in 0..60 {
                let xn: Vec<f64> = x.iter().zip(&dv).map(|(a, b)| a + alpha * b).collect();
                let v = barrier_value(f, cons, &xn, mu);
                if v <= cur - 1e-4 * alpha * dec {
                    x = xn;
                    moved = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !moved || dec < 1e-20 {
                break;
            }
        }
        mu *= 0.1;
    }
    let value = f(&x).0;
    BarrierResult { x, value }
}

/// Maximizes a unimodal `f` on `[a, b]`; returns `(argmax, max)`.
pub(crate) fn golden_max<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    let (fa, fb) = (f(a), f(b));
    [(a, fa), (c, fc), (d, fd), (b, fb)]
        .into_iter()
        .fold((a, f64::NEG_INFINITY), |acc, p| if p.1 > acc.1 { p } else { acc })
}

/// Scans `n` uniform points on `[a, b]`, then polishes the best bracket with
/// golden section. Returns `(argmax, max)`.
pub(crate) fn scan_max<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize, tol: f64) -> (f64, f64) {
    let pts: Vec<f64> = (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect();
    let vals: Vec<f64> = pts.iter().map(|&t| f(t)).collect();
    let mut best = 0;
    for i in 1..n {
        if vals[i] > vals[best] {
            best = i;
        }
    }
    let lo = pts[best.saturating_sub(1)];
    let hi = pts[(best + 1).min(n - 1)];
    let (t, v) = golden_max(&f, lo, hi, tol);
    if v >= vals[best] {
        (t, v)
    } else {
        (pts[best], vals[best])
    }
}

/// Nelder-Mead maximization on a box. The search runs in unconstrained
/// coordinates `u` with `x = lo + (hi - lo)(1 + sin u)/2`, so optima on the
/// boundary are reachable.
pub(crate) fn nelder_mead_max<F: Fn(&[f64]) -> f64>(f: F, x0: &[f64], lo: &[f64], hi: &[f64], iters: usize) -> (Vec<f64>, f64) {
    let n = x0.len();
    let to_x = |u: &[f64]| -> Vec<f64> { (0..n).map(|i| lo[i] + (hi[i] - lo[i]) * 0.5 * (1.0 + u[i].sin())).collect() };
    let g = |u: &[f64]| f(&to_x(u));
    let u0: Vec<f64> = (0..n)
        .map(|i| {
            let s = if hi[i] > lo[i] { 2.0 * (x0[i] - lo[i]) / (hi[i] - lo[i]) - 1.0 } else { 0.0 };
            s.clamp(-1.0, 1.0).asin()
        })
        .collect();
    let mut simplex: Vec<Vec<f64>> = vec![u0.clone()];
    for i in 0..n {
        let mut p = u0.clone();
        p[i] += 0.3;
        simplex.push(p);
    }
    let mut vals: Vec<f64> = simplex.iter().map(|p| g(p)).collect();
    for _ in 0..iters {
        let mut idx: Vec<usize> = (0..=n).collect();
        idx.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).unwrap_or(std::cmp::Ordering::Equal));
        simplex = idx.iter().map(|&i| simplex[i].clone()).collect();
        vals = idx.iter().map(|&i| vals[i]).collect();
        let spread = (0..n).map(|j| simplex.iter().map(|p| (p[j] - simplex[0][j]).abs()).fold(0.0, f64::max)).fold(0.0, f64::max);
        if (vals[0] - vals[n]).abs() < 1e-15 && spread < 1e-9 {
            break;
        }
        let cen: Vec<f64> = (0..n).map(|j| simplex[..n].iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
        let along = |t: f64| -> Vec<f64> { (0..n).map(|j| cen[j] + t * (simplex[n][j] - cen[j])).collect() };
        let xr = along(-1.0);
        let fr = g(&xr);
        if fr > vals[0] {
            let xe = along(-2.0);
            let fe = g(&xe);
            if fe > fr {
                simplex[n] = xe;
                vals[n] = fe;
            } else {
                simplex[n] = xr;
                vals[n] = fr;
            }
        } else if fr > vals[n - 1] {
            simplex[n] = xr;
            vals[n] = fr;
        } else {
            let xc = along(0.5);
            let fc = g(&xc);
            if fc > vals[n] {
                simplex[n] = xc;
                vals[n] = fc;
            } else {
                for i in 1..=n {
                    simplex[i] = (0..n).map(|j| simplex[0][j] + 0.5 * (simplex[i][j] - simplex[0][j])).collect();
                    vals[i] = g(&simplex[i]);
                }
            }
        }
    }
    let mut best = 0;
    for i in 1..=n {
        if vals[i] > vals[best] {
            best = i;
        }
    }
    (to_x(&simplex[best]), vals[best])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn barrier_finds_boundary_minimum() {
        // min (x-2)^2 + (y+1)^2 subject to 0 <= x <= y <= 1.
        let f = |x: &[f64]| {
            let v = (x[0] - 2.0).powi(2) + (x[1] + 1.0).powi(2);
            (v, vec![2.0 * (x[0] - 2.0), 2.0 * (x[1] + 1.0)])
        };
        let cons = vec![LinCon::lower(0, 0.0), LinCon::ordered(0, 1), LinCon::upper(1, 1.0)];
        let r = barrier_minimize(&f, &cons, vec![0.2, 0.6]);
        // Optimum on x = y: minimize (t-2)^2 + (t+1)^2 -> t = 0.5.
        assert!((r.x[0] - 0.5).abs() < 1e-9 && (r.x[1] - 0.5).abs() < 1e-9, "{:?}", r.x);
    }

    #[test]
    fn golden_and_scan() {
        let (t, v) = golden_max(|x| -(x - 0.3).powi(2), 0.0, 1.0, 1e-10);
        assert!((t - 0.3).abs() < 1e-8 && v.abs() < 1e-15);
        let (t, _) = scan_max(|x| (6.0 * x).sin() - 0.1 * x, 0.0, 3.0, 64, 1e-12);
        assert!((t - (1f64 / 60.0).acos() / 6.0).abs() < 1e-6, "{t}");
    }

    #[test]
    fn nelder_mead_box() {
        let (x, v) = nelder_mead_max(|p| -(p[0] - 0.2).powi(2) - (p[1] - 5.0).powi(2), &[0.5, 0.5], &[0.0, 0.0], &[1.0, 1.0], 500);
        assert!((x[0] - 0.2).abs() < 1e-5 && (x[1] - 1.0).abs() < 1e-9, "{x:?}");
        assert!((v + 16.0).abs() < 1e-8);
    }
}
