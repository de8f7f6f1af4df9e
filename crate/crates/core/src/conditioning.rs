//! Exact Gaussian conditioning of the Hamiltonian at finite N.
//!
//! Everything here is a linear functional of the field (values and first or
//! second directional derivatives at explicit points of R^N), so joint laws
//! are finite Gaussian vectors and conditioning is a Schur complement.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mixture::{check_ladder, Mixture};

/// `scale * d_{dirs[0]} ... d_{dirs[j]} H(point)`; no directions is the value.
#[derive(Debug, Clone)]
pub struct Functional {
    pub label: String,
    pub point: DVector<f64>,
    pub dirs: Vec<DVector<f64>>,
    pub scale: f64,
}

impl Functional {
    pub fn value(label: impl Into<String>, point: DVector<f64>, scale: f64) -> Self {
        Functional { label: label.into(), point, dirs: vec![], scale }
    }

    pub fn derivative(label: impl Into<String>, point: DVector<f64>, u: DVector<f64>, scale: f64) -> Self {
        Functional { label: label.into(), point, dirs: vec![u], scale }
    }

    pub fn second(label: impl Into<String>, point: DVector<f64>, u: DVector<f64>, v: DVector<f64>, scale: f64) -> Self {
        Functional { label: label.into(), point, dirs: vec![u, v], scale }
    }
}

struct PairTerms<'a> {
    mix: &'a Mixture,
    s: f64,
    uy: Vec<f64>,
    xv: Vec<f64>,
    uv: Vec<Vec<f64>>,
}

impl PairTerms<'_> {
    // Each u-direction either differentiates xi (picking up <u,y>/N) or is
    // matched with a v-direction (picking up <u,v>/N with one derivative
    // fewer). Unmatched v-directions pick up <x,v>/N.
    fn walk(&self, i: usize, acc: f64, matched: usize, used: &mut [bool]) -> f64 {
        if i == self.uy.len() {
            let mut a = acc;
            for (j, &x) in self.xv.iter().enumerate() {
                if !used[j] {
                    a *= x;
                }
            }
            let order = self.uy.len() + self.xv.len() - matched;
            return a * self.mix.eval(self.s, order);
        }
        let mut total = self.walk(i + 1, acc * self.uy[i], matched, used);
        for j in 0..self.xv.len() {
            if !used[j] {
                used[j] = true;
                total += self.walk(i + 1, acc * self.uv[i][j], matched + 1, used);
                used[j] = false;
            }
        }
        total
    }
}

fn pair_cov(mix: &Mixture, f: &Functional, g: &Functional) -> f64 {
    let n = f.point.len() as f64;
    let terms = PairTerms {
        mix,
        s: f.point.dot(&g.point) / n,
        uy: f.dirs.iter().map(|u| u.dot(&g.point) / n).collect(),
        xv: g.dirs.iter().map(|v| f.point.dot(v) / n).collect(),
        uv: f.dirs.iter().map(|u| g.dirs.iter().map(|v| u.dot(v) / n).collect()).collect(),
    };
    let mut used = vec![false; g.dirs.len()];
    n * terms.walk(0, 1.0, 0, &mut used) * f.scale * g.scale
}

/// Exact joint covariance of the functionals under `E H(x)H(y) = N xi(<x,y>/N)`.
pub fn derivative_covariances(mix: &Mixture, fs: &[Functional]) -> Result<DMatrix<f64>> {
    let Some(first) = fs.first() else {
        return Ok(DMatrix::zeros(0, 0));
    };
    let n = first.point.len();
    for f in fs {
        if f.point.len() != n || f.dirs.iter().any(|u| u.len() != n) {
            return Err(Error::InvalidInput(format!("functional {} does not live in R^{n}", f.label)));
        }
    }
    let k = fs.len();
    let mut c = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in i..k {
            let v = pair_cov(mix, &fs[i], &fs[j]);
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    Ok(c)
}

/// Row-major CSV with a header naming each functional.
pub fn covariance_csv(fs: &[Functional], c: &DMatrix<f64>) -> String {
    let mut out = fs.iter().map(|f| f.label.as_str()).collect::<Vec<_>>().join(",");
    out.push('\n');
    for i in 0..c.nrows() {
        let row: Vec<String> = (0..c.ncols()).map(|j| format!("{:e}", c[(i, j)])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct Conditioned {
    /// Indices of the unobserved coordinates, in increasing order.
    pub free: Vec<usize>,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub pseudo_inverse: bool,
}

/// Conditions a centered Gaussian vector on `x[observed] = values`.
/// A numerically singular observed block is an error unless `pseudo_inverse`
/// is set, in which case the Moore-Penrose inverse is used.
pub fn schur_condition(joint: &DMatrix<f64>, observed: &[usize], values: &[f64], pseudo_inverse: bool) -> Result<Conditioned> {
    let n = joint.nrows();
    if joint.ncols() != n {
        return Err(Error::InvalidInput("covariance must be square".into()));
    }
    if observed.len() != values.len() {
        return Err(Error::InvalidInput("one value per observed index".into()));
    }
    let mut mark = vec![false; n];
    for &i in observed {
        if i >= n || mark[i] {
            return Err(Error::InvalidInput(format!("bad observed index {i}")));
        }
        mark[i] = true;
    }
    let free: Vec<usize> = (0..n).filter(|&i| !mark[i]).collect();
    let soo = joint.select_rows(observed).select_columns(observed);
    let sof = joint.select_rows(observed).select_columns(&free);
    let sff = joint.select_rows(&free).select_columns(&free);
    let vals = DVector::from_column_slice(values);

    let diag_max = (0..soo.nrows()).map(|i| soo[(i, i)]).fold(0.0, f64::max);
    let chol = soo.clone().cholesky().filter(|ch| {
        let l = ch.l_dirty();
        (0..l.nrows()).all(|i| l[(i, i)] * l[(i, i)] > 1e-13 * diag_max)
    });
    let (w, used_pinv) = match chol {
        Some(ch) => (ch.solve(&sof), false),
        None if pseudo_inverse => {
            let pinv = soo.pseudo_inverse(1e-12 * diag_max.max(1e-300)).map_err(|_| Error::SingularBlock)?;
            (pinv * &sof, true)
        }
        None => return Err(Error::SingularBlock),
    };
    let mean = w.transpose() * vals;
    let cov = sff - sof.transpose() * w;
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(Conditioned { free, mean, cov, pseudo_inverse: used_pinv })
}

/// Nested anchors `x_i = sum_{j<=i} sqrt(N (q_j - q_{j-1})) e_j` for i <= m,
/// drawn from a ladder `q_1 < ... < q_k` with `m <= k`.
#[derive(Debug, Clone, Serialize)]
pub struct BandGeometry {
    pub m: usize,
    pub ladder: Vec<f64>,
    pub n: usize,
    pub eps: f64,
}

impl BandGeometry {
    pub fn new(n: usize, ladder: Vec<f64>, m: usize, eps: f64) -> Result<Self> {
        check_ladder(&ladder)?;
        if m == 0 || m > ladder.len() {
            return Err(Error::InvalidInput(format!("depth {m} must lie in 1..={}", ladder.len())));
        }
        if n < m {
            return Err(Error::InvalidInput(format!("dimension {n} below depth {m}")));
        }
        Ok(BandGeometry { m, ladder, n, eps })
    }

    /// `q_0 = 0`, `q_i` from the ladder, and 1 past its end.
    pub fn q(&self, i: usize) -> f64 {
        match i {
            0 => 0.0,
            i if i <= self.ladder.len() => self.ladder[i - 1],
            _ => 1.0,
        }
    }

    pub fn anchor(&self, i: usize) -> DVector<f64> {
        let nf = self.n as f64;
        let mut x = DVector::zeros(self.n);
        for j in 1..=i {
            x[j - 1] = (nf * (self.q(j) - self.q(j - 1))).sqrt();
        }
        x
    }

    pub fn anchors(&self) -> Vec<DVector<f64>> {
        (1..=self.m).map(|i| self.anchor(i)).collect()
    }

    pub fn in_band(&self, y: &DVector<f64>) -> bool {
        let nf = self.n as f64;
        (1..=self.m).all(|i| {
            let x = self.anchor(i);
            (y.dot(&x) - x.dot(&x)).abs() <= nf * self.eps
        })
    }

    /// The map `z -> x_m + sqrt(N/(N-m) (q_{m+1}-q_m)) (0,..,0,z)` from
    /// `R^{N-m}` onto the slice where every overlap with the anchors is pinned.
    pub fn embed(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        let (n, m) = (self.n, self.m);
        if z.len() != n - m {
            return Err(Error::InvalidInput(format!("expected {} coordinates", n - m)));
        }
        let kappa = self.kappa();
        let mut y = self.anchor(m);
        for a in 0..n - m {
            y[m + a] += kappa * z[a];
        }
        Ok(y)
    }

    fn kappa(&self) -> f64 {
        let (nf, mf) = (self.n as f64, self.m as f64);
        (nf / (nf - mf) * (self.q(self.m + 1) - self.q(self.m))).sqrt()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ConditioningEvent {
    pub e: Option<f64>,
    pub e_vec: Vec<f64>,
    pub r_vec: Vec<f64>,
    pub geometry: BandGeometry,
}

impl ConditioningEvent {
    pub fn new(e: Option<f64>, e_vec: Vec<f64>, r_vec: Vec<f64>, geometry: BandGeometry) -> Result<Self> {
        if e_vec.len() != geometry.m || r_vec.len() != geometry.m {
            return Err(Error::InvalidInput(format!("need {} energies and radial derivatives", geometry.m)));
        }
        Ok(ConditioningEvent { e, e_vec, r_vec, geometry })
    }

    /// Membership of the targets in the eps-box around
    /// `(F'(beta), E*(q_i), R*(q_i))`.
    pub fn within(&self, f_prime: f64, e_star: &[f64], r_star: &[f64], eps: f64) -> bool {
        let m = self.geometry.m;
        if e_star.len() < m || r_star.len() < m {
            return false;
        }
        let e_ok = self.e.is_none_or(|e| (e - f_prime).abs() < eps);
        e_ok && (0..m).all(|i| (self.e_vec[i] - e_star[i]).abs() < eps && (self.r_vec[i] - r_star[i]).abs() < eps)
    }

    /// `E_m`, the deepest pinned energy.
    pub fn e_m(&self) -> f64 {
        self.e_vec[self.geometry.m - 1]
    }
}

/// Orthonormal basis of the complement of `span(vs)`, by Gram-Schmidt on the
/// standard basis; candidates whose residual norm is below 1e-8 are dropped.
pub fn complement_basis(vs: &[DVector<f64>], n: usize) -> Vec<DVector<f64>> {
    let mut q: Vec<DVector<f64>> = Vec::new();
    let orth = |w: &mut DVector<f64>, q: &[DVector<f64>]| {
        for _ in 0..2 {
            for b in q {
                let c = b.dot(w);
                w.axpy(-c, b, 1.0);
            }
        }
    };
    for v in vs {
        let mut w = v.clone();
        orth(&mut w, &q);
        let nw = w.norm();
        if nw > 1e-8 * v.norm().max(1e-300) {
            q.push(w / nw);
        }
    }
    let span = q.len();
    for j in 0..n {
        if q.len() == n {
            break;
        }
        let mut w = DVector::zeros(n);
        w[j] = 1.0;
        orth(&mut w, &q);
        let nw = w.norm();
        if nw > 1e-8 {
            q.push(w / nw);
        }
    }
    q.split_off(span)
}

/// The constraint set of the CP event at depth m: energies `H(x_i)/N`, radial
/// derivatives `d_{x_i - x_{i-1}} H(x_i) / |x_i - x_{i-1}|^2` and the
/// gradient components orthogonal to `x_1..x_i`. For a pure mixture the
/// first radial derivative is a multiple of `H(x_1)` and is left out.
pub fn cp_constraints(mix: &Mixture, event: &ConditioningEvent) -> (Vec<Functional>, Vec<f64>) {
    let g = &event.geometry;
    let nf = g.n as f64;
    let xs = g.anchors();
    let pure = mix.pure_degree().is_some();
    let mut fs = Vec::new();
    let mut vals = Vec::new();
    for i in 1..=g.m {
        let x = &xs[i - 1];
        fs.push(Functional::value(format!("H@x{i}"), x.clone(), 1.0 / nf));
        vals.push(event.e_vec[i - 1]);
        if !(pure && i == 1) {
            let d = if i == 1 { x.clone() } else { x - &xs[i - 2] };
            let scale = 1.0 / d.norm_squared();
            fs.push(Functional::derivative(format!("dR@x{i}"), x.clone(), d, scale));
            vals.push(event.r_vec[i - 1]);
        }
        for (j, b) in complement_basis(&xs[..i], g.n).into_iter().enumerate() {
            fs.push(Functional::derivative(format!("gperp{}@x{i}", j + 1), x.clone(), b, 1.0));
            vals.push(0.0);
        }
    }
    (fs, vals)
}

/// Conditional law of `H(y)/N` on the slice `<y, x_i>/N = q_i`, per unit N:
/// constant mean `E_m` and covariance `xi_{q_m}(<y1,y2>/N - q_m)`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct BandKernel {
    pub mean: f64,
    pub cov: f64,
}

pub fn band_kernel(mix: &Mixture, event: &ConditioningEvent, overlap: f64) -> Result<BandKernel> {
    let qm = event.geometry.q(event.geometry.m);
    // Points of the slice inside the ball satisfy <y1,y2>/N >= 2 q_m - 1.
    if overlap < 2.0 * qm - 1.0 - 1e-12 || overlap > 1.0 + 1e-12 {
        return Err(Error::InvalidInput(format!("overlap {overlap} unreachable on the slice at level {qm}")));
    }
    Ok(BandKernel { mean: event.e_m(), cov: mix.xi_q(qm).value(overlap - qm) })
}

/// The affine change of variables between `(E, R)` at a point of the slice
/// and `(E, R)` of the reduced model on the sphere of dimension `N - m`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ErTransform {
    pub n: usize,
    pub m: usize,
    pub e_m: f64,
    pub dq: f64,
}

impl ErTransform {
    pub fn prefactor(&self) -> f64 {
        (self.n as f64 / (self.n - self.m) as f64).sqrt()
    }

    pub fn forward(&self, e: f64, r: f64) -> (f64, f64) {
        let a = self.prefactor();
        (a * (e - self.e_m), a * self.dq * r)
    }

    pub fn inverse(&self, e: f64, r: f64) -> (f64, f64) {
        let a = self.prefactor();
        (e / a + self.e_m, r / (a * self.dq))
    }
}

#[derive(Debug, Clone)]
pub struct SphereReduction {
    pub reduced: Mixture,
    pub transform: ErTransform,
}

pub fn reduce_to_sphere(mix: &Mixture, event: &ConditioningEvent) -> Result<SphereReduction> {
    let g = &event.geometry;
    if g.n <= g.m {
        return Err(Error::InvalidInput(format!("dimension {} must exceed depth {}", g.n, g.m)));
    }
    let (qm, qn) = (g.q(g.m), g.q(g.m + 1));
    Ok(SphereReduction {
        reduced: mix.xi_q(qm).scale_arg(qn - qm),
        transform: ErTransform { n: g.n, m: g.m, e_m: event.e_m(), dq: qn - qm },
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct HessianDecomposition {
    /// Dimension of the GOE block, `N - m - 1`.
    pub dim: usize,
    /// Covariance of `(H/(N-m), radial derivative)` of the reduced model.
    pub sigma_u: [[f64; 2]; 2],
    pub grad_var: f64,
    /// `(1 - 1/(N-m)) xi_(m)''(1)`
    pub goe_scale: f64,
    pub sigma_singular: bool,
}

pub fn hessian_decomposition(mix: &Mixture, geometry: &BandGeometry) -> Result<HessianDecomposition> {
    let (n, m) = (geometry.n, geometry.m);
    if n <= m + 1 {
        return Err(Error::InvalidInput(format!("dimension {n} must exceed depth + 1 = {}", m + 1)));
    }
    let (qm, qn) = (geometry.q(m), geometry.q(m + 1));
    let red = mix.xi_q(qm).scale_arg(qn - qm);
    let d = (n - m) as f64;
    let s = red.sigma_xi();
    let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
    let scale = s[0][0] * s[1][1];
    Ok(HessianDecomposition {
        dim: n - m - 1,
        sigma_u: [[s[0][0] / d, s[0][1] / d], [s[1][0] / d, s[1][1] / d]],
        grad_var: red.d1(1.0),
        goe_scale: (1.0 - 1.0 / d) * red.d2(1.0),
        sigma_singular: !(det > 1e-12 * scale),
    })
}

/// Functionals realizing, at `y = T(z)` with `z = sqrt(N-m) e_1`, the
/// reduced energy and radial derivative (`U`), `grad_count` tangential
/// gradient entries and the requested entries of the normalized Hessian `G`.
/// `offsets` must be added to the value of each functional; only the
/// reduced energy has a nonzero offset.
#[derive(Debug, Clone)]
pub struct LevelProbe {
    pub functionals: Vec<Functional>,
    pub offsets: Vec<f64>,
    pub n_u: usize,
    pub n_grad: usize,
}

pub fn level_probe(mix: &Mixture, event: &ConditioningEvent, grad_count: usize, hess: &[(usize, usize)]) -> Result<LevelProbe> {
    let g = &event.geometry;
    let (n, m) = (g.n, g.m);
    let d = n - m;
    if d < 2 || grad_count > d - 1 || hess.iter().any(|&(i, j)| i >= d - 1 || j >= d - 1) {
        return Err(Error::InvalidInput("probe indices exceed the tangent dimension".into()));
    }
    let (nf, df) = (n as f64, d as f64);
    let mut z = DVector::zeros(d);
    z[0] = df.sqrt();
    let y = g.embed(&z)?;
    let kappa = g.kappa();
    let root = (df / nf).sqrt();
    let lift = |a: usize| {
        let mut e = DVector::zeros(n);
        e[m + a] = 1.0;
        e
    };
    let red = mix.xi_q(g.q(m)).scale_arg(g.q(m + 1) - g.q(m));
    let g_scale = (df / ((df - 1.0) * red.d2(1.0))).sqrt() * root * kappa * kappa;

    let mut fs = vec![
        Functional::value("U_energy", y.clone(), root / df),
        Functional::derivative("U_radial", y.clone(), lift(0) * df.sqrt(), root * kappa / df),
    ];
    let mut offsets = vec![-root * nf * event.e_m() / df, 0.0];
    for a in 0..grad_count {
        fs.push(Functional::derivative(format!("grad{}", a + 1), y.clone(), lift(a + 1), root * kappa));
        offsets.push(0.0);
    }
    for &(i, j) in hess {
        fs.push(Functional::second(format!("G{}_{}", i + 1, j + 1), y.clone(), lift(i + 1), lift(j + 1), g_scale));
        offsets.push(0.0);
    }
    Ok(LevelProbe { functionals: fs, offsets, n_u: 2, n_grad: grad_count })
}

/// Conditioning data of the two-replica problem at a one-step ladder `q1`.
#[derive(Debug, Clone, Serialize)]
pub struct FpConditioning {
    /// Covariance matrix (times N) of `(H(s)/N, H(x)/N, R, tangential)`, or of
    /// the three-entry vector without `R` for pure mixtures.
    pub c: DMatrix<f64>,
    pub v: DVector<f64>,
    pub u: DVector<f64>,
    /// `<v, u>`: the conditional mean of `H/N` on the constrained sphere.
    pub mean: f64,
    pub tau: f64,
    pub xi_tau: f64,
    pub v_cinv_v: f64,
    pub pure: bool,
}

/// Targets `(E, E_1, R_1)` of the event at `(s, x_1)`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FpTargets {
    pub e: f64,
    pub e1: f64,
    pub r1: f64,
}

fn drop_third<T: Clone>(v: Vec<T>, pure: bool) -> Vec<T> {
    v.into_iter().enumerate().filter(|&(i, _)| !(pure && i == 2)).map(|(_, x)| x).collect()
}

pub fn fp_matrix(mix: &Mixture, q1: f64) -> DMatrix<f64> {
    let pure = mix.pure_degree().is_some();
    let (x1, xq, dq, ddq) = (mix.value(1.0), mix.value(q1), mix.d1(q1), mix.d2(q1));
    let w = (1.0 - q1).sqrt() * dq;
    let full = [
        [x1, xq, dq, w],
        [xq, xq, dq, 0.0],
        [dq, dq, ddq + dq / q1, 0.0],
        [w, 0.0, 0.0, dq],
    ];
    let keep = drop_third((0..4).collect(), pure);
    DMatrix::from_fn(keep.len(), keep.len(), |i, j| full[keep[i]][keep[j]])
}

pub fn fp_vector(mix: &Mixture, q1: f64, r: f64, rho: f64) -> DVector<f64> {
    let pure = mix.pure_degree().is_some();
    let dr = mix.d1(rho);
    let v = vec![mix.value(r), mix.value(rho), dr * rho / q1, dr * (r - rho) / (1.0 - q1).sqrt()];
    DVector::from_vec(drop_third(v, pure))
}

pub fn fp_conditioning(mix: &Mixture, q1: f64, r: f64, rho: f64, targets: &FpTargets) -> Result<FpConditioning> {
    let tau = crate::franz_parisi::tau(q1, r, rho)?;
    let pure = mix.pure_degree().is_some();
    let c = fp_matrix(mix, q1);
    let v = fp_vector(mix, q1, r, rho);
    let b = DVector::from_vec(drop_third(vec![targets.e, targets.e1, targets.r1, 0.0], pure));
    let ch = c.clone().cholesky().ok_or(Error::SingularBlock)?;
    let u = ch.solve(&b);
    let resid = (&c * &u - &b).norm();
    if !(resid <= 1e-10 * b.norm().max(1.0)) {
        return Err(Error::SingularBlock);
    }
    let v_cinv_v = v.dot(&ch.solve(&v));
    Ok(FpConditioning { mean: v.dot(&u), xi_tau: mix.value(tau), v_cinv_v, tau, pure, c, v, u })
}

/// The observed functionals of the two-replica event in canonical
/// coordinates: `x_1 = sqrt(N q1) e_1`, `s = x_1 + sqrt(N(1-q1)) e_2`.
/// Order: `H(s)/N, H(x_1)/N, R_1` (omitted for pure mixtures), the `e_2`
/// derivative over `sqrt N`, then the raw derivatives along `e_3..e_N`.
pub fn fp_constraints(mix: &Mixture, n: usize, q1: f64) -> Result<Vec<Functional>> {
    if n < 3 || !(q1 > 0.0 && q1 < 1.0) {
        return Err(Error::InvalidInput("need N >= 3 and q1 in (0,1)".into()));
    }
    let nf = n as f64;
    let e = |i: usize| {
        let mut v = DVector::zeros(n);
        v[i] = 1.0;
        v
    };
    let x1 = e(0) * (nf * q1).sqrt();
    let s = &x1 + e(1) * (nf * (1.0 - q1)).sqrt();
    let mut fs = vec![Functional::value("H@s", s, 1.0 / nf), Functional::value("H@x1", x1.clone(), 1.0 / nf)];
    if mix.pure_degree().is_none() {
        fs.push(Functional::derivative("dR@x1", x1.clone(), e(0), 1.0 / (nf * q1).sqrt()));
    }
    fs.push(Functional::derivative("g2@x1", x1.clone(), e(1), 1.0 / nf.sqrt()));
    for j in 2..n {
        fs.push(Functional::derivative(format!("gperp{}@x1", j - 1), x1.clone(), e(j), 1.0));
    }
    Ok(fs)
}

/// A point of `{s' : <s',s>/N = r, <s',x_1>/N = rho}` whose last `N-2`
/// coordinates point along `tail`.
pub fn fp_probe_point(n: usize, q1: f64, r: f64, rho: f64, tail: &DVector<f64>) -> Result<DVector<f64>> {
    let tau = crate::franz_parisi::tau(q1, r, rho)?;
    if tail.len() != n - 2 || tau > 1.0 + 1e-12 {
        return Err(Error::InvalidInput("tail must have N-2 entries and rho must lie in J".into()));
    }
    let nf = n as f64;
    let mut p = DVector::zeros(n);
    p[0] = rho * (nf / q1).sqrt();
    p[1] = (r - rho) * (nf / (1.0 - q1)).sqrt();
    let t = tail * ((nf * (1.0 - tau).max(0.0)).sqrt() / tail.norm());
    p.rows_mut(2, n - 2).copy_from(&t);
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mix() -> Mixture {
        Mixture::new(&[(2, 0.3), (3, 0.5), (4, 0.2)]).unwrap()
    }

    fn unit(n: usize, i: usize) -> DVector<f64> {
        let mut v = DVector::zeros(n);
        v[i] = 1.0;
        v
    }

    #[test]
    fn first_order_covariances() {
        let m = mix();
        let n = 6;
        let x = unit(n, 0) * (0.6 * n as f64).sqrt();
        let u1 = unit(n, 1);
        let u2 = unit(n, 2);
        let fs = [
            Functional::value("H", x.clone(), 1.0),
            Functional::derivative("a", x.clone(), u1.clone(), 1.0),
            Functional::derivative("b", x.clone(), u2, 1.0),
            Functional::derivative("r", x.clone(), unit(n, 0), 1.0),
        ];
        let c = derivative_covariances(&m, &fs).unwrap();
        assert!(c[(0, 1)].abs() < 1e-15);
        assert!((c[(1, 1)] - m.d1(0.6)).abs() < 1e-14);
        assert!(c[(1, 2)].abs() < 1e-15);
        let xr = x[0];
        assert!((c[(3, 3)] - (m.d1(0.6) + m.d2(0.6) * xr * xr / n as f64)).abs() < 1e-12);
        assert!((c[(0, 3)] - m.d1(0.6) * xr).abs() < 1e-12);
    }

    #[test]
    fn second_order_matches_finite_differences() {
        // d/dt of Cov(H(x + t w), d_u d_v H(y)) against the third-order functional.
        let m = mix();
        let n = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rv = || DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
        let (x, y, u, v, w) = (rv(), rv(), rv(), rv(), rv());
        let cov = |p: &DVector<f64>| {
            derivative_covariances(&m, &[Functional::derivative("", p.clone(), w.clone(), 1.0), Functional::second("", y.clone(), u.clone(), v.clone(), 1.0)]).unwrap()[(0, 1)]
        };
        let h = 1e-5;
        let fd = (cov(&(&x + &u * h)) - cov(&(&x - &u * h))) / (2.0 * h);
        let exact = derivative_covariances(&m, &[Functional::second("", x.clone(), u.clone(), w.clone(), 1.0), Functional::second("", y.clone(), u.clone(), v.clone(), 1.0)]).unwrap()[(0, 1)];
        assert!((fd - exact).abs() < 1e-7 * exact.abs().max(1.0), "{fd} {exact}");
    }

    #[test]
    fn schur_small_cases() {
        let c = schur_condition(&DMatrix::identity(2, 2), &[0], &[5.0], false).unwrap();
        assert_eq!(c.mean[0], 0.0);
        assert_eq!(c.cov[(0, 0)], 1.0);
        let mut bd = DMatrix::zeros(4, 4);
        bd.view_mut((0, 0), (2, 2)).copy_from(&DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]));
        bd.view_mut((2, 2), (2, 2)).copy_from(&DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]));
        let c = schur_condition(&bd, &[0], &[1.0], false).unwrap();
        assert_eq!(c.free, vec![1, 2, 3]);
        assert!((c.cov[(1, 1)] - 3.0).abs() < 1e-15 && (c.cov[(2, 1)] - 1.0).abs() < 1e-15);
        assert!(c.mean[1] == 0.0 && c.mean[2] == 0.0);
    }

    #[test]
    fn schur_iterated_equals_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = DMatrix::from_fn(8, 8, |_, _| rng.random::<f64>() - 0.5);
        let s = &a * a.transpose() + DMatrix::identity(8, 8) * 0.1;
        let vals = [0.3, -1.2, 0.7];
        let block = schur_condition(&s, &[1, 4, 6], &vals, false).unwrap();
        // One at a time: condition on index 1, then 4, then 6, tracking the mean.
        let mut cov = s.clone();
        let mut mean = DVector::zeros(8);
        let mut idx: Vec<usize> = (0..8).collect();
        for (&o, &val) in [1usize, 4, 6].iter().zip(&vals) {
            let p = idx.iter().position(|&i| i == o).unwrap();
            let step = schur_condition(&cov, &[p], &[val - mean[p]], false).unwrap();
            let rest: Vec<f64> = step.free.iter().map(|&j| mean[j]).collect();
            mean = DVector::from_vec(rest) + step.mean;
            cov = step.cov;
            idx.remove(p);
        }
        assert!((mean - &block.mean).amax() < 1e-10);
        assert!((cov - &block.cov).amax() < 1e-10);
    }

    #[test]
    fn singular_block_detection() {
        let s = DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 0.5, 1.0, 1.0, 0.5, 0.5, 0.5, 1.0]);
        assert!(matches!(schur_condition(&s, &[0, 1], &[1.0, 1.0], false), Err(Error::SingularBlock)));
        let c = schur_condition(&s, &[0, 1], &[1.0, 1.0], true).unwrap();
        assert!(c.pseudo_inverse);
        assert!((c.mean[0] - 0.5).abs() < 1e-10 && (c.cov[(0, 0)] - 0.75).abs() < 1e-10);
    }

    #[test]
    fn anchors_and_complement() {
        let g = BandGeometry::new(7, vec![0.2, 0.5, 0.9], 3, 0.0).unwrap();
        let xs = g.anchors();
        for i in 0..3 {
            for j in 0..3 {
                assert!((xs[i].dot(&xs[j]) / 7.0 - g.q(i.min(j) + 1)).abs() < 1e-15);
            }
        }
        let b = complement_basis(&xs[..2], 7);
        assert_eq!(b.len(), 5);
        for v in &b {
            assert!(v.dot(&xs[0]).abs() < 1e-14 && v.dot(&xs[1]).abs() < 1e-14);
        }
    }

    #[test]
    fn band_kernel_examples() {
        let g = BandGeometry::new(10, vec![0.5], 1, 0.0).unwrap();
        let ev = ConditioningEvent::new(None, vec![0.4], vec![1.0], g).unwrap();
        let k = band_kernel(&Mixture::pure(2), &ev, 0.8).unwrap();
        assert_eq!(k.mean, 0.4);
        assert!((k.cov - 0.09).abs() < 1e-15);
        assert!(band_kernel(&Mixture::pure(2), &ev, -0.1).is_err());
    }

    #[test]
    fn band_kernel_is_schur_of_constraints() {
        let m = mix();
        let g = BandGeometry::new(12, vec![0.3, 0.55, 0.8], 2, 0.0).unwrap();
        let ev = ConditioningEvent::new(None, vec![0.6, 0.9], vec![1.5, 2.2], g.clone()).unwrap();
        let (mut fs, vals) = cp_constraints(&m, &ev);
        let k = fs.len();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ys = Vec::new();
        for _ in 0..3 {
            let z = DVector::from_fn(10, |_, _| rng.random::<f64>() - 0.5);
            let z = &z * ((10.0 * rng.random_range(0.3f64..1.0)).sqrt() / z.norm());
            ys.push(g.embed(&z).unwrap());
        }
        for (a, y) in ys.iter().enumerate() {
            fs.push(Functional::value(format!("H@y{a}"), y.clone(), 1.0 / 12.0));
        }
        let c = derivative_covariances(&m, &fs).unwrap();
        let cond = schur_condition(&c, &(0..k).collect::<Vec<_>>(), &vals, false).unwrap();
        for a in 0..3 {
            assert!((cond.mean[a] - 0.9).abs() < 1e-10);
            for b in 0..3 {
                let t = ys[a].dot(&ys[b]) / 12.0;
                let want = band_kernel(&m, &ev, t).unwrap().cov / 12.0;
                assert!((cond.cov[(a, b)] - want).abs() < 1e-10 * want.abs().max(1e-3), "{a}{b}");
            }
        }
    }

    #[test]
    fn er_transform_round_trip() {
        let g = BandGeometry::new(100, vec![0.3, 0.6], 2, 0.0).unwrap();
        let ev = ConditioningEvent::new(None, vec![0.5, 0.8], vec![1.0, 2.0], g).unwrap();
        let red = reduce_to_sphere(&mix(), &ev).unwrap();
        let t = red.transform;
        assert!((t.prefactor() - (100.0f64 / 98.0).sqrt()).abs() < 1e-15);
        assert_eq!(t.forward(0.8, 1.0).0, 0.0);
        let (e, r) = t.inverse(t.forward(1.3, -0.4).0, t.forward(1.3, -0.4).1);
        assert!((e - 1.3).abs() < 1e-14 && (r + 0.4).abs() < 1e-14);
        let want = mix().xi_q(0.6).scale_arg(0.4);
        assert!((red.reduced.value(0.7) - want.value(0.7)).abs() < 1e-15);
    }

    #[test]
    fn fp_matrix_entries_and_pure_reduction() {
        let m = mix();
        let c = fp_matrix(&m, 0.6);
        assert_eq!(c.nrows(), 4);
        assert!((c[(0, 3)] - 0.4f64.sqrt() * m.d1(0.6)).abs() < 1e-15);
        assert!(c.clone().cholesky().is_some());
        assert_eq!(fp_matrix(&Mixture::pure(3), 0.6).nrows(), 3);
        let v = fp_vector(&Mixture::pure(3), 0.6, 0.0, 0.0);
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn fp_conditioning_matches_schur() {
        for m in [mix(), Mixture::pure(3)] {
            let n = 9;
            let (q1, r, rho) = (0.55, 0.4, 0.3);
            let t = FpTargets { e: 0.9, e1: 0.6, r1: 1.7 };
            let fc = fp_conditioning(&m, q1, r, rho, &t).unwrap();
            let mut fs = fp_constraints(&m, n, q1).unwrap();
            let mut vals = vec![t.e, t.e1];
            if !fc.pure {
                vals.push(t.r1);
            }
            vals.resize(fs.len(), 0.0);
            let k = fs.len();
            let tails = [DVector::from_fn(n - 2, |i, _| (i as f64 + 1.0).sin()), DVector::from_fn(n - 2, |i, _| (2.0 * i as f64).cos())];
            let ps: Vec<DVector<f64>> = tails.iter().map(|tl| fp_probe_point(n, q1, r, rho, tl).unwrap()).collect();
            for (a, p) in ps.iter().enumerate() {
                fs.push(Functional::value(format!("H@p{a}"), p.clone(), 1.0 / n as f64));
            }
            let c = derivative_covariances(&m, &fs).unwrap();
            let cond = schur_condition(&c, &(0..k).collect::<Vec<_>>(), &vals, false).unwrap();
            let fpm = m.fp_mixtures(r, Some((q1, rho))).unwrap().fp.unwrap();
            for a in 0..2 {
                assert!((cond.mean[a] - fc.mean).abs() < 1e-10, "{} {}", cond.mean[a], fc.mean);
                for b in 0..2 {
                    let cosang = tails[a].dot(&tails[b]) / (tails[a].norm() * tails[b].norm());
                    let want = fpm.value(cosang) + fc.xi_tau - fc.v_cinv_v;
                    assert!((cond.cov[(a, b)] * n as f64 - want).abs() < 1e-10, "{a}{b}");
                }
            }
        }
    }

    #[test]
    fn level_probe_has_goe_structure() {
        let m = mix();
        let g = BandGeometry::new(14, vec![0.35, 0.7], 1, 0.0).unwrap();
        let ev = ConditioningEvent::new(None, vec![0.5], vec![1.3], g.clone()).unwrap();
        let (mut fs, vals) = cp_constraints(&m, &ev);
        let k = fs.len();
        let probe = level_probe(&m, &ev, 2, &[(0, 0), (1, 1), (0, 1), (2, 4)]).unwrap();
        fs.extend(probe.functionals.iter().cloned());
        let c = derivative_covariances(&m, &fs).unwrap();
        let cond = schur_condition(&c, &(0..k).collect::<Vec<_>>(), &vals, false).unwrap();
        let hd = hessian_decomposition(&m, &g).unwrap();
        let d = hd.dim as f64;
        let mut want = DMatrix::zeros(8, 8);
        for a in 0..2 {
            for b in 0..2 {
                want[(a, b)] = hd.sigma_u[a][b];
            }
        }
        want[(2, 2)] = hd.grad_var;
        want[(3, 3)] = hd.grad_var;
        want[(4, 4)] = 2.0 / d;
        want[(5, 5)] = 2.0 / d;
        want[(6, 6)] = 1.0 / d;
        want[(7, 7)] = 1.0 / d;
        assert!((&cond.cov - &want).amax() < 1e-10, "{}", cond.cov);
        let shifted = cond.mean[0] + probe.offsets[0];
        assert!(shifted.abs() < 1e-12 && cond.mean.rows(1, 7).amax() < 1e-12);
        assert!(!hd.sigma_singular);
    }
}
