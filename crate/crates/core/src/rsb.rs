//! Parisi variational problems for spherical models: the Crisanti-Sommers
//! functional at inverse temperature beta, its zero-temperature counterpart,
//! optimality certificates, the critical temperature and push-forward checks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::Mixture;
use crate::optim::{barrier_minimize, golden_max, scan_max, LinCon};
use crate::profile::{g_series, Profile};
use crate::rng::stream;

/// Largest overlap the finite temperature solver may place an atom at.
pub const Q_CEILING: f64 = 1.0 - 1e-4;

const ZERO_SNAP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    #[serde(default = "d_kmax")]
    pub k_max: usize,
    #[serde(default = "d_starts")]
    pub starts: usize,
    #[serde(default = "d_atom")]
    pub atom_tol: f64,
    #[serde(default = "d_cert")]
    pub cert_tol: f64,
    #[serde(default = "d_seed")]
    pub seed: u64,
    /// Allow mixtures with a linear (external field) term.
    #[serde(default)]
    pub field_mode: bool,
    #[serde(default = "d_mesh")]
    pub mesh: usize,
}

fn d_kmax() -> usize {
    3
}
fn d_starts() -> usize {
    8
}
fn d_atom() -> f64 {
    1e-7
}
fn d_cert() -> f64 {
    1e-6
}
fn d_seed() -> u64 {
    42
}
fn d_mesh() -> usize {
    2000
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { k_max: 3, starts: 8, atom_tol: 1e-7, cert_tol: 1e-6, seed: 42, field_mode: false, mesh: 2000 }
    }
}

/// Step distribution function of a k-atomic measure on [0, 1): `x = x[l]` on
/// `[q[l], q[l+1])` with `q_0 = 0`, and `x = 1` on `[q[k-1], 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderParameter {
    pub q: Vec<f64>,
    pub x: Vec<f64>,
}

impl OrderParameter {
    pub fn new(q: Vec<f64>, x: Vec<f64>) -> Result<Self> {
        if q.len() != x.len() {
            return Err(Error::InvalidInput("q and x must have equal length".into()));
        }
        crate::mixture::check_ladder(&q)?;
        let mut prev = 0.0;
        for &v in &x {
            if !(v >= prev && v <= 1.0) {
                return Err(Error::InvalidInput(format!("levels {x:?} must be nondecreasing in [0,1]")));
            }
            prev = v;
        }
        Ok(OrderParameter { q, x })
    }

    pub fn replica_symmetric() -> Self {
        OrderParameter { q: vec![], x: vec![] }
    }

    pub fn k(&self) -> usize {
        self.q.len()
    }

    pub fn q_hat(&self) -> f64 {
        self.q.last().copied().unwrap_or(0.0)
    }

    pub fn x_at(&self, t: f64) -> f64 {
        let l = self.q.partition_point(|&b| b <= t);
        if l == self.q.len() {
            1.0
        } else {
            self.x[l]
        }
    }

    /// `(location, mass)` pairs; the first entry sits at 0.
    pub fn atoms(&self) -> Vec<(f64, f64)> {
        if self.q.is_empty() {
            return vec![(0.0, 1.0)];
        }
        let mut out = vec![(0.0, self.x[0])];
        for i in 0..self.q.len() {
            let next = self.x.get(i + 1).copied().unwrap_or(1.0);
            out.push((self.q[i], next - self.x[i]));
        }
        out
    }

    fn from_atoms(atoms: &[(f64, f64)]) -> Self {
        let mut q = Vec::new();
        let mut x = Vec::new();
        let mut cum: f64 = 0.0;
        for &(loc, m) in atoms {
            if loc > 0.0 {
                x.push(cum.min(1.0));
                q.push(loc);
            }
            cum += m;
        }
        OrderParameter { q, x }
    }

    /// Atoms in the support: mass above `tol`.
    pub fn support(&self, tol: f64) -> Vec<f64> {
        self.atoms().into_iter().filter(|a| a.1 > tol).map(|a| a.0).collect()
    }

    /// Merges atoms closer than `tol` and hands masses below `tol` to the
    /// neighbouring atom.
    pub fn compact(&self, tol: f64) -> Self {
        let mut atoms: Vec<(f64, f64)> = Vec::new();
        for (loc, m) in self.atoms() {
            // Atoms this close to 0 come from the barrier's slow approach to
            // the boundary, where phi is flat to second order.
            let loc = if loc <= ZERO_SNAP { 0.0 } else { loc };
            match atoms.last_mut() {
                Some(last) if loc - last.0 <= tol => {
                    if m > last.1 && last.0 > 0.0 {
                        last.0 = loc;
                    }
                    last.1 += m;
                }
                _ => atoms.push((loc, m)),
            }
        }
        loop {
            let Some(i) = atoms.iter().position(|a| a.1 <= tol) else { break };
            if atoms.len() == 1 {
                break;
            }
            let m = atoms[i].1;
            atoms.remove(i);
            let j = if i < atoms.len() { i } else { i - 1 };
            atoms[j].1 += m;
        }
        if atoms[0].0 > 0.0 {
            atoms.insert(0, (0.0, 0.0));
        }
        Self::from_atoms(&atoms)
    }

    fn profile(&self) -> Profile {
        let mut breaks = vec![0.0];
        breaks.extend_from_slice(&self.q);
        breaks.push(1.0);
        let mut levels = self.x.clone();
        levels.push(1.0);
        Profile::new(breaks, levels, 0.0)
    }

    #[cfg(test)]
    fn params(&self) -> Vec<f64> {
        self.q.iter().chain(&self.x).copied().collect()
    }

    fn from_params(k: usize, p: &[f64]) -> Self {
        OrderParameter { q: p[..k].to_vec(), x: p[k..].to_vec() }
    }
}

/// Zero temperature order parameter: `alpha = a[l]` on `[q[l], q[l+1])`
/// with `q_0 = 0`, `q_L = 1`, and the scalar `c > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroTempOrder {
    pub q: Vec<f64>,
    pub a: Vec<f64>,
    pub c: f64,
}

impl ZeroTempOrder {
    pub fn new(q: Vec<f64>, a: Vec<f64>, c: f64) -> Result<Self> {
        if a.len() != q.len() + 1 {
            return Err(Error::InvalidInput("need one more level than breakpoints".into()));
        }
        crate::mixture::check_ladder(&q)?;
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::InvalidInput(format!("c = {c} must be positive")));
        }
        let mut prev = 0.0;
        for &v in &a {
            if !(v >= prev && v.is_finite()) {
                return Err(Error::InvalidInput(format!("levels {a:?} must be nondecreasing and >= 0")));
            }
            prev = v;
        }
        Ok(ZeroTempOrder { q, a, c })
    }

    pub fn alpha_at(&self, t: f64) -> f64 {
        self.a[self.q.partition_point(|&b| b <= t)]
    }

    fn profile(&self) -> Profile {
        let mut breaks = vec![0.0];
        breaks.extend_from_slice(&self.q);
        breaks.push(1.0);
        Profile::new(breaks, self.a.clone(), self.c)
    }

    #[cfg(test)]
    fn params(&self) -> Vec<f64> {
        std::iter::once(self.c).chain(self.q.iter().copied()).chain(self.a.iter().copied()).collect()
    }

    fn from_params(steps: usize, p: &[f64]) -> Self {
        ZeroTempOrder { c: p[0], q: p[1..steps].to_vec(), a: p[steps..].to_vec() }
    }

    /// Support points of the measure with distribution function alpha.
    pub fn support(&self, tol: f64) -> Vec<f64> {
        let mut s = Vec::new();
        if self.a[0] > tol {
            s.push(0.0);
        }
        for i in 0..self.q.len() {
            if self.a[i + 1] - self.a[i] > tol {
                s.push(self.q[i]);
            }
        }
        s
    }

    /// Drops jumps below `tol` and merges breakpoints closer than `tol`.
    pub fn compact(&self, tol: f64) -> Self {
        let mut q = Vec::new();
        let mut a = vec![self.a[0]];
        for i in 0..self.q.len() {
            let jump = self.a[i + 1] - *a.last().unwrap();
            let close = q.last().is_some_and(|&p: &f64| self.q[i] - p <= tol);
            if jump <= tol {
                continue;
            }
            if close {
                *a.last_mut().unwrap() = self.a[i + 1];
            } else {
                q.push(self.q[i]);
                a.push(self.a[i + 1]);
            }
        }
        ZeroTempOrder { q, a, c: self.c }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub passed: bool,
    /// Finite temperature: `max phi - min_{support} phi`. Zero temperature:
    /// the largest of `|Psi(1)|`, `-min psi` and `max_{support} |psi|`.
    pub gap: f64,
    pub sup: f64,
    pub argmax: f64,
    pub support: Vec<f64>,
    pub support_values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CsSolution {
    pub order: OrderParameter,
    pub value: f64,
    pub certificate: Certificate,
    pub k: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ZtSolution {
    pub order: ZeroTempOrder,
    pub value: f64,
    pub certificate: Certificate,
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidInput(format!("beta = {beta} must be positive and finite")));
    }
    Ok(())
}

fn check_field(mix: &Mixture, cfg: &SolverConfig) -> Result<()> {
    if mix.has_field() && !cfg.field_mode {
        return Err(Error::InvalidInput("mixture has a linear term; enable field mode".into()));
    }
    Ok(())
}

/// Crisanti-Sommers functional.
pub fn cs_value(mix: &Mixture, beta: f64, op: &OrderParameter) -> f64 {
    cs_eval(mix, beta, op, false).0
}

/// Crisanti-Sommers functional with its gradient in `(q_1..q_k, x_0..x_{k-1})`.
pub fn cs_value_grad(mix: &Mixture, beta: f64, op: &OrderParameter) -> (f64, Vec<f64>) {
    cs_eval(mix, beta, op, true)
}

fn cs_eval(mix: &Mixture, beta: f64, op: &OrderParameter, grad: bool) -> (f64, Vec<f64>) {
    let k = op.k();
    let qh = op.q_hat();
    if qh >= 1.0 {
        return (f64::INFINITY, vec![]);
    }
    let b2 = beta * beta;
    let mut qs = vec![0.0];
    qs.extend_from_slice(&op.q);
    let mut energy = mix.value(1.0) - mix.value(qh);
    for l in 0..k {
        energy += op.x[l] * (mix.value(qs[l + 1]) - mix.value(qs[l]));
    }
    let prof = op.profile();
    let value = 0.5 * (b2 * energy + prof.i_at(qh) + (-qh).ln_1p());
    if !grad {
        return (value, vec![]);
    }
    let big_phi = |t: f64| b2 * mix.d1(t) - prof.k_at(t);
    let phi = |t: f64| b2 * (mix.value(t) - mix.value(0.0)) - prof.j_at(t);
    let mut g = vec![0.0; 2 * k];
    // x[i] is the level just below q[i]; above the last atom the level is 1.
    for i in 0..k {
        let next = op.x.get(i + 1).copied().unwrap_or(1.0);
        g[i] = 0.5 * (op.x[i] - next) * big_phi(op.q[i]);
    }
    let phis: Vec<f64> = qs.iter().map(|&t| phi(t)).collect();
    for l in 0..k {
        g[k + l] = 0.5 * (phis[l + 1] - phis[l]);
    }
    (value, g)
}

/// `phi(s) = beta^2 (xi(s) - xi(0)) - int_0^s int_0^t dr / D(r)^2 dt`.
pub fn cs_phi<'a>(mix: &'a Mixture, beta: f64, op: &OrderParameter) -> impl Fn(f64) -> f64 + 'a {
    let prof = op.profile();
    let b2 = beta * beta;
    move |t| b2 * (mix.value(t) - mix.value(0.0)) - prof.j_at(t)
}

fn mesh_sup<F: Fn(f64) -> f64>(f: &F, mut pts: Vec<f64>) -> (f64, f64) {
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    let vals: Vec<f64> = pts.iter().map(|&t| f(t)).collect();
    let mut best = (pts[0], vals[0]);
    for i in 0..pts.len() {
        if vals[i] > best.1 {
            best = (pts[i], vals[i]);
        }
        let left = i == 0 || vals[i] >= vals[i - 1];
        let right = i + 1 == pts.len() || vals[i] >= vals[i + 1];
        if left && right && i > 0 && i + 1 < pts.len() {
            let (t, v) = golden_max(f, pts[i - 1], pts[i + 1], 1e-13);
            if v > best.1 {
                best = (t, v);
            }
        }
    }
    best
}

/// Talagrand-type optimality check on a uniform mesh plus atoms, refined
/// around each mesh local maximum.
pub fn talagrand_certificate(mix: &Mixture, beta: f64, op: &OrderParameter, cfg: &SolverConfig) -> Certificate {
    let phi = cs_phi(mix, beta, op);
    let mut pts: Vec<f64> = (0..cfg.mesh).map(|i| i as f64 / cfg.mesh as f64).collect();
    pts.extend_from_slice(&op.q);
    let (argmax, sup) = mesh_sup(&phi, pts);
    let support = op.support(cfg.atom_tol);
    let support_values: Vec<f64> = support.iter().map(|&s| phi(s)).collect();
    let low = support_values.iter().copied().fold(f64::INFINITY, f64::min);
    let gap = sup.max(low) - low;
    Certificate { passed: gap <= cfg.cert_tol, gap, sup, argmax, support, support_values }
}

fn cs_constraints(k: usize) -> Vec<LinCon> {
    let mut c = Vec::new();
    if k == 0 {
        return c;
    }
    c.push(LinCon::lower(0, 0.0));
    for i in 0..k - 1 {
        c.push(LinCon::ordered(i, i + 1));
    }
    c.push(LinCon::upper(k - 1, Q_CEILING));
    c.push(LinCon::lower(k, 0.0));
    for i in 0..k - 1 {
        c.push(LinCon::ordered(k + i, k + i + 1));
    }
    c.push(LinCon::upper(2 * k - 1, 1.0));
    c
}

/// Pushes a point strictly inside the ordered box `lo < v_0 < ... < v_{n-1} < hi`.
fn interiorize(v: &mut [f64], lo: f64, hi: f64) {
    let n = v.len();
    let gap = (hi - lo) * 1e-3;
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for i in 0..n {
        let min = if i == 0 { lo + gap } else { v[i - 1] + gap };
        let max = hi - gap * (n - i) as f64;
        v[i] = v[i].max(min).min(max);
    }
}

fn better(a: &(f64, Vec<f64>), b: &(f64, Vec<f64>)) -> bool {
    if a.0 != b.0 {
        return a.0 < b.0;
    }
    a.1.partial_cmp(&b.1) == Some(std::cmp::Ordering::Less)
}

fn widest_gap(pts: &[f64]) -> usize {
    let mut gi = 0;
    for i in 1..pts.len() - 1 {
        if pts[i + 1] - pts[i] > pts[gi + 1] - pts[gi] {
            gi = i;
        }
    }
    gi
}

/// Warm start with `k` atoms: the previous solution plus an atom where the
/// certificate was violated, then widest-gap splits until `k` is reached.
fn grow_cs(prev: &OrderParameter, hint: f64, k: usize) -> Vec<f64> {
    let mut q = prev.q.clone();
    let mut x = prev.x.clone();
    let insert = |q: &mut Vec<f64>, x: &mut Vec<f64>, t: f64| {
        let i = q.partition_point(|&b| b < t);
        if i < q.len() {
            let next = x.get(i + 1).copied().unwrap_or(1.0);
            let mid = 0.5 * (x[i] + next);
            q.insert(i, t);
            x.insert(i + 1, mid);
        } else {
            let low = x.last().copied().unwrap_or(0.0);
            q.push(t);
            x.push(0.5 * (low + 1.0));
        }
    };
    if q.len() < k && hint > 1e-3 && q.iter().all(|&b| (b - hint).abs() > 1e-3) {
        insert(&mut q, &mut x, hint.min(Q_CEILING));
    }
    while q.len() < k {
        let mut pts = vec![0.0];
        pts.extend_from_slice(&q);
        pts.push(Q_CEILING);
        let gi = widest_gap(&pts);
        insert(&mut q, &mut x, 0.5 * (pts[gi] + pts[gi + 1]));
    }
    interiorize(&mut q, 0.0, Q_CEILING);
    interiorize(&mut x, 0.0, 1.0);
    q.into_iter().chain(x).collect()
}

fn solve_cs_k(mix: &Mixture, beta: f64, k: usize, cfg: &SolverConfig, warm: Option<(&OrderParameter, f64)>) -> OrderParameter {
    if k == 0 {
        return OrderParameter::replica_symmetric();
    }
    let cons = cs_constraints(k);
    let f = |p: &[f64]| {
        let (v, g) = cs_value_grad(mix, beta, &OrderParameter::from_params(k, p));
        if g.is_empty() {
            (v, vec![0.0; p.len()])
        } else {
            (v, g)
        }
    };
    let mut inits: Vec<Vec<f64>> = Vec::new();
    if let Some((w, hint)) = warm {
        inits.push(grow_cs(w, hint, k));
    }
    for s in 0..cfg.starts {
        let mut rng = stream(cfg.seed, 1000 + k as u64, s as u64);
        let mut q: Vec<f64> = (0..k).map(|_| rng.random_range(0.02..0.97)).collect();
        let mut x: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..0.95)).collect();
        interiorize(&mut q, 0.0, Q_CEILING);
        interiorize(&mut x, 0.0, 1.0);
        inits.push(q.into_iter().chain(x).collect());
    }
    let mut best: Option<(f64, Vec<f64>)> = None;
    for init in inits {
        let r = barrier_minimize(&f, &cons, init);
        let cand = (r.value, r.x);
        if !cand.0.is_finite() {
            continue;
        }
        if best.as_ref().is_none_or(|b| better(&cand, b)) {
            best = Some(cand);
        }
    }
    let best = best.expect("at least one start");
    OrderParameter::from_params(k, &best.1)
}

fn cs_solve(mix: &Mixture, beta: f64, cfg: &SolverConfig) -> Result<(CsSolution, bool)> {
    check_beta(beta)?;
    check_field(mix, cfg)?;
    let mut warm: Option<(OrderParameter, f64)> = None;
    let mut best: Option<CsSolution> = None;
    for k in 0..=cfg.k_max {
        let raw = solve_cs_k(mix, beta, k, cfg, warm.as_ref().map(|w| (&w.0, w.1)));
        let order = raw.compact(cfg.atom_tol);
        let value = cs_value(mix, beta, &order);
        let certificate = talagrand_certificate(mix, beta, &order, cfg);
        warm = Some((order.clone(), certificate.argmax));
        let sol = CsSolution { k: order.k(), order, value, certificate };
        let passed = sol.certificate.passed;
        if passed {
            return Ok((sol, true));
        }
        if best.as_ref().is_none_or(|b| sol.value < b.value) {
            best = Some(sol);
        }
    }
    Ok((best.expect("k loop ran"), false))
}

/// Minimizes the Crisanti-Sommers functional over order parameters with at
/// most `k_max` atoms away from zero, returning the first certified one.
pub fn cs_minimize(mix: &Mixture, beta: f64, cfg: &SolverConfig) -> Result<CsSolution> {
    let (sol, ok) = cs_solve(mix, beta, cfg)?;
    if !ok {
        return Err(Error::SolverFailed(format!(
            "no certified minimizer with k <= {} (best gap {:.3e})",
            cfg.k_max, sol.certificate.gap
        )));
    }
    Ok(sol)
}

/// Like [`cs_minimize`] but returns the lowest value found even when no
/// candidate passes the certificate; check `certificate.passed`.
pub fn cs_minimize_relaxed(mix: &Mixture, beta: f64, cfg: &SolverConfig) -> Result<CsSolution> {
    Ok(cs_solve(mix, beta, cfg)?.0)
}

/// Zero temperature functional.
pub fn zt_value(mix: &Mixture, op: &ZeroTempOrder) -> f64 {
    zt_eval(mix, op, false).0
}

/// Zero temperature functional with its gradient in `(c, q.., a..)`.
pub fn zt_value_grad(mix: &Mixture, op: &ZeroTempOrder) -> (f64, Vec<f64>) {
    zt_eval(mix, op, true)
}

fn zt_eval(mix: &Mixture, op: &ZeroTempOrder, grad: bool) -> (f64, Vec<f64>) {
    if !(op.c > 0.0) {
        return (f64::INFINITY, vec![]);
    }
    let steps = op.a.len();
    let mut qs = vec![0.0];
    qs.extend_from_slice(&op.q);
    qs.push(1.0);
    let prof = op.profile();
    let mut v = mix.d1(1.0) * op.c + prof.i_at(1.0);
    for l in 0..steps {
        v += op.a[l] * (mix.value(qs[l + 1]) - mix.value(qs[l]));
    }
    let value = 0.5 * v;
    if !grad {
        return (value, vec![]);
    }
    let big_psi = |t: f64| mix.d1(t) - prof.k_at(t);
    let j1 = prof.j_at(1.0);
    let psi = |s: f64| (mix.value(1.0) - mix.value(s)) - (j1 - prof.j_at(s));
    let mut g = vec![0.0; 2 * steps];
    g[0] = 0.5 * big_psi(1.0);
    for i in 1..steps {
        g[i] = 0.5 * (op.a[i - 1] - op.a[i]) * big_psi(qs[i]);
    }
    let psis: Vec<f64> = qs.iter().map(|&t| psi(t)).collect();
    for l in 0..steps {
        g[steps + l] = 0.5 * (psis[l] - psis[l + 1]);
    }
    (value, g)
}

/// `psi(s) = int_s^1 (xi'(t) - int_0^t dr / (B(r) + c)^2) dt`.
pub fn zt_psi<'a>(mix: &'a Mixture, op: &ZeroTempOrder) -> impl Fn(f64) -> f64 + 'a {
    let prof = op.profile();
    let j1 = prof.j_at(1.0);
    move |s| (mix.value(1.0) - mix.value(s)) - (j1 - prof.j_at(s))
}

pub fn zt_certificate(mix: &Mixture, op: &ZeroTempOrder, cfg: &SolverConfig) -> Certificate {
    let psi = zt_psi(mix, op);
    let prof = op.profile();
    let stationarity = (mix.d1(1.0) - prof.k_at(1.0)).abs();
    let mut pts: Vec<f64> = (0..=cfg.mesh).map(|i| i as f64 / cfg.mesh as f64).collect();
    pts.extend_from_slice(&op.q);
    let neg = |t: f64| -psi(t);
    let (argmax, negmin) = mesh_sup(&neg, pts);
    let support = op.support(cfg.atom_tol);
    let support_values: Vec<f64> = support.iter().map(|&s| psi(s)).collect();
    let sres = support_values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let gap = stationarity.max(negmin.max(0.0)).max(sres);
    Certificate { passed: gap <= cfg.cert_tol, gap, sup: -negmin, argmax, support, support_values }
}

fn zt_constraints(steps: usize) -> Vec<LinCon> {
    let mut c = vec![LinCon::lower(0, 0.0)];
    if steps > 1 {
        c.push(LinCon::lower(1, 0.0));
        for i in 1..steps - 1 {
            c.push(LinCon::ordered(i, i + 1));
        }
        c.push(LinCon::upper(steps - 1, 1.0));
    }
    c.push(LinCon::lower(steps, 0.0));
    for l in 0..steps - 1 {
        c.push(LinCon::ordered(steps + l, steps + l + 1));
    }
    c
}

fn grow_zt(prev: &ZeroTempOrder, hint: f64, steps: usize, scale: f64) -> Vec<f64> {
    let mut q = prev.q.clone();
    let mut a = prev.a.clone();
    let insert = |q: &mut Vec<f64>, a: &mut Vec<f64>, t: f64| {
        let i = q.partition_point(|&b| b < t);
        let next = a.get(i + 1).copied().unwrap_or(1.5 * a[i] + scale);
        let mid = 0.5 * (a[i] + next);
        q.insert(i, t);
        a.insert(i + 1, mid);
    };
    if q.len() + 1 < steps && hint > 1e-3 && hint < 1.0 - 1e-3 && q.iter().all(|&b| (b - hint).abs() > 1e-3) {
        insert(&mut q, &mut a, hint);
    }
    while q.len() + 1 < steps {
        let mut pts = vec![0.0];
        pts.extend_from_slice(&q);
        pts.push(1.0);
        let gi = widest_gap(&pts);
        insert(&mut q, &mut a, 0.5 * (pts[gi] + pts[gi + 1]));
    }
    interiorize(&mut q, 0.0, 1.0);
    let top = a.last().copied().unwrap_or(0.0) * 1.5 + scale;
    interiorize(&mut a, 0.0, top);
    std::iter::once(prev.c).chain(q).chain(a).collect()
}

fn solve_zt_steps(mix: &Mixture, steps: usize, cfg: &SolverConfig, warm: Option<(&ZeroTempOrder, f64)>) -> ZeroTempOrder {
    let cons = zt_constraints(steps);
    let f = |p: &[f64]| {
        let (v, g) = zt_value_grad(mix, &ZeroTempOrder::from_params(steps, p));
        if g.is_empty() {
            (v, vec![0.0; p.len()])
        } else {
            (v, g)
        }
    };
    let scale = 1.0 / mix.d1(1.0).sqrt();
    let mut inits: Vec<Vec<f64>> = Vec::new();
    if let Some((w, hint)) = warm {
        inits.push(grow_zt(w, hint, steps, scale));
    }
    for s in 0..cfg.starts {
        let mut rng = stream(cfg.seed, 2000 + steps as u64, s as u64);
        let c = scale * rng.random_range(0.3..1.5);
        let mut q: Vec<f64> = (0..steps - 1).map(|_| rng.random_range(0.05..0.95)).collect();
        let mut a: Vec<f64> = (0..steps).map(|_| scale * rng.random_range(0.02..3.0)).collect();
        interiorize(&mut q, 0.0, 1.0);
        interiorize(&mut a, 0.0, 3.5 * scale);
        inits.push(std::iter::once(c).chain(q).chain(a).collect());
    }
    let mut best: Option<(f64, Vec<f64>)> = None;
    for init in inits {
        let r = barrier_minimize(&f, &cons, init);
        let cand = (r.value, r.x);
        if !cand.0.is_finite() {
            continue;
        }
        if best.as_ref().is_none_or(|b| better(&cand, b)) {
            best = Some(cand);
        }
    }
    ZeroTempOrder::from_params(steps, &best.expect("at least one start").1)
}

fn zt_solve(mix: &Mixture, cfg: &SolverConfig) -> Result<(ZtSolution, bool)> {
    check_field(mix, cfg)?;
    if !(mix.d1(1.0) > 0.0) {
        return Err(Error::InvalidInput("xi'(1) must be positive".into()));
    }
    let mut warm: Option<(ZeroTempOrder, f64)> = None;
    let mut best: Option<ZtSolution> = None;
    for steps in 1..=cfg.k_max.max(1) {
        let raw = solve_zt_steps(mix, steps, cfg, warm.as_ref().map(|w| (&w.0, w.1)));
        let order = raw.compact(cfg.atom_tol);
        let value = zt_value(mix, &order);
        let certificate = zt_certificate(mix, &order, cfg);
        warm = Some((order.clone(), certificate.argmax));
        let sol = ZtSolution { order, value, certificate };
        if sol.certificate.passed {
            return Ok((sol, true));
        }
        if best.as_ref().is_none_or(|b| sol.value < b.value) {
            best = Some(sol);
        }
    }
    Ok((best.expect("step loop ran"), false))
}

/// Minimizes the zero temperature functional; its minimum is the ground
/// state energy `lim max H / N`.
pub fn zt_minimize(mix: &Mixture, cfg: &SolverConfig) -> Result<ZtSolution> {
    let (sol, ok) = zt_solve(mix, cfg)?;
    if !ok {
        return Err(Error::SolverFailed(format!(
            "no certified zero temperature minimizer with {} steps (best gap {:.3e})",
            cfg.k_max.max(1),
            sol.certificate.gap
        )));
    }
    Ok(sol)
}

pub fn zt_minimize_relaxed(mix: &Mixture, cfg: &SolverConfig) -> Result<ZtSolution> {
    Ok(zt_solve(mix, cfg)?.0)
}

/// `min_s (-(s + ln(1-s)) / xi(s))`, whose square root is the critical
/// inverse temperature. Evaluated through a series so that s = 0 is allowed.
fn rs_ratio(mix: &Mixture, s: f64) -> f64 {
    let tail: f64 = mix.coeffs().iter().enumerate().skip(2).map(|(p, c)| c * s.powi(p as i32 - 2)).sum();
    g_series(s) / tail
}

/// Critical inverse temperature of a mixture without a linear term: the
/// largest beta at which `beta^2 xi(s) + s + ln(1-s) <= 0` on `[0,1)`.
pub fn beta_c(mix: &Mixture) -> Result<f64> {
    if mix.has_field() {
        return Err(Error::InvalidInput("critical temperature undefined with an external field".into()));
    }
    let (_, neg) = scan_max(|s| -rs_ratio(mix, s), 0.0, 1.0 - 1e-9, 4001, 1e-15);
    Ok((-neg).sqrt())
}

/// Same threshold located by bisection on the replica symmetric optimality
/// test; used as an independent check of [`beta_c`].
pub fn beta_c_bisection(mix: &Mixture, mesh: usize) -> Result<f64> {
    if mix.has_field() {
        return Err(Error::InvalidInput("critical temperature undefined with an external field".into()));
    }
    let rs_ok = |beta: f64| {
        let b2 = beta * beta;
        let f = |s: f64| b2 * (mix.value(s) - mix.value(0.0)) + s + (-s).ln_1p();
        // Divide by s^2 so the tangency at s = 0 is resolved too.
        let pts: Vec<f64> = (1..mesh).map(|i| i as f64 / mesh as f64).collect();
        let scaled = |s: f64| if s < 1e-6 { b2 * mix.coeff(2) - 0.5 } else { f(s) / (s * s) };
        mesh_sup(&scaled, std::iter::once(0.0).chain(pts).collect()).1 <= 0.0
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    while rs_ok(hi) {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if rs_ok(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// L1 distance between two right-continuous step functions on [0, 1]
/// described by interior breakpoints and levels.
fn step_l1(f: &dyn Fn(f64) -> f64, g: &dyn Fn(f64) -> f64, mut breaks: Vec<f64>) -> f64 {
    breaks.push(0.0);
    breaks.push(1.0);
    breaks.retain(|b| (0.0..=1.0).contains(b));
    breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    breaks.dedup();
    breaks.windows(2).map(|w| (w[1] - w[0]) * (f(0.5 * (w[0] + w[1])) - g(0.5 * (w[0] + w[1]))).abs()).sum()
}

#[derive(Debug, Clone, Serialize)]
pub struct PushforwardReport {
    pub q: f64,
    /// L1 distance between the pushed-forward and the independently solved
    /// finite temperature order parameters of `xi_bar_q`.
    pub finite_dev: f64,
    /// `max(L1(alpha), |c|)` deviation for `xi_hat_q` at zero temperature.
    pub zero_temp_dev: f64,
    pub pushed_alpha: ZeroTempOrder,
    pub solved_alpha: ZeroTempOrder,
}

/// Zero temperature order parameter of `xi_hat_q` predicted by a finite
/// temperature minimizer: `alpha(t) = beta x(q t)`, `c = beta/q int_q^1 x`.
pub fn pushed_zero_temp(beta: f64, op: &OrderParameter, q: f64) -> ZeroTempOrder {
    let mut qs = Vec::new();
    let mut a = vec![beta * op.x_at(0.0)];
    for (i, &b) in op.q.iter().enumerate() {
        if b < q {
            qs.push(b / q);
            a.push(beta * op.x.get(i + 1).copied().unwrap_or(1.0));
        }
    }
    // int_q^1 x
    let mut integral = 0.0;
    let mut pts = vec![q];
    pts.extend(op.q.iter().copied().filter(|&b| b > q));
    pts.push(1.0);
    for w in pts.windows(2) {
        integral += (w[1] - w[0]) * op.x_at(0.5 * (w[0] + w[1]));
    }
    ZeroTempOrder { q: qs, a, c: beta / q * integral }
}

/// Finite temperature order parameter of `xi_bar_q` predicted by push-forward.
pub fn pushed_finite(op: &OrderParameter, q: f64) -> OrderParameter {
    let mut atoms = vec![(0.0, op.x_at(q))];
    for (loc, m) in op.atoms() {
        if loc > q {
            atoms.push(((loc - q) / (1.0 - q), m));
        }
    }
    OrderParameter::from_atoms(&atoms)
}

pub fn pushforward_check(mix: &Mixture, beta: f64, sol: &CsSolution, q: f64, cfg: &SolverConfig) -> Result<PushforwardReport> {
    if !(q > 0.0 && q <= sol.order.q_hat() + 1e-12) {
        return Err(Error::InvalidInput(format!("q = {q} must lie in (0, q_hat]")));
    }
    let r = mix.shift_restrict(q)?;
    let pf = pushed_finite(&sol.order, q);
    let solved = cs_minimize(&r.xi_bar, beta, cfg)?;
    let mut br = pf.q.clone();
    br.extend_from_slice(&solved.order.q);
    let finite_dev = step_l1(&|t| pf.x_at(t), &|t| solved.order.x_at(t), br);

    let pz = pushed_zero_temp(beta, &sol.order, q);
    let zs = zt_minimize(&r.xi_hat, cfg)?;
    let mut br = pz.q.clone();
    br.extend_from_slice(&zs.order.q);
    let l1 = step_l1(&|t| pz.alpha_at(t), &|t| zs.order.alpha_at(t), br);
    let zero_temp_dev = l1.max((pz.c - zs.order.c).abs());
    Ok(PushforwardReport { q, finite_dev, zero_temp_dev, pushed_alpha: pz, solved_alpha: zs.order })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_grad<F: Fn(&[f64]) -> f64>(f: F, p: &[f64]) -> Vec<f64> {
        (0..p.len())
            .map(|i| {
                let h = 1e-6;
                let mut a = p.to_vec();
                a[i] += h;
                let mut b = p.to_vec();
                b[i] -= h;
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn cs_gradient_matches_finite_differences() {
        let m = Mixture::new(&[(2, 0.5), (3, 0.3), (6, 0.2)]).unwrap();
        let op = OrderParameter::new(vec![0.2, 0.5, 0.8], vec![0.1, 0.3, 0.7]).unwrap();
        let (_, g) = cs_value_grad(&m, 1.7, &op);
        let fd = fd_grad(|p| cs_value(&m, 1.7, &OrderParameter::from_params(3, p)), &op.params());
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-7, "{g:?} vs {fd:?}");
        }
    }

    #[test]
    fn zt_gradient_matches_finite_differences() {
        let m = Mixture::new(&[(2, 0.5), (4, 0.5)]).unwrap();
        let op = ZeroTempOrder::new(vec![0.3, 0.7], vec![0.2, 0.9, 1.4], 0.6).unwrap();
        let (_, g) = zt_value_grad(&m, &op);
        let fd = fd_grad(|p| zt_value(&m, &ZeroTempOrder::from_params(3, p)), &op.params());
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-7, "{g:?} vs {fd:?}");
        }
    }

    #[test]
    fn rs_value_is_closed_form() {
        let m = Mixture::new(&[(2, 0.7), (3, 0.3)]).unwrap();
        let v = cs_value(&m, 0.9, &OrderParameter::replica_symmetric());
        assert!((v - 0.5 * 0.81).abs() < 1e-15);
    }

    #[test]
    fn two_spin_critical_temperature() {
        let m = Mixture::pure(2);
        assert!((beta_c(&m).unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
        assert!((beta_c_bisection(&m, 2000).unwrap() - 0.5f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn two_spin_ground_state() {
        // alpha = 0, c = 1/sqrt(xi'(1)) gives sqrt(xi'(1)) = sqrt 2.
        let m = Mixture::pure(2);
        let s = zt_minimize(&m, &SolverConfig::default()).unwrap();
        assert!((s.value - 2f64.sqrt()).abs() < 1e-9, "{s:?}");
        assert!(s.order.a.iter().all(|&a| a < 1e-6));
    }

    #[test]
    fn two_spin_low_temperature() {
        // Known solution: nu = delta_q with q = 1 - 1/(beta sqrt 2).
        let m = Mixture::pure(2);
        let beta = 2.0;
        let s = cs_minimize(&m, beta, &SolverConfig::default()).unwrap();
        assert_eq!(s.k, 1);
        assert!(s.order.x[0] < 1e-6);
        assert!((s.order.q[0] - (1.0 - 1.0 / (beta * 2f64.sqrt()))).abs() < 1e-6, "{s:?}");
    }

    #[test]
    fn compact_merges_and_drops() {
        let op = OrderParameter { q: vec![0.3, 0.3 + 1e-9, 0.8], x: vec![1e-10, 0.4, 0.6] };
        let c = op.compact(1e-7);
        assert_eq!(c.q.len(), 2);
        assert!(c.x[0] == 0.0);
        let op = OrderParameter { q: vec![0.3, 0.8], x: vec![0.2, 1.0 - 1e-9] };
        let c = op.compact(1e-7);
        assert_eq!(c.q, vec![0.3]);
        assert_eq!(c.x, vec![0.2]);
    }
}
