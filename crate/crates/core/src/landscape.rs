//! Annealed complexity of critical points, the ground-state curve
//! `q -> (E*(q), R*(q))` and the identities tying them to the Parisi
//! minimizer along its support.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::mixture::Mixture;
use crate::optim::nelder_mead_max;
use crate::rsb::{cs_minimize, zt_minimize, CsSolution, SolverConfig, ZeroTempOrder, ZtSolution};

/// Logarithmic potential of the semicircle law on [-2, 2]:
/// `int log|t - x| rho(x) dx`.
///
/// Outside [-2, 2] the square-root term carries `|t|/4`; that is the factor
/// for which the derivative equals the Stieltjes transform
/// `(t - sqrt(t^2 - 4))/2`.
pub fn omega(t: f64) -> f64 {
    let base = t * t / 4.0 - 0.5;
    let a = t.abs();
    if a <= 2.0 {
        base
    } else {
        base - (a / 4.0 * (t * t - 4.0).sqrt() - ((t * t / 4.0 - 1.0).sqrt() + a / 2.0).ln())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Branch {
    Inner,
    Outer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ComplexityEval {
    pub e: f64,
    pub r: f64,
    pub theta: f64,
    pub branch: Branch,
}

/// Complexity of critical points at energy `E` and radial derivative `R` for
/// a mixture whose `(H, R)` covariance is nonsingular.
pub fn theta(mix: &Mixture, e: f64, r: f64) -> Result<ComplexityEval> {
    if mix.pure_degree().is_some() {
        return Err(Error::SingularSigma);
    }
    let [[a, b], [_, d]] = mix.sigma_xi();
    let det = a * d - b * b;
    let scale = (a * d).abs().max(1e-300);
    if !(det > 1e-12 * scale) {
        return Err(Error::SingularSigma);
    }
    let (x1, x2) = (mix.d1(1.0), mix.d2(1.0));
    if !(x2 > 0.0) {
        return Err(Error::InvalidInput("xi''(1) must be positive".into()));
    }
    let quad = (d * e * e - 2.0 * b * e * r + a * r * r) / det;
    let t = r / x2.sqrt();
    Ok(ComplexityEval {
        e,
        r,
        theta: 0.5 + 0.5 * (x2 / x1).ln() - 0.5 * quad + omega(t),
        branch: if t.abs() <= 2.0 { Branch::Inner } else { Branch::Outer },
    })
}

/// Pure `p`-spin complexity, where `R = pE` holds identically.
pub fn theta_pure(mix: &Mixture, e: f64) -> Result<ComplexityEval> {
    let p = mix.pure_degree().ok_or_else(|| Error::InvalidInput("mixture is not pure".into()))?;
    if p < 3 {
        return Err(Error::InvalidInput(format!("pure complexity needs p >= 3, got {p}")));
    }
    let (x0, x1, x2) = (mix.value(1.0), mix.d1(1.0), mix.d2(1.0));
    let t = p as f64 * e / x2.sqrt();
    Ok(ComplexityEval {
        e,
        r: p as f64 * e,
        theta: 0.5 + 0.5 * (x2 / x1).ln() - e * e / (2.0 * x0) + omega(t),
        branch: if t.abs() <= 2.0 { Branch::Inner } else { Branch::Outer },
    })
}

/// Complexity that falls back to the pure formula (ignoring `r`) for pure
/// mixtures.
pub fn theta_auto(mix: &Mixture, e: f64, r: f64) -> Result<ComplexityEval> {
    if mix.pure_degree().is_some() {
        theta_pure(mix, e)
    } else {
        theta(mix, e, r)
    }
}

/// `(1/q) d/dq`-type radial quantity at the maximizer: given the zero
/// temperature solution of `xi_hat_q = xi(q .)`, returns `R*(q)`.
pub fn r_star_from(xi_hat: &Mixture, q: f64, zt: &ZeroTempOrder) -> f64 {
    let mut qs = vec![0.0];
    qs.extend_from_slice(&zt.q);
    qs.push(1.0);
    let sx = |s: f64| s * xi_hat.d1(s);
    let mut r = zt.c * (xi_hat.d2(1.0) + xi_hat.d1(1.0));
    for l in 0..zt.a.len() {
        r += zt.a[l] * (sx(qs[l + 1]) - sx(qs[l]));
    }
    r / q
}

#[derive(Debug, Clone, Serialize)]
pub struct GroundStatePoint {
    pub q: f64,
    pub e_star: f64,
    pub r_star: f64,
    pub order: ZeroTempOrder,
    pub certified: bool,
}

pub fn ground_state_point(mix: &Mixture, q: f64, cfg: &SolverConfig) -> Result<GroundStatePoint> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::InvalidInput(format!("q = {q} must lie in (0,1]")));
    }
    let xi_hat = mix.scale_arg(q);
    let sol: ZtSolution = zt_minimize(&xi_hat, cfg)?;
    Ok(GroundStatePoint {
        q,
        e_star: sol.value,
        r_star: r_star_from(&xi_hat, q, &sol.order),
        order: sol.order,
        certified: sol.certificate.passed,
    })
}

/// Points computed before the failure, and the failure itself.
#[derive(Debug)]
pub struct PartialCurve {
    pub points: Vec<GroundStatePoint>,
    pub failed_q: f64,
    pub error: Error,
}

pub fn ground_state_curve(mix: &Mixture, qs: &[f64], cfg: &SolverConfig) -> std::result::Result<Vec<GroundStatePoint>, PartialCurve> {
    let mut points = Vec::with_capacity(qs.len());
    for &q in qs {
        match ground_state_point(mix, q, cfg) {
            Ok(p) => points.push(p),
            Err(error) => return Err(PartialCurve { points, failed_q: q, error }),
        }
    }
    Ok(points)
}

/// `R*(0)`, defined as the small-q limit `2 sqrt(xi''(0))`.
fn r_star_zero(mix: &Mixture) -> Option<f64> {
    let d = mix.d2(0.0);
    (d > 0.0).then(|| 2.0 * d.sqrt())
}

/// Ground-state quantities of `mix` along a ladder `0 = q_0 < q_1 < ... < q_k`.
#[derive(Debug, Clone, Serialize)]
pub struct LadderStars {
    pub qs: Vec<f64>,
    pub e: Vec<f64>,
    /// `None` at q = 0 when `xi''(0) = 0`.
    pub r: Vec<Option<f64>>,
}

pub fn ladder_stars(mix: &Mixture, ladder: &[f64], cfg: &SolverConfig) -> Result<LadderStars> {
    let mut qs = vec![0.0];
    qs.extend_from_slice(ladder);
    let mut e = vec![0.0];
    let mut r = vec![r_star_zero(mix)];
    for &q in &qs[1..] {
        let p = ground_state_point(mix, q, cfg)?;
        e.push(p.e_star);
        r.push(Some(p.r_star));
    }
    Ok(LadderStars { qs, e, r })
}

#[derive(Debug, Clone, Serialize)]
pub struct EsRsRow {
    pub m: usize,
    /// `E*` of the level mixture `xi_(m)` at overlap 1.
    pub e_level: f64,
    /// `E*(q_{m+1}) - E*(q_m)`.
    pub e_increment: f64,
    pub e_dev: f64,
    /// `R*` of the level mixture at overlap 1.
    pub r_level: f64,
    /// `(q_{m+1} - q_m) R*(q_m)`.
    pub r_lower: Option<f64>,
    /// `(q_{m+1} - q_m) R*(q_{m+1})`.
    pub r_upper: f64,
    pub r_dev_lower: Option<f64>,
    pub r_dev_upper: f64,
    /// Complexity of the level mixture at its own `(E*, R*)`.
    pub theta_level: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EsRsReport {
    pub beta: f64,
    pub ladder: Vec<f64>,
    pub rows: Vec<EsRsRow>,
}

/// Checks that the energy and radial derivative increments of the
/// ground-state curve along the Parisi support match those of the level
/// mixtures, for levels `m < k` (both endpoints of a level must lie in the
/// support). Level 0 is included only when `xi''(0) > 0`.
pub fn identity_esrs(mix: &Mixture, beta: f64, cfg: &SolverConfig) -> Result<EsRsReport> {
    let sol = cs_minimize(mix, beta, cfg)?;
    let ladder = sol.order.q.clone();
    let stars = ladder_stars(mix, &ladder, cfg)?;
    let levels = mix.level_mixtures(&ladder)?;
    let mut rows = Vec::new();
    for m in 0..ladder.len() {
        if m == 0 && !(mix.d2(0.0) > 0.0) {
            continue;
        }
        let lvl = &levels.levels[m];
        let zs = zt_minimize(lvl, cfg)?;
        let e_level = zs.value;
        let r_level = r_star_from(lvl, 1.0, &zs.order);
        let dq = stars.qs[m + 1] - stars.qs[m];
        let e_increment = stars.e[m + 1] - stars.e[m];
        let r_lower = stars.r[m].map(|r| dq * r);
        let r_upper = dq * stars.r[m + 1].expect("positive q has R*");
        let theta_level = theta_auto(lvl, e_level, r_level).ok().map(|t| t.theta);
        rows.push(EsRsRow {
            m,
            e_level,
            e_increment,
            e_dev: (e_level - e_increment).abs(),
            r_level,
            r_lower,
            r_upper,
            r_dev_lower: r_lower.map(|r| (r_level - r).abs()),
            r_dev_upper: (r_level - r_upper).abs(),
            theta_level,
        });
    }
    Ok(EsRsReport { beta, ladder, rows })
}

/// Which ground-state radial derivative centres the `R` window of level m.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RCentre {
    /// `R*(q_m)`
    Lower,
    /// `R*(q_{m+1})`
    Upper,
}

#[derive(Debug, Clone, Serialize)]
pub struct LevelSup {
    pub m: usize,
    pub sup: f64,
    pub e: f64,
    pub r: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ChainBound {
    pub total: f64,
    pub levels: Vec<LevelSup>,
}

/// Sum over levels `m < k` of the supremum of the level complexity over
/// `[dE - 2 eps, dE + 2 eps] x dq [R* - eps, R* + eps]`, on a 101 x 101 grid
/// polished by Nelder-Mead.
pub fn chain_bound(mix: &Mixture, sol: &CsSolution, eps: f64, centre: RCentre, cfg: &SolverConfig) -> Result<ChainBound> {
    let ladder = &sol.order.q;
    if ladder.is_empty() {
        return Ok(ChainBound { total: 0.0, levels: vec![] });
    }
    let stars = ladder_stars(mix, ladder, cfg)?;
    let lv = mix.level_mixtures(ladder)?;
    let mut levels = Vec::new();
    for m in 0..ladder.len() {
        let dq = stars.qs[m + 1] - stars.qs[m];
        let de = stars.e[m + 1] - stars.e[m];
        let rc = match centre {
            RCentre::Lower => stars.r[m].ok_or_else(|| Error::InvalidInput("R*(0) undefined when xi''(0) = 0".into()))?,
            RCentre::Upper => stars.r[m + 1].expect("positive q has R*"),
        };
        let (elo, ehi) = (de - 2.0 * eps, de + 2.0 * eps);
        let (rlo, rhi) = (dq * (rc - eps), dq * (rc + eps));
        let mixm = &lv.levels[m];
        let f = |e: f64, r: f64| -> f64 {
            match mixm.pure_degree() {
                // On a pure level only R = pE carries critical points.
                Some(p) => {
                    if (p as f64 * e) < rlo || (p as f64 * e) > rhi {
                        f64::NEG_INFINITY
                    } else {
                        theta_pure(mixm, e).map(|t| t.theta).unwrap_or(f64::NEG_INFINITY)
                    }
                }
                None => theta(mixm, e, r).map(|t| t.theta).unwrap_or(f64::NEG_INFINITY),
            }
        };
        let n = 101;
        let mut best = LevelSup { m, sup: f64::NEG_INFINITY, e: de, r: dq * rc };
        for i in 0..n {
            let e = elo + (ehi - elo) * i as f64 / (n - 1) as f64;
            for j in 0..n {
                let r = rlo + (rhi - rlo) * j as f64 / (n - 1) as f64;
                let v = f(e, r);
                if v > best.sup {
                    best = LevelSup { m, sup: v, e, r };
                }
            }
        }
        if best.sup.is_finite() && mixm.pure_degree().is_none() {
            let (x, v) = nelder_mead_max(|p| f(p[0], p[1]), &[best.e, best.r], &[elo, rlo], &[ehi, rhi], 400);
            if v > best.sup {
                best = LevelSup { m, sup: v, e: x[0], r: x[1] };
            }
        }
        levels.push(best);
    }
    let total = levels.iter().map(|l| l.sup).sum();
    Ok(ChainBound { total, levels })
}

#[derive(Debug, Clone, Serialize)]
pub struct FprimeCheck {
    pub beta: f64,
    /// Central difference of the Parisi minimum in beta.
    pub fprime_fd: f64,
    /// `E*(q_k) + beta xi_bar_(k)(1)`.
    pub fprime_identity: f64,
    pub dev: f64,
}

pub fn fprime_fd(mix: &Mixture, beta: f64, cfg: &SolverConfig) -> Result<f64> {
    let h = 1e-4 * beta.max(1.0);
    let up = cs_minimize(mix, beta + h, cfg)?.value;
    let dn = cs_minimize(mix, beta - h, cfg)?.value;
    Ok((up - dn) / (2.0 * h))
}

pub fn fprime_identity(mix: &Mixture, beta: f64, cfg: &SolverConfig) -> Result<FprimeCheck> {
    let sol = cs_minimize(mix, beta, cfg)?;
    let qk = sol.order.q_hat();
    let e = if qk > 0.0 { ground_state_point(mix, qk, cfg)?.e_star } else { 0.0 };
    let bar = mix.xi_q(qk).scale_arg(1.0 - qk);
    let ident = e + beta * bar.value(1.0);
    let fd = fprime_fd(mix, beta, cfg)?;
    Ok(FprimeCheck { beta, fprime_fd: fd, fprime_identity: ident, dev: (fd - ident).abs() })
}

/// Samples the complexity on a uniform `(E, R)` grid.
pub fn theta_surface(mix: &Mixture, e_range: (f64, f64), r_range: (f64, f64), n: usize) -> Vec<ComplexityEval> {
    let mut out = Vec::with_capacity(n * n);
    let step = |lo: f64, hi: f64, i: usize| if n > 1 { lo + (hi - lo) * i as f64 / (n - 1) as f64 } else { lo };
    for i in 0..n {
        let e = step(e_range.0, e_range.1, i);
        for j in 0..n {
            let r = step(r_range.0, r_range.1, j);
            if let Ok(t) = theta_auto(mix, e, r) {
                out.push(t);
            }
        }
    }
    out
}
