//! Franz-Parisi potential: free energy of a second replica constrained to
//! overlap r with a sample from the Gibbs measure.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditioning::{fp_conditioning, FpTargets};
use crate::error::{Error, Result};
use crate::landscape::{fprime_fd, ground_state_point};
use crate::mixture::Mixture;
use crate::optim::golden_max;
use crate::rsb::{beta_c, cs_minimize, cs_minimize_relaxed, SolverConfig};

/// Overlap of the centre of the second replica's band with itself:
/// `rho^2/q1 + (r - rho)^2 / (1 - q1)`.
pub fn tau(q1: f64, r: f64, rho: f64) -> Result<f64> {
    if !(q1 > 0.0 && q1 < 1.0) {
        return Err(Error::InvalidInput(format!("q1 = {q1} must lie in (0,1)")));
    }
    Ok(rho * rho / q1 + (r - rho).powi(2) / (1.0 - q1))
}

/// Admissible interval for rho: `r q1 -+ sqrt(q1 - q1^2) sqrt(1 - r^2)`.
pub fn j_interval(q1: f64, r: f64) -> Result<(f64, f64)> {
    if !(q1 > 0.0 && q1 < 1.0) {
        return Err(Error::InvalidInput(format!("q1 = {q1} must lie in (0,1)")));
    }
    if !(-1.0..=1.0).contains(&r) {
        return Err(Error::InvalidInput(format!("r = {r} must lie in [-1,1]")));
    }
    let h = (q1 - q1 * q1).sqrt() * (1.0 - r * r).max(0.0).sqrt();
    Ok((r * q1 - h, r * q1 + h))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    High,
    Low,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FpQuery {
    pub beta: f64,
    pub beta_prime: f64,
    pub r: f64,
    /// Detected from the critical temperature when absent.
    pub regime: Option<Regime>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct FpTerms {
    /// `beta'` times the conditional mean energy of the second replica.
    pub mean: f64,
    /// Free energy of the constrained model at `beta'`.
    pub free_energy: f64,
    /// `1/2 log((1 - tau)/(1 - r^2))`; zero above the critical temperature.
    pub volume: f64,
    pub certified: bool,
}

impl FpTerms {
    pub fn total(&self) -> f64 {
        self.mean + self.free_energy + self.volume
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FpResult {
    pub regime: Regime,
    pub r: f64,
    pub value: f64,
    pub rho_star: Option<f64>,
    pub terms: FpTerms,
    /// Set whenever the constrained model carries a linear covariance term
    /// and its free energy came from the folded-field functional.
    pub field_mode: bool,
}

fn field_cfg(cfg: &SolverConfig) -> SolverConfig {
    SolverConfig { field_mode: true, ..cfg.clone() }
}

fn check_query(beta: f64, beta_prime: f64, r: f64) -> Result<()> {
    if !(beta > 0.0 && beta_prime > 0.0 && beta.is_finite() && beta_prime.is_finite()) {
        return Err(Error::InvalidInput("inverse temperatures must be positive".into()));
    }
    if !(r > -1.0 && r < 1.0) {
        return Err(Error::InvalidInput(format!("r = {r} must lie in (-1,1)")));
    }
    Ok(())
}

/// Potential above the critical temperature: the energy of the first replica
/// is `F'(beta) = beta xi(1)`, which shifts the second replica's mean by
/// `xi(r)/xi(1)` of it, plus the free energy of `xi(r^2 + (1-r^2)t) - xi(r^2)`.
pub fn fp_high(mix: &Mixture, beta: f64, beta_prime: f64, r: f64, cfg: &SolverConfig) -> Result<FpResult> {
    check_query(beta, beta_prime, r)?;
    let bc = beta_c(mix)?;
    if beta > bc {
        return Err(Error::RegimeMismatch(format!("beta = {beta} exceeds beta_c = {bc}")));
    }
    fp_high_formula(mix, beta, beta_prime, r, cfg)
}

/// The high temperature expression without the regime check, for comparing
/// both branches near the critical temperature.
pub fn fp_high_formula(mix: &Mixture, beta: f64, beta_prime: f64, r: f64, cfg: &SolverConfig) -> Result<FpResult> {
    check_query(beta, beta_prime, r)?;
    let tilde = mix.fp_mixtures(r, None)?.tilde;
    let sol = cs_minimize(&tilde, beta_prime, &field_cfg(cfg))?;
    let f_prime = beta * mix.value(1.0);
    let terms = FpTerms {
        mean: beta_prime * mix.value(r) / mix.value(1.0) * f_prime,
        free_energy: sol.value,
        volume: 0.0,
        certified: sol.certificate.passed,
    };
    Ok(FpResult { regime: Regime::High, r, value: terms.total(), rho_star: None, terms, field_mode: tilde.has_field() })
}

/// Quantities of the sampling temperature that every `(beta', r, rho)`
/// evaluation below the critical temperature reuses.
#[derive(Debug, Clone, Serialize)]
pub struct FpLowSetup {
    pub beta: f64,
    pub q1: f64,
    pub f_prime: f64,
    pub e_star: f64,
    pub r_star: f64,
}

impl FpLowSetup {
    pub fn targets(&self) -> FpTargets {
        FpTargets { e: self.f_prime, e1: self.e_star, r1: self.r_star }
    }
}

pub fn fp_low_setup(mix: &Mixture, beta: f64, cfg: &SolverConfig) -> Result<FpLowSetup> {
    let bc = beta_c(mix)?;
    if beta <= bc {
        return Err(Error::RegimeMismatch(format!("beta = {beta} does not exceed beta_c = {bc}")));
    }
    let sol = cs_minimize(mix, beta, cfg)?;
    if sol.k != 1 {
        return Err(Error::KMismatch(format!("Parisi measure has {} atoms away from 0, need 1", sol.k)));
    }
    let q1 = sol.order.q_hat();
    let f_prime = fprime_fd(mix, beta, cfg)?;
    let gs = ground_state_point(mix, q1, cfg)?;
    Ok(FpLowSetup { beta, q1, f_prime, e_star: gs.e_star, r_star: gs.r_star })
}

/// The three terms of the low temperature objective at a given rho.
/// At the endpoints of the admissible interval the volume term is -inf.
pub fn fp_low_terms(mix: &Mixture, setup: &FpLowSetup, beta_prime: f64, r: f64, rho: f64, cfg: &SolverConfig) -> Result<FpTerms> {
    let t = tau(setup.q1, r, rho)?;
    if t >= 1.0 {
        return Ok(FpTerms { mean: f64::NAN, free_energy: f64::NAN, volume: f64::NEG_INFINITY, certified: false });
    }
    let cond = fp_conditioning(mix, setup.q1, r, rho, &setup.targets())?;
    let fpm = mix.fp_mixtures(r, Some((setup.q1, rho)))?;
    let xi_fp = fpm.fp.expect("low temperature mixture");
    let (free_energy, certified) = if xi_fp.support().is_empty() {
        (0.0, true)
    } else {
        let sol = cs_minimize_relaxed(&xi_fp, beta_prime, &field_cfg(cfg))?;
        (sol.value, sol.certificate.passed)
    };
    Ok(FpTerms {
        mean: beta_prime * cond.mean,
        free_energy,
        volume: 0.5 * ((1.0 - t) / (1.0 - r * r)).ln(),
        certified,
    })
}

fn objective(terms: &Result<FpTerms>) -> f64 {
    match terms {
        Ok(t) if t.volume == f64::NEG_INFINITY => f64::NEG_INFINITY,
        Ok(t) => t.total(),
        Err(_) => f64::NAN,
    }
}

/// Supremum over rho in the admissible interval: a 64-point scan of the open
/// interval followed by golden section on the best bracket.
pub fn fp_low_with(mix: &Mixture, setup: &FpLowSetup, beta_prime: f64, r: f64, cfg: &SolverConfig) -> Result<FpResult> {
    check_query(setup.beta, beta_prime, r)?;
    let (lo, hi) = j_interval(setup.q1, r)?;
    const SCAN: usize = 64;
    let pts: Vec<f64> = (0..=SCAN + 1).map(|i| lo + (hi - lo) * i as f64 / (SCAN + 1) as f64).collect();
    let inner = &pts[1..=SCAN];
    let scanned: Vec<Result<FpTerms>> = inner.par_iter().map(|&rho| fp_low_terms(mix, setup, beta_prime, r, rho, cfg)).collect();
    let mut best = None;
    for (i, t) in scanned.iter().enumerate() {
        match t {
            Err(e) => return Err(Error::SolverFailed(format!("objective at rho = {}: {e}", inner[i]))),
            Ok(_) => {
                let v = objective(t);
                if best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((i, v));
                }
            }
        }
    }
    let (b, _) = best.expect("non-empty scan");
    let f = |rho: f64| objective(&fp_low_terms(mix, setup, beta_prime, r, rho, cfg));
    let (rho_star, _) = golden_max(f, pts[b], pts[b + 2], 1e-10);
    let terms = fp_low_terms(mix, setup, beta_prime, r, rho_star, cfg)?;
    let fp = mix.fp_mixtures(r, Some((setup.q1, rho_star)))?.fp.expect("low temperature mixture");
    Ok(FpResult { regime: Regime::Low, r, value: terms.total(), rho_star: Some(rho_star), terms, field_mode: fp.has_field() })
}

pub fn fp_low(mix: &Mixture, beta: f64, beta_prime: f64, r: f64, cfg: &SolverConfig) -> Result<FpResult> {
    check_query(beta, beta_prime, r)?;
    let setup = fp_low_setup(mix, beta, cfg)?;
    fp_low_with(mix, &setup, beta_prime, r, cfg)
}

pub fn detect_regime(mix: &Mixture, beta: f64) -> Result<Regime> {
    Ok(if beta > beta_c(mix)? { Regime::Low } else { Regime::High })
}

pub fn fp_potential(mix: &Mixture, query: &FpQuery, cfg: &SolverConfig) -> Result<FpResult> {
    let regime = match query.regime {
        Some(r) => r,
        None => detect_regime(mix, query.beta)?,
    };
    match regime {
        Regime::High => fp_high(mix, query.beta, query.beta_prime, query.r, cfg),
        Regime::Low => fp_low(mix, query.beta, query.beta_prime, query.r, cfg),
    }
}
