//! Mixture functions `xi(t) = sum_p c_p t^p` and the derived mixtures used
//! throughout the crate: shifted/restricted mixtures, the level ladder and the
//! two-replica mixtures of the Franz-Parisi computation.
//!
//! Coefficients are stored in the monomial basis, indexed by degree. Index 0
//! holds the constant term, which only ever shows up in zeroth-order
//! evaluations and covariances.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_DEGREE_CAP: usize = 32;

/// Tolerance under which a re-expanded coefficient is treated as rounding noise.
const COEFF_NOISE: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    coeffs: Vec<f64>,
    generic_truncation: bool,
}

#[derive(Serialize, Deserialize)]
struct MixtureJson {
    coeffs: BTreeMap<u32, f64>,
    #[serde(rename = "const", default)]
    const_term: f64,
    #[serde(default)]
    generic_truncation: bool,
}

impl Serialize for Mixture {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let coeffs = (1..self.coeffs.len())
            .filter(|&p| self.coeffs[p] != 0.0)
            .map(|p| (p as u32, self.coeffs[p]))
            .collect();
        MixtureJson {
            coeffs,
            const_term: self.coeffs[0],
            generic_truncation: self.generic_truncation,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Mixture {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = MixtureJson::deserialize(d)?;
        let mut pairs: Vec<(usize, f64)> = raw.coeffs.into_iter().map(|(p, c)| (p as usize, c)).collect();
        if pairs.iter().any(|&(p, _)| p == 0) {
            return Err(serde::de::Error::custom("degree 0 belongs in \"const\""));
        }
        pairs.push((0, raw.const_term));
        Mixture::from_pairs(&pairs, raw.generic_truncation, DEFAULT_DEGREE_CAP)
            .map_err(serde::de::Error::custom)
    }
}

/// Genericity report: a mixture is generic when the exponents in its support
/// have a divergent reciprocal sum. A finite support never qualifies unless it
/// is flagged as a truncation of a generic mixture.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenericReport {
    pub generic: bool,
    pub support: Vec<usize>,
    pub flagged_truncation: bool,
}

/// The three mixtures attached to a base point q.
#[derive(Debug, Clone)]
pub struct Restricted {
    /// `xi(t+q) - xi(q) - xi'(q) t`
    pub xi_q: Mixture,
    /// `xi_q((1-q) t)`
    pub xi_bar: Mixture,
    /// `xi(q t)`
    pub xi_hat: Mixture,
}

/// Level mixtures along an overlap ladder `0 = q_0 < q_1 < ... < q_k`, with
/// `q_{k+1} = 1`.
#[derive(Debug, Clone)]
pub struct LevelMixtures {
    /// `xi_(m)(t) = xi_{q_m}((q_{m+1} - q_m) t)` for m = 0..=k.
    pub levels: Vec<Mixture>,
    /// `xi_bar_(m) = xi_bar_{q_m}` for m = 0..=k.
    pub bars: Vec<Mixture>,
}

#[derive(Debug, Clone)]
pub struct FpMixtures {
    /// `xi(r^2 + (1-r^2) t) - xi(r^2)`, used above the critical temperature.
    pub tilde: Mixture,
    /// `xi(tau + (1-tau) t) - xi(tau) - deficit * t`, used below it.
    pub fp: Option<Mixture>,
    pub tau: Option<f64>,
    /// `xi'(rho)^2 / xi'(q1) * (1 - tau)`
    pub linear_deficit: Option<f64>,
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    let mut b = 1.0;
    for i in 0..k {
        b = b * (n - i) as f64 / (i + 1) as f64;
    }
    b
}

impl Mixture {
    /// Builds a mixture from `(degree, coefficient)` pairs. Degree 0 is the
    /// constant term.
    pub fn from_pairs(pairs: &[(usize, f64)], generic_truncation: bool, cap: usize) -> Result<Self> {
        let deg = pairs.iter().map(|p| p.0).max().unwrap_or(0);
        if deg > cap {
            return Err(Error::InvalidInput(format!("degree {deg} exceeds cap {cap}")));
        }
        let mut coeffs = vec![0.0; deg + 1];
        for &(p, c) in pairs {
            if !c.is_finite() || c < 0.0 {
                return Err(Error::InvalidInput(format!("coefficient of t^{p} must be finite and >= 0, got {c}")));
            }
            coeffs[p] += c;
        }
        let m = Mixture { coeffs, generic_truncation }.trimmed();
        if m.coeffs.iter().skip(1).all(|&c| c == 0.0) {
            return Err(Error::InvalidInput("mixture has no positive coefficient of degree >= 1".into()));
        }
        Ok(m)
    }

    /// Convenience constructor from `(degree, coefficient)` pairs with the
    /// default degree cap and no constant term.
    pub fn new(pairs: &[(usize, f64)]) -> Result<Self> {
        Self::from_pairs(pairs, false, DEFAULT_DEGREE_CAP)
    }

    pub fn pure(p: usize) -> Self {
        Self::new(&[(p, 1.0)]).expect("pure mixture")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("mixture serializes")
    }

    /// Internal constructor for derived mixtures: rounding noise is clipped,
    /// nothing else is validated.
    fn derived(mut coeffs: Vec<f64>, generic_truncation: bool) -> Self {
        let scale = coeffs.iter().fold(0.0f64, |a, c| a.max(c.abs())).max(1.0);
        for c in coeffs.iter_mut() {
            if c.abs() < COEFF_NOISE * scale {
                *c = 0.0;
            }
        }
        if coeffs.is_empty() {
            coeffs.push(0.0);
        }
        Mixture { coeffs, generic_truncation }.trimmed()
    }

    fn trimmed(mut self) -> Self {
        while self.coeffs.len() > 1 && *self.coeffs.last().unwrap() == 0.0 {
            self.coeffs.pop();
        }
        self
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn coeff(&self, p: usize) -> f64 {
        self.coeffs.get(p).copied().unwrap_or(0.0)
    }

    pub fn const_term(&self) -> f64 {
        self.coeffs[0]
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn generic_truncation(&self) -> bool {
        self.generic_truncation
    }

    /// Degrees with a nonzero coefficient, constant excluded.
    pub fn support(&self) -> Vec<usize> {
        (1..self.coeffs.len()).filter(|&p| self.coeffs[p] != 0.0).collect()
    }

    /// The exponent p when the mixture is `c t^p` with nothing else.
    pub fn pure_degree(&self) -> Option<usize> {
        let s = self.support();
        (s.len() == 1 && self.const_term() == 0.0).then(|| s[0])
    }

    pub fn has_field(&self) -> bool {
        self.coeff(1) > 0.0
    }

    /// `d^order/dt^order xi(t)`.
    pub fn eval(&self, t: f64, order: usize) -> f64 {
        let n = self.coeffs.len();
        if order >= n {
            return 0.0;
        }
        let mut acc = 0.0;
        for p in (order..n).rev() {
            let mut ff = 1.0;
            for j in 0..order {
                ff *= (p - j) as f64;
            }
            acc = acc * t + self.coeffs[p] * ff;
        }
        acc
    }

    pub fn value(&self, t: f64) -> f64 {
        self.eval(t, 0)
    }

    pub fn d1(&self, t: f64) -> f64 {
        self.eval(t, 1)
    }

    pub fn d2(&self, t: f64) -> f64 {
        self.eval(t, 2)
    }

    /// Coefficients of `t -> xi(a + b t)`.
    pub fn compose_affine(&self, a: f64, b: f64) -> Mixture {
        let n = self.coeffs.len();
        let mut out = vec![0.0; n];
        for (p, &c) in self.coeffs.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            for j in 0..=p {
                out[j] += c * binomial(p, j) * a.powi((p - j) as i32) * b.powi(j as i32);
            }
        }
        Mixture::derived(out, self.generic_truncation)
    }

    /// `t -> xi(s t)`.
    pub fn scale_arg(&self, s: f64) -> Mixture {
        let out = self.coeffs.iter().enumerate().map(|(p, &c)| c * s.powi(p as i32)).collect();
        Mixture::derived(out, self.generic_truncation)
    }

    /// Multiplies every coefficient by `s`.
    pub fn scaled(&self, s: f64) -> Mixture {
        Mixture::derived(self.coeffs.iter().map(|c| c * s).collect(), self.generic_truncation)
    }

    /// `xi_q(t) = xi(t+q) - xi(q) - xi'(q) t`.
    pub fn xi_q(&self, q: f64) -> Mixture {
        let mut m = self.compose_affine(q, 1.0);
        m.coeffs[0] = 0.0;
        if m.coeffs.len() > 1 {
            m.coeffs[1] = 0.0;
        }
        m.trimmed()
    }

    pub fn shift_restrict(&self, q: f64) -> Result<Restricted> {
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::InvalidInput(format!("base overlap {q} outside [0,1]")));
        }
        let xi_q = self.xi_q(q);
        let xi_bar = xi_q.scale_arg(1.0 - q);
        let xi_hat = self.scale_arg(q);
        Ok(Restricted { xi_q, xi_bar, xi_hat })
    }

    pub fn level_mixtures(&self, ladder: &[f64]) -> Result<LevelMixtures> {
        check_ladder(ladder)?;
        let mut qs = vec![0.0];
        qs.extend_from_slice(ladder);
        qs.push(1.0);
        let mut levels = Vec::with_capacity(ladder.len() + 1);
        let mut bars = Vec::with_capacity(ladder.len() + 1);
        for m in 0..=ladder.len() {
            let xq = self.xi_q(qs[m]);
            levels.push(xq.scale_arg(qs[m + 1] - qs[m]));
            bars.push(xq.scale_arg(1.0 - qs[m]));
        }
        Ok(LevelMixtures { levels, bars })
    }

    /// `xi(q + (1-q) t) - xi(q)`.
    pub fn xi_tilde(&self, q: f64) -> Mixture {
        let mut m = self.compose_affine(q, 1.0 - q);
        m.coeffs[0] = 0.0;
        m.trimmed()
    }

    /// Two-replica mixtures. `low` carries `(q1, rho)` in the low temperature
    /// regime; rho must lie in the admissible interval for `(q1, r)`.
    pub fn fp_mixtures(&self, r: f64, low: Option<(f64, f64)>) -> Result<FpMixtures> {
        if !(-1.0 < r && r < 1.0) {
            return Err(Error::InvalidInput(format!("overlap r = {r} must lie in (-1,1)")));
        }
        let tilde = self.xi_tilde(r * r);
        let Some((q1, rho)) = low else {
            return Ok(FpMixtures { tilde, fp: None, tau: None, linear_deficit: None });
        };
        let (lo, hi) = crate::franz_parisi::j_interval(q1, r)?;
        let slack = 1e-12 * (hi - lo).max(1.0);
        if rho < lo - slack || rho > hi + slack {
            return Err(Error::InvalidInput(format!("rho = {rho} outside [{lo}, {hi}]")));
        }
        let tau = crate::franz_parisi::tau(q1, r, rho)?;
        let deficit = self.d1(rho).powi(2) / self.d1(q1) * (1.0 - tau);
        let mut fp = self.xi_tilde(tau);
        if fp.coeffs.len() < 2 {
            fp.coeffs.resize(2, 0.0);
        }
        let lin = fp.coeffs[1] - deficit;
        // Nonnegative by Cauchy-Schwarz; only rounding can push it below zero.
        fp.coeffs[1] = if lin < 0.0 && lin > -1e-10 * fp.coeffs[1].abs().max(1e-300) - 1e-14 { 0.0 } else { lin };
        let fp = fp.trimmed();
        Ok(FpMixtures { tilde, fp: Some(fp), tau: Some(tau), linear_deficit: Some(deficit) })
    }

    /// Covariance of `(H(x)/sqrt N, d/dR H)`-type pair on the sphere:
    /// `[[xi(1), xi'(1)], [xi'(1), xi''(1)+xi'(1)]]`.
    pub fn sigma_xi(&self) -> [[f64; 2]; 2] {
        let (a, b, c) = (self.value(1.0), self.d1(1.0), self.d2(1.0));
        [[a, b], [b, c + b]]
    }

    pub fn is_generic(&self) -> GenericReport {
        // A finite support has a convergent reciprocal sum, so only the flag
        // can make it generic.
        GenericReport {
            generic: self.generic_truncation,
            support: self.support(),
            flagged_truncation: self.generic_truncation,
        }
    }
}

pub(crate) fn check_ladder(ladder: &[f64]) -> Result<()> {
    let mut prev = 0.0;
    for &q in ladder {
        if !(q > prev && q < 1.0) {
            return Err(Error::InvalidInput(format!("ladder {ladder:?} must be strictly increasing in (0,1)")));
        }
        prev = q;
    }
    Ok(())
}
