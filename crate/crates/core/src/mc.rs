//! Small-N Monte Carlo: explicit Hamiltonians, spherical Metropolis chains,
//! critical point search, and exact Gaussian sampling of conditional laws.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditioning::{
    band_kernel, cp_constraints, derivative_covariances, fp_conditioning, fp_constraints, fp_probe_point, hessian_decomposition, level_probe,
    schur_condition, BandGeometry, ConditioningEvent, FpTargets, Functional,
};
use crate::error::{Error, Result};
use crate::mixture::Mixture;
use crate::rng::stream;

/// Largest dense tensor a field may hold, in entries.
pub const MAX_TENSOR_ENTRIES: usize = 64 * 64 * 64 * 64;

/// `H(s) = sum_p gamma_p N^{-(p-1)/2} sum J_{i_1..i_p} s_{i_1}..s_{i_p}` with
/// i.i.d. standard normal, unsymmetrized J. A constant term becomes
/// `sqrt(N c_0) J_0`.
#[derive(Debug, Clone)]
pub struct FieldSample {
    pub n: usize,
    pub seed: u64,
    /// `(p, gamma_p N^{-(p-1)/2}, J)` for each active degree.
    parts: Vec<(usize, f64, Vec<f64>)>,
    constant: f64,
}

fn normals(rng: &mut ChaCha20Rng, k: usize) -> Vec<f64> {
    (0..k).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn sample_field(mix: &Mixture, n: usize, seed: u64, index: u64) -> Result<FieldSample> {
    let mut rng = stream(seed, index, 0);
    sample_field_with(mix, n, seed, &mut rng)
}

fn sample_field_with(mix: &Mixture, n: usize, seed: u64, rng: &mut ChaCha20Rng) -> Result<FieldSample> {
    if n == 0 {
        return Err(Error::InvalidInput("dimension must be positive".into()));
    }
    let nf = n as f64;
    let mut parts = Vec::new();
    for p in mix.support() {
        let entries = (n as u128).pow(p as u32);
        if entries > MAX_TENSOR_ENTRIES as u128 {
            return Err(Error::CapacityExceeded(format!("degree {p} at N = {n} needs {entries} entries (cap {MAX_TENSOR_ENTRIES})")));
        }
        let scale = mix.coeff(p).sqrt() * nf.powf(-(p as f64 - 1.0) / 2.0);
        parts.push((p, scale, normals(rng, entries as usize)));
    }
    let constant = (nf * mix.const_term()).sqrt() * rng.sample::<f64, _>(StandardNormal);
    Ok(FieldSample { n, seed, parts, constant })
}

/// Contracts a dense order-p tensor with `vecs[k]` in every slot k that has
/// one; the remaining slots (at most two) stay free, in slot order.
fn contract(t: &[f64], n: usize, p: usize, vecs: &[Option<&[f64]>]) -> Vec<f64> {
    let free: Vec<usize> = (0..p).filter(|&k| vecs[k].is_none()).collect();
    let mut out = vec![0.0; n.pow(free.len() as u32)];
    let mut idx = vec![0usize; p];
    for &j in t {
        let mut w = j;
        let mut pos = 0;
        for k in 0..p {
            match vecs[k] {
                Some(v) => w *= v[idx[k]],
                None => pos = pos * n + idx[k],
            }
        }
        out[pos] += w;
        for k in (0..p).rev() {
            idx[k] += 1;
            if idx[k] < n {
                break;
            }
            idx[k] = 0;
        }
    }
    out
}

impl FieldSample {
    /// Per-degree components of `H(s)`, constant excluded.
    pub fn components(&self, s: &[f64]) -> Vec<(usize, f64)> {
        self.parts
            .iter()
            .map(|(p, scale, t)| {
                let vecs: Vec<Option<&[f64]>> = vec![Some(s); *p];
                (*p, scale * contract(t, self.n, *p, &vecs)[0])
            })
            .collect()
    }

    pub fn eval(&self, s: &[f64]) -> f64 {
        self.constant + self.components(s).iter().map(|c| c.1).sum::<f64>()
    }

    pub fn grad(&self, s: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.n];
        for (p, scale, t) in &self.parts {
            for k in 0..*p {
                let vecs: Vec<Option<&[f64]>> = (0..*p).map(|j| if j == k { None } else { Some(s) }).collect();
                for (gi, ci) in g.iter_mut().zip(contract(t, self.n, *p, &vecs)) {
                    *gi += scale * ci;
                }
            }
        }
        g
    }

    pub fn hess(&self, s: &[f64]) -> DMatrix<f64> {
        let n = self.n;
        let mut h = DMatrix::zeros(n, n);
        for (p, scale, t) in &self.parts {
            for k in 0..*p {
                for l in k + 1..*p {
                    let vecs: Vec<Option<&[f64]>> = (0..*p).map(|j| if j == k || j == l { None } else { Some(s) }).collect();
                    let c = contract(t, n, *p, &vecs);
                    for i in 0..n {
                        for j in 0..n {
                            let v = scale * c[i * n + j];
                            h[(i, j)] += v;
                            h[(j, i)] += v;
                        }
                    }
                }
            }
        }
        h
    }
}

fn random_sphere(rng: &mut ChaCha20Rng, n: usize, radius2: f64) -> Vec<f64> {
    let v = normals(rng, n);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x * radius2.sqrt() / norm).collect()
}

fn renormalize(v: &mut [f64], radius2: f64) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in v.iter_mut() {
        *x *= radius2.sqrt() / norm;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GibbsConfig {
    pub samples: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Initial proposal scale relative to the sphere radius per coordinate.
    pub step: f64,
    pub seed: u64,
    pub chain: u64,
}

impl Default for GibbsConfig {
    fn default() -> Self {
        GibbsConfig { samples: 200, burn_in: 2000, thin: 20, step: 0.3, seed: 1, chain: 0 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GibbsRun {
    pub beta: f64,
    pub n: usize,
    pub config: GibbsConfig,
    pub samples: Vec<Vec<f64>>,
    /// `H/N` at each retained sample.
    pub energies: Vec<f64>,
    /// Acceptance rate after burn-in.
    pub acceptance: f64,
    pub final_step: f64,
    /// Lag-one autocorrelation of the retained energies.
    pub autocorr: f64,
}

/// Random walk Metropolis on the sphere of radius `sqrt N` for the density
/// `exp(beta H)`. The proposal `s + step * g`, projected back to the sphere,
/// is symmetric. The step adapts toward acceptance 0.4 during burn-in only.
pub fn gibbs_mcmc(field: &FieldSample, beta: f64, cfg: &GibbsConfig) -> GibbsRun {
    let n = field.n;
    let nf = n as f64;
    let mut rng = stream(cfg.seed, field.seed, 1 + cfg.chain);
    let mut s = random_sphere(&mut rng, n, nf);
    let mut h = field.eval(&s);
    let mut step = cfg.step;
    let (mut acc_window, mut window) = (0usize, 0usize);
    let (mut accepted, mut proposed) = (0usize, 0usize);
    let mut samples = Vec::with_capacity(cfg.samples);
    let mut energies = Vec::with_capacity(cfg.samples);
    let total = cfg.burn_in + cfg.samples * cfg.thin.max(1);
    for it in 0..total {
        let mut prop: Vec<f64> = s.iter().map(|x| x + step * rng.sample::<f64, _>(StandardNormal)).collect();
        renormalize(&mut prop, nf);
        let hp = field.eval(&prop);
        let ok = beta * (hp - h) >= 0.0 || rng.random::<f64>() < (beta * (hp - h)).exp();
        if ok {
            s = prop;
            h = hp;
        }
        if it < cfg.burn_in {
            acc_window += ok as usize;
            window += 1;
            if window == 100 {
                step *= ((acc_window as f64 / 100.0 - 0.4) * 2.0).exp();
                acc_window = 0;
                window = 0;
            }
        } else {
            accepted += ok as usize;
            proposed += 1;
            if (it - cfg.burn_in + 1) % cfg.thin.max(1) == 0 {
                samples.push(s.clone());
                energies.push(h / nf);
            }
        }
    }
    let autocorr = lag_one(&energies);
    GibbsRun {
        beta,
        n,
        config: cfg.clone(),
        samples,
        energies,
        acceptance: accepted as f64 / proposed.max(1) as f64,
        final_step: step,
        autocorr,
    }
}

fn lag_one(x: &[f64]) -> f64 {
    if x.len() < 3 {
        return f64::NAN;
    }
    let m = x.iter().sum::<f64>() / x.len() as f64;
    let var: f64 = x.iter().map(|v| (v - m).powi(2)).sum();
    if var == 0.0 {
        return 0.0;
    }
    x.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum::<f64>() / var
}

#[derive(Debug, Clone, Serialize)]
pub struct OverlapHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub mean: f64,
    pub std: f64,
}

/// Histogram of `<s1, s2>/N` over all pairs of samples from two runs.
pub fn overlap_statistics(a: &GibbsRun, b: &GibbsRun, bins: usize) -> Result<OverlapHistogram> {
    if a.n != b.n {
        return Err(Error::InvalidInput("runs live in different dimensions".into()));
    }
    let nf = a.n as f64;
    let mut qs = Vec::with_capacity(a.samples.len() * b.samples.len());
    for x in &a.samples {
        for y in &b.samples {
            qs.push(dot(x, y) / nf);
        }
    }
    Ok(histogram(&qs, -1.0, 1.0, bins))
}

pub fn histogram(xs: &[f64], lo: f64, hi: f64, bins: usize) -> OverlapHistogram {
    let edges: Vec<f64> = (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect();
    let mut counts = vec![0u64; bins];
    for &x in xs {
        let b = (((x - lo) / (hi - lo)) * bins as f64).floor();
        let b = (b.max(0.0) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let k = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / k;
    let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / k).sqrt();
    OverlapHistogram { edges, counts, mean, std }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct HessianSummary {
    pub min: f64,
    pub max: f64,
    /// Number of positive eigenvalues of the Riemannian Hessian.
    pub ascending: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct CriticalPointRecord {
    pub location: Vec<f64>,
    pub energy_density: f64,
    pub radial_derivative: f64,
    pub tangential_residual: f64,
    pub hessian: Option<HessianSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NewtonConfig {
    pub restarts: usize,
    pub max_iter: usize,
    /// Acceptance threshold on the projected gradient is `tol * sqrt N`.
    pub tol: f64,
    pub seed: u64,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        NewtonConfig { restarts: 40, max_iter: 60, tol: 1e-8, seed: 7 }
    }
}

fn tangent_parts(field: &FieldSample, x: &[f64]) -> (Vec<f64>, f64, DMatrix<f64>) {
    let g = field.grad(x);
    let r2 = dot(x, x);
    let radial = dot(&g, x) / r2;
    let gt: Vec<f64> = g.iter().zip(x).map(|(gi, xi)| gi - radial * xi).collect();
    let n = x.len();
    let xv = DVector::from_column_slice(x);
    let p = DMatrix::identity(n, n) - &xv * xv.transpose() / r2;
    let hr = &p * field.hess(x) * &p - &p * radial;
    (gt, radial, hr)
}

/// Riemannian Newton on the sphere of radius `sqrt(N q)` from `restarts`
/// random starts; points closer than `1e-3 sqrt N` are merged.
pub fn find_critical_points(field: &FieldSample, q: f64, cfg: &NewtonConfig) -> Vec<CriticalPointRecord> {
    let n = field.n;
    let nf = n as f64;
    let r2 = nf * q;
    let found: Vec<Option<CriticalPointRecord>> = (0..cfg.restarts)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream(cfg.seed, field.seed, 1_000_000 + k as u64);
            let mut x = random_sphere(&mut rng, n, r2);
            for _ in 0..cfg.max_iter {
                let (gt, _, hr) = tangent_parts(field, &x);
                let gnorm = dot(&gt, &gt).sqrt();
                if gnorm <= cfg.tol * nf.sqrt() {
                    break;
                }
                // Solve on the tangent space; the radial direction is a null
                // vector of the projected Hessian and is filtered out.
                let eig = hr.symmetric_eigen();
                let xv = DVector::from_column_slice(&x) / r2.sqrt();
                let gv = DVector::from_column_slice(&gt);
                let mut step = DVector::zeros(n);
                for i in 0..n {
                    let v = eig.eigenvectors.column(i);
                    if v.dot(&xv).abs() > 0.5 {
                        continue;
                    }
                    let lam = eig.eigenvalues[i];
                    let lam = if lam.abs() < 1e-10 { 1e-10f64.copysign(lam) } else { lam };
                    step -= v * (v.dot(&gv) / lam);
                }
                let sn = step.norm();
                let cap = 0.5 * r2.sqrt();
                if sn > cap {
                    step *= cap / sn;
                }
                for i in 0..n {
                    x[i] += step[i];
                }
                renormalize(&mut x, r2);
            }
            let (gt, radial, hr) = tangent_parts(field, &x);
            let res = dot(&gt, &gt).sqrt();
            if res > cfg.tol * nf.sqrt() {
                return None;
            }
            let xv = DVector::from_column_slice(&x) / r2.sqrt();
            let eig = hr.symmetric_eigen();
            let tangent: Vec<f64> = (0..n).filter(|&i| eig.eigenvectors.column(i).dot(&xv).abs() <= 0.5).map(|i| eig.eigenvalues[i]).collect();
            let summary = HessianSummary {
                min: tangent.iter().copied().fold(f64::INFINITY, f64::min),
                max: tangent.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                ascending: tangent.iter().filter(|&&l| l > 0.0).count(),
            };
            Some(CriticalPointRecord {
                energy_density: field.eval(&x) / nf,
                radial_derivative: radial,
                tangential_residual: res / nf.sqrt(),
                hessian: Some(summary),
                location: x,
            })
        })
        .collect();
    let mut out: Vec<CriticalPointRecord> = Vec::new();
    for rec in found.into_iter().flatten() {
        let dup = out.iter().any(|o| {
            let d2: f64 = o.location.iter().zip(&rec.location).map(|(a, b)| (a - b).powi(2)).sum();
            d2.sqrt() < 1e-3 * nf.sqrt()
        });
        if !dup {
            out.push(rec);
        }
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct ComplexityHistogram {
    pub n: usize,
    pub q: f64,
    pub fields: usize,
    pub e_edges: Vec<f64>,
    pub r_edges: Vec<f64>,
    /// Row-major over (E bin, R bin).
    pub mean_counts: Vec<f64>,
    /// `(1/N) log(mean count)`; `-inf` where nothing was found.
    pub log_count: Vec<f64>,
    pub ci_lo: Vec<f64>,
    pub ci_hi: Vec<f64>,
    /// The finder is not exhaustive; counts are lower bounds.
    pub exploratory: bool,
}

#[allow(clippy::too_many_arguments)]
pub fn empirical_complexity(
    mix: &Mixture,
    n: usize,
    q: f64,
    e_edges: &[f64],
    r_edges: &[f64],
    fields: usize,
    newton: &NewtonConfig,
    seed: u64,
) -> Result<ComplexityHistogram> {
    let (ne, nr) = (e_edges.len() - 1, r_edges.len() - 1);
    let per_field: Vec<Result<Vec<f64>>> = (0..fields)
        .into_par_iter()
        .map(|f| {
            let field = sample_field(mix, n, seed, f as u64)?;
            let mut counts = vec![0.0; ne * nr];
            for cp in find_critical_points(&field, q, newton) {
                let (e, r) = (cp.energy_density, cp.radial_derivative);
                let bi = e_edges.windows(2).position(|w| e >= w[0] && e < w[1]);
                let bj = r_edges.windows(2).position(|w| r >= w[0] && r < w[1]);
                if let (Some(i), Some(j)) = (bi, bj) {
                    counts[i * nr + j] += 1.0;
                }
            }
            Ok(counts)
        })
        .collect();
    let per_field: Vec<Vec<f64>> = per_field.into_iter().collect::<Result<_>>()?;
    let nf = n as f64;
    let mean_of = |rows: &[&Vec<f64>]| -> Vec<f64> {
        let mut m = vec![0.0; ne * nr];
        for r in rows {
            for (a, b) in m.iter_mut().zip(r.iter()) {
                *a += b;
            }
        }
        m.iter().map(|x| x / rows.len().max(1) as f64).collect()
    };
    let all: Vec<&Vec<f64>> = per_field.iter().collect();
    let mean_counts = mean_of(&all);
    let log = |m: f64| if m > 0.0 { m.ln() / nf } else { f64::NEG_INFINITY };
    let log_count: Vec<f64> = mean_counts.iter().map(|&m| log(m)).collect();
    const BOOT: usize = 200;
    let mut rng = stream(seed, u64::MAX, 0);
    let mut boots: Vec<Vec<f64>> = vec![Vec::with_capacity(BOOT); ne * nr];
    for _ in 0..BOOT {
        let pick: Vec<&Vec<f64>> = (0..fields).map(|_| &per_field[rng.random_range(0..fields)]).collect();
        for (b, m) in boots.iter_mut().zip(mean_of(&pick)) {
            b.push(log(m));
        }
    }
    let quant = |v: &mut Vec<f64>, p: f64| {
        v.sort_by(|a, b| a.total_cmp(b));
        v[((v.len() - 1) as f64 * p).round() as usize]
    };
    let ci_lo = boots.iter_mut().map(|b| quant(b, 0.025)).collect();
    let ci_hi = boots.iter_mut().map(|b| quant(b, 0.975)).collect();
    Ok(ComplexityHistogram {
        n,
        q,
        fields,
        e_edges: e_edges.to_vec(),
        r_edges: r_edges.to_vec(),
        mean_counts,
        log_count,
        ci_lo,
        ci_hi,
        exploratory: true,
    })
}

impl ComplexityHistogram {
    pub fn centres(&self) -> Vec<(f64, f64)> {
        let mid = |e: &[f64], i: usize| 0.5 * (e[i] + e[i + 1]);
        let (ne, nr) = (self.e_edges.len() - 1, self.r_edges.len() - 1);
        (0..ne * nr).map(|b| (mid(&self.e_edges, b / nr), mid(&self.r_edges, b % nr))).collect()
    }

    /// Complexity at each bin centre, `-inf` where it is undefined.
    pub fn theta_on_bins(&self, mix: &Mixture) -> Vec<f64> {
        self.centres()
            .into_iter()
            .map(|(e, r)| crate::landscape::theta_auto(mix, e, r).map(|t| t.theta).unwrap_or(f64::NEG_INFINITY))
            .collect()
    }

    /// `(E bin, R bin)` of the largest entry.
    pub fn argmax(&self, values: &[f64]) -> Option<(usize, usize)> {
        let nr = self.r_edges.len() - 1;
        let (b, v) = values.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1))?;
        v.is_finite().then_some((b / nr, b % nr))
    }
}

/// Exact Gaussian sampler of target functionals given constraint values.
#[derive(Debug, Clone)]
pub struct ConditionalSampler {
    pub labels: Vec<String>,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    factor: DMatrix<f64>,
}

pub fn exact_conditional_sampler(mix: &Mixture, constraints: &[Functional], values: &[f64], targets: &[Functional]) -> Result<ConditionalSampler> {
    let mut all: Vec<Functional> = constraints.to_vec();
    all.extend(targets.iter().cloned());
    let joint = derivative_covariances(mix, &all)?;
    let k = constraints.len();
    let cond = schur_condition(&joint, &(0..k).collect::<Vec<_>>(), values, false)?;
    let eig = cond.cov.clone().symmetric_eigen();
    let root = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    let factor = &eig.eigenvectors * root;
    Ok(ConditionalSampler { labels: targets.iter().map(|f| f.label.clone()).collect(), mean: cond.mean, cov: cond.cov, factor })
}

impl ConditionalSampler {
    pub fn sample(&self, rng: &mut ChaCha20Rng) -> DVector<f64> {
        let z = DVector::from_fn(self.mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.mean + &self.factor * z
    }

    /// `count` draws split over deterministic per-chunk streams.
    pub fn sample_many(&self, count: usize, seed: u64) -> Vec<DVector<f64>> {
        const CHUNK: usize = 4096;
        let chunks = count.div_ceil(CHUNK);
        (0..chunks)
            .into_par_iter()
            .flat_map_iter(|c| {
                let mut rng = stream(seed, 0x5A, c as u64);
                let take = CHUNK.min(count - c * CHUNK);
                (0..take).map(move |_| self.sample(&mut rng)).collect::<Vec<_>>()
            })
            .collect()
    }
}

/// Sample means, covariances and correlations of a set of vectors.
#[derive(Debug, Clone)]
pub struct Moments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl Moments {
    pub fn of(xs: &[DVector<f64>]) -> Self {
        let d = xs[0].len();
        let k = xs.len() as f64;
        let mut mean = DVector::zeros(d);
        for x in xs {
            mean += x;
        }
        mean /= k;
        let mut cov = DMatrix::zeros(d, d);
        for x in xs {
            let c = x - &mean;
            cov += &c * c.transpose();
        }
        cov /= k - 1.0;
        Moments { mean, cov }
    }

    pub fn corr(&self, i: usize, j: usize) -> f64 {
        self.cov[(i, j)] / (self.cov[(i, i)] * self.cov[(j, j)]).sqrt()
    }
}

/// GOE matrix of dimension d with `E M_ij^2 = (1 + delta_ij)/d`.
pub fn sample_goe(d: usize, rng: &mut ChaCha20Rng) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(d, d);
    let s = (1.0 / d as f64).sqrt();
    for i in 0..d {
        m[(i, i)] = rng.sample::<f64, _>(StandardNormal) * s * 2f64.sqrt();
        for j in i + 1..d {
            let v = rng.sample::<f64, _>(StandardNormal) * s;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// Kolmogorov distance between the empirical law of `eigs` and the
/// semicircle on [-2, 2].
pub fn semicircle_ks(eigs: &[f64]) -> f64 {
    let cdf = |x: f64| {
        let x = x.clamp(-2.0, 2.0);
        0.5 + x * (4.0 - x * x).sqrt() / (4.0 * std::f64::consts::PI) + (x / 2.0).asin() / std::f64::consts::PI
    };
    let mut e = eigs.to_vec();
    e.sort_by(|a, b| a.total_cmp(b));
    let k = e.len() as f64;
    e.iter()
        .enumerate()
        .map(|(i, &x)| {
            let c = cdf(x);
            (c - i as f64 / k).abs().max((c - (i + 1) as f64 / k).abs())
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Serialize)]
pub struct CovCheck {
    pub overlap: f64,
    pub empirical: f64,
    pub se: f64,
    pub expected: f64,
}

/// Empirical `Cov(H(s), H(s'))/N` over independent fields for each pair.
pub fn covariance_check(mix: &Mixture, pairs: &[(Vec<f64>, Vec<f64>)], fields: usize, seed: u64) -> Result<Vec<CovCheck>> {
    let n = pairs.first().map(|p| p.0.len()).ok_or_else(|| Error::InvalidInput("no pairs".into()))?;
    let nf = n as f64;
    let values: Vec<Result<Vec<(f64, f64)>>> = (0..fields)
        .into_par_iter()
        .map(|f| {
            let field = sample_field(mix, n, seed, f as u64)?;
            Ok(pairs.iter().map(|(a, b)| (field.eval(a), field.eval(b))).collect())
        })
        .collect();
    let values: Vec<Vec<(f64, f64)>> = values.into_iter().collect::<Result<_>>()?;
    let k = fields as f64;
    Ok(pairs
        .iter()
        .enumerate()
        .map(|(i, (a, b))| {
            let ma = values.iter().map(|v| v[i].0).sum::<f64>() / k;
            let mb = values.iter().map(|v| v[i].1).sum::<f64>() / k;
            let prods: Vec<f64> = values.iter().map(|v| (v[i].0 - ma) * (v[i].1 - mb) / nf).collect();
            let mp = prods.iter().sum::<f64>() / (k - 1.0);
            let var = prods.iter().map(|x| (x - mp).powi(2)).sum::<f64>() / (k - 1.0);
            let t = dot(a, b) / nf;
            CovCheck { overlap: t, empirical: mp, se: (var / k).sqrt(), expected: mix.value(t) }
        })
        .collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct KernelCheck {
    pub kernel: String,
    pub quantity: String,
    pub analytic: f64,
    pub empirical: f64,
    pub se: f64,
    pub passed: bool,
}

struct Checker<'a> {
    kernel: String,
    draws: &'a [DVector<f64>],
    moments: Moments,
    out: Vec<KernelCheck>,
}

impl<'a> Checker<'a> {
    fn new(kernel: String, draws: &'a [DVector<f64>]) -> Self {
        let moments = Moments::of(draws);
        Checker { kernel, draws, moments, out: Vec::new() }
    }

    fn push(&mut self, quantity: String, analytic: f64, empirical: f64, se: f64) {
        let passed = (empirical - analytic).abs() <= 3.0 * se;
        self.out.push(KernelCheck { kernel: self.kernel.clone(), quantity, analytic, empirical, se, passed });
    }

    /// `var` is the analytic variance of entry i.
    fn mean(&mut self, i: usize, want: f64, var: f64) {
        let k = self.draws.len() as f64;
        self.push(format!("mean[{i}]"), want, self.moments.mean[i], (var / k).sqrt());
    }

    /// CLT error of a sample covariance of a Gaussian pair.
    fn cov(&mut self, i: usize, j: usize, want: f64, var_i: f64, var_j: f64) {
        let k = self.draws.len() as f64;
        let se = ((var_i * var_j + want * want) / k).sqrt();
        self.push(format!("cov[{i},{j}]"), want, self.moments.cov[(i, j)], se);
    }
}

/// Master check of the analytic conditional kernels against exact Gaussian
/// sampling: band kernels at depths 1 and 2, the two-replica conditioning
/// for a mixed and a pure model, and the level decomposition at an anchor.
pub fn validate_conditioning(samples: usize, seed: u64) -> Result<Vec<KernelCheck>> {
    let mix = Mixture::new(&[(2, 0.3), (3, 0.5), (4, 0.2)])?;
    let mut out = Vec::new();
    let mut rng = stream(seed, 0xC0, 0);

    for (m, ladder, e_vec, r_vec) in [
        (1usize, vec![0.35, 0.7], vec![0.5], vec![1.3]),
        (2, vec![0.3, 0.55, 0.8], vec![0.6, 0.9], vec![1.5, 2.2]),
    ] {
        let n = 20;
        let g = BandGeometry::new(n, ladder.clone(), m, 0.0)?;
        let ev = ConditioningEvent::new(None, e_vec, r_vec, g.clone())?;
        let (cons, vals) = cp_constraints(&mix, &ev);
        let d = n - m;
        let ys: Vec<DVector<f64>> = (0..2)
            .map(|_| {
                let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                let z = &z * ((d as f64 * rng.random_range(0.5f64..1.0)).sqrt() / z.norm());
                g.embed(&z)
            })
            .collect::<Result<_>>()?;
        let targets: Vec<Functional> = ys.iter().enumerate().map(|(a, y)| Functional::value(format!("H@y{a}"), y.clone(), 1.0 / n as f64)).collect();
        let sampler = exact_conditional_sampler(&mix, &cons, &vals, &targets)?;
        let draws = sampler.sample_many(samples, seed ^ (m as u64));
        let mut ck = Checker::new(format!("band m={m} N={n}"), &draws);
        let nf = n as f64;
        let kern = |a: usize, b: usize| band_kernel(&mix, &ev, ys[a].dot(&ys[b]) / nf).map(|k| k.cov / nf);
        let (v0, v1) = (kern(0, 0)?, kern(1, 1)?);
        ck.mean(0, ev.e_m(), v0);
        ck.mean(1, ev.e_m(), v1);
        ck.cov(0, 0, v0, v0, v0);
        ck.cov(1, 1, v1, v1, v1);
        ck.cov(0, 1, kern(0, 1)?, v0, v1);
        out.extend(ck.out);
    }

    for (name, m) in [("fp mixed", mix.clone()), ("fp pure", Mixture::pure(3))] {
        let n = 12;
        let nf = n as f64;
        let (q1, r, rho) = (0.55, 0.4, 0.3);
        let t = FpTargets { e: 0.9, e1: 0.6, r1: 1.7 };
        let fc = fp_conditioning(&m, q1, r, rho, &t)?;
        let cons = fp_constraints(&m, n, q1)?;
        let mut vals = vec![t.e, t.e1];
        if !fc.pure {
            vals.push(t.r1);
        }
        vals.resize(cons.len(), 0.0);
        let tails: Vec<DVector<f64>> = (0..2).map(|_| DVector::from_fn(n - 2, |_, _| rng.sample::<f64, _>(StandardNormal))).collect();
        let targets: Vec<Functional> = tails
            .iter()
            .enumerate()
            .map(|(a, tl)| fp_probe_point(n, q1, r, rho, tl).map(|p| Functional::value(format!("H@p{a}"), p, 1.0 / nf)))
            .collect::<Result<_>>()?;
        let sampler = exact_conditional_sampler(&m, &cons, &vals, &targets)?;
        let draws = sampler.sample_many(samples, seed ^ 0xF0);
        let fpm = m.fp_mixtures(r, Some((q1, rho)))?.fp.expect("low temperature mixture");
        let kern = |a: usize, b: usize| {
            let c = tails[a].dot(&tails[b]) / (tails[a].norm() * tails[b].norm());
            (fpm.value(c) + fc.xi_tau - fc.v_cinv_v) / nf
        };
        let mut ck = Checker::new(format!("{name} N={n}"), &draws);
        let (v0, v1) = (kern(0, 0), kern(1, 1));
        ck.mean(0, fc.mean, v0);
        ck.mean(1, fc.mean, v1);
        ck.cov(0, 0, v0, v0, v0);
        ck.cov(1, 1, v1, v1, v1);
        ck.cov(0, 1, kern(0, 1), v0, v1);
        out.extend(ck.out);
    }

    {
        let n = 14;
        let g = BandGeometry::new(n, vec![0.35, 0.7], 1, 0.0)?;
        let ev = ConditioningEvent::new(None, vec![0.5], vec![1.3], g.clone())?;
        let (cons, vals) = cp_constraints(&mix, &ev);
        let probe = level_probe(&mix, &ev, 2, &[(0, 0), (1, 1), (0, 1), (2, 4)])?;
        let sampler = exact_conditional_sampler(&mix, &cons, &vals, &probe.functionals)?;
        let shift = DVector::from_column_slice(&probe.offsets);
        let draws: Vec<DVector<f64>> = sampler.sample_many(samples, seed ^ 0xAB).into_iter().map(|x| x + &shift).collect();
        let hd = hessian_decomposition(&mix, &g)?;
        let d = hd.dim as f64;
        let mut want = DMatrix::zeros(8, 8);
        for a in 0..2 {
            for b in 0..2 {
                want[(a, b)] = hd.sigma_u[a][b];
            }
        }
        want[(2, 2)] = hd.grad_var;
        want[(3, 3)] = hd.grad_var;
        for (i, v) in [(4, 2.0 / d), (5, 2.0 / d), (6, 1.0 / d), (7, 1.0 / d)] {
            want[(i, i)] = v;
        }
        let mut ck = Checker::new(format!("level m=1 N={n}"), &draws);
        for i in 0..8 {
            ck.mean(i, 0.0, want[(i, i)]);
            for j in i..8 {
                ck.cov(i, j, want[(i, j)], want[(i, i)], want[(j, j)]);
            }
        }
        out.extend(ck.out);
    }
    Ok(out)
}

const MAGIC: &[u8; 4] = b"SGMC";
const DUMP_VERSION: u32 = 1;

/// Writes rows of length N as little-endian f64 after a 16-byte header.
pub fn write_samples<W: Write>(mut w: W, n: usize, rows: &[Vec<f64>]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&DUMP_VERSION.to_le_bytes())?;
    w.write_all(&(n as u64).to_le_bytes())?;
    for r in rows {
        if r.len() != n {
            return Err(Error::InvalidInput(format!("row of length {} in a dump of width {n}", r.len())));
        }
        for x in r {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_samples<R: Read>(mut r: R) -> Result<(usize, Vec<Vec<f64>>)> {
    let mut head = [0u8; 16];
    r.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(Error::InvalidInput("not a sample dump".into()));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != DUMP_VERSION {
        return Err(Error::InvalidInput(format!("unsupported dump version {version}")));
    }
    let n = u64::from_le_bytes(head[8..16].try_into().unwrap()) as usize;
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if n == 0 || body.len() % (8 * n) != 0 {
        return Err(Error::InvalidInput("truncated dump".into()));
    }
    let rows = body
        .chunks_exact(8 * n)
        .map(|row| row.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect())
        .collect();
    Ok((n, rows))
}

/// Everything needed to reproduce a Monte Carlo run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McManifest {
    pub seed: u64,
    pub mixture: Mixture,
    pub n: usize,
    pub beta: f64,
    pub chain: GibbsConfig,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn capacity_is_enforced() {
        let m = Mixture::new(&[(4, 1.0)]).unwrap();
        assert!(sample_field(&m, 64, 1, 0).is_ok());
        assert!(matches!(sample_field(&m, 65, 1, 0), Err(Error::CapacityExceeded(_))));
    }

    #[test]
    fn gradient_and_hessian_match_differences() {
        let m = Mixture::new(&[(1, 0.2), (2, 0.5), (3, 0.3), (4, 0.1)]).unwrap();
        let f = sample_field(&m, 7, 3, 0).unwrap();
        let mut rng = stream(9, 0, 0);
        let s = random_sphere(&mut rng, 7, 7.0);
        let g = f.grad(&s);
        let h = f.hess(&s);
        let eps = 1e-5;
        for i in 0..7 {
            let mut sp = s.clone();
            let mut sm = s.clone();
            sp[i] += eps;
            sm[i] -= eps;
            let fd = (f.eval(&sp) - f.eval(&sm)) / (2.0 * eps);
            assert!((fd - g[i]).abs() <= 1e-6 * g[i].abs().max(1.0), "grad {i}");
            let gp = f.grad(&sp);
            let gm = f.grad(&sm);
            for j in 0..7 {
                let fd = (gp[j] - gm[j]) / (2.0 * eps);
                assert!((fd - h[(i, j)]).abs() <= 1e-6 * h[(i, j)].abs().max(1.0), "hess {i}{j}");
            }
        }
        // Euler identity for the homogeneous parts.
        let euler: f64 = f.components(&s).iter().map(|(p, c)| *p as f64 * c).sum();
        assert!((dot(&g, &s) - euler).abs() < 1e-9 * euler.abs().max(1.0));
    }

    #[test]
    fn two_spin_critical_points_are_eigenvectors() {
        let n = 6;
        let f = sample_field(&Mixture::pure(2), n, 4, 0).unwrap();
        let pts = find_critical_points(&f, 1.0, &NewtonConfig { restarts: 120, ..Default::default() });
        let sym = {
            let h = f.hess(&vec![0.0; n]);
            h * 0.5
        };
        let eig = sym.symmetric_eigen();
        let mut levels: Vec<f64> = pts.iter().map(|p| p.energy_density).collect();
        levels.sort_by(|a, b| a.total_cmp(b));
        levels.dedup_by(|a, b| (*a - *b).abs() < 1e-8);
        assert_eq!(levels.len(), n);
        let mut want: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        want.sort_by(|a, b| a.total_cmp(b));
        for (a, b) in levels.iter().zip(&want) {
            assert!((a - b).abs() < 1e-8, "{a} {b}");
        }
    }

    #[test]
    fn pure_three_spin_radial_identity() {
        let f = sample_field(&Mixture::pure(3), 12, 5, 0).unwrap();
        let pts = find_critical_points(&f, 1.0, &NewtonConfig { restarts: 20, ..Default::default() });
        assert!(!pts.is_empty());
        for p in pts {
            assert!((p.radial_derivative - 3.0 * p.energy_density).abs() < 1e-6);
            assert!(p.tangential_residual <= 1e-8);
        }
    }

    #[test]
    fn gibbs_at_infinite_temperature_is_uniform() {
        let m = Mixture::pure(2);
        let f = sample_field(&m, 40, 2, 0).unwrap();
        let cfg = GibbsConfig { samples: 100, burn_in: 500, thin: 10, ..Default::default() };
        let a = gibbs_mcmc(&f, 0.0, &cfg);
        let b = gibbs_mcmc(&f, 0.0, &GibbsConfig { chain: 1, ..cfg.clone() });
        for s in &a.samples {
            assert!((dot(s, s) - 40.0).abs() < 1e-10);
        }
        let h = overlap_statistics(&a, &b, 40).unwrap();
        assert!(h.mean.abs() < 0.05 && (h.std - 40f64.sqrt().recip()).abs() < 0.05, "{} {}", h.mean, h.std);
    }

    #[test]
    fn conditioning_kernels_match_sampling() {
        let checks = validate_conditioning(20_000, 11).unwrap();
        // About 64 checks at three standard errors: a stray flag is expected
        // now and then, a large deviation is not.
        let flagged = checks.iter().filter(|c| !c.passed).count();
        assert!(flagged <= 2, "{flagged} of {}", checks.len());
        for c in &checks {
            assert!((c.empirical - c.analytic).abs() <= 4.5 * c.se, "{c:?}");
        }
    }

    #[test]
    fn dump_round_trip() {
        let rows = vec![vec![1.0, -2.5], vec![0.25, 3.0]];
        let mut buf = Vec::new();
        write_samples(&mut buf, 2, &rows).unwrap();
        assert_eq!(buf.len(), 16 + 32);
        assert_eq!(&buf[..4], b"SGMC");
        let (n, back) = read_samples(&buf[..]).unwrap();
        assert_eq!((n, back), (2, rows));
    }

    #[test]
    fn semicircle_distance_of_goe() {
        let mut rng = stream(1, 2, 3);
        let m = sample_goe(300, &mut rng);
        let eigs: Vec<f64> = m.symmetric_eigen().eigenvalues.iter().copied().collect();
        assert!(semicircle_ks(&eigs) < 0.05);
    }
}
