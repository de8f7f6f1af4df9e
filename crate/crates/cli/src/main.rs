//! `spinglass`: command line front end for the spherical spin glass toolkit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use serde_json::{json, Value};

use spinglass::franz_parisi::{self, FpResult, Regime};
use spinglass::landscape::{self, RCentre};
use spinglass::mc;
use spinglass::rsb::{self, SolverConfig};
use spinglass::{Error, Mixture};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
enum Format {
    Json,
    Csv,
}

/// Everything a run depends on. Written by `--emit-config`, read by `--config`;
/// flags given on the command line override the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunConfig {
    command: String,
    mixture: Option<Mixture>,
    params: BTreeMap<String, Value>,
    seed: u64,
    out: Option<PathBuf>,
    format: Option<Format>,
}

#[derive(Parser)]
#[command(name = "spinglass", version, about = "Spherical mixed p-spin glass toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parisi minimizers at finite or zero temperature.
    Parisi {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        p: ParisiParams,
    },
    /// Complexity surface, ground-state curve and identity reports.
    Landscape {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        p: LandscapeParams,
    },
    /// Franz-Parisi potential on a grid of overlaps.
    Fp {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        p: FpParams,
    },
    /// Monte Carlo runs at small N.
    Mc {
        #[command(subcommand)]
        cmd: McCmd,
    },
}

#[derive(Subcommand)]
enum McCmd {
    /// Compare every analytic conditional kernel with exact sampling.
    ValidateConditioning {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        p: ValidateParams,
    },
    /// Exploratory critical-point histogram.
    Complexity {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        p: ComplexityParams,
    },
    /// Metropolis chains for the Gibbs measure of one sampled field.
    Gibbs {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        p: GibbsParams,
    },
}

#[derive(Args)]
struct Common {
    /// Mixture JSON file, e.g. {"coeffs": {"2": 0.5, "3": 0.5}}.
    #[arg(long)]
    mixture: Option<PathBuf>,
    /// RunConfig JSON; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Print the resolved RunConfig and exit.
    #[arg(long)]
    emit_config: bool,
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ParisiParams {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    beta: Option<f64>,
    #[arg(long)]
    #[serde(default, skip_serializing_if = "is_false")]
    zero_temp: bool,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    k_max: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    starts: Option<usize>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct LandscapeParams {
    #[arg(long)]
    #[serde(default, skip_serializing_if = "is_false")]
    theta: bool,
    #[arg(long)]
    #[serde(default, skip_serializing_if = "is_false")]
    gs: bool,
    #[arg(long)]
    #[serde(default, skip_serializing_if = "is_false")]
    identities: bool,
    /// Points per axis of the complexity grid.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    grid: Option<usize>,
    /// Energy range `lo:hi` of the complexity grid.
    #[arg(long, allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    e_range: Option<String>,
    /// Radial derivative range `lo:hi` of the complexity grid.
    #[arg(long, allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    r_range: Option<String>,
    /// Radii `lo:hi:step` of the ground-state curve.
    #[arg(long, allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    qgrid: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    beta: Option<f64>,
    /// Window half-width of the chain bound.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    eps: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    k_max: Option<usize>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FpParams {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    beta: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    beta_prime: Option<f64>,
    /// Overlaps `lo:hi:step`.
    #[arg(long, allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    r_grid: Option<String>,
    /// Report the high and low temperature branches side by side.
    #[arg(long)]
    #[serde(default, skip_serializing_if = "is_false")]
    both_regimes: bool,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ValidateParams {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    samples: Option<usize>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ComplexityParams {
    #[arg(long = "N", alias = "n")]
    #[serde(skip_serializing_if = "Option::is_none")]
    n: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    fields: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    q: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    restarts: Option<usize>,
    /// Energy bins `lo:hi:count`.
    #[arg(long, allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    e_bins: Option<String>,
    /// Radial derivative bins `lo:hi:count`.
    #[arg(long, allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    r_bins: Option<String>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct GibbsParams {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    beta: Option<f64>,
    #[arg(long = "N", alias = "n")]
    #[serde(skip_serializing_if = "Option::is_none")]
    n: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    samples: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    burn_in: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    thin: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    step: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    bins: Option<usize>,
    /// Binary dump of the first chain's samples.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    dump: Option<PathBuf>,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure { code: e.exit_code() as u8, msg: e.to_string() }
    }
}

fn bad(msg: impl Into<String>) -> Failure {
    Failure { code: 1, msg: msg.into() }
}

type Res<T> = std::result::Result<T, Failure>;

fn read_json<T: DeserializeOwned>(path: &Path, what: &str) -> Res<T> {
    let text = std::fs::read_to_string(path).map_err(|e| bad(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| bad(format!("malformed {what} {}: {e}", path.display())))
}

/// Merges the config file, then the flags, into one RunConfig.
fn resolve<P: Serialize>(command: &str, common: &Common, params: &P) -> Res<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            let c: RunConfig = read_json(p, "config")?;
            if c.command != command {
                return Err(bad(format!("config is for `{}`, not `{command}`", c.command)));
            }
            c
        }
        None => RunConfig { command: command.into(), mixture: None, params: BTreeMap::new(), seed: 42, out: None, format: None },
    };
    if let Some(p) = &common.mixture {
        cfg.mixture = Some(read_json(p, "mixture")?);
    }
    if let Value::Object(flags) = serde_json::to_value(params).map_err(|e| bad(e.to_string()))? {
        cfg.params.extend(flags);
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if common.out.is_some() {
        cfg.out = common.out.clone();
    }
    if common.format.is_some() {
        cfg.format = common.format;
    }
    Ok(cfg)
}

fn params<P: DeserializeOwned>(cfg: &RunConfig) -> Res<P> {
    let map: serde_json::Map<String, Value> = cfg.params.clone().into_iter().collect();
    serde_json::from_value(Value::Object(map)).map_err(|e| bad(format!("bad parameters: {e}")))
}

fn mixture(cfg: &RunConfig) -> Res<&Mixture> {
    cfg.mixture.as_ref().ok_or_else(|| bad("a mixture is required (--mixture FILE)"))
}

fn solver(cfg: &RunConfig, k_max: Option<usize>, starts: Option<usize>) -> SolverConfig {
    let d = SolverConfig::default();
    SolverConfig { k_max: k_max.unwrap_or(d.k_max), starts: starts.unwrap_or(d.starts), seed: cfg.seed, ..d }
}

fn write_out(path: Option<&Path>, text: &str) -> Res<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| bad(format!("cannot write {}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable report");
    s.push('\n');
    s
}

/// `lo:hi` or `lo:hi:step` with inclusive, rounded grid points.
fn parse_range(s: &str, with_step: bool) -> Res<Vec<f64>> {
    let parts: Vec<f64> = s.split(':').map(|x| x.trim().parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|e| bad(format!("bad range `{s}`: {e}")))?;
    match (with_step, parts.as_slice()) {
        (false, [a, b]) if a < b => Ok(vec![*a, *b]),
        (true, [a, b, h]) if *h > 0.0 && a <= b => {
            let k = ((b - a) / h + 1e-9).floor() as usize;
            Ok((0..=k).map(|i| ((a + i as f64 * h) * 1e12).round() / 1e12).collect())
        }
        _ => Err(bad(format!("bad range `{s}`"))),
    }
}

/// `lo:hi:count` into `count + 1` edges.
fn parse_bins(s: &str) -> Res<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    let err = || bad(format!("bad bins `{s}`, expected lo:hi:count"));
    if parts.len() != 3 {
        return Err(err());
    }
    let lo: f64 = parts[0].parse().map_err(|_| err())?;
    let hi: f64 = parts[1].parse().map_err(|_| err())?;
    let k: usize = parts[2].parse().map_err(|_| err())?;
    if !(lo < hi) || k == 0 {
        return Err(err());
    }
    Ok((0..=k).map(|i| lo + (hi - lo) * i as f64 / k as f64).collect())
}

fn cmd_parisi(cfg: &RunConfig) -> Res<()> {
    let p: ParisiParams = params(cfg)?;
    let mix = mixture(cfg)?;
    let sc = solver(cfg, p.k_max, p.starts);
    if p.beta.is_none() && !p.zero_temp {
        return Err(bad("need --beta or --zero-temp"));
    }
    let mut report = json!({ "mixture": mix });
    let mut rows = vec!["solver,quantity,value".to_string()];
    if let Some(beta) = p.beta {
        let sol = rsb::cs_minimize(mix, beta, &sc)?;
        rows.push(format!("cs,beta,{beta}"));
        rows.push(format!("cs,value,{}", sol.value));
        rows.push(format!("cs,k,{}", sol.k));
        rows.push(format!("cs,certificate_gap,{}", sol.certificate.gap));
        for (q, x) in sol.order.atoms() {
            rows.push(format!("cs,atom_{q},{x}"));
        }
        report["beta"] = json!(beta);
        report["cs"] = json!({ "atoms": sol.order.atoms(), "value": sol.value, "k": sol.k, "order": sol.order, "certificate": sol.certificate });
    }
    if p.zero_temp {
        let sol = rsb::zt_minimize(mix, &sc)?;
        rows.push(format!("zt,e_star,{}", sol.value));
        rows.push(format!("zt,c,{}", sol.order.c));
        rows.push(format!("zt,certificate_gap,{}", sol.certificate.gap));
        report["zt"] = json!({ "e_star": sol.value, "alpha": sol.order, "certificate": sol.certificate });
    }
    let text = match cfg.format.unwrap_or(Format::Json) {
        Format::Json => pretty(&report),
        Format::Csv => rows.join("\n") + "\n",
    };
    write_out(cfg.out.as_deref(), &text)
}

fn cmd_landscape(cfg: &RunConfig) -> Res<()> {
    let p: LandscapeParams = params(cfg)?;
    let mix = mixture(cfg)?;
    let sc = solver(cfg, p.k_max, None);
    if [p.theta, p.gs, p.identities].iter().filter(|&&b| b).count() != 1 {
        return Err(bad("choose exactly one of --theta, --gs, --identities"));
    }
    if p.theta {
        let n = p.grid.unwrap_or(101);
        if n < 2 {
            return Err(bad("--grid needs at least 2 points"));
        }
        let e = match &p.e_range {
            Some(s) => parse_range(s, false)?,
            None => vec![0.0, 2.0 * mix.value(1.0).sqrt()],
        };
        let r = match &p.r_range {
            Some(s) => parse_range(s, false)?,
            None => vec![0.0, 3.0 * (mix.d2(1.0) + mix.d1(1.0)).sqrt()],
        };
        let surf = landscape::theta_surface(mix, (e[0], e[1]), (r[0], r[1]), n);
        let text = match cfg.format.unwrap_or(Format::Csv) {
            Format::Csv => {
                let mut s = String::from("e,r,theta,branch\n");
                for t in &surf {
                    let _ = writeln!(s, "{},{},{},{:?}", t.e, t.r, t.theta, t.branch);
                }
                s
            }
            Format::Json => pretty(&surf),
        };
        return write_out(cfg.out.as_deref(), &text);
    }
    if p.gs {
        let qs = parse_range(p.qgrid.as_deref().unwrap_or("0.05:1:0.05"), true)?;
        if qs.iter().any(|&q| !(q > 0.0 && q <= 1.0)) {
            return Err(bad("radii must lie in (0,1]"));
        }
        let fmt = cfg.format.unwrap_or(Format::Csv);
        let render = |pts: &[landscape::GroundStatePoint]| match fmt {
            Format::Csv => {
                let mut s = String::from("q,e_star,r_star,certified\n");
                for g in pts {
                    let _ = writeln!(s, "{},{},{},{}", g.q, g.e_star, g.r_star, g.certified);
                }
                s
            }
            Format::Json => pretty(&pts),
        };
        return match landscape::ground_state_curve(mix, &qs, &sc) {
            Ok(pts) => write_out(cfg.out.as_deref(), &render(&pts)),
            Err(partial) => {
                let partial_path = cfg.out.as_ref().map(|o| {
                    let mut s = o.clone().into_os_string();
                    s.push(".partial");
                    PathBuf::from(s)
                });
                write_out(partial_path.as_deref(), &render(&partial.points))?;
                Err(Failure { code: 2, msg: format!("ground state failed at q = {}: {}", partial.failed_q, partial.error) })
            }
        };
    }
    let beta = p.beta.ok_or_else(|| bad("--identities needs --beta"))?;
    let eps = p.eps.unwrap_or(0.01);
    let esrs = landscape::identity_esrs(mix, beta, &sc)?;
    let fprime = landscape::fprime_identity(mix, beta, &sc)?;
    let sol = rsb::cs_minimize(mix, beta, &sc)?;
    let lower = landscape::chain_bound(mix, &sol, eps, RCentre::Lower, &sc)?;
    let upper = landscape::chain_bound(mix, &sol, eps, RCentre::Upper, &sc)?;
    let report = json!({
        "mixture": mix,
        "beta": beta,
        "identity_esrs": esrs,
        "fprime_identity": fprime,
        "chain_bound": { "eps": eps, "lower_centre": lower, "upper_centre": upper },
    });
    write_out(cfg.out.as_deref(), &pretty(&report))
}

#[derive(Serialize)]
struct FpRow {
    r: f64,
    regime: Regime,
    value: f64,
    rho_star: Option<f64>,
    mean: f64,
    free_energy: f64,
    volume: f64,
    field_mode: bool,
    certified: bool,
    error: Option<String>,
}

impl FpRow {
    fn ok(res: &FpResult) -> Self {
        FpRow {
            r: res.r,
            regime: res.regime,
            value: res.value,
            rho_star: res.rho_star,
            mean: res.terms.mean,
            free_energy: res.terms.free_energy,
            volume: res.terms.volume,
            field_mode: res.field_mode,
            certified: res.terms.certified,
            error: None,
        }
    }

    fn failed(r: f64, regime: Regime, e: &Error) -> Self {
        FpRow {
            r,
            regime,
            value: f64::NAN,
            rho_star: None,
            mean: f64::NAN,
            free_energy: f64::NAN,
            volume: f64::NAN,
            field_mode: false,
            certified: false,
            error: Some(e.to_string()),
        }
    }
}

fn cmd_fp(cfg: &RunConfig) -> Res<()> {
    let p: FpParams = params(cfg)?;
    let mix = mixture(cfg)?;
    let sc = solver(cfg, None, None);
    let beta = p.beta.ok_or_else(|| bad("--beta is required"))?;
    let beta_prime = p.beta_prime.unwrap_or(beta);
    let rs = parse_range(p.r_grid.as_deref().unwrap_or("-0.9:0.9:0.1"), true)?;
    if rs.iter().any(|r| r.abs() >= 1.0) {
        return Err(bad("overlaps must satisfy |r| < 1"));
    }
    let detected = franz_parisi::detect_regime(mix, beta)?;
    let regimes: Vec<Regime> = if p.both_regimes { vec![Regime::High, Regime::Low] } else { vec![detected] };
    let setup = regimes.contains(&Regime::Low).then(|| franz_parisi::fp_low_setup(mix, beta, &sc));
    let mut rows = Vec::new();
    let mut first_error: Option<Error> = None;
    for &r in &rs {
        for &regime in &regimes {
            let res = match regime {
                Regime::High if p.both_regimes => franz_parisi::fp_high_formula(mix, beta, beta_prime, r, &sc),
                Regime::High => franz_parisi::fp_high(mix, beta, beta_prime, r, &sc),
                Regime::Low => match setup.as_ref().expect("low setup") {
                    Ok(s) => franz_parisi::fp_low_with(mix, s, beta_prime, r, &sc),
                    Err(e) => Err(clone_error(e)),
                },
            };
            match res {
                Ok(v) => rows.push(FpRow::ok(&v)),
                Err(e) => {
                    rows.push(FpRow::failed(r, regime, &e));
                    first_error.get_or_insert(e);
                }
            }
        }
    }
    let text = match cfg.format.unwrap_or(Format::Csv) {
        Format::Csv => {
            let mut s = String::from("r,regime,value,rho_star,mean,free_energy,volume,field_mode,certified\n");
            for row in &rows {
                let rho = row.rho_star.map_or(String::new(), |x| x.to_string());
                let regime = if row.regime == Regime::High { "high" } else { "low" };
                let _ = writeln!(
                    s,
                    "{},{regime},{},{rho},{},{},{},{},{}",
                    row.r, row.value, row.mean, row.free_energy, row.volume, row.field_mode, row.certified
                );
            }
            s
        }
        Format::Json => pretty(&json!({ "mixture": mix, "beta": beta, "beta_prime": beta_prime, "detected": detected, "rows": rows })),
    };
    write_out(cfg.out.as_deref(), &text)?;
    match first_error {
        Some(e) => {
            let code = e.exit_code().max(1) as u8;
            Err(Failure { code, msg: format!("some rows failed; first: {e}") })
        }
        None => Ok(()),
    }
}

/// The setup error is reported once per row.
fn clone_error(e: &Error) -> Error {
    match e {
        Error::SolverFailed(s) => Error::SolverFailed(s.clone()),
        Error::RegimeMismatch(s) => Error::RegimeMismatch(s.clone()),
        Error::KMismatch(s) => Error::KMismatch(s.clone()),
        Error::CapacityExceeded(s) => Error::CapacityExceeded(s.clone()),
        other => Error::InvalidInput(other.to_string()),
    }
}

fn cmd_validate(cfg: &RunConfig) -> Res<()> {
    let p: ValidateParams = params(cfg)?;
    let checks = mc::validate_conditioning(p.samples.unwrap_or(100_000), cfg.seed)?;
    let mut kernels: Vec<(String, usize, usize)> = Vec::new();
    for c in &checks {
        match kernels.iter_mut().find(|k| k.0 == c.kernel) {
            Some(k) => {
                k.1 += 1;
                k.2 += c.passed as usize;
            }
            None => kernels.push((c.kernel.clone(), 1, c.passed as usize)),
        }
    }
    let text = match cfg.format.unwrap_or(Format::Json) {
        Format::Json => {
            let summary: Vec<Value> = kernels.iter().map(|(k, n, ok)| json!({ "kernel": k, "checks": n, "passed": ok, "pass": n == ok })).collect();
            pretty(&json!({ "seed": cfg.seed, "kernels": summary, "checks": checks }))
        }
        Format::Csv => {
            let mut s = String::from("kernel,quantity,analytic,empirical,se,passed\n");
            for c in &checks {
                let _ = writeln!(s, "{},{},{},{},{},{}", c.kernel, c.quantity, c.analytic, c.empirical, c.se, c.passed);
            }
            s
        }
    };
    for (k, n, ok) in &kernels {
        eprintln!("{} {k}: {ok}/{n} checks within 3 standard errors", if n == ok { "PASS" } else { "FAIL" });
    }
    write_out(cfg.out.as_deref(), &text)
}

fn cmd_complexity(cfg: &RunConfig) -> Res<()> {
    let p: ComplexityParams = params(cfg)?;
    let mix = mixture(cfg)?;
    let n = p.n.unwrap_or(24);
    if n > 64 {
        return Err(Failure { code: 3, msg: format!("N = {n} exceeds the complexity cap of 64") });
    }
    let q = p.q.unwrap_or(1.0);
    let e_edges = parse_bins(p.e_bins.as_deref().unwrap_or("0:2:10"))?;
    let r_edges = match &p.r_bins {
        Some(s) => parse_bins(s)?,
        None => parse_bins(&format!("0:{}:10", 3.0 * (mix.d2(1.0) + mix.d1(1.0)).sqrt()))?,
    };
    let newton = mc::NewtonConfig { restarts: p.restarts.unwrap_or(40), seed: cfg.seed, ..Default::default() };
    let hist = mc::empirical_complexity(mix, n, q, &e_edges, &r_edges, p.fields.unwrap_or(20), &newton, cfg.seed)?;
    let theta = hist.theta_on_bins(mix);
    let text = match cfg.format.unwrap_or(Format::Json) {
        Format::Json => pretty(&json!({
            "mixture": mix,
            "seed": cfg.seed,
            "histogram": hist,
            "theta_on_bins": theta.iter().map(|t| if t.is_finite() { json!(t) } else { Value::Null }).collect::<Vec<_>>(),
            "argmax_empirical": hist.argmax(&hist.log_count),
            "argmax_theta": hist.argmax(&theta),
        })),
        Format::Csv => {
            let mut s = String::from("e_lo,e_hi,r_lo,r_hi,mean_count,log_count,ci_lo,ci_hi,theta\n");
            let nr = r_edges.len() - 1;
            for b in 0..hist.mean_counts.len() {
                let (i, j) = (b / nr, b % nr);
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{},{}",
                    e_edges[i], e_edges[i + 1], r_edges[j], r_edges[j + 1], hist.mean_counts[b], hist.log_count[b], hist.ci_lo[b], hist.ci_hi[b], theta[b]
                );
            }
            s
        }
    };
    write_out(cfg.out.as_deref(), &text)
}

fn cmd_gibbs(cfg: &RunConfig) -> Res<()> {
    let p: GibbsParams = params(cfg)?;
    let mix = mixture(cfg)?;
    let n = p.n.unwrap_or(48);
    let beta = p.beta.ok_or_else(|| bad("--beta is required"))?;
    let field = mc::sample_field(mix, n, cfg.seed, 0)?;
    let d = mc::GibbsConfig::default();
    let chain = mc::GibbsConfig {
        samples: p.samples.unwrap_or(d.samples),
        burn_in: p.burn_in.unwrap_or(d.burn_in),
        thin: p.thin.unwrap_or(d.thin),
        step: p.step.unwrap_or(d.step),
        seed: cfg.seed,
        chain: 0,
    };
    let runs: Vec<mc::GibbsRun> = rayon_pair(|c| mc::gibbs_mcmc(&field, beta, &mc::GibbsConfig { chain: c, ..chain.clone() }));
    let hist = mc::overlap_statistics(&runs[0], &runs[1], p.bins.unwrap_or(40))?;
    if let Some(path) = &p.dump {
        let f = std::fs::File::create(path).map_err(|e| bad(format!("cannot write {}: {e}", path.display())))?;
        mc::write_samples(std::io::BufWriter::new(f), n, &runs[0].samples)?;
    }
    let manifest = mc::McManifest { seed: cfg.seed, mixture: mix.clone(), n, beta, chain };
    let diag: Vec<Value> = runs
        .iter()
        .map(|r| {
            let mean_e = r.energies.iter().sum::<f64>() / r.energies.len().max(1) as f64;
            json!({ "acceptance": r.acceptance, "final_step": r.final_step, "autocorr": r.autocorr, "mean_energy": mean_e })
        })
        .collect();
    let text = match cfg.format.unwrap_or(Format::Json) {
        Format::Json => pretty(&json!({ "manifest": manifest, "chains": diag, "overlap": hist })),
        Format::Csv => {
            let mut s = String::from("q_lo,q_hi,count\n");
            for (i, c) in hist.counts.iter().enumerate() {
                let _ = writeln!(s, "{},{},{c}", hist.edges[i], hist.edges[i + 1]);
            }
            s
        }
    };
    write_out(cfg.out.as_deref(), &text)
}

fn rayon_pair<T: Send, F: Fn(u64) -> T + Sync>(f: F) -> Vec<T> {
    let (a, b) = rayon::join(|| f(0), || f(1));
    vec![a, b]
}

fn dispatch<P: Serialize>(name: &str, common: &Common, p: &P, run: fn(&RunConfig) -> Res<()>) -> Res<()> {
    let cfg = resolve(name, common, p)?;
    if common.emit_config {
        print!("{}", pretty(&cfg));
        return Ok(());
    }
    run(&cfg)
}

fn run(cli: Cli) -> Res<()> {
    match &cli.cmd {
        Cmd::Parisi { common, p } => dispatch("parisi", common, p, cmd_parisi),
        Cmd::Landscape { common, p } => dispatch("landscape", common, p, cmd_landscape),
        Cmd::Fp { common, p } => dispatch("fp", common, p, cmd_fp),
        Cmd::Mc { cmd } => match cmd {
            McCmd::ValidateConditioning { common, p } => dispatch("mc validate-conditioning", common, p, cmd_validate),
            McCmd::Complexity { common, p } => dispatch("mc complexity", common, p, cmd_complexity),
            McCmd::Gibbs { common, p } => dispatch("mc gibbs", common, p, cmd_gibbs),
        },
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Some(t) = std::env::var("SPINGLASS_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t.max(1)).build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
