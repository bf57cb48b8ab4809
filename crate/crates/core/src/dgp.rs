//! Synthetic clustered labor-market data with a known effect function.
//!
//! Workers are nested in establishments, which are nested in
//! (industry x location) markets. Whole establishments close, so treatment is
//! constant within a cluster. The effect on normalized earnings is linear in
//! centred covariates, plus optional pairwise interactions and an age > 50
//! threshold term; centring makes the population mean effect equal the
//! intercept. Every worker also carries a structural decomposition of the
//! effect into re-employment probability, benefit level and lost rents.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{outcome_column, CovariateKind, CovariateLevel, CovariateSpec, Dataset, HORIZONS};
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::stats;

/// Effect on normalized earnings: `-(1-q) b - beta p`.
pub fn theory_effect(q: f64, b: f64, beta: f64, p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Domain(format!("re-employment probability q = {q} outside [0, 1]")));
    }
    if !(0.0..=1.0).contains(&b) {
        return Err(Error::Domain(format!("benefit level b = {b} outside [0, 1]")));
    }
    Ok(-(1.0 - q) * b - beta * p)
}

/// Wage bargained with an outside option of re-employment at `expected_alt_wage`
/// with probability `q`, benefit `b` otherwise, plus a share `beta` of rents `p`.
/// `omega` is accepted for symmetry with [`WageParams`] and does not enter.
pub fn structural_wage(_omega: f64, beta: f64, p: f64, q: f64, expected_alt_wage: f64, b: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Domain(format!("re-employment probability q = {q} outside [0, 1]")));
    }
    Ok(q * expected_alt_wage + (1.0 - q) * b + beta * p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WageParams {
    pub omega: f64,
    pub beta: f64,
    pub p: f64,
}

impl WageParams {
    pub fn wage(&self) -> f64 {
        self.omega + self.beta * self.p
    }
}

/// Inclusive `[min, max]` count range, serialized as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRange(pub usize, pub usize);

impl CountRange {
    fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        rng.random_range(self.0..=self.1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InteractionTerm {
    pub covariates: [String; 2],
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DgpConfig {
    pub n_markets: usize,
    pub establishments_per_market: CountRange,
    pub workers_per_establishment: CountRange,
    pub closure_rate: f64,
    /// Population mean effect on `y_1`.
    pub effect_intercept: f64,
    /// Slopes on centred covariates.
    pub effect_coefficients: BTreeMap<String, f64>,
    /// Weight on the centred indicator `age > 50`.
    pub threshold_weight: f64,
    pub interaction_terms: Vec<InteractionTerm>,
    /// Outcome noise scale.
    pub noise_sd: f64,
    /// Share of outcome noise variance that is an establishment random intercept.
    pub cluster_share: f64,
    /// Strength of covariate-dependent closure risk (0 gives randomized closures).
    pub confounding: f64,
    /// Correlation between latent trajectory quality and the true effect.
    /// Positive values give workers with larger losses flatter counterfactual paths.
    pub quality_correlation: f64,
    pub trajectory_slope: f64,
    /// Common counterfactual earnings growth per year.
    pub growth: f64,
    /// Share of the effect already realized in the event year.
    pub event_year_share: f64,
    /// Yearly decay of the effect after `t+1`.
    pub persistence: f64,
    /// Probability that a displaced worker has zero earnings at `t+1`.
    pub nonemployment_share: f64,
    pub insurance_base: f64,
    pub insurance_slope: f64,
    pub first_event_year: i32,
    pub n_event_years: usize,
    pub seed: u64,
}

/// Covariates emitted by the generator with their centring constants.
pub const DGP_COVARIATES: [(&str, f64); 10] = [
    ("age", 42.0),
    ("female", 0.4),
    ("schooling", 13.0),
    ("tenure", 6.5),
    ("routine", 0.5),
    ("plant_wage_premium", 0.0),
    ("manufacturing", 0.3),
    ("industry_trend", 0.0),
    ("pop_density", 0.0),
    ("local_unemployment", 0.07),
];

const AGE_THRESHOLD: f64 = 50.0;
/// P(age > 50) for age ~ U[24, 60].
const AGE_THRESHOLD_SHARE: f64 = 10.0 / 36.0;
const EMPLOYMENT_CUTOFF: f64 = 0.25;
const BARGAINING_SHARE: f64 = 0.5;
const RENT_SHARE: f64 = 0.3;
const BENEFIT_LEVEL: f64 = 0.8;

impl Default for DgpConfig {
    fn default() -> Self {
        let effect_coefficients = [
            ("age", -0.005),
            ("schooling", 0.02),
            ("tenure", -0.015),
            ("routine", -0.15),
            ("plant_wage_premium", -0.3),
            ("manufacturing", -0.08),
            ("industry_trend", 0.15),
            ("pop_density", 0.04),
            ("local_unemployment", -2.0),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        Self {
            n_markets: 100,
            establishments_per_market: CountRange(20, 20),
            workers_per_establishment: CountRange(10, 10),
            closure_rate: 0.25,
            effect_intercept: -0.24,
            effect_coefficients,
            threshold_weight: -0.12,
            interaction_terms: vec![InteractionTerm { covariates: ["age".into(), "routine".into()], weight: -0.01 }],
            noise_sd: 0.15,
            cluster_share: 0.3,
            confounding: 0.5,
            quality_correlation: 0.5,
            trajectory_slope: 0.02,
            growth: 0.02,
            event_year_share: 0.3,
            persistence: 0.885,
            nonemployment_share: 0.0,
            insurance_base: 0.5,
            insurance_slope: 0.3,
            first_event_year: 2000,
            n_event_years: 5,
            seed: 20_240_601,
        }
    }
}

impl DgpConfig {
    /// A randomized design with no effect heterogeneity at all.
    pub fn null_effect() -> Self {
        Self {
            effect_intercept: 0.0,
            effect_coefficients: BTreeMap::new(),
            threshold_weight: 0.0,
            interaction_terms: Vec::new(),
            confounding: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_markets == 0 {
            return bad("n_markets must be positive".into());
        }
        for (name, r) in [
            ("establishments_per_market", self.establishments_per_market),
            ("workers_per_establishment", self.workers_per_establishment),
        ] {
            if r.0 == 0 || r.0 > r.1 {
                return bad(format!("{name} = [{}, {}] is empty", r.0, r.1));
            }
        }
        if !(self.closure_rate > 0.0 && self.closure_rate < 1.0) {
            return bad(format!("closure_rate = {} outside (0, 1)", self.closure_rate));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return bad(format!("noise_sd = {} must be a nonnegative number", self.noise_sd));
        }
        for (name, v) in [
            ("cluster_share", self.cluster_share),
            ("event_year_share", self.event_year_share),
            ("persistence", self.persistence),
            ("insurance_base", self.insurance_base),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&self.nonemployment_share) {
            return bad(format!("nonemployment_share = {} outside [0, 1)", self.nonemployment_share));
        }
        if !(-1.0..=1.0).contains(&self.quality_correlation) {
            return bad(format!("quality_correlation = {} outside [-1, 1]", self.quality_correlation));
        }
        if self.n_event_years == 0 {
            return bad("n_event_years must be positive".into());
        }
        let known = |n: &str| DGP_COVARIATES.iter().any(|(c, _)| *c == n);
        for name in self.effect_coefficients.keys() {
            if !known(name) {
                return bad(format!("effect coefficient for unknown covariate `{name}`"));
            }
        }
        for term in &self.interaction_terms {
            for name in &term.covariates {
                if !known(name) {
                    return bad(format!("interaction with unknown covariate `{name}`"));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("dgp config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn centre(name: &str) -> f64 {
        DGP_COVARIATES.iter().find(|(c, _)| *c == name).map(|(_, m)| *m).unwrap_or(0.0)
    }

    /// Linear-index effect at a covariate vector ordered as [`DGP_COVARIATES`].
    pub fn linear_effect(&self, x: &[f64]) -> f64 {
        let value = |name: &str| {
            let j = DGP_COVARIATES.iter().position(|(c, _)| *c == name).expect("validated covariate");
            x[j] - Self::centre(name)
        };
        let mut tau = self.effect_intercept;
        for (name, w) in &self.effect_coefficients {
            tau += w * value(name);
        }
        for term in &self.interaction_terms {
            tau += term.weight * value(&term.covariates[0]) * value(&term.covariates[1]);
        }
        let above = if x[0] > AGE_THRESHOLD { 1.0 } else { 0.0 };
        tau + self.threshold_weight * (above - AGE_THRESHOLD_SHARE)
    }

    /// Effect path by event-time horizon for a `t+1` effect `tau`.
    pub fn effect_path(&self, tau: f64, horizon: i32) -> f64 {
        match horizon {
            h if h < 0 => 0.0,
            0 => self.event_year_share * tau,
            h => tau * self.persistence.powi(h - 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRecord {
    pub worker_id: u64,
    pub event_year: i32,
    pub cluster_id: u64,
    pub treated: bool,
    /// True effect on `y_1`.
    pub true_tau: f64,
    /// Linear-index effect before the non-employment channel.
    pub tau_linear: f64,
    pub q: f64,
    pub b: f64,
    pub beta: f64,
    pub p: f64,
    /// Whether `true_tau = -(1-q) b - beta p` holds for this worker.
    pub structural: bool,
    /// Share of the earnings effect absorbed before disposable income.
    pub insurance: f64,
}

/// Decompose a loss into (q, b, beta, p). A fixed share of the loss is lost
/// rents; the rest is the non-employment gap at the default benefit level.
fn decompose(tau: f64) -> (f64, f64, f64, f64, bool) {
    if tau > 0.0 {
        return (1.0, 0.0, 0.0, 0.0, false);
    }
    let loss = -tau;
    let p = RENT_SHARE * loss / BARGAINING_SHARE;
    let gap = (1.0 - RENT_SHARE) * loss;
    let (q, b) = if gap <= BENEFIT_LEVEL { (1.0 - gap / BENEFIT_LEVEL, BENEFIT_LEVEL) } else { (0.0, gap) };
    (q, b.min(1.0), BARGAINING_SHARE, p, b <= 1.0)
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

struct Market {
    industry: usize,
    location: usize,
}

pub fn generate_panel(config: &DgpConfig) -> Result<(Dataset, Vec<OracleRecord>)> {
    config.validate()?;
    let seed = config.seed;

    let n_ind = (config.n_markets as f64).sqrt().ceil() as usize;
    let n_loc = config.n_markets.div_ceil(n_ind);
    let markets: Vec<Market> =
        (0..config.n_markets).map(|m| Market { industry: m / n_loc, location: m % n_loc }).collect();

    let mut rng = substream(seed, "dgp/industries", 0);
    let n_manufacturing = (0.3 * n_ind as f64).round() as usize;
    let industry_trend: Vec<f64> = (0..n_ind).map(|_| rng.random_range(-0.5..0.5)).collect();
    let mut rng = substream(seed, "dgp/locations", 0);
    let locations: Vec<(f64, f64)> = (0..n_loc).map(|_| (normal(&mut rng), rng.random_range(0.03..0.11))).collect();

    let mut est_rng = substream(seed, "dgp/establishments", 0);
    let mut wrk_rng = substream(seed, "dgp/workers", 0);
    let base_logit = (config.closure_rate / (1.0 - config.closure_rate)).ln();
    let trend_sd = (1.0f64 / 12.0).sqrt();

    let mut ds = Dataset::default();
    let mut xs: Vec<[f64; 10]> = Vec::new();
    let mut cluster_noise: Vec<f64> = Vec::new();
    let mut est_id = 0u64;
    let mut worker_id = 0u64;
    for market in &markets {
        let n_est = config.establishments_per_market.sample(&mut est_rng);
        let manufacturing = if market.industry < n_manufacturing { 1.0 } else { 0.0 };
        let trend = industry_trend[market.industry];
        let (density, unemployment) = locations[market.location];
        for _ in 0..n_est {
            est_id += 1;
            let premium = 0.1 * normal(&mut est_rng);
            let year = config.first_event_year + est_rng.random_range(0..config.n_event_years) as i32;
            let risk = -(premium / 0.1 + trend / trend_sd) / std::f64::consts::SQRT_2;
            let closes = est_rng.random::<f64>() < logistic(base_logit + config.confounding * risk);
            let u_c = normal(&mut est_rng);
            let n_workers = config.workers_per_establishment.sample(&mut est_rng);
            for _ in 0..n_workers {
                worker_id += 1;
                let age: f64 = wrk_rng.random_range(24.0..60.0);
                let female = if wrk_rng.random::<f64>() < 0.4 { 1.0 } else { 0.0 };
                let schooling = wrk_rng.random_range(9..=17) as f64;
                let tenure = wrk_rng.random_range(3..=10) as f64;
                let routine: f64 = wrk_rng.random();
                xs.push([
                    age,
                    female,
                    schooling,
                    tenure,
                    routine,
                    premium,
                    manufacturing,
                    trend,
                    density,
                    unemployment,
                ]);
                ds.worker_id.push(worker_id);
                ds.event_year.push(year);
                ds.cluster_id.push(est_id);
                ds.group_id.push(est_id);
                ds.industry.push(100 + market.industry as u32);
                ds.location.push(1 + market.location as u32);
                ds.treated.push(closes);
                ds.matched_to.push(None);
                cluster_noise.push(u_c);
            }
        }
    }
    let n = xs.len();
    if n == 0 {
        return Err(Error::Config("configuration generates no workers".into()));
    }

    let tau_linear: Vec<f64> = xs.iter().map(|x| config.linear_effect(x)).collect();
    let centred: Vec<f64> = tau_linear.iter().map(|t| t - config.effect_intercept).collect();
    let scale = stats::sd(&centred);
    let z: Vec<f64> =
        if scale > 0.0 && scale.is_finite() { centred.iter().map(|c| c / scale).collect() } else { vec![0.0; n] };

    let rho = config.quality_correlation;
    let loc_move = Bernoulli::new(0.2).expect("valid probability");
    let ind_move = Bernoulli::new(0.5).expect("valid probability");
    let ctl_move = Bernoulli::new(0.05).expect("valid probability");
    let mut out_rng = substream(seed, "dgp/outcomes", 0);
    let sd_c = config.noise_sd * config.cluster_share.sqrt();
    let sd_e = config.noise_sd * (1.0 - config.cluster_share).sqrt();

    let mut outcomes: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for prefix in ["y", "emp", "locmove", "indmove", "disp"] {
        for h in HORIZONS {
            outcomes.insert(outcome_column(prefix, h), Vec::with_capacity(n));
        }
    }
    let mut oracle = Vec::with_capacity(n);
    for i in 0..n {
        let w = ds.treated[i];
        let quality = rho * z[i] + (1.0 - rho * rho).sqrt() * normal(&mut out_rng);
        let nonemployed = w && config.nonemployment_share > 0.0 && out_rng.random::<f64>() < config.nonemployment_share;
        let moved_loc = if w { loc_move.sample(&mut out_rng) } else { ctl_move.sample(&mut out_rng) };
        let moved_ind = if w { ind_move.sample(&mut out_rng) } else { ctl_move.sample(&mut out_rng) };
        let loss = (-tau_linear[i]).max(0.0);
        let insurance = (config.insurance_base + config.insurance_slope * loss).clamp(0.0, 0.95);
        for h in HORIZONS {
            let (y0, noise) = if h == -1 {
                (1.0, 0.0)
            } else {
                let e = sd_c * cluster_noise[i] + sd_e * normal(&mut out_rng);
                let t = f64::from(h + 1);
                (1.0 + config.growth * t + config.trajectory_slope * quality * t, e)
            };
            let y0 = y0 + noise;
            let effect = if w { config.effect_path(tau_linear[i], h) } else { 0.0 };
            let y = if nonemployed && h == 1 { 0.0 } else { y0 + effect };
            let emp = if y >= EMPLOYMENT_CUTOFF { 1.0 } else { 0.0 };
            let after = h >= 1;
            let lm = if after && moved_loc { 1.0 } else { 0.0 };
            let im = if emp == 0.0 {
                f64::NAN
            } else if after && moved_ind {
                1.0
            } else {
                0.0
            };
            let disp = 1.0 + 0.6 * (y0 - 1.0) + effect * (1.0 - insurance);
            for (prefix, v) in [("y", y), ("emp", emp), ("locmove", lm), ("indmove", im), ("disp", disp)] {
                outcomes.get_mut(&outcome_column(prefix, h)).expect("inserted").push(v);
            }
        }

        let pi = config.nonemployment_share;
        let true_tau = if pi > 0.0 {
            let m0 = 1.0 + 2.0 * config.growth + 2.0 * config.trajectory_slope * rho * z[i];
            (1.0 - pi) * tau_linear[i] - pi * m0
        } else {
            tau_linear[i]
        };
        let (q, b, beta, p, feasible) = decompose(true_tau);
        oracle.push(OracleRecord {
            worker_id: ds.worker_id[i],
            event_year: ds.event_year[i],
            cluster_id: ds.cluster_id[i],
            treated: w,
            true_tau,
            tau_linear: tau_linear[i],
            q,
            b,
            beta,
            p,
            structural: feasible,
            insurance,
        });
    }

    for (j, (name, _)) in DGP_COVARIATES.iter().enumerate() {
        let column: Vec<f64> = xs.iter().map(|x| x[j]).collect();
        let kind = if stats::is_dummy(&column) { CovariateKind::Dummy } else { CovariateKind::Continuous };
        let level = match *name {
            "age" | "female" => CovariateLevel::Worker,
            "schooling" | "tenure" => CovariateLevel::HumanCapital,
            "routine" | "plant_wage_premium" => CovariateLevel::Job,
            "manufacturing" | "industry_trend" => CovariateLevel::Industry,
            _ => CovariateLevel::Location,
        };
        ds.add_covariate(CovariateSpec::new(name, kind, level), column);
    }
    ds.outcomes = outcomes;
    ds.validate()?;
    Ok((ds, oracle))
}

pub fn write_oracle_csv(path: &Path, oracle: &[OracleRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    for rec in oracle {
        wtr.serialize(rec)?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_oracle_csv(path: &Path) -> Result<Vec<OracleRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}
