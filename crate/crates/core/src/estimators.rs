//! Monte Carlo estimators on truncated regions.
//!
//! Every estimator runs `replicas` independent trajectories. Replica `i`
//! draws its dynamics from `replica_rng(seed, i, DYNAMICS)` and, in the
//! annealed regime, its environment from `derive_seed(seed, i, ENVIRONMENT)`.
//! Results are gathered in replica order, so they do not depend on the
//! number of worker threads.
//!
//! Replicas that exhaust the update budget are counted as failures and
//! reported in `budget_exceeded`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dynamics::{
    evolve_with, run_online, Configuration, EvolveOptions, SiteTable, TrajectoryStats, Workspace,
    DEFAULT_MAX_UPDATES,
};
use crate::environment::{DistributionSpec, Environment, ModelParams};
use crate::error::{Error, Result};
use crate::graphical::{generate_stream, thin_stream};
use crate::lattice::{LatticePoint, Mode, Region};
use crate::rng::{derive_seed, replica_rng, tag};
use crate::stats::{bernoulli_se, quantile_sorted};

/// Bisection threshold used when none is configured.
pub const DEFAULT_THRESHOLD: f64 = 0.05;

/// Quenched: one environment for all replicas. Annealed: a fresh
/// environment per replica.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Regime {
    Quenched { env_seed: u64 },
    Annealed,
}

impl Regime {
    /// Environment of replica `index` under master seed `seed`.
    pub fn environment(&self, spec: &DistributionSpec, seed: u64, index: u64) -> Environment {
        match *self {
            Regime::Quenched { env_seed } => Environment::new(spec.clone(), env_seed),
            Regime::Annealed => Environment::new(spec.clone(), derive_seed(seed, index, tag::ENVIRONMENT)),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitialSet {
    /// The region origin.
    #[default]
    Origin,
    Points {
        points: Vec<LatticePoint>,
    },
    Ball {
        center: LatticePoint,
        radius: f64,
    },
    /// Every site of the region.
    Full,
}

impl InitialSet {
    pub fn resolve(&self, region: &Region) -> Result<Configuration> {
        match self {
            InitialSet::Origin => Ok(Configuration::singleton(region.origin())),
            InitialSet::Points { points } => Ok(points.iter().copied().collect()),
            InitialSet::Ball { center, radius } => Ok(region.ball(center, *radius)?.into()),
            InitialSet::Full => Ok(region.points()?.collect()),
        }
    }
}

fn default_max_updates() -> u64 {
    DEFAULT_MAX_UPDATES
}

/// What to simulate and how often. The horizon lives in [`ModelParams`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurvivalQuery {
    /// Truncation box; must be finite.
    pub region: Region,
    #[serde(default)]
    pub initial: InitialSet,
    pub regime: Regime,
    pub replicas: u64,
    pub seed: u64,
    #[serde(default = "default_max_updates")]
    pub max_updates: u64,
    /// Worker threads; 0 lets the thread pool decide. Not part of the
    /// experiment's identity.
    #[serde(skip)]
    pub workers: usize,
}

impl SurvivalQuery {
    pub fn new(region: Region, regime: Regime, replicas: u64, seed: u64) -> Self {
        SurvivalQuery {
            region,
            initial: InitialSet::Origin,
            regime,
            replicas,
            seed,
            max_updates: DEFAULT_MAX_UPDATES,
            workers: 0,
        }
    }

    pub fn with_initial(mut self, initial: InitialSet) -> Self {
        self.initial = initial;
        self
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers;
        self
    }

    fn check(&self) -> Result<()> {
        self.region.validate()?;
        if !self.region.is_finite() {
            return Err(Error::Precondition("estimators need a finite truncation box".into()));
        }
        if self.replicas == 0 {
            return Err(Error::Precondition("replicas must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SuppressionSummary {
    pub median: f64,
    pub p90: f64,
    pub max: f64,
}

impl SuppressionSummary {
    fn from_counts(counts: &[u64]) -> Self {
        if counts.is_empty() {
            return Self::default();
        }
        let mut v: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
        v.sort_by(f64::total_cmp);
        SuppressionSummary {
            median: quantile_sorted(&v, 0.5),
            p90: quantile_sorted(&v, 0.9),
            max: v[v.len() - 1],
        }
    }
}

/// A Bernoulli frequency with its provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub replicas: u64,
    pub successes: u64,
    pub std_error: f64,
    pub budget_exceeded: u64,
    /// Arrows lost at the truncation boundary, per replica.
    pub boundary_suppressions: SuppressionSummary,
    pub config_echo: serde_json::Value,
}

impl Estimate {
    pub fn from_counts(successes: u64, replicas: u64, budget_exceeded: u64, echo: serde_json::Value) -> Self {
        let value = if replicas == 0 { 0.0 } else { successes as f64 / replicas as f64 };
        Estimate {
            value,
            replicas,
            successes,
            std_error: bernoulli_se(value, replicas),
            budget_exceeded,
            boundary_suppressions: SuppressionSummary::default(),
            config_echo: echo,
        }
    }

    /// `sqrt(se_a^2 + se_b^2)`.
    pub fn combined_se(&self, other: &Estimate) -> f64 {
        self.std_error.hypot(other.std_error)
    }
}

/// Outcome of one replica.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Replica<O> {
    pub out: O,
    pub budget_exceeded: bool,
    pub suppressions: u64,
}

/// Runs `f(state, i)` for `i in 0..n` on `workers` threads and returns the
/// results in index order.
pub(crate) fn run_indexed<S, T, I, F>(workers: usize, n: u64, init: I, f: F) -> Result<Vec<T>>
where
    T: Send,
    I: Fn() -> S + Sync + Send,
    F: Fn(&mut S, u64) -> Result<T> + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Precondition(format!("cannot start worker pool: {e}")))?;
    pool.install(|| (0..n).into_par_iter().map_init(&init, &f).collect())
}

fn estimate_from<F>(reps: &[Replica<F>], success: impl Fn(&F) -> bool, echo: serde_json::Value) -> Estimate {
    let successes = reps.iter().filter(|r| !r.budget_exceeded && success(&r.out)).count() as u64;
    let budget = reps.iter().filter(|r| r.budget_exceeded).count() as u64;
    let mut e = Estimate::from_counts(successes, reps.len() as u64, budget, echo);
    let counts: Vec<u64> = reps.iter().map(|r| r.suppressions).collect();
    e.boundary_suppressions = SuppressionSummary::from_counts(&counts);
    e
}

/// Initial set must keep a margin of one site from the truncation boundary.
fn check_margin(region: &Region, init: &Configuration) -> Result<()> {
    for p in init.iter() {
        if !region.contains(p) {
            return Err(Error::Precondition(format!("initial site {p} lies outside the region")));
        }
        if region.mode != Mode::FiniteBox {
            if let Some(q) = region.lattice_neighbors(p).find(|q| !region.contains(q)) {
                return Err(Error::Precondition(format!(
                    "initial site {p} touches the truncation boundary (neighbour {q} is outside)"
                )));
            }
        }
    }
    Ok(())
}

/// Online replicas of `init` over `[0, horizon]`, judged by `judge`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn replicate<O, J>(
    q: &SurvivalQuery,
    spec: &DistributionSpec,
    params: &ModelParams,
    horizon: f64,
    init: &Configuration,
    watch: Option<LatticePoint>,
    track_ever: bool,
    judge: J,
) -> Result<Vec<Replica<O>>>
where
    O: Send,
    J: Fn(&SiteTable, &TrajectoryStats, &Workspace) -> O + Sync + Send,
{
    q.check()?;
    spec.validate()?;
    let params = params.with_horizon(horizon.max(f64::MIN_POSITIVE));
    let opts = EvolveOptions {
        watch,
        track_ever,
        max_updates: q.max_updates,
    };
    let shared = match q.regime {
        Regime::Quenched { .. } => {
            let table = SiteTable::build(&q.regime.environment(spec, q.seed, 0), &params, &q.region)?;
            let idx = table.indices(init)?;
            Some((table, idx))
        }
        Regime::Annealed => {
            // validate the geometry once up front
            q.region.indexer()?;
            None
        }
    };
    run_indexed(q.workers, q.replicas, Workspace::default, |ws, i| {
        let mut rng = replica_rng(q.seed, i, tag::DYNAMICS);
        let own;
        let (table, idx) = match &shared {
            Some((t, idx)) => (t, idx),
            None => {
                let t = SiteTable::build(&q.regime.environment(spec, q.seed, i), &params, &q.region)?;
                let idx = t.indices(init)?;
                own = (t, idx);
                (&own.0, &own.1)
            }
        };
        let stats = run_online(table, idx, horizon, &mut rng, &opts, ws);
        Ok(Replica {
            out: judge(table, &stats, ws),
            budget_exceeded: stats.budget_exceeded,
            suppressions: stats.boundary_suppressions,
        })
    })
}

fn echo(op: &str, q: &SurvivalQuery, spec: &DistributionSpec, params: &ModelParams, extra: serde_json::Value) -> serde_json::Value {
    json!({
        "operation": op,
        "query": q,
        "mu": spec,
        "params": params,
        "extra": extra,
    })
}

/// Fraction of replicas with `xi_T` nonempty, `T = params.horizon`.
pub fn survival_probability(q: &SurvivalQuery, spec: &DistributionSpec, params: &ModelParams) -> Result<Estimate> {
    params.validate()?;
    let init = q.initial.resolve(&q.region)?;
    check_margin(&q.region, &init)?;
    let reps = replicate(q, spec, params, params.horizon, &init, None, false, |_, s, _| {
        s.extinction_time.is_none()
    })?;
    Ok(estimate_from(&reps, |&alive| alive, echo("survival", q, spec, params, json!({}))))
}

fn check_window(window: [f64; 2], params: &ModelParams) -> Result<()> {
    let [t1, t2] = window;
    if !(0.0 <= t1 && t1 < t2 && t2 <= params.horizon) {
        return Err(Error::Precondition(format!(
            "window [{t1}, {t2}] must satisfy 0 <= T1 < T2 <= horizon {}",
            params.horizon
        )));
    }
    Ok(())
}

/// Strong survival and survival measured on the same replicas.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StrongSurvival {
    /// The watched site is infected at some time in `[T1, T2]`.
    pub strong: Estimate,
    /// The process is alive at `T1`.
    pub alive_at_t1: Estimate,
    /// Replicas counted as strong survivors but dead at `T1`; always 0.
    pub containment_violations: u64,
}

/// Fraction of replicas where the origin (the watched site) is infected at
/// some time in `window`.
pub fn strong_survival_probability(
    q: &SurvivalQuery,
    spec: &DistributionSpec,
    params: &ModelParams,
    window: [f64; 2],
) -> Result<Estimate> {
    Ok(strong_and_survival(q, spec, params, window)?.strong)
}

pub fn strong_and_survival(
    q: &SurvivalQuery,
    spec: &DistributionSpec,
    params: &ModelParams,
    window: [f64; 2],
) -> Result<StrongSurvival> {
    params.validate()?;
    check_window(window, params)?;
    let init = q.initial.resolve(&q.region)?;
    check_margin(&q.region, &init)?;
    let [t1, t2] = window;
    let reps = replicate(q, spec, params, t2, &init, None, false, |_, s, _| {
        (s.watched_infected_during(t1, t2), s.alive_at(t1))
    })?;
    let extra = json!({ "window": window });
    let strong = estimate_from(&reps, |o| o.0, echo("strong-survival", q, spec, params, extra.clone()));
    let alive = estimate_from(&reps, |o| o.1, echo("survival-at-t1", q, spec, params, extra));
    let containment_violations = reps.iter().filter(|r| r.out.0 && !r.out.1).count() as u64;
    Ok(StrongSurvival {
        strong,
        alive_at_t1: alive,
        containment_violations,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Coupling {
    /// Thin one stream at the largest lambda: estimates are monotone in
    /// lambda replica by replica.
    #[default]
    Thinned,
    Independent,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub lambda: f64,
    pub estimate: Estimate,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Sweep {
    pub points: Vec<SweepPoint>,
    /// Replicas alive at some lambda but dead at a larger one. Zero under
    /// the thinned coupling.
    pub monotonicity_violations: u64,
}

impl Sweep {
    /// CSV with columns `lambda,t,estimate,stderr,replicas`.
    pub fn write_csv<W: Write>(&self, horizon: f64, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["lambda", "t", "estimate", "stderr", "replicas"])?;
        for p in &self.points {
            out.serialize((p.lambda, horizon, p.estimate.value, p.estimate.std_error, p.estimate.replicas))?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Survival at each lambda of a grid (sorted ascending).
pub fn survival_sweep(
    q: &SurvivalQuery,
    spec: &DistributionSpec,
    params: &ModelParams,
    lambdas: &[f64],
    coupling: Coupling,
) -> Result<Sweep> {
    params.validate()?;
    if lambdas.is_empty() {
        return Err(Error::Precondition("lambda grid is empty".into()));
    }
    let mut grid = lambdas.to_vec();
    if grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(Error::Precondition("lambda values must be finite and nonnegative".into()));
    }
    grid.sort_by(f64::total_cmp);
    let init = q.initial.resolve(&q.region)?;
    check_margin(&q.region, &init)?;

    let alive: Vec<Replica<Vec<bool>>> = match coupling {
        Coupling::Independent => {
            let per_lambda = grid
                .iter()
                .map(|&l| {
                    replicate(q, spec, &params.with_lambda(l), params.horizon, &init, None, false, |_, s, _| {
                        s.extinction_time.is_none()
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            (0..q.replicas as usize)
                .map(|i| Replica {
                    out: per_lambda.iter().map(|r| r[i].out && !r[i].budget_exceeded).collect(),
                    budget_exceeded: per_lambda.iter().any(|r| r[i].budget_exceeded),
                    suppressions: per_lambda.last().map_or(0, |r| r[i].suppressions),
                })
                .collect()
        }
        Coupling::Thinned => {
            q.check()?;
            spec.validate()?;
            let top = *grid.last().expect("nonempty");
            let opts = EvolveOptions {
                track_ever: false,
                max_updates: q.max_updates,
                ..Default::default()
            };
            run_indexed(q.workers, q.replicas, || (), |_, i| {
                let env = q.regime.environment(spec, q.seed, i);
                let full = generate_stream(&env, &params.with_lambda(top), &q.region, derive_seed(q.seed, i, tag::STREAM))?;
                let thin_seed = derive_seed(q.seed, i, tag::THINNING);
                let mut out = Vec::with_capacity(grid.len());
                let mut budget = false;
                let mut suppressions = 0;
                for &l in &grid {
                    let keep = if top > 0.0 { l / top } else { 1.0 };
                    let s = thin_stream(&full, keep, thin_seed)?;
                    let (fin, stats) = evolve_with(&init, &s, &opts)?;
                    budget |= stats.budget_exceeded;
                    suppressions = stats.boundary_suppressions;
                    out.push(!fin.is_empty() && !stats.budget_exceeded);
                }
                Ok(Replica {
                    out,
                    budget_exceeded: budget,
                    suppressions,
                })
            })?
        }
    };

    let monotonicity_violations = alive
        .iter()
        .filter(|r| r.out.windows(2).any(|w| w[0] && !w[1]))
        .count() as u64;
    let points = grid
        .iter()
        .enumerate()
        .map(|(k, &l)| {
            let successes = alive.iter().filter(|r| r.out[k]).count() as u64;
            let budget = alive.iter().filter(|r| r.budget_exceeded).count() as u64;
            let e = echo(
                "survival-sweep",
                q,
                spec,
                &params.with_lambda(l),
                json!({ "coupling": coupling, "grid": grid }),
            );
            SweepPoint {
                lambda: l,
                estimate: Estimate::from_counts(successes, q.replicas, budget, e),
            }
        })
        .collect();
    Ok(Sweep {
        points,
        monotonicity_violations,
    })
}

/// Survival proxy bisected by [`critical_value`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Proxy {
    Survival,
    /// Strong survival over the window `[t1, t2]`.
    Strong { t1: f64, t2: f64 },
}

impl Proxy {
    pub fn evaluate(&self, q: &SurvivalQuery, spec: &DistributionSpec, params: &ModelParams) -> Result<Estimate> {
        match *self {
            Proxy::Survival => survival_probability(q, spec, params),
            Proxy::Strong { t1, t2 } => strong_survival_probability(q, spec, params, [t1, t2]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BisectionPoint {
    pub lambda: f64,
    pub estimate: f64,
    pub std_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CriticalResult {
    pub lambda_hat: f64,
    /// Final bracket.
    pub lo: f64,
    pub hi: f64,
    pub threshold: f64,
    pub proxy: Proxy,
    /// Every evaluation in order, endpoints first.
    pub history: Vec<BisectionPoint>,
}

impl CriticalResult {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Bisects `lambda -> proxy(lambda)` for the crossing of `threshold`.
/// Every evaluation reuses the query's master seed.
#[allow(clippy::too_many_arguments)]
pub fn critical_value(
    q: &SurvivalQuery,
    spec: &DistributionSpec,
    params: &ModelParams,
    proxy: Proxy,
    bracket: [f64; 2],
    depth: u32,
    threshold: f64,
) -> Result<CriticalResult> {
    let [mut lo, mut hi] = bracket;
    if !(0.0 <= lo && lo < hi && hi.is_finite()) {
        return Err(Error::Precondition(format!("bracket [{lo}, {hi}] is not an interval in [0, inf)")));
    }
    if !(0.0 < threshold && threshold < 1.0) {
        return Err(Error::Precondition(format!("threshold {threshold} must lie in (0, 1)")));
    }
    let mut history = Vec::new();
    let eval = |l: f64, history: &mut Vec<BisectionPoint>| -> Result<Estimate> {
        let e = proxy.evaluate(q, spec, &params.with_lambda(l))?;
        history.push(BisectionPoint {
            lambda: l,
            estimate: e.value,
            std_error: e.std_error,
        });
        Ok(e)
    };
    let e_lo = eval(lo, &mut history)?;
    let e_hi = eval(hi, &mut history)?;
    if e_hi.value <= threshold {
        let both_below = e_lo.value <= threshold;
        let (lo_e, hi_e) = (Box::new(e_lo), Box::new(e_hi));
        return Err(if both_below {
            Error::NoTransition {
                lo_lambda: lo,
                hi_lambda: hi,
                threshold,
                lo: lo_e,
                hi: hi_e,
            }
        } else {
            Error::BracketInvalid {
                lo_lambda: lo,
                hi_lambda: hi,
                threshold,
                lo: lo_e,
                hi: hi_e,
            }
        });
    }
    if e_lo.value >= threshold {
        return Err(Error::BracketInvalid {
            lo_lambda: lo,
            hi_lambda: hi,
            threshold,
            lo: Box::new(e_lo),
            hi: Box::new(e_hi),
        });
    }
    for _ in 0..depth {
        let mid = 0.5 * (lo + hi);
        if eval(mid, &mut history)?.value > threshold {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(CriticalResult {
        lambda_hat: 0.5 * (lo + hi),
        lo,
        hi,
        threshold,
        proxy,
        history,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct C1Result {
    /// `x` is infected at some time in `[t, t + w]`.
    pub lhs: Estimate,
    /// The process is alive throughout `[0, t + w]`.
    pub rhs: Estimate,
}

/// Complete-convergence diagnostic (c1), started from the query's initial set.
pub fn c1_check(
    q: &SurvivalQuery,
    spec: &DistributionSpec,
    params: &ModelParams,
    x: LatticePoint,
    t: f64,
    w: f64,
) -> Result<C1Result> {
    if !(t >= 0.0 && w >= 0.0 && (t + w).is_finite()) {
        return Err(Error::Precondition(format!("t = {t} and w = {w} must be finite and nonnegative")));
    }
    if !q.region.contains(&x) {
        return Err(Error::Precondition(format!("{x} lies outside the region")));
    }
    let init = q.initial.resolve(&q.region)?;
    let end = t + w;
    let reps = replicate(q, spec, params, end, &init, Some(x), false, |_, s, _| {
        (s.watched_infected_during(t, end), s.alive_at(end))
    })?;
    let extra = json!({ "x": x, "t": t, "w": w });
    Ok(C1Result {
        lhs: estimate_from(&reps, |o| o.0, echo("c1-lhs", q, spec, params, extra.clone())),
        rhs: estimate_from(&reps, |o| o.1, echo("c1-rhs", q, spec, params, extra)),
    })
}

/// Complete-convergence diagnostic (c2): from the full ball `B_x(M)`,
/// whether `xi_t` still meets the ball.
pub fn c2_check(
    q: &SurvivalQuery,
    spec: &DistributionSpec,
    params: &ModelParams,
    x: LatticePoint,
    m: f64,
    t: f64,
) -> Result<Estimate> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::Precondition(format!("t = {t} must be finite and nonnegative")));
    }
    let ball = q.region.ball(&x, m)?;
    if !ball_inside(&q.region, &x, m) {
        return Err(Error::Precondition(format!("ball of radius {m} around {x} leaves the region")));
    }
    let init: Configuration = ball.into();
    let reps = replicate(q, spec, params, t, &init, None, false, |table, _, ws| {
        init.iter().any(|p| table.index(p).is_some_and(|i| ws.infected()[i]))
    })?;
    Ok(estimate_from(&reps, |&b| b, echo("c2", q, spec, params, json!({ "x": x, "m": m, "t": t }))))
}

/// Whether every lattice point within distance `m` of `x` is in the region.
fn ball_inside(region: &Region, x: &LatticePoint, m: f64) -> bool {
    let k = m.floor() as i64;
    let dim = x.dim();
    let mut offset = vec![-k; dim];
    loop {
        let mut p = *x;
        for (axis, &o) in offset.iter().enumerate() {
            p = p.offset(axis, o);
        }
        if (p.dist2(x) as f64) <= m * m && region.lattice_contains(&p) && !region.contains(&p) {
            return false;
        }
        let mut axis = 0;
        loop {
            if axis == dim {
                return true;
            }
            offset[axis] += 1;
            if offset[axis] <= k {
                break;
            }
            offset[axis] = -k;
            axis += 1;
        }
    }
}

/// `P(xi_t^A meets B)`.
pub fn hit_probability(
    q: &SurvivalQuery,
    spec: &DistributionSpec,
    params: &ModelParams,
    a: &Configuration,
    b: &Configuration,
    t: f64,
) -> Result<Estimate> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::Precondition(format!("t = {t} must be finite and nonnegative")));
    }
    if let Some(p) = a.iter().chain(b.iter()).find(|p| !q.region.contains(p)) {
        return Err(Error::Precondition(format!("{p} lies outside the region")));
    }
    let reps = replicate(q, spec, params, t, a, None, false, |table, _, ws| {
        b.iter().any(|p| table.index(p).is_some_and(|i| ws.infected()[i]))
    })?;
    Ok(estimate_from(&reps, |&h| h, echo("hit", q, spec, params, json!({ "a": a, "b": b, "t": t }))))
}
