//! JSON run configurations, validation and dispatch.
//!
//! A [`RunConfig`] fully determines an experiment apart from the number of
//! worker threads, which never changes the results. [`run`] returns a
//! [`RunRecord`] whose `results` payload is a pure function of the config
//! and the crate version, and, for sweeps and sample tables, a CSV table.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::dynamics::Configuration;
use crate::environment::{DistributionSpec, Environment, ModelParams};
use crate::error::{Error, Result, Violation};
use crate::estimators::{
    c1_check, c2_check, critical_value, hit_probability, strong_and_survival, survival_probability, survival_sweep,
    Coupling, InitialSet, Proxy, Regime, SurvivalQuery, DEFAULT_THRESHOLD,
};
use crate::lattice::{LatticePoint, Mode, Region};
use crate::oracle::{exact_hit, survival_record, FiniteGraph, OracleResult};
use crate::renorm::{
    block_lambda_sweep, block_probability, block_sensitivity, block_tau_sweep, find_block_params, group_samples,
    linear_growth_fit, renorm_samples, write_renorm_csv, BlockQuery, BoxPair, BoxSpec,
};
use crate::rng::SEED_RULE;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegimeKind {
    #[default]
    Quenched,
    Annealed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentConfig {
    pub mu: DistributionSpec,
    #[serde(default)]
    pub env_seed: u64,
    #[serde(default)]
    pub regime: RegimeKind,
}

impl EnvironmentConfig {
    pub fn regime(&self) -> Regime {
        match self.regime {
            RegimeKind::Quenched => Regime::Quenched { env_seed: self.env_seed },
            RegimeKind::Annealed => Regime::Annealed,
        }
    }
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

fn default_epsilon() -> f64 {
    0.1
}

/// The experiment to run and its own parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Experiment {
    /// Alive at the horizon; with `lambdas`, a sweep over that grid.
    Survival {
        #[serde(default)]
        initial: InitialSet,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lambdas: Option<Vec<f64>>,
        #[serde(default)]
        coupling: Coupling,
    },
    StrongSurvival {
        #[serde(default)]
        initial: InitialSet,
        window: [f64; 2],
    },
    Critical {
        #[serde(default)]
        initial: InitialSet,
        proxy: Proxy,
        bracket: [f64; 2],
        depth: u32,
        #[serde(default = "default_threshold")]
        threshold: f64,
    },
    C1 {
        #[serde(default)]
        initial: InitialSet,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        x: Option<LatticePoint>,
        t: f64,
        /// Defaults to `t`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        w: Option<f64>,
    },
    C2 {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        x: Option<LatticePoint>,
        radii: Vec<f64>,
        t: f64,
    },
    Hit {
        a: Vec<LatticePoint>,
        b: Vec<LatticePoint>,
        t: f64,
    },
    Block {
        #[serde(rename = "box")]
        block: BoxSpec,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lambdas: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        taus: Option<Vec<f64>>,
    },
    FindBlocks {
        epsilon: f64,
        budget: u64,
    },
    Renorm {
        boxes: BoxPair,
        ns: Vec<u32>,
        samples: u64,
        #[serde(default = "default_epsilon")]
        epsilon: f64,
    },
    /// Fits the growth of `T(n)`, from a sample CSV or from fresh samples.
    RenormFit {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        input: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        boxes: Option<BoxPair>,
        #[serde(default)]
        ns: Vec<u32>,
        #[serde(default)]
        samples: u64,
        #[serde(default = "default_epsilon")]
        epsilon: f64,
    },
    BlockSensitivity {
        #[serde(rename = "box")]
        block: BoxSpec,
        deltas: Vec<f64>,
    },
    /// Exact survival (or hit probability with `target`) on a region of at
    /// most 12 sites.
    Oracle {
        #[serde(default)]
        initial: InitialSet,
        t: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target: Option<Vec<LatticePoint>>,
    },
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Survival { .. } => "survival",
            Experiment::StrongSurvival { .. } => "strong-survival",
            Experiment::Critical { .. } => "critical",
            Experiment::C1 { .. } => "c1",
            Experiment::C2 { .. } => "c2",
            Experiment::Hit { .. } => "hit",
            Experiment::Block { .. } => "block",
            Experiment::FindBlocks { .. } => "find-blocks",
            Experiment::Renorm { .. } => "renorm",
            Experiment::RenormFit { .. } => "renorm-fit",
            Experiment::BlockSensitivity { .. } => "block-sensitivity",
            Experiment::Oracle { .. } => "oracle",
        }
    }
}

fn default_replicas() -> u64 {
    1000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub region: Region,
    pub environment: EnvironmentConfig,
    pub params: ModelParams,
    pub experiment: Experiment,
    #[serde(default = "default_replicas")]
    pub replicas: u64,
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; 0 or absent lets the pool decide.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

impl RunConfig {
    fn query(&self, initial: &InitialSet) -> SurvivalQuery {
        SurvivalQuery::new(self.region.clone(), self.environment.regime(), self.replicas, self.seed)
            .with_initial(initial.clone())
            .with_workers(self.workers.unwrap_or(0))
    }

    fn block_query(&self) -> BlockQuery {
        BlockQuery::new(self.environment.regime(), self.replicas, self.seed).with_workers(self.workers.unwrap_or(0))
    }
}

/// Parses a config, reporting structural errors with their JSON path.
pub fn parse_config(text: &str) -> std::result::Result<RunConfig, Violation> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let path = if path == "." { "$".to_string() } else { format!("$.{path}") };
        Violation::new(path, e.inner().to_string())
    })
}

fn finite_nonneg(x: f64) -> bool {
    x.is_finite() && x >= 0.0
}

/// Semantic checks beyond the schema.
pub fn violations(c: &RunConfig) -> Vec<Violation> {
    let mut v = Vec::new();
    for m in c.region.violations() {
        v.push(Violation::new("$.region", m));
    }
    for (field, m) in c.environment.mu.violations() {
        v.push(Violation::new(format!("$.environment.mu.{field}"), m));
    }
    if !finite_nonneg(c.params.lambda) {
        v.push(Violation::new("$.params.lambda", format!("must be finite and >= 0, got {}", c.params.lambda)));
    }
    if !(c.params.horizon.is_finite() && c.params.horizon > 0.0 && c.params.horizon <= 1e6) {
        v.push(Violation::new("$.params.horizon", format!("must lie in (0, 1e6], got {}", c.params.horizon)));
    }
    if c.replicas == 0 {
        v.push(Violation::new("$.replicas", "must be at least 1"));
    }
    let e = "$.experiment";
    let needs_box = !matches!(
        c.experiment,
        Experiment::Block { .. }
            | Experiment::FindBlocks { .. }
            | Experiment::Renorm { .. }
            | Experiment::RenormFit { .. }
            | Experiment::BlockSensitivity { .. }
    );
    if needs_box && !c.region.is_finite() {
        v.push(Violation::new("$.region.box", "this experiment needs a finite truncation box"));
    }
    let needs_half_plane = !needs_box;
    if needs_half_plane && c.region.mode != Mode::HalfSpace {
        v.push(Violation::new("$.region.mode", "block experiments run on the half space"));
    }
    let point_ok = |p: &LatticePoint| p.dim() == c.region.coords() && c.region.contains(p);
    let check_points = |v: &mut Vec<Violation>, path: String, pts: &[LatticePoint]| {
        for (i, p) in pts.iter().enumerate() {
            if !point_ok(p) {
                v.push(Violation::new(format!("{path}[{i}]"), format!("{p} is not a site of the region")));
            }
        }
    };
    let box_violations = |v: &mut Vec<Violation>, path: &str, b: &BoxSpec| {
        for (field, m) in b.violations() {
            v.push(Violation::new(format!("{path}.{field}"), m));
        }
    };
    match &c.experiment {
        Experiment::Survival { initial, .. }
        | Experiment::StrongSurvival { initial, .. }
        | Experiment::Critical { initial, .. }
        | Experiment::C1 { initial, .. }
        | Experiment::Oracle { initial, .. } => {
            if let InitialSet::Points { points } = initial {
                check_points(&mut v, format!("{e}.initial.points"), points);
            }
        }
        _ => {}
    }
    if let Experiment::Survival { lambdas: Some(ls), .. } = &c.experiment {
        if ls.is_empty() {
            v.push(Violation::new(format!("{e}.lambdas"), "grid is empty"));
        }
        for (i, l) in ls.iter().enumerate() {
            if !finite_nonneg(*l) {
                v.push(Violation::new(format!("{e}.lambdas[{i}]"), format!("must be finite and >= 0, got {l}")));
            }
        }
    }
    match &c.experiment {
        Experiment::StrongSurvival { window: [t1, t2], .. } => {
            if !(0.0 <= *t1 && t1 < t2 && *t2 <= c.params.horizon) {
                v.push(Violation::new(format!("{e}.window"), "need 0 <= T1 < T2 <= horizon"));
            }
        }
        Experiment::Critical {
            bracket: [lo, hi],
            threshold,
            proxy,
            ..
        } => {
            if !(0.0 <= *lo && lo < hi && hi.is_finite()) {
                v.push(Violation::new(format!("{e}.bracket"), "need 0 <= lo < hi < inf"));
            }
            if !(0.0 < *threshold && *threshold < 1.0) {
                v.push(Violation::new(format!("{e}.threshold"), "must lie in (0, 1)"));
            }
            if let Proxy::Strong { t1, t2 } = proxy {
                if !(0.0 <= *t1 && t1 < t2 && *t2 <= c.params.horizon) {
                    v.push(Violation::new(format!("{e}.proxy"), "need 0 <= t1 < t2 <= horizon"));
                }
            }
        }
        Experiment::C1 { x, t, w, .. } => {
            if !finite_nonneg(*t) || w.is_some_and(|w| !finite_nonneg(w)) {
                v.push(Violation::new(format!("{e}.t"), "t and w must be finite and >= 0"));
            }
            if let Some(x) = x {
                check_points(&mut v, format!("{e}.x"), std::slice::from_ref(x));
            }
        }
        Experiment::C2 { x, radii, t } => {
            if !finite_nonneg(*t) {
                v.push(Violation::new(format!("{e}.t"), "must be finite and >= 0"));
            }
            if radii.is_empty() || radii.iter().any(|m| !finite_nonneg(*m)) {
                v.push(Violation::new(format!("{e}.radii"), "need a nonempty list of radii >= 0"));
            }
            if let Some(x) = x {
                check_points(&mut v, format!("{e}.x"), std::slice::from_ref(x));
            }
        }
        Experiment::Hit { a, b, t } => {
            check_points(&mut v, format!("{e}.a"), a);
            check_points(&mut v, format!("{e}.b"), b);
            if !finite_nonneg(*t) {
                v.push(Violation::new(format!("{e}.t"), "must be finite and >= 0"));
            }
        }
        Experiment::Block { block, lambdas, taus } => {
            box_violations(&mut v, &format!("{e}.box"), block);
            if lambdas.as_ref().is_some_and(|l| l.is_empty() || l.iter().any(|x| !finite_nonneg(*x))) {
                v.push(Violation::new(format!("{e}.lambdas"), "need a nonempty list of finite lambdas >= 0"));
            }
            if taus.as_ref().is_some_and(|l| l.is_empty() || l.iter().any(|x| !(x.is_finite() && *x > 0.0))) {
                v.push(Violation::new(format!("{e}.taus"), "need a nonempty list of positive times"));
            }
        }
        Experiment::FindBlocks { epsilon, budget } => {
            if !(*epsilon > 0.0 && *epsilon < 0.5) {
                v.push(Violation::new(format!("{e}.epsilon"), "must lie in (0, 0.5)"));
            }
            if *budget == 0 {
                v.push(Violation::new(format!("{e}.budget"), "must be at least 1"));
            }
        }
        Experiment::Renorm {
            boxes, ns, samples, ..
        } => {
            box_violations(&mut v, &format!("{e}.boxes.s"), &boxes.s);
            box_violations(&mut v, &format!("{e}.boxes.l"), &boxes.l);
            if boxes.s.r != boxes.l.r {
                v.push(Violation::new(format!("{e}.boxes"), "S-box and L-box must share r"));
            }
            if ns.is_empty() || ns.contains(&0) {
                v.push(Violation::new(format!("{e}.ns"), "need a nonempty list of scales >= 1"));
            }
            if *samples == 0 {
                v.push(Violation::new(format!("{e}.samples"), "must be at least 1"));
            }
        }
        Experiment::RenormFit {
            input,
            boxes,
            ns,
            samples,
            ..
        } => match (input, boxes) {
            (Some(_), None) => {}
            (None, Some(b)) => {
                box_violations(&mut v, &format!("{e}.boxes.s"), &b.s);
                box_violations(&mut v, &format!("{e}.boxes.l"), &b.l);
                if ns.len() < 3 || ns.contains(&0) {
                    v.push(Violation::new(format!("{e}.ns"), "need at least 3 scales >= 1"));
                }
                if *samples < 30 {
                    v.push(Violation::new(format!("{e}.samples"), "need at least 30 samples per scale"));
                }
            }
            _ => v.push(Violation::new(e, "give exactly one of `input` and `boxes`")),
        },
        Experiment::BlockSensitivity { block, deltas } => {
            box_violations(&mut v, &format!("{e}.box"), block);
            if deltas.is_empty() || deltas.iter().any(|x| !(0.0 <= *x && *x <= c.params.lambda)) {
                v.push(Violation::new(format!("{e}.deltas"), "need 0 <= delta <= lambda"));
            }
        }
        Experiment::Oracle { t, target, .. } => {
            if !finite_nonneg(*t) {
                v.push(Violation::new(format!("{e}.t"), "must be finite and >= 0"));
            }
            if let Some(target) = target {
                check_points(&mut v, format!("{e}.target"), target);
            }
            if c.region.is_finite() && c.region.violations().is_empty() {
                let n = c.region.points().map(|p| p.count()).unwrap_or(0);
                if n > crate::oracle::MAX_VERTICES {
                    v.push(Violation::new("$.region.box", format!("{n} sites; the exact solver handles at most 12")));
                }
            }
        }
        _ => {}
    }
    v
}

/// Reads, parses and checks a config file. `Err` only when the file cannot
/// be read; an empty list means the config is valid.
pub fn validate_file(path: &Path) -> Result<Vec<Violation>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(match parse_config(&text) {
        Err(v) => vec![v],
        Ok(c) => violations(&c),
    })
}

/// Loads a config that must be valid.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let c = parse_config(&text).map_err(|v| Error::Config(vec![v]))?;
    let v = violations(&c);
    if v.is_empty() {
        Ok(c)
    } else {
        Err(Error::Config(v))
    }
}

/// Self-describing output of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub results: Value,
    pub wall_clock_seconds: f64,
    pub version: String,
    pub seed_rule: String,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub record: RunRecord,
    /// CSV table for sweeps and per-sample outputs.
    pub table: Option<String>,
}

fn to_value<T: Serialize>(x: &T) -> Result<Value> {
    Ok(serde_json::to_value(x)?)
}

fn csv_string(write: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<String> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

/// Reads a `n,sample_index,T,success` table.
pub fn read_renorm_csv(path: &Path) -> Result<BTreeMap<u32, Vec<f64>>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.into(),
            line: 0,
            message: format!("{other:?}"),
        },
    })?;
    let mut out: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for (i, row) in rdr.deserialize::<(u32, u64, Option<f64>, bool)>().enumerate() {
        let (n, _, t, ok) = row.map_err(|e| Error::Parse {
            path: path.into(),
            line: i as u64 + 2,
            message: e.to_string(),
        })?;
        let e = out.entry(n).or_default();
        if let (true, Some(t)) = (ok, t) {
            e.push(t);
        }
    }
    Ok(out)
}

/// Runs a validated config.
pub fn run(c: &RunConfig) -> Result<RunOutput> {
    let v = violations(c);
    if !v.is_empty() {
        return Err(Error::Config(v));
    }
    let start = Instant::now();
    let mu = &c.environment.mu;
    let params = &c.params;
    let d = c.region.d;
    let mut table = None;
    let results = match &c.experiment {
        Experiment::Survival {
            initial,
            lambdas,
            coupling,
        } => match lambdas {
            None => to_value(&survival_probability(&c.query(initial), mu, params)?)?,
            Some(ls) => {
                let sweep = survival_sweep(&c.query(initial), mu, params, ls, *coupling)?;
                table = Some(csv_string(|b| sweep.write_csv(params.horizon, b))?);
                to_value(&sweep)?
            }
        },
        Experiment::StrongSurvival { initial, window } => {
            to_value(&strong_and_survival(&c.query(initial), mu, params, *window)?)?
        }
        Experiment::Critical {
            initial,
            proxy,
            bracket,
            depth,
            threshold,
        } => match critical_value(&c.query(initial), mu, params, *proxy, *bracket, *depth, *threshold) {
            Ok(r) => to_value(&r)?,
            Err(Error::NoTransition {
                lo_lambda,
                hi_lambda,
                threshold,
                lo,
                hi,
            }) => json!({
                "outcome": "no-transition",
                "bracket": [lo_lambda, hi_lambda],
                "threshold": threshold,
                "lo": lo,
                "hi": hi,
            }),
            Err(e) => return Err(e),
        },
        Experiment::C1 { initial, x, t, w } => {
            let x = x.unwrap_or_else(|| c.region.origin());
            to_value(&c1_check(&c.query(initial), mu, params, x, *t, w.unwrap_or(*t))?)?
        }
        Experiment::C2 { x, radii, t } => {
            let x = x.unwrap_or_else(|| c.region.origin());
            let q = c.query(&InitialSet::Origin);
            let rows = radii
                .iter()
                .map(|&m| Ok(json!({ "m": m, "estimate": c2_check(&q, mu, params, x, m, *t)? })))
                .collect::<Result<Vec<_>>>()?;
            Value::Array(rows)
        }
        Experiment::Hit { a, b, t } => {
            let a: Configuration = a.iter().copied().collect();
            let b: Configuration = b.iter().copied().collect();
            to_value(&hit_probability(&c.query(&InitialSet::Origin), mu, params, &a, &b, *t)?)?
        }
        Experiment::Block { block, lambdas, taus } => {
            let q = c.block_query();
            let mut out = json!({ "estimate": block_probability(block, mu, params, &q, d)? });
            if let Some(ls) = lambdas {
                out["lambda_sweep"] = to_value(&block_lambda_sweep(block, mu, params, ls, &q, d)?)?;
            }
            if let Some(ts) = taus {
                out["tau_sweep"] = to_value(&block_tau_sweep(block, mu, params, ts, &q, d)?)?;
            }
            out
        }
        Experiment::FindBlocks { epsilon, budget } => to_value(&find_block_params(
            *epsilon,
            mu,
            params,
            *budget,
            c.environment.regime(),
            c.seed,
            c.workers.unwrap_or(0),
        )?)?,
        Experiment::Renorm {
            boxes,
            ns,
            samples,
            epsilon,
        } => {
            let results = renorm_samples(ns, *samples, *epsilon, boxes, mu, params, c.seed, c.workers.unwrap_or(0))?;
            table = Some(csv_string(|b| write_renorm_csv(&results, b))?);
            let freq: BTreeMap<String, f64> = ns
                .iter()
                .map(|&n| {
                    let of_n: Vec<_> = results.iter().filter(|r| r.n == n).collect();
                    let ok = of_n.iter().filter(|r| r.t.is_some()).count();
                    (n.to_string(), ok as f64 / of_n.len() as f64)
                })
                .collect();
            json!({ "success_frequency": freq, "samples": results })
        }
        Experiment::RenormFit {
            input,
            boxes,
            ns,
            samples,
            epsilon,
        } => {
            let grouped = match (input, boxes) {
                (Some(path), _) => read_renorm_csv(path)?,
                (None, Some(b)) => {
                    let results = renorm_samples(ns, *samples, *epsilon, b, mu, params, c.seed, c.workers.unwrap_or(0))?;
                    table = Some(csv_string(|buf| write_renorm_csv(&results, buf))?);
                    group_samples(&results)
                }
                (None, None) => unreachable!("rejected by validation"),
            };
            to_value(&linear_growth_fit(&grouped)?)?
        }
        Experiment::BlockSensitivity { block, deltas } => {
            to_value(&block_sensitivity(block, mu, params, deltas, &c.block_query(), d)?)?
        }
        Experiment::Oracle { initial, t, target } => {
            let env = Environment::new(mu.clone(), c.environment.env_seed);
            let g = FiniteGraph::from_region(&c.region, &env)?;
            let init = initial.resolve(&c.region)?;
            match target {
                None => to_value(&survival_record(&g, params, &init, *t)?)?,
                Some(b) => {
                    let b: Configuration = b.iter().copied().collect();
                    let value = exact_hit(&g, params, &init, &b, *t)?;
                    let bound = crate::oracle::exact_distribution(&g, params, &init, *t)?.error_bound;
                    to_value(&OracleResult {
                        graph: g,
                        params: *params,
                        t: *t,
                        value,
                        error_bound: bound,
                    })?
                }
            }
        }
    };
    Ok(RunOutput {
        record: RunRecord {
            config: c.clone(),
            results,
            wall_clock_seconds: start.elapsed().as_secs_f64(),
            version: crate::VERSION.to_string(),
            seed_rule: SEED_RULE.to_string(),
        },
        table,
    })
}
