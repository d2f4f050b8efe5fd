//! The static random environment: i.i.d. nonnegative edge rates and the
//! global multiplier `lambda` applied on top of them.
//!
//! Rates are never stored. `rate(e)` hashes the canonical edge key with the
//! environment seed and pushes the resulting uniform through the quantile
//! function of the rate law, so any edge of an unbounded lattice can be
//! queried in O(1) and the answer never changes. An explicit table (loaded
//! from CSV) overrides the lazy law on the edges it lists.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{Edge, LatticePoint, Region};
use crate::rng::{keyed, tag, unit_f64};

/// One atom of a discrete rate law.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub value: f64,
    pub prob: f64,
}

/// The law of a single edge rate. All mass lies on `[0, inf)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DistributionSpec {
    PointMass { c: f64 },
    /// `scale` with probability `p`, zero otherwise (percolation cluster).
    Bernoulli { p: f64, scale: f64 },
    Uniform { a: f64, b: f64 },
    DiscreteTable { table: Vec<Atom> },
    Exponential { mean: f64 },
}

impl DistributionSpec {
    /// Describes every way the parameters break the law's invariants.
    pub fn violations(&self) -> Vec<(String, String)> {
        let mut v = Vec::new();
        let mut nonneg = |field: &str, x: f64| {
            if !(x.is_finite() && x >= 0.0) {
                v.push((field.to_string(), format!("must be finite and >= 0, got {x}")));
            }
        };
        match self {
            DistributionSpec::PointMass { c } => nonneg("c", *c),
            DistributionSpec::Bernoulli { p, scale } => {
                nonneg("scale", *scale);
                if !(0.0..=1.0).contains(p) {
                    v.push(("p".into(), format!("must lie in [0, 1], got {p}")));
                }
            }
            DistributionSpec::Uniform { a, b } => {
                nonneg("a", *a);
                nonneg("b", *b);
                if a > b {
                    v.push(("b".into(), format!("upper end {b} below lower end {a}")));
                }
            }
            DistributionSpec::DiscreteTable { table } => {
                if table.is_empty() {
                    v.push(("table".into(), "must contain at least one atom".into()));
                }
                for (i, atom) in table.iter().enumerate() {
                    if !(atom.value.is_finite() && atom.value >= 0.0) {
                        v.push((format!("table[{i}].value"), format!("must be finite and >= 0, got {}", atom.value)));
                    }
                    if !(atom.prob >= 0.0 && atom.prob <= 1.0) {
                        v.push((format!("table[{i}].prob"), format!("must lie in [0, 1], got {}", atom.prob)));
                    }
                }
                let total: f64 = table.iter().map(|a| a.prob).sum();
                if !table.is_empty() && (total - 1.0).abs() > 1e-9 {
                    v.push(("table".into(), format!("probabilities sum to {total}, not 1")));
                }
            }
            DistributionSpec::Exponential { mean } => {
                nonneg("mean", *mean);
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Domain(
                v.into_iter()
                    .map(|(f, m)| format!("{f}: {m}"))
                    .collect::<Vec<_>>()
                    .join("; "),
            ))
        }
    }

    /// Quantile function, `u` in `[0, 1)`.
    pub fn quantile(&self, u: f64) -> f64 {
        match self {
            DistributionSpec::PointMass { c } => *c,
            DistributionSpec::Bernoulli { p, scale } => {
                if u < *p {
                    *scale
                } else {
                    0.0
                }
            }
            DistributionSpec::Uniform { a, b } => a + (b - a) * u,
            DistributionSpec::DiscreteTable { table } => {
                let mut acc = 0.0;
                for atom in table {
                    acc += atom.prob;
                    if u < acc {
                        return atom.value;
                    }
                }
                // rounding slack: fall through to the last atom with mass
                table
                    .iter()
                    .rev()
                    .find(|a| a.prob > 0.0)
                    .map_or(0.0, |a| a.value)
            }
            DistributionSpec::Exponential { mean } => -mean * (-u).ln_1p(),
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match self {
            DistributionSpec::PointMass { c } => f64::from(u8::from(x >= *c)),
            DistributionSpec::Bernoulli { p, scale } => {
                if x < 0.0 {
                    0.0
                } else if x < *scale {
                    1.0 - p
                } else {
                    1.0
                }
            }
            DistributionSpec::Uniform { a, b } => {
                if x < *a {
                    0.0
                } else if x >= *b {
                    1.0
                } else {
                    (x - a) / (b - a)
                }
            }
            DistributionSpec::DiscreteTable { table } => {
                table.iter().filter(|a| a.value <= x).map(|a| a.prob).sum()
            }
            DistributionSpec::Exponential { mean } => {
                if x <= 0.0 {
                    0.0
                } else {
                    1.0 - (-x / mean).exp()
                }
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            DistributionSpec::PointMass { c } => *c,
            DistributionSpec::Bernoulli { p, scale } => p * scale,
            DistributionSpec::Uniform { a, b } => 0.5 * (a + b),
            DistributionSpec::DiscreteTable { table } => table.iter().map(|a| a.value * a.prob).sum(),
            DistributionSpec::Exponential { mean } => *mean,
        }
    }

    /// Largest value in the support, if bounded.
    pub fn sup(&self) -> Option<f64> {
        match self {
            DistributionSpec::PointMass { c } => Some(*c),
            DistributionSpec::Bernoulli { scale, .. } => Some(*scale),
            DistributionSpec::Uniform { b, .. } => Some(*b),
            DistributionSpec::DiscreteTable { table } => {
                table.iter().filter(|a| a.prob > 0.0).map(|a| a.value).reduce(f64::max)
            }
            DistributionSpec::Exponential { .. } => None,
        }
    }

    /// Whether the law is discrete (goodness-of-fit uses chi-square then).
    pub fn is_discrete(&self) -> bool {
        !matches!(self, DistributionSpec::Uniform { .. } | DistributionSpec::Exponential { .. })
    }
}

/// Global infection multiplier and time horizon. Recovery rate is 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub lambda: f64,
    pub horizon: f64,
}

impl ModelParams {
    pub fn new(lambda: f64, horizon: f64) -> Self {
        ModelParams { lambda, horizon }
    }

    /// `lambda` may be zero in experiments (pure death) although the model
    /// itself is defined for `lambda > 0`.
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Domain(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0 && self.horizon <= 1e6) {
            return Err(Error::Domain(format!("horizon must lie in (0, 1e6], got {}", self.horizon)));
        }
        Ok(())
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        ModelParams { lambda, ..*self }
    }

    pub fn with_horizon(&self, horizon: f64) -> Self {
        ModelParams { horizon, ..*self }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Environment {
    pub spec: DistributionSpec,
    pub env_seed: u64,
    table: Option<HashMap<Edge, f64>>,
}

/// On-disk form of a lazily generated environment.
#[derive(Serialize, Deserialize)]
struct EnvFile {
    mu: DistributionSpec,
    env_seed: u64,
}

impl Environment {
    pub fn new(spec: DistributionSpec, env_seed: u64) -> Self {
        Environment {
            spec,
            env_seed,
            table: None,
        }
    }

    pub fn point_mass(c: f64) -> Self {
        Self::new(DistributionSpec::PointMass { c }, 0)
    }

    /// Same law, different realisation.
    pub fn reseeded(&self, env_seed: u64) -> Self {
        Environment {
            spec: self.spec.clone(),
            env_seed,
            table: self.table.clone(),
        }
    }

    pub fn has_table(&self) -> bool {
        self.table.is_some()
    }

    #[inline]
    pub fn rate(&self, e: &Edge) -> f64 {
        if let Some(v) = self.table.as_ref().and_then(|t| t.get(e)) {
            return *v;
        }
        let (point, axis) = e.key();
        let bits = keyed(self.env_seed ^ tag::EDGE_RATE.rotate_left(56), &[point, axis]);
        self.spec.quantile(unit_f64(bits))
    }

    /// `lambda * rate(e)`.
    #[inline]
    pub fn effective_rate(&self, params: &ModelParams, e: &Edge) -> f64 {
        params.lambda * self.rate(e)
    }

    /// Materialises the rates of every edge of a finite region.
    pub fn materialize(&self, region: &Region) -> Result<Environment> {
        let table = region.edges_in()?.map(|e| (e, self.rate(&e))).collect();
        Ok(Environment {
            spec: self.spec.clone(),
            env_seed: self.env_seed,
            table: Some(table),
        })
    }
}

fn coords_field(p: &LatticePoint) -> String {
    p.coords()
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(";")
}

fn parse_coords(s: &str) -> std::result::Result<LatticePoint, String> {
    let v: std::result::Result<Vec<i64>, _> = s.split(';').map(|c| c.trim().parse::<i64>()).collect();
    match v {
        Ok(v) if !v.is_empty() && v.len() <= crate::lattice::MAX_COORDS => Ok(LatticePoint::new(&v)),
        Ok(v) => Err(format!("point with {} coordinates", v.len())),
        Err(e) => Err(format!("bad coordinate list {s:?}: {e}")),
    }
}

/// Writes `env` to `path`. With a region the rates of every edge in it are
/// written as CSV (`p_coords,q_coords,rate`, coordinates `;`-separated);
/// without one only the law and seed are stored, as JSON.
pub fn save_env(env: &Environment, region: Option<&Region>, path: &Path) -> Result<()> {
    match region {
        None => {
            let file = EnvFile {
                mu: env.spec.clone(),
                env_seed: env.env_seed,
            };
            let text = serde_json::to_string_pretty(&file)?;
            std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
        }
        Some(region) => {
            let mut out = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
            let mut buf = String::from("p_coords,q_coords,rate\n");
            for e in region.edges_in()? {
                let (p, q) = e.endpoints();
                // `{}` on f64 prints the shortest representation that parses back exactly
                buf.push_str(&format!("{},{},{}\n", coords_field(&p), coords_field(&q), env.rate(&e)));
            }
            out.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
        }
    }
}

/// Loads an environment written by [`save_env`]. CSV tables yield an
/// environment whose unlisted edges have rate zero.
pub fn load_env(path: &Path) -> Result<Environment> {
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if !is_csv {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: EnvFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.into(),
            line: e.line() as u64,
            message: e.to_string(),
        })?;
        file.mu.validate().map_err(|e| Error::Parse {
            path: path.into(),
            line: 0,
            message: e.to_string(),
        })?;
        return Ok(Environment::new(file.mu, file.env_seed));
    }

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Parse {
            path: path.into(),
            line: 1,
            message: e.to_string(),
        })?;
    let headers = reader.headers().map_err(|e| Error::Parse {
        path: path.into(),
        line: 1,
        message: e.to_string(),
    })?;
    if headers.iter().collect::<Vec<_>>() != ["p_coords", "q_coords", "rate"] {
        return Err(Error::Parse {
            path: path.into(),
            line: 1,
            message: "expected header p_coords,q_coords,rate".into(),
        });
    }
    let mut table = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            path: path.into(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let fail = |message: String| Error::Parse {
            path: path.into(),
            line,
            message,
        };
        if record.len() != 3 {
            return Err(fail(format!("expected 3 fields, found {}", record.len())));
        }
        let p = parse_coords(&record[0]).map_err(&fail)?;
        let q = parse_coords(&record[1]).map_err(&fail)?;
        let edge = Edge::new(p, q).map_err(|e| fail(e.to_string()))?;
        let rate: f64 = record[2]
            .trim()
            .parse()
            .map_err(|e| fail(format!("bad rate {:?}: {e}", &record[2])))?;
        if !(rate.is_finite() && rate >= 0.0) {
            return Err(fail(format!("rate must be finite and >= 0, got {rate}")));
        }
        table.insert(edge, rate);
    }
    Ok(Environment {
        spec: DistributionSpec::PointMass { c: 0.0 },
        env_seed: 0,
        table: Some(table),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::Region;

    fn p(c: &[i64]) -> LatticePoint {
        LatticePoint::new(c)
    }

    fn horizontal_edges(n: usize) -> impl Iterator<Item = Edge> {
        (0..n as i64).map(|i| Edge::new(p(&[i, 3]), p(&[i + 1, 3])).unwrap())
    }

    #[test]
    fn point_mass_and_bernoulli_values() {
        let env = Environment::point_mass(1.0);
        assert!(horizontal_edges(100).all(|e| env.rate(&e) == 1.0));
        let env = Environment::new(DistributionSpec::Bernoulli { p: 0.5, scale: 1.0 }, 9);
        assert!(horizontal_edges(1000).all(|e| {
            let r = env.rate(&e);
            r == 0.0 || r == 1.0
        }));
    }

    #[test]
    fn uniform_mean_within_three_se() {
        let env = Environment::new(DistributionSpec::Uniform { a: 0.0, b: 2.0 }, 11);
        let n = 100_000;
        let mean = horizontal_edges(n).map(|e| env.rate(&e)).sum::<f64>() / n as f64;
        let se = (4.0f64 / 12.0 / n as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn effective_rate_scales() {
        let env = Environment::point_mass(0.5);
        let e = Edge::new(p(&[0, 0]), p(&[0, 1])).unwrap();
        assert_eq!(env.effective_rate(&ModelParams::new(2.0, 1.0), &e), 1.0);
        assert_eq!(env.effective_rate(&ModelParams::new(1.0, 1.0), &e), env.rate(&e));

        let env = Environment::new(DistributionSpec::Bernoulli { p: 0.5, scale: 1.0 }, 4);
        let params = ModelParams::new(3.0, 1.0);
        let n = 100_000;
        let mean = horizontal_edges(n).map(|e| env.effective_rate(&params, &e)).sum::<f64>() / n as f64;
        let se = (9.0f64 * 0.25 / n as f64).sqrt();
        assert!((mean - 1.5).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn rates_are_pure() {
        let env = Environment::new(DistributionSpec::Exponential { mean: 2.0 }, 5);
        let first: Vec<f64> = horizontal_edges(100).map(|e| env.rate(&e)).collect();
        for _ in 0..100 {
            let again: Vec<f64> = horizontal_edges(100).map(|e| env.rate(&e)).collect();
            assert_eq!(first, again);
        }
    }

    #[test]
    fn quantiles_respect_law() {
        let d = DistributionSpec::DiscreteTable {
            table: vec![Atom { value: 0.0, prob: 0.2 }, Atom { value: 3.0, prob: 0.8 }],
        };
        assert_eq!(d.quantile(0.1), 0.0);
        assert_eq!(d.quantile(0.3), 3.0);
        assert_eq!(d.quantile(0.999_999_999_999), 3.0);
        assert!((d.mean() - 2.4).abs() < 1e-12);
        let bad = DistributionSpec::DiscreteTable {
            table: vec![Atom { value: 1.0, prob: 0.5 }],
        };
        assert!(bad.validate().is_err());
        assert!(DistributionSpec::Uniform { a: -1.0, b: 1.0 }.validate().is_err());
    }

    #[test]
    fn table_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("env.csv");
        let region = Region::finite_box(&[0, 0], &[9, 9]).unwrap();
        let env = Environment::new(DistributionSpec::Uniform { a: 0.0, b: 2.0 }, 17);
        save_env(&env, Some(&region), &path).unwrap();
        let loaded = load_env(&path).unwrap();
        let edges: Vec<_> = region.edges_in().unwrap().collect();
        assert_eq!(edges.len(), 180);
        for e in &edges {
            assert_eq!(env.rate(e).to_bits(), loaded.rate(e).to_bits());
        }
    }

    #[test]
    fn spec_only_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("env.json");
        let env = Environment::new(DistributionSpec::Bernoulli { p: 0.25, scale: 1.0 }, 42);
        save_env(&env, None, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"env_seed\": 42"));
        let loaded = load_env(&path).unwrap();
        assert!(!loaded.has_table());
        assert!(horizontal_edges(500).all(|e| env.rate(&e) == loaded.rate(&e)));
    }

    #[test]
    fn negative_rate_rejected_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "p_coords,q_coords,rate\n0;0,0;1,1.0\n0;0,1;0,-0.5\n").unwrap();
        match load_env(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        std::fs::write(&path, "p_coords,q_coords,rate\n0;0,2;0,1.0\n").unwrap();
        assert!(matches!(load_env(&path), Err(Error::Parse { line: 2, .. })));
    }
}
