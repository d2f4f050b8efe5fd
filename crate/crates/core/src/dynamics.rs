//! Evolution of configurations.
//!
//! Two executors share one set of semantics:
//!
//! * [`Evolution`] replays a materialised [`EventStream`]. A recovery mark at
//!   `x` heals `x`; an arrow `y -> x` infects `x` when `y` is infected. Many
//!   initial sets can be pushed through one stream, which is how the
//!   pathwise couplings (attractiveness, additivity, duality, thinning) are
//!   realised.
//! * [`evolve_online`] runs exponential clocks only at infected sites and
//!   never stores the graphical representation, so memory stays
//!   proportional to the region, not to the number of events.
//!
//! Arrows that leave the simulation interior are suppressed (the exterior is
//! healthy and absorbing) and counted in `boundary_suppressions`.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::environment::{Environment, ModelParams};
use crate::error::{Error, Result};
use crate::graphical::{EventKind, EventStream, Event};
use crate::lattice::{BoxIndex, Edge, LatticePoint, Region};
use crate::rng::{replica_rng, tag, ReplicaRng};

/// Default cap on site updates per replica.
pub const DEFAULT_MAX_UPDATES: u64 = 10_000_000;

/// A finite set of infected sites.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Configuration(BTreeSet<LatticePoint>);

impl Configuration {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_points<I: IntoIterator<Item = LatticePoint>>(points: I) -> Self {
        Configuration(points.into_iter().collect())
    }

    pub fn singleton(p: LatticePoint) -> Self {
        Self::from_points([p])
    }

    pub fn insert(&mut self, p: LatticePoint) -> bool {
        self.0.insert(p)
    }

    pub fn contains(&self, p: &LatticePoint) -> bool {
        self.0.contains(p)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &LatticePoint> {
        self.0.iter()
    }

    pub fn is_subset(&self, other: &Configuration) -> bool {
        self.0.is_subset(&other.0)
    }

    pub fn union(&self, other: &Configuration) -> Configuration {
        Configuration(self.0.union(&other.0).copied().collect())
    }

    pub fn intersects(&self, other: &Configuration) -> bool {
        self.0.iter().any(|p| other.contains(p))
    }

    pub fn as_set(&self) -> &BTreeSet<LatticePoint> {
        &self.0
    }
}

impl FromIterator<LatticePoint> for Configuration {
    fn from_iter<I: IntoIterator<Item = LatticePoint>>(iter: I) -> Self {
        Self::from_points(iter)
    }
}

impl From<BTreeSet<LatticePoint>> for Configuration {
    fn from(s: BTreeSet<LatticePoint>) -> Self {
        Configuration(s)
    }
}

/// Per-trajectory summary.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrajectoryStats {
    /// Time the configuration became empty, if it did.
    pub extinction_time: Option<f64>,
    pub max_population: usize,
    /// Every site infected at some time (`H_t`); `None` unless tracked.
    pub ever_infected: Option<Configuration>,
    /// The watched site (the origin by default), if it lies in the region.
    pub watched: Option<LatticePoint>,
    /// Times the watched site became infected (0 if initially infected).
    pub origin_infection_times: Vec<f64>,
    /// Times the watched site recovered; pairs with the list above.
    pub origin_recovery_times: Vec<f64>,
    pub boundary_suppressions: u64,
    /// Events processed at infected sites.
    pub updates: u64,
    pub budget_exceeded: bool,
}

impl TrajectoryStats {
    /// Whether the watched site is infected at some time in `[t1, t2]`.
    pub fn watched_infected_during(&self, t1: f64, t2: f64) -> bool {
        self.origin_infection_times.iter().enumerate().any(|(k, &start)| {
            let end = self.origin_recovery_times.get(k).copied().unwrap_or(f64::INFINITY);
            start <= t2 && end > t1
        })
    }

    /// Whether the configuration is nonempty at time `t`.
    pub fn alive_at(&self, t: f64) -> bool {
        self.extinction_time.is_none_or(|e| e > t)
    }
}

#[derive(Clone, Debug)]
pub struct EvolveOptions {
    /// Site whose infection intervals are recorded. Defaults to the region
    /// origin when it belongs to the region.
    pub watch: Option<LatticePoint>,
    pub track_ever: bool,
    pub max_updates: u64,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        EvolveOptions {
            watch: None,
            track_ever: true,
            max_updates: DEFAULT_MAX_UPDATES,
        }
    }
}

/// What an event did to a trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Step {
    /// The event's source was healthy, or it lies outside the interior.
    NoOp,
    Recovered(usize),
    Infected(usize),
    /// Arrow from an infected site into an already infected site.
    Redundant,
    /// Arrow from an infected site leaving the interior.
    Suppressed,
}

/// Replays events on one configuration inside a finite interior.
#[derive(Clone, Debug)]
pub struct Evolution {
    ix: BoxIndex,
    infected: Vec<bool>,
    count: usize,
    ever: Option<Vec<bool>>,
    watch: Option<usize>,
    stats: TrajectoryStats,
    max_updates: u64,
}

impl Evolution {
    pub fn new(init: &Configuration, interior: &Region, opts: &EvolveOptions) -> Result<Self> {
        let ix = interior.indexer()?;
        let mut infected = vec![false; ix.len()];
        for p in init.iter() {
            match ix.index(p) {
                Some(i) if interior.contains(p) => infected[i] = true,
                _ => return Err(Error::Domain(format!("initial site {p} lies outside the region"))),
            }
        }
        let watch_point = opts
            .watch
            .or_else(|| Some(interior.origin()))
            .filter(|w| interior.contains(w));
        let watch = watch_point.and_then(|w| ix.index(&w));
        let mut stats = TrajectoryStats {
            max_population: init.len(),
            watched: watch_point,
            ..Default::default()
        };
        if init.is_empty() {
            stats.extinction_time = Some(0.0);
        }
        if let Some(w) = watch {
            if infected[w] {
                stats.origin_infection_times.push(0.0);
            }
        }
        Ok(Evolution {
            ever: opts.track_ever.then(|| infected.clone()),
            count: init.len(),
            infected,
            ix,
            watch,
            stats,
            max_updates: opts.max_updates,
        })
    }

    #[inline]
    fn infect(&mut self, i: usize, time: f64) {
        self.infected[i] = true;
        self.count += 1;
        self.stats.max_population = self.stats.max_population.max(self.count);
        if let Some(ever) = &mut self.ever {
            ever[i] = true;
        }
        if self.watch == Some(i) {
            self.stats.origin_infection_times.push(time);
        }
    }

    #[inline]
    fn recover(&mut self, i: usize, time: f64) {
        self.infected[i] = false;
        self.count -= 1;
        if self.watch == Some(i) {
            self.stats.origin_recovery_times.push(time);
        }
        if self.count == 0 {
            self.stats.extinction_time = Some(time);
        }
    }

    pub fn apply(&mut self, e: &Event) -> Step {
        match e.kind {
            EventKind::Recovery { site } => match self.ix.index(&site) {
                Some(i) if self.infected[i] => {
                    self.stats.updates += 1;
                    self.recover(i, e.time);
                    Step::Recovered(i)
                }
                _ => Step::NoOp,
            },
            EventKind::Arrow { from, to } => {
                let Some(fi) = self.ix.index(&from) else {
                    return Step::NoOp;
                };
                if !self.infected[fi] {
                    return Step::NoOp;
                }
                self.stats.updates += 1;
                match self.ix.index(&to) {
                    None => {
                        self.stats.boundary_suppressions += 1;
                        Step::Suppressed
                    }
                    Some(ti) if self.infected[ti] => Step::Redundant,
                    Some(ti) => {
                        self.infect(ti, e.time);
                        Step::Infected(ti)
                    }
                }
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn population(&self) -> usize {
        self.count
    }

    pub fn over_budget(&self) -> bool {
        self.stats.updates >= self.max_updates
    }

    /// Infection indicator in the interior's lexicographic index order.
    pub fn infected_mask(&self) -> &[bool] {
        &self.infected
    }

    pub fn contains(&self, p: &LatticePoint) -> bool {
        self.ix.index(p).is_some_and(|i| self.infected[i])
    }

    pub fn is_subset_of(&self, other: &Evolution) -> bool {
        self.infected.len() == other.infected.len()
            && self.infected.iter().zip(&other.infected).all(|(&a, &b)| !a || b)
    }

    pub fn configuration(&self) -> Configuration {
        self.infected
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| self.ix.point(i))
            .collect()
    }

    pub fn stats(&self) -> &TrajectoryStats {
        &self.stats
    }

    pub fn finish(mut self) -> (Configuration, TrajectoryStats) {
        if let Some(ever) = &self.ever {
            self.stats.ever_infected = Some(
                ever.iter()
                    .enumerate()
                    .filter(|(_, &b)| b)
                    .map(|(i, _)| self.ix.point(i))
                    .collect(),
            );
        }
        let fin = self.configuration();
        (fin, self.stats)
    }

    /// Replays every event of `s`, stopping early on extinction or when the
    /// update budget runs out.
    pub fn run(&mut self, s: &EventStream) {
        for e in s.events() {
            if self.is_empty() {
                return;
            }
            self.apply(e);
            if self.over_budget() {
                self.stats.budget_exceeded = true;
                return;
            }
        }
    }
}

/// Final configuration and statistics of `init` driven by `s` on the
/// stream's own region.
pub fn evolve(init: &Configuration, s: &EventStream) -> Result<(Configuration, TrajectoryStats)> {
    evolve_with(init, s, &EvolveOptions::default())
}

pub fn evolve_with(
    init: &Configuration,
    s: &EventStream,
    opts: &EvolveOptions,
) -> Result<(Configuration, TrajectoryStats)> {
    let mut evo = Evolution::new(init, s.region(), opts)?;
    evo.run(s);
    Ok(evo.finish())
}

/// Drives several initial configurations through one stream in a single
/// pass. `observe` sees every trajectory at time 0 and after each event.
pub fn coupled_evolve_observed<F>(
    inits: &[Configuration],
    s: &EventStream,
    mut observe: F,
) -> Result<Vec<(Configuration, TrajectoryStats)>>
where
    F: FnMut(Option<&Event>, &[Evolution]),
{
    let opts = EvolveOptions::default();
    let mut evos = inits
        .iter()
        .map(|a| Evolution::new(a, s.region(), &opts))
        .collect::<Result<Vec<_>>>()?;
    observe(None, &evos);
    for e in s.events() {
        if evos.iter().all(Evolution::is_empty) {
            break;
        }
        for evo in &mut evos {
            if !evo.is_empty() && !evo.stats.budget_exceeded {
                evo.apply(e);
                if evo.over_budget() {
                    evo.stats.budget_exceeded = true;
                }
            }
        }
        observe(Some(e), &evos);
    }
    Ok(evos.into_iter().map(Evolution::finish).collect())
}

pub fn coupled_evolve(inits: &[Configuration], s: &EventStream) -> Result<Vec<(Configuration, TrajectoryStats)>> {
    coupled_evolve_observed(inits, s, |_, _| {})
}

/// Watches for a condition on the infected set while events are replayed.
pub(crate) trait Probe {
    /// Called once with the initial state; returns whether the condition holds.
    fn start(&mut self, infected: &[bool]) -> bool;
    fn on_infect(&mut self, idx: usize, infected: &[bool]) -> bool;
    fn on_recover(&mut self, idx: usize);
}

/// Holds when every target site is infected at once.
pub(crate) struct SetProbe {
    member: HashMap<usize, ()>,
    have: usize,
}

impl SetProbe {
    pub(crate) fn new(targets: impl IntoIterator<Item = usize>) -> Self {
        SetProbe {
            member: targets.into_iter().map(|i| (i, ())).collect(),
            have: 0,
        }
    }
}

impl Probe for SetProbe {
    fn start(&mut self, infected: &[bool]) -> bool {
        self.have = self.member.keys().filter(|&&i| infected[i]).count();
        self.have == self.member.len()
    }

    fn on_infect(&mut self, idx: usize, _: &[bool]) -> bool {
        if self.member.contains_key(&idx) {
            self.have += 1;
        }
        self.have == self.member.len()
    }

    fn on_recover(&mut self, idx: usize) {
        if self.member.contains_key(&idx) {
            self.have -= 1;
        }
    }
}

/// Holds when some line of sites contains `run` consecutive infected sites.
/// Records the window found: the one containing the triggering site, as far
/// left as the infected segment allows.
pub(crate) struct RunProbe {
    lines: Vec<Vec<usize>>,
    position: HashMap<usize, (usize, usize)>,
    run: usize,
    pub(crate) found: Option<(usize, usize)>,
}

impl RunProbe {
    pub(crate) fn new(lines: Vec<Vec<usize>>, run: usize) -> Self {
        let mut position = HashMap::new();
        for (l, line) in lines.iter().enumerate() {
            for (k, &i) in line.iter().enumerate() {
                position.insert(i, (l, k));
            }
        }
        RunProbe {
            lines,
            position,
            run,
            found: None,
        }
    }

    fn check(&mut self, l: usize, k: usize, infected: &[bool]) -> bool {
        let line = &self.lines[l];
        let mut a = k;
        while a > 0 && infected[line[a - 1]] {
            a -= 1;
        }
        let mut b = k;
        while b + 1 < line.len() && infected[line[b + 1]] {
            b += 1;
        }
        if b + 1 - a >= self.run {
            let start = k.saturating_sub(self.run / 2).clamp(a, b + 1 - self.run);
            self.found = Some((l, start));
            true
        } else {
            false
        }
    }

    /// Site indices of the window found.
    pub(crate) fn window(&self) -> Option<&[usize]> {
        self.found.map(|(l, s)| &self.lines[l][s..s + self.run])
    }
}

impl Probe for RunProbe {
    fn start(&mut self, infected: &[bool]) -> bool {
        for l in 0..self.lines.len() {
            for k in 0..self.lines[l].len() {
                if infected[self.lines[l][k]] && self.check(l, k, infected) {
                    return true;
                }
            }
        }
        false
    }

    fn on_infect(&mut self, idx: usize, infected: &[bool]) -> bool {
        match self.position.get(&idx) {
            Some(&(l, k)) => self.check(l, k, infected),
            None => false,
        }
    }

    fn on_recover(&mut self, _: usize) {}
}

/// Replays `s` (up to and including tick `until`) until the probe fires.
/// Returns the hit time.
pub(crate) fn run_until<P: Probe>(evo: &mut Evolution, s: &EventStream, until: u64, probe: &mut P) -> Option<f64> {
    if probe.start(&evo.infected) {
        return Some(0.0);
    }
    for e in s.events() {
        if e.tick > until || evo.is_empty() {
            return None;
        }
        match evo.apply(e) {
            Step::Infected(i) => {
                if probe.on_infect(i, &evo.infected) {
                    return Some(e.time);
                }
            }
            Step::Recovered(i) => probe.on_recover(i),
            _ => {}
        }
        if evo.over_budget() {
            evo.stats.budget_exceeded = true;
            return None;
        }
    }
    None
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SeedHit {
    pub hit: bool,
    pub hit_time: Option<f64>,
}

/// First time every site of `target` is simultaneously infected, with all
/// arrows leaving `interior` suppressed.
pub fn seed_hit(init: &Configuration, s: &EventStream, target: &Configuration, interior: &Region) -> Result<SeedHit> {
    let opts = EvolveOptions {
        track_ever: false,
        ..Default::default()
    };
    let mut evo = Evolution::new(init, interior, &opts)?;
    let ix = interior.indexer()?;
    let targets = target
        .iter()
        .map(|p| {
            ix.index(p)
                .filter(|_| interior.contains(p))
                .ok_or_else(|| Error::Domain(format!("target site {p} lies outside the interior")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut probe = SetProbe::new(targets);
    let hit_time = run_until(&mut evo, s, u64::MAX, &mut probe);
    Ok(SeedHit {
        hit: hit_time.is_some(),
        hit_time,
    })
}

const EXTERIOR: u32 = u32::MAX;

/// Per-site outgoing rates of a finite region, flattened for the online
/// executor. Every site's total rate is `1 + sum of lambda * lambda_e` over
/// its lattice neighbours, including those outside the truncation box.
#[derive(Clone, Debug)]
pub struct SiteTable {
    region: Region,
    ix: BoxIndex,
    start: Vec<u32>,
    target: Vec<u32>,
    cumulative: Vec<f64>,
    total: Vec<f64>,
    max_total: f64,
}

impl SiteTable {
    pub fn build(env: &Environment, params: &ModelParams, region: &Region) -> Result<Self> {
        params.validate()?;
        let ix = region.indexer()?;
        let n = ix.len();
        if n >= EXTERIOR as usize {
            return Err(Error::Domain(format!("region of {n} sites is too large")));
        }
        let mut start = Vec::with_capacity(n + 1);
        let mut target = Vec::with_capacity(n * 2 * region.coords());
        let mut cumulative = Vec::with_capacity(n * 2 * region.coords());
        let mut total = Vec::with_capacity(n);
        let mut max_total: f64 = 1.0;
        for i in 0..n {
            start.push(target.len() as u32);
            let x = ix.point(i);
            let mut acc = 0.0;
            for y in region.lattice_neighbors(&x) {
                let rate = env.effective_rate(params, &Edge::new(x, y)?);
                if rate > 0.0 {
                    acc += rate;
                    cumulative.push(acc);
                    target.push(ix.index(&y).filter(|_| region.contains(&y)).map_or(EXTERIOR, |j| j as u32));
                }
            }
            total.push(1.0 + acc);
            max_total = max_total.max(1.0 + acc);
        }
        start.push(target.len() as u32);
        Ok(SiteTable {
            region: region.clone(),
            ix,
            start,
            target,
            cumulative,
            total,
            max_total,
        })
    }

    pub fn region(&self) -> &Region {
        &self.region
    }

    pub fn len(&self) -> usize {
        self.total.len()
    }

    pub fn is_empty(&self) -> bool {
        self.total.is_empty()
    }

    pub fn index(&self, p: &LatticePoint) -> Option<usize> {
        self.ix.index(p).filter(|_| self.region.contains(p))
    }

    pub fn point(&self, i: usize) -> LatticePoint {
        self.ix.point(i)
    }

    pub fn indices(&self, c: &Configuration) -> Result<Vec<usize>> {
        c.iter()
            .map(|p| {
                self.index(p)
                    .ok_or_else(|| Error::Domain(format!("site {p} lies outside the region")))
            })
            .collect()
    }
}

/// Reusable state of the online executor.
#[derive(Default, Clone, Debug)]
pub struct Workspace {
    infected: Vec<bool>,
    active: Vec<u32>,
    slot: Vec<u32>,
    ever: Vec<bool>,
}

impl Workspace {
    pub fn infected(&self) -> &[bool] {
        &self.infected
    }

    pub fn population(&self) -> usize {
        self.active.len()
    }

    pub fn any_infected(&self, sites: &[usize]) -> bool {
        sites.iter().any(|&i| self.infected[i])
    }

    fn reset(&mut self, n: usize, track_ever: bool) {
        self.infected.clear();
        self.infected.resize(n, false);
        self.slot.clear();
        self.slot.resize(n, 0);
        self.active.clear();
        self.ever.clear();
        if track_ever {
            self.ever.resize(n, false);
        }
    }

    #[inline]
    fn add(&mut self, i: usize) {
        self.infected[i] = true;
        self.slot[i] = self.active.len() as u32;
        self.active.push(i as u32);
        if let Some(e) = self.ever.get_mut(i) {
            *e = true;
        }
    }

    #[inline]
    fn remove(&mut self, i: usize) {
        self.infected[i] = false;
        let k = self.slot[i] as usize;
        let last = self.active.pop().expect("nonempty");
        if last as usize != i {
            self.active[k] = last;
            self.slot[last as usize] = k as u32;
        }
    }
}

/// Online run on a prebuilt table. `init` holds site indices; the final
/// state stays in `ws`.
pub fn run_online(
    table: &SiteTable,
    init: &[usize],
    horizon: f64,
    rng: &mut ReplicaRng,
    opts: &EvolveOptions,
    ws: &mut Workspace,
) -> TrajectoryStats {
    ws.reset(table.len(), opts.track_ever);
    for &i in init {
        if !ws.infected[i] {
            ws.add(i);
        }
    }
    let watch_point = opts
        .watch
        .or_else(|| Some(table.region.origin()))
        .filter(|w| table.region.contains(w));
    let watch = watch_point.and_then(|w| table.index(&w));
    let mut stats = TrajectoryStats {
        max_population: ws.active.len(),
        watched: watch_point,
        ..Default::default()
    };
    if let Some(w) = watch {
        if ws.infected[w] {
            stats.origin_infection_times.push(0.0);
        }
    }
    if ws.active.is_empty() {
        stats.extinction_time = Some(0.0);
    }

    let mut rate_sum: f64 = ws.active.iter().map(|&i| table.total[i as usize]).sum();
    let mut t = 0.0;
    while !ws.active.is_empty() {
        t += -(-rng.random::<f64>()).ln_1p() / rate_sum;
        if t > horizon {
            break;
        }
        // site chosen with probability proportional to its total rate
        let i = loop {
            let i = ws.active[rng.random_range(0..ws.active.len())] as usize;
            if rng.random::<f64>() * table.max_total < table.total[i] {
                break i;
            }
        };
        stats.updates += 1;
        let mut u = rng.random::<f64>() * table.total[i];
        if u < 1.0 {
            ws.remove(i);
            rate_sum -= table.total[i];
            if watch == Some(i) {
                stats.origin_recovery_times.push(t);
            }
            if ws.active.is_empty() {
                stats.extinction_time = Some(t);
            }
        } else {
            u -= 1.0;
            let (a, b) = (table.start[i] as usize, table.start[i + 1] as usize);
            let k = (a..b).find(|&k| u < table.cumulative[k]).unwrap_or(b - 1);
            let j = table.target[k];
            if j == EXTERIOR {
                stats.boundary_suppressions += 1;
            } else if !ws.infected[j as usize] {
                let j = j as usize;
                ws.add(j);
                rate_sum += table.total[j];
                stats.max_population = stats.max_population.max(ws.active.len());
                if watch == Some(j) {
                    stats.origin_infection_times.push(t);
                }
            }
        }
        if stats.updates.is_multiple_of(16_384) {
            rate_sum = ws.active.iter().map(|&i| table.total[i as usize]).sum();
        }
        if stats.updates >= opts.max_updates {
            stats.budget_exceeded = true;
            break;
        }
    }
    if opts.track_ever {
        stats.ever_infected = Some(
            ws.ever
                .iter()
                .enumerate()
                .filter(|(_, &b)| b)
                .map(|(i, _)| table.point(i))
                .collect(),
        );
    }
    stats
}

/// Evolves `init` with exponential clocks on a finite region over
/// `[0, params.horizon]`. Equal in law to `evolve` on `generate_stream`.
pub fn evolve_online(
    init: &Configuration,
    env: &Environment,
    params: &ModelParams,
    region: &Region,
    seed: u64,
) -> Result<(Configuration, TrajectoryStats)> {
    let table = SiteTable::build(env, params, region)?;
    let init = table.indices(init)?;
    let mut rng = replica_rng(seed, 0, tag::DYNAMICS);
    let mut ws = Workspace::default();
    let stats = run_online(&table, &init, params.horizon, &mut rng, &EvolveOptions::default(), &mut ws);
    let fin = ws
        .infected
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(i, _)| table.point(i))
        .collect();
    Ok((fin, stats))
}
