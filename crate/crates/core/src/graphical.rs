//! Materialised graphical representation.
//!
//! Each site carries a rate-1 Poisson process of recovery marks and each
//! ordered pair of adjacent sites a Poisson process of infection arrows at
//! rate `lambda * lambda_e`. Realising all of them on a finite region and a
//! time window gives an [`EventStream`] from which every initial condition
//! can be evolved on the same randomness.
//!
//! Times are kept as integer ticks on a grid of `2^53` steps per horizon
//! (the `time` field is derived from the tick). Reversal maps a tick `k` to
//! `2^53 - k`, so reversing twice is exactly the identity.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::Serialize;

use crate::environment::{Environment, ModelParams};
use crate::error::{Error, Result};
use crate::lattice::{Edge, LatticePoint, Region};
use crate::rng::{keyed, replica_rng, tag, unit_f64, ReplicaRng};

/// Number of time ticks per horizon.
pub const TICKS: u64 = 1 << 53;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum EventKind {
    Recovery { site: LatticePoint },
    Arrow { from: LatticePoint, to: LatticePoint },
}

impl EventKind {
    fn rank(&self) -> u8 {
        match self {
            EventKind::Recovery { .. } => 0,
            EventKind::Arrow { .. } => 1,
        }
    }

    fn locus(&self) -> (LatticePoint, Option<LatticePoint>) {
        match *self {
            EventKind::Recovery { site } => (site, None),
            EventKind::Arrow { from, to } => (from, Some(to)),
        }
    }

    pub fn is_arrow(&self) -> bool {
        matches!(self, EventKind::Arrow { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Event {
    pub tick: u64,
    pub time: f64,
    pub kind: EventKind,
}

/// Total order on events: time, then recoveries before arrows, then
/// lexicographic location.
fn order_key(e: &Event) -> (u64, u8, LatticePoint, Option<LatticePoint>) {
    let (a, b) = e.kind.locus();
    (e.tick, e.kind.rank(), a, b)
}

#[inline]
pub fn tick_to_time(tick: u64, horizon: f64) -> f64 {
    tick as f64 / TICKS as f64 * horizon
}

/// Smallest tick whose time is at least `t`.
pub fn time_to_tick(t: f64, horizon: f64) -> u64 {
    if t <= 0.0 {
        return 0;
    }
    if t >= horizon {
        return TICKS;
    }
    let mut k = ((t / horizon) * TICKS as f64) as u64;
    while k > 0 && tick_to_time(k - 1, horizon) >= t {
        k -= 1;
    }
    while tick_to_time(k, horizon) < t {
        k += 1;
    }
    k
}

#[derive(Clone, Debug)]
pub struct EventStream {
    region: Region,
    horizon: f64,
    seed: u64,
    events: Vec<Event>,
}

impl EventStream {
    /// Builds a stream from explicit events; they are sorted into the
    /// canonical order. Fails if an event leaves the region, an arrow joins
    /// non-adjacent sites, or a tick falls outside `1..TICKS`.
    pub fn from_events(region: Region, horizon: f64, seed: u64, mut events: Vec<Event>) -> Result<Self> {
        region.validate()?;
        for e in &events {
            if e.tick == 0 || e.tick >= TICKS {
                return Err(Error::Domain(format!("event tick {} outside (0, 2^53)", e.tick)));
            }
            match e.kind {
                EventKind::Recovery { site } => {
                    if !region.contains(&site) {
                        return Err(Error::Domain(format!("recovery at {site} outside the region")));
                    }
                }
                EventKind::Arrow { from, to } => {
                    if !region.contains(&from) || !region.contains(&to) {
                        return Err(Error::Domain(format!("arrow {from}->{to} leaves the region")));
                    }
                    Edge::new(from, to)?;
                }
            }
        }
        for e in &mut events {
            e.time = tick_to_time(e.tick, horizon);
        }
        events.sort_unstable_by_key(order_key);
        Ok(EventStream {
            region,
            horizon,
            seed,
            events,
        })
    }

    pub fn region(&self) -> &Region {
        &self.region
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn arrows(&self) -> impl Iterator<Item = &Event> {
        self.events.iter().filter(|e| e.kind.is_arrow())
    }

    pub fn recoveries(&self) -> impl Iterator<Item = &Event> {
        self.events.iter().filter(|e| !e.kind.is_arrow())
    }

    /// Debug dump: `time,kind,site_or_from,to`, coordinates `;`-separated.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let fmt = |p: &LatticePoint| {
            p.coords()
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(";")
        };
        writeln!(w, "time,kind,site_or_from,to")?;
        for e in &self.events {
            match e.kind {
                EventKind::Recovery { site } => writeln!(w, "{},recovery,{},", e.time, fmt(&site))?,
                EventKind::Arrow { from, to } => writeln!(w, "{},arrow,{},{}", e.time, fmt(&from), fmt(&to))?,
            }
        }
        Ok(())
    }
}

fn push_poisson_marks(
    rng: &mut ReplicaRng,
    mean: f64,
    kind: EventKind,
    horizon: f64,
    out: &mut Vec<Event>,
) {
    if mean <= 0.0 {
        return;
    }
    let count = Poisson::new(mean).expect("finite positive mean").sample(rng) as u64;
    for _ in 0..count {
        let tick = rng.random_range(1..TICKS);
        out.push(Event {
            tick,
            time: tick_to_time(tick, horizon),
            kind,
        });
    }
}

/// Realises recovery marks and infection arrows on a finite region over
/// `[0, params.horizon]`. Edges with zero effective rate produce no arrows.
pub fn generate_stream(
    env: &Environment,
    params: &ModelParams,
    region: &Region,
    seed: u64,
) -> Result<EventStream> {
    generate(env, params, region, seed, false)
}

/// Like [`generate_stream`], but also realises the arrows from region sites
/// to lattice neighbours outside the region. Evolution inside the region
/// suppresses them and counts them as boundary suppressions.
pub fn generate_open_stream(
    env: &Environment,
    params: &ModelParams,
    region: &Region,
    seed: u64,
) -> Result<EventStream> {
    generate(env, params, region, seed, true)
}

fn generate(env: &Environment, params: &ModelParams, region: &Region, seed: u64, open: bool) -> Result<EventStream> {
    params.validate()?;
    let ix = region.indexer()?;
    let horizon = params.horizon;
    let mut rng = replica_rng(seed, 0, tag::STREAM);
    let mut events = Vec::new();
    for i in 0..ix.len() {
        let x = ix.point(i);
        push_poisson_marks(&mut rng, horizon, EventKind::Recovery { site: x }, horizon, &mut events);
        let targets: Vec<LatticePoint> = if open {
            region.lattice_neighbors(&x).collect()
        } else {
            region.neighbors(&x)?
        };
        for y in targets {
            let rate = env.effective_rate(params, &Edge::new(x, y)?);
            push_poisson_marks(&mut rng, rate * horizon, EventKind::Arrow { from: x, to: y }, horizon, &mut events);
        }
    }
    events.sort_unstable_by_key(order_key);
    Ok(EventStream {
        region: region.clone(),
        horizon,
        seed,
        events,
    })
}

/// Time reversal: `t -> T - t`, arrows flipped, recovery marks in place.
pub fn reverse_stream(s: &EventStream) -> EventStream {
    let mut events: Vec<Event> = s
        .events
        .iter()
        .map(|e| {
            let tick = TICKS - e.tick;
            let kind = match e.kind {
                EventKind::Recovery { site } => EventKind::Recovery { site },
                EventKind::Arrow { from, to } => EventKind::Arrow { from: to, to: from },
            };
            Event {
                tick,
                time: tick_to_time(tick, s.horizon),
                kind,
            }
        })
        .collect();
    events.sort_unstable_by_key(order_key);
    EventStream {
        region: s.region.clone(),
        horizon: s.horizon,
        seed: s.seed,
        events,
    }
}

/// Keeps each arrow independently with probability `keep_prob`; recovery
/// marks are untouched.
///
/// The coin of the `k`-th arrow is the keyed uniform `U(seed, k)` and the
/// arrow survives iff `U < keep_prob`. With a shared seed, thinnings at
/// `q1 <= q2` are therefore nested: every arrow kept at `q1` is kept at
/// `q2`. Thinning a `lambda` stream with `keep_prob = lambda' / lambda`
/// realises the monotone coupling of the two parameters.
pub fn thin_stream(s: &EventStream, keep_prob: f64, seed: u64) -> Result<EventStream> {
    if !(0.0..=1.0).contains(&keep_prob) {
        return Err(Error::Domain(format!("keep_prob must lie in [0, 1], got {keep_prob}")));
    }
    let mut arrow_index = 0u64;
    let events = s
        .events
        .iter()
        .filter(|e| {
            if !e.kind.is_arrow() {
                return true;
            }
            let u = unit_f64(keyed(seed ^ tag::THINNING.rotate_left(48), &[arrow_index]));
            arrow_index += 1;
            u < keep_prob
        })
        .copied()
        .collect();
    Ok(EventStream {
        region: s.region.clone(),
        horizon: s.horizon,
        seed: s.seed,
        events,
    })
}
