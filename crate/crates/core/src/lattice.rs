//! Geometry of the half space `Z^d x Z^+`, the full space `Z^d`, and finite
//! boxes.
//!
//! Two points are adjacent when their Euclidean distance is exactly one, so
//! each point has at most `2 * coords` neighbours. Every ordering exposed here
//! (neighbour lists, box iteration, canonical edges) is lexicographic in the
//! coordinates, which makes all downstream runs reproducible.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Largest number of coordinates a point may carry.
pub const MAX_COORDS: usize = 3;

/// Coordinates must satisfy `|c| < COORD_LIMIT` so that [`LatticePoint::pack`]
/// is injective. Boxes up to side `2^20` anywhere in that range are covered.
pub const COORD_LIMIT: i64 = 1 << 20;

const PACK_BITS: u32 = 21;

/// A lattice site. The last coordinate is the height in half-space mode.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct LatticePoint {
    coords: [i64; MAX_COORDS],
    len: u8,
}

impl LatticePoint {
    /// Panics if more than [`MAX_COORDS`] coordinates are given.
    pub fn new(coords: &[i64]) -> Self {
        assert!(
            !coords.is_empty() && coords.len() <= MAX_COORDS,
            "a lattice point has 1..={MAX_COORDS} coordinates, got {}",
            coords.len()
        );
        let mut c = [0; MAX_COORDS];
        c[..coords.len()].copy_from_slice(coords);
        LatticePoint {
            coords: c,
            len: coords.len() as u8,
        }
    }

    pub fn origin(n: usize) -> Self {
        Self::new(&vec![0; n])
    }

    pub fn coords(&self) -> &[i64] {
        &self.coords[..self.len as usize]
    }

    pub fn dim(&self) -> usize {
        self.len as usize
    }

    pub fn get(&self, axis: usize) -> i64 {
        self.coords()[axis]
    }

    /// The point shifted by `delta` along `axis`.
    pub fn offset(&self, axis: usize, delta: i64) -> Self {
        let mut p = *self;
        p.coords[axis] += delta;
        p
    }

    pub fn with(&self, axis: usize, value: i64) -> Self {
        let mut p = *self;
        p.coords[axis] = value;
        p
    }

    /// Squared Euclidean distance.
    pub fn dist2(&self, other: &Self) -> i64 {
        debug_assert_eq!(self.len, other.len);
        self.coords()
            .iter()
            .zip(other.coords())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    /// Bijective 64-bit key: each coordinate is biased by `2^20` and stored in
    /// 21 bits, most significant coordinate first. Injective for all points
    /// with `|c| < 2^20` and at most three coordinates (63 bits used).
    pub fn pack(&self) -> u64 {
        debug_assert!(self.coords().iter().all(|c| c.abs() < COORD_LIMIT));
        self.coords().iter().fold(0u64, |acc, &c| {
            (acc << PACK_BITS) | ((c + COORD_LIMIT) as u64 & ((1 << PACK_BITS) - 1))
        })
    }

    pub fn unpack(key: u64, n: usize) -> Self {
        let mut c = [0i64; MAX_COORDS];
        for (i, slot) in c[..n].iter_mut().enumerate() {
            let shift = PACK_BITS * (n - 1 - i) as u32;
            *slot = ((key >> shift) & ((1 << PACK_BITS) - 1)) as i64 - COORD_LIMIT;
        }
        Self::new(&c[..n])
    }
}

impl Ord for LatticePoint {
    fn cmp(&self, other: &Self) -> Ordering {
        self.coords().cmp(other.coords())
    }
}

impl PartialOrd for LatticePoint {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Debug for LatticePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, c) in self.coords().iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")
    }
}

impl fmt::Display for LatticePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl Serialize for LatticePoint {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.coords().serialize(s)
    }
}

impl<'de> Deserialize<'de> for LatticePoint {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<i64>::deserialize(d)?;
        if v.is_empty() || v.len() > MAX_COORDS {
            return Err(serde::de::Error::custom(format!(
                "a lattice point has 1..={MAX_COORDS} coordinates, got {}",
                v.len()
            )));
        }
        Ok(LatticePoint::new(&v))
    }
}

/// Unoriented nearest-neighbour edge, stored with the lexicographically
/// smaller endpoint first.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct Edge {
    lo: LatticePoint,
    hi: LatticePoint,
}

impl Edge {
    pub fn new(p: LatticePoint, q: LatticePoint) -> Result<Self> {
        if p.dim() != q.dim() || p.dist2(&q) != 1 {
            return Err(Error::Domain(format!("{p} and {q} are not adjacent")));
        }
        Ok(if p < q {
            Edge { lo: p, hi: q }
        } else {
            Edge { lo: q, hi: p }
        })
    }

    pub fn endpoints(&self) -> (LatticePoint, LatticePoint) {
        (self.lo, self.hi)
    }

    /// The coordinate along which the endpoints differ.
    pub fn axis(&self) -> usize {
        (0..self.lo.dim())
            .find(|&i| self.lo.get(i) != self.hi.get(i))
            .expect("endpoints differ")
    }

    /// Collision-free 64-bit-pair key: packed lower endpoint and axis.
    pub fn key(&self) -> (u64, u64) {
        (self.lo.pack(), self.axis() as u64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    HalfSpace,
    FullSpace,
    FiniteBox,
}

/// Inclusive per-coordinate bounds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: Vec<i64>,
    pub hi: Vec<i64>,
}

/// A simulation domain. Half- and full-space regions may carry a truncation
/// box; a finite-box region is a graph in its own right with no exterior.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub mode: Mode,
    pub d: usize,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<Bounds>,
}

impl Region {
    pub fn half_space(d: usize) -> Self {
        Region {
            mode: Mode::HalfSpace,
            d,
            bounds: None,
        }
    }

    pub fn full_space(d: usize) -> Self {
        Region {
            mode: Mode::FullSpace,
            d,
            bounds: None,
        }
    }

    /// Truncation of the half space to `lo..=hi` (validated).
    pub fn half_space_box(lo: &[i64], hi: &[i64]) -> Result<Self> {
        Self::checked(Mode::HalfSpace, lo.len().saturating_sub(1), lo, hi)
    }

    pub fn full_space_box(lo: &[i64], hi: &[i64]) -> Result<Self> {
        Self::checked(Mode::FullSpace, lo.len(), lo, hi)
    }

    pub fn finite_box(lo: &[i64], hi: &[i64]) -> Result<Self> {
        Self::checked(Mode::FiniteBox, lo.len(), lo, hi)
    }

    fn checked(mode: Mode, d: usize, lo: &[i64], hi: &[i64]) -> Result<Self> {
        let r = Region {
            mode,
            d,
            bounds: Some(Bounds {
                lo: lo.to_vec(),
                hi: hi.to_vec(),
            }),
        };
        r.validate()?;
        Ok(r)
    }

    /// Number of coordinates of the points of this region.
    pub fn coords(&self) -> usize {
        match self.mode {
            Mode::HalfSpace => self.d + 1,
            Mode::FullSpace | Mode::FiniteBox => self.d,
        }
    }

    pub fn origin(&self) -> LatticePoint {
        LatticePoint::origin(self.coords())
    }

    pub fn is_finite(&self) -> bool {
        self.bounds.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.violations();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Domain(problems.join("; ")))
        }
    }

    pub(crate) fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.d == 0 {
            v.push("d must be at least 1".to_string());
        }
        let n = self.coords();
        if n > MAX_COORDS {
            v.push(format!(
                "{n} coordinates requested; at most {MAX_COORDS} are supported"
            ));
        }
        match (&self.bounds, self.mode) {
            (None, Mode::FiniteBox) => v.push("finite-box mode needs a box".to_string()),
            (None, _) => {}
            (Some(b), _) => {
                if b.lo.len() != n || b.hi.len() != n {
                    v.push(format!("box bounds must have {n} coordinates"));
                } else {
                    for i in 0..n {
                        if b.lo[i] > b.hi[i] {
                            v.push(format!("box is empty along axis {i}"));
                        }
                        if b.lo[i].abs() >= COORD_LIMIT || b.hi[i].abs() >= COORD_LIMIT {
                            v.push(format!("box exceeds |coordinate| < 2^20 on axis {i}"));
                        }
                    }
                    if self.mode == Mode::HalfSpace && b.lo[n - 1] < 0 {
                        v.push("half-space box must have a nonnegative last coordinate".into());
                    }
                }
            }
        }
        v
    }

    /// Whether `p` is a vertex of the underlying lattice, ignoring any
    /// truncation box.
    pub fn lattice_contains(&self, p: &LatticePoint) -> bool {
        if p.dim() != self.coords() {
            return false;
        }
        match self.mode {
            Mode::HalfSpace => p.get(p.dim() - 1) >= 0,
            Mode::FullSpace => true,
            Mode::FiniteBox => self.in_bounds(p),
        }
    }

    fn in_bounds(&self, p: &LatticePoint) -> bool {
        match &self.bounds {
            None => true,
            Some(b) => p
                .coords()
                .iter()
                .enumerate()
                .all(|(i, &c)| b.lo[i] <= c && c <= b.hi[i]),
        }
    }

    pub fn contains(&self, p: &LatticePoint) -> bool {
        self.lattice_contains(p) && self.in_bounds(p)
    }

    fn require(&self, p: &LatticePoint) -> Result<()> {
        if self.contains(p) {
            Ok(())
        } else {
            Err(Error::Domain(format!("{p} lies outside the region")))
        }
    }

    /// Adjacent points of the lattice, whether or not they are in the box.
    pub(crate) fn lattice_neighbors(&self, p: &LatticePoint) -> impl Iterator<Item = LatticePoint> + '_ {
        let p = *p;
        (0..p.dim())
            .flat_map(move |axis| [p.offset(axis, -1), p.offset(axis, 1)])
            .filter(move |q| self.lattice_contains(q))
    }

    /// Neighbours of `p` inside the region, in lexicographic order.
    pub fn neighbors(&self, p: &LatticePoint) -> Result<Vec<LatticePoint>> {
        self.require(p)?;
        let mut out: Vec<_> = self
            .lattice_neighbors(p)
            .filter(|q| self.in_bounds(q))
            .collect();
        out.sort();
        Ok(out)
    }

    /// Points of the region within Euclidean distance `m` of `x`.
    pub fn ball(&self, x: &LatticePoint, m: f64) -> Result<BTreeSet<LatticePoint>> {
        self.require(x)?;
        if !(m.is_finite() && m >= 0.0) {
            return Err(Error::Domain(format!("ball radius must be finite and >= 0, got {m}")));
        }
        let reach = m.floor() as i64;
        let m2 = m * m;
        let n = x.dim();
        let mut out = BTreeSet::new();
        let mut offset = vec![-reach; n];
        loop {
            let d2: i64 = offset.iter().map(|o| o * o).sum();
            if d2 as f64 <= m2 {
                let coords: Vec<i64> = x.coords().iter().zip(&offset).map(|(a, b)| a + b).collect();
                let q = LatticePoint::new(&coords);
                if self.contains(&q) {
                    out.insert(q);
                }
            }
            // odometer increment
            let mut axis = n;
            loop {
                if axis == 0 {
                    return Ok(out);
                }
                axis -= 1;
                if offset[axis] < reach {
                    offset[axis] += 1;
                    break;
                }
                offset[axis] = -reach;
            }
        }
    }

    pub fn indexer(&self) -> Result<BoxIndex> {
        self.validate()?;
        match &self.bounds {
            Some(b) => Ok(BoxIndex::new(&b.lo, &b.hi)),
            None => Err(Error::Domain("operation needs a finite region".into())),
        }
    }

    /// Every edge with both endpoints in the region, once each, canonical,
    /// in lexicographic order of the lower endpoint then axis.
    pub fn edges_in(&self) -> Result<impl Iterator<Item = Edge> + '_> {
        let ix = self.indexer()?;
        Ok((0..ix.len()).flat_map(move |i| {
            let p = ix.point(i);
            (0..p.dim()).filter_map(move |axis| {
                let q = p.offset(axis, 1);
                self.contains(&q).then_some(Edge { lo: p, hi: q })
            })
        }))
    }

    /// All points, lexicographic.
    pub fn points(&self) -> Result<impl Iterator<Item = LatticePoint>> {
        let ix = self.indexer()?;
        Ok((0..ix.len()).map(move |i| ix.point(i)))
    }
}

/// Dense row-major index of a box. Index order equals lexicographic order
/// of the points.
#[derive(Clone, Debug)]
pub struct BoxIndex {
    lo: Vec<i64>,
    extent: Vec<i64>,
    stride: Vec<usize>,
    len: usize,
}

impl BoxIndex {
    pub fn new(lo: &[i64], hi: &[i64]) -> Self {
        let extent: Vec<i64> = lo.iter().zip(hi).map(|(l, h)| h - l + 1).collect();
        let mut stride = vec![1usize; lo.len()];
        for i in (0..lo.len().saturating_sub(1)).rev() {
            stride[i] = stride[i + 1] * extent[i + 1] as usize;
        }
        let len = extent.iter().map(|&e| e.max(0) as usize).product();
        BoxIndex {
            lo: lo.to_vec(),
            extent,
            stride,
            len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn index(&self, p: &LatticePoint) -> Option<usize> {
        if p.dim() != self.lo.len() {
            return None;
        }
        let mut idx = 0;
        for (i, &c) in p.coords().iter().enumerate() {
            let off = c - self.lo[i];
            if off < 0 || off >= self.extent[i] {
                return None;
            }
            idx += off as usize * self.stride[i];
        }
        Some(idx)
    }

    pub fn point(&self, mut idx: usize) -> LatticePoint {
        let mut c = [0i64; MAX_COORDS];
        for ((ci, lo), stride) in c.iter_mut().zip(&self.lo).zip(&self.stride) {
            *ci = lo + (idx / stride) as i64;
            idx %= stride;
        }
        LatticePoint::new(&c[..self.lo.len()])
    }
}
