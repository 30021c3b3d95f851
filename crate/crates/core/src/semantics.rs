//! Semantic maps, recommendation menus and the covers behind them.
//!
//! A semantic map turns `(public type, model)` into a message; the menu lets
//! an agent of any type decode a message into an arm. Every tie (arms,
//! centers, cells, ranking positions) goes to the lowest index, so maps are
//! deterministic across runs and platforms.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::domain::{AgentType, ModelVector};
use crate::error::{Error, Result};

/// Largest arm count for which rankings are enumerated (8! messages).
pub const MAX_RANKING_ARMS: usize = 8;
/// Cap on the number of centers a cover may produce.
pub const MAX_COVER_CENTERS: usize = 1_000_000;
/// Slack for points sitting on the outer boundary of a hypercube tiling.
const TILING_TOL: f64 = 1e-9;
const REVEAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Message {
    /// Direct recommendation.
    Arm(usize),
    /// Arms (coordinates) from best to worst.
    Ranking(Vec<usize>),
    /// Voronoi center index.
    Center(usize),
    /// Hypercube cell index.
    Cell(usize),
    /// `u / |u|` for one-dimensional models.
    Sign(i8),
    /// Index into a finite model set.
    Model(usize),
}

impl fmt::Display for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Message::Arm(i) => write!(f, "{i}"),
            Message::Ranking(r) => {
                write!(f, "rank:")?;
                for (k, a) in r.iter().enumerate() {
                    if k > 0 {
                        write!(f, ">")?;
                    }
                    write!(f, "{a}")?;
                }
                Ok(())
            }
            Message::Center(c) => write!(f, "c{c}"),
            Message::Cell(c) => write!(f, "q{c}"),
            Message::Sign(s) => write!(f, "{s:+}"),
            Message::Model(m) => write!(f, "m{m}"),
        }
    }
}

/// Disjoint `ℓ∞` cells of half-width `cell_radius` tiling
/// `origin + [0, 2ε·extents]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypercubeCover {
    pub origin: Vec<f64>,
    pub cell_radius: f64,
    pub extents: Vec<usize>,
}

impl HypercubeCover {
    pub fn new(origin: Vec<f64>, cell_radius: f64, extents: Vec<usize>) -> Result<Self> {
        let cover = Self {
            origin,
            cell_radius,
            extents,
        };
        cover.validate()?;
        Ok(cover)
    }

    pub fn validate(&self) -> Result<()> {
        if self.origin.is_empty() || self.origin.len() != self.extents.len() {
            return Err(Error::InvalidInput(
                "hypercube cover origin and extents must match".into(),
            ));
        }
        if !(self.cell_radius > 0.0 && self.cell_radius.is_finite()) || self.extents.contains(&0) {
            return Err(Error::InvalidInput(
                "hypercube cover needs a positive radius and extents".into(),
            ));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.origin.len()
    }

    pub fn side(&self) -> f64 {
        2.0 * self.cell_radius
    }

    pub fn cell_count(&self) -> usize {
        self.extents.iter().product()
    }

    pub fn lower(&self) -> Vec<f64> {
        self.origin.clone()
    }

    pub fn upper(&self) -> Vec<f64> {
        self.origin
            .iter()
            .zip(&self.extents)
            .map(|(o, &n)| o + self.side() * n as f64)
            .collect()
    }

    /// Per-dimension cell indices; a point on an interior face belongs to the
    /// cell with the smaller index.
    pub fn cell_indices(&self, u: &[f64]) -> Result<Vec<usize>> {
        if u.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: u.len(),
            });
        }
        u.iter()
            .zip(&self.origin)
            .zip(&self.extents)
            .map(|((&x, &o), &n)| {
                let s = (x - o) / self.side();
                if !(s >= -TILING_TOL && s <= n as f64 + TILING_TOL) {
                    return Err(Error::OutOfDomain(format!("coordinate {x} outside the tiled box")));
                }
                Ok(if s <= 0.0 {
                    0
                } else {
                    (s.ceil() as usize).saturating_sub(1).min(n - 1)
                })
            })
            .collect()
    }

    /// Linear cell index; dimension 0 varies fastest.
    pub fn cell_of(&self, u: &[f64]) -> Result<usize> {
        let idx = self.cell_indices(u)?;
        let mut linear = 0;
        let mut stride = 1;
        for (i, n) in idx.iter().zip(&self.extents) {
            linear += i * stride;
            stride *= n;
        }
        Ok(linear)
    }

    pub fn unravel(&self, cell: usize) -> Result<Vec<usize>> {
        if cell >= self.cell_count() {
            return Err(Error::InvalidMessage(Message::Cell(cell)));
        }
        let mut rest = cell;
        Ok(self
            .extents
            .iter()
            .map(|&n| {
                let i = rest % n;
                rest /= n;
                i
            })
            .collect())
    }

    pub fn cell_center(&self, cell: usize) -> Result<ModelVector> {
        let idx = self.unravel(cell)?;
        Ok(ModelVector::new(
            idx.iter()
                .zip(&self.origin)
                .map(|(&i, o)| o + self.cell_radius * (2 * i + 1) as f64)
                .collect(),
        ))
    }

    /// Clamps coordinatewise into the tiled box; the flag reports whether
    /// anything moved.
    pub fn clamp(&self, u: &[f64]) -> (Vec<f64>, bool) {
        let hi = self.upper();
        let mut moved = false;
        let v = u
            .iter()
            .zip(self.origin.iter().zip(&hi))
            .map(|(&x, (&a, &b))| {
                let c = x.clamp(a, b);
                moved |= c != x;
                c
            })
            .collect();
        (v, moved)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SemanticMap {
    /// `Q(x_pub, u) = argmax_i x_i·u` under the representative type of each
    /// public label.
    ArgmaxDirect {
        representatives: Vec<AgentType>,
    },
    /// Coordinates sorted in decreasing order. Fiber representatives are used
    /// by the menu for non-sleeping types.
    Ranking {
        #[serde(default)]
        fiber_representatives: Vec<(Vec<usize>, ModelVector)>,
    },
    VoronoiCover {
        centers: Vec<ModelVector>,
    },
    HypercubeCover(HypercubeCover),
    SignMap,
    FullReveal {
        models: Vec<ModelVector>,
    },
}

impl SemanticMap {
    /// Direct recommendations; the representative of public label `p` is the
    /// first type carrying that label.
    pub fn argmax_direct(types: &[AgentType]) -> Result<Self> {
        let labels = types.iter().map(AgentType::public_id).max().map_or(0, |m| m + 1);
        let representatives = (0..labels)
            .map(|p| {
                types
                    .iter()
                    .find(|x| x.public_id() == p)
                    .cloned()
                    .ok_or_else(|| Error::InvalidInput(format!("no type carries public label {p}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if representatives.is_empty() {
            return Err(Error::InvalidInput("argmax map needs at least one type".into()));
        }
        Ok(SemanticMap::ArgmaxDirect { representatives })
    }

    pub fn ranking() -> Self {
        SemanticMap::Ranking {
            fiber_representatives: Vec::new(),
        }
    }

    /// Ranking map whose menu, for general types, uses the centroid of the
    /// finite model set's fiber as the representative model.
    pub fn ranking_with_fibers(models: &[ModelVector]) -> Self {
        let mut fibers: BTreeMap<Vec<usize>, (DVector<f64>, usize)> = BTreeMap::new();
        for u in models {
            let r = rank_coordinates(u.as_slice());
            let e = fibers.entry(r).or_insert_with(|| (DVector::zeros(u.dim()), 0));
            e.0 += u.coords();
            e.1 += 1;
        }
        SemanticMap::Ranking {
            fiber_representatives: fibers
                .into_iter()
                .map(|(r, (sum, n))| (r, ModelVector::from_dvector(sum / n as f64)))
                .collect(),
        }
    }

    pub fn voronoi(centers: Vec<ModelVector>) -> Result<Self> {
        if centers.is_empty() {
            return Err(Error::InvalidInput("voronoi cover needs at least one center".into()));
        }
        for (a, ca) in centers.iter().enumerate() {
            for cb in &centers[a + 1..] {
                if ca.dim() != cb.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: ca.dim(),
                        got: cb.dim(),
                    });
                }
                if ca == cb {
                    return Err(Error::InvalidInput(format!("duplicate voronoi center {ca}")));
                }
            }
        }
        Ok(SemanticMap::VoronoiCover { centers })
    }

    /// Sign map on a one-dimensional model set that excludes zero.
    pub fn sign(models: &[ModelVector]) -> Result<Self> {
        if models.iter().any(|u| u.dim() != 1) {
            return Err(Error::InvalidInput("sign map requires d = 1".into()));
        }
        if models.iter().any(|u| u.as_slice()[0] == 0.0) {
            return Err(Error::InvalidInput("sign map requires a model set excluding 0".into()));
        }
        Ok(SemanticMap::SignMap)
    }

    pub fn full_reveal(models: Vec<ModelVector>) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::InvalidInput("full reveal needs a finite model set".into()));
        }
        Ok(SemanticMap::FullReveal { models })
    }

    pub fn name(&self) -> &'static str {
        match self {
            SemanticMap::ArgmaxDirect { .. } => "argmax_direct",
            SemanticMap::Ranking { .. } => "ranking",
            SemanticMap::VoronoiCover { .. } => "voronoi_cover",
            SemanticMap::HypercubeCover(_) => "hypercube_cover",
            SemanticMap::SignMap => "sign_map",
            SemanticMap::FullReveal { .. } => "full_reveal",
        }
    }

    /// `M = Q(x_pub, u)`.
    pub fn apply(&self, x_pub: usize, u: &ModelVector) -> Result<Message> {
        match self {
            SemanticMap::ArgmaxDirect { representatives } => {
                let x = representatives
                    .get(x_pub)
                    .ok_or_else(|| Error::InvalidInput(format!("public label {x_pub} has no representative type")))?;
                Ok(Message::Arm(x.best_arm(u.coords())?))
            }
            SemanticMap::Ranking { .. } => Ok(Message::Ranking(rank_coordinates(u.as_slice()))),
            SemanticMap::VoronoiCover { centers } => {
                if centers[0].dim() != u.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: centers[0].dim(),
                        got: u.dim(),
                    });
                }
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (c, center) in centers.iter().enumerate() {
                    let dist = (center.coords() - u.coords()).norm_squared();
                    if dist < best_d {
                        best = c;
                        best_d = dist;
                    }
                }
                Ok(Message::Center(best))
            }
            SemanticMap::HypercubeCover(cover) => Ok(Message::Cell(cover.cell_of(u.as_slice())?)),
            SemanticMap::SignMap => {
                if u.dim() != 1 {
                    return Err(Error::DimensionMismatch {
                        expected: 1,
                        got: u.dim(),
                    });
                }
                let v = u.as_slice()[0];
                if v == 0.0 || v.is_nan() {
                    return Err(Error::OutOfDomain("sign of zero".into()));
                }
                Ok(Message::Sign(if v > 0.0 { 1 } else { -1 }))
            }
            SemanticMap::FullReveal { models } => models
                .iter()
                .position(|m| m.dim() == u.dim() && m.distance(u) <= REVEAL_TOL)
                .map(Message::Model)
                .ok_or_else(|| Error::OutOfDomain(format!("model {u} not in the revealed set"))),
        }
    }

    /// The model a message stands for when a menu needs one.
    fn representative(&self, m: &Message) -> Result<ModelVector> {
        match (self, m) {
            (SemanticMap::VoronoiCover { centers }, Message::Center(c)) => {
                centers.get(*c).cloned().ok_or_else(|| Error::InvalidMessage(m.clone()))
            }
            (SemanticMap::HypercubeCover(cover), Message::Cell(c)) => cover.cell_center(*c),
            (SemanticMap::SignMap, Message::Sign(s)) if *s == 1 || *s == -1 => {
                Ok(ModelVector::new(vec![f64::from(*s)]))
            }
            (SemanticMap::FullReveal { models }, Message::Model(k)) => {
                models.get(*k).cloned().ok_or_else(|| Error::InvalidMessage(m.clone()))
            }
            (SemanticMap::Ranking { fiber_representatives }, Message::Ranking(r)) => {
                if let Some((_, u)) = fiber_representatives.iter().find(|(key, _)| key == r) {
                    return Ok(u.clone());
                }
                // Canonical point of the fiber: linearly decreasing scores.
                let d = r.len();
                let mut u = vec![0.0; d];
                for (pos, &arm) in r.iter().enumerate() {
                    u[arm] = (d - pos) as f64 / d as f64;
                }
                Ok(ModelVector::new(u))
            }
            _ => Err(Error::InvalidMessage(m.clone())),
        }
    }

    /// `menu_Q(x, m)`: the arm an agent of type `x` should play on message `m`.
    pub fn menu(&self, x: &AgentType, m: &Message) -> Result<usize> {
        match (self, m) {
            (SemanticMap::ArgmaxDirect { .. }, Message::Arm(i)) => {
                if *i < x.arms() {
                    Ok(*i)
                } else {
                    Err(Error::InvalidMessage(m.clone()))
                }
            }
            (SemanticMap::Ranking { .. }, Message::Ranking(r)) => {
                if !is_permutation(r) || r.len() != x.dim() {
                    return Err(Error::InvalidMessage(m.clone()));
                }
                if x.is_sleeping() {
                    // Top feasible arm in ranking order.
                    return r
                        .iter()
                        .copied()
                        .find(|&arm| arm < x.arms() && x.rows()[arm][arm] != 0.0)
                        .ok_or(Error::NoFeasibleArm);
                }
                x.best_arm(self.representative(m)?.coords())
            }
            _ => x.best_arm(self.representative(m)?.coords()),
        }
    }

    /// Every message the map can emit for `d`-dimensional models.
    pub fn message_set(&self, d: usize) -> Result<Vec<Message>> {
        Ok(match self {
            SemanticMap::ArgmaxDirect { representatives } => (0..representatives[0].arms()).map(Message::Arm).collect(),
            SemanticMap::Ranking { .. } => {
                if d > MAX_RANKING_ARMS {
                    return Err(Error::Unsupported(format!("enumerating {d}! rankings")));
                }
                permutations(d).into_iter().map(Message::Ranking).collect()
            }
            SemanticMap::VoronoiCover { centers } => (0..centers.len()).map(Message::Center).collect(),
            SemanticMap::HypercubeCover(cover) => (0..cover.cell_count()).map(Message::Cell).collect(),
            SemanticMap::SignMap => vec![Message::Sign(-1), Message::Sign(1)],
            SemanticMap::FullReveal { models } => (0..models.len()).map(Message::Model).collect(),
        })
    }
}

/// Coordinates sorted by decreasing value, lower index first on ties.
pub fn rank_coordinates(u: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..u.len()).collect();
    idx.sort_by(|&a, &b| u[b].total_cmp(&u[a]).then(a.cmp(&b)));
    idx
}

fn is_permutation(r: &[usize]) -> bool {
    let mut seen = vec![false; r.len()];
    r.iter().all(|&a| a < r.len() && !std::mem::replace(&mut seen[a], true))
}

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..n).collect();
    loop {
        out.push(cur.clone());
        // next lexicographic permutation
        let Some(i) = (1..n).rev().find(|&i| cur[i - 1] < cur[i]) else {
            break;
        };
        let j = (i..n).rev().find(|&j| cur[j] > cur[i - 1]).expect("pivot exists");
        cur.swap(i - 1, j);
        cur[i..].reverse();
    }
    out
}

/// Region to be covered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CoverDomain {
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Ball { radius: f64, dim: usize },
}

/// Axis-aligned grid of centers such that every point of the domain is
/// within `radius` (in `ℓ2`) of some center. For a ball, grid cells that
/// miss the ball are pruned; cells straddling the boundary keep their
/// center even if it lies outside.
pub fn build_voronoi_cover(domain: &CoverDomain, radius: f64) -> Result<Vec<ModelVector>> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::InvalidInput("cover radius must be positive".into()));
    }
    let (lo, hi, ball) = match domain {
        CoverDomain::Box { lo, hi } => {
            if lo.is_empty() || lo.len() != hi.len() || lo.iter().zip(hi).any(|(a, b)| !(a < b)) {
                return Err(Error::InvalidInput("cover box needs lo < hi".into()));
            }
            (lo.clone(), hi.clone(), None)
        }
        CoverDomain::Ball { radius: r, dim } => {
            if !(*r > 0.0) || *dim == 0 {
                return Err(Error::InvalidInput(
                    "cover ball needs positive radius and dimension".into(),
                ));
            }
            (vec![-r; *dim], vec![*r; *dim], Some(*r))
        }
    };
    let d = lo.len();
    let max_spacing = 2.0 * radius / (d as f64).sqrt();
    let counts: Vec<usize> = lo
        .iter()
        .zip(&hi)
        .map(|(a, b)| ((b - a) / max_spacing).ceil().max(1.0) as usize)
        .collect();
    let needed: f64 = counts.iter().map(|&n| n as f64).product();
    if needed > MAX_COVER_CENTERS as f64 {
        return Err(Error::CoverTooLarge {
            needed,
            cap: MAX_COVER_CENTERS,
        });
    }
    let spacing: Vec<f64> = (0..d).map(|k| (hi[k] - lo[k]) / counts[k] as f64).collect();
    let mut centers = Vec::new();
    let mut idx = vec![0usize; d];
    loop {
        let center: Vec<f64> = (0..d).map(|k| lo[k] + spacing[k] * (idx[k] as f64 + 0.5)).collect();
        let keep = match ball {
            None => true,
            Some(r) => {
                // distance from the origin to the nearest point of the cell
                let near: f64 = (0..d)
                    .map(|k| {
                        let a = center[k] - spacing[k] / 2.0;
                        let b = center[k] + spacing[k] / 2.0;
                        let c = 0.0f64.clamp(a, b);
                        c * c
                    })
                    .sum();
                near.sqrt() <= r
            }
        };
        if keep {
            centers.push(ModelVector::new(center));
        }
        let mut k = 0;
        while k < d {
            idx[k] += 1;
            if idx[k] < counts[k] {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
        if k == d {
            break;
        }
    }
    Ok(centers)
}

/// Cover whose Voronoi cells have diameter at most `granularity`: cells of
/// a radius-`r` cover can be `2r` wide, so the cover is built at half the
/// requested granularity.
pub fn voronoi_cover_for_granularity(domain: &CoverDomain, granularity: f64) -> Result<Vec<ModelVector>> {
    build_voronoi_cover(domain, granularity / 2.0)
}

/// Largest `ℓ2` diameter among the sampled fibers `{u : Q(u) = m}`.
pub fn granularity(smap: &SemanticMap, x_pub: usize, samples: &[ModelVector]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::InvalidInput("granularity needs at least two samples".into()));
    }
    let fibers = fibers(smap, x_pub, samples)?;
    let mut rho: f64 = 0.0;
    for members in fibers.values() {
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                rho = rho.max(samples[i].distance(&samples[j]));
            }
        }
    }
    Ok(rho)
}

/// Sample indices grouped by message.
pub fn fibers(smap: &SemanticMap, x_pub: usize, samples: &[ModelVector]) -> Result<BTreeMap<Message, Vec<usize>>> {
    let mut out: BTreeMap<Message, Vec<usize>> = BTreeMap::new();
    for (k, u) in samples.iter().enumerate() {
        out.entry(smap.apply(x_pub, u)?).or_default().push(k);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConsistencyMode {
    /// Type and model sets are complete enumerations; `alpha` is exact.
    Exhaustive,
    /// Samples only; `alpha` is an upper estimate.
    Sampled { n: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyWitness {
    pub type_index: usize,
    pub model_index: usize,
    pub message: Message,
    pub arm: usize,
    pub competitor: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub alpha: f64,
    pub mode: ConsistencyMode,
    pub approximate: bool,
    pub witness: Option<ConsistencyWitness>,
}

/// `α = min_{x,u,j≠i} x_i·u − x_j·u` with `i = menu(x, Q(pub(x), u))`.
pub fn check_menu_consistency(
    smap: &SemanticMap,
    types: &[AgentType],
    models: &[ModelVector],
    exhaustive: bool,
) -> Result<ConsistencyReport> {
    if types.is_empty() || models.is_empty() {
        return Err(Error::InvalidInput("menu-consistency needs types and models".into()));
    }
    let mut alpha = f64::INFINITY;
    let mut witness = None;
    for (ti, x) in types.iter().enumerate() {
        for (mi, u) in models.iter().enumerate() {
            let m = smap.apply(x.public_id(), u)?;
            let i = smap.menu(x, &m)?;
            let ri = x.rows()[i].dot(u.coords());
            for j in (0..x.arms()).filter(|&j| j != i) {
                let gap = ri - x.rows()[j].dot(u.coords());
                if gap < alpha {
                    alpha = gap;
                    witness = Some(ConsistencyWitness {
                        type_index: ti,
                        model_index: mi,
                        message: m.clone(),
                        arm: i,
                        competitor: j,
                    });
                }
            }
        }
    }
    let mode = if exhaustive {
        ConsistencyMode::Exhaustive
    } else {
        ConsistencyMode::Sampled {
            n: types.len() * models.len(),
        }
    };
    Ok(ConsistencyReport {
        alpha,
        mode,
        approximate: !exhaustive,
        witness,
    })
}
