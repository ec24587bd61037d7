//! Static road network: intersections, directed road segments, lanes,
//! traffic movements and phase tables, plus network-distance queries.
//!
//! Every segment carries exactly three lanes, one per turn class at its
//! downstream intersection (left, straight, right). Intersections expose four
//! compass approaches; a missing approach simply has no lanes, which keeps the
//! per-intersection observation layout fixed.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{EntityKind, Error, Result};

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub u32);

        impl $name {
            #[inline]
            pub fn index(self) -> usize {
                self.0 as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }

        impl From<$name> for u64 {
            fn from(id: $name) -> u64 {
                id.0 as u64
            }
        }
    };
}

id_type!(IntersectionId);
id_type!(SegmentId);
id_type!(
    /// Global lane index: `segment * LANES_PER_SEGMENT + turn`.
    LaneId
);
id_type!(PhaseId);

pub const LANES_PER_SEGMENT: usize = 3;
pub const SIDE_COUNT: usize = 4;
/// Width of the incoming (or outgoing) lane block of an observation.
pub const LANES_PER_INTERSECTION: usize = SIDE_COUNT * LANES_PER_SEGMENT;
/// Signalled actions: WE-straight, NS-straight, WE-left, NS-left.
pub const PHASE_COUNT: usize = 4;

/// Compass side of an intersection through which a road attaches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    North = 0,
    East = 1,
    South = 2,
    West = 3,
}

impl Side {
    pub const ALL: [Side; SIDE_COUNT] = [Side::North, Side::East, Side::South, Side::West];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Side {
        Side::ALL[i % SIDE_COUNT]
    }

    pub fn opposite(self) -> Side {
        Side::from_index(self.index() + 2)
    }

    pub fn name(self) -> &'static str {
        match self {
            Side::North => "north",
            Side::East => "east",
            Side::South => "south",
            Side::West => "west",
        }
    }
}

/// Turn class of a movement, also the lane index within a segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Turn {
    Left = 0,
    Straight = 1,
    Right = 2,
}

impl Turn {
    pub const ALL: [Turn; LANES_PER_SEGMENT] = [Turn::Left, Turn::Straight, Turn::Right];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    /// Side a vehicle leaves through when it arrives from `from` and makes this turn.
    pub fn exit_side(self, from: Side) -> Side {
        match self {
            Turn::Straight => from.opposite(),
            Turn::Right => Side::from_index(from.index() + 3),
            Turn::Left => Side::from_index(from.index() + 1),
        }
    }

    /// Turn connecting arrival side `from` to exit side `to`; `None` for a U-turn.
    pub fn between(from: Side, to: Side) -> Option<Turn> {
        Turn::ALL.into_iter().find(|t| t.exit_side(from) == to)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Endpoint {
    Node(IntersectionId),
    /// Virtual source or sink outside the modelled network.
    Boundary,
}

impl Endpoint {
    pub fn node(self) -> Option<IntersectionId> {
        match self {
            Endpoint::Node(id) => Some(id),
            Endpoint::Boundary => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadSegment {
    pub id: SegmentId,
    pub from: Endpoint,
    pub to: Endpoint,
    pub length_m: f64,
    pub speed_limit_mps: f64,
}

impl RoadSegment {
    /// Both ends are intersections (as opposed to a virtual boundary road).
    pub fn is_internal(&self) -> bool {
        self.from.node().is_some() && self.to.node().is_some()
    }

    pub fn lane(&self, turn: Turn) -> LaneId {
        lane_id(self.id, turn)
    }

    pub fn lanes(&self) -> [LaneId; LANES_PER_SEGMENT] {
        Turn::ALL.map(|t| self.lane(t))
    }
}

#[inline]
pub fn lane_id(segment: SegmentId, turn: Turn) -> LaneId {
    LaneId(segment.0 * LANES_PER_SEGMENT as u32 + turn as u32)
}

#[inline]
pub fn lane_segment(lane: LaneId) -> SegmentId {
    SegmentId(lane.0 / LANES_PER_SEGMENT as u32)
}

#[inline]
pub fn lane_turn(lane: LaneId) -> Turn {
    Turn::ALL[lane.index() % LANES_PER_SEGMENT]
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Approach {
    pub incoming: Option<SegmentId>,
    pub outgoing: Option<SegmentId>,
}

/// Traffic movement `(l, l')` from an incoming lane to an outgoing lane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Movement {
    pub from_lane: LaneId,
    pub to_lane: LaneId,
    pub side: Side,
    pub turn: Turn,
    /// Index of the outgoing lane in the intersection's 12-lane outgoing block.
    pub out_slot: u8,
}

impl Movement {
    /// Index of the incoming lane in the intersection's 12-lane incoming block.
    pub fn in_slot(&self) -> usize {
        self.side.index() * LANES_PER_SEGMENT + self.turn.index()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub id: PhaseId,
    /// Signalled turns that are green, as `(arrival side, turn)`.
    pub turns: Vec<(Side, Turn)>,
    pub green_movements: Vec<Movement>,
}

impl Phase {
    pub fn allows(&self, side: Side, turn: Turn) -> bool {
        self.turns.contains(&(side, turn))
    }
}

/// The four signalled phases in action order.
pub fn standard_phase_turns() -> [[(Side, Turn); 2]; PHASE_COUNT] {
    [
        [(Side::East, Turn::Straight), (Side::West, Turn::Straight)],
        [(Side::North, Turn::Straight), (Side::South, Turn::Straight)],
        [(Side::East, Turn::Left), (Side::West, Turn::Left)],
        [(Side::North, Turn::Left), (Side::South, Turn::Left)],
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intersection {
    pub id: IntersectionId,
    pub position: [f64; 2],
    pub approaches: [Approach; SIDE_COUNT],
    pub movements: Vec<Movement>,
    pub phases: Vec<Phase>,
}

impl Intersection {
    /// Incoming lanes `L_in`.
    pub fn incoming_lanes(&self) -> Vec<LaneId> {
        self.approaches
            .iter()
            .filter_map(|a| a.incoming)
            .flat_map(|s| Turn::ALL.map(|t| lane_id(s, t)))
            .collect()
    }

    /// Outgoing lanes `L_out`.
    pub fn outgoing_lanes(&self) -> Vec<LaneId> {
        self.approaches
            .iter()
            .filter_map(|a| a.outgoing)
            .flat_map(|s| Turn::ALL.map(|t| lane_id(s, t)))
            .collect()
    }

    pub fn side_of_incoming(&self, seg: SegmentId) -> Option<Side> {
        Side::ALL
            .into_iter()
            .find(|s| self.approaches[s.index()].incoming == Some(seg))
    }

    pub fn side_of_outgoing(&self, seg: SegmentId) -> Option<Side> {
        Side::ALL
            .into_iter()
            .find(|s| self.approaches[s.index()].outgoing == Some(seg))
    }

    /// Whether the turn exists here (incoming road on `side`, outgoing road on its exit side).
    pub fn has_turn(&self, side: Side, turn: Turn) -> bool {
        self.approaches[side.index()].incoming.is_some()
            && self.approaches[turn.exit_side(side).index()].outgoing.is_some()
    }
}

/// Directed road network `G = (V, E)`. Immutable once built.
#[derive(Debug, Clone)]
pub struct RoadGraph {
    intersections: Vec<Intersection>,
    segments: Vec<RoadSegment>,
    outgoing: Vec<Vec<SegmentId>>,
    incoming: Vec<Vec<SegmentId>>,
    pair_index: HashMap<(IntersectionId, IntersectionId), SegmentId>,
    distance_rows: Vec<OnceLock<Vec<f64>>>,
}

impl RoadGraph {
    pub fn intersections(&self) -> &[Intersection] {
        &self.intersections
    }

    pub fn segments(&self) -> &[RoadSegment] {
        &self.segments
    }

    pub fn intersection_count(&self) -> usize {
        self.intersections.len()
    }

    pub fn lane_count(&self) -> usize {
        self.segments.len() * LANES_PER_SEGMENT
    }

    pub fn internal_segment_count(&self) -> usize {
        self.segments.iter().filter(|s| s.is_internal()).count()
    }

    pub fn intersection(&self, id: IntersectionId) -> Result<&Intersection> {
        self.intersections
            .get(id.index())
            .ok_or_else(|| Error::unknown(EntityKind::Intersection, id))
    }

    pub fn segment(&self, id: SegmentId) -> Result<&RoadSegment> {
        self.segments
            .get(id.index())
            .ok_or_else(|| Error::unknown(EntityKind::Segment, id))
    }

    pub fn check_lane(&self, lane: LaneId) -> Result<()> {
        if lane.index() < self.lane_count() {
            Ok(())
        } else {
            Err(Error::unknown(EntityKind::Lane, lane))
        }
    }

    /// Internal segments leaving `v`.
    pub fn outgoing(&self, v: IntersectionId) -> &[SegmentId] {
        &self.outgoing[v.index()]
    }

    /// Internal segments entering `v`.
    pub fn incoming(&self, v: IntersectionId) -> &[SegmentId] {
        &self.incoming[v.index()]
    }

    /// Downstream intersections reachable over one internal segment, ascending by id.
    pub fn neighbors(&self, v: IntersectionId) -> Vec<IntersectionId> {
        let mut out: Vec<_> = self.outgoing[v.index()]
            .iter()
            .filter_map(|s| self.segments[s.index()].to.node())
            .collect();
        out.sort();
        out
    }

    pub fn segment_between(&self, a: IntersectionId, b: IntersectionId) -> Option<SegmentId> {
        self.pair_index.get(&(a, b)).copied()
    }

    /// Length of the shortest directed path by segment length, `f64::INFINITY` when unreachable.
    pub fn network_distance(&self, a: IntersectionId, b: IntersectionId) -> Result<f64> {
        self.intersection(a)?;
        self.intersection(b)?;
        Ok(self.distances_from(a)[b.index()])
    }

    /// Memoized single-source distance row.
    pub fn distances_from(&self, a: IntersectionId) -> &[f64] {
        self.distance_rows[a.index()].get_or_init(|| {
            let tree = shortest_path_tree(self, a, |s| s.length_m, None);
            tree.cost
        })
    }

    pub fn validate(&self) -> Result<()> {
        for seg in &self.segments {
            let id = seg.id.0;
            if !(seg.length_m > 0.0 && seg.length_m.is_finite()) {
                return Err(Error::invariant(EntityKind::Segment, id, "length must be > 0"));
            }
            if !(seg.speed_limit_mps > 0.0 && seg.speed_limit_mps.is_finite()) {
                return Err(Error::invariant(EntityKind::Segment, id, "speed limit must be > 0"));
            }
            match (seg.from, seg.to) {
                (Endpoint::Node(a), Endpoint::Node(b)) if a == b => {
                    return Err(Error::invariant(EntityKind::Segment, id, "endpoints must differ"));
                }
                (Endpoint::Boundary, Endpoint::Boundary) => {
                    return Err(Error::invariant(
                        EntityKind::Segment,
                        id,
                        "boundary road must touch an intersection",
                    ));
                }
                _ => {}
            }
            for end in [seg.from, seg.to] {
                if let Endpoint::Node(n) = end {
                    if n.index() >= self.intersections.len() {
                        return Err(Error::unknown(EntityKind::Intersection, n));
                    }
                }
            }
        }
        for node in &self.intersections {
            for side in Side::ALL {
                let a = node.approaches[side.index()];
                if let Some(s) = a.incoming {
                    if self.segment(s)?.to != Endpoint::Node(node.id) {
                        return Err(Error::invariant(
                            EntityKind::Segment,
                            s.0,
                            format!("registered as incoming at intersection {} but ends elsewhere", node.id),
                        ));
                    }
                }
                if let Some(s) = a.outgoing {
                    if self.segment(s)?.from != Endpoint::Node(node.id) {
                        return Err(Error::invariant(
                            EntityKind::Segment,
                            s.0,
                            format!("registered as outgoing at intersection {} but starts elsewhere", node.id),
                        ));
                    }
                }
            }
            let l_in = node.incoming_lanes();
            let l_out = node.outgoing_lanes();
            for m in &node.movements {
                if !l_in.contains(&m.from_lane) || !l_out.contains(&m.to_lane) {
                    return Err(Error::invariant(
                        EntityKind::Intersection,
                        node.id.0,
                        "movement references a lane outside L_in x L_out",
                    ));
                }
            }
            for (i, p) in node.phases.iter().enumerate() {
                for q in &node.phases[i + 1..] {
                    if p.green_movements.iter().any(|m| q.green_movements.contains(m)) {
                        return Err(Error::invariant(
                            EntityKind::Phase,
                            p.id.0,
                            format!("phases overlap at intersection {}", node.id),
                        ));
                    }
                }
                if p.turns.iter().any(|&(_, t)| t == Turn::Right) {
                    return Err(Error::invariant(
                        EntityKind::Phase,
                        p.id.0,
                        "right turns are always permitted and never signalled",
                    ));
                }
            }
        }
        for (v, segs) in self.outgoing.iter().enumerate() {
            for s in segs {
                if self.segments[s.index()].from != Endpoint::Node(IntersectionId(v as u32)) {
                    return Err(Error::invariant(EntityKind::Segment, s.0, "adjacency mismatch"));
                }
            }
        }
        Ok(())
    }
}

/// Incremental constructor for [`RoadGraph`]; movements and phases are derived on `build`.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    positions: Vec<[f64; 2]>,
    approaches: Vec<[Approach; SIDE_COUNT]>,
    segments: Vec<RoadSegment>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_intersection(&mut self, position: [f64; 2]) -> IntersectionId {
        self.positions.push(position);
        self.approaches.push([Approach::default(); SIDE_COUNT]);
        IntersectionId(self.positions.len() as u32 - 1)
    }

    fn slot(&mut self, v: IntersectionId) -> Result<&mut [Approach; SIDE_COUNT]> {
        self.approaches
            .get_mut(v.index())
            .ok_or_else(|| Error::unknown(EntityKind::Intersection, v))
    }

    /// Directed segment leaving `from` through `from_side` and entering `to` from `to_side`.
    pub fn add_segment(
        &mut self,
        from: IntersectionId,
        from_side: Side,
        to: IntersectionId,
        to_side: Side,
        length_m: f64,
        speed_limit_mps: f64,
    ) -> Result<SegmentId> {
        let id = SegmentId(self.segments.len() as u32);
        if from == to {
            return Err(Error::invariant(EntityKind::Segment, id, "endpoints must differ"));
        }
        let out = &mut self.slot(from)?[from_side.index()];
        if out.outgoing.is_some() {
            return Err(Error::invalid(format!(
                "intersection {from} already has an outgoing road on its {} side",
                from_side.name()
            )));
        }
        out.outgoing = Some(id);
        let inc = &mut self.slot(to)?[to_side.index()];
        if inc.incoming.is_some() {
            return Err(Error::invalid(format!(
                "intersection {to} already has an incoming road on its {} side",
                to_side.name()
            )));
        }
        inc.incoming = Some(id);
        self.segments.push(RoadSegment {
            id,
            from: Endpoint::Node(from),
            to: Endpoint::Node(to),
            length_m,
            speed_limit_mps,
        });
        Ok(id)
    }

    pub fn add_boundary_entry(&mut self, to: IntersectionId, side: Side, length_m: f64, speed: f64) -> Result<SegmentId> {
        let id = SegmentId(self.segments.len() as u32);
        let inc = &mut self.slot(to)?[side.index()];
        if inc.incoming.is_some() {
            return Err(Error::invalid(format!("intersection {to} already has an incoming road on its {} side", side.name())));
        }
        inc.incoming = Some(id);
        self.segments.push(RoadSegment { id, from: Endpoint::Boundary, to: Endpoint::Node(to), length_m, speed_limit_mps: speed });
        Ok(id)
    }

    pub fn add_boundary_exit(&mut self, from: IntersectionId, side: Side, length_m: f64, speed: f64) -> Result<SegmentId> {
        let id = SegmentId(self.segments.len() as u32);
        let out = &mut self.slot(from)?[side.index()];
        if out.outgoing.is_some() {
            return Err(Error::invalid(format!("intersection {from} already has an outgoing road on its {} side", side.name())));
        }
        out.outgoing = Some(id);
        self.segments.push(RoadSegment { id, from: Endpoint::Node(from), to: Endpoint::Boundary, length_m, speed_limit_mps: speed });
        Ok(id)
    }

    pub fn build(self) -> Result<RoadGraph> {
        let n = self.positions.len();
        let mut intersections = Vec::with_capacity(n);
        for (i, (position, approaches)) in self.positions.into_iter().zip(self.approaches).enumerate() {
            let id = IntersectionId(i as u32);
            let movements = derive_movements(&approaches);
            let phases = standard_phase_turns()
                .iter()
                .enumerate()
                .map(|(p, turns)| {
                    let turns: Vec<_> = turns
                        .iter()
                        .copied()
                        .filter(|&(s, t)| movements.iter().any(|m| m.side == s && m.turn == t))
                        .collect();
                    let green_movements = movements
                        .iter()
                        .copied()
                        .filter(|m| turns.contains(&(m.side, m.turn)))
                        .collect();
                    Phase { id: PhaseId(p as u32), turns, green_movements }
                })
                .collect();
            intersections.push(Intersection { id, position, approaches, movements, phases });
        }
        let mut outgoing = vec![Vec::new(); n];
        let mut incoming = vec![Vec::new(); n];
        let mut pair_index = HashMap::new();
        for seg in &self.segments {
            if let (Endpoint::Node(a), Endpoint::Node(b)) = (seg.from, seg.to) {
                if a.index() >= n || b.index() >= n {
                    return Err(Error::unknown(EntityKind::Intersection, a.max(b)));
                }
                outgoing[a.index()].push(seg.id);
                incoming[b.index()].push(seg.id);
                if pair_index.insert((a, b), seg.id).is_some() {
                    return Err(Error::invariant(
                        EntityKind::Segment,
                        seg.id,
                        format!("parallel segment between {a} and {b}"),
                    ));
                }
            }
        }
        let graph = RoadGraph {
            intersections,
            segments: self.segments,
            outgoing,
            incoming,
            pair_index,
            distance_rows: (0..n).map(|_| OnceLock::new()).collect(),
        };
        graph.validate()?;
        Ok(graph)
    }
}

fn derive_movements(approaches: &[Approach; SIDE_COUNT]) -> Vec<Movement> {
    let mut out = Vec::new();
    for side in Side::ALL {
        let Some(seg_in) = approaches[side.index()].incoming else { continue };
        for turn in Turn::ALL {
            let exit = turn.exit_side(side);
            let Some(seg_out) = approaches[exit.index()].outgoing else { continue };
            for k in Turn::ALL {
                out.push(Movement {
                    from_lane: lane_id(seg_in, turn),
                    to_lane: lane_id(seg_out, k),
                    side,
                    turn,
                    out_slot: (exit.index() * LANES_PER_SEGMENT + k.index()) as u8,
                });
            }
        }
    }
    out
}

/// Row-major grid with bidirectional segments between orthogonal neighbours and
/// virtual entry/exit roads of `segment_length_m` on every border approach.
///
/// Intersection `(r, c)` has id `r * cols + c`; row 0 is the northern edge.
pub fn build_grid(rows: usize, cols: usize, segment_length_m: f64, speed_limit_mps: f64) -> Result<RoadGraph> {
    if rows == 0 || cols == 0 {
        return Err(Error::invalid(format!("grid needs at least one row and column, got {rows}x{cols}")));
    }
    if !(segment_length_m > 0.0) {
        return Err(Error::invalid("segment length must be > 0"));
    }
    if !(speed_limit_mps > 0.0) {
        return Err(Error::invalid("speed limit must be > 0"));
    }
    let mut b = GraphBuilder::new();
    let id = |r: usize, c: usize| IntersectionId((r * cols + c) as u32);
    for r in 0..rows {
        for c in 0..cols {
            b.add_intersection([c as f64 * segment_length_m, (rows - 1 - r) as f64 * segment_length_m]);
        }
    }
    for r in 0..rows {
        for c in 0..cols {
            if c + 1 < cols {
                b.add_segment(id(r, c), Side::East, id(r, c + 1), Side::West, segment_length_m, speed_limit_mps)?;
                b.add_segment(id(r, c + 1), Side::West, id(r, c), Side::East, segment_length_m, speed_limit_mps)?;
            }
            if r + 1 < rows {
                b.add_segment(id(r, c), Side::South, id(r + 1, c), Side::North, segment_length_m, speed_limit_mps)?;
                b.add_segment(id(r + 1, c), Side::North, id(r, c), Side::South, segment_length_m, speed_limit_mps)?;
            }
        }
    }
    for r in 0..rows {
        for c in 0..cols {
            let v = id(r, c);
            let border = [(r == 0, Side::North), (c + 1 == cols, Side::East), (r + 1 == rows, Side::South), (c == 0, Side::West)];
            for (on_border, side) in border {
                if on_border {
                    b.add_boundary_entry(v, side, segment_length_m, speed_limit_mps)?;
                    b.add_boundary_exit(v, side, segment_length_m, speed_limit_mps)?;
                }
            }
        }
    }
    b.build()
}

/// Random directed road graph on `nodes` intersections, used by tests and oracles.
/// Each ordered pair is joined with probability `edge_prob` while free approach sides remain;
/// lengths are drawn from 50..500 m and speed limits from 5..20 m/s.
pub fn random_graph(nodes: usize, edge_prob: f64, rng: &mut impl rand::Rng) -> Result<RoadGraph> {
    let mut b = GraphBuilder::new();
    for i in 0..nodes {
        b.add_intersection([i as f64, 0.0]);
    }
    let mut out_free = vec![Side::ALL.to_vec(); nodes];
    let mut in_free = vec![Side::ALL.to_vec(); nodes];
    for a in 0..nodes {
        for c in 0..nodes {
            if a == c || !rng.gen_bool(edge_prob) || out_free[a].is_empty() || in_free[c].is_empty() {
                continue;
            }
            let oi = rng.gen_range(0..out_free[a].len());
            let ii = rng.gen_range(0..in_free[c].len());
            let (os, is) = (out_free[a].remove(oi), in_free[c].remove(ii));
            let len = rng.gen_range(50.0..500.0);
            let speed = rng.gen_range(5.0..20.0);
            b.add_segment(IntersectionId(a as u32), os, IntersectionId(c as u32), is, len, speed)?;
        }
    }
    b.build()
}

/// Ordered intersection sequence `v_o -> ... -> v_d`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Route(pub Vec<IntersectionId>);

impl Route {
    pub fn nodes(&self) -> &[IntersectionId] {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn segments(&self, graph: &RoadGraph) -> Result<Vec<SegmentId>> {
        self.0
            .windows(2)
            .map(|w| {
                graph.segment_between(w[0], w[1]).ok_or_else(|| {
                    Error::Routing(format!("no segment from {} to {}", w[0], w[1]))
                })
            })
            .collect()
    }

    pub fn length_m(&self, graph: &RoadGraph) -> Result<f64> {
        Ok(self
            .segments(graph)?
            .iter()
            .map(|s| graph.segments[s.index()].length_m)
            .sum())
    }

    /// Checks that consecutive nodes are joined by segments and that the route
    /// never backtracks immediately unless the middle node is a dead end.
    pub fn validate(&self, graph: &RoadGraph) -> Result<()> {
        for v in &self.0 {
            graph.intersection(*v)?;
        }
        self.segments(graph)?;
        for w in self.0.windows(3) {
            if w[0] == w[2] && graph.outgoing(w[1]).len() > 1 {
                return Err(Error::Routing(format!("route backtracks at {}", w[1])));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct HeapEntry {
    cost: f64,
    node: IntersectionId,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on (cost, id).
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Single-source shortest-path tree.
#[derive(Debug, Clone)]
pub struct PathTree {
    pub origin: IntersectionId,
    pub cost: Vec<f64>,
    pub parent: Vec<Option<IntersectionId>>,
}

impl PathTree {
    pub fn path_to(&self, target: IntersectionId) -> Option<Route> {
        if !self.cost[target.index()].is_finite() {
            return None;
        }
        let mut nodes = vec![target];
        let mut cur = target;
        while let Some(p) = self.parent[cur.index()] {
            nodes.push(p);
            cur = p;
        }
        nodes.reverse();
        Some(Route(nodes))
    }
}

/// Dijkstra over internal segments with a caller-provided non-negative edge cost.
/// `banned` removes one segment from consideration. Ties break towards lower ids.
pub fn shortest_path_tree(
    graph: &RoadGraph,
    origin: IntersectionId,
    cost: impl Fn(&RoadSegment) -> f64,
    banned: Option<SegmentId>,
) -> PathTree {
    let n = graph.intersection_count();
    let mut dist = vec![f64::INFINITY; n];
    let mut parent = vec![None; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    dist[origin.index()] = 0.0;
    heap.push(HeapEntry { cost: 0.0, node: origin });
    while let Some(HeapEntry { cost: d, node }) = heap.pop() {
        if done[node.index()] {
            continue;
        }
        done[node.index()] = true;
        for &s in graph.outgoing(node) {
            if Some(s) == banned {
                continue;
            }
            let seg = &graph.segments[s.index()];
            let Some(next) = seg.to.node() else { continue };
            let nd = d + cost(seg);
            if nd < dist[next.index()] {
                dist[next.index()] = nd;
                parent[next.index()] = Some(node);
                heap.push(HeapEntry { cost: nd, node: next });
            }
        }
    }
    PathTree { origin, cost: dist, parent }
}
