//! Lane-resolved highway graph and merge-point detection.
//!
//! # File format
//!
//! A network file is line oriented. Blank lines and everything after `#` are
//! ignored. Two record kinds exist:
//!
//! ```text
//! node <id>
//! edge <id> <tail> <head> <length_m> <lanes> <speed_limit_mps>
//! ```
//!
//! Node records may appear anywhere in the file, but every node an edge
//! references must be declared.
//!
//! # Lane convention
//!
//! Lane 0 is the rightmost lane of an edge. At each junction the incoming
//! lanes are stacked right to left: incoming edges are ordered left to right
//! by lane count (descending) and then by id, so the widest edge is treated
//! as the through carriageway and narrower edges (ramps) join on its right.
//! When a junction has more incoming than outgoing lanes, the rightmost
//! surplus lanes of that stack have no continuation. Those are the merging
//! lanes, and the first continuing lane to their left is the merge target.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeIx(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EdgeIx(pub u32);

/// Index of a merge point in the list returned by [`detect_merge_points`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MergeId(pub u32);

/// One lane of one edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LaneRef {
    pub edge: EdgeIx,
    pub lane: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub id: String,
    pub tail: NodeIx,
    pub head: NodeIx,
    /// Meters.
    pub length: f64,
    pub lanes: u32,
    /// Meters per second.
    pub speed_limit: f64,
}

/// Raw edge record as it appears in a network file.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeSpec {
    pub id: String,
    pub tail: String,
    pub head: String,
    pub length: f64,
    pub lanes: u32,
    pub speed_limit: f64,
}

#[derive(Debug, Clone)]
pub struct RoadNetwork {
    nodes: Vec<String>,
    node_index: HashMap<String, NodeIx>,
    edges: Vec<Edge>,
    edge_index: HashMap<String, EdgeIx>,
    incoming: Vec<Vec<EdgeIx>>,
    outgoing: Vec<Vec<EdgeIx>>,
    slot_base: Vec<u32>,
    slot_count: u32,
    // position of each lane slot in the lane stack at the edge's head node
    stack_pos: Vec<u32>,
    surplus: Vec<u32>,
}

impl RoadNetwork {
    /// Builds and validates a network from declared nodes and edge records.
    pub fn new(nodes: Vec<String>, edges: Vec<EdgeSpec>) -> Result<Self> {
        let mut node_index = HashMap::with_capacity(nodes.len());
        for (i, name) in nodes.iter().enumerate() {
            if node_index.insert(name.clone(), NodeIx(i as u32)).is_some() {
                return Err(Error::Validation(format!("duplicate node id {name:?}")));
            }
        }

        let lookup = |name: &str, edge: &str| {
            node_index.get(name).copied().ok_or_else(|| {
                Error::Validation(format!("edge {edge:?} references undefined node {name:?}"))
            })
        };

        let mut built = Vec::with_capacity(edges.len());
        let mut edge_index = HashMap::with_capacity(edges.len());
        for spec in edges {
            let tail = lookup(&spec.tail, &spec.id)?;
            let head = lookup(&spec.head, &spec.id)?;
            if !(spec.length > 0.0 && spec.length.is_finite()) {
                return Err(Error::Validation(format!(
                    "edge {:?} has non-positive length {}",
                    spec.id, spec.length
                )));
            }
            if spec.lanes == 0 {
                return Err(Error::Validation(format!("edge {:?} has no lanes", spec.id)));
            }
            if !(spec.speed_limit > 0.0 && spec.speed_limit.is_finite()) {
                return Err(Error::Validation(format!(
                    "edge {:?} has non-positive speed limit {}",
                    spec.id, spec.speed_limit
                )));
            }
            let ix = EdgeIx(built.len() as u32);
            if edge_index.insert(spec.id.clone(), ix).is_some() {
                return Err(Error::Validation(format!("duplicate edge id {:?}", spec.id)));
            }
            built.push(Edge {
                id: spec.id,
                tail,
                head,
                length: spec.length,
                lanes: spec.lanes,
                speed_limit: spec.speed_limit,
            });
        }

        let mut incoming = vec![Vec::new(); nodes.len()];
        let mut outgoing = vec![Vec::new(); nodes.len()];
        for (i, e) in built.iter().enumerate() {
            outgoing[e.tail.0 as usize].push(EdgeIx(i as u32));
            incoming[e.head.0 as usize].push(EdgeIx(i as u32));
        }

        let mut slot_base = Vec::with_capacity(built.len());
        let mut slot_count = 0u32;
        for e in &built {
            slot_base.push(slot_count);
            slot_count += e.lanes;
        }

        let mut net = RoadNetwork {
            nodes,
            node_index,
            edges: built,
            edge_index,
            incoming,
            outgoing,
            slot_base,
            slot_count,
            stack_pos: vec![0; slot_count as usize],
            surplus: Vec::new(),
        };
        net.build_lane_stacks();
        Ok(net)
    }

    fn build_lane_stacks(&mut self) {
        let mut surplus = vec![0; self.nodes.len()];
        for node in 0..self.nodes.len() {
            let stack = self.incoming_stack(NodeIx(node as u32));
            for (pos, lane) in stack.iter().enumerate() {
                let slot = self.slot(*lane);
                self.stack_pos[slot] = pos as u32;
            }
            let inc = stack.len() as u32;
            let out = self.outgoing_lane_total(NodeIx(node as u32));
            if out > 0 && inc > out {
                surplus[node] = inc - out;
            }
        }
        self.surplus = surplus;
    }

    /// Incoming lanes at `node`, rightmost first.
    pub fn incoming_stack(&self, node: NodeIx) -> Vec<LaneRef> {
        let mut edges = self.incoming[node.0 as usize].clone();
        // left-to-right order: widest first, then by id
        edges.sort_by(|a, b| {
            let (ea, eb) = (self.edge(*a), self.edge(*b));
            eb.lanes.cmp(&ea.lanes).then_with(|| ea.id.cmp(&eb.id))
        });
        edges
            .iter()
            .rev()
            .flat_map(|&e| (0..self.edge(e).lanes).map(move |lane| LaneRef { edge: e, lane }))
            .collect()
    }

    /// Parses the line-oriented network format. `origin` is used for error context.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let schema = |line: usize, message: String| Error::Schema {
            path: origin.to_path_buf(),
            line,
            message,
        };
        let mut nodes = Vec::new();
        let mut edges = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let fields: Vec<&str> = content.split_whitespace().collect();
            match fields[0] {
                "node" => {
                    if fields.len() != 2 {
                        return Err(schema(line_no, "expected `node <id>`".into()));
                    }
                    nodes.push(fields[1].to_string());
                }
                "edge" => {
                    if fields.len() != 7 {
                        return Err(schema(
                            line_no,
                            "expected `edge <id> <tail> <head> <length_m> <lanes> <speed_limit_mps>`"
                                .into(),
                        ));
                    }
                    let num = |idx: usize, name: &str| {
                        fields[idx].parse::<f64>().map_err(|_| {
                            schema(line_no, format!("field {name}: cannot parse {:?}", fields[idx]))
                        })
                    };
                    let lanes = fields[5].parse::<u32>().map_err(|_| {
                        schema(line_no, format!("field lanes: cannot parse {:?}", fields[5]))
                    })?;
                    edges.push(EdgeSpec {
                        id: fields[1].to_string(),
                        tail: fields[2].to_string(),
                        head: fields[3].to_string(),
                        length: num(4, "length_m")?,
                        lanes,
                        speed_limit: num(6, "speed_limit_mps")?,
                    });
                }
                other => {
                    return Err(schema(line_no, format!("unknown record kind {other:?}")));
                }
            }
        }
        RoadNetwork::new(nodes, edges)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RoadNetwork::parse(&text, path)
    }

    /// Serializes back to the file format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for n in &self.nodes {
            let _ = writeln!(out, "node {n}");
        }
        for e in &self.edges {
            let _ = writeln!(
                out,
                "edge {} {} {} {} {} {}",
                e.id,
                self.nodes[e.tail.0 as usize],
                self.nodes[e.head.0 as usize],
                e.length,
                e.lanes,
                e.speed_limit
            );
        }
        out
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge(&self, ix: EdgeIx) -> &Edge {
        &self.edges[ix.0 as usize]
    }

    pub fn try_edge(&self, ix: EdgeIx) -> Option<&Edge> {
        self.edges.get(ix.0 as usize)
    }

    pub fn edge_ix(&self, id: &str) -> Option<EdgeIx> {
        self.edge_index.get(id).copied()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn node_name(&self, ix: NodeIx) -> &str {
        &self.nodes[ix.0 as usize]
    }

    pub fn node_ix(&self, id: &str) -> Option<NodeIx> {
        self.node_index.get(id).copied()
    }

    pub fn incoming(&self, node: NodeIx) -> &[EdgeIx] {
        &self.incoming[node.0 as usize]
    }

    pub fn outgoing(&self, node: NodeIx) -> &[EdgeIx] {
        &self.outgoing[node.0 as usize]
    }

    pub fn incoming_lane_total(&self, node: NodeIx) -> u32 {
        self.incoming(node).iter().map(|&e| self.edge(e).lanes).sum()
    }

    pub fn outgoing_lane_total(&self, node: NodeIx) -> u32 {
        self.outgoing(node).iter().map(|&e| self.edge(e).lanes).sum()
    }

    /// Dense index of a lane over the whole network.
    pub fn slot(&self, lane: LaneRef) -> usize {
        (self.slot_base[lane.edge.0 as usize] + lane.lane) as usize
    }

    pub fn slot_count(&self) -> usize {
        self.slot_count as usize
    }

    pub fn max_speed_limit(&self) -> f64 {
        self.edges.iter().map(|e| e.speed_limit).fold(0.0, f64::max)
    }

    /// Lane on `next` that `lane` continues into, or `None` if `lane` is a
    /// surplus lane at its head junction and must merge before the junction.
    pub fn continuation(&self, lane: LaneRef, next: EdgeIx) -> Option<u32> {
        let head = self.edge(lane.edge).head;
        let stack = self.stack_pos[self.slot(lane)];
        let surplus = self.surplus[head.0 as usize];
        if stack < surplus {
            return None;
        }
        Some((stack - surplus).min(self.edge(next).lanes - 1))
    }

    /// True when `lane` ends at a junction without a continuation.
    pub fn is_dead_end_lane(&self, lane: LaneRef) -> bool {
        let head = self.edge(lane.edge).head;
        self.stack_pos[self.slot(lane)] < self.surplus[head.0 as usize]
    }
}

/// Ordered list of connected edges.
#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    pub id: Arc<str>,
    pub edges: Arc<[EdgeIx]>,
}

impl Route {
    pub fn new(id: &str, edges: Vec<EdgeIx>, net: &RoadNetwork) -> Result<Self> {
        if edges.is_empty() {
            return Err(Error::Validation(format!("route {id:?} has no edges")));
        }
        for &e in &edges {
            if net.try_edge(e).is_none() {
                return Err(Error::Validation(format!("route {id:?} references unknown edge")));
            }
        }
        for pair in edges.windows(2) {
            let (a, b) = (net.edge(pair[0]), net.edge(pair[1]));
            if a.head != b.tail {
                return Err(Error::Validation(format!(
                    "route {id:?} is disconnected between {:?} and {:?}",
                    a.id, b.id
                )));
            }
        }
        Ok(Route {
            id: Arc::from(id),
            edges: edges.into(),
        })
    }

    /// Resolves edge ids against `net`.
    pub fn from_ids(id: &str, edge_ids: &[impl AsRef<str>], net: &RoadNetwork) -> Result<Self> {
        let edges = edge_ids
            .iter()
            .map(|e| {
                net.edge_ix(e.as_ref()).ok_or_else(|| {
                    Error::Validation(format!("route {id:?} references unknown edge {:?}", e.as_ref()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Route::new(id, edges, net)
    }

    pub fn first(&self) -> EdgeIx {
        self.edges[0]
    }
}

/// A junction where incoming lanes outnumber outgoing lanes.
#[derive(Debug, Clone, PartialEq)]
pub struct MergePoint {
    pub id: MergeId,
    pub node: NodeIx,
    pub incoming_lanes: u32,
    pub outgoing_lanes: u32,
    /// Lanes without continuation; vehicles on them must change into `target`.
    pub merging_lanes: Vec<LaneRef>,
    pub target: LaneRef,
    /// Physical merge location: the end of the target lane's approach edge.
    pub edge: EdgeIx,
    pub offset: f64,
}

impl MergePoint {
    pub fn is_merging_lane(&self, lane: LaneRef) -> bool {
        self.merging_lanes.contains(&lane)
    }
}

/// Returns every junction with more incoming than outgoing lanes, ordered by
/// node id. Sink nodes (no outgoing edges) are network boundaries, not merges.
pub fn detect_merge_points(net: &RoadNetwork) -> Vec<MergePoint> {
    let mut nodes: Vec<NodeIx> = (0..net.node_count() as u32)
        .map(NodeIx)
        .filter(|&n| {
            let out = net.outgoing_lane_total(n);
            out > 0 && net.incoming_lane_total(n) > out
        })
        .collect();
    nodes.sort_by(|a, b| net.node_name(*a).cmp(net.node_name(*b)));

    nodes
        .into_iter()
        .enumerate()
        .map(|(i, node)| {
            let stack = net.incoming_stack(node);
            let incoming = stack.len() as u32;
            let outgoing = net.outgoing_lane_total(node);
            let surplus = (incoming - outgoing) as usize;
            let target = stack[surplus];
            MergePoint {
                id: MergeId(i as u32),
                node,
                incoming_lanes: incoming,
                outgoing_lanes: outgoing,
                merging_lanes: stack[..surplus].to_vec(),
                target,
                edge: target.edge,
                offset: net.edge(target.edge).length,
            }
        })
        .collect()
}

/// Along-route distance from a front bumper at `pos` on `edge` to `node`.
///
/// `ahead` lists the route edges after `edge`. Returns `None` when the node is
/// not on the remaining path.
pub fn distance_to_node(
    net: &RoadNetwork,
    edge: EdgeIx,
    pos: f64,
    ahead: &[EdgeIx],
    node: NodeIx,
) -> Result<Option<f64>> {
    let current = net.try_edge(edge).ok_or_else(|| Error::Integrity {
        clock: f64::NAN,
        message: format!("vehicle on unknown edge index {}", edge.0),
    })?;
    let mut dist = (current.length - pos).max(0.0);
    if current.head == node {
        return Ok(Some(dist));
    }
    for &e in ahead {
        let e = net.try_edge(e).ok_or_else(|| Error::Integrity {
            clock: f64::NAN,
            message: format!("route references unknown edge index {}", e.0),
        })?;
        dist += e.length;
        if e.head == node {
            return Ok(Some(dist));
        }
    }
    Ok(None)
}
