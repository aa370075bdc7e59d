//! Road network: links with infrastructure attributes, nodes, signal plans
//! and zones, loaded from JSON and validated.

use petgraph::graph::{DiGraph, NodeIndex};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use crate::{Error, Result};

pub const MPH_TO_MPS: f64 = 0.44704;
pub const MILE_M: f64 = 1609.344;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoadClass {
    Arterial,
    Collector,
    Access,
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Control {
    None,
    Actuated,
    Pretimed,
    Roundabout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Priority {
    Major,
    Minor,
    Stop,
}

macro_rules! label_enum {
    ($ty:ident { $($var:ident => $s:literal),+ $(,)? }) => {
        impl $ty {
            pub const ALL: &'static [$ty] = &[$($ty::$var),+];
            pub const LABELS: &'static [&'static str] = &[$($s),+];

            pub fn label(self) -> &'static str {
                match self { $($ty::$var => $s),+ }
            }

            pub fn parse(s: &str) -> Option<$ty> {
                match s { $($s => Some($ty::$var),)+ _ => None }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.label())
            }
        }
    };
}

label_enum!(RoadClass { Arterial => "arterial", Collector => "collector", Access => "access", Local => "local" });
label_enum!(Control { None => "none", Actuated => "actuated", Pretimed => "pretimed", Roundabout => "roundabout" });
label_enum!(Priority { Major => "major", Minor => "minor", Stop => "stop" });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Node {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<f64>,
}

/// A directed road segment. `control` and `priority` describe the
/// downstream end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Link {
    pub id: String,
    pub from: String,
    pub to: String,
    pub length_mi: f64,
    pub lanes: u32,
    pub free_flow_speed_mph: f64,
    pub speed_limit_mph: f64,
    pub road_class: RoadClass,
    pub control: Control,
    pub priority: Priority,
}

impl Link {
    pub fn length_m(&self) -> f64 {
        self.length_mi * MILE_M
    }

    pub fn free_flow_mps(&self) -> f64 {
        self.free_flow_speed_mph * MPH_TO_MPS
    }

    pub fn free_flow_time_s(&self) -> f64 {
        self.length_m() / self.free_flow_mps()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    Pretimed,
    /// Gap-out actuation: a phase holds at least its planned green, is
    /// extended while arrivals keep coming within `gap_out_s`, and never
    /// exceeds `max_green_factor` times the planned green.
    Actuated {
        gap_out_s: f64,
        max_green_factor: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub approaches: Vec<String>,
    pub green_start_s: f64,
    pub green_length_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalPlan {
    pub node: String,
    pub cycle_length_s: f64,
    pub kind: SignalKind,
    pub phases: Vec<Phase>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Zone {
    pub id: String,
    pub node: String,
}

/// On-disk network description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub nodes: Vec<Node>,
    pub links: Vec<Link>,
    #[serde(default)]
    pub signals: Vec<SignalPlan>,
    pub zones: Vec<Zone>,
}

/// Validated network with lookup tables and a routing graph.
#[derive(Debug, Clone)]
pub struct Network {
    pub spec: NetworkSpec,
    link_index: HashMap<String, usize>,
    node_index: HashMap<String, usize>,
    zone_index: HashMap<String, usize>,
    /// Signal plan index per node index.
    signal_at: HashMap<usize, usize>,
    graph: DiGraph<(), usize>,
}

impl Network {
    pub fn load(path: &Path) -> Result<Network> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: NetworkSpec = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        Network::new(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.spec).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn new(spec: NetworkSpec) -> Result<Network> {
        let node_index = unique_index(spec.nodes.iter().map(|n| n.id.as_str()), "node")?;
        let link_index = unique_index(spec.links.iter().map(|l| l.id.as_str()), "link")?;
        let zone_index = unique_index(spec.zones.iter().map(|z| z.id.as_str()), "zone")?;

        for l in &spec.links {
            for end in [&l.from, &l.to] {
                if !node_index.contains_key(end) {
                    return Err(Error::Network(format!(
                        "link {} references missing node {end}",
                        l.id
                    )));
                }
            }
            if l.from == l.to {
                return Err(Error::Network(format!("link {} is a self-loop", l.id)));
            }
            if !(l.length_mi > 0.0) || !l.length_mi.is_finite() {
                return Err(Error::Network(format!(
                    "link {} has non-positive length",
                    l.id
                )));
            }
            if l.lanes < 1 {
                return Err(Error::Network(format!("link {} has no lanes", l.id)));
            }
            if !(l.free_flow_speed_mph > 0.0) || !l.free_flow_speed_mph.is_finite() {
                return Err(Error::Network(format!(
                    "link {} has non-positive free-flow speed",
                    l.id
                )));
            }
            if !(l.speed_limit_mph > 0.0 && l.speed_limit_mph <= l.free_flow_speed_mph + 10.0) {
                return Err(Error::Network(format!(
                    "link {} speed limit {} outside (0, free-flow + 10]",
                    l.id, l.speed_limit_mph
                )));
            }
        }

        let mut signal_at = HashMap::new();
        for (si, s) in spec.signals.iter().enumerate() {
            let Some(&ni) = node_index.get(&s.node) else {
                return Err(Error::Network(format!(
                    "signal references missing node {}",
                    s.node
                )));
            };
            if signal_at.insert(ni, si).is_some() {
                return Err(Error::Network(format!(
                    "duplicate signal plan at node {}",
                    s.node
                )));
            }
            validate_signal(s, &spec.links, &link_index)?;
        }

        for l in &spec.links {
            let ni = node_index[&l.to];
            let signalized = matches!(l.control, Control::Pretimed | Control::Actuated);
            match (signalized, signal_at.get(&ni)) {
                (true, None) => {
                    return Err(Error::Network(format!(
                        "link {} is {} controlled but node {} has no signal plan",
                        l.id, l.control, l.to
                    )))
                }
                (true, Some(&si)) => {
                    let plan = &spec.signals[si];
                    let kind_ok = matches!(
                        (l.control, plan.kind),
                        (Control::Pretimed, SignalKind::Pretimed)
                            | (Control::Actuated, SignalKind::Actuated { .. })
                    );
                    if !kind_ok {
                        return Err(Error::Network(format!(
                            "link {} control {} disagrees with signal type at {}",
                            l.id, l.control, l.to
                        )));
                    }
                    if !plan.phases.iter().any(|p| p.approaches.contains(&l.id)) {
                        return Err(Error::Network(format!(
                            "signalized link {} is not served by any phase at {}",
                            l.id, l.to
                        )));
                    }
                }
                (false, _) => {}
            }
        }

        for z in &spec.zones {
            if !node_index.contains_key(&z.node) {
                return Err(Error::Network(format!(
                    "zone {} references missing node {}",
                    z.id, z.node
                )));
            }
        }

        let mut graph = DiGraph::new();
        for _ in &spec.nodes {
            graph.add_node(());
        }
        for (li, l) in spec.links.iter().enumerate() {
            graph.add_edge(
                NodeIndex::new(node_index[&l.from]),
                NodeIndex::new(node_index[&l.to]),
                li,
            );
        }

        let net = Network {
            spec,
            link_index,
            node_index,
            zone_index,
            signal_at,
            graph,
        };
        for a in &net.spec.zones {
            for b in &net.spec.zones {
                if a.node != b.node && net.route(&a.id, &b.id).is_none() {
                    return Err(Error::Network(format!(
                        "zone {} is unreachable from zone {}",
                        b.id, a.id
                    )));
                }
            }
        }
        Ok(net)
    }

    pub fn links(&self) -> &[Link] {
        &self.spec.links
    }

    pub fn link(&self, i: usize) -> &Link {
        &self.spec.links[i]
    }

    pub fn link_idx(&self, id: &str) -> Option<usize> {
        self.link_index.get(id).copied()
    }

    pub fn link_by_id(&self, id: &str) -> Option<&Link> {
        self.link_idx(id).map(|i| &self.spec.links[i])
    }

    pub fn node_count(&self) -> usize {
        self.spec.nodes.len()
    }

    pub fn zone_node(&self, zone: &str) -> Option<usize> {
        self.zone_index
            .get(zone)
            .map(|&zi| self.node_index[&self.spec.zones[zi].node])
    }

    pub fn has_zone(&self, zone: &str) -> bool {
        self.zone_index.contains_key(zone)
    }

    pub fn signal_for_link(&self, li: usize) -> Option<usize> {
        let ni = self.node_index[&self.spec.links[li].to];
        self.signal_at.get(&ni).copied()
    }

    /// Free-flow-time shortest path between two zones as link indices.
    pub fn route(&self, from_zone: &str, to_zone: &str) -> Option<Vec<usize>> {
        let src = NodeIndex::new(self.zone_node(from_zone)?);
        let dst = NodeIndex::new(self.zone_node(to_zone)?);
        if src == dst {
            return None;
        }
        let links = &self.spec.links;
        let (_, nodes) = petgraph::algo::astar(
            &self.graph,
            src,
            |n| n == dst,
            |e| links[*e.weight()].free_flow_time_s(),
            |_| 0.0,
        )?;
        let mut path = Vec::with_capacity(nodes.len().saturating_sub(1));
        for w in nodes.windows(2) {
            // Parallel links: take the fastest.
            let li = self
                .graph
                .edges_connecting(w[0], w[1])
                .map(|e| *e.weight())
                .min_by(|&a, &b| {
                    links[a]
                        .free_flow_time_s()
                        .total_cmp(&links[b].free_flow_time_s())
                        .then(a.cmp(&b))
                })?;
            path.push(li);
        }
        Some(path)
    }
}

fn unique_index<'a>(
    ids: impl Iterator<Item = &'a str>,
    what: &str,
) -> Result<HashMap<String, usize>> {
    let mut map = HashMap::new();
    for (i, id) in ids.enumerate() {
        if map.insert(id.to_string(), i).is_some() {
            return Err(Error::Network(format!("duplicate {what} id {id}")));
        }
    }
    Ok(map)
}

fn validate_signal(
    s: &SignalPlan,
    links: &[Link],
    link_index: &HashMap<String, usize>,
) -> Result<()> {
    if !(s.cycle_length_s > 0.0) {
        return Err(Error::Network(format!(
            "signal {} has non-positive cycle",
            s.node
        )));
    }
    if s.phases.is_empty() {
        return Err(Error::Network(format!("signal {} has no phases", s.node)));
    }
    if let SignalKind::Actuated {
        gap_out_s,
        max_green_factor,
    } = s.kind
    {
        if !(gap_out_s > 0.0) || !(max_green_factor >= 1.0) {
            return Err(Error::Network(format!(
                "signal {} has invalid actuation settings",
                s.node
            )));
        }
    }
    let mut seen = BTreeSet::new();
    for p in &s.phases {
        if !(p.green_length_s > 0.0)
            || p.green_start_s < 0.0
            || p.green_start_s + p.green_length_s > s.cycle_length_s
        {
            return Err(Error::Network(format!(
                "signal {} has a phase window outside its cycle",
                s.node
            )));
        }
        for a in &p.approaches {
            let Some(&li) = link_index.get(a) else {
                return Err(Error::Network(format!(
                    "signal {} approach {a} is not a link",
                    s.node
                )));
            };
            if links[li].to != s.node {
                return Err(Error::Network(format!(
                    "signal {} approach {a} does not end at the node",
                    s.node
                )));
            }
            if !seen.insert(a.clone()) {
                return Err(Error::Network(format!(
                    "signal {} serves approach {a} in two phases",
                    s.node
                )));
            }
        }
    }
    let mut windows: Vec<(f64, f64)> = s
        .phases
        .iter()
        .map(|p| (p.green_start_s, p.green_start_s + p.green_length_s))
        .collect();
    windows.sort_by(|a, b| a.0.total_cmp(&b.0));
    if windows.windows(2).any(|w| w[1].0 < w[0].1) {
        return Err(Error::Network(format!(
            "signal {} has overlapping conflicting greens",
            s.node
        )));
    }
    Ok(())
}
