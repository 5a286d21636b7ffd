use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::topology::Topology;
use super::QusecError;
use crate::ids::{AppId, LinkId, NodeId};
use crate::level::SecurityLevel;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathMetric {
    /// Fewest hops; ties go to the lexicographically smallest node sequence.
    #[default]
    HopCount,
    /// Smallest sum of `1 / rate` over the links; same tie rule.
    InverseKeyRate,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    pub level: SecurityLevel,
    pub src_node: NodeId,
    pub dst_node: NodeId,
}

/// Strongest level the topology supports for the pair.
pub fn assign_level(topo: &Topology, src_app: &AppId, dst_app: &AppId) -> Result<Assignment, QusecError> {
    let src = topo.node_of_app(src_app)?;
    let dst = topo.node_of_app(dst_app)?;
    if src.node_id == dst.node_id {
        return Err(QusecError::SameNode(src.node_id.clone()));
    }
    let level = match (src.kind.is_quantum(), dst.kind.is_quantum()) {
        (true, true) => {
            if topo.link_between(&src.node_id, &dst.node_id).is_some() {
                SecurityLevel::L1
            } else if shortest_path(topo, &src.node_id, &dst.node_id, PathMetric::HopCount).is_some() {
                SecurityLevel::L2
            } else {
                SecurityLevel::L4
            }
        }
        (true, false) | (false, true) => {
            let qn = if src.kind.is_quantum() { src } else { dst };
            if topo.neighbours(&qn.node_id).is_empty() {
                SecurityLevel::L4
            } else {
                SecurityLevel::L3
            }
        }
        (false, false) => SecurityLevel::L4,
    };
    Ok(Assignment {
        level,
        src_node: src.node_id.clone(),
        dst_node: dst.node_id.clone(),
    })
}

/// Node sequence from `from` to `to` over QKD links, both ends included.
pub fn shortest_path(topo: &Topology, from: &NodeId, to: &NodeId, metric: PathMetric) -> Option<Vec<NodeId>> {
    if from == to {
        return None;
    }
    match metric {
        PathMetric::HopCount => hop_path(topo, from, to),
        PathMetric::InverseKeyRate => weighted_path(topo, from, to),
    }
}

fn hop_path(topo: &Topology, from: &NodeId, to: &NodeId) -> Option<Vec<NodeId>> {
    // Distances to `to`, then a greedy walk picking the smallest neighbour
    // that stays on a shortest path.
    let mut dist: HashMap<&NodeId, usize> = HashMap::new();
    dist.insert(to, 0);
    let mut queue = VecDeque::from([to]);
    while let Some(n) = queue.pop_front() {
        let d = dist[n];
        for (m, _) in topo.neighbours(n) {
            if !dist.contains_key(m) {
                dist.insert(m, d + 1);
                queue.push_back(m);
            }
        }
    }
    let mut remaining = *dist.get(from)?;
    let mut path = vec![from.clone()];
    let mut current = from;
    while remaining > 0 {
        let next = topo
            .neighbours(current)
            .into_iter()
            .map(|(m, _)| m)
            .find(|m| dist.get(m) == Some(&(remaining - 1)))
            .expect("a shortest-path successor exists");
        path.push(next.clone());
        current = next;
        remaining -= 1;
    }
    Some(path)
}

fn weighted_path(topo: &Topology, from: &NodeId, to: &NodeId) -> Option<Vec<NodeId>> {
    let mut best: HashMap<NodeId, (f64, Vec<NodeId>)> = HashMap::new();
    let mut done: Vec<NodeId> = Vec::new();
    best.insert(from.clone(), (0.0, vec![from.clone()]));
    loop {
        let (node, (cost, path)) = best
            .iter()
            .filter(|(n, _)| !done.contains(n))
            .min_by(|a, b| better(&a.1 .0, &a.1 .1, &b.1 .0, &b.1 .1))
            .map(|(n, v)| (n.clone(), v.clone()))?;
        if &node == to {
            return Some(path);
        }
        done.push(node.clone());
        for (m, link) in topo.neighbours(&node) {
            if done.contains(m) {
                continue;
            }
            let c = cost + 1.0 / link.rate_keys_per_sec;
            let mut p = path.clone();
            p.push(m.clone());
            let replace = match best.get(m) {
                None => true,
                Some((oc, op)) => better(&c, &p, oc, op).is_lt(),
            };
            if replace {
                best.insert(m.clone(), (c, p));
            }
        }
    }
}

fn better(c1: &f64, p1: &[NodeId], c2: &f64, p2: &[NodeId]) -> std::cmp::Ordering {
    c1.total_cmp(c2).then_with(|| p1.cmp(p2))
}

/// Relay for a level-3 session: the QN neighbour of `passive` over the
/// fastest link, ties to the smallest node id.
pub fn choose_relay(topo: &Topology, passive: &NodeId) -> Option<(NodeId, LinkId)> {
    topo.neighbours(passive)
        .into_iter()
        .max_by(|a, b| {
            a.1.rate_keys_per_sec
                .total_cmp(&b.1.rate_keys_per_sec)
                .then_with(|| b.0.cmp(a.0))
        })
        .map(|(n, l)| (n.clone(), l.link_id.clone()))
}
