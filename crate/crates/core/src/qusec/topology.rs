use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::QusecError;
use crate::ids::{AppId, LinkId, NodeId};
use crate::qkd_sim::QkdLink;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    /// Classical node: no QKD module.
    #[serde(rename = "CN")]
    Classical,
    /// Quantum node: hosts a KMS and QKD modules.
    #[serde(rename = "QN")]
    Quantum,
}

impl NodeKind {
    pub fn is_quantum(self) -> bool {
        matches!(self, Self::Quantum)
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Classical => "CN",
            Self::Quantum => "QN",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub node_id: NodeId,
    pub kind: NodeKind,
    #[serde(default)]
    pub apps: Vec<AppId>,
    #[serde(default)]
    pub vkms_endpoint: String,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Topology {
    nodes: BTreeMap<NodeId, Node>,
    links: BTreeMap<LinkId, QkdLink>,
    #[serde(skip)]
    apps: HashMap<AppId, NodeId>,
}

impl Topology {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, node: Node) -> Result<(), QusecError> {
        if self.nodes.contains_key(&node.node_id) {
            return Err(QusecError::DuplicateNode(node.node_id));
        }
        for (i, app) in node.apps.iter().enumerate() {
            if self.apps.contains_key(app) || node.apps[..i].contains(app) {
                return Err(QusecError::DuplicateApplication(app.clone()));
            }
        }
        for app in &node.apps {
            self.apps.insert(app.clone(), node.node_id.clone());
        }
        self.nodes.insert(node.node_id.clone(), node);
        Ok(())
    }

    pub fn add_link(&mut self, link: QkdLink) -> Result<(), QusecError> {
        link.validate().map_err(|e| QusecError::InvalidLink(e.to_string()))?;
        if self.links.contains_key(&link.link_id) {
            return Err(QusecError::DuplicateLink(link.link_id));
        }
        for end in [&link.endpoint_a, &link.endpoint_b] {
            let node = self.node(end)?;
            if !node.kind.is_quantum() {
                return Err(QusecError::InvalidLink(format!(
                    "link {} endpoint {end} is not a QN",
                    link.link_id
                )));
            }
        }
        if let Some(existing) = self.link_between(&link.endpoint_a, &link.endpoint_b) {
            return Err(QusecError::InvalidLink(format!(
                "{} and {} are already joined by {}",
                link.endpoint_a, link.endpoint_b, existing.link_id
            )));
        }
        self.links.insert(link.link_id.clone(), link);
        Ok(())
    }

    pub fn remove_link(&mut self, link_id: &LinkId) -> Result<QkdLink, QusecError> {
        self.links
            .remove(link_id)
            .ok_or_else(|| QusecError::InvalidLink(format!("unknown link {link_id}")))
    }

    pub fn node(&self, node_id: &NodeId) -> Result<&Node, QusecError> {
        self.nodes
            .get(node_id)
            .ok_or_else(|| QusecError::UnknownNode(node_id.clone()))
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values()
    }

    pub fn links(&self) -> impl Iterator<Item = &QkdLink> {
        self.links.values()
    }

    pub fn node_of_app(&self, app: &AppId) -> Result<&Node, QusecError> {
        let node_id = self
            .apps
            .get(app)
            .ok_or_else(|| QusecError::UnknownApplication(app.clone()))?;
        self.node(node_id)
    }

    pub fn link_between(&self, a: &NodeId, b: &NodeId) -> Option<&QkdLink> {
        self.links.values().find(|l| l.connects(a, b))
    }

    /// Neighbours over QKD links, sorted by node id.
    pub fn neighbours(&self, node: &NodeId) -> Vec<(&NodeId, &QkdLink)> {
        let mut out: Vec<_> = self
            .links
            .values()
            .filter_map(|l| l.other_end(node).map(|n| (n, l)))
            .collect();
        out.sort_by(|a, b| a.0.cmp(b.0));
        out
    }

    /// Rebuilds the app index after deserialisation.
    pub fn reindex(&mut self) {
        self.apps = self
            .nodes
            .values()
            .flat_map(|n| n.apps.iter().map(move |a| (a.clone(), n.node_id.clone())))
            .collect();
    }
}
