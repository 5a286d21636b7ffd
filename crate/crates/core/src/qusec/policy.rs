use serde::{Deserialize, Serialize};

use super::assign::{assign_level, choose_relay, shortest_path, PathMetric};
use super::topology::Topology;
use super::QusecError;
use crate::crypto::KemSuite;
use crate::ids::{AppId, KeyId, LinkId, NodeId, SessionId};
use crate::kms::RelayRule;
use crate::level::SecurityLevel;

pub const POLICY_SCHEMA_VERSION: u32 = 1;

pub const LABEL_QKD: &str = "qkd";

pub fn kem_label(index: usize) -> String {
    format!("kem{}", index + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Role {
    /// CN endpoint of a level-3 session.
    Receiver,
    /// QN endpoint of a level-3 session.
    Passive,
    /// QN next to the passive node; ships the link key to the receiver.
    Relay,
    /// Endpoint of a KEM-only session.
    Endpoint,
    L1Endpoint,
    L2Endpoint,
    /// KMS on a level-2 relay path; carries a relay rule instead of a vKMS role.
    KmsRelayHop,
}

impl Role {
    pub fn needs_quantum_node(self) -> bool {
        !matches!(self, Self::Receiver | Self::Endpoint)
    }

    pub fn targets_kms(self) -> bool {
        matches!(self, Self::KmsRelayHop)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeerRef {
    pub node_id: NodeId,
    pub role: Role,
    pub vkms_endpoint: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyBlock {
    pub node_id: NodeId,
    pub role: Role,
    #[serde(default)]
    pub kem_suites: Vec<KemSuite>,
    /// Labels of the secrets fed to `kdf_combine`, in order.
    #[serde(default)]
    pub kdf_recipe: Vec<String>,
    #[serde(default)]
    pub peers: Vec<PeerRef>,
    pub relay_path: Option<Vec<NodeId>>,
    pub link_id: Option<LinkId>,
    /// Node at the far end of `link_id`.
    pub kms_peer: Option<NodeId>,
    pub relay_rule: Option<RelayRule>,
}

impl PolicyBlock {
    fn new(node_id: NodeId, role: Role) -> Self {
        Self {
            node_id,
            role,
            kem_suites: Vec::new(),
            kdf_recipe: Vec::new(),
            peers: Vec::new(),
            relay_path: None,
            link_id: None,
            kms_peer: None,
            relay_rule: None,
        }
    }

    pub fn peer(&self, role: Role) -> Option<&PeerRef> {
        self.peers.iter().find(|p| p.role == role)
    }
}

/// Extension point for per-session constraints.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionRequirements {
    /// Weakest acceptable level.
    #[serde(default)]
    pub min_level: Option<SecurityLevel>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionPolicy {
    pub schema_version: u32,
    pub session_id: SessionId,
    pub level: SecurityLevel,
    pub initiator_app: AppId,
    pub target_app: AppId,
    pub initiator_node: NodeId,
    pub target_node: NodeId,
    pub key_size_bits: usize,
    pub derived_key_id: KeyId,
    pub participants: Vec<PolicyBlock>,
    #[serde(default)]
    pub requirements: SessionRequirements,
}

impl SessionPolicy {
    pub fn block_for(&self, node: &NodeId, role: Role) -> Option<&PolicyBlock> {
        self.participants.iter().find(|b| &b.node_id == node && b.role == role)
    }

    pub fn assignment_for(&self, block: &PolicyBlock) -> RoleAssignment {
        RoleAssignment {
            session_id: self.session_id.clone(),
            level: self.level,
            initiator_app: self.initiator_app.clone(),
            target_app: self.target_app.clone(),
            initiator_node: self.initiator_node.clone(),
            target_node: self.target_node.clone(),
            key_size_bits: self.key_size_bits,
            derived_key_id: self.derived_key_id.clone(),
            block: block.clone(),
        }
    }

    /// One acknowledgement per participant block.
    pub fn expected_acks(&self) -> usize {
        self.participants.len()
    }
}

/// What one vKMS is told about a session.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleAssignment {
    pub session_id: SessionId,
    pub level: SecurityLevel,
    pub initiator_app: AppId,
    pub target_app: AppId,
    pub initiator_node: NodeId,
    pub target_node: NodeId,
    pub key_size_bits: usize,
    pub derived_key_id: KeyId,
    pub block: PolicyBlock,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub kem_suite: KemSuite,
    /// Level 4 combines two independent KEM exchanges.
    pub dual_kem_l4: bool,
    pub second_kem_suite: KemSuite,
    pub path_metric: PathMetric,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            kem_suite: KemSuite::MlKem768,
            dual_kem_l4: false,
            second_kem_suite: KemSuite::MlKem768,
            path_metric: PathMetric::HopCount,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigurationRequest {
    pub src_app: AppId,
    pub dst_app: AppId,
    pub level: SecurityLevel,
    pub key_size_bits: usize,
    /// Id under which the initiator will hand the key to its app.
    pub derived_key_id: KeyId,
    #[serde(default)]
    pub requirements: SessionRequirements,
}

/// Builds the per-node instructions for a session at the requested level.
pub fn compute_policy(
    topo: &Topology,
    req: &ConfigurationRequest,
    session_id: SessionId,
    config: &PolicyConfig,
) -> Result<SessionPolicy, QusecError> {
    let assignment = assign_level(topo, &req.src_app, &req.dst_app)?;
    if assignment.level != req.level {
        return Err(QusecError::InfeasibleLevel {
            requested: req.level,
            assigned: assignment.level,
        });
    }
    if let Some(min) = req.requirements.min_level {
        if assignment.level < min {
            return Err(QusecError::RequirementNotMet {
                required: min,
                assigned: assignment.level,
            });
        }
    }
    if crate::crypto::bytes_for_bits(req.key_size_bits).is_err() {
        return Err(QusecError::UnsupportedKeySize {
            requested: req.key_size_bits,
            available: None,
        });
    }
    let src = assignment.src_node;
    let dst = assignment.dst_node;
    let link_size_ok = |link_id: &LinkId| -> Result<(), QusecError> {
        let link = topo.links().find(|l| &l.link_id == link_id).expect("link from topology");
        if link.key_size_bits == req.key_size_bits {
            Ok(())
        } else {
            Err(QusecError::UnsupportedKeySize {
                requested: req.key_size_bits,
                available: Some(link.key_size_bits),
            })
        }
    };
    let endpoint = |n: &NodeId| topo.node(n).map(|n| n.vkms_endpoint.clone());
    let peer = |n: &NodeId, role: Role| -> Result<PeerRef, QusecError> {
        Ok(PeerRef {
            node_id: n.clone(),
            role,
            vkms_endpoint: endpoint(n)?,
        })
    };

    let participants = match req.level {
        SecurityLevel::L1 => {
            let link = topo.link_between(&src, &dst).expect("level 1 implies a direct link");
            link_size_ok(&link.link_id)?;
            let mut blocks = Vec::new();
            for (me, other) in [(&src, &dst), (&dst, &src)] {
                let mut b = PolicyBlock::new(me.clone(), Role::L1Endpoint);
                b.kdf_recipe = vec![LABEL_QKD.into()];
                b.peers = vec![peer(other, Role::L1Endpoint)?];
                b.link_id = Some(link.link_id.clone());
                b.kms_peer = Some(other.clone());
                blocks.push(b);
            }
            blocks
        }
        SecurityLevel::L2 => {
            let path = shortest_path(topo, &src, &dst, config.path_metric).ok_or(QusecError::NoRelayPath)?;
            let hop_link = |a: &NodeId, b: &NodeId| -> LinkId {
                topo.link_between(a, b).expect("path follows links").link_id.clone()
            };
            for pair in path.windows(2) {
                link_size_ok(&hop_link(&pair[0], &pair[1]))?;
            }
            let mut blocks = Vec::new();
            for (me, other, next) in [(&src, &dst, &path[1]), (&dst, &src, &path[path.len() - 2])] {
                let mut b = PolicyBlock::new(me.clone(), Role::L2Endpoint);
                b.kdf_recipe = vec![LABEL_QKD.into()];
                b.peers = vec![peer(other, Role::L2Endpoint)?];
                b.relay_path = Some(path.clone());
                b.link_id = Some(hop_link(me, next));
                b.kms_peer = Some(next.clone());
                blocks.push(b);
            }
            for (i, node) in path.iter().enumerate() {
                let upstream = (i > 0).then(|| path[i - 1].clone());
                let downstream = path.get(i + 1).cloned();
                let mut b = PolicyBlock::new(node.clone(), Role::KmsRelayHop);
                b.relay_path = Some(path.clone());
                b.relay_rule = Some(RelayRule {
                    session_id: session_id.clone(),
                    link_in: upstream.as_ref().map(|u| hop_link(u, node)),
                    link_out: downstream.as_ref().map(|d| hop_link(node, d)),
                    upstream,
                    downstream,
                });
                blocks.push(b);
            }
            blocks
        }
        SecurityLevel::L3 => {
            let (receiver, passive) = if topo.node(&src)?.kind.is_quantum() {
                (dst.clone(), src.clone())
            } else {
                (src.clone(), dst.clone())
            };
            let (relay, link) = choose_relay(topo, &passive).ok_or(QusecError::NoRelayPath)?;
            let recipe = vec![kem_label(0), LABEL_QKD.to_string()];

            let mut r = PolicyBlock::new(receiver.clone(), Role::Receiver);
            r.kem_suites = vec![config.kem_suite];
            r.kdf_recipe = recipe.clone();
            r.peers = vec![peer(&passive, Role::Passive)?, peer(&relay, Role::Relay)?];

            let mut p = PolicyBlock::new(passive.clone(), Role::Passive);
            p.kem_suites = vec![config.kem_suite];
            p.kdf_recipe = recipe;
            p.peers = vec![peer(&receiver, Role::Receiver)?, peer(&relay, Role::Relay)?];
            p.relay_path = Some(vec![passive.clone(), relay.clone()]);
            p.link_id = Some(link.clone());
            p.kms_peer = Some(relay.clone());

            let mut y = PolicyBlock::new(relay.clone(), Role::Relay);
            y.kem_suites = vec![config.kem_suite];
            y.peers = vec![peer(&receiver, Role::Receiver)?, peer(&passive, Role::Passive)?];
            y.relay_path = Some(vec![passive.clone(), relay]);
            y.link_id = Some(link);
            y.kms_peer = Some(passive);

            vec![r, p, y]
        }
        SecurityLevel::L4 => {
            let suites = if config.dual_kem_l4 {
                vec![config.kem_suite, config.second_kem_suite]
            } else {
                vec![config.kem_suite]
            };
            let recipe: Vec<String> = (0..suites.len()).map(kem_label).collect();
            let mut blocks = Vec::new();
            for (me, other) in [(&src, &dst), (&dst, &src)] {
                let mut b = PolicyBlock::new(me.clone(), Role::Endpoint);
                b.kem_suites = suites.clone();
                b.kdf_recipe = recipe.clone();
                b.peers = vec![peer(other, Role::Endpoint)?];
                blocks.push(b);
            }
            blocks
        }
    };

    Ok(SessionPolicy {
        schema_version: POLICY_SCHEMA_VERSION,
        session_id,
        level: req.level,
        initiator_app: req.src_app.clone(),
        target_app: req.dst_app.clone(),
        initiator_node: src,
        target_node: dst,
        key_size_bits: req.key_size_bits,
        derived_key_id: req.derived_key_id.clone(),
        participants,
        requirements: req.requirements.clone(),
    })
}
