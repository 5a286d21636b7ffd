//! JSON topology files.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use qsafe_core::crypto::KemSuite;
use qsafe_core::ids::{AppId, LinkId, NodeId};
use qsafe_core::level::SecurityLevel;
use qsafe_core::qkd_sim::QkdLink;
use qsafe_core::qusec::{Node, NodeKind, PathMetric, PolicyConfig, Topology};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation error: {0}")]
    Validation(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: NodeId,
    pub kind: NodeKind,
    #[serde(default)]
    pub apps: Vec<AppId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    /// Defaults to `L-<a><b>`.
    #[serde(default)]
    pub id: Option<LinkId>,
    pub a: NodeId,
    pub b: NodeId,
    pub key_size_bits: usize,
    /// Keys per second; informational, also used by the rate path metric.
    pub rate: f64,
    pub seed: u64,
}

impl LinkSpec {
    pub fn link_id(&self) -> LinkId {
        self.id
            .clone()
            .unwrap_or_else(|| LinkId::new(format!("L-{}{}", self.a, self.b)))
    }

    pub fn to_link(&self) -> QkdLink {
        QkdLink {
            link_id: self.link_id(),
            endpoint_a: self.a.clone(),
            endpoint_b: self.b.clone(),
            key_size_bits: self.key_size_bits,
            rate_keys_per_sec: self.rate,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Defaults {
    pub kem_suite: KemSuite,
    /// Requested application key size.
    pub kdf_out_bits: usize,
    pub dual_kem: bool,
    /// Second suite for dual-KEM level 4; defaults to `kem_suite`.
    pub second_kem_suite: Option<KemSuite>,
    pub path_metric: PathMetric,
    /// Keys generated on every link before the testbed is handed out.
    pub prefill_keys: usize,
}

impl Default for Defaults {
    fn default() -> Self {
        Self {
            kem_suite: KemSuite::MlKem768,
            kdf_out_bits: 256,
            dual_kem: false,
            second_kem_suite: None,
            path_metric: PathMetric::HopCount,
            prefill_keys: 256,
        }
    }
}

impl Defaults {
    pub fn policy_config(&self) -> PolicyConfig {
        PolicyConfig {
            kem_suite: self.kem_suite,
            dual_kem_l4: self.dual_kem,
            second_kem_suite: self.second_kem_suite.unwrap_or(self.kem_suite),
            path_metric: self.path_metric,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseSpec {
    pub id: String,
    pub initiator: AppId,
    pub target: AppId,
    pub expected_level: SecurityLevel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub links: Vec<LinkSpec>,
    #[serde(default)]
    pub defaults: Defaults,
    #[serde(default)]
    pub cases: Vec<CaseSpec>,
}

impl TopologyConfig {
    /// Reads, parses and validates a topology file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let config: Self = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Applies the controller's registration rules to a scratch topology.
    pub fn validate(&self) -> Result<Topology, ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Validation(e.to_string());
        let d = &self.defaults;
        if d.kdf_out_bits == 0 || d.kdf_out_bits % 8 != 0 {
            return Err(ConfigError::Validation(format!(
                "kdf_out_bits must be a positive multiple of 8, got {}",
                d.kdf_out_bits
            )));
        }
        let mut topo = Topology::new();
        for node in &self.nodes {
            topo.add_node(Node {
                node_id: node.id.clone(),
                kind: node.kind,
                apps: node.apps.clone(),
                vkms_endpoint: String::new(),
            })
            .map_err(|e| invalid(&e))?;
        }
        for link in &self.links {
            topo.add_link(link.to_link()).map_err(|e| invalid(&e))?;
        }
        let mut ids = HashSet::new();
        for case in &self.cases {
            if !ids.insert(case.id.as_str()) {
                return Err(ConfigError::Validation(format!("duplicate case {}", case.id)));
            }
            for app in [&case.initiator, &case.target] {
                topo.node_of_app(app).map_err(|e| invalid(&e))?;
            }
        }
        Ok(topo)
    }

    pub fn case(&self, id: &str) -> Option<&CaseSpec> {
        self.cases.iter().find(|c| c.id == id)
    }

    pub fn node_of_app(&self, app: &AppId) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.apps.contains(app))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIG2: &str = include_str!("../topologies/fig2.json");

    #[test]
    fn bundled_topology_loads() {
        let config = TopologyConfig::from_json(FIG2).unwrap();
        assert_eq!(config.nodes.len(), 6);
        let qn: Vec<&str> = config
            .nodes
            .iter()
            .filter(|n| n.kind.is_quantum())
            .map(|n| n.id.as_str())
            .collect();
        assert_eq!(qn, ["D", "E", "F"]);
        assert_eq!(config.cases.len(), 4);
        assert_eq!(config.case("T3").unwrap().expected_level, SecurityLevel::L3);
        assert_eq!(config.links[0].link_id().as_str(), "L-DE");
    }

    #[test]
    fn empty_file_is_a_parse_error() {
        assert!(matches!(TopologyConfig::from_json(""), Err(ConfigError::Parse(_))));
        assert!(matches!(TopologyConfig::from_json("{\"nodes\": 3}"), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn link_on_classical_node_is_rejected() {
        let text = FIG2.replace("\"a\": \"D\"", "\"a\": \"C\"");
        assert!(matches!(TopologyConfig::from_json(&text), Err(ConfigError::Validation(_))));
    }

    #[test]
    fn other_validation_failures() {
        let dup_app = FIG2.replace("[\"APP_B\"]", "[\"APP_A\"]");
        assert!(matches!(TopologyConfig::from_json(&dup_app), Err(ConfigError::Validation(_))));
        let bad_case = FIG2.replace("\"target\": \"APP_B\"", "\"target\": \"APP_Z\"");
        assert!(matches!(TopologyConfig::from_json(&bad_case), Err(ConfigError::Validation(_))));
        let bad_bits = FIG2.replace("\"kdf_out_bits\": 256", "\"kdf_out_bits\": 100");
        assert!(matches!(TopologyConfig::from_json(&bad_bits), Err(ConfigError::Validation(_))));
        let self_link = FIG2.replace("\"b\": \"E\"", "\"b\": \"D\"");
        assert!(matches!(TopologyConfig::from_json(&self_link), Err(ConfigError::Validation(_))));
    }

    #[test]
    fn missing_file() {
        assert!(matches!(
            TopologyConfig::load("/nonexistent/topology.json"),
            Err(ConfigError::Io { .. })
        ));
    }
}
