#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use qsafe_core::crypto::KemSuite;
use qsafe_core::ids::{AppId, KeyId, LinkId, NodeId};
use qsafe_core::kms::Kms;
use qsafe_core::qkd_sim::{QkdLink, QkdSimulator};
use qsafe_core::qusec::{NodeKind, PolicyConfig, Qusec};
use qsafe_core::transport::InProcNetwork;
use qsafe_core::vkms::{AppKey, AppKeyRequest, KeyWithIdRequest, NodeDescriptor, Vkms, VkmsApi, VkmsError};

pub const CN: NodeKind = NodeKind::Classical;
pub const QN: NodeKind = NodeKind::Quantum;

pub struct Bed {
    pub net: InProcNetwork,
    pub qusec: Arc<Qusec>,
    pub kms: BTreeMap<NodeId, Arc<Kms>>,
    pub vkms: BTreeMap<NodeId, Arc<Vkms>>,
    pub sim: QkdSimulator,
}

pub fn app(node: &str) -> AppId {
    AppId::new(format!("APP_{node}"))
}

pub fn link_id(a: &str, b: &str) -> LinkId {
    LinkId::new(format!("L-{a}{b}"))
}

pub fn toy_config() -> PolicyConfig {
    PolicyConfig {
        kem_suite: KemSuite::ToyKem,
        second_kem_suite: KemSuite::ToyKem,
        ..PolicyConfig::default()
    }
}

/// One app per node, named `APP_<node>`; links carry 256-bit keys.
pub fn build(nodes: &[(&str, NodeKind)], links: &[(&str, &str)], config: PolicyConfig, keys_per_link: usize) -> Bed {
    build_with(nodes, links, config, keys_per_link, |_| 100.0)
}

pub fn build_with(
    nodes: &[(&str, NodeKind)],
    links: &[(&str, &str)],
    config: PolicyConfig,
    keys_per_link: usize,
    rate: impl Fn(usize) -> f64,
) -> Bed {
    let net = InProcNetwork::new();
    let dir = Arc::new(net.clone());
    let qusec = Arc::new(Qusec::new(dir.clone(), config));
    net.set_controller(qusec.clone());
    let mut kms = BTreeMap::new();
    let mut vkms = BTreeMap::new();
    for (i, (name, kind)) in nodes.iter().enumerate() {
        let node = NodeId::from(*name);
        qusec
            .register_node(qsafe_core::qusec::Node {
                node_id: node.clone(),
                kind: *kind,
                apps: vec![app(name)],
                vkms_endpoint: format!("inproc://{name}"),
            })
            .unwrap();
        if kind.is_quantum() {
            let k = Arc::new(Kms::new(node.clone(), dir.clone()));
            net.add_kms(node.clone(), k.clone());
            kms.insert(node.clone(), k);
        }
        let v = Arc::new(Vkms::new(
            NodeDescriptor {
                node_id: node.clone(),
                kind: *kind,
                apps: vec![app(name)],
            },
            dir.clone(),
            i as u64,
        ));
        net.add_vkms(node.clone(), v.clone());
        vkms.insert(node, v);
    }
    let sim = QkdSimulator::new();
    for (i, (a, b)) in links.iter().enumerate() {
        let link = QkdLink {
            link_id: link_id(a, b),
            endpoint_a: NodeId::from(*a),
            endpoint_b: NodeId::from(*b),
            key_size_bits: 256,
            rate_keys_per_sec: rate(i),
            seed: 1000 + i as u64,
        };
        qusec.register_link(link.clone()).unwrap();
        let ka = kms[&link.endpoint_a].clone();
        let kb = kms[&link.endpoint_b].clone();
        ka.add_link(link.link_id.clone(), link.endpoint_b.clone(), 256).unwrap();
        kb.add_link(link.link_id.clone(), link.endpoint_a.clone(), 256).unwrap();
        ka.register_sae(app(b).as_str(), &link.endpoint_b).unwrap();
        kb.register_sae(app(a).as_str(), &link.endpoint_a).unwrap();
        sim.register_link(link.clone(), ka, kb).unwrap();
        sim.fill_stores(&link.link_id, keys_per_link).unwrap();
    }
    Bed {
        net,
        qusec,
        kms,
        vkms,
        sim,
    }
}

/// The six-node reference testbed: CNs A, B, C; QNs D, E, F; links D-E and E-F.
pub fn fig2(config: PolicyConfig, keys_per_link: usize) -> Bed {
    build(
        &[("A", CN), ("B", CN), ("C", CN), ("D", QN), ("E", QN), ("F", QN)],
        &[("D", "E"), ("E", "F")],
        config,
        keys_per_link,
    )
}

impl Bed {
    pub fn vkms_of(&self, node: &str) -> &Arc<Vkms> {
        &self.vkms[&NodeId::from(node)]
    }

    pub fn kms_of(&self, node: &str) -> &Arc<Kms> {
        &self.kms[&NodeId::from(node)]
    }

    pub fn get_key(&self, src: &str, dst: &str) -> Result<AppKey, VkmsError> {
        self.vkms_of(src).app_get_key(&AppKeyRequest {
            initiator_app: app(src),
            target_app: app(dst),
            size_bits: 256,
        })
    }

    pub fn get_key_with_id(&self, dst: &str, key_id: &KeyId) -> Result<AppKey, VkmsError> {
        self.vkms_of(dst).app_get_key_with_id(&KeyWithIdRequest {
            target_app: app(dst),
            key_id: key_id.clone(),
        })
    }

    /// Full session: initiator key, then target key for the same id.
    pub fn exchange(&self, src: &str, dst: &str) -> Result<(AppKey, AppKey), VkmsError> {
        let a = self.get_key(src, dst)?;
        let b = self.get_key_with_id(dst, &a.key_id)?;
        Ok((a, b))
    }

    /// No vKMS holds state for any session.
    pub fn all_clean(&self) -> bool {
        self.vkms.values().all(|v| v.live_sessions().is_empty())
    }
}
