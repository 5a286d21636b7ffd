//! A running set of services built from a [`TopologyConfig`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use qsafe_core::ids::{AppId, LinkId, NodeId};
use qsafe_core::kms::Kms;
use qsafe_core::qkd_sim::QkdSimulator;
use qsafe_core::qusec::{Node, Qusec};
use qsafe_core::transport::{Directory, InProcNetwork, MessageRecord};
use qsafe_core::vkms::{NodeDescriptor, Vkms, VkmsApi};
use qsafe_net::{controller_router, kms_router, vkms_router, HttpDirectory, Router, Server};
use tokio::runtime::Runtime;

use crate::config::TopologyConfig;
use crate::HarnessError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Direct calls through an in-process directory.
    InProc,
    /// Every service on its own loopback HTTP port.
    Net,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::InProc => "inproc",
            Self::Net => "net",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "inproc" => Ok(Self::InProc),
            "net" => Ok(Self::Net),
            other => Err(format!("unknown mode {other:?}, expected inproc or net")),
        }
    }
}

struct NetFabric {
    dir: HttpDirectory,
    servers: BTreeMap<String, Server>,
    runtime: Option<Runtime>,
}

impl Drop for NetFabric {
    fn drop(&mut self) {
        for server in self.servers.values_mut() {
            server.stop();
        }
        if let Some(rt) = self.runtime.take() {
            rt.shutdown_timeout(Duration::from_secs(1));
        }
    }
}

enum Fabric {
    InProc(InProcNetwork),
    Net(NetFabric),
}

pub struct Testbed {
    config: TopologyConfig,
    mode: Mode,
    qusec: Arc<Qusec>,
    kms: BTreeMap<NodeId, Arc<Kms>>,
    vkms: BTreeMap<NodeId, Arc<Vkms>>,
    sim: QkdSimulator,
    removed: Mutex<BTreeSet<LinkId>>,
    fabric: Fabric,
}

/// Loads a topology file and starts a testbed for it.
pub fn load_topology(path: impl AsRef<Path>, mode: Mode, seed: u64) -> Result<Testbed, HarnessError> {
    let config = TopologyConfig::load(path)?;
    Testbed::start(&config, mode, seed)
}

fn setup(e: impl fmt::Display) -> HarnessError {
    HarnessError::Setup(e.to_string())
}

impl Testbed {
    /// Instantiates every service and pre-fills the links. `seed` drives the
    /// vKMS random generators.
    pub fn start(config: &TopologyConfig, mode: Mode, seed: u64) -> Result<Self, HarnessError> {
        config.validate()?;
        let (fabric, dir): (Fabric, Arc<dyn Directory>) = match mode {
            Mode::InProc => {
                let net = InProcNetwork::new();
                (Fabric::InProc(net.clone()), Arc::new(net))
            }
            Mode::Net => {
                let runtime = tokio::runtime::Builder::new_multi_thread()
                    .worker_threads(4)
                    .enable_all()
                    .build()
                    .map_err(setup)?;
                let http = HttpDirectory::new();
                let fabric = NetFabric {
                    dir: http.clone(),
                    servers: BTreeMap::new(),
                    runtime: Some(runtime),
                };
                (Fabric::Net(fabric), Arc::new(http))
            }
        };
        let qusec = Arc::new(Qusec::new(dir.clone(), config.defaults.policy_config()));
        let mut bed = Self {
            config: config.clone(),
            mode,
            qusec: qusec.clone(),
            kms: BTreeMap::new(),
            vkms: BTreeMap::new(),
            sim: QkdSimulator::new(),
            removed: Mutex::default(),
            fabric,
        };
        bed.expose_controller()?;

        for spec in &config.nodes {
            let node = spec.id.clone();
            if spec.kind.is_quantum() {
                let kms = Arc::new(Kms::new(node.clone(), dir.clone()));
                bed.expose_kms(&node, kms.clone())?;
                bed.kms.insert(node.clone(), kms);
            }
            let vkms = Arc::new(Vkms::new(
                NodeDescriptor {
                    node_id: node.clone(),
                    kind: spec.kind,
                    apps: spec.apps.clone(),
                },
                dir.clone(),
                seed,
            ));
            let endpoint = bed.expose_vkms(&node, vkms.clone())?;
            bed.vkms.insert(node.clone(), vkms);
            qusec
                .register_node(Node {
                    node_id: node,
                    kind: spec.kind,
                    apps: spec.apps.clone(),
                    vkms_endpoint: endpoint,
                })
                .map_err(setup)?;
        }

        for spec in &config.links {
            let link = spec.to_link();
            qusec.register_link(link.clone()).map_err(setup)?;
            let ka = bed.kms[&link.endpoint_a].clone();
            let kb = bed.kms[&link.endpoint_b].clone();
            ka.add_link(link.link_id.clone(), link.endpoint_b.clone(), link.key_size_bits)
                .map_err(setup)?;
            kb.add_link(link.link_id.clone(), link.endpoint_a.clone(), link.key_size_bits)
                .map_err(setup)?;
            // Each side learns which SAEs sit behind the other end.
            for (kms, peer) in [(&ka, &link.endpoint_b), (&kb, &link.endpoint_a)] {
                for app in bed.apps_of(peer) {
                    kms.register_sae(app.as_str(), peer).map_err(setup)?;
                }
            }
            bed.sim.register_link(link.clone(), ka, kb).map_err(setup)?;
            bed.sim
                .fill_stores(&link.link_id, config.defaults.prefill_keys)
                .map_err(setup)?;
        }
        Ok(bed)
    }

    fn apps_of(&self, node: &NodeId) -> Vec<AppId> {
        self.config
            .nodes
            .iter()
            .find(|n| &n.id == node)
            .map(|n| n.apps.clone())
            .unwrap_or_default()
    }

    fn expose_controller(&mut self) -> Result<(), HarnessError> {
        match &mut self.fabric {
            Fabric::InProc(net) => net.set_controller(self.qusec.clone()),
            Fabric::Net(f) => {
                let server = f.spawn(controller_router(self.qusec.clone()))?;
                f.dir.set_controller(server.url());
                f.servers.insert("QUSEC".into(), server);
            }
        }
        Ok(())
    }

    fn expose_kms(&mut self, node: &NodeId, kms: Arc<Kms>) -> Result<(), HarnessError> {
        match &mut self.fabric {
            Fabric::InProc(net) => net.add_kms(node.clone(), kms),
            Fabric::Net(f) => {
                let server = f.spawn(kms_router(kms))?;
                f.dir.set_kms(node.clone(), server.url());
                f.servers.insert(format!("KMS_{node}"), server);
            }
        }
        Ok(())
    }

    fn expose_vkms(&mut self, node: &NodeId, vkms: Arc<Vkms>) -> Result<String, HarnessError> {
        match &mut self.fabric {
            Fabric::InProc(net) => {
                net.add_vkms(node.clone(), vkms);
                Ok(format!("inproc://{node}"))
            }
            Fabric::Net(f) => {
                let server = f.spawn(vkms_router(vkms))?;
                let url = server.url();
                f.dir.set_vkms(node.clone(), url.clone());
                f.servers.insert(format!("VKMS_{node}"), server);
                Ok(url)
            }
        }
    }

    pub fn config(&self) -> &TopologyConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn qusec(&self) -> &Arc<Qusec> {
        &self.qusec
    }

    pub fn kms(&self, node: &str) -> Option<&Arc<Kms>> {
        self.kms.get(&NodeId::from(node))
    }

    pub fn vkms(&self, node: &str) -> Option<&Arc<Vkms>> {
        self.vkms.get(&NodeId::from(node))
    }

    pub fn vkms_all(&self) -> impl Iterator<Item = (&NodeId, &Arc<Vkms>)> {
        self.vkms.iter()
    }

    pub fn simulator(&self) -> &QkdSimulator {
        &self.sim
    }

    /// The in-process network, for fault injection and the relay tap.
    pub fn inproc(&self) -> Option<&InProcNetwork> {
        match &self.fabric {
            Fabric::InProc(net) => Some(net),
            Fabric::Net(_) => None,
        }
    }

    pub fn directory(&self) -> Arc<dyn Directory> {
        match &self.fabric {
            Fabric::InProc(net) => Arc::new(net.clone()),
            Fabric::Net(f) => Arc::new(f.dir.clone()),
        }
    }

    pub fn node_of_app(&self, app: &AppId) -> Result<NodeId, HarnessError> {
        self.config
            .node_of_app(app)
            .map(|n| n.id.clone())
            .ok_or_else(|| HarnessError::UnknownApplication(app.clone()))
    }

    /// What an application uses to reach its local vKMS: a loopback HTTP
    /// client in net mode, the in-process handle otherwise.
    pub fn app_endpoint(&self, app: &AppId) -> Result<Arc<dyn VkmsApi>, HarnessError> {
        let node = self.node_of_app(app)?;
        self.directory()
            .vkms(&node, &node)
            .ok_or_else(|| HarnessError::Setup(format!("no vKMS on {node}")))
    }

    /// Cross-service calls recorded since the last clear.
    pub fn messages(&self) -> Vec<MessageRecord> {
        match &self.fabric {
            Fabric::InProc(net) => net.messages(),
            Fabric::Net(f) => f.dir.messages(),
        }
    }

    pub fn clear_messages(&self) {
        match &self.fabric {
            Fabric::InProc(net) => net.clear_messages(),
            Fabric::Net(f) => f.dir.clear_messages(),
        }
    }

    /// Generates `count` more keys on every link still in service.
    pub fn top_up(&self, count: usize) -> Result<(), HarnessError> {
        let removed = self.removed.lock().unwrap();
        for spec in self.config.links.iter().filter(|l| !removed.contains(&l.link_id())) {
            self.sim.fill_stores(&spec.link_id(), count).map_err(setup)?;
        }
        Ok(())
    }

    /// Takes a QKD link out of service at the controller and both KMSs.
    pub fn remove_link(&self, link_id: &LinkId) -> Result<(), HarnessError> {
        let link = self.qusec.remove_link(link_id).map_err(setup)?;
        for end in [&link.endpoint_a, &link.endpoint_b] {
            if let Some(kms) = self.kms.get(end) {
                kms.remove_link(link_id);
            }
        }
        self.removed.lock().unwrap().insert(link_id.clone());
        Ok(())
    }

    /// Makes a node's services unreachable. In net mode the servers are
    /// stopped and cannot be brought back.
    pub fn take_node_down(&mut self, node: &str) {
        let node_id = NodeId::from(node);
        match &mut self.fabric {
            Fabric::InProc(net) => net.set_node_down(&node_id, true),
            Fabric::Net(f) => {
                for key in [format!("KMS_{node}"), format!("VKMS_{node}")] {
                    if let Some(server) = f.servers.get_mut(&key) {
                        server.stop();
                    }
                }
            }
        }
    }
}

impl NetFabric {
    fn spawn(&self, router: Router) -> Result<Server, HarnessError> {
        let rt = self.runtime.as_ref().expect("runtime lives as long as the fabric");
        Server::spawn(rt.handle(), router).map_err(setup)
    }
}
