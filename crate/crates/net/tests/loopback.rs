use std::collections::BTreeMap;
use std::sync::Arc;

use qsafe_core::crypto::KemSuite;
use qsafe_core::ids::{AppId, KeyId, LinkId, NodeId};
use qsafe_core::kms::{Kms, KmsError};
use qsafe_core::level::SecurityLevel;
use qsafe_core::qkd_sim::{QkdLink, QkdSimulator};
use qsafe_core::qusec::{Node, NodeKind, PolicyConfig, Qusec, QusecError};
use qsafe_core::transport::{Directory, Service};
use qsafe_core::vkms::{AppKeyRequest, KeyWithIdRequest, NodeDescriptor, Vkms, VkmsApi, VkmsError};
use qsafe_net::{controller_router, kms_router, vkms_router, HttpDirectory, Server};
use serde_json::{json, Value};
use tokio::runtime::Runtime;

struct Bed {
    rt: Runtime,
    dir: HttpDirectory,
    qusec: Arc<Qusec>,
    kms: BTreeMap<String, Arc<Kms>>,
    servers: BTreeMap<String, Server>,
    _vkms: Vec<Arc<Vkms>>,
    _sim: QkdSimulator,
}

fn app(n: &str) -> AppId {
    AppId::new(format!("APP_{n}"))
}

fn fig2(kem: KemSuite) -> Bed {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .unwrap();
    let dir = HttpDirectory::new();
    let shared: Arc<dyn Directory> = Arc::new(dir.clone());
    let config = PolicyConfig {
        kem_suite: kem,
        second_kem_suite: kem,
        ..PolicyConfig::default()
    };
    let qusec = Arc::new(Qusec::new(shared.clone(), config));
    let mut servers = BTreeMap::new();
    let ctrl = Server::spawn(rt.handle(), controller_router(qusec.clone())).unwrap();
    dir.set_controller(ctrl.url());
    servers.insert("QUSEC".to_owned(), ctrl);

    let mut kms = BTreeMap::new();
    let mut vkms = Vec::new();
    let nodes = [("A", false), ("B", false), ("C", false), ("D", true), ("E", true), ("F", true)];
    for (i, (name, quantum)) in nodes.into_iter().enumerate() {
        let node = NodeId::from(name);
        let kind = if quantum { NodeKind::Quantum } else { NodeKind::Classical };
        if quantum {
            let k = Arc::new(Kms::new(node.clone(), shared.clone()));
            let s = Server::spawn(rt.handle(), kms_router(k.clone())).unwrap();
            dir.set_kms(node.clone(), s.url());
            servers.insert(format!("KMS_{name}"), s);
            kms.insert(name.to_owned(), k);
        }
        let v = Arc::new(Vkms::new(
            NodeDescriptor {
                node_id: node.clone(),
                kind,
                apps: vec![app(name)],
            },
            shared.clone(),
            i as u64,
        ));
        let s = Server::spawn(rt.handle(), vkms_router(v.clone())).unwrap();
        dir.set_vkms(node.clone(), s.url());
        servers.insert(format!("VKMS_{name}"), s);
        vkms.push(v);
        // Registration goes over the wire like any other controller call.
        let resp = ureq::post(format!("{}/topology/nodes", servers["QUSEC"].url()))
            .send_json(Node {
                node_id: node,
                kind,
                apps: vec![app(name)],
                vkms_endpoint: servers[&format!("VKMS_{name}")].url(),
            })
            .unwrap();
        assert_eq!(resp.status(), 200);
    }
    let sim = QkdSimulator::new();
    for (i, (a, b)) in [("D", "E"), ("E", "F")].into_iter().enumerate() {
        let link = QkdLink {
            link_id: LinkId::new(format!("L-{a}{b}")),
            endpoint_a: NodeId::from(a),
            endpoint_b: NodeId::from(b),
            key_size_bits: 256,
            rate_keys_per_sec: 100.0,
            seed: 1000 + i as u64,
        };
        let resp = ureq::post(format!("{}/topology/links", servers["QUSEC"].url()))
            .send_json(&link)
            .unwrap();
        assert_eq!(resp.status(), 200);
        kms[a].add_link(link.link_id.clone(), link.endpoint_b.clone(), 256).unwrap();
        kms[b].add_link(link.link_id.clone(), link.endpoint_a.clone(), 256).unwrap();
        kms[a].register_sae(app(b).as_str(), &link.endpoint_b).unwrap();
        kms[b].register_sae(app(a).as_str(), &link.endpoint_a).unwrap();
        sim.register_link(link.clone(), kms[a].clone(), kms[b].clone()).unwrap();
        sim.fill_stores(&link.link_id, 8).unwrap();
    }
    Bed {
        rt,
        dir,
        qusec,
        kms,
        servers,
        _vkms: vkms,
        _sim: sim,
    }
}

impl Bed {
    fn vkms(&self, node: &str) -> Arc<dyn VkmsApi> {
        let n = NodeId::from(node);
        self.dir.vkms(&n, &n).unwrap()
    }

    fn exchange(&self, src: &str, dst: &str) -> Result<(qsafe_core::vkms::AppKey, qsafe_core::vkms::AppKey), VkmsError> {
        let a = self.vkms(src).app_get_key(&AppKeyRequest {
            initiator_app: app(src),
            target_app: app(dst),
            size_bits: 256,
        })?;
        let b = self.vkms(dst).app_get_key_with_id(&KeyWithIdRequest {
            target_app: app(dst),
            key_id: a.key_id.clone(),
        })?;
        Ok((a, b))
    }

    fn url(&self, server: &str) -> String {
        self.servers[server].url()
    }
}

impl Drop for Bed {
    fn drop(&mut self) {
        for s in self.servers.values_mut() {
            s.stop();
        }
        let _ = &self.rt;
    }
}

#[test]
fn reference_cases_over_http() {
    let bed = fig2(KemSuite::MlKem768);
    for (src, dst, level) in [
        ("E", "F", SecurityLevel::L1),
        ("D", "F", SecurityLevel::L2),
        ("C", "D", SecurityLevel::L3),
        ("A", "B", SecurityLevel::L4),
    ] {
        let (a, b) = bed.exchange(src, dst).unwrap();
        assert_eq!(a.level, level, "{src}->{dst}");
        assert_eq!(a.key, b.key);
        assert_eq!(a.key.len_bits(), 256);
    }
    assert_eq!(bed.qusec.open_session_count(), 0);
}

#[test]
fn target_side_never_configures() {
    let bed = fig2(KemSuite::ToyKem);
    for (src, dst) in [("E", "F"), ("D", "F"), ("C", "D"), ("A", "B")] {
        let a = bed
            .vkms(src)
            .app_get_key(&AppKeyRequest {
                initiator_app: app(src),
                target_app: app(dst),
                size_bits: 256,
            })
            .unwrap();
        bed.dir.clear_messages();
        bed.vkms(dst)
            .app_get_key_with_id(&KeyWithIdRequest {
                target_app: app(dst),
                key_id: a.key_id,
            })
            .unwrap();
        let calls: Vec<&str> = bed
            .dir
            .messages()
            .iter()
            .filter(|m| m.service == Service::Controller)
            .map(|m| m.call)
            .collect();
        assert_eq!(calls, ["session_lookup", "confirm_delivery"], "{src}->{dst}");
    }
}

#[test]
fn etsi_shapes_on_the_wire() {
    let bed = fig2(KemSuite::ToyKem);
    let e = bed.url("KMS_E");
    let f = bed.url("KMS_F");

    let mut resp = ureq::get(format!("{e}/api/v1/keys/APP_F/status")).call().unwrap();
    let status: Value = resp.body_mut().read_json().unwrap();
    assert_eq!(status["source_KME_ID"], "KMS_E");
    assert_eq!(status["target_KME_ID"], "F");
    assert_eq!(status["key_size"], 256);
    assert_eq!(status["stored_key_count"], 8);

    let mut resp = ureq::post(format!("{e}/api/v1/keys/APP_F/enc_keys"))
        .header("X-SAE-ID", "APP_E")
        .send_json(json!({"number": 2, "size": 256}))
        .unwrap();
    let enc: Value = resp.body_mut().read_json().unwrap();
    let keys = enc["keys"].as_array().unwrap();
    assert_eq!(keys.len(), 2);
    let id = keys[0]["key_ID"].as_str().unwrap().to_owned();

    let mut resp = ureq::post(format!("{f}/api/v1/keys/APP_F/dec_keys"))
        .send_json(json!({"key_IDs": [{"key_ID": id}]}))
        .unwrap();
    let dec: Value = resp.body_mut().read_json().unwrap();
    assert_eq!(dec["keys"][0]["key"], keys[0]["key"]);

    let resp = ureq::post(format!("{f}/api/v1/keys/APP_F/dec_keys"))
        .config()
        .http_status_as_error(false)
        .build()
        .send_json(json!({"key_IDs": [{"key_ID": id}]}))
        .unwrap();
    assert_eq!(resp.status(), 400);

    let mut resp = ureq::post(format!("{}/security_level_request", bed.url("QUSEC")))
        .send_json(json!({"src_app": "APP_C", "dst_app": "APP_D"}))
        .unwrap();
    let level: Value = resp.body_mut().read_json().unwrap();
    assert_eq!(level["level"], serde_json::to_value(SecurityLevel::L3).unwrap());
}

#[test]
fn typed_errors_cross_the_wire() {
    let bed = fig2(KemSuite::ToyKem);
    let d = NodeId::from("D");
    let kms = bed.dir.kms(&d, &NodeId::from("E")).unwrap();
    assert_eq!(
        kms.get_key_with_id("APP_E", &[KeyId::from("nope")]).unwrap_err(),
        KmsError::UnknownKeyId(KeyId::from("nope"))
    );
    let err = bed.exchange("E", "E").unwrap_err();
    assert!(matches!(err, VkmsError::Controller(QusecError::SameNode(_))));
    let ctrl = bed.dir.controller(&d).unwrap();
    assert_eq!(
        ctrl.session_lookup(&qsafe_core::qusec::LookupRequest {
            app: app("D"),
            key_id: KeyId::from("nope"),
        })
        .unwrap_err(),
        QusecError::UnknownSession
    );
}

#[test]
fn stopped_relay_fails_closed() {
    let mut bed = fig2(KemSuite::ToyKem);
    bed.servers.get_mut("VKMS_E").unwrap().stop();
    let err = bed.exchange("C", "D").unwrap_err();
    assert!(
        matches!(err, VkmsError::Controller(QusecError::ParticipantUnreachable(ref n)) if n.as_str() == "E"),
        "{err:?}"
    );
    assert_eq!(bed.qusec.open_session_count(), 0);
    assert!(bed.kms["D"].relayed_snapshot().is_empty());
    // Level 4 between A and B does not involve E.
    bed.exchange("A", "B").unwrap();
}

#[test]
fn unknown_service_is_unreachable() {
    let bed = fig2(KemSuite::ToyKem);
    let d = NodeId::from("D");
    assert!(bed.dir.kms(&d, &NodeId::from("A")).is_none());
    bed.dir.set_kms(NodeId::from("A"), "http://127.0.0.1:1".into());
    let kms = bed.dir.kms(&d, &NodeId::from("A")).unwrap();
    assert_eq!(kms.status("x").unwrap_err(), KmsError::Unreachable("A".into()));
}
