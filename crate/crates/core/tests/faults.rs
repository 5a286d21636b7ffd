mod common;

use std::sync::Arc;

use common::*;
use qsafe_core::crypto::KemSuite;
use qsafe_core::ids::NodeId;
use qsafe_core::kms::{KmsApi, KmsError};
use qsafe_core::vkms::{AppKeyRequest, KeyWithIdRequest, VkmsApi};
use qsafe_core::level::SecurityLevel;
use qsafe_core::qusec::{PolicyConfig, QusecError};
use qsafe_core::vkms::{AppKey, PeerMessage, VkmsError};

fn assert_failed_closed(bed: &Bed, err: &VkmsError, level: SecurityLevel) {
    match err {
        VkmsError::DerivationFailed { level: l, .. } => assert_eq!(*l, level),
        other => panic!("expected derivation failure, got {other:?}"),
    }
    assert_eq!(bed.qusec.open_session_count(), 0);
    assert!(bed.all_clean(), "vKMS state left behind");
}

fn ok_after(bed: &Bed, src: &str, dst: &str) -> (AppKey, AppKey) {
    let (a, b) = bed.exchange(src, dst).unwrap();
    assert_eq!(a.key, b.key);
    (a, b)
}

#[test]
fn flipped_otp_bit_fails_key_confirmation() {
    let bed = fig2(toy_config(), 8);
    *bed.vkms_of("E").faults().flip_relay_otp_bit.lock().unwrap() = Some(17);
    let err = bed.get_key("C", "D").unwrap_err();
    assert_eq!(err.root_cause(), &VkmsError::KeyConfirmationFailed);
    assert_failed_closed(&bed, &err, SecurityLevel::L3);
    *bed.vkms_of("E").faults().flip_relay_otp_bit.lock().unwrap() = None;
    ok_after(&bed, "C", "D");
}

#[test]
fn tampered_relay_payload_fails_integrity() {
    let bed = fig2(toy_config(), 8);
    bed.net.set_peer_tamper(Some(Arc::new(|_, _, reply, msg: &mut PeerMessage| {
        if let (false, PeerMessage::RelayedPayload { encrypted_key, .. }) = (reply, msg) {
            encrypted_key[20] ^= 0x01;
        }
    })));
    let err = bed.get_key("D", "C").unwrap_err();
    assert_eq!(err.root_cause(), &VkmsError::IntegrityFailure);
    assert_failed_closed(&bed, &err, SecurityLevel::L3);
}

#[test]
fn corrupted_second_kem_ciphertext() {
    let config = PolicyConfig {
        dual_kem_l4: true,
        kem_suite: KemSuite::MlKem768,
        second_kem_suite: KemSuite::MlKem768,
        ..PolicyConfig::default()
    };
    let bed = fig2(config, 1);
    bed.net.set_peer_tamper(Some(Arc::new(|_, _, reply, msg: &mut PeerMessage| {
        if let (true, PeerMessage::EndpointCiphertexts { ciphertexts, .. }) = (reply, msg) {
            ciphertexts[1][0] ^= 0x80;
        }
    })));
    let err = bed.get_key("A", "B").unwrap_err();
    assert_eq!(err.root_cause(), &VkmsError::KeyConfirmationFailed);
    assert_failed_closed(&bed, &err, SecurityLevel::L4);
}

#[test]
fn forged_confirmation_tag() {
    let bed = fig2(toy_config(), 1);
    bed.net.set_peer_tamper(Some(Arc::new(|_, _, reply, msg: &mut PeerMessage| {
        if let (false, PeerMessage::KeyConfirm { tag, .. }) = (reply, msg) {
            tag[0] ^= 1;
        }
    })));
    let err = bed.get_key("A", "B").unwrap_err();
    assert_eq!(err.root_cause(), &VkmsError::KeyConfirmationFailed);
    assert_failed_closed(&bed, &err, SecurityLevel::L4);
}

#[test]
fn relay_node_down_mid_session() {
    let bed = fig2(toy_config(), 8);
    // E acknowledges its role, then disappears before the relay step.
    bed.net.set_peer_tamper(Some(Arc::new({
        let net = bed.net.clone();
        move |_, to: &NodeId, reply, msg: &mut PeerMessage| {
            if !reply && to.as_str() == "D" && matches!(msg, PeerMessage::KemCiphertext { .. }) {
                net.set_node_down(&NodeId::from("E"), true);
            }
        }
    })));
    let err = bed.get_key("C", "D").unwrap_err();
    assert_eq!(err.root_cause(), &VkmsError::PeerUnreachable(NodeId::from("E")));
    assert_eq!(bed.qusec.session_count(), 0);
    // E could not be told to clean up; the others are clean.
    for n in ["C", "D"] {
        assert!(bed.vkms_of(n).live_sessions().is_empty());
    }
}

#[test]
fn relay_link_exhausted_in_level2() {
    let bed = fig2(toy_config(), 2);
    bed.kms_of("E").get_key("x", "F", 2, 256).unwrap();
    let err = bed.get_key("D", "F").unwrap_err();
    assert!(matches!(err.root_cause(), VkmsError::Kms(KmsError::LinkKeysExhausted(_))));
    assert_failed_closed(&bed, &err, SecurityLevel::L2);
    assert!(bed.kms_of("F").relayed_snapshot().is_empty());
}

#[test]
fn level1_keys_exhausted() {
    let bed = fig2(toy_config(), 1);
    ok_after(&bed, "E", "F");
    let err = bed.get_key("E", "F").unwrap_err();
    assert!(matches!(err.root_cause(), VkmsError::Kms(KmsError::KeysExhausted { .. })));
    assert_failed_closed(&bed, &err, SecurityLevel::L1);
}

#[test]
fn controller_unreachable() {
    let bed = fig2(toy_config(), 1);
    bed.net.set_controller_down(true);
    assert!(matches!(bed.get_key("A", "B").unwrap_err(), VkmsError::ControllerUnreachable(_)));
    bed.net.set_controller_down(false);
    let a = bed.get_key("A", "B").unwrap();
    bed.net.set_controller_down(true);
    assert!(matches!(
        bed.get_key_with_id("B", &a.key_id).unwrap_err(),
        VkmsError::ControllerUnreachable(_)
    ));
    bed.net.set_controller_down(false);
    bed.get_key_with_id("B", &a.key_id).unwrap();
}

#[test]
fn target_kms_down_blocks_l1_configuration() {
    let bed = fig2(toy_config(), 2);
    bed.kms_of("F").set_available(false);
    let err = bed.get_key("E", "F").unwrap_err();
    assert!(matches!(
        err,
        VkmsError::Controller(QusecError::ParticipantRejected { ref node, .. }) if node.as_str() == "F"
    ));
    assert!(bed.all_clean());
    bed.kms_of("F").set_available(true);
    ok_after(&bed, "E", "F");
}

#[test]
fn unknown_application() {
    let bed = fig2(toy_config(), 1);
    let err = bed
        .vkms_of("A")
        .app_get_key_with_id(&KeyWithIdRequest {
            target_app: app("B"),
            key_id: "k".into(),
        })
        .unwrap_err();
    assert_eq!(err, VkmsError::UnknownApplication(app("B")));
    let err = bed
        .vkms_of("A")
        .app_get_key(&AppKeyRequest {
            initiator_app: app("B"),
            target_app: app("A"),
            size_bits: 256,
        })
        .unwrap_err();
    assert_eq!(err, VkmsError::UnknownApplication(app("B")));
}
