mod common;

use common::*;
use qsafe_core::crypto::{kdf_combine, KemSuite, SecretInput};
use qsafe_core::level::SecurityLevel;
use qsafe_core::qusec::{PolicyConfig, QusecError, Role, SessionState};
use qsafe_core::vkms::VkmsError;

const TABLE: [(&str, &str, SecurityLevel); 4] = [
    ("E", "F", SecurityLevel::L1),
    ("D", "F", SecurityLevel::L2),
    ("C", "D", SecurityLevel::L3),
    ("A", "B", SecurityLevel::L4),
];

#[test]
fn reference_cases_agree_on_toy_kem() {
    let bed = fig2(toy_config(), 16);
    for (src, dst, level) in TABLE {
        let (a, b) = bed.exchange(src, dst).unwrap();
        assert_eq!(a.level, level, "{src}->{dst}");
        assert_eq!(b.level, level);
        assert_eq!(a.key, b.key, "{src}->{dst}");
        assert_eq!(a.key.len_bits(), 256);
        assert_eq!(a.key_id, b.key_id);
        let record = bed.qusec.session(&a.session_id).unwrap();
        assert_eq!(record.state, SessionState::DeliveredBoth);
    }
    assert!(bed.all_clean());
}

#[test]
fn reference_cases_agree_on_ml_kem() {
    let bed = fig2(PolicyConfig::default(), 16);
    for (src, dst, level) in TABLE {
        let (a, b) = bed.exchange(src, dst).unwrap();
        assert_eq!(a.level, level);
        assert_eq!(a.key, b.key);
    }
}

#[test]
fn reverse_direction_level3_and_level2() {
    let bed = fig2(toy_config(), 16);
    for (src, dst, level) in [("D", "C", SecurityLevel::L3), ("F", "D", SecurityLevel::L2), ("F", "E", SecurityLevel::L1)] {
        let (a, b) = bed.exchange(src, dst).unwrap();
        assert_eq!(a.level, level);
        assert_eq!(a.key, b.key);
    }
    assert!(bed.all_clean());
}

#[test]
fn dual_kem_level4() {
    let config = PolicyConfig {
        dual_kem_l4: true,
        kem_suite: KemSuite::MlKem768,
        second_kem_suite: KemSuite::ToyKem,
        ..PolicyConfig::default()
    };
    let bed = fig2(config, 4);
    bed.vkms_of("A").clear_transcript();
    let (a, b) = bed.exchange("A", "B").unwrap();
    assert_eq!(a.key, b.key);
    let entry = bed
        .vkms_of("A")
        .transcript()
        .into_iter()
        .find(|e| e.session_id == a.session_id)
        .unwrap();
    let labels: Vec<&str> = entry.inputs.iter().map(|(l, _)| l.as_str()).collect();
    assert_eq!(labels, ["kem1", "kem2"]);
}

#[test]
fn keys_differ_across_sessions() {
    let bed = fig2(toy_config(), 16);
    let mut seen = Vec::new();
    for _ in 0..5 {
        for (src, dst, _) in TABLE {
            let (a, _) = bed.exchange(src, dst).unwrap();
            assert!(!seen.contains(&a.key));
            seen.push(a.key);
        }
    }
}

#[test]
fn level3_both_sides_combine_identical_inputs() {
    let bed = fig2(toy_config(), 4);
    let (a, _) = bed.exchange("C", "D").unwrap();
    let pick = |node: &str| {
        bed.vkms_of(node)
            .transcript()
            .into_iter()
            .find(|e| e.session_id == a.session_id && e.purpose == "session-key")
            .unwrap()
    };
    let c = pick("C");
    let d = pick("D");
    assert_eq!(c.role, Role::Receiver);
    assert_eq!(d.role, Role::Passive);
    assert_eq!(c.inputs, d.inputs);
    let labels: Vec<&str> = c.inputs.iter().map(|(l, _)| l.as_str()).collect();
    assert_eq!(labels, ["kem1", "qkd"]);

    // The relay shipped exactly the link key both sides used.
    let relay = bed
        .vkms_of("E")
        .transcript()
        .into_iter()
        .find(|e| e.session_id == a.session_id && e.purpose == "relay-otp")
        .unwrap();
    assert_eq!(relay.inputs[0].1, c.inputs[1].1);

    let inputs: Vec<SecretInput> = c.inputs.iter().map(|(l, m)| SecretInput::new(l.clone(), m.clone())).collect();
    let recomputed = kdf_combine(&inputs, c.context.as_ref().unwrap()).unwrap();
    assert_eq!(recomputed, a.key);
}

#[test]
fn target_lookup_errors() {
    let bed = fig2(toy_config(), 4);
    let a = bed.get_key("E", "F").unwrap();
    // Initiator cannot redeem its own key id.
    let err = bed.get_key_with_id("E", &a.key_id).unwrap_err();
    assert_eq!(err, VkmsError::Controller(QusecError::WrongCaller));
    // Unrelated app.
    let err = bed.get_key_with_id("D", &a.key_id).unwrap_err();
    assert_eq!(err, VkmsError::Controller(QusecError::UnknownSession));
    bed.get_key_with_id("F", &a.key_id).unwrap();
    let err = bed.get_key_with_id("F", &a.key_id).unwrap_err();
    assert_eq!(err, VkmsError::Controller(QusecError::AlreadyDelivered));
}

#[test]
fn same_node_pair_is_rejected() {
    let bed = fig2(toy_config(), 4);
    let err = bed.get_key("E", "E").unwrap_err();
    assert!(matches!(err, VkmsError::Controller(QusecError::SameNode(_))));
}
