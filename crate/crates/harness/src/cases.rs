//! Scenario execution and per-phase timing capture.

use std::time::Instant;

use qsafe_core::ids::{AppId, SessionId};
use qsafe_core::level::SecurityLevel;
use qsafe_core::vkms::{AppKey, AppKeyRequest, KeyWithIdRequest};
use serde::{Deserialize, Serialize};

use crate::testbed::Testbed;
use crate::HarnessError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Side {
    Initiator,
    Target,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Initiator => "INITIATOR",
            Self::Target => "TARGET",
        }
    }
}

/// One side of one session, in milliseconds.
///
/// The four phases come from the vKMS. On the target side `t_assignment`
/// is the controller lookup, `t_configuration` is always zero (the target
/// skips configuration) and `t_derivation` is key retrieval. `t_e2e` is
/// measured by the harness around the application call, so it includes
/// the application-to-vKMS hop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub case_id: String,
    pub iteration: usize,
    pub session_id: SessionId,
    pub level: SecurityLevel,
    pub side: Side,
    pub t_assignment: f64,
    pub t_configuration: f64,
    pub t_derivation: f64,
    pub t_delivery: f64,
    pub t_e2e: f64,
}

impl PhaseTimings {
    pub const PHASES: [&'static str; 5] = ["t_assignment", "t_configuration", "t_derivation", "t_delivery", "t_e2e"];

    fn from_key(case_id: &str, iteration: usize, side: Side, key: &AppKey, e2e_ms: f64) -> Self {
        Self {
            case_id: case_id.to_owned(),
            iteration,
            session_id: key.session_id.clone(),
            level: key.level,
            side,
            t_assignment: key.timings.assignment_ms,
            t_configuration: key.timings.configuration_ms,
            t_derivation: key.timings.derivation_ms,
            t_delivery: key.timings.delivery_ms,
            t_e2e: e2e_ms,
        }
    }

    pub fn phase(&self, name: &str) -> Option<f64> {
        Some(match name {
            "t_assignment" => self.t_assignment,
            "t_configuration" => self.t_configuration,
            "t_derivation" => self.t_derivation,
            "t_delivery" => self.t_delivery,
            "t_e2e" => self.t_e2e,
            _ => return None,
        })
    }

    pub fn components(&self) -> [f64; 4] {
        [self.t_assignment, self.t_configuration, self.t_derivation, self.t_delivery]
    }

    pub fn component_sum(&self) -> f64 {
        self.components().iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TestCase {
    pub id: String,
    pub initiator: AppId,
    pub target: AppId,
    pub expected: SecurityLevel,
    pub size_bits: usize,
}

impl TestCase {
    /// Looks a case up in the testbed's topology file.
    pub fn from_config(bed: &Testbed, id: &str) -> Result<Self, HarnessError> {
        let spec = bed
            .config()
            .case(id)
            .ok_or_else(|| HarnessError::UnknownCase(id.to_owned()))?;
        Ok(Self {
            id: spec.id.clone(),
            initiator: spec.initiator.clone(),
            target: spec.target.clone(),
            expected: spec.expected_level,
            size_bits: bed.config().defaults.kdf_out_bits,
        })
    }

    pub fn all_from_config(bed: &Testbed) -> Vec<Self> {
        bed.config()
            .cases
            .iter()
            .map(|c| Self::from_config(bed, &c.id).expect("case comes from the same config"))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct CaseRun {
    pub case: TestCase,
    pub iterations: usize,
    pub passed: usize,
    pub samples: Vec<PhaseTimings>,
}

impl CaseRun {
    pub fn accuracy(&self) -> f64 {
        if self.iterations == 0 {
            return 0.0;
        }
        self.passed as f64 / self.iterations as f64
    }
}

fn elapsed_ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

/// One full establishment: initiator request, then the target redeems the
/// key id. The id is handed over directly, so its transport costs nothing.
pub fn run_session(bed: &Testbed, case: &TestCase, iteration: usize) -> Result<[PhaseTimings; 2], HarnessError> {
    let initiator = bed.app_endpoint(&case.initiator)?;
    let target = bed.app_endpoint(&case.target)?;
    let session_err = |side, source| HarnessError::Session {
        case: case.id.clone(),
        iteration,
        side,
        source,
    };

    let t0 = Instant::now();
    let a = initiator
        .app_get_key(&AppKeyRequest {
            initiator_app: case.initiator.clone(),
            target_app: case.target.clone(),
            size_bits: case.size_bits,
        })
        .map_err(|e| session_err(Side::Initiator, e))?;
    let e2e_a = elapsed_ms(t0);
    if a.level != case.expected {
        return Err(HarnessError::AssignmentMismatch {
            case: case.id.clone(),
            iteration,
            expected: case.expected,
            assigned: a.level,
        });
    }

    let t1 = Instant::now();
    let b = target
        .app_get_key_with_id(&KeyWithIdRequest {
            target_app: case.target.clone(),
            key_id: a.key_id.clone(),
        })
        .map_err(|e| session_err(Side::Target, e))?;
    let e2e_b = elapsed_ms(t1);

    let mismatch = |reason: String| HarnessError::KeyMismatch {
        case: case.id.clone(),
        iteration,
        reason,
    };
    if a.key != b.key {
        return Err(mismatch("initiator and target keys differ".into()));
    }
    if a.key.len_bits() != case.size_bits {
        return Err(mismatch(format!("key has {} bits, requested {}", a.key.len_bits(), case.size_bits)));
    }
    if b.level != a.level || b.session_id != a.session_id {
        return Err(mismatch("target resolved a different session".into()));
    }
    Ok([
        PhaseTimings::from_key(&case.id, iteration, Side::Initiator, &a, e2e_a),
        PhaseTimings::from_key(&case.id, iteration, Side::Target, &b, e2e_b),
    ])
}

/// Runs `iterations` sequential sessions, stopping at the first failure.
/// Tops the links up first so a long run does not drain them.
pub fn run_case(bed: &Testbed, case: &TestCase, iterations: usize) -> Result<CaseRun, HarnessError> {
    bed.top_up(iterations)?;
    let mut samples = Vec::with_capacity(2 * iterations);
    for i in 0..iterations {
        samples.extend(run_session(bed, case, i)?);
    }
    Ok(CaseRun {
        case: case.clone(),
        iterations,
        passed: iterations,
        samples,
    })
}
