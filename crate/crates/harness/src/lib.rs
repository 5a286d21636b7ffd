//! Testbed runner for qsafe topologies.
//!
//! A [`TopologyConfig`] describes nodes, QKD links and named test cases.
//! [`Testbed::start`] brings up one controller plus a KMS and vKMS per node,
//! either in-process or as loopback HTTP services. [`run_case`] drives
//! application sessions through the testbed and records per-phase timings
//! for both sides, and [`emit_report`] turns those into CSV and summary
//! statistics.

pub mod cases;
pub mod config;
pub mod report;
pub mod testbed;

use qsafe_core::ids::AppId;
use qsafe_core::level::SecurityLevel;
use qsafe_core::vkms::VkmsError;
use thiserror::Error;

pub use cases::{run_case, run_session, CaseRun, PhaseTimings, Side, TestCase};
pub use config::{ConfigError, TopologyConfig};
pub use report::{emit_report, summarize, ReportError, Summary};
pub use testbed::{load_topology, Mode, Testbed};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("testbed setup failed: {0}")]
    Setup(String),
    #[error("unknown case {0}")]
    UnknownCase(String),
    #[error("unknown application {0}")]
    UnknownApplication(AppId),
    #[error("{case} iteration {iteration}: expected {expected}, assigned {assigned}")]
    AssignmentMismatch {
        case: String,
        iteration: usize,
        expected: SecurityLevel,
        assigned: SecurityLevel,
    },
    #[error("{case} iteration {iteration}: key mismatch: {reason}")]
    KeyMismatch {
        case: String,
        iteration: usize,
        reason: String,
    },
    #[error("{case} iteration {iteration}: {} request failed: {source}", side.as_str())]
    Session {
        case: String,
        iteration: usize,
        side: Side,
        #[source]
        source: VkmsError,
    },
}
