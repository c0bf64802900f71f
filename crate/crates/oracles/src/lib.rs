//! Reference implementations used only by tests.
//!
//! Everything in this crate is written independently of the production crate
//! and takes plain data (token slices, parent arrays, closures). Production
//! code must never call into here; the dependency direction is
//! dev-dependency only.

pub mod frames;
pub mod grad;
pub mod rules;
pub mod scan;
pub mod trees;

use std::time::Duration;

/// Outcome of running an oracle comparison over a batch of cases.
#[derive(Debug, Clone)]
pub struct OracleReport {
    pub cases: usize,
    pub mismatches: usize,
    pub wall: Duration,
}

impl OracleReport {
    pub fn all_agree(&self) -> bool {
        self.cases > 0 && self.mismatches == 0
    }
}
