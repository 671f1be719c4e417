//! Randomized property suites, each checked against its own brute-force
//! oracle or closed-form expectation.

mod model;
mod structure;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use model::*;
pub use structure::*;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    /// Roughly a tenth of the full trial counts.
    Quick,
    #[default]
    Full,
}

impl Scale {
    pub fn trials(self, full: usize) -> usize {
        match self {
            Scale::Full => full,
            Scale::Quick => full.div_ceil(10),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyResult {
    pub name: String,
    pub trials: usize,
    pub failures: usize,
    /// Failures tolerated by properties that hold only with high probability.
    pub allowed_failures: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_failure: Option<String>,
}

impl PropertyResult {
    pub fn passed(&self) -> bool {
        self.failures <= self.allowed_failures
    }
}

impl fmt::Display for PropertyResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: trials={} failures={}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.trials,
            self.failures
        )?;
        if self.allowed_failures > 0 {
            write!(f, " allowed={}", self.allowed_failures)?;
        }
        if let Some(msg) = &self.first_failure {
            write!(f, " first_failure=\"{msg}\"")?;
        }
        Ok(())
    }
}

/// Accumulates trial outcomes for one property.
pub(crate) struct Tally {
    result: PropertyResult,
}

impl Tally {
    pub(crate) fn new(name: &str, allowed_failures: usize) -> Self {
        Self {
            result: PropertyResult {
                name: name.to_string(),
                trials: 0,
                failures: 0,
                allowed_failures,
                first_failure: None,
            },
        }
    }

    /// Records one trial; `Ok(None)` passes, `Ok(Some(msg))` and `Err` fail.
    pub(crate) fn record<E: fmt::Display>(&mut self, outcome: Result<Option<String>, E>) {
        self.result.trials += 1;
        let failure = match outcome {
            Ok(None) => return,
            Ok(Some(msg)) => msg,
            Err(e) => format!("error: {e}"),
        };
        self.result.failures += 1;
        if self.result.first_failure.is_none() {
            self.result.first_failure = Some(format!("trial {}: {failure}", self.result.trials - 1));
        }
    }

    pub(crate) fn finish(self) -> PropertyResult {
        self.result
    }
}

/// `None` when `ok`, otherwise the message.
pub(crate) fn check(ok: bool, msg: impl FnOnce() -> String) -> Option<String> {
    if ok {
        None
    } else {
        Some(msg())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub scale: Scale,
    pub results: Vec<PropertyResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(PropertyResult::passed)
    }

    pub fn failed(&self) -> impl Iterator<Item = &PropertyResult> {
        self.results.iter().filter(|r| !r.passed())
    }

    /// One line per property followed by a summary line.
    pub fn to_text(&self) -> String {
        let mut out: String = self.results.iter().map(|r| format!("{r}\n")).collect();
        let failed = self.failed().count();
        out.push_str(&format!(
            "{} of {} properties passed\n",
            self.results.len() - failed,
            self.results.len()
        ));
        out
    }
}

type Suite = fn(u64, Scale) -> PropertyResult;

/// Every suite, in report order.
pub const SUITES: &[(&str, Suite)] = &[
    ("molgraph.bond_pairing", bond_pairing),
    ("molgraph.mirror_involution", mirror_involution),
    ("molgraph.rigid_preserves_distances", rigid_preserves_distances),
    ("edgegraph.node_count", edge_node_count),
    ("edgegraph.incoming_neighbors", incoming_neighbors_oracle),
    ("edgegraph.relabeling_commutes", relabeling_commutes),
    ("ordering.canonical_frame", canonical_frame),
    ("ordering.se3_invariance", se3_invariance),
    ("ordering.conformer_invariance", conformer_invariance),
    ("ordering.mirror_reversal", mirror_reversal),
    ("ordering.determinism", ordering_determinism),
    ("chienn.vanilla_permutation_invariance", vanilla_permutation_invariance),
    ("chienn.shift_aggregate_invariance", shift_aggregate_invariance),
    ("chienn.update_shift_invariance", update_shift_invariance),
    ("chienn.order_sensitivity", order_sensitivity),
    ("chienn.linear_psi_collapse", linear_psi_collapse),
    ("chienn.k1_permutation_invariance", k1_permutation_invariance),
    ("chienn.enantiomer_discrimination", enantiomer_discrimination),
    ("chienn.enantiomer_blindness_k1", enantiomer_blindness_k1),
    ("autonn.op_gradients", op_gradients),
    ("autonn.stack_gradients", stack_gradients),
    ("autonn.forward_determinism", forward_determinism),
    ("train.lr_continuity", lr_continuity),
    ("train.clip_never_increases_norm", clip_never_increases_norm),
    ("train.seed_determinism", training_determinism),
    ("datagen.oracle_antisymmetry", oracle_antisymmetry),
    ("datagen.balance", dataset_balance),
    ("datagen.oracle_order_agreement", oracle_order_agreement),
    ("datagen.center_mirror_reversal", center_mirror_reversal),
    ("datagen.pair_target_gap", pair_target_gap),
];

pub fn run_all(seed: u64, scale: Scale) -> VerifyReport {
    run_matching(seed, scale, |_| true)
}

/// Runs the suites whose name satisfies `filter`.
pub fn run_matching(seed: u64, scale: Scale, filter: impl Fn(&str) -> bool) -> VerifyReport {
    let results = SUITES
        .iter()
        .filter(|(name, _)| filter(name))
        .map(|(name, suite)| {
            log::info!("running {name}");
            suite(seed, scale)
        })
        .collect();
    VerifyReport { seed, scale, results }
}
