//! Verification suites: fused-vs-reference equivalence, finite-difference
//! gradient checks, base preservation, frozen-weight integrity, and the
//! parameter table — all deterministic given their seed and runnable as one
//! command.

pub mod oracle;
mod suites;

use serde::Serialize;

pub use suites::{
    base_preservation_suite, canary_suite, equivalence_suite, format_grouped,
    frozen_weight_suite, grad_check_suite, human_millions, param_checks, param_table, run_all,
    GradScope, ParamRow, ParamTable,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
}

/// One verification check with everything needed to replay it.
#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub status: CheckStatus,
    /// Measured maximum relative error, where the check is numeric.
    pub max_rel_err: Option<f64>,
    pub tolerance: Option<f64>,
    pub seed: u64,
    pub dims: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn new() -> Self {
        VerifyReport::default()
    }

    /// Records a numeric comparison: passes iff `err <= tol`.
    pub fn record(
        &mut self,
        name: impl Into<String>,
        err: f64,
        tol: f64,
        seed: u64,
        dims: impl Into<String>,
    ) {
        self.checks.push(CheckResult {
            name: name.into(),
            status: if err <= tol { CheckStatus::Pass } else { CheckStatus::Fail },
            max_rel_err: Some(err),
            tolerance: Some(tol),
            seed,
            dims: dims.into(),
        });
    }

    /// Records a structural (non-numeric) check.
    pub fn record_bool(
        &mut self,
        name: impl Into<String>,
        ok: bool,
        seed: u64,
        dims: impl Into<String>,
    ) {
        self.checks.push(CheckResult {
            name: name.into(),
            status: if ok { CheckStatus::Pass } else { CheckStatus::Fail },
            max_rel_err: None,
            tolerance: None,
            seed,
            dims: dims.into(),
        });
    }

    pub fn merge(&mut self, other: VerifyReport) {
        self.checks.extend(other.checks);
    }

    /// A report with any failed check has failed overall.
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status == CheckStatus::Pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| c.status == CheckStatus::Fail)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "passed": self.passed(),
            "checks": self.checks,
        })
    }

    /// Human-readable summary, one line per check.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let status = match c.status {
                CheckStatus::Pass => "PASS",
                CheckStatus::Fail => "FAIL",
            };
            let err = match (c.max_rel_err, c.tolerance) {
                (Some(e), Some(t)) => format!(" err={e:.3e} tol={t:.0e}"),
                _ => String::new(),
            };
            out.push_str(&format!(
                "[{status}] {name}{err} (seed={seed}, {dims})\n",
                name = c.name,
                seed = c.seed,
                dims = c.dims
            ));
        }
        let (pass, total) = (
            self.checks.iter().filter(|c| c.status == CheckStatus::Pass).count(),
            self.checks.len(),
        );
        out.push_str(&format!(
            "{pass}/{total} checks passed — {}\n",
            if self.passed() { "OK" } else { "FAILED" }
        ));
        out
    }
}
