//! Seeded train-and-evaluate studies over the standard datasets, and a small
//! pass/fail reporting helper for the acceptance suite.

use std::fmt;
use std::time::Instant;

use phiml_core::datagen::{Dataset, Split};
use phiml_core::eval::{evaluate, EvalContext, EvalReport, RolloutMode, Scenario, Target, Window};
use phiml_core::models::{NaiveStressModel, PhiMlModel, TrainedModel};
use phiml_core::training::{train, TrainConfig, TrainReport};
use phiml_core::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Naive,
    Phiml,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Naive => "naive",
            Kind::Phiml => "phiml",
        }
    }
}

/// One trained and evaluated model.
#[derive(Debug, Clone)]
pub struct StudyRun {
    pub kind: Kind,
    pub seed: u64,
    pub model: TrainedModel,
    pub train: TrainReport,
    pub report: EvalReport,
    pub wall_time_s: f64,
}

impl StudyRun {
    fn metric(&self, scenario: Scenario, rollout: RolloutMode, target: Target, r2: bool) -> f64 {
        self.report
            .get(scenario, rollout, target, Window::Full)
            .and_then(|e| if r2 { e.r2 } else { e.mape })
            .unwrap_or(f64::NAN)
    }

    /// Full-path stress R²; NaN when undefined.
    pub fn stress_r2(&self, scenario: Scenario, rollout: RolloutMode) -> f64 {
        self.metric(scenario, rollout, Target::Sigma, true)
    }

    /// Full-path stress MAPE in percent; NaN when undefined.
    pub fn stress_mape(&self, scenario: Scenario, rollout: RolloutMode) -> f64 {
        self.metric(scenario, rollout, Target::Sigma, false)
    }
}

/// Trains `kind` on the dataset's train split with `config` (whose seed is
/// replaced by `seed`, also used for initialization) and evaluates it in both
/// rollout modes.
pub fn run(dataset: &Dataset, kind: Kind, seed: u64, config: &TrainConfig) -> Result<StudyRun> {
    let started = Instant::now();
    let train_rows = dataset.rows_in(Split::Train);
    let val_rows = dataset.rows_in(Split::Val);
    let config = TrainConfig {
        seed,
        ..config.clone()
    };
    let (model, report) = match kind {
        Kind::Naive => {
            let mut m = NaiveStressModel::new(dataset.norm, dataset.mode, seed)?;
            let r = train(&mut m, &train_rows, &val_rows, &config)?;
            (TrainedModel::Naive(m), r)
        }
        Kind::Phiml => {
            let mut m = PhiMlModel::new(dataset.norm, dataset.mode, seed)?;
            let r = train(&mut m, &train_rows, &val_rows, &config)?;
            (TrainedModel::Phiml(m), r)
        }
    };
    let ctx = EvalContext {
        model: kind.name().into(),
        seed,
        config_hash: String::new(),
    };
    let (eval_report, _) = evaluate(&model, dataset, &RolloutMode::ALL, &ctx)?;
    Ok(StudyRun {
        kind,
        seed,
        model,
        train: report,
        report: eval_report,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

/// Median with NaN ordered below every number, so an undefined score never
/// improves a median where larger is better.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| match (a.is_nan(), b.is_nan()) {
        (true, true) => std::cmp::Ordering::Equal,
        (true, false) => std::cmp::Ordering::Less,
        (false, true) => std::cmp::Ordering::Greater,
        _ => a.total_cmp(b),
    });
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median with NaN ordered above every number; for metrics where larger is
/// worse.
pub fn median_high_is_bad(values: &[f64]) -> f64 {
    let flipped: Vec<f64> = values.iter().map(|v| -v).collect();
    -median(&flipped)
}

/// One acceptance line.
#[derive(Debug, Clone)]
pub struct Verdict {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Verdict {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{tag}] {}: {}", self.name, self.detail)
    }
}

/// Collects failed checks into a verdict detail.
#[derive(Debug, Default)]
pub struct Checks {
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Checks {
    pub fn check(&mut self, ok: bool, what: impl Into<String>) -> bool {
        let what = what.into();
        if ok {
            self.notes.push(what);
        } else {
            self.failures.push(what);
        }
        ok
    }

    pub fn note(&mut self, what: impl Into<String>) {
        self.notes.push(what.into());
    }

    pub fn verdict(self, name: &str) -> Verdict {
        let passed = self.failures.is_empty();
        let detail = if passed {
            self.notes.join("; ")
        } else {
            let mut d = format!("failed: {}", self.failures.join("; "));
            if !self.notes.is_empty() {
                d.push_str(&format!(" | ok: {}", self.notes.join("; ")));
            }
            d
        };
        Verdict::new(name, passed, detail)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[f64::NAN, 0.9, 0.8]), 0.8);
        assert!(median(&[f64::NAN, f64::NAN, 0.8]).is_nan());
        assert_eq!(median(&[f64::NAN, 0.9, 0.8, 0.7]), 0.75);
        assert_eq!(median_high_is_bad(&[f64::NAN, 10.0, 20.0]), 20.0);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn failed_checks_fail_the_verdict() {
        let mut c = Checks::default();
        c.check(true, "a");
        c.check(false, "b");
        let v = c.verdict("x");
        assert!(!v.passed);
        assert_eq!(v.to_string(), "[FAIL] x: failed: b | ok: a");
    }
}
