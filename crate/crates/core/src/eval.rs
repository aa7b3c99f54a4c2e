//! Rollouts along the test paths and the metric grid built from them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, LoadPath, Quantity, Row, Split};
use crate::error::{Error, Result};
use crate::matpoint::{self, MaterialState};
use crate::models::{phiml_dissipation_update, NaiveStressModel, PhiMlInputs, PhiMlModel, TrainedModel};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
/// Default MAPE floor, relative to the quantity's normalization span.
pub const MAPE_FLOOR: f64 = 1e-6;
/// Half-width (in steps) of the window around the fracture onset.
pub const ONSET_HALF_WINDOW: usize = 5;

/// Coefficient of determination. `Ok(None)` when the reference series is
/// constant, where the metric is undefined.
pub fn r_squared(y: &[f64], yhat: &[f64]) -> Result<Option<f64>> {
    check_series(y, yhat)?;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let ss_res: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b).powi(2)).sum();
    if ss_tot == 0.0 {
        return Ok(None);
    }
    Ok(Some(1.0 - ss_res / ss_tot))
}

/// Mean absolute percentage error over entries with `|y| >= floor`.
/// `Ok(None)` when every entry is below the floor.
pub fn mape(y: &[f64], yhat: &[f64], floor: f64) -> Result<Option<f64>> {
    check_series(y, yhat)?;
    let (sum, count) = y
        .iter()
        .zip(yhat)
        .filter(|(a, _)| a.abs() >= floor)
        .fold((0.0, 0usize), |(s, c), (a, b)| (s + ((a - b) / a).abs(), c + 1));
    Ok((count > 0).then(|| 100.0 * sum / count as f64))
}

fn check_series(y: &[f64], yhat: &[f64]) -> Result<()> {
    if y.is_empty() || y.len() != yhat.len() {
        return Err(Error::invalid(format!(
            "metric series must be non-empty and of equal length ({} vs {})",
            y.len(),
            yhat.len()
        )));
    }
    if y.iter().chain(yhat).any(|v| !v.is_finite()) {
        return Err(Error::invalid("metric series contain non-finite values"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    /// Ground-truth `n` state at every step.
    TeacherForced,
    /// The model's own previous predictions are fed forward.
    Autoregressive,
}

impl RolloutMode {
    pub const ALL: [RolloutMode; 2] = [RolloutMode::TeacherForced, RolloutMode::Autoregressive];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Lower,
    Interp,
    Upper,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::Lower, Scenario::Interp, Scenario::Upper];

    pub fn split(self) -> Split {
        match self {
            Scenario::Lower => Split::TestLower,
            Scenario::Interp => Split::TestInterp,
            Scenario::Upper => Split::TestUpper,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Lower => "lower",
            Scenario::Interp => "interp",
            Scenario::Upper => "upper",
        }
    }
}

/// Quantities a surrogate may predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Sigma,
    Psi,
    D,
    Dissipation,
    EpsP,
}

impl Target {
    pub const ALL: [Target; 5] = [Target::Sigma, Target::Psi, Target::D, Target::Dissipation, Target::EpsP];

    fn quantity(self) -> Quantity {
        match self {
            Target::Sigma => Quantity::Stress,
            Target::Psi => Quantity::Energy,
            Target::D => Quantity::Damage,
            Target::Dissipation => Quantity::Dissipation,
            Target::EpsP => Quantity::PlasticStrain,
        }
    }

    fn truth(self, row: &Row) -> f64 {
        match self {
            Target::Sigma => row.sigma_next,
            Target::Psi => row.psi_next,
            Target::D => row.d_next,
            Target::Dissipation => row.dissipation_next(),
            Target::EpsP => row.eps_p_next,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Target::Sigma => "sigma",
            Target::Psi => "psi",
            Target::D => "d",
            Target::Dissipation => "dissipation",
            Target::EpsP => "eps_p",
        }
    }
}

/// Predicted `n+1` values of one increment; `None` for quantities the model
/// does not emit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sigma: f64,
    pub psi: Option<f64>,
    pub d: Option<f64>,
    pub dissipation: Option<f64>,
    pub eps_p: Option<f64>,
}

impl Prediction {
    pub fn get(&self, target: Target) -> Option<f64> {
        match target {
            Target::Sigma => Some(self.sigma),
            Target::Psi => self.psi,
            Target::D => self.d,
            Target::Dissipation => self.dissipation,
            Target::EpsP => self.eps_p,
        }
    }
}

/// Something that can be rolled out along a load path.
pub trait Surrogate {
    fn targets(&self) -> &'static [Target];

    /// One prediction per increment of `truth` (the path's rows in step
    /// order). Autoregressive rollouts start from the ground-truth state of
    /// the first row.
    fn rollout(&self, path: &LoadPath, truth: &[Row], mode: RolloutMode) -> Result<Vec<Prediction>>;
}

fn check_rows(path: &LoadPath, truth: &[Row]) -> Result<()> {
    if truth.is_empty() {
        return Err(Error::invalid("rollout needs at least one ground-truth row"));
    }
    for (k, row) in truth.iter().enumerate() {
        if row.path_id != path.path_id || row.step != k {
            return Err(Error::invalid(format!(
                "ground-truth rows of path {} are not contiguous from step 0",
                path.path_id
            )));
        }
    }
    Ok(())
}

impl Surrogate for NaiveStressModel {
    fn targets(&self) -> &'static [Target] {
        &[Target::Sigma]
    }

    fn rollout(&self, path: &LoadPath, truth: &[Row], mode: RolloutMode) -> Result<Vec<Prediction>> {
        check_rows(path, truth)?;
        let mut sigma = truth[0].sigma;
        truth
            .iter()
            .map(|row| {
                let sigma_in = match mode {
                    RolloutMode::TeacherForced => row.sigma,
                    RolloutMode::Autoregressive => sigma,
                };
                sigma = self.predict(row.eps_next, row.eps, sigma_in, row.e)?;
                Ok(Prediction {
                    sigma,
                    ..Default::default()
                })
            })
            .collect()
    }
}

impl Surrogate for PhiMlModel {
    fn targets(&self) -> &'static [Target] {
        &Target::ALL
    }

    fn rollout(&self, path: &LoadPath, truth: &[Row], mode: RolloutMode) -> Result<Vec<Prediction>> {
        check_rows(path, truth)?;
        let first = &truth[0];
        // (eps_p, sigma, d, raw D_p, raw D_d) carried between steps
        let mut carried = (first.eps_p, first.sigma, first.d, first.dp, first.dd);
        let mut out = Vec::with_capacity(truth.len());
        for row in truth {
            let (eps_p, sigma, d, dp, dd) = match mode {
                RolloutMode::TeacherForced => (row.eps_p, row.sigma, row.d, row.dp, row.dd),
                RolloutMode::Autoregressive => carried,
            };
            let step = self.forward(&PhiMlInputs {
                eps_next: row.eps_next,
                eps: row.eps,
                eps_p,
                sigma,
                d,
                e: row.e,
            })?;
            let diss = phiml_dissipation_update(dd, dp, &step, eps_p, d);
            carried = (step.eps_p_next, step.sigma, step.d_next, diss.dp, diss.dd);
            out.push(Prediction {
                sigma: step.sigma,
                psi: Some(step.psi),
                d: Some(step.d_next),
                dissipation: Some(diss.total),
                eps_p: Some(step.eps_p_next),
            });
        }
        Ok(out)
    }
}

impl Surrogate for TrainedModel {
    fn targets(&self) -> &'static [Target] {
        match self {
            TrainedModel::Naive(m) => m.targets(),
            TrainedModel::Phiml(m) => m.targets(),
        }
    }

    fn rollout(&self, path: &LoadPath, truth: &[Row], mode: RolloutMode) -> Result<Vec<Prediction>> {
        match self {
            TrainedModel::Naive(m) => m.rollout(path, truth, mode),
            TrainedModel::Phiml(m) => m.rollout(path, truth, mode),
        }
    }
}

/// The material-point integrator itself, wrapped as a surrogate.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleModel;

impl Surrogate for OracleModel {
    fn targets(&self) -> &'static [Target] {
        &Target::ALL
    }

    fn rollout(&self, path: &LoadPath, truth: &[Row], mode: RolloutMode) -> Result<Vec<Prediction>> {
        check_rows(path, truth)?;
        let dt = path.dt();
        let mut state = truth[0].reconstruct_state(&path.params, dt)?;
        let mut out = Vec::with_capacity(truth.len());
        for row in truth {
            let current: MaterialState = match mode {
                RolloutMode::TeacherForced => row.reconstruct_state(&path.params, dt)?,
                RolloutMode::Autoregressive => state,
            };
            state = matpoint::step(&current, row.eps_next, dt, &path.params)?;
            out.push(Prediction {
                sigma: state.sigma,
                psi: Some(state.psi_e_stored),
                d: Some(state.d),
                dissipation: Some(state.dissipation()),
                eps_p: Some(state.eps_p),
            });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    Full,
    /// `ONSET_HALF_WINDOW` steps either side of the first damaged step.
    Onset,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub scenario: Scenario,
    pub rollout: RolloutMode,
    pub target: Target,
    pub window: Window,
    /// `None` when undefined (constant reference series).
    pub r2: Option<f64>,
    /// Percent; `None` when every reference value is below the floor.
    pub mape: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub model: String,
    pub mode: crate::datagen::Mode,
    pub variant: crate::datagen::Variant,
    pub seed: u64,
    pub config_hash: String,
    pub dataset_hash: String,
    /// First step whose ground-truth `d_{n+1}` is positive, per scenario.
    pub onset_step: BTreeMap<Scenario, Option<usize>>,
    pub entries: Vec<MetricEntry>,
}

impl EvalReport {
    pub fn get(&self, scenario: Scenario, rollout: RolloutMode, target: Target, window: Window) -> Option<&MetricEntry> {
        self.entries
            .iter()
            .find(|e| e.scenario == scenario && e.rollout == rollout && e.target == target && e.window == window)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Ground truth and predictions of one scenario in every requested mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioPredictions {
    pub scenario: Scenario,
    pub truth: Vec<Row>,
    pub predictions: BTreeMap<RolloutMode, Vec<Prediction>>,
}

impl ScenarioPredictions {
    /// `predictions_<scenario>.csv`: one line per (mode, step) with true and
    /// predicted values; empty cells for quantities the model does not emit.
    pub fn csv_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["rollout".to_owned(), "step".to_owned(), "eps_next".to_owned()];
        for t in Target::ALL {
            header.push(format!("true_{}", t.name()));
            header.push(format!("pred_{}", t.name()));
        }
        w.write_record(&header)?;
        for (mode, preds) in &self.predictions {
            let mode_name = match mode {
                RolloutMode::TeacherForced => "teacher_forced",
                RolloutMode::Autoregressive => "autoregressive",
            };
            for (row, pred) in self.truth.iter().zip(preds) {
                let mut rec = vec![mode_name.to_owned(), row.step.to_string(), format!("{:.16e}", row.eps_next)];
                for t in Target::ALL {
                    rec.push(format!("{:.16e}", t.truth(row)));
                    rec.push(pred.get(t).map(|v| format!("{v:.16e}")).unwrap_or_default());
                }
                w.write_record(&rec)?;
            }
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }
}

/// Provenance copied into the report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalContext {
    pub model: String,
    pub seed: u64,
    pub config_hash: String,
}

/// Rolls `model` out on the three test scenarios in each of `modes` and
/// computes the metric grid.
pub fn evaluate<S: Surrogate + ?Sized>(
    model: &S,
    dataset: &Dataset,
    modes: &[RolloutMode],
    ctx: &EvalContext,
) -> Result<(EvalReport, Vec<ScenarioPredictions>)> {
    if modes.is_empty() {
        return Err(Error::invalid("at least one rollout mode is required"));
    }
    let mut entries = Vec::new();
    let mut onset_step = BTreeMap::new();
    let mut all_predictions = Vec::new();
    for scenario in Scenario::ALL {
        let path_id = dataset
            .test_path(scenario.split())
            .ok_or_else(|| Error::invalid(format!("dataset has no {} test path", scenario.name())))?;
        let path = dataset.path(path_id).expect("split references a stored path");
        let truth = dataset.path_rows(path_id);
        let onset = truth.iter().position(|r| r.d_next > 0.0);
        onset_step.insert(scenario, onset);
        let window = onset.map(|k| {
            let lo = k.saturating_sub(ONSET_HALF_WINDOW);
            let hi = (k + ONSET_HALF_WINDOW + 1).min(truth.len());
            lo..hi
        });

        let mut predictions = BTreeMap::new();
        for &mode in modes {
            let preds = model.rollout(path, &truth, mode)?;
            if preds.len() != truth.len() {
                return Err(Error::invalid("rollout length differs from the ground truth"));
            }
            for &target in model.targets() {
                let floor = MAPE_FLOOR * dataset.norm.scale(target.quantity()).span();
                let y: Vec<f64> = truth.iter().map(|r| target.truth(r)).collect();
                let yhat: Vec<f64> = preds.iter().map(|p| p.get(target).unwrap_or(f64::NAN)).collect();
                if yhat.iter().any(|v| !v.is_finite()) {
                    return Err(Error::PoisonedGradient {
                        term: format!("{} rollout of {}", scenario.name(), target.name()),
                    });
                }
                let mut push = |window_kind: Window, range: std::ops::Range<usize>| -> Result<()> {
                    entries.push(MetricEntry {
                        scenario,
                        rollout: mode,
                        target,
                        window: window_kind,
                        r2: r_squared(&y[range.clone()], &yhat[range.clone()])?,
                        mape: mape(&y[range.clone()], &yhat[range], floor)?,
                    });
                    Ok(())
                };
                push(Window::Full, 0..y.len())?;
                if let Some(range) = window.clone() {
                    push(Window::Onset, range)?;
                }
            }
            predictions.insert(mode, preds);
        }
        all_predictions.push(ScenarioPredictions {
            scenario,
            truth,
            predictions,
        });
    }
    let report = EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        model: ctx.model.clone(),
        mode: dataset.mode,
        variant: dataset.variant,
        seed: ctx.seed,
        config_hash: ctx.config_hash.clone(),
        dataset_hash: dataset.config_hash(),
        onset_step,
        entries,
    };
    Ok((report, all_predictions))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn r_squared_examples() {
        let y = [1.0, 2.0, 3.0];
        assert_eq!(r_squared(&y, &y).unwrap(), Some(1.0));
        assert_eq!(r_squared(&y, &[2.0, 2.0, 2.0]).unwrap(), Some(0.0));
        assert_relative_eq!(r_squared(&y, &[1.0, 2.0, 2.0]).unwrap().unwrap(), 0.5);
        assert_eq!(r_squared(&[4.0, 4.0], &[4.0, 5.0]).unwrap(), None);
        assert!(r_squared(&[1.0], &[1.0, 2.0]).is_err());
        assert!(r_squared(&[], &[]).is_err());
    }

    #[test]
    fn mape_examples() {
        assert_eq!(mape(&[2.0, 4.0], &[2.0, 4.0], 1e-6).unwrap(), Some(0.0));
        assert_relative_eq!(mape(&[2.0, 4.0], &[1.0, 5.0], 1e-6).unwrap().unwrap(), 37.5);
        // the tiny reference value is excluded
        assert_relative_eq!(mape(&[1e-9, 4.0], &[1.0, 5.0], 1e-6).unwrap().unwrap(), 25.0);
        assert_eq!(mape(&[1e-9, 0.0], &[1.0, 5.0], 1e-6).unwrap(), None);
    }
}
