//! Central finite-difference checks of the analytic derivatives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{fit_normalization, generate_trajectory, LoadPath, Mode, Row};
use crate::error::Result;
use crate::matpoint::MaterialParams;
use crate::mlp::{Activation, Mlp, MlpSpec, OutputHead};
use crate::models::{NaiveStressModel, PhiMlModel};
use crate::training::Trainable;

pub const INPUT_GRAD_TOL: f64 = 1e-6;
pub const LOSS_GRAD_TOL: f64 = 1e-4;
const INPUT_STEP: f64 = 1e-6;
const PARAM_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: impl Into<String>, max_rel_error: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            max_rel_error,
            tolerance,
            passed: max_rel_error <= tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// `max |a - b| / max(max |b|, tiny)`.
pub fn relative_error(analytic: &[f64], reference: &[f64]) -> f64 {
    let scale = reference.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1e-300);
    analytic
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
        / scale
}

/// Central finite differences of `f` around `x`.
pub fn fd_gradient(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Reverse-mode input gradients of random softplus nets against finite
/// differences on normalized-scale inputs.
pub fn check_input_gradients(seed: u64, n_nets: usize) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for k in 0..n_nets {
        let spec = MlpSpec::new(&[8, 16, 8, 2], Activation::Softplus, &[OutputHead::Identity, OutputHead::Identity])?;
        let mut net = Mlp::init(spec, seed.wrapping_add(k as u64))?;
        for layer in &mut net.params.layers {
            for b in &mut layer.biases {
                *b = rng.gen_range(-0.5..0.5);
            }
        }
        let x: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..1.0)).collect();
        for out in 0..2 {
            let analytic = net.input_gradient(&x, out)?;
            let fd = fd_gradient(&x, INPUT_STEP, |p| net.forward(p).expect("shape checked")[out]);
            worst = worst.max(relative_error(&analytic, &fd));
        }
    }
    Ok(CheckResult::new("input gradient (random nets)", worst, INPUT_GRAD_TOL))
}

/// A short ductile path with plasticity and damage, used as check data.
pub fn check_rows() -> Result<Vec<Row>> {
    let path = LoadPath {
        path_id: 0,
        params: MaterialParams::ductile(30.0, 0.6, 0.08),
        eps_max: 0.05,
        n_steps: 40,
        mode: Mode::Ductile,
    };
    Ok(generate_trajectory(&path)?.rows())
}

/// Picks `n` rows spread over the path, so elastic, plastic and damaged
/// increments are all represented.
fn spread(rows: &[Row], n: usize) -> Vec<Row> {
    (0..n).map(|k| rows[(2 * k + 1) * rows.len() / (2 * n)]).collect()
}

fn loss_gradient_error<M: Trainable + Clone>(
    model: &M,
    rows: &[Row],
    gradient: impl Fn(&M, &[Row], &mut [f64]) -> Result<()>,
) -> Result<f64> {
    let mut analytic = vec![0.0; model.n_params()];
    gradient(model, rows, &mut analytic)?;
    let theta = model.params_flat();
    let mut probe = model.clone();
    let fd = fd_gradient(&theta, PARAM_STEP, |p| {
        probe.set_params_flat(p);
        probe.loss(rows).map(|t| t.total).unwrap_or(f64::NAN)
    });
    Ok(relative_error(&analytic, &fd))
}

/// Total physics-based loss on a 5-row batch: exact parameter gradient
/// against finite differences over every parameter, in both modes.
pub fn check_phiml_loss_gradient(seed: u64) -> Result<Vec<CheckResult>> {
    let rows = check_rows()?;
    let norm = fit_normalization(&rows);
    let batch = spread(&rows, 5);
    let mut out = Vec::new();
    for mode in [Mode::Ductile, Mode::Brittle] {
        let model = PhiMlModel::new(norm, mode, seed)?;
        let err = loss_gradient_error(&model, &batch, |m, r, g| m.loss_and_gradient(r, g).map(|_| ()))?;
        let name = format!("physics-based total loss gradient ({mode:?})").to_lowercase();
        out.push(CheckResult::new(name, err, LOSS_GRAD_TOL));
    }
    Ok(out)
}

pub fn check_naive_loss_gradient(seed: u64) -> Result<CheckResult> {
    let rows = check_rows()?;
    let norm = fit_normalization(&rows);
    let batch = spread(&rows, 5);
    let model = NaiveStressModel::new(norm, Mode::Ductile, seed)?;
    let err = loss_gradient_error(&model, &batch, |m, r, g| m.loss_and_gradient(r, g).map(|_| ()))?;
    Ok(CheckResult::new("naive stress loss gradient", err, LOSS_GRAD_TOL))
}

/// The same finite-difference comparison applied to a gradient that drops
/// the derivative-of-derivative terms. It must fail.
pub fn check_mutant(seed: u64) -> Result<CheckResult> {
    let rows = check_rows()?;
    let norm = fit_normalization(&rows);
    let batch = spread(&rows, 5);
    let model = PhiMlModel::new(norm, Mode::Ductile, seed)?;
    let err = loss_gradient_error(&model, &batch, |m, r, g| {
        m.loss_and_gradient_without_derivative_terms(r, g).map(|_| ())
    })?;
    Ok(CheckResult::new("mutant gradient (expected to fail)", err, LOSS_GRAD_TOL))
}

/// Full suite. The mutant entry is inverted: it passes when the mutant is
/// detected.
pub fn run_suite(seed: u64) -> Result<GradcheckReport> {
    run_suite_with(seed, false)
}

/// With `inject_mutant`, the physics-based loss is checked with the mutant
/// gradient in place of the exact one, so the suite must fail.
pub fn run_suite_with(seed: u64, inject_mutant: bool) -> Result<GradcheckReport> {
    let mut checks = vec![check_input_gradients(seed, 5)?];
    if inject_mutant {
        let mut injected = check_mutant(seed)?;
        injected.name = "physics-based total loss gradient (injected mutant)".into();
        checks.push(injected);
    } else {
        checks.extend(check_phiml_loss_gradient(seed)?);
    }
    checks.push(check_naive_loss_gradient(seed)?);
    let mutant = check_mutant(seed)?;
    checks.push(CheckResult {
        name: "mutant detected".into(),
        passed: !mutant.passed,
        ..mutant
    });
    Ok(GradcheckReport { seed, checks })
}
