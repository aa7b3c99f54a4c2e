//! The two stress surrogates: a plain feed-forward stress regressor and the
//! physics-based two-network model whose stress is the strain derivative of a
//! learned free energy and whose dissipation is rebuilt by recursion.

use serde::{Deserialize, Serialize};

use crate::datagen::{Mode, Normalization, Quantity, Row};
use crate::error::{Error, Result};
use crate::mlp::{Activation, Mlp, MlpParams, MlpSpec, OutputHead, Tape};

pub const HIDDEN_SIZES: [usize; 2] = [16, 8];

/// Input slots of the energy network that carry tangents.
const B_EPS_NEXT: usize = 0;
const B_EPS_P_NEXT: usize = 3;
const B_D_NEXT: usize = 6;
const ENERGY_DIRS: [usize; 2] = [B_EPS_NEXT, B_D_NEXT];
/// Initial bias of the damage output.
pub const DAMAGE_HEAD_BIAS: f64 = 0.5;

/// The five MSE terms of the physics-based loss (normalized units) and their
/// sum. The plain model only fills `sigma`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub sigma: f64,
    pub psi: f64,
    pub eps_p: f64,
    pub d: f64,
    pub dissipation: f64,
    pub total: f64,
}

impl LossTerms {
    fn scaled(self, factor: f64) -> Self {
        Self {
            sigma: self.sigma * factor,
            psi: self.psi * factor,
            eps_p: self.eps_p * factor,
            d: self.d * factor,
            dissipation: self.dissipation * factor,
            total: self.total * factor,
        }
    }

    fn add(&mut self, other: &LossTerms) {
        self.sigma += other.sigma;
        self.psi += other.psi;
        self.eps_p += other.eps_p;
        self.d += other.d;
        self.dissipation += other.dissipation;
        self.total += other.total;
    }

    /// Weighted average of per-batch terms.
    pub fn weighted_mean(items: &[(LossTerms, usize)]) -> LossTerms {
        let n: usize = items.iter().map(|(_, c)| c).sum();
        let mut acc = LossTerms::default();
        for (terms, count) in items {
            acc.add(&terms.scaled(*count as f64));
        }
        acc.scaled(1.0 / n.max(1) as f64)
    }

    fn check(&self) -> Result<()> {
        let named = [
            ("L_sigma", self.sigma),
            ("L_psi", self.psi),
            ("L_eps_p", self.eps_p),
            ("L_d", self.d),
            ("L_D", self.dissipation),
        ];
        for (name, value) in named {
            if !value.is_finite() {
                return Err(Error::PoisonedGradient { term: name.to_owned() });
            }
        }
        Ok(())
    }
}

fn check_batch(rows: &[Row]) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    Ok(())
}

fn require_finite(row: &Row, columns: &[(&str, f64)]) -> Result<()> {
    for (name, value) in columns {
        if !value.is_finite() {
            return Err(Error::invalid(format!(
                "missing or non-finite {name} in row {} of path {}",
                row.step, row.path_id
            )));
        }
    }
    Ok(())
}

/// `(eps_{n+1}, eps_n, sigma_n, E) -> sigma_{n+1}` with ReLU hidden layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaiveStressModel {
    pub net: Mlp,
    pub norm: Normalization,
    pub mode: Mode,
}

impl NaiveStressModel {
    pub fn spec() -> MlpSpec {
        MlpSpec::new(&[4, HIDDEN_SIZES[0], HIDDEN_SIZES[1], 1], Activation::Relu, &[OutputHead::Identity])
            .expect("static spec")
    }

    pub fn new(norm: Normalization, mode: Mode, seed: u64) -> Result<Self> {
        Ok(Self {
            net: Mlp::init(Self::spec(), seed)?,
            norm,
            mode,
        })
    }

    fn features(&self, eps_next: f64, eps: f64, sigma: f64, e: f64) -> [f64; 4] {
        let n = &self.norm;
        [
            n.apply(Quantity::Strain, eps_next),
            n.apply(Quantity::Strain, eps),
            n.apply(Quantity::Stress, sigma),
            n.apply(Quantity::Modulus, e),
        ]
    }

    /// Predicted `sigma_{n+1}` in GPa from physical inputs.
    pub fn predict(&self, eps_next: f64, eps: f64, sigma: f64, e: f64) -> Result<f64> {
        let out = self.net.forward(&self.features(eps_next, eps, sigma, e))?;
        Ok(self.norm.invert(Quantity::Stress, out[0]))
    }

    pub fn loss(&self, rows: &[Row]) -> Result<LossTerms> {
        self.loss_impl(rows, None)
    }

    pub fn loss_and_gradient(&self, rows: &[Row], grad: &mut [f64]) -> Result<LossTerms> {
        self.loss_impl(rows, Some(grad))
    }

    fn loss_impl(&self, rows: &[Row], grad: Option<&mut [f64]>) -> Result<LossTerms> {
        check_batch(rows)?;
        let inv_n = 1.0 / rows.len() as f64;
        let mut tape = Tape::default();
        let mut grads = grad.as_ref().map(|_| MlpParams::zeros(&self.net.spec));
        let mut x_bar = [0.0; 4];
        let mut sum = 0.0;
        for row in rows {
            require_finite(row, &[("sigma_next", row.sigma_next)])?;
            let x = self.features(row.eps_next, row.eps, row.sigma, row.e);
            self.net.forward_tangent(&mut tape, &x, &[]);
            let residual = tape.output()[0] - self.norm.apply(Quantity::Stress, row.sigma_next);
            sum += residual * residual;
            if let Some(g) = grads.as_mut() {
                self.net.backward_tangent(&mut tape, &[2.0 * residual * inv_n], &[], g, &mut x_bar);
            }
        }
        let sigma = sum * inv_n;
        let terms = LossTerms {
            sigma,
            total: sigma,
            ..Default::default()
        };
        terms.check()?;
        if let (Some(out), Some(g)) = (grad, grads) {
            write_grad(out, &[&g])?;
        }
        Ok(terms)
    }
}

fn write_grad(out: &mut [f64], grads: &[&MlpParams]) -> Result<()> {
    let mut flat = Vec::with_capacity(out.len());
    for g in grads {
        g.write_flat(&mut flat);
    }
    if flat.len() != out.len() {
        return Err(Error::invalid("gradient buffer has the wrong length"));
    }
    if let Some(pos) = flat.iter().position(|v| !v.is_finite()) {
        return Err(Error::PoisonedGradient {
            term: format!("parameter gradient entry {pos}"),
        });
    }
    out.copy_from_slice(&flat);
    Ok(())
}

/// Physical-unit inputs of one physics-based step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhiMlInputs {
    pub eps_next: f64,
    pub eps: f64,
    pub eps_p: f64,
    pub sigma: f64,
    pub d: f64,
    pub e: f64,
}

impl From<&Row> for PhiMlInputs {
    fn from(row: &Row) -> Self {
        Self {
            eps_next: row.eps_next,
            eps: row.eps,
            eps_p: row.eps_p,
            sigma: row.sigma,
            d: row.d,
            e: row.e,
        }
    }
}

/// Physical-unit outputs of one physics-based step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhiMlOutputs {
    pub eps_p_next: f64,
    pub d_next: f64,
    pub psi: f64,
    /// `d psi / d eps_{n+1}`.
    pub sigma: f64,
    /// `-d psi / d d_{n+1}`.
    pub f_d: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DissipationUpdate {
    /// Raw fracture accumulator (may go negative).
    pub dd: f64,
    /// Raw plastic accumulator (may go negative).
    pub dp: f64,
    /// `relu(dd) + relu(dp)`, the value entering the loss.
    pub total: f64,
}

/// End-of-step dissipation recursions:
/// `D_d += f_d (d_{n+1} - d_n)`, `D_p += sigma (eps^p_{n+1} - eps^p_n)`.
pub fn phiml_dissipation_update(
    dd_prev: f64,
    dp_prev: f64,
    out: &PhiMlOutputs,
    eps_p_prev: f64,
    d_prev: f64,
) -> DissipationUpdate {
    let dd = dd_prev + out.f_d * (out.d_next - d_prev);
    let dp = dp_prev + out.sigma * (out.eps_p_next - eps_p_prev);
    DissipationUpdate {
        dd,
        dp,
        total: dd.max(0.0) + dp.max(0.0),
    }
}

/// Two networks trained jointly:
/// `A: (eps_{n+1}, eps_n, eps^p_n, sigma_n, d_n, E) -> (eps^p_{n+1}, d_{n+1})`
/// and `B: (eps_{n+1}, eps_n, eps^p_n, eps^p_{n+1}, sigma_n, d_n, d_{n+1}, E) -> psi_{n+1}`.
///
/// In brittle mode the plastic strain is pinned to zero and its loss term is
/// dropped; the architecture is unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiMlModel {
    pub net_a: Mlp,
    pub net_b: Mlp,
    pub norm: Normalization,
    pub mode: Mode,
}

/// Everything the loss needs from one forward evaluation.
#[derive(Debug, Clone, Copy)]
struct StepEval {
    /// Normalized plastic strain prediction (net A output 0).
    eps_p_hat: f64,
    out: PhiMlOutputs,
    psi_hat: f64,
}

/// Reusable buffers for per-row evaluation.
#[derive(Default)]
struct Workspace {
    tape_a: Tape,
    tape_b: Tape,
    xb_bar: Vec<f64>,
    xa_bar: Vec<f64>,
}

impl PhiMlModel {
    pub fn spec_a() -> MlpSpec {
        MlpSpec::new(
            &[6, HIDDEN_SIZES[0], HIDDEN_SIZES[1], 2],
            Activation::Softplus,
            &[OutputHead::Identity, OutputHead::ReluD],
        )
        .expect("static spec")
    }

    pub fn spec_b() -> MlpSpec {
        MlpSpec::new(&[8, HIDDEN_SIZES[0], HIDDEN_SIZES[1], 1], Activation::Softplus, &[OutputHead::Identity])
            .expect("static spec")
    }

    pub fn new(norm: Normalization, mode: Mode, seed: u64) -> Result<Self> {
        let mut net_a = Mlp::init(Self::spec_a(), seed)?;
        // A clamped head that starts saturated for every input never receives
        // a gradient. Start it flat, in the middle of the band.
        let head = net_a.params.layers.last_mut().expect("has layers");
        let n_in = head.n_in;
        head.weights[n_in..].fill(0.0);
        head.biases[1] = DAMAGE_HEAD_BIAS;
        Ok(Self {
            net_a,
            net_b: Mlp::init(Self::spec_b(), seed.wrapping_add(0x9e37_79b9))?,
            norm,
            mode,
        })
    }

    /// Builds a model from arbitrary networks with the right input and
    /// output sizes (useful for hand-constructed energies).
    pub fn from_parts(net_a: Mlp, net_b: Mlp, norm: Normalization, mode: Mode) -> Result<Self> {
        let a = &net_a.spec;
        let b = &net_b.spec;
        if a.n_inputs() != 6 || a.n_outputs() != 2 || a.output_heads[1] != OutputHead::ReluD {
            return Err(Error::invalid("net A must map 6 inputs to (eps_p, relu_d damage)"));
        }
        if b.n_inputs() != 8 || b.n_outputs() != 1 {
            return Err(Error::invalid("net B must map 8 inputs to one energy"));
        }
        Ok(Self { net_a, net_b, norm, mode })
    }

    pub fn n_params(&self) -> usize {
        self.net_a.params.n_params() + self.net_b.params.n_params()
    }

    fn is_brittle(&self) -> bool {
        self.mode == Mode::Brittle
    }

    fn inputs_a(&self, inp: &PhiMlInputs) -> [f64; 6] {
        let n = &self.norm;
        [
            n.apply(Quantity::Strain, inp.eps_next),
            n.apply(Quantity::Strain, inp.eps),
            n.apply(Quantity::PlasticStrain, inp.eps_p),
            n.apply(Quantity::Stress, inp.sigma),
            n.apply(Quantity::Damage, inp.d),
            n.apply(Quantity::Modulus, inp.e),
        ]
    }

    fn inputs_b(&self, xa: &[f64; 6], eps_p_next_hat: f64, d_next: f64) -> [f64; 8] {
        [
            xa[0],
            xa[1],
            xa[2],
            eps_p_next_hat,
            xa[3],
            xa[4],
            self.norm.apply(Quantity::Damage, d_next),
            xa[5],
        ]
    }

    fn evaluate(&self, inp: &PhiMlInputs, ws: &mut Workspace) -> StepEval {
        let xa = self.inputs_a(inp);
        self.net_a.forward_tangent(&mut ws.tape_a, &xa, &[]);
        let a_out = ws.tape_a.output();
        let d_next = a_out[1];
        let (eps_p_hat, eps_p_next) = if self.is_brittle() {
            (self.norm.apply(Quantity::PlasticStrain, 0.0), 0.0)
        } else {
            (a_out[0], self.norm.invert(Quantity::PlasticStrain, a_out[0]))
        };
        self.evaluate_energy(&xa, eps_p_hat, eps_p_next, d_next, ws)
    }

    fn evaluate_energy(
        &self,
        xa: &[f64; 6],
        eps_p_hat: f64,
        eps_p_next: f64,
        d_next: f64,
        ws: &mut Workspace,
    ) -> StepEval {
        let xb = self.inputs_b(xa, eps_p_hat, d_next);
        self.net_b.forward_tangent(&mut ws.tape_b, &xb, &ENERGY_DIRS);
        let psi_hat = ws.tape_b.output()[0];
        let g_eps = ws.tape_b.output_tangent(0)[0];
        let g_d = ws.tape_b.output_tangent(1)[0];
        let n = &self.norm;
        StepEval {
            eps_p_hat,
            psi_hat,
            out: PhiMlOutputs {
                eps_p_next,
                d_next,
                psi: n.invert(Quantity::Energy, psi_hat),
                sigma: n.chain_factor(Quantity::Energy, Quantity::Strain) * g_eps,
                f_d: -n.chain_factor(Quantity::Energy, Quantity::Damage) * g_d,
            },
        }
    }

    /// One step in physical units.
    pub fn forward(&self, inp: &PhiMlInputs) -> Result<PhiMlOutputs> {
        let vals = [inp.eps_next, inp.eps, inp.eps_p, inp.sigma, inp.d, inp.e];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite model input"));
        }
        let mut ws = Workspace::default();
        Ok(self.evaluate(inp, &mut ws).out)
    }

    /// Energy network alone, at given internal variables `eps_p_next`,
    /// `d_next` (physical units). Returns `psi` in GPa.
    pub fn energy(&self, inp: &PhiMlInputs, eps_p_next: f64, d_next: f64) -> f64 {
        let xa = self.inputs_a(inp);
        let eps_p_hat = self.norm.apply(Quantity::PlasticStrain, eps_p_next);
        let mut ws = Workspace::default();
        self.evaluate_energy(&xa, eps_p_hat, eps_p_next, d_next, &mut ws).out.psi
    }

    /// Physical-unit outputs evaluated at given internal variables.
    pub fn outputs_at(&self, inp: &PhiMlInputs, eps_p_next: f64, d_next: f64) -> PhiMlOutputs {
        let xa = self.inputs_a(inp);
        let eps_p_hat = self.norm.apply(Quantity::PlasticStrain, eps_p_next);
        let mut ws = Workspace::default();
        self.evaluate_energy(&xa, eps_p_hat, eps_p_next, d_next, &mut ws).out
    }

    pub fn loss(&self, rows: &[Row]) -> Result<LossTerms> {
        self.loss_impl(rows, None, false)
    }

    /// Loss and its exact gradient, net A parameters first, then net B.
    pub fn loss_and_gradient(&self, rows: &[Row], grad: &mut [f64]) -> Result<LossTerms> {
        self.loss_impl(rows, Some(grad), false)
    }

    /// Deliberately wrong gradient that ignores how the stress and fracture
    /// driving force depend on the weights. Negative control for gradient
    /// checks only.
    pub fn loss_and_gradient_without_derivative_terms(&self, rows: &[Row], grad: &mut [f64]) -> Result<LossTerms> {
        self.loss_impl(rows, Some(grad), true)
    }

    fn loss_impl(&self, rows: &[Row], grad: Option<&mut [f64]>, drop_tangents: bool) -> Result<LossTerms> {
        check_batch(rows)?;
        let n = &self.norm;
        let inv_n = 1.0 / rows.len() as f64;
        let want_grad = grad.is_some();
        let mut ws = Workspace::default();
        let mut grads = want_grad.then(|| {
            (
                MlpParams::zeros(&self.net_a.spec),
                MlpParams::zeros(&self.net_b.spec),
            )
        });
        let mut sums = LossTerms::default();

        let c_sigma = n.chain_factor(Quantity::Energy, Quantity::Strain);
        let c_fd = n.chain_factor(Quantity::Energy, Quantity::Damage);
        let span_sigma = n.stress.span();
        let span_diss = n.dissipation.span();
        let span_p = n.plastic_strain.span();

        for row in rows {
            require_finite(
                row,
                &[
                    ("sigma_next", row.sigma_next),
                    ("psi_next", row.psi_next),
                    ("eps_p_next", row.eps_p_next),
                    ("d_next", row.d_next),
                    ("dp", row.dp),
                    ("dd", row.dd),
                    ("dp_next", row.dp_next),
                    ("dd_next", row.dd_next),
                ],
            )?;
            let inp = PhiMlInputs::from(row);
            let ev = self.evaluate(&inp, &mut ws);
            let out = &ev.out;
            let diss = phiml_dissipation_update(row.dd, row.dp, out, row.eps_p, row.d);

            let r_sigma = n.apply(Quantity::Stress, out.sigma) - n.apply(Quantity::Stress, row.sigma_next);
            let r_psi = ev.psi_hat - n.apply(Quantity::Energy, row.psi_next);
            let r_p = if self.is_brittle() {
                0.0
            } else {
                ev.eps_p_hat - n.apply(Quantity::PlasticStrain, row.eps_p_next)
            };
            let r_d = n.apply(Quantity::Damage, out.d_next) - n.apply(Quantity::Damage, row.d_next);
            let r_diss = n.apply(Quantity::Dissipation, diss.total)
                - n.apply(Quantity::Dissipation, row.dissipation_next());

            sums.sigma += r_sigma * r_sigma;
            sums.psi += r_psi * r_psi;
            sums.eps_p += r_p * r_p;
            sums.d += r_d * r_d;
            sums.dissipation += r_diss * r_diss;

            let Some((ga, gb)) = grads.as_mut() else {
                continue;
            };

            // adjoints in physical units unless marked _hat
            let diss_bar = 2.0 * r_diss * inv_n / span_diss;
            let dp_bar = if diss.dp > 0.0 { diss_bar } else { 0.0 };
            let dd_bar = if diss.dd > 0.0 { diss_bar } else { 0.0 };
            let sigma_bar = 2.0 * r_sigma * inv_n / span_sigma + dp_bar * (out.eps_p_next - row.eps_p);
            let eps_p_next_bar = dp_bar * out.sigma;
            let f_d_bar = dd_bar * (out.d_next - row.d);
            let mut d_next_bar = dd_bar * out.f_d + 2.0 * r_d * inv_n / n.damage.span();

            let psi_hat_bar = 2.0 * r_psi * inv_n;
            let g_eps_bar = sigma_bar * c_sigma;
            let g_d_bar = -f_d_bar * c_fd;
            let (g_eps_bar, g_d_bar) = if drop_tangents { (0.0, 0.0) } else { (g_eps_bar, g_d_bar) };

            ws.xb_bar.clear();
            ws.xb_bar.resize(8, 0.0);
            self.net_b.backward_tangent(
                &mut ws.tape_b,
                &[psi_hat_bar],
                &[&[g_eps_bar], &[g_d_bar]],
                gb,
                &mut ws.xb_bar,
            );

            d_next_bar += ws.xb_bar[B_D_NEXT] / n.damage.span();
            // brittle: plastic strain is pinned, so nothing flows into output 0
            let eps_p_hat_bar = if self.is_brittle() {
                0.0
            } else {
                ws.xb_bar[B_EPS_P_NEXT] + 2.0 * r_p * inv_n + eps_p_next_bar * span_p
            };

            // the damage head's clamp derivative is applied inside the adjoint
            ws.xa_bar.clear();
            ws.xa_bar.resize(6, 0.0);
            self.net_a
                .backward_tangent(&mut ws.tape_a, &[eps_p_hat_bar, d_next_bar], &[], ga, &mut ws.xa_bar);
        }

        let mut terms = sums.scaled(inv_n);
        terms.total = terms.sigma + terms.psi + terms.eps_p + terms.d + terms.dissipation;
        terms.check()?;
        if let (Some(out), Some((ga, gb))) = (grad, grads) {
            write_grad(out, &[&ga, &gb])?;
        }
        Ok(terms)
    }
}

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

/// A trained surrogate of either kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainedModel {
    Naive(NaiveStressModel),
    Phiml(PhiMlModel),
}

impl TrainedModel {
    pub fn mode(&self) -> Mode {
        match self {
            TrainedModel::Naive(m) => m.mode,
            TrainedModel::Phiml(m) => m.mode,
        }
    }

    pub fn norm(&self) -> &Normalization {
        match self {
            TrainedModel::Naive(m) => &m.norm,
            TrainedModel::Phiml(m) => &m.norm,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            TrainedModel::Naive(_) => "naive",
            TrainedModel::Phiml(_) => "phiml",
        }
    }
}

/// On-disk model: networks, normalization and provenance of the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub seed: u64,
    pub config_hash: String,
    /// Hash of the dataset the model was trained on.
    pub dataset_hash: String,
    pub model: TrainedModel,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let version = value.get("schema_version").and_then(|v| v.as_u64());
        if version != Some(CHECKPOINT_SCHEMA_VERSION as u64) {
            return Err(Error::SchemaMismatch(format!(
                "checkpoint schema {version:?} (expected {CHECKPOINT_SCHEMA_VERSION})"
            )));
        }
        let ckpt: Checkpoint = serde_json::from_value(value)?;
        let nets_ok = match &ckpt.model {
            TrainedModel::Naive(m) => m.net.params.matches(&m.net.spec),
            TrainedModel::Phiml(m) => {
                m.net_a.params.matches(&m.net_a.spec) && m.net_b.params.matches(&m.net_b.spec)
            }
        };
        if !nets_ok {
            return Err(Error::SchemaMismatch("network parameters do not match their specs".into()));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn row() -> Row {
        Row {
            path_id: 0,
            step: 0,
            eps_next: 0.02,
            eps: 0.01,
            eps_p: 0.001,
            eps_p_next: 0.0,
            sigma: 0.3,
            sigma_next: 0.0,
            d: 0.1,
            d_next: 0.0,
            psi_next: 0.0,
            dp: 0.3,
            dp_next: 0.0,
            dd: 0.2,
            dd_next: 0.0,
            e: 30.0,
            y0: 0.6,
            psi_c: 0.1,
        }
    }

    /// Net A emits constants `(eps_p_hat, d)`, net B the constant `psi_hat`;
    /// stress and driving force are then zero.
    fn constant_model(eps_p_hat: f64, d: f64, psi_hat: f64, mode: Mode) -> PhiMlModel {
        let mut a = Mlp::new(PhiMlModel::spec_a(), MlpParams::zeros(&PhiMlModel::spec_a())).unwrap();
        let last = a.params.layers.last_mut().unwrap();
        last.biases = vec![eps_p_hat, d];
        let mut b = Mlp::new(PhiMlModel::spec_b(), MlpParams::zeros(&PhiMlModel::spec_b())).unwrap();
        b.params.layers.last_mut().unwrap().biases[0] = psi_hat;
        PhiMlModel::from_parts(a, b, Normalization::identity(), mode).unwrap()
    }

    #[test]
    fn zero_weight_naive_net_outputs_its_bias() {
        let mut m = NaiveStressModel::new(Normalization::identity(), Mode::Brittle, 0).unwrap();
        m.net.params.fill(0.0);
        m.net.params.layers.last_mut().unwrap().biases[0] = 0.42;
        assert_eq!(m.predict(0.01, 0.0, 0.1, 30.0).unwrap(), 0.42);
        assert_eq!(m.predict(0.5, 0.2, -3.0, 45.0).unwrap(), 0.42);
    }

    #[test]
    fn naive_prediction_is_deterministic() {
        let m = NaiveStressModel::new(Normalization::identity(), Mode::Brittle, 3).unwrap();
        let a = m.predict(0.01, 0.005, 0.1, 30.0).unwrap();
        assert_eq!(a, m.predict(0.01, 0.005, 0.1, 30.0).unwrap());
    }

    #[test]
    fn saturated_damage_head_gives_exactly_one() {
        let m = constant_model(0.0, 1.7, 0.0, Mode::Ductile);
        assert_eq!(m.forward(&PhiMlInputs::from(&row())).unwrap().d_next, 1.0);
        let m = constant_model(0.0, -0.2, 0.0, Mode::Ductile);
        assert_eq!(m.forward(&PhiMlInputs::from(&row())).unwrap().d_next, 0.0);
    }

    #[test]
    fn dissipation_update_examples() {
        let out = PhiMlOutputs {
            eps_p_next: 0.015,
            d_next: 0.3,
            psi: 0.0,
            sigma: 0.4,
            f_d: 0.0,
        };
        let u = phiml_dissipation_update(0.0, 0.0, &out, 0.01, 0.3);
        assert_relative_eq!(u.dp, 0.002, max_relative = 1e-12);
        assert_relative_eq!(u.total, 0.002, max_relative = 1e-12);

        let still = PhiMlOutputs { eps_p_next: 0.01, ..out };
        let u = phiml_dissipation_update(0.05, 0.07, &still, 0.01, 0.3);
        assert_eq!((u.dd, u.dp), (0.05, 0.07));
        assert_eq!(u.total, 0.05 + 0.07);

        let negative = PhiMlOutputs { f_d: -1.0, d_next: 0.4, ..still };
        let u = phiml_dissipation_update(0.05, 0.07, &negative, 0.01, 0.3);
        assert_relative_eq!(u.dd, -0.05, max_relative = 1e-12);
        assert_relative_eq!(u.total, 0.07, max_relative = 1e-12);
    }

    #[test]
    fn unit_residuals_give_a_loss_of_five() {
        let m = constant_model(0.25, 0.5, 0.125, Mode::Ductile);
        let r = Row {
            sigma_next: -1.0,
            psi_next: 0.125 - 1.0,
            eps_p_next: 0.25 - 1.0,
            d_next: 0.5 - 1.0,
            dp_next: -0.25,
            dd_next: -0.25,
            ..row()
        };
        let terms = m.loss(&[r]).unwrap();
        for t in [terms.sigma, terms.psi, terms.eps_p, terms.d, terms.dissipation] {
            assert_relative_eq!(t, 1.0, max_relative = 1e-12);
        }
        assert_relative_eq!(terms.total, 5.0, max_relative = 1e-12);
    }

    #[test]
    fn perfect_predictions_give_zero_loss_and_gradient() {
        let m = constant_model(0.25, 0.5, 0.125, Mode::Ductile);
        let r = Row {
            sigma_next: 0.0,
            psi_next: 0.125,
            eps_p_next: 0.25,
            d_next: 0.5,
            dp_next: 0.3,
            dd_next: 0.2,
            ..row()
        };
        let mut grad = vec![1.0; m.n_params()];
        let terms = m.loss_and_gradient(&[r, r], &mut grad).unwrap();
        assert_eq!(terms.total, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn brittle_mode_ignores_plastic_targets() {
        let m = constant_model(0.25, 0.5, 0.125, Mode::Brittle);
        let r = Row { eps_p_next: 123.0, ..row() };
        let terms = m.loss(&[r]).unwrap();
        assert_eq!(terms.eps_p, 0.0);
        assert_eq!(m.forward(&PhiMlInputs::from(&r)).unwrap().eps_p_next, 0.0);
    }

    #[test]
    fn total_is_the_sum_of_terms() {
        let rows = crate::gradcheck::check_rows().unwrap();
        let norm = crate::datagen::fit_normalization(&rows);
        let m = PhiMlModel::new(norm, Mode::Ductile, 9).unwrap();
        let t = m.loss(&rows).unwrap();
        let sum = t.sigma + t.psi + t.eps_p + t.d + t.dissipation;
        assert!((t.total - sum).abs() <= 1e-12 * sum.abs());
    }

    #[test]
    fn bad_batches_are_rejected() {
        let m = constant_model(0.0, 0.5, 0.0, Mode::Ductile);
        assert!(matches!(m.loss(&[]), Err(Error::InvalidArgument(_))));
        let r = Row { psi_next: f64::NAN, ..row() };
        assert!(matches!(m.loss(&[r]), Err(Error::InvalidArgument(_))));
        assert!(m.forward(&PhiMlInputs { eps: f64::INFINITY, ..PhiMlInputs::from(&row()) }).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_schema_guard() {
        let m = PhiMlModel::new(Normalization::identity(), Mode::Ductile, 1).unwrap();
        let ckpt = Checkpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            seed: 1,
            config_hash: "c".into(),
            dataset_hash: "d".into(),
            model: TrainedModel::Phiml(m),
        };
        let text = ckpt.to_json().unwrap();
        assert_eq!(Checkpoint::from_json(&text).unwrap(), ckpt);

        let bumped = text.replacen("\"schema_version\": 1", "\"schema_version\": 99", 1);
        assert!(matches!(Checkpoint::from_json(&bumped), Err(Error::SchemaMismatch(_))));
    }
}
