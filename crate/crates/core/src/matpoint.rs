//! Homogeneous 1-D material-point integrator for coupled elastoplasticity and
//! phase-field fracture.
//!
//! The tensor model collapses to a single uniaxial channel: the effective
//! stress is `E (eps - eps_p)`, the equivalent plastic strain grows with
//! `|d eps_p|`, and yielding is governed by `|sigma_eff| <= y0 + h alpha`.
//! The degradation factor `(1 - d)^2` multiplies both the plastic driving
//! force and its resistance, so it drops out of the yield check.
//!
//! Each increment is staggered: radial return at frozen damage, then the
//! history field, then the phase field, then stress and dissipation.
//! Every sub-step is closed form.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// Relative-residual denominator floor for [`energy_balance_residual`].
const WORK_FLOOR: f64 = 1e-12;

/// Physical constants of one material realization. Stresses and energy
/// densities in GPa, viscosities in GPa·s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaterialParams {
    /// Young's modulus.
    pub e: f64,
    /// Initial yield stress; `f64::INFINITY` switches plasticity off (brittle).
    #[serde(with = "crate::serde_util::inf_as_null")]
    pub y0: f64,
    /// Critical fracture energy density.
    pub psi_c: f64,
    /// Post-critical softening shape parameter.
    pub zeta: f64,
    /// Isotropic hardening modulus.
    pub h: f64,
    /// Plastic viscosity.
    pub eta_p: f64,
    /// Crack viscosity.
    pub eta_d: f64,
    /// Divide the crack driving force by `psi_c`, making the history field
    /// dimensionless. Off by default: the history field is then in GPa.
    #[serde(default)]
    pub history_normalized: bool,
}

impl MaterialParams {
    /// Rate-independent brittle material (no plasticity), `zeta = 1`.
    pub fn brittle(e: f64, psi_c: f64) -> Self {
        Self {
            e,
            y0: f64::INFINITY,
            psi_c,
            zeta: 1.0,
            h: 0.0,
            eta_p: 0.0,
            eta_d: 0.0,
            history_normalized: false,
        }
    }

    /// Rate-independent ideal-plastic material, `zeta = 1`.
    pub fn ductile(e: f64, y0: f64, psi_c: f64) -> Self {
        Self {
            y0,
            ..Self::brittle(e, psi_c)
        }
    }

    pub fn is_brittle(&self) -> bool {
        self.y0.is_infinite()
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.e > 0.0 && self.e.is_finite(), "E must be positive and finite"),
            (self.y0 > 0.0 && !self.y0.is_nan(), "y0 must be positive (or +inf)"),
            (self.psi_c > 0.0 && self.psi_c.is_finite(), "psi_c must be positive and finite"),
            (self.zeta > 0.0 && self.zeta.is_finite(), "zeta must be positive and finite"),
            (self.h >= 0.0 && self.h.is_finite(), "h must be nonnegative"),
            (self.eta_p >= 0.0 && self.eta_p.is_finite(), "eta_p must be nonnegative"),
            (self.eta_d >= 0.0 && self.eta_d.is_finite(), "eta_d must be nonnegative"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::invalid(msg));
            }
        }
        Ok(())
    }

    /// Plastic work function `y0 alpha + h/2 alpha^2`.
    pub fn plastic_work(&self, alpha: f64) -> f64 {
        if alpha == 0.0 {
            // keeps the brittle sentinel from producing inf * 0
            return 0.0;
        }
        self.y0 * alpha + 0.5 * self.h * alpha * alpha
    }
}

/// Full state of the material point after an increment.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MaterialState {
    pub eps: f64,
    pub eps_p: f64,
    /// Equivalent plastic strain.
    pub alpha: f64,
    /// Phase-field damage in `[0, 1]`.
    pub d: f64,
    /// History field (running maximum of the crack driving force).
    pub history: f64,
    /// Degraded stress.
    pub sigma: f64,
    /// Undegraded elastic energy density.
    pub psi_e_eff: f64,
    /// Degraded stored elastic energy.
    pub psi_e_stored: f64,
    pub psi_p: f64,
    pub dissipation_p: f64,
    pub dissipation_d: f64,
    /// Pseudo-time.
    pub t: f64,
}

impl MaterialState {
    /// Undeformed, undamaged state at `t = 0`.
    pub fn virgin() -> Self {
        Self::default()
    }

    pub fn dissipation(&self) -> f64 {
        self.dissipation_p + self.dissipation_d
    }
}

/// Elastic energy density `E eps_e^2 / 2`.
pub fn elastic_energy(eps_e: f64, e: f64) -> Result<f64> {
    ensure_finite("eps_e", eps_e)?;
    ensure_finite("E", e)?;
    if e <= 0.0 {
        return Err(Error::invalid(format!("E must be positive, got {e}")));
    }
    Ok(0.5 * e * eps_e * eps_e)
}

/// Radial return for the plastic strain at frozen damage. Returns
/// `(eps_p_next, alpha_next)`.
pub fn return_map_plastic(
    eps_next: f64,
    state: &MaterialState,
    params: &MaterialParams,
    dt: f64,
) -> Result<(f64, f64)> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::invalid(format!("dt must be positive, got {dt}")));
    }
    ensure_finite("eps_next", eps_next)?;
    if params.is_brittle() {
        return Ok((state.eps_p, state.alpha));
    }
    let sigma_trial = params.e * (eps_next - state.eps_p);
    let yield_stress = params.y0 + params.h * state.alpha;
    let overstress = sigma_trial.abs() - yield_stress;
    if overstress <= 0.0 {
        return Ok((state.eps_p, state.alpha));
    }
    let delta_lambda = overstress / (params.e + params.h + params.eta_p / dt);
    Ok((
        state.eps_p + sigma_trial.signum() * delta_lambda,
        state.alpha + delta_lambda,
    ))
}

/// Crack driving force `zeta <psi_e + psi_p - psi_c>`, optionally divided by
/// `psi_c`.
pub fn crack_driving_force(psi_e_eff: f64, psi_p: f64, params: &MaterialParams) -> f64 {
    let drive = params.zeta * (psi_e_eff + psi_p - params.psi_c).max(0.0);
    if params.history_normalized {
        drive / params.psi_c
    } else {
        drive
    }
}

/// History update: the running maximum of the crack driving force.
pub fn update_history(
    h_prev: f64,
    psi_e_eff: f64,
    psi_p: f64,
    params: &MaterialParams,
) -> Result<f64> {
    ensure_finite("H_prev", h_prev)?;
    ensure_finite("psi_e_eff", psi_e_eff)?;
    ensure_finite("psi_p", psi_p)?;
    if h_prev < 0.0 {
        return Err(Error::invalid(format!("H_prev must be >= 0, got {h_prev}")));
    }
    Ok(h_prev.max(crack_driving_force(psi_e_eff, psi_p, params)))
}

/// Implicit one-step update of the homogeneous phase-field equation
/// `eta_d d' = (1 - d) H - d`, clamped to `[d_prev, 1]`.
pub fn update_phase_field(d_prev: f64, history: f64, eta_d: f64, dt: f64) -> Result<f64> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::invalid(format!("dt must be positive, got {dt}")));
    }
    ensure_finite("d_prev", d_prev)?;
    ensure_finite("H", history)?;
    if !(0.0..=1.0).contains(&d_prev) {
        return Err(Error::invalid(format!("d_prev must lie in [0, 1], got {d_prev}")));
    }
    if history < 0.0 {
        return Err(Error::invalid(format!("H must be >= 0, got {history}")));
    }
    let rate = eta_d / dt;
    let d = (rate * d_prev + history) / (rate + 1.0 + history);
    Ok(d.min(1.0).max(d_prev))
}

/// Advances the material point to total strain `eps_next` over `dt`.
pub fn step(
    state: &MaterialState,
    eps_next: f64,
    dt: f64,
    params: &MaterialParams,
) -> Result<MaterialState> {
    let (eps_p, alpha) = return_map_plastic(eps_next, state, params, dt)?;
    let eps_e = eps_next - eps_p;
    let psi_e_eff = elastic_energy(eps_e, params.e)?;
    let psi_p = params.plastic_work(alpha);
    let history = update_history(state.history, psi_e_eff, psi_p, params)?;
    let d = update_phase_field(state.d, history, params.eta_d, dt)?;

    let degradation = (1.0 - d) * (1.0 - d);
    let sigma = degradation * params.e * eps_e;
    let fracture_force = 2.0 * (1.0 - d) * psi_e_eff;

    Ok(MaterialState {
        eps: eps_next,
        eps_p,
        alpha,
        d,
        history,
        sigma,
        psi_e_eff,
        psi_e_stored: degradation * psi_e_eff,
        psi_p,
        dissipation_p: state.dissipation_p + sigma * (eps_p - state.eps_p),
        dissipation_d: state.dissipation_d + fracture_force * (d - state.d),
        t: state.t + dt,
    })
}

/// Relative mismatch between external work (trapezoidal `∫ sigma d eps`) and
/// stored energy plus accumulated dissipation at the end of the trajectory.
pub fn energy_balance_residual(states: &[MaterialState]) -> Result<f64> {
    if states.len() < 2 {
        return Err(Error::invalid("energy balance needs at least two states"));
    }
    let work: f64 = states
        .windows(2)
        .map(|w| 0.5 * (w[0].sigma + w[1].sigma) * (w[1].eps - w[0].eps))
        .sum();
    let first = &states[0];
    let last = &states[states.len() - 1];
    let ledger = (last.psi_e_stored - first.psi_e_stored) + (last.dissipation() - first.dissipation());
    Ok((work - ledger).abs() / work.abs().max(WORK_FLOOR))
}
