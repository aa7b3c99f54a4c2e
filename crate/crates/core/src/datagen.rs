//! Synthetic load-path datasets: parameter sweeps, trajectory integration,
//! train/val/test splits, normalization, and the CSV + JSON file layout.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::{bytes_hash, config_hash};
use crate::matpoint::{self, crack_driving_force, elastic_energy, MaterialParams, MaterialState};

pub const SCHEMA_VERSION: u32 = 1;
pub const DATASET_CSV: &str = "dataset.csv";
pub const DATASET_META: &str = "dataset.meta.json";

/// Number of train+val paths in the full dataset.
pub const N_TRAIN_VAL: usize = 20;
const N_VAL_FULL: usize = 2;
const N_TRAIN_REDUCED: usize = 9;
const N_VAL_REDUCED: usize = 1;
/// Training samples stay this fraction of each span away from the range ends.
const HULL_MARGIN: f64 = 0.05;
/// Safety factor applied to the strain that exactly reaches the damage target.
const DAMAGE_TARGET_MARGIN: f64 = 1.05;
/// Fraction of rows replayed through the integrator when assembling.
const REPLAY_FRACTION: f64 = 0.01;
const REPLAY_TOL: f64 = 1e-9;

pub const CSV_HEADER: [&str; 18] = [
    "path_id", "step", "eps_next", "eps", "eps_p", "eps_p_next", "sigma", "sigma_next", "d",
    "d_next", "psi_next", "dp", "dp_next", "dd", "dd_next", "e", "y0", "psi_c",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Brittle,
    Ductile,
}

impl Mode {
    pub fn default_steps(self) -> usize {
        match self {
            Mode::Brittle => 150,
            Mode::Ductile => 300,
        }
    }

    pub fn default_eps_factor(self) -> f64 {
        match self {
            Mode::Brittle => 3.0,
            Mode::Ductile => 1.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    Reduced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    TestLower,
    TestInterp,
    TestUpper,
}

impl Split {
    pub fn is_test(self) -> bool {
        matches!(self, Split::TestLower | Split::TestInterp | Split::TestUpper)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn span(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo < self.hi) {
            return Err(Error::invalid(format!("range for {name} must satisfy lo < hi, got [{}, {}]", self.lo, self.hi)));
        }
        Ok(())
    }

    /// The range shrunk by `HULL_MARGIN` of its span on both sides.
    pub fn training_hull(&self) -> Range {
        let delta = HULL_MARGIN * self.span();
        Range::new(self.lo + delta, self.hi - delta)
    }
}

/// The material parameter space a dataset is drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSpace {
    pub e: Range,
    /// `None` for brittle materials (infinite yield stress).
    pub y0: Option<Range>,
    pub psi_c: Range,
    pub zeta: f64,
    pub h: f64,
    pub eta_p: f64,
    pub eta_d: f64,
    #[serde(default)]
    pub history_normalized: bool,
}

impl ParameterSpace {
    /// Ranges swept for the data: E in 20-50 GPa, y0 in 0.4-0.85 GPa,
    /// psi_c in 0.05-0.155 GPa, zeta = 1, ideal plasticity.
    pub fn standard(mode: Mode) -> Self {
        Self {
            e: Range::new(20.0, 50.0),
            y0: match mode {
                Mode::Brittle => None,
                Mode::Ductile => Some(Range::new(0.4, 0.85)),
            },
            psi_c: Range::new(0.05, 0.155),
            zeta: 1.0,
            h: 0.0,
            eta_p: 0.0,
            eta_d: 0.0,
            history_normalized: false,
        }
    }

    pub fn mode(&self) -> Mode {
        if self.y0.is_some() {
            Mode::Ductile
        } else {
            Mode::Brittle
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.e.validate("E")?;
        if let Some(y0) = &self.y0 {
            y0.validate("y0")?;
        }
        self.psi_c.validate("psi_c")?;
        self.params(self.e.lo, self.y0.map(|r| r.lo), self.psi_c.lo).validate()
    }

    fn params(&self, e: f64, y0: Option<f64>, psi_c: f64) -> MaterialParams {
        MaterialParams {
            e,
            y0: y0.unwrap_or(f64::INFINITY),
            psi_c,
            zeta: self.zeta,
            h: self.h,
            eta_p: self.eta_p,
            eta_d: self.eta_d,
            history_normalized: self.history_normalized,
        }
    }

    /// Varying parameters as `(value accessor, range)`-style vectors, in the
    /// order E, [y0], psi_c.
    pub fn varying(&self) -> Vec<Range> {
        let mut out = vec![self.e];
        out.extend(self.y0);
        out.push(self.psi_c);
        out
    }
}

/// Varying coordinates of `params` in the order of [`ParameterSpace::varying`].
pub fn varying_coords(params: &MaterialParams, mode: Mode) -> Vec<f64> {
    match mode {
        Mode::Brittle => vec![params.e, params.psi_c],
        Mode::Ductile => vec![params.e, params.y0, params.psi_c],
    }
}

/// How the final strain of a monotone ramp is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsMaxRule {
    /// Multiple of the fracture onset strain.
    pub onset_factor: f64,
    /// If set, the ramp is extended until the final damage exceeds this.
    pub min_final_damage: Option<f64>,
}

impl EpsMaxRule {
    pub fn standard(mode: Mode) -> Self {
        Self {
            onset_factor: mode.default_eps_factor(),
            min_final_damage: match mode {
                Mode::Brittle => Some(0.9),
                Mode::Ductile => None,
            },
        }
    }
}

/// Strain at which damage starts, assuming rate independence and ideal
/// plasticity: `sqrt(2 psi_c / E)` for brittle, `y0/(2E) + psi_c/y0` for
/// ductile materials that yield before fracturing.
pub fn onset_strain(params: &MaterialParams) -> f64 {
    let brittle = (2.0 * params.psi_c / params.e).sqrt();
    if params.is_brittle() || params.y0 / params.e >= brittle {
        brittle
    } else {
        params.y0 / (2.0 * params.e) + params.psi_c / params.y0
    }
}

/// Final strain for a ramp of `n_steps` on `params`.
pub fn eps_max_for(params: &MaterialParams, rule: &EpsMaxRule, n_steps: usize) -> Result<f64> {
    if !(rule.onset_factor > 0.0) {
        return Err(Error::invalid("onset_factor must be positive"));
    }
    let base = rule.onset_factor * onset_strain(params);
    let Some(target) = rule.min_final_damage else {
        return Ok(base);
    };
    if !(0.0..1.0).contains(&target) {
        return Err(Error::invalid(format!("min_final_damage must lie in [0, 1), got {target}")));
    }
    let final_damage = |eps_max: f64| -> Result<f64> {
        let path = ramp(params, eps_max, n_steps)?;
        Ok(path.last().map(|s| s.d).unwrap_or(0.0))
    };
    if final_damage(base)? > target {
        return Ok(base);
    }
    let mut lo = base;
    let mut hi = 2.0 * base;
    let mut guard = 0;
    while final_damage(hi)? <= target {
        lo = hi;
        hi *= 2.0;
        guard += 1;
        if guard > 60 {
            return Err(Error::invalid("damage target unreachable by extending the ramp"));
        }
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if final_damage(mid)? > target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(DAMAGE_TARGET_MARGIN * hi)
}

fn ramp(params: &MaterialParams, eps_max: f64, n_steps: usize) -> Result<Vec<MaterialState>> {
    let dt = 1.0 / n_steps as f64;
    let mut states = Vec::with_capacity(n_steps + 1);
    states.push(MaterialState::virgin());
    for k in 1..=n_steps {
        let eps = eps_max * k as f64 / n_steps as f64;
        let next = matpoint::step(&states[k - 1], eps, dt, params)?;
        states.push(next);
    }
    Ok(states)
}

/// Monotone strain ramp `0 -> eps_max` in `n_steps` equal increments over a
/// unit pseudo-time interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadPath {
    pub path_id: usize,
    pub params: MaterialParams,
    pub eps_max: f64,
    pub n_steps: usize,
    pub mode: Mode,
}

impl LoadPath {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.n_steps < 2 {
            return Err(Error::invalid("a load path needs at least 2 steps"));
        }
        if !(self.eps_max > 0.0 && self.eps_max.is_finite()) {
            return Err(Error::invalid("eps_max must be positive"));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.n_steps as f64
    }

    pub fn strain_at(&self, k: usize) -> f64 {
        self.eps_max * k as f64 / self.n_steps as f64
    }
}

/// Integrated states along a load path: the virgin state followed by one
/// state per increment.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub path: LoadPath,
    pub states: Vec<MaterialState>,
}

impl Trajectory {
    /// One row per increment.
    pub fn rows(&self) -> Vec<Row> {
        self.states
            .windows(2)
            .enumerate()
            .map(|(k, w)| Row::from_states(self.path.path_id, k, &w[0], &w[1], &self.path.params))
            .collect()
    }
}

pub fn generate_trajectory(path: &LoadPath) -> Result<Trajectory> {
    path.validate()?;
    let dt = path.dt();
    let mut states = Vec::with_capacity(path.n_steps + 1);
    states.push(MaterialState::virgin());
    for k in 1..=path.n_steps {
        let next = matpoint::step(&states[k - 1], path.strain_at(k), dt, &path.params)?;
        states.push(next);
    }
    Ok(Trajectory {
        path: path.clone(),
        states,
    })
}

/// One loading increment `n -> n+1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub path_id: usize,
    pub step: usize,
    pub eps_next: f64,
    pub eps: f64,
    pub eps_p: f64,
    pub eps_p_next: f64,
    pub sigma: f64,
    pub sigma_next: f64,
    pub d: f64,
    pub d_next: f64,
    /// Stored (degraded) elastic energy at `n+1`.
    pub psi_next: f64,
    pub dp: f64,
    pub dp_next: f64,
    pub dd: f64,
    pub dd_next: f64,
    pub e: f64,
    pub y0: f64,
    pub psi_c: f64,
}

impl Row {
    pub fn from_states(
        path_id: usize,
        step: usize,
        prev: &MaterialState,
        next: &MaterialState,
        params: &MaterialParams,
    ) -> Self {
        Self {
            path_id,
            step,
            eps_next: next.eps,
            eps: prev.eps,
            eps_p: prev.eps_p,
            eps_p_next: next.eps_p,
            sigma: prev.sigma,
            sigma_next: next.sigma,
            d: prev.d,
            d_next: next.d,
            psi_next: next.psi_e_stored,
            dp: prev.dissipation_p,
            dp_next: next.dissipation_p,
            dd: prev.dissipation_d,
            dd_next: next.dissipation_d,
            e: params.e,
            y0: params.y0,
            psi_c: params.psi_c,
        }
    }

    pub fn dissipation(&self) -> f64 {
        self.dp + self.dd
    }

    pub fn dissipation_next(&self) -> f64 {
        self.dp_next + self.dd_next
    }

    /// Rebuilds the full `n` state of a monotone ramp: the equivalent plastic
    /// strain equals `|eps_p|` and the history field equals the current
    /// driving force.
    pub fn reconstruct_state(&self, params: &MaterialParams, dt: f64) -> Result<MaterialState> {
        let alpha = self.eps_p.abs();
        let psi_e_eff = elastic_energy(self.eps - self.eps_p, params.e)?;
        let psi_p = params.plastic_work(alpha);
        Ok(MaterialState {
            eps: self.eps,
            eps_p: self.eps_p,
            alpha,
            d: self.d,
            history: crack_driving_force(psi_e_eff, psi_p, params),
            sigma: self.sigma,
            psi_e_eff,
            psi_e_stored: (1.0 - self.d).powi(2) * psi_e_eff,
            psi_p,
            dissipation_p: self.dp,
            dissipation_d: self.dd,
            t: self.step as f64 * dt,
        })
    }

    fn format_csv(&self) -> [String; 18] {
        let f = |x: f64| format!("{x:.16e}");
        [
            self.path_id.to_string(),
            self.step.to_string(),
            f(self.eps_next),
            f(self.eps),
            f(self.eps_p),
            f(self.eps_p_next),
            f(self.sigma),
            f(self.sigma_next),
            f(self.d),
            f(self.d_next),
            f(self.psi_next),
            f(self.dp),
            f(self.dp_next),
            f(self.dd),
            f(self.dd_next),
            f(self.e),
            f(self.y0),
            f(self.psi_c),
        ]
    }
}

/// Latin-hypercube sample of `n` parameter sets inside the training hull.
/// Each varying parameter gets exactly one sample per `1/n` stratum of its
/// hull; strata are permuted independently per parameter.
pub fn sample_parameter_grid(space: &ParameterSpace, n: usize, seed: u64) -> Result<Vec<MaterialParams>> {
    space.validate()?;
    if n < 2 {
        return Err(Error::invalid("need at least 2 train/val samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let columns: Vec<Vec<f64>> = space
        .varying()
        .iter()
        .map(|range| {
            let hull = range.training_hull();
            let mut strata: Vec<usize> = (0..n).collect();
            strata.shuffle(&mut rng);
            strata
                .into_iter()
                .map(|s| {
                    let u: f64 = rng.gen();
                    hull.lo + (s as f64 + u) / n as f64 * hull.span()
                })
                .collect()
        })
        .collect();
    Ok((0..n)
        .map(|i| match space.mode() {
            Mode::Brittle => space.params(columns[0][i], None, columns[1][i]),
            Mode::Ductile => space.params(columns[0][i], Some(columns[1][i]), columns[2][i]),
        })
        .collect())
}

/// Lower, interpolation and upper test parameter sets: range minima,
/// midpoints and maxima.
pub fn test_parameters(space: &ParameterSpace) -> [MaterialParams; 3] {
    [
        space.params(space.e.lo, space.y0.map(|r| r.lo), space.psi_c.lo),
        space.params(space.e.mid(), space.y0.map(|r| r.mid()), space.psi_c.mid()),
        space.params(space.e.hi, space.y0.map(|r| r.hi), space.psi_c.hi),
    ]
}

/// Test paths with ids `first_id`, `first_id + 1`, `first_id + 2`.
pub fn make_test_paths(
    space: &ParameterSpace,
    rule: &EpsMaxRule,
    n_steps: usize,
    first_id: usize,
) -> Result<[LoadPath; 3]> {
    space.validate()?;
    let mode = space.mode();
    let [lower, interp, upper] = test_parameters(space);
    let make = |offset: usize, params: MaterialParams| -> Result<LoadPath> {
        Ok(LoadPath {
            path_id: first_id + offset,
            params,
            eps_max: eps_max_for(&params, rule, n_steps)?,
            n_steps,
            mode,
        })
    };
    Ok([make(0, lower)?, make(1, interp)?, make(2, upper)?])
}

/// Everything needed to regenerate a dataset bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub space: ParameterSpace,
    pub n_steps: usize,
    pub eps_rule: EpsMaxRule,
    pub seed: u64,
}

impl GenerationConfig {
    pub fn standard(mode: Mode, seed: u64) -> Self {
        Self {
            space: ParameterSpace::standard(mode),
            n_steps: mode.default_steps(),
            eps_rule: EpsMaxRule::standard(mode),
            seed,
        }
    }

    pub fn mode(&self) -> Mode {
        self.space.mode()
    }

    /// The 20 train/val paths (ids 0..20) and the 3 test paths (ids 20..23).
    pub fn load_paths(&self) -> Result<(Vec<LoadPath>, [LoadPath; 3])> {
        let mode = self.mode();
        let train_val = sample_parameter_grid(&self.space, N_TRAIN_VAL, self.seed)?
            .into_iter()
            .enumerate()
            .map(|(path_id, params)| {
                Ok(LoadPath {
                    path_id,
                    params,
                    eps_max: eps_max_for(&params, &self.eps_rule, self.n_steps)?,
                    n_steps: self.n_steps,
                    mode,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let tests = make_test_paths(&self.space, &self.eps_rule, self.n_steps, N_TRAIN_VAL)?;
        Ok((train_val, tests))
    }
}

/// Affine min-max scale of one physical quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scale {
    pub lo: f64,
    pub hi: f64,
    /// Set when the fitted range was empty; the scale is then the identity.
    pub degenerate: bool,
}

impl Scale {
    pub const IDENTITY: Scale = Scale { lo: 0.0, hi: 1.0, degenerate: true };

    pub fn fit(values: impl IntoIterator<Item = f64>) -> Scale {
        let (lo, hi) = values
            .into_iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if lo.is_finite() && hi.is_finite() && hi > lo {
            Scale { lo, hi, degenerate: false }
        } else {
            Scale::IDENTITY
        }
    }

    pub fn span(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.lo) / self.span()
    }

    pub fn invert(&self, x: f64) -> f64 {
        self.lo + x * self.span()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    Strain,
    PlasticStrain,
    Stress,
    Damage,
    Energy,
    Dissipation,
    Modulus,
}

/// Per-quantity scales fitted on the training split. All time indices of a
/// quantity share one scale, so a derivative `d a / d b` maps between
/// normalized and physical units by the single factor `span(a) / span(b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub strain: Scale,
    pub plastic_strain: Scale,
    pub stress: Scale,
    /// Fixed to `[0, 1]`; damage is already dimensionless and bounded.
    pub damage: Scale,
    pub energy: Scale,
    pub dissipation: Scale,
    pub modulus: Scale,
}

impl Normalization {
    pub fn identity() -> Self {
        Self {
            strain: Scale::IDENTITY,
            plastic_strain: Scale::IDENTITY,
            stress: Scale::IDENTITY,
            damage: Scale::IDENTITY,
            energy: Scale::IDENTITY,
            dissipation: Scale::IDENTITY,
            modulus: Scale::IDENTITY,
        }
    }

    pub fn scale(&self, q: Quantity) -> &Scale {
        match q {
            Quantity::Strain => &self.strain,
            Quantity::PlasticStrain => &self.plastic_strain,
            Quantity::Stress => &self.stress,
            Quantity::Damage => &self.damage,
            Quantity::Energy => &self.energy,
            Quantity::Dissipation => &self.dissipation,
            Quantity::Modulus => &self.modulus,
        }
    }

    pub fn apply(&self, q: Quantity, x: f64) -> f64 {
        self.scale(q).apply(x)
    }

    pub fn invert(&self, q: Quantity, x: f64) -> f64 {
        self.scale(q).invert(x)
    }

    /// Factor converting `d of / d wrt` from normalized to physical units.
    pub fn chain_factor(&self, of: Quantity, wrt: Quantity) -> f64 {
        self.scale(of).span() / self.scale(wrt).span()
    }

    /// Quantities whose fitted range was degenerate (identity fallback).
    pub fn warnings(&self) -> Vec<Quantity> {
        use Quantity::*;
        [Strain, PlasticStrain, Stress, Energy, Dissipation, Modulus]
            .into_iter()
            .filter(|q| self.scale(*q).degenerate)
            .collect()
    }
}

pub fn fit_normalization(train_rows: &[Row]) -> Normalization {
    let both = |f: fn(&Row) -> [f64; 2]| Scale::fit(train_rows.iter().flat_map(f));
    Normalization {
        strain: both(|r| [r.eps, r.eps_next]),
        plastic_strain: both(|r| [r.eps_p, r.eps_p_next]),
        stress: both(|r| [r.sigma, r.sigma_next]),
        damage: Scale { lo: 0.0, hi: 1.0, degenerate: false },
        energy: Scale::fit(train_rows.iter().map(|r| r.psi_next)),
        dissipation: Scale::fit(train_rows.iter().flat_map(|r| {
            [r.dp, r.dd, r.dp_next, r.dd_next, r.dissipation(), r.dissipation_next()]
        })),
        modulus: Scale::fit(train_rows.iter().map(|r| r.e)),
    }
}

/// Train/val/test paths of one dataset together with the generated rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub rows: Vec<Row>,
    pub paths: Vec<LoadPath>,
    pub split: BTreeMap<usize, Split>,
    pub norm: Normalization,
    pub variant: Variant,
    pub mode: Mode,
    pub config: GenerationConfig,
}

/// Contents of `dataset.meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub schema_version: u32,
    pub mode: Mode,
    pub variant: Variant,
    pub seed: u64,
    pub config_hash: String,
    pub config: GenerationConfig,
    pub n_rows: usize,
    pub split: BTreeMap<usize, Split>,
    pub norm: Normalization,
    pub norm_warnings: Vec<Quantity>,
    pub paths: Vec<LoadPath>,
    /// SHA-256 of the companion CSV.
    pub csv_sha256: String,
}

/// Test trajectories in lower / interpolation / upper order.
pub struct TestTrajectories {
    pub lower: Trajectory,
    pub interp: Trajectory,
    pub upper: Trajectory,
}

/// Splits and normalizes 20 train/val trajectories plus 3 test trajectories.
/// The split is a seeded shuffle: 2 validation paths, 18 training paths. The
/// reduced variant keeps the first validation path and every other training
/// path ordered by parameters.
pub fn assemble_dataset(
    train_val: Vec<Trajectory>,
    tests: TestTrajectories,
    variant: Variant,
    config: &GenerationConfig,
) -> Result<Dataset> {
    if train_val.len() != N_TRAIN_VAL {
        return Err(Error::invalid(format!(
            "expected {N_TRAIN_VAL} train/val trajectories, got {}",
            train_val.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SPLIT_SALT);
    let mut order: Vec<usize> = (0..train_val.len()).collect();
    order.shuffle(&mut rng);
    let (val_full, train_full) = order.split_at(N_VAL_FULL);

    let (train_ids, val_ids): (Vec<usize>, Vec<usize>) = match variant {
        Variant::Full => (train_full.to_vec(), val_full.to_vec()),
        Variant::Reduced => {
            let mut sorted = train_full.to_vec();
            sorted.sort_by(|&a, &b| {
                let pa = varying_coords(&train_val[a].path.params, config.mode());
                let pb = varying_coords(&train_val[b].path.params, config.mode());
                pa.partial_cmp(&pb).expect("finite parameters")
            });
            let train = sorted.into_iter().step_by(2).take(N_TRAIN_REDUCED).collect();
            (train, val_full[..N_VAL_REDUCED].to_vec())
        }
    };

    let mut split = BTreeMap::new();
    for &i in &train_ids {
        split.insert(train_val[i].path.path_id, Split::Train);
    }
    for &i in &val_ids {
        split.insert(train_val[i].path.path_id, Split::Val);
    }
    let test_roles = [
        (&tests.lower, Split::TestLower),
        (&tests.interp, Split::TestInterp),
        (&tests.upper, Split::TestUpper),
    ];
    for (traj, role) in test_roles {
        if split.insert(traj.path.path_id, role).is_some() {
            return Err(Error::invalid("test path id collides with a train/val path"));
        }
    }

    let mut included: Vec<&Trajectory> = train_val
        .iter()
        .filter(|t| split.contains_key(&t.path.path_id))
        .collect();
    included.extend([&tests.lower, &tests.interp, &tests.upper]);
    included.sort_by_key(|t| t.path.path_id);

    let rows: Vec<Row> = included.iter().flat_map(|t| t.rows()).collect();
    let paths: Vec<LoadPath> = included.iter().map(|t| t.path.clone()).collect();
    let train_rows: Vec<Row> = rows
        .iter()
        .filter(|r| split.get(&r.path_id) == Some(&Split::Train))
        .copied()
        .collect();

    let dataset = Dataset {
        norm: fit_normalization(&train_rows),
        rows,
        paths,
        split,
        variant,
        mode: config.mode(),
        config: config.clone(),
    };
    dataset.check_replay(REPLAY_FRACTION, config.seed)?;
    Ok(dataset)
}

// Separates the split shuffle stream from the parameter sampling stream.
const SPLIT_SALT: u64 = 0x5eed_5b11;

/// Samples parameters, integrates all 23 paths and assembles the dataset.
pub fn generate_dataset(config: &GenerationConfig, variant: Variant) -> Result<Dataset> {
    let (train_val_paths, [lower, interp, upper]) = config.load_paths()?;
    let train_val = train_val_paths
        .iter()
        .map(generate_trajectory)
        .collect::<Result<Vec<_>>>()?;
    let tests = TestTrajectories {
        lower: generate_trajectory(&lower)?,
        interp: generate_trajectory(&interp)?,
        upper: generate_trajectory(&upper)?,
    };
    assemble_dataset(train_val, tests, variant, config)
}

impl Dataset {
    pub fn path(&self, path_id: usize) -> Option<&LoadPath> {
        self.paths.iter().find(|p| p.path_id == path_id)
    }

    pub fn paths_in(&self, split: Split) -> Vec<usize> {
        self.split
            .iter()
            .filter(|(_, s)| **s == split)
            .map(|(id, _)| *id)
            .collect()
    }

    pub fn rows_in(&self, split: Split) -> Vec<Row> {
        self.rows
            .iter()
            .filter(|r| self.split.get(&r.path_id) == Some(&split))
            .copied()
            .collect()
    }

    pub fn path_rows(&self, path_id: usize) -> Vec<Row> {
        self.rows.iter().filter(|r| r.path_id == path_id).copied().collect()
    }

    pub fn test_path(&self, split: Split) -> Option<usize> {
        self.paths_in(split).first().copied()
    }

    pub fn config_hash(&self) -> String {
        config_hash(&(&self.config, self.variant))
    }

    pub fn meta(&self) -> Result<DatasetMeta> {
        Ok(DatasetMeta {
            schema_version: SCHEMA_VERSION,
            mode: self.mode,
            variant: self.variant,
            seed: self.config.seed,
            config_hash: self.config_hash(),
            config: self.config.clone(),
            n_rows: self.rows.len(),
            split: self.split.clone(),
            norm: self.norm,
            norm_warnings: self.norm.warnings(),
            paths: self.paths.clone(),
            csv_sha256: bytes_hash(&self.csv_bytes()?),
        })
    }

    /// Replays a seeded random sample of rows through the integrator and
    /// checks the stored `n+1` values.
    pub fn check_replay(&self, fraction: f64, seed: u64) -> Result<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let n_check = ((self.rows.len() as f64 * fraction).ceil() as usize).max(1).min(self.rows.len());
        let picks = rand::seq::index::sample(&mut rng, self.rows.len(), n_check);
        for i in picks.iter() {
            let row = &self.rows[i];
            let path = self
                .path(row.path_id)
                .ok_or_else(|| Error::invalid(format!("row references unknown path {}", row.path_id)))?;
            let state = row.reconstruct_state(&path.params, path.dt())?;
            let next = matpoint::step(&state, row.eps_next, path.dt(), &path.params)?;
            let pairs = [
                (next.eps_p, row.eps_p_next),
                (next.d, row.d_next),
                (next.sigma, row.sigma_next),
                (next.psi_e_stored, row.psi_next),
                (next.dissipation_p, row.dp_next),
                (next.dissipation_d, row.dd_next),
            ];
            for (replayed, stored) in pairs {
                if (replayed - stored).abs() > REPLAY_TOL * (1.0 + stored.abs()) {
                    return Err(Error::invalid(format!(
                        "row {} of path {} does not replay: {replayed} vs {stored}",
                        row.step, row.path_id
                    )));
                }
            }
        }
        Ok(n_check)
    }

    pub fn csv_bytes(&self) -> Result<Vec<u8>> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record(CSV_HEADER)?;
        for row in &self.rows {
            writer.write_record(row.format_csv())?;
        }
        writer.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    /// Writes `dataset.csv` and `dataset.meta.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(DATASET_CSV), self.csv_bytes()?)?;
        let mut meta = fs::File::create(dir.join(DATASET_META))?;
        serde_json::to_writer_pretty(&mut meta, &self.meta()?)?;
        meta.write_all(b"\n")?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Dataset> {
        let meta: DatasetMeta = serde_json::from_slice(&fs::read(dir.join(DATASET_META))?)?;
        if meta.schema_version != SCHEMA_VERSION {
            return Err(Error::SchemaMismatch(format!(
                "dataset schema {} (expected {SCHEMA_VERSION})",
                meta.schema_version
            )));
        }
        let csv_bytes = fs::read(dir.join(DATASET_CSV))?;
        if bytes_hash(&csv_bytes) != meta.csv_sha256 {
            return Err(Error::SchemaMismatch("dataset.csv does not match the hash in its metadata".into()));
        }
        let mut reader = csv::Reader::from_reader(csv_bytes.as_slice());
        let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
        if header != CSV_HEADER {
            return Err(Error::SchemaMismatch(format!("unexpected CSV header {header:?}")));
        }
        let rows = reader.deserialize().collect::<std::result::Result<Vec<Row>, _>>()?;
        if rows.len() != meta.n_rows {
            return Err(Error::SchemaMismatch(format!(
                "meta declares {} rows, CSV has {}",
                meta.n_rows,
                rows.len()
            )));
        }
        Ok(Dataset {
            rows,
            paths: meta.paths,
            split: meta.split,
            norm: meta.norm,
            variant: meta.variant,
            mode: meta.mode,
            config: meta.config,
        })
    }
}

/// True when `point` lies in the interior of the convex hull of `points`
/// (coordinates scaled per axis by `scales`): a small cross-polytope around
/// it must fit inside the hull.
pub fn strictly_inside_hull(point: &[f64], points: &[Vec<f64>], scales: &[f64]) -> bool {
    const PROBE: f64 = 1e-6;
    let scaled = |p: &[f64]| -> Vec<f64> { p.iter().zip(scales).map(|(x, s)| x / s).collect() };
    let centre = scaled(point);
    let pts: Vec<Vec<f64>> = points.iter().map(|p| scaled(p)).collect();
    (0..centre.len()).all(|axis| {
        [-PROBE, PROBE].iter().all(|&offset| {
            let mut probe = centre.clone();
            probe[axis] += offset;
            in_closed_hull(&probe, &pts)
        })
    })
}

/// Closed-hull membership: some simplex of `dim + 1` points contains `target`.
fn in_closed_hull(target: &[f64], pts: &[Vec<f64>]) -> bool {
    let dim = target.len();
    if pts.len() <= dim {
        return false;
    }
    let mut combo: Vec<usize> = (0..=dim).collect();
    loop {
        let simplex: Vec<&[f64]> = combo.iter().map(|&i| pts[i].as_slice()).collect();
        if let Some(bary) = barycentric(target, &simplex) {
            if bary.iter().all(|&b| b >= -1e-12) {
                return true;
            }
        }
        // next combination
        let mut i = dim + 1;
        loop {
            if i == 0 {
                return false;
            }
            i -= 1;
            if combo[i] < pts.len() - (dim + 1 - i) {
                combo[i] += 1;
                for j in i + 1..=dim {
                    combo[j] = combo[j - 1] + 1;
                }
                break;
            }
        }
    }
}

fn barycentric(target: &[f64], simplex: &[&[f64]]) -> Option<Vec<f64>> {
    let dim = target.len();
    // solve sum_k b_k (v_k - v_0) = target - v_0
    let mut a = vec![vec![0.0; dim + 1]; dim];
    for r in 0..dim {
        for c in 0..dim {
            a[r][c] = simplex[c + 1][r] - simplex[0][r];
        }
        a[r][dim] = target[r] - simplex[0][r];
    }
    for col in 0..dim {
        let pivot = (col..dim).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))?;
        if a[pivot][col].abs() < 1e-14 {
            return None;
        }
        a.swap(col, pivot);
        for r in 0..dim {
            if r != col {
                let factor = a[r][col] / a[col][col];
                for c in col..=dim {
                    a[r][c] -= factor * a[col][c];
                }
            }
        }
    }
    let tail: Vec<f64> = (0..dim).map(|r| a[r][dim] / a[r][r]).collect();
    let mut out = vec![1.0 - tail.iter().sum::<f64>()];
    out.extend(tail);
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small_config(mode: Mode) -> GenerationConfig {
        GenerationConfig {
            n_steps: 40,
            ..GenerationConfig::standard(mode, 4)
        }
    }

    #[test]
    fn samples_stay_inside_the_margin() {
        let space = ParameterSpace::standard(Mode::Ductile);
        for p in sample_parameter_grid(&space, 20, 1).unwrap() {
            assert!((21.5..=48.5).contains(&p.e), "{}", p.e);
            assert!((0.4225..=0.8275).contains(&p.y0), "{}", p.y0);
            assert!((0.05525..=0.14975).contains(&p.psi_c), "{}", p.psi_c);
        }
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        let mut space = ParameterSpace::standard(Mode::Brittle);
        space.e = Range::new(50.0, 20.0);
        assert!(matches!(sample_parameter_grid(&space, 20, 0), Err(Error::InvalidArgument(_))));
        let space = ParameterSpace::standard(Mode::Brittle);
        assert!(sample_parameter_grid(&space, 1, 0).is_err());
    }

    #[test]
    fn brittle_onset_rule_reaches_deep_softening() {
        let p = MaterialParams::brittle(35.0, 0.1);
        let rule = EpsMaxRule::standard(Mode::Brittle);
        let eps_max = eps_max_for(&p, &rule, 150).unwrap();
        assert!(eps_max > 3.0 * onset_strain(&p));
        let states = ramp(&p, eps_max, 150).unwrap();
        assert!(states.last().unwrap().d > 0.9);
    }

    #[test]
    fn ductile_rule_is_a_plain_multiple_of_onset() {
        let p = MaterialParams::ductile(20.0, 0.4, 0.05);
        assert_relative_eq!(onset_strain(&p), 0.135, max_relative = 1e-12);
        let eps_max = eps_max_for(&p, &EpsMaxRule::standard(Mode::Ductile), 300).unwrap();
        assert_relative_eq!(eps_max, 1.5 * 0.135, max_relative = 1e-12);
    }

    #[test]
    fn load_path_ramp_is_uniform() {
        let path = LoadPath {
            path_id: 0,
            params: MaterialParams::brittle(30.0, 0.1),
            eps_max: 0.2,
            n_steps: 4,
            mode: Mode::Brittle,
        };
        assert_eq!(path.strain_at(0), 0.0);
        assert_relative_eq!(path.strain_at(1), 0.05);
        assert_eq!(path.strain_at(4), 0.2);
        let bad = LoadPath { n_steps: 1, ..path };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn rows_carry_consecutive_states() {
        let path = LoadPath {
            path_id: 3,
            params: MaterialParams::ductile(30.0, 0.6, 0.08),
            eps_max: 0.05,
            n_steps: 30,
            mode: Mode::Ductile,
        };
        let rows = generate_trajectory(&path).unwrap().rows();
        assert_eq!(rows.len(), 30);
        for w in rows.windows(2) {
            assert_eq!(w[0].eps_next, w[1].eps);
            assert_eq!(w[0].sigma_next, w[1].sigma);
            assert_eq!(w[0].d_next, w[1].d);
            assert_eq!(w[0].dp_next, w[1].dp);
        }
        assert!(rows.iter().all(|r| r.path_id == 3));
    }

    #[test]
    fn normalization_endpoints_and_round_trip() {
        let ds = generate_dataset(&small_config(Mode::Ductile), Variant::Full).unwrap();
        let train = ds.rows_in(Split::Train);
        let (lo, hi) = train
            .iter()
            .flat_map(|r| [r.sigma, r.sigma_next])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), s| (a.min(s), b.max(s)));
        assert_eq!(ds.norm.apply(Quantity::Stress, lo), 0.0);
        assert_eq!(ds.norm.apply(Quantity::Stress, hi), 1.0);
        for x in [-0.3, 0.0, 0.123, 7.5] {
            let back = ds.norm.invert(Quantity::Stress, ds.norm.apply(Quantity::Stress, x));
            assert!((back - x).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn degenerate_scale_falls_back_to_identity() {
        let s = Scale::fit([0.0, 0.0, 0.0]);
        assert!(s.degenerate);
        assert_eq!(s.apply(0.7), 0.7);
        assert_eq!(s.invert(0.7), 0.7);
    }

    #[test]
    fn brittle_datasets_warn_about_plastic_strain() {
        let ds = generate_dataset(&small_config(Mode::Brittle), Variant::Reduced).unwrap();
        assert_eq!(ds.norm.warnings(), vec![Quantity::PlasticStrain]);
    }

    #[test]
    fn assembly_needs_twenty_train_val_paths() {
        let config = small_config(Mode::Brittle);
        let (train_val, [l, i, u]) = config.load_paths().unwrap();
        let trajs: Vec<Trajectory> = train_val.iter().take(19).map(|p| generate_trajectory(p).unwrap()).collect();
        let tests = TestTrajectories {
            lower: generate_trajectory(&l).unwrap(),
            interp: generate_trajectory(&i).unwrap(),
            upper: generate_trajectory(&u).unwrap(),
        };
        assert!(matches!(
            assemble_dataset(trajs, tests, Variant::Full, &config),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn tampered_csv_is_detected() {
        let ds = generate_dataset(&small_config(Mode::Brittle), Variant::Reduced).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write(dir.path()).unwrap();
        let csv_path = dir.path().join(DATASET_CSV);
        let mut text = fs::read_to_string(&csv_path).unwrap();
        text.push_str(&text.lines().last().unwrap().to_owned());
        text.push('\n');
        fs::write(&csv_path, text).unwrap();
        assert!(matches!(Dataset::read(dir.path()), Err(Error::SchemaMismatch(_))));
    }

    #[test]
    fn hull_membership() {
        let square = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        assert!(strictly_inside_hull(&[0.5, 0.5], &square, &[1.0, 1.0]));
        assert!(!strictly_inside_hull(&[1.5, 0.5], &square, &[1.0, 1.0]));
        assert!(!strictly_inside_hull(&[0.0, 0.5], &square, &[1.0, 1.0]));
    }
}
