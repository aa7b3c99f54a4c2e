use phiml_core::datagen::{fit_normalization, LoadPath, Mode, Quantity, Scale};
use phiml_core::eval::{mape, r_squared, RolloutMode, Surrogate};
use phiml_core::gradcheck::check_rows;
use phiml_core::matpoint::{self, MaterialParams, MaterialState};
use phiml_core::models::{phiml_dissipation_update, PhiMlInputs, PhiMlModel};
use proptest::prelude::*;

fn material() -> impl Strategy<Value = MaterialParams> {
    (
        10.0..60.0f64,
        prop_oneof![Just(f64::INFINITY), 0.2..1.0f64],
        0.02..0.2f64,
        0.5..2.0f64,
        0.0..5.0f64,
        prop_oneof![Just(0.0), 0.0..0.5f64],
        prop_oneof![Just(0.0), 0.0..0.5f64],
        any::<bool>(),
    )
        .prop_map(|(e, y0, psi_c, zeta, h, eta_p, eta_d, history_normalized)| MaterialParams {
            e,
            y0,
            psi_c,
            zeta,
            h,
            eta_p,
            eta_d,
            history_normalized,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    // Arbitrary loading/unloading/compression sequences.
    #[test]
    fn material_point_is_irreversible_and_bounded(
        params in material(),
        increments in prop::collection::vec(-0.02..0.03f64, 2..80),
    ) {
        let dt = 1.0 / increments.len() as f64;
        let mut state = MaterialState::virgin();
        for inc in increments {
            let next = matpoint::step(&state, state.eps + inc, dt, &params).unwrap();
            prop_assert!((0.0..=1.0).contains(&next.d));
            prop_assert!(next.d >= state.d);
            prop_assert!(next.alpha >= state.alpha);
            prop_assert!(next.history >= state.history);
            prop_assert!(next.dissipation_d >= state.dissipation_d - 1e-15);
            if params.eta_p == 0.0 {
                let yield_stress = params.y0 + params.h * next.alpha;
                prop_assert!((params.e * (next.eps - next.eps_p)).abs() <= yield_stress + 1e-9);
                // sigma and the plastic increment share a sign under rate independence
                prop_assert!(next.dissipation_p >= state.dissipation_p - 1e-15);
            }
            if params.is_brittle() {
                prop_assert_eq!(next.eps_p, 0.0);
            }
            state = next;
        }
    }

    #[test]
    fn normalization_round_trips(
        lo in -10.0..10.0f64,
        span in 1e-6..100.0f64,
        x in -1e3..1e3f64,
    ) {
        let s = Scale::fit([lo, lo + span]);
        let back = s.invert(s.apply(x));
        prop_assert!((back - x).abs() <= 1e-12 * x.abs().max(span).max(lo.abs()));
    }

    #[test]
    fn metrics_ignore_joint_reordering(
        pairs in prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64), 2..40),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let split = |v: &[(f64, f64)]| -> (Vec<f64>, Vec<f64>) { v.iter().copied().unzip() };
        let (y, yhat) = split(&pairs);
        let (ys, yhats) = split(&shuffled);
        let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) => (a - b).abs() <= 1e-9 * (1.0 + a.abs()),
            (None, None) => true,
            _ => false,
        };
        prop_assert!(close(r_squared(&y, &yhat).unwrap(), r_squared(&ys, &yhats).unwrap()));
        prop_assert!(close(mape(&y, &yhat, 1e-6).unwrap(), mape(&ys, &yhats, 1e-6).unwrap()));
        if let Some(r2) = r_squared(&y, &yhat).unwrap() {
            prop_assert!(r2 <= 1.0);
        }
        if let Some(m) = mape(&y, &yhat, 1e-6).unwrap() {
            prop_assert!(m >= 0.0);
        }
    }
}

fn inputs() -> impl Strategy<Value = PhiMlInputs> {
    (-0.1..0.4f64, -0.1..0.4f64, -0.05..0.3f64, -2.0..2.0f64, 0.0..=1.0f64, 10.0..60.0f64).prop_map(
        |(eps_next, eps, eps_p, sigma, d, e)| PhiMlInputs {
            eps_next,
            eps,
            eps_p,
            sigma,
            d,
            e,
        },
    )
}

/// A model whose weights are scrambled well beyond the initialization scale.
fn scrambled_model(seed: u64, scale: f64, ductile: bool) -> PhiMlModel {
    use rand::{Rng, SeedableRng};
    let rows = check_rows().unwrap();
    let mode = if ductile { Mode::Ductile } else { Mode::Brittle };
    let mut m = PhiMlModel::new(fit_normalization(&rows), mode, seed).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for layer in m.net_a.params.layers.iter_mut().chain(m.net_b.params.layers.iter_mut()) {
        for w in layer.weights.iter_mut().chain(layer.biases.iter_mut()) {
            *w = rng.gen_range(-scale..scale);
        }
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn model_outputs_respect_their_bounds(
        seed in any::<u64>(),
        scale in 0.1..4.0f64,
        ductile in any::<bool>(),
        inp in inputs(),
        dd_prev in 0.0..0.5f64,
        dp_prev in 0.0..0.5f64,
    ) {
        let m = scrambled_model(seed, scale, ductile);
        let out = m.forward(&inp).unwrap();
        prop_assert!((0.0..=1.0).contains(&out.d_next));
        for v in [out.eps_p_next, out.d_next, out.psi, out.sigma, out.f_d] {
            prop_assert!(v.is_finite());
        }
        let diss = phiml_dissipation_update(dd_prev, dp_prev, &out, inp.eps_p, inp.d);
        prop_assert!(diss.total >= 0.0);
    }

    // sigma is the strain derivative of psi at frozen internal variables
    #[test]
    fn stress_is_the_energy_derivative(
        seed in any::<u64>(),
        scale in 0.1..2.0f64,
        ductile in any::<bool>(),
        inp in inputs(),
    ) {
        let m = scrambled_model(seed, scale, ductile);
        let out = m.forward(&inp).unwrap();
        let h = 1e-6 * (1.0 + inp.eps_next.abs());
        let psi_at = |eps_next: f64| m.energy(&PhiMlInputs { eps_next, ..inp }, out.eps_p_next, out.d_next);
        let fd = (psi_at(inp.eps_next + h) - psi_at(inp.eps_next - h)) / (2.0 * h);
        let scale_ref = out.sigma.abs().max(1e-3 * m.norm.chain_factor(Quantity::Energy, Quantity::Strain));
        prop_assert!((fd - out.sigma).abs() <= 1e-5 * scale_ref, "fd {fd} vs {}", out.sigma);
    }

    #[test]
    fn autoregressive_rollouts_stay_physical(
        seed in any::<u64>(),
        scale in 0.1..3.0f64,
        e in 20.0..50.0f64,
        y0 in 0.4..0.85f64,
        psi_c in 0.05..0.155f64,
    ) {
        let m = scrambled_model(seed, scale, true);
        let path = LoadPath {
            path_id: 0,
            params: MaterialParams::ductile(e, y0, psi_c),
            eps_max: 0.3,
            n_steps: 40,
            mode: Mode::Ductile,
        };
        let truth = phiml_core::datagen::generate_trajectory(&path).unwrap().rows();
        let preds = m.rollout(&path, &truth, RolloutMode::Autoregressive).unwrap();
        prop_assert_eq!(preds.len(), truth.len());
        for p in preds {
            let d = p.d.unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert!(p.dissipation.unwrap() >= 0.0);
        }
    }
}
