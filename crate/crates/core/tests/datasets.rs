use phiml_core::datagen::{
    generate_dataset, make_test_paths, sample_parameter_grid, strictly_inside_hull, varying_coords, Dataset,
    EpsMaxRule, GenerationConfig, Mode, ParameterSpace, Split, Variant,
};
use phiml_core::matpoint;

fn tercile_counts(values: &[f64], lo: f64, hi: f64) -> [usize; 3] {
    let mut counts = [0; 3];
    for v in values {
        let k = (((v - lo) / (hi - lo)) * 3.0).floor().clamp(0.0, 2.0) as usize;
        counts[k] += 1;
    }
    counts
}

#[test]
fn sampling_is_stratified_per_parameter() {
    for mode in [Mode::Brittle, Mode::Ductile] {
        let space = ParameterSpace::standard(mode);
        for seed in 0..5 {
            let samples = sample_parameter_grid(&space, 20, seed).unwrap();
            for (axis, range) in space.varying().iter().enumerate() {
                let column: Vec<f64> = samples.iter().map(|p| varying_coords(p, mode)[axis]).collect();
                let counts = tercile_counts(&column, range.lo, range.hi);
                assert!(counts.iter().all(|&c| c >= 4), "{mode:?} seed {seed} axis {axis}: {counts:?}");
            }
        }
    }
}

#[test]
fn sampling_is_deterministic() {
    let space = ParameterSpace::standard(Mode::Ductile);
    assert_eq!(
        sample_parameter_grid(&space, 20, 11).unwrap(),
        sample_parameter_grid(&space, 20, 11).unwrap()
    );
    assert_ne!(
        sample_parameter_grid(&space, 20, 11).unwrap(),
        sample_parameter_grid(&space, 20, 12).unwrap()
    );
}

#[test]
fn test_paths_sit_at_range_minima_midpoints_and_maxima() {
    let space = ParameterSpace::standard(Mode::Brittle);
    let [lower, interp, upper] = make_test_paths(&space, &EpsMaxRule::standard(Mode::Brittle), 150, 20).unwrap();
    assert_eq!((lower.params.e, lower.params.psi_c), (20.0, 0.05));
    assert_eq!((upper.params.e, upper.params.psi_c), (50.0, 0.155));
    assert_eq!(interp.params.e, 35.0);
    assert!((interp.params.psi_c - 0.1025).abs() < 1e-15);
    assert_eq!([lower.path_id, interp.path_id, upper.path_id], [20, 21, 22]);
}

fn dataset(mode: Mode, variant: Variant) -> Dataset {
    generate_dataset(&GenerationConfig::standard(mode, 0), variant).unwrap()
}

#[test]
fn full_datasets_have_the_expected_row_counts() {
    assert_eq!(dataset(Mode::Brittle, Variant::Full).rows.len(), 3450);
    assert_eq!(dataset(Mode::Ductile, Variant::Full).rows.len(), 6900);
}

#[test]
fn splits_have_the_expected_sizes() {
    for mode in [Mode::Brittle, Mode::Ductile] {
        let full = dataset(mode, Variant::Full);
        let reduced = dataset(mode, Variant::Reduced);
        let sizes = |ds: &Dataset| {
            [Split::Train, Split::Val, Split::TestLower, Split::TestInterp, Split::TestUpper].map(|s| ds.paths_in(s).len())
        };
        assert_eq!(sizes(&full), [18, 2, 1, 1, 1]);
        assert_eq!(sizes(&reduced), [9, 1, 1, 1, 1]);

        let full_train = full.paths_in(Split::Train);
        assert!(reduced.paths_in(Split::Train).iter().all(|id| full_train.contains(id)));
        assert!(full.paths_in(Split::Val).contains(&reduced.paths_in(Split::Val)[0]));
        for s in [Split::TestLower, Split::TestInterp, Split::TestUpper] {
            let id = full.test_path(s).unwrap();
            assert_eq!(reduced.test_path(s), Some(id));
            assert_eq!(full.path_rows(id), reduced.path_rows(id));
            assert!(!full_train.contains(&id));
        }
    }
}

#[test]
fn test_parameters_bracket_the_training_hull() {
    for mode in [Mode::Brittle, Mode::Ductile] {
        let ds = dataset(mode, Variant::Full);
        let space = &ds.config.space;
        let scales: Vec<f64> = space.varying().iter().map(|r| r.span()).collect();
        let train: Vec<Vec<f64>> = ds
            .paths_in(Split::Train)
            .iter()
            .map(|&id| varying_coords(&ds.path(id).unwrap().params, mode))
            .collect();
        let coords = |s: Split| varying_coords(&ds.path(ds.test_path(s).unwrap()).unwrap().params, mode);
        assert!(strictly_inside_hull(&coords(Split::TestInterp), &train, &scales), "{mode:?}");
        assert!(!strictly_inside_hull(&coords(Split::TestLower), &train, &scales), "{mode:?}");
        assert!(!strictly_inside_hull(&coords(Split::TestUpper), &train, &scales), "{mode:?}");
    }
}

#[test]
fn every_row_replays_through_the_integrator() {
    let ds = dataset(Mode::Ductile, Variant::Reduced);
    assert_eq!(ds.check_replay(1.0, 0).unwrap(), ds.rows.len());
}

#[test]
fn brittle_paths_soften_deeply_and_ductile_paths_yield() {
    let brittle = dataset(Mode::Brittle, Variant::Full);
    for path in &brittle.paths {
        let rows = brittle.path_rows(path.path_id);
        assert_eq!(rows.len(), 150);
        assert!(rows.last().unwrap().d_next > 0.9, "path {}", path.path_id);
    }
    let ductile = dataset(Mode::Ductile, Variant::Full);
    for path in &ductile.paths {
        let rows = ductile.path_rows(path.path_id);
        assert_eq!(rows.len(), 300);
        assert!(rows.last().unwrap().eps_p_next > 0.0, "path {}", path.path_id);
        assert!(rows.last().unwrap().d_next > 0.0, "path {}", path.path_id);
        assert!(rows.windows(2).all(|w| w[1].eps_p >= w[0].eps_p));
    }
}

#[test]
fn datasets_are_bit_reproducible_and_round_trip() {
    let config = GenerationConfig::standard(Mode::Ductile, 5);
    let a = generate_dataset(&config, Variant::Full).unwrap();
    let b = generate_dataset(&config, Variant::Full).unwrap();
    assert_eq!(a.csv_bytes().unwrap(), b.csv_bytes().unwrap());

    let dir = tempfile::tempdir().unwrap();
    a.write(dir.path()).unwrap();
    let back = Dataset::read(dir.path()).unwrap();
    assert_eq!(back, a);
    let meta_first = std::fs::read(dir.path().join("dataset.meta.json")).unwrap();
    back.write(dir.path()).unwrap();
    assert_eq!(meta_first, std::fs::read(dir.path().join("dataset.meta.json")).unwrap());
}

#[test]
fn replaying_a_stored_state_reproduces_the_next_row() {
    let ds = dataset(Mode::Brittle, Variant::Reduced);
    let id = ds.test_path(Split::TestInterp).unwrap();
    let path = ds.path(id).unwrap();
    let rows = ds.path_rows(id);
    for k in [0, 40, 80, 149] {
        let state = rows[k].reconstruct_state(&path.params, path.dt()).unwrap();
        let next = matpoint::step(&state, rows[k].eps_next, path.dt(), &path.params).unwrap();
        assert_eq!(next.sigma, rows[k].sigma_next);
        assert_eq!(next.d, rows[k].d_next);
    }
}
