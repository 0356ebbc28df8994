mod common;

#[test]
fn every_objective_matches_finite_differences() {
    for seed in [3, 17] {
        for (name, params, err) in common::all_gradient_checks(seed) {
            assert!(params <= 100, "{name}: toy model has {params} parameters");
            assert!(err < 1e-4, "{name} (seed {seed}): relative gradient error {err:e}");
        }
    }
}
