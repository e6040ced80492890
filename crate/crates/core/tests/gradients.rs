use pico_core::gradcheck;

#[test]
fn analytic_gradients_match_finite_differences_across_seeds() {
    for seed in 0..10 {
        let results = gradcheck::suite(seed).unwrap();
        assert!(results.len() > 10);
        for (name, err) in results {
            let limit = if name == "end_to_end" { 1e-3 } else { 1e-4 };
            assert!(err < limit, "seed {seed}: {name} relative error {err:e}");
        }
    }
}
