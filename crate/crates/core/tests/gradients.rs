mod common;

use common::*;
use vstm::inference::Noise;
use vstm::kernel::RngStream;
use vstm::ModelSpec;

#[test]
fn explicit_family_matches_finite_differences() {
    let spec = ModelSpec::new(3, 4, 2, vec![1.0, 0.5, 2.0, 1.5]).unwrap();
    let mut rng = RngStream::new(11, 0);
    for _ in 0..3 {
        let data = toy_data(12, 4, 2, &mut rng);
        let state = random_state(&spec, 12, false, &mut rng);
        let rows = [1, 4, 5, 9];
        let noises: Vec<Noise> = (0..2).map(|_| Noise::draw(&spec, rows.len(), &mut rng)).collect();
        let (err, at) = max_gradient_error(&data, &rows, &state, &spec, 3.0, &noises, 1e-5);
        assert!(err < 1e-4, "{err} at {at}");
    }
}

#[test]
fn amortized_family_matches_finite_differences() {
    let spec = ModelSpec::new(3, 4, 2, vec![1.0; 4]).unwrap();
    let mut rng = RngStream::new(12, 0);
    let data = toy_data(12, 4, 2, &mut rng);
    let state = random_state(&spec, 12, true, &mut rng);
    let rows: Vec<usize> = (0..12).collect();
    let noises = vec![Noise::draw(&spec, 12, &mut rng)];
    let (err, at) = max_gradient_error(&data, &rows, &state, &spec, 1.0, &noises, 1e-5);
    assert!(err < 1e-4, "{err} at {at}");
}
