//! Fixtures shared by the criterion benches.

use avfp_core::data::Sequence;
use avfp_core::objectives::SequenceNoise;
use avfp_core::{ModelParams, NetworkSpec, Rng};

/// Sensor and setting widths of a normalized FD001 fleet.
pub const N_X: usize = 14;
pub const N_U: usize = 3;

/// Default-size parameters, one random sequence of `steps` rows and the
/// matching noise.
pub fn fixture(steps: usize, seed: u64) -> (ModelParams, Sequence, SequenceNoise) {
    let spec = NetworkSpec::with_dims(N_X, N_U);
    let params = ModelParams::init(&spec, &mut Rng::stream(seed, 1)).expect("valid spec");
    let mut rng = Rng::stream(seed, 2);
    let x = (0..steps).map(|_| rng.normals(N_X)).collect();
    let u = (0..steps).map(|_| rng.normals(N_U)).collect();
    let seq = Sequence::new(x, u).expect("consistent widths");
    let noise = SequenceNoise::draw(&mut rng, steps, spec.n_z);
    (params, seq, noise)
}
