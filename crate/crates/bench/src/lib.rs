//! Deterministic fixtures shared by the benchmark targets: a single-output
//! model of a given size, and a multi-output model over the small benchmark
//! system together with its reference region.

use gp_explore::explore::rmse_sample_points;
use gp_explore::rng::stream;
use gp_explore::{systems, AugmentedState, GpModel, KernelParams, MultiGp, RegionOfInterest};
use nalgebra::DVector;
use rand::Rng;

/// A model with `n` pseudo-random observations of a smooth 2-D target.
pub fn single_output_gp(n: usize) -> GpModel {
    let mut rng = stream(11, 0);
    let kernel = KernelParams::new(1.5, vec![0.8, 1.2]).unwrap();
    let mut gp = GpModel::new(kernel, 1e-2).unwrap();
    for _ in 0..n {
        let x = DVector::<f64>::from_fn(2, |_, _| rng.random_range(-3.0..3.0));
        let y = (x[0]).sin() * (0.5 * x[1]).cos();
        gp = gp.add_point(AugmentedState::new(x), y).unwrap();
    }
    gp
}

/// A multi-output model trained on `n` simulated steps of the small system,
/// plus the region discretization and a held-out query point.
pub fn toy_fixture(n: usize) -> (MultiGp, RegionOfInterest, AugmentedState) {
    let system = systems::make_toy();
    let mut rng = stream(12, 0);
    let region = RegionOfInterest::from_grid(
        system.region_bounds().clone(),
        5,
        625,
        &mut stream(12, 1),
    )
    .unwrap();

    let kernels = (0..system.d_x())
        .map(|_| KernelParams::isotropic(1.0, 1.0, system.d()).unwrap())
        .collect();
    let noises = vec![1e-2; system.d_x()];
    let mut gp = MultiGp::from_parts(kernels, noises).unwrap();

    let mut x = system.region_bounds().slice(0, system.d_x()).unwrap().center();
    for _ in 0..n {
        let u = system.input_bounds().sample_uniform(&mut rng);
        let next = system.step(&x, &u, &mut rng).unwrap();
        let residual = &next - system.known_f(&x, &u).unwrap();
        gp = gp
            .add_point(&AugmentedState::from_parts(&x, &u), &residual)
            .unwrap();
        x = next;
    }

    let q = rmse_sample_points(&region, 1, &mut rng).pop().unwrap();
    (gp, region, q)
}
