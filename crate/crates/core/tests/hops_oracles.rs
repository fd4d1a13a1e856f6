use dyadhops::bath::{ExponentialBath, ExponentialMode};
use dyadhops::hops::{Equation, HopsGenerator, HopsState};
use dyadhops::model::{build_coupling_operators, build_exciton_hamiltonian, build_state_space, ExcitonModel, SystemOperator};
use dyadhops::noise::{generate_noise, NoiseTrajectory};
use dyadhops::C64;
use nalgebra::DVector;

fn dimer() -> ExcitonModel {
    ExcitonModel::homodimer(0.1, 0.3, 1.0)
}

fn operators(model: &ExcitonModel) -> (SystemOperator, Vec<SystemOperator>) {
    let space = build_state_space(model);
    (
        build_exciton_hamiltonian(model, &space).unwrap(),
        build_coupling_operators(model, &space).unwrap(),
    )
}

fn bath(p: f64) -> ExponentialBath {
    ExponentialBath::uniform(2, ExponentialMode::damped_vibration(p, 0.25, 1.0))
}

fn single(p: f64, depth: usize, dt: f64, eq: Equation) -> HopsGenerator {
    let (h, l) = operators(&dimer());
    HopsGenerator::new(&h, &l, &bath(p), depth, dt, eq).unwrap()
}

fn dyadic(p: f64, depth: usize, dt: f64, eq: Equation) -> HopsGenerator {
    let (h, l) = operators(&dimer());
    HopsGenerator::dyadic(&h, &l, &bath(p), depth, dt, eq).unwrap()
}

fn start() -> Vec<C64> {
    let s = 0.5f64.sqrt();
    vec![C64::new(0.0, 0.0), C64::new(s, 0.0), C64::new(0.0, s), C64::new(0.0, 0.0)]
}

fn diff(a: &[C64], b: &[C64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

#[test]
fn uncoupled_propagation_is_the_matrix_exponential() {
    let g = single(0.0, 4, 0.01, Equation::Nonlinear);
    let noise = NoiseTrajectory::zeros(2, 0.05, 200);
    let mut s = g.initial_state(&start(), 0.0).unwrap();
    g.propagate(&mut s, 5.0, &noise).unwrap();
    let (h, _) = operators(&dimer());
    let u = (h.matrix() * C64::new(0.0, -5.0)).exp();
    let exact = u * DVector::from_vec(start());
    assert!(diff(s.zeroth(), exact.as_slice()) < 1e-10);
}

#[test]
fn time_step_convergence_is_fourth_order() {
    // A smooth (noise-free) hierarchy isolates the integrator order.
    let noise = NoiseTrajectory::zeros(2, 0.05, 200);
    let run = |dt: f64| {
        let g = single(0.5, 6, dt, Equation::Nonlinear);
        let mut s = g.initial_state(&start(), 0.0).unwrap();
        g.propagate(&mut s, 4.0, &noise).unwrap();
        s.zeroth().to_vec()
    };
    let (a, b, c) = (run(0.2), run(0.1), run(0.05));
    let order = (diff(&a, &b) / diff(&b, &c)).log2();
    assert!(order >= 3.5, "observed order {order}");
}

#[test]
fn linear_dyadic_blocks_evolve_independently() {
    let noise = generate_noise(&bath(0.5), 0.05, 120, 3, 7).unwrap();
    let g1 = single(0.5, 5, 0.05, Equation::Linear);
    let g2 = dyadic(0.5, 5, 0.05, Equation::Linear);
    let bra = start();
    let ket: Vec<C64> = vec![C64::new(1.0, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 0.0)];
    let mut sb = g1.initial_state(&bra, 0.0).unwrap();
    let mut sk = g1.initial_state(&ket, 0.0).unwrap();
    let both: Vec<C64> = bra.iter().chain(&ket).copied().collect();
    let mut sd = g2.initial_state(&both, 0.0).unwrap();
    for s in [&mut sb, &mut sk] {
        g1.propagate(s, 5.0, &noise).unwrap();
    }
    g2.propagate(&mut sd, 5.0, &noise).unwrap();
    assert!(diff(&sd.zeroth()[..4], sb.zeroth()) < 1e-12);
    assert!(diff(&sd.zeroth()[4..], sk.zeroth()) < 1e-12);
}

#[test]
fn nonlinear_dyadic_blocks_are_coupled_through_the_shared_norm() {
    let noise = generate_noise(&bath(0.5), 0.05, 120, 3, 7).unwrap();
    let g1 = single(0.5, 5, 0.05, Equation::Nonlinear);
    let g2 = dyadic(0.5, 5, 0.05, Equation::Nonlinear);
    let bra = start();
    let ket: Vec<C64> = vec![C64::new(1.0, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 0.0)];
    let mut sb = g1.initial_state(&bra, 0.0).unwrap();
    g1.propagate(&mut sb, 5.0, &noise).unwrap();
    let both: Vec<C64> = bra.iter().chain(&ket).copied().collect();
    let mut sd = g2.initial_state(&both, 0.0).unwrap();
    g2.propagate(&mut sd, 5.0, &noise).unwrap();
    assert!(diff(&sd.zeroth()[..4], sb.zeroth()) > 1e-6);
}

#[test]
fn lane_batches_are_bit_identical_to_single_lanes() {
    let g = dyadic(0.5, 4, 0.05, Equation::Nonlinear);
    let noises: Vec<NoiseTrajectory> = (0..8).map(|i| generate_noise(&bath(0.5), 0.05, 80, 1, i).unwrap()).collect();
    let states: Vec<HopsState> = (0..8)
        .map(|i| {
            let mut v = vec![C64::new(0.0, 0.0); 8];
            v[0] = C64::new(1.0, 0.0);
            v[4 + 1 + i % 2] = C64::new(0.5, 0.1 * i as f64);
            g.initial_state(&v, 0.0).unwrap()
        })
        .collect();
    let refs: [&HopsState; 8] = std::array::from_fn(|i| &states[i]);
    let mut ls = g.pack::<8>(&refs).unwrap();
    let nrefs: Vec<&NoiseTrajectory> = noises.iter().collect();
    g.advance(&mut ls, 60, &nrefs).unwrap();
    let out = g.unpack(&ls);
    for i in 0..8 {
        let mut s = states[i].clone();
        g.propagate(&mut s, 3.0, &noises[i]).unwrap();
        assert_eq!(s.zeroth(), out[i].zeroth(), "lane {i}");
    }
}

#[test]
fn weak_coupling_linear_and_nonlinear_trajectories_are_close() {
    let noise = generate_noise(&bath(1e-4), 0.05, 120, 5, 0).unwrap();
    let mut out = Vec::new();
    for eq in [Equation::Linear, Equation::Nonlinear] {
        let g = single(1e-4, 3, 0.05, eq);
        let mut s = g.initial_state(&start(), 0.0).unwrap();
        g.propagate(&mut s, 5.0, &noise).unwrap();
        out.push(s.zeroth().to_vec());
    }
    assert!(diff(&out[0], &out[1]) < 1e-3);
}
