use dyadhops::bath::{ExponentialBath, ExponentialMode};
use dyadhops::grid::UniformGrid;
use dyadhops::hops::Equation;
use dyadhops::model::ExcitonModel;
use dyadhops::response::{
    dense, linear_response_ensemble, response_ensemble, EnsembleOptions, HopsSettings, LinearMethod, Pathway, PulseSequence,
    ResponseEngine, ThirdOrderGrids,
};
use dyadhops::C64;

fn dimer() -> ExcitonModel {
    ExcitonModel::homodimer(0.0, -0.3, 1.0)
}

fn settings(depth: usize, dt: f64) -> HopsSettings {
    HopsSettings {
        depth,
        depth_esa: depth + 1,
        dt,
        noise_dt: 0.05,
        equation: Equation::Nonlinear,
    }
}

fn grids(step: f64, len: usize, waiting: Vec<f64>) -> ThirdOrderGrids {
    let g = UniformGrid::new(step, len).unwrap();
    ThirdOrderGrids::new(g, g, waiting).unwrap()
}

fn max_rel(a: &[C64], b: &[C64]) -> f64 {
    let scale = b.iter().map(|x| x.norm()).fold(0.0, f64::max).max(1e-300);
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max) / scale
}

#[test]
fn zero_bath_trajectory_equals_dense_propagation() {
    let bath = ExponentialBath::uniform(2, ExponentialMode::damped_vibration(0.0, 0.25, 1.0));
    let engine = ResponseEngine::new(dimer(), bath, settings(3, 0.01)).unwrap();
    let g = grids(0.5, 9, vec![0.0, 1.5]);
    let noise = engine.noise_generator(g.duration()).unwrap().generate(1, 0);
    for p in Pathway::ALL {
        let hops = engine.third_order_trajectory(p, &g, &noise).unwrap();
        let exact = dense::third_order(&dimer(), p, &g).unwrap();
        for (h, e) in hops.iter().zip(&exact) {
            let err = max_rel(h.as_slice().unwrap(), e.as_slice().unwrap());
            assert!(err < 1e-8, "{p}: {err}");
        }
    }
}

#[test]
fn zero_bath_ground_state_bleach_magnitude() {
    let g = grids(0.5, 1, vec![0.0]);
    let r3 = dense::third_order(&dimer(), Pathway::R3, &g).unwrap();
    let r4 = dense::third_order(&dimer(), Pathway::R4, &g).unwrap();
    assert!((r3[0][[0, 0]] - C64::new(-4.0, 0.0)).norm() < 1e-12);
    assert!((r4[0][[0, 0]] - C64::new(-4.0, 0.0)).norm() < 1e-12);
}

#[test]
fn monomer_has_no_excited_state_absorption() {
    let g = grids(0.5, 6, vec![0.0, 1.0]);
    let m = ExcitonModel::monomer(0.0, 1.0);
    for p in [Pathway::R5, Pathway::R6] {
        for r in dense::third_order(&m, p, &g).unwrap() {
            assert!(r.iter().all(|x| x.norm() < 1e-14));
        }
    }
    let bath = ExponentialBath::uniform(1, ExponentialMode::damped_vibration(0.5, 0.25, 1.0));
    let engine = ResponseEngine::new(m, bath, settings(4, 0.05)).unwrap();
    let noise = engine.noise_generator(g.duration()).unwrap().generate(3, 0);
    for r in engine.third_order_trajectory(Pathway::R6, &g, &noise).unwrap() {
        assert!(r.iter().all(|x| x.norm() < 1e-14));
    }
}

#[test]
fn branching_matches_straight_line_sequence() {
    let bath = ExponentialBath::uniform(2, ExponentialMode::damped_vibration(0.5, 0.25, 1.0));
    // Straight-line sequences always run at the ground/single depth.
    let engine = ResponseEngine::new(dimer(), bath, HopsSettings { depth_esa: 4, ..settings(4, 0.05) }).unwrap();
    let g = grids(0.5, 5, vec![0.0, 1.0]);
    let noise = engine.noise_generator(g.duration()).unwrap().generate(9, 4);
    for p in [Pathway::R1, Pathway::R3, Pathway::R5] {
        let branched = engine.third_order_trajectory(p, &g, &noise).unwrap();
        for (iw, &w) in g.waiting.iter().enumerate() {
            for i in [0, 3] {
                let seq = PulseSequence::third_order(p, g.tau.value(i), w, g.t.max());
                let line = engine.sequence_trajectory(&seq, &g.t, &noise).unwrap();
                let row: Vec<C64> = branched[iw].row(i).to_vec();
                assert!(max_rel(&row, &line) < 1e-10, "{p} tau {i} T {w}");
            }
        }
    }
}

#[test]
fn batched_ensemble_reproduces_single_trajectories() {
    let bath = ExponentialBath::uniform(2, ExponentialMode::damped_vibration(0.5, 0.25, 1.0));
    let engine = ResponseEngine::new(dimer(), bath, settings(3, 0.05)).unwrap();
    let g = grids(0.5, 4, vec![0.0, 0.5]);
    let pathways = [Pathway::R2, Pathway::R6];
    let opts = EnsembleOptions::new(11, 77);
    let mut records = Vec::new();
    let ens = response_ensemble(&engine, &pathways, &g, &opts, |r| records.push(r.clone())).unwrap();
    assert_eq!(records.len(), 11);
    assert_eq!(ens.n_traj, 11);
    let noise_gen = engine.noise_generator(g.duration()).unwrap();
    let mut sum = vec![C64::new(0.0, 0.0); 16];
    for (i, rec) in records.iter().enumerate() {
        assert_eq!(rec.index, i as u64);
        assert!(rec.ok);
        let noise = noise_gen.generate(77, i as u64);
        for (ip, p) in pathways.iter().enumerate() {
            let single = engine.third_order_trajectory(*p, &g, &noise).unwrap();
            for iw in 0..2 {
                assert_eq!(single[iw], rec.grids[ip * 2 + iw], "trajectory {i} {p}");
            }
        }
        for (s, x) in sum.iter_mut().zip(rec.grids[1].iter()) {
            *s += x;
        }
    }
    let mean = ens.get(Pathway::R2, 1).unwrap();
    for (m, s) in mean.mean.iter().zip(&sum) {
        assert!((m - s / 11.0).norm() < 1e-12 * (1.0 + m.norm()));
    }
}

#[test]
fn parallel_merge_agrees_with_ordered_merge() {
    let bath = ExponentialBath::uniform(2, ExponentialMode::damped_vibration(0.5, 0.25, 1.0));
    let engine = ResponseEngine::new(dimer(), bath, settings(3, 0.05)).unwrap();
    let t = UniformGrid::new(0.5, 10).unwrap();
    let mut opts = EnsembleOptions::new(40, 5);
    let a = linear_response_ensemble(&engine, LinearMethod::Dyadic, &t, &opts).unwrap();
    let b = linear_response_ensemble(&engine, LinearMethod::Dyadic, &t, &opts).unwrap();
    assert_eq!(a, b);
    opts.deterministic = false;
    let c = linear_response_ensemble(&engine, LinearMethod::Dyadic, &t, &opts).unwrap();
    assert!(max_rel(&c.mean, &a.mean) < 1e-12);
}

#[test]
fn zero_bath_linear_methods_agree_with_dense() {
    let bath = ExponentialBath::uniform(2, ExponentialMode::damped_vibration(0.0, 0.25, 1.0));
    let t = UniformGrid::new(0.25, 41).unwrap();
    let exact = dense::linear(&dimer(), &t).unwrap();
    assert!((exact[0] - C64::new(2.0, 0.0)).norm() < 1e-12);
    for eq in [Equation::Linear, Equation::Nonlinear] {
        let engine = ResponseEngine::new(dimer(), bath.clone(), HopsSettings { equation: eq, ..settings(2, 0.01) }).unwrap();
        for method in [LinearMethod::Dyadic, LinearMethod::Decomposition] {
            let r = linear_response_ensemble(&engine, method, &t, &EnsembleOptions::new(3, 1)).unwrap();
            assert!(max_rel(&r.mean, &exact) < 1e-8, "{eq:?} {method:?}");
            assert!(r.std_err.iter().all(|s| *s == 0.0));
        }
    }
}

#[test]
fn weak_coupling_linear_and_nonlinear_equations_agree() {
    let bath = ExponentialBath::uniform(2, ExponentialMode::damped_vibration(0.02, 0.25, 1.0));
    let t = UniformGrid::new(0.5, 21).unwrap();
    let opts = EnsembleOptions::new(64, 3);
    let mut means = Vec::new();
    for eq in [Equation::Linear, Equation::Nonlinear] {
        let engine = ResponseEngine::new(dimer(), bath.clone(), HopsSettings { equation: eq, ..settings(3, 0.05) }).unwrap();
        means.push(linear_response_ensemble(&engine, LinearMethod::Dyadic, &t, &opts).unwrap());
    }
    for k in 0..t.len {
        let d = (means[0].mean[k] - means[1].mean[k]).norm();
        let se = means[0].std_err[k].hypot(means[1].std_err[k]);
        assert!(d < 4.0 * se + 2e-3, "t = {}: {d} vs {se}", t.value(k));
    }
}

#[test]
fn disordered_ensembles_are_reproducible() {
    let bath = ExponentialBath::uniform(2, ExponentialMode::damped_vibration(0.0, 0.25, 1.0));
    let model = dimer().with_disorder(0.2);
    let engine = ResponseEngine::new(model, bath, settings(2, 0.05)).unwrap();
    let t = UniformGrid::new(0.5, 30).unwrap();
    let opts = EnsembleOptions::new(12, 8);
    let a = linear_response_ensemble(&engine, LinearMethod::Dyadic, &t, &opts).unwrap();
    let b = linear_response_ensemble(&engine, LinearMethod::Dyadic, &t, &opts).unwrap();
    assert_eq!(a, b);
    // Static disorder alone dephases the coherence: the sample spread is nonzero.
    assert!(a.std_err[t.len - 1] > 0.0);
    assert!(a.mean[t.len - 1].norm() < 2.0);
}
