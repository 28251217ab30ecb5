use losslab::algos::{
    self, gpm_after_task, gpm_project, mask_apply, mask_freeze_allocate, ogd_after_task, project_out, sample_subset,
    sgd_dagger_after_task, train_sgd, EigenSelection, GpmMemory, GradientHook, OgdVariant, ProjectionMemory, StepDecay,
    TrainConfig,
};
use losslab::linalg::{self, OrthoBasis};
use losslab::mlp::{self, Activation, Dataset, LossKind, MlpSpec, ParamVector};
use losslab::tasks;
use losslab::Error;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn toy_task(t: usize, seed: u64) -> Dataset {
    tasks::toy_geometric(seed, 20).unwrap().tasks[t].train.clone()
}

fn small_net(bias: bool) -> (MlpSpec, ParamVector) {
    let spec = MlpSpec::new(vec![2, 6, 6, 2], Activation::Relu, bias, LossKind::CrossEntropy).unwrap();
    let p = spec.init_params(3);
    (spec, p)
}

fn cfg(lr: f64, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: lr,
        epochs,
        batch_size: 8,
        seed,
        lr_schedule: None,
    }
}

fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projected_vector_is_orthogonal_and_projection_idempotent(
        cands in prop::collection::vec(vec_strategy(12), 1..8),
        g in vec_strategy(12),
    ) {
        let mut mem = ProjectionMemory::new(12, 12);
        mem.extend(cands.iter().map(|c| c.as_slice()));
        prop_assert!(mem.rank() <= cands.len());
        let q = mem.basis().matrix();
        let gram = q.transpose() * q;
        prop_assert!((gram - DMatrix::identity(mem.rank(), mem.rank())).amax() < 1e-10);

        let mut once = g.clone();
        mem.apply(&mut once);
        prop_assert!(mem.violation(&once) < 1e-10 * linalg::norm(&g).max(1.0));
        let mut twice = once.clone();
        mem.apply(&mut twice);
        prop_assert!(linalg::max_abs(&linalg::sub(&once, &twice)) < 1e-12 * linalg::norm(&g).max(1.0));
        // Pythagoras: the removed part is orthogonal to what is left.
        let removed = linalg::sub(&g, &once);
        prop_assert!(linalg::dot(&removed, &once).abs() < 1e-9 * linalg::dot(&g, &g).max(1.0));
    }

    #[test]
    fn memory_never_exceeds_cap(cands in prop::collection::vec(vec_strategy(6), 1..6), cap in 0usize..6) {
        let mut mem = ProjectionMemory::new(6, cap);
        mem.extend(cands.iter().map(|c| c.as_slice()));
        prop_assert!(mem.rank() <= cap);
        // Random candidates beyond the cap are almost surely new directions.
        prop_assert_eq!(mem.truncated, cands.len() > cap);
    }

    #[test]
    fn gpm_hook_removes_stored_activation_directions(
        seed in 0u64..1000,
        g in vec_strategy(2 * 6 + 6 * 6 + 6 * 2),
    ) {
        let (spec, p) = small_net(false);
        let data = toy_task(0, seed);
        let mem = gpm_after_task(&spec, &p, &data, &GpmMemory::new(&spec), 0.01, 50, seed).unwrap();
        let layout = spec.layout();
        let mut h = g.clone();
        mem.hook(&layout).apply(&mut h);
        prop_assert!(mem.violation(&layout, &h) < 1e-10 * linalg::norm(&g).max(1.0));
    }

    #[test]
    fn mask_sets_are_disjoint_and_frozen_coordinates_stay_fixed(
        p in 10usize..200,
        frac in 0.05f64..0.3,
        seed in 0u64..100,
    ) {
        let t = (1.0 / frac).floor() as usize;
        let m = mask_freeze_allocate(p, t, frac, seed).unwrap();
        let mut seen = vec![false; p];
        for set in &m.index_sets {
            for &i in set {
                prop_assert!(!seen[i]);
                seen[i] = true;
            }
        }
        for (o, set) in m.index_sets.iter().enumerate() {
            for &i in set {
                let expect = if o + 1 < t { 0.0 } else { 1.0 };
                prop_assert_eq!(m.mask[i], expect);
            }
        }
        let spec = MlpSpec::new(vec![p, 1], Activation::Linear, false, LossKind::Mse).unwrap();
        let g = ParamVector::from_values(&spec, vec![1.0; p]).unwrap();
        let masked = mask_apply(&g, &m).unwrap();
        for set in &m.index_sets[..t - 1] {
            for &i in set {
                prop_assert_eq!(masked.values()[i], 0.0);
            }
        }
    }

    #[test]
    fn sample_subset_is_sorted_distinct_and_sized(n in 0usize..300, cap in 0usize..300, seed in 0u64..50) {
        let s = sample_subset(n, cap, seed);
        prop_assert_eq!(s.len(), n.min(cap));
        prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(s.iter().all(|&i| i < n));
    }
}

#[test]
fn gpm_project_matches_hook_on_layer_matrices() {
    let (spec, p) = small_net(false);
    let data = toy_task(1, 4);
    let mem = gpm_after_task(&spec, &p, &data, &GpmMemory::new(&spec), 0.0, 40, 4).unwrap();
    let layout = spec.layout();
    let g = mlp::mean_grad(&spec, &p, &data).unwrap();
    let mut flat = g.values().to_vec();
    mem.hook(&layout).apply(&mut flat);
    let by_layer: Vec<DMatrix<f64>> = (0..spec.n_layers()).map(|l| g.weight_matrix(l)).collect();
    let projected = gpm_project(&by_layer, &mem).unwrap();
    let back = ParamVector::from_values(&spec, flat).unwrap();
    for (l, pm) in projected.iter().enumerate() {
        assert!((pm - back.weight_matrix(l)).amax() < 1e-12, "layer {l}");
    }
}

#[test]
fn gpm_rejects_bias_and_bad_energy() {
    let (spec, p) = small_net(true);
    let data = toy_task(0, 1);
    let err = gpm_after_task(&spec, &p, &data, &GpmMemory::new(&spec), 0.01, 10, 1).unwrap_err();
    assert!(matches!(err, Error::IncompatibleNetwork { .. }));
    let (spec, p) = small_net(false);
    assert!(gpm_after_task(&spec, &p, &data, &GpmMemory::new(&spec), 1.5, 10, 1).is_err());
}

#[test]
fn gpm_first_layer_saturates_on_two_dimensional_inputs() {
    let (spec, p) = small_net(false);
    let mut mem = GpmMemory::new(&spec);
    for t in 0..3 {
        mem = gpm_after_task(&spec, &p, &toy_task(t, 2), &mem, 0.0, 40, 2).unwrap();
    }
    assert_eq!(mem.bases[0].rank(), 2);
    assert!(mem.saturated[0]);
}

#[test]
fn training_is_deterministic_and_trace_sums_to_displacement() {
    let (spec, p) = small_net(true);
    let data = toy_task(0, 7);
    let a = train_sgd(&spec, &p, &data, &cfg(0.05, 3, 9), None, true).unwrap();
    let b = train_sgd(&spec, &p, &data, &cfg(0.05, 3, 9), None, false).unwrap();
    assert_eq!(a.params, b.params);
    let trace = a.trace.unwrap();
    assert_eq!(trace.len(), a.steps);
    assert_eq!(a.steps, 3 * data.len().div_ceil(8));
    let mut sum = vec![0.0; p.len()];
    for d in &trace {
        linalg::axpy(1.0, d, &mut sum);
    }
    let disp = linalg::sub(a.params.values(), p.values());
    assert!(linalg::max_abs(&linalg::sub(&sum, &disp)) < 1e-12);
    let c = train_sgd(&spec, &p, &data, &cfg(0.05, 3, 10), None, false).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let (spec, p) = small_net(true);
    let out = train_sgd(&spec, &p, &toy_task(2, 1), &cfg(0.0, 2, 1), None, false).unwrap();
    assert_eq!(out.params, p);
}

#[test]
fn training_lowers_the_task_loss() {
    let (spec, p) = small_net(true);
    let data = toy_task(0, 5);
    let before = mlp::mean_loss(&spec, &p, &data).unwrap();
    let out = train_sgd(&spec, &p, &data, &cfg(0.1, 30, 5), None, false).unwrap();
    assert!(mlp::mean_loss(&spec, &out.params, &data).unwrap() < before);
}

#[test]
fn divergence_is_reported() {
    let (spec, p) = small_net(true);
    let err = train_sgd(&spec, &p, &toy_task(0, 1), &cfg(1e9, 5, 1), None, false).unwrap_err();
    assert!(matches!(err, Error::Diverged { .. }));
}

#[test]
fn step_decay_schedule() {
    let mut c = cfg(1.0, 10, 0);
    c.lr_schedule = Some(StepDecay {
        milestones: vec![2, 5],
        gamma: 0.1,
    });
    let lrs: Vec<f64> = (0..7).map(|e| c.lr_at_epoch(e)).collect();
    assert_eq!(lrs[..2], [1.0, 1.0]);
    assert!((lrs[2] - 0.1).abs() < 1e-15 && (lrs[4] - 0.1).abs() < 1e-15);
    assert!((lrs[5] - 0.01).abs() < 1e-15);
    c.lr_schedule = Some(StepDecay {
        milestones: vec![5, 2],
        gamma: 0.1,
    });
    assert!(c.validate().is_err());
    assert!(cfg(0.1, 0, 0).validate().is_err());
    assert!(cfg(-0.1, 1, 0).validate().is_err());
}

#[test]
fn sgd_dagger_energy_selection_matches_fixed_count() {
    let (spec, p) = small_net(true);
    let data = toy_task(0, 3);
    let mem = ProjectionMemory::new(p.len(), p.len());
    let h = losslab::hessian::exact_hessian(&spec, &p, &data).unwrap();
    let eig = h.eigen();
    let k = losslab::hessian::energy_cutoff_k(&eig.values, 0.01);
    let a = sgd_dagger_after_task(&spec, &p, &data, &mem, EigenSelection::Energy(0.01), None).unwrap();
    let b = sgd_dagger_after_task(&spec, &p, &data, &mem, EigenSelection::Fixed(k), Some(&eig)).unwrap();
    assert_eq!(a.rank(), k);
    assert_eq!(b.rank(), k);
    // Stored directions are (numerically) Hessian eigenvectors.
    let v = a.basis().column(0);
    let hv = h.matvec(&v);
    let rq = linalg::dot(&v, &hv);
    assert!(linalg::norm(&linalg::sub(&hv, &v.iter().map(|x| rq * x).collect::<Vec<_>>())) < 1e-8 * rq.abs().max(1.0));
    assert!(sgd_dagger_after_task(&spec, &p, &data, &mem, EigenSelection::Energy(-0.5), Some(&eig)).is_err());
}

#[test]
fn ogd_gtl_stores_at_most_one_direction_per_sample() {
    let (spec, p) = small_net(true);
    let data = toy_task(1, 6);
    let mem = ProjectionMemory::new(p.len(), p.len());
    let gtl = ogd_after_task(&spec, &p, &data, &mem, OgdVariant::Gtl, 5, 1).unwrap();
    let all = ogd_after_task(&spec, &p, &data, &mem, OgdVariant::All, 5, 1).unwrap();
    assert!(gtl.rank() <= 5 && gtl.rank() > 0);
    assert!(all.rank() >= gtl.rank() && all.rank() <= 10);
    // A gradient projected against the memory is orthogonal to each stored
    // output gradient.
    let g = project_out(&mlp::mean_grad(&spec, &p, &data).unwrap(), &gtl);
    for c in algos::ogd_candidates(&spec, &p, &data, OgdVariant::Gtl, 5, 1).unwrap() {
        assert!(linalg::dot(&c, g.values()).abs() < 1e-10);
    }
}

#[test]
fn mask_allocation_exhaustion_and_argument_errors() {
    assert!(matches!(mask_freeze_allocate(10, 6, 0.2, 0), Err(Error::AllocationExhausted { .. })));
    assert!(mask_freeze_allocate(10, 0, 0.2, 0).is_err());
    assert!(mask_freeze_allocate(10, 1, 0.0, 0).is_err());
    let m = mask_freeze_allocate(10, 1, 0.2, 0).unwrap();
    assert!(m.mask.iter().all(|&x| x == 1.0));
}

#[test]
fn memory_from_basis_respects_cap() {
    let q = DMatrix::<f64>::identity(4, 3);
    let basis = OrthoBasis::from_orthonormal(q).unwrap();
    assert!(ProjectionMemory::from_basis(basis.clone(), 2).is_err());
    let mem = ProjectionMemory::from_basis(basis, 3).unwrap();
    assert_eq!(mem.violation(&[0.0, 0.0, 0.0, 5.0]), 0.0);
    assert_eq!(mem.violation(&[0.0, 2.0, 0.0, 5.0]), 2.0);
}
