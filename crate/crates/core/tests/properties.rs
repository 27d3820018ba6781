//! Property tests over randomly drawn models, matrices and grids.

use proptest::prelude::*;
use resnetlab::bounds::{empirical_sup_distance, mlp_bound_explicit, within_bound, MlpBoundInputs};
use resnetlab::gradients::{batch_loss, flatten_params, input_gradient, param_gradient, Loss};
use resnetlab::io::{model_from_json_str, model_to_json_string};
use resnetlab::models::{euler_discretize, integrate_node, OdeMethod};
use resnetlab::numerics::{inf_norm_mat, singular_values, solve_det_shift, spectral_summary, BoxDomain};
use resnetlab::regimes::{classify_regime, compute_constants, construct_critical_point, Verdict};
use resnetlab::rng::{derive_seed, rng_for, SeedStream};
use resnetlab::sampling::{autonomous_spec, corpus_model, random_matrix, random_model, MapShape, ModelSampler};
use resnetlab::topology::{
    critical_point_search, evaluate_grid, label_components, level_components, tunnel_check_1d, GridDomain, Side,
    TunnelVerdict,
};
use resnetlab::training::{make_dataset, train, xavier_init, DatasetKind, Skeleton, TrainConfig};
use resnetlab::{Activation, AffineSigmaMap, Mat64, ResNetModel, Vec64};

fn sampler(n_in: usize, n_hid: usize, depth: usize, range: f64, act: Activation) -> ModelSampler {
    ModelSampler {
        n_in,
        n_hid,
        n_out: 1,
        width: n_hid,
        depth,
        act,
        weight_range: range,
        eps: 1.0,
        delta: 1.0,
        input: MapShape::Activated,
        output: MapShape::Activated,
    }
}

fn point(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = rng_for(seed, 99);
    (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect()
}

fn act_strategy() -> impl Strategy<Value = Activation> {
    prop_oneof![Just(Activation::Tanh), Just(Activation::Sigmoid)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn inf_norm_is_submultiplicative(seed in any::<u64>(), r in 1usize..6, k in 1usize..6, c in 1usize..6) {
        let mut rng = rng_for(seed, 0);
        let a = random_matrix(&mut rng, r, k, 3.0);
        let b = random_matrix(&mut rng, k, c, 3.0);
        let ab = inf_norm_mat(&a.matmul(&b)).unwrap();
        prop_assert!(ab <= inf_norm_mat(&a).unwrap() * inf_norm_mat(&b).unwrap() * (1.0 + 1e-14));
    }

    #[test]
    fn spectral_summary_brackets_random_directions(seed in any::<u64>(), n in 1usize..6) {
        let mut rng = rng_for(seed, 0);
        let a = random_matrix(&mut rng, n, n, 2.0);
        let s = spectral_summary(&a).unwrap();
        prop_assert!(s.sigma_min <= s.sigma_max);
        prop_assert!(s.abs_det <= s.sigma_max.powi(n as i32) * (1.0 + 1e-10) + 1e-300);
        for _ in 0..200 {
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-9 {
                continue;
            }
            let av = a.matvec(&v);
            let r = av.norm2() / norm;
            prop_assert!(r <= s.sigma_max * (1.0 + 1e-10));
            prop_assert!(r >= s.sigma_min * (1.0 - 1e-10));
        }
    }

    #[test]
    fn det_shift_vanishes_on_companion_roots(roots in prop::collection::vec(-3.0f64..3.0, 1..5)) {
        // Companion matrix of Π (x − r_i); det(J + sI) = 0 iff −s is a root.
        let n = roots.len();
        let mut coeffs = vec![1.0];
        for &r in &roots {
            let mut next = vec![0.0; coeffs.len() + 1];
            for (i, &c) in coeffs.iter().enumerate() {
                next[i] += c;
                next[i + 1] -= r * c;
            }
            coeffs = next;
        }
        let mut j = Mat64::zeros(n, n);
        for i in 1..n {
            j[(i, i - 1)] = 1.0;
        }
        for i in 0..n {
            j[(i, n - 1)] = -coeffs[n - i];
        }
        let scale = spectral_summary(&j).unwrap().sigma_max.max(1.0).powi(n as i32);
        for &r in &roots {
            prop_assert!(solve_det_shift(&j, -r).unwrap() <= 1e-9 * scale);
        }
        let off = roots.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1.0;
        prop_assert!(solve_det_shift(&j, -off).unwrap() > 0.0);
    }

    #[test]
    fn activation_constants_hold(y in -40.0f64..40.0, act in act_strategy()) {
        prop_assert!(act.eval(y).abs() <= act.s_sigma());
        let d = act.deriv(y);
        prop_assert!(d <= act.k_sigma() + 1e-15);
        prop_assert!(d > 0.0 || y.abs() > 19.0);
        let h = 1e-6;
        let fd = (act.eval(y + h) - act.eval(y - h)) / (2.0 * h);
        prop_assert!(fd <= act.k_sigma() + 1e-9);
    }

    #[test]
    fn unrolled_map_matches_forward(seed in any::<u64>(), depth in 1usize..=8, n_in in 1usize..=4, n_hid in 1usize..=4, act in act_strategy()) {
        let mut rng = rng_for(seed, 0);
        let mut s = sampler(n_in, n_hid, depth, 2.0, act);
        s.eps = rng.random_range(0.0..=1.5);
        s.delta = rng.random_range(0.0..=1.5);
        let m = random_model(&mut rng, &s).unwrap();
        let x = point(seed, n_in);
        let a = m.forward(&x).unwrap().0;
        let b = m.forward_unrolled(&x).unwrap();
        prop_assert!(a.sub(&b).norm_inf() < 1e-12 * a.norm_inf().max(1.0));
    }

    #[test]
    fn euler_discretization_is_explicit_euler(seed in any::<u64>(), l in 1usize..=40, n_hid in 1usize..=3, act in act_strategy()) {
        let mut rng = rng_for(seed, 0);
        let spec = autonomous_spec(&mut rng, 1, n_hid, 2, act).unwrap();
        let m = euler_discretize(&spec, l).unwrap();
        for x in [-0.7, 0.0, 0.4] {
            let a = m.eval_scalar(&[x]).unwrap();
            let b = integrate_node(&spec, &[x], l, OdeMethod::Euler).unwrap()[0];
            prop_assert!((a - b).abs() < 1e-14 * a.abs().max(1.0));
        }
    }

    #[test]
    fn layer_jacobian_is_skip_plus_scaled_branch(seed in any::<u64>()) {
        let mut rng = rng_for(seed, 0);
        let m = corpus_model(&mut rng).unwrap();
        let g = input_gradient(&m, &point(seed, m.n_in())).unwrap();
        prop_assert_eq!(g.per_layer.len(), m.depth());
        prop_assert!(g.grad.is_finite());
        for lj in &g.per_layer {
            let mut expect = lj.raw_df.scaled(m.delta);
            for i in 0..expect.rows() {
                expect[(i, i)] += m.eps;
            }
            prop_assert!(lj.d.max_abs_diff(&expect) <= 1e-14);
        }
    }

    #[test]
    fn gradient_is_the_jacobian_chain(seed in any::<u64>()) {
        let mut rng = rng_for(seed, 0);
        let m = corpus_model(&mut rng).unwrap();
        let x = point(seed, m.n_in());
        let g = input_gradient(&m, &x).unwrap();
        // ∂λ̃ · Π D_l · ∂λ rebuilt from the forward trace.
        let (_, trace) = m.forward(&x).unwrap();
        let mut j = m.input.jacobian(&x);
        for lj in &g.per_layer {
            j = lj.d.matmul(&j);
        }
        let j = m.output.jacobian(&trace.states[m.depth()]).matmul(&j);
        let scale = g.grad.norm_inf().max(1.0);
        for (a, b) in g.grad.iter().zip(j.row(0)) {
            prop_assert!((a - b).abs() <= 1e-13 * scale);
        }
    }

    #[test]
    fn output_scale_scales_gradient(seed in any::<u64>(), c in -4.0f64..4.0) {
        let mut rng = rng_for(seed, 0);
        let m = corpus_model(&mut rng).unwrap();
        let mut scaled = m.clone();
        scaled.output.w_tilde = scaled.output.w_tilde.scaled(c);
        let x = point(seed, m.n_in());
        let g = input_gradient(&m, &x).unwrap().grad;
        let gs = input_gradient(&scaled, &x).unwrap().grad;
        for (a, b) in g.iter().zip(gs.iter()) {
            prop_assert!((c * a - b).abs() <= 1e-12 * c.abs() * g.norm_inf().max(1.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn regime_constants_are_ordered(seed in any::<u64>()) {
        let mut rng = rng_for(seed, 0);
        let m = corpus_model(&mut rng).unwrap();
        let c = compute_constants(&m, &BoxDomain::cube(m.n_in(), -1.0, 1.0).unwrap()).unwrap();
        prop_assert!(0.0 <= c.nu_min && c.nu_min <= c.nu_max);
        prop_assert!(0.0 <= c.k_sigma && c.k_sigma <= c.k_sigma_upper);
    }

    #[test]
    fn ratio_rescaling_keeps_alpha_and_nu(seed in any::<u64>(), c in 0.1f64..10.0) {
        let mut rng = rng_for(seed, 0);
        let mut m = random_model(&mut rng, &sampler(2, 2, 3, 1.0, Activation::Tanh)).unwrap();
        m.eps = rng.random_range(0.05..1.0);
        m.delta = rng.random_range(0.05..1.0);
        let dom = BoxDomain::cube(2, -1.0, 1.0).unwrap();
        let a = classify_regime(&m, &dom);
        prop_assume!(a.is_ok());
        let a = a.unwrap();
        let s = ResNetModel { eps: c * m.eps, delta: c * m.delta, ..m.clone() };
        // Hidden-state magnitudes do change, so λ̃ may saturate past rank.
        let b = classify_regime(&s, &dom);
        prop_assume!(b.is_ok());
        let b = b.unwrap();
        prop_assert!((a.constants.alpha - b.constants.alpha).abs() <= 1e-12 * a.constants.alpha);
        prop_assert_eq!(a.constants.nu_max, b.constants.nu_max);
        prop_assert_eq!(a.constants.nu_min, b.constants.nu_min);
        prop_assert_eq!(a.node_side_excluded, b.node_side_excluded);
    }

    #[test]
    fn shrinking_branches_shrinks_nu(seed in any::<u64>(), c in 0.05f64..1.0) {
        let mut rng = rng_for(seed, 0);
        let depth = rng.random_range(1..=3);
        let mut m = random_model(&mut rng, &sampler(2, 2, depth, 1.0, Activation::Tanh)).unwrap();
        m.delta = 0.1;
        let dom = BoxDomain::cube(2, -1.0, 1.0).unwrap();
        let a = classify_regime(&m, &dom).unwrap();
        let mut s = m.clone();
        for l in &mut s.layers {
            l.w_tilde = l.w_tilde.scaled(c);
        }
        let b = classify_regime(&s, &dom).unwrap();
        prop_assert!(b.constants.nu_max <= c * a.constants.nu_max * (1.0 + 1e-10));
        prop_assert!(b.constants.nu_min <= c * a.constants.nu_min * (1.0 + 1e-10) + 1e-300);
        if a.node_side_excluded {
            prop_assert!(b.node_side_excluded);
        }
    }

    #[test]
    fn planted_layer_has_zero_derivative(seed in any::<u64>()) {
        let mut rng = rng_for(seed, 0);
        let alpha = rng.random_range(0.2f64.ln()..=5f64.ln()).exp();
        let w = -(1.0 + rng.random_range(0.0..=3.0)) / alpha;
        let target = rng.random_range(-0.99..=0.99);
        let prefix_layer = resnetlab::sampling::random_layer(&mut rng, 1, 1, 1.0, Activation::Tanh).unwrap();
        let prefix = ResNetModel::new(1.0, alpha, AffineSigmaMap::identity(1), vec![prefix_layer], AffineSigmaMap::identity(1)).unwrap();
        let cc = construct_critical_point(alpha, w, target, &prefix).unwrap();
        prop_assert!(cc.w <= -1.0 / alpha);
        for plus in [true, false] {
            prop_assert!(cc.layer_derivative(1.0, plus).abs() < 1e-12);
            let m = cc.assemble(&prefix, 1.0, plus).unwrap();
            let g = input_gradient(&m, &[target]).unwrap();
            prop_assert!(g.per_layer[1].d[(0, 0)].abs() < 1e-12);
            prop_assert!(g.grad[0].abs() < 1e-12 * g.per_layer[0].d[(0, 0)].abs().max(1.0));
        }
        // A layered prefix cannot be re-run at another skip parameter.
        prop_assert!(cc.assemble(&prefix, 0.5, true).is_err());
    }

    #[test]
    fn lattice_cells_partition(seed in any::<u64>(), c in -0.5f64..1.5) {
        let mut rng = rng_for(seed, 0);
        let m = random_model(&mut rng, &sampler(2, 2, 2, 2.0, Activation::Tanh)).unwrap();
        let g = GridDomain::cube(2, -1.0, 1.0, 41).unwrap();
        let f = evaluate_grid(&|x: &[f64]| m.eval_scalar(x), &g).unwrap();
        let lab = label_components(&f, &g, c).unwrap();
        let r = &lab.report;
        let total: usize = r.components_sub.iter().chain(&r.components_super).map(|k| k.cell_count).sum::<usize>() + r.band_cells;
        prop_assert_eq!(total, g.len());
        for k in r.components_sub.iter().chain(&r.components_super) {
            prop_assert_eq!(k.bounded, !k.touches_boundary);
        }
        let band = lab.sides.iter().filter(|s| matches!(s, Side::Band)).count();
        prop_assert_eq!(band, r.band_cells);
    }

    #[test]
    fn search_reports_found_only_below_tolerance(seed in any::<u64>()) {
        let mut rng = rng_for(seed, 0);
        let m = random_model(&mut rng, &sampler(2, 2, 2, 2.0, Activation::Tanh)).unwrap();
        let g = GridDomain::cube(2, -1.0, 1.0, 31).unwrap();
        let s = critical_point_search(&m, &g).unwrap();
        if s.found {
            prop_assert!(s.grad_norm < 1e-8);
        }
        prop_assert!(g.bounds().contains(&s.location));
    }

    #[test]
    fn monotone_layers_give_boundary_levels(seed in any::<u64>(), t in 0.05f64..0.95) {
        // ε = 1 and δ‖W̃W‖ < 1 keeps every scalar layer derivative positive.
        let mut rng = rng_for(seed, 0);
        let mut s = sampler(1, 1, rng.random_range(1..=4), 1.0, Activation::Tanh);
        s.delta = 0.9;
        s.input = MapShape::Affine;
        s.output = MapShape::Affine;
        let m = random_model(&mut rng, &s).unwrap();
        let f = |x: &[f64]| m.eval_scalar(x);
        let (a, b) = (f(&[-1.0]).unwrap(), f(&[1.0]).unwrap());
        let c = a.min(b) + t * (a - b).abs();
        prop_assert!(tunnel_check_1d(&f, -1.0, 1.0, c, 401).unwrap());
    }

    #[test]
    fn json_round_trip_is_exact(seed in any::<u64>()) {
        let mut rng = rng_for(seed, 0);
        let m = corpus_model(&mut rng).unwrap();
        let back = model_from_json_str(&model_to_json_string(&m).unwrap()).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn seed_streams_do_not_shift(master in any::<u64>(), k in 0u64..50) {
        let mut s = SeedStream::new(master);
        let issued: Vec<u64> = (0..=k).map(|_| s.next_seed()).collect();
        prop_assert_eq!(issued[k as usize], derive_seed(master, k));
    }

    #[test]
    fn mlp_bound_certifies_random_models(seed in any::<u64>(), eps in 0.001f64..0.5) {
        let mut rng = rng_for(seed, 0);
        let mut s = sampler(2, rng.random_range(1..=2), rng.random_range(1..=5), 1.0, Activation::Tanh);
        s.eps = eps;
        s.width = s.n_hid;
        let m = random_model(&mut rng, &s).unwrap();
        let g = GridDomain::cube(2, -1.0, 1.0, 21).unwrap();
        let mlp = m.to_mlp();
        let emp = empirical_sup_distance(&|x: &[f64]| m.eval(x), &|x: &[f64]| mlp.eval(x), &g).unwrap();
        let theo = mlp_bound_explicit(&MlpBoundInputs::from_model(&m, &g.bounds())).unwrap();
        prop_assert!(within_bound(emp, theo), "emp {} theo {}", emp, theo);
    }
}

#[test]
fn singular_values_of_known_matrix() {
    let a = Mat64::from_rows(&[vec![3.0, 0.0], vec![0.0, -2.0]]).unwrap();
    let s = singular_values(&a).unwrap();
    assert!((s[0] - 3.0).abs() < 1e-14 && (s[1] - 2.0).abs() < 1e-14);
}

#[test]
fn circle_verdict_is_stable_under_refinement() {
    let f = |x: &[f64]| Ok(x[0] * x[0] + x[1] * x[1] - 0.5);
    for res in [201, 401] {
        let g = GridDomain::cube(2, -2.5, 2.5, res).unwrap();
        let r = level_components(&evaluate_grid(&f, &g).unwrap(), &g, 0.5).unwrap();
        assert_eq!(r.tunnel_verdict, TunnelVerdict::BoundedComponentExists);
    }
}

#[test]
fn training_is_deterministic() {
    let data = make_dataset(DatasetKind::Circle2D, 200, 3).unwrap();
    let skel = Skeleton::classifier2d(1.0, 1.0, 3, 2);
    let cfg = TrainConfig { epochs: 5, batch_size: 64, ..TrainConfig::classification(9, true) };
    let m0 = xavier_init(&skel, 9).unwrap();
    let (a, ra) = train(&m0, &data, &cfg).unwrap();
    let (b, rb) = train(&m0, &data, &cfg).unwrap();
    assert_eq!(ra.losses, rb.losses);
    assert_eq!(flatten_params(&a), flatten_params(&b));
    assert!(ra.sign_flip_fraction >= 0.0 && ra.sign_flip_fraction <= 1.0);
}

#[test]
fn exact_interpolant_has_zero_mse_gradient() {
    let mut rng = rng_for(4, 0);
    let m = corpus_model(&mut rng).unwrap();
    let batch: Vec<(Vec64, f64)> = (0..16)
        .map(|k| {
            let x = point(k, m.n_in());
            let y = m.eval_scalar(&x).unwrap();
            (Vec64(x), y)
        })
        .collect();
    let pg = param_gradient(&m, &batch, Loss::Mse).unwrap();
    assert_eq!(pg.loss, 0.0);
    assert!(pg.grad.iter().all(|&g| g == 0.0));
    assert_eq!(batch_loss(&m, &batch, Loss::Mse).unwrap(), 0.0);
}

#[test]
fn node_side_models_have_no_critical_points() {
    // Small sweep of the headline property; the acceptance target runs 400.
    let g = GridDomain::cube(1, -1.0, 1.0, 201).unwrap();
    let mut checked = 0;
    for i in 0..40 {
        let mut rng = rng_for(8, i);
        let mut m = random_model(&mut rng, &sampler(1, 1, 3, 1.0, Activation::Tanh)).unwrap();
        m.input = AffineSigmaMap::affine(Mat64::from_rows(&[vec![1.0]]).unwrap(), Vec64(vec![0.0])).unwrap();
        m.delta = 0.2;
        let r = classify_regime(&m, &g.bounds()).unwrap();
        if r.verdict == Verdict::NoCriticalPointsNodeSide {
            checked += 1;
            assert!(!critical_point_search(&m, &g).unwrap().found);
        }
    }
    assert!(checked > 10, "only {checked} node-side models");
}
