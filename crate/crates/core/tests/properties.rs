use std::ops::ControlFlow;

use proptest::prelude::*;

use fedhet::algorithms::{run_with, RunConfig, ServerState};
use fedhet::bounds::{self, BoundInputs, CommonMode, TheoremId};
use fedhet::harness::{table2_with, table2_variants, Table2Options};
use fedhet::heterogeneity::{kappa, quad_lg_closed, quad_lh_closed, quad_ltilde_closed};
use fedhet::numkit::{fixed_order_mean, spectral_norm, Lane, ModelVector, Purpose, RngStream, SymMatrix};
use fedhet::problems::{gen_common_hessian, gen_hetero_quadratic, FederatedObjective, QuadraticFed, QuadraticWorker};

fn sym(n: usize, entries: &[f64]) -> SymMatrix {
    SymMatrix::from_fn(n, |i, j| entries[i * n + j])
}

fn vec_of(s: &mut RngStream, d: usize, scale: f64) -> ModelVector {
    ModelVector::from_vec((0..d).map(|_| scale * s.normal()).collect())
}

fn instance(seed: u64, d: usize, n: usize, delta: f64, floor: f64) -> QuadraticFed {
    gen_hetero_quadratic(d, n, delta, floor, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spectral_norm_is_even_and_homogeneous(
        n in 1usize..7,
        entries in prop::collection::vec(-5.0f64..5.0, 36),
        c in -10.0f64..10.0,
    ) {
        let m = sym(n, &entries);
        let a = spectral_norm(&m, 1e-12).unwrap();
        let b = spectral_norm(&m.scale(-1.0), 1e-12).unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * a.max(1e-300));
        let s = spectral_norm(&m.scale(c), 1e-12).unwrap();
        prop_assert!((s - c.abs() * a).abs() <= 1e-10 * (c.abs() * a).max(1e-300));
    }

    #[test]
    fn rng_streams_replay_across_thread_counts(seed in any::<u64>(), w in 0usize..100, r in 0usize..1000) {
        let lane = Lane::new(Purpose::GradientNoise, w, r, 3);
        let draw = || {
            let mut s = RngStream::new(seed, lane);
            (0..32).map(|_| s.normal().to_bits()).collect::<Vec<_>>()
        };
        let single = draw();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let parallel: Vec<Vec<u64>> = pool.install(|| {
            use rayon::prelude::*;
            (0..4).into_par_iter().map(|_| draw()).collect()
        });
        for p in parallel {
            prop_assert_eq!(&p, &single);
        }
    }

    #[test]
    fn mean_of_copies_is_exact(v in prop::collection::vec(-1e6f64..1e6, 1..10), n in 1usize..50) {
        let v = ModelVector::from_vec(v);
        let copies = vec![v.clone(); n];
        prop_assert_eq!(fixed_order_mean(&copies).unwrap(), v);
    }

    #[test]
    fn local_gradients_average_to_global(seed in 0u64..1000, d in 1usize..8, n in 2usize..6) {
        let fed = instance(seed, d, n, 0.5, -1.0);
        let mut s = RngStream::new(seed, Lane::new(Purpose::Estimator, 0, 0, 0));
        let x = vec_of(&mut s, d, 3.0);
        let locals: Vec<ModelVector> = (0..n).map(|i| fed.workers()[i].gradient(&x)).collect();
        let mean = fixed_order_mean(&locals).unwrap();
        let direct = fed.global_a().matvec(&x).add(fed.global_b());
        prop_assert!(mean.dist_sq(&direct).sqrt() <= 1e-10 * (1.0 + direct.norm()));
    }

    #[test]
    fn common_hessian_witness(seed in 0u64..1000, d in 1usize..10, n in 2usize..8) {
        let fed = gen_common_hessian(d, n, seed).unwrap();
        prop_assert_eq!(quad_lh_closed(&fed), 0.0);
        let mut s = RngStream::new(seed, Lane::new(Purpose::Estimator, 1, 0, 0));
        let x = vec_of(&mut s, d, 1.0);
        prop_assert!(fed.zeta_at(&x) > 0.0);
        prop_assert!(bounds::quad_fstar(&fed).unwrap().0.is_finite());
    }

    #[test]
    fn closed_form_orderings(seed in 0u64..1000, d in 1usize..8, n in 2usize..6, delta in 0.0f64..2.0, psd in any::<bool>()) {
        let fed = instance(seed, d, n, delta, if psd { 0.0 } else { -1.0 });
        let (lh, lg, lt) = (quad_lh_closed(&fed), quad_lg_closed(&fed), quad_ltilde_closed(&fed));
        let slack = 1e-10 * lt.max(1.0);
        prop_assert!(lg <= lt + slack);
        prop_assert!(lh <= 2.0 * lt + slack);
        if psd {
            prop_assert!(lh <= lt + slack);
        }
    }

    #[test]
    fn hessian_heterogeneity_inequality_is_pointwise(seed in 0u64..1000, d in 1usize..8, n in 2usize..6, scale in 0.01f64..100.0) {
        let fed = instance(seed, d, n, 0.8, -1.0);
        let lh = quad_lh_closed(&fed);
        let mut s = RngStream::new(seed, Lane::new(Purpose::Estimator, 2, 0, 0));
        let xs: Vec<ModelVector> = (0..n).map(|_| vec_of(&mut s, d, scale)).collect();
        let x_bar = fixed_order_mean(&xs).unwrap();
        let gs: Vec<ModelVector> = xs.iter().enumerate().map(|(i, x)| fed.local_gradient(i, x)).collect();
        let left = fixed_order_mean(&gs).unwrap().dist_sq(&fed.global_gradient(&x_bar));
        let spread = xs.iter().map(|x| x.dist_sq(&x_bar)).sum::<f64>() / n as f64;
        let right = lh * lh * spread;
        prop_assert!(left <= right + 1e-10 * right.max(1.0));
    }

    #[test]
    fn constants_scale_linearly(seed in 0u64..1000, c in 0.1f64..10.0) {
        let fed = instance(seed, 4, 3, 0.4, 0.1);
        let scaled = QuadraticFed::new(
            fed.workers()
                .iter()
                .map(|w| QuadraticWorker { a: w.a.scale(c), b: w.b.scale(c), c: w.c * c })
                .collect(),
            fed.provenance().clone(),
        )
        .unwrap();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * b.abs().max(1e-12);
        prop_assert!(close(quad_lh_closed(&scaled), c * quad_lh_closed(&fed)));
        prop_assert!(close(quad_lg_closed(&scaled), c * quad_lg_closed(&fed)));
        prop_assert!(close(quad_ltilde_closed(&scaled), c * quad_ltilde_closed(&fed)));
        let x = ModelVector::from_vec(vec![0.3, -0.1, 0.7, 1.0]);
        prop_assert!(close(scaled.zeta_at(&x), c * fed.zeta_at(&x)));
        prop_assert!((kappa(&scaled).unwrap() - kappa(&fed).unwrap()).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn rounds_start_from_the_server_model_and_gradient_deviation_holds(
        seed in 0u64..1000,
        steps in 1usize..6,
        sigma in 0.0f64..1.0,
    ) {
        let fed = instance(seed, 5, 4, 0.5, 0.05);
        let (lh, lg) = (quad_lh_closed(&fed), quad_lg_closed(&fed));
        let cfg = RunConfig::fedavg(0.02, 1.3, steps, 6).with_sigma(sigma).with_seed(seed);
        let mut prev: Option<ModelVector> = None;
        let mut ok = true;
        run_with(&fed, &cfg, ServerState::initial(ModelVector::zeros(5)), |t, d, s| {
            if let Some(p) = &prev {
                ok &= d.virtual_models[0] == *p;
            }
            ok &= d.steps[0].divergence == 0.0 && d.steps[0].drift == 0.0;
            for st in &d.steps {
                let rhs = 3.0 * (lh * lh + lg * lg) * st.divergence + 3.0 * t.zeta_sup_local * t.zeta_sup_local;
                ok &= st.deviation <= rhs * (1.0 + 1e-12);
            }
            prev = Some(s.x_bar.clone());
            ControlFlow::Continue(())
        })
        .unwrap();
        prop_assert!(ok);
    }
}

fn inputs_strategy() -> impl Strategy<Value = BoundInputs> {
    (
        (1e-3f64..10.0, 0.01f64..5.0, 0.0f64..3.0, 0.0f64..2.0, 0.0f64..2.0),
        (1usize..20, 1usize..20, 1usize..500),
        (1e-5f64..0.2, 0.1f64..5.0, 0.0f64..0.95, 0.01f64..2.0),
    )
        .prop_map(|((f_gap, l_g, l_h, sigma, zeta), (n, local_iters, rounds), (gamma, eta, beta, mu))| {
            BoundInputs {
                f_gap,
                l_g,
                l_h,
                l_tilde: l_g.max(l_h) * 1.2,
                sigma,
                zeta,
                n,
                m: n.div_ceil(2),
                local_iters,
                rounds,
                gamma,
                eta,
                mu: Some(mu),
                kappa: Some(beta),
                g_bound: Some(1.0 + zeta),
                tau: Some(0.1),
                beta: Some(beta),
                beta1: Some(0.9),
                beta2: Some(beta),
                x0_dist_sq: Some(f_gap),
                adam_k: None,
            }
        })
}

const THEOREMS: [TheoremId; 8] = [
    TheoremId::Main,
    TheoremId::Partial,
    TheoremId::QuadCommonLocal,
    TheoremId::QuadCommonMinibatch,
    TheoremId::QuadHetero,
    TheoremId::Momentum,
    TheoremId::Fedadam,
    TheoremId::StronglyConvex,
];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn bounds_do_not_increase_with_rounds(p in inputs_strategy(), extra in 1usize..1000) {
        for t in THEOREMS {
            let a = bounds::evaluate(t, &p).unwrap().rhs_value;
            let b = bounds::evaluate(t, &BoundInputs { rounds: p.rounds + extra, ..p.clone() }).unwrap().rhs_value;
            prop_assert!(b <= a * (1.0 + 1e-12), "{t}: {b} > {a}");
        }
    }

    #[test]
    fn worst_case_constants_dominate(p in inputs_strategy()) {
        let lt = p.l_tilde;
        let sharp = bounds::bound_main(&p).unwrap().rhs_value;
        let coarse = bounds::bound_main(&BoundInputs { l_h: lt, l_g: lt, ..p.clone() }).unwrap().rhs_value;
        prop_assert!(sharp <= coarse * (1.0 + 1e-12));
    }

    #[test]
    fn local_to_minibatch_initialisation_ratio(p in inputs_strategy()) {
        let l = bounds::bound_quad_common(&p, CommonMode::Local).unwrap();
        let m = bounds::bound_quad_common(&p, CommonMode::Minibatch).unwrap();
        let ratio = l.terms[0].value / m.terms[0].value;
        prop_assert!((ratio * p.local_iters as f64 - 1.0).abs() < 1e-14);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn constraint_checkers_match_direct_evaluation(p in inputs_strategy()) {
        let (g, e, i, lg, lh) = (p.gamma, p.eta, p.local_iters as f64, p.l_g, p.l_h);
        let div = 1.0 / ((6.0 * (lh * lh + lg * lg)).sqrt() * i);
        let main = bounds::bound_main(&p).unwrap();
        let direct = g * e <= 1.0 / (2.0 * i * lg) && g <= 1.0 / (2.0 * 30f64.sqrt() * i * lg) && g <= div;
        prop_assert_eq!(main.all_constraints_pass(), direct);

        let part = bounds::bound_partial(&p).unwrap();
        let m = p.m as f64;
        let direct = g * e <= m / (16.0 * i * lg)
            && g <= 1.0 / (3.0 * 10f64.sqrt() * lg * i)
            && g <= div
            && g <= 1.0 / (10.0 * 3f64.sqrt() * i * lg);
        prop_assert_eq!(part.all_constraints_pass(), direct);

        let beta = p.beta.unwrap();
        let mom = bounds::bound_momentum(&p).unwrap();
        let direct = g <= (1.0 - beta).powi(2) / (lg * (1.0 + beta))
            && g <= (1.0 - beta) / ((18.0 * (lg * lg + lh * lh)).sqrt() * i);
        prop_assert_eq!(mom.all_constraints_pass(), direct);

        let common = bounds::bound_quad_common(&p, CommonMode::Local).unwrap();
        prop_assert_eq!(common.all_constraints_pass(), g <= 1.0 / lg && e == 1.0);
    }
}

#[test]
fn table_rows_replay_exactly() {
    let opts = Table2Options {
        d: 10,
        n: 4,
        max_rounds: 2000,
        target_gap: 0.5,
        ..Default::default()
    };
    let variants: Vec<_> = table2_variants().into_iter().filter(|v| v.local_iters == 10).collect();
    let a = table2_with(&opts, &[3, 4], &variants).unwrap();
    let b = table2_with(&opts, &[3, 4], &variants).unwrap();
    assert_eq!(a, b);
}
