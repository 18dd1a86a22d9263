mod common;

use common::{cosine_cost, normal, permutation_optimum, simplex};
use rand::Rng as _;
use univip_core::ot::{instance_loss, marginal_weights, sinkhorn, sinkhorn_traced, SinkhornConfig};
use univip_core::rng::rng_from;
use univip_core::tensor::{finite_diff_check, Graph, Tensor};

#[test]
fn cost_matrix_matches_pairwise_cosines() {
    let mut rng = rng_from(3);
    for _ in 0..50 {
        let k = rng.gen_range(1..=6);
        let d = rng.gen_range(2..=10);
        let o: Vec<f64> = (0..k * d).map(|_| normal(&mut rng)).collect();
        let t: Vec<f64> = (0..k * d).map(|_| normal(&mut rng)).collect();
        let mut g = Graph::<f64>::new();
        let ov = g.constant(Tensor::from_f64(&[k, d], &o).unwrap()).unwrap();
        let tv = g.constant(Tensor::from_f64(&[k, d], &t).unwrap()).unwrap();
        let c = univip_core::ot::cost_matrix(&mut g, ov, tv).unwrap();
        for m in 0..k {
            for n in 0..k {
                let (a, b) = (&o[m * d..(m + 1) * d], &t[n * d..(n + 1) * d]);
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                let want = 1.0 - dot / (na * nb);
                let got = g.value(c).data()[m * k + n];
                assert!((got - want).abs() < 1e-12);
                assert!((0.0..=2.0 + 1e-12).contains(&got));
            }
        }
    }
}

#[test]
fn feasible_and_nonnegative_on_random_problems() {
    let cfg = SinkhornConfig::default();
    let mut rng = rng_from(11);
    for _ in 0..200 {
        let k = rng.gen_range(1..=8);
        let c = cosine_cost(k, 16, &mut rng);
        let (b, a) = (simplex(k, &mut rng), simplex(k, &mut rng));
        let p = sinkhorn(&c, &b, &a, &cfg).unwrap();
        assert!(p.converged, "k={k} after {} iterations", p.iterations);
        assert!(p.data().iter().all(|&x| x >= 0.0));
        for (r, w) in p.row_sums().iter().zip(&b) {
            assert!((r - w).abs() < 1e-6);
        }
        for (s, w) in p.col_sums().iter().zip(&a) {
            assert!((s - w).abs() < 1e-6);
        }
    }
}

#[test]
fn dual_objective_never_decreases() {
    let mut rng = rng_from(12);
    for _ in 0..100 {
        let k = rng.gen_range(2..=8);
        let c = cosine_cost(k, 8, &mut rng);
        let (b, a) = (simplex(k, &mut rng), simplex(k, &mut rng));
        let eps = [0.01, 0.05, 0.2][rng.gen_range(0..3)];
        let cfg = SinkhornConfig {
            epsilon: eps,
            ..SinkhornConfig::default()
        };
        let (_, trace) = sinkhorn_traced(&c, &b, &a, &cfg).unwrap();
        for w in trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-12 * w[0].abs().max(1.0), "{} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn near_optimal_against_permutations() {
    let cfg = SinkhornConfig {
        epsilon: 0.01,
        max_iter: 10_000,
        tol: 1e-9,
    };
    let mut rng = rng_from(13);
    for _ in 0..50 {
        let k = rng.gen_range(2..=5);
        let c = cosine_cost(k, 8, &mut rng);
        let uniform = vec![1.0 / k as f64; k];
        let p = sinkhorn(&c, &uniform, &uniform, &cfg).unwrap();
        let best = permutation_optimum(&c);
        assert!(p.cost(&c) <= best * 1.01 + 1e-12, "{} vs {best}", p.cost(&c));
    }
}

#[test]
fn instance_loss_is_bounded_and_its_gradient_checks() {
    let mut rng = rng_from(14);
    for _ in 0..100 {
        let k = rng.gen_range(1..=5);
        let d = rng.gen_range(2..=6);
        let o = Tensor::from_f64(&[k, d], &(0..k * d).map(|_| normal(&mut rng)).collect::<Vec<_>>()).unwrap();
        let t = Tensor::from_f64(&[k, d], &(0..k * d).map(|_| normal(&mut rng)).collect::<Vec<_>>()).unwrap();
        let scene: Vec<Tensor<f64>> = (0..4)
            .map(|_| Tensor::from_f64(&[d], &(0..d).map(|_| normal(&mut rng)).collect::<Vec<_>>()).unwrap())
            .collect();
        let mw = marginal_weights(&o, &t, [&scene[0], &scene[1]], [&scene[2], &scene[3]]).unwrap();
        let mut g = Graph::<f64>::new();
        let ov = g.constant(o.clone()).unwrap();
        let tv = g.constant(t.clone()).unwrap();
        let c = univip_core::ot::cost_matrix(&mut g, ov, tv).unwrap();
        let plan = sinkhorn(g.value(c), &mw.supply, &mw.demand, &SinkhornConfig::default()).unwrap();
        let l = instance_loss(&mut g, ov, tv, &plan).unwrap();
        assert!(g.value(l).data()[0].abs() <= 1.0 + 1e-9);

        let report = finite_diff_check(
            |g, p| {
                let tv = g.constant(t.clone())?;
                instance_loss(g, p[0], tv, &plan)
            },
            std::slice::from_ref(&o),
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");

        // no gradient reaches the target side
        let mut g = Graph::<f64>::new();
        let ov = g.param(o).unwrap();
        let tv = g.param(t).unwrap();
        let l = instance_loss(&mut g, ov, tv, &plan).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(tv).is_none_or(|gr| gr.data().iter().all(|&x| x == 0.0)));
    }
}
