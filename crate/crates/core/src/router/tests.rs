use proptest::prelude::*;
use rand::Rng as _;

use super::*;
use crate::matching::ClassHierarchy;
use crate::rng::{self, Rng};

fn randn(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
}

fn params(lambda: f64, tau: f64) -> ScoringParams<f64> {
    ScoringParams {
        lambda,
        tau,
        routing: Routing::Learned,
    }
}

struct Instance {
    state: RouterState<f64>,
    xs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    hier: Vec<HierarchyEmbeddings<f64>>,
    templates: Vec<Vec<Vec<f64>>>,
}

impl Instance {
    fn random(seed: u64, b: usize, d: usize, classes: usize, n: usize) -> Self {
        let mut r = rng::stream(seed, "test/router-instance");
        let mut state = RouterState::new(b, d);
        state.w_r = Mat::new(b, d, randn(&mut r, b * d)).unwrap();
        let noise = Mat::new(d, d, randn(&mut r, d * d)).unwrap();
        state.w_a.add_scaled(0.3, &noise);
        let xs: Vec<Vec<f64>> = (0..n).map(|_| randn(&mut r, d)).collect();
        let labels = (0..n).map(|i| (i * 7 + seed as usize) % classes).collect();
        let hier = (0..n)
            .map(|_| HierarchyEmbeddings {
                layers: (0..b).collect(),
                classes: (0..classes)
                    .map(|c| ClassHierarchy {
                        class: c,
                        h: Mat::new(b, d, randn(&mut r, b * d)).unwrap(),
                        selections: vec![],
                    })
                    .collect(),
            })
            .collect();
        let templates = (0..n)
            .map(|_| (0..classes).map(|_| randn(&mut r, d)).collect())
            .collect();
        Instance {
            state,
            xs,
            labels,
            hier,
            templates,
        }
    }

    fn batch(&self) -> Vec<Example<'_, f64>> {
        (0..self.xs.len())
            .map(|i| Example {
                x_final: &self.xs[i],
                label: self.labels[i],
                hierarchy: &self.hier[i],
                templates: &self.templates[i],
            })
            .collect()
    }

    /// Independent forward pass: plain loops, no shared helpers.
    fn loss(&self, w_r: &Mat<f64>, w_a: &Mat<f64>, lambda: f64, tau: f64) -> f64 {
        let mut total = 0.0;
        for (i, x) in self.xs.iter().enumerate() {
            let (b, d) = w_r.shape();
            let r: Vec<f64> = (0..b).map(|l| (0..d).map(|j| w_r[(l, j)] * x[j]).sum()).collect();
            let mx = r.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = r.iter().map(|v| (v - mx).exp()).sum();
            let beta: Vec<f64> = r.iter().map(|v| (v - mx).exp() / z).collect();
            let q: Vec<f64> = (0..d).map(|a| (0..d).map(|j| w_a[(a, j)] * x[j]).sum()).collect();
            let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            let logits: Vec<f64> = self.hier[i]
                .classes
                .iter()
                .zip(&self.templates[i])
                .map(|(c, e)| {
                    let m: Vec<f64> = (0..d)
                        .map(|j| {
                            let ht: f64 = (0..b).map(|l| beta[l] * c.h[(l, j)]).sum();
                            lambda * ht + (1.0 - lambda) * e[j]
                        })
                        .collect();
                    let mn = m.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let qm: f64 = q.iter().zip(&m).map(|(a, b)| a * b).sum();
                    qm / (qn * mn) / tau
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
            let lse = mx + logits.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += lse - logits[self.labels[i]];
        }
        total / self.xs.len() as f64
    }
}

fn fd_grad(inst: &Instance, which: usize, lambda: f64, tau: f64) -> Mat<f64> {
    let h = 1e-5;
    let base = if which == 0 { &inst.state.w_r } else { &inst.state.w_a };
    let mut g = Mat::zeros(base.rows(), base.cols());
    for idx in 0..base.as_slice().len() {
        let mut plus = base.clone();
        plus.as_mut_slice()[idx] += h;
        let mut minus = base.clone();
        minus.as_mut_slice()[idx] -= h;
        let (lp, lm) = if which == 0 {
            (
                inst.loss(&plus, &inst.state.w_a, lambda, tau),
                inst.loss(&minus, &inst.state.w_a, lambda, tau),
            )
        } else {
            (
                inst.loss(&inst.state.w_r, &plus, lambda, tau),
                inst.loss(&inst.state.w_r, &minus, lambda, tau),
            )
        };
        g.as_mut_slice()[idx] = (lp - lm) / (2.0 * h);
    }
    g
}

fn rel_err(a: &Mat<f64>, b: &Mat<f64>) -> f64 {
    a.sub(b).frobenius_norm() / b.frobenius_norm().max(1e-12)
}

#[test]
fn gradients_match_finite_differences() {
    let inst = Instance::random(11, 4, 8, 3, 2);
    let (lambda, tau) = (0.5, 0.5);
    let g = loss_and_grads(&inst.state, &params(lambda, tau), &inst.batch()).unwrap();
    assert!((g.loss - inst.loss(&inst.state.w_r, &inst.state.w_a, lambda, tau)).abs() < 1e-12);
    assert!(rel_err(&g.d_w_r, &fd_grad(&inst, 0, lambda, tau)) <= 1e-4);
    assert!(rel_err(&g.d_w_a, &fd_grad(&inst, 1, lambda, tau)) <= 1e-4);
}

#[test]
fn zero_lambda_cuts_router_gradient() {
    let inst = Instance::random(2, 3, 5, 3, 3);
    let g = loss_and_grads(&inst.state, &params(0.0, 0.1), &inst.batch()).unwrap();
    assert!(g.d_w_r.as_slice().iter().all(|&x| x == 0.0));
    assert!(g.d_w_a.frobenius_norm() > 0.0);
}

#[test]
fn single_class_has_zero_loss_and_grads() {
    let inst = Instance::random(4, 3, 5, 1, 2);
    let g = loss_and_grads(&inst.state, &params(0.5, 0.1), &inst.batch()).unwrap();
    assert_eq!(g.loss, 0.0);
    assert!(g.d_w_r.as_slice().iter().chain(g.d_w_a.as_slice()).all(|&x| x == 0.0));
}

#[test]
fn uniform_routing_has_no_router_gradient() {
    let inst = Instance::random(5, 3, 5, 3, 2);
    let p = ScoringParams {
        routing: Routing::Uniform,
        ..params(0.5, 0.2)
    };
    let g = loss_and_grads(&inst.state, &p, &inst.batch()).unwrap();
    assert!(g.d_w_r.as_slice().iter().all(|&x| x == 0.0));
}

#[test]
fn loss_errors() {
    let inst = Instance::random(6, 2, 4, 2, 1);
    assert!(loss_and_grads(&inst.state, &params(0.5, 0.1), &[]).is_err());
    let mut bad = inst.batch();
    bad[0].label = 5;
    assert!(loss_and_grads(&inst.state, &params(0.5, 0.1), &bad).is_err());
    let nan = vec![f64::NAN; 4];
    let mut bad = inst.batch();
    bad[0].x_final = &nan;
    let err = loss_and_grads(&inst.state, &params(0.5, 0.1), &bad).unwrap_err();
    assert!(err.to_string().contains("batch index 0"), "{err}");
}

#[test]
fn route_cases() {
    let s = RouterState::<f64>::new(3, 4);
    assert_eq!(route(&s, &[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![1.0 / 3.0; 3]);
    let mut s2 = s.clone();
    s2.w_r.row_mut(1).copy_from_slice(&[1e4, 0.0, 0.0, 0.0]);
    let b = route(&s2, &[1.0, 0.0, 0.0, 0.0]).unwrap();
    assert!(b[1] > 1.0 - 1e-12);
    assert!(route(&s, &[1.0]).is_err());

    let mut r = rng::stream(8, "test/route");
    let mut s3 = s.clone();
    s3.w_r = Mat::new(3, 4, randn(&mut r, 12)).unwrap();
    let x = randn(&mut r, 4);
    let logits: Vec<f64> = (0..3).map(|l| (0..4).map(|j| s3.w_r[(l, j)] * x[j]).sum()).collect();
    let z: f64 = logits.iter().map(|v| v.exp()).sum();
    for (b, l) in route(&s3, &x).unwrap().iter().zip(&logits) {
        assert!((b - l.exp() / z).abs() < 1e-14);
    }
}

#[test]
fn fuse_cases() {
    let h = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    assert_eq!(fuse(&h, &[0.0, 1.0]).unwrap(), vec![0.0, 1.0]);
    let m = fuse(&h, &[0.5, 0.5]).unwrap();
    assert_eq!(m, vec![0.5, 0.5]);
    assert!((norm(&m) - 0.5f64.sqrt()).abs() < 1e-15);
    let same = Mat::from_rows(&[vec![0.3, 0.4], vec![0.3, 0.4]]).unwrap();
    let f: Vec<f64> = fuse(&same, &[0.2, 0.8]).unwrap();
    assert!((f[0] - 0.3).abs() < 1e-15 && (f[1] - 0.4).abs() < 1e-15);
    assert!(fuse(&h, &[1.0]).is_err());
}

#[test]
fn class_scores_cases() {
    let s = RouterState::<f64>::new(1, 2);
    let p = params(0.5, 0.01);
    assert_eq!(class_scores(&s, &p, &[1.0, 0.0], &[vec![0.0, 1.0]], &[vec![1.0, 0.0]]).unwrap(), vec![1.0]);
    let probs = class_scores(
        &s,
        &p,
        &[1.0, 0.0],
        &[vec![0.6, 0.8], vec![0.6, -0.8]],
        &[vec![0.6, 0.8], vec![0.6, -0.8]],
    )
    .unwrap();
    assert_eq!(probs, vec![0.5, 0.5]);
    let err = class_scores(&s, &params(0.5, 1.0), &[1.0, 0.0], &[vec![1.0, 0.0]], &[vec![-1.0, 0.0]]).unwrap_err();
    assert!(err.to_string().contains("class 0"));
}

#[test]
fn zero_shot_reduction() {
    let mut r = rng::stream(9, "test/zs");
    let s = RouterState::<f64>::new(2, 6);
    let tau = 0.07;
    let x = randn(&mut r, 6);
    let e: Vec<Vec<f64>> = (0..4).map(|_| randn(&mut r, 6)).collect();
    let h: Vec<Vec<f64>> = (0..4).map(|_| randn(&mut r, 6)).collect();
    let got = class_scores(&s, &params(0.0, tau), &x, &h, &e).unwrap();
    let cos: Vec<f64> = e
        .iter()
        .map(|ei| {
            let d: f64 = x.iter().zip(ei).map(|(a, b)| a * b).sum();
            d / (x.iter().map(|v| v * v).sum::<f64>().sqrt() * ei.iter().map(|v| v * v).sum::<f64>().sqrt())
        })
        .collect();
    let z: f64 = cos.iter().map(|c| (c / tau).exp()).sum();
    for (g, c) in got.iter().zip(&cos) {
        assert!((g - (c / tau).exp() / z).abs() <= 1e-12);
    }
}

#[test]
fn sgd_cases() {
    let inst = Instance::random(1, 2, 3, 2, 1);
    let zero = GradientPair {
        d_w_r: Mat::zeros(2, 3),
        d_w_a: Mat::zeros(3, 3),
        loss: 0.0,
    };
    let mut s = inst.state.clone();
    sgd_step(&mut s, &zero, 0.1, 5.0);
    assert_eq!(s, inst.state);
    let g = loss_and_grads(&inst.state, &params(0.5, 0.5), &inst.batch()).unwrap();
    let mut s = inst.state.clone();
    sgd_step(&mut s, &g, 0.0, 5.0);
    assert_eq!(s, inst.state);

    let mut s = RouterState::<f64>::new(1, 1);
    let g = GradientPair {
        d_w_r: Mat::new(1, 1, vec![0.25]).unwrap(),
        d_w_a: Mat::new(1, 1, vec![0.5]).unwrap(),
        loss: 0.0,
    };
    sgd_step(&mut s, &g, 1.0, f64::INFINITY);
    assert_eq!(s.w_r.as_slice(), &[-0.25]);
    assert_eq!(s.w_a.as_slice(), &[0.5]);

    let mut s = RouterState::<f64>::new(1, 1);
    let big = GradientPair {
        d_w_r: Mat::new(1, 1, vec![30.0]).unwrap(),
        d_w_a: Mat::new(1, 1, vec![40.0]).unwrap(),
        loss: 0.0,
    };
    sgd_step(&mut s, &big, 1.0, 5.0);
    assert!((s.w_r.as_slice()[0] + 3.0).abs() < 1e-12);
    assert!((s.w_a.as_slice()[0] - (1.0 - 4.0)).abs() < 1e-12);
}

#[test]
fn energy_rank_cases() {
    assert_eq!(energy_rank(&[3.0, 2.0], 0.6).unwrap(), 1);
    assert_eq!(energy_rank(&[3.0, 2.0], 0.7).unwrap(), 2);
    assert_eq!(energy_rank(&[3.0, 2.0, 1.0, 0.0], 1.0).unwrap(), 3);
    assert_eq!(energy_rank(&[1.0, 0.0, 0.0], 0.99).unwrap(), 1);
    assert!(energy_rank(&[0.0, 0.0], 0.5).is_err());
    assert!(energy_rank(&[1.0, 2.0], 0.5).is_err());
    assert!(energy_rank(&[1.0], 0.0).is_err());
}

#[test]
fn projection_cases() {
    let mut r = rng::stream(12, "test/proj");
    let w_old = Mat::new(3, 5, randn(&mut r, 15)).unwrap();
    let w_new = Mat::new(3, 5, randn(&mut r, 15)).unwrap();
    let p = projected_update(&w_old, &w_new, 0.5, 0.9).unwrap();
    assert!(p.w_proj.max_abs_diff(&w_new.scale(0.5)) <= 1e-12);

    let p = projected_update(&w_old, &w_new, 1.0, 1.0).unwrap();
    assert_eq!(p.retained_rank, Some(3));
    assert!(p.w_proj.max_abs_diff(&w_new) <= 1e-12);

    // rank one: columns of W_proj must be parallel to u
    let u = [1.0, 2.0, -2.0];
    let v = randn(&mut r, 5);
    let rank1 = Mat::from_fn(3, 5, |i, j| u[i] * v[j]);
    let p = projected_update(&rank1, &w_new, 1.0, 0.9).unwrap();
    assert_eq!(p.retained_rank, Some(1));
    let un: Vec<f64> = u.iter().map(|x| x / 3.0).collect();
    let explicit = Mat::from_fn(3, 3, |i, j| un[i] * un[j]);
    assert!(p.p_old.as_ref().unwrap().max_abs_diff(&explicit) < 1e-12);
    for j in 0..5 {
        let col = p.w_proj.column(j);
        let along = dot(&col, &un);
        for i in 0..3 {
            assert!((col[i] - along * un[i]).abs() < 1e-12);
        }
    }

    let zero = Mat::zeros(3, 5);
    let p = projected_update(&zero, &w_new, 0.9, 0.9).unwrap();
    assert_eq!(p.w_proj, w_new);
    assert!(p.p_old.is_none());
    assert!(projected_update(&Mat::zeros(2, 5), &w_new, 0.9, 0.9).is_err());
    assert!(projected_update(&w_old, &w_new, 1.5, 0.9).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let inst = Instance::random(3, 3, 4, 2, 1);
    let mut s = inst.state.clone();
    s.task_counter = 2;
    s.retained_rank = Some(2);
    s.p_old = Some(Mat::identity(3));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("router.json");
    s.save(&path).unwrap();
    assert_eq!(RouterState::<f64>::load(&path).unwrap(), s);
}

#[test]
fn scoring_config_toml() {
    let c: ScoringConfig = toml::from_str("lambda = 0.4\nlayer_subset = [0, 1]").unwrap();
    assert_eq!(c.k, 5);
    assert_eq!(c.tau, 0.01);
    assert_eq!(c.layer_subset, LayerSubset::Only(vec![0, 1]));
    assert!(toml::from_str::<ScoringConfig>("lamda = 0.4").is_err());
    assert!(ScoringConfig { lambda: 1.5, ..Default::default() }.validate().is_err());
    assert!(ScoringConfig { k: 0, ..Default::default() }.validate().is_err());
}

#[test]
fn generic_over_f32() {
    let mut s = RouterState::<f32>::new(2, 3);
    s.w_r.row_mut(0).copy_from_slice(&[1.0, 0.0, 0.0]);
    let b = route(&s, &[1.0f32, 0.0, 0.0]).unwrap();
    assert!((b.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    assert_eq!(energy_rank(&[3.0f32, 2.0], 0.6).unwrap(), 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gradients_match_fd_random_shapes(
        seed in 0u64..10_000,
        b in 1usize..7,
        d in 2usize..17,
        classes in 1usize..6,
        n in 1usize..5,
        lambda in 0.0f64..1.0,
    ) {
        let inst = Instance::random(seed, b, d, classes, n);
        let tau = 0.3;
        let g = loss_and_grads(&inst.state, &params(lambda, tau), &inst.batch()).unwrap();
        let fr = fd_grad(&inst, 0, lambda, tau);
        let fa = fd_grad(&inst, 1, lambda, tau);
        if fr.frobenius_norm() > 1e-8 {
            prop_assert!(rel_err(&g.d_w_r, &fr) <= 1e-4, "dW_r {}", rel_err(&g.d_w_r, &fr));
        } else {
            prop_assert!(g.d_w_r.frobenius_norm() <= 1e-8);
        }
        if fa.frobenius_norm() > 1e-8 {
            prop_assert!(rel_err(&g.d_w_a, &fa) <= 1e-4, "dW_a {}", rel_err(&g.d_w_a, &fa));
        } else {
            prop_assert!(g.d_w_a.frobenius_norm() <= 1e-8);
        }
    }

    #[test]
    fn route_on_simplex_and_row_shift_invariant(seed in 0u64..10_000, b in 1usize..6, d in 1usize..8) {
        let mut r = rng::stream(seed, "test/route-prop");
        let mut s = RouterState::<f64>::new(b, d);
        s.w_r = Mat::new(b, d, randn(&mut r, b * d)).unwrap();
        let x = randn(&mut r, d);
        let beta = route(&s, &x).unwrap();
        prop_assert!(beta.iter().all(|&v| v >= 0.0));
        prop_assert!((beta.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shift = randn(&mut r, d);
        let mut s2 = s.clone();
        for l in 0..b {
            axpy(s2.w_r.row_mut(l), 1.0, &shift);
        }
        let beta2 = route(&s2, &x).unwrap();
        for (a, c) in beta.iter().zip(&beta2) {
            prop_assert!((a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn projector_algebra(
        seed in 0u64..10_000,
        b in 1usize..7,
        extra in 0usize..10,
        rank in 1usize..7,
        rho in 0.0f64..1.0,
        delta in 0.05f64..1.0,
    ) {
        let d = b + extra;
        let mut r = rng::stream(seed, "test/proj-prop");
        let rank = rank.min(b);
        let a = Mat::new(b, rank, randn(&mut r, b * rank)).unwrap();
        let c = Mat::new(rank, d, randn(&mut r, rank * d)).unwrap();
        let w_old = a.matmul(&c);
        let w_new = Mat::new(b, d, randn(&mut r, b * d)).unwrap();
        let pr = projected_update(&w_old, &w_new, rho, delta).unwrap();
        let p = pr.p_old.unwrap();
        let br = pr.retained_rank.unwrap();
        prop_assert!(br >= 1 && br <= b);
        prop_assert!(p.sub(&p.transpose()).frobenius_norm() <= 1e-9);
        prop_assert!(p.matmul(&p).sub(&p).frobenius_norm() <= 1e-9);
        prop_assert!((p.trace() - br as f64).abs() <= 1e-9);
        let i_p = Mat::identity(b).sub(&p);
        let lhs = p.matmul(&pr.w_proj);
        prop_assert!(lhs.sub(&p.matmul(&w_new).scale(rho)).frobenius_norm() <= 1e-9);
        let lhs = i_p.matmul(&pr.w_proj);
        prop_assert!(lhs.sub(&i_p.matmul(&w_new).scale(1.0 - rho)).frobenius_norm() <= 1e-9);
        let eig = crate::linalg::symmetric_eig(&p).unwrap();
        for v in eig.values {
            prop_assert!(v.abs() <= 1e-8 || (v - 1.0).abs() <= 1e-8);
        }
    }
}
