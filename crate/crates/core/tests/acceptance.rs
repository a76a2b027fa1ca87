//! End-to-end acceptance checks. Runs as a plain binary so every check prints
//! its verdict; exits non-zero if any check fails.

use std::time::{Duration, Instant};

use herman::encoders::{generate_world, Split, WorldSpec};
use herman::harness::{ablation_suite, run_incremental, run_with_dataset, Dataset, RunConfig, SweepSpec, Variant};
use herman::linalg::{svd_thin, Mat};
use herman::matching::{ClassHierarchy, HierarchyEmbeddings};
use herman::replay::{fit_layer_stats, ReplaySampler};
use herman::rng::{self, Rng};
use herman::router::{class_scores, loss_and_grads, projected_update, Example, RouterState, Routing, ScoringParams};
use rand::Rng as _;

struct Verdict {
    passed: bool,
    detail: String,
}

fn uniform(r: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random::<f64>() * 2.0 - 1.0).collect()
}

fn rand_mat(r: &mut Rng, rows: usize, cols: usize) -> Mat<f64> {
    Mat::new(rows, cols, uniform(r, rows * cols)).unwrap()
}

// ---------------------------------------------------------------- 1

struct GradCase {
    w_r: Mat<f64>,
    w_a: Mat<f64>,
    xs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    hier: Vec<HierarchyEmbeddings<f64>>,
    templates: Vec<Vec<Vec<f64>>>,
    lambda: f64,
    tau: f64,
}

impl GradCase {
    /// Straight-line forward pass written without the library's helpers.
    fn loss(&self, w_r: &Mat<f64>, w_a: &Mat<f64>) -> f64 {
        let (b, d) = w_r.shape();
        let mut total = 0.0;
        for (n, x) in self.xs.iter().enumerate() {
            let r: Vec<f64> = (0..b).map(|l| (0..d).map(|j| w_r[(l, j)] * x[j]).sum()).collect();
            let mx = r.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = r.iter().map(|v| (v - mx).exp()).sum();
            let beta: Vec<f64> = r.iter().map(|v| (v - mx).exp() / z).collect();
            let q: Vec<f64> = (0..d).map(|i| (0..d).map(|j| w_a[(i, j)] * x[j]).sum()).collect();
            let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            let logits: Vec<f64> = self.hier[n]
                .classes
                .iter()
                .zip(&self.templates[n])
                .map(|(c, e)| {
                    let m: Vec<f64> = (0..d)
                        .map(|j| self.lambda * (0..b).map(|l| beta[l] * c.h[(l, j)]).sum::<f64>() + (1.0 - self.lambda) * e[j])
                        .collect();
                    let mn = m.iter().map(|v| v * v).sum::<f64>().sqrt();
                    q.iter().zip(&m).map(|(a, b)| a * b).sum::<f64>() / (qn * mn) / self.tau
                })
                .collect();
            let y = logits[self.labels[n]];
            let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
            total += if y >= mx {
                // confident samples: keep the tiny loss at full relative precision
                let rest: f64 = logits.iter().enumerate().filter(|(c, _)| *c != self.labels[n]).map(|(_, l)| (l - y).exp()).sum();
                rest.ln_1p()
            } else {
                mx + logits.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() - y
            };
        }
        total / self.xs.len() as f64
    }

    fn central_difference(&self, router: bool) -> Mat<f64> {
        let h = 1e-5;
        let base = if router { &self.w_r } else { &self.w_a };
        let mut g = Mat::zeros(base.rows(), base.cols());
        for i in 0..base.as_slice().len() {
            let mut p = base.clone();
            p.as_mut_slice()[i] += h;
            let mut m = base.clone();
            m.as_mut_slice()[i] -= h;
            let (lp, lm) = if router {
                (self.loss(&p, &self.w_a), self.loss(&m, &self.w_a))
            } else {
                (self.loss(&self.w_r, &p), self.loss(&self.w_r, &m))
            };
            g.as_mut_slice()[i] = (lp - lm) / (2.0 * h);
        }
        g
    }
}

fn criterion_1() -> Verdict {
    let mut r = rng::stream(1, "acceptance/gradients");
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let b = r.random_range(1..=6);
        let d = r.random_range(2..=16);
        let classes = r.random_range(2..=5);
        let n = r.random_range(1..=4);
        let mut w_a = Mat::identity(d);
        w_a.add_scaled(0.3, &rand_mat(&mut r, d, d));
        let case = GradCase {
            w_r: rand_mat(&mut r, b, d),
            w_a,
            xs: (0..n).map(|_| uniform(&mut r, d)).collect(),
            labels: (0..n).map(|_| r.random_range(0..classes)).collect(),
            hier: (0..n)
                .map(|_| HierarchyEmbeddings {
                    layers: (0..b).collect(),
                    classes: (0..classes)
                        .map(|c| ClassHierarchy {
                            class: c,
                            h: rand_mat(&mut r, b, d),
                            selections: vec![],
                        })
                        .collect(),
                })
                .collect(),
            templates: (0..n).map(|_| (0..classes).map(|_| uniform(&mut r, d)).collect()).collect(),
            lambda: r.random_range(0.1..0.9),
            tau: [0.05, 0.2, 1.0][r.random_range(0..3)],
        };
        let mut state = RouterState::new(b, d);
        state.w_r = case.w_r.clone();
        state.w_a = case.w_a.clone();
        let batch: Vec<Example<'_, f64>> = (0..n)
            .map(|i| Example {
                x_final: &case.xs[i],
                label: case.labels[i],
                hierarchy: &case.hier[i],
                templates: &case.templates[i],
            })
            .collect();
        let params = ScoringParams {
            lambda: case.lambda,
            tau: case.tau,
            routing: Routing::Learned,
        };
        let g = loss_and_grads(&state, &params, &batch).unwrap();
        for (analytic, router) in [(&g.d_w_r, true), (&g.d_w_a, false)] {
            let fd = case.central_difference(router);
            let rel = analytic.sub(&fd).frobenius_norm() / fd.frobenius_norm().max(1e-12);
            worst = worst.max(rel);
        }
    }
    Verdict {
        passed: worst <= 1e-4,
        detail: format!("worst relative Frobenius error {worst:.2e} (limit 1e-4)"),
    }
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Verdict {
    let mut r = rng::stream(2, "acceptance/projector");
    let (mut sym, mut idem, mut trace, mut split, mut half): (f64, f64, f64, f64, f64) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for case in 0..50 {
        let b = r.random_range(1..=12);
        let d = r.random_range(b..=40);
        let rank = if case % 2 == 0 { b } else { r.random_range(1..=b) };
        let w_old = rand_mat(&mut r, b, rank).matmul(&rand_mat(&mut r, rank, d));
        let w_new = rand_mat(&mut r, b, d);
        let rho = r.random::<f64>();
        let delta = r.random_range(0.05..=1.0);
        let p = projected_update(&w_old, &w_new, rho, delta).unwrap();
        let pm = p.p_old.as_ref().unwrap();
        let br = p.retained_rank.unwrap() as f64;
        sym = sym.max(pm.sub(&pm.transpose()).frobenius_norm());
        idem = idem.max(pm.matmul(pm).sub(pm).frobenius_norm());
        trace = trace.max((pm.trace() - br).abs());
        let ip = Mat::identity(b).sub(pm);
        split = split.max(pm.matmul(&p.w_proj).sub(&pm.matmul(&w_new).scale(rho)).frobenius_norm());
        split = split.max(ip.matmul(&p.w_proj).sub(&ip.matmul(&w_new).scale(1.0 - rho)).frobenius_norm());
        let h = projected_update(&w_old, &w_new, 0.5, delta).unwrap();
        half = half.max(h.w_proj.max_abs_diff(&w_new.scale(0.5)));
    }
    Verdict {
        passed: sym <= 1e-9 && idem <= 1e-9 && trace <= 1e-9 && split <= 1e-9 && half <= 1e-12,
        detail: format!(
            "symmetry {sym:.1e}, idempotence {idem:.1e}, trace {trace:.1e}, split {split:.1e}, rho=0.5 {half:.1e}"
        ),
    }
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Verdict {
    let mut r = rng::stream(3, "acceptance/svd");
    let (mut recon, mut ortho): (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let b = r.random_range(1..=24);
        let d = r.random_range(b..=512);
        let w = rand_mat(&mut r, b, d);
        let s = svd_thin(&w).unwrap();
        recon = recon.max(s.reconstruct().sub(&w).frobenius_norm() / w.frobenius_norm().max(1.0));
        ortho = ortho.max(s.u.transpose().matmul(&s.u).max_abs_diff(&Mat::identity(b)));
        ortho = ortho.max(s.vt.matmul(&s.vt.transpose()).max_abs_diff(&Mat::identity(b)));
    }
    Verdict {
        passed: recon <= 1e-8 && ortho <= 1e-8,
        detail: format!("relative reconstruction {recon:.1e}, orthonormality {ortho:.1e}"),
    }
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Verdict {
    let mut r = rng::stream(4, "acceptance/zero-shot");
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let d = r.random_range(2..=64);
        let classes = r.random_range(1..=10);
        let tau = r.random_range(0.01..1.0);
        let x = uniform(&mut r, d);
        let e: Vec<Vec<f64>> = (0..classes).map(|_| uniform(&mut r, d)).collect();
        let h: Vec<Vec<f64>> = (0..classes).map(|_| uniform(&mut r, d)).collect();
        let state = RouterState::new(3, d);
        let params = ScoringParams {
            lambda: 0.0,
            tau,
            routing: Routing::Learned,
        };
        let got = class_scores(&state, &params, &x, &h, &e).unwrap();
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let logits: Vec<f64> = e
            .iter()
            .map(|ei| {
                let ne = ei.iter().map(|v| v * v).sum::<f64>().sqrt();
                x.iter().zip(ei).map(|(a, b)| a * b).sum::<f64>() / (nx * ne) / tau
            })
            .collect();
        let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        for (g, l) in got.iter().zip(&logits) {
            worst = worst.max((g - (l - mx).exp() / z).abs());
        }
    }
    Verdict {
        passed: worst <= 1e-12,
        detail: format!("max probability difference {worst:.1e} (limit 1e-12)"),
    }
}

// ---------------------------------------------------------------- 5, 6, 9

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn benchmark_config(seed: u64) -> RunConfig {
    let mut c = RunConfig::default();
    c.world = WorldSpec {
        num_coarse_groups: 4,
        classes_per_group: 5,
        layers: 6,
        dim: 96,
        samples_per_class_train: 40,
        samples_per_class_test: 20,
        noise_std: 0.35,
        decay: 0.5,
        seed,
    };
    c.root_seed = seed;
    c.stream.m = 0;
    c.stream.n = 4;
    c.scoring.k = 3;
    c.scoring.lambda = 0.5;
    c.scoring.tau = 0.05;
    c.projection.rho = 0.9;
    c.projection.delta = 0.9;
    c
}

/// Nearest prototype using every layer: argmax_c Σ_b cos(x^b, p_c^b).
fn all_layer_oracle(spec: &WorldSpec) -> f64 {
    let world = generate_world(spec).unwrap();
    let protos = &world.truth.layer_prototypes;
    let test: Vec<_> = world.samples.iter().filter(|s| s.split == Split::Test).collect();
    let mut correct = 0;
    for s in &test {
        let mut best = (f64::MIN, usize::MAX);
        for (c, pc) in protos.iter().enumerate() {
            let mut score = 0.0;
            for (x, p) in s.features.layers().iter().zip(pc) {
                let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let np = p.iter().map(|v| v * v).sum::<f64>().sqrt();
                score += x.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() / (nx * np);
            }
            if score > best.0 {
                best = (score, c);
            }
        }
        correct += usize::from(best.1 == s.label);
    }
    correct as f64 / test.len() as f64
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn criterion_5() -> Verdict {
    let (mut herman, mut baseline, mut oracle) = (vec![], vec![], vec![]);
    for seed in SEEDS {
        let mut c = benchmark_config(seed);
        let data = Dataset::load(&c).unwrap();
        herman.push(run_with_dataset(&c, &data).unwrap().report.final_accuracy);
        c.method.variant = Variant::FinalLayerOnly;
        baseline.push(run_with_dataset(&c, &data).unwrap().report.final_accuracy);
        oracle.push(all_layer_oracle(&c.world));
    }
    let (h, b, o) = (mean(&herman), mean(&baseline), mean(&oracle));
    Verdict {
        passed: h - b >= 0.10 && (o - h).abs() <= 0.05,
        detail: format!(
            "mean A_T herman {:.2}%, final_layer_only {:.2}% (margin {:+.2} pts, need >= +10), oracle {:.2}% (gap {:.2} pts, need <= 5)",
            100.0 * h,
            100.0 * b,
            100.0 * (h - b),
            100.0 * o,
            100.0 * (o - h).abs()
        ),
    }
}

fn criterion_6() -> Verdict {
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in SEEDS {
        let mut c = benchmark_config(seed);
        c.stream.m = 8;
        c.stream.n = 4;
        let data = Dataset::load(&c).unwrap();
        let h = run_with_dataset(&c, &data).unwrap().report;
        c.method.variant = Variant::NoProjection;
        let p = run_with_dataset(&c, &data).unwrap().report;
        let (sh, sp) = (h.tasks.last().unwrap().routing_similarity, p.tasks.last().unwrap().routing_similarity);
        let ok = sh > sp && h.final_accuracy >= p.final_accuracy;
        wins += usize::from(ok);
        rows.push(format!(
            "seed {seed}: sim {sh:.5} vs {sp:.5}, A_T {:.4} vs {:.4}",
            h.final_accuracy, p.final_accuracy
        ));
    }
    Verdict {
        passed: wins >= 4,
        detail: format!("{wins}/5 seeds favour herman (need 4); {}", rows.join("; ")),
    }
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Verdict {
    let mut r = rng::stream(1993, "acceptance/replay");
    let (d, n_fit, n) = (8, 50, 10_000);
    let mut worst_z: f64 = 0.0;
    let mut misses = 0;
    for class in 0..10 {
        let centre = uniform(&mut r, d);
        let mix = rand_mat(&mut r, d, d);
        let draws: Vec<Vec<Vec<f64>>> = (0..n_fit)
            .map(|_| {
                let z = uniform(&mut r, d);
                let x: Vec<f64> = centre.iter().zip(mix.matvec(&z)).map(|(c, v)| c + 0.3 * v).collect();
                vec![x]
            })
            .collect();
        let stacks: Vec<&[Vec<f64>]> = draws.iter().map(|s| s.as_slice()).collect();
        let stats = fit_layer_stats(class, &stacks, 1e-4).unwrap();
        let pseudo = ReplaySampler::new(&stats).unwrap().draw_raw(n, &mut r);
        for i in 0..d {
            let m = pseudo.iter().map(|p| p[i]).sum::<f64>() / n as f64;
            let se = stats.final_covariance[(i, i)].sqrt() / (n as f64).sqrt();
            let z = (m - stats.final_mean[i]).abs() / se;
            worst_z = worst_z.max(z);
            misses += usize::from(z > 3.0);
        }
    }
    Verdict {
        passed: misses == 0,
        detail: format!("{misses} of 80 coordinates outside 3 sigma/sqrt(n); largest deviation {worst_z:.2} sigma/sqrt(n)"),
    }
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Verdict {
    let mut c = benchmark_config(7);
    c.stream.m = 8;
    c.optimizer.epochs = 5;
    let resolved = c.to_toml_string();
    let a = run_incremental(&RunConfig::from_toml_str(&resolved).unwrap()).unwrap().report;
    let b = run_incremental(&RunConfig::from_toml_str(&resolved).unwrap()).unwrap().report;
    let accs: Vec<f64> = a.tasks.iter().map(|t| t.accuracy).collect();
    let recomputed = accs.iter().sum::<f64>() / accs.len() as f64;
    let identical = a.to_json() == b.to_json();
    Verdict {
        passed: recomputed == a.average_accuracy && identical,
        detail: format!(
            "mean of A_t column {} vs reported {}; report JSON byte-identical: {identical}",
            recomputed, a.average_accuracy
        ),
    }
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Verdict {
    let base = benchmark_config(SEEDS[0]);
    let lambdas = vec![0.40, 0.45, 0.50, 0.55, 0.60];
    let ks = vec![1, 3, 5, 10, 20];
    let by_lambda = ablation_suite(&base, &SweepSpec { lambda: lambdas.clone(), ..Default::default() }, 4).unwrap();
    let by_k = ablation_suite(&base, &SweepSpec { k: ks.clone(), ..Default::default() }, 4).unwrap();
    let lambda_avg: Vec<f64> = by_lambda.iter().map(|(_, o)| o.report.average_accuracy).collect();
    let k_avg: Vec<f64> = by_k.iter().map(|(_, o)| o.report.average_accuracy).collect();
    let spread = lambda_avg.iter().cloned().fold(f64::MIN, f64::max) - lambda_avg.iter().cloned().fold(f64::MAX, f64::min);
    let fmt = |xs: &[f64]| xs.iter().map(|v| format!("{:.2}", 100.0 * v)).collect::<Vec<_>>().join("/");
    Verdict {
        passed: spread <= 0.05,
        detail: format!(
            "avg accuracy over lambda {{0.40..0.60}}: {} (spread {:.2} pts, limit 5); over K {{1,3,5,10,20}}: {}",
            fmt(&lambda_avg),
            100.0 * spread,
            fmt(&k_avg)
        ),
    }
}

fn main() {
    let checks: [(u32, &str, Option<Duration>, fn() -> Verdict); 9] = [
        (1, "gradient oracle", Some(Duration::from_secs(5)), criterion_1),
        (2, "projector algebra", Some(Duration::from_secs(1)), criterion_2),
        (3, "svd correctness", Some(Duration::from_secs(10)), criterion_3),
        (4, "baseline reduction", None, criterion_4),
        (5, "synthetic hierarchy benchmark", Some(Duration::from_secs(120)), criterion_5),
        (6, "forgetting ablation", Some(Duration::from_secs(120)), criterion_6),
        (7, "replay statistics", Some(Duration::from_secs(5)), criterion_7),
        (8, "metrics and determinism", None, criterion_8),
        (9, "sensitivity sanity", None, criterion_9),
    ];
    let filter: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, limit, check) in checks {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let v = check();
        let took = start.elapsed();
        let in_time = limit.is_none_or(|l| took <= l);
        let ok = v.passed && in_time;
        failed += usize::from(!ok);
        let budget = limit.map(|l| format!(", budget {}s", l.as_secs())).unwrap_or_default();
        println!(
            "acceptance criterion {id} ({name}): {} | {} | {:.2}s{budget}",
            if ok { "PASS" } else { "FAIL" },
            v.detail,
            took.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
