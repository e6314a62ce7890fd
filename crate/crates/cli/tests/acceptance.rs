//! Acceptance suite. Trains one toy model through the CLI, then checks every
//! headline criterion and prints one PASS/FAIL line per criterion. Exits
//! non-zero when any criterion fails.
//!
//! Run with `cargo test --release -p scenegen-cli --test acceptance`.

use std::collections::HashMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scenegen::autodiff::Graph;
use scenegen::distributions::LogisticMixture1D;
use scenegen::evaluation::category_kl;
use scenegen::inference::{detect_and_correct, suggest, synthesize, CentroidBox, ThresholdPolicy};
use scenegen::model::{AttributeDistributionSet, AttributePrefix, Example};
use scenegen::scene::{generate_toy_dataset, Normalizer, Scene, ToyRuleSpec};
use scenegen::training::{nll_example, Draw, PreparedScene};
use scenegen::{Checkpoint, Model, ModelConfig, ObjectCode, OrderingMode};

/// Desk training settings for the toy run.
const TRAIN_SETTINGS: &str = r#"{
    "model": {"octaves": 8},
    "train": {"batch_size": 64, "lr": 0.001, "max_iterations": 5000, "validation_interval": 1000, "seed": 0}
}"#;

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, name: &str, pass: bool, detail: String) {
        if !pass {
            self.failed += 1;
        }
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
}

fn scenegen(args: &[&str], dir: &Path) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_scenegen"))
        .args(args)
        .current_dir(dir)
        .env("ATISS_LOG", "warn")
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn held_out(n: usize) -> Vec<Scene> {
    let spec = ToyRuleSpec {
        seed: 1,
        ..ToyRuleSpec::default()
    };
    generate_toy_dataset(&spec, n).unwrap().scenes
}

fn main() {
    let mut report = Report { failed: 0 };
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    kernels(&mut report);
    gradient(&mut report);
    objective(&mut report);

    scenegen(&["gen-data", "--n", "2000", "--seed", "0", "--out", "data"], dir);
    std::fs::write(dir.join("settings.json"), TRAIN_SETTINGS).unwrap();
    let start = Instant::now();
    scenegen(
        &[
            "train",
            "--data",
            "data",
            "--config",
            "settings.json",
            "--out",
            "toy.ckpt",
        ],
        dir,
    );
    let train_time = start.elapsed();
    let ckpt = Checkpoint::load(dir.join("toy.ckpt")).unwrap();
    println!("trained in {:.0?}", train_time);

    let held = held_out(500);
    invariance(&mut report, &ckpt.model, &held[..50]);
    toy_learning(&mut report, &ckpt.model, &held, train_time);
    anomaly(&mut report, &ckpt, &held);
    suggestions(&mut report, &ckpt.model, &held);
    reproducibility(&mut report, dir);

    println!("{} criteria failed", report.failed);
    if report.failed > 0 {
        std::process::exit(1);
    }
}

fn kernels(report: &mut Report) {
    let (w, m, s) = (vec![0.2, 0.5, 0.3], vec![-1.0, 0.3, 2.0], vec![0.1, 0.4, 0.05]);
    let d = LogisticMixture1D::new(w.clone(), m.clone(), s.clone()).unwrap();
    let mut worst: f64 = 0.0;
    for k in 0..w.len() {
        let single = LogisticMixture1D::single(m[k], s[k]).unwrap();
        let (a, b, n) = (m[k] - 40.0 * s[k], m[k] + 40.0 * s[k], 400_000);
        let h = (b - a) / n as f64;
        let mut acc = 0.0;
        for i in 0..=n {
            let c = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += c * single.log_prob(a + i as f64 * h).exp();
        }
        worst = worst.max((acc * h / 3.0 - 1.0).abs());
    }
    report.line(
        "kernel quadrature",
        worst < 1e-6,
        format!("max |integral - 1| = {worst:.2e}"),
    );

    let cdf = |x: f64| (0..3).map(|k| w[k] / (1.0 + (-(x - m[k]) / s[k]).exp())).sum::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 10_000;
    let mut xs: Vec<f64> = (0..n).map(|_| d.sample(&mut rng, 1.0)).collect();
    xs.sort_by(f64::total_cmp);
    let stat = xs
        .iter()
        .enumerate()
        .map(|(j, &x)| {
            (cdf(x) - j as f64 / n as f64)
                .abs()
                .max(((j + 1) as f64 / n as f64 - cdf(x)).abs())
        })
        .fold(0.0, f64::max);
    let critical = 1.628 / (n as f64).sqrt();
    report.line(
        "kernel KS test",
        stat < critical,
        format!("D = {stat:.4}, critical {critical:.4}"),
    );
}

fn default_config() -> ModelConfig {
    ModelConfig::with_categories(ToyRuleSpec::default().category_names())
}

fn scene_with(objects: usize) -> Scene {
    let mut scene = held_out(50).into_iter().find(|s| s.objects.len() >= objects).unwrap();
    scene.objects.truncate(objects);
    scene
}

fn all_draws(m: usize) -> Vec<Draw> {
    let orders: Vec<Vec<usize>> = if m == 2 {
        vec![vec![0, 1], vec![1, 0]]
    } else {
        unreachable!()
    };
    orders
        .into_iter()
        .flat_map(|order| {
            (0..=m).map(move |prefix| Draw {
                order: order.clone(),
                prefix,
            })
        })
        .collect()
}

fn total_nll(model: &Model<f64>, p: &PreparedScene, draws: &[Draw]) -> f64 {
    let examples: Vec<Example<'_>> = draws.iter().map(|d| p.example(d)).collect();
    let g = Graph::new();
    let b = model.bind(&g, false);
    g.item(model.batch_nll(&g, &b, &examples).unwrap().total)
}

fn gradient(report: &mut Report) {
    let start = Instant::now();
    let mut model = Model::<f64>::new(default_config(), 0).unwrap();
    // Zero biases on an all-empty floor region put ReLU inputs exactly on the
    // kink, where central differences average the two one-sided slopes.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for p in model.params_mut() {
        for v in p.data_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
    let model = model;
    let scene = scene_with(2);
    let p = PreparedScene::new(&scene, &model).unwrap();
    let draws = all_draws(2);
    let examples: Vec<Example<'_>> = draws.iter().map(|d| p.example(d)).collect();
    let g = Graph::new();
    let b = model.bind(&g, true);
    let loss = model.batch_nll(&g, &b, &examples).unwrap().total;
    let grads = g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = b.vars.iter().map(|&v| grads.wrt(v).data().to_vec()).collect();

    let h = 1e-6;
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    for (i, grad) in analytic.iter().enumerate() {
        // Largest-gradient entry plus random ones.
        let top = (0..grad.len())
            .max_by(|&a, &b| grad[a].abs().total_cmp(&grad[b].abs()))
            .unwrap();
        let mut entries = vec![top];
        entries.extend((0..3).map(|_| rng.random_range(0..grad.len())));
        for j in entries {
            let mut probe = model.clone();
            let base = (*model.params()[i]).clone();
            let mut plus = base.clone();
            plus.data_mut()[j] += h;
            probe.set_param(i, plus).unwrap();
            let lp = total_nll(&probe, &p, &draws);
            let mut minus = base;
            minus.data_mut()[j] -= h;
            probe.set_param(i, minus).unwrap();
            let lm = total_nll(&probe, &p, &draws);
            let numeric = (lp - lm) / (2.0 * h);
            let a = grad[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            checked += 1;
            if err > worst.0 {
                worst = (
                    err,
                    format!("{}[{j}] analytic {a:.3e} numeric {numeric:.3e}", model.names()[i]),
                );
            }
        }
    }
    let elapsed = start.elapsed();
    report.line(
        "gradient check",
        worst.0 < 1e-4 && elapsed < Duration::from_secs(300),
        format!(
            "{checked} entries over {} tensors, max rel err {:.2e} at {}, {:.1?}",
            analytic.len(),
            worst.0,
            worst.1,
            elapsed
        ),
    );
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn objective(report: &mut Report) {
    let model = Model::<f64>::new(default_config(), 1).unwrap();
    let scene = scene_with(3);
    let p = PreparedScene::new(&scene, &model).unwrap();
    let cond = model.conditioner(&p.mask).unwrap();
    let mut terms = Vec::new();
    for perm in permutations(3) {
        for t in 0..=3 {
            let context: Vec<ObjectCode> = perm[..t].iter().map(|&i| p.codes[i]).collect();
            terms.push(-cond.log_prob(&context, perm.get(t).map(|&i| &p.codes[i])).unwrap());
        }
    }
    let exact = terms.iter().sum::<f64>() / terms.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n: usize = 50_000;
    let xs: Vec<f64> = (0..n).map(|_| nll_example(&model, &scene, &mut rng).unwrap()).collect();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let se = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / ((n - 1) * n) as f64).sqrt();
    report.line(
        "objective Monte Carlo",
        (mean - exact).abs() < 3.0 * se,
        format!(
            "MC mean {mean:.5}, exhaustive {exact:.5} over {} terms, 3 SE = {:.5}",
            terms.len(),
            3.0 * se
        ),
    );
}

fn attributes<S: scenegen::Real>(model: &Model<S>, scene: &Scene, order: &[usize]) -> AttributeDistributionSet {
    let n = Normalizer::new(&scene.bounds);
    let mask = scene.floor_mask_at(model.config().floor_resolution).unwrap();
    let cond = model.conditioner(&mask).unwrap();
    let context: Vec<ObjectCode> = order
        .iter()
        .map(|&i| ObjectCode::encode(&scene.objects[i], &n))
        .collect();
    let q = cond.query(&context).unwrap();
    let target = ObjectCode::encode(&scene.objects[0], &n);
    let prefix = AttributePrefix {
        category: Some(target.category),
        location: Some(target.location),
        orientation: Some(target.orientation),
    };
    model.extract_attributes(&q, &prefix).unwrap()
}

/// Largest attribute difference between the stored order and 20 shuffles, per scene.
fn order_sensitivity<S: scenegen::Real>(model: &Model<S>, scenes: &[Scene]) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    scenes
        .iter()
        .map(|scene| {
            let base_order: Vec<usize> = (0..scene.objects.len()).collect();
            let base = attributes(model, scene, &base_order);
            (0..20)
                .map(|_| {
                    let mut order = base_order.clone();
                    order.shuffle(&mut rng);
                    base.max_abs_diff(&attributes(model, scene, &order))
                })
                .fold(0.0, f64::max)
        })
        .collect()
}

fn invariance(report: &mut Report, model: &Model<f32>, scenes: &[Scene]) {
    let start = Instant::now();
    let diffs = order_sensitivity(model, scenes);
    let elapsed = start.elapsed();
    let worst = diffs.iter().cloned().fold(0.0, f64::max);
    report.line(
        "permutation invariance",
        worst < 1e-5 && elapsed < Duration::from_secs(60),
        format!(
            "{} scenes x 20 orderings, max abs diff {worst:.2e}, {elapsed:.1?}",
            scenes.len()
        ),
    );

    let mut config = model.config().clone();
    config.ordering_mode = OrderingMode::PermutedWithPositions;
    let named: HashMap<String, _> = model
        .names()
        .iter()
        .cloned()
        .zip(model.params().iter().map(|p| (**p).clone()))
        .collect();
    let positional = Model::<f32>::from_named(config, named).unwrap();
    let diffs = order_sensitivity(&positional, scenes);
    let sensitive = diffs.iter().filter(|&&d| d > 1e-3).count();
    report.line(
        "positional ablation",
        sensitive * 10 >= scenes.len() * 9,
        format!("{sensitive}/{} scenes differ by more than 1e-3", scenes.len()),
    );
}

fn xz_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).hypot(a[2] - b[2])
}

fn toy_learning(report: &mut Report, model: &Model<f32>, held: &[Scene], train_time: Duration) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut generated = Vec::new();
    let mut truncated = 0;
    for floor in held {
        let s = synthesize(model, floor, &mut rng, 30, 1.0).unwrap();
        truncated += s.truncated as usize;
        generated.push(s.scene);
    }
    let budget = Duration::from_secs(15 * 60);
    report.line(
        "toy training budget",
        train_time < budget,
        format!("5000 iterations in {train_time:.0?}"),
    );
    let kl = category_kl(&generated, held, 3);
    report.line(
        "toy (a) category KL",
        kl < 0.05,
        format!("{kl:.4} over {} scenes", generated.len()),
    );

    let (mut tabled, mut ruled) = (0, 0);
    for s in &generated {
        if let Some(table) = s.objects.iter().find(|o| o.category == 0) {
            tabled += 1;
            let near = s
                .objects
                .iter()
                .filter(|o| o.category == 1 && xz_distance(o.location, table.location) <= 1.2)
                .count();
            ruled += (near >= 2) as usize;
        }
    }
    let frac = ruled as f64 / tabled.max(1) as f64;
    report.line(
        "toy (b) chairs around table",
        frac >= 0.9,
        format!("{ruled}/{tabled} = {frac:.3}"),
    );
    report.line(
        "toy (c) end symbol before cap",
        truncated == 0,
        format!("{truncated} of 500 hit the cap"),
    );

    let (mut total, mut inside) = (0, 0);
    for s in &generated {
        for o in &s.objects {
            total += 1;
            inside += s.contains_xz(o.floor_xz()) as usize;
        }
    }
    let frac = inside as f64 / total as f64;
    report.line(
        "toy (d) centroids on the floor",
        frac >= 0.99,
        format!("{inside}/{total} = {frac:.4}"),
    );
}

fn anomaly(report: &mut Report, ckpt: &Checkpoint, held: &[Scene]) {
    let model = &ckpt.model;
    let threshold = ckpt.meta.anomaly_threshold.expect("train calibrates a threshold");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut flagged, mut improved, mut corrections) = (0, 0, 0);
    for i in 0..200 {
        let mut s = held[i].clone();
        let k = rng.random_range(0..s.objects.len());
        let xs = s.floor_polygon.iter().map(|p| p[0]);
        let zs = s.floor_polygon.iter().map(|p| p[1]);
        let (x0, x1) = (
            xs.clone().fold(f64::INFINITY, f64::min),
            xs.fold(f64::NEG_INFINITY, f64::max),
        );
        let (z0, z1) = (
            zs.clone().fold(f64::INFINITY, f64::min),
            zs.fold(f64::NEG_INFINITY, f64::max),
        );
        let off = rng.random_range(0.3..1.0);
        let o = &mut s.objects[k];
        match rng.random_range(0..4) {
            0 => o.location[0] = x1 + off,
            1 => o.location[0] = x0 - off,
            2 => o.location[2] = z1 + off,
            _ => o.location[2] = z0 - off,
        }
        assert!(!s.contains_xz(s.objects[k].floor_xz()));
        let (_, rep) = detect_and_correct(model, &s, &mut rng, ThresholdPolicy::Below(threshold)).unwrap();
        flagged += rep.flagged().contains(&k) as usize;
        for c in &rep.corrections {
            corrections += 1;
            improved += (c.new_log_likelihood > c.old_log_likelihood) as usize;
        }
    }
    report.line(
        "anomaly flagged",
        flagged >= 160,
        format!("{flagged}/200 planted objects flagged"),
    );
    let frac = improved as f64 / corrections.max(1) as f64;
    report.line(
        "anomaly correction improves",
        frac >= 0.95,
        format!("{improved}/{corrections} corrections raise the log-likelihood"),
    );
}

fn suggestions(report: &mut Report, model: &Model<f32>, held: &[Scene]) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut accepted, mut violations) = (0, 0);
    for i in 0..1000 {
        let s = &held[i % held.len()];
        let (cx, cz) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let (hx, hz) = (rng.random_range(0.2..1.5), rng.random_range(0.2..1.5));
        let bx = CentroidBox {
            min: [cx - hx, 0.0, cz - hz],
            max: [cx + hx, 3.0, cz + hz],
        };
        if let Some(o) = suggest(model, s, &bx, &mut rng, 1000, 1.0).unwrap() {
            accepted += 1;
            violations += (!bx.contains(o.location)) as usize;
        }
    }
    report.line(
        "suggestion inside box",
        violations == 0,
        format!("{accepted}/1000 calls accepted, {violations} outside the box"),
    );

    let mut nothing = 0;
    for s in &held[..100] {
        let table = s.objects.iter().find(|o| o.category == 0).unwrap();
        let r = table.size[0].min(table.size[2]) / std::f64::consts::SQRT_2;
        let bx = CentroidBox {
            min: [table.location[0] - r, 0.0, table.location[2] - r],
            max: [table.location[0] + r, 2.0 * table.size[1], table.location[2] + r],
        };
        nothing += suggest(model, s, &bx, &mut rng, 1000, 1.0).unwrap().is_none() as usize;
    }
    report.line(
        "suggestion occluded box",
        nothing >= 70,
        format!("{nothing}/100 returned nothing"),
    );
}

fn reproducibility(report: &mut Report, dir: &Path) {
    let bytes = std::fs::read(dir.join("toy.ckpt")).unwrap();
    let loaded = Checkpoint::from_bytes(&bytes).unwrap();
    let again = Checkpoint::from_bytes(&loaded.to_bytes()).unwrap();
    let same_params = loaded.model.params().iter().zip(again.model.params()).all(|(a, b)| {
        a.data()
            .iter()
            .map(|v| v.to_bits())
            .eq(b.data().iter().map(|v| v.to_bits()))
    });
    report.line(
        "checkpoint round trip",
        loaded.to_bytes() == bytes && same_params && loaded.meta == again.meta,
        format!("{} bytes", bytes.len()),
    );

    let floor = "data/scene_00000.json";
    for out in ["a.json", "b.json"] {
        scenegen(
            &[
                "synthesize",
                "--ckpt",
                "toy.ckpt",
                "--floor",
                floor,
                "--seed",
                "7",
                "--out",
                out,
            ],
            dir,
        );
    }
    let a = std::fs::read(dir.join("a.json")).unwrap();
    let b = std::fs::read(dir.join("b.json")).unwrap();
    report.line("CLI synthesis reproducible", a == b, format!("{} bytes each", a.len()));
}
