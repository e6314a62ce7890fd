use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use scenegen::model::{Model, ModelConfig, OrderingMode};
use scenegen::scene::{generate_toy_dataset, Scene, ToyRuleSpec};
use scenegen::training::{evaluate_nll, nll_example, train, Draw, PreparedScene, TrainConfig};

fn small_config() -> ModelConfig {
    let mut cfg = ModelConfig::with_categories(ToyRuleSpec::default().category_names());
    cfg.d_ff = 64;
    cfg.n_layers = 1;
    cfg.floor_resolution = 32;
    cfg
}

fn scene_with(objects: usize) -> Scene {
    let data = generate_toy_dataset(&ToyRuleSpec::default(), 200).unwrap();
    let mut scene = data.scenes.into_iter().find(|s| s.objects.len() >= objects).unwrap();
    scene.objects.truncate(objects);
    scene
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

/// Average over every ordering and prefix length of the next-object NLL,
/// each term scored through the inference path rather than the batch loss.
fn exhaustive_objective(model: &Model<f64>, scene: &Scene) -> f64 {
    let p = PreparedScene::new(scene, model).unwrap();
    let cond = model.conditioner(&p.mask).unwrap();
    let m = p.codes.len();
    let mut terms = Vec::new();
    for perm in permutations(m) {
        for t in 0..=m {
            let context: Vec<_> = perm[..t].iter().map(|&i| p.codes[i]).collect();
            let target = perm.get(t).map(|&i| &p.codes[i]);
            terms.push(-cond.log_prob(&context, target).unwrap());
        }
    }
    assert_eq!(terms.len(), (1..=m).product::<usize>() * (m + 1));
    terms.iter().sum::<f64>() / terms.len() as f64
}

#[test]
fn two_object_enumeration_matches_batch_loss() {
    let model = Model::<f64>::new(small_config(), 3).unwrap();
    let scene = scene_with(2);
    let p = PreparedScene::new(&scene, &model).unwrap();
    let draws: Vec<Draw> = permutations(2)
        .into_iter()
        .flat_map(|order| {
            (0..=2).map(move |prefix| Draw {
                order: order.clone(),
                prefix,
            })
        })
        .collect();
    assert_eq!(draws.len(), 6);
    let examples: Vec<_> = draws.iter().map(|d| p.example(d)).collect();
    let batch = evaluate_nll(&model, &examples).unwrap();
    let mean = batch.iter().sum::<f64>() / batch.len() as f64;
    let oracle = exhaustive_objective(&model, &scene);
    assert!((mean - oracle).abs() < 1e-9, "{mean} vs {oracle}");
}

#[test]
fn monte_carlo_loss_is_unbiased() {
    let model = Model::<f64>::new(small_config(), 5).unwrap();
    let scene = scene_with(3);
    let oracle = exhaustive_objective(&model, &scene);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 50_000;
    let xs: Vec<f64> = (0..n).map(|_| nll_example(&model, &scene, &mut rng).unwrap()).collect();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    assert!(
        (mean - oracle).abs() < 3.0 * se,
        "mean {mean}, oracle {oracle}, se {se}"
    );
}

fn toy(n: usize) -> Vec<Scene> {
    generate_toy_dataset(&ToyRuleSpec::default(), n).unwrap().scenes
}

#[test]
fn training_is_deterministic() {
    let data = toy(40);
    let cfg = TrainConfig {
        max_iterations: 12,
        validation_interval: 4,
        batch_size: 8,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    let run = || {
        let mut model = Model::<f32>::new(small_config(), 0).unwrap();
        let report = train(&mut model, &data[..32], &data[32..], &cfg).unwrap();
        (model, report)
    };
    let (m1, r1) = run();
    let (m2, r2) = run();
    assert_eq!(r1.losses, r2.losses);
    assert_eq!(r1.metrics.len(), 3);
    for (a, b) in r1.metrics.iter().zip(&r2.metrics) {
        assert_eq!(
            (a.iteration, a.train_nll, a.val_nll),
            (b.iteration, b.train_nll, b.val_nll)
        );
    }
    for (a, b) in m1.params().iter().zip(m2.params()) {
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn training_reduces_the_loss() {
    let data = toy(200);
    let mut model = Model::<f32>::new(small_config(), 0).unwrap();
    let cfg = TrainConfig {
        max_iterations: 500,
        validation_interval: 500,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    let report = train(&mut model, &data, &[], &cfg).unwrap();
    let smooth = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let first = smooth(&report.losses[..25]);
    let last = smooth(&report.losses[report.losses.len() - 25..]);
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn fixed_order_mode_trains_and_is_recorded() {
    let data = toy(20);
    let mut cfg = small_config();
    cfg.ordering_mode = OrderingMode::FixedFrequencyOrder;
    let mut model = Model::<f32>::new(cfg, 0).unwrap();
    let tc = TrainConfig {
        max_iterations: 3,
        validation_interval: 3,
        batch_size: 4,
        ..TrainConfig::default()
    };
    train(&mut model, &data, &[], &tc).unwrap();
    let ckpt = scenegen::Checkpoint::new(model, Default::default());
    let bytes = ckpt.to_bytes();
    let back = scenegen::Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.model.config().ordering_mode, OrderingMode::FixedFrequencyOrder);
    assert!(back.model.category_frequency().is_some());
}
