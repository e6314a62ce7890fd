//! Order-agnostic autoregressive training.
//!
//! Each example takes a scene, shuffles its objects, keeps a uniformly drawn
//! prefix length `T` in `[0, M]` as context and scores the next object, or
//! the end symbol when `T = M`. Averaged over draws this is the mean NLL of
//! the scene over all orderings and prefix lengths.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Graph};
use crate::error::{ModelError, TrainError};
use crate::model::{Example, Model, ObjectCode, OrderingMode};
use crate::scene::{FloorMask, Normalizer, Scene, SceneObject};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_iterations: usize,
    pub validation_interval: usize,
    pub seed: u64,
    /// Rotate each training scene by a uniform angle in `[0, 2π)` per draw.
    pub rotation_augmentation: bool,
    /// Sampled orderings per validation scene.
    pub val_permutations: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 32,
            max_iterations: 5000,
            validation_interval: 1000,
            seed: 0,
            rotation_augmentation: false,
            val_permutations: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.max_iterations == 0 || self.validation_interval == 0 {
            return Err(TrainError::Config(
                "lr, batch size, iterations and interval must be positive".into(),
            ));
        }
        if self.val_permutations == 0 {
            return Err(TrainError::Config("val_permutations must be positive".into()));
        }
        Ok(())
    }
}

/// Per-category statistics of a scene collection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub scenes: usize,
    /// Total objects per category.
    pub counts: Vec<usize>,
    /// Mean objects per scene per category.
    pub mean_count: Vec<f64>,
    /// Fraction of scenes holding at least one object of each category.
    pub presence: Vec<f64>,
}

pub fn dataset_stats(scenes: &[Scene], categories: usize) -> DatasetStats {
    let mut counts = vec![0usize; categories];
    let mut present = vec![0usize; categories];
    for s in scenes {
        let mut seen = vec![false; categories];
        for o in &s.objects {
            if o.category < categories {
                counts[o.category] += 1;
                seen[o.category] = true;
            }
        }
        for (p, s) in present.iter_mut().zip(seen) {
            *p += s as usize;
        }
    }
    let n = scenes.len().max(1) as f64;
    DatasetStats {
        scenes: scenes.len(),
        mean_count: counts.iter().map(|&c| c as f64 / n).collect(),
        presence: present.iter().map(|&c| c as f64 / n).collect(),
        counts,
    }
}

/// Objects sorted by descending category frequency; ties by category id,
/// then by centroid lexicographically.
pub fn frequency_order(objects: &[SceneObject], frequency: &[f64]) -> Vec<SceneObject> {
    let freq = |c: usize| frequency.get(c).copied().unwrap_or(0.0);
    let mut out = objects.to_vec();
    out.sort_by(|a, b| {
        freq(b.category)
            .total_cmp(&freq(a.category))
            .then(a.category.cmp(&b.category))
            .then_with(|| {
                a.location
                    .iter()
                    .zip(&b.location)
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
    });
    out
}

/// Rotates a scene about the center of its bounds. Same as
/// [`Scene::rotated`]; the floor mask is re-rasterized when present.
pub fn augment_rotation(scene: &Scene, angle: f64) -> Result<Scene, crate::error::SceneError> {
    scene.rotated(angle)
}

/// A scene in model form: floor raster plus encoded objects, sorted by
/// frequency in the fixed-order mode.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub mask: FloorMask,
    pub codes: Vec<ObjectCode>,
}

impl PreparedScene {
    pub fn new<S: Real>(scene: &Scene, model: &Model<S>) -> Result<Self, ModelError> {
        let mask = scene.floor_mask_at(model.config().floor_resolution)?;
        let n = Normalizer::new(&scene.bounds);
        let objects = match (model.config().ordering_mode, model.category_frequency()) {
            (OrderingMode::FixedFrequencyOrder, Some(f)) => frequency_order(&scene.objects, f),
            _ => scene.objects.clone(),
        };
        let codes = objects.iter().map(|o| ObjectCode::encode(o, &n)).collect();
        Ok(Self { mask, codes })
    }

    /// Context and target of a draw.
    pub fn example(&self, draw: &Draw) -> Example<'_> {
        Example {
            floor: &self.mask,
            context: draw.order[..draw.prefix].iter().map(|&i| self.codes[i]).collect(),
            target: draw.order.get(draw.prefix).map(|&i| self.codes[i]),
        }
    }
}

/// One training draw over a scene of `order.len()` objects: the first
/// `prefix` entries of `order` are context, entry `prefix` (if any) is the
/// target.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Draw {
    pub order: Vec<usize>,
    pub prefix: usize,
}

/// Uniform ordering (identity in the fixed-order mode) and uniform prefix
/// length in `[0, objects]`.
pub fn draw<R: Rng + ?Sized>(objects: usize, mode: OrderingMode, rng: &mut R) -> Draw {
    let mut order: Vec<usize> = (0..objects).collect();
    if mode != OrderingMode::FixedFrequencyOrder {
        order.shuffle(rng);
    }
    Draw {
        order,
        prefix: rng.random_range(0..=objects),
    }
}

/// NLL of several examples without recording gradients.
pub fn evaluate_nll<S: Real>(model: &Model<S>, examples: &[Example<'_>]) -> Result<Vec<f64>, ModelError> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(64) {
        let g = Graph::new();
        let b = model.bind(&g, false);
        let nll = model.batch_nll(&g, &b, chunk)?;
        out.extend(g.value(nll.per_example).data().iter().map(|v| v.f64()));
    }
    Ok(out)
}

/// Single-draw Monte-Carlo NLL of `scene`.
pub fn nll_example<S: Real, R: Rng + ?Sized>(model: &Model<S>, scene: &Scene, rng: &mut R) -> Result<f64, ModelError> {
    let prepared = PreparedScene::new(scene, model)?;
    let d = draw(prepared.codes.len(), model.config().ordering_mode, rng);
    Ok(evaluate_nll(model, &[prepared.example(&d)])?[0])
}

/// Mean NLL over every prefix length of `permutations` sampled orderings
/// per scene.
pub fn validation_nll<S: Real>(
    model: &Model<S>,
    scenes: &[Scene],
    permutations: usize,
    seed: u64,
) -> Result<f64, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prepared = scenes
        .iter()
        .map(|s| PreparedScene::new(s, model))
        .collect::<Result<Vec<_>, _>>()?;
    let mut draws = Vec::new();
    for (i, p) in prepared.iter().enumerate() {
        for _ in 0..permutations {
            let d = draw(p.codes.len(), model.config().ordering_mode, &mut rng);
            for prefix in 0..=p.codes.len() {
                draws.push((
                    i,
                    Draw {
                        order: d.order.clone(),
                        prefix,
                    },
                ));
            }
        }
    }
    let examples: Vec<Example<'_>> = draws.iter().map(|(i, d)| prepared[*i].example(d)).collect();
    let nll = evaluate_nll(model, &examples)?;
    Ok(nll.iter().sum::<f64>() / nll.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    /// Mean training NLL since the previous row.
    pub train_nll: f64,
    pub val_nll: Option<f64>,
    pub wall_ms: u128,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub metrics: Vec<MetricsRow>,
    /// Mean batch NLL of every iteration.
    pub losses: Vec<f64>,
    pub best_iteration: usize,
    pub best_val_nll: Option<f64>,
    pub stats: DatasetStats,
}

/// `iteration,train_nll,val_nll,wall_ms`; an empty `val_nll` means no
/// validation set.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("iteration,train_nll,val_nll,wall_ms\n");
    for r in rows {
        let val = r.val_nll.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{}", r.iteration, r.train_nll, val, r.wall_ms);
    }
    out
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[MetricsRow]) -> std::io::Result<()> {
    std::fs::write(path, metrics_csv(rows))
}

/// Minibatch Adam on the mean single-draw NLL. Validation runs every
/// `validation_interval` iterations and after the last one; the model ends
/// holding the parameters of the best validation point (the final ones when
/// `val` is empty).
pub fn train(
    model: &mut Model<f32>,
    train_scenes: &[Scene],
    val_scenes: &[Scene],
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if train_scenes.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let categories = model.config().categories();
    let stats = dataset_stats(train_scenes, categories);
    model.set_category_frequency(Some(stats.mean_count.clone()));
    let mode = model.config().ordering_mode;
    let mut prepared = train_scenes
        .iter()
        .map(|s| PreparedScene::new(s, model))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shapes: Vec<Vec<usize>> = model.params().iter().map(|p| p.shape().to_vec()).collect();
    let mut adam = Adam::<f32>::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        shapes.iter().map(Vec::as_slice),
    );
    let start = Instant::now();
    let mut epoch: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(cfg.max_iterations);
    let mut metrics = Vec::new();
    let mut since = (0.0, 0usize);
    let mut best: Option<(f64, usize, Vec<Arc<Tensor<f32>>>)> = None;
    for it in 1..=cfg.max_iterations {
        let mut ids = Vec::with_capacity(cfg.batch_size);
        while ids.len() < cfg.batch_size {
            if epoch.is_empty() {
                epoch = (0..prepared.len()).collect();
                epoch.shuffle(&mut rng);
            }
            ids.push(epoch.pop().expect("refilled above"));
        }
        if cfg.rotation_augmentation {
            for &i in &ids {
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let rotated = augment_rotation(&train_scenes[i], angle).map_err(ModelError::from)?;
                prepared[i] = PreparedScene::new(&rotated, model)?;
            }
        }
        let draws: Vec<Draw> = ids
            .iter()
            .map(|&i| draw(prepared[i].codes.len(), mode, &mut rng))
            .collect();
        let examples: Vec<Example<'_>> = ids.iter().zip(&draws).map(|(&i, d)| prepared[i].example(d)).collect();
        let grads = {
            let g = Graph::new();
            let b = model.bind(&g, true);
            let nll = model.batch_nll(&g, &b, &examples)?;
            let loss = g.scale(nll.total, 1.0 / ids.len() as f32);
            let value = g.item(loss) as f64;
            if !value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    iteration: it,
                    scene_ids: ids,
                });
            }
            losses.push(value);
            since.0 += value;
            since.1 += 1;
            let grads = g.backward(loss).map_err(ModelError::from)?;
            b.vars.iter().map(|&v| grads.wrt(v)).collect::<Vec<_>>()
        };
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFiniteLoss {
                iteration: it,
                scene_ids: ids,
            });
        }
        adam.step(model.params_mut(), &grads);
        if it % cfg.validation_interval == 0 || it == cfg.max_iterations {
            let val_nll = if val_scenes.is_empty() {
                None
            } else {
                Some(validation_nll(
                    model,
                    val_scenes,
                    cfg.val_permutations,
                    cfg.seed ^ 0x5eed,
                )?)
            };
            let row = MetricsRow {
                iteration: it,
                train_nll: since.0 / since.1.max(1) as f64,
                val_nll,
                wall_ms: start.elapsed().as_millis(),
            };
            log::info!(
                "iteration {it}: train nll {:.4}, val nll {}",
                row.train_nll,
                val_nll.map_or("-".into(), |v| format!("{v:.4}"))
            );
            since = (0.0, 0);
            metrics.push(row);
            let score = val_nll.unwrap_or(f64::NEG_INFINITY);
            if best.as_ref().is_none_or(|(b, _, _)| score < *b || val_nll.is_none()) {
                best = Some((score, it, model.params().to_vec()));
            }
        }
    }
    let (best_score, best_iteration, params) = best.expect("at least one validation point");
    for (i, p) in params.into_iter().enumerate() {
        model.set_param(i, Arc::unwrap_or_clone(p))?;
    }
    Ok(TrainReport {
        metrics,
        losses,
        best_iteration,
        best_val_nll: best_score.is_finite().then_some(best_score),
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::scene::{generate_toy_dataset, ToyRuleSpec};

    fn obj(category: usize, x: f64) -> SceneObject {
        SceneObject::new(category, [0.2; 3], [x, 0.2, 0.0], 0.0)
    }

    #[test]
    fn frequency_order_sorts_by_frequency_then_id_then_position() {
        let freq = [1.0, 3.0, 0.5, 3.0];
        let objects = vec![obj(2, 0.0), obj(0, 0.0), obj(3, 1.0), obj(1, 0.5), obj(1, -0.5)];
        let sorted: Vec<(usize, f64)> = frequency_order(&objects, &freq)
            .iter()
            .map(|o| (o.category, o.location[0]))
            .collect();
        assert_eq!(sorted, vec![(1, -0.5), (1, 0.5), (3, 1.0), (0, 0.0), (2, 0.0)]);
        let mut shuffled = objects.clone();
        shuffled.reverse();
        assert_eq!(frequency_order(&shuffled, &freq), frequency_order(&objects, &freq));
    }

    #[test]
    fn toy_chairs_precede_lamps() {
        let data = generate_toy_dataset(&ToyRuleSpec::default(), 300).unwrap().scenes;
        let stats = dataset_stats(&data, 3);
        assert!(stats.mean_count[1] > stats.mean_count[2]);
        for s in &data {
            let order: Vec<usize> = frequency_order(&s.objects, &stats.mean_count)
                .iter()
                .map(|o| o.category)
                .collect();
            if let Some(lamp) = order.iter().position(|&c| c == 2) {
                assert!(
                    order[..lamp].iter().filter(|&&c| c == 1).count()
                        == s.objects.iter().filter(|o| o.category == 1).count()
                );
            }
        }
    }

    #[test]
    fn draws_cover_every_prefix_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut seen = [0usize; 4];
        for _ in 0..4000 {
            let d = draw(3, OrderingMode::PermutationInvariant, &mut rng);
            let mut o = d.order.clone();
            o.sort();
            assert_eq!(o, vec![0, 1, 2]);
            seen[d.prefix] += 1;
        }
        assert!(seen.iter().all(|&c| (900..1100).contains(&c)), "{seen:?}");
        let fixed = draw(4, OrderingMode::FixedFrequencyOrder, &mut rng);
        assert_eq!(fixed.order, vec![0, 1, 2, 3]);
    }

    #[test]
    fn end_target_scores_only_the_category() {
        let scene = generate_toy_dataset(&ToyRuleSpec::default(), 1)
            .unwrap()
            .scenes
            .remove(0);
        let model =
            Model::<f64>::new(ModelConfig::with_categories(ToyRuleSpec::default().category_names()), 0).unwrap();
        let p = PreparedScene::new(&scene, &model).unwrap();
        let m = p.codes.len();
        let d = Draw {
            order: (0..m).collect(),
            prefix: m,
        };
        let nll = evaluate_nll(&model, &[p.example(&d)]).unwrap()[0];
        let cond = model.conditioner(&p.mask).unwrap();
        let q = cond.query(&p.codes).unwrap();
        let cat = model.category_dist(&q).unwrap();
        assert!((nll + cat.log_prob(3).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn training_loss_is_finite_on_random_scenes() {
        let data = generate_toy_dataset(&ToyRuleSpec::default(), 20).unwrap().scenes;
        let mut cfg = ModelConfig::with_categories(ToyRuleSpec::default().category_names());
        cfg.d_ff = 64;
        cfg.n_layers = 1;
        let model = Model::<f32>::new(cfg, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for s in &data {
            assert!(nll_example(&model, s, &mut rng).unwrap().is_finite());
        }
    }

    #[test]
    fn rejects_empty_dataset_and_bad_config() {
        let mut model = Model::<f32>::new(ModelConfig::with_categories(vec!["a".into()]), 0).unwrap();
        assert!(matches!(
            train(&mut model, &[], &[], &TrainConfig::default()),
            Err(TrainError::EmptyDataset)
        ));
        let bad = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(matches!(train(&mut model, &[], &[], &bad), Err(TrainError::Config(_))));
    }

    #[test]
    fn metrics_csv_layout() {
        let rows = [MetricsRow {
            iteration: 10,
            train_nll: 1.5,
            val_nll: Some(2.25),
            wall_ms: 7,
        }];
        assert_eq!(
            metrics_csv(&rows),
            "iteration,train_nll,val_nll,wall_ms\n10,1.5,2.25,7\n"
        );
    }
}
