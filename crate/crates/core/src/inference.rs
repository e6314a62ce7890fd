//! Generation-time uses of a trained model: synthesis from an empty room,
//! completion of a partial scene, forced-category placement, constrained
//! suggestion by rejection sampling, and leave-one-out anomaly scoring with
//! location resampling.
//!
//! Contexts are consumed as sets. In the invariant mode the context is put
//! into a canonical order before encoding, so outputs do not depend on the
//! stored order of the input objects even at the bit level.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::LogisticMixture1D;
use crate::error::{InferenceError, ModelError};
use crate::model::{Conditioner, Model, ObjectCode, OrderingMode, QueryVector};
use crate::scene::{Normalizer, Scene, SceneObject};
use crate::tensor::Real;
use crate::training::frequency_order;

/// End symbols drawn before [`suggest`] gives up and suggests nothing.
pub const SUGGEST_END_LIMIT: usize = 25;
pub const SUGGEST_MAX_ATTEMPTS: usize = 1000;
/// Location samples tried per flagged object in [`detect_and_correct`].
pub const CORRECTION_SAMPLES: usize = 10;
/// Percentile of held-out object scores used as the anomaly threshold.
pub const ANOMALY_PERCENTILE: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub enum Generated {
    Object(SceneObject),
    End,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synthesis {
    pub scene: Scene,
    /// The object cap was reached before the end symbol.
    pub truncated: bool,
}

/// Axis-aligned region, in meters, that a suggested centroid must fall in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CentroidBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl CentroidBox {
    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            min: [a[0], a[1], a[2]],
            max: [a[3], a[4], a[5]],
        }
    }

    pub fn is_degenerate(&self) -> bool {
        (0..3).any(|i| !(self.max[i] > self.min[i]) || !self.min[i].is_finite() || !self.max[i].is_finite())
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

/// When [`detect_and_correct`] flags the lowest-scoring object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdPolicy {
    /// Flag it when its score is below this log-likelihood.
    Below(f64),
    /// Always flag it.
    Lowest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correction {
    pub index: usize,
    pub old_location: [f64; 3],
    pub new_location: [f64; 3],
    pub old_log_likelihood: f64,
    pub new_log_likelihood: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    /// Leave-one-out log-likelihood of every input object.
    pub scores: Vec<f64>,
    pub threshold: Option<f64>,
    pub corrections: Vec<Correction>,
}

impl DetectionReport {
    pub fn flagged(&self) -> Vec<usize> {
        self.corrections.iter().map(|c| c.index).collect()
    }
}

fn canonical_cmp(a: &ObjectCode, b: &ObjectCode) -> std::cmp::Ordering {
    let key = |o: &ObjectCode| {
        let mut k = vec![o.category as f64];
        k.extend(o.attributes());
        k
    };
    key(a)
        .iter()
        .zip(key(b).iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

/// Encodes `objects` in the presentation order the model's mode expects.
fn context_codes<S: Real>(model: &Model<S>, objects: &[SceneObject], n: &Normalizer) -> Vec<ObjectCode> {
    match model.config().ordering_mode {
        OrderingMode::PermutationInvariant => {
            let mut codes: Vec<ObjectCode> = objects.iter().map(|o| ObjectCode::encode(o, n)).collect();
            codes.sort_by(canonical_cmp);
            codes
        }
        OrderingMode::FixedFrequencyOrder => {
            let sorted = match model.category_frequency() {
                Some(f) => frequency_order(objects, f),
                None => objects.to_vec(),
            };
            sorted.iter().map(|o| ObjectCode::encode(o, n)).collect()
        }
        OrderingMode::PermutedWithPositions => objects.iter().map(|o| ObjectCode::encode(o, n)).collect(),
    }
}

/// Floor feature and normalizer of one room, reused across steps.
struct Room<'m, S: Real> {
    cond: Conditioner<'m, S>,
    norm: Normalizer,
}

impl<'m, S: Real> Room<'m, S> {
    fn new(model: &'m Model<S>, scene: &Scene) -> Result<Self, InferenceError> {
        let mask = scene
            .floor_mask_at(model.config().floor_resolution)
            .map_err(ModelError::from)?;
        Ok(Self {
            cond: model.conditioner(&mask)?,
            norm: Normalizer::new(&scene.bounds),
        })
    }

    fn model(&self) -> &'m Model<S> {
        self.cond.model()
    }

    fn query(&self, objects: &[SceneObject]) -> Result<QueryVector<S>, InferenceError> {
        Ok(self.cond.query(&context_codes(self.model(), objects, &self.norm))?)
    }

    fn decode(&self, code: &ObjectCode) -> SceneObject {
        code.decode(&self.norm, &self.model().config().category_names)
    }

    /// Leave-one-out log-likelihood of `objects[index]`.
    fn object_score(&self, objects: &[SceneObject], index: usize) -> Result<f64, InferenceError> {
        let others: Vec<SceneObject> = objects
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != index)
            .map(|(_, o)| o.clone())
            .collect();
        let target = ObjectCode::encode(&objects[index], &self.norm);
        Ok(self
            .cond
            .log_prob(&context_codes(self.model(), &others, &self.norm), Some(&target))?)
    }
}

fn sample_dims<R: Rng + ?Sized>(dists: &[LogisticMixture1D], rng: &mut R, temperature: f64) -> [f64; 3] {
    [
        dists[0].sample(rng, temperature),
        dists[1].sample(rng, temperature),
        dists[2].sample(rng, temperature),
    ]
}

/// Samples the rest of the attribute chain after category and location.
fn finish_object<S: Real, R: Rng + ?Sized>(
    model: &Model<S>,
    q: &QueryVector<S>,
    category: usize,
    location: [f64; 3],
    rng: &mut R,
    temperature: f64,
) -> Result<ObjectCode, InferenceError> {
    let orientation = model.orientation_dist(q, category, location)?.sample(rng, temperature);
    let size = sample_dims(&model.size_dists(q, category, location, orientation)?, rng, temperature);
    Ok(ObjectCode {
        category,
        location,
        orientation,
        size,
    })
}

fn check_forced<S: Real>(model: &Model<S>, category: usize) -> Result<(), InferenceError> {
    let classes = model.config().categories();
    if category == classes {
        return Err(ModelError::EndSymbol("a forced category").into());
    }
    if category > classes {
        return Err(ModelError::CategoryOutOfRange { category, classes }.into());
    }
    Ok(())
}

fn next_in_room<S: Real, R: Rng + ?Sized>(
    room: &Room<'_, S>,
    objects: &[SceneObject],
    rng: &mut R,
    forced_category: Option<usize>,
    temperature: f64,
) -> Result<Generated, InferenceError> {
    let model = room.model();
    let cap = model.config().max_objects;
    if objects.len() >= cap {
        return Err(InferenceError::Full(cap));
    }
    if let Some(c) = forced_category {
        check_forced(model, c)?;
    }
    let q = room.query(objects)?;
    let category = match forced_category {
        Some(c) => c,
        None => model.category_dist(&q)?.sample(rng),
    };
    if category == model.config().end_symbol() {
        return Ok(Generated::End);
    }
    let location = sample_dims(&model.location_dists(&q, category)?, rng, temperature);
    let code = finish_object(model, &q, category, location, rng, temperature)?;
    Ok(Generated::Object(room.decode(&code)))
}

/// Samples the next object for `scene`, or the end symbol. A forced category
/// skips the category draw.
pub fn generate_next<S: Real, R: Rng + ?Sized>(
    model: &Model<S>,
    scene: &Scene,
    rng: &mut R,
    forced_category: Option<usize>,
    temperature: f64,
) -> Result<Generated, InferenceError> {
    let room = Room::new(model, scene)?;
    next_in_room(&room, &scene.objects, rng, forced_category, temperature)
}

/// Extends `scene` until the end symbol or `max_objects` objects.
pub fn complete<S: Real, R: Rng + ?Sized>(
    model: &Model<S>,
    scene: &Scene,
    rng: &mut R,
    max_objects: usize,
    temperature: f64,
) -> Result<Synthesis, InferenceError> {
    let room = Room::new(model, scene)?;
    let cap = max_objects.min(model.config().max_objects);
    let mut out = scene.clone();
    loop {
        if out.objects.len() >= cap {
            return Ok(Synthesis {
                scene: out,
                truncated: true,
            });
        }
        match next_in_room(&room, &out.objects, rng, None, temperature)? {
            Generated::End => {
                return Ok(Synthesis {
                    scene: out,
                    truncated: false,
                })
            }
            Generated::Object(o) => out.objects.push(o),
        }
    }
}

/// Generates a scene from the room of `floor` with no objects.
pub fn synthesize<S: Real, R: Rng + ?Sized>(
    model: &Model<S>,
    floor: &Scene,
    rng: &mut R,
    max_objects: usize,
    temperature: f64,
) -> Result<Synthesis, InferenceError> {
    complete(model, &floor.empty_like(), rng, max_objects, temperature)
}

/// One object of `category` placed by the model.
pub fn place_category<S: Real, R: Rng + ?Sized>(
    model: &Model<S>,
    scene: &Scene,
    category: usize,
    rng: &mut R,
    temperature: f64,
) -> Result<SceneObject, InferenceError> {
    match generate_next(model, scene, rng, Some(category), temperature)? {
        Generated::Object(o) => Ok(o),
        Generated::End => unreachable!("forced categories are never the end symbol"),
    }
}

/// Log-likelihood of `scene.objects[index]` given the floor and all other
/// objects, in model-frame units.
pub fn object_log_likelihood<S: Real>(model: &Model<S>, scene: &Scene, index: usize) -> Result<f64, InferenceError> {
    if index >= scene.objects.len() {
        return Err(InferenceError::IndexOutOfRange {
            index,
            len: scene.objects.len(),
        });
    }
    Room::new(model, scene)?.object_score(&scene.objects, index)
}

/// Leave-one-out log-likelihood of every object.
pub fn object_log_likelihoods<S: Real>(model: &Model<S>, scene: &Scene) -> Result<Vec<f64>, InferenceError> {
    let room = Room::new(model, scene)?;
    (0..scene.objects.len())
        .map(|i| room.object_score(&scene.objects, i))
        .collect()
}

/// `p`-th percentile (linear interpolation) of the leave-one-out scores of
/// every object in `scenes`.
pub fn calibrate_anomaly_threshold<S: Real>(model: &Model<S>, scenes: &[Scene], p: f64) -> Result<f64, InferenceError> {
    let mut scores = Vec::new();
    for s in scenes {
        scores.extend(object_log_likelihoods(model, s)?);
    }
    if scores.is_empty() {
        return Err(InferenceError::EmptyScene);
    }
    scores.sort_by(f64::total_cmp);
    let pos = (p / 100.0).clamp(0.0, 1.0) * (scores.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    Ok(scores[lo] + (scores[hi] - scores[lo]) * (pos - lo as f64))
}

/// Flags the lowest-scoring object under `policy` and moves it to the best
/// of [`CORRECTION_SAMPLES`] locations drawn from its conditional location
/// head. Category, size and orientation are kept.
pub fn detect_and_correct<S: Real, R: Rng + ?Sized>(
    model: &Model<S>,
    scene: &Scene,
    rng: &mut R,
    policy: ThresholdPolicy,
) -> Result<(Scene, DetectionReport), InferenceError> {
    if scene.objects.is_empty() {
        return Err(InferenceError::EmptyScene);
    }
    let room = Room::new(model, scene)?;
    let scores = (0..scene.objects.len())
        .map(|i| room.object_score(&scene.objects, i))
        .collect::<Result<Vec<_>, _>>()?;
    let (worst, &worst_score) = scores
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty");
    let threshold = match policy {
        ThresholdPolicy::Below(t) => Some(t),
        ThresholdPolicy::Lowest => None,
    };
    let mut out = scene.clone();
    let mut corrections = Vec::new();
    if threshold.is_none_or(|t| worst_score < t) {
        let target = ObjectCode::encode(&scene.objects[worst], &room.norm);
        let others: Vec<SceneObject> = scene
            .objects
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != worst)
            .map(|(_, o)| o.clone())
            .collect();
        let q = room.query(&others)?;
        let c = target.category;
        let base = model.category_dist(&q)?.log_prob(c).map_err(ModelError::from)?;
        let loc = model.location_dists(&q, c)?;
        let mut best: Option<([f64; 3], f64)> = None;
        for _ in 0..CORRECTION_SAMPLES {
            let t = sample_dims(&loc, rng, 1.0);
            let mut lp = base + loc.iter().zip(t).map(|(d, x)| d.log_prob(x)).sum::<f64>();
            lp += model.orientation_dist(&q, c, t)?.log_prob(target.orientation);
            let sizes = model.size_dists(&q, c, t, target.orientation)?;
            lp += sizes.iter().zip(target.size).map(|(d, x)| d.log_prob(x)).sum::<f64>();
            if best.is_none_or(|(_, b)| lp > b) {
                best = Some((t, lp));
            }
        }
        let (t, lp) = best.expect("at least one sample");
        let new_location = room.norm.location_inv(t);
        corrections.push(Correction {
            index: worst,
            old_location: scene.objects[worst].location,
            new_location,
            old_log_likelihood: worst_score,
            new_log_likelihood: lp,
        });
        out.objects[worst].location = new_location;
    }
    Ok((
        out,
        DetectionReport {
            scores,
            threshold,
            corrections,
        },
    ))
}

/// Rejection-samples next objects until one has its centroid inside
/// `constraint`. Returns `None` after [`SUGGEST_END_LIMIT`] end symbols or
/// `max_attempts` draws. Every attempt redraws the category.
pub fn suggest<S: Real, R: Rng + ?Sized>(
    model: &Model<S>,
    scene: &Scene,
    constraint: &CentroidBox,
    rng: &mut R,
    max_attempts: usize,
    temperature: f64,
) -> Result<Option<SceneObject>, InferenceError> {
    if constraint.is_degenerate() {
        return Err(InferenceError::DegenerateConstraint);
    }
    let cap = model.config().max_objects;
    if scene.objects.len() >= cap {
        return Err(InferenceError::Full(cap));
    }
    let room = Room::new(model, scene)?;
    let q = room.query(&scene.objects)?;
    let categories = model.category_dist(&q)?;
    let end = model.config().end_symbol();
    let mut location_heads: Vec<Option<Vec<LogisticMixture1D>>> = vec![None; end];
    let mut ends = 0;
    for _ in 0..max_attempts {
        let c = categories.sample(rng);
        if c == end {
            ends += 1;
            if ends >= SUGGEST_END_LIMIT {
                return Ok(None);
            }
            continue;
        }
        if location_heads[c].is_none() {
            location_heads[c] = Some(model.location_dists(&q, c)?);
        }
        let t = sample_dims(location_heads[c].as_deref().expect("filled above"), rng, temperature);
        if constraint.contains(room.norm.location_inv(t)) {
            let code = finish_object(model, &q, c, t, rng, temperature)?;
            return Ok(Some(room.decode(&code)));
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::scene::{generate_toy_dataset, FloorMask, ToyRuleSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_model(seed: u64) -> Model<f32> {
        let mut c = ModelConfig::with_categories(ToyRuleSpec::default().category_names());
        c.d_ff = 64;
        c.n_layers = 2;
        c.max_objects = 8;
        Model::new(c, seed).unwrap()
    }

    fn toy_scene() -> Scene {
        generate_toy_dataset(&ToyRuleSpec::default(), 1)
            .unwrap()
            .scenes
            .remove(0)
    }

    #[test]
    fn forced_category_is_honored() {
        let m = small_model(0);
        let s = toy_scene();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let o = place_category(&m, &s, 2, &mut rng, 1.0).unwrap();
            assert_eq!(o.category, 2);
            assert_eq!(o.category_name.as_deref(), Some("lamp"));
        }
        assert!(matches!(
            generate_next(&m, &s, &mut rng, Some(3), 1.0),
            Err(InferenceError::Model(ModelError::EndSymbol(_)))
        ));
        assert!(matches!(
            place_category(&m, &s, 9, &mut rng, 1.0),
            Err(InferenceError::Model(ModelError::CategoryOutOfRange { .. }))
        ));
    }

    #[test]
    fn generation_is_seeded() {
        let m = small_model(1);
        let s = toy_scene();
        let a = synthesize(&m, &s, &mut ChaCha8Rng::seed_from_u64(4), 30, 1.0).unwrap();
        let b = synthesize(&m, &s, &mut ChaCha8Rng::seed_from_u64(4), 30, 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_floor_still_terminates() {
        let m = small_model(2);
        let mut s = toy_scene().empty_like();
        s.floor_mask = Some(FloorMask::filled(64, false));
        let out = synthesize(&m, &s, &mut ChaCha8Rng::seed_from_u64(0), 30, 1.0).unwrap();
        assert!(out.scene.objects.len() <= 8);
    }

    #[test]
    fn completion_keeps_input_objects() {
        let m = small_model(3);
        let s = toy_scene();
        let before = s.clone();
        let out = complete(&m, &s, &mut ChaCha8Rng::seed_from_u64(1), 30, 1.0).unwrap();
        assert_eq!(s, before);
        assert_eq!(&out.scene.objects[..s.objects.len()], &s.objects[..]);
    }

    #[test]
    fn scores_ignore_storage_order() {
        let m = small_model(4);
        let s = toy_scene();
        let scores = object_log_likelihoods(&m, &s).unwrap();
        let mut rev = s.clone();
        rev.objects.reverse();
        let rev_scores = object_log_likelihoods(&m, &rev).unwrap();
        for (i, sc) in scores.iter().enumerate() {
            assert_eq!(*sc, rev_scores[s.objects.len() - 1 - i]);
        }
        let mut dup = s.clone();
        dup.objects.push(s.objects[0].clone());
        let d = object_log_likelihoods(&m, &dup).unwrap();
        assert_eq!(d[0], d[s.objects.len()]);
        assert!(matches!(
            object_log_likelihood(&m, &s, 99),
            Err(InferenceError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn correction_keeps_other_attributes() {
        let m = small_model(5);
        let s = toy_scene();
        let (fixed, report) =
            detect_and_correct(&m, &s, &mut ChaCha8Rng::seed_from_u64(2), ThresholdPolicy::Lowest).unwrap();
        assert_eq!(report.corrections.len(), 1);
        let i = report.corrections[0].index;
        assert_eq!(fixed.objects[i].category, s.objects[i].category);
        assert_eq!(fixed.objects[i].size, s.objects[i].size);
        assert_eq!(fixed.objects[i].orientation, s.objects[i].orientation);
        for (j, o) in fixed.objects.iter().enumerate() {
            if j != i {
                assert_eq!(o, &s.objects[j]);
            }
        }
        let (same, none) = detect_and_correct(
            &m,
            &s,
            &mut ChaCha8Rng::seed_from_u64(2),
            ThresholdPolicy::Below(f64::NEG_INFINITY),
        )
        .unwrap();
        assert!(none.corrections.is_empty());
        assert_eq!(same, s);
    }

    #[test]
    fn suggestions_respect_the_box() {
        let m = small_model(6);
        let s = toy_scene();
        let bx = CentroidBox::from_array([-3.2, 0.0, -3.2, 0.0, 3.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            if let Some(o) = suggest(&m, &s, &bx, &mut rng, 1000, 1.0).unwrap() {
                assert!(bx.contains(o.location));
            }
        }
        let flat = CentroidBox::from_array([0.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(matches!(
            suggest(&m, &s, &flat, &mut rng, 10, 1.0),
            Err(InferenceError::DegenerateConstraint)
        ));
    }
}
