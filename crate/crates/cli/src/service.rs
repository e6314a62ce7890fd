//! Request-level operations over one loaded checkpoint. Bodies and replies
//! are JSON values so the HTTP server and the subcommands share parsing,
//! defaults and error classification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

use scenegen::inference::{self, CentroidBox, ThresholdPolicy};
use scenegen::scene::{object_to_value, scene_from_value, scene_to_value, validate_polygon, Bounds, Scene};
use scenegen::{Checkpoint, InferenceError, SceneError};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    /// Malformed request; `path` names the offending field.
    #[error("{path}: {msg}")]
    BadRequest { path: String, msg: String },
    /// Well-formed request the model cannot serve.
    #[error("{0}")]
    Domain(String),
}

impl ServiceError {
    pub fn bad(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Self::BadRequest {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn to_json(&self) -> Value {
        match self {
            Self::BadRequest { path, msg } => json!({"error": msg, "path": path}),
            Self::Domain(msg) => json!({"error": msg}),
        }
    }
}

impl From<InferenceError> for ServiceError {
    fn from(e: InferenceError) -> Self {
        Self::Domain(e.to_string())
    }
}

fn scene_error(prefix: &str, e: SceneError) -> ServiceError {
    let join = |p: &str| {
        if prefix.is_empty() {
            p.to_string()
        } else {
            format!("{prefix}.{p}")
        }
    };
    match e {
        SceneError::Schema { path, msg } => ServiceError::bad(join(&path), msg),
        SceneError::TooFewVertices(_) | SceneError::SelfIntersecting(..) => {
            ServiceError::bad(join("floor_polygon"), e.to_string())
        }
        SceneError::DegenerateBounds(_) => ServiceError::bad(join("bounds"), e.to_string()),
        other => ServiceError::Domain(other.to_string()),
    }
}

fn as_object(body: &Value) -> Result<&Map<String, Value>, ServiceError> {
    body.as_object()
        .ok_or_else(|| ServiceError::bad("$", "expected a JSON object"))
}

fn seed(body: &Map<String, Value>) -> Result<u64, ServiceError> {
    match body.get("seed") {
        None | Some(Value::Null) => Ok(rand::rng().random()),
        Some(v) => v
            .as_u64()
            .ok_or_else(|| ServiceError::bad("seed", "expected a non-negative integer")),
    }
}

fn temperature(body: &Map<String, Value>) -> Result<f64, ServiceError> {
    match body.get("temperature") {
        None | Some(Value::Null) => Ok(1.0),
        Some(v) => v
            .as_f64()
            .filter(|t| t.is_finite() && *t > 0.0)
            .ok_or_else(|| ServiceError::bad("temperature", "expected a positive number")),
    }
}

fn opt_usize(body: &Map<String, Value>, key: &str) -> Result<Option<usize>, ServiceError> {
    match body.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => v
            .as_u64()
            .map(|n| Some(n as usize))
            .ok_or_else(|| ServiceError::bad(key, "expected a non-negative integer")),
    }
}

fn six_numbers(v: &Value, path: &str) -> Result<[f64; 6], ServiceError> {
    let nums: Vec<f64> = v
        .as_array()
        .map(|a| a.iter().filter_map(Value::as_f64).collect())
        .unwrap_or_default();
    nums.try_into()
        .map_err(|_| ServiceError::bad(path, "expected an array of 6 numbers"))
}

fn scene_field(body: &Map<String, Value>, key: &str) -> Result<Scene, ServiceError> {
    let v = body.get(key).ok_or_else(|| ServiceError::bad(key, "missing field"))?;
    let scene = scene_from_value(v).map_err(|e| scene_error(key, e))?;
    validate_polygon(&scene.floor_polygon).map_err(|e| scene_error(key, e))?;
    Ok(scene)
}

/// Shared immutable state of the server: the checkpoint.
#[derive(Debug, Clone)]
pub struct Service {
    checkpoint: Checkpoint,
}

impl Service {
    pub fn new(checkpoint: Checkpoint) -> Self {
        Self { checkpoint }
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.checkpoint
    }

    fn categories(&self) -> &[String] {
        &self.checkpoint.config().category_names
    }

    /// Room from a floor request: `floor_polygon` plus optional `bounds` and
    /// `room_type`. Any `objects` are ignored.
    fn floor(&self, body: &Map<String, Value>) -> Result<Scene, ServiceError> {
        let poly = body
            .get("floor_polygon")
            .ok_or_else(|| ServiceError::bad("floor_polygon", "missing field"))?;
        let bounds = match body.get("bounds") {
            None | Some(Value::Null) => {
                let b = self.checkpoint.meta.default_bounds.ok_or_else(|| {
                    ServiceError::bad("bounds", "missing field and the checkpoint has no default bounds")
                })?;
                Bounds::from_array(b).map_err(|e| ServiceError::Domain(e.to_string()))?
            }
            Some(v) => {
                Bounds::from_array(six_numbers(v, "bounds")?).map_err(|e| ServiceError::bad("bounds", e.to_string()))?
            }
        };
        let room_type = match body.get("room_type") {
            None | Some(Value::Null) => self.checkpoint.meta.room_type.clone().unwrap_or_else(|| "room".into()),
            Some(v) => v
                .as_str()
                .ok_or_else(|| ServiceError::bad("room_type", "expected a string"))?
                .to_string(),
        };
        let doc = json!({"room_type": room_type, "bounds": bounds.to_array(), "floor_polygon": poly, "objects": []});
        let scene = scene_from_value(&doc).map_err(|e| scene_error("", e))?;
        validate_polygon(&scene.floor_polygon).map_err(|e| scene_error("", e))?;
        Ok(scene)
    }

    /// `{floor_polygon, bounds?, room_type?, seed?, temperature?, max_objects?}`
    /// to `{scene, truncated, seed}`.
    pub fn synthesize(&self, body: &Value) -> Result<Value, ServiceError> {
        let body = as_object(body)?;
        let floor = self.floor(body)?;
        let seed = seed(body)?;
        let cap = opt_usize(body, "max_objects")?.unwrap_or(self.checkpoint.config().max_objects);
        let out = inference::synthesize(
            &self.checkpoint.model,
            &floor,
            &mut ChaCha8Rng::seed_from_u64(seed),
            cap,
            temperature(body)?,
        )?;
        Ok(json!({"scene": scene_to_value(&out.scene), "truncated": out.truncated, "seed": seed}))
    }

    /// `{scene, seed?, temperature?, max_objects?}` to `{scene, truncated, seed}`.
    pub fn complete(&self, body: &Value) -> Result<Value, ServiceError> {
        let body = as_object(body)?;
        let scene = scene_field(body, "scene")?;
        let seed = seed(body)?;
        let cap = opt_usize(body, "max_objects")?.unwrap_or(self.checkpoint.config().max_objects);
        let out = inference::complete(
            &self.checkpoint.model,
            &scene,
            &mut ChaCha8Rng::seed_from_u64(seed),
            cap,
            temperature(body)?,
        )?;
        Ok(json!({"scene": scene_to_value(&out.scene), "truncated": out.truncated, "seed": seed}))
    }

    /// `{scene, constraint_box: [x0, y0, z0, x1, y1, z1], seed?, max_attempts?}`
    /// to `{suggestion: object | null, seed}`.
    pub fn suggest(&self, body: &Value) -> Result<Value, ServiceError> {
        let body = as_object(body)?;
        let scene = scene_field(body, "scene")?;
        let raw = body
            .get("constraint_box")
            .ok_or_else(|| ServiceError::bad("constraint_box", "missing field"))?;
        let bx = CentroidBox::from_array(six_numbers(raw, "constraint_box")?);
        if bx.is_degenerate() {
            return Err(ServiceError::bad(
                "constraint_box",
                "box has zero volume or inverted corners",
            ));
        }
        let seed = seed(body)?;
        let attempts = opt_usize(body, "max_attempts")?.unwrap_or(inference::SUGGEST_MAX_ATTEMPTS);
        let found = inference::suggest(
            &self.checkpoint.model,
            &scene,
            &bx,
            &mut ChaCha8Rng::seed_from_u64(seed),
            attempts,
            temperature(body)?,
        )?;
        Ok(json!({"suggestion": found.as_ref().map(object_to_value), "seed": seed}))
    }

    fn category(&self, v: &Value) -> Result<usize, ServiceError> {
        if let Some(i) = v.as_u64() {
            return Ok(i as usize);
        }
        let name = v
            .as_str()
            .ok_or_else(|| ServiceError::bad("category", "expected an index or a category name"))?;
        self.categories()
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| ServiceError::bad("category", format!("unknown category {name:?}")))
    }

    /// `{scene, category: index | name, seed?, temperature?}` to
    /// `{object, scene, seed}` where `scene` has the object appended.
    pub fn place(&self, body: &Value) -> Result<Value, ServiceError> {
        let body = as_object(body)?;
        let mut scene = scene_field(body, "scene")?;
        let category = self.category(
            body.get("category")
                .ok_or_else(|| ServiceError::bad("category", "missing field"))?,
        )?;
        let seed = seed(body)?;
        let o = inference::place_category(
            &self.checkpoint.model,
            &scene,
            category,
            &mut ChaCha8Rng::seed_from_u64(seed),
            temperature(body)?,
        )?;
        let object = object_to_value(&o);
        scene.objects.push(o);
        Ok(json!({"object": object, "scene": scene_to_value(&scene), "seed": seed}))
    }

    /// `{scene, seed?, threshold?}` to `{scene, report, seed}`. Without a
    /// threshold the checkpoint's calibrated one is used, and without that
    /// the lowest-scoring object is always corrected.
    pub fn detect(&self, body: &Value) -> Result<Value, ServiceError> {
        let body = as_object(body)?;
        let scene = scene_field(body, "scene")?;
        let threshold = match body.get("threshold") {
            None | Some(Value::Null) => self.checkpoint.meta.anomaly_threshold,
            Some(v) => Some(
                v.as_f64()
                    .ok_or_else(|| ServiceError::bad("threshold", "expected a number"))?,
            ),
        };
        let policy = threshold.map_or(ThresholdPolicy::Lowest, ThresholdPolicy::Below);
        let seed = seed(body)?;
        let (fixed, report) = inference::detect_and_correct(
            &self.checkpoint.model,
            &scene,
            &mut ChaCha8Rng::seed_from_u64(seed),
            policy,
        )?;
        Ok(json!({
            "scene": scene_to_value(&fixed),
            "flagged": report.flagged(),
            "report": report,
            "seed": seed,
        }))
    }

    /// `{scene}` to `{scores}`, one leave-one-out log-likelihood per object.
    pub fn likelihoods(&self, body: &Value) -> Result<Value, ServiceError> {
        let scene = scene_field(as_object(body)?, "scene")?;
        let scores = inference::object_log_likelihoods(&self.checkpoint.model, &scene)?;
        Ok(json!({"scores": scores}))
    }

    pub fn meta(&self) -> Value {
        json!({
            "categories": self.categories(),
            "config": self.checkpoint.config(),
            "meta": self.checkpoint.meta,
        })
    }
}
