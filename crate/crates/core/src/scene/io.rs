//! Scene JSON documents.
//!
//! ```json
//! {"room_type": "dining", "bounds": [xmin, ymin, zmin, xmax, ymax, zmax],
//!  "floor_polygon": [[x, z], ...],
//!  "objects": [{"category": 0, "category_name": "table", "size": [sx, sy, sz],
//!               "location": [tx, ty, tz], "orientation": 0.0}],
//!  "floor_mask": [0, 1, ...]}
//! ```
//!
//! `size` holds half-extents; catalog matching compares `2 * size` with the
//! full extents stored in the catalog. `floor_mask` is optional: a row-major
//! `R x R` 0/1 raster of the polygon over the `x`/`z` bounds, rows along `z`.
//! Unknown fields are ignored.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use super::{Bounds, FloorMask, Scene, SceneObject};
use crate::error::SceneError;

pub fn scene_from_json(text: &str) -> Result<Scene, SceneError> {
    let value: Value = serde_json::from_str(text)?;
    scene_from_value(&value)
}

pub fn scene_to_json(scene: &Scene) -> String {
    serde_json::to_string_pretty(&scene_to_value(scene)).expect("scene values serialize")
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene, SceneError> {
    scene_from_json(&fs::read_to_string(path)?)
}

pub fn save_scene(path: impl AsRef<Path>, scene: &Scene) -> Result<(), SceneError> {
    fs::write(path, scene_to_json(scene))?;
    Ok(())
}

/// Writes `scene_00000.json`, `scene_00001.json`, ... into `dir`.
pub fn save_scene_dir(dir: impl AsRef<Path>, scenes: &[Scene]) -> Result<(), SceneError> {
    fs::create_dir_all(&dir)?;
    for (i, s) in scenes.iter().enumerate() {
        save_scene(dir.as_ref().join(format!("scene_{i:05}.json")), s)?;
    }
    Ok(())
}

/// Loads every `*.json` file of `dir` in file-name order.
pub fn load_scene_dir(dir: impl AsRef<Path>) -> Result<Vec<Scene>, SceneError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            load_scene(p).map_err(|e| match e {
                SceneError::Schema { path, msg } => SceneError::schema(format!("{}: {path}", p.display()), msg),
                other => other,
            })
        })
        .collect()
}

pub fn object_to_value(o: &SceneObject) -> Value {
    let mut m = Map::new();
    m.insert("category".into(), json!(o.category));
    if let Some(name) = &o.category_name {
        m.insert("category_name".into(), json!(name));
    }
    m.insert("size".into(), json!(o.size));
    m.insert("location".into(), json!(o.location));
    m.insert("orientation".into(), json!(o.orientation));
    Value::Object(m)
}

pub fn scene_to_value(scene: &Scene) -> Value {
    let objects: Vec<Value> = scene.objects.iter().map(object_to_value).collect();
    let mut doc = Map::new();
    doc.insert("room_type".into(), json!(scene.room_type));
    doc.insert("bounds".into(), json!(scene.bounds.to_array()));
    doc.insert("floor_polygon".into(), json!(scene.floor_polygon));
    doc.insert("objects".into(), Value::Array(objects));
    if let Some(mask) = &scene.floor_mask {
        doc.insert("floor_mask".into(), json!(mask.cells()));
    }
    Value::Object(doc)
}

pub fn scene_from_value(value: &Value) -> Result<Scene, SceneError> {
    let doc = as_object(value, "$")?;
    let room_type = match doc.get("room_type") {
        None => return Err(SceneError::schema("room_type", "missing field")),
        Some(v) => v
            .as_str()
            .ok_or_else(|| SceneError::schema("room_type", "expected a string"))?
            .to_string(),
    };
    let bounds = Bounds::from_array(numbers::<6>(required(doc, "bounds", "bounds")?, "bounds")?)
        .map_err(|e| SceneError::schema("bounds", e.to_string()))?;
    let poly_value = required(doc, "floor_polygon", "floor_polygon")?;
    let poly_items = poly_value
        .as_array()
        .ok_or_else(|| SceneError::schema("floor_polygon", "expected an array"))?;
    let floor_polygon = poly_items
        .iter()
        .enumerate()
        .map(|(i, v)| numbers::<2>(v, &format!("floor_polygon[{i}]")))
        .collect::<Result<Vec<_>, _>>()?;
    let objects = required(doc, "objects", "objects")?
        .as_array()
        .ok_or_else(|| SceneError::schema("objects", "expected an array"))?
        .iter()
        .enumerate()
        .map(|(i, v)| object_from_value(v, &format!("objects[{i}]")))
        .collect::<Result<Vec<_>, _>>()?;
    let floor_mask = match doc.get("floor_mask") {
        None | Some(Value::Null) => None,
        Some(v) => {
            let cells = v
                .as_array()
                .ok_or_else(|| SceneError::schema("floor_mask", "expected an array"))?
                .iter()
                .enumerate()
                .map(|(i, c)| match c.as_u64() {
                    Some(b @ (0 | 1)) => Ok(b as u8),
                    _ => Err(SceneError::schema(format!("floor_mask[{i}]"), "expected 0 or 1")),
                })
                .collect::<Result<Vec<u8>, _>>()?;
            let res = (cells.len() as f64).sqrt().round() as usize;
            if res * res != cells.len() || res == 0 {
                return Err(SceneError::schema("floor_mask", "length is not a positive square"));
            }
            Some(FloorMask::from_cells(res, cells).map_err(|e| SceneError::schema("floor_mask", e.to_string()))?)
        }
    };
    Ok(Scene {
        room_type,
        bounds,
        floor_polygon,
        objects,
        floor_mask,
    })
}

/// Parses one object; schema errors carry `path` as prefix.
pub fn object_from_value(v: &Value, path: &str) -> Result<SceneObject, SceneError> {
    let obj = as_object(v, path)?;
    let cat_path = format!("{path}.category");
    let category = required(obj, "category", &cat_path)?
        .as_u64()
        .ok_or_else(|| SceneError::schema(&cat_path, "expected a non-negative integer"))? as usize;
    let category_name = match obj.get("category_name") {
        None | Some(Value::Null) => None,
        Some(n) => Some(
            n.as_str()
                .ok_or_else(|| SceneError::schema(format!("{path}.category_name"), "expected a string"))?
                .to_string(),
        ),
    };
    let size_path = format!("{path}.size");
    let size = numbers::<3>(required(obj, "size", &size_path)?, &size_path)?;
    let loc_path = format!("{path}.location");
    let location = numbers::<3>(required(obj, "location", &loc_path)?, &loc_path)?;
    let ori_path = format!("{path}.orientation");
    let orientation = required(obj, "orientation", &ori_path)?
        .as_f64()
        .ok_or_else(|| SceneError::schema(&ori_path, "expected a number"))?;
    let o = SceneObject {
        category,
        category_name,
        size,
        location,
        orientation,
    };
    o.validate().map_err(|msg| SceneError::schema(path, msg))?;
    Ok(o)
}

fn as_object<'a>(v: &'a Value, path: &str) -> Result<&'a Map<String, Value>, SceneError> {
    v.as_object()
        .ok_or_else(|| SceneError::schema(path, "expected an object"))
}

fn required<'a>(obj: &'a Map<String, Value>, key: &str, path: &str) -> Result<&'a Value, SceneError> {
    obj.get(key).ok_or_else(|| SceneError::schema(path, "missing field"))
}

fn numbers<const N: usize>(v: &Value, path: &str) -> Result<[f64; N], SceneError> {
    let items = v
        .as_array()
        .ok_or_else(|| SceneError::schema(path, format!("expected an array of {N} numbers")))?;
    if items.len() != N {
        return Err(SceneError::schema(
            path,
            format!("expected {N} numbers, got {}", items.len()),
        ));
    }
    let mut out = [0.0; N];
    for (i, item) in items.iter().enumerate() {
        out[i] = item
            .as_f64()
            .ok_or_else(|| SceneError::schema(format!("{path}[{i}]"), "expected a number"))?;
    }
    Ok(out)
}
