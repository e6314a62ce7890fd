//! Scene schema, floor rasterization, box overlap, filters, asset retrieval
//! and the synthetic rule-based scene generator.
//!
//! Conventions: `y` is up and the floor lies in the `x`/`z` plane. Sizes are
//! half-extents, so a box spans `location ± size` along its local axes.
//! `orientation` rotates the box about `y`; its local front (`+z`) points
//! along `(sin θ, cos θ)` in world `(x, z)`.

mod catalog;
mod filter;
mod floor;
mod geometry;
mod io;
mod toy;

use std::f64::consts::PI;

pub use catalog::{Catalog, CatalogEntry};
pub use filter::{filter_scenes, FilterReport, FilterRules, RejectReason};
pub use floor::{point_in_polygon, polygon_area, rasterize_floor, validate_polygon, FloorMask};
pub use geometry::{boxes_overlap, footprint_corners};
pub use io::{
    load_scene, load_scene_dir, object_from_value, object_to_value, save_scene, save_scene_dir, scene_from_json,
    scene_from_value, scene_to_json, scene_to_value,
};
pub use toy::{generate_toy_dataset, PlacementRule, SatelliteRule, ToyCategory, ToyDataset, ToyRuleSpec};

use crate::error::SceneError;

/// A labeled, yaw-oriented 3-D bounding box.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub category: usize,
    pub category_name: Option<String>,
    /// Half-extents in meters.
    pub size: [f64; 3],
    /// Box centroid in meters.
    pub location: [f64; 3],
    /// Rotation about the up axis in radians, within `[-π, π]`.
    pub orientation: f64,
}

impl SceneObject {
    pub fn new(category: usize, size: [f64; 3], location: [f64; 3], orientation: f64) -> Self {
        Self {
            category,
            category_name: None,
            size,
            location,
            orientation,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.size.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(format!("size {:?} must be positive", self.size));
        }
        if self.location.iter().any(|v| !v.is_finite()) {
            return Err("location must be finite".into());
        }
        if !(-PI - 1e-9..=PI + 1e-9).contains(&self.orientation) {
            return Err(format!("orientation {} outside [-pi, pi]", self.orientation));
        }
        Ok(())
    }

    /// Floor-plane position `(x, z)`.
    pub fn floor_xz(&self) -> [f64; 2] {
        [self.location[0], self.location[2]]
    }
}

/// Axis-aligned room extent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Bounds {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self, SceneError> {
        if (0..3).any(|i| !(max[i] > min[i]) || !min[i].is_finite() || !max[i].is_finite()) {
            return Err(SceneError::DegenerateBounds([
                min[0], min[1], min[2], max[0], max[1], max[2],
            ]));
        }
        Ok(Self { min, max })
    }

    pub fn from_array(a: [f64; 6]) -> Result<Self, SceneError> {
        Self::new([a[0], a[1], a[2]], [a[3], a[4], a[5]])
    }

    pub fn to_array(self) -> [f64; 6] {
        [
            self.min[0],
            self.min[1],
            self.min[2],
            self.max[0],
            self.max[1],
            self.max[2],
        ]
    }

    pub fn center(&self) -> [f64; 3] {
        std::array::from_fn(|i| 0.5 * (self.min[i] + self.max[i]))
    }

    pub fn half_range(&self) -> [f64; 3] {
        std::array::from_fn(|i| 0.5 * (self.max[i] - self.min[i]))
    }
}

/// An unordered collection of objects in a room with a floor outline.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub room_type: String,
    pub bounds: Bounds,
    /// Floor outline as `(x, z)` vertices.
    pub floor_polygon: Vec<[f64; 2]>,
    pub objects: Vec<SceneObject>,
    /// Precomputed raster of the floor polygon over `bounds`.
    pub floor_mask: Option<FloorMask>,
}

impl Scene {
    pub fn new(room_type: impl Into<String>, bounds: Bounds, floor_polygon: Vec<[f64; 2]>) -> Self {
        Self {
            room_type: room_type.into(),
            bounds,
            floor_polygon,
            objects: Vec::new(),
            floor_mask: None,
        }
    }

    /// Floor raster at `resolution`, reusing the stored one when it matches.
    pub fn floor_mask_at(&self, resolution: usize) -> Result<FloorMask, SceneError> {
        match &self.floor_mask {
            Some(m) if m.resolution() == resolution => Ok(m.clone()),
            _ => rasterize_floor(&self.floor_polygon, &self.bounds, resolution),
        }
    }

    /// Copy with the floor mask computed and stored.
    pub fn with_mask(mut self, resolution: usize) -> Result<Self, SceneError> {
        self.floor_mask = Some(self.floor_mask_at(resolution)?);
        Ok(self)
    }

    pub fn contains_xz(&self, xz: [f64; 2]) -> bool {
        point_in_polygon(xz, &self.floor_polygon)
    }

    /// Same room and floor, no objects.
    pub fn empty_like(&self) -> Self {
        Self {
            room_type: self.room_type.clone(),
            bounds: self.bounds,
            floor_polygon: self.floor_polygon.clone(),
            objects: Vec::new(),
            floor_mask: self.floor_mask.clone(),
        }
    }

    /// Rotates the room about the center of `bounds` by `angle` radians about
    /// the up axis. Orientations are shifted and re-wrapped; the floor mask is
    /// re-rasterized when one was stored.
    pub fn rotated(&self, angle: f64) -> Result<Self, SceneError> {
        let c = self.bounds.center();
        let rot = |x: f64, z: f64| -> [f64; 2] {
            let (dx, dz) = (x - c[0], z - c[2]);
            let (s, co) = angle.sin_cos();
            [c[0] + dx * co + dz * s, c[2] - dx * s + dz * co]
        };
        let floor_polygon: Vec<[f64; 2]> = self.floor_polygon.iter().map(|p| rot(p[0], p[1])).collect();
        let objects = self
            .objects
            .iter()
            .map(|o| {
                let [x, z] = rot(o.location[0], o.location[2]);
                SceneObject {
                    location: [x, o.location[1], z],
                    orientation: wrap_angle(o.orientation + angle),
                    ..o.clone()
                }
            })
            .collect();
        let floor_mask = match &self.floor_mask {
            Some(m) => Some(rasterize_floor(&floor_polygon, &self.bounds, m.resolution())?),
            None => None,
        };
        Ok(Self {
            room_type: self.room_type.clone(),
            bounds: self.bounds,
            floor_polygon,
            objects,
            floor_mask,
        })
    }
}

/// Wraps an angle into `[-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    if (-PI..=PI).contains(&a) {
        return a;
    }
    let mut w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w < -PI {
        w = -PI;
    }
    w
}

/// Maps between room coordinates in meters and the `[-1, 1]` frame the
/// model consumes. Locations are centered and scaled by the bounds half
/// range, sizes are scaled by the same half range, and angles are divided by π.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalizer {
    center: [f64; 3],
    half: [f64; 3],
}

impl Normalizer {
    pub fn new(bounds: &Bounds) -> Self {
        Self {
            center: bounds.center(),
            half: bounds.half_range(),
        }
    }

    pub fn location(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|i| (p[i] - self.center[i]) / self.half[i])
    }

    pub fn location_inv(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|i| p[i] * self.half[i] + self.center[i])
    }

    pub fn size(&self, s: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|i| s[i] / self.half[i])
    }

    pub fn size_inv(&self, s: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|i| s[i] * self.half[i])
    }

    pub fn orientation(&self, r: f64) -> f64 {
        r / PI
    }

    pub fn orientation_inv(&self, r: f64) -> f64 {
        r * PI
    }
}
