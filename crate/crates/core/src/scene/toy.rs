//! Rule-based synthetic rooms with known statistics.
//!
//! Each rule places one anchor object and a random number of satellites at
//! bounded distances from it. Rooms are axis-aligned rectangles centered in
//! a shared bounds box, so the normalized model frame keeps metric scale
//! across rooms.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{boxes_overlap, footprint_corners, point_in_polygon, Bounds, Scene, SceneObject};
use crate::error::SceneError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyCategory {
    pub name: String,
    /// Nominal half-extents in meters.
    pub half_extents: [f64; 3],
    /// Relative uniform jitter applied to each extent.
    pub jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SatelliteRule {
    pub category: usize,
    /// Inclusive count range, sampled uniformly.
    pub count: [usize; 2],
    /// Center-to-center distance range from the anchor in meters.
    pub distance: [f64; 2],
    /// Turn the satellite's front toward the anchor.
    pub face_anchor: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementRule {
    pub anchor: usize,
    pub satellites: Vec<SatelliteRule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyRuleSpec {
    pub room_type: String,
    pub categories: Vec<ToyCategory>,
    pub rules: Vec<PlacementRule>,
    /// Range of room half-widths along x and z, in meters.
    pub room_half_extent: [f64; 2],
    pub room_height: f64,
    /// Half-width of the shared square bounds in the floor plane.
    pub bounds_half_extent: f64,
    /// Minimum distance from an anchor center to any wall.
    pub anchor_wall_margin: f64,
    pub seed: u64,
}

impl Default for ToyRuleSpec {
    /// A table with 2-4 chairs around it and a floor lamp half of the time.
    fn default() -> Self {
        let cat = |name: &str, half_extents| ToyCategory {
            name: name.into(),
            half_extents,
            jitter: 0.05,
        };
        Self {
            room_type: "toy_dining".into(),
            categories: vec![
                cat("table", [0.6, 0.38, 0.4]),
                cat("chair", [0.22, 0.45, 0.22]),
                cat("lamp", [0.18, 0.8, 0.18]),
            ],
            rules: vec![PlacementRule {
                anchor: 0,
                satellites: vec![
                    SatelliteRule {
                        category: 1,
                        count: [2, 4],
                        distance: [0.8, 1.1],
                        face_anchor: true,
                    },
                    SatelliteRule {
                        category: 2,
                        count: [0, 1],
                        distance: [1.0, 1.5],
                        face_anchor: false,
                    },
                ],
            }],
            room_half_extent: [2.0, 3.0],
            room_height: 3.0,
            bounds_half_extent: 3.2,
            anchor_wall_margin: 1.0,
            seed: 0,
        }
    }
}

impl ToyRuleSpec {
    pub fn validate(&self) -> Result<(), SceneError> {
        let n = self.categories.len();
        if n == 0 {
            return Err(SceneError::InvalidSpec("no categories".into()));
        }
        for r in &self.rules {
            if r.anchor >= n {
                return Err(SceneError::UnknownCategory(r.anchor));
            }
            for s in &r.satellites {
                if s.category >= n {
                    return Err(SceneError::UnknownCategory(s.category));
                }
                if s.count[0] > s.count[1] || !(s.distance[0] >= 0.0 && s.distance[0] <= s.distance[1]) {
                    return Err(SceneError::InvalidSpec(format!(
                        "bad satellite ranges for category {}",
                        s.category
                    )));
                }
            }
        }
        let [lo, hi] = self.room_half_extent;
        if !(lo > 0.0 && lo <= hi && hi <= self.bounds_half_extent && self.room_height > 0.0) {
            return Err(SceneError::InvalidSpec(
                "room size range does not fit the bounds".into(),
            ));
        }
        if self
            .categories
            .iter()
            .any(|c| c.half_extents.iter().any(|&e| e <= 0.0) || !(0.0..1.0).contains(&c.jitter))
        {
            return Err(SceneError::InvalidSpec("category extents must be positive".into()));
        }
        Ok(())
    }

    pub fn category_names(&self) -> Vec<String> {
        self.categories.iter().map(|c| c.name.clone()).collect()
    }

    pub fn bounds(&self) -> Bounds {
        let h = self.bounds_half_extent;
        Bounds::new([-h, 0.0, -h], [h, self.room_height, h]).expect("validated spec has positive bounds")
    }
}

/// Generated scenes plus the number of scenes dropped because no attempt
/// satisfied every rule.
#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub scenes: Vec<Scene>,
    pub skipped: usize,
}

const ATTEMPTS_PER_SCENE: usize = 1000;
const TRIES_PER_OBJECT: usize = 50;

/// Deterministic given `spec.seed`.
pub fn generate_toy_dataset(spec: &ToyRuleSpec, n: usize) -> Result<ToyDataset, SceneError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut scenes = Vec::with_capacity(n);
    let mut skipped = 0;
    for _ in 0..n {
        match (0..ATTEMPTS_PER_SCENE).find_map(|_| try_scene(spec, &mut rng)) {
            Some(s) => scenes.push(s),
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("toy generator skipped {skipped} unsatisfiable scenes");
    }
    Ok(ToyDataset { scenes, skipped })
}

fn sized(spec: &ToyRuleSpec, category: usize, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let c = &spec.categories[category];
    c.half_extents
        .map(|e| e * (1.0 + c.jitter * rng.random_range(-1.0..=1.0)))
}

fn fits(scene: &Scene, o: &SceneObject) -> bool {
    footprint_corners(o)
        .iter()
        .all(|&p| point_in_polygon(p, &scene.floor_polygon))
        && scene.objects.iter().all(|other| !boxes_overlap(o, other))
}

fn try_scene(spec: &ToyRuleSpec, rng: &mut ChaCha8Rng) -> Option<Scene> {
    let [lo, hi] = spec.room_half_extent;
    let hx = rng.random_range(lo..=hi);
    let hz = rng.random_range(lo..=hi);
    let poly = vec![[-hx, -hz], [hx, -hz], [hx, hz], [-hx, hz]];
    let mut scene = Scene::new(spec.room_type.clone(), spec.bounds(), poly);
    for rule in &spec.rules {
        let mx = (hx - spec.anchor_wall_margin).max(0.0);
        let mz = (hz - spec.anchor_wall_margin).max(0.0);
        let size = sized(spec, rule.anchor, rng);
        let anchor = SceneObject {
            category: rule.anchor,
            category_name: Some(spec.categories[rule.anchor].name.clone()),
            size,
            location: [rng.random_range(-mx..=mx), size[1], rng.random_range(-mz..=mz)],
            orientation: rng.random_range(-PI..PI),
        };
        if !fits(&scene, &anchor) {
            return None;
        }
        scene.objects.push(anchor.clone());
        for sat in &rule.satellites {
            let count = rng.random_range(sat.count[0]..=sat.count[1]);
            for _ in 0..count {
                let size = sized(spec, sat.category, rng);
                let placed = (0..TRIES_PER_OBJECT).find_map(|_| {
                    let angle = rng.random_range(-PI..PI);
                    let dist = rng.random_range(sat.distance[0]..=sat.distance[1]);
                    let x = anchor.location[0] + dist * angle.sin();
                    let z = anchor.location[2] + dist * angle.cos();
                    let orientation = if sat.face_anchor {
                        (anchor.location[0] - x).atan2(anchor.location[2] - z)
                    } else {
                        rng.random_range(-PI..PI)
                    };
                    let o = SceneObject {
                        category: sat.category,
                        category_name: Some(spec.categories[sat.category].name.clone()),
                        size,
                        location: [x, size[1], z],
                        orientation,
                    };
                    fits(&scene, &o).then_some(o)
                })?;
                scene.objects.push(placed);
            }
        }
    }
    Some(scene)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_scene_satisfies_the_rules() {
        let spec = ToyRuleSpec::default();
        let data = generate_toy_dataset(&spec, 1000).unwrap();
        assert_eq!(data.scenes.len() + data.skipped, 1000);
        assert!(data.skipped < 10);
        for s in &data.scenes {
            let tables: Vec<_> = s.objects.iter().filter(|o| o.category == 0).collect();
            assert!(!tables.is_empty());
            let t = tables[0];
            let chairs: Vec<_> = s.objects.iter().filter(|o| o.category == 1).collect();
            assert!((2..=4).contains(&chairs.len()));
            for c in chairs {
                let d = ((c.location[0] - t.location[0]).powi(2) + (c.location[2] - t.location[2]).powi(2)).sqrt();
                assert!(d <= 1.2);
            }
            for (i, a) in s.objects.iter().enumerate() {
                assert!(s.contains_xz(a.floor_xz()));
                assert!(a.validate().is_ok());
                for b in &s.objects[i + 1..] {
                    assert!(!boxes_overlap(a, b));
                }
            }
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let spec = ToyRuleSpec::default();
        let a = generate_toy_dataset(&spec, 50).unwrap();
        let b = generate_toy_dataset(&spec, 50).unwrap();
        assert_eq!(a.scenes, b.scenes);
        let other = generate_toy_dataset(&ToyRuleSpec { seed: 1, ..spec }, 50).unwrap();
        assert_ne!(a.scenes, other.scenes);
    }

    #[test]
    fn lamp_frequency_is_one_half() {
        // binomial: sd = sqrt(0.25 / 10_000) = 0.005, so +-0.02 is four sd
        let data = generate_toy_dataset(&ToyRuleSpec::default(), 10_000).unwrap();
        let with_lamp = data
            .scenes
            .iter()
            .filter(|s| s.objects.iter().any(|o| o.category == 2))
            .count();
        let freq = with_lamp as f64 / data.scenes.len() as f64;
        assert!((freq - 0.5).abs() < 0.02, "{freq}");
    }

    #[test]
    fn rejects_rules_with_unknown_categories() {
        let mut spec = ToyRuleSpec::default();
        spec.rules[0].satellites[0].category = 9;
        assert!(matches!(
            generate_toy_dataset(&spec, 1),
            Err(SceneError::UnknownCategory(9))
        ));
    }
}
