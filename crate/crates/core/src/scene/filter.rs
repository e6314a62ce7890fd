use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{boxes_overlap, Scene};

/// Scene-level validity rules. `None` / `false` disables a rule.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterRules {
    /// Maximum room extent `[x, y, z]` in meters: floor polygon width and
    /// depth, bounds height.
    pub max_extent: Option<[f64; 3]>,
    /// Inclusive allowed object count.
    pub object_count_range: Option<[usize; 2]>,
    pub overlap_forbidden: bool,
    pub allowed_categories: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    MaxExtent,
    ObjectCount,
    Overlap,
    Category,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub kept: usize,
    /// Failures per rule; a scene failing several rules counts under each.
    pub rejections: BTreeMap<RejectReason, usize>,
    /// Input index and reasons of every rejected scene.
    pub rejected: Vec<(usize, Vec<RejectReason>)>,
}

impl FilterRules {
    pub fn violations(&self, scene: &Scene) -> Vec<RejectReason> {
        let mut out = Vec::new();
        if let Some(max) = self.max_extent {
            let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
            for p in &scene.floor_polygon {
                for i in 0..2 {
                    lo[i] = lo[i].min(p[i]);
                    hi[i] = hi[i].max(p[i]);
                }
            }
            let height = scene.bounds.max[1] - scene.bounds.min[1];
            if hi[0] - lo[0] > max[0] || height > max[1] || hi[1] - lo[1] > max[2] {
                out.push(RejectReason::MaxExtent);
            }
        }
        if let Some([lo, hi]) = self.object_count_range {
            if !(lo..=hi).contains(&scene.objects.len()) {
                out.push(RejectReason::ObjectCount);
            }
        }
        if self.overlap_forbidden {
            let objs = &scene.objects;
            let any = (0..objs.len()).any(|i| (i + 1..objs.len()).any(|j| boxes_overlap(&objs[i], &objs[j])));
            if any {
                out.push(RejectReason::Overlap);
            }
        }
        if let Some(allowed) = &self.allowed_categories {
            if scene.objects.iter().any(|o| !allowed.contains(&o.category)) {
                out.push(RejectReason::Category);
            }
        }
        out
    }
}

/// Keeps the scenes that pass every enabled rule, in input order.
pub fn filter_scenes(scenes: Vec<Scene>, rules: &FilterRules) -> (Vec<Scene>, FilterReport) {
    let mut report = FilterReport::default();
    let mut kept = Vec::with_capacity(scenes.len());
    for (i, s) in scenes.into_iter().enumerate() {
        let reasons = rules.violations(&s);
        if reasons.is_empty() {
            kept.push(s);
        } else {
            for r in &reasons {
                *report.rejections.entry(*r).or_default() += 1;
            }
            report.rejected.push((i, reasons));
        }
    }
    report.kept = kept.len();
    (kept, report)
}
