//! Set-level statistics comparing generated scenes against reference scenes.

use serde::{Deserialize, Serialize};

use crate::scene::Scene;

/// Smoothing added to the generated histogram in [`category_kl`].
pub const KL_EPSILON: f64 = 1e-6;

/// Fraction of all objects in `scenes` that belong to each category.
/// Categories `>= categories` are ignored.
pub fn category_histogram(scenes: &[Scene], categories: usize) -> Vec<f64> {
    let mut h = vec![0.0; categories];
    for o in scenes.iter().flat_map(|s| &s.objects) {
        if o.category < categories {
            h[o.category] += 1.0;
        }
    }
    let total: f64 = h.iter().sum();
    if total > 0.0 {
        h.iter_mut().for_each(|v| *v /= total);
    }
    h
}

/// `KL(ref || gen)` between two category histograms. The generated side is
/// smoothed as `(g + eps) / (1 + C eps)`.
pub fn histogram_kl(reference: &[f64], generated: &[f64]) -> f64 {
    let c = reference.len() as f64;
    reference
        .iter()
        .zip(generated)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &g)| p * (p / ((g + KL_EPSILON) / (1.0 + c * KL_EPSILON))).ln())
        .sum()
}

/// KL divergence from the reference category distribution to the generated one.
pub fn category_kl(generated: &[Scene], reference: &[Scene], categories: usize) -> f64 {
    histogram_kl(
        &category_histogram(reference, categories),
        &category_histogram(generated, categories),
    )
}

/// Entry `(i, j)` is the fraction of scenes holding at least one object of
/// category `i` and at least one of category `j`.
pub fn cooccurrence_matrix(scenes: &[Scene], categories: usize) -> Vec<Vec<f64>> {
    let mut m = vec![vec![0.0; categories]; categories];
    if scenes.is_empty() {
        return m;
    }
    for s in scenes {
        let mut present = vec![false; categories];
        for o in &s.objects {
            if o.category < categories {
                present[o.category] = true;
            }
        }
        for i in 0..categories {
            for j in 0..categories {
                if present[i] && present[j] {
                    m[i][j] += 1.0;
                }
            }
        }
    }
    let n = scenes.len() as f64;
    m.iter_mut().flatten().for_each(|v| *v /= n);
    m
}

pub fn cooccurrence_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| (x - y).abs()).collect())
        .collect()
}

/// Mean number of objects of each category per scene.
pub fn mean_counts(scenes: &[Scene], categories: usize) -> Vec<f64> {
    let mut m = vec![0.0; categories];
    if scenes.is_empty() {
        return m;
    }
    for o in scenes.iter().flat_map(|s| &s.objects) {
        if o.category < categories {
            m[o.category] += 1.0;
        }
    }
    m.iter_mut().for_each(|v| *v /= scenes.len() as f64);
    m
}

/// Per-category absolute difference of mean per-scene counts.
pub fn frequency_diff(generated: &[Scene], reference: &[Scene], categories: usize) -> Vec<f64> {
    mean_counts(generated, categories)
        .iter()
        .zip(mean_counts(reference, categories))
        .map(|(g, r)| (g - r).abs())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub categories: Vec<String>,
    pub generated_scenes: usize,
    pub reference_scenes: usize,
    pub category_kl: f64,
    pub generated_histogram: Vec<f64>,
    pub reference_histogram: Vec<f64>,
    pub frequency_diff: Vec<f64>,
    pub mean_object_count: [f64; 2],
    pub cooccurrence_generated: Vec<Vec<f64>>,
    pub cooccurrence_reference: Vec<Vec<f64>>,
    pub cooccurrence_diff: Vec<Vec<f64>>,
}

/// Every metric of this module for one pair of scene sets.
pub fn evaluate(generated: &[Scene], reference: &[Scene], category_names: &[String]) -> MetricReport {
    let c = category_names.len();
    let mean_objects = |s: &[Scene]| {
        if s.is_empty() {
            0.0
        } else {
            s.iter().map(|x| x.objects.len()).sum::<usize>() as f64 / s.len() as f64
        }
    };
    let cg = cooccurrence_matrix(generated, c);
    let cr = cooccurrence_matrix(reference, c);
    MetricReport {
        categories: category_names.to_vec(),
        generated_scenes: generated.len(),
        reference_scenes: reference.len(),
        category_kl: category_kl(generated, reference, c),
        generated_histogram: category_histogram(generated, c),
        reference_histogram: category_histogram(reference, c),
        frequency_diff: frequency_diff(generated, reference, c),
        mean_object_count: [mean_objects(generated), mean_objects(reference)],
        cooccurrence_diff: cooccurrence_diff(&cg, &cr),
        cooccurrence_generated: cg,
        cooccurrence_reference: cr,
    }
}

/// Matrix as CSV with a header row and a leading label column.
pub fn matrix_csv(names: &[String], m: &[Vec<f64>]) -> String {
    let mut out = String::from("category");
    for n in names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for (n, row) in names.iter().zip(m) {
        out.push_str(n);
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Bounds, SceneObject};

    fn scene(cats: &[usize]) -> Scene {
        let b = Bounds::new([-1.0, 0.0, -1.0], [1.0, 1.0, 1.0]).unwrap();
        let mut s = Scene::new("bedroom", b, vec![[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]]);
        s.objects = cats
            .iter()
            .map(|&c| SceneObject::new(c, [0.1; 3], [0.0; 3], 0.0))
            .collect();
        s
    }

    #[test]
    fn kl_cases() {
        let a = vec![scene(&[0, 1, 1]), scene(&[2])];
        assert!(category_kl(&a, &a, 3).abs() < 1e-9);
        let ref_a = vec![scene(&[0, 0])];
        let gen_b = vec![scene(&[1, 1])];
        assert!(category_kl(&gen_b, &ref_a, 2) > 13.0);
        let r = vec![scene(&[0, 0, 0, 1])];
        let g = vec![scene(&[0, 1])];
        assert!((category_kl(&g, &r, 2) - 0.130812).abs() < 1e-5);
    }

    #[test]
    fn cooccurrence_definition() {
        let s = vec![scene(&[0, 1]), scene(&[0]), scene(&[2, 2]), scene(&[])];
        let m = cooccurrence_matrix(&s, 3);
        assert_eq!(m[0][0], 0.5);
        assert_eq!(m[0][1], 0.25);
        assert_eq!(m[1][0], 0.25);
        assert_eq!(m[2][2], 0.25);
        assert_eq!(m[1][2], 0.0);
        assert!(cooccurrence_diff(&m, &m).iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn frequency_cases() {
        let r = vec![scene(&[0, 1]), scene(&[0])];
        assert_eq!(frequency_diff(&r, &r, 3), vec![0.0; 3]);
        let g = vec![scene(&[0, 1, 2]), scene(&[0, 2])];
        assert_eq!(frequency_diff(&g, &r, 3), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn report_and_csv() {
        let names: Vec<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        let r = evaluate(&[scene(&[0])], &[scene(&[0, 1])], &names);
        assert_eq!(r.mean_object_count, [1.0, 2.0]);
        let csv = matrix_csv(&names, &r.cooccurrence_reference);
        assert_eq!(csv, "category,a,b\na,1,1\nb,1,1\n");
    }
}
