use super::SceneObject;

/// Floor-plane corners `(x, z)` of a yaw-rotated box, counter-clockwise.
pub fn footprint_corners(o: &SceneObject) -> [[f64; 2]; 4] {
    let (s, c) = o.orientation.sin_cos();
    let [hx, _, hz] = o.size;
    let [cx, _, cz] = o.location;
    [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)].map(|(u, v)| {
        let (lx, lz) = (u * hx, v * hz);
        [cx + lx * c + lz * s, cz - lx * s + lz * c]
    })
}

/// Unit floor-plane directions of the box's local x and z axes.
fn axes(o: &SceneObject) -> [[f64; 2]; 2] {
    let (s, c) = o.orientation.sin_cos();
    [[c, -s], [s, c]]
}

fn project(corners: &[[f64; 2]; 4], axis: [f64; 2]) -> (f64, f64) {
    corners.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        let d = p[0] * axis[0] + p[1] * axis[1];
        (lo.min(d), hi.max(d))
    })
}

/// True when the two boxes share interior volume: their vertical intervals
/// overlap and no floor-plane edge normal of either box separates them.
/// Boxes that only touch do not overlap.
pub fn boxes_overlap(a: &SceneObject, b: &SceneObject) -> bool {
    let (ay, by) = (a.location[1], b.location[1]);
    if (ay - by).abs() >= a.size[1] + b.size[1] {
        return false;
    }
    let (ca, cb) = (footprint_corners(a), footprint_corners(b));
    for axis in axes(a).into_iter().chain(axes(b)) {
        let (amin, amax) = project(&ca, axis);
        let (bmin, bmax) = project(&cb, axis);
        if amax <= bmin || bmax <= amin {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_4;

    fn unit(x: f64, z: f64, yaw: f64) -> SceneObject {
        SceneObject::new(0, [0.5, 0.5, 0.5], [x, 0.5, z], yaw)
    }

    fn contains(o: &SceneObject, p: [f64; 3]) -> bool {
        let (s, c) = o.orientation.sin_cos();
        let (dx, dz) = (p[0] - o.location[0], p[2] - o.location[2]);
        // inverse yaw
        let lx = dx * c - dz * s;
        let lz = dx * s + dz * c;
        lx.abs() <= o.size[0] && lz.abs() <= o.size[2] && (p[1] - o.location[1]).abs() <= o.size[1]
    }

    /// Monte-Carlo containment oracle over the union bounding cube.
    fn sampled_overlap(a: &SceneObject, b: &SceneObject, n: usize, seed: u64) -> bool {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = 2.0;
        (0..n).any(|_| {
            let p = [
                rng.random_range(-r..r) + 0.5 * (a.location[0] + b.location[0]),
                rng.random_range(0.0..1.0),
                rng.random_range(-r..r) + 0.5 * (a.location[2] + b.location[2]),
            ];
            contains(a, p) && contains(b, p)
        })
    }

    #[test]
    fn identical_boxes_overlap() {
        assert!(boxes_overlap(&unit(0.3, -0.2, 0.4), &unit(0.3, -0.2, 0.4)));
    }

    #[test]
    fn far_apart_boxes_do_not_overlap() {
        // bounding circle radius of a unit box is sqrt(0.5)
        assert!(!boxes_overlap(&unit(0.0, 0.0, 0.0), &unit(1.5, 0.0, 1.0)));
    }

    #[test]
    fn stacked_boxes_do_not_overlap() {
        let mut top = unit(0.0, 0.0, 0.0);
        top.location[1] = 1.5;
        assert!(!boxes_overlap(&unit(0.0, 0.0, 0.0), &top));
    }

    #[test]
    fn rotated_pair_matches_sampling_oracle() {
        // Two unit boxes, one turned 45 degrees. Along x the rotated box reaches
        // sqrt(0.5) ~ 0.707, so at distance 1.6 they are apart and at 1.1 they meet.
        for (d, dir) in [
            (1.6, [1.0, 0.0]),
            (1.1, [1.0, 0.0]),
            (1.6, [FRAC_PI_4.cos(), FRAC_PI_4.sin()]),
        ] {
            let a = unit(0.0, 0.0, 0.0);
            let b = unit(d * dir[0], d * dir[1], FRAC_PI_4);
            assert_eq!(
                boxes_overlap(&a, &b),
                sampled_overlap(&a, &b, 100_000, 7),
                "d={d} dir={dir:?}"
            );
        }
    }

    #[test]
    fn rotated_pairs_agree_with_oracle_on_clear_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..40 {
            let a = unit(0.0, 0.0, rng.random_range(-3.0..3.0));
            let b = unit(
                rng.random_range(-1.4..1.4),
                rng.random_range(-1.4..1.4),
                rng.random_range(-3.0..3.0),
            );
            let sat = boxes_overlap(&a, &b);
            let mc = sampled_overlap(&a, &b, 100_000, 3);
            // the sampler can only miss slivers, never invent an overlap
            if mc {
                assert!(sat);
            }
        }
    }

    proptest! {
        #[test]
        fn overlap_is_symmetric(
            ax in -2.0f64..2.0, az in -2.0f64..2.0, ay in 0.0f64..1.0, ar in -3.1f64..3.1,
            bx in -2.0f64..2.0, bz in -2.0f64..2.0, by in 0.0f64..1.0, br in -3.1f64..3.1,
            s1 in 0.05f64..1.0, s2 in 0.05f64..1.0, s3 in 0.05f64..1.0,
        ) {
            let a = SceneObject::new(0, [s1, s2, s3], [ax, ay, az], ar);
            let b = SceneObject::new(1, [s3, s1, s2], [bx, by, bz], br);
            prop_assert_eq!(boxes_overlap(&a, &b), boxes_overlap(&b, &a));
        }
    }
}
