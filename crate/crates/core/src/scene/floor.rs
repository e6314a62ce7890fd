use super::Bounds;
use crate::error::SceneError;

/// Top-down binary raster of the room interior.
///
/// Row `i` covers `z` from `zmin + i * dz`, column `j` covers `x` from
/// `xmin + j * dx`, over the `x`/`z` extent of the scene bounds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FloorMask {
    resolution: usize,
    cells: Vec<u8>,
}

impl FloorMask {
    pub fn from_cells(resolution: usize, cells: Vec<u8>) -> Result<Self, SceneError> {
        if resolution == 0 {
            return Err(SceneError::ZeroResolution);
        }
        if cells.len() != resolution * resolution || cells.iter().any(|&c| c > 1) {
            return Err(SceneError::schema("floor_mask", "expected R*R cells of 0 or 1"));
        }
        Ok(Self { resolution, cells })
    }

    pub fn filled(resolution: usize, value: bool) -> Self {
        Self {
            resolution,
            cells: vec![value as u8; resolution * resolution],
        }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.resolution + col] == 1
    }

    pub fn ones(&self) -> usize {
        self.cells.iter().map(|&c| c as usize).sum()
    }

    pub fn fill_fraction(&self) -> f64 {
        self.ones() as f64 / self.cells.len() as f64
    }

    /// World `(x, z)` of the center of cell `(row, col)`.
    pub fn cell_center(bounds: &Bounds, resolution: usize, row: usize, col: usize) -> [f64; 2] {
        let dx = (bounds.max[0] - bounds.min[0]) / resolution as f64;
        let dz = (bounds.max[2] - bounds.min[2]) / resolution as f64;
        [
            bounds.min[0] + (col as f64 + 0.5) * dx,
            bounds.min[2] + (row as f64 + 0.5) * dz,
        ]
    }
}

/// Shoelace area of a simple polygon.
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    let twice: f64 = (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum();
    0.5 * twice.abs()
}

/// Even-odd crossing test.
pub fn point_in_polygon(p: [f64; 2], poly: &[[f64; 2]]) -> bool {
    let n = poly.len();
    let mut inside = false;
    let mut j = n.wrapping_sub(1);
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if p[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn on_segment(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> bool {
    p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1]) && p[1] <= a[1].max(b[1])
}

fn segments_intersect(p1: [f64; 2], p2: [f64; 2], q1: [f64; 2], q2: [f64; 2]) -> bool {
    let (d1, d2) = (orient(q1, q2, p1), orient(q1, q2, p2));
    let (d3, d4) = (orient(p1, p2, q1), orient(p1, p2, q2));
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}

/// Checks that `poly` has at least three vertices and no two non-adjacent
/// edges touch.
pub fn validate_polygon(poly: &[[f64; 2]]) -> Result<(), SceneError> {
    let n = poly.len();
    if n < 3 {
        return Err(SceneError::TooFewVertices(n));
    }
    for i in 0..n {
        for j in i + 1..n {
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                continue;
            }
            if segments_intersect(poly[i], poly[(i + 1) % n], poly[j], poly[(j + 1) % n]) {
                return Err(SceneError::SelfIntersecting(i, j));
            }
        }
    }
    Ok(())
}

/// Marks every cell whose center lies inside `poly`.
pub fn rasterize_floor(poly: &[[f64; 2]], bounds: &Bounds, resolution: usize) -> Result<FloorMask, SceneError> {
    if resolution == 0 {
        return Err(SceneError::ZeroResolution);
    }
    validate_polygon(poly)?;
    let mut cells = vec![0u8; resolution * resolution];
    for row in 0..resolution {
        for col in 0..resolution {
            let c = FloorMask::cell_center(bounds, resolution, row, col);
            cells[row * resolution + col] = point_in_polygon(c, poly) as u8;
        }
    }
    Ok(FloorMask { resolution, cells })
}
