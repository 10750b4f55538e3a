//! Planar geometry on landmark coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// An ordered set of 2-D facial landmarks in pixel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    points: Vec<Point>,
}

impl LandmarkSet {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Landmarks("empty landmark set".into()));
        }
        if points.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::Landmarks("non-finite coordinate".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }

    /// Checks every point lies inside a `width × height` image.
    pub fn validate_bounds(&self, width: u32, height: u32) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            if p[0] < 0.0 || p[1] < 0.0 || p[0] > (width - 1) as f64 || p[1] > (height - 1) as f64 {
                return Err(Error::Landmarks(format!(
                    "point {i} at ({:.2}, {:.2}) outside {width}x{height}",
                    p[0], p[1]
                )));
            }
        }
        Ok(())
    }

    pub fn centroid(&self) -> Point {
        let n = self.points.len() as f64;
        let (sx, sy) = self.points.iter().fold((0.0, 0.0), |(x, y), p| (x + p[0], y + p[1]));
        [sx / n, sy / n]
    }

    /// Mean point-to-point distance after subtracting each set's centroid.
    pub fn aligned_distance(&self, other: &LandmarkSet) -> Result<f64> {
        if self.count() != other.count() {
            return Err(Error::Landmarks(format!(
                "landmark counts differ: {} vs {}",
                self.count(),
                other.count()
            )));
        }
        let ca = self.centroid();
        let cb = other.centroid();
        let total: f64 = self
            .points
            .iter()
            .zip(&other.points)
            .map(|(a, b)| {
                let dx = (a[0] - ca[0]) - (b[0] - cb[0]);
                let dy = (a[1] - ca[1]) - (b[1] - cb[1]);
                (dx * dx + dy * dy).sqrt()
            })
            .sum();
        Ok(total / self.count() as f64)
    }

    /// Parses `count × 2` whitespace-separated coordinate rows. Blank lines
    /// and lines starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut points = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals: Vec<f64> = line
                .split(|c: char| c.is_whitespace() || c == ',')
                .filter(|s| !s.is_empty())
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Landmarks(format!("line {}: {e}", ln + 1)))?;
            if vals.len() != 2 {
                return Err(Error::Landmarks(format!("line {}: expected 2 values, got {}", ln + 1, vals.len())));
            }
            points.push([vals[0], vals[1]]);
        }
        Self::new(points)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.points.len() * 16);
        for p in &self.points {
            s.push_str(&format!("{} {}\n", p[0], p[1]));
        }
        s
    }
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Convex hull (monotone chain), counter-clockwise in a y-up frame, without
/// collinear points. Errors when the hull has zero area.
pub fn convex_hull(points: &[Point]) -> Result<Vec<Point>> {
    let mut pts: Vec<Point> = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return Err(Error::DegenerateHull(format!("{} distinct point(s)", pts.len())));
    }
    let mut lower: Vec<Point> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<Point> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    if lower.len() < 3 || polygon_area(&lower).abs() < 1e-9 {
        return Err(Error::DegenerateHull("collinear landmarks".into()));
    }
    Ok(lower)
}

/// Signed shoelace area.
pub fn polygon_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let a = poly[i];
            let b = poly[(i + 1) % n];
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        / 2.0
}

/// Even-odd test; points on an edge count as inside.
pub fn point_in_polygon(p: Point, poly: &[Point]) -> bool {
    let n = poly.len();
    let mut inside = false;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        if on_segment(p, a, b) {
            return true;
        }
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if p[0] < x {
                inside = !inside;
            }
        }
    }
    inside
}

fn on_segment(p: Point, a: Point, b: Point) -> bool {
    let c = cross(a, b, p);
    if c.abs() > 1e-9 * (1.0 + (b[0] - a[0]).abs() + (b[1] - a[1]).abs()) {
        return false;
    }
    p[0] >= a[0].min(b[0]) - 1e-9
        && p[0] <= a[0].max(b[0]) + 1e-9
        && p[1] >= a[1].min(b[1]) - 1e-9
        && p[1] <= a[1].max(b[1]) + 1e-9
}

/// 2-D affine map `(x, y) -> (a·x + b·y + c, d·x + e·y + f)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub m: [f64; 6],
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        m: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
    };

    pub fn apply(&self, p: Point) -> Point {
        let m = &self.m;
        [m[0] * p[0] + m[1] * p[1] + m[2], m[3] * p[0] + m[4] * p[1] + m[5]]
    }

    /// Least-squares affine map taking `from[i]` to `to[i]`.
    pub fn fit(from: &[Point], to: &[Point]) -> Result<Self> {
        if from.len() != to.len() || from.len() < 3 {
            return Err(Error::Landmarks("affine fit needs ≥3 matching points".into()));
        }
        // Normal equations on centred coordinates.
        let n = from.len() as f64;
        let cf = from.iter().fold([0.0, 0.0], |a, p| [a[0] + p[0] / n, a[1] + p[1] / n]);
        let ct = to.iter().fold([0.0, 0.0], |a, p| [a[0] + p[0] / n, a[1] + p[1] / n]);
        let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
        let (mut ux, mut uy, mut vx, mut vy) = (0.0, 0.0, 0.0, 0.0);
        for (p, q) in from.iter().zip(to) {
            let (x, y) = (p[0] - cf[0], p[1] - cf[1]);
            let (u, v) = (q[0] - ct[0], q[1] - ct[1]);
            sxx += x * x;
            sxy += x * y;
            syy += y * y;
            ux += u * x;
            uy += u * y;
            vx += v * x;
            vy += v * y;
        }
        let det = sxx * syy - sxy * sxy;
        if det.abs() <= 1e-12 * (sxx * syy).max(1e-300) {
            return Err(Error::DegenerateHull("landmarks are collinear; affine fit is singular".into()));
        }
        let a = (ux * syy - uy * sxy) / det;
        let b = (uy * sxx - ux * sxy) / det;
        let d = (vx * syy - vy * sxy) / det;
        let e = (vy * sxx - vx * sxy) / det;
        let c = ct[0] - a * cf[0] - b * cf[1];
        let f = ct[1] - d * cf[0] - e * cf[1];
        Ok(Affine { m: [a, b, c, d, e, f] })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hull_of_square_with_interior() {
        let pts = vec![[0.0, 0.0], [4.0, 0.0], [4.0, 4.0], [0.0, 4.0], [2.0, 2.0], [2.0, 0.0]];
        let hull = convex_hull(&pts).unwrap();
        assert_eq!(hull.len(), 4);
        assert!((polygon_area(&hull).abs() - 16.0).abs() < 1e-12);
    }

    #[test]
    fn collinear_hull_is_rejected() {
        let pts = vec![[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]];
        assert!(matches!(convex_hull(&pts), Err(Error::DegenerateHull(_))));
        assert!(matches!(convex_hull(&[[1.0, 1.0]]), Err(Error::DegenerateHull(_))));
    }

    #[test]
    fn point_in_polygon_edges_count() {
        let sq = vec![[0.0, 0.0], [4.0, 0.0], [4.0, 4.0], [0.0, 4.0]];
        assert!(point_in_polygon([2.0, 2.0], &sq));
        assert!(point_in_polygon([0.0, 2.0], &sq));
        assert!(point_in_polygon([4.0, 4.0], &sq));
        assert!(!point_in_polygon([4.5, 2.0], &sq));
    }

    #[test]
    fn affine_fit_recovers_map() {
        let truth = Affine {
            m: [1.1, -0.2, 3.0, 0.15, 0.9, -2.0],
        };
        let from = vec![[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [7.0, 3.0], [2.0, 8.0]];
        let to: Vec<_> = from.iter().map(|&p| truth.apply(p)).collect();
        let fit = Affine::fit(&from, &to).unwrap();
        for (a, b) in fit.m.iter().zip(truth.m) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn landmark_text_roundtrip_and_distance() {
        let l = LandmarkSet::parse("1 2\n# c\n3.5,4\n\n5 6\n").unwrap();
        assert_eq!(l.count(), 3);
        assert_eq!(LandmarkSet::parse(&l.to_text()).unwrap(), l);
        let shifted = LandmarkSet::new(l.points().iter().map(|p| [p[0] + 7.0, p[1] - 1.0]).collect()).unwrap();
        assert!(l.aligned_distance(&shifted).unwrap() < 1e-12);
        assert!(LandmarkSet::parse("1 2 3").is_err());
    }
}
