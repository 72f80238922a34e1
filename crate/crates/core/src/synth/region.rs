use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A forged region: an axis-aligned rectangle or a convex polygon, in pixel
/// coordinates. A pixel belongs to the region when its centre does.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Region {
    Rect {
        y: usize,
        x: usize,
        h: usize,
        w: usize,
    },
    /// Vertices `(y, x)` in counter-clockwise or clockwise order.
    Polygon { points: Vec<(f64, f64)> },
}

impl Region {
    pub fn rasterize(&self, height: usize, width: usize) -> Vec<bool> {
        let mut out = vec![false; height * width];
        match self {
            Region::Rect { y, x, h, w } => {
                for r in *y..(y + h).min(height) {
                    for c in *x..(x + w).min(width) {
                        out[r * width + c] = true;
                    }
                }
            }
            Region::Polygon { points } => {
                for r in 0..height {
                    for c in 0..width {
                        out[r * width + c] = inside_convex(points, r as f64 + 0.5, c as f64 + 0.5);
                    }
                }
            }
        }
        out
    }

    pub fn area(&self, height: usize, width: usize) -> usize {
        self.rasterize(height, width).iter().filter(|&&b| b).count()
    }

    pub fn check(&self, height: usize, width: usize) -> Result<()> {
        if let Region::Rect { y, x, h, w } = *self {
            if y + h > height || x + w > width {
                return Err(Error::invalid(format!(
                    "rectangle {h}×{w} at ({y}, {x}) leaves the {height}×{width} image"
                )));
            }
        }
        if self.area(height, width) == 0 {
            return Err(Error::invalid("region has zero area"));
        }
        Ok(())
    }

    /// Random rectangle or convex polygon with sides between `lo` and `hi`
    /// times the image extent.
    pub fn random(rng: &mut impl Rng, height: usize, width: usize, lo: f64, hi: f64) -> Self {
        let rh = ((height as f64 * rng.random_range(lo..hi)).round() as usize).clamp(2, height - 1);
        let rw = ((width as f64 * rng.random_range(lo..hi)).round() as usize).clamp(2, width - 1);
        let y = rng.random_range(0..=height - rh);
        let x = rng.random_range(0..=width - rw);
        if rng.random_bool(0.5) {
            return Region::Rect { y, x, h: rh, w: rw };
        }
        // Points on an ellipse inscribed in the box are always convex.
        let n = rng.random_range(5..9);
        let mut angles: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
        angles.sort_by(f64::total_cmp);
        let (cy, cx) = (y as f64 + rh as f64 / 2.0, x as f64 + rw as f64 / 2.0);
        let (ay, ax) = (rh as f64 / 2.0, rw as f64 / 2.0);
        let points = angles.iter().map(|a| (cy + ay * a.sin(), cx + ax * a.cos())).collect();
        let poly = Region::Polygon { points };
        if poly.area(height, width) < 4 {
            Region::Rect { y, x, h: rh, w: rw }
        } else {
            poly
        }
    }
}

fn inside_convex(points: &[(f64, f64)], y: f64, x: f64) -> bool {
    let n = points.len();
    if n < 3 {
        return false;
    }
    let mut sign = 0.0f64;
    for i in 0..n {
        let (y0, x0) = points[i];
        let (y1, x1) = points[(i + 1) % n];
        let cross = (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0);
        if cross != 0.0 {
            if sign == 0.0 {
                sign = cross.signum();
            } else if cross.signum() != sign {
                return false;
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rect_area() {
        let r = Region::Rect { y: 2, x: 3, h: 4, w: 5 };
        assert_eq!(r.area(16, 16), 20);
        assert!(Region::Rect { y: 14, x: 0, h: 4, w: 2 }.check(16, 16).is_err());
        assert!(Region::Rect { y: 0, x: 0, h: 0, w: 2 }.check(16, 16).is_err());
    }

    #[test]
    fn polygon_square() {
        let p = Region::Polygon {
            points: vec![(1.0, 1.0), (1.0, 5.0), (5.0, 5.0), (5.0, 1.0)],
        };
        assert_eq!(p.area(8, 8), 16);
    }

    #[test]
    fn random_regions_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let r = Region::random(&mut rng, 64, 48, 0.15, 0.4);
            r.check(64, 48).unwrap();
        }
    }
}
