//! Orthographic z-buffer rasterization of triangle meshes.

use nalgebra::Point3;

use crate::grid::Grid;

/// The visible triangle at one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fragment {
    pub face: usize,
    pub bary: [f64; 3],
    pub depth: f64,
}

impl Fragment {
    #[inline]
    pub fn interpolate<T>(&self, a: T, b: T, c: T) -> T
    where
        T: std::ops::Mul<f64, Output = T> + std::ops::Add<Output = T>,
    {
        a * self.bary[0] + b * self.bary[1] + c * self.bary[2]
    }
}

/// Rasterize triangles given vertices already in pixel coordinates
/// (`x`, `y` in pixels, `z` = depth toward the viewer). Samples are taken at
/// pixel centers; the fragment with the largest depth wins.
pub fn rasterize(
    width: usize,
    height: usize,
    projected: &[Point3<f64>],
    faces: &[[usize; 3]],
) -> Grid<Option<Fragment>> {
    let mut buffer: Grid<Option<Fragment>> = Grid::filled(width, height, None);
    if width == 0 || height == 0 {
        return buffer;
    }
    for (fi, f) in faces.iter().enumerate() {
        let (a, b, c) = (projected[f[0]], projected[f[1]], projected[f[2]]);
        let area = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
        if !area.is_finite() || area.abs() < 1e-12 {
            continue;
        }
        let min_x = a.x.min(b.x).min(c.x).ceil().max(0.0);
        let max_x = a.x.max(b.x).max(c.x).floor().min(width as f64 - 1.0);
        let min_y = a.y.min(b.y).min(c.y).ceil().max(0.0);
        let max_y = a.y.max(b.y).max(c.y).floor().min(height as f64 - 1.0);
        if min_x > max_x || min_y > max_y {
            continue;
        }
        let inv = 1.0 / area;
        // Inclusive edges; a shared edge may be drawn twice but the
        // z-test makes that harmless.
        let eps = 1e-9;
        for py in min_y as usize..=max_y as usize {
            let y = py as f64;
            for px in min_x as usize..=max_x as usize {
                let x = px as f64;
                let w0 = ((b.x - x) * (c.y - y) - (b.y - y) * (c.x - x)) * inv;
                let w1 = ((c.x - x) * (a.y - y) - (c.y - y) * (a.x - x)) * inv;
                let w2 = 1.0 - w0 - w1;
                if w0 < -eps || w1 < -eps || w2 < -eps {
                    continue;
                }
                let depth = w0 * a.z + w1 * b.z + w2 * c.z;
                let slot = buffer.get_mut(px, py);
                if slot.map_or(true, |frag| depth > frag.depth) {
                    *slot = Some(Fragment {
                        face: fi,
                        bary: [w0, w1, w2],
                        depth,
                    });
                }
            }
        }
    }
    buffer
}

pub fn coverage(buffer: &Grid<Option<Fragment>>) -> Grid<bool> {
    buffer.map(|f| f.is_some())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(z: f64, lo: f64, hi: f64) -> (Vec<Point3<f64>>, Vec<[usize; 3]>) {
        (
            vec![
                Point3::new(lo, lo, z),
                Point3::new(hi, lo, z),
                Point3::new(hi, hi, z),
                Point3::new(lo, hi, z),
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        )
    }

    #[test]
    fn quad_covers_inclusive_pixels_without_cracks() {
        let (v, f) = quad(1.0, 2.0, 6.0);
        let buf = rasterize(10, 10, &v, &f);
        assert_eq!(coverage(&buf).count(), 25);
        let frag = buf.get(4, 4).unwrap();
        assert!((frag.depth - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nearer_plane_wins() {
        let (mut v, mut f) = quad(-3.0, 0.0, 9.0);
        let (v2, f2) = quad(2.0, 3.0, 7.0);
        let off = v.len();
        v.extend(v2);
        f.extend(f2.iter().map(|t| [t[0] + off, t[1] + off, t[2] + off]));
        let buf = rasterize(10, 10, &v, &f);
        for y in 0..10 {
            for x in 0..10 {
                let d = buf.get(x, y).unwrap().depth;
                let inside = (3..=7).contains(&x) && (3..=7).contains(&y);
                assert!((d - if inside { 2.0 } else { -3.0 }).abs() < 1e-12, "{d}");
            }
        }
    }

    #[test]
    fn vertices_on_pixel_centers_reproduce_exact_depth() {
        let v = vec![
            Point3::new(1.0, 1.0, 5.0),
            Point3::new(8.0, 1.0, 7.0),
            Point3::new(1.0, 8.0, 9.0),
        ];
        let buf = rasterize(10, 10, &v, &[[0, 1, 2]]);
        assert_eq!(buf.get(1, 1).unwrap().depth, 5.0);
        assert!((buf.get(8, 1).unwrap().depth - 7.0).abs() < 1e-12);
        assert!((buf.get(1, 8).unwrap().depth - 9.0).abs() < 1e-12);
    }
}
