use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::{GenConfig, ObjectSpec, SceneSpec};

/// Channel-major RGB image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let plane = height * width;
        let mut data = vec![0.0; 3 * plane];
        for (c, chunk) in data.chunks_mut(plane).enumerate() {
            chunk.fill(rgb[c]);
        }
        Self {
            channels: 3,
            height,
            width,
            data,
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// Rasterizes `scene` over a uniform background.
pub fn render(scene: &SceneSpec, config: &GenConfig) -> ImageTensor {
    let mut img = ImageTensor::filled(config.height, config.width, config.background);
    for (i, obj) in scene.objects.iter().enumerate() {
        draw_object(&mut img, obj, i as u64 ^ scene.seed.rotate_left(17), config);
    }
    img
}

fn draw_object(img: &mut ImageTensor, obj: &ObjectSpec, salt: u64, config: &GenConfig) {
    let (h, w) = (img.height, img.width);
    let plane = h * w;
    let ss = config.supersample;
    let n_sub = (ss * ss) as f64;
    let color = config.palette[obj.color_id];
    let [cx, cy] = obj.center;
    let r = obj.radius;

    let x0 = (cx - r).floor().max(0.0) as usize;
    let x1 = ((cx + r).ceil() as usize).min(w);
    let y0 = (cy - r).floor().max(0.0) as usize;
    let y1 = ((cy + r).ceil() as usize).min(h);

    for py in y0..y1 {
        for px in x0..x1 {
            let mut coverage = 0.0;
            let mut shade = 0.0;
            for sy in 0..ss {
                for sx in 0..ss {
                    let x = px as f64 + (sx as f64 + 0.5) / ss as f64;
                    let y = py as f64 + (sy as f64 + 0.5) / ss as f64;
                    if shape_contains(obj.shape_id, (x - cx) / r, (y - cy) / r) {
                        coverage += 1.0;
                        shade += 0.35 + 0.65 * texture_value(obj.texture_id, x, y, cx, cy, salt);
                    }
                }
            }
            if coverage == 0.0 {
                continue;
            }
            let cov = coverage / n_sub;
            let shade = shade / n_sub;
            for c in 0..3 {
                let idx = c * plane + py * w + px;
                let bg = img.data[idx] as f64;
                let v = bg * (1.0 - cov) + color[c] as f64 * shade;
                img.data[idx] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
}

fn point_in_polygon(u: f64, v: f64, verts: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = verts.len() - 1;
    for i in 0..verts.len() {
        let (xi, yi) = verts[i];
        let (xj, yj) = verts[j];
        if (yi > v) != (yj > v) && u < (xj - xi) * (v - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Regular polygon (alternating radii for stars), first vertex pointing up.
fn polygon(n: usize, outer: f64, inner: Option<f64>) -> Vec<(f64, f64)> {
    let steps = if inner.is_some() { 2 * n } else { n };
    (0..steps)
        .map(|k| {
            let a = -PI / 2.0 + 2.0 * PI * k as f64 / steps as f64;
            let rad = match inner {
                Some(ri) if k % 2 == 1 => ri,
                _ => outer,
            };
            (rad * a.cos(), rad * a.sin())
        })
        .collect()
}

/// Silhouette membership in coordinates normalized by the object radius.
/// Every silhouette lies within the unit disk.
fn shape_contains(shape: usize, u: f64, v: f64) -> bool {
    let rho2 = u * u + v * v;
    if rho2 > 1.0 {
        return false;
    }
    match shape {
        0 => rho2 <= 0.9 * 0.9,                                 // circle
        1 => u.abs() <= 0.7 && v.abs() <= 0.7,                 // square
        2 => point_in_polygon(u, v, &polygon(3, 1.0, None)),    // triangle
        3 => point_in_polygon(u, v, &polygon(5, 0.95, None)),   // pentagon
        4 => point_in_polygon(u, v, &polygon(6, 0.95, None)),   // hexagon
        5 => point_in_polygon(u, v, &polygon(5, 1.0, Some(0.45))), // star
        6 => (u.abs() <= 0.3 && v.abs() <= 0.9) || (v.abs() <= 0.3 && u.abs() <= 0.9), // cross
        7 => (0.5 * 0.5..=0.95 * 0.95).contains(&rho2),         // ring
        8 => u.abs() + v.abs() <= 0.95,                         // diamond
        9 => rho2 <= 0.9 * 0.9 && (u - 0.45).powi(2) + v * v > 0.7 * 0.7, // crescent
        _ => false,
    }
}

fn hash2(x: i64, y: i64, salt: u64) -> u64 {
    let mut z = (x as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (y as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f)
        ^ salt;
    z = (z ^ (z >> 29)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z ^ (z >> 32)
}

/// Procedural fill intensity in `[0, 1]` at absolute pixel coordinates.
fn texture_value(texture: usize, x: f64, y: f64, cx: f64, cy: f64, salt: u64) -> f64 {
    let on = |b: bool| if b { 1.0 } else { 0.0 };
    let parity = |a: f64| (a.floor() as i64).rem_euclid(2) == 0;
    match texture {
        0 => 1.0,                                // solid
        1 => on(parity(y)),                      // horizontal stripes
        2 => on(parity(x)),                      // vertical stripes
        3 => on(parity((x + y) / 2.0)),          // diagonal stripes
        4 => on(parity(x / 2.0) == parity(y / 2.0)), // checker
        5 => {
            // dots on a 4 px lattice
            let dx = x.rem_euclid(4.0) - 2.0;
            let dy = y.rem_euclid(4.0) - 2.0;
            on(dx * dx + dy * dy < 1.5 * 1.5)
        }
        6 => on(parity(((x - cx).powi(2) + (y - cy).powi(2)).sqrt() / 1.5)), // rings
        7 => on(hash2(x.floor() as i64, y.floor() as i64, salt) & 1 == 1),  // noise
        8 => on((x.floor() as i64).rem_euclid(3) != 0 && (y.floor() as i64).rem_euclid(3) != 0), // grid
        9 => on(parity((y + (x.rem_euclid(4.0) - 2.0).abs()) / 2.0)), // zigzag
        _ => 1.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::sample_scene;

    fn cfg() -> GenConfig {
        GenConfig {
            width: 48,
            height: 36,
            ..GenConfig::paper()
        }
    }

    #[test]
    fn empty_scene_is_background() {
        let c = cfg();
        let img = render(&SceneSpec { objects: vec![], seed: 1 }, &c);
        for ch in 0..3 {
            for y in 0..c.height {
                for x in 0..c.width {
                    assert_eq!(img.at(ch, y, x), c.background[ch]);
                }
            }
        }
    }

    #[test]
    fn pixel_range_and_purity() {
        let c = GenConfig::paper();
        for seed in 0..10 {
            let s = sample_scene(seed, &c).unwrap();
            let a = render(&s, &c);
            assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(a.data.len(), 3 * 120 * 160);
            let b = render(&s, &c);
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn color_change_stays_inside_footprint() {
        let c = cfg();
        for seed in 0..20 {
            let s = sample_scene(seed, &c).unwrap();
            let mut t = s.clone();
            // swap to a color no other object uses
            let used: Vec<usize> = s.objects.iter().map(|o| o.color_id).collect();
            let free = (0..10).find(|v| !used.contains(v)).unwrap();
            t.objects[0].color_id = free;
            let (a, b) = (render(&s, &c), render(&t, &c));
            let obj = &s.objects[0];
            let mut changed = 0;
            for ch in 0..3 {
                for y in 0..c.height {
                    for x in 0..c.width {
                        if a.at(ch, y, x) != b.at(ch, y, x) {
                            changed += 1;
                            // nearest point of the pixel square to the center
                            let nx = (x as f64 + 0.5 - obj.center[0]).abs() - 0.5;
                            let ny = (y as f64 + 0.5 - obj.center[1]).abs() - 0.5;
                            let dmin = (nx.max(0.0).powi(2) + ny.max(0.0).powi(2)).sqrt();
                            assert!(dmin <= obj.radius, "pixel ({x},{y}) outside object disk");
                        }
                    }
                }
            }
            assert!(changed > 0);
        }
    }

    #[test]
    fn silhouettes_are_distinct() {
        let n = 64;
        let masks: Vec<Vec<bool>> = (0..10)
            .map(|s| {
                (0..n * n)
                    .map(|k| {
                        let u = (k % n) as f64 / n as f64 * 2.0 - 1.0;
                        let v = (k / n) as f64 / n as f64 * 2.0 - 1.0;
                        shape_contains(s, u, v)
                    })
                    .collect()
            })
            .collect();
        for i in 0..10 {
            assert!(masks[i].iter().filter(|&&b| b).count() > n * n / 10);
            for j in i + 1..10 {
                let diff = masks[i].iter().zip(&masks[j]).filter(|(a, b)| a != b).count();
                assert!(diff > n * n / 50, "shapes {i} and {j} nearly identical");
            }
        }
    }
}
