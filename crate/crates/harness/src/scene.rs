//! Ray-cast synthetic scenes made of textured planes and spheres.

use fslam_core::geometry::{Camera, PixelGrid, Pose, Vec2, Vec3};
use fslam_core::tracking::Rgb;

#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    /// Infinite plane through `point` with unit `normal`.
    Plane {
        point: Vec3,
        normal: Vec3,
    },
    Sphere {
        center: Vec3,
        radius: f64,
    },
}

/// Procedural color as a function of the world point.
#[derive(Debug, Clone, PartialEq)]
pub enum Texture {
    /// Sum of two sinusoid gratings around `base`.
    Gratings { base: Rgb, freq: [Vec3; 2], amplitude: f64 },
    /// Constant color: a texture-poor surface.
    Flat(Rgb),
}

impl Texture {
    pub fn color(&self, p: &Vec3) -> Rgb {
        match self {
            Texture::Flat(c) => *c,
            Texture::Gratings { base, freq, amplitude } => {
                let a = (freq[0].dot(p)).sin();
                let b = (freq[1].dot(p)).cos();
                let c = (freq[0].dot(p) - freq[1].dot(p)).sin();
                let v = Rgb::new(
                    base.x + amplitude * a,
                    base.y + amplitude * b,
                    base.z + 0.5 * amplitude * (a + c),
                );
                v.map(|x| x.clamp(0.0, 1.0))
            }
        }
    }

    pub fn is_flat(&self) -> bool {
        matches!(self, Texture::Flat(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Surface {
    pub primitive: Primitive,
    pub texture: Texture,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub surfaces: Vec<Surface>,
    /// Depth along the optical axis assigned to rays that hit nothing.
    pub background_depth: Option<f64>,
    pub background_color: Rgb,
}

/// Ground-truth rendering of one camera pose.
#[derive(Debug, Clone)]
pub struct View {
    pub image: PixelGrid<Rgb>,
    /// Camera-frame z in meters.
    pub depth: PixelGrid<f64>,
    pub texture_poor: PixelGrid<bool>,
}

impl SyntheticScene {
    /// Nearest hit along `origin + t * dir` with `t > 0`, as `(t, surface)`.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for (i, s) in self.surfaces.iter().enumerate() {
            let t = match &s.primitive {
                Primitive::Plane { point, normal } => {
                    let den = normal.dot(dir);
                    if den.abs() < 1e-12 {
                        continue;
                    }
                    (point - origin).dot(normal) / den
                }
                Primitive::Sphere { center, radius } => {
                    let oc = origin - center;
                    let a = dir.norm_squared();
                    let b = oc.dot(dir);
                    let c = oc.norm_squared() - radius * radius;
                    let disc = b * b - a * c;
                    if disc < 0.0 {
                        continue;
                    }
                    let sq = disc.sqrt();
                    let t0 = (-b - sq) / a;
                    if t0 > 1e-9 {
                        t0
                    } else {
                        (-b + sq) / a
                    }
                }
            };
            if t > 1e-9 && best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, i));
            }
        }
        best
    }

    /// Casts one ray per pixel center. Rays are scaled to unit camera z, so
    /// the hit parameter is the depth.
    pub fn render(&self, camera: &Camera, pose: &Pose) -> View {
        let (w, h) = (camera.width, camera.height);
        let mut image = PixelGrid::filled(w, h, self.background_color);
        let mut depth = PixelGrid::filled(w, h, self.background_depth.unwrap_or(0.0));
        let mut poor = PixelGrid::filled(w, h, false);
        for y in 0..h {
            for x in 0..w {
                let dir = pose.rotation * camera.ray(&Vec2::new(x as f64, y as f64));
                if let Some((t, i)) = self.intersect(&pose.translation, &dir) {
                    let s = &self.surfaces[i];
                    let p = pose.translation + dir * t;
                    image.set(x, y, s.texture.color(&p));
                    depth.set(x, y, t);
                    poor.set(x, y, s.texture.is_flat());
                }
            }
        }
        View {
            image,
            depth,
            texture_poor: poor,
        }
    }
}

fn gratings(base: Rgb, f0: Vec3, f1: Vec3) -> Texture {
    Texture::Gratings {
        base,
        freq: [f0, f1],
        amplitude: 0.3,
    }
}

/// Back wall, floor and left wall.
pub fn smoke_scene() -> SyntheticScene {
    SyntheticScene {
        surfaces: vec![
            Surface {
                primitive: Primitive::Plane {
                    point: Vec3::new(0.0, 0.0, 5.0),
                    normal: Vec3::new(0.0, 0.0, -1.0),
                },
                texture: gratings(
                    Rgb::new(0.55, 0.45, 0.5),
                    Vec3::new(3.1, 1.3, 0.0),
                    Vec3::new(-1.1, 4.3, 0.0),
                ),
            },
            Surface {
                primitive: Primitive::Plane {
                    point: Vec3::new(0.0, 1.0, 0.0),
                    normal: Vec3::new(0.0, -1.0, 0.0),
                },
                texture: gratings(
                    Rgb::new(0.4, 0.55, 0.45),
                    Vec3::new(2.7, 0.0, 1.9),
                    Vec3::new(-3.3, 0.0, 1.2),
                ),
            },
            Surface {
                primitive: Primitive::Plane {
                    point: Vec3::new(-2.5, 0.0, 0.0),
                    normal: Vec3::new(1.0, 0.0, 0.0),
                },
                texture: gratings(
                    Rgb::new(0.5, 0.4, 0.6),
                    Vec3::new(0.0, 2.9, 2.2),
                    Vec3::new(0.0, -1.7, 3.6),
                ),
            },
        ],
        background_depth: None,
        background_color: Rgb::zeros(),
    }
}

/// Textured ground plane seen from above with a sphere in the middle.
pub fn loop_scene() -> SyntheticScene {
    SyntheticScene {
        surfaces: vec![
            Surface {
                primitive: Primitive::Plane {
                    point: Vec3::new(0.0, 0.0, 4.0),
                    normal: Vec3::new(0.0, 0.0, -1.0),
                },
                texture: gratings(
                    Rgb::new(0.5, 0.5, 0.45),
                    Vec3::new(3.3, 1.1, 0.0),
                    Vec3::new(-1.4, 3.9, 0.0),
                ),
            },
            Surface {
                primitive: Primitive::Sphere {
                    center: Vec3::new(0.0, 0.0, 3.3),
                    radius: 0.5,
                },
                texture: gratings(
                    Rgb::new(0.6, 0.4, 0.4),
                    Vec3::new(6.0, 2.0, 1.0),
                    Vec3::new(-2.0, 5.0, 3.0),
                ),
            },
        ],
        background_depth: None,
        background_color: Rgb::zeros(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plane_depth_matches_closed_form() {
        let cam = Camera::new(50.0, 50.0, 15.5, 11.5, 32, 24).unwrap();
        let scene = smoke_scene();
        let v = scene.render(&cam, &Pose::identity());
        // the optical axis hits the back wall
        assert!((v.depth.get(15, 11) - 5.0).abs() < 1e-12);
        assert!(v.depth.iter().all(|d| *d > 0.0 && *d <= 5.0 + 1e-9));
        assert!(!v.texture_poor.iter().any(|p| *p));
    }

    #[test]
    fn sphere_occludes_plane() {
        let scene = loop_scene();
        let (t, i) = scene.intersect(&Vec3::zeros(), &Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(i, 1);
        assert!((t - 2.8).abs() < 1e-12);
        let (t, i) = scene
            .intersect(&Vec3::new(1.0, 0.0, 0.0), &Vec3::new(0.0, 0.0, 1.0))
            .unwrap();
        assert_eq!(i, 0);
        assert!((t - 4.0).abs() < 1e-12);
    }

    #[test]
    fn missing_hits_use_background() {
        let scene = SyntheticScene {
            surfaces: vec![],
            background_depth: Some(10.0),
            background_color: Rgb::repeat(0.2),
        };
        let cam = Camera::new(10.0, 10.0, 1.5, 1.5, 4, 4).unwrap();
        let v = scene.render(&cam, &Pose::identity());
        assert!(v.depth.iter().all(|d| *d == 10.0));
        assert!(v.image.iter().all(|c| *c == Rgb::repeat(0.2)));
    }
}
