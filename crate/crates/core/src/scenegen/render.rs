//! Ray casting of primitive scenes with a pinhole camera and Lambertian
//! shading. Depth is the camera-frame z distance, not the ray length.

use crate::tensor::{DepthMap, Image};

pub type Vec3 = [f64; 3];

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn normalize(a: Vec3) -> Vec3 {
    let n = dot(a, a).sqrt();
    if n == 0.0 {
        a
    } else {
        scale(a, 1.0 / n)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    /// Infinite plane through `point` facing `normal`.
    Plane { point: Vec3, normal: Vec3 },
    Sphere { center: Vec3, radius: f64 },
    /// Box with half extents `half`, rotated by `yaw` about the vertical axis.
    Cuboid { center: Vec3, half: Vec3, yaw: f64 },
    /// Vertical capped cylinder standing on `base`.
    Cylinder { base: Vec3, radius: f64, height: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Material {
    pub albedo: Vec3,
    /// Second albedo and period (meters) of a 3-D checker pattern.
    pub checker: Option<(Vec3, f64)>,
}

impl Material {
    pub fn plain(albedo: Vec3) -> Self {
        Material { albedo, checker: None }
    }

    fn albedo_at(&self, p: Vec3) -> Vec3 {
        match self.checker {
            None => self.albedo,
            Some((other, period)) => {
                let cell = p.iter().map(|c| (c / period).floor() as i64).sum::<i64>();
                if cell.rem_euclid(2) == 0 {
                    self.albedo
                } else {
                    other
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Object {
    pub shape: Shape,
    pub material: Material,
}

/// Pinhole camera at `position`, looking down +z and tilted down by `pitch`.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub position: Vec3,
    /// Downward tilt in radians.
    pub pitch: f64,
    /// Horizontal field of view in radians.
    pub fov_x: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Light {
    /// Direction the light travels (normalized on use).
    pub direction: Vec3,
    pub intensity: f64,
    pub ambient: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub camera: Camera,
    pub light: Light,
    pub objects: Vec<Object>,
}

struct Hit {
    t: f64,
    normal: Vec3,
}

fn intersect(shape: &Shape, o: Vec3, d: Vec3) -> Option<Hit> {
    const EPS: f64 = 1e-9;
    match *shape {
        Shape::Plane { point, normal } => {
            let denom = dot(d, normal);
            if denom.abs() < EPS {
                return None;
            }
            let t = dot(sub(point, o), normal) / denom;
            (t > EPS).then(|| Hit {
                t,
                normal: if denom < 0.0 { normal } else { scale(normal, -1.0) },
            })
        }
        Shape::Sphere { center, radius } => {
            let oc = sub(o, center);
            let a = dot(d, d);
            let b = dot(oc, d);
            let c = dot(oc, oc) - radius * radius;
            let disc = b * b - a * c;
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            let t = [(-b - sq) / a, (-b + sq) / a].into_iter().find(|&t| t > EPS)?;
            let p = add(o, scale(d, t));
            Some(Hit {
                t,
                normal: normalize(sub(p, center)),
            })
        }
        Shape::Cuboid { center, half, yaw } => {
            let (s, c) = yaw.sin_cos();
            // World → box frame rotation about y.
            let to_local = |v: Vec3| [c * v[0] - s * v[2], v[1], s * v[0] + c * v[2]];
            let lo = to_local(sub(o, center));
            let ld = to_local(d);
            let mut t_near = f64::NEG_INFINITY;
            let mut t_far = f64::INFINITY;
            let mut axis = 0;
            let mut sign = 1.0;
            for i in 0..3 {
                if ld[i].abs() < EPS {
                    if lo[i].abs() > half[i] {
                        return None;
                    }
                    continue;
                }
                let t1 = (-half[i] - lo[i]) / ld[i];
                let t2 = (half[i] - lo[i]) / ld[i];
                let (a, b, sg) = if t1 < t2 { (t1, t2, -1.0) } else { (t2, t1, 1.0) };
                if a > t_near {
                    t_near = a;
                    axis = i;
                    sign = sg;
                }
                t_far = t_far.min(b);
            }
            if t_near > t_far || t_near <= EPS {
                return None;
            }
            let mut ln = [0.0; 3];
            ln[axis] = sign;
            // Box frame → world.
            let normal = [c * ln[0] + s * ln[2], ln[1], -s * ln[0] + c * ln[2]];
            Some(Hit { t: t_near, normal })
        }
        Shape::Cylinder { base, radius, height } => {
            let mut best: Option<Hit> = None;
            let mut keep = |h: Hit| {
                if best.as_ref().is_none_or(|b| h.t < b.t) {
                    best = Some(h);
                }
            };
            let (ox, oz) = (o[0] - base[0], o[2] - base[2]);
            let a = d[0] * d[0] + d[2] * d[2];
            if a > EPS {
                let b = ox * d[0] + oz * d[2];
                let c = ox * ox + oz * oz - radius * radius;
                let disc = b * b - a * c;
                if disc >= 0.0 {
                    let sq = disc.sqrt();
                    for t in [(-b - sq) / a, (-b + sq) / a] {
                        let y = o[1] + t * d[1];
                        if t > EPS && y >= base[1] && y <= base[1] + height {
                            let p = add(o, scale(d, t));
                            keep(Hit {
                                t,
                                normal: normalize([p[0] - base[0], 0.0, p[2] - base[2]]),
                            });
                        }
                    }
                }
            }
            if d[1].abs() > EPS {
                for (y, ny) in [(base[1] + height, 1.0), (base[1], -1.0)] {
                    let t = (y - o[1]) / d[1];
                    let (px, pz) = (o[0] + t * d[0] - base[0], o[2] + t * d[2] - base[2]);
                    if t > EPS && px * px + pz * pz <= radius * radius {
                        keep(Hit {
                            t,
                            normal: [0.0, ny, 0.0],
                        });
                    }
                }
            }
            best
        }
    }
}

/// Casts one ray per pixel centre. Depth is clamped to `depth_range`; pixels
/// that hit nothing read the far limit.
pub fn render(scene: &Scene, height: usize, width: usize, depth_range: (f64, f64)) -> (Image<f32>, DepthMap<f32>) {
    let (near, far) = depth_range;
    let cam = &scene.camera;
    let focal = (width as f64 / 2.0) / (cam.fov_x / 2.0).tan();
    let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
    let (sp, cp) = cam.pitch.sin_cos();
    let light = normalize(scene.light.direction);
    let hw = height * width;
    let mut rgb = vec![0.0f32; 3 * hw];
    let mut depth = vec![far as f32; hw];
    for v in 0..height {
        for u in 0..width {
            // Camera-frame direction with unit forward component.
            let dc = [(u as f64 + 0.5 - cx) / focal, -(v as f64 + 0.5 - cy) / focal, 1.0];
            // Pitch down: rotate about x.
            let d = [dc[0], cp * dc[1] - sp * dc[2], sp * dc[1] + cp * dc[2]];
            let mut best: Option<(Hit, &Object)> = None;
            for obj in &scene.objects {
                if let Some(h) = intersect(&obj.shape, cam.position, d) {
                    if best.as_ref().is_none_or(|(b, _)| h.t < b.t) {
                        best = Some((h, obj));
                    }
                }
            }
            let i = v * width + u;
            if let Some((hit, obj)) = best {
                depth[i] = hit.t.clamp(near, far) as f32;
                let p = add(cam.position, scale(d, hit.t));
                let albedo = obj.material.albedo_at(p);
                let lambert = dot(hit.normal, scale(light, -1.0)).max(0.0);
                let shade = scene.light.ambient + scene.light.intensity * lambert;
                for c in 0..3 {
                    rgb[c * hw + i] = (albedo[c] * shade).clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    (
        Image {
            height,
            width,
            data: rgb,
        },
        DepthMap {
            height,
            width,
            data: depth,
            mask: vec![true; hw],
        },
    )
}
