//! Synthetic clip generation. Scenes live in a y-down world: the ground
//! plane is y = 0 and everything above it has negative y. Cameras follow
//! the usual vision convention (x right, y down, z forward) and always
//! tilt far enough toward the ground that every ray hits geometry.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io;
use crate::tensor::Tensor;

type Vec3 = [f64; 3];

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Pinhole camera: `x_cam = rot * (x_world - eye)`, stored as rotation plus
/// translation `trans = -rot * eye`.
#[derive(Clone, Copy, Debug)]
pub struct CameraParams {
    pub rot: [[f64; 3]; 3],
    pub trans: Vec3,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraParams {
    /// Camera at `eye` looking at `target`, image y aligned with world
    /// down (+y) as far as the tilt allows.
    pub fn look_at(eye: Vec3, target: Vec3, focal: f64, image_size: usize) -> Result<Self> {
        let forward = normalize(sub(target, eye));
        let down: Vec3 = [0.0, 1.0, 0.0];
        let mut right = cross(down, forward);
        if norm(right) < 1e-9 {
            // Looking straight down: any horizontal right axis works; pick
            // one deterministically from world +z.
            right = cross([0.0, 0.0, 1.0], forward);
        }
        let right = normalize(right);
        let down_cam = cross(forward, right);
        let rot = [right, down_cam, forward];
        let trans = [
            -dot(rot[0], eye),
            -dot(rot[1], eye),
            -dot(rot[2], eye),
        ];
        let c = image_size as f64 / 2.0;
        Ok(Self {
            rot,
            trans,
            fx: focal,
            fy: focal,
            cx: c,
            cy: c,
        })
    }

    pub fn eye(&self) -> Vec3 {
        // eye = -rot^T * trans.
        let r = &self.rot;
        [
            -(r[0][0] * self.trans[0] + r[1][0] * self.trans[1] + r[2][0] * self.trans[2]),
            -(r[0][1] * self.trans[0] + r[1][1] * self.trans[1] + r[2][1] * self.trans[2]),
            -(r[0][2] * self.trans[0] + r[1][2] * self.trans[1] + r[2][2] * self.trans[2]),
        ]
    }

    pub fn world_to_cam(&self, p: Vec3) -> Vec3 {
        let r = &self.rot;
        [
            dot(r[0], p) + self.trans[0],
            dot(r[1], p) + self.trans[1],
            dot(r[2], p) + self.trans[2],
        ]
    }

    /// Pixel coordinates of a camera-space point (z must be positive).
    pub fn project(&self, p: Vec3) -> Result<(f64, f64)> {
        if p[2] <= 0.0 {
            return Err(Error::Numeric(format!("projecting point behind camera, z = {}", p[2])));
        }
        Ok((self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy))
    }

    /// World-space unit ray through the center of pixel (row, col).
    pub fn ray(&self, row: usize, col: usize) -> (Vec3, Vec3) {
        let d_cam = normalize([
            (col as f64 + 0.5 - self.cx) / self.fx,
            (row as f64 + 0.5 - self.cy) / self.fy,
            1.0,
        ]);
        let r = &self.rot;
        let d_world = [
            r[0][0] * d_cam[0] + r[1][0] * d_cam[1] + r[2][0] * d_cam[2],
            r[0][1] * d_cam[0] + r[1][1] * d_cam[1] + r[2][1] * d_cam[2],
            r[0][2] * d_cam[0] + r[1][2] * d_cam[1] + r[2][2] * d_cam[2],
        ];
        (self.eye(), d_world)
    }

    /// The 12 extrinsics values row-major ([rot | trans] rows) followed by
    /// fx fy cx cy is this camera's text form.
    pub fn extrinsics_row_major(&self) -> [f64; 12] {
        let r = &self.rot;
        [
            r[0][0], r[0][1], r[0][2], self.trans[0],
            r[1][0], r[1][1], r[1][2], self.trans[1],
            r[2][0], r[2][1], r[2][2], self.trans[2],
        ]
    }

    pub fn to_line(&self) -> String {
        let e = self.extrinsics_row_major();
        let mut parts: Vec<String> = e.iter().map(|v| format!("{v:.17e}")).collect();
        for v in [self.fx, self.fy, self.cx, self.cy] {
            parts.push(format!("{v:.17e}"));
        }
        parts.join(" ")
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad camera value {t:?}")))
            })
            .collect::<Result<_>>()?;
        if vals.len() != 16 {
            return Err(Error::Format(format!(
                "camera line has {} values, expected 16",
                vals.len()
            )));
        }
        Ok(Self {
            rot: [
                [vals[0], vals[1], vals[2]],
                [vals[4], vals[5], vals[6]],
                [vals[8], vals[9], vals[10]],
            ],
            trans: [vals[3], vals[7], vals[11]],
            fx: vals[12],
            fy: vals[13],
            cx: vals[14],
            cy: vals[15],
        })
    }
}

/// Surface colouring: one albedo per object, or a 3d checker in the
/// object's local frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Style {
    Flat,
    Textured,
}

impl Style {
    pub fn name(&self) -> &'static str {
        match self {
            Style::Flat => "flat",
            Style::Textured => "textured",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(Style::Flat),
            "textured" => Ok(Style::Textured),
            other => Err(Error::Config(format!("unknown style {other:?}"))),
        }
    }
}

/// One scene object with a constant velocity (world units per frame).
#[derive(Clone, Copy, Debug)]
pub enum Object {
    Sphere {
        center: Vec3,
        radius: f64,
        albedo: Vec3,
        velocity: Vec3,
    },
    Cuboid {
        center: Vec3,
        half: Vec3,
        albedo: Vec3,
        velocity: Vec3,
    },
}

impl Object {
    fn at_frame(&self, k: usize) -> Object {
        let shift = |c: Vec3, v: Vec3| add(c, scale(v, k as f64));
        match *self {
            Object::Sphere { center, radius, albedo, velocity } => Object::Sphere {
                center: shift(center, velocity),
                radius,
                albedo,
                velocity,
            },
            Object::Cuboid { center, half, albedo, velocity } => Object::Cuboid {
                center: shift(center, velocity),
                half,
                albedo,
                velocity,
            },
        }
    }

    /// Nearest positive hit: (distance, surface normal, local offset).
    fn hit(&self, origin: Vec3, dir: Vec3) -> Option<(f64, Vec3, Vec3)> {
        const EPS: f64 = 1e-9;
        match *self {
            Object::Sphere { center, radius, .. } => {
                let oc = sub(center, origin);
                let tca = dot(oc, dir);
                let d2 = dot(oc, oc) - tca * tca;
                let r2 = radius * radius;
                if d2 > r2 {
                    return None;
                }
                let thc = (r2 - d2).sqrt();
                let t = if tca - thc > EPS {
                    tca - thc
                } else if tca + thc > EPS {
                    tca + thc
                } else {
                    return None;
                };
                let p = add(origin, scale(dir, t));
                let n = scale(sub(p, center), 1.0 / radius);
                Some((t, n, sub(p, center)))
            }
            Object::Cuboid { center, half, .. } => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                let mut axis_near = 0usize;
                for a in 0..3 {
                    let lo = center[a] - half[a];
                    let hi = center[a] + half[a];
                    if dir[a].abs() < 1e-12 {
                        if origin[a] < lo || origin[a] > hi {
                            return None;
                        }
                        continue;
                    }
                    let mut t0 = (lo - origin[a]) / dir[a];
                    let mut t1 = (hi - origin[a]) / dir[a];
                    if t0 > t1 {
                        std::mem::swap(&mut t0, &mut t1);
                    }
                    if t0 > t_near {
                        t_near = t0;
                        axis_near = a;
                    }
                    t_far = t_far.min(t1);
                    if t_near > t_far {
                        return None;
                    }
                }
                let t = if t_near > EPS { t_near } else { return None };
                let p = add(origin, scale(dir, t));
                let mut n = [0.0; 3];
                n[axis_near] = if dir[axis_near] > 0.0 { -1.0 } else { 1.0 };
                Some((t, n, sub(p, center)))
            }
        }
    }

    fn albedo(&self) -> Vec3 {
        match *self {
            Object::Sphere { albedo, .. } | Object::Cuboid { albedo, .. } => albedo,
        }
    }
}

/// Camera path over a clip.
#[derive(Clone, Copy, Debug)]
pub enum CameraSpec {
    /// Same pose every frame.
    Fixed { eye: Vec3, look_at: Vec3, focal: f64 },
    /// Circular arc around the scene center, pose parameters drawn per clip.
    Orbit,
}

/// Scene content for a clip.
#[derive(Clone, Debug)]
pub enum ObjectSpec {
    /// Objects drawn from standard ranges; `motion` bounds per-frame speed.
    Random { count: usize, motion: f64 },
    /// Exactly these objects.
    Explicit(Vec<Object>),
}

#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub image_size: usize,
    pub frames: usize,
    pub style: Style,
    pub camera: CameraSpec,
    pub objects: ObjectSpec,
}

/// Raw clip output, double precision throughout.
pub struct RawClip {
    /// Per frame [size, size, 3] colors in [0, 1].
    pub pixels: Vec<Tensor<f64>>,
    /// Per frame [size, size, 3] world-space hit points.
    pub world_points: Vec<Tensor<f64>>,
    pub cameras: Vec<CameraParams>,
}

const GROUND_ALBEDO: Vec3 = [0.45, 0.45, 0.40];
const LIGHT: Vec3 = [0.3, 1.0, 0.2]; // normalized at use; points downward

fn shade(n: Vec3, albedo: Vec3) -> Vec3 {
    let l = normalize(LIGHT);
    let lambert = 0.35 + 0.65 * (-dot(n, l)).max(0.0);
    [albedo[0] * lambert, albedo[1] * lambert, albedo[2] * lambert]
}

fn checker(local: Vec3, cell: f64, albedo: Vec3) -> Vec3 {
    let parity = (local[0] / cell).floor() + (local[1] / cell).floor() + (local[2] / cell).floor();
    if (parity as i64).rem_euclid(2) == 0 {
        albedo
    } else {
        scale(albedo, 0.45)
    }
}

fn sample_objects(count: usize, motion: f64, rng: &mut ChaCha8Rng) -> Vec<Object> {
    let mut objects = Vec::with_capacity(count);
    for _ in 0..count {
        let kind_sphere = rng.gen_bool(0.5);
        let x = rng.gen_range(-1.5..1.5);
        let z = rng.gen_range(-1.5..1.5);
        let albedo = [
            rng.gen_range(0.25..0.95),
            rng.gen_range(0.25..0.95),
            rng.gen_range(0.25..0.95),
        ];
        let velocity = if motion > 0.0 {
            [
                rng.gen_range(-motion..motion),
                0.0,
                rng.gen_range(-motion..motion),
            ]
        } else {
            [0.0; 3]
        };
        if kind_sphere {
            let radius = rng.gen_range(0.3..0.7);
            let lift = rng.gen_range(0.0..0.8);
            objects.push(Object::Sphere {
                center: [x, -(radius + lift), z],
                radius,
                albedo,
                velocity,
            });
        } else {
            let half = [
                rng.gen_range(0.25..0.6),
                rng.gen_range(0.25..0.6),
                rng.gen_range(0.25..0.6),
            ];
            let lift = rng.gen_range(0.0..0.5);
            objects.push(Object::Cuboid {
                center: [x, -(half[1] + lift), z],
                half,
                albedo,
                velocity,
            });
        }
    }
    objects
}

fn orbit_cameras(
    image_size: usize,
    frames: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<CameraParams>> {
    let focal = rng.gen_range(1.0..1.4) * image_size as f64;
    let radius = rng.gen_range(2.5..4.0);
    let height = rng.gen_range(3.5..5.0);
    let theta0 = rng.gen_range(0.0..std::f64::consts::TAU);
    let dtheta = rng.gen_range(0.05..0.15);
    (0..frames)
        .map(|k| {
            let th = theta0 + dtheta * k as f64;
            let eye = [radius * th.cos(), -height, radius * th.sin()];
            CameraParams::look_at(eye, [0.0, 0.0, 0.0], focal, image_size)
        })
        .collect()
}

fn render_frame(
    cam: &CameraParams,
    objects: &[Object],
    style: Style,
    size: usize,
) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let mut pixels = Tensor::<f64>::zeros(&[size, size, 3]);
    let mut points = Tensor::<f64>::zeros(&[size, size, 3]);
    let px = pixels.data_mut();
    let pt = points.data_mut();
    for r in 0..size {
        for c in 0..size {
            let (origin, dir) = cam.ray(r, c);
            let mut best: Option<(f64, Vec3, Vec3)> = None;
            let mut best_obj: Option<&Object> = None;
            for obj in objects {
                if let Some(h) = obj.hit(origin, dir) {
                    if best.as_ref().map_or(true, |b| h.0 < b.0) {
                        best = Some(h);
                        best_obj = Some(obj);
                    }
                }
            }
            // Infinite ground plane at y = 0; rays heading down always hit.
            if dir[1] > 0.0 {
                let t = -origin[1] / dir[1];
                if t > 1e-9 && best.as_ref().map_or(true, |b| t < b.0) {
                    let p = add(origin, scale(dir, t));
                    best = Some((t, [0.0, -1.0, 0.0], p));
                    best_obj = None;
                }
            }
            let Some((t, n, local)) = best else {
                return Err(Error::Invariant {
                    name: "scene-coverage",
                    detail: format!("ray through pixel ({r}, {c}) escaped the scene"),
                });
            };
            let hit = add(origin, scale(dir, t));
            let base = match best_obj {
                Some(obj) => match style {
                    Style::Flat => obj.albedo(),
                    Style::Textured => checker(local, 0.25, obj.albedo()),
                },
                None => match style {
                    Style::Flat => GROUND_ALBEDO,
                    Style::Textured => checker(local, 1.0, GROUND_ALBEDO),
                },
            };
            let col = shade(n, base);
            let o = (r * size + c) * 3;
            px[o] = col[0].clamp(0.0, 1.0);
            px[o + 1] = col[1].clamp(0.0, 1.0);
            px[o + 2] = col[2].clamp(0.0, 1.0);
            pt[o] = hit[0];
            pt[o + 1] = hit[1];
            pt[o + 2] = hit[2];
        }
    }
    Ok((pixels, points))
}

/// Renders one clip deterministically from its seed.
pub fn generate_clip(spec: &SceneSpec, seed: u64) -> Result<RawClip> {
    if spec.frames == 0 || spec.image_size == 0 {
        return Err(Error::Config("clip needs at least one frame and pixel".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cameras = match spec.camera {
        CameraSpec::Fixed { eye, look_at, focal } => {
            vec![CameraParams::look_at(eye, look_at, focal, spec.image_size)?; spec.frames]
        }
        CameraSpec::Orbit => orbit_cameras(spec.image_size, spec.frames, &mut rng)?,
    };
    let objects = match &spec.objects {
        ObjectSpec::Random { count, motion } => sample_objects(*count, *motion, &mut rng),
        ObjectSpec::Explicit(list) => list.clone(),
    };

    let mut pixels = Vec::with_capacity(spec.frames);
    let mut world_points = Vec::with_capacity(spec.frames);
    for (k, cam) in cameras.iter().enumerate() {
        let at_k: Vec<Object> = objects.iter().map(|o| o.at_frame(k)).collect();
        let (px, pt) = render_frame(cam, &at_k, spec.style, spec.image_size)?;
        pixels.push(px);
        world_points.push(pt);
    }
    Ok(RawClip {
        pixels,
        world_points,
        cameras,
    })
}

/// Converts an [size, size, 3] world-point map into camera coordinates.
pub fn points_to_camera(points: &Tensor<f64>, cam: &CameraParams) -> Tensor<f64> {
    let mut out = points.clone();
    for p in out.data_mut().chunks_mut(3) {
        let c = cam.world_to_cam([p[0], p[1], p[2]]);
        p.copy_from_slice(&c);
    }
    out
}

/// Split name to seed offset: clips in different splits never share seeds.
pub fn split_seed_offset(split: &str) -> Result<u64> {
    match split {
        "train" => Ok(0),
        "val" => Ok(1_000_000),
        "test" => Ok(2_000_000),
        other => Err(Error::Config(format!("unknown split {other:?}"))),
    }
}

/// Generation request for one dataset root.
#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub image_size: usize,
    pub frames: usize,
    pub objects: usize,
    pub motion: f64,
    pub style: Style,
    pub seed: u64,
    /// Clips per split; splits with zero clips are left untouched.
    pub counts: BTreeMap<String, usize>,
}

fn write_clip(dir: &Path, raw: &RawClip) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let frames = raw.pixels.len();
    for (k, px) in raw.pixels.iter().enumerate() {
        io::write_tensor(&dir.join(format!("frame_{k}.mmpt")), &px.cast::<f32>())?;
    }
    for (i, cam) in raw.cameras.iter().enumerate() {
        let x = points_to_camera(&raw.world_points[i], cam);
        io::write_tensor(&dir.join(format!("gt_X_{i}.mmpt")), &x.cast::<f32>())?;
        for j in 0..frames {
            if i == j {
                continue;
            }
            let y = points_to_camera(&raw.world_points[j], cam);
            io::write_tensor(&dir.join(format!("gt_Y_{j}_{i}.mmpt")), &y.cast::<f32>())?;
        }
    }
    let lines: Vec<String> = raw.cameras.iter().map(|c| c.to_line()).collect();
    let path = dir.join("cameras.txt");
    fs::write(&path, lines.join("\n") + "\n").map_err(|e| Error::io(&path, e))
}

/// Generates every requested split under `root` and merges the root
/// manifest: lines of regenerated splits are replaced, others kept.
pub fn generate_dataset(root: &Path, spec: &DatasetSpec) -> Result<usize> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let manifest_path = root.join("manifest.txt");
    let mut lines: Vec<String> = if manifest_path.exists() {
        fs::read_to_string(&manifest_path)
            .map_err(|e| Error::io(&manifest_path, e))?
            .lines()
            .map(str::to_string)
            .filter(|l| !l.trim().is_empty())
            .collect()
    } else {
        Vec::new()
    };

    let mut written = 0usize;
    for (split, &count) in &spec.counts {
        if count == 0 {
            continue;
        }
        let offset = split_seed_offset(split)?;
        // Regeneration replaces this split's clips of this style only, so
        // one root can accumulate both styles across invocations.
        let style_tag = format!("style={}", spec.style.name());
        lines.retain(|l| {
            l.split('/').next() != Some(split.as_str())
                || !l.split_whitespace().any(|tok| tok == style_tag)
        });
        for idx in 0..count {
            let seed = spec.seed + offset + idx as u64;
            let scene = SceneSpec {
                image_size: spec.image_size,
                frames: spec.frames,
                style: spec.style,
                camera: CameraSpec::Orbit,
                objects: ObjectSpec::Random {
                    count: spec.objects,
                    motion: spec.motion,
                },
            };
            let raw = generate_clip(&scene, seed)?;
            let clip_name = format!("clip_{}_{idx:05}", spec.style.name());
            write_clip(&root.join(split).join(&clip_name), &raw)?;
            lines.push(format!(
                "{split}/{clip_name} style={} seed={seed} objects={} frames={}",
                spec.style.name(),
                spec.objects,
                spec.frames
            ));
            written += 1;
        }
    }
    lines.sort();
    fs::write(&manifest_path, lines.join("\n") + "\n").map_err(|e| Error::io(&manifest_path, e))?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centered_sphere_depth_is_exact() {
        // Camera 4 above the ground looking straight down at a unit sphere
        // resting on the origin: the central ray hits at distance 2.
        let spec = SceneSpec {
            image_size: 33,
            frames: 1,
            style: Style::Flat,
            camera: CameraSpec::Fixed {
                eye: [0.0, -4.0, 0.0],
                look_at: [0.0, 0.0, 0.0],
                focal: 40.0,
            },
            objects: ObjectSpec::Explicit(vec![Object::Sphere {
                center: [0.0, -1.0, 0.0],
                radius: 1.0,
                albedo: [0.8, 0.2, 0.2],
                velocity: [0.0; 3],
            }]),
        };
        let raw = generate_clip(&spec, 0).unwrap();
        let pt = &raw.world_points[0];
        let center = 16usize;
        let idx = (center * 33 + center) * 3;
        assert_eq!(pt.data()[idx], 0.0);
        assert_eq!(pt.data()[idx + 1], -2.0);
        assert_eq!(pt.data()[idx + 2], 0.0);
        let cam_pt = raw.cameras[0].world_to_cam([0.0, -2.0, 0.0]);
        assert_eq!(cam_pt[2], 2.0);
        assert!(cam_pt[0].abs() < 1e-15 && cam_pt[1].abs() < 1e-15);
    }

    #[test]
    fn static_scene_with_fixed_camera_repeats_exactly() {
        let spec = SceneSpec {
            image_size: 16,
            frames: 3,
            style: Style::Textured,
            camera: CameraSpec::Fixed {
                eye: [0.5, -4.0, 0.3],
                look_at: [0.0, 0.0, 0.0],
                focal: 20.0,
            },
            objects: ObjectSpec::Explicit(vec![Object::Cuboid {
                center: [0.2, -0.4, -0.1],
                half: [0.3, 0.4, 0.3],
                albedo: [0.2, 0.6, 0.9],
                velocity: [0.0; 3],
            }]),
        };
        let raw = generate_clip(&spec, 1).unwrap();
        for k in 1..3 {
            assert_eq!(raw.pixels[0], raw.pixels[k]);
            assert_eq!(raw.world_points[0], raw.world_points[k]);
        }
        // With identical world points, cross-frame maps equal ego maps.
        let x0 = points_to_camera(&raw.world_points[0], &raw.cameras[0]);
        let y10 = points_to_camera(&raw.world_points[1], &raw.cameras[0]);
        assert_eq!(x0, y10);
    }

    #[test]
    fn every_world_point_reprojects_to_its_pixel() {
        let spec = SceneSpec {
            image_size: 24,
            frames: 4,
            style: Style::Flat,
            camera: CameraSpec::Orbit,
            objects: ObjectSpec::Explicit(Vec::new()),
        };
        let raw = generate_clip(&spec, 7).unwrap();
        for (k, cam) in raw.cameras.iter().enumerate() {
            let pts = &raw.world_points[k];
            for r in 0..24 {
                for c in 0..24 {
                    let o = (r * 24 + c) * 3;
                    let w = [pts.data()[o], pts.data()[o + 1], pts.data()[o + 2]];
                    let p = cam.world_to_cam(w);
                    assert!(p[2] > 0.0);
                    let (u, v) = cam.project(p).unwrap();
                    assert!((u - (c as f64 + 0.5)).abs() < 1e-5, "frame {k} ({r},{c}): {u}");
                    assert!((v - (r as f64 + 0.5)).abs() < 1e-5, "frame {k} ({r},{c}): {v}");
                }
            }
        }
    }

    #[test]
    fn orbit_scenes_cover_every_pixel_with_finite_values() {
        let spec = SceneSpec {
            image_size: 16,
            frames: 6,
            style: Style::Textured,
            camera: CameraSpec::Orbit,
            objects: ObjectSpec::Random { count: 3, motion: 0.05 },
        };
        let raw = generate_clip(&spec, 42).unwrap();
        for k in 0..6 {
            assert!(raw.pixels[k].all_finite());
            assert!(raw.world_points[k].all_finite());
            assert!(raw.pixels[k].data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let depth_ok = points_to_camera(&raw.world_points[k], &raw.cameras[k])
                .data()
                .chunks(3)
                .all(|p| p[2] > 0.0);
            assert!(depth_ok, "frame {k} has non-positive depth");
        }
        // Moving objects make frames differ.
        assert!(raw.pixels[0] != raw.pixels[5]);
    }

    #[test]
    fn flat_and_textured_styles_differ_only_in_color() {
        let mk = |style| SceneSpec {
            image_size: 12,
            frames: 1,
            style,
            camera: CameraSpec::Fixed {
                eye: [0.0, -4.0, 0.1],
                look_at: [0.0, 0.0, 0.0],
                focal: 15.0,
            },
            objects: ObjectSpec::Explicit(vec![Object::Sphere {
                center: [0.0, -0.8, 0.0],
                radius: 0.8,
                albedo: [0.9, 0.5, 0.3],
                velocity: [0.0; 3],
            }]),
        };
        let flat = generate_clip(&mk(Style::Flat), 3).unwrap();
        let tex = generate_clip(&mk(Style::Textured), 3).unwrap();
        assert_eq!(flat.world_points[0], tex.world_points[0]);
        assert!(flat.pixels[0] != tex.pixels[0]);
    }

    #[test]
    fn camera_line_roundtrip() {
        let cam = CameraParams::look_at([1.0, -4.2, 0.7], [0.0, 0.0, 0.0], 38.4, 32).unwrap();
        let back = CameraParams::from_line(&cam.to_line()).unwrap();
        for i in 0..3 {
            assert_eq!(cam.rot[i], back.rot[i]);
        }
        assert_eq!(cam.trans, back.trans);
        assert_eq!((cam.fx, cam.fy, cam.cx, cam.cy), (back.fx, back.fy, back.cx, back.cy));
        // Rotation is orthonormal: R * R^T = I.
        for i in 0..3 {
            for j in 0..3 {
                let v = dot(cam.rot[i], cam.rot[j]);
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((v - want).abs() < 1e-12);
            }
        }
        // trans = -R * eye recovers the eye.
        let eye = cam.eye();
        assert!(norm(sub(eye, [1.0, -4.2, 0.7])) < 1e-12);
    }

    #[test]
    fn dataset_generation_is_byte_identical_and_merges_manifest() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            image_size: 8,
            frames: 3,
            objects: 2,
            motion: 0.05,
            style: Style::Flat,
            seed: 11,
            counts: [("train".to_string(), 2), ("val".to_string(), 1)]
                .into_iter()
                .collect(),
        };
        assert_eq!(generate_dataset(dir_a.path(), &spec).unwrap(), 3);
        assert_eq!(generate_dataset(dir_b.path(), &spec).unwrap(), 3);
        for rel in [
            "manifest.txt",
            "train/clip_flat_00000/frame_0.mmpt",
            "train/clip_flat_00001/gt_Y_1_0.mmpt",
            "val/clip_flat_00000/cameras.txt",
        ] {
            let a = std::fs::read(dir_a.path().join(rel)).unwrap();
            let b = std::fs::read(dir_b.path().join(rel)).unwrap();
            assert_eq!(a, b, "{rel}");
        }

        // Generation replaces per (split, style): adding textured val clips
        // keeps both the train lines and the flat val line.
        let manifest_before = std::fs::read_to_string(dir_a.path().join("manifest.txt")).unwrap();
        assert!(manifest_before.contains("train/clip_flat_00001"));
        let respec = DatasetSpec {
            style: Style::Textured,
            counts: [("val".to_string(), 2)].into_iter().collect(),
            ..spec.clone()
        };
        generate_dataset(dir_a.path(), &respec).unwrap();
        let manifest_after = std::fs::read_to_string(dir_a.path().join("manifest.txt")).unwrap();
        assert!(manifest_after.contains("train/clip_flat_00000 style=flat"));
        assert!(manifest_after.contains("train/clip_flat_00001 style=flat"));
        assert!(manifest_after.contains("val/clip_flat_00000 style=flat"));
        assert!(manifest_after.contains("val/clip_textured_00000 style=textured"));
        assert!(manifest_after.contains("val/clip_textured_00001 style=textured"));
        // Same split and style again: the old textured lines are replaced,
        // not duplicated.
        generate_dataset(dir_a.path(), &respec).unwrap();
        let manifest_again = std::fs::read_to_string(dir_a.path().join("manifest.txt")).unwrap();
        assert_eq!(manifest_again, manifest_after);
        let mut sorted: Vec<&str> = manifest_after.lines().collect();
        let original = sorted.clone();
        sorted.sort();
        assert_eq!(sorted, original, "manifest lines stay sorted");
    }

    #[test]
    fn val_and_train_seeds_never_collide() {
        assert_eq!(split_seed_offset("train").unwrap(), 0);
        assert_eq!(split_seed_offset("val").unwrap(), 1_000_000);
        assert_eq!(split_seed_offset("test").unwrap(), 2_000_000);
        assert!(split_seed_offset("bogus").is_err());
    }
}
