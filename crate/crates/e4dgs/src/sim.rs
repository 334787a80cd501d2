//! Synthetic multi-view dataset generation.
//!
//! Scenes are analytic (spheres and discs with procedural textures under
//! ambient + one directional light) and ray-traced directly, deliberately
//! independent of the splat renderer so the two cannot validate each other
//! circularly. High-rate frame sequences are converted to events with an
//! ideal contrast-threshold model: per pixel, log intensity is linearly
//! interpolated between frames and an event fires at every reference-level
//! crossing. Motion blur is synthesized by averaging K consecutive sharp
//! frames in linear intensity.

use crate::error::{E4dgsError, Result};
use crate::events::{read_events, write_events, Event, EventStream};
use crate::geometry::{read_trajectory, write_trajectory, CameraIntrinsics, CameraTrajectory, Pose};
use crate::image::{read_pnm, write_pnm, Image};
use crate::render::LOG_FLOOR;
use nalgebra::{UnitQuaternion, UnitVector3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

// --- Scene model ----------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub enum Shape {
    Sphere { radius: f64 },
    /// Flat disc in the local xy-plane (normal = local +z).
    Disc { radius: f64 },
}

#[derive(Debug, Clone, Copy)]
pub enum Texture {
    Solid(Vector3<f64>),
    /// Checkerboard over the local surface parameterization.
    Checker {
        color_a: Vector3<f64>,
        color_b: Vector3<f64>,
        /// Checker cell size in local units (world units for discs, radians
        /// for spheres).
        cell: f64,
    },
}

#[derive(Debug, Clone, Copy)]
pub enum Motion {
    Static,
    /// Rigid orbit: rotate the primitive's pose about `axis` through `center`
    /// at `rad_per_sec`. The local frame co-rotates, so textures move too.
    Orbit {
        center: Vector3<f64>,
        axis: UnitVector3<f64>,
        rad_per_sec: f64,
    },
    Translate {
        velocity: Vector3<f64>,
    },
}

#[derive(Debug, Clone, Copy)]
pub struct ScenePrimitive {
    pub shape: Shape,
    /// Center position at t = 0.
    pub center: Vector3<f64>,
    /// Local frame orientation at t = 0.
    pub orientation: UnitQuaternion<f64>,
    pub texture: Texture,
    pub motion: Motion,
}

impl ScenePrimitive {
    /// Pose of the primitive at time t (seconds).
    fn pose_at(&self, t: f64) -> (Vector3<f64>, UnitQuaternion<f64>) {
        match self.motion {
            Motion::Static => (self.center, self.orientation),
            Motion::Orbit {
                center,
                axis,
                rad_per_sec,
            } => {
                let r = UnitQuaternion::from_axis_angle(&axis, rad_per_sec * t);
                (center + r * (self.center - center), r * self.orientation)
            }
            Motion::Translate { velocity } => (self.center + velocity * t, self.orientation),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AnalyticScene {
    pub primitives: Vec<ScenePrimitive>,
    pub background: Vector3<f64>,
    pub ambient: f64,
    /// Direction light travels (from the light toward the scene).
    pub light_dir: UnitVector3<f64>,
    pub light_intensity: f64,
}

impl AnalyticScene {
    pub fn empty(background: Vector3<f64>) -> Self {
        Self {
            primitives: Vec::new(),
            background,
            ambient: 0.3,
            light_dir: UnitVector3::new_normalize(Vector3::new(-0.4, -0.6, 1.0)),
            light_intensity: 0.7,
        }
    }
}

struct Hit {
    t_ray: f64,
    albedo: Vector3<f64>,
    normal: Vector3<f64>,
}

fn texture_color(texture: &Texture, u: f64, v: f64) -> Vector3<f64> {
    match texture {
        Texture::Solid(c) => *c,
        Texture::Checker { color_a, color_b, cell } => {
            let parity =
                ((u / cell).floor() as i64 + (v / cell).floor() as i64).rem_euclid(2);
            if parity == 0 {
                *color_a
            } else {
                *color_b
            }
        }
    }
}

fn intersect(prim: &ScenePrimitive, t: f64, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
    let (center, orientation) = prim.pose_at(t);
    match prim.shape {
        Shape::Sphere { radius } => {
            let oc = origin - center;
            let b = oc.dot(dir);
            let c = oc.norm_squared() - radius * radius;
            let disc = b * b - c;
            if disc < 0.0 {
                return None;
            }
            let sqrt_d = disc.sqrt();
            let t_ray = if -b - sqrt_d > 1e-6 {
                -b - sqrt_d
            } else if -b + sqrt_d > 1e-6 {
                -b + sqrt_d
            } else {
                return None;
            };
            let point = origin + dir * t_ray;
            let normal = (point - center) / radius;
            // Texture from spherical angles in the co-rotating local frame.
            let local = orientation.inverse() * normal;
            let theta = local.z.clamp(-1.0, 1.0).acos();
            let phi = local.y.atan2(local.x);
            Some(Hit {
                t_ray,
                albedo: texture_color(&prim.texture, theta, phi),
                normal,
            })
        }
        Shape::Disc { radius } => {
            let normal = orientation * Vector3::z();
            let denom = normal.dot(dir);
            if denom.abs() < 1e-9 {
                return None;
            }
            let t_ray = normal.dot(&(center - origin)) / denom;
            if t_ray <= 1e-6 {
                return None;
            }
            let point = origin + dir * t_ray;
            let local = orientation.inverse() * (point - center);
            if local.x * local.x + local.y * local.y > radius * radius {
                return None;
            }
            Some(Hit {
                t_ray,
                albedo: texture_color(&prim.texture, local.x, local.y),
                normal,
            })
        }
    }
}

/// Ray-traces one frame at scene time `t` (seconds).
pub fn render_scene_frame(
    scene: &AnalyticScene,
    intrinsics: &CameraIntrinsics,
    pose: &Pose,
    t: f64,
) -> Image {
    let w = intrinsics.width as usize;
    let h = intrinsics.height as usize;
    let origin = pose.camera_center();
    let rot_cw = pose.rotation_matrix().transpose();
    let mut img = Image::zeros(w, h, 3);
    for y in 0..h {
        for x in 0..w {
            let dir_cam = Vector3::new(
                (x as f64 - intrinsics.cx) / intrinsics.fx,
                (y as f64 - intrinsics.cy) / intrinsics.fy,
                1.0,
            )
            .normalize();
            let dir = rot_cw * dir_cam;
            let mut best: Option<Hit> = None;
            for prim in &scene.primitives {
                if let Some(hit) = intersect(prim, t, &origin, &dir) {
                    if best.as_ref().is_none_or(|b| hit.t_ray < b.t_ray) {
                        best = Some(hit);
                    }
                }
            }
            let color = match best {
                Some(hit) => {
                    // Two-sided Lambertian shading.
                    let diffuse = hit.normal.dot(&-scene.light_dir.into_inner()).abs();
                    hit.albedo * (scene.ambient + scene.light_intensity * diffuse)
                }
                None => scene.background,
            };
            for c in 0..3 {
                img.data[(y * w + x) * 3 + c] = color[c].clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Uniformly timed frames with linear-intensity pixel values in [0, 1].
#[derive(Debug, Clone)]
pub struct FrameSequence {
    pub timestamps: Vec<f64>,
    pub frames: Vec<Image>,
}

impl FrameSequence {
    pub fn duration(&self) -> f64 {
        match self.timestamps.as_slice() {
            [] | [_] => 0.0,
            ts => ts[ts.len() - 1] - ts[0],
        }
    }
}

/// Renders `n_frames` frames at `frame_rate` FPS along a camera trajectory.
pub fn render_sequence(
    scene: &AnalyticScene,
    trajectory: &CameraTrajectory,
    intrinsics: &CameraIntrinsics,
    frame_rate: f64,
    n_frames: usize,
) -> Result<FrameSequence> {
    if frame_rate <= 0.0 || n_frames == 0 {
        return Err(E4dgsError::InvalidArgument(
            "render_sequence: frame_rate and n_frames must be positive".into(),
        ));
    }
    let timestamps: Vec<f64> = (0..n_frames).map(|i| i as f64 / frame_rate).collect();
    let frames: Vec<Image> = timestamps
        .par_iter()
        .map(|&t| {
            let pose = trajectory.interpolate_pose(t)?;
            Ok(render_scene_frame(scene, intrinsics, &pose, t))
        })
        .collect::<Result<_>>()?;
    Ok(FrameSequence { timestamps, frames })
}

/// Ideal event generation: linear log-intensity interpolation between frames
/// with reference-level crossings.
pub fn video_to_events(seq: &FrameSequence, c_pos: f64, c_neg: f64) -> Result<EventStream> {
    if seq.frames.len() < 2 {
        return Err(E4dgsError::InvalidArgument(
            "video_to_events needs at least 2 frames".into(),
        ));
    }
    let w = seq.frames[0].width;
    let h = seq.frames[0].height;
    let gray: Vec<Image> = seq
        .frames
        .iter()
        .map(|f| f.to_grayscale().map(|v| v.max(LOG_FLOOR).ln()))
        .collect();

    let mut events: Vec<Event> = (0..h)
        .into_par_iter()
        .flat_map_iter(|y| {
            let gray = &gray;
            let timestamps = &seq.timestamps;
            (0..w).flat_map(move |x| {
                let mut pixel_events = Vec::new();
                let mut l_ref = gray[0].data[y * w + x];
                for k in 1..gray.len() {
                    let (t_a, t_b) = (timestamps[k - 1], timestamps[k]);
                    let (l_a, l_b) = (gray[k - 1].data[y * w + x], gray[k].data[y * w + x]);
                    if l_b > l_a {
                        while l_b >= l_ref + c_pos {
                            l_ref += c_pos;
                            let tc = t_a + (l_ref - l_a) / (l_b - l_a) * (t_b - t_a);
                            pixel_events.push(Event {
                                t_us: (tc * 1e6).round() as u64,
                                x: x as u16,
                                y: y as u16,
                                p: 1,
                            });
                        }
                    } else if l_b < l_a {
                        while l_b <= l_ref - c_neg {
                            l_ref -= c_neg;
                            let tc = t_a + (l_ref - l_a) / (l_b - l_a) * (t_b - t_a);
                            pixel_events.push(Event {
                                t_us: (tc * 1e6).round() as u64,
                                x: x as u16,
                                y: y as u16,
                                p: -1,
                            });
                        }
                    }
                }
                pixel_events
            })
        })
        .collect();
    // Global sort with a full tie-break for determinism.
    events.sort_unstable_by_key(|e| (e.t_us, e.y, e.x, e.p));
    EventStream::new(events, w as u16, h as u16, c_pos, c_neg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlurSeverity {
    None,
    Mild,
    Medium,
    Strong,
}

impl BlurSeverity {
    pub fn kernel_frames(&self) -> usize {
        match self {
            BlurSeverity::None => 1,
            BlurSeverity::Mild => 5,
            BlurSeverity::Medium => 15,
            BlurSeverity::Strong => 45,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "mild" => Ok(Self::Mild),
            "medium" => Ok(Self::Medium),
            "strong" => Ok(Self::Strong),
            other => Err(E4dgsError::InvalidArgument(format!(
                "unknown blur severity '{other}' (expected none|mild|medium|strong)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            BlurSeverity::None => "none",
            BlurSeverity::Mild => "mild",
            BlurSeverity::Medium => "medium",
            BlurSeverity::Strong => "strong",
        }
    }
}

/// Averages K consecutive sharp frames per output frame (non-overlapping
/// windows; the final window truncates). Output timestamp = window center.
pub fn synthesize_blur(seq: &FrameSequence, severity: BlurSeverity) -> FrameSequence {
    let k = severity.kernel_frames();
    if k <= 1 {
        return seq.clone();
    }
    let mut timestamps = Vec::new();
    let mut frames = Vec::new();
    for (chunk_t, chunk_f) in seq.timestamps.chunks(k).zip(seq.frames.chunks(k)) {
        timestamps.push(chunk_t.iter().sum::<f64>() / chunk_t.len() as f64);
        let mut acc = Image::zeros(chunk_f[0].width, chunk_f[0].height, chunk_f[0].channels);
        for f in chunk_f {
            for (a, v) in acc.data.iter_mut().zip(&f.data) {
                *a += v;
            }
        }
        let inv = 1.0 / chunk_f.len() as f64;
        for a in &mut acc.data {
            *a *= inv;
        }
        frames.push(acc);
    }
    FrameSequence { timestamps, frames }
}

// --- Camera rigs and scene presets ----------------------------------------

/// `n` cameras uniformly distributed in azimuth on a sphere of `radius`
/// around `target`, each sweeping a slow spiral (azimuth advance plus a
/// gentle elevation oscillation) over `duration` seconds.
pub fn spherical_spiral_rig(
    n: usize,
    radius: f64,
    elevation: f64,
    target: Vector3<f64>,
    duration: f64,
    keyframes: usize,
) -> Result<Vec<CameraTrajectory>> {
    if n == 0 || keyframes < 2 {
        return Err(E4dgsError::InvalidArgument(
            "spherical_spiral_rig: need >= 1 camera and >= 2 keyframes".into(),
        ));
    }
    (0..n)
        .map(|ci| {
            let base_az = 2.0 * std::f64::consts::PI * ci as f64 / n as f64;
            let kfs = (0..keyframes)
                .map(|ki| {
                    let u = ki as f64 / (keyframes - 1) as f64;
                    let t = u * duration;
                    // Quarter-turn sweep with a mild elevation wobble.
                    let az = base_az + 0.5 * std::f64::consts::PI * u;
                    let el = elevation + 0.15 * (2.0 * std::f64::consts::PI * u).sin();
                    let eye = target
                        + radius
                            * Vector3::new(el.cos() * az.cos(), el.sin(), el.cos() * az.sin());
                    (t, Pose::look_at(eye, target, Vector3::new(0.0, 1.0, 0.0)))
                })
                .collect();
            CameraTrajectory::new(kfs)
        })
        .collect()
}

/// Desk-scale scene: a checkered disc orbiting the vertical axis in front of
/// a static textured sphere.
pub fn orbiting_disc_scene() -> AnalyticScene {
    let mut scene = AnalyticScene::empty(Vector3::new(0.12, 0.12, 0.12));
    scene.primitives.push(ScenePrimitive {
        shape: Shape::Disc { radius: 0.8 },
        center: Vector3::new(1.1, 0.0, 0.0),
        orientation: UnitQuaternion::from_axis_angle(
            &UnitVector3::new_normalize(Vector3::x()),
            0.4,
        ),
        texture: Texture::Checker {
            color_a: Vector3::new(0.95, 0.9, 0.25),
            color_b: Vector3::new(0.06, 0.06, 0.3),
            cell: 0.3,
        },
        motion: Motion::Orbit {
            center: Vector3::zeros(),
            axis: UnitVector3::new_normalize(Vector3::y()),
            rad_per_sec: 0.5 * std::f64::consts::PI, // quarter revolution per second
        },
    });
    scene.primitives.push(ScenePrimitive {
        shape: Shape::Sphere { radius: 0.55 },
        center: Vector3::zeros(),
        orientation: UnitQuaternion::identity(),
        texture: Texture::Solid(Vector3::new(0.85, 0.8, 0.6)),
        motion: Motion::Static,
    });
    scene
}

// --- Dataset serialization --------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub duration_us: u64,
    pub frame_rate: f64,
    pub thresholds: Thresholds,
    pub blur_severity: BlurSeverity,
    /// Timestamp (microseconds) of the first stored frame; together with
    /// frame_rate this reconstructs all frame times.
    pub frame_t0_us: u64,
    pub cameras: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Thresholds {
    pub c_pos: f64,
    pub c_neg: f64,
}

#[derive(Debug, Clone)]
pub struct CameraData {
    pub stream: EventStream,
    pub frames: FrameSequence,
    pub intrinsics: CameraIntrinsics,
    pub trajectory: CameraTrajectory,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub cameras: Vec<CameraData>,
}

pub fn write_dataset(out_dir: &Path, dataset: &Dataset) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| E4dgsError::io(out_dir, e))?;
    let meta_json =
        serde_json::to_string_pretty(&dataset.meta).map_err(|e| E4dgsError::ContractViolation(e.to_string()))?;
    std::fs::write(out_dir.join("meta.json"), meta_json)
        .map_err(|e| E4dgsError::io(out_dir.join("meta.json"), e))?;
    for (ci, cam) in dataset.cameras.iter().enumerate() {
        let cam_dir = out_dir.join(format!("cam_{ci:02}"));
        let frames_dir = cam_dir.join("frames");
        std::fs::create_dir_all(&frames_dir).map_err(|e| E4dgsError::io(&frames_dir, e))?;
        write_events(&cam_dir.join("events.bin"), &cam.stream)?;
        write_trajectory(
            &cam_dir.join("trajectory.json"),
            &cam.intrinsics,
            &cam.trajectory,
        )?;
        for (fi, frame) in cam.frames.frames.iter().enumerate() {
            let ext = if frame.channels == 1 { "pgm" } else { "ppm" };
            write_pnm(&frames_dir.join(format!("{fi:04}.{ext}")), frame, 16)?;
        }
    }
    Ok(())
}

pub fn read_dataset(in_dir: &Path) -> Result<Dataset> {
    let meta_path = in_dir.join("meta.json");
    let meta_text = std::fs::read_to_string(&meta_path).map_err(|e| E4dgsError::io(&meta_path, e))?;
    let meta: DatasetMeta = serde_json::from_str(&meta_text)
        .map_err(|e| E4dgsError::parse(&meta_path, e.to_string()))?;
    let mut cameras = Vec::new();
    for ci in 0..meta.cameras {
        let cam_dir = in_dir.join(format!("cam_{ci:02}"));
        let stream = read_events(
            &cam_dir.join("events.bin"),
            meta.thresholds.c_pos,
            meta.thresholds.c_neg,
        )?;
        let (intrinsics, trajectory) = read_trajectory(&cam_dir.join("trajectory.json"))?;
        let frames_dir = cam_dir.join("frames");
        let mut frame_paths: Vec<_> = std::fs::read_dir(&frames_dir)
            .map_err(|e| E4dgsError::io(&frames_dir, e))?
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|e| E4dgsError::io(&frames_dir, e))?
            .into_iter()
            .map(|e| e.path())
            .collect();
        frame_paths.sort();
        let frames: Vec<Image> = frame_paths.iter().map(|p| read_pnm(p)).collect::<Result<_>>()?;
        let t0 = meta.frame_t0_us as f64 * 1e-6;
        let timestamps = (0..frames.len())
            .map(|i| t0 + i as f64 / meta.frame_rate)
            .collect();
        cameras.push(CameraData {
            stream,
            frames: FrameSequence { timestamps, frames },
            intrinsics,
            trajectory,
        });
    }
    Ok(Dataset { meta, cameras })
}

// --- End-to-end simulation ---------------------------------------------------

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub width: u32,
    pub height: u32,
    pub cameras: usize,
    pub frame_rate: f64,
    pub n_frames: usize,
    pub c_pos: f64,
    pub c_neg: f64,
    pub blur: BlurSeverity,
    pub rig_radius: f64,
    pub rig_elevation: f64,
    pub focal: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            cameras: 6,
            frame_rate: 600.0,
            n_frames: 600,
            c_pos: 0.15,
            c_neg: 0.15,
            blur: BlurSeverity::None,
            rig_radius: 4.5,
            rig_elevation: 0.35,
            focal: 70.0,
        }
    }
}

/// Renders the scene for every camera, generates events from the sharp
/// frames, and stores (optionally blurred) RGB frames alongside.
pub fn simulate_dataset(scene: &AnalyticScene, config: &SimConfig) -> Result<Dataset> {
    if config.cameras == 0 {
        return Err(E4dgsError::InvalidArgument("need at least one camera".into()));
    }
    let intrinsics = CameraIntrinsics::new(
        config.focal,
        config.focal,
        (config.width as f64 - 1.0) / 2.0,
        (config.height as f64 - 1.0) / 2.0,
        config.width,
        config.height,
    )?;
    let duration = (config.n_frames - 1) as f64 / config.frame_rate;
    let rig = spherical_spiral_rig(
        config.cameras,
        config.rig_radius,
        config.rig_elevation,
        Vector3::zeros(),
        duration,
        9,
    )?;
    let cameras: Vec<CameraData> = rig
        .iter()
        .map(|traj| {
            let sharp = render_sequence(scene, traj, &intrinsics, config.frame_rate, config.n_frames)?;
            let stream = video_to_events(&sharp, config.c_pos, config.c_neg)?;
            let stored = synthesize_blur(&sharp, config.blur);
            Ok(CameraData {
                stream,
                frames: stored,
                intrinsics,
                trajectory: traj.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let stored_rate = config.frame_rate / config.blur.kernel_frames() as f64;
    let frame_t0_us = (cameras[0].frames.timestamps[0] * 1e6).round() as u64;
    Ok(Dataset {
        meta: DatasetMeta {
            duration_us: (duration * 1e6).round() as u64,
            frame_rate: stored_rate,
            thresholds: Thresholds {
                c_pos: config.c_pos,
                c_neg: config.c_neg,
            },
            blur_severity: config.blur,
            frame_t0_us,
            cameras: config.cameras,
        },
        cameras,
    })
}
