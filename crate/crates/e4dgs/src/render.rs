//! Differentiable forward rasterization of deformed Gaussians with an
//! analytic backward pass.
//!
//! Forward, per pixel (front-to-back by camera-frame depth):
//!   alpha_i = min(opacity_i * exp(-0.5 d^T conic d), 0.99)
//!   C(x)    = sum_i c_i * alpha_i * T_i + background * T_final,
//!   T_{i+1} = T_i * (1 - alpha_i)
//!
//! 2D covariances come from the EWA-style perspective Jacobian with a fixed
//! +0.3 px^2 isotropic dilation. Work is tiled 16x16; per-tile results are
//! merged in tile order so repeated renders are bit-identical.

use crate::error::{E4dgsError, Result};
use crate::gaussians::{apply_offsets, DeformationField, GaussianCloud, GaussianPrimitive, StopGrad};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::image::{Image, LUMA_WEIGHTS};
use crate::math::sigmoid;
use nalgebra::{Matrix2, Matrix2x3, Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};
use rayon::prelude::*;

pub const TILE_SIZE: usize = 16;
pub const DILATION: f64 = 0.3;
pub const ALPHA_CLAMP: f64 = 0.99;
pub const ALPHA_MIN: f64 = 1e-6;
pub const TRANSMITTANCE_CUTOFF: f64 = 1e-4;
pub const LOG_FLOOR: f64 = 1e-3;
const Z_NEAR: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
pub struct Camera {
    pub intrinsics: CameraIntrinsics,
    pub pose: Pose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelMode {
    /// One channel; each Gaussian contributes the luma of its color.
    Gray,
    Rgb,
}

impl ChannelMode {
    pub fn channels(&self) -> usize {
        match self {
            ChannelMode::Gray => 1,
            ChannelMode::Rgb => 3,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RenderOptions {
    pub background: Vector3<f64>,
    pub mode: ChannelMode,
}

impl RenderOptions {
    pub fn gray(background: f64) -> Self {
        Self {
            background: Vector3::repeat(background),
            mode: ChannelMode::Gray,
        }
    }

    pub fn rgb(background: Vector3<f64>) -> Self {
        Self {
            background,
            mode: ChannelMode::Rgb,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    /// H x W x C linear intensity in [0, 1] (unclipped compositing output).
    pub image: Image,
    /// Max alpha_i * T_i each primitive attained over all pixels this render.
    pub per_gaussian_max_blend_weight: Vec<f64>,
    /// H x W transmittance remaining after all primitives.
    pub per_pixel_final_transmittance: Vec<f64>,
}

/// Gradients w.r.t. the deformed per-primitive parameters. With the
/// stop-gradient on the deformation input these double as the gradients for
/// both the canonical parameters and the offsets.
#[derive(Debug, Clone)]
pub struct RenderGradients {
    pub d_position: Vec<Vector3<f64>>,
    /// Gradient w.r.t. the raw (pre-normalization) quaternion.
    pub d_rotation: Vec<Quaternion<f64>>,
    pub d_log_scale: Vec<Vector3<f64>>,
    pub d_opacity_param: Vec<f64>,
    pub d_color: Vec<Vector3<f64>>,
    /// Screen-space mean gradient, used for densification statistics.
    pub d_mean2d: Vec<Vector2<f64>>,
}

impl RenderGradients {
    fn zeros(n: usize) -> Self {
        Self {
            d_position: vec![Vector3::zeros(); n],
            d_rotation: vec![Quaternion::new(0.0, 0.0, 0.0, 0.0); n],
            d_log_scale: vec![Vector3::zeros(); n],
            d_opacity_param: vec![0.0; n],
            d_color: vec![Vector3::zeros(); n],
            d_mean2d: vec![Vector2::zeros(); n],
        }
    }

    pub fn add(&mut self, other: &RenderGradients) {
        for i in 0..self.d_position.len() {
            self.d_position[i] += other.d_position[i];
            self.d_rotation[i] += other.d_rotation[i];
            self.d_log_scale[i] += other.d_log_scale[i];
            self.d_opacity_param[i] += other.d_opacity_param[i];
            self.d_color[i] += other.d_color[i];
            self.d_mean2d[i] += other.d_mean2d[i];
        }
    }

    pub fn is_finite(&self) -> bool {
        self.d_position.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.d_rotation.iter().all(|q| q.coords.iter().all(|x| x.is_finite()))
            && self.d_log_scale.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.d_opacity_param.iter().all(|x| x.is_finite())
            && self.d_color.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Screen-space footprint of one visible primitive.
#[derive(Debug, Clone, Copy)]
struct Splat {
    idx: usize,
    depth: f64,
    mean2d: Vector2<f64>,
    conic: Matrix2<f64>,
    opacity: f64,
    color: Vector3<f64>,
    color_scalar: f64,
    radius: f64,
}

/// Everything the backward pass needs from the matching forward call.
pub struct RenderContext {
    primitives: Vec<GaussianPrimitive>,
    camera: Camera,
    options: RenderOptions,
    splats: Vec<Splat>,
    /// Depth-sorted splat indices (into `splats`) per tile, tiles row-major.
    tile_lists: Vec<Vec<u32>>,
    tiles_x: usize,
    tiles_y: usize,
    image: Image,
}

impl RenderContext {
    pub fn num_primitives(&self) -> usize {
        self.primitives.len()
    }
}

fn prepare_splats(
    primitives: &[GaussianPrimitive],
    camera: &Camera,
    mode: ChannelMode,
) -> Vec<Splat> {
    let intr = &camera.intrinsics;
    let width = intr.width as f64;
    let height = intr.height as f64;
    let rot_wc = camera.pose.rotation_matrix();

    primitives
        .par_iter()
        .enumerate()
        .filter_map(|(idx, p)| {
            let cam = camera.pose.transform_point(&p.position);
            if cam.z <= Z_NEAR {
                return None;
            }
            let mean2d = Vector2::new(
                intr.fx * cam.x / cam.z + intr.cx,
                intr.fy * cam.y / cam.z + intr.cy,
            );

            let s = p.log_scale.map(f64::exp);
            let rot = UnitQuaternion::from_quaternion(p.rotation)
                .to_rotation_matrix()
                .into_inner();
            let sigma_world = rot * Matrix3::from_diagonal(&s.component_mul(&s)) * rot.transpose();
            let sigma_cam = rot_wc * sigma_world * rot_wc.transpose();
            let j = perspective_jacobian(intr, &cam);
            let sigma2d = j * sigma_cam * j.transpose() + Matrix2::identity() * DILATION;

            let det = sigma2d[(0, 0)] * sigma2d[(1, 1)] - sigma2d[(0, 1)] * sigma2d[(1, 0)];
            if det <= 0.0 {
                return None;
            }
            let conic = Matrix2::new(
                sigma2d[(1, 1)] / det,
                -sigma2d[(0, 1)] / det,
                -sigma2d[(1, 0)] / det,
                sigma2d[(0, 0)] / det,
            );
            // 3-sigma footprint from the largest eigenvalue.
            let mid = 0.5 * (sigma2d[(0, 0)] + sigma2d[(1, 1)]);
            let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
            let radius = 3.0 * lambda_max.sqrt();
            if mean2d.x + radius < 0.0
                || mean2d.x - radius > width - 1.0
                || mean2d.y + radius < 0.0
                || mean2d.y - radius > height - 1.0
            {
                return None;
            }

            let color_scalar = match mode {
                ChannelMode::Gray => {
                    LUMA_WEIGHTS[0] * p.color.x + LUMA_WEIGHTS[1] * p.color.y + LUMA_WEIGHTS[2] * p.color.z
                }
                ChannelMode::Rgb => 0.0,
            };
            Some(Splat {
                idx,
                depth: cam.z,
                mean2d,
                conic,
                opacity: sigmoid(p.opacity_param),
                color: p.color,
                color_scalar,
                radius,
            })
        })
        .collect()
}

fn perspective_jacobian(intr: &CameraIntrinsics, cam: &Vector3<f64>) -> Matrix2x3<f64> {
    let z_inv = 1.0 / cam.z;
    Matrix2x3::new(
        intr.fx * z_inv,
        0.0,
        -intr.fx * cam.x * z_inv * z_inv,
        0.0,
        intr.fy * z_inv,
        -intr.fy * cam.y * z_inv * z_inv,
    )
}

fn bin_splats(splats: &[Splat], width: usize, height: usize) -> (Vec<Vec<u32>>, usize, usize) {
    let tiles_x = width.div_ceil(TILE_SIZE);
    let tiles_y = height.div_ceil(TILE_SIZE);
    let mut lists: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (si, s) in splats.iter().enumerate() {
        let x0 = ((s.mean2d.x - s.radius).floor().max(0.0) as usize) / TILE_SIZE;
        let x1 = (((s.mean2d.x + s.radius).ceil() as usize).min(width - 1)) / TILE_SIZE;
        let y0 = ((s.mean2d.y - s.radius).floor().max(0.0) as usize) / TILE_SIZE;
        let y1 = (((s.mean2d.y + s.radius).ceil() as usize).min(height - 1)) / TILE_SIZE;
        for ty in y0..=y1 {
            for tx in x0..=x1 {
                lists[ty * tiles_x + tx].push(si as u32);
            }
        }
    }
    // Front-to-back order; equal depths tie-broken by primitive index.
    for list in &mut lists {
        list.sort_unstable_by(|&a, &b| {
            let (sa, sb) = (&splats[a as usize], &splats[b as usize]);
            sa.depth
                .partial_cmp(&sb.depth)
                .unwrap()
                .then(sa.idx.cmp(&sb.idx))
        });
    }
    (lists, tiles_x, tiles_y)
}

#[inline]
fn gaussian_falloff(conic: &Matrix2<f64>, d: &Vector2<f64>) -> f64 {
    let power = -0.5
        * (conic[(0, 0)] * d.x * d.x
            + (conic[(0, 1)] + conic[(1, 0)]) * d.x * d.y
            + conic[(1, 1)] * d.y * d.y);
    if power > 0.0 {
        // Numerical safety only; a valid conic cannot produce this.
        return 0.0;
    }
    power.exp()
}

/// Renders the canonical cloud deformed to normalized time `t`.
pub fn render(
    cloud: &GaussianCloud,
    field: &DeformationField,
    camera: &Camera,
    t: f64,
    options: &RenderOptions,
) -> (RenderOutput, RenderContext) {
    let positions: Vec<Vector3<f64>> = cloud.primitives.iter().map(|p| p.position).collect();
    let (offsets, _) = field.deform(StopGrad(&positions), t);
    let deformed = apply_offsets(cloud, &offsets);
    render_deformed(&deformed, camera, options)
}

/// Renders already-deformed primitives.
pub fn render_deformed(
    primitives: &[GaussianPrimitive],
    camera: &Camera,
    options: &RenderOptions,
) -> (RenderOutput, RenderContext) {
    let width = camera.intrinsics.width as usize;
    let height = camera.intrinsics.height as usize;
    let channels = options.mode.channels();
    let splats = prepare_splats(primitives, camera, options.mode);
    let (tile_lists, tiles_x, tiles_y) = bin_splats(&splats, width, height);

    struct TileOut {
        pixels: Vec<f64>,
        transmittance: Vec<f64>,
        max_blend: Vec<(u32, f64)>,
    }

    let tile_outputs: Vec<TileOut> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|tile| {
            let tx = tile % tiles_x;
            let ty = tile / tiles_x;
            let x0 = tx * TILE_SIZE;
            let y0 = ty * TILE_SIZE;
            let tw = (width - x0).min(TILE_SIZE);
            let th = (height - y0).min(TILE_SIZE);
            let list = &tile_lists[tile];
            let mut pixels = vec![0.0; tw * th * channels];
            let mut transmittance = vec![1.0; tw * th];
            let mut local_max: Vec<(u32, f64)> = vec![(0, 0.0); list.len()];
            for (k, &si) in list.iter().enumerate() {
                local_max[k].0 = si;
            }

            for py in 0..th {
                for px in 0..tw {
                    let pix = Vector2::new((x0 + px) as f64, (y0 + py) as f64);
                    let mut t_curr = 1.0f64;
                    let mut acc = [0.0f64; 3];
                    for (k, &si) in list.iter().enumerate() {
                        let s = &splats[si as usize];
                        let d = pix - s.mean2d;
                        let alpha = (s.opacity * gaussian_falloff(&s.conic, &d)).min(ALPHA_CLAMP);
                        if alpha < ALPHA_MIN {
                            continue;
                        }
                        let w = alpha * t_curr;
                        match options.mode {
                            ChannelMode::Gray => acc[0] += w * s.color_scalar,
                            ChannelMode::Rgb => {
                                acc[0] += w * s.color.x;
                                acc[1] += w * s.color.y;
                                acc[2] += w * s.color.z;
                            }
                        }
                        if w > local_max[k].1 {
                            local_max[k].1 = w;
                        }
                        t_curr *= 1.0 - alpha;
                        if t_curr < TRANSMITTANCE_CUTOFF {
                            break;
                        }
                    }
                    let pi = (py * tw + px) * channels;
                    match options.mode {
                        ChannelMode::Gray => {
                            pixels[pi] = acc[0] + t_curr * options.background.x;
                        }
                        ChannelMode::Rgb => {
                            pixels[pi] = acc[0] + t_curr * options.background.x;
                            pixels[pi + 1] = acc[1] + t_curr * options.background.y;
                            pixels[pi + 2] = acc[2] + t_curr * options.background.z;
                        }
                    }
                    transmittance[py * tw + px] = t_curr;
                }
            }
            TileOut {
                pixels,
                transmittance,
                max_blend: local_max,
            }
        })
        .collect();

    // Merge per-tile results in tile order.
    let mut image = Image::zeros(width, height, channels);
    let mut final_t = vec![1.0; width * height];
    let mut max_blend = vec![0.0f64; primitives.len()];
    for (tile, out) in tile_outputs.iter().enumerate() {
        let tx = tile % tiles_x;
        let ty = tile / tiles_x;
        let x0 = tx * TILE_SIZE;
        let y0 = ty * TILE_SIZE;
        let tw = (width - x0).min(TILE_SIZE);
        let th = (height - y0).min(TILE_SIZE);
        for py in 0..th {
            for px in 0..tw {
                let src = (py * tw + px) * channels;
                let dst = ((y0 + py) * width + (x0 + px)) * channels;
                image.data[dst..dst + channels].copy_from_slice(&out.pixels[src..src + channels]);
                final_t[(y0 + py) * width + (x0 + px)] = out.transmittance[py * tw + px];
            }
        }
        for &(si, w) in &out.max_blend {
            let g = splats[si as usize].idx;
            if w > max_blend[g] {
                max_blend[g] = w;
            }
        }
    }

    let output = RenderOutput {
        image: image.clone(),
        per_gaussian_max_blend_weight: max_blend,
        per_pixel_final_transmittance: final_t,
    };
    let context = RenderContext {
        primitives: primitives.to_vec(),
        camera: *camera,
        options: *options,
        splats,
        tile_lists,
        tiles_x,
        tiles_y,
        image,
    };
    (output, context)
}

/// Linear image -> log intensity with the stability floor.
pub fn log_intensity(linear: &Image) -> Image {
    linear.map(|v| v.max(LOG_FLOOR).ln())
}

/// Chain rule through log(max(I, floor)): zero gradient where the floor engages.
pub fn log_intensity_backward(linear: &Image, grad_log: &Image) -> Image {
    assert!(linear.same_shape(grad_log));
    let mut out = grad_log.clone();
    for (g, &v) in out.data.iter_mut().zip(&linear.data) {
        if v > LOG_FLOOR {
            *g /= v;
        } else {
            *g = 0.0;
        }
    }
    out
}

/// Per-(splat, tile) gradient contributions accumulated during the pixel loop.
#[derive(Clone, Copy)]
struct SplatGrad {
    d_color: Vector3<f64>,
    d_color_scalar: f64,
    d_opacity: f64,
    d_mean2d: Vector2<f64>,
    d_conic: Matrix2<f64>,
}

impl SplatGrad {
    fn zero() -> Self {
        Self {
            d_color: Vector3::zeros(),
            d_color_scalar: 0.0,
            d_opacity: 0.0,
            d_mean2d: Vector2::zeros(),
            d_conic: Matrix2::zeros(),
        }
    }
}

/// Analytic backward pass for a retained forward context.
pub fn backward(ctx: &RenderContext, grad_image: &Image) -> Result<RenderGradients> {
    let width = ctx.camera.intrinsics.width as usize;
    let height = ctx.camera.intrinsics.height as usize;
    let channels = ctx.options.mode.channels();
    if grad_image.width != width || grad_image.height != height || grad_image.channels != channels {
        return Err(E4dgsError::ContractViolation(format!(
            "grad_image shape {}x{}x{} does not match forward context {}x{}x{}",
            grad_image.width, grad_image.height, grad_image.channels, width, height, channels
        )));
    }

    let tile_grads: Vec<Vec<SplatGrad>> = (0..ctx.tiles_x * ctx.tiles_y)
        .into_par_iter()
        .map(|tile| {
            let tx = tile % ctx.tiles_x;
            let ty = tile / ctx.tiles_x;
            let x0 = tx * TILE_SIZE;
            let y0 = ty * TILE_SIZE;
            let tw = (width - x0).min(TILE_SIZE);
            let th = (height - y0).min(TILE_SIZE);
            let list = &ctx.tile_lists[tile];
            let mut grads = vec![SplatGrad::zero(); list.len()];

            for py in 0..th {
                for px in 0..tw {
                    let gx = x0 + px;
                    let gy = y0 + py;
                    let pix = Vector2::new(gx as f64, gy as f64);
                    let gi = (gy * width + gx) * channels;
                    let up: [f64; 3] = match ctx.options.mode {
                        ChannelMode::Gray => [grad_image.data[gi], 0.0, 0.0],
                        ChannelMode::Rgb => [
                            grad_image.data[gi],
                            grad_image.data[gi + 1],
                            grad_image.data[gi + 2],
                        ],
                    };
                    if up.iter().all(|&g| g == 0.0) {
                        continue;
                    }

                    // Re-walk the pixel front-to-back, tracking the prefix so
                    // the remaining (suffix) contribution is available for
                    // each alpha gradient.
                    let mut t_curr = 1.0f64;
                    let mut prefix = [0.0f64; 3];
                    let total = [
                        ctx.image.data[gi],
                        if channels > 1 { ctx.image.data[gi + 1] } else { 0.0 },
                        if channels > 2 { ctx.image.data[gi + 2] } else { 0.0 },
                    ];
                    for (k, &si) in list.iter().enumerate() {
                        let s = &ctx.splats[si as usize];
                        let d = pix - s.mean2d;
                        let falloff = gaussian_falloff(&s.conic, &d);
                        let alpha_raw = s.opacity * falloff;
                        let clamped = alpha_raw > ALPHA_CLAMP;
                        let alpha = alpha_raw.min(ALPHA_CLAMP);
                        if alpha < ALPHA_MIN {
                            continue;
                        }
                        let w = alpha * t_curr;

                        // Color gradient and dL/dalpha across channels.
                        let mut d_alpha = 0.0;
                        match ctx.options.mode {
                            ChannelMode::Gray => {
                                grads[k].d_color_scalar += up[0] * w;
                                prefix[0] += w * s.color_scalar;
                                let suffix = total[0] - prefix[0];
                                d_alpha +=
                                    up[0] * (t_curr * s.color_scalar - suffix / (1.0 - alpha));
                            }
                            ChannelMode::Rgb => {
                                let c = [s.color.x, s.color.y, s.color.z];
                                for ch in 0..3 {
                                    grads[k].d_color[ch] += up[ch] * w;
                                    prefix[ch] += w * c[ch];
                                    let suffix = total[ch] - prefix[ch];
                                    d_alpha += up[ch] * (t_curr * c[ch] - suffix / (1.0 - alpha));
                                }
                            }
                        }

                        if !clamped {
                            // alpha = opacity * falloff
                            grads[k].d_opacity += d_alpha * falloff;
                            let d_falloff = d_alpha * s.opacity;
                            // dfalloff/dmean2d = falloff * conic * d
                            let cd = s.conic * d;
                            grads[k].d_mean2d += d_falloff * falloff * cd;
                            // dfalloff/dconic = falloff * (-0.5 d d^T)
                            grads[k].d_conic += d_falloff * falloff * (-0.5) * (d * d.transpose());
                        }

                        t_curr *= 1.0 - alpha;
                        if t_curr < TRANSMITTANCE_CUTOFF {
                            break; // matches forward: later primitives get zero grads
                        }
                    }
                }
            }
            grads
        })
        .collect();

    // Merge tile contributions in tile order (deterministic).
    let n_splats = ctx.splats.len();
    let mut merged = vec![SplatGrad::zero(); n_splats];
    for (tile, grads) in tile_grads.iter().enumerate() {
        for (k, &si) in ctx.tile_lists[tile].iter().enumerate() {
            let g = &grads[k];
            let m = &mut merged[si as usize];
            m.d_color += g.d_color;
            m.d_color_scalar += g.d_color_scalar;
            m.d_opacity += g.d_opacity;
            m.d_mean2d += g.d_mean2d;
            m.d_conic += g.d_conic;
        }
    }

    // Per-splat geometric chain back to world-space parameters.
    let mut out = RenderGradients::zeros(ctx.primitives.len());
    let contribs: Vec<(usize, Vector3<f64>, Quaternion<f64>, Vector3<f64>, f64, Vector3<f64>, Vector2<f64>)> =
        ctx.splats
            .par_iter()
            .zip(merged.par_iter())
            .map(|(s, g)| splat_backward(ctx, s, g))
            .collect();
    for (idx, d_pos, d_rot, d_ls, d_op, d_col, d_m2d) in contribs {
        out.d_position[idx] = d_pos;
        out.d_rotation[idx] = d_rot;
        out.d_log_scale[idx] = d_ls;
        out.d_opacity_param[idx] = d_op;
        out.d_color[idx] = d_col;
        out.d_mean2d[idx] = d_m2d;
    }
    Ok(out)
}

#[allow(clippy::type_complexity)]
fn splat_backward(
    ctx: &RenderContext,
    s: &Splat,
    g: &SplatGrad,
) -> (usize, Vector3<f64>, Quaternion<f64>, Vector3<f64>, f64, Vector3<f64>, Vector2<f64>) {
    let p = &ctx.primitives[s.idx];
    let intr = &ctx.camera.intrinsics;
    let rot_wc = ctx.camera.pose.rotation_matrix();
    let cam = ctx.camera.pose.transform_point(&p.position);

    // Color: gray mode distributed through the luma weights.
    let d_color = match ctx.options.mode {
        ChannelMode::Gray => Vector3::new(
            g.d_color_scalar * LUMA_WEIGHTS[0],
            g.d_color_scalar * LUMA_WEIGHTS[1],
            g.d_color_scalar * LUMA_WEIGHTS[2],
        ),
        ChannelMode::Rgb => g.d_color,
    };

    // Opacity through the sigmoid.
    let d_opacity_param = g.d_opacity * s.opacity * (1.0 - s.opacity);

    // conic = sigma2d^{-1}: d_sigma2d = -conic * d_conic * conic.
    let d_sigma2d = -(s.conic * g.d_conic * s.conic);

    // Rebuild the forward covariance chain.
    let scale = p.log_scale.map(f64::exp);
    let q_norm = p.rotation.norm();
    let q_hat = p.rotation / q_norm;
    let rot = UnitQuaternion::new_unchecked(q_hat).to_rotation_matrix().into_inner();
    let sigma_world = rot * Matrix3::from_diagonal(&scale.component_mul(&scale)) * rot.transpose();
    let sigma_cam = rot_wc * sigma_world * rot_wc.transpose();
    let j = perspective_jacobian(intr, &cam);

    // sigma2d = J * sigma_cam * J^T + dilation
    let d_sigma_cam = j.transpose() * d_sigma2d * j;
    let d_j = (d_sigma2d + d_sigma2d.transpose()) * j * sigma_cam;

    // J entries depend on the camera-frame point.
    let z_inv = 1.0 / cam.z;
    let z_inv2 = z_inv * z_inv;
    let mut d_cam = Vector3::zeros();
    d_cam.x += d_j[(0, 2)] * (-intr.fx * z_inv2);
    d_cam.y += d_j[(1, 2)] * (-intr.fy * z_inv2);
    d_cam.z += d_j[(0, 0)] * (-intr.fx * z_inv2)
        + d_j[(1, 1)] * (-intr.fy * z_inv2)
        + d_j[(0, 2)] * (2.0 * intr.fx * cam.x * z_inv2 * z_inv)
        + d_j[(1, 2)] * (2.0 * intr.fy * cam.y * z_inv2 * z_inv);

    // Projection of the mean.
    d_cam.x += g.d_mean2d.x * intr.fx * z_inv;
    d_cam.y += g.d_mean2d.y * intr.fy * z_inv;
    d_cam.z += -g.d_mean2d.x * intr.fx * cam.x * z_inv2 - g.d_mean2d.y * intr.fy * cam.y * z_inv2;

    let d_position = rot_wc.transpose() * d_cam;

    // sigma_cam = R_wc * sigma_world * R_wc^T
    let d_sigma_world = rot_wc.transpose() * d_sigma_cam * rot_wc;

    // sigma_world = R * D * R^T with D = diag(exp(2 * log_scale)).
    let d_mat = Matrix3::from_diagonal(&scale.component_mul(&scale));
    let d_rot_mat = (d_sigma_world + d_sigma_world.transpose()) * rot * d_mat;
    let d_d = rot.transpose() * d_sigma_world * rot;
    let d_log_scale = Vector3::new(
        d_d[(0, 0)] * 2.0 * scale.x * scale.x,
        d_d[(1, 1)] * 2.0 * scale.y * scale.y,
        d_d[(2, 2)] * 2.0 * scale.z * scale.z,
    );

    // Rotation matrix w.r.t. the normalized quaternion (w, x, y, z).
    let (w, x, y, z) = (q_hat.w, q_hat.i, q_hat.j, q_hat.k);
    let dr_dw = 2.0 * Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0);
    let dr_dx = 2.0 * Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x);
    let dr_dy = 2.0 * Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y);
    let dr_dz = 2.0 * Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0);
    let d_q_hat = nalgebra::Vector4::new(
        d_rot_mat.component_mul(&dr_dw).sum(),
        d_rot_mat.component_mul(&dr_dx).sum(),
        d_rot_mat.component_mul(&dr_dy).sum(),
        d_rot_mat.component_mul(&dr_dz).sum(),
    );
    // Through normalization: d_raw = (I - q_hat q_hat^T) / |q| * d_q_hat.
    let q_hat_vec = nalgebra::Vector4::new(q_hat.w, q_hat.i, q_hat.j, q_hat.k);
    let d_raw = (d_q_hat - q_hat_vec * q_hat_vec.dot(&d_q_hat)) / q_norm;
    let d_rotation = Quaternion::new(d_raw.x, d_raw.y, d_raw.z, d_raw.w);

    (
        s.idx,
        d_position,
        d_rotation,
        d_log_scale,
        d_opacity_param,
        d_color,
        g.d_mean2d,
    )
}
