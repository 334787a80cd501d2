//! Canonical Gaussian cloud, covariance construction, the deformation MLP
//! with positional encodings, and event-specific initialization.

use crate::error::{E4dgsError, Result};
use crate::math::logit;
use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

/// One canonical 3D Gaussian. The rotation quaternion is stored raw and
/// normalized wherever a covariance is built; scale lives in log space so it
/// stays positive; opacity goes through a sigmoid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPrimitive {
    pub position: Vector3<f64>,
    pub rotation: Quaternion<f64>,
    pub log_scale: Vector3<f64>,
    pub opacity_param: f64,
    pub color: Vector3<f64>,
}

/// Canonical cloud plus per-primitive bookkeeping for densification
/// (accumulated screen-space position-gradient magnitude) and pruning
/// (max blend weight seen).
#[derive(Debug, Clone, Default)]
pub struct GaussianCloud {
    pub primitives: Vec<GaussianPrimitive>,
    pub grad_accum: Vec<f64>,
    pub grad_count: Vec<u32>,
    pub max_blend_weight: Vec<f64>,
}

impl GaussianCloud {
    pub fn from_primitives(primitives: Vec<GaussianPrimitive>) -> Self {
        let n = primitives.len();
        Self {
            primitives,
            grad_accum: vec![0.0; n],
            grad_count: vec![0; n],
            max_blend_weight: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn reset_bookkeeping(&mut self) {
        self.grad_accum.iter_mut().for_each(|v| *v = 0.0);
        self.grad_count.iter_mut().for_each(|v| *v = 0);
        self.max_blend_weight.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Keeps primitives where `keep[i]` is true, bookkeeping included.
    pub fn retain(&mut self, keep: &[bool]) {
        assert_eq!(keep.len(), self.len());
        let mut i = 0;
        self.primitives.retain(|_| {
            let k = keep[i];
            i += 1;
            k
        });
        let filter = |v: &mut Vec<f64>| {
            let mut i = 0;
            v.retain(|_| {
                let k = keep[i];
                i += 1;
                k
            });
        };
        filter(&mut self.grad_accum);
        filter(&mut self.max_blend_weight);
        let mut i = 0;
        self.grad_count.retain(|_| {
            let k = keep[i];
            i += 1;
            k
        });
    }

    pub fn push(&mut self, p: GaussianPrimitive) {
        self.primitives.push(p);
        self.grad_accum.push(0.0);
        self.grad_count.push(0);
        self.max_blend_weight.push(0.0);
    }
}

/// Σ = R · diag(s) · diag(s) · Rᵀ for the (normalized) quaternion r.
pub fn build_covariance(r: &Quaternion<f64>, s: &Vector3<f64>) -> Matrix3<f64> {
    let rot = UnitQuaternion::from_quaternion(*r)
        .to_rotation_matrix()
        .into_inner();
    let d = Matrix3::from_diagonal(&s.component_mul(s));
    rot * d * rot.transpose()
}

// ---------------------------------------------------------------------------
// Positional encoding and deformation field
// ---------------------------------------------------------------------------

/// γ(v) = (v, sin(2^k π v), cos(2^k π v)) for k = 0..L-1, per input dimension.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionalEncoding {
    pub num_frequencies: usize,
}

impl PositionalEncoding {
    pub fn output_dim(&self, input_dim: usize) -> usize {
        input_dim * (2 * self.num_frequencies + 1)
    }

    pub fn encode_into(&self, values: &[f64], out: &mut Vec<f64>) {
        for &v in values {
            out.push(v);
            for k in 0..self.num_frequencies {
                let arg = (1u64 << k) as f64 * std::f64::consts::PI * v;
                out.push(arg.sin());
                out.push(arg.cos());
            }
        }
    }
}

/// Marks the deformation network's position input as a stop-gradient path:
/// the field's backward pass never produces gradients for these values, so
/// no loss gradient reaches μ through the network input.
pub struct StopGrad<'a>(pub &'a [Vector3<f64>]);

/// Per-primitive offsets produced by the deformation MLP.
#[derive(Debug, Clone)]
pub struct DeformOffsets {
    pub dx: Vec<Vector3<f64>>,
    pub dr: Vec<Quaternion<f64>>,
    pub ds: Vec<Vector3<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    /// [out, in]
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Fully connected network mapping concat(γ(sg(x)), γ(t)) to
/// (Δx, Δr, Δs) ∈ R^10. The final layer is zero-initialized so all offsets
/// start at exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    pub pos_encoding: PositionalEncoding,
    pub time_encoding: PositionalEncoding,
    pub layers: Vec<LinearLayer>,
}

/// Intermediate activations kept for the weight-gradient backward pass.
pub struct DeformForwardCache {
    /// Encoded input batch [n, in_dim] and post-ReLU activations per hidden layer.
    activations: Vec<Array2<f64>>,
    /// Pre-activation values per hidden layer (for the ReLU mask).
    pre_activations: Vec<Array2<f64>>,
}

/// Gradients w.r.t. the field weights, same shapes as the layers.
#[derive(Debug, Clone)]
pub struct FieldGradients {
    pub layers: Vec<LinearLayer>,
}

impl FieldGradients {
    pub fn zeros_like(field: &DeformationField) -> Self {
        Self {
            layers: field
                .layers
                .iter()
                .map(|l| LinearLayer {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn add(&mut self, other: &FieldGradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }
}

pub const DEFORM_OUTPUT_DIM: usize = 10;

impl DeformationField {
    /// `depth` hidden layers of width `width`, ReLU activations, linear head.
    pub fn new(depth: usize, width: usize, l_pos: usize, l_time: usize, rng: &mut impl Rng) -> Self {
        let pos_encoding = PositionalEncoding {
            num_frequencies: l_pos,
        };
        let time_encoding = PositionalEncoding {
            num_frequencies: l_time,
        };
        let in_dim = pos_encoding.output_dim(3) + time_encoding.output_dim(1);
        let mut layers = Vec::with_capacity(depth + 1);
        let mut prev = in_dim;
        for _ in 0..depth {
            layers.push(LinearLayer::kaiming(prev, width, rng));
            prev = width;
        }
        layers.push(LinearLayer {
            weight: Array2::zeros((DEFORM_OUTPUT_DIM, prev)),
            bias: Array1::zeros(DEFORM_OUTPUT_DIM),
        });
        Self {
            pos_encoding,
            time_encoding,
            layers,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.pos_encoding.output_dim(3) + self.time_encoding.output_dim(1)
    }

    fn encode_batch(&self, positions: &[Vector3<f64>], t: f64) -> Array2<f64> {
        let in_dim = self.input_dim();
        let mut data = Vec::with_capacity(positions.len() * in_dim);
        let mut time_enc = Vec::with_capacity(self.time_encoding.output_dim(1));
        self.time_encoding.encode_into(&[t], &mut time_enc);
        for p in positions {
            self.pos_encoding.encode_into(&[p.x, p.y, p.z], &mut data);
            data.extend_from_slice(&time_enc);
        }
        Array2::from_shape_vec((positions.len(), in_dim), data).expect("encoded batch shape")
    }

    /// Evaluates the field at normalized time `t` for every position.
    /// Positions carry the stop-gradient marker: backward never differentiates
    /// through the encoded input.
    pub fn deform(&self, positions: StopGrad<'_>, t: f64) -> (DeformOffsets, DeformForwardCache) {
        let n = positions.0.len();
        let mut activations = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len() - 1);
        let mut h = self.encode_batch(positions.0, t);
        for (li, layer) in self.layers.iter().enumerate() {
            activations.push(h.clone());
            let mut z = h.dot(&layer.weight.t());
            z += &layer.bias;
            if li + 1 < self.layers.len() {
                pre_activations.push(z.clone());
                z.mapv_inplace(|v| v.max(0.0));
            }
            h = z;
        }

        let mut dx = Vec::with_capacity(n);
        let mut dr = Vec::with_capacity(n);
        let mut ds = Vec::with_capacity(n);
        for row in h.rows() {
            dx.push(Vector3::new(row[0], row[1], row[2]));
            dr.push(Quaternion::new(row[3], row[4], row[5], row[6]));
            ds.push(Vector3::new(row[7], row[8], row[9]));
        }
        (
            DeformOffsets { dx, dr, ds },
            DeformForwardCache {
                activations,
                pre_activations,
            },
        )
    }

    /// Backpropagates per-primitive offset gradients to the field weights.
    pub fn backward(
        &self,
        cache: &DeformForwardCache,
        d_dx: &[Vector3<f64>],
        d_dr: &[Quaternion<f64>],
        d_ds: &[Vector3<f64>],
    ) -> FieldGradients {
        let n = d_dx.len();
        let mut d_out = Array2::zeros((n, DEFORM_OUTPUT_DIM));
        for i in 0..n {
            d_out[[i, 0]] = d_dx[i].x;
            d_out[[i, 1]] = d_dx[i].y;
            d_out[[i, 2]] = d_dx[i].z;
            d_out[[i, 3]] = d_dr[i].w;
            d_out[[i, 4]] = d_dr[i].i;
            d_out[[i, 5]] = d_dr[i].j;
            d_out[[i, 6]] = d_dr[i].k;
            d_out[[i, 7]] = d_ds[i].x;
            d_out[[i, 8]] = d_ds[i].y;
            d_out[[i, 9]] = d_ds[i].z;
        }

        let mut grads = FieldGradients::zeros_like(self);
        let mut delta = d_out;
        for li in (0..self.layers.len()).rev() {
            let a = &cache.activations[li];
            grads.layers[li].weight = delta.t().dot(a);
            grads.layers[li].bias = delta.sum_axis(Axis(0));
            if li > 0 {
                let mut d_prev = delta.dot(&self.layers[li].weight);
                // ReLU mask of the previous layer's pre-activation.
                d_prev.zip_mut_with(&cache.pre_activations[li - 1], |g, &z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
                delta = d_prev;
            }
        }
        grads
    }
}

impl LinearLayer {
    fn kaiming(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / in_dim as f64).sqrt();
        let weight = Array2::from_shape_fn((out_dim, in_dim), |_| rng.gen_range(-bound..bound));
        Self {
            weight,
            bias: Array1::zeros(out_dim),
        }
    }
}

/// Deformed per-primitive parameters: x+Δx, r+Δr (raw), log-scale + Δs
/// (the multiplicative s·exp(Δs) rule in log space).
pub fn apply_offsets(cloud: &GaussianCloud, offsets: &DeformOffsets) -> Vec<GaussianPrimitive> {
    cloud
        .primitives
        .iter()
        .enumerate()
        .map(|(i, p)| GaussianPrimitive {
            position: p.position + offsets.dx[i],
            rotation: p.rotation + offsets.dr[i],
            log_scale: p.log_scale + offsets.ds[i],
            opacity_param: p.opacity_param,
            color: p.color,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

const INIT_OPACITY: f64 = 0.1;

/// Uniform cube initialization for object scenes.
pub fn init_object_cube(n: usize, half_extent: f64, rng: &mut impl Rng) -> Result<GaussianCloud> {
    if n == 0 {
        return Err(E4dgsError::InvalidArgument("n must be positive".into()));
    }
    let positions: Vec<Vector3<f64>> = (0..n)
        .map(|_| {
            Vector3::new(
                rng.gen_range(-half_extent..=half_extent),
                rng.gen_range(-half_extent..=half_extent),
                rng.gen_range(-half_extent..=half_extent),
            )
        })
        .collect();
    Ok(cloud_from_positions(positions, rng))
}

/// Dense-to-sparse radiative sphere: uniform direction, radius radius·u with
/// u ~ U(0,1), giving number density proportional to 1/rho².
pub fn init_radiative_sphere(n: usize, radius: f64, rng: &mut impl Rng) -> Result<GaussianCloud> {
    if n == 0 || radius <= 0.0 {
        return Err(E4dgsError::InvalidArgument(format!(
            "need n > 0 and radius > 0, got n={n}, radius={radius}"
        )));
    }
    let positions: Vec<Vector3<f64>> = (0..n)
        .map(|_| {
            // Marsaglia-free uniform direction via normal deviates.
            let dir = loop {
                let v = Vector3::new(
                    rng.gen_range(-1.0..1.0f64),
                    rng.gen_range(-1.0..1.0f64),
                    rng.gen_range(-1.0..1.0f64),
                );
                let norm = v.norm();
                if norm > 1e-6 && norm <= 1.0 {
                    break v / norm;
                }
            };
            dir * (radius * rng.gen::<f64>())
        })
        .collect();
    Ok(cloud_from_positions(positions, rng))
}

fn cloud_from_positions(positions: Vec<Vector3<f64>>, rng: &mut impl Rng) -> GaussianCloud {
    let spacing = knn_mean_spacing(&positions, 3);
    let primitives = positions
        .into_iter()
        .enumerate()
        .map(|(i, position)| GaussianPrimitive {
            position,
            rotation: Quaternion::new(1.0, 0.0, 0.0, 0.0),
            log_scale: Vector3::repeat(spacing[i].max(1e-6).ln()),
            opacity_param: logit(INIT_OPACITY),
            color: Vector3::new(rng.gen(), rng.gen(), rng.gen()),
        })
        .collect();
    GaussianCloud::from_primitives(primitives)
}

/// Mean distance to the k nearest neighbors per point, via a uniform grid.
fn knn_mean_spacing(points: &[Vector3<f64>], k: usize) -> Vec<f64> {
    let n = points.len();
    if n <= k {
        // Too few points for a meaningful estimate; fall back to pairwise.
        return points
            .iter()
            .map(|p| {
                let mut ds: Vec<f64> = points
                    .iter()
                    .filter(|q| !std::ptr::eq(*q, p))
                    .map(|q| (q - p).norm())
                    .collect();
                ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
                if ds.is_empty() {
                    1.0
                } else {
                    ds.iter().take(k).sum::<f64>() / ds.len().min(k) as f64
                }
            })
            .collect();
    }

    let min = points.iter().fold(Vector3::repeat(f64::INFINITY), |a, p| a.inf(p));
    let max = points
        .iter()
        .fold(Vector3::repeat(f64::NEG_INFINITY), |a, p| a.sup(p));
    let extent = (max - min).max().max(1e-9);
    let cell = (extent.powi(3) / n as f64).cbrt().max(extent * 1e-4);
    let key = |p: &Vector3<f64>| {
        (
            ((p.x - min.x) / cell) as i64,
            ((p.y - min.y) / cell) as i64,
            ((p.z - min.z) / cell) as i64,
        )
    };
    let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        grid.entry(key(p)).or_default().push(i);
    }

    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (cx, cy, cz) = key(p);
            let mut best: Vec<f64> = Vec::new();
            let mut ring = 1i64;
            loop {
                best.clear();
                for dx in -ring..=ring {
                    for dy in -ring..=ring {
                        for dz in -ring..=ring {
                            if let Some(ids) = grid.get(&(cx + dx, cy + dy, cz + dz)) {
                                for &j in ids {
                                    if j != i {
                                        best.push((points[j] - p).norm());
                                    }
                                }
                            }
                        }
                    }
                }
                if best.len() >= k || ring as f64 * cell > extent {
                    break;
                }
                ring *= 2;
            }
            if best.is_empty() {
                return cell;
            }
            best.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let take = best.len().min(k);
            best[..take].iter().sum::<f64>() / take as f64
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Checkpoint format "E4DGS-CKPT-v1"
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub iteration: u64,
    pub rng_seed: u64,
    /// Raw parameter of the learnable threshold (softplus gives Ĉ).
    pub theta_c: f64,
    pub cloud: GaussianCloud,
    pub field: DeformationField,
}

const CKPT_MAGIC: &[u8] = b"E4DGS-CKPT-v1\n";

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&ckpt.iteration.to_le_bytes());
    buf.extend_from_slice(&ckpt.rng_seed.to_le_bytes());
    buf.extend_from_slice(&ckpt.theta_c.to_le_bytes());
    buf.extend_from_slice(&(ckpt.cloud.len() as u64).to_le_bytes());
    for p in &ckpt.cloud.primitives {
        for v in [
            p.position.x,
            p.position.y,
            p.position.z,
            p.rotation.w,
            p.rotation.i,
            p.rotation.j,
            p.rotation.k,
            p.log_scale.x,
            p.log_scale.y,
            p.log_scale.z,
            p.opacity_param,
            p.color.x,
            p.color.y,
            p.color.z,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf.extend_from_slice(&(ckpt.field.pos_encoding.num_frequencies as u64).to_le_bytes());
    buf.extend_from_slice(&(ckpt.field.time_encoding.num_frequencies as u64).to_le_bytes());
    buf.extend_from_slice(&(ckpt.field.layers.len() as u64).to_le_bytes());
    for layer in &ckpt.field.layers {
        let (rows, cols) = layer.weight.dim();
        buf.extend_from_slice(&(rows as u64).to_le_bytes());
        buf.extend_from_slice(&(cols as u64).to_le_bytes());
        for v in layer.weight.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in layer.bias.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    // Atomic write: temp file then rename.
    let tmp = path.with_extension("tmp");
    std::fs::File::create(&tmp)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| E4dgsError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| E4dgsError::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| E4dgsError::io(path, e))?;
    if bytes.len() < CKPT_MAGIC.len() || &bytes[..CKPT_MAGIC.len()] != CKPT_MAGIC {
        return Err(E4dgsError::parse(path, "bad checkpoint magic"));
    }
    let mut pos = CKPT_MAGIC.len();
    let mut take_u64 = |bytes: &[u8]| -> Result<u64> {
        if pos + 8 > bytes.len() {
            return Err(E4dgsError::parse(path, format!("truncated at offset {pos}")));
        }
        let v = u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap());
        pos += 8;
        Ok(v)
    };
    let iteration = take_u64(&bytes)?;
    let rng_seed = take_u64(&bytes)?;
    let theta_c = f64::from_bits(take_u64(&bytes)?);
    let n = take_u64(&bytes)? as usize;
    let mut primitives = Vec::with_capacity(n);
    for _ in 0..n {
        let mut vals = [0.0f64; 14];
        for v in &mut vals {
            *v = f64::from_bits(take_u64(&bytes)?);
        }
        primitives.push(GaussianPrimitive {
            position: Vector3::new(vals[0], vals[1], vals[2]),
            rotation: Quaternion::new(vals[3], vals[4], vals[5], vals[6]),
            log_scale: Vector3::new(vals[7], vals[8], vals[9]),
            opacity_param: vals[10],
            color: Vector3::new(vals[11], vals[12], vals[13]),
        });
    }
    let l_pos = take_u64(&bytes)? as usize;
    let l_time = take_u64(&bytes)? as usize;
    let n_layers = take_u64(&bytes)? as usize;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let rows = take_u64(&bytes)? as usize;
        let cols = take_u64(&bytes)? as usize;
        let mut w = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            w.push(f64::from_bits(take_u64(&bytes)?));
        }
        let mut b = Vec::with_capacity(rows);
        for _ in 0..rows {
            b.push(f64::from_bits(take_u64(&bytes)?));
        }
        layers.push(LinearLayer {
            weight: Array2::from_shape_vec((rows, cols), w)
                .map_err(|e| E4dgsError::parse(path, e.to_string()))?,
            bias: Array1::from_vec(b),
        });
    }
    Ok(Checkpoint {
        iteration,
        rng_seed,
        theta_c,
        cloud: GaussianCloud::from_primitives(primitives),
        field: DeformationField {
            pos_encoding: PositionalEncoding {
                num_frequencies: l_pos,
            },
            time_encoding: PositionalEncoding {
                num_frequencies: l_time,
            },
            layers,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn covariance_identity_cases() {
        let q = Quaternion::new(1.0, 0.0, 0.0, 0.0);
        let sigma = build_covariance(&q, &Vector3::new(1.0, 1.0, 1.0));
        assert_abs_diff_eq!(sigma, Matrix3::identity(), epsilon = 1e-14);
        let sigma = build_covariance(&q, &Vector3::new(2.0, 1.0, 1.0));
        assert_abs_diff_eq!(
            sigma,
            Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)),
            epsilon = 1e-14
        );
    }

    #[test]
    fn covariance_eigenvalues_are_squared_scales() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..1000 {
            let q = Quaternion::new(
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
            );
            if q.norm() < 1e-3 {
                continue;
            }
            let s = Vector3::new(1.0, 2.0, 3.0);
            let sigma = build_covariance(&q, &s);
            // Symmetric to machine precision.
            assert_abs_diff_eq!(sigma, sigma.transpose(), epsilon = 1e-12);
            let mut eig: Vec<f64> = sigma.symmetric_eigenvalues().iter().copied().collect();
            eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_abs_diff_eq!(eig[0], 1.0, epsilon = 1e-9);
            assert_abs_diff_eq!(eig[1], 4.0, epsilon = 1e-9);
            assert_abs_diff_eq!(eig[2], 9.0, epsilon = 1e-9);
            assert!(eig.iter().all(|&e| e >= 0.0));
        }
    }

    #[test]
    fn encoding_dimension_formula() {
        for input_dim in [1usize, 2, 3, 5] {
            for l in [0usize, 1, 4, 6, 10] {
                let enc = PositionalEncoding { num_frequencies: l };
                let mut out = Vec::new();
                enc.encode_into(&vec![0.3; input_dim], &mut out);
                assert_eq!(out.len(), enc.output_dim(input_dim));
                assert_eq!(out.len(), input_dim * (2 * l + 1));
            }
        }
    }

    #[test]
    fn fresh_field_outputs_zero_offsets() {
        let mut rng = StdRng::seed_from_u64(0);
        let field = DeformationField::new(4, 64, 10, 6, &mut rng);
        let positions = vec![
            Vector3::new(0.3, -0.2, 1.0),
            Vector3::new(-5.0, 2.0, 0.01),
        ];
        let (off, _) = field.deform(StopGrad(&positions), 0.37);
        for i in 0..2 {
            assert_eq!(off.dx[i], Vector3::zeros());
            assert_eq!(off.dr[i], Quaternion::new(0.0, 0.0, 0.0, 0.0));
            assert_eq!(off.ds[i], Vector3::zeros());
        }
    }

    #[test]
    fn perturbed_input_matches_direct_forward() {
        let mut rng = StdRng::seed_from_u64(3);
        let mut field = DeformationField::new(2, 16, 4, 2, &mut rng);
        // Non-zero head so outputs vary.
        let last = field.layers.len() - 1;
        field.layers[last].weight.mapv_inplace(|_| rng.gen_range(-0.1..0.1));
        let p = Vector3::new(0.2, 0.4, -0.3);
        let delta = Vector3::new(0.05, -0.02, 0.01);
        let (a, _) = field.deform(StopGrad(&[p + delta]), 0.5);
        let (b, _) = field.deform(StopGrad(&[p + delta]), 0.5);
        assert_eq!(a.dx[0], b.dx[0]);
        let (c, _) = field.deform(StopGrad(&[p]), 0.5);
        assert_ne!(a.dx[0], c.dx[0]);
    }

    #[test]
    fn field_weight_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(17);
        let mut field = DeformationField::new(2, 8, 2, 2, &mut rng);
        let last = field.layers.len() - 1;
        field.layers[last].weight.mapv_inplace(|_| rng.gen_range(-0.3..0.3));
        field.layers[last].bias.mapv_inplace(|_| rng.gen_range(-0.1..0.1));

        let positions = vec![Vector3::new(0.2, -0.1, 0.4), Vector3::new(-0.3, 0.5, 0.1)];
        let t = 0.63;

        // Scalar loss: weighted sum of all outputs with fixed weights.
        let weights: Vec<f64> = (0..positions.len() * DEFORM_OUTPUT_DIM)
            .map(|i| ((i * 37 + 11) % 13) as f64 / 13.0 - 0.4)
            .collect();
        let loss_of = |f: &DeformationField| -> f64 {
            let (off, _) = f.deform(StopGrad(&positions), t);
            let mut s = 0.0;
            for i in 0..positions.len() {
                let o = [
                    off.dx[i].x, off.dx[i].y, off.dx[i].z, off.dr[i].w, off.dr[i].i,
                    off.dr[i].j, off.dr[i].k, off.ds[i].x, off.ds[i].y, off.ds[i].z,
                ];
                for (j, v) in o.iter().enumerate() {
                    s += weights[i * DEFORM_OUTPUT_DIM + j] * v;
                }
            }
            s
        };

        let (_, cache) = field.deform(StopGrad(&positions), t);
        let d_dx: Vec<Vector3<f64>> = (0..positions.len())
            .map(|i| {
                Vector3::new(
                    weights[i * DEFORM_OUTPUT_DIM],
                    weights[i * DEFORM_OUTPUT_DIM + 1],
                    weights[i * DEFORM_OUTPUT_DIM + 2],
                )
            })
            .collect();
        let d_dr: Vec<Quaternion<f64>> = (0..positions.len())
            .map(|i| {
                Quaternion::new(
                    weights[i * DEFORM_OUTPUT_DIM + 3],
                    weights[i * DEFORM_OUTPUT_DIM + 4],
                    weights[i * DEFORM_OUTPUT_DIM + 5],
                    weights[i * DEFORM_OUTPUT_DIM + 6],
                )
            })
            .collect();
        let d_ds: Vec<Vector3<f64>> = (0..positions.len())
            .map(|i| {
                Vector3::new(
                    weights[i * DEFORM_OUTPUT_DIM + 7],
                    weights[i * DEFORM_OUTPUT_DIM + 8],
                    weights[i * DEFORM_OUTPUT_DIM + 9],
                )
            })
            .collect();
        let grads = field.backward(&cache, &d_dx, &d_dr, &d_ds);

        let h = 1e-5;
        let mut checked = 0;
        for li in 0..field.layers.len() {
            let (rows, cols) = field.layers[li].weight.dim();
            for r in (0..rows).step_by(3) {
                for c in (0..cols).step_by(5) {
                    let mut fp = field.clone();
                    fp.layers[li].weight[[r, c]] += h;
                    let mut fm = field.clone();
                    fm.layers[li].weight[[r, c]] -= h;
                    let fd = (loss_of(&fp) - loss_of(&fm)) / (2.0 * h);
                    let an = grads.layers[li].weight[[r, c]];
                    let denom = fd.abs().max(an.abs()).max(1e-8);
                    assert!(
                        (fd - an).abs() / denom <= 1e-3,
                        "layer {li} w[{r},{c}]: fd={fd}, analytic={an}"
                    );
                    checked += 1;
                }
            }
        }
        assert!(checked > 20);
    }

    #[test]
    fn cube_init_bounds_and_statistics() {
        let mut rng = StdRng::seed_from_u64(1);
        let cloud = init_object_cube(8, 1.0, &mut rng).unwrap();
        assert_eq!(cloud.len(), 8);
        for p in &cloud.primitives {
            assert!(p.position.amax() <= 1.0);
        }

        let cloud = init_object_cube(100_000, 1.0, &mut rng).unwrap();
        // Mean of U(-1,1) has sd 1/sqrt(3n) per axis; 3 sigma bound.
        let mean = cloud
            .primitives
            .iter()
            .fold(Vector3::zeros(), |a, p| a + p.position)
            / cloud.len() as f64;
        let bound = 3.0 / (3.0f64 * 100_000.0).sqrt();
        assert!(mean.amax() < bound, "mean={mean:?}, bound={bound}");
        // Initial opacity round-trips through the sigmoid.
        assert_abs_diff_eq!(
            crate::math::sigmoid(cloud.primitives[0].opacity_param),
            0.1,
            epsilon = 1e-12
        );
    }

    #[test]
    fn sphere_init_radius_law() {
        let mut rng = StdRng::seed_from_u64(2);
        let n = 100_000;
        let radius = 10.0;
        let cloud = init_radiative_sphere(n, radius, &mut rng).unwrap();
        let mut rho: Vec<f64> = cloud.primitives.iter().map(|p| p.position.norm()).collect();
        assert!(rho.iter().all(|&r| r <= radius + 1e-12));
        // Empirical CDF of rho must be linear in rho: KS statistic < 0.01.
        rho.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let ks = rho
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                let emp = (i + 1) as f64 / n as f64;
                (emp - r / radius).abs()
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.01, "ks={ks}");
    }

    #[test]
    fn init_rejects_degenerate_arguments() {
        let mut rng = StdRng::seed_from_u64(0);
        assert!(init_object_cube(0, 1.0, &mut rng).is_err());
        assert!(init_radiative_sphere(0, 1.0, &mut rng).is_err());
        assert!(init_radiative_sphere(10, 0.0, &mut rng).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = StdRng::seed_from_u64(21);
        let cloud = init_object_cube(50, 1.3, &mut rng).unwrap();
        let field = DeformationField::new(3, 16, 10, 6, &mut rng);
        let ckpt = Checkpoint {
            iteration: 1234,
            rng_seed: 99,
            theta_c: -1.7,
            cloud,
            field,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        write_checkpoint(&path, &ckpt).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back.iteration, 1234);
        assert_eq!(back.rng_seed, 99);
        assert_eq!(back.theta_c.to_bits(), ckpt.theta_c.to_bits());
        assert_eq!(back.cloud.primitives, ckpt.cloud.primitives);
        assert_eq!(back.field, ckpt.field);
    }
}
