//! Quantitative evaluation: cycle-reprojection error maps between views,
//! depth fusion to point clouds, and Chamfer distance.

use nalgebra::Vector3;
use thiserror::Error;

use crate::geom::Camera;
use crate::img::{ImageF, Mask};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("chamfer distance requires non-empty point clouds")]
    EmptyCloud,
}

/// Per-pixel cycle reprojection errors between a reference view and a
/// neighbor, with statistics over the jointly valid pixels.
#[derive(Debug, Clone)]
pub struct ConsistencyReport {
    pub error: ImageF,
    pub valid: Mask,
    pub valid_fraction: f64,
    pub mean_error: f64,
    pub median_error: f64,
}

/// For each valid reference pixel: back-project via its depth, project into
/// the neighbor, bilinearly sample the neighbor depth, back-project that, and
/// reproject into the reference. The error is the pixel distance to the
/// starting pixel. Depths are ray parameters (distance along the unit ray).
pub fn cycle_reprojection_map(
    depth_r: &ImageF,
    mask_r: &Mask,
    cam_r: &Camera,
    depth_n: &ImageF,
    mask_n: &Mask,
    cam_n: &Camera,
) -> ConsistencyReport {
    let width = cam_r.width;
    let height = cam_r.height;
    let mut error = ImageF::zeros(width, height);
    let mut valid = Mask::filled(width, height, false);
    let mut errors = Vec::new();
    for y in 0..height {
        for x in 0..width {
            if !mask_r.at(x, y) {
                continue;
            }
            let u0 = x as f64 + 0.5;
            let v0 = y as f64 + 0.5;
            let ray_r = cam_r.ray_at(u0, v0);
            let point = ray_r.point_at(depth_r.at(x, y));
            let Some((un, vn, _)) = cam_n.project(&point) else {
                continue;
            };
            if !cam_n.contains(un, vn) {
                continue;
            }
            // Reject samples whose 2x2 bilinear footprint touches a masked
            // neighbor pixel.
            if !bilinear_footprint_valid(mask_n, un, vn) {
                continue;
            }
            let Some(dn) = depth_n.sample_bilinear(un, vn) else {
                continue;
            };
            let ray_n = cam_n.ray_at(un, vn);
            let point_back = ray_n.point_at(dn);
            let Some((ur, vr, _)) = cam_r.project(&point_back) else {
                continue;
            };
            let e = ((ur - u0).powi(2) + (vr - v0).powi(2)).sqrt();
            error.set(x, y, e);
            valid.set(x, y, true);
            errors.push(e);
        }
    }
    errors.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let count = errors.len();
    let mean_error = if count == 0 {
        0.0
    } else {
        errors.iter().sum::<f64>() / count as f64
    };
    let median_error = if count == 0 { 0.0 } else { errors[count / 2] };
    ConsistencyReport {
        error,
        valid,
        valid_fraction: count as f64 / (width * height) as f64,
        mean_error,
        median_error,
    }
}

fn bilinear_footprint_valid(mask: &Mask, u: f64, v: f64) -> bool {
    let x = (u - 0.5).clamp(0.0, (mask.width - 1) as f64);
    let y = (v - 0.5).clamp(0.0, (mask.height - 1) as f64);
    let x0 = (x.floor() as usize).min(mask.width.saturating_sub(2));
    let y0 = (y.floor() as usize).min(mask.height.saturating_sub(2));
    mask.at(x0, y0) && mask.at(x0 + 1, y0) && mask.at(x0, y0 + 1) && mask.at(x0 + 1, y0 + 1)
}

/// Back-projects every valid pixel of every view into a world-space point
/// cloud, with optional voxel down-sampling (one representative point per
/// occupied voxel).
pub fn fuse_depths(
    views: &[(&ImageF, &Mask, &Camera)],
    voxel_size: Option<f64>,
) -> Vec<Vector3<f64>> {
    let mut points = Vec::new();
    for (depth, mask, cam) in views {
        for y in 0..cam.height {
            for x in 0..cam.width {
                if !mask.at(x, y) {
                    continue;
                }
                let ray = cam.ray_through_pixel(x, y);
                points.push(ray.point_at(depth.at(x, y)));
            }
        }
    }
    match voxel_size {
        None => points,
        Some(size) => {
            let mut seen = std::collections::HashSet::new();
            let mut out = Vec::new();
            for p in points {
                let key = (
                    (p.x / size).floor() as i64,
                    (p.y / size).floor() as i64,
                    (p.z / size).floor() as i64,
                );
                if seen.insert(key) {
                    out.push(p);
                }
            }
            out
        }
    }
}

/// Simple median-split kd-tree over 3D points for nearest-neighbor queries.
struct KdTree {
    points: Vec<Vector3<f64>>,
    // (point index, split axis); subtree layout is [left..root..right].
    nodes: Vec<(usize, usize)>,
}

impl KdTree {
    fn build(points: &[Vector3<f64>]) -> Self {
        let mut indices: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::with_capacity(points.len());
        Self::build_recursive(points, &mut indices, 0, &mut nodes);
        Self {
            points: points.to_vec(),
            nodes,
        }
    }

    fn build_recursive(
        points: &[Vector3<f64>],
        indices: &mut [usize],
        depth: usize,
        nodes: &mut Vec<(usize, usize)>,
    ) {
        if indices.is_empty() {
            return;
        }
        let axis = depth % 3;
        indices.sort_by(|&a, &b| points[a][axis].partial_cmp(&points[b][axis]).unwrap());
        let mid = indices.len() / 2;
        nodes.push((indices[mid], axis));
        let node_slot = nodes.len() - 1;
        let (left, rest) = indices.split_at_mut(mid);
        let right = &mut rest[1..];
        // Record subtree sizes implicitly through a nested representation.
        let left_start = nodes.len();
        Self::build_recursive(points, left, depth + 1, nodes);
        let left_len = nodes.len() - left_start;
        Self::build_recursive(points, right, depth + 1, nodes);
        // Stash left subtree length in the axis field's upper bits.
        nodes[node_slot].1 = axis | (left_len << 2);
    }

    fn nearest(&self, query: &Vector3<f64>) -> f64 {
        let mut best = f64::INFINITY;
        self.nearest_recursive(0, self.nodes.len(), query, &mut best);
        best.sqrt()
    }

    fn nearest_recursive(&self, start: usize, len: usize, query: &Vector3<f64>, best: &mut f64) {
        if len == 0 {
            return;
        }
        let (idx, packed) = self.nodes[start];
        let axis = packed & 0b11;
        let left_len = packed >> 2;
        let p = self.points[idx];
        let d2 = (p - query).norm_squared();
        if d2 < *best {
            *best = d2;
        }
        let delta = query[axis] - p[axis];
        let (near_start, near_len, far_start, far_len) = if delta < 0.0 {
            (start + 1, left_len, start + 1 + left_len, len - 1 - left_len)
        } else {
            (start + 1 + left_len, len - 1 - left_len, start + 1, left_len)
        };
        self.nearest_recursive(near_start, near_len, query, best);
        if delta * delta < *best {
            self.nearest_recursive(far_start, far_len, query, best);
        }
    }
}

/// Mean distance from each point of `from` to its nearest neighbor in `to`.
fn directed_mean_nn(from: &[Vector3<f64>], to: &KdTree) -> f64 {
    from.iter().map(|p| to.nearest(p)).sum::<f64>() / from.len() as f64
}

/// Symmetric Chamfer distance: mean unsquared nearest-neighbor distance,
/// averaged over both directions.
pub fn chamfer(cloud_a: &[Vector3<f64>], cloud_b: &[Vector3<f64>]) -> Result<f64, EvalError> {
    if cloud_a.is_empty() || cloud_b.is_empty() {
        return Err(EvalError::EmptyCloud);
    }
    let tree_a = KdTree::build(cloud_a);
    let tree_b = KdTree::build(cloud_b);
    Ok(0.5 * directed_mean_nn(cloud_a, &tree_b) + 0.5 * directed_mean_nn(cloud_b, &tree_a))
}
