//! Gaussian primitives, cameras, rays, and the exact 1D restriction of a
//! 3D Gaussian along a ray.
//!
//! A primitive evaluates as `G(x) = o * exp(-(x - c)^T Sigma^-1 (x - c))`
//! (no 1/2 in the exponent). Restricted to a ray `x(t) = o + w t` this is a
//! 1D Gaussian `G(t) = g_peak * exp(-a (t - t_star)^2)` with
//! `a = w^T Sigma^-1 w`, which the rest of the crate works with directly.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

/// Opacity clamp: opacities live in `(0, 1 - OPACITY_EPS]` so the vacancy
/// `sqrt(1 - G)` stays bounded away from zero and every closed form is finite.
pub const OPACITY_EPS: f64 = 1e-4;

/// Covariance condition-number limit; primitives beyond this are rejected
/// when restricted to a ray.
pub const MAX_CONDITION_NUMBER: f64 = 1e12;

/// Restrictions with a peak value below this are skipped everywhere.
pub const PEAK_CUTOFF: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("scale must be strictly positive, got {0}")]
    NonPositiveScale(f64),
    #[error("opacity must lie in (0, {max}], got {got}")]
    OpacityOutOfRange { got: f64, max: f64 },
    #[error("quaternion norm deviates from 1 by {0:e}")]
    UnnormalizedQuaternion(f64),
    #[error("color channel outside [0, 1]: {0}")]
    ColorOutOfRange(f64),
    #[error("covariance condition number {0:.3e} exceeds 1e12; primitive rejected")]
    DegenerateCovariance(f64),
    #[error("ray direction has zero or non-finite norm")]
    BadRayDirection,
    #[error("camera intrinsics invalid: {0}")]
    BadIntrinsics(String),
    #[error("camera rotation not orthonormal (residual {0:e})")]
    BadRotation(f64),
}

/// Anisotropic 3D Gaussian with opacity and color.
#[derive(Debug, Clone)]
pub struct GaussianPrimitive {
    center: Vector3<f64>,
    scales: Vector3<f64>,
    rotation: UnitQuaternion<f64>,
    opacity: f64,
    color: Vector3<f64>,
    /// Index (0-2) of the smallest scale; the primitive's normal axis.
    normal_axis: usize,
}

impl GaussianPrimitive {
    pub fn new(
        center: Vector3<f64>,
        scales: Vector3<f64>,
        rotation: UnitQuaternion<f64>,
        opacity: f64,
        color: Vector3<f64>,
    ) -> Result<Self, GeomError> {
        for &s in scales.iter() {
            if !(s > 0.0) || !s.is_finite() {
                return Err(GeomError::NonPositiveScale(s));
            }
        }
        let max_opacity = 1.0 - OPACITY_EPS;
        if !(opacity > 0.0 && opacity <= max_opacity) {
            return Err(GeomError::OpacityOutOfRange {
                got: opacity,
                max: max_opacity,
            });
        }
        let norm_dev = (rotation.as_ref().norm() - 1.0).abs();
        if norm_dev > 1e-9 {
            return Err(GeomError::UnnormalizedQuaternion(norm_dev));
        }
        for &c in color.iter() {
            if !(0.0..=1.0).contains(&c) {
                return Err(GeomError::ColorOutOfRange(c));
            }
        }
        let normal_axis = scales.imin();
        Ok(Self {
            center,
            scales,
            rotation,
            opacity,
            color,
            normal_axis,
        })
    }

    pub fn center(&self) -> Vector3<f64> {
        self.center
    }

    pub fn scales(&self) -> Vector3<f64> {
        self.scales
    }

    pub fn rotation(&self) -> UnitQuaternion<f64> {
        self.rotation
    }

    pub fn opacity(&self) -> f64 {
        self.opacity
    }

    pub fn color(&self) -> Vector3<f64> {
        self.color
    }

    pub fn normal_axis(&self) -> usize {
        self.normal_axis
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Covariance `Sigma = R diag(s^2) R^T`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation_matrix();
        let d = Matrix3::from_diagonal(&self.scales.map(|s| s * s));
        r * d * r.transpose()
    }

    /// Precision `Sigma^-1 = R diag(1/s^2) R^T`, formed analytically so it is
    /// symmetric by construction.
    pub fn precision(&self) -> Matrix3<f64> {
        let r = self.rotation_matrix();
        let d = Matrix3::from_diagonal(&self.scales.map(|s| 1.0 / (s * s)));
        r * d * r.transpose()
    }

    /// Ratio of largest to smallest covariance eigenvalue, `(s_max/s_min)^2`.
    pub fn condition_number(&self) -> f64 {
        let smax = self.scales.max();
        let smin = self.scales.min();
        (smax / smin) * (smax / smin)
    }

    /// Unit normal: the rotated axis of the smallest scale, sign-flipped so
    /// that it faces against `view_dir` (points toward the camera).
    pub fn normal_facing(&self, view_dir: &Vector3<f64>) -> Vector3<f64> {
        let n = self.rotation_matrix().column(self.normal_axis).into_owned();
        if n.dot(view_dir) > 0.0 {
            -n
        } else {
            n
        }
    }

    /// `G(x) = o exp(-(x - c)^T Sigma^-1 (x - c))`, in `[0, o]`.
    pub fn eval(&self, x: &Vector3<f64>) -> f64 {
        let d = x - self.center;
        let m = self.rotation_matrix().transpose() * d;
        let q = m
            .iter()
            .zip(self.scales.iter())
            .map(|(mi, si)| (mi / si) * (mi / si))
            .sum::<f64>();
        self.opacity * (-q).exp()
    }
}

/// `G(x)` as a free function, mirroring [`GaussianPrimitive::eval`].
pub fn eval_gaussian(g: &GaussianPrimitive, x: &Vector3<f64>) -> f64 {
    g.eval(x)
}

/// Ray with unit direction.
#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: Vector3<f64>,
    direction: Vector3<f64>,
}

impl Ray {
    /// Normalizes the direction; errors on zero or non-finite input.
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>) -> Result<Self, GeomError> {
        let n = direction.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(GeomError::BadRayDirection);
        }
        Ok(Self {
            origin,
            direction: direction / n,
        })
    }

    pub fn direction(&self) -> Vector3<f64> {
        self.direction
    }

    pub fn point_at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }

    /// Perpendicular distance from the ray's supporting line to `p`.
    pub fn distance_to_point(&self, p: &Vector3<f64>) -> f64 {
        let d = p - self.origin;
        (d - self.direction * d.dot(&self.direction)).norm()
    }
}

/// The 1D Gaussian a primitive induces along a ray:
/// `G(t) = g_peak * exp(-a (t - t_star)^2)`.
#[derive(Debug, Clone, Copy)]
pub struct RayRestriction {
    pub gaussian_id: usize,
    /// `a = w^T Sigma^-1 w`, strictly positive.
    pub curvature: f64,
    /// Ray parameter of the peak.
    pub t_star: f64,
    /// `G(t_star)`; equals the per-pixel alpha.
    pub g_peak: f64,
}

impl RayRestriction {
    /// `G(t)` along the ray.
    pub fn gaussian_value(&self, t: f64) -> f64 {
        let d = t - self.t_star;
        self.g_peak * (-self.curvature * d * d).exp()
    }

    /// `G'(t) = -2 a (t - t_star) G(t)`.
    pub fn gaussian_derivative(&self, t: f64) -> f64 {
        -2.0 * self.curvature * (t - self.t_star) * self.gaussian_value(t)
    }

    /// Vacancy `v(t) = sqrt(1 - G(t))`, in `[sqrt(OPACITY_EPS), 1]`.
    pub fn vacancy(&self, t: f64) -> f64 {
        (1.0 - self.gaussian_value(t)).sqrt()
    }

    /// Attenuation coefficient `sigma(t) = |d/dt log v(t)|`, which equals
    /// `|G'(t)| / (2 (1 - G(t)))`.
    pub fn attenuation(&self, t: f64) -> f64 {
        let g = self.gaussian_value(t);
        self.gaussian_derivative(t).abs() / (2.0 * (1.0 - g))
    }
}

/// Vacancy of a restriction at `t`; see [`RayRestriction::vacancy`].
pub fn vacancy(restriction: &RayRestriction, t: f64) -> f64 {
    restriction.vacancy(t)
}

/// Attenuation coefficient at `t`; see [`RayRestriction::attenuation`].
pub fn attenuation_sigma(restriction: &RayRestriction, t: f64) -> f64 {
    restriction.attenuation(t)
}

/// Restrict a primitive to a ray.
///
/// With `q(t) = (o + w t - c)^T P (o + w t - c) = a t^2 + 2 b t + c0` the peak
/// is at `t_star = -b / a` and `g_peak = o exp(-(c0 - b^2 / a))`.
pub fn restrict_to_ray(
    g: &GaussianPrimitive,
    ray: &Ray,
    gaussian_id: usize,
) -> Result<RayRestriction, GeomError> {
    let cond = g.condition_number();
    if cond > MAX_CONDITION_NUMBER {
        return Err(GeomError::DegenerateCovariance(cond));
    }
    let p = g.precision();
    let w = ray.direction();
    let d0 = ray.origin - g.center();
    let a = (p * w).dot(&w);
    let b = (p * d0).dot(&w);
    let c0 = (p * d0).dot(&d0);
    let t_star = -b / a;
    let exponent = c0 - b * b / a;
    // Clamp tiny negative round-off in the completed square.
    let g_peak = g.opacity() * (-exponent.max(0.0)).exp();
    Ok(RayRestriction {
        gaussian_id,
        curvature: a,
        t_star,
        g_peak,
    })
}

/// Pinhole camera with world-to-camera extrinsics.
#[derive(Debug, Clone)]
pub struct Camera {
    intrinsics: Matrix3<f64>,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(
        intrinsics: Matrix3<f64>,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self, GeomError> {
        if (intrinsics[(2, 2)] - 1.0).abs() > 1e-12 {
            return Err(GeomError::BadIntrinsics("K[2][2] must be 1".into()));
        }
        if intrinsics[(0, 0)] <= 0.0 || intrinsics[(1, 1)] <= 0.0 {
            return Err(GeomError::BadIntrinsics(
                "focal lengths must be positive".into(),
            ));
        }
        for (i, j) in [(1, 0), (2, 0), (2, 1)] {
            if intrinsics[(i, j)].abs() > 1e-12 {
                return Err(GeomError::BadIntrinsics(
                    "K must be upper triangular".into(),
                ));
            }
        }
        let residual = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if residual > 1e-9 {
            return Err(GeomError::BadRotation(residual));
        }
        Ok(Self {
            intrinsics,
            rotation,
            translation,
            width,
            height,
        })
    }

    pub fn intrinsics(&self) -> Matrix3<f64> {
        self.intrinsics
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.rotation
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.translation
    }

    /// Camera center in world coordinates.
    pub fn position(&self) -> Vector3<f64> {
        -self.rotation.transpose() * self.translation
    }

    pub fn world_to_camera(&self, x_world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x_world + self.translation
    }

    pub fn camera_to_world(&self, x_cam: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (x_cam - self.translation)
    }

    /// Unit camera-frame direction through continuous pixel coords `(u, v)`.
    /// Pixel `(ix, iy)` has its center at `(ix + 0.5, iy + 0.5)`.
    pub fn pixel_direction_cam(&self, u: f64, v: f64) -> Vector3<f64> {
        let k = &self.intrinsics;
        let x = (u - k[(0, 2)] - k[(0, 1)] * ((v - k[(1, 2)]) / k[(1, 1)])) / k[(0, 0)];
        let y = (v - k[(1, 2)]) / k[(1, 1)];
        Vector3::new(x, y, 1.0).normalize()
    }

    /// World-space ray through continuous pixel coords `(u, v)`.
    pub fn ray_at(&self, u: f64, v: f64) -> Ray {
        let dir_cam = self.pixel_direction_cam(u, v);
        let dir_world = self.rotation.transpose() * dir_cam;
        Ray {
            origin: self.position(),
            direction: dir_world.normalize(),
        }
    }

    /// Ray through the center of integer pixel `(ix, iy)`.
    pub fn ray_through_pixel(&self, ix: usize, iy: usize) -> Ray {
        self.ray_at(ix as f64 + 0.5, iy as f64 + 0.5)
    }

    /// Projects a world point to continuous pixel coords and its ray
    /// parameter (Euclidean distance from the camera center). `None` when the
    /// point is at or behind the camera plane.
    pub fn project(&self, x_world: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let xc = self.world_to_camera(x_world);
        if xc.z <= 1e-12 {
            return None;
        }
        let h = self.intrinsics * xc;
        Some((h.x / h.z, h.y / h.z, xc.norm()))
    }

    /// True when continuous pixel coords fall inside the image.
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }
}

/// Builds a camera at `eye` looking at `target` (world +y as the up hint).
pub fn look_at_camera(
    eye: Vector3<f64>,
    target: Vector3<f64>,
    focal: f64,
    width: usize,
    height: usize,
) -> Camera {
    let forward = (target - eye).normalize();
    let up_hint = if forward.y.abs() > 0.99 {
        Vector3::new(1.0, 0.0, 0.0)
    } else {
        Vector3::new(0.0, 1.0, 0.0)
    };
    let right = forward.cross(&up_hint).normalize();
    let down = forward.cross(&right).normalize();
    // Rows of the world->camera rotation: camera x, y, z axes in world coords.
    let rotation = Matrix3::from_rows(&[
        right.transpose(),
        down.transpose(),
        forward.transpose(),
    ]);
    let translation = -rotation * eye;
    let k = Matrix3::new(
        focal,
        0.0,
        width as f64 / 2.0,
        0.0,
        focal,
        height as f64 / 2.0,
        0.0,
        0.0,
        1.0,
    );
    Camera::new(k, rotation, translation, width, height).expect("look_at camera is valid")
}

/// Unit quaternion from raw `(w, x, y, z)` coefficients (normalized).
pub fn quat_wxyz(w: f64, x: f64, y: f64, z: f64) -> UnitQuaternion<f64> {
    UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_gaussian(rng: &mut StdRng) -> GaussianPrimitive {
        let center = Vector3::new(
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
        );
        let scales = Vector3::new(
            rng.gen_range(0.2..1.5),
            rng.gen_range(0.2..1.5),
            rng.gen_range(0.2..1.5),
        );
        let rotation = quat_wxyz(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let opacity = rng.gen_range(0.05..0.999);
        GaussianPrimitive::new(center, scales, rotation, opacity, Vector3::new(0.5, 0.5, 0.5))
            .unwrap()
    }

    fn random_ray(rng: &mut StdRng) -> Ray {
        Ray::new(
            Vector3::new(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
            ),
            Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ),
        )
        .unwrap()
    }

    #[test]
    fn eval_at_center_returns_opacity() {
        let g = GaussianPrimitive::new(
            Vector3::new(1.0, 2.0, 3.0),
            Vector3::new(0.5, 0.7, 0.9),
            quat_wxyz(1.0, 0.0, 0.0, 0.0),
            0.8,
            Vector3::zeros(),
        )
        .unwrap();
        assert_relative_eq!(g.eval(&Vector3::new(1.0, 2.0, 3.0)), 0.8, epsilon = 1e-15);
    }

    #[test]
    fn eval_unit_covariance_at_distance_one() {
        let g = GaussianPrimitive::new(
            Vector3::zeros(),
            Vector3::new(1.0, 1.0, 1.0),
            quat_wxyz(1.0, 0.0, 0.0, 0.0),
            0.8,
            Vector3::zeros(),
        )
        .unwrap();
        // No 1/2 in the exponent: distance 1 gives o * e^-1.
        assert_relative_eq!(
            g.eval(&Vector3::new(1.0, 0.0, 0.0)),
            0.8 * (-1.0f64).exp(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn eval_matches_dense_linear_solve_oracle() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..200 {
            let g = random_gaussian(&mut rng);
            let x = Vector3::new(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            );
            // Oracle: build Sigma explicitly and solve the linear system.
            let sigma = g.covariance();
            let d = x - g.center();
            let sol = sigma.lu().solve(&d).unwrap();
            let expected = g.opacity() * (-d.dot(&sol)).exp();
            assert_relative_eq!(g.eval(&x), expected, max_relative = 1e-12);
        }
    }

    #[test]
    fn restrict_isotropic_through_center() {
        let g = GaussianPrimitive::new(
            Vector3::new(0.0, 0.0, 5.0),
            Vector3::new(1.0, 1.0, 1.0),
            quat_wxyz(1.0, 0.0, 0.0, 0.0),
            1.0 - OPACITY_EPS,
            Vector3::zeros(),
        )
        .unwrap();
        let ray = Ray::new(Vector3::zeros(), Vector3::new(0.0, 0.0, 1.0)).unwrap();
        let r = restrict_to_ray(&g, &ray, 0).unwrap();
        assert_relative_eq!(r.curvature, 1.0, epsilon = 1e-12);
        assert_relative_eq!(r.t_star, 5.0, epsilon = 1e-12);
        assert_relative_eq!(r.g_peak, 1.0 - OPACITY_EPS, epsilon = 1e-12);
    }

    #[test]
    fn restrict_isotropic_perpendicular_distance_one() {
        let g = GaussianPrimitive::new(
            Vector3::new(1.0, 0.0, 5.0),
            Vector3::new(1.0, 1.0, 1.0),
            quat_wxyz(1.0, 0.0, 0.0, 0.0),
            1.0 - OPACITY_EPS,
            Vector3::zeros(),
        )
        .unwrap();
        let ray = Ray::new(Vector3::zeros(), Vector3::new(0.0, 0.0, 1.0)).unwrap();
        let r = restrict_to_ray(&g, &ray, 0).unwrap();
        assert_relative_eq!(
            r.g_peak,
            (1.0 - OPACITY_EPS) * (-1.0f64).exp(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn restrict_matches_grid_search_oracle() {
        let mut rng = StdRng::seed_from_u64(12);
        for _ in 0..5 {
            let g = random_gaussian(&mut rng);
            let ray = random_ray(&mut rng);
            let r = restrict_to_ray(&g, &ray, 0).unwrap();
            // Dense 1D grid search around the analytic peak.
            let lo = r.t_star - 2.0;
            let hi = r.t_star + 2.0;
            let n = 1_000_000usize;
            let mut best_t = lo;
            let mut best_v = f64::MIN;
            for i in 0..=n {
                let t = lo + (hi - lo) * i as f64 / n as f64;
                let v = g.eval(&ray.point_at(t));
                if v > best_v {
                    best_v = v;
                    best_t = t;
                }
            }
            let res = (hi - lo) / n as f64;
            assert!((best_t - r.t_star).abs() <= res * 2.0);
            assert!((best_v - r.g_peak).abs() <= 1e-9);
        }
    }

    #[test]
    fn restriction_reproduces_direct_3d_evaluation() {
        let mut rng = StdRng::seed_from_u64(13);
        for _ in 0..1000 {
            let g = random_gaussian(&mut rng);
            let ray = random_ray(&mut rng);
            let r = restrict_to_ray(&g, &ray, 0).unwrap();
            let t = rng.gen_range(-8.0..8.0);
            let direct = g.eval(&ray.point_at(t));
            let via_restriction = r.gaussian_value(t);
            assert_relative_eq!(via_restriction, direct, max_relative = 1e-12, epsilon = 1e-300);
        }
    }

    #[test]
    fn g_peak_bounded_by_opacity() {
        let mut rng = StdRng::seed_from_u64(14);
        for _ in 0..500 {
            let g = random_gaussian(&mut rng);
            let ray = random_ray(&mut rng);
            let r = restrict_to_ray(&g, &ray, 0).unwrap();
            assert!(r.g_peak <= g.opacity() + 1e-15);
        }
    }

    #[test]
    fn degenerate_covariance_rejected() {
        let g = GaussianPrimitive::new(
            Vector3::zeros(),
            Vector3::new(1e-7, 1.0, 1.0),
            quat_wxyz(1.0, 0.0, 0.0, 0.0),
            0.5,
            Vector3::zeros(),
        )
        .unwrap();
        let ray = Ray::new(Vector3::new(0.0, 0.0, -5.0), Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert!(matches!(
            restrict_to_ray(&g, &ray, 0),
            Err(GeomError::DegenerateCovariance(_))
        ));
    }

    #[test]
    fn vacancy_values() {
        let r = RayRestriction {
            gaussian_id: 0,
            curvature: 1.0,
            t_star: 0.0,
            g_peak: 0.75,
        };
        assert_relative_eq!(r.vacancy(0.0), 0.5, epsilon = 1e-15);
        // Far from the peak G -> 0 and v -> 1.
        assert_relative_eq!(r.vacancy(100.0), 1.0, epsilon = 1e-15);
        let r2 = RayRestriction { g_peak: 0.8, ..r };
        assert_relative_eq!(r2.vacancy(0.0), 0.2f64.sqrt(), max_relative = 1e-15);
    }

    #[test]
    fn vacancy_approaches_one_far_away() {
        let mut rng = StdRng::seed_from_u64(15);
        for _ in 0..100 {
            let g = random_gaussian(&mut rng);
            let ray = random_ray(&mut rng);
            let r = restrict_to_ray(&g, &ray, 0).unwrap();
            // 10 sigma-equivalent distance along the ray.
            let t = r.t_star + 10.0 / r.curvature.sqrt();
            assert!((r.vacancy(t) - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn occupancy_monotone_in_gaussian_value() {
        let mut rng = StdRng::seed_from_u64(16);
        for _ in 0..1000 {
            let g = random_gaussian(&mut rng);
            let x1 = Vector3::new(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            );
            let x2 = Vector3::new(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            );
            let (ga, gb) = (g.eval(&x1), g.eval(&x2));
            // occupancy = 1 - v^2 with v = sqrt(1 - G)
            let occ = |gv: f64| 1.0 - (1.0 - gv).sqrt().powi(2);
            if ga >= gb {
                assert!(occ(ga) >= occ(gb) - 1e-15);
            } else {
                assert!(occ(gb) >= occ(ga) - 1e-15);
            }
        }
    }

    #[test]
    fn attenuation_zero_at_peak_and_symmetric() {
        let r = RayRestriction {
            gaussian_id: 0,
            curvature: 2.0,
            t_star: 3.0,
            g_peak: 0.7,
        };
        assert_eq!(r.attenuation(3.0), 0.0);
        for delta in [0.1, 0.5, 1.3] {
            assert_relative_eq!(
                r.attenuation(3.0 - delta),
                r.attenuation(3.0 + delta),
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn attenuation_matches_log_vacancy_finite_difference() {
        let mut rng = StdRng::seed_from_u64(17);
        for _ in 0..200 {
            let g = random_gaussian(&mut rng);
            let ray = random_ray(&mut rng);
            let r = restrict_to_ray(&g, &ray, 0).unwrap();
            let t = r.t_star + rng.gen_range(-2.0..2.0);
            if (t - r.t_star).abs() < 1e-3 {
                continue;
            }
            let h = 1e-6;
            let fd = (r.vacancy(t + h).ln() - r.vacancy(t - h).ln()) / (2.0 * h);
            assert_relative_eq!(r.attenuation(t), fd.abs(), max_relative = 1e-5, epsilon = 1e-10);
        }
    }

    #[test]
    fn camera_validation() {
        let k = Matrix3::new(100.0, 0.0, 32.0, 0.0, 100.0, 32.0, 0.0, 0.0, 1.0);
        assert!(Camera::new(k, Matrix3::identity(), Vector3::zeros(), 64, 64).is_ok());
        let bad_k = Matrix3::new(-1.0, 0.0, 32.0, 0.0, 100.0, 32.0, 0.0, 0.0, 1.0);
        assert!(Camera::new(bad_k, Matrix3::identity(), Vector3::zeros(), 64, 64).is_err());
        let bad_r = Matrix3::identity() * 1.1;
        assert!(Camera::new(k, bad_r, Vector3::zeros(), 64, 64).is_err());
    }

    #[test]
    fn camera_project_ray_roundtrip() {
        let cam = look_at_camera(
            Vector3::new(1.0, 2.0, -4.0),
            Vector3::zeros(),
            80.0,
            64,
            48,
        );
        let x = Vector3::new(0.3, -0.2, 0.5);
        let (u, v, t) = cam.project(&x).unwrap();
        let ray = cam.ray_at(u, v);
        assert_relative_eq!((ray.point_at(t) - x).norm(), 0.0, epsilon = 1e-9);
    }
}
