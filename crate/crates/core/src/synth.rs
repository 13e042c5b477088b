//! Synthetic scene and camera generators used by tests, the CLI fixtures,
//! and the optimization suites.

use nalgebra::{UnitQuaternion, Vector3};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::geom::{look_at_camera, quat_wxyz, Camera, GaussianPrimitive, OPACITY_EPS};

/// Opacity just below the clamp; "opaque" for scene-building purposes.
pub const OPAQUE: f64 = 1.0 - OPACITY_EPS;

/// Quaternion rotating the local z axis onto `dir`.
fn quat_z_to(dir: &Vector3<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::rotation_between(&Vector3::z(), dir)
        .unwrap_or_else(|| quat_wxyz(0.0, 1.0, 0.0, 0.0))
}

/// Shell of flattened Gaussians covering a sphere, normals pointing outward
/// (smallest scale along the radial axis).
pub fn sphere_scene(
    center: Vector3<f64>,
    radius: f64,
    count: usize,
    opacity: f64,
    seed: u64,
) -> Vec<GaussianPrimitive> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut scene = Vec::with_capacity(count);
    // Fibonacci sphere for even coverage.
    let golden = (1.0 + 5.0f64.sqrt()) / 2.0;
    let spacing = radius * (4.0 * std::f64::consts::PI / count as f64).sqrt();
    for i in 0..count {
        let z = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
        let r = (1.0 - z * z).sqrt();
        let phi = 2.0 * std::f64::consts::PI * i as f64 / golden;
        let dir = Vector3::new(r * phi.cos(), r * phi.sin(), z);
        let color = Vector3::new(
            0.5 + 0.5 * dir.x,
            0.5 + 0.5 * dir.y,
            0.5 + 0.5 * dir.z,
        )
        .map(|c: f64| c.clamp(0.0, 1.0) * 0.8 + 0.1);
        scene.push(
            GaussianPrimitive::new(
                center + dir * radius,
                Vector3::new(spacing, spacing, spacing * 0.1),
                quat_z_to(&dir),
                opacity.min(OPAQUE),
                color,
            )
            .unwrap(),
        );
        let _ = &mut rng;
    }
    scene
}

/// Random Gaussians inside a ball, for optimization initializations.
pub fn random_ball_scene(
    center: Vector3<f64>,
    radius: f64,
    count: usize,
    scale: f64,
    seed: u64,
) -> Vec<GaussianPrimitive> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let dir = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let p = center + dir * radius;
            GaussianPrimitive::new(
                p,
                Vector3::new(
                    scale * rng.gen_range(0.5..1.5),
                    scale * rng.gen_range(0.5..1.5),
                    scale * rng.gen_range(0.5..1.5),
                ),
                quat_wxyz(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ),
                rng.gen_range(0.3..0.9),
                Vector3::new(rng.gen(), rng.gen(), rng.gen()),
            )
            .unwrap()
        })
        .collect()
}

/// Flat wall of flattened Gaussians in the plane `z = z0`, spanning
/// `[-half, half]^2`, facing -z.
pub fn wall_scene(
    z0: f64,
    half: f64,
    per_side: usize,
    opacity: f64,
) -> Vec<GaussianPrimitive> {
    let mut scene = Vec::new();
    let step = 2.0 * half / (per_side - 1) as f64;
    for iy in 0..per_side {
        for ix in 0..per_side {
            let x = -half + step * ix as f64;
            let y = -half + step * iy as f64;
            scene.push(
                GaussianPrimitive::new(
                    Vector3::new(x, y, z0),
                    Vector3::new(step, step, step * 0.05),
                    quat_wxyz(1.0, 0.0, 0.0, 0.0),
                    opacity.min(OPAQUE),
                    Vector3::new(0.7, 0.6, 0.5),
                )
                .unwrap(),
            );
        }
    }
    scene
}

/// Translucent-ramp scene: a thin front plane whose opacity ramps from
/// `alpha_lo` to `alpha_hi` along +x, in front of an opaque backdrop.
/// Returns (scene, front z, backdrop z).
pub fn ramp_scene(columns: usize, alpha_lo: f64, alpha_hi: f64) -> (Vec<GaussianPrimitive>, f64, f64) {
    let z_front = 5.0;
    let z_back = 5.3;
    let half = 1.0;
    let step = 2.0 * half / (columns - 1) as f64;
    let mut scene = Vec::new();
    for i in 0..columns {
        let x = -half + step * i as f64;
        let alpha = alpha_lo + (alpha_hi - alpha_lo) * i as f64 / (columns - 1) as f64;
        scene.push(
            GaussianPrimitive::new(
                Vector3::new(x, 0.0, z_front),
                // Tall in y so each column is a vertical strip; thin in z.
                Vector3::new(step * 1.25, 4.0, 0.09),
                quat_wxyz(1.0, 0.0, 0.0, 0.0),
                alpha.clamp(1e-3, OPAQUE),
                Vector3::new(0.2, 0.8, 0.3),
            )
            .unwrap(),
        );
    }
    // Opaque backdrop: one wide flattened slab.
    scene.push(
        GaussianPrimitive::new(
            Vector3::new(0.0, 0.0, z_back),
            Vector3::new(6.0, 6.0, 0.09),
            quat_wxyz(1.0, 0.0, 0.0, 0.0),
            OPAQUE,
            Vector3::new(0.8, 0.2, 0.2),
        )
        .unwrap(),
    );
    (scene, z_front, z_back)
}

/// Ring of cameras on a circle of `orbit_radius` around `target` in the
/// y = eye_y plane, all looking at `target`.
pub fn camera_ring(
    target: Vector3<f64>,
    orbit_radius: f64,
    eye_y: f64,
    count: usize,
    focal: f64,
    width: usize,
    height: usize,
) -> Vec<Camera> {
    (0..count)
        .map(|i| {
            let angle = 2.0 * std::f64::consts::PI * i as f64 / count as f64;
            let eye = target
                + Vector3::new(orbit_radius * angle.cos(), eye_y, orbit_radius * angle.sin());
            look_at_camera(eye, target, focal, width, height)
        })
        .collect()
}
