//! Finite-difference validation of the analytic depth gradients, runnable
//! from the command line against any loaded scene.

use nalgebra::Vector3;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use solidsplat_core::depth::{gather_profile, initial_depth, median_depth};
use solidsplat_core::geom::{look_at_camera, quat_wxyz, GaussianPrimitive, Ray, OPACITY_EPS};
use solidsplat_core::grad::{depth_backward, GradientBuffer};

/// Traversal count for both routes: deep enough that the search quantum
/// (2r * 8^-n) sits far below the finite-difference step.
const TRAVERSALS: u32 = 14;
const FD_STEP: f64 = 1e-5;

/// Median depth of a scene along one ray, `None` when the ray never reaches
/// half transmittance.
fn median_of(scene: &[GaussianPrimitive], ray: &Ray) -> Option<(f64, f64)> {
    let profile = gather_profile(scene, ray, 1e-3);
    let t_init = initial_depth(&profile)?;
    let (t_med, valid) = median_depth(&profile, t_init, 0.4, TRAVERSALS);
    valid.then(|| (t_med, profile.total_transmittance(t_med)))
}

fn perturbed(scene: &[GaussianPrimitive], id: usize, param: usize, h: f64) -> Vec<GaussianPrimitive> {
    let mut out = scene.to_vec();
    let g = &scene[id];
    let mut center = g.center();
    let mut scales = g.scales();
    let q = g.rotation();
    let mut quat = [q.w, q.i, q.j, q.k];
    let mut opacity = g.opacity();
    match param {
        0..=2 => center[param] += h,
        3..=5 => scales[param - 3] += h,
        6..=9 => quat[param - 6] += h,
        10 => opacity = (opacity + h).clamp(OPACITY_EPS, 1.0 - OPACITY_EPS),
        _ => unreachable!(),
    }
    out[id] = GaussianPrimitive::new(
        center,
        scales,
        quat_wxyz(quat[0], quat[1], quat[2], quat[3]),
        opacity,
        g.color(),
    )
    .expect("perturbed primitive stays valid");
    out
}

fn analytic_component(grad: &GradientBuffer, id: usize, param: usize) -> f64 {
    let g = grad.get(id);
    match param {
        0..=2 => g.center[param],
        3..=5 => g.scales[param - 3],
        6..=9 => g.rotation[param - 6],
        10 => g.opacity,
        _ => unreachable!(),
    }
}

/// Compares analytic median-depth gradients against central differences on
/// randomly sampled rays and parameters. Returns the maximum relative error,
/// or `None` when no comparable sample was found.
pub fn run(scene: &[GaussianPrimitive], seed: u64) -> Option<f64> {
    if scene.is_empty() {
        return None;
    }
    let centroid: Vector3<f64> =
        scene.iter().map(|g| g.center()).sum::<Vector3<f64>>() / scene.len() as f64;
    let spread = scene
        .iter()
        .map(|g| (g.center() - centroid).norm())
        .fold(0.0f64, f64::max)
        .max(1.0);
    let camera = look_at_camera(
        centroid + Vector3::new(0.15 * spread, 0.1 * spread, -4.0 * spread),
        centroid,
        50.0,
        64,
        64,
    );
    let mut rng = StdRng::seed_from_u64(seed);
    let mut max_rel: Option<f64> = None;
    let mut compared = 0;
    for _ in 0..400 {
        if compared >= 60 {
            break;
        }
        let u = rng.gen_range(0.0..64.0);
        let v = rng.gen_range(0.0..64.0);
        let ray = camera.ray_at(u, v);
        let profile = gather_profile(scene, &ray, 1e-3);
        let Some(t_init) = initial_depth(&profile) else {
            continue;
        };
        let (t_med, valid) = median_depth(&profile, t_init, 0.4, TRAVERSALS);
        if !valid {
            continue;
        }
        let mut buffer = GradientBuffer::new(scene.len());
        if depth_backward(&profile, scene, &ray, t_med, 1.0, &mut buffer).is_err() {
            continue;
        }
        if buffer.degenerate_pixels > 0 {
            continue;
        }
        buffer.project_rotations_to_tangent(scene);
        let t_half = profile.total_transmittance(t_med);
        // Pick one contributing Gaussian and one parameter per sample.
        let entry = &profile.entries()[rng.gen_range(0..profile.len())];
        // Skip crossings sitting on a per-Gaussian peak: the transmittance
        // slope is one-sided there and central differences straddle the kink.
        if profile
            .entries()
            .iter()
            .any(|e| (e.restriction.t_star - t_med).abs() < 1e-3)
        {
            continue;
        }
        let id = entry.restriction.gaussian_id;
        let param = rng.gen_range(0..11);
        let plus = median_of(&perturbed(scene, id, param, FD_STEP), &ray);
        let minus = median_of(&perturbed(scene, id, param, -FD_STEP), &ray);
        let (Some((tp, _)), Some((tm, _))) = (plus, minus) else {
            continue;
        };
        // The analytic slope is taken exactly at half transmittance; rescale
        // the finite difference to the same convention.
        let fd = (tp - tm) / (2.0 * FD_STEP) * (0.5 / t_half);
        let analytic = analytic_component(&buffer, id, param);
        let denom = analytic.abs().max(fd.abs());
        if denom < 1e-4 {
            continue;
        }
        let rel = (fd - analytic).abs() / denom;
        max_rel = Some(max_rel.map_or(rel, |m: f64| m.max(rel)));
        compared += 1;
    }
    max_rel
}
