//! Median depth via bracketed 8-ary search on `T(t) = 0.5`, baseline depth
//! definitions, and whole-image rendering.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::geom::{restrict_to_ray, Camera, GaussianPrimitive, Ray, PEAK_CUTOFF};
use crate::img::{ImageF, ImageRgb, Mask};
use crate::transmittance::{ProfileEntry, TransmittanceProfile};

/// Default half-width of the search interval around the initial depth.
pub const DEFAULT_BRACKET_R: f64 = 0.4;

/// Default number of 8-ary traversals; final bracket width `2r * 8^-5`.
pub const DEFAULT_TRAVERSALS: u32 = 5;

/// Sentinel depth for background pixels. The mask, not this value, is
/// authoritative for validity.
pub const BACKGROUND_DEPTH: f64 = f64::MAX;

#[derive(Debug, Clone)]
pub struct RenderOptions {
    /// Half-width of the median search interval (world units).
    pub bracket_r: f64,
    /// Number of 8-ary traversals of the search interval.
    pub traversals: u32,
    /// Restrictions whose peak lies closer than this are dropped.
    pub t_near: f64,
    /// Worker threads; 0 uses the ambient rayon pool.
    pub workers: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            bracket_r: DEFAULT_BRACKET_R,
            traversals: DEFAULT_TRAVERSALS,
            t_near: 1e-3,
            workers: 0,
        }
    }
}

/// Per-pixel output channels of a rendered view.
#[derive(Debug, Clone)]
pub struct DepthRenderResult {
    pub median_depth: ImageF,
    pub valid_mask: Mask,
    pub expected_depth: ImageF,
    pub step_median_depth: ImageF,
    pub color: ImageRgb,
    pub normal: ImageRgb,
}

impl DepthRenderResult {
    fn background(width: usize, height: usize) -> Self {
        Self {
            median_depth: ImageF::filled(width, height, BACKGROUND_DEPTH),
            valid_mask: Mask::filled(width, height, false),
            expected_depth: ImageF::filled(width, height, BACKGROUND_DEPTH),
            step_median_depth: ImageF::filled(width, height, BACKGROUND_DEPTH),
            color: ImageRgb::zeros(width, height),
            normal: ImageRgb::zeros(width, height),
        }
    }
}

/// Step-wise median: the `t_star` of the first Gaussian (in compositing
/// order) at which the residual `prod_{i<=j}(1 - alpha_i)` drops to <= 0.5.
/// `None` when the residual never reaches 0.5 (background pixel).
pub fn initial_depth(profile: &TransmittanceProfile) -> Option<f64> {
    let mut residual = 1.0;
    for e in profile.entries() {
        residual *= 1.0 - e.restriction.g_peak;
        if residual <= 0.5 {
            return Some(e.restriction.t_star);
        }
    }
    None
}

/// Bracketed 8-ary search for `T(t) = 0.5` on `[t_init - r, t_init + r]`.
///
/// Each traversal probes the 7 interior points splitting the bracket into 8
/// segments and keeps the segment whose endpoint transmittances straddle 0.5.
/// Returns the midpoint of the final bracket; `valid` is false when the
/// transmittances at the initial endpoints lie on the same side of 0.5, in
/// which case `t_init` is returned unchanged.
pub fn median_depth(
    profile: &TransmittanceProfile,
    t_init: f64,
    r: f64,
    traversals: u32,
) -> (f64, bool) {
    let mut lo = t_init - r;
    let mut hi = t_init + r;
    let t_lo = profile.total_transmittance(lo);
    let t_hi = profile.total_transmittance(hi);
    if (t_lo - 0.5) * (t_hi - 0.5) > 0.0 {
        return (t_init, false);
    }
    for _ in 0..traversals {
        let step = (hi - lo) / 8.0;
        // T is non-increasing: find the first probe below 0.5.
        let mut new_lo = lo;
        let mut new_hi = hi;
        let mut found = false;
        for k in 1..8 {
            let p = lo + step * k as f64;
            if profile.total_transmittance(p) < 0.5 {
                new_lo = lo + step * (k - 1) as f64;
                new_hi = p;
                found = true;
                break;
            }
        }
        if !found {
            new_lo = lo + step * 7.0;
            new_hi = hi;
        }
        lo = new_lo;
        hi = new_hi;
    }
    (0.5 * (lo + hi), true)
}

/// Compositing-weighted mean of the peak depths; `None` when the weight sum
/// is below 1e-6 (background).
pub fn expected_depth(profile: &TransmittanceProfile) -> Option<f64> {
    let weights = profile.compositing_weights();
    let wsum: f64 = weights.iter().sum();
    if wsum < 1e-6 {
        return None;
    }
    let num: f64 = profile
        .entries()
        .iter()
        .zip(&weights)
        .map(|(e, w)| e.restriction.t_star * w)
        .sum();
    Some(num / wsum)
}

/// Per-pixel forward trace retained for the backward pass.
#[derive(Debug, Clone)]
pub struct PixelTrace {
    pub ray: Ray,
    pub profile: TransmittanceProfile,
    pub t_median: f64,
    pub valid: bool,
}

/// Builds the transmittance profile for one ray by brute-force gather with a
/// 3-standard-deviation bounding-sphere prefilter.
pub fn gather_profile(
    scene: &[GaussianPrimitive],
    ray: &Ray,
    t_near: f64,
) -> TransmittanceProfile {
    let mut entries = Vec::new();
    for (id, g) in scene.iter().enumerate() {
        let extent = 3.0 * g.scales().max();
        if ray.distance_to_point(&g.center()) > extent {
            continue;
        }
        let Ok(restriction) = restrict_to_ray(g, ray, id) else {
            continue;
        };
        if restriction.g_peak < PEAK_CUTOFF || restriction.t_star < t_near {
            continue;
        }
        entries.push(ProfileEntry {
            restriction,
            color: g.color(),
            normal: g.normal_facing(&ray.direction()),
        });
    }
    TransmittanceProfile::new(entries)
}

fn trace_pixel(
    scene: &[GaussianPrimitive],
    ray: Ray,
    options: &RenderOptions,
) -> (PixelTrace, PixelOutputs) {
    let profile = gather_profile(scene, &ray, options.t_near);
    let color = profile.composite_color();
    let normal = profile.composite_normal().unwrap_or_else(Vector3::zeros);
    let expected = expected_depth(&profile).unwrap_or(BACKGROUND_DEPTH);
    let (step, median, valid) = match initial_depth(&profile) {
        Some(t_init) => {
            let (t_med, valid) =
                median_depth(&profile, t_init, options.bracket_r, options.traversals);
            (t_init, t_med, valid)
        }
        None => (BACKGROUND_DEPTH, BACKGROUND_DEPTH, false),
    };
    let outputs = PixelOutputs {
        color,
        normal,
        expected,
        step,
        median,
        valid,
    };
    (
        PixelTrace {
            ray,
            profile,
            t_median: median,
            valid,
        },
        outputs,
    )
}

struct PixelOutputs {
    color: Vector3<f64>,
    normal: Vector3<f64>,
    expected: f64,
    step: f64,
    median: f64,
    valid: bool,
}

fn render_rows(
    scene: &[GaussianPrimitive],
    camera: &Camera,
    options: &RenderOptions,
) -> Vec<(PixelTrace, PixelOutputs)> {
    let width = camera.width;
    let height = camera.height;
    let run = || {
        (0..height)
            .into_par_iter()
            .flat_map_iter(|y| {
                (0..width).map(move |x| {
                    let ray = camera.ray_through_pixel(x, y);
                    trace_pixel(scene, ray, options)
                })
            })
            .collect::<Vec<_>>()
    };
    if options.workers > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(options.workers)
            .build()
            .expect("worker pool");
        pool.install(run)
    } else {
        run()
    }
}

/// Renders every channel of [`DepthRenderResult`] for one view.
/// Deterministic across runs and worker counts.
pub fn render_view(
    scene: &[GaussianPrimitive],
    camera: &Camera,
    options: &RenderOptions,
) -> DepthRenderResult {
    render_view_traced(scene, camera, options).0
}

/// [`render_view`] that also returns the per-pixel traces (row-major) needed
/// by the backward pass.
pub fn render_view_traced(
    scene: &[GaussianPrimitive],
    camera: &Camera,
    options: &RenderOptions,
) -> (DepthRenderResult, Vec<PixelTrace>) {
    let width = camera.width;
    let height = camera.height;
    let mut result = DepthRenderResult::background(width, height);
    let pixels = render_rows(scene, camera, options);
    let mut traces = Vec::with_capacity(pixels.len());
    for (idx, (trace, out)) in pixels.into_iter().enumerate() {
        let (x, y) = (idx % width, idx / width);
        result.color.set(x, y, out.color);
        result.normal.set(x, y, out.normal);
        result.expected_depth.set(x, y, out.expected);
        result.step_median_depth.set(x, y, out.step);
        result.median_depth.set(x, y, out.median);
        result.valid_mask.set(x, y, out.valid);
        traces.push(trace);
    }
    (result, traces)
}
