//! Desk-scale training loop: fixed primitive count, first-order updates with
//! optional momentum, and scheduled activation of the geometric terms.
//!
//! Constrained quantities are optimized in unconstrained coordinates: scales
//! in log-space, opacity in logit-space (clamped to the valid open range),
//! and rotations as raw quaternions renormalized after every step.

use nalgebra::{Vector3, Vector4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::depth::{render_view_traced, PixelTrace, RenderOptions};
use crate::geom::{quat_wxyz, Camera, GaussianPrimitive, OPACITY_EPS};
use crate::grad::{
    composite_color_backward, composite_normal_backward, traces_depth_backward, GradError,
    GradientBuffer, ParamGrad,
};
use crate::img::{ImageF, ImageRgb};
use crate::losses::{
    depth_to_normal, multiview_loss_backward, normal_consistency_backward,
    normal_consistency_loss, photometric_backward_rgb, LossError, LossWeights, MultiviewInputs,
    RenderedGeometry,
};

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error("training needs a non-empty scene")]
    EmptyScene,
    #[error("training needs at least one view (two for multi-view terms)")]
    TooFewViews,
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("loss term failed: {0}")]
    Loss(#[from] LossError),
    #[error("gradient failed: {0}")]
    Grad(#[from] GradError),
    #[error("non-finite loss at iteration {iteration}; last good state attached")]
    NonFiniteLoss {
        iteration: usize,
        checkpoint: Box<(Vec<GaussianPrimitive>, MetricsLog)>,
    },
}

/// Per-parameter-group learning rates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearningRates {
    pub center: f64,
    /// Applied in log-scale space.
    pub log_scale: f64,
    /// Applied to raw quaternion components before renormalization.
    pub rotation: f64,
    /// Applied in logit-opacity space.
    pub opacity: f64,
    pub color: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            center: 2e-3,
            log_scale: 5e-3,
            rotation: 1e-3,
            opacity: 2e-2,
            color: 2e-2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub rates: LearningRates,
    /// Momentum coefficient in [0, 1); 0 disables it.
    pub momentum: f64,
    /// Iteration at which the normal-consistency and multi-view terms turn
    /// on. The full-scale schedule enables them late; desk-scale runs scale
    /// this down proportionally.
    pub geometric_start_iter: usize,
    pub weights: LossWeights,
    pub seed: u64,
    /// Views rendered per iteration; 0 renders all of them.
    pub views_per_iter: usize,
    /// Worker threads for rendering/backward; 0 uses the ambient pool.
    pub workers: usize,
    /// Median-search options shared by all renders.
    pub bracket_r: f64,
    pub traversals: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            rates: LearningRates::default(),
            momentum: 0.9,
            geometric_start_iter: 50,
            weights: LossWeights::default(),
            seed: 0,
            views_per_iter: 0,
            workers: 0,
            bracket_r: crate::depth::DEFAULT_BRACKET_R,
            traversals: crate::depth::DEFAULT_TRAVERSALS,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), OptimizeError> {
        let r = &self.rates;
        for (name, v) in [
            ("center", r.center),
            ("log_scale", r.log_scale),
            ("rotation", r.rotation),
            ("opacity", r.opacity),
            ("color", r.color),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(OptimizeError::BadConfig(format!(
                    "learning rate '{name}' must be finite and >= 0, got {v}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(OptimizeError::BadConfig(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.geometric_start_iter > self.iterations {
            return Err(OptimizeError::BadConfig(
                "geometric_start_iter must be <= iterations".into(),
            ));
        }
        Ok(())
    }

    /// Stable hex digest of the serialized config, stored in checkpoints.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn render_options(&self) -> RenderOptions {
        RenderOptions {
            bracket_r: self.bracket_r,
            traversals: self.traversals,
            workers: self.workers,
            ..RenderOptions::default()
        }
    }
}

/// One observed view: a posed camera and its target image.
#[derive(Debug, Clone)]
pub struct TrainView {
    pub camera: Camera,
    pub image: ImageRgb,
}

/// Per-iteration scalars of one training run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub total_loss: f64,
    pub photometric: f64,
    pub normal: f64,
    pub multiview: f64,
    pub mean_cycle_error: f64,
    /// Mean |T(t_med) - 1/2| over valid pixels: how precisely the median
    /// search hit the crossing.
    pub mean_median_residual: f64,
    pub degenerate_pixels: usize,
}

pub type MetricsLog = Vec<IterationRecord>;

/// Unconstrained master parameters of one primitive.
#[derive(Debug, Clone)]
struct RawParams {
    center: Vector3<f64>,
    log_scales: Vector3<f64>,
    quat: Vector4<f64>,
    opacity_logit: f64,
    color: Vector3<f64>,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Keep log-scales within a sane band so covariances stay well-conditioned.
const LOG_SCALE_MIN: f64 = -7.0;
const LOG_SCALE_MAX: f64 = 3.0;

impl RawParams {
    fn from_primitive(g: &GaussianPrimitive) -> Self {
        let q = g.rotation();
        Self {
            center: g.center(),
            log_scales: g.scales().map(f64::ln),
            quat: Vector4::new(q.w, q.i, q.j, q.k),
            opacity_logit: logit(g.opacity()),
            color: g.color(),
        }
    }

    fn to_primitive(&self) -> Result<GaussianPrimitive, OptimizeError> {
        let scales = self
            .log_scales
            .map(|v| v.clamp(LOG_SCALE_MIN, LOG_SCALE_MAX).exp());
        let opacity = sigmoid(self.opacity_logit)
            .clamp(OPACITY_EPS, 1.0 - OPACITY_EPS);
        let q = quat_wxyz(self.quat[0], self.quat[1], self.quat[2], self.quat[3]);
        let color = self.color.map(|c| c.clamp(0.0, 1.0));
        GaussianPrimitive::new(self.center, scales, q, opacity, color)
            .map_err(|e| OptimizeError::BadConfig(format!("parameters left valid set: {e}")))
    }

    /// First-order step from a natural-parameter gradient: chain into the
    /// unconstrained coordinates, blend with the velocity, and step.
    fn apply(&mut self, grad: &ParamGrad, velocity: &mut ParamGrad, config: &TrainConfig) {
        let scales = self.log_scales.map(|v| v.clamp(LOG_SCALE_MIN, LOG_SCALE_MAX).exp());
        let o = sigmoid(self.opacity_logit).clamp(OPACITY_EPS, 1.0 - OPACITY_EPS);
        let chained = ParamGrad {
            center: grad.center,
            scales: grad.scales.component_mul(&scales),
            rotation: grad.rotation,
            opacity: grad.opacity * o * (1.0 - o),
            color: grad.color,
        };
        let m = config.momentum;
        velocity.center = velocity.center * m + chained.center;
        velocity.scales = velocity.scales * m + chained.scales;
        velocity.rotation = velocity.rotation * m + chained.rotation;
        velocity.opacity = velocity.opacity * m + chained.opacity;
        velocity.color = velocity.color * m + chained.color;
        let r = &config.rates;
        self.center -= velocity.center * r.center;
        self.log_scales -= velocity.scales * r.log_scale;
        self.quat -= velocity.rotation * r.rotation;
        self.opacity_logit -= velocity.opacity * r.opacity;
        self.color -= velocity.color * r.color;
        // Clamp unconstrained coordinates so the decoded primitive is valid.
        self.log_scales = self.log_scales.map(|v| v.clamp(LOG_SCALE_MIN, LOG_SCALE_MAX));
        let logit_band = logit(1.0 - OPACITY_EPS);
        self.opacity_logit = self.opacity_logit.clamp(-logit_band, logit_band);
        self.color = self.color.map(|c| c.clamp(0.0, 1.0));
        // Renormalize; fall back to identity if the step annihilated it.
        let n = self.quat.norm();
        if n > 1e-12 {
            self.quat /= n;
        } else {
            self.quat = Vector4::new(1.0, 0.0, 0.0, 0.0);
        }
    }
}

struct RenderedView {
    result: crate::depth::DepthRenderResult,
    traces: Vec<PixelTrace>,
    gray: ImageF,
}

/// Runs the training loop. Returns the final scene and the per-iteration
/// metrics. A non-finite loss aborts with the last finite state attached.
pub fn train(
    scene: &[GaussianPrimitive],
    views: &[TrainView],
    config: &TrainConfig,
) -> Result<(Vec<GaussianPrimitive>, MetricsLog), OptimizeError> {
    config.validate()?;
    if scene.is_empty() {
        return Err(OptimizeError::EmptyScene);
    }
    if views.is_empty() {
        return Err(OptimizeError::TooFewViews);
    }
    let mut params: Vec<RawParams> = scene.iter().map(RawParams::from_primitive).collect();
    let mut velocity = vec![ParamGrad::zero(); scene.len()];
    let mut current: Vec<GaussianPrimitive> = scene.to_vec();
    let mut log: MetricsLog = Vec::with_capacity(config.iterations);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let options = config.render_options();
    let zero_rates = {
        let r = &config.rates;
        r.center == 0.0 && r.log_scale == 0.0 && r.rotation == 0.0 && r.opacity == 0.0
            && r.color == 0.0
    };

    for iteration in 0..config.iterations {
        // Deterministic view subset (the RNG is consumed every iteration so
        // the schedule does not depend on the subset size).
        let mut order: Vec<usize> = (0..views.len()).collect();
        order.shuffle(&mut rng);
        let take = if config.views_per_iter == 0 {
            views.len()
        } else {
            config.views_per_iter.min(views.len())
        };
        let mut selected: Vec<usize> = order.into_iter().take(take).collect();
        selected.sort_unstable();

        let geometric = iteration >= config.geometric_start_iter && views.len() >= 2;
        let mut buffer = GradientBuffer::new(current.len());
        let mut record = IterationRecord {
            iteration,
            ..IterationRecord::default()
        };

        // Render the selected views once; the multi-view term needs each
        // reference's neighbor, so render those too when geometry is on.
        let mut needed = selected.clone();
        if geometric {
            for &i in &selected {
                needed.push((i + 1) % views.len());
            }
            needed.sort_unstable();
            needed.dedup();
        }
        let mut rendered: Vec<Option<RenderedView>> = (0..views.len()).map(|_| None).collect();
        for &i in &needed {
            let (result, traces) = render_view_traced(&current, &views[i].camera, &options);
            let gray = views[i].image.to_gray();
            rendered[i] = Some(RenderedView {
                result,
                traces,
                gray,
            });
        }

        let mut residual_sum = 0.0;
        let mut residual_count = 0usize;
        let mut cycle_sum = 0.0;
        let mut cycle_count = 0usize;

        for &i in &selected {
            let view = &views[i];
            let rv = rendered[i].as_ref().expect("selected view rendered");
            let camera = &view.camera;
            let width = camera.width;

            // Photometric term over valid pixels.
            let (photo, dl_dcolor) = photometric_backward_rgb(
                &rv.result.color,
                &view.image,
                &rv.result.valid_mask,
                config.weights.lambda,
            )?;
            record.photometric += photo.total;
            for (idx, trace) in rv.traces.iter().enumerate() {
                let (x, y) = (idx % width, idx / width);
                if !rv.result.valid_mask.at(x, y) {
                    continue;
                }
                let g = dl_dcolor.at(x, y);
                if g != Vector3::zeros() {
                    composite_color_backward(&trace.profile, &current, &trace.ray, &g, &mut buffer)?;
                }
                residual_sum +=
                    (trace.profile.total_transmittance(trace.t_median) - 0.5).abs();
                residual_count += 1;
            }

            if geometric {
                // Normal consistency against the depth-derived normal
                // (treated as a constant).
                let (dnormal, dnormal_mask) =
                    depth_to_normal(&rv.result.median_depth, &rv.result.valid_mask, camera);
                for (idx, trace) in rv.traces.iter().enumerate() {
                    let (x, y) = (idx % width, idx / width);
                    if !dnormal_mask.at(x, y) {
                        continue;
                    }
                    let n_tilde = dnormal.at(x, y);
                    record.normal +=
                        config.weights.w_n * normal_consistency_loss(&trace.profile, &n_tilde);
                    normal_consistency_backward(
                        &trace.profile,
                        &current,
                        &trace.ray,
                        &n_tilde,
                        config.weights.w_n,
                        &mut buffer,
                    )?;
                }

                // Multi-view term against the ring neighbor.
                let nbr = (i + 1) % views.len();
                let nv = rendered[nbr].as_ref().expect("neighbor rendered");
                let inputs = MultiviewInputs {
                    ref_camera: camera,
                    nbr_camera: &views[nbr].camera,
                    ref_image: &rv.gray,
                    nbr_image: &nv.gray,
                    ref_geom: RenderedGeometry {
                        depth: &rv.result.median_depth,
                        mask: &rv.result.valid_mask,
                        normal: &rv.result.normal,
                    },
                    nbr_geom: RenderedGeometry {
                        depth: &nv.result.median_depth,
                        mask: &nv.result.valid_mask,
                        normal: &nv.result.normal,
                    },
                };
                let (stats, d_depth, d_normal) =
                    multiview_loss_backward(&inputs, &config.weights);
                record.multiview += stats.loss;
                if stats.valid_pixels > 0 {
                    cycle_sum += stats.mean_cycle_error * stats.valid_pixels as f64;
                    cycle_count += stats.valid_pixels;
                }
                let depth_grads =
                    traces_depth_backward(&current, &rv.traces, &d_depth, config.workers)?;
                buffer.merge(&depth_grads);
                for (idx, trace) in rv.traces.iter().enumerate() {
                    let (x, y) = (idx % width, idx / width);
                    let g = d_normal.at(x, y);
                    if g != Vector3::zeros() {
                        composite_normal_backward(
                            &trace.profile,
                            &current,
                            &trace.ray,
                            &g,
                            &mut buffer,
                        )?;
                    }
                }
            }
        }

        record.total_loss = record.photometric + record.normal + record.multiview;
        record.mean_median_residual = if residual_count > 0 {
            residual_sum / residual_count as f64
        } else {
            0.0
        };
        record.mean_cycle_error = if cycle_count > 0 {
            cycle_sum / cycle_count as f64
        } else {
            0.0
        };
        record.degenerate_pixels = buffer.degenerate_pixels;
        if !record.total_loss.is_finite() {
            return Err(OptimizeError::NonFiniteLoss {
                iteration,
                checkpoint: Box::new((current, log)),
            });
        }
        log.push(record);

        if zero_rates {
            continue;
        }
        buffer.project_rotations_to_tangent(&current);
        for ((p, g), v) in params.iter_mut().zip(buffer.grads()).zip(&mut velocity) {
            p.apply(g, v, config);
        }
        current = params
            .iter()
            .map(RawParams::to_primitive)
            .collect::<Result<_, _>>()?;
    }
    Ok((current, log))
}
