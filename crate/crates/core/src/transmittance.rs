//! Continuous transmittance of stochastic Gaussian solids along a ray and the
//! color/normal compositors.
//!
//! Per-Gaussian transmittance:
//!
//! ```text
//! T_i(t) = v_i(t)              for t <= t*_i
//!        = v_i(t*_i)^2 / v_i(t) for t >  t*_i
//! ```
//!
//! with `v(t) = sqrt(1 - G(t))`. The total transmittance is the product over
//! the (independently treated) Gaussians; its endpoint `T(+inf)` equals the
//! classical compositing residual `prod(1 - alpha_i)`.

use nalgebra::Vector3;

use crate::geom::{RayRestriction, PEAK_CUTOFF};

/// One Gaussian's contribution to a ray: its restriction plus the color and
/// camera-facing unit normal used by the compositors.
#[derive(Debug, Clone)]
pub struct ProfileEntry {
    pub restriction: RayRestriction,
    pub color: Vector3<f64>,
    pub normal: Vector3<f64>,
}

/// Ordered restrictions for one ray, sorted ascending by `t_star` with ties
/// broken by `gaussian_id`. Entries with `g_peak < PEAK_CUTOFF` are dropped
/// at construction.
#[derive(Debug, Clone, Default)]
pub struct TransmittanceProfile {
    entries: Vec<ProfileEntry>,
}

impl TransmittanceProfile {
    pub fn new(mut entries: Vec<ProfileEntry>) -> Self {
        entries.retain(|e| e.restriction.g_peak >= PEAK_CUTOFF);
        entries.sort_by(|a, b| {
            a.restriction
                .t_star
                .partial_cmp(&b.restriction.t_star)
                .unwrap()
                .then(a.restriction.gaussian_id.cmp(&b.restriction.gaussian_id))
        });
        Self { entries }
    }

    pub fn entries(&self) -> &[ProfileEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Total transmittance `T(t) = prod_i T_i(t)`, in `(0, 1]`.
    pub fn total_transmittance(&self, t: f64) -> f64 {
        self.entries
            .iter()
            .map(|e| ti(&e.restriction, t))
            .product()
    }

    /// `T(+inf) = prod_i (1 - alpha_i)`, the residual transparency.
    pub fn residual_transparency(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| 1.0 - e.restriction.g_peak)
            .product()
    }

    /// Front-to-back compositing weights `w_i = alpha_i prod_{j<i}(1 - alpha_j)`
    /// with `alpha_i = g_peak_i`.
    pub fn compositing_weights(&self) -> Vec<f64> {
        let mut weights = Vec::with_capacity(self.entries.len());
        let mut residual = 1.0;
        for e in &self.entries {
            let alpha = e.restriction.g_peak;
            weights.push(alpha * residual);
            residual *= 1.0 - alpha;
        }
        weights
    }

    /// Standard front-to-back alpha blending of the entry colors.
    pub fn composite_color(&self) -> Vector3<f64> {
        let weights = self.compositing_weights();
        let mut c = Vector3::zeros();
        for (e, w) in self.entries.iter().zip(&weights) {
            c += e.color * *w;
        }
        c
    }

    /// Compositing-weighted normal, renormalized. `None` when the weighted
    /// sum has (near-)zero norm.
    pub fn composite_normal(&self) -> Option<Vector3<f64>> {
        let weights = self.compositing_weights();
        let mut m = Vector3::zeros();
        for (e, w) in self.entries.iter().zip(&weights) {
            m += e.normal * *w;
        }
        let n = m.norm();
        if n < 1e-12 {
            None
        } else {
            Some(m / n)
        }
    }
}

/// Per-Gaussian transmittance `T_i(t)`; continuous and non-increasing with
/// `T_i(-inf) = 1` and `T_i(+inf) = 1 - g_peak`.
pub fn ti(restriction: &RayRestriction, t: f64) -> f64 {
    if t <= restriction.t_star {
        restriction.vacancy(t)
    } else {
        // v(t_star)^2 = 1 - g_peak exactly.
        (1.0 - restriction.g_peak) / restriction.vacancy(t)
    }
}

/// Exact single-Gaussian rendering: `C = c * G(t*) = c * (1 - v(t*)^2)`.
pub fn single_gaussian_color(restriction: &RayRestriction, c: &Vector3<f64>) -> Vector3<f64> {
    c * restriction.g_peak
}
