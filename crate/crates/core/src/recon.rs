//! OSEM reconstruction for `y ~ Poisson(Ax + r̄)` with a triple-energy-window
//! scatter mean.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::ImageVolume;
use crate::projector::SystemModel;
use crate::simulate::{ProjectionKind, ProjectionStack};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconConfig {
    pub n_subsets: usize,
    pub n_iterations: usize,
    pub init_value: f32,
    /// Updated voxels below this are set to zero.
    pub eps_x: f64,
    /// Added to every expected count in the ratio denominator.
    pub eps_d: f64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        ReconConfig { n_subsets: 6, n_iterations: 16, init_value: 1.0, eps_x: 1e-12, eps_d: 1e-12 }
    }
}

/// Scatter mean in the photopeak from the two adjacent windows (trapezoid rule).
pub fn tew_scatter_estimate(
    lower: &ProjectionStack,
    upper: &ProjectionStack,
    w_low: f64,
    w_up: f64,
    w_peak: f64,
) -> Result<ProjectionStack> {
    if !(w_low > 0.0 && w_up > 0.0 && w_peak > 0.0) {
        return Err(Error::invalid("window widths must be positive"));
    }
    if lower.views != upper.views || lower.data.len() != upper.data.len() {
        return Err(Error::invalid("scatter windows must cover the same views"));
    }
    let data = lower
        .window(0)
        .iter()
        .zip(upper.window(0))
        .map(|(&cl, &cu)| ((cl as f64 / w_low + cu as f64 / w_up) * w_peak / 2.0).max(0.0) as f32)
        .collect();
    Ok(ProjectionStack {
        geometry: lower.geometry.clone(),
        views: lower.views.clone(),
        n_windows: 1,
        kind: ProjectionKind::Mean,
        data,
    })
}

/// `Σ y log ŷ − ŷ`; pixels with `ŷ ≤ eps` and `y = 0` contribute nothing.
pub fn poisson_loglik(y: &[f32], yhat: &[f64], eps: f64) -> Result<f64> {
    if y.len() != yhat.len() {
        return Err(Error::invalid("data and mean lengths differ"));
    }
    let mut acc = 0.0;
    for (&yi, &mi) in y.iter().zip(yhat) {
        if mi <= eps {
            if yi > 0.0 {
                return Err(Error::numeric("zero expected counts where counts were observed"));
            }
            continue;
        }
        acc += if yi > 0.0 { yi as f64 * mi.ln() - mi } else { -mi };
    }
    Ok(acc)
}

pub struct OsemOutput {
    pub image: ImageVolume,
    /// Voxels seen by at least one view; the rest stay at the initial value.
    pub support: Vec<bool>,
}

/// Interleaved subsets over angle-sorted views: view of rank `k` goes to
/// subset `k mod n_subsets`.
pub fn ordered_subsets(model: &SystemModel, views: &[usize], n_subsets: usize) -> Result<Vec<Vec<usize>>> {
    if n_subsets == 0 || n_subsets > views.len() {
        return Err(Error::invalid(format!(
            "{n_subsets} subsets leave empty subsets for {} views",
            views.len()
        )));
    }
    let g = model.geometry();
    let mut sorted = views.to_vec();
    sorted.sort_by(|&a, &b| g.view_angles_deg[a].total_cmp(&g.view_angles_deg[b]));
    let mut subsets = vec![Vec::new(); n_subsets];
    for (rank, v) in sorted.into_iter().enumerate() {
        subsets[rank % n_subsets].push(v);
    }
    Ok(subsets)
}

pub fn osem(
    y: &ProjectionStack,
    rbar: &ProjectionStack,
    model: &SystemModel,
    config: &ReconConfig,
) -> Result<OsemOutput> {
    osem_with(y, rbar, model, config, |_, _| {})
}

/// OSEM from the uniform start, calling `on_iteration(k, image)` after each
/// full iteration `k` (1-based).
pub fn osem_with<F>(
    y: &ProjectionStack,
    rbar: &ProjectionStack,
    model: &SystemModel,
    config: &ReconConfig,
    on_iteration: F,
) -> Result<OsemOutput>
where
    F: FnMut(usize, &ImageVolume),
{
    if !(config.init_value > 0.0) {
        return Err(Error::invalid("initial value must be positive"));
    }
    let init = ImageVolume::filled(model.grid_dims(), model.voxel_mm(), config.init_value);
    osem_from(y, rbar, model, config, init, on_iteration)
}

/// OSEM starting from `init`.
pub fn osem_from<F>(
    y: &ProjectionStack,
    rbar: &ProjectionStack,
    model: &SystemModel,
    config: &ReconConfig,
    init: ImageVolume,
    mut on_iteration: F,
) -> Result<OsemOutput>
where
    F: FnMut(usize, &ImageVolume),
{
    if y.views.is_empty() {
        return Err(Error::invalid("no views to reconstruct from"));
    }
    if rbar.views != y.views || rbar.window(0).len() != y.window(0).len() {
        return Err(Error::invalid("scatter mean must match the data views"));
    }
    let g = model.geometry();
    if y.geometry.det_nu != g.det_nu || y.geometry.det_nv != g.det_nv {
        return Err(Error::invalid("data detector size does not match the model"));
    }
    if y.window(0).iter().any(|&v| !(v >= 0.0)) || rbar.window(0).iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::invalid("data and scatter mean must be nonnegative"));
    }
    if init.dims != model.grid_dims() || init.values.iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::invalid("initial image must be nonnegative on the model grid"));
    }
    let pix = g.pixels_per_view();
    let subsets = ordered_subsets(model, &y.views, config.n_subsets)?;
    let positions: Vec<Vec<usize>> = subsets
        .iter()
        .map(|s| s.iter().map(|&v| y.position_of(v).unwrap_or(usize::MAX)).collect())
        .collect();
    let gather = |src: &[f32], pos: &[usize]| -> Vec<f32> {
        pos.iter().flat_map(|&p| src[p * pix..(p + 1) * pix].iter().copied()).collect()
    };
    let y_sub: Vec<Vec<f32>> = positions.iter().map(|p| gather(y.window(0), p)).collect();
    let r_sub: Vec<Vec<f32>> = positions.iter().map(|p| gather(rbar.window(0), p)).collect();
    let sens: Vec<Vec<f64>> = subsets
        .iter()
        .map(|s| model.back_raw(&vec![1f32; s.len() * pix], s))
        .collect();
    let support: Vec<bool> =
        (0..sens[0].len()).map(|j| sens.iter().any(|s| s[j] > 0.0)).collect();

    let mut image = init;
    for iter in 1..=config.n_iterations {
        for (s, views) in subsets.iter().enumerate() {
            let ax = model.forward_raw(&image.values, views);
            let ratio: Vec<f32> = y_sub[s]
                .iter()
                .zip(&ax)
                .zip(&r_sub[s])
                .map(|((&yi, &a), &r)| (yi as f64 / (a as f64 + r as f64 + config.eps_d)) as f32)
                .collect();
            let back = model.back_raw(&ratio, views);
            for ((x, &b), &sj) in image.values.iter_mut().zip(&back).zip(&sens[s]) {
                if sj > 0.0 {
                    let next = *x as f64 * b / sj;
                    if !next.is_finite() {
                        return Err(Error::numeric(format!("non-finite OSEM update at iteration {iter}")));
                    }
                    *x = if next < config.eps_x { 0.0 } else { next as f32 };
                }
            }
        }
        on_iteration(iter, &image);
    }
    Ok(OsemOutput { image, support })
}
