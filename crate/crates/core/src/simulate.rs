//! Noisy multi-window acquisitions of a digital phantom.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ScanGeometry, ViewSplit};
use crate::par;
use crate::phantom::ImageVolume;
use crate::projector::{blur_plane, forward_project, gaussian_kernel, SystemModel};

pub const WINDOW_LABELS: [&str; 3] = ["peak", "lower", "upper"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionKind {
    Mean,
    Sampled,
    Synthesized,
}

/// Per-window stacks of detector views, `[window][view][u][v]`.
///
/// `views[k]` is the geometry view index of the `k`-th stored view, so a
/// stack can hold any subset of the planned views.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionStack {
    pub geometry: ScanGeometry,
    pub views: Vec<usize>,
    pub n_windows: usize,
    pub kind: ProjectionKind,
    pub data: Vec<f32>,
}

impl ProjectionStack {
    pub fn new(
        geometry: ScanGeometry,
        views: Vec<usize>,
        n_windows: usize,
        kind: ProjectionKind,
        data: Vec<f32>,
    ) -> Result<Self> {
        let s = ProjectionStack { geometry, views, n_windows, kind, data };
        s.validate()?;
        Ok(s)
    }

    pub fn zeros(geometry: ScanGeometry, views: Vec<usize>, n_windows: usize, kind: ProjectionKind) -> Self {
        let len = n_windows * views.len() * geometry.pixels_per_view();
        ProjectionStack { geometry, views, n_windows, kind, data: vec![0.0; len] }
    }

    pub fn validate(&self) -> Result<()> {
        let expect = self.n_windows * self.views.len() * self.geometry.pixels_per_view();
        if self.data.len() != expect {
            return Err(Error::invalid(format!(
                "stack of {} windows x {} views needs {expect} values, got {}",
                self.n_windows,
                self.views.len(),
                self.data.len()
            )));
        }
        if self.n_windows == 0 {
            return Err(Error::invalid("stack needs at least one window"));
        }
        if let Some(v) = self.views.iter().find(|&&v| v >= self.geometry.n_views()) {
            return Err(Error::invalid(format!("stack references view {v} outside the geometry")));
        }
        match self.kind {
            ProjectionKind::Mean if self.data.iter().any(|&x| !(x >= 0.0 && x.is_finite())) => {
                Err(Error::invalid("mean projections must be finite and nonnegative"))
            }
            ProjectionKind::Sampled if self.data.iter().any(|&x| !(x >= 0.0) || x.fract() != 0.0) => {
                Err(Error::invalid("sampled projections must be nonnegative integers"))
            }
            _ => Ok(()),
        }
    }

    pub fn n_stack_views(&self) -> usize {
        self.views.len()
    }

    fn window_len(&self) -> usize {
        self.views.len() * self.geometry.pixels_per_view()
    }

    pub fn window(&self, w: usize) -> &[f32] {
        let n = self.window_len();
        &self.data[w * n..(w + 1) * n]
    }

    pub fn window_mut(&mut self, w: usize) -> &mut [f32] {
        let n = self.window_len();
        &mut self.data[w * n..(w + 1) * n]
    }

    /// View at stack position `pos` (not geometry index) of window `w`.
    pub fn view(&self, w: usize, pos: usize) -> &[f32] {
        let pix = self.geometry.pixels_per_view();
        &self.window(w)[pos * pix..(pos + 1) * pix]
    }

    pub fn view_mut(&mut self, w: usize, pos: usize) -> &mut [f32] {
        let pix = self.geometry.pixels_per_view();
        let n = self.window_len();
        &mut self.data[w * n + pos * pix..w * n + (pos + 1) * pix]
    }

    pub fn position_of(&self, view: usize) -> Option<usize> {
        self.views.iter().position(|&v| v == view)
    }

    /// Sub-stack holding `views` (geometry indices, in the given order).
    pub fn restrict(&self, views: &[usize]) -> Result<Self> {
        let pos: Vec<usize> = views
            .iter()
            .map(|&v| self.position_of(v).ok_or_else(|| Error::invalid(format!("view {v} not in stack"))))
            .collect::<Result<_>>()?;
        let mut data = Vec::with_capacity(self.n_windows * views.len() * self.geometry.pixels_per_view());
        for w in 0..self.n_windows {
            for &p in &pos {
                data.extend_from_slice(self.view(w, p));
            }
        }
        Ok(ProjectionStack {
            geometry: self.geometry.clone(),
            views: views.to_vec(),
            n_windows: self.n_windows,
            kind: self.kind,
            data,
        })
    }

    /// Single-window stack made of window `w`.
    pub fn select_window(&self, w: usize) -> Self {
        ProjectionStack {
            geometry: self.geometry.clone(),
            views: self.views.clone(),
            n_windows: 1,
            kind: self.kind,
            data: self.window(w).to_vec(),
        }
    }

    pub fn window_sum(&self, w: usize) -> f64 {
        self.window(w).iter().map(|&x| x as f64).sum()
    }
}

/// Scatter model and energy-window layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScatterParams {
    pub scatter_fraction: f64,
    pub blur_sigma_mm: f64,
    /// Window widths in keV.
    pub w_peak: f64,
    pub w_low: f64,
    pub w_up: f64,
    pub kappa_low: f64,
    pub kappa_up: f64,
}

impl Default for ScatterParams {
    /// 20 % photopeak at 208 keV (41.6 keV wide) and two 10 % side windows.
    fn default() -> Self {
        ScatterParams {
            scatter_fraction: 0.3,
            blur_sigma_mm: 20.0,
            w_peak: 41.6,
            w_low: 20.8,
            w_up: 20.8,
            kappa_low: 1.0,
            kappa_up: 1.0,
        }
    }
}

impl ScatterParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.scatter_fraction) {
            return Err(Error::invalid("scatter fraction must lie in [0, 1)"));
        }
        if !(self.w_peak > 0.0 && self.w_low > 0.0 && self.w_up > 0.0) {
            return Err(Error::invalid("window widths must be positive"));
        }
        if !(self.blur_sigma_mm >= 0.0 && self.kappa_low >= 0.0 && self.kappa_up >= 0.0) {
            return Err(Error::invalid("blur width and leakage factors must be nonnegative"));
        }
        Ok(())
    }
}

/// Scale every window so the photopeak totals `target_total`; returns the
/// factor applied.
pub fn scale_to_counts(mean: &ProjectionStack, target_total: f64) -> Result<(ProjectionStack, f64)> {
    let total = mean.window_sum(0);
    if !(total > 0.0) {
        return Err(Error::invalid("cannot scale an all-zero stack"));
    }
    if !(target_total > 0.0 && target_total.is_finite()) {
        return Err(Error::invalid("target count total must be positive"));
    }
    let factor = target_total / total;
    let mut out = mean.clone();
    out.data.iter_mut().for_each(|x| *x = (*x as f64 * factor) as f32);
    Ok((out, factor))
}

pub struct ScatterWindows {
    /// Scatter mean inside the photopeak window.
    pub peak: ProjectionStack,
    pub lower: ProjectionStack,
    pub upper: ProjectionStack,
}

/// Scatter as a blurred, scaled copy of the primary, plus side-window counts
/// built so the triple-energy-window estimate returns the photopeak scatter
/// when both leakage factors are 1.
pub fn simulate_scatter(primary: &ProjectionStack, params: &ScatterParams) -> Result<ScatterWindows> {
    params.validate()?;
    if primary.data.iter().any(|&x| x < 0.0) {
        return Err(Error::invalid("primary projections must be nonnegative"));
    }
    let g = &primary.geometry;
    let (nu, nv) = (g.det_nu, g.det_nv);
    let kernel = gaussian_kernel(params.blur_sigma_mm / g.det_pixel_mm);
    let mut peak = primary.select_window(0);
    peak.kind = ProjectionKind::Mean;
    let mut plane = vec![0f64; nu * nv];
    let mut tmp = Vec::new();
    for pos in 0..peak.n_stack_views() {
        let view = peak.view_mut(0, pos);
        plane.iter_mut().zip(view.iter()).for_each(|(p, &v)| *p = v as f64);
        blur_plane(&mut plane, nu, nv, &kernel, &mut tmp);
        view.iter_mut()
            .zip(&plane)
            .for_each(|(v, &p)| *v = (params.scatter_fraction * p) as f32);
    }
    let side = |kappa: f64, width: f64| {
        let mut s = peak.clone();
        let f = kappa * width / params.w_peak;
        s.data.iter_mut().for_each(|x| *x = (*x as f64 * f) as f32);
        s
    };
    let lower = side(params.kappa_low, params.w_low);
    let upper = side(params.kappa_up, params.w_up);
    Ok(ScatterWindows { peak, lower, upper })
}

/// Independent Poisson draws per pixel; stream `(window, view)` of a
/// ChaCha generator keyed by `seed`, so results do not depend on threading.
pub fn poisson_sample(mean: &ProjectionStack, seed: u64) -> Result<ProjectionStack> {
    if mean.data.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
        return Err(Error::invalid("Poisson means must be finite and nonnegative"));
    }
    let pix = mean.geometry.pixels_per_view();
    let nviews = mean.n_stack_views();
    let n_geom = mean.geometry.n_views() as u64;
    let blocks = par::map_collect(mean.n_windows * nviews, |block| {
        let (w, pos) = (block / nviews, block % nviews);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(w as u64 * n_geom + mean.views[pos] as u64);
        mean.view(w, pos)
            .iter()
            .map(|&lambda| {
                if lambda > 0.0 {
                    // lambda > 0 and finite, so construction cannot fail
                    Poisson::new(lambda as f64).map(|d| d.sample(&mut rng) as f32).unwrap_or(0.0)
                } else {
                    0.0
                }
            })
            .collect::<Vec<f32>>()
    });
    debug_assert!(blocks.iter().all(|b| b.len() == pix));
    Ok(ProjectionStack {
        geometry: mean.geometry.clone(),
        views: mean.views.clone(),
        n_windows: mean.n_windows,
        kind: ProjectionKind::Sampled,
        data: blocks.concat(),
    })
}

/// Everything produced by one simulated acquisition.
pub struct Acquisition {
    /// Noise-free mean of all windows, all views (after count scaling).
    pub mean: ProjectionStack,
    /// Photopeak scatter mean, all views.
    pub scatter_truth: ProjectionStack,
    pub full_scan: ProjectionStack,
    pub measured: ProjectionStack,
    /// Model calibration that maps the phantom's activity to the scaled counts.
    pub calibration: f64,
}

/// Simulate a full three-window scan and restrict it to the measured views.
/// Skipped views of `full_scan` are evaluation truth only.
pub fn acquire(
    activity: &ImageVolume,
    model: &SystemModel,
    params: &ScatterParams,
    target_counts: Option<f64>,
    split: &ViewSplit,
    seed: u64,
) -> Result<Acquisition> {
    let g = model.geometry();
    if g.n_windows != 3 {
        return Err(Error::invalid("acquisition needs photopeak plus two scatter windows"));
    }
    let all: Vec<usize> = (0..g.n_views()).collect();
    let primary = forward_project(activity, model, &all)?;
    let scatter = simulate_scatter(&primary, params)?;
    let mut data = Vec::with_capacity(3 * primary.data.len());
    data.extend(primary.data.iter().zip(&scatter.peak.data).map(|(&p, &s)| p + s));
    data.extend_from_slice(&scatter.lower.data);
    data.extend_from_slice(&scatter.upper.data);
    let mean = ProjectionStack::new(g.clone(), all, 3, ProjectionKind::Mean, data)?;
    let (mean, factor) = match target_counts {
        Some(t) => scale_to_counts(&mean, t)?,
        None => (mean, 1.0),
    };
    let mut scatter_truth = scatter.peak;
    scatter_truth.data.iter_mut().for_each(|x| *x = (*x as f64 * factor) as f32);
    let full_scan = poisson_sample(&mean, seed)?;
    let measured = full_scan.restrict(&split.measured)?;
    Ok(Acquisition { mean, scatter_truth, full_scan, measured, calibration: model.calibration() * factor })
}
