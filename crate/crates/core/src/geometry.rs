//! Acquisition geometry, view down-sampling and the normalized coordinate
//! grids fed to the field model.
//!
//! Conventions used across the crate:
//! - view `k` sits at angle `view_angles_deg[k]`, measured counter-clockwise;
//!   the detector normal (pointing from the rotation axis to the detector) is
//!   `(-sin θ, cos θ)` in the transaxial plane and the detector `u` axis runs
//!   along `(cos θ, sin θ)`;
//! - detector `v` is the axial direction and coincides with volume axis `z`;
//! - projection pixels are stored `u`-major, `v` contiguous.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Planned detector orbit. The orbit is known for every angle, measured or not.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Orbit {
    Circular { radius_mm: f64 },
    /// Body-contouring approximation: the detector face touches an ellipse
    /// with semi-axes `semi_x_mm` (along x) and `semi_y_mm` (along y), offset
    /// by `clearance_mm`.
    Elliptical { semi_x_mm: f64, semi_y_mm: f64, clearance_mm: f64 },
}

impl Orbit {
    /// Distance from the rotation axis to the detector face at `theta` (radians).
    pub fn radial_at(&self, theta: f64) -> f64 {
        match *self {
            Orbit::Circular { radius_mm } => radius_mm,
            Orbit::Elliptical { semi_x_mm, semi_y_mm, clearance_mm } => {
                // support function of the ellipse along the detector normal
                let (s, c) = theta.sin_cos();
                (semi_x_mm * semi_x_mm * s * s + semi_y_mm * semi_y_mm * c * c).sqrt()
                    + clearance_mm
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Orbit::Circular { radius_mm } => radius_mm > 0.0,
            Orbit::Elliptical { semi_x_mm, semi_y_mm, clearance_mm } => {
                semi_x_mm > 0.0 && semi_y_mm > 0.0 && clearance_mm >= 0.0
            }
        };
        if ok && self.is_finite() {
            Ok(())
        } else {
            Err(Error::invalid(format!("orbit dimensions must be positive: {self:?}")))
        }
    }

    fn is_finite(&self) -> bool {
        match *self {
            Orbit::Circular { radius_mm } => radius_mm.is_finite(),
            Orbit::Elliptical { semi_x_mm, semi_y_mm, clearance_mm } => {
                semi_x_mm.is_finite() && semi_y_mm.is_finite() && clearance_mm.is_finite()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanGeometry {
    pub view_angles_deg: Vec<f64>,
    pub radial_mm: Vec<f64>,
    pub det_nu: usize,
    pub det_nv: usize,
    pub det_pixel_mm: f64,
    /// Photopeak first, then scatter windows.
    pub n_windows: usize,
}

impl ScanGeometry {
    /// Uniformly spaced views over 360°, starting at 0°.
    pub fn new(
        n_views: usize,
        orbit: Orbit,
        det_nu: usize,
        det_nv: usize,
        det_pixel_mm: f64,
        n_windows: usize,
    ) -> Result<Self> {
        if n_views < 2 {
            return Err(Error::invalid(format!("need at least 2 views, got {n_views}")));
        }
        orbit.validate()?;
        let step = 360.0 / n_views as f64;
        let view_angles_deg: Vec<f64> = (0..n_views).map(|k| k as f64 * step).collect();
        let radial_mm = view_angles_deg.iter().map(|a| orbit.radial_at(a.to_radians())).collect();
        let g = ScanGeometry { view_angles_deg, radial_mm, det_nu, det_nv, det_pixel_mm, n_windows };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.view_angles_deg.len();
        if n < 2 {
            return Err(Error::invalid("geometry needs at least 2 views"));
        }
        if self.radial_mm.len() != n {
            return Err(Error::invalid(format!(
                "{} view angles but {} radial positions",
                n,
                self.radial_mm.len()
            )));
        }
        let ascending = self.view_angles_deg.windows(2).all(|w| w[0] < w[1]);
        let in_range = self.view_angles_deg.iter().all(|&a| (0.0..360.0).contains(&a));
        if !ascending || !in_range {
            return Err(Error::invalid("view angles must be strictly ascending in [0, 360)"));
        }
        if self.radial_mm.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(Error::invalid("radial positions must be positive"));
        }
        if self.det_nu < 8 || self.det_nv < 8 {
            return Err(Error::invalid(format!(
                "detector must be at least 8x8, got {}x{}",
                self.det_nu, self.det_nv
            )));
        }
        if !(self.det_pixel_mm > 0.0 && self.det_pixel_mm.is_finite()) {
            return Err(Error::invalid("detector pixel pitch must be positive"));
        }
        if self.n_windows < 1 {
            return Err(Error::invalid("need at least one energy window"));
        }
        Ok(())
    }

    pub fn n_views(&self) -> usize {
        self.view_angles_deg.len()
    }

    pub fn pixels_per_view(&self) -> usize {
        self.det_nu * self.det_nv
    }

    pub fn angle_rad(&self, view: usize) -> f64 {
        self.view_angles_deg[view].to_radians()
    }

    pub fn max_radial_mm(&self) -> f64 {
        self.radial_mm.iter().copied().fold(0.0, f64::max)
    }

    fn check_view(&self, view: usize) -> Result<()> {
        if view < self.n_views() {
            Ok(())
        } else {
            Err(Error::invalid(format!("view {view} out of range (n_views = {})", self.n_views())))
        }
    }
}

/// Shorthand for [`ScanGeometry::new`].
pub fn make_geometry(
    n_views: usize,
    orbit: Orbit,
    det_nu: usize,
    det_nv: usize,
    det_pixel_mm: f64,
    n_windows: usize,
) -> Result<ScanGeometry> {
    ScanGeometry::new(n_views, orbit, det_nu, det_nv, det_pixel_mm, n_windows)
}

/// Partition of the planned views into acquired (`measured`) and skipped ones.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewSplit {
    pub df: usize,
    pub measured: Vec<usize>,
    pub skipped: Vec<usize>,
}

/// Keep every `df`-th view starting at view 0.
pub fn split_views(geometry: &ScanGeometry, df: usize) -> Result<ViewSplit> {
    let n = geometry.n_views();
    if df < 1 || df > n {
        return Err(Error::invalid(format!("down-sampling factor {df} outside [1, {n}]")));
    }
    let (measured, skipped) = (0..n).partition(|k| k % df == 0);
    Ok(ViewSplit { df, measured, skipped })
}

/// One network input: detector position, view direction and orbit radius.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordinateSample {
    pub u: f32,
    pub v: f32,
    pub sin_theta: f32,
    pub cos_theta: f32,
    pub r: f32,
}

impl CoordinateSample {
    pub fn to_array(self) -> [f32; 5] {
        [self.u, self.v, self.sin_theta, self.cos_theta, self.r]
    }
}

/// Pixel center `i` of `n` mapped linearly onto [-1, 1].
pub(crate) fn centered_coord(i: usize, n: usize) -> f32 {
    ((2 * i + 1) as f64 / n as f64 - 1.0) as f32
}

/// Coordinates of every pixel of `view` on a detector grid refined by
/// `upsample`, in row-major (`u` outer, `v` inner) order.
pub fn coordinate_grid(
    geometry: &ScanGeometry,
    view: usize,
    upsample: usize,
) -> Result<Vec<CoordinateSample>> {
    geometry.check_view(view)?;
    if upsample < 1 {
        return Err(Error::invalid("upsample factor must be at least 1"));
    }
    let nu = geometry.det_nu * upsample;
    let nv = geometry.det_nv * upsample;
    let (s, c) = geometry.angle_rad(view).sin_cos();
    let r = (geometry.radial_mm[view] / geometry.max_radial_mm()) as f32;
    let vs: Vec<f32> = (0..nv).map(|j| centered_coord(j, nv)).collect();
    let mut out = Vec::with_capacity(nu * nv);
    for i in 0..nu {
        let u = centered_coord(i, nu);
        out.extend(vs.iter().map(|&v| CoordinateSample {
            u,
            v,
            sin_theta: s as f32,
            cos_theta: c as f32,
            r,
        }));
    }
    Ok(out)
}
