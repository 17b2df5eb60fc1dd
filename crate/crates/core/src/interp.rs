//! Linear angular interpolation baseline and assembly of the view sets used
//! by each reconstruction regime.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ScanGeometry, ViewSplit};
use crate::simulate::{ProjectionKind, ProjectionStack};

/// Which views a reconstruction sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Every planned view measured.
    Full,
    /// Measured subset only.
    Partial,
    /// Measured subset plus linearly interpolated skipped views.
    Linint,
    /// Measured subset plus field-synthesized skipped views.
    #[serde(alias = "field")]
    Nerf,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::Full, Regime::Partial, Regime::Linint, Regime::Nerf];
    pub const SPARSE: [Regime; 3] = [Regime::Partial, Regime::Linint, Regime::Nerf];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Full => "full",
            Regime::Partial => "partial",
            Regime::Linint => "linint",
            Regime::Nerf => "nerf",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Regime::Full),
            "partial" => Ok(Regime::Partial),
            "linint" => Ok(Regime::Linint),
            "nerf" | "field" => Ok(Regime::Nerf),
            other => Err(Error::invalid(format!("unknown regime `{other}`"))),
        }
    }
}

/// Bracketing measured views of angle `theta` on the circle:
/// `(lower_pos, upper_pos, weight of upper)`. Positions index `angles`.
fn bracket(angles: &[f64], theta: f64) -> (usize, usize, f64) {
    let n = angles.len();
    let hi = angles.partition_point(|&a| a < theta);
    if hi < n && angles[hi] == theta {
        return (hi, hi, 0.0);
    }
    let (lo, hi) = if hi == 0 || hi == n { (n - 1, 0) } else { (hi - 1, hi) };
    let a_lo = angles[lo];
    let mut a_hi = angles[hi];
    let mut t = theta;
    if a_hi <= a_lo {
        // wraps through 360°
        a_hi += 360.0;
        if t < a_lo {
            t += 360.0;
        }
    }
    (lo, hi, (t - a_lo) / (a_hi - a_lo))
}

/// Interpolate every skipped view, window by window, from its two angular
/// neighbours among the measured views (circular in angle).
pub fn linear_interpolate_views(
    measured: &ProjectionStack,
    split: &ViewSplit,
    geometry: &ScanGeometry,
) -> Result<ProjectionStack> {
    if measured.n_stack_views() < 2 {
        return Err(Error::invalid("linear interpolation needs at least two measured views"));
    }
    // measured positions sorted by angle
    let mut order: Vec<usize> = (0..measured.n_stack_views()).collect();
    order.sort_by(|&a, &b| {
        geometry.view_angles_deg[measured.views[a]].total_cmp(&geometry.view_angles_deg[measured.views[b]])
    });
    let angles: Vec<f64> = order.iter().map(|&p| geometry.view_angles_deg[measured.views[p]]).collect();
    let pix = geometry.pixels_per_view();
    let mut out = ProjectionStack::zeros(
        geometry.clone(),
        split.skipped.clone(),
        measured.n_windows,
        ProjectionKind::Synthesized,
    );
    for (k, &view) in split.skipped.iter().enumerate() {
        let (lo, hi, w) = bracket(&angles, geometry.view_angles_deg[view]);
        let (p_lo, p_hi) = (order[lo], order[hi]);
        for win in 0..measured.n_windows {
            let a = measured.view(win, p_lo);
            let b = measured.view(win, p_hi);
            let dst = out.view_mut(win, k);
            debug_assert_eq!(dst.len(), pix);
            for ((d, &x), &y) in dst.iter_mut().zip(a).zip(b) {
                *d = ((1.0 - w) * x as f64 + w * y as f64) as f32;
            }
        }
    }
    Ok(out)
}

/// Views handed to the reconstruction for `regime`, ordered by angle.
pub fn assemble_regime(
    full: &ProjectionStack,
    measured: &ProjectionStack,
    synthesized: Option<&ProjectionStack>,
    regime: Regime,
) -> Result<ProjectionStack> {
    match regime {
        Regime::Full => Ok(full.clone()),
        Regime::Partial => Ok(measured.clone()),
        Regime::Linint | Regime::Nerf => {
            let synth = synthesized
                .ok_or_else(|| Error::invalid(format!("regime {regime} needs synthesized views")))?;
            if synth.n_windows != measured.n_windows {
                return Err(Error::invalid("synthesized and measured window counts differ"));
            }
            let g = &measured.geometry;
            let mut views: Vec<usize> = measured.views.iter().chain(&synth.views).copied().collect();
            views.sort_by(|&a, &b| g.view_angles_deg[a].total_cmp(&g.view_angles_deg[b]));
            if views.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::invalid("measured and synthesized views overlap"));
            }
            let pix = g.pixels_per_view();
            let mut data = Vec::with_capacity(measured.n_windows * views.len() * pix);
            for w in 0..measured.n_windows {
                for &v in &views {
                    let src = match measured.position_of(v) {
                        Some(p) => measured.view(w, p),
                        None => synth.view(w, synth.position_of(v).unwrap_or_default()),
                    };
                    data.extend_from_slice(src);
                }
            }
            Ok(ProjectionStack {
                geometry: g.clone(),
                views,
                n_windows: measured.n_windows,
                kind: ProjectionKind::Synthesized,
                data,
            })
        }
    }
}
