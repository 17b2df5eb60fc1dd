//! Digital elliptical phantom with hot sphere inserts.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A scalar field on a regular voxel grid (activity in MBq per voxel, or
/// linear attenuation in 1/mm). Stored x-major with z contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageVolume {
    pub dims: [usize; 3],
    pub voxel_mm: [f64; 3],
    pub values: Vec<f32>,
}

impl ImageVolume {
    pub fn zeros(dims: [usize; 3], voxel_mm: [f64; 3]) -> Self {
        ImageVolume { dims, voxel_mm, values: vec![0.0; dims.iter().product()] }
    }

    pub fn filled(dims: [usize; 3], voxel_mm: [f64; 3], value: f32) -> Self {
        ImageVolume { dims, voxel_mm, values: vec![value; dims.iter().product()] }
    }

    /// Checked constructor: dimensions ≥ 8, values finite and nonnegative.
    pub fn new(dims: [usize; 3], voxel_mm: [f64; 3], values: Vec<f32>) -> Result<Self> {
        let v = ImageVolume { dims, voxel_mm, values };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 8) {
            return Err(Error::invalid(format!("volume dims must be >= 8, got {:?}", self.dims)));
        }
        if self.voxel_mm.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
            return Err(Error::invalid("voxel size must be positive"));
        }
        if self.values.len() != self.len() {
            return Err(Error::invalid(format!(
                "volume of dims {:?} needs {} values, got {}",
                self.dims,
                self.len(),
                self.values.len()
            )));
        }
        if self.values.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return Err(Error::invalid("volume values must be finite and nonnegative"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    pub fn voxel_volume_ml(&self) -> f64 {
        self.voxel_mm.iter().product::<f64>() / 1000.0
    }

    /// Center of voxel `(i, j, k)` in mm, relative to the volume center.
    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        let c = |n: usize, idx: usize, d: f64| (idx as f64 - (n as f64 - 1.0) / 2.0) * d;
        [
            c(self.dims[0], i, self.voxel_mm[0]),
            c(self.dims[1], j, self.voxel_mm[1]),
            c(self.dims[2], k, self.voxel_mm[2]),
        ]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().map(|&x| x as f64).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoiRole {
    Sphere,
    Background,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoiMask {
    pub name: String,
    pub role: VoiRole,
    pub dims: [usize; 3],
    pub mask: Vec<bool>,
}

impl VoiMask {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask.iter().enumerate().filter_map(|(i, &m)| m.then_some(i))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SphereSpec {
    pub name: String,
    pub center_mm: [f64; 3],
    pub volume_ml: f64,
    /// MBq/mL
    pub conc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub semi_axes_mm: [f64; 3],
    /// MBq/mL
    pub background_conc: f64,
    pub spheres: Vec<SphereSpec>,
    /// Linear attenuation of the body interior, 1/mm.
    pub mu_body_per_mm: f64,
}

/// Water at 208 keV: NIST mass attenuation 0.1370 cm²/g (200 keV) and
/// 0.1186 cm²/g (300 keV), log-log interpolated, at 1 g/cm³.
pub const MU_WATER_208KEV_PER_MM: f64 = 0.0135;

pub const PAPER_SPHERE_VOLUMES_ML: [f64; 6] = [2.0, 4.0, 8.0, 16.0, 30.0, 114.0];
pub const SPHERE_CONC_MBQ_PER_ML: f64 = 0.22;
pub const BACKGROUND_CONC_MBQ_PER_ML: f64 = 0.035;

impl Default for PhantomSpec {
    /// Six hot spheres (2–114 mL, 0.22 MBq/mL) in a warm 0.035 MBq/mL
    /// ellipsoid, centers on an elliptical ring in the central transaxial plane.
    fn default() -> Self {
        let (ring_x, ring_y) = (70.0, 50.0);
        // largest sphere on the long axis, the rest going round
        let angles_deg = [300.0, 240.0, 180.0, 120.0, 60.0, 0.0];
        let spheres = PAPER_SPHERE_VOLUMES_ML
            .iter()
            .zip(angles_deg)
            .map(|(&volume_ml, a): (&f64, f64)| {
                let (s, c) = a.to_radians().sin_cos();
                SphereSpec {
                    name: format!("sphere_{volume_ml}ml"),
                    center_mm: [ring_x * c, ring_y * s, 0.0],
                    volume_ml,
                    conc: SPHERE_CONC_MBQ_PER_ML,
                }
            })
            .collect();
        PhantomSpec {
            semi_axes_mm: [140.0, 100.0, 100.0],
            background_conc: BACKGROUND_CONC_MBQ_PER_ML,
            spheres,
            mu_body_per_mm: MU_WATER_208KEV_PER_MM,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.semi_axes_mm.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return Err(Error::invalid("ellipse semi-axes must be positive"));
        }
        if !(self.background_conc >= 0.0) || !(self.mu_body_per_mm >= 0.0) {
            return Err(Error::invalid("background concentration and mu must be nonnegative"));
        }
        for s in &self.spheres {
            if !(s.conc >= 0.0) {
                return Err(Error::invalid(format!("{}: negative concentration", s.name)));
            }
            let r = sphere_radius_from_volume(s.volume_ml)?;
            if !sphere_inside_ellipsoid(s.center_mm, r, self.semi_axes_mm) {
                return Err(Error::invalid(format!("{} is not fully inside the ellipse", s.name)));
            }
        }
        Ok(())
    }

    fn inside_body(&self, p: [f64; 3]) -> bool {
        inside_ellipsoid(p, self.semi_axes_mm)
    }
}

/// Radius in mm of a sphere of `volume_ml` (1 mL = 1000 mm³).
pub fn sphere_radius_from_volume(volume_ml: f64) -> Result<f64> {
    if !(volume_ml >= 0.0) {
        return Err(Error::invalid(format!("sphere volume must be nonnegative, got {volume_ml}")));
    }
    Ok((3.0 * volume_ml * 1000.0 / (4.0 * PI)).cbrt())
}

fn inside_ellipsoid(p: [f64; 3], semi: [f64; 3]) -> bool {
    (0..3).map(|d| (p[d] / semi[d]).powi(2)).sum::<f64>() <= 1.0
}

fn sphere_inside_ellipsoid(c: [f64; 3], r: f64, semi: [f64; 3]) -> bool {
    // Fibonacci lattice on the sphere surface; dense enough that any
    // protrusion would have to be far below a voxel.
    let n = 4000;
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n).all(|i| {
        let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
        let rho = (1.0 - z * z).sqrt();
        let (s, co) = (golden * i as f64).sin_cos();
        inside_ellipsoid([c[0] + r * rho * co, c[1] + r * rho * s, c[2] + r * z], semi)
    })
}

pub struct Phantom {
    pub activity: ImageVolume,
    pub mu_map: ImageVolume,
    pub masks: Vec<VoiMask>,
}

impl Phantom {
    pub fn background(&self) -> Option<&VoiMask> {
        self.masks.iter().find(|m| m.role == VoiRole::Background)
    }

    pub fn spheres(&self) -> impl Iterator<Item = &VoiMask> {
        self.masks.iter().filter(|m| m.role == VoiRole::Sphere)
    }
}

/// Subvoxel sample offsets (in voxel units) for `sub`³ sampling.
fn sub_offsets(sub: usize) -> Vec<f64> {
    (0..sub).map(|s| (s as f64 + 0.5) / sub as f64 - 0.5).collect()
}

/// Fractional occupancy of a ball on the voxel grid, with `sub`³ subsamples
/// per voxel. Only the ball's bounding box is visited.
pub fn sphere_occupancy(
    dims: [usize; 3],
    voxel_mm: [f64; 3],
    center_mm: [f64; 3],
    radius_mm: f64,
    sub: usize,
) -> Vec<(usize, f64)> {
    let grid = ImageVolume::zeros(dims, voxel_mm);
    let offs = sub_offsets(sub);
    let total = (sub * sub * sub) as f64;
    let range = |d: usize| {
        let half = (dims[d] as f64 - 1.0) / 2.0;
        let lo = ((center_mm[d] - radius_mm) / voxel_mm[d] + half - 1.0).floor().max(0.0) as usize;
        let hi = ((center_mm[d] + radius_mm) / voxel_mm[d] + half + 1.0).ceil();
        let hi = (hi.max(0.0) as usize).min(dims[d].saturating_sub(1));
        lo..=hi
    };
    let r2 = radius_mm * radius_mm;
    let mut out = Vec::new();
    for i in range(0) {
        for j in range(1) {
            for k in range(2) {
                let c = grid.voxel_center(i, j, k);
                let mut hits = 0usize;
                for ox in &offs {
                    let dx = c[0] + ox * voxel_mm[0] - center_mm[0];
                    for oy in &offs {
                        let dy = c[1] + oy * voxel_mm[1] - center_mm[1];
                        for oz in &offs {
                            let dz = c[2] + oz * voxel_mm[2] - center_mm[2];
                            if dx * dx + dy * dy + dz * dz <= r2 {
                                hits += 1;
                            }
                        }
                    }
                }
                if hits > 0 {
                    out.push((grid.index(i, j, k), hits as f64 / total));
                }
            }
        }
    }
    out
}

const SUBSAMPLES: usize = 3;
const BACKGROUND_MARGIN_VOXELS: f64 = 2.0;

/// Voxelize `spec` into activity (MBq per voxel), attenuation (1/mm) and
/// VOI masks.
pub fn build_phantom(spec: &PhantomSpec, dims: [usize; 3], voxel_mm: [f64; 3]) -> Result<Phantom> {
    spec.validate()?;
    let mut activity = ImageVolume::zeros(dims, voxel_mm);
    activity.validate()?;
    for d in 0..3 {
        let half_extent = dims[d] as f64 * voxel_mm[d] / 2.0;
        if spec.semi_axes_mm[d] > half_extent {
            return Err(Error::invalid(format!(
                "ellipse semi-axis {} mm exceeds grid half-extent {half_extent} mm on axis {d}",
                spec.semi_axes_mm[d]
            )));
        }
    }
    let radii: Vec<f64> =
        spec.spheres.iter().map(|s| sphere_radius_from_volume(s.volume_ml)).collect::<Result<_>>()?;

    let voxel_ml = activity.voxel_volume_ml();
    let offs = sub_offsets(SUBSAMPLES);
    let total = (SUBSAMPLES * SUBSAMPLES * SUBSAMPLES) as f64;
    let mut mu_map = ImageVolume::zeros(dims, voxel_mm);
    let mut occupancy = vec![vec![0u32; activity.len()]; spec.spheres.len()];

    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let c = activity.voxel_center(i, j, k);
                let idx = activity.index(i, j, k);
                let mut conc_sum = 0.0;
                let mut body = 0u32;
                for ox in &offs {
                    for oy in &offs {
                        for oz in &offs {
                            let p = [
                                c[0] + ox * voxel_mm[0],
                                c[1] + oy * voxel_mm[1],
                                c[2] + oz * voxel_mm[2],
                            ];
                            if !spec.inside_body(p) {
                                continue;
                            }
                            body += 1;
                            let hit = spec.spheres.iter().zip(&radii).position(|(s, &r)| {
                                let d2: f64 = (0..3).map(|a| (p[a] - s.center_mm[a]).powi(2)).sum();
                                d2 <= r * r
                            });
                            match hit {
                                Some(si) => {
                                    conc_sum += spec.spheres[si].conc;
                                    occupancy[si][idx] += 1;
                                }
                                None => conc_sum += spec.background_conc,
                            }
                        }
                    }
                }
                activity.values[idx] = (conc_sum / total * voxel_ml) as f32;
                mu_map.values[idx] = (spec.mu_body_per_mm * body as f64 / total) as f32;
            }
        }
    }

    let mut masks: Vec<VoiMask> = spec
        .spheres
        .iter()
        .zip(&occupancy)
        .map(|(s, occ)| VoiMask {
            name: s.name.clone(),
            role: VoiRole::Sphere,
            dims,
            mask: occ.iter().map(|&h| h as f64 / total > 0.5).collect(),
        })
        .collect();
    masks.push(background_mask(spec, &radii, &activity));
    Ok(Phantom { activity, mu_map, masks })
}

/// Interior voxels at least two voxels away from every sphere surface and
/// from the body boundary.
fn background_mask(spec: &PhantomSpec, radii: &[f64], grid: &ImageVolume) -> VoiMask {
    let dims = grid.dims;
    let margin = BACKGROUND_MARGIN_VOXELS;
    let pitch = grid.voxel_mm.iter().copied().fold(0.0, f64::max);
    let m = margin as isize;
    let ball: Vec<[isize; 3]> = (-m..=m)
        .flat_map(|a| (-m..=m).flat_map(move |b| (-m..=m).map(move |c| [a, b, c])))
        .filter(|o| ((o[0] * o[0] + o[1] * o[1] + o[2] * o[2]) as f64) <= margin * margin)
        .collect();
    let center_inside = |i: isize, j: isize, k: isize| {
        if i < 0 || j < 0 || k < 0 || i >= dims[0] as isize || j >= dims[1] as isize || k >= dims[2] as isize {
            return false;
        }
        spec.inside_body(grid.voxel_center(i as usize, j as usize, k as usize))
    };
    let mut mask = vec![false; grid.len()];
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let c = grid.voxel_center(i, j, k);
                let clear_of_spheres = spec.spheres.iter().zip(radii).all(|(s, &r)| {
                    let d: f64 = (0..3).map(|a| (c[a] - s.center_mm[a]).powi(2)).sum::<f64>().sqrt();
                    d - r > margin * pitch
                });
                if !clear_of_spheres {
                    continue;
                }
                let (ii, jj, kk) = (i as isize, j as isize, k as isize);
                if ball.iter().all(|o| center_inside(ii + o[0], jj + o[1], kk + o[2])) {
                    mask[grid.index(i, j, k)] = true;
                }
            }
        }
    }
    VoiMask { name: "background".into(), role: VoiRole::Background, dims, mask }
}

/// Small uniform balls on an empty grid; handy for point-source experiments.
pub fn hot_spots(
    dims: [usize; 3],
    voxel_mm: [f64; 3],
    spots: &[([f64; 3], f64, f32)],
) -> ImageVolume {
    let mut v = ImageVolume::zeros(dims, voxel_mm);
    for &(center, radius, value) in spots {
        for (idx, occ) in sphere_occupancy(dims, voxel_mm, center, radius, SUBSAMPLES) {
            v.values[idx] += value * occ as f32;
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    const DESK: [usize; 3] = [64, 64, 64];
    const PITCH: [f64; 3] = [4.8; 3];

    #[test]
    fn radius_examples() {
        let unit_ml = 4.0 * PI / 3.0 / 1000.0;
        assert!((sphere_radius_from_volume(unit_ml).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(sphere_radius_from_volume(0.0).unwrap(), 0.0);
        // independent oracle: invert V = 4/3 π r³ by bisection
        let target = 114_000.0;
        let (mut lo, mut hi) = (0.0f64, 100.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if 4.0 / 3.0 * PI * mid.powi(3) < target {
                lo = mid
            } else {
                hi = mid
            }
        }
        let r = sphere_radius_from_volume(114.0).unwrap();
        assert!((r - lo).abs() < 1e-9);
        assert!((r - 30.0796).abs() < 1e-3);
        assert!(sphere_radius_from_volume(-1.0).is_err());
    }

    #[test]
    fn water_attenuation_at_208kev() {
        // NIST XCOM water, cm²/g
        let (e0, m0, e1, m1) = (200.0f64, 0.1370f64, 300.0f64, 0.1186f64);
        let slope = (m1 / m0).ln() / (e1 / e0).ln();
        let mu_cm = m0 * (208.0f64 / e0).powf(slope);
        assert!((mu_cm / 10.0 - MU_WATER_208KEV_PER_MM).abs() < 5e-5);
    }

    #[test]
    fn default_phantom_contrast_and_masks() {
        let p = build_phantom(&PhantomSpec::default(), DESK, PITCH).unwrap();
        let max_in = |m: &VoiMask| m.indices().map(|i| p.activity.values[i]).fold(0.0f32, f32::max);
        let bkg = p.background().unwrap();
        let sphere_max = p.spheres().map(max_in).fold(0.0f32, f32::max);
        let ratio = sphere_max / max_in(bkg);
        assert!((ratio - 6.3).abs() < 0.05, "ratio {ratio}");
        assert_eq!(p.spheres().count(), 6);
        for s in p.spheres() {
            assert!(s.count() > 0, "{} empty", s.name);
            assert!(s.mask.iter().zip(&bkg.mask).all(|(&a, &b)| !(a && b)));
        }
        assert!(bkg.count() > 1000);
        // mu and activity share the same support
        for (a, m) in p.activity.values.iter().zip(&p.mu_map.values) {
            assert_eq!(*a == 0.0, *m == 0.0);
        }
    }

    #[test]
    fn uniform_phantom_without_spheres() {
        let spec = PhantomSpec { spheres: vec![], ..PhantomSpec::default() };
        let p = build_phantom(&spec, DESK, PITCH).unwrap();
        let full = (spec.background_conc * p.activity.voxel_volume_ml()) as f32;
        let bkg = p.background().unwrap();
        assert_eq!(p.masks.len(), 1);
        assert!(bkg.indices().all(|i| p.activity.values[i] == full));
    }

    #[test]
    fn sphere_total_activity_matches_analytic() {
        let p = build_phantom(&PhantomSpec::default(), DESK, PITCH).unwrap();
        let spec = PhantomSpec::default();
        let voxel_ml = p.activity.voxel_volume_ml();
        for s in &spec.spheres {
            let r = sphere_radius_from_volume(s.volume_ml).unwrap();
            let occ = sphere_occupancy(DESK, PITCH, s.center_mm, r, SUBSAMPLES);
            let total: f64 = occ.iter().map(|&(_, o)| o * voxel_ml * s.conc).sum();
            let rel = (total - s.conc * s.volume_ml).abs() / (s.conc * s.volume_ml);
            // at 4.8 mm the 2 mL sphere spans ~3 voxels; only the larger ones hold 2 %
            if s.volume_ml >= 8.0 {
                assert!(rel < 0.02, "{}: {rel}", s.name);
            }
        }
    }

    #[test]
    fn subsampling_reduces_volume_error() {
        let spec = PhantomSpec::default();
        // single placements can be lucky; compare errors over jittered centers
        for s in &spec.spheres {
            let r = sphere_radius_from_volume(s.volume_ml).unwrap();
            let err = |sub| {
                (0..16)
                    .map(|k| {
                        let jit = |m: f64| ((k as f64 * m).fract() - 0.5) * 4.8;
                        let c = [s.center_mm[0] + jit(0.618), s.center_mm[1] + jit(0.414), s.center_mm[2] + jit(0.732)];
                        let v: f64 = sphere_occupancy(DESK, PITCH, c, r, sub)
                            .iter()
                            .map(|&(_, o)| o * 4.8f64.powi(3) / 1000.0)
                            .sum();
                        (v - s.volume_ml).abs()
                    })
                    .sum::<f64>()
            };
            assert!(err(3) < err(1), "{}: {} vs {}", s.name, err(3), err(1));
        }
    }

    #[test]
    fn sphere_outside_body_rejected() {
        let mut spec = PhantomSpec::default();
        spec.spheres[5].center_mm = [120.0, 0.0, 0.0];
        assert!(matches!(build_phantom(&spec, DESK, PITCH), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn grid_too_small_rejected() {
        assert!(build_phantom(&PhantomSpec::default(), [32, 32, 32], PITCH).is_err());
    }
}
