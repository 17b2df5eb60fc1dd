//! Rotation-based system model: attenuation along the ray and a
//! depth-dependent Gaussian collimator-detector response.
//!
//! For each view the volume is resampled onto a grid aligned with the
//! detector (bilinear in the transaxial plane, axial axis untouched). In that
//! frame every ray is a row along the depth axis, so attenuation becomes a
//! running sum and the blur of each depth plane is an ordinary separable 2-D
//! convolution. The adjoint walks the same steps backwards: blur (symmetric
//! kernel, zero-padded edges), transmission, then the transpose of the
//! bilinear weights.
//!
//! The reconstruction grid is `det_nu × det_nu × det_nv` voxels at the detector
//! pixel pitch; volume axis `z` is detector axis `v`.

use std::borrow::Cow;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::ScanGeometry;
use crate::par;
use crate::phantom::ImageVolume;
use crate::simulate::{ProjectionKind, ProjectionStack};

/// Caching per-view transmission factors is skipped above this size.
const TRANSMISSION_CACHE_BYTES: usize = 512 << 20;

#[derive(Debug, Clone)]
pub struct SystemModel {
    geometry: ScanGeometry,
    mu_map: Arc<ImageVolume>,
    psf_sigma0_mm: f64,
    psf_slope: f64,
    calibration: f64,
    rotations: Arc<Vec<RotationTable>>,
    transmission: Option<Arc<Vec<Vec<f32>>>>,
    attenuating: bool,
}

/// Bilinear taps for every sample of the detector-aligned grid of one view.
/// Entry `b * nu + a` is lateral position `a` at depth plane `b` (plane 0 is
/// the one nearest the detector).
#[derive(Debug, Clone)]
struct RotationTable {
    taps: Vec<[(u32, f32); 4]>,
    /// Per depth plane: does any sample fall inside the volume?
    plane_used: Vec<bool>,
}

impl RotationTable {
    fn new(theta: f64, n: usize, nxy: usize) -> Self {
        let (s, c) = theta.sin_cos();
        let half = (n as f64 - 1.0) / 2.0;
        let snap = |f: f64| {
            let r = f.round();
            if (f - r).abs() < 1e-9 { r } else { f }
        };
        let mut taps = Vec::with_capacity(n * n);
        let mut plane_used = vec![false; n];
        for b in 0..n {
            let depth = half - b as f64;
            for a in 0..n {
                let lat = a as f64 - half;
                // lateral along (cos, sin), depth along the detector normal (-sin, cos)
                let fi = snap(lat * c - depth * s + half);
                let fj = snap(lat * s + depth * c + half);
                let (i0, j0) = (fi.floor(), fj.floor());
                let (wx, wy) = (fi - i0, fj - j0);
                let mut entry = [(0u32, 0f32); 4];
                let corners = [
                    (i0, j0, (1.0 - wx) * (1.0 - wy)),
                    (i0 + 1.0, j0, wx * (1.0 - wy)),
                    (i0, j0 + 1.0, (1.0 - wx) * wy),
                    (i0 + 1.0, j0 + 1.0, wx * wy),
                ];
                for (slot, &(i, j, w)) in entry.iter_mut().zip(&corners) {
                    let inside = i >= 0.0 && j >= 0.0 && (i as usize) < nxy && (j as usize) < nxy;
                    if inside && w > 0.0 {
                        *slot = ((i as usize * nxy + j as usize) as u32, w as f32);
                        plane_used[b] = true;
                    }
                }
                taps.push(entry);
            }
        }
        RotationTable { taps, plane_used }
    }
}

/// Normalized Gaussian kernel truncated at 4σ; identity for σ ≈ 0.
pub fn gaussian_kernel(sigma_px: f64) -> Vec<f64> {
    if !(sigma_px > 1e-6) {
        return vec![1.0];
    }
    let radius = (4.0 * sigma_px).ceil() as isize;
    let mut k: Vec<f64> =
        (-radius..=radius).map(|t| (-(t * t) as f64 / (2.0 * sigma_px * sigma_px)).exp()).collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= sum);
    k
}

/// In-place separable blur of a `rows × cols` plane (cols contiguous) with
/// zero padding. The operator is symmetric, hence its own adjoint.
pub fn blur_plane(plane: &mut [f64], rows: usize, cols: usize, kernel: &[f64], tmp: &mut Vec<f64>) {
    if kernel.len() == 1 {
        let w = kernel[0];
        if w != 1.0 {
            plane.iter_mut().for_each(|x| *x *= w);
        }
        return;
    }
    let r = kernel.len() / 2;
    tmp.clear();
    tmp.resize(plane.len(), 0.0);
    // along cols
    for row in 0..rows {
        let src = &plane[row * cols..(row + 1) * cols];
        let dst = &mut tmp[row * cols..(row + 1) * cols];
        for (t, &w) in kernel.iter().enumerate() {
            // dst[c] += w * src[c + t - r]
            let (d0, s0) = if t < r { (r - t, 0) } else { (0, t - r) };
            if d0.max(s0) >= cols {
                continue;
            }
            let len = cols - d0.max(s0);
            for (d, s) in dst[d0..d0 + len].iter_mut().zip(&src[s0..s0 + len]) {
                *d += w * s;
            }
        }
    }
    // along rows
    plane.iter_mut().for_each(|x| *x = 0.0);
    for (t, &w) in kernel.iter().enumerate() {
        for row in 0..rows {
            let src_row = row + t;
            if src_row < r || src_row - r >= rows {
                continue;
            }
            let src = &tmp[(src_row - r) * cols..(src_row - r + 1) * cols];
            let dst = &mut plane[row * cols..(row + 1) * cols];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += w * s;
            }
        }
    }
}

impl SystemModel {
    pub fn new(
        geometry: ScanGeometry,
        mu_map: ImageVolume,
        psf_sigma0_mm: f64,
        psf_slope: f64,
        calibration: f64,
    ) -> Result<Self> {
        geometry.validate()?;
        let dims = Self::grid_dims_of(&geometry);
        if mu_map.dims != dims {
            return Err(Error::invalid(format!(
                "attenuation map dims {:?} do not match reconstruction grid {:?}",
                mu_map.dims, dims
            )));
        }
        let p = geometry.det_pixel_mm;
        if mu_map.voxel_mm.iter().any(|&d| (d - p).abs() > 1e-9 * p) {
            return Err(Error::invalid(format!(
                "voxel size {:?} must equal the detector pitch {p} mm",
                mu_map.voxel_mm
            )));
        }
        if !(psf_sigma0_mm >= 0.0) || !(psf_slope >= 0.0) || !(calibration > 0.0) {
            return Err(Error::invalid("psf parameters must be >= 0 and calibration > 0"));
        }
        if mu_map.values.iter().any(|&m| !(m >= 0.0 && m.is_finite())) {
            return Err(Error::invalid("attenuation map must be finite and nonnegative"));
        }
        let n = geometry.det_nu;
        let rotations: Vec<RotationTable> = par::map_collect(geometry.n_views(), |v| {
            RotationTable::new(geometry.angle_rad(v), n, n)
        });
        let attenuating = mu_map.values.iter().any(|&m| m > 0.0);
        let mut model = SystemModel {
            geometry,
            mu_map: Arc::new(mu_map),
            psf_sigma0_mm,
            psf_slope,
            calibration,
            rotations: Arc::new(rotations),
            transmission: None,
            attenuating,
        };
        let bytes = model.mu_map.len() * model.geometry.n_views() * std::mem::size_of::<f32>();
        if attenuating && bytes <= TRANSMISSION_CACHE_BYTES {
            let cache = par::map_collect(model.geometry.n_views(), |v| model.compute_transmission(v));
            model.transmission = Some(Arc::new(cache));
        }
        Ok(model)
    }

    /// Model without attenuation or blur.
    pub fn ideal(geometry: ScanGeometry, calibration: f64) -> Result<Self> {
        let dims = Self::grid_dims_of(&geometry);
        let p = geometry.det_pixel_mm;
        Self::new(geometry, ImageVolume::zeros(dims, [p; 3]), 0.0, 0.0, calibration)
    }

    fn grid_dims_of(geometry: &ScanGeometry) -> [usize; 3] {
        [geometry.det_nu, geometry.det_nu, geometry.det_nv]
    }

    pub fn grid_dims(&self) -> [usize; 3] {
        Self::grid_dims_of(&self.geometry)
    }

    pub fn voxel_mm(&self) -> [f64; 3] {
        [self.geometry.det_pixel_mm; 3]
    }

    pub fn geometry(&self) -> &ScanGeometry {
        &self.geometry
    }

    pub fn mu_map(&self) -> &ImageVolume {
        &self.mu_map
    }

    pub fn calibration(&self) -> f64 {
        self.calibration
    }

    pub fn psf_params(&self) -> (f64, f64) {
        (self.psf_sigma0_mm, self.psf_slope)
    }

    /// Same model with a different count calibration; caches are shared.
    pub fn with_calibration(&self, calibration: f64) -> Result<Self> {
        if !(calibration > 0.0 && calibration.is_finite()) {
            return Err(Error::invalid("calibration must be positive"));
        }
        Ok(SystemModel { calibration, ..self.clone() })
    }

    pub fn psf_sigma(&self, depth_mm: f64) -> f64 {
        psf_sigma(depth_mm, self.psf_sigma0_mm, self.psf_slope)
    }

    fn step_mm(&self) -> f64 {
        self.geometry.det_pixel_mm
    }

    /// Depth of plane `b` below the detector face at `view`, mm.
    fn plane_depth(&self, view: usize, b: usize) -> f64 {
        let n = self.geometry.det_nu as f64;
        let s = ((n - 1.0) / 2.0 - b as f64) * self.step_mm();
        (self.geometry.radial_mm[view] - s).max(0.0)
    }

    fn plane_kernels(&self, view: usize) -> Vec<(f64, Vec<f64>)> {
        (0..self.geometry.det_nu)
            .map(|b| {
                let sigma_px = self.psf_sigma(self.plane_depth(view, b)) / self.step_mm();
                (sigma_px, gaussian_kernel(sigma_px))
            })
            .collect()
    }

    fn compute_transmission(&self, view: usize) -> Vec<f32> {
        let n = self.geometry.det_nu;
        let nz = self.geometry.det_nv;
        let table = &self.rotations[view];
        let mu = &self.mu_map.values;
        let step = self.step_mm();
        let mut out = vec![0f32; n * n * nz];
        let mut cum = vec![0f64; n * nz];
        let mut mu_row = vec![0f64; nz];
        for b in 0..n {
            for a in 0..n {
                mu_row.iter_mut().for_each(|m| *m = 0.0);
                for &(idx, w) in &table.taps[b * n + a] {
                    if w == 0.0 {
                        continue;
                    }
                    let src = &mu[idx as usize * nz..(idx as usize + 1) * nz];
                    for (m, &s) in mu_row.iter_mut().zip(src) {
                        *m += w as f64 * s as f64;
                    }
                }
                let c = &mut cum[a * nz..(a + 1) * nz];
                let dst = &mut out[(b * n + a) * nz..(b * n + a + 1) * nz];
                for ((t, acc), &m) in dst.iter_mut().zip(c.iter_mut()).zip(&mu_row) {
                    // midpoint rule: half of the emitting voxel's own path
                    *t = (-(*acc + 0.5 * m) * step).exp() as f32;
                    *acc += m;
                }
            }
        }
        out
    }

    fn transmission(&self, view: usize) -> Option<Cow<'_, [f32]>> {
        if !self.attenuating {
            return None;
        }
        Some(match &self.transmission {
            Some(cache) => Cow::Borrowed(&cache[view][..]),
            None => Cow::Owned(self.compute_transmission(view)),
        })
    }

    fn check_volume(&self, x: &ImageVolume) -> Result<()> {
        if x.dims != self.grid_dims() || x.values.len() != x.len() {
            return Err(Error::invalid(format!(
                "volume dims {:?} do not match reconstruction grid {:?}",
                x.dims,
                self.grid_dims()
            )));
        }
        Ok(())
    }

    fn check_views(&self, views: &[usize]) -> Result<()> {
        match views.iter().find(|&&v| v >= self.geometry.n_views()) {
            Some(v) => Err(Error::invalid(format!("view {v} out of range"))),
            None => Ok(()),
        }
    }

    /// Mean photopeak counts of one view, `det_nu × det_nv`.
    pub fn forward_view(&self, x: &[f32], view: usize) -> Vec<f32> {
        let n = self.geometry.det_nu;
        let nz = self.geometry.det_nv;
        let table = &self.rotations[view];
        let trans = self.transmission(view);
        let kernels = self.plane_kernels(view);
        let mut proj = vec![0f64; n * nz];
        let mut plane = vec![0f64; n * nz];
        let mut tmp = Vec::new();
        for b in 0..n {
            if !table.plane_used[b] {
                continue;
            }
            let mut any = false;
            for a in 0..n {
                let dst = &mut plane[a * nz..(a + 1) * nz];
                dst.iter_mut().for_each(|d| *d = 0.0);
                for &(idx, w) in &table.taps[b * n + a] {
                    if w == 0.0 {
                        continue;
                    }
                    let src = &x[idx as usize * nz..(idx as usize + 1) * nz];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += w as f64 * s as f64;
                    }
                }
                if let Some(t) = &trans {
                    let t = &t[(b * n + a) * nz..(b * n + a + 1) * nz];
                    dst.iter_mut().zip(t).for_each(|(d, &t)| *d *= t as f64);
                }
                any |= dst.iter().any(|&d| d != 0.0);
            }
            if !any {
                continue;
            }
            blur_plane(&mut plane, n, nz, &kernels[b].1, &mut tmp);
            proj.iter_mut().zip(&plane).for_each(|(p, &q)| *p += q);
        }
        let scale = self.calibration * self.step_mm();
        proj.into_iter().map(|p| (p * scale) as f32).collect()
    }

    /// Adds the adjoint of [`forward_view`](Self::forward_view) applied to
    /// `q` into `out` (a full volume, f64 for accumulation).
    pub fn back_view_into(&self, q: &[f32], view: usize, out: &mut [f64]) {
        let n = self.geometry.det_nu;
        let nz = self.geometry.det_nv;
        let table = &self.rotations[view];
        let trans = self.transmission(view);
        let kernels = self.plane_kernels(view);
        let scale = self.calibration * self.step_mm();
        let q: Vec<f64> = q.iter().map(|&v| v as f64 * scale).collect();
        let mut plane = vec![0f64; n * nz];
        let mut tmp = Vec::new();
        let mut row = vec![0f64; nz];
        let mut blurred_sigma = f64::NAN;
        for b in 0..n {
            if !table.plane_used[b] {
                continue;
            }
            let (sigma, kernel) = &kernels[b];
            if *sigma != blurred_sigma {
                plane.copy_from_slice(&q);
                blur_plane(&mut plane, n, nz, kernel, &mut tmp);
                blurred_sigma = *sigma;
            }
            for a in 0..n {
                let entry = &table.taps[b * n + a];
                if entry.iter().all(|&(_, w)| w == 0.0) {
                    continue;
                }
                let src = &plane[a * nz..(a + 1) * nz];
                let r: &[f64] = match &trans {
                    Some(t) => {
                        let t = &t[(b * n + a) * nz..(b * n + a + 1) * nz];
                        row.iter_mut().zip(src).zip(t).for_each(|((r, &p), &t)| *r = p * t as f64);
                        &row
                    }
                    None => src,
                };
                for &(idx, w) in entry {
                    if w == 0.0 {
                        continue;
                    }
                    let dst = &mut out[idx as usize * nz..(idx as usize + 1) * nz];
                    for (d, &s) in dst.iter_mut().zip(r) {
                        *d += w as f64 * s;
                    }
                }
            }
        }
    }

    /// Forward-project `x` at `views` (raw slice, no checks).
    pub(crate) fn forward_raw(&self, x: &[f32], views: &[usize]) -> Vec<f32> {
        let per_view = par::map_collect(views.len(), |i| self.forward_view(x, views[i]));
        per_view.concat()
    }

    /// Back-project stacked views `p` (raw slice, no checks) in f64.
    pub(crate) fn back_raw(&self, p: &[f32], views: &[usize]) -> Vec<f64> {
        let len: usize = self.grid_dims().iter().product();
        let pix = self.geometry.pixels_per_view();
        let mut acc = vec![0f64; len];
        for chunk_start in (0..views.len()).step_by(par::CHUNK) {
            let chunk = &views[chunk_start..(chunk_start + par::CHUNK).min(views.len())];
            let parts = par::map_collect(chunk.len(), |i| {
                let mut buf = vec![0f64; len];
                let k = chunk_start + i;
                self.back_view_into(&p[k * pix..(k + 1) * pix], chunk[i], &mut buf);
                buf
            });
            for part in parts {
                acc.iter_mut().zip(&part).for_each(|(a, &b)| *a += b);
            }
        }
        acc
    }

    /// Per-voxel sensitivity `Σ_i a_ij` over `views`.
    pub fn sensitivity(&self, views: &[usize]) -> Result<ImageVolume> {
        self.check_views(views)?;
        let ones = vec![1f32; views.len() * self.geometry.pixels_per_view()];
        let s = self.back_raw(&ones, views);
        Ok(ImageVolume {
            dims: self.grid_dims(),
            voxel_mm: self.voxel_mm(),
            values: s.into_iter().map(|v| v as f32).collect(),
        })
    }
}

/// Linear-in-depth collimator-detector blur width.
pub fn psf_sigma(depth_mm: f64, sigma0_mm: f64, slope: f64) -> f64 {
    sigma0_mm + slope * depth_mm.max(0.0)
}

/// Mean photopeak primary counts of `x` at `views`.
pub fn forward_project(x: &ImageVolume, model: &SystemModel, views: &[usize]) -> Result<ProjectionStack> {
    model.check_volume(x)?;
    model.check_views(views)?;
    if x.values.iter().any(|&v| v < 0.0) {
        return Err(Error::invalid("forward projection expects a nonnegative volume"));
    }
    let data = model.forward_raw(&x.values, views);
    ProjectionStack::new(model.geometry.clone(), views.to_vec(), 1, ProjectionKind::Mean, data)
}

/// Exact adjoint of [`forward_project`] applied to window 0 of `p`.
pub fn back_project(p: &ProjectionStack, model: &SystemModel, views: &[usize]) -> Result<ImageVolume> {
    model.check_views(views)?;
    let g = &model.geometry;
    if p.geometry.det_nu != g.det_nu || p.geometry.det_nv != g.det_nv {
        return Err(Error::invalid("projection detector size does not match the model"));
    }
    if p.views != views {
        return Err(Error::invalid("projection stack views do not match the requested views"));
    }
    let acc = model.back_raw(p.window(0), views);
    Ok(ImageVolume {
        dims: model.grid_dims(),
        voxel_mm: model.voxel_mm(),
        values: acc.into_iter().map(|v| v as f32).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_geometry, Orbit};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn geom(n: usize, nz: usize, views: usize) -> ScanGeometry {
        make_geometry(views, Orbit::Circular { radius_mm: 200.0 }, n, nz, 4.0, 1).unwrap()
    }

    fn random_volume(dims: [usize; 3], rng: &mut ChaCha8Rng) -> ImageVolume {
        let n = dims.iter().product();
        ImageVolume { dims, voxel_mm: [4.0; 3], values: (0..n).map(|_| rng.random::<f32>()).collect() }
    }

    fn ellipse_mu(dims: [usize; 3], mu: f32) -> ImageVolume {
        let mut m = ImageVolume::zeros(dims, [4.0; 3]);
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    let c = m.voxel_center(i, j, k);
                    let half = dims[0] as f64 * 2.0;
                    if (c[0] / (0.8 * half)).powi(2) + (c[1] / (0.6 * half)).powi(2) <= 1.0 {
                        let idx = m.index(i, j, k);
                        m.values[idx] = mu;
                    }
                }
            }
        }
        m
    }

    #[test]
    fn sigma_formula() {
        assert_eq!(psf_sigma(0.0, 1.5, 0.03), 1.5);
        assert_eq!(psf_sigma(250.0, 1.5, 0.0), 1.5);
        assert!((psf_sigma(100.0, 2.0, 0.02) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        for s in [0.0, 0.3, 1.0, 2.7] {
            let k = gaussian_kernel(s);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let n = k.len();
            for i in 0..n {
                assert_eq!(k[i], k[n - 1 - i]);
            }
        }
        assert_eq!(gaussian_kernel(2.0).len(), 17);
    }

    #[test]
    fn blur_is_self_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (r, c) = (13, 9);
        let a: Vec<f64> = (0..r * c).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..r * c).map(|_| rng.random()).collect();
        let k = gaussian_kernel(1.7);
        let (mut ka, mut kb, mut tmp) = (a.clone(), b.clone(), Vec::new());
        blur_plane(&mut ka, r, c, &k, &mut tmp);
        blur_plane(&mut kb, r, c, &k, &mut tmp);
        let lhs: f64 = ka.iter().zip(&b).map(|(x, y)| x * y).sum();
        let rhs: f64 = a.iter().zip(&kb).map(|(x, y)| x * y).sum();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs());
    }

    #[test]
    fn zero_in_zero_out() {
        let g = geom(16, 8, 6);
        let m = SystemModel::new(g.clone(), ellipse_mu([16, 16, 8], 0.01), 2.0, 0.02, 1.0).unwrap();
        let x = ImageVolume::zeros([16, 16, 8], [4.0; 3]);
        let views: Vec<usize> = (0..6).collect();
        let p = forward_project(&x, &m, &views).unwrap();
        assert!(p.data.iter().all(|&v| v == 0.0));
        let z = ProjectionStack::zeros(g, views.clone(), 1, ProjectionKind::Mean);
        assert!(back_project(&z, &m, &views).unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn point_source_lands_on_one_pixel() {
        let g = make_geometry(4, Orbit::Circular { radius_mm: 200.0 }, 9, 9, 4.0, 1).unwrap();
        let m = SystemModel::ideal(g, 1.0).unwrap();
        let mut x = ImageVolume::zeros([9, 9, 9], [4.0; 3]);
        let c = x.index(4, 4, 4);
        x.values[c] = 1.0;
        let p = forward_project(&x, &m, &[0, 1, 2, 3]).unwrap();
        for v in 0..4 {
            let view = p.view(0, v);
            let nz: Vec<(usize, f32)> =
                view.iter().copied().enumerate().filter(|&(_, x)| x != 0.0).collect();
            assert_eq!(nz.len(), 1, "view {v}: {nz:?}");
            assert_eq!(nz[0].0, 4 * 9 + 4);
            assert!((nz[0].1 - 4.0).abs() < 1e-6);
        }
    }

    #[test]
    fn off_center_source_moves_with_angle() {
        // source at +x: lateral +x at 0°, lateral 0 at 90°, -x at 180°
        let g = make_geometry(4, Orbit::Circular { radius_mm: 200.0 }, 9, 9, 4.0, 1).unwrap();
        let m = SystemModel::ideal(g, 1.0).unwrap();
        let mut x = ImageVolume::zeros([9, 9, 9], [4.0; 3]);
        let idx = x.index(7, 4, 4);
        x.values[idx] = 1.0;
        let p = forward_project(&x, &m, &[0, 1, 2]).unwrap();
        let argmax = |v: usize| {
            let s = p.view(0, v);
            (0..s.len()).max_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap() / 9
        };
        assert_eq!(argmax(0), 7);
        assert_eq!(argmax(1), 4);
        assert_eq!(argmax(2), 1);
    }

    #[test]
    fn beer_lambert_slab() {
        // point source at the center, slab of mu between it and the view-0 detector (+y)
        let n = 33;
        let g = make_geometry(4, Orbit::Circular { radius_mm: 200.0 }, n, 9, 4.0, 1).unwrap();
        let dims = [n, n, 9];
        let mu = 0.015f32;
        let mut mu_map = ImageVolume::zeros(dims, [4.0; 3]);
        let (j_lo, j_hi) = (20, 27); // 8 voxels = 32 mm, away from the source voxel (j = 16)
        for i in 0..n {
            for j in j_lo..=j_hi {
                for k in 0..9 {
                    let idx = mu_map.index(i, j, k);
                    mu_map.values[idx] = mu;
                }
            }
        }
        let mut x = ImageVolume::zeros(dims, [4.0; 3]);
        let c = x.index(16, 16, 4);
        x.values[c] = 1.0;
        let att = SystemModel::new(g.clone(), mu_map, 0.0, 0.0, 1.0).unwrap();
        let free = SystemModel::ideal(g, 1.0).unwrap();
        let pa = forward_project(&x, &att, &[0]).unwrap();
        let pf = forward_project(&x, &free, &[0]).unwrap();
        let ratio = pa.data.iter().sum::<f32>() / pf.data.iter().sum::<f32>();
        let expect = (-(mu as f64) * 32.0).exp() as f32;
        assert!((ratio / expect - 1.0).abs() < 0.02, "{ratio} vs {expect}");
        // the ray toward the 90° detector (-x) never enters the slab
        let p90 = forward_project(&x, &att, &[1]).unwrap();
        let f90 = forward_project(&x, &free, &[1]).unwrap();
        assert!((p90.data.iter().sum::<f32>() - f90.data.iter().sum::<f32>()).abs() < 1e-4);
    }

    #[test]
    fn linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dims = [16, 16, 8];
        let m = SystemModel::new(geom(16, 8, 5), ellipse_mu(dims, 0.012), 2.0, 0.02, 1.3).unwrap();
        let views: Vec<usize> = (0..5).collect();
        let x1 = random_volume(dims, &mut rng);
        let x2 = random_volume(dims, &mut rng);
        let alpha = 2.5f32;
        let mix = ImageVolume {
            values: x1.values.iter().zip(&x2.values).map(|(a, b)| alpha * a + b).collect(),
            ..x1.clone()
        };
        let p1 = forward_project(&x1, &m, &views).unwrap();
        let p2 = forward_project(&x2, &m, &views).unwrap();
        let pm = forward_project(&mix, &m, &views).unwrap();
        let norm: f64 = pm.data.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        let diff: f64 = pm
            .data
            .iter()
            .zip(p1.data.iter().zip(&p2.data))
            .map(|(&m, (&a, &b))| (m as f64 - (alpha as f64 * a as f64 + b as f64)).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(diff / norm < 1e-6, "{}", diff / norm);
    }

    #[test]
    fn adjoint_dot_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dims = [16, 16, 8];
        let views: Vec<usize> = (0..7).collect();
        for (mu, s0, slope) in [(0.0, 0.0, 0.0), (0.013, 2.0, 0.03)] {
            let m = SystemModel::new(geom(16, 8, 7), ellipse_mu(dims, mu), s0, slope, 0.7).unwrap();
            let x = random_volume(dims, &mut rng);
            let p = ProjectionStack::new(
                m.geometry().clone(),
                views.clone(),
                1,
                ProjectionKind::Mean,
                (0..7 * 128).map(|_| rng.random::<f32>()).collect(),
            )
            .unwrap();
            let ax = forward_project(&x, &m, &views).unwrap();
            let atp = back_project(&p, &m, &views).unwrap();
            let lhs: f64 = ax.data.iter().zip(&p.data).map(|(&a, &b)| a as f64 * b as f64).sum();
            let rhs: f64 = x.values.iter().zip(&atp.values).map(|(&a, &b)| a as f64 * b as f64).sum();
            assert!((lhs - rhs).abs() < 1e-5 * lhs.abs(), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn sensitivity_matches_assembled_matrix() {
        let dims = [8, 8, 8];
        let g = make_geometry(6, Orbit::Circular { radius_mm: 100.0 }, 8, 8, 4.0, 1).unwrap();
        let m = SystemModel::ideal(g, 1.0).unwrap();
        let views: Vec<usize> = (0..6).collect();
        // column j of A is the projection of unit voxel j
        let n = 512;
        let mut col_sums = vec![0f64; n];
        for (j, s) in col_sums.iter_mut().enumerate() {
            let mut e = ImageVolume::zeros(dims, [4.0; 3]);
            e.values[j] = 1.0;
            *s = forward_project(&e, &m, &views).unwrap().data.iter().map(|&v| v as f64).sum();
        }
        let sens = m.sensitivity(&views).unwrap();
        let probe = ImageVolume::zeros(dims, [4.0; 3]);
        for (j, (&a, &b)) in col_sums.iter().zip(&sens.values).enumerate() {
            assert!((a - b as f64).abs() < 1e-4 * a.max(1.0), "voxel {j}: {a} vs {b}");
        }
        // strictly positive inside the inscribed circle
        for i in 0..8 {
            for jj in 0..8 {
                let c = probe.voxel_center(i, jj, 0);
                if c[0].hypot(c[1]) < 12.0 {
                    assert!(sens.values[probe.index(i, jj, 0)] > 0.0);
                }
            }
        }
    }

    #[test]
    fn nonnegative_in_both_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dims = [16, 16, 8];
        let m = SystemModel::new(geom(16, 8, 4), ellipse_mu(dims, 0.02), 1.0, 0.05, 1.0).unwrap();
        let views = [0, 1, 2, 3];
        let x = random_volume(dims, &mut rng);
        let p = forward_project(&x, &m, &views).unwrap();
        assert!(p.data.iter().all(|&v| v >= 0.0));
        assert!(back_project(&p, &m, &views).unwrap().values.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn mismatched_dims_rejected() {
        let m = SystemModel::ideal(geom(16, 8, 4), 1.0).unwrap();
        let x = ImageVolume::zeros([16, 16, 9], [4.0; 3]);
        assert!(matches!(forward_project(&x, &m, &[0]), Err(Error::InvalidArgument(_))));
        let x = ImageVolume::zeros([16, 16, 8], [4.0; 3]);
        assert!(forward_project(&x, &m, &[4]).is_err());
        assert!(SystemModel::new(geom(16, 8, 4), ImageVolume::zeros([8, 8, 8], [4.0; 3]), 0.0, 0.0, 1.0).is_err());
    }
}
