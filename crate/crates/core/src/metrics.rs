//! Image- and projection-space figures of merit.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interp::Regime;

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("length mismatch: {a} vs {b}")));
    }
    Ok(())
}

fn masked<'a>(values: &'a [f32], mask: &'a [bool]) -> impl Iterator<Item = f64> + 'a {
    values.iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v as f64)
}

fn mean_in(values: &[f32], mask: &[bool]) -> Result<f64> {
    check_len(values.len(), mask.len())?;
    let (sum, n) = masked(values, mask).fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        return Err(Error::invalid("empty region"));
    }
    Ok(sum / n as f64)
}

/// RMS difference over the region divided by the reference RMS there.
pub fn nrmsd(estimate: &[f32], reference: &[f32], region: Option<&[bool]>) -> Result<f64> {
    check_len(estimate.len(), reference.len())?;
    if let Some(m) = region {
        check_len(m.len(), reference.len())?;
    }
    let (mut diff, mut norm, mut n) = (0.0, 0.0, 0usize);
    for (k, (&e, &r)) in estimate.iter().zip(reference).enumerate() {
        if region.is_some_and(|m| !m[k]) {
            continue;
        }
        diff += (e as f64 - r as f64).powi(2);
        norm += (r as f64).powi(2);
        n += 1;
    }
    if n == 0 || norm == 0.0 {
        return Err(Error::invalid("reference has zero norm over the region"));
    }
    Ok((diff / n as f64).sqrt() / (norm / n as f64).sqrt())
}

/// Mean of the reconstruction over the VOI relative to the true mean there.
pub fn activity_recovery(recon: &[f32], truth: &[f32], voi: &[bool]) -> Result<f64> {
    let t = mean_in(truth, voi)?;
    if !(t > 0.0) {
        return Err(Error::invalid("true activity in the VOI must be positive"));
    }
    Ok(mean_in(recon, voi)? / t)
}

pub fn arnr(ar: f64, std_bkg: f64) -> Result<f64> {
    if !(std_bkg > 0.0) {
        return Err(Error::invalid("background standard deviation must be positive"));
    }
    Ok(ar / std_bkg)
}

/// Population (divide-by-n) standard deviation over the background mask.
pub fn bkg_std(recon: &[f32], bkg: &[bool]) -> Result<f64> {
    check_len(recon.len(), bkg.len())?;
    let n = bkg.iter().filter(|&&m| m).count();
    if n < 2 {
        return Err(Error::invalid("background region needs at least two voxels"));
    }
    let mean = mean_in(recon, bkg)?;
    let var = masked(recon, bkg).map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    Ok(var.sqrt())
}

pub fn cnr(recon: &[f32], voi: &[bool], bkg: &[bool]) -> Result<f64> {
    let sd = bkg_std(recon, bkg)?;
    if !(sd > 0.0) {
        return Err(Error::invalid("background standard deviation is zero"));
    }
    Ok((mean_in(recon, voi)? - mean_in(recon, bkg)?) / sd)
}

/// Contrast-to-noise of a sparse-view reconstruction as a percentage of the
/// full-view one.
pub fn rcnr(cnr_sparse: f64, cnr_full: f64) -> Result<f64> {
    if cnr_full == 0.0 || !cnr_full.is_finite() {
        return Err(Error::invalid("full-view CNR must be finite and nonzero"));
    }
    Ok(100.0 * cnr_sparse / cnr_full)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProfileSample {
    pub u: usize,
    pub v: usize,
    pub value: f32,
}

/// Pixel values along the discrete segment from `start` to `end` (both
/// `(u, v)`, inclusive) of a `nu × nv` view, Bresenham traversal.
pub fn line_profile(
    view: &[f32],
    nu: usize,
    nv: usize,
    start: (usize, usize),
    end: (usize, usize),
) -> Result<Vec<ProfileSample>> {
    check_len(view.len(), nu * nv)?;
    for (u, v) in [start, end] {
        if u >= nu || v >= nv {
            return Err(Error::invalid(format!("profile endpoint ({u}, {v}) outside {nu}x{nv} view")));
        }
    }
    let (mut u, mut v) = (start.0 as isize, start.1 as isize);
    let (u1, v1) = (end.0 as isize, end.1 as isize);
    let du = (u1 - u).abs();
    let dv = -(v1 - v).abs();
    let su = if u < u1 { 1 } else { -1 };
    let sv = if v < v1 { 1 } else { -1 };
    let mut err = du + dv;
    let mut out = Vec::new();
    loop {
        let (pu, pv) = (u as usize, v as usize);
        out.push(ProfileSample { u: pu, v: pv, value: view[pu * nv + pv] });
        if u == u1 && v == v1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dv {
            err += dv;
            u += su;
        }
        if e2 <= du {
            err += du;
            v += sv;
        }
    }
    Ok(out)
}

/// Number of local maxima whose prominence exceeds `min_prominence` times
/// the profile maximum. Plateaus count once; of two equally high maxima the
/// right one is treated as the higher, so a shallow dip between equal peaks
/// yields a single peak.
pub fn count_peaks(values: &[f32], min_prominence: f32) -> usize {
    let n = values.len();
    if n == 0 {
        return 0;
    }
    let top = values.iter().copied().fold(f32::MIN, f32::max);
    let threshold = min_prominence * top.abs();
    let mut count = 0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[j + 1] == values[i] {
            j += 1;
        }
        let peak = values[i];
        let is_max = (i == 0 || values[i - 1] < peak) && (j + 1 == n || values[j + 1] < peak);
        if is_max {
            // lowest point on each side before reaching higher ground
            let left: Vec<f32> = values[..i].iter().rev().take_while(|&&x| x <= peak).copied().collect();
            let right: Vec<f32> = values[j + 1..].iter().take_while(|&&x| x < peak).copied().collect();
            let left_open = left.len() == i;
            let right_open = right.len() == n - j - 1;
            let left_min = left.iter().copied().fold(peak, f32::min);
            let right_min = right.iter().copied().fold(peak, f32::min);
            let base = match (left_open, right_open) {
                (true, true) => left_min.min(right_min),
                (true, false) => right_min,
                (false, true) => left_min,
                (false, false) => left_min.max(right_min),
            };
            if peak - base > threshold {
                count += 1;
            }
        }
        i = j + 1;
    }
    count
}

/// One row of the results table. Projection-space rows carry only `nrmsd`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub regime: Regime,
    pub df: usize,
    pub voi: String,
    pub nrmsd: Option<f64>,
    pub ar: Option<f64>,
    pub arnr: Option<f64>,
    pub cnr: Option<f64>,
    pub rcnr: Option<f64>,
    pub std_bkg: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

pub const CSV_COLUMNS: [&str; 9] = ["regime", "df", "voi", "nrmsd", "ar", "arnr", "cnr", "rcnr", "std_bkg"];

impl MetricsReport {
    pub fn find(&self, regime: Regime, df: usize, voi: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.regime == regime && r.df == df && r.voi == voi)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_COLUMNS)?;
        let opt = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.regime.name().to_string(),
                r.df.to_string(),
                r.voi.clone(),
                opt(r.nrmsd),
                opt(r.ar),
                opt(r.arnr),
                opt(r.cnr),
                opt(r.rcnr),
                opt(r.std_bkg),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn nrmsd_examples() {
        let x = [1.0f32, 2.0, 3.0, -4.0];
        assert_eq!(nrmsd(&x, &x, None).unwrap(), 0.0);
        assert_eq!(nrmsd(&[0.0; 4], &x, None).unwrap(), 1.0);
        let two: Vec<f32> = x.iter().map(|v| 2.0 * v).collect();
        assert!((nrmsd(&two, &x, None).unwrap() - 1.0).abs() < 1e-12);
        assert!(nrmsd(&x, &[0.0; 4], None).is_err());
        let region = [true, false, false, false];
        assert!((nrmsd(&[2.0, 0.0, 0.0, 0.0], &x, Some(&region)).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn recovery_examples() {
        let t = [2.0f32, 4.0, 6.0];
        let voi = [true, true, false];
        assert_eq!(activity_recovery(&t, &t, &voi).unwrap(), 1.0);
        let half: Vec<f32> = t.iter().map(|v| 0.5 * v).collect();
        assert_eq!(activity_recovery(&half, &t, &voi).unwrap(), 0.5);
        assert!(activity_recovery(&t, &t, &[false; 3]).is_err());
        assert_eq!(arnr(0.8, 0.4).unwrap(), 2.0);
        assert!(arnr(0.8, 0.0).is_err());
    }

    #[test]
    fn cnr_examples() {
        // VOI mean 10; background {-2, 6} has mean 2 and population SD 4
        let img = [10.0f32, 10.0, -2.0, 6.0];
        let voi = [true, true, false, false];
        let bkg = [false, false, true, true];
        assert_eq!(cnr(&img, &voi, &bkg).unwrap(), 2.0);
        let flat_voi = [2.0f32, 2.0, -2.0, 6.0];
        assert_eq!(cnr(&flat_voi, &voi, &bkg).unwrap(), 0.0);
        assert_eq!(rcnr(3.3, 3.3).unwrap(), 100.0);
        assert!(cnr(&[1.0, 1.0, 1.0, 1.0], &voi, &bkg).is_err());
    }

    #[test]
    fn std_examples() {
        assert_eq!(bkg_std(&[3.0, 3.0, 3.0], &[true; 3]).unwrap(), 0.0);
        assert_eq!(bkg_std(&[0.0, 2.0], &[true, true]).unwrap(), 1.0);
        assert!(bkg_std(&[1.0, 2.0], &[true, false]).is_err());
    }

    #[test]
    fn std_matches_naive_two_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let n = rng.random_range(2..500);
            let v: Vec<f32> = (0..n).map(|_| rng.random_range(-5.0..50.0)).collect();
            let m: Vec<bool> = (0..n).map(|i| i < 2 || rng.random_bool(0.6)).collect();
            let sel: Vec<f64> = v.iter().zip(&m).filter(|(_, &b)| b).map(|(&x, _)| x as f64).collect();
            let mut sum = 0.0;
            for x in &sel {
                sum += x;
            }
            let mean = sum / sel.len() as f64;
            let mut ss = 0.0;
            for x in &sel {
                ss += (x - mean) * (x - mean);
            }
            let naive = (ss / sel.len() as f64).sqrt();
            assert!((bkg_std(&v, &m).unwrap() - naive).abs() < 1e-10);
        }
    }

    #[test]
    fn profiles() {
        let (nu, nv) = (5, 6);
        let view: Vec<f32> = (0..nu * nv).map(|i| i as f32).collect();
        let row = line_profile(&view, nu, nv, (2, 0), (2, 5)).unwrap();
        let vals: Vec<f32> = row.iter().map(|s| s.value).collect();
        assert_eq!(vals, view[12..18].to_vec());
        let diag = line_profile(&view, nu, nv, (0, 0), (4, 4)).unwrap();
        assert_eq!(diag.len(), 5);
        assert!(diag.iter().all(|s| s.u == s.v));
        let flat = vec![7.0f32; nu * nv];
        assert!(line_profile(&flat, nu, nv, (0, 1), (4, 5)).unwrap().iter().all(|s| s.value == 7.0));
        assert!(line_profile(&view, nu, nv, (0, 0), (5, 0)).is_err());
    }

    #[test]
    fn peak_counting() {
        assert_eq!(count_peaks(&[0.0, 1.0, 0.0, 1.0, 0.0], 0.1), 2);
        assert_eq!(count_peaks(&[0.0, 1.0, 0.98, 1.0, 0.0], 0.1), 1);
        assert_eq!(count_peaks(&[0.0, 2.0, 2.0, 0.0], 0.1), 1);
        assert_eq!(count_peaks(&[5.0; 4], 0.1), 0);
        let bumps: Vec<f32> = (0..40)
            .map(|i| {
                let x = i as f32;
                [5.0f32, 15.0, 25.0, 35.0].iter().map(|c| (-(x - c).powi(2) / 4.0).exp()).sum()
            })
            .collect();
        assert_eq!(count_peaks(&bumps, 0.1), 4);
    }

    #[test]
    fn csv_has_fixed_columns() {
        let report = MetricsReport {
            rows: vec![MetricsRow {
                regime: Regime::Linint,
                df: 4,
                voi: "projections".into(),
                nrmsd: Some(0.095),
                ar: None,
                arnr: None,
                cnr: None,
                rcnr: None,
                std_bkg: None,
            }],
        };
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "regime,df,voi,nrmsd,ar,arnr,cnr,rcnr,std_bkg");
        assert_eq!(lines.next().unwrap(), "linint,4,projections,0.095000,,,,,");
    }

    proptest! {
        #[test]
        fn nrmsd_joint_scale_invariant(vals in proptest::collection::vec(0.1f32..100.0, 2..50), alpha in 0.01f32..100.0) {
            let est: Vec<f32> = vals.iter().enumerate().map(|(i, v)| v + (i % 3) as f32).collect();
            let a = nrmsd(&est, &vals, None).unwrap();
            let es: Vec<f32> = est.iter().map(|v| v * alpha).collect();
            let vs: Vec<f32> = vals.iter().map(|v| v * alpha).collect();
            let b = nrmsd(&es, &vs, None).unwrap();
            prop_assert!((a - b).abs() < 1e-5 * a.max(1e-3));
        }

        #[test]
        fn cnr_shift_invariant(vals in proptest::collection::vec(0.0f32..10.0, 8..40), shift in -5.0f32..5.0) {
            let n = vals.len();
            let voi: Vec<bool> = (0..n).map(|i| i < 3).collect();
            let bkg: Vec<bool> = (0..n).map(|i| i >= 3).collect();
            prop_assume!(bkg_std(&vals, &bkg).unwrap() > 1e-2);
            let shifted: Vec<f32> = vals.iter().map(|v| v + shift).collect();
            let a = cnr(&vals, &voi, &bkg).unwrap();
            let b = cnr(&shifted, &voi, &bkg).unwrap();
            prop_assert!((a - b).abs() < 1e-3 * a.abs().max(1.0));
        }
    }
}
