use std::io::Write;

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{loss, Adam, Encoding, FieldModel, PlateauScheduler};
use crate::error::{Error, Result};
use crate::geometry::{coordinate_grid, CoordinateSample, ScanGeometry};
use crate::par;
use crate::simulate::{ProjectionKind, ProjectionStack};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig { factor: 0.5, patience: 10, min_lr: 1e-5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub huber_delta: f64,
    pub val_fraction: f64,
    pub plateau: PlateauConfig,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub encoding: Encoding,
    /// Nearest-neighbor refinement of the detector grid for training targets
    /// and synthesis.
    pub upsample: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch: 10_000,
            epochs: 200,
            huber_delta: 1.0,
            val_fraction: 0.2,
            plateau: PlateauConfig::default(),
            seed: 0,
            hidden: vec![256; 12],
            encoding: Encoding::Raw,
            upsample: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::invalid("val_fraction must lie in (0, 1)"));
        }
        if self.batch == 0 || self.epochs == 0 || self.upsample == 0 {
            return Err(Error::invalid("batch, epochs and upsample must be at least 1"));
        }
        if !(self.huber_delta > 0.0) || !(self.lr > 0.0) {
            return Err(Error::invalid("huber_delta and lr must be positive"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::invalid("at least one hidden layer of nonzero width is required"));
        }
        Ok(())
    }
}

/// Per-epoch training history. Equality ignores the wall time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub lr: Vec<f64>,
    pub best_epoch: usize,
    pub wall_time_s: f64,
}

impl PartialEq for TrainReport {
    fn eq(&self, other: &Self) -> bool {
        self.train_loss == other.train_loss
            && self.val_loss == other.val_loss
            && self.lr == other.lr
            && self.best_epoch == other.best_epoch
    }
}

impl TrainReport {
    pub fn best_val_loss(&self) -> f64 {
        self.val_loss[self.best_epoch]
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "train_loss", "val_loss", "lr"])?;
        for e in 0..self.val_loss.len() {
            w.write_record([
                e.to_string(),
                format!("{:.9e}", self.train_loss[e]),
                format!("{:.9e}", self.val_loss[e]),
                format!("{:e}", self.lr[e]),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Training samples on the refined grid of every measured view, in
/// ascending view order. `groups[k]` identifies the native detector pixel
/// that sample `k` was copied from.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub coords: Vec<CoordinateSample>,
    pub targets: Array2<f32>,
    pub groups: Vec<u32>,
    pub n_groups: usize,
}

pub fn prepare_targets(measured: &ProjectionStack, upsample: usize) -> Result<TrainingSet> {
    measured.validate()?;
    if measured.views.is_empty() {
        return Err(Error::invalid("no measured views to train on"));
    }
    if upsample == 0 {
        return Err(Error::invalid("upsample factor must be at least 1"));
    }
    let g = &measured.geometry;
    let (nu, nv) = (g.det_nu, g.det_nv);
    let (fu, fv) = (nu * upsample, nv * upsample);
    let mut order: Vec<usize> = (0..measured.views.len()).collect();
    order.sort_by_key(|&p| measured.views[p]);

    let n = order.len() * fu * fv;
    let mut coords = Vec::with_capacity(n);
    let mut targets = Array2::zeros((n, measured.n_windows));
    let mut groups = Vec::with_capacity(n);
    for (rank, &pos) in order.iter().enumerate() {
        let base = coords.len();
        coords.extend(coordinate_grid(g, measured.views[pos], upsample)?);
        for i in 0..fu {
            for j in 0..fv {
                let k = base + i * fv + j;
                let src = (i / upsample) * nv + j / upsample;
                groups.push(((rank * nu * nv) + src) as u32);
                for w in 0..measured.n_windows {
                    targets[[k, w]] = measured.view(w, pos)[src];
                }
            }
        }
    }
    Ok(TrainingSet { coords, targets, groups, n_groups: order.len() * nu * nv })
}

pub fn train(measured: &ProjectionStack, config: &TrainConfig) -> Result<(FieldModel, TrainReport)> {
    train_with(measured, config, |_, _| {})
}

/// As [`train`], calling `on_epoch(epoch, report_so_far)` after each epoch.
pub fn train_with<F>(
    measured: &ProjectionStack,
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<(FieldModel, TrainReport)>
where
    F: FnMut(usize, &TrainReport),
{
    config.validate()?;
    if measured.views.len() < 2 {
        return Err(Error::invalid("training needs at least two measured views"));
    }
    let started = Stopwatch::start();
    let set = prepare_targets(measured, config.upsample)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // hold out whole native pixels so no copy of a validation pixel is trained on
    let mut perm: Vec<u32> = (0..set.n_groups as u32).collect();
    perm.shuffle(&mut rng);
    let n_val = ((config.val_fraction * set.n_groups as f64).round() as usize).clamp(1, set.n_groups - 1);
    let mut is_val = vec![false; set.n_groups];
    for &g in &perm[..n_val] {
        is_val[g as usize] = true;
    }
    let (val_idx, mut train_idx): (Vec<usize>, Vec<usize>) =
        (0..set.coords.len()).partition(|&k| is_val[set.groups[k] as usize]);

    let x = config.encoding.encode::<f32>(&set.coords);
    let x_val = x.select(Axis(0), &val_idx);
    let t_val = set.targets.select(Axis(0), &val_idx);

    let n_out = measured.n_windows;
    let mut model = FieldModel::<f32>::new(config.encoding, &config.hidden, n_out, rng.next_u64())?;
    // start the linear output at the mean training count of each window
    let means = set.targets.select(Axis(0), &train_idx).mean_axis(Axis(0)).expect("nonempty");
    model.biases.last_mut().expect("output layer").assign(&means);

    let mut adam = Adam::new(model.tensors().iter().map(|t| t.len()));
    let mut sched = PlateauScheduler::new(config.lr, config.plateau.factor, config.plateau.patience, config.plateau.min_lr)?;
    let mut report = TrainReport { train_loss: vec![], val_loss: vec![], lr: vec![], best_epoch: 0, wall_time_s: 0.0 };
    let mut best = model.clone();
    let mut lr = config.lr;

    for epoch in 0..config.epochs {
        train_idx.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in train_idx.chunks(config.batch) {
            let xb = x.select(Axis(0), batch);
            let tb = set.targets.select(Axis(0), batch);
            let (l, grads) = model.loss_and_grad(xb.view(), tb.view(), config.huber_delta)?;
            if !l.is_finite() {
                return Err(Error::numeric(format!("training loss became {l} in epoch {epoch}")));
            }
            sum += l * batch.len() as f64;
            adam.step(&mut model.tensors_mut(), &grads.tensors(), lr)?;
        }
        let val = validation_loss(&model, &x_val, &t_val, config.huber_delta);
        if !val.is_finite() {
            return Err(Error::numeric(format!("validation loss became {val} in epoch {epoch}")));
        }
        report.train_loss.push(sum / train_idx.len() as f64);
        report.val_loss.push(val);
        report.lr.push(lr);
        if val < report.val_loss[report.best_epoch] || epoch == 0 {
            report.best_epoch = epoch;
            best.clone_from(&model);
        }
        lr = sched.observe(val);
        report.wall_time_s = started.seconds();
        on_epoch(epoch, &report);
    }
    Ok((best, report))
}

fn validation_loss(model: &FieldModel, x: &Array2<f32>, t: &Array2<f32>, delta: f64) -> f64 {
    const ROWS: usize = 8192;
    let chunks = x.nrows().div_ceil(ROWS);
    let parts = par::map_collect(chunks, |c| {
        let rows = c * ROWS..((c + 1) * ROWS).min(x.nrows());
        let pred = model.forward_encoded(x.slice(s![rows.clone(), ..]));
        loss::huber_sum(pred.view(), t.slice(s![rows, ..]), delta)
    });
    parts.iter().sum::<f64>() / t.len() as f64
}

/// Evaluate the field on the refined grid of every skipped view and average
/// back to native pixels; negative predictions are clamped to zero.
pub fn synthesize(
    model: &FieldModel,
    geometry: &ScanGeometry,
    skipped: &[usize],
    upsample: usize,
) -> Result<ProjectionStack> {
    model.check_finite()?;
    if upsample == 0 {
        return Err(Error::invalid("upsample factor must be at least 1"));
    }
    let (nu, nv) = (geometry.det_nu, geometry.det_nv);
    let n_out = model.n_out();
    let fv = nv * upsample;
    let per_view = par::map_collect(skipped.len(), |k| -> Result<Vec<f32>> {
        let coords = coordinate_grid(geometry, skipped[k], upsample)?;
        let x = model.encoding.encode::<f32>(&coords);
        let pred = model.forward_encoded(x.view());
        let mut out = vec![0.0f32; n_out * nu * nv];
        let norm = 1.0 / (upsample * upsample) as f64;
        for w in 0..n_out {
            for i in 0..nu {
                for j in 0..nv {
                    let mut acc = 0.0f64;
                    for a in 0..upsample {
                        for b in 0..upsample {
                            acc += pred[[(i * upsample + a) * fv + j * upsample + b, w]] as f64;
                        }
                    }
                    out[(w * nu + i) * nv + j] = ((acc * norm) as f32).max(0.0);
                }
            }
        }
        Ok(out)
    });
    let mut stack =
        ProjectionStack::zeros(geometry.clone(), skipped.to_vec(), n_out, ProjectionKind::Synthesized);
    let ppv = nu * nv;
    for (k, view) in per_view.into_iter().enumerate() {
        let view = view?;
        for w in 0..n_out {
            stack.view_mut(w, k).copy_from_slice(&view[w * ppv..(w + 1) * ppv]);
        }
    }
    Ok(stack)
}

/// Wall clock; `std::time::Instant` is unavailable on bare wasm, where this
/// reads zero.
struct Stopwatch(#[cfg(not(target_arch = "wasm32"))] std::time::Instant);

impl Stopwatch {
    #[cfg(not(target_arch = "wasm32"))]
    fn start() -> Self {
        Stopwatch(std::time::Instant::now())
    }
    #[cfg(target_arch = "wasm32")]
    fn start() -> Self {
        Stopwatch()
    }
    #[cfg(not(target_arch = "wasm32"))]
    fn seconds(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
    #[cfg(target_arch = "wasm32")]
    fn seconds(&self) -> f64 {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_geometry, Orbit};

    fn geometry(n_views: usize, nu: usize, nv: usize) -> ScanGeometry {
        make_geometry(n_views, Orbit::Circular { radius_mm: 250.0 }, nu, nv, 4.8, 3).unwrap()
    }

    fn stack(g: &ScanGeometry, views: Vec<usize>, f: impl Fn(usize, usize, usize, usize) -> f32) -> ProjectionStack {
        let mut s = ProjectionStack::zeros(g.clone(), views.clone(), 3, ProjectionKind::Mean);
        for w in 0..3 {
            for (p, &view) in views.iter().enumerate() {
                let v = s.view_mut(w, p);
                for i in 0..g.det_nu {
                    for j in 0..g.det_nv {
                        v[i * g.det_nv + j] = f(w, view, i, j);
                    }
                }
            }
        }
        s
    }

    fn small_config() -> TrainConfig {
        TrainConfig { hidden: vec![16, 16], epochs: 40, batch: 64, lr: 3e-3, ..TrainConfig::default() }
    }

    #[test]
    fn upsampled_targets() {
        let (nu, nv) = (8, 10);
        let g = geometry(8, nu, nv);
        let value = |w: usize, view: usize, i: usize, j: usize| (w * 10_000 + view * 1000 + i * 10 + j) as f32;
        let s = stack(&g, vec![4, 0], value);
        let set = prepare_targets(&s, 2).unwrap();
        assert_eq!(set.coords.len(), 2 * 4 * nu * nv);
        assert_eq!(set.n_groups, 2 * nu * nv);
        // each native pixel appears four times with its value; views in ascending order
        let mut counts = vec![0; set.n_groups];
        for (k, &gid) in set.groups.iter().enumerate() {
            counts[gid as usize] += 1;
            let (rank, src) = (gid as usize / (nu * nv), gid as usize % (nu * nv));
            let view = [0, 4][rank];
            for w in 0..3 {
                assert_eq!(set.targets[[k, w]], value(w, view, src / nv, src % nv));
            }
        }
        assert!(counts.iter().all(|&c| c == 4));
        // 2x2 mean of the refined view gives back the original exactly
        let fv = 2 * nv;
        for i in 0..nu {
            for j in 0..nv {
                let m: f32 = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|&(a, b)| set.targets[[(2 * i + a) * fv + 2 * j + b, 1]])
                    .sum::<f32>()
                    / 4.0;
                assert_eq!(m, value(1, 0, i, j));
            }
        }
        let empty = ProjectionStack::zeros(g, vec![], 3, ProjectionKind::Sampled);
        assert!(prepare_targets(&empty, 2).is_err());
    }

    #[test]
    fn constant_targets() {
        let g = geometry(24, 8, 8);
        let measured: Vec<usize> = (0..24).step_by(2).collect();
        let skipped: Vec<usize> = (1..24).step_by(2).collect();
        // Between measured angles the fit keeps an absolute wiggle of a few
        // hundredths of a count left over from initialization, so the levels
        // are count-like rather than unit-sized.
        let level = [40.0, 16.0, 8.0];
        let s = stack(&g, measured, |w, _, _, _| level[w]);
        let set = prepare_targets(&s, 2).unwrap();
        for row in set.targets.rows() {
            assert_eq!(row.to_vec(), level.to_vec());
        }
        let cfg = TrainConfig {
            epochs: 60,
            lr: 1e-2,
            plateau: PlateauConfig { patience: 4, ..PlateauConfig::default() },
            ..small_config()
        };
        let (model, report) = train(&s, &cfg).unwrap();
        assert!(report.best_val_loss() < 1e-4, "{}", report.best_val_loss());
        let syn = synthesize(&model, &g, &skipped, 2).unwrap();
        assert_eq!(syn.n_stack_views(), 12);
        assert_eq!(syn.n_windows, 3);
        for w in 0..3 {
            let c = level[w];
            let worst = syn.window(w).iter().map(|&x| (x - c).abs() / c).fold(0.0, f32::max);
            assert!(worst < 0.01, "window {w}: {worst}");
        }
    }

    #[test]
    fn deterministic_and_order_invariant() {
        let g = geometry(12, 8, 9);
        let f = |w: usize, view: usize, i: usize, j: usize| ((w + 1) * (i + 2 * j) + view) as f32 * 0.3;
        let s = stack(&g, vec![0, 3, 6, 9], f);
        let permuted = stack(&g, vec![6, 0, 9, 3], f);
        let cfg = TrainConfig { epochs: 5, ..small_config() };
        let (m1, r1) = train(&s, &cfg).unwrap();
        let (m2, r2) = train(&s, &cfg).unwrap();
        let (m3, r3) = train(&permuted, &cfg).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(m1, m2);
        assert_eq!(r1, r3);
        assert_eq!(m1, m3);
        let a = synthesize(&m1, &g, &[1, 2], 2).unwrap();
        let b = synthesize(&m1, &g, &[1, 2], 2).unwrap();
        assert_eq!(a, b);
        let other = train(&s, &TrainConfig { seed: 1, ..cfg }).unwrap().1;
        assert_ne!(r1, other);
    }

    #[test]
    fn best_epoch_has_minimum_val_loss() {
        let g = geometry(12, 8, 9);
        let s = stack(&g, vec![0, 3, 6, 9], |w, view, i, j| ((w + i * j + view) % 7) as f32);
        let (_, r) = train(&s, &small_config()).unwrap();
        assert_eq!(r.val_loss.len(), 40);
        assert!(r.val_loss.iter().all(|&v| r.best_val_loss() <= v));
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 41);
    }

    #[test]
    fn rejects_bad_config() {
        let g = geometry(8, 8, 8);
        let one = stack(&g, vec![0], |_, _, _, _| 1.0);
        assert!(train(&one, &small_config()).is_err());
        let two = stack(&g, vec![0, 4], |_, _, _, _| 1.0);
        for cfg in [
            TrainConfig { val_fraction: 1.0, ..small_config() },
            TrainConfig { batch: 0, ..small_config() },
            TrainConfig { huber_delta: 0.0, ..small_config() },
        ] {
            assert!(train(&two, &cfg).is_err());
        }
    }

    #[test]
    fn synthesis_clamps_negative() {
        let mut m = FieldModel::<f32>::zeros(Encoding::Raw, &[2], 3).unwrap();
        m.biases[1] = ndarray::array![-1.0, 0.0, 2.0];
        let g = geometry(8, 8, 8);
        let syn = synthesize(&m, &g, &[3], 2).unwrap();
        assert!(syn.window(0).iter().all(|&x| x == 0.0));
        assert!(syn.window(2).iter().all(|&x| x == 2.0));
        assert_eq!(syn.kind, ProjectionKind::Synthesized);
    }
}
