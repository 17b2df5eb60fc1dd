//! End-to-end experiment: phantom → simulated scan → per-DF synthesis
//! (field and linear interpolation) → four OSEM reconstructions → metrics.
//!
//! Every stage writes its outputs under the experiment's output directory and
//! records them, with SHA-256 content hashes, in `manifest.json`. Each stage
//! can also be run on its own from the files of the previous one.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{read_mask, read_model, read_stack, read_volume, write_mask, write_model, write_stack, write_volume};
use crate::error::{Error, Result};
use crate::field::{synthesize, train, FieldModel, TrainConfig, TrainReport};
use crate::geometry::{split_views, Orbit, ScanGeometry, ViewSplit};
use crate::interp::{assemble_regime, linear_interpolate_views, Regime};
use crate::metrics::{self, line_profile, MetricsReport, MetricsRow};
use crate::phantom::{build_phantom, ImageVolume, Phantom, PhantomSpec, VoiRole};
use crate::projector::SystemModel;
use crate::recon::{osem_with, tew_scatter_estimate, OsemOutput, ReconConfig};
use crate::simulate::{acquire, ProjectionStack, ScatterParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeometryConfig {
    pub n_views: usize,
    pub orbit: Orbit,
    pub det_nu: usize,
    pub det_nv: usize,
    pub det_pixel_mm: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            n_views: 60,
            orbit: Orbit::Elliptical { semi_x_mm: 140.0, semi_y_mm: 100.0, clearance_mm: 50.0 },
            det_nu: 64,
            det_nv: 64,
            det_pixel_mm: 4.8,
        }
    }
}

impl GeometryConfig {
    pub fn build(&self) -> Result<ScanGeometry> {
        ScanGeometry::new(self.n_views, self.orbit, self.det_nu, self.det_nv, self.det_pixel_mm, 3)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// JSON phantom description; overrides `phantom` when set.
    pub phantom_spec: Option<PathBuf>,
    pub phantom: PhantomSpec,
    pub geometry: GeometryConfig,
    pub psf_sigma0_mm: f64,
    pub psf_slope: f64,
    /// Expected photopeak counts summed over all views.
    pub count_target: f64,
    pub scatter: ScatterParams,
    pub dfs: Vec<usize>,
    pub train: TrainConfig,
    pub recon: ReconConfig,
    pub seed: u64,
    #[serde(skip_serializing)]
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    /// Desk-scale run: 64×64 detector, 60 views, a 6×128 network for 20
    /// epochs.
    fn default() -> Self {
        ExperimentConfig {
            phantom_spec: None,
            phantom: PhantomSpec::default(),
            geometry: GeometryConfig::default(),
            psf_sigma0_mm: 2.0,
            psf_slope: 0.02,
            count_target: 5e5,
            scatter: ScatterParams::default(),
            dfs: vec![2, 4, 8],
            train: TrainConfig { hidden: vec![128; 6], epochs: 20, ..TrainConfig::default() },
            recon: ReconConfig::default(),
            seed: 0,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    /// Full-size acquisition: 128×128 detector, 120 views, 12×256 network
    /// trained for 200 epochs.
    pub fn full_size() -> Self {
        ExperimentConfig {
            geometry: GeometryConfig { n_views: 120, det_nu: 128, det_nv: 128, ..GeometryConfig::default() },
            count_target: 2e6,
            train: TrainConfig::default(),
            ..ExperimentConfig::default()
        }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| Error::Config(e.to_string());
        let g = self.geometry.build().map_err(cfg)?;
        self.train.validate().map_err(cfg)?;
        self.scatter.validate().map_err(cfg)?;
        if self.dfs.is_empty() {
            return Err(Error::Config("at least one down-sampling factor is required".into()));
        }
        for &df in &self.dfs {
            if df == 0 || g.n_views() / df < 2 {
                return Err(Error::Config(format!("down-sampling factor {df} leaves fewer than 2 views")));
            }
        }
        if !(self.count_target > 0.0 && self.count_target.is_finite()) {
            return Err(Error::Config("count_target must be positive".into()));
        }
        if self.recon.n_subsets == 0 || self.recon.n_iterations == 0 {
            return Err(Error::Config("recon needs at least one subset and one iteration".into()));
        }
        Ok(())
    }

    pub fn phantom_spec(&self) -> Result<PhantomSpec> {
        match &self.phantom_spec {
            None => Ok(self.phantom.clone()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    /// Reconstruction grid implied by the detector: `nu × nu × nv` voxels at
    /// the detector pitch.
    pub fn grid(&self) -> ([usize; 3], [f64; 3]) {
        let g = &self.geometry;
        ([g.det_nu, g.det_nu, g.det_nv], [g.det_pixel_mm; 3])
    }
}

/// File layout below the output directory.
pub mod layout {
    use crate::interp::Regime;

    pub const MANIFEST: &str = "manifest.json";
    pub const ACTIVITY: &str = "phantom/activity.spj";
    pub const MU_MAP: &str = "phantom/mu_map.spj";
    pub const SCAN_FULL: &str = "scan/full.spj";
    pub const SCAN_MEAN: &str = "scan/mean.spj";
    pub const SCATTER_TRUTH: &str = "scan/scatter_truth.spj";
    pub const SIMULATION: &str = "scan/simulation.json";
    pub const METRICS_CSV: &str = "metrics.csv";
    pub const METRICS_JSON: &str = "metrics.json";

    pub fn mask(name: &str) -> String {
        format!("phantom/mask_{name}.spj")
    }
    pub fn df_dir(df: usize) -> String {
        format!("df{df}")
    }
    pub fn measured(df: usize) -> String {
        format!("df{df}/measured.spj")
    }
    pub fn model(df: usize) -> String {
        format!("df{df}/field_model.spj")
    }
    pub fn train_loss(df: usize) -> String {
        format!("df{df}/train_loss.csv")
    }
    pub fn synthesized(df: usize, regime: Regime) -> String {
        format!("df{df}/synth_{}.spj", regime.name())
    }
    pub fn profile(df: usize) -> String {
        format!("df{df}/profile.csv")
    }
    /// The full regime does not depend on the DF and lives at the top level.
    pub fn recon(df: usize, regime: Regime) -> String {
        match regime {
            Regime::Full => "recon_full.spj".into(),
            r => format!("df{df}/recon_{}.spj", r.name()),
        }
    }
    pub fn recon_iterations(df: usize, regime: Regime) -> String {
        match regime {
            Regime::Full => "recon_full_iterations.csv".into(),
            r => format!("df{df}/recon_{}_iterations.csv", r.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub kind: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config: Option<serde_json::Value>,
    /// Relative path → artifact.
    pub artifacts: BTreeMap<String, Artifact>,
}

impl Manifest {
    pub fn load_or_new(out: &Path) -> Result<Self> {
        let p = out.join(layout::MANIFEST);
        if !p.exists() {
            return Ok(Manifest::default());
        }
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", p.display())))
    }

    pub fn save(&self, out: &Path) -> Result<()> {
        write_file(&out.join(layout::MANIFEST), serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn record(&mut self, out: &Path, rel: &str, kind: &str) -> Result<()> {
        let p = out.join(rel);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        self.artifacts.insert(
            rel.to_string(),
            Artifact { kind: kind.to_string(), sha256: sha256_hex(&bytes), bytes: bytes.len() as u64 },
        );
        Ok(())
    }

    pub fn count_kind(&self, kind: &str) -> usize {
        self.artifacts.values().filter(|a| a.kind == kind).count()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

/// Output directory plus the manifest being built.
pub struct Run<'a> {
    pub config: &'a ExperimentConfig,
    pub manifest: Manifest,
}

impl<'a> Run<'a> {
    /// Start or resume a run in `config.out_dir`, keeping artifacts already
    /// recorded there.
    pub fn open(config: &'a ExperimentConfig) -> Result<Self> {
        config.validate()?;
        fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
        let mut manifest = Manifest::load_or_new(&config.out_dir)?;
        manifest.seed = config.seed;
        manifest.config = Some(serde_json::to_value(config)?);
        Ok(Run { config, manifest })
    }

    fn out(&self) -> &Path {
        &self.config.out_dir
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out().join(rel)
    }

    fn prepare(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        ensure_parent(&p)?;
        Ok(p)
    }

    fn record(&mut self, rel: &str, kind: &str) -> Result<()> {
        let out = self.config.out_dir.clone();
        self.manifest.record(&out, rel, kind)
    }

    pub fn save_manifest(&self) -> Result<()> {
        self.manifest.save(self.out())
    }

    pub fn geometry(&self) -> Result<ScanGeometry> {
        self.config.geometry.build()
    }

    pub fn split(&self, df: usize) -> Result<ViewSplit> {
        split_views(&self.geometry()?, df)
    }

    // ---- phantom -------------------------------------------------------

    pub fn phantom(&mut self) -> Result<Phantom> {
        let (dims, voxel) = self.config.grid();
        let spec = self.config.phantom_spec()?;
        let ph = build_phantom(&spec, dims, voxel)?;
        write_volume(self.prepare(layout::ACTIVITY)?, &ph.activity, "activity_mbq")?;
        self.record(layout::ACTIVITY, "phantom")?;
        write_volume(self.prepare(layout::MU_MAP)?, &ph.mu_map, "mu_per_mm")?;
        self.record(layout::MU_MAP, "phantom")?;
        for m in &ph.masks {
            let rel = layout::mask(&m.name);
            write_mask(self.prepare(&rel)?, m)?;
            self.record(&rel, "mask")?;
        }
        Ok(ph)
    }

    pub fn load_phantom(&self) -> Result<Phantom> {
        let spec = self.config.phantom_spec()?;
        let mut names: Vec<String> = spec.spheres.iter().map(|s| s.name.clone()).collect();
        names.push("background".into());
        let masks = names.iter().map(|n| read_mask(self.path(&layout::mask(n)))).collect::<Result<Vec<_>>>()?;
        Ok(Phantom {
            activity: read_volume(self.path(layout::ACTIVITY))?,
            mu_map: read_volume(self.path(layout::MU_MAP))?,
            masks,
        })
    }

    pub fn system_model(&self, mu_map: &ImageVolume, calibration: f64) -> Result<SystemModel> {
        SystemModel::new(self.geometry()?, mu_map.clone(), self.config.psf_sigma0_mm, self.config.psf_slope, calibration)
    }

    // ---- simulate ------------------------------------------------------

    pub fn simulate(&mut self, ph: &Phantom) -> Result<Simulation> {
        let model = self.system_model(&ph.mu_map, 1.0)?;
        let split = self.split(1)?;
        let acq = acquire(&ph.activity, &model, &self.config.scatter, Some(self.config.count_target), &split, self.config.seed)?;
        let sim = Simulation {
            full_scan: acq.full_scan,
            mean: acq.mean,
            scatter_truth: acq.scatter_truth,
            calibration: acq.calibration,
        };
        write_stack(self.prepare(layout::SCAN_FULL)?, &sim.full_scan)?;
        self.record(layout::SCAN_FULL, "scan")?;
        write_stack(self.prepare(layout::SCAN_MEAN)?, &sim.mean)?;
        self.record(layout::SCAN_MEAN, "scan")?;
        write_stack(self.prepare(layout::SCATTER_TRUTH)?, &sim.scatter_truth)?;
        self.record(layout::SCATTER_TRUTH, "scan")?;
        let info = serde_json::json!({ "calibration": sim.calibration, "seed": self.config.seed });
        write_file(&self.path(layout::SIMULATION), serde_json::to_string_pretty(&info)?.as_bytes())?;
        self.record(layout::SIMULATION, "scan")?;
        Ok(sim)
    }

    pub fn load_simulation(&self) -> Result<Simulation> {
        let p = self.path(layout::SIMULATION);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let info: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::format(e.to_string()))?;
        let calibration = info["calibration"]
            .as_f64()
            .ok_or_else(|| Error::format(format!("{} lacks a calibration", p.display())))?;
        Ok(Simulation {
            full_scan: read_stack(self.path(layout::SCAN_FULL))?,
            mean: read_stack(self.path(layout::SCAN_MEAN))?,
            scatter_truth: read_stack(self.path(layout::SCATTER_TRUTH))?,
            calibration,
        })
    }

    // ---- per-DF synthesis ---------------------------------------------

    pub fn measured(&mut self, sim: &Simulation, df: usize) -> Result<ProjectionStack> {
        let split = self.split(df)?;
        let measured = sim.full_scan.restrict(&split.measured)?;
        let rel = layout::measured(df);
        write_stack(self.prepare(&rel)?, &measured)?;
        self.record(&rel, "measured")?;
        Ok(measured)
    }

    pub fn train(&mut self, measured: &ProjectionStack, df: usize) -> Result<(FieldModel, TrainReport)> {
        let cfg = TrainConfig { seed: self.config.seed, ..self.config.train.clone() };
        let (model, report) = train(measured, &cfg)?;
        let rel = layout::model(df);
        write_model(self.prepare(&rel)?, &model, cfg.seed, cfg.upsample)?;
        self.record(&rel, "model")?;
        let rel = layout::train_loss(df);
        let mut buf = Vec::new();
        report.write_csv(&mut buf)?;
        write_file(&self.path(&rel), &buf)?;
        self.record(&rel, "train_loss")?;
        Ok((model, report))
    }

    pub fn synthesize(&mut self, model: &FieldModel, upsample: usize, df: usize) -> Result<ProjectionStack> {
        let split = self.split(df)?;
        let stack = synthesize(model, &self.geometry()?, &split.skipped, upsample)?;
        let rel = layout::synthesized(df, Regime::Nerf);
        write_stack(self.prepare(&rel)?, &stack)?;
        self.record(&rel, "synthesized")?;
        Ok(stack)
    }

    pub fn load_model(&self, df: usize) -> Result<(FieldModel, usize)> {
        read_model(self.path(&layout::model(df)))
    }

    pub fn interpolate(&mut self, measured: &ProjectionStack, df: usize) -> Result<ProjectionStack> {
        let split = self.split(df)?;
        let stack = linear_interpolate_views(measured, &split, &self.geometry()?)?;
        let rel = layout::synthesized(df, Regime::Linint);
        write_stack(self.prepare(&rel)?, &stack)?;
        self.record(&rel, "synthesized")?;
        Ok(stack)
    }

    pub fn load_stack(&self, rel: &str) -> Result<ProjectionStack> {
        read_stack(self.path(rel))
    }

    // ---- reconstruction -----------------------------------------------

    /// Views and scatter estimate for one regime, then OSEM. Per-iteration
    /// activity recovery and background noise go to a CSV next to the image.
    pub fn reconstruct(
        &mut self,
        ph: &Phantom,
        sim: &Simulation,
        regime: Regime,
        df: usize,
        synthesized: Option<&ProjectionStack>,
    ) -> Result<ImageVolume> {
        let measured = match regime {
            Regime::Full => sim.full_scan.clone(),
            _ => sim.full_scan.restrict(&self.split(df)?.measured)?,
        };
        let stack = assemble_regime(&sim.full_scan, &measured, synthesized, regime)?;
        let model = self.system_model(&ph.mu_map, sim.calibration)?;

        let bkg = ph.background().ok_or_else(|| Error::invalid("phantom has no background region"))?;
        let mut iter_rows: Vec<[String; 5]> = Vec::new();
        let mut iter_err = None;
        let out = reconstruct_stack(&stack, &model, &self.config.scatter, &self.config.recon, |k, img| {
            let mut row = || -> Result<()> {
                let sd = metrics::bkg_std(&img.values, &bkg.mask)?;
                for m in ph.spheres() {
                    let ar = metrics::activity_recovery(&img.values, &ph.activity.values, &m.mask)?;
                    let arnr = if sd > 0.0 { format!("{:.6}", ar / sd) } else { String::new() };
                    iter_rows.push([k.to_string(), m.name.clone(), format!("{ar:.6}"), format!("{sd:.6e}"), arnr]);
                }
                Ok(())
            };
            if let Err(e) = row() {
                iter_err.get_or_insert(e);
            }
        })?;
        if let Some(e) = iter_err {
            return Err(e);
        }

        let rel = layout::recon(df, regime);
        write_volume(self.prepare(&rel)?, &out.image, "activity_mbq")?;
        self.record(&rel, "recon")?;
        let rel = layout::recon_iterations(df, regime);
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["iteration", "voi", "ar", "std_bkg", "arnr"])?;
        for r in &iter_rows {
            w.write_record(r)?;
        }
        let buf = w.into_inner().map_err(|e| Error::format(e.to_string()))?;
        write_file(&self.path(&rel), &buf)?;
        self.record(&rel, "recon_iterations")?;
        Ok(out.image)
    }

    pub fn load_recon(&self, df: usize, regime: Regime) -> Result<ImageVolume> {
        read_volume(self.path(&layout::recon(df, regime)))
    }

    // ---- evaluation ----------------------------------------------------

    /// Metrics table from the reconstructions and synthesized views on disk,
    /// plus one detector-row profile per DF.
    pub fn evaluate(&mut self, ph: &Phantom, sim: &Simulation) -> Result<MetricsReport> {
        let bkg = ph.background().ok_or_else(|| Error::invalid("phantom has no background region"))?;
        let truth = &ph.activity.values;
        let image_rows = |img: &ImageVolume, regime: Regime, df: usize, full_cnr: Option<&[f64]>| -> Result<(Vec<MetricsRow>, Vec<f64>)> {
            let sd = metrics::bkg_std(&img.values, &bkg.mask)?;
            let mut rows = Vec::new();
            let mut cnrs = Vec::new();
            for (k, m) in ph.masks.iter().enumerate() {
                let nrmsd = metrics::nrmsd(&img.values, truth, Some(&m.mask))?;
                let mut row = MetricsRow {
                    regime,
                    df,
                    voi: m.name.clone(),
                    nrmsd: Some(nrmsd),
                    ar: None,
                    arnr: None,
                    cnr: None,
                    rcnr: None,
                    std_bkg: Some(sd),
                };
                if m.role == VoiRole::Sphere {
                    let ar = metrics::activity_recovery(&img.values, truth, &m.mask)?;
                    let cnr = metrics::cnr(&img.values, &m.mask, &bkg.mask)?;
                    row.ar = Some(ar);
                    row.arnr = Some(metrics::arnr(ar, sd)?);
                    row.cnr = Some(cnr);
                    row.rcnr = Some(match full_cnr {
                        None => 100.0,
                        Some(f) => metrics::rcnr(cnr, f[k])?,
                    });
                    cnrs.push(cnr);
                } else {
                    cnrs.push(f64::NAN);
                }
                rows.push(row);
            }
            Ok((rows, cnrs))
        };

        let mut report = MetricsReport::default();
        let full = self.load_recon(1, Regime::Full)?;
        let (rows, full_cnr) = image_rows(&full, Regime::Full, 1, None)?;
        report.rows.extend(rows);

        for &df in &self.config.dfs.clone() {
            let split = self.split(df)?;
            if df == 1 {
                let img = self.load_recon(1, Regime::Partial)?;
                report.rows.extend(image_rows(&img, Regime::Partial, 1, Some(&full_cnr))?.0);
                continue;
            }
            let withheld = sim.full_scan.restrict(&split.skipped)?;
            for regime in Regime::SPARSE {
                let img = self.load_recon(df, regime)?;
                report.rows.extend(image_rows(&img, regime, df, Some(&full_cnr))?.0);
            }
            let mut profiles = Vec::new();
            for regime in [Regime::Linint, Regime::Nerf] {
                let syn = self.load_stack(&layout::synthesized(df, regime))?;
                let n = metrics::nrmsd(syn.window(0), withheld.window(0), None)?;
                report.rows.push(MetricsRow {
                    regime,
                    df,
                    voi: "projections".into(),
                    nrmsd: Some(n),
                    ar: None,
                    arnr: None,
                    cnr: None,
                    rcnr: None,
                    std_bkg: None,
                });
                profiles.push(syn);
            }
            self.write_profile(df, &split, &withheld, &profiles[0], &profiles[1])?;
        }

        let mut buf = Vec::new();
        report.write_csv(&mut buf)?;
        write_file(&self.path(layout::METRICS_CSV), &buf)?;
        self.record(layout::METRICS_CSV, "metrics")?;
        write_file(&self.path(layout::METRICS_JSON), serde_json::to_string_pretty(&report)?.as_bytes())?;
        self.record(layout::METRICS_JSON, "metrics_summary")?;
        Ok(report)
    }

    /// Central detector row of the skipped view closest to 90°: withheld
    /// measurement against both syntheses.
    fn write_profile(
        &mut self,
        df: usize,
        split: &ViewSplit,
        withheld: &ProjectionStack,
        linint: &ProjectionStack,
        field: &ProjectionStack,
    ) -> Result<()> {
        let g = self.geometry()?;
        let Some(&view) = split
            .skipped
            .iter()
            .min_by(|&&a, &&b| (g.view_angles_deg[a] - 90.0).abs().total_cmp(&(g.view_angles_deg[b] - 90.0).abs()))
        else {
            return Ok(());
        };
        let (nu, nv) = (g.det_nu, g.det_nv);
        let row = nv / 2;
        let take = |s: &ProjectionStack| -> Result<Vec<f32>> {
            let pos = s.position_of(view).ok_or_else(|| Error::invalid("profile view missing"))?;
            Ok(line_profile(s.view(0, pos), nu, nv, (0, row), (nu - 1, row))?.iter().map(|p| p.value).collect())
        };
        let (m, l, f) = (take(withheld)?, take(linint)?, take(field)?);
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["view", "u", "v", "measured", "linint", "nerf"])?;
        for u in 0..nu {
            w.write_record([view.to_string(), u.to_string(), row.to_string(), m[u].to_string(), l[u].to_string(), f[u].to_string()])?;
        }
        let buf = w.into_inner().map_err(|e| Error::format(e.to_string()))?;
        let rel = layout::profile(df);
        write_file(&self.path(&rel), &buf)?;
        self.record(&rel, "profile")
    }
}

/// OSEM on the photopeak of a three-window stack with the TEW scatter
/// estimate from its side windows.
pub fn reconstruct_stack<F: FnMut(usize, &ImageVolume)>(
    stack: &ProjectionStack,
    model: &SystemModel,
    scatter: &ScatterParams,
    config: &ReconConfig,
    on_iteration: F,
) -> Result<OsemOutput> {
    if stack.n_windows != 3 {
        return Err(Error::invalid("reconstruction needs photopeak plus two scatter windows"));
    }
    let s = scatter;
    let rbar = tew_scatter_estimate(&stack.select_window(1), &stack.select_window(2), s.w_low, s.w_up, s.w_peak)?;
    osem_with(&stack.select_window(0), &rbar, model, config, on_iteration)
}

/// Simulated scan and what is needed to reconstruct it.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub full_scan: ProjectionStack,
    pub mean: ProjectionStack,
    pub scatter_truth: ProjectionStack,
    pub calibration: f64,
}

/// Run every stage in order and write the manifest.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<Manifest> {
    run_pipeline_with(config, |_| {})
}

/// As [`run_pipeline`], reporting each stage name as it starts.
pub fn run_pipeline_with<F: FnMut(&str)>(config: &ExperimentConfig, mut progress: F) -> Result<Manifest> {
    let mut run = Run::open(config)?;
    run.manifest.artifacts.clear();
    progress("phantom");
    let ph = run.phantom().map_err(|e| e.in_stage("phantom"))?;
    progress("simulate");
    let sim = run.simulate(&ph).map_err(|e| e.in_stage("simulate"))?;
    progress("recon full");
    run.reconstruct(&ph, &sim, Regime::Full, 1, None).map_err(|e| e.in_stage("recon"))?;
    for &df in &config.dfs {
        let measured = run.measured(&sim, df).map_err(|e| e.in_stage("simulate"))?;
        if df == 1 {
            // nothing is skipped, so only the partial regime is meaningful
            progress("recon df1 partial");
            run.reconstruct(&ph, &sim, Regime::Partial, 1, None).map_err(|e| e.in_stage("recon"))?;
            continue;
        }
        progress(&format!("train df{df}"));
        let (model, _) = run.train(&measured, df).map_err(|e| e.in_stage("train"))?;
        progress(&format!("synthesize df{df}"));
        let field = run.synthesize(&model, config.train.upsample, df).map_err(|e| e.in_stage("synthesize"))?;
        progress(&format!("interp df{df}"));
        let lin = run.interpolate(&measured, df).map_err(|e| e.in_stage("interp"))?;
        for (regime, synth) in [(Regime::Partial, None), (Regime::Linint, Some(&lin)), (Regime::Nerf, Some(&field))] {
            progress(&format!("recon df{df} {regime}"));
            run.reconstruct(&ph, &sim, regime, df, synth).map_err(|e| e.in_stage("recon"))?;
        }
    }
    progress("evaluate");
    run.evaluate(&ph, &sim).map_err(|e| e.in_stage("evaluate"))?;
    run.save_manifest()?;
    Ok(run.manifest)
}
