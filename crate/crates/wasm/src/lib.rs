//! WebAssembly bindings for a small in-browser scan: look at projections with
//! and without attenuation and blur, compare linear interpolation of skipped
//! views with a coordinate network fitted on the spot.
//!
//! Everything runs single-threaded at toy size (32×16 detector, 48 views).

use spectfield::field::{synthesize, train_with, FieldModel, TrainConfig};
use spectfield::geometry::{split_views, Orbit, ScanGeometry, ViewSplit};
use spectfield::interp::linear_interpolate_views;
use spectfield::phantom::{build_phantom, hot_spots, ImageVolume, PhantomSpec, SphereSpec};
use spectfield::simulate::{acquire, ProjectionStack, ScatterParams};
use spectfield::SystemModel;
use wasm_bindgen::prelude::*;

const NU: usize = 32;
const NV: usize = 16;
const N_VIEWS: usize = 48;
const PITCH_MM: f64 = 9.6;
const PSF: (f64, f64) = (2.0, 0.02);

fn err(e: spectfield::Error) -> String {
    e.to_string()
}

#[wasm_bindgen]
pub struct Demo {
    geometry: ScanGeometry,
    activity: ImageVolume,
    mu_map: ImageVolume,
    full_scan: ProjectionStack,
    split: ViewSplit,
    measured: ProjectionStack,
    field: Option<(FieldModel, usize)>,
}

#[wasm_bindgen]
impl Demo {
    /// `scene` is `"spheres"` (hot spheres in a warm ellipsoid) or
    /// `"points"` (two off-centre point sources).
    #[wasm_bindgen(constructor)]
    pub fn new(scene: &str, counts: f64, seed: u64) -> Result<Demo, String> {
        let geometry = ScanGeometry::new(N_VIEWS, Orbit::Circular { radius_mm: 250.0 }, NU, NV, PITCH_MM, 3).map_err(err)?;
        let dims = [NU, NU, NV];
        let voxel = [PITCH_MM; 3];
        let (activity, mu_map) = match scene {
            "spheres" => {
                let spec = PhantomSpec {
                    semi_axes_mm: [130.0, 95.0, 60.0],
                    spheres: [(60.0, 0.0, 30.0), (-40.0, 40.0, 16.0), (-40.0, -40.0, 8.0)]
                        .iter()
                        .map(|&(x, y, ml)| SphereSpec {
                            name: format!("sphere_{ml}ml"),
                            center_mm: [x, y, 0.0],
                            volume_ml: ml,
                            conc: 0.22,
                        })
                        .collect(),
                    ..PhantomSpec::default()
                };
                let ph = build_phantom(&spec, dims, voxel).map_err(err)?;
                (ph.activity, ph.mu_map)
            }
            "points" => {
                let spots = [([60.0, 25.0, 0.0], 6.0, 1.0), ([-50.0, -35.0, 0.0], 6.0, 1.0)];
                (hot_spots(dims, voxel, &spots), ImageVolume::zeros(dims, voxel))
            }
            other => return Err(format!("unknown scene `{other}`")),
        };
        let model = SystemModel::new(geometry.clone(), mu_map.clone(), PSF.0, PSF.1, 1.0).map_err(err)?;
        let split = split_views(&geometry, 1).map_err(err)?;
        let acq = acquire(&activity, &model, &ScatterParams::default(), Some(counts), &split, seed).map_err(err)?;
        let mut demo = Demo {
            geometry,
            activity,
            mu_map,
            measured: acq.full_scan.clone(),
            full_scan: acq.full_scan,
            split,
            field: None,
        };
        demo.set_df(4)?;
        Ok(demo)
    }

    pub fn nu(&self) -> usize {
        NU
    }

    pub fn nv(&self) -> usize {
        NV
    }

    pub fn n_views(&self) -> usize {
        N_VIEWS
    }

    /// Noise-free photopeak primary of one view, `[u][v]`, with the
    /// attenuation map and the depth-dependent blur switched on or off.
    pub fn project(&self, view: usize, attenuation: bool, blur: bool) -> Result<Vec<f32>, String> {
        if view >= N_VIEWS {
            return Err(format!("view {view} out of range"));
        }
        let mu = if attenuation { self.mu_map.clone() } else { ImageVolume::zeros(self.mu_map.dims, self.mu_map.voxel_mm) };
        let (s0, slope) = if blur { PSF } else { (0.0, 0.0) };
        let model = SystemModel::new(self.geometry.clone(), mu, s0, slope, 1.0).map_err(err)?;
        Ok(model.forward_view(&self.activity.values, view))
    }

    /// Keep every `df`-th view; drops any fitted network.
    pub fn set_df(&mut self, df: usize) -> Result<(), String> {
        let split = split_views(&self.geometry, df).map_err(err)?;
        if split.skipped.is_empty() {
            return Err("the down-sampling factor must skip some views".into());
        }
        self.measured = self.full_scan.restrict(&split.measured).map_err(err)?;
        self.split = split;
        self.field = None;
        Ok(())
    }

    pub fn skipped_views(&self) -> Vec<u32> {
        self.split.skipped.iter().map(|&v| v as u32).collect()
    }

    /// Photopeak counts along the central detector row of a view.
    pub fn measured_profile(&self, view: usize) -> Result<Vec<f32>, String> {
        row(&self.full_scan, view)
    }

    pub fn linint_profile(&self, view: usize) -> Result<Vec<f32>, String> {
        let lin = linear_interpolate_views(&self.measured, &self.split, &self.geometry).map_err(err)?;
        row(&lin, view)
    }

    /// Fit a fresh network to the measured views; returns the validation
    /// loss per epoch.
    pub fn fit(&mut self, epochs: usize, width: usize, seed: u64) -> Result<Vec<f64>, String> {
        let cfg = TrainConfig {
            hidden: vec![width; 4],
            epochs,
            batch: 1024,
            lr: 3e-3,
            seed,
            ..TrainConfig::default()
        };
        let (model, report) = train_with(&self.measured, &cfg, |_, _| {}).map_err(err)?;
        self.field = Some((model, cfg.upsample));
        Ok(report.val_loss)
    }

    pub fn field_profile(&self, view: usize) -> Result<Vec<f32>, String> {
        let (model, upsample) = self.field.as_ref().ok_or("no network has been fitted")?;
        let synth = synthesize(model, &self.geometry, &[view], *upsample).map_err(err)?;
        row(&synth, view)
    }
}

fn row(stack: &ProjectionStack, view: usize) -> Result<Vec<f32>, String> {
    let pos = stack.position_of(view).ok_or_else(|| format!("view {view} not available"))?;
    let v = stack.view(0, pos);
    Ok((0..NU).map(|u| v[u * NV + NV / 2]).collect())
}
