//! Cross-module checks on small grids: reconstruction of a known source,
//! artifacts on disk, and metric table layout.

use std::fs;

use spectfield::container::container_read;
use spectfield::field::TrainConfig;
use spectfield::geometry::{split_views, Orbit, ScanGeometry};
use spectfield::interp::{assemble_regime, linear_interpolate_views, Regime};
use spectfield::metrics::CSV_COLUMNS;
use spectfield::phantom::{hot_spots, ImageVolume, PhantomSpec, SphereSpec};
use spectfield::pipeline::{layout, run_pipeline, ExperimentConfig, GeometryConfig, Manifest};
use spectfield::projector::forward_project;
use spectfield::recon::{osem, ReconConfig};
use spectfield::simulate::{ProjectionKind, ProjectionStack};
use spectfield::SystemModel;

fn tiny(out: &std::path::Path) -> ExperimentConfig {
    ExperimentConfig {
        geometry: GeometryConfig {
            n_views: 24,
            orbit: Orbit::Circular { radius_mm: 220.0 },
            det_nu: 24,
            det_nv: 12,
            det_pixel_mm: 12.0,
        },
        phantom: PhantomSpec {
            semi_axes_mm: [120.0, 90.0, 60.0],
            spheres: vec![
                SphereSpec { name: "big".into(), center_mm: [40.0, 0.0, 0.0], volume_ml: 60.0, conc: 0.22 },
                SphereSpec { name: "small".into(), center_mm: [-40.0, 10.0, 0.0], volume_ml: 16.0, conc: 0.22 },
            ],
            ..PhantomSpec::default()
        },
        dfs: vec![2, 4],
        count_target: 3e5,
        train: TrainConfig { hidden: vec![16, 16], epochs: 3, batch: 1024, ..TrainConfig::default() },
        recon: ReconConfig { n_iterations: 4, n_subsets: 4, ..ReconConfig::default() },
        seed: 5,
        out_dir: out.to_path_buf(),
        ..ExperimentConfig::default()
    }
}

#[test]
fn point_source_reconstructs_in_place() {
    let g = ScanGeometry::new(32, Orbit::Circular { radius_mm: 200.0 }, 16, 8, 8.0, 1).unwrap();
    let dims = [16, 16, 8];
    let vox = [8.0; 3];
    // centred on voxel (11, 5, 4)
    let x = hot_spots(dims, vox, &[([28.0, -20.0, 4.0], 4.0, 1.0)]);
    let model = SystemModel::new(g.clone(), ImageVolume::zeros(dims, vox), 2.0, 0.0, 1.0).unwrap();
    let views: Vec<usize> = (0..32).collect();
    let y = forward_project(&x, &model, &views).unwrap();
    let rbar = ProjectionStack::zeros(g, views, 1, ProjectionKind::Mean);
    let out = osem(&y, &rbar, &model, &ReconConfig { n_iterations: 20, n_subsets: 4, ..ReconConfig::default() }).unwrap();
    let argmax = |v: &[f32]| v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    assert_eq!(argmax(&out.image.values), argmax(&x.values));
    // counts are conserved by the EM update on consistent data
    let (a, b) = (out.image.sum(), x.sum());
    assert!((a - b).abs() < 0.02 * b, "{a} vs {b}");
}

#[test]
fn regimes_differ_only_at_skipped_views() {
    let g = ScanGeometry::new(12, Orbit::Circular { radius_mm: 200.0 }, 8, 8, 8.0, 3).unwrap();
    let data: Vec<f32> = (0..3 * 12 * 64).map(|i| (i % 17) as f32).collect();
    let full = ProjectionStack::new(g.clone(), (0..12).collect(), 3, ProjectionKind::Sampled, data).unwrap();
    let split = split_views(&g, 4).unwrap();
    let measured = full.restrict(&split.measured).unwrap();
    let lin = linear_interpolate_views(&measured, &split, &g).unwrap();
    let stack = assemble_regime(&full, &measured, Some(&lin), Regime::Linint).unwrap();
    assert_eq!(stack.views, (0..12).collect::<Vec<_>>());
    for &v in &split.measured {
        for w in 0..3 {
            assert_eq!(stack.view(w, v), full.view(w, v));
        }
    }
    let partial = assemble_regime(&full, &measured, None, Regime::Partial).unwrap();
    assert_eq!(partial.views, split.measured);
}

#[test]
fn artifacts_reload_and_tables_have_fixed_columns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let manifest = run_pipeline(&cfg).unwrap();
    assert_eq!(manifest.count_kind("recon"), 1 + 3 * 2);

    let on_disk: Manifest = serde_json::from_str(&fs::read_to_string(dir.path().join(layout::MANIFEST)).unwrap()).unwrap();
    assert_eq!(on_disk, manifest);
    for path in manifest.artifacts.keys().filter(|p| p.ends_with(".spj")) {
        let (header, payload) = container_read(dir.path().join(path)).unwrap();
        assert_eq!(header.shape.iter().product::<usize>(), payload.len(), "{path}");
    }

    let csv = fs::read_to_string(dir.path().join(layout::METRICS_CSV)).unwrap();
    assert_eq!(csv.lines().next().unwrap(), CSV_COLUMNS.join(","));
    // full: 3 VOIs; per DF: 3 regimes × 3 VOIs + 2 projection rows
    assert_eq!(csv.lines().count() - 1, 3 + 2 * (9 + 2));

    let profile = fs::read_to_string(dir.path().join(layout::profile(4))).unwrap();
    assert_eq!(profile.lines().next().unwrap(), "view,u,v,measured,linint,nerf");
    assert_eq!(profile.lines().count(), 1 + 24);

    let loss = fs::read_to_string(dir.path().join(layout::train_loss(2))).unwrap();
    assert_eq!(loss.lines().count(), 1 + 3);

    let iters = fs::read_to_string(dir.path().join(layout::recon_iterations(4, Regime::Nerf))).unwrap();
    assert_eq!(iters.lines().count(), 1 + 4 * 2);
}

#[test]
fn full_size_preset() {
    let cfg = ExperimentConfig::full_size();
    cfg.validate().unwrap();
    let g = cfg.geometry.build().unwrap();
    assert_eq!(g.n_views(), 120);
    assert_eq!(split_views(&g, 4).unwrap().measured.len(), 30);
    assert_eq!(cfg.train.hidden, vec![256; 12]);
    assert_eq!(cfg.dfs, vec![2, 4, 8]);
}
