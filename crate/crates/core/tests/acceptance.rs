//! Acceptance suite. Each test prints one `PASS` or `FAIL` line for its
//! criterion before asserting, so `cargo test --test acceptance -- --nocapture`
//! reads as a checklist.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semap_core::dataset::{read_xyzl, FrameSource};
use semap_core::encoding::EncodingKind;
use semap_core::eval::{
    chamfer, class_iou, crop_labeled, even_subsample, fscore, sample_mesh_surface, MetricsReport,
};
use semap_core::geometry::{Frame, SceneBounds};
use semap_core::instance::{
    fit_latent, prior_to_bytes, reconstruct_instance, surface_points, train_prior, InstanceConfig,
    SyntheticShapeFamily,
};
use semap_core::losses::total_loss;
use semap_core::mesh::{extract_isosurface, extract_mesh, grid_spec, observed_grid, GridSpec, Mesh};
use semap_core::sampling::Keyframe;
use semap_core::spatial::brute_force_nearest;
use semap_core::synth::{write_dataset, Scenario, SynthConfig, CAR, CONFIG_FILE, FRAME_DIR, GT_FILE, POSE_FILE};
use semap_core::trainer::{phase_checkpoint_path, run_sequence, TrainerState, FINAL_CHECKPOINT, METRICS_LOG};
use semap_core::{FieldConfig, LossWeights, Point3, RunConfig, SceneField, TrainBatch, Vec3};

fn verdict(id: u32, name: &str, pass: bool, detail: String) {
    println!("{} criterion {id} ({name}): {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn random_points(n: usize, half: f64, rng: &mut ChaCha8Rng) -> Vec<Point3> {
    (0..n)
        .map(|_| {
            Point3::new(
                rng.random_range(-half..half),
                rng.random_range(-half..half),
                rng.random_range(-half..half),
            )
        })
        .collect()
}

// ---------------------------------------------------------------- 1

#[test]
fn c01_fscore_fixtures() {
    let rows = [
        ("ours", 0.9681, 0.7090, 0.8186),
        ("voxblox", 0.1316, 0.1317, 0.1316),
        ("vdbfusion", 0.2231, 0.3069, 0.2584),
        ("siren", 0.2157, 0.0655, 0.1005),
    ];
    let worst = rows
        .iter()
        .map(|&(_, p, r, f)| (fscore(p, r) - f).abs())
        .fold(0.0, f64::max);
    verdict(1, "f-score fixtures", worst < 5e-4, format!("max |error| {worst:.2e} over {} rows", rows.len()));
}

// ---------------------------------------------------------------- 2

fn sdf_fd_error(field: &SceneField, points: &[Point3]) -> f64 {
    let h = 1e-5;
    let (_, grads) = field.eval_sdf_grad_batch(points);
    let mut worst: f64 = 0.0;
    for (p, g) in points.iter().zip(&grads) {
        let mut fd = Vec3::zeros();
        for k in 0..3 {
            let (mut hi, mut lo) = (*p, *p);
            hi[k] += h;
            lo[k] -= h;
            fd[k] = (field.eval_sdf(&hi) - field.eval_sdf(&lo)) / (2.0 * h);
        }
        worst = worst.max((g - fd).norm() / fd.norm().max(1e-3));
    }
    worst
}

fn tiny_batch(rng: &mut ChaCha8Rng) -> TrainBatch {
    let on_points = random_points(6, 1.0, rng);
    let on_normals = (0..6)
        .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize())
        .collect();
    let on_labels = (0..6).map(|_| rng.random_range(0..3)).collect();
    TrainBatch {
        on_points,
        on_normals,
        on_labels,
        off_points: random_points(6, 1.0, rng),
    }
}

fn parameter_fd_error(field: &SceneField, batch: &TrainBatch, w: &LossWeights) -> (f64, usize) {
    let (grads, _) = field.loss_gradients(batch, w).unwrap();
    let analytic = grads.flat();
    let h = 1e-6;
    let loss = |f: &SceneField| total_loss(f, batch, w).unwrap().total();
    let bump = |idx: usize, d: f64| {
        let mut f = field.clone();
        let n_geo: usize = f.geometry_head().param_slices().iter().map(|s| s.len()).sum();
        let (mut slices, mut j) = if idx < n_geo {
            (f.geometry_head_mut().param_slices_mut(), idx)
        } else {
            (f.semantic_head_mut().param_slices_mut(), idx - n_geo)
        };
        for s in slices.iter_mut() {
            if j < s.len() {
                s[j] += d;
                break;
            }
            j -= s.len();
        }
        drop(slices);
        loss(&f)
    };
    let mut worst: f64 = 0.0;
    for (idx, &a) in analytic.iter().enumerate() {
        let fd = (bump(idx, h) - bump(idx, -h)) / (2.0 * h);
        // Relative error with a floor for parameters whose gradient vanishes.
        worst = worst.max((a - fd).abs() / (a.abs().max(fd.abs()) + 1e-2));
    }
    (worst, analytic.len())
}

#[test]
fn c02_gradient_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut spatial: f64 = 0.0;
    for seed in 0..5 {
        let cfg = FieldConfig {
            fourier_features: 32,
            sigma_enc: 4.0,
            hidden: vec![32, 32],
            ..FieldConfig::default()
        };
        let field = SceneField::new(&cfg, 3, seed).unwrap();
        spatial = spatial.max(sdf_fd_error(&field, &random_points(100, 1.0, &mut rng)));
    }
    let cfg = FieldConfig {
        fourier_features: 2,
        sigma_enc: 1.0,
        hidden: vec![4, 4],
        ..FieldConfig::default()
    };
    let field = SceneField::new(&cfg, 3, 4).unwrap();
    let w = LossWeights {
        w_off_reg: 10.0,
        ..LossWeights::default()
    };
    let (param, count) = parameter_fd_error(&field, &tiny_batch(&mut rng), &w);
    verdict(
        2,
        "gradient correctness",
        spatial < 1e-3 && param < 1e-2,
        format!("spatial rel err {spatial:.2e} (500 points), parameter rel err {param:.2e} ({count} params)"),
    );
}

// ---------------------------------------------------------------- 3

#[test]
fn c03_sphere_fit() {
    let t = Instant::now();
    let mut config = RunConfig {
        seed: 3,
        ..Default::default()
    };
    config.scene.g_min = -1.0;
    config.scene.g_max = 1.0;
    config.scene.classes = 1;
    config.loss.w_seg = 0.0;
    // Raw coordinates and a low sine frequency: the field has to
    // climb to |F| > 1 in the cube corners within 2000 steps.
    config.field = FieldConfig {
        encoding: EncodingKind::None,
        hidden: vec![64, 64],
        omega0: 3.0,
        ..FieldConfig::default()
    };
    config.trainer.batch_on = 512;
    config.trainer.learning_rate = 2e-4;
    config.sampling.keyframe_stride = 1;

    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let dirs: Vec<Vec3> = (0..20_000)
        .map(|_| loop {
            let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let n = v.norm();
            if n > 1e-3 && n <= 1.0 {
                break v / n;
            }
        })
        .collect();
    let points: Vec<Point3> = dirs.iter().map(|d| Point3::from(d * 0.5)).collect();
    let bounds = config.scene.bounds().unwrap();
    let kf = Keyframe::from_world(0, &points, vec![0; points.len()], dirs.clone(), &bounds).unwrap();

    let mut state = TrainerState::new(&config).unwrap();
    assert!(state.buffer.admit_frame(kf));
    state.update_map(2000).unwrap();

    let mesh = extract_mesh(&state.field, &GridSpec::cube(bounds, 64).unwrap());
    let radius_err = mesh
        .vertices
        .iter()
        .map(|v| (v.coords.norm() - 0.5).abs() / 0.5)
        .fold(0.0, f64::max);

    let probes: Vec<Point3> = dirs
        .iter()
        .take(5000)
        .map(|d| Point3::from(d * (0.5 + rng.random_range(-0.02..0.02))))
        .collect();
    let (_, grads) = state.field.eval_sdf_grad_batch(&probes);
    let good = grads.iter().filter(|g| (g.norm() - 1.0).abs() < 0.1).count() as f64 / probes.len() as f64;
    verdict(
        3,
        "analytic sphere",
        !mesh.is_empty() && radius_err < 0.02 && good >= 0.95,
        format!(
            "{} vertices, max radius error {:.2}%, eikonal ok at {:.1}% of probes, {:.0}s",
            mesh.vertices.len(),
            radius_err * 100.0,
            good * 100.0,
            t.elapsed().as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------- 4, 5, 6

/// Street mapping setup shared by the sampling ablation, the forgetting
/// probe and the semantic check.
const STREET_DATA_SEED: u64 = 11;
/// Short runs are cheap and noisy, so they get more seeds.
const SHORT_SEEDS: &[u64] = &[1, 2, 3, 4, 5, 6, 7, 8];
const LONG_SEEDS: &[u64] = &[1, 2, 3, 4];
const STREET_RESOLUTION: usize = 96;
const EVAL_SAMPLES: usize = 20_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Variant {
    GlobalOnly,
    GlobalNear,
    GlobalLocal,
    Full,
}

impl Variant {
    /// Sampling proportions, renormalized over the enabled layers.
    fn lambdas(self) -> (f64, f64, f64) {
        let (g, l, n) = (0.55, 0.35, 0.1);
        let (g, l, n) = match self {
            Variant::GlobalOnly => (g, 0.0, 0.0),
            Variant::GlobalNear => (g, 0.0, n),
            Variant::GlobalLocal => (g, l, 0.0),
            Variant::Full => (g, l, n),
        };
        let s = g + l + n;
        (g / s, l / s, n / s)
    }
}

struct StreetRun {
    cd: f64,
    fscore: f64,
    miou: f64,
    class_iou: BTreeMap<u32, f64>,
    /// Mean |F| over keyframe-0 car points after phase 0 and after the last phase.
    probe: (f64, f64),
}

struct StreetStudy {
    runs: BTreeMap<(usize, Variant, u64), StreetRun>,
    seconds: f64,
}

impl StreetStudy {
    fn mean(&self, epochs: usize, v: Variant, f: impl Fn(&StreetRun) -> f64) -> f64 {
        let seeds = seeds_for(epochs);
        seeds.iter().map(|&s| f(&self.runs[&(epochs, v, s)])).sum::<f64>() / seeds.len() as f64
    }
}

fn seeds_for(epochs: usize) -> &'static [u64] {
    if epochs < 30 {
        SHORT_SEEDS
    } else {
        LONG_SEEDS
    }
}

struct StreetData {
    _dir: tempfile::TempDir,
    base: RunConfig,
    source: FrameSource,
    gt: (Vec<Point3>, Vec<u32>),
}

fn street_config(base: &RunConfig, epochs: usize, v: Variant, seed: u64) -> RunConfig {
    let mut c = base.clone();
    c.seed = seed;
    c.field = FieldConfig {
        fourier_features: 64,
        sigma_enc: 4.0,
        hidden: vec![64; 3],
        ..FieldConfig::default()
    };
    c.trainer.learning_rate = 1e-3;
    c.trainer.batch_on = 1024;
    c.trainer.epochs_per_update = epochs;
    (c.sampling.lambda_g, c.sampling.lambda_l, c.sampling.lambda_n) = v.lambdas();
    c
}

fn car_probe(state: &TrainerState) -> f64 {
    let kf = &state.buffer.keyframes()[0];
    let cars: Vec<Point3> = kf
        .points
        .iter()
        .zip(&kf.labels)
        .filter(|(_, &l)| l == CAR)
        .map(|(p, _)| *p)
        .collect();
    let s = state.field.eval_sdf_batch(&cars);
    s.iter().map(|v| v.abs()).sum::<f64>() / s.len() as f64
}

fn street_run(data: &StreetData, epochs: usize, v: Variant, seed: u64) -> StreetRun {
    let config = street_config(&data.base, epochs, v, seed);
    let mut state = TrainerState::new(&config).unwrap();
    let mut after_first = None;
    for frame in data.source.iter() {
        let frame: Frame = frame.unwrap();
        if state.ingest_frame(&frame).unwrap() {
            state.update_map(epochs).unwrap();
            after_first.get_or_insert_with(|| car_probe(&state));
        }
    }
    let probe = (after_first.unwrap(), car_probe(&state));

    // Score inside the box the keyframes observed.
    let (lo, hi) = state.buffer.bounds().world().unwrap();
    let bounds = config.scene.bounds().unwrap();
    let grid = observed_grid(&bounds, lo.z, hi.z, STREET_RESOLUTION, 2.0).unwrap();
    let mesh = extract_mesh(&state.field, &grid).crop(&lo, &hi);
    let (gt_pts, gt_labels) = crop_labeled(&data.gt.0, &data.gt.1, &lo, &hi);
    let gt_pts = even_subsample(&gt_pts, EVAL_SAMPLES);
    let gt_labels = even_subsample(&gt_labels, EVAL_SAMPLES);

    let normalized: Vec<Point3> = gt_pts.iter().map(|p| p.map(|c| bounds.normalize_scalar(c))).collect();
    let (miou, class_iou) = class_iou(&state.field.predict_labels(&normalized), &gt_labels, config.scene.classes).unwrap();

    let (cd, fscore) = if mesh.is_empty() {
        (f64::INFINITY, 0.0)
    } else {
        let samples = sample_mesh_surface(&mesh, EVAL_SAMPLES, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let m = MetricsReport::geometric(&samples, &gt_pts, 0.5, 0).unwrap();
        (m.cd, m.fscore)
    };
    StreetRun {
        cd,
        fscore,
        miou,
        class_iou,
        probe,
    }
}

fn street_study() -> &'static StreetStudy {
    static STUDY: OnceLock<StreetStudy> = OnceLock::new();
    STUDY.get_or_init(|| {
        let t = Instant::now();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &SynthConfig::new(Scenario::Street, 9, STREET_DATA_SEED)).unwrap();
        let data = StreetData {
            base: RunConfig::load(&dir.path().join(CONFIG_FILE)).unwrap(),
            source: FrameSource::open(&dir.path().join(FRAME_DIR), &dir.path().join(POSE_FILE)).unwrap(),
            gt: read_xyzl(&dir.path().join(GT_FILE)).unwrap(),
            _dir: dir,
        };
        let plan = [
            (5, Variant::GlobalOnly),
            (5, Variant::Full),
            (30, Variant::GlobalOnly),
            (30, Variant::GlobalNear),
            (30, Variant::GlobalLocal),
            (30, Variant::Full),
        ];
        let mut runs = BTreeMap::new();
        for &(epochs, v) in &plan {
            for &seed in seeds_for(epochs) {
                let r = street_run(&data, epochs, v, seed);
                println!(
                    "  street seed {seed} {epochs:>2} steps {v:?}: cd {:.4} f {:.3} miou {:.3} probe {:.4}->{:.4}",
                    r.cd, r.fscore, r.miou, r.probe.0, r.probe.1
                );
                runs.insert((epochs, v, seed), r);
            }
        }
        StreetStudy {
            runs,
            seconds: t.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn c04_three_layer_ablation() {
    let s = street_study();
    let cd = |e, v| s.mean(e, v, |r| r.cd);
    let (g5, f5) = (cd(5, Variant::GlobalOnly), cd(5, Variant::Full));
    let (g30, gn30, f30) = (cd(30, Variant::GlobalOnly), cd(30, Variant::GlobalNear), cd(30, Variant::Full));
    verdict(
        4,
        "three-layer ablation",
        f5 < g5 && f30 < g30 && gn30 < g30,
        format!(
            "mean CD: 5 steps ({} seeds) full {f5:.4} vs global {g5:.4}; 30 steps ({} seeds) full {f30:.4}, global+near {gn30:.4}, global {g30:.4} ({:.0}s)",
            SHORT_SEEDS.len(),
            LONG_SEEDS.len(),
            s.seconds
        ),
    );
}

#[test]
fn c05_forgetting_probe() {
    let s = street_study();
    let ratio = |v| s.mean(30, v, |r| r.probe.1 / r.probe.0);
    let with_near = ratio(Variant::Full);
    let without = ratio(Variant::GlobalLocal);
    verdict(
        5,
        "forgetting probe",
        with_near <= 3.0,
        format!(
            "mean |F| on keyframe-0 cars, final over phase 0: {with_near:.2}x with near-surface sampling, {without:.2}x without (informational)"
        ),
    );
}

#[test]
fn c06_semantic_head() {
    let s = street_study();
    let miou = s.mean(30, Variant::Full, |r| r.miou);
    let per: Vec<String> = LONG_SEEDS
        .iter()
        .map(|&seed| format!("{:?}", s.runs[&(30, Variant::Full, seed)].class_iou))
        .collect();
    verdict(6, "semantic head", miou >= 0.9, format!("mean mIoU {miou:.3}; per class {}", per.join(" ")));
}

// ---------------------------------------------------------------- 7

#[test]
fn c07_instance_completion() {
    let t = Instant::now();
    let config = InstanceConfig {
        hidden_width: 128,
        hidden_layers: 4,
        epochs: 300,
        points_per_shape: 128,
        fit_steps: 300,
        fit_lr: 5e-3,
        ..InstanceConfig::default()
    };
    let family = SyntheticShapeFamily::new(7);
    let (prior, _) = train_prior(&family, &config, 1).unwrap();
    let trained = t.elapsed().as_secs_f64();
    let before = prior_to_bytes(&prior);

    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let mut worst_ratio: f64 = 0.0;
    let mut meshes_ok = true;
    let mut lines = Vec::new();
    let mut fit_seconds: f64 = 0.0;
    // Shapes the prior never saw.
    for index in [50, 51, 52] {
        let shape = family.shape(index);
        let truth = surface_points(&shape, 5000, &mut rng);
        let full: Vec<Point3> = truth.iter().take(1000).copied().collect();
        let half: Vec<Point3> = truth.iter().filter(|p| p.y > 0.0).take(1000).copied().collect();
        let mut cd = Vec::new();
        for obs in [&full, &half] {
            let ft = Instant::now();
            let fit = fit_latent(&prior, obs, &config, 3).unwrap();
            fit_seconds = fit_seconds.max(ft.elapsed().as_secs_f64());
            let mesh: Mesh = reconstruct_instance(&prior, &fit.z, 48).unwrap();
            meshes_ok &= !mesh.is_empty() && mesh.boundary_edge_count() == 0;
            let samples = sample_mesh_surface(&mesh, 5000, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            cd.push(chamfer(&samples, &truth).unwrap());
        }
        worst_ratio = worst_ratio.max(cd[1] / cd[0]);
        lines.push(format!("shape {index}: full {:.2e} half {:.2e}", cd[0], cd[1]));
    }
    let unchanged = prior_to_bytes(&prior) == before;
    verdict(
        7,
        "instance completion",
        worst_ratio < 1.5 && meshes_ok && unchanged,
        format!(
            "{}; worst half/full {worst_ratio:.2}; closed meshes {meshes_ok}; prior unchanged {unchanged}; prior {trained:.0}s, slowest fit {fit_seconds:.1}s",
            lines.join(", ")
        ),
    );
}

// ---------------------------------------------------------------- 8

fn brute_chamfer(a: &[Point3], b: &[Point3]) -> f64 {
    let one = |from: &[Point3], to: &[Point3]| {
        from.iter().map(|p| brute_force_nearest(to, p).unwrap().1).sum::<f64>() / from.len() as f64
    };
    0.5 * (one(a, b) + one(b, a))
}

fn sign_scan(grid: &GridSpec, values: &[f64]) -> usize {
    let id = |i: usize, j: usize, k: usize| (k * grid.n_y + j) * grid.n_x + i;
    let mut n = 0;
    for k in 0..grid.n_z {
        for j in 0..grid.n_y {
            for i in 0..grid.n_x {
                let a = values[id(i, j, k)] < 0.0;
                for (di, dj, dk) in [(1, 0, 0), (0, 1, 0), (0, 0, 1)] {
                    let (ii, jj, kk) = (i + di, j + dj, k + dk);
                    if ii < grid.n_x && jj < grid.n_y && kk < grid.n_z && a != (values[id(ii, jj, kk)] < 0.0) {
                        n += 1;
                    }
                }
            }
        }
    }
    n
}

/// Two-sided binomial z-score of `hits` out of `n` at probability `p`.
fn binomial_z(hits: usize, n: usize, p: f64) -> f64 {
    (hits as f64 - n as f64 * p) / (n as f64 * p * (1.0 - p)).sqrt()
}

#[test]
fn c08_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut cd_err: f64 = 0.0;
    for _ in 0..3 {
        let a = random_points(1000, 5.0, &mut rng);
        let b = random_points(1000, 5.0, &mut rng);
        cd_err = cd_err.max((chamfer(&a, &b).unwrap() - brute_chamfer(&a, &b)).abs());
    }

    let bounds = SceneBounds::new(-1.0, 1.0).unwrap();
    let grid = GridSpec::cube(bounds, 8).unwrap();
    let mut mc_ok = true;
    for _ in 0..20 {
        let c = Point3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
        let r = rng.random_range(0.2..0.8);
        let f = |pts: &[Point3]| pts.iter().map(|p| (p - c).norm() - r).collect::<Vec<_>>();
        let mut values = Vec::new();
        for k in 0..grid.n_z {
            for j in 0..grid.n_y {
                for i in 0..grid.n_x {
                    values.push(f(&[grid.point(i, j, k)])[0]);
                }
            }
        }
        mc_ok &= extract_isosurface(&grid, f, 0.0, false).crossed_edges == sign_scan(&grid, &values);
    }

    // Two triangles with a 9:1 area ratio.
    let mesh = Mesh {
        vertices: vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(3.0, 0.0, 0.0),
            Point3::new(0.0, 3.0, 0.0),
            Point3::new(10.0, 0.0, 0.0),
            Point3::new(11.0, 0.0, 0.0),
            Point3::new(10.0, 1.0, 0.0),
        ],
        triangles: vec![[0, 1, 2], [3, 4, 5]],
        ..Mesh::default()
    };
    let n = 100_000;
    let samples = sample_mesh_surface(&mesh, n, &mut rng).unwrap();
    let big = samples.iter().filter(|p| p.x < 5.0).count();
    let z = binomial_z(big, n, 0.9);
    verdict(
        8,
        "metric oracles",
        cd_err < 1e-9 && mc_ok && z.abs() < 4.0,
        format!("chamfer |fast-brute| {cd_err:.1e}; MC crossings match sign scan {mc_ok}; area split {big}/{n} (z {z:.2})"),
    );
}

// ---------------------------------------------------------------- 9, 11

fn small_street(seed: u64) -> (tempfile::TempDir, RunConfig, FrameSource) {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &SynthConfig::new(Scenario::Street, 9, seed)).unwrap();
    let mut c = RunConfig::load(&dir.path().join(CONFIG_FILE)).unwrap();
    c.field = FieldConfig {
        fourier_features: 16,
        sigma_enc: 2.0,
        hidden: vec![16, 16],
        ..FieldConfig::default()
    };
    c.trainer.batch_on = 256;
    c.trainer.epochs_per_update = 3;
    let source = FrameSource::open(&dir.path().join(FRAME_DIR), &dir.path().join(POSE_FILE)).unwrap();
    (dir, c, source)
}

fn size(path: &Path) -> u64 {
    fs::metadata(path).unwrap().len()
}

#[test]
fn c09_checkpoint_size_is_constant() {
    let (dir, config, source) = small_street(9);
    let run = dir.path().join("run");
    let out = run_sequence(&config, &source, Some(&run)).unwrap();
    let first = size(&phase_checkpoint_path(&run, 0));
    let last = size(&phase_checkpoint_path(&run, out.report.phases.len() - 1));
    let fin = size(&run.join(FINAL_CHECKPOINT));
    verdict(
        9,
        "memory constancy",
        out.report.keyframes == 3 && first == last && last == fin,
        format!("{} keyframes; checkpoint bytes {first} / {last} / {fin}", out.report.keyframes),
    );
}

#[test]
fn c11_determinism() {
    let (dir, config, source) = small_street(12);
    let mut bytes = Vec::new();
    for name in ["a", "b"] {
        let run = dir.path().join(name);
        run_sequence(&config, &source, Some(&run)).unwrap();
        bytes.push((fs::read(run.join(FINAL_CHECKPOINT)).unwrap(), fs::read(run.join(METRICS_LOG)).unwrap()));
    }
    let same_ckpt = bytes[0].0 == bytes[1].0;
    let same_log = bytes[0].1 == bytes[1].1;
    verdict(
        11,
        "determinism",
        same_ckpt && same_log,
        format!("final checkpoints identical {same_ckpt}; metrics logs identical {same_log}"),
    );
}

// ---------------------------------------------------------------- 10

#[test]
fn c10_grid_formulas() {
    let bounds = SceneBounds::new(-100.0, 100.0).unwrap();
    let g = grid_spec(&bounds, -80.0, -60.0, 500).unwrap();
    let full = grid_spec(&bounds, -100.0, 100.0, 500).unwrap();
    verdict(
        10,
        "grid formulas",
        g.n_z == 50 && g.z_start == 50 && full.n_z == 500 && full.z_start == 0,
        format!("N_z {} Z_start {}; full-range N_z {}", g.n_z, g.z_start, full.n_z),
    );
}
