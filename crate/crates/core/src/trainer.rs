//! Online mapping loop: ingest frames, keep keyframes, and fit the field with
//! replayed batches after each keyframe.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::FrameSource;
use crate::error::{Error, Result};
use crate::field::SceneField;
use crate::geometry::{estimate_normals, filter_dynamic, frame_to_world, Frame, Point3};
use crate::losses::{LossBreakdown, TrainBatch};
use crate::optim::{Adam, AdamConfig};
use crate::sampling::{sample_off_surface, Keyframe, KeyframeBuffer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    /// Optimizer steps after each keyframe; each step draws a fresh batch.
    pub epochs_per_update: usize,
    /// On-surface points per batch (the off-surface count matches).
    pub batch_on: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Write a checkpoint after every update phase.
    pub phase_checkpoints: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            epochs_per_update: 30,
            batch_on: 4096,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            phase_checkpoints: true,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_per_update == 0 || self.batch_on == 0 {
            return Err(Error::param("epochs_per_update and batch_on must be >= 1"));
        }
        if !(self.learning_rate > 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            return Err(Error::param("need learning_rate > 0 and betas in [0, 1)"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }
}

pub struct TrainerState {
    pub field: SceneField,
    pub buffer: KeyframeBuffer,
    config: RunConfig,
    adam: Adam,
    rng: ChaCha8Rng,
    step: u64,
    history: Vec<LossBreakdown>,
}

impl TrainerState {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let field = SceneField::new(&config.field, config.scene.classes, config.seed)?;
        let buffer = KeyframeBuffer::new(config.sampling.clone(), config.scene.bounds()?)?;
        let adam = Adam::new(config.trainer.adam(), field.param_count());
        Ok(Self {
            field,
            buffer,
            config: config.clone(),
            adam,
            rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed)),
            step: 0,
            history: Vec::new(),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn history(&self) -> &[LossBreakdown] {
        &self.history
    }

    /// Filters dynamic classes, moves the frame to world coordinates and, on
    /// keyframe indices, estimates normals and stores it. Returns whether the
    /// frame was admitted.
    pub fn ingest_frame(&mut self, frame: &Frame) -> Result<bool> {
        frame.pose.validate()?;
        let filtered = filter_dynamic(frame, &self.config.scene.dynamic_classes)?;
        let world = frame_to_world(&filtered);
        let scene = *self.buffer.scene();
        for p in &world {
            crate::geometry::normalize_to_unit_cube(p, &scene)?;
        }
        if !self.buffer.is_keyframe(frame.index) {
            return Ok(false);
        }
        let origin = Point3::from(frame.pose.translation);
        let k = self.config.scene.normal_neighbors.min(world.len()).max(3);
        let normals = estimate_normals(&world, k, &origin)?;
        let kf = Keyframe::from_world(frame.index, &world, filtered.labels, normals, &scene)?;
        Ok(self.buffer.admit_frame(kf))
    }

    /// Draws one training batch from the buffer.
    pub fn sample_batch(&mut self) -> Result<TrainBatch> {
        let n = self.config.trainer.batch_on;
        let on = self.buffer.sample_on_surface(n, &mut self.rng)?;
        let off = sample_off_surface(
            self.buffer.config(),
            self.buffer.bounds(),
            self.buffer.scene(),
            &on.points,
            n,
            &mut self.rng,
        )?;
        Ok(TrainBatch {
            on_points: on.points,
            on_normals: on.normals,
            on_labels: on.labels,
            off_points: off,
        })
    }

    /// `epochs` optimizer steps, each on a fresh batch.
    pub fn update_map(&mut self, epochs: usize) -> Result<Vec<LossBreakdown>> {
        let mut trace = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            let batch = self.sample_batch()?;
            let step = self.step + 1;
            let (grads, loss) = self
                .field
                .loss_gradients(&batch, &self.config.loss)
                .map_err(|e| match e {
                    Error::NonFinite { term, .. } => Error::NonFinite { term, step },
                    other => other,
                })?;
            self.field.apply_gradients(&mut self.adam, &grads);
            self.step = step;
            self.history.push(loss);
            trace.push(loss);
        }
        Ok(trace)
    }
}

/// Mean loss terms of one update phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub phase: usize,
    pub frame: u64,
    pub steps: usize,
    pub mean: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub config_hash: String,
    pub frames: usize,
    pub keyframes: usize,
    pub steps: u64,
    pub phases: Vec<PhaseSummary>,
    /// World-space box of all keyframe returns, `[min, max]`.
    pub observed: Option<[[f64; 3]; 2]>,
    pub final_checkpoint: Option<PathBuf>,
}

#[derive(Serialize)]
struct StepRecord<'a> {
    step: u64,
    phase: usize,
    frame: u64,
    #[serde(flatten)]
    loss: &'a LossBreakdown,
    total: f64,
}

pub struct RunOutput {
    pub field: SceneField,
    pub report: RunReport,
}

pub fn phase_checkpoint_path(run_dir: &Path, phase: usize) -> PathBuf {
    run_dir.join("checkpoints").join(format!("phase_{phase:03}.ckpt"))
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const METRICS_LOG: &str = "metrics.jsonl";
pub const REPORT_FILE: &str = "report.json";

/// Ingests every frame of `source` in order, updating after each keyframe.
/// With `run_dir`, writes the metrics log, checkpoints and `report.json`.
pub fn run_sequence(
    config: &RunConfig,
    source: &FrameSource,
    run_dir: Option<&Path>,
) -> Result<RunOutput> {
    if source.is_empty() {
        return Err(Error::Input {
            path: PathBuf::new(),
            reason: "frame source is empty".into(),
        });
    }
    let mut state = TrainerState::new(config)?;
    let mut log = match run_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(BufWriter::new(File::create(dir.join(METRICS_LOG))?))
        }
        None => None,
    };
    let mut phases = Vec::new();
    for frame in source.iter() {
        let frame = frame?;
        if !state.ingest_frame(&frame)? {
            continue;
        }
        let phase = phases.len();
        let first_step = state.steps();
        let trace = state.update_map(config.trainer.epochs_per_update)?;
        if let Some(log) = log.as_mut() {
            for (i, loss) in trace.iter().enumerate() {
                let rec = StepRecord {
                    step: first_step + i as u64 + 1,
                    phase,
                    frame: frame.index,
                    loss,
                    total: loss.total(),
                };
                serde_json::to_writer(&mut *log, &rec).map_err(std::io::Error::from)?;
                log.write_all(b"\n")?;
            }
        }
        if let (Some(dir), true) = (run_dir, config.trainer.phase_checkpoints) {
            checkpoint::save(&state.field, &phase_checkpoint_path(dir, phase))?;
        }
        phases.push(PhaseSummary {
            phase,
            frame: frame.index,
            steps: trace.len(),
            mean: LossBreakdown::mean(&trace),
        });
    }
    if let Some(mut log) = log {
        log.flush()?;
    }
    let final_checkpoint = match run_dir {
        Some(dir) => {
            let path = dir.join(FINAL_CHECKPOINT);
            checkpoint::save(&state.field, &path)?;
            Some(path)
        }
        None => None,
    };
    let report = RunReport {
        seed: config.seed,
        config_hash: config.hash(),
        frames: source.len(),
        keyframes: state.buffer.len(),
        steps: state.steps(),
        phases,
        observed: state
            .buffer
            .bounds()
            .world()
            .map(|(lo, hi)| [lo.into(), hi.into()]),
        final_checkpoint,
    };
    if let Some(dir) = run_dir {
        let json = serde_json::to_string_pretty(&report).map_err(std::io::Error::from)?;
        fs::write(dir.join(REPORT_FILE), json + "\n")?;
    }
    Ok(RunOutput {
        field: state.field,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{frame_file_name, write_poses, write_xyzl};
    use crate::field::FieldConfig;
    use crate::geometry::{Pose, Vec3};
    use crate::sampling::SamplingConfig;

    fn plane_frame(index: u64, x0: f64, n_side: usize) -> Frame {
        let pts: Vec<Point3> = (0..n_side * n_side)
            .map(|i| {
                let (a, b) = ((i % n_side) as f64, (i / n_side) as f64);
                Point3::new(x0 + a * 0.2, -2.0 + b * 0.2, -1.5)
            })
            .collect();
        let labels = vec![0; pts.len()];
        Frame::new(index, pts, labels, Pose::identity()).unwrap()
    }

    fn tiny_config() -> RunConfig {
        let mut c = RunConfig::default();
        c.seed = 3;
        c.scene.g_min = -10.0;
        c.scene.g_max = 10.0;
        c.scene.classes = 2;
        c.field = FieldConfig {
            fourier_features: 8,
            sigma_enc: 1.0,
            hidden: vec![16, 16],
            ..Default::default()
        };
        c.trainer.batch_on = 64;
        c.trainer.epochs_per_update = 3;
        c.trainer.learning_rate = 1e-3;
        c
    }

    #[test]
    fn non_keyframes_leave_buffer_alone() {
        let mut s = TrainerState::new(&tiny_config()).unwrap();
        assert!(s.ingest_frame(&plane_frame(0, -2.0, 10)).unwrap());
        let bounds = *s.buffer.bounds();
        assert!(!s.ingest_frame(&plane_frame(1, 3.0, 10)).unwrap());
        assert_eq!(s.buffer.len(), 1);
        assert_eq!(*s.buffer.bounds(), bounds);
        assert!(s.ingest_frame(&plane_frame(3, 3.0, 10)).unwrap());
        assert_eq!(s.buffer.len(), 2);
        let (lo, hi) = s.buffer.bounds().world().unwrap();
        assert_eq!(lo.x, -2.0);
        assert!((hi.x - (3.0 + 9.0 * 0.2)).abs() < 1e-12);
    }

    #[test]
    fn out_of_bounds_frame_is_rejected() {
        let mut s = TrainerState::new(&tiny_config()).unwrap();
        let f = plane_frame(0, 9.5, 10);
        assert!(matches!(s.ingest_frame(&f), Err(Error::OutOfBounds { .. })));
    }

    #[test]
    fn zero_epochs_change_nothing() {
        let mut s = TrainerState::new(&tiny_config()).unwrap();
        s.ingest_frame(&plane_frame(0, -2.0, 10)).unwrap();
        let before = s.field.clone();
        assert!(s.update_map(0).unwrap().is_empty());
        assert_eq!(s.field, before);
        assert_eq!(s.steps(), 0);
    }

    #[test]
    fn update_needs_a_keyframe() {
        let mut s = TrainerState::new(&tiny_config()).unwrap();
        assert!(matches!(s.update_map(1), Err(Error::State(_))));
    }

    #[test]
    fn loss_trace_is_deterministic() {
        let run = || {
            let mut s = TrainerState::new(&tiny_config()).unwrap();
            s.ingest_frame(&plane_frame(0, -2.0, 10)).unwrap();
            let mut t = s.update_map(4).unwrap();
            s.ingest_frame(&plane_frame(3, 0.0, 10)).unwrap();
            t.extend(s.update_map(4).unwrap());
            assert_eq!(s.history().len(), 8);
            (t, checkpoint::to_bytes(&s.field))
        };
        let (a, ca) = run();
        let (b, cb) = run();
        let bits = |t: &[LossBreakdown]| t.iter().map(|l| l.total().to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(ca, cb);
    }

    #[test]
    fn plane_surface_residual_drops() {
        let mut c = tiny_config();
        c.field = FieldConfig {
            fourier_features: 16,
            sigma_enc: 1.0,
            hidden: vec![32, 32],
            ..Default::default()
        };
        c.trainer.batch_on = 256;
        c.trainer.learning_rate = 1e-3;
        c.sampling.keyframe_stride = 1;
        c.seed = 5;
        let mut s = TrainerState::new(&c).unwrap();
        s.ingest_frame(&plane_frame(0, -2.0, 20)).unwrap();
        let trace = s.update_map(50).unwrap();
        let w = c.loss.w_surf;
        let first = trace[0].surface / w;
        let last = trace[49].surface / w;
        assert!(last * 10.0 <= first, "mean |F| {first} -> {last}");
    }

    #[test]
    fn sequence_runs_one_phase_per_keyframe() {
        let dir = tempfile::tempdir().unwrap();
        let frames = dir.path().join("frames");
        fs::create_dir_all(&frames).unwrap();
        let mut poses = Vec::new();
        for i in 0..9u64 {
            let f = plane_frame(i, -4.0 + i as f64 * 0.5, 8);
            write_xyzl(&frames.join(frame_file_name(i)), &f.points, &f.labels).unwrap();
            poses.push(Pose::from_translation(Vec3::zeros()));
        }
        let pose_file = dir.path().join("poses.txt");
        write_poses(&pose_file, &poses).unwrap();
        let source = FrameSource::open(&frames, &pose_file).unwrap();
        let mut c = tiny_config();
        c.sampling = SamplingConfig {
            keyframe_stride: 3,
            ..Default::default()
        };
        let run_dir = dir.path().join("run");
        let out = run_sequence(&c, &source, Some(&run_dir)).unwrap();
        assert_eq!(out.report.phases.len(), 3);
        assert_eq!(
            out.report.phases.iter().map(|p| p.frame).collect::<Vec<_>>(),
            vec![0, 3, 6]
        );
        assert_eq!(out.report.seed, 3);
        assert_eq!(out.report.config_hash, c.hash());
        let log = fs::read_to_string(run_dir.join(METRICS_LOG)).unwrap();
        assert_eq!(log.lines().count(), 9);
        let sizes: Vec<u64> = (0..3)
            .map(|p| fs::metadata(phase_checkpoint_path(&run_dir, p)).unwrap().len())
            .collect();
        assert!(sizes.iter().all(|&s| s == sizes[0]));
        let report: RunReport =
            serde_json::from_str(&fs::read_to_string(run_dir.join(REPORT_FILE)).unwrap()).unwrap();
        assert_eq!(report, out.report);
    }

    #[test]
    fn empty_frame_directory_is_an_input_error() {
        let dir = tempfile::tempdir().unwrap();
        let pose_file = dir.path().join("poses.txt");
        write_poses(&pose_file, &[]).unwrap();
        let err = FrameSource::open(dir.path(), &pose_file).err().unwrap();
        assert_eq!(err.kind(), "input");
    }
}
