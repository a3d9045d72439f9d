//! Three-stage optimization of the avatar: hard-assigned locals first, then
//! assigner distillation against nearest-vertex part labels, then joint
//! soft-assignment refinement. Steps are deterministic for a given seed and
//! independent of the worker count: rays are drawn sequentially up front and
//! per-chunk gradients are folded in a fixed order.

pub mod adam;
pub mod checkpoint;
pub mod ray;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use nalgebra::Vector3;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::avatar::{AvatarField, AvatarModel, ModelConfig};
use crate::data::{metrics, LoadedDataset};
use crate::deform::{AssignMode, Deformer};
use crate::error::{Error, Result};
use crate::head::inverse::{KnnIndex, PosedFrame};
use crate::head::io::load_head_model;
use crate::head::{canonical_vertices, CanonicalConfig, HeadModel};
use crate::render::{
    near_far_for_sphere, render_image, render_ray, Camera, FieldBuf, RenderOptions, RenderedImage,
};
use crate::rng::rng_for;
use crate::tensor::nn::MlpBuf;
use crate::tensor::tape::{GradAccum, Tape};
use crate::tensor::HasParams;
use adam::{lr_schedule, Adam, AdamConfig};
use checkpoint::{save_checkpoint, Checkpoint};
use ray::{ray_loss_graph, RayEnv};

/// RNG stream for ray batches; one index per optimization step.
pub const STREAM_BATCH: u64 = 200;
/// RNG stream for distillation samples; one index per optimization step.
pub const STREAM_DISTILL: u64 = 201;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_steps: u64,
    /// Fraction of `total_steps` spent in the hard-assignment stage.
    pub stage1_fraction: f64,
    /// Assigner distillation steps inserted between the stages.
    pub distill_steps: u64,
    /// Canonical points per distillation step.
    pub distill_samples: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    /// Weight of the normal-smoothness term.
    pub lambda_normal: f64,
    /// Probe radius for the normal-smoothness term.
    pub eps_radius: f64,
    pub rays_per_step: usize,
    /// Fraction of rays drawn from foreground pixels.
    pub fg_fraction: f64,
    pub k_samples: usize,
    /// Transmittance threshold for early ray termination; 0 disables it.
    pub min_weight: f64,
    /// Neighbors for inverse skinning.
    pub knn_k: usize,
    /// Rays sharing one tape; also the parallel work granularity.
    pub chunk_size: usize,
    pub seed: u64,
    pub log_every: u64,
    /// Checkpoint cadence in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub adam: AdamConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 10_000,
            stage1_fraction: 0.2,
            distill_steps: 500,
            distill_samples: 256,
            lr_start: 5e-4,
            lr_end: 5e-5,
            lambda_normal: 5e-3,
            eps_radius: 0.01,
            rays_per_step: 1024,
            fg_fraction: 0.9,
            k_samples: 64,
            min_weight: 0.0,
            knn_k: 4,
            chunk_size: 32,
            seed: 0,
            log_every: 50,
            checkpoint_every: 1000,
            adam: AdamConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// First step of the distillation stage.
    pub fn stage1_end(&self) -> u64 {
        ((self.total_steps as f64) * self.stage1_fraction).ceil() as u64
    }

    /// First step of the soft stage.
    pub fn distill_end(&self) -> u64 {
        (self.stage1_end() + self.distill_steps).min(self.total_steps)
    }

    pub fn validate(&self, head: &HeadModel) -> Result<()> {
        // Hard assignment and distillation index local nets by the head
        // model's part labels; a run that skips both stages may use any
        // part count (e.g. a single global deformation net).
        let uses_labels = self.stage1_end() > 0 || self.distill_steps > 0;
        if uses_labels && self.model.deform.n_parts != head.n_parts {
            return Err(Error::invalid(
                "train config",
                format!(
                    "deformation field has {} parts but the head model defines {}",
                    self.model.deform.n_parts, head.n_parts
                ),
            ));
        }
        let checks = [
            ("stage1_fraction", (0.0..=1.0).contains(&self.stage1_fraction)),
            ("fg_fraction", (0.0..=1.0).contains(&self.fg_fraction)),
            ("lr_start", self.lr_start > 0.0),
            ("lr_end", self.lr_end > 0.0),
            ("rays_per_step", self.rays_per_step > 0),
            ("k_samples", self.k_samples > 0),
            ("knn_k", self.knn_k > 0),
            ("chunk_size", self.chunk_size > 0),
            ("distill_samples", self.distill_samples > 0),
            ("eps_radius", self.eps_radius > 0.0),
        ];
        for (what, ok) in checks {
            if !ok {
                return Err(Error::invalid("train config", format!("bad {what}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Locals and field under hard nearest-vertex assignment; assigner frozen.
    Hard,
    /// Assigner alone, distilled to nearest-vertex part labels.
    Distill,
    /// Everything jointly under soft assignment.
    Soft,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Hard => "hard",
            Stage::Distill => "distill",
            Stage::Soft => "soft",
        }
    }
}

pub fn stage_of(cfg: &TrainConfig, step: u64) -> Stage {
    if step < cfg.stage1_end() {
        Stage::Hard
    } else if step < cfg.distill_end() {
        Stage::Distill
    } else {
        Stage::Soft
    }
}

/// Whether `stage` updates the parameter called `name`.
pub fn stage_trains(stage: Stage, name: &str) -> bool {
    let assigner = name.starts_with("deform.assigner");
    match stage {
        Stage::Hard => !assigner,
        Stage::Distill => assigner,
        Stage::Soft => true,
    }
}

/// Per-frame constants reused across steps.
pub struct FrameCtx {
    pub posed: PosedFrame,
    /// Raw `[theta, psi]` conditioning vector.
    pub cond: Vec<f64>,
    pub camera: Camera,
    pub near: f64,
    pub far: f64,
    /// Row-major pixel indices inside / outside the mask.
    pub fg: Vec<u32>,
    pub bg: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct StepStats {
    pub step: u64,
    pub stage: Stage,
    pub lr: f64,
    pub loss_photo: f64,
    pub loss_normal: f64,
    pub loss_total: f64,
    /// Fraction of distillation samples whose argmax matches the label.
    pub distill_acc: Option<f64>,
    pub wall_ms: f64,
}

impl StepStats {
    pub fn to_json(&self) -> String {
        let mut v = serde_json::json!({
            "step": self.step,
            "stage": self.stage.name(),
            "lr": self.lr,
            "loss_photo": self.loss_photo,
            "loss_normal": self.loss_normal,
            "loss_total": self.loss_total,
            "wall_ms": self.wall_ms,
        });
        if let Some(acc) = self.distill_acc {
            v["distill_acc"] = acc.into();
        }
        v.to_string()
    }
}

struct RaySpec {
    frame: usize,
    px: usize,
    py: usize,
    target: [f64; 3],
    jitter: Vec<f64>,
    ball: Vector3<f64>,
}

struct ChunkOut {
    photo: GradAccum,
    normal: GradAccum,
    photo_sum: f64,
    normal_sum: f64,
    normal_contrib: usize,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub head: HeadModel,
    pub canon: CanonicalConfig,
    pub canon_verts: Vec<Vector3<f64>>,
    pub canon_index: KnnIndex,
    pub model: AvatarModel,
    pub adam: Adam,
    pub step: u64,
    pub dataset: LoadedDataset,
    pub frames: Vec<FrameCtx>,
    pub train_frames: Vec<usize>,
    pub test_frames: Vec<usize>,
    n_param_leaves: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, dataset: LoadedDataset) -> Result<Trainer> {
        let head = load_head_model(&dataset.head_model_path())?;
        cfg.validate(&head)?;
        if dataset.manifest.beta_avg.len() != head.n_beta() {
            return Err(Error::ShapeMismatch {
                context: "average shape coefficients".into(),
                expected: vec![head.n_beta()],
                got: vec![dataset.manifest.beta_avg.len()],
            });
        }
        let canon = CanonicalConfig {
            beta_avg: dataset.manifest.beta_avg.clone(),
        };
        let canon_verts = canonical_vertices(&head, &canon);
        let canon_index = KnnIndex::new(canon_verts.clone());
        let (center, radius) = crate::data::synth::scene_bounds(&canon_verts);

        let mut frames = Vec::with_capacity(dataset.frames.len());
        for (i, f) in dataset.frames.iter().enumerate() {
            let rec = &f.record;
            if rec.theta.len() != head.theta_len() || rec.psi.len() != head.n_psi() {
                return Err(Error::Frame {
                    index: i,
                    message: format!(
                        "pose/expression dims ({}, {}) do not match the head model ({}, {})",
                        rec.theta.len(),
                        rec.psi.len(),
                        head.theta_len(),
                        head.n_psi()
                    ),
                });
            }
            let posed = PosedFrame::new(&head, &canon, &rec.theta, &rec.psi, cfg.knn_k)?;
            let mut cond = rec.theta.clone();
            cond.extend(&rec.psi);
            let (near, far) = near_far_for_sphere(rec.camera.position(), center, radius);
            let mut fg = Vec::new();
            let mut bg = Vec::new();
            for (pix, &m) in f.mask.iter().enumerate() {
                if m {
                    fg.push(pix as u32);
                } else {
                    bg.push(pix as u32);
                }
            }
            frames.push(FrameCtx {
                posed,
                cond,
                camera: rec.camera.clone(),
                near,
                far,
                fg,
                bg,
            });
        }

        let cond_dim = head.theta_len() + head.n_psi();
        let mut ids = crate::tensor::ParamIds::new();
        let model = AvatarModel::new(&mut ids, cfg.seed, cfg.model.clone(), cond_dim);
        let mut n_param_leaves = 0;
        model.visit(&mut |_, _| n_param_leaves += 1);
        let adam = Adam::new(cfg.adam);
        Ok(Trainer {
            train_frames: dataset.manifest.train_indices(),
            test_frames: dataset.manifest.test_indices(),
            head,
            canon,
            canon_verts,
            canon_index,
            model,
            adam,
            step: 0,
            dataset,
            frames,
            n_param_leaves,
            cfg,
        })
    }

    /// Rebuild a trainer from a checkpoint written by [`Trainer::save`].
    pub fn resume(dataset: LoadedDataset, path: &Path) -> Result<Trainer> {
        let ck = Checkpoint::read(path)?;
        let cfg: TrainConfig = serde_json::from_value(ck.config.clone())
            .map_err(|e| Error::invalid("checkpoint config", e.to_string()))?;
        let mut t = Trainer::new(cfg, dataset)?;
        ck.load_into(&mut t.model, &mut t.adam)?;
        t.step = ck.step;
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let cfg = serde_json::to_value(&self.cfg)
            .map_err(|e| Error::invalid("train config", e.to_string()))?;
        save_checkpoint(path, self.step, &cfg, &self.model, &self.adam)
    }

    pub fn train_step(&mut self) -> Result<StepStats> {
        let t0 = Instant::now();
        let stage = stage_of(&self.cfg, self.step);
        let lr = lr_schedule(self.cfg.lr_start, self.cfg.lr_end, self.step, self.cfg.total_steps);
        let mut stats = match stage {
            Stage::Distill => self.distill_step(stage, lr)?,
            _ => self.render_step(stage, lr)?,
        };
        if !stats.loss_total.is_finite() {
            return Err(Error::invalid(
                "training",
                format!("non-finite loss at step {}", self.step),
            ));
        }
        self.step += 1;
        stats.wall_ms = t0.elapsed().as_secs_f64() * 1e3;
        Ok(stats)
    }

    /// Run until `total_steps`, streaming JSONL stats and checkpointing.
    pub fn run(&mut self, checkpoint_path: Option<&Path>, log: &mut dyn Write) -> Result<()> {
        while self.step < self.cfg.total_steps {
            let stats = self.train_step()?;
            let last = self.step == self.cfg.total_steps;
            if stats.step % self.cfg.log_every == 0 || last {
                writeln!(log, "{}", stats.to_json())
                    .map_err(|e| Error::io("training log", e))?;
            }
            if let Some(path) = checkpoint_path {
                let periodic =
                    self.cfg.checkpoint_every > 0 && self.step % self.cfg.checkpoint_every == 0;
                if periodic || last {
                    self.save(path)?;
                }
            }
        }
        Ok(())
    }

    fn sample_batch(&self, step: u64) -> Vec<RaySpec> {
        let cfg = &self.cfg;
        let mut rng = rng_for(cfg.seed, STREAM_BATCH, step);
        let n = cfg.rays_per_step;
        let n_fg = ((n as f64) * cfg.fg_fraction).ceil() as usize;
        let mut specs = Vec::with_capacity(n);
        for i in 0..n {
            let frame = self.train_frames[rng.gen_range(0..self.train_frames.len())];
            let fc = &self.frames[frame];
            let want_fg = i < n_fg;
            let list = match (want_fg, fc.fg.is_empty(), fc.bg.is_empty()) {
                (true, false, _) | (false, true, false) => &fc.fg,
                _ => &fc.bg,
            };
            let pix = list[rng.gen_range(0..list.len())] as usize;
            let (px, py) = (pix % fc.camera.width, pix / fc.camera.width);
            let t = self.dataset.frames[frame].image.pixel(px, py);
            let jitter: Vec<f64> = (0..cfg.k_samples).map(|_| rng.gen::<f64>()).collect();
            let ball = loop {
                let v = Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                );
                if v.norm_squared() <= 1.0 {
                    break v * cfg.eps_radius;
                }
            };
            specs.push(RaySpec {
                frame,
                px,
                py,
                target: [t[0] as f64, t[1] as f64, t[2] as f64],
                jitter,
                ball,
            });
        }
        specs
    }

    /// Gradient accumulators and loss sums for the ray batch at `step`.
    fn batch_grads(&self, step: u64, mode: AssignMode) -> Result<(ChunkOut, usize)> {
        let cfg = &self.cfg;
        let batch = self.sample_batch(step);
        let chunks: Result<Vec<ChunkOut>> = batch
            .par_chunks(cfg.chunk_size)
            .map(|chunk| {
                let mut out = ChunkOut {
                    photo: GradAccum::new(self.n_param_leaves),
                    normal: GradAccum::new(self.n_param_leaves),
                    photo_sum: 0.0,
                    normal_sum: 0.0,
                    normal_contrib: 0,
                };
                let mut tape = Tape::new();
                self.model.visit(&mut |_, p| {
                    tape.param(p);
                });
                let mark = tape.mark();
                let mut scratch = Vec::new();
                for spec in chunk {
                    tape.truncate(mark);
                    let fc = &self.frames[spec.frame];
                    let env = RayEnv {
                        posed: &fc.posed,
                        canon_index: &self.canon_index,
                        part_labels: &self.head.part_labels,
                        cond: &fc.cond,
                        mode,
                    };
                    let ray = fc.camera.ray(spec.px, spec.py);
                    let opt = RenderOptions {
                        k_samples: cfg.k_samples,
                        near: fc.near,
                        far: fc.far,
                        min_weight: cfg.min_weight,
                    };
                    let graph = ray_loss_graph(
                        &mut tape,
                        &self.model,
                        &env,
                        &ray,
                        spec.target,
                        &spec.jitter,
                        spec.ball,
                        &opt,
                        &mut scratch,
                    )?;
                    tape.backward(graph.photo)?;
                    tape.accumulate_param_grads(&mut out.photo, 1.0);
                    out.photo_sum += graph.photo_value;
                    if let Some(reg) = graph.normal {
                        tape.backward(reg)?;
                        tape.accumulate_param_grads(&mut out.normal, 1.0);
                        out.normal_sum += graph.normal_value;
                        out.normal_contrib += 1;
                    }
                }
                Ok(out)
            })
            .collect();
        let chunks = chunks?;

        let mut total = ChunkOut {
            photo: GradAccum::new(self.n_param_leaves),
            normal: GradAccum::new(self.n_param_leaves),
            photo_sum: 0.0,
            normal_sum: 0.0,
            normal_contrib: 0,
        };
        for c in &chunks {
            total.photo.merge(&c.photo);
            total.normal.merge(&c.normal);
            total.photo_sum += c.photo_sum;
            total.normal_sum += c.normal_sum;
            total.normal_contrib += c.normal_contrib;
        }
        Ok((total, batch.len()))
    }

    /// Total loss and its gradient by parameter name for the batch at `step`,
    /// without touching the parameters. Backs finite-difference checks.
    pub fn batch_loss(
        &self,
        step: u64,
        mode: AssignMode,
    ) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
        let (bg, n) = self.batch_grads(step, mode)?;
        let (photo_scale, normal_scale, loss) = self.batch_scales(&bg, n);
        let mut grads = BTreeMap::new();
        self.model.visit(&mut |name, p| {
            let numel = p.value.numel();
            let mut g = bg.photo.get(p.id, numel);
            let gn = bg.normal.get(p.id, numel);
            for (gi, ni) in g.iter_mut().zip(&gn) {
                *gi = *gi * photo_scale + *ni * normal_scale;
            }
            grads.insert(name.to_string(), g);
        });
        Ok((loss.2, grads))
    }

    /// The batch loss at `step` for a caller-supplied parameter set,
    /// evaluated through the plain ray marcher — no tape, no gradients.
    /// Finite-difference probes over every parameter use this; taping each
    /// probe would dominate their runtime.
    pub fn batch_loss_value(
        &self,
        model: &AvatarModel,
        step: u64,
        mode: AssignMode,
    ) -> Result<f64> {
        let cfg = &self.cfg;
        let batch = self.sample_batch(step);
        let parts: Vec<(f64, f64, usize)> = batch
            .par_chunks(cfg.chunk_size)
            .map(|chunk| {
                let mut buf = FieldBuf::default();
                let mut enc = Vec::new();
                let mut mlp = MlpBuf::default();
                let (mut photo, mut normal, mut contrib) = (0.0, 0.0, 0usize);
                for spec in chunk {
                    let fc = &self.frames[spec.frame];
                    let field = AvatarField {
                        deformer: Deformer {
                            frame: &fc.posed,
                            field: &model.deform,
                            canon_index: &self.canon_index,
                            part_labels: &self.head.part_labels,
                            cond: fc.cond.clone(),
                            mode,
                        },
                        field: &model.field,
                    };
                    let ray = fc.camera.ray(spec.px, spec.py);
                    let opt = RenderOptions {
                        k_samples: cfg.k_samples,
                        near: fc.near,
                        far: fc.far,
                        min_weight: cfg.min_weight,
                    };
                    let r = render_ray(&field, &ray, &opt, Some(&spec.jitter), &mut buf);
                    for ch in 0..3 {
                        photo += (r.rgb[ch] - spec.target[ch]).abs();
                    }
                    if let Some(s) = &r.surface {
                        if !s.degenerate {
                            if let Some(n2) =
                                model.field.normal(s.x_field + spec.ball, &mut enc, &mut mlp)
                            {
                                normal += (s.normal - n2).norm_squared();
                                contrib += 1;
                            }
                        }
                    }
                }
                (photo, normal, contrib)
            })
            .collect();
        let (mut photo_sum, mut normal_sum, mut contrib) = (0.0, 0.0, 0usize);
        for (p, nr, c) in parts {
            photo_sum += p;
            normal_sum += nr;
            contrib += c;
        }
        Ok(photo_sum / (3.0 * batch.len() as f64)
            + cfg.lambda_normal * normal_sum / contrib.max(1) as f64)
    }

    /// `(photo_scale, normal_scale, (loss_photo, loss_normal, loss_total))`.
    fn batch_scales(&self, bg: &ChunkOut, n: usize) -> (f64, f64, (f64, f64, f64)) {
        let photo_scale = 1.0 / (3.0 * n as f64);
        let contrib = bg.normal_contrib.max(1) as f64;
        let normal_scale = self.cfg.lambda_normal / contrib;
        let loss_photo = bg.photo_sum * photo_scale;
        let loss_normal = bg.normal_sum / contrib;
        let loss_total = loss_photo + self.cfg.lambda_normal * loss_normal;
        (photo_scale, normal_scale, (loss_photo, loss_normal, loss_total))
    }

    fn render_step(&mut self, stage: Stage, lr: f64) -> Result<StepStats> {
        let mode = match stage {
            Stage::Hard => AssignMode::Hard,
            _ => AssignMode::Soft,
        };
        let (bg, n) = self.batch_grads(self.step, mode)?;
        let (photo_scale, normal_scale, (loss_photo, loss_normal, loss_total)) =
            self.batch_scales(&bg, n);

        let adam = &mut self.adam;
        self.model.visit_mut(&mut |name, p| {
            if !stage_trains(stage, name) {
                return;
            }
            let numel = p.value.numel();
            let mut g = bg.photo.get(p.id, numel);
            let gn = bg.normal.get(p.id, numel);
            for (gi, ni) in g.iter_mut().zip(&gn) {
                *gi = *gi * photo_scale + *ni * normal_scale;
            }
            adam.step(name, p, &g, lr);
        });

        Ok(StepStats {
            step: self.step,
            stage,
            lr,
            loss_photo,
            loss_normal,
            loss_total,
            distill_acc: None,
            wall_ms: 0.0,
        })
    }

    fn distill_step(&mut self, stage: Stage, lr: f64) -> Result<StepStats> {
        let cfg = &self.cfg;
        let mut rng = rng_for(cfg.seed, STREAM_DISTILL, self.step);
        let n = cfg.distill_samples;
        let sigma = 0.02;
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let vert = self.canon_verts[rng.gen_range(0..self.canon_verts.len())];
            // Box-Muller; fixed draw count keeps the stream deterministic.
            let (u1, u2) = (1.0 - rng.gen::<f64>(), rng.gen::<f64>());
            let (u3, u4) = (1.0 - rng.gen::<f64>(), rng.gen::<f64>());
            let r1 = (-2.0 * u1.ln()).sqrt();
            let r2 = (-2.0 * u3.ln()).sqrt();
            let noise = Vector3::new(
                r1 * (std::f64::consts::TAU * u2).cos(),
                r1 * (std::f64::consts::TAU * u2).sin(),
                r2 * (std::f64::consts::TAU * u4).cos(),
            );
            let x = vert + noise * sigma;
            let label = self.head.part_labels[self.canon_index.nearest(x, 1)[0].0] as usize;
            let frame = self.train_frames[rng.gen_range(0..self.train_frames.len())];
            samples.push((x, label, frame));
        }

        struct DistillOut {
            acc: GradAccum,
            loss_sum: f64,
            correct: usize,
        }
        let chunks: Result<Vec<DistillOut>> = samples
            .par_chunks(cfg.chunk_size)
            .map(|chunk| {
                let mut out = DistillOut {
                    acc: GradAccum::new(self.n_param_leaves),
                    loss_sum: 0.0,
                    correct: 0,
                };
                let mut tape = Tape::new();
                self.model.visit(&mut |_, p| {
                    tape.param(p);
                });
                let mark = tape.mark();
                let mut scratch = Vec::new();
                for &(x, label, frame) in chunk {
                    tape.truncate(mark);
                    self.model
                        .deform
                        .encode_input(x, &self.frames[frame].cond, &mut scratch);
                    let input = tape.leaf(&scratch);
                    let logits = self.model.deform.assigner.forward_tape(&mut tape, input)?;
                    let ce = tape.cross_entropy(logits, label)?;
                    out.loss_sum += tape.scalar(ce);
                    let lv = tape.value(logits);
                    let argmax = lv
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .map(|(i, _)| i)
                        .unwrap();
                    if argmax == label {
                        out.correct += 1;
                    }
                    tape.backward(ce)?;
                    tape.accumulate_param_grads(&mut out.acc, 1.0);
                }
                Ok(out)
            })
            .collect();
        let chunks = chunks?;

        let mut acc = GradAccum::new(self.n_param_leaves);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for c in &chunks {
            acc.merge(&c.acc);
            loss_sum += c.loss_sum;
            correct += c.correct;
        }
        let scale = 1.0 / n as f64;
        let loss = loss_sum * scale;

        let adam = &mut self.adam;
        self.model.visit_mut(&mut |name, p| {
            if !stage_trains(stage, name) {
                return;
            }
            let g: Vec<f64> = acc
                .get(p.id, p.value.numel())
                .iter()
                .map(|v| v * scale)
                .collect();
            adam.step(name, p, &g, lr);
        });

        Ok(StepStats {
            step: self.step,
            stage,
            lr,
            loss_photo: 0.0,
            loss_normal: 0.0,
            loss_total: loss,
            distill_acc: Some(correct as f64 / n as f64),
            wall_ms: 0.0,
        })
    }

    /// The posed avatar of one dataset frame as a marchable scene.
    pub fn avatar_field(&self, frame: usize, mode: AssignMode) -> AvatarField<'_> {
        let fc = &self.frames[frame];
        AvatarField {
            deformer: Deformer {
                frame: &fc.posed,
                field: &self.model.deform,
                canon_index: &self.canon_index,
                part_labels: &self.head.part_labels,
                cond: fc.cond.clone(),
                mode,
            },
            field: &self.model.field,
        }
    }

    /// Render one dataset frame with the current model.
    pub fn render_frame(
        &self,
        frame: usize,
        k_samples: usize,
        min_weight: f64,
        mode: AssignMode,
    ) -> RenderedImage {
        let fc = &self.frames[frame];
        let field = self.avatar_field(frame, mode);
        let opt = RenderOptions {
            k_samples,
            near: fc.near,
            far: fc.far,
            min_weight,
        };
        render_image(&field, &fc.camera, &opt)
    }

    /// Image metrics of rendered frames against the dataset ground truth.
    pub fn evaluate(
        &self,
        indices: &[usize],
        k_samples: usize,
        min_weight: f64,
        mode: AssignMode,
    ) -> Result<Vec<FrameEval>> {
        indices
            .iter()
            .map(|&i| {
                let r = self.render_frame(i, k_samples, min_weight, mode);
                let gt = &self.dataset.frames[i].image;
                Ok(FrameEval {
                    frame: i,
                    psnr: metrics::psnr(&r.rgb, gt)?,
                    ssim: metrics::ssim(&r.rgb, gt)?,
                    l1: metrics::l1(&r.rgb, gt)?,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FrameEval {
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub l1: f64,
}

/// FNV-1a over each parameter's f32 bit pattern; stable across runs, used to
/// audit which parameters a stage touched.
pub fn param_hashes(model: &AvatarModel) -> BTreeMap<String, u64> {
    let mut out = BTreeMap::new();
    model.visit(&mut |name, p| {
        let mut h = 0xcbf29ce484222325u64;
        for v in &p.value.data {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        out.insert(name.to_string(), h);
    });
    out
}
