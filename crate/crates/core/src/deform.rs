//! Learned fine deformation: a soft assignment of space into semantic parts
//! and one small offset net per part, blended into a single bounded offset.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::head::inverse::{KnnIndex, PosedFrame};
use crate::tensor::nn::{Mlp, MlpBuf};
use crate::tensor::tape::{posenc_into, posenc_len, softmax_into, Tape, Var};
use crate::tensor::{HasParams, Param, ParamIds};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DeformConfig {
    /// Number of semantic parts (local offset nets).
    pub n_parts: usize,
    /// Hidden width of the assigner and each local net.
    pub hidden: usize,
    /// Hidden layer count per net.
    pub layers: usize,
    /// Positional-encoding frequencies for the coarse-deformed position.
    pub enc_freqs: usize,
    /// Offset bound: outputs pass through `max_offset * tanh`.
    pub max_offset: f64,
}

impl Default for DeformConfig {
    fn default() -> Self {
        DeformConfig {
            n_parts: 7,
            hidden: 64,
            layers: 4,
            enc_freqs: 6,
            max_offset: 0.1,
        }
    }
}

/// Assigner MLP plus one offset net per part, all conditioned on the
/// encoded coarse-deformed position and the raw pose/expression vector.
#[derive(Debug, Clone)]
pub struct DeformationField {
    pub cfg: DeformConfig,
    pub cond_dim: usize,
    pub assigner: Mlp,
    pub locals: Vec<Mlp>,
}

impl DeformationField {
    /// Final layers are zero-initialized: the assigner starts uniform and
    /// every offset starts at zero, so the field begins as the identity.
    pub fn new(ids: &mut ParamIds, seed: u64, cfg: DeformConfig, cond_dim: usize) -> DeformationField {
        let in_dim = posenc_len(3, cfg.enc_freqs) + cond_dim;
        let mut dims = vec![in_dim];
        dims.extend(std::iter::repeat(cfg.hidden).take(cfg.layers));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut assigner_dims = dims.clone();
        assigner_dims.push(cfg.n_parts);
        let assigner = Mlp::new(ids, &mut rng, "deform.assigner", &assigner_dims, true);
        let locals = (0..cfg.n_parts)
            .map(|i| {
                let mut d = dims.clone();
                d.push(3);
                Mlp::new(ids, &mut rng, &format!("deform.local.{i}"), &d, true)
            })
            .collect();
        DeformationField {
            cfg,
            cond_dim,
            assigner,
            locals,
        }
    }

    /// Encode `[posenc(x), cond]`, the shared input of every net.
    pub fn encode_input(&self, x: Vector3<f64>, cond: &[f64], out: &mut Vec<f64>) {
        debug_assert_eq!(cond.len(), self.cond_dim);
        let enc = posenc_len(3, self.cfg.enc_freqs);
        out.resize(enc + cond.len(), 0.0);
        posenc_into(&[x.x, x.y, x.z], self.cfg.enc_freqs, &mut out[..enc]);
        out[enc..].copy_from_slice(cond);
    }

    /// Part probabilities `S(x, cond)`, summing to one.
    pub fn assign_probs(&self, input: &[f64], buf: &mut MlpBuf, probs: &mut Vec<f64>) {
        self.assigner.forward_f64(input, buf);
        probs.resize(self.cfg.n_parts, 0.0);
        softmax_into(&buf.out, probs);
    }

    /// Bounded offset of one part net.
    pub fn local_offset(&self, part: usize, input: &[f64], buf: &mut MlpBuf) -> Vector3<f64> {
        self.locals[part].forward_f64(input, buf);
        let b = self.cfg.max_offset;
        Vector3::new(
            b * buf.out[0].tanh(),
            b * buf.out[1].tanh(),
            b * buf.out[2].tanh(),
        )
    }

    /// Soft part deformation `sum_i S_i(x) D_i(x)`.
    pub fn part_deform(&self, input: &[f64], buf: &mut MlpBuf, probs: &mut Vec<f64>) -> Vector3<f64> {
        self.assign_probs(input, buf, probs);
        let mut off = Vector3::zeros();
        for part in 0..self.cfg.n_parts {
            off += self.local_offset(part, input, buf) * probs[part];
        }
        off
    }

    /// Hard deformation: only the labeled part's net, probability one.
    pub fn hard_part_deform(&self, input: &[f64], label: usize, buf: &mut MlpBuf) -> Vector3<f64> {
        self.local_offset(label, input, buf)
    }

    // ---- tape paths ----

    /// Offset of one part net on the tape; `input` is the encoded input leaf.
    pub fn local_offset_tape(&self, tape: &mut Tape, part: usize, input: Var) -> Result<Var> {
        let raw = self.locals[part].forward_tape(tape, input)?;
        let t = tape.tanh(raw);
        Ok(tape.affine(t, self.cfg.max_offset, 0.0))
    }

    pub fn assign_probs_tape(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let logits = self.assigner.forward_tape(tape, input)?;
        Ok(tape.softmax(logits))
    }

    /// Soft part deformation on the tape.
    pub fn part_deform_tape(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let probs = self.assign_probs_tape(tape, input)?;
        let mut total: Option<Var> = None;
        for part in 0..self.cfg.n_parts {
            let off = self.local_offset_tape(tape, part, input)?;
            // Select S_part as a length-1 slice via a one-hot dot product.
            let mut onehot = vec![0.0; self.cfg.n_parts];
            onehot[part] = 1.0;
            let oh = tape.leaf(&onehot);
            let masked = tape.mul(probs, oh)?;
            let s = tape.sum(masked);
            let scaled = tape.mul_scalar(off, s)?;
            total = Some(match total {
                None => scaled,
                Some(t) => tape.add(t, scaled)?,
            });
        }
        Ok(total.unwrap())
    }

    pub fn param_count_deform(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, p: &Param| n += p.value.numel());
        n
    }
}

impl HasParams for DeformationField {
    fn visit(&self, f: &mut dyn FnMut(&str, &Param)) {
        self.assigner.visit(f);
        for l in &self.locals {
            l.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.assigner.visit_mut(f);
        for l in &mut self.locals {
            l.visit_mut(f);
        }
    }
}

/// How the fine deformation is applied during a render or training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssignMode {
    /// Blend all part nets by the assigner's probabilities.
    Soft,
    /// One-hot assignment from the nearest canonical vertex's part label.
    Hard,
}

/// Full posed-to-canonical map for one frame:
/// inverse skinning followed by the learned part offset.
pub struct Deformer<'a> {
    pub frame: &'a PosedFrame,
    pub field: &'a DeformationField,
    /// Canonical template vertices (carrying the average shape).
    pub canon_index: &'a KnnIndex,
    pub part_labels: &'a [u32],
    /// Raw `[theta, psi]` conditioning vector.
    pub cond: Vec<f64>,
    pub mode: AssignMode,
}

/// Scratch for repeated deformation queries.
#[derive(Default, Clone)]
pub struct DeformBuf {
    pub input: Vec<f64>,
    pub mlp: MlpBuf,
    pub probs: Vec<f64>,
}

impl Deformer<'_> {
    /// Part label of the nearest canonical vertex; used by hard assignment
    /// and as the distillation pseudo-label.
    pub fn nearest_label(&self, x_canonical: Vector3<f64>) -> usize {
        let nn = self.canon_index.nearest(x_canonical, 1);
        self.part_labels[nn[0].0] as usize
    }

    /// Coarse then fine: `x_c = ilbs(x) + D_part(ilbs(x), cond)`.
    pub fn canonical_point(&self, x_posed: Vector3<f64>, buf: &mut DeformBuf) -> Vector3<f64> {
        let xp = self.frame.inverse_lbs(x_posed);
        self.field.encode_input(xp, &self.cond, &mut buf.input);
        let off = match self.mode {
            AssignMode::Soft => self.field.part_deform(&buf.input, &mut buf.mlp, &mut buf.probs),
            AssignMode::Hard => {
                let label = self.nearest_label(xp);
                self.field.hard_part_deform(&buf.input, label, &mut buf.mlp)
            }
        };
        xp + off
    }
}
