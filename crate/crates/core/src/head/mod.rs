//! Parametric head model: template mesh, kinematic joints, blendshapes,
//! linear blend skinning and its pointwise inverse.

pub mod flame_lite;
pub mod inverse;
pub mod io;
pub mod lbs;

use nalgebra::Vector3;

use crate::error::{Error, Result};

/// Parametric head model. Layouts are row-major:
/// `joint_regressor[k][v]`, `blend_weights[v][k]`, bases `[coef][v][xyz]`.
#[derive(Debug, Clone)]
pub struct HeadModel {
    pub template: Vec<Vector3<f64>>,
    pub faces: Vec<[u32; 3]>,
    pub joint_regressor: Vec<f64>,
    /// Parent joint per joint; -1 marks the root. Parents precede children.
    pub parents: Vec<i32>,
    pub blend_weights: Vec<f64>,
    pub shape_basis: Vec<f64>,
    /// Pose-corrective basis with `9 * n_joints` coefficients.
    pub pose_basis: Vec<f64>,
    pub expr_basis: Vec<f64>,
    /// Semantic part id per vertex, in `0..n_parts`.
    pub part_labels: Vec<u32>,
    pub n_parts: usize,
}

impl HeadModel {
    pub fn n_verts(&self) -> usize {
        self.template.len()
    }

    pub fn n_joints(&self) -> usize {
        self.parents.len()
    }

    pub fn n_beta(&self) -> usize {
        let per = self.n_verts() * 3;
        if per == 0 {
            0
        } else {
            self.shape_basis.len() / per
        }
    }

    pub fn n_psi(&self) -> usize {
        let per = self.n_verts() * 3;
        if per == 0 {
            0
        } else {
            self.expr_basis.len() / per
        }
    }

    /// Expected length of a pose vector: global rotation plus per-joint rotations.
    pub fn theta_len(&self) -> usize {
        3 * (self.n_joints() + 1)
    }

    pub fn blend_weight(&self, vert: usize, joint: usize) -> f64 {
        self.blend_weights[vert * self.n_joints() + joint]
    }

    /// Check structural invariants; run on every load and after generation.
    pub fn validate(&self) -> Result<()> {
        let (nv, nj) = (self.n_verts(), self.n_joints());
        if nv == 0 || nj == 0 {
            return Err(Error::invalid("head model", "empty template or joints"));
        }
        let dims = [
            ("joint_regressor", self.joint_regressor.len(), nj * nv),
            ("blend_weights", self.blend_weights.len(), nv * nj),
            ("pose_basis", self.pose_basis.len(), 9 * nj * nv * 3),
            ("part_labels", self.part_labels.len(), nv),
        ];
        for (name, got, want) in dims {
            if got != want {
                return Err(Error::ShapeMismatch {
                    context: format!("head model {name}"),
                    expected: vec![want],
                    got: vec![got],
                });
            }
        }
        for (name, len) in [
            ("shape_basis", self.shape_basis.len()),
            ("expr_basis", self.expr_basis.len()),
        ] {
            if len % (nv * 3) != 0 {
                return Err(Error::invalid(
                    "head model",
                    format!("{name} length {len} is not a multiple of 3*n_verts"),
                ));
            }
        }
        for (k, &p) in self.parents.iter().enumerate() {
            if p >= k as i32 || p < -1 {
                return Err(Error::invalid(
                    "head model",
                    format!("joint {k} has parent {p}; parents must precede children"),
                ));
            }
        }
        for v in 0..nv {
            let row = &self.blend_weights[v * nj..(v + 1) * nj];
            if row.iter().any(|&w| w < 0.0) {
                return Err(Error::invalid("head model", format!("negative blend weight at vertex {v}")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-5 {
                return Err(Error::invalid(
                    "head model",
                    format!("blend weights at vertex {v} sum to {sum}"),
                ));
            }
        }
        for k in 0..nj {
            let sum: f64 = self.joint_regressor[k * nv..(k + 1) * nv].iter().sum();
            if (sum - 1.0).abs() > 1e-5 {
                return Err(Error::invalid(
                    "head model",
                    format!("joint regressor row {k} sums to {sum}"),
                ));
            }
        }
        if self.n_parts == 0 || self.part_labels.iter().any(|&l| l as usize >= self.n_parts) {
            return Err(Error::invalid("head model", "part label out of range"));
        }
        let finite = self
            .template
            .iter()
            .all(|v| v.iter().all(|c| c.is_finite()))
            && self.joint_regressor.iter().all(|v| v.is_finite())
            && self.blend_weights.iter().all(|v| v.is_finite())
            && self.shape_basis.iter().all(|v| v.is_finite())
            && self.pose_basis.iter().all(|v| v.is_finite())
            && self.expr_basis.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("head model", "non-finite value"));
        }
        Ok(())
    }
}

/// Pose and expression coefficients for one frame.
/// `theta` is axis-angle: global rotation first, then one rotation per joint.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseExpr {
    pub beta: Vec<f64>,
    pub theta: Vec<f64>,
    pub psi: Vec<f64>,
}

impl PoseExpr {
    pub fn rest(model: &HeadModel) -> PoseExpr {
        PoseExpr {
            beta: vec![0.0; model.n_beta()],
            theta: vec![0.0; model.theta_len()],
            psi: vec![0.0; model.n_psi()],
        }
    }

    /// The conditioning vector fed to the deformation nets: `[theta, psi]` raw.
    pub fn condition(&self) -> Vec<f64> {
        let mut c = self.theta.clone();
        c.extend_from_slice(&self.psi);
        c
    }

    pub fn validate(&self, model: &HeadModel) -> Result<()> {
        if self.theta.len() != model.theta_len()
            || self.beta.len() != model.n_beta()
            || self.psi.len() != model.n_psi()
        {
            return Err(Error::ShapeMismatch {
                context: "pose/expression coefficients".into(),
                expected: vec![model.n_beta(), model.theta_len(), model.n_psi()],
                got: vec![self.beta.len(), self.theta.len(), self.psi.len()],
            });
        }
        for chunk in self.theta.chunks(3) {
            let mag = (chunk[0] * chunk[0] + chunk[1] * chunk[1] + chunk[2] * chunk[2]).sqrt();
            if mag >= std::f64::consts::PI {
                return Err(Error::invalid(
                    "pose",
                    format!("axis-angle magnitude {mag:.3} must stay below pi"),
                ));
            }
        }
        Ok(())
    }
}

/// Canonical-space configuration: the sequence-level average shape.
/// The canonical template carries this shape, so inverse skinning removes
/// pose and expression offsets only.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalConfig {
    pub beta_avg: Vec<f64>,
}

/// Template vertices carrying the average shape: the geometry the canonical
/// field is anchored to.
pub fn canonical_vertices(model: &HeadModel, canon: &CanonicalConfig) -> Vec<Vector3<f64>> {
    let offsets = lbs::shape_offsets(model, &canon.beta_avg);
    model
        .template
        .iter()
        .zip(&offsets)
        .map(|(t, o)| t + o)
        .collect()
}
