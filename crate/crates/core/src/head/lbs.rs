//! Forward linear blend skinning with shape, pose-corrective and expression
//! blendshapes.

use nalgebra::{Matrix3, Vector3};

use crate::error::Result;
use crate::head::{HeadModel, PoseExpr};

/// Rigid-ish affine transform `p -> m p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub m: Matrix3<f64>,
    pub t: Vector3<f64>,
}

impl Affine {
    pub fn identity() -> Affine {
        Affine {
            m: Matrix3::identity(),
            t: Vector3::zeros(),
        }
    }

    /// Rotation about a fixed center: `p -> r (p - c) + c`.
    pub fn rotation_about(c: Vector3<f64>, r: Matrix3<f64>) -> Affine {
        Affine { m: r, t: c - r * c }
    }

    pub fn apply(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.m * p + self.t
    }

    /// `self . other`: apply `other` first.
    pub fn compose(&self, other: &Affine) -> Affine {
        Affine {
            m: self.m * other.m,
            t: self.m * other.t + self.t,
        }
    }

    pub fn inverse(&self) -> Option<Affine> {
        if self.m.determinant().abs() < 1e-12 {
            return None;
        }
        let mi = self.m.try_inverse()?;
        Some(Affine {
            m: mi,
            t: -(mi * self.t),
        })
    }

    pub fn scaled(&self, s: f64) -> Affine {
        Affine {
            m: self.m * s,
            t: self.t * s,
        }
    }

    pub fn add(&self, o: &Affine) -> Affine {
        Affine {
            m: self.m + o.m,
            t: self.t + o.t,
        }
    }

    pub fn zero() -> Affine {
        Affine {
            m: Matrix3::zeros(),
            t: Vector3::zeros(),
        }
    }
}

/// Axis-angle to rotation matrix.
pub fn rodrigues(aa: &[f64]) -> Matrix3<f64> {
    let v = Vector3::new(aa[0], aa[1], aa[2]);
    let angle = v.norm();
    if angle < 1e-12 {
        return Matrix3::identity();
    }
    let k = v / angle;
    let kx = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
    Matrix3::identity() + kx * angle.sin() + kx * kx * (1.0 - angle.cos())
}

/// Offsets from the shape basis alone.
pub fn shape_offsets(model: &HeadModel, beta: &[f64]) -> Vec<Vector3<f64>> {
    let mut out = vec![Vector3::zeros(); model.n_verts()];
    accumulate_basis(&model.shape_basis, beta, &mut out);
    out
}

/// Pose feature driving the corrective basis: vectorized `R(theta_k) - I`
/// for each non-global joint, `9 * n_joints` wide, zero at rest.
pub fn pose_feature(model: &HeadModel, theta: &[f64]) -> Vec<f64> {
    let mut f = Vec::with_capacity(9 * model.n_joints());
    for k in 0..model.n_joints() {
        let r = rodrigues(&theta[3 * (k + 1)..3 * (k + 2)]);
        for i in 0..3 {
            for j in 0..3 {
                f.push(r[(i, j)] - if i == j { 1.0 } else { 0.0 });
            }
        }
    }
    f
}

/// Per-vertex blendshape offsets `B_S(beta) + B_P(theta) + B_E(psi)`.
pub fn blendshape_offsets(model: &HeadModel, pe: &PoseExpr) -> Vec<Vector3<f64>> {
    let mut out = vec![Vector3::zeros(); model.n_verts()];
    accumulate_basis(&model.shape_basis, &pe.beta, &mut out);
    accumulate_basis(&model.pose_basis, &pose_feature(model, &pe.theta), &mut out);
    accumulate_basis(&model.expr_basis, &pe.psi, &mut out);
    out
}

/// Pose and expression offsets only (`B_P + B_E`), the part inverse skinning
/// removes; the canonical template keeps the shape term.
pub fn pose_expr_offsets(model: &HeadModel, pe: &PoseExpr) -> Vec<Vector3<f64>> {
    let mut out = vec![Vector3::zeros(); model.n_verts()];
    accumulate_basis(&model.pose_basis, &pose_feature(model, &pe.theta), &mut out);
    accumulate_basis(&model.expr_basis, &pe.psi, &mut out);
    out
}

fn accumulate_basis(basis: &[f64], coefs: &[f64], out: &mut [Vector3<f64>]) {
    let per = out.len() * 3;
    debug_assert_eq!(basis.len(), coefs.len() * per);
    for (c_idx, &c) in coefs.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        let row = &basis[c_idx * per..(c_idx + 1) * per];
        for (v, o) in out.iter_mut().enumerate() {
            o.x += c * row[3 * v];
            o.y += c * row[3 * v + 1];
            o.z += c * row[3 * v + 2];
        }
    }
}

/// Shape-adjusted joint positions `J(beta)`.
pub fn joint_positions(model: &HeadModel, beta: &[f64]) -> Vec<Vector3<f64>> {
    let offsets = shape_offsets(model, beta);
    let nv = model.n_verts();
    (0..model.n_joints())
        .map(|k| {
            let row = &model.joint_regressor[k * nv..(k + 1) * nv];
            let mut j = Vector3::zeros();
            for (v, &w) in row.iter().enumerate() {
                if w != 0.0 {
                    j += (model.template[v] + offsets[v]) * w;
                }
            }
            j
        })
        .collect()
}

/// World transform per joint, relative to the rest pose: the identity at
/// `theta = 0`. The global rotation (first three theta entries) acts about
/// the origin and premultiplies the whole chain.
pub fn joint_transforms(model: &HeadModel, beta: &[f64], theta: &[f64]) -> Vec<Affine> {
    let joints = joint_positions(model, beta);
    let global = Affine {
        m: rodrigues(&theta[0..3]),
        t: Vector3::zeros(),
    };
    let mut world: Vec<Affine> = Vec::with_capacity(model.n_joints());
    for k in 0..model.n_joints() {
        let local = Affine::rotation_about(joints[k], rodrigues(&theta[3 * (k + 1)..3 * (k + 2)]));
        let parent = match model.parents[k] {
            -1 => &global,
            p => &world[p as usize],
        };
        world.push(parent.compose(&local));
    }
    world
}

/// Blended transform for one vertex: `sum_k W[v][k] M_k`.
pub fn blended_transform(model: &HeadModel, transforms: &[Affine], vert: usize) -> Affine {
    let mut acc = Affine::zero();
    for (k, t) in transforms.iter().enumerate() {
        let w = model.blend_weight(vert, k);
        if w != 0.0 {
            acc = acc.add(&t.scaled(w));
        }
    }
    acc
}

/// Forward linear blend skinning: posed vertex positions for `pe`.
pub fn lbs_forward(model: &HeadModel, pe: &PoseExpr) -> Result<Vec<Vector3<f64>>> {
    pe.validate(model)?;
    let transforms = joint_transforms(model, &pe.beta, &pe.theta);
    let offsets = blendshape_offsets(model, pe);
    Ok((0..model.n_verts())
        .map(|v| blended_transform(model, &transforms, v).apply(model.template[v] + offsets[v]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::flame_lite;
    use std::f64::consts::FRAC_PI_2;

    fn model() -> HeadModel {
        flame_lite::generate(42)
    }

    #[test]
    fn rest_pose_reproduces_template() {
        let m = model();
        let pe = PoseExpr::rest(&m);
        let posed = lbs_forward(&m, &pe).unwrap();
        for (p, t) in posed.iter().zip(&m.template) {
            assert!((p - t).norm() < 1e-12);
        }
    }

    #[test]
    fn rest_transforms_are_identity() {
        let m = model();
        for t in joint_transforms(&m, &vec![0.0; m.n_beta()], &vec![0.0; m.theta_len()]) {
            assert!((t.m - Matrix3::identity()).norm() < 1e-12);
            assert!(t.t.norm() < 1e-12);
        }
    }

    #[test]
    fn global_rotation_reaches_every_joint() {
        let m = model();
        let mut theta = vec![0.0; m.theta_len()];
        theta[2] = FRAC_PI_2; // 90 degrees about z
        let r = rodrigues(&theta[0..3]);
        for t in joint_transforms(&m, &vec![0.0; m.n_beta()], &theta) {
            assert!((t.m - r).norm() < 1e-12);
            assert!(t.t.norm() < 1e-12);
        }
    }

    #[test]
    fn jaw_rotation_leaves_zero_weight_vertices_fixed() {
        let m = model();
        let mut pe = PoseExpr::rest(&m);
        pe.theta[3 * 2] = 0.3; // jaw joint (index 1) rotation about x
        let posed = lbs_forward(&m, &pe).unwrap();
        let mut checked = 0;
        for v in 0..m.n_verts() {
            if m.blend_weight(v, 1) == 0.0 {
                assert!((posed[v] - m.template[v]).norm() < 1e-7);
                checked += 1;
            }
        }
        assert!(checked > 0, "expected some zero-jaw-weight vertices");
    }

    #[test]
    fn global_motion_is_equivariant() {
        let m = model();
        let mut pe = PoseExpr::rest(&m);
        pe.theta[4] = 0.25;
        pe.theta[6] = 0.2;
        pe.psi[1] = 0.5;
        let base = lbs_forward(&m, &pe).unwrap();

        let mut pe_rot = pe.clone();
        pe_rot.theta[0] = 0.4;
        pe_rot.theta[1] = -0.2;
        let rotated = lbs_forward(&m, &pe_rot).unwrap();

        let r = rodrigues(&pe_rot.theta[0..3]);
        for (a, b) in rotated.iter().zip(&base) {
            assert!((a - r * b).norm() < 1e-12);
        }
    }

    #[test]
    fn pose_feature_vanishes_at_rest() {
        let m = model();
        let f = pose_feature(&m, &vec![0.0; m.theta_len()]);
        assert_eq!(f.len(), 9 * m.n_joints());
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rodrigues_quarter_turn() {
        let r = rodrigues(&[0.0, 0.0, FRAC_PI_2]);
        let v = r * Vector3::new(1.0, 0.0, 0.0);
        assert!((v - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn affine_inverse_composes_to_identity() {
        let a = Affine::rotation_about(Vector3::new(0.1, -0.2, 0.3), rodrigues(&[0.2, 0.1, -0.4]));
        let i = a.inverse().unwrap().compose(&a);
        assert!((i.m - Matrix3::identity()).norm() < 1e-12);
        assert!(i.t.norm() < 1e-12);
    }
}
