//! Procedural miniature head model: a deformed sphere with two joints
//! (neck, jaw), four shape and four expression blendshapes, pose correctives
//! and seven semantic part labels. Deterministic for a given seed.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::head::HeadModel;

pub const N_PARTS: usize = 7;
pub const PART_NAMES: [&str; N_PARTS] = [
    "scalp", "forehead", "eyes", "nose", "mouth", "jaw", "neck",
];

const ROWS: usize = 32;
const COLS: usize = 32;
const N_BETA: usize = 4;
const N_PSI: usize = 4;

/// Axes: y up, z out of the face, x to the model's left.
const NECK_JOINT: [f64; 3] = [0.0, -0.20, 0.01];
const JAW_JOINT: [f64; 3] = [0.0, -0.04, 0.02];

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn gauss(x: f64, sigma: f64) -> f64 {
    (-(x * x) / (2.0 * sigma * sigma)).exp()
}

/// Spherical parameterization of a vertex: polar angle from +y and azimuth
/// from +z (the face direction), both in degrees.
struct VertAngles {
    phi: f64,
    lam: f64,
    /// Unit radial direction.
    dir: Vector3<f64>,
}

fn vertex_angles() -> Vec<VertAngles> {
    let mut out = Vec::with_capacity((ROWS - 1) * COLS + 2);
    for i in 1..ROWS {
        let phi = 180.0 * i as f64 / ROWS as f64;
        for j in 0..COLS {
            let lam = 360.0 * j as f64 / COLS as f64;
            let lam = if lam > 180.0 { lam - 360.0 } else { lam };
            let (pr, lr) = (phi.to_radians(), lam.to_radians());
            out.push(VertAngles {
                phi,
                lam,
                dir: Vector3::new(pr.sin() * lr.sin(), pr.cos(), pr.sin() * lr.cos()),
            });
        }
    }
    out.push(VertAngles {
        phi: 0.0,
        lam: 0.0,
        dir: Vector3::new(0.0, 1.0, 0.0),
    });
    out.push(VertAngles {
        phi: 180.0,
        lam: 0.0,
        dir: Vector3::new(0.0, -1.0, 0.0),
    });
    out
}

fn template_position(a: &VertAngles) -> Vector3<f64> {
    let mut p = Vector3::new(0.23 * a.dir.x, 0.27 * a.dir.y, 0.24 * a.dir.z);
    let nose = 0.030 * gauss(a.phi - 94.0, 9.0) * gauss(a.lam, 10.0);
    let chin = 0.022 * gauss(a.phi - 128.0, 12.0) * gauss(a.lam, 18.0);
    p += a.dir * (nose + chin);
    p
}

fn part_label(a: &VertAngles) -> u32 {
    let (phi, lam) = (a.phi, a.lam.abs());
    let front = lam <= 90.0;
    if phi >= 148.0 {
        return 6; // neck
    }
    if phi < 52.0 {
        return 0; // scalp
    }
    if !front || lam > 105.0 {
        return if phi < 120.0 { 0 } else { 6 };
    }
    if phi < 72.0 {
        return if lam <= 60.0 { 1 } else { 0 }; // forehead
    }
    if (72.0..92.0).contains(&phi) && (14.0..=46.0).contains(&lam) {
        return 2; // eyes
    }
    if (80.0..108.0).contains(&phi) && lam < 13.0 {
        return 3; // nose
    }
    if (108.0..126.0).contains(&phi) && lam <= 28.0 {
        return 4; // mouth
    }
    5 // jaw / chin / cheeks
}

fn jaw_weight(a: &VertAngles) -> f64 {
    let below_eyes = smoothstep(95.0, 115.0, a.phi);
    let frontness = smoothstep(100.0, 70.0, a.lam.abs());
    let above_neck = smoothstep(152.0, 140.0, a.phi);
    let w = 0.95 * below_eyes * frontness * above_neck;
    if w < 1e-3 {
        0.0
    } else {
        w
    }
}

fn faces() -> Vec<[u32; 3]> {
    let rings = ROWS - 1;
    let vid = |ri: usize, j: usize| (ri * COLS + (j % COLS)) as u32;
    let top = (rings * COLS) as u32;
    let bottom = top + 1;
    let mut f = Vec::new();
    for j in 0..COLS {
        f.push([top, vid(0, j), vid(0, j + 1)]);
        f.push([bottom, vid(rings - 1, j + 1), vid(rings - 1, j)]);
    }
    for ri in 0..rings - 1 {
        for j in 0..COLS {
            let (a, b, c, d) = (vid(ri, j), vid(ri, j + 1), vid(ri + 1, j + 1), vid(ri + 1, j));
            f.push([a, b, c]);
            f.push([a, c, d]);
        }
    }
    f
}

/// Rows of a joint regressor as uniform weights over the `n` vertices nearest
/// each target position.
fn regressor_rows(template: &[Vector3<f64>], targets: &[Vector3<f64>], n: usize) -> Vec<f64> {
    let mut rows = vec![0.0; targets.len() * template.len()];
    for (k, target) in targets.iter().enumerate() {
        let mut order: Vec<usize> = (0..template.len()).collect();
        order.sort_by(|&a, &b| {
            let da = (template[a] - target).norm();
            let db = (template[b] - target).norm();
            da.partial_cmp(&db).unwrap().then(a.cmp(&b))
        });
        for &v in order.iter().take(n) {
            rows[k * template.len() + v] = 1.0 / n as f64;
        }
    }
    rows
}

/// Generate the miniature head model. The seed only varies the pose-corrective
/// patterns; mesh, labels and weights are fixed by construction.
pub fn generate(seed: u64) -> HeadModel {
    let angles = vertex_angles();
    let template: Vec<Vector3<f64>> = angles.iter().map(template_position).collect();
    let nv = template.len();

    let part_labels: Vec<u32> = angles.iter().map(part_label).collect();

    // Blend weights over [neck, jaw]; rows sum to one.
    let mut blend_weights = Vec::with_capacity(nv * 2);
    for a in &angles {
        let wj = jaw_weight(a);
        blend_weights.push(1.0 - wj);
        blend_weights.push(wj);
    }

    let joint_regressor = regressor_rows(
        &template,
        &[Vector3::from(NECK_JOINT), Vector3::from(JAW_JOINT)],
        24,
    );

    // Shape basis: scale, width, depth, forehead bulge.
    let mut shape_basis = vec![0.0; N_BETA * nv * 3];
    for (v, (a, p)) in angles.iter().zip(&template).enumerate() {
        let put = |basis: &mut [f64], b: usize, o: Vector3<f64>| {
            basis[b * nv * 3 + 3 * v] = o.x;
            basis[b * nv * 3 + 3 * v + 1] = o.y;
            basis[b * nv * 3 + 3 * v + 2] = o.z;
        };
        put(&mut shape_basis, 0, p * 0.05);
        put(&mut shape_basis, 1, Vector3::new(0.05 * p.x, 0.0, 0.0));
        put(&mut shape_basis, 2, Vector3::new(0.0, 0.0, 0.05 * p.z));
        put(
            &mut shape_basis,
            3,
            a.dir * (0.02 * gauss(a.phi - 55.0, 15.0) * gauss(a.lam, 50.0)),
        );
    }

    // Pose correctives: smooth seeded patterns, localized to the vertices the
    // corresponding joint actually skins so that a rotation of one joint
    // never moves vertices with zero weight for it.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_joints = 2;
    let mut pose_basis = vec![0.0; 9 * n_joints * nv * 3];
    for r in 0..9 * n_joints {
        let joint = r / 9;
        let (fp, fl, phase) = (
            rng.gen_range(1.0..3.0),
            rng.gen_range(1.0..3.0),
            rng.gen_range(0.0..std::f64::consts::TAU),
        );
        for (v, a) in angles.iter().enumerate() {
            let w = blend_weights[v * 2 + joint];
            let pattern = (fp * a.phi.to_radians() + phase).sin() * (fl * a.lam.to_radians()).cos();
            let o = a.dir * (0.004 * w * pattern);
            pose_basis[r * nv * 3 + 3 * v] = o.x;
            pose_basis[r * nv * 3 + 3 * v + 1] = o.y;
            pose_basis[r * nv * 3 + 3 * v + 2] = o.z;
        }
    }

    // Expressions: mouth open, smile, brow raise, cheek puff.
    let mut expr_basis = vec![0.0; N_PSI * nv * 3];
    for (v, a) in angles.iter().enumerate() {
        let put = |basis: &mut [f64], b: usize, o: Vector3<f64>| {
            basis[b * nv * 3 + 3 * v] = o.x;
            basis[b * nv * 3 + 3 * v + 1] = o.y;
            basis[b * nv * 3 + 3 * v + 2] = o.z;
        };
        let mouth = gauss(a.phi - 117.0, 10.0) * gauss(a.lam, 25.0);
        put(&mut expr_basis, 0, Vector3::new(0.0, -0.05 * mouth, 0.0));
        let corners = gauss(a.phi - 117.0, 9.0) * gauss(a.lam.abs() - 30.0, 12.0);
        put(
            &mut expr_basis,
            1,
            Vector3::new(0.012 * a.lam.signum() * corners, 0.025 * corners, 0.0),
        );
        let brow = gauss(a.phi - 64.0, 8.0) * gauss(a.lam, 40.0);
        put(&mut expr_basis, 2, Vector3::new(0.0, 0.02 * brow, 0.0));
        let cheeks = gauss(a.phi - 105.0, 12.0) * gauss(a.lam.abs() - 42.0, 15.0);
        put(&mut expr_basis, 3, a.dir * (0.025 * cheeks));
    }

    let model = HeadModel {
        template,
        faces: faces(),
        joint_regressor,
        parents: vec![-1, 0],
        blend_weights,
        shape_basis,
        pose_basis,
        expr_basis,
        part_labels,
        n_parts: N_PARTS,
    };
    model.validate().expect("generated model must validate");
    model
}
