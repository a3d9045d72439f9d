//! Head-model file I/O on top of the tensor container.

use std::path::Path;

use nalgebra::Vector3;

use crate::container::Container;
use crate::error::Result;
use crate::head::HeadModel;

pub fn save_head_model(path: &Path, model: &HeadModel) -> Result<()> {
    let nv = model.n_verts();
    let nj = model.n_joints();
    let mut c = Container::default();
    c.insert_f32(
        "template",
        &[nv, 3],
        model
            .template
            .iter()
            .flat_map(|v| [v.x as f32, v.y as f32, v.z as f32])
            .collect(),
    );
    c.insert_i32(
        "faces",
        &[model.faces.len(), 3],
        model.faces.iter().flatten().map(|&i| i as i32).collect(),
    );
    c.insert_f32(
        "joint_regressor",
        &[nj, nv],
        model.joint_regressor.iter().map(|&v| v as f32).collect(),
    );
    c.insert_i32("parents", &[nj], model.parents.clone());
    c.insert_f32(
        "blend_weights",
        &[nv, nj],
        model.blend_weights.iter().map(|&v| v as f32).collect(),
    );
    c.insert_f32(
        "shape_basis",
        &[model.n_beta(), nv, 3],
        model.shape_basis.iter().map(|&v| v as f32).collect(),
    );
    c.insert_f32(
        "pose_basis",
        &[9 * nj, nv, 3],
        model.pose_basis.iter().map(|&v| v as f32).collect(),
    );
    c.insert_f32(
        "expr_basis",
        &[model.n_psi(), nv, 3],
        model.expr_basis.iter().map(|&v| v as f32).collect(),
    );
    c.insert_i32(
        "part_labels",
        &[nv],
        model.part_labels.iter().map(|&l| l as i32).collect(),
    );
    c.save(path)
}

pub fn load_head_model(path: &Path) -> Result<HeadModel> {
    let c = Container::load(path)?;
    let (_, template) = c.f32("template")?;
    let template: Vec<Vector3<f64>> = template
        .chunks_exact(3)
        .map(|v| Vector3::new(v[0] as f64, v[1] as f64, v[2] as f64))
        .collect();
    let (_, faces) = c.i32("faces")?;
    let faces = faces
        .chunks_exact(3)
        .map(|f| [f[0] as u32, f[1] as u32, f[2] as u32])
        .collect();
    let (_, parents) = c.i32("parents")?;
    let (_, labels) = c.i32("part_labels")?;
    let part_labels: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
    let n_parts = part_labels.iter().max().map_or(0, |&m| m as usize + 1);
    let to_f64 = |name: &str| -> Result<Vec<f64>> {
        Ok(c.f32(name)?.1.iter().map(|&v| v as f64).collect())
    };
    let model = HeadModel {
        template,
        faces,
        joint_regressor: to_f64("joint_regressor")?,
        parents: parents.to_vec(),
        blend_weights: to_f64("blend_weights")?,
        shape_basis: to_f64("shape_basis")?,
        pose_basis: to_f64("pose_basis")?,
        expr_basis: to_f64("expr_basis")?,
        part_labels,
        n_parts,
    };
    model.validate()?;
    Ok(model)
}
