//! The trainable avatar: a part-based deformation field plus a canonical
//! occupancy/color field, and the adapter that lets a posed avatar be
//! ray-marched like any other scene.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::deform::{DeformConfig, Deformer, DeformationField};
use crate::field::{CanonicalField, FieldConfig};
use crate::render::{FieldBuf, SceneField, SurfaceSample};
use crate::tensor::{HasParams, Param, ParamIds};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub deform: DeformConfig,
    pub field: FieldConfig,
}

#[derive(Debug, Clone)]
pub struct AvatarModel {
    pub cfg: ModelConfig,
    pub deform: DeformationField,
    pub field: CanonicalField,
}

impl AvatarModel {
    pub fn new(ids: &mut ParamIds, seed: u64, cfg: ModelConfig, cond_dim: usize) -> AvatarModel {
        let deform = DeformationField::new(ids, seed, cfg.deform.clone(), cond_dim);
        let field = CanonicalField::new(ids, seed.wrapping_add(1), cfg.field.clone());
        AvatarModel { cfg, deform, field }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, p: &Param| n += p.value.numel());
        n
    }
}

impl HasParams for AvatarModel {
    fn visit(&self, f: &mut dyn FnMut(&str, &Param)) {
        self.deform.visit(f);
        self.field.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.deform.visit_mut(f);
        self.field.visit_mut(f);
    }
}

/// A posed avatar as a marchable scene: world points go through inverse
/// skinning and the learned part offset into canonical space, where the
/// occupancy/color field answers.
pub struct AvatarField<'a> {
    pub deformer: Deformer<'a>,
    pub field: &'a CanonicalField,
}

impl SceneField for AvatarField<'_> {
    fn to_field(&self, x: Vector3<f64>, buf: &mut FieldBuf) -> Vector3<f64> {
        self.deformer.canonical_point(x, &mut buf.deform)
    }

    fn occupancy(&self, x_field: Vector3<f64>, buf: &mut FieldBuf) -> f64 {
        self.field.occupancy(x_field, &mut buf.enc, &mut buf.mlp)
    }

    fn color(&self, surf: &SurfaceSample, dir: Vector3<f64>, buf: &mut FieldBuf) -> [f64; 3] {
        let _ = self.field.occupancy(surf.x_field, &mut buf.enc, &mut buf.mlp);
        let feature = std::mem::take(&mut buf.mlp.feature);
        let c = self.field.color(&feature, surf.normal, dir, &mut buf.color_in, &mut buf.color_mlp);
        buf.mlp.feature = feature;
        c
    }

    fn fd_step(&self) -> f64 {
        self.field.cfg.fd_step
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deform::AssignMode;
    use crate::head::inverse::{KnnIndex, PosedFrame};
    use crate::head::{canonical_vertices, flame_lite, CanonicalConfig};
    use crate::render::{render_ray, Ray, RenderOptions};

    #[test]
    fn zero_deformation_avatar_marches_like_its_canonical_field() {
        let model = flame_lite::generate(0);
        let canon = CanonicalConfig {
            beta_avg: vec![0.0; model.n_beta()],
        };
        let mut ids = ParamIds::new();
        let cfg = ModelConfig {
            deform: DeformConfig {
                hidden: 8,
                layers: 1,
                enc_freqs: 2,
                ..DeformConfig::default()
            },
            field: FieldConfig {
                occ_hidden: 16,
                occ_layers: 2,
                color_hidden: 12,
                color_layers: 1,
                x_freqs: 3,
                d_freqs: 1,
                ..FieldConfig::default()
            },
        };
        let theta = vec![0.0; model.theta_len()];
        let psi = vec![0.0; model.n_psi()];
        let avatar = AvatarModel::new(&mut ids, 1, cfg, theta.len() + psi.len());
        let frame = PosedFrame::new(&model, &canon, &theta, &psi, 4).unwrap();
        let canon_verts = canonical_vertices(&model, &canon);
        let canon_index = KnnIndex::new(canon_verts);
        let mut cond = theta.clone();
        cond.extend(&psi);
        let field = AvatarField {
            deformer: Deformer {
                frame: &frame,
                field: &avatar.deform,
                canon_index: &canon_index,
                part_labels: &model.part_labels,
                cond,
                mode: AssignMode::Soft,
            },
            field: &avatar.field,
        };
        // At rest with zero-init deformation, to_field is inverse skinning
        // alone, which round-trips template vertices.
        let mut buf = FieldBuf::default();
        let v0 = field.deformer.frame.knn.points()[0];
        let back = field.to_field(v0, &mut buf);
        assert!((back - canon_index.points()[0]).norm() < 1e-9);
        // A ray through the head produces a finite, in-range result.
        let out = render_ray(
            &field,
            &Ray {
                origin: Vector3::new(0.0, 0.0, -1.0),
                dir: Vector3::new(0.0, 0.0, 1.0),
            },
            &RenderOptions {
                k_samples: 16,
                near: 0.7,
                far: 1.3,
                min_weight: 0.0,
            },
            None,
            &mut buf,
        );
        assert!(out.alpha > 0.0 && out.alpha < 1.0);
        assert!(out.rgb.iter().all(|c| (0.0..=1.0).contains(c)));
    }
}
