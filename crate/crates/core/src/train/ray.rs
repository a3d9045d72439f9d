//! One training ray on the autodiff tape: inverse skinning (constant),
//! learned deformation, canonical occupancy quadrature, surface color, and
//! the photometric plus normal-smoothness losses. The arithmetic mirrors the
//! plain ray marcher exactly, so evaluation and training see the same model.

use nalgebra::Vector3;

use crate::avatar::AvatarModel;
use crate::deform::AssignMode;
use crate::error::Result;
use crate::head::inverse::{KnnIndex, PosedFrame};
use crate::render::{Ray, RenderOptions, SURFACE_LEVEL};
use crate::tensor::tape::{Tape, Var};

/// Everything frame-specific a training ray needs.
pub struct RayEnv<'a> {
    pub posed: &'a PosedFrame,
    pub canon_index: &'a KnnIndex,
    pub part_labels: &'a [u32],
    /// Raw `[theta, psi]` conditioning vector.
    pub cond: &'a [f64],
    pub mode: AssignMode,
}

/// Loss graph handles plus their values for one ray.
pub struct RayGraph {
    pub photo: Var,
    pub photo_value: f64,
    /// Absent when no surface was found or its normal degenerated.
    pub normal: Option<Var>,
    pub normal_value: f64,
    pub rgb: [f64; 3],
    pub alpha: f64,
}

/// Build the per-ray loss graph. `jitter` holds one uniform draw per sample;
/// `ball_offset` is the probe offset for the normal regularizer.
#[allow(clippy::too_many_arguments)]
pub fn ray_loss_graph(
    tape: &mut Tape,
    model: &AvatarModel,
    env: &RayEnv,
    ray: &Ray,
    target: [f64; 3],
    jitter: &[f64],
    ball_offset: Vector3<f64>,
    opt: &RenderOptions,
    scratch: &mut Vec<f64>,
) -> Result<RayGraph> {
    let k = opt.k_samples;
    assert_eq!(jitter.len(), k);
    let dt = (opt.far - opt.near) / k as f64;

    // Canonical position of one world point, on the tape. The inverse
    // skinning itself is treated as a constant of the ray sample.
    let mut canonical_at = |tape: &mut Tape, x_world: Vector3<f64>| -> Result<Var> {
        let xp = env.posed.inverse_lbs(x_world);
        model.deform.encode_input(xp, env.cond, scratch);
        let input = tape.leaf(scratch);
        let offset = match env.mode {
            AssignMode::Soft => model.deform.part_deform_tape(tape, input)?,
            AssignMode::Hard => {
                let label = env.part_labels[env.canon_index.nearest(xp, 1)[0].0] as usize;
                model.deform.local_offset_tape(tape, label, input)?
            }
        };
        let base = tape.leaf(&[xp.x, xp.y, xp.z]);
        tape.add(base, offset)
    };

    let mut trans_var = tape.leaf_scalar(1.0);
    let mut trans_val = 1.0f64;
    let mut alpha_var = tape.leaf_scalar(0.0);
    let mut prev: Option<(f64, Var, Var)> = None; // (occ value, occ, canonical point)
    let mut crossing: Option<Var> = None;
    let mut best: Option<(f64, Var)> = None; // (weight value, canonical point)
    for i in 0..k {
        let t = opt.near + (i as f64 + jitter[i]) * dt;
        let xc = canonical_at(tape, ray.at(t))?;
        let (o, _) = model.field.occupancy_tape(tape, xc)?;
        let o_val = tape.scalar(o);
        let w_var = tape.mul(trans_var, o)?;
        let w_val = trans_val * o_val;
        alpha_var = tape.add(alpha_var, w_var)?;
        if best.map_or(true, |(bw, _)| w_val > bw) {
            best = Some((w_val, xc));
        }
        if crossing.is_none() && o_val >= SURFACE_LEVEL {
            crossing = Some(match prev {
                Some((op_val, op_var, xp_var)) if op_val < SURFACE_LEVEL => {
                    // Interpolate the level crossing; tau stays on the tape.
                    let half = tape.leaf_scalar(SURFACE_LEVEL);
                    let num = tape.sub(half, op_var)?;
                    let den = tape.sub(o, op_var)?;
                    let tau = tape.div_scalar(num, den)?;
                    let seg = tape.sub(xc, xp_var)?;
                    let step = tape.mul_scalar(seg, tau)?;
                    tape.add(xp_var, step)?
                }
                _ => xc,
            });
        }
        prev = Some((o_val, o, xc));
        let one_minus = tape.affine(o, -1.0, 1.0);
        trans_var = tape.mul(trans_var, one_minus)?;
        trans_val *= 1.0 - o_val;
        if opt.min_weight > 0.0 && trans_val < opt.min_weight {
            break;
        }
    }
    let alpha_val = tape.scalar(alpha_var);

    let surface = crossing.or_else(|| best.and_then(|(w, xc)| (w > 0.0).then_some(xc)));
    let white = tape.leaf(&[1.0, 1.0, 1.0]);
    let target_var = tape.leaf(&target);
    let (rgb_var, normal_pair) = match surface {
        None => (white, None),
        Some(xs) => {
            let (normal_var, degenerate) = unit_normal(tape, model, xs, -ray.dir)?;
            let (_, feat) = model.field.occupancy_tape(tape, xs)?;
            let c = model.field.color_tape(tape, feat, normal_var, ray.dir)?;
            let lit = tape.mul_scalar(c, alpha_var)?;
            let oma = tape.affine(alpha_var, -1.0, 1.0);
            let bg = tape.mul_scalar(white, oma)?;
            let rgb = tape.add(lit, bg)?;
            (rgb, (!degenerate).then_some((xs, normal_var)))
        }
    };
    let diff = tape.sub(rgb_var, target_var)?;
    let absdiff = tape.abs(diff);
    let photo = tape.sum(absdiff);
    let photo_value = tape.scalar(photo);
    let rgb_out = {
        let v = tape.value(rgb_var);
        [v[0], v[1], v[2]]
    };

    // Normal smoothness: squared difference of unit normals across a small
    // offset, skipped when either gradient degenerates.
    let mut normal = None;
    let mut normal_value = 0.0;
    if let Some((xs, n1)) = normal_pair {
        let d = tape.leaf(&[ball_offset.x, ball_offset.y, ball_offset.z]);
        let xn = tape.add(xs, d)?;
        let (n2, degenerate2) = unit_normal(tape, model, xn, -ray.dir)?;
        if !degenerate2 {
            let dn = tape.sub(n1, n2)?;
            let sq = tape.mul(dn, dn)?;
            let reg = tape.sum(sq);
            normal_value = tape.scalar(reg);
            normal = Some(reg);
        }
    }

    Ok(RayGraph {
        photo,
        photo_value,
        normal,
        normal_value,
        rgb: rgb_out,
        alpha: alpha_val,
    })
}

/// `-grad o / |grad o|` on the tape, or the constant `fallback` direction
/// when the gradient is degenerate (flagged in the second output).
fn unit_normal(
    tape: &mut Tape,
    model: &AvatarModel,
    x: Var,
    fallback: Vector3<f64>,
) -> Result<(Var, bool)> {
    let g = model.field.grad_occupancy_tape(tape, x)?;
    let n = tape.norm2(g);
    if tape.scalar(n) < crate::field::DEGENERATE_GRAD {
        Ok((tape.leaf(&[fallback.x, fallback.y, fallback.z]), true))
    } else {
        let neg = tape.affine(g, -1.0, 0.0);
        Ok((tape.div_scalar(neg, n)?, false))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::avatar::{AvatarField, AvatarModel, ModelConfig};
    use crate::deform::{DeformConfig, Deformer};
    use crate::field::FieldConfig;
    use crate::head::{canonical_vertices, flame_lite, CanonicalConfig};
    use crate::render::{render_ray, FieldBuf};
    use crate::tensor::{HasParams, ParamIds};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (crate::head::HeadModel, CanonicalConfig, AvatarModel, Vec<f64>, Vec<f64>) {
        let head = flame_lite::generate(3);
        let canon = CanonicalConfig {
            beta_avg: vec![0.2, -0.1, 0.0, 0.3],
        };
        let cfg = ModelConfig {
            deform: DeformConfig {
                hidden: 12,
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
        let theta: Vec<f64> = vec![0.05, 0.2, 0.0, 0.0, 0.1, 0.0, 0.15, 0.0, 0.0];
        let psi = vec![0.4, -0.2, 0.1, 0.0];
        let mut ids = ParamIds::new();
        let mut avatar = AvatarModel::new(&mut ids, 5, cfg, theta.len() + psi.len());
        // Randomize so the deformation is non-trivial.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        avatar.visit_mut(&mut |name, p| {
            if name.starts_with("deform") {
                for v in p.value.data.iter_mut() {
                    *v += rng.gen_range(-0.3..0.3);
                }
            }
        });
        (head, canon, avatar, theta, psi)
    }

    #[test]
    fn tape_ray_matches_plain_ray_march() {
        let (head, canon, avatar, theta, psi) = setup();
        let frame = PosedFrame::new(&head, &canon, &theta, &psi, 4).unwrap();
        let canon_index = KnnIndex::new(canonical_vertices(&head, &canon));
        let mut cond = theta.clone();
        cond.extend(&psi);
        for mode in [AssignMode::Soft, AssignMode::Hard] {
            let env = RayEnv {
                posed: &frame,
                canon_index: &canon_index,
                part_labels: &head.part_labels,
                cond: &cond,
                mode,
            };
            let plain_field = AvatarField {
                deformer: Deformer {
                    frame: &frame,
                    field: &avatar.deform,
                    canon_index: &canon_index,
                    part_labels: &head.part_labels,
                    cond: cond.clone(),
                    mode,
                },
                field: &avatar.field,
            };
            let ray = Ray {
                origin: Vector3::new(0.05, -0.02, -1.0),
                dir: (Vector3::new(-0.05, 0.02, 0.2) - Vector3::new(0.05, -0.02, -1.0))
                    .normalize(),
            };
            let opt = RenderOptions {
                k_samples: 12,
                near: 0.7,
                far: 1.35,
                min_weight: 0.0,
            };
            let plain = render_ray(&plain_field, &ray, &opt, None, &mut FieldBuf::default());

            let mut tape = Tape::new();
            let jitter = vec![0.5; opt.k_samples];
            let graph = ray_loss_graph(
                &mut tape,
                &avatar,
                &env,
                &ray,
                [0.2, 0.4, 0.6],
                &jitter,
                Vector3::new(0.003, -0.002, 0.001),
                &opt,
                &mut Vec::new(),
            )
            .unwrap();
            assert!((graph.alpha - plain.alpha).abs() < 1e-9, "alpha {mode:?}");
            for ch in 0..3 {
                assert!(
                    (graph.rgb[ch] - plain.rgb[ch]).abs() < 1e-9,
                    "rgb[{ch}] {mode:?}: {} vs {}",
                    graph.rgb[ch],
                    plain.rgb[ch]
                );
            }
            let expect_photo: f64 = (0..3)
                .map(|ch| (plain.rgb[ch] - [0.2, 0.4, 0.6][ch]).abs())
                .sum();
            assert!((graph.photo_value - expect_photo).abs() < 1e-9);
        }
    }

    #[test]
    fn losses_backpropagate_into_both_nets() {
        let (head, canon, avatar, theta, psi) = setup();
        let frame = PosedFrame::new(&head, &canon, &theta, &psi, 4).unwrap();
        let canon_index = KnnIndex::new(canonical_vertices(&head, &canon));
        let mut cond = theta.clone();
        cond.extend(&psi);
        let env = RayEnv {
            posed: &frame,
            canon_index: &canon_index,
            part_labels: &head.part_labels,
            cond: &cond,
            mode: AssignMode::Soft,
        };
        let ray = Ray {
            origin: Vector3::new(0.0, 0.0, -1.0),
            dir: Vector3::new(0.0, 0.0, 1.0),
        };
        let opt = RenderOptions {
            k_samples: 10,
            near: 0.7,
            far: 1.3,
            min_weight: 0.0,
        };
        let mut tape = Tape::new();
        let graph = ray_loss_graph(
            &mut tape,
            &avatar,
            &env,
            &ray,
            [0.0, 0.0, 0.0],
            &vec![0.5; 10],
            Vector3::new(0.004, 0.0, 0.0),
            &opt,
            &mut Vec::new(),
        )
        .unwrap();
        tape.backward(graph.photo).unwrap();
        let mut nonzero = std::collections::BTreeSet::new();
        avatar.visit(&mut |name, p| {
            if let Some(g) = tape.param_grad(p) {
                if g.iter().any(|&v| v != 0.0) {
                    nonzero.insert(name.split('.').take(2).collect::<Vec<_>>().join("."));
                }
            }
        });
        assert!(nonzero.iter().any(|n| n.starts_with("field.occ")), "{nonzero:?}");
        assert!(nonzero.iter().any(|n| n.starts_with("field.color")), "{nonzero:?}");
        assert!(nonzero.iter().any(|n| n.starts_with("deform.local")), "{nonzero:?}");
        assert!(nonzero.iter().any(|n| n.starts_with("deform.assigner")), "{nonzero:?}");
    }
}
