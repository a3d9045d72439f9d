//! Synthetic ground truth: an analytic blob scene rigged to the head model,
//! rendered through the project's own ray marcher into posed images.
//!
//! Every primitive rides a host vertex's full blended transform plus its
//! blendshape offset, so pose and expression both move the geometry exactly
//! as skinning says they should — which makes the scene representable in
//! canonical space and gives training a reachable optimum.

use std::path::Path;

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{save_mask_png, save_png, FrameRecord, Manifest, Split};
use crate::error::{Error, Result};
use crate::head::io::save_head_model;
use crate::head::lbs::{blended_transform, joint_transforms, pose_expr_offsets, Affine};
use crate::head::{canonical_vertices, flame_lite, CanonicalConfig, HeadModel, PoseExpr};
use crate::render::{near_far_for_sphere, render_image, Camera, FieldBuf, RenderOptions, SceneField, SurfaceSample};
use crate::rng::rng_for;
use crate::tensor::tape::sigmoid;

/// RNG streams used by the generator.
const STREAM_SCENE: u64 = 100;
const STREAM_POSE: u64 = 101;
const STREAM_CAMERA: u64 = 102;

/// Base colors, one per head part.
pub const PART_PALETTE: [[f64; 3]; flame_lite::N_PARTS] = [
    [0.78, 0.62, 0.52], // scalp
    [0.88, 0.72, 0.58], // forehead
    [0.25, 0.45, 0.80], // eyes
    [0.85, 0.45, 0.30], // nose
    [0.80, 0.25, 0.35], // mouth
    [0.62, 0.48, 0.40], // jaw
    [0.50, 0.62, 0.52], // neck
];

/// One soft ellipsoid rigidly attached to a host vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePrimitive {
    pub host_vertex: usize,
    /// Center offset from the host vertex, in canonical coordinates.
    pub local_center: Vector3<f64>,
    pub radii: Vector3<f64>,
    pub base_rgb: [f64; 3],
    pub stripe_axis: usize,
    pub stripe_freq: f64,
    pub stripe_amp: f64,
    pub stripe_phase: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticScene {
    pub primitives: Vec<ScenePrimitive>,
    /// Sigmoid sharpness of each primitive's shell.
    pub sharpness: f64,
}

/// Deterministically build the blob scene: one skull ellipsoid plus a few
/// striped feature blobs per part, using that part's palette color.
pub fn build_scene(
    model: &HeadModel,
    canon_verts: &[Vector3<f64>],
    seed: u64,
    blobs_per_part: usize,
    sharpness: f64,
) -> AnalyticScene {
    let mut rng = rng_for(seed, STREAM_SCENE, 0);
    let mut primitives = Vec::new();
    // Skull: a scalp-hosted ellipsoid slightly inside the template surface.
    let skull_host = model
        .part_labels
        .iter()
        .position(|&l| l == 0)
        .expect("scalp part is populated");
    primitives.push(ScenePrimitive {
        host_vertex: skull_host,
        local_center: -canon_verts[skull_host],
        radii: Vector3::new(0.223, 0.262, 0.233),
        base_rgb: PART_PALETTE[0],
        stripe_axis: 1,
        stripe_freq: 18.0,
        stripe_amp: 0.10,
        stripe_phase: 0.0,
    });
    for part in 0..model.n_parts {
        let members: Vec<usize> = (0..model.n_verts())
            .filter(|&v| model.part_labels[v] as usize == part)
            .collect();
        for _ in 0..blobs_per_part {
            let host = members[rng.gen_range(0..members.len())];
            let outward = canon_verts[host].normalize();
            let r = rng.gen_range(0.028..0.048);
            primitives.push(ScenePrimitive {
                host_vertex: host,
                local_center: outward * rng.gen_range(0.004..0.012),
                radii: Vector3::new(
                    r * rng.gen_range(0.8..1.2),
                    r * rng.gen_range(0.8..1.2),
                    r * rng.gen_range(0.8..1.2),
                ),
                base_rgb: PART_PALETTE[part],
                stripe_axis: rng.gen_range(0..3),
                stripe_freq: rng.gen_range(22.0..40.0),
                stripe_amp: rng.gen_range(0.10..0.18),
                stripe_phase: rng.gen_range(0.0..std::f64::consts::TAU),
            });
        }
    }
    AnalyticScene {
        primitives,
        sharpness,
    }
}

/// The scene frozen at one pose/expression, ready to ray-march.
pub struct PosedScene<'a> {
    scene: &'a AnalyticScene,
    /// Per primitive: world-from-local and its inverse.
    frames: Vec<(Affine, Affine)>,
}

impl<'a> PosedScene<'a> {
    pub fn new(
        scene: &'a AnalyticScene,
        model: &HeadModel,
        canon: &CanonicalConfig,
        theta: &[f64],
        psi: &[f64],
    ) -> Result<PosedScene<'a>> {
        let pe = PoseExpr {
            beta: canon.beta_avg.clone(),
            theta: theta.to_vec(),
            psi: psi.to_vec(),
        };
        pe.validate(model)?;
        let canon_verts = canonical_vertices(model, canon);
        let offsets = pose_expr_offsets(model, &pe);
        let transforms = joint_transforms(model, &pe.beta, &pe.theta);
        let mut frames = Vec::with_capacity(scene.primitives.len());
        for prim in &scene.primitives {
            let v = prim.host_vertex;
            let blended = blended_transform(model, &transforms, v);
            let center = canon_verts[v] + offsets[v] + prim.local_center;
            let world_from_local = Affine {
                m: blended.m,
                t: blended.apply(center),
            };
            let inv = world_from_local.inverse().ok_or(Error::SingularTransform {
                point: [center.x, center.y, center.z],
            })?;
            frames.push((world_from_local, inv));
        }
        Ok(PosedScene { scene, frames })
    }

    /// Shell response of one primitive at a world point, with its local
    /// coordinates: `sigmoid(sharpness * (1 - |x_l / radii|))`.
    fn response(&self, i: usize, x: Vector3<f64>) -> (f64, Vector3<f64>) {
        let prim = &self.scene.primitives[i];
        let xl = self.frames[i].1.apply(x);
        let n = Vector3::new(xl.x / prim.radii.x, xl.y / prim.radii.y, xl.z / prim.radii.z).norm();
        (sigmoid(self.scene.sharpness * (1.0 - n)), xl)
    }
}

impl SceneField for PosedScene<'_> {
    fn to_field(&self, x: Vector3<f64>, _: &mut FieldBuf) -> Vector3<f64> {
        x
    }

    /// Smooth union: `1 - prod_i (1 - s_i)`.
    fn occupancy(&self, x: Vector3<f64>, _: &mut FieldBuf) -> f64 {
        let mut transparent = 1.0;
        for i in 0..self.scene.primitives.len() {
            transparent *= 1.0 - self.response(i, x).0;
        }
        1.0 - transparent
    }

    /// Albedo of the strongest primitive, striped in its local frame.
    fn color(&self, surf: &SurfaceSample, _dir: Vector3<f64>, _: &mut FieldBuf) -> [f64; 3] {
        let mut best = (f64::NEG_INFINITY, 0, Vector3::zeros());
        for i in 0..self.scene.primitives.len() {
            let (s, xl) = self.response(i, surf.x_field);
            if s > best.0 {
                best = (s, i, xl);
            }
        }
        let prim = &self.scene.primitives[best.1];
        let stripe = prim.stripe_amp
            * (prim.stripe_freq * best.2[prim.stripe_axis] + prim.stripe_phase).sin();
        let mut c = prim.base_rgb;
        for ch in &mut c {
            *ch = (*ch + stripe).clamp(0.0, 1.0);
        }
        c
    }

    fn fd_step(&self) -> f64 {
        1e-4
    }
}

/// Center and radius of the canonical head, padded for blob extent.
pub fn scene_bounds(canon_verts: &[Vector3<f64>]) -> (Vector3<f64>, f64) {
    let center = canon_verts.iter().sum::<Vector3<f64>>() / canon_verts.len() as f64;
    let r = canon_verts
        .iter()
        .map(|v| (v - center).norm())
        .fold(0.0, f64::max);
    (center, r + 0.12)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_frames: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub orbit_radius: f64,
    /// Half-range of the camera orbit's azimuth, degrees.
    pub az_range_deg: f64,
    /// Half-range of the camera orbit's elevation, degrees.
    pub el_range_deg: f64,
    /// Quadrature samples per ray for the ground-truth renders.
    pub k_samples: usize,
    pub seed: u64,
    /// Trailing fraction of frames held out as the test split.
    pub test_fraction: f64,
    pub blobs_per_part: usize,
    /// Scales the sampled pose ranges.
    pub pose_amplitude: f64,
    /// Scales the sampled expression coefficients.
    pub expr_amplitude: f64,
    pub sharpness: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_frames: 16,
            width: 128,
            height: 128,
            focal: 110.0,
            orbit_radius: 1.0,
            az_range_deg: 60.0,
            el_range_deg: 20.0,
            k_samples: 256,
            seed: 0,
            test_fraction: 0.2,
            blobs_per_part: 3,
            pose_amplitude: 1.0,
            expr_amplitude: 1.0,
            sharpness: 60.0,
        }
    }
}

/// Pose and expression for frame `index` under the generator's seed.
pub fn sample_pose(cfg: &SynthConfig, model: &HeadModel, index: u64) -> PoseExpr {
    let mut rng = rng_for(cfg.seed, STREAM_POSE, index);
    let a = cfg.pose_amplitude;
    let mut theta = vec![0.0; model.theta_len()];
    // Global yaw and pitch.
    theta[1] = rng.gen_range(-0.35..0.35) * a;
    theta[0] = rng.gen_range(-0.15..0.15) * a;
    // Neck.
    theta[3] = rng.gen_range(-0.12..0.12) * a;
    theta[4] = rng.gen_range(-0.15..0.15) * a;
    // Jaw opening about x.
    theta[6] = rng.gen_range(0.0..0.30) * a;
    let psi = (0..model.n_psi())
        .map(|_| rng.gen_range(-0.8..0.8) * cfg.expr_amplitude)
        .collect();
    PoseExpr {
        beta: Vec::new(),
        theta,
        psi,
    }
}

/// Camera for frame `index`: an orbit point in front of the face.
pub fn sample_camera(cfg: &SynthConfig, center: Vector3<f64>, index: u64) -> Camera {
    let mut rng = rng_for(cfg.seed, STREAM_CAMERA, index);
    let az = rng.gen_range(-1.0f64..1.0) * cfg.az_range_deg.to_radians();
    let el = rng.gen_range(-1.0f64..1.0) * cfg.el_range_deg.to_radians();
    let dir = Vector3::new(az.sin() * el.cos(), el.sin(), az.cos() * el.cos());
    Camera::look_at(
        center + dir * cfg.orbit_radius,
        center,
        Vector3::y(),
        cfg.focal,
        cfg.width,
        cfg.height,
    )
}

/// Foreground fraction of a rendered alpha map at threshold 0.5.
pub fn foreground_fraction(alpha: &[f32]) -> f64 {
    alpha.iter().filter(|&&a| a > 0.5).count() as f64 / alpha.len() as f64
}

/// Generate and write the full dataset; returns the manifest.
pub fn generate_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<Manifest> {
    if cfg.n_frames == 0 {
        return Err(Error::invalid("synth", "n_frames must be positive"));
    }
    if !(0.0..1.0).contains(&cfg.test_fraction) {
        return Err(Error::invalid("synth", "test_fraction must be in [0, 1)"));
    }
    let frames_dir = out_dir.join("frames");
    std::fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;

    let model = flame_lite::generate(cfg.seed);
    let mut id_rng = rng_for(cfg.seed, STREAM_SCENE, 1);
    let beta_avg: Vec<f64> = (0..model.n_beta())
        .map(|_| id_rng.gen_range(-0.5..0.5))
        .collect();
    let canon = CanonicalConfig {
        beta_avg: beta_avg.clone(),
    };
    let canon_verts = canonical_vertices(&model, &canon);
    let scene = build_scene(&model, &canon_verts, cfg.seed, cfg.blobs_per_part, cfg.sharpness);
    let (center, radius) = scene_bounds(&canon_verts);

    let n_test = ((cfg.n_frames as f64) * cfg.test_fraction).ceil() as usize;
    let n_test = n_test.min(cfg.n_frames.saturating_sub(1));
    let mut records = Vec::with_capacity(cfg.n_frames);
    for i in 0..cfg.n_frames {
        let pe = sample_pose(cfg, &model, i as u64);
        let camera = sample_camera(cfg, center, i as u64);
        let posed = PosedScene::new(&scene, &model, &canon, &pe.theta, &pe.psi)?;
        let (near, far) = near_far_for_sphere(camera.position(), center, radius);
        let opt = RenderOptions {
            k_samples: cfg.k_samples,
            near,
            far,
            min_weight: 0.0,
        };
        let out = render_image(&posed, &camera, &opt);
        let fg = foreground_fraction(&out.alpha);
        if !(0.05..0.95).contains(&fg) {
            return Err(Error::Frame {
                index: i,
                message: format!("foreground fraction {fg:.3} outside (0.05, 0.95)"),
            });
        }
        let mask: Vec<bool> = out.alpha.iter().map(|&a| a > 0.5).collect();
        let image_name = format!("frames/frame_{i:04}.png");
        let mask_name = format!("frames/frame_{i:04}_mask.png");
        save_png(&out_dir.join(&image_name), &out.rgb)?;
        save_mask_png(&out_dir.join(&mask_name), &mask, cfg.width, cfg.height)?;
        records.push(FrameRecord {
            image: image_name,
            mask: mask_name,
            camera,
            theta: pe.theta,
            psi: pe.psi,
            split: if i >= cfg.n_frames - n_test {
                Split::Test
            } else {
                Split::Train
            },
        });
    }

    let head_name = "head_model.bin";
    save_head_model(&out_dir.join(head_name), &model)?;
    let manifest = Manifest {
        width: cfg.width,
        height: cfg.height,
        beta_avg,
        head_model: head_name.to_string(),
        frames: records,
        meta: serde_json::json!({ "generator": cfg }),
    };
    manifest.save(out_dir)?;
    Ok(manifest)
}

/// Rebuild the generator's scene from a manifest that carries its config.
pub fn scene_from_manifest(manifest: &Manifest, model: &HeadModel) -> Result<AnalyticScene> {
    let cfg: SynthConfig = serde_json::from_value(manifest.meta["generator"].clone())
        .map_err(|e| Error::invalid("manifest", format!("no generator settings: {e}")))?;
    let canon = CanonicalConfig {
        beta_avg: manifest.beta_avg.clone(),
    };
    let canon_verts = canonical_vertices(model, &canon);
    Ok(build_scene(
        model,
        &canon_verts,
        cfg.seed,
        cfg.blobs_per_part,
        cfg.sharpness,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::metrics::psnr;
    use crate::data::LoadedDataset;
    use crate::head::io::load_head_model;

    fn tiny() -> SynthConfig {
        SynthConfig {
            n_frames: 3,
            width: 32,
            height: 32,
            focal: 27.0,
            k_samples: 96,
            blobs_per_part: 1,
            seed: 5,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn dataset_generates_loads_and_re_renders_consistently() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let manifest = generate_dataset(&cfg, dir.path()).unwrap();
        assert_eq!(manifest.frames.len(), 3);
        assert_eq!(manifest.test_indices(), vec![2]);

        let ds = LoadedDataset::load(dir.path()).unwrap();
        let model = load_head_model(&ds.head_model_path()).unwrap();
        let scene = scene_from_manifest(&ds.manifest, &model).unwrap();
        let canon = CanonicalConfig {
            beta_avg: ds.manifest.beta_avg.clone(),
        };
        let canon_verts = canonical_vertices(&model, &canon);
        let (center, radius) = scene_bounds(&canon_verts);

        let f = &ds.frames[0];
        let posed =
            PosedScene::new(&scene, &model, &canon, &f.record.theta, &f.record.psi).unwrap();
        let (near, far) = near_far_for_sphere(f.record.camera.position(), center, radius);
        let out = render_image(
            &posed,
            &f.record.camera,
            &RenderOptions {
                k_samples: cfg.k_samples,
                near,
                far,
                min_weight: 0.0,
            },
        );
        // Only 8-bit quantization separates the re-render from the file.
        let p = psnr(&out.rgb, &f.image).unwrap();
        assert!(p > 45.0, "re-render consistency {p:.1} dB");

        let fg = foreground_fraction(&out.alpha);
        assert!((0.05..0.95).contains(&fg), "foreground fraction {fg}");
    }

    #[test]
    fn generation_is_bit_deterministic() {
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate_dataset(&tiny(), d1.path()).unwrap();
        generate_dataset(&tiny(), d2.path()).unwrap();
        for name in ["manifest.json", "frames/frame_0000.png", "frames/frame_0002_mask.png"] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
    }

    #[test]
    fn expressions_move_pixels() {
        let cfg = SynthConfig {
            width: 64,
            height: 64,
            focal: 55.0,
            ..tiny()
        };
        let model = flame_lite::generate(cfg.seed);
        let canon = CanonicalConfig {
            beta_avg: vec![0.0; model.n_beta()],
        };
        let canon_verts = canonical_vertices(&model, &canon);
        let scene = build_scene(&model, &canon_verts, cfg.seed, 1, cfg.sharpness);
        let (center, radius) = scene_bounds(&canon_verts);
        let camera = sample_camera(&cfg, center, 0);
        let (near, far) = near_far_for_sphere(camera.position(), center, radius);
        let opt = RenderOptions {
            k_samples: 96,
            near,
            far,
            min_weight: 0.0,
        };
        let theta = vec![0.0; model.theta_len()];
        let neutral = PosedScene::new(&scene, &model, &canon, &theta, &vec![0.0; model.n_psi()])
            .unwrap();
        let mut psi = vec![0.0; model.n_psi()];
        psi[0] = 0.9;
        let expressive = PosedScene::new(&scene, &model, &canon, &theta, &psi).unwrap();
        let a = render_image(&neutral, &camera, &opt);
        let b = render_image(&expressive, &camera, &opt);
        let changed = a
            .rgb
            .rgb
            .iter()
            .zip(&b.rgb.rgb)
            .filter(|(x, y)| (**x - **y).abs() > 2.0 / 255.0)
            .count();
        assert!(
            changed > a.rgb.rgb.len() / 300,
            "only {changed} of {} channel values moved",
            a.rgb.rgb.len()
        );
    }
}
