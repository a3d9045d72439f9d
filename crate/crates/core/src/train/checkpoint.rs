//! Checkpoints: every model parameter as an f32 tensor, optimizer moments as
//! f64 tensors under `adam.<param>.{m,v,t}`, plus the step and the resolved
//! training config in metadata. Rewriting a loaded checkpoint is
//! byte-identical, and loading restores training bit-exactly.

use std::path::Path;

use crate::avatar::AvatarModel;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::tensor::HasParams;
use crate::train::adam::{Adam, AdamSlot};

pub const STEP_KEY: &str = "__step__";
pub const CONFIG_KEY: &str = "__config__";

pub struct Checkpoint {
    pub step: u64,
    pub config: serde_json::Value,
    container: Container,
}

/// Write `model` and `adam` at `step` to `path`.
pub fn save_checkpoint(
    path: &Path,
    step: u64,
    config: &serde_json::Value,
    model: &AvatarModel,
    adam: &Adam,
) -> Result<()> {
    let mut c = Container::default();
    model.visit(&mut |name, p| {
        c.insert_f32(name, &p.value.shape, p.value.data.clone());
    });
    for (name, slot) in &adam.slots {
        let n = slot.m.len();
        c.insert_f64(&format!("adam.{name}.m"), &[n], slot.m.clone());
        c.insert_f64(&format!("adam.{name}.v"), &[n], slot.v.clone());
        c.insert_f64(&format!("adam.{name}.t"), &[1], vec![slot.t as f64]);
    }
    c.meta.insert(STEP_KEY.into(), serde_json::json!(step));
    c.meta.insert(CONFIG_KEY.into(), config.clone());
    c.save(path)
}

impl Checkpoint {
    pub fn read(path: &Path) -> Result<Checkpoint> {
        let container = Container::load(path)?;
        let step = container
            .meta
            .get(STEP_KEY)
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::invalid("checkpoint", "missing or non-integer step"))?;
        let config = container
            .meta
            .get(CONFIG_KEY)
            .cloned()
            .ok_or_else(|| Error::invalid("checkpoint", "missing config"))?;
        Ok(Checkpoint {
            step,
            config,
            container,
        })
    }

    /// Restore parameters and optimizer state into an already-built model.
    pub fn load_into(&self, model: &mut AvatarModel, adam: &mut Adam) -> Result<()> {
        let mut err = None;
        model.visit_mut(&mut |name, p| {
            if err.is_some() {
                return;
            }
            match self.container.f32(name) {
                Ok((shape, data)) => {
                    if shape != p.value.shape.as_slice() {
                        err = Some(Error::ShapeMismatch {
                            context: format!("checkpoint tensor '{name}'"),
                            expected: p.value.shape.clone(),
                            got: shape.to_vec(),
                        });
                        return;
                    }
                    p.value.data.copy_from_slice(data);
                }
                Err(e) => err = Some(e),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        adam.slots.clear();
        for name in self.container.tensors.keys() {
            let Some(rest) = name.strip_prefix("adam.") else {
                continue;
            };
            let Some(pname) = rest.strip_suffix(".m") else {
                continue;
            };
            let m = self.container.f64(name)?.1.to_vec();
            let v = self.container.f64(&format!("adam.{pname}.v"))?.1.to_vec();
            let t = self.container.f64(&format!("adam.{pname}.t"))?.1[0] as u64;
            adam
                .slots
                .insert(pname.to_string(), AdamSlot { m, v, t });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::avatar::ModelConfig;
    use crate::deform::DeformConfig;
    use crate::field::FieldConfig;
    use crate::tensor::ParamIds;
    use crate::train::adam::AdamConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg(hidden: usize) -> ModelConfig {
        ModelConfig {
            deform: DeformConfig {
                n_parts: 2,
                hidden,
                layers: 1,
                enc_freqs: 1,
                ..DeformConfig::default()
            },
            field: FieldConfig {
                occ_hidden: hidden,
                occ_layers: 1,
                color_hidden: hidden,
                color_layers: 1,
                x_freqs: 2,
                d_freqs: 1,
                ..FieldConfig::default()
            },
        }
    }

    fn build(hidden: usize, seed: u64) -> AvatarModel {
        let mut ids = ParamIds::new();
        AvatarModel::new(&mut ids, seed, tiny_cfg(hidden), 4)
    }

    #[test]
    fn round_trip_restores_params_state_and_meta() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let mut model = build(6, 1);
        let mut adam = Adam::new(AdamConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // Step a couple of parameters so the optimizer has real state.
        model.visit_mut(&mut |name, p| {
            if name.starts_with("field.occ") {
                let g: Vec<f64> = (0..p.value.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                adam.step(name, p, &g, 1e-3);
            }
        });
        let config = serde_json::json!({"total_steps": 10});
        save_checkpoint(&path, 7, &config, &model, &adam).unwrap();

        let mut restored = build(6, 999);
        let mut adam2 = Adam::new(AdamConfig::default());
        let ck = Checkpoint::read(&path).unwrap();
        assert_eq!(ck.step, 7);
        assert_eq!(ck.config, config);
        ck.load_into(&mut restored, &mut adam2).unwrap();

        let mut originals = Vec::new();
        model.visit(&mut |_, p| originals.push(p.value.data.clone()));
        let mut loaded = Vec::new();
        restored.visit(&mut |_, p| loaded.push(p.value.data.clone()));
        assert_eq!(originals, loaded);
        assert_eq!(adam.slots, adam2.slots);
    }

    #[test]
    fn rewrite_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
        let model = build(5, 2);
        let adam = Adam::new(AdamConfig::default());
        save_checkpoint(&p1, 3, &serde_json::json!({"k": 1}), &model, &adam).unwrap();
        let ck = Checkpoint::read(&p1).unwrap();
        let mut model2 = build(5, 3);
        let mut adam2 = Adam::new(AdamConfig::default());
        ck.load_into(&mut model2, &mut adam2).unwrap();
        save_checkpoint(&p2, ck.step, &ck.config, &model2, &adam2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn mismatched_architecture_is_rejected_by_tensor_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let model = build(6, 1);
        save_checkpoint(&path, 0, &serde_json::json!({}), &model, &Adam::new(AdamConfig::default()))
            .unwrap();
        let mut other = build(8, 1);
        let err = Checkpoint::read(&path)
            .unwrap()
            .load_into(&mut other, &mut Adam::new(AdamConfig::default()))
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("deform.assigner") || msg.contains("field."), "{msg}");
    }
}
