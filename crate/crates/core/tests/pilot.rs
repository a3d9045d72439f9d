//! Temporary quality pilot for config sizing; deleted once configs settle.

use facefield::avatar::ModelConfig;
use facefield::data::synth::{generate_dataset, SynthConfig};
use facefield::data::LoadedDataset;
use facefield::deform::{AssignMode, DeformConfig};
use facefield::field::FieldConfig;
use facefield::train::{TrainConfig, Trainer};
use std::time::Instant;

#[test]
#[ignore]
fn pilot() {
    let dir = std::path::PathBuf::from("/tmp/pilot_ds");
    if !dir.join("manifest.json").exists() {
        let scfg = SynthConfig {
            n_frames: 20,
            width: 128,
            height: 128,
            k_samples: 192,
            seed: 0,
            ..SynthConfig::default()
        };
        generate_dataset(&scfg, &dir).unwrap();
    }
    let ds = LoadedDataset::load(&dir).unwrap();
    let cfg = TrainConfig {
        total_steps: 10_000,
        stage1_fraction: 0.15,
        distill_steps: 300,
        distill_samples: 256,
        lr_start: 2e-3,
        lr_end: 2e-4,
        rays_per_step: 96,
        k_samples: 16,
        min_weight: 1e-3,
        chunk_size: 32,
        log_every: 250,
        checkpoint_every: 0,
        seed: 0,
        model: ModelConfig {
            deform: DeformConfig {
                hidden: 20,
                layers: 1,
                enc_freqs: 3,
                ..DeformConfig::default()
            },
            field: FieldConfig {
                occ_hidden: 40,
                occ_layers: 2,
                color_hidden: 48,
                color_layers: 2,
                x_freqs: 5,
                d_freqs: 2,
                ..FieldConfig::default()
            },
        },
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(cfg, ds).unwrap();
    let t0 = Instant::now();
    let mut out = std::io::stdout();
    t.run(None, &mut out).unwrap();
    println!("train wall: {:.1} min", t0.elapsed().as_secs_f64() / 60.0);

    for k in [16, 32] {
        let tr = t
            .evaluate(&t.train_frames[..4], k, 1e-3, AssignMode::Soft)
            .unwrap();
        let te = t
            .evaluate(&t.test_frames, k, 1e-3, AssignMode::Soft)
            .unwrap();
        let mean = |v: &[facefield::train::FrameEval]| {
            v.iter().map(|e| e.psnr).sum::<f64>() / v.len() as f64
        };
        println!(
            "K={k}: train[0..4] PSNR {:.2}  test PSNR {:.2}",
            mean(&tr),
            mean(&te)
        );
        for e in &te {
            println!("  test frame {}: psnr {:.2} ssim {:.3} l1 {:.4}", e.frame, e.psnr, e.ssim, e.l1);
        }
    }
}
