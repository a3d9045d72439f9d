//! Throwaway training diagnostics; not part of the suite. Delete me.

use std::path::PathBuf;

use facefield::data::synth::{generate_dataset, SynthConfig};
use facefield::data::LoadedDataset;
use facefield::deform::{AssignMode, DeformConfig};
use facefield::render::ImageBuf;
use facefield::train::{TrainConfig, Trainer};

struct Variant {
    name: &'static str,
    data: PathBuf,
    k: usize,
    rays: usize,
    occ: (usize, usize, usize),
    color: (usize, usize),
    steps: u64,
    fg: f64,
    lr_end: f64,
}

fn zone_report(label: &str, gt: &ImageBuf, mask: &[bool], render: &ImageBuf) {
    let (w, h) = (gt.width as i64, gt.height as i64);
    let edge_of = |x: i64, y: i64| {
        let me = mask[(y * w + x) as usize];
        for dy in -2..=2i64 {
            for dx in -2..=2i64 {
                let (nx, ny) = ((x + dx).clamp(0, w - 1), (y + dy).clamp(0, h - 1));
                if mask[(ny * w + nx) as usize] != me {
                    return true;
                }
            }
        }
        false
    };
    let mut zones = [(0usize, 0.0f64); 3]; // edge, fg, bg: (pixels, sq err)
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) as usize;
            let z = if edge_of(x, y) {
                0
            } else if mask[i] {
                1
            } else {
                2
            };
            let mut se = 0.0;
            for c in 0..3 {
                let d = gt.rgb[3 * i + c] as f64 - render.rgb[3 * i + c] as f64;
                se += d * d;
            }
            zones[z].0 += 1;
            zones[z].1 += se;
        }
    }
    let total_se: f64 = zones.iter().map(|z| z.1).sum();
    let names = ["edge", "fg", "bg"];
    print!("    {label}: ");
    for (zi, (n, se)) in zones.iter().enumerate() {
        let rmse = (se / (3.0 * *n as f64)).sqrt();
        print!(
            "{} {:4.1}%px rmse {:.4} ({:4.1}% of SE)  ",
            names[zi],
            100.0 * *n as f64 / (w * h) as f64,
            rmse,
            100.0 * se / total_se
        );
    }
    println!();
}

fn run_variant(v: &Variant) {
    let t0 = std::time::Instant::now();
    let mut cfg = TrainConfig {
        total_steps: v.steps,
        stage1_fraction: 0.15,
        distill_steps: 300,
        distill_samples: 256,
        lr_start: 2e-3,
        lr_end: v.lr_end,
        fg_fraction: v.fg,
        rays_per_step: v.rays,
        k_samples: v.k,
        min_weight: 1e-3,
        chunk_size: 32,
        log_every: 100_000,
        seed: 0,
        ..TrainConfig::default()
    };
    cfg.model.deform = DeformConfig {
        hidden: 20,
        layers: 1,
        enc_freqs: 3,
        ..DeformConfig::default()
    };
    cfg.model.field.occ_hidden = v.occ.0;
    cfg.model.field.occ_layers = v.occ.1;
    cfg.model.field.x_freqs = v.occ.2;
    cfg.model.field.color_hidden = v.color.0;
    cfg.model.field.color_layers = v.color.1;
    cfg.model.field.d_freqs = 2;
    let mut t = Trainer::new(cfg, LoadedDataset::load(&v.data).unwrap()).unwrap();
    for _ in 0..v.steps {
        t.train_step().unwrap();
    }
    let train_eval = t.evaluate(&[0, 1, 2, 3], v.k, 1e-3, AssignMode::Soft).unwrap();
    let test_idx = t.dataset.manifest.test_indices();
    let test_eval = t.evaluate(&test_idx, v.k, 1e-3, AssignMode::Soft).unwrap();
    let mean = |e: &[facefield::train::FrameEval]| {
        e.iter().map(|r| r.psnr).sum::<f64>() / e.len() as f64
    };
    println!(
        "  {}: steps {} K{} rays {} -> train[0..4] {:.2} dB, test {:.2} dB ({:.1} min)",
        v.name,
        v.steps,
        v.k,
        v.rays,
        mean(&train_eval),
        mean(&test_eval),
        t0.elapsed().as_secs_f64() / 60.0
    );
    for &fi in &[0usize, test_idx[0]] {
        let r = t.render_frame(fi, v.k, 1e-3, AssignMode::Soft);
        let f = &t.dataset.frames[fi];
        zone_report(&format!("frame {fi}"), &f.image, &f.mask, &r.rgb);
    }
}

#[test]
fn ceiling() {
    use facefield::data::metrics;
    use facefield::data::synth::{scene_from_manifest, scene_bounds, PosedScene};
    use facefield::head::io::load_head_model;
    use facefield::head::{canonical_vertices, CanonicalConfig};
    use facefield::render::{near_far_for_sphere, render_image, RenderOptions};

    for path in ["/tmp/diag_soft_ds", "/tmp/diag_soft16_ds"] {
        let dir = PathBuf::from(path);
        if !dir.join("manifest.json").exists() {
            continue;
        }
        let ds = LoadedDataset::load(&dir).unwrap();
        let model = load_head_model(&ds.head_model_path()).unwrap();
        let scene = scene_from_manifest(&ds.manifest, &model).unwrap();
        let canon = CanonicalConfig { beta_avg: ds.manifest.beta_avg.clone() };
        let canon_verts = canonical_vertices(&model, &canon);
        let (center, radius) = scene_bounds(&canon_verts);
        println!("  {path}:");
        for fi in [0usize, 16] {
            let f = &ds.frames[fi];
            let cam = f.record.camera.clone();
            let posed = PosedScene::new(&scene, &model, &canon, &f.record.theta, &f.record.psi).unwrap();
            let (near, far) = near_far_for_sphere(cam.position(), center, radius);
            print!("    analytic frame {fi}: ");
            for k in [16usize, 24, 32, 64, 128] {
                let opt = RenderOptions { k_samples: k, near, far, min_weight: 0.0 };
                let img = render_image(&posed, &cam, &opt);
                print!("K{k} {:.2} dB  ", metrics::psnr(&img.rgb, &f.image).unwrap());
            }
            println!();
        }
    }
}

#[test]
fn diag() {
    let gen = |name: &str, k_samples: usize, sharpness: f64| -> PathBuf {
        let dir = PathBuf::from(format!("/tmp/diag_{name}_ds"));
        if !dir.join("manifest.json").exists() {
            let cfg = SynthConfig {
                n_frames: 20,
                k_samples,
                sharpness,
                blobs_per_part: 2,
                seed: 0,
                ..SynthConfig::default()
            };
            generate_dataset(&cfg, &dir).unwrap();
            println!("  generated {name} dataset");
        }
        dir
    };
    let soft16 = gen("soft16", 16, 25.0);
    let variants = [
        Variant { name: "matched-k16", data: soft16, k: 16, rays: 96, occ: (48, 2, 6), color: (56, 2), steps: 5000, fg: 0.65, lr_end: 5e-5 },
    ];
    for v in &variants {
        run_variant(v);
    }
}
