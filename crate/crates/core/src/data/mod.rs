//! Dataset layout on disk: a JSON manifest naming a head model file and a
//! list of frames, each with a camera, pose/expression vectors, an RGB
//! image, and a binary foreground mask.

pub mod metrics;
pub mod synth;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::{Camera, ImageBuf};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    /// Paths relative to the manifest's directory.
    pub image: String,
    pub mask: String,
    pub camera: Camera,
    pub theta: Vec<f64>,
    pub psi: Vec<f64>,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub width: usize,
    pub height: usize,
    /// Identity coefficients baked into the canonical template.
    pub beta_avg: Vec<f64>,
    /// Head model file, relative to the manifest's directory.
    pub head_model: String,
    pub frames: Vec<FrameRecord>,
    /// Free-form provenance (generator settings and the like).
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub meta: serde_json::Value,
}

impl Manifest {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::invalid("manifest", e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST_NAME);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::invalid("manifest", e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::invalid("manifest", "no frames"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("manifest", "zero image dimensions"));
        }
        for (i, f) in self.frames.iter().enumerate() {
            let frame_err = |msg: String| Error::Frame { index: i, message: msg };
            f.camera
                .validate()
                .map_err(|e| frame_err(e.to_string()))?;
            if f.camera.width != self.width || f.camera.height != self.height {
                return Err(frame_err(format!(
                    "camera is {}x{} but the dataset is {}x{}",
                    f.camera.width, f.camera.height, self.width, self.height
                )));
            }
            if f.theta.len() % 3 != 0 || f.theta.is_empty() {
                return Err(frame_err(format!(
                    "pose vector length {} is not a multiple of 3",
                    f.theta.len()
                )));
            }
            if f.theta.iter().chain(&f.psi).any(|v| !v.is_finite()) {
                return Err(frame_err("non-finite pose or expression".into()));
            }
        }
        Ok(())
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.indices_of(Split::Train)
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.indices_of(Split::Test)
    }

    fn indices_of(&self, split: Split) -> Vec<usize> {
        self.frames
            .iter()
            .enumerate()
            .filter(|(_, f)| f.split == split)
            .map(|(i, _)| i)
            .collect()
    }
}

/// A frame with its pixels in memory.
#[derive(Debug, Clone)]
pub struct LoadedFrame {
    pub record: FrameRecord,
    pub image: ImageBuf,
    /// Row-major foreground flags.
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub frames: Vec<LoadedFrame>,
}

impl LoadedDataset {
    pub fn load(dir: &Path) -> Result<LoadedDataset> {
        let manifest = Manifest::load(dir)?;
        let mut frames = Vec::with_capacity(manifest.frames.len());
        for (i, rec) in manifest.frames.iter().enumerate() {
            let image = load_png(&dir.join(&rec.image))?;
            let mask = load_mask_png(&dir.join(&rec.mask))?;
            if image.width != manifest.width || image.height != manifest.height {
                return Err(Error::Frame {
                    index: i,
                    message: format!(
                        "image {} is {}x{}, expected {}x{}",
                        rec.image, image.width, image.height, manifest.width, manifest.height
                    ),
                });
            }
            if mask.len() != manifest.width * manifest.height {
                return Err(Error::Frame {
                    index: i,
                    message: format!("mask {} does not match the image size", rec.mask),
                });
            }
            frames.push(LoadedFrame {
                record: rec.clone(),
                image,
                mask,
            });
        }
        Ok(LoadedDataset {
            root: dir.to_path_buf(),
            manifest,
            frames,
        })
    }

    pub fn head_model_path(&self) -> PathBuf {
        self.root.join(&self.manifest.head_model)
    }
}

/// Save an image as 8-bit RGB PNG.
pub fn save_png(path: &Path, img: &ImageBuf) -> Result<()> {
    let mut bytes = Vec::with_capacity(img.rgb.len());
    for &v in &img.rgb {
        bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    let buf: image::RgbImage =
        image::ImageBuffer::from_raw(img.width as u32, img.height as u32, bytes)
            .expect("buffer size matches dimensions");
    buf.save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

pub fn load_png(path: &Path) -> Result<ImageBuf> {
    let img = image::open(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(ImageBuf {
        width: w,
        height: h,
        rgb: img.into_raw().iter().map(|&b| b as f32 / 255.0).collect(),
    })
}

/// Save a binary mask as an 8-bit gray PNG of 0/255 values.
pub fn save_mask_png(path: &Path, mask: &[bool], width: usize, height: usize) -> Result<()> {
    assert_eq!(mask.len(), width * height);
    let bytes: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    let buf: image::GrayImage =
        image::ImageBuffer::from_raw(width as u32, height as u32, bytes)
            .expect("buffer size matches dimensions");
    buf.save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

/// Load a mask, rejecting any pixel that is not exactly 0 or 255.
pub fn load_mask_png(path: &Path) -> Result<Vec<bool>> {
    let img = image::open(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?
        .to_luma8();
    let mut mask = Vec::with_capacity((img.width() * img.height()) as usize);
    for (i, &p) in img.as_raw().iter().enumerate() {
        match p {
            0 => mask.push(false),
            255 => mask.push(true),
            other => {
                return Err(Error::invalid(
                    "mask",
                    format!("{}: pixel {i} has value {other}, expected 0 or 255", path.display()),
                ))
            }
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::Camera;
    use nalgebra::Vector3;

    fn camera(w: usize, h: usize) -> Camera {
        Camera::look_at(
            Vector3::new(0.0, 0.0, -1.0),
            Vector3::zeros(),
            Vector3::y(),
            50.0,
            w,
            h,
        )
    }

    fn manifest() -> Manifest {
        Manifest {
            width: 8,
            height: 6,
            beta_avg: vec![0.1, -0.2],
            head_model: "head.bin".into(),
            frames: vec![FrameRecord {
                image: "f0.png".into(),
                mask: "f0_mask.png".into(),
                camera: camera(8, 6),
                theta: vec![0.0; 9],
                psi: vec![0.0; 4],
                split: Split::Train,
            }],
            meta: serde_json::Value::Null,
        }
    }

    #[test]
    fn manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest();
        m.save(dir.path()).unwrap();
        let back = Manifest::load(dir.path()).unwrap();
        assert_eq!(m, back);
        assert_eq!(back.train_indices(), vec![0]);
        assert!(back.test_indices().is_empty());
    }

    #[test]
    fn validation_flags_camera_size_mismatch() {
        let mut m = manifest();
        m.frames[0].camera = camera(16, 16);
        let err = m.validate().unwrap_err();
        assert!(err.to_string().contains("frame 0"), "{err}");
        assert!(err.is_validation());
    }

    #[test]
    fn png_round_trip_is_lossless_at_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageBuf {
            width: 4,
            height: 3,
            rgb: (0..36).map(|i| (i as f32 * 7.0 % 256.0) / 255.0).collect(),
        };
        let path = dir.path().join("img.png");
        save_png(&path, &img).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(img.width, back.width);
        for (a, b) in img.rgb.iter().zip(&back.rgb) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn mask_round_trips_and_rejects_gray() {
        let dir = tempfile::tempdir().unwrap();
        let mask = vec![true, false, false, true, true, false];
        let path = dir.path().join("mask.png");
        save_mask_png(&path, &mask, 3, 2).unwrap();
        assert_eq!(load_mask_png(&path).unwrap(), mask);
        // A gray pixel is invalid.
        let gray: image::GrayImage = image::ImageBuffer::from_raw(2, 1, vec![0, 128]).unwrap();
        let bad = dir.path().join("bad.png");
        gray.save(&bad).unwrap();
        let err = load_mask_png(&bad).unwrap_err();
        assert!(err.to_string().contains("128"), "{err}");
    }

    #[test]
    fn missing_image_names_the_frame() {
        let dir = tempfile::tempdir().unwrap();
        manifest().save(dir.path()).unwrap();
        let err = LoadedDataset::load(dir.path()).unwrap_err();
        assert!(err.to_string().contains("f0.png"), "{err}");
    }
}
