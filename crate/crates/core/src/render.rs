//! Ray generation and occupancy-weighted quadrature along camera rays.
//!
//! A pixel accumulates opacity front to back; color is evaluated once, at the
//! first surface crossing, and composited over a white background.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::nn::MlpBuf;

/// Occupancy level that defines the surface.
pub const SURFACE_LEVEL: f64 = 0.5;

/// Pinhole camera with an OpenCV-style frame: x right, y down, z forward.
/// `world_from_camera` is row-major `[R | t]`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub world_from_camera: [[f64; 4]; 3],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub dir: Vector3<f64>,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.dir * t
    }
}

impl Camera {
    /// Camera at `eye` looking at `target`, image upright under `up`.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Camera {
        let z = (target - eye).normalize();
        let down = -up;
        let x = z.cross(&down).normalize();
        let y = z.cross(&x);
        let mut m = [[0.0; 4]; 3];
        for r in 0..3 {
            m[r][0] = x[r];
            m[r][1] = y[r];
            m[r][2] = z[r];
            m[r][3] = eye[r];
        }
        Camera {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            world_from_camera: m,
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        let m = &self.world_from_camera;
        Matrix3::new(
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        )
    }

    pub fn position(&self) -> Vector3<f64> {
        let m = &self.world_from_camera;
        Vector3::new(m[0][3], m[1][3], m[2][3])
    }

    pub fn validate(&self) -> Result<()> {
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::invalid("camera", "focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera", "image dimensions must be positive"));
        }
        let r = self.rotation();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > 1e-5 {
            return Err(Error::invalid(
                "camera",
                format!("rotation is not orthonormal (deviation {err:.2e})"),
            ));
        }
        if r.determinant() < 0.0 {
            return Err(Error::invalid("camera", "rotation flips orientation"));
        }
        for row in &self.world_from_camera {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("camera", "non-finite extrinsics"));
            }
        }
        Ok(())
    }

    /// Ray through the center of pixel `(px, py)`.
    pub fn ray(&self, px: usize, py: usize) -> Ray {
        let xc = (px as f64 + 0.5 - self.cx) / self.fx;
        let yc = (py as f64 + 0.5 - self.cy) / self.fy;
        let dir_cam = Vector3::new(xc, yc, 1.0);
        Ray {
            origin: self.position(),
            dir: (self.rotation() * dir_cam).normalize(),
        }
    }
}

/// Near/far bounds for a camera at `eye` enclosing a sphere with 10% margin.
pub fn near_far_for_sphere(eye: Vector3<f64>, center: Vector3<f64>, radius: f64) -> (f64, f64) {
    let d = (eye - center).norm();
    let r = radius * 1.1;
    ((d - r).max(1e-3), d + r)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    /// Quadrature samples per ray.
    pub k_samples: usize,
    pub near: f64,
    pub far: f64,
    /// Stop marching once transmittance falls below this (0 disables).
    pub min_weight: f64,
}

/// Scratch shared by analytic and learned fields during ray marching.
#[derive(Default, Clone)]
pub struct FieldBuf {
    pub enc: Vec<f64>,
    pub mlp: MlpBuf,
    pub color_in: Vec<f64>,
    pub color_mlp: MlpBuf,
    pub deform: crate::deform::DeformBuf,
}

/// Surface crossing along a ray, expressed in field space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceSample {
    pub t: f64,
    pub x_field: Vector3<f64>,
    /// Unit normal in field space; `-dir` when the gradient degenerates.
    pub normal: Vector3<f64>,
    pub degenerate: bool,
}

/// Anything a ray can march through: a map from world to field space, an
/// occupancy, and a surface color.
pub trait SceneField: Sync {
    fn to_field(&self, x: Vector3<f64>, buf: &mut FieldBuf) -> Vector3<f64>;
    fn occupancy(&self, x_field: Vector3<f64>, buf: &mut FieldBuf) -> f64;
    fn color(&self, surf: &SurfaceSample, dir: Vector3<f64>, buf: &mut FieldBuf) -> [f64; 3];
    /// Step for finite-difference normals.
    fn fd_step(&self) -> f64 {
        1e-3
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RayRender {
    pub rgb: [f64; 3],
    pub alpha: f64,
    pub surface: Option<SurfaceSample>,
    /// Samples dropped by early termination.
    pub skipped: usize,
}

fn field_gradient(field: &dyn SceneField, x: Vector3<f64>, buf: &mut FieldBuf) -> Vector3<f64> {
    let h = field.fd_step();
    let mut g = Vector3::zeros();
    for axis in 0..3 {
        let mut step = Vector3::zeros();
        step[axis] = h;
        let hi = field.occupancy(x + step, buf);
        let lo = field.occupancy(x - step, buf);
        g[axis] = (hi - lo) / (2.0 * h);
    }
    g
}

/// March one ray. `jitter`, when given, holds one uniform draw per sample for
/// stratified positions; midpoints otherwise.
pub fn render_ray(
    field: &dyn SceneField,
    ray: &Ray,
    opt: &RenderOptions,
    jitter: Option<&[f64]>,
    buf: &mut FieldBuf,
) -> RayRender {
    let k = opt.k_samples;
    let dt = (opt.far - opt.near) / k as f64;
    let mut trans = 1.0;
    let mut alpha = 0.0;
    let mut prev: Option<(f64, f64, Vector3<f64>)> = None; // (t, occ, x_field)
    let mut crossing: Option<(f64, Vector3<f64>)> = None;
    let mut best: Option<(f64, f64, Vector3<f64>)> = None; // (weight, t, x_field)
    let mut skipped = 0;
    for i in 0..k {
        let u = jitter.map_or(0.5, |j| j[i]);
        let t = opt.near + (i as f64 + u) * dt;
        let xf = field.to_field(ray.at(t), buf);
        let o = field.occupancy(xf, buf);
        let w = trans * o;
        alpha += w;
        if best.map_or(true, |(bw, _, _)| w > bw) {
            best = Some((w, t, xf));
        }
        if crossing.is_none() && o >= SURFACE_LEVEL {
            crossing = Some(match prev {
                Some((tp, op, xp)) if op < SURFACE_LEVEL => {
                    let tau = (SURFACE_LEVEL - op) / (o - op);
                    (tp + tau * (t - tp), xp + (xf - xp) * tau)
                }
                // Occupied from the very first sample: take it as-is.
                _ => (t, xf),
            });
        }
        prev = Some((t, o, xf));
        trans *= 1.0 - o;
        if opt.min_weight > 0.0 && trans < opt.min_weight {
            skipped = k - i - 1;
            break;
        }
    }
    let surface_at = crossing.or_else(|| {
        // No level crossing: fall back to the strongest sample, if any.
        best.and_then(|(w, t, xf)| (w > 0.0).then_some((t, xf)))
    });
    let surface = surface_at.map(|(t, xf)| {
        let g = field_gradient(field, xf, buf);
        let n = g.norm();
        if n < crate::field::DEGENERATE_GRAD {
            SurfaceSample {
                t,
                x_field: xf,
                normal: -ray.dir,
                degenerate: true,
            }
        } else {
            SurfaceSample {
                t,
                x_field: xf,
                normal: -g / n,
                degenerate: false,
            }
        }
    });
    let mut rgb = [1.0; 3];
    if let Some(surf) = &surface {
        let c = field.color(surf, ray.dir, buf);
        for ch in 0..3 {
            rgb[ch] = alpha * c[ch] + (1.0 - alpha);
        }
    }
    RayRender {
        rgb,
        alpha,
        surface,
        skipped,
    }
}

/// Row-major H x W x 3 image in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f32>,
}

impl ImageBuf {
    pub fn white(width: usize, height: usize) -> ImageBuf {
        ImageBuf {
            width,
            height,
            rgb: vec![1.0; width * height * 3],
        }
    }

    pub fn pixel(&self, px: usize, py: usize) -> [f32; 3] {
        let i = (py * self.width + px) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn set_pixel(&mut self, px: usize, py: usize, c: [f32; 3]) {
        let i = (py * self.width + px) * 3;
        self.rgb[i..i + 3].copy_from_slice(&c);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage {
    pub rgb: ImageBuf,
    /// Accumulated opacity per pixel, row-major.
    pub alpha: Vec<f32>,
}

/// Render every pixel with deterministic midpoint sampling; rows run in
/// parallel and the result is independent of the worker count.
pub fn render_image(field: &dyn SceneField, camera: &Camera, opt: &RenderOptions) -> RenderedImage {
    let (w, h) = (camera.width, camera.height);
    let mut rgb = vec![0.0f32; w * h * 3];
    let mut alpha = vec![0.0f32; w * h];
    rgb.par_chunks_mut(w * 3)
        .zip(alpha.par_chunks_mut(w))
        .enumerate()
        .for_each(|(py, (row_rgb, row_alpha))| {
            let mut buf = FieldBuf::default();
            for px in 0..w {
                let ray = camera.ray(px, py);
                let out = render_ray(field, &ray, opt, None, &mut buf);
                for ch in 0..3 {
                    row_rgb[px * 3 + ch] = out.rgb[ch] as f32;
                }
                row_alpha[px] = out.alpha as f32;
            }
        });
    RenderedImage {
        rgb: ImageBuf {
            width: w,
            height: h,
            rgb,
        },
        alpha,
    }
}

/// Reference per-sample weights `w_i = o_i * prod_{j<i} (1 - o_j)` computed
/// the slow way; the streaming march must match it.
pub fn quadrature_weights_reference(occ: &[f64]) -> Vec<f64> {
    (0..occ.len())
        .map(|i| {
            let t: f64 = occ[..i].iter().map(|o| 1.0 - o).product();
            occ[i] * t
        })
        .collect()
}
