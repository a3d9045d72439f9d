//! Canonical appearance: an occupancy MLP and a color MLP over the
//! deformation-neutral head space, with finite-difference surface normals.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::nn::{Mlp, MlpBuf};
use crate::tensor::tape::{posenc_into, posenc_len, Tape, Var};
use crate::tensor::{HasParams, Param, ParamIds};

/// Gradient magnitudes below this are treated as degenerate normals.
pub const DEGENERATE_GRAD: f64 = 1e-8;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    pub occ_hidden: usize,
    pub occ_layers: usize,
    pub color_hidden: usize,
    pub color_layers: usize,
    /// Positional-encoding frequencies for canonical position.
    pub x_freqs: usize,
    /// Positional-encoding frequencies for view direction.
    pub d_freqs: usize,
    /// Central-difference step for normals.
    pub fd_step: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            occ_hidden: 128,
            occ_layers: 8,
            color_hidden: 128,
            color_layers: 4,
            x_freqs: 10,
            d_freqs: 4,
            fd_step: 1e-3,
        }
    }
}

/// Occupancy in [0,1] plus view-dependent color, both in canonical space.
/// The color net sees the occupancy net's last hidden features, the surface
/// normal, and the encoded view direction.
#[derive(Debug, Clone)]
pub struct CanonicalField {
    pub cfg: FieldConfig,
    pub occ: Mlp,
    pub color: Mlp,
}

impl CanonicalField {
    /// The occupancy head starts damped (small weights, bias -2.5) so the
    /// field opens mostly empty, near sigmoid(-2.5) ~ 0.08: background rays
    /// then start close to their white target instead of having to carve
    /// haze out of the whole volume.
    pub fn new(ids: &mut ParamIds, seed: u64, cfg: FieldConfig) -> CanonicalField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut occ_dims = vec![posenc_len(3, cfg.x_freqs)];
        occ_dims.extend(std::iter::repeat(cfg.occ_hidden).take(cfg.occ_layers));
        occ_dims.push(1);
        let mut occ = Mlp::new(ids, &mut rng, "field.occ", &occ_dims, false);
        {
            let last = occ.layers.last_mut().unwrap();
            for w in last.weight.value.data.iter_mut() {
                *w *= 0.1;
            }
            last.bias.value.data[0] = -2.5;
        }
        let color_in = cfg.occ_hidden + 3 + posenc_len(3, cfg.d_freqs);
        let mut color_dims = vec![color_in];
        color_dims.extend(std::iter::repeat(cfg.color_hidden).take(cfg.color_layers));
        color_dims.push(3);
        let color = Mlp::new(ids, &mut rng, "field.color", &color_dims, false);
        CanonicalField { cfg, occ, color }
    }

    pub fn encode_position(&self, x: Vector3<f64>, out: &mut Vec<f64>) {
        out.resize(posenc_len(3, self.cfg.x_freqs), 0.0);
        posenc_into(&[x.x, x.y, x.z], self.cfg.x_freqs, out);
    }

    /// Occupancy at a canonical point; `buf.feature` keeps the last hidden
    /// activations for the color net.
    pub fn occupancy(&self, x: Vector3<f64>, enc: &mut Vec<f64>, buf: &mut MlpBuf) -> f64 {
        self.encode_position(x, enc);
        self.occ.forward_f64(enc, buf);
        crate::tensor::tape::sigmoid(buf.out[0])
    }

    /// Color given the occupancy features at the surface point, the unit
    /// normal, and the unit view direction.
    pub fn color(
        &self,
        feature: &[f64],
        normal: Vector3<f64>,
        dir: Vector3<f64>,
        input: &mut Vec<f64>,
        buf: &mut MlpBuf,
    ) -> [f64; 3] {
        let enc_d = posenc_len(3, self.cfg.d_freqs);
        input.resize(feature.len() + 3 + enc_d, 0.0);
        input[..feature.len()].copy_from_slice(feature);
        input[feature.len()] = normal.x;
        input[feature.len() + 1] = normal.y;
        input[feature.len() + 2] = normal.z;
        let tail = feature.len() + 3;
        posenc_into(&[dir.x, dir.y, dir.z], self.cfg.d_freqs, &mut input[tail..]);
        self.color.forward_f64(input, buf);
        [
            crate::tensor::tape::sigmoid(buf.out[0]),
            crate::tensor::tape::sigmoid(buf.out[1]),
            crate::tensor::tape::sigmoid(buf.out[2]),
        ]
    }

    /// Central-difference occupancy gradient (six evaluations).
    pub fn grad_occupancy(&self, x: Vector3<f64>, enc: &mut Vec<f64>, buf: &mut MlpBuf) -> Vector3<f64> {
        let h = self.cfg.fd_step;
        let mut g = Vector3::zeros();
        for axis in 0..3 {
            let mut step = Vector3::zeros();
            step[axis] = h;
            let hi = self.occupancy(x + step, enc, buf);
            let lo = self.occupancy(x - step, enc, buf);
            g[axis] = (hi - lo) / (2.0 * h);
        }
        g
    }

    /// Unit outward normal `-grad o / |grad o|`, or None when degenerate.
    pub fn normal(&self, x: Vector3<f64>, enc: &mut Vec<f64>, buf: &mut MlpBuf) -> Option<Vector3<f64>> {
        let g = self.grad_occupancy(x, enc, buf);
        let n = g.norm();
        if n < DEGENERATE_GRAD {
            None
        } else {
            Some(-g / n)
        }
    }

    // ---- tape paths ----

    /// Occupancy and hidden features with `x` already on the tape (length 3).
    pub fn occupancy_tape(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        let enc = tape.posenc(x, self.cfg.x_freqs);
        let (logit, feature) = self.occ.forward_tape_with_feature(tape, enc)?;
        Ok((tape.sigmoid(logit), feature))
    }

    /// Finite-difference occupancy gradient on the tape (six evaluations).
    pub fn grad_occupancy_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.cfg.fd_step;
        let mut comps = [None; 3];
        for axis in 0..3 {
            let mut step = [0.0; 3];
            step[axis] = h;
            let plus = tape.leaf(&step);
            let minus = tape.leaf(&[-step[0], -step[1], -step[2]]);
            let xp = tape.add(x, plus)?;
            let xm = tape.add(x, minus)?;
            let (op, _) = self.occupancy_tape(tape, xp)?;
            let (om, _) = self.occupancy_tape(tape, xm)?;
            let diff = tape.sub(op, om)?;
            comps[axis] = Some(tape.affine(diff, 1.0 / (2.0 * h), 0.0));
        }
        Ok(tape.concat3(comps[0].unwrap(), comps[1].unwrap(), comps[2].unwrap()))
    }

    /// Color on the tape from on-tape features/normal and a fixed direction.
    pub fn color_tape(&self, tape: &mut Tape, feature: Var, normal: Var, dir: Vector3<f64>) -> Result<Var> {
        let mut enc_d = vec![0.0; posenc_len(3, self.cfg.d_freqs)];
        posenc_into(&[dir.x, dir.y, dir.z], self.cfg.d_freqs, &mut enc_d);
        let d = tape.leaf(&enc_d);
        let input = tape.concat3(feature, normal, d);
        let raw = self.color.forward_tape(tape, input)?;
        Ok(tape.sigmoid(raw))
    }
}

impl HasParams for CanonicalField {
    fn visit(&self, f: &mut dyn FnMut(&str, &Param)) {
        self.occ.visit(f);
        self.color.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.occ.visit_mut(f);
        self.color.visit_mut(f);
    }
}

/// Central-difference gradient of an arbitrary scalar field; shared by the
/// learned field above and analytic reference fields.
pub fn fd_gradient(occ: impl Fn(Vector3<f64>) -> f64, x: Vector3<f64>, h: f64) -> Vector3<f64> {
    let mut g = Vector3::zeros();
    for axis in 0..3 {
        let mut step = Vector3::zeros();
        step[axis] = h;
        g[axis] = (occ(x + step) - occ(x - step)) / (2.0 * h);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> CanonicalField {
        let mut ids = ParamIds::new();
        CanonicalField::new(
            &mut ids,
            7,
            FieldConfig {
                occ_hidden: 32,
                occ_layers: 3,
                color_hidden: 24,
                color_layers: 2,
                x_freqs: 4,
                d_freqs: 2,
                fd_step: 1e-3,
            },
        )
    }

    #[test]
    fn initial_occupancy_sits_near_quarter() {
        let f = small();
        let (mut enc, mut buf) = (Vec::new(), MlpBuf::default());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let x = Vector3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            );
            let o = f.occupancy(x, &mut enc, &mut buf);
            assert!((0.04..0.14).contains(&o), "init occupancy {o}");
        }
    }

    #[test]
    fn color_stays_in_unit_range() {
        let f = small();
        let (mut enc, mut buf, mut cin, mut cbuf) =
            (Vec::new(), MlpBuf::default(), Vec::new(), MlpBuf::default());
        let x = Vector3::new(0.1, 0.05, -0.2);
        let _ = f.occupancy(x, &mut enc, &mut buf);
        let feature = buf.feature.clone();
        let c = f.color(
            &feature,
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(0.0, 0.0, -1.0),
            &mut cin,
            &mut cbuf,
        );
        for ch in c {
            assert!((0.0..=1.0).contains(&ch));
        }
    }

    #[test]
    fn fd_gradient_matches_analytic_sphere_normal() {
        // Smooth radial occupancy: gradient direction must be radial.
        let occ = |x: Vector3<f64>| crate::tensor::tape::sigmoid(40.0 * (0.25 - x.norm()));
        let x = Vector3::new(0.2, 0.1, -0.12);
        let g = fd_gradient(occ, x, 1e-4);
        let n = -g / g.norm();
        let expect = x / x.norm();
        assert!((n - expect).norm() < 1e-3, "normal err {}", (n - expect).norm());
    }

    #[test]
    fn tape_occupancy_matches_plain() {
        let f = small();
        let (mut enc, mut buf) = (Vec::new(), MlpBuf::default());
        let x = Vector3::new(-0.13, 0.21, 0.07);
        let plain = f.occupancy(x, &mut enc, &mut buf);
        let mut tape = Tape::new();
        let leaf = tape.leaf(&[x.x, x.y, x.z]);
        let (o, feat) = f.occupancy_tape(&mut tape, leaf).unwrap();
        assert!((tape.scalar(o) - plain).abs() < 1e-12);
        let tf = tape.value(feat).to_vec();
        for (a, b) in tf.iter().zip(&buf.feature) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_gradient_matches_plain_gradient() {
        let f = small();
        let (mut enc, mut buf) = (Vec::new(), MlpBuf::default());
        let x = Vector3::new(0.02, -0.3, 0.11);
        let plain = f.grad_occupancy(x, &mut enc, &mut buf);
        let mut tape = Tape::new();
        let leaf = tape.leaf(&[x.x, x.y, x.z]);
        let g = f.grad_occupancy_tape(&mut tape, leaf).unwrap();
        let v = tape.value(g);
        assert!((plain - Vector3::new(v[0], v[1], v[2])).norm() < 1e-12);
    }

    #[test]
    fn tape_color_matches_plain() {
        let f = small();
        let (mut enc, mut buf, mut cin, mut cbuf) =
            (Vec::new(), MlpBuf::default(), Vec::new(), MlpBuf::default());
        let x = Vector3::new(0.1, 0.0, 0.2);
        let dir = Vector3::new(0.6, 0.0, -0.8);
        let normal = Vector3::new(0.0, 1.0, 0.0);
        let _ = f.occupancy(x, &mut enc, &mut buf);
        let feature = buf.feature.clone();
        let plain = f.color(&feature, normal, dir, &mut cin, &mut cbuf);
        let mut tape = Tape::new();
        let leaf = tape.leaf(&[x.x, x.y, x.z]);
        let (_, feat) = f.occupancy_tape(&mut tape, leaf).unwrap();
        let n = tape.leaf(&[normal.x, normal.y, normal.z]);
        let c = f.color_tape(&mut tape, feat, n, dir).unwrap();
        let v = tape.value(c);
        for (a, b) in plain.iter().zip(v) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
