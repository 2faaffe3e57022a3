use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{image_level_fuse, ImageFusionParams, ImageFusionVars};
use crate::tensor::{Tape, Tensor, Var};

/// Per-cell prediction channels: objectness logit, then `dx, dy, dw, dh`.
pub const HEAD_OUTPUTS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentSpec {
    pub fuse_channels: usize,
    /// Channels of every backbone stage and of the output pyramid.
    pub width: usize,
}

impl Default for StudentSpec {
    fn default() -> Self {
        Self {
            fuse_channels: 4,
            width: 8,
        }
    }
}

/// 3×3 convolution weights, `[C_out, 9·C_in]` with taps outermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3 {
    pub w: Tensor,
    pub b: Tensor,
}

impl Conv3 {
    fn init(c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        let fan_in = 9 * c_in;
        Self {
            w: Tensor::uniform(&[c_out, fan_in], (6.0 / fan_in as f64).sqrt(), rng),
            b: Tensor::zeros(&[c_out]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mix {
    pub w: Tensor,
    pub b: Tensor,
}

impl Mix {
    fn init(c_in: usize, c_out: usize, scale: f64, rng: &mut impl Rng) -> Self {
        Self {
            w: Tensor::uniform(&[c_out, c_in], scale * (3.0 / c_in as f64).sqrt(), rng),
            b: Tensor::zeros(&[c_out]),
        }
    }
}

/// Image-level fusion, two downsampling stages (strides 4 and 8), a
/// two-level top-down FPN and a dense head shared across levels.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel {
    pub spec: StudentSpec,
    pub fuse: ImageFusionParams,
    pub stage1: Conv3,
    pub stage2: Conv3,
    pub lateral: [Mix; 2],
    pub output: [Conv3; 2],
    pub head: Mix,
}

pub const STUDENT_STRIDES: [usize; 2] = [4, 8];

#[derive(Debug, Clone)]
pub struct StudentVars {
    fuse: ImageFusionVars,
    params: Vec<Var>,
}

impl StudentVars {
    pub fn all(&self) -> &[Var] {
        &self.params
    }
}

/// Differentiable outputs for one scene, finest level first.
#[derive(Debug, Clone)]
pub struct StudentOutput {
    pub pyramid: Vec<Var>,
    pub predictions: Vec<Var>,
}

impl StudentModel {
    pub fn init(spec: StudentSpec, image_channels: usize, rng: &mut impl Rng) -> Self {
        let w = spec.width;
        Self {
            fuse: ImageFusionParams::init(image_channels, spec.fuse_channels, rng),
            stage1: Conv3::init(spec.fuse_channels, w, rng),
            stage2: Conv3::init(w, w, rng),
            lateral: [Mix::init(w, w, 1.0, rng), Mix::init(w, w, 1.0, rng)],
            output: [Conv3::init(w, w, rng), Conv3::init(w, w, rng)],
            head: Mix::init(w, HEAD_OUTPUTS, 0.1, rng),
            spec,
        }
    }

    pub fn strides(&self) -> Vec<f64> {
        STUDENT_STRIDES.iter().map(|&s| s as f64).collect()
    }

    /// Every trainable grid with a stable name, in binding order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.fuse.named_tensors();
        for (name, w, b) in [
            ("stage1", &self.stage1.w, &self.stage1.b),
            ("stage2", &self.stage2.w, &self.stage2.b),
            ("lateral4", &self.lateral[0].w, &self.lateral[0].b),
            ("lateral8", &self.lateral[1].w, &self.lateral[1].b),
            ("output4", &self.output[0].w, &self.output[0].b),
            ("output8", &self.output[1].w, &self.output[1].b),
            ("head", &self.head.w, &self.head.b),
        ] {
            out.push((format!("{name}.w"), w));
            out.push((format!("{name}.b"), b));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.fuse.tensors_mut();
        let [l4, l8] = &mut self.lateral;
        let [o4, o8] = &mut self.output;
        for (w, b) in [
            (&mut self.stage1.w, &mut self.stage1.b),
            (&mut self.stage2.w, &mut self.stage2.b),
            (&mut l4.w, &mut l4.b),
            (&mut l8.w, &mut l8.b),
            (&mut o4.w, &mut o4.b),
            (&mut o8.w, &mut o8.b),
            (&mut self.head.w, &mut self.head.b),
        ] {
            out.push(w);
            out.push(b);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Records all parameters on the tape, in [`named_tensors`](Self::named_tensors) order.
    pub fn bind(&self, tape: &mut Tape) -> StudentVars {
        let fuse = self.fuse.bind(tape);
        let mut params = fuse.vars();
        for (_, t) in self.named_tensors().into_iter().skip(params.len()) {
            params.push(tape.param(t.clone()));
        }
        StudentVars { fuse, params }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &StudentVars,
        rgb: &Tensor,
        tir: &Tensor,
    ) -> Result<StudentOutput> {
        let (_, h, w) = rgb.chw()?;
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::ShapeMismatch(format!(
                "image {h}×{w} is not a multiple of 8"
            )));
        }
        let p = &vars.params[vars.fuse.vars().len()..];
        let (s1, s2, l4, l8, o4, o8, hd) = (
            (p[0], p[1]),
            (p[2], p[3]),
            (p[4], p[5]),
            (p[6], p[7]),
            (p[8], p[9]),
            (p[10], p[11]),
            (p[12], p[13]),
        );
        let r = tape.constant(rgb.clone());
        let t = tape.constant(tir.clone());
        let x = image_level_fuse(tape, r, t, &vars.fuse)?;
        let x = tape.avg_pool(x, 2)?;
        let x = conv3(tape, x, s1)?;
        let x = tape.relu(x);
        let c4 = tape.avg_pool(x, 2)?;
        let x = conv3(tape, c4, s2)?;
        let x = tape.relu(x);
        let c8 = tape.avg_pool(x, 2)?;

        let p8 = tape.channel_mix(c8, l8.0, l8.1)?;
        let lat4 = tape.channel_mix(c4, l4.0, l4.1)?;
        let up = tape.upsample(p8, 2)?;
        let p4 = tape.add(lat4, up)?;
        let f4 = conv3(tape, p4, o4)?;
        let f8 = conv3(tape, p8, o8)?;

        let pyramid = vec![f4, f8];
        let predictions = pyramid
            .iter()
            .map(|&f| tape.channel_mix(f, hd.0, hd.1))
            .collect::<Result<Vec<_>>>()?;
        Ok(StudentOutput {
            pyramid,
            predictions,
        })
    }
}

/// Zero-padded 3×3 convolution from shifted copies and one channel mix.
fn conv3(tape: &mut Tape, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let mut taps = Vec::with_capacity(9);
    for dy in -1..=1 {
        for dx in -1..=1 {
            taps.push(if dy == 0 && dx == 0 {
                x
            } else {
                tape.shift(x, dy, dx)?
            });
        }
    }
    let stacked = tape.concat_channels(&taps)?;
    tape.channel_mix(stacked, w, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradient_error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64) -> StudentModel {
        StudentModel::init(
            StudentSpec::default(),
            1,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
    }

    fn images(seed: u64, h: usize, w: usize) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            Tensor::normal(&[1, h, w], 1.0, &mut rng),
            Tensor::normal(&[1, h, w], 1.0, &mut rng),
        )
    }

    #[test]
    fn pyramid_shapes() {
        let m = model(0);
        let (r, t) = images(1, 64, 32);
        let mut tape = Tape::new();
        let v = m.bind(&mut tape);
        let out = m.forward(&mut tape, &v, &r, &t).unwrap();
        assert_eq!(tape.shape(out.pyramid[0]), &[8, 16, 8]);
        assert_eq!(tape.shape(out.pyramid[1]), &[8, 8, 4]);
        assert_eq!(tape.shape(out.predictions[0]), &[5, 16, 8]);
        assert_eq!(tape.shape(out.predictions[1]), &[5, 8, 4]);
    }

    #[test]
    fn rejects_odd_extent() {
        let m = model(0);
        let (r, t) = images(1, 20, 16);
        let mut tape = Tape::new();
        let v = m.bind(&mut tape);
        assert!(m.forward(&mut tape, &v, &r, &t).is_err());
    }

    #[test]
    fn named_tensors_match_mutable_view() {
        let mut m = model(2);
        let names: Vec<Tensor> = m
            .named_tensors()
            .into_iter()
            .map(|(_, t)| t.clone())
            .collect();
        let muts: Vec<Tensor> = m.tensors_mut().into_iter().map(|t| t.clone()).collect();
        assert_eq!(names, muts);
        let mut tape = Tape::new();
        assert_eq!(m.bind(&mut tape).all().len(), names.len());
    }

    #[test]
    fn doubling_head_doubles_logits() {
        let m = model(3);
        let mut m2 = m.clone();
        for v in m2.head.w.data_mut().iter_mut().chain(m2.head.b.data_mut()) {
            *v *= 2.0;
        }
        m2.head.b = Tensor::new(&[5], vec![0.1, -0.2, 0.3, 0.0, 0.5]).unwrap();
        let mut m1 = m.clone();
        m1.head.b = Tensor::new(&[5], vec![0.05, -0.1, 0.15, 0.0, 0.25]).unwrap();
        let (r, t) = images(4, 32, 32);
        let logits = |m: &StudentModel| {
            let mut tape = Tape::new();
            let v = m.bind(&mut tape);
            let out = m.forward(&mut tape, &v, &r, &t).unwrap();
            out.predictions
                .iter()
                .flat_map(|&p| tape.value(p).data().to_vec())
                .collect::<Vec<_>>()
        };
        for (a, b) in logits(&m1).iter().zip(logits(&m2)) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn logit_sum_gradient_wrt_fusion_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = model(5);
        for t in m.fuse.tensors_mut() {
            *t = Tensor::normal(t.shape(), 0.5, &mut rng);
        }
        let (r, t) = images(6, 16, 16);
        let logit_sum = |m: &StudentModel| -> (Tape, Var, StudentVars) {
            let mut tape = Tape::new();
            let v = m.bind(&mut tape);
            let out = m.forward(&mut tape, &v, &r, &t).unwrap();
            let mut parts = Vec::new();
            for &p in &out.predictions {
                let hw = tape.shape(p)[1] * tape.shape(p)[2];
                let idx: Vec<usize> = (0..hw).collect();
                let g = tape.gather(p, &idx).unwrap();
                parts.push(tape.sum_all(g));
            }
            let s = tape.add(parts[0], parts[1]).unwrap();
            (tape, s, v)
        };
        let (tape, s, v) = logit_sum(&m);
        let grads = tape.backward(s).unwrap();
        let n_fuse = m.fuse.named_tensors().len();
        let originals: Vec<Tensor> = m
            .fuse
            .tensors_mut()
            .into_iter()
            .map(|t| t.clone())
            .collect();
        for i in 0..n_fuse {
            let e = gradient_error(
                |x| {
                    let mut q = m.clone();
                    *q.fuse.tensors_mut()[i] = x.clone();
                    let (tape, s, _) = logit_sum(&q);
                    tape.value(s).item()
                },
                &originals[i],
                &grads.wrt(v.all()[i]),
                1e-5,
            );
            assert!(e < 1e-4, "fusion param {i}: {e}");
        }
    }
}
