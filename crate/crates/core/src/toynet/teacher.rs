use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::{derive_seed, Scene};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSpec {
    pub channels: usize,
    pub hidden: usize,
    pub strides: Vec<usize>,
    pub seed: u64,
}

impl Default for TeacherSpec {
    fn default() -> Self {
        Self {
            channels: 8,
            hidden: 16,
            strides: vec![4, 8],
            seed: 1234,
        }
    }
}

/// One separable product `w · kx ⊗ ky`, taps centred on a cell centre.
#[derive(Debug, Clone, PartialEq)]
struct Separable {
    weight: f64,
    kx: Vec<f64>,
    ky: Vec<f64>,
}

/// Filter responses at every cell centre of one level, mixed by a two-layer
/// projection `P₂·relu(P₁·φ + b₁) + b₂`.
#[derive(Debug, Clone, PartialEq)]
struct Bank {
    stride: usize,
    radius: usize,
    filters: Vec<Vec<Separable>>,
    p1: Tensor,
    b1: Tensor,
    p2: Tensor,
    b2: Tensor,
}

const MODALITIES: usize = 2;

/// Frozen two-stream feature generator.
#[derive(Debug, Clone, PartialEq)]
pub struct Teacher {
    pub spec: TeacherSpec,
    image_channels: usize,
    /// `banks[modality][level]`, RGB first.
    banks: Vec<Vec<Bank>>,
}

/// Teacher pyramids for one scene; `fused` is the per-level mean of the two
/// modal pyramids.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherFeatures {
    pub rgb: Vec<Tensor>,
    pub tir: Vec<Tensor>,
    pub fused: Vec<Tensor>,
    pub strides: Vec<f64>,
}

/// Sampled Gaussian (or its derivative) at half-integer pixel offsets
/// `-radius + 0.5 ..= radius - 0.5`, normalised to unit mass.
fn taps(sigma: f64, radius: usize, derivative: bool) -> Vec<f64> {
    let xs: Vec<f64> = (0..2 * radius)
        .map(|t| t as f64 - radius as f64 + 0.5)
        .collect();
    let g: Vec<f64> = xs
        .iter()
        .map(|x| (-0.5 * x * x / (sigma * sigma)).exp())
        .collect();
    let mass: f64 = g.iter().sum();
    if derivative {
        xs.iter()
            .zip(&g)
            .map(|(x, v)| -x / (sigma * sigma) * v / mass)
            .collect()
    } else {
        g.iter().map(|v| v / mass).collect()
    }
}

fn filter_family(stride: usize, radius: usize) -> Vec<Vec<Separable>> {
    let s = stride as f64;
    let gauss = |sx: f64, sy: f64, w: f64| Separable {
        weight: w,
        kx: taps(sx, radius, false),
        ky: taps(sy, radius, false),
    };
    vec![
        vec![gauss(0.5 * s, 0.5 * s, 1.0)],
        vec![gauss(s, s, 1.0)],
        vec![gauss(s, s, 1.0), gauss(2.0 * s, 2.0 * s, -1.0)],
        vec![gauss(0.5 * s, 1.25 * s, 1.0), gauss(s, 2.5 * s, -1.0)],
        vec![gauss(0.75 * s, 2.0 * s, 1.0), gauss(1.5 * s, 2.0 * s, -1.0)],
        vec![Separable {
            weight: s,
            kx: taps(s, radius, false),
            ky: taps(s, radius, true),
        }],
        vec![Separable {
            weight: s,
            kx: taps(s, radius, true),
            ky: taps(s, radius, false),
        }],
        vec![
            gauss(0.25 * s, 0.25 * s, 1.0),
            gauss(0.5 * s, 0.5 * s, -1.0),
        ],
    ]
}

impl Teacher {
    pub fn new(spec: TeacherSpec, image_channels: usize) -> Result<Self> {
        if spec.channels == 0 || spec.hidden == 0 || spec.strides.is_empty() || image_channels == 0
        {
            return Err(Error::BadSpec(
                "teacher needs channels, hidden units and strides".into(),
            ));
        }
        if spec.strides.iter().any(|&s| s == 0) {
            return Err(Error::BadSpec("teacher strides must be positive".into()));
        }
        let banks = (0..MODALITIES)
            .map(|m| {
                spec.strides
                    .iter()
                    .enumerate()
                    .map(|(l, &stride)| {
                        let mut rng =
                            ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, m as u64, l as u64));
                        let radius = 3 * stride;
                        let filters = filter_family(stride, radius);
                        let inputs = filters.len() * image_channels;
                        Bank {
                            stride,
                            radius,
                            p1: Tensor::normal(
                                &[spec.hidden, inputs],
                                1.5 / (inputs as f64).sqrt(),
                                &mut rng,
                            ),
                            b1: Tensor::normal(&[spec.hidden], 0.1, &mut rng),
                            p2: Tensor::normal(
                                &[spec.channels, spec.hidden],
                                1.0 / (spec.hidden as f64).sqrt(),
                                &mut rng,
                            ),
                            b2: Tensor::normal(&[spec.channels], 0.1, &mut rng),
                            filters,
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            spec,
            image_channels,
            banks,
        })
    }

    pub fn strides(&self) -> Vec<f64> {
        self.spec.strides.iter().map(|&s| s as f64).collect()
    }

    /// Level extents for an `h×w` image.
    pub fn level_shapes(&self, (h, w): (usize, usize)) -> Vec<(usize, usize)> {
        self.spec.strides.iter().map(|&s| (h / s, w / s)).collect()
    }

    /// Number of stored values: filter taps, projections and biases.
    pub fn state_len(&self) -> usize {
        self.banks
            .iter()
            .flatten()
            .map(|b| {
                let taps: usize = b
                    .filters
                    .iter()
                    .flatten()
                    .map(|t| 1 + t.kx.len() + t.ky.len())
                    .sum();
                taps + b.p1.len() + b.b1.len() + b.p2.len() + b.b2.len()
            })
            .sum()
    }

    /// Little-endian dump of the full generator state.
    pub fn state_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 * self.state_len());
        for b in self.banks.iter().flatten() {
            for t in b.filters.iter().flatten() {
                out.extend(t.weight.to_le_bytes());
                t.kx.iter()
                    .chain(&t.ky)
                    .for_each(|v| out.extend(v.to_le_bytes()));
            }
            for p in [&b.p1, &b.b1, &b.p2, &b.b2] {
                p.data().iter().for_each(|v| out.extend(v.to_le_bytes()));
            }
        }
        out
    }

    pub fn features(&self, scene: &Scene) -> Result<TeacherFeatures> {
        let (c, h, w) = scene.rgb.chw()?;
        if c != self.image_channels || scene.tir.shape() != scene.rgb.shape() {
            return Err(Error::ShapeMismatch(format!(
                "teacher expects {} image channels with matching modalities, got rgb {:?} tir {:?}",
                self.image_channels,
                scene.rgb.shape(),
                scene.tir.shape()
            )));
        }
        let mut pyramids = [Vec::new(), Vec::new()];
        for (m, image) in [&scene.rgb, &scene.tir].into_iter().enumerate() {
            for bank in &self.banks[m] {
                pyramids[m].push(bank.apply(image.data(), c, (h, w)));
            }
        }
        let [rgb, tir] = pyramids;
        let fused = rgb
            .iter()
            .zip(&tir)
            .map(|(r, t)| {
                let data = r
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(a, b)| 0.5 * (a + b))
                    .collect();
                Tensor::from_parts(r.shape().to_vec(), data)
            })
            .collect();
        Ok(TeacherFeatures {
            rgb,
            tir,
            fused,
            strides: self.strides(),
        })
    }
}

impl Bank {
    /// Filter responses at cell centres `((i + ½)s, (j + ½)s)`, zero padded.
    fn responses(&self, plane: &[f64], (h, w): (usize, usize)) -> Vec<Vec<f64>> {
        let s = self.stride;
        let (gh, gw) = (h / s, w / s);
        let r = self.radius as isize;
        // tap t covers pixel centre − r + t, centre = (j + ½)s rounded down
        let origin = |cell: usize| (cell * s + s / 2) as isize - r;
        self.filters
            .iter()
            .map(|terms| {
                let mut out = vec![0.0; gh * gw];
                for term in terms {
                    let mut rows = vec![0.0; h * gw];
                    for y in 0..h {
                        for j in 0..gw {
                            let x0 = origin(j);
                            let mut acc = 0.0;
                            for (t, k) in term.kx.iter().enumerate() {
                                let x = x0 + t as isize;
                                if x >= 0 && (x as usize) < w {
                                    acc += k * plane[y * w + x as usize];
                                }
                            }
                            rows[y * gw + j] = acc;
                        }
                    }
                    for i in 0..gh {
                        let y0 = origin(i);
                        for j in 0..gw {
                            let mut acc = 0.0;
                            for (t, k) in term.ky.iter().enumerate() {
                                let y = y0 + t as isize;
                                if y >= 0 && (y as usize) < h {
                                    acc += k * rows[y as usize * gw + j];
                                }
                            }
                            out[i * gw + j] += term.weight * acc;
                        }
                    }
                }
                out
            })
            .collect()
    }

    fn apply(&self, image: &[f64], c: usize, (h, w): (usize, usize)) -> Tensor {
        let s = self.stride;
        let (gh, gw) = (h / s, w / s);
        let mut phi: Vec<Vec<f64>> = Vec::new();
        for k in 0..c {
            phi.extend(self.responses(&image[k * h * w..(k + 1) * h * w], (h, w)));
        }
        let (hidden, inputs) = (self.p1.shape()[0], self.p1.shape()[1]);
        let channels = self.p2.shape()[0];
        let mut out = vec![0.0; channels * gh * gw];
        let mut z = vec![0.0; hidden];
        for px in 0..gh * gw {
            for (u, zu) in z.iter_mut().enumerate() {
                let row = &self.p1.data()[u * inputs..(u + 1) * inputs];
                let pre =
                    self.b1.data()[u] + row.iter().zip(&phi).map(|(p, f)| p * f[px]).sum::<f64>();
                *zu = pre.max(0.0);
            }
            for o in 0..channels {
                let row = &self.p2.data()[o * hidden..(o + 1) * hidden];
                out[o * gh * gw + px] =
                    self.b2.data()[o] + row.iter().zip(&z).map(|(p, v)| p * v).sum::<f64>();
            }
        }
        Tensor::from_parts(vec![channels, gh, gw], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toynet::scene::{generate_scene, DatasetSpec, Lighting};

    fn blank_scene(h: usize, w: usize) -> Scene {
        Scene {
            rgb: Tensor::zeros(&[1, h, w]),
            tir: Tensor::zeros(&[1, h, w]),
            annotations: vec![],
            lighting: Lighting::Day,
            seed: 0,
        }
    }

    #[test]
    fn deterministic() {
        let spec = DatasetSpec::default();
        let scene = generate_scene(&spec, 3).unwrap();
        let a = Teacher::new(TeacherSpec::default(), 1).unwrap();
        let b = Teacher::new(TeacherSpec::default(), 1).unwrap();
        assert_eq!(a.state_bytes(), b.state_bytes());
        assert_eq!(a.features(&scene).unwrap(), b.features(&scene).unwrap());
    }

    #[test]
    fn level_shapes_for_64() {
        let t = Teacher::new(TeacherSpec::default(), 1).unwrap();
        let f = t.features(&blank_scene(64, 64)).unwrap();
        assert_eq!(f.rgb[0].shape(), &[8, 16, 16]);
        assert_eq!(f.rgb[1].shape(), &[8, 8, 8]);
        assert_eq!(f.strides, vec![4.0, 8.0]);
        assert_eq!(t.level_shapes((64, 64)), vec![(16, 16), (8, 8)]);
    }

    #[test]
    fn zero_images_give_constant_channels() {
        let t = Teacher::new(TeacherSpec::default(), 1).unwrap();
        let f = t.features(&blank_scene(32, 32)).unwrap();
        for level in f.rgb.iter().chain(&f.tir).chain(&f.fused) {
            let (c, h, w) = level.chw().unwrap();
            for k in 0..c {
                let plane = &level.data()[k * h * w..(k + 1) * h * w];
                assert!(plane.iter().all(|&v| v == plane[0]));
            }
        }
    }

    #[test]
    fn fused_is_modal_mean() {
        let t = Teacher::new(TeacherSpec::default(), 1).unwrap();
        let f = t
            .features(&generate_scene(&DatasetSpec::default(), 9).unwrap())
            .unwrap();
        for l in 0..2 {
            for ((r, th), fu) in f.rgb[l]
                .data()
                .iter()
                .zip(f.tir[l].data())
                .zip(f.fused[l].data())
            {
                assert_eq!(*fu, 0.5 * (r + th));
            }
        }
    }

    #[test]
    fn gaussian_taps_have_unit_mass() {
        let g = taps(3.0, 9, false);
        assert_eq!(g.len(), 18);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let d = taps(3.0, 9, true);
        assert!(d.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn rejects_mismatched_channels() {
        let t = Teacher::new(TeacherSpec::default(), 2).unwrap();
        assert!(t.features(&blank_scene(32, 32)).is_err());
    }
}
