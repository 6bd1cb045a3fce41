//! The landmark CNN: a plain strided conv stack regressing `R` landmark
//! coordinates, min-max scaled per image and per axis.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{stack_images, Image, LandmarkSet};
use crate::params::{bind, normal_init, Params};
use crate::rng::CounterRng;
use crate::tensor::Tensor;

const KERNEL: usize = 3;
const STRIDE: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct LocalizerConfig {
    /// Square input resolution.
    pub input_size: usize,
    pub channels: usize,
    /// Output channels of each conv block.
    pub widths: Vec<usize>,
    /// Number of landmarks `R`.
    pub landmarks: usize,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        LocalizerConfig {
            input_size: 112,
            channels: 1,
            widths: vec![8, 16, 32, 32],
            landmarks: 196,
        }
    }
}

impl LocalizerConfig {
    fn spatial_sizes(&self) -> Result<Vec<usize>> {
        let mut sizes = vec![self.input_size];
        for _ in &self.widths {
            let s = *sizes.last().unwrap();
            if s < KERNEL {
                return Err(Error::Config(format!(
                    "input size {} too small for {} conv blocks",
                    self.input_size,
                    self.widths.len()
                )));
            }
            sizes.push((s - KERNEL) / STRIDE + 1);
        }
        Ok(sizes)
    }

    fn pool_grid(&self) -> Result<(usize, usize)> {
        let s = *self.spatial_sizes()?.last().unwrap();
        Ok((s, s.min(2)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
}

/// Parameters of the landmark CNN.
#[derive(Clone, Debug, PartialEq)]
pub struct Localizer {
    pub config: LocalizerConfig,
    pub convs: Vec<ConvLayer>,
    /// `[features × 2R]`
    pub head_w: Tensor,
    /// `[2R]`, initialised to a regular grid layout.
    pub head_b: Tensor,
    frozen: bool,
}

pub struct LocalizerVars {
    convs: Vec<(Var, Var)>,
    head_w: Var,
    head_b: Var,
}

impl LocalizerVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.convs.iter().flat_map(|(k, b)| [*k, *b]).collect();
        v.extend([self.head_w, self.head_b]);
        v
    }
}

impl Localizer {
    pub fn new(config: LocalizerConfig, seed: u64) -> Result<Self> {
        if config.landmarks < 2 {
            return Err(Error::Config(format!(
                "min-max scaling needs at least 2 landmarks, got {}",
                config.landmarks
            )));
        }
        let (last, pool) = config.pool_grid()?;
        let _ = last;
        let mut rng = CounterRng::from_parts(&[seed, 0x10CA]);
        let mut convs = Vec::new();
        let mut cin = config.channels;
        for &cout in &config.widths {
            let fan_in = (cin * KERNEL * KERNEL) as f32;
            convs.push(ConvLayer {
                kernel: normal_init(&[cout, cin, KERNEL, KERNEL], (2.0 / fan_in).sqrt(), &mut rng),
                bias: Tensor::zeros(&[cout]),
            });
            cin = cout;
        }
        let features = cin * pool * pool;
        let r = config.landmarks;
        let head_w = normal_init(&[features, 2 * r], 1e-3, &mut rng);
        let side = (r as f64).sqrt().ceil() as usize;
        let head_b = Tensor::from_fn(&[2 * r], |i| {
            let l = i / 2;
            let cell = if i % 2 == 0 { l % side } else { l / side };
            (cell as f32 + 0.5) / side as f32
        });
        Ok(Localizer {
            config,
            convs,
            head_w,
            head_b,
            frozen: false,
        })
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Marks the parameters as fixed: subsequent tapes record them as constants.
    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn bind(&self, tape: &mut Tape) -> LocalizerVars {
        let train = !self.frozen;
        LocalizerVars {
            convs: self
                .convs
                .iter()
                .map(|c| (bind(tape, &c.kernel, train), bind(tape, &c.bias, train)))
                .collect(),
            head_w: bind(tape, &self.head_w, train),
            head_b: bind(tape, &self.head_b, train),
        }
    }

    fn pool_matrix(size: usize, grid: usize) -> Tensor {
        let mut m = Tensor::zeros(&[size * size, grid * grid]);
        let bins: Vec<(usize, usize)> = (0..grid)
            .map(|b| (b * size / grid, ((b + 1) * size).div_ceil(grid)))
            .collect();
        for (by, &(y0, y1)) in bins.iter().enumerate() {
            for (bx, &(x0, x1)) in bins.iter().enumerate() {
                let inv = 1.0 / ((y1 - y0) * (x1 - x0)) as f32;
                for y in y0..y1 {
                    for x in x0..x1 {
                        m.data_mut()[(y * size + x) * grid * grid + by * grid + bx] = inv;
                    }
                }
            }
        }
        m
    }

    /// `images[N×C×H×W]` → min-max scaled landmarks `[N×R×2]`.
    pub fn forward(&self, tape: &mut Tape, vars: &LocalizerVars, images: Var) -> Result<Var> {
        let shape = tape.value(images).shape().to_vec();
        let s = self.config.input_size;
        if shape.len() != 4 || shape[1] != self.config.channels || shape[2] != s || shape[3] != s {
            return Err(Error::dim(
                "localizer",
                format!("expected [N, {}, {s}, {s}], got {shape:?}", self.config.channels),
            ));
        }
        let n = shape[0];
        let mut x = images;
        for (k, b) in &vars.convs {
            x = tape.conv2d(x, *k, Some(*b), STRIDE)?;
            x = tape.relu(x);
        }
        let (last, grid) = self.config.pool_grid()?;
        let c = *self.config.widths.last().unwrap_or(&self.config.channels);
        let flat = tape.reshape(x, &[n * c, last * last])?;
        let pool = tape.constant_owned(Self::pool_matrix(last, grid));
        let pooled = tape.matmul(flat, pool)?;
        let feats = tape.reshape(pooled, &[n, c * grid * grid])?;
        let raw = tape.linear(feats, vars.head_w, Some(vars.head_b))?;
        let raw = tape.reshape(raw, &[n, self.config.landmarks, 2])?;
        tape.min_max_scale(raw)
    }

    /// Landmarks for a batch of images, outside of any training tape.
    pub fn predict_batch(&self, images: &[&Image]) -> Result<Vec<LandmarkSet>> {
        let mut tape = Tape::new();
        let frozen = self.clone().freeze();
        let vars = frozen.bind(&mut tape);
        let x = tape.constant_owned(stack_images(images)?);
        let out = frozen.forward(&mut tape, &vars, x)?;
        let r = self.config.landmarks;
        let t = tape.value(out);
        (0..images.len())
            .map(|i| {
                let rows = t.data()[i * r * 2..(i + 1) * r * 2].to_vec();
                LandmarkSet::new(Tensor::new(&[r, 2], rows)?)
            })
            .collect()
    }

    pub fn predict(&self, image: &Image) -> Result<LandmarkSet> {
        Ok(self.predict_batch(&[image])?.remove(0))
    }
}

impl Params for Localizer {
    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut v = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            v.push((format!("conv{i}.kernel"), &c.kernel));
            v.push((format!("conv{i}.bias"), &c.bias));
        }
        v.push(("head.weight".into(), &self.head_w));
        v.push(("head.bias".into(), &self.head_b));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = Vec::new();
        for c in self.convs.iter_mut() {
            v.push(&mut c.kernel);
            v.push(&mut c.bias);
        }
        v.push(&mut self.head_w);
        v.push(&mut self.head_b);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> LocalizerConfig {
        LocalizerConfig {
            input_size: 32,
            channels: 1,
            widths: vec![4, 8, 8],
            landmarks: 16,
        }
    }

    fn noise_image(size: usize, seed: u64) -> Image {
        let mut rng = CounterRng::new(seed);
        Image::new(1, size, size, (0..size * size).map(|_| rng.uniform() as f32).collect()).unwrap()
    }

    #[test]
    fn output_is_min_max_scaled() {
        let loc = Localizer::new(small(), 1).unwrap();
        let lm = loc.predict(&noise_image(32, 5)).unwrap();
        assert_eq!(lm.len(), 16);
        for axis in 0..2 {
            let vals: Vec<f32> = lm.points().map(|p| p[axis]).collect();
            assert_eq!(vals.iter().cloned().fold(f32::INFINITY, f32::min), 0.0);
            assert_eq!(vals.iter().cloned().fold(f32::NEG_INFINITY, f32::max), 1.0);
        }
    }

    #[test]
    fn prediction_is_deterministic() {
        let loc = Localizer::new(small(), 1).unwrap();
        let img = noise_image(32, 9);
        let a = loc.predict(&img).unwrap();
        let b = loc.predict(&img).unwrap();
        assert!(a.tensor().bit_eq(b.tensor()));
    }

    #[test]
    fn default_has_196_landmarks() {
        assert_eq!(LocalizerConfig::default().landmarks, 196);
        let loc = Localizer::new(LocalizerConfig::default(), 0).unwrap();
        assert!(loc.num_params() < 100_000);
    }

    #[test]
    fn rejects_single_landmark_and_wrong_input() {
        let cfg = LocalizerConfig {
            landmarks: 1,
            ..small()
        };
        assert!(matches!(Localizer::new(cfg, 0), Err(Error::Config(_))));
        let loc = Localizer::new(small(), 0).unwrap();
        assert!(loc.predict(&noise_image(30, 1)).is_err());
    }

    #[test]
    fn frozen_localizer_stays_off_the_tape() {
        let loc = Localizer::new(small(), 3).unwrap().freeze();
        assert!(loc.clone().freeze().is_frozen());
        let mut tape = Tape::new();
        let vars = loc.bind(&mut tape);
        assert!(vars.all().iter().all(|v| !tape.requires_grad(*v)));
    }
}
