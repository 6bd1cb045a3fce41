//! The patch transformer: linear patch projection, class token, slot-bound
//! positional embedding and pre-norm encoder blocks.
//!
//! One network serves both patch sources. Landmark patches are bilinear
//! samples centred on predicted coordinates; grid patches are the
//! non-overlapping integer tiling of the canvas.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{grid_patches, stack_images, Image, LandmarkSet, PatchStack};
use crate::params::{bind, normal_init, Params};
use crate::rng::CounterRng;
use crate::tensor::Tensor;

const LN_EPS: f32 = 1e-5;
const INIT_STD: f32 = 0.02;
/// Fixed input normalization applied to every patch pixel before projection.
pub const PIXEL_MEAN: f32 = 0.5;
pub const PIXEL_STD: f32 = 0.25;
const PATCH_INIT_GAIN: f32 = 1.0;

/// LeCun-normal scale for a linear map with `fan_in` inputs.
fn fan_in_std(fan_in: usize) -> f32 {
    1.0 / (fan_in as f32).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct VitConfig {
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Largest patch count a sequence may carry.
    pub max_patches: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig {
            channels: 1,
            patch: 8,
            dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            max_patches: 196,
        }
    }
}

impl VitConfig {
    pub fn patch_width(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible into {} heads",
                self.dim, self.heads
            )));
        }
        if self.patch == 0 || self.channels == 0 || self.mlp_ratio == 0 || self.max_patches == 0 {
            return Err(Error::Config(format!("degenerate transformer config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    /// `[d × 3d]`, columns laid out q, k, v.
    pub qkv_w: Tensor,
    pub qkv_b: Tensor,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
}

impl Block {
    fn new(d: usize, hidden: usize, rng: &mut CounterRng) -> Self {
        Block {
            ln1_g: Tensor::full(&[d], 1.0),
            ln1_b: Tensor::zeros(&[d]),
            qkv_w: normal_init(&[d, 3 * d], fan_in_std(d), rng),
            qkv_b: Tensor::zeros(&[3 * d]),
            proj_w: normal_init(&[d, d], fan_in_std(d), rng),
            proj_b: Tensor::zeros(&[d]),
            ln2_g: Tensor::full(&[d], 1.0),
            ln2_b: Tensor::zeros(&[d]),
            fc1_w: normal_init(&[d, hidden], fan_in_std(d), rng),
            fc1_b: Tensor::zeros(&[hidden]),
            fc2_w: normal_init(&[hidden, d], fan_in_std(hidden), rng),
            fc2_b: Tensor::zeros(&[d]),
        }
    }

    fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.ln1_g, &self.ln1_b, &self.qkv_w, &self.qkv_b, &self.proj_w, &self.proj_b,
            &self.ln2_g, &self.ln2_b, &self.fc1_w, &self.fc1_b, &self.fc2_w, &self.fc2_b,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.ln1_g, &mut self.ln1_b, &mut self.qkv_w, &mut self.qkv_b,
            &mut self.proj_w, &mut self.proj_b, &mut self.ln2_g, &mut self.ln2_b,
            &mut self.fc1_w, &mut self.fc1_b, &mut self.fc2_w, &mut self.fc2_b,
        ]
    }
}

const BLOCK_NAMES: [&str; 12] = [
    "ln1.gamma", "ln1.beta", "qkv.weight", "qkv.bias", "proj.weight", "proj.bias",
    "ln2.gamma", "ln2.beta", "fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias",
];

/// Transformer parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Vit {
    pub config: VitConfig,
    /// `[C·P·P × d]`, no bias.
    pub patch_proj: Tensor,
    /// `[max_patches+1 × d]`; row 0 belongs to the class token.
    pub pos_emb: Tensor,
    pub cls: Tensor,
    pub blocks: Vec<Block>,
    pub norm_g: Tensor,
    pub norm_b: Tensor,
}

pub struct VitVars {
    patch_proj: Var,
    pos_emb: Var,
    cls: Var,
    blocks: Vec<[Var; 12]>,
    norm_g: Var,
    norm_b: Var,
}

impl VitVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.patch_proj, self.pos_emb, self.cls];
        for b in &self.blocks {
            v.extend_from_slice(b);
        }
        v.extend([self.norm_g, self.norm_b]);
        v
    }

    pub fn pos_emb(&self) -> Var {
        self.pos_emb
    }
}

impl Vit {
    pub fn new(config: VitConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = CounterRng::from_parts(&[seed, 0x717]);
        let d = config.dim;
        let fan_in = config.patch_width() as f32;
        let patch_proj = normal_init(&[config.patch_width(), d], PATCH_INIT_GAIN / fan_in.sqrt(), &mut rng);
        let pos_emb = normal_init(&[config.max_patches + 1, d], INIT_STD, &mut rng);
        let cls = normal_init(&[d], INIT_STD, &mut rng);
        let blocks = (0..config.depth)
            .map(|_| Block::new(d, d * config.mlp_ratio, &mut rng))
            .collect();
        Ok(Vit {
            patch_proj,
            pos_emb,
            cls,
            blocks,
            norm_g: Tensor::full(&[d], 1.0),
            norm_b: Tensor::zeros(&[d]),
            config,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> VitVars {
        VitVars {
            patch_proj: bind(tape, &self.patch_proj, trainable),
            pos_emb: bind(tape, &self.pos_emb, trainable),
            cls: bind(tape, &self.cls, trainable),
            blocks: self
                .blocks
                .iter()
                .map(|b| b.tensors().map(|t| bind(tape, t, trainable)))
                .collect(),
            norm_g: bind(tape, &self.norm_g, trainable),
            norm_b: bind(tape, &self.norm_b, trainable),
        }
    }

    /// Depth index of each parameter for layer-wise learning rates, aligned
    /// with [`Params::named`]: embeddings at 0, block `i` at `i+1`, final norm
    /// at `depth+1`.
    pub fn depth_indices(&self) -> Vec<usize> {
        let mut v = vec![0, 0, 0];
        for i in 0..self.blocks.len() {
            v.extend(std::iter::repeat(i + 1).take(12));
        }
        v.extend([self.blocks.len() + 1; 2]);
        v
    }

    /// Projects flattened patches `[seqs·r × C·P·P]` and assembles
    /// `[seqs·(r+1) × d]` tokens.
    pub fn tokenize_var(&self, tape: &mut Tape, vars: &VitVars, patches: Var, seqs: usize) -> Result<Var> {
        let shape = tape.value(patches).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.config.patch_width() {
            return Err(Error::dim(
                "tokenize",
                format!("patches {shape:?} vs projection width {}", self.config.patch_width()),
            ));
        }
        if seqs == 0 || shape[0] % seqs != 0 || shape[0] / seqs > self.config.max_patches {
            return Err(Error::dim(
                "tokenize",
                format!(
                    "{} patches over {seqs} sequences exceeds {} slots",
                    shape[0], self.config.max_patches
                ),
            ));
        }
        let shift = tape.constant_owned(Tensor::full(&[shape[1]], -PIXEL_MEAN));
        let centred = tape.add_row_bias(patches, shift)?;
        let normalized = tape.scale(centred, 1.0 / PIXEL_STD);
        let proj = tape.matmul(normalized, vars.patch_proj)?;
        tape.assemble_tokens(proj, vars.cls, vars.pos_emb, seqs)
    }

    /// Runs the encoder over `seqs` equal-length token sequences and returns
    /// the class rows `[seqs × d]`.
    pub fn encode_var(&self, tape: &mut Tape, vars: &VitVars, tokens: Var, seqs: usize) -> Result<Var> {
        let rows = tape.value(tokens).shape()[0];
        if seqs == 0 || rows % seqs != 0 {
            return Err(Error::dim("encode", format!("{rows} tokens over {seqs} sequences")));
        }
        let len = rows / seqs;
        let mut x = tokens;
        for b in &vars.blocks {
            let [ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b, ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b] = *b;
            let h = tape.layer_norm(x, ln1_g, ln1_b, LN_EPS)?;
            let qkv = tape.linear(h, qkv_w, Some(qkv_b))?;
            let att = tape.attention(qkv, seqs, self.config.heads)?;
            let att = tape.linear(att, proj_w, Some(proj_b))?;
            x = tape.add(x, att)?;
            let h = tape.layer_norm(x, ln2_g, ln2_b, LN_EPS)?;
            let h = tape.linear(h, fc1_w, Some(fc1_b))?;
            let h = tape.gelu(h);
            let h = tape.linear(h, fc2_w, Some(fc2_b))?;
            x = tape.add(x, h)?;
        }
        let cls_rows: Vec<usize> = (0..seqs).map(|s| s * len).collect();
        let cls = tape.gather_rows(x, &cls_rows)?;
        tape.layer_norm(cls, vars.norm_g, vars.norm_b, LN_EPS)
    }

    /// Landmark path: `images[S×C×H×W]`, `coords[S×R×2]` → `[S × d]`.
    pub fn forward_part_var(&self, tape: &mut Tape, vars: &VitVars, images: Var, coords: Var) -> Result<Var> {
        let seqs = tape.value(images).shape()[0];
        let patches = tape.sample_patches(images, coords, self.config.patch)?;
        let tokens = self.tokenize_var(tape, vars, patches, seqs)?;
        self.encode_var(tape, vars, tokens, seqs)
    }

    /// Grid path over equally sized images → `[S × d]`.
    pub fn forward_grid_var(&self, tape: &mut Tape, vars: &VitVars, images: &[&Image]) -> Result<Var> {
        let patches = self.grid_patch_rows(images, None)?;
        self.forward_grid_rows(tape, vars, patches, images.len())
    }

    /// Flattened grid patches for each image, optionally reordered per image.
    pub fn grid_patch_rows(&self, images: &[&Image], orders: Option<&[Vec<usize>]>) -> Result<Tensor> {
        let w = self.config.patch_width();
        let mut data = Vec::new();
        let mut rows = 0;
        for (i, img) in images.iter().enumerate() {
            let stack = grid_patches(img, self.config.patch)?.flattened();
            let r = stack.shape()[0];
            match orders.map(|o| &o[i]) {
                Some(order) => {
                    for &j in order {
                        if j >= r {
                            return Err(Error::dim("grid order", format!("index {j} of {r} patches")));
                        }
                        data.extend_from_slice(stack.row(j));
                    }
                    rows += order.len();
                }
                None => {
                    data.extend_from_slice(stack.data());
                    rows += r;
                }
            }
        }
        Tensor::new(&[rows, w], data)
    }

    pub fn forward_grid_rows(&self, tape: &mut Tape, vars: &VitVars, patches: Tensor, seqs: usize) -> Result<Var> {
        let patches = tape.constant_owned(patches);
        let tokens = self.tokenize_var(tape, vars, patches, seqs)?;
        self.encode_var(tape, vars, tokens, seqs)
    }

    /// Tokens for a single patch stack, `[(R+1) × d]`.
    pub fn tokenize(&self, patches: &PatchStack) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let p = tape.constant_owned(patches.flattened());
        let t = self.tokenize_var(&mut tape, &vars, p, 1)?;
        Ok(tape.value(t).clone())
    }

    /// Class-token embedding `[d]` for one token sequence.
    pub fn encode(&self, tokens: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let t = tape.constant(tokens);
        let e = self.encode_var(&mut tape, &vars, t, 1)?;
        tape.value(e).clone().reshape(&[self.config.dim])
    }

    pub fn forward_part(&self, img: &Image, lm: &LandmarkSet) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant_owned(stack_images(&[img])?);
        let c = tape.constant_owned(lm.tensor().clone().reshape(&[1, lm.len(), 2])?);
        let e = self.forward_part_var(&mut tape, &vars, x, c)?;
        tape.value(e).clone().reshape(&[self.config.dim])
    }

    pub fn forward_grid(&self, img: &Image) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let e = self.forward_grid_var(&mut tape, &vars, &[img])?;
        tape.value(e).clone().reshape(&[self.config.dim])
    }
}

impl Params for Vit {
    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![
            ("patch_proj".to_string(), &self.patch_proj),
            ("pos_emb".to_string(), &self.pos_emb),
            ("cls".to_string(), &self.cls),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in BLOCK_NAMES.iter().zip(b.tensors()) {
                v.push((format!("block{i}.{name}"), t));
            }
        }
        v.push(("norm.gamma".into(), &self.norm_g));
        v.push(("norm.beta".into(), &self.norm_b));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.patch_proj, &mut self.pos_emb, &mut self.cls];
        for b in self.blocks.iter_mut() {
            v.extend(b.tensors_mut());
        }
        v.push(&mut self.norm_g);
        v.push(&mut self.norm_b);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{extract_patches, grid_centers};

    fn cfg() -> VitConfig {
        VitConfig {
            channels: 1,
            patch: 4,
            dim: 16,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            max_patches: 16,
        }
    }

    fn image(size: usize, seed: u64) -> Image {
        let mut rng = CounterRng::new(seed);
        Image::new(1, size, size, (0..size * size).map(|_| rng.uniform() as f32).collect()).unwrap()
    }

    fn landmarks(r: usize, seed: u64) -> LandmarkSet {
        let mut rng = CounterRng::new(seed);
        LandmarkSet::new(Tensor::from_fn(&[r, 2], |_| rng.uniform() as f32)).unwrap()
    }

    #[test]
    fn tokenize_prepends_class_token() {
        let vit = Vit::new(cfg(), 1).unwrap();
        let stack = extract_patches(&image(16, 2), &landmarks(5, 3), 4).unwrap();
        assert_eq!(vit.tokenize(&stack).unwrap().shape(), &[6, 16]);
    }

    #[test]
    fn mean_patches_and_zero_positions_give_class_row_then_zeros() {
        let mut vit = Vit::new(cfg(), 1).unwrap();
        vit.pos_emb = Tensor::zeros(vit.pos_emb.shape());
        // Patches at the normalization mean project to the zero token.
        let stack = PatchStack {
            patches: Tensor::full(&[3, 1, 4, 4], PIXEL_MEAN),
            indices: vec![0, 1, 2],
        };
        let t = vit.tokenize(&stack).unwrap();
        assert_eq!(t.row(0), vit.cls.data());
        assert!(t.data()[16..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn swapping_patches_swaps_tokens_without_positions() {
        let mut vit = Vit::new(cfg(), 1).unwrap();
        vit.pos_emb = Tensor::zeros(vit.pos_emb.shape());
        let img = image(16, 4);
        let lm = landmarks(4, 5);
        let swapped = lm.select(&[2, 1, 0, 3]).unwrap();
        let a = vit.tokenize(&extract_patches(&img, &lm, 4).unwrap()).unwrap();
        let b = vit.tokenize(&extract_patches(&img, &swapped, 4).unwrap()).unwrap();
        assert_eq!(a.row(1), b.row(3));
        assert_eq!(a.row(3), b.row(1));
        assert_eq!(a.row(2), b.row(2));
    }

    #[test]
    fn class_only_sequence_is_finite() {
        let vit = Vit::new(cfg(), 1).unwrap();
        let mut tokens = Tensor::zeros(&[1, 16]);
        tokens.data_mut().copy_from_slice(vit.cls.data());
        let a = vit.encode(&tokens).unwrap();
        assert!(a.is_finite());
        assert!(a.bit_eq(&vit.encode(&tokens).unwrap()));
    }

    #[test]
    fn variable_length_sequences() {
        let vit = Vit::new(cfg(), 1).unwrap();
        let img = image(16, 7);
        for r in [1, 5, 16] {
            assert_eq!(vit.forward_part(&img, &landmarks(r, r as u64)).unwrap().shape(), &[16]);
        }
        assert!(vit.forward_part(&img, &landmarks(17, 1)).is_err());
    }

    #[test]
    fn grid_centres_reproduce_grid_path() {
        let vit = Vit::new(cfg(), 9).unwrap();
        let img = image(16, 8);
        let part = vit.forward_part(&img, &grid_centers(16, 4).unwrap()).unwrap();
        let grid = vit.forward_grid(&img).unwrap();
        assert!(part.max_abs_diff(&grid) < 1e-5);
    }

    #[test]
    fn grid_rejects_indivisible_canvas() {
        let vit = Vit::new(cfg(), 9).unwrap();
        assert!(matches!(vit.forward_grid(&image(18, 1)), Err(Error::Config(_))));
    }

    #[test]
    fn depth_indices_align_with_params() {
        let vit = Vit::new(cfg(), 1).unwrap();
        let idx = vit.depth_indices();
        assert_eq!(idx.len(), vit.named().len());
        assert_eq!(*idx.last().unwrap(), 3);
        assert!(idx.windows(2).all(|w| w[0] <= w[1]));
    }
}
