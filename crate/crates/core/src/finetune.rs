//! Supervised adaptation with an additive cosine margin.
//!
//! Four regimes share one loop: the localizer frozen, trained jointly,
//! trained under a soft-label pull towards a fixed reference localizer, or
//! dropped in favour of grid patches.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{hflip, stack_images, Image};
use crate::localizer::{Localizer, LocalizerVars};
use crate::optim::{cosine_schedule, AdamW, AdamWConfig, ParamHyper};
use crate::params::{bind, collect_grads, normal_init, Params};
use crate::rng::{derive_seed, CounterRng};
use crate::tensor::Tensor;
use crate::vit::{Vit, VitVars};

const NORM_EPS: f32 = 1e-6;

/// `base · decay^(total − index)`.
pub fn layerwise_lr(base: f64, decay: f64, index: usize, total: usize) -> f64 {
    debug_assert!(index <= total);
    base * decay.powi((total - index) as i32)
}

/// Class prototypes for the margin classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct CosFaceHead {
    /// `[classes × d]`
    pub weight: Tensor,
    pub scale: f32,
    pub margin: f32,
}

impl CosFaceHead {
    pub fn new(classes: usize, dim: usize, scale: f32, margin: f32, seed: u64) -> Result<Self> {
        if !(scale > 0.0) || !(0.0..1.0).contains(&margin) {
            return Err(Error::Config(format!("cosface scale {scale} / margin {margin} out of range")));
        }
        if classes == 0 || dim == 0 {
            return Err(Error::Config("cosface head needs classes and a dimension".into()));
        }
        let mut rng = CounterRng::from_parts(&[seed, 0xC05]);
        Ok(CosFaceHead {
            weight: normal_init(&[classes, dim], 1.0 / (dim as f32).sqrt(), &mut rng),
            scale,
            margin,
        })
    }

    pub fn classes(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Margin logits: `s·cos θ_j` off target, `s·(cos θ_y − m)` on target.
pub fn cosface_logits(tape: &mut Tape, emb: Var, weight: Var, labels: &[usize], scale: f32, margin: f32) -> Result<Var> {
    let classes = tape.value(weight).shape()[0];
    let rows = tape.value(emb).shape()[0];
    if labels.len() != rows {
        return Err(Error::dim("cosface", format!("{rows} embeddings vs {} labels", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Parameter(format!("label {bad} outside {classes} classes")));
    }
    let norms_small = tape
        .value(emb)
        .data()
        .chunks(tape.value(emb).shape()[1].max(1))
        .any(|r| r.iter().map(|v| v * v).sum::<f32>().sqrt() < NORM_EPS);
    if norms_small {
        log::warn!("near-zero embedding in cosface input; normalization is epsilon-guarded");
    }
    let e = tape.l2_normalize_rows(emb, NORM_EPS);
    let w = tape.l2_normalize_rows(weight, NORM_EPS);
    let cos = tape.matmul_t(e, w)?;
    let logits = tape.scale(cos, scale);
    if margin == 0.0 {
        return Ok(logits);
    }
    let mut shift = Tensor::zeros(&[rows, classes]);
    for (i, &y) in labels.iter().enumerate() {
        shift.data_mut()[i * classes + y] = -scale * margin;
    }
    let shift = tape.constant_owned(shift);
    tape.add(logits, shift)
}

/// Mean cross-entropy of the margin logits against `labels`.
pub fn cosface_loss(tape: &mut Tape, emb: Var, weight: Var, labels: &[usize], scale: f32, margin: f32) -> Result<Var> {
    let logits = cosface_logits(tape, emb, weight, labels, scale, margin)?;
    let classes = tape.value(weight).shape()[0];
    let mut onehot = Tensor::zeros(&[labels.len(), classes]);
    for (i, &y) in labels.iter().enumerate() {
        onehot.data_mut()[i * classes + y] = 1.0;
    }
    tape.soft_cross_entropy(logits, &onehot, 1.0)
}

/// Mean per-landmark Euclidean distance between trained landmarks `r` and a
/// detached reference `r_hat`, both `[.. × 2]`.
pub fn landmark_reg(tape: &mut Tape, r_hat: &Tensor, r: Var) -> Result<Var> {
    let shape = tape.value(r).shape().to_vec();
    if r_hat.numel() != tape.value(r).numel() || shape.last() != Some(&2) {
        return Err(Error::dim(
            "landmark_reg",
            format!("reference {:?} vs landmarks {shape:?}", r_hat.shape()),
        ));
    }
    let rows = tape.value(r).numel() / 2;
    let r2 = tape.reshape(r, &[rows, 2])?;
    let reference = tape.constant_owned(r_hat.clone().reshape(&[rows, 2])?);
    tape.row_distance_mean(r2, reference)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinetuneMode {
    /// (a) localizer frozen, transformer trained.
    FixedLandmark,
    /// (b) everything trained.
    TrainableLandmark,
    /// (c) everything trained, landmarks pulled towards a reference localizer.
    SoftLabel,
    /// Localizer discarded; grid patches.
    LandmarkToGrid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    pub beta: f32,
    pub lr: f32,
    pub min_lr: f32,
    pub layer_decay: f32,
    pub weight_decay: f32,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub scale: f32,
    pub margin: f32,
    pub flip_prob: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            mode: FinetuneMode::FixedLandmark,
            beta: 0.1,
            lr: 1e-3,
            min_lr: 1e-6,
            layer_decay: 0.58,
            weight_decay: 0.05,
            epochs: 20,
            warmup_epochs: 5,
            batch_size: 32,
            scale: 16.0,
            margin: 0.2,
            flip_prob: 0.5,
        }
    }
}

impl FinetuneConfig {
    fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!("beta {} is negative", self.beta)));
        }
        if !(self.layer_decay > 0.0 && self.layer_decay <= 1.0) {
            return Err(Error::Config(format!("layer decay {} outside (0,1]", self.layer_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Localizer (optional), transformer and margin head.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceModel {
    pub localizer: Option<Localizer>,
    pub vit: Vit,
    pub head: CosFaceHead,
}

impl FaceModel {
    /// Unit-norm embeddings `[N × d]` without augmentation.
    pub fn embed(&self, images: &[&Image]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vit_vars = self.vit.bind(&mut tape, false);
        let emb = match &self.localizer {
            Some(loc) => {
                let frozen = loc.clone().freeze();
                let lv = frozen.bind(&mut tape);
                let x = tape.constant_owned(stack_images(images)?);
                let coords = frozen.forward(&mut tape, &lv, x)?;
                self.vit.forward_part_var(&mut tape, &vit_vars, x, coords)?
            }
            None => self.vit.forward_grid_var(&mut tape, &vit_vars, images)?,
        };
        let e = tape.l2_normalize_rows(emb, NORM_EPS);
        Ok(tape.value(e).clone())
    }

    /// Depth index per parameter, aligned with [`Params::named`], and the total.
    pub fn depth_indices(&self) -> (Vec<usize>, usize) {
        let total = self.vit.config.depth + 2;
        let mut v = Vec::new();
        if let Some(loc) = &self.localizer {
            v.extend(std::iter::repeat(0).take(loc.named().len()));
        }
        v.extend(self.vit.depth_indices());
        v.push(total);
        (v, total)
    }
}

impl Params for FaceModel {
    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut v = Vec::new();
        if let Some(loc) = &self.localizer {
            v.extend(loc.named().into_iter().map(|(n, t)| (format!("localizer.{n}"), t)));
        }
        v.extend(self.vit.named().into_iter().map(|(n, t)| (format!("vit.{n}"), t)));
        v.push(("cosface.weight".into(), &self.head.weight));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = Vec::new();
        if let Some(loc) = &mut self.localizer {
            v.extend(loc.tensors_mut());
        }
        v.extend(self.vit.tensors_mut());
        v.push(&mut self.head.weight);
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneStats {
    pub step: u64,
    pub loss: f32,
    pub id_loss: f32,
    pub reg: f32,
    pub lr: f32,
}

/// Training state for one finetuning run.
#[derive(Clone, Debug)]
pub struct Finetuner {
    pub config: FinetuneConfig,
    pub model: FaceModel,
    /// Fixed reference localizer for the soft-label mode.
    pub reference: Option<Localizer>,
    optimizer: AdamW,
    pub step: u64,
    total_steps: u64,
    warmup_steps: u64,
}

struct Bound {
    loc: Option<LocalizerVars>,
    vit: VitVars,
    head: Var,
}

impl Finetuner {
    /// `steps_per_epoch` sizes the warmup and cosine schedule.
    pub fn new(
        config: FinetuneConfig,
        mut model: FaceModel,
        reference: Option<Localizer>,
        steps_per_epoch: usize,
    ) -> Result<Self> {
        config.validate()?;
        match config.mode {
            FinetuneMode::SoftLabel if reference.is_none() => {
                return Err(Error::Config("soft-label finetuning needs a reference localizer".into()))
            }
            FinetuneMode::LandmarkToGrid => model.localizer = None,
            FinetuneMode::FixedLandmark | FinetuneMode::TrainableLandmark | FinetuneMode::SoftLabel => {
                let Some(loc) = model.localizer.as_mut() else {
                    return Err(Error::Config("landmark finetuning needs a localizer".into()));
                };
                loc.set_frozen(config.mode == FinetuneMode::FixedLandmark);
            }
        }
        let reference = reference.map(Localizer::freeze);
        let optimizer = AdamW::new(
            AdamWConfig {
                lr: config.lr,
                weight_decay: config.weight_decay,
                ..AdamWConfig::default()
            },
            &model.tensors(),
        );
        let spe = steps_per_epoch.max(1) as u64;
        Ok(Finetuner {
            total_steps: spe * config.epochs as u64,
            warmup_steps: spe * config.warmup_epochs as u64,
            config,
            model,
            reference,
            optimizer,
            step: 0,
        })
    }

    fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            loc: self.model.localizer.as_ref().map(|l| l.bind(tape)),
            vit: self.model.vit.bind(tape, true),
            head: bind(tape, &self.model.head.weight, true),
        }
    }

    /// Loss terms for a batch without updating anything.
    pub fn losses(&self, tape: &mut Tape, images: &[&Image], labels: &[usize]) -> Result<(Var, f32, f32, Vec<Var>)> {
        let b = self.bind(tape);
        let m = &self.model;
        let mut reg = None;
        let emb = match (&m.localizer, &b.loc) {
            (Some(loc), Some(lv)) => {
                let x = tape.constant_owned(stack_images(images)?);
                let coords = loc.forward(tape, lv, x)?;
                if self.config.mode == FinetuneMode::SoftLabel && self.config.beta > 0.0 {
                    let reference = self.reference.as_ref().expect("validated at construction");
                    let r_hat: Vec<Tensor> = reference
                        .predict_batch(images)?
                        .into_iter()
                        .map(|l| l.into_tensor())
                        .collect();
                    let data: Vec<f32> = r_hat.iter().flat_map(|t| t.data().iter().copied()).collect();
                    let r_hat = Tensor::new(tape.value(coords).shape(), data)?;
                    reg = Some(landmark_reg(tape, &r_hat, coords)?);
                }
                m.vit.forward_part_var(tape, &b.vit, x, coords)?
            }
            _ => m.vit.forward_grid_var(tape, &b.vit, images)?,
        };
        let id = cosface_loss(tape, emb, b.head, labels, m.head.scale, m.head.margin)?;
        let id_value = tape.value(id).item();
        let (total, reg_value) = match reg {
            Some(r) => {
                let rv = tape.value(r).item();
                let weighted = tape.scale(r, self.config.beta);
                (tape.add(id, weighted)?, rv)
            }
            None => (id, 0.0),
        };
        let mut vars = b.loc.map(|l| l.all()).unwrap_or_default();
        vars.extend(b.vit.all());
        vars.push(b.head);
        Ok((total, id_value, reg_value, vars))
    }

    pub fn current_lr(&self) -> f32 {
        let c = &self.config;
        cosine_schedule(c.lr as f64, c.min_lr as f64, self.warmup_steps, self.total_steps, self.step) as f32
    }

    /// One update on a labelled batch, with seeded horizontal flips.
    pub fn step(&mut self, images: &[&Image], labels: &[usize], seed: u64) -> Result<FinetuneStats> {
        let flipped: Vec<Image> = images
            .iter()
            .enumerate()
            .map(|(i, img)| {
                let mut rng = CounterRng::from_parts(&[seed, self.step, i as u64]);
                if rng.bernoulli(self.config.flip_prob) {
                    hflip(img)
                } else {
                    (*img).clone()
                }
            })
            .collect();
        let refs: Vec<&Image> = flipped.iter().collect();
        let mut tape = Tape::new();
        let (loss, id_loss, reg, vars) = self.losses(&mut tape, &refs, labels)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("finetune loss is {value} at step {}", self.step)));
        }
        let grads = tape.backward(loss)?;
        let grads = collect_grads(&grads, &vars, &tape);
        drop(tape);

        let lr = self.current_lr();
        self.optimizer.config.lr = lr;
        let (depth, total) = self.model.depth_indices();
        let frozen_loc = self.model.localizer.as_ref().map_or(0, |l| if l.is_frozen() { l.named().len() } else { 0 });
        let hyper: Vec<ParamHyper> = self
            .model
            .tensors()
            .iter()
            .zip(&depth)
            .enumerate()
            .map(|(i, (t, &d))| ParamHyper {
                lr_scale: if i < frozen_loc {
                    0.0
                } else {
                    layerwise_lr(1.0, self.config.layer_decay as f64, d, total) as f32
                },
                decay: t.ndim() >= 2,
            })
            .collect();
        self.optimizer.step_with(&mut self.model.tensors_mut(), &grads, &hyper)?;
        let stats = FinetuneStats {
            step: self.step,
            loss: value,
            id_loss,
            reg,
            lr,
        };
        self.step += 1;
        Ok(stats)
    }

    /// One pass over `(images, labels)` in a seeded order; returns the mean loss.
    pub fn epoch(&mut self, images: &[Image], labels: &[usize], seed: u64, epoch: u64) -> Result<Vec<FinetuneStats>> {
        let mut order: Vec<usize> = (0..images.len()).collect();
        CounterRng::from_parts(&[seed, epoch, 0xE]).shuffle(&mut order);
        let mut out = Vec::new();
        for chunk in order.chunks(self.config.batch_size) {
            let imgs: Vec<&Image> = chunk.iter().map(|&i| &images[i]).collect();
            let ls: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            out.push(self.step(&imgs, &ls, derive_seed(&[seed, epoch]))?);
        }
        Ok(out)
    }
}

/// Number of optimizer steps in one epoch over `n` items.
pub fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::localizer::LocalizerConfig;
    use crate::vit::VitConfig;

    #[test]
    fn target_logit_oracle() {
        // cos θ_y = 0.5 with s=64, m=0.35 → 64·(0.5 − 0.35) = 9.6.
        let mut tape = Tape::new();
        let e = tape.constant(&Tensor::from_rows(&[&[1.0, 0.0]]).unwrap());
        let s3 = 3f32.sqrt() / 2.0;
        let w = tape.constant(&Tensor::from_rows(&[&[0.5, s3], &[0.0, 1.0]]).unwrap());
        let l = cosface_logits(&mut tape, e, w, &[0], 64.0, 0.35).unwrap();
        assert!((tape.value(l).data()[0] - 9.6).abs() < 1e-4);
        assert!(tape.value(l).data()[1].abs() < 1e-6);
    }

    #[test]
    fn margin_only_touches_target() {
        let mut tape = Tape::new();
        let e = tape.constant(&Tensor::from_rows(&[&[0.3, -0.2, 0.9], &[0.1, 0.4, -0.5]]).unwrap());
        let w = tape.constant(&Tensor::from_fn(&[4, 3], |i| (i as f32 * 0.7).cos()));
        let a = cosface_logits(&mut tape, e, w, &[1, 3], 16.0, 0.0).unwrap();
        let b = cosface_logits(&mut tape, e, w, &[1, 3], 16.0, 0.3).unwrap();
        let (a, b) = (tape.value(a).clone(), tape.value(b).clone());
        for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
            let target = i == 1 || i == 4 + 3;
            if target {
                assert!((x - y - 16.0 * 0.3).abs() < 1e-5);
            } else {
                assert_eq!(x, y);
            }
        }
    }

    #[test]
    fn sgd_step_raises_target_cosine() {
        let w = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let e0 = Tensor::from_rows(&[&[0.6, 0.8]]).unwrap();
        let mut tape = Tape::new();
        let e = tape.param(&e0);
        let wv = tape.constant(&w);
        let loss = cosface_loss(&mut tape, e, wv, &[0], 16.0, 0.2).unwrap();
        let g = tape.backward(loss).unwrap();
        let ge = g.get(e).unwrap();
        let e1: Vec<f32> = e0.data().iter().zip(ge.data()).map(|(x, g)| x - 0.01 * g).collect();
        let cos = |v: &[f32]| v[0] / (v[0] * v[0] + v[1] * v[1]).sqrt();
        assert!(cos(&e1) > cos(e0.data()));
    }

    #[test]
    fn landmark_reg_oracles() {
        let mut tape = Tape::new();
        let r_hat = Tensor::from_rows(&[&[0.1, 0.1]]).unwrap();
        let r = tape.param(&Tensor::from_rows(&[&[0.4, 0.5]]).unwrap());
        let reg = landmark_reg(&mut tape, &r_hat, r).unwrap();
        assert!((tape.value(reg).item() - 0.5).abs() < 1e-6);
        let same = tape.param(&r_hat);
        let zero = landmark_reg(&mut tape, &r_hat, same).unwrap();
        assert_eq!(tape.value(zero).item(), 0.0);
        let bad = tape.param(&Tensor::zeros(&[2, 2]));
        assert!(landmark_reg(&mut tape, &r_hat, bad).is_err());
    }

    #[test]
    fn layerwise_table() {
        assert_eq!(layerwise_lr(1e-3, 1.0, 0, 4), 1e-3);
        assert!((layerwise_lr(1.0, 0.58, 0, 4) - 0.11316496).abs() < 1e-8);
        let lrs: Vec<f64> = (0..=4).map(|i| layerwise_lr(1.0, 0.58, i, 4)).collect();
        assert!(lrs.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(lrs[4], 1.0);
    }

    fn model(seed: u64) -> FaceModel {
        let loc = Localizer::new(
            LocalizerConfig { input_size: 16, channels: 1, widths: vec![4, 4], landmarks: 9 },
            seed,
        )
        .unwrap();
        let vit = Vit::new(
            VitConfig { channels: 1, patch: 4, dim: 16, depth: 1, heads: 2, mlp_ratio: 2, max_patches: 16 },
            seed,
        )
        .unwrap();
        FaceModel {
            localizer: Some(loc),
            head: CosFaceHead::new(3, 16, 16.0, 0.2, seed).unwrap(),
            vit,
        }
    }

    fn data() -> (Vec<Image>, Vec<usize>) {
        let mut rng = CounterRng::new(3);
        let imgs = (0..6)
            .map(|_| Image::new(1, 16, 16, (0..256).map(|_| rng.uniform() as f32).collect()).unwrap())
            .collect();
        (imgs, vec![0, 1, 2, 0, 1, 2])
    }

    fn cfg(mode: FinetuneMode, beta: f32) -> FinetuneConfig {
        FinetuneConfig { mode, beta, epochs: 2, warmup_epochs: 0, batch_size: 3, ..FinetuneConfig::default() }
    }

    #[test]
    fn fixed_mode_keeps_localizer_bits() {
        let (imgs, labels) = data();
        let m = model(1);
        let before = m.localizer.clone().unwrap();
        let mut ft = Finetuner::new(cfg(FinetuneMode::FixedLandmark, 0.0), m, None, 2).unwrap();
        ft.epoch(&imgs, &labels, 5, 0).unwrap();
        let after = ft.model.localizer.as_ref().unwrap();
        assert_eq!(after.named(), before.named());
        assert_ne!(ft.model.vit, model(1).vit);
    }

    #[test]
    fn soft_label_with_zero_beta_matches_trainable() {
        let (imgs, labels) = data();
        let refs: Vec<&Image> = imgs.iter().collect();
        let b = Finetuner::new(cfg(FinetuneMode::TrainableLandmark, 0.0), model(2), None, 2).unwrap();
        let c = Finetuner::new(cfg(FinetuneMode::SoftLabel, 0.0), model(2), Some(model(7).localizer.unwrap()), 2).unwrap();
        let (mut tb, mut tc) = (Tape::new(), Tape::new());
        let lb = b.losses(&mut tb, &refs, &labels).unwrap().0;
        let lc = c.losses(&mut tc, &refs, &labels).unwrap().0;
        assert_eq!(tb.value(lb).item().to_bits(), tc.value(lc).item().to_bits());
        assert!(b.model.localizer.as_ref().is_some_and(|l| !l.is_frozen()));
    }

    #[test]
    fn soft_label_reaches_localizer() {
        let (imgs, labels) = data();
        let refs: Vec<&Image> = imgs.iter().collect();
        let c = Finetuner::new(cfg(FinetuneMode::SoftLabel, 0.1), model(2), Some(model(7).localizer.unwrap()), 2).unwrap();
        let mut tape = Tape::new();
        let (loss, _, reg, vars) = c.losses(&mut tape, &refs, &labels).unwrap();
        assert!(reg > 0.0);
        let g = tape.backward(loss).unwrap();
        let n_loc = c.model.localizer.as_ref().unwrap().named().len();
        let norm: f32 = vars[..n_loc]
            .iter()
            .filter_map(|v| g.get(*v))
            .flat_map(|t| t.data().iter().map(|x| x.abs()))
            .sum();
        assert!(norm > 0.0);
    }

    #[test]
    fn soft_label_requires_reference() {
        assert!(matches!(
            Finetuner::new(cfg(FinetuneMode::SoftLabel, 0.1), model(1), None, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn grid_mode_matches_scratch_shapes() {
        let (imgs, labels) = data();
        let mut ft = Finetuner::new(cfg(FinetuneMode::LandmarkToGrid, 0.0), model(1), None, 2).unwrap();
        ft.epoch(&imgs, &labels, 1, 0).unwrap();
        let scratch = model(4).vit;
        let shapes = |v: &Vit| v.named().iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect::<Vec<_>>();
        assert_eq!(shapes(&ft.model.vit), shapes(&scratch));
        assert!(ft.model.localizer.is_none());
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let (imgs, _) = data();
        let refs: Vec<&Image> = imgs.iter().collect();
        let m = model(3);
        let e = m.embed(&refs).unwrap();
        for row in e.data().chunks(16) {
            let n: f32 = row.iter().map(|v| v * v).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-6);
        }
        assert!(e.bit_eq(&m.embed(&refs).unwrap()));
    }
}
