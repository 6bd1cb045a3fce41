//! End-to-end stages: supervised localizer bootstrap, self-supervised
//! pretraining, few-shot finetuning and verification, plus the synthetic
//! benchmark protocol that compares pretraining recipes.
//!
//! Every stage is a pure function of its inputs, its configuration and a seed,
//! and records its scalar metrics into a [`MetricsWriter`].

use crate::augment::{Photometric, PerturbConfig, ViewConfig};
use crate::checkpoint::Checkpoint;
use crate::config::{KvConfig, MetricsWriter};
use crate::data::{render_dataset, LabeledImages, SyntheticFaceSpec};
use crate::error::{Error, Result};
use crate::eval::{build_few_shot, make_pairs, verify, Pair, Shots, VerificationReport};
use crate::finetune::{steps_per_epoch, CosFaceHead, FaceModel, FinetuneConfig, FinetuneMode, Finetuner};
use crate::geometry::Image;
use crate::localizer::{Localizer, LocalizerConfig};
use crate::pretrain::{dino_train_step, DinoHeadConfig, PretrainConfig, TeacherStudent, TeacherViews};
use crate::rng::{derive_seed, CounterRng};
use crate::vit::{Vit, VitConfig};

/// Every knob of the pipeline in one flat record, settable by `key=value`.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub canvas: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub landmarks: usize,
    pub loc_widths: Vec<usize>,
    pub subset: usize,
    pub alpha: f32,
    pub shuffle: bool,
    pub n_local: usize,
    pub local_size: usize,
    pub photometric: bool,
    /// Brightness and contrast jitter amplitude.
    pub color_jitter: f32,
    pub solarize_prob: f64,
    pub head_hidden: usize,
    pub head_bottleneck: usize,
    pub head_out: usize,
    pub pretrain_steps: u64,
    pub pretrain_batch: usize,
    pub pretrain_lr: f32,
    pub pretrain_warmup: u64,
    /// Teacher temperature at step 0; reaches the fixed value after `teacher_temp_warmup` steps (0 = off).
    pub teacher_temp_start: f32,
    pub teacher_temp_warmup: u64,
    pub ema: f32,
    pub finetune_lr: f32,
    pub finetune_epochs: usize,
    pub finetune_warmup: usize,
    pub finetune_batch: usize,
    pub layer_decay: f32,
    /// Recipe for randomly initialized backbones, which have no pretrained
    /// layers to protect with layer-wise decay.
    pub scratch_lr: f32,
    pub scratch_layer_decay: f32,
    pub beta: f32,
    pub cosface_scale: f32,
    pub cosface_margin: f32,
    pub bootstrap_ids: usize,
    pub bootstrap_images: usize,
    pub bootstrap_epochs: usize,
    pub train_ids: usize,
    pub train_images: usize,
    pub test_ids: usize,
    pub test_images: usize,
    pub eval_pairs: usize,
    pub folds: usize,
    pub shots: usize,
    pub fraction: f64,
    pub data_seed: u64,
    /// Intra-identity jitter of the synthetic renderer.
    pub data_shift: f32,
    pub data_brightness: f32,
    pub data_noise: f32,
    pub data_part_jitter: f32,
}

impl Default for BenchConfig {
    /// Desk-scale defaults: 112 canvas, 196 landmarks, 36-landmark subsets.
    fn default() -> Self {
        BenchConfig {
            canvas: 112,
            patch: 8,
            dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            landmarks: 196,
            loc_widths: vec![8, 16, 32, 32],
            subset: 36,
            alpha: 2.0,
            shuffle: true,
            n_local: 8,
            local_size: 48,
            photometric: true,
            color_jitter: 0.4,
            solarize_prob: 0.2,
            head_hidden: 256,
            head_bottleneck: 64,
            head_out: 1024,
            pretrain_steps: 2000,
            pretrain_batch: 16,
            pretrain_lr: 5e-4,
            pretrain_warmup: 100,
            teacher_temp_start: 0.04,
            teacher_temp_warmup: 0,
            ema: 0.996,
            finetune_lr: 1e-3,
            finetune_epochs: 20,
            finetune_warmup: 2,
            finetune_batch: 32,
            layer_decay: 0.58,
            scratch_lr: 3e-3,
            scratch_layer_decay: 1.0,
            beta: 0.1,
            cosface_scale: 16.0,
            cosface_margin: 0.2,
            bootstrap_ids: 100,
            bootstrap_images: 5,
            bootstrap_epochs: 10,
            train_ids: 200,
            train_images: 5,
            test_ids: 100,
            test_images: 5,
            eval_pairs: 200,
            folds: 10,
            shots: 1,
            fraction: 1.0,
            data_seed: 0,
            data_shift: 6.0,
            data_brightness: 0.1,
            data_noise: 0.03,
            data_part_jitter: 0.08,
        }
    }
}

/// Parses a comma-separated list of positive integers.
fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| Error::Config(format!("{key}={v} is not a list of integers"))))
        .collect()
}

macro_rules! kv_fields {
    ($self:ident, $kv:ident, $($f:ident),*) => {
        $( if let Some(v) = $kv.get(stringify!($f))? { $self.$f = v; } )*
    };
}

impl BenchConfig {
    /// Single-core scale: 32 canvas, 64 landmarks, 2 blocks of width 32.
    pub fn small() -> Self {
        BenchConfig {
            canvas: 32,
            patch: 4,
            dim: 32,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            landmarks: 64,
            loc_widths: vec![8, 16, 16],
            subset: 16,
            n_local: 4,
            local_size: 16,
            head_hidden: 64,
            head_bottleneck: 32,
            head_out: 256,
            pretrain_batch: 16,
            pretrain_warmup: 50,
            // Synthetic grayscale faces carry little color; stronger photometric
            // jitter than the data's own nuisance collapses distillation.
            color_jitter: 0.1,
            solarize_prob: 0.0,
            finetune_lr: 1e-4,
            scratch_lr: 1e-3,
            finetune_epochs: 15,
            finetune_batch: 25,
            data_brightness: 0.03,
            ..Default::default()
        }
    }

    /// Overrides fields named by keys of `kv`; unknown keys are errors.
    pub fn apply(&mut self, kv: &KvConfig) -> Result<()> {
        const KNOWN: &[&str] = &[
            "preset", "canvas", "patch", "dim", "depth", "heads", "mlp_ratio", "landmarks", "loc_widths", "subset",
            "alpha", "shuffle", "n_local", "local_size", "photometric", "color_jitter", "solarize_prob", "head_hidden", "head_bottleneck", "head_out",
            "pretrain_steps", "pretrain_batch", "pretrain_lr", "pretrain_warmup", "teacher_temp_start", "teacher_temp_warmup", "ema", "finetune_lr",
            "finetune_epochs", "finetune_warmup", "finetune_batch", "layer_decay", "scratch_lr", "scratch_layer_decay", "beta", "cosface_scale",
            "cosface_margin", "bootstrap_ids", "bootstrap_images", "bootstrap_epochs", "train_ids", "train_images",
            "test_ids", "test_images", "eval_pairs", "folds", "shots", "fraction", "data_seed", "seed",
            "data_shift", "data_brightness", "data_noise", "data_part_jitter",
        ];
        if let Some(k) = kv.keys().find(|k| !KNOWN.contains(k)) {
            return Err(Error::Config(format!("unknown config key {k:?}")));
        }
        match kv.get_str("preset") {
            None | Some("desk") => {}
            Some("small") => *self = Self::small(),
            Some(p) => return Err(Error::Config(format!("unknown preset {p:?} (desk|small)"))),
        }
        kv_fields!(
            self, kv, canvas, patch, dim, depth, heads, mlp_ratio, landmarks, subset, alpha, shuffle, n_local,
            local_size, photometric, color_jitter, solarize_prob, head_hidden, head_bottleneck, head_out, pretrain_steps, pretrain_batch,
            pretrain_lr, pretrain_warmup, teacher_temp_start, teacher_temp_warmup, ema, finetune_lr, finetune_epochs, finetune_warmup, finetune_batch,
            layer_decay, scratch_lr, scratch_layer_decay, beta, cosface_scale, cosface_margin, bootstrap_ids, bootstrap_images, bootstrap_epochs,
            train_ids, train_images, test_ids, test_images, eval_pairs, folds, shots, fraction, data_seed, data_shift, data_brightness, data_noise, data_part_jitter
        );
        if let Some(v) = kv.get_str("loc_widths") {
            self.loc_widths = parse_list("loc_widths", v)?;
        }
        Ok(())
    }

    pub fn vit_config(&self) -> VitConfig {
        VitConfig {
            channels: 1,
            patch: self.patch,
            dim: self.dim,
            depth: self.depth,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            max_patches: self.landmarks.max((self.canvas / self.patch).pow(2)),
        }
    }

    pub fn localizer_config(&self) -> LocalizerConfig {
        LocalizerConfig {
            input_size: self.canvas,
            channels: 1,
            widths: self.loc_widths.clone(),
            landmarks: self.landmarks,
        }
    }

    pub fn view_config(&self, method: Method) -> ViewConfig {
        let base = match method {
            Method::Lafs => ViewConfig::lafs(),
            Method::Dino => ViewConfig::dino(),
        };
        ViewConfig {
            n_local: self.n_local,
            global_size: self.canvas,
            local_size: self.local_size,
            twin_size: self.canvas,
            photometric: if self.photometric {
                Photometric {
                    brightness: self.color_jitter,
                    contrast: self.color_jitter,
                    solarize_prob: self.solarize_prob,
                    ..base.photometric
                }
            } else {
                Photometric::none()
            },
            ..base
        }
    }

    pub fn pretrain_config(&self, method: Method, teacher_views: TeacherViews) -> PretrainConfig {
        let base = match method {
            Method::Lafs => PretrainConfig::lafs(),
            Method::Dino => PretrainConfig::dino(),
        };
        PretrainConfig {
            teacher_views,
            views: self.view_config(method),
            subset: self.subset,
            perturb: PerturbConfig { alpha: self.alpha, ..PerturbConfig::default() },
            shuffle: self.shuffle,
            head: DinoHeadConfig { hidden: self.head_hidden, bottleneck: self.head_bottleneck, out_dim: self.head_out },
            ema_momentum: self.ema,
            lr: self.pretrain_lr,
            warmup_steps: self.pretrain_warmup,
            teacher_temp_start: self.teacher_temp_start,
            teacher_temp_warmup: self.teacher_temp_warmup,
            steps: self.pretrain_steps,
            batch_size: self.pretrain_batch,
            ..base
        }
    }

    pub fn finetune_config(&self, mode: FinetuneMode) -> FinetuneConfig {
        FinetuneConfig {
            mode,
            beta: self.beta,
            lr: self.finetune_lr,
            layer_decay: self.layer_decay,
            epochs: self.finetune_epochs,
            warmup_epochs: self.finetune_warmup,
            batch_size: self.finetune_batch,
            scale: self.cosface_scale,
            margin: self.cosface_margin,
            ..FinetuneConfig::default()
        }
    }

    fn spec(&self, ids: usize, images: usize, first: u64) -> SyntheticFaceSpec {
        SyntheticFaceSpec {
            canvas: self.canvas,
            n_identities: ids,
            images_per_identity: images,
            first_identity: first,
            seed: self.data_seed,
            shift_px: self.data_shift,
            brightness: self.data_brightness,
            noise_std: self.data_noise,
            part_jitter: self.data_part_jitter,
            ..SyntheticFaceSpec::default()
        }
    }

    /// Identities `[0, train)` for pretraining and finetuning.
    pub fn train_spec(&self) -> SyntheticFaceSpec {
        self.spec(self.train_ids, self.train_images, 0)
    }

    /// Held-out identities following the training ones.
    pub fn test_spec(&self) -> SyntheticFaceSpec {
        self.spec(self.test_ids, self.test_images, self.train_ids as u64)
    }

    /// A disjoint identity range for the supervised localizer bootstrap.
    pub fn bootstrap_spec(&self) -> SyntheticFaceSpec {
        self.spec(self.bootstrap_ids, self.bootstrap_images, 1 << 20)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Lafs,
    Dino,
}

fn check_labels(data: &LabeledImages) -> Result<()> {
    if data.is_empty() || data.images.len() != data.labels.len() {
        return Err(Error::Parameter("labelled set is empty or misaligned".into()));
    }
    Ok(())
}

fn log_finetune(metrics: &mut MetricsWriter, phase: &str, stats: &[crate::finetune::FinetuneStats]) {
    for s in stats {
        metrics.record(s.step, phase, "loss", s.loss as f64);
        metrics.record(s.step, phase, "id_loss", s.id_loss as f64);
        if s.reg != 0.0 {
            metrics.record(s.step, phase, "landmark_reg", s.reg as f64);
        }
        metrics.record(s.step, phase, "lr", s.lr as f64);
    }
}

/// Trains a Part fViT with identity supervision and returns its localizer
/// and transformer. Only the localizer is meant to be kept.
pub fn bootstrap(data: &LabeledImages, bench: &BenchConfig, seed: u64, metrics: &mut MetricsWriter) -> Result<(Localizer, Vit)> {
    check_labels(data)?;
    let model = FaceModel {
        localizer: Some(Localizer::new(bench.localizer_config(), derive_seed(&[seed, 1]))?),
        vit: Vit::new(bench.vit_config(), derive_seed(&[seed, 2]))?,
        head: CosFaceHead::new(data.num_labels(), bench.dim, bench.cosface_scale, bench.cosface_margin, derive_seed(&[seed, 3]))?,
    };
    let cfg = FinetuneConfig {
        epochs: bench.bootstrap_epochs,
        layer_decay: 1.0,
        ..bench.finetune_config(FinetuneMode::TrainableLandmark)
    };
    let spe = steps_per_epoch(data.len(), cfg.batch_size);
    let mut ft = Finetuner::new(cfg, model, None, spe)?;
    for epoch in 0..bench.bootstrap_epochs {
        let stats = ft.epoch(&data.images, &data.labels, seed, epoch as u64)?;
        log_finetune(metrics, "bootstrap", &stats);
    }
    let FaceModel { localizer, vit, .. } = ft.model;
    let mut loc = localizer.expect("trainable-landmark mode keeps the localizer");
    loc.set_frozen(false);
    Ok((loc, vit))
}

/// Runs `cfg.steps` distillation steps over `images` with seeded minibatches.
pub fn pretrain(
    images: &[Image],
    localizer: Localizer,
    vit: Vit,
    cfg: PretrainConfig,
    seed: u64,
    metrics: &mut MetricsWriter,
) -> Result<TeacherStudent> {
    if images.is_empty() {
        return Err(Error::Parameter("no pretraining images".into()));
    }
    let batch = cfg.batch_size.min(images.len());
    let steps = cfg.steps;
    let mut ts = TeacherStudent::new(cfg, vit, localizer, derive_seed(&[seed, 0x4EAD]))?;
    for step in 0..steps {
        let idx = CounterRng::from_parts(&[seed, step, 0xBA7C]).sample_indices(images.len(), batch);
        let refs: Vec<&Image> = idx.iter().map(|&i| &images[i]).collect();
        let s = dino_train_step(&mut ts, &refs, seed)?;
        metrics.record(s.step, "pretrain", "loss", s.loss as f64);
        metrics.record(s.step, "pretrain", "lr", s.lr as f64);
        metrics.record(s.step, "pretrain", "ema", s.ema_momentum as f64);
        metrics.record(s.step, "pretrain", "teacher_temp", s.teacher_temp as f64);
        if step % 100 == 0 || step + 1 == steps {
            log::info!("pretrain step {step}/{steps} loss {:.4} lr {:.2e}", s.loss, s.lr);
        }
    }
    Ok(ts)
}

/// Fresh margin head over the labels of `data`, then `cfg.epochs` epochs.
pub fn finetune(
    localizer: Option<Localizer>,
    vit: Vit,
    data: &LabeledImages,
    cfg: FinetuneConfig,
    reference: Option<Localizer>,
    seed: u64,
    metrics: &mut MetricsWriter,
) -> Result<FaceModel> {
    check_labels(data)?;
    let head = CosFaceHead::new(data.num_labels(), vit.dim(), cfg.scale, cfg.margin, derive_seed(&[seed, 0xC0]))?;
    let model = FaceModel { localizer, vit, head };
    let epochs = cfg.epochs;
    let spe = steps_per_epoch(data.len(), cfg.batch_size);
    let mut ft = Finetuner::new(cfg, model, reference, spe)?;
    for epoch in 0..epochs {
        let stats = ft.epoch(&data.images, &data.labels, seed, epoch as u64)?;
        log_finetune(metrics, "finetune", &stats);
        if let Some(last) = stats.last() {
            log::info!("finetune epoch {epoch}/{epochs} loss {:.4}", last.loss);
        }
    }
    Ok(ft.model)
}

/// Held-out pairs: half genuine, half impostor.
pub fn eval_pairs(test: &LabeledImages, n: usize, seed: u64) -> Result<Vec<Pair>> {
    make_pairs(&test.labels, n, n, derive_seed(&[seed, 0xE7A1]))
}

pub fn evaluate(
    model: &FaceModel,
    test: &LabeledImages,
    pairs: &[Pair],
    folds: usize,
    fars: &[f64],
    seed: u64,
    metrics: &mut MetricsWriter,
) -> Result<VerificationReport> {
    let report = verify(model, &test.images, pairs, folds, fars, "synthetic-1:1", seed)?;
    metrics.record(0, "eval", "accuracy", report.kfold.mean);
    metrics.record(0, "eval", "accuracy_std", report.kfold.std);
    for t in &report.tar_at_far {
        metrics.record(0, "eval", &format!("tar@far={}", t.far), t.tar);
    }
    Ok(report)
}

/// Saves any subset of a model under the conventional prefixes.
pub fn model_checkpoint(localizer: Option<&Localizer>, vit: &Vit, head: Option<&CosFaceHead>, meta: &[(&str, String)]) -> Checkpoint {
    let mut ck = Checkpoint::new();
    if let Some(l) = localizer {
        ck.add_params("localizer.", l);
    }
    ck.add_params("vit.", vit);
    if let Some(h) = head {
        ck.entries.push(("cosface.weight".into(), h.weight.clone()));
    }
    for (k, v) in meta {
        ck.meta.insert(k.to_string(), v.clone());
    }
    ck
}

/// Rebuilds the localizer (if saved), transformer and head (if saved).
pub fn load_model(ck: &Checkpoint, bench: &BenchConfig) -> Result<(Option<Localizer>, Vit, Option<CosFaceHead>)> {
    let localizer = if ck.has_prefix("localizer.") {
        let mut l = Localizer::new(bench.localizer_config(), 0)?;
        ck.load_params("localizer.", &mut l)?;
        Some(l)
    } else {
        None
    };
    let mut vit = Vit::new(bench.vit_config(), 0)?;
    ck.load_params("vit.", &mut vit)?;
    let head = match ck.get("cosface.weight") {
        Some(w) => {
            let mut h = CosFaceHead::new(w.shape()[0], bench.dim, bench.cosface_scale, bench.cosface_margin, 0)?;
            h.weight = w.clone();
            Some(h)
        }
        None => None,
    };
    Ok((localizer, vit, head))
}

/// Pretraining recipe compared by the benchmark.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Arm {
    /// No pretraining; Part fViT finetuned from random init.
    Scratch,
    /// Landmark distillation, finetuned as Part fViT.
    Lafs { shuffle: bool, alpha: f32 },
    /// Grid distillation, finetuned as a grid fViT.
    DinoGrid { shuffle: bool },
    /// No pretraining; grid fViT finetuned from random init.
    ScratchGrid,
}

impl Arm {
    pub fn name(&self) -> String {
        match self {
            Arm::Scratch => "scratch".into(),
            Arm::ScratchGrid => "scratch-grid".into(),
            Arm::Lafs { shuffle, alpha } => format!("lafs(shuffle={shuffle},alpha={alpha})"),
            Arm::DinoGrid { shuffle } => format!("dino-grid(shuffle={shuffle})"),
        }
    }
}

/// Data shared by all arms of one benchmark.
pub struct Benchmark {
    pub config: BenchConfig,
    pub train: LabeledImages,
    pub test: LabeledImages,
    pub pairs: Vec<Pair>,
    pub localizer: Localizer,
}

#[derive(Clone, Debug)]
pub struct ArmResult {
    pub arm: Arm,
    pub seed: u64,
    pub accuracy: f64,
    pub report: VerificationReport,
    /// Backbone before finetuning: the pretrained teacher, or the random init.
    pub backbone: Vit,
}

impl Benchmark {
    /// Renders the splits and bootstraps the shared localizer.
    pub fn prepare(config: BenchConfig, seed: u64, metrics: &mut MetricsWriter) -> Result<Self> {
        let train = render_dataset(&config.train_spec())?;
        let test = render_dataset(&config.test_spec())?;
        let aux = render_dataset(&config.bootstrap_spec())?;
        let (localizer, _) = bootstrap(&aux, &config, derive_seed(&[seed, 0xB007]), metrics)?;
        let pairs = eval_pairs(&test, config.eval_pairs / 2, seed)?;
        Ok(Benchmark { config, train, test, pairs, localizer })
    }

    /// Finetuning recipe for `arm`: pretrained backbones use the layer-decayed
    /// schedule, random ones the scratch schedule.
    pub fn finetune_config(&self, arm: Arm) -> FinetuneConfig {
        let c = &self.config;
        let mode = match arm {
            Arm::Scratch | Arm::Lafs { .. } => FinetuneMode::FixedLandmark,
            Arm::DinoGrid { .. } | Arm::ScratchGrid => FinetuneMode::LandmarkToGrid,
        };
        let cfg = c.finetune_config(mode);
        match arm {
            Arm::Scratch | Arm::ScratchGrid => FinetuneConfig { lr: c.scratch_lr, layer_decay: c.scratch_layer_decay, ..cfg },
            _ => cfg,
        }
    }

    /// Pretrains (unless scratch), finetunes on the few-shot split, verifies.
    pub fn run(&self, arm: Arm, seed: u64, metrics: &mut MetricsWriter) -> Result<ArmResult> {
        let c = &self.config;
        let vit = Vit::new(c.vit_config(), derive_seed(&[seed, 0x717]))?;
        let vit = match arm {
            Arm::Scratch | Arm::ScratchGrid => vit,
            Arm::Lafs { shuffle, alpha } => {
                let cfg = BenchConfig { shuffle, alpha, ..c.clone() }.pretrain_config(Method::Lafs, TeacherViews::Landmark);
                pretrain(&self.train.images, self.localizer.clone(), vit, cfg, seed, metrics)?.teacher.vit
            }
            Arm::DinoGrid { shuffle } => {
                let cfg = BenchConfig { shuffle, ..c.clone() }.pretrain_config(Method::Dino, TeacherViews::Grid);
                pretrain(&self.train.images, self.localizer.clone(), vit, cfg, seed, metrics)?.teacher.vit
            }
        };
        let few = build_few_shot(&self.train.labels, c.fraction, Shots::Count(c.shots), derive_seed(&[seed, 0x5407]))?;
        let labelled = self.train.subset(&few.indices, Some(&few.labels));
        let loc = match arm {
            Arm::Scratch | Arm::Lafs { .. } => Some(self.localizer.clone()),
            Arm::DinoGrid { .. } | Arm::ScratchGrid => None,
        };
        let backbone = vit.clone();
        let model = finetune(loc, vit, &labelled, self.finetune_config(arm), None, seed, metrics)?;
        let report = evaluate(&model, &self.test, &self.pairs, c.folds, &[0.01, 0.1], seed, metrics)?;
        Ok(ArmResult { arm, seed, accuracy: report.kfold.mean, report, backbone })
    }
}

/// Median of a non-empty slice.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
