//! Teacher-student self-distillation.
//!
//! A student network sees every view with a random subset of landmarks; an
//! exponential-moving-average teacher sees the global views with all
//! landmarks. The student is trained to match the teacher's centred,
//! sharpened distribution over `K` prototypes. The same engine runs the grid
//! baseline, where both branches tile views into non-overlapping patches.

use crate::augment::{
    generate_views, landmark_perturb, shuffle_order, subsample_landmarks, PerturbConfig, SubsampleOrder,
    ViewConfig, ViewSet,
};
use crate::autodiff::{softmax_row, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{stack_images, Image, LandmarkSet};
use crate::localizer::Localizer;
use crate::optim::{cosine_schedule, AdamW, AdamWConfig, ParamHyper};
use crate::params::{bind, collect_grads, ema_into, normal_init, Params};
use crate::rng::{derive_seed, CounterRng};
use crate::tensor::Tensor;
use crate::vit::{Vit, VitVars};

const NORM_EPS: f32 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct DinoHeadConfig {
    pub hidden: usize,
    pub bottleneck: usize,
    /// Number of prototypes `K`.
    pub out_dim: usize,
}

impl Default for DinoHeadConfig {
    fn default() -> Self {
        DinoHeadConfig {
            hidden: 256,
            bottleneck: 64,
            out_dim: 1024,
        }
    }
}

/// Three-layer MLP, L2 bottleneck, unit-norm prototypes.
#[derive(Clone, Debug, PartialEq)]
pub struct DinoHead {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
    /// `[K × bottleneck]`, rows renormalized after every update.
    pub prototypes: Tensor,
}

pub struct HeadVars([Var; 7]);

impl HeadVars {
    pub fn all(&self) -> Vec<Var> {
        self.0.to_vec()
    }
}

impl DinoHead {
    pub fn new(in_dim: usize, cfg: &DinoHeadConfig, seed: u64) -> Result<Self> {
        if in_dim == 0 || cfg.hidden == 0 || cfg.bottleneck == 0 || cfg.out_dim == 0 {
            return Err(Error::Config(format!("degenerate head config {cfg:?}")));
        }
        let mut rng = CounterRng::from_parts(&[seed, 0xD1]);
        let mut head = DinoHead {
            w1: normal_init(&[in_dim, cfg.hidden], 0.02, &mut rng),
            b1: Tensor::zeros(&[cfg.hidden]),
            w2: normal_init(&[cfg.hidden, cfg.hidden], 0.02, &mut rng),
            b2: Tensor::zeros(&[cfg.hidden]),
            w3: normal_init(&[cfg.hidden, cfg.bottleneck], 0.02, &mut rng),
            b3: Tensor::zeros(&[cfg.bottleneck]),
            prototypes: normal_init(&[cfg.out_dim, cfg.bottleneck], 1.0, &mut rng),
        };
        head.normalize_prototypes();
        Ok(head)
    }

    pub fn out_dim(&self) -> usize {
        self.prototypes.shape()[0]
    }

    pub fn normalize_prototypes(&mut self) {
        let b = self.prototypes.shape()[1];
        for row in self.prototypes.data_mut().chunks_mut(b) {
            let n = row.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v = (*v as f64 / n) as f32);
            }
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> HeadVars {
        HeadVars(self.tensors_array().map(|t| bind(tape, t, trainable)))
    }

    fn tensors_array(&self) -> [&Tensor; 7] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3, &self.prototypes]
    }

    /// Unit-norm bottleneck features `[N × bottleneck]`.
    pub fn bottleneck_var(&self, tape: &mut Tape, vars: &HeadVars, emb: Var) -> Result<Var> {
        let [w1, b1, w2, b2, w3, b3, _] = vars.0;
        let h = tape.linear(emb, w1, Some(b1))?;
        let h = tape.gelu(h);
        let h = tape.linear(h, w2, Some(b2))?;
        let h = tape.gelu(h);
        let z = tape.linear(h, w3, Some(b3))?;
        Ok(tape.l2_normalize_rows(z, NORM_EPS))
    }

    /// Prototype logits `[N × K]`: cosines between bottleneck and prototypes.
    pub fn forward_var(&self, tape: &mut Tape, vars: &HeadVars, emb: Var) -> Result<Var> {
        let z = self.bottleneck_var(tape, vars, emb)?;
        let protos = tape.l2_normalize_rows(vars.0[6], NORM_EPS);
        tape.matmul_t(z, protos)
    }

    pub fn forward(&self, emb: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(emb);
        let x = if emb.ndim() == 1 {
            tape.reshape(x, &[1, emb.numel()])?
        } else {
            x
        };
        let out = self.forward_var(&mut tape, &vars, x)?;
        Ok(tape.value(out).clone())
    }
}

impl Params for DinoHead {
    fn named(&self) -> Vec<(String, &Tensor)> {
        ["w1", "b1", "w2", "b2", "w3", "b3", "prototypes"]
            .iter()
            .zip(self.tensors_array())
            .map(|(n, t)| (n.to_string(), t))
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
            &mut self.prototypes,
        ]
    }
}

/// Backbone plus projection head; the unit that teacher and student share.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub vit: Vit,
    pub head: DinoHead,
}

impl Params for Network {
    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut v: Vec<(String, &Tensor)> =
            self.vit.named().into_iter().map(|(n, t)| (format!("vit.{n}"), t)).collect();
        v.extend(self.head.named().into_iter().map(|(n, t)| (format!("head.{n}"), t)));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.vit.tensors_mut();
        v.extend(self.head.tensors_mut());
        v
    }
}

/// Running mean of teacher logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Center {
    pub c: Tensor,
    pub momentum: f64,
}

impl Center {
    pub fn new(k: usize, momentum: f64) -> Self {
        Center {
            c: Tensor::zeros(&[k]),
            momentum,
        }
    }

    /// `c ← m·c + (1−m)·mean(logits)` over the rows of `logits[N×K]`.
    pub fn update(&mut self, logits: &Tensor) -> Result<()> {
        let k = self.c.numel();
        if logits.numel() == 0 || logits.numel() % k != 0 {
            return Err(Error::dim(
                "center_update",
                format!("logits {:?} vs center [{k}]", logits.shape()),
            ));
        }
        let n = logits.numel() / k;
        let m = self.momentum;
        for j in 0..k {
            let mean = (0..n).map(|i| logits.data()[i * k + j] as f64).sum::<f64>() / n as f64;
            let c = &mut self.c.data_mut()[j];
            *c = (m * *c as f64 + (1.0 - m) * mean) as f32;
        }
        Ok(())
    }
}

/// `softmax((logits − c) / T_t)` row by row; never on a tape.
pub fn teacher_probs(logits: &Tensor, center: &Tensor, temperature: f32) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(Error::Parameter(format!("teacher temperature {temperature} must be positive")));
    }
    let k = center.numel();
    if k == 0 || logits.numel() % k != 0 {
        return Err(Error::dim(
            "teacher_probs",
            format!("logits {:?} vs center [{k}]", logits.shape()),
        ));
    }
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(k) {
        row.iter_mut().zip(center.data()).for_each(|(v, c)| *v -= c);
        softmax_row(row, temperature);
    }
    Tensor::new(logits.shape(), out)
}

/// `(teacher view, student view)` pairs, skipping the student view rendered
/// from the same crop as the teacher view.
///
/// `teacher_crops[t]` is the crop index the teacher view `t` was rendered
/// from; student view `s` is crop `s`.
pub fn loss_pairs(teacher_crops: &[usize], n_views: usize) -> Vec<(usize, usize)> {
    teacher_crops
        .iter()
        .enumerate()
        .flat_map(|(t, &crop)| (0..n_views).filter(move |&s| s != crop).map(move |s| (t, s)))
        .collect()
}

/// Mean cross-entropy `H(Q_t, softmax(S_s / T_s))` over `pairs` and batch.
///
/// Rows are view-major: teacher row `t·B + b`, student row `s·B + b`.
pub fn lafs_loss(
    tape: &mut Tape,
    teacher: &Tensor,
    student_logits: Var,
    batch: usize,
    pairs: &[(usize, usize)],
    student_temp: f32,
) -> Result<Var> {
    let s_shape = tape.value(student_logits).shape().to_vec();
    let (t_rows, k) = (teacher.shape()[0], *teacher.shape().last().unwrap_or(&0));
    if s_shape.len() != 2 || s_shape[1] != k || teacher.ndim() != 2 {
        return Err(Error::dim(
            "lafs_loss",
            format!("teacher {:?} vs student {s_shape:?}", teacher.shape()),
        ));
    }
    if pairs.is_empty() || batch == 0 {
        return Err(Error::Parameter("loss needs at least one view pair".into()));
    }
    let mut rows = Vec::with_capacity(pairs.len() * batch);
    let mut targets = Vec::with_capacity(pairs.len() * batch * k);
    for &(t, s) in pairs {
        for b in 0..batch {
            let (tr, sr) = (t * batch + b, s * batch + b);
            if tr >= t_rows || sr >= s_shape[0] {
                return Err(Error::dim("lafs_loss", format!("pair ({t}, {s}) outside the batch")));
            }
            rows.push(sr);
            targets.extend_from_slice(teacher.row(tr));
        }
    }
    let picked = tape.gather_rows(student_logits, &rows)?;
    let targets = Tensor::new(&[rows.len(), k], targets)?;
    tape.soft_cross_entropy(picked, &targets, student_temp)
}

/// `teacher ← l·teacher + (1−l)·student`, elementwise.
pub fn ema_update<P: Params>(teacher: &mut P, student: &P, momentum: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::Parameter(format!("EMA momentum {momentum} outside [0,1]")));
    }
    let src = student.tensors();
    let mut dst = teacher.tensors_mut();
    if src.len() != dst.len() || src.iter().zip(&dst).any(|(s, d)| s.shape() != d.shape()) {
        return Err(Error::dim("ema_update", "teacher and student shapes differ"));
    }
    for (d, s) in dst.iter_mut().zip(src) {
        ema_into(d, s, momentum);
    }
    Ok(())
}

/// Which patches the teacher sees; the student follows (subset landmarks for
/// the landmark modes, grid tiles for the grid mode).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TeacherViews {
    Landmark,
    Grid,
    /// Two grid views and two full-landmark views of the same global crops.
    Mixed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub teacher_views: TeacherViews,
    pub views: ViewConfig,
    /// Landmarks per student view `k`.
    pub subset: usize,
    pub perturb: PerturbConfig,
    pub shuffle: bool,
    pub head: DinoHeadConfig,
    pub teacher_temp: f32,
    /// Linear teacher-temperature warmup from this value over
    /// `teacher_temp_warmup` steps; 0 steps disables it.
    pub teacher_temp_start: f32,
    pub teacher_temp_warmup: u64,
    pub student_temp: f32,
    pub center_momentum: f64,
    pub ema_momentum: f32,
    /// Cosine-increase the EMA momentum to 1 over `steps`.
    pub ema_cosine: bool,
    pub lr: f32,
    pub min_lr: f32,
    pub warmup_steps: u64,
    pub weight_decay: f32,
    pub steps: u64,
    pub batch_size: usize,
}

impl PretrainConfig {
    pub fn lafs() -> Self {
        PretrainConfig {
            teacher_views: TeacherViews::Landmark,
            views: ViewConfig::lafs(),
            subset: 36,
            perturb: PerturbConfig::default(),
            shuffle: true,
            head: DinoHeadConfig::default(),
            teacher_temp: 0.04,
            teacher_temp_start: 0.04,
            teacher_temp_warmup: 0,
            student_temp: 0.1,
            center_momentum: 0.9,
            ema_momentum: 0.996,
            ema_cosine: false,
            lr: 5e-4,
            min_lr: 1e-6,
            warmup_steps: 10,
            weight_decay: 0.04,
            steps: 100,
            batch_size: 8,
        }
    }

    /// Grid baseline with the plain multi-crop recipe.
    pub fn dino() -> Self {
        PretrainConfig {
            teacher_views: TeacherViews::Grid,
            views: ViewConfig::dino(),
            shuffle: false,
            perturb: PerturbConfig { alpha: 0.0, stream: 0 },
            ..PretrainConfig::lafs()
        }
    }

    pub fn n_teacher_views(&self) -> usize {
        match self.teacher_views {
            TeacherViews::Mixed => 2 * self.views.n_global,
            _ => self.views.n_global,
        }
    }

    /// Crop index behind each teacher view.
    pub fn teacher_crops(&self) -> Vec<usize> {
        (0..self.n_teacher_views()).map(|t| t % self.views.n_global).collect()
    }

    pub fn n_pairs(&self) -> usize {
        loss_pairs(&self.teacher_crops(), self.views.n_views()).len()
    }

    fn validate(&self, localizer: &Localizer, vit: &Vit) -> Result<()> {
        self.views.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) || !(0.0..=1.0).contains(&self.center_momentum) {
            return Err(Error::Config("momenta must lie in [0,1]".into()));
        }
        if self.teacher_views != TeacherViews::Grid {
            let r = localizer.config.landmarks;
            if self.subset == 0 || self.subset > r {
                return Err(Error::Config(format!("subset {} outside 1..={r}", self.subset)));
            }
            if r > vit.config.max_patches {
                return Err(Error::Config(format!(
                    "{r} landmarks exceed {} positional slots",
                    vit.config.max_patches
                )));
            }
            if self.views.twin_size != localizer.config.input_size {
                return Err(Error::Config(format!(
                    "twin size {} differs from localizer input {}",
                    self.views.twin_size, localizer.config.input_size
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: f32,
    pub lr: f32,
    pub ema_momentum: f32,
    pub teacher_temp: f32,
    pub pairs: usize,
}

/// The full distillation state.
#[derive(Clone, Debug)]
pub struct TeacherStudent {
    pub config: PretrainConfig,
    pub student: Network,
    pub teacher: Network,
    pub localizer: Localizer,
    pub center: Center,
    pub optimizer: AdamW,
    pub step: u64,
}

/// Per-view landmark sets after sampling and landmark augmentation.
struct ViewLandmarks {
    teacher: Vec<Vec<LandmarkSet>>,
    student: Vec<Vec<LandmarkSet>>,
}

const ROLE_TEACHER: u64 = 1;
const ROLE_STUDENT: u64 = 2;
const ROLE_SUBSET: u64 = 3;
const ROLE_SHUFFLE: u64 = 4;

impl TeacherStudent {
    /// Teacher starts as an exact copy of the student.
    pub fn new(config: PretrainConfig, vit: Vit, localizer: Localizer, seed: u64) -> Result<Self> {
        config.validate(&localizer, &vit)?;
        let head = DinoHead::new(vit.dim(), &config.head, seed)?;
        let student = Network { vit, head };
        let optimizer = AdamW::new(
            AdamWConfig {
                lr: config.lr,
                weight_decay: config.weight_decay,
                ..AdamWConfig::default()
            },
            &student.tensors(),
        );
        Ok(TeacherStudent {
            center: Center::new(config.head.out_dim, config.center_momentum),
            teacher: student.clone(),
            student,
            localizer: localizer.freeze(),
            optimizer,
            step: 0,
            config,
        })
    }

    pub fn current_lr(&self) -> f32 {
        let c = &self.config;
        cosine_schedule(c.lr as f64, c.min_lr as f64, c.warmup_steps, c.steps, self.step) as f32
    }

    pub fn current_teacher_temp(&self) -> f32 {
        let c = &self.config;
        if self.step >= c.teacher_temp_warmup {
            return c.teacher_temp;
        }
        let f = self.step as f32 / c.teacher_temp_warmup as f32;
        c.teacher_temp_start + f * (c.teacher_temp - c.teacher_temp_start)
    }

    pub fn current_ema(&self) -> f32 {
        let c = &self.config;
        if !c.ema_cosine || c.steps == 0 {
            return c.ema_momentum;
        }
        let t = (self.step.min(c.steps)) as f64 / c.steps as f64;
        let l = c.ema_momentum as f64;
        (1.0 - (1.0 - l) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())) as f32
    }

    fn landmark_sets(&self, sets: &[ViewSet], seeds: &[u64]) -> Result<ViewLandmarks> {
        let c = &self.config;
        let twins: Vec<&Image> = sets.iter().flat_map(|s| s.views.iter().map(|v| &v.twin)).collect();
        let predicted = self.localizer.predict_batch(&twins)?;
        let nv = c.views.n_views();
        let mut teacher = vec![Vec::new(); c.views.n_global];
        let mut student = vec![Vec::new(); nv];
        for (b, set) in sets.iter().enumerate() {
            for (v, view) in set.views.iter().enumerate() {
                let full = &predicted[b * nv + v];
                let size = view.image.width();
                let vseed = derive_seed(&[seeds[b], v as u64]);
                let augment = |lm: &LandmarkSet, role: u64| -> Result<LandmarkSet> {
                    let lm = landmark_perturb(lm, &c.perturb, size, derive_seed(&[vseed, role]))?;
                    Ok(if c.shuffle {
                        let order = shuffle_order(lm.len(), derive_seed(&[vseed, role, ROLE_SHUFFLE]));
                        lm.select(&order)?
                    } else {
                        lm
                    })
                };
                if view.global {
                    teacher[v].push(augment(full, ROLE_TEACHER)?);
                }
                let sub = subsample_landmarks(
                    full,
                    c.subset,
                    derive_seed(&[vseed, ROLE_SUBSET]),
                    SubsampleOrder::Drawn,
                )?;
                student[v].push(augment(&sub.landmarks, ROLE_STUDENT)?);
            }
        }
        Ok(ViewLandmarks { teacher, student })
    }

    /// Embeds a group of same-size views with landmark patches → `[N × d]`.
    fn part_group(
        vit: &Vit,
        tape: &mut Tape,
        vars: &VitVars,
        images: &[&Image],
        landmarks: &[&LandmarkSet],
    ) -> Result<Var> {
        let x = tape.constant_owned(stack_images(images)?);
        let r = landmarks[0].len();
        let mut coords = Vec::with_capacity(landmarks.len() * r * 2);
        for lm in landmarks {
            coords.extend_from_slice(lm.tensor().data());
        }
        let coords = tape.constant_owned(Tensor::new(&[landmarks.len(), r, 2], coords)?);
        vit.forward_part_var(tape, vars, x, coords)
    }

    fn grid_group(
        vit: &Vit,
        tape: &mut Tape,
        vars: &VitVars,
        images: &[&Image],
        orders: Option<&[Vec<usize>]>,
    ) -> Result<Var> {
        let rows = vit.grid_patch_rows(images, orders)?;
        vit.forward_grid_rows(tape, vars, rows, images.len())
    }

    fn grid_orders(&self, images: &[&Image], seeds: &[u64], view: usize, role: u64) -> Option<Vec<Vec<usize>>> {
        if !self.config.shuffle {
            return None;
        }
        let p = self.student.vit.config.patch;
        Some(
            images
                .iter()
                .zip(seeds)
                .map(|(img, s)| {
                    let n = (img.height() / p) * (img.width() / p);
                    shuffle_order(n, derive_seed(&[*s, view as u64, role, ROLE_SHUFFLE]))
                })
                .collect(),
        )
    }

    /// Teacher logits `[T·B × K]`, view-major, computed off the training tape.
    fn teacher_logits(&self, sets: &[ViewSet], lms: Option<&ViewLandmarks>, seeds: &[u64]) -> Result<Tensor> {
        let c = &self.config;
        let mut tape = Tape::new();
        let vars = self.teacher.vit.bind(&mut tape, false);
        let mut groups = Vec::new();
        let grid = matches!(c.teacher_views, TeacherViews::Grid | TeacherViews::Mixed);
        let part = matches!(c.teacher_views, TeacherViews::Landmark | TeacherViews::Mixed);
        let vit = &self.teacher.vit;
        if grid {
            for v in 0..c.views.n_global {
                let imgs: Vec<&Image> = sets.iter().map(|s| &s.views[v].image).collect();
                let orders = self.grid_orders(&imgs, seeds, v, ROLE_TEACHER);
                groups.push(Self::grid_group(vit, &mut tape, &vars, &imgs, orders.as_deref())?);
            }
        }
        if part {
            let lms = lms.expect("landmark teacher views need landmarks");
            for v in 0..c.views.n_global {
                let imgs: Vec<&Image> = sets.iter().map(|s| &s.views[v].image).collect();
                let sets_v: Vec<&LandmarkSet> = lms.teacher[v].iter().collect();
                groups.push(Self::part_group(vit, &mut tape, &vars, &imgs, &sets_v)?);
            }
        }
        let emb = tape.concat_rows(&groups)?;
        let hv = self.teacher.head.bind(&mut tape, false);
        let logits = self.teacher.head.forward_var(&mut tape, &hv, emb)?;
        Ok(tape.value(logits).clone())
    }

    /// One step: views, landmarks, teacher targets, student update, EMA, centre.
    pub fn train_step(&mut self, batch: &[&Image], seed: u64) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::Parameter("empty batch".into()));
        }
        let c = self.config.clone();
        let nb = batch.len();
        let seeds: Vec<u64> = (0..nb).map(|b| derive_seed(&[seed, self.step, b as u64])).collect();
        let sets = batch
            .iter()
            .zip(&seeds)
            .map(|(img, s)| generate_views(img, &c.views, *s))
            .collect::<Result<Vec<_>>>()?;
        let lms = match c.teacher_views {
            TeacherViews::Grid => None,
            _ => Some(self.landmark_sets(&sets, &seeds)?),
        };
        let t_logits = self.teacher_logits(&sets, lms.as_ref(), &seeds)?;
        let teacher_temp = self.current_teacher_temp();
        let t_probs = teacher_probs(&t_logits, &self.center.c, teacher_temp)?;

        let mut tape = Tape::new();
        let vit_vars = self.student.vit.bind(&mut tape, true);
        let head_vars = self.student.head.bind(&mut tape, true);
        let mut groups = Vec::new();
        let nv = c.views.n_views();
        let ranges = [0..c.views.n_global, c.views.n_global..nv];
        for range in ranges {
            if range.is_empty() {
                continue;
            }
            let mut imgs = Vec::new();
            let mut sel = Vec::new();
            let mut orders = Vec::new();
            for v in range {
                let vi: Vec<&Image> = sets.iter().map(|s| &s.views[v].image).collect();
                match &lms {
                    Some(l) => sel.extend(l.student[v].iter()),
                    None => {
                        if let Some(o) = self.grid_orders(&vi, &seeds, v, ROLE_STUDENT) {
                            orders.extend(o);
                        }
                    }
                }
                imgs.extend(vi);
            }
            let vit = &self.student.vit;
            groups.push(match &lms {
                Some(_) => Self::part_group(vit, &mut tape, &vit_vars, &imgs, &sel)?,
                None => {
                    let o = if orders.is_empty() { None } else { Some(orders.as_slice()) };
                    Self::grid_group(vit, &mut tape, &vit_vars, &imgs, o)?
                }
            });
        }
        let emb = tape.concat_rows(&groups)?;
        let logits = self.student.head.forward_var(&mut tape, &head_vars, emb)?;
        let pairs = loss_pairs(&c.teacher_crops(), nv);
        let loss = lafs_loss(&mut tape, &t_probs, logits, nb, &pairs, c.student_temp)?;
        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::NonFinite(format!(
                "distillation loss is {loss_value} at step {}; step aborted",
                self.step
            )));
        }
        let grads = tape.backward(loss)?;
        let mut vars = vit_vars.all();
        vars.extend(head_vars.all());
        let grads = collect_grads(&grads, &vars, &tape);
        drop(tape);

        let lr = self.current_lr();
        self.optimizer.config.lr = lr;
        let hyper: Vec<ParamHyper> = self
            .student
            .tensors()
            .iter()
            .map(|t| ParamHyper {
                lr_scale: 1.0,
                decay: t.ndim() >= 2,
            })
            .collect();
        self.optimizer
            .step_with(&mut self.student.tensors_mut(), &grads, &hyper)?;
        self.student.head.normalize_prototypes();
        let l = self.current_ema();
        ema_update(&mut self.teacher, &self.student, l)?;
        self.center.update(&t_logits)?;
        let stats = StepStats {
            step: self.step,
            loss: loss_value,
            lr,
            ema_momentum: l,
            teacher_temp,
            pairs: pairs.len(),
        };
        self.step += 1;
        Ok(stats)
    }
}

/// One landmark-view distillation step.
pub fn lafs_train_step(ts: &mut TeacherStudent, batch: &[&Image], seed: u64) -> Result<StepStats> {
    if ts.config.teacher_views != TeacherViews::Landmark {
        return Err(Error::Config("landmark distillation needs landmark teacher views".into()));
    }
    if !ts.localizer.is_frozen() {
        return Err(Error::Contract("localizer must be frozen during distillation".into()));
    }
    ts.train_step(batch, seed)
}

/// One step of the generic engine under the configured teacher views.
pub fn dino_train_step(ts: &mut TeacherStudent, batch: &[&Image], seed: u64) -> Result<StepStats> {
    match ts.config.teacher_views {
        TeacherViews::Landmark => lafs_train_step(ts, batch, seed),
        _ => ts.train_step(batch, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::localizer::LocalizerConfig;
    use crate::vit::VitConfig;

    #[test]
    fn teacher_probs_oracles() {
        let p = teacher_probs(&Tensor::from_rows(&[&[2.0, 0.0]]).unwrap(), &Tensor::full(&[2], 1.0), 1.0).unwrap();
        let e = 1.0f64.exp();
        let want = e / (e + 1.0 / e);
        assert!((p.data()[0] as f64 - want).abs() < 1e-6);
        assert!((p.data()[0] - 0.8808).abs() < 1e-4 && (p.data()[1] - 0.1192).abs() < 1e-4);
        let logits = Tensor::from_rows(&[&[0.3, -1.0, 2.0]]).unwrap();
        let u = teacher_probs(&logits, &logits.clone().reshape(&[3]).unwrap(), 0.04).unwrap();
        assert!(u.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-6));
        assert!(teacher_probs(&logits, &Tensor::zeros(&[3]), 0.0).is_err());
    }

    #[test]
    fn center_update_oracles() {
        let mut c = Center::new(2, 0.9);
        c.update(&Tensor::from_rows(&[&[1.0, 1.0]]).unwrap()).unwrap();
        assert_eq!(c.c.data(), &[0.1, 0.1]);
        let mut frozen = Center { c: Tensor::full(&[2], 0.5), momentum: 1.0 };
        frozen.update(&Tensor::from_rows(&[&[3.0, 4.0]]).unwrap()).unwrap();
        assert_eq!(frozen.c.data(), &[0.5, 0.5]);
        // Geometric convergence: after n updates c = 1 − 0.9ⁿ.
        let mut g = Center::new(1, 0.9);
        for _ in 0..50 {
            g.update(&Tensor::from_rows(&[&[1.0]]).unwrap()).unwrap();
        }
        assert!((g.c.data()[0] as f64 - (1.0 - 0.9f64.powi(50))).abs() < 1e-5);
    }

    #[test]
    fn pair_counts() {
        assert_eq!(loss_pairs(&[0, 1], 10).len(), 18);
        assert_eq!(loss_pairs(&[0, 1], 4), vec![(0, 1), (0, 2), (0, 3), (1, 0), (1, 2), (1, 3)]);
        assert_eq!(loss_pairs(&[0, 1, 0, 1], 10).len(), 36);
    }

    #[test]
    fn loss_equals_entropy_when_student_matches_teacher() {
        let q = [0.2f32, 0.3, 0.5];
        let logits: Vec<f32> = q.iter().map(|p| p.ln()).collect();
        let mut tape = Tape::new();
        let s = tape.param(&Tensor::from_rows(&[&logits, &logits]).unwrap());
        let teacher = Tensor::from_rows(&[&q, &q]).unwrap();
        let loss = lafs_loss(&mut tape, &teacher, s, 1, &[(0, 1), (1, 0)], 1.0).unwrap();
        let entropy: f64 = q.iter().map(|p| -(*p as f64) * (*p as f64).ln()).sum();
        assert!((tape.value(loss).item() as f64 - entropy).abs() < 1e-6);
    }

    #[test]
    fn loss_vanishes_for_sharp_matching_student() {
        let mut tape = Tape::new();
        let s = tape.param(&Tensor::from_rows(&[&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]]).unwrap());
        let teacher = Tensor::from_rows(&[&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]]).unwrap();
        let loss = lafs_loss(&mut tape, &teacher, s, 1, &[(0, 1), (1, 0)], 0.01).unwrap();
        assert!(tape.value(loss).item() < 1e-6);
    }

    #[test]
    fn ema_oracles() {
        let mk = |v: f32| Center { c: Tensor::full(&[3], v), momentum: 0.0 };
        struct P(Center);
        impl Params for P {
            fn named(&self) -> Vec<(String, &Tensor)> {
                vec![("c".into(), &self.0.c)]
            }
            fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
                vec![&mut self.0.c]
            }
        }
        let mut t = P(mk(1.0));
        ema_update(&mut t, &P(mk(0.0)), 0.9).unwrap();
        assert!((t.0.c.data()[0] - 0.9).abs() < 1e-7);
        let mut t = P(mk(0.3));
        ema_update(&mut t, &P(mk(0.7)), 1.0).unwrap();
        assert_eq!(t.0.c.data()[0], 0.3);
        ema_update(&mut t, &P(mk(0.7)), 0.0).unwrap();
        assert_eq!(t.0.c.data()[0], 0.7);
        assert!(ema_update(&mut t, &P(mk(0.7)), 1.5).is_err());
    }

    #[test]
    fn head_bottleneck_is_scale_invariant() {
        let head = DinoHead::new(8, &DinoHeadConfig { hidden: 16, bottleneck: 4, out_dim: 32 }, 1).unwrap();
        let emb = Tensor::from_fn(&[1, 8], |i| (i as f32 * 0.37).sin());
        let big = Tensor::from_fn(&[1, 8], |i| 10.0 * (i as f32 * 0.37).sin());
        let z = |e: &Tensor| {
            let mut tape = Tape::new();
            let v = head.bind(&mut tape, false);
            let x = tape.constant(e);
            let z = head.bottleneck_var(&mut tape, &v, x).unwrap();
            tape.value(z).clone()
        };
        // The MLP is not homogeneous, so scale invariance holds for the
        // normalization itself: rescaling the pre-norm vector is a no-op.
        let zs = z(&emb);
        let n: f32 = zs.data().iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-5);
        let mut tape = Tape::new();
        let a = tape.constant(&big);
        let b = tape.constant(&Tensor::from_fn(&[1, 8], |i| big.data()[i] / 10.0));
        let (na, nb) = (tape.l2_normalize_rows(a, NORM_EPS), tape.l2_normalize_rows(b, NORM_EPS));
        assert!(tape.value(na).max_abs_diff(tape.value(nb)) < 1e-5);
        let _ = z(&big);
        let zero = head.forward(&Tensor::zeros(&[8])).unwrap();
        assert_eq!(zero.shape(), &[1, 32]);
        assert!(zero.is_finite());
        assert_eq!(DinoHeadConfig::default().out_dim, 1024);
    }

    fn small_state(teacher_views: TeacherViews) -> (TeacherStudent, Vec<Image>) {
        let loc = Localizer::new(
            LocalizerConfig { input_size: 16, channels: 1, widths: vec![4, 4], landmarks: 16 },
            1,
        )
        .unwrap();
        let vit = Vit::new(
            VitConfig { channels: 1, patch: 4, dim: 16, depth: 1, heads: 2, mlp_ratio: 2, max_patches: 16 },
            2,
        )
        .unwrap();
        let mut cfg = match teacher_views {
            TeacherViews::Grid => PretrainConfig::dino(),
            _ => PretrainConfig::lafs(),
        };
        cfg.teacher_views = teacher_views;
        cfg.views.global_size = 16;
        cfg.views.local_size = 8;
        cfg.views.twin_size = 16;
        cfg.views.n_local = 2;
        cfg.subset = 4;
        cfg.head = DinoHeadConfig { hidden: 16, bottleneck: 8, out_dim: 32 };
        let ts = TeacherStudent::new(cfg, vit, loc, 3).unwrap();
        let mut rng = CounterRng::new(5);
        let imgs = (0..2)
            .map(|_| Image::new(1, 16, 16, (0..256).map(|_| rng.uniform() as f32).collect()).unwrap())
            .collect();
        (ts, imgs)
    }

    #[test]
    fn step_updates_student_and_leaves_localizer() {
        let (mut ts, imgs) = small_state(TeacherViews::Landmark);
        let batch: Vec<&Image> = imgs.iter().collect();
        let loc_before = ts.localizer.clone();
        let student_before = ts.student.clone();
        let teacher_before = ts.teacher.clone();
        let stats = lafs_train_step(&mut ts, &batch, 9).unwrap();
        // Soft-target cross-entropy is bounded below by the target entropy.
        assert!(stats.loss.is_finite() && stats.loss >= 0.0);
        assert_eq!(stats.pairs, 2 * 3);
        assert_eq!(ts.localizer, loc_before);
        assert_ne!(ts.student, student_before);
        let mut expect = teacher_before;
        ema_update(&mut expect, &ts.student, stats.ema_momentum).unwrap();
        assert_eq!(expect, ts.teacher);
    }

    #[test]
    fn landmark_mode_matches_lafs_step() {
        let (mut a, imgs) = small_state(TeacherViews::Landmark);
        let mut b = a.clone();
        let batch: Vec<&Image> = imgs.iter().collect();
        let sa = lafs_train_step(&mut a, &batch, 4).unwrap();
        let sb = dino_train_step(&mut b, &batch, 4).unwrap();
        assert_eq!(sa, sb);
        assert_eq!(a.student, b.student);
    }

    #[test]
    fn grid_and_mixed_modes_run() {
        for mode in [TeacherViews::Grid, TeacherViews::Mixed] {
            let (mut ts, imgs) = small_state(mode);
            let batch: Vec<&Image> = imgs.iter().collect();
            let s = dino_train_step(&mut ts, &batch, 1).unwrap();
            assert!(s.loss.is_finite());
            let want = if mode == TeacherViews::Mixed { 4 * 3 } else { 2 * 3 };
            assert_eq!(s.pairs, want);
        }
    }

    #[test]
    fn teacher_temperature_warms_up_linearly() {
        let (mut ts, _) = small_state(TeacherViews::Landmark);
        assert_eq!(ts.current_teacher_temp(), 0.04);
        ts.config.teacher_temp_start = 0.02;
        ts.config.teacher_temp_warmup = 4;
        let temps: Vec<f32> = (0..6)
            .map(|s| {
                ts.step = s;
                ts.current_teacher_temp()
            })
            .collect();
        for (got, want) in temps.iter().zip([0.02, 0.025, 0.03, 0.035, 0.04, 0.04]) {
            assert!((got - want).abs() < 1e-7, "{temps:?}");
        }
    }

    #[test]
    fn trajectory_is_deterministic() {
        let (a, imgs) = small_state(TeacherViews::Landmark);
        let batch: Vec<&Image> = imgs.iter().collect();
        let run = |mut ts: TeacherStudent| -> Vec<f32> {
            (0..3).map(|_| lafs_train_step(&mut ts, &batch, 77).unwrap().loss).collect()
        };
        let (x, y) = (run(a.clone()), run(a));
        assert_eq!(x.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), y.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}
