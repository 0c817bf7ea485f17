//! Semi-supervised extension: after supervised training, a student network
//! keeps training on the labeled objective plus an embedding consistency term
//! between two augmented views of unlabeled target images, while a teacher
//! follows the student as an exponential moving average.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::net::{self, Batch, ModelParams};
use crate::sampler::{self, SamplerRng};
use crate::tensor::Matrix;
use crate::trainer::{
    self, check_finite, epoch_accuracies, EpochAccumulator, LossBreakdown, MetricsRecord, Networks,
    Optimizers, TrainConfig, TrainData, Trained,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Maximum shift in pixels along each axis.
    pub max_translate: usize,
    /// Zero padding added before a random crop back to the original size.
    pub crop_pad: usize,
    pub noise_std: f64,
    pub flip_enabled: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_translate: 2,
            crop_pad: 2,
            noise_std: 0.05,
            flip_enabled: false,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            max_translate: 0,
            crop_pad: 0,
            noise_std: 0.0,
            flip_enabled: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise_std {} must be >= 0", self.noise_std)));
        }
        Ok(())
    }
}

/// Shifts content by `(dy, dx)`, filling uncovered pixels with zero.
fn shift(img: &Image, dy: isize, dx: isize) -> Vec<f32> {
    let (h, w, c) = img.shape();
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        let sy = y as isize - dy;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        for x in 0..w {
            let sx = x as isize - dx;
            if sx < 0 || sx >= w as isize {
                continue;
            }
            for ch in 0..c {
                out[(y * w + x) * c + ch] = img.at(sy as usize, sx as usize, ch);
            }
        }
    }
    out
}

fn offset(rng: &mut SamplerRng, max: usize) -> isize {
    if max == 0 {
        0
    } else {
        rng.random_range(-(max as i64)..=max as i64) as isize
    }
}

/// Label-preserving random view: translation, pad-and-crop, optional
/// horizontal flip, then clipped Gaussian pixel noise.
pub fn augment(img: &Image, cfg: &AugmentConfig, rng: &mut SamplerRng) -> Image {
    let (h, w, c) = img.shape();
    // Pad-and-crop of a zero-padded image is a second bounded shift.
    let dy = offset(rng, cfg.max_translate) + offset(rng, cfg.crop_pad);
    let dx = offset(rng, cfg.max_translate) + offset(rng, cfg.crop_pad);
    let mut px = if dy == 0 && dx == 0 {
        img.pixels().to_vec()
    } else {
        shift(img, dy, dx)
    };
    if cfg.flip_enabled && rng.random_bool(0.5) {
        for row in px.chunks_mut(w * c) {
            for x in 0..w / 2 {
                for ch in 0..c {
                    row.swap(x * c + ch, (w - 1 - x) * c + ch);
                }
            }
        }
    }
    if cfg.noise_std > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_std).expect("validated std");
        for p in &mut px {
            *p = (f64::from(*p) + noise.sample(rng)).clamp(0.0, 1.0) as f32;
        }
    }
    Image::from_unit_pixels(h, w, c, px)
}

/// Mean over rows of `‖student − teacher‖²`; the gradient flows to the
/// student only.
pub fn consistency_loss(student: &Matrix, teacher: &Matrix) -> Result<(f64, Matrix)> {
    if student.shape() != teacher.shape() {
        return Err(Error::Shape(format!(
            "student embeddings {:?} vs teacher {:?}",
            student.shape(),
            teacher.shape()
        )));
    }
    let b = student.rows();
    if b == 0 {
        return Ok((0.0, Matrix::zeros(0, student.cols())));
    }
    let mut grad = Matrix::zeros(b, student.cols());
    let mut loss = 0.0;
    for (g, (s, t)) in grad
        .as_mut_slice()
        .iter_mut()
        .zip(student.as_slice().iter().zip(teacher.as_slice()))
    {
        let d = s - t;
        loss += d * d;
        *g = 2.0 * d / b as f64;
    }
    Ok((loss / b as f64, grad))
}

/// Teacher parameters tracking the student by exponential moving average.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    teacher: ModelParams,
    decay: f64,
}

impl EmaState {
    pub fn new(teacher: ModelParams, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::Config(format!("EMA decay {decay} outside [0, 1)")));
        }
        Ok(Self { teacher, decay })
    }

    pub fn teacher(&self) -> &ModelParams {
        &self.teacher
    }

    pub fn into_teacher(self) -> ModelParams {
        self.teacher
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    /// `teacher ← ρ·teacher + (1 − ρ)·student`, elementwise.
    pub fn update(&mut self, student: &ModelParams) -> Result<()> {
        if !self.teacher.same_layout(student) {
            return Err(Error::Shape("teacher and student architectures differ".into()));
        }
        let rho = self.decay;
        for (t, s) in self.teacher.values_mut().zip(student.values()) {
            for (ti, si) in t.iter_mut().zip(s) {
                *ti = rho * *ti + (1.0 - rho) * si;
            }
        }
        Ok(())
    }
}

/// Functional form of [`EmaState::update`].
pub fn ema_update(mut state: EmaState, student: &ModelParams) -> Result<EmaState> {
    state.update(student)?;
    Ok(state)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SemiConfig {
    pub consistency_weight: f64,
    pub ema_decay: f64,
    /// Epochs of the mean-teacher phase.
    pub epochs: usize,
    /// Steps per mean-teacher epoch; `None` uses the supervised default.
    pub steps_per_epoch: Option<usize>,
    pub unlabeled_batch: usize,
    pub augment: AugmentConfig,
}

impl Default for SemiConfig {
    fn default() -> Self {
        Self {
            consistency_weight: 1.0,
            ema_decay: 0.99,
            epochs: 20,
            steps_per_epoch: None,
            unlabeled_batch: 32,
            augment: AugmentConfig::default(),
        }
    }
}

impl SemiConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.consistency_weight >= 0.0 && self.consistency_weight.is_finite()) {
            return Err(Error::Config("consistency_weight must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay {} outside [0, 1)", self.ema_decay)));
        }
        if self.epochs == 0 || self.unlabeled_batch == 0 || self.steps_per_epoch == Some(0) {
            return Err(Error::Config(
                "semi-supervised epochs, steps and unlabeled_batch must be >= 1".into(),
            ));
        }
        self.augment.validate()
    }
}

#[derive(Debug, Clone)]
pub struct SemiTrained {
    /// The student networks at the end of the mean-teacher phase.
    pub student: Networks,
    /// The teacher, used for final target evaluation.
    pub teacher: ModelParams,
    /// Networks as they stood at the end of the supervised phase.
    pub supervised: Networks,
    pub history: Vec<MetricsRecord>,
}

impl SemiTrained {
    /// The student networks with the target network replaced by the teacher.
    pub fn evaluation_networks(&self) -> Networks {
        let mut nets = self.student.clone();
        *nets.target_mut() = self.teacher.clone();
        nets
    }
}

/// Mean-teacher phase state: student networks, their optimiser, and the EMA
/// teacher of the student's target network.
pub struct MeanTeacher {
    pub(crate) student: Networks,
    opt: Optimizers,
    ema: EmaState,
}

impl MeanTeacher {
    /// Starts the phase from a completed supervised run; the teacher begins
    /// as an exact copy of the trained target network.
    pub fn from_supervised(cfg: &TrainConfig, semi: &SemiConfig, trained: &Trained) -> Result<Self> {
        semi.validate()?;
        let student = trained.networks.clone();
        let ema = EmaState::new(student.target().clone(), semi.ema_decay)?;
        Ok(Self {
            opt: Optimizers::new(cfg, &student),
            student,
            ema,
        })
    }

    pub fn student(&self) -> &Networks {
        &self.student
    }

    pub fn teacher(&self) -> &ModelParams {
        self.ema.teacher()
    }

    /// One optimisation step followed by one EMA update. Returns the step's
    /// loss terms and skipped-target count.
    pub fn step(
        &mut self,
        cfg: &TrainConfig,
        semi: &SemiConfig,
        data: &TrainData<'_>,
        rng: &mut SamplerRng,
    ) -> Result<(LossBreakdown, usize)> {
        let pool = &data.split.unlabeled_pool;
        if pool.is_empty() {
            return Err(Error::Protocol("unlabeled target pool is empty".into()));
        }
        let mut out = trainer::supervised_step(cfg, &self.student, data.source, &data.split.labeled_target, rng)?;
        let idx = sampler::draw_indices(pool.len(), semi.unlabeled_batch, rng);
        let mut student_view = Vec::with_capacity(idx.len());
        let mut teacher_view = Vec::with_capacity(idx.len());
        for &i in &idx {
            student_view.push(augment(&pool[i], &semi.augment, rng));
            teacher_view.push(augment(&pool[i], &semi.augment, rng));
        }
        let fs = net::forward(self.student.target(), &Batch::from_images(&student_view)?)?;
        let ft = net::infer(self.ema.teacher(), &Batch::from_images(&teacher_view)?)?;
        let (consistency, mut g) = consistency_loss(&fs.embeddings, &ft.embeddings)?;
        g.scale(semi.consistency_weight);
        let gc = net::backward(
            self.student.target(),
            &fs,
            &g,
            &Matrix::zeros(fs.batch_len(), cfg.arch.class_count),
        )?;
        out.grads.target.add_assign(&gc);
        let l = out.loss;
        let loss = LossBreakdown::compose(
            l.dsne,
            l.ce_source,
            l.ce_target,
            consistency,
            cfg.alpha,
            cfg.beta,
            semi.consistency_weight,
        );
        check_finite(&loss)?;
        self.opt.step(&mut self.student, out.grads)?;
        self.ema.update(self.student.target())?;
        Ok((loss, out.skipped))
    }
}

/// Supervised training followed by the mean-teacher phase. Metrics records
/// continue the epoch numbering across phases; phase-two target accuracy is
/// measured with the teacher.
pub fn train_semi_supervised(
    cfg: &TrainConfig,
    semi: &SemiConfig,
    data: &TrainData<'_>,
    mut on_epoch: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<SemiTrained> {
    semi.validate()?;
    if data.split.unlabeled_pool.is_empty() {
        return Err(Error::Protocol("unlabeled target pool is empty".into()));
    }
    let supervised = trainer::train(cfg, data, &mut on_epoch)?;
    // Continue the supervised random stream deterministically.
    let mut rng = sampler::rng_from_seed(cfg.seed ^ 0x5eed_0f_7eac_4e75);
    let mut mt = MeanTeacher::from_supervised(cfg, semi, &supervised)?;
    let steps = semi
        .steps_per_epoch
        .or(cfg.steps_per_epoch)
        .unwrap_or_else(|| data.source.len().div_ceil(cfg.source_batch).max(1));
    let phase_cfg = TrainConfig {
        epochs: cfg.epochs + semi.epochs,
        ..cfg.clone()
    };
    let mut history = supervised.history.clone();
    for epoch in cfg.epochs + 1..=cfg.epochs + semi.epochs {
        let mut acc = EpochAccumulator::default();
        for _ in 0..steps {
            let (loss, skipped) = mt.step(cfg, semi, data, &mut rng)?;
            acc.add(&loss, skipped);
        }
        let source_net = if mt.student.is_shared() {
            mt.teacher()
        } else {
            &mt.student.source
        };
        let (ta, sa) = epoch_accuracies(&phase_cfg, epoch, mt.teacher(), source_net, data)?;
        let record = acc.finish(epoch, ta, sa);
        on_epoch(&record)?;
        history.push(record);
    }
    Ok(SemiTrained {
        teacher: mt.ema.into_teacher(),
        student: mt.student,
        supervised: supervised.networks,
        history,
    })
}
