//! End-to-end optimisation of `d-SNE + α·CE_source + β·CE_target`,
//! accuracy evaluation, and embedding export.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::loss::{dsne_loss, DsneLossConfig, LossMode};
use crate::net::{self, Arch, Batch, ForwardResult, Gradients, ModelParams, SgdMomentum};
use crate::sampler::{self, FewShotSplit, SamplerRng};
use crate::tensor::Matrix;

/// Number of samples pushed through the network at once during evaluation.
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub margin: f64,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// Optimiser steps per epoch; `None` means one pass over the source set.
    pub steps_per_epoch: Option<usize>,
    pub source_batch: usize,
    pub target_batch: usize,
    pub seed: u64,
    pub shared_weights: bool,
    pub loss_mode: LossMode,
    pub normalize_embeddings: bool,
    /// Accuracies are measured every `eval_every` epochs and after the last.
    pub eval_every: usize,
    pub arch: Arch,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.1,
            margin: 1.0,
            lr: 0.01,
            momentum: 0.9,
            epochs: 100,
            steps_per_epoch: None,
            source_batch: 64,
            target_batch: 16,
            seed: 1,
            shared_weights: true,
            loss_mode: LossMode::Hausdorff,
            normalize_embeddings: false,
            eval_every: 10,
            arch: Arch::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("margin", self.margin),
            ("lr", self.lr),
            ("momentum", self.momentum),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be a finite value >= 0")));
            }
        }
        let positive = [
            ("epochs", self.epochs),
            ("source_batch", self.source_batch),
            ("target_batch", self.target_batch),
            ("eval_every", self.eval_every),
            ("steps_per_epoch", self.steps_per_epoch.unwrap_or(1)),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        self.arch.validate()
    }

    pub fn loss_config(&self) -> DsneLossConfig {
        DsneLossConfig {
            mode: self.loss_mode,
            margin: self.margin,
            normalize: self.normalize_embeddings,
        }
    }

    fn steps(&self, source_len: usize) -> usize {
        self.steps_per_epoch
            .unwrap_or_else(|| source_len.div_ceil(self.source_batch).max(1))
    }
}

/// Loss terms of one step. `total` is always recomposed from the parts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dsne: f64,
    pub ce_source: f64,
    pub ce_target: f64,
    pub consistency: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(dsne: f64, ce_source: f64, ce_target: f64, consistency: f64, alpha: f64, beta: f64, lambda: f64) -> Self {
        Self {
            dsne,
            ce_source,
            ce_target,
            consistency,
            total: dsne + alpha * ce_source + beta * ce_target + lambda * consistency,
        }
    }

    /// Names the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("dsne", self.dsne),
            ("ce_source", self.ce_source),
            ("ce_target", self.ce_target),
            ("consistency", self.consistency),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub target_acc: Option<f64>,
    pub source_acc: Option<f64>,
    pub loss_dsne: f64,
    pub loss_ce_s: f64,
    pub loss_ce_t: f64,
    pub loss_consistency: f64,
    pub loss_total: f64,
    pub skipped_targets: usize,
}

impl MetricsRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialise")
    }
}

#[derive(Debug, Default)]
pub(crate) struct EpochAccumulator {
    sum: LossBreakdown,
    steps: usize,
    skipped: usize,
}

impl EpochAccumulator {
    pub(crate) fn add(&mut self, l: &LossBreakdown, skipped: usize) {
        self.sum.dsne += l.dsne;
        self.sum.ce_source += l.ce_source;
        self.sum.ce_target += l.ce_target;
        self.sum.consistency += l.consistency;
        self.sum.total += l.total;
        self.steps += 1;
        self.skipped += skipped;
    }

    pub(crate) fn finish(&self, epoch: usize, target_acc: Option<f64>, source_acc: Option<f64>) -> MetricsRecord {
        let n = self.steps.max(1) as f64;
        MetricsRecord {
            epoch,
            target_acc,
            source_acc,
            loss_dsne: self.sum.dsne / n,
            loss_ce_s: self.sum.ce_source / n,
            loss_ce_t: self.sum.ce_target / n,
            loss_consistency: self.sum.consistency / n,
            loss_total: self.sum.total / n,
            skipped_targets: self.skipped,
        }
    }
}

/// Mean cross-entropy of softmax(logits) against `labels`, and its gradient.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (b, c) = logits.shape();
    if labels.len() != b {
        return Err(Error::Shape(format!("{b} logit rows but {} labels", labels.len())));
    }
    if b == 0 {
        return Ok((0.0, Matrix::zeros(0, c)));
    }
    let mut grad = Matrix::zeros(b, c);
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Label { label: y, classes: c });
        }
        let row = logits.row(r);
        let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = row.iter().map(|v| (v - top).exp()).sum();
        let lse = top + total.ln();
        loss += lse - row[y];
        let g = grad.row_mut(r);
        for (gi, v) in g.iter_mut().zip(row) {
            *gi = (v - lse).exp() / b as f64;
        }
        g[y] -= 1.0 / b as f64;
    }
    Ok((loss / b as f64, grad))
}

/// Feature extractors for both domains; `target` is `None` when shared.
#[derive(Debug, Clone, PartialEq)]
pub struct Networks {
    pub source: ModelParams,
    pub target: Option<ModelParams>,
}

impl Networks {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        let source = net::init_params(cfg.seed, &cfg.arch)?;
        let target = (!cfg.shared_weights)
            .then(|| net::init_params(cfg.seed.wrapping_add(1), &cfg.arch))
            .transpose()?;
        Ok(Self { source, target })
    }

    pub fn is_shared(&self) -> bool {
        self.target.is_none()
    }

    pub fn target(&self) -> &ModelParams {
        self.target.as_ref().unwrap_or(&self.source)
    }

    pub fn target_mut(&mut self) -> &mut ModelParams {
        self.target.as_mut().unwrap_or(&mut self.source)
    }

    pub fn to_checkpoint(&self) -> net::Checkpoint {
        let mut networks = vec![("source".to_string(), self.source.clone())];
        if let Some(t) = &self.target {
            networks.push(("target".to_string(), t.clone()));
        }
        net::Checkpoint { networks }
    }

    pub fn from_checkpoint(ckpt: &net::Checkpoint) -> Result<Self> {
        let source = ckpt
            .get("source")
            .ok_or_else(|| Error::Format("checkpoint has no source network".into()))?
            .clone();
        Ok(Self {
            source,
            target: ckpt.get("target").cloned(),
        })
    }
}

/// Optimiser state matching a [`Networks`] layout.
#[derive(Debug, Clone)]
pub(crate) struct Optimizers {
    source: SgdMomentum,
    target: Option<SgdMomentum>,
}

impl Optimizers {
    pub(crate) fn new(cfg: &TrainConfig, nets: &Networks) -> Self {
        Self {
            source: SgdMomentum::new(cfg.lr, cfg.momentum),
            target: (!nets.is_shared()).then(|| SgdMomentum::new(cfg.lr, cfg.momentum)),
        }
    }

    pub(crate) fn step(&mut self, nets: &mut Networks, mut g: StepGrads) -> Result<()> {
        match (&mut nets.target, &mut self.target) {
            (Some(tp), Some(topt)) => {
                self.source.step(&mut nets.source, &g.source)?;
                topt.step(tp, &g.target)
            }
            _ => {
                g.source.add_assign(&g.target);
                self.source.step(&mut nets.source, &g.source)
            }
        }
    }
}

/// Gradients of one step, kept per domain network (summed when shared).
#[derive(Debug, Clone)]
pub(crate) struct StepGrads {
    pub source: Gradients,
    pub target: Gradients,
}

pub(crate) struct StepOutcome {
    pub loss: LossBreakdown,
    pub grads: StepGrads,
    pub skipped: usize,
}

fn labels_of(samples: &[&Sample]) -> Vec<usize> {
    samples.iter().map(|s| s.label).collect()
}

fn batch_of(samples: &[&Sample]) -> Result<Batch> {
    Batch::from_images(samples.iter().map(|s| &s.image))
}

fn scaled(mut m: Matrix, k: f64) -> Matrix {
    m.scale(k);
    m
}

/// Loss and gradients of the supervised objective on one freshly drawn batch.
pub(crate) fn supervised_step(
    cfg: &TrainConfig,
    nets: &Networks,
    source: &Dataset,
    labeled_target: &Dataset,
    rng: &mut SamplerRng,
) -> Result<StepOutcome> {
    if labeled_target.is_empty() {
        let idx = sampler::draw_indices(source.len(), cfg.source_batch, rng);
        let picked: Vec<&Sample> = idx.iter().map(|&i| &source.samples[i]).collect();
        let fs = net::forward(&nets.source, &batch_of(&picked)?)?;
        let (ce_s, g_ce_s) = cross_entropy(&fs.logits, &labels_of(&picked))?;
        let loss = LossBreakdown::compose(0.0, ce_s, 0.0, 0.0, cfg.alpha, cfg.beta, 0.0);
        check_finite(&loss)?;
        let gs = net::backward(&nets.source, &fs, &Matrix::zeros(picked.len(), cfg.arch.embedding_dim), &scaled(g_ce_s, cfg.alpha))?;
        let zero = nets.target().zero_grads();
        return Ok(StepOutcome {
            loss,
            grads: StepGrads { source: gs, target: zero },
            skipped: 0,
        });
    }
    let pair = sampler::make_pair_batch(source, labeled_target, cfg.source_batch, cfg.target_batch, rng)?;
    pair_objective(cfg, nets, &pair.source, &pair.target)
}

/// Loss and gradients of the full supervised objective on a fixed pair of
/// source and target samples.
pub fn pair_objective_value(
    cfg: &TrainConfig,
    nets: &Networks,
    source: &[&Sample],
    target: &[&Sample],
) -> Result<LossBreakdown> {
    pair_objective(cfg, nets, source, target).map(|o| o.loss)
}

pub(crate) fn pair_objective(
    cfg: &TrainConfig,
    nets: &Networks,
    source: &[&Sample],
    target: &[&Sample],
) -> Result<StepOutcome> {
    let (ls, lt) = (labels_of(source), labels_of(target));
    let fs = net::forward(&nets.source, &batch_of(source)?)?;
    let ft = net::forward(nets.target(), &batch_of(target)?)?;
    let dsne = dsne_loss(&ft.embeddings, &lt, &fs.embeddings, &ls, &cfg.loss_config())?;
    let (ce_s, g_ce_s) = cross_entropy(&fs.logits, &ls)?;
    let (ce_t, g_ce_t) = cross_entropy(&ft.logits, &lt)?;
    let loss = LossBreakdown::compose(dsne.loss, ce_s, ce_t, 0.0, cfg.alpha, cfg.beta, 0.0);
    check_finite(&loss)?;
    let gs = net::backward(&nets.source, &fs, &dsne.grad_s, &scaled(g_ce_s, cfg.alpha))?;
    let gt = net::backward(nets.target(), &ft, &dsne.grad_t, &scaled(g_ce_t, cfg.beta))?;
    Ok(StepOutcome {
        loss,
        grads: StepGrads { source: gs, target: gt },
        skipped: dsne.skipped_targets,
    })
}

pub(crate) fn check_finite(loss: &LossBreakdown) -> Result<()> {
    match loss.non_finite_term() {
        Some(term) => Err(Error::Numeric(format!("non-finite loss term `{term}`: {loss:?}"))),
        None => Ok(()),
    }
}

/// Datasets a training run reads and evaluates on.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub source: &'a Dataset,
    pub split: &'a FewShotSplit,
    /// Held-out source data for measuring source accuracy, if any.
    pub source_eval: Option<&'a Dataset>,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub networks: Networks,
    pub history: Vec<MetricsRecord>,
}

/// Runs `cfg.epochs` epochs from a fresh initialisation. `on_epoch` sees each
/// record as soon as it is produced.
pub fn train(
    cfg: &TrainConfig,
    data: &TrainData<'_>,
    on_epoch: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<Trained> {
    cfg.validate()?;
    let nets = Networks::init(cfg)?;
    let mut rng = sampler::rng_from_seed(cfg.seed);
    train_from(cfg, nets, data, &mut rng, on_epoch)
}

pub(crate) fn train_from(
    cfg: &TrainConfig,
    mut nets: Networks,
    data: &TrainData<'_>,
    rng: &mut SamplerRng,
    mut on_epoch: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<Trained> {
    if data.source.is_empty() {
        return Err(Error::Protocol("source dataset is empty".into()));
    }
    let mut opt = Optimizers::new(cfg, &nets);
    let steps = cfg.steps(data.source.len());
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut acc = EpochAccumulator::default();
        for _ in 0..steps {
            let out = supervised_step(cfg, &nets, data.source, &data.split.labeled_target, rng)?;
            acc.add(&out.loss, out.skipped);
            opt.step(&mut nets, out.grads)?;
        }
        let (ta, sa) = epoch_accuracies(cfg, epoch, nets.target(), &nets.source, data)?;
        let record = acc.finish(epoch, ta, sa);
        on_epoch(&record)?;
        history.push(record);
    }
    Ok(Trained {
        networks: nets,
        history,
    })
}

pub(crate) fn epoch_accuracies(
    cfg: &TrainConfig,
    epoch: usize,
    target_net: &ModelParams,
    source_net: &ModelParams,
    data: &TrainData<'_>,
) -> Result<(Option<f64>, Option<f64>)> {
    if epoch % cfg.eval_every != 0 && epoch != cfg.epochs {
        return Ok((None, None));
    }
    let ta = (!data.split.eval_target.is_empty())
        .then(|| evaluate(target_net, &data.split.eval_target))
        .transpose()?;
    let sa = data.source_eval.map(|ds| evaluate(source_net, ds)).transpose()?;
    Ok((ta, sa))
}

fn chunked_forward(params: &ModelParams, ds: &Dataset, mut each: impl FnMut(usize, &ForwardResult) -> Result<()>) -> Result<()> {
    for (k, chunk) in ds.samples.chunks(EVAL_CHUNK).enumerate() {
        let batch = Batch::from_images(chunk.iter().map(|s| &s.image))?;
        each(k * EVAL_CHUNK, &net::infer(params, &batch)?)?;
    }
    Ok(())
}

/// Fraction of samples whose arg-max logit (lowest index on ties) equals the label.
pub fn evaluate(params: &ModelParams, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Domain(format!("cannot evaluate on empty dataset {}", ds.name)));
    }
    let mut correct = 0usize;
    chunked_forward(params, ds, |offset, r| {
        for (k, row) in r.logits.iter_rows().enumerate() {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            if best == ds.samples[offset + k].label {
                correct += 1;
            }
        }
        Ok(())
    })?;
    Ok(correct as f64 / ds.len() as f64)
}

/// Header line of the embedding export for dimension `d`.
pub fn embedding_header(d: usize) -> String {
    let mut h = String::from("domain,label");
    for k in 0..d {
        let _ = write!(h, ",e{k}");
    }
    h
}

/// Writes `domain,label,e0..e{d-1}` rows, one per sample, after a header line.
pub fn export_embeddings(params: &ModelParams, ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let file = std::fs::File::create(path).map_err(io)?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "{}", embedding_header(params.arch().embedding_dim)).map_err(io)?;
    chunked_forward(params, ds, |offset, r| {
        for (k, row) in r.embeddings.iter_rows().enumerate() {
            let s = &ds.samples[offset + k];
            let mut line = format!("{},{}", s.domain, s.label);
            for v in row {
                let _ = write!(line, ",{v}");
            }
            writeln!(w, "{line}").map_err(io)?;
        }
        Ok(())
    })?;
    w.flush().map_err(io)
}
