//! Incremental training loop: augmentation, losses, Nesterov SGD with a
//! polynomial schedule, and the outer loop over increments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{self, LossConfig, LossParts};
use crate::metrics::{self, MetricsReport};
use crate::model::{self, HeadMode, ModelConfig, SegModel, Teacher};
use crate::protocol::{build_increment, Corpus, contiguous_table, IncrementPlan, IncrementSet};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_base: f64,
    pub lr_incremental: f64,
    pub momentum: f64,
    pub poly_power: f64,
    pub epochs: usize,
    /// Epochs for steps after the first; `None` uses `epochs`.
    pub epochs_incremental: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,
    /// `[height, width]`; `None` keeps the full image.
    pub crop: Option<[usize; 2]>,
    pub flip_prob: f64,
    pub loss: LossConfig,
    /// Rescale evidence per increment at evaluation time.
    pub increment_balancing: bool,
    pub freeze_backbone: bool,
    /// Rescale the gradient to at most this global L2 norm.
    pub grad_clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_base: 0.05,
            lr_incremental: 0.01,
            momentum: 0.9,
            poly_power: 0.9,
            epochs: 30,
            epochs_incremental: None,
            batch_size: 8,
            seed: 42,
            crop: None,
            flip_prob: 0.5,
            loss: LossConfig::default(),
            increment_balancing: false,
            freeze_backbone: false,
            grad_clip_norm: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.lr_base > 0.0 && self.lr_incremental > 0.0 && self.lr_base.is_finite() && self.lr_incremental.is_finite())
        {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.poly_power >= 0.0 && self.poly_power.is_finite()) {
            return bad("poly_power must be finite and >= 0");
        }
        if self.epochs == 0 || self.epochs_incremental == Some(0) {
            return bad("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad("flip_prob must lie in [0, 1]");
        }
        if let Some([h, w]) = self.crop {
            if h == 0 || w == 0 {
                return bad("crop extents must be positive");
            }
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return bad("grad_clip_norm must be positive");
            }
        }
        self.loss.validate()
    }

    fn epochs_for(&self, step: usize) -> usize {
        if step == 0 {
            self.epochs
        } else {
            self.epochs_incremental.unwrap_or(self.epochs)
        }
    }

    fn lr_for(&self, step: usize) -> f64 {
        if step == 0 {
            self.lr_base
        } else {
            self.lr_incremental
        }
    }
}

/// `lr0 * (1 - iteration / max_iterations)^power`.
pub fn lr_at(iteration: usize, max_iterations: usize, lr0: f64, power: f64) -> Result<f64> {
    if max_iterations == 0 {
        return Err(Error::InvalidArgument("max_iterations must be positive".into()));
    }
    if iteration > max_iterations {
        return Err(Error::InvalidArgument(format!(
            "iteration {iteration} beyond {max_iterations}"
        )));
    }
    Ok(lr0 * (1.0 - iteration as f64 / max_iterations as f64).powf(power))
}

/// `v <- m v + g; p <- p - lr (g + m v)`.
pub fn sgd_nesterov_step(
    param: &mut Tensor,
    grad: &Tensor,
    velocity: &mut Tensor,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(Error::Shape(format!(
            "parameter {:?}, gradient {:?} and velocity {:?} differ",
            param.shape(),
            grad.shape(),
            velocity.shape()
        )));
    }
    for ((p, &g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(velocity.data_mut()) {
        *v = momentum * *v + g;
        *p -= lr * (g + momentum * *v);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub step: usize,
    pub epoch: usize,
    pub loss_new: f64,
    pub loss_kd_fg: Option<f64>,
    pub loss_kd_u: Option<f64>,
    pub total: f64,
    /// Learning rate of the epoch's last iteration.
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Sample ids in the order they were read.
    pub accessed_ids: Vec<usize>,
}

pub const LOG_CSV_HEADER: &str = "step,epoch,loss_new,loss_kd_fg,loss_kd_u,total,lr";

pub fn log_csv(entries: &[EpochLog]) -> String {
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.8}"));
    let mut out = format!("{LOG_CSV_HEADER}\n");
    for e in entries {
        let _ = writeln!(
            out,
            "{},{},{:.8},{},{},{:.8},{:.8}",
            e.step,
            e.epoch,
            e.loss_new,
            opt(e.loss_kd_fg),
            opt(e.loss_kd_u),
            e.total,
            e.lr
        );
    }
    out
}

fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Random crop and horizontal flip; returns image data and labels.
fn augment(
    image: &Tensor,
    labels: &[u8],
    crop: [usize; 2],
    flip_prob: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, Vec<u8>)> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::Shape(format!("image must be C×H×W, got {:?}", image.shape())));
    };
    let [ch, cw] = crop;
    if ch > h || cw > w {
        return Err(Error::InvalidArgument(format!("crop {ch}×{cw} exceeds image {h}×{w}")));
    }
    let y0 = rng.random_range(0..=h - ch);
    let x0 = rng.random_range(0..=w - cw);
    let flip = rng.random::<f64>() < flip_prob;
    let src_x = |x: usize| x0 + if flip { cw - 1 - x } else { x };
    let data = image.data();
    let mut img = Vec::with_capacity(c * ch * cw);
    for k in 0..c {
        for y in 0..ch {
            let row = (k * h + y0 + y) * w;
            img.extend((0..cw).map(|x| data[row + src_x(x)]));
        }
    }
    let mut lab = Vec::with_capacity(ch * cw);
    for y in 0..ch {
        lab.extend((0..cw).map(|x| labels[(y0 + y) * w + src_x(x)]));
    }
    Ok((img, lab))
}

struct BatchLosses {
    new: f64,
    kd_fg: Option<f64>,
    kd_u: Option<f64>,
    total: f64,
}

fn batch_step(
    model: &mut SegModel,
    teacher: Option<&Teacher>,
    images: Tensor,
    labels: &[u8],
    active: &[usize],
    step: usize,
    config: &TrainConfig,
    velocity: &mut [Tensor],
    lr: f64,
) -> Result<BatchLosses> {
    let lc = &config.loss;
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, true, !config.freeze_backbone);
    let x = tape.constant(images.clone());
    let scores = model.forward(&mut tape, &params, x)?;
    let out = model.head_output(&mut tape, scores)?;
    let weights = if lc.fg_bg_balancing {
        Some(loss::fg_bg_weights(labels, lc.weight_clamp)?)
    } else {
        None
    };
    let new = loss::loss_new(&mut tape, out.full_prob, labels, active, weights.as_deref(), lc.epsilon)?;
    let mut parts = LossParts {
        new,
        kd_fg: None,
        kd_u: None,
    };
    if let Some(teacher) = teacher {
        let mut tt = Tape::new();
        let tx = tt.constant(images);
        let (_, t_out) = teacher.forward(&mut tt, tx)?;
        match (out.evidential, t_out.evidential) {
            (Some(s), Some(te)) => {
                let t_fg = tt.value(te.stats.fg_prob);
                let t_u = tt.value(te.stats.uncertainty);
                parts.kd_fg = Some(loss::loss_kd_fg(
                    &mut tape,
                    s.stats.fg_prob,
                    t_fg,
                    Some(labels),
                    lc.renormalize_student_fg,
                    lc.epsilon,
                )?);
                parts.kd_u = Some(loss::loss_kd_u(&mut tape, s.stats.uncertainty, t_u, Some(labels), lc.epsilon)?);
            }
            (None, None) => {
                let t_prob = tt.value(t_out.full_prob);
                parts.kd_fg = Some(loss::loss_kd_fg(
                    &mut tape,
                    out.full_prob,
                    t_prob,
                    Some(labels),
                    lc.renormalize_student_fg,
                    lc.epsilon,
                )?);
            }
            _ => return Err(Error::InvalidArgument("teacher and student head modes differ".into())),
        }
    }
    let total = loss::total_loss(&mut tape, step, parts, lc)?;
    let value = |v| tape.value(v).item();
    let losses = BatchLosses {
        new: value(parts.new)?,
        kd_fg: parts.kd_fg.map(value).transpose()?,
        kd_u: parts.kd_u.map(value).transpose()?,
        total: value(total)?,
    };
    if !losses.total.is_finite() {
        return Err(Error::NonFinite { op: "total loss" });
    }
    tape.backward(total)?;
    let mut grads: Vec<Option<Tensor>> = params.vars().iter().map(|&v| tape.grad(v)).collect();
    drop(tape);
    if let Some(max) = config.grad_clip_norm {
        let norm = global_norm(&grads);
        if norm > max {
            let factor = max / norm;
            for g in grads.iter_mut().flatten() {
                g.data_mut().iter_mut().for_each(|v| *v *= factor);
            }
        }
    }
    for ((param, grad), vel) in model.parameters_mut().into_iter().zip(grads).zip(velocity.iter_mut()) {
        if let Some(g) = grad {
            sgd_nesterov_step(param, &g, vel, lr, config.momentum)?;
        }
    }
    Ok(losses)
}

fn global_norm(grads: &[Option<Tensor>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Trains `model` (already expanded for step `t`) on `data`.
pub fn train_step_t(
    model: &mut SegModel,
    teacher: Option<&Teacher>,
    data: &IncrementSet,
    plan: &IncrementPlan,
    t: usize,
    config: &TrainConfig,
) -> Result<TrainLog> {
    config.validate()?;
    if t >= plan.num_increments() {
        return Err(Error::InvalidArgument(format!("step {t} outside plan")));
    }
    match (t, teacher) {
        (0, Some(_)) => return Err(Error::InvalidArgument("step 0 takes no teacher".into())),
        (t, None) if t > 0 => return Err(Error::InvalidArgument(format!("step {t} needs a teacher"))),
        _ => {}
    }
    let learned = plan.learned_classes(t);
    if model.num_classes() != learned.len() {
        return Err(Error::InvalidArgument(format!(
            "model has {} classes, step {t} needs {}",
            model.num_classes(),
            learned.len()
        )));
    }
    if let Some(teacher) = teacher {
        if teacher.model().num_classes() != plan.learned_classes(t - 1).len()
            || teacher.model().head_mode() != model.head_mode()
        {
            return Err(Error::InvalidArgument("teacher does not match the previous step".into()));
        }
    }
    if data.samples.is_empty() {
        return Err(Error::InvalidArgument(format!("training set for step {t} is empty")));
    }
    let table = contiguous_table(learned);
    let first_active = learned.len() - plan.increment(t).len() + 1;
    let active: Vec<usize> = (first_active..=learned.len()).collect();
    let &[_, h, w] = data.samples[0].image.shape() else {
        return Err(Error::Shape("training images must be C×H×W".into()));
    };
    let crop = config.crop.unwrap_or([h, w]);

    let epochs = config.epochs_for(t);
    let batches = data.samples.len().div_ceil(config.batch_size);
    let max_iter = epochs * batches;
    let lr0 = config.lr_for(t);
    let mut velocity: Vec<Tensor> = model
        .parameters()
        .iter()
        .map(|(_, p)| Tensor::zeros(p.shape()))
        .collect::<Result<_>>()?;
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..data.samples.len()).collect();
    let mut iteration = 0;
    for epoch in 0..epochs {
        let mut shuffle = sample_rng(config.seed, (1 << 63) | ((t as u64) << 32) | epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut shuffle);
        let mut sums = [0.0; 4];
        let mut lr = lr0;
        for (batch, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut images = Vec::new();
            let mut labels = Vec::new();
            for &i in chunk {
                let s = &data.samples[i];
                log.accessed_ids.push(s.id);
                let remapped: Vec<u8> = s.labels.data().iter().map(|&y| table[y as usize]).collect();
                let stream = ((t as u64) << 48) | ((epoch as u64) << 32) | s.id as u64;
                let mut rng = sample_rng(config.seed, stream);
                let (img, lab) = augment(&s.image, &remapped, crop, config.flip_prob, &mut rng)?;
                images.extend(img);
                labels.extend(lab);
            }
            let images = Tensor::new(&[chunk.len(), model.config().in_channels, crop[0], crop[1]], images)?;
            lr = lr_at(iteration, max_iter, lr0, config.poly_power)?;
            let losses = batch_step(model, teacher, images, &labels, &active, t, config, &mut velocity, lr)
                .map_err(|e| Error::Training {
                    step: t,
                    epoch,
                    batch,
                    reason: e.to_string(),
                })?;
            sums[0] += losses.new;
            sums[1] += losses.kd_fg.unwrap_or(0.0);
            sums[2] += losses.kd_u.unwrap_or(0.0);
            sums[3] += losses.total;
            iteration += 1;
        }
        let mean = |s: f64| s / batches as f64;
        log.epochs.push(EpochLog {
            step: t,
            epoch,
            loss_new: mean(sums[0]),
            loss_kd_fg: (t > 0).then(|| mean(sums[1])),
            loss_kd_u: (t > 0 && model.head_mode() == HeadMode::EvidentialImplicitBg).then(|| mean(sums[2])),
            total: mean(sums[3]),
            lr,
        });
    }
    Ok(log)
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub report: MetricsReport,
    pub log: TrainLog,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub model: SegModel,
    pub steps: Vec<StepOutcome>,
}

impl RunOutcome {
    pub fn final_report(&self) -> &MetricsReport {
        &self.steps.last().expect("a run has at least one step").report
    }

    pub fn reports(&self) -> Vec<&MetricsReport> {
        self.steps.iter().map(|s| &s.report).collect()
    }
}

pub fn step_dir(root: &Path, step: usize) -> PathBuf {
    root.join(format!("step_{step}"))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Runs every step of `plan`. With `out_dir`, writes `step_<t>/checkpoint.bin`,
/// `step_<t>/report.json` and `training_log.csv` under it.
pub fn run_plan(
    plan: &IncrementPlan,
    corpus: &Corpus,
    model_config: &ModelConfig,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<RunOutcome> {
    plan.validate()?;
    config.validate()?;
    let k = corpus.num_classes();
    if let Some(&c) = plan.class_order().iter().find(|&&c| c as usize > k) {
        return Err(Error::Protocol(format!("class {c} not in a {k}-class corpus")));
    }
    let train = corpus.train();
    let test = corpus.test();
    let mut model: Option<SegModel> = None;
    let mut steps = Vec::with_capacity(plan.num_increments());
    let mut all_logs = Vec::new();
    for t in 0..plan.num_increments() {
        let result = (|| -> Result<StepOutcome> {
            let data = build_increment(&train, plan, t)?;
            let size = plan.increment_sizes()[t];
            let teacher = match model.as_mut() {
                None => {
                    model = Some(SegModel::new(model_config.clone(), config.seed, size)?);
                    None
                }
                Some(m) => {
                    let teacher = m.snapshot();
                    m.expand_head(size)?;
                    Some(teacher)
                }
            };
            let m = model.as_mut().expect("initialised above");
            let log = train_step_t(m, teacher.as_ref(), &data, plan, t, config)?;
            let report = metrics::evaluate(m, &test, plan, t, config.increment_balancing)?;
            let checkpoint = match out_dir {
                Some(root) => {
                    let dir = step_dir(root, t);
                    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                    let path = dir.join("checkpoint.bin");
                    model::save_checkpoint(&path, m, plan.class_order(), t)?;
                    write(&dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
                    Some(path)
                }
                None => None,
            };
            Ok(StepOutcome { report, log, checkpoint })
        })()
        .map_err(|e| e.at_step(t))?;
        all_logs.extend(result.log.epochs.iter().cloned());
        steps.push(result);
    }
    if let Some(root) = out_dir {
        write(&root.join("training_log.csv"), log_csv(&all_logs))?;
    }
    Ok(RunOutcome {
        model: model.expect("plan has at least one step"),
        steps,
    })
}
