//! Training loop and multi-seed experiments.
//!
//! Every run is a pure function of `(TrainConfig, seed)`: the dataset,
//! the initial parameters, the batch order and every augmentation are drawn
//! from seed-derived streams, and within a run execution is sequential.
//! Different seeds of one experiment run in parallel.

mod config;
mod optim;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{augment, build_split, images_to_tensor, DatasetSplit, Image, ShiftMode, Subset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::losses::{mean_abs_cosine, total_loss, BatchViews, LossBreakdown, StyleObjective, TeacherTargets};
use crate::metrics::Scores;
use crate::models::{InitSpec, ModelBundle};
use crate::seed::{derive_seed, rng_from, stream};
use crate::tensor::{Tape, Tensor};

pub use config::{TrainConfig, CONFIG_KEYS};
pub use optim::{cosine_lr, sgd_update, Sgd};

const EVAL_CHUNK: usize = 256;

/// Loss terms of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

pub const TRACE_HEADER: &str = "step,epoch,lr,L_rep_u,L_rep_s,L_cls_u,L_cls_s,L_style,total,mean_abs_cos_zv";

impl StepRecord {
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step, self.epoch, self.lr, l.rep_u, l.rep_s, l.cls_u, l.cls_s, l.style, l.total, l.mean_abs_cos
        )
    }
}

pub fn trace_csv(trace: &[StepRecord]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in trace {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Step-averaged loss terms of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub loss: LossBreakdown,
}

/// Number of batches per epoch and how many labeled and unlabeled rows
/// each one takes. Rows are split proportionally and every row is used
/// exactly once.
pub fn batch_plan(n_labeled: usize, n_unlabeled: usize, batch_size: usize) -> Vec<(usize, usize)> {
    let n = n_labeled + n_unlabeled;
    if n == 0 {
        return Vec::new();
    }
    let mut nb = n.div_ceil(batch_size);
    for part in [n_labeled, n_unlabeled] {
        if part > 0 {
            nb = nb.min(part);
        }
    }
    let nb = nb.max(1);
    let cut = |total: usize, b: usize| total * b / nb;
    (0..nb)
        .map(|b| (cut(n_labeled, b + 1) - cut(n_labeled, b), cut(n_unlabeled, b + 1) - cut(n_unlabeled, b)))
        .collect()
}

fn views_tensor(images: &[Image]) -> Result<Tensor<f32>> {
    images_to_tensor(images.iter())
}

/// One pass over both splits.
///
/// Rows are shuffled per epoch, each batch mixes labeled and unlabeled rows
/// proportionally, every row is augmented into two views, and one SGD step
/// is taken on the total objective. Step records are appended to `trace`.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    model: &mut ModelBundle<f32>,
    sgd: &mut Sgd<f32>,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    run_seed: u64,
    epoch: usize,
    trace: &mut Vec<StepRecord>,
) -> Result<EpochStats> {
    let (nl, nu) = (split.labeled.len(), split.unlabeled.len());
    if nl + nu == 0 {
        return Err(Error::InsufficientData("empty training split".into()));
    }
    let lr = cosine_lr(epoch, cfg)?;
    let mut rng = rng_from(&[run_seed, stream::SHUFFLE, epoch as u64]);
    let mut lab: Vec<usize> = (0..nl).collect();
    let mut unl: Vec<usize> = (0..nu).collect();
    lab.shuffle(&mut rng);
    unl.shuffle(&mut rng);

    let mut sum = LossBreakdown::default();
    let plan = batch_plan(nl, nu, cfg.batch_size);
    let (mut li, mut ui) = (0, 0);
    for (take_l, take_u) in &plan {
        let rows_l = &lab[li..li + take_l];
        let rows_u = &unl[ui..ui + take_u];
        li += take_l;
        ui += take_u;

        let mut first = Vec::with_capacity(take_l + take_u);
        let mut second = Vec::with_capacity(take_l + take_u);
        let mut labels = Vec::with_capacity(take_l + take_u);
        let rows = rows_l
            .iter()
            .map(|&i| (&split.labeled, i, i, true))
            .chain(rows_u.iter().map(|&i| (&split.unlabeled, i, nl + i, false)));
        for (subset, i, global, seen) in rows {
            let (a, b) = augment(&subset.images[i], derive_seed(&[run_seed, stream::AUGMENT, epoch as u64, global as u64]));
            first.push(a);
            second.push(b);
            labels.push(seen.then_some(subset.labels[i]));
        }

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let x = tape.constant(views_tensor(&first)?);
        let xp = tape.constant(views_tensor(&second)?);
        let (h, z) = bound.forward_content(&mut tape, x)?;
        let (h_prime, z_prime) = bound.forward_content(&mut tape, xp)?;
        let (v, v_prime) = if bound.has_style() {
            (Some(bound.forward_style(&mut tape, x)?), Some(bound.forward_style(&mut tape, xp)?))
        } else {
            (None, None)
        };
        let views = BatchViews { z, z_prime, h, h_prime, v, v_prime, labels };
        let teacher = TeacherTargets::from_views(&tape, &views, bound.prototypes, &cfg.loss)?;
        let (total, bd) = total_loss(&mut tape, &views, bound.prototypes, &teacher, &cfg.loss)?;
        if !bd.total.is_finite() {
            return Err(Error::NonFinite(format!("total loss {} at epoch {epoch}, step {}", bd.total, trace.len())));
        }
        tape.backward(total)?;
        model.collect_grads(&tape, &bound)?;
        sgd.step(&mut model.params_mut(), lr)?;

        trace.push(StepRecord { step: trace.len(), epoch, lr, loss: bd });
        for (acc, x) in fields_mut(&mut sum).into_iter().zip(fields(&bd)) {
            *acc += x;
        }
    }
    let n = plan.len() as f64;
    for acc in fields_mut(&mut sum) {
        *acc /= n;
    }
    Ok(EpochStats { epoch, lr, steps: plan.len(), loss: sum })
}

fn fields(l: &LossBreakdown) -> [f64; 7] {
    [l.rep_u, l.rep_s, l.cls_u, l.cls_s, l.style, l.total, l.mean_abs_cos]
}

fn fields_mut(l: &mut LossBreakdown) -> [&mut f64; 7] {
    [&mut l.rep_u, &mut l.rep_s, &mut l.cls_u, &mut l.cls_s, &mut l.style, &mut l.total, &mut l.mean_abs_cos]
}

/// `(h, z, v)` for a whole subset, in chunks.
pub fn embed_subset(
    model: &ModelBundle<f32>,
    images: &[Image],
) -> Result<(Tensor<f32>, Tensor<f32>, Option<Tensor<f32>>)> {
    let mut hs = Vec::new();
    let mut zs = Vec::new();
    let mut vs = Vec::new();
    for chunk in images.chunks(EVAL_CHUNK) {
        let (h, z, v) = model.infer(&views_tensor(chunk)?)?;
        hs.extend_from_slice(h.data());
        zs.extend_from_slice(z.data());
        if let Some(v) = v {
            vs.extend_from_slice(v.data());
        }
    }
    let n = images.len();
    let h = Tensor::new(vec![n, model.dims.latent], hs)?;
    let z = Tensor::new(vec![n, model.dims.embed], zs)?;
    let v = if model.style_encoder.is_some() { Some(Tensor::new(vec![n, model.dims.embed], vs)?) } else { None };
    Ok((h, z, v))
}

/// Assigns each row of `h` to the most similar novel prototype and returns
/// global class ids. Seen prototypes are never chosen.
pub fn assign_novel(h: &Tensor<f32>, prototypes: &Tensor<f32>, num_seen: usize) -> Result<Vec<usize>> {
    let (n, d) = h.matrix_dims()?;
    let (k, dc) = prototypes.matrix_dims()?;
    if d != dc || num_seen >= k {
        return Err(Error::Shape(format!("features {:?}, prototypes {:?}, {num_seen} seen", h.dims(), prototypes.dims())));
    }
    let unit = |row: &[f32]| {
        let norm = row.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt().max(1e-12);
        row.iter().map(|x| *x as f64 / norm).collect::<Vec<f64>>()
    };
    let protos: Vec<Vec<f64>> = (num_seen..k).map(|j| unit(prototypes.row(j))).collect();
    Ok((0..n)
        .map(|i| {
            let x = unit(h.row(i));
            let mut best = (f64::NEG_INFINITY, 0);
            for (j, c) in protos.iter().enumerate() {
                let s: f64 = x.iter().zip(c).map(|(a, b)| a * b).sum();
                if s > best.0 {
                    best = (s, j);
                }
            }
            num_seen + best.1
        })
        .collect())
}

/// Final numbers of one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub scores: Scores,
    /// Held-out mean `|cos(z, v)|` before the first and after the last
    /// step; `NaN` without a style encoder.
    pub heldout_cos_init: f64,
    pub heldout_cos_final: f64,
    pub epochs: Vec<EpochStats>,
}

/// Everything one seed produces, beyond what goes into the report.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub result: SeedResult,
    pub model: ModelBundle<f32>,
    pub split: DatasetSplit,
    /// Predicted global class ids of the unlabeled rows.
    pub predictions: Vec<usize>,
    /// Backbone features of the unlabeled rows, `[N_u, latent]`.
    pub features: Tensor<f32>,
}

/// The dataset recipe of one run, with its seed derived from the run seed.
/// Severity, corruption kind and shift mode do not enter the derivation,
/// so runs that differ only in style share their content.
pub fn run_data_spec(cfg: &TrainConfig, run_seed: u64) -> SyntheticSpec {
    SyntheticSpec { seed: derive_seed(&[run_seed, stream::DATA]), ..cfg.data }
}

fn heldout_split(cfg: &TrainConfig, run_seed: u64) -> Result<DatasetSplit> {
    build_split(&SyntheticSpec {
        seed: derive_seed(&[run_seed, stream::HELDOUT]),
        samples_per_class: cfg.heldout_per_class,
        ..cfg.data
    })
}

fn heldout_cos(model: &ModelBundle<f32>, heldout: &DatasetSplit) -> Result<f64> {
    let all: Vec<Image> = heldout.labeled.images.iter().chain(&heldout.unlabeled.images).cloned().collect();
    match embed_subset(model, &all)? {
        (_, z, Some(v)) => mean_abs_cosine(&z, &v),
        _ => Ok(f64::NAN),
    }
}

/// Trains one seed. Step records are appended to `trace` as they are
/// produced, so a failed run leaves its partial trace behind.
pub fn train_run(cfg: &TrainConfig, run_seed: u64, trace: &mut Vec<StepRecord>) -> Result<RunOutput> {
    cfg.validate()?;
    let split = build_split(&run_data_spec(cfg, run_seed))?;
    let heldout = heldout_split(cfg, run_seed)?;
    let mut model = ModelBundle::<f32>::new(cfg.model, InitSpec::new(run_seed), cfg.with_style_encoder)?;
    model.set_trainable(cfg.loss.w > 0.0);
    let heldout_cos_init = heldout_cos(&model, &heldout)?;

    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        epochs.push(train_epoch(&mut model, &mut sgd, &split, cfg, run_seed, epoch, trace)?);
    }

    let (features, _, _) = embed_subset(&model, &split.unlabeled.images)?;
    let predictions = assign_novel(&features, &model.prototypes, cfg.model.num_seen)?;
    let scores = Scores::compute(&split.unlabeled.labels, &predictions)?;
    let result = SeedResult {
        seed: run_seed,
        scores,
        heldout_cos_init,
        heldout_cos_final: heldout_cos(&model, &heldout)?,
        epochs,
    };
    Ok(RunOutput { result, model, split, predictions, features })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation (denominator `n − 1`); 0 for one value.
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: TrainConfig,
    pub seeds: Vec<SeedResult>,
    pub acc: Summary,
    pub nmi: Summary,
    pub ari: Summary,
}

impl ExperimentReport {
    pub fn from_seeds(config: TrainConfig, seeds: Vec<SeedResult>) -> Self {
        let pick = |f: fn(&Scores) -> f64| Summary::of(&seeds.iter().map(|s| f(&s.scores)).collect::<Vec<_>>());
        Self { config, acc: pick(|s| s.acc), nmi: pick(|s| s.nmi), ari: pick(|s| s.ari), seeds }
    }

    pub fn run_seeds(config: &TrainConfig) -> Vec<u64> {
        (0..config.num_seeds as u64).map(|i| config.seed.wrapping_add(i)).collect()
    }
}

/// One seed's outcome together with the trace it produced, successful or
/// not.
pub struct SeedAttempt {
    pub seed: u64,
    pub trace: Vec<StepRecord>,
    pub outcome: Result<RunOutput>,
}

/// Runs every seed in parallel and keeps each attempt, including failures.
pub fn run_seeds(cfg: &TrainConfig) -> Result<Vec<SeedAttempt>> {
    cfg.validate()?;
    Ok(ExperimentReport::run_seeds(cfg)
        .into_par_iter()
        .map(|seed| {
            let mut trace = Vec::new();
            let outcome = train_run(cfg, seed, &mut trace);
            SeedAttempt { seed, trace, outcome }
        })
        .collect())
}

/// Aggregates attempts into a report; the first failed seed aborts.
pub fn report_from_attempts(cfg: &TrainConfig, attempts: &[SeedAttempt]) -> Result<ExperimentReport> {
    let mut seeds = Vec::with_capacity(attempts.len());
    for a in attempts {
        match &a.outcome {
            Ok(out) => seeds.push(out.result.clone()),
            Err(e) => return Err(e.with_context(&format!("seed {}", a.seed))),
        }
    }
    Ok(ExperimentReport::from_seeds(*cfg, seeds))
}

pub fn run_experiment(cfg: &TrainConfig) -> Result<ExperimentReport> {
    report_from_attempts(cfg, &run_seeds(cfg)?)
}

/// One condition of the severity sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub severity: u8,
    pub shift_mode: ShiftMode,
    pub module_on: bool,
    pub acc: Summary,
    pub seed_acc: Vec<f64>,
    pub heldout_cos_init: Vec<f64>,
    pub heldout_cos_final: Vec<f64>,
}

pub const SWEEP_HEADER: &str = "severity,setting,module_on,mean_acc,std";

impl SweepCell {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.severity,
            self.shift_mode.name(),
            u8::from(self.module_on),
            self.acc.mean,
            self.acc.std
        )
    }
}

/// The conditions of the severity sweep for a base configuration: severity
/// 1..=5 × {cmix, call} × {module off (w = 0), module on (orth, `w_on`)}.
pub fn sweep_conditions(base: &TrainConfig, w_on: f64) -> Vec<(u8, ShiftMode, bool, TrainConfig)> {
    let mut out = Vec::new();
    for severity in 1..=5u8 {
        for shift_mode in [ShiftMode::Cmix, ShiftMode::Call] {
            for module_on in [false, true] {
                let mut cfg = *base;
                cfg.data.severity = severity;
                cfg.data.shift_mode = shift_mode;
                cfg.with_style_encoder = true;
                cfg.loss = if module_on {
                    cfg.loss.with_style(StyleObjective::Orth, w_on)
                } else {
                    cfg.loss.with_style(StyleObjective::Orth, 0.0)
                };
                out.push((severity, shift_mode, module_on, cfg));
            }
        }
    }
    out
}

/// Runs every (condition, seed) pair of the sweep in parallel.
pub fn severity_sweep(base: &TrainConfig, w_on: f64) -> Result<Vec<SweepCell>> {
    run_conditions(&sweep_conditions(base, w_on))
}

/// Trains each condition under the seeds of its own configuration, all
/// (condition, seed) pairs in parallel, one cell per condition.
pub fn run_conditions(conditions: &[(u8, ShiftMode, bool, TrainConfig)]) -> Result<Vec<SweepCell>> {
    for (_, _, _, cfg) in conditions {
        cfg.validate()?;
    }
    let jobs: Vec<(usize, u64)> = (0..conditions.len())
        .flat_map(|c| ExperimentReport::run_seeds(&conditions[c].3).into_iter().map(move |s| (c, s)))
        .collect();
    let results: Vec<(usize, SeedResult)> = jobs
        .into_par_iter()
        .map(|(c, seed)| {
            let mut trace = Vec::new();
            train_run(&conditions[c].3, seed, &mut trace).map(|out| (c, out.result))
        })
        .collect::<Result<_>>()?;
    Ok(conditions
        .iter()
        .enumerate()
        .map(|(c, (severity, shift_mode, module_on, _))| {
            let mine: Vec<&SeedResult> = results.iter().filter(|(i, _)| *i == c).map(|(_, r)| r).collect();
            let seed_acc: Vec<f64> = mine.iter().map(|r| r.scores.acc).collect();
            SweepCell {
                severity: *severity,
                shift_mode: *shift_mode,
                module_on: *module_on,
                acc: Summary::of(&seed_acc),
                seed_acc,
                heldout_cos_init: mine.iter().map(|r| r.heldout_cos_init).collect(),
                heldout_cos_final: mine.iter().map(|r| r.heldout_cos_final).collect(),
            }
        })
        .collect())
}

pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for c in cells {
        out.push_str(&c.csv_row());
        out.push('\n');
    }
    out
}

/// Subset images as one `[n, size*size]` tensor.
pub fn subset_tensor(subset: &Subset) -> Result<Tensor<f32>> {
    views_tensor(&subset.images)
}
