//! Optimizer, training loop, evaluation and the ablation sweep.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{DataSource, LrSchedule, OptimizerConfig, RunConfig};
use crate::data::{self, Sample};
use crate::error::{Error, Result};
use crate::labels::RemapTable;
use crate::metrics::{self, MetricAccumulator, MetricReport};
use crate::model::{Components, ForwardOptions, LossValues, Model, Targets};
use crate::params::ParamSet;
use crate::tensor::{Tape, Tensor};

/// Adam with decoupled weight decay. Parameters that receive no gradient
/// in a step (disabled components) are left untouched, moments included.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: OptimizerConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(cfg: &OptimizerConfig, ps: &ParamSet) -> Self {
        let zeros = || ps.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            cfg: cfg.clone(),
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Learning rate for step `step` (zero-based) of `total`.
    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        match self.cfg.schedule {
            LrSchedule::Constant => self.cfg.lr,
            LrSchedule::Cosine => {
                let t = step as f64 / total.max(1) as f64;
                0.5 * self.cfg.lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    pub fn update(&mut self, ps: &mut ParamSet, grads: &[Option<Tensor>], lr: f64) {
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for id in ps.ids().collect::<Vec<_>>() {
            let Some(g) = &grads[id.index()] else {
                continue;
            };
            let (m, v) = (self.m[id.index()].data_mut(), self.v[id.index()].data_mut());
            let p = ps.value_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let step = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                p[i] -= lr * (step + c.weight_decay * p[i]);
            }
        }
    }
}

/// Mean loss components over an epoch, plus validation metrics when a
/// validation set is present.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub lambda_bbl: f64,
    pub loss: LossValues,
    pub val_miou: Option<f64>,
    pub val_biou: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub optimizer: AdamW,
    pub log: Vec<EpochLog>,
    pub checkpoint: Checkpoint,
}

/// Loss and parameter gradients for one sample.
pub fn sample_gradients(
    model: &Model,
    sample: &Sample,
    targets: &Targets,
    cfg: &RunConfig,
    progress: f64,
) -> Result<(LossValues, Vec<Option<Tensor>>)> {
    let mut tape = Tape::new();
    let x = tape.constant(sample.image.clone());
    let out = model.forward(&mut tape, x, ForwardOptions::default())?;
    let loss = model.losses(&mut tape, &out, targets, &cfg.losses, progress)?;
    let values = loss.values(&tape);
    let grads = tape.backward(loss.total)?;
    let ps = model.params();
    Ok((values, ps.ids().map(|id| grads.param(id).cloned()).collect()))
}

fn diverged(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite(_) => Error::Diverged { epoch, step },
        other => other,
    }
}

/// Trains `model` in place. Sample order is reshuffled each epoch from the
/// run seed; the whole loop is single-threaded and bit-reproducible.
pub fn fit(
    cfg: &RunConfig,
    model: &mut Model,
    train: &[Sample],
    val: &[Sample],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(AdamW, Vec<EpochLog>)> {
    let mut opt = AdamW::new(&cfg.optimizer, model.params());
    let targets: Vec<Targets> = train
        .iter()
        .map(|s| Targets::new(&s.gt_noisy, &cfg.losses))
        .collect::<Result<_>>()?;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    let total_steps = (cfg.epochs * train.len().div_ceil(cfg.batch_size.max(1))) as u64;
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        let progress = epoch as f64 / cfg.epochs as f64;
        let mut sum = LossValues::default();
        let mut steps = 0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Vec<Option<Tensor>> = vec![None; model.params().len()];
            for &i in batch {
                let (values, grads) = sample_gradients(model, &train[i], &targets[i], cfg, progress)
                    .map_err(|e| diverged(e, epoch, step))?;
                if !values.total.is_finite() {
                    return Err(Error::Diverged { epoch, step });
                }
                sum.total += values.total;
                sum.seg += values.seg;
                sum.diag += values.diag;
                sum.bbl += values.bbl;
                for (a, g) in acc.iter_mut().zip(grads) {
                    match (a.as_mut(), g) {
                        (Some(a), Some(g)) => {
                            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += y;
                            }
                        }
                        (None, Some(g)) => *a = Some(g),
                        _ => {}
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for g in acc.iter_mut().flatten() {
                g.data_mut().iter_mut().for_each(|x| *x *= inv);
            }
            let lr = opt.lr_at(step as u64, total_steps);
            opt.update(model.params_mut(), &acc, lr);
            if model.params().iter().any(|(_, _, t)| !t.is_finite()) {
                return Err(Error::Diverged { epoch, step });
            }
            step += 1;
            steps += 1;
        }
        let n = train.len().max(1) as f64;
        let (val_miou, val_biou) = if val.is_empty() {
            (None, None)
        } else {
            let r = evaluate(model, val, cfg.metrics.biou_band)?.aggregate;
            (Some(r.miou), Some(r.biou))
        };
        let entry = EpochLog {
            epoch,
            steps,
            lambda_bbl: if model.components().bbl {
                cfg.losses.bbl_weight(progress)
            } else {
                0.0
            },
            loss: LossValues {
                total: sum.total / n,
                seg: sum.seg / n,
                diag: sum.diag / n,
                bbl: sum.bbl / n,
            },
            val_miou,
            val_biou,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok((opt, log))
}

/// Builds the model from `cfg`, loads its data, and trains.
pub fn train(cfg: &RunConfig, on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_set = load_source(&cfg.data.train)?;
    let val_set = load_source(&cfg.data.val)?;
    train_with(cfg, &train_set, &val_set, on_epoch)
}

pub fn train_with(
    cfg: &RunConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let mut model = Model::new(&cfg.model(), cfg.ablation, cfg.seed)?;
    let (optimizer, log) = fit(cfg, &mut model, train_set, val_set, on_epoch)?;
    let checkpoint = Checkpoint::capture(cfg, &model, &optimizer, cfg.epochs);
    Ok(TrainOutcome {
        model,
        optimizer,
        log,
        checkpoint,
    })
}

pub fn load_source(src: &DataSource) -> Result<Vec<Sample>> {
    match src {
        DataSource::Synthetic { spec, count } => data::generate_set(spec, *count),
        DataSource::Directory { images, masks, remap } => {
            let table = match remap.as_str() {
                "rugd" => RemapTable::rugd(),
                "rellis3d" => RemapTable::rellis3d(),
                "identity" => RemapTable::six_class_identity(),
                path => RemapTable::parse(&std::fs::read_to_string(path)?)?,
            };
            data::load_dir(images, masks, &table)?.collect()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub per_image: Vec<(String, MetricReport)>,
    pub aggregate: MetricReport,
}

impl Evaluation {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        metrics::write_csv(f, &self.per_image, &self.aggregate)
    }
}

/// Single-scale evaluation against the clean labels at full resolution.
pub fn evaluate(model: &Model, samples: &[Sample], biou_band: usize) -> Result<Evaluation> {
    let classes = model.num_classes();
    let mut total = MetricAccumulator::new(classes, biou_band);
    let mut per_image = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        if s.gt_clean.class_count() != classes {
            return Err(Error::Config(format!(
                "model predicts {classes} classes but data has {}",
                s.gt_clean.class_count()
            )));
        }
        let pred = model.predict(&s.image)?;
        let mut one = MetricAccumulator::new(classes, biou_band);
        one.add(&pred.labels, &s.gt_clean)?;
        total.merge(&one);
        let name = match &s.meta.source {
            Some(p) => p.display().to_string(),
            None => format!("{}:{}", s.meta.seed, i),
        };
        per_image.push((name, one.report()));
    }
    Ok(Evaluation {
        per_image,
        aggregate: total.report(),
    })
}

/// The five incremental rows: baseline, then GLTR, RAD, CAPR and BBL added
/// one at a time.
pub fn ablation_variants() -> [(&'static str, Components); 5] {
    let none = Components::NONE;
    let gltr = Components { gltr: true, ..none };
    let rad = Components { rad: true, ..gltr };
    let capr = Components { capr: true, ..rad };
    [
        ("baseline", none),
        ("+GLTR", gltr),
        ("+RAD", rad),
        ("+CAPR", capr),
        ("+BBL", Components::ALL),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub report: MetricReport,
    pub log: Vec<EpochLog>,
}

/// Trains and evaluates every variant from the same seed on the same data.
pub fn ablate(
    cfg: &RunConfig,
    train_set: &[Sample],
    eval_set: &[Sample],
    mut on_epoch: impl FnMut(&str, &EpochLog),
) -> Result<Vec<AblationRow>> {
    ablation_variants()
        .into_iter()
        .map(|(name, components)| {
            let cfg = RunConfig {
                ablation: components,
                ..cfg.clone()
            };
            let out = train_with(&cfg, train_set, &[], |e| on_epoch(name, e))?;
            let report = evaluate(&out.model, eval_set, cfg.metrics.biou_band)?.aggregate;
            Ok(AblationRow {
                variant: name.to_string(),
                report,
                log: out.log,
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,miou,biou,aacc\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            r.variant, r.report.miou, r.report.biou, r.report.aacc
        ));
    }
    s
}
