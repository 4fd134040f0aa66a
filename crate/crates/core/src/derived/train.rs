use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DerivedNetwork, DerivedNetworkSpec};
use crate::data::{random_crop_pair, Batch, Dataset};
use crate::error::{Error, Result};
use crate::nn::functional::{argmax_channels, softmax_cross_entropy};
use crate::nn::{apply_bn_updates, Ctx, Trainable, BN_MOMENTUM};
use crate::search::csv_error;
use crate::tensor::{save_checkpoint, LrSchedule, ParamGroup, ParamStore, Sgd, SgdConfig, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub power: f64,
    pub warmup_iters: usize,
    pub iters: usize,
    pub batch_size: usize,
    pub crop: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Validation every this many iterations, and after the last one.
    pub eval_interval: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.05,
            power: 0.9,
            warmup_iters: 5000,
            iters: 95000,
            batch_size: 8,
            crop: 521,
            momentum: 0.9,
            weight_decay: 1e-4,
            eval_interval: 5000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 || self.batch_size == 0 || self.crop == 0 || self.eval_interval == 0 {
            return Err(Error::invalid("iters, batch_size, crop and eval_interval must be positive"));
        }
        if !(self.lr > 0.0 && self.power > 0.0) || self.momentum < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::invalid("learning rate, power, momentum and weight decay out of range"));
        }
        self.schedule().validate()
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule::polynomial(self.lr, self.power, self.warmup_iters, self.iters)
    }
}

/// One row of `metrics.csv`; `miou` is empty between evaluations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
    #[serde(rename = "mIoU")]
    pub miou: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub out_dir: Option<PathBuf>,
    /// Log a loss row every this many iterations; 0 logs only at evaluations.
    pub log_interval: usize,
}

pub struct TrainOutcome {
    pub net: DerivedNetwork,
    pub store: ParamStore<f32>,
    pub metrics: Vec<MetricsRecord>,
    pub final_miou: Option<MiouReport>,
    pub checkpoint: Option<PathBuf>,
}

/// Pixel-count confusion matrix, `counts[label * n + pred]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MiouReport {
    /// `None` for classes absent from both labels and predictions.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn add(&mut self, pred: &[u8], labels: &[u8], ignore_index: u8) -> Result<()> {
        if pred.len() != labels.len() {
            return Err(Error::shape(format!("{} predictions for {} labels", pred.len(), labels.len())));
        }
        let n = self.num_classes;
        for (&p, &l) in pred.iter().zip(labels) {
            if l == ignore_index {
                continue;
            }
            let (p, l) = (p as usize, l as usize);
            if p >= n || l >= n {
                return Err(Error::Data(format!("label {l} or prediction {p} outside {n} classes")));
            }
            self.counts[l * n + p] += 1;
        }
        Ok(())
    }

    pub fn report(&self) -> MiouReport {
        let n = self.num_classes;
        let per_class: Vec<Option<f64>> = (0..n)
            .map(|c| {
                let tp = self.counts[c * n + c];
                let fn_: u64 = (0..n).map(|p| self.counts[c * n + p]).sum::<u64>() - tp;
                let fp: u64 = (0..n).map(|l| self.counts[l * n + c]).sum::<u64>() - tp;
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        MiouReport { per_class, miou }
    }
}

/// Eval-mode argmax labels for one `(N, 3, H, W)` image batch.
pub fn predict(net: &DerivedNetwork, store: &ParamStore<f32>, images: &Tensor<f32>) -> Result<Vec<u8>> {
    let mut ctx = Ctx::eval(store);
    let x = ctx.input(images.clone());
    let logits = net.forward_logits(&mut ctx, x)?;
    argmax_channels(ctx.value(logits))
}

pub fn evaluate_miou(
    net: &DerivedNetwork,
    store: &ParamStore<f32>,
    dataset: &Dataset,
    num_classes: usize,
    ignore_index: u8,
) -> Result<MiouReport> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    for i in 0..dataset.len() {
        let s = dataset.get(i)?;
        let (h, w) = (s.height(), s.width());
        let images = s.image.reshape(&[1, 3, h, w])?;
        let pred = predict(net, store, &images)?;
        cm.add(&pred, &s.mask, ignore_index)?;
    }
    Ok(cm.report())
}

fn write_metrics(path: &Path, rows: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| csv_error(path, e))
}

/// Momentum SGD under the warmup-polynomial schedule on random crops of
/// `train`, with mIoU on `val` every `eval_interval` iterations.
pub fn train_derived(
    spec: &DerivedNetworkSpec,
    train: &Dataset,
    val: Option<&Dataset>,
    config: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.num_classes != spec.num_classes {
        return Err(Error::invalid(format!(
            "network predicts {} classes, dataset has {}",
            spec.num_classes, train.num_classes
        )));
    }
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let net = DerivedNetwork::new(&mut store, &mut rng, spec)?;
    let ids = store.ids_in(ParamGroup::Weight);
    let mut sgd = Sgd::new(SgdConfig {
        momentum: config.momentum,
        weight_decay: config.weight_decay,
    });
    let schedule = config.schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    let mut order: Vec<usize> = Vec::new();
    let mut metrics = Vec::new();
    let mut final_miou = None;
    let ignore = train.ignore_index;

    for iter in 0..config.iters {
        let mut samples = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            if order.is_empty() {
                order = (0..train.len()).collect();
                order.shuffle(&mut rng);
            }
            let i = order.pop().expect("refilled above");
            samples.push(random_crop_pair(&train.get(i)?, config.crop, &mut rng)?);
        }
        let batch = Batch::stack(&samples, train.subset)?;
        let lr = schedule.lr_at(iter)?;

        let mut ctx = Ctx::new(&store, true, Trainable::Group(ParamGroup::Weight));
        let x = ctx.input(batch.images.clone());
        let logits = net.forward_logits(&mut ctx, x)?;
        let ce = softmax_cross_entropy(&mut ctx.tape, logits, &batch.labels, ignore)?;
        let loss = ctx.value(ce.loss).item() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss {loss} at iteration {iter} on batch [{}]",
                batch.ids.join(", ")
            )));
        }
        let (tape, bn) = ctx.finish();
        if ce.counted > 0 && lr > 0.0 {
            let grads = tape.backward(ce.loss)?;
            sgd.step(&mut store, &grads, &ids, lr)?;
            apply_bn_updates(&mut store, &bn, BN_MOMENTUM)?;
        }

        let done = iter + 1;
        let eval_now = val.is_some() && (done % config.eval_interval == 0 || done == config.iters);
        let log_now = opts.log_interval > 0 && done % opts.log_interval == 0;
        if eval_now || log_now || done == config.iters {
            let miou = match val {
                Some(v) if eval_now => {
                    let r = evaluate_miou(&net, &store, v, spec.num_classes, v.ignore_index)?;
                    let m = r.miou;
                    final_miou = Some(r);
                    Some(m)
                }
                _ => None,
            };
            metrics.push(MetricsRecord {
                iter: done,
                loss,
                lr,
                miou,
            });
        }
    }

    let checkpoint = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let weights = dir.join("weights");
            save_checkpoint(&weights, &store)?;
            write_metrics(&dir.join("metrics.csv"), &metrics)?;
            let spec_path = dir.join("network.json");
            fs::write(&spec_path, spec.to_json()?).map_err(|e| Error::io(&spec_path, e))?;
            Some(weights)
        }
        None => None,
    };
    Ok(TrainOutcome {
        net,
        store,
        metrics,
        final_miou,
        checkpoint,
    })
}
