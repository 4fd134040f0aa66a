//! Bi-level search: weights on trainA with momentum SGD, architecture logits
//! on trainB with Adam, first-order alternation within each mini-batch.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{random_crop_pair, split_train, Batch, Dataset, Subset};
use crate::error::{Error, Result};
use crate::nn::functional::softmax_cross_entropy;
use crate::nn::{apply_bn_updates, Ctx, OperatorKind, Trainable, BN_MOMENTUM};
use crate::search_space::{
    init_relaxation, masked_softmax, mean_entropy, normalize_alpha, normalize_beta, AlphaParams, BetaParams,
    SearchConfig,
};
use crate::supernet::Supernet;
use crate::tensor::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Adam, AdamConfig, LrSchedule, ParamGroup,
    ParamId, ParamStore, Sgd, SgdConfig, Tensor,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchRunConfig {
    pub epochs: usize,
    /// First epoch (0-based) in which architecture logits are updated.
    pub arch_start_epoch: usize,
    pub w_lr_initial: f64,
    pub w_lr_final: f64,
    pub w_momentum: f64,
    pub w_weight_decay: f64,
    pub arch_lr: f64,
    pub arch_weight_decay: f64,
    pub batch_size: usize,
    pub crop: usize,
    pub seed: u64,
}

impl Default for SearchRunConfig {
    fn default() -> Self {
        SearchRunConfig {
            epochs: 60,
            arch_start_epoch: 30,
            w_lr_initial: 0.025,
            w_lr_final: 0.001,
            w_momentum: 0.9,
            w_weight_decay: 3e-4,
            arch_lr: 3e-3,
            arch_weight_decay: 1e-3,
            batch_size: 2,
            crop: 321,
            seed: 0,
        }
    }
}

impl SearchRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.arch_start_epoch >= self.epochs {
            return Err(Error::invalid(format!(
                "need 0 ≤ arch_start_epoch < epochs, got {} and {}",
                self.arch_start_epoch, self.epochs
            )));
        }
        let rates = [self.w_lr_initial, self.w_lr_final, self.arch_lr];
        if rates.iter().any(|&r| !(r > 0.0 && r.is_finite())) || self.w_lr_final > self.w_lr_initial {
            return Err(Error::invalid("learning rates must be positive with final ≤ initial"));
        }
        if !(0.0..1.0).contains(&self.w_momentum) || self.w_weight_decay < 0.0 || self.arch_weight_decay < 0.0 {
            return Err(Error::invalid("momentum must lie in [0, 1) and weight decays be nonnegative"));
        }
        if self.batch_size == 0 || self.crop == 0 {
            return Err(Error::invalid("batch_size and crop must be positive"));
        }
        Ok(())
    }

    /// Architecture steps happen in `epoch` iff this holds.
    pub fn arch_active(&self, epoch: usize) -> bool {
        epoch >= self.arch_start_epoch
    }
}

/// One row of `history.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(rename = "lossA")]
    pub loss_a: f64,
    /// Empty while the architecture is frozen.
    #[serde(rename = "lossB")]
    pub loss_b: Option<f64>,
    pub alpha_entropy: f64,
    pub beta_entropy: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SearchHistory {
    pub records: Vec<EpochRecord>,
}

impl SearchHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for r in &self.records {
            w.serialize(r).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let records = r
            .deserialize()
            .collect::<std::result::Result<Vec<EpochRecord>, _>>()
            .map_err(|e| csv_error(path, e))?;
        Ok(SearchHistory { records })
    }

    /// Largest metric difference to `other`, wall time excluded; `None`
    /// when the histories differ in length or phase.
    pub fn max_metric_diff(&self, other: &SearchHistory) -> Option<f64> {
        if self.len() != other.len() {
            return None;
        }
        let mut worst = 0f64;
        for (a, b) in self.records.iter().zip(&other.records) {
            if a.epoch != b.epoch || a.loss_b.is_some() != b.loss_b.is_some() {
                return None;
            }
            let lb = match (a.loss_b, b.loss_b) {
                (Some(x), Some(y)) => (x - y).abs(),
                _ => 0.0,
            };
            for d in [
                (a.loss_a - b.loss_a).abs(),
                lb,
                (a.alpha_entropy - b.alpha_entropy).abs(),
                (a.beta_entropy - b.beta_entropy).abs(),
            ] {
                worst = worst.max(d);
            }
        }
        Some(worst)
    }
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

/// Contents of `arch_logits.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchLogits {
    pub config: SearchConfig,
    pub epoch: usize,
    pub alpha: AlphaParams,
    pub beta: BetaParams,
}

impl ArchLogits {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let logits: ArchLogits = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        logits.config.validate()?;
        logits.alpha.check()?;
        logits.beta.check(&logits.config)?;
        if logits.alpha.blocks != logits.config.blocks {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: "alpha block count differs from the configuration".into(),
            });
        }
        Ok(logits)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Supernet weights, architecture logits and both optimizers.
pub struct SearchState {
    pub config: SearchConfig,
    pub store: ParamStore<f32>,
    pub net: Supernet,
    sgd: Sgd<f32>,
    adam: Adam<f32>,
    weight_ids: Vec<ParamId>,
    arch_ids: Vec<ParamId>,
}

/// Losses of one search step; `loss_b` is `None` in the frozen phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub loss_a: f64,
    pub loss_b: Option<f64>,
}

impl SearchState {
    pub fn new(config: &SearchConfig, run: &SearchRunConfig) -> Result<Self> {
        let (alpha, beta) = init_relaxation(config, run.seed)?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
        rng.set_stream(1);
        let net = Supernet::new(&mut store, &mut rng, config, &alpha, &beta)?;
        let sgd = Sgd::new(SgdConfig {
            momentum: run.w_momentum,
            weight_decay: run.w_weight_decay,
        });
        let adam = Adam::new(AdamConfig {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: run.arch_weight_decay,
        });
        Ok(SearchState {
            config: config.clone(),
            weight_ids: store.ids_in(ParamGroup::Weight),
            arch_ids: store.ids_in(ParamGroup::Arch),
            store,
            net,
            sgd,
            adam,
        })
    }

    pub fn alpha(&self) -> AlphaParams {
        self.net.alpha_params(&self.store)
    }

    pub fn beta(&self) -> BetaParams {
        self.net.beta_params(&self.store)
    }

    /// Worst deviation from 1 of any normalized α or β group sum, and the
    /// most negative normalized weight (0 if none).
    pub fn normalization_residual(&self) -> Result<(f64, f64)> {
        let a = normalize_alpha(&self.alpha())?;
        let b = normalize_beta(&self.beta(), &self.config)?;
        let mut worst = 0f64;
        let mut min = 0f64;
        for (w, g) in [(&a, OperatorKind::COUNT), (&b, 3)] {
            for chunk in w.chunks(g) {
                if chunk.iter().all(|&p| p == 0.0) {
                    continue;
                }
                worst = worst.max((chunk.iter().sum::<f64>() - 1.0).abs());
                min = min.min(chunk.iter().copied().fold(0.0, f64::min));
            }
        }
        Ok((worst, min))
    }

    fn entropies(&self) -> Result<(f64, f64)> {
        let a = normalize_alpha(&self.alpha())?;
        let b = masked_softmax(&self.beta().logits, 3, Some(&self.config.beta_mask()))?;
        Ok((mean_entropy(&a, OperatorKind::COUNT), mean_entropy(&b, 3)))
    }

    fn loss_on(&self, batch: &Batch, ignore: u8, group: ParamGroup) -> Result<(f64, usize, crate::tensor::Grads<f32>, Vec<crate::nn::BnUpdate<f32>>)> {
        let mut ctx = Ctx::new(&self.store, true, Trainable::Group(group));
        let w = self.net.arch_weights(&mut ctx)?;
        let x = ctx.input(batch.images.clone());
        let logits = self.net.forward(&mut ctx, x, &w)?;
        let ce = softmax_cross_entropy(&mut ctx.tape, logits, &batch.labels, ignore)?;
        let loss = ctx.value(ce.loss).item() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "{:?} loss {loss} on batch [{}]",
                batch.subset,
                batch.ids.join(", ")
            )));
        }
        let (tape, bn) = ctx.finish();
        let grads = tape.backward(ce.loss)?;
        Ok((loss, ce.counted, grads, bn))
    }

    /// Step 1 on `batch_a` (weights only), then, when the architecture phase
    /// is active, step 2 on `batch_b` (logits only). A batch whose labels
    /// are all ignored carries no gradient and leaves its parameters as
    /// they are.
    pub fn step(
        &mut self,
        batch_a: &Batch,
        batch_b: &Batch,
        epoch: usize,
        w_lr: f64,
        run: &SearchRunConfig,
        ignore: u8,
    ) -> Result<StepLosses> {
        if batch_a.subset != Subset::TrainA || batch_b.subset != Subset::TrainB {
            return Err(Error::invalid(format!(
                "weight step needs a trainA batch and architecture step a trainB batch, got {:?} and {:?}",
                batch_a.subset, batch_b.subset
            )));
        }
        let (loss_a, counted, grads, bn) = self.loss_on(batch_a, ignore, ParamGroup::Weight)?;
        if counted > 0 {
            self.sgd.step(&mut self.store, &grads, &self.weight_ids, w_lr)?;
            apply_bn_updates(&mut self.store, &bn, BN_MOMENTUM)?;
        }
        let loss_b = if run.arch_active(epoch) {
            let (loss_b, counted, grads, _) = self.loss_on(batch_b, ignore, ParamGroup::Arch)?;
            if counted > 0 {
                self.adam.step(&mut self.store, &grads, &self.arch_ids, run.arch_lr)?;
            }
            Some(loss_b)
        } else {
            None
        };
        Ok(StepLosses { loss_a, loss_b })
    }

    fn save(&self, dir: &Path, epoch: usize) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_checkpoint(&dir.join("weights"), &self.store)?;
        let mut opt: Vec<(String, Tensor<f32>)> = Vec::new();
        opt.extend(self.sgd.state(&self.store).into_iter().map(|(n, t)| (format!("sgd.{n}"), t)));
        opt.extend(self.adam.state(&self.store).into_iter().map(|(n, t)| (format!("adam.{n}"), t)));
        let refs: Vec<(&str, &Tensor<f32>)> = opt.iter().map(|(n, t)| (n.as_str(), t)).collect();
        write_checkpoint(&dir.join("optimizer"), &refs)?;
        ArchLogits {
            config: self.config.clone(),
            epoch,
            alpha: self.alpha(),
            beta: self.beta(),
        }
        .write(&dir.join("arch_logits.json"))
    }

    fn load(&mut self, dir: &Path) -> Result<()> {
        let logits = ArchLogits::read(&dir.join("arch_logits.json"))?;
        if logits.config != self.config {
            return Err(Error::invalid(format!(
                "checkpoint {} was written for {:?}",
                dir.display(),
                logits.config
            )));
        }
        load_checkpoint(&dir.join("weights"), &mut self.store)?;
        let opt = read_checkpoint::<f32>(&dir.join("optimizer"))?;
        let pick = |prefix: &str| -> Vec<(String, Tensor<f32>)> {
            opt.iter()
                .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
                .collect()
        };
        self.sgd.load_state(&self.store, &pick("sgd."))?;
        self.adam.load_state(&self.store, &pick("adam."))?;
        Ok(())
    }
}

/// Where to write artifacts and whether to continue from them.
#[derive(Debug, Clone, Default)]
pub struct SearchOptions {
    pub out_dir: Option<PathBuf>,
    pub resume: bool,
}

/// Passed to the observer after every search step.
pub struct StepEvent<'a> {
    pub epoch: usize,
    pub step: usize,
    pub losses: StepLosses,
    pub state: &'a SearchState,
}

pub struct SearchOutcome {
    pub alpha: AlphaParams,
    pub beta: BetaParams,
    pub history: SearchHistory,
    /// Directory of the last epoch checkpoint, when an output directory
    /// was given.
    pub checkpoint: Option<PathBuf>,
    pub state: SearchState,
}

pub fn epoch_dir(out: &Path, epoch: usize) -> PathBuf {
    out.join(format!("epoch_{epoch}"))
}

fn latest_complete_epoch(out: &Path, epochs: usize) -> Option<usize> {
    (0..epochs).rev().find(|&e| {
        let d = epoch_dir(out, e);
        ["weights", "optimizer", "arch_logits.json"].iter().all(|f| d.join(f).is_file())
    })
}

fn draw_batch(ds: &Dataset, indices: &[usize], crop: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let mut samples = Vec::with_capacity(indices.len());
    for &i in indices {
        samples.push(random_crop_pair(&ds.get(i)?, crop, rng)?);
    }
    Batch::stack(&samples, ds.subset)
}

/// The full alternating search. Each epoch walks trainA and trainB in
/// lockstep, `min(|A|, |B|) / batch_size` steps, with its own RNG stream.
pub fn run_search(
    dataset: &Dataset,
    config: &SearchConfig,
    run: &SearchRunConfig,
    opts: &SearchOptions,
    observer: &mut dyn FnMut(&StepEvent<'_>),
) -> Result<SearchOutcome> {
    config.validate()?;
    run.validate()?;
    if dataset.num_classes != config.num_classes {
        return Err(Error::invalid(format!(
            "dataset has {} classes, search space {}",
            dataset.num_classes, config.num_classes
        )));
    }
    let (train_a, train_b) = split_train(dataset, run.seed)?;
    let steps = train_a.len().min(train_b.len()) / run.batch_size;
    if steps == 0 {
        return Err(Error::Data(format!(
            "{} samples split in two cannot fill a batch of {}",
            dataset.len(),
            run.batch_size
        )));
    }
    let schedule = LrSchedule::cosine(run.w_lr_initial, run.w_lr_final, run.epochs * steps);
    let mut state = SearchState::new(config, run)?;
    let mut history = SearchHistory::default();
    let mut start = 0;
    let mut checkpoint = None;
    if let (Some(out), true) = (&opts.out_dir, opts.resume) {
        if let Some(last) = latest_complete_epoch(out, run.epochs) {
            let dir = epoch_dir(out, last);
            state.load(&dir)?;
            history = SearchHistory::read_csv(&out.join("history.csv"))?;
            history.records.retain(|r| r.epoch <= last);
            if history.len() != last + 1 {
                return Err(Error::Format {
                    path: out.join("history.csv"),
                    msg: format!("{} rows for {} completed epochs", history.len(), last + 1),
                });
            }
            start = last + 1;
            checkpoint = Some(dir);
        }
    }
    for epoch in start..run.epochs {
        let t0 = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
        rng.set_stream(2 + epoch as u64);
        let mut order_a: Vec<usize> = (0..train_a.len()).collect();
        let mut order_b: Vec<usize> = (0..train_b.len()).collect();
        order_a.shuffle(&mut rng);
        order_b.shuffle(&mut rng);
        let (mut sum_a, mut sum_b) = (0.0, 0.0);
        for step in 0..steps {
            let span = step * run.batch_size..(step + 1) * run.batch_size;
            let batch_a = draw_batch(&train_a, &order_a[span.clone()], run.crop, &mut rng)?;
            let batch_b = draw_batch(&train_b, &order_b[span], run.crop, &mut rng)?;
            let lr = schedule.lr_at(epoch * steps + step)?;
            let losses = state
                .step(&batch_a, &batch_b, epoch, lr, run, dataset.ignore_index)
                .map_err(|e| match e {
                    Error::NonFinite(msg) => Error::NonFinite(format!(
                        "{msg} (epoch {epoch}, step {step}; last good checkpoint: {})",
                        checkpoint
                            .as_ref()
                            .map_or_else(|| "none".to_string(), |p: &PathBuf| p.display().to_string())
                    )),
                    other => other,
                })?;
            sum_a += losses.loss_a;
            sum_b += losses.loss_b.unwrap_or(0.0);
            observer(&StepEvent {
                epoch,
                step,
                losses,
                state: &state,
            });
        }
        let (alpha_entropy, beta_entropy) = state.entropies()?;
        history.records.push(EpochRecord {
            epoch,
            loss_a: sum_a / steps as f64,
            loss_b: run.arch_active(epoch).then(|| sum_b / steps as f64),
            alpha_entropy,
            beta_entropy,
            seconds: t0.elapsed().as_secs_f64(),
        });
        if let Some(out) = &opts.out_dir {
            let dir = epoch_dir(out, epoch);
            state.save(&dir, epoch)?;
            history.write_csv(&out.join("history.csv"))?;
            checkpoint = Some(dir);
        }
    }
    Ok(SearchOutcome {
        alpha: state.alpha(),
        beta: state.beta(),
        history,
        checkpoint,
        state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_generate;

    fn tiny_run(epochs: usize, arch_start: usize) -> SearchRunConfig {
        SearchRunConfig {
            epochs,
            arch_start_epoch: arch_start,
            batch_size: 2,
            crop: 32,
            seed: 4,
            ..Default::default()
        }
    }

    fn tiny_space() -> SearchConfig {
        SearchConfig::new(2, 1, 2, 3)
    }

    fn batches(state_ds: &Dataset, seed: u64) -> (Batch, Batch) {
        let (a, b) = split_train(state_ds, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            draw_batch(&a, &[0, 1], 32, &mut rng).unwrap(),
            draw_batch(&b, &[0, 1], 32, &mut rng).unwrap(),
        )
    }

    fn arch_logits(state: &SearchState) -> Vec<f32> {
        let mut v = state.store.get(state.net.alpha).data().to_vec();
        v.extend_from_slice(state.store.get(state.net.beta).data());
        v
    }

    fn weights(state: &SearchState) -> Vec<f32> {
        state
            .weight_ids
            .iter()
            .flat_map(|&id| state.store.get(id).data().to_vec())
            .collect()
    }

    #[test]
    fn defaults_follow_the_schedule() {
        let c = SearchRunConfig::default();
        assert_eq!((c.epochs, c.arch_start_epoch, c.crop), (60, 30, 321));
        assert_eq!((c.w_lr_initial, c.w_lr_final), (0.025, 0.001));
        assert_eq!((c.w_momentum, c.w_weight_decay), (0.9, 3e-4));
        assert_eq!((c.arch_lr, c.arch_weight_decay), (3e-3, 1e-3));
        assert!(c.validate().is_ok());
        let bad = SearchRunConfig {
            arch_start_epoch: 60,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn frozen_phase_leaves_logits_bit_identical() {
        let ds = synth_generate(8, 32, 3, 1).unwrap();
        let run = tiny_run(2, 1);
        let mut state = SearchState::new(&tiny_space(), &run).unwrap();
        let (a, b) = batches(&ds, 0);
        let (before, w_before) = (arch_logits(&state), weights(&state));
        let l = state.step(&a, &b, 0, 0.01, &run, 255).unwrap();
        assert!(l.loss_b.is_none());
        assert_eq!(arch_logits(&state), before);
        assert_ne!(weights(&state), w_before);
    }

    #[test]
    fn arch_step_without_weight_signal_moves_only_logits() {
        let ds = synth_generate(8, 32, 3, 1).unwrap();
        let run = tiny_run(2, 1);
        let mut state = SearchState::new(&tiny_space(), &run).unwrap();
        let (mut a, b) = batches(&ds, 0);
        a.labels.iter_mut().for_each(|l| *l = 255);
        let (before, w_before) = (arch_logits(&state), weights(&state));
        let l = state.step(&a, &b, 1, 0.01, &run, 255).unwrap();
        assert_eq!(l.loss_a, 0.0);
        assert!(l.loss_b.is_some());
        assert_eq!(weights(&state), w_before);
        assert_ne!(arch_logits(&state), before);
    }

    #[test]
    fn batches_from_the_wrong_half_are_rejected() {
        let ds = synth_generate(8, 32, 3, 1).unwrap();
        let run = tiny_run(2, 1);
        let mut state = SearchState::new(&tiny_space(), &run).unwrap();
        let (a, b) = batches(&ds, 0);
        assert!(state.step(&b, &a, 1, 0.01, &run, 255).is_err());
    }

    #[test]
    fn one_step_is_reproducible() {
        let ds = synth_generate(8, 32, 3, 1).unwrap();
        let run = tiny_run(2, 0);
        let (a, b) = batches(&ds, 0);
        let mut s1 = SearchState::new(&tiny_space(), &run).unwrap();
        let mut s2 = SearchState::new(&tiny_space(), &run).unwrap();
        let l1 = s1.step(&a, &b, 0, 0.01, &run, 255).unwrap();
        let l2 = s2.step(&a, &b, 0, 0.01, &run, 255).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(arch_logits(&s1), arch_logits(&s2));
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        let ds = synth_generate(8, 32, 3, 1).unwrap();
        let run = tiny_run(2, 0);
        let mut state = SearchState::new(&tiny_space(), &run).unwrap();
        let (mut a, b) = batches(&ds, 0);
        a.images.data_mut()[0] = f32::NAN;
        let err = state.step(&a, &b, 0, 0.01, &run, 255).unwrap_err();
        assert!(matches!(err, Error::NonFinite(ref m) if m.contains("synth_")), "{err}");
    }

    #[test]
    fn run_writes_history_and_resumes_identically() {
        let ds = synth_generate(8, 32, 3, 2).unwrap();
        let run = tiny_run(3, 1);
        let dir = tempfile::tempdir().unwrap();
        let opts = SearchOptions {
            out_dir: Some(dir.path().to_path_buf()),
            resume: false,
        };
        let full = run_search(&ds, &tiny_space(), &run, &opts, &mut |_| {}).unwrap();
        assert_eq!(full.history.len(), 3);
        assert!(full.history.records[0].loss_b.is_none() && full.history.records[2].loss_b.is_some());
        for e in 0..3 {
            assert!(epoch_dir(dir.path(), e).join("arch_logits.json").is_file());
        }
        let on_disk = SearchHistory::read_csv(&dir.path().join("history.csv")).unwrap();
        assert_eq!(on_disk, full.history);
        let header = fs::read_to_string(dir.path().join("history.csv")).unwrap();
        assert!(header.starts_with("epoch,lossA,lossB,alpha_entropy,beta_entropy,seconds"));

        fs::remove_dir_all(epoch_dir(dir.path(), 2)).unwrap();
        let resumed = run_search(
            &ds,
            &tiny_space(),
            &run,
            &SearchOptions {
                resume: true,
                ..opts.clone()
            },
            &mut |_| {},
        )
        .unwrap();
        assert_eq!(resumed.history.records[..2], full.history.records[..2]);
        assert_eq!(resumed.history.max_metric_diff(&full.history), Some(0.0));
        assert_eq!(resumed.alpha, full.alpha);
        assert_eq!(resumed.beta, full.beta);
    }

    #[test]
    fn too_few_samples_for_a_batch() {
        let ds = synth_generate(2, 32, 3, 2).unwrap();
        let err = run_search(&ds, &tiny_space(), &tiny_run(2, 1), &SearchOptions::default(), &mut |_| {});
        assert!(matches!(err, Err(Error::Data(_))));
    }
}
