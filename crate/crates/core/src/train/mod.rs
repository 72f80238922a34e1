//! Training loop, evaluation, robustness sweeps and ablations.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod optim;

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{combined_loss, LossParts};
use crate::metrics::{self, MetricsReport};
use crate::model::Network;
use crate::nn::{ParamStore, Session};
use crate::synth::augment::augment;
use crate::synth::Sample;
use crate::tensor::Tensor;

pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use optim::{Adam, EarlyStopping, Plateau};

/// SplitMix64 fold of several integers into one seed.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Shuffles each class separately and interleaves them evenly, so every
/// batch holds forged and authentic samples in about the dataset ratio.
/// A batch of authentic images only has an empty target, where Dice is
/// large for any nonzero map.
pub fn stratified_order(forged: &[bool], seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(forged.len());
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..forged.len()).filter(|&i| forged[i] == class).collect();
        idx.shuffle(&mut rng);
        let n = idx.len() as f64;
        keyed.extend(idx.into_iter().enumerate().map(|(j, i)| ((j as f64 + 0.5) / n, i)));
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
    keyed.into_iter().map(|(_, i)| i).collect()
}

/// Stacks samples into N×3×H×W images, N×1×H×W masks and N×1×1×1 labels.
pub fn collate(samples: &[&Sample]) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    let images: Vec<Tensor<f32>> = samples.iter().map(|s| s.image.clone()).collect();
    let masks: Vec<Tensor<f32>> = samples.iter().map(|s| s.mask.clone()).collect();
    let labels = samples
        .iter()
        .map(|s| s.label.is_forged() as u8 as f32)
        .collect();
    let images = Tensor::stack(&images)?;
    let (n, _, h, w) = images.dims4()?;
    let masks = Tensor::stack(&masks)?.reshape(&[n, 1, h, w])?;
    Ok((
        images,
        masks,
        Tensor::new(&[samples.len(), 1, 1, 1], labels)?,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train: LossParts,
    pub val: LossParts,
    pub val_auc: Option<f64>,
    pub val_pixel_f1: f64,
    pub val_image_f1: f64,
    pub bayar_violation: f64,
    pub skipped_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epochs_done: usize,
    pub lr: f64,
    pub plateau: Plateau,
    pub early: EarlyStopping,
    pub best_auc: Option<f64>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub history: Vec<EpochRecord>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub net: Network,
    pub store: ParamStore<f32>,
    pub adam: Adam<f32>,
    pub state: TrainState,
    /// Parameters of the best validation epoch so far.
    pub best: Option<ParamStore<f32>>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (net, store) = Network::new::<f32>(&config.network, config.seed)?;
        let adam = Adam::new(
            &store,
            config.beta1,
            config.beta2,
            config.adam_eps,
            config.weight_decay,
        );
        let state = TrainState {
            epochs_done: 0,
            lr: config.lr,
            plateau: Plateau::new(
                config.plateau_factor,
                config.plateau_patience,
                config.plateau_threshold,
            ),
            early: EarlyStopping::new(config.early_stop_patience, config.plateau_threshold),
            best_auc: None,
            best_epoch: None,
            stopped_early: false,
            history: Vec::new(),
        };
        Ok(Self {
            config,
            net,
            store,
            adam,
            state,
            best: None,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            state: self.state.clone(),
            adam_step: self.adam.step,
            params: self.store.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
            adam_m: self.adam.m.clone(),
            adam_v: self.adam.v.clone(),
        }
    }

    /// Parameters from a checkpoint, matched by name against a freshly
    /// built network.
    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let mut t = Self::new(ck.config.clone())?;
        if ck.params.len() != t.store.len() {
            return Err(Error::invalid(format!(
                "checkpoint has {} tensors, the configured network {}",
                ck.params.len(),
                t.store.len()
            )));
        }
        for (id, (name, value)) in t.store.ids().collect::<Vec<_>>().into_iter().zip(ck.params) {
            let p = t.store.get_mut(id);
            if p.name != name || p.value.shape() != value.shape() {
                return Err(Error::invalid(format!(
                    "checkpoint tensor {name} {:?} does not match {} {:?}",
                    value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = value;
        }
        t.adam.m = ck.adam_m;
        t.adam.v = ck.adam_v;
        t.adam.step = ck.adam_step;
        t.state = ck.state;
        Ok(t)
    }

    pub fn finished(&self) -> bool {
        self.state.stopped_early || self.state.epochs_done >= self.config.max_epochs
    }

    /// One pass over the training set. Returns the sample-weighted mean
    /// loss and the number of skipped optimizer steps.
    pub fn train_epoch(&mut self, train: &[Sample], mut steps: Option<&mut dyn Write>) -> Result<(LossParts, usize)> {
        if train.is_empty() {
            return Err(Error::Training("empty training set".into()));
        }
        let epoch = self.state.epochs_done as u64;
        let seed = self.config.seed;
        let forged: Vec<bool> = train.iter().map(|s| s.label.is_forged()).collect();
        let order = stratified_order(&forged, mix_seed(&[seed, epoch, u64::MAX]));
        let mut sum = LossParts::default();
        let mut skipped = 0;
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| augment(&train[i], &self.config.augment, mix_seed(&[seed, epoch, i as u64])))
                .collect();
            let refs: Vec<&Sample> = batch.iter().collect();
            let (images, masks, labels) = collate(&refs)?;
            let ela = self.net.ela_input(&images)?;
            let (parts, grads) = {
                let mut s = Session::new(&self.store, true);
                let out = self.net.forward_with_ela(&mut s, images, ela)?;
                let (loss, parts) =
                    combined_loss(&mut s.graph, out.class_prob, &labels, out.map, &masks, &self.config.loss)?;
                if !parts.total.is_finite() {
                    return Err(Error::Training(format!(
                        "non-finite loss at epoch {epoch}, batch {b}: {parts:?}"
                    )));
                }
                (parts, s.backward(loss)?)
            };
            self.store.zero_grad();
            self.store.accumulate(grads)?;
            if !self.adam.step(&mut self.store, self.state.lr) {
                log::warn!("epoch {epoch} batch {b}: non-finite gradient, step skipped");
                skipped += 1;
            }
            self.net.project(&mut self.store);
            let n = chunk.len() as f64;
            sum.cls += parts.cls * n;
            sum.dice += parts.dice * n;
            sum.focal += parts.focal * n;
            sum.pixel_bce += parts.pixel_bce * n;
            sum.total += parts.total * n;
            if let Some(w) = steps.as_deref_mut() {
                let step = self.adam.step;
                writeln!(
                    w,
                    "{step},{epoch},{},{},{},{}",
                    parts.cls, parts.dice, parts.focal, parts.total
                )
                .map_err(|e| Error::Training(format!("writing step log: {e}")))?;
            }
        }
        let n = train.len() as f64;
        Ok((
            LossParts {
                cls: sum.cls / n,
                dice: sum.dice / n,
                focal: sum.focal / n,
                pixel_bce: sum.pixel_bce / n,
                total: sum.total / n,
            },
            skipped,
        ))
    }

    /// Mean loss and metrics on held-out samples with the current weights.
    pub fn validate(&self, val: &[Sample]) -> Result<(LossParts, MetricsReport)> {
        validate_with(&self.net, &self.store, &self.config, val)
    }

    /// Trains until `max_epochs`, early stopping, or `until_epoch` epochs
    /// are done. With `out`, writes `steps.csv`, `epochs.csv`,
    /// `last.ckpt` and `best.ckpt` there.
    pub fn fit(&mut self, train: &[Sample], val: &[Sample], out: Option<&Path>, until_epoch: Option<usize>) -> Result<()> {
        let mut logs = match out {
            Some(dir) => Some(Logs::open(dir, self.state.epochs_done > 0)?),
            None => None,
        };
        while !self.finished() && until_epoch.is_none_or(|u| self.state.epochs_done < u) {
            let epoch = self.state.epochs_done;
            let lr = self.state.lr;
            let (train_loss, skipped) = self.train_epoch(
                train,
                logs.as_mut().map(|l| &mut l.steps as &mut dyn Write),
            )?;
            let (val_loss, report) = self.validate(val)?;
            let record = EpochRecord {
                epoch,
                lr,
                train: train_loss,
                val: val_loss,
                val_auc: report.pixel_auc,
                val_pixel_f1: report.pixel_f1,
                val_image_f1: report.image_f1,
                bayar_violation: self.net.frontend.bayar_violation(&self.store),
                skipped_steps: skipped,
            };
            log::info!(
                "epoch {epoch}: lr {lr:.2e} train {:.4} val {:.4} auc {:?} f1 {:.3} image f1 {:.3}",
                train_loss.total,
                val_loss.total,
                report.pixel_auc,
                report.pixel_f1,
                report.image_f1
            );
            self.state.lr = self.state.plateau.step(val_loss.total, lr);
            self.state.stopped_early = self.state.early.step(val_loss.total);
            let auc = report.pixel_auc.unwrap_or(f64::NEG_INFINITY);
            let improved = self.state.best_auc.is_none_or(|b| auc > b);
            if improved {
                self.state.best_auc = Some(auc);
                self.state.best_epoch = Some(epoch);
                self.best = Some(self.store.clone());
            }
            self.state.epochs_done += 1;
            self.state.history.push(record.clone());
            if let (Some(l), Some(dir)) = (logs.as_mut(), out) {
                l.epoch(&record)?;
                let ck = self.checkpoint();
                if improved {
                    ck.save(&dir.join("best.ckpt"))?;
                }
                ck.save(&dir.join("last.ckpt"))?;
            }
        }
        Ok(())
    }

    /// Best-validation parameters, or the current ones before any epoch.
    pub fn best_store(&self) -> &ParamStore<f32> {
        self.best.as_ref().unwrap_or(&self.store)
    }
}

pub fn validate_with(
    net: &Network,
    store: &ParamStore<f32>,
    cfg: &TrainConfig,
    val: &[Sample],
) -> Result<(LossParts, MetricsReport)> {
    if val.is_empty() {
        return Err(Error::Training("empty validation set".into()));
    }
    let mut sum = LossParts::default();
    let mut preds = Vec::with_capacity(val.len());
    for chunk in val.chunks(cfg.eval_batch_size) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (images, masks, labels) = collate(&refs)?;
        let mut s = Session::new(store, false);
        let out = net.forward(&mut s, images)?;
        let (_, parts) = combined_loss(&mut s.graph, out.class_prob, &labels, out.map, &masks, &cfg.loss)?;
        let n = chunk.len() as f64;
        sum.cls += parts.cls * n;
        sum.dice += parts.dice * n;
        sum.focal += parts.focal * n;
        sum.pixel_bce += parts.pixel_bce * n;
        sum.total += parts.total * n;
        preds.extend(eval::to_predictions(s.graph.value(out.map), s.graph.value(out.class_prob), chunk));
    }
    let n = val.len() as f64;
    let mean = LossParts {
        cls: sum.cls / n,
        dice: sum.dice / n,
        focal: sum.focal / n,
        pixel_bce: sum.pixel_bce / n,
        total: sum.total / n,
    };
    Ok((mean, metrics::report(&preds, &cfg.metrics)))
}

/// CSV writers for a run directory.
struct Logs {
    steps: File,
    epochs: File,
}

impl Logs {
    fn open(dir: &Path, resume: bool) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str, header: &str| -> Result<File> {
            let path = dir.join(name);
            let io = |e| Error::io(&path, e);
            if resume && path.exists() {
                OpenOptions::new().append(true).open(&path).map_err(io)
            } else {
                let mut f = File::create(&path).map_err(io)?;
                writeln!(f, "{header}").map_err(|e| Error::io(&path, e))?;
                Ok(f)
            }
        };
        Ok(Self {
            steps: open("steps.csv", "step,epoch,l_cls,l_dsc,l_fl,total")?,
            epochs: open(
                "epochs.csv",
                "epoch,lr,train_total,train_cls,train_dsc,train_fl,val_total,val_auc,val_pixel_f1,val_image_f1,bayar_violation,skipped_steps",
            )?,
        })
    }

    fn epoch(&mut self, r: &EpochRecord) -> Result<()> {
        let auc = r.val_auc.map(|a| a.to_string()).unwrap_or_default();
        writeln!(
            self.epochs,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.lr,
            r.train.total,
            r.train.cls,
            r.train.dice,
            r.train.focal,
            r.val.total,
            auc,
            r.val_pixel_f1,
            r.val_image_f1,
            r.bayar_violation,
            r.skipped_steps
        )
        .map_err(|e| Error::Training(format!("writing epoch log: {e}")))
    }
}
