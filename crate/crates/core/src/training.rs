//! Dataset generation and Huber/Adam training of the MambaNet estimator.

use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::baseband::{build_slot, qpsk_modulate, BasebandConfig, SlotGrid};
use crate::channel::{
    apply_channel_freq, freq_response, sample_realization, FrequencyResponse, PowerDelayProfile,
    SignalReference,
};
use crate::error::{Error, Result};
use crate::estimators::{ls_pilot_estimate, PilotLsGrid};
use crate::mambanet::{forward_tensors, tokenize, MambaNetParams};
use crate::tensor::{read_string, read_u32, read_u64, ParamSet, Tensor};

/// Independent generator for item `stream` of a run seeded with `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn draw_in(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// One simulated slot with everything an estimator or metric needs.
#[derive(Debug, Clone)]
pub struct SlotDraw {
    pub bits: Vec<u8>,
    pub tx: SlotGrid,
    pub h: FrequencyResponse,
    pub y: SlotGrid,
    pub ls: PilotLsGrid,
}

/// Random QPSK slot through a fresh realization of `pdp`, frequency-domain
/// pathway.
pub fn draw_slot(
    pdp: &PowerDelayProfile,
    f_d_max: f64,
    snr_db: f64,
    cfg: &BasebandConfig,
    rng: &mut impl Rng,
) -> Result<SlotDraw> {
    let bits: Vec<u8> = (0..2 * cfg.data_capacity()).map(|_| rng.random_range(0..2u8)).collect();
    let tx = build_slot(&qpsk_modulate(&bits)?, cfg)?;
    let ch = sample_realization(pdp, f_d_max, cfg, rng)?;
    let h = freq_response(&ch, cfg);
    let y = apply_channel_freq(&tx, &h, snr_db, SignalReference::default(), rng)?;
    let ls = ls_pilot_estimate(&y, cfg)?;
    Ok(SlotDraw { bits, tx, h, y, ls })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: PilotLsGrid,
    /// True response as `N_f × N_s × 2` (real, imaginary).
    pub label: Vec<f64>,
    pub snr_db: f64,
    pub f_d_max: f64,
}

/// Draw ranges for [`generate_dataset`]. Equal bounds pin the value, and
/// `f64::INFINITY` as SNR disables noise.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSpec {
    pub count: usize,
    pub snr_range: (f64, f64),
    pub fd_range: (f64, f64),
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            count: 125_000,
            snr_range: (5.0, 25.0),
            fd_range: (0.0, 97.0),
        }
    }
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, reason: &str| {
            Err(Error::Config {
                key: format!("data.{key}"),
                reason: reason.into(),
            })
        };
        if self.count == 0 {
            return fail("count", "must be at least 1");
        }
        let (lo, hi) = self.snr_range;
        if lo.is_nan() || hi.is_nan() || lo > hi || (lo != hi && !(lo.is_finite() && hi.is_finite())) {
            return fail("snr_range", "needs finite lo <= hi, or equal bounds");
        }
        let (lo, hi) = self.fd_range;
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return fail("fd_range", "needs 0 <= lo <= hi < inf");
        }
        Ok(())
    }
}

/// Samples with a fixed train/validation partition: the first `n_train`
/// samples train, the rest validate.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n_f: usize,
    pub n_s: usize,
    pub samples: Vec<Sample>,
    pub n_train: usize,
    /// Free-form provenance carried into the file header.
    pub header: Vec<(String, String)>,
}

const DATA_MAGIC: &[u8; 8] = b"CHESTDAT";
const DATA_VERSION: u32 = 1;

/// Number of training samples under the 95/5 split.
pub fn train_split(n: usize) -> usize {
    n * 95 / 100
}

/// Per-sample seeded simulation; identical `seed` gives identical data.
pub fn generate_dataset(
    spec: &DataSpec,
    pdp: &PowerDelayProfile,
    cfg: &BasebandConfig,
    seed: u64,
) -> Result<Dataset> {
    spec.validate()?;
    cfg.validate()?;
    let samples = (0..spec.count as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i);
            let snr_db = draw_in(&mut rng, spec.snr_range);
            let f_d_max = draw_in(&mut rng, spec.fd_range);
            let d = draw_slot(pdp, f_d_max, snr_db, cfg, &mut rng)?;
            Ok(Sample {
                input: d.ls,
                label: d.h.to_planes(),
                snr_db,
                f_d_max,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        n_f: cfg.n_f,
        n_s: cfg.n_s,
        n_train: train_split(samples.len()),
        samples,
        header: Vec::new(),
    })
}

fn write_f64s(w: &mut impl Write, vals: impl IntoIterator<Item = f64>) -> Result<()> {
    for v in vals {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut raw = vec![0u8; n * 8];
    r.read_exact(&mut raw)?;
    Ok(raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

impl Dataset {
    pub fn train(&self) -> &[Sample] {
        &self.samples[..self.n_train]
    }

    pub fn validation(&self) -> &[Sample] {
        &self.samples[self.n_train..]
    }

    fn pilot_dims(&self) -> (usize, usize) {
        self.samples
            .first()
            .map(|s| (s.input.rows(), s.input.cols()))
            .unwrap_or((0, 0))
    }

    /// Layout: magic `CHESTDAT`, `u32` version, `u32`-prefixed header text,
    /// then `u64` count followed by packed little-endian `f64` records of
    /// `snr_db, f_d_max, input (rows·cols·2), label (N_f·N_s·2)`.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let (rows, cols) = self.pilot_dims();
        let mut header = self.header.clone();
        header.extend([
            ("data.count".to_owned(), self.samples.len().to_string()),
            ("data.n_train".to_owned(), self.n_train.to_string()),
            ("data.n_f".to_owned(), self.n_f.to_string()),
            ("data.n_s".to_owned(), self.n_s.to_string()),
            ("data.pilot_rows".to_owned(), rows.to_string()),
            ("data.pilot_cols".to_owned(), cols.to_string()),
        ]);
        let text: String = header.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        w.write_all(DATA_MAGIC)?;
        w.write_all(&DATA_VERSION.to_le_bytes())?;
        w.write_all(&(text.len() as u32).to_le_bytes())?;
        w.write_all(text.as_bytes())?;
        w.write_all(&(self.samples.len() as u64).to_le_bytes())?;
        for s in &self.samples {
            write_f64s(w, [s.snr_db, s.f_d_max])?;
            write_f64s(w, s.input.values().iter().flat_map(|v| [v.re, v.im]))?;
            write_f64s(w, s.label.iter().copied())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != DATA_MAGIC {
            return Err(Error::Format("not a dataset file".into()));
        }
        let version = read_u32(r)?;
        if version != DATA_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let text = read_string(r, 1 << 20)?;
        let mut header: Vec<(String, String)> = text
            .lines()
            .filter_map(|l| l.split_once(" = "))
            .map(|(k, v)| (k.to_owned(), v.to_owned()))
            .collect();
        let field = |key: &str| -> Result<usize> {
            header
                .iter()
                .find(|(k, _)| k == key)
                .and_then(|(_, v)| v.parse().ok())
                .ok_or_else(|| Error::Format(format!("dataset header lacks `{key}`")))
        };
        let (n_f, n_s) = (field("data.n_f")?, field("data.n_s")?);
        let (rows, cols) = (field("data.pilot_rows")?, field("data.pilot_cols")?);
        let n_train = field("data.n_train")?;
        let count = read_u64(r)? as usize;
        if count != field("data.count")? || n_train > count {
            return Err(Error::Format("dataset counts are inconsistent".into()));
        }
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            let meta = read_f64s(r, 2)?;
            let raw = read_f64s(r, 2 * rows * cols)?;
            let vals = raw.chunks_exact(2).map(|c| Complex64::new(c[0], c[1])).collect();
            samples.push(Sample {
                input: PilotLsGrid::new(rows, cols, vals)?,
                label: read_f64s(r, 2 * n_f * n_s)?,
                snr_db: meta[0],
                f_d_max: meta[1],
            });
        }
        header.retain(|(k, _)| !k.starts_with("data."));
        Ok(Self {
            n_f,
            n_s,
            samples,
            n_train,
            header,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Mean elementwise Huber loss with threshold `delta`.
pub fn huber_loss(pred: &Tensor, target: &Tensor, delta: f64) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "huber_loss",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument(format!("huber delta must be positive, got {delta}")));
    }
    let n = pred.len() as f64;
    let errs: Vec<f64> = pred.data().iter().zip(target.data()).map(|(p, t)| p - t).collect();
    let total: f64 = errs
        .iter()
        .map(|e| {
            if e.abs() <= delta {
                0.5 * e * e
            } else {
                delta * (e.abs() - 0.5 * delta)
            }
        })
        .sum();
    Ok(Tensor::from_op(
        vec![1],
        vec![total / n],
        vec![pred.clone(), target.clone()],
        move |c| {
            let g = c.grad[0] / n;
            let dp: Vec<f64> = errs.iter().map(|e| g * e.clamp(-delta, delta)).collect();
            let dt = c.needs[1].then(|| dp.iter().map(|v| -v).collect());
            vec![c.needs[0].then_some(dp), dt]
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub initial_lr: f64,
    pub lr_drop_period: usize,
    pub lr_drop_factor: f64,
    pub max_epochs: usize,
    pub minibatch: usize,
    pub l2: f64,
    pub huber_delta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            initial_lr: 5e-4,
            lr_drop_period: 25,
            lr_drop_factor: 0.5,
            max_epochs: 100,
            minibatch: 128,
            l2: 1e-7,
            huber_delta: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let checks: [(&str, bool); 10] = [
            ("beta1", self.beta1 > 0.0 && self.beta1 < 1.0),
            ("beta2", self.beta2 > 0.0 && self.beta2 < 1.0),
            ("adam_eps", self.adam_eps > 0.0),
            ("initial_lr", self.initial_lr > 0.0 && self.initial_lr.is_finite()),
            ("lr_drop_period", self.lr_drop_period > 0),
            ("lr_drop_factor", self.lr_drop_factor > 0.0 && self.lr_drop_factor <= 1.0),
            ("max_epochs", self.max_epochs > 0),
            ("minibatch", self.minibatch > 0),
            ("l2", self.l2 >= 0.0 && self.l2.is_finite()),
            ("huber_delta", self.huber_delta > 0.0 && self.huber_delta.is_finite()),
        ];
        match checks.iter().find(|(_, ok)| !ok) {
            Some((key, _)) => Err(Error::Config {
                key: format!("train.{key}"),
                reason: "out of range".into(),
            }),
            None => Ok(()),
        }
    }

    /// Step schedule `lr · factor^⌊epoch / period⌋` (epochs counted from 0).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.initial_lr * self.lr_drop_factor.powi((epoch / self.lr_drop_period) as i32)
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(set: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = (0..set.len()).map(|i| vec![0.0; set.data(i).len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update with the L2 term `l2·θ` added to `grads`.
pub fn adam_step(set: &mut ParamSet, grads: &[Vec<f64>], state: &mut AdamState, lr: f64, cfg: &TrainConfig) {
    state.t += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (id, g) in grads.iter().enumerate() {
        let (m, v) = (&mut state.m[id], &mut state.v[id]);
        for (((theta, &gi), mi), vi) in set.data_mut(id).iter_mut().zip(g).zip(m).zip(v) {
            let gi = gi + cfg.l2 * *theta;
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            *theta -= lr * (*mi / c1) / ((*vi / c2).sqrt() + cfg.adam_eps);
        }
    }
}

/// Samples per unit of parallel work. Gradients are summed inside a group
/// and then across groups, both in index order, so the result does not
/// depend on the number of workers.
const GRAD_GROUP: usize = 16;

fn sample_loss_grad(p: &MambaNetParams, s: &Sample, delta: f64) -> Result<(f64, Vec<Tensor>)> {
    let bound = p.set.bind();
    let out = forward_tensors(p, &bound, &tokenize(&s.input, &p.cfg)?)?;
    let target = Tensor::new(out.shape(), s.label.clone())?;
    let loss = huber_loss(&out, &target, delta)?;
    loss.backward()?;
    Ok((loss.item(), bound))
}

/// Summed Huber loss and summed gradient over `batch`.
pub fn batch_gradient(p: &MambaNetParams, batch: &[&Sample], delta: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    let zero = || -> Vec<Vec<f64>> { (0..p.set.len()).map(|i| vec![0.0; p.set.data(i).len()]).collect() };
    let parts = batch
        .par_chunks(GRAD_GROUP)
        .map(|group| {
            let mut acc = zero();
            let mut loss = 0.0;
            for s in group {
                let (l, bound) = sample_loss_grad(p, s, delta)?;
                loss += l;
                for (a, leaf) in acc.iter_mut().zip(&bound) {
                    if let Some(g) = leaf.grad() {
                        a.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Ok((loss, acc))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = zero();
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        for (t, gi) in total.iter_mut().zip(&g) {
            t.iter_mut().zip(gi).for_each(|(x, y)| *x += y);
        }
    }
    Ok((loss, total))
}

/// Mean Huber loss of the current weights over `samples`.
pub fn evaluate_loss(p: &MambaNetParams, samples: &[Sample], delta: f64) -> Result<f64> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let parts = samples
        .par_chunks(GRAD_GROUP)
        .map(|group| {
            let bound = p.set.bind_frozen();
            group.iter().try_fold(0.0, |acc, s| {
                let out = forward_tensors(p, &bound, &tokenize(&s.input, &p.cfg)?)?;
                let target = Tensor::new(out.shape(), s.label.clone())?;
                Ok(acc + huber_loss(&out, &target, delta)?.item())
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(parts.iter().sum::<f64>() / samples.len() as f64)
}

/// One minibatch update; returns the mean loss before the step.
pub fn train_step(
    p: &mut MambaNetParams,
    batch: &[&Sample],
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<f64> {
    let (loss, mut grads) = batch_gradient(p, batch, cfg.huber_delta)?;
    let scale = 1.0 / batch.len() as f64;
    grads.iter_mut().flatten().for_each(|g| *g *= scale);
    adam_step(&mut p.set, &grads, state, lr, cfg);
    Ok(loss * scale)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights from the epoch with the lowest validation loss.
    pub best: MambaNetParams,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn history_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_loss,val_loss\n");
        for r in &self.history {
            s.push_str(&format!("{},{:e},{:.12e},{:.12e}\n", r.epoch, r.lr, r.train_loss, r.val_loss));
        }
        s
    }
}

/// Shuffled minibatch training with the step schedule, keeping the
/// best-validation weights. `on_epoch` sees every finished epoch.
pub fn train(
    mut params: MambaNetParams,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train().is_empty() {
        return Err(Error::InvalidArgument("dataset has no training samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::new(&params.set);
    let mut order: Vec<usize> = (0..data.n_train).collect();
    let mut history = Vec::with_capacity(cfg.max_epochs);
    let mut best: Option<(f64, usize, ParamSet)> = None;
    for epoch in 0..cfg.max_epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(cfg.minibatch).enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &data.samples[i]).collect();
            let loss = train_step(&mut params, &batch, &mut state, lr, cfg)?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "loss {loss} at epoch {epoch}, minibatch {b}, lr {lr:e}"
                )));
            }
            loss_sum += loss * batch.len() as f64;
        }
        let train_loss = loss_sum / data.n_train as f64;
        let val_loss = if data.validation().is_empty() {
            train_loss
        } else {
            evaluate_loss(&params, data.validation(), cfg.huber_delta)?
        };
        if !val_loss.is_finite() {
            return Err(Error::Diverged(format!("validation loss {val_loss} at epoch {epoch}")));
        }
        let record = EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
        };
        on_epoch(&record);
        history.push(record);
        if best.as_ref().is_none_or(|(v, _, _)| val_loss < *v) {
            best = Some((val_loss, epoch, params.set.clone()));
        }
    }
    let (_, best_epoch, set) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best: MambaNetParams { set, ..params },
        best_epoch,
        history,
    })
}
