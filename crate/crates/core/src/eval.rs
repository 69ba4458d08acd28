//! Monte Carlo MSE/BER sweeps, runtime ratios and scan scaling benchmarks.

use std::hint::black_box;
use std::time::Instant;

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;

use crate::baseband::{extract_data, qpsk_demodulate, BasebandConfig, GridKind, SlotGrid};
use crate::channel::{FrequencyResponse, PowerDelayProfile};
use crate::error::{Error, Result};
use crate::estimators::{correlation_from_pdp, interpolate_grid, MmseFilter};
use crate::mambanet::{forward_tensors, scan_sequential_into, tokenize, MambaNetParams, ScanInputs};
use crate::training::{draw_slot, stream_rng, SlotDraw};

/// Smallest channel magnitude the equalizer divides by.
pub const EQUALIZER_FLOOR: f64 = 1e-12;

fn check_dims(a: &SlotGrid, b: &SlotGrid, op: &'static str) -> Result<()> {
    if a.n_f() != b.n_f() || a.n_s() != b.n_s() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: vec![a.n_f(), a.n_s()],
            rhs: vec![b.n_f(), b.n_s()],
        });
    }
    Ok(())
}

/// `(N_f N_s)⁻¹ Σ |Ĥ − H|²` for one slot.
pub fn mse_metric(est: &SlotGrid, truth: &FrequencyResponse) -> Result<f64> {
    check_dims(est, truth, "mse_metric")?;
    let sum: f64 = est
        .values()
        .iter()
        .zip(truth.values())
        .map(|(a, b)| (a - b).norm_sqr())
        .sum();
    Ok(sum / est.values().len() as f64)
}

/// One-tap zero-forcing equalization `Y / Ĥ`, with `|Ĥ|` floored at
/// [`EQUALIZER_FLOOR`].
pub fn equalize(est: &SlotGrid, rx: &SlotGrid) -> Result<SlotGrid> {
    check_dims(est, rx, "equalize")?;
    let vals = est
        .values()
        .iter()
        .zip(rx.values())
        .map(|(h, y)| {
            let mag = h.norm();
            let h = if mag >= EQUALIZER_FLOOR {
                *h
            } else if mag > 0.0 {
                h * (EQUALIZER_FLOOR / mag)
            } else {
                Complex64::new(EQUALIZER_FLOOR, 0.0)
            };
            y / h
        })
        .collect();
    SlotGrid::from_symbols(GridKind::Transmitted, rx.n_f(), rx.n_s(), vals)
}

/// Bit errors and bits compared over the data resource elements.
pub fn bit_errors(est: &SlotGrid, rx: &SlotGrid, tx_bits: &[u8], cfg: &BasebandConfig) -> Result<(u64, u64)> {
    let bits = qpsk_demodulate(&extract_data(&equalize(est, rx)?, cfg));
    if bits.len() != tx_bits.len() {
        return Err(Error::InvalidArgument(format!(
            "slot carries {} bits, reference has {}",
            bits.len(),
            tx_bits.len()
        )));
    }
    let errors = bits.iter().zip(tx_bits).filter(|(a, b)| a != b).count();
    Ok((errors as u64, bits.len() as u64))
}

/// Fraction of data bits recovered incorrectly after equalization.
pub fn ber_metric(est: &SlotGrid, rx: &SlotGrid, tx_bits: &[u8], cfg: &BasebandConfig) -> Result<f64> {
    let (e, n) = bit_errors(est, rx, tx_bits, cfg)?;
    Ok(e as f64 / n as f64)
}

/// Channel estimators compared by the sweep.
#[derive(Debug, Clone, Copy)]
pub enum Estimator<'a> {
    /// Pilot LS with linear interpolation.
    Ls,
    /// Wiener filter with the true profile correlations and SNR.
    Mmse,
    MambaNet(&'a MambaNetParams),
    /// The true channel; lower bound for BER.
    PerfectCsi,
}

impl Estimator<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Estimator::Ls => "ls",
            Estimator::Mmse => "mmse",
            Estimator::MambaNet(_) => "mambanet",
            Estimator::PerfectCsi => "perfect",
        }
    }
}

/// Prepared per-SNR state for running estimators on many slots.
struct Runner<'a> {
    estimators: &'a [Estimator<'a>],
    mmse: Option<MmseFilter>,
    cfg: &'a BasebandConfig,
}

impl Runner<'_> {
    fn estimate(&self, which: &Estimator, d: &SlotDraw, bound: Option<&[crate::tensor::Tensor]>) -> Result<SlotGrid> {
        match which {
            Estimator::Ls => interpolate_grid(&d.ls, self.cfg),
            Estimator::Mmse => self.mmse.as_ref().expect("prepared").estimate(&d.ls, self.cfg),
            Estimator::MambaNet(p) => {
                let out = forward_tensors(p, bound.expect("bound"), &tokenize(&d.ls, &p.cfg)?)?;
                SlotGrid::from_planes(GridKind::Channel, self.cfg.n_f, self.cfg.n_s, out.data())
            }
            Estimator::PerfectCsi => Ok(d.h.clone()),
        }
    }
}

/// What to sweep and how many paired trials per point.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub snr_db: Vec<f64>,
    pub n_trials: usize,
    pub fd_range: (f64, f64),
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            snr_db: vec![5.0, 10.0, 15.0, 20.0, 25.0, 30.0],
            n_trials: 5_000,
            fd_range: (0.0, 97.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub snr_db: f64,
    pub estimator: String,
    pub mse: f64,
    pub ber: f64,
    pub n_trials: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Provenance such as seed, config hash and checkpoint id.
    pub metadata: Vec<(String, String)>,
}

impl SweepReport {
    pub fn get(&self, snr_db: f64, estimator: &str) -> Option<&SweepRow> {
        self.rows
            .iter()
            .find(|r| r.snr_db == snr_db && r.estimator == estimator)
    }

    fn header_line(&self) -> String {
        let meta: Vec<String> = self.metadata.iter().map(|(k, v)| format!("{k}={v}")).collect();
        format!("# {}\n", meta.join(" "))
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header_line();
        s.push_str("snr_db,estimator,mse,ber,n_trials\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{:.9e},{:.9e},{}\n",
                r.snr_db, r.estimator, r.mse, r.ber, r.n_trials
            ));
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = self.header_line();
        s.push_str(&format!("{:>8}  {:<10} {:>14} {:>14} {:>8}\n", "snr_db", "estimator", "mse", "ber", "trials"));
        for r in &self.rows {
            s.push_str(&format!(
                "{:>8}  {:<10} {:>14.6e} {:>14.6e} {:>8}\n",
                r.snr_db, r.estimator, r.mse, r.ber, r.n_trials
            ));
        }
        s
    }
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Trials handled by one worker with a single parameter binding.
const TRIAL_GROUP: usize = 16;

/// Paired Monte Carlo comparison: at each SNR every estimator sees the same
/// realizations, data and noise. Trial `t` at SNR index `i` draws from
/// stream `(i << 32) | t` of `seed`.
pub fn monte_carlo_sweep(
    estimators: &[Estimator],
    spec: &SweepSpec,
    pdp: &PowerDelayProfile,
    cfg: &BasebandConfig,
    seed: u64,
) -> Result<SweepReport> {
    cfg.validate()?;
    if spec.n_trials == 0 {
        return Err(Error::Config {
            key: "eval.n_trials".into(),
            reason: "must be at least 1".into(),
        });
    }
    if spec.snr_db.iter().any(|s| s.is_nan()) {
        return Err(Error::Config {
            key: "eval.snr_db".into(),
            reason: "NaN SNR".into(),
        });
    }
    for e in estimators {
        if let Estimator::MambaNet(p) = e {
            if p.cfg.n_f != cfg.n_f || p.cfg.n_s != cfg.n_s || p.cfg.n_pilot != cfg.n_pilot() {
                return Err(Error::Config {
                    key: "model.n_f".into(),
                    reason: format!("model built for {}x{}, link is {}x{}", p.cfg.n_f, p.cfg.n_s, cfg.n_f, cfg.n_s),
                });
            }
        }
    }
    let needs_mmse = estimators.iter().any(|e| matches!(e, Estimator::Mmse));
    let corr = needs_mmse.then(|| correlation_from_pdp(pdp, cfg));
    let mut rows = Vec::with_capacity(spec.snr_db.len() * estimators.len());
    for (si, &snr) in spec.snr_db.iter().enumerate() {
        let runner = Runner {
            estimators,
            mmse: corr
                .as_ref()
                .map(|c| MmseFilter::new(&c.clone().with_snr_db(snr)))
                .transpose()?,
            cfg,
        };
        let trials: Vec<u64> = (0..spec.n_trials as u64).collect();
        let per_group = trials
            .par_chunks(TRIAL_GROUP)
            .map(|group| {
                let bindings: Vec<Option<Vec<crate::tensor::Tensor>>> = runner
                    .estimators
                    .iter()
                    .map(|e| match e {
                        Estimator::MambaNet(p) => Some(p.set.bind_frozen()),
                        _ => None,
                    })
                    .collect();
                group
                    .iter()
                    .map(|&t| {
                        let mut rng = stream_rng(seed, ((si as u64) << 32) | t);
                        let (lo, hi) = spec.fd_range;
                        let fd = if lo == hi { lo } else { rng.random_range(lo..=hi) };
                        let d = draw_slot(pdp, fd, snr, cfg, &mut rng)?;
                        runner
                            .estimators
                            .iter()
                            .zip(&bindings)
                            .map(|(e, b)| {
                                let est = runner.estimate(e, &d, b.as_deref())?;
                                Ok((mse_metric(&est, &d.h)?, bit_errors(&est, &d.y, &d.bits, cfg)?))
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let mut mse = vec![KahanSum::default(); estimators.len()];
        let mut errs = vec![(0u64, 0u64); estimators.len()];
        for trial in per_group.iter().flatten() {
            for (k, (m, (e, n))) in trial.iter().enumerate() {
                mse[k].add(*m);
                errs[k].0 += e;
                errs[k].1 += n;
            }
        }
        for (k, e) in estimators.iter().enumerate() {
            rows.push(SweepRow {
                snr_db: snr,
                estimator: e.name().to_owned(),
                mse: mse[k].value() / spec.n_trials as f64,
                ber: errs[k].0 as f64 / errs[k].1 as f64,
                n_trials: spec.n_trials,
            });
        }
    }
    Ok(SweepReport {
        rows,
        metadata: vec![("seed".into(), seed.to_string())],
    })
}

/// Host-measured seconds per slot for each estimator, and the ratio to the
/// LS estimator when it is present.
#[derive(Debug, Clone, PartialEq)]
pub struct RuntimeRow {
    pub estimator: String,
    pub seconds_per_slot: f64,
    pub ratio_to_ls: Option<f64>,
}

pub fn estimator_runtime(
    estimators: &[Estimator],
    pdp: &PowerDelayProfile,
    cfg: &BasebandConfig,
    slots: usize,
    seed: u64,
) -> Result<Vec<RuntimeRow>> {
    let slots = slots.max(1);
    let draws = (0..slots as u64)
        .map(|t| draw_slot(pdp, 0.0, 20.0, cfg, &mut stream_rng(seed, t)))
        .collect::<Result<Vec<_>>>()?;
    let runner = Runner {
        estimators,
        mmse: Some(MmseFilter::new(&correlation_from_pdp(pdp, cfg).with_snr_db(20.0))?),
        cfg,
    };
    let mut rows = Vec::new();
    for e in estimators {
        let bound = match e {
            Estimator::MambaNet(p) => Some(p.set.bind_frozen()),
            _ => None,
        };
        let start = Instant::now();
        for d in &draws {
            black_box(runner.estimate(e, d, bound.as_deref())?);
        }
        rows.push(RuntimeRow {
            estimator: e.name().to_owned(),
            seconds_per_slot: start.elapsed().as_secs_f64() / slots as f64,
            ratio_to_ls: None,
        });
    }
    if let Some(ls) = rows.iter().find(|r| r.estimator == "ls").map(|r| r.seconds_per_slot) {
        for r in &mut rows {
            r.ratio_to_ls = Some(r.seconds_per_slot / ls);
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingRow {
    pub len: usize,
    pub scan_seconds: f64,
    pub attention_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
    pub scan_slope: f64,
    pub attention_slope: f64,
}

impl ScalingReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("len,scan_seconds,attention_seconds\n");
        for r in &self.rows {
            s.push_str(&format!("{},{:.6e},{:.6e}\n", r.len, r.scan_seconds, r.attention_seconds));
        }
        s
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Median over `reps` of the per-call time, each rep repeating `f` until at
/// least `min_secs` have elapsed.
fn median_time(reps: usize, min_secs: f64, mut f: impl FnMut()) -> f64 {
    f();
    let mut times: Vec<f64> = (0..reps.max(1))
        .map(|_| {
            let start = Instant::now();
            let mut calls = 0u32;
            loop {
                f();
                calls += 1;
                let el = start.elapsed().as_secs_f64();
                if el >= min_secs {
                    return el / calls as f64;
                }
            }
        })
        .collect();
    times.sort_by(f64::total_cmp);
    times[times.len() / 2]
}

/// Dense `Q Kᵀ` score product for `L × d` operands, one row at a time so
/// memory stays `O(L)`. Returns the sum of all scores.
pub fn dense_attention_scores(q: &[f64], k: &[f64], d: usize) -> f64 {
    let l = q.len() / d;
    let mut row = vec![0.0; l];
    let mut total = 0.0;
    for qi in q.chunks_exact(d) {
        for (r, kj) in row.iter_mut().zip(k.chunks_exact(d)) {
            *r = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
        }
        total += row.iter().sum::<f64>();
    }
    total
}

/// Time the sequential bidirectional scan (`channels` wide) and the dense
/// attention score product (head width 2) at each length.
pub fn bench_scan_scaling(lengths: &[usize], reps: usize, channels: usize, seed: u64) -> Result<ScalingReport> {
    if lengths.len() < 2 || lengths.contains(&0) || channels == 0 {
        return Err(Error::InvalidArgument("need at least two positive lengths".into()));
    }
    let mut rows = Vec::with_capacity(lengths.len());
    for &len in lengths {
        let mut rng = stream_rng(seed, len as u64);
        let n = len * channels;
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let inputs = ScanInputs::new(len, channels, a, b, vec![1.0; n])?;
        let mut out = Vec::with_capacity(n);
        let scan_seconds = median_time(reps, 5e-3, || {
            scan_sequential_into(black_box(&inputs), &mut out);
            black_box(&out);
        });
        let q: Vec<f64> = (0..2 * len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..2 * len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let attention_seconds = median_time(reps, 5e-3, || {
            black_box(dense_attention_scores(black_box(&q), black_box(&k), 2));
        });
        rows.push(ScalingRow {
            len,
            scan_seconds,
            attention_seconds,
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.len as f64).collect();
    let scan: Vec<f64> = rows.iter().map(|r| r.scan_seconds).collect();
    let attn: Vec<f64> = rows.iter().map(|r| r.attention_seconds).collect();
    Ok(ScalingReport {
        scan_slope: loglog_slope(&xs, &scan),
        attention_slope: loglog_slope(&xs, &attn),
        rows,
    })
}
