//! Fast invariant checks runnable from a release binary.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::baseband::{BasebandConfig, Ofdm, UnitaryDft};
use crate::channel::{
    apply_channel_freq, apply_channel_time, complex_gaussian, freq_response, ChannelRealization, Path,
    PowerDelayProfile, SignalReference,
};
use crate::error::Result;
use crate::eval::{monte_carlo_sweep, Estimator, SweepSpec};
use crate::mambanet::{
    count_parameters, forward_tensors, scan_parallel, scan_sequential, tokenize, MambaNetConfig, MambaNetParams,
    ScanInputs,
};
use crate::tensor::{Checkpoint, Tensor};
use crate::training::{draw_slot, huber_loss};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn(&mut ChaCha8Rng) -> Result<(bool, String)>;

const CHECKS: &[(&str, Check)] = &[
    ("scan parallel matches sequential", scan_equivalence),
    ("dft is unitary", dft_unitary),
    ("softmax rows sum to one", softmax_rows),
    ("noiseless perfect-CSI loopback", loopback),
    ("time and frequency pathways agree", pathways),
    ("mmse beats ls interpolation", estimator_order),
    ("model gradients match finite differences", gradients),
    ("parameter count closed form", param_count),
    ("checkpoint roundtrip", checkpoint),
];

/// Run every check; a check that errors counts as failed.
pub fn run_all(seed: u64) -> Vec<CheckOutcome> {
    CHECKS
        .iter()
        .enumerate()
        .map(|(i, (name, f))| {
            let mut rng = crate::training::stream_rng(seed, i as u64);
            let (passed, detail) = f(&mut rng).unwrap_or_else(|e| (false, format!("error: {e}")));
            CheckOutcome { name, passed, detail }
        })
        .collect()
}

fn scan_equivalence(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for len in [1, 2, 3, 64, 228, 512] {
        for _ in 0..10 {
            let n = len * 3;
            let a = (0..n).map(|_| rng.random_range(0.001..0.999)).collect();
            let b = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s = ScanInputs::new(len, 3, a, b, vec![1.0; n])?;
            let (x, y) = (scan_sequential(&s), scan_parallel(&s));
            worst = x.iter().zip(&y).map(|(p, q)| (p - q).abs()).fold(worst, f64::max);
        }
    }
    Ok((worst <= 1e-10, format!("max abs diff {worst:.2e}")))
}

fn dft_unitary(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for n in [16, 48, 228] {
        let dft = UnitaryDft::new(n)?;
        let x: Vec<Complex64> = (0..n).map(|_| complex_gaussian(rng, 1.0)).collect();
        let e_in: f64 = x.iter().map(|v| v.norm_sqr()).sum();
        let y = dft.transform(&x, false);
        let e_out: f64 = y.iter().map(|v| v.norm_sqr()).sum();
        let back = dft.transform(&y, true);
        worst = worst.max(((e_out - e_in) / e_in).abs());
        worst = x.iter().zip(&back).map(|(a, b)| (a - b).norm()).fold(worst, f64::max);
    }
    Ok((worst <= 1e-12, format!("max deviation {worst:.2e}")))
}

fn softmax_rows(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let x: Vec<f64> = (0..57 * 57).map(|_| rng.random_range(-30.0..30.0)).collect();
    let s = Tensor::new(&[57, 57], x)?.softmax_rows()?;
    let worst = s
        .data()
        .chunks(57)
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    Ok((worst <= 1e-12, format!("max |row sum - 1| {worst:.2e}")))
}

fn loopback(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let cfg = BasebandConfig::default();
    let mut errors = 0;
    for _ in 0..10 {
        let d = draw_slot(&PowerDelayProfile::etu(), 97.0, f64::INFINITY, &cfg, rng)?;
        errors += crate::eval::bit_errors(&d.h, &d.y, &d.bits, &cfg)?.0;
    }
    Ok((errors == 0, format!("{errors} bit errors over 10 slots")))
}

fn pathways(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let cfg = BasebandConfig::default();
    let ofdm = Ofdm::new(&cfg)?;
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let d = draw_slot(&PowerDelayProfile::flat(), 0.0, f64::INFINITY, &cfg, rng)?;
        let paths = (0..4)
            .map(|_| Path {
                gain: complex_gaussian(rng, 0.25),
                delay: rng.random_range(0..=cfg.l_cp) as f64,
                doppler: 0.0,
                phase: rng.random_range(0.0..2.0 * PI),
            })
            .collect();
        let ch = ChannelRealization { paths, f_d_max: 0.0 };
        let sig = ofdm.modulate(&d.tx)?;
        let via_time = ofdm.demodulate(&apply_channel_time(&sig, &ch, f64::INFINITY, rng, &cfg)?)?;
        let h = freq_response(&ch, &cfg);
        let via_freq = apply_channel_freq(&d.tx, &h, f64::INFINITY, SignalReference::default(), rng)?;
        worst = via_time
            .values()
            .iter()
            .zip(via_freq.values())
            .map(|(a, b)| (a - b).norm())
            .fold(worst, f64::max);
    }
    Ok((worst <= 1e-9, format!("max |difference| {worst:.2e}")))
}

fn estimator_order(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let spec = SweepSpec {
        snr_db: vec![5.0, 30.0],
        n_trials: 100,
        ..SweepSpec::default()
    };
    let cfg = BasebandConfig::default();
    let r = monte_carlo_sweep(&[Estimator::Ls, Estimator::Mmse], &spec, &PowerDelayProfile::etu(), &cfg, rng.random())?;
    let mut ok = true;
    let mut detail = Vec::new();
    for s in &spec.snr_db {
        let (ls, mmse) = (r.get(*s, "ls").expect("row").mse, r.get(*s, "mmse").expect("row").mse);
        ok &= mmse <= ls;
        detail.push(format!("{s} dB: mmse {mmse:.3e} ls {ls:.3e}"));
    }
    Ok((ok, detail.join(", ")))
}

fn gradients(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let bb = BasebandConfig::with_subcarriers(16);
    let cfg = MambaNetConfig {
        c_spread: 4,
        ..MambaNetConfig::for_baseband(&bb)
    };
    let p = MambaNetParams::init(&cfg, rng.random())?;
    let d = draw_slot(&PowerDelayProfile::etu(), 50.0, 15.0, &bb, rng)?;
    let tokens = tokenize(&d.ls, &cfg)?;
    let target = Tensor::new(&[16, 14, 2], d.h.to_planes())?;
    let loss = |b: &[Tensor]| -> Result<Tensor> { huber_loss(&forward_tensors(&p, b, &tokens)?, &target, 1.0) };
    let bound = p.set.bind();
    loss(&bound)?.backward()?;
    let mut worst = 0.0f64;
    for (id, leaf) in bound.iter().enumerate() {
        let g = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.len()]);
        let i = rng.random_range(0..leaf.len());
        let eval = |delta: f64| -> Result<f64> {
            let mut set = p.set.clone();
            set.data_mut(id)[i] += delta;
            Ok(loss(&set.bind_frozen())?.item())
        };
        let numeric = (eval(1e-6)? - eval(-1e-6)?) / 2e-6;
        worst = worst.max((g[i] - numeric).abs() / g[i].abs().max(numeric.abs()).max(1e-5));
    }
    Ok((worst < 1e-4, format!("max relative error {worst:.2e} (one entry per tensor)")))
}

fn param_count(_: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let r = count_parameters(&MambaNetConfig::for_baseband(&BasebandConfig::default()));
    let in_proj: usize = r
        .breakdown
        .iter()
        .filter(|(g, _)| g == "attention.in_proj")
        .map(|(_, n)| n)
        .sum();
    let ok = in_proj == 156_636 && (250_000..=450_000).contains(&r.total);
    Ok((ok, format!("total {} (attention input projection {in_proj})", r.total)))
}

fn checkpoint(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let bb = BasebandConfig::with_subcarriers(16);
    let p = MambaNetParams::init(&MambaNetConfig::for_baseband(&bb), rng.random())?;
    let mut buf = Vec::new();
    p.to_checkpoint(&[]).write_to(&mut buf)?;
    let back = MambaNetParams::from_checkpoint(&Checkpoint::read_from(&mut buf.as_slice())?)?;
    Ok((back == p, format!("{} bytes", buf.len())))
}
