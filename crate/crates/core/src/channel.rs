//! Multipath fading: power-delay profiles, random realizations, and their
//! application to slots in the frequency and time domains.
//!
//! A realization is a list of paths `(a_m, τ_m, f_m, φ_m)`. The time-varying
//! path gain is `a_m(t) = a_m · e^{-j(2π f_m t + φ_m)}` and the per-RE
//! response is
//!
//! ```text
//! H[k, l] = Σ_m a_m · e^{-j(2π f_m T_o l + φ_m)} · e^{-j2π k τ_m / N_f}
//! ```
//!
//! with `T_o` the full symbol period. The frequency-domain path `Y = H∘X + N`
//! is the one used for data generation and evaluation. The time-domain path
//! only accepts integer delays within the cyclic prefix and exists to
//! cross-check it.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::baseband::{BasebandConfig, GridKind, SlotGrid, TimeSignal};
use crate::error::{invalid, Error, Result};

/// Per-RE channel gains of one slot.
pub type FrequencyResponse = SlotGrid;

#[derive(Debug, Clone, PartialEq)]
pub struct PowerDelayProfile {
    pub name: String,
    /// `(delay_ns, power_db)`, delays nondecreasing.
    pub taps: Vec<(f64, f64)>,
}

impl PowerDelayProfile {
    pub fn new(name: &str, delays_ns: &[f64], powers_db: &[f64]) -> Result<Self> {
        if delays_ns.len() != powers_db.len() || delays_ns.is_empty() {
            return Err(invalid(format!(
                "profile `{name}` needs equal, non-empty delay and power lists"
            )));
        }
        if delays_ns.iter().chain(powers_db).any(|v| !v.is_finite()) {
            return Err(invalid(format!("profile `{name}` has non-finite entries")));
        }
        if delays_ns[0] < 0.0 || delays_ns.windows(2).any(|w| w[1] < w[0]) {
            return Err(invalid(format!(
                "profile `{name}` delays must be nonnegative and nondecreasing"
            )));
        }
        Ok(Self {
            name: name.to_owned(),
            taps: delays_ns.iter().copied().zip(powers_db.iter().copied()).collect(),
        })
    }

    /// Extended Typical Urban (3GPP TS 36.101, Annex B.2).
    pub fn etu() -> Self {
        Self::new(
            "ETU",
            &[0.0, 50.0, 120.0, 200.0, 230.0, 500.0, 1600.0, 2300.0, 5000.0],
            &[-1.0, -1.0, -1.0, 0.0, 0.0, 0.0, -3.0, -5.0, -7.0],
        )
        .expect("built-in profile is valid")
    }

    /// Single tap at zero delay (flat fading).
    pub fn flat() -> Self {
        Self::new("flat", &[0.0], &[0.0]).expect("built-in profile is valid")
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name.to_ascii_uppercase().as_str() {
            "ETU" => Some(Self::etu()),
            "FLAT" => Some(Self::flat()),
            _ => None,
        }
    }

    /// Linear powers scaled to sum to one.
    pub fn normalized_powers(&self) -> Vec<f64> {
        let lin: Vec<f64> = self.taps.iter().map(|(_, p)| 10f64.powf(p / 10.0)).collect();
        let total: f64 = lin.iter().sum();
        lin.iter().map(|p| p / total).collect()
    }

    /// Delays expressed in samples of period `T_s`.
    pub fn delays_in_samples(&self, cfg: &BasebandConfig) -> Vec<f64> {
        let ts = cfg.sample_period();
        self.taps.iter().map(|(d, _)| d * 1e-9 / ts).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Path {
    pub gain: Complex64,
    /// Delay in samples (may be fractional).
    pub delay: f64,
    /// Doppler shift, Hz.
    pub doppler: f64,
    /// Initial phase, rad.
    pub phase: f64,
}

impl Path {
    /// `a_m(t) = a_m · e^{-j(2π f_m t + φ_m)}`
    pub fn gain_at(&self, t: f64) -> Complex64 {
        self.gain * Complex64::from_polar(1.0, -(2.0 * PI * self.doppler * t + self.phase))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub paths: Vec<Path>,
    pub f_d_max: f64,
}

impl ChannelRealization {
    pub fn single(gain: Complex64, delay: f64, doppler: f64, phase: f64) -> Self {
        Self {
            paths: vec![Path {
                gain,
                delay,
                doppler,
                phase,
            }],
            f_d_max: doppler.abs(),
        }
    }
}

/// Draw one Rayleigh realization: complex Gaussian gains scaled by the
/// normalized profile, Jakes-style Doppler `f_max·cos θ`, uniform phases.
pub fn sample_realization<R: Rng + ?Sized>(
    pdp: &PowerDelayProfile,
    f_d_max: f64,
    cfg: &BasebandConfig,
    rng: &mut R,
) -> Result<ChannelRealization> {
    if !(f_d_max >= 0.0) || !f_d_max.is_finite() {
        return Err(invalid(format!("maximum Doppler must be >= 0, got {f_d_max}")));
    }
    let powers = pdp.normalized_powers();
    let delays = pdp.delays_in_samples(cfg);
    let paths = powers
        .iter()
        .zip(&delays)
        .map(|(&p, &delay)| {
            let g1: f64 = StandardNormal.sample(rng);
            let g2: f64 = StandardNormal.sample(rng);
            let theta = rng.random_range(0.0..2.0 * PI);
            let phase = rng.random_range(0.0..2.0 * PI);
            Path {
                gain: Complex64::new(g1, g2) * (p / 2.0).sqrt(),
                delay,
                doppler: f_d_max * theta.cos(),
                phase,
            }
        })
        .collect();
    Ok(ChannelRealization { paths, f_d_max })
}

fn integer_delay(tau: f64) -> Option<usize> {
    let r = tau.round();
    ((tau - r).abs() < 1e-12 && r >= 0.0).then_some(r as usize)
}

/// Sampled impulse response at time `t`, length `N_f`.
///
/// Fractional delays spread over all taps via the periodic sinc (Dirichlet)
/// kernel, scaled by `1/N_f` so that an integer delay `d` produces a single
/// tap of amplitude `a_m(t)` at index `d`.
pub fn channel_taps(ch: &ChannelRealization, t: f64, cfg: &BasebandConfig) -> Vec<Complex64> {
    let n = cfg.n_f;
    let nf = n as f64;
    let mut taps = vec![Complex64::new(0.0, 0.0); n];
    for path in &ch.paths {
        let a = path.gain_at(t);
        if let Some(d) = integer_delay(path.delay) {
            taps[d % n] += a;
            continue;
        }
        let tau = path.delay;
        let num = (PI * tau).sin();
        for (i, tap) in taps.iter_mut().enumerate() {
            let x = i as f64;
            let phase = -PI * (x + (nf - 1.0) * tau) / nf;
            let den = (PI / nf * (tau - x)).sin();
            *tap += a * Complex64::from_polar(1.0, phase) * (num / den / nf);
        }
    }
    taps
}

/// Per-RE response over the slot, Doppler advancing once per symbol period.
pub fn freq_response(ch: &ChannelRealization, cfg: &BasebandConfig) -> FrequencyResponse {
    let n = cfg.n_f;
    let t_o = cfg.symbol_period();
    let mut h = SlotGrid::zeros(GridKind::Channel, n, cfg.n_s);
    for path in &ch.paths {
        let step = Complex64::from_polar(1.0, -2.0 * PI * path.delay / n as f64);
        for l in 0..cfg.n_s {
            let a = path.gain_at(t_o * l as f64);
            let col = h.symbol_mut(l);
            // Recompute the ramp every 32 bins to keep rounding drift below 1e-14.
            let mut rot = a;
            for (k, v) in col.iter_mut().enumerate() {
                if k % 32 == 0 {
                    rot = a * Complex64::from_polar(1.0, -2.0 * PI * path.delay * k as f64 / n as f64);
                }
                *v += rot;
                rot *= step;
            }
        }
    }
    h
}

/// Which resource elements define the signal power used for SNR calibration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SignalReference {
    /// Mean power over REs with nonzero transmitted value.
    #[default]
    NonzeroElements,
    /// `‖X‖_F² / (N_f N_s)` over the whole grid.
    FullGrid,
}

pub fn signal_power(grid: &SlotGrid, reference: SignalReference) -> f64 {
    let vals = grid.values();
    match reference {
        SignalReference::FullGrid => grid.energy() / vals.len() as f64,
        SignalReference::NonzeroElements => {
            let (sum, count) = vals
                .iter()
                .filter(|v| v.norm_sqr() > 0.0)
                .fold((0.0, 0usize), |(s, c), v| (s + v.norm_sqr(), c + 1));
            if count == 0 {
                0.0
            } else {
                sum / count as f64
            }
        }
    }
}

/// `σ_N² = σ_X² · 10^{-snr/10}`; zero for `snr_db = +∞`.
pub fn noise_variance(signal_power: f64, snr_db: f64) -> f64 {
    if snr_db == f64::INFINITY {
        0.0
    } else {
        signal_power * 10f64.powf(-snr_db / 10.0)
    }
}

/// Circularly-symmetric complex Gaussian with total variance `var`.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, var: f64) -> Complex64 {
    let sd = (var / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re * sd, im * sd)
}

/// `Y = H∘X + N`. Pass `f64::INFINITY` to disable noise.
pub fn apply_channel_freq<R: Rng + ?Sized>(
    grid: &SlotGrid,
    h: &FrequencyResponse,
    snr_db: f64,
    reference: SignalReference,
    rng: &mut R,
) -> Result<SlotGrid> {
    if grid.n_f() != h.n_f() || grid.n_s() != h.n_s() {
        return Err(invalid("channel and slot dimensions differ"));
    }
    let var = noise_variance(signal_power(grid, reference), snr_db);
    let mut y = SlotGrid::zeros(GridKind::Received, grid.n_f(), grid.n_s());
    for ((dst, x), hv) in y.values_mut().iter_mut().zip(grid.values()).zip(h.values()) {
        *dst = hv * x;
        if var > 0.0 {
            *dst += complex_gaussian(rng, var);
        }
    }
    Ok(y)
}

/// Time-domain convolution with quasi-static taps (held per OFDM symbol,
/// evaluated at the symbol start) plus AWGN.
///
/// The noise reference power is the mean sample power of `sig`.
pub fn apply_channel_time<R: Rng + ?Sized>(
    sig: &TimeSignal,
    ch: &ChannelRealization,
    snr_db: f64,
    rng: &mut R,
    cfg: &BasebandConfig,
) -> Result<TimeSignal> {
    let block = cfg.n_f + cfg.l_cp;
    if sig.samples.len() != cfg.samples_per_slot() {
        return Err(invalid("time signal length does not match the configuration"));
    }
    let mut delays = Vec::with_capacity(ch.paths.len());
    for p in &ch.paths {
        match integer_delay(p.delay) {
            Some(d) if d <= cfg.l_cp => delays.push(d),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "time-domain channel needs integer delays <= L_CP = {}, got {}",
                    cfg.l_cp, p.delay
                )))
            }
        }
    }
    let t_o = cfg.symbol_period();
    let mut out = vec![Complex64::new(0.0, 0.0); sig.samples.len()];
    for (l, input) in sig.samples.chunks(block).enumerate() {
        let start = l * block;
        for (p, &d) in ch.paths.iter().zip(&delays) {
            let a = p.gain_at(t_o * l as f64);
            for (i, x) in input.iter().enumerate() {
                if let Some(o) = out.get_mut(start + i + d) {
                    *o += a * x;
                }
            }
        }
    }
    let power = sig.samples.iter().map(|v| v.norm_sqr()).sum::<f64>() / sig.samples.len() as f64;
    let var = noise_variance(power, snr_db);
    if var > 0.0 {
        out.iter_mut().for_each(|v| *v += complex_gaussian(rng, var));
    }
    Ok(TimeSignal { samples: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baseband::{build_slot, qpsk_modulate, Ofdm, UnitaryDft};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_slot(cfg: &BasebandConfig, rng: &mut ChaCha8Rng) -> SlotGrid {
        let bits: Vec<u8> = (0..2 * cfg.data_capacity()).map(|_| rng.random_range(0..2u8)).collect();
        build_slot(&qpsk_modulate(&bits).unwrap(), cfg).unwrap()
    }

    #[test]
    fn etu_profile_normalizes() {
        let p = PowerDelayProfile::etu();
        assert_eq!(p.taps.len(), 9);
        let s: f64 = p.normalized_powers().iter().sum();
        assert!((s - 1.0).abs() < 1e-15);
        let cfg = BasebandConfig::default();
        let d = p.delays_in_samples(&cfg);
        assert!((d[8] - 5000e-9 * 228.0 * 15e3).abs() < 1e-12);
        assert!(PowerDelayProfile::new("bad", &[10.0, 5.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn zero_doppler_and_negative_rejected() {
        let cfg = BasebandConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ch = sample_realization(&PowerDelayProfile::etu(), 0.0, &cfg, &mut rng).unwrap();
        assert!(ch.paths.iter().all(|p| p.doppler == 0.0));
        assert!(sample_realization(&PowerDelayProfile::etu(), -1.0, &cfg, &mut rng).is_err());
        let ch = sample_realization(&PowerDelayProfile::etu(), 97.0, &cfg, &mut rng).unwrap();
        assert!(ch.paths.iter().all(|p| p.doppler.abs() <= 97.0));
    }

    #[test]
    fn realization_power_is_unit_on_average() {
        let cfg = BasebandConfig::default();
        let pdp = PowerDelayProfile::etu();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let total: f64 = (0..n)
            .map(|_| {
                let ch = sample_realization(&pdp, 97.0, &cfg, &mut rng).unwrap();
                ch.paths.iter().map(|p| p.gain.norm_sqr()).sum::<f64>()
            })
            .sum();
        assert!((total / n as f64 - 1.0).abs() < 0.01);
    }

    #[test]
    fn integer_taps_are_deltas() {
        let cfg = BasebandConfig::default();
        let ch = ChannelRealization::single(c(1.0, 0.0), 0.0, 0.0, 0.0);
        let taps = channel_taps(&ch, 0.0, &cfg);
        assert_eq!(taps[0], c(1.0, 0.0));
        assert!(taps[1..].iter().all(|v| v.norm() == 0.0));
        let ch = ChannelRealization::single(c(0.5, 0.5), 3.0, 0.0, 0.0);
        let taps = channel_taps(&ch, 0.0, &cfg);
        assert_eq!(taps[3], c(0.5, 0.5));
        assert_eq!(taps.iter().filter(|v| v.norm() > 0.0).count(), 1);
    }

    #[test]
    fn fractional_taps_are_dft_consistent() {
        let cfg = BasebandConfig::default();
        let dft = UnitaryDft::new(cfg.n_f).unwrap();
        let scale = (cfg.n_f as f64).sqrt();
        let ch = ChannelRealization::single(c(1.0, 0.0), 2.5, 0.0, 0.0);
        let spec = dft.transform(&channel_taps(&ch, 0.0, &cfg), false);
        for (k, v) in spec.iter().enumerate() {
            let expect = Complex64::from_polar(1.0, -2.0 * PI * k as f64 * 2.5 / cfg.n_f as f64);
            assert!((v * scale - expect).norm() < 1e-9);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ch = sample_realization(&PowerDelayProfile::etu(), 97.0, &cfg, &mut rng).unwrap();
        for p in &mut ch.paths {
            p.delay += rng.random_range(0.0..1.0);
        }
        let h = freq_response(&ch, &cfg);
        for l in [0, 7, 13] {
            let t = cfg.symbol_period() * l as f64;
            let spec = dft.transform(&channel_taps(&ch, t, &cfg), false);
            for k in 0..cfg.n_f {
                assert!((spec[k] * scale - h.get(k, l)).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn response_examples() {
        let cfg = BasebandConfig::default();
        let flat = freq_response(&ChannelRealization::single(c(1.0, 0.0), 0.0, 0.0, 0.0), &cfg);
        assert!(flat.values().iter().all(|v| (v - c(1.0, 0.0)).norm() < 1e-15));

        let phi = 0.8;
        let h = freq_response(&ChannelRealization::single(c(1.0, 0.0), 0.0, 0.0, phi), &cfg);
        let e = Complex64::from_polar(1.0, -phi);
        assert!(h.values().iter().all(|v| (v - e).norm() < 1e-15));

        let small = BasebandConfig::with_subcarriers(8);
        let h = freq_response(&ChannelRealization::single(c(1.0, 0.0), 2.0, 0.0, 0.0), &small);
        let expect = [c(1.0, 0.0), c(0.0, -1.0), c(-1.0, 0.0), c(0.0, 1.0)];
        for k in 0..8 {
            assert!((h.get(k, 0) - expect[k % 4]).norm() < 1e-14);
        }

        let h = freq_response(&ChannelRealization::single(c(1.0, 0.0), 4.3, 97.0, 0.2), &cfg);
        let step = -2.0 * PI * 97.0 * cfg.symbol_period();
        for l in 0..13 {
            let ratio = h.get(10, l + 1) / h.get(10, l);
            assert!((ratio - Complex64::from_polar(1.0, step)).norm() < 1e-12);
        }
    }

    #[test]
    fn channel_power_is_unit() {
        let cfg = BasebandConfig::default();
        let pdp = PowerDelayProfile::etu();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 10_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let ch = sample_realization(&pdp, 97.0, &cfg, &mut rng).unwrap();
            let h = freq_response(&ch, &cfg);
            acc += h.symbol(0).iter().map(|v| v.norm_sqr()).sum::<f64>() / cfg.n_f as f64;
        }
        assert!((acc / n as f64 - 1.0).abs() < 0.02);
    }

    #[test]
    fn noise_calibration() {
        let cfg = BasebandConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_slot(&cfg, &mut rng);
        let ones = freq_response(&ChannelRealization::single(c(1.0, 0.0), 0.0, 0.0, 0.0), &cfg);
        let y = apply_channel_freq(&x, &ones, f64::INFINITY, SignalReference::default(), &mut rng)
            .unwrap();
        assert_eq!(y.values(), x.values());

        let snr = 10.0;
        let (mut sig, mut noise) = (0.0, 0.0);
        let mut count = 0;
        while count < 100_000 {
            let y = apply_channel_freq(&x, &ones, snr, SignalReference::default(), &mut rng).unwrap();
            for (a, b) in y.values().iter().zip(x.values()) {
                if b.norm_sqr() > 0.0 {
                    sig += b.norm_sqr();
                    noise += (a - b).norm_sqr();
                    count += 1;
                }
            }
        }
        let measured = 10.0 * (sig / noise).log10();
        assert!((measured - snr).abs() < 0.2, "{measured}");

        let zero = SlotGrid::zeros(GridKind::Channel, cfg.n_f, cfg.n_s);
        let mut pow = 0.0;
        let mut cnt = 0;
        for _ in 0..4 {
            let y = apply_channel_freq(&x, &zero, snr, SignalReference::default(), &mut rng).unwrap();
            pow += y.energy();
            cnt += y.values().len();
        }
        assert!((pow / cnt as f64 / 0.1 - 1.0).abs() < 0.05);
    }

    #[test]
    fn time_path_matches_frequency_path() {
        let cfg = BasebandConfig::default();
        let ofdm = Ofdm::new(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_slot(&cfg, &mut rng);
        let sig = ofdm.modulate(&x).unwrap();

        let id = ChannelRealization::single(c(1.0, 0.0), 0.0, 0.0, 0.0);
        let out = apply_channel_time(&sig, &id, f64::INFINITY, &mut rng, &cfg).unwrap();
        assert_eq!(out, sig);

        let delay = ChannelRealization::single(c(1.0, 0.0), 4.0, 0.0, 0.0);
        let out = apply_channel_time(&sig, &delay, f64::INFINITY, &mut rng, &cfg).unwrap();
        assert_eq!(out.samples[4..], sig.samples[..sig.samples.len() - 4]);

        for trial in 0..20 {
            let paths = (0..4)
                .map(|_| Path {
                    gain: complex_gaussian(&mut rng, 0.25),
                    delay: rng.random_range(0..=cfg.l_cp) as f64,
                    doppler: if trial % 2 == 0 { 0.0 } else { 80.0 },
                    phase: rng.random_range(0.0..2.0 * PI),
                })
                .collect();
            let ch = ChannelRealization { paths, f_d_max: 80.0 };
            let via_time = ofdm
                .demodulate(&apply_channel_time(&sig, &ch, f64::INFINITY, &mut rng, &cfg).unwrap())
                .unwrap();
            let h = freq_response(&ch, &cfg);
            let via_freq =
                apply_channel_freq(&x, &h, f64::INFINITY, SignalReference::default(), &mut rng).unwrap();
            for (a, b) in via_time.values().iter().zip(via_freq.values()) {
                assert!((a - b).norm() < 1e-9);
            }
        }

        let long = ChannelRealization::single(c(1.0, 0.0), 13.0, 0.0, 0.0);
        assert!(apply_channel_time(&sig, &long, f64::INFINITY, &mut rng, &cfg).is_err());
    }
}
