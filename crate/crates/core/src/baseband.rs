//! OFDM slot construction, QPSK mapping, and unitary-scaled (de)modulation.

use std::fmt::Write as _;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{invalid, Error, Result};

/// Numerology and pilot placement of one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct BasebandConfig {
    /// Subcarriers per symbol.
    pub n_f: usize,
    /// OFDM symbols per slot.
    pub n_s: usize,
    /// Cyclic prefix length in samples.
    pub l_cp: usize,
    /// Pilot subcarrier stride.
    pub l_s: usize,
    /// Zero-based symbols carrying pilots.
    pub pilot_symbols: Vec<usize>,
    /// Zero-based pilot subcarrier offset inside each stride group.
    pub pilot_offset: usize,
    /// Subcarrier spacing, Hz.
    pub f_space: f64,
    /// Carrier frequency, Hz.
    pub f_r: f64,
    pub pilot_value: Complex64,
}

impl Default for BasebandConfig {
    fn default() -> Self {
        Self {
            n_f: 228,
            n_s: 14,
            l_cp: 12,
            l_s: 4,
            pilot_symbols: vec![2, 5, 8, 11],
            pilot_offset: 1,
            f_space: 15e3,
            f_r: 5e9,
            pilot_value: Complex64::new(1.0, 1.0) / 2f64.sqrt(),
        }
    }
}

impl BasebandConfig {
    pub fn with_subcarriers(n_f: usize) -> Self {
        Self {
            n_f,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, reason: &str| {
            Err(Error::Config {
                key: format!("baseband.{key}"),
                reason: reason.to_owned(),
            })
        };
        if self.n_f == 0 || self.n_s == 0 {
            return fail("n_f", "grid extents must be positive");
        }
        if self.l_s == 0 || self.n_f % self.l_s != 0 {
            return fail("l_s", "n_f must be divisible by the pilot stride");
        }
        if self.pilot_offset >= self.l_s {
            return fail("pilot_offset", "must be smaller than l_s");
        }
        if self.pilot_symbols.is_empty() || self.pilot_symbols.iter().any(|&s| s >= self.n_s) {
            return fail("pilot_symbols", "must be non-empty and inside [0, n_s)");
        }
        if self.pilot_symbols.windows(2).any(|w| w[0] >= w[1]) {
            return fail("pilot_symbols", "must be strictly increasing");
        }
        if self.l_cp >= self.n_f {
            return fail("l_cp", "must be smaller than n_f");
        }
        if !(self.f_space > 0.0) || !(self.f_r > 0.0) {
            return fail("f_space", "frequencies must be positive");
        }
        if self.pilot_value.norm() == 0.0 || !self.pilot_value.is_finite() {
            return fail("pilot_value", "must be finite and non-zero");
        }
        Ok(())
    }

    /// Pilot subcarriers per pilot symbol (`N_f / L_s`).
    pub fn pilots_per_symbol(&self) -> usize {
        self.n_f / self.l_s
    }

    pub fn n_pilot(&self) -> usize {
        self.pilot_symbols.len()
    }

    pub fn pilot_subcarriers(&self) -> Vec<usize> {
        (0..self.pilots_per_symbol())
            .map(|i| self.pilot_offset + i * self.l_s)
            .collect()
    }

    pub fn is_pilot_symbol(&self, l: usize) -> bool {
        self.pilot_symbols.contains(&l)
    }

    pub fn data_symbols(&self) -> Vec<usize> {
        (0..self.n_s).filter(|l| !self.is_pilot_symbol(*l)).collect()
    }

    /// Data resource elements per slot.
    pub fn data_capacity(&self) -> usize {
        self.n_f * (self.n_s - self.n_pilot())
    }

    /// `T_s = 1 / (N_f · f_space)`.
    pub fn sample_period(&self) -> f64 {
        1.0 / (self.n_f as f64 * self.f_space)
    }

    /// Full OFDM symbol duration including the cyclic prefix.
    pub fn symbol_period(&self) -> f64 {
        (self.n_f + self.l_cp) as f64 * self.sample_period()
    }

    pub fn samples_per_slot(&self) -> usize {
        self.n_s * (self.n_f + self.l_cp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridKind {
    Transmitted,
    Received,
    Channel,
}

/// `N_f × N_s` complex resource grid, stored symbol by symbol.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotGrid {
    pub kind: GridKind,
    n_f: usize,
    n_s: usize,
    values: Vec<Complex64>,
}

impl SlotGrid {
    pub fn zeros(kind: GridKind, n_f: usize, n_s: usize) -> Self {
        Self {
            kind,
            n_f,
            n_s,
            values: vec![Complex64::new(0.0, 0.0); n_f * n_s],
        }
    }

    /// From symbol-major values (`values[l * n_f + k]`).
    pub fn from_symbols(kind: GridKind, n_f: usize, n_s: usize, values: Vec<Complex64>) -> Result<Self> {
        if values.len() != n_f * n_s {
            return Err(invalid(format!(
                "grid of {n_f}x{n_s} needs {} values, got {}",
                n_f * n_s,
                values.len()
            )));
        }
        Ok(Self { kind, n_f, n_s, values })
    }

    pub fn n_f(&self) -> usize {
        self.n_f
    }

    pub fn n_s(&self) -> usize {
        self.n_s
    }

    #[inline]
    pub fn get(&self, k: usize, l: usize) -> Complex64 {
        self.values[l * self.n_f + k]
    }

    #[inline]
    pub fn set(&mut self, k: usize, l: usize, v: Complex64) {
        self.values[l * self.n_f + k] = v;
    }

    pub fn symbol(&self, l: usize) -> &[Complex64] {
        &self.values[l * self.n_f..(l + 1) * self.n_f]
    }

    pub fn symbol_mut(&mut self, l: usize) -> &mut [Complex64] {
        &mut self.values[l * self.n_f..(l + 1) * self.n_f]
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Complex64] {
        &mut self.values
    }

    pub fn energy(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum()
    }

    /// Real/imaginary planes as `[N_f, N_s, 2]` row-major reals.
    pub fn to_planes(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.values.len() * 2);
        for k in 0..self.n_f {
            for l in 0..self.n_s {
                let v = self.get(k, l);
                out.push(v.re);
                out.push(v.im);
            }
        }
        out
    }

    pub fn from_planes(kind: GridKind, n_f: usize, n_s: usize, planes: &[f64]) -> Result<Self> {
        if planes.len() != n_f * n_s * 2 {
            return Err(invalid("planes length does not match grid"));
        }
        let mut g = Self::zeros(kind, n_f, n_s);
        for k in 0..n_f {
            for l in 0..n_s {
                let i = (k * n_s + l) * 2;
                g.set(k, l, Complex64::new(planes[i], planes[i + 1]));
            }
        }
        Ok(g)
    }

    /// `k,l,re,im` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("k,l,re,im\n");
        for l in 0..self.n_s {
            for k in 0..self.n_f {
                let v = self.get(k, l);
                let _ = writeln!(s, "{k},{l},{:e},{:e}", v.re, v.im);
            }
        }
        s
    }

    pub fn from_csv(kind: GridKind, n_f: usize, n_s: usize, text: &str) -> Result<Self> {
        let mut g = Self::zeros(kind, n_f, n_s);
        let mut seen = 0;
        for line in text.lines().filter(|l| !l.starts_with('#') && !l.starts_with('k')) {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Format(format!("bad grid row `{line}`"));
            if f.len() != 4 {
                return Err(bad());
            }
            let k: usize = f[0].trim().parse().map_err(|_| bad())?;
            let l: usize = f[1].trim().parse().map_err(|_| bad())?;
            let re: f64 = f[2].trim().parse().map_err(|_| bad())?;
            let im: f64 = f[3].trim().parse().map_err(|_| bad())?;
            if k >= n_f || l >= n_s {
                return Err(bad());
            }
            g.set(k, l, Complex64::new(re, im));
            seen += 1;
        }
        if seen != n_f * n_s {
            return Err(Error::Format(format!("expected {} grid rows, got {seen}", n_f * n_s)));
        }
        Ok(g)
    }
}

/// Time-domain samples of one slot including cyclic prefixes.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSignal {
    pub samples: Vec<Complex64>,
}

const QPSK_AMP: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Gray-mapped unit-energy QPSK: the first bit selects the real sign, the
/// second the imaginary sign (0 → +, 1 → −).
pub fn qpsk_modulate(bits: &[u8]) -> Result<Vec<Complex64>> {
    if bits.len() % 2 != 0 {
        return Err(invalid(format!("QPSK needs an even bit count, got {}", bits.len())));
    }
    let sign = |b: u8| if b == 0 { QPSK_AMP } else { -QPSK_AMP };
    Ok(bits
        .chunks_exact(2)
        .map(|p| Complex64::new(sign(p[0]), sign(p[1])))
        .collect())
}

/// Minimum-distance (per-axis sign) decision.
pub fn qpsk_demodulate(symbols: &[Complex64]) -> Vec<u8> {
    symbols
        .iter()
        .flat_map(|s| [u8::from(s.re < 0.0), u8::from(s.im < 0.0)])
        .collect()
}

/// Place data on non-pilot symbols (subcarrier fastest, symbols in time
/// order) and pilots on the comb of each pilot symbol.
pub fn build_slot(data: &[Complex64], cfg: &BasebandConfig) -> Result<SlotGrid> {
    if data.len() != cfg.data_capacity() {
        return Err(invalid(format!(
            "slot holds {} data symbols, got {}",
            cfg.data_capacity(),
            data.len()
        )));
    }
    let mut grid = SlotGrid::zeros(GridKind::Transmitted, cfg.n_f, cfg.n_s);
    let mut it = data.iter();
    for l in 0..cfg.n_s {
        if cfg.is_pilot_symbol(l) {
            for k in cfg.pilot_subcarriers() {
                grid.set(k, l, cfg.pilot_value);
            }
        } else {
            for v in grid.symbol_mut(l) {
                *v = *it.next().expect("length checked");
            }
        }
    }
    Ok(grid)
}

/// Inverse of the data placement in [`build_slot`].
pub fn extract_data(grid: &SlotGrid, cfg: &BasebandConfig) -> Vec<Complex64> {
    cfg.data_symbols()
        .into_iter()
        .flat_map(|l| grid.symbol(l).iter().copied())
        .collect()
}

/// Length-`N` DFT scaled by `1/√N` in both directions.
#[derive(Clone)]
pub struct UnitaryDft {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    scale: f64,
}

impl std::fmt::Debug for UnitaryDft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("UnitaryDft").field("n", &self.n).finish()
    }
}

impl UnitaryDft {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(invalid("DFT length must be at least 1"));
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            n,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
            scale: 1.0 / (n as f64).sqrt(),
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn process(&self, buf: &mut [Complex64], inverse: bool) {
        assert_eq!(buf.len(), self.n, "DFT buffer length");
        if inverse {
            self.inverse.process(buf);
        } else {
            self.forward.process(buf);
        }
        buf.iter_mut().for_each(|v| *v *= self.scale);
    }

    pub fn transform(&self, x: &[Complex64], inverse: bool) -> Vec<Complex64> {
        let mut buf = x.to_vec();
        self.process(&mut buf, inverse);
        buf
    }
}

/// Convenience wrapper around [`UnitaryDft`] for one-off transforms.
pub fn unitary_dft(x: &[Complex64], inverse: bool) -> Result<Vec<Complex64>> {
    Ok(UnitaryDft::new(x.len())?.transform(x, inverse))
}

/// Slot-level modulator bound to a configuration.
#[derive(Debug, Clone)]
pub struct Ofdm {
    cfg: BasebandConfig,
    dft: UnitaryDft,
}

impl Ofdm {
    pub fn new(cfg: &BasebandConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            dft: UnitaryDft::new(cfg.n_f)?,
        })
    }

    pub fn config(&self) -> &BasebandConfig {
        &self.cfg
    }

    pub fn dft(&self) -> &UnitaryDft {
        &self.dft
    }

    /// Per symbol: inverse unitary DFT, then prepend the last `L_CP` samples.
    pub fn modulate(&self, grid: &SlotGrid) -> Result<TimeSignal> {
        let (n_f, l_cp) = (self.cfg.n_f, self.cfg.l_cp);
        if grid.n_f() != n_f || grid.n_s() != self.cfg.n_s {
            return Err(invalid("grid dimensions do not match the configuration"));
        }
        let mut samples = Vec::with_capacity(self.cfg.samples_per_slot());
        for l in 0..self.cfg.n_s {
            let td = self.dft.transform(grid.symbol(l), true);
            samples.extend_from_slice(&td[n_f - l_cp..]);
            samples.extend_from_slice(&td);
        }
        Ok(TimeSignal { samples })
    }

    /// Per symbol: drop the cyclic prefix, forward unitary DFT.
    pub fn demodulate(&self, sig: &TimeSignal) -> Result<SlotGrid> {
        let (n_f, l_cp) = (self.cfg.n_f, self.cfg.l_cp);
        if sig.samples.len() != self.cfg.samples_per_slot() {
            return Err(invalid(format!(
                "slot needs {} samples, got {}",
                self.cfg.samples_per_slot(),
                sig.samples.len()
            )));
        }
        let mut grid = SlotGrid::zeros(GridKind::Received, n_f, self.cfg.n_s);
        for (l, block) in sig.samples.chunks(n_f + l_cp).enumerate() {
            let dst = grid.symbol_mut(l);
            dst.copy_from_slice(&block[l_cp..]);
            self.dft.process(dst, false);
        }
        Ok(grid)
    }
}

pub fn ofdm_modulate(grid: &SlotGrid, cfg: &BasebandConfig) -> Result<TimeSignal> {
    Ofdm::new(cfg)?.modulate(grid)
}

pub fn ofdm_demodulate(sig: &TimeSignal, cfg: &BasebandConfig) -> Result<SlotGrid> {
    Ofdm::new(cfg)?.demodulate(sig)
}
