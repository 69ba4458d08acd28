//! Classical baselines: least squares at the pilots with separable linear
//! interpolation, and the ideal linear MMSE (Wiener) filter built from the
//! true power-delay profile.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::baseband::{BasebandConfig, GridKind, SlotGrid};
use crate::channel::PowerDelayProfile;
use crate::error::{invalid, Error, Result};

/// LS estimates at the pilot REs, `(N_f/L_s) × N_pilot`.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotLsGrid {
    rows: usize,
    cols: usize,
    /// Pilot-symbol major: `values[j * rows + i]`.
    values: Vec<Complex64>,
}

impl PilotLsGrid {
    pub fn new(rows: usize, cols: usize, values: Vec<Complex64>) -> Result<Self> {
        if rows == 0 || cols == 0 || values.len() != rows * cols {
            return Err(invalid(format!(
                "pilot grid {rows}x{cols} needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        Ok(Self { rows, cols, values })
    }

    /// Pilot subcarriers per symbol.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Pilot symbols.
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.values[j * self.rows + i]
    }

    pub fn column(&self, j: usize) -> &[Complex64] {
        &self.values[j * self.rows..(j + 1) * self.rows]
    }

    /// Pilot-symbol-major flattening.
    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    /// Sample the pilot REs of a full grid.
    pub fn from_grid(grid: &SlotGrid, cfg: &BasebandConfig) -> Self {
        let ks = cfg.pilot_subcarriers();
        let values = cfg
            .pilot_symbols
            .iter()
            .flat_map(|&l| ks.iter().map(move |&k| grid.get(k, l)))
            .collect();
        Self {
            rows: ks.len(),
            cols: cfg.n_pilot(),
            values,
        }
    }
}

fn check_dims(grid: &SlotGrid, cfg: &BasebandConfig) -> Result<()> {
    if grid.n_f() != cfg.n_f || grid.n_s() != cfg.n_s {
        return Err(invalid("grid dimensions do not match the configuration"));
    }
    Ok(())
}

/// `Ĥ(k, p) = Y(k, p) / X(k, p)` at every pilot RE.
pub fn ls_pilot_estimate(y: &SlotGrid, cfg: &BasebandConfig) -> Result<PilotLsGrid> {
    check_dims(y, cfg)?;
    if cfg.pilot_value.norm_sqr() == 0.0 {
        return Err(invalid("pilot value must be non-zero"));
    }
    let inv = cfg.pilot_value.inv();
    let mut p = PilotLsGrid::from_grid(y, cfg);
    p.values.iter_mut().for_each(|v| *v *= inv);
    Ok(p)
}

/// Piecewise-linear interpolation of `(xs, ys)` at `targets`, continuing
/// the outermost segments beyond the sample hull.
fn interp_linear(xs: &[f64], ys: &[Complex64], targets: impl Iterator<Item = f64>) -> Vec<Complex64> {
    debug_assert!(xs.len() >= 2 && xs.len() == ys.len());
    let last = xs.len() - 2;
    targets
        .map(|t| {
            let seg = xs.windows(2).position(|w| t < w[1]).unwrap_or(last).min(last);
            let (x0, x1) = (xs[seg], xs[seg + 1]);
            let w = (t - x0) / (x1 - x0);
            ys[seg] * (1.0 - w) + ys[seg + 1] * w
        })
        .collect()
}

/// Linearly interpolate full columns from the pilot symbols to every symbol.
fn interpolate_time(columns: &[Vec<Complex64>], cfg: &BasebandConfig) -> SlotGrid {
    let xs: Vec<f64> = cfg.pilot_symbols.iter().map(|&l| l as f64).collect();
    let mut out = SlotGrid::zeros(GridKind::Channel, cfg.n_f, cfg.n_s);
    let mut along = vec![Complex64::new(0.0, 0.0); columns.len()];
    for k in 0..cfg.n_f {
        along.iter_mut().zip(columns).for_each(|(a, c)| *a = c[k]);
        let line = interp_linear(&xs, &along, (0..cfg.n_s).map(|l| l as f64));
        for (l, v) in line.into_iter().enumerate() {
            out.set(k, l, v);
        }
    }
    out
}

/// Separable linear interpolation: frequency first, then time.
pub fn interpolate_grid(p: &PilotLsGrid, cfg: &BasebandConfig) -> Result<SlotGrid> {
    if p.rows < 2 || p.cols < 2 {
        return Err(invalid("interpolation needs at least two pilots along each axis"));
    }
    if p.rows != cfg.pilots_per_symbol() || p.cols != cfg.n_pilot() {
        return Err(invalid("pilot grid does not match the configuration"));
    }
    let ks: Vec<f64> = cfg.pilot_subcarriers().iter().map(|&k| k as f64).collect();
    let columns: Vec<Vec<Complex64>> = (0..p.cols)
        .map(|j| interp_linear(&ks, p.column(j), (0..cfg.n_f).map(|k| k as f64)))
        .collect();
    Ok(interpolate_time(&columns, cfg))
}

/// Frequency-domain correlations for the Wiener filter.
#[derive(Debug, Clone)]
pub struct CorrelationSet {
    /// `E{H_c H_p^H}`, `N_f × (N_f/L_s)`.
    pub r_cp: DMatrix<Complex64>,
    /// `E{H_p H_p^H}`, `(N_f/L_s) × (N_f/L_s)`.
    pub r_pp: DMatrix<Complex64>,
    /// `σ_N² / σ_X²`.
    pub noise_ratio: f64,
}

impl CorrelationSet {
    pub fn with_noise_ratio(mut self, noise_ratio: f64) -> Self {
        self.noise_ratio = noise_ratio;
        self
    }

    pub fn with_snr_db(self, snr_db: f64) -> Self {
        self.with_noise_ratio(crate::channel::noise_variance(1.0, snr_db))
    }
}

/// `E{H(k) H*(k')} = Σ_m σ_m² e^{-j2π(k-k')τ_m/N_f}`.
pub fn correlation_from_pdp(pdp: &PowerDelayProfile, cfg: &BasebandConfig) -> CorrelationSet {
    let powers = pdp.normalized_powers();
    let delays = pdp.delays_in_samples(cfg);
    let nf = cfg.n_f as f64;
    let corr = |k: usize, kp: usize| -> Complex64 {
        let dk = k as f64 - kp as f64;
        powers
            .iter()
            .zip(&delays)
            .map(|(&p, &tau)| Complex64::from_polar(p, -2.0 * PI * dk * tau / nf))
            .sum()
    };
    let ks = cfg.pilot_subcarriers();
    let r_cp = DMatrix::from_fn(cfg.n_f, ks.len(), |k, j| corr(k, ks[j]));
    let r_pp = DMatrix::from_fn(ks.len(), ks.len(), |i, j| corr(ks[i], ks[j]));
    CorrelationSet {
        r_cp,
        r_pp,
        noise_ratio: 0.0,
    }
}

/// Precomputed `W = R_cp (R_pp + ρI)^{-1}` for repeated application.
#[derive(Debug, Clone)]
pub struct MmseFilter {
    weights: DMatrix<Complex64>,
}

const JITTER: f64 = 1e-12;

impl MmseFilter {
    pub fn new(corr: &CorrelationSet) -> Result<Self> {
        let p = corr.r_pp.nrows();
        if corr.r_pp.ncols() != p || corr.r_cp.ncols() != p {
            return Err(Error::ShapeMismatch {
                op: "mmse",
                lhs: vec![corr.r_cp.nrows(), corr.r_cp.ncols()],
                rhs: vec![p, corr.r_pp.ncols()],
            });
        }
        let reg = if corr.noise_ratio > 0.0 { corr.noise_ratio } else { JITTER };
        let a = &corr.r_pp + DMatrix::from_diagonal_element(p, p, Complex64::new(reg, 0.0));
        // A is Hermitian, so W = R_cp A⁻¹ ⇔ Wᴴ = A⁻¹ R_cpᴴ.
        let wh = a
            .lu()
            .solve(&corr.r_cp.adjoint())
            .ok_or_else(|| invalid("regularized pilot correlation is singular"))?;
        Ok(Self { weights: wh.adjoint() })
    }

    pub fn weights(&self) -> &DMatrix<Complex64> {
        &self.weights
    }

    /// Filter one pilot column to a full-band estimate.
    pub fn apply_column(&self, ls: &[Complex64]) -> Vec<Complex64> {
        let (n, p) = self.weights.shape();
        (0..n)
            .map(|k| (0..p).map(|j| self.weights[(k, j)] * ls[j]).sum())
            .collect()
    }

    /// Filter every pilot symbol, then interpolate linearly across time.
    pub fn estimate(&self, ls: &PilotLsGrid, cfg: &BasebandConfig) -> Result<SlotGrid> {
        if ls.rows != self.weights.ncols() || self.weights.nrows() != cfg.n_f {
            return Err(Error::ShapeMismatch {
                op: "mmse_estimate",
                lhs: vec![ls.rows, ls.cols],
                rhs: vec![self.weights.nrows(), self.weights.ncols()],
            });
        }
        if ls.cols != cfg.n_pilot() || ls.cols < 2 {
            return Err(invalid("pilot grid does not match the configuration"));
        }
        let columns: Vec<Vec<Complex64>> = (0..ls.cols).map(|j| self.apply_column(ls.column(j))).collect();
        Ok(interpolate_time(&columns, cfg))
    }
}

/// One-shot Wiener estimate; prefer [`MmseFilter`] when the correlations
/// are reused.
pub fn mmse_estimate(ls: &PilotLsGrid, corr: &CorrelationSet, cfg: &BasebandConfig) -> Result<SlotGrid> {
    MmseFilter::new(corr)?.estimate(ls, cfg)
}
