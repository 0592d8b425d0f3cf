//! Communication link analysis: Gray-coded square QAM, ZF/MMSE
//! equalization, per-symbol SINR, the analytic average BER and its
//! Jensen lower bound with the convexity-validity test.

use nalgebra::{Cholesky, DVector, Dyn};
use num_complex::Complex64;

use crate::dd::{CMatrix, CVector, DdChannel};
use crate::error::{Error, Result};

/// Linear receiver choice: `κ = 0` inverts the channel, `κ = 1`
/// regularizes by the noise variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Equalizer {
    Zf,
    Mmse,
}

impl Equalizer {
    /// Indicator `κ` as it enters the formulas.
    pub fn kappa(&self) -> f64 {
        match self {
            Equalizer::Zf => 0.0,
            Equalizer::Mmse => 1.0,
        }
    }
}

/// Square-QAM modulation parameters and the derived BER constants.
///
/// `alpha` and `beta` are the Gray-QAM BER coefficients,
/// `alpha = (2 - 2/√M)/log₂M` and `beta = 3/(2M - 2)`; `eta` is the
/// convexity threshold of the per-symbol BER curve,
/// `eta = 4β/(√((2βκ-9)(2βκ-1)) + 3 + 2βκ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModulationParams {
    mod_order: usize,
    alpha: f64,
    beta: f64,
    equalizer: Equalizer,
    eta: f64,
    noise_var: f64,
}

impl ModulationParams {
    pub fn new(mod_order: usize, equalizer: Equalizer, noise_var: f64) -> Result<Self> {
        // square Gray QAM: a power of 4, at least 4
        let valid = mod_order >= 4
            && mod_order.is_power_of_two()
            && mod_order.trailing_zeros() % 2 == 0;
        if !valid {
            return Err(Error::InvalidModOrder(mod_order));
        }
        if !(noise_var > 0.0) {
            return Err(Error::NonPositive {
                name: "noise_var",
                value: noise_var,
            });
        }
        let m = mod_order as f64;
        let alpha = (2.0 - 2.0 / m.sqrt()) / m.log2();
        let beta = 3.0 / (2.0 * m - 2.0);
        let kappa = equalizer.kappa();
        let eta = 4.0 * beta
            / (((2.0 * beta * kappa - 9.0) * (2.0 * beta * kappa - 1.0)).sqrt()
                + 3.0
                + 2.0 * beta * kappa);
        debug_assert!(eta > 0.0);
        Ok(Self {
            mod_order,
            alpha,
            beta,
            equalizer,
            eta,
            noise_var,
        })
    }

    /// Same constellation and equalizer at a different noise variance.
    pub fn with_noise_var(&self, noise_var: f64) -> Result<Self> {
        Self::new(self.mod_order, self.equalizer, noise_var)
    }

    pub fn mod_order(&self) -> usize {
        self.mod_order
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn equalizer(&self) -> Equalizer {
        self.equalizer
    }

    pub fn kappa(&self) -> f64 {
        self.equalizer.kappa()
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    /// Bits per QAM symbol, `log₂ M`.
    pub fn bits_per_symbol(&self) -> usize {
        self.mod_order.trailing_zeros() as usize
    }

    /// Per-axis level count `√M`.
    fn levels_per_axis(&self) -> u32 {
        1 << (self.mod_order.trailing_zeros() / 2)
    }

    /// Per-axis scale giving unit average symbol energy; equals `√β`.
    fn axis_scale(&self) -> f64 {
        self.beta.sqrt()
    }
}

/// Equalized symbols with their per-symbol SINRs.
#[derive(Debug, Clone)]
pub struct EqualizedFrame {
    pub symbol_estimates: CVector,
    pub per_symbol_sinr: DVector<f64>,
}

/// Which side of the convexity test carries the noise variance.
///
/// Two sign conventions for the moderate-to-high-SNR validity test
/// appear in print. The default compares the noise-normalized inverse
/// diagonal entry against `η`, which is equivalent to a per-symbol SINR
/// floor of `1/η − κ` and correctly marks the high-SNR regime as valid.
/// The transposed convention is kept selectable for comparison; it
/// declares strong channels invalid as the noise vanishes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ValidityDirection {
    /// `σ_c² · [(κσ_c²I + WᴴHᴴHW)⁻¹]_mm ≤ η`
    #[default]
    NormalizedEntry,
    /// `σ_c² ≤ η · [(κσ_c²I + WᴴHᴴHW)⁻¹]_mm`
    RawNoise,
}

/// Per-symbol convexity test results.
#[derive(Debug, Clone)]
pub struct ValidityReport {
    pub per_symbol: Vec<bool>,
    pub all: bool,
}

/// Jensen lower bound value together with its validity flag.
#[derive(Debug, Clone, Copy)]
pub struct LowerBound {
    pub value: f64,
    pub valid: bool,
}

fn gray_encode(v: u32) -> u32 {
    v ^ (v >> 1)
}

fn gray_decode(g: u32) -> u32 {
    let mut v = g;
    let mut shift = 1;
    while shift < 32 {
        v ^= v >> shift;
        shift <<= 1;
    }
    v
}

fn bits_to_index(bits: &[bool]) -> u32 {
    bits.iter().fold(0, |acc, &b| (acc << 1) | b as u32)
}

/// Gray-mapped square QAM with unit average symbol energy.
///
/// The first half of each symbol's bits selects the in-phase level, the
/// second half the quadrature level, each through a binary-reflected
/// Gray code, most significant bit first.
pub fn qam_modulate(bits: &[bool], params: &ModulationParams) -> Result<Vec<Complex64>> {
    let k = params.bits_per_symbol();
    if bits.len() % k != 0 {
        return Err(Error::BitFraming {
            bits: bits.len(),
            bits_per_symbol: k,
        });
    }
    let half = k / 2;
    let levels = params.levels_per_axis();
    let scale = params.axis_scale();
    let amplitude = |axis_bits: &[bool]| -> f64 {
        let v = gray_decode(bits_to_index(axis_bits));
        (2.0 * v as f64 - (levels - 1) as f64) * scale
    };
    Ok(bits
        .chunks(k)
        .map(|chunk| Complex64::new(amplitude(&chunk[..half]), amplitude(&chunk[half..])))
        .collect())
}

/// Hard-decision demapper: per-axis nearest level, inverse Gray code.
///
/// Exact midpoints decide toward the lower of the two adjacent levels.
pub fn qam_demodulate(symbols: &[Complex64], params: &ModulationParams) -> Vec<bool> {
    let half = params.bits_per_symbol() / 2;
    let levels = params.levels_per_axis();
    let scale = params.axis_scale();
    let decide = |x: f64| -> u32 {
        let u = (x / scale + (levels - 1) as f64) / 2.0;
        // ceil(u - 0.5) rounds half-down, pinning midpoint ties
        let v = (u - 0.5).ceil();
        (v.max(0.0) as u32).min(levels - 1)
    };
    let mut bits = Vec::with_capacity(symbols.len() * half * 2);
    for s in symbols {
        for axis in [s.re, s.im] {
            let g = gray_encode(decide(axis));
            for pos in (0..half).rev() {
                bits.push((g >> pos) & 1 == 1);
            }
        }
    }
    bits
}

/// Effective Gram matrix `A = κσ_c²I + WᴴHᴴHW` and its Cholesky factor.
struct EffectiveGram {
    chol: Cholesky<Complex64, Dyn>,
    dim: usize,
}

fn effective_gram(
    channel: &DdChannel,
    precoder_w: &CMatrix,
    params: &ModulationParams,
) -> Result<EffectiveGram> {
    let dim = channel.dim();
    if precoder_w.nrows() != dim || precoder_w.ncols() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: precoder_w.nrows(),
        });
    }
    let hw = channel.matrix() * precoder_w;
    let mut gram = hw.adjoint() * hw;
    let ridge = params.kappa() * params.noise_var();
    for i in 0..dim {
        gram[(i, i)] += Complex64::new(ridge, 0.0);
    }
    let chol = gram.cholesky().ok_or(Error::RankDeficient)?;
    Ok(EffectiveGram { chol, dim })
}

impl EffectiveGram {
    /// Diagonal of `A⁻¹` via triangular solves against unit vectors:
    /// `[A⁻¹]_mm = ‖L⁻¹e_m‖²` for `A = LLᴴ`.
    fn inverse_diag(&self) -> Vec<f64> {
        let l = self.chol.l();
        let mut diag = Vec::with_capacity(self.dim);
        for m in 0..self.dim {
            let mut e = CVector::zeros(self.dim);
            e[m] = Complex64::new(1.0, 0.0);
            let z = l
                .solve_lower_triangular(&e)
                .expect("Cholesky factor has positive diagonal");
            diag.push(z.norm_squared());
        }
        diag
    }
}

/// ZF/MMSE equalizer `Q = (κσ_c²I + WᴴHᴴHW)⁻¹WᴴHᴴ`.
pub fn equalizer_matrix(
    channel: &DdChannel,
    precoder_w: &CMatrix,
    params: &ModulationParams,
) -> Result<CMatrix> {
    let gram = effective_gram(channel, precoder_w, params)?;
    let rhs = precoder_w.adjoint() * channel.matrix().adjoint();
    Ok(gram.chol.solve(&rhs))
}

/// Per-symbol SINR, `SINR_m = 1/[(κI + WᴴHᴴHW/σ_c²)⁻¹]_mm − κ`.
pub fn per_symbol_sinr(
    channel: &DdChannel,
    precoder_w: &CMatrix,
    params: &ModulationParams,
) -> Result<DVector<f64>> {
    let gram = effective_gram(channel, precoder_w, params)?;
    let kappa = params.kappa();
    let sigma2 = params.noise_var();
    Ok(DVector::from_iterator(
        gram.dim,
        gram.inverse_diag()
            .into_iter()
            .map(|d| 1.0 / (sigma2 * d) - kappa),
    ))
}

/// Equalizes a received frame and reports the per-symbol SINRs.
pub fn equalize(
    channel: &DdChannel,
    precoder_w: &CMatrix,
    params: &ModulationParams,
    received: &CVector,
) -> Result<EqualizedFrame> {
    let q = equalizer_matrix(channel, precoder_w, params)?;
    Ok(EqualizedFrame {
        symbol_estimates: &q * received,
        per_symbol_sinr: per_symbol_sinr(channel, precoder_w, params)?,
    })
}

fn ber_from_sinrs(sinrs: impl Iterator<Item = f64>, params: &ModulationParams) -> f64 {
    let mut acc = 0.0;
    let mut count = 0usize;
    for sinr in sinrs {
        if sinr < 0.0 {
            log::warn!("degenerate SINR {sinr}; clamping erfc argument at zero");
        }
        acc += libm::erfc((params.beta() * sinr.max(0.0)).sqrt());
        count += 1;
    }
    params.alpha() * acc / count as f64
}

/// Average BER, `P_e = (α/MN) Σ_m erfc(√(β·SINR_m))`.
pub fn analytic_ber(
    channel: &DdChannel,
    precoder_w: &CMatrix,
    params: &ModulationParams,
) -> Result<f64> {
    let sinrs = per_symbol_sinr(channel, precoder_w, params)?;
    Ok(ber_from_sinrs(sinrs.iter().copied(), params))
}

fn validity_from_diag(diag: &[f64], params: &ModulationParams, direction: ValidityDirection) -> ValidityReport {
    let sigma2 = params.noise_var();
    let eta = params.eta();
    let per_symbol: Vec<bool> = diag
        .iter()
        .map(|&d| match direction {
            ValidityDirection::NormalizedEntry => sigma2 * d <= eta,
            ValidityDirection::RawNoise => sigma2 <= eta * d,
        })
        .collect();
    let all = per_symbol.iter().all(|&b| b);
    ValidityReport { per_symbol, all }
}

/// Convexity-validity test for the Jensen bound, per symbol and aggregate.
pub fn lb_validity_check(
    channel: &DdChannel,
    precoder_w: &CMatrix,
    params: &ModulationParams,
) -> Result<ValidityReport> {
    lb_validity_check_with(channel, precoder_w, params, ValidityDirection::default())
}

/// Same test with an explicit direction choice.
pub fn lb_validity_check_with(
    channel: &DdChannel,
    precoder_w: &CMatrix,
    params: &ModulationParams,
    direction: ValidityDirection,
) -> Result<ValidityReport> {
    let gram = effective_gram(channel, precoder_w, params)?;
    Ok(validity_from_diag(&gram.inverse_diag(), params, direction))
}

/// Jensen lower bound `P_e^lb = α·erfc(√(βMN/(σ_c²φ) − βκ))` with
/// `φ = tr[(κσ_c²I + WᴴHᴴHW)⁻¹]`. The bound is computed regardless of
/// validity; the report's flag states whether the convexity condition
/// held for every symbol.
pub fn ber_lower_bound(
    channel: &DdChannel,
    precoder_w: &CMatrix,
    params: &ModulationParams,
) -> Result<LowerBound> {
    let gram = effective_gram(channel, precoder_w, params)?;
    let diag = gram.inverse_diag();
    let phi: f64 = diag.iter().sum();
    let mn = gram.dim as f64;
    let arg = params.beta() * mn / (params.noise_var() * phi) - params.beta() * params.kappa();
    if arg < 0.0 {
        return Err(Error::LowerBoundDomain { arg });
    }
    let valid = validity_from_diag(&diag, params, ValidityDirection::default()).all;
    Ok(LowerBound {
        value: params.alpha() * libm::erfc(arg.sqrt()),
        valid,
    })
}
