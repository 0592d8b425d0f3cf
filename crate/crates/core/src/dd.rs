//! Delay-Doppler system model.
//!
//! Builds the structured matrices the rest of the crate works with: the
//! normalized DFT, the forward cyclic shift `Π` and Doppler ramp `Δ`, the
//! time-domain channel `H_T = Σ_p h_p Π^{l_p} Δ^{k_p}`, its delay-Doppler
//! conjugation `H_dd = (F_N ⊗ I_M) H_T (F_N ⊗ I_M)ᴴ`, and the Doppler
//! derivative channel used by the sensing receiver.

use nalgebra::DMatrix;
use num_complex::Complex64;
use std::f64::consts::TAU;

use crate::error::{Error, Result};
use crate::mat::kron;

/// Dense complex matrix type used throughout the crate.
pub type CMatrix = DMatrix<Complex64>;
/// Dense complex vector type used throughout the crate.
pub type CVector = nalgebra::DVector<Complex64>;

/// OTFS grid geometry: `m` subcarriers by `n` time slots.
///
/// Orthogonality ties the slot duration to the subcarrier spacing,
/// `T · Δf = 1`; the main constructor derives `T` from `Δf`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameParams {
    m: usize,
    n: usize,
    slot_duration: f64,
    subcarrier_spacing: f64,
    carrier_freq: f64,
}

impl FrameParams {
    /// Grid with the slot duration derived as `T = 1/Δf`.
    pub fn new(m: usize, n: usize, subcarrier_spacing_hz: f64, carrier_freq_hz: f64) -> Result<Self> {
        if m < 1 || n < 1 {
            return Err(Error::InvalidFrame(format!(
                "grid must be at least 1x1, got {m}x{n}"
            )));
        }
        if !(subcarrier_spacing_hz > 0.0) {
            return Err(Error::NonPositive {
                name: "subcarrier_spacing_hz",
                value: subcarrier_spacing_hz,
            });
        }
        if !(carrier_freq_hz > 0.0) {
            return Err(Error::NonPositive {
                name: "carrier_freq_hz",
                value: carrier_freq_hz,
            });
        }
        Ok(Self {
            m,
            n,
            slot_duration: 1.0 / subcarrier_spacing_hz,
            subcarrier_spacing: subcarrier_spacing_hz,
            carrier_freq: carrier_freq_hz,
        })
    }

    /// Grid with an explicit slot duration; rejects `T · Δf ≠ 1`
    /// beyond a relative tolerance of 1e-9.
    pub fn with_slot_duration(
        m: usize,
        n: usize,
        slot_duration_s: f64,
        subcarrier_spacing_hz: f64,
        carrier_freq_hz: f64,
    ) -> Result<Self> {
        let frame = Self::new(m, n, subcarrier_spacing_hz, carrier_freq_hz)?;
        let product = slot_duration_s * subcarrier_spacing_hz;
        if (product - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidFrame(format!(
                "slot_duration * subcarrier_spacing = {product}, must equal 1"
            )));
        }
        Ok(Self {
            slot_duration: slot_duration_s,
            ..frame
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Full frame dimension `M·N`.
    pub fn mn(&self) -> usize {
        self.m * self.n
    }

    pub fn slot_duration(&self) -> f64 {
        self.slot_duration
    }

    pub fn subcarrier_spacing(&self) -> f64 {
        self.subcarrier_spacing
    }

    pub fn carrier_freq(&self) -> f64 {
        self.carrier_freq
    }
}

/// One propagation path: complex gain with integer delay and Doppler taps.
///
/// Fractional taps are rejected at the type level; the delay tap is a
/// nonnegative sample offset and the Doppler tap a signed cycle count
/// across the frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Path {
    pub gain: Complex64,
    pub delay_tap: usize,
    pub doppler_tap: i64,
}

impl Path {
    pub fn new(gain: Complex64, delay_tap: usize, doppler_tap: i64) -> Self {
        Self {
            gain,
            delay_tap,
            doppler_tap,
        }
    }

    /// Checks `0 ≤ delay < MN` and `|doppler| ≤ MN/2` against a frame.
    pub fn validate_for(&self, frame: &FrameParams) -> Result<()> {
        let mn = frame.mn();
        if self.delay_tap >= mn || self.doppler_tap.unsigned_abs() as usize > mn / 2 {
            return Err(Error::InvalidPath {
                delay_tap: self.delay_tap,
                doppler_tap: self.doppler_tap,
                mn,
            });
        }
        Ok(())
    }
}

/// Delay-Doppler channel matrix together with the paths that produced it.
#[derive(Debug, Clone)]
pub struct DdChannel {
    matrix: CMatrix,
    paths: Vec<Path>,
}

impl DdChannel {
    /// Wraps an externally assembled `MN × MN` matrix.
    pub fn from_matrix(matrix: CMatrix, paths: Vec<Path>) -> Self {
        assert_eq!(matrix.nrows(), matrix.ncols(), "channel matrix must be square");
        Self { matrix, paths }
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn paths(&self) -> &[Path] {
        &self.paths
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }
}

/// Unitary DFT matrix, entry `(r, c) = exp(-j2πrc/dim)/√dim`.
pub fn dft_matrix(dim: usize) -> Result<CMatrix> {
    if dim == 0 {
        return Err(Error::InvalidDimension);
    }
    let scale = 1.0 / (dim as f64).sqrt();
    Ok(CMatrix::from_fn(dim, dim, |r, c| {
        // reduce the index product mod dim before forming the angle to
        // keep phases accurate for large grids
        let idx = (r * c) % dim;
        let angle = -TAU * idx as f64 / dim as f64;
        Complex64::from_polar(scale, angle)
    }))
}

/// `Π^l`, the l-th power of the forward cyclic shift `Π = circ{[0 1 0 … 0]ᵀ}`.
///
/// Applied to a vector it rotates entries downward by `l` positions:
/// `dim = 4, l = 1` sends `[a b c d]ᵀ` to `[d a b c]ᵀ`. Any integer `l`
/// is reduced mod `dim`.
pub fn cyclic_shift_power(dim: usize, l: i64) -> Result<CMatrix> {
    if dim == 0 {
        return Err(Error::InvalidDimension);
    }
    let shift = l.rem_euclid(dim as i64) as usize;
    let mut out = CMatrix::zeros(dim, dim);
    for col in 0..dim {
        out[((col + shift) % dim, col)] = Complex64::new(1.0, 0.0);
    }
    Ok(out)
}

/// Doppler ramp `Δ^k = diag(exp(j2πkq/dim))`, `q = 0..dim-1`.
///
/// Unitary for any real `k`; integer `k` gives the tap ramp of the
/// channel model.
pub fn doppler_ramp(dim: usize, k: f64) -> Result<CMatrix> {
    if dim == 0 {
        return Err(Error::InvalidDimension);
    }
    let diag = CVector::from_fn(dim, |q, _| ramp_phase(dim, k, q));
    Ok(CMatrix::from_diagonal(&diag))
}

#[inline]
fn ramp_phase(dim: usize, k: f64, q: usize) -> Complex64 {
    Complex64::from_polar(1.0, TAU * k * q as f64 / dim as f64)
}

/// The delay-Doppler transform `F_N ⊗ I_M` (unitary).
pub fn dd_transform(frame: &FrameParams) -> CMatrix {
    let f_n = dft_matrix(frame.n()).expect("frame dimension validated at construction");
    let i_m = CMatrix::identity(frame.m(), frame.m());
    kron(&f_n, &i_m)
}

/// Time-domain channel `H_T = Σ_p h_p Π^{l_p} Δ^{k_p}`.
///
/// Filled column-wise from the structure of the product: column `j` of
/// `Π^l Δ^k` has its only entry `exp(j2πkj/MN)` in row `(j+l) mod MN`.
pub fn time_channel(frame: &FrameParams, paths: &[Path]) -> Result<CMatrix> {
    let mn = frame.mn();
    let mut out = CMatrix::zeros(mn, mn);
    for path in paths {
        path.validate_for(frame)?;
        for col in 0..mn {
            let row = (col + path.delay_tap) % mn;
            out[(row, col)] += path.gain * ramp_phase(mn, path.doppler_tap as f64, col);
        }
    }
    Ok(out)
}

/// Delay-Doppler channel `H_dd = (F_N ⊗ I_M) H_T (F_N ⊗ I_M)ᴴ`.
pub fn dd_channel(frame: &FrameParams, paths: &[Path]) -> Result<DdChannel> {
    let h_t = time_channel(frame, paths)?;
    let a = dd_transform(frame);
    let matrix = &a * h_t * a.adjoint();
    Ok(DdChannel::from_matrix(matrix, paths.to_vec()))
}

/// Doppler derivative factor `D_ν = diag(j·(2πT/M)·q)`, `q = 0..MN-1`.
pub fn doppler_derivative_matrix(frame: &FrameParams) -> CMatrix {
    let mn = frame.mn();
    let rate = TAU * frame.slot_duration() / frame.m() as f64;
    let diag = CVector::from_fn(mn, |q, _| Complex64::new(0.0, rate * q as f64));
    CMatrix::from_diagonal(&diag)
}

/// Derivative of the sensing channel with respect to the Doppler shift,
/// `Ḣ_s,dd = h_s (F_N ⊗ I_M) Π^{l_s} D_ν Δ^{k_s} (F_N ⊗ I_M)ᴴ`.
pub fn sensing_derivative_channel(frame: &FrameParams, sense_path: &Path) -> Result<CMatrix> {
    sense_path.validate_for(frame)?;
    let mn = frame.mn();
    let rate = TAU * frame.slot_duration() / frame.m() as f64;
    // Π^l · D_ν · Δ^k has one entry per column, like the time channel
    let mut inner = CMatrix::zeros(mn, mn);
    for col in 0..mn {
        let row = (col + sense_path.delay_tap) % mn;
        let deriv = Complex64::new(0.0, rate * col as f64);
        inner[(row, col)] =
            sense_path.gain * deriv * ramp_phase(mn, sense_path.doppler_tap as f64, col);
    }
    let a = dd_transform(frame);
    Ok(&a * inner * a.adjoint())
}
