//! Doppler-estimation CRB evaluation and the sensing eigenstructure
//! consumed by the precoder optimizer.

use crate::dd::{dd_transform, sensing_derivative_channel, CMatrix, FrameParams, Path};
use crate::error::{Error, Result};
use std::f64::consts::TAU;

/// Sensing-side problem data: the echo path, receiver noise variance,
/// and the CRB requirement expressed both as the threshold `γ_ν` and as
/// the effective linear form bound `γ̃_ν = σ_s²/γ_ν`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensingSetup {
    sense_path: Path,
    noise_var: f64,
    crb_threshold: f64,
    effective_threshold: f64,
}

impl SensingSetup {
    pub fn new(sense_path: Path, noise_var: f64, crb_threshold: f64) -> Result<Self> {
        if !(noise_var > 0.0) {
            return Err(Error::NonPositive {
                name: "sensing noise_var",
                value: noise_var,
            });
        }
        if !(crb_threshold > 0.0) {
            return Err(Error::NonPositive {
                name: "crb_threshold",
                value: crb_threshold,
            });
        }
        Ok(Self {
            sense_path,
            noise_var,
            crb_threshold,
            effective_threshold: noise_var / crb_threshold,
        })
    }

    /// Setup with no CRB requirement (`γ_ν = ∞`, so `γ̃_ν = 0`).
    pub fn unconstrained(sense_path: Path, noise_var: f64) -> Result<Self> {
        Self::new(sense_path, noise_var, f64::INFINITY)
    }

    pub fn sense_path(&self) -> &Path {
        &self.sense_path
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn crb_threshold(&self) -> f64 {
        self.crb_threshold
    }

    /// `γ̃_ν = σ_s²/γ_ν`; the CRB constraint is the linear form
    /// `tr(Γ Λ_s) ≥ γ̃_ν`.
    pub fn effective_threshold(&self) -> f64 {
        self.effective_threshold
    }

    /// Same path and noise with a different threshold.
    pub fn with_crb_threshold(&self, crb_threshold: f64) -> Result<Self> {
        Self::new(self.sense_path, self.noise_var, crb_threshold)
    }
}

/// Eigendecomposition of `ḢᴴḢ`: unitary eigenvector matrix and the
/// eigenvalues sorted descending.
#[derive(Debug, Clone)]
pub struct SensingEigen {
    eigvecs: CMatrix,
    eigvals: Vec<f64>,
}

impl SensingEigen {
    pub fn eigvecs(&self) -> &CMatrix {
        &self.eigvecs
    }

    pub fn eigvals(&self) -> &[f64] {
        &self.eigvals
    }

    pub fn dim(&self) -> usize {
        self.eigvals.len()
    }

    /// Largest eigenvalue (first, by the descending sort).
    pub fn max_eigval(&self) -> f64 {
        self.eigvals[0]
    }
}

/// Eigenstructure of `ḢᴴḢ` from its analytic form.
///
/// The unitary shift and ramp factors cancel inside the Gram matrix,
/// leaving `ḢᴴḢ = |h_s|² (F_N ⊗ I_M) D_νᴴD_ν (F_N ⊗ I_M)ᴴ`: the
/// eigenvectors are the columns of the delay-Doppler transform and the
/// eigenvalues are `|h_s|²(2πT/M)²q²`, here reordered descending in `q`.
pub fn sensing_eigen(setup: &SensingSetup, frame: &FrameParams) -> Result<SensingEigen> {
    setup.sense_path.validate_for(frame)?;
    let mn = frame.mn();
    let a = dd_transform(frame);
    let rate = TAU * frame.slot_duration() / frame.m() as f64;
    let scale = setup.sense_path.gain.norm_sqr() * rate * rate;

    let mut eigvecs = CMatrix::zeros(mn, mn);
    let mut eigvals = Vec::with_capacity(mn);
    for (col, q) in (0..mn).rev().enumerate() {
        eigvecs.set_column(col, &a.column(q));
        eigvals.push(scale * (q * q) as f64);
    }
    Ok(SensingEigen { eigvecs, eigvals })
}

/// Doppler CRB for a given precoder,
/// `CRB = σ_s² / tr(Ḣ W Wᴴ Ḣᴴ)` (dense evaluation).
pub fn crb_doppler(setup: &SensingSetup, frame: &FrameParams, precoder_w: &CMatrix) -> Result<f64> {
    let hdot = sensing_derivative_channel(frame, &setup.sense_path)?;
    if precoder_w.nrows() != hdot.nrows() {
        return Err(Error::DimensionMismatch {
            expected: hdot.nrows(),
            got: precoder_w.nrows(),
        });
    }
    let product = &hdot * precoder_w;
    let trace = product.norm_squared();
    // treat anything at rounding level relative to the factors as zero
    let floor = 1e-28 * hdot.norm_squared() * precoder_w.norm_squared();
    if !(trace > floor) {
        return Err(Error::InfiniteCrb);
    }
    Ok(setup.noise_var / trace)
}

/// Doppler CRB from a diagonal power allocation in the sensing eigenbasis,
/// `CRB = σ_s² / Σ_q γ_q λ_q`. Fast path equivalent to [`crb_doppler`]
/// when `W = E_s Σ V`.
pub fn crb_from_allocation(setup: &SensingSetup, eigen: &SensingEigen, gamma: &[f64]) -> Result<f64> {
    assert_eq!(gamma.len(), eigen.dim(), "allocation length mismatch");
    let value: f64 = gamma
        .iter()
        .zip(eigen.eigvals())
        .map(|(g, l)| g * l)
        .sum();
    if !(value > 0.0) {
        return Err(Error::InfiniteCrb);
    }
    Ok(setup.noise_var / value)
}

/// Whether any power allocation within the budget can meet the CRB
/// threshold: all power on the strongest sensing mode maximizes the
/// linear form, so the test is `P₀ · λ_max ≥ γ̃_ν`.
pub fn crb_feasibility(setup: &SensingSetup, eigen: &SensingEigen, power_budget: f64) -> bool {
    power_budget * eigen.max_eigval() >= setup.effective_threshold
}
