//! Delay-Doppler dual-functional precoding for OTFS links.
//!
//! One waveform serves a data link and a Doppler-sensing function at
//! the same time. This crate builds the delay-Doppler channel model,
//! analyzes the ZF/MMSE link (per-symbol SINR, average BER, Jensen
//! lower bound), evaluates the Doppler-estimation CRB, and designs the
//! transmit precoder that minimizes the BER bound subject to a power
//! budget and a CRB requirement — closed form per mode given the dual
//! variables, dual gradient ascent plus a Newton refinement for the
//! variables themselves. A Monte Carlo link simulator reconciles the
//! analytic curves with counted bit errors across SNR and threshold
//! sweeps.

pub mod comms;
pub mod dd;
pub mod error;
mod mat;
pub mod precoder;
pub mod sensing;
pub mod sim;

pub use comms::{
    analytic_ber, ber_lower_bound, equalize, equalizer_matrix, lb_validity_check,
    lb_validity_check_with, per_symbol_sinr, qam_demodulate, qam_modulate, Equalizer,
    EqualizedFrame, LowerBound, ModulationParams, ValidityDirection, ValidityReport,
};
pub use dd::{
    cyclic_shift_power, dd_channel, dd_transform, dft_matrix, doppler_derivative_matrix,
    doppler_ramp, sensing_derivative_channel, time_channel, CMatrix, CVector, DdChannel,
    FrameParams, Path,
};
pub use error::{Error, Result};
pub use precoder::{
    allocation_objective, brute_force_reference, choose_u, choose_v, dual_gradient, dual_value,
    gamma_from_duals, solve_dual, DesignProblem, DualState, DualTraceEntry, Precoder,
    SolveOutcome, SolverOptions,
};
pub use sensing::{
    crb_doppler, crb_feasibility, crb_from_allocation, sensing_eigen, SensingEigen, SensingSetup,
};
pub use sim::{
    frame_rng, noise_var_to_snr, run_crb_sweep, run_snr_sweep, simulate_frame, snr_to_noise_var,
    FrameBudget, Link, Scheme, SimConfig, SweepRecord,
};
