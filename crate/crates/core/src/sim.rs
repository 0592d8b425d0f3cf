//! Monte Carlo link-level simulation and parameter sweeps.
//!
//! One frame runs the whole chain — uniform bits, Gray QAM, precoding,
//! the delay-Doppler channel, circularly-symmetric Gaussian noise,
//! ZF/MMSE equalization, hard demapping, error counting. Sweeps solve
//! the precoder per operating point, reuse it across frames, and
//! reconcile the empirical BER against the analytic curve and its
//! lower bound.

use nalgebra::Complex;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use std::collections::HashMap;

use crate::comms::{
    analytic_ber, ber_lower_bound, equalizer_matrix, qam_demodulate, qam_modulate,
    ModulationParams,
};
use crate::dd::{dd_channel, CMatrix, CVector, DdChannel, FrameParams, Path};
use crate::error::{Error, Result};
use crate::precoder::{solve_dual, DesignProblem, Precoder, SolveOutcome, SolverOptions};
use crate::sensing::{crb_doppler, sensing_eigen, SensingSetup};

/// Precoding scheme under test. The `*Wc` variants solve the same
/// BER-minimization but drop the CRB constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    ProposedZf,
    ProposedMmse,
    ZfWc,
    MmseWc,
}

impl Scheme {
    pub fn equalizer(&self) -> crate::comms::Equalizer {
        match self {
            Scheme::ProposedZf | Scheme::ZfWc => crate::comms::Equalizer::Zf,
            Scheme::ProposedMmse | Scheme::MmseWc => crate::comms::Equalizer::Mmse,
        }
    }

    /// Whether the CRB constraint is enforced.
    pub fn constrained(&self) -> bool {
        matches!(self, Scheme::ProposedZf | Scheme::ProposedMmse)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Scheme::ProposedZf => "proposed-zf",
            Scheme::ProposedMmse => "proposed-mmse",
            Scheme::ZfWc => "zf-wc",
            Scheme::MmseWc => "mmse-wc",
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "proposed-zf" => Ok(Scheme::ProposedZf),
            "proposed-mmse" => Ok(Scheme::ProposedMmse),
            "zf-wc" => Ok(Scheme::ZfWc),
            "mmse-wc" => Ok(Scheme::MmseWc),
            other => Err(format!(
                "unknown scheme '{other}' (expected proposed-zf, proposed-mmse, zf-wc, mmse-wc)"
            )),
        }
    }
}

/// How many frames a sweep point simulates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameBudget {
    /// Sized so the point accumulates about `target_errors` expected
    /// bit errors at the analytic BER, capped at `max_frames`.
    Auto { target_errors: u64, max_frames: u64 },
    Fixed(u64),
}

impl Default for FrameBudget {
    fn default() -> Self {
        FrameBudget::Auto {
            target_errors: 100,
            max_frames: 1_000_000,
        }
    }
}

impl FrameBudget {
    pub fn frames_for(&self, analytic_ber: f64, bits_per_frame: usize) -> u64 {
        match *self {
            FrameBudget::Fixed(n) => n.max(1),
            FrameBudget::Auto {
                target_errors,
                max_frames,
            } => {
                let expected_per_frame = analytic_ber.max(1e-300) * bits_per_frame as f64;
                let needed = (target_errors as f64 / expected_per_frame).ceil();
                (needed as u64).clamp(1, max_frames.max(1))
            }
        }
    }
}

/// Everything one simulation campaign needs.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub frame: FrameParams,
    /// Line-of-sight communication path; its gain is the design `h_c`.
    pub comm_path: Path,
    /// Constellation/equalizer template; the noise variance is
    /// overwritten per sweep point from the SNR grid.
    pub modulation: ModulationParams,
    /// Design-problem template carrying the power budget and sensing
    /// setup shared by every point.
    pub problem: DesignProblem,
    pub snr_grid_db: Vec<f64>,
    pub crb_threshold_grid: Vec<f64>,
    pub frames_per_point: FrameBudget,
    pub rng_seed: u64,
    pub scheme: Scheme,
    pub solver: SolverOptions,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.comm_path.validate_for(&self.frame)?;
        self.problem
            .sensing()
            .sense_path()
            .validate_for(&self.frame)?;
        if self.snr_grid_db.is_empty() {
            return Err(Error::InvalidFrame("snr grid must be nonempty".into()));
        }
        if let FrameBudget::Fixed(0) = self.frames_per_point {
            return Err(Error::NonPositive {
                name: "frames_per_point",
                value: 0.0,
            });
        }
        Ok(())
    }
}

/// Everything recorded at one sweep point.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    pub snr_db: f64,
    pub crb_threshold: f64,
    pub scheme: Scheme,
    pub ber_monte_carlo: f64,
    pub ber_analytic: f64,
    pub ber_lower_bound: f64,
    pub crb_achieved: f64,
    pub bits_simulated: u64,
    pub bit_errors: u64,
    pub dual_lambda: f64,
    pub dual_mu: f64,
    pub converged: bool,
}

/// Pinned SNR convention: per-symbol post-channel SNR under uniform
/// power, `σ_c² = |h_c|²(P₀/MN) / 10^(snr/10)`.
pub fn snr_to_noise_var(
    snr_db: f64,
    power_budget: f64,
    channel_gain: Complex64,
    frame: &FrameParams,
) -> f64 {
    channel_gain.norm_sqr() * (power_budget / frame.mn() as f64) / 10f64.powf(snr_db / 10.0)
}

/// Inverse of [`snr_to_noise_var`].
pub fn noise_var_to_snr(
    noise_var: f64,
    power_budget: f64,
    channel_gain: Complex64,
    frame: &FrameParams,
) -> f64 {
    10.0 * (channel_gain.norm_sqr() * (power_budget / frame.mn() as f64) / noise_var).log10()
}

/// Deterministic per-frame generator derived from
/// `(seed, point_index, frame_index)`, so frame order and thread
/// schedule cannot change the results.
pub fn frame_rng(seed: u64, point_index: u64, frame_index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut state = seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(point_index)
        .rotate_left(23)
        .wrapping_add(frame_index);
    for chunk in key.chunks_mut(8) {
        // splitmix64 scramble
        state = state.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^= z >> 31;
        chunk.copy_from_slice(&z.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Precomputed per-point link: the equalized end-to-end map `QHW` and
/// the noise path `Q`.
#[derive(Debug, Clone)]
pub struct Link {
    qhw: CMatrix,
    q: CMatrix,
    params: ModulationParams,
    mn: usize,
}

impl Link {
    pub fn new(channel: &DdChannel, precoder_w: &CMatrix, params: ModulationParams) -> Result<Self> {
        let q = equalizer_matrix(channel, precoder_w, &params)?;
        let qhw = &q * channel.matrix() * precoder_w;
        Ok(Self {
            qhw,
            q,
            params,
            mn: channel.dim(),
        })
    }

    pub fn bits_per_frame(&self) -> usize {
        self.mn * self.params.bits_per_symbol()
    }

    /// One frame through the chain; returns `(bit_errors, bits)`.
    pub fn simulate_frame(&self, rng: &mut ChaCha8Rng) -> (u64, u64) {
        let bits: Vec<bool> = (0..self.bits_per_frame()).map(|_| rng.random()).collect();
        let symbols = qam_modulate(&bits, &self.params).expect("frame bit count is framed");
        let d = CVector::from_vec(symbols);

        // noise with variance σ_c² per complex entry
        let noise_scale = (self.params.noise_var() / 2.0).sqrt();
        let noise = CVector::from_fn(self.mn, |_, _| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex::new(re * noise_scale, im * noise_scale)
        });

        let equalized = &self.qhw * d + &self.q * noise;
        let decided = qam_demodulate(equalized.as_slice(), &self.params);
        let errors = bits
            .iter()
            .zip(&decided)
            .filter(|(a, b)| a != b)
            .count() as u64;
        (errors, self.bits_per_frame() as u64)
    }
}

/// One frame end to end, building the channel and equalizer from the
/// config. Sweeps use [`Link`] to amortize that setup across frames.
pub fn simulate_frame(
    config: &SimConfig,
    precoder: &Precoder,
    rng: &mut ChaCha8Rng,
) -> Result<(u64, u64)> {
    if precoder.gamma().len() != config.frame.mn() {
        return Err(Error::DimensionMismatch {
            expected: config.frame.mn(),
            got: precoder.gamma().len(),
        });
    }
    let channel = dd_channel(&config.frame, &[config.comm_path])?;
    let link = Link::new(&channel, precoder.w(), config.modulation)?;
    Ok(link.simulate_frame(rng))
}

/// Per-point solver cache key: the solve depends on the noise variance,
/// the threshold, and the scheme only.
#[derive(PartialEq, Eq, Hash)]
struct SolveKey {
    noise_bits: u64,
    threshold_bits: u64,
    scheme: Scheme,
}

struct SweepContext {
    channel: DdChannel,
    eigen: crate::sensing::SensingEigen,
    cache: HashMap<SolveKey, std::result::Result<SolveOutcome, String>>,
}

impl SweepContext {
    fn new(config: &SimConfig) -> Result<Self> {
        Ok(Self {
            channel: dd_channel(&config.frame, &[config.comm_path])?,
            eigen: sensing_eigen(config.problem.sensing(), &config.frame)?,
            cache: HashMap::new(),
        })
    }
}

fn solve_point(
    config: &SimConfig,
    ctx: &mut SweepContext,
    noise_var: f64,
    crb_threshold: f64,
) -> Result<std::result::Result<SolveOutcome, String>> {
    let key = SolveKey {
        noise_bits: noise_var.to_bits(),
        threshold_bits: crb_threshold.to_bits(),
        scheme: config.scheme,
    };
    if let Some(hit) = ctx.cache.get(&key) {
        return Ok(hit.clone());
    }

    let modulation = ModulationParams::new(
        config.modulation.mod_order(),
        config.scheme.equalizer(),
        noise_var,
    )?;
    let sensing = if config.scheme.constrained() {
        config.problem.sensing().with_crb_threshold(crb_threshold)?
    } else {
        SensingSetup::unconstrained(
            *config.problem.sensing().sense_path(),
            config.problem.sensing().noise_var(),
        )?
    };
    let problem = DesignProblem::new(
        config.problem.channel_gain(),
        config.problem.power_budget(),
        modulation,
        sensing,
    )?;

    let outcome = match solve_dual(&problem, &ctx.eigen, &config.solver) {
        Ok(out) => Ok(out),
        // infeasibility and non-convergence are per-point outcomes, not
        // sweep-level failures
        Err(e @ Error::Infeasible { .. }) | Err(e @ Error::NonConvergence { .. }) => {
            Err(e.to_string())
        }
        Err(e) => return Err(e),
    };
    ctx.cache.insert(
        key,
        match &outcome {
            Ok(out) => Ok(out.clone()),
            Err(msg) => Err(msg.clone()),
        },
    );
    Ok(outcome)
}

fn sweep_point(
    config: &SimConfig,
    ctx: &mut SweepContext,
    point_index: u64,
    snr_db: f64,
    crb_threshold: f64,
) -> Result<SweepRecord> {
    let noise_var = snr_to_noise_var(
        snr_db,
        config.problem.power_budget(),
        config.problem.channel_gain(),
        &config.frame,
    );
    let solved = solve_point(config, ctx, noise_var, crb_threshold)?;

    let outcome = match solved {
        Ok(out) => out,
        Err(reason) => {
            log::warn!("point {point_index} ({snr_db} dB, γ_ν = {crb_threshold:.3e}): {reason}");
            return Ok(SweepRecord {
                snr_db,
                crb_threshold,
                scheme: config.scheme,
                ber_monte_carlo: f64::NAN,
                ber_analytic: f64::NAN,
                ber_lower_bound: f64::NAN,
                crb_achieved: f64::NAN,
                bits_simulated: 0,
                bit_errors: 0,
                dual_lambda: f64::NAN,
                dual_mu: f64::NAN,
                converged: false,
            });
        }
    };

    let params = ModulationParams::new(
        config.modulation.mod_order(),
        config.scheme.equalizer(),
        noise_var,
    )?;
    let w = outcome.precoder.w();
    let ber_an = analytic_ber(&ctx.channel, w, &params)?;
    let ber_lb = match ber_lower_bound(&ctx.channel, w, &params) {
        Ok(lb) => lb.value,
        Err(Error::LowerBoundDomain { .. }) => f64::NAN,
        Err(e) => return Err(e),
    };
    let crb_achieved = crb_doppler(config.problem.sensing(), &config.frame, w)?;

    let link = Link::new(&ctx.channel, w, params)?;
    let frames = config
        .frames_per_point
        .frames_for(ber_an, link.bits_per_frame());
    let seed = config.rng_seed;
    let (errors, bits) = (0..frames)
        .into_par_iter()
        .map(|f| {
            let mut rng = frame_rng(seed, point_index, f);
            link.simulate_frame(&mut rng)
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));

    Ok(SweepRecord {
        snr_db,
        crb_threshold,
        scheme: config.scheme,
        ber_monte_carlo: errors as f64 / bits as f64,
        ber_analytic: ber_an,
        ber_lower_bound: ber_lb,
        crb_achieved,
        bits_simulated: bits,
        bit_errors: errors,
        dual_lambda: outcome.state.lambda,
        dual_mu: outcome.state.mu,
        converged: true,
    })
}

/// BER versus SNR at the configured CRB threshold.
pub fn run_snr_sweep(config: &SimConfig) -> Result<Vec<SweepRecord>> {
    config.validate()?;
    let mut ctx = SweepContext::new(config)?;
    let threshold = config.problem.sensing().crb_threshold();
    let mut records = Vec::with_capacity(config.snr_grid_db.len());
    for (idx, &snr_db) in config.snr_grid_db.iter().enumerate() {
        log::info!(
            "snr sweep point {}/{}: {snr_db} dB",
            idx + 1,
            config.snr_grid_db.len()
        );
        records.push(sweep_point(config, &mut ctx, idx as u64, snr_db, threshold)?);
    }
    Ok(records)
}

/// BER versus CRB threshold at each configured SNR.
pub fn run_crb_sweep(config: &SimConfig) -> Result<Vec<SweepRecord>> {
    config.validate()?;
    if config.crb_threshold_grid.is_empty() {
        return Err(Error::InvalidFrame("crb threshold grid must be nonempty".into()));
    }
    let mut ctx = SweepContext::new(config)?;
    let mut records = Vec::new();
    let mut point_index = 0u64;
    for &snr_db in &config.snr_grid_db {
        for &threshold in &config.crb_threshold_grid {
            log::info!("crb sweep point: {snr_db} dB, γ_ν = {threshold:.3e}");
            records.push(sweep_point(config, &mut ctx, point_index, snr_db, threshold)?);
            point_index += 1;
        }
    }
    Ok(records)
}
