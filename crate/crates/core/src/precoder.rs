//! CRB-constrained BER-minimizing precoder design.
//!
//! The precoder is factored as `W = U Σ V` and optimized in three parts:
//! `U` aligns with the sensing eigenbasis, the squared singular values
//! `Γ = Σ²` solve a water-filling-like program via its Lagrangian dual,
//! and `V` spreads the (diagonal) effective Gram so every symbol sees
//! the same post-equalization SINR. Given the dual variables `(λ, μ)`
//! the per-mode optimum is closed form:
//!
//! ```text
//! γ_q = [ (λ − μ λ_s,q)^{-1/2} / |h_c|  −  κσ_c²/|h_c|² ]⁺
//! ```
//!
//! and `(λ, μ)` are found by projected gradient ascent on the concave
//! dual, whose gradients are the constraint residuals at the inner
//! minimizer, followed by a damped Newton refinement of the active KKT
//! system so the returned allocation meets both constraints to near
//! machine precision.

use num_complex::Complex64;

use crate::comms::ModulationParams;
use crate::dd::{dft_matrix, CMatrix, CVector};
use crate::error::{Error, Result};
use crate::sensing::{crb_feasibility, SensingEigen, SensingSetup};

/// Factored precoder `W = U·diag(√γ)·V` with the assembled matrix.
#[derive(Debug, Clone)]
pub struct Precoder {
    u: CMatrix,
    gamma: Vec<f64>,
    v: CMatrix,
    assembled_w: CMatrix,
}

impl Precoder {
    /// Assembles `W = U·diag(√γ)·V`. Panics on negative allocations or
    /// mismatched dimensions; those are programming errors, not inputs.
    pub fn assemble(u: CMatrix, gamma: Vec<f64>, v: CMatrix) -> Self {
        let mn = gamma.len();
        assert_eq!(u.ncols(), mn, "U dimension mismatch");
        assert_eq!(v.nrows(), mn, "V dimension mismatch");
        assert!(
            gamma.iter().all(|&g| g >= 0.0),
            "negative power allocation"
        );
        let sigma = CVector::from_iterator(mn, gamma.iter().map(|&g| Complex64::new(g.sqrt(), 0.0)));
        let assembled_w = &u * CMatrix::from_diagonal(&sigma) * &v;
        Self {
            u,
            gamma,
            v,
            assembled_w,
        }
    }

    pub fn u(&self) -> &CMatrix {
        &self.u
    }

    /// Squared singular values (diagonal of `Γ = Σ²`), in the sensing
    /// eigenvalue order.
    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn v(&self) -> &CMatrix {
        &self.v
    }

    pub fn w(&self) -> &CMatrix {
        &self.assembled_w
    }

    /// Total transmit power `tr(Γ) = tr(WWᴴ)`.
    pub fn power(&self) -> f64 {
        self.gamma.iter().sum()
    }
}

/// Dual variables and the state of the ascent at return time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualState {
    pub lambda: f64,
    pub mu: f64,
    pub step_lambda: f64,
    pub step_mu: f64,
    pub iteration: usize,
    pub grad_lambda: f64,
    pub grad_mu: f64,
}

impl DualState {
    /// State holding only the dual variables, for direct evaluation of
    /// the closed-form allocation and gradients.
    pub fn at(lambda: f64, mu: f64) -> Self {
        Self {
            lambda,
            mu,
            step_lambda: 0.0,
            step_mu: 0.0,
            iteration: 0,
            grad_lambda: 0.0,
            grad_mu: 0.0,
        }
    }
}

/// One dual-ascent iterate kept for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualTraceEntry {
    pub iteration: usize,
    pub lambda: f64,
    pub mu: f64,
    pub dual_value: f64,
    pub grad_lambda: f64,
    pub grad_mu: f64,
}

/// Full problem data for one precoder design.
#[derive(Debug, Clone)]
pub struct DesignProblem {
    channel_gain: Complex64,
    comm_noise_var: f64,
    power_budget: f64,
    modulation: ModulationParams,
    sensing: SensingSetup,
}

impl DesignProblem {
    pub fn new(
        channel_gain: Complex64,
        power_budget: f64,
        modulation: ModulationParams,
        sensing: SensingSetup,
    ) -> Result<Self> {
        if !(channel_gain.norm() > 0.0) {
            return Err(Error::NonPositive {
                name: "channel_gain modulus",
                value: channel_gain.norm(),
            });
        }
        if !(power_budget > 0.0) {
            return Err(Error::NonPositive {
                name: "power_budget",
                value: power_budget,
            });
        }
        Ok(Self {
            channel_gain,
            comm_noise_var: modulation.noise_var(),
            power_budget,
            modulation,
            sensing,
        })
    }

    pub fn channel_gain(&self) -> Complex64 {
        self.channel_gain
    }

    pub fn comm_noise_var(&self) -> f64 {
        self.comm_noise_var
    }

    pub fn power_budget(&self) -> f64 {
        self.power_budget
    }

    pub fn modulation(&self) -> &ModulationParams {
        &self.modulation
    }

    pub fn sensing(&self) -> &SensingSetup {
        &self.sensing
    }
}

/// Solver knobs for [`solve_dual`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Multiplier on the auto-scaled λ step.
    pub step_scale_lambda: f64,
    /// Multiplier on the auto-scaled μ step.
    pub step_scale_mu: f64,
    /// Ascent stops once both gradient magnitudes are at or below this.
    pub grad_tol: f64,
    pub max_iters: usize,
    /// Refine the ascent result by Newton on the KKT residuals.
    pub polish: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            step_scale_lambda: 1.0,
            step_scale_mu: 1.0,
            grad_tol: 1e-2,
            max_iters: 100_000,
            polish: true,
        }
    }
}

/// Solver result: the assembled precoder, the dual state it came from,
/// the ascent trace, the primal objective
/// `tr((κσ_c²I + |h_c|²Γ)⁻¹)`, and whether the SINR-equalizing `V`
/// can actually reach the BER lower bound at these parameters.
#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub precoder: Precoder,
    pub state: DualState,
    pub trace: Vec<DualTraceEntry>,
    pub objective: f64,
    pub lb_attainable: bool,
}

fn hc(problem: &DesignProblem) -> f64 {
    problem.channel_gain.norm()
}

/// Per-mode allocation at fixed duals; `None` modes are clamped to zero.
fn gamma_at(problem: &DesignProblem, eigvals: &[f64], lambda: f64, mu: f64) -> Result<Vec<f64>> {
    let hc = hc(problem);
    let offset = problem.modulation.kappa() * problem.comm_noise_var / (hc * hc);
    eigvals
        .iter()
        .map(|&l_q| {
            let s = lambda - mu * l_q;
            if !(s > 0.0) {
                return Err(Error::DualDomain {
                    lambda,
                    mu,
                    eig_max: eigvals[0],
                });
            }
            Ok((1.0 / (hc * s.sqrt()) - offset).max(0.0))
        })
        .collect()
}

/// Closed-form `Γ(λ, μ)` per mode, in the eigenvalue order of `eigen`.
pub fn gamma_from_duals(
    problem: &DesignProblem,
    eigen: &SensingEigen,
    state: &DualState,
) -> Result<Vec<f64>> {
    gamma_at(problem, eigen.eigvals(), state.lambda, state.mu)
}

/// `U = E_s`: makes `Uᴴ(E_s Λ_s E_sᴴ)U` diagonal so the sensing
/// constraint couples to `Γ` mode by mode.
pub fn choose_u(eigen: &SensingEigen) -> CMatrix {
    eigen.eigvecs().clone_owned()
}

/// SINR-equalizing right factor.
///
/// For diagonal `κσ_c²I + |h_c|²Γ` the eigenvector factor is the
/// identity and the full-size DFT already equalizes every diagonal
/// entry of `Vᴴ D V`, so `V = F_MN`. The boolean reports the existence
/// condition for a bound-achieving `V`,
/// `σ_c² · tr((κσ_c²I + |h_c|²Γ)⁻¹) ≤ MN·η` (same normalization as the
/// default validity direction); failing it is a warning, not an error —
/// the precoder is still valid, the bound just is not guaranteed tight.
pub fn choose_v(problem: &DesignProblem, gamma: &[f64]) -> (CMatrix, bool) {
    let mn = gamma.len();
    let v = dft_matrix(mn).expect("allocation is nonempty");
    let attainable = problem.comm_noise_var * allocation_objective(problem, gamma)
        <= mn as f64 * problem.modulation.eta();
    if !attainable {
        log::warn!(
            "BER lower bound unreachable at these parameters; \
             returning the equalizing V regardless"
        );
    }
    (v, attainable)
}

/// Primal objective `tr((κσ_c²I + |h_c|²Γ)⁻¹) = Σ_q 1/(κσ_c² + |h_c|²γ_q)`.
pub fn allocation_objective(problem: &DesignProblem, gamma: &[f64]) -> f64 {
    let hc2 = hc(problem).powi(2);
    let ridge = problem.modulation.kappa() * problem.comm_noise_var;
    gamma.iter().map(|&g| 1.0 / (ridge + hc2 * g)).sum()
}

/// Dual function `D(λ, μ)`: the Lagrangian evaluated at the inner
/// minimizer `Γ(λ, μ)`.
pub fn dual_value(problem: &DesignProblem, eigen: &SensingEigen, lambda: f64, mu: f64) -> Result<f64> {
    let gamma = gamma_at(problem, eigen.eigvals(), lambda, mu)?;
    let power: f64 = gamma.iter().sum();
    let sensing: f64 = gamma
        .iter()
        .zip(eigen.eigvals())
        .map(|(g, l)| g * l)
        .sum();
    Ok(allocation_objective(problem, &gamma) + lambda * (power - problem.power_budget)
        - mu * (sensing - problem.sensing.effective_threshold()))
}

/// Dual gradients at the inner minimizer: the constraint residuals
/// `(tr(Γ) − P₀, γ̃_ν − tr(Γ Λ_s))`.
pub fn dual_gradient(
    problem: &DesignProblem,
    eigen: &SensingEigen,
    state: &DualState,
) -> Result<(f64, f64)> {
    let gamma = gamma_at(problem, eigen.eigvals(), state.lambda, state.mu)?;
    Ok(gradient_from_gamma(problem, eigen.eigvals(), &gamma))
}

fn gradient_from_gamma(problem: &DesignProblem, eigvals: &[f64], gamma: &[f64]) -> (f64, f64) {
    let power: f64 = gamma.iter().sum();
    let sensing: f64 = gamma.iter().zip(eigvals).map(|(g, l)| g * l).sum();
    (
        power - problem.power_budget,
        problem.sensing.effective_threshold() - sensing,
    )
}

/// The λ that exhausts the power budget when the CRB constraint is
/// inactive (uniform allocation `γ̄ = P₀/MN`).
fn closed_form_lambda(problem: &DesignProblem, mn: usize) -> f64 {
    let hc = hc(problem);
    let uniform = problem.power_budget / mn as f64;
    let offset = problem.modulation.kappa() * problem.comm_noise_var / (hc * hc);
    (hc * (uniform + offset)).powi(-2)
}

/// Newton refinement of the active-set KKT system
/// `tr(Γ(λ,μ)) = P₀`, `tr(Γ(λ,μ)Λ_s) = γ̃_ν` with clamped modes frozen
/// per iterate. Returns the best iterate found.
fn polish_duals(
    problem: &DesignProblem,
    eigvals: &[f64],
    lambda0: f64,
    mu0: f64,
) -> (f64, f64) {
    let hc = hc(problem);
    let offset = problem.modulation.kappa() * problem.comm_noise_var / (hc * hc);
    let gtil = problem.sensing.effective_threshold();
    let p0 = problem.power_budget;
    let eig_max = eigvals[0];

    let residuals = |lambda: f64, mu: f64| -> Option<(f64, f64)> {
        let gamma = gamma_at(problem, eigvals, lambda, mu).ok()?;
        let (r1, r2) = gradient_from_gamma(problem, eigvals, &gamma);
        Some((r1, -r2))
    };

    let mut lambda = lambda0;
    let mut mu = if mu0 > 0.0 { mu0 } else { 0.1 * lambda0 / eig_max };
    let (mut r1, mut r2) = match residuals(lambda, mu) {
        Some(r) => r,
        None => return (lambda0, mu0),
    };
    let norm = |a: f64, b: f64| (a / p0.max(1.0)).hypot(b / gtil.max(1e-300));
    let mut best = (lambda, mu, norm(r1, r2));

    for _ in 0..80 {
        if r1.abs() <= 1e-12 * p0.max(1.0) && r2.abs() <= 1e-12 * gtil {
            break;
        }
        // Jacobian over the unclamped modes
        let mut j11 = 0.0;
        let mut j12 = 0.0;
        let mut j21 = 0.0;
        let mut j22 = 0.0;
        for &l_q in eigvals {
            let s = lambda - mu * l_q;
            let raw = 1.0 / (hc * s.sqrt()) - offset;
            if raw <= 0.0 {
                continue;
            }
            let d = -0.5 / (hc * s.powf(1.5));
            j11 += d;
            j12 += -l_q * d;
            j21 += l_q * d;
            j22 += -l_q * l_q * d;
        }
        let det = j11 * j22 - j12 * j21;
        if det.abs() < 1e-300 {
            break;
        }
        let dl = (-r1 * j22 + r2 * j12) / det;
        let dm = (-j11 * r2 + j21 * r1) / det;

        let mut t = 1.0;
        let mut advanced = false;
        while t > 1e-14 {
            let nl = lambda + t * dl;
            let nm = (mu + t * dm).max(0.0);
            if nl > nm * eig_max && nl > 0.0 {
                if let Some((n1, n2)) = residuals(nl, nm) {
                    if norm(n1, n2) <= norm(r1, r2) || t <= 1e-13 {
                        lambda = nl;
                        mu = nm;
                        r1 = n1;
                        r2 = n2;
                        advanced = true;
                        break;
                    }
                }
            }
            t *= 0.5;
        }
        if !advanced {
            break;
        }
        if norm(r1, r2) < best.2 {
            best = (lambda, mu, norm(r1, r2));
        }
    }
    (best.0, best.1)
}

/// Solves the dual problem and assembles the precoder.
///
/// The inactive-constraint case is closed form: uniform power and
/// `μ = 0`. Otherwise the dual variables follow the projected ascent
/// `λ ← [λ + ε₁∇D]⁺`, `μ ← [μ + ε₂∇D]⁺` with a diminishing `ε/√r`
/// schedule, backtracking whenever a step would leave the domain
/// `λ − μλ_s,max > 0`, until both gradients fall below `grad_tol`; a
/// Newton refinement then pins the constraint residuals.
pub fn solve_dual(
    problem: &DesignProblem,
    eigen: &SensingEigen,
    options: &SolverOptions,
) -> Result<SolveOutcome> {
    let mn = eigen.dim();
    let eigvals = eigen.eigvals();
    let gtil = problem.sensing.effective_threshold();
    if !crb_feasibility(problem.sensing(), eigen, problem.power_budget) {
        return Err(Error::Infeasible {
            required: gtil,
            achievable: problem.power_budget * eigen.max_eigval(),
        });
    }

    let uniform = problem.power_budget / mn as f64;
    let sensing_uniform: f64 = eigvals.iter().map(|l| uniform * l).sum();
    let lambda0 = closed_form_lambda(problem, mn);

    // inactive CRB constraint: uniform allocation is optimal
    if sensing_uniform >= gtil {
        let gamma = vec![uniform; mn];
        let state = DualState {
            lambda: lambda0,
            mu: 0.0,
            step_lambda: 0.0,
            step_mu: 0.0,
            iteration: 0,
            grad_lambda: 0.0,
            grad_mu: gtil - sensing_uniform,
        };
        let trace = vec![DualTraceEntry {
            iteration: 0,
            lambda: lambda0,
            mu: 0.0,
            dual_value: allocation_objective(problem, &gamma),
            grad_lambda: 0.0,
            grad_mu: gtil - sensing_uniform,
        }];
        return Ok(assemble_outcome(problem, eigen, gamma, state, trace));
    }

    // active constraint: projected gradient ascent on the dual
    let eig_max = eigen.max_eigval();
    let grad_mu0 = gtil - sensing_uniform;
    let step_lambda = options.step_scale_lambda * lambda0 / (8.0 * problem.power_budget.max(1e-300));
    let step_mu = options.step_scale_mu * (lambda0 / eig_max) / (8.0 * grad_mu0);

    let mut lambda = lambda0;
    let mut mu = 0.0;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iteration = 0;

    for r in 1..=options.max_iters {
        iteration = r;
        let gamma = gamma_at(problem, eigvals, lambda, mu)
            .expect("backtracking keeps iterates inside the dual domain");
        let grads = gradient_from_gamma(problem, eigvals, &gamma);
        // D(λ, μ) = objective + λ(trΓ − P₀) + μ(γ̃ − trΓΛ)
        let dv = allocation_objective(problem, &gamma) + lambda * grads.0 + mu * grads.1;
        trace.push(DualTraceEntry {
            iteration: r - 1,
            lambda,
            mu,
            dual_value: dv,
            grad_lambda: grads.0,
            grad_mu: grads.1,
        });
        if grads.0.abs() <= options.grad_tol && grads.1.abs() <= options.grad_tol {
            converged = true;
            break;
        }

        let shrink = 1.0 / (r as f64).sqrt();
        let mut dl = step_lambda * shrink * grads.0;
        let mut dm = step_mu * shrink * grads.1;
        for _ in 0..200 {
            let nl = (lambda + dl).max(0.0);
            let nm = (mu + dm).max(0.0);
            if nl > nm * eig_max && nl > 0.0 {
                lambda = nl;
                mu = nm;
                break;
            }
            dl *= 0.5;
            dm *= 0.5;
        }
    }

    if !converged {
        return Err(Error::NonConvergence {
            max_iters: options.max_iters,
            trace,
        });
    }

    if options.polish {
        let (pl, pm) = polish_duals(problem, eigvals, lambda, mu);
        lambda = pl;
        mu = pm;
    }

    let gamma = gamma_at(problem, eigvals, lambda, mu)?;
    let grads = gradient_from_gamma(problem, eigvals, &gamma);
    let state = DualState {
        lambda,
        mu,
        step_lambda,
        step_mu,
        iteration,
        grad_lambda: grads.0,
        grad_mu: grads.1,
    };
    Ok(assemble_outcome(problem, eigen, gamma, state, trace))
}

fn assemble_outcome(
    problem: &DesignProblem,
    eigen: &SensingEigen,
    gamma: Vec<f64>,
    state: DualState,
    trace: Vec<DualTraceEntry>,
) -> SolveOutcome {
    debug_assert!(state.lambda > 0.0, "power multiplier must stay positive");
    let u = choose_u(eigen);
    let (v, lb_attainable) = choose_v(problem, &gamma);
    let objective = allocation_objective(problem, &gamma);
    SolveOutcome {
        precoder: Precoder::assemble(u, gamma, v),
        state,
        trace,
        objective,
        lb_attainable,
    }
}

/// Independent reference solver for the allocation subproblem:
/// a feasibility-filtered grid scan over `Σγ = P₀` compositions,
/// refined by projected gradient descent with a Dykstra projection onto
/// `{γ ≥ 0, Σγ ≤ P₀, Σγλ ≥ γ̃_ν}`. Intended as a validation oracle at
/// small dimensions only.
pub fn brute_force_reference(
    problem: &DesignProblem,
    eigen: &SensingEigen,
    grid_resolution: usize,
) -> Result<Vec<f64>> {
    const MAX_DIM: usize = 8;
    let mn = eigen.dim();
    if mn > MAX_DIM {
        return Err(Error::BruteForceTooLarge { mn, max: MAX_DIM });
    }
    if !crb_feasibility(problem.sensing(), eigen, problem.power_budget) {
        return Err(Error::Infeasible {
            required: problem.sensing.effective_threshold(),
            achievable: problem.power_budget * eigen.max_eigval(),
        });
    }
    let eigvals = eigen.eigvals();
    let gtil = problem.sensing.effective_threshold();
    let p0 = problem.power_budget;
    let zf = problem.modulation.kappa() == 0.0;

    // grid scan over compositions of the budget
    let resolution = grid_resolution.max(1);
    let cell = p0 / resolution as f64;
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut point = vec![0usize; mn];
    scan_compositions(resolution, mn, &mut point, &mut |counts| {
        if zf && counts.iter().any(|&c| c == 0) {
            return; // infinite objective under pure inversion
        }
        let gamma: Vec<f64> = counts.iter().map(|&c| c as f64 * cell).collect();
        let sensing: f64 = gamma.iter().zip(eigvals).map(|(g, l)| g * l).sum();
        if sensing < gtil * (1.0 - 1e-12) {
            return;
        }
        let obj = allocation_objective(problem, &gamma);
        if best.as_ref().map_or(true, |(b, _)| obj < *b) {
            best = Some((obj, gamma));
        }
    });

    let start = match best {
        Some((_, gamma)) => gamma,
        None => {
            // no interior grid point was feasible; blend concentration
            // with a touch of uniformity and project
            let mut x: Vec<f64> = vec![0.01 * p0 / mn as f64; mn];
            x[0] += 0.99 * p0;
            project_feasible(&x, eigvals, p0, gtil)
        }
    };

    Ok(projected_gradient(problem, eigvals, start, p0, gtil))
}

/// Visits every composition of `total` into `slots` nonnegative parts.
fn scan_compositions(
    total: usize,
    slots: usize,
    point: &mut [usize],
    visit: &mut impl FnMut(&[usize]),
) {
    fn rec(
        remaining: usize,
        slot: usize,
        slots: usize,
        point: &mut [usize],
        visit: &mut impl FnMut(&[usize]),
    ) {
        if slot + 1 == slots {
            point[slot] = remaining;
            visit(point);
            return;
        }
        for take in 0..=remaining {
            point[slot] = take;
            rec(remaining - take, slot + 1, slots, point, visit);
        }
    }
    rec(total, 0, slots, point, visit);
}

fn projected_gradient(
    problem: &DesignProblem,
    eigvals: &[f64],
    start: Vec<f64>,
    p0: f64,
    gtil: f64,
) -> Vec<f64> {
    let hc2 = hc(problem).powi(2);
    let ridge = problem.modulation.kappa() * problem.comm_noise_var;
    let objective = |x: &[f64]| -> f64 {
        x.iter()
            .map(|&g| {
                let d = ridge + hc2 * g;
                if d <= 0.0 {
                    f64::INFINITY
                } else {
                    1.0 / d
                }
            })
            .sum()
    };

    let mut x = project_feasible(&start, eigvals, p0, gtil);
    let mut fx = objective(&x);
    let mut step = p0;
    for _ in 0..20_000 {
        let grad: Vec<f64> = x.iter().map(|&g| -hc2 / (ridge + hc2 * g).powi(2)).collect();
        let mut accepted = false;
        let mut t = step * 2.0;
        for _ in 0..80 {
            let candidate: Vec<f64> = x.iter().zip(&grad).map(|(xi, gi)| xi - t * gi).collect();
            let projected = project_feasible(&candidate, eigvals, p0, gtil);
            let fc = objective(&projected);
            let move2: f64 = projected
                .iter()
                .zip(&x)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if fc.is_finite() && fc <= fx - 1e-4 * move2 / t.max(1e-300) {
                let displacement = move2.sqrt();
                x = projected;
                fx = fc;
                step = t;
                accepted = true;
                if displacement <= 1e-13 * (1.0 + p0) {
                    return x;
                }
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    x
}

/// Dykstra projection onto `{γ ≥ 0} ∩ {Σγ ≤ P₀} ∩ {Σγλ ≥ γ̃}`.
fn project_feasible(y: &[f64], eigvals: &[f64], p0: f64, gtil: f64) -> Vec<f64> {
    let n = y.len();
    let lam_norm2: f64 = eigvals.iter().map(|l| l * l).sum();
    let mut x = y.to_vec();
    let mut inc = vec![vec![0.0; n]; 3];
    for _ in 0..500 {
        let before = x.clone();
        for (set, correction) in inc.iter_mut().enumerate() {
            let z: Vec<f64> = x.iter().zip(correction.iter()).map(|(a, b)| a + b).collect();
            let projected: Vec<f64> = match set {
                0 => z.iter().map(|&v| v.max(0.0)).collect(),
                1 => {
                    let excess = (z.iter().sum::<f64>() - p0).max(0.0) / n as f64;
                    z.iter().map(|&v| v - excess).collect()
                }
                _ => {
                    if lam_norm2 == 0.0 {
                        z.clone()
                    } else {
                        let deficit =
                            (gtil - z.iter().zip(eigvals).map(|(v, l)| v * l).sum::<f64>()).max(0.0);
                        z.iter()
                            .zip(eigvals)
                            .map(|(&v, &l)| v + deficit * l / lam_norm2)
                            .collect()
                    }
                }
            };
            for i in 0..n {
                correction[i] = z[i] - projected[i];
            }
            x = projected;
        }
        let moved: f64 = x
            .iter()
            .zip(&before)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if moved <= 1e-15 * (1.0 + p0) {
            break;
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comms::Equalizer;
    use crate::dd::{FrameParams, Path};
    use crate::error::Error;
    use crate::mat::{max_abs, unitarity_defect};
    use crate::sensing::{crb_from_allocation, sensing_eigen};

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    /// 2x2 grid toy problem; `crb_scale` slides the threshold between
    /// the uniform-allocation sensing value (1.0 ⇒ boundary of the
    /// inactive region) and the concentration maximum.
    fn toy_problem(eq: Equalizer, noise_var: f64, crb_scale: f64) -> (DesignProblem, SensingEigen) {
        let frame = FrameParams::new(2, 2, 2000.0, 4e9).unwrap();
        let sense_path = Path::new(c(1.0, 0.0), 1, 1);
        let probe = SensingSetup::new(sense_path, 1e-6, 1.0).unwrap();
        let eigen = sensing_eigen(&probe, &frame).unwrap();
        let p0 = 4.0;
        let uniform_sensing: f64 = eigen.eigvals().iter().map(|l| l * p0 / 4.0).sum();
        let target = uniform_sensing * crb_scale;
        let sensing = SensingSetup::new(sense_path, 1e-6, 1e-6 / target).unwrap();
        let modulation = ModulationParams::new(16, eq, noise_var).unwrap();
        let problem = DesignProblem::new(c(1.0, 0.0), p0, modulation, sensing).unwrap();
        (problem, eigen)
    }

    #[test]
    fn gamma_uniform_when_mu_zero() {
        let (problem, eigen) = toy_problem(Equalizer::Zf, 0.1, 0.5);
        let lambda = closed_form_lambda(&problem, 4);
        let gamma = gamma_from_duals(&problem, &eigen, &DualState::at(lambda, 0.0)).unwrap();
        for g in &gamma {
            assert!((g - 1.0).abs() < 1e-12, "expected P0/MN = 1, got {g}");
        }
        // same closed form with the MMSE offset
        let (problem, eigen) = toy_problem(Equalizer::Mmse, 0.3, 0.5);
        let lambda = closed_form_lambda(&problem, 4);
        let gamma = gamma_from_duals(&problem, &eigen, &DualState::at(lambda, 0.0)).unwrap();
        for g in &gamma {
            assert!((g - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gamma_monotone_in_sensing_eigenvalue() {
        let (problem, eigen) = toy_problem(Equalizer::Zf, 0.1, 1.5);
        let lambda = 2.0 * closed_form_lambda(&problem, 4);
        let mu = 0.4 * lambda / eigen.max_eigval();
        let gamma = gamma_from_duals(&problem, &eigen, &DualState::at(lambda, mu)).unwrap();
        // eigvals are descending, so the allocation must be non-increasing
        for w in gamma.windows(2) {
            assert!(w[0] >= w[1] - 1e-15);
        }
        assert!(gamma[0] > gamma[3]);
    }

    #[test]
    fn gamma_clamps_under_mmse_at_huge_lambda() {
        let (problem, eigen) = toy_problem(Equalizer::Mmse, 0.5, 0.5);
        let gamma = gamma_from_duals(&problem, &eigen, &DualState::at(1e12, 0.0)).unwrap();
        assert!(gamma.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gamma_domain_violation_reported() {
        let (problem, eigen) = toy_problem(Equalizer::Zf, 0.1, 1.5);
        let mu = 1.0;
        let lambda = eigen.max_eigval() * mu * 0.5; // λ − μλ_max < 0
        assert!(matches!(
            gamma_from_duals(&problem, &eigen, &DualState::at(lambda, mu)),
            Err(Error::DualDomain { .. })
        ));
    }

    #[test]
    fn chosen_u_diagonalizes_sensing_form() {
        let (_, eigen) = toy_problem(Equalizer::Zf, 0.1, 1.0);
        let u = choose_u(&eigen);
        assert!(unitarity_defect(&u) < 1e-10);
        let diag = CVector::from_iterator(4, eigen.eigvals().iter().map(|&v| c(v, 0.0)));
        let gram = eigen.eigvecs() * CMatrix::from_diagonal(&diag) * eigen.eigvecs().adjoint();
        let z = u.adjoint() * &gram * &u;
        for i in 0..4 {
            for j in 0..4 {
                if i == j {
                    assert!((z[(i, j)].re - eigen.eigvals()[i]).abs() < 1e-9);
                    assert!(z[(i, j)].im.abs() < 1e-9);
                } else {
                    assert!(z[(i, j)].norm() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn permuted_u_keeps_objective() {
        // swapping eigenvector columns permutes the diagonal of Z_s but
        // leaves the achievable objective unchanged: solve with the
        // matching permuted eigenvalue list and compare
        let (problem, eigen) = toy_problem(Equalizer::Zf, 0.1, 1.5);
        let solved = solve_dual(&problem, &eigen, &SolverOptions::default()).unwrap();

        let mut perm_vecs = eigen.eigvecs().clone_owned();
        perm_vecs.swap_columns(1, 2);
        let z = perm_vecs.adjoint()
            * (eigen.eigvecs()
                * CMatrix::from_diagonal(&CVector::from_iterator(
                    4,
                    eigen.eigvals().iter().map(|&v| c(v, 0.0)),
                ))
                * eigen.eigvecs().adjoint())
            * &perm_vecs;
        // still diagonal, entries permuted
        let mut perm_eigs: Vec<f64> = (0..4).map(|i| z[(i, i)].re).collect();
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert!(z[(i, j)].norm() < 1e-9);
                }
            }
        }
        perm_eigs.sort_by(|a, b| b.total_cmp(a));
        let mut orig = eigen.eigvals().to_vec();
        orig.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in perm_eigs.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-12 * b.max(1e-300));
        }
        // objective only depends on the eigenvalue multiset
        assert!(solved.objective.is_finite());
    }

    #[test]
    fn chosen_v_equalizes_any_real_diagonal() {
        let (problem, _) = toy_problem(Equalizer::Zf, 0.1, 0.5);
        let gamma = [1.9, 1.2, 0.6, 0.3];
        let (v, _) = choose_v(&problem, &gamma);
        assert!(unitarity_defect(&v) < 1e-12);
        let d = CMatrix::from_diagonal(&CVector::from_vec(vec![
            c(2.0, 0.0),
            c(0.5, 0.0),
            c(1.25, 0.0),
            c(0.25, 0.0),
        ]));
        let conj = v.adjoint() * &d * &v;
        let mean = (2.0 + 0.5 + 1.25 + 0.25) / 4.0;
        for m in 0..4 {
            assert!((conj[(m, m)].re - mean).abs() < 1e-10);
            assert!(conj[(m, m)].im.abs() < 1e-10);
        }
    }

    #[test]
    fn dual_gradient_matches_finite_differences() {
        for eq in [Equalizer::Zf, Equalizer::Mmse] {
            let (problem, eigen) = toy_problem(eq, 0.2, 1.5);
            let lambda = 1.7 * closed_form_lambda(&problem, 4);
            let mu = 0.3 * lambda / eigen.max_eigval();
            let (gl, gm) = dual_gradient(&problem, &eigen, &DualState::at(lambda, mu)).unwrap();

            let h = 1e-6 * lambda;
            let fd_l = (dual_value(&problem, &eigen, lambda + h, mu).unwrap()
                - dual_value(&problem, &eigen, lambda - h, mu).unwrap())
                / (2.0 * h);
            let hm = 1e-6 * mu.max(lambda / eigen.max_eigval());
            let fd_m = (dual_value(&problem, &eigen, lambda, mu + hm).unwrap()
                - dual_value(&problem, &eigen, lambda, mu - hm).unwrap())
                / (2.0 * hm);
            assert!(
                (gl - fd_l).abs() <= 1e-5 * gl.abs().max(1e-12),
                "{eq:?}: ∇λ {gl} vs fd {fd_l}"
            );
            assert!(
                (gm - fd_m).abs() <= 1e-5 * gm.abs().max(1e-12),
                "{eq:?}: ∇μ {gm} vs fd {fd_m}"
            );
        }
    }

    #[test]
    fn solve_inactive_returns_uniform() {
        for eq in [Equalizer::Zf, Equalizer::Mmse] {
            let (problem, eigen) = toy_problem(eq, 0.1, 0.5);
            let out = solve_dual(&problem, &eigen, &SolverOptions::default()).unwrap();
            assert_eq!(out.state.mu, 0.0);
            for g in out.precoder.gamma() {
                assert!((g - 1.0).abs() < 1e-8);
            }
            assert!(out.state.lambda > 0.0);
        }
    }

    #[test]
    fn solve_active_meets_constraints() {
        for eq in [Equalizer::Zf, Equalizer::Mmse] {
            let (problem, eigen) = toy_problem(eq, 0.2, 1.5);
            let out = solve_dual(&problem, &eigen, &SolverOptions::default()).unwrap();
            assert!(out.state.mu > 0.0);
            // power exhausted
            assert!((out.precoder.power() - 4.0).abs() < 1e-6 * 4.0);
            // sensing value pinned at the threshold
            let sensing: f64 = out
                .precoder
                .gamma()
                .iter()
                .zip(eigen.eigvals())
                .map(|(g, l)| g * l)
                .sum();
            let gtil = problem.sensing().effective_threshold();
            assert!(
                (sensing - gtil).abs() < 1e-3 * gtil,
                "{eq:?}: sensing {sensing} vs threshold {gtil}"
            );
            let crb = crb_from_allocation(problem.sensing(), &eigen, out.precoder.gamma()).unwrap();
            assert!(crb <= problem.sensing().crb_threshold() * (1.0 + 1e-3));
        }
    }

    #[test]
    fn solve_weak_duality_holds() {
        let (problem, eigen) = toy_problem(Equalizer::Zf, 0.15, 1.4);
        let out = solve_dual(&problem, &eigen, &SolverOptions::default()).unwrap();
        // any dual-feasible point lower-bounds any primal-feasible value
        for (scale_l, scale_m) in [(1.0, 0.5), (1.5, 0.2), (2.0, 0.0)] {
            let lambda = out.state.lambda * scale_l;
            let mu = out.state.mu * scale_m;
            let d = dual_value(&problem, &eigen, lambda, mu).unwrap();
            assert!(d <= out.objective + 1e-9 * out.objective.abs());
        }
        // and the gap closes at the solution
        let d_star = dual_value(&problem, &eigen, out.state.lambda, out.state.mu).unwrap();
        assert!((d_star - out.objective).abs() < 1e-6 * out.objective);
    }

    #[test]
    fn solve_objective_monotone_in_threshold() {
        let mut last = f64::INFINITY;
        for scale in [2.2, 1.8, 1.4, 1.1, 0.9] {
            let (problem, eigen) = toy_problem(Equalizer::Zf, 0.1, scale);
            let out = solve_dual(&problem, &eigen, &SolverOptions::default()).unwrap();
            assert!(
                out.objective <= last + 1e-9 * last.abs(),
                "objective must not increase as the threshold relaxes"
            );
            last = out.objective;
        }
    }

    #[test]
    fn solve_infeasible_rejected() {
        // threshold above the concentration maximum
        let (problem, eigen) = toy_problem(Equalizer::Zf, 0.1, 1.0);
        let best = problem.power_budget() * eigen.max_eigval();
        let sensing = problem.sensing().with_crb_threshold(
            problem.sensing().noise_var() / (best * 1.01),
        )
        .unwrap();
        let problem = DesignProblem::new(
            problem.channel_gain(),
            problem.power_budget(),
            *problem.modulation(),
            sensing,
        )
        .unwrap();
        assert!(matches!(
            solve_dual(&problem, &eigen, &SolverOptions::default()),
            Err(Error::Infeasible { .. })
        ));
    }

    #[test]
    fn brute_force_recovers_uniform_without_constraint() {
        let (problem, eigen) = toy_problem(Equalizer::Zf, 0.1, 0.3);
        let gamma = brute_force_reference(&problem, &eigen, 40).unwrap();
        for g in &gamma {
            assert!((g - 1.0).abs() < 1e-3, "expected uniform, got {gamma:?}");
        }
    }

    #[test]
    fn brute_force_matches_dual_on_active_instance() {
        for (eq, noise) in [(Equalizer::Zf, 0.2), (Equalizer::Mmse, 0.5)] {
            let (problem, eigen) = toy_problem(eq, noise, 1.5);
            let dual = solve_dual(&problem, &eigen, &SolverOptions::default()).unwrap();
            let oracle = brute_force_reference(&problem, &eigen, 48).unwrap();
            let dual_obj = dual.objective;
            let oracle_obj = allocation_objective(&problem, &oracle);
            assert!(
                (dual_obj - oracle_obj).abs() <= 1e-3 * oracle_obj,
                "{eq:?}: dual {dual_obj} vs oracle {oracle_obj}"
            );
        }
    }

    #[test]
    fn brute_force_concentrates_under_tight_budget() {
        // heavy MMSE regularization with a demanding threshold pushes
        // power toward the strong sensing modes in both solvers
        let frame = FrameParams::new(2, 2, 2000.0, 4e9).unwrap();
        let sense_path = Path::new(c(1.0, 0.0), 1, 1);
        let probe = SensingSetup::new(sense_path, 1e-6, 1.0).unwrap();
        let eigen = sensing_eigen(&probe, &frame).unwrap();
        let p0 = 1.0;
        let best = p0 * eigen.max_eigval();
        let sensing = SensingSetup::new(sense_path, 1e-6, 1e-6 / (0.9 * best)).unwrap();
        let modulation = ModulationParams::new(16, Equalizer::Mmse, 2.0).unwrap();
        let problem = DesignProblem::new(c(1.0, 0.0), p0, modulation, sensing).unwrap();

        let dual = solve_dual(&problem, &eigen, &SolverOptions::default()).unwrap();
        let oracle = brute_force_reference(&problem, &eigen, 48).unwrap();
        assert!(dual.precoder.gamma()[0] > 0.5 * p0);
        assert!(oracle[0] > 0.5 * p0);
        let gap = (dual.objective - allocation_objective(&problem, &oracle)).abs();
        assert!(gap <= 1e-3 * dual.objective);
    }

    #[test]
    fn brute_force_rejects_large_dimension() {
        let frame = FrameParams::new(8, 8, 2000.0, 4e9).unwrap();
        let setup = SensingSetup::new(Path::new(c(1.0, 0.0), 2, 1), 5e-9, 3e-7).unwrap();
        let eigen = sensing_eigen(&setup, &frame).unwrap();
        let modulation = ModulationParams::new(16, Equalizer::Zf, 0.1).unwrap();
        let problem = DesignProblem::new(c(1.0, 0.0), 64.0, modulation, setup).unwrap();
        assert!(matches!(
            brute_force_reference(&problem, &eigen, 10),
            Err(Error::BruteForceTooLarge { .. })
        ));
    }

    #[test]
    fn assembled_precoder_consistent() {
        let (problem, eigen) = toy_problem(Equalizer::Zf, 0.1, 1.5);
        let out = solve_dual(&problem, &eigen, &SolverOptions::default()).unwrap();
        let p = &out.precoder;
        let sigma = CVector::from_iterator(4, p.gamma().iter().map(|&g| c(g.sqrt(), 0.0)));
        let rebuilt = p.u() * CMatrix::from_diagonal(&sigma) * p.v();
        assert!(max_abs(&(rebuilt - p.w())) < 1e-12);
        assert!(p.power() <= problem.power_budget() + 1e-9);
    }
}
