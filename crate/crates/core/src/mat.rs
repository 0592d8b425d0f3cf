//! Small dense-matrix helpers shared across the crate.

use nalgebra::DMatrix;
use num_complex::Complex64;

pub(crate) type CMat = DMatrix<Complex64>;

/// Kronecker product `a ⊗ b`.
pub(crate) fn kron(a: &CMat, b: &CMat) -> CMat {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = CMat::zeros(ar * br, ac * bc);
    for p in 0..ar {
        for q in 0..ac {
            let apq = a[(p, q)];
            for r in 0..br {
                for s in 0..bc {
                    out[(p * br + r, q * bc + s)] = apq * b[(r, s)];
                }
            }
        }
    }
    out
}

/// Entrywise max modulus, `‖A‖_max`.
#[cfg(test)]
pub(crate) fn max_abs(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// `‖AᴴA − I‖_max`, the unitarity defect.
#[cfg(test)]
pub(crate) fn unitarity_defect(m: &CMat) -> f64 {
    let n = m.ncols();
    let gram = m.adjoint() * m;
    max_abs(&(gram - CMat::identity(n, n)))
}
