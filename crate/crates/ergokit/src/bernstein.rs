//! Tensor-product Bernstein polynomial approximation on boxes.
//!
//! A degree-`m` fit samples the target on the uniform lattice `j/m` per axis
//! and uses the samples directly as Bernstein coefficients. Evaluation
//! contracts the coefficient tensor against per-axis basis vectors computed
//! by the stable de Casteljau triangle; gradients contract against the exact
//! derivative basis instead of differencing, so they cost the same as values
//! and carry no step-size error.

#[allow(unused_imports)]
use num_traits::Float;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::{ErgoError, Result};

/// Hard cap on coefficient storage.
const MAX_COEFFS: u128 = 100_000_000;

/// Degree-`m` Bernstein basis values `B_j(t)`, `j = 0..=m`, at `t` in
/// `[0, 1]`, by the de Casteljau recurrence. All values are nonnegative and
/// sum to 1.
pub(crate) fn basis(m: usize, t: f64) -> Vec<f64> {
    let mut b = vec![0.0; m + 1];
    b[0] = 1.0;
    let s = 1.0 - t;
    for deg in 1..=m {
        for k in (1..=deg).rev() {
            b[k] = b[k - 1] * t + b[k] * s;
        }
        b[0] *= s;
    }
    b
}

/// Contraction vector for the derivative: `sum_j c_j d_j(t)` equals the
/// `t`-derivative of `sum_j c_j B_j(t)` exactly, via the identity
/// `B_j' = m (B_{j-1}^{m-1} - B_j^{m-1})`.
fn derivative_basis(m: usize, t: f64) -> Vec<f64> {
    let lower = basis(m - 1, t);
    let mut d = vec![0.0; m + 1];
    for (j, slot) in d.iter_mut().enumerate() {
        let left = if j >= 1 { lower[j - 1] } else { 0.0 };
        let right = if j <= m - 1 { lower[j] } else { 0.0 };
        *slot = m as f64 * (left - right);
    }
    d
}

/// A fitted tensor Bernstein polynomial on a box.
#[derive(Debug, Clone)]
pub struct BernsteinFit {
    lo: Vec<f64>,
    hi: Vec<f64>,
    m: usize,
    dims: usize,
    coeffs: Vec<f64>,
}

/// Fits a degree-`m` tensor Bernstein polynomial to `phi` on the box
/// `[lo_a, hi_a]` per axis by sampling the uniform coefficient lattice.
///
/// Supports 1 to 4 axes and refuses fits needing more than `1e8`
/// coefficients. Samples must be finite.
pub fn bernstein_fit(
    phi: impl Fn(&[f64]) -> f64,
    lo: &[f64],
    hi: &[f64],
    m: usize,
    dims: usize,
) -> Result<BernsteinFit> {
    if m == 0 {
        return Err(ErgoError::InvalidParameter {
            what: "bernstein degree",
            detail: "degree must be at least 1".into(),
        });
    }
    if dims == 0 || dims > 4 {
        return Err(ErgoError::InvalidParameter {
            what: "bernstein dimensions",
            detail: format!("supported dimensions are 1 to 4, got {dims}"),
        });
    }
    if lo.len() != dims || hi.len() != dims {
        return Err(ErgoError::DimensionMismatch {
            what: "bernstein box",
            expected: dims,
            got: lo.len().min(hi.len()),
        });
    }
    for a in 0..dims {
        if !(lo[a] < hi[a]) || !lo[a].is_finite() || !hi[a].is_finite() {
            return Err(ErgoError::InvalidParameter {
                what: "bernstein box",
                detail: format!("axis {a}: need finite lo < hi, got [{}, {}]", lo[a], hi[a]),
            });
        }
    }
    let mp1 = m + 1;
    let total_u128 = (0..dims).fold(1u128, |acc, _| acc * mp1 as u128);
    if total_u128 > MAX_COEFFS {
        return Err(ErgoError::TooLarge {
            what: "bernstein coefficients",
            size: total_u128,
            limit: MAX_COEFFS,
        });
    }
    let total = total_u128 as usize;
    let mut coeffs = Vec::with_capacity(total);
    let mut z = vec![0.0; dims];
    for flat in 0..total {
        let mut rem = flat;
        for a in (0..dims).rev() {
            let j = rem % mp1;
            rem /= mp1;
            z[a] = lo[a] + (hi[a] - lo[a]) * (j as f64 / m as f64);
        }
        let val = phi(&z);
        if !val.is_finite() {
            return Err(ErgoError::InvalidParameter {
                what: "bernstein sample",
                detail: format!("target is not finite at lattice point {z:?}"),
            });
        }
        coeffs.push(val);
    }
    Ok(BernsteinFit { lo: lo.to_vec(), hi: hi.to_vec(), m, dims, coeffs })
}

impl BernsteinFit {
    /// Degree per axis.
    pub fn degree(&self) -> usize {
        self.m
    }

    /// Number of axes.
    pub fn dims(&self) -> usize {
        self.dims
    }

    /// Box bounds per axis.
    pub fn bounds(&self, axis: usize) -> (f64, f64) {
        (self.lo[axis], self.hi[axis])
    }

    /// The coefficient tensor, flattened with the first axis slowest.
    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// Maps `z` into per-axis unit coordinates, rejecting points outside the
    /// box (with a machine-precision slack at the faces).
    fn unit_coords(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dims {
            return Err(ErgoError::DimensionMismatch {
                what: "evaluation point",
                expected: self.dims,
                got: z.len(),
            });
        }
        let mut t = vec![0.0; self.dims];
        for a in 0..self.dims {
            let span = self.hi[a] - self.lo[a];
            let slack = 1e-12 * (1.0 + span.abs());
            if !z[a].is_finite() || z[a] < self.lo[a] - slack || z[a] > self.hi[a] + slack {
                return Err(ErgoError::OutsideDomain {
                    axis: a,
                    value: z[a],
                    lo: self.lo[a],
                    hi: self.hi[a],
                });
            }
            t[a] = ((z[a] - self.lo[a]) / span).clamp(0.0, 1.0);
        }
        Ok(t)
    }

    /// Contracts the coefficient tensor against one vector per axis. Each
    /// pass eliminates the last (fastest-varying) remaining axis.
    fn contract(&self, vectors: &[Vec<f64>]) -> f64 {
        let mp1 = self.m + 1;
        let mut cur = self.coeffs.clone();
        for axis in (0..self.dims).rev() {
            let vecs = &vectors[axis];
            let out_len = cur.len() / mp1;
            let mut next = vec![0.0; out_len];
            for (p, slot) in next.iter_mut().enumerate() {
                let base = p * mp1;
                let mut acc = 0.0;
                for j in 0..mp1 {
                    acc += cur[base + j] * vecs[j];
                }
                *slot = acc;
            }
            cur = next;
        }
        cur[0]
    }

    /// Value of the fitted polynomial at `z`.
    pub fn eval(&self, z: &[f64]) -> Result<f64> {
        let t = self.unit_coords(z)?;
        let vectors: Vec<Vec<f64>> = t.iter().map(|&ta| basis(self.m, ta)).collect();
        Ok(self.contract(&vectors))
    }

    /// Gradient of the fitted polynomial at `z`, one entry per axis.
    pub fn grad(&self, z: &[f64]) -> Result<Vec<f64>> {
        let t = self.unit_coords(z)?;
        let bases: Vec<Vec<f64>> = t.iter().map(|&ta| basis(self.m, ta)).collect();
        let mut out = vec![0.0; self.dims];
        for g in 0..self.dims {
            let mut vectors = bases.clone();
            vectors[g] = derivative_basis(self.m, t[g]);
            out[g] = self.contract(&vectors) / (self.hi[g] - self.lo[g]);
        }
        Ok(out)
    }
}

fn fract(x: f64) -> f64 {
    x - x.floor()
}

/// Low-discrepancy unit-cube points: multiples of per-axis irrational
/// rotations, folded to `[0, 1)`.
fn weyl_points(dims: usize, count: usize) -> Vec<Vec<f64>> {
    const ALPHA: [f64; 4] = [
        0.618_033_988_749_894_9, // golden ratio conjugate
        0.414_213_562_373_095_1, // sqrt(2) - 1
        0.732_050_807_568_877_3, // sqrt(3) - 1
        0.236_067_977_499_789_7, // sqrt(5) - 2
    ];
    (1..=count)
        .map(|k| (0..dims).map(|a| fract(k as f64 * ALPHA[a])).collect())
        .collect()
}

/// Measured sup-norm errors `(value, gradient)` of the degree-`m` fit of
/// `phi` over a dense probe set in the box.
///
/// `grad_phi` is validated against finite differences of `phi` at a few
/// probes before being trusted as the reference. Probes combine a uniform
/// lattice that contains the box midpoint, coefficient-lattice midpoints
/// (where the worst Bernstein error typically sits), and a low-discrepancy
/// sequence; `probe_count` scales their density.
pub fn uniform_errors(
    phi: impl Fn(&[f64]) -> f64,
    grad_phi: impl Fn(&[f64]) -> Vec<f64>,
    lo: &[f64],
    hi: &[f64],
    m: usize,
    probe_count: usize,
) -> Result<(f64, f64)> {
    let dims = lo.len();
    let fit = bernstein_fit(&phi, lo, hi, m, dims)?;
    if probe_count == 0 {
        return Err(ErgoError::TooFewPoints { what: "probes", need: 1, got: 0 });
    }

    let to_box = |t: &[f64]| -> Vec<f64> {
        (0..dims).map(|a| lo[a] + (hi[a] - lo[a]) * t[a]).collect()
    };

    // Trust check: supplied gradient against central differences.
    for t in weyl_points(dims, 24) {
        let z = to_box(&t);
        let g = grad_phi(&z);
        if g.len() != dims {
            return Err(ErgoError::DimensionMismatch {
                what: "gradient output",
                expected: dims,
                got: g.len(),
            });
        }
        for a in 0..dims {
            let h = 1e-5 * (hi[a] - lo[a]).abs().max(1e-5);
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[a] = (z[a] + h).min(hi[a]);
            zm[a] = (z[a] - h).max(lo[a]);
            let fd = (phi(&zp) - phi(&zm)) / (zp[a] - zm[a]);
            let scale = 1.0 + g[a].abs().max(fd.abs());
            if (g[a] - fd).abs() > 1e-5 * scale {
                return Err(ErgoError::InvalidParameter {
                    what: "grad_phi",
                    detail: format!(
                        "axis {a}: supplied {} disagrees with finite difference {fd}",
                        g[a]
                    ),
                });
            }
        }
    }

    let mut probes: Vec<Vec<f64>> = Vec::new();
    if dims == 1 {
        let count = probe_count | 1; // odd, so the midpoint is included
        for k in 0..count {
            probes.push(vec![k as f64 / (count - 1) as f64]);
        }
        for j in 0..m {
            probes.push(vec![(j as f64 + 0.5) / m as f64]);
        }
    } else {
        let side = ((probe_count as f64).powf(1.0 / dims as f64).ceil() as usize).max(3) | 1;
        let mut idx = vec![0usize; dims];
        loop {
            probes.push(idx.iter().map(|&k| k as f64 / (side - 1) as f64).collect());
            let mut a = dims;
            loop {
                if a == 0 {
                    break;
                }
                a -= 1;
                idx[a] += 1;
                if idx[a] < side {
                    break;
                }
                idx[a] = 0;
            }
            if idx.iter().all(|&k| k == 0) {
                break;
            }
        }
        if m.pow(dims as u32) <= 200_000 {
            let mut jdx = vec![0usize; dims];
            loop {
                probes.push(jdx.iter().map(|&j| (j as f64 + 0.5) / m as f64).collect());
                let mut a = dims;
                loop {
                    if a == 0 {
                        break;
                    }
                    a -= 1;
                    jdx[a] += 1;
                    if jdx[a] < m {
                        break;
                    }
                    jdx[a] = 0;
                }
                if jdx.iter().all(|&j| j == 0) {
                    break;
                }
            }
        }
    }
    probes.extend(weyl_points(dims, probe_count));

    let mut val_err: f64 = 0.0;
    let mut grad_err: f64 = 0.0;
    for t in &probes {
        let z = to_box(t);
        val_err = val_err.max((phi(&z) - fit.eval(&z)?).abs());
        let g_ref = grad_phi(&z);
        let g_fit = fit.grad(&z)?;
        for a in 0..dims {
            grad_err = grad_err.max((g_ref[a] - g_fit[a]).abs());
        }
    }
    Ok((val_err, grad_err))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn basis_partitions_unity_and_stays_nonnegative() {
        for m in [1usize, 4, 17] {
            for &t in &[0.0, 0.1, 0.5, 0.93, 1.0] {
                let b = basis(m, t);
                assert_eq!(b.len(), m + 1);
                assert!(b.iter().all(|&x| x >= 0.0));
                assert_relative_eq!(b.iter().sum::<f64>(), 1.0, max_relative = 1e-14);
            }
        }
        // Endpoints select the first / last coefficient exactly.
        let b0 = basis(6, 0.0);
        assert_eq!(b0[0], 1.0);
        let b1 = basis(6, 1.0);
        assert_eq!(b1[6], 1.0);
    }

    #[test]
    fn affine_functions_are_reproduced_to_machine_precision() {
        let fit = bernstein_fit(|z| 2.0 * z[0] + 1.0, &[0.0], &[1.0], 3, 1).unwrap();
        for &z in &[0.0, 0.25, 0.619, 1.0] {
            assert_relative_eq!(fit.eval(&[z]).unwrap(), 2.0 * z + 1.0, epsilon = 1e-13);
            assert_relative_eq!(fit.grad(&[z]).unwrap()[0], 2.0, epsilon = 1e-12);
        }
        let c = bernstein_fit(|_| 7.0, &[-2.0], &[5.0], 5, 1).unwrap();
        assert_relative_eq!(c.eval(&[1.3]).unwrap(), 7.0, epsilon = 1e-13);
        assert_relative_eq!(c.grad(&[1.3]).unwrap()[0], 0.0, epsilon = 1e-13);

        // Bi-affine targets are exact for the degree-1 tensor fit.
        let f2 = bernstein_fit(|z| z[0] * z[1], &[0.0, 0.0], &[1.0, 1.0], 1, 2).unwrap();
        for &(a, b) in &[(0.3, 0.8), (0.0, 1.0), (0.51, 0.49)] {
            assert_relative_eq!(f2.eval(&[a, b]).unwrap(), a * b, epsilon = 1e-14);
            let g = f2.grad(&[a, b]).unwrap();
            assert_relative_eq!(g[0], b, epsilon = 1e-13);
            assert_relative_eq!(g[1], a, epsilon = 1e-13);
        }
    }

    #[test]
    fn quadratic_errors_match_the_closed_form() {
        // The degree-m fit of z^2 is z^2 + z(1-z)/m, so the worst value error
        // is 1/(4m) at the midpoint and the worst slope error 1/m at the ends.
        for m in [1usize, 10] {
            let (val, grad) =
                uniform_errors(|z| z[0] * z[0], |z| vec![2.0 * z[0]], &[0.0], &[1.0], m, 1001)
                    .unwrap();
            assert_relative_eq!(val, 0.25 / m as f64, epsilon = 1e-9);
            assert_relative_eq!(grad, 1.0 / m as f64, epsilon = 1e-9);
        }
    }

    #[test]
    fn errors_decrease_with_degree_on_a_smooth_target() {
        use core::f64::consts::PI;
        let mut prev = (f64::INFINITY, f64::INFINITY);
        for m in [8usize, 16, 32, 64] {
            let errs = uniform_errors(
                |z| (PI * z[0]).sin(),
                |z| vec![PI * (PI * z[0]).cos()],
                &[0.0],
                &[1.0],
                m,
                2001,
            )
            .unwrap();
            assert!(errs.0 < prev.0, "value error at degree {m}: {} vs {}", errs.0, prev.0);
            assert!(errs.1 < prev.1, "gradient error at degree {m}: {} vs {}", errs.1, prev.1);
            prev = errs;
        }
    }

    #[test]
    fn values_stay_inside_the_sample_range_and_interpolate_corners() {
        let phi = |z: &[f64]| (3.0 * z[0]).sin() * (2.0 * z[1]).cos();
        let fit = bernstein_fit(phi, &[-1.0, 0.0], &[1.0, 2.0], 7, 2).unwrap();
        let (min, max) = fit
            .coeffs()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &c| (lo.min(c), hi.max(c)));
        for t in weyl_points(2, 500) {
            let z = [-1.0 + 2.0 * t[0], 2.0 * t[1]];
            let val = fit.eval(&z).unwrap();
            assert!(val >= min - 1e-12 && val <= max + 1e-12);
        }
        for z in [[-1.0, 0.0], [-1.0, 2.0], [1.0, 0.0], [1.0, 2.0]] {
            assert_relative_eq!(fit.eval(&z).unwrap(), phi(&z), epsilon = 1e-12);
        }
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        assert!(matches!(
            bernstein_fit(|z| z[0], &[0.0], &[1.0], 0, 1),
            Err(ErgoError::InvalidParameter { what: "bernstein degree", .. })
        ));
        assert!(bernstein_fit(|z| z[0], &[0.0; 5], &[1.0; 5], 2, 5).is_err());
        assert!(matches!(
            bernstein_fit(|z| z[0], &[1.0], &[0.0], 2, 1),
            Err(ErgoError::InvalidParameter { what: "bernstein box", .. })
        ));
        assert!(matches!(
            bernstein_fit(|z| z[0], &[0.0; 4], &[1.0; 4], 100, 4),
            Err(ErgoError::TooLarge { .. })
        ));
        assert!(matches!(
            bernstein_fit(|z| 1.0 / z[0], &[0.0], &[1.0], 2, 1),
            Err(ErgoError::InvalidParameter { what: "bernstein sample", .. })
        ));

        let fit = bernstein_fit(|z| z[0], &[0.0], &[1.0], 2, 1).unwrap();
        assert!(matches!(
            fit.eval(&[1.5]),
            Err(ErgoError::OutsideDomain { axis: 0, .. })
        ));
        assert!(matches!(fit.eval(&[0.1, 0.2]), Err(ErgoError::DimensionMismatch { .. })));

        // A wrong reference gradient is caught by the trust check.
        assert!(matches!(
            uniform_errors(|z| z[0] * z[0], |_z| vec![0.0], &[0.0], &[1.0], 4, 100),
            Err(ErgoError::InvalidParameter { what: "grad_phi", .. })
        ));
    }
}
