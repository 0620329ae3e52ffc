use alloc::string::String;
use core::fmt;

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, ErgoError>;

/// Errors reported by the toolkit.
///
/// Every fallible operation states its failure modes in terms of these
/// variants; none of them panic on bad numerical input.
#[derive(Debug, Clone, PartialEq)]
pub enum ErgoError {
    /// An input had the wrong dimension.
    DimensionMismatch {
        /// What was being checked.
        what: &'static str,
        /// Expected dimension.
        expected: usize,
        /// Actual dimension.
        got: usize,
    },
    /// A parameter was outside its admissible range.
    InvalidParameter {
        /// Which parameter.
        what: &'static str,
        /// Human-readable detail (offending value, admissible range).
        detail: String,
    },
    /// A simulated trajectory left the admissible region or became non-finite.
    Diverged {
        /// Time index at which divergence was detected.
        t: usize,
        /// State norm at detection (infinite if non-finite).
        norm: f64,
    },
    /// An iteration or series failed to converge within its budget.
    NotConverged {
        /// Which computation.
        what: &'static str,
        /// Iterations or terms used.
        iterations: usize,
        /// Last residual or term magnitude observed.
        last: f64,
    },
    /// The quadrature grid does not cover the essential support of the kernel.
    GridTooSmall {
        /// Stationary boundary leak measured before normalization.
        leak: f64,
    },
    /// The operation needs a transition density the model does not provide.
    MissingDensity,
    /// The operation needs a stationary vector that has not been computed.
    MissingStationary,
    /// Too few data points for a fit.
    TooFewPoints {
        /// Which computation.
        what: &'static str,
        /// Minimum number required.
        need: usize,
        /// Number supplied.
        got: usize,
    },
    /// A quantity that must be positive was not.
    NonPositive {
        /// Which quantity.
        what: &'static str,
        /// Offending value.
        value: f64,
    },
    /// An eigenvalue lies too close to the selection-disk boundary for a
    /// well-posed eigenprojection.
    BoundaryCluster {
        /// Distance from the eigenvalue to the disk boundary.
        distance: f64,
    },
    /// A linear-algebra computation was too ill-conditioned to certify.
    IllConditioned {
        /// Which computation.
        what: &'static str,
        /// Measured residual.
        residual: f64,
    },
    /// An evaluation point left the domain box.
    OutsideDomain {
        /// Axis on which the violation occurred.
        axis: usize,
        /// Offending coordinate.
        value: f64,
        /// Lower edge of the box on that axis.
        lo: f64,
        /// Upper edge of the box on that axis.
        hi: f64,
    },
    /// A nonlinear-generator integral failed its tail-refinement check.
    IntegralDiverged {
        /// Evaluation point, formatted.
        at: String,
    },
    /// A requested allocation would exceed the configured guard.
    TooLarge {
        /// Which computation.
        what: &'static str,
        /// Requested size.
        size: u128,
        /// Configured limit.
        limit: u128,
    },
}

impl fmt::Display for ErgoError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ErgoError::DimensionMismatch { what, expected, got } => {
                write!(f, "dimension mismatch for {what}: expected {expected}, got {got}")
            }
            ErgoError::InvalidParameter { what, detail } => {
                write!(f, "invalid parameter {what}: {detail}")
            }
            ErgoError::Diverged { t, norm } => {
                write!(f, "trajectory diverged at step {t} (state norm {norm:e})")
            }
            ErgoError::NotConverged { what, iterations, last } => {
                write!(f, "{what} did not converge within {iterations} iterations (last {last:e})")
            }
            ErgoError::GridTooSmall { leak } => {
                write!(f, "grid too small: stationary boundary leak {leak:e} exceeds tolerance")
            }
            ErgoError::MissingDensity => write!(f, "model does not provide a transition density"),
            ErgoError::MissingStationary => write!(f, "kernel has no stationary vector attached"),
            ErgoError::TooFewPoints { what, need, got } => {
                write!(f, "{what} needs at least {need} points, got {got}")
            }
            ErgoError::NonPositive { what, value } => {
                write!(f, "{what} must be positive, got {value:e}")
            }
            ErgoError::BoundaryCluster { distance } => {
                write!(f, "eigenvalue within {distance:e} of the selection-disk boundary")
            }
            ErgoError::IllConditioned { what, residual } => {
                write!(f, "{what} is too ill-conditioned (residual {residual:e})")
            }
            ErgoError::OutsideDomain { axis, value, lo, hi } => {
                write!(f, "coordinate {value} on axis {axis} lies outside [{lo}, {hi}]")
            }
            ErgoError::IntegralDiverged { at } => {
                write!(f, "generator integral failed its tail check at x = {at}")
            }
            ErgoError::TooLarge { what, size, limit } => {
                write!(f, "{what} would need {size} entries, exceeding the limit {limit}")
            }
        }
    }
}

impl core::error::Error for ErgoError {}
