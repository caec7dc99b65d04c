//! Gibbs samplers: normal factors, √n-orthonormal factors, and the
//! column-magnitude (Q·diag(r)) comparison model.

pub mod ghosh_dunson;
pub mod normal;
pub mod orthonormal;

/// Which conditional updates a sweep performs. Everything is on by default;
/// switching blocks off holds those parameters fixed (used for exactness
/// checks on sub-models).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanPlan {
    pub loadings: bool,
    pub factors: bool,
    pub allocation: bool,
    pub sparsity: bool,
    pub variances: bool,
}

impl Default for ScanPlan {
    fn default() -> Self {
        Self {
            loadings: true,
            factors: true,
            allocation: true,
            sparsity: true,
            variances: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SweepOptions {
    /// Append the K scaling group moves (normal factors only).
    pub group_moves: bool,
    /// Visit loadings in a random order instead of j outer, k inner.
    pub random_scan: bool,
    pub plan: ScanPlan,
}
