//! Follower digraph, leader pinning, and the per-leader `Φ_r` matrices.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

/// Time-invariant communication graph of `N` followers and `M` leaders.
///
/// `adjacency[(i, j)]` is follower `i`'s weight on follower `j`; `pinning[r][i]`
/// is follower `i`'s gain on leader `r` (the diagonal of `G_r`).
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    adjacency: DMatrix<f64>,
    pinning: Vec<DVector<f64>>,
}

impl Topology {
    pub fn new(adjacency: DMatrix<f64>, pinning: Vec<DVector<f64>>) -> Result<Self> {
        let n = adjacency.nrows();
        if n == 0 || !adjacency.is_square() {
            return Err(Error::Topology(format!(
                "adjacency must be a non-empty square matrix, got {}x{}",
                adjacency.nrows(),
                adjacency.ncols()
            )));
        }
        if pinning.is_empty() {
            return Err(Error::Topology("at least one leader is required".into()));
        }
        for i in 0..n {
            if adjacency[(i, i)] != 0.0 {
                return Err(Error::Topology(format!(
                    "self-loop on follower {} (a_ii = {})",
                    i + 1,
                    adjacency[(i, i)]
                )));
            }
        }
        if adjacency.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Topology(
                "adjacency weights must be finite and >= 0".into(),
            ));
        }
        for (r, g) in pinning.iter().enumerate() {
            if g.len() != n {
                return Err(Error::Topology(format!(
                    "pinning vector of leader {} has length {}, expected {n}",
                    r + 1,
                    g.len()
                )));
            }
            if g.iter().any(|w| !w.is_finite() || *w < 0.0) {
                return Err(Error::Topology(format!(
                    "pinning gains of leader {} must be finite and >= 0",
                    r + 1
                )));
            }
        }
        Ok(Self { adjacency, pinning })
    }

    /// Builds from an `N × M` pinning table whose column `r` is `diag(G_r)`.
    pub fn from_pinning_table(adjacency: DMatrix<f64>, table: &DMatrix<f64>) -> Result<Self> {
        let pinning = (0..table.ncols())
            .map(|r| table.column(r).into_owned())
            .collect();
        Self::new(adjacency, pinning)
    }

    pub fn n_followers(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn n_leaders(&self) -> usize {
        self.pinning.len()
    }

    pub fn adjacency(&self) -> &DMatrix<f64> {
        &self.adjacency
    }

    /// `a_ij`
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.adjacency[(i, j)]
    }

    /// `g_ir`
    pub fn pin(&self, i: usize, r: usize) -> f64 {
        self.pinning[r][i]
    }

    pub fn pinning_matrix(&self, r: usize) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.pinning[r])
    }

    /// `L = D_in − A`, with `D_in` the diagonal of adjacency row sums.
    pub fn laplacian(&self) -> DMatrix<f64> {
        let n = self.n_followers();
        let mut l = -self.adjacency.clone();
        for i in 0..n {
            l[(i, i)] = self.adjacency.row(i).sum();
        }
        l
    }
}

/// Followers with no directed path from any leader (0-based, ascending).
///
/// Information flows from a leader to the followers it pins, and from
/// follower `j` to follower `i` whenever `a_ij > 0`.
pub fn check_reachability(topology: &Topology) -> BTreeSet<usize> {
    let n = topology.n_followers();
    let mut seen = vec![false; n];
    let mut queue = VecDeque::new();
    for (i, flag) in seen.iter_mut().enumerate() {
        if (0..topology.n_leaders()).any(|r| topology.pin(i, r) > 0.0) {
            *flag = true;
            queue.push_back(i);
        }
    }
    while let Some(j) = queue.pop_front() {
        for (i, flag) in seen.iter_mut().enumerate() {
            if !*flag && topology.weight(i, j) > 0.0 {
                *flag = true;
                queue.push_back(i);
            }
        }
    }
    (0..n).filter(|&i| !seen[i]).collect()
}

/// The `Φ_r = L/M + G_r` family together with derived containment weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiFamily {
    pub phi: Vec<DMatrix<f64>>,
    pub phi_sum: DMatrix<f64>,
    pub laplacian: DMatrix<f64>,
    /// Row `i`, column `r`: the weight of leader `r` in follower `i`'s
    /// containment target, i.e. row sums of `(ΣΦ)⁻¹ Φ_r`. Rows sum to one.
    pub hull_weights: DMatrix<f64>,
    pub min_singular_value: f64,
}

impl PhiFamily {
    pub fn n_followers(&self) -> usize {
        self.phi_sum.nrows()
    }

    pub fn n_leaders(&self) -> usize {
        self.phi.len()
    }

    /// Per-follower containment targets `Σ_r w_ir x_r`.
    pub fn hull_targets(&self, leader_x: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let dim = leader_x.first().map_or(0, |v| v.len());
        (0..self.n_followers())
            .map(|i| {
                leader_x
                    .iter()
                    .enumerate()
                    .fold(DVector::zeros(dim), |acc, (r, x)| {
                        acc + x * self.hull_weights[(i, r)]
                    })
            })
            .collect()
    }
}

pub fn build_phi_family(topology: &Topology) -> Result<PhiFamily> {
    let unreachable = check_reachability(topology);
    if !unreachable.is_empty() {
        return Err(Error::UnreachableFollowers(
            unreachable.into_iter().map(|i| i + 1).collect(),
        ));
    }
    let n = topology.n_followers();
    let m = topology.n_leaders();
    let laplacian = topology.laplacian();
    let scaled = &laplacian / m as f64;
    let phi: Vec<DMatrix<f64>> = (0..m)
        .map(|r| &scaled + topology.pinning_matrix(r))
        .collect();
    let phi_sum = phi.iter().fold(DMatrix::zeros(n, n), |acc, p| acc + p);

    let min_singular_value = linalg::min_singular_value(&phi_sum);
    if min_singular_value.is_nan() || min_singular_value <= 0.0 {
        return Err(Error::SingularPhiSum(min_singular_value));
    }
    let lu = phi_sum.clone().lu();
    let mut hull_weights = DMatrix::zeros(n, m);
    for (r, p) in phi.iter().enumerate() {
        let row_sums = DVector::from_fn(n, |i, _| p.row(i).sum());
        let w = lu
            .solve(&row_sums)
            .ok_or(Error::SingularPhiSum(min_singular_value))?;
        hull_weights.set_column(r, &w);
    }
    Ok(PhiFamily {
        phi,
        phi_sum,
        laplacian,
        hull_weights,
        min_singular_value,
    })
}
