//! Undirected communication graphs: incidence matrix, Laplacian, reduced Laplacian
//! and the coupling matrix used by the constant-metric synchronizer.
//!
//! Node indices are 1-based at the API boundary (matching configuration files) and
//! 0-based internally. Node 1 is always the reference node eliminated by
//! [`reduced_laplacian`] and [`coupling_matrix`].

use std::collections::{HashSet, VecDeque};

use nalgebra::DMatrix;
use rand::Rng;
use thiserror::Error;

use crate::linalg::{eigenvalues, lambda_max, sym_eigenvalues};
use crate::scalar::{lit, max, Real};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("graph needs at least one node")]
    Empty,
    #[error("edge {edge} ({i}, {j}) is a self-loop")]
    SelfLoop { edge: usize, i: usize, j: usize },
    #[error("edge {edge} ({i}, {j}) references a node outside 1..={nodes}")]
    OutOfRange { edge: usize, i: usize, j: usize, nodes: usize },
    #[error("edge {edge} ({i}, {j}) duplicates an earlier edge")]
    Duplicate { edge: usize, i: usize, j: usize },
    #[error("operation needs at least two nodes, graph has {0}")]
    TooSmall(usize),
    #[error("graph is disconnected")]
    Disconnected,
    #[error("no c1 in [2^-40, 1] makes A(c1) + A(c1)ᵀ negative definite")]
    CouplingSearchExhausted,
}

/// Undirected simple graph with a fixed orientation per edge.
#[derive(Debug, Clone, PartialEq)]
pub struct CommGraph {
    node_count: usize,
    /// 0-based `(positive end, negative end)` pairs, in input order.
    edges: Vec<(usize, usize)>,
    incidence: DMatrix<i64>,
    laplacian: DMatrix<i64>,
}

impl CommGraph {
    /// Builds the graph from 1-based edges `(i, j)`; `i` is the positive end.
    pub fn new(node_count: usize, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        if node_count == 0 {
            return Err(GraphError::Empty);
        }
        let mut seen = HashSet::new();
        let mut oriented = Vec::with_capacity(edges.len());
        for (k, &(i, j)) in edges.iter().enumerate() {
            let edge = k + 1;
            if i == 0 || j == 0 || i > node_count || j > node_count {
                return Err(GraphError::OutOfRange { edge, i, j, nodes: node_count });
            }
            if i == j {
                return Err(GraphError::SelfLoop { edge, i, j });
            }
            if !seen.insert((i.min(j), i.max(j))) {
                return Err(GraphError::Duplicate { edge, i, j });
            }
            oriented.push((i - 1, j - 1));
        }
        let mut incidence = DMatrix::<i64>::zeros(node_count, oriented.len());
        for (k, &(i, j)) in oriented.iter().enumerate() {
            incidence[(i, k)] = 1;
            incidence[(j, k)] = -1;
        }
        let laplacian = &incidence * incidence.transpose();
        Ok(Self { node_count, edges: oriented, incidence, laplacian })
    }

    pub fn path(n: usize) -> Self {
        let edges: Vec<_> = (1..n).map(|i| (i, i + 1)).collect();
        Self::new(n, &edges).expect("path graph is valid")
    }

    /// Cycle on `n ≥ 3` nodes; smaller `n` degenerates to the path.
    pub fn ring(n: usize) -> Self {
        let mut edges: Vec<_> = (1..n).map(|i| (i, i + 1)).collect();
        if n >= 3 {
            edges.push((n, 1));
        }
        Self::new(n, &edges).expect("ring graph is valid")
    }

    /// Star centred on node 1.
    pub fn star(n: usize) -> Self {
        let edges: Vec<_> = (2..=n).map(|j| (1, j)).collect();
        Self::new(n, &edges).expect("star graph is valid")
    }

    pub fn complete(n: usize) -> Self {
        let mut edges = Vec::new();
        for i in 1..=n {
            for j in (i + 1)..=n {
                edges.push((i, j));
            }
        }
        Self::new(n, &edges).expect("complete graph is valid")
    }

    /// Random connected graph: a random spanning tree plus each remaining pair with
    /// probability `extra_edge_probability`.
    pub fn random_connected<R: Rng + ?Sized>(n: usize, extra_edge_probability: f64, rng: &mut R) -> Self {
        let mut order: Vec<usize> = (1..=n).collect();
        for k in (1..n).rev() {
            let swap = rng.random_range(0..=k);
            order.swap(k, swap);
        }
        let mut edges = Vec::new();
        let mut present = HashSet::new();
        for k in 1..n {
            let parent = order[rng.random_range(0..k)];
            let child = order[k];
            edges.push((parent, child));
            present.insert((parent.min(child), parent.max(child)));
        }
        for i in 1..=n {
            for j in (i + 1)..=n {
                if !present.contains(&(i, j)) && rng.random_bool(extra_edge_probability) {
                    edges.push((i, j));
                }
            }
        }
        Self::new(n, &edges).expect("generated edges are valid")
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Edges as 1-based `(positive end, negative end)` pairs.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.edges.iter().map(|&(i, j)| (i + 1, j + 1)).collect()
    }

    pub fn incidence(&self) -> &DMatrix<i64> {
        &self.incidence
    }

    pub fn laplacian(&self) -> &DMatrix<i64> {
        &self.laplacian
    }

    pub fn laplacian_as<T: Real>(&self) -> DMatrix<T> {
        self.laplacian.map(|v| lit::<T>(v as f64))
    }

    /// True when agents `i` and `j` (0-based) communicate.
    pub fn adjacent(&self, i: usize, j: usize) -> bool {
        i != j && self.laplacian[(i, j)] != 0
    }

    /// 0-based indices `j` with `L_ij ≠ 0`, including `i` itself when it has neighbours.
    pub fn laplacian_support(&self, i: usize) -> Vec<usize> {
        (0..self.node_count).filter(|&j| self.laplacian[(i, j)] != 0).collect()
    }

    /// Breadth-first reachability from node 1.
    pub fn is_connected(&self) -> bool {
        let mut visited = vec![false; self.node_count];
        let mut queue = VecDeque::from([0usize]);
        visited[0] = true;
        let mut reached = 1;
        while let Some(i) = queue.pop_front() {
            for (j, seen) in visited.iter_mut().enumerate() {
                if !*seen && self.adjacent(i, j) {
                    *seen = true;
                    reached += 1;
                    queue.push_back(j);
                }
            }
        }
        reached == self.node_count
    }

    /// Tolerance below which a Laplacian eigenvalue counts as zero.
    pub fn zero_tolerance<T: Real>(&self) -> T {
        lit::<T>(1e-9 * self.node_count as f64)
    }
}

/// Spectrum of `L`, ascending.
pub fn laplacian_spectrum<T: Real>(g: &CommGraph) -> Vec<T> {
    sym_eigenvalues(&g.laplacian_as::<T>())
}

/// Nonzero eigenvalues of `L` (those above [`CommGraph::zero_tolerance`]), ascending.
pub fn nonzero_laplacian_spectrum<T: Real>(g: &CommGraph) -> Vec<T> {
    let tol = g.zero_tolerance::<T>();
    laplacian_spectrum(g).into_iter().filter(|&v| v > tol).collect()
}

/// Algebraic connectivity (second-smallest Laplacian eigenvalue); zero for `N = 1`.
pub fn algebraic_connectivity<T: Real>(g: &CommGraph) -> T {
    laplacian_spectrum::<T>(g).get(1).copied().unwrap_or_else(T::zero)
}

/// `L̄ = L[2:N, 2:N] − 𝟙 L[1, 2:N]`.
pub fn reduced_laplacian<T: Real>(g: &CommGraph) -> Result<DMatrix<T>, GraphError> {
    offset_block(g, T::one()).map(|m| -m)
}

/// Eigenvalues of [`reduced_laplacian`], sorted by real part.
pub fn reduced_laplacian_spectrum<T: Real>(g: &CommGraph) -> Result<Vec<nalgebra::Complex<T>>, GraphError> {
    Ok(eigenvalues(&reduced_laplacian::<T>(g)?))
}

/// Returns `−(L[2:N,2:N] − c 𝟙 L[1,2:N])`.
fn offset_block<T: Real>(g: &CommGraph, c: T) -> Result<DMatrix<T>, GraphError> {
    let n = g.node_count();
    if n < 2 {
        return Err(GraphError::TooSmall(n));
    }
    let l = g.laplacian_as::<T>();
    let k = n - 1;
    Ok(DMatrix::from_fn(k, k, |r, s| -(l[(r + 1, s + 1)] - c * l[(0, s + 1)])))
}

/// `A(c₁)` together with its negative-definiteness margin.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingMatrix<T: Real> {
    pub c1: T,
    pub matrix: DMatrix<T>,
    /// Largest `μ ≥ 0` with `A + Aᵀ ≤ −μ I`.
    pub mu: T,
}

/// Builds `A(c₁) = −[L[2:N,2:N] − c₁ 𝟙 L[1,2:N]]` and its margin.
pub fn coupling_matrix<T: Real>(g: &CommGraph, c1: T) -> Result<CouplingMatrix<T>, GraphError> {
    let matrix = offset_block(g, c1)?;
    let sym = &matrix + matrix.transpose();
    let mu = max(T::zero(), -lambda_max(&sym));
    Ok(CouplingMatrix { c1, matrix, mu })
}

/// Halving search for `c₁ ∈ (0, 1]` with `A(c₁) + A(c₁)ᵀ` negative definite.
pub fn find_c1<T: Real>(g: &CommGraph) -> Result<CouplingMatrix<T>, GraphError> {
    if g.node_count() < 2 {
        return Err(GraphError::TooSmall(g.node_count()));
    }
    if !g.is_connected() {
        return Err(GraphError::Disconnected);
    }
    let floor = lit::<T>(2f64.powi(-40));
    let tol = g.zero_tolerance::<T>();
    let half = lit::<T>(0.5);
    let mut c1 = T::one();
    while c1 >= floor {
        let candidate = coupling_matrix(g, c1)?;
        if candidate.mu > tol {
            return Ok(candidate);
        }
        c1 *= half;
    }
    Err(GraphError::CouplingSearchExhausted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn p3() -> CommGraph {
        CommGraph::new(3, &[(1, 2), (2, 3)]).unwrap()
    }

    #[test]
    fn single_edge_incidence_and_laplacian() {
        let g = CommGraph::new(2, &[(1, 2)]).unwrap();
        assert_eq!(g.incidence(), &DMatrix::from_row_slice(2, 1, &[1, -1]));
        assert_eq!(g.laplacian(), &DMatrix::from_row_slice(2, 2, &[1, -1, -1, 1]));
    }

    #[test]
    fn path_laplacian() {
        assert_eq!(p3().laplacian(), &DMatrix::from_row_slice(3, 3, &[1, -1, 0, -1, 2, -1, 0, -1, 1]));
    }

    #[test]
    fn ring_spectrum() {
        let ev = laplacian_spectrum::<f64>(&CommGraph::ring(3));
        assert_abs_diff_eq!(ev[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ev[1], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ev[2], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn incidence_columns_follow_input_order() {
        let g = CommGraph::new(3, &[(3, 1), (2, 3)]).unwrap();
        assert_eq!(g.incidence(), &DMatrix::from_row_slice(3, 2, &[-1, 0, 0, 1, 1, -1]));
        assert_eq!(g.edges(), vec![(3, 1), (2, 3)]);
    }

    #[test]
    fn rejects_malformed_edges() {
        assert_eq!(CommGraph::new(3, &[(2, 2)]), Err(GraphError::SelfLoop { edge: 1, i: 2, j: 2 }));
        assert_eq!(CommGraph::new(3, &[(1, 4)]), Err(GraphError::OutOfRange { edge: 1, i: 1, j: 4, nodes: 3 }));
        assert_eq!(CommGraph::new(3, &[(0, 1)]), Err(GraphError::OutOfRange { edge: 1, i: 0, j: 1, nodes: 3 }));
        assert_eq!(CommGraph::new(3, &[(1, 2), (2, 1)]), Err(GraphError::Duplicate { edge: 2, i: 2, j: 1 }));
        assert_eq!(CommGraph::new(0, &[]), Err(GraphError::Empty));
    }

    #[test]
    fn connectivity() {
        assert!(p3().is_connected());
        assert!(!CommGraph::new(4, &[(1, 2), (3, 4)]).unwrap().is_connected());
        assert!(CommGraph::new(1, &[]).unwrap().is_connected());
    }

    #[test]
    fn reduced_laplacian_of_path() {
        let lbar = reduced_laplacian::<f64>(&p3()).unwrap();
        assert_eq!(lbar, DMatrix::from_row_slice(2, 2, &[3.0, -1.0, 0.0, 1.0]));
        let ev = reduced_laplacian_spectrum::<f64>(&p3()).unwrap();
        assert_abs_diff_eq!(ev[0].re, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ev[1].re, 3.0, epsilon = 1e-12);
    }

    #[test]
    fn reduced_laplacian_of_single_edge() {
        let g = CommGraph::path(2);
        assert_eq!(reduced_laplacian::<f64>(&g).unwrap(), DMatrix::from_element(1, 1, 2.0));
        assert_eq!(reduced_laplacian::<f64>(&CommGraph::path(1)), Err(GraphError::TooSmall(1)));
    }

    #[test]
    fn coupling_matrix_of_path() {
        let a = coupling_matrix(&p3(), 1.0).unwrap();
        let sym = &a.matrix + a.matrix.transpose();
        assert_eq!(sym, DMatrix::from_row_slice(2, 2, &[-6.0, 1.0, 1.0, -2.0]));
        assert_abs_diff_eq!(a.mu, 4.0 - 5f64.sqrt(), epsilon = 1e-12);

        let small = coupling_matrix(&p3(), 1e-12).unwrap();
        assert_abs_diff_eq!(small.mu, 3.0 - 5f64.sqrt(), epsilon = 1e-9);
    }

    #[test]
    fn coupling_matrix_of_disconnected_graph_has_no_margin() {
        let g = CommGraph::new(4, &[(1, 2), (3, 4)]).unwrap();
        for c1 in [1.0, 0.5, 1e-3] {
            assert_abs_diff_eq!(coupling_matrix(&g, c1).unwrap().mu, 0.0, epsilon = 1e-12);
        }
        assert_eq!(find_c1::<f64>(&g), Err(GraphError::Disconnected));
    }

    #[test]
    fn find_c1_examples() {
        let a = find_c1::<f64>(&p3()).unwrap();
        assert_eq!(a.c1, 1.0);
        assert_abs_diff_eq!(a.mu, 4.0 - 5f64.sqrt(), epsilon = 1e-12);

        let ring = find_c1::<f64>(&CommGraph::ring(3)).unwrap();
        assert_eq!(ring.c1, 1.0);
        assert_abs_diff_eq!(ring.mu, 6.0, epsilon = 1e-12);

        let star = find_c1::<f64>(&CommGraph::star(5)).unwrap();
        assert!(star.c1 > 0.0 && star.c1 <= 1.0);
        assert!(star.mu > 0.0);
    }

    #[test]
    fn star_coupling_regression() {
        // Star centred on the reference node: L[2:N,2:N] = I, L[1,2:N] = −𝟙ᵀ, so
        // A(c) = −I − c 𝟙𝟙ᵀ and A + Aᵀ has eigenvalues −2 and −2 − 2c(N−1).
        let star = find_c1::<f64>(&CommGraph::star(5)).unwrap();
        assert_eq!(star.c1, 1.0);
        assert_abs_diff_eq!(star.mu, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn laplacian_rows_sum_to_zero() {
        let g = CommGraph::complete(6);
        for row in g.laplacian().row_iter() {
            assert_eq!(row.sum(), 0);
        }
    }

    #[test]
    fn single_precision_spectrum() {
        let ev = laplacian_spectrum::<f32>(&CommGraph::ring(3));
        assert!((ev[2] - 3.0).abs() < 1e-5);
    }
}
