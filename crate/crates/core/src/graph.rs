//! Symmetric-normalized bipartite graphs, LightGCN-style propagation and
//! bundle average pooling.

use std::sync::Arc;

use rand::Rng;

use crate::dataset::{EntityCounts, RelationTable};
use crate::error::{dim_err, Result};
use crate::matrix::{Csr, Matrix};
use crate::scalar::Scalar;
use crate::tape::{SparseOp, Tape, Var};

/// How multi-hop outputs are combined into the final representation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerCombine {
    /// Output of the last hop only.
    LastLayer,
    /// Mean of the layer-0 input and every hop output.
    MeanWithLayer0,
}

/// Bipartite graph with edge weights `1/sqrt(deg(l) * deg(r))`.
#[derive(Clone, Debug)]
pub struct BipartiteGraph<T> {
    left_count: usize,
    right_count: usize,
    left_degrees: Vec<usize>,
    right_degrees: Vec<usize>,
    /// `left_count x right_count` weights; its transpose propagates the other way.
    adjacency: Arc<SparseOp<T>>,
    reverse: Arc<SparseOp<T>>,
}

impl<T: Scalar> BipartiteGraph<T> {
    pub fn from_pairs(left_count: usize, right_count: usize, pairs: &[(usize, usize)]) -> Self {
        let mut left_degrees = vec![0; left_count];
        let mut right_degrees = vec![0; right_count];
        for &(l, r) in pairs {
            left_degrees[l] += 1;
            right_degrees[r] += 1;
        }
        let triplets: Vec<_> = pairs
            .iter()
            .map(|&(l, r)| {
                let w = T::one() / T::lit((left_degrees[l] * right_degrees[r]) as f64).sqrt();
                (l, r, w)
            })
            .collect();
        let adjacency = SparseOp::new(Csr::from_triplets(left_count, right_count, &triplets));
        Self {
            left_count,
            right_count,
            left_degrees,
            right_degrees,
            reverse: SparseOp::new(adjacency.transpose.clone()),
            adjacency,
        }
    }

    pub fn left_count(&self) -> usize {
        self.left_count
    }

    pub fn right_count(&self) -> usize {
        self.right_count
    }

    pub fn left_degrees(&self) -> &[usize] {
        &self.left_degrees
    }

    pub fn right_degrees(&self) -> &[usize] {
        &self.right_degrees
    }

    pub fn num_edges(&self) -> usize {
        self.adjacency.forward.nnz()
    }

    /// Stored weight of `(l, r)`, or zero when absent.
    pub fn weight(&self, l: usize, r: usize) -> T {
        self.adjacency
            .forward
            .row(l)
            .find(|&(c, _)| c == r)
            .map_or(T::zero(), |(_, w)| w)
    }

    pub fn adjacency(&self) -> &Arc<SparseOp<T>> {
        &self.adjacency
    }

    /// Copy with each edge dropped independently with probability `p`.
    /// Surviving weights and all degrees are left as they were.
    pub fn with_edge_dropout<R: Rng>(&self, p: f64, rng: &mut R) -> Self {
        if p <= 0.0 {
            return self.clone();
        }
        let kept = self.adjacency.forward.filter(|_, _| rng.random::<f64>() >= p);
        let adjacency = SparseOp::new(kept);
        Self {
            reverse: SparseOp::new(adjacency.transpose.clone()),
            adjacency,
            ..self.clone()
        }
    }

    /// Left-side outputs `out[l] = Σ_r w(l,r)·right[r]`.
    pub fn propagate(&self, right: &Matrix<T>) -> Result<Matrix<T>> {
        check_rows(right, self.right_count)?;
        self.adjacency.forward.mul_dense(right)
    }

    /// Right-side outputs `out[r] = Σ_l w(l,r)·left[l]`.
    pub fn propagate_to_right(&self, left: &Matrix<T>) -> Result<Matrix<T>> {
        check_rows(left, self.left_count)?;
        self.adjacency.transpose.mul_dense(left)
    }

    /// Alternating `layers`-hop propagation from both sides.
    pub fn propagate_layers(
        &self,
        left0: &Matrix<T>,
        right0: &Matrix<T>,
        layers: usize,
        combine: LayerCombine,
    ) -> Result<(Matrix<T>, Matrix<T>)> {
        check_rows(left0, self.left_count)?;
        check_rows(right0, self.right_count)?;
        let (mut l, mut r) = (left0.clone(), right0.clone());
        let (mut l_acc, mut r_acc) = (left0.clone(), right0.clone());
        for _ in 0..layers.max(1) {
            let nl = self.propagate(&r)?;
            let nr = self.propagate_to_right(&l)?;
            l = nl;
            r = nr;
            l_acc.add_assign(&l);
            r_acc.add_assign(&r);
        }
        Ok(match combine {
            LayerCombine::LastLayer => (l, r),
            LayerCombine::MeanWithLayer0 => {
                let c = T::one() / T::lit((layers.max(1) + 1) as f64);
                (l_acc.scaled(c), r_acc.scaled(c))
            }
        })
    }

    /// Differentiable form of [`Self::propagate_layers`].
    pub fn propagate_layers_on(
        &self,
        tape: &mut Tape<T>,
        left0: Var,
        right0: Var,
        layers: usize,
        combine: LayerCombine,
    ) -> Result<(Var, Var)> {
        check_rows(tape.value(left0), self.left_count)?;
        check_rows(tape.value(right0), self.right_count)?;
        let (mut l, mut r) = (left0, right0);
        let (mut ls, mut rs) = (vec![left0], vec![right0]);
        for _ in 0..layers.max(1) {
            let nl = tape.spmm(&self.adjacency, r)?;
            let nr = tape.spmm(&self.reverse, l)?;
            l = nl;
            r = nr;
            ls.push(l);
            rs.push(r);
        }
        Ok(match combine {
            LayerCombine::LastLayer => (l, r),
            LayerCombine::MeanWithLayer0 => {
                let c = T::one() / T::lit(ls.len() as f64);
                let l_sum = tape.add_all(&ls)?;
                let r_sum = tape.add_all(&rs)?;
                (tape.scale(l_sum, c), tape.scale(r_sum, c))
            }
        })
    }

    /// Row-normalized operator averaging each left node's right neighbours.
    pub fn mean_pooling(&self) -> Arc<SparseOp<T>> {
        let triplets: Vec<_> = self
            .adjacency
            .forward
            .triplets()
            .into_iter()
            .map(|(l, r, _)| (l, r, T::one() / T::lit(self.left_degrees[l] as f64)))
            .collect();
        SparseOp::new(Csr::from_triplets(self.left_count, self.right_count, &triplets))
    }
}

fn check_rows<T: Scalar>(m: &Matrix<T>, rows: usize) -> Result<()> {
    if m.rows() != rows {
        return Err(dim_err(format!("{rows} rows"), format!("{} rows", m.rows())));
    }
    Ok(())
}

/// Graph of a relation table; left/right sizes come from the relation kind.
pub fn build_graph<T: Scalar>(table: &RelationTable, counts: &EntityCounts) -> BipartiteGraph<T> {
    let (l, r) = table.kind.bounds(counts);
    BipartiteGraph::from_pairs(l, r, &table.pairs)
}

/// Bundle item-view representation: mean of each bundle's item embeddings,
/// zero for bundles with no items.
pub fn pool_bundle_items<T: Scalar>(bi: &BipartiteGraph<T>, item_emb: &Matrix<T>) -> Result<Matrix<T>> {
    check_rows(item_emb, bi.right_count())?;
    bi.mean_pooling().forward.mul_dense(item_emb)
}
