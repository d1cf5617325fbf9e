//! Graph relation network over `K` abstract nodes.
//!
//! One round maps node features `X[K×D]` to `(R ⊙ 𝕀(R > θ)) · X · W`, where
//! `R` is a pairwise relation of the current nodes, `θ` a threshold derived
//! from the mean relation value, and `W` a learnable `D×D` matrix.

use crate::error::{Error, Result};
use crate::ops;
use crate::sparse::CsrMatrix;
use crate::tape::{self, Tape, Var};
use crate::tensor::{ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RelationVariant {
    /// `r_ij = x_i·x_j / (‖x_i‖‖x_j‖)`.
    Cosine,
    /// `R = softmax_rows(X·Xᵀ)`.
    #[default]
    Softmax,
}

/// How the sparsification threshold is derived from a relation matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ThetaPolicy {
    /// `θ = c · v` with `v` the mean of all `K²` relation entries.
    MultipleOfMean(f64),
}

impl Default for ThetaPolicy {
    fn default() -> Self {
        ThetaPolicy::MultipleOfMean(0.25)
    }
}

impl ThetaPolicy {
    pub fn coefficient(&self) -> f64 {
        match *self {
            ThetaPolicy::MultipleOfMean(c) => c,
        }
    }

    /// Threshold for one `K×K` block of relation values.
    pub fn theta(&self, values: &[f64]) -> f64 {
        let (lo, hi) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        // rounding can push the summed mean outside [min, max]
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let mean = if lo <= hi { mean.clamp(lo, hi) } else { mean };
        self.coefficient() * mean
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GraphConfig {
    pub variant: RelationVariant,
    pub theta: ThetaPolicy,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            variant: RelationVariant::Softmax,
            theta: ThetaPolicy::default(),
        }
    }
}

/// `K×K` node affinities, optionally with the threshold mask applied to them.
///
/// `values` always holds the unmasked relation; when a mask is present,
/// `mask[i·K + j] == (values[i·K + j] > theta)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationMatrix {
    values: Tensor,
    variant: RelationVariant,
    mask: Option<Vec<bool>>,
    theta: Option<f64>,
}

impl RelationMatrix {
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn variant(&self) -> RelationVariant {
        self.variant
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    pub fn theta(&self) -> Option<f64> {
        self.theta
    }

    pub fn num_nodes(&self) -> usize {
        self.values.shape()[0]
    }

    /// Entries that survive the mask (all `K²` when unmasked).
    pub fn kept_edges(&self) -> usize {
        self.mask
            .as_ref()
            .map_or(self.values.numel(), |m| m.iter().filter(|&&b| b).count())
    }

    /// Relation with pruned entries set to exactly zero.
    pub fn masked_values(&self) -> Tensor {
        match &self.mask {
            None => self.values.clone(),
            Some(mask) => {
                let data = self
                    .values
                    .data()
                    .iter()
                    .zip(mask)
                    .map(|(&v, &m)| if m { v } else { 0.0 })
                    .collect();
                Tensor::from_parts(self.values.shape().to_vec(), data)
            }
        }
    }

    fn mask_or_full(&self) -> Vec<bool> {
        self.mask
            .clone()
            .unwrap_or_else(|| vec![true; self.values.numel()])
    }

    /// Compressed-row view of the kept entries.
    pub fn to_csr(&self) -> CsrMatrix {
        let k = self.num_nodes();
        CsrMatrix::from_masked(self.values.data(), &self.mask_or_full(), k, k)
    }
}

fn expect_nodes(op: &'static str, nodes: &Tensor) -> Result<(usize, usize)> {
    match *nodes.shape() {
        [k, d] => Ok((k, d)),
        _ => Err(Error::invalid(
            op,
            format!("expected [K×D] nodes, got {:?}", nodes.shape()),
        )),
    }
}

pub fn relation_cosine(nodes: &Tensor) -> Result<RelationMatrix> {
    let (k, d) = expect_nodes("relation_cosine", nodes)?;
    Ok(RelationMatrix {
        values: Tensor::from_parts(vec![k, k], tape::cosine_kernel(nodes.data(), k, d)),
        variant: RelationVariant::Cosine,
        mask: None,
        theta: None,
    })
}

pub fn relation_softmax(nodes: &Tensor) -> Result<RelationMatrix> {
    expect_nodes("relation_softmax", nodes)?;
    let scores = ops::matmul(nodes, &ops::transpose(nodes)?)?;
    Ok(RelationMatrix {
        values: ops::softmax_rows(&scores)?,
        variant: RelationVariant::Softmax,
        mask: None,
        theta: None,
    })
}

pub fn relation(nodes: &Tensor, variant: RelationVariant) -> Result<RelationMatrix> {
    match variant {
        RelationVariant::Cosine => relation_cosine(nodes),
        RelationVariant::Softmax => relation_softmax(nodes),
    }
}

pub fn make_theta(values: &Tensor, policy: ThetaPolicy) -> f64 {
    policy.theta(values.data())
}

/// Keeps `r_ij` where `r_ij > θ`. Applied to an already sparsified matrix,
/// the masks intersect, which makes the operation idempotent.
pub fn sparsify(rel: &RelationMatrix, theta: f64) -> RelationMatrix {
    let fresh = rel.values.data().iter().map(|&v| v > theta);
    let (mask, theta) = match (&rel.mask, rel.theta) {
        (Some(old), Some(prev)) => (
            fresh.zip(old).map(|(a, &b)| a && b).collect(),
            theta.max(prev),
        ),
        _ => (fresh.collect(), theta),
    };
    RelationMatrix {
        values: rel.values.clone(),
        variant: rel.variant,
        mask: Some(mask),
        theta: Some(theta),
    }
}

fn check_update(rel: &RelationMatrix, nodes: &Tensor) -> Result<(usize, usize)> {
    let (k, d) = expect_nodes("node_update", nodes)?;
    if rel.num_nodes() != k {
        return Err(Error::shape(
            "node_update",
            rel.values.shape(),
            nodes.shape(),
        ));
    }
    Ok((k, d))
}

/// `x_i ← Σ_j 𝕀(r_ij > θ) · r_ij · x_j`, visiting only kept edges.
pub fn node_update(rel: &RelationMatrix, nodes: &Tensor) -> Result<Tensor> {
    let (k, d) = check_update(rel, nodes)?;
    Ok(Tensor::from_parts(
        vec![k, d],
        rel.to_csr().matmul_dense(nodes.data(), d),
    ))
}

/// Reference path for [`node_update`]: dense product with the masked matrix.
pub fn node_update_dense(rel: &RelationMatrix, nodes: &Tensor) -> Result<Tensor> {
    check_update(rel, nodes)?;
    ops::matmul(&rel.masked_values(), nodes)
}

/// One learnable weighting matrix `W^(l)` of the graph convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GraphLayer {
    pub weight: ParamId,
    pub layer_index: usize,
}

impl GraphLayer {
    pub fn new(
        store: &mut ParamStore,
        name: impl Into<String>,
        weight: Tensor,
        layer_index: usize,
    ) -> Result<Self> {
        match *weight.shape() {
            [a, b] if a == b => {}
            _ => {
                return Err(Error::invalid(
                    "graph_layer",
                    format!("weight must be square, got {:?}", weight.shape()),
                ))
            }
        }
        Ok(Self {
            weight: store.add(name, weight)?,
            layer_index,
        })
    }

    pub fn dim(&self, store: &ParamStore) -> usize {
        store.tensor(self.weight).shape()[0]
    }
}

/// `X · W`.
pub fn graph_conv(nodes: &Tensor, layer: &GraphLayer, store: &ParamStore) -> Result<Tensor> {
    ops::matmul(nodes, store.tensor(layer.weight))
}

/// Applies `layers.len()` rounds of relation → sparsify → update → conv,
/// recomputing the relation from the current nodes each round.
pub fn run_graph(
    nodes: &Tensor,
    layers: &[GraphLayer],
    store: &ParamStore,
    config: &GraphConfig,
) -> Result<Tensor> {
    expect_nodes("run_graph", nodes)?;
    let mut tape = Tape::new();
    let x = tape.leaf(nodes.clone());
    let out = run_graph_var(&mut tape, store, x, layers, config)?;
    Ok(tape.value(out).clone())
}

/// Taped [`run_graph`]; accepts `[K×D]` or a batch of independent graphs `[B×K×D]`.
pub fn run_graph_var(
    tape: &mut Tape,
    store: &ParamStore,
    mut x: Var,
    layers: &[GraphLayer],
    config: &GraphConfig,
) -> Result<Var> {
    if layers.is_empty() {
        return Err(Error::invalid(
            "run_graph",
            "graph depth must be at least 1",
        ));
    }
    for layer in layers {
        x = graph_round(tape, store, x, layer, config)?;
    }
    Ok(x)
}

/// Taped relation for `[K×D]` or `[B×K×D]` nodes.
pub fn relation_var(tape: &mut Tape, x: Var, variant: RelationVariant) -> Result<Var> {
    match variant {
        RelationVariant::Cosine => tape.cosine_relation(x),
        RelationVariant::Softmax => {
            let xt = tape.transpose(x)?;
            let scores = match tape.shape(x).len() {
                2 => tape.matmul(x, xt)?,
                _ => tape.bmm(x, xt)?,
            };
            tape.softmax_rows(scores)
        }
    }
}

/// Threshold mask for every `K×K` block of a taped relation.
pub fn threshold_mask(rel: &Tensor, policy: ThetaPolicy) -> Vec<bool> {
    let k = *rel.shape().last().unwrap();
    rel.data()
        .chunks_exact(k * k)
        .flat_map(|block| {
            let theta = policy.theta(block);
            block.iter().map(move |&v| v > theta)
        })
        .collect()
}

fn graph_round(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    layer: &GraphLayer,
    config: &GraphConfig,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let d = *shape
        .last()
        .ok_or_else(|| Error::invalid("run_graph", "scalar nodes"))?;
    let rel = relation_var(tape, x, config.variant)?;
    let mask = threshold_mask(tape.value(rel), config.theta);
    let mask = tape.resolve_mask(mask);
    let updated = tape.masked_matmul(rel, x, mask)?;
    let w = tape.param(store, layer.weight);
    let wd = tape.shape(w).to_vec();
    if wd[0] != d {
        return Err(Error::shape("graph_conv", &shape, &wd));
    }
    if shape.len() == 2 {
        return tape.matmul(updated, w);
    }
    let rows = shape[..shape.len() - 1].iter().product::<usize>();
    let flat = tape.reshape(updated, [rows, d])?;
    let conv = tape.matmul(flat, w)?;
    let mut out = shape;
    *out.last_mut().unwrap() = wd[1];
    tape.reshape(conv, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 2], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn cosine_of_identical_and_orthogonal_rows() {
        let r = relation_cosine(&t([2, 3], &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0])).unwrap();
        assert!(r.values().data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let r = relation_cosine(&t([2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        assert_eq!(r.values().data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn cosine_zero_row_convention() {
        let r = relation_cosine(&t([3, 2], &[0.0, 0.0, 1.0, 2.0, -3.0, 1.0])).unwrap();
        let v = r.values();
        assert_eq!(v.at(&[0, 0]), 1.0);
        assert_eq!(v.at(&[0, 1]), 0.0);
        assert_eq!(v.at(&[2, 0]), 0.0);
    }

    #[test]
    fn softmax_relation_small_cases() {
        let r = relation_softmax(&t([1, 3], &[0.3, -2.0, 1.0])).unwrap();
        assert_eq!(r.values().data(), &[1.0]);
        let r = relation_softmax(&t([2, 2], &[0.4, -0.1, 0.4, -0.1])).unwrap();
        assert_eq!(r.values().data(), &[0.5; 4]);
    }

    #[test]
    fn theta_and_sparsify_worked_example() {
        let values = t([2, 2], &[1.0, 0.1, 0.1, 1.0]);
        assert!((make_theta(&values, ThetaPolicy::MultipleOfMean(1.0)) - 0.55).abs() < 1e-15);
        let theta = make_theta(&values, ThetaPolicy::default());
        assert!((theta - 0.1375).abs() < 1e-15);
        let rel = RelationMatrix {
            values,
            variant: RelationVariant::Cosine,
            mask: None,
            theta: None,
        };
        let s = sparsify(&rel, theta);
        assert_eq!(s.masked_values().data(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(s.kept_edges(), 2);
        assert_eq!(sparsify(&rel, -1.0).masked_values(), rel.values);
        assert!(sparsify(&rel, 1.0)
            .masked_values()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_matrix_keeps_all_edges_for_small_coefficients() {
        let values = Tensor::full([3, 3], 0.7);
        for c in [1.0, 0.5, 0.25, 0.0] {
            let theta = make_theta(&values, ThetaPolicy::MultipleOfMean(c));
            assert!(values.data().iter().all(|&v| theta <= v));
            let rel = RelationMatrix {
                values: values.clone(),
                variant: RelationVariant::Softmax,
                mask: None,
                theta: None,
            };
            if c < 1.0 {
                assert_eq!(sparsify(&rel, theta).kept_edges(), 9);
            }
        }
    }

    #[test]
    fn update_with_identity_and_zero_relation() {
        let nodes = Tensor::from_fn([3, 2], |i| i as f64 - 2.0);
        let ident = RelationMatrix {
            values: Tensor::eye(3),
            variant: RelationVariant::Softmax,
            mask: None,
            theta: None,
        };
        assert_eq!(node_update(&ident, &nodes).unwrap(), nodes);
        let zero = sparsify(&ident, 2.0);
        assert!(node_update(&zero, &nodes)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(node_update(&ident, &Tensor::zeros([2, 2])).is_err());
    }

    #[test]
    fn graph_conv_identity_and_zero_weights() {
        let mut store = ParamStore::new();
        let eye = GraphLayer::new(&mut store, "eye", Tensor::eye(2), 0).unwrap();
        let zero = GraphLayer::new(&mut store, "zero", Tensor::zeros([2, 2]), 0).unwrap();
        let nodes = Tensor::from_fn([3, 2], |i| i as f64 * 0.5);
        assert_eq!(graph_conv(&nodes, &eye, &store).unwrap(), nodes);
        assert!(graph_conv(&nodes, &zero, &store)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(GraphLayer::new(&mut store, "rect", Tensor::zeros([2, 3]), 0).is_err());
        assert!(graph_conv(&Tensor::zeros([3, 3]), &eye, &store).is_err());
    }

    #[test]
    fn run_graph_requires_layers() {
        let store = ParamStore::new();
        assert!(run_graph(&Tensor::ones([2, 2]), &[], &store, &GraphConfig::default()).is_err());
    }
}
