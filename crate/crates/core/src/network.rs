//! Graph topology, incidence algebra and the orthogonal projection onto
//! the image of the incidence map.
//!
//! The network couples nodal injections `f` and edge flows `q` through the
//! Kirchhoff balance `A q + f = 0`, where `A` is the node-edge incidence
//! matrix (+1 at an edge's tail, -1 at its head). Instances are small
//! (at most a few dozen nodes), so everything is dense.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Directed graph with precomputed connected-component labels.
///
/// Node and edge indices are 0-based; conversion from 1-based file formats
/// happens at the I/O boundary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphTopology {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    component_labels: Vec<usize>,
    num_components: usize,
}

impl GraphTopology {
    /// Builds a topology from 0-based `(tail, head)` edge pairs.
    ///
    /// Rejects self-loops and out-of-range endpoints, reporting the
    /// offending edge index (0-based).
    pub fn new(num_nodes: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        if num_nodes == 0 {
            return Err(Error::InvalidParameter(
                "topology needs at least one node".into(),
            ));
        }
        for (e, &(tail, head)) in edges.iter().enumerate() {
            if tail >= num_nodes {
                return Err(Error::EdgeEndpointOutOfRange {
                    edge: e,
                    endpoint: tail,
                    num_nodes,
                });
            }
            if head >= num_nodes {
                return Err(Error::EdgeEndpointOutOfRange {
                    edge: e,
                    endpoint: head,
                    num_nodes,
                });
            }
            if tail == head {
                return Err(Error::SelfLoop { edge: e, node: tail });
            }
        }
        let (component_labels, num_components) = connected_components(num_nodes, &edges);
        Ok(Self {
            num_nodes,
            edges,
            component_labels,
            num_components,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn component_labels(&self) -> &[usize] {
        &self.component_labels
    }

    pub fn num_components(&self) -> usize {
        self.num_components
    }

    /// Nodes grouped by connected component.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_components];
        for (i, &c) in self.component_labels.iter().enumerate() {
            groups[c].push(i);
        }
        groups
    }
}

/// Union-find component labelling; labels are consecutive from 0.
fn connected_components(num_nodes: usize, edges: &[(usize, usize)]) -> (Vec<usize>, usize) {
    let mut parent: Vec<usize> = (0..num_nodes).collect();
    fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for &(a, b) in edges {
        let ra = find(&mut parent, a);
        let rb = find(&mut parent, b);
        if ra != rb {
            parent[ra] = rb;
        }
    }
    let mut labels = vec![usize::MAX; num_nodes];
    let mut next = 0;
    let mut label_of_root = std::collections::HashMap::new();
    for i in 0..num_nodes {
        let r = find(&mut parent, i);
        let l = *label_of_root.entry(r).or_insert_with(|| {
            let l = next;
            next += 1;
            l
        });
        labels[i] = l;
    }
    (labels, next)
}

/// Dense node-edge incidence matrix with entries in {-1, 0, +1}.
#[derive(Debug, Clone)]
pub struct IncidenceMatrix {
    entries: DMatrix<f64>,
}

impl IncidenceMatrix {
    pub fn num_nodes(&self) -> usize {
        self.entries.nrows()
    }

    pub fn num_edges(&self) -> usize {
        self.entries.ncols()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn entry(&self, node: usize, edge: usize) -> f64 {
        self.entries[(node, edge)]
    }

    /// Computes `A q` for a single-stage edge-flow vector.
    pub fn apply(&self, q: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_nodes()];
        for e in 0..self.num_edges() {
            for i in 0..self.num_nodes() {
                let a = self.entries[(i, e)];
                if a != 0.0 {
                    out[i] += a * q[e];
                }
            }
        }
        out
    }

    /// Computes `A^T p` for a single-stage node vector.
    pub fn apply_transpose(&self, p: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_edges()];
        for e in 0..self.num_edges() {
            for i in 0..self.num_nodes() {
                let a = self.entries[(i, e)];
                if a != 0.0 {
                    out[e] += a * p[i];
                }
            }
        }
        out
    }
}

/// Builds the incidence matrix of a validated topology: entry (i, e) is +1
/// iff node i is the tail of edge e, -1 iff it is its head.
pub fn build_incidence(topology: &GraphTopology) -> IncidenceMatrix {
    let mut entries = DMatrix::zeros(topology.num_nodes(), topology.num_edges());
    for (e, &(tail, head)) in topology.edges().iter().enumerate() {
        entries[(tail, e)] = 1.0;
        entries[(head, e)] = -1.0;
    }
    IncidenceMatrix { entries }
}

/// Real vector indexed by (time step, node) or (time step, edge).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowVector {
    pub horizon: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl FlowVector {
    pub fn zeros(horizon: usize, width: usize) -> Self {
        Self {
            horizon,
            width,
            values: vec![0.0; horizon * width],
        }
    }

    pub fn from_values(horizon: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != horizon * width {
            return Err(Error::DimensionMismatch {
                expected: horizon * width,
                got: values.len(),
                context: "flow vector values".into(),
            });
        }
        Ok(Self {
            horizon,
            width,
            values,
        })
    }

    pub fn at(&self, t: usize, i: usize) -> f64 {
        self.values[t * self.width + i]
    }

    pub fn at_mut(&mut self, t: usize, i: usize) -> &mut f64 {
        &mut self.values[t * self.width + i]
    }

    /// Slice holding the stage-`t` entries.
    pub fn stage(&self, t: usize) -> &[f64] {
        &self.values[t * self.width..(t + 1) * self.width]
    }

    pub fn stage_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.values[t * self.width..(t + 1) * self.width]
    }

    /// Per-node column over time (length `horizon`).
    pub fn column(&self, i: usize) -> Vec<f64> {
        (0..self.horizon).map(|t| self.at(t, i)).collect()
    }

    pub fn dot(&self, other: &FlowVector) -> f64 {
        self.values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm_inf(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Returns `A q_t + f_t`; the zero vector iff the flows balance at stage `t`.
pub fn kirchhoff_residual(
    incidence: &IncidenceMatrix,
    q: &FlowVector,
    f: &FlowVector,
    t: usize,
) -> Result<Vec<f64>> {
    if q.width != incidence.num_edges() {
        return Err(Error::DimensionMismatch {
            expected: incidence.num_edges(),
            got: q.width,
            context: "edge flow width".into(),
        });
    }
    if f.width != incidence.num_nodes() {
        return Err(Error::DimensionMismatch {
            expected: incidence.num_nodes(),
            got: f.width,
            context: "node flow width".into(),
        });
    }
    if q.horizon != f.horizon {
        return Err(Error::DimensionMismatch {
            expected: q.horizon,
            got: f.horizon,
            context: "flow horizons".into(),
        });
    }
    let mut out = incidence.apply(q.stage(t));
    for (o, fv) in out.iter_mut().zip(f.stage(t)) {
        *o += fv;
    }
    Ok(out)
}

/// Orthogonal projection of a node-indexed vector onto the per-stage image
/// of the incidence map.
///
/// For each stage and each connected component the image of `A` is exactly
/// the zero-sum subspace, so the projection subtracts the component mean.
/// Idempotent; the test suite cross-checks the subspace identification
/// against a least-squares solve of `A q = -r'`.
pub fn project_onto_image(r: &FlowVector, topology: &GraphTopology) -> Result<FlowVector> {
    if r.width != topology.num_nodes() {
        return Err(Error::DimensionMismatch {
            expected: topology.num_nodes(),
            got: r.width,
            context: "resource width".into(),
        });
    }
    let components = topology.components();
    let mut out = r.clone();
    for t in 0..r.horizon {
        let stage = out.stage_mut(t);
        for comp in &components {
            let mean: f64 = comp.iter().map(|&i| stage[i]).sum::<f64>() / comp.len() as f64;
            for &i in comp {
                stage[i] -= mean;
            }
        }
    }
    Ok(out)
}
