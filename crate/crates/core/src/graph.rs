//! Position and pose graphs: nodes are states, edges are factors.
//!
//! Nodes marked fixed (known positions, the frozen estimate before a sliding
//! window) take part in factors but are excluded from the optimized state.

use crate::factors::{
    FactorError, PoseSmoothnessFactor, RangeFactor, RelRotationFactor, RelTransformFactor,
    RelTranslationFactor, SmoothnessFactor,
};
use crate::lie::{Pose, Rotation};
use nalgebra::{DVector, Vector3};
use thiserror::Error;

pub type NodeId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("node {0} already present")]
    DuplicateNode(NodeId),
    #[error("edge references missing node {0}")]
    DanglingReference(NodeId),
    #[error("factor not usable here: {0}")]
    IncompatibleFactor(&'static str),
    #[error("smoothness edge {from} -> {to} does not join consecutive nodes")]
    NonConsecutiveSmoothness { from: NodeId, to: NodeId },
    #[error("state has {found} blocks, graph has {expected} free nodes")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("node {0} is not a free node")]
    NotFree(NodeId),
    #[error("non-finite node state")]
    NonFinite,
    #[error(transparent)]
    Factor(#[from] FactorError),
}

/// A per-node state: a translation or a full pose.
pub trait NodeState: Clone + std::fmt::Debug + PartialEq {
    /// Scalar dimension of the tangent block.
    const DIM: usize;
    const IS_POSE: bool;
    fn translation(&self) -> Vector3<f64>;
    /// Translation states are viewed as poses with identity rotation.
    fn as_pose(&self) -> Pose;
    fn is_finite(&self) -> bool;
}

impl NodeState for Vector3<f64> {
    const DIM: usize = 3;
    const IS_POSE: bool = false;

    fn translation(&self) -> Vector3<f64> {
        *self
    }

    fn as_pose(&self) -> Pose {
        Pose::from_translation(*self)
    }

    fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

impl NodeState for Pose {
    const DIM: usize = 6;
    const IS_POSE: bool = true;

    fn translation(&self) -> Vector3<f64> {
        self.translation
    }

    fn as_pose(&self) -> Pose {
        *self
    }

    fn is_finite(&self) -> bool {
        self.translation
            .iter()
            .chain(self.rotation.matrix().iter())
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Factor {
    Range(RangeFactor),
    Smoothness(SmoothnessFactor),
    RelTranslation(RelTranslationFactor),
    RelRotation(RelRotationFactor),
    RelTransform(RelTransformFactor),
    PoseSmoothness(PoseSmoothnessFactor),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FactorKind {
    Range,
    Smoothness,
    RelTranslation,
    RelRotation,
    RelTransform,
    PoseSmoothness,
}

impl Factor {
    pub fn kind(&self) -> FactorKind {
        match self {
            Factor::Range(_) => FactorKind::Range,
            Factor::Smoothness(_) => FactorKind::Smoothness,
            Factor::RelTranslation(_) => FactorKind::RelTranslation,
            Factor::RelRotation(_) => FactorKind::RelRotation,
            Factor::RelTransform(_) => FactorKind::RelTransform,
            Factor::PoseSmoothness(_) => FactorKind::PoseSmoothness,
        }
    }

    fn is_unary(&self) -> bool {
        matches!(self, Factor::Range(_))
    }

    fn needs_pose(&self) -> bool {
        matches!(
            self,
            Factor::RelRotation(_) | Factor::RelTransform(_) | Factor::PoseSmoothness(_)
        )
    }

    fn is_smoothness(&self) -> bool {
        matches!(self, Factor::Smoothness(_) | Factor::PoseSmoothness(_))
    }

    /// Cost of this factor; `b` is the second node for binary factors.
    pub fn cost<S: NodeState>(&self, a: &S, b: Option<&S>) -> Result<f64, FactorError> {
        let second = || {
            b.ok_or(FactorError::InvalidParameter(
                "binary factor needs two nodes",
            ))
        };
        match self {
            Factor::Range(f) => f.cost(&a.translation()),
            Factor::Smoothness(f) => Ok(f.cost(&a.translation(), &second()?.translation())),
            Factor::RelTranslation(f) => Ok(f.cost(&a.translation(), &second()?.translation())),
            Factor::RelRotation(f) => {
                let (ra, rb): (Rotation, Rotation) =
                    (a.as_pose().rotation, second()?.as_pose().rotation);
                Ok(f.cost(&ra, &rb))
            }
            Factor::RelTransform(f) => Ok(f.cost(&a.as_pose(), &second()?.as_pose())),
            Factor::PoseSmoothness(f) => Ok(f.cost(&a.as_pose(), &second()?.as_pose())),
        }
    }
}

/// Nodes touched by an edge. Smoothness edges are `Binary(current, previous)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeNodes {
    Unary(NodeId),
    Binary(NodeId, NodeId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub nodes: EdgeNodes,
    pub factor: Factor,
}

#[derive(Debug, Clone, PartialEq)]
struct Node<S> {
    id: NodeId,
    state: S,
    fixed: bool,
    slot: Option<usize>,
}

/// Where a node's state lives when evaluating against a `StateVector`.
#[derive(Debug, Clone, Copy)]
pub enum Slot<'a, S> {
    Free(usize),
    Fixed(&'a S),
}

/// States of the free nodes, in node order.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector<S> {
    blocks: Vec<S>,
}

impl<S: NodeState> StateVector<S> {
    pub fn new(blocks: Vec<S>) -> Self {
        Self { blocks }
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Scalar dimension (3 per translation, 6 per pose).
    pub fn dim(&self) -> usize {
        S::DIM * self.blocks.len()
    }

    pub fn block(&self, k: usize) -> Option<&S> {
        self.blocks.get(k)
    }

    pub fn set_block(&mut self, k: usize, s: S) -> Option<()> {
        let b = self.blocks.get_mut(k)?;
        *b = s;
        Some(())
    }

    pub fn blocks(&self) -> &[S] {
        &self.blocks
    }

    pub fn into_blocks(self) -> Vec<S> {
        self.blocks
    }

    pub fn last(&self) -> Option<&S> {
        self.blocks.last()
    }
}

impl StateVector<Vector3<f64>> {
    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_iterator(
            3 * self.blocks.len(),
            self.blocks.iter().flat_map(|b| b.iter().copied()),
        )
    }

    pub fn from_dvector(v: &DVector<f64>) -> Self {
        let blocks = (0..v.len() / 3)
            .map(|k| v.fixed_rows::<3>(3 * k).into_owned())
            .collect();
        Self { blocks }
    }
}

/// Result of a cost evaluation; factors hit at a singular point are skipped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostEval {
    pub cost: f64,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorGraph<S> {
    nodes: Vec<Node<S>>,
    edges: Vec<Edge>,
}

impl<S: NodeState> Default for FactorGraph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: NodeState> FactorGraph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            edges: Vec::new(),
        }
    }

    pub fn add_node(&mut self, id: NodeId, initial: S) -> Result<(), GraphError> {
        self.insert(id, initial, false)
    }

    /// A node whose state is known and never optimized.
    pub fn add_fixed_node(&mut self, id: NodeId, state: S) -> Result<(), GraphError> {
        self.insert(id, state, true)
    }

    fn insert(&mut self, id: NodeId, state: S, fixed: bool) -> Result<(), GraphError> {
        if !state.is_finite() {
            return Err(GraphError::NonFinite);
        }
        let pos = match self.nodes.binary_search_by_key(&id, |n| n.id) {
            Ok(_) => return Err(GraphError::DuplicateNode(id)),
            Err(pos) => pos,
        };
        self.nodes.insert(
            pos,
            Node {
                id,
                state,
                fixed,
                slot: None,
            },
        );
        let mut next = 0;
        for n in &mut self.nodes {
            n.slot = if n.fixed {
                None
            } else {
                next += 1;
                Some(next - 1)
            };
        }
        Ok(())
    }

    pub fn add_factor(&mut self, nodes: EdgeNodes, factor: Factor) -> Result<(), GraphError> {
        if factor.needs_pose() && !S::IS_POSE {
            return Err(GraphError::IncompatibleFactor(
                "rotation factor on a translation graph",
            ));
        }
        match nodes {
            EdgeNodes::Unary(a) => {
                if !factor.is_unary() {
                    return Err(GraphError::IncompatibleFactor("binary factor on one node"));
                }
                self.position(a)?;
            }
            EdgeNodes::Binary(a, b) => {
                if factor.is_unary() {
                    return Err(GraphError::IncompatibleFactor("unary factor on two nodes"));
                }
                if a == b {
                    return Err(GraphError::IncompatibleFactor(
                        "edge joins a node to itself",
                    ));
                }
                let pa = self.position(a)?;
                let pb = self.position(b)?;
                if factor.is_smoothness() && pb + 1 != pa {
                    return Err(GraphError::NonConsecutiveSmoothness { from: b, to: a });
                }
            }
        }
        self.edges.push(Edge { nodes, factor });
        Ok(())
    }

    fn position(&self, id: NodeId) -> Result<usize, GraphError> {
        self.nodes
            .binary_search_by_key(&id, |n| n.id)
            .map_err(|_| GraphError::DanglingReference(id))
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn free_count(&self) -> usize {
        self.nodes.iter().filter(|n| !n.fixed).count()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Node ids in time order.
    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.iter().map(|n| n.id)
    }

    pub fn is_fixed(&self, id: NodeId) -> Result<bool, GraphError> {
        Ok(self.nodes[self.position(id)?].fixed)
    }

    /// Current stored states of the free nodes.
    pub fn initial_state(&self) -> StateVector<S> {
        StateVector::new(
            self.nodes
                .iter()
                .filter(|n| !n.fixed)
                .map(|n| n.state.clone())
                .collect(),
        )
    }

    pub fn slot(&self, id: NodeId) -> Result<Slot<'_, S>, GraphError> {
        let n = &self.nodes[self.position(id)?];
        Ok(match n.slot {
            Some(k) => Slot::Free(k),
            None => Slot::Fixed(&n.state),
        })
    }

    /// State of node `id` under `x`; fixed nodes report their stored state.
    pub fn extract_state<'a>(
        &'a self,
        x: &'a StateVector<S>,
        id: NodeId,
    ) -> Result<&'a S, GraphError> {
        self.check_state(x)?;
        match self.slot(id)? {
            Slot::Free(k) => Ok(&x.blocks[k]),
            Slot::Fixed(s) => Ok(s),
        }
    }

    /// Errors unless `x` has one block per free node.
    pub fn check_state(&self, x: &StateVector<S>) -> Result<(), GraphError> {
        let expected = self.free_count();
        if x.len() != expected {
            return Err(GraphError::DimensionMismatch {
                expected,
                found: x.len(),
            });
        }
        Ok(())
    }

    /// Slots of the nodes an edge touches.
    pub fn edge_slots(
        &self,
        edge: &Edge,
    ) -> Result<(Slot<'_, S>, Option<Slot<'_, S>>), GraphError> {
        Ok(match edge.nodes {
            EdgeNodes::Unary(a) => (self.slot(a)?, None),
            EdgeNodes::Binary(a, b) => (self.slot(a)?, Some(self.slot(b)?)),
        })
    }

    pub fn cost_detailed(&self, x: &StateVector<S>) -> Result<CostEval, GraphError> {
        self.check_state(x)?;
        let state = |s: Slot<'_, S>| -> S {
            match s {
                Slot::Free(k) => x.blocks[k].clone(),
                Slot::Fixed(v) => v.clone(),
            }
        };
        let mut eval = CostEval {
            cost: 0.0,
            skipped: 0,
        };
        for edge in &self.edges {
            let (a, b) = self.edge_slots(edge)?;
            let sa = state(a);
            let sb = b.map(state);
            match edge.factor.cost(&sa, sb.as_ref()) {
                Ok(c) => eval.cost += c,
                Err(FactorError::SingularGeometry { .. }) => eval.skipped += 1,
                Err(e) => return Err(e.into()),
            }
        }
        Ok(eval)
    }

    /// Sum of all factor costs.
    pub fn total_cost(&self, x: &StateVector<S>) -> Result<f64, GraphError> {
        Ok(self.cost_detailed(x)?.cost)
    }

    /// True when every binary edge joins free nodes adjacent in the state order.
    pub fn is_chain(&self) -> bool {
        self.edges.iter().all(|e| match e.nodes {
            EdgeNodes::Unary(_) => true,
            EdgeNodes::Binary(a, b) => match (self.slot(a), self.slot(b)) {
                (Ok(Slot::Free(i)), Ok(Slot::Free(j))) => i.abs_diff(j) <= 1,
                _ => true,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factors::RobustLoss;
    use crate::lie::exp_so3;
    use approx::assert_relative_eq;
    use nalgebra::Matrix3;

    fn range(d: f64, a: Vector3<f64>) -> Factor {
        Factor::Range(RangeFactor::new(d, a, 0.9, RobustLoss::default()).unwrap())
    }

    fn smooth() -> Factor {
        Factor::Smoothness(SmoothnessFactor::new(0.03, 1.0, 1.0, RobustLoss::default()).unwrap())
    }

    #[test]
    fn add_nodes() {
        let mut g = FactorGraph::<Vector3<f64>>::new();
        g.add_node(0, Vector3::zeros()).unwrap();
        assert_eq!(g.node_count(), 1);
        assert_eq!(
            g.add_node(0, Vector3::zeros()),
            Err(GraphError::DuplicateNode(0))
        );
        for k in 1..10 {
            g.add_node(k, Vector3::zeros()).unwrap();
        }
        assert_eq!(g.initial_state().dim(), 30);
        let mut p = FactorGraph::<Pose>::new();
        p.add_node(0, Pose::identity()).unwrap();
        assert_eq!(p.initial_state().dim(), 6);
    }

    #[test]
    fn nodes_kept_in_time_order() {
        let mut g = FactorGraph::<Vector3<f64>>::new();
        g.add_node(5, Vector3::x()).unwrap();
        g.add_node(2, Vector3::y()).unwrap();
        g.add_fixed_node(1, Vector3::z()).unwrap();
        assert_eq!(g.node_ids().collect::<Vec<_>>(), vec![1, 2, 5]);
        let x = g.initial_state();
        assert_eq!(x.blocks(), &[Vector3::y(), Vector3::x()]);
        assert_eq!(g.extract_state(&x, 1).unwrap(), &Vector3::z());
    }

    #[test]
    fn add_factor_checks() {
        let mut g = FactorGraph::<Vector3<f64>>::new();
        g.add_node(0, Vector3::zeros()).unwrap();
        g.add_node(1, Vector3::zeros()).unwrap();
        g.add_node(2, Vector3::zeros()).unwrap();
        g.add_factor(EdgeNodes::Unary(0), range(1.0, Vector3::x()))
            .unwrap();
        assert_eq!(g.edge_count(), 1);
        assert_eq!(
            g.add_factor(EdgeNodes::Unary(7), range(1.0, Vector3::x())),
            Err(GraphError::DanglingReference(7))
        );
        assert_eq!(
            g.add_factor(EdgeNodes::Binary(2, 0), smooth()),
            Err(GraphError::NonConsecutiveSmoothness { from: 0, to: 2 })
        );
        assert!(g
            .add_factor(EdgeNodes::Binary(1, 0), range(1.0, Vector3::x()))
            .is_err());
        assert!(g.add_factor(EdgeNodes::Unary(1), smooth()).is_err());
        let rot = Factor::RelRotation(
            RelRotationFactor::new(
                Rotation::identity(),
                Matrix3::identity(),
                RobustLoss::default(),
            )
            .unwrap(),
        );
        assert!(matches!(
            g.add_factor(EdgeNodes::Binary(1, 0), rot),
            Err(GraphError::IncompatibleFactor(_))
        ));
        g.add_factor(EdgeNodes::Binary(1, 0), smooth()).unwrap();
        assert_eq!(g.edge_count(), 2);
    }

    #[test]
    fn window_carries_two_n_factors() {
        let n = 10;
        let mut g = FactorGraph::<Vector3<f64>>::new();
        g.add_fixed_node(0, Vector3::zeros()).unwrap();
        for k in 1..=n {
            g.add_node(k, Vector3::zeros()).unwrap();
            g.add_factor(EdgeNodes::Unary(k), range(1.0, Vector3::x()))
                .unwrap();
            g.add_factor(EdgeNodes::Binary(k, k - 1), smooth()).unwrap();
        }
        assert_eq!(g.edge_count(), 2 * n);
        assert_eq!(g.free_count(), n);
        assert!(g.is_chain());
    }

    #[test]
    fn cost_examples() {
        let mut g = FactorGraph::<Vector3<f64>>::new();
        g.add_node(0, Vector3::new(3.0, 4.0, 0.0)).unwrap();
        assert_eq!(g.total_cost(&g.initial_state()).unwrap(), 0.0);
        g.add_factor(EdgeNodes::Unary(0), range(5.0, Vector3::zeros()))
            .unwrap();
        assert_eq!(g.total_cost(&g.initial_state()).unwrap(), 0.0);
        let bad = StateVector::new(vec![]);
        assert!(matches!(
            g.total_cost(&bad),
            Err(GraphError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn toy_cost_matches_hand_sum() {
        let loss = RobustLoss::new(0.5).unwrap();
        let a = Vector3::new(2.0, -1.0, 0.5);
        let rf = RangeFactor::new(1.3, a, 0.8, loss).unwrap();
        let sf = SmoothnessFactor::new(0.05, 1.0, 0.2, loss).unwrap();
        let tf =
            RelTranslationFactor::new(Vector3::new(0.1, 0.2, 0.3), Matrix3::identity() * 0.5, loss)
                .unwrap();
        let t = [
            Vector3::new(0.1, 0.2, 0.3),
            Vector3::new(0.4, -0.2, 0.1),
            Vector3::new(1.0, 1.0, 1.0),
        ];
        let mut g = FactorGraph::<Vector3<f64>>::new();
        for (k, tk) in t.iter().enumerate() {
            g.add_node(k, *tk).unwrap();
        }
        g.add_factor(EdgeNodes::Unary(0), Factor::Range(rf.clone()))
            .unwrap();
        g.add_factor(EdgeNodes::Unary(2), Factor::Range(rf.clone()))
            .unwrap();
        g.add_factor(EdgeNodes::Binary(1, 0), Factor::Smoothness(sf.clone()))
            .unwrap();
        g.add_factor(EdgeNodes::Binary(2, 1), Factor::Smoothness(sf.clone()))
            .unwrap();
        g.add_factor(EdgeNodes::Binary(0, 2), Factor::RelTranslation(tf.clone()))
            .unwrap();
        let hand = rf.cost(&t[0]).unwrap()
            + rf.cost(&t[2]).unwrap()
            + sf.cost(&t[1], &t[0])
            + sf.cost(&t[2], &t[1])
            + tf.cost(&t[0], &t[2]);
        assert_relative_eq!(
            g.total_cost(&g.initial_state()).unwrap(),
            hand,
            epsilon = 1e-14
        );
        assert!(!g.is_chain());
    }

    #[test]
    fn singular_factor_skipped() {
        let mut g = FactorGraph::<Vector3<f64>>::new();
        g.add_node(0, Vector3::zeros()).unwrap();
        g.add_factor(EdgeNodes::Unary(0), range(1.0, Vector3::zeros()))
            .unwrap();
        g.add_factor(EdgeNodes::Unary(0), range(2.0, Vector3::x()))
            .unwrap();
        let eval = g.cost_detailed(&g.initial_state()).unwrap();
        assert_eq!(eval.skipped, 1);
        assert!(eval.cost > 0.0);
    }

    #[test]
    fn extract_state_blocks() {
        let mut g = FactorGraph::<Vector3<f64>>::new();
        for k in 0..4 {
            g.add_node(k, Vector3::repeat(k as f64)).unwrap();
        }
        let mut x = g.initial_state();
        assert_eq!(g.extract_state(&x, 0).unwrap(), &Vector3::zeros());
        assert_eq!(g.extract_state(&x, 3).unwrap(), &Vector3::repeat(3.0));
        x.set_block(2, Vector3::new(9.0, 8.0, 7.0)).unwrap();
        assert_eq!(
            g.extract_state(&x, 2).unwrap(),
            &Vector3::new(9.0, 8.0, 7.0)
        );
        assert!(g.extract_state(&x, 9).is_err());
        assert_eq!(StateVector::from_dvector(&x.to_dvector()), x);
    }

    #[test]
    fn pose_graph_costs() {
        let loss = RobustLoss::default();
        let mut g = FactorGraph::<Pose>::new();
        let p0 = Pose::new(
            exp_so3(&Vector3::new(0.1, 0.2, 0.3)),
            Vector3::new(1.0, 0.0, 0.0),
        );
        let p1 = Pose::new(
            exp_so3(&Vector3::new(-0.1, 0.0, 0.3)),
            Vector3::new(1.0, 1.0, 0.0),
        );
        g.add_node(0, p0).unwrap();
        g.add_node(1, p1).unwrap();
        let q = RelTransformFactor::new(p0 * p1, nalgebra::Matrix6::identity(), loss).unwrap();
        g.add_factor(EdgeNodes::Binary(0, 1), Factor::RelTransform(q))
            .unwrap();
        assert!(g.total_cost(&g.initial_state()).unwrap() < 1e-18);
        g.add_factor(EdgeNodes::Unary(1), range(1.0, Vector3::new(1.0, 0.0, 0.0)))
            .unwrap();
        assert!(g.total_cost(&g.initial_state()).unwrap() < 1e-18);
    }
}
