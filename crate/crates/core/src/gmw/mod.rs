//! Graph-matching weighting: depth candidates are weighted by how well the
//! 2D edge that produced them matches its 3D counterpart in a learned
//! feature space.

pub mod cost;
pub mod graph;
pub mod model;
pub mod sinkhorn;
pub mod weights;

pub use cost::{cost_diagonal, cost_matrix, cost_matrix_backward};
pub use graph::{build_graphs, build_graphs_for_view, EdgeGraph, GraphInputs};
pub use model::{EncoderSizes, GmwConfig, GmwModel, InstanceOutput, LossWeights, PreparedInstance, RunOptions, RunOutput};
pub use sinkhorn::{primal_objective, sinkhorn, sinkhorn_log, Assignment, SinkhornConfig};
pub use weights::{matching_losses, weights_from_assignment, weights_from_cost, MatchingLosses, WeightConfig, WeightRule};
