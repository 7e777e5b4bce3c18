//! LATTE: layer-stacked attention embeddings for attributed heterogeneous networks.

// negated comparisons reject NaN along with out-of-range values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod hetgraph;
pub mod interpret;
pub mod model;
pub mod objectives;
pub mod relalgebra;
pub mod sampler;
pub mod tensor;
pub mod trainer;
