//! Angular-margin softmax losses with attribute-derived, learned class-pair margins.

pub mod attributes;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod losses;
pub mod margin_net;
pub mod model;
pub mod numerics;
pub mod train;

pub use attributes::{attribute_discrepancy, AttributeTable};
pub use error::{Error, Result};
pub use losses::{LossKind, LossOutput};
pub use margin_net::{MarginMatrix, MarginNet};
pub use model::{Model, ModelConfig};
pub use numerics::Matrix;
