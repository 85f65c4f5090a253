//! A small CPU tensor engine: rank-5 tensors, the layers a cascaded 3D
//! U-Net needs with hand-written backward passes, and Adam.

pub mod adam;
pub mod graph;
pub mod ops;
pub mod param;
pub mod tensor;

pub use adam::{adam_step, AdamState};
pub use graph::{ForwardPass, GraphBuilder, Layer, ModelGraph, Node, NodeId};
pub use param::{ParamBlock, ParamKind, ParamSet, ParamSpec};
pub use tensor::{Real, Shape5, Tensor5};
