//! Classifiers as ordered layer sequences: shape inference, forward
//! evaluation with activation capture, block decomposition and the teacher zoo.

pub mod checkpoint;
pub mod graph;
pub mod layers;
pub mod zoo;

pub use graph::{
    infer_shapes, renumber, Activation, Block, BlockKind, LayerKind, LayerSpec, Merge, MergeOp, Mode, ModelGraph,
    Sequential, Tape,
};
pub use layers::{AvgPool2d, BatchNorm2d, Conv2d, ConvTranspose2d, Linear, MaxPool2d, Param};
pub use zoo::{build_teacher, build_teacher_with_width, ArchId};
