//! Desk-scale teacher architectures.
//!
//! Both models downsample by 4 in the stem, by 8 after the second stage and by
//! 16 after the third, so a `3 x 224 x 224` input reaches `28 x 28` after the
//! second stage, the placement the bottleneck decoder restores.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Block, BlockKind, LayerKind, LayerSpec, Merge, MergeOp, ModelGraph};
use super::layers::{AvgPool2d, BatchNorm2d, Conv2d, Linear, MaxPool2d};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchId {
    SmallResnet,
    SmallDensenet,
}

impl ArchId {
    pub fn as_str(&self) -> &'static str {
        match self {
            ArchId::SmallResnet => "small_resnet",
            ArchId::SmallDensenet => "small_densenet",
        }
    }

    /// Number of top-level teacher layers up to and including the second stage.
    pub fn default_l_ed(&self) -> usize {
        8
    }

    pub fn default_width(&self) -> usize {
        match self {
            ArchId::SmallResnet => 16,
            ArchId::SmallDensenet => 8,
        }
    }
}

impl fmt::Display for ArchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small_resnet" => Ok(ArchId::SmallResnet),
            "small_densenet" => Ok(ArchId::SmallDensenet),
            other => Err(Error::UnknownArchitecture(other.to_string())),
        }
    }
}

fn spec<T>(kind: LayerKind<T>) -> LayerSpec<T> {
    LayerSpec { id: 0, kind }
}

fn conv<T: Scalar>(cin: usize, cout: usize, k: usize, s: usize, p: usize, rng: &mut ChaCha8Rng) -> LayerSpec<T> {
    spec(LayerKind::Conv(Conv2d::new(cin, cout, k, s, p, false, rng)))
}

fn bn<T: Scalar>(c: usize) -> LayerSpec<T> {
    spec(LayerKind::BatchNorm(BatchNorm2d::new(c)))
}

fn relu<T>() -> LayerSpec<T> {
    spec(LayerKind::Relu)
}

fn numbered<T>(mut layers: Vec<LayerSpec<T>>) -> Vec<LayerSpec<T>> {
    super::graph::renumber(&mut layers);
    layers
}

/// Basic two-conv residual block with a projection shortcut when the shape changes.
pub fn residual_block<T: Scalar>(cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> LayerSpec<T> {
    let projection = if stride != 1 || cin != cout {
        numbered(vec![conv(cin, cout, 1, stride, 0, rng), bn(cout)])
    } else {
        Vec::new()
    };
    let layers = numbered(vec![
        spec(LayerKind::Branch),
        conv(cin, cout, 3, stride, 1, rng),
        bn(cout),
        relu(),
        conv(cout, cout, 3, 1, 1, rng),
        bn(cout),
        spec(LayerKind::Merge(Merge { op: MergeOp::Add, projection })),
        relu(),
    ]);
    spec(LayerKind::Block(Block { kind: BlockKind::Residual, layers }))
}

/// Densely connected block: every layer's output is concatenated onto its input.
pub fn dense_block<T: Scalar>(cin: usize, growth: usize, depth: usize, rng: &mut ChaCha8Rng) -> (LayerSpec<T>, usize) {
    let mut layers = Vec::new();
    let mut c = cin;
    for _ in 0..depth {
        layers.push(spec(LayerKind::Branch));
        layers.push(bn(c));
        layers.push(relu());
        layers.push(conv(c, growth, 3, 1, 1, rng));
        layers.push(spec(LayerKind::Merge(Merge { op: MergeOp::Concat, projection: Vec::new() })));
        c += growth;
    }
    (spec(LayerKind::Block(Block { kind: BlockKind::Dense, layers: numbered(layers) })), c)
}

pub fn transition_block<T: Scalar>(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> LayerSpec<T> {
    let layers = numbered(vec![
        bn(cin),
        relu(),
        conv(cin, cout, 1, 1, 0, rng),
        spec(LayerKind::AvgPool(AvgPool2d { kernel: 2, stride: 2 })),
    ]);
    spec(LayerKind::Block(Block { kind: BlockKind::Transition, layers }))
}

fn stem<T: Scalar>(width: usize, rng: &mut ChaCha8Rng) -> Vec<LayerSpec<T>> {
    vec![
        conv(3, width, 3, 2, 1, rng),
        bn(width),
        relu(),
        spec(LayerKind::Pool(MaxPool2d { kernel: 3, stride: 2, padding: 1 })),
    ]
}

/// Builds a freshly initialized teacher with the architecture's default width.
pub fn build_teacher<T: Scalar>(arch: ArchId, input_shape: [usize; 3], num_classes: usize, seed: u64) -> Result<ModelGraph<T>> {
    build_teacher_with_width(arch, input_shape, num_classes, arch.default_width(), seed)
}

pub fn build_teacher_with_width<T: Scalar>(
    arch: ArchId,
    input_shape: [usize; 3],
    num_classes: usize,
    width: usize,
    seed: u64,
) -> Result<ModelGraph<T>> {
    let [c, h, w] = input_shape;
    if c != 3 {
        return Err(Error::Shape(format!("teachers take 3-channel images, got {c}")));
    }
    if h != w || h % 16 != 0 || h < 32 {
        return Err(Error::Shape(format!("teachers take square inputs with side a multiple of 16 (>= 32), got {h}x{w}")));
    }
    if num_classes == 0 || width < 2 {
        return Err(Error::Shape("num_classes and width must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let final_side = h / 16;
    let stem_width = match arch {
        ArchId::SmallResnet => width,
        ArchId::SmallDensenet => 2 * width,
    };
    let mut layers = stem(stem_width, &mut rng);
    let channels = match arch {
        ArchId::SmallResnet => {
            layers.push(residual_block(width, width, 1, &mut rng));
            layers.push(residual_block(width, width, 1, &mut rng));
            layers.push(residual_block(width, 2 * width, 2, &mut rng));
            layers.push(residual_block(2 * width, 2 * width, 1, &mut rng));
            layers.push(residual_block(2 * width, 4 * width, 2, &mut rng));
            layers.push(residual_block(4 * width, 4 * width, 1, &mut rng));
            4 * width
        }
        ArchId::SmallDensenet => {
            let (b1, c1) = dense_block(stem_width, width, 3, &mut rng);
            layers.push(b1);
            layers.push(transition_block(c1, c1 / 2, &mut rng));
            let (b2, c2) = dense_block(c1 / 2, width, 3, &mut rng);
            layers.push(b2);
            layers.push(transition_block(c2, c2 / 2, &mut rng));
            let (b3, c3) = dense_block(c2 / 2, width, 3, &mut rng);
            layers.push(b3);
            layers.push(bn(c3));
            layers.push(relu());
            c3
        }
    };
    layers.push(spec(LayerKind::AvgPool(AvgPool2d { kernel: final_side, stride: final_side })));
    layers.push(spec(LayerKind::FullyConnected(Linear::new(channels, num_classes, &mut rng))));
    ModelGraph::new(format!("{arch}_{h}"), arch.as_str(), input_shape, num_classes, layers)
}
