//! On-disk model container.
//!
//! A checkpoint is a directory holding `manifest.json` and a `params/`
//! directory with one little-endian `f32` blob per stateful top-level layer.
//! The manifest lists every layer with its hyperparameters and output shape;
//! blob names are derived from the component name and the layer's `param_ref`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::graph::{infer_shapes, Block, BlockKind, LayerKind, LayerSpec, Merge, MergeOp, ModelGraph, Sequential};
use super::layers::{AvgPool2d, BatchNorm2d, Conv2d, ConvTranspose2d, Linear, MaxPool2d};
use crate::bottleneck::SplitMetadata;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Teacher,
    Bottlenecked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub id: usize,
    pub kind: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub hyperparams: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_kind: Option<BlockKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merge_op: Option<MergeOp>,
    pub output_shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<LayerEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentEntry {
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
    pub num_params: usize,
    pub layers: Vec<LayerEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub name: String,
    pub arch: String,
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub components: BTreeMap<String, ComponentEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitMetadata>,
    /// SHA-256 over every component's state tensors, in component order.
    pub param_digest: String,
}

fn entries<T: Scalar>(layers: &[LayerSpec<T>], input: &[usize], top: bool) -> Result<Vec<LayerEntry>> {
    let shapes = infer_shapes(layers, input)?;
    let mut stack: Vec<Vec<usize>> = Vec::new();
    let mut prev = input.to_vec();
    let mut out = Vec::with_capacity(layers.len());
    for (layer, shape) in layers.iter().zip(&shapes) {
        let mut hp = BTreeMap::new();
        let mut children = Vec::new();
        let (mut block_kind, mut merge_op) = (None, None);
        match &layer.kind {
            LayerKind::Conv(c) => {
                hp.extend([
                    ("in_channels", c.in_channels),
                    ("out_channels", c.out_channels),
                    ("kernel", c.kernel),
                    ("stride", c.stride),
                    ("padding", c.padding),
                    ("bias", c.bias.is_some() as usize),
                ]);
            }
            LayerKind::Deconv(c) => {
                hp.extend([
                    ("in_channels", c.in_channels),
                    ("out_channels", c.out_channels),
                    ("kernel", c.kernel),
                    ("stride", c.stride),
                    ("padding", c.padding),
                    ("bias", c.bias.is_some() as usize),
                ]);
            }
            LayerKind::BatchNorm(bn) => {
                hp.insert("channels", bn.channels);
            }
            LayerKind::Pool(p) => {
                hp.extend([("kernel", p.kernel), ("stride", p.stride), ("padding", p.padding)]);
            }
            LayerKind::AvgPool(p) => {
                hp.extend([("kernel", p.kernel), ("stride", p.stride)]);
            }
            LayerKind::FullyConnected(l) => {
                hp.extend([("in_features", l.in_features), ("out_features", l.out_features)]);
            }
            LayerKind::Block(b) => {
                block_kind = Some(b.kind);
                children = entries(&b.layers, &prev, false)?;
            }
            LayerKind::Branch => stack.push(prev.clone()),
            LayerKind::Merge(m) => {
                merge_op = Some(m.op);
                let saved = stack.pop().unwrap_or_default();
                children = entries(&m.projection, &saved, false)?;
            }
            LayerKind::Relu => {}
        }
        let stateful = top && !layer.state_tensors().is_empty();
        out.push(LayerEntry {
            id: layer.id,
            kind: layer.kind.name().to_string(),
            hyperparams: hp.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            block_kind,
            merge_op,
            output_shape: shape.clone(),
            param_ref: stateful.then(|| layer.param_ref()),
            children,
        });
        prev = shape.clone();
    }
    Ok(out)
}

/// Manifest description of a layer sequence.
pub fn component_entry<T: Scalar>(seq: &Sequential<T>) -> Result<ComponentEntry> {
    Ok(ComponentEntry {
        input_shape: seq.input_shape.clone(),
        output_shape: seq.output_shape()?,
        num_params: seq.num_params(),
        layers: entries(&seq.layers, &seq.input_shape, true)?,
    })
}

fn hyper(entry: &LayerEntry, key: &str) -> Result<usize> {
    entry
        .hyperparams
        .get(key)
        .copied()
        .ok_or_else(|| Error::Checkpoint(format!("layer {} ({}) lacks hyperparameter `{key}`", entry.id, entry.kind)))
}

fn layer_from_entry<T: Scalar>(entry: &LayerEntry, rng: &mut ChaCha8Rng) -> Result<LayerSpec<T>> {
    let h = |k: &str| hyper(entry, k);
    let kind = match entry.kind.as_str() {
        "conv" => LayerKind::Conv(Conv2d::new(
            h("in_channels")?,
            h("out_channels")?,
            h("kernel")?,
            h("stride")?,
            h("padding")?,
            h("bias")? != 0,
            rng,
        )),
        "deconv" => LayerKind::Deconv(ConvTranspose2d::new(
            h("in_channels")?,
            h("out_channels")?,
            h("kernel")?,
            h("stride")?,
            h("padding")?,
            h("bias")? != 0,
            rng,
        )),
        "batch_norm" => LayerKind::BatchNorm(BatchNorm2d::new(h("channels")?)),
        "relu" => LayerKind::Relu,
        "pool" => LayerKind::Pool(MaxPool2d { kernel: h("kernel")?, stride: h("stride")?, padding: h("padding")? }),
        "avg_pool" => LayerKind::AvgPool(AvgPool2d { kernel: h("kernel")?, stride: h("stride")? }),
        "fully_connected" => LayerKind::FullyConnected(Linear::new(h("in_features")?, h("out_features")?, rng)),
        "block" => {
            let kind = entry
                .block_kind
                .ok_or_else(|| Error::Checkpoint(format!("block layer {} lacks block_kind", entry.id)))?;
            let layers = entry.children.iter().map(|c| layer_from_entry(c, rng)).collect::<Result<_>>()?;
            LayerKind::Block(Block { kind, layers })
        }
        "shortcut_branch" => LayerKind::Branch,
        "shortcut_merge" => {
            let op = entry
                .merge_op
                .ok_or_else(|| Error::Checkpoint(format!("merge layer {} lacks merge_op", entry.id)))?;
            let projection = entry.children.iter().map(|c| layer_from_entry(c, rng)).collect::<Result<_>>()?;
            LayerKind::Merge(Merge { op, projection })
        }
        other => return Err(Error::Checkpoint(format!("unknown layer kind `{other}`"))),
    };
    Ok(LayerSpec::new(entry.id, kind))
}

fn blob_name(component: &str, param_ref: &str) -> String {
    format!("{component}_{param_ref}.bin")
}

fn encode_tensors(tensors: &[&Tensor<f32>]) -> Vec<u8> {
    let n: usize = tensors.iter().map(|t| t.numel()).sum();
    let mut bytes = Vec::with_capacity(4 * n);
    for t in tensors {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes
}

/// Hex SHA-256 over the state tensors (parameters and running statistics) of the given sequences.
pub fn param_digest(seqs: &[&Sequential<f32>]) -> String {
    let mut hasher = Sha256::new();
    for seq in seqs {
        for layer in &seq.layers {
            hasher.update(encode_tensors(&layer.state_tensors()));
        }
    }
    hex::encode(hasher.finalize())
}

/// Rebuilds a sequence from its manifest entry and parameter blobs.
pub fn load_component(dir: &Path, name: &str, entry: &ComponentEntry) -> Result<Sequential<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut layers = entry.layers.iter().map(|e| layer_from_entry(e, &mut rng)).collect::<Result<Vec<LayerSpec<f32>>>>()?;
    for (layer, e) in layers.iter_mut().zip(&entry.layers) {
        let Some(param_ref) = &e.param_ref else { continue };
        let path = dir.join("params").join(blob_name(name, param_ref));
        let bytes = fs::read(&path).map_err(|_| Error::MissingArtifact(path.clone()))?;
        let mut state = layer.state_tensors_mut();
        let expected: usize = state.iter().map(|t| t.numel()).sum();
        if bytes.len() != 4 * expected {
            return Err(Error::Checkpoint(format!(
                "{} holds {} bytes, layer {} needs {}",
                path.display(),
                bytes.len(),
                e.id,
                4 * expected
            )));
        }
        let mut values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        for t in state.iter_mut() {
            for v in t.data_mut() {
                *v = values.next().expect("length checked");
            }
        }
    }
    let seq = Sequential::new(entry.input_shape.clone(), layers)?;
    if seq.output_shape()? != entry.output_shape {
        return Err(Error::Checkpoint(format!("component `{name}` does not reproduce its recorded output shape")));
    }
    Ok(seq)
}

/// Writes a manifest and parameter blobs for the given named components.
pub fn write_checkpoint(dir: &Path, mut manifest: Manifest, components: &[(&str, &Sequential<f32>)]) -> Result<Manifest> {
    let params_dir = dir.join("params");
    fs::create_dir_all(&params_dir)?;
    manifest.components.clear();
    for (name, seq) in components {
        for layer in &seq.layers {
            let state = layer.state_tensors();
            if state.is_empty() {
                continue;
            }
            fs::write(params_dir.join(blob_name(name, &layer.param_ref())), encode_tensors(&state))?;
        }
        manifest.components.insert(name.to_string(), component_entry(seq)?);
    }
    let seqs: Vec<&Sequential<f32>> = components.iter().map(|(_, s)| *s).collect();
    manifest.param_digest = param_digest(&seqs);
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = manifest_path(dir);
    let text = fs::read_to_string(&path).map_err(|_| Error::MissingArtifact(path.clone()))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint format version {}", manifest.format_version)));
    }
    Ok(manifest)
}

pub fn component<'a>(manifest: &'a Manifest, name: &str) -> Result<&'a ComponentEntry> {
    manifest
        .components
        .get(name)
        .ok_or_else(|| Error::Checkpoint(format!("checkpoint has no `{name}` component")))
}

pub fn save_teacher(dir: &Path, model: &ModelGraph<f32>) -> Result<Manifest> {
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: CheckpointKind::Teacher,
        name: model.name.clone(),
        arch: model.arch.clone(),
        input_shape: model.input_shape(),
        num_classes: model.num_classes,
        components: BTreeMap::new(),
        split: None,
        param_digest: String::new(),
    };
    write_checkpoint(dir, manifest, &[("model", &model.net)])
}

pub fn load_teacher(dir: &Path) -> Result<ModelGraph<f32>> {
    let manifest = read_manifest(dir)?;
    if manifest.kind != CheckpointKind::Teacher {
        return Err(Error::Checkpoint(format!("{} is not a teacher checkpoint", dir.display())));
    }
    let net = load_component(dir, "model", component(&manifest, "model")?)?;
    let graph = ModelGraph { name: manifest.name, arch: manifest.arch, num_classes: manifest.num_classes, net };
    graph.validate()?;
    Ok(graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::zoo::{build_teacher, ArchId};
    use std::collections::BTreeSet;

    #[test]
    fn teacher_round_trip_preserves_outputs_and_digest() {
        for arch in [ArchId::SmallResnet, ArchId::SmallDensenet] {
            let dir = tempfile::tempdir().unwrap();
            let mut m = build_teacher::<f32>(arch, [3, 32, 32], 10, 5).unwrap();
            if let LayerKind::BatchNorm(bn) = &mut m.net.layers[1].kind {
                bn.running_mean.fill(0.25);
            }
            let manifest = save_teacher(dir.path(), &m).unwrap();
            let loaded = load_teacher(dir.path()).unwrap();
            assert_eq!(loaded, m);
            assert_eq!(param_digest(&[&loaded.net]), manifest.param_digest);
            let x = Tensor::full(&[1, 3, 32, 32], 0.1f32);
            assert_eq!(m.forward(&x, &BTreeSet::new()).unwrap().0, loaded.forward(&x, &BTreeSet::new()).unwrap().0);
        }
    }

    #[test]
    fn missing_directory_is_a_missing_artifact() {
        let err = load_teacher(Path::new("/nonexistent/teacher")).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)));
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_teacher::<f32>(ArchId::SmallResnet, [3, 32, 32], 10, 5).unwrap();
        save_teacher(dir.path(), &m).unwrap();
        let blob = dir.path().join("params").join("model_layer_001.bin");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load_teacher(dir.path()), Err(Error::Checkpoint(_))));
    }
}
