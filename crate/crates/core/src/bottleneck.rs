//! Bottleneck injection and head/tail splitting.
//!
//! The first `l_ed` top-level layers of a teacher are replaced by a small
//! encoder ending in a narrow convolution (the bottleneck) and a decoder that
//! restores the tensor shape the remaining teacher layers expect. The
//! remaining layers are copied verbatim and form the classifier.
//!
//! Two encoder templates exist. `SP1` follows the teacher's stem (stride-2
//! conv, batch norm, relu, max pool) and places the bottleneck on the second
//! convolution; `SP2` uses two stride-2 convolutions before the bottleneck and
//! shrinks the spatial size by `spatial_factor` relative to the teacher's
//! layer-`l_ed` output, which the decoder undoes with a deconvolution.

use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::checkpoint::{self, CheckpointKind, Manifest};
use crate::model::{BatchNorm2d, Conv2d, ConvTranspose2d, LayerKind, LayerSpec, MaxPool2d, ModelGraph, Sequential};
use crate::tensor::{Scalar, Tensor};

/// Bottleneck widths shipped as ready-made configurations.
pub const SHIPPED_CHANNELS: [usize; 4] = [3, 6, 9, 12];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SplitPoint {
    #[serde(rename = "SP1")]
    Sp1,
    #[serde(rename = "SP2")]
    Sp2,
}

impl fmt::Display for SplitPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitPoint::Sp1 => "SP1",
            SplitPoint::Sp2 => "SP2",
        })
    }
}

impl FromStr for SplitPoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "SP1" => Ok(SplitPoint::Sp1),
            "SP2" => Ok(SplitPoint::Sp2),
            _ => Err(Error::InvalidSplitConfig(format!("unknown split point `{s}`"))),
        }
    }
}

impl SplitPoint {
    /// Position of the bottleneck convolution in this template's encoder.
    pub fn template_k_star(&self) -> usize {
        match self {
            SplitPoint::Sp1 => 5,
            SplitPoint::Sp2 => 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub split_point: SplitPoint,
    /// 1-based index of the bottleneck layer within the encoder.
    pub k_star: usize,
    /// Number of top-level teacher layers replaced by encoder and decoder.
    pub l_ed: usize,
    pub bottleneck_channels: usize,
    pub spatial_factor: usize,
    /// Max pooling in the SP1 encoder (a stride-2 convolution otherwise).
    #[serde(default = "default_pooling")]
    pub pooling: bool,
}

fn default_pooling() -> bool {
    true
}

impl SplitConfig {
    pub fn sp1(bottleneck_channels: usize) -> Self {
        Self {
            split_point: SplitPoint::Sp1,
            k_star: SplitPoint::Sp1.template_k_star(),
            l_ed: 8,
            bottleneck_channels,
            spatial_factor: 1,
            pooling: true,
        }
    }

    pub fn sp2(bottleneck_channels: usize) -> Self {
        Self {
            split_point: SplitPoint::Sp2,
            k_star: SplitPoint::Sp2.template_k_star(),
            l_ed: 8,
            bottleneck_channels,
            spatial_factor: 2,
            pooling: false,
        }
    }

    pub fn for_point(split_point: SplitPoint, bottleneck_channels: usize) -> Self {
        match split_point {
            SplitPoint::Sp1 => Self::sp1(bottleneck_channels),
            SplitPoint::Sp2 => Self::sp2(bottleneck_channels),
        }
    }

    /// Checks the config against a teacher with `n` top-level layers.
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.bottleneck_channels == 0 {
            return Err(Error::InvalidSplitConfig("bottleneck_channels must be at least 1".into()));
        }
        if self.spatial_factor == 0 {
            return Err(Error::InvalidSplitConfig("spatial_factor must be at least 1".into()));
        }
        if self.k_star == 0 || self.k_star > self.l_ed {
            return Err(Error::InvalidSplitConfig(format!("k_star = {} must lie in 1..={}", self.k_star, self.l_ed)));
        }
        if self.l_ed >= n {
            return Err(Error::InvalidSplitConfig(format!(
                "l_ed = {} would consume the classifier of a {n}-layer teacher",
                self.l_ed
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Teacher prefix replaced by a designed encoder and decoder.
    Injected,
    /// Unmodified teacher prefix followed by a separately trained autoencoder.
    Autoencoder,
}

/// Split description stored in checkpoint manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetadata {
    pub config: SplitConfig,
    pub variant: Variant,
    pub teacher_ref: String,
    pub bottleneck_shape: Vec<usize>,
    pub restored_shape: Vec<usize>,
    /// Leading encoder layers that are unmodified teacher layers.
    pub teacher_prefix_layers: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BottleneckedModel<T> {
    pub name: String,
    pub arch: String,
    pub teacher_ref: String,
    pub num_classes: usize,
    pub config: SplitConfig,
    pub variant: Variant,
    pub encoder: Sequential<T>,
    pub decoder: Sequential<T>,
    pub classifier: Sequential<T>,
    pub teacher_prefix: usize,
}

/// Head (runs on the device) and tail (runs on the server).
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPair<T> {
    pub head: Sequential<T>,
    pub tail: Sequential<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Encoder,
    Decoder,
    Classifier,
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Component::Encoder => "encoder",
            Component::Decoder => "decoder",
            Component::Classifier => "classifier",
        })
    }
}

fn spec<T>(kind: LayerKind<T>) -> LayerSpec<T> {
    LayerSpec { id: 0, kind }
}

fn conv<T: Scalar>(cin: usize, cout: usize, k: usize, s: usize, p: usize, rng: &mut ChaCha8Rng) -> LayerSpec<T> {
    spec(LayerKind::Conv(Conv2d::new(cin, cout, k, s, p, false, rng)))
}

fn deconv<T: Scalar>(cin: usize, cout: usize, k: usize, s: usize, p: usize, rng: &mut ChaCha8Rng) -> LayerSpec<T> {
    spec(LayerKind::Deconv(ConvTranspose2d::new(cin, cout, k, s, p, false, rng)))
}

fn bn<T: Scalar>(c: usize) -> LayerSpec<T> {
    spec(LayerKind::BatchNorm(BatchNorm2d::new(c)))
}

fn relu<T>() -> LayerSpec<T> {
    spec(LayerKind::Relu)
}

fn first_conv_channels<T: Scalar>(teacher: &ModelGraph<T>) -> Result<usize> {
    teacher
        .decompose_blocks((1, teacher.len()))?
        .iter()
        .find_map(|l| match &l.kind {
            LayerKind::Conv(c) => Some(c.out_channels),
            _ => None,
        })
        .ok_or_else(|| Error::InvalidSplitConfig(format!("teacher `{}` has no convolution", teacher.name)))
}

/// Whether the output of teacher layer `id` passes through a final relu.
fn ends_with_relu<T: Scalar>(teacher: &ModelGraph<T>, id: usize) -> Result<bool> {
    Ok(matches!(teacher.decompose_blocks((id, id))?.last().map(|l| &l.kind), Some(LayerKind::Relu)))
}

fn shape3(shape: &[usize]) -> Result<[usize; 3]> {
    match shape {
        &[c, h, w] => Ok([c, h, w]),
        _ => Err(Error::Shape(format!("expected a (channels, height, width) shape, got {shape:?}"))),
    }
}

/// Layer that maps a `b x n x n` tensor to `c x target x target`.
fn restore_layer<T: Scalar>(b: usize, c: usize, n: usize, target: usize, rng: &mut ChaCha8Rng) -> Result<LayerSpec<T>> {
    use std::cmp::Ordering;
    Ok(match n.cmp(&target) {
        Ordering::Equal => conv(b, c, 3, 1, 1, rng),
        Ordering::Greater => conv(b, c, n - target + 1, 1, 0, rng),
        Ordering::Less => {
            let stride = if n == 1 { 1 } else { target / n };
            let kernel = target as isize - (n as isize - 1) * stride as isize;
            if kernel < 1 {
                return Err(Error::Shape(format!("no deconvolution restores {n}x{n} to {target}x{target}")));
            }
            deconv(b, c, kernel as usize, stride, 0, rng)
        }
    })
}

fn check_k_star<T>(encoder: &[LayerSpec<T>], config: &SplitConfig) -> Result<()> {
    let k = config.k_star;
    let expected = encoder.len();
    match encoder.get(k.wrapping_sub(1)).map(|l| &l.kind) {
        Some(LayerKind::Conv(_)) if k == expected => Ok(()),
        Some(LayerKind::Conv(_)) => Err(Error::InvalidSplitConfig(format!(
            "the {} template places the bottleneck at k* = {expected}, not {k}",
            config.split_point
        ))),
        Some(other) => Err(Error::InvalidSplitConfig(format!("layer {k} of the encoder is {}, not a convolution", other.name()))),
        None => Err(Error::InvalidSplitConfig(format!("k* = {k} exceeds the {expected}-layer encoder"))),
    }
}

/// Builds encoder and decoder for `config` from the teacher's geometry.
pub fn design_encoder_decoder<T: Scalar>(
    teacher: &ModelGraph<T>,
    config: &SplitConfig,
    seed: u64,
) -> Result<(Sequential<T>, Sequential<T>)> {
    teacher.validate()?;
    config.validate(teacher.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [_, h, _] = teacher.input_shape();
    let [c_ed, h_ed, _] = shape3(&teacher.shape_at(config.l_ed)?)?;
    if h_ed == 0 || h % h_ed != 0 || (h / h_ed) % 4 != 0 {
        return Err(Error::Shape(format!(
            "layer {} resolution {h_ed} is not a 1/(4m) fraction of the {h}-pixel input",
            config.l_ed
        )));
    }
    let s_b = (h / h_ed) / 4 * config.spatial_factor;
    let c1 = first_conv_channels(teacher)?;
    let half = (c1 / 2).max(1);
    let b = config.bottleneck_channels;
    let encoder_layers = match config.split_point {
        SplitPoint::Sp1 => {
            let reduce = if config.pooling {
                spec(LayerKind::Pool(MaxPool2d { kernel: 3, stride: 2, padding: 1 }))
            } else {
                conv(half, half, 3, 2, 1, &mut rng)
            };
            let bottleneck = if s_b == 1 { conv(half, b, 3, 1, 1, &mut rng) } else { conv(half, b, s_b, s_b, 1, &mut rng) };
            vec![conv(3, half, 3, 2, 1, &mut rng), bn(half), relu(), reduce, bottleneck]
        }
        SplitPoint::Sp2 => {
            let bottleneck = match s_b {
                1 => conv(half, b, 3, 1, 1, &mut rng),
                2 => conv(half, b, 3, 2, 1, &mut rng),
                s => conv(half, b, s, s, 0, &mut rng),
            };
            vec![
                conv(3, c1, 3, 2, 1, &mut rng),
                bn(c1),
                relu(),
                conv(c1, half, 3, 2, 1, &mut rng),
                bn(half),
                relu(),
                bottleneck,
            ]
        }
    };
    check_k_star(&encoder_layers, config)?;
    let encoder = Sequential::new(teacher.input_shape().to_vec(), encoder_layers)?;
    let bshape = encoder.output_shape()?;
    let [_, n, _] = shape3(&bshape)?;
    let restore = restore_layer(b, c_ed, n, h_ed, &mut rng)?;
    if config.spatial_factor > 1 && !matches!(restore.kind, LayerKind::Deconv(_)) {
        return Err(Error::InvalidSplitConfig(format!(
            "spatial_factor {} leaves a {n}x{n} bottleneck that needs no upsampling to {h_ed}x{h_ed}",
            config.spatial_factor
        )));
    }
    let mut decoder_layers = vec![restore, bn(c_ed), relu(), conv(c_ed, c_ed, 3, 1, 1, &mut rng)];
    if ends_with_relu(teacher, config.l_ed)? {
        decoder_layers.push(bn(c_ed));
        decoder_layers.push(relu());
    }
    let decoder = Sequential::new(bshape, decoder_layers)?;
    let restored = decoder.output_shape()?;
    let expected = teacher.shape_at(config.l_ed)?;
    if restored != expected {
        return Err(Error::Shape(format!("decoder restores {restored:?}, teacher layer {} yields {expected:?}", config.l_ed)));
    }
    Ok((encoder, decoder))
}

fn classifier_of<T: Scalar>(teacher: &ModelGraph<T>, l_ed: usize) -> Result<Sequential<T>> {
    Sequential::new(teacher.shape_at(l_ed)?, teacher.layers()[l_ed..].to_vec())
}

fn teacher_prefix_params<T: Scalar>(teacher: &ModelGraph<T>, l_ed: usize) -> usize {
    teacher.layers()[..l_ed].iter().map(LayerSpec::num_params).sum()
}

/// Replaces the first `l_ed` teacher layers with a freshly initialized encoder and decoder.
pub fn inject<T: Scalar>(teacher: &ModelGraph<T>, config: &SplitConfig, seed: u64) -> Result<BottleneckedModel<T>> {
    let (encoder, decoder) = design_encoder_decoder(teacher, config, seed)?;
    let replaced = teacher_prefix_params(teacher, config.l_ed);
    let added = encoder.num_params() + decoder.num_params();
    if added > replaced {
        return Err(Error::InvalidSplitConfig(format!(
            "encoder and decoder hold {added} parameters, more than the {replaced} they replace"
        )));
    }
    Ok(BottleneckedModel {
        name: format!("{}_{}_b{}", teacher.name, config.split_point.to_string().to_lowercase(), config.bottleneck_channels),
        arch: teacher.arch.clone(),
        teacher_ref: teacher.name.clone(),
        num_classes: teacher.num_classes,
        config: *config,
        variant: Variant::Injected,
        encoder,
        decoder,
        classifier: classifier_of(teacher, config.l_ed)?,
        teacher_prefix: 0,
    })
}

/// Inserts a 4-convolution / 4-deconvolution autoencoder after teacher layer `l_ed`,
/// keeping every teacher layer.
pub fn insert_autoencoder<T: Scalar>(teacher: &ModelGraph<T>, config: &SplitConfig, seed: u64) -> Result<BottleneckedModel<T>> {
    teacher.validate()?;
    config.validate(teacher.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c, _, _] = shape3(&teacher.shape_at(config.l_ed)?)?;
    let b = config.bottleneck_channels;
    let widths = [c, (c / 2).max(b), (c / 4).max(b), (c / 8).max(b), b];
    let mut enc = teacher.layers()[..config.l_ed].to_vec();
    for i in 0..4 {
        if i > 0 {
            enc.push(bn(widths[i]));
            enc.push(relu());
        }
        enc.push(conv(widths[i], widths[i + 1], 3, 1, 1, &mut rng));
    }
    let mut dec = Vec::new();
    for i in (0..4).rev() {
        dec.push(deconv(widths[i + 1], widths[i], 3, 1, 1, &mut rng));
        if i > 0 {
            dec.push(bn(widths[i]));
            dec.push(relu());
        }
    }
    let encoder = Sequential::new(teacher.input_shape().to_vec(), enc)?;
    let decoder = Sequential::new(encoder.output_shape()?, dec)?;
    let expected = teacher.shape_at(config.l_ed)?;
    if decoder.output_shape()? != expected {
        return Err(Error::Shape("autoencoder does not restore the split-point shape".into()));
    }
    let mut config = *config;
    config.k_star = encoder.len();
    Ok(BottleneckedModel {
        name: format!("{}_ae_b{}", teacher.name, config.bottleneck_channels),
        arch: teacher.arch.clone(),
        teacher_ref: teacher.name.clone(),
        num_classes: teacher.num_classes,
        config,
        variant: Variant::Autoencoder,
        encoder,
        decoder,
        classifier: classifier_of(teacher, config.l_ed)?,
        teacher_prefix: config.l_ed,
    })
}

impl<T: Scalar> BottleneckedModel<T> {
    /// Encoder, decoder and classifier as one sequence.
    pub fn full(&self) -> Result<Sequential<T>> {
        self.encoder.then(&self.decoder)?.then(&self.classifier)
    }

    /// 0-based index ranges of each component within [`Self::full`].
    pub fn ranges(&self) -> [(Component, Range<usize>); 3] {
        let e = self.encoder.len();
        let d = e + self.decoder.len();
        [
            (Component::Encoder, 0..e),
            (Component::Decoder, e..d),
            (Component::Classifier, d..d + self.classifier.len()),
        ]
    }

    pub fn component_of(&self, index: usize) -> Component {
        self.ranges().into_iter().find(|(_, r)| r.contains(&index)).map(|(c, _)| c).unwrap_or(Component::Classifier)
    }

    /// Writes the layers of a (trained) full sequence back into the components.
    pub fn absorb(&mut self, full: Sequential<T>) -> Result<()> {
        let [(_, enc), (_, dec), (_, cls)] = self.ranges();
        if full.len() != cls.end {
            return Err(Error::Shape(format!("expected {} layers, got {}", cls.end, full.len())));
        }
        let mut layers = full.layers;
        let classifier = layers.split_off(dec.end);
        let decoder = layers.split_off(enc.end);
        self.encoder = Sequential::new(self.encoder.input_shape.clone(), layers)?;
        self.decoder = Sequential::new(self.decoder.input_shape.clone(), decoder)?;
        self.classifier = Sequential::new(self.classifier.input_shape.clone(), classifier)?;
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.encoder.predict(x)?;
        let r = self.decoder.predict(&h)?;
        self.classifier.predict(&r)
    }

    pub fn bottleneck_shape(&self) -> Result<Vec<usize>> {
        self.encoder.output_shape()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        let s = &self.encoder.input_shape;
        [s[0], s[1], s[2]]
    }

    pub fn num_params(&self) -> usize {
        self.encoder.num_params() + self.decoder.num_params() + self.classifier.num_params()
    }

    pub fn split(&self) -> Result<SplitPair<T>> {
        split(self)
    }

    pub fn metadata(&self) -> Result<SplitMetadata> {
        Ok(SplitMetadata {
            config: self.config,
            variant: self.variant,
            teacher_ref: self.teacher_ref.clone(),
            bottleneck_shape: self.bottleneck_shape()?,
            restored_shape: self.decoder.output_shape()?,
            teacher_prefix_layers: self.teacher_prefix,
        })
    }

    pub fn cast<U: Scalar>(&self) -> BottleneckedModel<U> {
        BottleneckedModel {
            name: self.name.clone(),
            arch: self.arch.clone(),
            teacher_ref: self.teacher_ref.clone(),
            num_classes: self.num_classes,
            config: self.config,
            variant: self.variant,
            encoder: self.encoder.cast(),
            decoder: self.decoder.cast(),
            classifier: self.classifier.cast(),
            teacher_prefix: self.teacher_prefix,
        }
    }
}

/// Splits at the bottleneck: the head is the encoder, the tail is decoder then classifier.
pub fn split<T: Scalar>(model: &BottleneckedModel<T>) -> Result<SplitPair<T>> {
    Ok(SplitPair { head: model.encoder.clone(), tail: model.decoder.then(&model.classifier)? })
}

impl<T: Scalar> SplitPair<T> {
    pub fn run(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.tail.predict(&self.head.predict(x)?)
    }
}

impl BottleneckedModel<f32> {
    pub fn save(&self, dir: &Path) -> Result<Manifest> {
        let manifest = Manifest {
            format_version: checkpoint::FORMAT_VERSION,
            kind: CheckpointKind::Bottlenecked,
            name: self.name.clone(),
            arch: self.arch.clone(),
            input_shape: self.input_shape(),
            num_classes: self.num_classes,
            components: Default::default(),
            split: Some(self.metadata()?),
            param_digest: String::new(),
        };
        checkpoint::write_checkpoint(
            dir,
            manifest,
            &[("encoder", &self.encoder), ("decoder", &self.decoder), ("classifier", &self.classifier)],
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = checkpoint::read_manifest(dir)?;
        let meta = match (&manifest.kind, &manifest.split) {
            (CheckpointKind::Bottlenecked, Some(meta)) => meta.clone(),
            _ => return Err(Error::Checkpoint(format!("{} is not a bottlenecked checkpoint", dir.display()))),
        };
        let load = |name: &str| checkpoint::load_component(dir, name, checkpoint::component(&manifest, name)?);
        let model = Self {
            name: manifest.name.clone(),
            arch: manifest.arch.clone(),
            teacher_ref: meta.teacher_ref,
            num_classes: manifest.num_classes,
            config: meta.config,
            variant: meta.variant,
            encoder: load("encoder")?,
            decoder: load("decoder")?,
            classifier: load("classifier")?,
            teacher_prefix: meta.teacher_prefix_layers,
        };
        if model.bottleneck_shape()? != meta.bottleneck_shape {
            return Err(Error::Checkpoint("encoder does not reproduce the recorded bottleneck shape".into()));
        }
        Ok(model)
    }

    /// Parameter digest over encoder, decoder and classifier.
    pub fn param_digest(&self) -> String {
        checkpoint::param_digest(&[&self.encoder, &self.decoder, &self.classifier])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_teacher, ArchId};
    use std::collections::BTreeSet;

    fn resnet224() -> ModelGraph<f32> {
        build_teacher(ArchId::SmallResnet, [3, 224, 224], 1000, 1).unwrap()
    }

    #[test]
    fn sp1_on_224_gives_12x29x29() {
        let (enc, dec) = design_encoder_decoder(&resnet224(), &SplitConfig::sp1(12), 0).unwrap();
        assert_eq!(enc.output_shape().unwrap(), vec![12, 29, 29]);
        assert_eq!(dec.output_shape().unwrap(), vec![32, 28, 28]);
    }

    #[test]
    fn sp2_halves_28_and_deconv_restores() {
        let teacher = resnet224();
        assert_eq!(teacher.shape_at(8).unwrap()[1..], [28, 28]);
        let (enc, dec) = design_encoder_decoder(&teacher, &SplitConfig::sp2(12), 0).unwrap();
        assert_eq!(enc.output_shape().unwrap()[1..], [14, 14]);
        assert!(matches!(dec.layers[0].kind, LayerKind::Deconv(_)));
        assert_eq!(dec.shapes().unwrap()[0][1..], [28, 28]);
    }

    #[test]
    fn every_encoder_ends_in_bottleneck_conv() {
        for arch in [ArchId::SmallResnet, ArchId::SmallDensenet] {
            let t = build_teacher::<f32>(arch, [3, 32, 32], 10, 0).unwrap();
            for sp in [SplitPoint::Sp1, SplitPoint::Sp2] {
                let cfg = SplitConfig::for_point(sp, 6);
                let (enc, _) = design_encoder_decoder(&t, &cfg, 0).unwrap();
                match &enc.layers[cfg.k_star - 1].kind {
                    LayerKind::Conv(c) => assert_eq!(c.out_channels, 6),
                    other => panic!("bottleneck is {}", other.name()),
                }
            }
        }
    }

    #[test]
    fn k_star_must_point_at_the_bottleneck_conv() {
        let t = build_teacher::<f32>(ArchId::SmallResnet, [3, 32, 32], 10, 0).unwrap();
        let mut cfg = SplitConfig::sp1(3);
        cfg.k_star = 3;
        assert!(matches!(inject(&t, &cfg, 0), Err(Error::InvalidSplitConfig(_))));
        cfg.k_star = 1;
        assert!(matches!(inject(&t, &cfg, 0), Err(Error::InvalidSplitConfig(_))));
    }

    #[test]
    fn l_ed_cannot_consume_classifier() {
        let t = build_teacher::<f32>(ArchId::SmallResnet, [3, 32, 32], 10, 0).unwrap();
        let mut cfg = SplitConfig::sp1(3);
        cfg.l_ed = t.len();
        assert!(matches!(inject(&t, &cfg, 0), Err(Error::InvalidSplitConfig(_))));
    }

    #[test]
    fn classifier_is_a_verbatim_copy() {
        let t = build_teacher::<f32>(ArchId::SmallResnet, [3, 32, 32], 10, 4).unwrap();
        let m = inject(&t, &SplitConfig::sp1(12), 0).unwrap();
        assert_eq!(m.classifier.layers.len(), t.len() - 8);
        let x = Tensor::full(&[2, 3, 32, 32], 0.7f32);
        let (logits, acts) = t.forward(&x, &BTreeSet::from([8])).unwrap();
        assert_eq!(m.classifier.predict(&acts[0].tensor).unwrap(), logits);
    }

    #[test]
    fn head_has_fewer_params_than_teacher() {
        let t = build_teacher::<f32>(ArchId::SmallDensenet, [3, 32, 32], 10, 4).unwrap();
        let m = inject(&t, &SplitConfig::sp2(3), 0).unwrap();
        let pair = m.split().unwrap();
        assert!(pair.head.num_params() < t.num_params());
        assert_eq!(pair.head.output_shape().unwrap()[0], 3);
    }

    #[test]
    fn autoencoder_keeps_teacher_prefix() {
        let t = build_teacher::<f32>(ArchId::SmallResnet, [3, 32, 32], 10, 4).unwrap();
        let m = insert_autoencoder(&t, &SplitConfig::sp1(3), 0).unwrap();
        assert_eq!(m.encoder.layers[..8], t.layers()[..8]);
        assert_eq!(m.bottleneck_shape().unwrap(), vec![3, 4, 4]);
        let convs = m.encoder.layers[8..].iter().filter(|l| matches!(l.kind, LayerKind::Conv(_))).count();
        let deconvs = m.decoder.layers.iter().filter(|l| matches!(l.kind, LayerKind::Deconv(_))).count();
        assert_eq!((convs, deconvs), (4, 4));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = build_teacher::<f32>(ArchId::SmallResnet, [3, 32, 32], 10, 4).unwrap();
        let m = inject(&t, &SplitConfig::sp1(9), 2).unwrap();
        let manifest = m.save(dir.path()).unwrap();
        let back = BottleneckedModel::load(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.param_digest(), manifest.param_digest);
        assert_eq!(manifest.split.unwrap().bottleneck_shape, vec![9, 5, 5]);
    }
}
