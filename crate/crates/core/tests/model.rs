use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use splitcomp_core::model::{build_teacher, ArchId, LayerKind, LayerSpec, Linear, ModelGraph, Sequential};
use splitcomp_core::{Error, Tensor};

fn random_images(n: usize, shape: [usize; 3], seed: u64) -> Tensor<f32> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let numel = n * shape.iter().product::<usize>();
    Tensor::from_vec(&[n, shape[0], shape[1], shape[2]], (0..numel).map(|_| rng.random_range(-2.0..2.0)).collect())
        .unwrap()
}

fn teacher(arch: ArchId) -> ModelGraph<f32> {
    build_teacher(arch, [3, 32, 32], 10, 4).unwrap()
}

#[test]
fn zoo_models_have_blocks_and_class_outputs() {
    for arch in [ArchId::SmallResnet, ArchId::SmallDensenet] {
        let t = teacher(arch);
        assert!(t.layers().iter().filter(|l| l.kind.is_block()).count() >= 2);
        assert_eq!(t.shape_at(t.len()).unwrap(), vec![10]);
        t.validate().unwrap();
    }
    let big = build_teacher::<f32>(ArchId::SmallResnet, [3, 224, 224], 1000, 0).unwrap();
    assert_eq!(big.input_shape(), [3, 224, 224]);
    assert_eq!(big.shape_at(big.len()).unwrap(), vec![1000]);
}

#[test]
fn capture_edge_cases() {
    let t = teacher(ArchId::SmallResnet);
    let x = random_images(2, [3, 32, 32], 1);
    let (logits, acts) = t.forward(&x, &BTreeSet::new()).unwrap();
    assert_eq!(logits.shape(), &[2, 10]);
    assert!(acts.is_empty());
    let (logits, acts) = t.forward(&x, &BTreeSet::from([t.len()])).unwrap();
    assert_eq!(acts.len(), 1);
    assert_eq!(acts[0].tensor, logits);
    assert!(matches!(t.forward(&x, &BTreeSet::from([t.len() + 1])), Err(Error::InvalidLayerId { .. })));
    assert!(matches!(t.forward(&x, &BTreeSet::from([0])), Err(Error::InvalidLayerId { .. })));
    let wrong = random_images(1, [3, 16, 16], 1);
    assert!(matches!(t.forward(&wrong, &BTreeSet::new()), Err(Error::Shape(_))));
}

#[test]
fn linear_toy_matches_hand_arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut l1 = Linear::<f64>::new(2, 2, &mut rng);
    l1.weight.value = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    l1.bias.value = Tensor::from_vec(&[2], vec![0.5, -0.5]).unwrap();
    let mut l2 = Linear::<f64>::new(2, 1, &mut rng);
    l2.weight.value = Tensor::from_vec(&[1, 2], vec![1.0, -1.0]).unwrap();
    l2.bias.value = Tensor::from_vec(&[1], vec![2.0]).unwrap();
    let seq = Sequential::new(
        vec![2],
        vec![
            LayerSpec { id: 0, kind: LayerKind::FullyConnected(l1) },
            LayerSpec { id: 0, kind: LayerKind::FullyConnected(l2) },
        ],
    )
    .unwrap();
    // x = (1, 1): hidden = (1+2+0.5, 3+4-0.5) = (3.5, 6.5); out = 3.5 - 6.5 + 2 = -1.
    let y = seq.predict(&Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap()).unwrap();
    assert_eq!(y.data(), &[-1.0]);
}

#[test]
fn decompose_low_level_range_is_identity() {
    let t = teacher(ArchId::SmallResnet);
    let first_block = t.layers().iter().position(|l| l.kind.is_block()).unwrap();
    assert!(first_block >= 2);
    let flat = t.decompose_blocks((1, first_block)).unwrap();
    assert_eq!(flat.len(), first_block);
    for (a, b) in flat.iter().zip(t.layers()) {
        assert_eq!(a.kind, b.kind);
    }
    assert!(matches!(t.decompose_blocks((0, 2)), Err(Error::InvalidLayerId { .. })));
    assert!(matches!(t.decompose_blocks((3, 2)), Err(Error::InvalidLayerId { .. })));
    assert!(matches!(t.decompose_blocks((1, t.len() + 1)), Err(Error::InvalidLayerId { .. })));
}

#[test]
fn decomposed_residual_block_has_explicit_shortcut() {
    let t = teacher(ArchId::SmallResnet);
    let id = t.layers().iter().position(|l| l.kind.is_block()).unwrap() + 1;
    let flat = t.decompose_blocks((id, id)).unwrap();
    assert!(flat.iter().any(|l| matches!(l.kind, LayerKind::Branch)));
    assert!(flat.iter().any(|l| matches!(l.kind, LayerKind::Merge(_))));
    assert!(flat.iter().all(|l| !l.kind.is_block()));
}

fn decomposition_is_bitwise(arch: ArchId) {
    let t = teacher(arch);
    let range = (2, t.len() - 1);
    let input = t.net.input_shape_of(range.0).unwrap();
    let original = Sequential::new(input.clone(), t.layers()[range.0 - 1..range.1].to_vec()).unwrap();
    let flat = Sequential::new(input.clone(), t.decompose_blocks(range).unwrap()).unwrap();
    assert!(flat.len() > original.len());
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        use rand::Rng;
        let numel: usize = input.iter().product();
        let mut shape = vec![1];
        shape.extend_from_slice(&input);
        let x = Tensor::from_vec(&shape, (0..numel).map(|_| rng.random_range(-3.0f32..3.0)).collect()).unwrap();
        let a = original.predict(&x).unwrap();
        let b = flat.predict(&x).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn decompose_preserves_function_resnet() {
    decomposition_is_bitwise(ArchId::SmallResnet);
}

#[test]
fn decompose_preserves_function_densenet() {
    decomposition_is_bitwise(ArchId::SmallDensenet);
}

#[test]
fn forward_is_deterministic() {
    let t = teacher(ArchId::SmallDensenet);
    let x = random_images(3, [3, 32, 32], 5);
    assert_eq!(t.net.predict(&x).unwrap(), t.net.predict(&x).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn shape_inference_matches_execution(seed in 0u64..1000, dense in any::<bool>(), side in prop::sample::select(vec![32usize, 64])) {
        let arch = if dense { ArchId::SmallDensenet } else { ArchId::SmallResnet };
        let t = build_teacher::<f32>(arch, [3, side, side], 10, seed).unwrap();
        let ids: BTreeSet<usize> = (1..=t.len()).collect();
        let (_, acts) = t.forward(&random_images(2, [3, side, side], seed), &ids).unwrap();
        prop_assert_eq!(acts.len(), t.len());
        for a in &acts {
            let expected = t.shape_at(a.layer_id).unwrap();
            prop_assert_eq!(a.tensor.sample_shape(), expected.as_slice());
        }
    }
}
