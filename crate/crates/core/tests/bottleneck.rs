use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use splitcomp_core::bottleneck::{inject, insert_autoencoder, SplitConfig, SplitPoint, SHIPPED_CHANNELS};
use splitcomp_core::model::{build_teacher, ArchId, ModelGraph};
use splitcomp_core::{Error, Tensor};

fn images(n: usize, side: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let numel = n * 3 * side * side;
    Tensor::from_vec(&[n, 3, side, side], (0..numel).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn prefix_params(t: &ModelGraph<f32>, l_ed: usize) -> usize {
    t.layers()[..l_ed].iter().map(|l| l.num_params()).sum()
}

#[test]
fn shape_contract_for_every_zoo_model_and_shipped_config() {
    for arch in [ArchId::SmallResnet, ArchId::SmallDensenet] {
        for side in [32, 64] {
            let t = build_teacher::<f32>(arch, [3, side, side], 10, 1).unwrap();
            for point in [SplitPoint::Sp1, SplitPoint::Sp2] {
                for b in SHIPPED_CHANNELS {
                    let cfg = SplitConfig::for_point(point, b);
                    let m = inject(&t, &cfg, 0).unwrap_or_else(|e| panic!("{arch:?} {side} {point} {b}: {e}"));
                    let ctx = format!("{arch:?} {side}px {point} B={b}");
                    assert_eq!(m.decoder.output_shape().unwrap(), t.shape_at(cfg.l_ed).unwrap(), "{ctx}");
                    assert_eq!(m.bottleneck_shape().unwrap()[0], b, "{ctx}");
                    assert!(
                        m.encoder.num_params() + m.decoder.num_params() <= prefix_params(&t, cfg.l_ed),
                        "{ctx}: encoder+decoder outgrow the replaced prefix"
                    );
                    let pair = m.split().unwrap();
                    assert!(pair.head.num_params() < t.num_params(), "{ctx}");
                    assert_eq!(pair.head.output_shape().unwrap(), m.bottleneck_shape().unwrap(), "{ctx}");
                }
            }
        }
    }
}

#[test]
fn split_composition_is_bitwise_identical() {
    let t = build_teacher::<f32>(ArchId::SmallResnet, [3, 32, 32], 10, 2).unwrap();
    for point in [SplitPoint::Sp1, SplitPoint::Sp2] {
        let m = inject(&t, &SplitConfig::for_point(point, 6), 3).unwrap();
        let pair = m.split().unwrap();
        let x = images(100, 32, 4);
        let full = m.forward(&x).unwrap();
        let parts = pair.tail.predict(&pair.head.predict(&x).unwrap()).unwrap();
        assert!(full.data().iter().zip(parts.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn classifier_reproduces_teacher_from_its_own_activation() {
    let t = build_teacher::<f32>(ArchId::SmallDensenet, [3, 32, 32], 10, 5).unwrap();
    let cfg = SplitConfig::sp1(3);
    let m = inject(&t, &cfg, 0).unwrap();
    let x = images(4, 32, 6);
    let (logits, acts) = t.forward(&x, &BTreeSet::from([cfg.l_ed])).unwrap();
    assert_eq!(m.classifier.predict(&acts[0].tensor).unwrap(), logits);
}

#[test]
fn invalid_configs_are_rejected() {
    let t = build_teacher::<f32>(ArchId::SmallResnet, [3, 32, 32], 10, 0).unwrap();
    let mut cfg = SplitConfig::sp1(3);
    cfg.l_ed = t.len();
    assert!(matches!(inject(&t, &cfg, 0), Err(Error::InvalidSplitConfig(_))));
    let mut cfg = SplitConfig::sp1(3);
    cfg.k_star = 2;
    assert!(matches!(inject(&t, &cfg, 0), Err(Error::InvalidSplitConfig(_))));
}

#[test]
fn autoencoder_head_contains_the_teacher_prefix() {
    let t = build_teacher::<f32>(ArchId::SmallResnet, [3, 32, 32], 10, 0).unwrap();
    let cfg = SplitConfig::sp1(3);
    let m = insert_autoencoder(&t, &cfg, 0).unwrap();
    assert_eq!(&m.encoder.layers[..cfg.l_ed], &t.layers()[..cfg.l_ed]);
    assert_eq!(m.bottleneck_shape().unwrap()[0], 3);
    assert_eq!(m.decoder.output_shape().unwrap(), t.shape_at(cfg.l_ed).unwrap());
    let injected = inject(&t, &cfg, 0).unwrap();
    assert!(m.encoder.num_params() > injected.encoder.num_params());
}
