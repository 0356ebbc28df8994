use proptest::prelude::*;

use splitcomp_core::codec::{dequantize, payload_size, quantize, Codec, PayloadFormat, QuantizedTensor};
use splitcomp_core::{Error, Tensor};

fn tensor_strategy() -> impl Strategy<Value = Tensor<f32>> {
    (1usize..5, 1usize..9, 1usize..9, -20i32..20).prop_flat_map(|(c, h, w, exp)| {
        let scale = 2f32.powi(exp);
        prop::collection::vec(-1.0f32..1.0, c * h * w)
            .prop_map(move |v| Tensor::from_vec(&[c, h, w], v.into_iter().map(|x| x * scale).collect()).unwrap())
    })
}

proptest! {
    #[test]
    fn round_trip_error_is_at_most_half_a_step(t in tensor_strategy()) {
        let qt = quantize(&t).unwrap();
        let back = dequantize(&qt).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            prop_assert!(((*a as f64) - (*b as f64)).abs() <= qt.scale as f64 / 2.0);
        }
    }

    #[test]
    fn quantization_is_idempotent(t in tensor_strategy()) {
        let qt = quantize(&t).unwrap();
        let again = quantize(&dequantize(&qt).unwrap()).unwrap();
        prop_assert_eq!(again, qt);
    }

    #[test]
    fn serialized_size_is_elements_plus_scale(t in tensor_strategy()) {
        let qt = quantize(&t).unwrap();
        let bytes = qt.to_bytes();
        prop_assert_eq!(bytes.len() as u64, payload_size(t.shape(), PayloadFormat::Bq8).unwrap());
        prop_assert_eq!(QuantizedTensor::from_bytes(t.shape(), &bytes).unwrap(), qt);
    }

    #[test]
    fn codecs_round_trip_through_bytes(t in tensor_strategy()) {
        let f = Codec::Float32.decode(t.shape(), &Codec::Float32.encode(&t).unwrap()).unwrap();
        prop_assert_eq!(&f, &t);
        let payload = Codec::Bq8.encode(&t).unwrap();
        prop_assert_eq!(payload.len(), Codec::Bq8.payload_len(t.shape()));
        let q = Codec::Bq8.decode(t.shape(), &payload).unwrap();
        prop_assert_eq!(q, dequantize(&quantize(&t).unwrap()).unwrap());
    }
}

#[test]
fn corrupt_payloads_are_rejected() {
    let t = Tensor::from_vec(&[2, 2], vec![1.0f32, -0.5, 0.25, 0.0]).unwrap();
    let mut bytes = quantize(&t).unwrap().to_bytes();
    assert!(matches!(QuantizedTensor::from_bytes(&[2, 2], &bytes[..7]), Err(Error::CorruptPayload(_))));
    bytes[..4].copy_from_slice(&f32::NAN.to_le_bytes());
    assert!(matches!(QuantizedTensor::from_bytes(&[2, 2], &bytes), Err(Error::CorruptPayload(_))));
    bytes[..4].copy_from_slice(&(-1.0f32).to_le_bytes());
    assert!(matches!(Codec::Bq8.decode(&[2, 2], &bytes), Err(Error::CorruptPayload(_))));
    assert!(matches!(Codec::Float32.decode(&[2, 2], &[0u8; 15]), Err(Error::CorruptPayload(_))));
}

#[test]
fn codec_names_parse() {
    for c in Codec::ALL {
        assert_eq!(c.to_string().parse::<Codec>().unwrap(), c);
        assert_eq!(Codec::from_wire_id(c.wire_id()), Some(c));
    }
    assert!("jpeg".parse::<Codec>().is_err());
    assert_eq!(Codec::from_wire_id(9), None);
}

#[test]
fn configured_jpeg_size_is_taken_verbatim() {
    assert_eq!(payload_size(&[3, 224, 224], PayloadFormat::ConfiguredJpeg { bytes: Some(9000) }).unwrap(), 9000);
}
