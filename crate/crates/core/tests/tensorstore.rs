mod common;

use std::collections::BTreeMap;

use common::{bf16_reference, read_all};
use proptest::prelude::*;
use vecforge::tensorstore::{
    bf16_bits_from_f32, f16_bits_from_f32, open_checkpoint, write_blocks, write_checkpoint, DType,
    TensorBlock, TensorSpec, WriteOptions, INDEX_FILE_NAME,
};
use vecforge::Error;

fn dtype_strategy() -> impl Strategy<Value = DType> {
    prop::sample::select(DType::ALL.to_vec())
}

prop_compose! {
    fn tensor_strategy()(dtype in dtype_strategy(), shape in prop::collection::vec(1u64..5, 0..3))
        (data in prop::collection::vec(any::<u8>(), shape.iter().product::<u64>() as usize * dtype.width()),
         dtype in Just(dtype), shape in Just(shape)) -> (DType, Vec<u64>, Vec<u8>) {
        (dtype, shape, data)
    }
}

fn named(tensors: Vec<(DType, Vec<u64>, Vec<u8>)>) -> Vec<TensorBlock> {
    tensors
        .into_iter()
        .enumerate()
        .map(|(i, (d, s, data))| TensorBlock::new(format!("t{i:02}.weight"), d, s, data).unwrap())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn round_trip_is_bit_identical(tensors in prop::collection::vec(tensor_strategy(), 1..12), shard in 8u64..256) {
        let dir = tempfile::tempdir().unwrap();
        let mut blocks = named(tensors);
        let largest = blocks.iter().map(|b| b.data.len() as u64).max().unwrap();
        let opts = WriteOptions::default().with_max_shard_bytes(shard.max(largest).max(1));
        let handle = write_blocks(blocks.clone(), dir.path().join("ckpt/"), &opts).unwrap();
        let back = read_all(&open_checkpoint(handle.path()).unwrap());
        blocks.sort_by(|a, b| a.meta.name.cmp(&b.meta.name));
        prop_assert_eq!(back.len(), blocks.len());
        for (got, want) in back.iter().zip(&blocks) {
            prop_assert_eq!(&got.meta.name, &want.meta.name);
            prop_assert_eq!(got.meta.dtype, want.meta.dtype);
            prop_assert_eq!(&got.meta.shape, &want.meta.shape);
            prop_assert_eq!(&got.data, &want.data);
        }
    }

    #[test]
    fn header_is_padded_and_sorted(tensors in prop::collection::vec(tensor_strategy(), 1..8)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let mut meta = BTreeMap::new();
        meta.insert("zeta".to_string(), "1".to_string());
        meta.insert("alpha".to_string(), "2".to_string());
        write_blocks(named(tensors), &path, &WriteOptions::default().with_metadata(meta)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        prop_assert_eq!(n % 8, 0);
        let header = std::str::from_utf8(&bytes[8..8 + n]).unwrap();
        let doc: serde_json::Value = serde_json::from_str(header.trim_end()).unwrap();
        let keys: Vec<_> = doc.as_object().unwrap().keys().cloned().collect();
        let mut sorted = keys.clone();
        sorted.sort();
        prop_assert_eq!(keys, sorted);
        let pos = |k: &str| header.find(k).unwrap();
        prop_assert!(pos("__metadata__") < pos("t00.weight"));
        prop_assert!(pos("\"alpha\"") < pos("\"zeta\""));
    }

    #[test]
    fn bf16_rounding_matches_reference(bits in any::<u32>()) {
        let x = f32::from_bits(bits);
        prop_assert_eq!(bf16_bits_from_f32(x), bf16_reference(x));
    }
}

#[test]
fn sharded_output_has_index_and_named_shards() {
    let dir = tempfile::tempdir().unwrap();
    let blocks: Vec<_> = (0..5)
        .map(|i| TensorBlock::new(format!("w{i}"), DType::F32, vec![4], vec![i as u8; 16]).unwrap())
        .collect();
    let h = write_blocks(
        blocks,
        dir.path().join("out"),
        &WriteOptions::default().with_max_shard_bytes(32),
    )
    .unwrap();
    assert!(h.is_sharded());
    assert_eq!(h.shards().len(), 3);
    assert!(dir.path().join("out").join(INDEX_FILE_NAME).is_file());
    assert!(dir
        .path()
        .join("out/model-00003-of-00003.safetensors")
        .is_file());
    assert_eq!(
        h.shard_of("w4").unwrap().path.file_name().unwrap(),
        "model-00003-of-00003.safetensors"
    );
}

#[test]
fn failed_write_leaves_nothing_behind() {
    let dir = tempfile::tempdir().unwrap();
    let dest = dir.path().join("out.safetensors");
    let specs = vec![
        TensorSpec::new("a", DType::F32, vec![2]),
        TensorSpec::new("b", DType::F32, vec![2]),
    ];
    let err = write_checkpoint(specs, &dest, &WriteOptions::default(), |spec| {
        if spec.name == "b" {
            Err(Error::InvalidArgument("producer failed".into()))
        } else {
            Ok(vec![0; 8])
        }
    })
    .unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)));
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn existing_output_survives_a_failed_rewrite() {
    let dir = tempfile::tempdir().unwrap();
    let dest = dir.path().join("keep.safetensors");
    let block = TensorBlock::new("a", DType::U8, vec![3], vec![1, 2, 3]).unwrap();
    write_blocks(vec![block.clone()], &dest, &WriteOptions::default()).unwrap();
    let before = std::fs::read(&dest).unwrap();
    let _ = write_checkpoint(
        vec![TensorSpec::new("a", DType::U8, vec![3])],
        &dest,
        &WriteOptions::default(),
        |_| Err(Error::InvalidArgument("boom".into())),
    );
    assert_eq!(std::fs::read(&dest).unwrap(), before);
}

#[test]
fn duplicate_and_oversized_tensors_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let a = TensorBlock::new("x", DType::U8, vec![1], vec![0]).unwrap();
    let err = write_blocks(
        vec![a.clone(), a],
        dir.path().join("d.safetensors"),
        &WriteOptions::default(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::DuplicateTensor(_)));
    let big = TensorBlock::new("big", DType::U8, vec![64], vec![0; 64]).unwrap();
    let err = write_blocks(
        vec![big],
        dir.path().join("s/"),
        &WriteOptions::default().with_max_shard_bytes(16),
    )
    .unwrap_err();
    assert!(matches!(err, Error::TensorTooLarge { .. }));
}

#[test]
fn truncated_file_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.safetensors");
    let block = TensorBlock::new("a", DType::F32, vec![8], vec![7; 32]).unwrap();
    write_blocks(vec![block], &path, &WriteOptions::default()).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
    assert!(open_checkpoint(&path).is_err());
    std::fs::write(&path, b"\xff\xff\xff\xff\xff\xff\xff\xff{}").unwrap();
    assert!(open_checkpoint(&path).is_err());
}

#[test]
fn nans_are_canonical_and_specials_survive() {
    for payload in [0x7FC0_0001u32, 0xFF80_0001, 0x7FFF_FFFF] {
        let nan = f32::from_bits(payload);
        assert_eq!(bf16_bits_from_f32(nan), 0x7FC0);
        assert_eq!(f16_bits_from_f32(nan), 0x7E00);
    }
    assert_eq!(bf16_bits_from_f32(f32::INFINITY), 0x7F80);
    assert_eq!(bf16_bits_from_f32(f32::NEG_INFINITY), 0xFF80);
    assert_eq!(bf16_bits_from_f32(-0.0), 0x8000);
    assert_eq!(f16_bits_from_f32(1.0), 0x3C00);
    assert_eq!(f16_bits_from_f32(65520.0), 0x7C00);
    assert_eq!(f16_bits_from_f32(65519.0), 0x7BFF);
}
