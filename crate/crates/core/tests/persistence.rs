use std::path::Path;

use mdmt_core::checkpoint::{self, Checkpoint};
use mdmt_core::datagen::{self, generate_domain, split_patientwise, DomainSpec};
use mdmt_core::network::{init_params, ArchConfig, Group};
use mdmt_core::Error;
use proptest::prelude::*;

fn tiny_arch(seed: u64) -> ArchConfig {
    ArchConfig {
        input_shape: [4, 4, 4],
        base_channels: 2,
        num_blocks: 1,
        growth: 1,
        downsample_factor: 2,
        fc_hidden: 2,
        seed,
    }
}

fn sample_checkpoint(seed: u64) -> Checkpoint {
    Checkpoint {
        params: init_params(&tiny_arch(seed)).unwrap(),
        epoch: 7,
        val_auc: 0.8125,
        config_hash: "0123abcd".into(),
    }
}

fn sample_dataset_bytes() -> Vec<u8> {
    let spec = DomainSpec {
        n_patients: 4,
        shape: [6, 6, 6],
        blob_count: [1, 1],
        blob_radius: [1.0, 1.5],
        ..DomainSpec::desk_domain2()
    };
    let ds = split_patientwise(&generate_domain(&spec).unwrap(), [0.5, 0.25, 0.25], 1).unwrap();
    datagen::encode_dataset(&ds)
}

fn header_len(bytes: &[u8]) -> usize {
    bytes.windows(5).position(|w| w == b"\nend\n").unwrap() + 5
}

fn expect_format<T: std::fmt::Debug>(r: mdmt_core::Result<T>, what: &str) {
    match r {
        Err(Error::Format { .. }) => {}
        Err(e) => panic!("{what}: expected format error, got {e}"),
        Ok(v) => panic!("{what}: corrupted file was accepted: {v:?}"),
    }
}

fn read_checkpoint_bytes(dir: &Path, bytes: &[u8]) -> mdmt_core::Result<Checkpoint> {
    let path = dir.join("c.mdmt");
    std::fs::write(&path, bytes).unwrap();
    checkpoint::read(&path)
}

fn read_dataset_bytes(dir: &Path, bytes: &[u8]) -> mdmt_core::Result<datagen::DomainDataset> {
    let path = dir.join("d.mdmt");
    std::fs::write(&path, bytes).unwrap();
    datagen::read_dataset(&path)
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = sample_checkpoint(5);
    let path = dir.path().join("a.mdmt");
    checkpoint::write(&path, &ckpt).unwrap();
    let back = checkpoint::read(&path).unwrap();
    assert_eq!(back.epoch, ckpt.epoch);
    assert_eq!(back.val_auc.to_bits(), ckpt.val_auc.to_bits());
    assert_eq!(back.config_hash, ckpt.config_hash);
    for g in Group::ALL {
        for (a, b) in back.params.group(g).tensors.iter().zip(&ckpt.params.group(g).tensors) {
            assert_eq!(a.shape(), b.shape());
            let bits = |t: &mdmt_core::tensor::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }
    assert_eq!(checkpoint::encode(&back), std::fs::read(&path).unwrap());
}

/// Every single-byte change anywhere in the header is caught.
#[test]
fn every_header_byte_edit_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = checkpoint::encode(&sample_checkpoint(1));
    let ds = sample_dataset_bytes();
    for mask in [0x01u8, 0x20, 0x80, 0xff] {
        for i in 0..header_len(&ckpt) {
            let mut b = ckpt.clone();
            b[i] ^= mask;
            expect_format(read_checkpoint_bytes(dir.path(), &b), &format!("checkpoint byte {i}"));
        }
        for i in 0..header_len(&ds) {
            let mut b = ds.clone();
            b[i] ^= mask;
            expect_format(read_dataset_bytes(dir.path(), &b), &format!("dataset byte {i}"));
        }
    }
}

#[test]
fn truncation_and_extension_are_detected() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = checkpoint::encode(&sample_checkpoint(2));
    for cut in [0, 1, 10, header_len(&ckpt) - 1, header_len(&ckpt), ckpt.len() - 1] {
        expect_format(read_checkpoint_bytes(dir.path(), &ckpt[..cut]), &format!("cut {cut}"));
    }
    let mut longer = ckpt.clone();
    longer.push(0);
    expect_format(read_checkpoint_bytes(dir.path(), &longer), "extended");
}

#[test]
fn wrong_magic_between_kinds_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    expect_format(read_checkpoint_bytes(dir.path(), &sample_dataset_bytes()), "dataset as checkpoint");
    let ckpt = checkpoint::encode(&sample_checkpoint(2));
    expect_format(read_dataset_bytes(dir.path(), &ckpt), "checkpoint as dataset");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn payload_edits_are_detected(seed in 0u64..1000, pos in any::<prop::sample::Index>(), mask in 1u8..=255) {
        let dir = tempfile::tempdir().unwrap();
        let bytes = checkpoint::encode(&sample_checkpoint(seed));
        let start = header_len(&bytes);
        let i = start + pos.index(bytes.len() - start);
        let mut b = bytes.clone();
        b[i] ^= mask;
        let r = read_checkpoint_bytes(dir.path(), &b);
        let detected = matches!(r, Err(Error::Format { .. }));
        prop_assert!(detected);
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..512), prefix in any::<bool>()) {
        let dir = tempfile::tempdir().unwrap();
        let mut b = if prefix { b"MDMT-CHECKPOINT\nformat_version=1\n".to_vec() } else { Vec::new() };
        b.extend(bytes);
        prop_assert!(read_checkpoint_bytes(dir.path(), &b).is_err());
    }
}
