//! Checkpoint format: lossless round-trips, validation, size accounting.

use dseg_core::checkpoint::{
    load_checkpoint, load_checkpoint_expecting, save_checkpoint, CheckpointMeta,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
use dseg_core::unet::{UNet, UNetConfig};
use dseg_core::Error;

fn meta_for(config: UNetConfig) -> CheckpointMeta {
    CheckpointMeta {
        config,
        stage: 2,
        alpha_training: 0.6,
        iteration: 1234,
        loss_tail: vec![0.9, 0.5, 0.31],
        seed: 99,
        downsample: 1,
        patch: 32,
        roi_margin: 8,
    }
}

/// A network whose tensors are not all at init values, so round-trip
/// equality is meaningful.
fn messy_net(config: UNetConfig, seed: u64) -> UNet {
    let mut net = UNet::build(config, seed).unwrap();
    for (i, t) in net.param_tensors_mut().iter_mut().enumerate() {
        for (j, v) in t.data_mut().iter_mut().enumerate() {
            *v += ((i * 31 + j) % 17) as f32 * 0.013 - 0.1;
        }
    }
    net
}

#[test]
fn round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("net.ckpt");
    let cfg = UNetConfig { levels: 2, base_channels: 4, in_channels: 2, out_channels: 5 };
    let net = messy_net(cfg, 11);
    let meta = meta_for(cfg);
    save_checkpoint(&net, &meta, &p).unwrap();

    let (back, meta2) = load_checkpoint(&p).unwrap();
    assert_eq!(meta, meta2);
    for (a, b) in net.param_tensors().iter().zip(back.param_tensors()) {
        assert_eq!(a.data(), b.data());
        assert_eq!(a.shape(), b.shape());
    }
    for (a, b) in net.stat_values().iter().zip(back.stat_values()) {
        assert_eq!(a, b);
    }
}

#[test]
fn config_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("net.ckpt");
    let cfg3 = UNetConfig { levels: 3, base_channels: 4, in_channels: 2, out_channels: 5 };
    let net = UNet::build(cfg3, 1).unwrap();
    save_checkpoint(&net, &meta_for(cfg3), &p).unwrap();

    let cfg2 = UNetConfig { levels: 2, base_channels: 4, in_channels: 2, out_channels: 5 };
    assert!(matches!(load_checkpoint_expecting(&p, &cfg2), Err(Error::Checkpoint(_))));
    assert!(load_checkpoint_expecting(&p, &cfg3).is_ok());
}

#[test]
fn file_size_matches_format_accounting() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("net.ckpt");
    let cfg = UNetConfig { levels: 2, base_channels: 4, in_channels: 2, out_channels: 5 };
    let net = UNet::build(cfg, 5).unwrap();
    let meta = meta_for(cfg);
    save_checkpoint(&net, &meta, &p).unwrap();

    let meta_json = serde_json::to_vec(&meta).unwrap();
    let mut expected = 4 + 4 + 4 + meta_json.len() + 4; // magic, version, meta, count
    for (name, t) in net.param_names().iter().zip(net.param_tensors()) {
        expected += 4 + name.len() + 4 + 4 * t.shape().len() + 4 * t.len();
    }
    for (name, s) in net.stat_names().iter().zip(net.stat_values()) {
        expected += 4 + name.len() + ".running_mean".len() + 4 + 4 + 4 * s.mean.len();
        expected += 4 + name.len() + ".running_var".len() + 4 + 4 + 4 * s.var.len();
    }
    assert_eq!(std::fs::metadata(&p).unwrap().len() as usize, expected);
}

#[test]
fn bad_magic_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.ckpt");
    std::fs::write(&p, b"NOPE0000").unwrap();
    assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint(_))));
}

#[test]
fn wrong_version_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("v.ckpt");
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    bytes.extend_from_slice(&0u32.to_le_bytes());
    std::fs::write(&p, bytes).unwrap();
    assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint(_))));
}

#[test]
fn truncated_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.ckpt");
    let cfg = UNetConfig { levels: 2, base_channels: 4, in_channels: 2, out_channels: 5 };
    let net = UNet::build(cfg, 2).unwrap();
    save_checkpoint(&net, &meta_for(cfg), &p).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() - 10]).unwrap();
    assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint(_))));
}
