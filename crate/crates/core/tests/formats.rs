//! File round trips for datasets, checkpoints and latent dumps.

use latentdr::datagen::{generate_longtail, generate_multidomain, LongTailConfig, MultiDomainConfig, SyntheticDataset};
use latentdr::latentdr::dump::{capture, LatentDump};
use latentdr::latentdr::{AugmentRngs, DegradationKind, OperatorConfig};
use latentdr::model::{checkpoint, ModelBundle, ModelConfig};
use latentdr::{RngStreams, Tensor};

fn bundle(kind: DegradationKind, seed: u64) -> ModelBundle {
    let cfg = ModelConfig {
        input_dim: 8,
        hidden: vec![12],
        latent_dim: 16,
        classes: 4,
        share_classifier: seed % 2 == 0,
        operator: OperatorConfig::defaults_for(kind, 16),
    };
    ModelBundle::new(&cfg, &RngStreams::new(seed)).unwrap()
}

fn strip_prototypes(mut ds: SyntheticDataset) -> SyntheticDataset {
    ds.prototypes.clear();
    ds
}

#[test]
fn dataset_files_round_trip_byte_exact() {
    let dir = tempfile::tempdir().unwrap();
    let md = generate_multidomain(&MultiDomainConfig::stock(5, 3, 7, 8, 11), 11).unwrap();
    let lt = generate_longtail(&LongTailConfig::new(6, 10.0, 40, 8), 3).unwrap();
    for (name, ds) in [("md.txt", md), ("lt.txt", lt)] {
        let path = dir.path().join(name);
        ds.write(&path).unwrap();
        let back = SyntheticDataset::read(&path).unwrap();
        assert_eq!(back, strip_prototypes(ds.clone()));
        assert_eq!(back.to_text(), std::fs::read_to_string(&path).unwrap());
    }
}

#[test]
fn checkpoint_round_trip_restores_predictions() {
    let dir = tempfile::tempdir().unwrap();
    for (seed, kind) in [DegradationKind::SelfAttention, DegradationKind::Pool, DegradationKind::Gaussian]
        .into_iter()
        .enumerate()
    {
        let trained = bundle(kind, seed as u64);
        let path = dir.path().join(format!("{kind}.bin"));
        trained.save_checkpoint(&path).unwrap();
        let mut fresh = bundle(kind, seed as u64 + 100);
        fresh.load_checkpoint(&path).unwrap();
        assert_eq!(checkpoint::to_bytes(&fresh.registry), std::fs::read(&path).unwrap());
        let x = Tensor::matrix(5, 8, (0..40).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        assert_eq!(trained.logits(&x).unwrap(), fresh.logits(&x).unwrap());
    }
}

#[test]
fn checkpoint_rejects_damaged_files() {
    let b = bundle(DegradationKind::SelfAttention, 0);
    let bytes = checkpoint::to_bytes(&b.registry);
    assert!(checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(checkpoint::from_bytes(&extra).is_err());
    assert!(checkpoint::from_bytes(b"something else\n").is_err());

    let other = bundle(DegradationKind::Gaussian, 0);
    let mut reg = other.registry.clone();
    assert!(checkpoint::apply(&mut reg, checkpoint::from_bytes(&bytes).unwrap()).is_err());
}

#[test]
fn latent_dump_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let b = bundle(DegradationKind::SelfAttention, 2);
    let x = Tensor::matrix(6, 8, (0..48).map(|i| (i as f64 * 0.11).cos()).collect()).unwrap();
    let labels = vec![0, 1, 2, 3, 0, 1];
    let mut rngs = AugmentRngs::from_streams(&RngStreams::new(5));
    let d = capture(&b, &x, &labels, &mut rngs, 5, 123).unwrap();
    assert_eq!(d.z, b.latents(&x).unwrap());
    let path = dir.path().join("latents.txt");
    d.write(&path).unwrap();
    let back = LatentDump::read(&path).unwrap();
    assert_eq!(back, d);
    assert_eq!(back.to_text(), std::fs::read_to_string(&path).unwrap());
    assert!(LatentDump::parse("2 3 4 0 0\n1 2 3\n").is_err());
}
