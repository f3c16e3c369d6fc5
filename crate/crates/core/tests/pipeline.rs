//! Store on disk -> derived label store -> training -> evaluation.

mod common;

use probeseg::checkpoint::Checkpoint;
use probeseg::eval::MetricReport;
use probeseg::feature_store::{verify_store, FeatureStore, SampleSource, StoreManifest};
use probeseg::labels::{self, Provenance};
use probeseg::probe::{self, TrainConfig};
use probeseg::synthetic::{self, SyntheticSpec};

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        num_images: 6,
        grid_h: 8,
        grid_w: 8,
        patch_size: 4,
        ..SyntheticSpec::default()
    }
}

#[test]
fn derived_point_store_trains_a_probe() {
    let dir = tempfile::tempdir().unwrap();
    let gt_root = dir.path().join("gt");
    let gt = synthetic::write_store(&gt_root, &small_spec()).unwrap();
    assert!(verify_store(&gt_root).passed);

    let m = gt.manifest().clone();
    let pts_root = dir.path().join("points");
    let mut pts = FeatureStore::create(&pts_root, StoreManifest::new(m.patch_size, m.feature_dim, m.num_classes)).unwrap();
    for (i, entry) in m.samples.iter().enumerate() {
        let truth = gt.load_sample(&entry.image_id).unwrap().labels.unwrap();
        let mask = labels::synth_points(&truth, 2, i as u64).unwrap();
        let rel = format!("../gt/{}", entry.feature_path);
        pts.link_sample(&entry.image_id, &rel, entry.image_h, entry.image_w, Some(&mask), Provenance::Point)
            .unwrap();
    }
    let pts = FeatureStore::open(&pts_root).unwrap();
    assert!(pts.warnings().is_empty());
    assert!(verify_store(&pts_root).passed);
    let s = pts.load_sample(&m.samples[0].image_id).unwrap();
    assert_eq!(s.provenance, Provenance::Point);

    let gt_hash = gt.content_hash().unwrap();
    let cfg = TrainConfig {
        iterations: 200,
        learning_rate: 0.1,
        batch_size: 3,
        ..TrainConfig::default()
    };
    let out = probe::train(&pts, &pts.image_ids(), &cfg).unwrap();
    assert_eq!(gt.content_hash().unwrap(), gt_hash);

    let ck_path = dir.path().join("p.ckpt");
    Checkpoint {
        params: out.params,
        config: cfg,
        store_hash: pts.content_hash().unwrap(),
        provenance: Some(Provenance::Point),
    }
    .save(&ck_path)
    .unwrap();
    let params = Checkpoint::load(&ck_path).unwrap().params;

    let mut dense = MetricReport::new(m.num_classes);
    let mut sparse = MetricReport::new(m.num_classes);
    let mut point_count = 0u64;
    for id in gt.image_ids() {
        let truth = gt.load_sample(&id).unwrap();
        let pred = probe::forward(&truth.features, &params).unwrap().argmax_map;
        dense.accumulate(&pred, truth.labels.as_ref().unwrap()).unwrap();
        let p = pts.load_sample(&id).unwrap().labels.unwrap();
        point_count += p.labeled_count() as u64;
        sparse.accumulate(&pred, &p).unwrap();
    }
    assert_eq!(dense.evaluated_pixels(), (6 * 32 * 32) as u64);
    assert_eq!(sparse.evaluated_pixels(), point_count);
    assert!(dense.miou().unwrap().miou > 0.8, "{:?}", dense.miou());
}

#[test]
fn training_rejects_unlabeled_samples() {
    let dir = tempfile::tempdir().unwrap();
    let gt = synthetic::write_store(dir.path().join("gt"), &small_spec()).unwrap();
    let root = dir.path().join("bare");
    let m = gt.manifest();
    let mut bare = FeatureStore::create(&root, StoreManifest::new(m.patch_size, m.feature_dim, m.num_classes)).unwrap();
    let e = &m.samples[0];
    bare.link_sample(&e.image_id, &format!("../gt/{}", e.feature_path), e.image_h, e.image_w, None, Provenance::Gt)
        .unwrap();
    let err = probe::train(&bare, &bare.image_ids(), &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, probeseg::Error::MissingLabels(_)), "{err}");
}
