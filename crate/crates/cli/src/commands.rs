use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use probeseg::checkpoint::Checkpoint;
use probeseg::cluster::{self, KMeansParams};
use probeseg::eval::MetricReport;
use probeseg::feature_store::{self, FeatureStore, MemoryStore, SampleSource, StoreManifest};
use probeseg::labels::{self, Provenance};
use probeseg::probe::{self, TrainConfig};
use probeseg::rng::{self, Purpose};
use probeseg::synthetic::{self, SyntheticSpec};
use serde_json::json;
use tracing::info;

use crate::record::Recorder;
use crate::{
    ClusterArgs, EvalArgs, MakeSyntheticArgs, Regime, SynthLabelsArgs, TrainArgs, VerifyArgs,
};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

/// Argument combinations clap cannot express on its own.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// A store or input file failed validation.
#[derive(Debug)]
pub struct DataError(pub String);

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for DataError {}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if cause.is::<DataError>() || cause.is::<toml::de::Error>() {
            return EXIT_DATA;
        }
        if let Some(e) = cause.downcast_ref::<probeseg::Error>() {
            return if e.is_data_error() { EXIT_DATA } else { EXIT_RUNTIME };
        }
    }
    EXIT_RUNTIME
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Creates `out`, refusing to write into the directory of any input store.
fn prepare_out_dir(out: &Path, inputs: &[&Path]) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let out_canon = fs::canonicalize(out)?;
    for input in inputs {
        let dir = if input.is_dir() {
            input.to_path_buf()
        } else {
            input.parent().map(Path::to_path_buf).unwrap_or_default()
        };
        if let Ok(c) = fs::canonicalize(&dir) {
            if c == out_canon {
                return Err(usage(format!(
                    "output directory {} is an input store; choose a separate directory",
                    out.display()
                )));
            }
        }
    }
    Ok(())
}

fn json_bytes(value: &impl serde::Serialize) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn synth_labels(args: SynthLabelsArgs) -> Result<()> {
    let target = match (args.regime, args.target_quality) {
        (Regime::Noisy, None) => return Err(usage("--regime noisy requires --target-quality")),
        (Regime::Noisy, Some(t)) => Some(t),
        _ => None,
    };
    let source = FeatureStore::open(&args.store)?;
    if args.out.join(feature_store::MANIFEST_FILE).exists() {
        return Err(usage(format!("{} already holds a store", args.out.display())));
    }
    prepare_out_dir(&args.out, &[&args.store])?;
    let provenance = match args.regime {
        Regime::Point => Provenance::Point,
        Regime::Scribble => Provenance::Scribble,
        Regime::Noisy => Provenance::Noisy,
    };
    let m = source.manifest();
    let mut rec = Recorder::new("synth-labels", &args.out);
    rec.config(&json!({
        "store": args.store,
        "regime": provenance.as_str(),
        "k": args.k,
        "thickness": args.thickness,
        "length_frac": args.length_frac,
        "target_quality": target,
    }))?;
    rec.seed("synth", args.seed);
    rec.store_hash(source.content_hash()?);

    let mut out = FeatureStore::create(
        &args.out,
        StoreManifest::new(m.patch_size, m.feature_dim, m.num_classes),
    )?;
    let out_root = fs::canonicalize(&args.out)?;
    let mut pooled = MetricReport::new(m.num_classes);
    let mut per_image = Vec::new();
    let mut labeled_pixels = 0usize;
    for (index, entry) in m.samples.iter().enumerate() {
        let sample = source.load_sample(&entry.image_id)?;
        let gt = sample.labels.as_ref().ok_or_else(|| {
            DataError(format!("sample {:?} has no ground-truth mask", entry.image_id))
        })?;
        let seed = rng::child_seed(args.seed, Purpose::Synth, index as u64);
        let mask = match args.regime {
            Regime::Point => labels::synth_points(gt, args.k, seed)?,
            Regime::Scribble => labels::synth_scribble(gt, args.thickness, args.length_frac, seed)?,
            Regime::Noisy => labels::synth_noisy(gt, target.unwrap_or(100.0), seed)?,
        };
        labeled_pixels += mask.labeled_count();
        if args.regime == Regime::Noisy {
            let mut r = MetricReport::new(m.num_classes);
            r.accumulate(&mask, gt)?;
            per_image.push(r.miou()?.miou * 100.0);
            pooled.merge(&r)?;
        }
        let feature_abs = fs::canonicalize(source.resolve(&entry.feature_path))?;
        let rel = pathdiff::diff_paths(&feature_abs, &out_root).unwrap_or(feature_abs);
        out.link_sample(
            &entry.image_id,
            &rel.to_string_lossy(),
            entry.image_h,
            entry.image_w,
            Some(&mask),
            provenance,
        )?;
    }
    rec.output(feature_store::MANIFEST_FILE);
    rec.output("masks/");

    let mut summary = json!({
        "samples": m.samples.len(),
        "labeled_pixels": labeled_pixels,
    });
    if args.regime == Regime::Noisy && !per_image.is_empty() {
        let mean = per_image.iter().sum::<f64>() / per_image.len() as f64;
        summary["measured_quality"] = json!(mean);
        summary["pooled_quality"] = json!(pooled.miou()?.miou * 100.0);
        summary["per_image_quality"] = json!(per_image);
        info!("noisy masks measured at {mean:.2} mIoU against ground truth");
    }
    rec.summary(summary);
    rec.finish()?;
    println!("wrote {} {} masks to {}", m.samples.len(), provenance.as_str(), args.out.display());
    Ok(())
}

/// Defaults, then the TOML file, then flags.
pub fn resolve_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = args.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.iterations {
        cfg.iterations = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.momentum {
        cfg.momentum = v;
    }
    if let Some(v) = args.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = args.crop {
        cfg.crop_pixels = v;
    }
    if let Some(v) = args.flip_prob {
        cfg.flip_prob = v;
    }
    if let Some(v) = args.normalization {
        cfg.normalization = v.into();
    }
    if let Some(v) = args.loss_head {
        cfg.loss_head = v.into();
    }
    if args.standardize {
        cfg.standardize_features = true;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    Ok(cfg)
}

fn feature_hashes(store: &FeatureStore) -> Result<Vec<String>> {
    store
        .feature_files()
        .iter()
        .map(|p| feature_store::file_sha256(p).map_err(Into::into))
        .collect()
}

pub fn train(args: TrainArgs) -> Result<()> {
    let cfg = resolve_train_config(&args)?;
    if args.dry_run {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    let out_dir = args.out.clone().expect("clap requires --out without --dry-run");
    let store = FeatureStore::open(&args.store)?;
    cfg.validate(store.manifest().patch_size)?;
    prepare_out_dir(&out_dir, &[&args.store])?;

    let wanted: Option<Provenance> = args.labels_provenance.map(Into::into);
    let ids: Vec<String> = store
        .manifest()
        .samples
        .iter()
        .filter(|s| s.mask_path.is_some() && wanted.is_none_or(|p| p == s.provenance))
        .map(|s| s.image_id.clone())
        .collect();
    if ids.is_empty() {
        return Err(DataError(format!(
            "no labeled samples{} in {}",
            wanted.map(|p| format!(" with provenance {}", p.as_str())).unwrap_or_default(),
            args.store.display()
        ))
        .into());
    }
    let provenance = wanted.or_else(|| {
        let first = store.manifest().samples.iter().find(|s| ids.contains(&s.image_id))?;
        let same = store
            .manifest()
            .samples
            .iter()
            .filter(|s| ids.contains(&s.image_id))
            .all(|s| s.provenance == first.provenance);
        same.then_some(first.provenance)
    });

    let mut rec = Recorder::new("train", &out_dir);
    rec.config(&cfg)?;
    rec.seed("train", cfg.seed);
    let store_hash = store.content_hash()?;
    rec.store_hash(store_hash.clone());

    let before = feature_hashes(&store)?;
    let memory = MemoryStore::preload(&store)?;
    info!("training on {} samples for {} iterations", ids.len(), cfg.iterations);
    let output = probe::train(&memory, &ids, &cfg)?;
    if feature_hashes(&store)? != before {
        anyhow::bail!("feature files changed during training");
    }

    let checkpoint = Checkpoint {
        params: output.params,
        config: cfg.clone(),
        store_hash,
        provenance,
    };
    checkpoint.save(out_dir.join("probe.ckpt"))?;
    rec.output("probe.ckpt");
    let mut csv = String::from("iteration,loss\n");
    for (i, loss) in output.history.iter().enumerate() {
        writeln!(csv, "{},{loss}", i + 1)?;
    }
    rec.write_output("loss_history.csv", csv.as_bytes())?;
    rec.summary(json!({
        "samples": ids.len(),
        "provenance": provenance.map(Provenance::as_str),
        "initial_loss": output.history.first(),
        "final_loss": output.history.last(),
        "crop_clamped": output.crop_clamped,
        "empty_batches": output.empty_batches,
    }));
    rec.finish()?;
    println!(
        "trained on {} samples; final loss {:.6}; checkpoint at {}",
        ids.len(),
        output.history.last().copied().unwrap_or(f64::NAN),
        out_dir.join("probe.ckpt").display()
    );
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let store = FeatureStore::open(&args.store)?;
    prepare_out_dir(&args.out, &[&args.store])?;
    let m = store.manifest();
    let p = &checkpoint.params;
    if p.feature_dim() != m.feature_dim || p.num_classes() != m.num_classes {
        return Err(DataError(format!(
            "checkpoint is {}x{} (features x classes) but store is {}x{}",
            p.feature_dim(),
            p.num_classes(),
            m.feature_dim,
            m.num_classes
        ))
        .into());
    }
    let mut rec = Recorder::new("eval", &args.out);
    rec.config(&json!({
        "store": args.store,
        "checkpoint": args.checkpoint,
        "checkpoint_store_hash": checkpoint.store_hash,
    }))?;
    rec.store_hash(store.content_hash()?);
    if args.save_predictions {
        fs::create_dir_all(args.out.join("predictions"))?;
    }

    let mut report = MetricReport::new(m.num_classes);
    let mut images = 0usize;
    for entry in &m.samples {
        let sample = store.load_sample(&entry.image_id)?;
        let Some(gt) = sample.labels.as_ref() else {
            continue;
        };
        let out = probe::forward(&sample.features, p)?;
        report.accumulate(&out.argmax_map, gt)?;
        images += 1;
        if args.save_predictions {
            let name = format!("predictions/{}.png", sanitize(&entry.image_id));
            out.argmax_map.save(args.out.join(&name))?;
            rec.output(&name);
        }
    }
    if images == 0 {
        return Err(DataError(format!("{} has no labeled samples", args.store.display())).into());
    }
    let summary = report.miou()?;
    let body = json!({
        "images": images,
        "num_classes": m.num_classes,
        "evaluated_pixels": report.evaluated_pixels(),
        "confusion": report.confusion(),
        "per_class_iou": summary.per_class_iou,
        "miou": summary.miou,
    });
    rec.write_output("report.json", &json_bytes(&body)?)?;
    let mut csv = String::from("class,iou,gt_pixels,predicted_pixels,true_positives\n");
    for k in 0..m.num_classes {
        let gt_px: u64 = (0..m.num_classes).map(|j| report.count(k, j)).sum();
        let pred_px: u64 = (0..m.num_classes).map(|i| report.count(i, k)).sum();
        let iou = summary.per_class_iou[k].map(|v| v.to_string()).unwrap_or_default();
        writeln!(csv, "{k},{iou},{gt_px},{pred_px},{}", report.count(k, k))?;
    }
    rec.write_output("report.csv", csv.as_bytes())?;
    rec.summary(json!({ "miou": summary.miou, "evaluated_pixels": report.evaluated_pixels() }));
    rec.finish()?;
    println!(
        "mIoU {:.4} over {} pixels in {images} images",
        summary.miou,
        report.evaluated_pixels()
    );
    Ok(())
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

pub fn cluster(args: ClusterArgs) -> Result<()> {
    let store = FeatureStore::open(&args.store)?;
    let sample = store.load_sample(&args.image_id)?;
    let f = &sample.features;
    let mut params = KMeansParams::new(args.k, args.seed);
    params.max_iter = args.max_iter;
    if args.k == 0 || args.k > f.num_tokens() || args.k > 256 {
        return Err(usage(format!(
            "--k must be between 1 and {} for this image",
            f.num_tokens().min(256)
        )));
    }
    prepare_out_dir(&args.out, &[&args.store])?;
    let mut rec = Recorder::new("cluster", &args.out);
    rec.config(&json!({
        "store": args.store,
        "image_id": args.image_id,
        "k": args.k,
        "l2_normalize": args.l2_normalize,
        "max_iter": args.max_iter,
    }))?;
    rec.seed("cluster", args.seed);
    rec.store_hash(store.content_hash()?);

    let result = cluster::cluster_map(f, &params, args.l2_normalize)?;
    let pixels =
        cluster::render_assignments(&result.assignments, f.grid_h(), f.grid_w(), f.image_h(), f.image_w());
    let png = args.out.join("clusters.png");
    labels::write_png(&png, f.image_h(), f.image_w(), &pixels, Some(&cluster::palette(args.k)))?;
    rec.output("clusters.png");
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for &a in &result.assignments {
        *sizes.entry(a).or_default() += 1;
    }
    let body = json!({
        "image_id": args.image_id,
        "k": args.k,
        "grid": [f.grid_h(), f.grid_w()],
        "inertia": result.inertia,
        "iterations": result.iterations_run,
        "inertia_history": result.inertia_history,
        "cluster_sizes": sizes.values().collect::<Vec<_>>(),
        "assignments": result.assignments,
    });
    rec.write_output("cluster.json", &json_bytes(&body)?)?;
    rec.summary(json!({ "inertia": result.inertia, "iterations": result.iterations_run }));
    rec.finish()?;
    println!(
        "k={} inertia {:.6} after {} iterations",
        args.k, result.inertia, result.iterations_run
    );
    Ok(())
}

pub fn verify_store(args: VerifyArgs) -> Result<()> {
    let report = feature_store::verify_store(&args.store);
    let bytes = json_bytes(&report)?;
    print!("{}", String::from_utf8_lossy(&bytes));
    if let Some(out) = &args.out {
        prepare_out_dir(out, &[&args.store])?;
        let mut rec = Recorder::new("verify-store", out);
        rec.config(&json!({ "store": args.store }))?;
        rec.write_output("verify.json", &bytes)?;
        rec.summary(json!({ "passed": report.passed }));
        rec.finish()?;
    }
    if !report.passed {
        let failed = report.checks.iter().filter(|c| !c.passed).count();
        return Err(DataError(format!("{failed} store check(s) failed")).into());
    }
    Ok(())
}

pub fn make_synthetic(args: MakeSyntheticArgs) -> Result<()> {
    let spec = SyntheticSpec {
        num_images: args.images,
        grid_h: args.grid,
        grid_w: args.grid,
        patch_size: args.patch,
        feature_dim: args.dim,
        num_classes: args.classes,
        noise_sigma: args.sigma,
        regions: args.regions,
        seed: args.seed,
    };
    let store = synthetic::write_store(&args.out, &spec)?;
    let mut rec = Recorder::new("make-synthetic", &args.out);
    rec.config(&spec)?;
    rec.seed("synthetic", args.seed);
    rec.store_hash(store.content_hash()?);
    rec.output(feature_store::MANIFEST_FILE);
    rec.output("features/");
    rec.output("masks/");
    rec.finish()?;
    println!("wrote {} synthetic samples to {}", args.images, args.out.display());
    Ok(())
}
