//! On-disk store of precomputed backbone features and their label masks.
//!
//! Layout:
//!
//! ```text
//! store/
//!   manifest.json
//!   features/<id>.npy    # <f4, C order, shape (grid_h, grid_w, feature_dim)
//!   masks/<id>.png       # optional, 8-bit class indices, 255 = ignore
//! ```
//!
//! Paths inside the manifest are relative to the manifest's directory. The
//! store is read-only from the training side; every write goes through a
//! temporary file followed by a rename so a crash never leaves the manifest
//! pointing at a half-written file.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::warn;

use crate::error::{Error, Result};
use crate::labels::{load_mask, LabelMask, Provenance, IGNORE_INDEX};
use crate::npy;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// Frozen backbone output for one image: a `grid_h x grid_w` patch grid of
/// `dim`-wide tokens plus the pixel extent of the source image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    image_id: String,
    image_h: usize,
    image_w: usize,
    data: Tensor<f32>,
}

impl FeatureMap {
    pub fn new(
        image_id: impl Into<String>,
        data: Tensor<f32>,
        image_h: usize,
        image_w: usize,
    ) -> Result<Self> {
        match data.shape() {
            [gh, gw, z] if *gh > 0 && *gw > 0 && *z > 0 => {}
            other => {
                return Err(Error::invalid(format!(
                    "features must be a non-empty (grid_h, grid_w, dim) tensor, got {other:?}"
                )))
            }
        }
        if image_h == 0 || image_w == 0 {
            return Err(Error::invalid("image extent must be positive"));
        }
        Ok(Self {
            image_id: image_id.into(),
            image_h,
            image_w,
            data,
        })
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn grid_h(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn grid_w(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn image_h(&self) -> usize {
        self.image_h
    }

    pub fn image_w(&self) -> usize {
        self.image_w
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn num_tokens(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    pub fn token(&self, row: usize, col: usize) -> &[f32] {
        let z = self.dim();
        let start = (row * self.grid_w() + col) * z;
        &self.data.data()[start..start + z]
    }

    /// Reverses the grid width.
    pub fn flip_horizontal(&self) -> Self {
        let (gh, gw, z) = (self.grid_h(), self.grid_w(), self.dim());
        let src = self.data.data();
        let mut out = Vec::with_capacity(src.len());
        for r in 0..gh {
            for c in (0..gw).rev() {
                let s = (r * gw + c) * z;
                out.extend_from_slice(&src[s..s + z]);
            }
        }
        Self {
            data: Tensor::new(vec![gh, gw, z], out).expect("same shape"),
            ..self.clone()
        }
    }

    /// Sub-grid `[row0, row0+h) x [col0, col0+w)` covering `image_h x image_w` pixels.
    pub fn crop_grid(
        &self,
        row0: usize,
        col0: usize,
        h: usize,
        w: usize,
        image_h: usize,
        image_w: usize,
    ) -> Result<Self> {
        if h == 0 || w == 0 || row0 + h > self.grid_h() || col0 + w > self.grid_w() {
            return Err(Error::invalid("crop window exceeds feature grid"));
        }
        let z = self.dim();
        let mut out = Vec::with_capacity(h * w * z);
        for r in row0..row0 + h {
            let s = (r * self.grid_w() + col0) * z;
            out.extend_from_slice(&self.data.data()[s..s + w * z]);
        }
        FeatureMap::new(
            self.image_id.clone(),
            Tensor::new(vec![h, w, z], out)?,
            image_h,
            image_w,
        )
    }
}

/// A feature map together with its (optional) supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub features: FeatureMap,
    pub labels: Option<LabelMask>,
    pub provenance: Provenance,
}

impl ImageSample {
    pub fn new(
        features: FeatureMap,
        labels: Option<LabelMask>,
        provenance: Provenance,
    ) -> Result<Self> {
        if let Some(l) = &labels {
            let expected = (features.image_h(), features.image_w());
            if l.dims() != expected {
                return Err(Error::invalid(format!(
                    "labels of {:?} for image {:?} of {:?}",
                    l.dims(),
                    features.image_id(),
                    expected
                )));
            }
        }
        Ok(Self {
            features,
            labels,
            provenance,
        })
    }

    pub fn image_id(&self) -> &str {
        self.features.image_id()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub image_id: String,
    pub feature_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
    pub image_h: usize,
    pub image_w: usize,
    #[serde(default)]
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub version: u32,
    pub patch_size: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub ignore_index: u32,
    pub samples: Vec<SampleEntry>,
}

impl StoreManifest {
    pub fn new(patch_size: usize, feature_dim: usize, num_classes: usize) -> Self {
        Self {
            version: MANIFEST_VERSION,
            patch_size,
            feature_dim,
            num_classes,
            ignore_index: IGNORE_INDEX as u32,
            samples: Vec::new(),
        }
    }

    /// Checks the manifest-level invariants that need no file access.
    fn validate_fields(&self, path: &Path) -> Result<()> {
        let schema = |message: String| Error::ManifestSchema {
            path: path.into(),
            message,
        };
        if self.version != MANIFEST_VERSION {
            return Err(schema(format!(
                "unsupported version {}, expected {MANIFEST_VERSION}",
                self.version
            )));
        }
        if self.feature_dim == 0 {
            return Err(schema("feature_dim must be positive".into()));
        }
        if self.patch_size == 0 {
            return Err(schema("patch_size must be positive".into()));
        }
        if self.num_classes == 0 || self.num_classes > IGNORE_INDEX as usize {
            return Err(schema(format!(
                "num_classes must be in [1, {IGNORE_INDEX}], got {}",
                self.num_classes
            )));
        }
        if self.ignore_index != IGNORE_INDEX as u32 {
            return Err(schema(format!(
                "ignore_index must be {IGNORE_INDEX}, got {}",
                self.ignore_index
            )));
        }
        let mut seen = HashSet::new();
        for s in &self.samples {
            if !seen.insert(s.image_id.as_str()) {
                return Err(Error::DuplicateImageId {
                    image_id: s.image_id.clone(),
                });
            }
            if s.image_h == 0 || s.image_w == 0 {
                return Err(schema(format!("sample {:?} has an empty image extent", s.image_id)));
            }
        }
        Ok(())
    }
}

/// Anything training and evaluation can pull samples from.
pub trait SampleSource: Sync {
    fn manifest(&self) -> &StoreManifest;
    fn load_sample(&self, image_id: &str) -> Result<ImageSample>;
    fn has_labels(&self, image_id: &str) -> Result<bool>;

    fn image_ids(&self) -> Vec<String> {
        self.manifest()
            .samples
            .iter()
            .map(|s| s.image_id.clone())
            .collect()
    }
}

/// A store opened from disk. All feature headers and masks are validated on open.
#[derive(Debug, Clone)]
pub struct FeatureStore {
    root: PathBuf,
    manifest: StoreManifest,
    warnings: Vec<String>,
}

impl FeatureStore {
    /// Opens and eagerly validates the store whose manifest is at `manifest_path`
    /// (either the `manifest.json` file or its directory).
    pub fn open(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let mut path = manifest_path.as_ref().to_path_buf();
        if path.is_dir() {
            path = path.join(MANIFEST_FILE);
        }
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: StoreManifest =
            serde_json::from_slice(&bytes).map_err(|e| Error::ManifestSchema {
                path: path.clone(),
                message: e.to_string(),
            })?;
        manifest.validate_fields(&path)?;
        let root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let mut store = Self {
            root,
            manifest,
            warnings: Vec::new(),
        };
        for entry in &store.manifest.samples {
            let w = store.check_entry(entry)?;
            store.warnings.extend(w);
        }
        for w in &store.warnings {
            warn!("{w}");
        }
        Ok(store)
    }

    /// Creates an empty store directory with a fresh manifest.
    pub fn create(root: impl AsRef<Path>, manifest: StoreManifest) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        manifest.validate_fields(&root.join(MANIFEST_FILE))?;
        if !manifest.samples.is_empty() {
            return Err(Error::invalid("a new store starts without samples"));
        }
        if root.join(MANIFEST_FILE).exists() {
            return Err(Error::invalid(format!(
                "{} already contains a store",
                root.display()
            )));
        }
        for dir in [root.clone(), root.join("features"), root.join("masks")] {
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let store = Self {
            root,
            manifest,
            warnings: Vec::new(),
        };
        store.commit_manifest(&store.manifest)?;
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.root.join(relative)
    }

    fn entry(&self, image_id: &str) -> Result<&SampleEntry> {
        self.manifest
            .samples
            .iter()
            .find(|s| s.image_id == image_id)
            .ok_or_else(|| Error::UnknownImage(image_id.to_string()))
    }

    /// Validates one entry against its files; returns non-fatal warnings.
    fn check_entry(&self, entry: &SampleEntry) -> Result<Vec<String>> {
        let path = self.resolve(&entry.feature_path);
        let header = read_feature_header(&path)?;
        let shape = &header.shape;
        if shape.len() != 3 {
            return Err(Error::DimensionMismatch {
                path,
                expected: "3-d (grid_h, grid_w, feature_dim)".into(),
                found: format!("{shape:?}"),
            });
        }
        if shape[2] != self.manifest.feature_dim {
            return Err(Error::DimensionMismatch {
                path,
                expected: format!("feature_dim {}", self.manifest.feature_dim),
                found: format!("trailing extent {}", shape[2]),
            });
        }
        let p = self.manifest.patch_size;
        let mut warnings = Vec::new();
        for (grid, image, axis) in [(shape[0], entry.image_h, "height"), (shape[1], entry.image_w, "width")] {
            let covered = grid * p;
            if covered.abs_diff(image) >= p {
                return Err(Error::DimensionMismatch {
                    path: path.clone(),
                    expected: format!("{axis} grid of ~{} patches for {image} px", image / p),
                    found: format!("{grid} patches"),
                });
            }
            if covered != image {
                warnings.push(format!(
                    "{}: image {axis} {image} is not a multiple of patch size {p}",
                    entry.image_id
                ));
            }
        }
        if let Some(mask) = &entry.mask_path {
            let mask = load_mask(self.resolve(mask), self.manifest.num_classes)?;
            if mask.dims() != (entry.image_h, entry.image_w) {
                return Err(Error::DimensionMismatch {
                    path: self.resolve(entry.mask_path.as_deref().unwrap_or_default()),
                    expected: format!("{}x{}", entry.image_h, entry.image_w),
                    found: format!("{}x{}", mask.height(), mask.width()),
                });
            }
        }
        Ok(warnings)
    }

    /// Reads the features (and mask, when present) of one sample.
    pub fn load_sample(&self, image_id: &str) -> Result<ImageSample> {
        let entry = self.entry(image_id)?;
        let path = self.resolve(&entry.feature_path);
        let (shape, data) = read_features(&path)?;
        if shape.len() != 3 || shape[2] != self.manifest.feature_dim {
            return Err(Error::DimensionMismatch {
                path,
                expected: format!("(grid_h, grid_w, {})", self.manifest.feature_dim),
                found: format!("{shape:?}"),
            });
        }
        let tensor = Tensor::new(shape, data).map_err(|e| Error::Npy {
            path: path.clone(),
            message: e.to_string(),
        })?;
        let features = FeatureMap::new(&entry.image_id, tensor, entry.image_h, entry.image_w)?;
        let labels = entry
            .mask_path
            .as_ref()
            .map(|m| load_mask(self.resolve(m), self.manifest.num_classes))
            .transpose()?;
        ImageSample::new(features, labels, entry.provenance)
    }

    fn file_stem(&self, image_id: &str) -> String {
        image_id
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || "._-".contains(c) {
                    c
                } else {
                    '_'
                }
            })
            .collect()
    }

    fn check_new_sample(&self, sample: &ImageSample) -> Result<()> {
        if self.entry(sample.image_id()).is_ok() {
            return Err(Error::DuplicateImageId {
                image_id: sample.image_id().to_string(),
            });
        }
        if sample.features.dim() != self.manifest.feature_dim {
            return Err(Error::invalid(format!(
                "sample {:?} has feature dim {}, store expects {}",
                sample.image_id(),
                sample.features.dim(),
                self.manifest.feature_dim
            )));
        }
        if let Some(l) = &sample.labels {
            if l.num_classes() != self.manifest.num_classes {
                return Err(Error::invalid(format!(
                    "mask of {:?} declares {} classes, store has {}",
                    sample.image_id(),
                    l.num_classes(),
                    self.manifest.num_classes
                )));
            }
            if l.dims() != (sample.features.image_h(), sample.features.image_w()) {
                return Err(Error::invalid(format!(
                    "mask of {:?} is {:?}, image is {}x{}",
                    sample.image_id(),
                    l.dims(),
                    sample.features.image_h(),
                    sample.features.image_w()
                )));
            }
        }
        Ok(())
    }

    /// Writes a sample's feature file, mask and manifest entry.
    pub fn write_sample(&mut self, sample: &ImageSample) -> Result<()> {
        self.write_sample_inner(sample, || Ok(()))
    }

    fn write_sample_inner(
        &mut self,
        sample: &ImageSample,
        before_commit: impl FnOnce() -> io::Result<()>,
    ) -> Result<()> {
        self.check_new_sample(sample)?;
        let stem = self.file_stem(sample.image_id());
        let feature_rel = format!("features/{stem}.npy");
        let f = &sample.features;
        let mut bytes = Vec::with_capacity(128 + f.tensor().len() * 4);
        npy::write_f32(&mut bytes, f.tensor().shape(), f.tensor().data())
            .map_err(|e| Error::io(self.resolve(&feature_rel), e))?;
        atomic_write(&self.resolve(&feature_rel), &bytes)?;
        let mask_rel = match &sample.labels {
            Some(mask) => Some(self.write_mask(&stem, mask)?),
            None => None,
        };
        let entry = SampleEntry {
            image_id: sample.image_id().to_string(),
            feature_path: feature_rel,
            mask_path: mask_rel,
            image_h: f.image_h(),
            image_w: f.image_w(),
            provenance: sample.provenance,
        };
        self.append_entry(entry, before_commit)
    }

    /// Adds a sample whose feature file already exists elsewhere (e.g. in the
    /// store a label set was derived from). `feature_path` is relative to this
    /// store's root. Only the mask is written.
    pub fn link_sample(
        &mut self,
        image_id: &str,
        feature_path: &str,
        image_h: usize,
        image_w: usize,
        labels: Option<&LabelMask>,
        provenance: Provenance,
    ) -> Result<()> {
        if self.entry(image_id).is_ok() {
            return Err(Error::DuplicateImageId {
                image_id: image_id.to_string(),
            });
        }
        let mut entry = SampleEntry {
            image_id: image_id.to_string(),
            feature_path: feature_path.to_string(),
            mask_path: None,
            image_h,
            image_w,
            provenance,
        };
        if let Some(l) = labels {
            if l.dims() != (image_h, image_w) || l.num_classes() != self.manifest.num_classes {
                return Err(Error::invalid(format!(
                    "mask for {image_id:?} does not match image extent or class count"
                )));
            }
        }
        // validate the referenced features before anything is written
        let probe = SampleEntry {
            mask_path: None,
            ..entry.clone()
        };
        self.check_entry(&probe)?;
        if let Some(l) = labels {
            let stem = self.file_stem(image_id);
            entry.mask_path = Some(self.write_mask(&stem, l)?);
        }
        self.append_entry(entry, || Ok(()))
    }

    fn write_mask(&self, stem: &str, mask: &LabelMask) -> Result<String> {
        let rel = format!("masks/{stem}.png");
        let target = self.resolve(&rel);
        let tmp = temp_sibling(&target);
        mask.save(&tmp)?;
        fs::rename(&tmp, &target).map_err(|e| Error::io(&target, e))?;
        Ok(rel)
    }

    fn append_entry(
        &mut self,
        entry: SampleEntry,
        before_commit: impl FnOnce() -> io::Result<()>,
    ) -> Result<()> {
        let mut next = self.manifest.clone();
        next.samples.push(entry);
        before_commit().map_err(|e| Error::io(self.manifest_path(), e))?;
        self.commit_manifest(&next)?;
        self.manifest = next;
        Ok(())
    }

    fn commit_manifest(&self, manifest: &StoreManifest) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(manifest).expect("manifest serializes");
        bytes.push(b'\n');
        atomic_write(&self.manifest_path(), &bytes)
    }

    /// Absolute paths of every feature file referenced by the manifest.
    pub fn feature_files(&self) -> Vec<PathBuf> {
        self.manifest
            .samples
            .iter()
            .map(|s| self.resolve(&s.feature_path))
            .collect()
    }

    /// SHA-256 over the manifest and every referenced feature and mask file.
    pub fn content_hash(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        let manifest = self.manifest_path();
        hasher.update(fs::read(&manifest).map_err(|e| Error::io(&manifest, e))?);
        for s in &self.manifest.samples {
            let files = std::iter::once(&s.feature_path).chain(s.mask_path.as_ref());
            for rel in files {
                let path = self.resolve(rel);
                hash_file(&mut hasher, &path)?;
            }
        }
        Ok(hex(&hasher.finalize()))
    }
}

impl SampleSource for FeatureStore {
    fn manifest(&self) -> &StoreManifest {
        &self.manifest
    }

    fn load_sample(&self, image_id: &str) -> Result<ImageSample> {
        FeatureStore::load_sample(self, image_id)
    }

    fn has_labels(&self, image_id: &str) -> Result<bool> {
        Ok(self.entry(image_id)?.mask_path.is_some())
    }
}

/// Samples held in memory, e.g. a store preloaded for repeated passes.
#[derive(Debug, Clone)]
pub struct MemoryStore {
    manifest: StoreManifest,
    samples: Vec<ImageSample>,
}

impl MemoryStore {
    pub fn new(manifest: StoreManifest, samples: Vec<ImageSample>) -> Result<Self> {
        let mut manifest = manifest;
        manifest.samples = samples
            .iter()
            .map(|s| SampleEntry {
                image_id: s.image_id().to_string(),
                feature_path: String::new(),
                mask_path: None,
                image_h: s.features.image_h(),
                image_w: s.features.image_w(),
                provenance: s.provenance,
            })
            .collect();
        manifest.validate_fields(Path::new("<memory>"))?;
        for s in &samples {
            if s.features.dim() != manifest.feature_dim {
                return Err(Error::invalid(format!(
                    "sample {:?} has feature dim {}, expected {}",
                    s.image_id(),
                    s.features.dim(),
                    manifest.feature_dim
                )));
            }
        }
        Ok(Self { manifest, samples })
    }

    /// Reads every sample of `source` into memory.
    pub fn preload(source: &impl SampleSource) -> Result<Self> {
        let samples = source
            .image_ids()
            .iter()
            .map(|id| source.load_sample(id))
            .collect::<Result<Vec<_>>>()?;
        Self::new(source.manifest().clone(), samples)
    }

    pub fn samples(&self) -> &[ImageSample] {
        &self.samples
    }
}

impl SampleSource for MemoryStore {
    fn manifest(&self) -> &StoreManifest {
        &self.manifest
    }

    fn load_sample(&self, image_id: &str) -> Result<ImageSample> {
        self.samples
            .iter()
            .find(|s| s.image_id() == image_id)
            .cloned()
            .ok_or_else(|| Error::UnknownImage(image_id.to_string()))
    }

    fn has_labels(&self, image_id: &str) -> Result<bool> {
        self.samples
            .iter()
            .find(|s| s.image_id() == image_id)
            .map(|s| s.labels.is_some())
            .ok_or_else(|| Error::UnknownImage(image_id.to_string()))
    }
}

fn read_feature_header(path: &Path) -> Result<npy::NpyHeader> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let header = npy::read_header(&mut BufReader::new(file)).map_err(|e| Error::Npy {
        path: path.into(),
        message: e.to_string(),
    })?;
    npy::require_f32(&header).map_err(|e| Error::Npy {
        path: path.into(),
        message: e.to_string(),
    })?;
    Ok(header)
}

fn read_features(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    npy::read_f32(&mut BufReader::new(file)).map_err(|e| match e.kind() {
        io::ErrorKind::InvalidData | io::ErrorKind::UnexpectedEof => Error::Npy {
            path: path.into(),
            message: e.to_string(),
        },
        _ => Error::io(path, e),
    })
}

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(format!(".tmp-{}", std::process::id()));
    path.with_file_name(name)
}

/// Write to a temporary sibling, then rename over `path`.
pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = temp_sibling(path);
    let result = File::create(&tmp).and_then(|f| {
        let mut w = BufWriter::new(f);
        w.write_all(bytes)?;
        w.into_inner().map_err(|e| e.into_error())?.sync_all()
    });
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(&tmp, e));
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn hash_file(hasher: &mut Sha256, path: &Path) -> Result<()> {
    let mut file = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Ok(());
        }
        hasher.update(&buf[..n]);
    }
}

/// SHA-256 of one file, hex encoded.
pub fn file_sha256(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    hash_file(&mut hasher, path)?;
    Ok(hex(&hasher.finalize()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One line of a [`verify_store`] report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyCheck {
    pub subject: String,
    pub check: String,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub checks: Vec<VerifyCheck>,
}

/// Audits a store without stopping at the first problem: manifest schema,
/// then per-sample feature dtype, shape, raster length and mask validity.
pub fn verify_store(path: impl AsRef<Path>) -> VerifyReport {
    let mut checks = Vec::new();
    let mut record = |subject: &str, check: &str, outcome: std::result::Result<(), String>| {
        checks.push(VerifyCheck {
            subject: subject.to_string(),
            check: check.to_string(),
            passed: outcome.is_ok(),
            message: outcome.err(),
        });
    };
    let mut manifest_path = path.as_ref().to_path_buf();
    if manifest_path.is_dir() {
        manifest_path = manifest_path.join(MANIFEST_FILE);
    }
    let subject = manifest_path.display().to_string();
    let manifest = fs::read(&manifest_path)
        .map_err(|e| e.to_string())
        .and_then(|b| serde_json::from_slice::<StoreManifest>(&b).map_err(|e| e.to_string()));
    let manifest = match manifest {
        Ok(m) => {
            record(&subject, "manifest-parse", Ok(()));
            m
        }
        Err(e) => {
            record(&subject, "manifest-parse", Err(e));
            let passed = false;
            return VerifyReport { passed, checks };
        }
    };
    record(
        &subject,
        "manifest-fields",
        manifest.validate_fields(&manifest_path).map_err(|e| e.to_string()),
    );
    let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let store = FeatureStore {
        root: root.clone(),
        manifest: manifest.clone(),
        warnings: Vec::new(),
    };
    for entry in &manifest.samples {
        let fpath = root.join(&entry.feature_path);
        let fsubject = fpath.display().to_string();
        let header = read_feature_header(&fpath);
        record(
            &fsubject,
            "dtype",
            header.as_ref().map(|_| ()).map_err(|e| e.to_string()),
        );
        let Ok(header) = header else { continue };
        let shape_ok = if header.shape.len() != 3 {
            Err(format!("expected 3-d shape, found {:?}", header.shape))
        } else if header.shape[2] != manifest.feature_dim {
            Err(format!(
                "dimension mismatch: trailing extent {} but manifest feature_dim {}",
                header.shape[2], manifest.feature_dim
            ))
        } else {
            Ok(())
        };
        record(&fsubject, "shape", shape_ok);
        let expected_len = (header.data_offset + 4 * header.num_elements()) as u64;
        let length = fs::metadata(&fpath)
            .map_err(|e| e.to_string())
            .and_then(|m| {
                if m.len() == expected_len {
                    Ok(())
                } else {
                    Err(format!("file is {} bytes, expected {expected_len}", m.len()))
                }
            });
        record(&fsubject, "length", length);
        let grid = store.check_entry(&SampleEntry {
            mask_path: None,
            ..entry.clone()
        });
        record(
            &fsubject,
            "grid-vs-image",
            grid.map(|_| ()).map_err(|e| e.to_string()),
        );
        if let Some(mask_rel) = &entry.mask_path {
            let mpath = root.join(mask_rel);
            let outcome = load_mask(&mpath, manifest.num_classes)
                .map_err(|e| e.to_string())
                .and_then(|m| {
                    if m.dims() == (entry.image_h, entry.image_w) {
                        Ok(())
                    } else {
                        Err(format!(
                            "mask is {:?}, image is {}x{}",
                            m.dims(),
                            entry.image_h,
                            entry.image_w
                        ))
                    }
                });
            record(&mpath.display().to_string(), "mask", outcome);
        }
    }
    let passed = checks.iter().all(|c| c.passed);
    VerifyReport { passed, checks }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, gh: usize, gw: usize, z: usize, patch: usize, labeled: bool) -> ImageSample {
        let data: Vec<f32> = (0..gh * gw * z).map(|i| (i as f32 * 0.25).sin()).collect();
        let features = FeatureMap::new(id, Tensor::new(vec![gh, gw, z], data).unwrap(), gh * patch, gw * patch)
            .unwrap();
        let labels = labeled.then(|| {
            let n = gh * patch * gw * patch;
            LabelMask::new(gh * patch, gw * patch, (0..n).map(|i| (i % 3) as u8).collect(), 3).unwrap()
        });
        ImageSample::new(features, labels, Provenance::Gt).unwrap()
    }

    fn new_store(dir: &Path) -> FeatureStore {
        FeatureStore::create(dir, StoreManifest::new(2, 4, 3)).unwrap()
    }

    #[test]
    fn write_then_load_is_bitwise_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = new_store(dir.path());
        let s = sample("img/0", 3, 2, 4, 2, true);
        store.write_sample(&s).unwrap();
        let reopened = FeatureStore::open(dir.path()).unwrap();
        assert_eq!(reopened.manifest().samples.len(), 1);
        assert!(reopened.warnings().is_empty());
        let back = reopened.load_sample("img/0").unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn sample_without_mask_loads_features_only() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = new_store(dir.path());
        store.write_sample(&sample("a", 2, 2, 4, 2, false)).unwrap();
        let back = FeatureStore::open(dir.path()).unwrap().load_sample("a").unwrap();
        assert!(back.labels.is_none());
        assert_eq!(back.features.grid_h(), 2);
    }

    #[test]
    fn unknown_id_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let store = new_store(dir.path());
        assert!(matches!(store.load_sample("nope"), Err(Error::UnknownImage(_))));
    }

    #[test]
    fn mismatched_label_dims_rejected_before_any_write() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = new_store(dir.path());
        let mut s = sample("a", 2, 2, 4, 2, false);
        s.labels = Some(LabelMask::ignored(3, 3, 3).unwrap());
        assert!(store.write_sample(&s).is_err());
        assert_eq!(fs::read_dir(dir.path().join("features")).unwrap().count(), 0);
        assert_eq!(fs::read_dir(dir.path().join("masks")).unwrap().count(), 0);
    }

    #[test]
    fn interrupted_write_leaves_manifest_valid_and_without_sample() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = new_store(dir.path());
        store.write_sample(&sample("kept", 2, 2, 4, 2, true)).unwrap();
        let err = store
            .write_sample_inner(&sample("lost", 2, 2, 4, 2, true), || {
                Err(io::Error::other("simulated crash"))
            })
            .unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        let reopened = FeatureStore::open(dir.path()).unwrap();
        let ids = reopened.image_ids();
        assert_eq!(ids, vec!["kept".to_string()]);
        assert_eq!(store.image_ids(), ids);
    }

    #[test]
    fn duplicate_ids_are_rejected_on_open() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = new_store(dir.path());
        store.write_sample(&sample("a", 2, 2, 4, 2, false)).unwrap();
        let mut m = store.manifest().clone();
        m.samples.push(m.samples[0].clone());
        fs::write(store.manifest_path(), serde_json::to_vec(&m).unwrap()).unwrap();
        assert!(matches!(
            FeatureStore::open(dir.path()),
            Err(Error::DuplicateImageId { image_id }) if image_id == "a"
        ));
        assert!(matches!(store.write_sample(&sample("a", 2, 2, 4, 2, false)),
            Err(Error::DuplicateImageId { .. })));
    }

    #[test]
    fn feature_dim_disagreement_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = new_store(dir.path());
        store.write_sample(&sample("a", 2, 2, 4, 2, false)).unwrap();
        store.write_sample(&sample("b", 2, 2, 4, 2, false)).unwrap();
        // rewrite b's header with a wrong trailing extent
        let path = dir.path().join("features/b.npy");
        let mut bytes = Vec::new();
        npy::write_f32(&mut bytes, &[2, 1, 8], &[0.0; 16]).unwrap();
        fs::write(&path, bytes).unwrap();
        match FeatureStore::open(dir.path()) {
            Err(Error::DimensionMismatch { path: p, .. }) => assert_eq!(p, path),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn corrupted_dtype_byte_is_a_decode_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = new_store(dir.path());
        store.write_sample(&sample("a", 2, 2, 4, 2, false)).unwrap();
        let path = dir.path().join("features/a.npy");
        let mut bytes = fs::read(&path).unwrap();
        let pos = bytes.windows(3).position(|w| w == b"<f4").unwrap();
        bytes[pos] = b'>';
        fs::write(&path, bytes).unwrap();
        let err = store.load_sample("a").unwrap_err();
        assert!(matches!(err, Error::Npy { .. }));
        assert!(err.to_string().contains("little-endian float32"), "{err}");
    }

    #[test]
    fn missing_manifest_and_bad_schema() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            FeatureStore::open(dir.path().join("manifest.json")),
            Err(Error::Io { .. })
        ));
        fs::write(dir.path().join("manifest.json"), b"{\"version\": 1}").unwrap();
        assert!(matches!(
            FeatureStore::open(dir.path()),
            Err(Error::ManifestSchema { .. })
        ));
    }

    #[test]
    fn ignore_index_inside_class_range_is_rejected() {
        let mut m = StoreManifest::new(14, 8, 21);
        m.ignore_index = 3;
        assert!(m.validate_fields(Path::new("m.json")).is_err());
    }

    #[test]
    fn verify_reports_truncation_and_dim_edits() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = new_store(dir.path());
        store.write_sample(&sample("a", 2, 2, 4, 2, true)).unwrap();
        store.write_sample(&sample("b", 2, 2, 4, 2, false)).unwrap();
        assert!(verify_store(dir.path()).passed);

        let path = dir.path().join("features/b.npy");
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let report = verify_store(dir.path());
        assert!(!report.passed);
        let failed: Vec<_> = report.checks.iter().filter(|c| !c.passed).collect();
        assert_eq!(failed.len(), 1);
        assert_eq!(failed[0].check, "length");
        assert!(failed[0].subject.ends_with("b.npy"));

        fs::write(&path, bytes).unwrap();
        let mut m = store.manifest().clone();
        m.feature_dim = 5;
        fs::write(store.manifest_path(), serde_json::to_vec(&m).unwrap()).unwrap();
        let report = verify_store(dir.path());
        assert!(report
            .checks
            .iter()
            .any(|c| !c.passed && c.check == "shape" && c.message.as_deref().unwrap().contains("dimension mismatch")));
    }

    #[test]
    fn flip_and_crop_of_feature_grid() {
        let s = sample("a", 2, 3, 2, 2, false).features;
        assert_eq!(s.flip_horizontal().flip_horizontal(), s);
        assert_eq!(s.flip_horizontal().token(1, 0), s.token(1, 2));
        let c = s.crop_grid(1, 1, 1, 2, 2, 4).unwrap();
        assert_eq!(c.token(0, 1), s.token(1, 2));
        assert!(s.crop_grid(1, 1, 2, 2, 4, 4).is_err());
    }
}
