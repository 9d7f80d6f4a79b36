//! Synthetic multi-domain datasets and their on-disk format.
//!
//! Each class has a Gaussian centroid in feature space; each domain applies
//! its own affine transform (rotation, shift, scale) to every sample, so the
//! same class looks different from one domain to the next. The strength of
//! that shift is a single knob in `[0, 1]`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checksum::{fnv1a, Fnv1a};
use crate::error::{Error, Result};
use crate::rng::{self, stream};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

const CENTROID_STD: f64 = 3.0;
const NOISE_STD: f64 = 1.0;
/// Largest Givens angle at full shift strength.
const MAX_ANGLE: f64 = std::f64::consts::FRAC_PI_3;
/// Shift norm at full shift strength.
const MAX_SHIFT_NORM: f64 = 8.0;
/// Log-scale range at full shift strength.
const MAX_LOG_SCALE: f64 = 0.4;

const CLASS_NAMES: [&str; 20] = [
    "dog", "cat", "car", "chair", "tree", "cup", "bike", "lamp", "house", "bird", "boat", "clock",
    "shoe", "phone", "horse", "guitar", "bottle", "apple", "table", "kettle",
];
const DOMAIN_NAMES: [&str; 8] = [
    "photo",
    "sketch",
    "cartoon",
    "painting",
    "clipart",
    "product",
    "infograph",
    "quickdraw",
];

#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct DomainId(pub u32);

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainInfo {
    pub id: DomainId,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub domain: DomainId,
    pub class: usize,
    pub features: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Provenance {
    Synthetic { seed: u64, shift_strength: f32 },
    Imported { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub name: String,
    pub feature_dim: usize,
    pub domains: Vec<DomainInfo>,
    pub classes: Vec<String>,
    pub samples: Vec<Sample>,
    pub provenance: Provenance,
}

impl DomainDataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn domain_ids(&self) -> Vec<DomainId> {
        self.domains.iter().map(|d| d.id).collect()
    }

    pub fn domain_name(&self, id: DomainId) -> Option<&str> {
        self.domains
            .iter()
            .find(|d| d.id == id)
            .map(|d| d.name.as_str())
    }

    /// Indices of the samples belonging to `domain`, in storage order.
    pub fn indices_in(&self, domain: DomainId) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.domain == domain)
            .map(|(i, _)| i)
            .collect()
    }

    /// Checks ids and labels are in range and every feature vector has `feature_dim` entries.
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::Schema(format!(
                "need at least 2 classes, got {}",
                self.classes.len()
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for d in &self.domains {
            if !seen.insert(d.id) {
                return Err(Error::Schema(format!("duplicate domain id {}", d.id)));
            }
        }
        for (i, s) in self.samples.iter().enumerate() {
            if !seen.contains(&s.domain) {
                return Err(Error::Schema(format!(
                    "sample {i} has unknown domain {}",
                    s.domain
                )));
            }
            if s.class >= self.classes.len() {
                return Err(Error::Schema(format!(
                    "sample {i} has class {} of {}",
                    s.class,
                    self.classes.len()
                )));
            }
            if s.features.len() != self.feature_dim {
                return Err(Error::Schema(format!(
                    "sample {i} has {} features, expected {}",
                    s.features.len(),
                    self.feature_dim
                )));
            }
        }
        Ok(())
    }

    /// Hash of classes and sample payloads, independent of name and provenance.
    pub fn content_fingerprint(&self) -> u64 {
        let mut h = Fnv1a::new();
        h.update(&(self.feature_dim as u64).to_le_bytes());
        for c in &self.classes {
            h.update(c.as_bytes());
            h.update(&[0]);
        }
        for d in &self.domains {
            h.update(&d.id.0.to_le_bytes());
        }
        for s in &self.samples {
            h.update(&s.domain.0.to_le_bytes());
            h.update(&(s.class as u64).to_le_bytes());
            for x in &s.features {
                h.update(&x.to_le_bytes());
            }
        }
        h.finish()
    }
}

/// Parameters of a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub classes: usize,
    pub domains: usize,
    pub shots: usize,
    pub feature_dim: usize,
    pub shift_strength: f32,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            classes: 5,
            domains: 4,
            shots: 16,
            feature_dim: 64,
            shift_strength: 0.8,
            seed: 0,
        }
    }
}

/// Two ready-made dataset families sharing class names but not centroids or domain styles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    A,
    B,
}

impl Family {
    /// Offset mixed into the seed so the two families never share a stream.
    pub fn seed_offset(self) -> u64 {
        match self {
            Family::A => 0,
            Family::B => 0x5eed_b000,
        }
    }

    pub fn spec(self, seed: u64) -> GenSpec {
        GenSpec {
            seed: seed.wrapping_add(self.seed_offset()),
            ..GenSpec::default()
        }
    }
}

/// Seeded affine map applied to every sample of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainTransform {
    /// Row-major `feature_dim × feature_dim` orthogonal matrix.
    pub rotation: Vec<f64>,
    pub shift: Vec<f64>,
    pub scale: f64,
    dim: usize,
}

impl DomainTransform {
    pub fn identity(dim: usize) -> Self {
        let mut rotation = vec![0.0; dim * dim];
        for i in 0..dim {
            rotation[i * dim + i] = 1.0;
        }
        DomainTransform {
            rotation,
            shift: vec![0.0; dim],
            scale: 1.0,
            dim,
        }
    }

    /// Two sweeps of Givens rotations over random coordinate pairings, with
    /// angles, shift norm and log-scale all proportional to `strength`.
    pub fn random(dim: usize, strength: f64, rng: &mut rng::Rng) -> Self {
        let mut t = Self::identity(dim);
        let mut order: Vec<usize> = (0..dim).collect();
        for _ in 0..2 {
            order.shuffle(rng);
            for pair in order.chunks_exact(2) {
                let theta = strength * MAX_ANGLE * rng.random_range(-1.0..1.0);
                t.givens(pair[0], pair[1], theta);
            }
        }
        let dir: Vec<f64> = (0..dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let norm = dir
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
            .max(f64::MIN_POSITIVE);
        t.shift = dir
            .iter()
            .map(|x| x / norm * strength * MAX_SHIFT_NORM)
            .collect();
        t.scale = (strength * MAX_LOG_SCALE * rng.random_range(-1.0..1.0)).exp();
        t
    }

    /// Left-multiplies the rotation by a Givens rotation in the `(i, j)` plane.
    fn givens(&mut self, i: usize, j: usize, theta: f64) {
        let (s, c) = theta.sin_cos();
        let n = self.dim;
        for col in 0..n {
            let a = self.rotation[i * n + col];
            let b = self.rotation[j * n + col];
            self.rotation[i * n + col] = c * a - s * b;
            self.rotation[j * n + col] = s * a + c * b;
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f32> {
        let n = self.dim;
        (0..n)
            .map(|r| {
                let rot: f64 = (0..n).map(|c| self.rotation[r * n + c] * x[c]).sum();
                (self.scale * rot + self.shift[r]) as f32
            })
            .collect()
    }

    /// `max |RᵀR − I|`.
    pub fn orthogonality_error(&self) -> f64 {
        let n = self.dim;
        let mut worst = 0.0f64;
        for a in 0..n {
            for b in 0..n {
                let dot: f64 = (0..n)
                    .map(|k| self.rotation[k * n + a] * self.rotation[k * n + b])
                    .sum();
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }
}

pub fn class_name(i: usize) -> String {
    CLASS_NAMES
        .get(i)
        .map_or_else(|| format!("class{i}"), |s| s.to_string())
}

pub fn domain_name(i: usize) -> String {
    DOMAIN_NAMES
        .get(i)
        .map_or_else(|| format!("domain{i}"), |s| s.to_string())
}

/// Class centroid: half of its variance is tied to the class name alone, the
/// other half to the dataset seed, so datasets drawn with different seeds but
/// shared class names are related without being identical.
fn centroid(name: &str, seed: u64, dim: usize) -> Vec<f64> {
    let mut shared = rng::seeded(0, &[stream::CENTROID, fnv1a(name.as_bytes())]);
    let mut own = rng::seeded(seed, &[stream::CENTROID, fnv1a(name.as_bytes())]);
    let half = std::f64::consts::FRAC_1_SQRT_2;
    (0..dim)
        .map(|_| {
            let a: f64 = shared.sample(StandardNormal);
            let b: f64 = own.sample(StandardNormal);
            CENTROID_STD * half * (a + b)
        })
        .collect()
}

pub fn domain_transforms(spec: &GenSpec) -> Vec<DomainTransform> {
    (0..spec.domains)
        .map(|d| {
            if spec.shift_strength == 0.0 {
                DomainTransform::identity(spec.feature_dim)
            } else {
                let mut r = rng::seeded(spec.seed, &[stream::DOMAIN, d as u64]);
                DomainTransform::random(spec.feature_dim, f64::from(spec.shift_strength), &mut r)
            }
        })
        .collect()
}

pub fn gen_dataset(spec: &GenSpec) -> Result<DomainDataset> {
    if spec.classes < 2 || spec.domains < 2 || spec.shots < 1 || spec.feature_dim < 2 {
        return Err(Error::Config(format!("invalid dataset sizes: {spec:?}")));
    }
    if !(0.0..=1.0).contains(&spec.shift_strength) {
        return Err(Error::Config(format!(
            "shift strength {} outside [0, 1]",
            spec.shift_strength
        )));
    }
    let classes: Vec<String> = (0..spec.classes).map(class_name).collect();
    let centroids: Vec<Vec<f64>> = classes
        .iter()
        .map(|c| centroid(c, spec.seed, spec.feature_dim))
        .collect();
    let transforms = domain_transforms(spec);
    let mut samples = Vec::with_capacity(spec.domains * spec.classes * spec.shots);
    for (d, transform) in transforms.iter().enumerate() {
        for (k, c) in centroids.iter().enumerate() {
            let mut r = rng::seeded(spec.seed, &[stream::SAMPLE, d as u64, k as u64]);
            for _ in 0..spec.shots {
                let x: Vec<f64> = c
                    .iter()
                    .map(|&m| m + NOISE_STD * r.sample::<f64, _>(StandardNormal))
                    .collect();
                samples.push(Sample {
                    domain: DomainId(d as u32),
                    class: k,
                    features: transform.apply(&x),
                });
            }
        }
    }
    Ok(DomainDataset {
        name: format!("synthetic-s{}", spec.seed),
        feature_dim: spec.feature_dim,
        domains: (0..spec.domains)
            .map(|d| DomainInfo {
                id: DomainId(d as u32),
                name: domain_name(d),
            })
            .collect(),
        classes,
        samples,
        provenance: Provenance::Synthetic {
            seed: spec.seed,
            shift_strength: spec.shift_strength,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestDomain {
    pub id: u32,
    pub name: String,
    pub blob: String,
    pub count: usize,
}

/// JSON manifest describing a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    pub version: u32,
    pub feature_dim: usize,
    pub domains: Vec<ManifestDomain>,
    pub classes: Vec<String>,
    /// File name → FNV-1a 64 checksum as 16 hex digits.
    #[serde(default)]
    pub checksums: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

/// Sidecar file holding one little-endian `u16` class id per row of `blob`.
pub fn labels_file(blob: &str) -> String {
    format!("{blob}.labels")
}

fn encode_blob(rows: &[&Sample], dim: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + rows.len() * dim * 4);
    out.extend_from_slice(&(rows.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for s in rows {
        for x in &s.features {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

fn encode_labels(rows: &[&Sample]) -> Vec<u8> {
    rows.iter()
        .flat_map(|s| (s.class as u16).to_le_bytes())
        .collect()
}

fn hex(x: u64) -> String {
    format!("{x:016x}")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes `manifest.json`, one feature blob and one label sidecar per domain.
pub fn save_dataset(ds: &DomainDataset, dir: &Path) -> Result<PathBuf> {
    ds.validate()?;
    if ds.classes.len() > usize::from(u16::MAX) + 1 {
        return Err(Error::Schema(
            "more classes than u16 labels can address".into(),
        ));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut domains = Vec::new();
    let mut checksums = BTreeMap::new();
    for d in &ds.domains {
        let rows: Vec<&Sample> = ds.samples.iter().filter(|s| s.domain == d.id).collect();
        let blob = format!("domain_{}.f32", d.id);
        let labels = labels_file(&blob);
        let blob_bytes = encode_blob(&rows, ds.feature_dim);
        let label_bytes = encode_labels(&rows);
        write_file(&dir.join(&blob), &blob_bytes)?;
        write_file(&dir.join(&labels), &label_bytes)?;
        checksums.insert(blob.clone(), hex(fnv1a(&blob_bytes)));
        checksums.insert(labels, hex(fnv1a(&label_bytes)));
        domains.push(ManifestDomain {
            id: d.id.0,
            name: d.name.clone(),
            blob,
            count: rows.len(),
        });
    }
    let manifest = Manifest {
        name: ds.name.clone(),
        version: FORMAT_VERSION,
        feature_dim: ds.feature_dim,
        domains,
        classes: ds.classes.clone(),
        checksums,
        provenance: Some(ds.provenance.clone()),
    };
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_file(&path, text.as_bytes())?;
    Ok(path)
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

fn read_manifest(path: &Path) -> Result<Manifest> {
    let bytes = read_file(path)?;
    let raw: serde_json::Value = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    // Version is checked before the rest of the schema so that a future
    // manifest is reported as such rather than as a field mismatch.
    match raw.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == u64::from(FORMAT_VERSION) => {}
        Some(v) => {
            return Err(Error::Version {
                expected: FORMAT_VERSION,
                found: v as u32,
            })
        }
        None => return Err(Error::Schema("manifest has no integer version".into())),
    }
    serde_json::from_value(raw).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

fn verify(manifest: &Manifest, file: &str, bytes: &[u8], required: bool) -> Result<()> {
    match manifest.checksums.get(file) {
        Some(expected) => {
            let expected = u64::from_str_radix(expected, 16)
                .map_err(|_| Error::Schema(format!("bad checksum string for {file}")))?;
            let found = fnv1a(bytes);
            if expected != found {
                return Err(Error::Checksum { expected, found });
            }
            Ok(())
        }
        None if required => Err(Error::Schema(format!("no checksum listed for {file}"))),
        None => Ok(()),
    }
}

struct Blob {
    rows: usize,
    dim: usize,
    values: Vec<f32>,
}

fn decode_blob(bytes: &[u8], file: &str) -> Result<Blob> {
    if bytes.len() < 8 {
        return Err(Error::Malformed(format!("{file}: header truncated")));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    let dim = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = &bytes[8..];
    if body.len() != rows * dim * 4 {
        return Err(Error::Malformed(format!(
            "{file}: {} payload bytes for {rows} × {dim} floats",
            body.len()
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(Blob { rows, dim, values })
}

fn decode_labels(bytes: &[u8], file: &str) -> Result<Vec<usize>> {
    if !bytes.len().is_multiple_of(2) {
        return Err(Error::Malformed(format!("{file}: odd label byte count")));
    }
    Ok(bytes
        .chunks_exact(2)
        .map(|c| usize::from(u16::from_le_bytes([c[0], c[1]])))
        .collect())
}

fn assemble(
    manifest: Manifest,
    dir: &Path,
    strict: bool,
    provenance: Option<Provenance>,
) -> Result<DomainDataset> {
    let mut samples = Vec::new();
    let mut first_dim: Option<(String, usize)> = None;
    for d in &manifest.domains {
        let blob_bytes = read_file(&dir.join(&d.blob))?;
        verify(&manifest, &d.blob, &blob_bytes, strict)?;
        let label_name = labels_file(&d.blob);
        let label_bytes = read_file(&dir.join(&label_name))?;
        verify(&manifest, &label_name, &label_bytes, strict)?;
        let blob = decode_blob(&blob_bytes, &d.blob)?;
        match &first_dim {
            None => first_dim = Some((d.name.clone(), blob.dim)),
            Some((name, dim)) if *dim != blob.dim => {
                return Err(Error::Schema(format!(
                    "domain {name:?} has dim {dim} but domain {:?} has dim {}",
                    d.name, blob.dim
                )))
            }
            Some(_) => {}
        }
        if blob.dim != manifest.feature_dim {
            return Err(Error::Schema(format!(
                "domain {:?} has dim {} but manifest says {}",
                d.name, blob.dim, manifest.feature_dim
            )));
        }
        if blob.rows != d.count {
            return Err(Error::Schema(format!(
                "domain {:?} lists {} rows but blob holds {}",
                d.name, d.count, blob.rows
            )));
        }
        let labels = decode_labels(&label_bytes, &label_name)?;
        if labels.len() != blob.rows {
            return Err(Error::Schema(format!(
                "domain {:?}: {} labels for {} rows",
                d.name,
                labels.len(),
                blob.rows
            )));
        }
        for (r, &class) in labels.iter().enumerate() {
            samples.push(Sample {
                domain: DomainId(d.id),
                class,
                features: blob.values[r * blob.dim..(r + 1) * blob.dim].to_vec(),
            });
        }
    }
    let provenance = provenance
        .or(manifest.provenance)
        .unwrap_or(Provenance::Imported {
            path: dir.to_path_buf(),
        });
    let ds = DomainDataset {
        name: manifest.name,
        feature_dim: manifest.feature_dim,
        domains: manifest
            .domains
            .iter()
            .map(|d| DomainInfo {
                id: DomainId(d.id),
                name: d.name.clone(),
            })
            .collect(),
        classes: manifest.classes,
        samples,
        provenance,
    };
    ds.validate()?;
    Ok(ds)
}

/// Loads a directory written by [`save_dataset`]. Every file must match its listed checksum.
pub fn load_dataset(path: &Path) -> Result<DomainDataset> {
    let mpath = manifest_path(path);
    let manifest = read_manifest(&mpath)?;
    let dir = mpath.parent().unwrap_or(Path::new(".")).to_path_buf();
    assemble(manifest, &dir, true, None)
}

/// Loads precomputed embeddings described by a manifest. Checksums are
/// verified when listed; feature vectors are used as-is.
pub fn import_embeddings(manifest: &Path) -> Result<DomainDataset> {
    let mpath = manifest_path(manifest);
    let parsed = read_manifest(&mpath)?;
    let dir = mpath.parent().unwrap_or(Path::new(".")).to_path_buf();
    assemble(
        parsed,
        &dir,
        false,
        Some(Provenance::Imported {
            path: mpath.clone(),
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_follow_spec() {
        let ds = gen_dataset(&GenSpec::default()).unwrap();
        assert_eq!(ds.samples.len(), 5 * 4 * 16);
        for d in ds.domain_ids() {
            for k in 0..5 {
                let n = ds
                    .samples
                    .iter()
                    .filter(|s| s.domain == d && s.class == k)
                    .count();
                assert_eq!(n, 16);
            }
        }
        ds.validate().unwrap();
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_dataset(&GenSpec::default()).unwrap();
        let b = gen_dataset(&GenSpec::default()).unwrap();
        assert_eq!(a, b);
        let c = gen_dataset(&GenSpec {
            seed: 1,
            ..GenSpec::default()
        })
        .unwrap();
        assert_ne!(a.content_fingerprint(), c.content_fingerprint());
    }

    #[test]
    fn zero_shift_makes_domains_identical() {
        let spec = GenSpec {
            shift_strength: 0.0,
            ..GenSpec::default()
        };
        for t in domain_transforms(&spec) {
            assert_eq!(t, DomainTransform::identity(spec.feature_dim));
        }
    }

    #[test]
    fn rotations_are_orthogonal() {
        for t in domain_transforms(&GenSpec::default()) {
            assert!(t.orthogonality_error() < 1e-5);
            assert!(t.scale > 0.0);
        }
    }

    #[test]
    fn invalid_sizes_are_rejected() {
        for spec in [
            GenSpec {
                classes: 1,
                ..GenSpec::default()
            },
            GenSpec {
                domains: 1,
                ..GenSpec::default()
            },
            GenSpec {
                shots: 0,
                ..GenSpec::default()
            },
            GenSpec {
                shift_strength: 1.5,
                ..GenSpec::default()
            },
        ] {
            assert!(matches!(gen_dataset(&spec), Err(Error::Config(_))));
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_dataset(&GenSpec::default()).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn truncated_blob_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_dataset(&GenSpec::default()).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let blob = dir.path().join("domain_2.f32");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(Error::Checksum { .. })
        ));
    }

    #[test]
    fn unknown_version_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_dataset(&GenSpec::default()).unwrap();
        let path = save_dataset(&ds, dir.path()).unwrap();
        let text = fs::read_to_string(&path)
            .unwrap()
            .replace("\"version\": 1", "\"version\": 7");
        fs::write(&path, text).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(Error::Version {
                expected: 1,
                found: 7
            })
        ));
    }

    #[test]
    fn schema_violations_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_dataset(&GenSpec::default()).unwrap();
        let path = save_dataset(&ds, dir.path()).unwrap();
        let text = fs::read_to_string(&path)
            .unwrap()
            .replace("\"feature_dim\"", "\"feat_dim\"");
        fs::write(&path, text).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Schema(_))));
    }

    #[test]
    fn import_rejects_mixed_dimensions() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_dataset(&GenSpec::default()).unwrap();
        let path = save_dataset(&ds, dir.path()).unwrap();
        // Replace domain 1's blob by one with a different width, without a checksum.
        let rows: Vec<Sample> = ds
            .samples
            .iter()
            .filter(|s| s.domain == DomainId(1))
            .map(|s| Sample {
                features: s.features[..32].to_vec(),
                ..s.clone()
            })
            .collect();
        let refs: Vec<&Sample> = rows.iter().collect();
        fs::write(dir.path().join("domain_1.f32"), encode_blob(&refs, 32)).unwrap();
        let mut manifest: Manifest =
            serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        manifest.checksums.clear();
        fs::write(&path, serde_json::to_string(&manifest).unwrap()).unwrap();
        let err = import_embeddings(&path).unwrap_err().to_string();
        assert!(err.contains("photo") && err.contains("sketch"), "{err}");
    }

    #[test]
    fn import_marks_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_dataset(&GenSpec::default()).unwrap();
        let path = save_dataset(&ds, dir.path()).unwrap();
        let imported = import_embeddings(&path).unwrap();
        assert!(matches!(imported.provenance, Provenance::Imported { .. }));
        assert_eq!(imported.samples, ds.samples);
        assert_eq!(imported.content_fingerprint(), ds.content_fingerprint());
    }
}
