//! Datasets: manifests, deterministic splits, LQ/HQ pair synthesis, and
//! loaders for synthetic irises or a `root/<class>/<image>` tree.

mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{degrade, resample, sample_degradation, DegradationParams, Image, ResampleMethod};

pub use synth::synth_iris;

pub const MANIFEST_HEADER: &str = "iris-manifest v1";
pub const MANIFEST_VERSION: u32 = 1;
const SYNTH_PREFIX: &str = "synth:";

/// Independent sub-seed for item `stream` of a run seeded with `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Hq,
    Lq,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Hq => "hq",
            Role::Lq => "lq",
        })
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hq" => Ok(Role::Hq),
            "lq" => Ok(Role::Lq),
            other => Err(Error::Manifest(format!("unknown role `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    /// File path relative to the manifest, or a `synth:` generator key.
    pub path: String,
    pub class_id: usize,
    pub role: Role,
    /// Index of the HQ record an LQ record was made from.
    pub pair_id: Option<usize>,
}

/// Generator key for a synthetic iris.
pub fn synth_key(class_seed: u64, instance_seed: u64, size: (usize, usize)) -> String {
    format!("{SYNTH_PREFIX}{class_seed}:{instance_seed}:{}x{}", size.0, size.1)
}

fn parse_synth_key(key: &str) -> Option<(u64, u64, (usize, usize))> {
    let rest = key.strip_prefix(SYNTH_PREFIX)?;
    let mut parts = rest.split(':');
    let class_seed = parts.next()?.parse().ok()?;
    let instance_seed = parts.next()?.parse().ok()?;
    let (h, w) = parts.next()?.split_once('x')?;
    if parts.next().is_some() {
        return None;
    }
    Some((class_seed, instance_seed, (h.parse().ok()?, w.parse().ok()?)))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<SampleRecord>,
    pub num_classes: usize,
    pub image_size: (usize, usize),
    pub format_version: u32,
}

impl DatasetManifest {
    /// Builds a manifest whose classes are exactly those present.
    pub fn from_records(records: Vec<SampleRecord>, image_size: (usize, usize)) -> Result<Self> {
        let num_classes = records.iter().map(|r| r.class_id + 1).max().unwrap_or(0);
        let mut seen = vec![false; num_classes];
        for r in &records {
            seen[r.class_id] = true;
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(Error::Manifest(format!("class {missing} has no records")));
        }
        let m = Self {
            records,
            num_classes,
            image_size,
            format_version: MANIFEST_VERSION,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            if r.class_id >= self.num_classes {
                return Err(Error::Manifest(format!(
                    "record {i}: class {} outside 0..{}",
                    r.class_id, self.num_classes
                )));
            }
            match (r.role, r.pair_id) {
                (Role::Hq, Some(_)) => {
                    return Err(Error::Manifest(format!("record {i}: hq record with a pair id")));
                }
                (Role::Lq, None) => {
                    return Err(Error::Manifest(format!("record {i}: lq record without a pair id")));
                }
                (Role::Lq, Some(p)) => match self.records.get(p) {
                    Some(src) if src.role == Role::Hq && src.class_id == r.class_id => {}
                    _ => {
                        return Err(Error::Manifest(format!(
                            "record {i}: pair id {p} does not name an hq record of class {}",
                            r.class_id
                        )));
                    }
                },
                (Role::Hq, None) => {}
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{MANIFEST_HEADER}\n# image_size: {}x{}\n# num_classes: {}\n",
            self.image_size.0, self.image_size.1, self.num_classes
        );
        for r in &self.records {
            let pair = r.pair_id.map_or_else(|| "-".to_string(), |p| p.to_string());
            s.push_str(&format!("{}\t{}\t{}\t{}\n", r.class_id, r.role, pair, r.path));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim_end) != Some(MANIFEST_HEADER) {
            return Err(Error::Manifest(format!("missing `{MANIFEST_HEADER}` header")));
        }
        let mut image_size = None;
        let mut num_classes = None;
        let mut records = Vec::new();
        for (n, line) in lines.enumerate() {
            let lineno = n + 2;
            let bad = |what: &str| Error::Manifest(format!("line {lineno}: {what}"));
            if line.trim().is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                if let Some(v) = meta.trim().strip_prefix("image_size:") {
                    let (h, w) = v.trim().split_once('x').ok_or_else(|| bad("bad image_size"))?;
                    let h = h.parse().map_err(|_| bad("bad image height"))?;
                    let w = w.parse().map_err(|_| bad("bad image width"))?;
                    image_size = Some((h, w));
                } else if let Some(v) = meta.trim().strip_prefix("num_classes:") {
                    num_classes = Some(v.trim().parse().map_err(|_| bad("bad num_classes"))?);
                }
                continue;
            }
            let f: Vec<&str> = line.splitn(4, '\t').collect();
            if f.len() != 4 {
                return Err(bad("expected 4 tab-separated fields"));
            }
            records.push(SampleRecord {
                class_id: f[0].parse().map_err(|_| bad("bad class id"))?,
                role: f[1].parse()?,
                pair_id: match f[2] {
                    "-" => None,
                    p => Some(p.parse().map_err(|_| bad("bad pair id"))?),
                },
                path: f[3].to_string(),
            });
        }
        let image_size = image_size.ok_or_else(|| Error::Manifest("missing image_size line".into()))?;
        let m = match num_classes {
            Some(k) => {
                let m = Self {
                    records,
                    num_classes: k,
                    image_size,
                    format_version: MANIFEST_VERSION,
                };
                m.validate()?;
                m
            }
            None => Self::from_records(records, image_size)?,
        };
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_text())?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Keeps `indices` (in order), remapping pair ids; LQ records whose
    /// source is dropped are an error.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut remap = BTreeMap::new();
        for (new, &old) in indices.iter().enumerate() {
            remap.insert(old, new);
        }
        let records = indices
            .iter()
            .map(|&i| {
                let mut r = self.records[i].clone();
                if let Some(p) = r.pair_id {
                    r.pair_id = Some(*remap.get(&p).ok_or_else(|| {
                        Error::Manifest(format!("record {i} separated from its hq source {p}"))
                    })?);
                }
                Ok(r)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            records,
            num_classes: self.num_classes,
            image_size: self.image_size,
            format_version: self.format_version,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    pub per_class: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            seed: 0,
            per_class: true,
        }
    }
}

/// Train/test record indices. HQ records are the split units; LQ records
/// follow their source.
pub fn split_indices(manifest: &DatasetManifest, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::invalid(format!("train fraction {} outside (0, 1)", spec.train_fraction)));
    }
    let mut followers: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut units_by_class: Vec<Vec<usize>> = vec![Vec::new(); manifest.num_classes];
    for (i, r) in manifest.records.iter().enumerate() {
        match r.pair_id {
            Some(p) => followers.entry(p).or_default().push(i),
            None => units_by_class[r.class_id].push(i),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train_units = Vec::new();
    let mut test_units = Vec::new();
    if spec.per_class {
        for (c, units) in units_by_class.iter_mut().enumerate() {
            if units.is_empty() {
                continue;
            }
            if units.len() < 2 {
                return Err(Error::invalid(format!("class {c} has a single record; cannot split per class")));
            }
            units.shuffle(&mut rng);
            let n = ((units.len() as f64 * spec.train_fraction).round() as usize).clamp(1, units.len() - 1);
            train_units.extend_from_slice(&units[..n]);
            test_units.extend_from_slice(&units[n..]);
        }
    } else {
        let mut all: Vec<usize> = units_by_class.concat();
        all.sort_unstable();
        all.shuffle(&mut rng);
        let n = (all.len() as f64 * spec.train_fraction).round() as usize;
        train_units.extend_from_slice(&all[..n]);
        test_units.extend_from_slice(&all[n..]);
    }
    let expand = |mut units: Vec<usize>| {
        units.sort_unstable();
        let mut out = Vec::new();
        for u in units {
            out.push(u);
            if let Some(f) = followers.get(&u) {
                out.extend_from_slice(f);
            }
        }
        out.sort_unstable();
        out
    };
    Ok((expand(train_units), expand(test_units)))
}

pub fn split(manifest: &DatasetManifest, spec: &SplitSpec) -> Result<(DatasetManifest, DatasetManifest)> {
    let (train, test) = split_indices(manifest, spec)?;
    Ok((manifest.subset(&train)?, manifest.subset(&test)?))
}

/// A manifest together with its decoded images (unit domain).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<Image>,
}

impl Dataset {
    pub fn new(manifest: DatasetManifest, images: Vec<Image>) -> Result<Self> {
        if manifest.len() != images.len() {
            return Err(Error::Manifest(format!(
                "{} records but {} images",
                manifest.len(),
                images.len()
            )));
        }
        let (h, w) = manifest.image_size;
        if let Some(i) = images.iter().position(|im| (im.height(), im.width()) != (h, w)) {
            return Err(Error::Manifest(format!(
                "image {i} is {}×{}, manifest declares {h}×{w}",
                images[i].height(),
                images[i].width()
            )));
        }
        Ok(Self { manifest, images })
    }

    /// `num_classes × per_class` synthetic HQ irises. Class and instance
    /// seeds are derived from `seed`.
    pub fn synthetic(num_classes: usize, per_class: usize, size: usize, seed: u64) -> Result<Self> {
        if num_classes == 0 || per_class == 0 {
            return Err(Error::invalid("synthetic dataset needs at least one class and one image"));
        }
        let mut records = Vec::new();
        for c in 0..num_classes {
            let class_seed = derive_seed(seed, c as u64);
            for i in 0..per_class {
                let instance_seed = derive_seed(class_seed, i as u64 + 1);
                records.push(SampleRecord {
                    path: synth_key(class_seed, instance_seed, (size, size)),
                    class_id: c,
                    role: Role::Hq,
                    pair_id: None,
                });
            }
        }
        let manifest = DatasetManifest::from_records(records, (size, size))?;
        let images = manifest
            .records
            .par_iter()
            .map(|r| render_synthetic(&r.path))
            .collect::<Result<Vec<_>>>()?;
        Self::new(manifest, images)
    }

    /// Loads a manifest file, rendering `synth:` keys and reading other
    /// paths relative to the manifest's directory.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::read(manifest_path)?;
        let base = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        let images = manifest
            .records
            .par_iter()
            .map(|r| {
                if r.path.starts_with(SYNTH_PREFIX) {
                    render_synthetic(&r.path)
                } else {
                    Image::load(&base.join(&r.path))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(manifest, images)
    }

    /// Loads `root/<class>/<image>`; class directories are ordered
    /// numerically when all names are integers, lexically otherwise.
    /// Images are resampled to `size` when given, otherwise they must
    /// all match.
    pub fn from_class_dirs(root: &Path, size: Option<(usize, usize)>) -> Result<Self> {
        let mut classes: Vec<(String, PathBuf)> = fs::read_dir(root)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
            .collect();
        if classes.iter().all(|(n, _)| n.parse::<u64>().is_ok()) {
            classes.sort_by_key(|(n, _)| n.parse::<u64>().expect("checked"));
        } else {
            classes.sort();
        }
        let mut records = Vec::new();
        let mut images: Vec<Image> = Vec::new();
        for (class_id, (name, dir)) in classes.iter().enumerate() {
            let mut files: Vec<PathBuf> = fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            for f in files {
                let mut img = Image::load(&f)?;
                if let Some((h, w)) = size {
                    img = resample(&img, h, w, ResampleMethod::Bilinear)?;
                }
                let file = f.file_name().expect("file").to_string_lossy();
                records.push(SampleRecord {
                    path: format!("{name}/{file}"),
                    class_id,
                    role: Role::Hq,
                    pair_id: None,
                });
                images.push(img);
            }
        }
        let first = images
            .first()
            .ok_or_else(|| Error::Manifest(format!("no images under {}", root.display())))?;
        let dims = (first.height(), first.width());
        let manifest = DatasetManifest::from_records(records, dims)?;
        Self::new(manifest, images)
    }

    /// Writes every non-synthetic image as PNG under `dir/images/` and the
    /// manifest as `dir/<name>`. Returns the manifest path.
    pub fn save(&self, dir: &Path, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir.join("images"))?;
        let mut manifest = self.manifest.clone();
        for (i, (r, img)) in manifest.records.iter_mut().zip(&self.images).enumerate() {
            if !r.path.starts_with(SYNTH_PREFIX) {
                let rel = format!("images/{}_{i:05}.png", name.trim_end_matches(".manifest"));
                img.save_png(&dir.join(&rel))?;
                r.path = rel;
            }
        }
        let path = dir.join(name);
        manifest.write(&path)?;
        Ok(path)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            manifest: self.manifest.subset(indices)?,
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
        })
    }

    pub fn split(&self, spec: &SplitSpec) -> Result<(Self, Self)> {
        let (train, test) = split_indices(&self.manifest, spec)?;
        Ok((self.subset(&train)?, self.subset(&test)?))
    }

    /// Indices of HQ records.
    pub fn hq_indices(&self) -> Vec<usize> {
        role_indices(&self.manifest, Role::Hq)
    }

    pub fn lq_indices(&self) -> Vec<usize> {
        role_indices(&self.manifest, Role::Lq)
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.manifest.records[i].class_id).collect()
    }
}

fn role_indices(m: &DatasetManifest, role: Role) -> Vec<usize> {
    m.records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.role == role)
        .map(|(i, _)| i)
        .collect()
}

fn render_synthetic(key: &str) -> Result<Image> {
    let (c, i, size) =
        parse_synth_key(key).ok_or_else(|| Error::Manifest(format!("malformed synthetic key `{key}`")))?;
    synth_iris(c, i, size)
}

/// Degrades one HQ image and brings it back to the HQ size.
pub fn degrade_to_lq(hq: &Image, params: &DegradationParams, seed: u64) -> Result<Image> {
    let spec = sample_degradation(params, seed)?;
    let low = degrade(hq, &spec)?;
    resample(&low, hq.height(), hq.width(), ResampleMethod::Bilinear)
}

/// Appends one LQ record per HQ record of `hq`; record `i`'s degradation
/// seed is `derive_seed(seed, i)`.
pub fn make_pairs(hq: &Dataset, params: &DegradationParams, seed: u64) -> Result<Dataset> {
    params.validate()?;
    if let Some(i) = hq.manifest.records.iter().position(|r| r.role != Role::Hq) {
        return Err(Error::invalid(format!("record {i} is not an hq record")));
    }
    let n = hq.manifest.len();
    let lq: Vec<Image> = hq
        .images
        .par_iter()
        .enumerate()
        .map(|(i, img)| degrade_to_lq(img, params, derive_seed(seed, i as u64)))
        .collect::<Result<_>>()?;
    let mut manifest = hq.manifest.clone();
    for i in 0..n {
        let src = &hq.manifest.records[i];
        manifest.records.push(SampleRecord {
            path: format!("lq:{i}"),
            class_id: src.class_id,
            role: Role::Lq,
            pair_id: Some(i),
        });
    }
    manifest.validate()?;
    let mut images = hq.images.clone();
    images.extend(lq);
    Dataset::new(manifest, images)
}
