//! Data sources: synthetic Gaussian class tasks with a known Bayes oracle,
//! tensor-file datasets described by a JSON manifest, rotation augmentation,
//! and attribute-annotated datasets for zero-shot experiments.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::episode::{ClassRecord, Episode, LabeledDataset, ZeroShotEpisode};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

// ---- synthetic Gaussian tasks -----------------------------------------------

/// Generator settings for an isotropic Gaussian class mixture.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub dim: usize,
    pub examples_per_class: usize,
    /// Class means are drawn from mean_scale · N(0, I).
    pub mean_scale: f64,
    /// Examples are mean + noise_sigma · N(0, I).
    pub noise_sigma: f64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.dim == 0 || self.examples_per_class == 0 {
            return Err(Error::contract("synthetic_spec", "counts must be positive"));
        }
        if !(self.mean_scale.is_finite() && self.noise_sigma.is_finite()) || self.noise_sigma <= 0.0
        {
            return Err(Error::contract(
                "synthetic_spec",
                "mean_scale must be finite and noise_sigma positive",
            ));
        }
        Ok(())
    }
}

/// A generated dataset together with the hidden truth that produced it.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub dataset: LabeledDataset,
    /// Row k is the true mean of the class with id k.
    pub true_means: Tensor,
    pub noise_sigma: f64,
}

/// Draw class means and per-class examples. Deterministic in the generator
/// state; class ids are 0..n_classes.
pub fn gen_gaussian_dataset(spec: &SyntheticSpec, rng: &mut Rng) -> Result<SyntheticTask> {
    spec.validate()?;
    let mut means = Vec::with_capacity(spec.n_classes * spec.dim);
    for _ in 0..spec.n_classes * spec.dim {
        means.push(spec.mean_scale * rng.normal());
    }
    let mut classes = Vec::with_capacity(spec.n_classes);
    for k in 0..spec.n_classes {
        let mu = &means[k * spec.dim..(k + 1) * spec.dim];
        let examples = (0..spec.examples_per_class)
            .map(|_| {
                let x: Vec<f64> = mu
                    .iter()
                    .map(|&m| m + spec.noise_sigma * rng.normal())
                    .collect();
                Tensor::vector(&x)
            })
            .collect();
        classes.push(ClassRecord {
            class_id: k as u32,
            examples,
        });
    }
    Ok(SyntheticTask {
        dataset: LabeledDataset::new(classes, vec![spec.dim])?,
        true_means: Tensor::from_vec(vec![spec.n_classes, spec.dim], means)?,
        noise_sigma: spec.noise_sigma,
    })
}

/// Accuracy of the Bayes-optimal rule on an episode's query set. For equal
/// isotropic class covariances and a uniform prior this is nearest-true-mean
/// among the episode's classes; ties resolve to the lowest local index.
pub fn bayes_accuracy_oracle(true_means: &Tensor, episode: &Episode) -> Result<f64> {
    let s = true_means.shape();
    if s.len() != 2 {
        return Err(Error::shape("bayes_oracle", format!("{:?}", s)));
    }
    for &id in &episode.class_ids {
        if id as usize >= s[0] {
            return Err(Error::contract(
                "bayes_oracle",
                format!("episode class {id} has no true mean"),
            ));
        }
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for (k, class) in episode.query.iter().enumerate() {
        for q in class {
            let x = q.data();
            if x.len() != s[1] {
                return Err(Error::shape(
                    "bayes_oracle",
                    format!("query dim {} vs mean dim {}", x.len(), s[1]),
                ));
            }
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (j, &id) in episode.class_ids.iter().enumerate() {
                let mu = true_means.row(id as usize);
                let d: f64 = x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            if best == k {
                correct += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::contract("bayes_oracle", "episode has no queries"));
    }
    Ok(correct as f64 / total as f64)
}

// ---- tensor files and manifests ----------------------------------------------

const TENSOR_MAGIC: &[u8; 4] = b"PFT1";

/// Write one tensor: magic, rank, dims, then row-major f64 little-endian.
pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    if !t.all_finite() {
        return Err(Error::NumericDomain {
            op: "write_tensor",
            detail: format!("non-finite value writing {}", path.display()),
        });
    }
    let mut buf = Vec::with_capacity(4 + 4 + 4 * t.shape().len() + 8 * t.numel());
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Read a tensor written by [`write_tensor`], validating the header, the
/// exact payload length, and value finiteness.
pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let entry = path.display().to_string();
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    let bad = |detail: &str| Error::Load {
        entry: entry.clone(),
        detail: detail.to_string(),
    };
    if buf.len() < 8 || &buf[..4] != TENSOR_MAGIC {
        return Err(bad("not a tensor file (bad magic)"));
    }
    let rank = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes")) as usize;
    let header = 8 + 4 * rank;
    if buf.len() < header {
        return Err(bad("truncated header"));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 8 + 4 * i;
        shape.push(u32::from_le_bytes(buf[off..off + 4].try_into().expect("4 bytes")) as usize);
    }
    let numel: usize = shape.iter().product();
    if buf.len() != header + 8 * numel {
        return Err(bad("payload length does not match header"));
    }
    let data: Vec<f64> = buf[header..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite value"));
    }
    Tensor::from_vec(shape, data)
}

pub const MANIFEST_VERSION: u32 = 1;

/// On-disk description of a dataset: per-class tensor files (paths relative
/// to the manifest), plus optional per-class attribute vectors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub input_shape: Vec<usize>,
    pub classes: Vec<ManifestClass>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attributes: Vec<ManifestAttribute>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestClass {
    pub id: u32,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestAttribute {
    pub id: u32,
    pub file: String,
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Load {
        entry: path.display().to_string(),
        detail: format!("manifest parse error: {e}"),
    })?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::Load {
            entry: path.display().to_string(),
            detail: format!(
                "unsupported manifest version {} (expected {MANIFEST_VERSION})",
                manifest.format_version
            ),
        });
    }
    Ok(manifest)
}

pub fn save_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))
}

fn manifest_dir(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Load every class listed in a manifest, checking each tensor against the
/// declared input shape.
pub fn load_dataset(manifest_path: &Path) -> Result<LabeledDataset> {
    let manifest = load_manifest(manifest_path)?;
    let base = manifest_dir(manifest_path);
    let mut classes = Vec::with_capacity(manifest.classes.len());
    for mc in &manifest.classes {
        let mut examples = Vec::with_capacity(mc.files.len());
        for file in &mc.files {
            let t = read_tensor(&base.join(file))?;
            if t.shape() != manifest.input_shape {
                return Err(Error::Load {
                    entry: file.clone(),
                    detail: format!(
                        "tensor shape {:?} does not match manifest input_shape {:?}",
                        t.shape(),
                        manifest.input_shape
                    ),
                });
            }
            examples.push(t);
        }
        classes.push(ClassRecord {
            class_id: mc.id,
            examples,
        });
    }
    LabeledDataset::new(classes, manifest.input_shape)
}

/// Write a dataset as one tensor file per example plus `manifest.json` in
/// `dir`; returns the manifest path.
pub fn save_dataset(dir: &Path, data: &LabeledDataset) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut classes = Vec::with_capacity(data.n_classes());
    for class in data.classes() {
        let mut files = Vec::with_capacity(class.examples.len());
        for (i, ex) in class.examples.iter().enumerate() {
            let name = format!("class{:05}_ex{:05}.pft", class.class_id, i);
            write_tensor(&dir.join(&name), ex)?;
            files.push(name);
        }
        classes.push(ManifestClass {
            id: class.class_id,
            files,
        });
    }
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        input_shape: data.input_shape().to_vec(),
        classes,
        attributes: Vec::new(),
    };
    let path = dir.join("manifest.json");
    save_manifest(&path, &manifest)?;
    Ok(path)
}

// ---- rotation augmentation ----------------------------------------------------

fn rot90_cw(src: &[f64], channels: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for c in 0..channels {
        let plane = c * n * n;
        for y in 0..n {
            for x in 0..n {
                out[plane + y * n + x] = src[plane + (n - 1 - x) * n + y];
            }
        }
    }
    out
}

/// Expand a square-image dataset with the 90/180/270 degree rotations of
/// every class, quadrupling the class count. The rotation of class id `k`
/// by `r`·90° becomes class id `4k + r`.
pub fn rotation_augment(data: &LabeledDataset) -> Result<LabeledDataset> {
    let shape = data.input_shape().to_vec();
    let (channels, n) = match shape[..] {
        [h, w] if h == w => (1, h),
        [c, h, w] if h == w => (c, h),
        _ => {
            return Err(Error::contract(
                "rotation_augment",
                format!("rotations need square images, got shape {shape:?}"),
            ))
        }
    };
    let mut classes = Vec::with_capacity(data.n_classes() * 4);
    for class in data.classes() {
        let mut current: Vec<Vec<f64>> =
            class.examples.iter().map(|t| t.data().to_vec()).collect();
        for r in 0..4u32 {
            classes.push(ClassRecord {
                class_id: class.class_id * 4 + r,
                examples: current
                    .iter()
                    .map(|d| Tensor::from_vec(shape.clone(), d.clone()))
                    .collect::<Result<_>>()?,
            });
            current = current.iter().map(|d| rot90_cw(d, channels, n)).collect();
        }
    }
    LabeledDataset::new(classes, shape)
}

// ---- attribute datasets (zero shot) --------------------------------------------

/// One class with side information attached.
#[derive(Debug, Clone)]
pub struct AttributeClass {
    pub class_id: u32,
    /// Rank-1 attribute vector shared by the whole class.
    pub attributes: Tensor,
    pub examples: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct AttributeDataset {
    classes: Vec<AttributeClass>,
    input_shape: Vec<usize>,
    attr_dim: usize,
}

impl AttributeDataset {
    pub fn new(classes: Vec<AttributeClass>, input_shape: Vec<usize>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::contract("attribute_dataset", "no classes"));
        }
        let attr_dim = match classes[0].attributes.shape() {
            [a] if *a > 0 => *a,
            s => {
                return Err(Error::shape(
                    "attribute_dataset",
                    format!("attribute vector shape {:?}", s),
                ))
            }
        };
        let mut seen = std::collections::BTreeSet::new();
        for class in &classes {
            if !seen.insert(class.class_id) {
                return Err(Error::contract(
                    "attribute_dataset",
                    format!("duplicate class id {}", class.class_id),
                ));
            }
            if class.attributes.shape() != [attr_dim] {
                return Err(Error::shape(
                    "attribute_dataset",
                    format!("class {} attribute dimension differs", class.class_id),
                ));
            }
            for ex in &class.examples {
                if ex.shape() != input_shape {
                    return Err(Error::shape(
                        "attribute_dataset",
                        format!(
                            "class {} example shape {:?} vs declared {:?}",
                            class.class_id,
                            ex.shape(),
                            input_shape
                        ),
                    ));
                }
            }
        }
        Ok(AttributeDataset {
            classes,
            input_shape,
            attr_dim,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[AttributeClass] {
        &self.classes
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn attr_dim(&self) -> usize {
        self.attr_dim
    }
}

/// Load a manifest that carries an attribute entry for every class.
pub fn load_attribute_dataset(manifest_path: &Path) -> Result<AttributeDataset> {
    let manifest = load_manifest(manifest_path)?;
    let base = manifest_dir(manifest_path);
    if manifest.attributes.is_empty() {
        return Err(Error::Load {
            entry: manifest_path.display().to_string(),
            detail: "manifest has no attributes section".into(),
        });
    }
    let attr_of: std::collections::BTreeMap<u32, &String> = manifest
        .attributes
        .iter()
        .map(|a| (a.id, &a.file))
        .collect();
    let mut classes = Vec::with_capacity(manifest.classes.len());
    for mc in &manifest.classes {
        let file = attr_of.get(&mc.id).ok_or_else(|| Error::Load {
            entry: manifest_path.display().to_string(),
            detail: format!("class {} has no attribute entry", mc.id),
        })?;
        let attributes = read_tensor(&base.join(file.as_str()))?;
        if attributes.shape().len() != 1 {
            return Err(Error::Load {
                entry: (*file).clone(),
                detail: format!("attribute tensor must be rank 1, got {:?}", attributes.shape()),
            });
        }
        let mut examples = Vec::with_capacity(mc.files.len());
        for f in &mc.files {
            let t = read_tensor(&base.join(f))?;
            if t.shape() != manifest.input_shape {
                return Err(Error::Load {
                    entry: f.clone(),
                    detail: format!(
                        "tensor shape {:?} does not match manifest input_shape {:?}",
                        t.shape(),
                        manifest.input_shape
                    ),
                });
            }
            examples.push(t);
        }
        classes.push(AttributeClass {
            class_id: mc.id,
            attributes,
            examples,
        });
    }
    AttributeDataset::new(classes, manifest.input_shape)
}

/// Write an attribute dataset as tensor files plus `manifest.json`.
pub fn save_attribute_dataset(dir: &Path, data: &AttributeDataset) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut classes = Vec::with_capacity(data.n_classes());
    let mut attributes = Vec::with_capacity(data.n_classes());
    for class in data.classes() {
        let mut files = Vec::with_capacity(class.examples.len());
        for (i, ex) in class.examples.iter().enumerate() {
            let name = format!("class{:05}_ex{:05}.pft", class.class_id, i);
            write_tensor(&dir.join(&name), ex)?;
            files.push(name);
        }
        let aname = format!("class{:05}_attr.pft", class.class_id);
        write_tensor(&dir.join(&aname), &class.attributes)?;
        classes.push(ManifestClass {
            id: class.class_id,
            files,
        });
        attributes.push(ManifestAttribute {
            id: class.class_id,
            file: aname,
        });
    }
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        input_shape: data.input_shape().to_vec(),
        classes,
        attributes,
    };
    let path = dir.join("manifest.json");
    save_manifest(&path, &manifest)?;
    Ok(path)
}

/// Generator settings for a synthetic zero-shot task: class attribute
/// vectors v_k are standard normal, a fixed linear map T sends them to
/// feature space, and examples are T·v_k + noise.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ZeroShotSpec {
    pub n_classes: usize,
    pub attr_dim: usize,
    pub feature_dim: usize,
    pub examples_per_class: usize,
    pub noise_sigma: f64,
}

impl ZeroShotSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0
            || self.attr_dim == 0
            || self.feature_dim == 0
            || self.examples_per_class == 0
        {
            return Err(Error::contract("zero_shot_spec", "counts must be positive"));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma <= 0.0 {
            return Err(Error::contract("zero_shot_spec", "noise_sigma must be positive"));
        }
        Ok(())
    }
}

pub fn gen_attribute_dataset(spec: &ZeroShotSpec, rng: &mut Rng) -> Result<AttributeDataset> {
    spec.validate()?;
    // Entries of T scale with 1/√attr_dim so features stay O(1).
    let scale = 1.0 / (spec.attr_dim as f64).sqrt();
    let t_map: Vec<f64> = (0..spec.feature_dim * spec.attr_dim)
        .map(|_| scale * rng.normal())
        .collect();
    let mut classes = Vec::with_capacity(spec.n_classes);
    for k in 0..spec.n_classes {
        let v: Vec<f64> = (0..spec.attr_dim).map(|_| rng.normal()).collect();
        let mu: Vec<f64> = (0..spec.feature_dim)
            .map(|i| {
                t_map[i * spec.attr_dim..(i + 1) * spec.attr_dim]
                    .iter()
                    .zip(&v)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        let examples = (0..spec.examples_per_class)
            .map(|_| {
                let x: Vec<f64> = mu
                    .iter()
                    .map(|&m| m + spec.noise_sigma * rng.normal())
                    .collect();
                Tensor::vector(&x)
            })
            .collect();
        classes.push(AttributeClass {
            class_id: k as u32,
            attributes: Tensor::vector(&v),
            examples,
        });
    }
    AttributeDataset::new(classes, vec![spec.feature_dim])
}

/// Sample a zero-shot episode: n_way classes without replacement, their
/// attribute vectors as the support side, and n_query queries per class.
pub fn sample_zero_shot_episode(
    data: &AttributeDataset,
    n_way: usize,
    n_query: usize,
    rng: &mut Rng,
) -> Result<ZeroShotEpisode> {
    if n_way == 0 || n_query == 0 {
        return Err(Error::contract("zero_shot_episode", "way and query must be positive"));
    }
    if n_way > data.n_classes() {
        return Err(Error::InsufficientData {
            detail: format!(
                "episode wants {} classes, dataset has {}",
                n_way,
                data.n_classes()
            ),
        });
    }
    let class_idx = rng.sample_indices(data.n_classes(), n_way);
    let mut class_ids = Vec::with_capacity(n_way);
    let mut attr_rows = Vec::with_capacity(n_way);
    let mut query = Vec::with_capacity(n_way);
    for &ci in &class_idx {
        let class = &data.classes()[ci];
        if class.examples.len() < n_query {
            return Err(Error::InsufficientData {
                detail: format!(
                    "class {} has {} examples, episode needs {}",
                    class.class_id,
                    class.examples.len(),
                    n_query
                ),
            });
        }
        class_ids.push(class.class_id);
        attr_rows.push(&class.attributes);
        query.push(
            rng.sample_indices(class.examples.len(), n_query)
                .into_iter()
                .map(|i| class.examples[i].clone())
                .collect(),
        );
    }
    Ok(ZeroShotEpisode {
        class_ids,
        attributes: Tensor::stack(&attr_rows)?,
        query,
    })
}
