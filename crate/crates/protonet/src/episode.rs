//! Labeled datasets and episodic sampling.
//!
//! An episode is one few-shot task: `n_way` classes drawn without
//! replacement, and per class a disjoint support set (`n_support` examples)
//! and query set (`n_query` examples). Episode-local labels are the indices
//! 0..n_way in class-selection order; `class_ids` maps them back to the
//! dataset's identifiers.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ClassRecord {
    pub class_id: u32,
    pub examples: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct LabeledDataset {
    classes: Vec<ClassRecord>,
    input_shape: Vec<usize>,
}

impl LabeledDataset {
    /// Validates unique class ids and a uniform example shape.
    pub fn new(classes: Vec<ClassRecord>, input_shape: Vec<usize>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::contract("dataset", "no classes"));
        }
        let mut ids: Vec<u32> = classes.iter().map(|c| c.class_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::contract("dataset", "duplicate class ids"));
        }
        for c in &classes {
            for (i, ex) in c.examples.iter().enumerate() {
                if ex.shape() != input_shape {
                    return Err(Error::contract(
                        "dataset",
                        format!(
                            "class {} example {} has shape {:?}, dataset declares {:?}",
                            c.class_id,
                            i,
                            ex.shape(),
                            input_shape
                        ),
                    ));
                }
            }
        }
        Ok(LabeledDataset {
            classes,
            input_shape,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[ClassRecord] {
        &self.classes
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub n_support: usize,
    pub n_query: usize,
}

impl EpisodeSpec {
    pub fn new(n_way: usize, n_support: usize, n_query: usize) -> Result<Self> {
        if n_way == 0 || n_support == 0 || n_query == 0 {
            return Err(Error::contract(
                "episode_spec",
                "way, shot, and query counts must be positive",
            ));
        }
        Ok(EpisodeSpec {
            n_way,
            n_support,
            n_query,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Episode {
    /// Original dataset ids of the selected classes, in selection order.
    pub class_ids: Vec<u32>,
    /// `support[k]` holds the n_support support examples of local class k.
    pub support: Vec<Vec<Tensor>>,
    /// `query[k]` holds the n_query query examples of local class k.
    pub query: Vec<Vec<Tensor>>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.class_ids.len()
    }

    pub fn n_support(&self) -> usize {
        self.support.first().map_or(0, Vec::len)
    }

    pub fn n_query(&self) -> usize {
        self.query.first().map_or(0, Vec::len)
    }
}

/// A zero-shot episode: class-level side information (one attribute vector
/// per class) replaces the support set.
#[derive(Debug, Clone)]
pub struct ZeroShotEpisode {
    /// Original dataset ids of the selected classes, in selection order.
    pub class_ids: Vec<u32>,
    /// Row k is the attribute vector of local class k; shape (n_way, A).
    pub attributes: Tensor,
    /// `query[k]` holds the n_query query examples of local class k.
    pub query: Vec<Vec<Tensor>>,
}

impl ZeroShotEpisode {
    pub fn n_way(&self) -> usize {
        self.class_ids.len()
    }

    pub fn n_query(&self) -> usize {
        self.query.first().map_or(0, Vec::len)
    }
}

/// `n` distinct indices uniformly from `0..pool_len`, errors when the pool is
/// too small.
pub fn random_sample(pool_len: usize, n: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if n > pool_len {
        return Err(Error::InsufficientData {
            detail: format!("requested {n} of {pool_len} elements"),
        });
    }
    Ok(rng.sample_indices(pool_len, n))
}

/// One episode per Algorithm-style sampling: classes without replacement,
/// then per class `n_support + n_query` distinct examples, split in draw
/// order (equivalent in distribution to sampling the query set from the
/// remainder, and disjoint by construction).
pub fn sample_episode(
    data: &LabeledDataset,
    spec: &EpisodeSpec,
    rng: &mut Rng,
) -> Result<Episode> {
    if spec.n_way > data.n_classes() {
        return Err(Error::InsufficientData {
            detail: format!(
                "episode wants {} classes, dataset has {}",
                spec.n_way,
                data.n_classes()
            ),
        });
    }
    let class_idx = random_sample(data.n_classes(), spec.n_way, rng)?;
    let need = spec.n_support + spec.n_query;
    let mut class_ids = Vec::with_capacity(spec.n_way);
    let mut support = Vec::with_capacity(spec.n_way);
    let mut query = Vec::with_capacity(spec.n_way);
    for &ci in &class_idx {
        let class = &data.classes()[ci];
        if class.examples.len() < need {
            return Err(Error::InsufficientData {
                detail: format!(
                    "class {} has {} examples, episode needs {}",
                    class.class_id,
                    class.examples.len(),
                    need
                ),
            });
        }
        let picked = random_sample(class.examples.len(), need, rng)?;
        class_ids.push(class.class_id);
        support.push(
            picked[..spec.n_support]
                .iter()
                .map(|&i| class.examples[i].clone())
                .collect(),
        );
        query.push(
            picked[spec.n_support..]
                .iter()
                .map(|&i| class.examples[i].clone())
                .collect(),
        );
    }
    Ok(Episode {
        class_ids,
        support,
        query,
    })
}
