//! Classification heads: prototype construction, posteriors, episodic
//! losses, and the algebraic re-interpretations (linear head, mixture
//! density, matching baseline, zero-shot prototypes).

use crate::distance::DistanceFn;
use crate::episode::{Episode, ZeroShotEpisode};
use crate::error::{Error, Result};
use crate::model::{EmbeddingNet, ForwardPass};
use crate::tensor::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

/// Per-class prototype vectors plus the distance they were built for.
#[derive(Debug, Clone)]
pub struct PrototypeSet {
    prototypes: Tensor,
    class_ids: Vec<u32>,
    distance: DistanceFn,
}

impl PrototypeSet {
    pub fn new(prototypes: Tensor, class_ids: Vec<u32>, distance: DistanceFn) -> Result<Self> {
        let s = prototypes.shape();
        if s.len() != 2 || s[0] != class_ids.len() || class_ids.is_empty() {
            return Err(Error::shape(
                "prototype_set",
                format!("{} ids for prototype matrix {:?}", class_ids.len(), s),
            ));
        }
        Ok(PrototypeSet {
            prototypes,
            class_ids,
            distance,
        })
    }

    /// (K, M) matrix, row k = prototype of local class k.
    pub fn prototypes(&self) -> &Tensor {
        &self.prototypes
    }

    pub fn class_ids(&self) -> &[u32] {
        &self.class_ids
    }

    pub fn distance(&self) -> &DistanceFn {
        &self.distance
    }

    pub fn n_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.shape()[1]
    }
}

/// A normalized posterior over the classes of an episode.
#[derive(Debug, Clone)]
pub struct ClassPosterior {
    probabilities: Vec<f64>,
}

impl ClassPosterior {
    /// Softmax of raw scores with max subtraction, so scores of any
    /// magnitude normalize without overflow.
    fn from_scores(scores: &[f64]) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::contract("posterior", "no classes"));
        }
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericDomain {
                op: "posterior",
                detail: "non-finite score".into(),
            });
        }
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|&s| (s - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        Ok(ClassPosterior {
            probabilities: exps.into_iter().map(|e| e / z).collect(),
        })
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    /// Most probable class; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probabilities.iter().enumerate() {
            if p > self.probabilities[best] {
                best = i;
            }
        }
        best
    }
}

/// A mixture density over class means: p(k | z) ∝ π_k exp(−d(z, μ_k)).
#[derive(Debug, Clone)]
pub struct MixtureModel {
    means: Tensor,
    weights: Vec<f64>,
    divergence: DistanceFn,
}

impl MixtureModel {
    /// Weights must be strictly positive and sum to 1 (within 1e-12).
    pub fn new(means: Tensor, weights: Vec<f64>, divergence: DistanceFn) -> Result<Self> {
        let s = means.shape();
        if s.len() != 2 || s[0] != weights.len() || weights.is_empty() {
            return Err(Error::shape(
                "mixture",
                format!("{} weights for mean matrix {:?}", weights.len(), s),
            ));
        }
        if weights.iter().any(|&w| w <= 0.0 || !w.is_finite()) {
            return Err(Error::contract(
                "mixture",
                "mixing weights must be strictly positive",
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::contract(
                "mixture",
                format!("mixing weights sum to {total}, expected 1"),
            ));
        }
        Ok(MixtureModel {
            means,
            weights,
            divergence,
        })
    }

    pub fn uniform(means: Tensor, divergence: DistanceFn) -> Result<Self> {
        let k = match means.shape() {
            [k, _] if *k > 0 => *k,
            s => return Err(Error::shape("mixture", format!("{:?}", s))),
        };
        MixtureModel::new(means, vec![1.0 / k as f64; k], divergence)
    }

    pub fn means(&self) -> &Tensor {
        &self.means
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

fn stack_groups(groups: &[Vec<Tensor>]) -> Result<Tensor> {
    let refs: Vec<&Tensor> = groups.iter().flatten().collect();
    Tensor::stack(&refs)
}

fn check_episode(episode: &Episode) -> Result<(usize, usize, usize)> {
    let (nc, ns, nq) = (episode.n_way(), episode.n_support(), episode.n_query());
    if nc == 0 || ns == 0 || nq == 0 {
        return Err(Error::contract("episode", "empty episode"));
    }
    if episode.support.len() != nc
        || episode.query.len() != nc
        || episode.support.iter().any(|s| s.len() != ns)
        || episode.query.iter().any(|q| q.len() != nq)
    {
        return Err(Error::contract(
            "episode",
            "ragged support/query sets",
        ));
    }
    Ok((nc, ns, nq))
}

/// Embed the support set and average it per class: c_k is the mean of the
/// embedded support points of class k.
pub fn compute_prototypes(
    net: &EmbeddingNet,
    episode: &Episode,
    distance: &DistanceFn,
) -> Result<PrototypeSet> {
    let (nc, ns, _) = check_episode(episode)?;
    let batch = stack_groups(&episode.support)?;
    let emb = net.embed(&batch)?;
    let m = net.output_dim();
    let mut protos = vec![0.0; nc * m];
    for k in 0..nc {
        for i in 0..ns {
            let row = emb.row(k * ns + i);
            for (acc, &v) in protos[k * m..(k + 1) * m].iter_mut().zip(row) {
                *acc += v;
            }
        }
        for v in &mut protos[k * m..(k + 1) * m] {
            *v /= ns as f64;
        }
    }
    PrototypeSet::new(
        Tensor::from_vec(vec![nc, m], protos)?,
        episode.class_ids.clone(),
        distance.clone(),
    )
}

/// Distance-softmax posterior: p(k | z) = softmax_k(−d(z, c_k)).
pub fn classify_query(protos: &PrototypeSet, query_embedding: &[f64]) -> Result<ClassPosterior> {
    if query_embedding.len() != protos.dim() {
        return Err(Error::shape(
            "classify_query",
            format!("query dim {} vs prototypes {}", query_embedding.len(), protos.dim()),
        ));
    }
    let mut scores = Vec::with_capacity(protos.n_classes());
    for k in 0..protos.n_classes() {
        scores.push(-protos.distance.distance(query_embedding, protos.prototypes.row(k))?);
    }
    ClassPosterior::from_scores(&scores)
}

/// Mixture posterior with explicit mixing weights:
/// p(k | z) = softmax_k(ln π_k − d(z, μ_k)).
pub fn mixture_posterior(model: &MixtureModel, z: &[f64]) -> Result<ClassPosterior> {
    let k = model.weights.len();
    let mut scores = Vec::with_capacity(k);
    for j in 0..k {
        scores.push(model.weights[j].ln() - model.divergence.distance(z, model.means.row(j))?);
    }
    ClassPosterior::from_scores(&scores)
}

/// Everything a loss construction leaves on the tape.
pub struct EpisodeLossPass {
    pub loss: Var,
    pub forward: ForwardPass,
}

/// The episodic training loss, built on the tape so it can be
/// differentiated: the support and query sets are embedded as one batch,
/// prototypes are per-class means of the support rows, and the loss is the
/// mean over query points of d(f(x), c_y) + log Σ_k exp(−d(f(x), c_k)).
pub fn episode_loss(
    tape: &mut Tape,
    net: &EmbeddingNet,
    episode: &Episode,
    distance: &DistanceFn,
    mode: Mode,
) -> Result<EpisodeLossPass> {
    let (nc, ns, nq) = check_episode(episode)?;
    let mut all = episode.support.clone();
    all.extend(episode.query.iter().cloned());
    let batch = stack_groups(&all)?;
    let forward = net.forward(tape, &batch, mode, true)?;

    let groups: Vec<Vec<usize>> = (0..nc)
        .map(|k| (k * ns..(k + 1) * ns).collect())
        .collect();
    let protos = tape.grouped_row_mean(forward.output, groups)?;
    let qrows: Vec<usize> = (nc * ns..nc * (ns + nq)).collect();
    let queries = tape.gather_rows(forward.output, qrows)?;

    let dists = distance.pairwise_on_tape(tape, queries, protos)?;
    let labels: Vec<usize> = (0..nc).flat_map(|k| std::iter::repeat(k).take(nq)).collect();
    let pos = tape.gather_per_row(dists, labels)?;
    let neg = tape.neg(dists)?;
    let lse = tape.logsumexp_rows(neg)?;
    let per_query = tape.add(pos, lse)?;
    let loss = tape.mean_all(per_query)?;
    Ok(EpisodeLossPass { loss, forward })
}

/// Matching-style posterior: softmax attention over the individual embedded
/// support points, summed per class. With one support point per class this
/// is exactly the prototype posterior.
pub fn matching_net_predict(
    net: &EmbeddingNet,
    episode: &Episode,
    distance: &DistanceFn,
    query: &Tensor,
) -> Result<ClassPosterior> {
    let (nc, ns, _) = check_episode(episode)?;
    let support = net.embed(&stack_groups(&episode.support)?)?;
    let q = net.embed_one(query)?;
    let mut scores = Vec::with_capacity(nc * ns);
    for i in 0..nc * ns {
        scores.push(-distance.distance(&q, support.row(i))?);
    }
    let attention = ClassPosterior::from_scores(&scores)?;
    let mut probabilities = vec![0.0; nc];
    for (i, &a) in attention.probabilities().iter().enumerate() {
        probabilities[i / ns] += a;
    }
    Ok(ClassPosterior { probabilities })
}

/// Matching-baseline training loss: −log p(y | x) where p sums softmax
/// attention weights per class, averaged over the query set.
pub fn matching_net_loss(
    tape: &mut Tape,
    net: &EmbeddingNet,
    episode: &Episode,
    distance: &DistanceFn,
    mode: Mode,
) -> Result<EpisodeLossPass> {
    let (nc, ns, nq) = check_episode(episode)?;
    let mut all = episode.support.clone();
    all.extend(episode.query.iter().cloned());
    let batch = stack_groups(&all)?;
    let forward = net.forward(tape, &batch, mode, true)?;

    let srows: Vec<usize> = (0..nc * ns).collect();
    let support = tape.gather_rows(forward.output, srows)?;
    let qrows: Vec<usize> = (nc * ns..nc * (ns + nq)).collect();
    let queries = tape.gather_rows(forward.output, qrows)?;

    // scores[i, j] = −d(query_i, support_j); p(k | i) factorizes into
    // logsumexp over the class-k columns minus logsumexp over all columns.
    let dists = distance.pairwise_on_tape(tape, queries, support)?;
    let scores = tape.neg(dists)?;
    let lse_all = tape.logsumexp_rows(scores)?;
    let mut per_class = Vec::with_capacity(nc);
    for k in 0..nc {
        let cols: Vec<usize> = (k * ns..(k + 1) * ns).collect();
        let sub = tape.gather_cols(scores, cols)?;
        per_class.push(tape.logsumexp_rows(sub)?);
    }
    let class_scores = tape.stack_cols(per_class)?;
    let labels: Vec<usize> = (0..nc).flat_map(|k| std::iter::repeat(k).take(nq)).collect();
    let lse_true = tape.gather_per_row(class_scores, labels)?;
    let per_query = tape.sub(lse_all, lse_true)?;
    let loss = tape.mean_all(per_query)?;
    Ok(EpisodeLossPass { loss, forward })
}

/// Re-express the prototype classifier as an affine layer: scores
/// w_k·z + b_k with w_k = 2c_k and b_k = −‖c_k‖² produce the same posterior
/// as −‖z − c_k‖². Only valid for the squared Euclidean distance.
pub fn linear_head(protos: &PrototypeSet) -> Result<(Tensor, Vec<f64>)> {
    if !matches!(protos.distance, DistanceFn::SqEuclidean) {
        return Err(Error::Unsupported(format!(
            "linear head requires sq_euclidean, got {}",
            protos.distance.config_name()
        )));
    }
    let (k, m) = (protos.n_classes(), protos.dim());
    let mut w = Vec::with_capacity(k * m);
    let mut b = Vec::with_capacity(k);
    for row in 0..k {
        let c = protos.prototypes.row(row);
        w.extend(c.iter().map(|&v| 2.0 * v));
        b.push(-c.iter().map(|&v| v * v).sum::<f64>());
    }
    Ok((Tensor::from_vec(vec![k, m], w)?, b))
}

/// Zero-shot prototypes: embed each class's attribute vector with the
/// meta-embedding and scale it to unit length.
pub fn zero_shot_prototypes(
    meta_net: &EmbeddingNet,
    attributes: &Tensor,
    class_ids: &[u32],
    distance: &DistanceFn,
) -> Result<PrototypeSet> {
    let s = attributes.shape();
    if s.len() != 2 || s[0] != class_ids.len() {
        return Err(Error::shape(
            "zero_shot_prototypes",
            format!("{} ids for attribute matrix {:?}", class_ids.len(), s),
        ));
    }
    let emb = meta_net.embed(attributes)?;
    let (k, m) = (emb.shape()[0], emb.shape()[1]);
    let mut out = Vec::with_capacity(k * m);
    for row in 0..k {
        let r = emb.row(row);
        let norm = r.iter().map(|&v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::DegenerateInput {
                op: "zero_shot_prototypes",
                detail: format!("class {} embeds to the zero vector", class_ids[row]),
            });
        }
        out.extend(r.iter().map(|&v| v / norm));
    }
    PrototypeSet::new(
        Tensor::from_vec(vec![k, m], out)?,
        class_ids.to_vec(),
        distance.clone(),
    )
}

/// Tape artifacts of the zero-shot loss: both networks' parameter handles.
pub struct ZeroShotLossPass {
    pub loss: Var,
    pub query_forward: ForwardPass,
    pub meta_forward: ForwardPass,
}

/// Zero-shot episodic loss: queries flow through `query_net`, class
/// attributes through `meta_net` followed by unit normalization, and the
/// usual distance-softmax loss couples the two. Gradients flow into both
/// networks (the normalization is part of the graph).
pub fn zero_shot_episode_loss(
    tape: &mut Tape,
    query_net: &EmbeddingNet,
    meta_net: &EmbeddingNet,
    episode: &ZeroShotEpisode,
    distance: &DistanceFn,
    mode: Mode,
) -> Result<ZeroShotLossPass> {
    let (nc, nq) = (episode.n_way(), episode.n_query());
    if nc == 0 || nq == 0 || episode.query.iter().any(|q| q.len() != nq) {
        return Err(Error::contract("episode", "empty or ragged zero-shot episode"));
    }
    if episode.attributes.shape() != [nc, episode.attributes.shape()[1]] {
        return Err(Error::shape(
            "zero_shot_loss",
            format!("attribute matrix {:?}", episode.attributes.shape()),
        ));
    }
    let qbatch = stack_groups(&episode.query)?;
    let query_forward = query_net.forward(tape, &qbatch, mode, true)?;
    let meta_forward = meta_net.forward(tape, &episode.attributes, mode, true)?;
    let protos = tape.unit_normalize_rows(meta_forward.output)?;

    let dists = distance.pairwise_on_tape(tape, query_forward.output, protos)?;
    let labels: Vec<usize> = (0..nc).flat_map(|k| std::iter::repeat(k).take(nq)).collect();
    let pos = tape.gather_per_row(dists, labels)?;
    let neg = tape.neg(dists)?;
    let lse = tape.logsumexp_rows(neg)?;
    let per_query = tape.add(pos, lse)?;
    let loss = tape.mean_all(per_query)?;
    Ok(ZeroShotLossPass {
        loss,
        query_forward,
        meta_forward,
    })
}
