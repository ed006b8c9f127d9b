//! Config-driven experiment orchestration: the training loop with the
//! halving learning-rate schedule, read-only parallel evaluation with
//! confidence intervals, grid sweeps, and CSV reporting.

pub mod selftest;

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    gen_attribute_dataset, gen_gaussian_dataset, load_attribute_dataset, load_dataset,
    load_manifest, AttributeDataset, SyntheticSpec, ZeroShotSpec,
};
use crate::distance::DistanceFn;
use crate::episode::{sample_episode, EpisodeSpec, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::{
    classify_query, compute_prototypes, episode_loss, matching_net_loss, matching_net_predict,
    zero_shot_episode_loss, zero_shot_prototypes, EmbeddingNet, EpisodeLossPass,
};
use crate::rng::Rng;
use crate::tensor::tape::{Mode, Tape};
use crate::tensor::{read_checkpoint, write_checkpoint, AdamState, Tensor};

// ---- configuration -------------------------------------------------------------

/// Where the examples come from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    /// Isotropic Gaussian classes generated on the fly from the seed.
    Synthetic(SyntheticSpec),
    /// A manifest.json written by gen-data or an external converter.
    Manifest { path: String },
    /// Synthetic attribute task for the zero-shot head.
    ZeroShotSynthetic(ZeroShotSpec),
}

/// Way/shot/query triple as it appears in config files.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct ConfigEpisode {
    pub way: usize,
    pub shot: usize,
    pub query: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct EarlyStopping {
    /// Validation rounds without improvement before training stops.
    pub patience: usize,
    /// Episodes between validation rounds.
    pub check_every: usize,
    /// Episodes per validation round.
    pub validation_episodes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Protonet,
    Matching,
    ZeroShot,
}

impl HeadKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "protonet" => Ok(HeadKind::Protonet),
            "matching" => Ok(HeadKind::Matching),
            "zero-shot" => Ok(HeadKind::ZeroShot),
            other => Err(Error::Config(format!(
                "unknown head '{other}' (expected protonet, matching, or zero-shot)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            HeadKind::Protonet => "protonet",
            HeadKind::Matching => "matching",
            HeadKind::ZeroShot => "zero-shot",
        }
    }
}

fn default_head() -> String {
    "protonet".into()
}

/// One experiment, fully determined together with its seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    /// Held-out source for early stopping; unused otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<DatasetConfig>,
    /// Embedding preset for the query network.
    pub embedding: String,
    /// Preset for the meta-data network g (zero-shot head only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta_embedding: Option<String>,
    pub distance: String,
    #[serde(default = "default_head")]
    pub head: String,
    pub train: ConfigEpisode,
    pub eval: ConfigEpisode,
    pub initial_lr: f64,
    pub lr_halving_period: usize,
    pub max_episodes: usize,
    pub eval_episodes: usize,
    pub seed: u64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub early_stopping: Option<EarlyStopping>,
}

impl ExperimentConfig {
    pub fn head_kind(&self) -> Result<HeadKind> {
        HeadKind::parse(&self.head)
    }

    pub fn distance_fn(&self) -> Result<DistanceFn> {
        DistanceFn::parse(&self.distance)
    }

    pub fn validate(&self) -> Result<()> {
        let head = self.head_kind()?;
        self.distance_fn()?;
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::Config(format!("{name} must be positive")))
            } else {
                Ok(())
            }
        };
        positive("train.way", self.train.way)?;
        positive("train.query", self.train.query)?;
        positive("eval.way", self.eval.way)?;
        positive("eval.query", self.eval.query)?;
        positive("eval_episodes", self.eval_episodes)?;
        positive("lr_halving_period", self.lr_halving_period)?;
        if head == HeadKind::ZeroShot {
            if self.train.shot != 0 || self.eval.shot != 0 {
                return Err(Error::Config(
                    "the zero-shot head takes no support examples; set shot to 0".into(),
                ));
            }
            if self.meta_embedding.is_none() {
                return Err(Error::Config(
                    "the zero-shot head needs a meta_embedding preset".into(),
                ));
            }
        } else {
            positive("train.shot", self.train.shot)?;
            positive("eval.shot", self.eval.shot)?;
        }
        if !(self.initial_lr.is_finite() && self.initial_lr > 0.0) {
            return Err(Error::Config("initial_lr must be positive".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if let Some(es) = &self.early_stopping {
            if es.patience == 0 || es.check_every == 0 || es.validation_episodes == 0 {
                return Err(Error::Config("early_stopping counts must be positive".into()));
            }
            if self.validation.is_none() {
                return Err(Error::Config(
                    "early_stopping requires a validation dataset".into(),
                ));
            }
        }
        match &self.dataset {
            DatasetConfig::Synthetic(s) => s.validate()?,
            DatasetConfig::ZeroShotSynthetic(s) => s.validate()?,
            DatasetConfig::Manifest { .. } => {}
        }
        Ok(())
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let config: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!(
            "{}: {e}",
            path.display()
        )))?;
    config.validate()?;
    Ok(config)
}

// ---- seed streams ---------------------------------------------------------------

/// Independent generator streams split from the experiment seed, in a fixed
/// order so each phase is insulated from the others.
pub struct SeedStreams {
    pub data: Rng,
    pub init: Rng,
    pub train: Rng,
    pub validation: Rng,
    pub eval: Rng,
}

pub fn seed_streams(seed: u64) -> SeedStreams {
    let mut root = Rng::new(seed);
    SeedStreams {
        data: root.split(),
        init: root.split(),
        train: root.split(),
        validation: root.split(),
        eval: root.split(),
    }
}

// ---- data preparation --------------------------------------------------------------

/// Materialized training data; synthetic sources keep their hidden truth so
/// oracles can be evaluated on the same episodes.
pub enum TrainData {
    Labeled {
        data: LabeledDataset,
        truth: Option<SyntheticTruth>,
    },
    Attribute(AttributeDataset),
}

pub struct SyntheticTruth {
    pub means: Tensor,
    pub sigma: f64,
}

pub fn prepare_data(source: &DatasetConfig, head: HeadKind, rng: &mut Rng) -> Result<TrainData> {
    match (source, head) {
        (DatasetConfig::Synthetic(spec), _) => {
            let task = gen_gaussian_dataset(spec, rng)?;
            Ok(TrainData::Labeled {
                data: task.dataset,
                truth: Some(SyntheticTruth {
                    means: task.true_means,
                    sigma: task.noise_sigma,
                }),
            })
        }
        (DatasetConfig::Manifest { path }, HeadKind::ZeroShot) => Ok(TrainData::Attribute(
            load_attribute_dataset(Path::new(path))?,
        )),
        (DatasetConfig::Manifest { path }, _) => Ok(TrainData::Labeled {
            data: load_dataset(Path::new(path))?,
            truth: None,
        }),
        (DatasetConfig::ZeroShotSynthetic(spec), _) => {
            Ok(TrainData::Attribute(gen_attribute_dataset(spec, rng)?))
        }
    }
}

/// Input shapes the embedding networks must accept for a dataset source:
/// the query-side shape plus, for attribute sources, the meta-data shape.
pub fn input_shapes(source: &DatasetConfig, head: HeadKind) -> Result<(Vec<usize>, Option<Vec<usize>>)> {
    match (source, head) {
        (DatasetConfig::Synthetic(s), _) => Ok((vec![s.dim], None)),
        (DatasetConfig::Manifest { path }, HeadKind::ZeroShot) => {
            let data = load_attribute_dataset(Path::new(path))?;
            Ok((
                data.input_shape().to_vec(),
                Some(vec![data.attr_dim()]),
            ))
        }
        (DatasetConfig::Manifest { path }, _) => {
            Ok((load_manifest(Path::new(path))?.input_shape, None))
        }
        (DatasetConfig::ZeroShotSynthetic(s), _) => {
            Ok((vec![s.feature_dim], Some(vec![s.attr_dim])))
        }
    }
}

// ---- learning-rate schedule -----------------------------------------------------------

/// Step decay: the rate halves once per period. A zero period disables the
/// decay.
pub fn lr_schedule(initial_lr: f64, episode_index: usize, halving_period: usize) -> f64 {
    if halving_period == 0 {
        return initial_lr;
    }
    initial_lr * 0.5f64.powi((episode_index / halving_period) as i32)
}

// ---- training --------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub episode: usize,
    pub loss: f64,
    pub lr: f64,
}

pub struct TrainOutcome {
    pub net: EmbeddingNet,
    /// The meta-data network g; present only for the zero-shot head.
    pub meta_net: Option<EmbeddingNet>,
    pub log: Vec<LogRow>,
    pub episodes_run: usize,
}

fn divergence_guard(episode: usize, r: Result<EpisodeLossPass>) -> Result<EpisodeLossPass> {
    match r {
        Err(Error::NumericDomain { op, detail }) => Err(Error::Divergence {
            episode,
            detail: format!("{op}: {detail}"),
        }),
        other => other,
    }
}

fn collect_grads(tape: &Tape, pass: &crate::model::ForwardPass) -> Vec<Tensor> {
    pass.param_vars
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            tape.grad(v)
                .unwrap_or_else(|| Tensor::zeros(tape.shape(pass.param_vars[i]).to_vec()))
        })
        .collect()
}

/// Run the episodic training loop described by the config: sample an
/// episode, build the head's loss on a fresh tape, backpropagate, and take
/// one Adam step at the scheduled learning rate (weight decay is decoupled
/// shrinkage folded into the same step). Training state is fully determined
/// by (config, seed).
pub fn train(config: &ExperimentConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let head = config.head_kind()?;
    let mut streams = seed_streams(config.seed);
    let data = prepare_data(&config.dataset, head, &mut streams.data)?;
    let validation = config
        .validation
        .as_ref()
        .map(|v| prepare_data(v, head, &mut streams.data))
        .transpose()?;
    train_prepared(config, &data, validation.as_ref(), &mut streams)
}

/// Training against already-materialized data (the seed streams must come
/// from [`seed_streams`] for reproducibility guarantees to hold).
pub fn train_prepared(
    config: &ExperimentConfig,
    data: &TrainData,
    validation: Option<&TrainData>,
    streams: &mut SeedStreams,
) -> Result<TrainOutcome> {
    config.validate()?;
    let head = config.head_kind()?;
    let distance = config.distance_fn()?;
    let (input_shape, meta_shape) = match data {
        TrainData::Labeled { data, .. } => (data.input_shape().to_vec(), None),
        TrainData::Attribute(a) => (
            a.input_shape().to_vec(),
            Some(vec![a.attr_dim()]),
        ),
    };
    let mut net = EmbeddingNet::from_preset(&config.embedding, &input_shape, &mut streams.init)?;
    let mut meta_net = match (head, &config.meta_embedding) {
        (HeadKind::ZeroShot, Some(preset)) => {
            let shape = meta_shape.ok_or_else(|| {
                Error::Config("zero-shot head needs an attribute dataset".into())
            })?;
            Some(EmbeddingNet::from_preset(preset, &shape, &mut streams.init)?)
        }
        (HeadKind::ZeroShot, None) => {
            return Err(Error::Config("zero-shot head needs meta_embedding".into()))
        }
        _ => None,
    };

    let mut adam = AdamState::new();
    let mut meta_adam = AdamState::new();
    let mut log = Vec::with_capacity(config.max_episodes);
    let mut best_val = f64::INFINITY;
    let mut stale_rounds = 0usize;
    let mut episodes_run = 0usize;

    for episode_idx in 0..config.max_episodes {
        let lr = lr_schedule(config.initial_lr, episode_idx, config.lr_halving_period);
        let mut tape = Tape::new();
        let loss_value = match (head, data) {
            (HeadKind::ZeroShot, TrainData::Attribute(attr_data)) => {
                let meta = meta_net.as_mut().expect("meta net exists for zero-shot");
                let ep = crate::data::sample_zero_shot_episode(
                    attr_data,
                    config.train.way,
                    config.train.query,
                    &mut streams.train,
                )?;
                let pass = match zero_shot_episode_loss(
                    &mut tape, &net, meta, &ep, &distance, Mode::Train,
                ) {
                    Err(Error::NumericDomain { op, detail }) => {
                        return Err(Error::Divergence {
                            episode: episode_idx,
                            detail: format!("{op}: {detail}"),
                        })
                    }
                    other => other?,
                };
                let loss_value = tape.value(pass.loss).item();
                tape.backward(pass.loss)?;
                let grads = collect_grads(&tape, &pass.query_forward);
                adam.step(net.params_mut(), &grads, lr, config.weight_decay)?;
                let mgrads = collect_grads(&tape, &pass.meta_forward);
                meta_adam.step(meta.params_mut(), &mgrads, lr, config.weight_decay)?;
                net.apply_bn_updates(&pass.query_forward.bn_updates);
                meta.apply_bn_updates(&pass.meta_forward.bn_updates);
                loss_value
            }
            (HeadKind::ZeroShot, TrainData::Labeled { .. }) => {
                return Err(Error::Config(
                    "zero-shot head needs an attribute dataset".into(),
                ))
            }
            (_, TrainData::Attribute(_)) => {
                return Err(Error::Config(
                    "protonet/matching heads need a labeled dataset".into(),
                ))
            }
            (_, TrainData::Labeled { data, .. }) => {
                let spec =
                    EpisodeSpec::new(config.train.way, config.train.shot, config.train.query)?;
                let ep = sample_episode(data, &spec, &mut streams.train)?;
                let pass = divergence_guard(
                    episode_idx,
                    match head {
                        HeadKind::Matching => {
                            matching_net_loss(&mut tape, &net, &ep, &distance, Mode::Train)
                        }
                        _ => episode_loss(&mut tape, &net, &ep, &distance, Mode::Train),
                    },
                )?;
                let loss_value = tape.value(pass.loss).item();
                tape.backward(pass.loss)?;
                let grads = collect_grads(&tape, &pass.forward);
                adam.step(net.params_mut(), &grads, lr, config.weight_decay)?;
                net.apply_bn_updates(&pass.forward.bn_updates);
                loss_value
            }
        };
        if !loss_value.is_finite() {
            return Err(Error::Divergence {
                episode: episode_idx,
                detail: format!("loss became {loss_value}"),
            });
        }
        log.push(LogRow {
            episode: episode_idx,
            loss: loss_value,
            lr,
        });
        episodes_run = episode_idx + 1;

        if let (Some(es), Some(val)) = (&config.early_stopping, validation) {
            if episodes_run % es.check_every == 0 {
                let val_loss = validation_loss(
                    config,
                    &net,
                    meta_net.as_ref(),
                    val,
                    es.validation_episodes,
                    &mut streams.validation,
                )?;
                if val_loss < best_val {
                    best_val = val_loss;
                    stale_rounds = 0;
                } else {
                    stale_rounds += 1;
                    if stale_rounds >= es.patience {
                        break;
                    }
                }
            }
        }
    }
    Ok(TrainOutcome {
        net,
        meta_net,
        log,
        episodes_run,
    })
}

/// Mean eval-mode episode loss on held-out data (no parameter updates).
fn validation_loss(
    config: &ExperimentConfig,
    net: &EmbeddingNet,
    meta_net: Option<&EmbeddingNet>,
    data: &TrainData,
    episodes: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let head = config.head_kind()?;
    let distance = config.distance_fn()?;
    let mut total = 0.0;
    for _ in 0..episodes {
        let mut tape = Tape::new();
        total += match (head, data) {
            (HeadKind::ZeroShot, TrainData::Attribute(attr_data)) => {
                let meta = meta_net.ok_or_else(|| {
                    Error::Config("zero-shot validation needs the meta network".into())
                })?;
                let ep = crate::data::sample_zero_shot_episode(
                    attr_data,
                    config.train.way,
                    config.train.query,
                    rng,
                )?;
                let pass =
                    zero_shot_episode_loss(&mut tape, net, meta, &ep, &distance, Mode::Eval)?;
                tape.value(pass.loss).item()
            }
            (_, TrainData::Labeled { data, .. }) => {
                let spec =
                    EpisodeSpec::new(config.train.way, config.train.shot, config.train.query)?;
                let ep = sample_episode(data, &spec, rng)?;
                let pass = match head {
                    HeadKind::Matching => {
                        matching_net_loss(&mut tape, net, &ep, &distance, Mode::Eval)?
                    }
                    _ => episode_loss(&mut tape, net, &ep, &distance, Mode::Eval)?,
                };
                tape.value(pass.loss).item()
            }
            _ => return Err(Error::Config("validation dataset kind mismatch".into())),
        };
    }
    Ok(total / episodes.max(1) as f64)
}

// ---- evaluation ------------------------------------------------------------------------

/// Evaluation summary for one configuration. Wall time is informational and
/// deliberately excluded from CSV output so reports stay byte-reproducible.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub acc_mean: f64,
    pub ci95: f64,
    pub episodes: usize,
    pub per_episode: Vec<f64>,
    pub wall_secs: f64,
}

/// Pre-assign one sampling seed per evaluation episode; parallel and serial
/// execution then reduce to identical numbers.
pub fn episode_seeds(rng: &mut Rng, n: usize) -> Vec<u64> {
    (0..n).map(|_| rng.next_u64()).collect()
}

fn summarize(per_episode: Vec<f64>, wall_secs: f64) -> EvalOutcome {
    let n = per_episode.len();
    let mean = per_episode.iter().sum::<f64>() / n as f64;
    let ci95 = if n < 2 {
        0.0
    } else {
        let var = per_episode
            .iter()
            .map(|a| (a - mean) * (a - mean))
            .sum::<f64>()
            / (n - 1) as f64;
        1.96 * var.sqrt() / (n as f64).sqrt()
    };
    EvalOutcome {
        acc_mean: mean,
        ci95,
        episodes: n,
        per_episode,
        wall_secs,
    }
}

fn episode_accuracy(
    net: &EmbeddingNet,
    episode: &crate::episode::Episode,
    distance: &DistanceFn,
    head: HeadKind,
) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    match head {
        HeadKind::Protonet => {
            let protos = compute_prototypes(net, episode, distance)?;
            for (k, class) in episode.query.iter().enumerate() {
                for q in class {
                    let z = net.embed_one(q)?;
                    if classify_query(&protos, &z)?.argmax() == k {
                        correct += 1;
                    }
                    total += 1;
                }
            }
        }
        HeadKind::Matching => {
            for (k, class) in episode.query.iter().enumerate() {
                for q in class {
                    if matching_net_predict(net, episode, distance, q)?.argmax() == k {
                        correct += 1;
                    }
                    total += 1;
                }
            }
        }
        HeadKind::ZeroShot => {
            return Err(Error::Unsupported(
                "zero-shot evaluation needs evaluate_zero_shot".into(),
            ))
        }
    }
    Ok(correct as f64 / total as f64)
}

/// Evaluate with explicitly pinned episode seeds (read-only w.r.t. the
/// model). Episodes run in parallel; per-episode accuracy is the fraction
/// of correctly classified queries, and the report averages over episodes.
pub fn evaluate_with_seeds(
    net: &EmbeddingNet,
    data: &LabeledDataset,
    spec: &EpisodeSpec,
    seeds: &[u64],
    distance: &DistanceFn,
    head: HeadKind,
) -> Result<EvalOutcome> {
    if seeds.is_empty() {
        return Err(Error::contract("evaluate", "no evaluation episodes"));
    }
    let start = Instant::now();
    let per_episode: Vec<f64> = seeds
        .par_iter()
        .map(|&s| {
            let mut rng = Rng::new(s);
            let ep = sample_episode(data, spec, &mut rng)?;
            episode_accuracy(net, &ep, distance, head)
        })
        .collect::<Result<_>>()?;
    Ok(summarize(per_episode, start.elapsed().as_secs_f64()))
}

pub fn evaluate(
    net: &EmbeddingNet,
    data: &LabeledDataset,
    spec: &EpisodeSpec,
    n_episodes: usize,
    distance: &DistanceFn,
    head: HeadKind,
    rng: &mut Rng,
) -> Result<EvalOutcome> {
    let seeds = episode_seeds(rng, n_episodes);
    evaluate_with_seeds(net, data, spec, &seeds, distance, head)
}

/// Zero-shot evaluation: prototypes come from the meta network applied to
/// the episode's class attributes; queries are classified against them.
pub fn evaluate_zero_shot(
    net: &EmbeddingNet,
    meta_net: &EmbeddingNet,
    data: &AttributeDataset,
    n_way: usize,
    n_query: usize,
    seeds: &[u64],
    distance: &DistanceFn,
) -> Result<EvalOutcome> {
    if seeds.is_empty() {
        return Err(Error::contract("evaluate", "no evaluation episodes"));
    }
    let start = Instant::now();
    let per_episode: Vec<f64> = seeds
        .par_iter()
        .map(|&s| {
            let mut rng = Rng::new(s);
            let ep = crate::data::sample_zero_shot_episode(data, n_way, n_query, &mut rng)?;
            let protos =
                zero_shot_prototypes(meta_net, &ep.attributes, &ep.class_ids, distance)?;
            let mut correct = 0usize;
            let mut total = 0usize;
            for (k, class) in ep.query.iter().enumerate() {
                for q in class {
                    let z = net.embed_one(q)?;
                    if classify_query(&protos, &z)?.argmax() == k {
                        correct += 1;
                    }
                    total += 1;
                }
            }
            Ok(correct as f64 / total as f64)
        })
        .collect::<Result<_>>()?;
    Ok(summarize(per_episode, start.elapsed().as_secs_f64()))
}

// ---- reporting -------------------------------------------------------------------------

pub const REPORT_HEADER: &str =
    "head,distance,train_way,train_shot,eval_way,eval_shot,episodes,acc_mean,ci95,seed";

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub head: String,
    pub distance: String,
    pub train_way: usize,
    pub train_shot: usize,
    pub eval_way: usize,
    pub eval_shot: usize,
    pub episodes: usize,
    pub acc_mean: f64,
    pub ci95: f64,
    pub seed: u64,
}

impl ReportRow {
    pub fn from_outcome(config: &ExperimentConfig, outcome: &EvalOutcome) -> Self {
        ReportRow {
            head: config.head.clone(),
            distance: config.distance.clone(),
            train_way: config.train.way,
            train_shot: config.train.shot,
            eval_way: config.eval.way,
            eval_shot: config.eval.shot,
            episodes: outcome.episodes,
            acc_mean: outcome.acc_mean,
            ci95: outcome.ci95,
            seed: config.seed,
        }
    }
}

pub fn report_to_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{:.6},{:.6},{}\n",
            r.head,
            r.distance,
            r.train_way,
            r.train_shot,
            r.eval_way,
            r.eval_shot,
            r.episodes,
            r.acc_mean,
            r.ci95,
            r.seed
        ));
    }
    out
}

pub fn write_report_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    std::fs::write(path, report_to_csv(rows)).map_err(|e| Error::io(path, e))
}

pub fn training_log_to_csv(log: &[LogRow]) -> String {
    let mut out = String::from("episode,loss,lr\n");
    for r in log {
        out.push_str(&format!("{},{:.6},{}\n", r.episode, r.loss, r.lr));
    }
    out
}

pub fn write_training_log(path: &Path, log: &[LogRow]) -> Result<()> {
    std::fs::write(path, training_log_to_csv(log)).map_err(|e| Error::io(path, e))
}

// ---- checkpoint plumbing ------------------------------------------------------------------

/// Save the trained network(s); zero-shot entries are prefixed "f." / "g.".
pub fn save_model(path: &Path, outcome: &TrainOutcome) -> Result<()> {
    let entries = match &outcome.meta_net {
        None => outcome.net.checkpoint_entries(),
        Some(meta) => {
            let mut entries: Vec<(String, Tensor)> = outcome
                .net
                .checkpoint_entries()
                .into_iter()
                .map(|(n, t)| (format!("f.{n}"), t))
                .collect();
            entries.extend(
                meta.checkpoint_entries()
                    .into_iter()
                    .map(|(n, t)| (format!("g.{n}"), t)),
            );
            entries
        }
    };
    write_checkpoint(path, &entries)
}

/// Rebuild the networks a config describes and restore their parameters.
pub fn load_model(
    path: &Path,
    config: &ExperimentConfig,
) -> Result<(EmbeddingNet, Option<EmbeddingNet>)> {
    let (input_shape, meta_shape) = input_shapes(&config.dataset, config.head_kind()?)?;
    let mut scratch = Rng::new(0);
    let mut net = EmbeddingNet::from_preset(&config.embedding, &input_shape, &mut scratch)?;
    let entries = read_checkpoint(path)?;
    if config.head_kind()? == HeadKind::ZeroShot {
        let preset = config.meta_embedding.as_ref().ok_or_else(|| {
            Error::Config("zero-shot head needs meta_embedding".into())
        })?;
        let shape = meta_shape
            .ok_or_else(|| Error::Config("zero-shot head needs an attribute dataset".into()))?;
        let mut meta = EmbeddingNet::from_preset(preset, &shape, &mut scratch)?;
        let strip = |prefix: &str| -> Vec<(String, Tensor)> {
            entries
                .iter()
                .filter_map(|(n, t)| {
                    n.strip_prefix(prefix).map(|rest| (rest.to_string(), t.clone()))
                })
                .collect()
        };
        net.load_checkpoint_entries(&strip("f."))?;
        meta.load_checkpoint_entries(&strip("g."))?;
        Ok((net, Some(meta)))
    } else {
        net.load_checkpoint_entries(&entries)?;
        Ok((net, None))
    }
}

// ---- grid sweeps ------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridAxes {
    #[serde(default)]
    pub heads: Vec<String>,
    #[serde(default)]
    pub distances: Vec<String>,
    #[serde(default)]
    pub train_ways: Vec<usize>,
    #[serde(default)]
    pub train_shots: Vec<usize>,
}

impl GridAxes {
    /// Missing axes fall back to the base config's value.
    fn resolved(&self, base: &ExperimentConfig) -> GridAxes {
        let or_default = |v: &Vec<String>, d: &str| {
            if v.is_empty() {
                vec![d.to_string()]
            } else {
                v.clone()
            }
        };
        GridAxes {
            heads: or_default(&self.heads, &base.head),
            distances: or_default(&self.distances, &base.distance),
            train_ways: if self.train_ways.is_empty() {
                vec![base.train.way]
            } else {
                self.train_ways.clone()
            },
            train_shots: if self.train_shots.is_empty() {
                vec![base.train.shot]
            } else {
                self.train_shots.clone()
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct GridFailure {
    pub head: String,
    pub distance: String,
    pub train_way: usize,
    pub train_shot: usize,
    pub error: String,
}

#[derive(Debug, Clone, Default)]
pub struct GridReport {
    pub rows: Vec<ReportRow>,
    pub failures: Vec<GridFailure>,
}

/// Train and evaluate one model per grid cell against the base config's
/// fixed evaluation spec. Cell order: head, then distance, then way, then
/// shot. A failing cell is recorded and the sweep continues.
pub fn run_grid(base: &ExperimentConfig, axes: &GridAxes) -> Result<GridReport> {
    base.validate()?;
    let axes = axes.resolved(base);
    let mut report = GridReport::default();
    for head in &axes.heads {
        for distance in &axes.distances {
            for &way in &axes.train_ways {
                for &shot in &axes.train_shots {
                    let mut config = base.clone();
                    config.head = head.clone();
                    config.distance = distance.clone();
                    config.train.way = way;
                    config.train.shot = shot;
                    match run_cell(&config) {
                        Ok(row) => report.rows.push(row),
                        Err(e) => report.failures.push(GridFailure {
                            head: head.clone(),
                            distance: distance.clone(),
                            train_way: way,
                            train_shot: shot,
                            error: e.to_string(),
                        }),
                    }
                }
            }
        }
    }
    Ok(report)
}

fn run_cell(config: &ExperimentConfig) -> Result<ReportRow> {
    config.validate()?;
    let head = config.head_kind()?;
    let distance = config.distance_fn()?;
    let mut streams = seed_streams(config.seed);
    let data = prepare_data(&config.dataset, head, &mut streams.data)?;
    let validation = config
        .validation
        .as_ref()
        .map(|v| prepare_data(v, head, &mut streams.data))
        .transpose()?;
    let outcome = train_prepared(config, &data, validation.as_ref(), &mut streams)?;
    let eval_outcome = match (&data, head) {
        (TrainData::Labeled { data, .. }, HeadKind::Protonet | HeadKind::Matching) => {
            let spec = EpisodeSpec::new(config.eval.way, config.eval.shot, config.eval.query)?;
            evaluate(
                &outcome.net,
                data,
                &spec,
                config.eval_episodes,
                &distance,
                head,
                &mut streams.eval,
            )?
        }
        (TrainData::Attribute(attr_data), HeadKind::ZeroShot) => {
            let seeds = episode_seeds(&mut streams.eval, config.eval_episodes);
            evaluate_zero_shot(
                &outcome.net,
                outcome.meta_net.as_ref().expect("zero-shot meta net"),
                attr_data,
                config.eval.way,
                config.eval.query,
                &seeds,
                &distance,
            )?
        }
        _ => return Err(Error::Config("dataset kind does not match head".into())),
    };
    Ok(ReportRow::from_outcome(config, &eval_outcome))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config() -> ExperimentConfig {
        ExperimentConfig {
            dataset: DatasetConfig::Synthetic(SyntheticSpec {
                n_classes: 8,
                dim: 6,
                examples_per_class: 20,
                mean_scale: 1.5,
                noise_sigma: 0.3,
            }),
            validation: None,
            embedding: "mlp:6-12".into(),
            meta_embedding: None,
            distance: "sq_euclidean".into(),
            head: "protonet".into(),
            train: ConfigEpisode {
                way: 3,
                shot: 2,
                query: 3,
            },
            eval: ConfigEpisode {
                way: 3,
                shot: 2,
                query: 3,
            },
            initial_lr: 1e-2,
            lr_halving_period: 2000,
            max_episodes: 60,
            eval_episodes: 40,
            seed: 123,
            weight_decay: 0.0,
            early_stopping: None,
        }
    }

    #[test]
    fn lr_schedule_halves_on_period() {
        assert_eq!(lr_schedule(1e-3, 0, 2000), 1e-3);
        assert_eq!(lr_schedule(1e-3, 1999, 2000), 1e-3);
        assert_eq!(lr_schedule(1e-3, 2000, 2000), 5e-4);
        assert_eq!(lr_schedule(1e-3, 4000, 2000), 2.5e-4);
        assert_eq!(lr_schedule(1e-3, 12345, 0), 1e-3);
    }

    #[test]
    fn config_roundtrips_through_json_and_validates() {
        let config = toy_config();
        let text = serde_json::to_string_pretty(&config).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        back.validate().unwrap();
        assert_eq!(back.train, config.train);
        assert_eq!(back.seed, config.seed);

        let mut bad = toy_config();
        bad.initial_lr = 0.0;
        assert!(bad.validate().is_err());
        bad = toy_config();
        bad.train.way = 0;
        assert!(bad.validate().is_err());
        bad = toy_config();
        bad.head = "svm".into();
        assert!(bad.validate().is_err());
        bad = toy_config();
        bad.distance = "hamming".into();
        assert!(bad.validate().is_err());
        bad = toy_config();
        bad.early_stopping = Some(EarlyStopping {
            patience: 1,
            check_every: 10,
            validation_episodes: 5,
        });
        assert!(bad.validate().is_err(), "early stopping without validation data");
    }

    #[test]
    fn zero_max_episodes_returns_the_initialized_network() {
        let mut config = toy_config();
        config.max_episodes = 0;
        let outcome = train(&config).unwrap();
        assert_eq!(outcome.episodes_run, 0);
        assert!(outcome.log.is_empty());
        // Parameters must be bit-identical to a fresh initialization drawn
        // from the same seed stream.
        let mut streams = seed_streams(config.seed);
        let _ = prepare_data(&config.dataset, HeadKind::Protonet, &mut streams.data).unwrap();
        let fresh = EmbeddingNet::from_preset("mlp:6-12", &[6], &mut streams.init).unwrap();
        for (a, b) in outcome.net.params().iter().zip(fresh.params()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn training_reduces_loss_on_separable_data() {
        let mut config = toy_config();
        config.max_episodes = 500;
        let outcome = train(&config).unwrap();
        assert_eq!(outcome.log.len(), 500);
        let first: f64 = outcome.log[..100].iter().map(|r| r.loss).sum::<f64>() / 100.0;
        let last: f64 = outcome.log[400..].iter().map(|r| r.loss).sum::<f64>() / 100.0;
        assert!(
            last < first,
            "training failed to improve: first {first:.4}, last {last:.4}"
        );
    }

    #[test]
    fn training_is_bit_deterministic() {
        let config = toy_config();
        let a = train(&config).unwrap();
        let b = train(&config).unwrap();
        for (x, y) in a.net.params().iter().zip(b.net.params()) {
            assert_eq!(x.data(), y.data());
        }
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn training_diverges_loudly_on_absurd_learning_rates() {
        let mut config = toy_config();
        config.initial_lr = 1e200;
        config.max_episodes = 50;
        match train(&config) {
            Err(Error::Divergence { .. }) => {}
            Err(other) => panic!("expected divergence, got {other:?}"),
            Ok(_) => panic!("expected divergence, training succeeded"),
        }
    }

    #[test]
    fn training_rejects_oversized_episodes() {
        let mut config = toy_config();
        config.train.way = 50; // dataset has 8 classes
        config.max_episodes = 1;
        assert!(matches!(
            train(&config),
            Err(Error::InsufficientData { .. })
        ));
    }

    #[test]
    fn early_stopping_halts_on_a_saturating_task() {
        let mut config = toy_config();
        // Trivially separable: loss saturates almost immediately.
        config.dataset = DatasetConfig::Synthetic(SyntheticSpec {
            n_classes: 8,
            dim: 6,
            examples_per_class: 20,
            mean_scale: 50.0,
            noise_sigma: 0.01,
        });
        config.validation = Some(config.dataset.clone());
        config.max_episodes = 1000;
        config.early_stopping = Some(EarlyStopping {
            patience: 2,
            check_every: 25,
            validation_episodes: 8,
        });
        let outcome = train(&config).unwrap();
        assert!(
            outcome.episodes_run < 1000,
            "never stopped early: ran {}",
            outcome.episodes_run
        );
    }

    #[test]
    fn perfect_separation_gives_unit_accuracy_and_zero_ci() {
        let spec = SyntheticSpec {
            n_classes: 6,
            dim: 4,
            examples_per_class: 20,
            mean_scale: 100.0,
            noise_sigma: 0.01,
        };
        let task = gen_gaussian_dataset(&spec, &mut Rng::new(5)).unwrap();
        let net = EmbeddingNet::from_preset("mlp:4", &[4], &mut Rng::new(0)).unwrap();
        let espec = EpisodeSpec::new(5, 3, 4).unwrap();
        let out = evaluate(
            &net,
            &task.dataset,
            &espec,
            50,
            &DistanceFn::SqEuclidean,
            HeadKind::Protonet,
            &mut Rng::new(77),
        )
        .unwrap();
        assert_eq!(out.acc_mean, 1.0);
        assert_eq!(out.ci95, 0.0);
    }

    #[test]
    fn identical_means_score_at_chance_level() {
        let spec = SyntheticSpec {
            n_classes: 10,
            dim: 6,
            examples_per_class: 30,
            mean_scale: 0.0, // every class draws from the same Gaussian
            noise_sigma: 1.0,
        };
        let task = gen_gaussian_dataset(&spec, &mut Rng::new(7)).unwrap();
        let net = EmbeddingNet::from_preset("mlp:6", &[6], &mut Rng::new(0)).unwrap();
        let espec = EpisodeSpec::new(5, 3, 4).unwrap();
        let out = evaluate(
            &net,
            &task.dataset,
            &espec,
            400,
            &DistanceFn::SqEuclidean,
            HeadKind::Protonet,
            &mut Rng::new(79),
        )
        .unwrap();
        let chance = 1.0 / 5.0;
        assert!(
            (out.acc_mean - chance).abs() <= 4.0 * out.ci95,
            "accuracy {:.4} not within 4 CI ({:.4}) of chance {chance}",
            out.acc_mean,
            out.ci95
        );
    }

    #[test]
    fn ci_matches_independent_recomputation() {
        let config = toy_config();
        let mut streams = seed_streams(config.seed);
        let data = prepare_data(&config.dataset, HeadKind::Protonet, &mut streams.data).unwrap();
        let TrainData::Labeled { data, .. } = &data else {
            unreachable!()
        };
        let net = EmbeddingNet::from_preset("mlp:6-12", &[6], &mut streams.init).unwrap();
        let espec = EpisodeSpec::new(3, 2, 3).unwrap();
        let out = evaluate(
            &net,
            data,
            &espec,
            100,
            &DistanceFn::SqEuclidean,
            HeadKind::Protonet,
            &mut streams.eval,
        )
        .unwrap();
        let n = out.per_episode.len() as f64;
        let mean = out.per_episode.iter().sum::<f64>() / n;
        let s = (out
            .per_episode
            .iter()
            .map(|a| (a - mean) * (a - mean))
            .sum::<f64>()
            / (n - 1.0))
            .sqrt();
        let ci = 1.96 * s / n.sqrt();
        assert!((out.ci95 - ci).abs() < 1e-12);
        assert!((out.acc_mean - mean).abs() < 1e-12);
        assert!(out.acc_mean >= 0.0 && out.acc_mean <= 1.0);
    }

    #[test]
    fn evaluation_never_mutates_the_model() {
        let config = toy_config();
        let outcome = train(&config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let before_path = dir.path().join("before.pnck");
        save_model(&before_path, &outcome).unwrap();
        let before = std::fs::read(&before_path).unwrap();

        let mut streams = seed_streams(config.seed);
        let data = prepare_data(&config.dataset, HeadKind::Protonet, &mut streams.data).unwrap();
        let TrainData::Labeled { data, .. } = &data else {
            unreachable!()
        };
        let espec = EpisodeSpec::new(3, 2, 3).unwrap();
        evaluate(
            &outcome.net,
            data,
            &espec,
            60,
            &DistanceFn::SqEuclidean,
            HeadKind::Protonet,
            &mut streams.eval,
        )
        .unwrap();
        let after_path = dir.path().join("after.pnck");
        save_model(&after_path, &outcome).unwrap();
        assert_eq!(before, std::fs::read(&after_path).unwrap());
    }

    #[test]
    fn parallel_evaluation_matches_serial_reduction() {
        let config = toy_config();
        let mut streams = seed_streams(config.seed);
        let data = prepare_data(&config.dataset, HeadKind::Protonet, &mut streams.data).unwrap();
        let TrainData::Labeled { data, .. } = &data else {
            unreachable!()
        };
        let net = EmbeddingNet::from_preset("mlp:6-12", &[6], &mut streams.init).unwrap();
        let espec = EpisodeSpec::new(3, 2, 3).unwrap();
        let seeds = episode_seeds(&mut streams.eval, 64);
        let d = DistanceFn::SqEuclidean;
        let par = evaluate_with_seeds(&net, data, &espec, &seeds, &d, HeadKind::Protonet).unwrap();
        // Serial reference: same seeds, same order, plain loop.
        let mut serial = Vec::new();
        for &s in &seeds {
            let mut rng = Rng::new(s);
            let ep = sample_episode(data, &espec, &mut rng).unwrap();
            serial.push(episode_accuracy(&net, &ep, &d, HeadKind::Protonet).unwrap());
        }
        assert_eq!(par.per_episode, serial);
    }

    #[test]
    fn matching_head_trains_and_evaluates() {
        let mut config = toy_config();
        config.head = "matching".into();
        config.max_episodes = 30;
        config.eval_episodes = 20;
        let row = run_cell(&config).unwrap();
        assert_eq!(row.head, "matching");
        assert!(row.acc_mean > 0.3, "matching head collapsed: {}", row.acc_mean);
    }

    #[test]
    fn zero_shot_head_trains_and_evaluates() {
        let config = ExperimentConfig {
            dataset: DatasetConfig::ZeroShotSynthetic(ZeroShotSpec {
                n_classes: 12,
                attr_dim: 5,
                feature_dim: 8,
                examples_per_class: 20,
                noise_sigma: 0.2,
            }),
            validation: None,
            embedding: "mlp:8-8".into(),
            meta_embedding: Some("cub-linear:5-8".into()),
            distance: "sq_euclidean".into(),
            head: "zero-shot".into(),
            train: ConfigEpisode {
                way: 5,
                shot: 0,
                query: 4,
            },
            eval: ConfigEpisode {
                way: 5,
                shot: 0,
                query: 4,
            },
            initial_lr: 1e-2,
            lr_halving_period: 2000,
            max_episodes: 150,
            eval_episodes: 40,
            seed: 321,
            weight_decay: 1e-5,
            early_stopping: None,
        };
        let row = run_cell(&config).unwrap();
        assert!(
            row.acc_mean > 1.0 / 5.0,
            "zero-shot head below chance: {}",
            row.acc_mean
        );

        // The checkpoint carries both networks.
        let outcome = train(&config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("zs.pnck");
        save_model(&path, &outcome).unwrap();
        let (net, meta) = load_model(&path, &config).unwrap();
        let meta = meta.expect("meta network restored");
        for (a, b) in net.params().iter().zip(outcome.net.params()) {
            assert_eq!(a.data(), b.data());
        }
        for (a, b) in meta.params().iter().zip(outcome.meta_net.unwrap().params()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn single_cell_grid_reduces_to_train_plus_evaluate() {
        let mut config = toy_config();
        config.max_episodes = 40;
        config.eval_episodes = 25;
        let grid = run_grid(&config, &GridAxes {
            heads: vec![],
            distances: vec![],
            train_ways: vec![],
            train_shots: vec![],
        })
        .unwrap();
        assert_eq!(grid.rows.len(), 1);
        assert!(grid.failures.is_empty());
        let direct = run_cell(&config).unwrap();
        assert_eq!(grid.rows[0], direct);
    }

    #[test]
    fn grid_covers_cells_and_survives_failures() {
        let mut config = toy_config();
        config.max_episodes = 25;
        config.eval_episodes = 15;
        let axes = GridAxes {
            heads: vec![],
            distances: vec!["sq_euclidean".into(), "cosine".into(), "nonsense".into()],
            train_ways: vec![],
            train_shots: vec![],
        };
        let grid = run_grid(&config, &axes).unwrap();
        assert_eq!(grid.rows.len(), 2, "two valid cells");
        assert_eq!(grid.failures.len(), 1, "bad distance recorded, not fatal");
        assert_eq!(grid.failures[0].distance, "nonsense");
        // Both valid rows share the fixed evaluation spec.
        for row in &grid.rows {
            assert_eq!(row.eval_way, config.eval.way);
            assert_eq!(row.eval_shot, config.eval.shot);
        }

        // Rerunning reproduces identical accuracy values.
        let again = run_grid(&config, &axes).unwrap();
        assert_eq!(grid.rows, again.rows);
    }

    #[test]
    fn csv_report_has_stable_schema() {
        let mut config = toy_config();
        config.max_episodes = 20;
        config.eval_episodes = 10;
        let row = run_cell(&config).unwrap();
        let csv = report_to_csv(&[row.clone()]);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), REPORT_HEADER);
        let cells: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(cells.len(), 10);
        assert_eq!(cells[0], "protonet");
        assert_eq!(cells[1], "sq_euclidean");
        let acc: f64 = cells[7].parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert_eq!(cells[9], "123");

        let log_csv = training_log_to_csv(&[LogRow {
            episode: 0,
            loss: 1.5,
            lr: 1e-3,
        }]);
        assert_eq!(log_csv, "episode,loss,lr\n0,1.500000,0.001\n");
    }

    #[test]
    fn checkpoint_roundtrips_through_save_and_load() {
        let config = toy_config();
        let outcome = train(&config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.pnck");
        save_model(&path, &outcome).unwrap();
        let (net, meta) = load_model(&path, &config).unwrap();
        assert!(meta.is_none());
        for (a, b) in net.params().iter().zip(outcome.net.params()) {
            assert_eq!(a.data(), b.data());
        }
    }
}
