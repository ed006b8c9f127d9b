//! Embedding networks and the classification heads built on them.

mod heads;

pub use heads::{
    classify_query, compute_prototypes, episode_loss, linear_head, matching_net_loss,
    matching_net_predict, mixture_posterior, zero_shot_episode_loss, zero_shot_prototypes,
    ClassPosterior, EpisodeLossPass, MixtureModel, PrototypeSet, ZeroShotLossPass,
};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
enum Layer {
    /// Affine map; `w` and `b` index into the parameter list.
    Dense { w: usize, b: usize },
    Relu,
    /// conv3x3 + batchnorm + relu + maxpool2x2. Running statistics live here
    /// (they are state, not optimizer parameters).
    ConvBlock {
        kernels: usize,
        gamma: usize,
        beta: usize,
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
    },
    Flatten,
}

/// Deferred batchnorm running-statistic update produced by a train-mode
/// forward pass; the training loop applies it after the step so that forward
/// itself stays pure.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    layer: usize,
    mean: Vec<f64>,
    var: Vec<f64>,
}

/// Everything a forward pass leaves behind: the output activation plus the
/// tape handles of the parameters (for gradient collection).
pub struct ForwardPass {
    pub output: Var,
    pub param_vars: Vec<Var>,
    pub bn_updates: Vec<BnUpdate>,
}

/// A feed-forward embedding built from one of the named presets.
#[derive(Debug, Clone)]
pub struct EmbeddingNet {
    preset: String,
    layers: Vec<Layer>,
    params: Vec<Tensor>,
    param_names: Vec<String>,
    input_shape: Vec<usize>,
    output_dim: usize,
}

fn pool_dim(d: usize) -> usize {
    (d / 2).max(1)
}

impl EmbeddingNet {
    /// Build a network from a preset name:
    ///
    /// - `"omniglot-conv"`: four conv blocks of 64 filters on (C,H,W) input.
    /// - `"mlp:<d0>-<d1>-...-<dn>"`: dense layers d0→d1→…→dn with relu
    ///   between them (none after the last); `"mlp:<d0>"` is the identity.
    /// - `"cub-linear:<in>-<out>"`: a single affine map.
    ///
    /// `input_shape` is the per-example shape and must match the preset.
    pub fn from_preset(preset: &str, input_shape: &[usize], rng: &mut Rng) -> Result<Self> {
        let mut net = EmbeddingNet {
            preset: preset.to_string(),
            layers: Vec::new(),
            params: Vec::new(),
            param_names: Vec::new(),
            input_shape: input_shape.to_vec(),
            output_dim: 0,
        };
        if preset == "omniglot-conv" {
            let &[c, h, w] = input_shape else {
                return Err(Error::Config(format!(
                    "omniglot-conv expects a (C,H,W) input shape, got {input_shape:?}"
                )));
            };
            let (mut ch, mut hh, mut ww) = (c, h, w);
            for i in 0..4 {
                net.push_conv_block(i, ch, 64, rng);
                ch = 64;
                hh = pool_dim(hh);
                ww = pool_dim(ww);
            }
            net.layers.push(Layer::Flatten);
            net.output_dim = ch * hh * ww;
        } else if let Some(dims) = preset.strip_prefix("mlp:") {
            let dims = parse_dims(dims)?;
            if input_shape != [dims[0]] {
                return Err(Error::Config(format!(
                    "mlp expects input shape [{}], got {input_shape:?}",
                    dims[0]
                )));
            }
            for (i, pair) in dims.windows(2).enumerate() {
                if i > 0 {
                    net.layers.push(Layer::Relu);
                }
                net.push_dense(i, pair[0], pair[1], rng);
            }
            net.output_dim = *dims.last().expect("nonempty dims");
        } else if let Some(dims) = preset.strip_prefix("cub-linear:") {
            let dims = parse_dims(dims)?;
            if dims.len() != 2 {
                return Err(Error::Config(format!(
                    "cub-linear wants exactly <in>-<out>, got '{preset}'"
                )));
            }
            if input_shape != [dims[0]] {
                return Err(Error::Config(format!(
                    "cub-linear expects input shape [{}], got {input_shape:?}",
                    dims[0]
                )));
            }
            net.push_dense(0, dims[0], dims[1], rng);
            net.output_dim = dims[1];
        } else {
            return Err(Error::Config(format!(
                "unknown embedding preset '{preset}' (expected omniglot-conv, \
                 mlp:<dims>, or cub-linear:<in>-<out>)"
            )));
        }
        Ok(net)
    }

    fn push_dense(&mut self, idx: usize, fan_in: usize, fan_out: usize, rng: &mut Rng) {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.uniform(-limit, limit))
            .collect();
        let wi = self.push_param(
            format!("layer{idx}.weight"),
            Tensor::from_vec(vec![fan_in, fan_out], w).expect("dense weight shape"),
        );
        let bi = self.push_param(format!("layer{idx}.bias"), Tensor::zeros(vec![fan_out]));
        self.layers.push(Layer::Dense { w: wi, b: bi });
    }

    fn push_conv_block(&mut self, idx: usize, c_in: usize, filters: usize, rng: &mut Rng) {
        let (fan_in, fan_out) = (c_in * 9, filters * 9);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let k: Vec<f64> = (0..filters * c_in * 9)
            .map(|_| rng.uniform(-limit, limit))
            .collect();
        let ki = self.push_param(
            format!("layer{idx}.kernels"),
            Tensor::from_vec(vec![filters, c_in, 3, 3], k).expect("kernel shape"),
        );
        let gi = self.push_param(
            format!("layer{idx}.gamma"),
            Tensor::from_vec(vec![filters], vec![1.0; filters]).expect("gamma shape"),
        );
        let bi = self.push_param(format!("layer{idx}.beta"), Tensor::zeros(vec![filters]));
        self.layers.push(Layer::ConvBlock {
            kernels: ki,
            gamma: gi,
            beta: bi,
            running_mean: vec![0.0; filters],
            running_var: vec![1.0; filters],
        });
    }

    fn push_param(&mut self, name: String, value: Tensor) -> usize {
        self.params.push(value);
        self.param_names.push(name);
        self.params.len() - 1
    }

    pub fn preset(&self) -> &str {
        &self.preset
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// Embedding dimension M.
    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    /// Run the network over a batch whose leading axis is the example index.
    /// Parameters are registered on the tape as gradient-requiring leaves
    /// when `requires_grad` is set. Pure: running statistics are returned as
    /// [`BnUpdate`]s, not applied.
    pub fn forward(
        &self,
        tape: &mut Tape,
        batch: &Tensor,
        mode: Mode,
        requires_grad: bool,
    ) -> Result<ForwardPass> {
        let bshape = batch.shape();
        if bshape.is_empty() || bshape[1..] != self.input_shape[..] {
            return Err(Error::shape(
                "forward",
                format!(
                    "batch {:?} does not match input shape {:?}",
                    bshape, self.input_shape
                ),
            ));
        }
        let b = bshape[0];
        let param_vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.clone(), requires_grad))
            .collect::<Result<_>>()?;
        let mut bn_updates = Vec::new();
        let mut x = tape.constant(batch.clone())?;
        for (li, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Dense { w, b } => {
                    let prod = tape.matmul(x, param_vars[*w])?;
                    x = tape.add_bias(prod, param_vars[*b])?;
                }
                Layer::Relu => x = tape.relu(x)?,
                Layer::Flatten => {
                    let numel: usize = tape.shape(x)[1..].iter().product();
                    x = tape.reshape(x, vec![b, numel])?;
                }
                Layer::ConvBlock {
                    kernels,
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    x = tape.conv2d(x, param_vars[*kernels])?;
                    let s = tape.shape(x).to_vec();
                    let bchw = [s[0], s[1], s[2], s[3]];
                    let cols = tape.channels_to_cols(x)?;
                    let normed = match mode {
                        Mode::Train => {
                            let (y, mean, var) = tape.batchnorm_train(
                                cols,
                                param_vars[*gamma],
                                param_vars[*beta],
                                BN_EPS,
                            )?;
                            bn_updates.push(BnUpdate {
                                layer: li,
                                mean,
                                var,
                            });
                            y
                        }
                        Mode::Eval => tape.batchnorm_eval(
                            cols,
                            param_vars[*gamma],
                            param_vars[*beta],
                            running_mean,
                            running_var,
                            BN_EPS,
                        )?,
                    };
                    x = tape.cols_to_channels(normed, bchw)?;
                    x = tape.relu(x)?;
                    x = tape.maxpool2d(x)?;
                }
            }
        }
        debug_assert_eq!(tape.shape(x), &[b, self.output_dim]);
        Ok(ForwardPass {
            output: x,
            param_vars,
            bn_updates,
        })
    }

    /// Fold train-mode batch statistics into the running estimates:
    /// running ← (1 − momentum)·running + momentum·batch.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            let Layer::ConvBlock {
                running_mean,
                running_var,
                ..
            } = &mut self.layers[u.layer]
            else {
                continue;
            };
            for (r, &b) in running_mean.iter_mut().zip(&u.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            for (r, &b) in running_var.iter_mut().zip(&u.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }

    /// Forward-only evaluation embedding: (B, input...) → (B, M) values.
    pub fn embed(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let fp = self.forward(&mut tape, batch, Mode::Eval, false)?;
        Ok(tape.value(fp.output).clone())
    }

    /// Embed a single example into a length-M vector.
    pub fn embed_one(&self, example: &Tensor) -> Result<Vec<f64>> {
        let mut shape = vec![1];
        shape.extend_from_slice(example.shape());
        let batch = example.reshape(shape)?;
        Ok(self.embed(&batch)?.data().to_vec())
    }

    /// Named tensors for checkpointing: parameters plus running statistics.
    pub fn checkpoint_entries(&self) -> Vec<(String, Tensor)> {
        let mut entries: Vec<(String, Tensor)> = self
            .param_names
            .iter()
            .cloned()
            .zip(self.params.iter().cloned())
            .collect();
        for (li, layer) in self.layers.iter().enumerate() {
            if let Layer::ConvBlock {
                running_mean,
                running_var,
                ..
            } = layer
            {
                entries.push((
                    format!("layer{li}.running_mean"),
                    Tensor::vector(running_mean),
                ));
                entries.push((
                    format!("layer{li}.running_var"),
                    Tensor::vector(running_var),
                ));
            }
        }
        entries
    }

    /// Restore parameters and running statistics by name. Every entry the
    /// network owns must be present with a matching shape.
    pub fn load_checkpoint_entries(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        let lookup: std::collections::BTreeMap<&str, &Tensor> = entries
            .iter()
            .map(|(n, t)| (n.as_str(), t))
            .collect();
        let find = |name: &str| -> Result<&Tensor> {
            lookup.get(name).copied().ok_or_else(|| Error::Load {
                entry: name.to_string(),
                detail: "missing from checkpoint".into(),
            })
        };
        let mut new_params = self.params.clone();
        for (i, name) in self.param_names.iter().enumerate() {
            let t = find(name)?;
            if t.shape() != self.params[i].shape() {
                return Err(Error::Load {
                    entry: name.clone(),
                    detail: format!(
                        "shape {:?} does not match expected {:?}",
                        t.shape(),
                        self.params[i].shape()
                    ),
                });
            }
            new_params[i] = t.clone();
        }
        let mut new_stats = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            if let Layer::ConvBlock { running_mean, .. } = layer {
                let m = find(&format!("layer{li}.running_mean"))?;
                let v = find(&format!("layer{li}.running_var"))?;
                if m.numel() != running_mean.len() || v.numel() != running_mean.len() {
                    return Err(Error::Load {
                        entry: format!("layer{li}.running_mean"),
                        detail: "running statistic length mismatch".into(),
                    });
                }
                new_stats.push((li, m.data().to_vec(), v.data().to_vec()));
            }
        }
        self.params = new_params;
        for (li, m, v) in new_stats {
            if let Layer::ConvBlock {
                running_mean,
                running_var,
                ..
            } = &mut self.layers[li]
            {
                *running_mean = m;
                *running_var = v;
            }
        }
        Ok(())
    }
}

fn parse_dims(s: &str) -> Result<Vec<usize>> {
    let dims: Vec<usize> = s
        .split('-')
        .map(|p| {
            p.parse::<usize>()
                .ok()
                .filter(|&d| d > 0)
                .ok_or_else(|| Error::Config(format!("bad dimension '{p}' in preset")))
        })
        .collect::<Result<_>>()?;
    if dims.is_empty() {
        return Err(Error::Config("empty dimension list in preset".into()));
    }
    Ok(dims)
}
