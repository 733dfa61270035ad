//! Neural and behavioral encoders, projection heads and baseline heads,
//! expressed as graph builders over named parameters.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorMap};

pub const VALID_EXTENTS: [usize; 5] = [8, 16, 32, 64, 128];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Frame weights `a_i = -log softmax(r)_i`.
    Literal,
    /// Frame weights `a_i = softmax(r)_i`.
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub attention_dim: usize,
    pub attention: AttentionMode,
    /// Channels of the per-frame conv/pool pairs for a 128-pixel image;
    /// smaller images use a prefix of this list.
    pub spatial_channels: Vec<usize>,
    pub frame_dim: usize,
    /// Channels of the 1-D stacks shared by both encoders.
    pub temporal_channels: Vec<usize>,
    /// Number of 1-D convolutions before the temporal max-pool.
    pub pool_after: usize,
    pub hidden_dim: usize,
    pub bn_eps: f64,
    /// Weight of the old running statistic in each update.
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            attention_dim: 12,
            attention: AttentionMode::Literal,
            spatial_channels: vec![2, 4, 8, 16, 32, 64],
            frame_dim: 128,
            temporal_channels: vec![64, 80, 96, 112, 128],
            pool_after: 2,
            hidden_dim: 128,
            bn_eps: 1e-5,
            bn_momentum: 0.9,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: usize| {
            if v == 0 {
                Err(Error::config(format!("model.{field}"), "must be >= 1"))
            } else {
                Ok(())
            }
        };
        positive("embed_dim", self.embed_dim)?;
        positive("attention_dim", self.attention_dim)?;
        positive("frame_dim", self.frame_dim)?;
        positive("hidden_dim", self.hidden_dim)?;
        if self.spatial_channels.len() < 6 || self.spatial_channels.iter().any(|&c| c == 0) {
            return Err(Error::config(
                "model.spatial_channels",
                "need six positive entries",
            ));
        }
        if self.temporal_channels.is_empty() || self.temporal_channels.iter().any(|&c| c == 0) {
            return Err(Error::config(
                "model.temporal_channels",
                "need positive entries",
            ));
        }
        if self.pool_after > self.temporal_channels.len() {
            return Err(Error::config(
                "model.pool_after",
                "exceeds the number of temporal layers",
            ));
        }
        if !(self.bn_eps > 0.0) || !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::config(
                "model.bn",
                "need eps > 0 and momentum in [0, 1)",
            ));
        }
        Ok(())
    }
}

/// Input geometry the model is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub pose_dim: usize,
    pub image_extent: usize,
    pub neural_len: usize,
    pub behavior_len: usize,
}

/// Number of conv/pool pairs that bring `extent` down to 2×2.
pub fn spatial_depth(extent: usize) -> Result<usize> {
    if !VALID_EXTENTS.contains(&extent) {
        return Err(Error::invalid(format!(
            "image extent {extent} is not supported by the neural encoder; valid extents are {VALID_EXTENTS:?}"
        )));
    }
    Ok(extent.trailing_zeros() as usize - 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`.
    Kaiming {
        fan_in: usize,
    },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub shape: Vec<usize>,
    pub init: Init,
    /// Whether weight decay applies.
    pub decay: bool,
}

/// Optional heads on top of the encoders.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Three-layer MLP classifier on `h_n`.
    Classifier { classes: usize },
    /// Convolutional pose decoder on `h_n`.
    Regression,
    /// One two-layer MLP per modality predicting the animal.
    Discriminators { animals: usize },
}

/// Trainable parameters plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<S = f64> {
    pub params: TensorMap<S>,
    pub running: TensorMap<S>,
    pub specs: BTreeMap<String, ParamSpec>,
}

impl<S: Scalar> ModelParams<S> {
    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }
}

/// Appends encoder and head sub-graphs to a graph while recording the
/// parameters they need.
pub struct ModelBuilder<S = f64> {
    pub graph: Graph<S>,
    pub config: ModelConfig,
    pub shape: InputShape,
    specs: BTreeMap<String, ParamSpec>,
    running: BTreeMap<String, usize>,
}

impl<S: Scalar> ModelBuilder<S> {
    pub fn new(config: &ModelConfig, shape: InputShape) -> Result<Self> {
        config.validate()?;
        if shape.pose_dim == 0 || shape.behavior_len < 2 || shape.neural_len < 2 {
            return Err(Error::invalid(format!("unusable input shape {shape:?}")));
        }
        spatial_depth(shape.image_extent)?;
        Ok(Self {
            graph: Graph::new(),
            config: config.clone(),
            shape,
            specs: BTreeMap::new(),
            running: BTreeMap::new(),
        })
    }

    pub fn specs(&self) -> &BTreeMap<String, ParamSpec> {
        &self.specs
    }

    /// Running-statistic keys and channel counts.
    pub fn running_keys(&self) -> &BTreeMap<String, usize> {
        &self.running
    }

    fn param(&mut self, name: &str, shape: &[usize], init: Init, decay: bool) -> Result<NodeId> {
        self.specs.insert(
            name.to_string(),
            ParamSpec {
                shape: shape.to_vec(),
                init,
                decay,
            },
        );
        self.graph.param(name, shape)
    }

    fn batch_norm(&mut self, prefix: &str, x: NodeId) -> Result<NodeId> {
        let c = self.graph.shape(x)[1];
        let gamma = self.param(&format!("{prefix}.bn.gamma"), &[c], Init::Ones, false)?;
        let beta = self.param(&format!("{prefix}.bn.beta"), &[c], Init::Zeros, false)?;
        let (m, v) = (
            format!("{prefix}.bn.running_mean"),
            format!("{prefix}.bn.running_var"),
        );
        self.running.insert(m.clone(), c);
        self.running.insert(v.clone(), c);
        let eps = S::from_f64_lossy(self.config.bn_eps);
        let y = self.graph.batch_norm(x, gamma, beta, eps, &m, &v)?;
        Ok(self.graph.label(y, format!("{prefix}.bn")))
    }

    fn bn_relu(&mut self, prefix: &str, x: NodeId) -> Result<NodeId> {
        let y = self.batch_norm(prefix, x)?;
        let r = self.graph.relu(y);
        Ok(self.graph.label(r, format!("{prefix}.relu")))
    }

    /// `x @ W (+ b)` for `x: [N, in]`.
    fn dense(&mut self, prefix: &str, x: NodeId, out: usize, bias: bool) -> Result<NodeId> {
        let fan_in = *self.graph.shape(x).last().expect("dense input has rank 2");
        let w = self.param(
            &format!("{prefix}.weight"),
            &[fan_in, out],
            Init::Kaiming { fan_in },
            true,
        )?;
        let b = if bias {
            Some(self.param(&format!("{prefix}.bias"), &[out], Init::Zeros, false)?)
        } else {
            None
        };
        let y = self.graph.linear(x, w, b)?;
        Ok(self.graph.label(y, prefix))
    }

    fn conv1d(&mut self, prefix: &str, x: NodeId, out: usize) -> Result<NodeId> {
        let cin = self.graph.shape(x)[1];
        let fan_in = cin * 3;
        let w = self.param(
            &format!("{prefix}.weight"),
            &[out, cin, 3],
            Init::Kaiming { fan_in },
            true,
        )?;
        let y = self.graph.conv1d(x, w, 1)?;
        Ok(self.graph.label(y, prefix))
    }

    fn conv2d(&mut self, prefix: &str, x: NodeId, out: usize) -> Result<NodeId> {
        let cin = self.graph.shape(x)[1];
        let fan_in = cin * 9;
        let w = self.param(
            &format!("{prefix}.weight"),
            &[out, cin, 3, 3],
            Init::Kaiming { fan_in },
            true,
        )?;
        let y = self.graph.conv2d(x, w, 1, 1)?;
        Ok(self.graph.label(y, prefix))
    }

    /// 1-D conv stack over `[B, C, T]` with one max-pool, each conv followed
    /// by batch norm and relu. Returns `[B, C_last, T/2]`.
    fn temporal_stack(&mut self, prefix: &str, mut x: NodeId) -> Result<NodeId> {
        let channels = self.config.temporal_channels.clone();
        for (i, &c) in channels.iter().enumerate() {
            if i == self.config.pool_after {
                x = self.graph.max_pool1d(x, 2)?;
            }
            let name = format!("{prefix}.conv{}", i + 1);
            x = self.conv1d(&name, x, c)?;
            x = self.bn_relu(&name, x)?;
        }
        if self.config.pool_after == channels.len() {
            x = self.graph.max_pool1d(x, 2)?;
        }
        Ok(x)
    }

    /// Attention pooling of `S: [B, C, T']` to `[B, C]` with
    /// `r = W2 tanh(W1 Sᵀ)`.
    pub fn attention_pool(&mut self, prefix: &str, s: NodeId) -> Result<NodeId> {
        let shape = self.graph.shape(s).to_vec();
        if shape.len() != 3 || shape[2] == 0 {
            return Err(Error::shape(
                prefix,
                format!("attention needs [B, C, T'] with T' >= 1, got {shape:?}"),
            ));
        }
        let (b, c, t) = (shape[0], shape[1], shape[2]);
        let k = self.config.attention_dim;
        let w1 = self.param(
            &format!("{prefix}.w1"),
            &[k, c],
            Init::Kaiming { fan_in: c },
            true,
        )?;
        let w2 = self.param(
            &format!("{prefix}.w2"),
            &[1, k],
            Init::Kaiming { fan_in: k },
            true,
        )?;
        let st = self.graph.permute(s, &[0, 2, 1])?;
        let rows = self.graph.reshape(st, &[b * t, c])?;
        let w1t = self.graph.transpose(w1)?;
        let hidden = self.graph.matmul(rows, w1t)?;
        let hidden = self.graph.tanh(hidden);
        let w2t = self.graph.transpose(w2)?;
        let r = self.graph.matmul(hidden, w2t)?;
        let r = self.graph.reshape(r, &[b, t])?;
        let r = self.graph.label(r, format!("{prefix}.scores"));
        let p = self.graph.softmax(r, 1)?;
        let a = match self.config.attention {
            AttentionMode::Literal => {
                let l = self.graph.log(p);
                self.graph.neg(l)
            }
            AttentionMode::Softmax => p,
        };
        let a = self.graph.label(a, format!("{prefix}.weights"));
        let a = self.graph.reshape(a, &[b, t, 1])?;
        let weighted = self.graph.mul(st, a)?;
        let pooled = self.graph.sum(weighted, Some(1), false)?;
        Ok(self.graph.label(pooled, format!("{prefix}.pooled")))
    }

    /// `f_n`: `[B, T, E, E]` ΔF/F windows to `h_n: [B, embed_dim]`.
    pub fn neural_encoder(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.graph.shape(x).to_vec();
        let e = self.shape.image_extent;
        if s.len() != 4 || s[2] != s[3] {
            return Err(Error::shape(
                "fn.input",
                format!("expected [B, T, E, E], got {s:?}"),
            ));
        }
        if s[2] != e {
            return Err(Error::shape(
                "fn.input",
                format!("extent {} but the model expects {e}", s[2]),
            ));
        }
        let depth = spatial_depth(s[2])?;
        let (b, t) = (s[0], s[1]);
        let mut h = self.graph.reshape(x, &[b * t, 1, e, e])?;
        let channels = self.config.spatial_channels[..depth].to_vec();
        for (i, &c) in channels.iter().enumerate() {
            let name = format!("fn.spatial{}", i + 1);
            h = self.conv2d(&name, h, c)?;
            h = self.bn_relu(&name, h)?;
            h = self.graph.max_pool2d(h, 2)?;
        }
        let flat = channels[depth - 1] * 4;
        h = self.graph.reshape(h, &[b * t, flat])?;
        let fd = self.config.frame_dim;
        h = self.dense("fn.fc13", h, fd, false)?;
        h = self.bn_relu("fn.fc13", h)?;
        h = self.dense("fn.fc14", h, fd, false)?;
        h = self.bn_relu("fn.fc14", h)?;
        let seq = self.graph.reshape(h, &[b, t, fd])?;
        let seq = self.graph.permute(seq, &[0, 2, 1])?;
        let feat = self.temporal_stack("fn.temporal", seq)?;
        let pooled = self.attention_pool("fn.attention", feat)?;
        let out = self.dense("fn.fc", pooled, self.config.embed_dim, true)?;
        Ok(self.graph.label(out, "h_n"))
    }

    /// `f_b`: `[B, T, pose_dim]` windows to `h_b: [B, embed_dim]`.
    pub fn behavior_encoder(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.graph.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.shape.pose_dim {
            return Err(Error::shape(
                "fb.input",
                format!("expected [B, T, {}], got {s:?}", self.shape.pose_dim),
            ));
        }
        let seq = self.graph.permute(x, &[0, 2, 1])?;
        let feat = self.temporal_stack("fb", seq)?;
        let pooled = self.attention_pool("fb.attention", feat)?;
        let out = self.dense("fb.fc7", pooled, self.config.embed_dim, true)?;
        Ok(self.graph.label(out, "h_b"))
    }

    /// Two-layer relu MLP followed by L2 normalization of each row.
    pub fn projection_head(&mut self, prefix: &str, h: NodeId) -> Result<NodeId> {
        let d = self.config.embed_dim;
        let x = self.dense(&format!("{prefix}.fc1"), h, d, true)?;
        let x = self.graph.relu(x);
        let x = self.dense(&format!("{prefix}.fc2"), x, d, true)?;
        let z = self.graph.l2_normalize(x, 1)?;
        Ok(self.graph.label(z, format!("{prefix}.z")))
    }

    /// Three-layer MLP without normalization layers.
    pub fn classifier(&mut self, prefix: &str, h: NodeId, classes: usize) -> Result<NodeId> {
        let hd = self.config.hidden_dim;
        let x = self.dense(&format!("{prefix}.fc1"), h, hd, true)?;
        let x = self.graph.relu(x);
        let x = self.dense(&format!("{prefix}.fc2"), x, hd, true)?;
        let x = self.graph.relu(x);
        self.dense(&format!("{prefix}.fc3"), x, classes, true)
    }

    /// Two-layer MLP domain discriminator.
    pub fn discriminator(&mut self, prefix: &str, h: NodeId, animals: usize) -> Result<NodeId> {
        let hd = self.config.hidden_dim;
        let x = self.dense(&format!("{prefix}.fc1"), h, hd, true)?;
        let x = self.graph.relu(x);
        self.dense(&format!("{prefix}.fc2"), x, animals, true)
    }

    /// Fully convolutional decoder `h_n -> [B, behavior_len, pose_dim]`.
    pub fn regression_decoder(&mut self, h: NodeId) -> Result<NodeId> {
        let b = self.graph.shape(h)[0];
        let (t, d) = (self.shape.behavior_len, self.shape.pose_dim);
        let c = self.config.temporal_channels[0];
        let x = self.dense("dec.fc", h, c * t, true)?;
        let x = self.graph.reshape(x, &[b, c, t])?;
        let x = self.graph.relu(x);
        let x = self.conv1d("dec.conv", x, d)?;
        let bias = self.param("dec.conv.bias", &[1, d, 1], Init::Zeros, false)?;
        let x = self.graph.add(x, bias)?;
        let y = self.graph.permute(x, &[0, 2, 1])?;
        Ok(self.graph.label(y, "decoded"))
    }

    /// Heads listed in `heads`, attached to placeholder representations.
    fn attach_heads(&mut self, h_n: NodeId, h_b: NodeId, heads: &[Head]) -> Result<()> {
        for head in heads {
            match *head {
                Head::Classifier { classes } => {
                    self.classifier("cls", h_n, classes)?;
                }
                Head::Regression => {
                    self.regression_decoder(h_n)?;
                }
                Head::Discriminators { animals } => {
                    self.discriminator("disc_n", h_n, animals)?;
                    self.discriminator("disc_b", h_b, animals)?;
                }
            }
        }
        Ok(())
    }
}

fn init_tensor<S: Scalar>(name: &str, spec: &ParamSpec, seed: u64) -> Tensor<S> {
    match spec.init {
        Init::Zeros => Tensor::zeros(&spec.shape),
        Init::Ones => Tensor::ones(&spec.shape),
        Init::Kaiming { fan_in } => {
            let bound = (6.0 / fan_in as f64).sqrt();
            let mut r = rng::stream(seed, &format!("init/{name}"), 0);
            let n = spec.shape.iter().product();
            let data = (0..n)
                .map(|_| S::from_f64_lossy(r.gen_range(-bound..bound)))
                .collect();
            Tensor::new(&spec.shape, data).expect("spec shape matches its data")
        }
    }
}

/// Parameters of both encoders, both projection heads and `heads`.
pub fn init_params<S: Scalar>(
    config: &ModelConfig,
    shape: InputShape,
    heads: &[Head],
    seed: u64,
) -> Result<ModelParams<S>> {
    let mut mb = ModelBuilder::<S>::new(config, shape)?;
    let e = shape.image_extent;
    let xn = mb.graph.input("neural", &[2, shape.neural_len, e, e])?;
    let xb = mb
        .graph
        .input("behavior", &[2, shape.behavior_len, shape.pose_dim])?;
    let h_n = mb.neural_encoder(xn)?;
    let h_b = mb.behavior_encoder(xb)?;
    mb.projection_head("gn", h_n)?;
    mb.projection_head("gb", h_b)?;
    mb.attach_heads(h_n, h_b, heads)?;
    let params = mb
        .specs
        .iter()
        .map(|(n, s)| (n.clone(), init_tensor(n, s, seed)))
        .collect();
    let running = mb
        .running
        .iter()
        .map(|(k, &c)| {
            let t = if k.ends_with("running_var") {
                Tensor::ones(&[c])
            } else {
                Tensor::zeros(&[c])
            };
            (k.clone(), t)
        })
        .collect();
    Ok(ModelParams {
        params,
        running,
        specs: mb.specs,
    })
}

#[cfg(test)]
mod tests;
