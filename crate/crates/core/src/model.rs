//! The disentangling network: a shared encoder feeding a global head and a
//! local head, with every parameter carrying a partition tag that decides
//! whether the federation aggregates it or the client keeps it private.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ndtensor::{Graph, Mode, Tensor, TensorError, Var};
use crate::scalar::Scalar;
use crate::specfun::RngStream;

/// Epsilon in the encoder-output RMS normalization.
pub const FEATURE_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("parameter {name}: {reason}")]
    ParamMismatch { name: String, reason: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Federation partition of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PartitionTag {
    SharedEncoder,
    SharedGlobalHead,
    LocalHead,
    LocalBn,
}

impl PartitionTag {
    pub const ALL: [PartitionTag; 4] = [
        PartitionTag::SharedEncoder,
        PartitionTag::SharedGlobalHead,
        PartitionTag::LocalHead,
        PartitionTag::LocalBn,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PartitionTag::SharedEncoder => "SharedEncoder",
            PartitionTag::SharedGlobalHead => "SharedGlobalHead",
            PartitionTag::LocalHead => "LocalHead",
            PartitionTag::LocalBn => "LocalBN",
        }
    }

    pub fn parse(s: &str) -> Option<PartitionTag> {
        match s {
            "SharedEncoder" => Some(PartitionTag::SharedEncoder),
            "SharedGlobalHead" => Some(PartitionTag::SharedGlobalHead),
            "LocalHead" => Some(PartitionTag::LocalHead),
            "LocalBN" => Some(PartitionTag::LocalBn),
            _ => None,
        }
    }
}

impl std::fmt::Display for PartitionTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A named, tagged tensor. Batch-normalization running statistics are kept
/// here too (with `trainable = false`) so they checkpoint and aggregate
/// like any other state.
#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub tag: PartitionTag,
    pub trainable: bool,
    pub value: Tensor<T>,
}

/// Ordered, name-addressable parameter collection.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<T: Scalar> {
    pub params: Vec<Param<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Copy of the parameters carrying any of the given tags, order-stable.
    pub fn view(&self, tags: &[PartitionTag]) -> ParamSet<T> {
        ParamSet {
            params: self
                .params
                .iter()
                .filter(|p| tags.contains(&p.tag))
                .cloned()
                .collect(),
        }
    }

    /// Overwrite parameters by name from `other`. Every entry of `other`
    /// must exist here with matching shape and tag.
    pub fn load(&mut self, other: &ParamSet<T>) -> Result<(), ModelError> {
        for incoming in &other.params {
            let idx = self
                .index_of(&incoming.name)
                .ok_or_else(|| ModelError::UnknownParam(incoming.name.clone()))?;
            let p = &mut self.params[idx];
            if p.value.shape != incoming.value.shape {
                return Err(ModelError::ParamMismatch {
                    name: incoming.name.clone(),
                    reason: format!(
                        "shape {:?} incoming vs {:?} present",
                        incoming.value.shape, p.value.shape
                    ),
                });
            }
            if p.tag != incoming.tag {
                return Err(ModelError::ParamMismatch {
                    name: incoming.name.clone(),
                    reason: format!("tag {} incoming vs {} present", incoming.tag, p.tag),
                });
            }
            p.value = incoming.value.clone();
        }
        Ok(())
    }

    /// Bitwise equality of values (names and order included).
    pub fn bitwise_eq(&self, other: &ParamSet<T>) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.tag == b.tag
                    && a.value.shape == b.value.shape
                    && a.value
                        .data
                        .iter()
                        .zip(&b.value.data)
                        .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }
}

/// One encoder block: a 3x3 stride-1 pad-1 convolution (followed by BN,
/// ReLU and 2x2 max pooling) or a fully connected block (followed by ReLU,
/// plus BN in MLP-only encoders).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderBlock {
    Conv(usize),
    Dense(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// [C, H, W] for convolutional encoders, [D] for MLP encoders.
    pub input_shape: Vec<usize>,
    pub encoder: Vec<EncoderBlock>,
    pub head_width: usize,
    pub num_classes: usize,
    pub use_batchnorm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_shape: vec![1, 12, 12],
            encoder: vec![
                EncoderBlock::Conv(8),
                EncoderBlock::Conv(16),
                EncoderBlock::Dense(64),
            ],
            head_width: 64,
            num_classes: 5,
            use_batchnorm: true,
        }
    }
}

enum PlannedLayer {
    Conv {
        name: String,
        in_c: usize,
        out_c: usize,
        bn: bool,
    },
    DenseEnc {
        name: String,
        in_dim: usize,
        out_dim: usize,
        bn: bool,
    },
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_classes < 2 {
            return Err(ModelError::InvalidConfig(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.head_width == 0 {
            return Err(ModelError::InvalidConfig("head_width must be > 0".into()));
        }
        if self.encoder.is_empty() {
            return Err(ModelError::InvalidConfig("encoder must be non-empty".into()));
        }
        self.plan().map(|_| ())
    }

    fn has_conv(&self) -> bool {
        self.encoder
            .iter()
            .any(|b| matches!(b, EncoderBlock::Conv(_)))
    }

    fn plan(&self) -> Result<(Vec<PlannedLayer>, usize), ModelError> {
        let mlp_only = !self.has_conv();
        let mut layers = Vec::new();
        let mut conv_shape: Option<(usize, usize, usize)> = match self.input_shape.as_slice() {
            [c, h, w] => Some((*c, *h, *w)),
            [_] => None,
            other => {
                return Err(ModelError::InvalidConfig(format!(
                    "input_shape must be [C,H,W] or [D], got {other:?}"
                )))
            }
        };
        let mut flat_dim = match self.input_shape.as_slice() {
            [d] => *d,
            _ => 0,
        };
        let mut conv_i = 0usize;
        let mut fc_i = 0usize;
        for block in &self.encoder {
            match block {
                EncoderBlock::Conv(out_c) => {
                    let (c, h, w) = conv_shape.ok_or_else(|| {
                        ModelError::InvalidConfig(
                            "conv block requires spatial input (or follows a dense block)".into(),
                        )
                    })?;
                    if *out_c == 0 {
                        return Err(ModelError::InvalidConfig("conv width must be > 0".into()));
                    }
                    if h < 2 || w < 2 {
                        return Err(ModelError::InvalidConfig(format!(
                            "spatial extent too small for conv+pool: {h}x{w}"
                        )));
                    }
                    conv_i += 1;
                    layers.push(PlannedLayer::Conv {
                        name: format!("encoder.conv{conv_i}"),
                        in_c: c,
                        out_c: *out_c,
                        bn: self.use_batchnorm,
                    });
                    conv_shape = Some((*out_c, h / 2, w / 2));
                }
                EncoderBlock::Dense(width) => {
                    if *width == 0 {
                        return Err(ModelError::InvalidConfig("dense width must be > 0".into()));
                    }
                    let in_dim = match conv_shape.take() {
                        Some((c, h, w)) => c * h * w,
                        None => flat_dim,
                    };
                    fc_i += 1;
                    layers.push(PlannedLayer::DenseEnc {
                        name: format!("encoder.fc{fc_i}"),
                        in_dim,
                        out_dim: *width,
                        bn: self.use_batchnorm && mlp_only,
                    });
                    flat_dim = *width;
                }
            }
        }
        let feat_dim = match conv_shape {
            Some((c, h, w)) => c * h * w,
            None => flat_dim,
        };
        if feat_dim == 0 {
            return Err(ModelError::InvalidConfig(
                "encoder produces empty features".into(),
            ));
        }
        Ok((layers, feat_dim))
    }

    /// Width of the encoder output.
    pub fn feat_dim(&self) -> Result<usize, ModelError> {
        self.plan().map(|(_, d)| d)
    }
}

/// Which head to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Global,
    Local,
}

/// Parameter leaves registered on a tape for one forward pass.
pub struct Bound {
    vars: Vec<Option<Var>>,
}

impl Bound {
    fn var(&self, idx: usize) -> Var {
        self.vars[idx].expect("parameter not bound")
    }
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
}

fn init_weight<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut RngStream) -> Tensor<T> {
    // scaled-uniform fan-in init: U(-a, a) with a = sqrt(3 / fan_in), so the
    // sample variance is ~ 1 / fan_in
    let a = (3.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.uniform_range(-a, a)))
        .collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

impl<T: Scalar> Model<T> {
    /// Initialize a model deterministically from a stream: weights are
    /// scaled-uniform fan-in draws, biases zero, BN gamma 1 / beta 0 with
    /// unit running variance.
    pub fn init(config: ModelConfig, rng: &mut RngStream) -> Result<Model<T>, ModelError> {
        config.validate()?;
        let (layers, feat_dim) = config.plan()?;
        let mut params: Vec<Param<T>> = Vec::new();

        let mut push = |name: String, tag: PartitionTag, trainable: bool, value: Tensor<T>| {
            params.push(Param {
                name,
                tag,
                trainable,
                value,
            });
        };

        let push_bn = |push: &mut dyn FnMut(String, PartitionTag, bool, Tensor<T>),
                           name: &str,
                           features: usize| {
            push(
                format!("{name}.bn.gamma"),
                PartitionTag::LocalBn,
                true,
                Tensor::filled(&[features], T::one()),
            );
            push(
                format!("{name}.bn.beta"),
                PartitionTag::LocalBn,
                true,
                Tensor::zeros(&[features]),
            );
            push(
                format!("{name}.bn.running_mean"),
                PartitionTag::LocalBn,
                false,
                Tensor::zeros(&[features]),
            );
            push(
                format!("{name}.bn.running_var"),
                PartitionTag::LocalBn,
                false,
                Tensor::filled(&[features], T::one()),
            );
        };

        for layer in &layers {
            match layer {
                PlannedLayer::Conv {
                    name,
                    in_c,
                    out_c,
                    bn,
                } => {
                    let fan_in = in_c * 9;
                    push(
                        format!("{name}.weight"),
                        PartitionTag::SharedEncoder,
                        true,
                        init_weight(&[*out_c, *in_c, 3, 3], fan_in, rng),
                    );
                    push(
                        format!("{name}.bias"),
                        PartitionTag::SharedEncoder,
                        true,
                        Tensor::zeros(&[*out_c]),
                    );
                    if *bn {
                        push_bn(&mut push, name, *out_c);
                    }
                }
                PlannedLayer::DenseEnc {
                    name,
                    in_dim,
                    out_dim,
                    bn,
                } => {
                    push(
                        format!("{name}.weight"),
                        PartitionTag::SharedEncoder,
                        true,
                        init_weight(&[*in_dim, *out_dim], *in_dim, rng),
                    );
                    push(
                        format!("{name}.bias"),
                        PartitionTag::SharedEncoder,
                        true,
                        Tensor::zeros(&[*out_dim]),
                    );
                    if *bn {
                        push_bn(&mut push, name, *out_dim);
                    }
                }
            }
        }

        for (prefix, tag) in [
            ("head_g", PartitionTag::SharedGlobalHead),
            ("head_l", PartitionTag::LocalHead),
        ] {
            let widths = [
                (feat_dim, config.head_width),
                (config.head_width, config.head_width),
                (config.head_width, config.num_classes),
            ];
            for (i, (nin, nout)) in widths.iter().enumerate() {
                push(
                    format!("{prefix}.fc{}.weight", i + 1),
                    tag,
                    true,
                    init_weight(&[*nin, *nout], *nin, rng),
                );
                push(
                    format!("{prefix}.fc{}.bias", i + 1),
                    tag,
                    true,
                    Tensor::zeros(&[*nout]),
                );
            }
        }

        Ok(Model {
            config,
            params: ParamSet { params },
        })
    }

    /// Rebuild a model from a parameter set (e.g. a checkpoint), verifying
    /// the layout against a fresh initialization of `config`.
    pub fn from_parts(config: ModelConfig, params: ParamSet<T>) -> Result<Model<T>, ModelError> {
        let mut rng = RngStream::new(0, 0);
        let reference = Model::<T>::init(config.clone(), &mut rng)?;
        if reference.params.len() != params.len() {
            return Err(ModelError::ParamMismatch {
                name: "<set>".into(),
                reason: format!(
                    "expected {} parameters, got {}",
                    reference.params.len(),
                    params.len()
                ),
            });
        }
        for (expect, got) in reference.params.iter().zip(params.iter()) {
            if expect.name != got.name {
                return Err(ModelError::ParamMismatch {
                    name: got.name.clone(),
                    reason: format!("expected parameter {} at this position", expect.name),
                });
            }
            if expect.value.shape != got.value.shape || expect.tag != got.tag {
                return Err(ModelError::ParamMismatch {
                    name: got.name.clone(),
                    reason: "shape or tag differs from the configured architecture".into(),
                });
            }
        }
        Ok(Model { config, params })
    }

    /// Register parameter leaves on a tape. With `trainable` set, trainable
    /// parameters become gradient leaves; otherwise everything is constant.
    /// Running statistics are never bound (they are consumed by value).
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .params
            .params
            .iter()
            .map(|p| {
                if !p.trainable {
                    None
                } else if trainable {
                    Some(g.param(p.value.clone()))
                } else {
                    Some(g.constant(p.value.clone()))
                }
            })
            .collect();
        Bound { vars }
    }

    fn idx(&self, name: &str) -> usize {
        self.params
            .index_of(name)
            .unwrap_or_else(|| panic!("parameter {name} missing"))
    }

    /// Encoder forward; in train mode batch-norm running statistics are
    /// updated in place.
    pub fn encode(
        &mut self,
        g: &mut Graph<T>,
        bound: &Bound,
        x: Var,
        mode: Mode,
    ) -> Result<Var, ModelError> {
        let (layers, _) = self.config.plan()?;
        let mut cur = x;
        for layer in &layers {
            match layer {
                PlannedLayer::Conv { name, bn, .. } => {
                    let w = bound.var(self.idx(&format!("{name}.weight")));
                    let b = bound.var(self.idx(&format!("{name}.bias")));
                    cur = g.conv2d(cur, w, b, 1, 1)?;
                    if *bn {
                        cur = self.apply_bn(g, bound, cur, name, mode)?;
                    }
                    cur = g.relu(cur);
                    cur = g.maxpool2(cur)?;
                }
                PlannedLayer::DenseEnc {
                    name,
                    in_dim,
                    bn,
                    ..
                } => {
                    if g.shape(cur).len() == 4 {
                        let bsz = g.shape(cur)[0];
                        cur = g.reshape(cur, &[bsz, *in_dim])?;
                    }
                    let w = bound.var(self.idx(&format!("{name}.weight")));
                    let b = bound.var(self.idx(&format!("{name}.bias")));
                    cur = g.dense(cur, w, b)?;
                    if *bn {
                        cur = self.apply_bn(g, bound, cur, name, mode)?;
                    }
                    cur = g.relu(cur);
                }
            }
        }
        if g.shape(cur).len() == 4 {
            let shape = g.shape(cur).to_vec();
            cur = g.reshape(cur, &[shape[0], shape[1..].iter().product()])?;
        }
        // per-sample feature normalization: bounds the head inputs so raw
        // evidence cannot grow with sheer input magnitude, which would
        // swamp the uncertainty signal on corrupted inputs
        cur = g.rms_norm(cur, FEATURE_NORM_EPS)?;
        Ok(cur)
    }

    fn apply_bn(
        &mut self,
        g: &mut Graph<T>,
        bound: &Bound,
        x: Var,
        layer: &str,
        mode: Mode,
    ) -> Result<Var, ModelError> {
        let gamma = bound.var(self.idx(&format!("{layer}.bn.gamma")));
        let beta = bound.var(self.idx(&format!("{layer}.bn.beta")));
        let rm_i = self.idx(&format!("{layer}.bn.running_mean"));
        let rv_i = self.idx(&format!("{layer}.bn.running_var"));
        let rm = self.params.params[rm_i].value.clone();
        let rv = self.params.params[rv_i].value.clone();
        let (out, updated) = g.batchnorm(x, gamma, beta, &rm, &rv, mode)?;
        if let Some((new_rm, new_rv)) = updated {
            self.params.params[rm_i].value = new_rm;
            self.params.params[rv_i].value = new_rv;
        }
        Ok(out)
    }

    /// Three-layer head on encoder features; output is raw (pre-Softplus).
    pub fn head_forward(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        features: Var,
        head: Head,
    ) -> Result<Var, ModelError> {
        let prefix = match head {
            Head::Global => "head_g",
            Head::Local => "head_l",
        };
        let mut cur = features;
        for i in 1..=3 {
            let w = bound.var(self.idx(&format!("{prefix}.fc{i}.weight")));
            let b = bound.var(self.idx(&format!("{prefix}.fc{i}.bias")));
            cur = g.dense(cur, w, b)?;
            if i < 3 {
                cur = g.relu(cur);
            }
        }
        Ok(cur)
    }

    /// Encoder plus both heads from a single encode call.
    pub fn forward(
        &mut self,
        g: &mut Graph<T>,
        bound: &Bound,
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Var, Var), ModelError> {
        let features = self.encode(g, bound, x, mode)?;
        let raw_g = self.head_forward(g, bound, features, Head::Global)?;
        let raw_l = self.head_forward(g, bound, features, Head::Local)?;
        Ok((features, raw_g, raw_l))
    }

    /// Copy of the parameters carrying the given tags.
    pub fn partition_view(&self, tags: &[PartitionTag]) -> ParamSet<T> {
        self.params.view(tags)
    }

    /// Overwrite matching parameters (broadcast reception).
    pub fn load(&mut self, set: &ParamSet<T>) -> Result<(), ModelError> {
        self.params.load(set)
    }
}

/// Plain SGD over the bound trainable parameters.
pub fn sgd_step<T: Scalar>(model: &mut Model<T>, g: &Graph<T>, bound: &Bound, lr: f64) {
    for (i, v) in bound.vars.iter().enumerate() {
        let Some(var) = v else { continue };
        let Some(grad) = g.grad(*var) else { continue };
        let p = &mut model.params.params[i].value;
        for (w, d) in p.data.iter_mut().zip(&grad.data) {
            *w = T::from_f64(w.as_f64() - lr * d.as_f64());
        }
    }
}
