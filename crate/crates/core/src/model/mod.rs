//! A plain 3x3-conv backbone with a configurable last stride, the seven neck
//! structures, and a bias-free classifier head.

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BnMode, BnState, Graph, Tensor, Var};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Downsample {
    None,
    /// The block's convolution runs with stride 2.
    Stride,
    /// Stride-1 convolution followed by 2x2 max pooling.
    MaxPool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub out_channels: usize,
    pub downsample: Downsample,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// `[C, H, W]`
    pub input: [usize; 3],
    pub blocks: Vec<BlockConfig>,
    /// Down-sampling factor of the last down-sampling block, 1 or 2.
    pub last_stride: usize,
    /// Length of the pooled feature. When it differs from the last block's
    /// channel count a bias-free linear projection follows the pooling.
    pub feature_dim: usize,
    /// Standardize each convolution's output with batch statistics (no
    /// affine parameters) before the ReLU. Adds buffers, never parameters.
    #[serde(default)]
    pub block_norm: bool,
}

impl BackboneConfig {
    /// Three stride-2 blocks with 16/32/64 channels and a 64-d feature.
    pub fn plain(input: [usize; 3]) -> Self {
        Self::with_channels(input, &[16, 32, 64], 64)
    }

    pub fn with_channels(input: [usize; 3], channels: &[usize], feature_dim: usize) -> Self {
        BackboneConfig {
            input,
            blocks: channels
                .iter()
                .map(|&c| BlockConfig {
                    out_channels: c,
                    downsample: Downsample::Stride,
                })
                .collect(),
            last_stride: 2,
            feature_dim,
            block_norm: false,
        }
    }

    /// Channel count of each normalized block, empty without `block_norm`.
    pub fn block_norm_channels(&self) -> impl Iterator<Item = usize> + '_ {
        self.blocks
            .iter()
            .filter(move |_| self.block_norm)
            .map(|b| b.out_channels)
    }

    fn last_downsampling_block(&self) -> Option<usize> {
        self.blocks
            .iter()
            .rposition(|b| b.downsample != Downsample::None)
    }

    /// Stride of block `i`'s convolution and whether it is followed by pooling.
    fn block_plan(&self, i: usize) -> (usize, bool) {
        let factor = if Some(i) == self.last_downsampling_block() {
            self.last_stride
        } else {
            2
        };
        match self.blocks[i].downsample {
            Downsample::None => (1, false),
            Downsample::Stride => (factor, false),
            Downsample::MaxPool => (1, factor == 2),
        }
    }

    pub fn pooled_channels(&self) -> usize {
        self.blocks.last().map_or(self.input[0], |b| b.out_channels)
    }

    fn has_projection(&self) -> bool {
        self.feature_dim != self.pooled_channels()
    }

    /// `[C, H, W]` of the last feature map, before global pooling.
    pub fn feature_map_shape(&self) -> [usize; 3] {
        let [mut c, mut h, mut w] = self.input;
        for (i, block) in self.blocks.iter().enumerate() {
            let (stride, pool) = self.block_plan(i);
            c = block.out_channels;
            // 3x3 convolution with padding 1
            h = (h + 2 - 3) / stride + 1;
            w = (w + 2 - 3) / stride + 1;
            if pool {
                h /= 2;
                w /= 2;
            }
        }
        [c, h, w]
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.last_stride) {
            return Err(Error::config(
                "model.last_stride",
                format!("must be 1 or 2, got {}", self.last_stride),
            ));
        }
        if self.input.contains(&0) || self.feature_dim == 0 {
            return Err(Error::config(
                "model.input",
                "extents and feature_dim must be positive",
            ));
        }
        if self.blocks.iter().any(|b| b.out_channels == 0) {
            return Err(Error::config(
                "model.channels",
                "channel counts must be positive",
            ));
        }
        let [_, mut h, mut w] = self.input;
        for i in 0..self.blocks.len() {
            let (stride, pool) = self.block_plan(i);
            h = (h + 2 - 3) / stride + 1;
            w = (w + 2 - 3) / stride + 1;
            if pool {
                if h < 2 || w < 2 {
                    return Err(Error::config(
                        "model.channels",
                        "too many blocks for the input size",
                    ));
                }
                h /= 2;
                w /= 2;
            }
        }
        Ok(())
    }
}

/// The neck structures compared in the ablation: which feature carries the
/// ID loss, which carries the triplet loss, and whether a BN layer sits
/// between the pooled feature and the classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NeckVariant {
    /// ID loss on `f`.
    Neck1,
    /// Triplet loss on `f`.
    Neck2,
    /// ID and triplet losses on `f`.
    Neck3,
    /// ID loss after BN.
    BnNeck1,
    /// Triplet loss after BN.
    BnNeck2,
    /// ID and triplet losses after BN.
    BnNeck3,
    /// Triplet loss before BN, ID loss after it.
    BnNeck,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureKind {
    /// Pooled feature before the BN layer.
    Ft,
    /// Feature after the BN layer (equal to `Ft` without BN).
    Fi,
}

impl NeckVariant {
    pub const ALL: [NeckVariant; 7] = [
        NeckVariant::Neck1,
        NeckVariant::Neck2,
        NeckVariant::Neck3,
        NeckVariant::BnNeck1,
        NeckVariant::BnNeck2,
        NeckVariant::BnNeck3,
        NeckVariant::BnNeck,
    ];

    pub fn has_bn(self) -> bool {
        matches!(
            self,
            NeckVariant::BnNeck1
                | NeckVariant::BnNeck2
                | NeckVariant::BnNeck3
                | NeckVariant::BnNeck
        )
    }

    pub fn id_feature(self) -> Option<FeatureKind> {
        match self {
            NeckVariant::Neck1 | NeckVariant::Neck3 => Some(FeatureKind::Ft),
            NeckVariant::BnNeck1 | NeckVariant::BnNeck3 | NeckVariant::BnNeck => {
                Some(FeatureKind::Fi)
            }
            NeckVariant::Neck2 | NeckVariant::BnNeck2 => None,
        }
    }

    pub fn triplet_feature(self) -> Option<FeatureKind> {
        match self {
            NeckVariant::Neck2 | NeckVariant::Neck3 | NeckVariant::BnNeck => Some(FeatureKind::Ft),
            NeckVariant::BnNeck2 | NeckVariant::BnNeck3 => Some(FeatureKind::Fi),
            NeckVariant::Neck1 | NeckVariant::BnNeck1 => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NeckVariant::Neck1 => "neck1",
            NeckVariant::Neck2 => "neck2",
            NeckVariant::Neck3 => "neck3",
            NeckVariant::BnNeck1 => "bnneck1",
            NeckVariant::BnNeck2 => "bnneck2",
            NeckVariant::BnNeck3 => "bnneck3",
            NeckVariant::BnNeck => "bnneck",
        }
    }
}

impl fmt::Display for NeckVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NeckVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NeckVariant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config("model.neck", format!("unknown neck `{s}`")))
    }
}

impl FeatureKind {
    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Ft => "f_t",
            FeatureKind::Fi => "f_i",
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f_t" | "ft" => Ok(FeatureKind::Ft),
            "f_i" | "fi" => Ok(FeatureKind::Fi),
            _ => Err(Error::config(
                "eval.features",
                format!("unknown feature `{s}`"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub neck: NeckVariant,
    /// Number of training identities N.
    pub num_classes: usize,
    pub classifier_bias: bool,
    /// Whether the BN layer's additive parameter is trained.
    pub bn_bias_trainable: bool,
}

impl ModelConfig {
    pub fn new(backbone: BackboneConfig, neck: NeckVariant, num_classes: usize) -> Self {
        ModelConfig {
            backbone,
            neck,
            num_classes,
            classifier_bias: false,
            bn_bias_trainable: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.neck.id_feature().is_some() && self.num_classes == 0 {
            return Err(Error::config(
                "model.num_classes",
                "ID loss needs at least one class",
            ));
        }
        Ok(())
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        let b = &self.backbone;
        let mut specs = Vec::new();
        let mut in_c = b.input[0];
        for (i, block) in b.blocks.iter().enumerate() {
            specs.push(ParamSpec {
                name: format!("backbone.conv{i}.weight"),
                shape: vec![block.out_channels, in_c, 3, 3],
                init: Init::Kaiming { fan_in: in_c * 9 },
                decay: true,
                trainable: true,
            });
            in_c = block.out_channels;
        }
        if b.has_projection() {
            specs.push(ParamSpec {
                name: "embed.weight".into(),
                shape: vec![in_c, b.feature_dim],
                init: Init::Kaiming { fan_in: in_c },
                decay: true,
                trainable: true,
            });
        }
        let d = b.feature_dim;
        if self.neck.has_bn() {
            specs.push(ParamSpec {
                name: "bn.gamma".into(),
                shape: vec![d],
                init: Init::Const(1.0),
                decay: false,
                trainable: true,
            });
            specs.push(ParamSpec {
                name: "bn.beta".into(),
                shape: vec![d],
                init: Init::Const(0.0),
                decay: false,
                trainable: self.bn_bias_trainable,
            });
        }
        if self.neck.id_feature().is_some() {
            specs.push(ParamSpec {
                name: "classifier.weight".into(),
                shape: vec![d, self.num_classes],
                init: Init::Kaiming { fan_in: d },
                decay: true,
                trainable: true,
            });
            if self.classifier_bias {
                specs.push(ParamSpec {
                    name: "classifier.bias".into(),
                    shape: vec![self.num_classes],
                    init: Init::Const(0.0),
                    decay: false,
                    trainable: true,
                });
            }
        }
        specs
    }
}

/// Number of learnable scalars of the model described by `config`. BN running
/// statistics are buffers and are not counted.
pub fn count_params(config: &ModelConfig) -> usize {
    config
        .param_specs()
        .iter()
        .map(|s| s.shape.iter().product::<usize>())
        .sum()
}

#[derive(Clone, Copy, Debug)]
enum Init {
    /// He-normal: `N(0, 2 / fan_in)`.
    Kaiming {
        fan_in: usize,
    },
    Const(f64),
}

#[derive(Clone, Debug)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
    decay: bool,
    trainable: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
    /// Subject to L2 weight decay.
    pub decay: bool,
}

/// Per-sample outputs of a neck. `f_t` feeds the triplet/center losses in the
/// BNNeck layout, `f_i` feeds the classifier.
#[derive(Clone, Copy, Debug)]
pub struct NeckOutput {
    pub f_t: Var,
    pub f_i: Var,
    logits: Option<Var>,
    variant: NeckVariant,
}

impl NeckOutput {
    pub fn logits(&self) -> Result<Var> {
        self.logits.ok_or_else(|| {
            Error::invalid(format!(
                "neck {} has no classifier, logits are unavailable",
                self.variant
            ))
        })
    }

    pub fn feature(&self, kind: FeatureKind) -> Var {
        match kind {
            FeatureKind::Ft => self.f_t,
            FeatureKind::Fi => self.f_i,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Param>,
    bn: Option<BnState>,
    block_bn: Vec<BnState>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .param_specs()
            .into_iter()
            .map(|spec| {
                let n: usize = spec.shape.iter().product();
                let data = match spec.init {
                    Init::Kaiming { fan_in } => {
                        let std = (2.0 / fan_in as f64).sqrt();
                        (0..n)
                            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                            .collect()
                    }
                    Init::Const(c) => vec![c; n],
                };
                Param {
                    name: spec.name,
                    value: Tensor::new(spec.shape, data).expect("positive extents"),
                    trainable: spec.trainable,
                    decay: spec.decay,
                }
            })
            .collect();
        let bn = config
            .neck
            .has_bn()
            .then(|| BnState::new(config.backbone.feature_dim));
        let block_bn = config
            .backbone
            .block_norm_channels()
            .map(BnState::new)
            .collect();
        Ok(Model {
            config,
            params,
            bn,
            block_bn,
        })
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        params: Vec<Param>,
        bn: Option<BnState>,
        block_bn: Vec<BnState>,
    ) -> Result<Self> {
        let specs = config.param_specs();
        if specs.len() != params.len()
            || specs
                .iter()
                .zip(&params)
                .any(|(s, p)| s.name != p.name || s.shape != p.value.shape())
        {
            return Err(Error::invalid(
                "parameters do not match the model configuration",
            ));
        }
        if config.neck.has_bn() != bn.is_some() {
            return Err(Error::invalid(
                "BN statistics do not match the neck variant",
            ));
        }
        if !block_bn
            .iter()
            .map(BnState::channels)
            .eq(config.backbone.block_norm_channels())
        {
            return Err(Error::invalid("block statistics do not match the backbone"));
        }
        Ok(Model {
            config,
            params,
            bn,
            block_bn,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn bn_state(&self) -> Option<&BnState> {
        self.bn.as_ref()
    }

    pub fn bn_state_mut(&mut self) -> Option<&mut BnState> {
        self.bn.as_mut()
    }

    /// Running statistics of the per-block normalization, one per block when
    /// `block_norm` is set.
    pub fn block_bn_states(&self) -> &[BnState] {
        &self.block_bn
    }

    pub fn block_bn_states_mut(&mut self) -> &mut [BnState] {
        &mut self.block_bn
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Register every parameter as a leaf of `g`, in `params()` order.
    pub fn bind(&self, g: &mut Graph, track: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| g.leaf(p.value.clone(), track && p.trainable))
            .collect()
    }

    fn var(&self, vars: &[Var], name: &str) -> Var {
        let idx = self
            .params
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("model has no parameter {name}"));
        vars[idx]
    }

    /// Run backbone and neck on `[B, C, H, W]` images. In train mode the BN
    /// layer uses batch statistics and updates its running estimates.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        vars: &[Var],
        images: Var,
        mode: BnMode,
    ) -> Result<NeckOutput> {
        let bb = &self.config.backbone;
        let shape = g.shape(images);
        if shape.len() != 4 || shape[1..] != bb.input {
            let mut want = vec![shape.first().copied().unwrap_or(1)];
            want.extend_from_slice(&bb.input);
            return Err(Error::ShapeMismatch {
                op: "model input",
                lhs: shape.to_vec(),
                rhs: want,
            });
        }
        let mut h = images;
        for i in 0..bb.blocks.len() {
            let (stride, pool) = bb.block_plan(i);
            let w = self.var(vars, &format!("backbone.conv{i}.weight"));
            h = g.conv2d(h, w, stride, 1)?;
            if bb.block_norm {
                let c = bb.blocks[i].out_channels;
                let ones = g.constant(Tensor::vector(vec![1.0; c]));
                let zeros = g.constant(Tensor::vector(vec![0.0; c]));
                h = g.batch_norm(h, ones, zeros, &mut self.block_bn[i], mode)?;
            }
            h = g.relu(h);
            if pool {
                h = g.max_pool2d(h, 2, 2)?;
            }
        }
        let mut f = g.global_avg_pool(h)?;
        if bb.has_projection() {
            f = g.matmul(f, self.var(vars, "embed.weight"))?;
        }
        let variant = self.config.neck;
        let f_i = if variant.has_bn() {
            let (gamma, beta) = (self.var(vars, "bn.gamma"), self.var(vars, "bn.beta"));
            let state = self.bn.as_mut().expect("BN variants carry BN state");
            g.batch_norm(f, gamma, beta, state, mode)?
        } else {
            f
        };
        let logits = match variant.id_feature() {
            Some(kind) => {
                let feat = if kind == FeatureKind::Ft { f } else { f_i };
                let mut z = g.matmul(feat, self.var(vars, "classifier.weight"))?;
                if self.config.classifier_bias {
                    z = g.bias_add(z, self.var(vars, "classifier.bias"))?;
                }
                Some(z)
            }
            None => None,
        };
        Ok(NeckOutput {
            f_t: f,
            f_i,
            logits,
            variant,
        })
    }

    /// Eval-mode features for a batch of images, `[N, D]`.
    pub fn embed_batch(&self, images: &Tensor, kind: FeatureKind) -> Result<Tensor> {
        let mut scratch = self.clone();
        let mut g = Graph::new();
        let vars = scratch.bind(&mut g, false);
        let x = g.constant(images.clone());
        let out = scratch.forward(&mut g, &vars, x, BnMode::Eval)?;
        Ok(g.value(out.feature(kind)).clone())
    }

    /// Eval-mode features for every sample of a dataset, in chunks.
    pub fn embed(
        &self,
        dataset: &crate::data::IdentityDataset,
        kind: FeatureKind,
        chunk: usize,
    ) -> Result<Tensor> {
        let d = self.config.backbone.feature_dim;
        let mut data = Vec::with_capacity(dataset.len() * d);
        let idx: Vec<usize> = (0..dataset.len()).collect();
        for part in idx.chunks(chunk.max(1)) {
            let batch = dataset.batch(part)?;
            data.extend_from_slice(self.embed_batch(&batch, kind)?.data());
        }
        if data.is_empty() {
            return Err(Error::Data("cannot embed an empty dataset".into()));
        }
        Tensor::new(vec![dataset.len(), d], data)
    }
}
