//! Experiment manifests: a flat `key = value` file with dotted keys that
//! fully determines a run, plus the named trick-ablation presets.
//!
//! Unknown keys, duplicate keys and unparsable values are configuration
//! errors naming the key. Later sources override earlier ones: preset,
//! then file lines, then command-line overrides.

mod run;

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::{SplitPolicy, SyntheticBlobConfig};
use crate::error::{Error, Result};
use crate::eval::{Metric, RerankConfig};
use crate::model::{BackboneConfig, Downsample, FeatureKind, NeckVariant};
use crate::training::{CenterUpdate, ErasingFill, TrainConfig, Tricks};

pub use run::{
    evaluate_model, load_splits, run_ablate, run_eval, run_export_scatter, run_sweep_beta,
    run_train, AblationRow, AblationRuns, DataSplits, RunDir, SweepRow, ABLATION_HEADER,
    SWEEP_HEADER,
};

/// The cumulative trick-ablation rows, in order.
pub const PRESETS: [&str; 7] = [
    "baseline-s",
    "+warmup",
    "+rea",
    "+ls",
    "+stride1",
    "+bnneck",
    "+center",
];

/// Tricks and center-loss weight of a named preset. `full` is `+center`.
pub fn preset(name: &str) -> Result<(Tricks, f64)> {
    let name = if name == "full" { "+center" } else { name };
    let depth = PRESETS.iter().position(|&p| p == name).ok_or_else(|| {
        Error::config(
            "preset",
            format!(
                "unknown preset `{name}` (known: full, {})",
                PRESETS.join(", ")
            ),
        )
    })?;
    let mut t = Tricks::baseline();
    t.warmup = depth >= 1;
    t.random_erasing = depth >= 2;
    t.label_smoothing = depth >= 3;
    t.last_stride_1 = depth >= 4;
    if depth >= 5 {
        t.neck = NeckVariant::BnNeck;
    }
    t.center_loss = depth >= 6;
    Ok((t, crate::losses::LossWeights::default().beta))
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataKind {
    /// A directory holding `images-idx3-ubyte[.gz]` and `labels-idx1-ubyte[.gz]`.
    Idx,
    /// A benchmark-style root with train, query and gallery folders.
    Folder,
    Blobs,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SplitKind {
    ClassShared,
    IdentityDisjoint,
}

/// Where samples come from and how they are divided into train, query and
/// gallery. Folder sources come pre-divided and ignore the split keys.
#[derive(Clone, Debug, PartialEq)]
pub struct DataRef {
    pub kind: DataKind,
    pub path: PathBuf,
    pub folder_train: String,
    pub folder_query: String,
    pub folder_gallery: String,
    pub blobs: SyntheticBlobConfig,
    pub split: SplitKind,
    pub split_train: usize,
    pub split_query: usize,
    pub split_gallery: usize,
    pub train_fraction: f64,
    pub queries_per_identity: usize,
    pub split_seed: u64,
    /// Standardize every split with the training split's channel statistics.
    pub normalize: bool,
}

impl Default for DataRef {
    fn default() -> Self {
        DataRef {
            kind: DataKind::Blobs,
            path: PathBuf::new(),
            folder_train: "bounding_box_train".into(),
            folder_query: "query".into(),
            folder_gallery: "bounding_box_test".into(),
            blobs: SyntheticBlobConfig::default(),
            split: SplitKind::IdentityDisjoint,
            split_train: 3000,
            split_query: 300,
            split_gallery: 1500,
            train_fraction: 0.5,
            queries_per_identity: 2,
            split_seed: 0,
            normalize: true,
        }
    }
}

impl DataRef {
    pub fn policy(&self) -> SplitPolicy {
        match self.split {
            SplitKind::ClassShared => SplitPolicy::ClassShared {
                train: self.split_train,
                query: self.split_query,
                gallery: self.split_gallery,
                seed: self.split_seed,
            },
            SplitKind::IdentityDisjoint => SplitPolicy::IdentityDisjoint {
                train_fraction: self.train_fraction,
                queries_per_identity: self.queries_per_identity,
                seed: self.split_seed,
            },
        }
    }

    fn entries(&self, prefix: &str, out: &mut Vec<(String, String)>) {
        let mut put = |k: &str, v: String| out.push((format!("{prefix}.{k}"), v));
        put(
            "kind",
            match self.kind {
                DataKind::Idx => "idx",
                DataKind::Folder => "folder",
                DataKind::Blobs => "blobs",
            }
            .into(),
        );
        put("path", self.path.display().to_string());
        put("folder.train", self.folder_train.clone());
        put("folder.query", self.folder_query.clone());
        put("folder.gallery", self.folder_gallery.clone());
        put("blobs.identities", self.blobs.identities.to_string());
        put("blobs.samples", self.blobs.samples_per_identity.to_string());
        put("blobs.shape", join(&self.blobs.image_shape));
        put("blobs.noise", num(self.blobs.noise));
        put("blobs.cameras", self.blobs.cameras.to_string());
        put("blobs.seed", self.blobs.seed.to_string());
        put(
            "split",
            match self.split {
                SplitKind::ClassShared => "class-shared",
                SplitKind::IdentityDisjoint => "identity-disjoint",
            }
            .into(),
        );
        put("split.train", self.split_train.to_string());
        put("split.query", self.split_query.to_string());
        put("split.gallery", self.split_gallery.to_string());
        put("split.train_fraction", num(self.train_fraction));
        put(
            "split.queries_per_identity",
            self.queries_per_identity.to_string(),
        );
        put("split.seed", self.split_seed.to_string());
        put("normalize", self.normalize.to_string());
    }

    /// Apply `rest` (the key with its prefix removed). `Ok(false)` when the
    /// key is not a data key.
    fn set(&mut self, key: &str, rest: &str, v: &str) -> Result<bool> {
        match rest {
            "kind" => {
                self.kind = match v {
                    "idx" => DataKind::Idx,
                    "folder" => DataKind::Folder,
                    "blobs" => DataKind::Blobs,
                    _ => {
                        return Err(Error::config(
                            key,
                            format!("expected idx, folder or blobs, got `{v}`"),
                        ))
                    }
                }
            }
            "path" => self.path = PathBuf::from(v),
            "folder.train" => self.folder_train = v.into(),
            "folder.query" => self.folder_query = v.into(),
            "folder.gallery" => self.folder_gallery = v.into(),
            "blobs.identities" => self.blobs.identities = parse(key, v)?,
            "blobs.samples" => self.blobs.samples_per_identity = parse(key, v)?,
            "blobs.shape" => {
                let s: Vec<usize> = parse_list(key, v)?;
                self.blobs.image_shape = s
                    .try_into()
                    .map_err(|_| Error::config(key, "expected three extents C,H,W"))?;
            }
            "blobs.noise" => self.blobs.noise = parse(key, v)?,
            "blobs.cameras" => self.blobs.cameras = parse(key, v)?,
            "blobs.seed" => self.blobs.seed = parse(key, v)?,
            "split" => {
                self.split = match v {
                    "class-shared" => SplitKind::ClassShared,
                    "identity-disjoint" => SplitKind::IdentityDisjoint,
                    _ => {
                        return Err(Error::config(
                            key,
                            format!("expected class-shared or identity-disjoint, got `{v}`"),
                        ))
                    }
                }
            }
            "split.train" => self.split_train = parse(key, v)?,
            "split.query" => self.split_query = parse(key, v)?,
            "split.gallery" => self.split_gallery = parse(key, v)?,
            "split.train_fraction" => self.train_fraction = parse(key, v)?,
            "split.queries_per_identity" => self.queries_per_identity = parse(key, v)?,
            "split.seed" => self.split_seed = parse(key, v)?,
            "normalize" => self.normalize = parse_bool(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RerankMode {
    Off,
    On,
    /// One report without and one with re-ranking per request.
    Both,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalPlan {
    pub features: Vec<FeatureKind>,
    pub metrics: Vec<Metric>,
    pub rerank: RerankMode,
    pub rerank_cfg: RerankConfig,
    /// Exclude same-identity same-camera gallery entries when cameras exist.
    pub cameras: bool,
    pub export_embeddings: bool,
    /// Images per eval-mode forward pass.
    pub chunk: usize,
}

impl Default for EvalPlan {
    fn default() -> Self {
        EvalPlan {
            features: vec![FeatureKind::Ft, FeatureKind::Fi],
            metrics: vec![Metric::Euclidean, Metric::Cosine],
            rerank: RerankMode::Off,
            rerank_cfg: RerankConfig::default(),
            cameras: true,
            export_embeddings: false,
            chunk: 256,
        }
    }
}

impl EvalPlan {
    /// Every (feature, metric, rerank) combination requested.
    pub fn requests(&self) -> Vec<(FeatureKind, Metric, Option<RerankConfig>)> {
        let reranks: Vec<Option<RerankConfig>> = match self.rerank {
            RerankMode::Off => vec![None],
            RerankMode::On => vec![Some(self.rerank_cfg)],
            RerankMode::Both => vec![None, Some(self.rerank_cfg)],
        };
        let mut out = Vec::new();
        for &f in &self.features {
            for &m in &self.metrics {
                for &r in &reranks {
                    out.push((f, m, r));
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationKind {
    /// One row per cumulative preset.
    Tricks,
    /// One row per neck variant, other tricks as configured.
    Necks,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub run_id: String,
    pub out_dir: PathBuf,
    pub train: TrainConfig,
    pub data: DataRef,
    /// Evaluation source when it differs from the training source.
    pub test: Option<DataRef>,
    pub eval: EvalPlan,
    pub sweep_betas: Vec<f64>,
    pub sweep_seeds: Vec<u64>,
    pub sweep_metric: Metric,
    pub ablate_kind: AblationKind,
    pub ablate_presets: Vec<String>,
    pub ablate_necks: Vec<NeckVariant>,
    pub ablate_seeds: Vec<u64>,
    pub scatter_feature: FeatureKind,
}

impl Default for Manifest {
    fn default() -> Self {
        let (tricks, beta) = preset("full").expect("known preset");
        let mut train = TrainConfig::new(BackboneConfig::plain([1, 28, 28]), tricks);
        train.weights.beta = beta;
        Manifest {
            run_id: "run".into(),
            out_dir: PathBuf::from("runs"),
            train,
            data: DataRef::default(),
            test: None,
            eval: EvalPlan::default(),
            sweep_betas: vec![0.0, 0.0005, 0.005, 0.05, 0.5],
            sweep_seeds: vec![0],
            sweep_metric: Metric::Euclidean,
            ablate_kind: AblationKind::Tricks,
            ablate_presets: PRESETS.iter().map(|s| s.to_string()).collect(),
            ablate_necks: NeckVariant::ALL.to_vec(),
            ablate_seeds: vec![0],
            scatter_feature: FeatureKind::Ft,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.trim()
        .parse()
        .map_err(|e| Error::config(key, format!("cannot parse `{v}`: {e}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::config(key, format!("expected a boolean, got `{v}`"))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| parse(key, p)).collect()
}

/// Shortest representation that parses back to the same value.
fn num(x: f64) -> String {
    format!("{x:?}")
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn join_num(xs: &[f64]) -> String {
    xs.iter().map(|&x| num(x)).collect::<Vec<_>>().join(",")
}

/// `key = value` pairs of a manifest file, in file order. Blank lines and
/// `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::config(
                format!("line {}", n + 1),
                format!("expected `key = value`, got `{line}`"),
            )
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::config(format!("line {}", n + 1), "empty key"));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(Error::config(k, "key given twice"));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl Manifest {
    /// Build from key-value pairs; a `preset` key is applied before all
    /// others.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut m = Manifest::default();
        if let Some((_, p)) = pairs.iter().find(|(k, _)| k == "preset") {
            m.apply_preset(p)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            m.set(k, v)?;
        }
        m.validate()?;
        Ok(m)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_kv(text)?)
    }

    /// Read a manifest file and apply `overrides` (`key=value`) on top.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut pairs = parse_kv(&text)?;
        for (k, v) in overrides {
            pairs.retain(|(seen, _)| seen != k);
            pairs.push((k.clone(), v.clone()));
        }
        Self::from_pairs(&pairs)
    }

    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        let (tricks, beta) = preset(name)?;
        self.train.tricks = tricks;
        self.train.weights.beta = beta;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty()
            || self.run_id.contains(['/', '\\'])
            || self.run_id.starts_with('.')
        {
            return Err(Error::config(
                "run.id",
                "must be a non-empty name without path separators",
            ));
        }
        self.train.validate()?;
        self.train.backbone.validate()?;
        if self.eval.features.is_empty() || self.eval.metrics.is_empty() {
            return Err(Error::config(
                "eval.features",
                "at least one feature and one metric are required",
            ));
        }
        if self.eval.chunk == 0 {
            return Err(Error::config("eval.chunk", "must be positive"));
        }
        if let Some(b) = self.sweep_betas.iter().find(|b| !(**b >= 0.0)) {
            return Err(Error::config(
                "sweep.betas",
                format!("beta {b} is negative"),
            ));
        }
        for (key, empty) in [
            ("sweep.betas", self.sweep_betas.is_empty()),
            ("sweep.seeds", self.sweep_seeds.is_empty()),
            ("ablate.seeds", self.ablate_seeds.is_empty()),
        ] {
            if empty {
                return Err(Error::config(key, "must not be empty"));
            }
        }
        for p in &self.ablate_presets {
            preset(p)
                .map_err(|_| Error::config("ablate.presets", format!("unknown preset `{p}`")))?;
        }
        Ok(())
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        if let Some(rest) = key.strip_prefix("data.") {
            if self.data.set(key, rest, v)? {
                return Ok(());
            }
        }
        if let Some(rest) = key.strip_prefix("test.") {
            let mut t = self.test.clone().unwrap_or_else(|| self.data.clone());
            if rest == "kind" && v == "none" {
                self.test = None;
                return Ok(());
            }
            if t.set(key, rest, v)? {
                self.test = Some(t);
                return Ok(());
            }
        }
        let t = &mut self.train;
        match key {
            "run.id" => self.run_id = v.to_string(),
            "run.out" => self.out_dir = PathBuf::from(v),
            "seed" => t.seed = parse(key, v)?,
            "trick.warmup" => t.tricks.warmup = parse_bool(key, v)?,
            "trick.rea" => t.tricks.random_erasing = parse_bool(key, v)?,
            "trick.label_smooth" => t.tricks.label_smoothing = parse_bool(key, v)?,
            "trick.last_stride_1" => t.tricks.last_stride_1 = parse_bool(key, v)?,
            "trick.neck" => t.tricks.neck = parse(key, v)?,
            "trick.center_loss" => t.tricks.center_loss = parse_bool(key, v)?,
            "trick.rea.p" => t.erasing.probability = parse(key, v)?,
            "trick.rea.area_min" => t.erasing.area_min = parse(key, v)?,
            "trick.rea.area_max" => t.erasing.area_max = parse(key, v)?,
            "trick.rea.r1" => t.erasing.r1 = parse(key, v)?,
            "trick.rea.fill" => {
                t.erasing.fill = match v {
                    "mean" => ErasingFill::DatasetMean,
                    _ => match parse_list::<f64>(key, v)?.as_slice() {
                        [c] => ErasingFill::Constant(*c),
                        [] => return Err(Error::config(key, "expected `mean` or fill values")),
                        many => ErasingFill::PerChannel(many.to_vec()),
                    },
                }
            }
            "model.channels" => {
                let keep = t
                    .backbone
                    .blocks
                    .first()
                    .map_or(Downsample::Stride, |b| b.downsample);
                let mut b = BackboneConfig::with_channels(
                    t.backbone.input,
                    &parse_list::<usize>(key, v)?,
                    t.backbone.feature_dim,
                );
                b.block_norm = t.backbone.block_norm;
                b.blocks.iter_mut().for_each(|blk| blk.downsample = keep);
                t.backbone = b;
            }
            "model.downsample" => {
                let d = match v {
                    "stride" => Downsample::Stride,
                    "maxpool" => Downsample::MaxPool,
                    _ => {
                        return Err(Error::config(
                            key,
                            format!("expected stride or maxpool, got `{v}`"),
                        ))
                    }
                };
                t.backbone.blocks.iter_mut().for_each(|b| b.downsample = d);
            }
            "model.feature_dim" => t.backbone.feature_dim = parse(key, v)?,
            "model.block_norm" => t.backbone.block_norm = parse_bool(key, v)?,
            "model.classifier_bias" => t.classifier_bias = parse_bool(key, v)?,
            "model.bn_bias_trainable" => t.bn_bias_trainable = parse_bool(key, v)?,
            "schedule.base_lr" => t.schedule.base_lr = parse(key, v)?,
            "schedule.warmup_epochs" => t.schedule.warmup_epochs = parse(key, v)?,
            "schedule.decay_epochs" => t.schedule.decay_epochs = parse_list(key, v)?,
            "schedule.decay_factors" => t.schedule.decay_factors = parse_list(key, v)?,
            "schedule.total_epochs" => t.schedule.total_epochs = parse(key, v)?,
            "schedule.time_scale" => t.schedule.time_scale = parse(key, v)?,
            "sampler.p" => t.sampler.p = parse(key, v)?,
            "sampler.k" => t.sampler.k = parse(key, v)?,
            "loss.margin" => t.triplet.margin = parse(key, v)?,
            "loss.epsilon" => t.smoothing = parse(key, v)?,
            "loss.beta" => t.weights.beta = parse(key, v)?,
            "loss.center_lr" => t.center_lr = parse(key, v)?,
            "loss.center_update" => {
                t.center_update = match v {
                    "count" => CenterUpdate::CountNormalized,
                    "gradient" => CenterUpdate::Gradient,
                    _ => {
                        return Err(Error::config(
                            key,
                            format!("expected count or gradient, got `{v}`"),
                        ))
                    }
                }
            }
            "optim.beta1" => t.optimizer.beta1 = parse(key, v)?,
            "optim.beta2" => t.optimizer.beta2 = parse(key, v)?,
            "optim.eps" => t.optimizer.eps = parse(key, v)?,
            "optim.weight_decay" => t.optimizer.weight_decay = parse(key, v)?,
            "eval.features" => self.eval.features = parse_list(key, v)?,
            "eval.metrics" => self.eval.metrics = parse_list(key, v)?,
            "eval.rerank" => {
                self.eval.rerank = match v {
                    "off" | "false" => RerankMode::Off,
                    "on" | "true" => RerankMode::On,
                    "both" => RerankMode::Both,
                    _ => {
                        return Err(Error::config(
                            key,
                            format!("expected off, on or both, got `{v}`"),
                        ))
                    }
                }
            }
            "eval.rerank.k1" => self.eval.rerank_cfg.k1 = parse(key, v)?,
            "eval.rerank.k2" => self.eval.rerank_cfg.k2 = parse(key, v)?,
            "eval.rerank.lambda" => self.eval.rerank_cfg.lambda = parse(key, v)?,
            "eval.cameras" => self.eval.cameras = parse_bool(key, v)?,
            "eval.export_embeddings" => self.eval.export_embeddings = parse_bool(key, v)?,
            "eval.chunk" => self.eval.chunk = parse(key, v)?,
            "sweep.betas" => self.sweep_betas = parse_list(key, v)?,
            "sweep.seeds" => self.sweep_seeds = parse_list(key, v)?,
            "sweep.metric" => self.sweep_metric = parse(key, v)?,
            "ablate.kind" => {
                self.ablate_kind = match v {
                    "tricks" => AblationKind::Tricks,
                    "necks" => AblationKind::Necks,
                    _ => {
                        return Err(Error::config(
                            key,
                            format!("expected tricks or necks, got `{v}`"),
                        ))
                    }
                }
            }
            "ablate.presets" => {
                self.ablate_presets = v.split(',').map(|s| s.trim().to_string()).collect()
            }
            "ablate.necks" => self.ablate_necks = parse_list(key, v)?,
            "ablate.seeds" => self.ablate_seeds = parse_list(key, v)?,
            "scatter.feature" => self.scatter_feature = parse(key, v)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Every key with its resolved value, sorted by key. Parsing this text
    /// reproduces the manifest.
    pub fn to_kv(&self) -> String {
        let t = &self.train;
        let mut e: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| e.push((k.to_string(), v));
        put("run.id", self.run_id.clone());
        put("run.out", self.out_dir.display().to_string());
        put("seed", t.seed.to_string());
        put("trick.warmup", t.tricks.warmup.to_string());
        put("trick.rea", t.tricks.random_erasing.to_string());
        put("trick.label_smooth", t.tricks.label_smoothing.to_string());
        put("trick.last_stride_1", t.tricks.last_stride_1.to_string());
        put("trick.neck", t.tricks.neck.to_string());
        put("trick.center_loss", t.tricks.center_loss.to_string());
        put("trick.rea.p", num(t.erasing.probability));
        put("trick.rea.area_min", num(t.erasing.area_min));
        put("trick.rea.area_max", num(t.erasing.area_max));
        put("trick.rea.r1", num(t.erasing.r1));
        put(
            "trick.rea.fill",
            match &t.erasing.fill {
                ErasingFill::DatasetMean => "mean".into(),
                ErasingFill::Constant(c) => num(*c),
                ErasingFill::PerChannel(v) => join_num(v),
            },
        );
        let chans: Vec<usize> = t.backbone.blocks.iter().map(|b| b.out_channels).collect();
        put("model.channels", join(&chans));
        put(
            "model.downsample",
            match t
                .backbone
                .blocks
                .first()
                .map_or(Downsample::Stride, |b| b.downsample)
            {
                Downsample::MaxPool => "maxpool",
                _ => "stride",
            }
            .into(),
        );
        put("model.feature_dim", t.backbone.feature_dim.to_string());
        put("model.block_norm", t.backbone.block_norm.to_string());
        put("model.classifier_bias", t.classifier_bias.to_string());
        put("model.bn_bias_trainable", t.bn_bias_trainable.to_string());
        put("schedule.base_lr", num(t.schedule.base_lr));
        put(
            "schedule.warmup_epochs",
            t.schedule.warmup_epochs.to_string(),
        );
        put("schedule.decay_epochs", join(&t.schedule.decay_epochs));
        put(
            "schedule.decay_factors",
            join_num(&t.schedule.decay_factors),
        );
        put("schedule.total_epochs", t.schedule.total_epochs.to_string());
        put("schedule.time_scale", num(t.schedule.time_scale));
        put("sampler.p", t.sampler.p.to_string());
        put("sampler.k", t.sampler.k.to_string());
        put("loss.margin", num(t.triplet.margin));
        put("loss.epsilon", num(t.smoothing));
        put("loss.beta", num(t.weights.beta));
        put("loss.center_lr", num(t.center_lr));
        put(
            "loss.center_update",
            match t.center_update {
                CenterUpdate::CountNormalized => "count",
                CenterUpdate::Gradient => "gradient",
            }
            .into(),
        );
        put("optim.beta1", num(t.optimizer.beta1));
        put("optim.beta2", num(t.optimizer.beta2));
        put("optim.eps", num(t.optimizer.eps));
        put("optim.weight_decay", num(t.optimizer.weight_decay));
        put("eval.features", join(&self.eval.features));
        put("eval.metrics", join(&self.eval.metrics));
        put(
            "eval.rerank",
            match self.eval.rerank {
                RerankMode::Off => "off",
                RerankMode::On => "on",
                RerankMode::Both => "both",
            }
            .into(),
        );
        put("eval.rerank.k1", self.eval.rerank_cfg.k1.to_string());
        put("eval.rerank.k2", self.eval.rerank_cfg.k2.to_string());
        put("eval.rerank.lambda", num(self.eval.rerank_cfg.lambda));
        put("eval.cameras", self.eval.cameras.to_string());
        put(
            "eval.export_embeddings",
            self.eval.export_embeddings.to_string(),
        );
        put("eval.chunk", self.eval.chunk.to_string());
        put("sweep.betas", join_num(&self.sweep_betas));
        put("sweep.seeds", join(&self.sweep_seeds));
        put("sweep.metric", self.sweep_metric.to_string());
        put(
            "ablate.kind",
            match self.ablate_kind {
                AblationKind::Tricks => "tricks",
                AblationKind::Necks => "necks",
            }
            .into(),
        );
        put("ablate.presets", self.ablate_presets.join(","));
        put("ablate.necks", join(&self.ablate_necks));
        put("ablate.seeds", join(&self.ablate_seeds));
        put("scatter.feature", self.scatter_feature.to_string());
        self.data.entries("data", &mut e);
        match &self.test {
            Some(t) => t.entries("test", &mut e),
            None => e.push(("test.kind".into(), "none".into())),
        }
        e.sort();
        let mut out = String::new();
        for (k, v) in e {
            out.push_str(&k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// SHA-256 of the canonical key-value text, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_kv().as_bytes()))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.run_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_cumulative() {
        let (base, _) = preset("baseline-s").unwrap();
        assert_eq!(base, Tricks::baseline());
        let (full, beta) = preset("full").unwrap();
        assert_eq!(full, Tricks::all());
        assert_eq!(beta, 0.0005);
        assert_eq!(preset("+center").unwrap(), preset("full").unwrap());
        let (ls, _) = preset("+ls").unwrap();
        assert!(ls.warmup && ls.random_erasing && ls.label_smoothing && !ls.last_stride_1);
        assert_eq!(ls.neck, NeckVariant::Neck3);
        assert!(preset("+dropout").is_err());
    }

    #[test]
    fn canonical_text_round_trips() {
        let text = "preset = +rea\nrun.id = x\ndata.kind = idx\ndata.path = data/mnist\ndata.split = class-shared\n\
                    trick.rea.fill = 0.1,0.2\nmodel.channels = 8,16\nmodel.downsample = maxpool\n\
                    test.kind = blobs\ntest.blobs.cameras = 3\neval.rerank = both\nsweep.seeds = 0,1,2\n";
        let m = Manifest::parse(text).unwrap();
        assert!(m.train.tricks.random_erasing && !m.train.tricks.label_smoothing);
        assert_eq!(m.train.backbone.blocks[1].downsample, Downsample::MaxPool);
        assert_eq!(m.test.as_ref().unwrap().blobs.cameras, 3);
        let again = Manifest::parse(&m.to_kv()).unwrap();
        assert_eq!(again, m);
        assert_eq!(again.hash(), m.hash());
        assert_eq!(m.hash().len(), 64);
    }

    #[test]
    fn bad_keys_name_themselves() {
        let key_of = |text: &str| match Manifest::parse(text) {
            Err(Error::Config { key, .. }) => key,
            other => panic!("expected a config error, got {other:?}"),
        };
        assert_eq!(key_of("trick.warmpu = true"), "trick.warmpu");
        assert_eq!(key_of("loss.beta = lots"), "loss.beta");
        assert_eq!(key_of("loss.beta = -1"), "loss.beta");
        assert_eq!(key_of("sampler.p = 3\nsampler.p = 4"), "sampler.p");
        assert_eq!(key_of("trick.neck = neck9"), "trick.neck");
        assert_eq!(key_of("just words"), "line 1");
    }

    #[test]
    fn hash_tracks_content() {
        let a = Manifest::parse("loss.beta = 0.0005").unwrap();
        let b = Manifest::parse("loss.beta = 0.005").unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), Manifest::default().hash());
    }

    #[test]
    fn request_grid() {
        let mut plan = EvalPlan::default();
        assert_eq!(plan.requests().len(), 4);
        plan.rerank = RerankMode::Both;
        let reqs = plan.requests();
        assert_eq!(reqs.len(), 8);
        assert_eq!(reqs.iter().filter(|r| r.2.is_some()).count(), 4);
    }
}
