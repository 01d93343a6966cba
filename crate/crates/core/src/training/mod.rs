//! The training loop: PK sampling, random erasing, the warmup schedule,
//! Adam, and the loss composition each neck variant allows.

pub mod erasing;
pub mod optim;
pub mod sampler;
pub mod schedule;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::IdentityDataset;
use crate::error::{Error, Result};
use crate::losses::{
    batch_hard_triplet, center_loss, id_loss, CenterBank, LabelSmoothConfig, LossBreakdown,
    LossWeights, TripletConfig, DEFAULT_CENTER_LR, DEFAULT_SMOOTHING,
};
use crate::model::{BackboneConfig, Model, ModelConfig, NeckVariant};
use crate::tensor::{BnMode, Graph, Tensor};

pub use erasing::{random_erase, ErasedRect, ErasingFill, REAConfig};
pub use optim::{Adam, AdamConfig};
pub use sampler::{sample_pk_batch, PKSamplerConfig};
pub use schedule::ScheduleConfig;

const SAMPLER_SALT: u64 = 0x5a4d_504c_4552_0001;
const ERASING_SALT: u64 = 0x4552_4153_4552_0002;
const INIT_SALT: u64 = 0x494e_4954_0000_0003;

/// Independent generator for `purpose`, indexed by `counter`, so the stream
/// seen at iteration n never depends on what earlier iterations consumed.
pub fn rng_stream(seed: u64, salt: u64, counter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(counter);
    rng
}

/// The cumulative switches of the trick ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tricks {
    pub warmup: bool,
    pub random_erasing: bool,
    pub label_smoothing: bool,
    pub last_stride_1: bool,
    pub neck: NeckVariant,
    pub center_loss: bool,
}

impl Tricks {
    /// Standard baseline: ID and triplet loss on the same pooled feature,
    /// no tricks.
    pub fn baseline() -> Self {
        Tricks {
            warmup: false,
            random_erasing: false,
            label_smoothing: false,
            last_stride_1: false,
            neck: NeckVariant::Neck3,
            center_loss: false,
        }
    }

    pub fn all() -> Self {
        Tricks {
            warmup: true,
            random_erasing: true,
            label_smoothing: true,
            last_stride_1: true,
            neck: NeckVariant::BnNeck,
            center_loss: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CenterUpdate {
    /// `c <- c - a_c * sum(c - f) / (1 + n)` after each step.
    CountNormalized,
    /// Plain gradient step of size `a_c` on the (unweighted) center loss.
    Gradient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub tricks: Tricks,
    /// `last_stride` here is overridden by `tricks.last_stride_1`.
    pub backbone: BackboneConfig,
    pub classifier_bias: bool,
    pub bn_bias_trainable: bool,
    pub schedule: ScheduleConfig,
    pub sampler: PKSamplerConfig,
    pub erasing: REAConfig,
    pub triplet: TripletConfig,
    /// Used only when label smoothing is on.
    pub smoothing: f64,
    pub weights: LossWeights,
    pub center_lr: f64,
    pub center_update: CenterUpdate,
    pub optimizer: AdamConfig,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(backbone: BackboneConfig, tricks: Tricks) -> Self {
        TrainConfig {
            tricks,
            backbone,
            classifier_bias: false,
            bn_bias_trainable: true,
            schedule: ScheduleConfig::default(),
            sampler: PKSamplerConfig::default(),
            erasing: REAConfig::default(),
            triplet: TripletConfig::default(),
            smoothing: DEFAULT_SMOOTHING,
            weights: LossWeights::default(),
            center_lr: DEFAULT_CENTER_LR,
            center_update: CenterUpdate::CountNormalized,
            optimizer: AdamConfig::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.sampler.validate()?;
        if self.tricks.random_erasing {
            self.erasing.validate()?;
        }
        if !(self.triplet.margin >= 0.0) {
            return Err(Error::config("loss.margin", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::config("loss.epsilon", "must lie in [0, 1)"));
        }
        if !(self.weights.beta >= 0.0) {
            return Err(Error::config("loss.beta", "must be non-negative"));
        }
        if !(self.center_lr > 0.0) {
            return Err(Error::config("loss.center_lr", "must be positive"));
        }
        Ok(())
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        let mut backbone = self.backbone.clone();
        backbone.last_stride = if self.tricks.last_stride_1 { 1 } else { 2 };
        let mut m = ModelConfig::new(backbone, self.tricks.neck, num_classes);
        m.classifier_bias = self.classifier_bias;
        m.bn_bias_trainable = self.bn_bias_trainable;
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    /// 1-based, counted across epochs.
    pub iteration: usize,
    pub epoch: usize,
    pub lr: f64,
    pub losses: LossBreakdown,
}

/// One record per optimizer step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<LogRecord>,
}

pub const LOG_HEADER: &str = "iteration,epoch,lr,L_ID,L_Tri,L_C,total";

impl TrainingLog {
    /// Comma-separated rows under [`LOG_HEADER`], preceded by a
    /// `# manifest-hash:` comment when a hash is given. Floats use the
    /// shortest round-tripping form.
    pub fn to_csv(&self, manifest_hash: Option<&str>) -> String {
        let mut out = String::new();
        if let Some(h) = manifest_hash {
            let _ = writeln!(out, "# manifest-hash: {h}");
        }
        out.push_str(LOG_HEADER);
        out.push('\n');
        for r in &self.records {
            let l = r.losses;
            let _ = writeln!(
                out,
                "{},{},{:e},{},{},{},{}",
                r.iteration, r.epoch, r.lr, l.id, l.triplet, l.center, l.total
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text.lines().filter(|l| !l.starts_with('#'));
        if lines.next() != Some(LOG_HEADER) {
            return Err(format!("expected header `{LOG_HEADER}`"));
        }
        let mut records = Vec::new();
        for (n, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(format!("row {}: expected 7 fields, got {}", n + 1, f.len()));
            }
            let num = |i: usize| {
                f[i].parse::<f64>()
                    .map_err(|e| format!("row {}: {e}", n + 1))
            };
            let int = |i: usize| {
                f[i].parse::<usize>()
                    .map_err(|e| format!("row {}: {e}", n + 1))
            };
            records.push(LogRecord {
                iteration: int(0)?,
                epoch: int(1)?,
                lr: num(2)?,
                losses: LossBreakdown {
                    id: num(3)?,
                    triplet: num(4)?,
                    center: num(5)?,
                    total: num(6)?,
                },
            });
        }
        Ok(TrainingLog { records })
    }

    pub fn write_csv(&self, path: &Path, manifest_hash: Option<&str>) -> Result<()> {
        fs::write(path, self.to_csv(manifest_hash))?;
        Ok(())
    }
}

/// Everything a finished run produces.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub centers: Option<CenterBank>,
    pub log: TrainingLog,
    /// Identity label of each classifier output, ascending.
    pub classes: Vec<i64>,
}

/// `[B, C, H, W]` images for one step, erased if enabled. `fill` must be
/// resolved (not `DatasetMean`).
pub fn prepare_batch(
    dataset: &IdentityDataset,
    indices: &[usize],
    erasing: Option<&REAConfig>,
    seed: u64,
    iteration: u64,
) -> Result<Tensor> {
    let mut batch = dataset.batch(indices)?;
    let Some(cfg) = erasing else { return Ok(batch) };
    let shape = batch.shape().to_vec();
    let per = shape[1..].iter().product::<usize>();
    let mut rng = rng_stream(seed, ERASING_SALT, iteration);
    let mut scratch = Tensor::zeros(&shape[1..]);
    for i in 0..shape[0] {
        let span = i * per..(i + 1) * per;
        scratch
            .data_mut()
            .copy_from_slice(&batch.data()[span.clone()]);
        random_erase(&mut scratch, cfg, &mut rng)?;
        batch.data_mut()[span].copy_from_slice(scratch.data());
    }
    Ok(batch)
}

/// Train a fresh model on `dataset` (junk samples are ignored).
pub fn train(dataset: &IdentityDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let classes = dataset.identities();
    let index = dataset.identity_index();
    if classes.len() < cfg.sampler.p {
        return Err(Error::Data(format!(
            "training needs at least P = {} identities, found {}",
            cfg.sampler.p,
            classes.len()
        )));
    }
    let class_of = |id: i64| {
        classes
            .binary_search(&id)
            .expect("sampled identity is indexed")
    };
    let model_cfg = cfg.model_config(classes.len());
    let mut model = Model::new(model_cfg, cfg.seed ^ INIT_SALT)?;
    let mut opt = Adam::new(cfg.optimizer, model.params());

    let erasing = if cfg.tricks.random_erasing {
        let mut e = cfg.erasing.clone();
        if e.fill == ErasingFill::DatasetMean {
            let (mean, _) = dataset
                .channel_stats()
                .ok_or_else(|| Error::Data("cannot train on an empty dataset".into()))?;
            e.fill = ErasingFill::PerChannel(mean);
        }
        Some(e)
    } else {
        None
    };
    let smoothing = LabelSmoothConfig::new(
        if cfg.tricks.label_smoothing {
            cfg.smoothing
        } else {
            0.0
        },
        classes.len(),
    )?;
    let variant = cfg.tricks.neck;
    let center_feature = variant
        .triplet_feature()
        .unwrap_or(crate::model::FeatureKind::Ft);
    // With beta = 0 center loss contributes nothing; skip it entirely.
    let mut bank = (cfg.tricks.center_loss && cfg.weights.beta > 0.0)
        .then(|| CenterBank::new(classes.len(), cfg.backbone.feature_dim, cfg.center_lr));

    let total_epochs = cfg.schedule.effective_total();
    let per_epoch = cfg
        .sampler
        .iterations_per_epoch(index.values().map(Vec::len).sum());
    info!(
        "training {} on {} samples / {} identities: {} epochs x {} iterations",
        variant,
        dataset.len(),
        classes.len(),
        total_epochs,
        per_epoch
    );
    let mut log = TrainingLog::default();
    for epoch in 1..=total_epochs {
        let lr = cfg.schedule.lr_at_epoch(epoch)?;
        for step in 0..per_epoch {
            let iteration = (epoch - 1) * per_epoch + step + 1;
            let mut rng = rng_stream(cfg.seed, SAMPLER_SALT, iteration as u64);
            let indices = sample_pk_batch(index, &cfg.sampler, &mut rng)?;
            let labels: Vec<i64> = indices
                .iter()
                .map(|&i| dataset.samples()[i].identity)
                .collect();
            let targets: Vec<usize> = labels.iter().map(|&l| class_of(l)).collect();
            let images = prepare_batch(
                dataset,
                &indices,
                erasing.as_ref(),
                cfg.seed,
                iteration as u64,
            )?;

            let mut g = Graph::new();
            let vars = model.bind(&mut g, true);
            let x = g.constant(images);
            let out = model.forward(&mut g, &vars, x, BnMode::Train)?;
            let blown = !g.value(out.f_t).all_finite()
                || out.logits().is_ok_and(|z| !g.value(z).all_finite());
            if blown {
                return Err(Error::Divergence {
                    iteration,
                    loss: f64::NAN,
                });
            }
            let mut terms = Vec::new();
            let mut parts = LossBreakdown::default();
            if variant.id_feature().is_some() {
                let l = id_loss(&mut g, out.logits()?, &targets, &smoothing)?;
                parts.id = g.value(l).item()?;
                terms.push(l);
            }
            if let Some(kind) = variant.triplet_feature() {
                let l = batch_hard_triplet(&mut g, out.feature(kind), &labels, &cfg.triplet)?;
                parts.triplet = g.value(l).item()?;
                terms.push(l);
            }
            let mut center_var = None;
            if let Some(bank) = &bank {
                let c = g.leaf(
                    bank.centers.clone(),
                    cfg.center_update == CenterUpdate::Gradient,
                );
                let l = center_loss(&mut g, out.feature(center_feature), c, &targets)?;
                parts.center = g.value(l).item()?;
                terms.push(g.scale(l, cfg.weights.beta));
                center_var = Some(c);
            }
            parts.total = parts.id + parts.triplet + cfg.weights.beta * parts.center;
            if !parts.total.is_finite() {
                return Err(Error::Divergence {
                    iteration,
                    loss: parts.total,
                });
            }
            let mut total = terms[0];
            for &t in &terms[1..] {
                total = g.add(total, t)?;
            }
            g.backward(total)?;

            let grads: Vec<Option<Vec<f64>>> = vars
                .iter()
                .map(|&v| g.grad(v).map(<[f64]>::to_vec))
                .collect();
            if let (Some(bank), Some(c)) = (bank.as_mut(), center_var) {
                match cfg.center_update {
                    CenterUpdate::CountNormalized => {
                        let feats = g.value(out.feature(center_feature)).clone();
                        bank.update(&feats, &targets)?;
                    }
                    CenterUpdate::Gradient => {
                        // The graph saw beta * L_C; undo the weight so the
                        // step follows dL_C/dc.
                        let grad = g.grad(c).expect("centers track gradients");
                        let scale = if cfg.weights.beta > 0.0 {
                            bank.lr / cfg.weights.beta
                        } else {
                            0.0
                        };
                        for (w, d) in bank.centers.data_mut().iter_mut().zip(grad) {
                            *w -= scale * d;
                        }
                    }
                }
            }
            opt.step(model.params_mut(), &grads, lr)?;
            if iteration.is_multiple_of(50) || iteration == 1 {
                debug!(
                    "it {iteration} ep {epoch} lr {lr:e} id {:.4} tri {:.4} c {:.4}",
                    parts.id, parts.triplet, parts.center
                );
            }
            log.records.push(LogRecord {
                iteration,
                epoch,
                lr,
                losses: parts,
            });
        }
    }
    Ok(TrainOutcome {
        model,
        centers: bank,
        log,
        classes,
    })
}
