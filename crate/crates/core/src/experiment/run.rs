//! Runners behind the CLI verbs. Each writes into `<run.out>/<run.id>/` and
//! stamps every file with the manifest hash.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};

use super::{AblationKind, DataKind, DataRef, Manifest};
use crate::data::{load_idx, load_image_folder, make_blobs, split, IdentityDataset, SplitTag};
use crate::error::{Error, Result};
use crate::eval::io::{reports_csv, scatter_csv, write_embeddings};
use crate::eval::{
    cluster_ratio, distance_matrix, evaluate_distances, norm_stats, rerank, EvalReport,
    LabeledEmbeddingSet, Metric,
};
use crate::model::{Checkpoint, FeatureKind, Model};
use crate::tensor::Tensor;
use crate::training::{train, TrainConfig, TrainOutcome};

const HASH_KEY: &str = "manifest-hash";
const MEAN_KEY: &str = "normalize.mean";
const STD_KEY: &str = "normalize.std";
const CLASSES_KEY: &str = "classes";

pub const SWEEP_HEADER: &str = "beta,feature,seeds,rank1,mAP,R";
pub const ABLATION_HEADER: &str = "condition,feature,metric,seeds,rank1,mAP,R,norm_cv";

/// Output directory of one manifest.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub path: PathBuf,
    pub hash: String,
}

impl RunDir {
    /// Create the directory and record the manifest. A directory already
    /// holding a different manifest is refused.
    pub fn open(m: &Manifest) -> Result<Self> {
        let path = m.run_dir();
        let hash = m.hash();
        let record = path.join("manifest.kv");
        if let Ok(old) = fs::read_to_string(&record) {
            let old_hash = old
                .lines()
                .next()
                .and_then(|l| l.strip_prefix("# manifest-hash: "));
            if old_hash != Some(hash.as_str()) {
                return Err(Error::config(
                    "run.id",
                    format!(
                        "{} already holds a different manifest ({}); choose another run id",
                        path.display(),
                        old_hash.unwrap_or("unknown")
                    ),
                ));
            }
        }
        fs::create_dir_all(&path)?;
        fs::write(&record, format!("# manifest-hash: {hash}\n{}", m.to_kv()))?;
        Ok(RunDir { path, hash })
    }

    fn sub(&self, name: &str) -> Result<RunDir> {
        let path = self.path.join(name);
        fs::create_dir_all(&path)?;
        Ok(RunDir {
            path,
            hash: self.hash.clone(),
        })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    fn stamp(&self) -> String {
        format!("# manifest-hash: {}\n", self.hash)
    }
}

/// Raw (unnormalized) datasets of a manifest.
#[derive(Clone, Debug)]
pub struct DataSplits {
    pub train: IdentityDataset,
    pub query: IdentityDataset,
    pub gallery: IdentityDataset,
}

impl DataSplits {
    pub fn normalize(&mut self, mean: &[f64], std: &[f64]) {
        self.train.normalize(mean, std);
        self.query.normalize(mean, std);
        self.gallery.normalize(mean, std);
    }
}

fn find_file(dir: &Path, names: &[&str]) -> Result<PathBuf> {
    names
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.is_file())
        .ok_or_else(|| Error::Data(format!("none of {names:?} found in {}", dir.display())))
}

fn load_source(r: &DataRef) -> Result<DataSplits> {
    let whole = match r.kind {
        DataKind::Folder => {
            let load = |sub: &str, tag| -> Result<IdentityDataset> {
                let (ds, report) = load_image_folder(&r.path.join(sub), tag)?;
                let skipped = report.bad_names.len() + report.unsupported.len();
                if skipped > 0 {
                    warn!("{}: skipped {skipped} files", r.path.join(sub).display());
                }
                Ok(ds)
            };
            return Ok(DataSplits {
                train: load(&r.folder_train, SplitTag::Train)?,
                query: load(&r.folder_query, SplitTag::Query)?,
                gallery: load(&r.folder_gallery, SplitTag::Gallery)?,
            });
        }
        DataKind::Idx => {
            let images = find_file(
                &r.path,
                &[
                    "images-idx3-ubyte.gz",
                    "images-idx3-ubyte",
                    "train-images-idx3-ubyte.gz",
                    "train-images-idx3-ubyte",
                ],
            )?;
            let labels = find_file(
                &r.path,
                &[
                    "labels-idx1-ubyte.gz",
                    "labels-idx1-ubyte",
                    "train-labels-idx1-ubyte.gz",
                    "train-labels-idx1-ubyte",
                ],
            )?;
            load_idx(&images, &labels)?
        }
        DataKind::Blobs => make_blobs(&r.blobs),
    };
    let s = split(&whole, &r.policy())?;
    Ok(DataSplits {
        train: s.train,
        query: s.query,
        gallery: s.gallery,
    })
}

/// Training split from `data`, query and gallery from `test` when given.
pub fn load_splits(m: &Manifest) -> Result<DataSplits> {
    let mut s = load_source(&m.data)?;
    if let Some(t) = &m.test {
        let other = load_source(t)?;
        s.query = other.query;
        s.gallery = other.gallery;
    }
    if s.query.is_empty() || s.gallery.is_empty() {
        return Err(Error::Data(
            "query and gallery must both be non-empty".into(),
        ));
    }
    Ok(s)
}

fn normalization(m: &Manifest, train: &IdentityDataset) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
    if !m.data.normalize {
        return Ok(None);
    }
    train
        .channel_stats()
        .map(Some)
        .ok_or_else(|| Error::Data("cannot normalize with an empty training set".into()))
}

fn train_config_for(m: &Manifest, data: &IdentityDataset) -> Result<TrainConfig> {
    let shape = data
        .image_shape()
        .ok_or_else(|| Error::Data("training set is empty".into()))?;
    let mut cfg = m.train.clone();
    cfg.backbone.input = shape
        .try_into()
        .map_err(|_| Error::Data(format!("expected [C, H, W] images, got {shape:?}")))?;
    Ok(cfg)
}

/// Eval-mode reports for every request of `m.eval` on one model.
pub fn evaluate_model(
    model: &Model,
    m: &Manifest,
    query: &IdentityDataset,
    gallery: &IdentityDataset,
    export: Option<&RunDir>,
) -> Result<Vec<(String, EvalReport)>> {
    let want = model.config().backbone.input;
    for ds in [query, gallery] {
        if ds.image_shape() != Some(&want[..]) {
            return Err(Error::Data(format!(
                "images of shape {:?} do not fit a model expecting {want:?}",
                ds.image_shape()
            )));
        }
    }
    let cams = match (query.cameras(), gallery.cameras()) {
        (Some(q), Some(g)) if m.eval.cameras => Some((q, g)),
        _ => {
            if m.eval.cameras {
                info!("camera labels missing; camera filtering disabled");
            }
            None
        }
    };
    let mut out = Vec::new();
    for &feature in &m.eval.features {
        let qe = model.embed(query, feature, m.eval.chunk)?;
        let ge = model.embed(gallery, feature, m.eval.chunk)?;
        if let Some(dir) = export {
            for (tag, ds, e) in [("query", query, &qe), ("gallery", gallery, &ge)] {
                let set =
                    LabeledEmbeddingSet::new(e.clone(), ds.labels(), ds.cameras(), ds.split_tag())?;
                let name = format!("embeddings-{feature}-{tag}-{}.bin", &dir.hash[..12]);
                write_embeddings(&set, &dir.file(&name))?;
            }
        }
        let pooled = Tensor::new(
            vec![qe.rows() + ge.rows(), qe.shape()[1]],
            [qe.data(), ge.data()].concat(),
        )?;
        let labels: Vec<i64> = query.labels().into_iter().chain(gallery.labels()).collect();
        let norms = norm_stats(&pooled).ok();
        for &metric in &m.eval.metrics {
            let cluster = match cluster_ratio(&pooled, &labels, metric) {
                Ok(c) => Some(c),
                Err(e) => {
                    warn!("no cluster statistics for {feature}/{metric}: {e}");
                    None
                }
            };
            for (f, mm, rr) in m.eval.requests() {
                if f != feature || mm != metric {
                    continue;
                }
                let dist = match &rr {
                    Some(cfg) => rerank(&qe, &ge, metric, cfg)?,
                    None => distance_matrix(&qe, &ge, metric)?,
                };
                let mut report = evaluate_distances(
                    &dist,
                    &query.labels(),
                    cams.as_ref().map(|c| c.0.as_slice()),
                    &gallery.labels(),
                    cams.as_ref().map(|c| c.1.as_slice()),
                    metric,
                )?;
                report.feature = Some(feature);
                report.rerank = rr;
                report.cluster = cluster;
                report.norms = norms;
                let label = format!(
                    "{feature}/{metric}{}",
                    if rr.is_some() { "/rerank" } else { "" }
                );
                out.push((label, report));
            }
        }
    }
    Ok(out)
}

struct Trained {
    outcome: TrainOutcome,
    /// Normalized as the model saw them.
    splits: DataSplits,
}

fn train_into(m: &Manifest, dir: &RunDir, mut splits: DataSplits) -> Result<Trained> {
    let stats = normalization(m, &splits.train)?;
    if let Some((mean, std)) = &stats {
        splits.normalize(mean, std);
    }
    let cfg = train_config_for(m, &splits.train)?;
    let outcome = train(&splits.train, &cfg)?;
    outcome
        .log
        .write_csv(&dir.file("train_log.csv"), Some(&dir.hash))?;
    let mut ck = Checkpoint::new(outcome.model.clone());
    ck.centers = outcome.centers.as_ref().map(|b| b.centers.clone());
    ck.extra.insert(HASH_KEY.into(), dir.hash.clone());
    ck.extra.insert(
        CLASSES_KEY.into(),
        serde_json::to_string(&outcome.classes).expect("ints serialize"),
    );
    if let Some((mean, std)) = &stats {
        ck.extra.insert(
            MEAN_KEY.into(),
            serde_json::to_string(mean).expect("floats serialize"),
        );
        ck.extra.insert(
            STD_KEY.into(),
            serde_json::to_string(std).expect("floats serialize"),
        );
    }
    ck.save(&dir.file("checkpoint.bnck"))?;
    Ok(Trained { outcome, splits })
}

/// Train per the manifest; writes `checkpoint.bnck` and `train_log.csv`.
pub fn run_train(m: &Manifest) -> Result<TrainOutcome> {
    let dir = RunDir::open(m)?;
    let t = train_into(m, &dir, load_splits(m)?)?;
    info!(
        "trained {} iterations; artifacts in {}",
        t.outcome.log.records.len(),
        dir.path.display()
    );
    Ok(t.outcome)
}

/// The manifest's data, normalized with the statistics stored in the
/// checkpoint when present.
fn checkpoint_splits(m: &Manifest, ck: &Checkpoint, path: &Path) -> Result<DataSplits> {
    let mut splits = load_splits(m)?;
    let stats = match (ck.extra.get(MEAN_KEY), ck.extra.get(STD_KEY)) {
        (Some(a), Some(b)) => {
            let bad = |e: serde_json::Error| Error::Format {
                kind: "checkpoint",
                path: path.to_path_buf(),
                reason: format!("normalization statistics: {e}"),
            };
            Some((
                serde_json::from_str(a).map_err(bad)?,
                serde_json::from_str(b).map_err(bad)?,
            ))
        }
        _ => normalization(m, &splits.train)?,
    };
    if let Some((mean, std)) = &stats {
        splits.normalize(mean, std);
    }
    Ok(splits)
}

/// Evaluate a checkpoint (default: the run's own) on the manifest's query
/// and gallery; writes `eval.csv`.
pub fn run_eval(m: &Manifest, checkpoint: Option<&Path>) -> Result<Vec<(String, EvalReport)>> {
    let dir = RunDir::open(m)?;
    let path = checkpoint.map_or_else(|| dir.file("checkpoint.bnck"), Path::to_path_buf);
    let ck = Checkpoint::load(&path)?;
    let splits = checkpoint_splits(m, &ck, &path)?;
    let export = m.eval.export_embeddings.then_some(&dir);
    let reports = evaluate_model(&ck.model, m, &splits.query, &splits.gallery, export)?;
    fs::write(dir.file("eval.csv"), reports_csv(&reports, Some(&dir.hash)))?;
    Ok(reports)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub beta: f64,
    pub feature: FeatureKind,
    pub seeds: usize,
    pub rank1: f64,
    pub map: f64,
    pub r: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn train_and_eval(
    m: &Manifest,
    dir: &RunDir,
    splits: &DataSplits,
) -> Result<Vec<(String, EvalReport)>> {
    let t = train_into(m, dir, splits.clone())?;
    let reports = evaluate_model(
        &t.outcome.model,
        m,
        &t.splits.query,
        &t.splits.gallery,
        None,
    )?;
    fs::write(dir.file("eval.csv"), reports_csv(&reports, Some(&dir.hash)))?;
    Ok(reports)
}

/// Center-loss weight sweep: one row per (beta, feature), averaged over
/// `sweep.seeds`, evaluated with `sweep.metric`. Writes `sweep_beta.csv`.
pub fn run_sweep_beta(m: &Manifest) -> Result<Vec<SweepRow>> {
    let dir = RunDir::open(m)?;
    let splits = load_splits(m)?;
    let mut sub = m.clone();
    sub.eval.features = vec![FeatureKind::Ft, FeatureKind::Fi];
    sub.eval.metrics = vec![m.sweep_metric];
    sub.eval.rerank = super::RerankMode::Off;
    let mut rows = Vec::new();
    for &beta in &m.sweep_betas {
        let mut per_seed = Vec::new();
        for &seed in &m.sweep_seeds {
            let mut run = sub.clone();
            run.train.weights.beta = beta;
            run.train.tricks.center_loss = beta > 0.0;
            run.train.seed = seed;
            let d = dir.sub(&format!("sweep/beta-{beta:?}-seed-{seed}"))?;
            info!("sweep: beta {beta} seed {seed}");
            per_seed.push(train_and_eval(&run, &d, &splits)?);
        }
        for feature in [FeatureKind::Ft, FeatureKind::Fi] {
            let reps: Vec<&EvalReport> = per_seed
                .iter()
                .flat_map(|r| r.iter().map(|(_, rep)| rep))
                .filter(|r| r.feature == Some(feature))
                .collect();
            let r = reps
                .iter()
                .map(|r| r.cluster.map(|c| c.r))
                .collect::<Option<Vec<f64>>>()
                .ok_or_else(|| Error::Data("cluster ratio undefined on this test set".into()))?;
            rows.push(SweepRow {
                beta,
                feature,
                seeds: reps.len(),
                rank1: mean(reps.iter().map(|r| r.rank(1))),
                map: mean(reps.iter().map(|r| r.map)),
                r: mean(r.into_iter()),
            });
        }
    }
    let mut text = dir.stamp();
    text.push_str(SWEEP_HEADER);
    text.push('\n');
    for r in &rows {
        let _ = writeln!(
            text,
            "{:?},{},{},{:?},{:?},{:?}",
            r.beta, r.feature, r.seeds, r.rank1, r.map, r.r
        );
    }
    fs::write(dir.file("sweep_beta.csv"), text)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub condition: String,
    pub feature: FeatureKind,
    pub metric: Metric,
    pub seeds: usize,
    pub rank1: f64,
    pub map: f64,
    pub r: Option<f64>,
    pub norm_cv: Option<f64>,
}

/// Per-run reports of an ablation, keyed by condition and seed.
pub type AblationRuns = Vec<(String, u64, Vec<(String, EvalReport)>)>;

/// Trick or neck ablation; rows are seed means per (condition, feature,
/// metric). Writes `ablation.csv`.
pub fn run_ablate(m: &Manifest) -> Result<(Vec<AblationRow>, AblationRuns)> {
    let dir = RunDir::open(m)?;
    let splits = load_splits(m)?;
    let mut base = m.clone();
    base.eval.rerank = super::RerankMode::Off;
    let conditions: Vec<(String, Manifest)> = match m.ablate_kind {
        AblationKind::Tricks => m
            .ablate_presets
            .iter()
            .map(|p| {
                let mut c = base.clone();
                c.apply_preset(p)?;
                Ok((p.clone(), c))
            })
            .collect::<Result<_>>()?,
        AblationKind::Necks => m
            .ablate_necks
            .iter()
            .map(|&n| {
                let mut c = base.clone();
                c.train.tricks.neck = n;
                (n.to_string(), c)
            })
            .collect(),
    };
    let mut runs: AblationRuns = Vec::new();
    let mut rows = Vec::new();
    for (name, cond) in &conditions {
        let first = runs.len();
        for &seed in &m.ablate_seeds {
            let mut run = cond.clone();
            run.train.seed = seed;
            let d = dir.sub(&format!("ablate/{name}-seed-{seed}"))?;
            info!("ablate: {name} seed {seed}");
            runs.push((name.clone(), seed, train_and_eval(&run, &d, &splits)?));
        }
        let mine = &runs[first..];
        for (label, _) in &mine[0].2 {
            let reps: Vec<&EvalReport> = mine
                .iter()
                .filter_map(|(_, _, r)| r.iter().find(|(l, _)| l == label).map(|(_, rep)| rep))
                .collect();
            let opt_mean = |f: &dyn Fn(&EvalReport) -> Option<f64>| {
                reps.iter()
                    .map(|r| f(r))
                    .collect::<Option<Vec<f64>>>()
                    .map(|v| mean(v.into_iter()))
            };
            rows.push(AblationRow {
                condition: name.clone(),
                feature: reps[0].feature.expect("model reports name their feature"),
                metric: reps[0].metric,
                seeds: reps.len(),
                rank1: mean(reps.iter().map(|r| r.rank(1))),
                map: mean(reps.iter().map(|r| r.map)),
                r: opt_mean(&|r| r.cluster.map(|c| c.r)),
                norm_cv: opt_mean(&|r| r.norms.and_then(|n| n.cv)),
            });
        }
    }
    let mut text = dir.stamp();
    text.push_str(ABLATION_HEADER);
    text.push('\n');
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:?}"));
    for r in &rows {
        let _ = writeln!(
            text,
            "{},{},{},{},{:?},{:?},{},{}",
            r.condition,
            r.feature,
            r.metric,
            r.seeds,
            r.rank1,
            r.map,
            opt(r.r),
            opt(r.norm_cv)
        );
    }
    fs::write(dir.file("ablation.csv"), text)?;
    Ok((rows, runs))
}

/// Two-dimensional embeddings of query and gallery under the run's
/// checkpoint, as `scatter.csv`.
pub fn run_export_scatter(m: &Manifest, checkpoint: Option<&Path>) -> Result<PathBuf> {
    let dir = RunDir::open(m)?;
    let path = checkpoint.map_or_else(|| dir.file("checkpoint.bnck"), Path::to_path_buf);
    let ck = Checkpoint::load(&path)?;
    if ck.model.config().backbone.feature_dim != 2 {
        return Err(Error::config(
            "model.feature_dim",
            format!(
                "scatter export needs 2-d features, the checkpoint has {}",
                ck.model.config().backbone.feature_dim
            ),
        ));
    }
    let splits = checkpoint_splits(m, &ck, &path)?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for ds in [&splits.query, &splits.gallery] {
        data.extend_from_slice(ck.model.embed(ds, m.scatter_feature, m.eval.chunk)?.data());
        labels.extend(ds.labels());
    }
    let out = dir.file("scatter.csv");
    fs::write(&out, dir.stamp() + &scatter_csv(&data, 2, &labels)?)?;
    Ok(out)
}
