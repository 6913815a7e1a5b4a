//! Dataset assembly, the training loop and checkpoint evaluation.

use std::path::Path;
use std::time::Instant;

use crate::autodiff::{Graph, Tensor};
use crate::data::{self, adapt_to, ImageDataset, SplitProtocol, SplitStyle};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport, OpenLabel};
use crate::loss::{slc_term, total_loss, LossReport};
use crate::model::{init_prototypes, Encoder, Model};
use crate::optim::OptimState;

use super::checkpoint::{Checkpoint, EpochLog};
use super::config::{DatasetKind, RunConfig};

/// Images used by one run, already split into known and unknown parts.
#[derive(Debug, Clone)]
pub struct RunData {
    pub protocol: SplitProtocol,
    /// Known-class training images, labels relabelled onto `0..N`.
    pub train: ImageDataset,
    /// Index of each training image in the full training set.
    pub train_origin: Vec<usize>,
    /// Original labels of the full training set, for the leak audit.
    pub train_source_labels: Vec<usize>,
    /// Known-class test images, relabelled.
    pub test_known: ImageDataset,
    /// Every unknown test image (unknown classes and synthetic outliers).
    pub test_unknown: ImageDataset,
}

/// Train and test sets of a dataset in its native on-disk layout.
pub fn load_dataset(kind: DatasetKind, root: &Path) -> Result<(ImageDataset, ImageDataset)> {
    match kind {
        DatasetKind::Mnist => Ok((
            data::load_idx(
                root.join("train-images-idx3-ubyte"),
                root.join("train-labels-idx1-ubyte"),
            )?
            .with_name("mnist"),
            data::load_idx(root.join("t10k-images-idx3-ubyte"), root.join("t10k-labels-idx1-ubyte"))?
                .with_name("mnist"),
        )),
        DatasetKind::Cifar10 => {
            let train: Vec<_> = (1..=5).map(|i| root.join(format!("data_batch_{i}.bin"))).collect();
            Ok((
                data::load_cifar_binary(&train, 1)?,
                data::load_cifar_binary(&[root.join("test_batch.bin")], 1)?,
            ))
        }
        DatasetKind::Cifar100 => Ok((
            data::load_cifar_binary(&[root.join("train.bin")], 2)?,
            data::load_cifar_binary(&[root.join("test.bin")], 2)?,
        )),
    }
}

pub(crate) fn limit(ds: ImageDataset, n: Option<usize>) -> Result<ImageDataset> {
    match n {
        Some(n) if n < ds.len() => ds.take(n),
        _ => Ok(ds),
    }
}

/// Loads the configured datasets and applies the split protocol.
pub fn load_run_data(config: &RunConfig) -> Result<RunData> {
    let d = &config.data;
    let (train_full, test_full) = load_dataset(d.dataset, &d.root)?;
    let train_full = limit(train_full, d.train_limit)?;
    let test_full = limit(test_full, d.test_limit)?;
    prepare_run_data(config, &train_full, &test_full)
}

/// Applies the split and outlier settings of `config` to already loaded data.
pub fn prepare_run_data(config: &RunConfig, train_full: &ImageDataset, test_full: &ImageDataset) -> Result<RunData> {
    let d = &config.data;
    let shape = config.encoder.input_shape;
    let protocol = data::make_split(
        d.split,
        d.dataset.num_classes(),
        d.unknown_dataset.map(DatasetKind::num_classes),
        d.n_known,
        d.n_unknown,
        config.trial_seed(),
    )?;
    let (train, train_origin) = protocol.known_subset(train_full)?;
    let (test_known, _) = protocol.known_subset(test_full)?;

    let mut unknown_parts = Vec::new();
    match d.split {
        SplitStyle::Within | SplitStyle::OpennessSweep => unknown_parts.push(protocol.unknown_subset(test_full)?),
        SplitStyle::Cross => {
            let kind = d.unknown_dataset.expect("validated");
            let root = d
                .unknown_root
                .as_deref()
                .ok_or_else(|| Error::Config("cross split needs data.unknown_root".into()))?;
            let (_, other) = load_dataset(kind, root)?;
            let other = adapt_to(&limit(other, d.test_limit)?, shape)?;
            unknown_parts.push(protocol.unknown_subset(&other)?);
        }
        SplitStyle::Outlier => {}
    }
    if d.noise > 0 {
        unknown_parts.push(data::make_noise(d.noise, shape, config.seed)?);
    }
    if d.mnist_noise > 0 {
        let base = test_full.take(d.mnist_noise)?;
        unknown_parts.push(data::make_mnist_noise(&base, config.seed)?);
    }
    let refs: Vec<&ImageDataset> = unknown_parts.iter().collect();
    let mut test_unknown = ImageDataset::concat("unknown", &refs)?;
    test_unknown.labels = None;
    test_unknown.num_classes = 0;
    if train.is_empty() || test_known.is_empty() || test_unknown.is_empty() {
        return Err(Error::Protocol(format!(
            "empty split: {} train, {} known test, {} unknown test images",
            train.len(),
            test_known.len(),
            test_unknown.len()
        )));
    }
    Ok(RunData {
        protocol,
        train,
        train_origin,
        train_source_labels: train_full.labels()?.to_vec(),
        test_known,
        test_unknown,
    })
}

/// Embeds `images` in batches of `batch_size`.
pub fn encode_all(encoder: &Encoder<f32>, images: &Tensor<f32>, batch_size: usize) -> Result<Tensor<f32>> {
    let m = images.shape()[0];
    let d = encoder.embedding_dim();
    let mut out = Vec::with_capacity(m * d);
    let idx: Vec<usize> = (0..m).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = images.gather_rows(chunk)?;
        out.extend_from_slice(encoder.encode(&batch)?.features.data());
    }
    Tensor::new([m, d], out)
}

fn closed_accuracy_on(model: &Model<f32>, ds: &ImageDataset, batch_size: usize) -> Result<f64> {
    let features = encode_all(&model.encoder, &ds.images, batch_size)?;
    let scored = eval::score(&features, &model.prototypes.points)?;
    let pred: Vec<usize> = scored.iter().map(|s| s.nearest_class).collect();
    eval::closed_accuracy(&pred, ds.labels()?)
}

fn prototype_slc(model: &Model<f32>) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let p = g.input(model.prototypes.points.cast());
    let s = slc_term(&mut g, p)?;
    Ok(g.scalar(s))
}

/// Runs the full training loop and returns the final checkpoint.
/// `on_epoch` sees each epoch's log and wall-clock seconds as soon as it
/// is complete; timing stays out of the checkpoint so reruns are bitwise equal.
pub fn train(config: &RunConfig, data: &RunData, mut on_epoch: impl FnMut(&EpochLog, f64)) -> Result<Checkpoint> {
    let n = data.protocol.n_known();
    let encoder = Encoder::new(config.encoder.clone(), config.seed)?;
    let prototypes = init_prototypes(
        n,
        config.encoder.embedding_dim,
        config.prototypes.init,
        config.prototypes.scale,
        config.trial_seed(),
    )?;
    let mut model = Model { encoder, prototypes };
    let o = &config.optim;
    let schedule = o.schedule();
    let mut opt = OptimState::new(model.params(), schedule.initial_lr, o.momentum, o.weight_decay);
    let labels = data.train.labels()?;
    let mut trajectory = Vec::new();
    let mut epochs = Vec::new();

    for epoch in 0..schedule.total_epochs {
        let start = Instant::now();
        opt.lr = schedule.lr_at(epoch)?;
        let batches = data::epoch_batches(data.train.len(), o.batch_size, config.seed, epoch)?;
        data.protocol
            .audit(&data.train_source_labels, &data.train_origin, &batches)?;
        let mut sum = LossReport::default();
        for (b, batch) in batches.iter().enumerate() {
            let context = |e: Error| match e {
                Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}, batch {b}: {m}")),
                other => other,
            };
            let images = data.train.images.gather_rows(batch)?;
            let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let vars = model.register(&mut g);
            let x = g.input(images);
            let features = model.encoder.forward(&mut g, &vars.encoder, x).map_err(context)?;
            let (loss, report) =
                total_loss(&mut g, &config.loss, features, vars.prototypes, &batch_labels).map_err(context)?;
            g.backward(loss)?;
            model.collect_grads(&g, &vars)?;
            opt.step(&mut model.params_mut())?;
            if model.params().iter().any(|p| !p.all_finite()) {
                return Err(context(Error::Numeric("parameters became non-finite".into())));
            }
            trajectory.push(report.total);
            sum.total += report.total;
            sum.ce_term += report.ce_term;
            sum.pl_term += report.pl_term;
            sum.slc_term += report.slc_term;
        }
        let k = batches.len().max(1) as f64;
        let val_accuracy = if config.eval.validate {
            Some(closed_accuracy_on(&model, &data.test_known, o.batch_size)?)
        } else {
            None
        };
        let log = EpochLog {
            epoch,
            lr: opt.lr,
            loss: LossReport {
                total: sum.total / k,
                ce_term: sum.ce_term / k,
                pl_term: sum.pl_term / k,
                slc_term: sum.slc_term / k,
            },
            val_accuracy,
            prototype_slc: prototype_slc(&model)?,
        };
        on_epoch(&log, start.elapsed().as_secs_f64());
        epochs.push(log);
    }
    Ok(Checkpoint {
        config: config.clone(),
        protocol: data.protocol.clone(),
        epoch: schedule.total_epochs,
        model,
        velocity: opt.velocity().to_vec(),
        trajectory,
        epochs,
    })
}

/// Embeddings of a run's evaluation sets.
#[derive(Debug, Clone)]
pub struct Embedded {
    pub train: Tensor<f32>,
    pub known: Tensor<f32>,
    pub unknown: Tensor<f32>,
}

pub fn embed(model: &Model<f32>, data: &RunData, batch_size: usize) -> Result<Embedded> {
    Ok(Embedded {
        train: encode_all(&model.encoder, &data.train.images, batch_size)?,
        known: encode_all(&model.encoder, &data.test_known.images, batch_size)?,
        unknown: encode_all(&model.encoder, &data.test_unknown.images, batch_size)?,
    })
}

/// Checks that `data` splits classes the way the checkpoint was trained.
pub fn check_compatible(ckpt: &Checkpoint, data: &RunData) -> Result<()> {
    if ckpt.protocol.known != data.protocol.known {
        return Err(Error::Protocol(format!(
            "checkpoint was trained on classes {:?}, evaluation protocol has {:?}",
            ckpt.protocol.known, data.protocol.known
        )));
    }
    if ckpt.config.encoder.input_shape != data.train.image_shape() {
        return Err(Error::Protocol(
            "evaluation images do not match the checkpoint encoder".into(),
        ));
    }
    Ok(())
}

/// Closed accuracy, AUROC, macro-F1 at the calibrated threshold and
/// distance-to-centroid histograms.
pub fn evaluate(ckpt: &Checkpoint, data: &RunData, emb: &Embedded, percentile: f64, bins: usize) -> Result<EvalReport> {
    check_compatible(ckpt, data)?;
    let protos = &ckpt.model.prototypes.points;
    let n = data.protocol.n_known();
    let train_scores = eval::score(&emb.train, protos)?;
    let known = eval::score(&emb.known, protos)?;
    let unknown = eval::score(&emb.unknown, protos)?;

    let pred: Vec<usize> = known.iter().map(|s| s.nearest_class).collect();
    let truth = data.test_known.labels()?;
    let closed_accuracy = eval::closed_accuracy(&pred, truth)?;
    // Ranking by -distance is the same ordering as exp(-distance) but
    // cannot collapse far-away samples into underflow ties.
    let neg = |s: &[eval::ScoredSample]| s.iter().map(|x| -x.min_distance).collect::<Vec<_>>();
    let auroc = eval::auroc(&neg(&known), &neg(&unknown))?;

    let train_d: Vec<f64> = train_scores.iter().map(|s| s.min_distance).collect();
    let threshold = eval::calibrate_threshold(&train_d, percentile)?;
    let predictions: Vec<OpenLabel> = known
        .iter()
        .chain(&unknown)
        .map(|s| eval::predict_open(s, threshold))
        .collect();
    let truths: Vec<OpenLabel> = truth
        .iter()
        .map(|&l| OpenLabel::Known(l))
        .chain(std::iter::repeat_n(OpenLabel::Unknown, unknown.len()))
        .collect();
    let f1 = eval::macro_f1(&predictions, &truths, n)?;
    let center = ckpt.model.prototypes.centroid();
    let histograms = eval::distance_histograms(&emb.known, &emb.unknown, &center, bins)?;
    Ok(EvalReport {
        closed_accuracy,
        auroc,
        macro_f1: Some(f1.macro_f1),
        per_class_f1: Some(f1.per_class),
        threshold,
        percentile,
        openness: Some(data.protocol.openness),
        histograms: Some(histograms),
    })
}
