use std::io::Write;
use std::time::Instant;

use mmi_ssl_core::embed::{normalize_batch, EmbeddingBatch};
use mmi_ssl_core::eval::{
    collapse_metrics, knn_accuracy, linear_probe, CollapseReport, ProbeReport,
};
use mmi_ssl_core::loss::RescaleStates;
use mmi_ssl_core::siamese::{encode, train_step, EncoderState};
use mmi_ssl_core::synth::{augment_batch, Dataset};
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::ExperimentConfig;

pub const METRICS_HEADER: &str = "step,epoch,lr,loss_total,loss_align,loss_z,loss_zp,lmin_align,lmax_align,lmin_z,lmax_z,lmin_zp,lmax_zp,grad_norm,ms";

/// One optimizer application. Loss columns average the batches that
/// contributed to the update; tracked extremes are read after the last one.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_align: f64,
    pub loss_z: f64,
    pub loss_zp: f64,
    pub lmin_align: f64,
    pub lmax_align: f64,
    pub lmin_z: f64,
    pub lmax_z: f64,
    pub lmin_zp: f64,
    pub lmax_zp: f64,
    pub grad_norm: f64,
    pub ms: f64,
}

pub fn write_metrics_csv<W: Write>(out: W, rows: &[MetricsRow]) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(METRICS_HEADER.split(','))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub struct TrainRun {
    pub state: EncoderState,
    pub rescale: RescaleStates,
    pub rows: Vec<MetricsRow>,
}

pub fn batches_per_epoch(cfg: &ExperimentConfig, dataset: &Dataset) -> usize {
    dataset.len() / cfg.train.batch_size
}

/// Trains from scratch. Each epoch shuffles the sample order and drops the
/// incomplete last batch; all randomness comes from one stream seeded by
/// `train.seed`.
pub fn run_training(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    mut progress: impl FnMut(&MetricsRow),
) -> mmi_ssl_core::Result<TrainRun> {
    let tc = &cfg.train;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut state = EncoderState::init(&cfg.model, tc.momentum_encoder, &mut rng)?;
    let mut rescale = RescaleStates::default();
    let bpe = batches_per_epoch(cfg, dataset);
    let sched = tc.schedule(bpe);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rows = Vec::with_capacity(tc.epochs * bpe / tc.grad_accum_steps);
    let mut sums = [0.0; 4];
    let mut pending = 0usize;
    let mut clock = Instant::now();

    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks_exact(tc.batch_size) {
            let (x, xp) = augment_batch(dataset, chunk, &cfg.augment, &mut rng);
            let out = train_step(&mut state, x.view(), xp.view(), tc, &sched, &mut rescale)?;
            let l = &out.loss;
            for (s, v) in sums
                .iter_mut()
                .zip([l.total, l.term_align, l.term_z, l.term_zprime])
            {
                *s += v;
            }
            pending += 1;
            let Some(grad_norm) = out.applied_grad_norm else {
                continue;
            };
            let ms = if cfg.metrics.wall_clock {
                let now = Instant::now();
                let ms = now.duration_since(clock).as_secs_f64() * 1e3;
                clock = now;
                ms
            } else {
                0.0
            };
            let k = pending as f64;
            let row = MetricsRow {
                step: state.step,
                epoch,
                lr: out.lr,
                loss_total: sums[0] / k,
                loss_align: sums[1] / k,
                loss_z: sums[2] / k,
                loss_zp: sums[3] / k,
                lmin_align: rescale.align.lambda_min,
                lmax_align: rescale.align.lambda_max,
                lmin_z: rescale.z.lambda_min,
                lmax_z: rescale.z.lambda_max,
                lmin_zp: rescale.zprime.lambda_min,
                lmax_zp: rescale.zprime.lambda_max,
                grad_norm,
                ms,
            };
            progress(&row);
            rows.push(row);
            sums = [0.0; 4];
            pending = 0;
        }
    }
    Ok(TrainRun {
        state,
        rescale,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub probe: ProbeReport,
    pub knn_top1: f64,
    pub collapse: CollapseReport,
}

/// Embeds the whole dataset in one batch (batch statistics then come from
/// the full dataset), measures collapse on the raw embeddings and runs the
/// linear probe and k-NN on the standardized ones.
pub fn evaluate(
    cfg: &ExperimentConfig,
    state: &EncoderState,
    dataset: &Dataset,
) -> mmi_ssl_core::Result<EvalReport> {
    let raw = encode(state, dataset.samples.t(), false)?;
    let collapse = collapse_metrics(&raw)?;
    let features: Array2<f64> = normalize_batch(&raw, cfg.train.norm_eps)?
        .into_data()
        .reversed_axes();
    let probe = linear_probe(features.view(), &dataset.labels, &cfg.eval.probe)?;
    let knn_top1 = knn_on_probe_split(cfg, &features, &dataset.labels)?;
    Ok(EvalReport {
        probe,
        knn_top1,
        collapse,
    })
}

/// k-NN accuracy on the same train/test split the probe uses.
fn knn_on_probe_split(
    cfg: &ExperimentConfig,
    features: &Array2<f64>,
    labels: &[usize],
) -> mmi_ssl_core::Result<f64> {
    let n = labels.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.eval.probe.seed));
    let n_train = ((n as f64) * cfg.eval.probe.split_ratio).floor() as usize;
    let (train, test) = order.split_at(n_train);
    let pick = |idx: &[usize]| {
        (
            features.select(Axis(0), idx),
            idx.iter().map(|&i| labels[i]).collect::<Vec<_>>(),
        )
    };
    let (xtr, ytr) = pick(train);
    let (xte, yte) = pick(test);
    let k = cfg.eval.knn_k.min(train.len().max(1));
    knn_accuracy(xtr.view(), &ytr, xte.view(), &yte, k)
}

/// Raw embeddings of the full dataset (`d × n`), for callers that want
/// their own diagnostics.
pub fn embed_dataset(
    state: &EncoderState,
    dataset: &Dataset,
) -> mmi_ssl_core::Result<EmbeddingBatch> {
    encode(state, dataset.samples.t(), false)
}
