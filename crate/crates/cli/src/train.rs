//! Training loop and batch evaluation.
//!
//! Batches are split into `run.workers` contiguous chunks; each worker runs
//! forward + backward on its own graph and the partial gradients are combined
//! in chunk-index order, so results are bit-reproducible for a given config
//! regardless of thread scheduling. Chunking is part of the config, not the
//! machine.

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::metrics::{MetricsRecord, MetricsWriter};
use loupe_core::backbone::{self, ModelState};
use loupe_core::data::{self, Dataset, SyntheticSample};
use loupe_core::graph::{real, Graph, Real, Shape};
use loupe_core::optim::{self, LossConfig, OptimState};
use loupe_core::params::ParamSet;
use loupe_core::rng::{self, StreamKind};
use loupe_core::viz;
use std::path::PathBuf;
use std::time::Instant;

/// Split metrics; localization fields are present only for models with the
/// attention module enabled.
#[derive(Clone, Debug, serde::Serialize)]
pub struct EvalMetrics {
    pub n: usize,
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_attention_mass: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pointing_hit_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iou_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub border_mass: Option<f64>,
}

pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
    pub best_val_accuracy: f64,
    pub test: EvalMetrics,
    pub epochs_run: usize,
    pub out_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub metrics_path: PathBuf,
}

struct ChunkGrads<T> {
    grads: Vec<Vec<T>>,
    total: f64,
    ce: f64,
    sparsity: f64,
    n: usize,
}

fn images_leaf<T: Real>(
    g: &mut Graph<T>,
    samples: &[SyntheticSample],
) -> loupe_core::Result<loupe_core::Var> {
    let s = samples[0].size;
    let mut buf = Vec::with_capacity(samples.len() * 3 * s * s);
    for sample in samples {
        buf.extend(sample.image.iter().map(|&v| real::<T>(v as f64)));
    }
    g.leaf(buf, Shape::nchw(samples.len(), 3, s, s), false)
}

fn chunk_gradients<T: Real>(
    state: &ModelState<T>,
    samples: &[SyntheticSample],
    loss_cfg: &LossConfig,
) -> loupe_core::Result<ChunkGrads<T>> {
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let mut g = Graph::new();
    let img = images_leaf(&mut g, samples)?;
    let fwd = backbone::forward(&mut g, state, img, true)?;
    let loss = optim::composite_loss(&mut g, fwd.logits, &labels, fwd.map, loss_cfg)?;
    let total = g.scalar(loss.total).to_f64().unwrap_or(f64::NAN);
    g.backward(loss.total)?;
    let grads = fwd
        .param_vars
        .iter()
        .map(|&v| g.grad(v).expect("parameters require grad").to_vec())
        .collect();
    Ok(ChunkGrads {
        grads,
        total,
        ce: loss.ce,
        sparsity: loss.sparsity,
        n: samples.len(),
    })
}

struct BatchLoss {
    total: f64,
    ce: f64,
    sparsity: f64,
}

/// Gradients of the batch-mean loss, computed over worker chunks and
/// combined in fixed chunk order.
fn batch_gradients<T: Real>(
    state: &ModelState<T>,
    samples: &[SyntheticSample],
    loss_cfg: &LossConfig,
    workers: usize,
) -> Result<(Vec<Vec<T>>, BatchLoss)> {
    let n = samples.len();
    let chunk_size = n.div_ceil(workers.max(1)).max(1);
    let results: Vec<loupe_core::Result<ChunkGrads<T>>> = if workers <= 1 || n <= chunk_size {
        vec![chunk_gradients(state, samples, loss_cfg)]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = samples
                .chunks(chunk_size)
                .map(|chunk| scope.spawn(move || chunk_gradients(state, chunk, loss_cfg)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker panicked"))
                .collect()
        })
    };

    let mut grads: Option<Vec<Vec<T>>> = None;
    let mut loss = BatchLoss {
        total: 0.0,
        ce: 0.0,
        sparsity: 0.0,
    };
    for result in results {
        let chunk = result?;
        let weight = real::<T>(chunk.n as f64 / n as f64);
        loss.total += chunk.total * chunk.n as f64 / n as f64;
        loss.ce += chunk.ce * chunk.n as f64 / n as f64;
        loss.sparsity += chunk.sparsity * chunk.n as f64 / n as f64;
        match grads.as_mut() {
            None => {
                let mut scaled = chunk.grads;
                for arr in scaled.iter_mut() {
                    for v in arr.iter_mut() {
                        *v = *v * weight;
                    }
                }
                grads = Some(scaled);
            }
            Some(acc) => {
                for (dst, src) in acc.iter_mut().zip(&chunk.grads) {
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = *d + s * weight;
                    }
                }
            }
        }
    }
    Ok((grads.expect("at least one chunk"), loss))
}

struct ChunkEval {
    n: usize,
    correct: usize,
    mass: f64,
    hits: usize,
    iou: f64,
    border: f64,
    has_map: bool,
}

fn chunk_eval<T: Real>(
    state: &ModelState<T>,
    samples: &[SyntheticSample],
) -> loupe_core::Result<ChunkEval> {
    let mut g = Graph::new();
    let img = images_leaf(&mut g, samples)?;
    let fwd = backbone::forward(&mut g, state, img, false)?;
    let k = state.config.num_classes;
    let logits = g.data(fwd.logits);
    let mut out = ChunkEval {
        n: samples.len(),
        correct: 0,
        mass: 0.0,
        hits: 0,
        iou: 0.0,
        border: 0.0,
        has_map: fwd.map.is_some(),
    };
    for (i, sample) in samples.iter().enumerate() {
        let row = &logits[i * k..(i + 1) * k];
        let pred = argmax(row);
        if pred == sample.label {
            out.correct += 1;
        }
    }
    if let Some(map_var) = fwd.map {
        let ms = g.shape(map_var);
        let (mh, mw) = (ms.h(), ms.w());
        let map = g.data(map_var);
        let s = samples[0].size;
        for (i, sample) in samples.iter().enumerate() {
            let plane = &map[i * mh * mw..(i + 1) * mh * mw];
            let mean: f64 = plane.iter().map(|v| v.to_f64().unwrap_or(0.0)).sum::<f64>()
                / (mh * mw) as f64;
            out.mass += mean;
            out.border += viz::border_mass(plane, mh, mw);
            let (up, _) = viz::upsample_bilinear(plane, Shape::nchw(1, 1, mh, mw), (s, s))?;
            let gt = viz::BinaryMask::from_bytes(&sample.mask, s, s)?;
            if viz::pointing_game(&up, s, s, &gt)? {
                out.hits += 1;
            }
            let top = viz::top_fraction_mask(&up, s, s, 0.05)?;
            out.iou += viz::attention_iou(&top, &gt)?;
        }
    }
    Ok(out)
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Evaluate a model over a sample list (already eval-transformed).
pub fn evaluate<T: Real>(
    state: &ModelState<T>,
    samples: &[SyntheticSample],
    workers: usize,
) -> Result<EvalMetrics> {
    if samples.is_empty() {
        return Err(CliError::Config("cannot evaluate an empty split".into()));
    }
    let n = samples.len();
    let chunk_size = n.div_ceil(workers.max(1)).max(1);
    let results: Vec<loupe_core::Result<ChunkEval>> = if workers <= 1 || n <= chunk_size {
        vec![chunk_eval(state, samples)]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = samples
                .chunks(chunk_size)
                .map(|chunk| scope.spawn(move || chunk_eval(state, chunk)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker panicked"))
                .collect()
        })
    };
    let mut counted = 0usize;
    let mut correct = 0usize;
    let mut mass = 0.0;
    let mut hits = 0usize;
    let mut iou = 0.0;
    let mut border = 0.0;
    let mut has_map = false;
    for result in results {
        let c = result?;
        counted += c.n;
        correct += c.correct;
        mass += c.mass;
        hits += c.hits;
        iou += c.iou;
        border += c.border;
        has_map = c.has_map;
    }
    debug_assert_eq!(counted, n);
    let nf = counted as f64;
    Ok(EvalMetrics {
        n: counted,
        accuracy: correct as f64 / nf,
        mean_attention_mass: has_map.then_some(mass / nf),
        pointing_hit_rate: has_map.then_some(hits as f64 / nf),
        iou_mean: has_map.then_some(iou / nf),
        border_mass: has_map.then_some(border / nf),
    })
}

/// Train per the config on an in-memory dataset; precision-dispatched entry.
pub fn run_train(cfg: &RunConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    match cfg.precision() {
        loupe_core::Precision::Single => train_t::<f32>(cfg, dataset),
        loupe_core::Precision::Double => train_t::<f64>(cfg, dataset),
    }
}

fn transform_split(
    samples: &[SyntheticSample],
    cfg: &RunConfig,
) -> loupe_core::Result<Vec<SyntheticSample>> {
    let et = cfg.eval_transform();
    samples.iter().map(|s| data::eval_transform(s, &et)).collect()
}

fn train_t<T: Real>(cfg: &RunConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    let bcfg = cfg.backbone_config();
    let mut state = backbone::build::<T>(&bcfg)?;
    let loss_cfg = cfg.loss_config();
    let sched = cfg.schedule_config();
    let mut opt = OptimState::new(
        &state.params,
        cfg.optim.lr,
        cfg.optim.weight_decay,
        cfg.optim.beta1,
        cfg.optim.beta2,
    );

    if dataset.spec.image_size != cfg.data.image_size {
        return Err(CliError::Config(format!(
            "dataset image size {} does not match config {}",
            dataset.spec.image_size, cfg.data.image_size
        )));
    }

    let out_dir = PathBuf::from(&cfg.run.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut writer = MetricsWriter::create(&metrics_path, cfg)?;
    let checkpoint_dir = out_dir.join("checkpoint");

    let val = transform_split(&dataset.val, cfg)?;
    let test = transform_split(&dataset.test, cfg)?;
    let n_train = dataset.train.len();
    let acfg = cfg.augment_config();
    let workers = cfg.run.workers;

    let mut history: Vec<f64> = Vec::new();
    let mut best_val = f64::NEG_INFINITY;
    let mut best_params: ParamSet<f32> = state.params.cast();
    let mut records: Vec<MetricsRecord> = Vec::new();
    let mut final_test: Option<EvalMetrics> = None;

    for epoch in 0..sched.total_epochs {
        let started = Instant::now();
        opt.lr = optim::cosine_lr(epoch, &sched)?;

        let mut order: Vec<usize> = (0..n_train).collect();
        let mut shuffle_rng = rng::stream(cfg.run.seed, StreamKind::Shuffle, epoch as u64);
        rng::shuffle(&mut shuffle_rng, &mut order);

        let (mut loss_sum, mut ce_sum, mut sp_sum, mut seen) = (0.0, 0.0, 0.0, 0usize);
        for batch in order.chunks(sched.batch_size) {
            let samples: Vec<SyntheticSample> = batch
                .iter()
                .map(|&i| {
                    let mut arng = rng::stream(
                        cfg.run.seed,
                        StreamKind::Augment,
                        (epoch * n_train + i) as u64,
                    );
                    data::augment(&dataset.train[i], &mut arng, &acfg)
                })
                .collect::<loupe_core::Result<_>>()?;
            let (grads, loss) = batch_gradients(&state, &samples, &loss_cfg, workers)?;
            optim::lion_step(&mut state.params, &grads, &mut opt)?;
            state.step += 1;
            let w = samples.len() as f64;
            loss_sum += loss.total * w;
            ce_sum += loss.ce * w;
            sp_sum += loss.sparsity * w;
            seen += samples.len();
        }

        let val_metrics = evaluate(&state, &val, workers)?;
        history.push(val_metrics.accuracy);
        if val_metrics.accuracy > best_val {
            best_val = val_metrics.accuracy;
            best_params = state.params.cast();
            checkpoint::save(&checkpoint_dir, &best_params, cfg)?;
        }

        let stop =
            optim::early_stop(&history, sched.patience) || epoch + 1 == sched.total_epochs;
        let test_accuracy = if stop {
            let best_state = ModelState {
                config: bcfg.clone(),
                params: best_params.cast::<T>(),
                step: state.step,
            };
            let tm = evaluate(&best_state, &test, workers)?;
            let acc = tm.accuracy;
            final_test = Some(tm);
            Some(acc)
        } else {
            None
        };

        let record = MetricsRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / seen as f64,
            train_ce: ce_sum / seen as f64,
            train_sparsity: sp_sum / seen as f64,
            val_accuracy: val_metrics.accuracy,
            test_accuracy,
            mean_attention_mass: val_metrics.mean_attention_mass,
            pointing_hit_rate: val_metrics.pointing_hit_rate,
            iou_mean: val_metrics.iou_mean,
            lr: opt.lr,
            wall_seconds: None,
        };
        writer.append(&record)?;
        println!(
            "epoch {:>3}/{} loss {:.4} val_acc {:.4}{} lr {:.2e} [{:.1}s]",
            epoch + 1,
            sched.total_epochs,
            record.train_loss,
            record.val_accuracy,
            record
                .test_accuracy
                .map(|t| format!(" test_acc {t:.4}"))
                .unwrap_or_default(),
            record.lr,
            started.elapsed().as_secs_f64(),
        );
        records.push(record);
        if stop {
            break;
        }
    }

    let epochs_run = records.len();
    Ok(TrainOutcome {
        records,
        best_val_accuracy: best_val,
        test: final_test.expect("final epoch always evaluates the test split"),
        epochs_run,
        out_dir,
        checkpoint_dir,
        metrics_path,
    })
}
