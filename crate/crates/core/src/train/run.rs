use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{bind, record_forward, Adam, Classifier, Model, ParamGroup, PlacementConfig, TrainConfig, Variant};
use crate::data::{batches, DatasetSplit, Image, LabeledFeatures};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, SplitMix64, Tape};
use crate::vit::VitConfig;

const DATA_SALT: u64 = 0xDA7A;
const EVAL_SALT: u64 = 0xE7A1;

/// FNV-1a over the little-endian sample indices of a batch.
pub fn batch_hash(indices: &[usize]) -> u64 {
    let bytes: Vec<u8> = indices.iter().flat_map(|&i| (i as u64).to_le_bytes()).collect();
    fnv1a(&bytes)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn predictions(logits: &Matrix) -> Vec<usize> {
    (0..logits.rows()).map(|r| argmax(logits.row(r))).collect()
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / pred.len() as f64
}

/// Loss and bookkeeping of one optimizer step, measured before the update.
#[derive(Clone, Debug)]
pub struct StepStats {
    pub loss: f64,
    pub accuracy: f64,
    /// Objective trace of the unroll at every placement block.
    pub objective_traces: BTreeMap<usize, Vec<f64>>,
}

/// Mini-batch Adam over all model parameters.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    adam: Adam,
}

impl Trainer {
    pub fn new(vit_config: VitConfig, config: TrainConfig, num_classes: usize) -> Result<Self> {
        vit_config.validate()?;
        config.validate(vit_config.num_layers)?;
        let placement = config.build_placement(vit_config.num_layers);
        let model = Model::init(vit_config, num_classes, placement, config.seed)?;
        Ok(Trainer {
            model,
            config,
            adam: Adam::default(),
        })
    }

    /// Mean cross-entropy of a batch under the current parameters.
    pub fn loss(&self, images: &[&Image], labels: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &self.model, &self.model.placement, false);
        let rec = record_forward(&mut tape, &self.model, &bound, images)?;
        let loss = tape.cross_entropy(rec.logits, labels)?;
        Ok(tape.value(loss)[(0, 0)])
    }

    /// Batch loss and its gradient for every parameter, in [`Model::visit_params_mut`] order.
    pub fn gradients(&self, images: &[&Image], labels: &[usize]) -> Result<(f64, Vec<Matrix>)> {
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &self.model, &self.model.placement, true);
        let rec = record_forward(&mut tape, &self.model, &bound, images)?;
        let loss = tape.cross_entropy(rec.logits, labels)?;
        let grads = tape.backward_scalar(loss)?;
        Ok((tape.value(loss)[(0, 0)], bound.params.iter().map(|&v| grads.get(v).clone()).collect()))
    }

    pub fn step(&mut self, images: &[&Image], labels: &[usize]) -> Result<StepStats> {
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &self.model, &self.model.placement, true);
        let rec = record_forward(&mut tape, &self.model, &bound, images)?;
        let loss_var = tape.cross_entropy(rec.logits, labels)?;
        let loss = tape.value(loss_var)[(0, 0)];
        if !loss.is_finite() {
            return Err(Error::usage(format!("training diverged: loss is {loss}")));
        }
        let acc = accuracy(&predictions(tape.value(rec.logits)), labels);
        let grads = tape.backward_scalar(loss_var)?;

        let lr = self.config.learning_rate;
        let prox_lr = lr * self.config.prox_lr_multiplier;
        let adam = &mut self.adam;
        adam.tick();
        let mut i = 0;
        self.model.visit_params_mut(&mut |group, p| {
            let rate = match group {
                ParamGroup::Backbone => lr,
                ParamGroup::Prox => prox_lr,
            };
            adam.update(i, p, grads.get(bound.params[i]), rate);
            i += 1;
        });
        self.model.clamp_step_sizes();
        Ok(StepStats {
            loss,
            accuracy: acc,
            objective_traces: rec.unrolls.into_iter().map(|(b, u)| (b, u.objective_trace)).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

/// Per-run summary. Holds no timing so identical runs serialize identically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub variant: Variant,
    pub placement: Vec<usize>,
    pub epochs: Vec<EpochRecord>,
    pub final_train_accuracy: f64,
    pub final_test_accuracy: Option<f64>,
    /// Mean unroll objective per iteration over the last epoch, keyed by block.
    pub objective_traces: BTreeMap<usize, Vec<f64>>,
    /// Hash over every batch of every epoch, in order.
    pub data_order_digest: String,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub batch_hash: String,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub report: RunReport,
    pub log: Vec<LogEntry>,
    pub wall_clock_secs: f64,
}

/// Trains on `data.train`, evaluating on `data.test` after every epoch.
/// The last batch of an epoch joins the previous one when it holds a single
/// sample, for every variant, so all arms of a sweep see the same batches.
pub fn train(vit_config: &VitConfig, config: &TrainConfig, data: &DatasetSplit) -> Result<TrainOutcome> {
    let start = Instant::now();
    if data.train.is_empty() {
        return Err(Error::usage("training split is empty"));
    }
    let mut trainer = Trainer::new(vit_config.clone(), config.clone(), data.num_classes)?;
    let mut batch_rng = SplitMix64::derived(config.seed, DATA_SALT);
    let mut log = Vec::new();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut traces = BTreeMap::new();
    let mut digest = Vec::new();
    let mut step = 0;
    for epoch in 1..=config.epochs {
        let order = batches(&data.train, config.batch_size, &mut batch_rng, true)?;
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0.0, 0usize);
        let mut trace_sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
        for b in &order {
            let (images, labels) = data.gather(b);
            let stats = trainer.step(&images, &labels)?;
            step += 1;
            let h = batch_hash(b);
            digest.extend_from_slice(&h.to_le_bytes());
            loss_sum += stats.loss * b.len() as f64;
            correct += stats.accuracy * b.len() as f64;
            seen += b.len();
            for (blk, t) in stats.objective_traces {
                let e = trace_sums.entry(blk).or_insert_with(|| (vec![0.0; t.len()], 0));
                e.0.iter_mut().zip(&t).for_each(|(a, v)| *a += v);
                e.1 += 1;
            }
            log.push(LogEntry {
                epoch,
                step,
                loss: stats.loss,
                accuracy: stats.accuracy,
                batch_hash: format!("{h:016x}"),
            });
        }
        traces = trace_sums
            .into_iter()
            .map(|(b, (s, n))| (b, s.into_iter().map(|v| v / n as f64).collect()))
            .collect();
        let test_accuracy = if data.test.is_empty() {
            None
        } else {
            let placement = trainer.model.placement.clone();
            Some(evaluate(&trainer.model, data, &data.test, &placement, config.batch_size, config.seed)?.accuracy)
        };
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_accuracy: correct / seen as f64,
            test_accuracy,
        });
    }
    let last = epochs.last();
    let report = RunReport {
        seed: config.seed,
        variant: config.variant,
        placement: trainer.model.placement.blocks(),
        final_train_accuracy: last.map_or(0.0, |e| e.train_accuracy),
        final_test_accuracy: last.and_then(|e| e.test_accuracy),
        epochs,
        objective_traces: traces,
        data_order_digest: format!("{:016x}", fnv1a(&digest)),
    };
    Ok(TrainOutcome {
        model: trainer.model,
        report,
        log,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// Predictions and exported features over a set of samples.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Sample indices in evaluation order; columns of the matrices below follow it.
    pub order: Vec<usize>,
    pub labels: Vec<usize>,
    pub predictions: Vec<usize>,
    /// Classifier input, d x N.
    pub features: Matrix,
    /// Block whose unroll is exported: the deepest placement, `None` for the plain encoder.
    pub block: Option<usize>,
    /// Class tokens entering that unroll (final-layer tokens without a placement).
    pub pre: Matrix,
    /// `Ẑ` of that unroll (equal to `pre` without a placement).
    pub post: Matrix,
    /// Block-diagonal N x N matrix of the per-batch `W`, so that `post = pre · coefficients`.
    pub coefficients: Option<Matrix>,
}

impl Evaluation {
    pub fn pre_features(&self) -> LabeledFeatures {
        LabeledFeatures {
            features: self.pre.clone(),
            labels: self.labels.clone(),
        }
    }

    pub fn post_features(&self) -> LabeledFeatures {
        LabeledFeatures {
            features: self.post.clone(),
            labels: self.labels.clone(),
        }
    }
}

struct BatchResult {
    logits: Matrix,
    features: Matrix,
    pre: Matrix,
    post: Matrix,
    w: Option<Matrix>,
}

/// Runs the model over `indices` in batches of `batch_size` drawn by a seeded
/// shuffle. With an active placement a trailing single-sample batch is merged
/// into the previous one. Predictions depend on batch composition whenever a
/// placement is active.
pub fn evaluate(
    model: &Model,
    split: &DatasetSplit,
    indices: &[usize],
    placement: &PlacementConfig,
    batch_size: usize,
    seed: u64,
) -> Result<Evaluation> {
    if indices.is_empty() {
        return Err(Error::usage("nothing to evaluate"));
    }
    placement.validate(model.vit_config.num_layers)?;
    let mut rng = SplitMix64::derived(seed, EVAL_SALT);
    let groups = batches(indices, batch_size, &mut rng, placement.is_active())?;
    let deepest = placement.entries.keys().next_back().copied();
    let last = model.vit_config.num_layers;
    let results: Vec<BatchResult> = groups
        .par_iter()
        .map(|b| -> Result<BatchResult> {
            let (images, _) = split.gather(b);
            let mut tape = Tape::new();
            let bound = bind(&mut tape, model, placement, false);
            let rec = record_forward(&mut tape, model, &bound, &images)?;
            let logits = tape.value(rec.logits).clone();
            let features = match rec.unrolls.get(&last) {
                Some(u) => tape.value(u.z_hat).clone(),
                None => tape.value(rec.final_tokens).clone(),
            };
            let (pre, post, w) = match deepest.and_then(|d| rec.unrolls.get(&d)) {
                Some(u) => (
                    tape.value(u.z).clone(),
                    tape.value(u.z_hat).clone(),
                    Some(tape.value(u.w).clone()),
                ),
                None => (features.clone(), features.clone(), None),
            };
            Ok(BatchResult {
                logits,
                features,
                pre,
                post,
                w,
            })
        })
        .collect::<Result<_>>()?;

    let order: Vec<usize> = groups.concat();
    let n = order.len();
    let labels: Vec<usize> = order.iter().map(|&i| split.labels[i]).collect();
    let mut preds = Vec::with_capacity(n);
    let cat = |f: &dyn Fn(&BatchResult) -> &Matrix| -> Result<Matrix> {
        let parts: Vec<&Matrix> = results.iter().map(f).collect();
        Matrix::concat_cols(&parts)
    };
    let features = cat(&|r| &r.features)?;
    let pre = cat(&|r| &r.pre)?;
    let post = cat(&|r| &r.post)?;
    let mut coefficients = deepest.map(|_| Matrix::zeros(n, n));
    let mut offset = 0;
    for r in &results {
        preds.extend(predictions(&r.logits));
        let m = r.logits.rows();
        if let (Some(c), Some(w)) = (coefficients.as_mut(), r.w.as_ref()) {
            for i in 0..m {
                for j in 0..m {
                    c[(offset + i, offset + j)] = w[(i, j)];
                }
            }
        }
        offset += m;
    }
    Ok(Evaluation {
        accuracy: accuracy(&preds, &labels),
        order,
        labels,
        predictions: preds,
        features,
        block: deepest,
        pre,
        post,
        coefficients,
    })
}

/// Parses `"∅;2;L"`-style placement lists: `;` separates placements, `+` or `,`
/// separates blocks within one, `L` is the last block, and `∅`, `none` or an
/// empty entry is the plain encoder.
pub fn parse_placements(spec: &str, num_layers: usize) -> Result<Vec<Vec<usize>>> {
    spec.split(';')
        .map(|entry| {
            let entry = entry.trim();
            if entry.is_empty() || entry == "∅" || entry.eq_ignore_ascii_case("none") {
                return Ok(Vec::new());
            }
            let mut blocks = entry
                .split(['+', ','])
                .map(|t| {
                    let t = t.trim();
                    let b = if t == "L" {
                        num_layers
                    } else {
                        t.parse::<usize>()
                            .map_err(|_| Error::config(format!("bad block `{t}` in placement `{entry}`")))?
                    };
                    if b == 0 || b > num_layers {
                        return Err(Error::config(format!("placement block {b} outside 1..={num_layers}")));
                    }
                    Ok(b)
                })
                .collect::<Result<Vec<_>>>()?;
            blocks.sort_unstable();
            blocks.dedup();
            Ok(blocks)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub blocks: Vec<usize>,
    pub accuracy: f64,
    pub seed: u64,
    pub data_order_digest: String,
}

/// Trains one model per placement with the same seed and batch order. An empty
/// placement trains the baseline; the others use `base.variant`.
pub fn placement_sweep(
    vit_config: &VitConfig,
    base: &TrainConfig,
    data: &DatasetSplit,
    placements: &[Vec<usize>],
) -> Result<Vec<SweepRow>> {
    if base.variant == Variant::Baseline && placements.iter().any(|p| !p.is_empty()) {
        return Err(Error::config("a sweep over placements needs a prox variant"));
    }
    placements
        .par_iter()
        .map(|p| {
            let mut cfg = base.clone();
            if p.is_empty() {
                cfg.variant = Variant::Baseline;
                cfg.placement = None;
            } else {
                cfg.placement = Some(p.clone());
            }
            let out = train(vit_config, &cfg, data)?;
            Ok(SweepRow {
                blocks: p.clone(),
                accuracy: out.report.final_test_accuracy.unwrap_or(out.report.final_train_accuracy),
                seed: cfg.seed,
                data_order_digest: out.report.data_order_digest,
            })
        })
        .collect()
}

/// CSV with columns `blocks,accuracy,seed`; blocks are `+`-joined, `none` for the baseline.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("blocks,accuracy,seed\n");
    for r in rows {
        let blocks = if r.blocks.is_empty() {
            "none".to_string()
        } else {
            r.blocks.iter().map(|b| b.to_string()).collect::<Vec<_>>().join("+")
        };
        out.push_str(&format!("{blocks},{},{}\n", r.accuracy, r.seed));
    }
    out
}

/// Full-batch Adam on a linear classifier over fixed features. Returns the
/// classifier and the training accuracy before every step and after the last.
pub fn train_classifier(data: &LabeledFeatures, lr: f64, steps: usize, seed: u64) -> Result<(Classifier, Vec<f64>)> {
    if data.labels.is_empty() {
        return Err(Error::usage("no samples"));
    }
    let mut clf = Classifier::init(data.features.rows(), data.num_classes(), &mut SplitMix64::new(seed));
    let zt = data.features.transpose();
    let mut adam = Adam::default();
    let mut history = Vec::with_capacity(steps + 1);
    for _ in 0..=steps {
        let mut tape = Tape::new();
        let z = tape.constant(zt.clone());
        let w = tape.param(clf.weight.clone());
        let b = tape.param(clf.bias.clone());
        let logits = tape.matmul(z, w)?;
        let logits = tape.add_row_broadcast(logits, b)?;
        history.push(accuracy(&predictions(tape.value(logits)), &data.labels));
        if history.len() > steps {
            break;
        }
        let loss = tape.cross_entropy(logits, &data.labels)?;
        let g = tape.backward_scalar(loss)?;
        adam.step(&mut [&mut clf.weight, &mut clf.bias], &[g.get(w), g.get(b)], &[lr, lr]);
    }
    Ok((clf, history))
}
