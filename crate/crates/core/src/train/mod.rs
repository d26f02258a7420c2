//! End-to-end classification: encoder, optional proximal self-expression after
//! chosen blocks, and a linear classifier trained with cross-entropy.
//!
//! When a block carries a placement, the `d x m` class-token matrix `Z` of the
//! batch after that block is replaced by `Ẑ = Z W_{k_max}`, with the unroll
//! started from `W_0 = I` unless configured otherwise. Patch tokens are left untouched. A placement on the
//! last block feeds `Ẑ` straight into the classifier.

mod optim;
mod run;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use optim::{Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use run::{
    batch_hash, evaluate, parse_placements, placement_sweep, sweep_csv, train, train_classifier, EpochRecord,
    Evaluation, LogEntry, RunReport, StepStats, SweepRow, TrainOutcome, Trainer,
};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, SplitMix64, Tape, Var};
use crate::prox::{default_step, default_step_recorded, unroll_recorded, FeatureMatrix, ProxSchedule, RecordedSchedule};
use crate::vit::{encode_recorded, load_checkpoint, save_checkpoint, VitConfig, VitParams, VitWeights};
use crate::data::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Baseline,
    FixedProx,
    LearnableProx,
}

/// Step rule of the unroll at one placement.
#[derive(Clone, Debug, PartialEq)]
pub enum PlacementSchedule {
    /// `γ = 1/σ_max(Z)²` computed from each batch (and differentiated through), identity preconditioners.
    Fixed { lambda: f64, k_max: usize, zero_diagonal: bool },
    /// Trainable `γ_k` and `R_k`.
    Learnable(ProxSchedule),
}

impl PlacementSchedule {
    pub fn k_max(&self) -> usize {
        match self {
            PlacementSchedule::Fixed { k_max, .. } => *k_max,
            PlacementSchedule::Learnable(s) => s.k_max(),
        }
    }

    pub fn lambda(&self) -> f64 {
        match self {
            PlacementSchedule::Fixed { lambda, .. } => *lambda,
            PlacementSchedule::Learnable(s) => s.lambda,
        }
    }

    pub fn zero_diagonal(&self) -> bool {
        match self {
            PlacementSchedule::Fixed { zero_diagonal, .. } => *zero_diagonal,
            PlacementSchedule::Learnable(s) => s.zero_diagonal,
        }
    }

    /// Concrete schedule for a feature batch.
    pub fn resolve(&self, z: &FeatureMatrix, step: LearnableStep) -> Result<ProxSchedule> {
        match self {
            PlacementSchedule::Fixed {
                lambda,
                k_max,
                zero_diagonal,
            } => Ok(ProxSchedule::fixed(default_step(z)?, *k_max, *lambda).with_zero_diagonal(*zero_diagonal)),
            PlacementSchedule::Learnable(s) => {
                let mut s = s.for_batch(z.batch());
                if step == LearnableStep::Relative {
                    let base = default_step(z)?;
                    for g in s.gammas.iter_mut() {
                        *g *= base;
                    }
                }
                Ok(s)
            }
        }
    }
}

/// How a learnable `γ_k` enters the unroll.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LearnableStep {
    /// `γ_k` is the step itself, started at 0.1.
    Absolute,
    /// The step is `γ_k / σ_max(Z)²`, so `γ_k = 1` with `R_k = I` reproduces the fixed unroll.
    #[default]
    Relative,
}

impl LearnableStep {
    /// Initial value of every learnable `γ_k`.
    pub fn initial_gamma(self) -> f64 {
        match self {
            LearnableStep::Absolute => crate::prox::DEFAULT_LEARNABLE_GAMMA,
            LearnableStep::Relative => 1.0,
        }
    }
}

/// Starting point `W_0` of every unroll in the pipeline.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoefficientInit {
    /// `W_0 = 0`, the usual ISTA start. A few iterations from zero keep little
    /// more than the batch's dominant direction, which shared token components
    /// make nearly class-independent.
    Zero,
    /// `W_0 = I`: the unroll starts from the trivial self-representation `Ẑ = Z`.
    #[default]
    Identity,
}

impl CoefficientInit {
    pub fn matrix(self, m: usize) -> Matrix {
        match self {
            CoefficientInit::Identity => Matrix::identity(m),
            CoefficientInit::Zero => Matrix::zeros(m, m),
        }
    }
}

/// Blocks after which the unroll runs, each with its own schedule. Empty means the plain encoder.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlacementConfig {
    pub entries: BTreeMap<usize, PlacementSchedule>,
    pub w0: CoefficientInit,
    pub step: LearnableStep,
}

impl PlacementConfig {
    pub fn baseline() -> Self {
        PlacementConfig::default()
    }

    pub fn fixed(blocks: &[usize], lambda: f64, k_max: usize, zero_diagonal: bool) -> Self {
        PlacementConfig {
            entries: blocks
                .iter()
                .map(|&b| {
                    (
                        b,
                        PlacementSchedule::Fixed {
                            lambda,
                            k_max,
                            zero_diagonal,
                        },
                    )
                })
                .collect(),
            w0: CoefficientInit::Identity,
            step: LearnableStep::Relative,
        }
    }

    /// Learnable schedules at their initial point, preconditioners sized for `batch_size`.
    pub fn learnable(blocks: &[usize], batch_size: usize, lambda: f64, k_max: usize, zero_diagonal: bool) -> Self {
        PlacementConfig {
            entries: blocks
                .iter()
                .map(|&b| {
                    let s = ProxSchedule::learnable_init(batch_size, k_max, lambda).with_zero_diagonal(zero_diagonal);
                    (b, PlacementSchedule::Learnable(s))
                })
                .collect(),
            w0: CoefficientInit::Identity,
            step: LearnableStep::Absolute,
        }
        .with_step(LearnableStep::Relative)
    }

    pub fn with_w0(mut self, w0: CoefficientInit) -> Self {
        self.w0 = w0;
        self
    }

    /// Switches the learnable step rule and resets every learnable `γ_k` to its initial value.
    pub fn with_step(mut self, step: LearnableStep) -> Self {
        self.step = step;
        for s in self.entries.values_mut() {
            if let PlacementSchedule::Learnable(s) = s {
                s.gammas.iter_mut().for_each(|g| *g = step.initial_gamma());
            }
        }
        self
    }

    /// Concrete schedule of the unroll after `block` for a feature batch.
    pub fn resolve(&self, block: usize, z: &FeatureMatrix) -> Result<ProxSchedule> {
        let s = self
            .entries
            .get(&block)
            .ok_or_else(|| Error::usage(format!("no unroll after block {block}")))?;
        s.resolve(z, self.step)
    }

    pub fn blocks(&self) -> Vec<usize> {
        self.entries.keys().copied().collect()
    }

    pub fn is_active(&self) -> bool {
        !self.entries.is_empty()
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        for (&b, s) in &self.entries {
            if b == 0 || b > num_layers {
                return Err(Error::config(format!("placement block {b} outside 1..={num_layers}")));
            }
            if let PlacementSchedule::Learnable(s) = s {
                s.validate().map_err(|e| Error::config(format!("placement {b}: {e}")))?;
            }
            if !(s.lambda() >= 0.0 && s.lambda().is_finite()) {
                return Err(Error::config(format!("placement {b}: lambda must be finite and ≥ 0")));
            }
        }
        Ok(())
    }
}

fn d_epochs() -> usize {
    30
}
fn d_batch() -> usize {
    64
}
fn d_lr() -> f64 {
    1e-3
}
fn d_lambda() -> f64 {
    crate::prox::DEFAULT_LAMBDA
}
fn d_kmax() -> usize {
    5
}
fn d_one() -> f64 {
    1.0
}

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    pub variant: Variant,
    /// Blocks carrying the unroll; defaults to the last block for the prox variants.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placement: Option<Vec<usize>>,
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    #[serde(default = "d_kmax")]
    pub k_max: usize,
    #[serde(default)]
    pub zero_diagonal: bool,
    #[serde(default)]
    pub w0: CoefficientInit,
    #[serde(default)]
    pub learnable_step: LearnableStep,
    /// Learning-rate multiplier for `γ_k` and `R_k`.
    #[serde(default = "d_one")]
    pub prox_lr_multiplier: f64,
}

impl TrainConfig {
    pub fn new(variant: Variant, seed: u64) -> Self {
        TrainConfig {
            epochs: d_epochs(),
            batch_size: d_batch(),
            learning_rate: d_lr(),
            seed,
            variant,
            placement: None,
            lambda: d_lambda(),
            k_max: d_kmax(),
            zero_diagonal: false,
            w0: CoefficientInit::Identity,
            learnable_step: LearnableStep::Relative,
            prox_lr_multiplier: 1.0,
        }
    }

    pub fn placement_blocks(&self, num_layers: usize) -> Vec<usize> {
        match (self.variant, &self.placement) {
            (Variant::Baseline, _) => Vec::new(),
            (_, Some(p)) => {
                let mut p = p.clone();
                p.sort_unstable();
                p.dedup();
                p
            }
            (_, None) => vec![num_layers],
        }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be ≥ 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(self.prox_lr_multiplier >= 0.0 && self.prox_lr_multiplier.is_finite()) {
            return Err(Error::config("prox_lr_multiplier must be ≥ 0"));
        }
        if self.variant == Variant::Baseline && self.placement.as_ref().is_some_and(|p| !p.is_empty()) {
            return Err(Error::config("the baseline variant takes no placement"));
        }
        let blocks = self.placement_blocks(num_layers);
        if !blocks.is_empty() && self.batch_size < 2 {
            return Err(Error::config("batch_size must be ≥ 2 when a prox placement is active"));
        }
        self.build_placement(num_layers).validate(num_layers)
    }

    pub fn build_placement(&self, num_layers: usize) -> PlacementConfig {
        let blocks = self.placement_blocks(num_layers);
        let p = match self.variant {
            Variant::Baseline => PlacementConfig::baseline(),
            Variant::FixedProx => PlacementConfig::fixed(&blocks, self.lambda, self.k_max, self.zero_diagonal),
            Variant::LearnableProx => {
                PlacementConfig::learnable(&blocks, self.batch_size, self.lambda, self.k_max, self.zero_diagonal)
            }
        };
        p.with_w0(self.w0).with_step(self.learnable_step)
    }
}

/// Linear map from class tokens to logits: `logits = Ẑᵀ weight + bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    /// d x classes.
    pub weight: Matrix,
    /// 1 x classes.
    pub bias: Matrix,
}

impl Classifier {
    pub fn init(d: usize, classes: usize, rng: &mut SplitMix64) -> Self {
        Classifier {
            weight: rng.truncated_normal_matrix(d, classes, 0.02),
            bias: Matrix::zeros(1, classes),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub vit_config: VitConfig,
    pub vit: VitParams,
    pub classifier: Classifier,
    pub placement: PlacementConfig,
}

/// Parameter group, used to pick the learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Prox,
}

impl Model {
    pub fn init(vit_config: VitConfig, num_classes: usize, placement: PlacementConfig, seed: u64) -> Result<Self> {
        vit_config.validate()?;
        placement.validate(vit_config.num_layers)?;
        if num_classes == 0 {
            return Err(Error::usage("need at least one class"));
        }
        let mut rng = SplitMix64::derived(seed, 0x1417);
        let vit = VitParams::init(&vit_config, &mut rng);
        let classifier = Classifier::init(vit_config.embed_dim, num_classes, &mut rng);
        Ok(Model {
            vit_config,
            vit,
            classifier,
            placement,
        })
    }

    /// Visits every trainable matrix in a fixed order. Step sizes are exposed as 1x1 matrices.
    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(ParamGroup, &mut Matrix)) {
        self.vit.for_each_mut(&mut |_, m| f(ParamGroup::Backbone, m));
        f(ParamGroup::Backbone, &mut self.classifier.weight);
        f(ParamGroup::Backbone, &mut self.classifier.bias);
        for s in self.placement.entries.values_mut() {
            if let PlacementSchedule::Learnable(s) = s {
                for g in s.gammas.iter_mut() {
                    let mut m = Matrix::scalar(*g);
                    f(ParamGroup::Prox, &mut m);
                    *g = m[(0, 0)];
                }
                for r in s.preconditioners.iter_mut().flatten() {
                    f(ParamGroup::Prox, r);
                }
            }
        }
    }

    pub fn clamp_step_sizes(&mut self) {
        for s in self.placement.entries.values_mut() {
            if let PlacementSchedule::Learnable(s) = s {
                for g in s.gammas.iter_mut() {
                    *g = g.clamp(crate::prox::GAMMA_MIN, crate::prox::GAMMA_MAX);
                }
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        let mut copy = self.clone();
        copy.visit_params_mut(&mut |_, m| ok &= m.is_finite());
        ok
    }

    /// Writes the encoder, classifier and placement parameters as a checkpoint directory.
    pub fn save(&self, dir: impl AsRef<Path>, extra: serde_json::Value) -> Result<()> {
        let mut tensors = self.vit.named_tensors();
        tensors.insert("classifier.weight".into(), self.classifier.weight.clone());
        tensors.insert("classifier.bias".into(), self.classifier.bias.clone());
        let mut placements = Vec::new();
        for (&b, s) in &self.placement.entries {
            let kind = match s {
                PlacementSchedule::Fixed { .. } => "fixed",
                PlacementSchedule::Learnable(s) => {
                    tensors.insert(format!("prox{b}.gamma"), Matrix::row_vector(&s.gammas));
                    for (k, r) in s.preconditioners.iter().flatten().enumerate() {
                        tensors.insert(format!("prox{b}.r{}", k + 1), r.clone());
                    }
                    "learnable"
                }
            };
            placements.push(serde_json::json!({
                "block": b,
                "kind": kind,
                "lambda": s.lambda(),
                "k_max": s.k_max(),
                "zero_diagonal": s.zero_diagonal(),
            }));
        }
        let meta = serde_json::json!({
            "num_classes": self.classifier.num_classes(),
            "w0": self.placement.w0,
            "learnable_step": self.placement.step,
            "placements": placements,
            "run": extra,
        });
        save_checkpoint(dir, &self.vit_config, &tensors, meta)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        #[derive(Deserialize)]
        struct Entry {
            block: usize,
            kind: String,
            lambda: f64,
            k_max: usize,
            zero_diagonal: bool,
        }
        let mut ck = load_checkpoint(dir)?;
        let entries: Vec<Entry> = serde_json::from_value(ck.manifest.extra["placements"].clone())?;
        let vit = ck.take_vit()?;
        let classifier = Classifier {
            weight: ck.take("classifier.weight")?,
            bias: ck.take("classifier.bias")?,
        };
        let mut placement = PlacementConfig {
            w0: serde_json::from_value(ck.manifest.extra["w0"].clone())?,
            step: serde_json::from_value(ck.manifest.extra["learnable_step"].clone())?,
            ..PlacementConfig::default()
        };
        for e in entries {
            let s = match e.kind.as_str() {
                "fixed" => PlacementSchedule::Fixed {
                    lambda: e.lambda,
                    k_max: e.k_max,
                    zero_diagonal: e.zero_diagonal,
                },
                "learnable" => {
                    let gammas = ck.take(&format!("prox{}.gamma", e.block))?.into_vec();
                    let rs = (1..=e.k_max)
                        .map(|k| ck.take(&format!("prox{}.r{k}", e.block)))
                        .collect::<Result<Vec<_>>>()?;
                    PlacementSchedule::Learnable(ProxSchedule {
                        lambda: e.lambda,
                        gammas,
                        preconditioners: Some(rs),
                        zero_diagonal: e.zero_diagonal,
                    })
                }
                other => return Err(Error::config(format!("unknown placement kind `{other}`"))),
            };
            placement.entries.insert(e.block, s);
        }
        let vit_config = ck.manifest.vit.clone();
        placement.validate(vit_config.num_layers)?;
        Ok(Model {
            vit_config,
            vit,
            classifier,
            placement,
        })
    }
}

enum BoundSchedule {
    Fixed { lambda: f64, k_max: usize, zero_diagonal: bool },
    Learnable(RecordedSchedule),
}

/// Model parameters bound to tape leaves.
pub(crate) struct BoundModel {
    vit: VitWeights<Var>,
    clf_weight: Var,
    clf_bias: Var,
    prox: BTreeMap<usize, BoundSchedule>,
    w0: CoefficientInit,
    step: LearnableStep,
    /// Trainable leaves in [`Model::visit_params_mut`] order.
    pub(crate) params: Vec<Var>,
}

pub(crate) fn bind(tape: &mut Tape, model: &Model, placement: &PlacementConfig, trainable: bool) -> BoundModel {
    let mut params = Vec::new();
    let mut leaf = |tape: &mut Tape, m: &Matrix| {
        if trainable {
            let v = tape.param(m.clone());
            params.push(v);
            v
        } else {
            tape.constant(m.clone())
        }
    };
    let vit = model.vit.map(&mut |_, m| leaf(tape, m));
    let clf_weight = leaf(tape, &model.classifier.weight);
    let clf_bias = leaf(tape, &model.classifier.bias);
    let prox = placement
        .entries
        .iter()
        .map(|(&b, s)| {
            let bound = match s {
                PlacementSchedule::Fixed {
                    lambda,
                    k_max,
                    zero_diagonal,
                } => BoundSchedule::Fixed {
                    lambda: *lambda,
                    k_max: *k_max,
                    zero_diagonal: *zero_diagonal,
                },
                PlacementSchedule::Learnable(s) => {
                    let gammas = s.gammas.iter().map(|&g| leaf(tape, &Matrix::scalar(g))).collect();
                    let preconditioners = s
                        .preconditioners
                        .as_ref()
                        .map(|rs| rs.iter().map(|r| leaf(tape, r)).collect());
                    BoundSchedule::Learnable(RecordedSchedule {
                        lambda: s.lambda,
                        gammas,
                        preconditioners,
                        zero_diagonal: s.zero_diagonal,
                    })
                }
            };
            (b, bound)
        })
        .collect();
    BoundModel {
        vit,
        clf_weight,
        clf_bias,
        prox,
        w0: placement.w0,
        step: placement.step,
        params,
    }
}

/// One unroll inside a forward pass.
#[derive(Clone, Debug)]
pub struct UnrollRecord {
    pub z: Var,
    pub z_hat: Var,
    pub w: Var,
    pub objective_trace: Vec<f64>,
}

pub(crate) struct ForwardRecord {
    pub logits: Var,
    /// Final-layer class tokens before any replacement at the last block.
    pub final_tokens: Var,
    pub unrolls: BTreeMap<usize, UnrollRecord>,
}

pub(crate) fn record_forward(tape: &mut Tape, model: &Model, bound: &BoundModel, images: &[&Image]) -> Result<ForwardRecord> {
    let mut unrolls = BTreeMap::new();
    let prox = &bound.prox;
    let mut hook = |tape: &mut Tape, layer: usize, z: Var| -> Result<Option<Var>> {
        let Some(sched) = prox.get(&layer) else {
            return Ok(None);
        };
        let m = tape.shape(z).1;
        if m < 2 {
            return Err(Error::config(format!(
                "prox placement after block {layer} needs at least 2 samples per batch, got {m}"
            )));
        }
        let fixed_schedule;
        let schedule = match sched {
            BoundSchedule::Fixed {
                lambda,
                k_max,
                zero_diagonal,
            } => {
                let g = default_step_recorded(tape, z)?;
                fixed_schedule = RecordedSchedule {
                    lambda: *lambda,
                    gammas: vec![g; *k_max],
                    preconditioners: None,
                    zero_diagonal: *zero_diagonal,
                };
                &fixed_schedule
            }
            BoundSchedule::Learnable(s) if bound.step == LearnableStep::Relative => {
                let base = default_step_recorded(tape, z)?;
                let mut scaled = s.clone();
                for g in scaled.gammas.iter_mut() {
                    *g = tape.scale_by(base, *g)?;
                }
                fixed_schedule = scaled;
                &fixed_schedule
            }
            BoundSchedule::Learnable(s) => s,
        };
        let w0 = tape.constant(bound.w0.matrix(m));
        let out = unroll_recorded(tape, z, schedule, w0)?;
        unrolls.insert(
            layer,
            UnrollRecord {
                z,
                z_hat: out.z_hat,
                w: out.w_final,
                objective_trace: out.objective_trace,
            },
        );
        Ok(Some(out.z_hat))
    };
    let last = model.vit_config.num_layers;
    let enc = encode_recorded(tape, images, &model.vit_config, &bound.vit, &[last], &mut hook)?;
    let zt = tape.transpose(enc.class_tokens);
    let logits = tape.matmul(zt, bound.clf_weight)?;
    let logits = tape.add_row_broadcast(logits, bound.clf_bias)?;
    Ok(ForwardRecord {
        logits,
        final_tokens: enc.taps[&last],
        unrolls,
    })
}

/// Logits (`m x classes`) of a batch under `placement`.
pub fn forward_classify(images: &[&Image], model: &Model, placement: &PlacementConfig) -> Result<Matrix> {
    placement.validate(model.vit_config.num_layers)?;
    let mut tape = Tape::new();
    let bound = bind(&mut tape, model, placement, false);
    let rec = record_forward(&mut tape, model, &bound, images)?;
    Ok(tape.value(rec.logits).clone())
}
