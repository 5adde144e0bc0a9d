//! Adam optimization, schedules, the supervised loop and the three-inference
//! self-supervised loop, plus checkpoints.

mod checkpoint;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::datagen::{make_synthetic_pair, stream_rng, ScenePair, SyntheticPairSpec};
use crate::diffmath::{Graph, ValueId};
use crate::error::{Error, Result};
use crate::evalkit::{aggregate, evaluate_sample, MetricsReport};
use crate::exec::Exec;
use crate::losses::{
    flow_loss, level_flow_targets, level_flows, level_occlusion_targets, level_occlusions, nonoccluded_chamfer,
    occlusion_loss, self_supervised_total, smoothness_reg, supervised_loss, warped_sources, LossWeights, DEFAULT_ALPHA,
};
use crate::network::{
    model_forward, model_forward_with, predict, BoundParams, ForwardOptions, ModelConfig, ModelParams,
};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_decay: f64,
    pub lr_decay_interval_epochs: usize,
    /// The synthetic flow term is used for this leading fraction of epochs.
    pub synth_flow_epoch_fraction: f64,
    pub lambda_reg_start: f64,
    pub lambda_reg_end: f64,
    /// Linear ramp window of `lambda_reg`, as fractions of `epochs`.
    pub lambda_reg_ramp: [f64; 2],
    pub lambda_f: f64,
    pub lambda_oc: f64,
    /// Per-level loss weights, finest first; empty means the defaults cut to the level count.
    pub alpha: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 4,
            lr_initial: 1e-3,
            lr_decay: 0.85,
            lr_decay_interval_epochs: 10,
            synth_flow_epoch_fraction: 0.2,
            lambda_reg_start: 3.0,
            lambda_reg_end: 1.0,
            lambda_reg_ramp: [1.0 / 3.0, 7.0 / 15.0],
            lambda_f: 0.6,
            lambda_oc: 1.0,
            alpha: Vec::new(),
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr_initial, self.lr_decay, self.adam_eps];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument(
                "learning rate, decay and eps must be positive".into(),
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.lr_decay_interval_epochs == 0 {
            return Err(Error::InvalidArgument(
                "epochs, batch size and decay interval must be >= 1".into(),
            ));
        }
        let fractions = [
            self.synth_flow_epoch_fraction,
            self.lambda_reg_ramp[0],
            self.lambda_reg_ramp[1],
            self.beta1,
            self.beta2,
        ];
        if fractions.iter().any(|v| !(0.0..=1.0).contains(v)) || self.lambda_reg_ramp[0] > self.lambda_reg_ramp[1] {
            return Err(Error::InvalidArgument(
                "schedule fractions and betas must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn alpha_for(&self, levels: usize) -> Vec<f64> {
        if self.alpha.is_empty() {
            DEFAULT_ALPHA.iter().copied().cycle().take(levels).collect()
        } else {
            self.alpha.clone()
        }
    }

    pub fn loss_weights(&self, levels: usize, epoch: f64) -> LossWeights {
        LossWeights {
            alpha: self.alpha_for(levels),
            lambda_reg: lambda_reg_at(epoch, self),
            lambda_f: self.lambda_f,
            lambda_oc: self.lambda_oc,
        }
    }
}

/// `lr_initial * decay^floor(epoch / interval)`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    config.lr_initial * config.lr_decay.powi((epoch / config.lr_decay_interval_epochs) as i32)
}

/// Start value before the ramp window, end value after it, linear in between.
pub fn lambda_reg_at(epoch: f64, config: &TrainConfig) -> f64 {
    let e = config.epochs as f64;
    let (a, b) = (config.lambda_reg_ramp[0] * e, config.lambda_reg_ramp[1] * e);
    if epoch <= a {
        config.lambda_reg_start
    } else if epoch >= b {
        config.lambda_reg_end
    } else {
        let t = (epoch - a) / (b - a);
        config.lambda_reg_start + t * (config.lambda_reg_end - config.lambda_reg_start)
    }
}

/// First and second moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ModelParams<f32>,
    pub v: ModelParams<f32>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams<f32>) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Rejects non-finite gradients before touching anything.
pub fn adam_step(
    params: &mut ModelParams<f32>,
    grads: &ModelParams<f32>,
    state: &mut AdamState,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    for (name, g) in grads.iter() {
        if g.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::PoisonedGradient(name.clone()));
        }
        let p = params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape != g.shape {
            return Err(Error::shape("adam_step", &p.shape, &g.shape));
        }
    }
    if grads.len() != params.len() {
        return Err(Error::InvalidArgument(
            "gradient set does not cover every parameter".into(),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = &grads.get(name).expect("checked above").data;
        let m = &mut state.m.get_mut(name).expect("moments match params").data;
        let v = &mut state.v.get_mut(name).expect("moments match params").data;
        for i in 0..p.data.len() {
            let gi = g[i] as f64;
            let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
            let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + config.adam_eps);
            p.data[i] = (p.data[i] as f64 - update) as f32;
        }
        if p.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteParameter {
                name: name.clone(),
                step: state.step,
            });
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Supervised,
    SelfSupervised,
}

/// Loss and gradient of one sample.
pub struct SampleGrad {
    pub loss: f64,
    pub grads: ModelParams<f32>,
}

/// Supervised objective: multi-level flow loss only.
pub fn supervised_sample_grad(
    params: &ModelParams<f32>,
    model: &ModelConfig,
    pair: &ScenePair,
    alpha: &[f64],
) -> Result<SampleGrad> {
    let gt = pair.gt_flow.as_ref().ok_or(Error::MissingGroundTruth)?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g)?;
    let pass = model_forward(&mut g, &bound, &pair.source, &pair.target, model, 0)?;
    let loss = supervised_loss(&mut g, &pass, gt, alpha)?;
    g.backward(loss)?;
    Ok(SampleGrad {
        loss: g.scalar(loss).as_f64(),
        grads: params.collect_grads(&g, &bound),
    })
}

/// Individual terms of the self-supervised objective, already weighted into `total`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SelfSupervisedTerms {
    pub chamfer: f64,
    pub smoothness: f64,
    pub synth_flow: f64,
    pub synth_occ: f64,
    pub total: f64,
}

/// Graph nodes of the four self-supervised terms.
#[derive(Clone, Copy, Debug)]
pub struct SelfSupervisedNodes {
    pub chamfer: ValueId,
    pub smoothness: ValueId,
    pub synth_flow: ValueId,
    pub synth_occ: ValueId,
}

/// Three inferences on one unlabeled pair: `(S, T)` for flow and forward
/// occlusion, `(T, S)` for backward occlusion, and `(S, T~)` on a synthetic
/// target for the labeled flow and occlusion terms. The two real-pair
/// inferences run with their occlusion estimates cut from the graph, so the
/// Chamfer and smoothness terms never update the occlusion predictor.
pub fn self_supervised_terms<T: Real>(
    g: &mut Graph<T>,
    bound: &BoundParams,
    model: &ModelConfig,
    pair: &ScenePair,
    synth: &SyntheticPairSpec,
    alpha: &[f64],
) -> Result<SelfSupervisedNodes> {
    let (s, t) = (&pair.source, &pair.target);
    let frozen = ForwardOptions { detach_occlusion: true };
    let fwd = model_forward_with(g, bound, s, t, model, 0, frozen)?;
    let bwd = model_forward_with(g, bound, t, s, model, 0, frozen)?;
    let warped = warped_sources(g, &fwd)?;
    let chamfer = nonoccluded_chamfer(
        g,
        &warped,
        &fwd.pyramid.target.positions,
        &level_occlusions(&fwd),
        &level_occlusions(&bwd),
        alpha,
    )?;
    let nbrs: Vec<_> = fwd.pyramid.source.self_neighbors.iter().map(|n| n.as_ref()).collect();
    let smoothness = smoothness_reg(g, &level_flows(&fwd), &nbrs, alpha)?;

    let synthetic = make_synthetic_pair(s, synth)?.pair;
    let syn = model_forward(g, bound, s, &synthetic.target, model, 0)?;
    let (gt_flow, gt_occ) = synthetic.labels()?;
    let flow_t = level_flow_targets(g, &syn, gt_flow)?;
    let synth_flow = flow_loss(g, &level_flows(&syn), &flow_t, alpha)?;
    let occ_t = level_occlusion_targets(g, &syn, gt_occ)?;
    let synth_occ = occlusion_loss(g, &level_occlusions(&syn), &occ_t, alpha)?;
    Ok(SelfSupervisedNodes {
        chamfer,
        smoothness,
        synth_flow,
        synth_occ,
    })
}

pub fn self_supervised_sample_grad(
    params: &ModelParams<f32>,
    model: &ModelConfig,
    pair: &ScenePair,
    synth: &SyntheticPairSpec,
    weights: &LossWeights,
    synth_flow_enabled: bool,
) -> Result<(SampleGrad, SelfSupervisedTerms)> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g)?;
    let n = self_supervised_terms(&mut g, &bound, model, pair, synth, &weights.alpha)?;
    let total = self_supervised_total(
        &mut g,
        n.chamfer,
        n.smoothness,
        n.synth_flow,
        n.synth_occ,
        weights,
        synth_flow_enabled,
    )?;
    g.backward(total)?;
    let terms = SelfSupervisedTerms {
        chamfer: g.scalar(n.chamfer).as_f64(),
        smoothness: g.scalar(n.smoothness).as_f64(),
        synth_flow: g.scalar(n.synth_flow).as_f64(),
        synth_occ: g.scalar(n.synth_occ).as_f64(),
        total: g.scalar(total).as_f64(),
    };
    Ok((
        SampleGrad {
            loss: terms.total,
            grads: params.collect_grads(&g, &bound),
        },
        terms,
    ))
}

/// Gradient of the Chamfer term alone, for checking that it never reaches the
/// occlusion predictor.
pub fn chamfer_grads(
    params: &ModelParams<f32>,
    model: &ModelConfig,
    pair: &ScenePair,
    synth: &SyntheticPairSpec,
    alpha: &[f64],
) -> Result<ModelParams<f32>> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g)?;
    let n = self_supervised_terms(&mut g, &bound, model, pair, synth, alpha)?;
    g.backward(n.chamfer)?;
    Ok(params.collect_grads(&g, &bound))
}

/// Mean of per-sample gradients, summed in sample order.
pub fn average_grads(samples: &[SampleGrad]) -> Result<(f64, ModelParams<f32>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let mut acc = first.grads.zeros_like().cast::<f64>();
    let mut loss = 0.0;
    for s in samples {
        loss += s.loss;
        for ((_, a), (_, g)) in acc.iter_mut().zip(s.grads.iter()) {
            a.data.iter_mut().zip(&g.data).for_each(|(a, &g)| *a += g as f64);
        }
    }
    let n = samples.len() as f64;
    acc.iter_mut()
        .for_each(|(_, t)| t.data.iter_mut().for_each(|v| *v /= n));
    Ok((loss / n, acc.cast::<f32>()))
}

/// Loss record of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub steps: Vec<StepRecord>,
    /// Held-out metrics after each completed epoch.
    pub heldout: Vec<(usize, MetricsReport)>,
}

/// Optimizer state plus the schedule bookkeeping needed to resume mid-run.
pub struct Trainer {
    pub model: ModelConfig,
    pub config: TrainConfig,
    pub mode: TrainMode,
    pub synth: SyntheticPairSpec,
    pub params: ModelParams<f32>,
    pub adam: AdamState,
    pub exec: Exec,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: ModelConfig, config: TrainConfig, mode: TrainMode) -> Result<Self> {
        model.validate()?;
        config.validate()?;
        let params = ModelParams::init(&model, config.rng_seed)?;
        let adam = AdamState::new(&params);
        Ok(Trainer {
            rng: stream_rng(config.rng_seed, u64::MAX),
            model,
            config,
            mode,
            synth: SyntheticPairSpec::default(),
            params,
            adam,
            exec: Exec::default(),
        })
    }

    pub fn with_synthetic(mut self, synth: SyntheticPairSpec) -> Self {
        self.synth = synth;
        self
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    /// Continues from a checkpoint; the model config must match.
    pub fn resume(ckpt: Checkpoint, config: TrainConfig, mode: TrainMode) -> Result<Self> {
        config.validate()?;
        ckpt.params.check_layout(&ckpt.model)?;
        Ok(Trainer {
            rng: ckpt.rng.restore(),
            model: ckpt.model,
            config,
            mode,
            synth: SyntheticPairSpec::default(),
            params: ckpt.params,
            adam: ckpt.adam,
            exec: Exec::default(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            params: self.params.clone(),
            adam: self.adam.clone(),
            rng: RngState::capture(&self.rng),
        }
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.config.batch_size)
    }

    pub fn total_steps(&self, n: usize) -> u64 {
        (self.steps_per_epoch(n) * self.config.epochs) as u64
    }

    /// Sample order of one epoch; a pure function of seed and epoch so a
    /// resumed run sees the same batches.
    fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(self.config.rng_seed, epoch as u64));
        order
    }

    /// One optimizer step on the next batch of `data`.
    pub fn train_step(&mut self, data: &[ScenePair]) -> Result<StepRecord> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        let spe = self.steps_per_epoch(data.len());
        let step = self.adam.step as usize;
        let (epoch, within) = (step / spe, step % spe);
        let order = self.epoch_order(epoch, data.len());
        let bs = self.config.batch_size;
        let batch: Vec<&ScenePair> = order[within * bs..((within + 1) * bs).min(data.len())]
            .iter()
            .map(|&i| &data[i])
            .collect();
        let epoch_f = epoch as f64 + within as f64 / spe as f64;
        let weights = self.config.loss_weights(self.model.levels, epoch_f);
        let synth_flow = epoch_f < self.config.synth_flow_epoch_fraction * self.config.epochs as f64;
        let synth_seeds: Vec<u64> = batch.iter().map(|_| self.rng.gen()).collect();

        let (params, model, synth) = (&self.params, &self.model, &self.synth);
        let mode = self.mode;
        let results = self.exec.map_range(batch.len(), |i| match mode {
            TrainMode::Supervised => supervised_sample_grad(params, model, batch[i], &weights.alpha),
            TrainMode::SelfSupervised => self_supervised_sample_grad(
                params,
                model,
                batch[i],
                &synth.with_seed(synth_seeds[i]),
                &weights,
                synth_flow,
            )
            .map(|(g, _)| g),
        });
        let samples = results
            .into_iter()
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.with_context(format!("step {step} (epoch {epoch})")))?;
        let (loss, grads) = average_grads(&samples)?;
        let lr = lr_at(epoch, &self.config);
        adam_step(&mut self.params, &grads, &mut self.adam, lr, &self.config)
            .map_err(|e| e.with_context(format!("step {step} (epoch {epoch})")))?;
        log::debug!("step {step} epoch {epoch} lr {lr:.3e} loss {loss:.6}");
        Ok(StepRecord {
            step: step as u64,
            epoch,
            lr,
            loss,
        })
    }

    /// Trains until `until_step` (or the configured end), evaluating on
    /// `heldout` after every completed epoch.
    pub fn run(&mut self, data: &[ScenePair], heldout: &[ScenePair], until_step: Option<u64>) -> Result<TrainTrace> {
        if self.mode == TrainMode::Supervised && data.iter().any(|p| p.gt_flow.is_none()) {
            return Err(Error::MissingGroundTruth);
        }
        let end = until_step.unwrap_or(u64::MAX).min(self.total_steps(data.len()));
        let spe = self.steps_per_epoch(data.len()) as u64;
        let mut trace = TrainTrace::default();
        while self.adam.step < end {
            let rec = self.train_step(data)?;
            trace.steps.push(rec);
            if self.adam.step.is_multiple_of(spe) && !heldout.is_empty() {
                let epoch = (self.adam.step / spe) as usize;
                let report = evaluate(&self.params, &self.model, heldout, self.exec)?;
                log::info!("epoch {epoch}: held-out epe_full {:.4}", report.epe_full);
                trace.heldout.push((epoch, report));
            }
        }
        Ok(trace)
    }
}

/// Supervised training from scratch.
pub fn train_supervised(
    data: &[ScenePair],
    heldout: &[ScenePair],
    model: ModelConfig,
    config: TrainConfig,
) -> Result<(Checkpoint, TrainTrace)> {
    let mut trainer = Trainer::new(model, config, TrainMode::Supervised)?;
    let trace = trainer.run(data, heldout, None)?;
    Ok((trainer.checkpoint(), trace))
}

/// Self-supervised training; ground truth in `data` is never read.
pub fn train_self_supervised(
    data: &[ScenePair],
    heldout: &[ScenePair],
    synth: SyntheticPairSpec,
    model: ModelConfig,
    config: TrainConfig,
) -> Result<(Checkpoint, TrainTrace)> {
    let unlabeled: Vec<ScenePair> = data.iter().map(ScenePair::unlabeled).collect();
    let mut trainer = Trainer::new(model, config, TrainMode::SelfSupervised)?.with_synthetic(synth);
    let trace = trainer.run(&unlabeled, heldout, None)?;
    Ok((trainer.checkpoint(), trace))
}

/// Mean metrics of the model over labeled pairs.
pub fn evaluate(
    params: &ModelParams<f32>,
    model: &ModelConfig,
    pairs: &[ScenePair],
    exec: Exec,
) -> Result<MetricsReport> {
    let reports = exec.map_slice(pairs, |pair| {
        let (gt_flow, gt_occ) = pair.labels()?;
        let pred = predict(&pair.source, &pair.target, params, model)?;
        evaluate_sample(&pred.flow, &pred.occlusion, gt_flow, gt_occ)
    });
    aggregate(&reports.into_iter().collect::<Result<Vec<_>>>()?)
}
