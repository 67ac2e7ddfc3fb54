//! Batched training on the synthetic recall tasks: gradient clipping,
//! schedule, per-group learning rates, periodic evaluation and probe
//! diagnostics snapshots. Fully deterministic given the run seed; batch
//! gradients reduce in sample order so thread count never changes results.

use serde::{Deserialize, Serialize};

use crate::config::TrainRunConfig;
use crate::diagnostics;
use crate::error::{Error, Result};
use crate::model::{Model, ModelGrads};
use crate::optim::{
    adamw_step, clip_global_norm, lr_and_wd_at, lr_multiplier, muon_step, AdamState, GroupTag,
    MuonState, ScheduleKind, ScheduleSpec, UpdateScaling,
};
use crate::tasks::{derive_seed, gen_batch, gen_task_seeded, TaskSpec};
use crate::tensor::norm2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimKind {
    Muon,
    Adamw,
}

/// Optimizer block of the run config.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSpec {
    pub optimizer: OptimKind,
    pub lr: f64,
    #[serde(default = "default_wd")]
    pub wd: f64,
    pub schedule: ScheduleKind,
    #[serde(default)]
    pub wda_gamma: f64,
    #[serde(default = "default_ns_steps")]
    pub ns_steps: usize,
    #[serde(default = "default_scaling")]
    pub scaling: UpdateScaling,
}

fn default_wd() -> f64 {
    0.1
}
fn default_ns_steps() -> usize {
    crate::optim::NS_STEPS
}
fn default_scaling() -> UpdateScaling {
    UpdateScaling::RmsMatched
}

impl OptimSpec {
    /// Muon at its table defaults: lr 5e-3, wd 0.1, WSD.
    pub fn muon_wsd(lr: f64) -> Self {
        OptimSpec {
            optimizer: OptimKind::Muon,
            lr,
            wd: 0.1,
            schedule: ScheduleKind::Wsd,
            wda_gamma: 0.0,
            ns_steps: crate::optim::NS_STEPS,
            scaling: UpdateScaling::RmsMatched,
        }
    }

    pub fn schedule_spec(&self, total_steps: usize) -> ScheduleSpec {
        // A zero-step run never consults the schedule; clamp so the spec
        // still validates.
        let total = total_steps.max(1);
        let mut spec = match self.schedule {
            ScheduleKind::Wsd => ScheduleSpec::wsd(total, self.lr),
            ScheduleKind::Cosine => ScheduleSpec::cosine(total, self.lr),
        };
        spec.wda_gamma = self.wda_gamma;
        spec
    }
}

enum ParamState {
    Muon(MuonState),
    Adam(AdamState),
}

/// Per-parameter optimizer states plus the schedule. Matrix-group
/// parameters run Muon when selected; embeddings, gains and gate vectors
/// take the Adam-style fallback (0.8, 0.95, eps 1e-7). Norm-type
/// parameters are excluded from weight decay.
pub struct ModelOptimizer {
    muon: bool,
    sched: ScheduleSpec,
    states: Vec<ParamState>,
    tags: Vec<GroupTag>,
}

impl ModelOptimizer {
    pub fn new(model: &Model, spec: &OptimSpec, total_steps: usize) -> Result<Self> {
        let sched = spec.schedule_spec(total_steps);
        sched.validate()?;
        let muon = matches!(spec.optimizer, OptimKind::Muon);
        let mut states = Vec::new();
        let mut tags = Vec::new();
        for (_, tag, dims) in model.param_names_and_tags() {
            let wd = if matches!(tag, GroupTag::Norm) {
                0.0
            } else {
                spec.wd
            };
            let st = if muon && matches!(tag, GroupTag::Matrix) {
                let mut m = MuonState::new(&dims, 0.95, spec.ns_steps, wd);
                m.scaling = spec.scaling;
                ParamState::Muon(m)
            } else if muon {
                ParamState::Adam(AdamState::muon_fallback(&dims, wd))
            } else {
                ParamState::Adam(AdamState::adamw_default(&dims, wd))
            };
            states.push(st);
            tags.push(tag);
        }
        Ok(ModelOptimizer {
            muon,
            sched,
            states,
            tags,
        })
    }

    /// Clip, schedule, and apply one update. Returns
    /// `(lr, wd_mult, grad_norm_before_clip)`.
    pub fn step(
        &mut self,
        model: &mut Model,
        grads: &mut ModelGrads,
        step_idx: usize,
    ) -> Result<(f64, f64, f64)> {
        let (lr, wd_mult) = lr_and_wd_at(step_idx, &self.sched)?;
        let mut refs: Vec<&mut crate::tensor::Tensor<f64>> = grads.tensors.iter_mut().collect();
        let grad_norm = clip_global_norm(&mut refs, 1.0);
        let params = model.params_mut();
        for (((param, grad), state), tag) in params
            .into_iter()
            .zip(&grads.tensors)
            .zip(&mut self.states)
            .zip(&self.tags)
        {
            let lr_eff = lr * lr_multiplier(*tag, self.muon);
            match state {
                ParamState::Muon(st) => muon_step(param, grad, st, lr_eff, wd_mult)?,
                ParamState::Adam(st) => adamw_step(param, grad, st, lr_eff, wd_mult)?,
            }
        }
        Ok((lr, wd_mult, grad_norm))
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub wd_mult: f64,
    pub grad_norm: f64,
}

/// Probe-utilization summary for one layer at one snapshot, averaged over
/// heads and positions.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LayerProbeStats {
    pub cor_mean: f64,
    pub cpa_mean: f64,
    pub rho_norm_mean: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagSnapshot {
    pub step: usize,
    pub layers: Vec<LayerProbeStats>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub schema_version: u32,
    pub init_accuracy: f64,
    pub final_accuracy: f64,
    pub losses: Vec<LossPoint>,
    pub snapshots: Vec<DiagSnapshot>,
}

/// Evaluation batches live on a seed stream disjoint from training batches.
const EVAL_STREAM: u64 = 1 << 40;
const SNAPSHOT_STREAM: u64 = 1 << 41;

pub fn eval_accuracy(
    model: &Model,
    task: &TaskSpec,
    n_batches: usize,
    batch_size: usize,
    seed: u64,
) -> Result<f64> {
    let mut spec = *task;
    spec.seed = seed;
    let batches: Vec<_> = (0..n_batches)
        .map(|i| gen_batch(&spec, EVAL_STREAM + i as u64, batch_size))
        .collect::<Result<Vec<_>>>()?;
    model.eval_accuracy(&batches)
}

fn snapshot(model: &Model, task: &TaskSpec, seed: u64, step: usize) -> Result<DiagSnapshot> {
    let mut spec = *task;
    spec.seed = seed;
    let sample = gen_task_seeded(&spec, derive_seed(seed, SNAPSHOT_STREAM))?;
    let trace = model.forward_trace(&sample.tokens)?;
    let mut layers = Vec::new();
    for heads in trace.attn_inputs() {
        let mut cors = Vec::new();
        let mut cpas = Vec::new();
        let mut rho_norms = Vec::new();
        for inp in heads {
            cors.extend(diagnostics::cor(inp)?);
            let (_, cpa) = diagnostics::corr_cpa(inp, 1e-6)?;
            cpas.extend(cpa);
            for i in 0..inp.l_q() {
                rho_norms.push(norm2(inp.r.row(i)));
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        layers.push(LayerProbeStats {
            cor_mean: mean(&cors),
            cpa_mean: mean(&cpas),
            rho_norm_mean: mean(&rho_norms),
        });
    }
    Ok(DiagSnapshot { step, layers })
}

/// Run the full training loop described by the run config. Returns the
/// trained model and the report.
pub fn run_train(cfg: &TrainRunConfig) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    let mut task = cfg.task;
    task.seed = cfg.seed;
    let mut model = Model::init(cfg.model, derive_seed(cfg.seed, 0xA))?;
    let mut opt = ModelOptimizer::new(&model, &cfg.optimizer, cfg.steps)?;

    let init_accuracy = eval_accuracy(
        &model,
        &task,
        cfg.eval_batches,
        cfg.eval_batch_size,
        cfg.seed,
    )?;
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut snapshots = Vec::new();
    let take_snapshots = cfg.snapshot_every > 0 && cfg.model.is_parallax();
    if take_snapshots {
        snapshots.push(snapshot(&model, &task, cfg.seed, 0)?);
    }
    for step in 0..cfg.steps {
        let batch = gen_batch(&task, step as u64, cfg.batch_size)?;
        let (loss, mut grads) = match model.loss_and_grads(&batch) {
            Ok(x) => x,
            Err(Error::NonFinite { .. }) => return Err(Error::Divergence { step }),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(Error::Divergence { step });
        }
        let (lr, wd_mult, grad_norm) = opt.step(&mut model, &mut grads, step)?;
        losses.push(LossPoint {
            step,
            loss,
            lr,
            wd_mult,
            grad_norm,
        });
        if take_snapshots && (step + 1) % cfg.snapshot_every == 0 {
            snapshots.push(snapshot(&model, &task, cfg.seed, step + 1)?);
        }
    }
    let final_accuracy = eval_accuracy(
        &model,
        &task,
        cfg.eval_batches,
        cfg.eval_batch_size,
        cfg.seed,
    )?;
    Ok((
        model,
        TrainReport {
            schema_version: crate::config::SCHEMA_VERSION,
            init_accuracy,
            final_accuracy,
            losses,
            snapshots,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainRunConfig;
    use crate::model::{MixerKind, ModelConfig, ProbeInit};
    use crate::tasks::TaskKind;

    pub(crate) fn micro_run(mixer: MixerKind, steps: usize, seed: u64) -> TrainRunConfig {
        TrainRunConfig {
            schema_version: crate::config::SCHEMA_VERSION,
            model: ModelConfig {
                layers: 2,
                d_model: 32,
                heads: 2,
                d_head: 16,
                vocab: 16,
                seq_len: 32,
                mixer,
                rope_on_rho: false,
                gate: false,
                tie_embeddings: true,
                rope_base: 1e4,
                probe_init: ProbeInit::Normal,
                mlp_hidden: 0,
            },
            task: TaskSpec {
                kind: TaskKind::Icr,
                vocab: 16,
                seq_len: 32,
                kv_pairs: 4,
                queries: 8,
                noise_frac: 0.0,
                seed,
            },
            optimizer: OptimSpec::muon_wsd(0.02),
            steps,
            batch_size: 16,
            seed,
            snapshot_every: 0,
            eval_batches: 2,
            eval_batch_size: 16,
        }
    }

    #[test]
    fn zero_steps_reports_init_eval_only() {
        let cfg = micro_run(MixerKind::Softmax, 0, 5);
        let (_, report) = run_train(&cfg).unwrap();
        assert!(report.losses.is_empty());
        assert_eq!(report.init_accuracy, report.final_accuracy);
    }

    #[test]
    fn untrained_accuracy_not_above_chance() {
        let cfg = micro_run(MixerKind::Parallax, 0, 6);
        let (_, report) = run_train(&cfg).unwrap();
        // binomial one-sided bound: 256 supervised positions at p = 1/16
        let n = (cfg.eval_batches * cfg.eval_batch_size * cfg.task.queries) as f64;
        let p = 1.0 / 16.0;
        let bound = p + 3.0 * (p * (1.0 - p) / n).sqrt();
        assert!(
            report.init_accuracy <= bound,
            "init accuracy {} above chance bound {}",
            report.init_accuracy,
            bound
        );
    }

    #[test]
    fn repeated_runs_bit_identical() {
        let cfg = micro_run(MixerKind::Parallax, 3, 7);
        let (_, r1) = run_train(&cfg).unwrap();
        let (_, r2) = run_train(&cfg).unwrap();
        let j1 = serde_json::to_string(&r1).unwrap();
        let j2 = serde_json::to_string(&r2).unwrap();
        assert_eq!(j1, j2);
    }

    #[test]
    fn snapshots_recorded_for_parallax() {
        let mut cfg = micro_run(MixerKind::Parallax, 4, 8);
        cfg.snapshot_every = 2;
        let (_, report) = run_train(&cfg).unwrap();
        // init + steps 2 and 4
        assert_eq!(report.snapshots.len(), 3);
        assert_eq!(report.snapshots[0].step, 0);
        assert_eq!(report.snapshots[2].step, 4);
        for snap in &report.snapshots {
            assert_eq!(snap.layers.len(), 2);
            for l in &snap.layers {
                assert!(l.cor_mean.is_finite() && l.cor_mean >= 0.0);
                assert!(l.cpa_mean >= 0.0 && l.cpa_mean <= 1.0 + 1e-9);
                assert!(l.rho_norm_mean >= 0.0);
            }
        }
    }

    #[test]
    fn training_smoke_beats_chance() {
        // 300 Muon steps on micro ICR must clear 5x chance accuracy.
        let cfg = micro_run(MixerKind::Softmax, 300, 9);
        let (_, report) = run_train(&cfg).unwrap();
        assert!(
            report.final_accuracy > 5.0 / 16.0,
            "smoke accuracy {} below 5x chance",
            report.final_accuracy
        );
    }
}
