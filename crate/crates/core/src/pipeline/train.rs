use serde::{Deserialize, Serialize};

use super::config::{FusionMode, RunConfig};
use super::frame::{forward, Episode};
use super::model::Model;
use crate::ccc::SelectionPolicy;
use crate::detection::{assign_targets, detection_loss_t, LossConfig};
use crate::error::{Error, Result};
use crate::geometry::NoiseModel;
use crate::gridcore::params::{ParamId, ParamStore};
use crate::gridcore::tape::{Tape, Var};

pub const TOY_SEED: u64 = 7;
pub const TOY_STEPS: usize = 200;
pub const TOY_LR: f64 = 2e-3;

/// The fixed training scene: 2 agents, 5 objects, noiseless poses.
pub fn toy_config() -> RunConfig {
    let mut cfg = RunConfig::desk(2, 5, TOY_SEED);
    cfg.run.noise = NoiseModel::none();
    cfg
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Optimizer {
    /// `θ ← θ − lr·g`.
    Gd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Self::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    /// Frames in the full batch.
    pub frames: Vec<usize>,
    pub loss: LossConfig,
    /// Collaborator selection used while training; `None` keeps the run's policy.
    pub selection: Option<SelectionPolicy>,
}

impl TrainConfig {
    /// 200 Adam steps at lr 2e-3 on the first evaluation frame, with every
    /// collaborator cell transmitted.
    pub fn toy(cfg: &RunConfig) -> Self {
        Self {
            selection: Some(SelectionPolicy {
                threshold: 0.0,
                top_k: None,
            }),
            ..Self::for_run(cfg, TOY_STEPS, TOY_LR, Optimizer::adam())
        }
    }

    /// Full batch of the first frame that has a complete history window.
    pub fn for_run(cfg: &RunConfig, steps: usize, lr: f64, optimizer: Optimizer) -> Self {
        Self {
            steps,
            lr,
            optimizer,
            frames: vec![cfg.eval_frames().start],
            loss: LossConfig::default(),
            selection: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Loss before each update.
    pub losses: Vec<f64>,
    /// Loss after the last update.
    pub final_loss: f64,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.losses.first().copied().unwrap_or(self.final_loss)
    }

    pub fn reduction(&self) -> f64 {
        1.0 - self.final_loss / self.initial_loss()
    }
}

fn check_trainable(cfg: &RunConfig, frames: &[usize], ep: &Episode) -> Result<()> {
    if cfg.run.mode == FusionMode::LateFusion {
        return Err(Error::Config("late fusion is not trained jointly".into()));
    }
    if frames.is_empty() || frames.iter().any(|&f| f >= ep.frames()) {
        return Err(Error::Config(format!("training frames {frames:?} outside the episode")));
    }
    Ok(())
}

/// Mean detection loss over `frames` on a fresh tape.
pub fn loss_on_tape(
    tape: &mut Tape,
    model: &Model,
    ep: &Episode,
    cfg: &RunConfig,
    frames: &[usize],
    loss: &LossConfig,
) -> Result<Var> {
    check_trainable(cfg, frames, ep)?;
    let mut terms = Vec::with_capacity(frames.len());
    for &t in frames {
        let fwd = forward(tape, model, ep, t, cfg, false)?;
        let targets = assign_targets(&ep.ground_truth(t), &cfg.scenario.grid);
        terms.push(detection_loss_t(tape, fwd.reg, fwd.cls, &targets, loss)?);
    }
    let total = tape.add_all(&terms)?;
    Ok(tape.affine(total, 1.0 / frames.len() as f64, 0.0))
}

/// The run as seen during training, with the training selection policy.
pub fn training_config(cfg: &RunConfig, tc: &TrainConfig) -> RunConfig {
    let mut cfg = cfg.clone();
    if let Some(p) = &tc.selection {
        cfg.run.selection = p.clone();
    }
    cfg
}

pub fn total_loss(model: &Model, ep: &Episode, cfg: &RunConfig, tc: &TrainConfig) -> Result<f64> {
    let cfg = &training_config(cfg, tc);
    let mut tape = Tape::new();
    let l = loss_on_tape(&mut tape, model, ep, cfg, &tc.frames, &tc.loss)?;
    Ok(tape.scalar(l))
}

pub fn loss_and_gradients(
    model: &Model,
    ep: &Episode,
    cfg: &RunConfig,
    tc: &TrainConfig,
) -> Result<(f64, Vec<(ParamId, Vec<f64>)>)> {
    let cfg = &training_config(cfg, tc);
    let mut tape = Tape::new();
    let l = loss_on_tape(&mut tape, model, ep, cfg, &tc.frames, &tc.loss)?;
    let value = tape.scalar(l);
    Ok((value, tape.backward(l).param_grads()))
}

struct Moments {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

fn apply_update(store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)], tc: &TrainConfig, moments: &mut Moments) {
    moments.step += 1;
    for (id, g) in grads {
        let theta = &mut store.get_mut(*id).data;
        match tc.optimizer {
            Optimizer::Gd => {
                for (p, d) in theta.iter_mut().zip(g) {
                    *p -= tc.lr * d;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let (m, v) = (&mut moments.m[id.0], &mut moments.v[id.0]);
                let c1 = 1.0 - beta1.powi(moments.step);
                let c2 = 1.0 - beta2.powi(moments.step);
                for i in 0..theta.len() {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                    theta[i] -= tc.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                }
            }
        }
    }
}

/// Full-batch training on one episode; deterministic for a given model and config.
pub fn train_toy(model: &mut Model, ep: &Episode, cfg: &RunConfig, tc: &TrainConfig) -> Result<TrainReport> {
    if tc.steps == 0 {
        return Err(Error::Config("training needs at least one step".into()));
    }
    if !(tc.lr >= 0.0) {
        return Err(Error::Config(format!("learning rate {} must be non-negative", tc.lr)));
    }
    let mut moments = Moments {
        m: model.store.iter().map(|(_, t)| vec![0.0; t.data.len()]).collect(),
        v: model.store.iter().map(|(_, t)| vec![0.0; t.data.len()]).collect(),
        step: 0,
    };
    let mut losses = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let (loss, grads) = loss_and_gradients(model, ep, cfg, tc)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss {loss} at step {step}")));
        }
        if let Some((id, _)) = grads.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!(
                "gradient of {} at step {step}",
                model.store.get(*id).name
            )));
        }
        losses.push(loss);
        apply_update(&mut model.store, &grads, tc, &mut moments);
    }
    let final_loss = total_loss(model, ep, cfg, tc)?;
    if !final_loss.is_finite() {
        return Err(Error::NonFinite(format!("final loss {final_loss}")));
    }
    Ok(TrainReport { losses, final_loss })
}
