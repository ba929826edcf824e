use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{adam_step, AdamState, TrainConfig};
use crate::error::{Error, Result};
use crate::loss::{foreground_weight_map, l_cons, l_def, l_reg, l_seg, LossBreakdown, LossTerms};
use crate::model::{hybrid_forward, init_params, HybridInputs, HybridOutput, NetRole, ParameterSet};
use crate::ops::{slice_channels, BatchStats, NormMode};
use crate::synth::PairSample;
use crate::tensor::{Graph, NodeId, Tensor};

/// Everything needed to evaluate or resume a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Completed iterations.
    pub iteration: u64,
    pub theta: Option<ParameterSet>,
    pub phi: Option<ParameterSet>,
    pub adam_theta: Option<AdamState>,
    pub adam_phi: Option<AdamState>,
}

impl Checkpoint {
    /// Freshly initialized networks for `config.mode`.
    pub fn init(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let theta = config
            .mode
            .uses_theta()
            .then(|| init_params(NetRole::Segmentation, &config.seg_net))
            .transpose()?;
        let phi = config
            .mode
            .uses_phi()
            .then(|| init_params(NetRole::Registration, &config.reg_net))
            .transpose()?;
        let moments = |p: &Option<ParameterSet>| {
            p.as_ref()
                .map(|p| AdamState::zeros_like(p.learnable().into_iter().map(|(_, t)| t)))
        };
        Ok(Checkpoint {
            adam_theta: moments(&theta),
            adam_phi: moments(&phi),
            config: config.clone(),
            iteration: 0,
            theta,
            phi,
        })
    }
}

/// The recorded objective of one sample.
pub struct Objective {
    pub total: NodeId,
    pub terms: LossTerms,
    pub forward: HybridOutput,
}

fn weights_for(cfg: &TrainConfig, label: &crate::metrics::BinaryMask) -> Option<Tensor> {
    (cfg.foreground_weight != 1.0).then(|| foreground_weight_map(label, cfg.foreground_weight))
}

/// Records the mode's forward pass and active loss terms on `g`.
pub fn objective(
    g: &mut Graph,
    cfg: &TrainConfig,
    theta: Option<&ParameterSet>,
    phi: Option<&ParameterSet>,
    sample: &PairSample,
    norm: NormMode,
) -> Result<Objective> {
    let theta = if cfg.mode.uses_theta() {
        Some(theta.ok_or_else(|| Error::Contract(format!("{} mode needs segmentation parameters", cfg.mode)))?)
    } else {
        None
    };
    let phi = if cfg.mode.uses_phi() {
        Some(phi.ok_or_else(|| Error::Contract(format!("{} mode needs registration parameters", cfg.mode)))?)
    } else {
        None
    };
    let inputs = HybridInputs {
        tensor_s: &sample.source.tensor,
        fa_s: &sample.source.fa,
        fa_t: &sample.target.fa,
    };
    let fwd = hybrid_forward(g, &inputs, theta, phi, norm)?;
    let mut terms = LossTerms::default();
    if let Some(p) = fwd.prob_s {
        let fg = slice_channels(g, p, 1, 1)?;
        let w = weights_for(cfg, &sample.source.label);
        terms.seg = Some(l_seg(g, fg, &sample.source.label, w.as_ref())?);
    }
    if let (Some(warped), Some(disp)) = (fwd.warped_fa, fwd.disp) {
        let target = g.input(sample.target.fa.clone());
        terms.reg = Some(l_reg(g, warped, target)?);
        terms.def = Some(l_def(g, disp)?);
    }
    if let Some(wp) = fwd.warped_prob {
        let fg = slice_channels(g, wp, 1, 1)?;
        let w = weights_for(cfg, &sample.target.label);
        terms.cons = Some(l_cons(g, fg, &sample.target.label, w.as_ref())?);
    }
    let total = terms.compose(g, &cfg.weights)?;
    Ok(Objective {
        total,
        terms,
        forward: fwd,
    })
}

/// Loss and parameter gradients of one train-mode pass.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub loss: LossBreakdown,
    pub theta_grads: Option<Vec<Tensor>>,
    pub phi_grads: Option<Vec<Tensor>>,
    pub theta_stats: Vec<BatchStats>,
    pub phi_stats: Vec<BatchStats>,
}

pub fn compute_gradients(
    cfg: &TrainConfig,
    theta: Option<&ParameterSet>,
    phi: Option<&ParameterSet>,
    sample: &PairSample,
) -> Result<StepOutput> {
    let mut g = Graph::new();
    let obj = objective(&mut g, cfg, theta, phi, sample, NormMode::Train)?;
    let total = g.value(obj.total).item()?;
    if !total.is_finite() {
        return Err(Error::Numeric(format!("objective is {total}")));
    }
    let loss = obj.terms.breakdown(&g, &cfg.weights)?;
    g.backward(obj.total)?;
    let grads = |t: &Option<crate::model::UnetTrace>| {
        t.as_ref()
            .map(|t| t.params.iter().map(|&id| g.grad_or_zeros(id)).collect::<Vec<_>>())
    };
    let fwd = &obj.forward;
    Ok(StepOutput {
        loss,
        theta_grads: grads(&fwd.theta),
        phi_grads: grads(&fwd.phi),
        theta_stats: fwd.theta.as_ref().map(|t| t.stats.clone()).unwrap_or_default(),
        phi_stats: fwd.phi.as_ref().map(|t| t.stats.clone()).unwrap_or_default(),
    })
}

/// Visiting order of epoch `epoch`: a permutation of `0..n` from a ChaCha8
/// stream keyed by the epoch, so any iteration can be located without
/// replaying earlier epochs.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

pub struct Trainer {
    state: Checkpoint,
    samples: Vec<PairSample>,
}

fn apply(
    params: &mut Option<ParameterSet>,
    adam: &mut Option<AdamState>,
    grads: Option<Vec<Tensor>>,
    stats: &[BatchStats],
    cfg: &TrainConfig,
) -> Result<()> {
    let (Some(p), Some(grads)) = (params.as_mut(), grads) else {
        return Ok(());
    };
    let state = adam
        .as_mut()
        .ok_or_else(|| Error::Contract("optimizer state missing for an active network".into()))?;
    let names: Vec<String> = p.learnable().into_iter().map(|(n, _)| n).collect();
    adam_step(&mut p.learnable_mut(), &names, &grads, state, &cfg.adam())?;
    p.absorb_stats(stats)
}

impl Trainer {
    pub fn new(config: &TrainConfig, samples: Vec<PairSample>) -> Result<Self> {
        Trainer::resume(Checkpoint::init(config)?, samples)
    }

    pub fn resume(state: Checkpoint, samples: Vec<PairSample>) -> Result<Self> {
        state.config.validate()?;
        if samples.is_empty() {
            return Err(Error::Contract("training needs at least one sample".into()));
        }
        if state.config.mode.uses_theta() != state.theta.is_some()
            || state.config.mode.uses_phi() != state.phi.is_some()
        {
            return Err(Error::Contract(format!(
                "checkpoint networks do not match {} mode",
                state.config.mode
            )));
        }
        Ok(Trainer { state, samples })
    }

    pub fn iteration(&self) -> u64 {
        self.state.iteration
    }

    pub fn config(&self) -> &TrainConfig {
        &self.state.config
    }

    pub fn state(&self) -> &Checkpoint {
        &self.state
    }

    pub fn into_state(self) -> Checkpoint {
        self.state
    }

    pub fn set_iterations(&mut self, iterations: u64) {
        self.state.config.iterations = iterations;
    }

    /// Index of the sample used by the next step.
    pub fn next_index(&self) -> usize {
        let n = self.samples.len() as u64;
        let it = self.state.iteration;
        epoch_order(self.state.config.seed, it / n, n as usize)[(it % n) as usize]
    }

    /// One forward/backward/update on the next scheduled sample. A
    /// non-finite loss or gradient aborts without touching the state.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        let iteration = self.state.iteration;
        let sample = &self.samples[self.next_index()];
        let cfg = self.state.config.clone();
        let out = compute_gradients(&cfg, self.state.theta.as_ref(), self.state.phi.as_ref(), sample)
            .map_err(|e| diverged(iteration, e))?;
        let mut next = self.state.clone();
        apply(
            &mut next.theta,
            &mut next.adam_theta,
            out.theta_grads,
            &out.theta_stats,
            &cfg,
        )
        .map_err(|e| diverged(iteration, e))?;
        apply(&mut next.phi, &mut next.adam_phi, out.phi_grads, &out.phi_stats, &cfg)
            .map_err(|e| diverged(iteration, e))?;
        next.iteration += 1;
        self.state = next;
        Ok(out.loss)
    }

    /// Eval-mode objective averaged over `samples`, without updates.
    pub fn mean_loss(&self, samples: &[PairSample]) -> Result<LossBreakdown> {
        let cfg = &self.state.config;
        let mut acc = LossBreakdown::default();
        for s in samples {
            let mut g = Graph::new();
            let obj = objective(
                &mut g,
                cfg,
                self.state.theta.as_ref(),
                self.state.phi.as_ref(),
                s,
                NormMode::Eval,
            )?;
            let b = obj.terms.breakdown(&g, &cfg.weights)?;
            acc.seg += b.seg;
            acc.reg += b.reg;
            acc.def += b.def;
            acc.cons += b.cons;
            acc.total += b.total;
        }
        let n = samples.len().max(1) as f64;
        Ok(LossBreakdown {
            seg: acc.seg / n,
            reg: acc.reg / n,
            def: acc.def / n,
            cons: acc.cons / n,
            total: acc.total / n,
        })
    }
}

fn diverged(iteration: u64, e: Error) -> Error {
    match e {
        Error::Numeric(message) => Error::Divergence { iteration, message },
        other => other,
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogRecord {
    pub iter: u64,
    pub seg: f64,
    pub reg: f64,
    pub def: f64,
    pub cons: f64,
    pub total: f64,
}

impl LogRecord {
    pub fn new(iter: u64, b: &LossBreakdown) -> Self {
        LogRecord {
            iter,
            seg: b.seg,
            reg: b.reg,
            def: b.def,
            cons: b.cons,
            total: b.total,
        }
    }
}

pub struct RunOptions<'a> {
    pub checkpoint: &'a Path,
    /// Receives one JSON [`LogRecord`] per iteration.
    pub log: &'a mut dyn Write,
    pub vali: &'a [PairSample],
    pub vali_log: Option<&'a mut dyn Write>,
    pub vali_every: u64,
}

fn write_record(w: &mut dyn Write, r: &LogRecord) -> Result<()> {
    let line = serde_json::to_string(r)?;
    writeln!(w, "{line}").map_err(|e| Error::io("<log>", e))
}

/// Steps until `config.iterations`, logging every iteration and saving a
/// checkpoint every `checkpoint_every` iterations and at the end. On
/// divergence the last written checkpoint is left in place.
pub fn run(trainer: &mut Trainer, opts: RunOptions<'_>) -> Result<()> {
    let RunOptions {
        checkpoint,
        log,
        vali,
        mut vali_log,
        vali_every,
    } = opts;
    let until = trainer.config().iterations;
    let every = trainer.config().checkpoint_every;
    while trainer.iteration() < until {
        let b = trainer.step()?;
        let it = trainer.iteration();
        write_record(log, &LogRecord::new(it, &b))?;
        if let Some(w) = vali_log.as_deref_mut() {
            if !vali.is_empty() && vali_every > 0 && (it % vali_every == 0 || it == until) {
                write_record(w, &LogRecord::new(it, &trainer.mean_loss(vali)?))?;
            }
        }
        if it % every == 0 || it == until {
            crate::io::save_checkpoint(checkpoint, trainer.state())?;
        }
    }
    log.flush().map_err(|e| Error::io("<log>", e))?;
    Ok(())
}
