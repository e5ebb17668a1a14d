//! Deterministic toy training with the split Muon / AdamW setup.

use groupmuon_core::{
    adaptive_step, build_groups, group_muon_step, muon_step_full, AdaptiveState64, Matrix64, MuonState64,
    RowPartition,
};
use log::{debug, info};

use crate::config::{GroupTarget, OptimizerKind, RunConfig};
use crate::error::{HarnessError, Result};
use crate::metrics::{MetricsRecord, Split};
use crate::model::{Role, ToyModel};
use crate::profile::{profile_norm_gap, profile_ranks, profile_record};
use crate::tasks::{Sample, TaskStream};

/// Loss growth factor over the first step's loss that counts as divergence.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

enum Slot {
    Muon(MuonState64),
    Adam(AdaptiveState64),
}

/// Per-parameter optimizer state for one run.
pub struct Optimizers {
    slots: Vec<Slot>,
    adam_lr: f64,
    head_dim: usize,
    num_heads: usize,
}

impl Optimizers {
    pub fn new(model: &ToyModel, config: &RunConfig) -> Result<Self> {
        let opt = &config.optimizer;
        let grouping = &config.grouping;
        let heads = model.config().num_heads;
        let whitening = opt.whitening();
        let mut slots = Vec::with_capacity(model.params().len());
        for (info, p) in model.info().iter().zip(model.params()) {
            if info.role.is_embedding() {
                slots.push(Slot::Adam(AdaptiveState64::new(
                    p.shape(),
                    opt.adam_beta1,
                    opt.adam_beta2,
                    opt.adam_weight_decay,
                )?));
                continue;
            }
            let mut state = MuonState64::new(p.shape(), opt.momentum, opt.muon_lr, whitening)?
                .with_nesterov(opt.nesterov)
                .with_lr_transfer(grouping.lr_transfer);
            if opt.kind == OptimizerKind::MuonGroup {
                let seed = config.seeds.grouping;
                let head_grouping = match (grouping.target, info.role) {
                    (GroupTarget::Qk | GroupTarget::Qkv, Role::Query | Role::Key)
                    | (GroupTarget::V | GroupTarget::Qkv | GroupTarget::FixedQkV, Role::Value) => {
                        let seed = if grouping.target == GroupTarget::FixedQkV { seed.wrapping_add(1) } else { seed };
                        Some(build_groups(heads, grouping.group_size, grouping.rule_with_seed(seed), 0)?)
                    }
                    (GroupTarget::FixedQkV, Role::Query | Role::Key) => {
                        let rule = groupmuon_core::GroupingRule::Random { seed, resample_each_step: true };
                        Some(build_groups(heads, heads / 2, rule, 0)?)
                    }
                    _ => None,
                };
                if let Some(hg) = head_grouping {
                    state = state.with_grouping(hg)?;
                }
            }
            slots.push(Slot::Muon(state));
        }
        Ok(Self { slots, adam_lr: opt.adam_lr, head_dim: model.config().head_dim, num_heads: heads })
    }

    /// Applies one update to every parameter; `step` is zero-based.
    pub fn step(&mut self, params: &mut [Matrix64], grads: &[Matrix64], step: u64) -> Result<()> {
        for ((slot, w), g) in self.slots.iter_mut().zip(params.iter_mut()).zip(grads) {
            *w = match slot {
                Slot::Adam(s) => adaptive_step(w, g, s, self.adam_lr)?,
                Slot::Muon(s) if s.grouping().is_some() => group_muon_step(w, g, s, step)?,
                Slot::Muon(s) => muon_step_full(w, g, s)?,
            };
        }
        Ok(())
    }

    pub fn momentum(&self, index: usize) -> Option<&Matrix64> {
        match &self.slots[index] {
            Slot::Muon(s) => Some(&s.momentum),
            Slot::Adam(_) => None,
        }
    }

    /// Row partition the profilers use for a parameter: its current head
    /// grouping, or one group per head when whitened whole.
    pub fn profile_partition(&self, index: usize) -> Result<RowPartition> {
        match &self.slots[index] {
            Slot::Muon(s) => match s.grouping() {
                Some(g) => Ok(g.row_partition(self.head_dim)),
                None => Ok(RowPartition::contiguous(&vec![self.head_dim; self.num_heads])?),
            },
            Slot::Adam(_) => Err(HarnessError::Config("embeddings are not profiled".into())),
        }
    }

    pub fn whitening(&self, index: usize) -> Option<groupmuon_core::Whitening> {
        match &self.slots[index] {
            Slot::Muon(s) => Some(s.whitening),
            Slot::Adam(_) => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
    pub model: ToyModel,
    pub steps_completed: u64,
    pub final_val_loss: Option<f64>,
    pub best_val_loss: Option<f64>,
    /// Step at which the divergence guard fired.
    pub diverged_at: Option<u64>,
}

/// Runs training and fails with [`HarnessError::Diverged`] if the guard fires.
pub fn train(config: &RunConfig) -> Result<TrainOutcome> {
    let outcome = run_training(config)?;
    match outcome.diverged_at {
        Some(step) => {
            let loss = outcome.records.iter().rev().find_map(|r| r.loss).unwrap_or(f64::NAN);
            Err(HarnessError::Diverged { step, loss })
        }
        None => Ok(outcome),
    }
}

/// Runs training, recording divergence in the outcome instead of failing.
pub fn run_training(config: &RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let model_config = config.model_config();
    let mut model = ToyModel::new(model_config.clone())?;
    let mut optimizers = Optimizers::new(&model, config)?;
    let t = &config.training;
    let (task, vocab, seq) = (model_config.task, model_config.vocab_size, model_config.seq_len);
    let mut stream = TaskStream::training(task, vocab, seq, config.seeds.data)?;
    let val_set: Vec<Vec<Sample>> = {
        let mut v = TaskStream::validation(task, vocab, seq, config.seeds.data)?;
        (0..t.val_batches).map(|_| v.batch(t.batch_size)).collect()
    };
    let profiled: Vec<usize> = model
        .info()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.role.is_attention_projection())
        .map(|(i, _)| i)
        .collect();

    let mut records = Vec::new();
    let mut initial = None;
    let mut final_val = None;
    let mut best_val: Option<f64> = None;
    let mut completed = 0;
    let mut diverged_at = None;

    for step in 0..t.steps {
        let batch = stream.batch(t.batch_size);
        let (loss, grads) = model.loss_and_grad(&batch)?;
        records.push(MetricsRecord::loss(step, Split::Train, loss));
        let first = *initial.get_or_insert(loss);
        if !loss.is_finite() || loss > DIVERGENCE_FACTOR * first || grads.iter().any(|g| !g.is_finite()) {
            info!("diverged at step {step}: loss {loss}");
            diverged_at = Some(step);
            break;
        }
        optimizers.step(model.params_mut(), &grads, step)?;
        completed = step + 1;

        if t.profile_every > 0 && completed % t.profile_every == 0 {
            for &i in &profiled {
                let m = optimizers.momentum(i).expect("projection on muon");
                let partition = optimizers.profile_partition(i)?;
                let whitening = optimizers.whitening(i).expect("projection on muon");
                let name = &model.info()[i].name;
                let mut ranks = profile_ranks(m, &partition, config.criterion.rank_policy())?;
                ranks.step = completed;
                ranks.parameter_id = name.clone();
                let mut gap = profile_norm_gap(m, &partition, &whitening)?;
                gap.step = completed;
                gap.parameter_id = name.clone();
                records.push(profile_record(&ranks, &gap));
            }
        }

        if completed % t.eval_every == 0 || completed == t.steps {
            let mut total = 0.0;
            for b in &val_set {
                total += model.loss(b)?;
            }
            let val = total / val_set.len() as f64;
            debug!("step {completed}: train {loss:.4} val {val:.4}");
            records.push(MetricsRecord::loss(completed, Split::Val, val));
            if !val.is_finite() {
                diverged_at = Some(completed);
                break;
            }
            final_val = Some(val);
            best_val = Some(best_val.map_or(val, |b| b.min(val)));
        }
    }
    Ok(TrainOutcome {
        records,
        model,
        steps_completed: completed,
        final_val_loss: final_val,
        best_val_loss: best_val,
        diverged_at,
    })
}
