use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{adam_step, AdamConfig, OptimizerState, TrainConfig};
use crate::data::{build_rul_targets, Dataset, Sequence};
use crate::diff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::eval::{predict_cuts, rmse_pairs, EvalUnit, HealthIndexModel, PredictionMode};
use crate::model::{BoundModel, Group, ModelParams, NetworkSpec};
use crate::objectives::{
    adversarial_losses_from_logits, combined_pass, elbo_pass, filter_means, recognition_samples, sample_prior_sequence,
    SequenceNoise,
};
use crate::rng::Rng;

/// Training aborts after this many non-finite batches in a row.
pub const MAX_CONSECUTIVE_NONFINITE: u32 = 10;

/// Fractions of life at which held-out units are scored.
pub const VALIDATION_CUTS: [f64; 5] = [0.3, 0.45, 0.6, 0.75, 0.9];

const INIT_STREAM: u64 = 0x494E_4954;
const SHUFFLE_STREAM: u64 = 0x5348_5546 << 32;
const STEP_STREAM: u64 = 0x5354_4550 << 32;

pub(crate) fn step_rng(seed: u64, step: u64) -> Rng {
    Rng::stream(seed, STEP_STREAM.wrapping_add(step))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainUnit {
    pub id: u32,
    pub seq: Sequence,
    /// Per-cycle RUL targets, required when RUL supervision is on.
    pub targets: Option<Vec<f64>>,
}

/// Everything a run consumes: training trajectories, held-out validation
/// cuts used for model selection, and optionally scored test units.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingData {
    pub train: Vec<TrainUnit>,
    pub validation: Vec<EvalUnit>,
    pub test: Vec<EvalUnit>,
    pub cap: f64,
}

impl TrainingData {
    /// Unlabelled trajectories with no validation or test units.
    pub fn unsupervised(seqs: Vec<Sequence>) -> Self {
        let train = seqs
            .into_iter()
            .enumerate()
            .map(|(i, seq)| TrainUnit { id: i as u32 + 1, seq, targets: None })
            .collect();
        Self { train, validation: Vec::new(), test: Vec::new(), cap: crate::data::DEFAULT_RUL_CAP }
    }

    /// Builds the run inputs from normalized datasets. The last
    /// `validation_fraction` of training units are held out and cut at
    /// [`VALIDATION_CUTS`].
    pub fn from_datasets(
        train: &Dataset,
        test: Option<(&Dataset, &BTreeMap<u32, f64>)>,
        cap: f64,
        validation_fraction: f64,
    ) -> Result<Self> {
        let (kept, held) = if validation_fraction > 0.0 {
            train.split_validation(validation_fraction)
        } else {
            let mut empty = train.clone();
            empty.units.clear();
            (train.clone(), empty)
        };
        let targets = build_rul_targets(&kept, cap)?;
        let train_units = kept
            .sequences()
            .into_iter()
            .map(|(id, seq)| TrainUnit { id, seq, targets: targets.unit(id).map(<[f64]>::to_vec) })
            .collect();
        let validation = held.sequences().into_iter().map(|(id, seq)| EvalUnit::validation(id, seq, &VALIDATION_CUTS)).collect();
        let test = match test {
            None => Vec::new(),
            Some((ds, truth)) => ds
                .sequences()
                .into_iter()
                .map(|(id, seq)| {
                    let t = *truth.get(&id).ok_or_else(|| Error::Data(format!("no ground truth for test unit {id}")))?;
                    Ok(EvalUnit::at_end(id, seq, t))
                })
                .collect::<Result<_>>()?,
        };
        Ok(Self { train: train_units, validation, test, cap })
    }

    fn check(&self, spec: &NetworkSpec, config: &TrainConfig) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::InvalidArgument("no training trajectories".into()));
        }
        let seqs = self.train.iter().map(|u| &u.seq).chain(self.validation.iter().chain(&self.test).map(|u| &u.seq));
        for seq in seqs {
            if seq.is_empty() {
                return Err(Error::Data("empty trajectory".into()));
            }
            if seq.x_dim() != spec.n_x || seq.u_dim() != spec.n_u {
                return Err(Error::SpecMismatch(format!(
                    "data has n_x={} n_u={}, network expects n_x={} n_u={}",
                    seq.x_dim(),
                    seq.u_dim(),
                    spec.n_x,
                    spec.n_u
                )));
            }
        }
        if config.rul_supervision {
            for u in &self.train {
                match &u.targets {
                    Some(t) if t.len() == u.seq.len() => {}
                    _ => {
                        return Err(Error::InvalidArgument(format!(
                            "RUL supervision needs one target per cycle, unit {} has none",
                            u.id
                        )))
                    }
                }
            }
        }
        Ok(())
    }
}

/// Batch-averaged diagnostics of one step; `None` fields were not computed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Number of completed steps, starting at 1.
    pub step: u64,
    pub skipped: bool,
    /// Combined-phase ELBO divided by trajectory length.
    pub elbo_per_step: Option<f64>,
    pub kl_per_step: Option<f64>,
    pub adv_disc: Option<f64>,
    pub adv_gen: Option<f64>,
    pub rul_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub val_rmse: Option<f64>,
    pub test_rmse: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

/// Complete resumable state of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub disc_opt: OptimizerState,
    pub gen_opt: OptimizerState,
    pub rul_opt: Option<OptimizerState>,
    /// Generator positioned at the next step's stream.
    pub rng: Rng,
    pub step: u64,
    pub consecutive_nonfinite: u32,
    pub skipped_batches: u64,
    pub trace: TrainTrace,
    pub best: Option<EvalRecord>,
    pub best_params: Option<ModelParams>,
    /// Set when the last evaluation ran only because training ended off the
    /// `eval_every` schedule. Continuing past that step undoes it, so a
    /// resumed run matches an uninterrupted one.
    pub provisional: Option<Provisional>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Provisional {
    pub step: u64,
    /// The selection the evaluation replaced, when it improved on it.
    pub replaced: Option<(Option<EvalRecord>, Option<ModelParams>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub best: Option<EvalRecord>,
    pub best_params: Option<ModelParams>,
    pub trace: TrainTrace,
    pub skipped_batches: u64,
}

impl TrainOutcome {
    /// Best-on-validation parameters, or the final ones if no evaluation ran.
    pub fn selected(&self) -> &ModelParams {
        self.best_params.as_ref().unwrap_or(&self.params)
    }
}

pub struct Trainer<'d> {
    data: &'d TrainingData,
    state: TrainState,
    order: Option<(u64, Vec<usize>)>,
}

/// Turns numerical blow-ups into `None` and passes real errors through.
fn finite<T>(r: Result<T>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::NonFinite(_)) | Err(Error::NonPositiveLog(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Batch-mean gradient over `units`, accumulated in the given order.
/// Returns `None` when any loss or gradient is non-finite.
fn batch_gradients<F>(
    params: &ModelParams,
    trainable: &[Group],
    units: &[&TrainUnit],
    mut loss: F,
) -> Result<Option<(Gradients, Vec<Vec<f64>>)>>
where
    F: for<'t, 'p> FnMut(&BoundModel<'t, 'p>, &TrainUnit) -> Result<(Var<'t>, Vec<f64>)>,
{
    let mut total = Gradients::default();
    let mut aux = Vec::with_capacity(units.len());
    for unit in units {
        let tape = Tape::new();
        let model = BoundModel::new(&tape, params, trainable);
        let Some((l, a)) = finite(loss(&model, unit))? else { return Ok(None) };
        if !l.item().is_finite() {
            return Ok(None);
        }
        let Some(g) = finite(tape.backward(l))? else { return Ok(None) };
        if !g.is_finite() {
            return Ok(None);
        }
        total.merge(&g);
        aux.push(a);
    }
    total.scale(1.0 / units.len() as f64);
    Ok(Some((total, aux)))
}

fn column_mean(aux: &[Vec<f64>], k: usize) -> f64 {
    aux.iter().map(|a| a[k]).sum::<f64>() / aux.len() as f64
}

/// Mean over cycles of the squared RUL error in units of the cap, on the
/// deterministic mean-fed pass.
fn rul_loss<'t>(model: &BoundModel<'t, '_>, unit: &TrainUnit, cap: f64) -> Result<Var<'t>> {
    let targets = unit.targets.as_ref().ok_or_else(|| Error::InvalidArgument(format!("unit {} has no RUL targets", unit.id)))?;
    let states = filter_means(model, &unit.seq)?;
    let mut total: Option<Var<'t>> = None;
    for ((h, mean), &y) in states.iter().zip(targets) {
        let err = model.rul_head(h, *mean)?.add_const(-y)?.scale(1.0 / cap)?.square()?;
        total = Some(match total {
            Some(t) => t.add(err)?,
            None => err,
        });
    }
    total.expect("nonempty").scale(1.0 / states.len() as f64)
}

fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

impl<'d> Trainer<'d> {
    pub fn new(data: &'d TrainingData, spec: &NetworkSpec, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        spec.validate()?;
        data.check(spec, config)?;
        let mut params = ModelParams::init(spec, &mut Rng::stream(config.seed, INIT_STREAM))?;
        if config.rul_supervision {
            let all: Vec<f64> = data.train.iter().flat_map(|u| u.targets.iter().flatten().copied()).collect();
            let mean = all.iter().sum::<f64>() / all.len() as f64;
            let b = params.layout().rul_out.b;
            params.set(b, &[softplus_inverse(mean.max(1e-3))])?;
        }
        let disc_opt = OptimizerState::for_groups(config.adam(), &params, &[Group::Psi]);
        let gen_opt = OptimizerState::for_groups(config.adam(), &params, &[Group::Theta, Group::Phi]);
        let rul_opt = config.rul_supervision.then(|| OptimizerState::for_groups(config.rul_adam(), &params, &[Group::Rho]));
        let state = TrainState {
            config: config.clone(),
            params,
            disc_opt,
            gen_opt,
            rul_opt,
            rng: step_rng(config.seed, 0),
            step: 0,
            consecutive_nonfinite: 0,
            skipped_batches: 0,
            trace: TrainTrace::default(),
            best: None,
            best_params: None,
            provisional: None,
        };
        Ok(Self { data, state, order: None })
    }

    pub fn from_state(data: &'d TrainingData, state: TrainState) -> Result<Self> {
        state.config.validate()?;
        data.check(state.params.spec(), &state.config)?;
        if state.rng != step_rng(state.config.seed, state.step) {
            return Err(Error::Checkpoint(format!("generator state does not belong to step {}", state.step)));
        }
        if state.config.rul_supervision != state.rul_opt.is_some() {
            return Err(Error::Checkpoint("RUL optimizer state does not match the configuration".into()));
        }
        Ok(Self { data, state, order: None })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.data.train.len().div_ceil(self.state.config.trajectories_per_batch) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.state.config.epochs as u64 * self.steps_per_epoch()
    }

    pub fn is_finished(&self) -> bool {
        self.state.step >= self.total_steps()
    }

    /// Indices into `data.train` for step `step`, sorted by unit id.
    fn batch(&mut self, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let epoch = step / spe;
        if self.order.as_ref().map(|o| o.0) != Some(epoch) {
            let mut order: Vec<usize> = (0..self.data.train.len()).collect();
            Rng::stream(self.state.config.seed, SHUFFLE_STREAM.wrapping_add(epoch)).shuffle(&mut order);
            self.order = Some((epoch, order));
        }
        let order = &self.order.as_ref().expect("just set").1;
        let b = self.state.config.trajectories_per_batch;
        let start = (step % spe) as usize * b;
        let mut batch = order[start..(start + b).min(order.len())].to_vec();
        batch.sort_by_key(|&i| self.data.train[i].id);
        batch
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.total_steps())
    }

    /// Advances to `min(target, total_steps)` completed steps.
    pub fn run_until(&mut self, target: u64) -> Result<()> {
        let end = target.min(self.total_steps());
        while self.state.step < end {
            self.step_once()?;
        }
        Ok(())
    }

    fn step_once(&mut self) -> Result<()> {
        if let Some(p) = self.state.provisional.take() {
            debug_assert_eq!(self.state.trace.evals.last().map(|e| e.step), Some(p.step));
            self.state.trace.evals.pop();
            if let Some((best, params)) = p.replaced {
                self.state.best = best;
                self.state.best_params = params;
            }
        }
        let step = self.state.step;
        let batch = self.batch(step);
        let mut rng = step_rng(self.state.config.seed, step);
        let snapshot = (
            self.state.params.clone(),
            self.state.disc_opt.clone(),
            self.state.gen_opt.clone(),
            self.state.rul_opt.clone(),
        );
        let record = self.phases(&batch, &mut rng)?;
        self.state.step += 1;
        self.state.rng = step_rng(self.state.config.seed, self.state.step);
        match record {
            Some(mut rec) => {
                rec.step = self.state.step;
                self.state.consecutive_nonfinite = 0;
                self.state.trace.steps.push(rec);
            }
            None => {
                (self.state.params, self.state.disc_opt, self.state.gen_opt, self.state.rul_opt) = snapshot;
                self.state.consecutive_nonfinite += 1;
                self.state.skipped_batches += 1;
                self.state.trace.steps.push(StepRecord { step: self.state.step, skipped: true, ..Default::default() });
                log::warn!(
                    "step {}: non-finite loss or gradient, batch skipped ({} in a row)",
                    self.state.step,
                    self.state.consecutive_nonfinite
                );
                if self.state.consecutive_nonfinite >= MAX_CONSECUTIVE_NONFINITE {
                    return Err(Error::Diverged(format!(
                        "{} consecutive non-finite batches, last at step {}",
                        self.state.consecutive_nonfinite, self.state.step
                    )));
                }
            }
        }
        let every = self.state.config.eval_every as u64;
        if self.state.step % every == 0 {
            self.evaluate()?;
        } else if self.state.step == self.total_steps() {
            let before = (self.state.best.clone(), self.state.best_params.clone());
            let evals = self.state.trace.evals.len();
            self.evaluate()?;
            if self.state.trace.evals.len() > evals {
                let replaced = (self.state.best != before.0).then_some(before);
                self.state.provisional = Some(Provisional { step: self.state.step, replaced });
            }
        }
        Ok(())
    }

    /// Runs every phase of one step. `None` means the batch hit a
    /// non-finite value and the caller must roll back.
    fn phases(&mut self, batch: &[usize], rng: &mut Rng) -> Result<Option<StepRecord>> {
        let cfg = self.state.config.clone();
        let units: Vec<&TrainUnit> = batch.iter().map(|&i| &self.data.train[i]).collect();
        let n_z = self.state.params.spec().n_z;
        let cap = self.data.cap;
        let mut rec = StepRecord::default();

        for _ in 0..cfg.disc_steps_per_gen_step {
            let res = batch_gradients(&self.state.params, &[Group::Psi], &units, |model, u| {
                let noise = SequenceNoise::draw(rng, u.seq.len(), n_z);
                let fake = recognition_samples(model, &u.seq, &noise.posterior)?;
                let real = sample_prior_sequence(model, &u.seq, &noise.prior, cfg.markovian)?;
                let logits = [model.discriminator_logit(&real)?, model.discriminator_logit(&fake)?];
                let (disc, gen) = adversarial_losses_from_logits(&logits[..1], &logits[1..])?;
                Ok((disc, vec![disc.item(), gen.item()]))
            })?;
            let Some((mut grads, aux)) = res else { return Ok(None) };
            grads.clip_global_norm(cfg.gradient_clip_norm);
            if !adam_step(&mut self.state.params, &grads, &mut self.state.disc_opt)? {
                return Ok(None);
            }
            rec.adv_disc = Some(column_mean(&aux, 0));
        }

        let joint = cfg.rul_supervision && cfg.joint_rul;
        let trainable: &[Group] = if joint { &[Group::Theta, Group::Phi, Group::Rho] } else { &[Group::Theta, Group::Phi] };
        let res = batch_gradients(&self.state.params, trainable, &units, |model, u| {
            let noise = SequenceNoise::draw(rng, u.seq.len(), n_z);
            let (b, combined, _) = combined_pass(model, &u.seq, &noise, cfg.lambda_adv, cfg.markovian)?;
            let t = u.seq.len() as f64;
            let mut loss = combined.scale(-1.0 / t)?;
            let mut rul = 0.0;
            if joint {
                let r = rul_loss(model, u, cap)?;
                rul = r.item();
                loss = loss.add(r.scale(cfg.rul_weight)?)?;
            }
            Ok((loss, vec![b.elbo() / t, b.kl_total / t, b.adv_gen, rul]))
        })?;
        let Some((grads, aux)) = res else { return Ok(None) };
        let (mut gen_grads, mut rul_grads) = (grads.clone(), grads);
        gen_grads.retain(|id| self.state.gen_opt.covers(id));
        rul_grads.retain(|id| !self.state.gen_opt.covers(id));
        gen_grads.clip_global_norm(cfg.gradient_clip_norm);
        if !adam_step(&mut self.state.params, &gen_grads, &mut self.state.gen_opt)? {
            return Ok(None);
        }
        rec.elbo_per_step = Some(column_mean(&aux, 0));
        rec.kl_per_step = Some(column_mean(&aux, 1));
        if cfg.lambda_adv > 0.0 {
            rec.adv_gen = Some(column_mean(&aux, 2));
        }

        if cfg.rul_supervision {
            let (grads, loss) = if joint {
                (rul_grads, column_mean(&aux, 3))
            } else {
                let res = batch_gradients(&self.state.params, &[Group::Rho], &units, |model, u| {
                    let r = rul_loss(model, u, cap)?;
                    Ok((r, vec![r.item()]))
                })?;
                let Some((g, aux)) = res else { return Ok(None) };
                (g, column_mean(&aux, 0))
            };
            let mut grads = grads;
            grads.clip_global_norm(cfg.gradient_clip_norm);
            let opt = self.state.rul_opt.as_mut().expect("created with supervision");
            if !adam_step(&mut self.state.params, &grads, opt)? {
                return Ok(None);
            }
            rec.rul_loss = Some(loss);
        }
        Ok(Some(rec))
    }

    /// Scores the current parameters and updates the best-on-validation
    /// snapshot.
    fn evaluate(&mut self) -> Result<()> {
        let data = self.data;
        if data.validation.is_empty() && data.test.is_empty() {
            return Ok(());
        }
        let params = &self.state.params;
        let mode = if self.state.config.rul_supervision { PredictionMode::Supervised } else { PredictionMode::HealthIndex };
        let health = match mode {
            PredictionMode::Supervised => None,
            PredictionMode::HealthIndex => {
                let train: Vec<(u32, Sequence)> = data.train.iter().map(|u| (u.id, u.seq.clone())).collect();
                Some(HealthIndexModel::fit(params, &train, data.cap)?)
            }
        };
        let score = |units: &[EvalUnit]| -> Result<Option<f64>> {
            if units.is_empty() {
                return Ok(None);
            }
            let preds = predict_cuts(params, units, mode, health.as_ref())?;
            Ok(Some(rmse_pairs(preds.into_iter().map(|(_, p, t)| (p, t)))?))
        };
        let rec = EvalRecord { step: self.state.step, val_rmse: score(&data.validation)?, test_rmse: score(&data.test)? };
        let improved = match (&self.state.best, rec.val_rmse) {
            (_, None) => true,
            (None, Some(v)) => v.is_finite(),
            (Some(best), Some(v)) => v < best.val_rmse.unwrap_or(f64::INFINITY),
        };
        if improved {
            self.state.best = Some(rec.clone());
            self.state.best_params = Some(self.state.params.clone());
        }
        self.state.trace.evals.push(rec);
        Ok(())
    }

    pub fn into_outcome(self) -> TrainOutcome {
        let s = self.state;
        TrainOutcome {
            params: s.params,
            best: s.best,
            best_params: s.best_params,
            trace: s.trace,
            skipped_batches: s.skipped_batches,
        }
    }
}

/// Trains a fresh model on `data` for `config.epochs` epochs.
pub fn train(data: &TrainingData, spec: &NetworkSpec, config: &TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(data, spec, config)?;
    trainer.run()?;
    Ok(trainer.into_outcome())
}

/// Plain stochastic ELBO ascent over the parameters in `groups`, cycling
/// through `seqs`; no adversary and no RUL head. Returns the single-sample
/// ELBO recorded at every step before its update.
#[allow(clippy::too_many_arguments)]
pub fn maximize_elbo(
    params: &mut ModelParams,
    groups: &[Group],
    seqs: &[Sequence],
    steps: usize,
    adam: AdamConfig,
    clip: f64,
    seed: u64,
    markovian: bool,
) -> Result<Vec<f64>> {
    if seqs.is_empty() {
        return Err(Error::InvalidArgument("no sequences".into()));
    }
    let mut opt = OptimizerState::for_groups(adam, params, groups);
    let n_z = params.spec().n_z;
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let seq = &seqs[step % seqs.len()];
        let noise = SequenceNoise::draw(&mut step_rng(seed, step as u64), seq.len(), n_z);
        let tape = Tape::new();
        let model = BoundModel::new(&tape, params, groups);
        let pass = elbo_pass(&model, seq, &noise.posterior, markovian)?;
        trace.push(pass.elbo.item());
        let mut grads = tape.backward(pass.elbo.scale(-1.0 / seq.len() as f64)?)?;
        grads.clip_global_norm(clip);
        adam_step(params, &grads, &mut opt)?;
    }
    Ok(trace)
}
