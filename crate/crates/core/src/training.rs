//! Composite loss, Adam, finite-difference gradient verification and the
//! training loop.

use std::io::Write;
use std::marker::PhantomData;
use std::sync::mpsc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::action::{ActionChunk, CONTINUOUS_DIM};
use crate::dataset::{BatchSchedule, Dataset, SampleIndex, SamplerKind, TrainingSample};
use crate::nn::{sigmoid, Real};
use crate::policy::{
    target_arrays, ChunkModel, LatentDist, OutputGrads, PolicyError, PolicyOutput, TrainOutputs, LOGVAR_MAX, LOGVAR_MIN,
};

/// Probability clamp used by the boolean loss and the entropy signal.
pub const PROB_EPS: f64 = 1e-7;
pub const BOOL_WEIGHT: f64 = 0.2;
pub const BCE_SHARE: f64 = 0.7;
pub const BOOL_L1_SHARE: f64 = 0.3;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("shape mismatch for {what}: expected {expected}, got {actual}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite gradient at parameter {index}; step skipped")]
    NonFiniteGradient { index: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("training set has no chunk-length windows")]
    EmptyDataset,
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

fn same_len(what: &'static str, a: usize, b: usize) -> Result<(), TrainError> {
    if a != b {
        return Err(TrainError::ShapeMismatch {
            what,
            expected: b,
            actual: a,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l1_cont: f64,
    pub l_bool: f64,
    pub kl: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l1_cont: f64, l_bool: f64, kl: f64, lambda_kl: f64) -> Self {
        Self {
            l1_cont,
            l_bool,
            kl,
            total: l1_cont + BOOL_WEIGHT * l_bool + lambda_kl * kl,
        }
    }
}

/// Mean absolute error over all entries.
pub fn continuous_l1(pred: &[f64], target: &[f64]) -> Result<f64, TrainError> {
    same_len("continuous prediction", pred.len(), target.len())?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// `0.7·mean BCE + 0.3·mean |p − y|` on ε-clamped probabilities.
pub fn bool_loss(probs: &[f64], targets: &[f64]) -> Result<f64, TrainError> {
    same_len("button probabilities", probs.len(), targets.len())?;
    if probs.is_empty() {
        return Ok(0.0);
    }
    let n = probs.len() as f64;
    let (mut bce, mut l1) = (0.0, 0.0);
    for (&p, &y) in probs.iter().zip(targets) {
        let p = clamp_prob(p);
        bce -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        l1 += (p - y).abs();
    }
    Ok(BCE_SHARE * bce / n + BOOL_L1_SHARE * l1 / n)
}

/// KL divergence of the diagonal Gaussian from the standard normal.
pub fn kl_divergence(dist: &LatentDist) -> f64 {
    let s: f64 = dist
        .mu
        .iter()
        .zip(&dist.logvar)
        .map(|(&m, &lv)| {
            let lv = lv.clamp(LOGVAR_MIN, LOGVAR_MAX);
            1.0 + lv - m * m - lv.exp()
        })
        .sum();
    (-0.5 * s).max(0.0)
}

/// Loss of one raw model output against a target chunk.
pub fn total_loss(
    output: &PolicyOutput,
    target: &ActionChunk,
    dist: &LatentDist,
    lambda_kl: f64,
) -> Result<LossBreakdown, TrainError> {
    same_len("target chunk length", target.frames.len(), output.len())?;
    let nb = output.num_buttons();
    let mut pred = Vec::with_capacity(output.len() * CONTINUOUS_DIM);
    let mut tgt = Vec::with_capacity(pred.capacity());
    let mut probs = Vec::with_capacity(output.len() * nb);
    let mut ys = Vec::with_capacity(probs.capacity());
    for (i, f) in target.frames.iter().enumerate() {
        same_len("target button count", f.num_buttons(), nb)?;
        let flat = f.flatten();
        pred.extend_from_slice(&output.continuous[i]);
        tgt.extend_from_slice(&flat.continuous);
        probs.extend(output.bool_logits[i].iter().map(|&l| sigmoid(l)));
        ys.extend(flat.buttons.iter().map(|&b| if b { 1.0 } else { 0.0 }));
    }
    Ok(LossBreakdown::new(
        continuous_l1(&pred, &tgt)?,
        bool_loss(&probs, &ys)?,
        kl_divergence(dist),
        lambda_kl,
    ))
}

/// Batch loss and its gradient with respect to the raw outputs. Targets are
/// `batch × H × 32` and `batch × H × B`.
pub fn batch_loss<F: Real>(
    out: &TrainOutputs<F>,
    target_cont: &[f64],
    target_bool: &[f64],
    lambda_kl: f64,
) -> Result<(LossBreakdown, OutputGrads<F>), TrainError> {
    same_len("continuous targets", target_cont.len(), out.continuous.len())?;
    same_len("button targets", target_bool.len(), out.logits.len())?;
    let nc = out.continuous.len().max(1) as f64;
    let mut l1 = 0.0;
    let mut d_continuous = Vec::with_capacity(out.continuous.len());
    for (&p, &t) in out.continuous.iter().zip(target_cont) {
        let d = p.to_f() - t;
        l1 += d.abs();
        let s = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        d_continuous.push(F::of(s / nc));
    }
    l1 /= nc;

    let nl = out.logits.len().max(1) as f64;
    let (mut bce, mut bl1) = (0.0, 0.0);
    let mut d_logits = Vec::with_capacity(out.logits.len());
    for (&x, &y) in out.logits.iter().zip(target_bool) {
        let raw = sigmoid(x.to_f());
        let p = clamp_prob(raw);
        bce -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        bl1 += (p - y).abs();
        let inside = raw > PROB_EPS && raw < 1.0 - PROB_EPS;
        let g = if inside {
            let dbce = -y / p + (1.0 - y) / (1.0 - p);
            let dl1 = (p - y).signum() * if p == y { 0.0 } else { 1.0 };
            BOOL_WEIGHT * (BCE_SHARE * dbce + BOOL_L1_SHARE * dl1) / nl * p * (1.0 - p)
        } else {
            0.0
        };
        d_logits.push(F::of(g));
    }
    let l_bool = if out.logits.is_empty() {
        0.0
    } else {
        BCE_SHARE * bce / nl + BOOL_L1_SHARE * bl1 / nl
    };

    let n = out.batch.max(1) as f64;
    let mut kl_sum = 0.0;
    let mut d_mu = Vec::with_capacity(out.mu.len());
    let mut d_logvar = Vec::with_capacity(out.logvar.len());
    for (&m, &lv) in out.mu.iter().zip(&out.logvar) {
        let (m, lv) = (m.to_f(), lv.to_f());
        kl_sum += -0.5 * (1.0 + lv - m * m - lv.exp());
        d_mu.push(F::of(lambda_kl * m / n));
        d_logvar.push(F::of(lambda_kl * -0.5 * (1.0 - lv.exp()) / n));
    }
    let kl = (kl_sum / n).max(0.0);
    Ok((
        LossBreakdown::new(l1, l_bool, kl, lambda_kl),
        OutputGrads {
            d_continuous,
            d_logits,
            d_mu,
            d_logvar,
        },
    ))
}

fn batch_targets(
    batch: &[TrainingSample],
    horizon: usize,
    num_buttons: usize,
) -> Result<(Vec<f64>, Vec<f64>), TrainError> {
    let mut cont = Vec::new();
    let mut bools = Vec::new();
    for s in batch {
        let (c, b) = target_arrays(s, horizon, num_buttons)?;
        cont.extend(c);
        bools.extend(b);
    }
    Ok((cont, bools))
}

/// Loss and parameter gradient for one batch with the given latent noise.
pub fn loss_and_gradient<F: Real, M: ChunkModel<F>>(
    model: &M,
    batch: &[TrainingSample],
    eps: &[F],
    lambda_kl: f64,
) -> Result<(LossBreakdown, Vec<F>), TrainError> {
    let (out, cache) = model.forward_train(batch, eps)?;
    let (tc, tb) = batch_targets(batch, model.horizon(), model.config().num_buttons)?;
    let (loss, grads) = batch_loss(&out, &tc, &tb, lambda_kl)?;
    Ok((loss, model.backward_train(&cache, &grads)))
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One Adam update. A non-finite gradient leaves params and state untouched.
pub fn optimizer_step<F: Real>(
    params: &mut [F],
    grads: &[F],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TrainError> {
    same_len("gradient", grads.len(), params.len())?;
    same_len("optimizer state", state.m.len(), params.len())?;
    if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient { index });
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..params.len() {
        let g = grads[i].to_f();
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        if mh != 0.0 {
            params[i] = F::of(params[i].to_f() - lr * mh / (vh.sqrt() + ADAM_EPS));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a kink of |·| or a clamp.
    pub skipped: usize,
}

#[derive(PartialEq)]
struct KinkSigns(Vec<i8>);

fn kink_signs(out: &TrainOutputs<f64>, tc: &[f64]) -> KinkSigns {
    let mut s = Vec::with_capacity(out.continuous.len() + out.logits.len() + out.logvar.len());
    s.extend(out.continuous.iter().zip(tc).map(|(p, t)| (p - t).signum() as i8));
    s.extend(out.logits.iter().map(|&x| {
        let p = sigmoid(x);
        (p > PROB_EPS && p < 1.0 - PROB_EPS) as i8
    }));
    s.extend(out.logvar.iter().map(|&v| (v > LOGVAR_MIN && v < LOGVAR_MAX) as i8));
    KinkSigns(s)
}

/// Compares the analytic gradient with central differences on `coords`
/// random parameters. Coordinates where the perturbation crosses a
/// non-differentiable point are replaced by fresh draws.
pub fn gradient_check<M: ChunkModel<f64>>(
    model: &mut M,
    batch: &[TrainingSample],
    lambda_kl: f64,
    fd_eps: f64,
    coords: usize,
    seed: u64,
) -> Result<GradCheckReport, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zd = model.latent_dim();
    let eps: Vec<f64> = (0..batch.len() * zd).map(|_| rng.sample(StandardNormal)).collect();
    let (tc, tb) = batch_targets(batch, model.horizon(), model.config().num_buttons)?;
    let (_, analytic) = loss_and_gradient(model, batch, &eps, lambda_kl)?;

    let eval = |m: &M| -> Result<(f64, KinkSigns), TrainError> {
        let (out, _) = m.forward_train(batch, &eps)?;
        let (loss, _) = batch_loss(&out, &tc, &tb, lambda_kl)?;
        Ok((loss.total, kink_signs(&out, &tc)))
    };
    let (_, centre) = eval(model)?;

    let n = model.params().len();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: 0,
        skipped: 0,
    };
    let mut attempts = 0;
    while report.checked < coords.min(n) && attempts < 20 * coords {
        attempts += 1;
        let i = rng.random_range(0..n);
        let orig = model.params()[i];
        model.params_mut()[i] = orig + fd_eps;
        let (lp, sp) = eval(model)?;
        model.params_mut()[i] = orig - fd_eps;
        let (lm, sm) = eval(model)?;
        model.params_mut()[i] = orig;
        if sp != centre || sm != centre {
            report.skipped += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * fd_eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub lambda_kl: f64,
    pub sampler: SamplerKind,
    pub seed: u64,
    /// Validation loss is computed every this many iterations (0 = never).
    pub val_every: u64,
    /// Batches assembled ahead of the optimizer on a helper thread (0–4).
    pub prefetch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-5,
            batch_size: 32,
            iterations: 20_000,
            lambda_kl: 10.0,
            sampler: SamplerKind::Episodic,
            seed: 0,
            val_every: 0,
            prefetch: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch size must be positive".into()));
        }
        if !(self.lambda_kl >= 0.0 && self.lambda_kl.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "lambda_kl must be >= 0, got {}",
                self.lambda_kl
            )));
        }
        if self.prefetch > 4 {
            return Err(TrainError::InvalidConfig(format!(
                "prefetch depth {} exceeds 4",
                self.prefetch
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub iteration: u64,
    pub loss: LossBreakdown,
    pub val_total: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub curve: Vec<CurveRow>,
    pub visits: Vec<SampleIndex>,
    pub skipped_steps: Vec<(u64, String)>,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "iteration,l1,l_bool,kl,total,val_total")?;
        for r in &self.curve {
            let val = r.val_total.map(|v| format!("{v:.9}")).unwrap_or_default();
            writeln!(
                w,
                "{},{:.9},{:.9},{:.9},{:.9},{}",
                r.iteration, r.loss.l1_cont, r.loss.l_bool, r.loss.kl, r.loss.total, val
            )?;
        }
        Ok(())
    }

    /// Moving average of training l1 over `window` rows ending at `iteration`.
    pub fn smoothed_l1(&self, iteration: u64, window: usize) -> Option<f64> {
        let end = self.curve.iter().position(|r| r.iteration == iteration)?;
        let start = (end + 1).saturating_sub(window);
        let rows = &self.curve[start..=end];
        Some(rows.iter().map(|r| r.loss.l1_cont).sum::<f64>() / rows.len() as f64)
    }

    pub fn last_val_total(&self) -> Option<f64> {
        self.curve.iter().rev().find_map(|r| r.val_total)
    }
}

/// Optimizer state plus the model being trained.
pub struct Trainer<F: Real, M: ChunkModel<F>> {
    pub model: M,
    pub adam: AdamState,
    /// Completed optimizer iterations.
    pub iteration: u64,
    pub cfg: TrainConfig,
    _f: PhantomData<F>,
}

const CKPT_MAGIC: &[u8; 4] = b"VRCK";
const CKPT_VERSION: u32 = 1;

impl<F: Real, M: ChunkModel<F>> Trainer<F, M> {
    pub fn new(model: M, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let n = model.params().len();
        Ok(Self {
            model,
            adam: AdamState::new(n),
            iteration: 0,
            cfg,
            _f: PhantomData,
        })
    }

    fn schedule(&self) -> BatchSchedule {
        BatchSchedule {
            kind: self.cfg.sampler,
            seed: self.cfg.seed,
            horizon: self.model.horizon(),
            batch_size: self.cfg.batch_size,
        }
    }

    /// Latent noise for iteration `k` (independent of batch order).
    fn noise(&self, k: u64, n: usize) -> Vec<F> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x0A7E_47_C0DE);
        rng.set_stream(k);
        (0..n * self.model.latent_dim())
            .map(|_| F::of(rng.sample::<f64, _>(StandardNormal)))
            .collect()
    }

    /// One optimizer step on an explicit batch.
    pub fn step(&mut self, batch: &[TrainingSample]) -> Result<LossBreakdown, TrainError> {
        let eps = self.noise(self.iteration, batch.len());
        let (loss, grad) = loss_and_gradient(&self.model, batch, &eps, self.cfg.lambda_kl)?;
        self.iteration += 1;
        optimizer_step(self.model.params_mut(), &grad, &mut self.adam, self.cfg.lr)?;
        Ok(loss)
    }

    /// Mean total loss over (up to 64) evenly spread validation windows with
    /// the latent at its posterior mean.
    pub fn validation_loss(&self, val: &Dataset) -> Result<Option<LossBreakdown>, TrainError> {
        let h = self.model.horizon();
        let history = self.model.config().history;
        let total = val.valid_pairs(h);
        if total == 0 {
            return Ok(None);
        }
        let mut pairs = Vec::new();
        for (e, ep) in val.episodes.iter().enumerate() {
            for t in 0..ep.valid_starts(h) {
                pairs.push(SampleIndex { episode: e, t });
            }
        }
        let take = pairs.len().min(64);
        let batch: Vec<TrainingSample> = (0..take)
            .map(|i| val.sample(pairs[i * pairs.len() / take], h, history))
            .collect();
        let eps = vec![F::zero(); take * self.model.latent_dim()];
        let (out, _) = self.model.forward_train(&batch, &eps)?;
        let (tc, tb) = batch_targets(&batch, h, self.model.config().num_buttons)?;
        Ok(Some(batch_loss(&out, &tc, &tb, self.cfg.lambda_kl)?.0))
    }

    /// Trains until `self.iteration == until`, appending to `log`.
    pub fn run(
        &mut self,
        train: &Dataset,
        val: Option<&Dataset>,
        until: u64,
        log: &mut TrainLog,
    ) -> Result<(), TrainError> {
        if train.valid_pairs(self.model.horizon()) == 0 {
            return Err(TrainError::EmptyDataset);
        }
        let schedule = self.schedule();
        let h = self.model.horizon();
        let history = self.model.config().history;
        let start = self.iteration;
        let assemble = |k: u64| -> (Vec<SampleIndex>, Vec<TrainingSample>) {
            let idx = schedule.batch(train, k);
            let samples = idx.iter().map(|&i| train.sample(i, h, history)).collect();
            (idx, samples)
        };
        let depth = self.cfg.prefetch;
        std::thread::scope(|scope| -> Result<(), TrainError> {
            let rx = if depth > 0 {
                let (tx, rx) = mpsc::sync_channel(depth);
                let assemble = &assemble;
                scope.spawn(move || {
                    for k in start..until {
                        if tx.send(assemble(k)).is_err() {
                            break;
                        }
                    }
                });
                Some(rx)
            } else {
                None
            };
            for k in start..until {
                let (idx, batch) = match &rx {
                    Some(rx) => rx.recv().expect("batch producer alive"),
                    None => assemble(k),
                };
                log.visits.extend_from_slice(&idx);
                let loss = match self.step(&batch) {
                    Ok(l) => l,
                    Err(TrainError::NonFiniteGradient { index }) => {
                        log.skipped_steps
                            .push((k + 1, format!("non-finite gradient at parameter {index}")));
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let it = self.iteration;
                let val_total = match val {
                    Some(v) if self.cfg.val_every > 0 && (it.is_multiple_of(self.cfg.val_every) || it == until) => {
                        self.validation_loss(v)?.map(|l| l.total)
                    }
                    _ => None,
                };
                log.curve.push(CurveRow {
                    iteration: it,
                    loss,
                    val_total,
                });
            }
            Ok(())
        })
    }

    /// Serializes exact parameters, optimizer state, iteration and a
    /// portable policy blob.
    pub fn checkpoint(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&F::BITS.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.adam.t.to_le_bytes());
        out.extend_from_slice(&(self.model.params().len() as u64).to_le_bytes());
        for p in self.model.params() {
            out.extend_from_slice(&p.to_f().to_le_bytes());
        }
        for v in self.adam.m.iter().chain(&self.adam.v) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let blob = self.model.to_blob();
        out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        out.extend_from_slice(&blob);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Restores a checkpoint into a trainer whose model has the same shape.
    pub fn resume(model: M, cfg: TrainConfig, bytes: &[u8]) -> Result<Self, TrainError> {
        let mut t = Self::new(model, cfg)?;
        let ck = parse_checkpoint(bytes)?;
        if ck.bits != F::BITS {
            return Err(TrainError::Checkpoint(format!(
                "checkpoint holds {}-bit parameters",
                ck.bits
            )));
        }
        same_len("checkpoint parameters", ck.params.len(), t.model.params().len())?;
        for (d, &s) in t.model.params_mut().iter_mut().zip(&ck.params) {
            *d = F::of(s);
        }
        t.iteration = ck.iteration;
        t.adam = ck.adam;
        Ok(t)
    }
}

struct ParsedCheckpoint {
    bits: u32,
    iteration: u64,
    params: Vec<f64>,
    adam: AdamState,
    blob_range: std::ops::Range<usize>,
}

fn parse_checkpoint(bytes: &[u8]) -> Result<ParsedCheckpoint, TrainError> {
    let bad = |m: &str| TrainError::Checkpoint(m.to_string());
    if bytes.len() < 36 || &bytes[..4] != CKPT_MAGIC {
        return Err(bad("not a checkpoint"));
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().unwrap()) {
        return Err(bad("checksum mismatch"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(body[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(body[o..o + 8].try_into().unwrap());
    if u32_at(4) != CKPT_VERSION {
        return Err(bad("unsupported checkpoint version"));
    }
    let bits = u32_at(8);
    let iteration = u64_at(12);
    let t = u64_at(20);
    let n = u64_at(28) as usize;
    let floats_end = 36usize
        .checked_add(n.checked_mul(24).ok_or_else(|| bad("size overflow"))?)
        .ok_or_else(|| bad("size overflow"))?;
    if body.len() < floats_end + 8 {
        return Err(bad("truncated"));
    }
    let f = |k: usize| f64::from_le_bytes(body[36 + 8 * k..44 + 8 * k].try_into().unwrap());
    let params = (0..n).map(f).collect();
    let m = (n..2 * n).map(f).collect();
    let v = (2 * n..3 * n).map(f).collect();
    let blob_len = u64_at(floats_end) as usize;
    let blob_start = floats_end + 8;
    if body.len() != blob_start + blob_len {
        return Err(bad("truncated"));
    }
    Ok(ParsedCheckpoint {
        bits,
        iteration,
        params,
        adam: AdamState { m, v, t },
        blob_range: blob_start..blob_start + blob_len,
    })
}

/// The policy blob embedded in a checkpoint.
pub fn checkpoint_policy_blob(bytes: &[u8]) -> Result<&[u8], TrainError> {
    let ck = parse_checkpoint(bytes)?;
    Ok(&bytes[ck.blob_range])
}

#[cfg(test)]
mod tests;
