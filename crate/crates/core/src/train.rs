//! Supervision, optimizer and the training loop.

use std::io::Write;
use std::sync::mpsc::sync_channel;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dcm::{MapKind, SaliencyMap};
use crate::error::{Error, Result};
use crate::harness::Sample;
use crate::config::ModelConfig;
use crate::model::{forward_with, HctModel, Layout};
use crate::numerics::{Graph, LossFn, ParamStore, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Drives shuffling and flip augmentation.
    pub seed: u64,
    /// Horizontal flips applied identically to rgb, depth and gt.
    pub flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            epochs: 50,
            lr_start: 1e-4,
            lr_end: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            flip: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end) {
            return Err(Error::Config(format!(
                "need lr_start >= lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps be positive".into()));
        }
        Ok(())
    }
}

/// Learning rate for `epoch`: log-linear from `lr_start` at epoch 0 to
/// `lr_end` at the last epoch. Both endpoints are returned verbatim.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::InvalidArgument {
            op: "lr_schedule",
            msg: format!("epoch {epoch} outside 0..{}", cfg.epochs),
        });
    }
    if epoch == 0 {
        return Ok(cfg.lr_start);
    }
    let last = cfg.epochs - 1;
    if epoch == last {
        return Ok(cfg.lr_end);
    }
    let t = epoch as f64 / last as f64;
    Ok(cfg.lr_start * (cfg.lr_end / cfg.lr_start).powf(t))
}

/// Six supervised terms and their total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown<T> {
    pub loss_r: T,
    pub loss_d: T,
    pub dcm: [T; 4],
    pub total: T,
}

impl<T: Scalar> LossBreakdown<T> {
    pub fn components(&self) -> [T; 6] {
        [self.loss_r, self.loss_d, self.dcm[0], self.dcm[1], self.dcm[2], self.dcm[3]]
    }

    /// Sum in the fixed order `r, d, 1, 2, 3, 4`; the graph uses the same order.
    pub fn sum_components(c: [T; 6]) -> T {
        c.into_iter().fold(T::zero(), |acc, v| acc + v)
    }

    fn from_components(c: [T; 6]) -> Self {
        Self {
            loss_r: c[0],
            loss_d: c[1],
            dcm: [c[2], c[3], c[4], c[5]],
            total: Self::sum_components(c),
        }
    }

    /// Componentwise mean, each component summed left to right; the total is
    /// re-summed from the means so the breakdown stays exact.
    pub fn mean(items: &[Self]) -> Self {
        let n = T::from_usize_exact(items.len());
        let mut c = [T::zero(); 6];
        for item in items {
            for (acc, v) in c.iter_mut().zip(item.components()) {
                *acc += v;
            }
        }
        let c = c.map(|v| v / n);
        Self::from_components(c)
    }
}

/// Graph handle of the total plus the recorded breakdown.
pub struct LossNodes<T> {
    pub total: Var,
    pub breakdown: LossBreakdown<T>,
}

/// Binary cross-entropy of each head against `gt`, summed in a fixed order.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    pred_r: &SaliencyMap,
    pred_d: &SaliencyMap,
    dcm_preds: &[SaliencyMap; 4],
    gt: &Tensor<T>,
) -> Result<LossNodes<T>> {
    let heads = [pred_r, pred_d, &dcm_preds[0], &dcm_preds[1], &dcm_preds[2], &dcm_preds[3]];
    let mut terms = Vec::with_capacity(6);
    for head in heads {
        if head.kind != MapKind::Logit {
            return Err(Error::InvalidArgument {
                op: "total_loss",
                msg: "losses take logit maps".into(),
            });
        }
        if gt.shape() != [head.h, head.w] {
            return Err(Error::Shape {
                op: "total_loss",
                left: vec![head.h, head.w],
                right: gt.shape().to_vec(),
            });
        }
        terms.push(g.stable_bce(head.values, gt)?);
    }
    let zero = g.constant(Tensor::scalar(T::zero()))?;
    let mut total = zero;
    for &t in &terms {
        total = g.add(total, t)?;
    }
    let c: [T; 6] = std::array::from_fn(|i| g.value(terms[i]).data()[0]);
    let breakdown = LossBreakdown::from_components(c);
    debug_assert_eq!(breakdown.total, g.value(total).data()[0]);
    Ok(LossNodes { total, breakdown })
}

/// First and second moment estimates, one tensor per parameter.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Gradients are checked for finiteness
/// before anything is written, so a failed step leaves parameters untouched.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &ParamStore<T>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads.get(name)?;
        if g.shape() != p.shape() || state.m.get(name)?.shape() != p.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name.to_string()));
        }
    }
    state.t += 1;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let t = i32::try_from(state.t).unwrap_or(i32::MAX);
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    let (lr, eps) = (T::lit(lr), T::lit(cfg.adam_eps));
    for (name, p) in params.iter_mut() {
        let g = grads.get(name)?.data();
        let m = state.m.get_mut(name)?.data_mut();
        for (mi, &gi) in m.iter_mut().zip(g) {
            *mi = b1 * *mi + (T::one() - b1) * gi;
        }
        let v = state.v.get_mut(name)?.data_mut();
        for (vi, &gi) in v.iter_mut().zip(g) {
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
        }
        let (m, v) = (state.m.get(name)?.data(), state.v.get(name)?.data());
        for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m).zip(v) {
            let mhat = mi / c1;
            let vhat = vi / c2;
            *pi -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Mean over the batch.
    pub loss: LossBreakdown<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub epoch_means: Vec<LossBreakdown<f64>>,
}

/// One log line: step, lr, six components, total; tab separated, 12
/// significant digits.
pub fn format_log_line(r: &StepRecord) -> String {
    let mut line = format!("{}\t{:.11e}", r.step, r.lr);
    for v in r.loss.components().into_iter().chain([r.loss.total]) {
        line.push_str(&format!("\t{v:.11e}"));
    }
    line
}

fn flip_horizontal<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let s = t.shape();
    let (h, w) = (s[0], s[1]);
    let c = t.len() / (h * w);
    let src = t.data();
    let mut out = Vec::with_capacity(t.len());
    for y in 0..h {
        for x in (0..w).rev() {
            let base = (y * w + x) * c;
            out.extend_from_slice(&src[base..base + c]);
        }
    }
    Tensor::new(s, out).expect("same shape")
}

struct Prepared<T> {
    rgb: Tensor<T>,
    depth: Tensor<T>,
    gt: Tensor<T>,
}

fn prepare<T: Scalar>(s: &Sample, flip: bool) -> Prepared<T> {
    let (rgb, depth, gt) = if flip {
        (flip_horizontal(&s.rgb), flip_horizontal(&s.depth), flip_horizontal(&s.gt))
    } else {
        (s.rgb.clone(), s.depth.clone(), s.gt.clone())
    };
    Prepared {
        rgb: rgb.cast(),
        depth: depth.cast(),
        gt: gt.cast(),
    }
}

/// Loss and parameter gradients of one sample.
pub fn sample_gradients<T: Scalar>(
    model: &HctModel<T>,
    rgb: &Tensor<T>,
    depth: &Tensor<T>,
    gt: &Tensor<T>,
) -> Result<(LossBreakdown<T>, ParamStore<T>)> {
    let mut g = Graph::new();
    let f = forward_with(&mut g, &model.params, &model.layout, &model.cfg, rgb, depth)?;
    let loss = total_loss(&mut g, &f.pred_r, &f.pred_d, &f.dcm_preds(), gt)?;
    let grads = g.backward(loss.total)?.to_store(&g, &model.params);
    Ok((loss.breakdown, grads))
}

/// Total training loss of one sample as a function of the parameters, at
/// whatever precision the caller evaluates it.
pub struct SampleLoss<'a> {
    pub layout: &'a Layout,
    pub cfg: &'a ModelConfig,
    pub sample: &'a Sample,
}

impl LossFn for SampleLoss<'_> {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, params: &ParamStore<T>) -> Result<Var> {
        let s = self.sample;
        let f = forward_with(g, params, self.layout, self.cfg, &s.rgb.cast(), &s.depth.cast())?;
        Ok(total_loss(g, &f.pred_r, &f.pred_d, &f.dcm_preds(), &s.gt.cast())?.total)
    }
}

/// Runs `cfg.epochs` epochs of mini-batch Adam over `data`.
///
/// Batches are assembled on a helper thread and handed over through a
/// bounded queue; the helper owns the only random stream (shuffle order and
/// flips), so results do not depend on thread timing. Each batch gradient is
/// the mean of per-sample gradients, accumulated in sample order.
pub fn train_loop<T: Scalar>(
    model: &mut HctModel<T>,
    data: &[Sample],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let mut state = AdamState::new(&model.params);
    let mut history = TrainHistory::default();
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);

    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = sync_channel::<Vec<Prepared<T>>>(2);
        let producer = scope.spawn(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut order: Vec<usize> = (0..data.len()).collect();
            for _ in 0..cfg.epochs {
                order.shuffle(&mut rng);
                for chunk in order.chunks(cfg.batch_size) {
                    let batch = chunk
                        .iter()
                        .map(|&i| {
                            let flip = cfg.flip && rng.random::<bool>();
                            prepare(&data[i], flip)
                        })
                        .collect();
                    if tx.send(batch).is_err() {
                        return;
                    }
                }
            }
        });

        let mut step = 0;
        for epoch in 0..cfg.epochs {
            let lr = lr_schedule(epoch, cfg)?;
            let mut epoch_losses = Vec::with_capacity(steps_per_epoch);
            for _ in 0..steps_per_epoch {
                let batch = rx.recv().map_err(|_| Error::Dataset("batch producer stopped".into()))?;
                let mut acc = model.params.zeros_like();
                let mut losses = Vec::with_capacity(batch.len());
                for s in &batch {
                    let (loss, grads) = sample_gradients(model, &s.rgb, &s.depth, &s.gt)?;
                    if !loss.total.is_finite() {
                        return Err(Error::NonFiniteLoss { step });
                    }
                    for ((_, a), (_, g)) in acc.iter_mut().zip(grads.iter()) {
                        for (x, &y) in a.data_mut().iter_mut().zip(g.data()) {
                            *x += y;
                        }
                    }
                    losses.push(loss);
                }
                let n = T::from_usize_exact(batch.len());
                for (_, a) in acc.iter_mut() {
                    for x in a.data_mut() {
                        *x /= n;
                    }
                }
                adam_step(&mut model.params, &acc, &mut state, lr, cfg)?;
                let mean = LossBreakdown::mean(&losses);
                let record = StepRecord {
                    step,
                    epoch,
                    lr,
                    loss: to_f64(mean),
                };
                if let Some(w) = log.as_deref_mut() {
                    writeln!(w, "{}", format_log_line(&record))?;
                }
                epoch_losses.push(record.loss);
                history.steps.push(record);
                step += 1;
            }
            history.epoch_means.push(LossBreakdown::mean(&epoch_losses));
        }
        drop(rx);
        producer.join().expect("batch producer panicked");
        Ok(())
    })?;
    Ok(history)
}

fn to_f64<T: Scalar>(l: LossBreakdown<T>) -> LossBreakdown<f64> {
    LossBreakdown {
        loss_r: l.loss_r.to_f64_lossy(),
        loss_d: l.loss_d.to_f64_lossy(),
        dcm: l.dcm.map(|v| v.to_f64_lossy()),
        total: l.total.to_f64_lossy(),
    }
}
