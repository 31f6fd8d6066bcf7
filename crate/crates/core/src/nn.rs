//! Dense layers on the tape, Adam, and the shared training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Parameters either frozen as constants or exposed as tape inputs.
#[derive(Clone, Copy)]
pub enum Weights<'a> {
    Const(&'a [f64]),
    Var(&'a [Var]),
}

impl Weights<'_> {
    /// `W x + b` where `W` (`out × in`, row-major) starts at `offset`
    /// and `b` follows it.
    pub fn dense(&self, tape: &mut Tape, offset: usize, x: &[Var], out: usize) -> Vec<Var> {
        let n_in = x.len();
        let w_end = offset + out * n_in;
        match *self {
            Weights::Const(p) => tape.matvec_const(&p[offset..w_end], &p[w_end..w_end + out], x),
            Weights::Var(p) => {
                let one = tape.constant(1.0);
                let mut xs = x.to_vec();
                xs.push(one);
                (0..out)
                    .map(|o| {
                        let mut row = p[offset + o * n_in..offset + (o + 1) * n_in].to_vec();
                        row.push(p[w_end + o]);
                        tape.dot(&row, &xs)
                    })
                    .collect()
            }
        }
    }

    /// A single parameter as a tape node.
    pub fn scalar(&self, tape: &mut Tape, k: usize) -> Var {
        match *self {
            Weights::Const(p) => tape.constant(p[k]),
            Weights::Var(p) => p[k],
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Weights::Const(p) => p.len(),
            Weights::Var(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn dense_size(n_in: usize, n_out: usize) -> usize {
    n_in * n_out + n_out
}

/// Appends a dense layer with scaled normal weights and zero bias.
pub fn init_dense(params: &mut Vec<f64>, n_in: usize, n_out: usize, gain: f64, rng: &mut ChaCha8Rng) {
    let sd = gain / (n_in as f64).sqrt();
    for _ in 0..n_in * n_out {
        let z: f64 = StandardNormal.sample(rng);
        params.push(sd * z);
    }
    params.extend(std::iter::repeat_n(0.0, n_out));
}

/// Fully connected SiLU network with a linear last layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
}

impl Mlp {
    pub fn new(n_in: usize, hidden: &[usize], n_out: usize) -> Self {
        let mut sizes = vec![n_in];
        sizes.extend_from_slice(hidden);
        sizes.push(n_out);
        Mlp { sizes }
    }

    pub fn n_params(&self) -> usize {
        self.sizes.windows(2).map(|w| dense_size(w[0], w[1])).sum()
    }

    /// Last layer scaled by `last_gain` (zero gives an all-zero output).
    pub fn init(&self, params: &mut Vec<f64>, last_gain: f64, rng: &mut ChaCha8Rng) {
        let n = self.sizes.len() - 1;
        for (k, w) in self.sizes.windows(2).enumerate() {
            init_dense(params, w[0], w[1], if k + 1 == n { last_gain } else { 1.0 }, rng);
        }
    }

    pub fn forward(&self, tape: &mut Tape, w: Weights, offset: usize, x: &[Var]) -> Vec<Var> {
        let n = self.sizes.len() - 1;
        let mut h = x.to_vec();
        let mut off = offset;
        for (k, s) in self.sizes.windows(2).enumerate() {
            h = w.dense(tape, off, &h, s[1]);
            off += dense_size(s[0], s[1]);
            if k + 1 < n {
                h = h.into_iter().map(|v| tape.silu(v)).collect();
            }
        }
        h
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyper {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub lambda_e: f64,
    pub lambda_f: f64,
    pub seed: u64,
    /// Multiplicative learning-rate factor applied after every epoch.
    pub lr_decay: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            lr: 1e-3,
            batch_size: 16,
            epochs: 500,
            patience: 50,
            lambda_e: 0.1,
            lambda_f: 1.0,
            seed: 0,
            lr_decay: 1.0,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("invalid training hyperparameters {self:?}")));
        }
        if self.lambda_e < 0.0 || self.lambda_f < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean batch loss; absent for the pre-training evaluation.
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    pub improved: bool,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub params: Vec<f64>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub logs: Vec<EpochLog>,
}

/// CSV with one row per epoch plus a trailing `best` row.
pub fn logs_to_csv(logs: &[EpochLog]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,best\n");
    let fmt = |v: f64| format!("{v:e}");
    for l in logs {
        out.push_str(&format!(
            "{},{},{},{}\n",
            l.epoch,
            l.train_loss.map(fmt).unwrap_or_default(),
            fmt(l.val_loss),
            if l.improved { "*" } else { "" }
        ));
    }
    if let Some(best) = logs.iter().rfind(|l| l.improved) {
        out.push_str(&format!(
            "best,{},{},{}\n",
            best.train_loss.map(fmt).unwrap_or_default(),
            fmt(best.val_loss),
            best.epoch
        ));
    }
    out
}

/// Minibatch Adam with best-validation selection and early stopping.
///
/// `batch` returns the mean loss and its gradient over the given training
/// indices; `val` returns the validation loss. Epoch 0 evaluates the
/// initial parameters and takes part in the selection.
pub fn fit<B, V>(
    mut params: Vec<f64>,
    n_train: usize,
    hyper: &TrainHyper,
    mut batch: B,
    mut val: V,
) -> Result<FitResult>
where
    B: FnMut(&[f64], &[usize]) -> Result<(f64, Vec<f64>)>,
    V: FnMut(&[f64]) -> Result<f64>,
{
    hyper.validate()?;
    if n_train == 0 {
        return Err(Error::Validation("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x5eed_f00d);
    let mut adam = Adam::new(params.len(), hyper.lr);
    let v0 = val(&params)?;
    if !v0.is_finite() {
        return Err(Error::Divergence { epoch: 0, last_finite: None });
    }
    let mut best = (v0, 0usize, params.clone());
    let mut logs = vec![EpochLog { epoch: 0, train_loss: None, val_loss: v0, improved: true }];
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut last_finite = Some(0);
    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(hyper.batch_size) {
            let (loss, grad) = batch(&params, chunk)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { epoch, last_finite });
            }
            total += loss * chunk.len() as f64;
            adam.step(&mut params, &grad);
        }
        adam.lr *= hyper.lr_decay;
        let v = val(&params)?;
        if !v.is_finite() {
            return Err(Error::Divergence { epoch, last_finite });
        }
        last_finite = Some(epoch);
        let improved = v < best.0;
        if improved {
            best = (v, epoch, params.clone());
        }
        logs.push(EpochLog { epoch, train_loss: Some(total / n_train as f64), val_loss: v, improved });
        log::debug!("epoch {epoch}: train {:.4e} val {v:.4e}", total / n_train as f64);
        if epoch - best.1 >= hyper.patience.max(1) {
            break;
        }
    }
    Ok(FitResult { params: best.2, best_epoch: best.1, best_val: best.0, logs })
}
