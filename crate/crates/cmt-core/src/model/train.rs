//! Teacher-forced training with Adam, plus the finite-difference gradient
//! check used to validate the hand-written backward pass.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::net::{loss_and_grad, LossBreakdown, SeqInput};
use crate::model::{GradBuf, ModelParams, ATTR_NAMES};
use crate::par::{map_slice, ExecMode};
use crate::tokens::TokenSequence;

/// One training piece: its token sequence and its own total beat count,
/// which drives the beat-timing encoding.
#[derive(Debug, Clone)]
pub struct TrainPiece {
    pub tokens: TokenSequence,
    pub n_beats: f64,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: ExecMode,
    /// Strip density and strength attributes from the training data (the
    /// rhythm-attribute ablation).
    pub ablate_rhythm_attrs: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            learning_rate: 1e-4,
            batch_size: 4,
            seed: 0,
            mode: ExecMode::default(),
            ablate_rhythm_attrs: false,
        }
    }
}

/// Mean per-head and total cross-entropy observed over one epoch.
#[derive(Debug, Clone, Copy)]
pub struct EpochLoss {
    pub epoch: usize,
    pub per_head: [f64; 7],
    pub total: f64,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Adam {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut ModelParams, grad: &GradBuf) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        let data = params.raw_mut();
        for (((p, &g), m), v) in data.iter_mut().zip(&grad.data).zip(&mut self.m).zip(&mut self.v) {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= self.lr * mhat / (vhat.sqrt() + Self::EPS);
        }
        params.quantize_f32();
    }
}

fn build_inputs(pieces: &[TrainPiece], ablate: bool) -> Result<Vec<SeqInput>> {
    pieces
        .iter()
        .map(|p| {
            let mut tokens = p.tokens.clone();
            if ablate {
                for tok in tokens.body.iter_mut() {
                    tok.density = None;
                    tok.strength = None;
                }
            }
            SeqInput::build(&tokens.prefix, &tokens.body, p.n_beats)
        })
        .collect()
}

/// Per-piece dropout seed, keyed by identity rather than scheduling order so
/// parallel and sequential runs match bit for bit.
fn piece_seed(base: u64, epoch: usize, piece: usize) -> u64 {
    base ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (piece as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

/// Trains in place, returning the per-epoch loss history.
pub fn train(
    params: &mut ModelParams,
    pieces: &[TrainPiece],
    cfg: &TrainConfig,
) -> Result<Vec<EpochLoss>> {
    if pieces.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("epochs and batch_size must be positive".into()));
    }
    let inputs = build_inputs(pieces, cfg.ablate_rhythm_attrs)?;
    let mut adam = Adam::new(params.n_params(), cfg.learning_rate);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dropout = params.config.dropout > 0.0;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        order.shuffle(&mut order_rng);
        let mut epoch_breakdown = LossBreakdown::default();
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<(GradBuf, LossBreakdown)>> =
                map_slice(cfg.mode, batch, |&idx| {
                    let mut grads = GradBuf::zeros(params);
                    let mut rng = dropout
                        .then(|| ChaCha8Rng::seed_from_u64(piece_seed(cfg.seed, epoch, idx)));
                    let breakdown =
                        loss_and_grad(params, &inputs[idx], Some(&mut grads), rng.as_mut())?;
                    Ok((grads, breakdown))
                });
            let mut batch_grad = GradBuf::zeros(params);
            let mut batch_breakdown = LossBreakdown::default();
            for r in results {
                let (g, b) = r?;
                batch_grad.add(&g);
                batch_breakdown.merge(&b);
            }
            let count = batch_breakdown.total_count();
            if count == 0 {
                continue;
            }
            // Loss is the mean over unmasked attribute-positions in the batch.
            batch_grad.scale(1.0 / count as f64);
            let batch_loss = batch_breakdown.total_sum() / count as f64;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss at epoch {epoch}"
                )));
            }
            adam.step(params, &batch_grad);
            epoch_breakdown.merge(&batch_breakdown);
        }
        let per_head = std::array::from_fn(|k| {
            if epoch_breakdown.counts[k] == 0 {
                0.0
            } else {
                epoch_breakdown.sums[k] / epoch_breakdown.counts[k] as f64
            }
        });
        let total = epoch_breakdown.total_sum() / epoch_breakdown.total_count().max(1) as f64;
        history.push(EpochLoss {
            epoch,
            per_head,
            total,
        });
    }
    Ok(history)
}

/// Evaluation loss (mean over unmasked attribute-positions) on a piece set.
pub fn eval_loss(params: &ModelParams, pieces: &[TrainPiece], ablate: bool) -> Result<EpochLoss> {
    let inputs = build_inputs(pieces, ablate)?;
    let mut total = LossBreakdown::default();
    for input in &inputs {
        total.merge(&loss_and_grad(params, input, None, None)?);
    }
    let per_head = std::array::from_fn(|k| {
        if total.counts[k] == 0 {
            0.0
        } else {
            total.sums[k] / total.counts[k] as f64
        }
    });
    Ok(EpochLoss {
        epoch: 0,
        per_head,
        total: total.total_sum() / total.total_count().max(1) as f64,
    })
}

/// Writes the loss history CSV: epoch, one column per head, total.
pub fn write_loss_csv(path: &Path, history: &[EpochLoss]) -> Result<()> {
    let mut out = String::from("epoch");
    for name in ATTR_NAMES {
        out.push(',');
        out.push_str(name);
    }
    out.push_str(",total\n");
    for e in history {
        out.push_str(&e.epoch.to_string());
        for v in e.per_head {
            out.push_str(&format!(",{v:.6}"));
        }
        out.push_str(&format!(",{:.6}\n", e.total));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckResult {
    pub checked: usize,
    pub max_rel_err: f64,
}

fn mean_loss(params: &ModelParams, inputs: &[SeqInput]) -> Result<f64> {
    let mut total = LossBreakdown::default();
    for input in inputs {
        total.merge(&loss_and_grad(params, input, None, None)?);
    }
    Ok(total.total_sum() / total.total_count().max(1) as f64)
}

/// Compares analytic gradients against central finite differences on a
/// random parameter subset. Dropout must be disabled (the loss has to be a
/// deterministic function of the parameters).
pub fn gradient_check(
    params: &ModelParams,
    pieces: &[TrainPiece],
    n_check: usize,
    seed: u64,
) -> Result<GradCheckResult> {
    if params.config.dropout != 0.0 {
        return Err(Error::InvalidArgument(
            "gradient check requires dropout 0".into(),
        ));
    }
    let inputs = build_inputs(pieces, false)?;
    let mut grads = GradBuf::zeros(params);
    let mut total = LossBreakdown::default();
    for input in &inputs {
        total.merge(&loss_and_grad(params, input, Some(&mut grads), None)?);
    }
    let count = total.total_count() as f64;
    grads.scale(1.0 / count);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.clone();
    let mut max_rel: f64 = 0.0;
    let h = 1e-3;
    for _ in 0..n_check {
        let i = rng.random_range(0..params.n_params());
        let orig = work.raw()[i];
        work.raw_mut()[i] = orig + h;
        let up = mean_loss(&work, &inputs)?;
        work.raw_mut()[i] = orig - h;
        let down = mean_loss(&work, &inputs)?;
        work.raw_mut()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let analytic = grads.data[i];
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(GradCheckResult {
        checked: n_check,
        max_rel_err: max_rel,
    })
}
