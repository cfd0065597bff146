//! Forward and backward passes.
//!
//! Pre-norm causal transformer blocks with exact attention, GELU feed-forward
//! and a final layer norm. The backward pass is hand-written against the flat
//! parameter registry; `loss_and_grad` returns unreduced per-head cross-
//! entropy sums plus counts so callers can apply mean-over-unmasked-positions
//! reduction across a whole batch.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{
    beat_position_encoding, body_beats, concat_width, initial_token_id, timing_bin, token_ids,
    vocab, GradBuf, ModelParams, ATTR_DIMS,
};
use crate::tokens::{CompoundToken, InitialToken};

const LN_EPS: f64 = 1e-5;
const NEG_INF: f64 = f64::NEG_INFINITY;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x.powi(3))).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x.powi(3));
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// A tokenized sequence ready for the model: initial-token ids, body
/// attribute ids, and per-position beats and timing bins.
#[derive(Debug, Clone)]
pub struct SeqInput {
    pub initial_ids: Vec<usize>,
    pub body_ids: Vec<[usize; 7]>,
    pub beats: Vec<f64>,
    pub bins: Vec<usize>,
}

impl SeqInput {
    pub fn build(prefix: &[InitialToken], body: &[CompoundToken], n_beats: f64) -> Result<SeqInput> {
        let initial_ids: Vec<usize> = prefix.iter().map(initial_token_id).collect();
        let body_ids: Vec<[usize; 7]> = body.iter().map(token_ids).collect::<Result<_>>()?;
        let mut beats = vec![0.0; prefix.len()];
        beats.extend(body_beats(body, n_beats));
        let bins = beats.iter().map(|&b| timing_bin(b, n_beats).0).collect();
        Ok(SeqInput {
            initial_ids,
            body_ids,
            beats,
            bins,
        })
    }

    pub fn len(&self) -> usize {
        self.initial_ids.len() + self.body_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn ln_forward(x: &Array2<f64>, g: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> (Array2<f64>, LnCache) {
    let n = x.nrows();
    let d = x.ncols();
    let mut xhat = Array2::zeros((n, d));
    let mut inv_std = Array1::zeros(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = istd;
        for j in 0..d {
            xhat[[i, j]] = (x[[i, j]] - mean) * istd;
        }
    }
    let mut y = xhat.clone();
    for i in 0..n {
        for j in 0..d {
            y[[i, j]] = y[[i, j]] * g[j] + b[j];
        }
    }
    (y, LnCache { xhat, inv_std })
}

/// Backward through layer norm; returns dx and accumulates dg/db.
fn ln_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: ArrayView1<'_, f64>,
    dg: &mut Array1<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    let n = dy.nrows();
    let d = dy.ncols();
    let mut dx = Array2::zeros((n, d));
    for i in 0..n {
        let mut sum_dyg = 0.0;
        let mut sum_dyg_xhat = 0.0;
        for j in 0..d {
            let dyg = dy[[i, j]] * g[j];
            sum_dyg += dyg;
            sum_dyg_xhat += dyg * cache.xhat[[i, j]];
            dg[j] += dy[[i, j]] * cache.xhat[[i, j]];
            db[j] += dy[[i, j]];
        }
        let inv_d = 1.0 / d as f64;
        for j in 0..d {
            let dyg = dy[[i, j]] * g[j];
            dx[[i, j]] = cache.inv_std[i]
                * (dyg - inv_d * sum_dyg - cache.xhat[[i, j]] * inv_d * sum_dyg_xhat);
        }
    }
    dx
}

struct LayerCache {
    ln1: LnCache,
    x_ln1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    attn_concat: Array2<f64>,
    attn_drop: Option<Array2<f64>>,
    ln2: LnCache,
    x_ln2: Array2<f64>,
    ff_pre: Array2<f64>,
    ff_act: Array2<f64>,
    ff_drop: Option<Array2<f64>>,
}

pub(crate) struct ForwardCache {
    concat: Array2<f64>,
    x0_rows: usize,
    layers: Vec<LayerCache>,
    ln_f: LnCache,
    pub hidden: Array2<f64>,
}

fn dropout_mask(shape: (usize, usize), rate: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let keep = 1.0 - rate;
    let mut mask = Array2::zeros(shape);
    for v in mask.iter_mut() {
        *v = if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 };
    }
    mask
}

/// Full forward pass; caches every intermediate needed by the backward pass.
/// `rng` enables dropout (training mode); `None` is deterministic evaluation.
pub(crate) fn forward(
    params: &ModelParams,
    input: &SeqInput,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardCache> {
    let cfg = &params.config;
    let h = &params.handles;
    let n = input.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty sequence".into()));
    }
    if n > cfg.max_len {
        return Err(Error::InvalidArgument(format!(
            "sequence length {n} exceeds maximum {}",
            cfg.max_len
        )));
    }
    let d = cfg.d_model;
    let n_prefix = input.initial_ids.len();
    let n_body = input.body_ids.len();

    // Token embeddings.
    let mut concat = Array2::zeros((n_body, concat_width()));
    for (row, ids) in input.body_ids.iter().enumerate() {
        let mut at = 0;
        for k in 0..7 {
            let table = params.m(h.attr_emb[k]);
            concat
                .slice_mut(s![row, at..at + ATTR_DIMS[k]])
                .assign(&table.row(ids[k]));
            at += ATTR_DIMS[k];
        }
    }
    let mut x = Array2::zeros((n, d));
    let initial = params.m(h.initial_emb);
    for (p, &id) in input.initial_ids.iter().enumerate() {
        x.row_mut(p).assign(&initial.row(id));
    }
    if n_body > 0 {
        let body_x = concat.dot(&params.m(h.w_in)) + params.v(h.b_in);
        x.slice_mut(s![n_prefix.., ..]).assign(&body_x);
    }
    // Additive encodings: beat position + beat timing.
    let timing = params.m(h.timing_emb);
    for p in 0..n {
        let bpe = beat_position_encoding(input.beats[p], d);
        let mut row = x.row_mut(p);
        row += &bpe;
        row += &timing.row(input.bins[p]);
    }

    let heads = cfg.heads;
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let dropout = cfg.dropout;
    let mut layers = Vec::with_capacity(cfg.layers);
    for lh in &h.layers {
        let x_in = x.clone();
        let (x_ln1, ln1) = ln_forward(&x_in, params.v(lh.ln1_g), params.v(lh.ln1_b));
        let q = x_ln1.dot(&params.m(lh.wq)) + params.v(lh.bq);
        let k = x_ln1.dot(&params.m(lh.wk)) + params.v(lh.bk);
        let v = x_ln1.dot(&params.m(lh.wv)) + params.v(lh.bv);

        let mut attn = Vec::with_capacity(heads);
        let mut attn_concat = Array2::zeros((n, d));
        for head in 0..heads {
            let cols = s![.., head * dk..(head + 1) * dk];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut scores = qh.dot(&kh.t());
            scores *= scale;
            for i in 0..n {
                for j in i + 1..n {
                    scores[[i, j]] = NEG_INF;
                }
            }
            // Row-wise softmax; masked entries exponentiate to zero.
            for i in 0..n {
                let mut row = scores.row_mut(i);
                let max = row.iter().cloned().fold(NEG_INF, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
            let out = scores.dot(&vh);
            attn_concat.slice_mut(cols).assign(&out);
            attn.push(scores);
        }
        let mut proj = attn_concat.dot(&params.m(lh.wo)) + params.v(lh.bo);
        let attn_drop = match (&mut rng, dropout > 0.0) {
            (Some(r), true) => {
                let mask = dropout_mask((n, d), dropout, r);
                proj *= &mask;
                Some(mask)
            }
            _ => None,
        };
        let x_mid = &x_in + &proj;

        let (x_ln2, ln2) = ln_forward(&x_mid, params.v(lh.ln2_g), params.v(lh.ln2_b));
        let ff_pre = x_ln2.dot(&params.m(lh.w1)) + params.v(lh.b1);
        let ff_act = ff_pre.mapv(gelu);
        let mut ff_out = ff_act.dot(&params.m(lh.w2)) + params.v(lh.b2);
        let ff_drop = match (&mut rng, dropout > 0.0) {
            (Some(r), true) => {
                let mask = dropout_mask((n, d), dropout, r);
                ff_out *= &mask;
                Some(mask)
            }
            _ => None,
        };
        x = &x_mid + &ff_out;

        layers.push(LayerCache {
            ln1,
            x_ln1,
            q,
            k,
            v,
            attn,
            attn_concat,
            attn_drop,
            ln2,
            x_ln2,
            ff_pre,
            ff_act,
            ff_drop,
        });
    }
    let (hidden, ln_f) = ln_forward(&x, params.v(h.ln_f_g), params.v(h.ln_f_b));
    Ok(ForwardCache {
        concat,
        x0_rows: n,
        layers,
        ln_f,
        hidden,
    })
}

/// Deterministic evaluation-mode hidden states for all positions.
pub fn forward_hidden(params: &ModelParams, input: &SeqInput) -> Result<Array2<f64>> {
    Ok(forward(params, input, None)?.hidden)
}

/// Per-attribute next-token logits.
#[derive(Debug, Clone)]
pub struct AttributeLogits {
    pub ttype: Vec<f64>,
    /// beat, density, strength, instrument, pitch, duration.
    pub attrs: [Vec<f64>; 6],
}

/// Stage-1 type logits for one hidden state.
pub fn type_logits(params: &ModelParams, hidden: ArrayView1<'_, f64>) -> Vec<f64> {
    let h = &params.handles;
    let logits = hidden.dot(&params.m(h.type_w)) + params.v(h.type_b);
    logits.to_vec()
}

/// Stage-2 attribute logits conditioned on a chosen type: the type embedding
/// is concatenated to the hidden state before each of the six heads.
pub fn attr_logits(params: &ModelParams, hidden: ArrayView1<'_, f64>, type_id: usize) -> [Vec<f64>; 6] {
    let h = &params.handles;
    let d = params.config.d_model;
    let type_dim = ATTR_DIMS[0];
    let mut cond = Array1::zeros(d + type_dim);
    cond.slice_mut(s![..d]).assign(&hidden);
    cond.slice_mut(s![d..]).assign(&params.m(h.attr_emb[0]).row(type_id));
    std::array::from_fn(|a| {
        let logits = cond.dot(&params.m(h.attr_w[a])) + params.v(h.attr_b[a]);
        logits.to_vec()
    })
}

/// Full next-token logits at the last position of `input`, with the type
/// heads evaluated for the given conditioning type.
pub fn next_logits(params: &ModelParams, input: &SeqInput, type_id: usize) -> Result<AttributeLogits> {
    let hidden = forward_hidden(params, input)?;
    let last = hidden.row(hidden.nrows() - 1);
    Ok(AttributeLogits {
        ttype: type_logits(params, last),
        attrs: attr_logits(params, last, type_id),
    })
}

/// Unreduced teacher-forced cross-entropy over the 7 heads.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    /// Per-head CE sums in canonical attribute order.
    pub sums: [f64; 7],
    /// Per-head counts of unmasked (position, head) pairs.
    pub counts: [usize; 7],
}

impl LossBreakdown {
    pub fn total_sum(&self) -> f64 {
        self.sums.iter().sum()
    }

    pub fn total_count(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &LossBreakdown) {
        for k in 0..7 {
            self.sums[k] += other.sums[k];
            self.counts[k] += other.counts[k];
        }
    }
}

fn softmax_vec(logits: ArrayView1<'_, f64>) -> Vec<f64> {
    let max = logits.iter().cloned().fold(NEG_INF, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= sum;
    }
    out
}

/// Teacher-forced loss (and, when `grads` is given, gradients of the
/// *unreduced sum*) for one sequence. Targets are the body tokens; attribute
/// heads are conditioned on the ground-truth type; `None` attributes are
/// masked from the loss.
pub fn loss_and_grad(
    params: &ModelParams,
    input: &SeqInput,
    grads: Option<&mut GradBuf>,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<LossBreakdown> {
    let cfg = &params.config;
    let h = &params.handles;
    let d = cfg.d_model;
    let type_dim = ATTR_DIMS[0];
    let n_prefix = input.initial_ids.len();
    let n_body = input.body_ids.len();
    let n = input.len();
    if n_prefix == 0 || n_body == 0 {
        return Err(Error::InvalidArgument(
            "sequence needs a prefix and a body".into(),
        ));
    }

    let cache = forward(params, input, rng)?;

    // Predicted positions p target body token t = p + 1 - n_prefix.
    let first_p = n_prefix - 1;
    let m = n - 1 - first_p;
    let mut hs = Array2::zeros((m, d));
    for (row, p) in (first_p..n - 1).enumerate() {
        hs.row_mut(row).assign(&cache.hidden.row(p));
    }
    let targets: Vec<[usize; 7]> = (0..m).map(|row| input.body_ids[row]).collect();

    let type_logits_all = hs.dot(&params.m(h.type_w)) + params.v(h.type_b);
    let type_table = params.m(h.attr_emb[0]);
    let mut cond = Array2::zeros((m, d + type_dim));
    cond.slice_mut(s![.., ..d]).assign(&hs);
    for (row, t) in targets.iter().enumerate() {
        cond.slice_mut(s![row, d..]).assign(&type_table.row(t[0]));
    }

    let mut breakdown = LossBreakdown::default();
    let mut dlogits_type = Array2::zeros((m, vocab::TYPE));
    for (row, t) in targets.iter().enumerate() {
        let probs = softmax_vec(type_logits_all.row(row));
        breakdown.sums[0] += -probs[t[0]].max(1e-300).ln();
        breakdown.counts[0] += 1;
        if grads.is_some() {
            for (j, &p) in probs.iter().enumerate() {
                dlogits_type[[row, j]] = p - if j == t[0] { 1.0 } else { 0.0 };
            }
        }
    }

    let mut dcond = Array2::zeros((m, d + type_dim));
    let mut attr_dlogits: Vec<Array2<f64>> = Vec::with_capacity(6);
    for a in 0..6 {
        let va = vocab::SIZES[a + 1];
        let logits = cond.dot(&params.m(h.attr_w[a])) + params.v(h.attr_b[a]);
        let mut dl = Array2::zeros((m, va));
        for (row, t) in targets.iter().enumerate() {
            let target = t[a + 1];
            if target == 0 {
                continue; // None target: masked from the loss
            }
            let probs = softmax_vec(logits.row(row));
            breakdown.sums[a + 1] += -probs[target].max(1e-300).ln();
            breakdown.counts[a + 1] += 1;
            if grads.is_some() {
                for (j, &p) in probs.iter().enumerate() {
                    dl[[row, j]] = p - if j == target { 1.0 } else { 0.0 };
                }
            }
        }
        attr_dlogits.push(dl);
    }

    if !breakdown.total_sum().is_finite() {
        return Err(Error::Diverged("non-finite loss".into()));
    }

    let Some(grads) = grads else {
        return Ok(breakdown);
    };

    // ---- Head backward ----
    let mut dhs = dlogits_type.dot(&params.m(h.type_w).t());
    {
        let mut g = grads.m(params, h.type_w);
        g += &hs.t().dot(&dlogits_type);
        let mut g = grads.m(params, h.type_b);
        g += &dlogits_type.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    for (a, dl) in attr_dlogits.iter().enumerate() {
        dcond += &dl.dot(&params.m(h.attr_w[a]).t());
        let mut g = grads.m(params, h.attr_w[a]);
        g += &cond.t().dot(dl);
        let mut g = grads.m(params, h.attr_b[a]);
        g += &dl.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    dhs += &dcond.slice(s![.., ..d]);
    {
        // Conditioning part flows into the type embedding table.
        let mut g = grads.m(params, h.attr_emb[0]);
        for (row, t) in targets.iter().enumerate() {
            let mut dst = g.row_mut(t[0]);
            dst += &dcond.slice(s![row, d..]);
        }
    }

    let mut dhidden = Array2::zeros((n, d));
    for (row, p) in (first_p..n - 1).enumerate() {
        dhidden.row_mut(p).assign(&dhs.row(row));
    }

    backward(params, input, &cache, &dhidden, grads)?;
    Ok(breakdown)
}

/// Transformer + embedding backward from a gradient on the final hidden
/// states. Accumulates into `grads`.
fn backward(
    params: &ModelParams,
    input: &SeqInput,
    cache: &ForwardCache,
    dhidden: &Array2<f64>,
    grads: &mut GradBuf,
) -> Result<()> {
    let cfg = &params.config;
    let h = &params.handles;
    let d = cfg.d_model;
    let heads = cfg.heads;
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let n = cache.x0_rows;
    let n_prefix = input.initial_ids.len();

    // Final layer norm.
    let mut dg = Array1::zeros(d);
    let mut db = Array1::zeros(d);
    let mut dx = ln_backward(dhidden, &cache.ln_f, params.v(h.ln_f_g), &mut dg, &mut db);
    {
        let mut g = grads.m(params, h.ln_f_g);
        g += &dg.view().insert_axis(Axis(0));
        let mut g = grads.m(params, h.ln_f_b);
        g += &db.view().insert_axis(Axis(0));
    }

    for (lh, lc) in h.layers.iter().zip(&cache.layers).rev() {
        // FF sublayer.
        let mut dff_out = dx.clone();
        if let Some(mask) = &lc.ff_drop {
            dff_out *= mask;
        }
        let dff_act = dff_out.dot(&params.m(lh.w2).t());
        {
            let mut g = grads.m(params, lh.w2);
            g += &lc.ff_act.t().dot(&dff_out);
            let mut g = grads.m(params, lh.b2);
            g += &dff_out.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        let mut dff_pre = dff_act;
        dff_pre.zip_mut_with(&lc.ff_pre, |dv, &x| *dv *= gelu_grad(x));
        let dx_ln2 = dff_pre.dot(&params.m(lh.w1).t());
        {
            let mut g = grads.m(params, lh.w1);
            g += &lc.x_ln2.t().dot(&dff_pre);
            let mut g = grads.m(params, lh.b1);
            g += &dff_pre.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        let mut dg = Array1::zeros(d);
        let mut db = Array1::zeros(d);
        let dx_mid_ln = ln_backward(&dx_ln2, &lc.ln2, params.v(lh.ln2_g), &mut dg, &mut db);
        {
            let mut g = grads.m(params, lh.ln2_g);
            g += &dg.view().insert_axis(Axis(0));
            let mut g = grads.m(params, lh.ln2_b);
            g += &db.view().insert_axis(Axis(0));
        }
        let dx_mid = &dx + &dx_mid_ln; // residual

        // Attention sublayer.
        let mut dproj = dx_mid.clone();
        if let Some(mask) = &lc.attn_drop {
            dproj *= mask;
        }
        let dattn_concat = dproj.dot(&params.m(lh.wo).t());
        {
            let mut g = grads.m(params, lh.wo);
            g += &lc.attn_concat.t().dot(&dproj);
            let mut g = grads.m(params, lh.bo);
            g += &dproj.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        let mut dq = Array2::zeros((n, d));
        let mut dkm = Array2::zeros((n, d));
        let mut dvm = Array2::zeros((n, d));
        for head in 0..heads {
            let cols = s![.., head * dk..(head + 1) * dk];
            let a = &lc.attn[head];
            let dout = dattn_concat.slice(cols);
            let vh = lc.v.slice(cols);
            let da = dout.dot(&vh.t());
            {
                let mut dvh = dvm.slice_mut(cols);
                dvh += &a.t().dot(&dout);
            }
            // Softmax backward: ds = a * (da - rowsum(da * a)).
            let mut ds = Array2::zeros((n, n));
            for i in 0..n {
                let mut dot = 0.0;
                for j in 0..=i {
                    dot += da[[i, j]] * a[[i, j]];
                }
                for j in 0..=i {
                    ds[[i, j]] = a[[i, j]] * (da[[i, j]] - dot);
                }
            }
            ds *= scale;
            let qh = lc.q.slice(cols);
            let kh = lc.k.slice(cols);
            {
                let mut dqh = dq.slice_mut(cols);
                dqh += &ds.dot(&kh);
                let mut dkh = dkm.slice_mut(cols);
                dkh += &ds.t().dot(&qh);
            }
        }
        let mut dx_ln1 = dq.dot(&params.m(lh.wq).t());
        dx_ln1 += &dkm.dot(&params.m(lh.wk).t());
        dx_ln1 += &dvm.dot(&params.m(lh.wv).t());
        {
            let mut g = grads.m(params, lh.wq);
            g += &lc.x_ln1.t().dot(&dq);
            let mut g = grads.m(params, lh.bq);
            g += &dq.sum_axis(Axis(0)).insert_axis(Axis(0));
            let mut g = grads.m(params, lh.wk);
            g += &lc.x_ln1.t().dot(&dkm);
            let mut g = grads.m(params, lh.bk);
            g += &dkm.sum_axis(Axis(0)).insert_axis(Axis(0));
            let mut g = grads.m(params, lh.wv);
            g += &lc.x_ln1.t().dot(&dvm);
            let mut g = grads.m(params, lh.bv);
            g += &dvm.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        let mut dg = Array1::zeros(d);
        let mut db = Array1::zeros(d);
        let dx_in_ln = ln_backward(&dx_ln1, &lc.ln1, params.v(lh.ln1_g), &mut dg, &mut db);
        {
            let mut g = grads.m(params, lh.ln1_g);
            g += &dg.view().insert_axis(Axis(0));
            let mut g = grads.m(params, lh.ln1_b);
            g += &db.view().insert_axis(Axis(0));
        }
        dx = dx_mid + dx_in_ln;
    }

    // Embedding backward. BPE is fixed; timing and token tables accumulate.
    {
        let mut g = grads.m(params, h.timing_emb);
        for p in 0..n {
            let mut row = g.row_mut(input.bins[p]);
            row += &dx.row(p);
        }
    }
    {
        let mut g = grads.m(params, h.initial_emb);
        for (p, &id) in input.initial_ids.iter().enumerate() {
            let mut row = g.row_mut(id);
            row += &dx.row(p);
        }
    }
    let n_body = input.body_ids.len();
    if n_body > 0 {
        let dbody = dx.slice(s![n_prefix.., ..]);
        let dconcat = dbody.dot(&params.m(h.w_in).t());
        {
            let mut g = grads.m(params, h.w_in);
            g += &cache.concat.t().dot(&dbody);
            let mut g = grads.m(params, h.b_in);
            g += &dbody.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        for k in 0..7 {
            let at: usize = ATTR_DIMS[..k].iter().sum();
            let mut g = grads.m(params, h.attr_emb[k]);
            for (row, ids) in input.body_ids.iter().enumerate() {
                let mut dst = g.row_mut(ids[k]);
                dst += &dconcat.slice(s![row, at..at + ATTR_DIMS[k]]);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tokens::{CompoundToken as Tok, InitialToken};
    use crate::types::{Genre, Instrument};

    fn tiny_input() -> SeqInput {
        let prefix = vec![
            InitialToken::Genre(Genre::Pop),
            InitialToken::Instrument(Instrument::Piano),
        ];
        let body = vec![
            Tok::bar(1),
            Tok::tick(1, 1, 2),
            Tok::note(Instrument::Piano, 60, 4),
            Tok::note(Instrument::Piano, 64, 4),
            Tok::eos(),
        ];
        SeqInput::build(&prefix, &body, 4.0).unwrap()
    }

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            d_model: 32,
            d_ff: 64,
            dropout: 0.0,
            max_len: 128,
        }
    }

    #[test]
    fn logit_shapes_match_vocabs() {
        let params = ModelParams::init(tiny_config(), 1).unwrap();
        let input = tiny_input();
        let logits = next_logits(&params, &input, vocab::TYPE_RHYTHM).unwrap();
        assert_eq!(logits.ttype.len(), vocab::TYPE);
        for (a, l) in logits.attrs.iter().enumerate() {
            assert_eq!(l.len(), vocab::SIZES[a + 1], "attr {a}");
        }
    }

    #[test]
    fn causal_mask_blocks_future_positions() {
        let params = ModelParams::init(tiny_config(), 2).unwrap();
        let input = tiny_input();
        let hidden = forward_hidden(&params, &input).unwrap();
        let q = 2usize;
        let logits_q = type_logits(&params, hidden.row(q));

        // Perturb a later token; everything at or before q must be unchanged.
        let mut perturbed = tiny_input();
        perturbed.body_ids[3] = token_ids(&Tok::note(Instrument::Piano, 72, 8)).unwrap();
        let hidden_p = forward_hidden(&params, &perturbed).unwrap();
        let logits_qp = type_logits(&params, hidden_p.row(q));
        assert_eq!(logits_q, logits_qp);
        assert_ne!(
            hidden.row(hidden.nrows() - 2),
            hidden_p.row(hidden_p.nrows() - 2)
        );
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let params = ModelParams::init(tiny_config(), 3).unwrap();
        let input = tiny_input();
        let a = forward_hidden(&params, &input).unwrap();
        let b = forward_hidden(&params, &input).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn removing_timing_encoding_changes_output() {
        let params = ModelParams::init(tiny_config(), 4).unwrap();
        let input = tiny_input();
        let base = forward_hidden(&params, &input).unwrap();
        let mut other = input.clone();
        // Shift every timing bin; if t_i were silently dropped this would not
        // change anything.
        for b in other.bins.iter_mut() {
            *b = (*b + 37) % vocab::TIMING_BINS;
        }
        let shifted = forward_hidden(&params, &other).unwrap();
        assert_ne!(base, shifted);
    }

    #[test]
    fn rhythm_targets_do_not_touch_note_heads() {
        let params = ModelParams::init(tiny_config(), 5).unwrap();
        let prefix = vec![
            InitialToken::Genre(Genre::Rock),
            InitialToken::Instrument(Instrument::Piano),
        ];
        // Body of rhythm tokens only (plus EOS): no pitch/duration/instrument
        // targets anywhere.
        let body = vec![Tok::bar(1), Tok::tick(4, 1, 1), Tok::eos()];
        let input = SeqInput::build(&prefix, &body, 4.0).unwrap();
        let loss = loss_and_grad(&params, &input, None, None).unwrap();
        assert_eq!(loss.counts[4], 0);
        assert_eq!(loss.counts[5], 0);
        assert_eq!(loss.counts[6], 0);
        assert!(loss.counts[0] > 0);
        assert!(loss.counts[1] > 0);
    }

    #[test]
    fn max_len_enforced() {
        let mut cfg = tiny_config();
        cfg.max_len = 4;
        let params = ModelParams::init(cfg, 6).unwrap();
        let input = tiny_input();
        assert!(forward_hidden(&params, &input).is_err());
    }
}
