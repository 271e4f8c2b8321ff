use std::collections::BTreeSet;

use super::config::AttentionMode;
use super::params::{LayerParams, Parameters};
use crate::error::{Error, Result};
use crate::numerics::{
    masked_cross_entropy_with_grad, matmul, matmul_nt, matmul_tn_acc, rope_apply,
    rope_apply_transpose, softmax_in_place, DenseMatrix, Scalar,
};

const NORM_EPS: f64 = 1e-5;

/// Captured attention probabilities of one head: rows are queries, columns keys.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTensor<T = f32> {
    pub layer: usize,
    pub head: usize,
    pub scores: DenseMatrix<T>,
}

/// Sets selected pre-softmax attention logits to `-inf`.
///
/// A rule with `layer`/`head`/`queries` left as `None` applies to all of them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LogitOverride {
    pub rules: Vec<OverrideRule>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OverrideRule {
    pub layer: Option<usize>,
    pub head: Option<usize>,
    pub queries: Option<Vec<usize>>,
    pub keys: Vec<usize>,
}

impl LogitOverride {
    /// Mask attention toward `keys` from every query in every layer and head.
    pub fn mask_keys(keys: &[usize]) -> Self {
        Self {
            rules: vec![OverrideRule {
                layer: None,
                head: None,
                queries: None,
                keys: keys.to_vec(),
            }],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.rules.iter().all(|r| r.keys.is_empty())
    }

    fn validate(&self, n_layers: usize, n_heads: usize, seq: usize) -> Result<()> {
        for r in &self.rules {
            if let Some(l) = r.layer.filter(|&l| l >= n_layers) {
                return Err(Error::InvalidOverride(format!("layer {l} >= {n_layers}")));
            }
            if let Some(h) = r.head.filter(|&h| h >= n_heads) {
                return Err(Error::InvalidOverride(format!("head {h} >= {n_heads}")));
            }
            let queries = r.queries.iter().flatten();
            if let Some(p) = r.keys.iter().chain(queries).find(|&&p| p >= seq) {
                return Err(Error::InvalidOverride(format!(
                    "position {p} outside sequence of length {seq}"
                )));
            }
        }
        Ok(())
    }

    /// Masked keys per query for one (layer, head), or `None` if nothing applies.
    fn cell(&self, layer: usize, head: usize, seq: usize) -> Option<Vec<BTreeSet<usize>>> {
        let mut out: Option<Vec<BTreeSet<usize>>> = None;
        for r in &self.rules {
            if r.layer.is_some_and(|l| l != layer)
                || r.head.is_some_and(|h| h != head)
                || r.keys.is_empty()
            {
                continue;
            }
            let cell = out.get_or_insert_with(|| vec![BTreeSet::new(); seq]);
            match &r.queries {
                Some(qs) => qs.iter().for_each(|&q| cell[q].extend(&r.keys)),
                None => cell.iter_mut().for_each(|c| c.extend(&r.keys)),
            }
        }
        out
    }
}

/// A query row whose every visible key was overridden; `kept_key` stayed unmasked.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KeepOneFallback {
    pub layer: usize,
    pub head: usize,
    pub query: usize,
    pub kept_key: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput<T = f32> {
    pub logits: DenseMatrix<T>,
    /// All layers x heads, layer-major; present iff capture was requested.
    pub attention: Option<Vec<AttentionTensor<T>>>,
    pub fallbacks: Vec<KeepOneFallback>,
}

/// One training sequence: model input plus the rows that carry loss.
/// `targets` and `weights` are indexed by position; only `loss_positions` are read.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub input: Vec<u32>,
    pub loss_positions: Vec<usize>,
    pub targets: Vec<u32>,
    pub weights: Vec<f32>,
}

struct LayerCache<T> {
    xhat1: DenseMatrix<T>,
    r1: Vec<T>,
    n1: DenseMatrix<T>,
    qr: DenseMatrix<T>,
    kr: DenseMatrix<T>,
    v: DenseMatrix<T>,
    /// Attention probabilities, index `b * n_heads + h`.
    probs: Vec<DenseMatrix<T>>,
    ctx: DenseMatrix<T>,
    xhat2: DenseMatrix<T>,
    r2: Vec<T>,
    n2: DenseMatrix<T>,
    up: DenseMatrix<T>,
    act: DenseMatrix<T>,
}

struct Cache<T> {
    tokens: Vec<u32>,
    seq: usize,
    layers: Vec<LayerCache<T>>,
    xhat_f: DenseMatrix<T>,
    r_f: Vec<T>,
    nf: DenseMatrix<T>,
}

fn rms_norm<T: Scalar>(
    x: &DenseMatrix<T>,
    gain: &DenseMatrix<T>,
) -> (DenseMatrix<T>, DenseMatrix<T>, Vec<T>) {
    let d = x.cols();
    let mut xhat = x.clone();
    let mut y = x.clone();
    let mut rs = Vec::with_capacity(x.rows());
    let inv_d = T::one() / T::lit(d as f64);
    for r in 0..x.rows() {
        let ms = x.row(r).iter().fold(T::zero(), |a, &v| a + v * v) * inv_d;
        let rms = (ms + T::lit(NORM_EPS)).sqrt();
        rs.push(rms);
        let (xr, yr) = (xhat.row_mut(r), y.row_mut(r));
        for c in 0..d {
            xr[c] /= rms;
            yr[c] = xr[c] * gain.data()[c];
        }
    }
    (y, xhat, rs)
}

fn rms_norm_backward<T: Scalar>(
    dy: &DenseMatrix<T>,
    xhat: &DenseMatrix<T>,
    rs: &[T],
    gain: &DenseMatrix<T>,
    dgain: &mut DenseMatrix<T>,
) -> DenseMatrix<T> {
    let d = dy.cols();
    let inv_d = T::one() / T::lit(d as f64);
    let mut dx = DenseMatrix::zeros(dy.rows(), d);
    let mut dxhat = vec![T::zero(); d];
    for r in 0..dy.rows() {
        let (dyr, xr) = (dy.row(r), xhat.row(r));
        let mut dot = T::zero();
        for c in 0..d {
            dgain.data_mut()[c] += dyr[c] * xr[c];
            dxhat[c] = dyr[c] * gain.data()[c];
            dot += dxhat[c] * xr[c];
        }
        let mean = dot * inv_d;
        let out = dx.row_mut(r);
        for c in 0..d {
            out[c] = (dxhat[c] - xr[c] * mean) / rs[r];
        }
    }
    dx
}

fn silu<T: Scalar>(u: T) -> T {
    u / (T::one() + (-u).exp())
}

fn silu_grad<T: Scalar>(u: T) -> T {
    let s = T::one() / (T::one() + (-u).exp());
    s * (T::one() + u * (T::one() - s))
}

fn rope_heads<T: Scalar>(
    x: &DenseMatrix<T>,
    positions: &[usize],
    n_heads: usize,
    d_head: usize,
    base: f32,
    inverse: bool,
) -> Result<DenseMatrix<T>> {
    let mut out = x.clone();
    for h in 0..n_heads {
        let slice = x.col_slice(h * d_head, d_head);
        let rotated = if inverse {
            rope_apply_transpose(&slice, positions, base)?
        } else {
            rope_apply(&slice, positions, base)?
        };
        out.set_col_slice(h * d_head, &rotated);
    }
    Ok(out)
}

fn check_tokens<T: Scalar>(params: &Parameters<T>, tokens: &[u32], seq: usize) -> Result<()> {
    let cfg = &params.config;
    if seq == 0 {
        return Err(Error::Shape("empty sequence".into()));
    }
    if seq > cfg.max_seq {
        return Err(Error::Shape(format!(
            "sequence length {seq} exceeds max_seq {}",
            cfg.max_seq
        )));
    }
    if let Some(t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Shape(format!(
            "token id {t} outside vocabulary {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

struct RunOutput<T> {
    logits: DenseMatrix<T>,
    cache: Option<Cache<T>>,
    attention: Option<Vec<AttentionTensor<T>>>,
    fallbacks: Vec<KeepOneFallback>,
}

#[allow(clippy::too_many_arguments)]
fn attention_head<T: Scalar>(
    qr: &DenseMatrix<T>,
    kr: &DenseMatrix<T>,
    row0: usize,
    seq: usize,
    col0: usize,
    d_head: usize,
    causal: bool,
    masked: Option<&[BTreeSet<usize>]>,
    mut on_fallback: impl FnMut(usize, usize),
) -> DenseMatrix<T> {
    let q = qr.submatrix(row0, seq, col0, d_head);
    let k = kr.submatrix(row0, seq, col0, d_head);
    let mut logits = matmul_nt(&q, &k);
    logits.scale(T::one() / T::lit(d_head as f64).sqrt());
    for i in 0..seq {
        let visible = if causal { i + 1 } else { seq };
        let row = logits.row_mut(i);
        for x in &mut row[visible..] {
            *x = T::neg_infinity();
        }
        if let Some(keys) = masked.map(|m| &m[i]).filter(|k| !k.is_empty()) {
            let original: Vec<T> = row[..visible].to_vec();
            for &k in keys.iter().filter(|&&k| k < visible) {
                row[k] = T::neg_infinity();
            }
            if row[..visible].iter().all(|&x| x == T::neg_infinity()) {
                let mut best = 0;
                for (j, &v) in original.iter().enumerate() {
                    if v > original[best] {
                        best = j;
                    }
                }
                row[best] = original[best];
                on_fallback(i, best);
            }
        }
        softmax_in_place(row).expect("every row keeps at least one finite logit");
    }
    logits
}

fn run<T: Scalar>(
    params: &Parameters<T>,
    tokens: &[u32],
    batch: usize,
    seq: usize,
    over: Option<&LogitOverride>,
    keep_cache: bool,
    capture: bool,
) -> Result<RunOutput<T>> {
    let cfg = &params.config;
    check_tokens(params, tokens, seq)?;
    if let Some(o) = over {
        o.validate(cfg.n_layers, cfg.n_heads, seq)?;
    }
    let (d, nh, dh) = (cfg.d_model, cfg.n_heads, cfg.d_head);
    let n = batch * seq;
    let positions: Vec<usize> = (0..n).map(|i| i % seq).collect();
    let causal = cfg.attention == AttentionMode::Causal;

    let mut x = DenseMatrix::zeros(n, d);
    for (r, &t) in tokens.iter().enumerate() {
        x.row_mut(r)
            .copy_from_slice(params.embedding.row(t as usize));
    }

    let mut layer_caches = Vec::new();
    let mut captured = capture.then(Vec::new);
    let mut fallbacks = Vec::new();
    for (li, lp) in params.layers.iter().enumerate() {
        let (n1, xhat1, r1) = rms_norm(&x, &lp.attn_norm);
        let q = matmul(&n1, &lp.wq)?;
        let k = matmul(&n1, &lp.wk)?;
        let v = matmul(&n1, &lp.wv)?;
        let qr = rope_heads(&q, &positions, nh, dh, cfg.rope_base, false)?;
        let kr = rope_heads(&k, &positions, nh, dh, cfg.rope_base, false)?;
        let mut ctx = DenseMatrix::zeros(n, d);
        let mut probs = Vec::with_capacity(batch * nh);
        for b in 0..batch {
            for h in 0..nh {
                let cell = over.and_then(|o| o.cell(li, h, seq));
                let a = attention_head(
                    &qr,
                    &kr,
                    b * seq,
                    seq,
                    h * dh,
                    dh,
                    causal,
                    cell.as_deref(),
                    |query, kept_key| {
                        fallbacks.push(KeepOneFallback {
                            layer: li,
                            head: h,
                            query,
                            kept_key,
                        })
                    },
                );
                let vb = v.submatrix(b * seq, seq, h * dh, dh);
                ctx.add_submatrix(b * seq, h * dh, &matmul(&a, &vb)?);
                if b == 0 {
                    if let Some(c) = captured.as_mut() {
                        c.push(AttentionTensor {
                            layer: li,
                            head: h,
                            scores: a.clone(),
                        });
                    }
                }
                if keep_cache {
                    probs.push(a);
                }
            }
        }
        let attn_out = matmul(&ctx, &lp.wo)?;
        x.add_assign(&attn_out);

        let (n2, xhat2, r2) = rms_norm(&x, &lp.mlp_norm);
        let up = matmul(&n2, &lp.w_up)?;
        let mut act = up.clone();
        act.data_mut().iter_mut().for_each(|u| *u = silu(*u));
        let down = matmul(&act, &lp.w_down)?;
        x.add_assign(&down);

        if keep_cache {
            layer_caches.push(LayerCache {
                xhat1,
                r1,
                n1,
                qr,
                kr,
                v,
                probs,
                ctx,
                xhat2,
                r2,
                n2,
                up,
                act,
            });
        }
    }

    let (nf, xhat_f, r_f) = rms_norm(&x, &params.final_norm);
    let logits = match &params.output {
        Some(w) => matmul(&nf, w)?,
        None => matmul_nt(&nf, &params.embedding),
    };
    if !logits.is_finite() {
        return Err(Error::Divergence("non-finite logits".into()));
    }
    let cache = keep_cache.then(|| Cache {
        tokens: tokens.to_vec(),
        seq,
        layers: layer_caches,
        xhat_f,
        r_f,
        nf,
    });
    Ok(RunOutput {
        logits,
        cache,
        attention: captured,
        fallbacks,
    })
}

/// Forward pass over one sequence.
///
/// Attention logits are `q·k/√d_head` with rotary embeddings on `q` and `k`;
/// causal models hide keys `j > i`. The override, if any, forces selected
/// logits to `-inf` before the softmax.
pub fn forward<T: Scalar>(
    params: &Parameters<T>,
    tokens: &[u32],
    capture: bool,
    logit_override: Option<&LogitOverride>,
) -> Result<ForwardOutput<T>> {
    let out = run(
        params,
        tokens,
        1,
        tokens.len(),
        logit_override,
        false,
        capture,
    )?;
    Ok(ForwardOutput {
        logits: out.logits,
        attention: out.attention,
        fallbacks: out.fallbacks,
    })
}

fn backward<T: Scalar>(
    params: &Parameters<T>,
    cache: &Cache<T>,
    dlogits: &DenseMatrix<T>,
) -> Result<Parameters<T>> {
    let cfg = &params.config;
    let (nh, dh) = (cfg.n_heads, cfg.d_head);
    let seq = cache.seq;
    let n = cache.tokens.len();
    let batch = n / seq;
    let positions: Vec<usize> = (0..n).map(|i| i % seq).collect();
    let causal_scale = T::one() / T::lit(dh as f64).sqrt();
    let mut g = params.zeros_like();

    let dnf = match (&params.output, g.output.as_mut()) {
        (Some(w), Some(dw)) => {
            matmul_tn_acc(&cache.nf, dlogits, dw);
            matmul_nt(dlogits, w)
        }
        _ => {
            // logits = nf · Eᵀ
            matmul_tn_acc(dlogits, &cache.nf, &mut g.embedding);
            matmul(dlogits, &params.embedding)?
        }
    };
    let mut dx = rms_norm_backward(
        &dnf,
        &cache.xhat_f,
        &cache.r_f,
        &params.final_norm,
        &mut g.final_norm,
    );

    for (li, lc) in cache.layers.iter().enumerate().rev() {
        let lp: &LayerParams<T> = &params.layers[li];
        let gl = &mut g.layers[li];

        // MLP branch
        matmul_tn_acc(&lc.act, &dx, &mut gl.w_down);
        let mut dup = matmul_nt(&dx, &lp.w_down);
        for (du, &u) in dup.data_mut().iter_mut().zip(lc.up.data()) {
            *du *= silu_grad(u);
        }
        matmul_tn_acc(&lc.n2, &dup, &mut gl.w_up);
        let dn2 = matmul_nt(&dup, &lp.w_up);
        dx.add_assign(&rms_norm_backward(
            &dn2,
            &lc.xhat2,
            &lc.r2,
            &lp.mlp_norm,
            &mut gl.mlp_norm,
        ));

        // attention branch
        matmul_tn_acc(&lc.ctx, &dx, &mut gl.wo);
        let dctx = matmul_nt(&dx, &lp.wo);
        let d = cfg.d_model;
        let mut dqr = DenseMatrix::zeros(n, d);
        let mut dkr = DenseMatrix::zeros(n, d);
        let mut dv = DenseMatrix::zeros(n, d);
        for b in 0..batch {
            for h in 0..nh {
                let a = &lc.probs[b * nh + h];
                let (r0, c0) = (b * seq, h * dh);
                let dctx_bh = dctx.submatrix(r0, seq, c0, dh);
                let v_bh = lc.v.submatrix(r0, seq, c0, dh);
                let mut dv_bh = DenseMatrix::zeros(seq, dh);
                matmul_tn_acc(a, &dctx_bh, &mut dv_bh);
                dv.add_submatrix(r0, c0, &dv_bh);
                let da = matmul_nt(&dctx_bh, &v_bh);
                let mut ds = DenseMatrix::zeros(seq, seq);
                for i in 0..seq {
                    let (ar, dar) = (a.row(i), da.row(i));
                    let dot = ar.iter().zip(dar).fold(T::zero(), |s, (&p, &g)| s + p * g);
                    let dsr = ds.row_mut(i);
                    for j in 0..seq {
                        dsr[j] = ar[j] * (dar[j] - dot) * causal_scale;
                    }
                }
                let q_bh = lc.qr.submatrix(r0, seq, c0, dh);
                let k_bh = lc.kr.submatrix(r0, seq, c0, dh);
                dqr.add_submatrix(r0, c0, &matmul(&ds, &k_bh)?);
                let mut dk_bh = DenseMatrix::zeros(seq, dh);
                matmul_tn_acc(&ds, &q_bh, &mut dk_bh);
                dkr.add_submatrix(r0, c0, &dk_bh);
            }
        }
        let dq = rope_heads(&dqr, &positions, nh, dh, cfg.rope_base, true)?;
        let dk = rope_heads(&dkr, &positions, nh, dh, cfg.rope_base, true)?;
        matmul_tn_acc(&lc.n1, &dq, &mut gl.wq);
        matmul_tn_acc(&lc.n1, &dk, &mut gl.wk);
        matmul_tn_acc(&lc.n1, &dv, &mut gl.wv);
        let mut dn1 = matmul_nt(&dq, &lp.wq);
        dn1.add_assign(&matmul_nt(&dk, &lp.wk));
        dn1.add_assign(&matmul_nt(&dv, &lp.wv));
        dx.add_assign(&rms_norm_backward(
            &dn1,
            &lc.xhat1,
            &lc.r1,
            &lp.attn_norm,
            &mut gl.attn_norm,
        ));
    }

    for (r, &t) in cache.tokens.iter().enumerate() {
        let row = g.embedding.row_mut(t as usize);
        for (e, &v) in row.iter_mut().zip(dx.row(r)) {
            *e += v;
        }
    }
    Ok(g)
}

fn stack_batch<T: Scalar>(
    batch: &[TrainExample],
) -> Result<(usize, Vec<u32>, Vec<u32>, Vec<usize>, Vec<T>)> {
    let seq = batch
        .first()
        .map(|e| e.input.len())
        .ok_or(Error::EmptyLoss)?;
    let mut tokens = Vec::with_capacity(batch.len() * seq);
    let mut targets = Vec::with_capacity(batch.len() * seq);
    let mut weights = Vec::with_capacity(batch.len() * seq);
    let mut positions = Vec::new();
    for (b, e) in batch.iter().enumerate() {
        if e.input.len() != seq || e.targets.len() != seq || e.weights.len() != seq {
            return Err(Error::Shape(format!(
                "batch element {b}: input/targets/weights lengths differ from {seq}"
            )));
        }
        tokens.extend_from_slice(&e.input);
        targets.extend_from_slice(&e.targets);
        weights.extend(e.weights.iter().map(|&w| T::lit(w as f64)));
        positions.extend(e.loss_positions.iter().map(|&p| b * seq + p));
    }
    Ok((seq, tokens, targets, positions, weights))
}

/// Batch loss without gradients.
pub fn loss<T: Scalar>(params: &Parameters<T>, batch: &[TrainExample]) -> Result<T> {
    let (seq, tokens, targets, positions, weights) = stack_batch::<T>(batch)?;
    let out = run(params, &tokens, batch.len(), seq, None, false, false)?;
    let (l, _) =
        masked_cross_entropy_with_grad(&out.logits, &targets, &positions, &weights, false)?;
    Ok(l)
}

/// Batch loss and reverse-mode gradients for every parameter tensor.
pub fn loss_and_grads<T: Scalar>(
    params: &Parameters<T>,
    batch: &[TrainExample],
) -> Result<(T, Parameters<T>)> {
    let (seq, tokens, targets, positions, weights) = stack_batch::<T>(batch)?;
    let out = run(params, &tokens, batch.len(), seq, None, true, false)?;
    let (l, dlogits) =
        masked_cross_entropy_with_grad(&out.logits, &targets, &positions, &weights, true)?;
    let grads = backward(
        params,
        out.cache.as_ref().expect("cache kept"),
        &dlogits.expect("grad requested"),
    )?;
    Ok((l, grads))
}
