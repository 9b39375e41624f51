use ndarray::{s, Array1, Array2, Axis, NdFloat};

use super::c;
use super::params::{FeatMode, ModelParams};
use crate::episodes::{assemble_from_encoded, Episode};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

fn gelu<F: NdFloat>(x: F) -> F {
    // tanh approximation
    let k: F = c(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a: F = c(0.044715);
    let half: F = c(0.5);
    half * x * (F::one() + (k * (x + a * x * x * x)).tanh())
}

fn gelu_prime<F: NdFloat>(x: F) -> F {
    let k: F = c(0.797_884_560_802_865_4);
    let a: F = c(0.044715);
    let half: F = c(0.5);
    let three: F = c(3.0);
    let inner = k * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * k * (F::one() + three * a * x * x)
}

/// Row-wise layer norm. Returns (y, xhat, inv_std per row).
fn layer_norm_rows<F: NdFloat>(
    x: &Array2<F>,
    g: &Array1<F>,
    b: &Array1<F>,
) -> (Array2<F>, Array2<F>, Array1<F>) {
    let d = x.ncols();
    let df: F = c(d as f64);
    let mut xhat = Array2::<F>::zeros(x.raw_dim());
    let mut inv = Array1::<F>::zeros(x.nrows());
    for (i, row) in x.rows().into_iter().enumerate() {
        let mean = row.sum() / df;
        let mut var = F::zero();
        for &v in row {
            let dv = v - mean;
            var = var + dv * dv;
        }
        var = var / df;
        let istd = F::one() / (var + c(LN_EPS)).sqrt();
        inv[i] = istd;
        for (j, &v) in row.iter().enumerate() {
            xhat[[i, j]] = (v - mean) * istd;
        }
    }
    let mut y = xhat.clone();
    for mut row in y.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = *v * g[j] + b[j];
        }
    }
    (y, xhat, inv)
}

/// Backward of row-wise layer norm. Returns dx and accumulates dg, db.
fn layer_norm_backward<F: NdFloat>(
    dy: &Array2<F>,
    xhat: &Array2<F>,
    inv: &Array1<F>,
    g: &Array1<F>,
    dg: &mut Array1<F>,
    db: &mut Array1<F>,
) -> Array2<F> {
    let d = dy.ncols();
    let df: F = c(d as f64);
    let mut dx = Array2::<F>::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let mut sum_dxhat = F::zero();
        let mut sum_dxhat_xhat = F::zero();
        for j in 0..d {
            let dyij = dy[[i, j]];
            dg[j] = dg[j] + dyij * xhat[[i, j]];
            db[j] = db[j] + dyij;
            let dxh = dyij * g[j];
            sum_dxhat = sum_dxhat + dxh;
            sum_dxhat_xhat = sum_dxhat_xhat + dxh * xhat[[i, j]];
        }
        let mean_dxhat = sum_dxhat / df;
        let mean_dxhat_xhat = sum_dxhat_xhat / df;
        for j in 0..d {
            let dxh = dy[[i, j]] * g[j];
            dx[[i, j]] = inv[i] * (dxh - mean_dxhat - xhat[[i, j]] * mean_dxhat_xhat);
        }
    }
    dx
}

struct LayerCache<F> {
    ln1_xhat: Array2<F>,
    ln1_inv: Array1<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    /// Softmax attention weights per head (L x L each).
    attn: Vec<Array2<F>>,
    /// Concatenated per-head attention outputs, before the output proj.
    concat: Array2<F>,
    ln2_xhat: Array2<F>,
    ln2_inv: Array1<F>,
    z1: Array2<F>,
    a1: Array2<F>,
}

struct SeqCache<F> {
    layers: Vec<LayerCache<F>>,
    /// Final block output.
    x_out: Array2<F>,
    fin_xhat: Array1<F>,
    fin_inv: F,
    /// Final-norm query-row output fed to the head.
    y_query: Array1<F>,
}

fn check_finite<F: NdFloat>(x: &Array2<F>, layer: usize) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("transformer layer {layer}")));
    }
    Ok(())
}

/// Runs one token sequence through the encoder stack.
fn seq_forward<F: NdFloat>(params: &ModelParams<F>, tokens: &Array2<F>) -> Result<SeqCache<F>> {
    let cfg = &params.config;
    let d = cfg.token_width();
    let heads = cfg.n_heads;
    let dh = d / heads;
    let scale: F = c(1.0 / (dh as f64).sqrt());
    let l = tokens.nrows();
    let mut x = tokens.to_owned();
    let mut layers = Vec::with_capacity(params.layers.len());
    for (li, lp) in params.layers.iter().enumerate() {
        let x_in = x.clone();
        let (y1, ln1_xhat, ln1_inv) = layer_norm_rows(&x_in, &lp.ln1_g, &lp.ln1_b);
        let q = y1.dot(&lp.wq) + &lp.bq;
        let k = y1.dot(&lp.wk) + &lp.bk;
        let v = y1.dot(&lp.wv) + &lp.bv;
        let mut concat = Array2::<F>::zeros((l, d));
        let mut attn = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut scores = qh.dot(&kh.t());
            scores.mapv_inplace(|s| s * scale);
            // row softmax with max subtraction
            for mut row in scores.rows_mut() {
                let mx = row.iter().cloned().fold(F::neg_infinity(), F::max);
                let mut total = F::zero();
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    total = total + *v;
                }
                for v in row.iter_mut() {
                    *v = *v / total;
                }
            }
            let oh = scores.dot(&vh);
            concat.slice_mut(cols).assign(&oh);
            attn.push(scores);
        }
        let attn_out = concat.dot(&lp.wo) + &lp.bo;
        let h_state = &x_in + &attn_out;
        let (y2, ln2_xhat, ln2_inv) = layer_norm_rows(&h_state, &lp.ln2_g, &lp.ln2_b);
        let z1 = y2.dot(&lp.w1) + &lp.b1;
        let a1 = z1.mapv(gelu);
        let m = a1.dot(&lp.w2) + &lp.b2;
        x = &h_state + &m;
        check_finite(&x, li)?;
        layers.push(LayerCache {
            ln1_xhat,
            ln1_inv,
            q,
            k,
            v,
            attn,
            concat,
            ln2_xhat,
            ln2_inv,
            z1,
            a1,
        });
    }
    // final layer norm on the query row only; other rows are unused
    let query_row = x.row(l - 1).insert_axis(Axis(0)).to_owned();
    let (yq, xhat, inv) = layer_norm_rows(&query_row, &params.ln_f_g, &params.ln_f_b);
    Ok(SeqCache {
        layers,
        x_out: x,
        fin_xhat: xhat.row(0).to_owned(),
        fin_inv: inv[0],
        y_query: yq.row(0).to_owned(),
    })
}

/// Backward through one sequence. `dy_query` is the gradient at the
/// final-norm query output. Returns the gradient w.r.t. the input
/// tokens; parameter gradients accumulate into `grads`.
fn seq_backward<F: NdFloat>(
    params: &ModelParams<F>,
    cache: &SeqCache<F>,
    dy_query: &Array1<F>,
    grads: &mut ModelParams<F>,
) -> Array2<F> {
    let cfg = &params.config;
    let d = cfg.token_width();
    let heads = cfg.n_heads;
    let dh = d / heads;
    let scale: F = c(1.0 / (dh as f64).sqrt());
    let l = cache.x_out.nrows();

    // final layer norm (single row)
    let dy = dy_query.clone().insert_axis(Axis(0)).to_owned();
    let xhat = cache.fin_xhat.clone().insert_axis(Axis(0)).to_owned();
    let inv = Array1::from_elem(1, cache.fin_inv);
    let dxq = layer_norm_backward(
        &dy,
        &xhat,
        &inv,
        &params.ln_f_g,
        &mut grads.ln_f_g,
        &mut grads.ln_f_b,
    );
    let mut dx = Array2::<F>::zeros((l, d));
    dx.row_mut(l - 1).assign(&dxq.row(0));

    for (li, lp) in params.layers.iter().enumerate().rev() {
        let cache = &cache.layers[li];
        let gl = &mut grads.layers[li];

        // x = h + m where m = gelu(ln2(h) w1 + b1) w2 + b2
        let dm = dx.clone();
        let da1 = dm.dot(&lp.w2.t());
        // y2 recomputed from the cached normalized activations
        let mut y2 = cache.ln2_xhat.clone();
        for mut row in y2.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * lp.ln2_g[j] + lp.ln2_b[j];
            }
        }
        gl.w2 = &gl.w2 + &cache.a1.t().dot(&dm);
        gl.b2 = &gl.b2 + &dm.sum_axis(Axis(0));
        let dz1 = &da1 * &cache.z1.mapv(gelu_prime);
        gl.w1 = &gl.w1 + &y2.t().dot(&dz1);
        gl.b1 = &gl.b1 + &dz1.sum_axis(Axis(0));
        let dy2 = dz1.dot(&lp.w1.t());
        let dh_ln = layer_norm_backward(
            &dy2,
            &cache.ln2_xhat,
            &cache.ln2_inv,
            &lp.ln2_g,
            &mut gl.ln2_g,
            &mut gl.ln2_b,
        );
        let dh_state = &dx + &dh_ln;

        // h = x_in + concat.wo + bo
        let dattn_out = dh_state.clone();
        gl.bo = &gl.bo + &dattn_out.sum_axis(Axis(0));
        gl.wo = &gl.wo + &cache.concat.t().dot(&dattn_out);
        let dconcat = dattn_out.dot(&lp.wo.t());

        let mut dq = Array2::<F>::zeros((l, d));
        let mut dk = Array2::<F>::zeros((l, d));
        let mut dv = Array2::<F>::zeros((l, d));
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let a = &cache.attn[h];
            let doh = dconcat.slice(cols).to_owned();
            let vh = cache.v.slice(cols);
            let da = doh.dot(&vh.t());
            dv.slice_mut(cols).assign(&a.t().dot(&doh));
            // softmax backward per row
            let mut ds = Array2::<F>::zeros((l, l));
            for i in 0..l {
                let mut dot = F::zero();
                for j in 0..l {
                    dot = dot + da[[i, j]] * a[[i, j]];
                }
                for j in 0..l {
                    ds[[i, j]] = a[[i, j]] * (da[[i, j]] - dot);
                }
            }
            ds.mapv_inplace(|x| x * scale);
            let kh = cache.k.slice(cols);
            let qh = cache.q.slice(cols);
            dq.slice_mut(cols).assign(&ds.dot(&kh));
            dk.slice_mut(cols).assign(&ds.t().dot(&qh));
        }

        // q = y1 wq + bq (and likewise k, v)
        let mut y1 = cache.ln1_xhat.clone();
        for mut row in y1.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * lp.ln1_g[j] + lp.ln1_b[j];
            }
        }
        gl.wq = &gl.wq + &y1.t().dot(&dq);
        gl.bq = &gl.bq + &dq.sum_axis(Axis(0));
        gl.wk = &gl.wk + &y1.t().dot(&dk);
        gl.bk = &gl.bk + &dk.sum_axis(Axis(0));
        gl.wv = &gl.wv + &y1.t().dot(&dv);
        gl.bv = &gl.bv + &dv.sum_axis(Axis(0));
        let dy1 = dq.dot(&lp.wq.t()) + dk.dot(&lp.wk.t()) + dv.dot(&lp.wv.t());
        let dx_ln = layer_norm_backward(
            &dy1,
            &cache.ln1_xhat,
            &cache.ln1_inv,
            &lp.ln1_g,
            &mut gl.ln1_g,
            &mut gl.ln1_b,
        );
        dx = &dh_state + &dx_ln;
    }
    dx
}

struct EncCache<F> {
    x: Array2<F>,
    z1: Array2<F>,
    a1: Array2<F>,
}

/// Encodes raw episode features (identity cast or trainable MLP).
fn encode_features<F: NdFloat>(
    params: &ModelParams<F>,
    raw: &Array2<F>,
) -> (Array2<F>, Option<EncCache<F>>) {
    match (&params.config.feat_mode, &params.encoder) {
        (FeatMode::Identity, _) | (_, None) => (raw.clone(), None),
        (FeatMode::TrainableMlp, Some(e)) => {
            let z1 = raw.dot(&e.w1) + &e.b1;
            let a1 = z1.mapv(gelu);
            let out = a1.dot(&e.w2) + &e.b2;
            (
                out,
                Some(EncCache {
                    x: raw.clone(),
                    z1,
                    a1,
                }),
            )
        }
    }
}

fn encoder_backward<F: NdFloat>(
    params: &ModelParams<F>,
    cache: &EncCache<F>,
    dout: &Array2<F>,
    grads: &mut ModelParams<F>,
) {
    let e = params.encoder.as_ref().expect("trainable encoder");
    let ge = grads.encoder.as_mut().expect("gradient encoder");
    ge.w2 = &ge.w2 + &cache.a1.t().dot(dout);
    ge.b2 = &ge.b2 + &dout.sum_axis(Axis(0));
    let da1 = dout.dot(&e.w2.t());
    let dz1 = &da1 * &cache.z1.mapv(gelu_prime);
    ge.w1 = &ge.w1 + &cache.x.t().dot(&dz1);
    ge.b1 = &ge.b1 + &dz1.sum_axis(Axis(0));
}

fn raw_features<F: NdFloat>(items: &[crate::episodes::EpisodeItem]) -> Array2<F> {
    let dim = items.first().map_or(0, |it| it.features.len());
    let mut m = Array2::<F>::zeros((items.len(), dim));
    for (i, it) in items.iter().enumerate() {
        for (j, &v) in it.features.iter().enumerate() {
            m[[i, j]] = c(v as f64);
        }
    }
    m
}

struct Forward<F> {
    logits: Array2<F>,
    seqs: Vec<SeqCache<F>>,
    enc_ctx: Option<EncCache<F>>,
    enc_qry: Option<EncCache<F>>,
    ctx_labels: Vec<usize>,
    nk: usize,
    fw: usize,
}

fn forward_full<F: NdFloat>(params: &ModelParams<F>, ep: &Episode) -> Result<Forward<F>> {
    let cfg = &params.config;
    let n = ep.n_ways;
    if n > cfg.n_ways_max {
        return Err(Error::Shape(format!(
            "episode has {n} ways but model supports {}",
            cfg.n_ways_max
        )));
    }
    if ep.context.is_empty() || ep.queries.is_empty() {
        return Err(Error::Shape("empty episode".into()));
    }
    let raw_dim = ep.context[0].features.len();
    if raw_dim != cfg.feat_in {
        return Err(Error::Shape(format!(
            "episode feature dim {raw_dim} != model feat_in {}",
            cfg.feat_in
        )));
    }
    let ctx_raw = raw_features::<F>(&ep.context);
    let qry_raw = raw_features::<F>(&ep.queries);
    let (ctx_feats, enc_ctx) = encode_features(params, &ctx_raw);
    let (qry_feats, enc_qry) = encode_features(params, &qry_raw);
    let ctx_labels: Vec<usize> = ep.context.iter().map(|it| it.label).collect();
    let tokens = assemble_from_encoded(
        &ctx_feats,
        &qry_feats,
        &ctx_labels,
        &params.label_embed,
        &params.unknown,
    )?;
    let mut seqs = Vec::with_capacity(tokens.len());
    let mut logits = Array2::<F>::zeros((tokens.len(), n));
    for (qi, t) in tokens.iter().enumerate() {
        let cache = seq_forward(params, t)?;
        let full = cache.y_query.dot(&params.head_w) + &params.head_b;
        logits.row_mut(qi).assign(&full.slice(s![..n]));
        seqs.push(cache);
    }
    Ok(Forward {
        logits,
        seqs,
        enc_ctx,
        enc_qry,
        ctx_labels,
        nk: ep.context.len(),
        fw: cfg.feat_width,
    })
}

/// Per-query logits (Q x N). The query-position output of the final
/// block passes through the classification head; columns are restricted
/// to the episode's N ways.
pub fn forward_logits<F: NdFloat>(params: &ModelParams<F>, ep: &Episode) -> Result<Array2<F>> {
    Ok(forward_full(params, ep)?.logits)
}

fn cross_entropy_rows<F: NdFloat>(logits: &Array2<F>, truth: &[usize]) -> Result<(F, Array2<F>)> {
    let q = logits.nrows();
    let n = logits.ncols();
    let qf: F = c(q as f64);
    let mut loss = F::zero();
    let mut dlogits = Array2::<F>::zeros(logits.raw_dim());
    for (i, row) in logits.rows().into_iter().enumerate() {
        let y = truth[i];
        if y == 0 || y > n {
            return Err(Error::Shape(format!("query label {y} outside 1..={n}")));
        }
        let mx = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut total = F::zero();
        for &v in row {
            total = total + (v - mx).exp();
        }
        let log_z = total.ln() + mx;
        loss = loss + (log_z - row[y - 1]);
        for j in 0..n {
            let p = (row[j] - mx).exp() / total;
            let target = if j == y - 1 { F::one() } else { F::zero() };
            dlogits[[i, j]] = (p - target) / qf;
        }
    }
    Ok((loss / qf, dlogits))
}

/// (1/Q) sum of cross-entropy losses over the episode's queries.
pub fn episode_loss<F: NdFloat>(params: &ModelParams<F>, ep: &Episode) -> Result<F> {
    let fwd = forward_full(params, ep)?;
    let truth: Vec<usize> = ep.queries.iter().map(|it| it.label).collect();
    Ok(cross_entropy_rows(&fwd.logits, &truth)?.0)
}

/// Loss and the exact reverse-mode gradient for every trainable tensor.
pub fn loss_and_grad<F: NdFloat>(
    params: &ModelParams<F>,
    ep: &Episode,
) -> Result<(F, ModelParams<F>)> {
    let fwd = forward_full(params, ep)?;
    let truth: Vec<usize> = ep.queries.iter().map(|it| it.label).collect();
    let (loss, dlogits) = cross_entropy_rows(&fwd.logits, &truth)?;
    let mut grads = params.zeros_like();
    let n = fwd.logits.ncols();
    let nk = fwd.nk;
    let fw = fwd.fw;
    let lw = params.config.label_width;
    let mut dctx_feats = Array2::<F>::zeros((nk, fw));
    let mut dqry_feats = Array2::<F>::zeros((dlogits.nrows(), fw));
    for (qi, cache) in fwd.seqs.iter().enumerate() {
        // head backward: logits = y_query . head_w + head_b (first n cols used)
        let mut dfull = Array1::<F>::zeros(params.config.n_ways_max);
        for j in 0..n {
            dfull[j] = dlogits[[qi, j]];
        }
        grads.head_b = &grads.head_b + &dfull;
        let y = &cache.y_query;
        for r in 0..y.len() {
            for cidx in 0..dfull.len() {
                grads.head_w[[r, cidx]] = grads.head_w[[r, cidx]] + y[r] * dfull[cidx];
            }
        }
        let dy_query = params.head_w.dot(&dfull);
        let dtokens = seq_backward(params, cache, &dy_query, &mut grads);
        // token gradient routing
        for t in 0..nk {
            let label = fwd.ctx_labels[t];
            for j in 0..fw {
                dctx_feats[[t, j]] = dctx_feats[[t, j]] + dtokens[[t, j]];
            }
            for j in 0..lw {
                grads.label_embed[[label - 1, j]] =
                    grads.label_embed[[label - 1, j]] + dtokens[[t, fw + j]];
            }
        }
        for j in 0..fw {
            dqry_feats[[qi, j]] = dqry_feats[[qi, j]] + dtokens[[nk, j]];
        }
        for j in 0..lw {
            grads.unknown[j] = grads.unknown[j] + dtokens[[nk, fw + j]];
        }
    }
    if let Some(cache) = &fwd.enc_ctx {
        encoder_backward(params, cache, &dctx_feats, &mut grads);
    }
    if let Some(cache) = &fwd.enc_qry {
        encoder_backward(params, cache, &dqry_feats, &mut grads);
    }
    if !grads.all_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    Ok((loss, grads))
}

/// Exact reverse-mode gradient of [`episode_loss`].
pub fn grad_params<F: NdFloat>(params: &ModelParams<F>, ep: &Episode) -> Result<ModelParams<F>> {
    Ok(loss_and_grad(params, ep)?.1)
}
