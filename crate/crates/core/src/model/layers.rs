//! Layer building blocks with hand-derived backward passes.
//!
//! Every forward function returns a cache holding exactly what its backward
//! needs; gradients accumulate into a plain `ParamMap` keyed like the model.

use crate::error::Result;
use crate::model::ModelParams;
use crate::optim::ParamMap;
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;
const MASKED_SCORE: f64 = -1e30;

pub(crate) fn accum(grads: &mut ParamMap, key: &str, add: Tensor) {
    match grads.get_mut(key) {
        Some(t) => t.add_scaled(&add, 1.0).expect("gradient shapes agree"),
        None => {
            grads.insert(key.to_string(), add);
        }
    }
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

pub(crate) struct LinearCache {
    x: Tensor,
}

pub(crate) fn linear_fwd(
    p: &ModelParams,
    wkey: &str,
    bkey: &str,
    x: &Tensor,
) -> Result<(Tensor, LinearCache)> {
    let y = x.matmul(p.tensor(wkey))?.add_row_broadcast(p.tensor(bkey))?;
    Ok((y, LinearCache { x: x.clone() }))
}

pub(crate) fn linear_bwd(
    p: &ModelParams,
    wkey: &str,
    bkey: &str,
    cache: &LinearCache,
    dy: &Tensor,
    grads: &mut ParamMap,
) -> Result<Tensor> {
    accum(grads, wkey, cache.x.matmul_tn(dy)?);
    accum(grads, bkey, dy.sum_rows());
    dy.matmul_nt(p.tensor(wkey))
}

// ---------------------------------------------------------------------------
// Layer norm (row-wise)
// ---------------------------------------------------------------------------

pub(crate) struct LayerNormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

pub(crate) fn layernorm_fwd(
    p: &ModelParams,
    prefix: &str,
    x: &Tensor,
) -> (Tensor, LayerNormCache) {
    let gain = p.tensor(&format!("{prefix}.g"));
    let bias = p.tensor(&format!("{prefix}.b"));
    let (rows, cols) = (x.rows(), x.cols());
    let mut y = Tensor::zeros(&[rows, cols]);
    let mut xhat = Tensor::zeros(&[rows, cols]);
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = is;
        for c in 0..cols {
            let xh = (row[c] - mean) * is;
            xhat.set(r, c, xh);
            y.set(r, c, gain.data()[c] * xh + bias.data()[c]);
        }
    }
    (y, LayerNormCache { xhat, inv_std })
}

pub(crate) fn layernorm_bwd(
    p: &ModelParams,
    prefix: &str,
    cache: &LayerNormCache,
    dy: &Tensor,
    grads: &mut ParamMap,
) -> Tensor {
    let gain = p.tensor(&format!("{prefix}.g"));
    let (rows, cols) = (dy.rows(), dy.cols());
    let mut dx = Tensor::zeros(&[rows, cols]);
    let mut dgain = vec![0.0; cols];
    let mut dbias = vec![0.0; cols];
    for r in 0..rows {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        let is = cache.inv_std[r];
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for c in 0..cols {
            let d1 = dyr[c] * gain.data()[c];
            m1 += d1;
            m2 += d1 * xh[c];
            dgain[c] += dyr[c] * xh[c];
            dbias[c] += dyr[c];
        }
        m1 /= cols as f64;
        m2 /= cols as f64;
        for c in 0..cols {
            let d1 = dyr[c] * gain.data()[c];
            dx.set(r, c, (d1 - m1 - xh[c] * m2) * is);
        }
    }
    accum(grads, &format!("{prefix}.g"), Tensor::new(vec![cols], dgain).unwrap());
    accum(grads, &format!("{prefix}.b"), Tensor::new(vec![cols], dbias).unwrap());
    dx
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) struct GeluCache {
    x: Tensor,
}

pub(crate) fn gelu_fwd(x: &Tensor) -> (Tensor, GeluCache) {
    let mut y = x.clone();
    for v in y.data_mut() {
        *v = gelu_scalar(*v);
    }
    (y, GeluCache { x: x.clone() })
}

pub(crate) fn gelu_bwd(cache: &GeluCache, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, &x) in dx.data_mut().iter_mut().zip(cache.x.data()) {
        *d *= gelu_grad_scalar(x);
    }
    dx
}

pub(crate) struct TanhCache {
    y: Tensor,
}

pub(crate) fn tanh_fwd(x: &Tensor) -> (Tensor, TanhCache) {
    let mut y = x.clone();
    for v in y.data_mut() {
        *v = v.tanh();
    }
    let cache = TanhCache { y: y.clone() };
    (y, cache)
}

pub(crate) fn tanh_bwd(cache: &TanhCache, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, &y) in dx.data_mut().iter_mut().zip(cache.y.data()) {
        *d *= 1.0 - y * y;
    }
    dx
}

// ---------------------------------------------------------------------------
// Multi-head attention
// ---------------------------------------------------------------------------

fn col_block(t: &Tensor, from: usize, width: usize) -> Tensor {
    let rows = t.rows();
    let mut out = Tensor::zeros(&[rows, width]);
    for r in 0..rows {
        let src = &t.row(r)[from..from + width];
        out.row_mut(r).copy_from_slice(src);
    }
    out
}

fn add_col_block(dst: &mut Tensor, from: usize, block: &Tensor) {
    let width = block.cols();
    for r in 0..dst.rows() {
        let d = &mut dst.row_mut(r)[from..from + width];
        for (o, &b) in d.iter_mut().zip(block.row(r)) {
            *o += b;
        }
    }
}

pub(crate) struct AttentionCache {
    q_lin: LinearCache,
    k_lin: LinearCache,
    v_lin: LinearCache,
    o_lin: LinearCache,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    probs: Vec<Tensor>,
}

/// Multi-head scaled dot-product attention.
///
/// `key_mask[j] == false` removes key position `j` from every query's
/// attention; `causal` additionally removes keys beyond the query position.
/// Parameter keys are `{prefix}.{wq,bq,wk,bk,wv,bv,wo,bo}`.
pub(crate) fn attention_fwd(
    p: &ModelParams,
    prefix: &str,
    x_q: &Tensor,
    x_kv: &Tensor,
    key_mask: &[bool],
    causal: bool,
    num_heads: usize,
) -> Result<(Tensor, AttentionCache)> {
    let d = x_q.cols();
    let hd = d / num_heads;
    let (lq, lk) = (x_q.rows(), x_kv.rows());
    debug_assert_eq!(key_mask.len(), lk);

    let (q, q_lin) = linear_fwd(p, &format!("{prefix}.wq"), &format!("{prefix}.bq"), x_q)?;
    let (k, k_lin) = linear_fwd(p, &format!("{prefix}.wk"), &format!("{prefix}.bk"), x_kv)?;
    let (v, v_lin) = linear_fwd(p, &format!("{prefix}.wv"), &format!("{prefix}.bv"), x_kv)?;

    let scale = 1.0 / (hd as f64).sqrt();
    let mut concat = Tensor::zeros(&[lq, d]);
    let mut probs = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let qh = col_block(&q, h * hd, hd);
        let kh = col_block(&k, h * hd, hd);
        let vh = col_block(&v, h * hd, hd);
        let mut scores = qh.matmul_nt(&kh)?.scale(scale);
        for i in 0..lq {
            for j in 0..lk {
                if !key_mask[j] || (causal && j > i) {
                    scores.set(i, j, MASKED_SCORE);
                }
            }
        }
        let ph = scores.softmax_rows();
        let oh = ph.matmul(&vh)?;
        add_col_block(&mut concat, h * hd, &oh);
        probs.push(ph);
    }
    let (out, o_lin) = linear_fwd(p, &format!("{prefix}.wo"), &format!("{prefix}.bo"), &concat)?;
    Ok((
        out,
        AttentionCache {
            q_lin,
            k_lin,
            v_lin,
            o_lin,
            q,
            k,
            v,
            probs,
        },
    ))
}

/// Returns `(dx_q, dx_kv)`. For self-attention the caller adds them.
pub(crate) fn attention_bwd(
    p: &ModelParams,
    prefix: &str,
    cache: &AttentionCache,
    dout: &Tensor,
    num_heads: usize,
    grads: &mut ParamMap,
) -> Result<(Tensor, Tensor)> {
    let d = cache.q.cols();
    let hd = d / num_heads;
    let scale = 1.0 / (hd as f64).sqrt();

    let d_concat = linear_bwd(
        p,
        &format!("{prefix}.wo"),
        &format!("{prefix}.bo"),
        &cache.o_lin,
        dout,
        grads,
    )?;

    let mut dq = Tensor::zeros_like(&cache.q);
    let mut dk = Tensor::zeros_like(&cache.k);
    let mut dv = Tensor::zeros_like(&cache.v);
    for h in 0..num_heads {
        let qh = col_block(&cache.q, h * hd, hd);
        let kh = col_block(&cache.k, h * hd, hd);
        let vh = col_block(&cache.v, h * hd, hd);
        let ph = &cache.probs[h];
        let doh = col_block(&d_concat, h * hd, hd);

        let dp = doh.matmul_nt(&vh)?;
        let dvh = ph.matmul_tn(&doh)?;
        // Softmax backward: ds = p * (dp - rowsum(dp * p)), masked entries
        // have p == 0 and drop out automatically.
        let mut ds = Tensor::zeros_like(&dp);
        for i in 0..dp.rows() {
            let pr = ph.row(i);
            let dpr = dp.row(i);
            let inner: f64 = pr.iter().zip(dpr).map(|(&a, &b)| a * b).sum();
            for j in 0..dp.cols() {
                ds.set(i, j, pr[j] * (dpr[j] - inner) * scale);
            }
        }
        let dqh = ds.matmul(&kh)?;
        let dkh = ds.matmul_tn(&qh)?;
        add_col_block(&mut dq, h * hd, &dqh);
        add_col_block(&mut dk, h * hd, &dkh);
        add_col_block(&mut dv, h * hd, &dvh);
    }

    let dxq = linear_bwd(
        p,
        &format!("{prefix}.wq"),
        &format!("{prefix}.bq"),
        &cache.q_lin,
        &dq,
        grads,
    )?;
    let mut dxkv = linear_bwd(
        p,
        &format!("{prefix}.wk"),
        &format!("{prefix}.bk"),
        &cache.k_lin,
        &dk,
        grads,
    )?;
    let dxv = linear_bwd(
        p,
        &format!("{prefix}.wv"),
        &format!("{prefix}.bv"),
        &cache.v_lin,
        &dv,
        grads,
    )?;
    dxkv.add_scaled(&dxv, 1.0)?;
    Ok((dxq, dxkv))
}

// ---------------------------------------------------------------------------
// Feed-forward block
// ---------------------------------------------------------------------------

pub(crate) struct FfnCache {
    lin1: LinearCache,
    gelu: GeluCache,
    lin2: LinearCache,
}

pub(crate) fn ffn_fwd(p: &ModelParams, prefix: &str, x: &Tensor) -> Result<(Tensor, FfnCache)> {
    let (h, lin1) = linear_fwd(p, &format!("{prefix}.w1"), &format!("{prefix}.b1"), x)?;
    let (a, gelu) = gelu_fwd(&h);
    let (y, lin2) = linear_fwd(p, &format!("{prefix}.w2"), &format!("{prefix}.b2"), &a)?;
    Ok((y, FfnCache { lin1, gelu, lin2 }))
}

pub(crate) fn ffn_bwd(
    p: &ModelParams,
    prefix: &str,
    cache: &FfnCache,
    dy: &Tensor,
    grads: &mut ParamMap,
) -> Result<Tensor> {
    let da = linear_bwd(p, &format!("{prefix}.w2"), &format!("{prefix}.b2"), &cache.lin2, dy, grads)?;
    let dh = gelu_bwd(&cache.gelu, &da);
    linear_bwd(p, &format!("{prefix}.w1"), &format!("{prefix}.b1"), &cache.lin1, &dh, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use crate::model::{init_model, ModelConfig, RegionSet, Region};
    use crate::rng::RngStream;

    fn rand_tensor(shape: &[usize], rng: &mut RngStream) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal() * 0.5).collect()).unwrap()
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let cfg = ModelConfig::micro();
        let p = init_model(&cfg, &RngStream::new(5, "attn"));
        let mut rng = RngStream::new(6, "data");
        let x = rand_tensor(&[4, cfg.d_model], &mut rng);
        let mask = vec![true, true, true, false];
        let target = rand_tensor(&[4, cfg.d_model], &mut rng);

        // Scalar loss: squared error against a fixed target.
        let loss_of = |params: &ModelParams| -> f64 {
            let (out, _) =
                attention_fwd(params, "enc.l0.attn", &x, &x, &mask, false, cfg.num_heads).unwrap();
            out.sub(&target)
                .unwrap()
                .data()
                .iter()
                .map(|&v| 0.5 * v * v)
                .sum()
        };

        let (out, cache) =
            attention_fwd(&p, "enc.l0.attn", &x, &x, &mask, false, cfg.num_heads).unwrap();
        let dout = out.sub(&target).unwrap();
        let mut grads = ParamMap::new();
        attention_bwd(&p, "enc.l0.attn", &cache, &dout, cfg.num_heads, &mut grads).unwrap();

        let attn_keys: Vec<String> = p
            .keys_in(RegionSet::of(&[Region::Encoder]))
            .filter(|k| k.starts_with("enc.l0.attn"))
            .cloned()
            .collect();
        let plain = p.extract(RegionSet::backbone());
        let analytic: ParamMap = attn_keys
            .iter()
            .map(|k| (k.clone(), grads[k].clone()))
            .collect();
        let report = finite_diff_check(
            |vals| Ok(loss_of(&p.with_values(vals).unwrap())),
            &plain,
            &analytic,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn layernorm_gradients_match_finite_differences() {
        let cfg = ModelConfig::micro();
        let p = init_model(&cfg, &RngStream::new(7, "ln"));
        let mut rng = RngStream::new(8, "data");
        let x = rand_tensor(&[3, cfg.d_model], &mut rng);

        let loss_of = |params: &ModelParams| -> f64 {
            let (y, _) = layernorm_fwd(params, "enc.lnf", &x);
            y.data().iter().map(|&v| v * v * 0.5).sum()
        };

        let (y, cache) = layernorm_fwd(&p, "enc.lnf", &x);
        let mut grads = ParamMap::new();
        let _dx = layernorm_bwd(&p, "enc.lnf", &cache, &y, &mut grads);

        let plain = p.extract(RegionSet::backbone());
        let analytic: ParamMap = ["enc.lnf.g", "enc.lnf.b"]
            .iter()
            .map(|k| (k.to_string(), grads[*k].clone()))
            .collect();
        let report = finite_diff_check(
            |vals| Ok(loss_of(&p.with_values(vals).unwrap())),
            &plain,
            &analytic,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn gelu_derivative_matches_numeric() {
        for x in [-2.0, -0.3, 0.0, 0.7, 1.9] {
            let h = 1e-6;
            let numeric = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((gelu_grad_scalar(x) - numeric).abs() < 1e-8, "x={x}");
        }
    }
}
