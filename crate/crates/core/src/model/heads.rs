//! Prediction heads: the shared MLM head plus the private task and contrast
//! heads.

use crate::error::Result;
use crate::model::layers::{
    gelu_bwd, gelu_fwd, layernorm_bwd, layernorm_fwd, linear_bwd, linear_fwd, tanh_bwd, tanh_fwd,
    GeluCache, LayerNormCache, LinearCache, TanhCache,
};
use crate::model::ModelParams;
use crate::optim::ParamMap;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// MLM head: dense -> gelu -> layer norm -> untied output projection
// ---------------------------------------------------------------------------

pub(crate) struct MlmHeadCache {
    dense: LinearCache,
    gelu: GeluCache,
    ln: LayerNormCache,
    out: LinearCache,
}

pub(crate) fn mlm_head_with_cache(
    p: &ModelParams,
    states: &Tensor,
) -> Result<(Tensor, MlmHeadCache)> {
    let (h, dense) = linear_fwd(p, "mlm.dense.w", "mlm.dense.b", states)?;
    let (a, gelu) = gelu_fwd(&h);
    let (n, ln) = layernorm_fwd(p, "mlm.ln", &a);
    let (logits, out) = linear_fwd(p, "mlm.out.w", "mlm.out.b", &n)?;
    Ok((logits, MlmHeadCache { dense, gelu, ln, out }))
}

/// Vocabulary logits for each state row.
pub fn mlm_head_forward(p: &ModelParams, states: &Tensor) -> Result<Tensor> {
    mlm_head_with_cache(p, states).map(|(l, _)| l)
}

pub(crate) fn mlm_head_backward(
    p: &ModelParams,
    cache: &MlmHeadCache,
    d_logits: &Tensor,
    grads: &mut ParamMap,
) -> Result<Tensor> {
    let dn = linear_bwd(p, "mlm.out.w", "mlm.out.b", &cache.out, d_logits, grads)?;
    let da = layernorm_bwd(p, "mlm.ln", &cache.ln, &dn, grads);
    let dh = gelu_bwd(&cache.gelu, &da);
    linear_bwd(p, "mlm.dense.w", "mlm.dense.b", &cache.dense, &dh, grads)
}

// ---------------------------------------------------------------------------
// Private task heads (single linear layers over encoder/decoder states)
// ---------------------------------------------------------------------------

pub(crate) fn classifier_with_cache(
    p: &ModelParams,
    pooled: &Tensor,
) -> Result<(Tensor, LinearCache)> {
    linear_fwd(p, "task.cls.w", "task.cls.b", pooled)
}

pub(crate) fn span_head_with_cache(
    p: &ModelParams,
    states: &Tensor,
) -> Result<(Tensor, LinearCache)> {
    linear_fwd(p, "task.span.w", "task.span.b", states)
}

pub(crate) fn generator_with_cache(
    p: &ModelParams,
    states: &Tensor,
) -> Result<(Tensor, LinearCache)> {
    linear_fwd(p, "task.gen.w", "task.gen.b", states)
}

/// Shared backward for the single-linear task heads.
pub(crate) fn linear_head_backward(
    p: &ModelParams,
    wkey: &str,
    bkey: &str,
    cache: &LinearCache,
    dy: &Tensor,
    grads: &mut ParamMap,
) -> Result<Tensor> {
    linear_bwd(p, wkey, bkey, cache, dy, grads)
}

// ---------------------------------------------------------------------------
// Contrast head: two-layer MLP with tanh
// ---------------------------------------------------------------------------

pub(crate) struct ContrastMlpCache {
    fc1: LinearCache,
    tanh: TanhCache,
    fc2: LinearCache,
}

pub(crate) fn contrast_mlp_with_cache(
    p: &ModelParams,
    states: &Tensor,
) -> Result<(Tensor, ContrastMlpCache)> {
    let (h, fc1) = linear_fwd(p, "con.fc1.w", "con.fc1.b", states)?;
    let (a, tanh) = tanh_fwd(&h);
    let (y, fc2) = linear_fwd(p, "con.fc2.w", "con.fc2.b", &a)?;
    Ok((y, ContrastMlpCache { fc1, tanh, fc2 }))
}

pub(crate) fn contrast_mlp_backward(
    p: &ModelParams,
    cache: &ContrastMlpCache,
    dy: &Tensor,
    grads: &mut ParamMap,
) -> Result<Tensor> {
    let da = linear_bwd(p, "con.fc2.w", "con.fc2.b", &cache.fc2, dy, grads)?;
    let dh = tanh_bwd(&cache.tanh, &da);
    linear_bwd(p, "con.fc1.w", "con.fc1.b", &cache.fc1, &dh, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use crate::rng::RngStream;

    #[test]
    fn mlm_head_shape_and_pointwise_rows() {
        let cfg = ModelConfig::micro();
        let p = init_model(&cfg, &RngStream::new(2, "heads"));
        let mut states = Tensor::zeros(&[3, cfg.d_model]);
        let row: Vec<f64> = (0..cfg.d_model).map(|i| 0.1 * i as f64).collect();
        states.row_mut(0).copy_from_slice(&row);
        states.row_mut(2).copy_from_slice(&row);
        let logits = mlm_head_forward(&p, &states).unwrap();
        assert_eq!(logits.shape(), &[3, cfg.vocab_size]);
        // Identical input rows produce identical logit rows.
        assert_eq!(logits.row(0), logits.row(2));
        // Deterministic.
        let again = mlm_head_forward(&p, &states).unwrap();
        assert_eq!(logits, again);
    }
}
