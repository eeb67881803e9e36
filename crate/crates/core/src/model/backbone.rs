//! Encoder and decoder forward/backward passes (pre-layer-norm variant,
//! sinusoidal positions, shared token embedding).

use crate::error::{Error, Result};
use crate::model::layers::{
    accum, attention_bwd, attention_fwd, ffn_bwd, ffn_fwd, layernorm_bwd, layernorm_fwd,
    linear_fwd, AttentionCache, FfnCache, LayerNormCache, LinearCache,
};
use crate::model::{vocab, ModelConfig, ModelParams};
use crate::optim::ParamMap;
use crate::tensor::Tensor;

/// Last-layer encoder outputs (always padded to `max_seq_len` rows) together
/// with the attention mask marking real positions.
#[derive(Debug, Clone)]
pub struct EncoderStates {
    pub states: Tensor,
    pub mask: Vec<bool>,
}

/// Pads `tokens` to `max_len` with PAD and returns the attendable mask.
pub fn pad_sequence(tokens: &[u32], max_len: usize) -> Result<(Vec<u32>, Vec<bool>)> {
    if tokens.len() > max_len {
        return Err(Error::dimension(
            "pad_sequence",
            format!("sequence length {} exceeds max {max_len}", tokens.len()),
        ));
    }
    let mut padded = tokens.to_vec();
    padded.resize(max_len, vocab::PAD);
    let mut mask = vec![true; tokens.len()];
    mask.resize(max_len, false);
    Ok((padded, mask))
}

fn check_tokens(tokens: &[u32], cfg: &ModelConfig) -> Result<()> {
    for &id in tokens {
        if id as usize >= cfg.vocab_size {
            return Err(Error::Vocab {
                id,
                vocab: cfg.vocab_size,
            });
        }
    }
    Ok(())
}

/// Sinusoidal position table, rows `0..len`.
fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut pe = Tensor::zeros(&[len, d]);
    for pos in 0..len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe.set(pos, 2 * i, angle.sin());
            pe.set(pos, 2 * i + 1, angle.cos());
        }
    }
    pe
}

fn embed(p: &ModelParams, tokens: &[u32], d: usize) -> Tensor {
    let table = p.tensor("enc.embed");
    let mut x = Tensor::zeros(&[tokens.len(), d]);
    for (r, &id) in tokens.iter().enumerate() {
        x.row_mut(r).copy_from_slice(table.row(id as usize));
    }
    x
}

fn embed_bwd(tokens: &[u32], dx: &Tensor, vocab_size: usize, grads: &mut ParamMap) {
    let d = dx.cols();
    let mut dt = Tensor::zeros(&[vocab_size, d]);
    for (r, &id) in tokens.iter().enumerate() {
        let row = dx.row(r);
        let out = dt.row_mut(id as usize);
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    accum(grads, "enc.embed", dt);
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

pub(crate) struct EncLayerCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    ffn: FfnCache,
}

pub(crate) struct EncodeCache {
    tokens: Vec<u32>,
    layers: Vec<EncLayerCache>,
    lnf: LayerNormCache,
}

pub(crate) fn encode_with_cache(
    p: &ModelParams,
    cfg: &ModelConfig,
    tokens: &[u32],
    pad_mask: Option<&[bool]>,
) -> Result<(EncoderStates, EncodeCache)> {
    check_tokens(tokens, cfg)?;
    if let Some(m) = pad_mask {
        if m.len() != tokens.len() {
            return Err(Error::dimension(
                "encode",
                format!("mask length {} vs {} tokens", m.len(), tokens.len()),
            ));
        }
    }
    let l = cfg.max_seq_len;
    let (padded, mut mask) = pad_sequence(tokens, l)?;
    if let Some(m) = pad_mask {
        mask[..m.len()].copy_from_slice(m);
    }
    if !mask.iter().any(|&b| b) {
        return Err(Error::DegenerateBatch("no attendable positions".into()));
    }

    let mut x = embed(p, &padded, cfg.d_model)
        .add(&positional_encoding(l, cfg.d_model))
        .expect("embedding and position table shapes agree");
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for li in 0..cfg.num_layers {
        let pre = format!("enc.l{li}");
        let (n1, ln1) = layernorm_fwd(p, &format!("{pre}.ln1"), &x);
        let (a, attn) = attention_fwd(p, &format!("{pre}.attn"), &n1, &n1, &mask, false, cfg.num_heads)?;
        let h = x.add(&a)?;
        let (n2, ln2) = layernorm_fwd(p, &format!("{pre}.ln2"), &h);
        let (f, ffn) = ffn_fwd(p, &format!("{pre}.ffn"), &n2)?;
        x = h.add(&f)?;
        layers.push(EncLayerCache { ln1, attn, ln2, ffn });
    }
    let (states, lnf) = layernorm_fwd(p, "enc.lnf", &x);
    Ok((
        EncoderStates { states, mask },
        EncodeCache {
            tokens: padded,
            layers,
            lnf,
        },
    ))
}

/// Standard transformer encoder over a padded copy of `tokens`.
///
/// When `pad_mask` is omitted the mask marks exactly the provided tokens as
/// attendable. Padded key positions never receive attention, so real outputs
/// are independent of the padded token values.
pub fn encode(
    p: &ModelParams,
    cfg: &ModelConfig,
    tokens: &[u32],
    pad_mask: Option<&[bool]>,
) -> Result<EncoderStates> {
    encode_with_cache(p, cfg, tokens, pad_mask).map(|(s, _)| s)
}

pub(crate) fn encode_backward(
    p: &ModelParams,
    cfg: &ModelConfig,
    cache: &EncodeCache,
    d_states: &Tensor,
    grads: &mut ParamMap,
) -> Result<()> {
    let mut dx = layernorm_bwd(p, "enc.lnf", &cache.lnf, d_states, grads);
    for (li, lc) in cache.layers.iter().enumerate().rev() {
        let pre = format!("enc.l{li}");
        // x_out = h + ffn(ln2(h)); h = x_in + attn(ln1(x_in))
        let df = ffn_bwd(p, &format!("{pre}.ffn"), &lc.ffn, &dx, grads)?;
        let dn2 = layernorm_bwd(p, &format!("{pre}.ln2"), &lc.ln2, &df, grads);
        let mut dh = dx;
        dh.add_scaled(&dn2, 1.0)?;
        let (dq, dkv) = attention_bwd(p, &format!("{pre}.attn"), &lc.attn, &dh, cfg.num_heads, grads)?;
        let mut dn1 = dq;
        dn1.add_scaled(&dkv, 1.0)?;
        let d_from_ln1 = layernorm_bwd(p, &format!("{pre}.ln1"), &lc.ln1, &dn1, grads);
        dx = dh;
        dx.add_scaled(&d_from_ln1, 1.0)?;
    }
    embed_bwd(&cache.tokens, &dx, cfg.vocab_size, grads);
    Ok(())
}

// ---------------------------------------------------------------------------
// Decoder
// ---------------------------------------------------------------------------

pub(crate) struct DecLayerCache {
    ln1: LayerNormCache,
    self_attn: AttentionCache,
    ln2: LayerNormCache,
    cross: AttentionCache,
    ln3: LayerNormCache,
    ffn: FfnCache,
}

pub(crate) struct DecodeCache {
    tokens: Vec<u32>,
    layers: Vec<DecLayerCache>,
    lnf: LayerNormCache,
}

pub(crate) fn decode_states_with_cache(
    p: &ModelParams,
    cfg: &ModelConfig,
    enc: &EncoderStates,
    target_tokens: &[u32],
) -> Result<(Tensor, DecodeCache)> {
    check_tokens(target_tokens, cfg)?;
    let lt = target_tokens.len();
    if lt > cfg.max_seq_len {
        return Err(Error::dimension(
            "decode",
            format!("target length {lt} exceeds max {}", cfg.max_seq_len),
        ));
    }
    if lt == 0 {
        return Ok((
            Tensor::zeros(&[0, cfg.d_model]),
            DecodeCache {
                tokens: Vec::new(),
                layers: Vec::new(),
                lnf: layernorm_fwd(p, "dec.lnf", &Tensor::zeros(&[0, cfg.d_model])).1,
            },
        ));
    }

    let self_mask = vec![true; lt];
    let mut x = embed(p, target_tokens, cfg.d_model)
        .add(&positional_encoding(cfg.max_seq_len, cfg.d_model).slice_rows(lt))
        .expect("embedding and position table shapes agree");
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for li in 0..cfg.num_layers {
        let pre = format!("dec.l{li}");
        let (n1, ln1) = layernorm_fwd(p, &format!("{pre}.ln1"), &x);
        let (a, self_attn) =
            attention_fwd(p, &format!("{pre}.self"), &n1, &n1, &self_mask, true, cfg.num_heads)?;
        let h = x.add(&a)?;
        let (n2, ln2) = layernorm_fwd(p, &format!("{pre}.ln2"), &h);
        let (c, cross) = attention_fwd(
            p,
            &format!("{pre}.cross"),
            &n2,
            &enc.states,
            &enc.mask,
            false,
            cfg.num_heads,
        )?;
        let h2 = h.add(&c)?;
        let (n3, ln3) = layernorm_fwd(p, &format!("{pre}.ln3"), &h2);
        let (f, ffn) = ffn_fwd(p, &format!("{pre}.ffn"), &n3)?;
        x = h2.add(&f)?;
        layers.push(DecLayerCache {
            ln1,
            self_attn,
            ln2,
            cross,
            ln3,
            ffn,
        });
    }
    let (states, lnf) = layernorm_fwd(p, "dec.lnf", &x);
    Ok((
        states,
        DecodeCache {
            tokens: target_tokens.to_vec(),
            layers,
            lnf,
        },
    ))
}

/// Decoder last-layer hidden states under teacher forcing (causal
/// self-attention plus cross-attention to the encoder outputs).
pub fn decode_states(
    p: &ModelParams,
    cfg: &ModelConfig,
    enc: &EncoderStates,
    target_tokens: &[u32],
) -> Result<Tensor> {
    decode_states_with_cache(p, cfg, enc, target_tokens).map(|(s, _)| s)
}

/// Logits of the backbone's reconstruction head over decoder states.
pub(crate) fn reconstruction_logits_cached(
    p: &ModelParams,
    states: &Tensor,
) -> Result<(Tensor, LinearCache)> {
    linear_fwd(p, "dec.out.w", "dec.out.b", states)
}

/// Per-position vocabulary logits from the backbone's reconstruction head.
pub fn decode(
    p: &ModelParams,
    cfg: &ModelConfig,
    enc: &EncoderStates,
    target_tokens: &[u32],
) -> Result<Tensor> {
    let (states, _) = decode_states_with_cache(p, cfg, enc, target_tokens)?;
    if target_tokens.is_empty() {
        return Ok(Tensor::zeros(&[0, cfg.vocab_size]));
    }
    reconstruction_logits_cached(p, &states).map(|(l, _)| l)
}

/// Backward from decoder hidden-state gradients; returns the gradient with
/// respect to the encoder states (via cross-attention).
pub(crate) fn decode_backward(
    p: &ModelParams,
    cfg: &ModelConfig,
    cache: &DecodeCache,
    d_states: &Tensor,
    grads: &mut ParamMap,
) -> Result<Tensor> {
    let l = cfg.max_seq_len;
    if cache.tokens.is_empty() {
        return Ok(Tensor::zeros(&[l, cfg.d_model]));
    }
    let mut d_enc = Tensor::zeros(&[l, cfg.d_model]);
    let mut dx = layernorm_bwd(p, "dec.lnf", &cache.lnf, d_states, grads);
    for (li, lc) in cache.layers.iter().enumerate().rev() {
        let pre = format!("dec.l{li}");
        let df = ffn_bwd(p, &format!("{pre}.ffn"), &lc.ffn, &dx, grads)?;
        let dn3 = layernorm_bwd(p, &format!("{pre}.ln3"), &lc.ln3, &df, grads);
        let mut dh2 = dx;
        dh2.add_scaled(&dn3, 1.0)?;
        let (dq_cross, denc_part) =
            attention_bwd(p, &format!("{pre}.cross"), &lc.cross, &dh2, cfg.num_heads, grads)?;
        d_enc.add_scaled(&denc_part, 1.0)?;
        let dn2 = layernorm_bwd(p, &format!("{pre}.ln2"), &lc.ln2, &dq_cross, grads);
        let mut dh = dh2;
        dh.add_scaled(&dn2, 1.0)?;
        let (dq_self, dkv_self) =
            attention_bwd(p, &format!("{pre}.self"), &lc.self_attn, &dh, cfg.num_heads, grads)?;
        let mut dn1 = dq_self;
        dn1.add_scaled(&dkv_self, 1.0)?;
        let d_from_ln1 = layernorm_bwd(p, &format!("{pre}.ln1"), &lc.ln1, &dn1, grads);
        dx = dh;
        dx.add_scaled(&d_from_ln1, 1.0)?;
    }
    embed_bwd(&cache.tokens, &dx, cfg.vocab_size, grads);
    Ok(d_enc)
}

impl Tensor {
    /// First `n` rows of a rank-2 tensor.
    pub(crate) fn slice_rows(&self, n: usize) -> Tensor {
        let c = self.cols();
        Tensor::new(vec![n, c], self.data()[..n * c].to_vec()).expect("row slice in range")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use crate::rng::RngStream;

    fn setup() -> (ModelConfig, ModelParams) {
        let cfg = ModelConfig::micro();
        let p = init_model(&cfg, &RngStream::new(21, "backbone"));
        (cfg, p)
    }

    #[test]
    fn encode_output_shape_is_padded() {
        let (cfg, p) = setup();
        let enc = encode(&p, &cfg, &[5, 6, 7], None).unwrap();
        assert_eq!(enc.states.shape(), &[cfg.max_seq_len, cfg.d_model]);
        assert_eq!(enc.mask, vec![true, true, true, false, false, false, false, false]);
        assert!(enc.states.is_finite());
    }

    #[test]
    fn padded_token_values_do_not_leak() {
        let (cfg, p) = setup();
        // Same 3 real tokens, mask excludes position 3 in both, but the
        // padded-position id differs.
        let a = encode(&p, &cfg, &[5, 6, 7, 9], Some(&[true, true, true, false])).unwrap();
        let b = encode(&p, &cfg, &[5, 6, 7, 12], Some(&[true, true, true, false])).unwrap();
        for r in 0..3 {
            for (x, y) in a.states.row(r).iter().zip(b.states.row(r)) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn encode_deterministic() {
        let (cfg, p) = setup();
        let a = encode(&p, &cfg, &[1, 2, 3, 4], None).unwrap();
        let b = encode(&p, &cfg, &[1, 2, 3, 4], None).unwrap();
        assert_eq!(a.states, b.states);
    }

    #[test]
    fn encode_rejects_out_of_vocab() {
        let (cfg, p) = setup();
        let err = encode(&p, &cfg, &[5, 99], None);
        assert!(matches!(err, Err(Error::Vocab { id: 99, .. })));
    }

    #[test]
    fn decode_is_causal() {
        let (cfg, p) = setup();
        let enc = encode(&p, &cfg, &[5, 6, 7, 8], None).unwrap();
        let base = decode(&p, &cfg, &enc, &[2, 5, 6, 7]).unwrap();
        // Perturb the target token at position 2; logits at positions < 2
        // must be unchanged.
        let pert = decode(&p, &cfg, &enc, &[2, 5, 9, 7]).unwrap();
        for r in 0..2 {
            for (x, y) in base.row(r).iter().zip(pert.row(r)) {
                assert!((x - y).abs() <= 1e-12, "row {r} leaked");
            }
        }
        // And the perturbed position itself must differ.
        assert!(base
            .row(2)
            .iter()
            .zip(pert.row(2))
            .any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn decode_shape_and_empty_target() {
        let (cfg, p) = setup();
        let enc = encode(&p, &cfg, &[5, 6], None).unwrap();
        let logits = decode(&p, &cfg, &enc, &[2, 5, 6]).unwrap();
        assert_eq!(logits.shape(), &[3, cfg.vocab_size]);
        assert!(logits.is_finite());
        let empty = decode(&p, &cfg, &enc, &[]).unwrap();
        assert_eq!(empty.shape(), &[0, cfg.vocab_size]);
    }
}
