//! Summarized representations over the shared synthetic dataset.
//!
//! Each probe instance runs through the full backbone (the instance is both
//! the encoder source and, shifted right, the teacher-forced decoder input);
//! the contrast-head MLP maps every decoder position to the summary space
//! and the result is averaged over positions, then over instances.

use crate::error::{Error, Result};
use crate::exec;
use crate::model::backbone::{
    decode_backward, decode_states_with_cache, encode_backward, encode_with_cache,
};
use crate::model::heads::{contrast_mlp_backward, contrast_mlp_with_cache};
use crate::model::{vocab, ModelConfig, ModelParams};
use crate::optim::{merge_grads, ParamMap};
use crate::tensor::Tensor;

/// Fixed chunk width for gradient accumulation; keeping it independent of
/// the thread count makes the parallel and sequential paths bit-identical.
const GRAD_CHUNK: usize = 4;

fn shift_right(tokens: &[u32]) -> Vec<u32> {
    let mut out = Vec::with_capacity(tokens.len());
    out.push(vocab::BOS);
    out.extend_from_slice(&tokens[..tokens.len() - 1]);
    out
}

fn instance_mean(p: &ModelParams, cfg: &ModelConfig, tokens: &[u32]) -> Result<Vec<f64>> {
    let mask = vec![true; tokens.len()];
    let enc = super::backbone::encode(p, cfg, tokens, Some(&mask))?;
    let dec_input = shift_right(tokens);
    let states = super::backbone::decode_states(p, cfg, &enc, &dec_input)?;
    let (mlp_out, _) = contrast_mlp_with_cache(p, &states)?;
    let t = mlp_out.rows();
    let mut mean = vec![0.0; cfg.mlp_summary_dim];
    for r in 0..t {
        for (m, &v) in mean.iter_mut().zip(mlp_out.row(r)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= t as f64;
    }
    Ok(mean)
}

/// The client's summarized representation `h` over a probe batch.
pub fn summary_representation(
    p: &ModelParams,
    cfg: &ModelConfig,
    batch: &[Vec<u32>],
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::DegenerateBatch("empty probe batch".into()));
    }
    for seq in batch {
        if seq.is_empty() {
            return Err(Error::DegenerateBatch("empty probe sequence".into()));
        }
    }
    let means = exec::map_ref(batch, |_, seq| instance_mean(p, cfg, seq));
    let mut h = vec![0.0; cfg.mlp_summary_dim];
    for m in means {
        let m = m?;
        for (a, b) in h.iter_mut().zip(m) {
            *a += b;
        }
    }
    let inv = 1.0 / batch.len() as f64;
    for a in &mut h {
        *a *= inv;
    }
    Ok(h)
}

fn instance_backward(
    p: &ModelParams,
    cfg: &ModelConfig,
    tokens: &[u32],
    d_h: &[f64],
    batch_size: usize,
) -> Result<ParamMap> {
    let mask = vec![true; tokens.len()];
    let (enc, enc_cache) = encode_with_cache(p, cfg, tokens, Some(&mask))?;
    let dec_input = shift_right(tokens);
    let (states, dec_cache) = decode_states_with_cache(p, cfg, &enc, &dec_input)?;
    let (mlp_out, mlp_cache) = contrast_mlp_with_cache(p, &states)?;

    let t = mlp_out.rows();
    let scale = 1.0 / (batch_size as f64 * t as f64);
    let mut d_mlp = Tensor::zeros(&[t, cfg.mlp_summary_dim]);
    for r in 0..t {
        for (c, &g) in d_h.iter().enumerate() {
            d_mlp.set(r, c, g * scale);
        }
    }

    let mut grads = ParamMap::new();
    let d_states = contrast_mlp_backward(p, &mlp_cache, &d_mlp, &mut grads)?;
    let d_enc = decode_backward(p, cfg, &dec_cache, &d_states, &mut grads)?;
    encode_backward(p, cfg, &enc_cache, &d_enc, &mut grads)?;
    Ok(grads)
}

/// Gradient of `dot(d_h, h)` with respect to the parameters on the summary
/// path (encoder, decoder, contrast head). Instances are processed in fixed
/// chunks and merged in order, so results do not depend on thread count.
pub(crate) fn summary_backward(
    p: &ModelParams,
    cfg: &ModelConfig,
    batch: &[Vec<u32>],
    d_h: &[f64],
) -> Result<ParamMap> {
    let chunks: Vec<&[Vec<u32>]> = batch.chunks(GRAD_CHUNK).collect();
    let partials = exec::map_ref(&chunks, |_, chunk| -> Result<ParamMap> {
        let mut acc = ParamMap::new();
        for tokens in chunk.iter() {
            let g = instance_backward(p, cfg, tokens, d_h, batch.len())?;
            merge_grads(&mut acc, g);
        }
        Ok(acc)
    });
    let mut grads = ParamMap::new();
    for part in partials {
        merge_grads(&mut grads, part?);
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use crate::model::{init_model, ModelConfig, Region, RegionSet};
    use crate::rng::RngStream;

    fn setup() -> (ModelConfig, ModelParams) {
        let cfg = ModelConfig::micro();
        let p = init_model(&cfg, &RngStream::new(31, "summary"));
        (cfg, p)
    }

    #[test]
    fn output_width_matches_config() {
        let (cfg, p) = setup();
        let h = summary_representation(&p, &cfg, &[vec![5, 6, 7]]).unwrap();
        assert_eq!(h.len(), cfg.mlp_summary_dim);
    }

    #[test]
    fn duplicated_instance_does_not_move_the_mean() {
        let (cfg, p) = setup();
        let once = summary_representation(&p, &cfg, &[vec![5, 6, 7]]).unwrap();
        let twice = summary_representation(&p, &cfg, &[vec![5, 6, 7], vec![5, 6, 7]]).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn batch_order_does_not_matter() {
        let (cfg, p) = setup();
        let batch: Vec<Vec<u32>> = vec![vec![5, 6], vec![7, 8, 9], vec![10], vec![11, 12]];
        let mut reversed = batch.clone();
        reversed.reverse();
        let a = summary_representation(&p, &cfg, &batch).unwrap();
        let b = summary_representation(&p, &cfg, &reversed).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn empty_batch_is_degenerate() {
        let (cfg, p) = setup();
        assert!(matches!(
            summary_representation(&p, &cfg, &[]),
            Err(Error::DegenerateBatch(_))
        ));
    }

    #[test]
    fn summary_gradients_match_finite_differences() {
        let (cfg, p) = setup();
        let batch = vec![vec![5, 6, 7], vec![8, 9]];
        let d_h: Vec<f64> = (0..cfg.mlp_summary_dim).map(|i| 0.3 + 0.2 * i as f64).collect();

        let analytic = summary_backward(&p, &cfg, &batch, &d_h).unwrap();
        let regions = RegionSet::of(&[Region::Encoder, Region::Decoder, Region::ContrastHead]);
        let plain = p.extract(regions);
        // Spot-check a few tensors from each region to keep runtime small.
        let keys = ["enc.embed", "enc.l0.attn.wq", "dec.l0.cross.wv", "con.fc1.w", "con.fc2.b"];
        let subset: ParamMap = keys
            .iter()
            .map(|k| (k.to_string(), analytic[*k].clone()))
            .collect();
        let report = finite_diff_check(
            |vals| {
                let model = p.with_values(vals).unwrap();
                let h = summary_representation(&model, &cfg, &batch)?;
                Ok(h.iter().zip(&d_h).map(|(a, b)| a * b).sum())
            },
            &plain,
            &subset,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }
}
