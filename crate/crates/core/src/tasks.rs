//! Local training objectives: the server-assigned self-supervised tasks
//! (masked language modeling, denoising reconstruction), the clients' own
//! objectives, and the contrastive loss over summarized representations.

use serde::{Deserialize, Serialize};

use crate::corpus::{Instance, Payload};
use crate::error::{Error, Result};
use crate::exec;
use crate::model::{
    classifier_with_cache, decode_backward, decode_states_with_cache, encode_backward,
    encode_with_cache, generator_with_cache, linear_head_backward, mlm_head_backward,
    mlm_head_with_cache, reconstruction_logits_cached, span_head_with_cache, vocab, ModelConfig,
    ModelParams, Region, RegionSet,
};
use crate::optim::{merge_grads, scale_grads, ParamMap};
use crate::rng::RngStream;
use crate::tensor::{cosine_similarity, cross_entropy_parts, Tensor, IGNORE_INDEX};

const MASKED_LOGIT: f64 = -1e30;
const GRAD_CHUNK: usize = 4;

/// Every task the simulator trains, each with its trainable-region set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    Mlm,
    Dr,
    Classification,
    SpanExtraction,
    Generation,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Mlm => "mlm",
            TaskKind::Dr => "dr",
            TaskKind::Classification => "classification",
            TaskKind::SpanExtraction => "span_extraction",
            TaskKind::Generation => "generation",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [
            TaskKind::Mlm,
            TaskKind::Dr,
            TaskKind::Classification,
            TaskKind::SpanExtraction,
            TaskKind::Generation,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| Error::Parse(format!("unknown task kind '{s}'")))
    }

    /// Regions whose parameters this objective trains (and, for assigned
    /// tasks, whose updates the server aggregates).
    pub fn trainable_regions(self) -> RegionSet {
        match self {
            TaskKind::Mlm => RegionSet::of(&[Region::Encoder, Region::MlmHead]),
            TaskKind::Dr => RegionSet::of(&[Region::Encoder, Region::Decoder]),
            TaskKind::Classification | TaskKind::SpanExtraction => {
                RegionSet::of(&[Region::Encoder, Region::TaskHead])
            }
            TaskKind::Generation => {
                RegionSet::of(&[Region::Encoder, Region::Decoder, Region::TaskHead])
            }
        }
    }

    /// True for the kinds a client owns as its private objective.
    pub fn is_client_objective(self) -> bool {
        matches!(
            self,
            TaskKind::Classification | TaskKind::SpanExtraction | TaskKind::Generation
        )
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

// ---------------------------------------------------------------------------
// Corruptions
// ---------------------------------------------------------------------------

/// Masks `ceil(mask_ratio * len)` non-special positions with MASK; targets
/// hold the original ids there and `IGNORE_INDEX` elsewhere.
pub fn corrupt_mlm(
    tokens: &[u32],
    mask_ratio: f64,
    rng: &mut RngStream,
) -> Result<(Vec<u32>, Vec<i64>)> {
    if tokens.is_empty() {
        return Err(Error::DegenerateBatch("empty sequence".into()));
    }
    let mut maskable: Vec<usize> = (0..tokens.len())
        .filter(|&i| !vocab::is_special(tokens[i]))
        .collect();
    if maskable.is_empty() {
        return Err(Error::DegenerateBatch("all-special sequence".into()));
    }
    let k = ((mask_ratio * tokens.len() as f64).ceil() as usize).min(maskable.len());
    if k == 0 {
        return Err(Error::DegenerateBatch("no supervised positions".into()));
    }
    rng.shuffle(&mut maskable);
    let mut corrupted = tokens.to_vec();
    let mut targets = vec![IGNORE_INDEX; tokens.len()];
    for &pos in &maskable[..k] {
        corrupted[pos] = vocab::MASK;
        targets[pos] = tokens[pos] as i64;
    }
    Ok((corrupted, targets))
}

/// Span infill plus random deletion: a contiguous span (Poisson mean-3
/// length, clipped; may be empty) collapses to a single MASK, then each
/// surviving original token is independently dropped with probability 0.1.
/// The reconstruction target is the original sequence framed by BOS/EOS.
pub fn corrupt_dr(tokens: &[u32], rng: &mut RngStream) -> (Vec<u32>, Vec<u32>) {
    let len = tokens.len();
    let span_len = rng.poisson(3.0).min(len);
    let start = rng.below(len - span_len + 1);
    let mut noised = Vec::with_capacity(len - span_len + 1);
    for (i, &t) in tokens.iter().enumerate() {
        if i == start {
            noised.push(vocab::MASK);
        }
        if i >= start && i < start + span_len {
            continue;
        }
        if rng.next_f64() < 0.1 {
            continue;
        }
        noised.push(t);
    }
    if start == len {
        noised.push(vocab::MASK);
    }
    let mut target = Vec::with_capacity(len + 2);
    target.push(vocab::BOS);
    target.extend_from_slice(tokens);
    target.push(vocab::EOS);
    (noised, target)
}

// ---------------------------------------------------------------------------
// Objectives
// ---------------------------------------------------------------------------

/// Loss, restricted gradients, and batch bookkeeping for one step.
#[derive(Debug)]
pub struct ObjectiveOutput {
    pub loss: f64,
    pub grads: ParamMap,
    /// Supervised positions contributing to the mean.
    pub token_count: usize,
    pub example_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Seq2SeqHead {
    /// The backbone's reconstruction head (`dec.out`), used by DR.
    Reconstruction,
    /// The client's private generation head (`task.gen`).
    Generator,
}

#[derive(Debug, Clone)]
enum PreparedItem {
    MaskedEncoder {
        input: Vec<u32>,
        targets: Vec<i64>,
    },
    Seq2Seq {
        src: Vec<u32>,
        dec_input: Vec<u32>,
        labels: Vec<i64>,
        head: Seq2SeqHead,
    },
    Class {
        src: Vec<u32>,
        label: i64,
    },
    Span {
        src: Vec<u32>,
        start: i64,
        end: i64,
    },
}

/// A batch with all random corruption decisions already taken, so the loss
/// is a deterministic function of the parameters.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    kind: TaskKind,
    items: Vec<PreparedItem>,
}

fn frame_target(target: &[u32]) -> (Vec<u32>, Vec<i64>) {
    let mut framed = Vec::with_capacity(target.len() + 2);
    framed.push(vocab::BOS);
    framed.extend_from_slice(target);
    framed.push(vocab::EOS);
    let dec_input = framed[..framed.len() - 1].to_vec();
    let labels = framed[1..].iter().map(|&t| t as i64).collect();
    (dec_input, labels)
}

/// Resolves corruption (MLM/DR) and payload extraction for one batch.
pub fn prepare_batch(
    kind: TaskKind,
    batch: &[&Instance],
    mask_ratio: f64,
    rng: &mut RngStream,
) -> Result<PreparedBatch> {
    if batch.is_empty() {
        return Err(Error::DegenerateBatch("empty batch".into()));
    }
    let mut items = Vec::with_capacity(batch.len());
    for inst in batch {
        let item = match kind {
            TaskKind::Mlm => {
                let (input, targets) = corrupt_mlm(&inst.source, mask_ratio, rng)?;
                PreparedItem::MaskedEncoder { input, targets }
            }
            TaskKind::Dr => {
                let (noised, framed) = corrupt_dr(&inst.source, rng);
                let dec_input = framed[..framed.len() - 1].to_vec();
                let labels = framed[1..].iter().map(|&t| t as i64).collect();
                PreparedItem::Seq2Seq {
                    src: noised,
                    dec_input,
                    labels,
                    head: Seq2SeqHead::Reconstruction,
                }
            }
            TaskKind::Classification => match &inst.payload {
                Payload::Class(c) => PreparedItem::Class {
                    src: inst.source.clone(),
                    label: *c as i64,
                },
                _ => return Err(Error::Usage("classification batch with non-class payload".into())),
            },
            TaskKind::SpanExtraction => match &inst.payload {
                Payload::Span { start, end } => PreparedItem::Span {
                    src: inst.source.clone(),
                    start: *start as i64,
                    end: *end as i64,
                },
                _ => return Err(Error::Usage("span batch with non-span payload".into())),
            },
            TaskKind::Generation => match &inst.payload {
                Payload::Target(t) => {
                    let (dec_input, labels) = frame_target(t);
                    PreparedItem::Seq2Seq {
                        src: inst.source.clone(),
                        dec_input,
                        labels,
                        head: Seq2SeqHead::Generator,
                    }
                }
                _ => return Err(Error::Usage("generation batch with non-target payload".into())),
            },
        };
        items.push(item);
    }
    Ok(PreparedBatch { kind, items })
}

fn required_head_key(kind: TaskKind) -> Option<&'static str> {
    match kind {
        TaskKind::Mlm => Some("mlm.out.w"),
        TaskKind::Dr => Some("dec.out.w"),
        TaskKind::Classification => Some("task.cls.w"),
        TaskKind::SpanExtraction => Some("task.span.w"),
        TaskKind::Generation => Some("task.gen.w"),
    }
}

/// Sum-form loss and unscaled gradients of one prepared item.
fn item_loss(
    p: &ModelParams,
    cfg: &ModelConfig,
    item: &PreparedItem,
    want_grads: bool,
) -> Result<(f64, usize, ParamMap)> {
    let mut grads = ParamMap::new();
    match item {
        PreparedItem::MaskedEncoder { input, targets } => {
            let (enc, cache) = encode_with_cache(p, cfg, input, None)?;
            let (logits, head_cache) = mlm_head_with_cache(p, &enc.states)?;
            let mut padded = targets.clone();
            padded.resize(cfg.max_seq_len, IGNORE_INDEX);
            let (nll, dlogits, count) = cross_entropy_parts(&logits, &padded)?;
            if want_grads {
                let d_states = mlm_head_backward(p, &head_cache, &dlogits, &mut grads)?;
                encode_backward(p, cfg, &cache, &d_states, &mut grads)?;
            }
            Ok((nll, count, grads))
        }
        PreparedItem::Seq2Seq {
            src,
            dec_input,
            labels,
            head,
        } => {
            let (enc, enc_cache) = encode_with_cache(p, cfg, src, None)?;
            let (states, dec_cache) = decode_states_with_cache(p, cfg, &enc, dec_input)?;
            let (logits, lin) = match head {
                Seq2SeqHead::Reconstruction => reconstruction_logits_cached(p, &states)?,
                Seq2SeqHead::Generator => generator_with_cache(p, &states)?,
            };
            let (nll, dlogits, count) = cross_entropy_parts(&logits, labels)?;
            if want_grads {
                let (wkey, bkey) = match head {
                    Seq2SeqHead::Reconstruction => ("dec.out.w", "dec.out.b"),
                    Seq2SeqHead::Generator => ("task.gen.w", "task.gen.b"),
                };
                let d_states = linear_head_backward(p, wkey, bkey, &lin, &dlogits, &mut grads)?;
                let d_enc = decode_backward(p, cfg, &dec_cache, &d_states, &mut grads)?;
                encode_backward(p, cfg, &enc_cache, &d_enc, &mut grads)?;
            }
            Ok((nll, count, grads))
        }
        PreparedItem::Class { src, label } => {
            let (enc, cache) = encode_with_cache(p, cfg, src, None)?;
            let real: Vec<usize> = (0..cfg.max_seq_len).filter(|&i| enc.mask[i]).collect();
            let mut pooled = Tensor::zeros(&[1, cfg.d_model]);
            for &r in &real {
                for (o, &v) in pooled.row_mut(0).iter_mut().zip(enc.states.row(r)) {
                    *o += v;
                }
            }
            let inv = 1.0 / real.len() as f64;
            for v in pooled.data_mut() {
                *v *= inv;
            }
            let (logits, lin) = classifier_with_cache(p, &pooled)?;
            let (nll, dlogits, count) = cross_entropy_parts(&logits, &[*label])?;
            if want_grads {
                let d_pooled =
                    linear_head_backward(p, "task.cls.w", "task.cls.b", &lin, &dlogits, &mut grads)?;
                let mut d_states = Tensor::zeros(&[cfg.max_seq_len, cfg.d_model]);
                for &r in &real {
                    for (o, &v) in d_states.row_mut(r).iter_mut().zip(d_pooled.row(0)) {
                        *o += v * inv;
                    }
                }
                encode_backward(p, cfg, &cache, &d_states, &mut grads)?;
            }
            Ok((nll, count, grads))
        }
        PreparedItem::Span { src, start, end } => {
            if start > end {
                return Err(Error::InvertedSpan {
                    start: *start as usize,
                    end: *end as usize,
                });
            }
            let (enc, cache) = encode_with_cache(p, cfg, src, None)?;
            let (pos_logits, lin) = span_head_with_cache(p, &enc.states)?;
            let l = cfg.max_seq_len;
            let build_row = |col: usize| {
                let mut row = Tensor::zeros(&[1, l]);
                for j in 0..l {
                    let masked = if enc.mask[j] { 0.0 } else { MASKED_LOGIT };
                    row.set(0, j, pos_logits.at(j, col) + masked);
                }
                row
            };
            let start_row = build_row(0);
            let end_row = build_row(1);
            let (nll_s, d_start, _) = cross_entropy_parts(&start_row, &[*start])?;
            let (nll_e, d_end, _) = cross_entropy_parts(&end_row, &[*end])?;
            if want_grads {
                let mut d_pos = Tensor::zeros(&[l, 2]);
                for j in 0..l {
                    d_pos.set(j, 0, d_start.at(0, j));
                    d_pos.set(j, 1, d_end.at(0, j));
                }
                let d_states =
                    linear_head_backward(p, "task.span.w", "task.span.b", &lin, &d_pos, &mut grads)?;
                encode_backward(p, cfg, &cache, &d_states, &mut grads)?;
            }
            // One supervised example per instance; the two cross entropies sum.
            Ok((nll_s + nll_e, 1, grads))
        }
    }
}

/// Mean loss over the prepared batch with gradients restricted to the
/// kind's trainable regions (the restriction holds by construction and is
/// asserted in debug builds).
pub fn objective_on_prepared(
    params: &ModelParams,
    cfg: &ModelConfig,
    prepared: &PreparedBatch,
    want_grads: bool,
) -> Result<ObjectiveOutput> {
    let kind = prepared.kind;
    if let Some(key) = required_head_key(kind) {
        if params.get(key).is_none() {
            return Err(Error::Usage(format!(
                "objective '{}' requires parameter '{key}' which is absent",
                kind.name()
            )));
        }
    }
    let chunks: Vec<&[PreparedItem]> = prepared.items.chunks(GRAD_CHUNK).collect();
    let partials = exec::map_ref(&chunks, |_, chunk| -> Result<(f64, usize, ParamMap)> {
        let mut nll = 0.0;
        let mut count = 0usize;
        let mut grads = ParamMap::new();
        for item in chunk.iter() {
            let (n, c, g) = item_loss(params, cfg, item, want_grads)?;
            nll += n;
            count += c;
            merge_grads(&mut grads, g);
        }
        Ok((nll, count, grads))
    });
    let mut nll = 0.0;
    let mut count = 0usize;
    let mut grads = ParamMap::new();
    for part in partials {
        let (n, c, g) = part?;
        nll += n;
        count += c;
        merge_grads(&mut grads, g);
    }
    if count == 0 {
        return Err(Error::DegenerateBatch("no supervised positions in batch".into()));
    }
    let loss = nll / count as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("{} loss", kind.name())));
    }
    scale_grads(&mut grads, 1.0 / count as f64);
    #[cfg(debug_assertions)]
    {
        let allowed = kind.trainable_regions();
        for key in grads.keys() {
            let region = params
                .region_of(key)
                .unwrap_or_else(|| panic!("gradient for unknown key '{key}'"));
            debug_assert!(
                allowed.contains(region),
                "objective '{}' produced a gradient in region '{}' (key '{key}')",
                kind.name(),
                region
            );
        }
    }
    Ok(ObjectiveOutput {
        loss,
        grads,
        token_count: count,
        example_count: prepared.items.len(),
    })
}

/// Convenience wrapper: corrupt (where applicable) and compute the batch
/// objective in one call.
pub fn objective_loss(
    kind: TaskKind,
    params: &ModelParams,
    cfg: &ModelConfig,
    batch: &[&Instance],
    mask_ratio: f64,
    rng: &mut RngStream,
) -> Result<ObjectiveOutput> {
    let prepared = prepare_batch(kind, batch, mask_ratio, rng)?;
    objective_on_prepared(params, cfg, &prepared, true)
}

// ---------------------------------------------------------------------------
// Contrastive loss
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ContrastOutput {
    pub loss: f64,
    /// Gradient with respect to the client's own representation; the other
    /// clients' vectors are constants within a round.
    pub grad_h: Vec<f64>,
    /// Set when the negative set is empty and the loss degenerates to 0.
    pub empty_negatives: bool,
}

fn d_sim(h: &[f64], g: &[f64]) -> Result<(f64, Vec<f64>)> {
    let sim = cosine_similarity(h, g)?;
    let nh = h.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ng = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    let grad = h
        .iter()
        .zip(g)
        .map(|(&hv, &gv)| gv / (nh * ng) - sim * hv / (nh * nh))
        .collect();
    Ok((sim, grad))
}

/// `-log(s+ / (s+ + s-))` where `s+` scores the mean of the positives'
/// representations and `s-` sums over the negatives.
pub fn contrastive_loss(
    own: &[f64],
    all_h: &[Vec<f64>],
    positives: &[usize],
    negatives: &[usize],
    tau: f64,
) -> Result<ContrastOutput> {
    if positives.is_empty() {
        return Err(Error::Usage("contrastive loss requires at least one positive".into()));
    }
    if tau <= 0.0 {
        return Err(Error::Usage(format!("temperature must be positive, got {tau}")));
    }
    let width = own.len();
    for &i in positives.iter().chain(negatives) {
        let h = all_h
            .get(i)
            .ok_or_else(|| Error::Usage(format!("representation for client {i} missing")))?;
        if h.len() != width {
            return Err(Error::dimension(
                "contrastive_loss",
                format!("client {i} width {} vs {width}", h.len()),
            ));
        }
    }
    let mut pos_mean = vec![0.0; width];
    for &i in positives {
        for (m, &v) in pos_mean.iter_mut().zip(&all_h[i]) {
            *m += v;
        }
    }
    for m in &mut pos_mean {
        *m /= positives.len() as f64;
    }

    if negatives.is_empty() {
        return Ok(ContrastOutput {
            loss: 0.0,
            grad_h: vec![0.0; width],
            empty_negatives: true,
        });
    }

    let (sim_pos, d_sim_pos) = d_sim(own, &pos_mean)?;
    let s_pos = (sim_pos / tau).exp();
    let mut s_neg = 0.0;
    let mut neg_terms = Vec::with_capacity(negatives.len());
    for &j in negatives {
        let (sim, dgrad) = d_sim(own, &all_h[j])?;
        let s = (sim / tau).exp();
        s_neg += s;
        neg_terms.push((s, dgrad));
    }
    let denom = s_pos + s_neg;
    let loss = -(s_pos / denom).ln();

    // dL/d sim+ = -s_neg / (denom * tau); dL/d sim_j = s_j / (denom * tau).
    let coef_pos = -s_neg / (denom * tau);
    let mut grad_h = vec![0.0; width];
    for (g, &d) in grad_h.iter_mut().zip(&d_sim_pos) {
        *g += coef_pos * d;
    }
    for (s, dgrad) in &neg_terms {
        let coef = s / (denom * tau);
        for (g, &d) in grad_h.iter_mut().zip(dgrad) {
            *g += coef * d;
        }
    }
    Ok(ContrastOutput {
        loss,
        grad_h,
        empty_negatives: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use crate::model::{init_model, init_task_head, ModelConfig, TaskHead};

    #[test]
    fn mlm_masks_exactly_ceil_ratio_times_len() {
        let tokens: Vec<u32> = (5..25).collect(); // len 20, no specials
        let mut rng = RngStream::new(1, "mlm");
        let (corrupted, targets) = corrupt_mlm(&tokens, 0.15, &mut rng).unwrap();
        let masked: Vec<usize> = (0..20).filter(|&i| corrupted[i] == vocab::MASK).collect();
        assert_eq!(masked.len(), 3);
        for i in 0..20 {
            if masked.contains(&i) {
                assert_eq!(targets[i], tokens[i] as i64);
            } else {
                assert_eq!(targets[i], IGNORE_INDEX);
                assert_eq!(corrupted[i], tokens[i]);
            }
        }
    }

    #[test]
    fn mlm_never_masks_specials_and_rejects_degenerate_inputs() {
        let tokens = vec![vocab::SEP, 7, 8, vocab::SEP];
        let mut rng = RngStream::new(2, "mlm");
        let (corrupted, _) = corrupt_mlm(&tokens, 1.0, &mut rng).unwrap();
        assert_eq!(corrupted[0], vocab::SEP);
        assert_eq!(corrupted[3], vocab::SEP);

        let all_special = vec![vocab::SEP, vocab::BOS];
        assert!(matches!(
            corrupt_mlm(&all_special, 0.5, &mut rng),
            Err(Error::DegenerateBatch(_))
        ));
        assert!(matches!(
            corrupt_mlm(&[5, 6, 7], 0.0, &mut rng),
            Err(Error::DegenerateBatch(_))
        ));
    }

    #[test]
    fn dr_noise_shape_and_target_framing() {
        let tokens: Vec<u32> = (5..21).collect();
        let mut rng = RngStream::new(3, "dr");
        for _ in 0..50 {
            let (noised, target) = corrupt_dr(&tokens, &mut rng);
            assert!(noised.len() <= tokens.len() + 1);
            assert!(!noised.is_empty());
            assert_eq!(target[0], vocab::BOS);
            assert_eq!(*target.last().unwrap(), vocab::EOS);
            assert_eq!(&target[1..target.len() - 1], &tokens[..]);
        }
    }

    #[test]
    fn dr_corruption_is_deterministic_per_stream() {
        let tokens: Vec<u32> = (5..15).collect();
        let a = corrupt_dr(&tokens, &mut RngStream::new(4, "dr"));
        let b = corrupt_dr(&tokens, &mut RngStream::new(4, "dr"));
        assert_eq!(a, b);
    }

    fn micro_client(kind: TaskKind) -> (ModelConfig, ModelParams) {
        let cfg = ModelConfig::micro();
        let mut p = init_model(&cfg, &RngStream::new(40, "obj"));
        let head = match kind {
            TaskKind::Classification => Some(TaskHead::Classifier { classes: 4 }),
            TaskKind::SpanExtraction => Some(TaskHead::SpanExtractor),
            TaskKind::Generation => Some(TaskHead::Generator),
            _ => None,
        };
        if let Some(h) = head {
            init_task_head(&mut p, h, &cfg, &RngStream::new(41, "head"));
        }
        (cfg, p)
    }

    fn instance_for(kind: TaskKind) -> Instance {
        match kind {
            TaskKind::Classification => Instance {
                source: vec![5, 6, 7, 8, 9],
                payload: Payload::Class(2),
            },
            TaskKind::SpanExtraction => Instance {
                source: vec![5, vocab::SEP, 7, 8, 9],
                payload: Payload::Span { start: 2, end: 3 },
            },
            TaskKind::Generation => Instance {
                source: vec![5, 6, vocab::SEP],
                payload: Payload::Target(vec![8, 9, 10]),
            },
            _ => Instance {
                source: vec![5, 6, 7, 8, 9, 10],
                payload: Payload::Class(0),
            },
        }
    }

    #[test]
    fn every_objective_matches_finite_differences_on_the_micro_model() {
        for kind in [
            TaskKind::Mlm,
            TaskKind::Dr,
            TaskKind::Classification,
            TaskKind::SpanExtraction,
            TaskKind::Generation,
        ] {
            let (cfg, p) = micro_client(kind);
            let inst_a = instance_for(kind);
            let inst_b = instance_for(kind);
            let batch = [&inst_a, &inst_b];
            let mut rng = RngStream::new(50, "prep");
            let prepared = prepare_batch(kind, &batch, 0.4, &mut rng).unwrap();
            let out = objective_on_prepared(&p, &cfg, &prepared, true).unwrap();
            let plain = p.extract(kind.trainable_regions());
            let report = finite_diff_check(
                |vals| {
                    let model = p.with_values(vals).unwrap();
                    Ok(objective_on_prepared(&model, &cfg, &prepared, false)?.loss)
                },
                &plain,
                &out.grads,
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(report.passed(), "{kind}: {report}");
        }
    }

    #[test]
    fn mlm_gradients_contain_no_decoder_keys() {
        let (cfg, p) = micro_client(TaskKind::Mlm);
        let inst = instance_for(TaskKind::Mlm);
        let mut rng = RngStream::new(51, "mlm");
        let out = objective_loss(TaskKind::Mlm, &p, &cfg, &[&inst], 0.3, &mut rng).unwrap();
        assert!(out
            .grads
            .keys()
            .all(|k| p.region_of(k) != Some(Region::Decoder)));
        assert!(out.grads.keys().any(|k| k.starts_with("mlm.")));
    }

    #[test]
    fn classification_loss_near_ln4_at_random_init() {
        // Measured over many batches of fresh models: untrained 4-way logits
        // sit near the uniform distribution.
        let cfg = ModelConfig::micro();
        let mut total = 0.0;
        let mut batches = 0;
        for seed in 0..100u64 {
            let mut p = init_model(&cfg, &RngStream::new(seed, "cls-init"));
            init_task_head(
                &mut p,
                TaskHead::Classifier { classes: 4 },
                &cfg,
                &RngStream::new(seed, "cls-head"),
            );
            let mut rng = RngStream::new(seed, "cls-data");
            let insts: Vec<Instance> = (0..4)
                .map(|c| Instance {
                    source: (0..6).map(|_| 5 + rng.below(10) as u32).collect(),
                    payload: Payload::Class(c),
                })
                .collect();
            let refs: Vec<&Instance> = insts.iter().collect();
            let out =
                objective_loss(TaskKind::Classification, &p, &cfg, &refs, 0.15, &mut rng).unwrap();
            total += out.loss;
            batches += 1;
        }
        let mean = total / batches as f64;
        assert!((mean - 4.0_f64.ln()).abs() < 0.2, "mean init loss {mean}");
    }

    #[test]
    fn span_loss_vanishes_with_peaked_correct_logits() {
        // With a +-20 logit margin the softmax mass at the correct position
        // is within 1e-6 of 1.
        let l = 8;
        let mut start_row = Tensor::filled(&[1, l], -20.0);
        start_row.set(0, 3, 20.0);
        let (nll, _, _) = cross_entropy_parts(&start_row, &[3]).unwrap();
        assert!(nll < 1e-6, "loss {nll}");
    }

    #[test]
    fn contrastive_closed_forms() {
        // Own representation identical to the single positive (sim 1), one
        // orthogonal negative (sim 0).
        let own = vec![1.0, 0.0];
        let all_h = vec![own.clone(), vec![1.0, 0.0], vec![0.0, 1.0]];
        let out = contrastive_loss(&own, &all_h, &[1], &[2], 1.0).unwrap();
        assert!((out.loss - 0.313262).abs() < 1e-6);
        let out_half = contrastive_loss(&own, &all_h, &[1], &[2], 0.5).unwrap();
        assert!((out_half.loss - 0.126928).abs() < 1e-6);

        // All similarities equal with one negative -> ln 2.
        let all_eq = vec![own.clone(), own.clone(), own.clone()];
        let out_eq = contrastive_loss(&own, &all_eq, &[1], &[2], 1.0).unwrap();
        assert!((out_eq.loss - 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn contrastive_empty_negatives_flagged_zero() {
        let own = vec![0.5, 0.5];
        let all_h = vec![own.clone(), vec![1.0, 2.0]];
        let out = contrastive_loss(&own, &all_h, &[1], &[], 1.0).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.empty_negatives);
        assert!(out.grad_h.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn contrastive_zero_vector_errors() {
        let own = vec![0.0, 0.0];
        let all_h = vec![own.clone(), vec![1.0, 2.0], vec![2.0, 1.0]];
        assert!(matches!(
            contrastive_loss(&own, &all_h, &[1], &[2], 1.0),
            Err(Error::ZeroVector(_))
        ));
    }

    #[test]
    fn contrastive_gradient_matches_finite_differences() {
        let own = vec![0.4, -0.2, 0.9];
        let all_h = vec![
            own.clone(),
            vec![0.1, 0.3, 0.5],
            vec![-0.4, 0.2, 0.6],
            vec![0.9, -0.1, 0.2],
        ];
        let out = contrastive_loss(&own, &all_h, &[1, 2], &[3], 0.7).unwrap();
        let h = 1e-6;
        for i in 0..own.len() {
            let mut plus = own.clone();
            plus[i] += h;
            let mut minus = own.clone();
            minus[i] -= h;
            let lp = contrastive_loss(&plus, &all_h, &[1, 2], &[3], 0.7).unwrap().loss;
            let lm = contrastive_loss(&minus, &all_h, &[1, 2], &[3], 0.7).unwrap().loss;
            let numeric = (lp - lm) / (2.0 * h);
            let rel = (out.grad_h[i] - numeric).abs() / numeric.abs().max(out.grad_h[i].abs());
            assert!(rel <= 1e-4, "component {i}: analytic {} numeric {numeric}", out.grad_h[i]);
        }
    }

    #[test]
    fn contrastive_loss_decreases_as_positive_similarity_rises() {
        // Sweep the own-vs-positive angle with a fixed negative.
        let mut last = f64::INFINITY;
        for k in 0..10 {
            let theta = 1.4 - 0.15 * k as f64; // decreasing angle => rising sim
            let own = vec![theta.cos(), theta.sin()];
            let all_h = vec![own.clone(), vec![1.0, 0.0], vec![-1.0, 0.3]];
            let loss = contrastive_loss(&own, &all_h, &[1], &[2], 1.0).unwrap().loss;
            assert!(loss < last, "not strictly decreasing at step {k}");
            last = loss;
        }
    }
}
