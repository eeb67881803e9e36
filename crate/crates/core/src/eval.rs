//! Per-task metrics and client evaluation.

use std::collections::BTreeMap;

use crate::corpus::{Instance, Payload};
use crate::error::{Error, Result};
use crate::exec;
use crate::model::{
    classifier_with_cache, decode_states, encode, generator_with_cache, span_head_with_cache,
    vocab, ModelConfig, ModelParams,
};
use crate::tasks::TaskKind;
use crate::tensor::Tensor;

/// Metric values for one client on one split.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub client_id: usize,
    pub task: TaskKind,
    pub round: usize,
    pub split: String,
    pub metrics: BTreeMap<String, f64>,
}

/// The metric used for cross-method comparison of each task kind.
pub fn primary_metric(task: TaskKind) -> &'static str {
    match task {
        TaskKind::Classification => "accuracy",
        TaskKind::SpanExtraction => "f1",
        _ => "rougeL",
    }
}

pub fn accuracy(preds: &[usize], golds: &[usize]) -> Result<f64> {
    if preds.is_empty() || preds.len() != golds.len() {
        return Err(Error::DegenerateBatch(format!(
            "accuracy over {} predictions vs {} golds",
            preds.len(),
            golds.len()
        )));
    }
    let correct = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Exact match and token-overlap F1 of two inclusive index spans.
pub fn span_em_f1(pred: (usize, usize), gold: (usize, usize)) -> Result<(f64, f64)> {
    for (start, end) in [pred, gold] {
        if start > end {
            return Err(Error::InvertedSpan { start, end });
        }
    }
    let em = f64::from(pred == gold);
    let lo = pred.0.max(gold.0);
    let hi = pred.1.min(gold.1);
    if lo > hi {
        return Ok((em, 0.0));
    }
    let overlap = (hi - lo + 1) as f64;
    let p = overlap / (pred.1 - pred.0 + 1) as f64;
    let r = overlap / (gold.1 - gold.0 + 1) as f64;
    Ok((em, 2.0 * p * r / (p + r)))
}

/// Unigram-overlap F1 with clipped counts.
pub fn rouge1_f1(pred: &[u32], reference: &[u32]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::DegenerateBatch("empty reference".into()));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let mut ref_counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &t in reference {
        *ref_counts.entry(t).or_insert(0) += 1;
    }
    let mut pred_counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &t in pred {
        *pred_counts.entry(t).or_insert(0) += 1;
    }
    let overlap: usize = pred_counts
        .iter()
        .map(|(t, &c)| c.min(*ref_counts.get(t).unwrap_or(&0)))
        .sum();
    if overlap == 0 {
        return Ok(0.0);
    }
    let p = overlap as f64 / pred.len() as f64;
    let r = overlap as f64 / reference.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

fn lcs_len(a: &[u32], b: &[u32]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Longest-common-subsequence F1.
pub fn rouge_l_f1(pred: &[u32], reference: &[u32]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::DegenerateBatch("empty reference".into()));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let lcs = lcs_len(pred, reference);
    if lcs == 0 {
        return Ok(0.0);
    }
    let p = lcs as f64 / pred.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

fn mean_pool(enc_states: &Tensor, mask: &[bool], d: usize) -> Tensor {
    let mut pooled = Tensor::zeros(&[1, d]);
    let mut count = 0usize;
    for (r, &keep) in mask.iter().enumerate() {
        if keep {
            for (o, &v) in pooled.row_mut(0).iter_mut().zip(enc_states.row(r)) {
                *o += v;
            }
            count += 1;
        }
    }
    let inv = 1.0 / count as f64;
    for v in pooled.data_mut() {
        *v *= inv;
    }
    pooled
}

/// Argmax class of one document.
pub fn classify(p: &ModelParams, cfg: &ModelConfig, source: &[u32]) -> Result<usize> {
    let enc = encode(p, cfg, source, None)?;
    let pooled = mean_pool(&enc.states, &enc.mask, cfg.d_model);
    let (logits, _) = classifier_with_cache(p, &pooled)?;
    Ok(logits.argmax_row(0))
}

/// Argmax start/end prediction, the end constrained to not precede the start.
pub fn predict_span(p: &ModelParams, cfg: &ModelConfig, source: &[u32]) -> Result<(usize, usize)> {
    let enc = encode(p, cfg, source, None)?;
    let (pos_logits, _) = span_head_with_cache(p, &enc.states)?;
    let valid = source.len();
    let mut start = 0;
    for j in 1..valid {
        if pos_logits.at(j, 0) > pos_logits.at(start, 0) {
            start = j;
        }
    }
    let mut end = start;
    for j in start + 1..valid {
        if pos_logits.at(j, 1) > pos_logits.at(end, 1) {
            end = j;
        }
    }
    Ok((start, end))
}

/// Greedy decoding with the client's private generation head, up to the
/// model's maximum sequence length or EOS.
pub fn greedy_generate(p: &ModelParams, cfg: &ModelConfig, source: &[u32]) -> Result<Vec<u32>> {
    let enc = encode(p, cfg, source, None)?;
    let mut dec_input = vec![vocab::BOS];
    let mut out = Vec::new();
    while dec_input.len() < cfg.max_seq_len {
        let states = decode_states(p, cfg, &enc, &dec_input)?;
        let (logits, _) = generator_with_cache(p, &states.slice_rows_from_end())?;
        let next = logits.argmax_row(0) as u32;
        if next == vocab::EOS {
            break;
        }
        out.push(next);
        dec_input.push(next);
    }
    Ok(out)
}

impl Tensor {
    fn slice_rows_from_end(&self) -> Tensor {
        let c = self.cols();
        let r = self.rows();
        Tensor::new(vec![1, c], self.data()[(r - 1) * c..].to_vec()).expect("last row")
    }
}

/// Metrics appropriate to the client's task over one split.
pub fn evaluate_client(
    params: &ModelParams,
    cfg: &ModelConfig,
    task: TaskKind,
    instances: &[Instance],
    client_id: usize,
    round: usize,
    split: &str,
) -> Result<MetricReport> {
    let mut metrics = BTreeMap::new();
    match task {
        TaskKind::Classification => {
            let results = exec::map_ref(instances, |_, inst| -> Result<(usize, usize)> {
                let Payload::Class(gold) = inst.payload else {
                    return Err(Error::Usage("classification instance without class".into()));
                };
                Ok((classify(params, cfg, &inst.source)?, gold))
            });
            let mut preds = Vec::new();
            let mut golds = Vec::new();
            for r in results {
                let (p, g) = r?;
                preds.push(p);
                golds.push(g);
            }
            metrics.insert("accuracy".into(), accuracy(&preds, &golds)?);
        }
        TaskKind::SpanExtraction => {
            let results = exec::map_ref(instances, |_, inst| -> Result<(f64, f64)> {
                let Payload::Span { start, end } = inst.payload else {
                    return Err(Error::Usage("span instance without span".into()));
                };
                let pred = predict_span(params, cfg, &inst.source)?;
                span_em_f1(pred, (start, end))
            });
            let mut em_sum = 0.0;
            let mut f1_sum = 0.0;
            for r in results {
                let (em, f1) = r?;
                em_sum += em;
                f1_sum += f1;
            }
            let n = instances.len() as f64;
            metrics.insert("em".into(), em_sum / n);
            metrics.insert("f1".into(), f1_sum / n);
        }
        TaskKind::Generation => {
            let results = exec::map_ref(instances, |_, inst| -> Result<(f64, f64)> {
                let Payload::Target(gold) = &inst.payload else {
                    return Err(Error::Usage("generation instance without target".into()));
                };
                let pred = greedy_generate(params, cfg, &inst.source)?;
                Ok((rouge1_f1(&pred, gold)?, rouge_l_f1(&pred, gold)?))
            });
            let mut r1_sum = 0.0;
            let mut rl_sum = 0.0;
            for r in results {
                let (r1, rl) = r?;
                r1_sum += r1;
                rl_sum += rl;
            }
            let n = instances.len() as f64;
            metrics.insert("rouge1".into(), r1_sum / n);
            metrics.insert("rougeL".into(), rl_sum / n);
        }
        other => {
            return Err(Error::Usage(format!(
                "'{}' is not a client objective",
                other.name()
            )))
        }
    }
    Ok(MetricReport {
        client_id,
        task,
        round,
        split: split.to_string(),
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, init_task_head, TaskHead};
    use crate::optim::{adamw_step, AdamHyper, AdamState};
    use crate::rng::RngStream;
    use crate::tasks::{objective_loss, TaskKind};

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 2], &[3, 4]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn span_em_f1_examples() {
        assert_eq!(span_em_f1((3, 5), (3, 5)).unwrap(), (1.0, 1.0));
        let (em, f1) = span_em_f1((3, 5), (4, 6)).unwrap();
        assert_eq!(em, 0.0);
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(span_em_f1((0, 1), (4, 6)).unwrap(), (0.0, 0.0));
        assert!(matches!(span_em_f1((5, 3), (1, 2)), Err(Error::InvertedSpan { .. })));
    }

    #[test]
    fn rouge_examples() {
        let (a, b, c, d) = (10u32, 11u32, 12u32, 13u32);
        assert_eq!(rouge1_f1(&[a, b, c], &[a, b, c]).unwrap(), 1.0);
        assert!((rouge1_f1(&[a, b, c], &[a, b, d]).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(rouge_l_f1(&[a, b, c], &[a, b, c]).unwrap(), 1.0);
        assert!((rouge_l_f1(&[a, b, c], &[a, c, b]).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(rouge1_f1(&[], &[a]).unwrap(), 0.0);
        assert!(rouge1_f1(&[a], &[]).is_err());
    }

    #[test]
    fn rouge_l_never_exceeds_rouge1() {
        let mut rng = RngStream::new(3, "rouge");
        for _ in 0..200 {
            let len_a = 1 + rng.below(10);
            let len_b = 1 + rng.below(10);
            let a: Vec<u32> = (0..len_a).map(|_| rng.below(6) as u32).collect();
            let b: Vec<u32> = (0..len_b).map(|_| rng.below(6) as u32).collect();
            let r1 = rouge1_f1(&a, &b).unwrap();
            let rl = rouge_l_f1(&a, &b).unwrap();
            assert!(rl <= r1 + 1e-12, "{a:?} vs {b:?}: rl {rl} > r1 {r1}");
            assert!((0.0..=1.0).contains(&r1));
            assert!((0.0..=1.0).contains(&rl));
        }
    }

    #[test]
    fn rouge_symmetric_for_equal_lengths() {
        let a = [1u32, 2, 3, 4];
        let b = [2u32, 1, 3, 5];
        assert_eq!(rouge1_f1(&a, &b).unwrap(), rouge1_f1(&b, &a).unwrap());
        assert_eq!(rouge_l_f1(&a, &b).unwrap(), rouge_l_f1(&b, &a).unwrap());
    }

    fn micro_classifier(seed: u64) -> (ModelConfig, ModelParams) {
        let cfg = ModelConfig::micro();
        let mut p = init_model(&cfg, &RngStream::new(seed, "eval-model"));
        init_task_head(
            &mut p,
            TaskHead::Classifier { classes: 4 },
            &cfg,
            &RngStream::new(seed, "eval-head"),
        );
        (cfg, p)
    }

    fn random_cls_instances(n: usize, seed: u64) -> Vec<Instance> {
        let mut rng = RngStream::new(seed, "eval-data");
        (0..n)
            .map(|i| Instance {
                source: (0..6).map(|_| 5 + rng.below(10) as u32).collect(),
                payload: Payload::Class(i % 4),
            })
            .collect()
    }

    #[test]
    fn untrained_classifier_sits_at_chance() {
        let (cfg, p) = micro_classifier(99);
        let instances = random_cls_instances(128, 7);
        let report =
            evaluate_client(&p, &cfg, TaskKind::Classification, &instances, 0, 3, "val").unwrap();
        let acc = report.metrics["accuracy"];
        assert!((acc - 0.25).abs() <= 0.1, "chance-level accuracy {acc}");
        assert_eq!(report.round, 3);
        assert_eq!(report.split, "val");
    }

    #[test]
    fn overfit_micro_run_reaches_perfect_accuracy() {
        let (cfg, p) = micro_classifier(5);
        let mut p = p;
        let instances = random_cls_instances(8, 11);
        let refs: Vec<&Instance> = instances.iter().collect();
        let mut state = AdamState::new();
        let hyper = AdamHyper {
            weight_decay: 0.0,
            ..AdamHyper::default()
        };
        let mut rng = RngStream::new(0, "overfit");
        let mut params = p.extract(TaskKind::Classification.trainable_regions());
        for _ in 0..500 {
            let out =
                objective_loss(TaskKind::Classification, &p, &cfg, &refs, 0.15, &mut rng).unwrap();
            adamw_step(&mut params, &out.grads, &mut state, 3e-3, &hyper).unwrap();
            p.assign(&params).unwrap();
        }
        let report =
            evaluate_client(&p, &cfg, TaskKind::Classification, &instances, 0, 0, "train").unwrap();
        assert_eq!(report.metrics["accuracy"], 1.0);
    }
}
