//! Deterministic synthetic multi-domain corpora.
//!
//! Documents are Zipf-distributed over a per-domain preferred vocabulary
//! subset; labels are derived from the tokens by fixed rules so that every
//! instance can be re-checked against its rule. Generation is pure in
//! `(plan, seed)`.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::model::vocab;
use crate::rng::RngStream;
use crate::tasks::TaskKind;

/// Token-frequency profile of one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub id: usize,
    pub zipf_exponent: f64,
    /// Content token ids, most frequent first.
    pub preferred: Vec<u32>,
    /// Inclusive document length range.
    pub len_range: (usize, usize),
}

/// Task payload of one instance.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Class(usize),
    /// Inclusive source-token indices.
    Span { start: usize, end: usize },
    Target(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub source: Vec<u32>,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    pub task: TaskKind,
    pub domain: usize,
    pub train: Vec<Instance>,
    pub val: Vec<Instance>,
    pub test: Vec<Instance>,
}

impl ClientDataset {
    /// |D_n|: the aggregation weight of this client.
    pub fn sample_count(&self) -> usize {
        self.train.len()
    }

    pub fn split(&self, name: &str) -> Result<&[Instance]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Usage(format!("unknown split '{other}'"))),
        }
    }
}

/// Everything needed to build a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusPlan {
    pub domains: Vec<DomainSpec>,
    /// One `(task kind, domain id)` per client.
    pub clients: Vec<(TaskKind, usize)>,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub num_classes: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
}

impl CorpusPlan {
    /// The default benchmark topology: 8 clients over 2 domains,
    /// 2 classification + 3 span + 3 generation.
    pub fn desk(vocab_size: usize, max_seq_len: usize) -> Self {
        let content: Vec<u32> = (vocab::FIRST_CONTENT..vocab_size as u32).collect();
        // Two 40-token subsets with a 16-token (40%) overlap.
        let a: Vec<u32> = content[..40].to_vec();
        let b: Vec<u32> = content[content.len() - 40..].to_vec();
        use TaskKind::*;
        CorpusPlan {
            domains: vec![
                DomainSpec {
                    id: 0,
                    zipf_exponent: 1.1,
                    preferred: a,
                    len_range: (8, 24),
                },
                DomainSpec {
                    id: 1,
                    zipf_exponent: 1.1,
                    preferred: b,
                    len_range: (8, 24),
                },
            ],
            clients: vec![
                (Classification, 0),
                (Classification, 1),
                (SpanExtraction, 0),
                (SpanExtraction, 1),
                (SpanExtraction, 1),
                (Generation, 1),
                (Generation, 1),
                (Generation, 0),
            ],
            train_size: 512,
            val_size: 128,
            test_size: 128,
            num_classes: 4,
            max_seq_len,
            vocab_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.len() < 2 {
            return Err(Error::Generation("plan needs at least 2 domains".into()));
        }
        let mut kinds: Vec<TaskKind> = self.clients.iter().map(|(k, _)| *k).collect();
        kinds.sort_unstable();
        kinds.dedup();
        if kinds.len() < 2 {
            return Err(Error::Generation("plan needs at least 2 task kinds".into()));
        }
        if self.train_size == 0 {
            return Err(Error::Generation("train split must be non-empty".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Generation("need at least 2 classes".into()));
        }
        for spec in &self.domains {
            if spec.preferred.is_empty() {
                return Err(Error::Generation(format!("domain {} has no vocabulary", spec.id)));
            }
            if spec.len_range.0 < 4 || spec.len_range.0 > spec.len_range.1 {
                return Err(Error::Generation(format!(
                    "domain {} length range {:?} is infeasible (span/generation need >= 4 tokens)",
                    spec.id, spec.len_range
                )));
            }
            if spec.len_range.1 > self.max_seq_len {
                return Err(Error::Generation(format!(
                    "domain {} documents up to {} exceed max length {}",
                    spec.id, spec.len_range.1, self.max_seq_len
                )));
            }
            for &t in &spec.preferred {
                if vocab::is_special(t) || t as usize >= self.vocab_size {
                    return Err(Error::Generation(format!(
                        "domain {} preferred token {t} outside content vocabulary",
                        spec.id
                    )));
                }
            }
        }
        for (i, a) in self.domains.iter().enumerate() {
            for b in &self.domains[i + 1..] {
                let overlap = a.preferred.iter().filter(|t| b.preferred.contains(t)).count();
                let smaller = a.preferred.len().min(b.preferred.len());
                if 2 * overlap >= smaller {
                    return Err(Error::Generation(format!(
                        "domains {} and {} share {overlap} of {smaller} preferred tokens (>= 50%)",
                        a.id, b.id
                    )));
                }
            }
        }
        for (kind, dom) in &self.clients {
            if !kind.is_client_objective() {
                return Err(Error::Generation(format!(
                    "'{}' is a server-assigned task, not a client objective",
                    kind.name()
                )));
            }
            if !self.domains.iter().any(|d| d.id == *dom) {
                return Err(Error::Generation(format!("client references unknown domain {dom}")));
            }
        }
        Ok(())
    }
}

/// Precomputed Zipf CDF over a preferred token list.
struct ZipfSampler {
    cdf: Vec<f64>,
    tokens: Vec<u32>,
}

impl ZipfSampler {
    fn new(spec: &DomainSpec) -> Self {
        let n = spec.preferred.len();
        let mut weights: Vec<f64> = (0..n)
            .map(|r| 1.0 / ((r + 1) as f64).powf(spec.zipf_exponent))
            .collect();
        let total: f64 = weights.iter().sum();
        let mut acc = 0.0;
        for w in &mut weights {
            acc += *w / total;
            *w = acc;
        }
        ZipfSampler {
            cdf: weights,
            tokens: spec.preferred.clone(),
        }
    }

    fn draw(&self, rng: &mut RngStream) -> u32 {
        let u = rng.next_f64();
        let idx = self.cdf.partition_point(|&c| c < u);
        self.tokens[idx.min(self.tokens.len() - 1)]
    }

    fn draw_doc(&self, len_range: (usize, usize), rng: &mut RngStream) -> Vec<u32> {
        let len = len_range.0 + rng.below(len_range.1 - len_range.0 + 1);
        (0..len).map(|_| self.draw(rng)).collect()
    }
}

/// The fixed labeling rule for classification documents: the preferred list
/// is split into `num_classes` keyword groups and the label is the group
/// with the most occurrences (ties to the smallest group index).
pub fn classification_label(tokens: &[u32], spec: &DomainSpec, num_classes: usize) -> usize {
    let n = spec.preferred.len();
    let mut counts = vec![0usize; num_classes];
    for t in tokens {
        if let Some(idx) = spec.preferred.iter().position(|p| p == t) {
            counts[idx * num_classes / n] += 1;
        }
    }
    let mut best = 0;
    for (c, &v) in counts.iter().enumerate() {
        if v > counts[best] {
            best = c;
        }
    }
    best
}

fn gen_classification(
    sampler: &ZipfSampler,
    spec: &DomainSpec,
    num_classes: usize,
    count: usize,
    rng: &mut RngStream,
) -> Vec<Instance> {
    // Quota-balanced rejection keeps the class marginals near uniform so
    // that accuracy is informative; labels still satisfy the rule exactly.
    let mut quota = vec![count / num_classes; num_classes];
    for q in quota.iter_mut().take(count % num_classes) {
        *q += 1;
    }
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut accepted = None;
        for _ in 0..200 {
            let doc = sampler.draw_doc(spec.len_range, rng);
            let label = classification_label(&doc, spec, num_classes);
            if quota[label] > 0 {
                accepted = Some((doc, label));
                break;
            }
        }
        let (doc, label) = match accepted {
            Some(x) => x,
            None => {
                let doc = sampler.draw_doc(spec.len_range, rng);
                let label = classification_label(&doc, spec, num_classes);
                (doc, label)
            }
        };
        quota[label] = quota[label].saturating_sub(1);
        out.push(Instance {
            source: doc,
            payload: Payload::Class(label),
        });
    }
    out
}

fn gen_span(sampler: &ZipfSampler, spec: &DomainSpec, count: usize, rng: &mut RngStream) -> Result<Vec<Instance>> {
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut doc = sampler.draw_doc(spec.len_range, rng);
        let len = doc.len();
        let max_answer = 4.min(len - 1);
        if max_answer == 0 {
            return Err(Error::Generation(format!(
                "document of length {len} cannot hold a marker and an answer"
            )));
        }
        let answer_len = 1 + rng.below(max_answer);
        let marker = rng.below(len - answer_len);
        doc[marker] = vocab::SEP;
        out.push(Instance {
            source: doc,
            payload: Payload::Span {
                start: marker + 1,
                end: marker + answer_len,
            },
        });
    }
    Ok(out)
}

fn gen_generation(sampler: &ZipfSampler, spec: &DomainSpec, count: usize, rng: &mut RngStream) -> Result<Vec<Instance>> {
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let doc = sampler.draw_doc(spec.len_range, rng);
        let len = doc.len();
        if len < 4 {
            return Err(Error::Generation(format!(
                "document of length {len} cannot be split into prefix and continuation"
            )));
        }
        let split = 2 + rng.below(len - 3);
        let mut source = doc[..split].to_vec();
        source.push(vocab::SEP);
        out.push(Instance {
            source,
            payload: Payload::Target(doc[split..].to_vec()),
        });
    }
    Ok(out)
}

fn gen_instances(
    kind: TaskKind,
    sampler: &ZipfSampler,
    spec: &DomainSpec,
    num_classes: usize,
    count: usize,
    rng: &mut RngStream,
) -> Result<Vec<Instance>> {
    match kind {
        TaskKind::Classification => Ok(gen_classification(sampler, spec, num_classes, count, rng)),
        TaskKind::SpanExtraction => gen_span(sampler, spec, count, rng),
        TaskKind::Generation => gen_generation(sampler, spec, count, rng),
        _ => Err(Error::Generation(format!(
            "cannot generate data for assigned task '{}'",
            kind.name()
        ))),
    }
}

/// Builds every client's dataset. Pure in `(plan, seed)`.
pub fn build_corpus(plan: &CorpusPlan, seed: u64) -> Result<Vec<ClientDataset>> {
    plan.validate()?;
    let mut out = Vec::with_capacity(plan.clients.len());
    for (client_id, (kind, domain_id)) in plan.clients.iter().enumerate() {
        let spec = plan
            .domains
            .iter()
            .find(|d| d.id == *domain_id)
            .expect("validated above");
        let sampler = ZipfSampler::new(spec);
        let mut rng = RngStream::new(seed, &format!("corpus/client{client_id}"));
        let train = gen_instances(*kind, &sampler, spec, plan.num_classes, plan.train_size, &mut rng)?;
        let val = gen_instances(*kind, &sampler, spec, plan.num_classes, plan.val_size, &mut rng)?;
        let test = gen_instances(*kind, &sampler, spec, plan.num_classes, plan.test_size, &mut rng)?;
        out.push(ClientDataset {
            client_id,
            task: *kind,
            domain: *domain_id,
            train,
            val,
            test,
        });
    }
    Ok(out)
}

/// One epoch of index batches: shuffled, final short batch kept.
pub fn make_batches(n_instances: usize, batch_size: usize, rng: &mut RngStream) -> Result<Vec<Vec<usize>>> {
    if n_instances == 0 {
        return Err(Error::DegenerateBatch("empty split".into()));
    }
    if batch_size == 0 {
        return Err(Error::Usage("batch_size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..n_instances).collect();
    rng.shuffle(&mut order);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// `steps` batches, reshuffling whenever an epoch is exhausted.
pub fn batches_for_steps(
    n_instances: usize,
    batch_size: usize,
    steps: usize,
    rng: &mut RngStream,
) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(steps);
    while out.len() < steps {
        for batch in make_batches(n_instances, batch_size, rng)? {
            if out.len() == steps {
                break;
            }
            out.push(batch);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Line-oriented dump/load
// ---------------------------------------------------------------------------

fn ids_to_str(ids: &[u32]) -> String {
    ids.iter().map(u32::to_string).collect::<Vec<_>>().join(",")
}

fn ids_from_str(s: &str) -> Result<Vec<u32>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|t| t.parse::<u32>().map_err(|e| Error::Parse(format!("token id '{t}': {e}"))))
        .collect()
}

fn payload_to_str(p: &Payload) -> String {
    match p {
        Payload::Class(c) => format!("class:{c}"),
        Payload::Span { start, end } => format!("span:{start}-{end}"),
        Payload::Target(t) => format!("target:{}", ids_to_str(t)),
    }
}

fn payload_from_str(s: &str) -> Result<Payload> {
    let (tag, rest) = s
        .split_once(':')
        .ok_or_else(|| Error::Parse(format!("payload '{s}'")))?;
    match tag {
        "class" => Ok(Payload::Class(
            rest.parse().map_err(|e| Error::Parse(format!("class '{rest}': {e}")))?,
        )),
        "span" => {
            let (a, b) = rest
                .split_once('-')
                .ok_or_else(|| Error::Parse(format!("span '{rest}'")))?;
            Ok(Payload::Span {
                start: a.parse().map_err(|e| Error::Parse(format!("span '{rest}': {e}")))?,
                end: b.parse().map_err(|e| Error::Parse(format!("span '{rest}': {e}")))?,
            })
        }
        "target" => Ok(Payload::Target(ids_from_str(rest)?)),
        other => Err(Error::Parse(format!("unknown payload tag '{other}'"))),
    }
}

/// Writes one instance per line:
/// `client <TAB> split <TAB> kind <TAB> domain <TAB> source-ids <TAB> payload`.
pub fn dump_corpus(datasets: &[ClientDataset], w: &mut impl Write) -> Result<()> {
    for ds in datasets {
        for (split, insts) in [("train", &ds.train), ("val", &ds.val), ("test", &ds.test)] {
            for inst in insts {
                writeln!(
                    w,
                    "{}\t{}\t{}\t{}\t{}\t{}",
                    ds.client_id,
                    split,
                    ds.task.name(),
                    ds.domain,
                    ids_to_str(&inst.source),
                    payload_to_str(&inst.payload)
                )?;
            }
        }
    }
    Ok(())
}

pub fn load_corpus(r: impl BufRead) -> Result<Vec<ClientDataset>> {
    let mut datasets: Vec<ClientDataset> = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(Error::Parse(format!(
                "corpus line {}: expected 6 fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let client_id: usize = fields[0]
            .parse()
            .map_err(|e| Error::Parse(format!("client id '{}': {e}", fields[0])))?;
        let task = TaskKind::parse(fields[2])?;
        let domain: usize = fields[3]
            .parse()
            .map_err(|e| Error::Parse(format!("domain '{}': {e}", fields[3])))?;
        let instance = Instance {
            source: ids_from_str(fields[4])?,
            payload: payload_from_str(fields[5])?,
        };
        while datasets.len() <= client_id {
            datasets.push(ClientDataset {
                client_id: datasets.len(),
                task,
                domain,
                train: Vec::new(),
                val: Vec::new(),
                test: Vec::new(),
            });
        }
        datasets[client_id].task = task;
        datasets[client_id].domain = domain;
        let ds = &mut datasets[client_id];
        match fields[1] {
            "train" => ds.train.push(instance),
            "val" => ds.val.push(instance),
            "test" => ds.test.push(instance),
            other => return Err(Error::Parse(format!("unknown split '{other}'"))),
        }
    }
    Ok(datasets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn desk_plan() -> CorpusPlan {
        CorpusPlan::desk(69, 32)
    }

    #[test]
    fn generation_is_deterministic() {
        let plan = desk_plan();
        let a = build_corpus(&plan, 42).unwrap();
        let b = build_corpus(&plan, 42).unwrap();
        assert_eq!(a, b);
        let c = build_corpus(&plan, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn classification_labels_satisfy_the_rule() {
        let plan = desk_plan();
        let corpus = build_corpus(&plan, 7).unwrap();
        for ds in corpus.iter().filter(|d| d.task == TaskKind::Classification) {
            let spec = &plan.domains[ds.domain];
            for inst in ds.train.iter().chain(&ds.val).chain(&ds.test) {
                let Payload::Class(label) = inst.payload else {
                    panic!("classification payload");
                };
                assert_eq!(label, classification_label(&inst.source, spec, plan.num_classes));
            }
        }
    }

    #[test]
    fn span_payloads_are_marker_adjacent_and_in_range() {
        let corpus = build_corpus(&desk_plan(), 7).unwrap();
        for ds in corpus.iter().filter(|d| d.task == TaskKind::SpanExtraction) {
            for inst in &ds.train {
                let Payload::Span { start, end } = inst.payload else {
                    panic!("span payload");
                };
                assert!(start <= end);
                assert!(end < inst.source.len());
                assert_eq!(inst.source[start - 1], vocab::SEP);
            }
        }
    }

    #[test]
    fn generation_targets_follow_the_separator() {
        let corpus = build_corpus(&desk_plan(), 7).unwrap();
        for ds in corpus.iter().filter(|d| d.task == TaskKind::Generation) {
            for inst in &ds.train {
                assert_eq!(*inst.source.last().unwrap(), vocab::SEP);
                let Payload::Target(t) = &inst.payload else {
                    panic!("target payload");
                };
                assert!(!t.is_empty());
            }
        }
    }

    #[test]
    fn token_ids_and_lengths_in_bounds() {
        let plan = desk_plan();
        let corpus = build_corpus(&plan, 3).unwrap();
        for ds in &corpus {
            for inst in ds.train.iter().chain(&ds.val).chain(&ds.test) {
                assert!(inst.source.len() <= plan.max_seq_len);
                assert!(inst.source.iter().all(|&t| (t as usize) < plan.vocab_size));
                if let Payload::Target(t) = &inst.payload {
                    assert!(t.len() <= plan.max_seq_len);
                    assert!(t.iter().all(|&t| (t as usize) < plan.vocab_size));
                }
            }
        }
    }

    fn unigram_dist(instances: &[Instance], vocab_size: usize) -> Vec<f64> {
        let mut counts = vec![0.0; vocab_size];
        let mut total = 0.0;
        for inst in instances {
            for &t in &inst.source {
                counts[t as usize] += 1.0;
                total += 1.0;
            }
        }
        for c in &mut counts {
            *c /= total;
        }
        counts
    }

    #[test]
    fn disjoint_domains_have_large_total_variation_distance() {
        let mut plan = desk_plan();
        plan.domains[0].preferred = (5..25).collect();
        plan.domains[1].preferred = (45..65).collect();
        let corpus = build_corpus(&plan, 11).unwrap();
        let by_domain: Vec<Vec<Instance>> = (0..2)
            .map(|d| {
                corpus
                    .iter()
                    .filter(|ds| ds.domain == d)
                    .flat_map(|ds| ds.train.clone())
                    .collect()
            })
            .collect();
        let p = unigram_dist(&by_domain[0], plan.vocab_size);
        let q = unigram_dist(&by_domain[1], plan.vocab_size);
        let tv: f64 = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
        assert!(tv > 0.3, "total variation {tv}");
    }

    #[test]
    fn naive_bayes_oracle_separates_default_domains() {
        let plan = desk_plan();
        let corpus = build_corpus(&plan, 5).unwrap();
        // Fit per-domain unigram models on train, classify val docs.
        let mut counts: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for ds in &corpus {
            let entry = counts.entry(ds.domain).or_insert_with(|| vec![1.0; plan.vocab_size]);
            for inst in &ds.train {
                for &t in &inst.source {
                    entry[t as usize] += 1.0;
                }
            }
        }
        let log_probs: BTreeMap<usize, Vec<f64>> = counts
            .into_iter()
            .map(|(d, c)| {
                let total: f64 = c.iter().sum();
                (d, c.into_iter().map(|x| (x / total).ln()).collect())
            })
            .collect();
        let mut correct = 0usize;
        let mut total = 0usize;
        for ds in &corpus {
            for inst in &ds.val {
                let best = log_probs
                    .iter()
                    .map(|(d, lp)| {
                        let score: f64 = inst.source.iter().map(|&t| lp[t as usize]).sum();
                        (*d, score)
                    })
                    .max_by(|a, b| a.1.total_cmp(&b.1))
                    .unwrap()
                    .0;
                correct += usize::from(best == ds.domain);
                total += 1;
            }
        }
        let acc = correct as f64 / total as f64;
        assert!(acc >= 0.9, "naive-Bayes domain accuracy {acc}");
    }

    #[test]
    fn batches_cover_each_instance_once() {
        let mut rng = RngStream::new(1, "batch");
        let batches = make_batches(17, 5, &mut rng).unwrap();
        assert_eq!(batches.len(), 4); // ceil(17/5)
        assert_eq!(batches.last().unwrap().len(), 2);
        let mut seen: Vec<usize> = batches.into_iter().flatten().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..17).collect::<Vec<_>>());
    }

    #[test]
    fn batch_order_reproducible_under_same_stream() {
        let a = make_batches(20, 6, &mut RngStream::new(9, "b")).unwrap();
        let b = make_batches(20, 6, &mut RngStream::new(9, "b")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dump_load_round_trip() {
        let mut plan = desk_plan();
        plan.train_size = 6;
        plan.val_size = 2;
        plan.test_size = 2;
        let corpus = build_corpus(&plan, 13).unwrap();
        let mut buf = Vec::new();
        dump_corpus(&corpus, &mut buf).unwrap();
        let reloaded = load_corpus(std::io::BufReader::new(&buf[..])).unwrap();
        assert_eq!(corpus, reloaded);
    }

    #[test]
    fn dump_format_is_stable() {
        let corpus = vec![ClientDataset {
            client_id: 0,
            task: TaskKind::Classification,
            domain: 1,
            train: vec![Instance {
                source: vec![5, 6, 7],
                payload: Payload::Class(2),
            }],
            val: vec![],
            test: vec![Instance {
                source: vec![8, 4, 9],
                payload: Payload::Span { start: 1, end: 2 },
            }],
        }];
        let mut buf = Vec::new();
        dump_corpus(&corpus, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "0\ttrain\tclassification\t1\t5,6,7\tclass:2\n0\ttest\tclassification\t1\t8,4,9\tspan:1-2\n"
        );
    }

    #[test]
    fn infeasible_plan_is_a_generation_error() {
        let mut plan = desk_plan();
        plan.domains[0].len_range = (2, 3);
        assert!(matches!(build_corpus(&plan, 0), Err(Error::Generation(_))));
    }
}
