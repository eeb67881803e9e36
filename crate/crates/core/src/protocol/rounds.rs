//! Round execution: broadcast, local training, upload, and aggregation.
//!
//! Clients train in parallel; the server reduces uploads in ascending
//! client-id order, so results are independent of scheduling. A round only
//! completes when every client's upload is in (errors abort the round).

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::corpus::{batches_for_steps, ClientDataset, Instance};
use crate::error::{Error, Result};
use crate::exec;
use crate::model::{
    init_model, init_task_head, mlm_head_forward, summary_backward, summary_representation,
    ModelConfig, ModelParams, Region, RegionSet, TaskHead,
};
use crate::optim::{add_scaled_grads, adamw_step, AdamHyper, AdamState, LrSchedule, ParamMap};
use crate::protocol::cluster::{cluster_clients, pairwise_cosine, ClusterAssignment};
use crate::protocol::{
    audit_updates, MessageLog, ModelUpdate, NeighborAssignment, Stage, SyntheticDataset,
    UploadKind, UploadRecord,
};
use crate::rng::RngStream;
use crate::tasks::{contrastive_loss, objective_on_prepared, prepare_batch, TaskKind};
use crate::tensor::Tensor;

/// One simulated participant: its private data and full local model.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub dataset: ClientDataset,
    pub params: ModelParams,
}

/// Server-side state: the per-client personalized backbone copies plus the
/// round history.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub n_clients: usize,
    pub samples: Vec<usize>,
    pub personalized: Vec<ParamMap>,
    pub regions: BTreeMap<String, Region>,
    pub round: usize,
    pub stage: Stage,
    pub synthetic: Option<SyntheticDataset>,
    pub cluster_history: Vec<ClusterAssignment>,
    pub neighbor_history: Vec<NeighborAssignment>,
    pub last_assign_similarity: Option<Vec<Vec<f64>>>,
    pub log: MessageLog,
}

/// The whole in-process federation.
#[derive(Debug, Clone)]
pub struct Federation {
    pub cfg: ModelConfig,
    pub seed: u64,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
}

impl Federation {
    /// Identical backbone initialization for every client (personalization
    /// starts from round 1); private heads drawn from per-client streams.
    pub fn new(
        cfg: ModelConfig,
        seed: u64,
        datasets: Vec<ClientDataset>,
        num_classes: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        if datasets.is_empty() {
            return Err(Error::Protocol("no clients".into()));
        }
        let backbone = init_model(&cfg, &RngStream::new(seed, "init/backbone"));
        let mut clients = Vec::with_capacity(datasets.len());
        for ds in datasets {
            let mut params = backbone.clone();
            let head = match ds.task {
                TaskKind::Classification => TaskHead::Classifier { classes: num_classes },
                TaskKind::SpanExtraction => TaskHead::SpanExtractor,
                TaskKind::Generation => TaskHead::Generator,
                other => {
                    return Err(Error::Protocol(format!(
                        "client {} has non-client objective '{}'",
                        ds.client_id,
                        other.name()
                    )))
                }
            };
            init_task_head(
                &mut params,
                head,
                &cfg,
                &RngStream::new(seed, &format!("init/client{}/head", ds.client_id)),
            );
            clients.push(ClientState {
                id: ds.client_id,
                dataset: ds,
                params,
            });
        }
        let regions: BTreeMap<String, Region> = clients[0]
            .params
            .iter()
            .filter(|(_, r, _)| !r.is_private())
            .map(|(k, r, _)| (k.clone(), r))
            .collect();
        let personalized: Vec<ParamMap> = clients
            .iter()
            .map(|c| c.params.extract(RegionSet::backbone()))
            .collect();
        let samples = clients.iter().map(|c| c.dataset.sample_count()).collect();
        Ok(Federation {
            cfg,
            seed,
            server: ServerState {
                n_clients: clients.len(),
                samples,
                personalized,
                regions,
                round: 0,
                stage: Stage::Assign,
                synthetic: None,
                cluster_history: Vec::new(),
                neighbor_history: Vec::new(),
                last_assign_similarity: None,
                log: MessageLog::default(),
            },
            clients,
        })
    }
}

/// Local-training knobs for one stage.
#[derive(Debug, Clone)]
pub struct LocalPhase {
    pub steps: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub hyper: AdamHyper,
    pub mask_ratio: f64,
    /// Round index within the stage's learning-rate schedule.
    pub schedule_round: usize,
    /// Round index used to derive the client RNG substream.
    pub stream_round: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ContrastRoundParams {
    pub k: usize,
    pub tau: f64,
    pub lambda: f64,
    /// Probe instances per optimization step (the full probe set is used
    /// for the uploaded representation).
    pub synthetic_batch: usize,
}

struct ContrastCtx<'a> {
    synthetic: &'a [Vec<u32>],
    all_h: &'a [Vec<f64>],
    positives: &'a [usize],
    negatives: &'a [usize],
    tau: f64,
    lambda: f64,
    synthetic_batch: usize,
}

#[derive(Debug, Clone)]
struct LocalStats {
    mean_task_loss: f64,
    mean_contrast_loss: Option<f64>,
}

fn synth_slice(synthetic: &[Vec<u32>], batch: usize, step: usize) -> &[Vec<u32>] {
    let chunks = synthetic.len().div_ceil(batch);
    let ci = step % chunks;
    let from = ci * batch;
    &synthetic[from..(from + batch).min(synthetic.len())]
}

fn local_train(
    client: &mut ClientState,
    cfg: &ModelConfig,
    seed: u64,
    objective: TaskKind,
    stream_tag: &str,
    phase: &LocalPhase,
    contrast: Option<&ContrastCtx<'_>>,
) -> Result<LocalStats> {
    let mut rng = RngStream::new(
        seed,
        &format!("client{}/{}/round{}", client.id, stream_tag, phase.stream_round),
    );
    let train = &client.dataset.train;
    let batches = batches_for_steps(train.len(), phase.batch_size, phase.steps, &mut rng)?;
    let use_contrast = matches!(contrast, Some(c) if c.lambda != 0.0);
    let mut regions = objective.trainable_regions();
    if use_contrast {
        regions = regions.union(RegionSet::of(&[
            Region::Encoder,
            Region::Decoder,
            Region::ContrastHead,
        ]));
    }
    let mut plain = client.params.extract(regions);
    let mut adam = AdamState::new();
    let mut task_loss_sum = 0.0;
    let mut contrast_loss_sum = 0.0;
    for (step, batch_idx) in batches.iter().enumerate() {
        let batch: Vec<&Instance> = batch_idx.iter().map(|&i| &train[i]).collect();
        let prepared = prepare_batch(objective, &batch, phase.mask_ratio, &mut rng)?;
        let out = objective_on_prepared(&client.params, cfg, &prepared, true)?;
        task_loss_sum += out.loss;
        let mut grads = out.grads;
        if use_contrast {
            let ctx = contrast.expect("checked above");
            let probe = synth_slice(ctx.synthetic, ctx.synthetic_batch, step);
            let h = summary_representation(&client.params, cfg, probe)?;
            let cl = contrastive_loss(&h, ctx.all_h, ctx.positives, ctx.negatives, ctx.tau)?;
            contrast_loss_sum += cl.loss;
            if !cl.empty_negatives {
                let cgrads = summary_backward(&client.params, cfg, probe, &cl.grad_h)?;
                add_scaled_grads(&mut grads, &cgrads, ctx.lambda);
            }
        }
        let global_step = (phase.schedule_round * phase.steps + step) as u64;
        let lr = phase.schedule.lr_at(global_step);
        adamw_step(&mut plain, &grads, &mut adam, lr, &phase.hyper)?;
        client.params.assign(&plain)?;
    }
    let steps = phase.steps.max(1) as f64;
    Ok(LocalStats {
        mean_task_loss: task_loss_sum / steps,
        mean_contrast_loss: contrast.map(|_| contrast_loss_sum / steps),
    })
}

fn broadcast(server: &ServerState, clients: &mut [ClientState], regions: RegionSet) -> Result<()> {
    for (n, client) in clients.iter_mut().enumerate() {
        let filtered: ParamMap = server.personalized[n]
            .iter()
            .filter(|(k, _)| regions.contains(server.regions[k.as_str()]))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        client.params.assign(&filtered)?;
    }
    Ok(())
}

fn delta_map(after: &ParamMap, before: &ParamMap) -> Result<ParamMap> {
    let mut out = ParamMap::new();
    for (k, a) in after {
        let b = before
            .get(k)
            .ok_or_else(|| Error::Usage(format!("missing '{k}' in pre-training snapshot")))?;
        out.insert(k.clone(), a.sub(b)?);
    }
    Ok(out)
}

/// Adds `sum_i (|D_i| / |D_members|) * delta_i` to `target`, iterating
/// members in ascending id order. Returns the weight sum.
fn apply_weighted(
    target: &mut ParamMap,
    members: &[usize],
    updates: &[ModelUpdate],
    samples: &[usize],
) -> Result<f64> {
    let total: f64 = members.iter().map(|&i| samples[i] as f64).sum();
    if total == 0.0 {
        return Err(Error::Protocol("aggregation weights sum to zero".into()));
    }
    let mut wsum = 0.0;
    for &i in members {
        let w = samples[i] as f64 / total;
        wsum += w;
        for (k, d) in &updates[i].deltas {
            let t = target
                .get_mut(k)
                .ok_or_else(|| Error::Protocol(format!("aggregating unknown key '{k}'")))?;
            t.add_scaled(d, w)?;
        }
    }
    Ok(wsum)
}

/// Clustered aggregation: every client receives the weighted sum of the
/// updates in its own cluster. Returns per-client weight sums.
pub fn aggregate_clustered(
    personalized: &mut [ParamMap],
    updates: &[ModelUpdate],
    assignment: &ClusterAssignment,
    samples: &[usize],
) -> Result<Vec<f64>> {
    let n = personalized.len();
    let mut sums = Vec::with_capacity(n);
    for client in 0..n {
        let members = assignment.members_of(assignment.assignment[client]);
        sums.push(apply_weighted(&mut personalized[client], &members, updates, samples)?);
    }
    Ok(sums)
}

/// Neighbor aggregation: every client receives the weighted sum of its own
/// update plus its positives'. Returns per-client weight sums.
pub fn aggregate_neighbors(
    personalized: &mut [ParamMap],
    updates: &[ModelUpdate],
    assignment: &NeighborAssignment,
    samples: &[usize],
) -> Result<Vec<f64>> {
    let n = personalized.len();
    let mut sums = Vec::with_capacity(n);
    for client in 0..n {
        let mut members = assignment.positives[client].clone();
        members.push(client);
        members.sort_unstable();
        sums.push(apply_weighted(&mut personalized[client], &members, updates, samples)?);
    }
    Ok(sums)
}

/// Ranks every other client by update cosine (ties towards the smaller id)
/// and takes the top `k` as positives.
pub fn select_neighbors(updates: &[ModelUpdate], k: usize, round: usize) -> Result<NeighborAssignment> {
    let n = updates.len();
    if k == 0 || k >= n {
        return Err(Error::Protocol(format!(
            "neighbor count {k} out of range for {n} clients"
        )));
    }
    let sims = pairwise_cosine(updates);
    let mut positives = Vec::with_capacity(n);
    let mut negatives = Vec::with_capacity(n);
    let mut ranked_all = Vec::with_capacity(n);
    for i in 0..n {
        let mut ranked: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        ranked.sort_by(|&a, &b| sims[i][b].total_cmp(&sims[i][a]).then(a.cmp(&b)));
        positives.push(ranked[..k].to_vec());
        negatives.push(ranked[k..].to_vec());
        ranked_all.push(ranked);
    }
    Ok(NeighborAssignment {
        round,
        positives,
        negatives,
        ranked: ranked_all,
    })
}

// ---------------------------------------------------------------------------
// Round logs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ClientRoundLog {
    pub client: usize,
    pub task: String,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub contrast_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub update_norm: Option<f64>,
    pub samples: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RoundLog {
    pub round: usize,
    pub stage: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    pub clients: Vec<ClientRoundLog>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clusters: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub positives: Option<Vec<Vec<usize>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_sums: Option<Vec<f64>>,
    pub uploads: usize,
    pub upload_bytes: u64,
    pub audit_ok: bool,
}

fn record_uploads(server: &mut ServerState, updates: &[ModelUpdate]) {
    for u in updates {
        server.log.push(UploadRecord {
            round: u.round,
            client_id: u.client_id,
            kind: UploadKind::ModelUpdate,
            stage: u.stage,
            scalar_count: u.scalar_count(),
        });
    }
}

// ---------------------------------------------------------------------------
// Assign stage
// ---------------------------------------------------------------------------

/// One Assign round: broadcast, local training on the server-assigned task,
/// clustering of the uploaded updates, clustered aggregation.
pub fn run_assign_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    cfg: &ModelConfig,
    seed: u64,
    task: TaskKind,
    phase: &LocalPhase,
    n_clusters: usize,
) -> Result<RoundLog> {
    if server.stage != Stage::Assign {
        return Err(Error::Protocol(format!(
            "assign round in stage '{}'",
            server.stage.name()
        )));
    }
    if clients.len() < 2 {
        return Err(Error::Protocol("assign stage needs at least 2 clients".into()));
    }
    if task.is_client_objective() {
        return Err(Error::Usage(format!(
            "'{}' cannot be served as an assigned task",
            task.name()
        )));
    }
    broadcast(server, clients, RegionSet::backbone())?;
    let round = server.round;
    let regions = task.trainable_regions();
    let results = exec::map_mut(clients, |_, c| -> Result<(LocalStats, ModelUpdate)> {
        let before = c.params.extract(regions);
        let stats = local_train(c, cfg, seed, task, "assign", phase, None)?;
        let deltas = delta_map(&c.params.extract(regions), &before)?;
        Ok((
            stats,
            ModelUpdate {
                client_id: c.id,
                round,
                stage: Stage::Assign,
                deltas,
                sample_count: c.dataset.sample_count(),
            },
        ))
    });
    let mut stats = Vec::new();
    let mut updates = Vec::new();
    for r in results {
        let (s, u) = r?;
        stats.push(s);
        updates.push(u);
    }
    record_uploads(server, &updates);
    audit_updates(&updates, &|k| server.regions.get(k).copied())?;

    let sims = pairwise_cosine(&updates);
    let assignment = cluster_clients(&updates, n_clusters, round)?;
    let weight_sums = aggregate_clustered(&mut server.personalized, &updates, &assignment, &server.samples)?;
    server.last_assign_similarity = Some(sims);
    server.cluster_history.push(assignment.clone());
    server.round += 1;

    Ok(RoundLog {
        round,
        stage: Stage::Assign.name().into(),
        task: Some(task.name().into()),
        clients: stats
            .iter()
            .zip(&updates)
            .map(|(s, u)| ClientRoundLog {
                client: u.client_id,
                task: task.name().into(),
                loss: s.mean_task_loss,
                contrast_loss: None,
                update_norm: Some(u.norm()),
                samples: u.sample_count,
            })
            .collect(),
        clusters: Some(assignment.assignment),
        positives: None,
        weight_sums: Some(weight_sums),
        uploads: updates.len(),
        upload_bytes: server.log.bytes_in_round(round),
        audit_ok: true,
    })
}

// ---------------------------------------------------------------------------
// Stage switch: synthetic probe generation
// ---------------------------------------------------------------------------

/// Where the reconstruction head for probe generation comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticHeadSource {
    /// Sample-weighted average of the clients' Assign-stage MLM heads,
    /// frozen at the stage switch.
    AssignAverage,
    /// A freshly initialized head from a dedicated stream.
    Fresh,
}

/// Positionwise convex mix of encoder states, reconstructed to token ids by
/// the given MLM head (argmax per position, first index on ties).
pub fn mix_and_reconstruct(
    head: &ModelParams,
    states: &[&Tensor],
    alpha: &[f64],
) -> Result<Vec<u32>> {
    if states.is_empty() || states.len() != alpha.len() {
        return Err(Error::Usage(format!(
            "{} state sets vs {} weights",
            states.len(),
            alpha.len()
        )));
    }
    let mut mixed = Tensor::zeros_like(states[0]);
    for (s, &a) in states.iter().zip(alpha) {
        mixed.add_scaled(s, a)?;
    }
    let logits = mlm_head_forward(head, &mixed)?;
    Ok((0..logits.rows()).map(|r| logits.argmax_row(r) as u32).collect())
}

fn synthetic_head(
    server: &ServerState,
    cfg: &ModelConfig,
    seed: u64,
    source: SyntheticHeadSource,
) -> Result<ModelParams> {
    let mut head = ModelParams::new();
    match source {
        SyntheticHeadSource::AssignAverage => {
            let total: f64 = server.samples.iter().map(|&s| s as f64).sum();
            if total == 0.0 {
                return Err(Error::Protocol("no samples to weight the probe head".into()));
            }
            let mlm_keys: Vec<&String> = server
                .regions
                .iter()
                .filter(|(_, r)| **r == Region::MlmHead)
                .map(|(k, _)| k)
                .collect();
            for key in mlm_keys {
                let mut acc = Tensor::zeros_like(&server.personalized[0][key]);
                for n in 0..server.n_clients {
                    acc.add_scaled(&server.personalized[n][key], server.samples[n] as f64 / total)?;
                }
                head.insert(key.clone(), Region::MlmHead, acc);
            }
        }
        SyntheticHeadSource::Fresh => {
            let fresh = init_model(cfg, &RngStream::new(seed, "synthetic-head"));
            for (k, r, t) in fresh.iter() {
                if r == Region::MlmHead {
                    head.insert(k.clone(), r, t.clone());
                }
            }
        }
    }
    Ok(head)
}

/// The Assign-to-Contrast stage switch: every client contributes encoder
/// states of randomly sampled local instances; the server mixes them with
/// Dirichlet(1) weights and reconstructs token sequences, then broadcasts
/// the whole probe set.
pub fn generate_synthetic_dataset(
    server: &mut ServerState,
    clients: &[ClientState],
    cfg: &ModelConfig,
    seed: u64,
    size: usize,
    head_source: SyntheticHeadSource,
) -> Result<()> {
    if size == 0 {
        return Err(Error::Config("synthetic dataset size must be at least 1".into()));
    }
    if server.stage == Stage::Contrast {
        return Err(Error::Protocol("synthetic dataset already generated".into()));
    }
    let head = synthetic_head(server, cfg, seed, head_source)?;

    // Clients draw their probe instances from dedicated streams.
    let sampled: Vec<Vec<&[u32]>> = clients
        .iter()
        .map(|c| {
            let mut rng = RngStream::new(seed, &format!("client{}/synthetic", c.id));
            (0..size)
                .map(|_| c.dataset.train[rng.below(c.dataset.train.len())].source.as_slice())
                .collect()
        })
        .collect();

    let round = server.round;
    let mut server_rng = RngStream::new(seed, "server/synthetic");
    let mut sequences = Vec::with_capacity(size);
    let mut digest: u64 = 0;
    for m in 0..size {
        let states: Vec<Tensor> = exec::map_ref(clients, |n, c| {
            crate::model::encode(&c.params, cfg, sampled[n][m], None).map(|e| e.states)
        })
        .into_iter()
        .collect::<Result<_>>()?;
        for (n, s) in states.iter().enumerate() {
            server.log.push(UploadRecord {
                round,
                client_id: n,
                kind: UploadKind::EncoderStates,
                stage: Stage::Assign,
                scalar_count: s.len(),
            });
        }
        let alpha = server_rng.dirichlet_uniform(clients.len());
        for &a in &alpha {
            digest = digest.rotate_left(7) ^ a.to_bits();
        }
        let refs: Vec<&Tensor> = states.iter().collect();
        sequences.push(mix_and_reconstruct(&head, &refs, &alpha)?);
    }
    server.synthetic = Some(SyntheticDataset {
        sequences,
        round,
        weights_digest: digest,
    });
    server.stage = Stage::Contrast;
    Ok(())
}

// ---------------------------------------------------------------------------
// Contrast stage
// ---------------------------------------------------------------------------

fn sim_or_neg_one(a: &[f64], b: &[f64]) -> f64 {
    crate::tensor::cosine_similarity(a, b).unwrap_or(-1.0)
}

/// Positives/negatives used for this round's local training: the previous
/// round's server assignment, or, on the first Contrast round, the final
/// Assign clustering padded/truncated to `k` by update similarity (falling
/// back to representation similarity when the Assign stage was skipped).
fn training_neighbors(
    server: &ServerState,
    k: usize,
    all_h: &[Vec<f64>],
) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let n = server.n_clients;
    if let Some(last) = server.neighbor_history.last() {
        return (last.positives.clone(), last.negatives.clone());
    }
    let last_clusters = server.cluster_history.last();
    let mut positives = Vec::with_capacity(n);
    let mut negatives = Vec::with_capacity(n);
    for i in 0..n {
        let sim_of = |j: usize| -> f64 {
            match (&server.last_assign_similarity, last_clusters) {
                (Some(sims), Some(_)) => sims[i][j],
                _ => sim_or_neg_one(&all_h[i], &all_h[j]),
            }
        };
        let mut ranked: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        match last_clusters {
            Some(assignment) => {
                // Co-members first (by similarity), then the rest.
                let mine = assignment.assignment[i];
                ranked.sort_by(|&a, &b| {
                    let co_a = assignment.assignment[a] == mine;
                    let co_b = assignment.assignment[b] == mine;
                    co_b.cmp(&co_a)
                        .then(sim_of(b).total_cmp(&sim_of(a)))
                        .then(a.cmp(&b))
                });
            }
            None => {
                ranked.sort_by(|&a, &b| sim_of(b).total_cmp(&sim_of(a)).then(a.cmp(&b)));
            }
        }
        positives.push(ranked[..k].to_vec());
        negatives.push(ranked[k..].to_vec());
    }
    (positives, negatives)
}

/// One Contrast round: representation exchange, local training on the
/// client's own objective plus the contrastive term, encoder-only uploads,
/// neighbor selection, and neighbor aggregation (self included).
pub fn run_contrast_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    cfg: &ModelConfig,
    seed: u64,
    phase: &LocalPhase,
    params: &ContrastRoundParams,
) -> Result<RoundLog> {
    if server.stage != Stage::Contrast {
        return Err(Error::Protocol(format!(
            "contrast round in stage '{}'",
            server.stage.name()
        )));
    }
    let synthetic = server
        .synthetic
        .clone()
        .ok_or_else(|| Error::Protocol("contrast round without a synthetic dataset".into()))?;
    broadcast(server, clients, RegionSet::encoder_only())?;
    let round = server.round;

    // (1) every client computes and uploads its summarized representation;
    // (2) the server redistributes all of them. A missing vector aborts the
    // synchronous round.
    let h_results = exec::map_ref(&*clients, |_, c| {
        summary_representation(&c.params, cfg, &synthetic.sequences)
    });
    let mut all_h = Vec::with_capacity(clients.len());
    for (n, h) in h_results.into_iter().enumerate() {
        let h = h.map_err(|e| Error::Protocol(format!("client {n} produced no representation: {e}")))?;
        server.log.push(UploadRecord {
            round,
            client_id: n,
            kind: UploadKind::Summary,
            stage: Stage::Contrast,
            scalar_count: h.len(),
        });
        all_h.push(h);
    }

    let (pos, neg) = training_neighbors(server, params.k, &all_h);

    // (3) local training with the stale neighbor view; (4) encoder-only
    // uploads.
    let enc_only = RegionSet::encoder_only();
    let results = exec::map_mut(clients, |i, c| -> Result<(LocalStats, ModelUpdate)> {
        let ctx = ContrastCtx {
            synthetic: &synthetic.sequences,
            all_h: &all_h,
            positives: &pos[i],
            negatives: &neg[i],
            tau: params.tau,
            lambda: params.lambda,
            synthetic_batch: params.synthetic_batch,
        };
        let before = c.params.extract(enc_only);
        let stats = local_train(c, cfg, seed, c.dataset.task, "own", phase, Some(&ctx))?;
        let deltas = delta_map(&c.params.extract(enc_only), &before)?;
        Ok((
            stats,
            ModelUpdate {
                client_id: c.id,
                round,
                stage: Stage::Contrast,
                deltas,
                sample_count: c.dataset.sample_count(),
            },
        ))
    });
    let mut stats = Vec::new();
    let mut updates = Vec::new();
    for r in results {
        let (s, u) = r?;
        stats.push(s);
        updates.push(u);
    }
    record_uploads(server, &updates);
    audit_updates(&updates, &|k| server.regions.get(k).copied())?;

    // (5) fresh neighbor selection on this round's updates, then
    // aggregation over self plus positives.
    let assignment = select_neighbors(&updates, params.k, round)?;
    let mut weight_sums = Vec::with_capacity(clients.len());
    for n in 0..clients.len() {
        let mut members = assignment.positives[n].clone();
        members.push(n);
        members.sort_unstable();
        weight_sums.push(apply_weighted(
            &mut server.personalized[n],
            &members,
            &updates,
            &server.samples,
        )?);
    }
    server.neighbor_history.push(assignment.clone());
    server.round += 1;

    Ok(RoundLog {
        round,
        stage: Stage::Contrast.name().into(),
        task: None,
        clients: stats
            .iter()
            .zip(&updates)
            .map(|(s, u)| ClientRoundLog {
                client: u.client_id,
                task: clients[u.client_id].dataset.task.name().into(),
                loss: s.mean_task_loss,
                contrast_loss: s.mean_contrast_loss,
                update_norm: Some(u.norm()),
                samples: u.sample_count,
            })
            .collect(),
        clusters: None,
        positives: Some(assignment.positives.clone()),
        weight_sums: Some(weight_sums),
        uploads: updates.len(),
        upload_bytes: server.log.bytes_in_round(round),
        audit_ok: true,
    })
}

// ---------------------------------------------------------------------------
// Baselines
// ---------------------------------------------------------------------------

/// One FedAvg round over `regions`: clients train their own objectives and
/// the server aggregates each key over its contributors, weighted by sample
/// counts. Every personalized copy receives the same combined delta.
pub fn run_fedavg_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    cfg: &ModelConfig,
    seed: u64,
    phase: &LocalPhase,
    regions: RegionSet,
) -> Result<RoundLog> {
    broadcast(server, clients, regions)?;
    let round = server.round;
    let shared = regions.intersect(RegionSet::backbone());
    let results = exec::map_mut(clients, |_, c| -> Result<(LocalStats, ModelUpdate)> {
        let upload_regions = c.dataset.task.trainable_regions().intersect(shared);
        let before = c.params.extract(upload_regions);
        let stats = local_train(c, cfg, seed, c.dataset.task, "own", phase, None)?;
        let deltas = delta_map(&c.params.extract(upload_regions), &before)?;
        Ok((
            stats,
            ModelUpdate {
                client_id: c.id,
                round,
                stage: Stage::Baseline,
                deltas,
                sample_count: c.dataset.sample_count(),
            },
        ))
    });
    let mut stats = Vec::new();
    let mut updates = Vec::new();
    for r in results {
        let (s, u) = r?;
        stats.push(s);
        updates.push(u);
    }
    record_uploads(server, &updates);
    audit_updates(&updates, &|k| server.regions.get(k).copied())?;

    let keys: BTreeSet<String> = updates
        .iter()
        .flat_map(|u| u.deltas.keys().cloned())
        .collect();
    let mut weight_sums = Vec::new();
    let mut seen_sets: Vec<Vec<usize>> = Vec::new();
    for key in &keys {
        let contributors: Vec<usize> = (0..updates.len())
            .filter(|&i| updates[i].deltas.contains_key(key))
            .collect();
        let total: f64 = contributors.iter().map(|&i| server.samples[i] as f64).sum();
        if total == 0.0 {
            return Err(Error::Protocol("aggregation weights sum to zero".into()));
        }
        let mut wsum = 0.0;
        for &i in &contributors {
            let w = server.samples[i] as f64 / total;
            wsum += w;
            let d = &updates[i].deltas[key];
            for p in server.personalized.iter_mut() {
                p.get_mut(key)
                    .ok_or_else(|| Error::Protocol(format!("aggregating unknown key '{key}'")))?
                    .add_scaled(d, w)?;
            }
        }
        if !seen_sets.contains(&contributors) {
            seen_sets.push(contributors);
            weight_sums.push(wsum);
        }
    }
    server.round += 1;

    Ok(RoundLog {
        round,
        stage: Stage::Baseline.name().into(),
        task: None,
        clients: stats
            .iter()
            .zip(&updates)
            .map(|(s, u)| ClientRoundLog {
                client: u.client_id,
                task: clients[u.client_id].dataset.task.name().into(),
                loss: s.mean_task_loss,
                contrast_loss: None,
                update_norm: Some(u.norm()),
                samples: u.sample_count,
            })
            .collect(),
        clusters: None,
        positives: None,
        weight_sums: Some(weight_sums),
        uploads: updates.len(),
        upload_bytes: server.log.bytes_in_round(round),
        audit_ok: true,
    })
}

/// Local training only; nothing is exchanged.
pub fn run_isolated_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    cfg: &ModelConfig,
    seed: u64,
    phase: &LocalPhase,
) -> Result<RoundLog> {
    let round = server.round;
    let results = exec::map_mut(clients, |_, c| {
        local_train(c, cfg, seed, c.dataset.task, "own", phase, None)
    });
    let mut stats = Vec::new();
    for r in results {
        stats.push(r?);
    }
    server.round += 1;
    Ok(RoundLog {
        round,
        stage: Stage::Baseline.name().into(),
        task: None,
        clients: stats
            .iter()
            .enumerate()
            .map(|(n, s)| ClientRoundLog {
                client: n,
                task: clients[n].dataset.task.name().into(),
                loss: s.mean_task_loss,
                contrast_loss: None,
                update_norm: None,
                samples: clients[n].dataset.sample_count(),
            })
            .collect(),
        clusters: None,
        positives: None,
        weight_sums: None,
        uploads: 0,
        upload_bytes: 0,
        audit_ok: true,
    })
}
