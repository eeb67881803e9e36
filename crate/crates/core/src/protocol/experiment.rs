//! Full-course orchestration: stage sequencing, evaluation cadence, and
//! artifact emission (round logs, metrics, analysis matrices, checkpoints).

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{ExperimentConfig, Mode};
use crate::corpus::build_corpus;
use crate::error::{Error, Result};
use crate::eval::{evaluate_client, primary_metric, MetricReport};
use crate::model::RegionSet;
use crate::optim::{AdamHyper, LrSchedule};
use crate::protocol::rounds::{
    generate_synthetic_dataset, run_assign_round, run_contrast_round, run_fedavg_round,
    run_isolated_round, ContrastRoundParams, Federation, LocalPhase, RoundLog,
};
use crate::protocol::NeighborAssignment;
use crate::tasks::TaskKind;

#[derive(Debug, Clone, Serialize)]
pub struct ClientReport {
    pub client: usize,
    pub task: String,
    pub domain: usize,
    pub metrics: BTreeMap<String, f64>,
}

/// Final summary written to `report.json`.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub mode: String,
    pub seed: u64,
    pub rounds_completed: usize,
    pub exchanged_bytes: u64,
    pub per_client: Vec<ClientReport>,
    /// Mean primary metric per task kind plus the unweighted overall mean.
    pub aggregate: BTreeMap<String, f64>,
}

#[derive(Debug)]
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub report: RunReport,
    pub federation: Federation,
    pub round_logs: Vec<RoundLog>,
}

struct Artifacts {
    rounds: BufWriter<fs::File>,
    metrics: BufWriter<fs::File>,
    round_logs: Vec<RoundLog>,
    cooc: Vec<Vec<f64>>,
    neighbor_freq: Vec<Vec<f64>>,
    rank_rows: Vec<String>,
}

impl Artifacts {
    fn new(out_dir: &Path, n: usize) -> Result<Self> {
        let rounds = BufWriter::new(fs::File::create(out_dir.join("rounds.jsonl"))?);
        let mut metrics = BufWriter::new(fs::File::create(out_dir.join("metrics.csv"))?);
        writeln!(metrics, "round,client,task,metric,value")?;
        Ok(Artifacts {
            rounds,
            metrics,
            round_logs: Vec::new(),
            cooc: vec![vec![0.0; n]; n],
            neighbor_freq: vec![vec![0.0; n]; n],
            rank_rows: Vec::new(),
        })
    }

    fn push_round(&mut self, log: RoundLog) -> Result<()> {
        let line = serde_json::to_string(&log)
            .map_err(|e| Error::Usage(format!("round log serialization: {e}")))?;
        writeln!(self.rounds, "{line}")?;
        self.round_logs.push(log);
        Ok(())
    }

    fn push_metrics(&mut self, reports: &[MetricReport]) -> Result<()> {
        for r in reports {
            for (name, value) in &r.metrics {
                writeln!(
                    self.metrics,
                    "{},{},{},{}/{},{}",
                    r.round,
                    r.client_id,
                    r.task.name(),
                    r.split,
                    name,
                    value
                )?;
            }
        }
        Ok(())
    }

    fn record_clusters(&mut self, assignment: &[usize]) {
        let n = assignment.len();
        for i in 0..n {
            let members: Vec<usize> = (0..n).filter(|&j| assignment[j] == assignment[i]).collect();
            let share = 1.0 / members.len() as f64;
            for &j in &members {
                self.cooc[i][j] += share;
            }
        }
    }

    fn record_neighbors(&mut self, round: usize, assignment: &NeighborAssignment, kinds: &[TaskKind]) {
        let n = kinds.len();
        for i in 0..n {
            for &j in &assignment.positives[i] {
                self.neighbor_freq[i][j] += 1.0;
            }
            let same: Vec<usize> = (0..n).filter(|&j| j != i && kinds[j] == kinds[i]).collect();
            if same.is_empty() {
                continue;
            }
            let captured = same
                .iter()
                .filter(|j| assignment.positives[i].contains(j))
                .count();
            let frac = captured as f64 / same.len() as f64;
            let mean_rank: f64 = same
                .iter()
                .map(|j| {
                    1.0 + assignment.ranked[i].iter().position(|r| r == j).unwrap_or(n - 1) as f64
                })
                .sum::<f64>()
                / same.len() as f64;
            self.rank_rows.push(format!(
                "{round},{i},{},{frac},{mean_rank}",
                kinds[i].name()
            ));
        }
    }
}

fn write_matrix(path: &Path, matrix: &[Vec<f64>]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    let n = matrix.len();
    let header: Vec<String> = (0..n).map(|i| i.to_string()).collect();
    writeln!(w, "client,{}", header.join(","))?;
    for (i, row) in matrix.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{i},{}", cells.join(","))?;
    }
    Ok(())
}

fn evaluate_all(fed: &Federation, round: usize, split: &str) -> Result<Vec<MetricReport>> {
    fed.clients
        .iter()
        .map(|c| {
            evaluate_client(
                &c.params,
                &fed.cfg,
                c.dataset.task,
                c.dataset.split(split)?,
                c.id,
                round,
                split,
            )
        })
        .collect()
}

fn aggregate_scores(reports: &[MetricReport], kinds: &[TaskKind]) -> BTreeMap<String, f64> {
    let mut by_kind: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut all = Vec::new();
    for (r, kind) in reports.iter().zip(kinds) {
        let value = r.metrics[primary_metric(*kind)];
        by_kind.entry(kind.name()).or_default().push(value);
        all.push(value);
    }
    let mut out: BTreeMap<String, f64> = by_kind
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.iter().sum::<f64>() / v.len() as f64))
        .collect();
    out.insert("overall".into(), all.iter().sum::<f64>() / all.len() as f64);
    out
}

fn checkpoint(fed: &Federation, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for c in &fed.clients {
        c.params.save(&dir.join(format!("client{}.ckpt", c.id)))?;
    }
    Ok(())
}

/// Runs one full course and writes every artifact into `out_dir`.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<RunArtifacts> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("resolved_config.txt"), config.resolved_text())?;
    // The only file carrying wall-clock information.
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    fs::write(
        out_dir.join("run_meta.txt"),
        format!("created_unix_secs = {now}\nmode = {}\n", config.mode.name()),
    )?;

    let datasets = build_corpus(&config.corpus_plan()?, config.seed)?;
    let kinds: Vec<TaskKind> = datasets.iter().map(|d| d.task).collect();
    let mut fed = Federation::new(config.model, config.seed, datasets, config.corpus.num_classes)?;
    let mut artifacts = Artifacts::new(out_dir, fed.clients.len())?;

    let hyper = AdamHyper {
        beta1: config.optim.beta1,
        beta2: config.optim.beta2,
        eps: config.optim.eps,
        weight_decay: config.optim.weight_decay,
    };
    let assign_schedule = LrSchedule::new(
        config.optim.lr,
        (config.assign.rounds * config.assign.steps) as u64,
        config.optim.warmup,
    );
    let contrast_schedule = LrSchedule::new(
        config.optim.lr,
        (config.contrast.rounds * config.contrast.steps) as u64,
        config.optim.warmup,
    );
    let assign_phase = |r: usize| LocalPhase {
        steps: config.assign.steps,
        batch_size: config.assign.batch_size,
        schedule: assign_schedule,
        hyper,
        mask_ratio: config.assign.mask_ratio,
        schedule_round: r,
        stream_round: r,
    };
    let contrast_phase = |r: usize, stream_offset: usize| LocalPhase {
        steps: config.contrast.steps,
        batch_size: config.contrast.batch_size,
        schedule: contrast_schedule,
        hyper,
        mask_ratio: config.assign.mask_ratio,
        schedule_round: r,
        stream_round: stream_offset + r,
    };
    let contrast_params = ContrastRoundParams {
        k: config.contrast.k,
        tau: config.contrast.temperature,
        lambda: config.contrast.lambda,
        synthetic_batch: config.contrast.synthetic_batch,
    };

    let mut completed = 0usize;
    macro_rules! after_round {
        ($fed:expr, $artifacts:expr) => {
            completed += 1;
            if config.eval_every > 0 && completed % config.eval_every == 0 {
                let reports = evaluate_all($fed, $fed.server.round, "val")?;
                $artifacts.push_metrics(&reports)?;
            }
            if config.checkpoint_every > 0 && completed % config.checkpoint_every == 0 {
                checkpoint($fed, &out_dir.join(format!("ckpt_round{completed}")))?;
            }
        };
    }

    // The assigned-task schedule is a strict round-robin starting at MLM.
    let assign_task = |r: usize| if r % 2 == 0 { TaskKind::Mlm } else { TaskKind::Dr };

    match config.mode {
        Mode::Atc | Mode::AtcNoContrast => {
            for r in 0..config.assign.rounds {
                let log = run_assign_round(
                    &mut fed.server,
                    &mut fed.clients,
                    &fed.cfg,
                    fed.seed,
                    assign_task(r),
                    &assign_phase(r),
                    config.assign.n_clusters,
                )?;
                if let Some(clusters) = &log.clusters {
                    artifacts.record_clusters(clusters);
                }
                artifacts.push_round(log)?;
                after_round!(&fed, artifacts);
            }
            if config.mode == Mode::Atc {
                generate_synthetic_dataset(
                    &mut fed.server,
                    &fed.clients,
                    &fed.cfg,
                    fed.seed,
                    config.contrast.synthetic_size,
                    config.contrast.synthetic_head,
                )?;
                for r in 0..config.contrast.rounds {
                    let log = run_contrast_round(
                        &mut fed.server,
                        &mut fed.clients,
                        &fed.cfg,
                        fed.seed,
                        &contrast_phase(r, 0),
                        &contrast_params,
                    )?;
                    let assignment = fed
                        .server
                        .neighbor_history
                        .last()
                        .expect("contrast round records neighbors");
                    artifacts.record_neighbors(log.round, assignment, &kinds);
                    artifacts.push_round(log)?;
                    after_round!(&fed, artifacts);
                }
            } else {
                // Contrast replaced by FedAvg restricted to the encoder.
                for r in 0..config.contrast.rounds {
                    let log = run_fedavg_round(
                        &mut fed.server,
                        &mut fed.clients,
                        &fed.cfg,
                        fed.seed,
                        &contrast_phase(r, 0),
                        RegionSet::encoder_only(),
                    )?;
                    artifacts.push_round(log)?;
                    after_round!(&fed, artifacts);
                }
            }
        }
        Mode::AtcNoAssign => {
            generate_synthetic_dataset(
                &mut fed.server,
                &fed.clients,
                &fed.cfg,
                fed.seed,
                config.contrast.synthetic_size,
                config.contrast.synthetic_head,
            )?;
            for r in 0..config.contrast.rounds {
                let log = run_contrast_round(
                    &mut fed.server,
                    &mut fed.clients,
                    &fed.cfg,
                    fed.seed,
                    &contrast_phase(r, 0),
                    &contrast_params,
                )?;
                let assignment = fed
                    .server
                    .neighbor_history
                    .last()
                    .expect("contrast round records neighbors");
                artifacts.record_neighbors(log.round, assignment, &kinds);
                artifacts.push_round(log)?;
                after_round!(&fed, artifacts);
            }
        }
        Mode::FedAvg | Mode::Isolated => {
            // Same local-step budget as the two-stage course: an assign-shaped
            // phase followed by a contrast-shaped phase, own objectives
            // throughout.
            fed.server.stage = crate::protocol::Stage::Baseline;
            for r in 0..config.assign.rounds {
                let log = if config.mode == Mode::FedAvg {
                    run_fedavg_round(
                        &mut fed.server,
                        &mut fed.clients,
                        &fed.cfg,
                        fed.seed,
                        &LocalPhase {
                            steps: config.assign.steps,
                            batch_size: config.assign.batch_size,
                            schedule: assign_schedule,
                            hyper,
                            mask_ratio: config.assign.mask_ratio,
                            schedule_round: r,
                            stream_round: r,
                        },
                        RegionSet::backbone(),
                    )?
                } else {
                    run_isolated_round(
                        &mut fed.server,
                        &mut fed.clients,
                        &fed.cfg,
                        fed.seed,
                        &LocalPhase {
                            steps: config.assign.steps,
                            batch_size: config.assign.batch_size,
                            schedule: assign_schedule,
                            hyper,
                            mask_ratio: config.assign.mask_ratio,
                            schedule_round: r,
                            stream_round: r,
                        },
                    )?
                };
                artifacts.push_round(log)?;
                after_round!(&fed, artifacts);
            }
            for r in 0..config.contrast.rounds {
                let phase = contrast_phase(r, config.assign.rounds);
                let log = if config.mode == Mode::FedAvg {
                    run_fedavg_round(
                        &mut fed.server,
                        &mut fed.clients,
                        &fed.cfg,
                        fed.seed,
                        &phase,
                        RegionSet::backbone(),
                    )?
                } else {
                    run_isolated_round(&mut fed.server, &mut fed.clients, &fed.cfg, fed.seed, &phase)?
                };
                artifacts.push_round(log)?;
                after_round!(&fed, artifacts);
            }
        }
    }

    if !fed.server.log.stage_monotonic() {
        return Err(Error::Protocol("contrast upload preceded an assign upload".into()));
    }

    // Final test-split evaluation and the summary report.
    let final_reports = evaluate_all(&fed, fed.server.round, "test")?;
    artifacts.push_metrics(&final_reports)?;
    let aggregate = aggregate_scores(&final_reports, &kinds);
    let report = RunReport {
        mode: config.mode.name().into(),
        seed: config.seed,
        rounds_completed: completed,
        exchanged_bytes: fed.server.log.total_bytes(),
        per_client: final_reports
            .iter()
            .map(|r| ClientReport {
                client: r.client_id,
                task: r.task.name().into(),
                domain: fed.clients[r.client_id].dataset.domain,
                metrics: r.metrics.clone(),
            })
            .collect(),
        aggregate,
    };
    fs::write(
        out_dir.join("report.json"),
        serde_json::to_string_pretty(&report).map_err(|e| Error::Usage(e.to_string()))?,
    )?;

    if matches!(config.mode, Mode::Atc | Mode::AtcNoContrast) {
        write_matrix(&out_dir.join("cooccurrence.csv"), &artifacts.cooc)?;
    }
    if matches!(config.mode, Mode::Atc | Mode::AtcNoAssign) {
        write_matrix(&out_dir.join("neighbors.csv"), &artifacts.neighbor_freq)?;
        let mut w = BufWriter::new(fs::File::create(out_dir.join("neighbor_ranks.csv"))?);
        writeln!(w, "round,client,task,frac_same_kind,mean_rank_same_kind")?;
        for row in &artifacts.rank_rows {
            writeln!(w, "{row}")?;
        }
    }
    checkpoint(&fed, &out_dir.join("final_models"))?;

    artifacts.rounds.flush()?;
    artifacts.metrics.flush()?;
    let round_logs = artifacts.round_logs;
    Ok(RunArtifacts {
        out_dir: out_dir.to_path_buf(),
        report,
        federation: fed,
        round_logs,
    })
}
