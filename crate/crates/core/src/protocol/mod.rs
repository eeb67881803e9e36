//! The federation state machines: server, clients, the Assign and Contrast
//! stages, and the FedAvg/Isolated baselines.

mod cluster;
mod experiment;
mod rounds;

pub use cluster::{cluster_clients, pairwise_cosine, ClusterAssignment};
pub use experiment::{run_experiment, ClientReport, RunArtifacts, RunReport};
pub use rounds::{
    aggregate_clustered, generate_synthetic_dataset, mix_and_reconstruct, run_assign_round,
    run_contrast_round, run_fedavg_round, run_isolated_round, select_neighbors, ClientRoundLog,
    ClientState, ContrastRoundParams, Federation, LocalPhase, RoundLog, ServerState,
    SyntheticHeadSource,
};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::Region;
use crate::optim::ParamMap;

/// Which stage of the course a message or round belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Stage {
    Assign,
    Contrast,
    Baseline,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Assign => "assign",
            Stage::Contrast => "contrast",
            Stage::Baseline => "baseline",
        }
    }
}

/// Per-parameter deltas for a region subset, the unit of communication.
#[derive(Debug, Clone)]
pub struct ModelUpdate {
    pub client_id: usize,
    pub round: usize,
    pub stage: Stage,
    pub deltas: ParamMap,
    pub sample_count: usize,
}

impl ModelUpdate {
    /// Deltas concatenated in sorted key order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for t in self.deltas.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.deltas
            .values()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scalar_count(&self) -> usize {
        self.deltas.values().map(crate::tensor::Tensor::len).sum()
    }
}

/// Per-round positives/negatives for every client.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborAssignment {
    pub round: usize,
    pub positives: Vec<Vec<usize>>,
    pub negatives: Vec<Vec<usize>>,
    /// Every other client ranked by update similarity, most similar first.
    pub ranked: Vec<Vec<usize>>,
}

/// Server-generated probe sequences broadcast to every client.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub sequences: Vec<Vec<u32>>,
    pub round: usize,
    pub weights_digest: u64,
}

/// What a client is allowed to send to the server. The variants are the
/// privacy boundary: raw instances and private-head parameters have no
/// representation here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum UploadKind {
    ModelUpdate,
    EncoderStates,
    Summary,
}

#[derive(Debug, Clone, Serialize)]
pub struct UploadRecord {
    pub round: usize,
    pub client_id: usize,
    pub kind: UploadKind,
    pub stage: Stage,
    pub scalar_count: usize,
}

/// Append-only record of client-to-server traffic.
#[derive(Debug, Clone, Default)]
pub struct MessageLog {
    pub uploads: Vec<UploadRecord>,
}

impl MessageLog {
    pub fn push(&mut self, record: UploadRecord) {
        self.uploads.push(record);
    }

    pub fn total_bytes(&self) -> u64 {
        self.uploads.iter().map(|u| u.scalar_count as u64 * 8).sum()
    }

    pub fn bytes_in_round(&self, round: usize) -> u64 {
        self.uploads
            .iter()
            .filter(|u| u.round == round)
            .map(|u| u.scalar_count as u64 * 8)
            .sum()
    }

    /// No Contrast-stage upload may precede the last Assign-stage upload.
    pub fn stage_monotonic(&self) -> bool {
        let last_assign = self
            .uploads
            .iter()
            .rposition(|u| u.stage == Stage::Assign);
        let first_contrast = self
            .uploads
            .iter()
            .position(|u| u.stage == Stage::Contrast);
        match (last_assign, first_contrast) {
            (Some(a), Some(c)) => a < c,
            _ => true,
        }
    }
}

/// Structural privacy audit of one round's updates: no private-region keys
/// ever, and Contrast-stage updates restricted to the encoder.
pub fn audit_updates(
    updates: &[ModelUpdate],
    region_of: &dyn Fn(&str) -> Option<Region>,
) -> Result<()> {
    for u in updates {
        for key in u.deltas.keys() {
            let region = region_of(key).ok_or_else(|| {
                Error::Protocol(format!(
                    "client {} uploaded unknown parameter '{key}'",
                    u.client_id
                ))
            })?;
            if region.is_private() {
                return Err(Error::Protocol(format!(
                    "client {} uploaded private-region key '{key}'",
                    u.client_id
                )));
            }
            if u.stage == Stage::Contrast && region != Region::Encoder {
                return Err(Error::Protocol(format!(
                    "contrast-stage update from client {} contains non-encoder key '{key}'",
                    u.client_id
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn update(stage: Stage, key: &str) -> ModelUpdate {
        let mut deltas = ParamMap::new();
        deltas.insert(key.to_string(), Tensor::filled(&[2], 0.5));
        ModelUpdate {
            client_id: 0,
            round: 0,
            stage,
            deltas,
            sample_count: 10,
        }
    }

    fn region_of(key: &str) -> Option<Region> {
        match key {
            "enc.w" => Some(Region::Encoder),
            "dec.w" => Some(Region::Decoder),
            "task.w" => Some(Region::TaskHead),
            _ => None,
        }
    }

    #[test]
    fn audit_rejects_private_and_non_encoder_contrast_keys() {
        assert!(audit_updates(&[update(Stage::Assign, "enc.w")], &region_of).is_ok());
        assert!(audit_updates(&[update(Stage::Assign, "dec.w")], &region_of).is_ok());
        assert!(audit_updates(&[update(Stage::Assign, "task.w")], &region_of).is_err());
        assert!(audit_updates(&[update(Stage::Contrast, "enc.w")], &region_of).is_ok());
        assert!(audit_updates(&[update(Stage::Contrast, "dec.w")], &region_of).is_err());
        assert!(audit_updates(&[update(Stage::Contrast, "unknown")], &region_of).is_err());
    }

    #[test]
    fn stage_monotonicity_check() {
        let mut log = MessageLog::default();
        let rec = |round, stage| UploadRecord {
            round,
            client_id: 0,
            kind: UploadKind::ModelUpdate,
            stage,
            scalar_count: 4,
        };
        log.push(rec(0, Stage::Assign));
        log.push(rec(1, Stage::Assign));
        log.push(rec(2, Stage::Contrast));
        assert!(log.stage_monotonic());
        log.push(rec(3, Stage::Assign));
        assert!(!log.stage_monotonic());
    }

    #[test]
    fn update_flatten_uses_sorted_key_order() {
        let mut deltas = ParamMap::new();
        deltas.insert("b".into(), Tensor::filled(&[1], 2.0));
        deltas.insert("a".into(), Tensor::filled(&[2], 1.0));
        let u = ModelUpdate {
            client_id: 0,
            round: 0,
            stage: Stage::Assign,
            deltas,
            sample_count: 1,
        };
        assert_eq!(u.flatten(), vec![1.0, 1.0, 2.0]);
        assert_eq!(u.scalar_count(), 3);
        assert!((u.norm() - 6.0_f64.sqrt()).abs() < 1e-12);
    }
}
