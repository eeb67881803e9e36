//! Experiment configuration: presets, the flat key=value file format, and
//! layered resolution (defaults <- preset <- file <- flags).

use std::fmt::Write as _;
use std::path::Path;

use crate::corpus::{CorpusPlan, DomainSpec};
use crate::error::{Error, Result};
use crate::model::{vocab, ModelConfig};
use crate::protocol::SyntheticHeadSource;
use crate::tasks::TaskKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Atc,
    AtcNoAssign,
    AtcNoContrast,
    FedAvg,
    Isolated,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Atc => "atc",
            Mode::AtcNoAssign => "atc_no_assign",
            Mode::AtcNoContrast => "atc_no_contrast",
            Mode::FedAvg => "fedavg",
            Mode::Isolated => "isolated",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [
            Mode::Atc,
            Mode::AtcNoAssign,
            Mode::AtcNoContrast,
            Mode::FedAvg,
            Mode::Isolated,
        ]
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown mode '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusParams {
    /// `kind:domain` per client.
    pub clients: Vec<(TaskKind, usize)>,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub zipf_exponent: f64,
    pub preferred_size: usize,
    pub doc_len_min: usize,
    pub doc_len_max: usize,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignParams {
    pub rounds: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub n_clusters: usize,
    pub mask_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastParams {
    pub rounds: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub k: usize,
    pub temperature: f64,
    pub lambda: f64,
    pub synthetic_size: usize,
    pub synthetic_batch: usize,
    pub synthetic_head: SyntheticHeadSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub warmup: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub seed: u64,
    pub preset: String,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub model: ModelConfig,
    pub corpus: CorpusParams,
    pub assign: AssignParams,
    pub contrast: ContrastParams,
    pub optim: OptimParams,
}

fn desk_clients() -> Vec<(TaskKind, usize)> {
    use TaskKind::*;
    vec![
        (Classification, 0),
        (Classification, 1),
        (SpanExtraction, 0),
        (SpanExtraction, 1),
        (SpanExtraction, 1),
        (Generation, 1),
        (Generation, 1),
        (Generation, 0),
    ]
}

impl ExperimentConfig {
    /// Minutes-scale defaults.
    pub fn desk() -> Self {
        ExperimentConfig {
            mode: Mode::Atc,
            seed: 1,
            preset: "desk".into(),
            eval_every: 10,
            checkpoint_every: 0,
            model: ModelConfig::desk(),
            corpus: CorpusParams {
                clients: desk_clients(),
                train_size: 512,
                val_size: 128,
                test_size: 128,
                zipf_exponent: 1.1,
                preferred_size: 40,
                doc_len_min: 8,
                doc_len_max: 24,
                num_classes: 4,
            },
            assign: AssignParams {
                rounds: 30,
                steps: 10,
                batch_size: 8,
                n_clusters: 2,
                mask_ratio: 0.15,
            },
            contrast: ContrastParams {
                rounds: 20,
                steps: 20,
                batch_size: 8,
                k: 3,
                temperature: 1.0,
                lambda: 1.0,
                synthetic_size: 64,
                synthetic_batch: 8,
                synthetic_head: SyntheticHeadSource::AssignAverage,
            },
            optim: OptimParams {
                lr: 5e-4,
                beta1: 0.9,
                beta2: 0.999,
                weight_decay: 0.01,
                eps: 1e-8,
                warmup: 0.1,
            },
        }
    }

    /// The published hyperparameters on the 2-layer/128-hidden backbone;
    /// hours-scale, kept as an opt-in preset.
    pub fn paper_tiny() -> Self {
        let mut cfg = ExperimentConfig::desk();
        cfg.preset = "paper-tiny".into();
        cfg.model = ModelConfig::paper_tiny();
        cfg.assign = AssignParams {
            rounds: 200,
            steps: 50,
            batch_size: 64,
            n_clusters: 5,
            mask_ratio: 0.15,
        };
        cfg.contrast = ContrastParams {
            rounds: 100,
            steps: 200,
            batch_size: 32,
            k: 4,
            temperature: 1.0,
            lambda: 1.0,
            synthetic_size: 64,
            synthetic_batch: 32,
            synthetic_head: SyntheticHeadSource::AssignAverage,
        };
        cfg
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(ExperimentConfig::desk()),
            "paper-tiny" => Ok(ExperimentConfig::paper_tiny()),
            other => Err(Error::Config(format!("unknown preset '{other}'"))),
        }
    }

    pub fn n_clients(&self) -> usize {
        self.corpus.clients.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let n = self.n_clients();
        if n == 0 {
            return Err(Error::Config("corpus.clients must not be empty".into()));
        }
        if self.assign.n_clusters == 0 || self.assign.n_clusters > n {
            return Err(Error::Config(format!(
                "assign.n_clusters {} out of range for {n} clients",
                self.assign.n_clusters
            )));
        }
        if self.contrast.k == 0 || self.contrast.k >= n {
            return Err(Error::Config(format!(
                "contrast.k {} must be in 1..{n}",
                self.contrast.k
            )));
        }
        if self.contrast.temperature <= 0.0 {
            return Err(Error::Config("contrast.temperature must be positive".into()));
        }
        if self.contrast.lambda < 0.0 {
            return Err(Error::Config("contrast.lambda must be non-negative".into()));
        }
        if self.contrast.synthetic_size == 0 || self.contrast.synthetic_batch == 0 {
            return Err(Error::Config("synthetic sizes must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.optim.warmup) {
            return Err(Error::Config("optim.warmup must lie in [0, 1)".into()));
        }
        if self.assign.mask_ratio <= 0.0 || self.assign.mask_ratio > 1.0 {
            return Err(Error::Config("assign.mask_ratio must lie in (0, 1]".into()));
        }
        if self.assign.batch_size == 0 || self.contrast.batch_size == 0 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        self.corpus_plan()?.validate()
    }

    /// Expands the corpus knobs into concrete domain specs: evenly spaced
    /// preferred-token windows over the content vocabulary.
    pub fn corpus_plan(&self) -> Result<CorpusPlan> {
        let content = self.model.vocab_size - vocab::FIRST_CONTENT as usize;
        let n_domains = self
            .corpus
            .clients
            .iter()
            .map(|(_, d)| d + 1)
            .max()
            .unwrap_or(0)
            .max(2);
        if self.corpus.preferred_size > content {
            return Err(Error::Config(format!(
                "corpus.preferred_size {} exceeds the {content} content tokens",
                self.corpus.preferred_size
            )));
        }
        let span = content - self.corpus.preferred_size;
        let domains = (0..n_domains)
            .map(|d| {
                let start = if n_domains == 1 { 0 } else { d * span / (n_domains - 1) };
                DomainSpec {
                    id: d,
                    zipf_exponent: self.corpus.zipf_exponent,
                    preferred: (0..self.corpus.preferred_size)
                        .map(|i| vocab::FIRST_CONTENT + (start + i) as u32)
                        .collect(),
                    len_range: (self.corpus.doc_len_min, self.corpus.doc_len_max),
                }
            })
            .collect();
        Ok(CorpusPlan {
            domains,
            clients: self.corpus.clients.clone(),
            train_size: self.corpus.train_size,
            val_size: self.corpus.val_size,
            test_size: self.corpus.test_size,
            num_classes: self.corpus.num_classes,
            max_seq_len: self.model.max_seq_len,
            vocab_size: self.model.vocab_size,
        })
    }

    /// Applies one `section.key = value` assignment.
    pub fn apply_kv(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let unknown = || Error::Config(format!("unknown config key '{section}.{key}'"));
        let bad = |e: String| Error::Config(format!("invalid value for '{section}.{key}': {e}"));
        macro_rules! num {
            () => {
                value.parse().map_err(|e| bad(format!("{e}")))?
            };
        }
        match section {
            "experiment" => match key {
                "mode" => self.mode = Mode::parse(value)?,
                "seed" => self.seed = num!(),
                "preset" => {} // handled during layering
                "eval_every" => self.eval_every = num!(),
                "checkpoint_every" => self.checkpoint_every = num!(),
                _ => return Err(unknown()),
            },
            "model" => match key {
                "content_tokens" => {
                    let content: usize = num!();
                    self.model.vocab_size = vocab::FIRST_CONTENT as usize + content;
                }
                "d_model" => self.model.d_model = num!(),
                "num_heads" => self.model.num_heads = num!(),
                "num_layers" => self.model.num_layers = num!(),
                "ffn_dim" => self.model.ffn_dim = num!(),
                "max_seq_len" => self.model.max_seq_len = num!(),
                "summary_dim" => self.model.mlp_summary_dim = num!(),
                _ => return Err(unknown()),
            },
            "corpus" => match key {
                "clients" => {
                    let mut clients = Vec::new();
                    for part in value.split(',') {
                        let part = part.trim();
                        if part.is_empty() {
                            continue;
                        }
                        let (kind, dom) = part.split_once(':').ok_or_else(|| {
                            bad(format!("expected kind:domain, got '{part}'"))
                        })?;
                        clients.push((
                            TaskKind::parse(kind).map_err(|e| bad(e.to_string()))?,
                            dom.parse().map_err(|e| bad(format!("{e}")))?,
                        ));
                    }
                    self.corpus.clients = clients;
                }
                "train_size" => self.corpus.train_size = num!(),
                "val_size" => self.corpus.val_size = num!(),
                "test_size" => self.corpus.test_size = num!(),
                "zipf_exponent" => self.corpus.zipf_exponent = num!(),
                "preferred_size" => self.corpus.preferred_size = num!(),
                "doc_len_min" => self.corpus.doc_len_min = num!(),
                "doc_len_max" => self.corpus.doc_len_max = num!(),
                "num_classes" => self.corpus.num_classes = num!(),
                _ => return Err(unknown()),
            },
            "assign" => match key {
                "rounds" => self.assign.rounds = num!(),
                "steps" => self.assign.steps = num!(),
                "batch_size" => self.assign.batch_size = num!(),
                "n_clusters" => self.assign.n_clusters = num!(),
                "mask_ratio" => self.assign.mask_ratio = num!(),
                _ => return Err(unknown()),
            },
            "contrast" => match key {
                "rounds" => self.contrast.rounds = num!(),
                "steps" => self.contrast.steps = num!(),
                "batch_size" => self.contrast.batch_size = num!(),
                "k" => self.contrast.k = num!(),
                "temperature" => self.contrast.temperature = num!(),
                "lambda" => self.contrast.lambda = num!(),
                "synthetic_size" => self.contrast.synthetic_size = num!(),
                "synthetic_batch" => self.contrast.synthetic_batch = num!(),
                "synthetic_head" => {
                    self.contrast.synthetic_head = match value {
                        "assign" => SyntheticHeadSource::AssignAverage,
                        "fresh" => SyntheticHeadSource::Fresh,
                        other => return Err(bad(format!("expected assign|fresh, got '{other}'"))),
                    }
                }
                _ => return Err(unknown()),
            },
            "optim" => match key {
                "lr" => self.optim.lr = num!(),
                "beta1" => self.optim.beta1 = num!(),
                "beta2" => self.optim.beta2 = num!(),
                "weight_decay" => self.optim.weight_decay = num!(),
                "eps" => self.optim.eps = num!(),
                "warmup" => self.optim.warmup = num!(),
                _ => return Err(unknown()),
            },
            _ => return Err(Error::Config(format!("unknown config section '[{section}]'"))),
        }
        Ok(())
    }

    /// Full key=value snapshot; parsing it back reproduces the config.
    pub fn resolved_text(&self) -> String {
        let mut s = String::new();
        let clients = self
            .corpus
            .clients
            .iter()
            .map(|(k, d)| format!("{}:{}", k.name(), d))
            .collect::<Vec<_>>()
            .join(",");
        let head = match self.contrast.synthetic_head {
            SyntheticHeadSource::AssignAverage => "assign",
            SyntheticHeadSource::Fresh => "fresh",
        };
        let _ = write!(
            s,
            "[experiment]\n\
             mode = {}\n\
             seed = {}\n\
             eval_every = {}\n\
             checkpoint_every = {}\n\
             \n[model]\n\
             content_tokens = {}\n\
             d_model = {}\n\
             num_heads = {}\n\
             num_layers = {}\n\
             ffn_dim = {}\n\
             max_seq_len = {}\n\
             summary_dim = {}\n\
             \n[corpus]\n\
             clients = {}\n\
             train_size = {}\n\
             val_size = {}\n\
             test_size = {}\n\
             zipf_exponent = {}\n\
             preferred_size = {}\n\
             doc_len_min = {}\n\
             doc_len_max = {}\n\
             num_classes = {}\n\
             \n[assign]\n\
             rounds = {}\n\
             steps = {}\n\
             batch_size = {}\n\
             n_clusters = {}\n\
             mask_ratio = {}\n\
             \n[contrast]\n\
             rounds = {}\n\
             steps = {}\n\
             batch_size = {}\n\
             k = {}\n\
             temperature = {}\n\
             lambda = {}\n\
             synthetic_size = {}\n\
             synthetic_batch = {}\n\
             synthetic_head = {}\n\
             \n[optim]\n\
             lr = {}\n\
             beta1 = {}\n\
             beta2 = {}\n\
             weight_decay = {}\n\
             eps = {}\n\
             warmup = {}\n",
            self.mode.name(),
            self.seed,
            self.eval_every,
            self.checkpoint_every,
            self.model.vocab_size - vocab::FIRST_CONTENT as usize,
            self.model.d_model,
            self.model.num_heads,
            self.model.num_layers,
            self.model.ffn_dim,
            self.model.max_seq_len,
            self.model.mlp_summary_dim,
            clients,
            self.corpus.train_size,
            self.corpus.val_size,
            self.corpus.test_size,
            self.corpus.zipf_exponent,
            self.corpus.preferred_size,
            self.corpus.doc_len_min,
            self.corpus.doc_len_max,
            self.corpus.num_classes,
            self.assign.rounds,
            self.assign.steps,
            self.assign.batch_size,
            self.assign.n_clusters,
            self.assign.mask_ratio,
            self.contrast.rounds,
            self.contrast.steps,
            self.contrast.batch_size,
            self.contrast.k,
            self.contrast.temperature,
            self.contrast.lambda,
            self.contrast.synthetic_size,
            self.contrast.synthetic_batch,
            head,
            self.optim.lr,
            self.optim.beta1,
            self.optim.beta2,
            self.optim.weight_decay,
            self.optim.eps,
            self.optim.warmup,
        );
        s
    }
}

/// CLI-level overrides applied after the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub seed: Option<u64>,
    pub preset: Option<String>,
}

fn parse_kv_text(text: &str) -> Result<Vec<(String, String, String)>> {
    let mut section = String::new();
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| Error::Parse(format!("line {}: malformed section header", lineno + 1)))?;
            section = name.trim().to_string();
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("line {}: expected key = value", lineno + 1)))?;
        if section.is_empty() {
            return Err(Error::Parse(format!(
                "line {}: key '{}' appears before any [section]",
                lineno + 1,
                key.trim()
            )));
        }
        out.push((section.clone(), key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

/// Layered resolution: desk defaults, then the preset (from `--preset` or
/// the file's `experiment.preset`), then the file's keys, then flags.
/// Unknown keys are rejected by name.
pub fn parse_config(path: Option<&Path>, overrides: &Overrides) -> Result<ExperimentConfig> {
    let kvs = match path {
        Some(p) => parse_kv_text(&std::fs::read_to_string(p)?)?,
        None => Vec::new(),
    };
    let preset_name = overrides
        .preset
        .clone()
        .or_else(|| {
            kvs.iter()
                .find(|(s, k, _)| s == "experiment" && k == "preset")
                .map(|(_, _, v)| v.clone())
        })
        .unwrap_or_else(|| "desk".into());
    let mut cfg = ExperimentConfig::preset(&preset_name)?;
    for (section, key, value) in &kvs {
        cfg.apply_kv(section, key, value)?;
    }
    if let Some(mode) = overrides.mode {
        cfg.mode = mode;
    }
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}
