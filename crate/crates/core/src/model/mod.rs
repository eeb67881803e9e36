//! The aligned encoder-decoder backbone with per-client private heads.
//!
//! Parameters live in a flat key -> tensor map where every key carries a
//! region label. The encoder, decoder and MLM-head regions form the aligned
//! backbone (identical keys and shapes on every client); the task head and
//! contrast head are private.

mod backbone;
mod heads;
mod layers;
mod summary;

pub use backbone::{decode, decode_states, encode, pad_sequence, EncoderStates};
pub(crate) use backbone::{
    decode_backward, decode_states_with_cache, encode_backward, encode_with_cache,
    reconstruction_logits_cached,
};
pub use heads::mlm_head_forward;
pub(crate) use heads::{
    classifier_with_cache, generator_with_cache, linear_head_backward, mlm_head_backward,
    mlm_head_with_cache, span_head_with_cache,
};
pub use summary::summary_representation;
pub(crate) use summary::summary_backward;

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::ParamMap;
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Reserved token ids; content tokens start at [`vocab::FIRST_CONTENT`].
pub mod vocab {
    pub const PAD: u32 = 0;
    pub const MASK: u32 = 1;
    pub const BOS: u32 = 2;
    pub const EOS: u32 = 3;
    pub const SEP: u32 = 4;
    pub const FIRST_CONTENT: u32 = 5;

    pub fn is_special(id: u32) -> bool {
        id < FIRST_CONTENT
    }
}

/// Parameter region labels; the first three form the aligned backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Region {
    Encoder,
    Decoder,
    MlmHead,
    TaskHead,
    ContrastHead,
}

impl Region {
    pub const ALL: [Region; 5] = [
        Region::Encoder,
        Region::Decoder,
        Region::MlmHead,
        Region::TaskHead,
        Region::ContrastHead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Region::Encoder => "encoder",
            Region::Decoder => "decoder",
            Region::MlmHead => "mlm_head",
            Region::TaskHead => "task_head",
            Region::ContrastHead => "contrast_head",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Region::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown region '{s}'")))
    }

    /// Private regions are never sent to or aggregated by the server.
    pub fn is_private(self) -> bool {
        matches!(self, Region::TaskHead | Region::ContrastHead)
    }

    fn bit(self) -> u8 {
        match self {
            Region::Encoder => 1,
            Region::Decoder => 2,
            Region::MlmHead => 4,
            Region::TaskHead => 8,
            Region::ContrastHead => 16,
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Small set of regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RegionSet(u8);

impl RegionSet {
    pub const EMPTY: RegionSet = RegionSet(0);

    pub fn of(regions: &[Region]) -> Self {
        let mut s = RegionSet(0);
        for &r in regions {
            s.0 |= r.bit();
        }
        s
    }

    pub fn encoder_only() -> Self {
        RegionSet::of(&[Region::Encoder])
    }

    pub fn backbone() -> Self {
        RegionSet::of(&[Region::Encoder, Region::Decoder, Region::MlmHead])
    }

    pub fn contains(self, r: Region) -> bool {
        self.0 & r.bit() != 0
    }

    pub fn union(self, other: RegionSet) -> Self {
        RegionSet(self.0 | other.0)
    }

    pub fn intersect(self, other: RegionSet) -> Self {
        RegionSet(self.0 & other.0)
    }

    pub fn iter(self) -> impl Iterator<Item = Region> {
        Region::ALL.into_iter().filter(move |r| self.contains(*r))
    }
}

/// Backbone dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub mlp_summary_dim: usize,
}

impl ModelConfig {
    /// Desk-scale default: runs a full course in minutes on a laptop CPU.
    pub fn desk() -> Self {
        ModelConfig {
            vocab_size: vocab::FIRST_CONTENT as usize + 64,
            d_model: 32,
            num_heads: 2,
            num_layers: 2,
            ffn_dim: 64,
            max_seq_len: 32,
            mlp_summary_dim: 32,
        }
    }

    /// Smallest config that still exercises every code path; used by the
    /// gradient-verification suite.
    pub fn micro() -> Self {
        ModelConfig {
            vocab_size: 16,
            d_model: 8,
            num_heads: 1,
            num_layers: 1,
            ffn_dim: 16,
            max_seq_len: 8,
            mlp_summary_dim: 4,
        }
    }

    /// The 2-layer / 128-hidden shape, kept optional because it is an order
    /// of magnitude slower than the desk config.
    pub fn paper_tiny() -> Self {
        ModelConfig {
            vocab_size: vocab::FIRST_CONTENT as usize + 64,
            d_model: 128,
            num_heads: 2,
            num_layers: 2,
            ffn_dim: 512,
            max_seq_len: 32,
            mlp_summary_dim: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0
            || self.num_heads == 0
            || self.num_layers == 0
            || self.ffn_dim == 0
            || self.max_seq_len == 0
            || self.mlp_summary_dim == 0
            || self.vocab_size <= vocab::FIRST_CONTENT as usize
        {
            return Err(Error::Config("model dimensions must be at least 1".into()));
        }
        if self.d_model % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }
}

/// Which private task head a client carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskHead {
    Classifier { classes: usize },
    SpanExtractor,
    Generator,
}

/// Named parameter tensors, each labeled with exactly one region.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    entries: BTreeMap<String, (Region, Tensor)>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, region: Region, tensor: Tensor) {
        self.entries.insert(key.into(), (region, tensor));
    }

    pub fn get(&self, key: &str) -> Option<&Tensor> {
        self.entries.get(key).map(|(_, t)| t)
    }

    /// Lookup that panics on a missing key; internal call sites only use
    /// keys created by the init functions.
    pub(crate) fn tensor(&self, key: &str) -> &Tensor {
        &self
            .entries
            .get(key)
            .unwrap_or_else(|| panic!("missing parameter '{key}'"))
            .1
    }

    pub fn region_of(&self, key: &str) -> Option<Region> {
        self.entries.get(key).map(|(r, _)| *r)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|(_, t)| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, Region, &Tensor)> {
        self.entries.iter().map(|(k, (r, t))| (k, *r, t))
    }

    pub fn keys_in(&self, regions: RegionSet) -> impl Iterator<Item = &String> {
        self.entries
            .iter()
            .filter(move |(_, (r, _))| regions.contains(*r))
            .map(|(k, _)| k)
    }

    /// Clones the tensors of the given regions into a plain map.
    pub fn extract(&self, regions: RegionSet) -> ParamMap {
        self.entries
            .iter()
            .filter(|(_, (r, _))| regions.contains(*r))
            .map(|(k, (_, t))| (k.clone(), t.clone()))
            .collect()
    }

    /// Overwrites existing tensors with the values in `values`; every key
    /// must already exist with a matching shape.
    pub fn assign(&mut self, values: &ParamMap) -> Result<()> {
        for (k, v) in values {
            let (_, t) = self
                .entries
                .get_mut(k)
                .ok_or_else(|| Error::Usage(format!("assign to unknown parameter '{k}'")))?;
            if t.shape() != v.shape() {
                return Err(Error::dimension(
                    "ModelParams::assign",
                    format!("'{k}': {:?} vs {:?}", t.shape(), v.shape()),
                ));
            }
            *t = v.clone();
        }
        Ok(())
    }

    /// A copy of self with tensor values replaced from `values` (shape-checked),
    /// used by the finite-difference harness.
    pub fn with_values(&self, values: &ParamMap) -> Result<ModelParams> {
        let mut out = self.clone();
        out.assign(values)?;
        Ok(out)
    }

    /// `self - before` over the given regions, in sorted key order.
    pub fn delta_from(&self, before: &ModelParams, regions: RegionSet) -> Result<ParamMap> {
        let mut out = ParamMap::new();
        for (k, (r, t)) in &self.entries {
            if !regions.contains(*r) {
                continue;
            }
            let prev = before
                .get(k)
                .ok_or_else(|| Error::Usage(format!("delta against missing key '{k}'")))?;
            out.insert(k.clone(), t.sub(prev)?);
        }
        Ok(out)
    }

    /// Adds `scale * delta[k]` to every named tensor.
    pub fn apply_delta(&mut self, delta: &ParamMap, scale: f64) -> Result<()> {
        for (k, d) in delta {
            let (_, t) = self
                .entries
                .get_mut(k)
                .ok_or_else(|| Error::Usage(format!("delta for unknown parameter '{k}'")))?;
            t.add_scaled(d, scale)?;
        }
        Ok(())
    }

    /// Sorted (key, region, shape) listing of the given regions; two clients
    /// are aligned iff their backbone signatures are equal.
    pub fn signature(&self, regions: RegionSet) -> Vec<(String, Region, Vec<usize>)> {
        self.entries
            .iter()
            .filter(|(_, (r, _))| regions.contains(*r))
            .map(|(k, (r, t))| (k.clone(), *r, t.shape().to_vec()))
            .collect()
    }

    /// Writes a text checkpoint: one `key region shape values...` record per
    /// line. f64 values render in shortest round-trip form, so reloading is
    /// bit-exact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        for (k, (r, t)) in &self.entries {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            write!(w, "{k}\t{}\t{}", r.name(), dims.join(","))?;
            for v in t.data() {
                write!(w, " {v}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ModelParams> {
        let file = std::fs::File::open(path)?;
        let reader = BufReader::new(file);
        let mut out = ModelParams::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let mut fields = line.splitn(3, '\t');
            let key = fields
                .next()
                .ok_or_else(|| Error::Parse(format!("checkpoint line {}", lineno + 1)))?;
            let region = Region::parse(
                fields
                    .next()
                    .ok_or_else(|| Error::Parse(format!("checkpoint line {}", lineno + 1)))?,
            )?;
            let rest = fields
                .next()
                .ok_or_else(|| Error::Parse(format!("checkpoint line {}", lineno + 1)))?;
            let mut parts = rest.split(' ');
            let shape: Vec<usize> = parts
                .next()
                .unwrap_or("")
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<usize>()
                        .map_err(|e| Error::Parse(format!("shape '{s}': {e}")))
                })
                .collect::<Result<_>>()?;
            let data: Vec<f64> = parts
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|e| Error::Parse(format!("value '{s}': {e}")))
                })
                .collect::<Result<_>>()?;
            out.insert(key, region, Tensor::new(shape, data)?);
        }
        Ok(out)
    }
}

fn trunc_normal_tensor(shape: &[usize], rng: &mut RngStream) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.truncated_normal(0.02)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data agree by construction")
}

fn init_weight(params: &mut ModelParams, key: &str, region: Region, shape: &[usize], rng: &RngStream) {
    let mut sub = rng.substream(key);
    params.insert(key, region, trunc_normal_tensor(shape, &mut sub));
}

fn init_zeros(params: &mut ModelParams, key: &str, region: Region, shape: &[usize]) {
    params.insert(key, region, Tensor::zeros(shape));
}

fn init_ones(params: &mut ModelParams, key: &str, region: Region, shape: &[usize]) {
    params.insert(key, region, Tensor::filled(shape, 1.0));
}

fn init_attention(params: &mut ModelParams, prefix: &str, region: Region, d: usize, rng: &RngStream) {
    for proj in ["wq", "wk", "wv", "wo"] {
        init_weight(params, &format!("{prefix}.{proj}"), region, &[d, d], rng);
    }
    for bias in ["bq", "bk", "bv", "bo"] {
        init_zeros(params, &format!("{prefix}.{bias}"), region, &[d]);
    }
}

fn init_layer_norm(params: &mut ModelParams, prefix: &str, region: Region, d: usize) {
    init_ones(params, &format!("{prefix}.g"), region, &[d]);
    init_zeros(params, &format!("{prefix}.b"), region, &[d]);
}

fn init_ffn(params: &mut ModelParams, prefix: &str, region: Region, d: usize, ffn: usize, rng: &RngStream) {
    init_weight(params, &format!("{prefix}.w1"), region, &[d, ffn], rng);
    init_zeros(params, &format!("{prefix}.b1"), region, &[ffn]);
    init_weight(params, &format!("{prefix}.w2"), region, &[ffn, d], rng);
    init_zeros(params, &format!("{prefix}.b2"), region, &[d]);
}

/// Initializes the shared backbone (encoder, decoder, MLM head) and the
/// private contrast head. Truncated-normal weights (sigma 0.02), zero
/// biases, unit layer-norm gains; deterministic in `rng`.
pub fn init_model(cfg: &ModelConfig, rng: &RngStream) -> ModelParams {
    let d = cfg.d_model;
    let v = cfg.vocab_size;
    let mut p = ModelParams::new();

    init_weight(&mut p, "enc.embed", Region::Encoder, &[v, d], rng);
    for l in 0..cfg.num_layers {
        let pre = format!("enc.l{l}");
        init_layer_norm(&mut p, &format!("{pre}.ln1"), Region::Encoder, d);
        init_attention(&mut p, &format!("{pre}.attn"), Region::Encoder, d, rng);
        init_layer_norm(&mut p, &format!("{pre}.ln2"), Region::Encoder, d);
        init_ffn(&mut p, &format!("{pre}.ffn"), Region::Encoder, d, cfg.ffn_dim, rng);
    }
    init_layer_norm(&mut p, "enc.lnf", Region::Encoder, d);

    for l in 0..cfg.num_layers {
        let pre = format!("dec.l{l}");
        init_layer_norm(&mut p, &format!("{pre}.ln1"), Region::Decoder, d);
        init_attention(&mut p, &format!("{pre}.self"), Region::Decoder, d, rng);
        init_layer_norm(&mut p, &format!("{pre}.ln2"), Region::Decoder, d);
        init_attention(&mut p, &format!("{pre}.cross"), Region::Decoder, d, rng);
        init_layer_norm(&mut p, &format!("{pre}.ln3"), Region::Decoder, d);
        init_ffn(&mut p, &format!("{pre}.ffn"), Region::Decoder, d, cfg.ffn_dim, rng);
    }
    init_layer_norm(&mut p, "dec.lnf", Region::Decoder, d);
    // Reconstruction head used by the denoising task; part of the aligned
    // backbone, unlike the private generation head.
    init_weight(&mut p, "dec.out.w", Region::Decoder, &[d, v], rng);
    init_zeros(&mut p, "dec.out.b", Region::Decoder, &[v]);

    init_weight(&mut p, "mlm.dense.w", Region::MlmHead, &[d, d], rng);
    init_zeros(&mut p, "mlm.dense.b", Region::MlmHead, &[d]);
    init_layer_norm(&mut p, "mlm.ln", Region::MlmHead, d);
    init_weight(&mut p, "mlm.out.w", Region::MlmHead, &[d, v], rng);
    init_zeros(&mut p, "mlm.out.b", Region::MlmHead, &[v]);

    init_weight(&mut p, "con.fc1.w", Region::ContrastHead, &[d, d], rng);
    init_zeros(&mut p, "con.fc1.b", Region::ContrastHead, &[d]);
    init_weight(&mut p, "con.fc2.w", Region::ContrastHead, &[d, cfg.mlp_summary_dim], rng);
    init_zeros(&mut p, "con.fc2.b", Region::ContrastHead, &[cfg.mlp_summary_dim]);

    p
}

/// Adds the client's private task head.
pub fn init_task_head(params: &mut ModelParams, head: TaskHead, cfg: &ModelConfig, rng: &RngStream) {
    let d = cfg.d_model;
    match head {
        TaskHead::Classifier { classes } => {
            init_weight(params, "task.cls.w", Region::TaskHead, &[d, classes], rng);
            init_zeros(params, "task.cls.b", Region::TaskHead, &[classes]);
        }
        TaskHead::SpanExtractor => {
            init_weight(params, "task.span.w", Region::TaskHead, &[d, 2], rng);
            init_zeros(params, "task.span.b", Region::TaskHead, &[2]);
        }
        TaskHead::Generator => {
            init_weight(params, "task.gen.w", Region::TaskHead, &[d, cfg.vocab_size], rng);
            init_zeros(params, "task.gen.b", Region::TaskHead, &[cfg.vocab_size]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = ModelConfig::micro();
        let a = init_model(&cfg, &RngStream::new(9, "init"));
        let b = init_model(&cfg, &RngStream::new(9, "init"));
        assert_eq!(a, b);
        let c = init_model(&cfg, &RngStream::new(10, "init"));
        assert_ne!(a, c);
    }

    #[test]
    fn layer_norm_gains_are_ones() {
        let cfg = ModelConfig::micro();
        let p = init_model(&cfg, &RngStream::new(0, "init"));
        for (k, _, t) in p.iter() {
            if k.ends_with(".g") {
                assert!(t.data().iter().all(|&x| x == 1.0), "{k} not all ones");
            }
        }
    }

    #[test]
    fn backbone_signature_aligned_across_clients() {
        let cfg = ModelConfig::desk();
        let mut a = init_model(&cfg, &RngStream::new(0, "shared"));
        let mut b = init_model(&cfg, &RngStream::new(0, "shared"));
        init_task_head(&mut a, TaskHead::Classifier { classes: 4 }, &cfg, &RngStream::new(1, "a"));
        init_task_head(&mut b, TaskHead::Generator, &cfg, &RngStream::new(2, "b"));
        assert_eq!(a.signature(RegionSet::backbone()), b.signature(RegionSet::backbone()));
        assert_ne!(
            a.signature(RegionSet::of(&[Region::TaskHead])),
            b.signature(RegionSet::of(&[Region::TaskHead]))
        );
    }

    #[test]
    fn regions_partition_the_key_set() {
        let cfg = ModelConfig::micro();
        let mut p = init_model(&cfg, &RngStream::new(3, "init"));
        init_task_head(&mut p, TaskHead::SpanExtractor, &cfg, &RngStream::new(3, "head"));
        let total: usize = Region::ALL
            .iter()
            .map(|&r| p.keys_in(RegionSet::of(&[r])).count())
            .sum();
        assert_eq!(total, p.len());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let cfg = ModelConfig::micro();
        let mut p = init_model(&cfg, &RngStream::new(17, "ckpt"));
        init_task_head(&mut p, TaskHead::Classifier { classes: 4 }, &cfg, &RngStream::new(17, "h"));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        p.save(&path).unwrap();
        let q = ModelParams::load(&path).unwrap();
        assert_eq!(p, q);
        for (k, r, t) in p.iter() {
            assert_eq!(q.region_of(k), Some(r));
            let qt = q.get(k).unwrap();
            for (a, b) in t.data().iter().zip(qt.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{k}");
            }
        }
    }

    #[test]
    fn delta_and_apply_round_trip() {
        let cfg = ModelConfig::micro();
        let base = init_model(&cfg, &RngStream::new(4, "a"));
        let bumped = init_model(&cfg, &RngStream::new(5, "b"));
        let delta = bumped.delta_from(&base, RegionSet::backbone()).unwrap();
        let mut rebuilt = base.clone();
        rebuilt.apply_delta(&delta, 1.0).unwrap();
        for key in bumped.keys_in(RegionSet::backbone()) {
            let want = bumped.get(key).unwrap();
            let got = rebuilt.get(key).unwrap();
            for (a, b) in want.data().iter().zip(got.data()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }
}
