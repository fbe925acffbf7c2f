//! File formats: JSON-lines datasets and predictions, the vocabulary file,
//! JSON + CSV evaluation reports, the run configuration, and the binary
//! checkpoint (JSON manifest + raw little-endian f64 payload, byte-exact
//! across save/load round trips).

use crate::autodiff::ParamSet;
use crate::data::{Alignment, DataError, Proposal, RefCaption, Sample};
use crate::eval::{AblationRow, EvalReport};
use crate::geometry::BBox;
use crate::model::ModelConfig;
use crate::optim::AdamState;
use crate::synth::SynthConfig;
use crate::vocab::{VocabError, Vocabulary, BOS, EOS, PAD};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"GCAP1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug)]
pub enum IoError {
    File { path: String, message: String },
    Json { path: String, message: String },
    BadMagic { found: Vec<u8> },
    BadVersion { found: u32, expected: u32 },
    Truncated { expected: usize, got: usize },
    ManifestLayout { name: String, message: String },
    Config(String),
    Vocab(VocabError),
    Data(DataError),
}

impl fmt::Display for IoError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IoError::File { path, message } => write!(f, "{path}: {message}"),
            IoError::Json { path, message } => write!(f, "{path}: {message}"),
            IoError::BadMagic { found } => write!(f, "bad checkpoint magic {found:?}"),
            IoError::BadVersion { found, expected } => {
                write!(f, "checkpoint version {found}, expected {expected}")
            }
            IoError::Truncated { expected, got } => {
                write!(f, "payload has {got} bytes, expected {expected}")
            }
            IoError::ManifestLayout { name, message } => {
                write!(f, "manifest entry {name:?}: {message}")
            }
            IoError::Config(msg) => write!(f, "invalid config: {msg}"),
            IoError::Vocab(e) => write!(f, "{e}"),
            IoError::Data(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for IoError {}

impl From<VocabError> for IoError {
    fn from(e: VocabError) -> Self {
        IoError::Vocab(e)
    }
}

impl From<DataError> for IoError {
    fn from(e: DataError) -> Self {
        IoError::Data(e)
    }
}

fn file_err(path: &Path, e: std::io::Error) -> IoError {
    IoError::File {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn json_err(path: &Path, e: serde_json::Error) -> IoError {
    IoError::Json {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub e: usize,
    pub h: usize,
    pub d: usize,
    pub g: usize,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Elimination {
    On,
    Off,
}

impl Elimination {
    pub fn enabled(self) -> bool {
        matches!(self, Elimination::On)
    }
}

impl fmt::Display for Elimination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Elimination::On => write!(f, "on"),
            Elimination::Off => write!(f, "off"),
        }
    }
}

/// Dataset-generation knobs carried by the run config; the feature dimension,
/// grid size, and proposal budget come from [`Dims`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataGenBlock {
    pub n_samples: usize,
    pub split_ratios: [f64; 3],
    pub canvas: [f64; 2],
    pub min_objects: usize,
    pub max_objects: usize,
    pub full_per_object: usize,
    pub parts_per_object: usize,
    pub dup_per_object: usize,
    pub min_noise: usize,
    pub sigma: f64,
    pub beta: f64,
    pub full_dilution: f64,
    pub jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dims: Dims,
    pub k: usize,
    pub elimination: Elimination,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub batch_size: usize,
    pub max_decode_len: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub save_interval: Option<usize>,
    pub data: DataGenBlock,
}

impl RunConfig {
    /// Desk-scale preset: small dimensions, minutes-scale training.
    pub fn desk() -> Self {
        RunConfig {
            dims: Dims {
                e: 32,
                h: 64,
                d: 16,
                g: 4,
                n: 24,
            },
            k: 4,
            elimination: Elimination::On,
            warmup_epochs: 10,
            epochs: 50,
            lr: 4e-3,
            lr_decay_factor: 0.96,
            lr_decay_every: 5,
            batch_size: 8,
            max_decode_len: 16,
            seed: 42,
            save_interval: None,
            data: DataGenBlock {
                n_samples: 160,
                split_ratios: [0.8, 0.1, 0.1],
                canvas: [96.0, 96.0],
                min_objects: 1,
                max_objects: 3,
                full_per_object: 1,
                parts_per_object: 4,
                dup_per_object: 2,
                min_noise: 3,
                sigma: 0.05,
                beta: 2.0,
                full_dilution: 0.5,
                jitter: 0.02,
            },
        }
    }

    /// Full-scale preset: embedding 512, hidden 1024, 100 proposals,
    /// batch 64, 20 warm-up epochs.
    pub fn paper() -> Self {
        RunConfig {
            dims: Dims {
                e: 512,
                h: 1024,
                d: 2048,
                g: 7,
                n: 100,
            },
            k: 4,
            elimination: Elimination::On,
            warmup_epochs: 20,
            epochs: 50,
            lr: 5e-4,
            lr_decay_factor: 0.8,
            lr_decay_every: 3,
            batch_size: 64,
            max_decode_len: 20,
            seed: 42,
            save_interval: Some(5),
            data: DataGenBlock {
                n_samples: 160,
                split_ratios: [0.8, 0.1, 0.1],
                canvas: [96.0, 96.0],
                min_objects: 1,
                max_objects: 3,
                full_per_object: 1,
                parts_per_object: 4,
                dup_per_object: 2,
                min_noise: 3,
                sigma: 0.05,
                beta: 2.0,
                full_dilution: 0.5,
                jitter: 0.02,
            },
        }
    }

    pub fn validate(&self) -> Result<(), IoError> {
        let err = |m: &str| Err(IoError::Config(m.to_string()));
        if self.k == 0 {
            return err("k must be at least 1");
        }
        if self.k > self.dims.n {
            return err("k must not exceed the proposal count n");
        }
        if self.batch_size == 0 {
            return err("batch_size must be at least 1");
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return err("lr_decay_factor must lie in (0, 1]");
        }
        if self.lr_decay_every == 0 {
            return err("lr_decay_every must be at least 1");
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return err("lr must be finite and nonnegative");
        }
        if self.warmup_epochs > self.epochs {
            return err("warmup_epochs must not exceed epochs");
        }
        if self.max_decode_len == 0 {
            return err("max_decode_len must be at least 1");
        }
        if [
            self.dims.e,
            self.dims.h,
            self.dims.d,
            self.dims.g,
            self.dims.n,
        ]
        .contains(&0)
        {
            return err("all dims must be positive");
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            embed_dim: self.dims.e,
            hidden_dim: self.dims.h,
            feat_dim: self.dims.d,
            grid_size: self.dims.g,
            branches: self.k,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            canvas: self.data.canvas,
            min_objects: self.data.min_objects,
            max_objects: self.data.max_objects,
            feat_dim: self.dims.d,
            grid_size: self.dims.g,
            num_proposals: self.dims.n,
            full_per_object: self.data.full_per_object,
            parts_per_object: self.data.parts_per_object,
            dup_per_object: self.data.dup_per_object,
            min_noise: self.data.min_noise,
            sigma: self.data.sigma,
            beta: self.data.beta,
            full_dilution: self.data.full_dilution,
            jitter: self.data.jitter,
        }
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig, IoError> {
    let text = fs::read_to_string(path).map_err(|e| file_err(path, e))?;
    let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| json_err(path, e))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn save_config(path: &Path, cfg: &RunConfig) -> Result<(), IoError> {
    let text = serde_json::to_string_pretty(cfg).expect("config serializes");
    fs::write(path, text).map_err(|e| file_err(path, e))
}

// ---------------------------------------------------------------------------
// Vocabulary file
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    bos: String,
    eos: String,
    pad: String,
    nouns: Vec<String>,
}

pub fn write_vocab(path: &Path, vocab: &Vocabulary) -> Result<(), IoError> {
    let file = VocabFile {
        tokens: vocab.tokens().to_vec(),
        bos: BOS.to_string(),
        eos: EOS.to_string(),
        pad: PAD.to_string(),
        nouns: vocab.noun_tokens(),
    };
    let text = serde_json::to_string_pretty(&file).expect("vocab serializes");
    fs::write(path, text).map_err(|e| file_err(path, e))
}

pub fn read_vocab(path: &Path) -> Result<Vocabulary, IoError> {
    let text = fs::read_to_string(path).map_err(|e| file_err(path, e))?;
    let file: VocabFile = serde_json::from_str(&text).map_err(|e| json_err(path, e))?;
    if file.bos != BOS || file.eos != EOS || file.pad != PAD {
        return Err(IoError::Config(format!(
            "vocabulary file declares specials ({}, {}, {}), expected ({BOS}, {EOS}, {PAD})",
            file.bos, file.eos, file.pad
        )));
    }
    Ok(Vocabulary::new(file.tokens, &file.nouns)?)
}

// ---------------------------------------------------------------------------
// Dataset files (JSON lines, one sample per line)
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct SampleRecord {
    id: String,
    grid: Vec<Vec<Vec<f64>>>,
    proposals: Vec<ProposalRecord>,
    refs: Vec<RefRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ProposalRecord {
    #[serde(rename = "box")]
    bbox: BBox,
    feat: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RefRecord {
    tokens: Vec<String>,
    alignments: Vec<AlignmentRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AlignmentRecord {
    pos: usize,
    #[serde(rename = "box")]
    bbox: BBox,
}

fn sample_to_record(s: &Sample) -> SampleRecord {
    let g = s.grid_size;
    let grid = (0..g)
        .map(|r| (0..g).map(|c| s.grid[r * g + c].clone()).collect())
        .collect();
    SampleRecord {
        id: s.id.clone(),
        grid,
        proposals: s
            .proposals
            .iter()
            .map(|p| ProposalRecord {
                bbox: p.bbox,
                feat: p.feat.clone(),
            })
            .collect(),
        refs: s
            .refs
            .iter()
            .map(|r| RefRecord {
                tokens: r.tokens.clone(),
                alignments: r
                    .alignments
                    .iter()
                    .map(|a| AlignmentRecord {
                        pos: a.pos,
                        bbox: a.bbox,
                    })
                    .collect(),
            })
            .collect(),
    }
}

fn record_to_sample(r: SampleRecord) -> Sample {
    let g = r.grid.len();
    let mut grid = Vec::with_capacity(g * g);
    for row in r.grid {
        for cell in row {
            grid.push(cell);
        }
    }
    Sample {
        id: r.id,
        grid_size: g,
        grid,
        proposals: r
            .proposals
            .into_iter()
            .map(|p| Proposal {
                bbox: p.bbox,
                feat: p.feat,
            })
            .collect(),
        refs: r
            .refs
            .into_iter()
            .map(|rr| RefCaption {
                tokens: rr.tokens,
                alignments: rr
                    .alignments
                    .into_iter()
                    .map(|a| Alignment {
                        pos: a.pos,
                        bbox: a.bbox,
                    })
                    .collect(),
            })
            .collect(),
    }
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), IoError> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(|e| json_err(path, e))?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| file_err(path, e))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, IoError> {
    let file = fs::File::open(path).map_err(|e| file_err(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| file_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| json_err(path, e))?);
    }
    Ok(out)
}

pub fn write_samples(path: &Path, samples: &[Sample]) -> Result<(), IoError> {
    let records: Vec<SampleRecord> = samples.iter().map(sample_to_record).collect();
    write_jsonl(path, &records)
}

/// Reads and validates a dataset split (degenerate ground-truth boxes and
/// non-noun alignments are rejected here).
pub fn read_samples(path: &Path, vocab: &Vocabulary) -> Result<Vec<Sample>, IoError> {
    let records: Vec<SampleRecord> = read_jsonl(path)?;
    let samples: Vec<Sample> = records.into_iter().map(record_to_sample).collect();
    for s in &samples {
        s.validate(vocab)?;
    }
    Ok(samples)
}

// ---------------------------------------------------------------------------
// Prediction files (JSON lines, one record per sample)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub tokens: Vec<String>,
    pub groundings: Vec<GroundingRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingRecord {
    pub pos: usize,
    pub token: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    /// Per-branch attention traces; present only when generation ran with
    /// attention dumping enabled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branches: Option<Vec<BranchRecord>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchRecord {
    pub branch: usize,
    pub eligible: Vec<usize>,
    pub weights: Vec<f64>,
    pub selected: usize,
}

impl PredictionRecord {
    pub fn to_eval(&self) -> crate::eval::Prediction {
        crate::eval::Prediction {
            id: self.id.clone(),
            tokens: self.tokens.clone(),
            groundings: self
                .groundings
                .iter()
                .map(|g| crate::eval::PredGrounding {
                    pos: g.pos,
                    token: g.token.clone(),
                    bbox: g.bbox,
                })
                .collect(),
        }
    }
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<(), IoError> {
    write_jsonl(path, records)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>, IoError> {
    read_jsonl(path)
}

// ---------------------------------------------------------------------------
// Evaluation reports (JSON + one-row CSV)
// ---------------------------------------------------------------------------

pub fn write_report_json(path: &Path, report: &EvalReport) -> Result<(), IoError> {
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    fs::write(path, text).map_err(|e| file_err(path, e))
}

pub fn read_report_json(path: &Path) -> Result<EvalReport, IoError> {
    let text = fs::read_to_string(path).map_err(|e| file_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| json_err(path, e))
}

pub const REPORT_CSV_HEADER: &str =
    "bleu1,bleu4,f1_all,f1_loc,f1_loc_defined,mis_cls,hallu_cls,corr_grd,part_grd,other_err";

pub fn write_report_csv(path: &Path, report: &EvalReport) -> Result<(), IoError> {
    let r = &report.taxonomy.ratios;
    let row = format!(
        "{},{},{},{},{},{},{},{},{},{}",
        report.captioning.bleu1,
        report.captioning.bleu4,
        report.grounding.f1_all,
        report.grounding.f1_loc,
        report.grounding.f1_loc_defined,
        r.mis_cls,
        r.hallu_cls,
        r.corr_grd,
        r.part_grd,
        r.other_err
    );
    fs::write(path, format!("{REPORT_CSV_HEADER}\n{row}\n")).map_err(|e| file_err(path, e))
}

pub const ABLATION_CSV_HEADER: &str = "k,elimination,bleu1,bleu4,f1_all,f1_loc,part_grd_ratio";

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<(), IoError> {
    let mut text = String::from(ABLATION_CSV_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.k, r.elimination, r.bleu1, r.bleu4, r.f1_all, r.f1_loc, r.part_grd_ratio
        ));
    }
    fs::write(path, text).map_err(|e| file_err(path, e))
}

// ---------------------------------------------------------------------------
// Training loss log
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct LossLogRow {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub k_active: usize,
}

pub const LOSS_LOG_HEADER: &str = "epoch,lr,mean_loss,k_active";

pub fn write_loss_log(path: &Path, rows: &[LossLogRow]) -> Result<(), IoError> {
    let mut text = String::from(LOSS_LOG_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{}\n",
            r.epoch, r.lr, r.mean_loss, r.k_active
        ));
    }
    fs::write(path, text).map_err(|e| file_err(path, e))
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossLogRow>, IoError> {
    let text = fs::read_to_string(path).map_err(|e| file_err(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(IoError::File {
                path: path.display().to_string(),
                message: format!("malformed loss log line {}", i + 1),
            });
        }
        let parse_err = |m: &str| IoError::File {
            path: path.display().to_string(),
            message: format!("line {}: {m}", i + 1),
        };
        rows.push(LossLogRow {
            epoch: parts[0].parse().map_err(|_| parse_err("bad epoch"))?,
            lr: parts[1].parse().map_err(|_| parse_err("bad lr"))?,
            mean_loss: parts[2].parse().map_err(|_| parse_err("bad loss"))?,
            k_active: parts[3].parse().map_err(|_| parse_err("bad k"))?,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// A trained model snapshot: config echo, epoch, parameters, optimizer state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub epoch: usize,
    pub params: ParamSet,
    pub adam: AdamState,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: RunConfig,
    epoch: usize,
    adam: AdamHyper,
    entries: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdamHyper {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

fn f64s_to_le_bytes(values: &[f64], out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn le_bytes_to_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect()
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), IoError> {
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    {
        let mut push_entry =
            |name: String, shape: Vec<usize>, values: &[f64], payload: &mut Vec<u8>| {
                entries.push(ManifestEntry {
                    name,
                    shape,
                    offset: payload.len(),
                });
                f64s_to_le_bytes(values, payload);
            };
        for p in ckpt.params.iter() {
            push_entry(
                format!("param/{}", p.name),
                p.tensor.shape().to_vec(),
                p.tensor.values(),
                &mut payload,
            );
        }
        for (p, m) in ckpt.params.iter().zip(ckpt.adam.first_moments()) {
            push_entry(
                format!("adam/m/{}", p.name),
                p.tensor.shape().to_vec(),
                m,
                &mut payload,
            );
        }
        for (p, v) in ckpt.params.iter().zip(ckpt.adam.second_moments()) {
            push_entry(
                format!("adam/v/{}", p.name),
                p.tensor.shape().to_vec(),
                v,
                &mut payload,
            );
        }
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        config: ckpt.config.clone(),
        epoch: ckpt.epoch,
        adam: AdamHyper {
            lr: ckpt.adam.lr,
            beta1: ckpt.adam.beta1,
            beta2: ckpt.adam.beta2,
            eps: ckpt.adam.eps,
            t: ckpt.adam.t,
        },
        entries,
    };
    let manifest_bytes = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(5 + 8 + manifest_bytes.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_bytes);
    out.extend_from_slice(&payload);
    fs::write(path, out).map_err(|e| file_err(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, IoError> {
    let bytes = fs::read(path).map_err(|e| file_err(path, e))?;
    if bytes.len() < 13 {
        return Err(IoError::Truncated {
            expected: 13,
            got: bytes.len(),
        });
    }
    if &bytes[..5] != CHECKPOINT_MAGIC {
        return Err(IoError::BadMagic {
            found: bytes[..5].to_vec(),
        });
    }
    let manifest_len = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes")) as usize;
    if bytes.len() < 13 + manifest_len {
        return Err(IoError::Truncated {
            expected: 13 + manifest_len,
            got: bytes.len(),
        });
    }
    let manifest: Manifest =
        serde_json::from_slice(&bytes[13..13 + manifest_len]).map_err(|e| json_err(path, e))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(IoError::BadVersion {
            found: manifest.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let payload = &bytes[13 + manifest_len..];
    // Offsets must be contiguous and cover the payload exactly; each entry's
    // byte length is its shape product times 8.
    let mut expected_offset = 0usize;
    for e in &manifest.entries {
        if e.offset != expected_offset {
            return Err(IoError::ManifestLayout {
                name: e.name.clone(),
                message: format!(
                    "offset {} does not abut previous end {expected_offset}",
                    e.offset
                ),
            });
        }
        let len: usize = e.shape.iter().product::<usize>() * 8;
        expected_offset += len;
    }
    if expected_offset != payload.len() {
        return Err(IoError::Truncated {
            expected: expected_offset,
            got: payload.len(),
        });
    }
    let slice_of = |e: &ManifestEntry| -> Vec<f64> {
        let len: usize = e.shape.iter().product::<usize>() * 8;
        le_bytes_to_f64s(&payload[e.offset..e.offset + len])
    };
    let mut params = ParamSet::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for e in &manifest.entries {
        if let Some(name) = e.name.strip_prefix("param/") {
            params
                .add(name, slice_of(e), e.shape.clone())
                .map_err(|err| IoError::ManifestLayout {
                    name: e.name.clone(),
                    message: err.to_string(),
                })?;
        }
    }
    for e in &manifest.entries {
        if let Some(name) = e.name.strip_prefix("adam/m/") {
            let idx = params.index_of(name).map_err(|_| IoError::ManifestLayout {
                name: e.name.clone(),
                message: "moment for unknown parameter".to_string(),
            })?;
            if idx != m.len() {
                return Err(IoError::ManifestLayout {
                    name: e.name.clone(),
                    message: "moments out of parameter order".to_string(),
                });
            }
            m.push(slice_of(e));
        } else if let Some(name) = e.name.strip_prefix("adam/v/") {
            let idx = params.index_of(name).map_err(|_| IoError::ManifestLayout {
                name: e.name.clone(),
                message: "moment for unknown parameter".to_string(),
            })?;
            if idx != v.len() {
                return Err(IoError::ManifestLayout {
                    name: e.name.clone(),
                    message: "moments out of parameter order".to_string(),
                });
            }
            v.push(slice_of(e));
        }
    }
    if m.len() != params.len() || v.len() != params.len() {
        return Err(IoError::ManifestLayout {
            name: "adam".to_string(),
            message: format!(
                "expected {} moment pairs, found {}/{}",
                params.len(),
                m.len(),
                v.len()
            ),
        });
    }
    let adam = AdamState::from_parts(
        manifest.adam.lr,
        manifest.adam.beta1,
        manifest.adam.beta2,
        manifest.adam.eps,
        manifest.adam.t,
        m,
        v,
    );
    Ok(Checkpoint {
        config: manifest.config,
        epoch: manifest.epoch,
        params,
        adam,
    })
}

/// Writes a string to a file, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| file_err(path, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| file_err(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| file_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelParams;
    use crate::synth;
    use tempfile::tempdir;

    #[test]
    fn config_round_trip_and_validation() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("config.json");
        let cfg = RunConfig::desk();
        cfg.validate().unwrap();
        save_config(&path, &cfg).unwrap();
        let back = load_config(&path).unwrap();
        assert_eq!(back, cfg);

        let mut bad = cfg.clone();
        bad.k = 0;
        assert!(bad.validate().is_err());
        bad.k = 999;
        assert!(bad.validate().is_err());
        let mut bad = cfg.clone();
        bad.lr_decay_factor = 1.5;
        assert!(bad.validate().is_err());
        let mut bad = cfg;
        bad.batch_size = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn shipped_preset_files_match_builtins() {
        let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("../..")
            .join("configs");
        let desk = load_config(&root.join("desk.json")).unwrap();
        assert_eq!(desk, RunConfig::desk());
        let paper = load_config(&root.join("paper.json")).unwrap();
        assert_eq!(paper, RunConfig::paper());
        // Full-scale hyperparameters stay pinned.
        assert_eq!(paper.dims.e, 512);
        assert_eq!(paper.dims.h, 1024);
        assert_eq!(paper.dims.n, 100);
        assert_eq!(paper.lr, 5e-4);
        assert_eq!(paper.lr_decay_factor, 0.8);
        assert_eq!(paper.lr_decay_every, 3);
        assert_eq!(paper.batch_size, 64);
        assert_eq!(paper.warmup_epochs, 20);
    }

    #[test]
    fn dataset_round_trip_is_lossless_and_byte_stable() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        let cfg = synth::SynthConfig::default();
        let vocab = synth::default_vocabulary();
        let samples: Vec<Sample> = (0..4)
            .map(|i| synth::generate_sample(7, i, &cfg).unwrap())
            .collect();
        write_samples(&path, &samples).unwrap();
        let back = read_samples(&path, &vocab).unwrap();
        assert_eq!(back, samples);
        let bytes1 = fs::read(&path).unwrap();
        write_samples(&path, &back).unwrap();
        let bytes2 = fs::read(&path).unwrap();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn vocab_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        let vocab = synth::default_vocabulary();
        write_vocab(&path, &vocab).unwrap();
        let back = read_vocab(&path).unwrap();
        assert_eq!(back.tokens(), vocab.tokens());
        assert_eq!(back.noun_tokens(), vocab.noun_tokens());
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let dir = tempdir().unwrap();
        let path1 = dir.path().join("a.gcap");
        let path2 = dir.path().join("b.gcap");
        let cfg = RunConfig::desk();
        let mcfg = cfg.model_config(19);
        let params = ModelParams::init(mcfg, 3);
        let adam = AdamState::new(params.set(), cfg.lr);
        let ckpt = Checkpoint {
            config: cfg,
            epoch: 7,
            params: params.set().clone(),
            adam,
        };
        save_checkpoint(&path1, &ckpt).unwrap();
        let loaded = load_checkpoint(&path1).unwrap();
        assert_eq!(loaded.epoch, 7);
        save_checkpoint(&path2, &loaded).unwrap();
        let b1 = fs::read(&path1).unwrap();
        let b2 = fs::read(&path2).unwrap();
        assert_eq!(b1, b2);
        // Loaded params rebuild a model of the echoed config.
        let rebuilt = ModelParams::from_set(loaded.config.model_config(19), loaded.params);
        assert!(rebuilt.is_ok());
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.gcap");
        let cfg = RunConfig::desk();
        let params = ModelParams::init(cfg.model_config(19), 3);
        let adam = AdamState::new(params.set(), cfg.lr);
        let ckpt = Checkpoint {
            config: cfg,
            epoch: 0,
            params: params.set().clone(),
            adam,
        };
        save_checkpoint(&path, &ckpt).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        // Corrupt the magic.
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(IoError::BadMagic { .. })
        ));
        // Truncate the payload.
        save_checkpoint(&path, &ckpt).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(IoError::Truncated { .. })
        ));
    }

    #[test]
    fn prediction_round_trip_with_optional_traces() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("preds.jsonl");
        let bbox = BBox::new(0.0, 0.0, 5.0, 5.0).unwrap();
        let records = vec![
            PredictionRecord {
                id: "s0".into(),
                tokens: vec!["a".into(), "circle".into()],
                groundings: vec![GroundingRecord {
                    pos: 1,
                    token: "circle".into(),
                    bbox,
                    branches: None,
                }],
            },
            PredictionRecord {
                id: "s1".into(),
                tokens: vec!["a".into(), "square".into()],
                groundings: vec![GroundingRecord {
                    pos: 1,
                    token: "square".into(),
                    bbox,
                    branches: Some(vec![BranchRecord {
                        branch: 0,
                        eligible: vec![0, 1],
                        weights: vec![0.5, 0.5],
                        selected: 0,
                    }]),
                }],
            },
        ];
        write_predictions(&path, &records).unwrap();
        let back = read_predictions(&path).unwrap();
        assert_eq!(back, records);
        // Records without traces serialize without a branches key.
        let text = fs::read_to_string(&path).unwrap();
        let first_line = text.lines().next().unwrap();
        assert!(!first_line.contains("branches"));
    }

    #[test]
    fn loss_log_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let rows = vec![
            LossLogRow {
                epoch: 0,
                lr: 5e-4,
                mean_loss: 3.25,
                k_active: 1,
            },
            LossLogRow {
                epoch: 1,
                lr: 4e-4,
                mean_loss: 2.5,
                k_active: 4,
            },
        ];
        write_loss_log(&path, &rows).unwrap();
        let back = read_loss_log(&path).unwrap();
        assert_eq!(back, rows);
    }
}
