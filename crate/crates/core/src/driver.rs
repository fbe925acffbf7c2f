//! Experiment drivers behind the CLI: dataset building, training with the
//! staged warm-up schedule and learning-rate decay, grounded generation,
//! evaluation, and the K/elimination ablation sweep.

use crate::data::Sample;
use crate::distributed::{decode_distributed, distributed_step, multi_branch_loss, vote_and_fuse};
use crate::eval::{evaluate, AblationRow, EvalReport};
use crate::io::{self, Checkpoint, Elimination, IoError, LossLogRow, PredictionRecord, RunConfig};
use crate::model::{Graph, GroundedCaption, ModelError, ModelParams};
use crate::optim::{adam_step, AdamState};
use crate::synth::{self, split_seed, SynthError};
use crate::vocab::Vocabulary;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug)]
pub enum DriverError {
    Io(IoError),
    Model(ModelError),
    Synth(SynthError),
    Eval(crate::eval::EvalError),
    NonFiniteLoss { epoch: usize, sample: String },
}

impl fmt::Display for DriverError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DriverError::Io(e) => write!(f, "{e}"),
            DriverError::Model(e) => write!(f, "{e}"),
            DriverError::Synth(e) => write!(f, "{e}"),
            DriverError::Eval(e) => write!(f, "{e}"),
            DriverError::NonFiniteLoss { epoch, sample } => {
                write!(f, "non-finite loss at epoch {epoch} on sample {sample}")
            }
        }
    }
}

impl std::error::Error for DriverError {}

impl From<IoError> for DriverError {
    fn from(e: IoError) -> Self {
        DriverError::Io(e)
    }
}

impl From<ModelError> for DriverError {
    fn from(e: ModelError) -> Self {
        DriverError::Model(e)
    }
}

impl From<SynthError> for DriverError {
    fn from(e: SynthError) -> Self {
        DriverError::Synth(e)
    }
}

impl From<crate::eval::EvalError> for DriverError {
    fn from(e: crate::eval::EvalError) -> Self {
        DriverError::Eval(e)
    }
}

impl From<crate::vocab::VocabError> for DriverError {
    fn from(e: crate::vocab::VocabError) -> Self {
        DriverError::Io(IoError::Vocab(e))
    }
}

pub type DriverResult<T> = Result<T, DriverError>;

/// Step-decay schedule: `lr * factor^(epoch / period)`.
pub fn lr_at(cfg: &RunConfig, epoch: usize) -> f64 {
    cfg.lr
        * cfg
            .lr_decay_factor
            .powi((epoch / cfg.lr_decay_every) as i32)
}

/// Worker count for generation/evaluation; capped by the GCAP_THREADS
/// environment variable.
pub fn eval_threads() -> usize {
    let available = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    std::env::var("GCAP_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(available)
        .min(64)
}

/// Ordered parallel map: items are chunked across scoped threads and results
/// are reassembled in input order, so the output is independent of the
/// thread count.
fn par_map<T, R, F>(items: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let mut out = Vec::with_capacity(items.len());
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for piece in items.chunks(chunk) {
            let f = &f;
            handles.push(scope.spawn(move || piece.iter().map(f).collect::<Vec<R>>()));
        }
        for h in handles {
            out.extend(h.join().expect("worker thread panicked"));
        }
    });
    out
}

// ---------------------------------------------------------------------------
// make-data
// ---------------------------------------------------------------------------

pub fn cmd_make_data(
    cfg: &RunConfig,
    master_seed: u64,
    out_dir: &Path,
) -> DriverResult<synth::DatasetSummary> {
    cfg.validate()?;
    Ok(synth::build_dataset(
        cfg.data.n_samples,
        cfg.data.split_ratios,
        master_seed,
        &cfg.synth_config(),
        out_dir,
    )?)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub epochs: usize,
    pub first_epoch_loss: Option<f64>,
    pub final_epoch_loss: Option<f64>,
    pub next_token_accuracy: f64,
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
}

fn training_examples(
    samples: &[Sample],
    vocab: &Vocabulary,
) -> DriverResult<Vec<(usize, Vec<usize>)>> {
    let mut out = Vec::new();
    for (si, s) in samples.iter().enumerate() {
        for r in &s.refs {
            out.push((si, vocab.encode_terminated(&r.tokens)?));
        }
    }
    Ok(out)
}

/// Trains from `data_dir/train.jsonl`: a single-branch warm-up for
/// `warmup_epochs`, then all K branches; Adam with step decay; gradients
/// averaged over each batch. Writes `checkpoint.gcap` and `train_log.csv`
/// into `out_dir` (plus periodic checkpoints when `save_interval` is set).
pub fn cmd_train(cfg: &RunConfig, data_dir: &Path, out_dir: &Path) -> DriverResult<TrainSummary> {
    cfg.validate()?;
    let vocab = io::read_vocab(&data_dir.join("vocab.json"))?;
    let samples = io::read_samples(&data_dir.join("train.jsonl"), &vocab)?;
    fs::create_dir_all(out_dir).map_err(|e| {
        DriverError::Io(IoError::File {
            path: out_dir.display().to_string(),
            message: e.to_string(),
        })
    })?;
    let examples = training_examples(&samples, &vocab)?;
    let mut params = ModelParams::init(cfg.model_config(vocab.size()), cfg.seed);
    let mut adam = AdamState::new(params.set(), cfg.lr);
    let elim = cfg.elimination.enabled();
    let mut log_rows: Vec<LossLogRow> = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        adam.lr = lr_at(cfg, epoch);
        let k_active = if epoch < cfg.warmup_epochs { 1 } else { cfg.k };
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(split_seed(cfg.seed, 0x5F00 + epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            for &ei in batch {
                let (si, ref_ids) = &examples[ei];
                let mut lg =
                    multi_branch_loss(&samples[*si], ref_ids, &params, &vocab, k_active, elim)?;
                let value = lg.value();
                if !value.is_finite() {
                    return Err(DriverError::NonFiniteLoss {
                        epoch,
                        sample: samples[*si].id.clone(),
                    });
                }
                epoch_loss += value;
                lg.backprop(&mut params)?;
            }
            params.set_mut().scale_grads(1.0 / batch.len() as f64);
            adam_step(params.set_mut(), &mut adam).map_err(ModelError::Autodiff)?;
        }
        log_rows.push(LossLogRow {
            epoch,
            lr: lr_at(cfg, epoch),
            mean_loss: epoch_loss / examples.len() as f64,
            k_active,
        });
        // Rewritten every epoch so an interrupted run keeps its history.
        io::write_loss_log(&out_dir.join("train_log.csv"), &log_rows)?;
        if let Some(every) = cfg.save_interval {
            if every > 0 && (epoch + 1) % every == 0 && epoch + 1 < cfg.epochs {
                let path = out_dir.join(format!("checkpoint_epoch{:04}.gcap", epoch + 1));
                io::save_checkpoint(
                    &path,
                    &Checkpoint {
                        config: cfg.clone(),
                        epoch: epoch + 1,
                        params: params.set().clone(),
                        adam: adam.clone(),
                    },
                )?;
            }
        }
    }

    let checkpoint = out_dir.join("checkpoint.gcap");
    io::save_checkpoint(
        &checkpoint,
        &Checkpoint {
            config: cfg.clone(),
            epoch: cfg.epochs,
            params: params.set().clone(),
            adam,
        },
    )?;
    let loss_log = out_dir.join("train_log.csv");
    io::write_loss_log(&loss_log, &log_rows)?;

    let final_k = if cfg.epochs > cfg.warmup_epochs {
        cfg.k
    } else {
        1
    };
    let next_token_accuracy = teacher_forced_accuracy(&samples, &vocab, &params, final_k, elim)?;
    Ok(TrainSummary {
        epochs: cfg.epochs,
        first_epoch_loss: log_rows.first().map(|r| r.mean_loss),
        final_epoch_loss: log_rows.last().map(|r| r.mean_loss),
        next_token_accuracy,
        checkpoint,
        loss_log,
    })
}

/// Teacher-forced next-token accuracy: the fraction of steps whose voted word
/// matches the reference token.
pub fn teacher_forced_accuracy(
    samples: &[Sample],
    vocab: &Vocabulary,
    params: &ModelParams,
    k_active: usize,
    elimination: bool,
) -> DriverResult<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for sample in samples {
        let boxes = sample.proposal_boxes();
        for r in &sample.refs {
            let ref_ids = vocab.encode_terminated(&r.tokens)?;
            let mut g = Graph::new(sample, params)?;
            let mut state = g.initial_state(k_active);
            let mut prev = vocab.bos_id();
            for &target in &ref_ids {
                let e_prev = g.embed(prev)?;
                g.attention_lstm_step(e_prev, &mut state)?;
                let img_ctx = g.image_context(state.h1)?;
                let outputs =
                    distributed_step(&mut g, sample, &mut state, img_ctx, k_active, elimination)?;
                let vote = vote_and_fuse(&outputs, &boxes)?;
                if vote.word == target {
                    hits += 1;
                }
                total += 1;
                prev = target;
            }
        }
    }
    Ok(if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    })
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GenerateSummary {
    pub count: usize,
    pub output: PathBuf,
}

fn caption_to_record(
    caption: &GroundedCaption,
    id: &str,
    vocab: &Vocabulary,
    dump_attention: bool,
) -> PredictionRecord {
    // The terminal EOS is structural, not caption content.
    let mut tokens = caption.tokens.clone();
    if tokens.last() == Some(&vocab.eos_id()) {
        tokens.pop();
    }
    PredictionRecord {
        id: id.to_string(),
        tokens: tokens
            .iter()
            .map(|&t| vocab.token(t).unwrap_or("<unk>").to_string())
            .collect(),
        groundings: caption
            .groundings
            .iter()
            .map(|gr| io::GroundingRecord {
                pos: gr.pos,
                token: vocab.token(gr.token).unwrap_or("<unk>").to_string(),
                bbox: gr.bbox,
                branches: dump_attention.then(|| {
                    gr.branches
                        .iter()
                        .map(|b| io::BranchRecord {
                            branch: b.branch,
                            eligible: b.eligible.clone(),
                            weights: b.weights.clone(),
                            selected: b.selected,
                        })
                        .collect()
                }),
            })
            .collect(),
    }
}

/// Decodes every sample of a split with the checkpointed model and writes one
/// prediction record per sample.
pub fn cmd_generate(
    checkpoint: &Path,
    data_dir: &Path,
    split: &str,
    out_path: &Path,
    dump_attention: bool,
) -> DriverResult<GenerateSummary> {
    let ckpt = io::load_checkpoint(checkpoint)?;
    ckpt.config.validate()?;
    let vocab = io::read_vocab(&data_dir.join("vocab.json"))?;
    let samples = io::read_samples(&data_dir.join(format!("{split}.jsonl")), &vocab)?;
    let params = ModelParams::from_set(ckpt.config.model_config(vocab.size()), ckpt.params)?;
    let elim = ckpt.config.elimination.enabled();
    let max_len = ckpt.config.max_decode_len;
    let results: Vec<DriverResult<PredictionRecord>> =
        par_map(&samples, eval_threads(), |sample| {
            let caption = decode_distributed(sample, &params, &vocab, max_len, elim)?;
            Ok(caption_to_record(
                &caption,
                &sample.id,
                &vocab,
                dump_attention,
            ))
        });
    let mut records = Vec::with_capacity(results.len());
    for r in results {
        records.push(r?);
    }
    io::write_predictions(out_path, &records)?;
    Ok(GenerateSummary {
        count: records.len(),
        output: out_path.to_path_buf(),
    })
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

/// Evaluates a prediction file against a split; writes the JSON report and a
/// one-row CSV next to it.
pub fn cmd_eval(
    pred_path: &Path,
    data_dir: &Path,
    split: &str,
    out_json: &Path,
) -> DriverResult<EvalReport> {
    let vocab = io::read_vocab(&data_dir.join("vocab.json"))?;
    let samples = io::read_samples(&data_dir.join(format!("{split}.jsonl")), &vocab)?;
    let records = io::read_predictions(pred_path)?;
    let preds: Vec<crate::eval::Prediction> = records.iter().map(|r| r.to_eval()).collect();
    let report = evaluate(&preds, &samples, &vocab)?;
    io::write_report_json(out_json, &report)?;
    let csv_path = out_json.with_extension("csv");
    io::write_report_csv(&csv_path, &report)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

/// Trains and evaluates one cell per (K, elimination) pair with shared seeds
/// and emits a table of headline scores.
pub fn cmd_ablate(
    cfg: &RunConfig,
    data_dir: &Path,
    k_values: &[usize],
    eliminations: &[Elimination],
    out_dir: &Path,
) -> DriverResult<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &k in k_values {
        for &elimination in eliminations {
            let cell_cfg = RunConfig {
                k,
                elimination,
                ..cfg.clone()
            };
            cell_cfg.validate()?;
            let cell_dir = out_dir.join(format!("k{k}_elim_{elimination}"));
            let train = cmd_train(&cell_cfg, data_dir, &cell_dir)?;
            let preds = cell_dir.join("predictions.jsonl");
            cmd_generate(&train.checkpoint, data_dir, "test", &preds, false)?;
            let report = cmd_eval(&preds, data_dir, "test", &cell_dir.join("report.json"))?;
            rows.push(AblationRow {
                k,
                elimination: elimination.to_string(),
                bleu1: report.captioning.bleu1,
                bleu4: report.captioning.bleu4,
                f1_all: report.grounding.f1_all,
                f1_loc: report.grounding.f1_loc,
                part_grd_ratio: report.taxonomy.ratios.part_grd,
            });
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| {
        DriverError::Io(IoError::File {
            path: out_dir.display().to_string(),
            message: e.to_string(),
        })
    })?;
    let json_path = out_dir.join("ablation.json");
    let text = serde_json::to_string_pretty(&rows).expect("rows serialize");
    fs::write(&json_path, text).map_err(|e| {
        DriverError::Io(IoError::File {
            path: json_path.display().to_string(),
            message: e.to_string(),
        })
    })?;
    io::write_ablation_csv(&out_dir.join("ablation.csv"), &rows)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    /// A configuration small enough for seconds-scale driver tests.
    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::desk();
        cfg.dims = io::Dims {
            e: 6,
            h: 8,
            d: 12,
            g: 2,
            n: 14,
        };
        cfg.k = 2;
        cfg.epochs = 2;
        cfg.warmup_epochs = 1;
        cfg.batch_size = 4;
        cfg.max_decode_len = 8;
        cfg.data.n_samples = 10;
        cfg.data.max_objects = 1;
        cfg.data.dup_per_object = 1;
        cfg.data.min_noise = 2;
        // d = 12 >= prototypes + 2 = 11.
        cfg
    }

    #[test]
    fn lr_schedule_is_step_decay() {
        // Full-scale preset: initial 5e-4 decayed by 0.8 every three epochs.
        let cfg = RunConfig::paper();
        assert_eq!(lr_at(&cfg, 0), 5e-4);
        assert_eq!(lr_at(&cfg, 2), 5e-4);
        assert!((lr_at(&cfg, 3) - 5e-4 * 0.8).abs() < 1e-18);
        assert!((lr_at(&cfg, 7) - 5e-4 * 0.8 * 0.8).abs() < 1e-18);
        assert!((lr_at(&cfg, 9) - 5e-4 * 0.8f64.powi(3)).abs() < 1e-18);
    }

    #[test]
    fn make_data_writes_expected_split_sizes() {
        let dir = tempdir().unwrap();
        let cfg = tiny_cfg();
        let summary = cmd_make_data(&cfg, 11, dir.path()).unwrap();
        assert_eq!(summary.train, 8);
        assert_eq!(summary.val, 1);
        assert_eq!(summary.test, 1);
        for f in &summary.files {
            assert!(f.exists());
        }
    }

    #[test]
    fn zero_epoch_training_writes_initial_checkpoint_and_empty_log() {
        let dir = tempdir().unwrap();
        let mut cfg = tiny_cfg();
        cfg.epochs = 0;
        cfg.warmup_epochs = 0;
        cmd_make_data(&cfg, 11, dir.path()).unwrap();
        let out = dir.path().join("run");
        let summary = cmd_train(&cfg, dir.path(), &out).unwrap();
        assert!(summary.checkpoint.exists());
        assert!(summary.first_epoch_loss.is_none());
        let rows = io::read_loss_log(&summary.loss_log).unwrap();
        assert!(rows.is_empty());
        let ckpt = io::load_checkpoint(&summary.checkpoint).unwrap();
        assert_eq!(ckpt.epoch, 0);
        // The checkpoint holds the seeded initialization.
        let vocab = io::read_vocab(&dir.path().join("vocab.json")).unwrap();
        let expect = ModelParams::init(cfg.model_config(vocab.size()), cfg.seed);
        let got = ckpt.params.flatten();
        assert_eq!(got, expect.set().flatten());
    }

    #[test]
    fn train_logs_lr_column_per_schedule() {
        let dir = tempdir().unwrap();
        let mut cfg = tiny_cfg();
        cfg.epochs = 7;
        cfg.warmup_epochs = 7;
        cfg.lr_decay_every = 3;
        cfg.lr_decay_factor = 0.8;
        cmd_make_data(&cfg, 11, dir.path()).unwrap();
        let out = dir.path().join("run");
        let summary = cmd_train(&cfg, dir.path(), &out).unwrap();
        let rows = io::read_loss_log(&summary.loss_log).unwrap();
        assert_eq!(rows.len(), 7);
        for r in &rows {
            let expect = cfg.lr * cfg.lr_decay_factor.powi((r.epoch / 3) as i32);
            assert!((r.lr - expect).abs() < 1e-18, "epoch {}", r.epoch);
            assert_eq!(r.k_active, 1);
        }
    }

    #[test]
    fn warmup_switches_branch_count_in_log() {
        let dir = tempdir().unwrap();
        let cfg = tiny_cfg(); // 1 warm-up epoch of 2 total, k = 2
        cmd_make_data(&cfg, 11, dir.path()).unwrap();
        let out = dir.path().join("run");
        let summary = cmd_train(&cfg, dir.path(), &out).unwrap();
        let rows = io::read_loss_log(&summary.loss_log).unwrap();
        assert_eq!(rows[0].k_active, 1);
        assert_eq!(rows[1].k_active, 2);
    }

    #[test]
    fn generate_and_eval_round_trip() {
        let dir = tempdir().unwrap();
        let cfg = tiny_cfg();
        cmd_make_data(&cfg, 13, dir.path()).unwrap();
        let out = dir.path().join("run");
        let summary = cmd_train(&cfg, dir.path(), &out).unwrap();
        let preds = out.join("preds.jsonl");
        let gen = cmd_generate(&summary.checkpoint, dir.path(), "test", &preds, true).unwrap();
        assert_eq!(gen.count, 1);
        let records = io::read_predictions(&preds).unwrap();
        // Every record id exists in the split; traces carry normalized
        // weights when attention dumping is on.
        let vocab = io::read_vocab(&dir.path().join("vocab.json")).unwrap();
        let samples = io::read_samples(&dir.path().join("test.jsonl"), &vocab).unwrap();
        for r in &records {
            assert!(samples.iter().any(|s| s.id == r.id));
            for g in &r.groundings {
                let branches = g.branches.as_ref().expect("traces requested");
                assert_eq!(branches.len(), cfg.k);
                for b in branches {
                    let sum: f64 = b.weights.iter().sum();
                    assert!((sum - 1.0).abs() <= 1e-9);
                }
            }
        }
        let report = cmd_eval(&preds, dir.path(), "test", &out.join("report.json")).unwrap();
        assert!((report.taxonomy.ratio_sum() - 1.0).abs() <= 1e-9);
        assert!(out.join("report.csv").exists());
    }

    #[test]
    fn generate_output_is_thread_count_invariant() {
        let dir = tempdir().unwrap();
        let cfg = tiny_cfg();
        cmd_make_data(&cfg, 29, dir.path()).unwrap();
        let out = dir.path().join("run");
        let summary = cmd_train(&cfg, dir.path(), &out).unwrap();
        let mut bytes = Vec::new();
        for threads in ["1", "3"] {
            std::env::set_var("GCAP_THREADS", threads);
            let preds = out.join(format!("preds_{threads}.jsonl"));
            cmd_generate(&summary.checkpoint, dir.path(), "train", &preds, true).unwrap();
            bytes.push(std::fs::read(&preds).unwrap());
        }
        std::env::remove_var("GCAP_THREADS");
        assert_eq!(bytes[0], bytes[1]);
    }

    #[test]
    fn generate_reports_explicit_dim_mismatch() {
        // A checkpoint trained at one feature dimension must refuse a dataset
        // with another, naming both sides.
        let dir = tempdir().unwrap();
        let cfg = tiny_cfg();
        cmd_make_data(&cfg, 23, dir.path()).unwrap();
        let out = dir.path().join("run");
        let mut zero_epochs = cfg.clone();
        zero_epochs.epochs = 0;
        zero_epochs.warmup_epochs = 0;
        let summary = cmd_train(&zero_epochs, dir.path(), &out).unwrap();
        // Regenerate the dataset with a larger feature dimension.
        let mut wide = cfg.clone();
        wide.dims.d = 13;
        let other = dir.path().join("wide");
        cmd_make_data(&wide, 23, &other).unwrap();
        let err = cmd_generate(
            &summary.checkpoint,
            &other,
            "test",
            &dir.path().join("p.jsonl"),
            false,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("12") && msg.contains("13"), "{msg}");
    }

    #[test]
    fn eval_rejects_foreign_prediction_ids() {
        let dir = tempdir().unwrap();
        let cfg = tiny_cfg();
        cmd_make_data(&cfg, 13, dir.path()).unwrap();
        let preds = dir.path().join("preds.jsonl");
        io::write_predictions(
            &preds,
            &[PredictionRecord {
                id: "nope".into(),
                tokens: vec!["a".into()],
                groundings: vec![],
            }],
        )
        .unwrap();
        let err = cmd_eval(&preds, dir.path(), "test", &dir.path().join("r.json"));
        assert!(err.is_err());
    }

    #[test]
    fn echoed_references_score_perfectly() {
        // Predictions that copy the first reference with ground-truth boxes
        // must reach BLEU 1.0, F1_loc 1.0, and 100% correct grounding.
        let dir = tempdir().unwrap();
        let cfg = tiny_cfg();
        cmd_make_data(&cfg, 17, dir.path()).unwrap();
        let vocab = io::read_vocab(&dir.path().join("vocab.json")).unwrap();
        let samples = io::read_samples(&dir.path().join("train.jsonl"), &vocab).unwrap();
        let records: Vec<PredictionRecord> = samples
            .iter()
            .map(|s| {
                let r = &s.refs[0];
                PredictionRecord {
                    id: s.id.clone(),
                    tokens: r.tokens.clone(),
                    groundings: r
                        .alignments
                        .iter()
                        .map(|a| io::GroundingRecord {
                            pos: a.pos,
                            token: r.tokens[a.pos].clone(),
                            bbox: a.bbox,
                            branches: None,
                        })
                        .collect(),
                }
            })
            .collect();
        let preds = dir.path().join("echo.jsonl");
        io::write_predictions(&preds, &records).unwrap();
        let report = cmd_eval(&preds, dir.path(), "train", &dir.path().join("r.json")).unwrap();
        assert!((report.captioning.bleu1 - 1.0).abs() < 1e-12);
        assert!((report.captioning.bleu4 - 1.0).abs() < 1e-12);
        assert_eq!(report.grounding.f1_loc, 1.0);
        assert!(report.grounding.f1_loc_defined);
        assert_eq!(report.taxonomy.ratios.corr_grd, 1.0);
    }

    #[test]
    fn single_cell_ablation_matches_baseline_run() {
        let dir = tempdir().unwrap();
        let mut cfg = tiny_cfg();
        cfg.k = 1;
        cmd_make_data(&cfg, 19, dir.path()).unwrap();
        let rows = cmd_ablate(
            &cfg,
            dir.path(),
            &[1],
            &[Elimination::On],
            &dir.path().join("ablation"),
        )
        .unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].k, 1);
        // The cell equals a separately driven baseline run.
        let out = dir.path().join("solo");
        let train = cmd_train(&cfg, dir.path(), &out).unwrap();
        let preds = out.join("preds.jsonl");
        cmd_generate(&train.checkpoint, dir.path(), "test", &preds, false).unwrap();
        let report = cmd_eval(&preds, dir.path(), "test", &out.join("r.json")).unwrap();
        assert_eq!(rows[0].bleu1, report.captioning.bleu1);
        assert_eq!(rows[0].f1_all, report.grounding.f1_all);
        assert_eq!(rows[0].f1_loc, report.grounding.f1_loc);
        assert!(dir.path().join("ablation/ablation.csv").exists());
        assert!(dir.path().join("ablation/ablation.json").exists());
    }
}
