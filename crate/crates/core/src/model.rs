//! Up-down captioning decoder over region proposals: a shared attention LSTM,
//! additive region attention, image-feature fusion, and a language LSTM that
//! emits the word distribution. This module holds the single-branch baseline
//! path (teacher-forced loss and greedy grounded decoding); the multi-branch
//! machinery lives in `distributed`.

use crate::autodiff::{argmax, AutodiffError, ParamBinding, ParamSet, Tape, TensorId};
use crate::data::Sample;
use crate::geometry::BBox;
use crate::vocab::Vocabulary;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;

/// Half-width of the uniform initialization interval.
pub const INIT_RANGE: f64 = 0.08;

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    Autodiff(AutodiffError),
    DimMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    TokenOutOfRange {
        token: usize,
        vocab: usize,
    },
    BranchOutOfRange {
        branch: usize,
        branches: usize,
    },
    EmptyGrid,
    EmptyEligible,
    EmptyReference,
    MissingParam {
        name: String,
    },
    ParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    ParamCount {
        expected: usize,
        got: usize,
    },
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Autodiff(e) => write!(f, "{e}"),
            ModelError::DimMismatch {
                what,
                expected,
                got,
            } => {
                write!(f, "{what}: expected {expected}, got {got}")
            }
            ModelError::TokenOutOfRange { token, vocab } => {
                write!(f, "token id {token} outside vocabulary of size {vocab}")
            }
            ModelError::BranchOutOfRange { branch, branches } => {
                write!(f, "branch {branch} out of range (model has {branches})")
            }
            ModelError::EmptyGrid => write!(f, "grid feature map is empty"),
            ModelError::EmptyEligible => write!(f, "eligible proposal set is empty"),
            ModelError::EmptyReference => write!(f, "reference caption is empty"),
            ModelError::MissingParam { name } => write!(f, "missing parameter {name:?}"),
            ModelError::ParamShape {
                name,
                expected,
                got,
            } => {
                write!(
                    f,
                    "parameter {name:?}: shape {got:?}, expected {expected:?}"
                )
            }
            ModelError::ParamCount { expected, got } => {
                write!(f, "parameter set has {got} entries, expected {expected}")
            }
        }
    }
}

impl std::error::Error for ModelError {}

impl From<AutodiffError> for ModelError {
    fn from(e: AutodiffError) -> Self {
        ModelError::Autodiff(e)
    }
}

pub type ModelResult<T> = Result<T, ModelError>;

/// Decoder dimensions. The additive-attention hidden width is tied to the
/// LSTM hidden size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub feat_dim: usize,
    pub grid_size: usize,
    pub branches: usize,
}

impl ModelConfig {
    fn attn_dim(&self) -> usize {
        self.hidden_dim
    }
}

#[derive(Debug, Clone, Copy)]
struct LstmIdx {
    w_xi: usize,
    w_hi: usize,
    b_i: usize,
    w_xf: usize,
    w_hf: usize,
    b_f: usize,
    w_xg: usize,
    w_hg: usize,
    b_g: usize,
    w_xo: usize,
    w_ho: usize,
    b_o: usize,
}

#[derive(Debug, Clone, Copy)]
struct AttnIdx {
    w_r: usize,
    w_h: usize,
    w_a: usize,
}

#[derive(Debug, Clone)]
struct ParamIndices {
    embed: usize,
    lstm1: LstmIdx,
    lstm2: LstmIdx,
    branches: Vec<AttnIdx>,
    img: AttnIdx,
    out_w: usize,
}

/// All trainable weights, held as a named [`ParamSet`] in a fixed canonical
/// order (the checkpoint serialization order).
#[derive(Debug, Clone)]
pub struct ModelParams {
    cfg: ModelConfig,
    set: ParamSet,
    idx: ParamIndices,
}

/// Expected `(name, shape)` manifest for a configuration, in canonical order.
fn param_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (s, e, h, d, a) = (
        cfg.vocab_size,
        cfg.embed_dim,
        cfg.hidden_dim,
        cfg.feat_dim,
        cfg.attn_dim(),
    );
    let mut out = Vec::new();
    out.push(("embed".to_string(), vec![s, e]));
    for (prefix, in_dim) in [("lstm1", d + e), ("lstm2", h + d)] {
        for gate in ["i", "f", "g", "o"] {
            out.push((format!("{prefix}.w_x{gate}"), vec![in_dim, h]));
            out.push((format!("{prefix}.w_h{gate}"), vec![h, h]));
            out.push((format!("{prefix}.b_{gate}"), vec![1, h]));
        }
    }
    for k in 0..cfg.branches {
        out.push((format!("att.branch{k}.w_r"), vec![d, a]));
        out.push((format!("att.branch{k}.w_h"), vec![h, a]));
        out.push((format!("att.branch{k}.w_a"), vec![a, 1]));
    }
    out.push(("att.img.w_r".to_string(), vec![d, a]));
    out.push(("att.img.w_h".to_string(), vec![h, a]));
    out.push(("att.img.w_a".to_string(), vec![a, 1]));
    out.push(("out.w".to_string(), vec![h, s]));
    out
}

fn build_indices(cfg: &ModelConfig, set: &ParamSet) -> ModelResult<ParamIndices> {
    let find = |name: &str| -> ModelResult<usize> {
        set.index_of(name).map_err(|_| ModelError::MissingParam {
            name: name.to_string(),
        })
    };
    let lstm = |prefix: &str| -> ModelResult<LstmIdx> {
        Ok(LstmIdx {
            w_xi: find(&format!("{prefix}.w_xi"))?,
            w_hi: find(&format!("{prefix}.w_hi"))?,
            b_i: find(&format!("{prefix}.b_i"))?,
            w_xf: find(&format!("{prefix}.w_xf"))?,
            w_hf: find(&format!("{prefix}.w_hf"))?,
            b_f: find(&format!("{prefix}.b_f"))?,
            w_xg: find(&format!("{prefix}.w_xg"))?,
            w_hg: find(&format!("{prefix}.w_hg"))?,
            b_g: find(&format!("{prefix}.b_g"))?,
            w_xo: find(&format!("{prefix}.w_xo"))?,
            w_ho: find(&format!("{prefix}.w_ho"))?,
            b_o: find(&format!("{prefix}.b_o"))?,
        })
    };
    let attn = |prefix: &str| -> ModelResult<AttnIdx> {
        Ok(AttnIdx {
            w_r: find(&format!("{prefix}.w_r"))?,
            w_h: find(&format!("{prefix}.w_h"))?,
            w_a: find(&format!("{prefix}.w_a"))?,
        })
    };
    let mut branches = Vec::with_capacity(cfg.branches);
    for k in 0..cfg.branches {
        branches.push(attn(&format!("att.branch{k}"))?);
    }
    Ok(ParamIndices {
        embed: find("embed")?,
        lstm1: lstm("lstm1")?,
        lstm2: lstm("lstm2")?,
        branches,
        img: attn("att.img")?,
        out_w: find("out.w")?,
    })
}

impl ModelParams {
    /// Seeded initialization: every weight uniform in `[-INIT_RANGE, INIT_RANGE)`.
    pub fn init(cfg: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        for (name, shape) in param_layout(&cfg) {
            let n: usize = shape.iter().product();
            let values: Vec<f64> = (0..n)
                .map(|_| rng.gen_range(-INIT_RANGE..INIT_RANGE))
                .collect();
            set.add(&name, values, shape)
                .expect("layout names are unique");
        }
        let idx = build_indices(&cfg, &set).expect("layout is complete");
        ModelParams { cfg, set, idx }
    }

    /// Rebuilds params from a deserialized set, validating the full layout.
    pub fn from_set(cfg: ModelConfig, set: ParamSet) -> ModelResult<Self> {
        let layout = param_layout(&cfg);
        if set.len() != layout.len() {
            return Err(ModelError::ParamCount {
                expected: layout.len(),
                got: set.len(),
            });
        }
        for (name, shape) in &layout {
            let p = set
                .by_name(name)
                .map_err(|_| ModelError::MissingParam { name: name.clone() })?;
            if p.tensor.shape() != shape.as_slice() {
                return Err(ModelError::ParamShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    got: p.tensor.shape().to_vec(),
                });
            }
        }
        let idx = build_indices(&cfg, &set)?;
        Ok(ModelParams { cfg, set, idx })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn set(&self) -> &ParamSet {
        &self.set
    }

    pub fn set_mut(&mut self) -> &mut ParamSet {
        &mut self.set
    }
}

/// Attention/language LSTM hidden streams for one decoding task. There is one
/// shared attention-LSTM stream and one language-LSTM stream per branch.
#[derive(Debug, Clone)]
pub struct DecoderState {
    pub h1: TensorId,
    pub c1: TensorId,
    pub branch: Vec<BranchState>,
}

#[derive(Debug, Clone, Copy)]
pub struct BranchState {
    pub h2: TensorId,
    pub c2: TensorId,
}

/// Attention trace of one branch at one emitted token: the eligible proposal
/// indices, the attention weights over them, and the selected proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchTrace {
    pub branch: usize,
    pub eligible: Vec<usize>,
    pub weights: Vec<f64>,
    pub selected: usize,
}

/// Grounding attached to one emitted noun-lexicon token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrounding {
    pub pos: usize,
    pub token: usize,
    pub bbox: BBox,
    pub branches: Vec<BranchTrace>,
}

/// Decoded token sequence with per-noun grounding boxes and traces.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundedCaption {
    pub tokens: Vec<usize>,
    pub groundings: Vec<TokenGrounding>,
}

/// Arithmetic mean over all grid cells.
pub fn global_pool(grid: &[Vec<f64>]) -> ModelResult<Vec<f64>> {
    let first = grid.first().ok_or(ModelError::EmptyGrid)?;
    let d = first.len();
    let mut out = vec![0.0; d];
    for cell in grid {
        for (o, v) in out.iter_mut().zip(cell) {
            *o += v;
        }
    }
    let n = grid.len() as f64;
    for o in &mut out {
        *o /= n;
    }
    Ok(out)
}

/// One forward computation over a sample: a tape with the parameters bound as
/// leaves, plus the sample's constant feature leaves.
pub struct Graph {
    pub tape: Tape,
    binding: ParamBinding,
    idx: ParamIndices,
    cfg: ModelConfig,
    feats: TensorId,
    grid: TensorId,
    v_g: TensorId,
}

impl Graph {
    pub fn new(sample: &Sample, params: &ModelParams) -> ModelResult<Self> {
        let cfg = params.cfg;
        let d = sample.feat_dim();
        if d != cfg.feat_dim {
            return Err(ModelError::DimMismatch {
                what: "proposal feature dim",
                expected: cfg.feat_dim,
                got: d,
            });
        }
        let cells = cfg.grid_size * cfg.grid_size;
        if sample.grid.len() != cells {
            return Err(ModelError::DimMismatch {
                what: "grid cell count",
                expected: cells,
                got: sample.grid.len(),
            });
        }
        let mut tape = Tape::new();
        let binding = params.set.bind(&mut tape);
        let n = sample.proposals.len();
        let mut flat = Vec::with_capacity(n * d);
        for p in &sample.proposals {
            flat.extend_from_slice(&p.feat);
        }
        let feats = tape.leaf(flat, vec![n, d], false)?;
        let mut grid_flat = Vec::with_capacity(cells * d);
        for cell in &sample.grid {
            if cell.len() != d {
                return Err(ModelError::DimMismatch {
                    what: "grid cell feature dim",
                    expected: d,
                    got: cell.len(),
                });
            }
            grid_flat.extend_from_slice(cell);
        }
        let grid = tape.leaf(grid_flat, vec![cells, d], false)?;
        let pooled = global_pool(&sample.grid)?;
        let v_g = tape.leaf(pooled, vec![1, d], false)?;
        Ok(Graph {
            tape,
            binding,
            idx: params.idx.clone(),
            cfg,
            feats,
            grid,
            v_g,
        })
    }

    /// Leaf holding all proposal features, `[N, d]`.
    pub fn feats(&self) -> TensorId {
        self.feats
    }

    /// Leaf holding the grid feature map, `[G*G, d]`.
    pub fn grid(&self) -> TensorId {
        self.grid
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn pid(&self, index: usize) -> TensorId {
        self.binding.id(index)
    }

    /// Zero initial hidden and cell states with `streams` language-LSTM
    /// branches.
    pub fn initial_state(&mut self, streams: usize) -> DecoderState {
        let h = self.cfg.hidden_dim;
        let zero = |tape: &mut Tape| {
            tape.leaf(vec![0.0; h], vec![1, h], false)
                .expect("zero state shape")
        };
        let h1 = zero(&mut self.tape);
        let c1 = zero(&mut self.tape);
        let branch = (0..streams)
            .map(|_| BranchState {
                h2: zero(&mut self.tape),
                c2: zero(&mut self.tape),
            })
            .collect();
        DecoderState { h1, c1, branch }
    }

    /// Embedding row of the previous word.
    pub fn embed(&mut self, token: usize) -> ModelResult<TensorId> {
        if token >= self.cfg.vocab_size {
            return Err(ModelError::TokenOutOfRange {
                token,
                vocab: self.cfg.vocab_size,
            });
        }
        Ok(self.tape.row(self.pid(self.idx.embed), token)?)
    }

    fn lstm_cell(
        &mut self,
        idx: LstmIdx,
        x: TensorId,
        h: TensorId,
        c: TensorId,
    ) -> ModelResult<(TensorId, TensorId)> {
        let gate = |tape: &mut Tape,
                    w_x: usize,
                    w_h: usize,
                    b: usize,
                    binding: &ParamBinding|
         -> ModelResult<TensorId> {
            let xw = tape.matmul(x, binding.id(w_x))?;
            let hw = tape.matmul(h, binding.id(w_h))?;
            let s = tape.add(xw, hw)?;
            Ok(tape.add(s, binding.id(b))?)
        };
        let zi = gate(&mut self.tape, idx.w_xi, idx.w_hi, idx.b_i, &self.binding)?;
        let i = self.tape.sigmoid(zi);
        let zf = gate(&mut self.tape, idx.w_xf, idx.w_hf, idx.b_f, &self.binding)?;
        let f = self.tape.sigmoid(zf);
        let zg = gate(&mut self.tape, idx.w_xg, idx.w_hg, idx.b_g, &self.binding)?;
        let g = self.tape.tanh(zg);
        let zo = gate(&mut self.tape, idx.w_xo, idx.w_ho, idx.b_o, &self.binding)?;
        let o = self.tape.sigmoid(zo);
        let fc = self.tape.mul(f, c)?;
        let ig = self.tape.mul(i, g)?;
        let c_new = self.tape.add(fc, ig)?;
        let ct = self.tape.tanh(c_new);
        let h_new = self.tape.mul(o, ct)?;
        Ok((h_new, c_new))
    }

    /// Attention-LSTM update: encodes `[v_g; e_prev]` into the shared hidden
    /// state, updating `h1`/`c1` in place.
    pub fn attention_lstm_step(
        &mut self,
        e_prev: TensorId,
        state: &mut DecoderState,
    ) -> ModelResult<()> {
        let x = self.tape.concat(self.v_g, e_prev)?;
        let (h, c) = self.lstm_cell(self.idx.lstm1, x, state.h1, state.c1)?;
        state.h1 = h;
        state.c1 = c;
        Ok(())
    }

    fn additive_attention(
        &mut self,
        feats: TensorId,
        attn: AttnIdx,
        h1: TensorId,
    ) -> ModelResult<TensorId> {
        if self.tape.shape(feats)[0] == 0 {
            return Err(ModelError::EmptyEligible);
        }
        // z_i = w_a . tanh(W_r r_i + W_h h1), then softmax over i.
        let proj = self.tape.matmul(feats, self.pid(attn.w_r))?;
        let query = self.tape.matmul(h1, self.pid(attn.w_h))?;
        let summed = self.tape.add_row_broadcast(proj, query)?;
        let act = self.tape.tanh(summed);
        let scores = self.tape.matmul(act, self.pid(attn.w_a))?;
        Ok(self.tape.softmax(scores)?)
    }

    /// Attention weights of one branch over a proposal feature matrix,
    /// as an `[m, 1]` tensor aligned with the matrix rows.
    pub fn region_attention(
        &mut self,
        feats: TensorId,
        branch: usize,
        h1: TensorId,
    ) -> ModelResult<TensorId> {
        let attn = *self
            .idx
            .branches
            .get(branch)
            .ok_or(ModelError::BranchOutOfRange {
                branch,
                branches: self.idx.branches.len(),
            })?;
        self.additive_attention(feats, attn, h1)
    }

    /// Weighted combination of the feature rows: `alpha^T feats`, `[1, d]`.
    pub fn attended_feature(&mut self, alpha: TensorId, feats: TensorId) -> ModelResult<TensorId> {
        let at = self.tape.transpose(alpha)?;
        Ok(self.tape.matmul(at, feats)?)
    }

    /// Aggregated grid feature: the image-attention block applied over the
    /// grid cells, queried by `h1`. Branch-independent, so it is computed once
    /// per time step and shared.
    pub fn image_context(&mut self, h1: TensorId) -> ModelResult<TensorId> {
        let alpha = self.additive_attention(self.grid, self.idx.img, h1)?;
        self.attended_feature(alpha, self.grid)
    }

    /// `f_hat = r_hat + att_img(grid)`.
    pub fn fuse_image_feature(
        &mut self,
        r_hat: TensorId,
        img_ctx: TensorId,
    ) -> ModelResult<TensorId> {
        Ok(self.tape.add(r_hat, img_ctx)?)
    }

    /// Language-LSTM update on branch `k` over `[h1; f_hat]`, returning the
    /// word distribution `softmax(W_o h2)`.
    pub fn language_step(
        &mut self,
        h1: TensorId,
        f_hat: TensorId,
        state: &mut DecoderState,
        k: usize,
    ) -> ModelResult<TensorId> {
        if k >= state.branch.len() {
            return Err(ModelError::BranchOutOfRange {
                branch: k,
                branches: state.branch.len(),
            });
        }
        let x = self.tape.concat(h1, f_hat)?;
        let (h, c) = self.lstm_cell(self.idx.lstm2, x, state.branch[k].h2, state.branch[k].c2)?;
        state.branch[k].h2 = h;
        state.branch[k].c2 = c;
        let logits = self.tape.matmul(h, self.pid(self.idx.out_w))?;
        Ok(self.tape.softmax(logits)?)
    }

    /// Leaf holding the feature rows of an eligible proposal subset, in the
    /// given (original-index) order.
    pub fn eligible_feats(&mut self, sample: &Sample, eligible: &[usize]) -> ModelResult<TensorId> {
        if eligible.is_empty() {
            return Err(ModelError::EmptyEligible);
        }
        let d = self.cfg.feat_dim;
        let mut flat = Vec::with_capacity(eligible.len() * d);
        for &i in eligible {
            flat.extend_from_slice(&sample.proposals[i].feat);
        }
        Ok(self.tape.leaf(flat, vec![eligible.len(), d], false)?)
    }

    /// Backpropagates a scalar loss and accumulates the parameter gradients
    /// into `params`.
    pub fn backprop(&mut self, loss: TensorId, params: &mut ModelParams) -> ModelResult<()> {
        self.tape.backward(loss)?;
        self.binding.harvest(&self.tape, &mut params.set);
        Ok(())
    }
}

/// A built loss graph: the tape plus the scalar loss node.
pub struct LossGraph {
    pub graph: Graph,
    pub loss: TensorId,
}

impl LossGraph {
    pub fn value(&self) -> f64 {
        self.graph.tape.scalar_value(self.loss)
    }

    pub fn backprop(&mut self, params: &mut ModelParams) -> ModelResult<()> {
        let loss = self.loss;
        self.graph.backprop(loss, params)
    }
}

fn check_reference(reference: &[usize], vocab_size: usize) -> ModelResult<()> {
    if reference.is_empty() {
        return Err(ModelError::EmptyReference);
    }
    for &t in reference {
        if t >= vocab_size {
            return Err(ModelError::TokenOutOfRange {
                token: t,
                vocab: vocab_size,
            });
        }
    }
    Ok(())
}

/// Baseline teacher-forced cross-entropy: `sum_t -log p(y*_t | y*_{1:t-1})`
/// with the single attention branch over the full proposal set.
/// `reference` is the encoded caption including the terminal EOS.
pub fn teacher_forced_loss(
    sample: &Sample,
    reference: &[usize],
    params: &ModelParams,
    vocab: &Vocabulary,
) -> ModelResult<LossGraph> {
    check_reference(reference, params.cfg.vocab_size)?;
    let mut g = Graph::new(sample, params)?;
    let mut state = g.initial_state(1);
    let feats = g.feats();
    let mut prev = vocab.bos_id();
    let mut total: Option<TensorId> = None;
    for &target in reference {
        let e_prev = g.embed(prev)?;
        g.attention_lstm_step(e_prev, &mut state)?;
        let img_ctx = g.image_context(state.h1)?;
        let alpha = g.region_attention(feats, 0, state.h1)?;
        let r_hat = g.attended_feature(alpha, feats)?;
        let f_hat = g.fuse_image_feature(r_hat, img_ctx)?;
        let p = g.language_step(state.h1, f_hat, &mut state, 0)?;
        let ce = g.tape.cross_entropy(p, target)?;
        total = Some(match total {
            None => ce,
            Some(t) => g.tape.add(t, ce)?,
        });
        prev = target;
    }
    Ok(LossGraph {
        graph: g,
        loss: total.expect("non-empty reference"),
    })
}

/// Baseline greedy decoding. Each step emits the argmax word (ties toward the
/// lowest index) and feeds it back; emitted noun-lexicon tokens carry the box
/// of the proposal with the maximum attention weight.
pub fn greedy_decode(
    sample: &Sample,
    params: &ModelParams,
    vocab: &Vocabulary,
    max_len: usize,
) -> ModelResult<GroundedCaption> {
    let mut g = Graph::new(sample, params)?;
    let mut state = g.initial_state(1);
    let feats = g.feats();
    let n = sample.proposals.len();
    let mut prev = vocab.bos_id();
    let mut tokens = Vec::new();
    let mut groundings = Vec::new();
    for pos in 0..max_len {
        let e_prev = g.embed(prev)?;
        g.attention_lstm_step(e_prev, &mut state)?;
        let img_ctx = g.image_context(state.h1)?;
        let alpha = g.region_attention(feats, 0, state.h1)?;
        let weights = g.tape.values(alpha).to_vec();
        let selected = argmax(&weights);
        let r_hat = g.attended_feature(alpha, feats)?;
        let f_hat = g.fuse_image_feature(r_hat, img_ctx)?;
        let p = g.language_step(state.h1, f_hat, &mut state, 0)?;
        let word = argmax(g.tape.values(p));
        tokens.push(word);
        if vocab.is_noun(word) {
            groundings.push(TokenGrounding {
                pos,
                token: word,
                bbox: sample.proposals[selected].bbox,
                branches: vec![BranchTrace {
                    branch: 0,
                    eligible: (0..n).collect(),
                    weights,
                    selected,
                }],
            });
        }
        if word == vocab.eos_id() {
            break;
        }
        prev = word;
    }
    Ok(GroundedCaption { tokens, groundings })
}
