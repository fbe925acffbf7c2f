//! Distributed attention: K attention branches applied iteratively with
//! region-proposal elimination, the multi-output teacher-forced loss, and
//! vote-and-fuse grounded decoding.

use crate::autodiff::{argmax, TensorId};
use crate::data::Sample;
use crate::geometry::{union_box, BBox};
use crate::model::{
    BranchTrace, Graph, GroundedCaption, LossGraph, ModelError, ModelParams, ModelResult,
    TokenGrounding,
};
use crate::vocab::Vocabulary;

/// Proposal indices already selected by earlier branches at the current time
/// step. Entries are pairwise distinct.
#[derive(Debug, Clone, Default)]
pub struct EliminationSet {
    selected: Vec<usize>,
}

impl EliminationSet {
    pub fn new() -> Self {
        EliminationSet::default()
    }

    pub fn push(&mut self, index: usize) {
        debug_assert!(!self.selected.contains(&index));
        self.selected.push(index);
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.selected.contains(&index)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.selected
    }
}

/// Region proposal elimination: the eligible set is all proposals minus those
/// in `m`, original indices preserved in order.
pub fn eliminate(n_proposals: usize, m: &EliminationSet) -> ModelResult<Vec<usize>> {
    let eligible: Vec<usize> = (0..n_proposals).filter(|i| !m.contains(*i)).collect();
    if eligible.is_empty() {
        return Err(ModelError::EmptyEligible);
    }
    Ok(eligible)
}

/// Output of one attention branch at one time step.
#[derive(Debug, Clone)]
pub struct BranchStepOutput {
    pub branch: usize,
    /// Original proposal indices the branch attended over.
    pub eligible: Vec<usize>,
    /// Attention weights aligned with `eligible`.
    pub weights: Vec<f64>,
    /// Selected proposal (argmax weight), as an original index.
    pub selected: usize,
    /// Word distribution emitted by this branch's language-LSTM stream.
    pub word_probs: Vec<f64>,
    pub argmax_word: usize,
    /// Tape node of the word distribution, for loss construction.
    pub prob_id: TensorId,
}

impl BranchStepOutput {
    pub fn trace(&self) -> BranchTrace {
        BranchTrace {
            branch: self.branch,
            eligible: self.eligible.clone(),
            weights: self.weights.clone(),
            selected: self.selected,
        }
    }
}

/// Runs the K attention branches for one time step. The shared attention-LSTM
/// hidden state must already be updated for this step; `img_ctx` is the
/// branch-independent image-attention feature for this step.
///
/// With `elimination` on, each branch's argmax selection is removed from the
/// candidates of later branches (the selection itself carries no gradient).
pub fn distributed_step(
    graph: &mut Graph,
    sample: &Sample,
    state: &mut crate::model::DecoderState,
    img_ctx: TensorId,
    k_active: usize,
    elimination: bool,
) -> ModelResult<Vec<BranchStepOutput>> {
    let n = sample.proposals.len();
    let mut m = EliminationSet::new();
    let mut outputs = Vec::with_capacity(k_active);
    for k in 0..k_active {
        let eligible = if elimination {
            eliminate(n, &m)?
        } else {
            (0..n).collect()
        };
        let feats = graph.eligible_feats(sample, &eligible)?;
        let alpha = graph.region_attention(feats, k, state.h1)?;
        let weights = graph.tape.values(alpha).to_vec();
        let selected = eligible[argmax(&weights)];
        if elimination {
            m.push(selected);
        }
        let r_hat = graph.attended_feature(alpha, feats)?;
        let f_hat = graph.fuse_image_feature(r_hat, img_ctx)?;
        let p = graph.language_step(state.h1, f_hat, state, k)?;
        let word_probs = graph.tape.values(p).to_vec();
        let argmax_word = argmax(&word_probs);
        outputs.push(BranchStepOutput {
            branch: k,
            eligible,
            weights,
            selected,
            word_probs,
            argmax_word,
            prob_id: p,
        });
    }
    Ok(outputs)
}

/// Teacher-forced multi-output loss: `sum_t sum_k -log p^k(y*_t)`, the
/// cross-entropy applied to all `k_active` branch outputs. Ground-truth
/// previous words feed the shared attention LSTM.
pub fn multi_branch_loss(
    sample: &Sample,
    reference: &[usize],
    params: &ModelParams,
    vocab: &Vocabulary,
    k_active: usize,
    elimination: bool,
) -> ModelResult<LossGraph> {
    if reference.is_empty() {
        return Err(ModelError::EmptyReference);
    }
    let k_active = k_active.min(params.config().branches).max(1);
    let mut g = Graph::new(sample, params)?;
    let mut state = g.initial_state(k_active);
    let mut prev = vocab.bos_id();
    let mut total: Option<TensorId> = None;
    for &target in reference {
        if target >= params.config().vocab_size {
            return Err(ModelError::TokenOutOfRange {
                token: target,
                vocab: params.config().vocab_size,
            });
        }
        let e_prev = g.embed(prev)?;
        g.attention_lstm_step(e_prev, &mut state)?;
        let img_ctx = g.image_context(state.h1)?;
        let outputs = distributed_step(&mut g, sample, &mut state, img_ctx, k_active, elimination)?;
        for out in &outputs {
            let ce = g.tape.cross_entropy(out.prob_id, target)?;
            total = Some(match total {
                None => ce,
                Some(t) => g.tape.add(t, ce)?,
            });
        }
        prev = target;
    }
    Ok(LossGraph {
        graph: g,
        loss: total.expect("non-empty reference"),
    })
}

/// Winner of the vote across branches at one step, with the fused box.
#[derive(Debug, Clone, PartialEq)]
pub struct VoteResult {
    pub word: usize,
    /// Branch indices whose argmax word equals the winner, ascending.
    pub voters: Vec<usize>,
    /// Union of the voting branches' selected proposal boxes.
    pub bbox: BBox,
    pub count: usize,
}

/// Selects the word predicted by the most branches and unions the voting
/// branches' selected regions. Ties on the vote count break toward the word
/// with the larger summed branch probability, then toward the lower
/// vocabulary index.
pub fn vote_and_fuse(outputs: &[BranchStepOutput], boxes: &[BBox]) -> ModelResult<VoteResult> {
    if outputs.is_empty() {
        return Err(ModelError::EmptyEligible);
    }
    let mut counts: Vec<(usize, usize)> = Vec::new(); // (word, count), word-ascending
    for out in outputs {
        match counts.binary_search_by_key(&out.argmax_word, |&(w, _)| w) {
            Ok(i) => counts[i].1 += 1,
            Err(i) => counts.insert(i, (out.argmax_word, 1)),
        }
    }
    let max_count = counts.iter().map(|&(_, c)| c).max().unwrap();
    let mut winner: Option<(usize, f64)> = None; // (word, summed prob)
    for &(word, count) in &counts {
        if count != max_count {
            continue;
        }
        let mut sum = 0.0;
        for out in outputs {
            sum += out.word_probs[word];
        }
        match winner {
            None => winner = Some((word, sum)),
            Some((_, best)) if sum > best => winner = Some((word, sum)),
            _ => {}
        }
    }
    let (word, _) = winner.expect("at least one candidate");
    let voters: Vec<usize> = outputs
        .iter()
        .filter(|o| o.argmax_word == word)
        .map(|o| o.branch)
        .collect();
    let selected: Vec<BBox> = outputs
        .iter()
        .filter(|o| o.argmax_word == word)
        .map(|o| boxes[o.selected])
        .collect();
    let bbox = union_box(&selected).expect("voters are non-empty");
    Ok(VoteResult {
        word,
        count: voters.len(),
        voters,
        bbox,
    })
}

/// Grounded decoding with distributed attention: per step the voted word is
/// emitted and fed back, and noun-lexicon tokens carry the fused box.
pub fn decode_distributed(
    sample: &Sample,
    params: &ModelParams,
    vocab: &Vocabulary,
    max_len: usize,
    elimination: bool,
) -> ModelResult<GroundedCaption> {
    let k = params.config().branches;
    let boxes = sample.proposal_boxes();
    let mut g = Graph::new(sample, params)?;
    let mut state = g.initial_state(k);
    let mut prev = vocab.bos_id();
    let mut tokens = Vec::new();
    let mut groundings = Vec::new();
    for pos in 0..max_len {
        let e_prev = g.embed(prev)?;
        g.attention_lstm_step(e_prev, &mut state)?;
        let img_ctx = g.image_context(state.h1)?;
        let outputs = distributed_step(&mut g, sample, &mut state, img_ctx, k, elimination)?;
        let vote = vote_and_fuse(&outputs, &boxes)?;
        tokens.push(vote.word);
        if vocab.is_noun(vote.word) {
            groundings.push(TokenGrounding {
                pos,
                token: vote.word,
                bbox: vote.bbox,
                branches: outputs.iter().map(|o| o.trace()).collect(),
            });
        }
        if vote.word == vocab.eos_id() {
            break;
        }
        prev = vote.word;
    }
    Ok(GroundedCaption { tokens, groundings })
}
