//! Sample types: one "image" as a proposal set plus a grid feature map and
//! reference captions with eval-only word-box alignments.

use crate::geometry::BBox;
use crate::vocab::Vocabulary;
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum DataError {
    EmptyProposals {
        id: String,
    },
    FeatureDimMismatch {
        id: String,
        expected: usize,
        got: usize,
    },
    GridSizeMismatch {
        id: String,
        expected: usize,
        got: usize,
    },
    AlignmentOutOfBounds {
        id: String,
        pos: usize,
        len: usize,
    },
    AlignmentNotNoun {
        id: String,
        token: String,
    },
    DegenerateGroundTruth {
        id: String,
        pos: usize,
    },
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::EmptyProposals { id } => write!(f, "sample {id}: no proposals"),
            DataError::FeatureDimMismatch { id, expected, got } => {
                write!(f, "sample {id}: feature dim {got}, expected {expected}")
            }
            DataError::GridSizeMismatch { id, expected, got } => {
                write!(f, "sample {id}: grid has {got} cells, expected {expected}")
            }
            DataError::AlignmentOutOfBounds { id, pos, len } => {
                write!(
                    f,
                    "sample {id}: alignment position {pos} out of bounds (caption length {len})"
                )
            }
            DataError::AlignmentNotNoun { id, token } => {
                write!(f, "sample {id}: alignment on non-noun token {token:?}")
            }
            DataError::DegenerateGroundTruth { id, pos } => {
                write!(
                    f,
                    "sample {id}: zero-area ground-truth box at position {pos}"
                )
            }
        }
    }
}

impl std::error::Error for DataError {}

/// A region proposal: candidate box with its feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub feat: Vec<f64>,
}

/// Eval-only mapping from a caption token position to a ground-truth box.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub pos: usize,
    pub bbox: BBox,
}

/// A reference caption (no BOS/EOS) with its word-box alignments.
#[derive(Debug, Clone, PartialEq)]
pub struct RefCaption {
    pub tokens: Vec<String>,
    pub alignments: Vec<Alignment>,
}

/// One dataset sample: proposals, grid feature map, reference captions.
/// The grid is stored row-major as `grid_size^2` cell feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub grid_size: usize,
    pub grid: Vec<Vec<f64>>,
    pub proposals: Vec<Proposal>,
    pub refs: Vec<RefCaption>,
}

impl Sample {
    pub fn feat_dim(&self) -> usize {
        self.proposals.first().map_or(0, |p| p.feat.len())
    }

    pub fn proposal_boxes(&self) -> Vec<BBox> {
        self.proposals.iter().map(|p| p.bbox).collect()
    }

    /// Structural validation: consistent dims, in-bounds noun-only alignments,
    /// and positive-area ground-truth boxes.
    pub fn validate(&self, vocab: &Vocabulary) -> Result<(), DataError> {
        if self.proposals.is_empty() {
            return Err(DataError::EmptyProposals {
                id: self.id.clone(),
            });
        }
        let d = self.feat_dim();
        for p in &self.proposals {
            if p.feat.len() != d {
                return Err(DataError::FeatureDimMismatch {
                    id: self.id.clone(),
                    expected: d,
                    got: p.feat.len(),
                });
            }
        }
        let cells = self.grid_size * self.grid_size;
        if self.grid.len() != cells {
            return Err(DataError::GridSizeMismatch {
                id: self.id.clone(),
                expected: cells,
                got: self.grid.len(),
            });
        }
        for cell in &self.grid {
            if cell.len() != d {
                return Err(DataError::FeatureDimMismatch {
                    id: self.id.clone(),
                    expected: d,
                    got: cell.len(),
                });
            }
        }
        for r in &self.refs {
            for a in &r.alignments {
                if a.pos >= r.tokens.len() {
                    return Err(DataError::AlignmentOutOfBounds {
                        id: self.id.clone(),
                        pos: a.pos,
                        len: r.tokens.len(),
                    });
                }
                let tok = &r.tokens[a.pos];
                if !vocab.is_noun_token(tok) {
                    return Err(DataError::AlignmentNotNoun {
                        id: self.id.clone(),
                        token: tok.clone(),
                    });
                }
                if a.bbox.area() <= 0.0 {
                    return Err(DataError::DegenerateGroundTruth {
                        id: self.id.clone(),
                        pos: a.pos,
                    });
                }
            }
        }
        Ok(())
    }
}
