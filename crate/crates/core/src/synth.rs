//! Deterministic synthetic-scene generator. Each object is covered by one
//! full-extent proposal plus several part proposals sized at most half the
//! object's area, with one designated "most discriminative" part whose
//! features carry a salience boost. A single attention branch therefore tends
//! to ground noun words at a part box, while the union of the parts covers
//! the object: the setup the multi-branch decoder is meant to fix.

use crate::data::{Alignment, Proposal, RefCaption, Sample};
use crate::geometry::{union_box, BBox};
use crate::vocab::{Vocabulary, BOS, EOS, PAD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;

/// Object classes; the noun lexicon of the synthetic vocabulary.
pub const CLASSES: [&str; 8] = [
    "circle", "square", "triangle", "star", "ring", "arrow", "heart", "moon",
];
pub const BACKGROUND: &str = "background";
const ATTRS: [&str; 2] = ["big", "small"];
const RELATIONS: [&str; 3] = ["above", "below", "beside"];

const OBJ_SIDE_FRAC: (f64, f64) = (0.22, 0.50);
const NOISE_SIDE_FRAC: (f64, f64) = (0.05, 0.40);
/// Objects with at least this canvas-area fraction are captioned "big".
const BIG_AREA_FRAC: f64 = 0.125;
/// Parts are shrunk toward their centers by this factor so the per-part IoU
/// bound and the union coverage hold with room to spare.
const PART_INSET: f64 = 0.98;
const OBJ_MARGIN: f64 = 1.0;
const PLACEMENT_ATTEMPTS: usize = 200;
const SAMPLE_ATTEMPTS: u64 = 16;

#[derive(Debug, Clone, PartialEq)]
pub enum SynthError {
    BadConfig(String),
    CanvasTooSmall { objects: usize },
    UnknownClass(usize),
    RatiosDoNotSumToOne(f64),
    ProposalBudget { needed: usize, budget: usize },
    ExhaustedAttempts { index: usize },
}

impl fmt::Display for SynthError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SynthError::BadConfig(msg) => write!(f, "invalid generator config: {msg}"),
            SynthError::CanvasTooSmall { objects } => {
                write!(
                    f,
                    "could not place {objects} non-overlapping objects on the canvas"
                )
            }
            SynthError::UnknownClass(i) => write!(f, "class index {i} out of range"),
            SynthError::RatiosDoNotSumToOne(s) => {
                write!(f, "split ratios sum to {s}, expected 1")
            }
            SynthError::ProposalBudget { needed, budget } => {
                write!(
                    f,
                    "object proposals need {needed} slots, budget is {budget}"
                )
            }
            SynthError::ExhaustedAttempts { index } => {
                write!(f, "sample {index}: exhausted regeneration attempts")
            }
        }
    }
}

impl std::error::Error for SynthError {}

/// Generator configuration: scene layout knobs plus the proposal and feature
/// construction parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthConfig {
    pub canvas: [f64; 2],
    pub min_objects: usize,
    pub max_objects: usize,
    pub feat_dim: usize,
    pub grid_size: usize,
    /// Every sample carries exactly this many proposals; the tail is padded
    /// with noise boxes.
    pub num_proposals: usize,
    pub full_per_object: usize,
    /// Upper bound on scene parts per object (2..=4 are drawn).
    pub parts_per_object: usize,
    pub dup_per_object: usize,
    pub min_noise: usize,
    /// Gaussian feature noise scale.
    pub sigma: f64,
    /// Salience boost planted on the discriminative part.
    pub beta: f64,
    /// Fraction of the background prototype mixed into full-box features.
    pub full_dilution: f64,
    /// Relative translation jitter applied to full/duplicate proposal boxes.
    pub jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            canvas: [96.0, 96.0],
            min_objects: 1,
            max_objects: 3,
            feat_dim: 16,
            grid_size: 4,
            num_proposals: 24,
            full_per_object: 1,
            parts_per_object: 4,
            dup_per_object: 2,
            min_noise: 3,
            sigma: 0.05,
            beta: 2.0,
            full_dilution: 0.5,
            jitter: 0.02,
        }
    }
}

/// Number of prototype directions: one per class plus background.
pub fn num_prototypes() -> usize {
    CLASSES.len() + 1
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let err = |msg: &str| Err(SynthError::BadConfig(msg.to_string()));
        if self.canvas[0] <= 0.0 || self.canvas[1] <= 0.0 {
            return err("canvas extents must be positive");
        }
        if self.min_objects > self.max_objects {
            return err("min_objects > max_objects");
        }
        if self.max_objects > 3 {
            return err("at most 3 objects per scene");
        }
        if self.feat_dim < num_prototypes() + 2 {
            return err("feat_dim must be at least the prototype count + 2");
        }
        if self.grid_size == 0 {
            return err("grid_size must be positive");
        }
        if self.parts_per_object < 2 {
            return err("parts_per_object must be at least 2");
        }
        if self.sigma < 0.0 || self.beta < 0.0 || self.jitter < 0.0 {
            return err("sigma, beta and jitter must be nonnegative");
        }
        if !(0.0..=1.0).contains(&self.full_dilution) {
            return err("full_dilution must lie in [0, 1]");
        }
        let per_object = self.full_per_object + self.parts_per_object + self.dup_per_object;
        let needed = self.max_objects * per_object + self.min_noise;
        if self.num_proposals < needed {
            return Err(SynthError::ProposalBudget {
                needed,
                budget: self.num_proposals,
            });
        }
        Ok(())
    }
}

/// One placed object: class, full-extent box, part boxes, and the index of
/// the designated most discriminative part.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub class: usize,
    pub bbox: BBox,
    pub parts: Vec<BBox>,
    pub discriminative: usize,
}

impl SceneObject {
    pub fn class_label(&self) -> Result<&'static str, SynthError> {
        CLASSES
            .get(self.class)
            .copied()
            .ok_or(SynthError::UnknownClass(self.class))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub canvas: [f64; 2],
    pub objects: Vec<SceneObject>,
    pub background: String,
}

/// Where a proposal box came from; drives its feature construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Full {
        object: usize,
    },
    Part {
        object: usize,
        part: usize,
        discriminative: bool,
    },
    Noise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSpec {
    pub bbox: BBox,
    pub provenance: Provenance,
}

/// Index-keyed seed derivation (SplitMix64 finalizer), so parallel and serial
/// generation agree.
pub fn split_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; the first uniform is kept away from zero.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn shrink(b: &BBox, factor: f64) -> BBox {
    let cx = 0.5 * (b.x1 + b.x2);
    let cy = 0.5 * (b.y1 + b.y2);
    let hw = 0.5 * (b.x2 - b.x1) * factor;
    let hh = 0.5 * (b.y2 - b.y1) * factor;
    BBox::new(cx - hw, cy - hh, cx + hw, cy + hh).expect("shrunk box stays valid")
}

fn overlaps_with_margin(a: &BBox, b: &BBox, margin: f64) -> bool {
    a.x1 - margin < b.x2 && b.x1 - margin < a.x2 && a.y1 - margin < b.y2 && b.y1 - margin < a.y2
}

/// Splits an object box into `n` (2..=4) parts: an exact half split, jittered
/// thirds, or jittered quadrants, each shrunk by [`PART_INSET`]. Every part is
/// contained in the object with area at most half of it, and the union of the
/// parts covers nearly the whole object.
fn split_parts(obj: &BBox, n: usize, rng: &mut ChaCha8Rng) -> Vec<BBox> {
    let (w, h) = (obj.width(), obj.height());
    let horizontal = w >= h; // split along the longer axis
    let strip = |f0: f64, f1: f64| -> BBox {
        if horizontal {
            BBox::new(obj.x1 + f0 * w, obj.y1, obj.x1 + f1 * w, obj.y2).expect("strip valid")
        } else {
            BBox::new(obj.x1, obj.y1 + f0 * h, obj.x2, obj.y1 + f1 * h).expect("strip valid")
        }
    };
    let raw: Vec<BBox> = match n {
        2 => vec![strip(0.0, 0.5), strip(0.5, 1.0)],
        3 => {
            let c1 = rng.gen_range(0.30..0.36);
            let c2 = rng.gen_range(0.64..0.70);
            vec![strip(0.0, c1), strip(c1, c2), strip(c2, 1.0)]
        }
        _ => {
            let fx = rng.gen_range(0.45..0.55);
            let fy = rng.gen_range(0.45..0.55);
            let mx = obj.x1 + fx * w;
            let my = obj.y1 + fy * h;
            vec![
                BBox::new(obj.x1, obj.y1, mx, my).unwrap(),
                BBox::new(mx, obj.y1, obj.x2, my).unwrap(),
                BBox::new(obj.x1, my, mx, obj.y2).unwrap(),
                BBox::new(mx, my, obj.x2, obj.y2).unwrap(),
            ]
        }
    };
    raw.iter().map(|b| shrink(b, PART_INSET)).collect()
}

fn parts_are_sound(obj: &BBox, parts: &[BBox]) -> bool {
    let contained = parts.iter().all(|p| obj.contains(p));
    let bounded = parts.iter().all(|p| p.iou(obj) <= 0.5);
    let covered = union_box(parts).map(|u| u.iou(obj) > 0.5).unwrap_or(false);
    contained && bounded && covered
}

/// Places 0..=3 non-overlapping objects with parts; deterministic per seed.
pub fn generate_scene(seed: u64, config: &SynthConfig) -> Result<SceneSpec, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_objects = if config.max_objects == 0 {
        0
    } else {
        rng.gen_range(config.min_objects..=config.max_objects)
    };
    let [cw, ch] = config.canvas;
    let min_dim = cw.min(ch);
    let mut classes: Vec<usize> = (0..CLASSES.len()).collect();
    // Distinct classes per scene, drawn without replacement.
    let mut objects: Vec<SceneObject> = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let w = rng.gen_range(OBJ_SIDE_FRAC.0..OBJ_SIDE_FRAC.1) * min_dim;
            let h = rng.gen_range(OBJ_SIDE_FRAC.0..OBJ_SIDE_FRAC.1) * min_dim;
            let x1 = rng.gen_range(0.0..(cw - w));
            let y1 = rng.gen_range(0.0..(ch - h));
            let candidate = BBox::new(x1, y1, x1 + w, y1 + h).expect("sampled box valid");
            if objects
                .iter()
                .all(|o| !overlaps_with_margin(&o.bbox, &candidate, OBJ_MARGIN))
            {
                placed = Some(candidate);
                break;
            }
        }
        let bbox = placed.ok_or(SynthError::CanvasTooSmall { objects: n_objects })?;
        let class_slot = rng.gen_range(0..classes.len());
        let class = classes.swap_remove(class_slot);
        let max_parts = config.parts_per_object.min(4);
        let mut parts;
        loop {
            let n_parts = rng.gen_range(2..=max_parts.max(2));
            parts = split_parts(&bbox, n_parts, &mut rng);
            if parts_are_sound(&bbox, &parts) {
                break;
            }
        }
        let discriminative = rng.gen_range(0..parts.len());
        objects.push(SceneObject {
            class,
            bbox,
            parts,
            discriminative,
        });
    }
    // Captions describe objects left to right (ties top to bottom), so the
    // mention order is recoverable from the box-geometry feature channels.
    objects.sort_by(|a, b| {
        let cxa = 0.5 * (a.bbox.x1 + a.bbox.x2);
        let cxb = 0.5 * (b.bbox.x1 + b.bbox.x2);
        cxa.total_cmp(&cxb).then_with(|| {
            let cya = 0.5 * (a.bbox.y1 + a.bbox.y2);
            let cyb = 0.5 * (b.bbox.y1 + b.bbox.y2);
            cya.total_cmp(&cyb)
        })
    });
    Ok(SceneSpec {
        canvas: config.canvas,
        objects,
        background: BACKGROUND.to_string(),
    })
}

fn jittered(b: &BBox, rel: f64, canvas: [f64; 2], rng: &mut ChaCha8Rng) -> BBox {
    if rel == 0.0 {
        return *b;
    }
    let dx = rng.gen_range(-rel..rel) * b.width();
    let dy = rng.gen_range(-rel..rel) * b.height();
    let shift_x = dx.clamp(-b.x1, canvas[0] - b.x2);
    let shift_y = dy.clamp(-b.y1, canvas[1] - b.y2);
    BBox::new(
        b.x1 + shift_x,
        b.y1 + shift_y,
        b.x2 + shift_x,
        b.y2 + shift_y,
    )
    .expect("translation keeps the box valid")
}

/// Emits the proposal boxes for a scene: per object, `full_per_object`
/// (jittered) full boxes, every part box, and `dup_per_object` jittered
/// duplicates; the remaining budget up to `num_proposals` is noise boxes.
pub fn make_proposals(
    scene: &SceneSpec,
    config: &SynthConfig,
    seed: u64,
) -> Result<Vec<ProposalSpec>, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<ProposalSpec> = Vec::with_capacity(config.num_proposals);
    for (oi, obj) in scene.objects.iter().enumerate() {
        for _ in 0..config.full_per_object {
            out.push(ProposalSpec {
                bbox: jittered(&obj.bbox, config.jitter, scene.canvas, &mut rng),
                provenance: Provenance::Full { object: oi },
            });
        }
        for (pi, part) in obj.parts.iter().enumerate() {
            out.push(ProposalSpec {
                bbox: *part,
                provenance: Provenance::Part {
                    object: oi,
                    part: pi,
                    discriminative: pi == obj.discriminative,
                },
            });
        }
        for _ in 0..config.dup_per_object {
            // Duplicate a random part or the full box, with jitter.
            let pick = rng.gen_range(0..=obj.parts.len());
            let (base, provenance) = if pick == obj.parts.len() {
                (obj.bbox, Provenance::Full { object: oi })
            } else {
                (
                    obj.parts[pick],
                    Provenance::Part {
                        object: oi,
                        part: pick,
                        discriminative: false,
                    },
                )
            };
            out.push(ProposalSpec {
                bbox: jittered(&base, config.jitter, scene.canvas, &mut rng),
                provenance,
            });
        }
    }
    if out.len() + config.min_noise > config.num_proposals {
        return Err(SynthError::ProposalBudget {
            needed: out.len() + config.min_noise,
            budget: config.num_proposals,
        });
    }
    let [cw, ch] = scene.canvas;
    while out.len() < config.num_proposals {
        let w = rng.gen_range(NOISE_SIDE_FRAC.0..NOISE_SIDE_FRAC.1) * cw.min(ch);
        let h = rng.gen_range(NOISE_SIDE_FRAC.0..NOISE_SIDE_FRAC.1) * cw.min(ch);
        let x1 = rng.gen_range(0.0..(cw - w));
        let y1 = rng.gen_range(0.0..(ch - h));
        out.push(ProposalSpec {
            bbox: BBox::new(x1, y1, x1 + w, y1 + h).expect("noise box valid"),
            provenance: Provenance::Noise,
        });
    }
    Ok(out)
}

fn prototype_index(provenance: Provenance, scene: &SceneSpec) -> usize {
    match provenance {
        Provenance::Full { object } | Provenance::Part { object, .. } => {
            scene.objects[object].class
        }
        Provenance::Noise => CLASSES.len(), // background slot
    }
}

/// Feature vector of one proposal: a class-prototype direction (diluted
/// toward the background prototype for full boxes), a salience channel
/// carrying the beta boost on the discriminative part, normalized box
/// geometry channels, and Gaussian noise.
pub fn synth_features(
    proposal: &ProposalSpec,
    scene: &SceneSpec,
    config: &SynthConfig,
    seed: u64,
) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.feat_dim;
    let protos = num_prototypes();
    let mut feat = vec![0.0; d];
    let class_slot = prototype_index(proposal.provenance, scene);
    match proposal.provenance {
        Provenance::Full { .. } => {
            feat[class_slot] = 1.0 - config.full_dilution;
            feat[protos - 1] += config.full_dilution;
        }
        Provenance::Part { discriminative, .. } => {
            feat[class_slot] = 1.0;
            if discriminative {
                feat[protos] = config.beta;
            }
        }
        Provenance::Noise => {
            feat[class_slot] = 1.0;
        }
    }
    let [cw, ch] = scene.canvas;
    let b = &proposal.bbox;
    let geo = [
        0.5 * (b.x1 + b.x2) / cw,
        0.5 * (b.y1 + b.y2) / ch,
        b.width() / cw,
        b.height() / ch,
    ];
    for (i, g) in geo.iter().enumerate() {
        let slot = protos + 1 + i;
        if slot < d {
            feat[slot] = *g;
        }
    }
    if config.sigma > 0.0 {
        for v in &mut feat {
            *v += config.sigma * gaussian(&mut rng);
        }
    }
    feat
}

/// Grid feature map: each cell carries the prototype of the object covering
/// its center (background otherwise) plus noise.
pub fn grid_features(scene: &SceneSpec, config: &SynthConfig, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = config.grid_size;
    let d = config.feat_dim;
    let [cw, ch] = scene.canvas;
    let mut cells = Vec::with_capacity(g * g);
    for row in 0..g {
        for col in 0..g {
            let cx = (col as f64 + 0.5) * cw / g as f64;
            let cy = (row as f64 + 0.5) * ch / g as f64;
            let slot = scene
                .objects
                .iter()
                .find(|o| o.bbox.x1 <= cx && cx <= o.bbox.x2 && o.bbox.y1 <= cy && cy <= o.bbox.y2)
                .map(|o| o.class)
                .unwrap_or(CLASSES.len());
            let mut feat = vec![0.0; d];
            feat[slot] = 1.0;
            if config.sigma > 0.0 {
                for v in &mut feat {
                    *v += config.sigma * gaussian(&mut rng);
                }
            }
            cells.push(feat);
        }
    }
    cells
}

fn attr_token(obj: &BBox, canvas: [f64; 2]) -> &'static str {
    if obj.area() >= BIG_AREA_FRAC * canvas[0] * canvas[1] {
        ATTRS[0]
    } else {
        ATTRS[1]
    }
}

fn relation_token(a: &BBox, b: &BBox) -> &'static str {
    let dx = 0.5 * (b.x1 + b.x2) - 0.5 * (a.x1 + a.x2);
    let dy = 0.5 * (b.y1 + b.y2) - 0.5 * (a.y1 + a.y2);
    if dy.abs() >= dx.abs() {
        // Image coordinates grow downward.
        if dy > 0.0 {
            RELATIONS[0] // first object sits above the second
        } else {
            RELATIONS[1]
        }
    } else {
        RELATIONS[2]
    }
}

/// Renders two reference captions from fixed templates (a bare phrase chain
/// and a "there is" variant), with alignments from each class token to the
/// object's full box.
pub fn render_caption(scene: &SceneSpec) -> Result<Vec<RefCaption>, SynthError> {
    if scene.objects.is_empty() {
        let tokens: Vec<String> = ["there", "is", BACKGROUND]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let r = RefCaption {
            tokens,
            alignments: vec![],
        };
        return Ok(vec![r.clone(), r]);
    }
    let mut chain: Vec<String> = Vec::new();
    let mut class_offsets: Vec<(usize, BBox)> = Vec::new();
    for (i, obj) in scene.objects.iter().enumerate() {
        chain.push("a".to_string());
        chain.push(attr_token(&obj.bbox, scene.canvas).to_string());
        class_offsets.push((chain.len(), obj.bbox));
        chain.push(obj.class_label()?.to_string());
        if i + 1 < scene.objects.len() {
            chain.push(relation_token(&obj.bbox, &scene.objects[i + 1].bbox).to_string());
        }
    }
    let plain = RefCaption {
        tokens: chain.clone(),
        alignments: class_offsets
            .iter()
            .map(|&(pos, bbox)| Alignment { pos, bbox })
            .collect(),
    };
    let mut there_tokens: Vec<String> = vec!["there".into(), "is".into()];
    there_tokens.extend(chain);
    let there = RefCaption {
        tokens: there_tokens,
        alignments: class_offsets
            .iter()
            .map(|&(pos, bbox)| Alignment { pos: pos + 2, bbox })
            .collect(),
    };
    Ok(vec![plain, there])
}

/// The closed vocabulary generated captions draw from: specials, function
/// words, attributes, relations, the background token, and the class nouns.
pub fn default_vocabulary() -> Vocabulary {
    let mut tokens: Vec<String> = [BOS, EOS, PAD, "a", "there", "is"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    tokens.extend(ATTRS.iter().map(|s| s.to_string()));
    tokens.extend(RELATIONS.iter().map(|s| s.to_string()));
    tokens.push(BACKGROUND.to_string());
    tokens.extend(CLASSES.iter().map(|s| s.to_string()));
    let nouns: Vec<String> = CLASSES.iter().map(|s| s.to_string()).collect();
    Vocabulary::new(tokens, &nouns).expect("static vocabulary is well formed")
}

/// Verifies the partial-grounding construction on the emitted proposals:
/// every object has a contained part proposal with IoU at most 0.5, and the
/// union of its part proposals covers the object with IoU above 0.5.
fn proposals_are_sound(scene: &SceneSpec, proposals: &[ProposalSpec]) -> bool {
    scene.objects.iter().enumerate().all(|(oi, obj)| {
        let parts: Vec<BBox> = proposals
            .iter()
            .filter(|p| matches!(p.provenance, Provenance::Part { object, .. } if object == oi))
            .map(|p| p.bbox)
            .collect();
        let has_partial = parts
            .iter()
            .any(|p| obj.bbox.contains(p) && p.iou(&obj.bbox) <= 0.5);
        let covered = union_box(&parts)
            .map(|u| u.iou(&obj.bbox) > 0.5)
            .unwrap_or(false);
        has_partial && covered
    })
}

/// Builds one sample from its index. Regenerates with a bumped sub-seed until
/// the partial-grounding invariant holds.
pub fn generate_sample(
    master_seed: u64,
    index: usize,
    config: &SynthConfig,
) -> Result<Sample, SynthError> {
    let base = split_seed(master_seed, index as u64);
    for attempt in 0..SAMPLE_ATTEMPTS {
        let sub = |stream: u64| split_seed(base, attempt * 8 + stream);
        let scene = match generate_scene(sub(0), config) {
            Ok(s) => s,
            Err(SynthError::CanvasTooSmall { .. }) => continue,
            Err(e) => return Err(e),
        };
        let proposals = make_proposals(&scene, config, sub(1))?;
        if !scene.objects.is_empty() && !proposals_are_sound(&scene, &proposals) {
            continue;
        }
        let refs = render_caption(&scene)?;
        let feats_base = sub(2);
        let proposals: Vec<Proposal> = proposals
            .iter()
            .enumerate()
            .map(|(i, p)| Proposal {
                bbox: p.bbox,
                feat: synth_features(p, &scene, config, split_seed(feats_base, i as u64)),
            })
            .collect();
        let grid = grid_features(&scene, config, sub(3));
        return Ok(Sample {
            id: format!("s{index:06}"),
            grid_size: config.grid_size,
            grid,
            proposals,
            refs,
        });
    }
    Err(SynthError::ExhaustedAttempts { index })
}

/// Train/val/test sample lists generated from per-index seeds.
#[derive(Debug, Clone)]
pub struct DatasetSplits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Generates `n` samples and partitions them: val and test take the floors of
/// their ratios, the remainder goes to train.
pub fn generate_dataset(
    n: usize,
    ratios: [f64; 3],
    master_seed: u64,
    config: &SynthConfig,
) -> Result<DatasetSplits, SynthError> {
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(SynthError::RatiosDoNotSumToOne(sum));
    }
    config.validate()?;
    let val_n = (ratios[1] * n as f64).floor() as usize;
    let test_n = (ratios[2] * n as f64).floor() as usize;
    let train_n = n - val_n - test_n;
    let mut samples = Vec::with_capacity(n);
    for index in 0..n {
        samples.push(generate_sample(master_seed, index, config)?);
    }
    let test = samples.split_off(train_n + val_n);
    let val = samples.split_off(train_n);
    Ok(DatasetSplits {
        train: samples,
        val,
        test,
    })
}

/// File layout of a built dataset directory.
#[derive(Debug, Clone)]
pub struct DatasetSummary {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub files: Vec<std::path::PathBuf>,
}

/// Generates the dataset and writes `train.jsonl`, `val.jsonl`, `test.jsonl`,
/// and `vocab.json` into `out_dir`.
pub fn build_dataset(
    n: usize,
    ratios: [f64; 3],
    master_seed: u64,
    config: &SynthConfig,
    out_dir: &std::path::Path,
) -> Result<DatasetSummary, crate::io::IoError> {
    let splits = generate_dataset(n, ratios, master_seed, config)
        .map_err(|e| crate::io::IoError::Config(e.to_string()))?;
    std::fs::create_dir_all(out_dir).map_err(|e| crate::io::IoError::File {
        path: out_dir.display().to_string(),
        message: e.to_string(),
    })?;
    let vocab = default_vocabulary();
    let mut files = Vec::new();
    for (name, samples) in [
        ("train.jsonl", &splits.train),
        ("val.jsonl", &splits.val),
        ("test.jsonl", &splits.test),
    ] {
        let path = out_dir.join(name);
        crate::io::write_samples(&path, samples)?;
        files.push(path);
    }
    let vocab_path = out_dir.join("vocab.json");
    crate::io::write_vocab(&vocab_path, &vocab)?;
    files.push(vocab_path);
    Ok(DatasetSummary {
        train: splits.train.len(),
        val: splits.val.len(),
        test: splits.test.len(),
        files,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let cfg = SynthConfig::default();
        let a = generate_scene(42, &cfg).unwrap();
        let b = generate_scene(42, &cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(43, &cfg).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_objects_gives_background_scene() {
        let cfg = SynthConfig {
            min_objects: 0,
            max_objects: 0,
            ..SynthConfig::default()
        };
        let scene = generate_scene(7, &cfg).unwrap();
        assert!(scene.objects.is_empty());
        assert_eq!(scene.background, BACKGROUND);
        let refs = render_caption(&scene).unwrap();
        assert_eq!(refs.len(), 2);
        assert!(refs[0].alignments.is_empty());
        assert!(!refs[0].tokens.is_empty());
    }

    #[test]
    fn part_geometry_holds_over_many_seeds() {
        let cfg = SynthConfig::default();
        for seed in 0..1000u64 {
            let scene = generate_scene(seed, &cfg).unwrap();
            for obj in &scene.objects {
                assert!((2..=4).contains(&obj.parts.len()));
                assert!(obj.discriminative < obj.parts.len());
                for part in &obj.parts {
                    assert!(obj.bbox.contains(part), "seed {seed}");
                    assert!(part.iou(&obj.bbox) <= 0.5, "seed {seed}");
                }
                let u = union_box(&obj.parts).unwrap();
                assert!(u.iou(&obj.bbox) > 0.5, "seed {seed}");
            }
        }
    }

    #[test]
    fn zero_jitter_and_min_budget_reproduce_scene_boxes() {
        let cfg = SynthConfig {
            jitter: 0.0,
            dup_per_object: 0,
            min_noise: 0,
            max_objects: 1,
            min_objects: 1,
            num_proposals: 7,
            ..SynthConfig::default()
        };
        let scene = generate_scene(3, &cfg).unwrap();
        let obj = &scene.objects[0];
        // Pad target set to the exact object proposal count for this scene.
        let exact = SynthConfig {
            num_proposals: 1 + obj.parts.len(),
            ..cfg
        };
        let proposals = make_proposals(&scene, &exact, 9).unwrap();
        assert_eq!(proposals.len(), 1 + obj.parts.len());
        assert_eq!(proposals[0].bbox, obj.bbox);
        for (i, part) in obj.parts.iter().enumerate() {
            assert_eq!(proposals[1 + i].bbox, *part);
        }
    }

    #[test]
    fn proposal_count_matches_budget_arithmetic() {
        let cfg = SynthConfig::default();
        for seed in 0..50u64 {
            let scene = generate_scene(seed, &cfg).unwrap();
            let proposals = make_proposals(&scene, &cfg, seed + 1).unwrap();
            assert_eq!(proposals.len(), cfg.num_proposals);
            let object_props = scene
                .objects
                .iter()
                .map(|o| cfg.full_per_object + o.parts.len() + cfg.dup_per_object)
                .sum::<usize>();
            let noise = proposals
                .iter()
                .filter(|p| p.provenance == Provenance::Noise)
                .count();
            assert_eq!(noise, cfg.num_proposals - object_props);
            assert!(noise >= cfg.min_noise);
        }
    }

    #[test]
    fn part_proposals_keep_partial_iou_bound() {
        let cfg = SynthConfig::default();
        for seed in 0..1000u64 {
            let scene = generate_scene(seed, &cfg).unwrap();
            let proposals = make_proposals(&scene, &cfg, seed ^ 0xABCD).unwrap();
            for p in &proposals {
                if let Provenance::Part { object, .. } = p.provenance {
                    assert!(
                        p.bbox.iou(&scene.objects[object].bbox) <= 0.5,
                        "seed {seed}"
                    );
                }
            }
        }
    }

    #[test]
    fn noiseless_features_share_class_components() {
        let cfg = SynthConfig {
            sigma: 0.0,
            beta: 0.0,
            ..SynthConfig::default()
        };
        let scene = generate_scene(11, &cfg).unwrap();
        let proposals = make_proposals(&scene, &cfg, 12).unwrap();
        let parts: Vec<&ProposalSpec> = proposals
            .iter()
            .filter(|p| matches!(p.provenance, Provenance::Part { object: 0, .. }))
            .collect();
        assert!(parts.len() >= 2);
        let protos = num_prototypes();
        let f0 = synth_features(parts[0], &scene, &cfg, 1);
        let f1 = synth_features(parts[1], &scene, &cfg, 2);
        assert_eq!(&f0[..protos], &f1[..protos]);
    }

    #[test]
    fn noise_proposals_carry_background_prototype() {
        let cfg = SynthConfig {
            sigma: 0.0,
            ..SynthConfig::default()
        };
        let scene = generate_scene(13, &cfg).unwrap();
        let proposals = make_proposals(&scene, &cfg, 14).unwrap();
        let noise = proposals
            .iter()
            .find(|p| p.provenance == Provenance::Noise)
            .unwrap();
        let f = synth_features(noise, &scene, &cfg, 5);
        assert_eq!(f[CLASSES.len()], 1.0);
        for (i, v) in f[..CLASSES.len()].iter().enumerate() {
            assert_eq!(*v, 0.0, "class slot {i}");
        }
    }

    #[test]
    fn probe_scorer_ranks_discriminative_part_above_full() {
        // Fixed linear scorer: class prototype plus the salience direction.
        let cfg = SynthConfig {
            sigma: 0.0,
            beta: 1.5,
            ..SynthConfig::default()
        };
        let scene = generate_scene(17, &cfg).unwrap();
        let proposals = make_proposals(&scene, &cfg, 18).unwrap();
        let protos = num_prototypes();
        for (oi, obj) in scene.objects.iter().enumerate() {
            let mut w = vec![0.0; cfg.feat_dim];
            w[obj.class] = 1.0;
            w[protos] = 1.0;
            let score = |f: &[f64]| -> f64 { f.iter().zip(&w).map(|(a, b)| a * b).sum() };
            let full = proposals
                .iter()
                .find(|p| p.provenance == (Provenance::Full { object: oi }))
                .unwrap();
            let disc = proposals
                .iter()
                .find(|p| {
                    matches!(
                        p.provenance,
                        Provenance::Part { object, discriminative: true, .. } if object == oi
                    )
                })
                .unwrap();
            let sf = score(&synth_features(full, &scene, &cfg, 1));
            let sd = score(&synth_features(disc, &scene, &cfg, 2));
            assert!(sd > sf, "object {oi}: {sd} <= {sf}");
        }
    }

    #[test]
    fn captions_have_aligned_class_tokens() {
        let vocab = default_vocabulary();
        let cfg = SynthConfig::default();
        for seed in 0..100u64 {
            let scene = generate_scene(seed, &cfg).unwrap();
            let refs = render_caption(&scene).unwrap();
            assert_eq!(refs.len(), 2);
            for r in &refs {
                // Zero OOV through the vocabulary.
                vocab.encode(&r.tokens).unwrap();
                assert_eq!(r.alignments.len(), scene.objects.len());
                let noun_positions: Vec<usize> = r
                    .tokens
                    .iter()
                    .enumerate()
                    .filter(|(_, t)| vocab.is_noun_token(t))
                    .map(|(i, _)| i)
                    .collect();
                let aligned: Vec<usize> = r.alignments.iter().map(|a| a.pos).collect();
                assert_eq!(noun_positions, aligned);
                // Alignments point at full object boxes, never part boxes.
                for (a, obj) in r.alignments.iter().zip(&scene.objects) {
                    assert_eq!(a.bbox, obj.bbox);
                    assert_eq!(&r.tokens[a.pos], obj.class_label().unwrap());
                }
            }
        }
    }

    #[test]
    fn one_object_scene_has_one_noun_per_ref() {
        let vocab = default_vocabulary();
        let cfg = SynthConfig {
            min_objects: 1,
            max_objects: 1,
            ..SynthConfig::default()
        };
        let scene = generate_scene(23, &cfg).unwrap();
        let refs = render_caption(&scene).unwrap();
        for r in &refs {
            let nouns = r.tokens.iter().filter(|t| vocab.is_noun_token(t)).count();
            assert_eq!(nouns, 1);
            assert_eq!(r.alignments.len(), 1);
        }
    }

    #[test]
    fn samples_are_deterministic_and_valid() {
        let cfg = SynthConfig::default();
        let vocab = default_vocabulary();
        let a = generate_sample(99, 0, &cfg).unwrap();
        let b = generate_sample(99, 0, &cfg).unwrap();
        assert_eq!(a, b);
        a.validate(&vocab).unwrap();
        assert_eq!(a.proposals.len(), cfg.num_proposals);
        assert_eq!(a.grid.len(), cfg.grid_size * cfg.grid_size);
    }

    #[test]
    fn dataset_split_arithmetic() {
        let cfg = SynthConfig::default();
        let ds = generate_dataset(10, [0.8, 0.1, 0.1], 5, &cfg).unwrap();
        assert_eq!(ds.train.len(), 8);
        assert_eq!(ds.val.len(), 1);
        assert_eq!(ds.test.len(), 1);
        // Partition: no id in two splits.
        let mut ids: Vec<&str> = ds
            .train
            .iter()
            .chain(&ds.val)
            .chain(&ds.test)
            .map(|s| s.id.as_str())
            .collect();
        ids.sort_unstable();
        let before = ids.len();
        ids.dedup();
        assert_eq!(ids.len(), before);
        assert!(matches!(
            generate_dataset(10, [0.8, 0.1, 0.2], 5, &cfg),
            Err(SynthError::RatiosDoNotSumToOne(_))
        ));
    }

    #[test]
    fn config_validation_catches_bad_budgets() {
        let cfg = SynthConfig {
            num_proposals: 5,
            ..SynthConfig::default()
        };
        assert!(matches!(
            cfg.validate(),
            Err(SynthError::ProposalBudget { .. })
        ));
        let cfg = SynthConfig {
            feat_dim: 4,
            ..SynthConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
