//! Synthetic correct/incorrect token sequences.
//!
//! Vocabulary layout (64 ids):
//!
//! | ids     | role                                   |
//! |---------|----------------------------------------|
//! | 0       | start-of-sequence context              |
//! | 1..=31  | template skeleton tokens               |
//! | 32..=47 | slot tokens, drawn per task            |
//! | 48..=63 | critical tokens                        |
//!
//! A template fixes a skeleton, a slot position and a key. The token right
//! after the slot is critical: `48 + (slot + key) mod 16`. The incorrect
//! variant replaces it with the next critical id (an off-by-one), so the two
//! sequences differ in exactly one position.

use serde::{Deserialize, Serialize};

use super::rng::ToyRng;
use crate::align::{self, ExternalOffsets, SidecarRecord, Tokenizer};
use crate::dataset::{PairMeta, PairRecord};

pub const VOCAB_SIZE: usize = 64;
pub const BOS: usize = 0;
const SKELETON: (usize, usize) = (1, 31);
const SLOT_BASE: usize = 32;
const CRITICAL_BASE: usize = 48;
const GROUP: usize = 16;
const TEMPLATES: usize = 8;
const TOKENS_PER_LINE: usize = 4;
const CREATED_AT: &str = "1970-01-01T00:00:00Z";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub template_id: usize,
    /// The full correct sequence.
    pub context: Vec<usize>,
    pub critical_position: usize,
    pub correct_token: usize,
    pub distractor_token: usize,
}

impl SyntheticTask {
    pub fn correct_sequence(&self) -> &[usize] {
        &self.context
    }

    pub fn incorrect_sequence(&self) -> Vec<usize> {
        let mut seq = self.context.clone();
        seq[self.critical_position] = self.distractor_token;
        seq
    }
}

#[derive(Debug, Clone)]
struct Template {
    skeleton: Vec<usize>,
    slot: usize,
    key: usize,
}

fn templates(rng: &mut ToyRng) -> Vec<Template> {
    (0..TEMPLATES)
        .map(|_| {
            let len = rng.inclusive(8, 16);
            let skeleton = (0..len).map(|_| rng.inclusive(SKELETON.0, SKELETON.1)).collect();
            let slot = rng.inclusive(2, len - 2);
            Template { skeleton, slot, key: rng.below(GROUP) }
        })
        .collect()
}

/// Renders a sequence as text: words `t<id>`, a line break after every
/// fourth token and spaces elsewhere. Returns the text and, per token, the
/// byte span covering its word and the separator after it.
pub fn render(tokens: &[usize]) -> (String, Vec<[usize; 2]>) {
    let mut text = String::new();
    let mut spans = Vec::with_capacity(tokens.len());
    for (i, tok) in tokens.iter().enumerate() {
        let start = text.len();
        text.push_str(&format!("t{tok}"));
        if i + 1 < tokens.len() {
            text.push(if (i + 1) % TOKENS_PER_LINE == 0 { '\n' } else { ' ' });
        } else {
            text.push('\n');
        }
        spans.push([start, text.len()]);
    }
    (text, spans)
}

/// `n_tasks` tasks and their text pairs, deterministic in `seed`.
pub fn gen_corpus(seed: u64, n_tasks: usize) -> Vec<(PairRecord, SyntheticTask)> {
    assert!(n_tasks >= 1, "n_tasks must be at least 1");
    let mut rng = ToyRng::new(seed);
    let templates = templates(&mut rng);
    (0..n_tasks)
        .map(|i| {
            let template_id = rng.below(TEMPLATES);
            let t = &templates[template_id];
            let slot_value = rng.below(GROUP);
            let mut context = t.skeleton.clone();
            context[t.slot] = SLOT_BASE + slot_value;
            let critical_position = t.slot + 1;
            let rule = (slot_value + t.key) % GROUP;
            let correct_token = CRITICAL_BASE + rule;
            let distractor_token = CRITICAL_BASE + (rule + 1) % GROUP;
            context[critical_position] = correct_token;
            let task = SyntheticTask { template_id, context, critical_position, correct_token, distractor_token };

            let (correct, _) = render(task.correct_sequence());
            let (incorrect, _) = render(&task.incorrect_sequence());
            let similarity = crate::augment::similarity(&correct, &incorrect);
            let pair = PairRecord {
                id: format!("toy-{seed}-{i}"),
                instruction: format!("template {template_id}"),
                correct,
                incorrect,
                meta: Some(PairMeta { teacher_model: "synthetic".into(), similarity, created_at: CREATED_AT.into() }),
            };
            (pair, task)
        })
        .collect()
}

/// A task with its hybrid vectors expressed over model tokens.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub task: SyntheticTask,
    pub correct: Vec<usize>,
    pub incorrect: Vec<usize>,
    pub hybrid_correct: Vec<u8>,
    pub hybrid_incorrect: Vec<u8>,
}

/// Builds masks for every pair, tokenizing the rendered text with the
/// model's own token boundaries supplied as an external tokenization.
pub fn prepare(corpus: &[(PairRecord, SyntheticTask)]) -> Result<Vec<TrainExample>, align::AlignError> {
    corpus
        .iter()
        .map(|(pair, task)| {
            let correct = task.correct_sequence().to_vec();
            let incorrect = task.incorrect_sequence();
            let sidecar = [&correct, &incorrect].map(|seq| {
                let (text, spans) = render(seq);
                SidecarRecord { text_sha256: align::text_sha256(&text), spans }
            });
            let tokenizer = Tokenizer::External(ExternalOffsets::from_records(sidecar));
            let masks = align::build_pair_masks(pair, &tokenizer, crate::diff::DEFAULT_CHAR_CAP)?;
            Ok(TrainExample {
                task: task.clone(),
                correct,
                incorrect,
                hybrid_correct: masks.hybrid_correct,
                hybrid_incorrect: masks.hybrid_incorrect,
            })
        })
        .collect()
}
