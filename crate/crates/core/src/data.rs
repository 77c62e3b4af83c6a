//! Synthetic scenes: colored shapes on a 4×4 cell grid, rendered to RGB,
//! with captions from a fixed grammar and single-word question/answer pairs
//! for the instruction stage.
//!
//! Everything is a deterministic function of the seed, and captions are a
//! deterministic function of the visible scene, so exact-match evaluation
//! is well defined.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{config_err, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub const GRID: usize = 4;

/// Instruction prefix used for single-word answers.
pub const ANSWER_PROMPT: &str = "Answer the question using a single word or phrase.";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Color {
    Red,
    Green,
    Blue,
}

impl Color {
    pub const ALL: [Color; 3] = [Color::Red, Color::Green, Color::Blue];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 200, 60],
            Color::Blue => [50, 80, 230],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    pub kind: ShapeKind,
    pub color: Color,
    /// (row, col) on the 4×4 cell grid.
    pub cell: (usize, usize),
}

/// Shapes in scan order (row-major by cell), one per cell at most.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneRecord {
    pub placements: Vec<Placement>,
}

fn relation(from: (usize, usize), to: (usize, usize)) -> &'static str {
    let dr = to.0 as i64 - from.0 as i64;
    let dc = to.1 as i64 - from.1 as i64;
    if dr.abs() >= dc.abs() {
        if dr > 0 {
            "above"
        } else {
            "below"
        }
    } else if dc > 0 {
        "left of"
    } else {
        "right of"
    }
}

impl SceneRecord {
    /// The caption is determined by what is visible: single shape scenes
    /// are "a <color> <shape>"; otherwise the scan-first shape and its
    /// scan-second neighbour are related, with the subject picked by the
    /// parity of the first cell so all four relations occur.
    pub fn caption(&self) -> String {
        let first = &self.placements[0];
        let one = alloc::format!("a {} {}", first.color.word(), first.kind.word());
        if self.placements.len() == 1 {
            return one;
        }
        let second = &self.placements[1];
        let (subj, obj) = if (first.cell.0 + first.cell.1) % 2 == 0 {
            (first, second)
        } else {
            (second, first)
        };
        alloc::format!(
            "a {} {} {} a {} {}",
            subj.color.word(),
            subj.kind.word(),
            relation(subj.cell, obj.cell),
            obj.color.word(),
            obj.kind.word()
        )
    }

    pub fn count_word(&self) -> &'static str {
        match self.placements.len() {
            1 => "one",
            2 => "two",
            _ => "three",
        }
    }
}

/// One dataset entry: the scene, its rendering, and both supervision texts.
#[derive(Debug, Clone)]
pub struct SceneSample {
    pub record: SceneRecord,
    /// Interleaved RGB, row-major, `resolution²·3` bytes.
    pub pixels: Vec<u8>,
    pub caption: String,
    pub question: String,
    pub answer: String,
}

fn cell_of(index: usize) -> (usize, usize) {
    (index / GRID, index % GRID)
}

fn sample_scene(rng: &mut rng::StdRng) -> SceneRecord {
    let count = 1 + rng.random_range(0..3usize);
    // distinct cells via partial shuffle of 0..16
    let mut cells: Vec<usize> = (0..GRID * GRID).collect();
    for i in 0..count {
        let j = i + rng.random_range(0..cells.len() - i);
        cells.swap(i, j);
    }
    let mut chosen: Vec<usize> = cells[..count].to_vec();
    chosen.sort_unstable();
    let placements = chosen
        .into_iter()
        .map(|c| Placement {
            kind: ShapeKind::ALL[rng.random_range(0..3)],
            color: Color::ALL[rng.random_range(0..3)],
            cell: cell_of(c),
        })
        .collect();
    SceneRecord { placements }
}

fn sample_question(record: &SceneRecord, rng: &mut rng::StdRng) -> (String, String) {
    let first = &record.placements[0];
    match rng.random_range(0..3u32) {
        0 => (
            alloc::format!("what color is the {}", first.kind.word()),
            first.color.word().to_string(),
        ),
        1 => (
            alloc::format!("what shape is {}", first.color.word()),
            first.kind.word().to_string(),
        ),
        _ => (
            "how many shapes are there".to_string(),
            record.count_word().to_string(),
        ),
    }
}

fn inside(kind: ShapeKind, dx: f64, dy: f64, cell: f64) -> bool {
    let c = cell / 2.0;
    match kind {
        ShapeKind::Circle => {
            let r = 0.36 * cell;
            (dx - c) * (dx - c) + (dy - c) * (dy - c) <= r * r
        }
        ShapeKind::Square => {
            let h = 0.32 * cell;
            (dx - c).abs() <= h && (dy - c).abs() <= h
        }
        ShapeKind::Triangle => {
            // upward triangle: apex on top, horizontal base below
            let top = c - 0.40 * cell;
            let bottom = c + 0.34 * cell;
            if dy < top || dy > bottom {
                return false;
            }
            let t = (dy - top) / (bottom - top);
            let half = t * 0.42 * cell;
            (dx - c).abs() <= half
        }
    }
}

/// Render the scene on a dark background. `resolution` must be a multiple
/// of the cell grid.
pub fn render_scene(record: &SceneRecord, resolution: usize) -> Result<Vec<u8>> {
    if resolution == 0 || resolution % GRID != 0 {
        return Err(config_err!(
            "resolution {resolution} is not a multiple of the {GRID}-cell grid"
        ));
    }
    const BG: u8 = 20;
    let cell = resolution / GRID;
    let mut pixels = alloc::vec![BG; resolution * resolution * 3];
    for p in &record.placements {
        let (row, col) = p.cell;
        let rgb = p.color.rgb();
        for y in 0..cell {
            for x in 0..cell {
                if inside(p.kind, x as f64 + 0.5, y as f64 + 0.5, cell as f64) {
                    let py = row * cell + y;
                    let px = col * cell + x;
                    let base = (py * resolution + px) * 3;
                    pixels[base..base + 3].copy_from_slice(&rgb);
                }
            }
        }
    }
    Ok(pixels)
}

/// Normalize interleaved RGB bytes into an `[R, R, 3]` tensor in [0,1].
pub fn image_tensor(pixels: &[u8], resolution: usize) -> Result<Tensor> {
    let data: Vec<f64> = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(alloc::vec![resolution, resolution, 3], data)
}

/// Deterministic synthetic dataset.
pub fn make_dataset(n: usize, seed: u64, resolution: usize) -> Result<Vec<SceneSample>> {
    if n == 0 {
        return Err(config_err!("dataset size must be at least 1"));
    }
    let mut rng = rng::seeded(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let record = sample_scene(&mut rng);
        let pixels = render_scene(&record, resolution)?;
        let caption = record.caption();
        let (question, answer) = sample_question(&record, &mut rng);
        out.push(SceneSample {
            record,
            pixels,
            caption,
            question,
            answer,
        });
    }
    Ok(out)
}

// ── vocabulary and tokenizer ────────────────────────────────────────────

/// Every word the caption grammar, the question templates, and the answer
/// prompt can produce.
const WORDS: [&str; 32] = [
    "a", "red", "green", "blue", "circle", "square", "triangle", "above", "below", "left",
    "right", "of", "what", "color", "is", "the", "shape", "how", "many", "shapes", "are",
    "there", "one", "two", "three", "answer", "question", "using", "single", "word", "or",
    "phrase",
];

/// Whitespace word-level tokenizer over the closed grammar vocabulary.
pub struct Vocab;

impl Vocab {
    pub const BOS: usize = 0;
    pub const EOS: usize = 1;
    pub const SEP: usize = 2;
    const SPECIALS: [&'static str; 3] = ["<bos>", "<eos>", "<sep>"];

    pub fn size() -> usize {
        Self::SPECIALS.len() + WORDS.len()
    }

    pub fn word(id: usize) -> &'static str {
        if id < Self::SPECIALS.len() {
            Self::SPECIALS[id]
        } else {
            WORDS[id - Self::SPECIALS.len()]
        }
    }

    pub fn id(word: &str) -> Option<usize> {
        Self::SPECIALS
            .iter()
            .position(|w| *w == word)
            .or_else(|| {
                WORDS
                    .iter()
                    .position(|w| *w == word)
                    .map(|p| p + Self::SPECIALS.len())
            })
    }

    /// Lowercase, split on whitespace, strip punctuation.
    pub fn encode(text: &str) -> Result<Vec<usize>> {
        let mut ids = Vec::new();
        for tok in text.split_whitespace() {
            let clean: String = tok
                .chars()
                .filter(|c| c.is_ascii_alphabetic())
                .map(|c| c.to_ascii_lowercase())
                .collect();
            if clean.is_empty() {
                continue;
            }
            let id = Vocab::id(&clean)
                .ok_or_else(|| config_err!("word '{clean}' is outside the grammar vocabulary"))?;
            ids.push(id);
        }
        Ok(ids)
    }

    pub fn decode(ids: &[usize]) -> String {
        let words: Vec<&str> = ids.iter().map(|&i| Vocab::word(i)).collect();
        words.join(" ")
    }
}

/// Stage-1 text: `<bos> caption <eos>`, supervised from `<bos>` through the
/// last caption word.
pub fn caption_sequence(sample: &SceneSample, n_visual: usize) -> Result<(Vec<usize>, Vec<bool>)> {
    let mut ids = alloc::vec![Vocab::BOS];
    ids.extend(Vocab::encode(&sample.caption)?);
    ids.push(Vocab::EOS);
    let t = ids.len();
    let mut mask = alloc::vec![false; n_visual + t];
    for i in 0..t - 1 {
        mask[n_visual + i] = true;
    }
    Ok((ids, mask))
}

/// Stage-2 text: `<bos> prompt question <sep> answer <eos>`, supervised on
/// the answer tokens only (from `<sep>` through the answer words).
pub fn instruction_sequence(
    sample: &SceneSample,
    n_visual: usize,
) -> Result<(Vec<usize>, Vec<bool>)> {
    let mut ids = alloc::vec![Vocab::BOS];
    ids.extend(Vocab::encode(ANSWER_PROMPT)?);
    ids.extend(Vocab::encode(&sample.question)?);
    let sep_at = ids.len();
    ids.push(Vocab::SEP);
    ids.extend(Vocab::encode(&sample.answer)?);
    ids.push(Vocab::EOS);
    let t = ids.len();
    let mut mask = alloc::vec![false; n_visual + t];
    for i in sep_at..t - 1 {
        mask[n_visual + i] = true;
    }
    Ok((ids, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeSet;

    #[test]
    fn same_seed_bit_identical() {
        let a = make_dataset(20, 9, 32).unwrap();
        let b = make_dataset(20, 9, 32).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.record, y.record);
            assert_eq!(x.pixels, y.pixels);
            assert_eq!(x.caption, y.caption);
            assert_eq!(x.question, y.question);
            assert_eq!(x.answer, y.answer);
        }
        let c = make_dataset(20, 10, 32).unwrap();
        assert!(a.iter().zip(&c).any(|(x, y)| x.record != y.record));
    }

    #[test]
    fn caption_words_match_record() {
        for sample in make_dataset(200, 3, 32).unwrap() {
            let caption = sample.caption;
            let first = &sample.record.placements[0];
            assert!(caption.contains(first.color.word()));
            assert!(caption.contains(first.kind.word()));
            if sample.record.placements.len() == 1 {
                assert_eq!(
                    caption,
                    alloc::format!("a {} {}", first.color.word(), first.kind.word())
                );
            } else {
                let second = &sample.record.placements[1];
                assert!(caption.contains(second.color.word()));
                assert!(caption.contains(second.kind.word()));
                assert!(["above", "below", "left of", "right of"]
                    .iter()
                    .any(|r| caption.contains(r)));
            }
        }
    }

    #[test]
    fn all_four_relations_reachable() {
        let mut seen = BTreeSet::new();
        for sample in make_dataset(500, 4, 32).unwrap() {
            for rel in ["above", "below", "left of", "right of"] {
                if sample.caption.contains(rel) {
                    seen.insert(rel);
                }
            }
        }
        assert_eq!(seen.len(), 4, "only saw {seen:?}");
    }

    #[test]
    fn scan_order_and_distinct_cells() {
        for sample in make_dataset(300, 5, 32).unwrap() {
            let cells: Vec<usize> = sample
                .record
                .placements
                .iter()
                .map(|p| p.cell.0 * GRID + p.cell.1)
                .collect();
            assert!(cells.windows(2).all(|w| w[0] < w[1]), "{cells:?}");
        }
    }

    #[test]
    fn vocabulary_is_exactly_the_grammar_word_set() {
        // enumerate every word the generators can emit
        let mut expected: BTreeSet<String> = BTreeSet::new();
        for w in ["a", "of", "above", "below", "left", "right"] {
            expected.insert(w.into());
        }
        for c in Color::ALL {
            expected.insert(c.word().into());
        }
        for k in ShapeKind::ALL {
            expected.insert(k.word().into());
        }
        for w in ["what", "color", "is", "the", "shape", "how", "many", "shapes", "are", "there"]
        {
            expected.insert(w.into());
        }
        for w in ["one", "two", "three"] {
            expected.insert(w.into());
        }
        for tok in ANSWER_PROMPT.split_whitespace() {
            let clean: String = tok
                .chars()
                .filter(|c| c.is_ascii_alphabetic())
                .map(|c| c.to_ascii_lowercase())
                .collect();
            expected.insert(clean);
        }
        let actual: BTreeSet<String> = WORDS.iter().map(|w| w.to_string()).collect();
        assert_eq!(actual, expected);
        assert_eq!(Vocab::size(), WORDS.len() + 3);
    }

    #[test]
    fn every_sample_tokenizes() {
        for sample in make_dataset(300, 6, 32).unwrap() {
            let (ids, mask) = caption_sequence(&sample, 4).unwrap();
            assert_eq!(ids[0], Vocab::BOS);
            assert_eq!(*ids.last().unwrap(), Vocab::EOS);
            assert_eq!(mask.len(), 4 + ids.len());
            assert!(!mask[..4].iter().any(|&m| m));
            let (ids2, mask2) = instruction_sequence(&sample, 4).unwrap();
            assert!(ids2.contains(&Vocab::SEP));
            // only answer positions supervised
            let sep = ids2.iter().position(|&i| i == Vocab::SEP).unwrap();
            for (i, &m) in mask2[4..].iter().enumerate() {
                assert_eq!(m, i >= sep && i < ids2.len() - 1);
            }
        }
    }

    #[test]
    fn tokenizer_round_trip_and_punctuation() {
        let ids = Vocab::encode("Answer the question using a single word or phrase.").unwrap();
        assert_eq!(
            Vocab::decode(&ids),
            "answer the question using a single word or phrase"
        );
        assert!(Vocab::encode("a purple pentagon").is_err());
    }

    #[test]
    fn render_paints_the_right_cell() {
        let record = SceneRecord {
            placements: alloc::vec![Placement {
                kind: ShapeKind::Square,
                color: Color::Red,
                cell: (1, 2),
            }],
        };
        let r = 64;
        let pixels = render_scene(&record, r).unwrap();
        // centre of cell (1,2)
        let cy = 16 + 8;
        let cx = 32 + 8;
        let base = (cy * r + cx) * 3;
        assert_eq!(&pixels[base..base + 3], &Color::Red.rgb());
        // centre of an empty cell stays background
        let base = ((3 * 16 + 8) * r + 8) * 3;
        assert_eq!(&pixels[base..base + 3], &[20, 20, 20]);
        // indivisible resolution is rejected
        assert!(render_scene(&record, 30).is_err());
    }

    #[test]
    fn shapes_have_distinct_masks() {
        let masks: Vec<Vec<bool>> = ShapeKind::ALL
            .iter()
            .map(|&k| {
                let mut m = Vec::new();
                for y in 0..16 {
                    for x in 0..16 {
                        m.push(inside(k, x as f64 + 0.5, y as f64 + 0.5, 16.0));
                    }
                }
                m
            })
            .collect();
        assert_ne!(masks[0], masks[1]);
        assert_ne!(masks[0], masks[2]);
        assert_ne!(masks[1], masks[2]);
        for m in &masks {
            let area = m.iter().filter(|&&b| b).count();
            assert!(area > 30, "shape too small: {area}");
        }
    }

    #[test]
    fn image_tensor_is_normalized() {
        let record = SceneRecord {
            placements: alloc::vec![Placement {
                kind: ShapeKind::Circle,
                color: Color::Blue,
                cell: (0, 0),
            }],
        };
        let pixels = render_scene(&record, 32).unwrap();
        let t = image_tensor(&pixels, 32).unwrap();
        assert_eq!(t.dims(), &[32, 32, 3]);
        assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
