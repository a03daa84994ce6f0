use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::mentions::SynonymDict;
use super::vocab::Vocabulary;
use crate::encoders::{ImageInput, TextInput};
use crate::error::{Error, Result};

/// One object class: surface forms for captions and the patch pattern used
/// to render it. Signature entries of `0.0` are background features; the
/// rest lie in `[0.5, 1.0]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub synonyms: Vec<Vec<String>>,
    pub signature: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub classes: Vec<ClassSpec>,
    pub grid_height: usize,
    pub grid_width: usize,
    pub features: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Side lengths of object boxes in patches.
    pub box_min: usize,
    pub box_max: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
    pub signature_noise: f64,
    pub background_max: f64,
    /// Caption length cap, must not exceed the text encoder's maximum.
    pub max_caption_len: usize,
}

fn class(name: &str, synonyms: &[&str], active: &[(usize, f64)], features: usize) -> ClassSpec {
    let mut signature = vec![0.0; features];
    for &(d, v) in active {
        signature[d] = v;
    }
    ClassSpec {
        name: name.to_string(),
        synonyms: synonyms
            .iter()
            .map(|s| s.split_whitespace().map(str::to_string).collect())
            .collect(),
        signature,
    }
}

impl CorpusConfig {
    fn with_classes(classes: Vec<ClassSpec>, seed: u64) -> Self {
        Self {
            classes,
            grid_height: 8,
            grid_width: 8,
            features: 12,
            objects_min: 1,
            objects_max: 3,
            box_min: 2,
            box_max: 3,
            train_size: 600,
            test_size: 150,
            seed,
            signature_noise: 0.05,
            background_max: 0.3,
            max_caption_len: 16,
        }
    }

    /// Animals and vehicles.
    pub fn primary_domain(seed: u64) -> Self {
        let f = 12;
        Self::with_classes(
            vec![
                class("dog", &["dog", "puppy"], &[(0, 0.9), (1, 0.7), (2, 0.8)], f),
                class("cat", &["cat", "kitten"], &[(3, 0.8), (4, 0.95), (5, 0.6)], f),
                class("bird", &["bird"], &[(6, 0.7), (7, 0.9), (8, 0.85)], f),
                class("horse", &["horse", "pony"], &[(9, 0.95), (10, 0.65), (11, 0.8)], f),
                class("car", &["car"], &[(0, 0.6), (4, 0.8), (8, 0.95)], f),
                class("boat", &["boat", "ship"], &[(2, 0.65), (6, 0.95), (10, 0.75)], f),
            ],
            seed,
        )
    }

    /// Household objects rendered with disjoint signatures; used as the
    /// held-out domain for fine-tuning experiments.
    pub fn second_domain(seed: u64) -> Self {
        let f = 12;
        Self::with_classes(
            vec![
                class("hotdog", &["hot dog", "sausage"], &[(1, 0.85), (5, 0.7), (9, 0.9)], f),
                class("cake", &["cake"], &[(3, 0.9), (7, 0.6), (11, 0.85)], f),
                class("clock", &["clock"], &[(0, 0.75), (5, 0.95), (10, 0.6)], f),
                class("chair", &["chair", "seat"], &[(1, 0.6), (6, 0.8), (11, 0.95)], f),
                class("kite", &["kite"], &[(2, 0.95), (4, 0.6), (9, 0.7)], f),
                class("lamp", &["lamp"], &[(3, 0.65), (8, 0.7), (10, 0.9)], f),
            ],
            seed,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.classes.len() < 2 {
            return bad("at least two classes are required");
        }
        if self.grid_height < 2 || self.grid_width < 2 {
            return bad("grid must be at least 2x2");
        }
        if self.objects_min == 0 || self.objects_min > self.objects_max {
            return bad("objects range must satisfy 1 <= min <= max");
        }
        if self.objects_max > self.classes.len() {
            return bad("more objects per image than classes");
        }
        if self.box_min == 0 || self.box_min > self.box_max {
            return bad("box side range must satisfy 1 <= min <= max");
        }
        if self.box_max > self.grid_height.min(self.grid_width) {
            return Err(Error::InvalidInput("grid too small for the requested boxes".into()));
        }
        if self.objects_max * self.box_min * self.box_min > self.grid_height * self.grid_width {
            return Err(Error::InvalidInput("grid too small for the requested objects".into()));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.signature.len() != self.features {
                return bad(&format!("class `{}` signature has wrong length", c.name));
            }
            if c.signature.iter().any(|&v| v != 0.0 && !(0.5..=1.0).contains(&v)) {
                return bad(&format!("class `{}` signature outside [0.5, 1.0]", c.name));
            }
            if c.synonyms.is_empty() || c.synonyms.iter().any(Vec::is_empty) {
                return bad(&format!("class `{}` needs non-empty synonyms", c.name));
            }
            if self.classes[..i].iter().any(|o| o.signature == c.signature) {
                return bad("class signatures must be pairwise distinct");
            }
        }
        Ok(())
    }

    pub fn synonym_dict(&self) -> SynonymDict {
        SynonymDict::new(
            self.classes
                .iter()
                .map(|c| (c.name.clone(), c.synonyms.clone()))
                .collect(),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Half-open patch box `[row0, row1) x [col0, col1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl BBox {
    pub fn new(row0: usize, col0: usize, row1: usize, col1: usize) -> Self {
        Self { row0, col0, row1, col1 }
    }

    pub fn area(&self) -> usize {
        self.row1.saturating_sub(self.row0) * self.col1.saturating_sub(self.col0)
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row0..self.row1).contains(&row) && (self.col0..self.col1).contains(&col)
    }

    pub fn intersects(&self, other: &BBox) -> bool {
        self.row0 < other.row1 && other.row0 < self.row1 && self.col0 < other.col1 && other.col0 < self.col1
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.row0 < self.row1 && self.col0 < self.col1 && self.row1 <= height && self.col1 <= width
    }

    /// Row-major patch indices inside the box.
    pub fn patches(&self, width: usize) -> Vec<usize> {
        (self.row0..self.row1)
            .flat_map(|r| (self.col0..self.col1).map(move |c| r * width + c))
            .collect()
    }
}

/// Half-open token span `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub class: usize,
    pub class_name: String,
    pub bbox: BBox,
    pub span: Span,
    pub single_instance: bool,
}

/// Records the edit that turned a positive caption into a hard negative.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Replacement {
    pub annotation: usize,
    pub original_class: usize,
    pub original_span: Span,
    pub replacement_class: usize,
    pub replacement_span: Span,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundedPair {
    pub id: String,
    pub seed: u64,
    pub split: Split,
    pub image: ImageInput,
    pub tokens: Vec<String>,
    pub caption: TextInput,
    pub annotations: Vec<Annotation>,
    pub replacement: Option<Replacement>,
}

impl GroundedPair {
    pub fn caption_text(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.image.height(), self.image.width());
        for a in &self.annotations {
            if !a.bbox.fits(h, w) || a.bbox.area() < 1 {
                return Err(Error::InvalidInput(format!("{}: bbox outside grid", self.id)));
            }
            if a.span.is_empty() || a.span.end > self.tokens.len() {
                return Err(Error::InvalidInput(format!("{}: span outside caption", self.id)));
            }
        }
        if self.tokens.len() != self.caption.len() {
            return Err(Error::InvalidInput(format!("{}: token/id length mismatch", self.id)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub vocabulary: Vocabulary,
    pub items: Vec<GroundedPair>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &GroundedPair> {
        self.items.iter().filter(move |p| p.split == split)
    }

    pub fn get(&self, id: &str) -> Option<&GroundedPair> {
        self.items.iter().find(|p| p.id == id)
    }
}

/// Per-item seed; a bijective mix of (corpus seed, split, index), so items of
/// different splits never share a seed.
pub fn item_seed(seed: u64, split: Split, index: usize) -> u64 {
    let tag = match split {
        Split::Train => 0u64,
        Split::Test => 1u64,
    };
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((tag << 40) | index as u64);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const ADJECTIVES: &[&str] = &["small", "big", "red", "old", "bright", "young", "blue", "green", "tiny"];
const PREDICATES: &[&[&str]] = &[
    &["chases"],
    &["watches"],
    &["follows"],
    &["faces"],
    &["holds"],
    &["sits", "near"],
    &["sits", "beside"],
    &["next", "to"],
    &["above"],
    &["below"],
];
const TAILS: &[&[&str]] = &[
    &["in", "the", "field"],
    &["on", "the", "street"],
    &["in", "the", "room"],
    &["at", "night"],
    &["today"],
    &["outside"],
];

pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let vocabulary = Vocabulary::default();
    let mut items = Vec::with_capacity(cfg.train_size + cfg.test_size);
    for (split, n) in [(Split::Train, cfg.train_size), (Split::Test, cfg.test_size)] {
        for index in 0..n {
            items.push(generate_item(cfg, &vocabulary, split, index)?);
        }
    }
    Ok(Corpus {
        config: cfg.clone(),
        vocabulary,
        items,
    })
}

fn generate_item(cfg: &CorpusConfig, vocab: &Vocabulary, split: Split, index: usize) -> Result<GroundedPair> {
    let seed = item_seed(cfg.seed, split, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, f) = (cfg.grid_height, cfg.grid_width, cfg.features);

    let count = rng.random_range(cfg.objects_min..=cfg.objects_max);
    let mut class_ids: Vec<usize> = (0..cfg.classes.len()).collect();
    class_ids.shuffle(&mut rng);
    class_ids.truncate(count);

    let mut boxes: Vec<BBox> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = None;
        for _attempt in 0..200 {
            let bh = rng.random_range(cfg.box_min..=cfg.box_max);
            let bw = rng.random_range(cfg.box_min..=cfg.box_max);
            if bh * bw < 2 {
                continue;
            }
            let r0 = rng.random_range(0..=h - bh);
            let c0 = rng.random_range(0..=w - bw);
            let b = BBox::new(r0, c0, r0 + bh, c0 + bw);
            if boxes.iter().all(|o| !o.intersects(&b)) {
                placed = Some(b);
                break;
            }
        }
        boxes.push(placed.ok_or_else(|| Error::InvalidInput("grid too small for the requested objects".into()))?);
    }

    let noise = Normal::new(0.0, cfg.signature_noise).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut data: Vec<f64> = (0..h * w * f).map(|_| rng.random_range(0.0..cfg.background_max)).collect();
    for (&cls, b) in class_ids.iter().zip(&boxes) {
        let sig = &cfg.classes[cls].signature;
        for p in b.patches(w) {
            for (d, &s) in sig.iter().enumerate() {
                if s != 0.0 {
                    data[p * f + d] = (s + noise.sample(&mut rng)).clamp(0.0, 1.0);
                }
            }
        }
    }
    let image = ImageInput::new(h, w, f, data)?;

    let (tokens, spans) = caption_for(cfg, &class_ids, &mut rng);
    if tokens.len() > cfg.max_caption_len {
        return Err(Error::InvalidConfig(format!(
            "caption of {} tokens exceeds the cap of {}",
            tokens.len(),
            cfg.max_caption_len
        )));
    }
    let caption = vocab.encode(&tokens)?;
    let annotations = class_ids
        .iter()
        .zip(&boxes)
        .zip(spans)
        .map(|((&cls, &bbox), span)| Annotation {
            class: cls,
            class_name: cfg.classes[cls].name.clone(),
            bbox,
            span,
            single_instance: true,
        })
        .collect();

    let split_name = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    let pair = GroundedPair {
        id: format!("{split_name}-{index:05}"),
        seed,
        split,
        image,
        tokens,
        caption,
        annotations,
        replacement: None,
    };
    pair.validate()?;
    Ok(pair)
}

/// `subject predicate object` captions with distractor words around the
/// class mentions.
fn caption_for(cfg: &CorpusConfig, classes: &[usize], rng: &mut ChaCha8Rng) -> (Vec<String>, Vec<Span>) {
    let mut tokens: Vec<String> = Vec::new();
    let mut spans = Vec::new();
    let push = |tokens: &mut Vec<String>, words: &[&str]| tokens.extend(words.iter().map(|w| w.to_string()));
    let mut mention = |tokens: &mut Vec<String>, cls: usize, rng: &mut ChaCha8Rng| {
        tokens.push("a".into());
        if rng.random_bool(0.3) {
            tokens.push(ADJECTIVES.choose(rng).unwrap().to_string());
        }
        let form = cfg.classes[cls].synonyms.choose(rng).unwrap();
        let start = tokens.len();
        tokens.extend(form.iter().cloned());
        spans.push(Span::new(start, tokens.len()));
    };

    match classes {
        [only] => {
            push(&mut tokens, if rng.random_bool(0.5) { &["a", "photo", "of"] } else { &["a", "picture", "of"] });
            mention(&mut tokens, *only, rng);
        }
        [subject, object, rest @ ..] => {
            mention(&mut tokens, *subject, rng);
            push(&mut tokens, PREDICATES.choose(rng).unwrap());
            mention(&mut tokens, *object, rng);
            for &c in rest {
                tokens.push("and".into());
                mention(&mut tokens, c, rng);
            }
        }
        [] => {}
    }
    if classes.len() < 3 && rng.random_bool(0.5) {
        push(&mut tokens, TAILS.choose(rng).unwrap());
    }
    (tokens, spans)
}

/// Replaces one mentioned object with a different class. Classes absent
/// from the image are preferred as replacements.
pub fn make_hard_negative(pair: &GroundedPair, classes: &[ClassSpec], vocab: &Vocabulary, seed: u64) -> Result<GroundedPair> {
    if pair.annotations.is_empty() {
        return Err(Error::InvalidInput(format!("{} has no annotations", pair.id)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ pair.seed);
    let which = rng.random_range(0..pair.annotations.len());
    let original = &pair.annotations[which];

    let present: Vec<usize> = pair.annotations.iter().map(|a| a.class).collect();
    let absent: Vec<usize> = (0..classes.len()).filter(|c| !present.contains(c)).collect();
    let others: Vec<usize> = (0..classes.len()).filter(|&c| c != original.class).collect();
    let pool = if absent.is_empty() { &others } else { &absent };
    let &replacement = pool
        .choose(&mut rng)
        .ok_or_else(|| Error::InvalidInput("inventory has no alternative class".into()))?;
    let form = classes[replacement].synonyms.choose(&mut rng).unwrap().clone();

    let span = original.span;
    let mut tokens = pair.tokens[..span.start].to_vec();
    tokens.extend(form.iter().cloned());
    tokens.extend_from_slice(&pair.tokens[span.end..]);
    let new_span = Span::new(span.start, span.start + form.len());
    let shift = new_span.len() as isize - span.len() as isize;

    let annotations = pair
        .annotations
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let mut a = a.clone();
            if i == which {
                a.span = new_span;
            } else if a.span.start >= span.end {
                a.span = Span::new(
                    (a.span.start as isize + shift) as usize,
                    (a.span.end as isize + shift) as usize,
                );
            }
            a
        })
        .collect();

    let caption = vocab.encode(&tokens)?;
    Ok(GroundedPair {
        id: format!("{}-neg", pair.id),
        seed: pair.seed,
        split: pair.split,
        image: pair.image.clone(),
        tokens,
        caption,
        annotations,
        replacement: Some(Replacement {
            annotation: which,
            original_class: original.class,
            original_span: span,
            replacement_class: replacement,
            replacement_span: new_span,
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> CorpusConfig {
        let mut cfg = CorpusConfig::primary_domain(3);
        cfg.classes.truncate(2);
        cfg.grid_height = 4;
        cfg.grid_width = 4;
        cfg.objects_min = 1;
        cfg.objects_max = 1;
        cfg.train_size = 40;
        cfg.test_size = 10;
        cfg
    }

    #[test]
    fn single_object_corpus_has_one_annotation_per_pair() {
        let corpus = generate_corpus(&small_cfg()).unwrap();
        assert_eq!(corpus.items.len(), 50);
        for p in &corpus.items {
            assert_eq!(p.annotations.len(), 1);
            assert!(p.annotations[0].bbox.fits(4, 4));
            assert!(p.annotations[0].bbox.area() >= 2);
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate_corpus(&small_cfg()).unwrap();
        let b = generate_corpus(&small_cfg()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn boxes_never_overlap() {
        let corpus = generate_corpus(&CorpusConfig::primary_domain(11)).unwrap();
        for p in &corpus.items {
            for (i, a) in p.annotations.iter().enumerate() {
                for b in &p.annotations[i + 1..] {
                    assert!(!a.bbox.intersects(&b.bbox), "{}", p.id);
                }
            }
        }
    }

    #[test]
    fn spans_index_the_class_mention() {
        let cfg = CorpusConfig::second_domain(5);
        let corpus = generate_corpus(&cfg).unwrap();
        for p in corpus.items.iter().take(100) {
            assert!(p.tokens.len() <= 16);
            for a in &p.annotations {
                let words = &p.tokens[a.span.start..a.span.end];
                assert!(cfg.classes[a.class].synonyms.iter().any(|s| s == words));
                // distractors make spans a strict subset of the caption
                assert!(a.span.len() < p.tokens.len());
            }
        }
    }

    #[test]
    fn train_and_test_seeds_are_disjoint() {
        let corpus = generate_corpus(&CorpusConfig::primary_domain(1)).unwrap();
        let train: std::collections::HashSet<u64> = corpus.split(Split::Train).map(|p| p.seed).collect();
        assert!(corpus.split(Split::Test).all(|p| !train.contains(&p.seed)));
    }

    #[test]
    fn grid_too_small_is_an_error() {
        let mut cfg = small_cfg();
        cfg.grid_height = 2;
        cfg.grid_width = 2;
        cfg.box_max = 3;
        assert!(matches!(generate_corpus(&cfg), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn image_values_stay_in_unit_interval() {
        let corpus = generate_corpus(&small_cfg()).unwrap();
        assert!(corpus.items.iter().all(|p| p.image.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    fn chase_pair() -> (GroundedPair, Vec<ClassSpec>) {
        let mut classes = CorpusConfig::primary_domain(0).classes;
        classes.truncate(3);
        let vocab = Vocabulary::default();
        let tokens: Vec<String> = ["cat", "chases", "dog"].iter().map(|s| s.to_string()).collect();
        let ann = |class: usize, start: usize, bbox: BBox| Annotation {
            class,
            class_name: classes[class].name.clone(),
            bbox,
            span: Span::new(start, start + 1),
            single_instance: true,
        };
        let pair = GroundedPair {
            id: "toy".into(),
            seed: 42,
            split: Split::Test,
            image: ImageInput::new(4, 4, 12, vec![0.1; 4 * 4 * 12]).unwrap(),
            caption: vocab.encode(&tokens).unwrap(),
            tokens,
            annotations: vec![ann(1, 0, BBox::new(0, 0, 2, 2)), ann(0, 2, BBox::new(2, 2, 4, 4))],
            replacement: None,
        };
        (pair, classes)
    }

    #[test]
    fn hard_negative_swaps_in_the_absent_class() {
        let (pair, classes) = chase_pair();
        let vocab = Vocabulary::default();
        for seed in 0..20 {
            let neg = make_hard_negative(&pair, &classes, &vocab, seed).unwrap();
            let r = neg.replacement.clone().unwrap();
            assert_eq!(r.replacement_class, 2, "bird is the only class not in the image");
            let expected = if r.annotation == 0 { "bird chases dog" } else { "cat chases bird" };
            assert_eq!(neg.caption_text(), expected);
            assert_ne!(r.replacement_class, r.original_class);
            assert_eq!(neg.image, pair.image);
            neg.validate().unwrap();
        }
    }

    #[test]
    fn hard_negative_changes_only_the_replaced_span() {
        let corpus = generate_corpus(&CorpusConfig::primary_domain(8)).unwrap();
        let classes = &corpus.config.classes;
        for pair in corpus.split(Split::Test).take(60) {
            let neg = make_hard_negative(pair, classes, &corpus.vocabulary, 7).unwrap();
            assert_eq!(neg, make_hard_negative(pair, classes, &corpus.vocabulary, 7).unwrap());
            let r = neg.replacement.clone().unwrap();
            let (o, n) = (r.original_span, r.replacement_span);
            assert_eq!(pair.tokens[..o.start], neg.tokens[..n.start]);
            assert_eq!(pair.tokens[o.end..], neg.tokens[n.end..]);
            assert!(classes[r.replacement_class].synonyms.iter().any(|s| *s == neg.tokens[n.start..n.end]));
            for (i, (a, b)) in pair.annotations.iter().zip(&neg.annotations).enumerate() {
                let words = |p: &GroundedPair, s: Span| p.tokens[s.start..s.end].to_vec();
                if i != r.annotation {
                    assert_eq!(words(pair, a.span), words(&neg, b.span));
                }
                assert_eq!(a.bbox, b.bbox);
            }
        }
    }
}
