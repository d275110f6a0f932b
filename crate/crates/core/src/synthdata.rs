//! Procedural image-caption corpus: coloured shapes in image quadrants.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::captioner::Vocabulary;
use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::seeds::derive_seed;

pub const IMAGE_SIZE: usize = 64;
pub const NOISE_AMPLITUDE: f64 = 0.02;
/// Shape extent as a fraction of the image width.
pub const SHAPE_FRACTION: f64 = 0.4;

pub const ATTACK_REF_SIZE: usize = 20;
pub const VALIDATION_SIZE: usize = 50;
pub const TEST_SIZE: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
    Cross,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Quadrant {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

pub const SHAPES: [Shape; 4] = [Shape::Square, Shape::Circle, Shape::Triangle, Shape::Cross];
pub const COLORS: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];
pub const QUADRANTS: [Quadrant; 4] = [
    Quadrant::TopLeft,
    Quadrant::TopRight,
    Quadrant::BottomLeft,
    Quadrant::BottomRight,
];
pub const BACKGROUNDS: [f64; 3] = [0.85, 0.9, 0.95];
pub const NUM_SPECS: usize = 4 * 4 * 4 * 3;

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
        }
    }

    /// Whether offset `(dx, dy)` from the centre lies inside a shape of
    /// half-extent `r`.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            Shape::Circle => dx * dx + dy * dy <= r * r,
            // apex up, base at dy = r
            Shape::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
            Shape::Cross => {
                let arm = r / 3.0;
                (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
            }
        }
    }
}

impl Color {
    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.9, 0.1, 0.1],
            Color::Green => [0.1, 0.7, 0.15],
            Color::Blue => [0.1, 0.2, 0.9],
            Color::Yellow => [0.95, 0.85, 0.05],
        }
    }
}

impl Quadrant {
    pub fn name(self) -> &'static str {
        match self {
            Quadrant::TopLeft => "top left",
            Quadrant::TopRight => "top right",
            Quadrant::BottomLeft => "bottom left",
            Quadrant::BottomRight => "bottom right",
        }
    }

    /// `(row, col)` of the quadrant, each 0 or 1.
    pub fn cell(self) -> (usize, usize) {
        match self {
            Quadrant::TopLeft => (0, 0),
            Quadrant::TopRight => (0, 1),
            Quadrant::BottomLeft => (1, 0),
            Quadrant::BottomRight => (1, 1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SceneSpec {
    pub shape: Shape,
    pub color: Color,
    pub position: Quadrant,
    /// Index into [`BACKGROUNDS`].
    pub background: usize,
}

impl SceneSpec {
    pub fn all() -> Vec<SceneSpec> {
        (0..NUM_SPECS)
            .map(|i| SceneSpec::from_id(i).expect("in range"))
            .collect()
    }

    pub fn id(&self) -> usize {
        let s = SHAPES.iter().position(|&x| x == self.shape).unwrap();
        let c = COLORS.iter().position(|&x| x == self.color).unwrap();
        let p = QUADRANTS.iter().position(|&x| x == self.position).unwrap();
        ((s * 4 + c) * 4 + p) * 3 + self.background
    }

    pub fn from_id(id: usize) -> Option<SceneSpec> {
        if id >= NUM_SPECS {
            return None;
        }
        Some(SceneSpec {
            background: id % 3,
            position: QUADRANTS[(id / 3) % 4],
            color: COLORS[(id / 12) % 4],
            shape: SHAPES[id / 48],
        })
    }

    pub fn background_level(&self) -> f64 {
        BACKGROUNDS[self.background]
    }

    pub fn caption(&self) -> String {
        format!(
            "a {} {} in the {}",
            self.color.name(),
            self.shape.name(),
            self.position.name()
        )
    }
}

/// Renders a `[3, 64, 64]` scene in `[0, 1]`: the shape centred in its
/// quadrant over a grey background, plus seeded uniform noise.
pub fn render(spec: &SceneSpec, noise_seed: u64) -> Tensor {
    let s = IMAGE_SIZE;
    let half = s / 2;
    let r = SHAPE_FRACTION * s as f64 / 2.0;
    let (qr, qc) = spec.position.cell();
    let cy = (qr * half) as f64 + half as f64 / 2.0;
    let cx = (qc * half) as f64 + half as f64 / 2.0;
    let bg = spec.background_level();
    let rgb = spec.color.rgb();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(noise_seed, &format!("render/{}", spec.id())));
    let mut data = vec![0.0; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let inside = spec.shape.contains(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r);
            for c in 0..3 {
                let base = if inside { rgb[c] } else { bg };
                let noise = rng.random_range(-NOISE_AMPLITUDE..=NOISE_AMPLITUDE);
                data[c * s * s + y * s + x] = (base + noise).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(&[3, s, s], data).expect("shape matches data")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SplitName {
    Train,
    AttackRef,
    Validation,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::AttackRef => "attack_ref",
            SplitName::Validation => "validation",
            SplitName::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            SplitName::Train,
            SplitName::AttackRef,
            SplitName::Validation,
            SplitName::Test,
        ]
        .into_iter()
        .find(|n| n.as_str() == s)
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One corpus record; the image is regenerated from `(spec, noise_seed)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub spec: SceneSpec,
    pub noise_seed: u64,
}

impl Sample {
    pub fn image(&self) -> Tensor {
        render(&self.spec, self.noise_seed)
    }

    pub fn caption(&self) -> String {
        self.spec.caption()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetSplit {
    pub attack_ref: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
    pub train: Vec<Sample>,
}

impl DatasetSplit {
    pub fn get(&self, name: SplitName) -> &[Sample] {
        match name {
            SplitName::Train => &self.train,
            SplitName::AttackRef => &self.attack_ref,
            SplitName::Validation => &self.validation,
            SplitName::Test => &self.test,
        }
    }
}

/// Words that must exist in the vocabulary without appearing in captions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lexicon {
    /// Words of the attack prompt template.
    pub prompt: Vec<String>,
    pub targets: Vec<String>,
    pub blocked: Vec<String>,
    pub evading: Vec<String>,
}

impl Default for Lexicon {
    fn default() -> Self {
        let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        Lexicon {
            prompt: v(&["picture", "of"]),
            targets: v(&["mat", "balloon", "cake", "paper kite", "teddy bear"]),
            blocked: v(&["gargoyle", "basilisk"]),
            evading: v(&["gargoylle", "bazilisk"]),
        }
    }
}

impl Lexicon {
    pub fn all_terms(&self) -> impl Iterator<Item = &str> {
        self.prompt
            .iter()
            .chain(&self.targets)
            .chain(&self.blocked)
            .chain(&self.evading)
            .map(String::as_str)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    /// Training renders per scene spec.
    pub train_copies: usize,
    pub lexicon: Lexicon,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            train_copies: 2,
            lexicon: Lexicon::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub split: DatasetSplit,
    pub vocab: Vocabulary,
}

/// Template-caption words of every spec plus the configured lexicon.
pub fn corpus_vocabulary(config: &CorpusConfig) -> Result<Vocabulary> {
    let captions: Vec<String> = SceneSpec::all().iter().map(SceneSpec::caption).collect();
    Vocabulary::build(captions.iter().map(String::as_str), config.lexicon.all_terms())
}

/// Builds the splits and vocabulary deterministically from `seed`.
///
/// Test, validation and attack-reference images use pairwise disjoint spec
/// subsets; training covers every spec with its own noise seeds.
pub fn build_corpus(seed: u64, config: &CorpusConfig) -> Result<Corpus> {
    let vocab = corpus_vocabulary(config)?;

    let mut ids: Vec<usize> = (0..NUM_SPECS).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "corpus/specs")));
    let mut seeds = ChaCha8Rng::seed_from_u64(derive_seed(seed, "corpus/noise"));
    let mut take = |range: std::ops::Range<usize>| -> Vec<Sample> {
        ids[range]
            .iter()
            .map(|&i| Sample {
                spec: SceneSpec::from_id(i).expect("in range"),
                noise_seed: seeds.random(),
            })
            .collect()
    };
    let test = take(0..TEST_SIZE);
    let validation = take(TEST_SIZE..TEST_SIZE + VALIDATION_SIZE);
    let attack_ref = take(TEST_SIZE + VALIDATION_SIZE..TEST_SIZE + VALIDATION_SIZE + ATTACK_REF_SIZE);
    let mut train = Vec::with_capacity(NUM_SPECS * config.train_copies);
    for _ in 0..config.train_copies {
        for spec in SceneSpec::all() {
            train.push(Sample {
                spec,
                noise_seed: seeds.random(),
            });
        }
    }
    Ok(Corpus {
        split: DatasetSplit {
            attack_ref,
            validation,
            test,
            train,
        },
        vocab,
    })
}

/// `split<TAB>spec-id<TAB>noise-seed<TAB>caption` per record, after a
/// `#` provenance line.
pub fn manifest_string(split: &DatasetSplit, config_hash: u64, seed: u64) -> String {
    let mut out = format!("# config_hash={config_hash:016x} seed={seed}\n");
    for name in [
        SplitName::AttackRef,
        SplitName::Validation,
        SplitName::Test,
        SplitName::Train,
    ] {
        for s in split.get(name) {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                name,
                s.spec.id(),
                s.noise_seed,
                s.caption()
            ));
        }
    }
    out
}

pub fn write_manifest(path: impl AsRef<Path>, split: &DatasetSplit, config_hash: u64, seed: u64) -> Result<()> {
    fs::write(path, manifest_string(split, config_hash, seed))?;
    Ok(())
}

pub fn parse_manifest(text: &str) -> Result<DatasetSplit> {
    let mut split = DatasetSplit::default();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Malformed(format!("manifest line {}: {what}", i + 1));
        let fields: Vec<&str> = line.split('\t').collect();
        let [name, id, noise, caption] = fields[..] else {
            return Err(bad("expected 4 tab-separated fields"));
        };
        let name = SplitName::parse(name).ok_or_else(|| bad("unknown split"))?;
        let spec = id
            .parse()
            .ok()
            .and_then(SceneSpec::from_id)
            .ok_or_else(|| bad("bad spec id"))?;
        let noise_seed = noise.parse().map_err(|_| bad("bad noise seed"))?;
        if spec.caption() != caption {
            return Err(bad("caption does not match spec"));
        }
        let sample = Sample { spec, noise_seed };
        match name {
            SplitName::Train => split.train.push(sample),
            SplitName::AttackRef => split.attack_ref.push(sample),
            SplitName::Validation => split.validation.push(sample),
            SplitName::Test => split.test.push(sample),
        }
    }
    Ok(split)
}
