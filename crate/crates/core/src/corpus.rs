//! Procedural image-caption corpus with known contradicting caption words.
//!
//! Each image is an 8×4 grid of colored patches: row 0 shows the hair, rows
//! 1–3 the top, rows 4–6 the bottom and row 7 the accessory. Captions are
//! filled templates; a slot word may be swapped for a wrong value of the same
//! slot, and those token positions are recorded as noise.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{ImagePatchGrid, SpecialIds, TokenSequence};
use crate::error::{Error, Result};
use crate::jsonl;
use crate::seeding::{stream_rng, Stream};
use crate::tokenizer::Vocab;

pub const GRID_ROWS: usize = 8;
pub const GRID_COLS: usize = 4;
pub const PATCH_SIZE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slot {
    Hair,
    Top,
    Bottom,
    Accessory,
}

impl Slot {
    pub const ALL: [Slot; 4] = [Slot::Hair, Slot::Top, Slot::Bottom, Slot::Accessory];

    pub fn placeholder(self) -> &'static str {
        match self {
            Slot::Hair => "{hair}",
            Slot::Top => "{top}",
            Slot::Bottom => "{bottom}",
            Slot::Accessory => "{accessory}",
        }
    }

    pub fn from_placeholder(word: &str) -> Option<Slot> {
        Slot::ALL.into_iter().find(|s| s.placeholder() == word)
    }

    /// Grid rows painted by this slot.
    pub fn rows(self) -> std::ops::Range<usize> {
        match self {
            Slot::Hair => 0..1,
            Slot::Top => 1..4,
            Slot::Bottom => 4..7,
            Slot::Accessory => 7..8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeValue {
    pub word: String,
    pub rgb: [f64; 3],
}

fn values(list: &[(&str, [f64; 3])]) -> Vec<AttributeValue> {
    list.iter()
        .map(|&(w, rgb)| AttributeValue {
            word: w.to_string(),
            rgb,
        })
        .collect()
}

/// Categorical values of every slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub hair: Vec<AttributeValue>,
    pub top: Vec<AttributeValue>,
    pub bottom: Vec<AttributeValue>,
    pub accessory: Vec<AttributeValue>,
    /// Standard deviation of per-pixel render jitter.
    pub jitter: f64,
}

impl Default for AttributeSpec {
    fn default() -> Self {
        let colors = values(&[
            ("red", [0.9, 0.1, 0.1]),
            ("blue", [0.1, 0.2, 0.9]),
            ("green", [0.1, 0.7, 0.2]),
            ("yellow", [0.95, 0.9, 0.1]),
            ("black", [0.05, 0.05, 0.05]),
            ("white", [0.95, 0.95, 0.95]),
            ("gray", [0.5, 0.5, 0.5]),
            ("purple", [0.55, 0.1, 0.7]),
        ]);
        Self {
            hair: values(&[
                ("blond", [0.95, 0.8, 0.4]),
                ("dark", [0.15, 0.1, 0.05]),
                ("ginger", [0.85, 0.35, 0.1]),
                ("silver", [0.75, 0.75, 0.8]),
            ]),
            top: colors.clone(),
            bottom: colors,
            accessory: values(&[
                ("backpack", [0.2, 0.5, 0.5]),
                ("hat", [0.6, 0.3, 0.1]),
                ("scarf", [0.9, 0.4, 0.6]),
                ("handbag", [0.4, 0.6, 0.1]),
                ("umbrella", [0.1, 0.1, 0.4]),
            ]),
            jitter: 0.05,
        }
    }
}

impl AttributeSpec {
    pub fn slot(&self, slot: Slot) -> &[AttributeValue] {
        match slot {
            Slot::Hair => &self.hair,
            Slot::Top => &self.top,
            Slot::Bottom => &self.bottom,
            Slot::Accessory => &self.accessory,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for slot in Slot::ALL {
            let vals = self.slot(slot);
            if vals.len() < 2 {
                return Err(Error::Config(format!("slot {slot:?} needs at least two values")));
            }
            for (i, a) in vals.iter().enumerate() {
                if a.word.split_whitespace().count() != 1 {
                    return Err(Error::Config(format!("slot word {:?} is not a single word", a.word)));
                }
                if vals[..i].iter().any(|b| b.rgb == a.rgb || b.word == a.word) {
                    return Err(Error::Config(format!("slot {slot:?} repeats {:?}", a.word)));
                }
            }
        }
        if !(self.jitter >= 0.0) {
            return Err(Error::Config("jitter must be non-negative".into()));
        }
        Ok(())
    }

    /// Every word that can appear in a filled slot.
    pub fn words(&self) -> Vec<&str> {
        Slot::ALL
            .iter()
            .flat_map(|&s| self.slot(s).iter().map(|v| v.word.as_str()))
            .collect()
    }
}

pub fn default_templates() -> Vec<String> {
    [
        "a person with {hair} hair wearing a {top} top and {bottom} trousers carrying a {accessory}",
        "the pedestrian has {hair} hair and wears a {top} shirt with {bottom} pants",
        "a {top} jacket and {bottom} shorts on a person with a {accessory}",
        "this person has {hair} hair a {top} coat {bottom} jeans and a {accessory}",
        "someone in a {top} sweater and {bottom} skirt with {hair} hair",
        "a walker carrying a {accessory} wears {bottom} trousers and a {top} shirt",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

/// Ground-truth attribute indices of one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attributes {
    pub hair: usize,
    pub top: usize,
    pub bottom: usize,
    pub accessory: usize,
}

impl Attributes {
    pub fn get(&self, slot: Slot) -> usize {
        match slot {
            Slot::Hair => self.hair,
            Slot::Top => self.top,
            Slot::Bottom => self.bottom,
            Slot::Accessory => self.accessory,
        }
    }

    pub fn sample(spec: &AttributeSpec, rng: &mut impl Rng) -> Self {
        Self {
            hair: rng.random_range(0..spec.hair.len()),
            top: rng.random_range(0..spec.top.len()),
            bottom: rng.random_range(0..spec.bottom.len()),
            accessory: rng.random_range(0..spec.accessory.len()),
        }
    }
}

/// Paints an attribute set onto the patch grid. Pixel values are centered
/// around zero; `image_seed` drives the jitter.
pub fn render(spec: &AttributeSpec, attrs: &Attributes, image_seed: u64) -> ImagePatchGrid {
    let pd = PATCH_SIZE * PATCH_SIZE * 3;
    let mut rng = stream_rng(image_seed, Stream::Corpus, u64::MAX, 0);
    let jitter = Normal::new(0.0, spec.jitter.max(f64::MIN_POSITIVE)).expect("finite jitter");
    let mut data = Vec::with_capacity(GRID_ROWS * GRID_COLS * pd);
    let mut paint = [[0.0; 3]; GRID_ROWS];
    for slot in Slot::ALL {
        let rgb = spec.slot(slot)[attrs.get(slot)].rgb;
        for r in slot.rows() {
            paint[r] = rgb;
        }
    }
    for rgb in paint {
        for _ in 0..GRID_COLS {
            for _ in 0..PATCH_SIZE * PATCH_SIZE {
                for &c in &rgb {
                    let noise = if spec.jitter > 0.0 { jitter.sample(&mut rng) } else { 0.0 };
                    data.push(c - 0.5 + noise);
                }
            }
        }
    }
    ImagePatchGrid::new(GRID_ROWS, GRID_COLS, pd, data).expect("grid dimensions are consistent")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPair {
    pub pair_id: String,
    pub attributes: Attributes,
    pub image_seed: u64,
    pub template: usize,
    pub caption: String,
    pub token_ids: Vec<u32>,
    /// Token positions (`<sos>` = 0) of slot words contradicting the image.
    pub noise_truth: Vec<usize>,
    /// Token positions of every filled slot word.
    pub slot_positions: Vec<usize>,
}

impl SyntheticPair {
    pub fn sequence(&self, specials: &SpecialIds) -> Result<TokenSequence> {
        TokenSequence::new(self.token_ids.clone(), specials)
    }

    pub fn image(&self, spec: &AttributeSpec) -> ImagePatchGrid {
        render(spec, &self.attributes, self.image_seed)
    }
}

/// Checks that every placeholder-looking word names a known slot.
pub fn parse_template(template: &str) -> Result<Vec<std::result::Result<&str, Slot>>> {
    template
        .split_whitespace()
        .map(|w| {
            if w.starts_with('{') || w.ends_with('}') {
                Slot::from_placeholder(w)
                    .map(Err)
                    .ok_or_else(|| Error::Template(format!("unknown slot {w:?} in {template:?}")))
            } else {
                Ok(Ok(w))
            }
        })
        .collect()
}

/// Samples attributes, renders the image and fills the template. Each slot
/// independently receives a wrong value with probability `noise_rate`.
#[allow(clippy::too_many_arguments)]
pub fn generate_pair(
    rng: &mut impl Rng,
    spec: &AttributeSpec,
    templates: &[String],
    template: usize,
    noise_rate: f64,
    vocab: &Vocab,
    max_len: usize,
    pair_id: String,
) -> Result<SyntheticPair> {
    if !(0.0..=1.0).contains(&noise_rate) {
        return Err(Error::Config(format!("noise_rate {noise_rate} outside [0, 1]")));
    }
    let text = templates
        .get(template)
        .ok_or_else(|| Error::Template(format!("template index {template} out of range")))?;
    let parts = parse_template(text)?;
    let attributes = Attributes::sample(spec, rng);
    let image_seed = rng.random::<u64>();
    let mut words = Vec::with_capacity(parts.len());
    let mut noise_truth = Vec::new();
    let mut slot_positions = Vec::new();
    for (i, part) in parts.into_iter().enumerate() {
        match part {
            Ok(w) => words.push(w.to_string()),
            Err(slot) => {
                let vals = spec.slot(slot);
                let truth = attributes.get(slot);
                let flip = rng.random::<f64>() < noise_rate;
                let shown = if flip {
                    let other = rng.random_range(0..vals.len() - 1);
                    if other >= truth {
                        other + 1
                    } else {
                        other
                    }
                } else {
                    truth
                };
                if flip {
                    noise_truth.push(i + 1);
                }
                slot_positions.push(i + 1);
                words.push(vals[shown].word.clone());
            }
        }
    }
    let caption = words.join(" ");
    let seq = vocab.encode(&caption, max_len)?;
    Ok(SyntheticPair {
        pair_id,
        attributes,
        image_seed,
        template,
        caption,
        token_ids: seq.ids().to_vec(),
        noise_truth,
        slot_positions,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub train: usize,
    pub test: usize,
    pub noise_rate: f64,
    /// Noise rate of the held-out split.
    pub test_noise_rate: f64,
    pub seed: u64,
    pub max_text_len: usize,
    pub templates: Vec<String>,
    pub spec: AttributeSpec,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            train: 2000,
            test: 200,
            noise_rate: 0.2,
            test_noise_rate: 0.0,
            seed: 0,
            max_text_len: 32,
            templates: default_templates(),
            spec: AttributeSpec::default(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train == 0 {
            return Err(Error::Config("the training split needs at least one pair".into()));
        }
        for r in [self.noise_rate, self.test_noise_rate] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("noise rate {r} outside [0, 1]")));
            }
        }
        if self.templates.is_empty() {
            return Err(Error::Template("no templates".into()));
        }
        for t in &self.templates {
            parse_template(t)?;
        }
        self.spec.validate()
    }

    /// Template words, slot words and the four special tokens.
    pub fn vocab(&self) -> Result<Vocab> {
        let mut words: Vec<&str> = Vec::new();
        for t in &self.templates {
            for part in parse_template(t)? {
                if let Ok(w) = part {
                    words.push(w);
                }
            }
        }
        words.extend(self.spec.words());
        Ok(Vocab::with_specials(words))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Generates the pairs of one split. Pair `i` draws from its own stream.
pub fn generate_split(cfg: &CorpusConfig, vocab: &Vocab, split: Split) -> Result<Vec<SyntheticPair>> {
    let (n, rate) = match split {
        Split::Train => (cfg.train, cfg.noise_rate),
        Split::Test => (cfg.test, cfg.test_noise_rate),
    };
    (0..n)
        .map(|i| {
            let mut rng = stream_rng(cfg.seed, Stream::Corpus, split as u64, i as u64);
            let template = rng.random_range(0..cfg.templates.len());
            generate_pair(
                &mut rng,
                &cfg.spec,
                &cfg.templates,
                template,
                rate,
                vocab,
                cfg.max_text_len,
                format!("{}-{i:05}", split.name()),
            )
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub pairs: usize,
    pub slots: usize,
    pub noisy_slots: usize,
    pub realized_noise_rate: f64,
}

impl SplitSummary {
    fn of(pairs: &[SyntheticPair]) -> Self {
        let slots: usize = pairs.iter().map(|p| p.slot_positions.len()).sum();
        let noisy: usize = pairs.iter().map(|p| p.noise_truth.len()).sum();
        Self {
            pairs: pairs.len(),
            slots,
            noisy_slots: noisy,
            realized_noise_rate: if slots == 0 { 0.0 } else { noisy as f64 / slots as f64 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub config: CorpusConfig,
    pub grid: [usize; 2],
    pub patch_size: usize,
    pub vocab_size: usize,
    pub train: SplitSummary,
    pub test: SplitSummary,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const VOCAB_FILE: &str = "vocab.json";

fn split_file(split: Split) -> String {
    format!("{}.jsonl", split.name())
}

/// An in-memory corpus. Images are re-rendered from each pair's attributes
/// and seed rather than stored.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub vocab: Vocab,
    pub train: Vec<SyntheticPair>,
    pub test: Vec<SyntheticPair>,
}

impl Corpus {
    pub fn generate(cfg: &CorpusConfig) -> Result<Self> {
        cfg.validate()?;
        let vocab = cfg.vocab()?;
        let train = generate_split(cfg, &vocab, Split::Train)?;
        let test = generate_split(cfg, &vocab, Split::Test)?;
        let manifest = CorpusManifest {
            config: cfg.clone(),
            grid: [GRID_ROWS, GRID_COLS],
            patch_size: PATCH_SIZE,
            vocab_size: vocab.id_bound(),
            train: SplitSummary::of(&train),
            test: SplitSummary::of(&test),
        };
        Ok(Self {
            manifest,
            vocab,
            train,
            test,
        })
    }

    pub fn split(&self, split: Split) -> &[SyntheticPair] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn spec(&self) -> &AttributeSpec {
        &self.manifest.config.spec
    }

    pub fn specials(&self) -> Result<SpecialIds> {
        self.vocab.specials()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::json("manifest", e))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        jsonl::write(&dir.join(split_file(Split::Train)), &self.train)?;
        jsonl::write(&dir.join(split_file(Split::Test)), &self.test)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CorpusManifest =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
        let train: Vec<SyntheticPair> = jsonl::read(&dir.join(split_file(Split::Train)))?;
        let test: Vec<SyntheticPair> = jsonl::read(&dir.join(split_file(Split::Test)))?;
        if train.len() != manifest.train.pairs || test.len() != manifest.test.pairs {
            return Err(Error::Compatibility(format!(
                "{} lists {} / {} pairs but the split files hold {} / {}",
                path.display(),
                manifest.train.pairs,
                manifest.test.pairs,
                train.len(),
                test.len()
            )));
        }
        Ok(Self {
            manifest,
            vocab,
            train,
            test,
        })
    }
}

/// Generates a corpus and writes it to `dir`.
pub fn build_corpus(cfg: &CorpusConfig, dir: &Path) -> Result<CorpusManifest> {
    let corpus = Corpus::generate(cfg)?;
    corpus.save(dir)?;
    Ok(corpus.manifest)
}

/// Files written by [`build_corpus`], in a fixed order.
pub fn corpus_files(dir: &Path) -> Vec<PathBuf> {
    vec![
        dir.join(MANIFEST_FILE),
        dir.join(VOCAB_FILE),
        dir.join(split_file(Split::Train)),
        dir.join(split_file(Split::Test)),
    ]
}
