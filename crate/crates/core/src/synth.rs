//! Seeded synthetic news corpus.
//!
//! Each sample plants a person, a city and a weekday in a short article.
//! The caption is `<person> <scene phrase> <city> on <day> .`, where the
//! scene is only visible through the image features (a per-scene prototype
//! plus noise). The planted person is the most frequent PERSON mention and
//! the planted city the most frequent GPE mention of the article, so tag
//! cleaning has a well-defined answer. Person names are unique per sample,
//! so every held-out person is unseen in training.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    encode_sample, preprocess, Annotation, EntityAnnotations, EntityType, FilterConfig, ImageSize,
    ProcessedSample, RawSample, Vocabulary,
};
use crate::error::{Error, Result};
use crate::features::{write_features, FeatureStore};
use crate::tensor::Tensor;

pub const SCENES: [&str; 8] = [
    "speaks at a rally in",
    "celebrates a win in",
    "performs on stage in",
    "inspects flood damage in",
    "attends a summit in",
    "waves during a parade in",
    "leaves a court in",
    "unveils a new product in",
];

pub const CITIES: [&str; 40] = [
    "Paris", "Lagos", "Lima", "Oslo", "Cairo", "Delhi", "Quito", "Seoul", "Accra", "Hanoi", "Dakar", "Riga", "Sofia",
    "Tunis", "Kyiv", "Minsk", "Doha", "Baku", "Bern", "Male", "Rome", "Madrid", "Lisbon", "Dublin", "Vienna",
    "Prague", "Warsaw", "Athens", "Ankara", "Tehran", "Kabul", "Dhaka", "Manila", "Jakarta", "Nairobi", "Harare",
    "Luanda", "Caracas", "Bogota", "Havana",
];

pub const DAYS: [&str; 7] = ["Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday", "Sunday"];

const FILLER: [&str; 96] = [
    "the", "a", "of", "and", "to", "for", "with", "from", "new", "local", "government", "plan", "report", "week",
    "year", "people", "city", "council", "police", "market", "school", "budget", "water", "energy", "road", "bridge",
    "project", "workers", "leaders", "group", "team", "season", "game", "fans", "music", "film", "art", "museum",
    "court", "law", "vote", "election", "party", "campaign", "company", "shares", "prices", "trade", "deal", "talks",
    "border", "army", "storm", "rain", "river", "farm", "crops", "health", "hospital", "doctors", "study", "data",
    "phone", "online", "service", "public", "private", "major", "small", "early", "late", "recent", "several",
    "many", "few", "more", "less", "about", "over", "under", "after", "before", "during", "while", "since",
    "officials", "experts", "critics", "supporters", "visitors", "families", "children", "students", "press",
    "statement", "meeting",
];

const SYLLABLES: [&str; 16] = [
    "ka", "ro", "vin", "ta", "mel", "zu", "no", "bri", "sa", "dor", "li", "ven", "mo", "tis", "ha", "rek",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_heldout: usize,
    pub seed: u64,
    /// Fraction of captions naming the article's planted person; the rest
    /// name someone absent from the article.
    pub plant_rate: f64,
    pub patches: usize,
    pub feature_dim: usize,
    pub feature_noise: f64,
    /// Extra filler sentences per article, inclusive range.
    pub filler_sentences: (usize, usize),
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_train: 32,
            n_heldout: 0,
            seed: 0,
            plant_rate: 1.0,
            patches: 4,
            feature_dim: 16,
            feature_noise: 0.3,
            filler_sentences: (1, 2),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthSample {
    pub raw: RawSample,
    pub scene: usize,
    pub planted: bool,
    pub features: Tensor<f32>,
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub train: Vec<SynthSample>,
    pub heldout: Vec<SynthSample>,
}

struct Gen {
    rng: ChaCha8Rng,
    used_names: HashSet<String>,
    prototypes: Vec<Vec<f32>>,
}

impl Gen {
    fn name(&mut self) -> String {
        loop {
            let n = self.rng.gen_range(2..=3);
            let mut s: String = (0..n).map(|_| *SYLLABLES.choose(&mut self.rng).expect("nonempty")).collect();
            s[..1].make_ascii_uppercase();
            if self.used_names.insert(s.clone()) {
                return s;
            }
        }
    }

    fn filler(&mut self, n: usize) -> Vec<String> {
        (0..n)
            .map(|_| FILLER.choose(&mut self.rng).expect("nonempty").to_string())
            .collect()
    }
}

/// Appends `words` to `tokens` and returns their start offset.
fn push(tokens: &mut Vec<String>, words: &[String]) -> usize {
    let start = tokens.len();
    tokens.extend(words.iter().cloned());
    start
}

fn sample(g: &mut Gen, cfg: &SynthConfig, id: String, index: usize) -> SynthSample {
    let person = g.name();
    let other = g.name();
    let city = CITIES.choose(&mut g.rng).expect("nonempty").to_string();
    let far = loop {
        let c = CITIES.choose(&mut g.rng).expect("nonempty");
        if *c != city {
            break c.to_string();
        }
    };
    let day = DAYS.choose(&mut g.rng).expect("nonempty").to_string();
    // balanced so every scene phrase clears the vocabulary cutoff
    let scene = index % SCENES.len();
    let planted = g.rng.gen_bool(cfg.plant_rate.clamp(0.0, 1.0));

    // sentences as (words, entity slots) with slots given by word index
    let w = |s: &str| s.to_string();
    let mut sentences: Vec<(Vec<String>, Vec<(usize, EntityType)>)> = Vec::new();
    let mut s1 = vec![person.clone(), w("said"), w("on"), day.clone(), w("that")];
    let n = g.rng.gen_range(3..=5);
    s1.extend(g.filler(n));
    s1.push(w("."));
    sentences.push((s1, vec![(0, EntityType::PERSON), (3, EntityType::DATE)]));
    let mut s2 = vec![other.clone(), w("met"), w("officials"), w("in"), far.clone(), w("to"), w("discuss")];
    let n = g.rng.gen_range(2..=4);
    s2.extend(g.filler(n));
    s2.push(w("."));
    sentences.push((s2, vec![(0, EntityType::PERSON), (4, EntityType::GPE)]));
    let mut s3 = vec![person.clone(), w("arrived"), w("in"), city.clone(), w("after")];
    let n = g.rng.gen_range(3..=5);
    s3.extend(g.filler(n));
    s3.push(w("."));
    sentences.push((s3, vec![(0, EntityType::PERSON), (3, EntityType::GPE)]));
    let mut s4 = vec![w("residents"), w("of"), city.clone(), w("welcomed"), person.clone(), w("and")];
    let n = g.rng.gen_range(2..=4);
    s4.extend(g.filler(n));
    s4.push(w("."));
    sentences.push((s4, vec![(2, EntityType::GPE), (4, EntityType::PERSON)]));
    let extra = g.rng.gen_range(cfg.filler_sentences.0..=cfg.filler_sentences.1.max(cfg.filler_sentences.0));
    for _ in 0..extra {
        let n = g.rng.gen_range(5..=8);
        let mut s = g.filler(n);
        s.push(w("."));
        sentences.push((s, vec![]));
    }
    sentences.shuffle(&mut g.rng);

    let mut tokens = Vec::new();
    let mut article_ann = Vec::new();
    for (words, slots) in &sentences {
        let start = push(&mut tokens, words);
        for &(i, etype) in slots {
            article_ann.push(Annotation {
                text: words[i].clone(),
                etype,
                start: start + i,
                end: start + i + 1,
            });
        }
    }

    let named = if planted { person } else { g.name() };
    let mut caption = vec![named.clone()];
    caption.extend(SCENES[scene].split(' ').map(String::from));
    let city_at = caption.len();
    caption.push(city.clone());
    caption.push(w("on"));
    let day_at = caption.len();
    caption.push(day.clone());
    caption.push(w("."));
    let caption_ann = vec![
        Annotation {
            text: named,
            etype: EntityType::PERSON,
            start: 0,
            end: 1,
        },
        Annotation {
            text: city,
            etype: EntityType::GPE,
            start: city_at,
            end: city_at + 1,
        },
        Annotation {
            text: day,
            etype: EntityType::DATE,
            start: day_at,
            end: day_at + 1,
        },
    ];

    let (k, d) = (cfg.patches, cfg.feature_dim);
    let proto = &g.prototypes[scene];
    let data: Vec<f32> = (0..k * d)
        .map(|i| proto[i] + (cfg.feature_noise * g.rng.sample::<f64, _>(StandardNormal)) as f32)
        .collect();
    let features = Tensor::new(vec![k, d], data).expect("k*d values");

    let raw = RawSample {
        feature_path: Some(format!("features/{id}.f32")),
        id,
        article: tokens.join(" "),
        caption: caption.join(" "),
        image: ImageSize {
            width: 640,
            height: 480,
        },
        source: "synth".into(),
        entities: Some(EntityAnnotations {
            article: article_ann,
            caption: caption_ann,
        }),
    };
    SynthSample {
        raw,
        scene,
        planted,
        features,
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    if cfg.patches == 0 || cfg.feature_dim == 0 {
        return Err(Error::InvalidArgument("synthetic features need K, D > 0".into()));
    }
    if !(0.0..=1.0).contains(&cfg.plant_rate) {
        return Err(Error::InvalidArgument("plant_rate must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let prototypes = (0..SCENES.len())
        .map(|_| {
            (0..cfg.patches * cfg.feature_dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
                .collect()
        })
        .collect();
    let mut g = Gen {
        rng,
        used_names: HashSet::new(),
        prototypes,
    };
    let train = (0..cfg.n_train).map(|i| sample(&mut g, cfg, format!("synth-{i:04}"), i)).collect();
    let heldout = (0..cfg.n_heldout)
        .map(|i| sample(&mut g, cfg, format!("heldout-{i:04}"), i))
        .collect();
    Ok(SynthCorpus { train, heldout })
}

impl SynthCorpus {
    pub fn feature_store(&self) -> FeatureStore {
        let mut f = FeatureStore::default();
        for s in self.train.iter().chain(&self.heldout) {
            f.insert(s.raw.id.clone(), s.features.clone());
        }
        f
    }

    /// Fraction of samples whose caption names the article's planted person.
    pub fn planted_fraction(&self) -> f64 {
        let all: Vec<_> = self.train.iter().chain(&self.heldout).collect();
        all.iter().filter(|s| s.planted).count() as f64 / all.len().max(1) as f64
    }

    /// Writes `train.jsonl`, `heldout.jsonl` (when nonempty) and
    /// `features/<id>.f32` with sidecars.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("features")).map_err(|e| Error::io(dir, e))?;
        let write_split = |name: &str, split: &[SynthSample]| -> Result<()> {
            let mut text = String::new();
            for s in split {
                text.push_str(&serde_json::to_string(&s.raw)?);
                text.push('\n');
                let rel = s.raw.feature_path.as_deref().expect("synthetic samples carry features");
                write_features(&dir.join(rel), &s.features)?;
            }
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))
        };
        write_split("train.jsonl", &self.train)?;
        if !self.heldout.is_empty() {
            write_split("heldout.jsonl", &self.heldout)?;
        }
        Ok(())
    }

    /// Preprocesses the training split (vocabulary built on it alone) and
    /// encodes the held-out split with that vocabulary.
    pub fn prepare(&self, min_freq: usize) -> Result<(Vocabulary, Vec<ProcessedSample>, Vec<ProcessedSample>)> {
        let raw: Vec<RawSample> = self.train.iter().map(|s| s.raw.clone()).collect();
        let out = preprocess(&raw, &FilterConfig::default(), min_freq)?;
        let heldout = self
            .heldout
            .iter()
            .map(|s| encode_sample(&s.raw, &out.vocab))
            .collect::<Result<Vec<_>>>()?;
        Ok((out.vocab, out.samples, heldout))
    }
}
