//! Deterministic synthetic image/report corpora with latent concepts.
//!
//! Each image is a bag of `N` region observations. Every concept present in
//! an image occupies at least one region (its box), and the report has one
//! sentence per present concept, so a matched image always contains a region
//! for each of its sentences.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{invalid, Error, Result};
use crate::json::to_string_sig17;
use crate::numeric::norm;
use crate::scoring::FeatureBag;

pub const CORPUS_FORMAT: &str = "milrep-corpus";
pub const CORPUS_VERSION: u32 = 1;
pub const BACKGROUND_NORM: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub concepts: usize,
    pub region_dim: usize,
    pub sentence_dim: usize,
    pub regions: usize,
    pub sentences_per_doc: usize,
    pub docs: usize,
    pub noise_sigma: f64,
    /// Inclusive range for the number of concepts present in an image.
    pub concepts_per_image: (usize, usize),
    /// Inclusive range for the number of regions a present concept occupies.
    pub regions_per_concept: (usize, usize),
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            concepts: 8,
            region_dim: 12,
            sentence_dim: 12,
            regions: 16,
            sentences_per_doc: 3,
            docs: 2000,
            noise_sigma: 0.1,
            concepts_per_image: (1, 3),
            regions_per_concept: (2, 4),
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.concepts < 2 {
            return Err(invalid(format!("concepts must be ≥ 2, got {}", self.concepts)));
        }
        if self.region_dim == 0 || self.sentence_dim == 0 {
            return Err(invalid("region_dim and sentence_dim must be ≥ 1"));
        }
        if self.sentences_per_doc == 0 {
            return Err(invalid("sentences_per_doc must be ≥ 1"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(invalid(format!("noise_sigma must be ≥ 0, got {}", self.noise_sigma)));
        }
        let (clo, chi) = self.concepts_per_image;
        if clo == 0 || clo > chi || chi > self.concepts {
            return Err(invalid(format!(
                "concepts_per_image must satisfy 1 ≤ lo ≤ hi ≤ concepts, got ({clo}, {chi})"
            )));
        }
        let (rlo, rhi) = self.regions_per_concept;
        if rlo == 0 || rlo > rhi {
            return Err(invalid(format!(
                "regions_per_concept must satisfy 1 ≤ lo ≤ hi, got ({rlo}, {rhi})"
            )));
        }
        if chi * rhi > self.regions || rhi >= self.regions {
            return Err(invalid(format!(
                "up to {chi} concepts × {rhi} regions do not fit in {} regions with background left over",
                self.regions
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptBank {
    pub region_prototypes: Vec<Vec<f64>>,
    pub sentence_prototypes: Vec<Vec<f64>>,
    pub seed: u64,
}

impl ConceptBank {
    pub fn concepts(&self) -> usize {
        self.region_prototypes.len()
    }

    pub fn prompts(&self) -> PromptBank {
        PromptBank {
            config_fingerprint: None,
            prompts: self
                .sentence_prototypes
                .iter()
                .enumerate()
                .map(|(c, p)| (c.to_string(), p.clone()))
                .collect(),
        }
    }
}

/// Region label: a concept id or background.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegionConcept {
    Concept(usize),
    Background,
}

impl RegionConcept {
    pub fn concept(self) -> Option<usize> {
        match self {
            Self::Concept(c) => Some(c),
            Self::Background => None,
        }
    }
}

impl Serialize for RegionConcept {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Self::Concept(c) => s.serialize_u64(*c as u64),
            Self::Background => s.serialize_str("background"),
        }
    }
}

impl<'de> Deserialize<'de> for RegionConcept {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = RegionConcept;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a concept id or \"background\"")
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Self::Value, E> {
                Ok(RegionConcept::Concept(v as usize))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Self::Value, E> {
                if v == "background" {
                    Ok(RegionConcept::Background)
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDocument {
    pub image_id: String,
    pub regions: Vec<Vec<f64>>,
    pub region_concepts: Vec<RegionConcept>,
    pub sentences: Vec<Vec<f64>>,
    pub sentence_concepts: Vec<usize>,
    /// Per sentence, the sorted region indices carrying its concept.
    pub boxes: Vec<Vec<usize>>,
}

impl SyntheticDocument {
    pub fn region_bag(&self) -> Result<FeatureBag> {
        FeatureBag::from_rows(&self.regions)
    }

    pub fn sentence_bag(&self) -> Result<FeatureBag> {
        FeatureBag::from_rows(&self.sentences)
    }

    /// Distinct concepts present in the image, ascending.
    pub fn present_concepts(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.region_concepts.iter().filter_map(|r| r.concept()).collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    pub fn validate(&self, concepts: usize) -> Result<()> {
        let n = self.regions.len();
        let fail = |msg: String| Err(invalid(format!("document {}: {msg}", self.image_id)));
        if n == 0 || self.region_concepts.len() != n {
            return fail(format!("{} regions but {} region labels", n, self.region_concepts.len()));
        }
        if self.sentences.is_empty()
            || self.sentence_concepts.len() != self.sentences.len()
            || self.boxes.len() != self.sentences.len()
        {
            return fail("sentences, sentence_concepts and boxes must have equal non-zero length".into());
        }
        for rc in &self.region_concepts {
            if let RegionConcept::Concept(c) = rc {
                if *c >= concepts {
                    return fail(format!("region concept {c} out of range"));
                }
            }
        }
        for (m, (bx, &c)) in self.boxes.iter().zip(&self.sentence_concepts).enumerate() {
            if bx.is_empty() {
                return fail(format!("sentence {m} has an empty box"));
            }
            for &i in bx {
                if i >= n || self.region_concepts[i] != RegionConcept::Concept(c) {
                    return fail(format!("sentence {m} box entry {i} does not carry concept {c}"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusHeader {
    pub format: String,
    pub version: u32,
    pub spec: CorpusSpec,
    pub seed: u64,
    pub bank: ConceptBank,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_fingerprint: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub header: Option<CorpusHeader>,
    pub documents: Vec<SyntheticDocument>,
}

impl Corpus {
    pub fn bank(&self) -> Result<&ConceptBank> {
        self.header
            .as_ref()
            .map(|h| &h.bank)
            .ok_or_else(|| invalid("corpus has no header with a concept bank"))
    }
}

/// One noise-free prompt per concept, keyed by concept id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptBank {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_fingerprint: Option<String>,
    pub prompts: BTreeMap<String, Vec<f64>>,
}

impl PromptBank {
    /// Prompts ordered by numeric concept id.
    pub fn ordered(&self) -> Result<Vec<(usize, &[f64])>> {
        let mut out = Vec::with_capacity(self.prompts.len());
        for (k, v) in &self.prompts {
            let id: usize = k
                .parse()
                .map_err(|_| invalid(format!("prompt key {k:?} is not a concept id")))?;
            out.push((id, v.as_slice()));
        }
        out.sort_by_key(|(id, _)| *id);
        Ok(out)
    }
}

fn gaussian_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let mut v = gaussian_vector(dim, rng);
        let n = norm(&v);
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            return v;
        }
    }
}

fn distinct_unit_vectors(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let v = unit_vector(dim, rng);
        let clash = out
            .iter()
            .any(|u| u.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) < 1e-9);
        if !clash {
            out.push(v);
        }
    }
    out
}

fn noisy(prototype: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    prototype
        .iter()
        .map(|&p| p + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

pub fn generate_bank(spec: &CorpusSpec) -> Result<ConceptBank> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok(bank_from_rng(spec, &mut rng))
}

fn bank_from_rng(spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> ConceptBank {
    ConceptBank {
        region_prototypes: distinct_unit_vectors(spec.concepts, spec.region_dim, rng),
        sentence_prototypes: distinct_unit_vectors(spec.concepts, spec.sentence_dim, rng),
        seed: spec.seed,
    }
}

/// Draws `count` documents from `bank` using the layout and noise of `spec`.
pub fn generate_documents(
    bank: &ConceptBank,
    spec: &CorpusSpec,
    count: usize,
    id_prefix: &str,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SyntheticDocument>> {
    spec.validate()?;
    if bank.concepts() != spec.concepts {
        return Err(invalid(format!(
            "concept bank has {} concepts but the spec asks for {}",
            bank.concepts(),
            spec.concepts
        )));
    }
    let n = spec.regions;
    let mut docs = Vec::with_capacity(count);
    for d in 0..count {
        let k = rng.gen_range(spec.concepts_per_image.0..=spec.concepts_per_image.1);
        let present = index::sample(rng, spec.concepts, k).into_vec();
        let mut slots: Vec<usize> = (0..n).collect();
        slots.shuffle(rng);
        let mut labels = vec![RegionConcept::Background; n];
        let mut next = 0;
        for &c in &present {
            let count = rng.gen_range(spec.regions_per_concept.0..=spec.regions_per_concept.1);
            for &slot in &slots[next..next + count] {
                labels[slot] = RegionConcept::Concept(c);
            }
            next += count;
        }
        let regions = labels
            .iter()
            .map(|label| match label {
                RegionConcept::Concept(c) => noisy(&bank.region_prototypes[*c], spec.noise_sigma, rng),
                RegionConcept::Background => {
                    let mut v = unit_vector(spec.region_dim, rng);
                    v.iter_mut().for_each(|x| *x *= BACKGROUND_NORM);
                    v
                }
            })
            .collect();
        let described = &present[..k.min(spec.sentences_per_doc)];
        let sentences = described
            .iter()
            .map(|&c| noisy(&bank.sentence_prototypes[c], spec.noise_sigma, rng))
            .collect();
        let boxes = described
            .iter()
            .map(|&c| (0..n).filter(|&i| labels[i] == RegionConcept::Concept(c)).collect())
            .collect();
        docs.push(SyntheticDocument {
            image_id: format!("{id_prefix}{d:05}"),
            regions,
            region_concepts: labels,
            sentences,
            sentence_concepts: described.to_vec(),
            boxes,
        });
    }
    Ok(docs)
}

/// Concept bank plus `spec.docs` documents, all from one seeded stream.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bank = bank_from_rng(spec, &mut rng);
    let documents = generate_documents(&bank, spec, spec.docs, "img", &mut rng)?;
    Ok(Corpus {
        header: Some(CorpusHeader {
            format: CORPUS_FORMAT.to_string(),
            version: CORPUS_VERSION,
            spec: *spec,
            seed: spec.seed,
            bank,
            config_fingerprint: None,
        }),
        documents,
    })
}

/// Shuffle-split into `(train, test)` with `round(fraction · len)` training documents.
pub fn split_corpus<T: Clone>(documents: &[T], train_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(invalid(format!("train_fraction must lie in (0, 1), got {train_fraction}")));
    }
    let n_train = (train_fraction * documents.len() as f64).round() as usize;
    if n_train == 0 || n_train == documents.len() {
        return Err(invalid(format!(
            "splitting {} documents at {train_fraction} leaves an empty side",
            documents.len()
        )));
    }
    let mut order: Vec<usize> = (0..documents.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (a, b) = order.split_at(n_train);
    let pick = |ix: &[usize]| ix.iter().map(|&i| documents[i].clone()).collect();
    Ok((pick(a), pick(b)))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    header: CorpusHeader,
}

pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    if let Some(header) = &corpus.header {
        writeln!(w, "{}", to_string_sig17(&HeaderLine { header: header.clone() })?)?;
    }
    for doc in &corpus.documents {
        writeln!(w, "{}", to_string_sig17(doc)?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let reader = BufReader::new(File::open(path)?);
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut header = None;
    let mut documents = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        if lineno == 1 && line.trim_start().starts_with("{\"header\"") {
            let h: HeaderLine = serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
            if h.header.format != CORPUS_FORMAT || h.header.version != CORPUS_VERSION {
                return Err(parse_err(
                    lineno,
                    format!(
                        "unsupported corpus format {:?} version {} (expected {CORPUS_FORMAT:?} version {CORPUS_VERSION})",
                        h.header.format, h.header.version
                    ),
                ));
            }
            header = Some(h.header);
            continue;
        }
        let doc: SyntheticDocument = serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        let concepts = header.as_ref().map_or(usize::MAX, |h: &CorpusHeader| h.spec.concepts);
        doc.validate(concepts).map_err(|e| parse_err(lineno, e.to_string()))?;
        documents.push(doc);
    }
    Ok(Corpus { header, documents })
}

pub fn write_prompts(path: &Path, prompts: &PromptBank) -> Result<()> {
    std::fs::write(path, crate::json::to_string_pretty_sig17(prompts)? + "\n")?;
    Ok(())
}

pub fn read_prompts(path: &Path) -> Result<PromptBank> {
    let text = std::fs::read_to_string(path)?;
    let bank: PromptBank = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    bank.ordered()?;
    Ok(bank)
}
