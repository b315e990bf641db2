//! Downstream evaluation: zero-shot and linear-probe classification,
//! grounding (CNR, mIoU, critical-region hits), cross-modal retrieval and the
//! aggregator ablation grid.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregators::{GlobalAggregatorSpec, LocalAggregatorSpec, SentenceAggregatorSpec};
use crate::encoders::ModelParams;
use crate::error::{check_dim, invalid, Error, Result};
use crate::exec::Execution;
use crate::numeric::{cosine, first_argmax, population_stats, stable_softmax};
use crate::objective::ObjectiveConfig;
use crate::scoring::{image_document_score, FeatureBag, ScoreFunctionConfig};
use crate::synthgen::{generate_documents, ConceptBank, CorpusSpec, SyntheticDocument};
use crate::trainer::{csv_err, train, TrainConfig};

/// Variance guard in the CNR denominator.
pub const CNR_EPS: f64 = 1e-8;
pub const MIOU_THRESHOLDS: usize = 41;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Zs,
    Probe,
    Grounding,
    Retrieval,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Zs, Task::Probe, Task::Grounding, Task::Retrieval];

    pub fn name(self) -> &'static str {
        match self {
            Self::Zs => "zs",
            Self::Probe => "probe",
            Self::Grounding => "grounding",
            Self::Retrieval => "retrieval",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| invalid(format!("unknown task {s:?} (expected zs, probe, grounding or retrieval)")))
    }
}

pub fn parse_tasks(list: &str) -> Result<Vec<Task>> {
    let tasks: BTreeSet<Task> = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    if tasks.is_empty() {
        return Err(invalid("no evaluation tasks given"));
    }
    Ok(tasks.into_iter().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub train_fraction: f64,
    pub split_seed: u64,
    /// Size of the held-out single-concept set used for zero-shot accuracy.
    pub zero_shot_docs: usize,
    pub probe_iterations: usize,
    pub probe_lr: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.9,
            split_seed: 0,
            zero_shot_docs: 200,
            probe_iterations: 500,
            probe_lr: 0.1,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(invalid(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if !(self.probe_lr > 0.0 && self.probe_lr.is_finite()) {
            return Err(invalid(format!("probe_lr must be > 0, got {}", self.probe_lr)));
        }
        Ok(())
    }

    pub fn probe(&self) -> ProbeConfig {
        ProbeConfig {
            iterations: self.probe_iterations,
            lr: self.probe_lr,
        }
    }
}

// ---------------------------------------------------------------- zero-shot

/// Min-max normalizes each column of `scores[row][col]` to `[0, 1]` in place.
/// Constant columns become 0.5; their indices are returned.
pub fn normalize_columns(scores: &mut [Vec<f64>]) -> Vec<usize> {
    let cols = scores.first().map_or(0, Vec::len);
    let mut constant = Vec::new();
    for c in 0..cols {
        let (lo, hi) = scores
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r[c]), hi.max(r[c])));
        if hi > lo {
            for r in scores.iter_mut() {
                r[c] = (r[c] - lo) / (hi - lo);
            }
        } else {
            constant.push(c);
            for r in scores.iter_mut() {
                r[c] = 0.5;
            }
        }
    }
    constant
}

/// Score function used for prompt scoring: the model's local aggregator if it
/// has one, otherwise its global aggregator, with a single-sentence bag.
pub fn prompt_score_config(objective: &ObjectiveConfig) -> Result<ScoreFunctionConfig> {
    match (objective.local, objective.global) {
        (Some(l), _) => Ok(ScoreFunctionConfig::local(l, SentenceAggregatorSpec::Id)),
        (None, Some(g)) => Ok(ScoreFunctionConfig::global(g, SentenceAggregatorSpec::Id)),
        (None, None) => Err(invalid("objective has no score function")),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZeroShotResult {
    pub predictions: Vec<usize>,
    pub accuracy: f64,
    /// Normalized per-image, per-concept scores.
    pub scores: Vec<Vec<f64>>,
}

/// Classifies each image by the prompt with the highest normalized score.
///
/// `prompts` are raw sentence observations ordered by concept id.
pub fn zero_shot_classify(
    model: &ModelParams,
    score: &ScoreFunctionConfig,
    prompts: &[Vec<f64>],
    images: &[FeatureBag],
    labels: &[usize],
    execution: Execution,
) -> Result<ZeroShotResult> {
    if prompts.len() < 2 {
        return Err(invalid("zero-shot classification needs at least 2 prompts"));
    }
    check_dim("zero-shot labels", images.len(), labels.len())?;
    if images.is_empty() {
        return Err(Error::Empty("zero-shot images"));
    }
    let encoded_prompts: Vec<FeatureBag> = prompts
        .iter()
        .map(|p| model.encode_sentences(&FeatureBag::from_rows(&[p])?))
        .collect::<Result<_>>()?;
    let mut scores: Vec<Vec<f64>> = execution
        .map(images.len(), |i| {
            let regions = model.encode_regions(&images[i])?;
            encoded_prompts
                .iter()
                .map(|p| image_document_score(score, model.global_params(), &regions, p))
                .collect::<Result<Vec<f64>>>()
        })
        .into_iter()
        .collect::<Result<_>>()?;
    for c in normalize_columns(&mut scores) {
        warn!("zero-shot: concept {c} has a constant score column; normalized to 0.5");
    }
    let predictions: Vec<usize> = scores
        .iter()
        .map(|row| first_argmax(&stable_softmax(row, 1.0).expect("non-empty row")))
        .collect();
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(ZeroShotResult {
        accuracy: correct as f64 / images.len() as f64,
        predictions,
        scores,
    })
}

/// Held-out documents with exactly one concept each, drawn from `bank` on a
/// stream separate from the training corpus.
pub fn single_concept_documents(bank: &ConceptBank, spec: &CorpusSpec, count: usize) -> Result<Vec<SyntheticDocument>> {
    let single = CorpusSpec {
        concepts_per_image: (1, 1),
        ..*spec
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(2);
    generate_documents(bank, &single, count, "zs", &mut rng)
}

// ---------------------------------------------------------------- linear probe

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            lr: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub auc: f64,
}

/// Mean of the encoded region features of each image.
pub fn pooled_region_features(model: &ModelParams, images: &[FeatureBag], execution: Execution) -> Result<Vec<Vec<f64>>> {
    execution
        .map(images.len(), |i| {
            let enc = model.encode_regions(&images[i])?;
            enc.mean_of(&(0..enc.len()).collect::<Vec<_>>())
        })
        .into_iter()
        .collect()
}

/// Rank-based ROC AUC (Mann-Whitney U with average ranks for ties).
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    check_dim("auc labels", scores.len(), positive.len())?;
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(invalid("AUC needs at least one positive and one negative"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let pos_rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// Softmax regression on frozen features by full-batch gradient descent.
///
/// Each label set is a target distribution spread uniformly over its
/// classes. Accuracy counts a hit when the top class is in the label set;
/// AUC is the one-vs-rest macro average over classes that have both
/// positives and negatives in the test set.
pub fn linear_probe(
    train_x: &[Vec<f64>],
    train_y: &[Vec<usize>],
    test_x: &[Vec<f64>],
    test_y: &[Vec<usize>],
    classes: usize,
    config: &ProbeConfig,
) -> Result<ProbeResult> {
    check_dim("probe training labels", train_x.len(), train_y.len())?;
    check_dim("probe test labels", test_x.len(), test_y.len())?;
    let dim = train_x.first().ok_or(Error::Empty("probe training set"))?.len();
    if test_x.is_empty() {
        return Err(Error::Empty("probe test set"));
    }
    let seen: BTreeSet<usize> = train_y.iter().flatten().copied().collect();
    if seen.len() < 2 {
        return Err(invalid("linear probe training set contains a single class"));
    }
    if let Some(&c) = seen.iter().chain(test_y.iter().flatten()).find(|&&c| c >= classes) {
        return Err(invalid(format!("probe label {c} out of range for {classes} classes")));
    }
    for x in train_x.iter().chain(test_x) {
        check_dim("probe feature", dim, x.len())?;
    }
    let targets: Vec<Vec<f64>> = train_y
        .iter()
        .map(|ys| {
            let mut t = vec![0.0; classes];
            for &y in ys {
                t[y] += 1.0 / ys.len() as f64;
            }
            t
        })
        .collect();
    let mut w = vec![0.0; classes * dim];
    let mut b = vec![0.0; classes];
    let logits = |w: &[f64], b: &[f64], x: &[f64]| -> Vec<f64> {
        (0..classes)
            .map(|c| b[c] + crate::numeric::dot(&w[c * dim..(c + 1) * dim], x))
            .collect()
    };
    let n = train_x.len() as f64;
    for _ in 0..config.iterations {
        let mut gw = vec![0.0; classes * dim];
        let mut gb = vec![0.0; classes];
        for (x, t) in train_x.iter().zip(&targets) {
            let p = stable_softmax(&logits(&w, &b, x), 1.0)?;
            for c in 0..classes {
                let d = (p[c] - t[c]) / n;
                gb[c] += d;
                crate::numeric::axpy(d, x, &mut gw[c * dim..(c + 1) * dim]);
            }
        }
        crate::numeric::axpy(-config.lr, &gw, &mut w);
        crate::numeric::axpy(-config.lr, &gb, &mut b);
    }
    let probs: Vec<Vec<f64>> = test_x
        .iter()
        .map(|x| stable_softmax(&logits(&w, &b, x), 1.0))
        .collect::<Result<_>>()?;
    let hits = probs
        .iter()
        .zip(test_y)
        .filter(|(p, ys)| ys.contains(&first_argmax(p)))
        .count();
    let mut aucs = Vec::new();
    for c in 0..classes {
        let positive: Vec<bool> = test_y.iter().map(|ys| ys.contains(&c)).collect();
        if positive.iter().any(|&p| p) && positive.iter().any(|&p| !p) {
            let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
            aucs.push(roc_auc(&scores, &positive)?);
        }
    }
    if aucs.is_empty() {
        return Err(invalid("no class has both positives and negatives in the probe test set"));
    }
    Ok(ProbeResult {
        accuracy: hits as f64 / test_x.len() as f64,
        auc: aucs.iter().sum::<f64>() / aucs.len() as f64,
    })
}

// ---------------------------------------------------------------- grounding

#[derive(Clone, Debug, PartialEq)]
pub struct GroundingCase {
    pub image_id: String,
    pub sentence_index: usize,
    pub image: FeatureBag,
    pub sentence: Vec<f64>,
    pub box_regions: Vec<usize>,
}

impl GroundingCase {
    pub fn validate(&self) -> Result<()> {
        if self.box_regions.is_empty() {
            return Err(invalid(format!("{}: empty box", self.image_id)));
        }
        if let Some(&i) = self.box_regions.iter().find(|&&i| i >= self.image.len()) {
            return Err(invalid(format!("{}: box index {i} out of range", self.image_id)));
        }
        Ok(())
    }
}

/// One case per sentence of every document.
pub fn grounding_cases(docs: &[SyntheticDocument]) -> Result<Vec<GroundingCase>> {
    let mut out = Vec::new();
    for doc in docs {
        let image = doc.region_bag()?;
        for (m, (s, bx)) in doc.sentences.iter().zip(&doc.boxes).enumerate() {
            out.push(GroundingCase {
                image_id: doc.image_id.clone(),
                sentence_index: m,
                image: image.clone(),
                sentence: s.clone(),
                box_regions: bx.clone(),
            });
        }
    }
    Ok(out)
}

/// Region-sentence similarities `h(xₙ, y)` for one case, unsmoothed.
pub fn grounding_scores(model: &ModelParams, image: &FeatureBag, sentence: &[f64]) -> Result<Vec<f64>> {
    let regions = model.encode_regions(image)?;
    let y = model.encode_sentences(&FeatureBag::from_rows(&[sentence])?)?;
    Ok(regions.rows().map(|x| cosine(x, y.row(0))).collect())
}

fn split_by_box(map: &[f64], box_regions: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
    if box_regions.is_empty() {
        return Err(invalid("box must be non-empty"));
    }
    let mut inside = vec![false; map.len()];
    for &i in box_regions {
        if i >= map.len() {
            return Err(invalid(format!("box index {i} out of range for {} regions", map.len())));
        }
        inside[i] = true;
    }
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (&v, &inn) in map.iter().zip(&inside) {
        if inn {
            a.push(v);
        } else {
            b.push(v);
        }
    }
    if b.is_empty() {
        return Err(invalid("box covers every region; contrast is undefined"));
    }
    Ok((a, b))
}

/// `|μ_in − μ_out| / √(σ²_in + σ²_out + 1e-8)` with population variances.
pub fn cnr(map: &[f64], box_regions: &[usize]) -> Result<f64> {
    let (inside, outside) = split_by_box(map, box_regions)?;
    let (mi, vi) = population_stats(&inside)?;
    let (mo, vo) = population_stats(&outside)?;
    Ok((mi - mo).abs() / (vi + vo + CNR_EPS).sqrt())
}

/// Thresholds `−1, −0.95, …, 1`.
pub fn miou_thresholds() -> Vec<f64> {
    (0..MIOU_THRESHOLDS).map(|i| (i as f64 - 20.0) / 20.0).collect()
}

/// Mean over [`miou_thresholds`] of the IoU between `{n : mapₙ ≥ t}` and the box.
pub fn miou(map: &[f64], box_regions: &[usize]) -> Result<f64> {
    split_by_box(map, box_regions)?;
    let in_box: BTreeSet<usize> = box_regions.iter().copied().collect();
    let total: f64 = miou_thresholds()
        .iter()
        .map(|&t| {
            let mut inter = 0usize;
            let mut predicted = 0usize;
            for (i, &s) in map.iter().enumerate() {
                if s >= t {
                    predicted += 1;
                    if in_box.contains(&i) {
                        inter += 1;
                    }
                }
            }
            let union = predicted + in_box.len() - inter;
            if union == 0 {
                0.0
            } else {
                inter as f64 / union as f64
            }
        })
        .sum();
    Ok(total / MIOU_THRESHOLDS as f64)
}

/// Whether the highest-scoring region (lowest index on ties) lies in the box.
pub fn critical_region_hit(map: &[f64], box_regions: &[usize]) -> bool {
    !map.is_empty() && box_regions.contains(&first_argmax(map))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreMapRecord {
    pub image_id: String,
    pub sentence_index: usize,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundingSummary {
    pub cases: usize,
    pub mean_cnr: f64,
    pub mean_miou: f64,
    pub hit_rate: f64,
    pub maps: Vec<ScoreMapRecord>,
}

pub fn evaluate_grounding(model: &ModelParams, cases: &[GroundingCase], execution: Execution) -> Result<GroundingSummary> {
    if cases.is_empty() {
        return Err(Error::Empty("grounding cases"));
    }
    let per_case: Vec<(f64, f64, bool, Vec<f64>)> = execution
        .map(cases.len(), |i| {
            let case = &cases[i];
            case.validate()?;
            let map = grounding_scores(model, &case.image, &case.sentence)?;
            Ok((
                cnr(&map, &case.box_regions)?,
                miou(&map, &case.box_regions)?,
                critical_region_hit(&map, &case.box_regions),
                map,
            ))
        })
        .into_iter()
        .collect::<Result<_>>()?;
    let n = cases.len() as f64;
    Ok(GroundingSummary {
        cases: cases.len(),
        mean_cnr: per_case.iter().map(|c| c.0).sum::<f64>() / n,
        mean_miou: per_case.iter().map(|c| c.1).sum::<f64>() / n,
        hit_rate: per_case.iter().filter(|c| c.2).count() as f64 / n,
        maps: per_case
            .into_iter()
            .zip(cases)
            .map(|((_, _, _, scores), c)| ScoreMapRecord {
                image_id: c.image_id.clone(),
                sentence_index: c.sentence_index,
                scores,
            })
            .collect(),
    })
}

// ---------------------------------------------------------------- retrieval

#[derive(Clone, Debug, PartialEq)]
pub struct DirectionMetrics {
    /// 1-based rank of the paired item for each query, in query order.
    pub ranks: Vec<usize>,
    /// `(K, R@K)` pairs.
    pub recall: Vec<(usize, f64)>,
    pub median_rank: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalMetrics {
    pub cases: usize,
    pub image_to_text: DirectionMetrics,
    pub text_to_image: DirectionMetrics,
}

/// `K ∈ {1, ⌈Q/20⌉, ⌈Q/10⌉}`, deduplicated.
pub fn retrieval_ks(q: usize) -> Vec<usize> {
    let mut ks = vec![1, q.div_ceil(20), q.div_ceil(10)];
    ks.dedup();
    ks
}

fn rank_of_pair(row: &[f64], target: usize) -> usize {
    let s = row[target];
    1 + row
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < target))
        .count()
}

fn direction(ranks: Vec<usize>) -> DirectionMetrics {
    let q = ranks.len();
    let recall = retrieval_ks(q)
        .into_iter()
        .map(|k| (k, ranks.iter().filter(|&&r| r <= k).count() as f64 / q as f64))
        .collect();
    let mut sorted = ranks.clone();
    sorted.sort_unstable();
    DirectionMetrics {
        median_rank: sorted[(q - 1) / 2],
        recall,
        ranks,
    }
}

/// Retrieval metrics from a `Q × Q` matrix `scores[image][text]` whose
/// diagonal holds the true pairs.
pub fn retrieval_from_scores(scores: &[Vec<f64>]) -> Result<RetrievalMetrics> {
    let q = scores.len();
    if q < 2 {
        return Err(invalid("retrieval needs at least 2 cases"));
    }
    for row in scores {
        check_dim("retrieval score row", q, row.len())?;
    }
    let i2t = (0..q).map(|i| rank_of_pair(&scores[i], i)).collect();
    let t2i = (0..q)
        .map(|j| {
            let col: Vec<f64> = scores.iter().map(|r| r[j]).collect();
            rank_of_pair(&col, j)
        })
        .collect();
    Ok(RetrievalMetrics {
        cases: q,
        image_to_text: direction(i2t),
        text_to_image: direction(t2i),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalCase {
    pub image_id: String,
    pub sentence_index: usize,
    /// Mean of the encoded region features inside the box.
    pub box_feature: Vec<f64>,
    pub sentence_feature: Vec<f64>,
}

pub fn retrieval_cases(model: &ModelParams, cases: &[GroundingCase], execution: Execution) -> Result<Vec<RetrievalCase>> {
    execution
        .map(cases.len(), |i| {
            let c = &cases[i];
            c.validate()?;
            let regions = model.encode_regions(&c.image)?;
            let y = model.encode_sentences(&FeatureBag::from_rows(&[&c.sentence])?)?;
            Ok(RetrievalCase {
                image_id: c.image_id.clone(),
                sentence_index: c.sentence_index,
                box_feature: regions.mean_of(&c.box_regions)?,
                sentence_feature: y.row(0).to_vec(),
            })
        })
        .into_iter()
        .collect()
}

/// Box-to-sentence and sentence-to-box retrieval with cosine scores.
pub fn retrieval_eval(cases: &[RetrievalCase]) -> Result<RetrievalMetrics> {
    let mut seen = BTreeSet::new();
    for c in cases {
        if !seen.insert((c.image_id.as_str(), c.sentence_index)) {
            return Err(invalid(format!(
                "duplicate retrieval pairing ({}, sentence {})",
                c.image_id, c.sentence_index
            )));
        }
    }
    let scores: Vec<Vec<f64>> = cases
        .iter()
        .map(|a| cases.iter().map(|b| cosine(&a.box_feature, &b.sentence_feature)).collect())
        .collect();
    retrieval_from_scores(&scores)
}

// ---------------------------------------------------------------- reports

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub metric: String,
    pub value: f64,
    pub config_fingerprint: String,
    pub seed: u64,
}

pub fn write_reports(path: &Path, rows: &[EvalReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        if !r.value.is_finite() {
            return Err(invalid(format!("{}/{} is not finite", r.task, r.metric)));
        }
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_reports(path: &Path) -> Result<Vec<EvalReport>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

/// Data an evaluation run needs besides the model.
pub struct EvalData<'a> {
    pub bank: &'a ConceptBank,
    pub spec: &'a CorpusSpec,
    pub train: &'a [SyntheticDocument],
    pub test: &'a [SyntheticDocument],
}

#[derive(Clone, Debug, Default)]
pub struct EvalOutcome {
    /// `(task, metric, value)` in a fixed order.
    pub metrics: Vec<(String, String, f64)>,
    pub score_maps: Vec<ScoreMapRecord>,
}

impl EvalOutcome {
    pub fn get(&self, task: &str, metric: &str) -> Option<f64> {
        self.metrics
            .iter()
            .find(|(t, m, _)| t == task && m == metric)
            .map(|(_, _, v)| *v)
    }

    pub fn reports(&self, fingerprint: &str, seed: u64) -> Vec<EvalReport> {
        self.metrics
            .iter()
            .map(|(t, m, v)| EvalReport {
                task: t.clone(),
                metric: m.clone(),
                value: *v,
                config_fingerprint: fingerprint.to_string(),
                seed,
            })
            .collect()
    }
}

fn labels_of(docs: &[SyntheticDocument]) -> Vec<Vec<usize>> {
    docs.iter().map(SyntheticDocument::present_concepts).collect()
}

fn bags_of(docs: &[SyntheticDocument]) -> Result<Vec<FeatureBag>> {
    docs.iter().map(SyntheticDocument::region_bag).collect()
}

pub fn evaluate(
    model: &ModelParams,
    objective: &ObjectiveConfig,
    data: &EvalData<'_>,
    config: &EvalConfig,
    tasks: &[Task],
    execution: Execution,
) -> Result<EvalOutcome> {
    let mut out = EvalOutcome::default();
    let mut push = |task: Task, metric: &str, value: f64| {
        out.metrics.push((task.name().to_string(), metric.to_string(), value));
    };
    let mut maps = Vec::new();
    for &task in tasks {
        match task {
            Task::Zs => {
                let docs = single_concept_documents(data.bank, data.spec, config.zero_shot_docs)?;
                let labels: Vec<usize> = docs.iter().map(|d| d.sentence_concepts[0]).collect();
                let res = zero_shot_classify(
                    model,
                    &prompt_score_config(objective)?,
                    &data.bank.sentence_prototypes,
                    &bags_of(&docs)?,
                    &labels,
                    execution,
                )?;
                push(task, "accuracy", res.accuracy);
                push(task, "images", docs.len() as f64);
            }
            Task::Probe => {
                let train_x = pooled_region_features(model, &bags_of(data.train)?, execution)?;
                let test_x = pooled_region_features(model, &bags_of(data.test)?, execution)?;
                let res = linear_probe(
                    &train_x,
                    &labels_of(data.train),
                    &test_x,
                    &labels_of(data.test),
                    data.bank.concepts(),
                    &config.probe(),
                )?;
                push(task, "accuracy", res.accuracy);
                push(task, "auc", res.auc);
            }
            Task::Grounding => {
                let cases = grounding_cases(data.test)?;
                let g = evaluate_grounding(model, &cases, execution)?;
                push(task, "cnr", g.mean_cnr);
                push(task, "miou", g.mean_miou);
                push(task, "critical_hit_rate", g.hit_rate);
                push(task, "cases", g.cases as f64);
                maps = g.maps;
            }
            Task::Retrieval => {
                let cases = retrieval_cases(model, &grounding_cases(data.test)?, execution)?;
                let r = retrieval_eval(&cases)?;
                for (name, d) in [("i2t", &r.image_to_text), ("t2i", &r.text_to_image)] {
                    for &(k, v) in &d.recall {
                        push(task, &format!("{name}_R@{k}"), v);
                    }
                    push(task, &format!("{name}_MedR"), d.median_rank as f64);
                }
                push(task, "cases", r.cases as f64);
            }
        }
    }
    out.score_maps = maps;
    Ok(out)
}

// ---------------------------------------------------------------- ablation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub label: String,
    pub objective: ObjectiveConfig,
}

impl AblationEntry {
    pub fn new(objective: ObjectiveConfig) -> Self {
        Self {
            label: objective.label(),
            objective,
        }
    }
}

/// Local-only {Max, Avg, LSE, NOR, NAND}, global-only {Avg, Att, NL} and
/// {LSE+Avg, LSE+Att, LSE+NL}.
pub fn default_grid(base: &ObjectiveConfig) -> Vec<AblationEntry> {
    let sentence = base.sentence;
    let lse = match base.local {
        Some(l @ LocalAggregatorSpec::Lse { .. }) => l,
        _ => LocalAggregatorSpec::lse(crate::aggregators::DEFAULT_GAMMA_L),
    };
    let nl = match base.global {
        Some(g @ GlobalAggregatorSpec::Nl { .. }) => g,
        _ => GlobalAggregatorSpec::nl(crate::aggregators::DEFAULT_GAMMA_G),
    };
    let local = |l| ObjectiveConfig {
        local: Some(l),
        global: None,
        sentence,
    };
    let global = |g| ObjectiveConfig {
        local: None,
        global: Some(g),
        sentence,
    };
    let both = |g| ObjectiveConfig {
        local: Some(lse),
        global: Some(g),
        sentence,
    };
    [
        local(LocalAggregatorSpec::Max),
        local(LocalAggregatorSpec::Avg),
        local(lse),
        local(LocalAggregatorSpec::Nor),
        local(LocalAggregatorSpec::nand()),
        global(GlobalAggregatorSpec::Avg),
        global(GlobalAggregatorSpec::Att),
        global(nl),
        both(GlobalAggregatorSpec::Avg),
        both(GlobalAggregatorSpec::Att),
        both(nl),
    ]
    .into_iter()
    .map(AblationEntry::new)
    .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationMetrics {
    pub auc: f64,
    pub cnr: f64,
    /// Mean of the two directions' median ranks.
    pub medr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub seed: u64,
    pub metrics: Option<AblationMetrics>,
    pub error: Option<String>,
}

/// Trains and evaluates one objective; used per grid row.
pub fn ablation_metrics(
    objective: &ObjectiveConfig,
    train_config: &TrainConfig,
    data: &EvalData<'_>,
    eval_config: &EvalConfig,
    execution: Execution,
) -> Result<AblationMetrics> {
    let config = TrainConfig {
        objective: *objective,
        ..train_config.clone()
    };
    let (model, _) = train(data.train, &config)?;
    let out = evaluate(
        &model,
        objective,
        data,
        eval_config,
        &[Task::Probe, Task::Grounding, Task::Retrieval],
        execution,
    )?;
    let get = |t: &str, m: &str| out.get(t, m).ok_or_else(|| invalid(format!("missing metric {t}/{m}")));
    Ok(AblationMetrics {
        auc: get("probe", "auc")?,
        cnr: get("grounding", "cnr")?,
        medr: (get("retrieval", "i2t_MedR")? + get("retrieval", "t2i_MedR")?) / 2.0,
    })
}

/// Runs every grid entry for every seed. Rows are independent and may run
/// concurrently; each trains from `seed` on the same corpus. Failures are
/// recorded in the row rather than aborting the grid.
pub fn ablation_grid(
    grid: &[AblationEntry],
    seeds: &[u64],
    train_config: &TrainConfig,
    data: &EvalData<'_>,
    eval_config: &EvalConfig,
    execution: Execution,
) -> Vec<AblationRow> {
    let jobs: Vec<(&AblationEntry, u64)> = seeds
        .iter()
        .flat_map(|&s| grid.iter().map(move |e| (e, s)))
        .collect();
    execution.map(jobs.len(), |i| {
        let (entry, seed) = jobs[i];
        let config = TrainConfig {
            seed,
            ..train_config.clone()
        };
        match ablation_metrics(&entry.objective, &config, data, eval_config, Execution::Sequential) {
            Ok(m) => AblationRow {
                label: entry.label.clone(),
                seed,
                metrics: Some(m),
                error: None,
            },
            Err(e) => AblationRow {
                label: entry.label.clone(),
                seed,
                metrics: None,
                error: Some(e.to_string()),
            },
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedRow {
    pub label: String,
    pub seed: u64,
    pub auc: Option<f64>,
    pub cnr: Option<f64>,
    /// Flipped so that higher is better.
    pub medr: Option<f64>,
}

fn min_max(values: &[Option<f64>], flip: bool) -> Vec<Option<f64>> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    let lo = present.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = present.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .map(|v| {
            v.map(|v| {
                if hi > lo {
                    let x = (v - lo) / (hi - lo);
                    if flip {
                        1.0 - x
                    } else {
                        x
                    }
                } else {
                    0.5
                }
            })
        })
        .collect()
}

/// Min-max normalizes each metric over the successful rows; MedR is flipped
/// so that 1 is best everywhere. A metric with no spread maps to 0.5.
pub fn normalize_table(rows: &[AblationRow]) -> Vec<NormalizedRow> {
    let col = |f: fn(&AblationMetrics) -> f64| rows.iter().map(|r| r.metrics.as_ref().map(f)).collect::<Vec<_>>();
    let auc = min_max(&col(|m| m.auc), false);
    let cnr = min_max(&col(|m| m.cnr), false);
    let medr = min_max(&col(|m| m.medr), true);
    rows.iter()
        .enumerate()
        .map(|(i, r)| NormalizedRow {
            label: r.label.clone(),
            seed: r.seed,
            auc: auc[i],
            cnr: cnr[i],
            medr: medr[i],
        })
        .collect()
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "failed".to_string(), |v| format!("{v:.3}"))
}

/// Plain-text table of raw and normalized metrics.
pub fn render_table(rows: &[AblationRow]) -> String {
    let norm = normalize_table(rows);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<10} {:>4} {:>7} {:>7} {:>7} | {:>8} {:>8} {:>8}",
        "config", "seed", "AUC", "CNR", "MedR", "n.AUC", "n.CNR", "n.MedR↑"
    );
    for (r, n) in rows.iter().zip(&norm) {
        let m = r.metrics.as_ref();
        let _ = writeln!(
            s,
            "{:<10} {:>4} {:>7} {:>7} {:>7} | {:>8} {:>8} {:>8}",
            r.label,
            r.seed,
            cell(m.map(|m| m.auc)),
            cell(m.map(|m| m.cnr)),
            cell(m.map(|m| m.medr)),
            cell(n.auc),
            cell(n.cnr),
            cell(n.medr),
        );
        if let Some(e) = &r.error {
            let _ = writeln!(s, "    error: {e}");
        }
    }
    s
}
