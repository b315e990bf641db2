//! Image-document score functions.
//!
//! The local score applies a local aggregator to each column of the
//! region-sentence cosine matrix and then a sentence aggregator:
//! `S_l = π_s({π_l({h(xₙ, y_m)}ₙ)}_m)`. The global score pools the regions
//! first and scores the pooled feature against each sentence:
//! `S_g = π_s({h(π_g({xₙ}), y_m)}_m)`. Conditioned global aggregators (NL, CA)
//! pool once per sentence; unconditioned ones (Avg, Att) pool once per image.

use serde::{Deserialize, Serialize};

use crate::aggregators::{
    aggregate_local, aggregate_local_backward, aggregate_sentences, aggregate_sentences_backward,
    finish_pool_backward, pool, pool_backward, prepare_regions, GlobalAggregatorSpec, GlobalParamGrad,
    GlobalParams, LocalAggregatorSpec, PoolAccumulator, SentenceAggregatorSpec,
};
use crate::error::{check_dim, invalid, Error, Result};
use crate::numeric::{cosine, cosine_backward_acc, DenseVector};

/// Unordered collection of equal-length feature vectors, stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureBag {
    dim: usize,
    values: Vec<f64>,
}

impl FeatureBag {
    pub fn new(dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || values.is_empty() {
            return Err(Error::Empty("feature bag"));
        }
        if !values.len().is_multiple_of(dim) {
            return Err(invalid(format!(
                "feature bag of {} values is not a whole number of {dim}-dimensional vectors",
                values.len()
            )));
        }
        Ok(Self { dim, values })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let first = rows.first().ok_or(Error::Empty("feature bag"))?;
        let dim = first.as_ref().len();
        let mut values = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            check_dim("feature bag row", dim, r.as_ref().len())?;
            values.extend_from_slice(r.as_ref());
        }
        Self::new(dim, values)
    }

    pub fn from_vectors(vectors: &[DenseVector]) -> Result<Self> {
        Self::from_rows(vectors)
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.values.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Bag whose i-th row is row `order[i]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        check_dim("permutation length", self.len(), order.len())?;
        let rows: Vec<&[f64]> = order.iter().map(|&i| self.row(i)).collect();
        Self::from_rows(&rows)
    }

    /// Mean of the selected rows.
    pub fn mean_of(&self, indices: &[usize]) -> Result<Vec<f64>> {
        if indices.is_empty() {
            return Err(Error::Empty("row selection"));
        }
        let mut out = vec![0.0; self.dim];
        for &i in indices {
            if i >= self.len() {
                return Err(invalid(format!("row index {i} out of range for bag of {}", self.len())));
            }
            for (o, v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        let n = indices.len() as f64;
        out.iter_mut().for_each(|v| *v /= n);
        Ok(out)
    }
}

/// Region-sentence cosine similarities, entry `(n, m) = h(xₙ, y_m)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    regions: usize,
    sentences: usize,
    values: Vec<f64>,
}

impl ScoreMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows.first().ok_or(Error::Empty("score matrix"))?;
        let sentences = first.len();
        if sentences == 0 {
            return Err(Error::Empty("score matrix"));
        }
        let mut values = Vec::with_capacity(rows.len() * sentences);
        for r in rows {
            check_dim("score matrix row", sentences, r.len())?;
            if r.iter().any(|v| !(-1.0..=1.0).contains(v)) {
                return Err(invalid("score matrix entries must lie in [-1, 1]"));
            }
            values.extend_from_slice(r);
        }
        Ok(Self {
            regions: rows.len(),
            sentences,
            values,
        })
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    pub fn sentences(&self) -> usize {
        self.sentences
    }

    pub fn get(&self, n: usize, m: usize) -> f64 {
        self.values[n * self.sentences + m]
    }

    pub fn column(&self, m: usize) -> Vec<f64> {
        (0..self.regions).map(|n| self.get(n, m)).collect()
    }
}

pub fn score_matrix(regions: &FeatureBag, sentences: &FeatureBag) -> Result<ScoreMatrix> {
    check_dim("score_matrix feature dim", regions.dim(), sentences.dim())?;
    let mut values = Vec::with_capacity(regions.len() * sentences.len());
    for x in regions.rows() {
        for y in sentences.rows() {
            values.push(cosine(x, y));
        }
    }
    Ok(ScoreMatrix {
        regions: regions.len(),
        sentences: sentences.len(),
        values,
    })
}

pub fn image_sentence_scores_local(spec: &LocalAggregatorSpec, sm: &ScoreMatrix) -> Result<Vec<f64>> {
    (0..sm.sentences())
        .map(|m| aggregate_local(spec, &sm.column(m)))
        .collect()
}

pub fn image_sentence_scores_global(
    spec: &GlobalAggregatorSpec,
    params: GlobalParams<'_>,
    regions: &FeatureBag,
    sentences: &FeatureBag,
    sm: &ScoreMatrix,
) -> Result<Vec<f64>> {
    check_dim("global scoring feature dim", regions.dim(), sentences.dim())?;
    check_dim("score matrix regions", regions.len(), sm.regions())?;
    check_dim("score matrix sentences", sentences.len(), sm.sentences())?;
    let prepared = prepare_regions(spec, params, regions)?;
    if spec.is_conditioned() {
        sentences
            .rows()
            .enumerate()
            .map(|(m, y)| {
                let pooled = pool(spec, params, &prepared, regions, Some(y), Some(&sm.column(m)))?;
                Ok(cosine(&pooled.feature, y))
            })
            .collect()
    } else {
        let pooled = pool(spec, params, &prepared, regions, None, None)?;
        Ok(sentences.rows().map(|y| cosine(&pooled.feature, y)).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    Local(LocalAggregatorSpec),
    Global(GlobalAggregatorSpec),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreFunctionConfig {
    pub mode: ScoreMode,
    pub sentence: SentenceAggregatorSpec,
}

impl ScoreFunctionConfig {
    pub fn local(spec: LocalAggregatorSpec, sentence: SentenceAggregatorSpec) -> Self {
        Self {
            mode: ScoreMode::Local(spec),
            sentence,
        }
    }

    pub fn global(spec: GlobalAggregatorSpec, sentence: SentenceAggregatorSpec) -> Self {
        Self {
            mode: ScoreMode::Global(spec),
            sentence,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.mode {
            ScoreMode::Local(s) => s.validate()?,
            ScoreMode::Global(s) => s.validate()?,
        }
        self.sentence.validate()
    }
}

/// Per-sentence image-sentence scores `g_m` under either mode.
pub fn image_sentence_scores(
    config: &ScoreFunctionConfig,
    params: GlobalParams<'_>,
    regions: &FeatureBag,
    sentences: &FeatureBag,
) -> Result<Vec<f64>> {
    let sm = score_matrix(regions, sentences)?;
    match &config.mode {
        ScoreMode::Local(spec) => image_sentence_scores_local(spec, &sm),
        ScoreMode::Global(spec) => image_sentence_scores_global(spec, params, regions, sentences, &sm),
    }
}

pub fn image_document_score(
    config: &ScoreFunctionConfig,
    params: GlobalParams<'_>,
    regions: &FeatureBag,
    sentences: &FeatureBag,
) -> Result<f64> {
    let g = image_sentence_scores(config, params, regions, sentences)?;
    aggregate_sentences(&config.sentence, &g)
}

/// Gradient of one image-document score with respect to its inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreGrad {
    /// Row-major N × D.
    pub regions: Vec<f64>,
    /// Row-major M × D.
    pub sentences: Vec<f64>,
    pub params: GlobalParamGrad,
}

/// Score value together with its gradient (the score's own cotangent is 1).
pub fn image_document_score_with_grad(
    config: &ScoreFunctionConfig,
    params: GlobalParams<'_>,
    regions: &FeatureBag,
    sentences: &FeatureBag,
) -> Result<(f64, ScoreGrad)> {
    check_dim("score feature dim", regions.dim(), sentences.dim())?;
    let d = regions.dim();
    let mut grad = ScoreGrad {
        regions: vec![0.0; regions.len() * d],
        sentences: vec![0.0; sentences.len() * d],
        params: GlobalParamGrad::zeros_like(params),
    };
    let score = match &config.mode {
        ScoreMode::Local(spec) => {
            let sm = score_matrix(regions, sentences)?;
            let columns: Vec<Vec<f64>> = (0..sm.sentences()).map(|m| sm.column(m)).collect();
            let g = columns
                .iter()
                .map(|c| aggregate_local(spec, c))
                .collect::<Result<Vec<_>>>()?;
            let score = aggregate_sentences(&config.sentence, &g)?;
            let dg = aggregate_sentences_backward(&config.sentence, &g, 1.0)?;
            for (m, y) in sentences.rows().enumerate() {
                let dcol = aggregate_local_backward(spec, &columns[m], dg[m])?;
                let dy = &mut grad.sentences[m * d..(m + 1) * d];
                for (n, x) in regions.rows().enumerate() {
                    if dcol[n] != 0.0 {
                        cosine_backward_acc(x, y, dcol[n], &mut grad.regions[n * d..(n + 1) * d], dy);
                    }
                }
            }
            score
        }
        ScoreMode::Global(spec) => {
            let prepared = prepare_regions(spec, params, regions)?;
            let mut acc = PoolAccumulator::new(&prepared, regions.len());
            let score = if spec.is_conditioned() {
                let sm = score_matrix(regions, sentences)?;
                let pooled = sentences
                    .rows()
                    .enumerate()
                    .map(|(m, y)| pool(spec, params, &prepared, regions, Some(y), Some(&sm.column(m))))
                    .collect::<Result<Vec<_>>>()?;
                let g: Vec<f64> = pooled
                    .iter()
                    .zip(sentences.rows())
                    .map(|(p, y)| cosine(&p.feature, y))
                    .collect();
                let score = aggregate_sentences(&config.sentence, &g)?;
                let dg = aggregate_sentences_backward(&config.sentence, &g, 1.0)?;
                let mut df = vec![0.0; d];
                for (m, y) in sentences.rows().enumerate() {
                    df.iter_mut().for_each(|v| *v = 0.0);
                    let dy = &mut grad.sentences[m * d..(m + 1) * d];
                    cosine_backward_acc(&pooled[m].feature, y, dg[m], &mut df, dy);
                    pool_backward(
                        spec,
                        &prepared,
                        regions,
                        Some(y),
                        &pooled[m],
                        &df,
                        &mut acc,
                        &mut grad.regions,
                        Some(dy),
                    );
                }
                score
            } else {
                let pooled = pool(spec, params, &prepared, regions, None, None)?;
                let g: Vec<f64> = sentences.rows().map(|y| cosine(&pooled.feature, y)).collect();
                let score = aggregate_sentences(&config.sentence, &g)?;
                let dg = aggregate_sentences_backward(&config.sentence, &g, 1.0)?;
                let mut df = vec![0.0; d];
                for (m, y) in sentences.rows().enumerate() {
                    let dy = &mut grad.sentences[m * d..(m + 1) * d];
                    cosine_backward_acc(&pooled.feature, y, dg[m], &mut df, dy);
                }
                pool_backward(spec, &prepared, regions, None, &pooled, &df, &mut acc, &mut grad.regions, None);
                score
            };
            finish_pool_backward(spec, params, &prepared, regions, &acc, &mut grad.regions, &mut grad.params);
            score
        }
    };
    Ok((score, grad))
}

/// Contrastive score tuple `(s⁺, s⁻₁, …, s⁻_K)` for one document.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector {
    pub positive: f64,
    pub negatives: Vec<f64>,
}

impl ScoreVector {
    pub fn new(positive: f64, negatives: Vec<f64>) -> Result<Self> {
        if negatives.is_empty() {
            return Err(Error::Empty("contrastive negatives"));
        }
        Ok(Self { positive, negatives })
    }
}

pub fn assemble_contrastive_scores(
    config: &ScoreFunctionConfig,
    params: GlobalParams<'_>,
    document: &FeatureBag,
    matched: &FeatureBag,
    mismatched: &[&FeatureBag],
) -> Result<ScoreVector> {
    if mismatched.is_empty() {
        return Err(Error::Empty("mismatched images"));
    }
    let positive = image_document_score(config, params, matched, document)?;
    let negatives = mismatched
        .iter()
        .map(|img| image_document_score(config, params, img, document))
        .collect::<Result<Vec<_>>>()?;
    ScoreVector::new(positive, negatives)
}
