//! Permutation-invariant aggregators.
//!
//! Three families:
//! - local aggregators reduce region-sentence scores to one image-sentence score,
//! - global aggregators pool region features into one image feature, optionally
//!   conditioned on a sentence feature,
//! - sentence aggregators reduce image-sentence scores to an image-document score.
//!
//! NOR and NAND work on probabilities: a cosine score `h` maps to
//! `p = (h + 1) / 2` and the pooled probability `q` maps back to `2q - 1`.

use std::f64::consts::E;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::numeric::{
    axpy, dot, first_argmax, logsumexp_backward, outer_acc, softmax_backward, stable_logsumexp, stable_softmax,
    DenseMatrix, DenseVector,
};
use crate::scoring::FeatureBag;

pub const DEFAULT_NAND_SLOPE: f64 = 10.0;
pub const DEFAULT_NAND_OFFSET: f64 = 0.5;
pub const DEFAULT_GAMMA_L: f64 = 0.1;
pub const DEFAULT_GAMMA_G: f64 = E;

fn default_nand_slope() -> f64 {
    DEFAULT_NAND_SLOPE
}

fn default_nand_offset() -> f64 {
    DEFAULT_NAND_OFFSET
}

fn default_gamma_l() -> f64 {
    DEFAULT_GAMMA_L
}

fn default_gamma_g() -> f64 {
    DEFAULT_GAMMA_G
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum LocalAggregatorSpec {
    Max,
    Sum,
    Avg,
    #[serde(rename = "LSE")]
    Lse {
        #[serde(default = "default_gamma_l")]
        gamma_l: f64,
    },
    #[serde(rename = "NOR")]
    Nor,
    #[serde(rename = "NAND")]
    Nand {
        #[serde(rename = "nand_slope", default = "default_nand_slope")]
        slope: f64,
        #[serde(rename = "nand_offset", default = "default_nand_offset")]
        offset: f64,
    },
}

impl LocalAggregatorSpec {
    pub fn lse(gamma_l: f64) -> Self {
        Self::Lse { gamma_l }
    }

    pub fn nand() -> Self {
        Self::Nand {
            slope: DEFAULT_NAND_SLOPE,
            offset: DEFAULT_NAND_OFFSET,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Max => "Max",
            Self::Sum => "Sum",
            Self::Avg => "Avg",
            Self::Lse { .. } => "LSE",
            Self::Nor => "NOR",
            Self::Nand { .. } => "NAND",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Lse { gamma_l } if !(gamma_l > 0.0 && gamma_l.is_finite()) => {
                Err(invalid(format!("gamma_l must be > 0, got {gamma_l}")))
            }
            Self::Nand { slope, offset } => {
                if !(slope > 0.0 && slope.is_finite()) {
                    Err(invalid(format!("nand_slope must be > 0, got {slope}")))
                } else if !(0.0..=1.0).contains(&offset) {
                    Err(invalid(format!("nand_offset must lie in [0, 1], got {offset}")))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum GlobalAggregatorSpec {
    Avg,
    Att,
    #[serde(rename = "NL")]
    Nl {
        #[serde(default = "default_gamma_g")]
        gamma_g: f64,
    },
    #[serde(rename = "CA")]
    Ca,
}

impl GlobalAggregatorSpec {
    pub fn nl(gamma_g: f64) -> Self {
        Self::Nl { gamma_g }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Avg => "Avg",
            Self::Att => "Att",
            Self::Nl { .. } => "NL",
            Self::Ca => "CA",
        }
    }

    /// Whether the pooled feature depends on the sentence it is scored against.
    pub fn is_conditioned(&self) -> bool {
        matches!(self, Self::Nl { .. } | Self::Ca)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Nl { gamma_g } if !(gamma_g >= 0.0 && gamma_g.is_finite()) => {
                Err(invalid(format!("gamma_g must be >= 0, got {gamma_g}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum SentenceAggregatorSpec {
    Avg,
    Sum,
    Max,
    #[serde(rename = "LSE")]
    Lse { gamma_s: f64 },
    Id,
}

impl SentenceAggregatorSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Lse { gamma_s } if !(gamma_s > 0.0 && gamma_s.is_finite()) => {
                Err(invalid(format!("gamma_s must be > 0, got {gamma_s}")))
            }
            _ => Ok(()),
        }
    }
}

/// Attention pooling parameters: `aₙ ∝ exp(wᵀ tanh(V xₙ))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub v: DenseMatrix,
    pub w: DenseVector,
}

/// Learned parameters a global aggregator may read.
#[derive(Clone, Copy, Debug, Default)]
pub struct GlobalParams<'a> {
    pub nl_matrix: Option<&'a DenseMatrix>,
    pub attention: Option<&'a AttentionParams>,
}

/// Cotangents for the learned global-aggregator parameters, flattened row-major.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GlobalParamGrad {
    pub nl_matrix: Vec<f64>,
    pub att_v: Vec<f64>,
    pub att_w: Vec<f64>,
}

impl GlobalParamGrad {
    pub fn zeros_like(params: GlobalParams<'_>) -> Self {
        Self {
            nl_matrix: params.nl_matrix.map_or_else(Vec::new, |a| vec![0.0; a.as_slice().len()]),
            att_v: params.attention.map_or_else(Vec::new, |p| vec![0.0; p.v.as_slice().len()]),
            att_w: params.attention.map_or_else(Vec::new, |p| vec![0.0; p.w.dim()]),
        }
    }

    pub fn add_scaled(&mut self, scale: f64, other: &Self) {
        axpy(scale, &other.nl_matrix, &mut self.nl_matrix);
        axpy(scale, &other.att_v, &mut self.att_v);
        axpy(scale, &other.att_w, &mut self.att_w);
    }
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn aggregate_local(spec: &LocalAggregatorSpec, scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Empty("local aggregator scores"));
    }
    spec.validate()?;
    let n = scores.len() as f64;
    Ok(match *spec {
        LocalAggregatorSpec::Max => scores[first_argmax(scores)],
        LocalAggregatorSpec::Sum => scores.iter().sum(),
        LocalAggregatorSpec::Avg => scores.iter().sum::<f64>() / n,
        LocalAggregatorSpec::Lse { gamma_l } => stable_logsumexp(scores, gamma_l)?,
        LocalAggregatorSpec::Nor => {
            let miss: f64 = scores.iter().map(|h| 1.0 - (h + 1.0) / 2.0).product();
            2.0 * (1.0 - miss) - 1.0
        }
        LocalAggregatorSpec::Nand { slope, offset } => {
            let mean_p = scores.iter().map(|h| (h + 1.0) / 2.0).sum::<f64>() / n;
            let floor = logistic(-slope * offset);
            let q = (logistic(slope * (mean_p - offset)) - floor) / (logistic(slope * (1.0 - offset)) - floor);
            2.0 * q - 1.0
        }
    })
}

/// Cotangent of the scores given `dout`, the cotangent of [`aggregate_local`].
pub fn aggregate_local_backward(spec: &LocalAggregatorSpec, scores: &[f64], dout: f64) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Empty("local aggregator scores"));
    }
    spec.validate()?;
    let n = scores.len();
    Ok(match *spec {
        LocalAggregatorSpec::Max => {
            let mut g = vec![0.0; n];
            g[first_argmax(scores)] = dout;
            g
        }
        LocalAggregatorSpec::Sum => vec![dout; n],
        LocalAggregatorSpec::Avg => vec![dout / n as f64; n],
        LocalAggregatorSpec::Lse { gamma_l } => {
            let mut g = logsumexp_backward(scores, gamma_l)?;
            g.iter_mut().for_each(|w| *w *= dout);
            g
        }
        LocalAggregatorSpec::Nor => {
            // out = 1 - 2 Π(1 - pⱼ) and ∂out/∂hₙ = Π_{j≠n}(1 - pⱼ)
            let miss: Vec<f64> = scores.iter().map(|h| 1.0 - (h + 1.0) / 2.0).collect();
            let mut prefix = vec![1.0; n + 1];
            for i in 0..n {
                prefix[i + 1] = prefix[i] * miss[i];
            }
            let mut suffix = 1.0;
            let mut g = vec![0.0; n];
            for i in (0..n).rev() {
                g[i] = dout * prefix[i] * suffix;
                suffix *= miss[i];
            }
            g
        }
        LocalAggregatorSpec::Nand { slope, offset } => {
            let mean_p = scores.iter().map(|h| (h + 1.0) / 2.0).sum::<f64>() / n as f64;
            let floor = logistic(-slope * offset);
            let range = logistic(slope * (1.0 - offset)) - floor;
            let s = logistic(slope * (mean_p - offset));
            // d(2q - 1)/dhₙ = 2 · σ'(z) · a / range · (1/N) · (1/2)
            let d = dout * s * (1.0 - s) * slope / (range * n as f64);
            vec![d; n]
        }
    })
}

pub fn aggregate_sentences(spec: &SentenceAggregatorSpec, scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Empty("sentence aggregator scores"));
    }
    spec.validate()?;
    Ok(match *spec {
        SentenceAggregatorSpec::Avg => scores.iter().sum::<f64>() / scores.len() as f64,
        SentenceAggregatorSpec::Sum => scores.iter().sum(),
        SentenceAggregatorSpec::Max => scores[first_argmax(scores)],
        SentenceAggregatorSpec::Lse { gamma_s } => stable_logsumexp(scores, gamma_s)?,
        SentenceAggregatorSpec::Id => {
            if scores.len() != 1 {
                return Err(invalid(format!(
                    "Id sentence aggregator needs a single-sentence document, got {} sentences",
                    scores.len()
                )));
            }
            scores[0]
        }
    })
}

pub fn aggregate_sentences_backward(spec: &SentenceAggregatorSpec, scores: &[f64], dout: f64) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Empty("sentence aggregator scores"));
    }
    spec.validate()?;
    let n = scores.len();
    Ok(match *spec {
        SentenceAggregatorSpec::Avg => vec![dout / n as f64; n],
        SentenceAggregatorSpec::Sum => vec![dout; n],
        SentenceAggregatorSpec::Max => {
            let mut g = vec![0.0; n];
            g[first_argmax(scores)] = dout;
            g
        }
        SentenceAggregatorSpec::Lse { gamma_s } => {
            let mut g = logsumexp_backward(scores, gamma_s)?;
            g.iter_mut().for_each(|w| *w *= dout);
            g
        }
        SentenceAggregatorSpec::Id => {
            if n != 1 {
                return Err(invalid("Id sentence aggregator needs a single-sentence document"));
            }
            vec![dout]
        }
    })
}

/// Per-image quantities a global aggregator reuses across sentences.
pub(crate) struct PreparedRegions {
    /// NL: `A xₙ` (N × D'); Att: `tanh(V xₙ)` (N × H); otherwise empty.
    cache: Vec<f64>,
    width: usize,
}

/// Result of pooling for one sentence.
pub(crate) struct Pooled {
    pub feature: Vec<f64>,
    weights: Vec<f64>,
    critical: usize,
}

pub(crate) fn prepare_regions(
    spec: &GlobalAggregatorSpec,
    params: GlobalParams<'_>,
    regions: &FeatureBag,
) -> Result<PreparedRegions> {
    spec.validate()?;
    let dim = regions.dim();
    match spec {
        GlobalAggregatorSpec::Nl { .. } => {
            let a = params
                .nl_matrix
                .ok_or_else(|| invalid("NL aggregator requires the learned matrix A"))?;
            check_dim("NL matrix columns", dim, a.cols())?;
            let width = a.rows();
            let mut cache = vec![0.0; regions.len() * width];
            for (n, x) in regions.rows().enumerate() {
                a.matvec_into(x, &mut cache[n * width..(n + 1) * width]);
            }
            Ok(PreparedRegions { cache, width })
        }
        GlobalAggregatorSpec::Att => {
            let att = params
                .attention
                .ok_or_else(|| invalid("Att aggregator requires attention parameters V, w"))?;
            check_dim("Att matrix columns", dim, att.v.cols())?;
            check_dim("Att vector", att.v.rows(), att.w.dim())?;
            let width = att.v.rows();
            let mut cache = vec![0.0; regions.len() * width];
            for (n, x) in regions.rows().enumerate() {
                let h = &mut cache[n * width..(n + 1) * width];
                att.v.matvec_into(x, h);
                h.iter_mut().for_each(|v| *v = v.tanh());
            }
            Ok(PreparedRegions { cache, width })
        }
        GlobalAggregatorSpec::Avg | GlobalAggregatorSpec::Ca => Ok(PreparedRegions {
            cache: Vec::new(),
            width: 0,
        }),
    }
}

pub(crate) fn pool(
    spec: &GlobalAggregatorSpec,
    params: GlobalParams<'_>,
    prepared: &PreparedRegions,
    regions: &FeatureBag,
    condition: Option<&[f64]>,
    region_scores: Option<&[f64]>,
) -> Result<Pooled> {
    let n = regions.len();
    let mut critical = 0;
    let weights = match *spec {
        GlobalAggregatorSpec::Avg => vec![1.0 / n as f64; n],
        GlobalAggregatorSpec::Nl { gamma_g } => {
            let scores = region_scores.ok_or_else(|| invalid("NL aggregator requires region scores"))?;
            check_dim("NL region scores", n, scores.len())?;
            critical = first_argmax(scores);
            let w = prepared.width;
            let uk = &prepared.cache[critical * w..(critical + 1) * w];
            let logits: Vec<f64> = (0..n).map(|i| dot(&prepared.cache[i * w..(i + 1) * w], uk)).collect();
            stable_softmax(&logits, gamma_g)?
        }
        GlobalAggregatorSpec::Ca => {
            let y = condition.ok_or_else(|| invalid("CA aggregator requires a conditioning sentence feature"))?;
            check_dim("CA condition", regions.dim(), y.len())?;
            let logits: Vec<f64> = regions.rows().map(|x| dot(x, y)).collect();
            stable_softmax(&logits, 1.0)?
        }
        GlobalAggregatorSpec::Att => {
            let att = params
                .attention
                .ok_or_else(|| invalid("Att aggregator requires attention parameters V, w"))?;
            let w = prepared.width;
            let logits: Vec<f64> = (0..n)
                .map(|i| dot(&prepared.cache[i * w..(i + 1) * w], att.w.as_slice()))
                .collect();
            stable_softmax(&logits, 1.0)?
        }
    };
    let mut feature = vec![0.0; regions.dim()];
    for (x, &wn) in regions.rows().zip(&weights) {
        axpy(wn, x, &mut feature);
    }
    Ok(Pooled {
        feature,
        weights,
        critical,
    })
}

/// Scratch accumulated across sentences before the final parameter backward.
pub(crate) struct PoolAccumulator {
    /// Cotangent of the prepared cache (NL: `A xₙ`; Att: logits per region).
    dcache: Vec<f64>,
}

impl PoolAccumulator {
    pub fn new(prepared: &PreparedRegions, n: usize) -> Self {
        Self {
            dcache: vec![0.0; prepared.cache.len().max(n)],
        }
    }
}

/// Backward of [`pool`] for one sentence. Region cotangents that do not pass
/// through the learned parameters go straight into `dregions`; the rest is
/// accumulated and flushed by [`finish_pool_backward`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn pool_backward(
    spec: &GlobalAggregatorSpec,
    prepared: &PreparedRegions,
    regions: &FeatureBag,
    condition: Option<&[f64]>,
    pooled: &Pooled,
    dfeature: &[f64],
    acc: &mut PoolAccumulator,
    dregions: &mut [f64],
    dcondition: Option<&mut [f64]>,
) {
    let n = regions.len();
    let d = regions.dim();
    let mut dweights = Vec::with_capacity(n);
    for (i, x) in regions.rows().enumerate() {
        axpy(pooled.weights[i], dfeature, &mut dregions[i * d..(i + 1) * d]);
        dweights.push(dot(dfeature, x));
    }
    match *spec {
        GlobalAggregatorSpec::Avg => {}
        GlobalAggregatorSpec::Nl { gamma_g } => {
            // logitₙ = ⟨uₙ, u_k⟩ with k frozen
            let dlogits = softmax_backward(&pooled.weights, &dweights, gamma_g);
            let w = prepared.width;
            let k = pooled.critical;
            let mut duk = vec![0.0; w];
            for (i, &dl) in dlogits.iter().enumerate() {
                if dl == 0.0 {
                    continue;
                }
                let ui = &prepared.cache[i * w..(i + 1) * w];
                axpy(dl, ui, &mut duk);
                let uk = &prepared.cache[k * w..(k + 1) * w];
                for (dst, &v) in acc.dcache[i * w..(i + 1) * w].iter_mut().zip(uk) {
                    *dst += dl * v;
                }
            }
            axpy(1.0, &duk, &mut acc.dcache[k * w..(k + 1) * w]);
        }
        GlobalAggregatorSpec::Ca => {
            let dlogits = softmax_backward(&pooled.weights, &dweights, 1.0);
            let y = condition.expect("CA pooled without condition");
            let mut dy = dcondition;
            for (i, x) in regions.rows().enumerate() {
                axpy(dlogits[i], y, &mut dregions[i * d..(i + 1) * d]);
                if let Some(dy) = dy.as_deref_mut() {
                    axpy(dlogits[i], x, dy);
                }
            }
        }
        GlobalAggregatorSpec::Att => {
            let dlogits = softmax_backward(&pooled.weights, &dweights, 1.0);
            axpy(1.0, &dlogits, &mut acc.dcache[..n]);
        }
    }
}

pub(crate) fn finish_pool_backward(
    spec: &GlobalAggregatorSpec,
    params: GlobalParams<'_>,
    prepared: &PreparedRegions,
    regions: &FeatureBag,
    acc: &PoolAccumulator,
    dregions: &mut [f64],
    dparams: &mut GlobalParamGrad,
) {
    let d = regions.dim();
    match spec {
        GlobalAggregatorSpec::Nl { .. } => {
            let a = params.nl_matrix.expect("prepared NL without A");
            let w = prepared.width;
            for (i, x) in regions.rows().enumerate() {
                let du = &acc.dcache[i * w..(i + 1) * w];
                outer_acc(&mut dparams.nl_matrix, du, x);
                a.transpose_matvec_acc(du, &mut dregions[i * d..(i + 1) * d]);
            }
        }
        GlobalAggregatorSpec::Att => {
            let att = params.attention.expect("prepared Att without parameters");
            let w = prepared.width;
            let mut dz = vec![0.0; w];
            for (i, x) in regions.rows().enumerate() {
                let dl = acc.dcache[i];
                if dl == 0.0 {
                    continue;
                }
                let t = &prepared.cache[i * w..(i + 1) * w];
                axpy(dl, t, &mut dparams.att_w);
                for ((z, &tv), &wv) in dz.iter_mut().zip(t).zip(att.w.as_slice()) {
                    *z = dl * wv * (1.0 - tv * tv);
                }
                outer_acc(&mut dparams.att_v, &dz, x);
                att.v.transpose_matvec_acc(&dz, &mut dregions[i * d..(i + 1) * d]);
            }
        }
        GlobalAggregatorSpec::Avg | GlobalAggregatorSpec::Ca => {}
    }
}

/// Pools a region bag into one feature.
///
/// `condition` is the sentence feature (required by CA) and `region_scores`
/// the region-sentence similarities used to locate the critical region
/// (required by NL).
pub fn aggregate_global(
    spec: &GlobalAggregatorSpec,
    params: GlobalParams<'_>,
    regions: &FeatureBag,
    condition: Option<&DenseVector>,
    region_scores: Option<&[f64]>,
) -> Result<DenseVector> {
    let prepared = prepare_regions(spec, params, regions)?;
    let pooled = pool(
        spec,
        params,
        &prepared,
        regions,
        condition.map(DenseVector::as_slice),
        region_scores,
    )?;
    DenseVector::new(pooled.feature)
}

/// Attention weights over regions used by [`aggregate_global`].
pub fn global_weights(
    spec: &GlobalAggregatorSpec,
    params: GlobalParams<'_>,
    regions: &FeatureBag,
    condition: Option<&DenseVector>,
    region_scores: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let prepared = prepare_regions(spec, params, regions)?;
    let pooled = pool(
        spec,
        params,
        &prepared,
        regions,
        condition.map(DenseVector::as_slice),
        region_scores,
    )?;
    Ok(pooled.weights)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalGrad {
    /// Row-major N × D.
    pub regions: Vec<f64>,
    /// Zero unless the aggregator reads the condition (CA).
    pub condition: Vec<f64>,
    pub params: GlobalParamGrad,
}

/// Backward of [`aggregate_global`]; the NL critical-region index is held fixed.
pub fn aggregate_global_backward(
    spec: &GlobalAggregatorSpec,
    params: GlobalParams<'_>,
    regions: &FeatureBag,
    condition: Option<&DenseVector>,
    region_scores: Option<&[f64]>,
    dout: &DenseVector,
) -> Result<GlobalGrad> {
    check_dim("global aggregator cotangent", regions.dim(), dout.dim())?;
    let prepared = prepare_regions(spec, params, regions)?;
    let cond = condition.map(DenseVector::as_slice);
    let pooled = pool(spec, params, &prepared, regions, cond, region_scores)?;
    let mut acc = PoolAccumulator::new(&prepared, regions.len());
    let mut dregions = vec![0.0; regions.len() * regions.dim()];
    let mut dcondition = vec![0.0; regions.dim()];
    let mut dparams = GlobalParamGrad::zeros_like(params);
    pool_backward(
        spec,
        &prepared,
        regions,
        cond,
        &pooled,
        dout.as_slice(),
        &mut acc,
        &mut dregions,
        Some(&mut dcondition),
    );
    finish_pool_backward(spec, params, &prepared, regions, &acc, &mut dregions, &mut dparams);
    Ok(GlobalGrad {
        regions: dregions,
        condition: dcondition,
        params: dparams,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn bag(rows: &[Vec<f64>]) -> FeatureBag {
        FeatureBag::from_rows(rows).unwrap()
    }

    #[test]
    fn local_examples() {
        assert_eq!(aggregate_local(&LocalAggregatorSpec::Max, &[0.2, 0.9, -0.5]).unwrap(), 0.9);
        assert_eq!(aggregate_local(&LocalAggregatorSpec::Nor, &[0.0, 0.0]).unwrap(), 0.5);
        let lse = aggregate_local(&LocalAggregatorSpec::lse(0.1), &[1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(lse, 7.443966600735709, epsilon = 1e-12);
    }

    #[test]
    fn local_rejects_empty_and_bad_params() {
        assert!(matches!(aggregate_local(&LocalAggregatorSpec::Avg, &[]), Err(Error::Empty(_))));
        assert!(aggregate_local(&LocalAggregatorSpec::lse(0.0), &[1.0]).is_err());
        let bad = LocalAggregatorSpec::Nand { slope: 1.0, offset: 1.5 };
        assert!(aggregate_local(&bad, &[0.1]).is_err());
    }

    #[test]
    fn nor_extremes_are_exact() {
        assert_eq!(aggregate_local(&LocalAggregatorSpec::Nor, &[-1.0, -1.0, -1.0]).unwrap(), -1.0);
        assert_eq!(aggregate_local(&LocalAggregatorSpec::Nor, &[-0.3, 1.0, 0.2]).unwrap(), 1.0);
    }

    #[test]
    fn nand_maps_extremes_to_extremes() {
        let spec = LocalAggregatorSpec::nand();
        assert_abs_diff_eq!(aggregate_local(&spec, &[-1.0, -1.0]).unwrap(), -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(aggregate_local(&spec, &[1.0, 1.0]).unwrap(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn sentence_examples() {
        assert_abs_diff_eq!(
            aggregate_sentences(&SentenceAggregatorSpec::Avg, &[0.2, 0.4, 0.6]).unwrap(),
            0.4,
            epsilon = 1e-15
        );
        assert_eq!(aggregate_sentences(&SentenceAggregatorSpec::Id, &[0.37]).unwrap(), 0.37);
        let lse = aggregate_sentences(&SentenceAggregatorSpec::Lse { gamma_s: 2.0 }, &[0.0, 0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(lse, 3f64.ln() / 2.0, epsilon = 1e-15);
        assert!(aggregate_sentences(&SentenceAggregatorSpec::Id, &[0.1, 0.2]).is_err());
    }

    #[test]
    fn global_avg_is_mean() {
        let regions = bag(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let out = aggregate_global(&GlobalAggregatorSpec::Avg, GlobalParams::default(), &regions, None, None).unwrap();
        assert_eq!(out.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn nl_singleton_returns_region() {
        let a = DenseMatrix::from_rows(&[vec![0.3, -2.0], vec![1.5, 0.7]]).unwrap();
        let params = GlobalParams {
            nl_matrix: Some(&a),
            attention: None,
        };
        let regions = bag(&[vec![0.25, -0.75]]);
        let out = aggregate_global(&GlobalAggregatorSpec::nl(5.0), params, &regions, None, Some(&[0.4])).unwrap();
        assert_eq!(out.as_slice(), &[0.25, -0.75]);
    }

    #[test]
    fn nl_zero_scale_matches_avg_exactly() {
        let a = DenseMatrix::from_rows(&[vec![0.3, -2.0], vec![1.5, 0.7]]).unwrap();
        let params = GlobalParams {
            nl_matrix: Some(&a),
            attention: None,
        };
        let regions = bag(&[vec![0.1, 0.2], vec![-0.4, 0.9], vec![1.3, -0.2]]);
        let nl = aggregate_global(&GlobalAggregatorSpec::nl(0.0), params, &regions, None, Some(&[0.1, 0.5, 0.2])).unwrap();
        let avg = aggregate_global(&GlobalAggregatorSpec::Avg, params, &regions, None, None).unwrap();
        assert_eq!(nl, avg);
    }

    #[test]
    fn nl_critical_region_gets_largest_weight_with_identity() {
        let a = DenseMatrix::identity(3);
        let params = GlobalParams {
            nl_matrix: Some(&a),
            attention: None,
        };
        let s = 1.0 / 3f64.sqrt();
        let regions = bag(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![s, s, s], vec![0.0, 0.0, 1.0]]);
        let w = global_weights(&GlobalAggregatorSpec::nl(DEFAULT_GAMMA_G), params, &regions, None, Some(&[0.1, 0.8, 0.3, 0.2]))
            .unwrap();
        assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(w.iter().enumerate().all(|(i, &x)| i == 1 || x < w[1]));
    }

    #[test]
    fn global_errors() {
        let regions = bag(&[vec![1.0, 0.0]]);
        let a = DenseMatrix::identity(2);
        let params = GlobalParams {
            nl_matrix: Some(&a),
            attention: None,
        };
        assert!(aggregate_global(&GlobalAggregatorSpec::nl(1.0), params, &regions, None, None).is_err());
        assert!(aggregate_global(&GlobalAggregatorSpec::nl(1.0), GlobalParams::default(), &regions, None, Some(&[0.0])).is_err());
        assert!(aggregate_global(&GlobalAggregatorSpec::Ca, params, &regions, None, None).is_err());
        assert!(aggregate_global(&GlobalAggregatorSpec::Att, params, &regions, None, None).is_err());
    }

    #[test]
    fn spec_serialization_uses_kind_tags() {
        let json = serde_json::to_string(&LocalAggregatorSpec::lse(0.1)).unwrap();
        assert_eq!(json, r#"{"kind":"LSE","gamma_l":0.1}"#);
        let nand: LocalAggregatorSpec = serde_json::from_str(r#"{"kind":"NAND"}"#).unwrap();
        assert_eq!(nand, LocalAggregatorSpec::nand());
        let nl: GlobalAggregatorSpec = serde_json::from_str(r#"{"kind":"NL"}"#).unwrap();
        assert_eq!(nl, GlobalAggregatorSpec::nl(E));
        assert!(serde_json::from_str::<LocalAggregatorSpec>(r#"{"kind":"Id"}"#).is_err());
        assert!(serde_json::from_str::<LocalAggregatorSpec>(r#"{"kind":"LSE","gamma":1}"#).is_err());
    }
}
