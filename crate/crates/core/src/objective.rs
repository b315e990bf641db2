//! Text-to-image InfoNCE and the two-term local + global objective.

use serde::{Deserialize, Serialize};

use crate::aggregators::{GlobalAggregatorSpec, GlobalParamGrad, GlobalParams, LocalAggregatorSpec, SentenceAggregatorSpec};
use crate::error::{invalid, Error, Result};
use crate::numeric::{axpy, stable_logsumexp, stable_softmax};
use crate::scoring::{
    assemble_contrastive_scores, image_document_score_with_grad, FeatureBag, ScoreFunctionConfig, ScoreVector,
};

pub const DEFAULT_GAMMA_INIT: f64 = 14.0;

/// Contrastive scale `γ = exp(log_gamma)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Temperature {
    pub log_gamma: f64,
}

impl Temperature {
    pub fn from_gamma(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(invalid(format!("temperature scale must be > 0, got {gamma}")));
        }
        Ok(Self { log_gamma: gamma.ln() })
    }

    pub fn gamma(&self) -> f64 {
        self.log_gamma.exp()
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self {
            log_gamma: DEFAULT_GAMMA_INIT.ln(),
        }
    }
}

fn logits(s: &ScoreVector, gamma: f64) -> Vec<f64> {
    std::iter::once(0.0)
        .chain(s.negatives.iter().map(|&neg| gamma * (neg - s.positive)))
        .collect()
}

/// `log(1 + Σₖ exp(γ(s⁻ₖ - s⁺)))` for an explicit scale `γ ≥ 0`.
pub fn infonce_with_scale(s: &ScoreVector, gamma: f64) -> f64 {
    stable_logsumexp(&logits(s, gamma), 1.0).expect("logits are never empty")
}

pub fn infonce(s: &ScoreVector, temp: &Temperature) -> f64 {
    infonce_with_scale(s, temp.gamma())
}

#[derive(Clone, Debug, PartialEq)]
pub struct InfonceGrad {
    pub positive: f64,
    pub negatives: Vec<f64>,
    pub log_gamma: f64,
}

pub fn infonce_backward(s: &ScoreVector, temp: &Temperature) -> InfonceGrad {
    let gamma = temp.gamma();
    let p = stable_softmax(&logits(s, gamma), 1.0).expect("logits are never empty");
    let negatives: Vec<f64> = p[1..].iter().map(|pk| gamma * pk).collect();
    let positive = -negatives.iter().sum::<f64>();
    let dgamma: f64 = p[1..]
        .iter()
        .zip(&s.negatives)
        .map(|(pk, neg)| pk * (neg - s.positive))
        .sum();
    InfonceGrad {
        positive,
        negatives,
        log_gamma: gamma * dgamma,
    }
}

/// Which loss terms are enabled and with which aggregators.
///
/// Both terms share the sentence aggregator and the temperature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub local: Option<LocalAggregatorSpec>,
    pub global: Option<GlobalAggregatorSpec>,
    pub sentence: SentenceAggregatorSpec,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            local: Some(LocalAggregatorSpec::lse(crate::aggregators::DEFAULT_GAMMA_L)),
            global: Some(GlobalAggregatorSpec::nl(crate::aggregators::DEFAULT_GAMMA_G)),
            sentence: SentenceAggregatorSpec::Avg,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local.is_none() && self.global.is_none() {
            return Err(invalid("at least one of the local and global loss terms must be enabled"));
        }
        if let Some(l) = &self.local {
            l.validate()?;
        }
        if let Some(g) = &self.global {
            g.validate()?;
        }
        self.sentence.validate()
    }

    pub fn local_config(&self) -> Option<ScoreFunctionConfig> {
        self.local.map(|l| ScoreFunctionConfig::local(l, self.sentence))
    }

    pub fn global_config(&self) -> Option<ScoreFunctionConfig> {
        self.global.map(|g| ScoreFunctionConfig::global(g, self.sentence))
    }

    pub fn terms(&self) -> Vec<ScoreFunctionConfig> {
        self.local_config().into_iter().chain(self.global_config()).collect()
    }

    /// Label such as `LSE+NL`, `LSE` or `NL`; global-only average pooling is
    /// `GlobalAvg` to keep it apart from local `Avg`.
    pub fn label(&self) -> String {
        match (&self.local, &self.global) {
            (Some(l), Some(g)) => format!("{}+{}", l.name(), g.name()),
            (Some(l), None) => l.name().to_string(),
            (None, Some(GlobalAggregatorSpec::Avg)) => "GlobalAvg".to_string(),
            (None, Some(g)) => g.name().to_string(),
            (None, None) => "none".to_string(),
        }
    }
}

/// `Σ_terms L(s_term)` for one document against its matched image and the
/// mismatched ones, with a shared temperature.
pub fn combined_loss(
    objective: &ObjectiveConfig,
    params: GlobalParams<'_>,
    document: &FeatureBag,
    matched: &FeatureBag,
    mismatched: &[&FeatureBag],
    temp: &Temperature,
) -> Result<f64> {
    let terms = objective.terms();
    if terms.is_empty() {
        return Err(invalid("at least one of the local and global loss terms must be enabled"));
    }
    let mut loss = 0.0;
    for config in &terms {
        let s = assemble_contrastive_scores(config, params, document, matched, mismatched)?;
        loss += infonce(&s, temp);
    }
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DocumentLossGrad {
    pub loss: f64,
    /// Row-major cotangents for the matched image's regions.
    pub matched: Vec<f64>,
    pub mismatched: Vec<Vec<f64>>,
    pub document: Vec<f64>,
    pub params: GlobalParamGrad,
    pub log_gamma: f64,
}

/// [`combined_loss`] with its gradient with respect to every input feature,
/// the global-aggregator parameters and `log_gamma`.
pub fn combined_loss_with_grad(
    objective: &ObjectiveConfig,
    params: GlobalParams<'_>,
    document: &FeatureBag,
    matched: &FeatureBag,
    mismatched: &[&FeatureBag],
    temp: &Temperature,
) -> Result<DocumentLossGrad> {
    let terms = objective.terms();
    if terms.is_empty() {
        return Err(invalid("at least one of the local and global loss terms must be enabled"));
    }
    if mismatched.is_empty() {
        return Err(Error::Empty("mismatched images"));
    }
    let mut out = DocumentLossGrad {
        loss: 0.0,
        matched: vec![0.0; matched.as_slice().len()],
        mismatched: mismatched.iter().map(|b| vec![0.0; b.as_slice().len()]).collect(),
        document: vec![0.0; document.as_slice().len()],
        params: GlobalParamGrad::zeros_like(params),
        log_gamma: 0.0,
    };
    for config in &terms {
        let (positive, pos_grad) = image_document_score_with_grad(config, params, matched, document)?;
        let mut negatives = Vec::with_capacity(mismatched.len());
        let mut neg_grads = Vec::with_capacity(mismatched.len());
        for img in mismatched {
            let (s, g) = image_document_score_with_grad(config, params, img, document)?;
            negatives.push(s);
            neg_grads.push(g);
        }
        let s = ScoreVector::new(positive, negatives)?;
        out.loss += infonce(&s, temp);
        let dl = infonce_backward(&s, temp);
        out.log_gamma += dl.log_gamma;

        axpy(dl.positive, &pos_grad.regions, &mut out.matched);
        axpy(dl.positive, &pos_grad.sentences, &mut out.document);
        out.params.add_scaled(dl.positive, &pos_grad.params);
        for ((g, &dneg), dimg) in neg_grads.iter().zip(&dl.negatives).zip(out.mismatched.iter_mut()) {
            axpy(dneg, &g.regions, dimg);
            axpy(dneg, &g.sentences, &mut out.document);
            out.params.add_scaled(dneg, &g.params);
        }
    }
    Ok(out)
}
