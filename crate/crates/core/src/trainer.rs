//! Mini-batch contrastive training with in-batch negatives, AdamW and a
//! warmup + cosine learning-rate schedule.

use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{
    encode_backward, encode_features, flatten_params, init_model, parameter_layout, unflatten_params, ModelDims,
    ModelParams, ParamBlock,
};
use crate::error::{check_dim, invalid, Error, Result};
use crate::exec::Execution;
use crate::objective::{combined_loss, combined_loss_with_grad, ObjectiveConfig, DEFAULT_GAMMA_INIT};
use crate::scoring::FeatureBag;
use crate::synthgen::SyntheticDocument;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub sentences_per_bag: usize,
    pub epochs: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub seed: u64,
    pub objective: ObjectiveConfig,
    pub gamma_init: f64,
    pub hidden_dim: usize,
    pub embed_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            sentences_per_bag: 3,
            epochs: 15,
            peak_lr: 1e-2,
            warmup_steps: 50,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            seed: 0,
            objective: ObjectiveConfig::default(),
            gamma_init: DEFAULT_GAMMA_INIT,
            hidden_dim: 32,
            embed_dim: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(invalid("batch_size must be ≥ 2"));
        }
        if self.sentences_per_bag < 1 {
            return Err(invalid("sentences_per_bag must be ≥ 1"));
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return Err(invalid(format!("peak_lr must be ≥ 0, got {}", self.peak_lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(invalid(format!("weight_decay must be ≥ 0, got {}", self.weight_decay)));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(invalid(format!("betas must lie in [0, 1), got ({b1}, {b2})")));
        }
        if !(self.adam_eps > 0.0 && self.adam_eps.is_finite()) {
            return Err(invalid(format!("adam_eps must be > 0, got {}", self.adam_eps)));
        }
        if !(self.gamma_init > 0.0 && self.gamma_init.is_finite()) {
            return Err(invalid(format!("gamma_init must be > 0, got {}", self.gamma_init)));
        }
        if self.hidden_dim == 0 || self.embed_dim == 0 {
            return Err(invalid("hidden_dim and embed_dim must be ≥ 1"));
        }
        self.objective.validate()
    }

    pub fn steps_per_epoch(&self, train_docs: usize) -> usize {
        train_docs / self.batch_size
    }

    pub fn total_steps(&self, train_docs: usize) -> usize {
        self.epochs * self.steps_per_epoch(train_docs)
    }

    pub fn dims(&self, region_input: usize, sentence_input: usize) -> ModelDims {
        ModelDims {
            region_input,
            sentence_input,
            hidden: self.hidden_dim,
            embed: self.embed_dim,
        }
    }

    pub fn init_model(&self, dims: &ModelDims) -> Result<ModelParams> {
        init_model(dims, &self.objective, self.gamma_init, self.seed)
    }
}

/// Linear warmup to `peak`, then cosine decay to zero at `total`.
pub fn lr_at_step(t: usize, peak: f64, warmup: usize, total: usize) -> Result<f64> {
    if total <= warmup {
        return Err(invalid(format!(
            "total steps ({total}) must exceed warmup steps ({warmup})"
        )));
    }
    if t < warmup {
        return Ok(peak * t as f64 / warmup as f64);
    }
    let progress = ((t - warmup) as f64 / (total - warmup) as f64).min(1.0);
    Ok(peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamWConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            betas: c.betas,
            eps: c.adam_eps,
            weight_decay: c.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One AdamW update in place; `decay[i]` selects which coordinates get
/// decoupled weight decay.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimizerState,
    lr: f64,
    config: &AdamWConfig,
    decay: &[bool],
) -> Result<()> {
    check_dim("adamw gradient", params.len(), grads.len())?;
    check_dim("adamw first moment", params.len(), state.m.len())?;
    check_dim("adamw second moment", params.len(), state.v.len())?;
    check_dim("adamw decay mask", params.len(), decay.len())?;
    state.step += 1;
    let (b1, b2) = config.betas;
    let t = state.step as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        let wd = if decay[i] { config.weight_decay * params[i] } else { 0.0 };
        params[i] -= lr * (m_hat / (v_hat.sqrt() + config.eps) + wd);
    }
    Ok(())
}

/// Per-coordinate weight-decay mask following `layout`.
pub fn decay_mask(layout: &[ParamBlock]) -> Vec<bool> {
    layout.iter().flat_map(|b| std::iter::repeat_n(b.decay, b.len())).collect()
}

/// Documents in one step and, per document, the sentence indices drawn.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub documents: Vec<usize>,
    pub sentences: Vec<Vec<usize>>,
}

/// `batch_size` distinct documents, each with `sentences_per_bag` sentence
/// indices drawn uniformly with replacement. The negatives of document `i`
/// are the other images in the batch.
pub fn sample_batch(
    sentence_counts: &[usize],
    batch_size: usize,
    sentences_per_bag: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    if sentence_counts.len() < batch_size {
        return Err(invalid(format!(
            "training corpus has {} documents, fewer than batch_size {batch_size}",
            sentence_counts.len()
        )));
    }
    let documents = index::sample(rng, sentence_counts.len(), batch_size).into_vec();
    let sentences = documents
        .iter()
        .map(|&d| {
            let count = sentence_counts[d];
            (0..sentences_per_bag).map(|_| rng.gen_range(0..count)).collect()
        })
        .collect();
    Ok(Batch { documents, sentences })
}

/// Raw observations for one training document.
#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub id: String,
    pub regions: FeatureBag,
    pub sentences: FeatureBag,
}

impl TrainingExample {
    pub fn from_document(doc: &SyntheticDocument) -> Result<Self> {
        Ok(Self {
            id: doc.image_id.clone(),
            regions: doc.region_bag()?,
            sentences: doc.sentence_bag()?,
        })
    }

    fn sentence_bag(&self, picks: &[usize]) -> Result<FeatureBag> {
        let rows: Vec<&[f64]> = picks.iter().map(|&i| self.sentences.row(i)).collect();
        FeatureBag::from_rows(&rows)
    }
}

/// Raw images and sampled sentence bags of one batch, in batch order.
#[derive(Clone, Debug)]
pub struct BatchInputs {
    pub ids: Vec<String>,
    pub images: Vec<FeatureBag>,
    pub sentences: Vec<FeatureBag>,
}

pub fn batch_inputs(examples: &[TrainingExample], batch: &Batch) -> Result<BatchInputs> {
    let mut out = BatchInputs {
        ids: Vec::with_capacity(batch.documents.len()),
        images: Vec::with_capacity(batch.documents.len()),
        sentences: Vec::with_capacity(batch.documents.len()),
    };
    for (&d, picks) in batch.documents.iter().zip(&batch.sentences) {
        let ex = &examples[d];
        out.ids.push(ex.id.clone());
        out.images.push(ex.regions.clone());
        out.sentences.push(ex.sentence_bag(picks)?);
    }
    Ok(out)
}

fn encode_all(
    execution: Execution,
    encoder: &crate::encoders::EncoderParams,
    bags: &[FeatureBag],
) -> Result<Vec<(FeatureBag, crate::encoders::EncoderCache)>> {
    execution.map(bags.len(), |i| encode_features(encoder, &bags[i])).into_iter().collect()
}

/// Mean over documents of the combined loss with in-batch negatives.
pub fn batch_loss(model: &ModelParams, objective: &ObjectiveConfig, inputs: &BatchInputs) -> Result<f64> {
    Ok(batch_losses(model, objective, inputs, Execution::Sequential)?.iter().sum::<f64>()
        / inputs.images.len() as f64)
}

fn batch_losses(
    model: &ModelParams,
    objective: &ObjectiveConfig,
    inputs: &BatchInputs,
    execution: Execution,
) -> Result<Vec<f64>> {
    let images: Vec<FeatureBag> = encode_all(execution, &model.region_encoder, &inputs.images)?
        .into_iter()
        .map(|(b, _)| b)
        .collect();
    let docs: Vec<FeatureBag> = encode_all(execution, &model.sentence_encoder, &inputs.sentences)?
        .into_iter()
        .map(|(b, _)| b)
        .collect();
    execution
        .map(images.len(), |i| {
            let negatives: Vec<&FeatureBag> = negatives_of(&images, i);
            combined_loss(objective, model.global_params(), &docs[i], &images[i], &negatives, &model.temperature)
        })
        .into_iter()
        .collect()
}

fn negatives_of(images: &[FeatureBag], i: usize) -> Vec<&FeatureBag> {
    images.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, b)| b).collect()
}

#[derive(Clone, Debug)]
pub struct BatchGradient {
    pub loss: f64,
    pub document_losses: Vec<f64>,
    /// Aligned with [`flatten_params`].
    pub gradient: Vec<f64>,
}

/// [`batch_loss`] and its gradient with respect to the flattened parameters.
///
/// Per-document work may run concurrently; contributions are summed in batch
/// order, so the result does not depend on `execution`.
pub fn batch_loss_with_grad(
    model: &ModelParams,
    objective: &ObjectiveConfig,
    inputs: &BatchInputs,
    execution: Execution,
) -> Result<BatchGradient> {
    let b = inputs.images.len();
    if b < 2 {
        return Err(invalid("a batch needs at least 2 documents"));
    }
    let images = encode_all(execution, &model.region_encoder, &inputs.images)?;
    let docs = encode_all(execution, &model.sentence_encoder, &inputs.sentences)?;
    let encoded: Vec<FeatureBag> = images.iter().map(|(f, _)| f.clone()).collect();
    let per_doc: Vec<_> = execution
        .map(b, |i| {
            let negatives = negatives_of(&encoded, i);
            combined_loss_with_grad(
                objective,
                model.global_params(),
                &docs[i].0,
                &encoded[i],
                &negatives,
                &model.temperature,
            )
        })
        .into_iter()
        .collect::<Result<_>>()?;

    let scale = 1.0 / b as f64;
    let mut dimages: Vec<Vec<f64>> = encoded.iter().map(|f| vec![0.0; f.as_slice().len()]).collect();
    let mut ddocs: Vec<Vec<f64>> = Vec::with_capacity(b);
    let mut dglobal = crate::aggregators::GlobalParamGrad::zeros_like(model.global_params());
    let mut dlog_gamma = 0.0;
    let mut document_losses = Vec::with_capacity(b);
    for (i, g) in per_doc.iter().enumerate() {
        document_losses.push(g.loss);
        crate::numeric::axpy(scale, &g.matched, &mut dimages[i]);
        for (j, dneg) in (0..b).filter(|&j| j != i).zip(&g.mismatched) {
            crate::numeric::axpy(scale, dneg, &mut dimages[j]);
        }
        ddocs.push(g.document.iter().map(|v| v * scale).collect());
        dglobal.add_scaled(scale, &g.params);
        dlog_gamma += scale * g.log_gamma;
    }

    let layout = parameter_layout(model);
    let mut gradient = vec![0.0; layout.iter().map(ParamBlock::len).sum()];
    let block = |prefix: &str| {
        let first = layout.iter().position(|p| p.name == format!("{prefix}.w1")).expect("encoder block");
        layout[first].offset..layout[first + 3].range().end
    };
    let region_range = block("region");
    let sentence_range = block("sentence");
    for (enc, range, raw, cached, cot) in [
        (&model.region_encoder, region_range, &inputs.images, &images, &dimages),
        (&model.sentence_encoder, sentence_range, &inputs.sentences, &docs, &ddocs),
    ] {
        let len = range.len();
        let parts: Vec<Vec<f64>> = execution
            .map(raw.len(), |i| {
                let mut g = vec![0.0; len];
                encode_backward(enc, &raw[i], &cached[i].1, &cot[i], &mut g).map(|_| g)
            })
            .into_iter()
            .collect::<Result<_>>()?;
        let target = &mut gradient[range];
        for p in &parts {
            crate::numeric::axpy(1.0, p, target);
        }
    }
    for blk in &layout {
        let src: &[f64] = match blk.name.as_str() {
            "nl.a" => &dglobal.nl_matrix,
            "att.v" => &dglobal.att_v,
            "att.w" => &dglobal.att_w,
            "log_gamma" => std::slice::from_ref(&dlog_gamma),
            _ => continue,
        };
        gradient[blk.range()].copy_from_slice(src);
    }
    Ok(BatchGradient {
        loss: document_losses.iter().sum::<f64>() * scale,
        document_losses,
        gradient,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    /// Hex-encoded 32-byte ChaCha seed.
    pub seed: String,
    pub stream: u64,
    /// Decimal word position (a u128).
    pub word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let bytes = hex::decode(&self.seed).map_err(|e| Error::Checkpoint(format!("rng seed: {e}")))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
        let word_pos: u128 = self
            .word_pos
            .parse()
            .map_err(|e| Error::Checkpoint(format!("rng word_pos: {e}")))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub config_fingerprint: String,
    pub config: TrainConfig,
    pub dims: ModelDims,
    pub parameter_order: Vec<ParamBlock>,
    pub params: Vec<f64>,
    pub optimizer: OptimizerState,
    pub rng: RngState,
    pub step: usize,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, crate::json::to_string_pretty_sig17(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("corrupt checkpoint: {e}")))?;
        match value.get("version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == u64::from(CHECKPOINT_VERSION) => {}
            Some(v) => {
                return Err(Error::Checkpoint(format!(
                    "unsupported checkpoint version {v} (this build reads version {CHECKPOINT_VERSION})"
                )))
            }
            None => return Err(Error::Checkpoint("missing version field".into())),
        }
        if value.get("rng").is_none_or(serde_json::Value::is_null) {
            return Err(Error::Checkpoint(
                "missing RNG state; refusing to resume with a fresh random stream".into(),
            ));
        }
        let ckpt: Checkpoint =
            serde_json::from_value(value).map_err(|e| Error::Checkpoint(format!("corrupt checkpoint: {e}")))?;
        check_dim("checkpoint parameters", ckpt.parameter_order.iter().map(ParamBlock::len).sum(), ckpt.params.len())
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(ckpt)
    }

    /// Model parameters stored in the checkpoint.
    pub fn model(&self) -> Result<ModelParams> {
        let template = self.config.init_model(&self.dims)?;
        if parameter_layout(&template) != self.parameter_order {
            return Err(Error::Checkpoint(
                "parameter order does not match the configured model".into(),
            ));
        }
        unflatten_params(&template, &self.params)
    }
}

pub struct Trainer {
    config: TrainConfig,
    config_fingerprint: String,
    examples: Vec<TrainingExample>,
    sentence_counts: Vec<usize>,
    model: ModelParams,
    flat: Vec<f64>,
    decay: Vec<bool>,
    optimizer: OptimizerState,
    rng: ChaCha8Rng,
    step: usize,
    total_steps: usize,
    execution: Execution,
}

impl Trainer {
    pub fn new(train_docs: &[SyntheticDocument], config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let examples: Vec<TrainingExample> =
            train_docs.iter().map(TrainingExample::from_document).collect::<Result<_>>()?;
        let first = examples.first().ok_or(Error::Empty("training corpus"))?;
        let dims = config.dims(first.regions.dim(), first.sentences.dim());
        let model = config.init_model(&dims)?;
        let flat = flatten_params(&model);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Self::assemble(config, examples, model, OptimizerState::new(flat.len()), rng, 0)
    }

    pub fn resume(train_docs: &[SyntheticDocument], checkpoint: &Checkpoint) -> Result<Self> {
        let config = &checkpoint.config;
        config.validate()?;
        let examples: Vec<TrainingExample> =
            train_docs.iter().map(TrainingExample::from_document).collect::<Result<_>>()?;
        let model = checkpoint.model()?;
        if let Some(first) = examples.first() {
            if config.dims(first.regions.dim(), first.sentences.dim()) != checkpoint.dims {
                return Err(Error::Checkpoint("corpus dimensions differ from the checkpoint's".into()));
            }
        }
        let rng = checkpoint.rng.restore()?;
        let trainer = Self::assemble(
            config,
            examples,
            model,
            checkpoint.optimizer.clone(),
            rng,
            checkpoint.step,
        )?;
        check_dim("optimizer state", trainer.flat.len(), checkpoint.optimizer.m.len())
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(trainer)
    }

    fn assemble(
        config: &TrainConfig,
        examples: Vec<TrainingExample>,
        model: ModelParams,
        optimizer: OptimizerState,
        rng: ChaCha8Rng,
        step: usize,
    ) -> Result<Self> {
        for ex in &examples {
            check_dim("region observation", model.region_encoder.input_dim(), ex.regions.dim())?;
            check_dim("sentence observation", model.sentence_encoder.input_dim(), ex.sentences.dim())?;
        }
        let total_steps = config.total_steps(examples.len());
        if total_steps > 0 {
            if examples.len() < config.batch_size {
                return Err(invalid(format!(
                    "training corpus has {} documents, fewer than batch_size {}",
                    examples.len(),
                    config.batch_size
                )));
            }
            lr_at_step(0, config.peak_lr, config.warmup_steps, total_steps)?;
        }
        let flat = flatten_params(&model);
        let decay = decay_mask(&parameter_layout(&model));
        Ok(Self {
            config: config.clone(),
            config_fingerprint: crate::json::fingerprint(config)?,
            sentence_counts: examples.iter().map(|e| e.sentences.len()).collect(),
            examples,
            model,
            flat,
            decay,
            optimizer,
            rng,
            step,
            total_steps,
            execution: Execution::default(),
        })
    }

    pub fn with_execution(mut self, execution: Execution) -> Self {
        self.execution = execution;
        self
    }

    /// Overrides the fingerprint recorded in checkpoints.
    pub fn with_fingerprint(mut self, fingerprint: String) -> Self {
        self.config_fingerprint = fingerprint;
        self
    }

    pub fn model(&self) -> &ModelParams {
        &self.model
    }

    pub fn into_model(self) -> ModelParams {
        self.model
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.total_steps
    }

    pub fn examples(&self) -> &[TrainingExample] {
        &self.examples
    }

    /// The batch the next call to [`Trainer::step`] will use.
    pub fn peek_batch(&self) -> Result<Batch> {
        let mut rng = self.rng.clone();
        sample_batch(&self.sentence_counts, self.config.batch_size, self.config.sentences_per_bag, &mut rng)
    }

    pub fn step(&mut self) -> Result<LogEntry> {
        let t = self.step;
        let lr = lr_at_step(t, self.config.peak_lr, self.config.warmup_steps, self.total_steps)?;
        let batch = sample_batch(
            &self.sentence_counts,
            self.config.batch_size,
            self.config.sentences_per_bag,
            &mut self.rng,
        )?;
        let inputs = batch_inputs(&self.examples, &batch)?;
        let grad = batch_loss_with_grad(&self.model, &self.config.objective, &inputs, self.execution)?;
        if !grad.loss.is_finite() || grad.gradient.iter().any(|g| !g.is_finite()) {
            let bad: Vec<String> = inputs
                .ids
                .iter()
                .zip(&grad.document_losses)
                .filter(|(_, l)| !l.is_finite())
                .map(|(id, _)| id.clone())
                .collect();
            return Err(Error::NonFiniteLoss {
                step: t,
                documents: if bad.is_empty() { inputs.ids } else { bad },
            });
        }
        let gamma = self.model.temperature.gamma();
        adamw_step(
            &mut self.flat,
            &grad.gradient,
            &mut self.optimizer,
            lr,
            &AdamWConfig::from(&self.config),
            &self.decay,
        )?;
        self.model = unflatten_params(&self.model, &self.flat)?;
        let new_gamma = self.model.temperature.gamma();
        if !(new_gamma > 0.0 && new_gamma.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step: t,
                documents: inputs.ids,
            });
        }
        self.step += 1;
        Ok(LogEntry {
            step: t,
            lr,
            loss: grad.loss,
            gamma,
        })
    }

    pub fn run_steps(&mut self, n: usize) -> Result<Vec<LogEntry>> {
        let end = self.step.saturating_add(n).min(self.total_steps);
        let mut log = Vec::with_capacity(end.saturating_sub(self.step));
        while self.step < end {
            log.push(self.step()?);
        }
        Ok(log)
    }

    pub fn run(&mut self) -> Result<Vec<LogEntry>> {
        self.run_steps(self.total_steps.saturating_sub(self.step))
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let first = self.examples.first().ok_or(Error::Empty("training corpus"))?;
        Ok(Checkpoint {
            version: CHECKPOINT_VERSION,
            config_fingerprint: self.config_fingerprint.clone(),
            config: self.config.clone(),
            dims: self.config.dims(first.regions.dim(), first.sentences.dim()),
            parameter_order: parameter_layout(&self.model),
            params: self.flat.clone(),
            optimizer: self.optimizer.clone(),
            rng: RngState::capture(&self.rng),
            step: self.step,
        })
    }
}

/// Trains from scratch for `epochs × ⌊|train| / B⌋` steps.
pub fn train(train_docs: &[SyntheticDocument], config: &TrainConfig) -> Result<(ModelParams, Vec<LogEntry>)> {
    let mut trainer = Trainer::new(train_docs, config)?;
    let log = trainer.run()?;
    Ok((trainer.into_model(), log))
}

#[derive(Serialize)]
struct LogRow<'a> {
    step: usize,
    lr: f64,
    loss: f64,
    gamma: f64,
    config_fingerprint: &'a str,
}

/// Writes the training log as CSV with the config fingerprint on every row.
pub fn write_log(path: &Path, log: &[LogEntry], fingerprint: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for e in log {
        w.serialize(LogRow {
            step: e.step,
            lr: e.lr,
            loss: e.loss,
            gamma: e.gamma,
            config_fingerprint: fingerprint,
        })
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<LogEntry>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => invalid(format!("csv: {other:?}")),
    }
}
