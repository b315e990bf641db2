//! Finite-difference suite over every differentiable operation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::aggregators::{
    aggregate_global, aggregate_global_backward, aggregate_local, aggregate_local_backward, aggregate_sentences,
    aggregate_sentences_backward, AttentionParams, GlobalAggregatorSpec, GlobalParams, LocalAggregatorSpec,
    SentenceAggregatorSpec,
};
use crate::encoders::{flatten_params, init_model, unflatten_params, ModelDims};
use crate::error::{invalid, Result};
use crate::exec::Execution;
use crate::numeric::{
    cosine_backward, cosine_similarity, finite_difference_check, linear_backward, linear_transform,
    logsumexp_backward, softmax_backward, stable_logsumexp, stable_softmax, DenseMatrix, DenseVector, FnWithGrad,
};
use crate::objective::{infonce, infonce_backward, ObjectiveConfig, Temperature};
use crate::scoring::{FeatureBag, ScoreVector};
use crate::trainer::{batch_loss, batch_loss_with_grad, BatchInputs};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SuiteConfig {
    pub instances: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            instances: 20,
            step: 1e-5,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpCheck {
    pub name: String,
    pub instances: usize,
    pub max_relative_error: f64,
    pub pass: bool,
}

fn normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.gen_range(1..=6), rng.gen_range(1..=3), rng.gen_range(2..=5))
}

struct Runner {
    cfg: SuiteConfig,
    rng: ChaCha8Rng,
    out: Vec<OpCheck>,
}

impl Runner {
    /// Runs `instances` checks of one op; `make` draws a fresh instance and
    /// returns its point together with value and gradient closures.
    fn op<M>(&mut self, name: &str, mut make: M) -> Result<()>
    where
        M: FnMut(&mut ChaCha8Rng) -> Result<(Vec<f64>, Box<dyn Fn(&[f64]) -> f64>, Box<dyn Fn(&[f64]) -> Vec<f64>>)>,
    {
        let mut worst = 0.0_f64;
        for _ in 0..self.cfg.instances {
            let (point, value, grad) = make(&mut self.rng)?;
            let f = FnWithGrad(value, grad);
            let report = finite_difference_check(&f, &point, self.cfg.step, self.cfg.tolerance)?;
            worst = worst.max(report.max_relative_error);
        }
        log::debug!("gradcheck {name}: {worst:.3e}");
        self.out.push(OpCheck {
            name: name.to_string(),
            instances: self.cfg.instances,
            max_relative_error: worst,
            pass: worst < self.cfg.tolerance,
        });
        Ok(())
    }
}

type Boxed = (Vec<f64>, Box<dyn Fn(&[f64]) -> f64>, Box<dyn Fn(&[f64]) -> Vec<f64>>);

fn local_specs() -> Vec<LocalAggregatorSpec> {
    vec![
        LocalAggregatorSpec::Max,
        LocalAggregatorSpec::Sum,
        LocalAggregatorSpec::Avg,
        LocalAggregatorSpec::lse(0.1),
        LocalAggregatorSpec::lse(5.0),
        LocalAggregatorSpec::Nor,
        LocalAggregatorSpec::nand(),
    ]
}

fn sentence_specs() -> Vec<SentenceAggregatorSpec> {
    vec![
        SentenceAggregatorSpec::Avg,
        SentenceAggregatorSpec::Sum,
        SentenceAggregatorSpec::Max,
        SentenceAggregatorSpec::Lse { gamma_s: 2.0 },
        SentenceAggregatorSpec::Id,
    ]
}

fn global_specs() -> Vec<GlobalAggregatorSpec> {
    vec![
        GlobalAggregatorSpec::Avg,
        GlobalAggregatorSpec::Att,
        GlobalAggregatorSpec::nl(crate::aggregators::DEFAULT_GAMMA_G),
        GlobalAggregatorSpec::Ca,
    ]
}

/// Objectives checked end to end through the encoders.
pub fn end_to_end_objectives() -> Vec<ObjectiveConfig> {
    let sentence = SentenceAggregatorSpec::Avg;
    let mut out: Vec<ObjectiveConfig> = local_specs()
        .into_iter()
        .map(|l| ObjectiveConfig {
            local: Some(l),
            global: None,
            sentence,
        })
        .collect();
    for g in global_specs() {
        out.push(ObjectiveConfig {
            local: None,
            global: Some(g),
            sentence,
        });
        out.push(ObjectiveConfig {
            local: Some(LocalAggregatorSpec::lse(0.1)),
            global: Some(g),
            sentence,
        });
    }
    for s in sentence_specs() {
        if s != SentenceAggregatorSpec::Id && s != sentence {
            out.push(ObjectiveConfig { sentence: s, ..ObjectiveConfig::default() });
        }
    }
    out
}

fn global_layout(spec: &GlobalAggregatorSpec, n: usize, d: usize) -> (usize, usize, usize, usize) {
    let regions = n * d;
    let cond = if matches!(spec, GlobalAggregatorSpec::Ca) { d } else { 0 };
    let nl = if matches!(spec, GlobalAggregatorSpec::Nl { .. }) { d * d } else { 0 };
    let att = if matches!(spec, GlobalAggregatorSpec::Att) { d * d + d } else { 0 };
    (regions, cond, nl, att)
}

struct GlobalInputs {
    regions: FeatureBag,
    condition: Option<DenseVector>,
    nl: Option<DenseMatrix>,
    att: Option<AttentionParams>,
}

fn split_global(spec: &GlobalAggregatorSpec, n: usize, d: usize, p: &[f64]) -> GlobalInputs {
    let (r, c, a, t) = global_layout(spec, n, d);
    let regions = FeatureBag::new(d, p[..r].to_vec()).expect("regions");
    let condition = (c > 0).then(|| DenseVector::new(p[r..r + c].to_vec()).expect("condition"));
    let nl = (a > 0).then(|| DenseMatrix::new(d, d, p[r + c..r + c + a].to_vec()).expect("nl"));
    let att = (t > 0).then(|| AttentionParams {
        v: DenseMatrix::new(d, d, p[r + c + a..r + c + a + d * d].to_vec()).expect("att v"),
        w: DenseVector::new(p[r + c + a + d * d..r + c + a + t].to_vec()).expect("att w"),
    });
    GlobalInputs {
        regions,
        condition,
        nl,
        att,
    }
}

/// Runs the whole suite and returns one entry per operation.
pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<OpCheck>> {
    if cfg.instances == 0 {
        return Err(invalid("gradient suite needs at least one instance per op"));
    }
    let mut r = Runner {
        cfg: *cfg,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        out: Vec::new(),
    };

    r.op("cosine", |rng| -> Result<Boxed> {
        let d = rng.gen_range(2..=5);
        let point = normal(rng, 2 * d);
        let value = move |p: &[f64]| {
            cosine_similarity(&DenseVector::new(p[..d].to_vec()).unwrap(), &DenseVector::new(p[d..].to_vec()).unwrap())
                .unwrap()
        };
        let grad = move |p: &[f64]| {
            let (dx, dy) = cosine_backward(
                &DenseVector::new(p[..d].to_vec()).unwrap(),
                &DenseVector::new(p[d..].to_vec()).unwrap(),
                1.0,
            )
            .unwrap();
            dx.into_vec().into_iter().chain(dy.into_vec()).collect()
        };
        Ok((point, Box::new(value), Box::new(grad)))
    })?;

    r.op("logsumexp", |rng| -> Result<Boxed> {
        let n = rng.gen_range(1..=6);
        let gamma = rng.gen_range(0.1..5.0);
        let point = uniform(rng, n, -1.0, 1.0);
        Ok((
            point,
            Box::new(move |p: &[f64]| stable_logsumexp(p, gamma).unwrap()),
            Box::new(move |p: &[f64]| logsumexp_backward(p, gamma).unwrap()),
        ))
    })?;

    r.op("softmax", |rng| -> Result<Boxed> {
        let n = rng.gen_range(1..=6);
        let gamma = rng.gen_range(0.1..5.0);
        let point = uniform(rng, n, -1.0, 1.0);
        let probe = normal(rng, n);
        let probe2 = probe.clone();
        Ok((
            point,
            Box::new(move |p: &[f64]| {
                let w = stable_softmax(p, gamma).unwrap();
                w.iter().zip(&probe).map(|(a, b)| a * b).sum()
            }),
            Box::new(move |p: &[f64]| softmax_backward(&stable_softmax(p, gamma).unwrap(), &probe2, gamma)),
        ))
    })?;

    r.op("linear", |rng| -> Result<Boxed> {
        let rows = rng.gen_range(1..=5);
        let cols = rng.gen_range(1..=5);
        let point = normal(rng, rows * cols + rows + cols);
        let probe = DenseVector::new(normal(rng, rows))?;
        let probe2 = probe.clone();
        let split = move |p: &[f64]| {
            (
                DenseMatrix::new(rows, cols, p[..rows * cols].to_vec()).unwrap(),
                DenseVector::new(p[rows * cols..rows * cols + rows].to_vec()).unwrap(),
                DenseVector::new(p[rows * cols + rows..].to_vec()).unwrap(),
            )
        };
        Ok((
            point,
            Box::new(move |p: &[f64]| {
                let (w, b, x) = split(p);
                let y = linear_transform(&w, Some(&b), &x).unwrap();
                y.as_slice().iter().zip(probe.as_slice()).map(|(a, b)| a * b).sum()
            }),
            Box::new(move |p: &[f64]| {
                let (w, _, x) = split(p);
                let g = linear_backward(&w, &x, &probe2).unwrap();
                g.weight
                    .as_slice()
                    .iter()
                    .chain(g.bias.as_slice())
                    .chain(g.input.as_slice())
                    .copied()
                    .collect()
            }),
        ))
    })?;

    for spec in local_specs() {
        let name = match spec {
            LocalAggregatorSpec::Lse { gamma_l } => format!("local:LSE(gamma_l={gamma_l})"),
            _ => format!("local:{}", spec.name()),
        };
        r.op(&name, move |rng| -> Result<Boxed> {
            let n = rng.gen_range(1..=6);
            let point = uniform(rng, n, -1.0, 1.0);
            Ok((
                point,
                Box::new(move |p: &[f64]| aggregate_local(&spec, p).unwrap()),
                Box::new(move |p: &[f64]| aggregate_local_backward(&spec, p, 1.0).unwrap()),
            ))
        })?;
    }

    for spec in sentence_specs() {
        let name = match spec {
            SentenceAggregatorSpec::Lse { .. } => "sentence:LSE".to_string(),
            _ => format!("sentence:{spec:?}"),
        };
        r.op(&name, move |rng| -> Result<Boxed> {
            let m = if spec == SentenceAggregatorSpec::Id { 1 } else { rng.gen_range(1..=3) };
            let point = uniform(rng, m, -1.0, 1.0);
            Ok((
                point,
                Box::new(move |p: &[f64]| aggregate_sentences(&spec, p).unwrap()),
                Box::new(move |p: &[f64]| aggregate_sentences_backward(&spec, p, 1.0).unwrap()),
            ))
        })?;
    }

    for spec in global_specs() {
        let name = format!("global:{}", spec.name());
        r.op(&name, move |rng| -> Result<Boxed> {
            let (n, _, d) = dims(rng);
            let (a, b, c, t) = global_layout(&spec, n, d);
            let scale = 1.0 / (d as f64).sqrt();
            let mut point = uniform(rng, a + b, -scale, scale);
            if c > 0 {
                let noise = uniform(rng, d * d, -0.3, 0.3);
                let eye = DenseMatrix::identity(d);
                point.extend(eye.as_slice().iter().zip(noise).map(|(e, u)| e + u));
            }
            point.extend(uniform(rng, t, -0.8, 0.8));
            let scores = uniform(rng, n, -1.0, 1.0);
            let scores2 = scores.clone();
            let probe = DenseVector::new(normal(rng, d))?;
            let probe2 = probe.clone();
            Ok((
                point,
                Box::new(move |p: &[f64]| {
                    let g = split_global(&spec, n, d, p);
                    let params = GlobalParams {
                        nl_matrix: g.nl.as_ref(),
                        attention: g.att.as_ref(),
                    };
                    let pooled =
                        aggregate_global(&spec, params, &g.regions, g.condition.as_ref(), Some(&scores)).unwrap();
                    pooled.as_slice().iter().zip(probe.as_slice()).map(|(a, b)| a * b).sum()
                }),
                Box::new(move |p: &[f64]| {
                    let g = split_global(&spec, n, d, p);
                    let params = GlobalParams {
                        nl_matrix: g.nl.as_ref(),
                        attention: g.att.as_ref(),
                    };
                    let grad = aggregate_global_backward(
                        &spec,
                        params,
                        &g.regions,
                        g.condition.as_ref(),
                        Some(&scores2),
                        &probe2,
                    )
                    .unwrap();
                    let mut out = grad.regions;
                    if g.condition.is_some() {
                        out.extend(grad.condition);
                    }
                    out.extend(grad.params.nl_matrix);
                    out.extend(grad.params.att_v);
                    out.extend(grad.params.att_w);
                    out
                }),
            ))
        })?;
    }

    r.op("infonce", |rng| -> Result<Boxed> {
        let k = rng.gen_range(1..=5);
        let mut point = uniform(rng, k + 1, -0.5, 0.5);
        point.push(rng.gen_range(0.0..crate::objective::DEFAULT_GAMMA_INIT.ln()));
        let scores = move |p: &[f64]| {
            (
                ScoreVector::new(p[0], p[1..=k].to_vec()).unwrap(),
                Temperature { log_gamma: p[k + 1] },
            )
        };
        Ok((
            point,
            Box::new(move |p: &[f64]| {
                let (s, t) = scores(p);
                infonce(&s, &t)
            }),
            Box::new(move |p: &[f64]| {
                let (s, t) = scores(p);
                let g = infonce_backward(&s, &t);
                std::iter::once(g.positive)
                    .chain(g.negatives)
                    .chain(std::iter::once(g.log_gamma))
                    .collect()
            }),
        ))
    })?;

    for objective in end_to_end_objectives() {
        let name = format!("loss:{}/{}", objective.label(), sentence_name(&objective.sentence));
        r.op(&name, move |rng| -> Result<Boxed> { end_to_end_instance(rng, objective) })?;
    }

    Ok(r.out)
}

fn sentence_name(spec: &SentenceAggregatorSpec) -> &'static str {
    match spec {
        SentenceAggregatorSpec::Avg => "Avg",
        SentenceAggregatorSpec::Sum => "Sum",
        SentenceAggregatorSpec::Max => "Max",
        SentenceAggregatorSpec::Lse { .. } => "LSE",
        SentenceAggregatorSpec::Id => "Id",
    }
}

/// Mean combined loss of a 3-document batch (two in-batch negatives per
/// document, 3 regions and 2 sentences each) as a function of the full
/// flattened parameter vector at a fresh initialisation.
fn end_to_end_instance(rng: &mut ChaCha8Rng, objective: ObjectiveConfig) -> Result<Boxed> {
    let (b, n, m, input) = (3, 3, 2, 3);
    let model_dims = ModelDims {
        region_input: input,
        sentence_input: input,
        hidden: 4,
        embed: 4,
    };
    let template = init_model(&model_dims, &objective, crate::objective::DEFAULT_GAMMA_INIT, rng.gen())?;
    let point = flatten_params(&template);
    let mut images = Vec::with_capacity(b);
    let mut sentences = Vec::with_capacity(b);
    for _ in 0..b {
        images.push(FeatureBag::new(input, normal(rng, n * input))?);
        sentences.push(FeatureBag::new(input, normal(rng, m * input))?);
    }
    let inputs = BatchInputs {
        ids: (0..b).map(|i| format!("doc{i}")).collect(),
        images,
        sentences,
    };
    let inputs2 = BatchInputs {
        ids: inputs.ids.clone(),
        images: inputs.images.clone(),
        sentences: inputs.sentences.clone(),
    };
    let template2 = template.clone();
    Ok((
        point,
        Box::new(move |p: &[f64]| {
            let model = unflatten_params(&template, p).unwrap();
            batch_loss(&model, &objective, &inputs).unwrap()
        }),
        Box::new(move |p: &[f64]| {
            let model = unflatten_params(&template2, p).unwrap();
            batch_loss_with_grad(&model, &objective, &inputs2, Execution::Sequential)
                .unwrap()
                .gradient
        }),
    ))
}
