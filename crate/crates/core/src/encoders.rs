//! Two-layer tanh encoders for regions and sentences, and the container of
//! every trainable parameter.
//!
//! Flattened parameter order: region encoder (`W1`, `b1`, `W2`, `b2`),
//! sentence encoder (same order), NL matrix `A`, attention `V` then `w`,
//! and finally `log_gamma`. Matrices are row-major. Blocks for aggregators
//! that are not enabled are absent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregators::{AttentionParams, GlobalAggregatorSpec, GlobalParams};
use crate::error::{check_dim, invalid, Result};
use crate::numeric::{outer_acc, DenseMatrix, DenseVector};
use crate::objective::{ObjectiveConfig, Temperature};
use crate::scoring::FeatureBag;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub w1: DenseMatrix,
    pub b1: DenseVector,
    pub w2: DenseMatrix,
    pub b2: DenseVector,
}

impl EncoderParams {
    pub fn new(w1: DenseMatrix, b1: DenseVector, w2: DenseMatrix, b2: DenseVector) -> Result<Self> {
        check_dim("encoder b1", w1.rows(), b1.dim())?;
        check_dim("encoder W2 columns", w1.rows(), w2.cols())?;
        check_dim("encoder b2", w2.rows(), b2.dim())?;
        Ok(Self { w1, b1, w2, b2 })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.rows()
    }

    pub fn parameter_count(&self) -> usize {
        encoder_count(self.input_dim(), self.hidden_dim(), self.output_dim())
    }

    fn init(input: usize, hidden: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w1: xavier(hidden, input, rng),
            b1: DenseVector::zeros(hidden),
            w2: xavier(output, hidden, rng),
            b2: DenseVector::zeros(output),
        }
    }
}

fn encoder_count(input: usize, hidden: usize, output: usize) -> usize {
    hidden * input + hidden + output * hidden + output
}

/// Hidden activations kept for the backward pass, row-major `len × H`.
#[derive(Clone, Debug)]
pub struct EncoderCache {
    hidden: Vec<f64>,
}

/// Encodes every row of `observations`; the cache feeds [`encode_backward`].
pub fn encode_features(params: &EncoderParams, observations: &FeatureBag) -> Result<(FeatureBag, EncoderCache)> {
    check_dim("encoder input", params.input_dim(), observations.dim())?;
    let h = params.hidden_dim();
    let d = params.output_dim();
    let n = observations.len();
    let mut hidden = vec![0.0; n * h];
    let mut out = vec![0.0; n * d];
    for (i, v) in observations.rows().enumerate() {
        let hid = &mut hidden[i * h..(i + 1) * h];
        params.w1.matvec_into(v, hid);
        for (z, b) in hid.iter_mut().zip(params.b1.as_slice()) {
            *z = (*z + b).tanh();
        }
        let o = &mut out[i * d..(i + 1) * d];
        params.w2.matvec_into(hid, o);
        for (z, b) in o.iter_mut().zip(params.b2.as_slice()) {
            *z += b;
        }
    }
    Ok((FeatureBag::new(d, out)?, EncoderCache { hidden }))
}

/// `W2 tanh(W1 v + b1) + b2` for each observation, in input order.
pub fn encode_bag(params: &EncoderParams, observations: &[DenseVector]) -> Result<FeatureBag> {
    let bag = FeatureBag::from_vectors(observations)?;
    Ok(encode_features(params, &bag)?.0)
}

/// Accumulates parameter cotangents into `grad` (laid out as the encoder's
/// flattened block) for output cotangents `dout` (row-major `len × D`).
pub fn encode_backward(
    params: &EncoderParams,
    observations: &FeatureBag,
    cache: &EncoderCache,
    dout: &[f64],
    grad: &mut [f64],
) -> Result<()> {
    let (din, h, d) = (params.input_dim(), params.hidden_dim(), params.output_dim());
    check_dim("encoder cotangent", observations.len() * d, dout.len())?;
    check_dim("encoder gradient block", params.parameter_count(), grad.len())?;
    let (gw1, rest) = grad.split_at_mut(h * din);
    let (gb1, rest) = rest.split_at_mut(h);
    let (gw2, gb2) = rest.split_at_mut(d * h);
    let mut dhid = vec![0.0; h];
    for (i, v) in observations.rows().enumerate() {
        let g = &dout[i * d..(i + 1) * d];
        if g.iter().all(|&x| x == 0.0) {
            continue;
        }
        let hid = &cache.hidden[i * h..(i + 1) * h];
        outer_acc(gw2, g, hid);
        for (a, b) in gb2.iter_mut().zip(g) {
            *a += b;
        }
        dhid.iter_mut().for_each(|x| *x = 0.0);
        params.w2.transpose_matvec_acc(g, &mut dhid);
        for (dz, t) in dhid.iter_mut().zip(hid) {
            *dz *= 1.0 - t * t;
        }
        outer_acc(gw1, &dhid, v);
        for (a, b) in gb1.iter_mut().zip(&dhid) {
            *a += b;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub region_input: usize,
    pub sentence_input: usize,
    pub hidden: usize,
    pub embed: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("region_input", self.region_input),
            ("sentence_input", self.sentence_input),
            ("hidden", self.hidden),
            ("embed", self.embed),
        ] {
            if v == 0 {
                return Err(invalid(format!("{name} dimension must be ≥ 1")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub region_encoder: EncoderParams,
    pub sentence_encoder: EncoderParams,
    pub nl_matrix: Option<DenseMatrix>,
    pub attention: Option<AttentionParams>,
    pub temperature: Temperature,
}

impl ModelParams {
    pub fn global_params(&self) -> GlobalParams<'_> {
        GlobalParams {
            nl_matrix: self.nl_matrix.as_ref(),
            attention: self.attention.as_ref(),
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            region_input: self.region_encoder.input_dim(),
            sentence_input: self.sentence_encoder.input_dim(),
            hidden: self.region_encoder.hidden_dim(),
            embed: self.region_encoder.output_dim(),
        }
    }

    pub fn encode_regions(&self, observations: &FeatureBag) -> Result<FeatureBag> {
        Ok(encode_features(&self.region_encoder, observations)?.0)
    }

    pub fn encode_sentences(&self, observations: &FeatureBag) -> Result<FeatureBag> {
        Ok(encode_features(&self.sentence_encoder, observations)?.0)
    }
}

fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    let r = xavier_range(cols, rows);
    let values = (0..rows * cols).map(|_| rng.gen_range(-r..=r)).collect();
    DenseMatrix::new(rows, cols, values).expect("positive shape")
}

/// `√(6 / (fan_in + fan_out))`.
pub fn xavier_range(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub const NL_INIT_NOISE: f64 = 0.01;

/// Fresh parameters for `objective`; deterministic per seed.
pub fn init_model(dims: &ModelDims, objective: &ObjectiveConfig, gamma_init: f64, seed: u64) -> Result<ModelParams> {
    dims.validate()?;
    let temperature = Temperature::from_gamma(gamma_init)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let region_encoder = EncoderParams::init(dims.region_input, dims.hidden, dims.embed, &mut rng);
    let sentence_encoder = EncoderParams::init(dims.sentence_input, dims.hidden, dims.embed, &mut rng);
    let d = dims.embed;
    let nl_matrix = matches!(objective.global, Some(GlobalAggregatorSpec::Nl { .. })).then(|| {
        let mut a = DenseMatrix::identity(d);
        for v in a.as_mut_slice() {
            *v += NL_INIT_NOISE * rng.gen_range(-1.0..=1.0);
        }
        a
    });
    let attention = matches!(objective.global, Some(GlobalAggregatorSpec::Att)).then(|| {
        let v = xavier(d, d, &mut rng);
        let r = xavier_range(d, 1);
        let w = DenseVector::new((0..d).map(|_| rng.gen_range(-r..=r)).collect()).expect("d ≥ 1");
        AttentionParams { v, w }
    });
    Ok(ModelParams {
        region_encoder,
        sentence_encoder,
        nl_matrix,
        attention,
        temperature,
    })
}

/// One contiguous block of the flattened parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    /// Whether weight decay applies.
    pub decay: bool,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

pub fn parameter_layout(params: &ModelParams) -> Vec<ParamBlock> {
    let mut blocks = Vec::new();
    let mut offset = 0;
    let mut push = |name: &str, shape: Vec<usize>, decay: bool| {
        let block = ParamBlock {
            name: name.to_string(),
            shape,
            offset,
            decay,
        };
        offset += block.len();
        blocks.push(block);
    };
    for (prefix, enc) in [("region", &params.region_encoder), ("sentence", &params.sentence_encoder)] {
        let (i, h, d) = (enc.input_dim(), enc.hidden_dim(), enc.output_dim());
        push(&format!("{prefix}.w1"), vec![h, i], true);
        push(&format!("{prefix}.b1"), vec![h], false);
        push(&format!("{prefix}.w2"), vec![d, h], true);
        push(&format!("{prefix}.b2"), vec![d], false);
    }
    if let Some(a) = &params.nl_matrix {
        push("nl.a", vec![a.rows(), a.cols()], true);
    }
    if let Some(att) = &params.attention {
        push("att.v", vec![att.v.rows(), att.v.cols()], true);
        push("att.w", vec![att.w.dim()], true);
    }
    push("log_gamma", vec![1], false);
    blocks
}

pub fn parameter_count(params: &ModelParams) -> usize {
    parameter_layout(params).iter().map(ParamBlock::len).sum()
}

fn parts(params: &ModelParams) -> Vec<&[f64]> {
    let mut out: Vec<&[f64]> = Vec::new();
    for enc in [&params.region_encoder, &params.sentence_encoder] {
        out.extend([enc.w1.as_slice(), enc.b1.as_slice(), enc.w2.as_slice(), enc.b2.as_slice()]);
    }
    if let Some(a) = &params.nl_matrix {
        out.push(a.as_slice());
    }
    if let Some(att) = &params.attention {
        out.extend([att.v.as_slice(), att.w.as_slice()]);
    }
    out.push(std::slice::from_ref(&params.temperature.log_gamma));
    out
}

fn parts_mut(params: &mut ModelParams) -> Vec<&mut [f64]> {
    let mut out: Vec<&mut [f64]> = Vec::new();
    for enc in [&mut params.region_encoder, &mut params.sentence_encoder] {
        out.push(enc.w1.as_mut_slice());
        out.push(enc.b1.as_mut_slice());
        out.push(enc.w2.as_mut_slice());
        out.push(enc.b2.as_mut_slice());
    }
    if let Some(a) = &mut params.nl_matrix {
        out.push(a.as_mut_slice());
    }
    if let Some(att) = &mut params.attention {
        out.push(att.v.as_mut_slice());
        out.push(att.w.as_mut_slice());
    }
    out.push(std::slice::from_mut(&mut params.temperature.log_gamma));
    out
}

pub fn flatten_params(params: &ModelParams) -> Vec<f64> {
    parts(params).concat()
}

/// Inverse of [`flatten_params`] using `template` for shapes.
pub fn unflatten_params(template: &ModelParams, values: &[f64]) -> Result<ModelParams> {
    check_dim("flattened parameters", parameter_count(template), values.len())?;
    let mut out = template.clone();
    let mut offset = 0;
    for part in parts_mut(&mut out) {
        let n = part.len();
        part.copy_from_slice(&values[offset..offset + n]);
        offset += n;
    }
    Ok(out)
}

/// Analytic parameter count for `dims` under `objective`.
pub fn expected_parameter_count(dims: &ModelDims, objective: &ObjectiveConfig) -> usize {
    let d = dims.embed;
    let global = match objective.global {
        Some(GlobalAggregatorSpec::Nl { .. }) => d * d,
        Some(GlobalAggregatorSpec::Att) => d * d + d,
        _ => 0,
    };
    encoder_count(dims.region_input, dims.hidden, d) + encoder_count(dims.sentence_input, dims.hidden, d) + global + 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregators::{LocalAggregatorSpec, SentenceAggregatorSpec};
    use approx::assert_abs_diff_eq;

    fn dims() -> ModelDims {
        ModelDims {
            region_input: 3,
            sentence_input: 2,
            hidden: 4,
            embed: 4,
        }
    }

    #[test]
    fn constant_encoder_outputs_bias() {
        let c = vec![0.5, -1.5];
        let p = EncoderParams::new(
            DenseMatrix::zeros(3, 2),
            DenseVector::zeros(3),
            DenseMatrix::zeros(2, 3),
            DenseVector::new(c.clone()).unwrap(),
        )
        .unwrap();
        let obs = vec![DenseVector::new(vec![1.0, 2.0]).unwrap(), DenseVector::new(vec![-3.0, 0.1]).unwrap()];
        let bag = encode_bag(&p, &obs).unwrap();
        for row in bag.rows() {
            assert_eq!(row, c.as_slice());
        }
    }

    #[test]
    fn identity_encoder_keeps_origin() {
        let p = EncoderParams::new(
            DenseMatrix::identity(2),
            DenseVector::zeros(2),
            DenseMatrix::identity(2),
            DenseVector::zeros(2),
        )
        .unwrap();
        let bag = encode_bag(&p, &[DenseVector::new(vec![0.0, 0.0]).unwrap()]).unwrap();
        assert_eq!(bag.row(0), &[0.0, 0.0]);
    }

    #[test]
    fn forward_matches_hand_rolled() {
        let m = init_model(&dims(), &ObjectiveConfig::default(), 14.0, 3).unwrap();
        let enc = &m.region_encoder;
        let v = [0.3, -1.2, 0.7];
        let got = encode_bag(enc, &[DenseVector::new(v.to_vec()).unwrap()]).unwrap();
        for o in 0..4 {
            let mut acc = enc.b2.as_slice()[o];
            for j in 0..4 {
                let mut z = enc.b1.as_slice()[j];
                for (k, vk) in v.iter().enumerate() {
                    z += enc.w1.get(j, k) * vk;
                }
                acc += enc.w2.get(o, j) * z.tanh();
            }
            assert_abs_diff_eq!(got.row(0)[o], acc, epsilon = 1e-12);
        }
    }

    #[test]
    fn init_is_deterministic_and_gamma_is_14() {
        let a = init_model(&dims(), &ObjectiveConfig::default(), 14.0, 7).unwrap();
        let b = init_model(&dims(), &ObjectiveConfig::default(), 14.0, 7).unwrap();
        assert_eq!(flatten_params(&a), flatten_params(&b));
        assert_abs_diff_eq!(a.temperature.gamma(), 14.0, epsilon = 1e-12);
        assert_abs_diff_eq!(xavier_range(4, 4), 0.8660254037844386, epsilon = 1e-15);
        let r = xavier_range(3, 4);
        assert!(a.region_encoder.w1.as_slice().iter().all(|w| w.abs() <= r));
        assert!(a.region_encoder.b1.as_slice().iter().all(|&b| b == 0.0));
        let nl = a.nl_matrix.as_ref().unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((nl.get(i, j) - target).abs() <= NL_INIT_NOISE);
            }
        }
    }

    #[test]
    fn flatten_round_trip_and_count() {
        for objective in [
            ObjectiveConfig::default(),
            ObjectiveConfig {
                local: None,
                global: Some(GlobalAggregatorSpec::Att),
                sentence: SentenceAggregatorSpec::Avg,
            },
            ObjectiveConfig {
                local: Some(LocalAggregatorSpec::Max),
                global: None,
                sentence: SentenceAggregatorSpec::Avg,
            },
        ] {
            let m = init_model(&dims(), &objective, 14.0, 1).unwrap();
            let flat = flatten_params(&m);
            assert_eq!(flat.len(), expected_parameter_count(&dims(), &objective));
            assert_eq!(flat.len(), parameter_count(&m));
            let back = unflatten_params(&m, &flat).unwrap();
            assert_eq!(back, m);
            assert!(unflatten_params(&m, &flat[1..]).is_err());
        }
        // 3·4+4+4·4+4 + 2·4+4+4·4+4 + 16 + 1
        assert_eq!(expected_parameter_count(&dims(), &ObjectiveConfig::default()), 36 + 32 + 16 + 1);
    }

    #[test]
    fn perturbing_one_coordinate_changes_one_field() {
        let m = init_model(&dims(), &ObjectiveConfig::default(), 14.0, 2).unwrap();
        let flat = flatten_params(&m);
        let layout = parameter_layout(&m);
        for i in [0, 13, 40, flat.len() - 1] {
            let mut f = flat.clone();
            f[i] += 1.0;
            let p = unflatten_params(&m, &f).unwrap();
            let diff: Vec<usize> = flatten_params(&p)
                .iter()
                .zip(&flat)
                .enumerate()
                .filter(|(_, (a, b))| a != b)
                .map(|(j, _)| j)
                .collect();
            assert_eq!(diff, vec![i]);
            let owners = layout.iter().filter(|b| b.range().contains(&i)).count();
            assert_eq!(owners, 1);
        }
        assert_eq!(layout.last().unwrap().name, "log_gamma");
    }

    #[test]
    fn encode_commutes_with_permutation() {
        let m = init_model(&dims(), &ObjectiveConfig::default(), 14.0, 5).unwrap();
        let obs = FeatureBag::from_rows(&[[0.1, 0.2, 0.3], [-1.0, 0.5, 2.0], [0.0, 0.0, 1.0]]).unwrap();
        let order = [2, 0, 1];
        let a = m.encode_regions(&obs.permuted(&order).unwrap()).unwrap();
        let b = m.encode_regions(&obs).unwrap().permuted(&order).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn backward_matches_finite_difference() {
        use crate::numeric::{finite_difference_check, FnWithGrad};
        let m = init_model(&dims(), &ObjectiveConfig::default(), 14.0, 9).unwrap();
        let obs = FeatureBag::from_rows(&[[0.4, -0.2, 0.9], [1.0, 0.3, -0.5]]).unwrap();
        let weights: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        let flat: Vec<f64> = {
            let e = &m.region_encoder;
            [e.w1.as_slice(), e.b1.as_slice(), e.w2.as_slice(), e.b2.as_slice()].concat()
        };
        let rebuild = |x: &[f64]| {
            let mut mm = m.clone();
            let mut full = flatten_params(&m);
            full[..x.len()].copy_from_slice(x);
            mm = unflatten_params(&mm, &full).unwrap();
            mm.region_encoder
        };
        let f = |x: &[f64]| {
            let enc = rebuild(x);
            let (out, _) = encode_features(&enc, &obs).unwrap();
            out.as_slice().iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>()
        };
        let g = |x: &[f64]| {
            let enc = rebuild(x);
            let (_, cache) = encode_features(&enc, &obs).unwrap();
            let mut grad = vec![0.0; x.len()];
            encode_backward(&enc, &obs, &cache, &weights, &mut grad).unwrap();
            grad
        };
        let report = finite_difference_check(&FnWithGrad(f, g), &flat, 1e-5, 1e-4).unwrap();
        assert!(report.pass, "{report:?}");
    }
}
