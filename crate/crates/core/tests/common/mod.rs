#![allow(dead_code)]

pub mod oracle;

use milrep::aggregators::{AttentionParams, GlobalParams};
use milrep::numeric::{DenseMatrix, DenseVector};
use milrep::scoring::FeatureBag;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| normal_vec(rng, d)).collect()
}

pub fn bag(rows: &[Vec<f64>]) -> FeatureBag {
    FeatureBag::from_rows(rows).unwrap()
}

pub fn rows_of(b: &FeatureBag) -> Vec<Vec<f64>> {
    b.rows().map(<[f64]>::to_vec).collect()
}

/// Learned global-aggregator parameters for feature dimension `d`.
pub struct Globals {
    pub a: DenseMatrix,
    pub att: AttentionParams,
}

impl Globals {
    pub fn random(rng: &mut ChaCha8Rng, d: usize) -> Self {
        let a: Vec<f64> = (0..d * d)
            .map(|i| if i % (d + 1) == 0 { 1.0 } else { 0.0 } + 0.3 * rng.gen_range(-1.0..1.0))
            .collect();
        Self {
            a: DenseMatrix::new(d, d, a).unwrap(),
            att: AttentionParams {
                v: DenseMatrix::new(d, d, (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
                w: DenseVector::new((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
            },
        }
    }

    pub fn params(&self) -> GlobalParams<'_> {
        GlobalParams {
            nl_matrix: Some(&self.a),
            attention: Some(&self.att),
        }
    }

    pub fn a_rows(&self) -> Vec<Vec<f64>> {
        (0..self.a.rows()).map(|r| self.a.row(r).to_vec()).collect()
    }

    pub fn v_rows(&self) -> Vec<Vec<f64>> {
        (0..self.att.v.rows()).map(|r| self.att.v.row(r).to_vec()).collect()
    }
}

pub fn shuffled<T: Clone>(rng: &mut ChaCha8Rng, items: &[T]) -> Vec<T> {
    use rand::seq::SliceRandom;
    let mut out = items.to_vec();
    out.shuffle(rng);
    out
}

/// `|a - b| / max(|a|, |b|)`, or 0 when both are 0.
pub fn rel_diff(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Writes a line straight to stderr so it shows even when test output is captured.
pub fn report_line(line: &str) {
    use std::io::Write;
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}
