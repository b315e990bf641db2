//! Straight-line reference formulas: no max shifting, no shared helpers with the library.

#[derive(Clone, Copy, Debug)]
pub enum Local {
    Max,
    Sum,
    Avg,
    Lse(f64),
    Nor,
    Nand(f64, f64),
}

#[derive(Clone, Copy, Debug)]
pub enum Global {
    Avg,
    Att,
    Nl(f64),
    Ca,
}

#[derive(Clone, Copy, Debug)]
pub enum Sentence {
    Avg,
    Sum,
    Max,
    Lse(f64),
    Id,
}

pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..x.len() {
        s += x[i] * y[i];
    }
    s
}

pub fn cos(x: &[f64], y: &[f64]) -> f64 {
    dot(x, y) / (dot(x, x).sqrt() * dot(y, y).sqrt())
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn max(v: &[f64]) -> f64 {
    let mut m = v[0];
    for &x in v {
        if x > m {
            m = x;
        }
    }
    m
}

fn lse(v: &[f64], gamma: f64) -> f64 {
    v.iter().map(|x| (gamma * x).exp()).sum::<f64>().ln() / gamma
}

pub fn local(kind: Local, h: &[f64]) -> f64 {
    match kind {
        Local::Max => max(h),
        Local::Sum => h.iter().sum(),
        Local::Avg => mean(h),
        Local::Lse(g) => lse(h, g),
        Local::Nor => {
            let mut prod = 1.0;
            for x in h {
                prod *= 1.0 - (x + 1.0) / 2.0;
            }
            2.0 * (1.0 - prod) - 1.0
        }
        Local::Nand(a, b) => {
            let p: Vec<f64> = h.iter().map(|x| (x + 1.0) / 2.0).collect();
            let pbar = mean(&p);
            let q = (sigmoid(a * (pbar - b)) - sigmoid(-a * b)) / (sigmoid(a * (1.0 - b)) - sigmoid(-a * b));
            2.0 * q - 1.0
        }
    }
}

pub fn sentence(kind: Sentence, g: &[f64]) -> f64 {
    match kind {
        Sentence::Avg => mean(g),
        Sentence::Sum => g.iter().sum(),
        Sentence::Max => max(g),
        Sentence::Lse(gamma) => lse(g, gamma),
        Sentence::Id => {
            assert_eq!(g.len(), 1);
            g[0]
        }
    }
}

fn matvec(m: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, x)).collect()
}

fn weighted_sum(weights: &[f64], rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows[0].len();
    let mut out = vec![0.0; d];
    for (w, r) in weights.iter().zip(rows) {
        for i in 0..d {
            out[i] += w * r[i];
        }
    }
    out
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = logits.iter().map(|z| z.exp()).collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|x| x / total).collect()
}

pub struct GlobalWeights<'a> {
    pub a: &'a [Vec<f64>],
    pub v: &'a [Vec<f64>],
    pub w: &'a [f64],
}

/// Pooled feature for sentence `y` under `kind`.
pub fn pool(kind: Global, regions: &[Vec<f64>], y: &[f64], p: &GlobalWeights<'_>) -> Vec<f64> {
    let n = regions.len();
    match kind {
        Global::Avg => weighted_sum(&vec![1.0 / n as f64; n], regions),
        Global::Att => {
            let logits: Vec<f64> = regions
                .iter()
                .map(|x| {
                    let hidden: Vec<f64> = matvec(p.v, x).iter().map(|z| z.tanh()).collect();
                    dot(p.w, &hidden)
                })
                .collect();
            weighted_sum(&softmax(&logits), regions)
        }
        Global::Nl(gamma) => {
            let h: Vec<f64> = regions.iter().map(|x| cos(x, y)).collect();
            let mut k = 0;
            for i in 1..n {
                if h[i] > h[k] {
                    k = i;
                }
            }
            let ak = matvec(p.a, &regions[k]);
            let logits: Vec<f64> = regions.iter().map(|x| gamma * dot(&matvec(p.a, x), &ak)).collect();
            weighted_sum(&softmax(&logits), regions)
        }
        Global::Ca => {
            let logits: Vec<f64> = regions.iter().map(|x| dot(x, y)).collect();
            weighted_sum(&softmax(&logits), regions)
        }
    }
}

pub fn score_local(l: Local, s: Sentence, regions: &[Vec<f64>], sentences: &[Vec<f64>]) -> f64 {
    let g: Vec<f64> = sentences
        .iter()
        .map(|y| {
            let h: Vec<f64> = regions.iter().map(|x| cos(x, y)).collect();
            local(l, &h)
        })
        .collect();
    sentence(s, &g)
}

pub fn score_global(
    kind: Global,
    s: Sentence,
    regions: &[Vec<f64>],
    sentences: &[Vec<f64>],
    p: &GlobalWeights<'_>,
) -> f64 {
    let g: Vec<f64> = sentences.iter().map(|y| cos(&pool(kind, regions, y, p), y)).collect();
    sentence(s, &g)
}

/// `ln(1 + Σ exp(γ(s⁻ − s⁺)))` evaluated literally.
pub fn infonce(positive: f64, negatives: &[f64], gamma: f64) -> f64 {
    let mut total = 1.0;
    for n in negatives {
        total += (gamma * (n - positive)).exp();
    }
    total.ln()
}
