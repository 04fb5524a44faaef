//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use clbench::model::{Layer, Matrix, MlpParams};
use clbench::Ring;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tables_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../tables")
}

/// One fixture row: name, seven raw columns, published score.
pub struct TableRow {
    pub name: String,
    pub raw: [f64; 7],
    pub published: f64,
}

/// Plain line splitting, independent of the library's CSV reader.
pub fn load_table(stem: &str) -> Vec<TableRow> {
    let text = std::fs::read_to_string(tables_dir().join(format!("{stem}.csv"))).unwrap();
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            assert_eq!(f.len(), 9, "bad fixture line {l}");
            let mut raw = [0.0; 7];
            for k in 0..7 {
                raw[k] = f[k + 1].trim().parse().unwrap();
            }
            TableRow {
                name: f[0].to_string(),
                raw,
                published: f[8].trim().parse().unwrap(),
            }
        })
        .collect()
}

/// Min-max normalization and the weighted sum, written out column by column.
pub fn score_oracle(rows: &[[f64; 7]]) -> Vec<f64> {
    let n = rows.len();
    let col = |k: usize| rows.iter().map(move |r| r[k]);
    let norm = |k: usize, x: f64, benefit: bool| -> f64 {
        if n < 2 {
            return 1.0;
        }
        let lo = col(k).fold(f64::INFINITY, f64::min);
        let hi = col(k).fold(f64::NEG_INFINITY, f64::max);
        if hi == lo {
            return 1.0;
        }
        let v = (x - lo) / (hi - lo);
        if benefit {
            v
        } else {
            1.0 - v
        }
    };
    rows.iter()
        .map(|r| {
            0.3 * norm(0, r[0], true)
                + 0.1 * norm(1, r[1], true)
                + 0.15 * norm(2, r[2], false)
                + 0.125 * (norm(3, r[3], false) + norm(4, r[4], false)) / 2.0
                + 0.125 * (norm(5, r[5], false) + norm(6, r[6], false)) / 2.0
        })
        .collect()
}

/// Spearman correlation via average ranks and the Pearson formula.
pub fn spearman_oracle(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(x: &[f64]) -> Vec<f64> {
        x.iter()
            .map(|&v| {
                let less = x.iter().filter(|&&w| w < v).count() as f64;
                let equal = x.iter().filter(|&&w| w == v).count() as f64;
                less + (equal + 1.0) / 2.0
            })
            .collect()
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Central finite differences of `f` at `x`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm (0 when both vanish).
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Mean softmax cross-entropy computed directly from logits rows.
pub fn xent_oracle(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.iter().zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len() as f64
}

/// Forward pass written with explicit loops: ReLU after every layer but the
/// last. Returns every layer's output.
pub fn forward_oracle(params: &MlpParams<f64>, x: &[Vec<f64>]) -> Vec<Vec<Vec<f64>>> {
    let layers = params.layers();
    let mut outs = Vec::new();
    let mut cur: Vec<Vec<f64>> = x.to_vec();
    for (l, layer) in layers.iter().enumerate() {
        let next: Vec<Vec<f64>> = cur
            .iter()
            .map(|row| {
                (0..layer.out_dim())
                    .map(|o| {
                        let mut z = layer.bias[o];
                        for i in 0..layer.in_dim() {
                            z += layer.weights.get(o, i) * row[i];
                        }
                        if l + 1 < layers.len() {
                            z.max(0.0)
                        } else {
                            z
                        }
                    })
                    .collect()
            })
            .collect();
        outs.push(next.clone());
        cur = next;
    }
    outs
}

/// Representation loss by enumerating every (layer, i, j) ordered pair with
/// i != j: mean dot product over different-label pairs plus mean dot
/// product over same-label pairs; an empty set contributes zero.
pub fn drl_brute<T: Ring>(layers: &[Vec<Vec<T>>], labels: &[usize]) -> T {
    let b = labels.len();
    let (mut between, mut within) = (T::zero(), T::zero());
    let (mut nb, mut nw) = (0usize, 0usize);
    for i in 0..b {
        for j in 0..b {
            if i == j {
                continue;
            }
            if labels[i] == labels[j] {
                nw += 1;
            } else {
                nb += 1;
            }
        }
    }
    for h in layers {
        for i in 0..b {
            for j in 0..b {
                if i == j {
                    continue;
                }
                let mut dot = T::zero();
                for k in 0..h[i].len() {
                    dot += h[i][k] * h[j][k];
                }
                if labels[i] == labels[j] {
                    within += dot;
                } else {
                    between += dot;
                }
            }
        }
    }
    let mut total = T::zero();
    if nb > 0 {
        total += between / T::from_count(nb);
    }
    if nw > 0 {
        total += within / T::from_count(nw);
    }
    total
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

/// Random MLP with biases perturbed away from zero.
pub fn random_mlp(rng: &mut impl Rng, sizes: &[usize]) -> MlpParams<f64> {
    let layers = sizes
        .windows(2)
        .map(|w| {
            let weights = random_matrix(rng, w[1], w[0]);
            Layer {
                weights: Matrix::from_rows(&weights).unwrap(),
                bias: (0..w[1]).map(|_| rng.random_range(-0.5..0.5)).collect(),
            }
        })
        .collect();
    MlpParams::from_layers(layers).unwrap()
}

use clbench::streamgen::{
    generate_world, make_mtnc_stream, make_nic_stream, make_ni_stream, Protocol, Stream,
    WorldConfig,
};

/// Desk-preset stream: MT-NC as 5 tasks of 2 classes, NIC opening with 2.
pub fn desk_stream(protocol: Protocol, seed: u64) -> Stream {
    let cfg = WorldConfig::desk().with_seed(seed);
    let world = generate_world(&cfg).unwrap();
    match protocol {
        Protocol::Ni => make_ni_stream(&world, &cfg),
        Protocol::MtNc => make_mtnc_stream(&world, &cfg, 2, 2),
        Protocol::Nic => make_nic_stream(&world, &cfg, 2),
    }
    .unwrap()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}
