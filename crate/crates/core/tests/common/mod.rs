//! Straight-line reference implementation of the forward pass on plain
//! vectors, independent of the tape.
#![allow(dead_code)]

use mret::model::ModelParams;
use mret::multires::TubeBatch;

pub type Mat = Vec<Vec<f64>>;

fn tensor(p: &ModelParams<f64>, name: &str) -> (Vec<f64>, Vec<usize>) {
    let t = p.get(name).unwrap();
    (t.data().to_vec(), t.shape().to_vec())
}

fn vector(p: &ModelParams<f64>, name: &str) -> Vec<f64> {
    tensor(p, name).0
}

fn matrix(p: &ModelParams<f64>, name: &str) -> Mat {
    let (data, shape) = tensor(p, name);
    data.chunks(shape[1]).map(|r| r.to_vec()).collect()
}

/// `x · wᵀ + b` with `w` stored `[out, in]`.
fn linear(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            w.iter()
                .zip(b)
                .map(|(wr, bo)| {
                    let mut acc = 0.0;
                    for k in 0..row.len() {
                        acc += row[k] * wr[k];
                    }
                    acc + bo
                })
                .collect()
        })
        .collect()
}

fn layer_norm(x: &Mat, gamma: &[f64], beta: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let s = (var + 1e-6).sqrt();
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / s * gamma[i] + beta[i])
                .collect()
        })
        .collect()
}

fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2))
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect())
        .collect()
}

/// Softmax attention; returns the output and the per-head probability maps.
fn attention(p: &ModelParams<f64>, x: &Mat, prefix: &str, heads: usize) -> (Mat, Vec<Mat>) {
    let q = linear(x, &matrix(p, &format!("{prefix}.wq")), &vector(p, &format!("{prefix}.bq")));
    let k = linear(x, &matrix(p, &format!("{prefix}.wk")), &vector(p, &format!("{prefix}.bk")));
    let v = linear(x, &matrix(p, &format!("{prefix}.wv")), &vector(p, &format!("{prefix}.bv")));
    let s = x.len();
    let d = x[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; s];
    let mut maps = Vec::new();
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let mut a = vec![vec![0.0; s]; s];
        for i in 0..s {
            for j in 0..s {
                let dot: f64 = cols.clone().map(|c| q[i][c] * k[j][c]).sum();
                a[i][j] = dot / (dh as f64).sqrt();
            }
            let max = a[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = a[i].iter().map(|l| (l - max).exp()).sum();
            for j in 0..s {
                a[i][j] = (a[i][j] - max).exp() / total;
            }
        }
        for i in 0..s {
            for c in cols.clone() {
                out[i][c] = (0..s).map(|j| a[i][j] * v[j][c]).sum();
            }
        }
        maps.push(a);
    }
    let o = linear(&out, &matrix(p, &format!("{prefix}.wo")), &vector(p, &format!("{prefix}.bo")));
    (o, maps)
}

/// Encoder over a token sequence; returns the normalized cls row and the
/// attention maps `[layer][head]`.
pub fn encoder(p: &ModelParams<f64>, mut x: Mat, prefix: &str, layers: usize) -> (Vec<f64>, Vec<Vec<Mat>>) {
    let heads = p.config().heads;
    let mut all = Vec::new();
    for l in 0..layers {
        let pre = format!("{prefix}.layers.{l}");
        let n1 = layer_norm(&x, &vector(p, &format!("{pre}.ln1.gamma")), &vector(p, &format!("{pre}.ln1.beta")));
        let (a, maps) = attention(p, &n1, &format!("{pre}.attn"), heads);
        x = add(&x, &a);
        let n2 = layer_norm(&x, &vector(p, &format!("{pre}.ln2.gamma")), &vector(p, &format!("{pre}.ln2.beta")));
        let mut hidden = linear(&n2, &matrix(p, &format!("{pre}.mlp.w1")), &vector(p, &format!("{pre}.mlp.b1")));
        hidden.iter_mut().for_each(|r| r.iter_mut().for_each(|v| *v = gelu(*v)));
        let m = linear(&hidden, &matrix(p, &format!("{pre}.mlp.w2")), &vector(p, &format!("{pre}.mlp.b2")));
        x = add(&x, &m);
        all.push(maps);
    }
    let cls = vec![x[0].clone()];
    let out = layer_norm(&cls, &vector(p, &format!("{prefix}.ln.gamma")), &vector(p, &format!("{prefix}.ln.beta")));
    (out[0].clone(), all)
}

pub fn embed(p: &ModelParams<f64>, tubes: &TubeBatch) -> Mat {
    let x: Mat = (0..tubes.tube_count())
        .map(|k| tubes.tube(k).iter().map(|&v| v as f64).collect())
        .collect();
    let tokens = linear(&x, &matrix(p, "embed.weight"), &vector(p, "embed.bias"));
    let mut seq = vec![vector(p, "spatial.cls")];
    seq.extend(tokens);
    add(&seq, &matrix(p, "spatial.pos"))
}

/// Raw head output for a clip.
pub fn forward(p: &ModelParams<f64>, groups: &[TubeBatch]) -> f64 {
    let cfg = p.config();
    let hs: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| encoder(p, embed(p, g), "spatial", cfg.spatial_layers).0)
        .collect();
    let mut seq = vec![vector(p, "temporal.cls")];
    seq.extend(hs);
    let pos = matrix(p, "temporal.pos");
    let seq = add(&seq, &pos[..seq.len()].to_vec());
    let (v, _) = encoder(p, seq, "temporal", cfg.temporal_layers);
    let h = linear(&vec![v], &matrix(p, "head.w1"), &vector(p, "head.b1"));
    let h: Mat = vec![h[0].iter().map(|&x| gelu(x)).collect()];
    linear(&h, &matrix(p, "head.w2"), &vector(p, "head.b2"))[0][0]
}
