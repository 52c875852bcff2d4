//! Independent loop-based oracles shared by the integration tests. Nothing
//! here goes through the tape.

#![allow(dead_code)]

use iganet::data::Pose3;
use iganet::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    let shape = t.shape();
    let cols = *shape.last().unwrap();
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

pub fn from_mat(m: &Mat) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

pub fn vec_of(t: &Tensor) -> Vec<f64> {
    t.data().to_vec()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i][p] * b[p][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

pub fn scale(a: &Mat, c: f64) -> Mat {
    a.iter().map(|r| r.iter().map(|x| x * c).collect()).collect()
}

pub fn add_row(a: &Mat, b: &[f64]) -> Mat {
    a.iter().map(|r| r.iter().zip(b).map(|(x, y)| x + y).collect()).collect()
}

pub fn map(a: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    a.iter().map(|r| r.iter().map(|&x| f(x)).collect()).collect()
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(r, s)| {
            assert_eq!(r.len(), s.len());
            r.iter().zip(s).map(|(x, y)| (x - y).abs())
        })
        .fold(0.0, f64::max)
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn linear(x: &Mat, w: &Tensor, b: Option<&Tensor>) -> Mat {
    let y = matmul(x, &to_mat(w));
    match b {
        Some(b) => add_row(&y, b.data()),
        None => y,
    }
}

/// Per-row layer norm with `ε = 1e-5`.
pub fn layer_norm(x: &Mat, gamma: &[f64], beta: &[f64]) -> Mat {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            r.iter().enumerate().map(|(c, v)| (v - mu) * inv * gamma[c] + beta[c]).collect()
        })
        .collect()
}

/// Neighbour averaging over `edges` plus a self-loop, then `· W + b`.
pub fn naive_gcn(x: &Mat, edges: &[(usize, usize)], w: &Tensor, b: &Tensor, act: Option<fn(f64) -> f64>) -> Mat {
    let j = x.len();
    let c = x[0].len();
    let mut agg = vec![vec![0.0; c]; j];
    for (node, row) in agg.iter_mut().enumerate() {
        let mut nbrs = vec![node];
        for &(p, q) in edges {
            if p == node {
                nbrs.push(q);
            } else if q == node {
                nbrs.push(p);
            }
        }
        for &n in &nbrs {
            for (a, v) in row.iter_mut().zip(&x[n]) {
                *a += v;
            }
        }
        for a in row.iter_mut() {
            *a /= nbrs.len() as f64;
        }
    }
    let y = linear(&agg, w, Some(b));
    match act {
        Some(f) => map(&y, f),
        None => y,
    }
}

/// Multi-head scaled dot-product attention without output projection,
/// written head by head with explicit loops.
pub fn naive_attention(x: &Mat, wq: &Tensor, wk: &Tensor, wv: &Tensor, heads: usize) -> Mat {
    let q = matmul(x, &to_mat(wq));
    let k = matmul(x, &to_mat(wk));
    let v = matmul(x, &to_mat(wv));
    let j = x.len();
    let c = q[0].len();
    let d = c / heads;
    let mut out = vec![vec![0.0; c]; j];
    for h in 0..heads {
        let cols = h * d..(h + 1) * d;
        for a in 0..j {
            let mut scores = vec![0.0; j];
            for (b, s) in scores.iter_mut().enumerate() {
                let mut dot = 0.0;
                for col in cols.clone() {
                    dot += q[a][col] * k[b][col];
                }
                *s = dot / (d as f64).sqrt();
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for col in cols.clone() {
                let mut acc = 0.0;
                for b in 0..j {
                    acc += e[b] / z * v[b][col];
                }
                out[a][col] = acc;
            }
        }
    }
    out
}

/// The residual bottleneck feed-forward block, written out line by line.
pub struct UmlpWeights<'a> {
    pub gamma: &'a [f64],
    pub beta: &'a [f64],
    pub down: (&'a Tensor, &'a Tensor),
    pub mid: (&'a Tensor, &'a Tensor),
    pub up: (&'a Tensor, &'a Tensor),
}

pub fn naive_umlp(x: &Mat, w: &UmlpWeights<'_>) -> (Mat, Mat, Mat) {
    let xn = layer_norm(x, w.gamma, w.beta);
    let down = map(&linear(&xn, w.down.0, Some(w.down.1)), gelu);
    let mid = add(&map(&linear(&down, w.mid.0, Some(w.mid.1)), gelu), &down);
    let up = add(&linear(&mid, w.up.0, Some(w.up.1)), x);
    (down, mid, up)
}

/// Unlinked GCN and attention branches summed on the residual:
/// `X + gcn2(σ(gcn1(LN X))) + Proj(MHA(LN X))`.
pub struct ParallelWeights<'a> {
    pub gamma: &'a [f64],
    pub beta: &'a [f64],
    pub edges: &'a [(usize, usize)],
    pub gcn1: (&'a Tensor, &'a Tensor),
    pub gcn2: (&'a Tensor, &'a Tensor),
    pub wq: &'a Tensor,
    pub wk: &'a Tensor,
    pub wv: &'a Tensor,
    pub proj: (&'a Tensor, &'a Tensor),
    pub heads: usize,
}

pub fn parallel_block(x: &Mat, w: &ParallelWeights<'_>) -> Mat {
    let xn = layer_norm(x, w.gamma, w.beta);
    let g1 = naive_gcn(&xn, w.edges, w.gcn1.0, w.gcn1.1, Some(gelu));
    let g2 = naive_gcn(&g1, w.edges, w.gcn2.0, w.gcn2.1, None);
    let attn = naive_attention(&xn, w.wq, w.wk, w.wv, w.heads);
    let proj = linear(&attn, w.proj.0, Some(w.proj.1));
    add(&add(x, &g2), &proj)
}

pub fn brute_mpjpe(pred: &[Pose3], gt: &[Pose3]) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for b in 0..gt.len() {
        for j in 0..gt[b].len() {
            let mut s = 0.0;
            for k in 0..3 {
                s += (pred[b][j][k] - gt[b][j][k]).powi(2);
            }
            total += s.sqrt();
            n += 1;
        }
    }
    total / n as f64
}

pub fn brute_pck(pred: &[Pose3], gt: &[Pose3], t: f64) -> f64 {
    let mut hit = 0usize;
    let mut n = 0usize;
    for b in 0..gt.len() {
        for j in 0..gt[b].len() {
            let mut s = 0.0;
            for k in 0..3 {
                s += (pred[b][j][k] - gt[b][j][k]).powi(2);
            }
            if s.sqrt() <= t {
                hit += 1;
            }
            n += 1;
        }
    }
    100.0 * hit as f64 / n as f64
}

pub fn brute_auc(pred: &[Pose3], gt: &[Pose3]) -> f64 {
    let mut s = 0.0;
    for i in 0..31 {
        s += brute_pck(pred, gt, 5.0 * i as f64);
    }
    s / 31.0
}

/// Textbook bias-corrected Adam on flat vectors.
pub struct NaiveAdam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: i32,
}

impl NaiveAdam {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, p: &mut [f64], g: &[f64], lr: f64) {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        self.t += 1;
        for i in 0..p.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = self.m[i] / (1.0 - b1.powi(self.t));
            let vh = self.v[i] / (1.0 - b2.powi(self.t));
            p[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
}
