//! Brute-force reference implementations the library is checked against.

use std::collections::BTreeSet;

use qgraph_core::clickgraph::{ClickRecord, QueryGraph};
use qgraph_numcore::{Real, Tensor};

pub fn leaky(x: Real) -> Real {
    if x > 0.0 {
        x
    } else {
        0.2 * x
    }
}

/// `x W^T` by triple loop.
pub fn project(x: &Tensor, w: &Tensor) -> Vec<Vec<Real>> {
    let (n, din) = x.dims2().unwrap();
    let dout = w.shape()[0];
    (0..n)
        .map(|i| (0..dout).map(|o| (0..din).map(|k| x.get2(i, k) * w.get2(o, k)).sum()).collect())
        .collect()
}

/// Dense `D^{-1/2} (A + I) D^{-1/2} X W^T` with `D` the degree of `A + I`.
pub fn dense_gcn(adj: &[Vec<bool>], x: &Tensor, w: &Tensor) -> Vec<Vec<Real>> {
    let n = adj.len();
    let xw = project(x, w);
    let a_hat: Vec<Vec<Real>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j || adj[i][j] { 1.0 } else { 0.0 }).collect())
        .collect();
    let d: Vec<Real> = a_hat.iter().map(|r| r.iter().sum()).collect();
    (0..n)
        .map(|i| {
            (0..xw[0].len())
                .map(|c| (0..n).map(|j| a_hat[i][j] / (d[i] * d[j]).sqrt() * xw[j][c]).sum())
                .collect()
        })
        .collect()
}

/// Per-node enumeration of single-head attention over `N(i) ∪ {i}`.
pub fn enumerate_gat(adj: &[Vec<bool>], x: &Tensor, w: &Tensor, a: &[Real]) -> (Vec<Vec<Real>>, Vec<Real>) {
    let n = adj.len();
    let wh = project(x, w);
    let d = wh[0].len();
    let mut out = Vec::new();
    let mut row_sums = Vec::new();
    for i in 0..n {
        let js: Vec<usize> = (0..n).filter(|&j| j == i || adj[i][j]).collect();
        let e: Vec<Real> = js
            .iter()
            .map(|&j| {
                let s: Real = (0..d).map(|c| a[c] * wh[i][c] + a[d + c] * wh[j][c]).sum();
                leaky(s)
            })
            .collect();
        let m = e.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
        let z: Real = e.iter().map(|v| (v - m).exp()).sum();
        let alpha: Vec<Real> = e.iter().map(|v| (v - m).exp() / z).collect();
        row_sums.push(alpha.iter().sum());
        out.push(
            (0..d)
                .map(|c| js.iter().zip(&alpha).map(|(&j, al)| al * wh[j][c]).sum())
                .collect(),
        );
    }
    (out, row_sums)
}

pub fn adjacency(g: &QueryGraph) -> Vec<Vec<bool>> {
    let n = g.num_nodes();
    (0..n).map(|i| (0..n).map(|j| g.has_edge(i, j)).collect()).collect()
}

pub fn max_diff(a: &Tensor, b: &[Vec<Real>]) -> Real {
    let mut m: Real = 0.0;
    for (i, row) in b.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            m = m.max((a.get2(i, c) - v).abs());
        }
    }
    m
}

pub fn kl_oracle(p_post: &[Real], p_prior: &[Real]) -> Real {
    let c = |x: Real| x.clamp(1e-7, 1.0 - 1e-7);
    p_post
        .iter()
        .zip(p_prior)
        .map(|(&t, &p)| {
            let (t, p) = (c(t), c(p));
            t * (t / p).ln() + (1.0 - t) * ((1.0 - t) / (1.0 - p)).ln()
        })
        .sum()
}

pub fn brute_force_edges(records: &[ClickRecord]) -> (Vec<String>, BTreeSet<(usize, usize)>) {
    let mut texts: Vec<String> = Vec::new();
    for r in records {
        if !texts.contains(&r.query_text) {
            texts.push(r.query_text.clone());
        }
    }
    let urls = |q: &str| -> BTreeSet<&str> {
        records.iter().filter(|r| r.query_text == q).map(|r| r.url.as_str()).collect()
    };
    let mut edges = BTreeSet::new();
    for i in 0..texts.len() {
        for j in i + 1..texts.len() {
            if !urls(&texts[i]).is_disjoint(&urls(&texts[j])) {
                edges.insert((i, j));
            }
        }
    }
    (texts, edges)
}

pub struct Oracle {
    pub acc: Real,
    pub p: Real,
    pub r: Real,
    pub f1: Real,
    pub confusion: Vec<Vec<usize>>,
}

pub fn metrics_oracle(preds: &[usize], golds: &[usize], classes: usize) -> Oracle {
    let mut confusion = vec![vec![0; classes]; classes];
    for g in 0..classes {
        for p in 0..classes {
            confusion[g][p] = preds.iter().zip(golds).filter(|&(&a, &b)| a == p && b == g).count();
        }
    }
    let (mut ps, mut rs, mut fs) = (0.0, 0.0, 0.0);
    for c in 0..classes {
        let tp = preds.iter().zip(golds).filter(|&(&a, &b)| a == c && b == c).count();
        let fp = preds.iter().zip(golds).filter(|&(&a, &b)| a == c && b != c).count();
        let fn_ = preds.iter().zip(golds).filter(|&(&a, &b)| a != c && b == c).count();
        let p = if tp + fp == 0 { 0.0 } else { tp as Real / (tp + fp) as Real };
        let r = if tp + fn_ == 0 { 0.0 } else { tp as Real / (tp + fn_) as Real };
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        ps += p;
        rs += r;
        fs += f;
    }
    let k = classes as Real;
    let correct = preds.iter().zip(golds).filter(|(a, b)| a == b).count();
    Oracle {
        acc: correct as Real / preds.len() as Real,
        p: ps / k,
        r: rs / k,
        f1: fs / k,
        confusion,
    }
}
