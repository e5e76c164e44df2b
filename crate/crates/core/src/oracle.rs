//! Straight-line reference implementations used only by unit tests. They
//! read parameters by name and share no code with the tape.

use crate::numerics::{ParamStore, Tensor};

pub type M = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> M {
    let c = *t.shape.last().unwrap();
    if t.data.is_empty() {
        return Vec::new();
    }
    t.data.chunks(c).map(<[f64]>::to_vec).collect()
}

pub fn param(store: &ParamStore, name: &str) -> Tensor {
    store.get(store.id(name).unwrap_or_else(|| panic!("missing param {name}"))).clone()
}

pub fn pm(store: &ParamStore, name: &str) -> M {
    mat(&param(store, name))
}

pub fn pv(store: &ParamStore, name: &str) -> Vec<f64> {
    param(store, name).data
}

pub fn mm(a: &M, b: &M) -> M {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| {
                    let mut s = 0.0;
                    for (k, x) in row.iter().enumerate() {
                        s += x * b[k][j];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn add(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

pub fn layer_norm(x: &M, g: &[f64], b: &[f64], eps: f64) -> M {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = (var + eps).sqrt();
            row.iter().enumerate().map(|(j, v)| (v - mean) / sd * g[j] + b[j]).collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn mean_rows(x: &M, positions: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; x[0].len()];
    for &p in positions {
        for (o, v) in out.iter_mut().zip(&x[p]) {
            *o += v / positions.len() as f64;
        }
    }
    out
}

/// Attention block with residual and norm; `prefix` rows are stacked in
/// front of the projected keys/values.
pub fn attention(store: &ParamStore, stem: &str, heads: usize, eps: f64, h: &M, src: &M, prefix: Option<(&M, &M)>) -> M {
    let q = mm(h, &pm(store, &format!("{stem}.wq")));
    let mut k = mm(src, &pm(store, &format!("{stem}.wk")));
    let mut v = mm(src, &pm(store, &format!("{stem}.wv")));
    if let Some((pk, pv_)) = prefix {
        k = pk.iter().cloned().chain(k).collect();
        v = pv_.iter().cloned().chain(v).collect();
    }
    let m = h[0].len();
    let dh = m / heads;
    let mut merged = vec![vec![0.0; m]; h.len()];
    for hd in 0..heads {
        let cols = hd * dh..(hd + 1) * dh;
        for (i, qrow) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .map(|krow| dot(&qrow[cols.clone()], &krow[cols.clone()]) / (dh as f64).sqrt())
                .collect();
            let w = softmax(&scores);
            for (j, vrow) in v.iter().enumerate() {
                for c in cols.clone() {
                    merged[i][c] += w[j] * vrow[c];
                }
            }
        }
    }
    let out = mm(&merged, &pm(store, &format!("{stem}.wo")));
    layer_norm(
        &add(&out, h),
        &pv(store, &format!("{stem}.norm.gamma")),
        &pv(store, &format!("{stem}.norm.beta")),
        eps,
    )
}

pub fn ffn(store: &ParamStore, stem: &str, eps: f64, h: &M) -> M {
    let b1 = pv(store, &format!("{stem}.b1"));
    let b2 = pv(store, &format!("{stem}.b2"));
    let x: M = mm(h, &pm(store, &format!("{stem}.w1")))
        .into_iter()
        .map(|r| r.iter().zip(&b1).map(|(v, b)| gelu(v + b)).collect())
        .collect();
    let y: M = mm(&x, &pm(store, &format!("{stem}.w2")))
        .into_iter()
        .map(|r| r.iter().zip(&b2).map(|(v, b)| v + b).collect())
        .collect();
    layer_norm(
        &add(&y, h),
        &pv(store, &format!("{stem}.norm.gamma")),
        &pv(store, &format!("{stem}.norm.beta")),
        eps,
    )
}

pub fn embed(store: &ParamStore, ids: &[usize]) -> M {
    let tok = pm(store, "embed.token");
    let pos = pm(store, "embed.position");
    ids.iter()
        .enumerate()
        .map(|(i, &id)| tok[id].iter().zip(&pos[i]).map(|(a, b)| a + b).collect())
        .collect()
}

/// How a layer's prefix is formed in the oracle.
pub struct OraclePrefix<'a> {
    /// Scope such as `ins`, `tem` or `tem.type.X`, or `None` for no prefix.
    pub scope: Option<String>,
    /// Gate family tag, or `None` for an ungated prefix.
    pub gate: Option<&'a str>,
    pub guide: Vec<usize>,
}

pub fn layer_prefix(store: &ParamStore, side: &str, layer: usize, p: &OraclePrefix<'_>, h: &M) -> Option<(M, M)> {
    let scope = p.scope.as_ref()?;
    let stem = format!("prefix.{side}.{scope}.layer.{layer}");
    let mut key = pm(store, &format!("{stem}.key"));
    let mut val = pm(store, &format!("{stem}.val"));
    if let Some(fam) = p.gate {
        let g = format!("gate.{side}.{fam}.layer.{layer}");
        let w = pm(store, &format!("{g}.W"));
        let lambda = pv(store, &format!("{g}.lambda"))[0];
        let hg = mean_rows(h, &p.guide);
        for t in 0..key.len() {
            let a = sigmoid((0..hg.len()).map(|i| hg[i] * w[i][t]).sum());
            key[t].iter_mut().for_each(|x| *x *= lambda * a);
            val[t].iter_mut().for_each(|x| *x *= lambda * a);
        }
    }
    Some((key, val))
}

pub fn encoder(store: &ParamStore, heads: usize, layers: usize, eps: f64, ids: &[usize], p: &OraclePrefix<'_>) -> M {
    let mut h = embed(store, ids);
    for i in 0..layers {
        let pre = layer_prefix(store, "enc", i, p, &h);
        let stem = format!("enc.layer.{i}");
        h = attention(store, &format!("{stem}.self_attn"), heads, eps, &h, &h.clone(), pre.as_ref().map(|(k, v)| (k, v)));
        h = ffn(store, &format!("{stem}.ffn"), eps, &h);
    }
    h
}

pub fn decoder(store: &ParamStore, heads: usize, layers: usize, eps: f64, h_in: &M, cross: &M, p: &OraclePrefix<'_>) -> M {
    let mut h = h_in.clone();
    for i in 0..layers {
        let pre = layer_prefix(store, "dec", i, p, &h);
        let stem = format!("dec.layer.{i}");
        h = attention(store, &format!("{stem}.self_attn"), heads, eps, &h, &h.clone(), pre.as_ref().map(|(k, v)| (k, v)));
        h = attention(store, &format!("{stem}.cross_attn"), heads, eps, &h, cross, None);
        h = ffn(store, &format!("{stem}.ffn"), eps, &h);
    }
    h
}
