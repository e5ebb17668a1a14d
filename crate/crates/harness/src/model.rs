//! A small decoder-only transformer with a hand-written backward pass.
//!
//! Pre-norm blocks with parameter-free RMSNorm, causal multi-head attention
//! with separate Q, K, V projections (rows grouped by head), and a ReLU MLP.
//! The token embedding is tied to the output head.

use groupmuon_core::Matrix64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::tasks::{Sample, Task};

const RMS_EPS: f64 = 1e-6;
const EMBEDDING_STD: f64 = 0.1;
const PARAMS_PER_LAYER: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub task: Task,
    pub init_seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            d_model: 96,
            num_heads: 12,
            head_dim: 8,
            vocab_size: 64,
            seq_len: 64,
            task: Task::Copy,
            init_seed: 0,
        }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("num_layers", self.num_layers),
            ("d_model", self.d_model),
            ("num_heads", self.num_heads),
            ("head_dim", self.head_dim),
            ("vocab_size", self.vocab_size),
            ("seq_len", self.seq_len),
        ] {
            if v == 0 {
                return Err(HarnessError::Config(format!("model.{name} must be positive")));
            }
        }
        if self.d_model != self.num_heads * self.head_dim {
            return Err(HarnessError::Config(format!(
                "model.d_model {} != num_heads {} x head_dim {}",
                self.d_model, self.num_heads, self.head_dim
            )));
        }
        if self.vocab_size < self.task.min_vocab() {
            return Err(HarnessError::Config(format!(
                "model.vocab_size {} is too small for task {} (needs {})",
                self.vocab_size,
                self.task.name(),
                self.task.min_vocab()
            )));
        }
        if self.seq_len < 2 {
            return Err(HarnessError::Config("model.seq_len must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    TokenEmbedding,
    PositionEmbedding,
    Query,
    Key,
    Value,
    Output,
    MlpIn,
    MlpOut,
}

impl Role {
    /// Embeddings go to the adaptive optimizer, everything else to Muon.
    pub fn is_embedding(&self) -> bool {
        matches!(self, Role::TokenEmbedding | Role::PositionEmbedding)
    }

    pub fn is_attention_projection(&self) -> bool {
        matches!(self, Role::Query | Role::Key | Role::Value)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub role: Role,
    pub layer: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    config: ToyModelConfig,
    info: Vec<ParamInfo>,
    params: Vec<Matrix64>,
}

struct LayerCache {
    xn: Matrix64,
    r1: Vec<f64>,
    q: Matrix64,
    k: Matrix64,
    v: Matrix64,
    probs: Vec<f64>,
    att: Matrix64,
    hn: Matrix64,
    r2: Vec<f64>,
    u: Matrix64,
    a: Matrix64,
}

impl ToyModel {
    pub fn new(config: ToyModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let d = config.d_model;
        let mut info = Vec::new();
        let mut params = Vec::new();
        let mut push = |name: String, role, layer, m: Matrix64| {
            info.push(ParamInfo { name, role, layer });
            params.push(m);
        };
        push("tok_emb".into(), Role::TokenEmbedding, None, normal(config.vocab_size, d, EMBEDDING_STD, &mut rng));
        push("pos_emb".into(), Role::PositionEmbedding, None, normal(config.seq_len, d, EMBEDDING_STD, &mut rng));
        for l in 0..config.num_layers {
            let fan = |n: usize| 1.0 / (n as f64).sqrt();
            push(format!("layer{l}.wq"), Role::Query, Some(l), normal(d, d, fan(d), &mut rng));
            push(format!("layer{l}.wk"), Role::Key, Some(l), normal(d, d, fan(d), &mut rng));
            push(format!("layer{l}.wv"), Role::Value, Some(l), normal(d, d, fan(d), &mut rng));
            // residual branch outputs start small
            push(format!("layer{l}.wo"), Role::Output, Some(l), normal(d, d, 0.1 * fan(d), &mut rng));
            push(format!("layer{l}.w1"), Role::MlpIn, Some(l), normal(4 * d, d, fan(d), &mut rng));
            push(format!("layer{l}.w2"), Role::MlpOut, Some(l), normal(d, 4 * d, 0.1 * fan(4 * d), &mut rng));
        }
        Ok(Self { config, info, params })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.config
    }

    pub fn info(&self) -> &[ParamInfo] {
        &self.info
    }

    pub fn params(&self) -> &[Matrix64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Matrix64] {
        &mut self.params
    }

    /// Index of a parameter by name.
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.info.iter().position(|p| p.name == name)
    }

    fn layer(&self, l: usize) -> &[Matrix64] {
        let base = 2 + PARAMS_PER_LAYER * l;
        &self.params[base..base + PARAMS_PER_LAYER]
    }

    fn check_batch(&self, batch: &[Sample]) -> Result<usize> {
        let mut scored = 0;
        for s in batch {
            if s.tokens.len() != self.config.seq_len || s.targets.len() != self.config.seq_len {
                return Err(HarnessError::Config(format!(
                    "sample length {} does not match seq_len {}",
                    s.tokens.len(),
                    self.config.seq_len
                )));
            }
            let v = self.config.vocab_size;
            if s.tokens.iter().chain(s.targets.iter().flatten()).any(|&t| t >= v) {
                return Err(HarnessError::Config(format!("token outside vocabulary of {v}")));
            }
            scored += s.targets.iter().filter(|t| t.is_some()).count();
        }
        if scored == 0 {
            return Err(HarnessError::Config("batch has no scored positions".into()));
        }
        Ok(scored)
    }

    /// Mean cross-entropy over scored positions.
    pub fn loss(&self, batch: &[Sample]) -> Result<f64> {
        let scored = self.check_batch(batch)?;
        let mut total = 0.0;
        for s in batch {
            let (xf, _) = self.forward(&s.tokens);
            let (xfn, _) = rms_rows(&xf);
            let logits = xfn.matmul_transpose_b(&self.params[0])?;
            for (t, target) in s.targets.iter().enumerate() {
                if let Some(y) = target {
                    let row = logits.row(t);
                    total += log_sum_exp(row) - row[*y];
                }
            }
        }
        Ok(total / scored as f64)
    }

    /// Loss and gradients, in parameter order.
    pub fn loss_and_grad(&self, batch: &[Sample]) -> Result<(f64, Vec<Matrix64>)> {
        let scored = self.check_batch(batch)?;
        let inv = 1.0 / scored as f64;
        let mut grads: Vec<Matrix64> = self.params.iter().map(|p| Matrix64::zeros(p.rows(), p.cols())).collect();
        let mut total = 0.0;
        let emb = &self.params[0];
        for s in batch {
            let (xf, caches) = self.forward(&s.tokens);
            let (xfn, rf) = rms_rows(&xf);
            let mut dlogits = xfn.matmul_transpose_b(emb)?;
            for (t, target) in s.targets.iter().enumerate() {
                let row = dlogits.row_mut(t);
                match target {
                    Some(y) => {
                        let lse = log_sum_exp(row);
                        total += lse - row[*y];
                        for z in row.iter_mut() {
                            *z = (*z - lse).exp() * inv;
                        }
                        row[*y] -= inv;
                    }
                    None => row.fill(0.0),
                }
            }
            grads[0].axpy(1.0, &dlogits.transpose_a_matmul(&xfn)?)?;
            let dxfn = dlogits.matmul(emb)?;
            let mut dx = rms_back(&dxfn, &xfn, &rf);
            for l in (0..self.config.num_layers).rev() {
                dx = self.layer_backward(l, &caches[l], dx, &mut grads)?;
            }
            for (t, &tok) in s.tokens.iter().enumerate() {
                add_to(grads[0].row_mut(tok), dx.row(t));
                add_to(grads[1].row_mut(t), dx.row(t));
            }
        }
        Ok((total * inv, grads))
    }

    fn forward(&self, tokens: &[usize]) -> (Matrix64, Vec<LayerCache>) {
        let (tok, pos) = (&self.params[0], &self.params[1]);
        let mut x = Matrix64::from_fn(tokens.len(), self.config.d_model, |t, j| tok[(tokens[t], j)] + pos[(t, j)]);
        let mut caches = Vec::with_capacity(self.config.num_layers);
        for l in 0..self.config.num_layers {
            let (next, cache) = self.layer_forward(l, &x);
            x = next;
            caches.push(cache);
        }
        (x, caches)
    }

    fn layer_forward(&self, l: usize, x: &Matrix64) -> (Matrix64, LayerCache) {
        let [wq, wk, wv, wo, w1, w2] = self.layer(l) else { unreachable!() };
        let (xn, r1) = rms_rows(x);
        let q = xn.matmul_transpose_b(wq).expect("shape");
        let k = xn.matmul_transpose_b(wk).expect("shape");
        let v = xn.matmul_transpose_b(wv).expect("shape");
        let (att, probs) = self.attention(&q, &k, &v);
        let h = x.add(&att.matmul_transpose_b(wo).expect("shape")).expect("shape");
        let (hn, r2) = rms_rows(&h);
        let u = hn.matmul_transpose_b(w1).expect("shape");
        let a = u.map(|z| z.max(0.0));
        let out = h.add(&a.matmul_transpose_b(w2).expect("shape")).expect("shape");
        (out, LayerCache { xn, r1, q, k, v, probs, att, hn, r2, u, a })
    }

    fn attention(&self, q: &Matrix64, k: &Matrix64, v: &Matrix64) -> (Matrix64, Vec<f64>) {
        let (t_len, d, hd) = (q.rows(), self.config.d_model, self.config.head_dim);
        let scale = 1.0 / (hd as f64).sqrt();
        let mut probs = vec![0.0; self.config.num_heads * t_len * t_len];
        let mut out = Matrix64::zeros(t_len, d);
        let (qs, ks, vs) = (q.as_slice(), k.as_slice(), v.as_slice());
        for h in 0..self.config.num_heads {
            let off = h * hd;
            let p = &mut probs[h * t_len * t_len..(h + 1) * t_len * t_len];
            for i in 0..t_len {
                let qi = &qs[i * d + off..i * d + off + hd];
                let row = &mut p[i * t_len..i * t_len + i + 1];
                for (j, s) in row.iter_mut().enumerate() {
                    let kj = &ks[j * d + off..j * d + off + hd];
                    *s = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                }
                softmax_in_place(row);
                let o = &mut out.row_mut(i)[off..off + hd];
                for (j, &pij) in row.iter().enumerate() {
                    add_scaled(o, pij, &vs[j * d + off..j * d + off + hd]);
                }
            }
        }
        (out, probs)
    }

    fn layer_backward(&self, l: usize, c: &LayerCache, dx: Matrix64, grads: &mut [Matrix64]) -> Result<Matrix64> {
        let base = 2 + PARAMS_PER_LAYER * l;
        let [wq, wk, wv, wo, w1, w2] = self.layer(l) else { unreachable!() };

        // MLP branch
        grads[base + 5].axpy(1.0, &dx.transpose_a_matmul(&c.a)?)?;
        let mut du = dx.matmul(w2)?;
        for (g, &u) in du.as_mut_slice().iter_mut().zip(c.u.as_slice()) {
            if u <= 0.0 {
                *g = 0.0;
            }
        }
        grads[base + 4].axpy(1.0, &du.transpose_a_matmul(&c.hn)?)?;
        let dhn = du.matmul(w1)?;
        let dh = dx.add(&rms_back(&dhn, &c.hn, &c.r2))?;

        // attention branch
        grads[base + 3].axpy(1.0, &dh.transpose_a_matmul(&c.att)?)?;
        let datt = dh.matmul(wo)?;
        let (dq, dk, dv) = self.attention_backward(c, &datt);
        grads[base].axpy(1.0, &dq.transpose_a_matmul(&c.xn)?)?;
        grads[base + 1].axpy(1.0, &dk.transpose_a_matmul(&c.xn)?)?;
        grads[base + 2].axpy(1.0, &dv.transpose_a_matmul(&c.xn)?)?;
        let mut dxn = dq.matmul(wq)?;
        dxn.axpy(1.0, &dk.matmul(wk)?)?;
        dxn.axpy(1.0, &dv.matmul(wv)?)?;
        Ok(dh.add(&rms_back(&dxn, &c.xn, &c.r1))?)
    }

    fn attention_backward(&self, c: &LayerCache, datt: &Matrix64) -> (Matrix64, Matrix64, Matrix64) {
        let (t_len, d, hd) = (c.q.rows(), self.config.d_model, self.config.head_dim);
        let scale = 1.0 / (hd as f64).sqrt();
        let mut dq = Matrix64::zeros(t_len, d);
        let mut dk = Matrix64::zeros(t_len, d);
        let mut dv = Matrix64::zeros(t_len, d);
        let (qs, ks, vs, ds) = (c.q.as_slice(), c.k.as_slice(), c.v.as_slice(), datt.as_slice());
        let mut dp = vec![0.0; t_len];
        for h in 0..self.config.num_heads {
            let off = h * hd;
            let p = &c.probs[h * t_len * t_len..(h + 1) * t_len * t_len];
            for i in 0..t_len {
                let prow = &p[i * t_len..i * t_len + i + 1];
                let gi = &ds[i * d + off..i * d + off + hd];
                for (j, dpj) in dp[..=i].iter_mut().enumerate() {
                    *dpj = gi.iter().zip(&vs[j * d + off..j * d + off + hd]).map(|(a, b)| a * b).sum();
                    add_scaled(&mut dv.as_mut_slice()[j * d + off..j * d + off + hd], prow[j], gi);
                }
                let mean: f64 = prow.iter().zip(&dp[..=i]).map(|(a, b)| a * b).sum();
                let qi = &qs[i * d + off..i * d + off + hd];
                for j in 0..=i {
                    let dsij = prow[j] * (dp[j] - mean) * scale;
                    if dsij == 0.0 {
                        continue;
                    }
                    add_scaled(&mut dq.as_mut_slice()[i * d + off..i * d + off + hd], dsij, &ks[j * d + off..j * d + off + hd]);
                    add_scaled(&mut dk.as_mut_slice()[j * d + off..j * d + off + hd], dsij, qi);
                }
            }
        }
        (dq, dk, dv)
    }
}

fn normal(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Matrix64 {
    Matrix64::from_fn(rows, cols, |_, _| std * rng.sample::<f64, _>(StandardNormal))
}

fn rms_rows(x: &Matrix64) -> (Matrix64, Vec<f64>) {
    let mut y = x.clone();
    let n = x.cols() as f64;
    let mut r = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = y.row_mut(i);
        let ri = (row.iter().map(|v| v * v).sum::<f64>() / n + RMS_EPS).sqrt();
        row.iter_mut().for_each(|v| *v /= ri);
        r.push(ri);
    }
    (y, r)
}

fn rms_back(dy: &Matrix64, y: &Matrix64, r: &[f64]) -> Matrix64 {
    let n = y.cols() as f64;
    let mut dx = dy.clone();
    for (i, &ri) in r.iter().enumerate() {
        let yi = y.row(i);
        let m = dy.row(i).iter().zip(yi).map(|(a, b)| a * b).sum::<f64>() / n;
        for (g, &yv) in dx.row_mut(i).iter_mut().zip(yi) {
            *g = (*g - yv * m) / ri;
        }
    }
    dx
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln()
}

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for z in row.iter_mut() {
        *z = (*z - m).exp();
        sum += *z;
    }
    row.iter_mut().for_each(|z| *z /= sum);
}

fn add_to(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn add_scaled(dst: &mut [f64], s: f64, src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += s * b);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::TaskStream;

    fn tiny(task: Task) -> ToyModelConfig {
        ToyModelConfig {
            num_layers: 2,
            d_model: 8,
            num_heads: 2,
            head_dim: 4,
            vocab_size: if task == Task::CharLm { 32 } else { 7 },
            seq_len: 6,
            task,
            init_seed: 11,
        }
    }

    #[test]
    fn gradients_match_central_differences() {
        for task in [Task::Copy, Task::ModularAddition, Task::CharLm] {
            let cfg = tiny(task);
            let mut model = ToyModel::new(cfg.clone()).unwrap();
            // larger residual weights so every path carries signal
            for p in model.params_mut() {
                *p = p.scale(3.0);
            }
            let batch = TaskStream::training(task, cfg.vocab_size, cfg.seq_len, 4).unwrap().batch(3);
            let (_, grads) = model.loss_and_grad(&batch).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let h = 1e-5;
            for pi in 0..model.params().len() {
                for _ in 0..6 {
                    let (r, c) = model.params()[pi].shape();
                    let (i, j) = (rng.random_range(0..r), rng.random_range(0..c));
                    let orig = model.params()[pi][(i, j)];
                    model.params_mut()[pi][(i, j)] = orig + h;
                    let up = model.loss(&batch).unwrap();
                    model.params_mut()[pi][(i, j)] = orig - h;
                    let down = model.loss(&batch).unwrap();
                    model.params_mut()[pi][(i, j)] = orig;
                    let fd = (up - down) / (2.0 * h);
                    let an = grads[pi][(i, j)];
                    assert!(
                        (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                        "{:?} {} ({i},{j}): fd {fd} vs analytic {an}",
                        task,
                        model.info()[pi].name
                    );
                }
            }
        }
    }

    #[test]
    fn loss_matches_between_paths() {
        let cfg = tiny(Task::Copy);
        let model = ToyModel::new(cfg.clone()).unwrap();
        let batch = TaskStream::training(Task::Copy, 7, 6, 0).unwrap().batch(2);
        let (l, _) = model.loss_and_grad(&batch).unwrap();
        assert_eq!(l, model.loss(&batch).unwrap());
        // near-uniform predictions at init
        assert!((l - 7f64.ln()).abs() < 1.0, "{l}");
    }

    #[test]
    fn default_layout() {
        let m = ToyModel::new(ToyModelConfig::default()).unwrap();
        assert_eq!(m.params().len(), 2 + 6 * 2);
        assert_eq!(m.params()[m.index_of("layer1.wq").unwrap()].shape(), (96, 96));
        assert_eq!(m.params()[m.index_of("layer0.w1").unwrap()].shape(), (384, 96));
        assert_eq!(m.info()[m.index_of("layer0.wv").unwrap()].role, Role::Value);
    }

    #[test]
    fn config_validation_names_fields() {
        let mut c = ToyModelConfig::default();
        c.d_model = 95;
        assert!(c.validate().unwrap_err().to_string().contains("d_model"));
        let mut c = ToyModelConfig::default();
        c.num_heads = 0;
        assert!(c.validate().unwrap_err().to_string().contains("num_heads"));
        let c = ToyModelConfig { task: Task::CharLm, vocab_size: 16, ..Default::default() };
        assert!(c.validate().unwrap_err().to_string().contains("vocab_size"));
    }

    #[test]
    fn rejects_mismatched_samples() {
        let model = ToyModel::new(tiny(Task::Copy)).unwrap();
        let bad = Sample { tokens: vec![0; 5], targets: vec![Some(1); 5] };
        assert!(model.loss(&[bad]).is_err());
        let unscored = Sample { tokens: vec![0; 6], targets: vec![None; 6] };
        assert!(model.loss(&[unscored]).is_err());
    }
}
