//! Pre-LN causal transformer with adapter hooks and a hand-written backward
//! pass.
//!
//! Activations are stored row-per-token: a batch of sequences is flattened
//! into one `tokens × dim` matrix and attention runs per sequence segment.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::lora::{AdapterGrads, LoraAdapter, LoraPair};
use crate::model::config::ModelConfig;
use crate::model::TrainBatch;
use crate::params::{ParamSet, WeightSet};
use crate::scalar::Scalar;

const LN_EPS: f64 = 1e-5;

/// Read-only view of a transformer's weights.
#[derive(Clone, Copy)]
pub struct Transformer<'a, T> {
    pub config: &'a ModelConfig,
    pub weights: &'a WeightSet<T>,
}

/// Which gradients a backward pass should materialize.
#[derive(Clone, Debug, Default)]
pub struct GradRequest {
    /// Gradients for every adapter factor.
    pub adapter: bool,
    /// Backbone weights whose gradients are wanted. Empty means none are
    /// ever allocated.
    pub weights: BTreeSet<String>,
}

impl GradRequest {
    pub fn adapter_only() -> Self {
        GradRequest {
            adapter: true,
            weights: BTreeSet::new(),
        }
    }

    pub fn weights(names: impl IntoIterator<Item = String>) -> Self {
        GradRequest {
            adapter: false,
            weights: names.into_iter().collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub adapter: Option<AdapterGrads<T>>,
    pub weights: WeightSet<T>,
}

struct LinearCache<T> {
    /// Low-rank activation `x · downᵀ`, present when the projection is adapted.
    low: Option<Matrix<T>>,
}

struct NormCache<T> {
    xhat: Matrix<T>,
    inv_std: Vec<T>,
}

struct BlockCache<T> {
    ln1: NormCache<T>,
    a1: Matrix<T>,
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    lin: BTreeMap<&'static str, LinearCache<T>>,
    /// Attention probabilities, one `len × len` row-major block per
    /// (segment, head).
    probs: Vec<Vec<T>>,
    attn: Matrix<T>,
    ln2: NormCache<T>,
    a2: Matrix<T>,
    pre: Matrix<T>,
    act: Matrix<T>,
}

/// Everything the backward pass needs from a forward pass.
pub struct ForwardCache<T> {
    tokens: Vec<u32>,
    positions: Vec<usize>,
    segments: Vec<Range<usize>>,
    blocks: Vec<BlockCache<T>>,
    ln_f: NormCache<T>,
    af: Matrix<T>,
    head_lin: LinearCache<T>,
}

pub struct ForwardOutput<T> {
    /// `tokens × vocab`, rows in batch order.
    pub logits: Matrix<T>,
    /// Row range of each sequence in `logits`.
    pub segments: Vec<Range<usize>>,
    pub cache: ForwardCache<T>,
}

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + T::lit(0.044715) * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = T::lit(0.5);
    let a = T::lit(0.044715);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

fn layer_norm<T: Scalar>(x: &Matrix<T>, gain: &Matrix<T>, bias: &Matrix<T>) -> (Matrix<T>, NormCache<T>) {
    let (n, d) = x.shape();
    let dn = T::lit(d as f64);
    let mut xhat = Matrix::zeros(n, d);
    let mut out = Matrix::zeros(n, d);
    let mut inv_std = Vec::with_capacity(n);
    let (g, b) = (gain.as_slice(), bias.as_slice());
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let is = T::one() / (var + T::lit(LN_EPS)).sqrt();
        inv_std.push(is);
        let xh = xhat.row_mut(i);
        for j in 0..d {
            xh[j] = (row[j] - mean) * is;
        }
        let o = out.row_mut(i);
        for j in 0..d {
            o[j] = xh[j] * g[j] + b[j];
        }
    }
    (out, NormCache { xhat, inv_std })
}

/// Returns `dx`; accumulates gain/bias gradients when requested.
fn layer_norm_backward<T: Scalar>(
    dy: &Matrix<T>,
    cache: &NormCache<T>,
    gain: &Matrix<T>,
    grads: Option<(&mut Matrix<T>, &mut Matrix<T>)>,
) -> Matrix<T> {
    let (n, d) = dy.shape();
    let dn = T::lit(d as f64);
    let g = gain.as_slice();
    if let Some((dg, db)) = grads {
        for i in 0..n {
            let (dyr, xh) = (dy.row(i), cache.xhat.row(i));
            let (dgs, dbs) = (dg.as_mut_slice(), db.as_mut_slice());
            for j in 0..d {
                dgs[j] += dyr[j] * xh[j];
                dbs[j] += dyr[j];
            }
        }
    }
    let mut dx = Matrix::zeros(n, d);
    let mut dxhat = vec![T::zero(); d];
    for i in 0..n {
        let (dyr, xh) = (dy.row(i), cache.xhat.row(i));
        for j in 0..d {
            dxhat[j] = dyr[j] * g[j];
        }
        let mean_d = dxhat.iter().copied().sum::<T>() / dn;
        let mean_dx = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / dn;
        let is = cache.inv_std[i];
        let out = dx.row_mut(i);
        for j in 0..d {
            out[j] = is * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

fn add_row_bias<T: Scalar>(m: &mut Matrix<T>, bias: &Matrix<T>) {
    let b = bias.as_slice();
    for i in 0..m.rows() {
        for (x, &bb) in m.row_mut(i).iter_mut().zip(b) {
            *x += bb;
        }
    }
}

fn column_sums_into<T: Scalar>(m: &Matrix<T>, out: &mut Matrix<T>) {
    let o = out.as_mut_slice();
    for i in 0..m.rows() {
        for (acc, &x) in o.iter_mut().zip(m.row(i)) {
            *acc += x;
        }
    }
}

impl<'a, T: Scalar> Transformer<'a, T> {
    pub fn new(config: &'a ModelConfig, weights: &'a WeightSet<T>) -> Self {
        Transformer { config, weights }
    }

    fn w(&self, name: &str) -> &'a Matrix<T> {
        self.weights
            .get(name)
            .unwrap_or_else(|_| panic!("weight `{name}` missing from a validated backbone"))
    }

    /// `x · Wᵀ (+ factor · (x · downᵀ) · upᵀ)`.
    fn linear(
        &self,
        name: &str,
        x: &Matrix<T>,
        adapter: Option<&LoraAdapter<T>>,
    ) -> Result<(Matrix<T>, LinearCache<T>)> {
        let mut y = x.matmul_nt(self.w(name))?;
        let mut low = None;
        if let Some((pair, factor)) = adapter_pair(adapter, name) {
            let z = x.matmul_nt(&pair.down)?;
            let delta = z.matmul_nt(&pair.up)?;
            y.axpy(factor, &delta)?;
            low = Some(z);
        }
        Ok((y, LinearCache { low }))
    }

    fn check_batch(&self, batch: &TrainBatch) -> Result<()> {
        if batch.inputs.is_empty() {
            return Err(Error::Domain("empty batch".into()));
        }
        for seq in batch.inputs.iter().chain(&batch.targets) {
            if seq.is_empty() || seq.len() > self.config.context_len {
                return Err(Error::Domain(format!(
                    "sequence length {} outside 1..={}",
                    seq.len(),
                    self.config.context_len
                )));
            }
            if let Some(&bad) = seq.iter().find(|&&t| t as usize >= self.config.vocab_size) {
                return Err(Error::Domain(format!(
                    "token id {bad} out of range for vocabulary of {}",
                    self.config.vocab_size
                )));
            }
        }
        Ok(())
    }

    fn check_adapter(&self, adapter: Option<&LoraAdapter<T>>) -> Result<()> {
        let Some(a) = adapter else { return Ok(()) };
        for (name, pair) in &a.pairs {
            let w = self
                .weights
                .get(name)
                .map_err(|_| Error::config(format!("adapter targets unknown weight `{name}`")))?;
            if pair.target_shape() != w.shape() || pair.up.cols() != pair.down.rows() {
                return Err(Error::Shape {
                    op: "adapter",
                    left: w.shape(),
                    right: pair.target_shape(),
                });
            }
        }
        Ok(())
    }

    pub fn forward(&self, adapter: Option<&LoraAdapter<T>>, batch: &TrainBatch) -> Result<ForwardOutput<T>> {
        self.check_batch(batch)?;
        self.check_adapter(adapter)?;
        let cfg = self.config;
        let d = cfg.dim;

        let mut tokens = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(batch.inputs.len());
        for seq in &batch.inputs {
            let start = tokens.len();
            tokens.extend_from_slice(seq);
            positions.extend(0..seq.len());
            segments.push(start..tokens.len());
        }
        let n = tokens.len();

        let tok_emb = self.w("tok_emb");
        let pos_emb = self.w("pos_emb");
        let mut x = Matrix::zeros(n, d);
        for i in 0..n {
            let row = x.row_mut(i);
            let (te, pe) = (tok_emb.row(tokens[i] as usize), pos_emb.row(positions[i]));
            for j in 0..d {
                row[j] = te[j] + pe[j];
            }
        }

        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("blocks.{l}.{s}");
            let (a1, ln1) = layer_norm(&x, self.w(&p("ln1.gain")), self.w(&p("ln1.bias")));
            let mut lin = BTreeMap::new();
            let (q, cq) = self.linear(&p("attn.wq"), &a1, adapter)?;
            let (k, ck) = self.linear(&p("attn.wk"), &a1, adapter)?;
            let (v, cv) = self.linear(&p("attn.wv"), &a1, adapter)?;
            lin.insert("wq", cq);
            lin.insert("wk", ck);
            lin.insert("wv", cv);

            let (attn, probs) = self.attention(&q, &k, &v, &segments);
            let (proj, co) = self.linear(&p("attn.wo"), &attn, adapter)?;
            lin.insert("wo", co);
            x.add_assign(&proj)?;

            let (a2, ln2) = layer_norm(&x, self.w(&p("ln2.gain")), self.w(&p("ln2.bias")));
            let (mut pre, c1) = self.linear(&p("mlp.w1"), &a2, adapter)?;
            add_row_bias(&mut pre, self.w(&p("mlp.b1")));
            let act = pre.map(gelu);
            let (mut out, c2) = self.linear(&p("mlp.w2"), &act, adapter)?;
            add_row_bias(&mut out, self.w(&p("mlp.b2")));
            lin.insert("w1", c1);
            lin.insert("w2", c2);
            x.add_assign(&out)?;

            blocks.push(BlockCache {
                ln1,
                a1,
                q,
                k,
                v,
                lin,
                probs,
                attn,
                ln2,
                a2,
                pre,
                act,
            });
        }

        let (af, ln_f) = layer_norm(&x, self.w("ln_f.gain"), self.w("ln_f.bias"));
        let (logits, head_lin) = self.linear("head.w", &af, adapter)?;
        Ok(ForwardOutput {
            logits,
            segments: segments.clone(),
            cache: ForwardCache {
                tokens,
                positions,
                segments,
                blocks,
                ln_f,
                af,
                head_lin,
            },
        })
    }

    fn attention(
        &self,
        q: &Matrix<T>,
        k: &Matrix<T>,
        v: &Matrix<T>,
        segments: &[Range<usize>],
    ) -> (Matrix<T>, Vec<Vec<T>>) {
        let cfg = self.config;
        let hd = cfg.head_dim();
        let scale = T::one() / T::lit(hd as f64).sqrt();
        let mut out = Matrix::zeros(q.rows(), cfg.dim);
        let mut all_probs = Vec::with_capacity(segments.len() * cfg.n_heads);
        for seg in segments {
            let len = seg.len();
            for h in 0..cfg.n_heads {
                let cols = h * hd..(h + 1) * hd;
                let mut probs = vec![T::zero(); len * len];
                for i in 0..len {
                    let qi = &q.row(seg.start + i)[cols.clone()];
                    let row = &mut probs[i * len..(i + 1) * len];
                    let mut max = T::neg_infinity();
                    for j in 0..=i {
                        let s = crate::linalg::matrix_dot(qi, &k.row(seg.start + j)[cols.clone()]) * scale;
                        row[j] = s;
                        if s > max {
                            max = s;
                        }
                    }
                    let mut total = T::zero();
                    for r in row.iter_mut().take(i + 1) {
                        *r = (*r - max).exp();
                        total += *r;
                    }
                    for r in row.iter_mut().take(i + 1) {
                        *r /= total;
                    }
                    let o = &mut out.row_mut(seg.start + i)[cols.clone()];
                    for j in 0..=i {
                        let pij = row[j];
                        for (oc, &vc) in o.iter_mut().zip(&v.row(seg.start + j)[cols.clone()]) {
                            *oc += pij * vc;
                        }
                    }
                }
                all_probs.push(probs);
            }
        }
        (out, all_probs)
    }

    /// Gradients of the mean token cross-entropy.
    pub fn backward(
        &self,
        out: &ForwardOutput<T>,
        batch: &TrainBatch,
        adapter: Option<&LoraAdapter<T>>,
        request: &GradRequest,
    ) -> Result<Gradients<T>> {
        let cache = &out.cache;
        let cfg = self.config;
        let d = cfg.dim;
        let n = cache.tokens.len();

        for name in &request.weights {
            if !self.weights.contains(name) {
                return Err(Error::config(format!("gradient requested for unknown weight `{name}`")));
            }
        }
        let mut wgrads: WeightSet<T> = request
            .weights
            .iter()
            .map(|k| {
                let (r, c) = self.w(k).shape();
                (k.clone(), Matrix::zeros(r, c))
            })
            .collect();
        let mut agrads = match (request.adapter, adapter) {
            (true, Some(a)) => Some(a.zeros_like()),
            _ => None,
        };
        let mut ctx = BackCtx {
            model: self,
            adapter,
            agrads: agrads.as_mut(),
            wgrads: &mut wgrads,
        };

        let mut dlogits = crate::model::loss::softmax_rows(&out.logits);
        let inv_n = T::one() / T::lit(n as f64);
        let targets: Vec<u32> = batch.targets.iter().flatten().copied().collect();
        for (i, &t) in targets.iter().enumerate() {
            let row = dlogits.row_mut(i);
            row[t as usize] -= T::one();
            for x in row.iter_mut() {
                *x *= inv_n;
            }
        }

        let daf = ctx.linear_backward("head.w", &dlogits, &cache.af, &cache.head_lin)?;
        let mut dx = ctx.norm_backward("ln_f", &daf, &cache.ln_f);

        for l in (0..cfg.n_layers).rev() {
            let b = &cache.blocks[l];
            let p = |s: &str| format!("blocks.{l}.{s}");

            // MLP branch; the residual passes dx through unchanged
            if let Ok(g) = ctx.wgrads.get_mut(&p("mlp.b2")) {
                column_sums_into(&dx, g);
            }
            let mut dact = ctx.linear_backward(&p("mlp.w2"), &dx, &b.act, &b.lin["w2"])?;
            for (da, &pre) in dact.as_mut_slice().iter_mut().zip(b.pre.as_slice()) {
                *da *= gelu_grad(pre);
            }
            if let Ok(g) = ctx.wgrads.get_mut(&p("mlp.b1")) {
                column_sums_into(&dact, g);
            }
            let da2 = ctx.linear_backward(&p("mlp.w1"), &dact, &b.a2, &b.lin["w1"])?;
            dx.add_assign(&ctx.norm_backward(&p("ln2"), &da2, &b.ln2))?;

            // attention branch
            let dattn = ctx.linear_backward(&p("attn.wo"), &dx, &b.attn, &b.lin["wo"])?;
            let (dq, dk, dv) = self.attention_backward(&dattn, b, &cache.segments);
            let mut da1 = ctx.linear_backward(&p("attn.wq"), &dq, &b.a1, &b.lin["wq"])?;
            da1.add_assign(&ctx.linear_backward(&p("attn.wk"), &dk, &b.a1, &b.lin["wk"])?)?;
            da1.add_assign(&ctx.linear_backward(&p("attn.wv"), &dv, &b.a1, &b.lin["wv"])?)?;
            dx.add_assign(&ctx.norm_backward(&p("ln1"), &da1, &b.ln1))?;
        }

        if let Ok(g) = ctx.wgrads.get_mut("tok_emb") {
            for i in 0..n {
                let row = g.row_mut(cache.tokens[i] as usize);
                for (a, &b) in row.iter_mut().zip(dx.row(i)) {
                    *a += b;
                }
            }
        }
        if let Ok(g) = ctx.wgrads.get_mut("pos_emb") {
            for i in 0..n {
                let row = g.row_mut(cache.positions[i]);
                for (a, &b) in row.iter_mut().zip(dx.row(i)) {
                    *a += b;
                }
            }
        }
        debug_assert_eq!(dx.cols(), d);
        Ok(Gradients {
            adapter: agrads,
            weights: wgrads,
        })
    }

    fn attention_backward(
        &self,
        dout: &Matrix<T>,
        b: &BlockCache<T>,
        segments: &[Range<usize>],
    ) -> (Matrix<T>, Matrix<T>, Matrix<T>) {
        let cfg = self.config;
        let hd = cfg.head_dim();
        let scale = T::one() / T::lit(hd as f64).sqrt();
        let n = b.q.rows();
        let (mut dq, mut dk, mut dv) = (
            Matrix::zeros(n, cfg.dim),
            Matrix::zeros(n, cfg.dim),
            Matrix::zeros(n, cfg.dim),
        );
        let mut dp = Vec::new();
        for (s, seg) in segments.iter().enumerate() {
            let len = seg.len();
            for h in 0..cfg.n_heads {
                let probs = &b.probs[s * cfg.n_heads + h];
                let cols = h * hd..(h + 1) * hd;
                for i in 0..len {
                    let gi = seg.start + i;
                    let doi = &dout.row(gi)[cols.clone()];
                    let prow = &probs[i * len..(i + 1) * len];
                    dp.clear();
                    let mut weighted = T::zero();
                    for j in 0..=i {
                        let gj = seg.start + j;
                        let v = crate::linalg::matrix_dot(doi, &b.v.row(gj)[cols.clone()]);
                        dp.push(v);
                        weighted += v * prow[j];
                        let dvj = &mut dv.row_mut(gj)[cols.clone()];
                        for (a, &g) in dvj.iter_mut().zip(doi) {
                            *a += prow[j] * g;
                        }
                    }
                    for j in 0..=i {
                        let gj = seg.start + j;
                        let ds = prow[j] * (dp[j] - weighted) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        {
                            let kj = &b.k.row(gj)[cols.clone()];
                            let dqi = &mut dq.row_mut(gi)[cols.clone()];
                            for (a, &kk) in dqi.iter_mut().zip(kj) {
                                *a += ds * kk;
                            }
                        }
                        let qi = &b.q.row(gi)[cols.clone()];
                        let dkj = &mut dk.row_mut(gj)[cols.clone()];
                        for (a, &qq) in dkj.iter_mut().zip(qi) {
                            *a += ds * qq;
                        }
                    }
                }
            }
        }
        (dq, dk, dv)
    }
}

fn adapter_pair<'b, T: Scalar>(adapter: Option<&'b LoraAdapter<T>>, name: &str) -> Option<(&'b LoraPair<T>, T)> {
    let a = adapter?;
    let pair = a.pairs.get(name)?;
    Some((pair, T::lit(a.config.scaling / pair.rank() as f64)))
}

struct BackCtx<'m, 'a, T> {
    model: &'m Transformer<'a, T>,
    adapter: Option<&'m LoraAdapter<T>>,
    agrads: Option<&'m mut AdapterGrads<T>>,
    wgrads: &'m mut WeightSet<T>,
}

impl<T: Scalar> BackCtx<'_, '_, T> {
    /// Backward of `y = x · Wᵀ (+ factor · z · upᵀ, z = x · downᵀ)`;
    /// returns `dx`.
    fn linear_backward(
        &mut self,
        name: &str,
        dy: &Matrix<T>,
        x: &Matrix<T>,
        cache: &LinearCache<T>,
    ) -> Result<Matrix<T>> {
        let w = self.model.w(name);
        let mut dx = dy.matmul(w)?;
        if let Ok(g) = self.wgrads.get_mut(name) {
            g.add_assign(&dy.matmul_tn(x)?)?;
        }
        if let (Some((pair, factor)), Some(z)) = (adapter_pair(self.adapter, name), cache.low.as_ref()) {
            let mut dz = dy.matmul(&pair.up)?;
            dz.scale_in_place(factor);
            dx.add_assign(&dz.matmul(&pair.down)?)?;
            if let Some(grads) = self.agrads.as_deref_mut() {
                let gp = grads.pairs.get_mut(name).expect("gradient layout mirrors adapter");
                gp.up.axpy(factor, &dy.matmul_tn(z)?)?;
                gp.down.add_assign(&dz.matmul_tn(x)?)?;
            }
        }
        Ok(dx)
    }

    fn norm_backward(&mut self, prefix: &str, dy: &Matrix<T>, cache: &NormCache<T>) -> Matrix<T> {
        let gain_name = format!("{prefix}.gain");
        let bias_name = format!("{prefix}.bias");
        let gain = self.model.w(&gain_name);
        if !self.wgrads.contains(&gain_name) && !self.wgrads.contains(&bias_name) {
            return layer_norm_backward(dy, cache, gain, None);
        }
        let (r, c) = gain.shape();
        let (mut g, mut b) = (Matrix::zeros(r, c), Matrix::zeros(r, c));
        let dx = layer_norm_backward(dy, cache, gain, Some((&mut g, &mut b)));
        for (name, grad) in [(&gain_name, g), (&bias_name, b)] {
            if let Ok(acc) = self.wgrads.get_mut(name) {
                acc.add_assign(&grad).expect("same shape");
            }
        }
        dx
    }
}
