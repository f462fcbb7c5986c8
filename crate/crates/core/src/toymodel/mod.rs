//! Small decoder-only transformer with LoRA adapters on the attention
//! projections, written out with explicit reverse-mode gradients.
//!
//! Linear maps use `y = x Wᵀ` with `W` stored `d_out × d_in`, so an adapted
//! projection is `x (W₀ + B Aᵀ)ᵀ`.

pub mod checkpoint;
pub mod tokenizer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{AdapterGrad, LoraAdapter, Projection, Site};
use crate::numerics::{frobenius_norm, softmax_in_place, Matrix};
use crate::segmenter::TokenId;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use tokenizer::Tokenizer;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub lora_rank: usize,
    pub lora_sites: Vec<Projection>,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_ff: 64,
            max_seq: 128,
            lora_rank: 2,
            lora_sites: Projection::ALL.to_vec(),
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size < 5 {
            return bad(format!("vocab_size {} too small", self.vocab_size));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.n_layers == 0 || self.d_ff == 0 {
            return bad("n_layers and d_ff must be positive".into());
        }
        if self.max_seq < 2 {
            return bad(format!("max_seq {} < 2", self.max_seq));
        }
        if self.lora_rank == 0 || self.lora_rank > self.d_model {
            return bad(format!("lora_rank {} outside 1..={}", self.lora_rank, self.d_model));
        }
        if self.lora_sites.is_empty() {
            return bad("lora_sites is empty".into());
        }
        let mut sites = self.lora_sites.clone();
        sites.sort();
        sites.dedup();
        if sites.len() != self.lora_sites.len() {
            return bad("duplicate lora site".into());
        }
        if !(self.init_std > 0.0) {
            return bad("init_std must be positive".into());
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Matrix,
    pub ln1_b: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln2_g: Matrix,
    pub ln2_b: Matrix,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl LayerParams {
    fn zeros(c: &ModelConfig) -> Self {
        let (d, f) = (c.d_model, c.d_ff);
        Self {
            ln1_g: Matrix::zeros(1, d),
            ln1_b: Matrix::zeros(1, d),
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
            ln2_g: Matrix::zeros(1, d),
            ln2_b: Matrix::zeros(1, d),
            w1: Matrix::zeros(f, d),
            b1: Matrix::zeros(1, f),
            w2: Matrix::zeros(d, f),
            b2: Matrix::zeros(1, d),
        }
    }

    fn named(&self) -> [(&'static str, &Matrix); 12] {
        [
            ("ln1_g", &self.ln1_g),
            ("ln1_b", &self.ln1_b),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("ln2_g", &self.ln2_g),
            ("ln2_b", &self.ln2_b),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Matrix); 12] {
        [
            ("ln1_g", &mut self.ln1_g),
            ("ln1_b", &mut self.ln1_b),
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("ln2_g", &mut self.ln2_g),
            ("ln2_b", &mut self.ln2_b),
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }

    pub fn proj(&self, p: Projection) -> &Matrix {
        match p {
            Projection::Q => &self.wq,
            Projection::K => &self.wk,
            Projection::V => &self.wv,
        }
    }

    fn proj_mut(&mut self, p: Projection) -> &mut Matrix {
        match p {
            Projection::Q => &mut self.wq,
            Projection::K => &mut self.wk,
            Projection::V => &mut self.wv,
        }
    }
}

/// Frozen base weights. Also used as the gradient container for them.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseParams {
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Matrix,
    pub lnf_b: Matrix,
    pub head: Matrix,
}

impl BaseParams {
    pub fn zeros(c: &ModelConfig) -> Self {
        Self {
            tok_emb: Matrix::zeros(c.vocab_size, c.d_model),
            pos_emb: Matrix::zeros(c.max_seq, c.d_model),
            layers: (0..c.n_layers).map(|_| LayerParams::zeros(c)).collect(),
            lnf_g: Matrix::zeros(1, c.d_model),
            lnf_b: Matrix::zeros(1, c.d_model),
            head: Matrix::zeros(c.vocab_size, c.d_model),
        }
    }

    pub fn named(&self) -> Vec<(String, &Matrix)> {
        let mut v = vec![("tok_emb".to_string(), &self.tok_emb), ("pos_emb".to_string(), &self.pos_emb)];
        for (l, layer) in self.layers.iter().enumerate() {
            v.extend(layer.named().into_iter().map(|(n, m)| (format!("layers.{l}.{n}"), m)));
        }
        v.push(("lnf_g".to_string(), &self.lnf_g));
        v.push(("lnf_b".to_string(), &self.lnf_b));
        v.push(("head".to_string(), &self.head));
        v
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut v = vec![("tok_emb".to_string(), &mut self.tok_emb), ("pos_emb".to_string(), &mut self.pos_emb)];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            v.extend(layer.named_mut().into_iter().map(|(n, m)| (format!("layers.{l}.{n}"), m)));
        }
        v.push(("lnf_g".to_string(), &mut self.lnf_g));
        v.push(("lnf_b".to_string(), &mut self.lnf_b));
        v.push(("head".to_string(), &mut self.head));
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub tokenizer: Tokenizer,
    pub base: BaseParams,
    /// Layer-major, sites in `config.lora_sites` order.
    pub adapters: Vec<LoraAdapter>,
}

pub fn init_model(config: ModelConfig) -> Result<Model> {
    init_model_with_tokenizer(config, Tokenizer::default())
}

pub fn init_model_with_tokenizer(config: ModelConfig, tokenizer: Tokenizer) -> Result<Model> {
    config.validate()?;
    if tokenizer.vocab_size() > config.vocab_size {
        return Err(Error::Config(format!(
            "tokenizer needs {} ids but vocab_size is {}",
            tokenizer.vocab_size(),
            config.vocab_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut base = BaseParams::zeros(&config);
    for (name, m) in base.named_mut() {
        let leaf = name.rsplit('.').next().unwrap_or(&name);
        if leaf.ends_with("_g") {
            m.data_mut().fill(1.0);
        } else if leaf.ends_with("_b") || leaf == "b1" || leaf == "b2" {
            // zero bias
        } else {
            m.data_mut().iter_mut().for_each(|x| *x = normal.sample(&mut rng));
        }
    }
    let (d, r) = (config.d_model, config.lora_rank);
    let mut adapters = Vec::new();
    for layer in 0..config.n_layers {
        for &proj in &config.lora_sites {
            let a = Matrix::from_fn(d, r, |_, _| normal.sample(&mut rng));
            adapters.push(LoraAdapter::new(a, Matrix::zeros(d, r), Site { layer, proj })?);
        }
    }
    Ok(Model { config, tokenizer, base, adapters })
}

struct LnCache {
    xhat: Matrix,
    rstd: Vec<f64>,
}

fn layer_norm(x: &Matrix, g: &Matrix, b: &Matrix) -> (Matrix, LnCache) {
    let (t, d) = x.shape();
    let mut xhat = Matrix::zeros(t, d);
    let mut y = Matrix::zeros(t, d);
    let mut rstd = Vec::with_capacity(t);
    for i in 0..t {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(rs);
        for k in 0..d {
            let xh = (row[k] - mean) * rs;
            xhat[(i, k)] = xh;
            y[(i, k)] = g.data()[k] * xh + b.data()[k];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(dy: &Matrix, g: &Matrix, cache: &LnCache, dg: &mut Matrix, db: &mut Matrix) -> Matrix {
    let (t, d) = dy.shape();
    let mut dx = Matrix::zeros(t, d);
    let mut dxhat = vec![0.0; d];
    for i in 0..t {
        let xh = cache.xhat.row(i);
        let dyr = dy.row(i);
        for k in 0..d {
            dg.data_mut()[k] += dyr[k] * xh[k];
            db.data_mut()[k] += dyr[k];
            dxhat[k] = dyr[k] * g.data()[k];
        }
        let m1 = dxhat.iter().sum::<f64>() / d as f64;
        let m2 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for k in 0..d {
            dx[(i, k)] = cache.rstd[i] * (dxhat[k] - m1 - xh[k] * m2);
        }
    }
    dx
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn col_block(m: &Matrix, start: usize, width: usize) -> Matrix {
    Matrix::from_fn(m.rows(), width, |i, j| m[(i, start + j)])
}

fn add_col_block(dst: &mut Matrix, src: &Matrix, start: usize) {
    for i in 0..src.rows() {
        for (o, x) in dst.row_mut(i)[start..start + src.cols()].iter_mut().zip(src.row(i)) {
            *o += x;
        }
    }
}

fn add_bias(m: &mut Matrix, b: &Matrix) {
    for i in 0..m.rows() {
        for (o, x) in m.row_mut(i).iter_mut().zip(b.data()) {
            *o += x;
        }
    }
}

fn col_sums_into(dst: &mut Matrix, m: &Matrix) {
    for (o, s) in dst.data_mut().iter_mut().zip(m.col_sums()) {
        *o += s;
    }
}

struct LayerCache {
    ln1: LnCache,
    a_in: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Effective projection matrices for Q, K, V.
    w_eff: [Matrix; 3],
    probs: Vec<Matrix>,
    o: Matrix,
    ln2: LnCache,
    m_in: Matrix,
    f: Matrix,
    g: Matrix,
}

/// Teacher-forced pass over `[src ; SEP ; tgt[..n-1]]`.
///
/// Position `src_len + i` predicts `tgt[i]`, so the hidden state and attention
/// row for target token `i` live at that index.
pub struct ForwardTrace {
    /// Final (post-norm, pre-logit) hidden states, `T × d_model`.
    pub hidden_final: Matrix,
    /// `attentions[layer][head]`, `T × T`, causal.
    pub attentions: Vec<Vec<Matrix>>,
    /// Per-layer value vectors, `T × d_model` (head `h` owns columns `h·d_h..`).
    pub values: Vec<Matrix>,
    pub logits: Matrix,
    pub ce: f64,
    pub src_len: usize,
    pub tgt: Vec<TokenId>,
    tokens: Vec<TokenId>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
}

impl ForwardTrace {
    /// Row of the hidden/attention matrices aligned with target token `i`.
    pub fn tgt_offset(&self) -> usize {
        self.src_len
    }

    pub fn tgt_hidden(&self) -> Matrix {
        let off = self.tgt_offset();
        Matrix::from_fn(self.tgt.len(), self.hidden_final.cols(), |i, k| self.hidden_final[(off + i, k)])
    }

    pub fn tgt_logits(&self) -> Matrix {
        let off = self.tgt_offset();
        Matrix::from_fn(self.tgt.len(), self.logits.cols(), |i, k| self.logits[(off + i, k)])
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    /// `∂ce/∂logits`, zero outside target rows.
    pub fn ce_grad_logits(&self) -> Matrix {
        let mut d = Matrix::zeros(self.logits.rows(), self.logits.cols());
        let n = self.tgt.len() as f64;
        for (i, &y) in self.tgt.iter().enumerate() {
            let row = self.src_len + i;
            let p = softmax_in_place(self.logits.row(row).to_vec());
            for (o, pk) in d.row_mut(row).iter_mut().zip(p) {
                *o = pk / n;
            }
            d[(row, y as usize)] -= 1.0 / n;
        }
        d
    }
}

/// Gradients for every parameter of a [`Model`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub base: BaseParams,
    pub adapters: Vec<AdapterGrad>,
}

impl Grads {
    pub fn zeros(model: &Model) -> Self {
        Self { base: BaseParams::zeros(&model.config), adapters: model.adapters.iter().map(AdapterGrad::zeros_like).collect() }
    }

    pub fn add_adapter_grads(&mut self, other: &[AdapterGrad], scale: f64) {
        for (g, o) in self.adapters.iter_mut().zip(other) {
            g.a.add_scaled(&o.a, scale);
            g.b.add_scaled(&o.b, scale);
        }
    }

    pub fn add(&mut self, other: &Grads) {
        self.add_adapter_grads(&other.adapters, 1.0);
        for ((_, m), (_, o)) in self.base.named_mut().into_iter().zip(other.base.named()) {
            m.add_assign(o);
        }
    }

    pub fn adapters_finite(&self) -> bool {
        self.adapters.iter().all(|g| g.a.is_finite() && g.b.is_finite())
    }
}

fn ce_of(logits: &Matrix, src_len: usize, tgt: &[TokenId]) -> f64 {
    let mut total = 0.0;
    for (i, &y) in tgt.iter().enumerate() {
        let row = logits.row(src_len + i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        total += lse - row[y as usize];
    }
    total / tgt.len() as f64
}

impl Model {
    pub fn adapter_index(&self, layer: usize, proj: Projection) -> Option<usize> {
        self.adapters.iter().position(|a| a.site.layer == layer && a.site.proj == proj)
    }

    /// `W₀ + B Aᵀ` for one projection.
    pub fn effective_weight(&self, layer: usize, proj: Projection) -> Matrix {
        let mut w = self.base.layers[layer].proj(proj).clone();
        if let Some(k) = self.adapter_index(layer, proj) {
            w.add_assign(&self.adapters[k].delta());
        }
        w
    }

    /// `h (W₀ + B Aᵀ)ᵀ`.
    pub fn project(&self, layer: usize, proj: Projection, h: &Matrix) -> Matrix {
        h.matmul_t(&self.effective_weight(layer, proj))
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        self.tokenizer.encode(text)
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::InvalidParameter(format!("token id {t} outside vocabulary")));
        }
        if tokens.len() > self.config.max_seq {
            return Err(Error::SequenceTooLong { len: tokens.len(), max: self.config.max_seq });
        }
        Ok(())
    }

    fn run(&self, tokens: &[TokenId]) -> (Matrix, Matrix, Vec<LayerCache>, LnCache) {
        let c = &self.config;
        let (t, d, dh) = (tokens.len(), c.d_model, c.d_head());
        let scale = 1.0 / (dh as f64).sqrt();
        let mut h = Matrix::from_fn(t, d, |i, k| self.base.tok_emb[(tokens[i] as usize, k)] + self.base.pos_emb[(i, k)]);
        let mut caches = Vec::with_capacity(c.n_layers);
        for (l, p) in self.base.layers.iter().enumerate() {
            let (a_in, ln1) = layer_norm(&h, &p.ln1_g, &p.ln1_b);
            let w_eff = [
                self.effective_weight(l, Projection::Q),
                self.effective_weight(l, Projection::K),
                self.effective_weight(l, Projection::V),
            ];
            let q = a_in.matmul_t(&w_eff[0]);
            let k = a_in.matmul_t(&w_eff[1]);
            let v = a_in.matmul_t(&w_eff[2]);
            let mut o = Matrix::zeros(t, d);
            let mut probs = Vec::with_capacity(c.n_heads);
            for hd in 0..c.n_heads {
                let (qh, kh, vh) = (col_block(&q, hd * dh, dh), col_block(&k, hd * dh, dh), col_block(&v, hd * dh, dh));
                let s = qh.matmul_t(&kh);
                let mut pm = Matrix::zeros(t, t);
                for i in 0..t {
                    let row: Vec<f64> = (0..=i).map(|j| s[(i, j)] * scale).collect();
                    pm.row_mut(i)[..=i].copy_from_slice(&softmax_in_place(row));
                }
                add_col_block(&mut o, &pm.matmul(&vh), hd * dh);
                probs.push(pm);
            }
            h.add_assign(&o.matmul_t(&p.wo));
            let (m_in, ln2) = layer_norm(&h, &p.ln2_g, &p.ln2_b);
            let mut f = m_in.matmul_t(&p.w1);
            add_bias(&mut f, &p.b1);
            let g = Matrix::from_fn(t, c.d_ff, |i, j| gelu(f[(i, j)]));
            let mut m_out = g.matmul_t(&p.w2);
            add_bias(&mut m_out, &p.b2);
            h.add_assign(&m_out);
            caches.push(LayerCache { ln1, a_in, q, k, v, w_eff, probs, o, ln2, m_in, f, g });
        }
        let (hf, lnf) = layer_norm(&h, &self.base.lnf_g, &self.base.lnf_b);
        let logits = hf.matmul_t(&self.base.head);
        (hf, logits, caches, lnf)
    }

    /// Logits for an arbitrary token sequence (no target bookkeeping).
    pub fn logits(&self, tokens: &[TokenId]) -> Result<Matrix> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("logits"));
        }
        self.check_tokens(tokens)?;
        Ok(self.run(tokens).1)
    }

    pub fn forward_teacher_forced(&self, src: &[TokenId], tgt: &[TokenId]) -> Result<ForwardTrace> {
        if tgt.is_empty() {
            return Err(Error::EmptyInput("forward_teacher_forced: target"));
        }
        if src.len() + tgt.len() > self.config.max_seq {
            return Err(Error::SequenceTooLong { len: src.len() + tgt.len(), max: self.config.max_seq });
        }
        let mut tokens = Vec::with_capacity(src.len() + tgt.len());
        tokens.extend_from_slice(src);
        tokens.push(tokenizer::SEP);
        tokens.extend_from_slice(&tgt[..tgt.len() - 1]);
        self.check_tokens(&tokens)?;
        self.check_tokens(tgt)?;
        let (hidden_final, logits, layers, lnf) = self.run(&tokens);
        let ce = ce_of(&logits, src.len(), tgt);
        Ok(ForwardTrace {
            attentions: layers.iter().map(|l| l.probs.clone()).collect(),
            values: layers.iter().map(|l| l.v.clone()).collect(),
            hidden_final,
            logits,
            ce,
            src_len: src.len(),
            tgt: tgt.to_vec(),
            tokens,
            layers,
            lnf,
        })
    }

    /// Reverse pass given upstream gradients on the logits and, optionally,
    /// directly on the final hidden states.
    pub fn backward(&self, trace: &ForwardTrace, d_logits: &Matrix, d_hidden: Option<&Matrix>) -> Result<Grads> {
        let c = &self.config;
        let t = trace.tokens.len();
        if d_logits.shape() != trace.logits.shape() {
            return Err(Error::shape(format!("d_logits {:?} vs logits {:?}", d_logits.shape(), trace.logits.shape())));
        }
        if let Some(dh) = d_hidden {
            if dh.shape() != trace.hidden_final.shape() {
                return Err(Error::shape(format!("d_hidden {:?} vs hidden {:?}", dh.shape(), trace.hidden_final.shape())));
            }
        }
        let (dh_w, scale) = (c.d_head(), 1.0 / (c.d_head() as f64).sqrt());
        let mut g = Grads::zeros(self);

        g.base.head = d_logits.t_matmul(&trace.hidden_final);
        let mut dhf = d_logits.matmul(&self.base.head);
        if let Some(dh) = d_hidden {
            dhf.add_assign(dh);
        }
        let gb = &mut g.base;
        let mut dh = layer_norm_backward(&dhf, &self.base.lnf_g, &trace.lnf, &mut gb.lnf_g, &mut gb.lnf_b);

        for l in (0..c.n_layers).rev() {
            let p = &self.base.layers[l];
            let cache = &trace.layers[l];
            let gl = &mut g.base.layers[l];

            // MLP
            gl.w2.add_assign(&dh.t_matmul(&cache.g));
            col_sums_into(&mut gl.b2, &dh);
            let dg = dh.matmul(&p.w2);
            let df = Matrix::from_fn(t, c.d_ff, |i, j| dg[(i, j)] * gelu_grad(cache.f[(i, j)]));
            gl.w1.add_assign(&df.t_matmul(&cache.m_in));
            col_sums_into(&mut gl.b1, &df);
            let dm_in = df.matmul(&p.w1);
            dh.add_assign(&layer_norm_backward(&dm_in, &p.ln2_g, &cache.ln2, &mut gl.ln2_g, &mut gl.ln2_b));

            // attention
            gl.wo.add_assign(&dh.t_matmul(&cache.o));
            let d_o = dh.matmul(&p.wo);
            let mut dq = Matrix::zeros(t, c.d_model);
            let mut dk = Matrix::zeros(t, c.d_model);
            let mut dv = Matrix::zeros(t, c.d_model);
            for hd in 0..c.n_heads {
                let off = hd * dh_w;
                let pm = &cache.probs[hd];
                let (qh, kh, vh) = (col_block(&cache.q, off, dh_w), col_block(&cache.k, off, dh_w), col_block(&cache.v, off, dh_w));
                let doh = col_block(&d_o, off, dh_w);
                let dp = doh.matmul_t(&vh);
                add_col_block(&mut dv, &pm.t_matmul(&doh), off);
                let mut ds = Matrix::zeros(t, t);
                for i in 0..t {
                    let inner: f64 = (0..=i).map(|j| dp[(i, j)] * pm[(i, j)]).sum();
                    for j in 0..=i {
                        ds[(i, j)] = pm[(i, j)] * (dp[(i, j)] - inner) * scale;
                    }
                }
                add_col_block(&mut dq, &ds.matmul(&kh), off);
                add_col_block(&mut dk, &ds.t_matmul(&qh), off);
            }
            let mut da_in = Matrix::zeros(t, c.d_model);
            for (idx, (proj, dproj)) in [(Projection::Q, &dq), (Projection::K, &dk), (Projection::V, &dv)].into_iter().enumerate() {
                let dw = dproj.t_matmul(&cache.a_in);
                if let Some(k) = self.adapter_index(l, proj) {
                    let ad = &self.adapters[k];
                    g.adapters[k].b.add_assign(&dw.matmul(&ad.a));
                    g.adapters[k].a.add_assign(&dw.t_matmul(&ad.b));
                }
                let gl = &mut g.base.layers[l];
                gl.proj_mut(proj).add_assign(&dw);
                da_in.add_assign(&dproj.matmul(&cache.w_eff[idx]));
            }
            let gl = &mut g.base.layers[l];
            dh.add_assign(&layer_norm_backward(&da_in, &p.ln1_g, &cache.ln1, &mut gl.ln1_g, &mut gl.ln1_b));
        }

        for i in 0..t {
            let tok = trace.tokens[i] as usize;
            for k in 0..c.d_model {
                g.base.tok_emb[(tok, k)] += dh[(i, k)];
                g.base.pos_emb[(i, k)] += dh[(i, k)];
            }
        }
        Ok(g)
    }

    /// Greedy decoding after `[src ; SEP]`. The returned tokens include a
    /// trailing EOS when one was produced.
    pub fn generate(&self, src: &[TokenId], max_new: usize) -> Result<Vec<TokenId>> {
        if max_new == 0 {
            return Err(Error::InvalidParameter("max_new must be at least 1".into()));
        }
        let mut seq = src.to_vec();
        seq.push(tokenizer::SEP);
        self.check_tokens(&seq)?;
        let mut out = Vec::new();
        while out.len() < max_new && seq.len() <= self.config.max_seq {
            let logits = self.run(&seq).1;
            let last = logits.row(logits.rows() - 1);
            let mut best = 0;
            for (j, &x) in last.iter().enumerate() {
                if x > last[best] {
                    best = j;
                }
            }
            let tok = best as TokenId;
            out.push(tok);
            if tok == tokenizer::EOS || seq.len() == self.config.max_seq {
                break;
            }
            seq.push(tok);
        }
        Ok(out)
    }

    pub fn generate_text(&self, src: &str, max_new: usize) -> Result<String> {
        Ok(self.tokenizer.decode(&self.generate(&self.encode(src), max_new)?))
    }

    pub fn lora_delta_norms(&self) -> LoraNorms {
        LoraNorms::of(&self.adapters)
    }

    pub fn apply_adapter_step(&mut self, grads: &[AdapterGrad], lr: f64) {
        for (ad, g) in self.adapters.iter_mut().zip(grads) {
            ad.a.add_scaled(&g.a, -lr);
            ad.b.add_scaled(&g.b, -lr);
        }
    }

    pub fn apply_base_step(&mut self, grads: &BaseParams, lr: f64) {
        for ((_, m), (_, g)) in self.base.named_mut().into_iter().zip(grads.named()) {
            m.add_scaled(g, -lr);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteNorms {
    pub site: Site,
    pub a_f: f64,
    pub b_f: f64,
    pub delta_f: f64,
    pub prod: f64,
}

/// Scale of the adapters: per-site norms and their sums.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraNorms {
    pub sites: Vec<SiteNorms>,
    pub a_f_sum: f64,
    pub b_f_sum: f64,
    /// `Σ |‖A‖ − ‖B‖|`
    pub delta_f_sum: f64,
    pub prod_f_sum: f64,
}

/// Both norms must exceed this for a site to enter the ratio monitor.
pub const RATIO_NORM_FLOOR: f64 = 1e-6;

impl LoraNorms {
    pub fn of(adapters: &[LoraAdapter]) -> Self {
        let sites: Vec<SiteNorms> = adapters
            .iter()
            .map(|ad| {
                let (a_f, b_f) = ad.norms();
                SiteNorms { site: ad.site, a_f, b_f, delta_f: frobenius_norm(&ad.delta()), prod: a_f * b_f }
            })
            .collect();
        Self {
            a_f_sum: sites.iter().map(|s| s.a_f).sum(),
            b_f_sum: sites.iter().map(|s| s.b_f).sum(),
            delta_f_sum: sites.iter().map(|s| (s.a_f - s.b_f).abs()).sum(),
            prod_f_sum: sites.iter().map(|s| s.prod).sum(),
            sites,
        }
    }

    /// Largest `max(‖A‖/‖B‖, ‖B‖/‖A‖)` over sites where both norms exceed
    /// [`RATIO_NORM_FLOOR`]; `None` if no site qualifies.
    pub fn max_ab_ratio(&self) -> Option<f64> {
        self.sites
            .iter()
            .filter(|s| s.a_f > RATIO_NORM_FLOOR && s.b_f > RATIO_NORM_FLOOR)
            .map(|s| (s.a_f / s.b_f).max(s.b_f / s.a_f))
            .reduce(f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error};
    use rand::Rng;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig { d_model: 8, n_layers: 1, n_heads: 2, d_ff: 16, max_seq: 24, lora_rank: 1, seed: 3, init_std: 0.3, ..Default::default() }
    }

    fn randomize_adapters(m: &mut Model, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for ad in &mut m.adapters {
            for x in ad.a.data_mut().iter_mut().chain(ad.b.data_mut().iter_mut()) {
                *x = rng.random_range(-0.5..0.5);
            }
        }
    }

    fn flat_adapters(m: &Model) -> Vec<f64> {
        m.adapters.iter().flat_map(|a| a.a.data().iter().chain(a.b.data()).copied().collect::<Vec<_>>()).collect()
    }

    fn set_adapters(m: &mut Model, x: &[f64]) {
        let mut k = 0;
        for ad in &mut m.adapters {
            for v in ad.a.data_mut().iter_mut().chain(ad.b.data_mut().iter_mut()) {
                *v = x[k];
                k += 1;
            }
        }
    }

    fn flat_adapter_grads(g: &Grads) -> Vec<f64> {
        g.adapters.iter().flat_map(|a| a.a.data().iter().chain(a.b.data()).copied().collect::<Vec<_>>()).collect()
    }

    #[test]
    fn config_rules() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig { n_heads: 3, ..Default::default() }.validate().is_err());
        assert!(ModelConfig { lora_rank: 0, ..Default::default() }.validate().is_err());
        assert!(ModelConfig { max_seq: 1, ..Default::default() }.validate().is_err());
        assert!(matches!(init_model(ModelConfig { vocab_size: 10, ..Default::default() }), Err(Error::Config(_))));
    }

    #[test]
    fn init_is_deterministic_and_starts_at_base() {
        let a = init_model(ModelConfig::default()).unwrap();
        let b = init_model(ModelConfig::default()).unwrap();
        assert_eq!(a, b);
        let n = a.lora_delta_norms();
        assert_eq!(n.b_f_sum, 0.0);
        assert_eq!(n.prod_f_sum, 0.0);
        assert_eq!(crate::losses::stab_loss(&a.adapters, &[Projection::Q, Projection::K]), 0.0);
        let c = init_model(ModelConfig { seed: 1, ..Default::default() }).unwrap();
        assert_ne!(a.base, c.base);
    }

    #[test]
    fn rank_one_delta() {
        let mut m = init_model(ModelConfig { lora_rank: 1, d_model: 8, n_heads: 2, ..Default::default() }).unwrap();
        randomize_adapters(&mut m, 1);
        for ad in &m.adapters {
            let d = ad.delta();
            // every 2×2 minor vanishes for a rank-1 matrix
            for i in 0..d.rows() - 1 {
                for j in 0..d.cols() - 1 {
                    let minor = d[(i, j)] * d[(i + 1, j + 1)] - d[(i, j + 1)] * d[(i + 1, j)];
                    assert!(minor.abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_target_ce() {
        let m = init_model(tiny_config()).unwrap();
        let src = m.encode("ab");
        let tr = m.forward_teacher_forced(&src, &[7]).unwrap();
        let row = tr.logits.row(2).to_vec();
        let p = crate::numerics::softmax_row(&row).unwrap();
        assert!((tr.ce + p.as_slice()[7].ln()).abs() < 1e-12);
        assert_eq!(tr.tokens().len(), 3);
    }

    #[test]
    fn too_long_rejected() {
        let m = init_model(tiny_config()).unwrap();
        let src = vec![5; 20];
        assert!(matches!(m.forward_teacher_forced(&src, &[5; 5]), Err(Error::SequenceTooLong { .. })));
    }

    #[test]
    fn attention_rows_are_stochastic_and_causal() {
        let m = init_model(ModelConfig::default()).unwrap();
        let src = m.encode("the cat sat.");
        let tgt = m.encode("a cat.");
        let tr = m.forward_teacher_forced(&src, &tgt).unwrap();
        for layer in &tr.attentions {
            for a in layer {
                for i in 0..a.rows() {
                    assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    assert!(a.row(i)[i + 1..].iter().all(|&x| x == 0.0));
                }
            }
        }
    }

    #[test]
    fn causality_under_substitution() {
        let m = init_model(ModelConfig { seed: 5, ..Default::default() }).unwrap();
        let toks = m.encode("hello world");
        let base = m.logits(&toks).unwrap();
        for t in 0..toks.len() - 1 {
            let mut alt = toks.clone();
            for x in alt.iter_mut().skip(t + 1) {
                *x = 9;
            }
            let l = m.logits(&alt).unwrap();
            for i in 0..=t {
                assert_eq!(l.row(i), base.row(i));
            }
        }
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let mut m = init_model(tiny_config()).unwrap();
        randomize_adapters(&mut m, 2);
        let src = m.encode("ab cd.");
        let tgt = m.encode("xy.");
        let tr = m.forward_teacher_forced(&src, &tgt).unwrap();
        let g = m.backward(&tr, &tr.ce_grad_logits(), None).unwrap();
        let x = flat_adapters(&m);
        let fd = finite_diff_grad(
            |x| {
                let mut mm = m.clone();
                set_adapters(&mut mm, x);
                mm.forward_teacher_forced(&src, &tgt).unwrap().ce
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(relative_error(&flat_adapter_grads(&g), &fd, 1e-12) < 1e-5);
    }

    #[test]
    fn base_and_hidden_gradients_match_finite_differences() {
        let mut m = init_model(tiny_config()).unwrap();
        randomize_adapters(&mut m, 4);
        let src = m.encode("q r.");
        let tgt = m.encode("st");
        let tr = m.forward_teacher_forced(&src, &tgt).unwrap();
        let (rows, cols) = tr.hidden_final.shape();
        let w = Matrix::from_fn(rows, cols, |i, k| ((i * 7 + k * 3) % 5) as f64 * 0.1 - 0.2);
        // objective: ce + <w, hidden_final>
        let obj = |mm: &Model| {
            let t = mm.forward_teacher_forced(&src, &tgt).unwrap();
            t.ce + t.hidden_final.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let g = m.backward(&tr, &tr.ce_grad_logits(), Some(&w)).unwrap();
        let names: Vec<String> = m.base.named().into_iter().map(|(n, _)| n).collect();
        for (ti, name) in names.iter().enumerate() {
            let x: Vec<f64> = m.base.named()[ti].1.data().to_vec();
            let fd = finite_diff_grad(
                |x| {
                    let mut mm = m.clone();
                    mm.base.named_mut()[ti].1.data_mut().copy_from_slice(x);
                    obj(&mm)
                },
                &x,
                1e-5,
            )
            .unwrap();
            let an = g.base.named()[ti].1.data().to_vec();
            let err = relative_error(&an, &fd, 1e-9);
            assert!(err < 1e-5, "{name}: {err}");
        }
    }

    #[test]
    fn four_term_projection_identity() {
        let mut m = init_model(ModelConfig::default()).unwrap();
        randomize_adapters(&mut m, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = Matrix::from_fn(5, 32, |_, _| rng.random_range(-1.0..1.0));
        let eps = Matrix::from_fn(5, 32, |_, _| rng.random_range(-0.1..0.1));
        let w0 = m.base.layers[0].wq.clone();
        let delta = m.adapters[m.adapter_index(0, Projection::Q).unwrap()].delta();
        let mut x = h.clone();
        x.add_assign(&eps);
        let direct = m.project(0, Projection::Q, &x);
        let mut sum = h.matmul_t(&w0);
        sum.add_assign(&h.matmul_t(&delta));
        sum.add_assign(&eps.matmul_t(&w0));
        sum.add_assign(&eps.matmul_t(&delta));
        assert!(direct.max_abs_diff(&sum) < 1e-10);
    }

    #[test]
    fn generate_basics() {
        let m = init_model(ModelConfig::default()).unwrap();
        let src = m.encode("abc");
        assert_eq!(m.generate(&src, 1).unwrap().len(), 1);
        assert_eq!(m.generate(&src, 6).unwrap(), m.generate(&src, 6).unwrap());
        assert!(m.generate(&src, 0).is_err());
    }

    #[test]
    fn memorises_one_pair() {
        let mut m = init_model(ModelConfig { d_model: 16, n_heads: 2, n_layers: 1, d_ff: 32, init_std: 0.1, ..Default::default() }).unwrap();
        let src = m.encode("ab");
        let mut tgt = m.encode("ba.");
        tgt.push(tokenizer::EOS);
        for _ in 0..300 {
            let tr = m.forward_teacher_forced(&src, &tgt).unwrap();
            let g = m.backward(&tr, &tr.ce_grad_logits(), None).unwrap();
            m.apply_base_step(&g.base, 0.5);
        }
        assert_eq!(m.generate(&src, 10).unwrap(), tgt);
    }

    #[test]
    fn norms_examples() {
        let site = Site { layer: 0, proj: Projection::Q };
        let ad = LoraAdapter::new(Matrix::identity(2), Matrix::identity(2), site).unwrap();
        let n = LoraNorms::of(&[ad]);
        assert!((n.prod_f_sum - 2.0).abs() < 1e-15);
        assert_eq!(n.delta_f_sum, 0.0);
        assert_eq!(n.max_ab_ratio(), Some(1.0));

        let mut m = init_model(ModelConfig::default()).unwrap();
        assert_eq!(m.lora_delta_norms().max_ab_ratio(), None);
        randomize_adapters(&mut m, 9);
        for s in m.lora_delta_norms().sites {
            assert!(s.delta_f <= s.prod + 1e-12);
        }
    }
}
