//! Tiny causal transformer with a pointer output head.
//!
//! Input stem: token embedding, plus learned linear mixes of the previous
//! token's embedding and (for prompt nodes) the embedding of the adjacent node
//! on the same edge, plus a learned absolute position embedding. Positions are right-aligned to
//! the end of the prompt, so the query markers and the response always sit at
//! the same absolute positions whatever the graph size.
//!
//! Output head: the next token is either copied from a node position of the
//! prompt (pointer attention over final hidden states) or generated from the
//! two format tokens `ANS`/`EOS`, mixed by a learned gate. Tokens that cannot
//! be produced this way have probability zero, so every distribution lives on
//! a per-prompt support: the distinct prompt nodes followed by `ANS`, `EOS`.
//!
//! All arithmetic is `f64` and all gradients are exact reverse-mode.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, Vocab, ANS, EOS};
use crate::error::{Error, Result};
use crate::graphtask::Label;
use crate::seed;

const LN_EPS: f64 = 1e-5;

/// Shape of a policy network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchDescriptor {
    pub label_min: Label,
    pub label_max: Label,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub max_prompt_len: usize,
    pub max_response_len: usize,
}

impl ArchDescriptor {
    pub fn vocab(&self) -> Vocab {
        Vocab {
            label_min: self.label_min,
            label_max: self.label_max,
        }
    }

    pub fn context_len(&self) -> usize {
        self.max_prompt_len + self.max_response_len
    }

    pub fn validate(&self) -> Result<()> {
        Vocab::new(self.label_min, self.label_max)?;
        let positive = [
            ("width", self.width),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ff_width", self.ff_width),
            ("max_prompt_len", self.max_prompt_len),
            ("max_response_len", self.max_response_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model.width ({}) must be divisible by model.heads ({})",
                self.width, self.heads
            )));
        }
        Ok(())
    }

    /// Fail with the first field that differs from `expected`.
    pub fn check_matches(&self, expected: &ArchDescriptor) -> Result<()> {
        let fields: [(&str, String, String); 8] = [
            ("label_min", expected.label_min.to_string(), self.label_min.to_string()),
            ("label_max", expected.label_max.to_string(), self.label_max.to_string()),
            ("width", expected.width.to_string(), self.width.to_string()),
            ("layers", expected.layers.to_string(), self.layers.to_string()),
            ("heads", expected.heads.to_string(), self.heads.to_string()),
            ("ff_width", expected.ff_width.to_string(), self.ff_width.to_string()),
            (
                "max_prompt_len",
                expected.max_prompt_len.to_string(),
                self.max_prompt_len.to_string(),
            ),
            (
                "max_response_len",
                expected.max_response_len.to_string(),
                self.max_response_len.to_string(),
            ),
        ];
        for (field, e, f) in fields {
            if e != f {
                return Err(Error::ArchMismatch {
                    field: field.to_string(),
                    expected: e,
                    found: f,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct LayerOffsets {
    ln1_g: usize,
    ln1_b: usize,
    w_qkv: usize,
    b_qkv: usize,
    w_o: usize,
    b_o: usize,
    ln2_g: usize,
    ln2_b: usize,
    w_fc: usize,
    b_fc: usize,
    w_proj: usize,
    b_proj: usize,
}

/// Offsets of every parameter block inside the flat vector.
#[derive(Debug, Clone)]
struct Layout {
    tok_emb: usize,
    prev_mix: usize,
    partner_mix: usize,
    pos_emb: usize,
    layers: Vec<LayerOffsets>,
    lnf_g: usize,
    lnf_b: usize,
    ptr_q: usize,
    ptr_k: usize,
    gen_w: usize,
    gen_b: usize,
    gate_w: usize,
    gate_b: usize,
    total: usize,
}

impl Layout {
    fn new(a: &ArchDescriptor) -> Self {
        let d = a.width;
        let f = a.ff_width;
        let mut cur = 0usize;
        let mut take = |n: usize| {
            let off = cur;
            cur += n;
            off
        };
        let tok_emb = take(a.vocab().size() * d);
        let prev_mix = take(d * d);
        let partner_mix = take(d * d);
        let pos_emb = take(a.context_len() * d);
        let layers = (0..a.layers)
            .map(|_| LayerOffsets {
                ln1_g: take(d),
                ln1_b: take(d),
                w_qkv: take(d * 3 * d),
                b_qkv: take(3 * d),
                w_o: take(d * d),
                b_o: take(d),
                ln2_g: take(d),
                ln2_b: take(d),
                w_fc: take(d * f),
                b_fc: take(f),
                w_proj: take(f * d),
                b_proj: take(d),
            })
            .collect();
        let lnf_g = take(d);
        let lnf_b = take(d);
        let ptr_q = take(d * d);
        let ptr_k = take(d * d);
        let gen_w = take(d * 2);
        let gen_b = take(2);
        let gate_w = take(d);
        let gate_b = take(1);
        Self {
            tok_emb,
            prev_mix,
            partner_mix,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            ptr_q,
            ptr_k,
            gen_w,
            gen_b,
            gate_w,
            gate_b,
            total: cur,
        }
    }
}

fn mat(v: &[f64], off: usize, r: usize, c: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((r, c), &v[off..off + r * c]).expect("layout block")
}

fn mat_mut(v: &mut [f64], off: usize, r: usize, c: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((r, c), &mut v[off..off + r * c]).expect("layout block")
}

fn vec_of(v: &[f64], off: usize, n: usize) -> ArrayView1<'_, f64> {
    ArrayView1::from(&v[off..off + n])
}

/// Trainable parameters: an architecture plus one flat vector.
#[derive(Debug, Clone)]
pub struct PolicyParams {
    arch: ArchDescriptor,
    layout: Layout,
    pub values: Vec<f64>,
}

impl PartialEq for PolicyParams {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.values == other.values
    }
}

/// Nodes the pointer can copy from, grouped by token.
#[derive(Debug, Clone)]
pub struct PromptIndex {
    /// Prompt positions holding node tokens.
    pub ptr_positions: Vec<usize>,
    /// Distinct node tokens (ascending) with indices into `ptr_positions`.
    pub groups: Vec<(TokenId, Vec<usize>)>,
    /// Tokens with non-zero probability, in distribution order.
    pub support: Vec<TokenId>,
}

impl PromptIndex {
    pub fn new(prompt: &[TokenId]) -> Self {
        let ptr_positions: Vec<usize> = prompt
            .iter()
            .enumerate()
            .filter(|(_, &t)| Vocab::is_node(t))
            .map(|(i, _)| i)
            .collect();
        let mut groups: Vec<(TokenId, Vec<usize>)> = Vec::new();
        let mut order: Vec<usize> = (0..ptr_positions.len()).collect();
        order.sort_by_key(|&j| (prompt[ptr_positions[j]], j));
        for j in order {
            let tok = prompt[ptr_positions[j]];
            match groups.last_mut() {
                Some((t, members)) if *t == tok => members.push(j),
                _ => groups.push((tok, vec![j])),
            }
        }
        let support = groups
            .iter()
            .map(|(t, _)| *t)
            .chain([ANS, EOS])
            .collect();
        Self {
            ptr_positions,
            groups,
            support,
        }
    }

    pub fn support_index(&self, token: TokenId) -> Option<usize> {
        self.support.iter().position(|&t| t == token)
    }

    pub fn num_nodes(&self) -> usize {
        self.groups.len()
    }
}

/// Head activations at one predicting position, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct HeadState {
    /// Log-probabilities over the prompt support.
    pub logp: Vec<f64>,
    gate: f64,
    log_gate: f64,
    log_ptr: Vec<f64>,
    gen: [f64; 2],
    query: Array1<f64>,
}

#[derive(Debug, Clone)]
struct LnCache {
    xhat: Array2<f64>,
    rstd: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    ln1: LnCache,
    a: Array2<f64>,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    attn: Array2<f64>,
    ln2: LnCache,
    m: Array2<f64>,
    f: Array2<f64>,
    g: Array2<f64>,
}

/// Activations of a full-sequence forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    tokens: Vec<TokenId>,
    prompt_len: usize,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    h: Array2<f64>,
    pub index: PromptIndex,
    ptr_keys: Array2<f64>,
    /// Head state for sequence positions `prompt_len - 1 ..= len - 1`; entry
    /// `k` predicts response token `k`.
    pub heads: Vec<HeadState>,
}

impl Forward {
    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn response_len(&self) -> usize {
        self.tokens.len() - self.prompt_len
    }

    /// Log-probabilities over the support for response position `k`.
    pub fn logp(&self, k: usize) -> &[f64] {
        &self.heads[k].logp
    }
}

fn layer_norm(x: &Array2<f64>, g: ArrayView1<f64>, b: ArrayView1<f64>) -> (Array2<f64>, LnCache) {
    let (t, d) = x.dim();
    let mut xhat = Array2::zeros((t, d));
    let mut rstd = Vec::with_capacity(t);
    for (row, mut out) in x.axis_iter(Axis(0)).zip(xhat.axis_iter_mut(Axis(0))) {
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        for (o, v) in out.iter_mut().zip(row) {
            *o = (v - mean) * r;
        }
        rstd.push(r);
    }
    let y = &xhat * &g + b;
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: ArrayView1<f64>,
    dg: &mut [f64],
    db: &mut [f64],
) -> Array2<f64> {
    let (t, d) = dy.dim();
    let mut dx = Array2::zeros((t, d));
    for i in 0..t {
        let dyr = dy.row(i);
        let xh = cache.xhat.row(i);
        let mut mean_dxh = 0.0;
        let mut mean_dxh_xh = 0.0;
        for k in 0..d {
            dg[k] += dyr[k] * xh[k];
            db[k] += dyr[k];
            let dxh = dyr[k] * g[k];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[k];
        }
        mean_dxh /= d as f64;
        mean_dxh_xh /= d as f64;
        let r = cache.rstd[i];
        for k in 0..d {
            let dxh = dyr[k] * g[k];
            dx[[i, k]] = r * (dxh - mean_dxh - xh[k] * mean_dxh_xh);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4;

/// The node token adjacent to prompt node `t`, preferring the following one.
fn partner_position(tokens: &[TokenId], prompt_len: usize, t: usize) -> Option<usize> {
    if t >= prompt_len || !Vocab::is_node(tokens[t]) {
        return None;
    }
    if t + 1 < prompt_len && Vocab::is_node(tokens[t + 1]) {
        Some(t + 1)
    } else if t >= 1 && Vocab::is_node(tokens[t - 1]) {
        Some(t - 1)
    } else {
        None
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.iter().map(|v| v - lse).collect()
}

pub(crate) fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl PolicyParams {
    /// Gaussian initialisation; `std` scales every weight matrix, layer-norm
    /// gains start at one and biases at zero.
    pub fn init(arch: ArchDescriptor, seed_value: u64, std: f64) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        let mut values = vec![0.0; layout.total];
        let mut rng = seed::rng_for(seed_value, &[seed::stream::INIT]);
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        for v in values.iter_mut() {
            *v = normal.sample(&mut rng);
        }
        let d = arch.width;
        let f = arch.ff_width;
        let mut set = |off: usize, n: usize, val: f64| values[off..off + n].fill(val);
        for l in &layout.layers {
            set(l.ln1_g, d, 1.0);
            set(l.ln1_b, d, 0.0);
            set(l.b_qkv, 3 * d, 0.0);
            set(l.b_o, d, 0.0);
            set(l.ln2_g, d, 1.0);
            set(l.ln2_b, d, 0.0);
            set(l.b_fc, f, 0.0);
            set(l.b_proj, d, 0.0);
        }
        set(layout.lnf_g, d, 1.0);
        set(layout.lnf_b, d, 0.0);
        set(layout.gen_b, 2, 0.0);
        set(layout.gate_b, 1, 0.0);
        // The partner mix starts as a random near-rotation so a node's own
        // embedding and its partner's occupy different directions.
        let rot = Normal::new(0.0, 1.0 / (d as f64).sqrt()).map_err(|e| Error::Config(e.to_string()))?;
        for w in &mut values[layout.partner_mix..layout.partner_mix + d * d] {
            *w = rot.sample(&mut rng);
        }
        Ok(Self {
            arch,
            layout,
            values,
        })
    }

    pub fn from_values(arch: ArchDescriptor, values: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        if values.len() != layout.total {
            return Err(Error::Contract(format!(
                "parameter vector has {} entries, architecture needs {}",
                values.len(),
                layout.total
            )));
        }
        Ok(Self {
            arch,
            layout,
            values,
        })
    }

    pub fn arch(&self) -> &ArchDescriptor {
        &self.arch
    }

    pub fn vocab(&self) -> Vocab {
        self.arch.vocab()
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn check_lengths(&self, prompt_len: usize, total: usize) -> Result<()> {
        if prompt_len == 0 {
            return Err(Error::Contract("empty prompt".into()));
        }
        if prompt_len > self.arch.max_prompt_len {
            return Err(Error::Contract(format!(
                "prompt length {prompt_len} exceeds max_prompt_len {}",
                self.arch.max_prompt_len
            )));
        }
        if total - prompt_len > self.arch.max_response_len {
            return Err(Error::Contract(format!(
                "response length {} exceeds max_response_len {}",
                total - prompt_len,
                self.arch.max_response_len
            )));
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        let v = self.arch.vocab().size();
        match tokens.iter().find(|&&t| t as usize >= v) {
            Some(t) => Err(Error::Encoding(format!("token id {t} outside vocabulary of {v}"))),
            None => Ok(()),
        }
    }

    fn embed(&self, tokens: &[TokenId], prompt_len: usize) -> Array2<f64> {
        let d = self.arch.width;
        let v = &self.values;
        let lay = &self.layout;
        let t_len = tokens.len();
        let emb = mat(v, lay.tok_emb, self.arch.vocab().size(), d);
        let pos = mat(v, lay.pos_emb, self.arch.context_len(), d);
        let off = self.arch.max_prompt_len - prompt_len;
        let (prev_rows, partner_rows) = self.neighbor_rows(tokens, prompt_len);
        let mut x = prev_rows.dot(&mat(v, lay.prev_mix, d, d));
        general_mat_mul(1.0, &partner_rows, &mat(v, lay.partner_mix, d, d), 1.0, &mut x);
        for t in 0..t_len {
            let mut row = x.row_mut(t);
            row += &emb.row(tokens[t] as usize);
            row += &pos.row(off + t);
        }
        x
    }

    /// Embeddings of each position's previous token and edge partner.
    fn neighbor_rows(&self, tokens: &[TokenId], prompt_len: usize) -> (Array2<f64>, Array2<f64>) {
        let d = self.arch.width;
        let t_len = tokens.len();
        let emb = mat(&self.values, self.layout.tok_emb, self.arch.vocab().size(), d);
        let mut prev = Array2::zeros((t_len, d));
        let mut partner = Array2::zeros((t_len, d));
        for t in 0..t_len {
            if t >= 1 {
                prev.row_mut(t).assign(&emb.row(tokens[t - 1] as usize));
            }
            if let Some(j) = partner_position(tokens, prompt_len, t) {
                partner.row_mut(t).assign(&emb.row(tokens[j] as usize));
            }
        }
        (prev, partner)
    }

    /// Full forward pass over `tokens`, whose first `prompt_len` entries are the prompt.
    pub fn forward(&self, tokens: &[TokenId], prompt_len: usize) -> Result<Forward> {
        self.check_lengths(prompt_len, tokens.len())?;
        self.check_tokens(tokens)?;
        let d = self.arch.width;
        let f = self.arch.ff_width;
        let nh = self.arch.heads;
        let dh = d / nh;
        let t_len = tokens.len();
        let v = &self.values;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut x = self.embed(tokens, prompt_len);
        let mut layers = Vec::with_capacity(self.arch.layers);
        for lo in &self.layout.layers {
            let (a, ln1) = layer_norm(&x, vec_of(v, lo.ln1_g, d), vec_of(v, lo.ln1_b, d));
            let mut qkv = a.dot(&mat(v, lo.w_qkv, d, 3 * d));
            qkv += &vec_of(v, lo.b_qkv, 3 * d);
            let mut attn = Array2::zeros((t_len, d));
            let mut probs = Vec::with_capacity(nh);
            for h in 0..nh {
                let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
                let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
                let val = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
                let mut p = q.dot(&k.t());
                for i in 0..t_len {
                    let mut row = p.row_mut(i);
                    let mut m = f64::NEG_INFINITY;
                    for j in 0..=i {
                        row[j] *= scale;
                        m = m.max(row[j]);
                    }
                    let mut z = 0.0;
                    for j in 0..=i {
                        row[j] = (row[j] - m).exp();
                        z += row[j];
                    }
                    for j in 0..t_len {
                        row[j] = if j <= i { row[j] / z } else { 0.0 };
                    }
                }
                let o = p.dot(&val);
                attn.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&o);
                probs.push(p);
            }
            let mut out = attn.dot(&mat(v, lo.w_o, d, d));
            out += &vec_of(v, lo.b_o, d);
            x += &out;
            let (m, ln2) = layer_norm(&x, vec_of(v, lo.ln2_g, d), vec_of(v, lo.ln2_b, d));
            let mut fpre = m.dot(&mat(v, lo.w_fc, d, f));
            fpre += &vec_of(v, lo.b_fc, f);
            let g = fpre.mapv(gelu);
            let mut mlp = g.dot(&mat(v, lo.w_proj, f, d));
            mlp += &vec_of(v, lo.b_proj, d);
            x += &mlp;
            layers.push(LayerCache {
                ln1,
                a,
                qkv,
                probs,
                attn,
                ln2,
                m,
                f: fpre,
                g,
            });
        }
        let (h, lnf) = layer_norm(
            &x,
            vec_of(v, self.layout.lnf_g, d),
            vec_of(v, self.layout.lnf_b, d),
        );
        let index = PromptIndex::new(&tokens[..prompt_len]);
        let ptr_keys = self.pointer_keys(&h, &index);
        let heads = (prompt_len - 1..t_len)
            .map(|t| self.head(h.row(t), &ptr_keys, &index))
            .collect();
        Ok(Forward {
            tokens: tokens.to_vec(),
            prompt_len,
            layers,
            lnf,
            h,
            index,
            ptr_keys,
            heads,
        })
    }

    fn pointer_keys(&self, h: &Array2<f64>, index: &PromptIndex) -> Array2<f64> {
        let d = self.arch.width;
        let rows = h.select(Axis(0), &index.ptr_positions);
        rows.dot(&mat(&self.values, self.layout.ptr_k, d, d))
    }

    /// Output distribution at one position given its final hidden state.
    fn head(&self, h_t: ArrayView1<f64>, ptr_keys: &Array2<f64>, index: &PromptIndex) -> HeadState {
        let d = self.arch.width;
        let v = &self.values;
        let lay = &self.layout;
        let query = h_t.dot(&mat(v, lay.ptr_q, d, d));
        let scale = 1.0 / (d as f64).sqrt();
        let scores: Vec<f64> = ptr_keys.dot(&query).iter().map(|s| s * scale).collect();
        let log_ptr = log_softmax(&scores);
        let gz = h_t.dot(&mat(v, lay.gen_w, d, 2)) + vec_of(v, lay.gen_b, 2);
        let log_gen = log_softmax(&[gz[0], gz[1]]);
        let u = h_t.dot(&vec_of(v, lay.gate_w, d)) + v[lay.gate_b];
        let log_gate = -softplus(-u);
        let log_not_gate = -softplus(u);
        let mut logp = Vec::with_capacity(index.support.len());
        for (_, members) in &index.groups {
            let lp: Vec<f64> = members.iter().map(|&j| log_ptr[j]).collect();
            logp.push(log_gate + log_sum_exp(&lp));
        }
        logp.push(log_not_gate + log_gen[0]);
        logp.push(log_not_gate + log_gen[1]);
        HeadState {
            logp,
            gate: log_gate.exp(),
            log_gate,
            log_ptr,
            gen: [log_gen[0].exp(), log_gen[1].exp()],
            query,
        }
    }

    /// Backpropagate head gradients, accumulating parameter gradients into
    /// `grad`; returns the gradient with respect to `h_t` and adds pointer-key
    /// gradients into `dkeys`.
    #[allow(clippy::too_many_arguments)]
    fn head_backward(
        &self,
        grad: &mut [f64],
        h_t: ArrayView1<f64>,
        ptr_keys: &Array2<f64>,
        index: &PromptIndex,
        st: &HeadState,
        dlogp: &[f64],
        dkeys: &mut Array2<f64>,
    ) -> Array1<f64> {
        let d = self.arch.width;
        let lay = &self.layout;
        let n_nodes = index.groups.len();
        let scale = 1.0 / (d as f64).sqrt();

        let mut dlog_gate = 0.0;
        let mut dlog_ptr = vec![0.0; st.log_ptr.len()];
        for (gi, (_, members)) in index.groups.iter().enumerate() {
            let gval = dlogp[gi];
            if gval == 0.0 {
                continue;
            }
            dlog_gate += gval;
            let lc = st.logp[gi] - st.log_gate;
            for &j in members {
                dlog_ptr[j] += gval * (st.log_ptr[j] - lc).exp();
            }
        }
        let dlog_gen = [dlogp[n_nodes], dlogp[n_nodes + 1]];
        let dlog_not_gate = dlog_gen[0] + dlog_gen[1];
        let du = dlog_gate * (1.0 - st.gate) - dlog_not_gate * st.gate;

        let sum_dptr: f64 = dlog_ptr.iter().sum();
        let dscores: Vec<f64> = dlog_ptr
            .iter()
            .zip(&st.log_ptr)
            .map(|(g, lp)| (g - lp.exp() * sum_dptr) * scale)
            .collect();
        let sum_dgen = dlog_gen[0] + dlog_gen[1];
        let dz = [
            dlog_gen[0] - st.gen[0] * sum_dgen,
            dlog_gen[1] - st.gen[1] * sum_dgen,
        ];

        let mut dh = Array1::<f64>::zeros(d);
        let mut dq = Array1::<f64>::zeros(d);
        for (j, &ds) in dscores.iter().enumerate() {
            if ds == 0.0 {
                continue;
            }
            dq.scaled_add(ds, &ptr_keys.row(j));
            dkeys.row_mut(j).scaled_add(ds, &st.query);
        }
        {
            let ptr_q = mat(&self.values, lay.ptr_q, d, d);
            dh += &ptr_q.dot(&dq);
            let gen_w = mat(&self.values, lay.gen_w, d, 2);
            dh.scaled_add(dz[0], &gen_w.column(0));
            dh.scaled_add(dz[1], &gen_w.column(1));
            dh.scaled_add(du, &vec_of(&self.values, lay.gate_w, d));
        }
        {
            let mut g_ptr_q = mat_mut(grad, lay.ptr_q, d, d);
            for a in 0..d {
                if h_t[a] == 0.0 {
                    continue;
                }
                g_ptr_q.row_mut(a).scaled_add(h_t[a], &dq);
            }
        }
        for a in 0..d {
            grad[lay.gen_w + a * 2] += h_t[a] * dz[0];
            grad[lay.gen_w + a * 2 + 1] += h_t[a] * dz[1];
            grad[lay.gate_w + a] += h_t[a] * du;
        }
        grad[lay.gen_b] += dz[0];
        grad[lay.gen_b + 1] += dz[1];
        grad[lay.gate_b] += du;
        dh
    }

    /// Reverse pass. `dlogp[k]` is the loss gradient with respect to the
    /// log-probabilities of head `k` (same indexing as [`Forward::heads`]);
    /// missing or empty entries count as zero.
    pub fn backward(&self, fwd: &Forward, dlogp: &[Vec<f64>]) -> Vec<f64> {
        let d = self.arch.width;
        let f = self.arch.ff_width;
        let nh = self.arch.heads;
        let dh_w = d / nh;
        let t_len = fwd.tokens.len();
        let p_len = fwd.prompt_len;
        let v = &self.values;
        let lay = &self.layout;
        let scale = 1.0 / (dh_w as f64).sqrt();
        let mut grad = vec![0.0; lay.total];

        let mut dh = Array2::<f64>::zeros((t_len, d));
        let mut dkeys = Array2::<f64>::zeros(fwd.ptr_keys.dim());
        for (k, g) in dlogp.iter().enumerate() {
            if g.is_empty() || g.iter().all(|&x| x == 0.0) {
                continue;
            }
            let t = p_len - 1 + k;
            let dht = self.head_backward(
                &mut grad,
                fwd.h.row(t),
                &fwd.ptr_keys,
                &fwd.index,
                &fwd.heads[k],
                g,
                &mut dkeys,
            );
            let mut row = dh.row_mut(t);
            row += &dht;
        }
        if !fwd.index.ptr_positions.is_empty() {
            let rows = fwd.h.select(Axis(0), &fwd.index.ptr_positions);
            let mut g_ptr_k = mat_mut(&mut grad, lay.ptr_k, d, d);
            general_mat_mul(1.0, &rows.t(), &dkeys, 1.0, &mut g_ptr_k);
            let drows = dkeys.dot(&mat(v, lay.ptr_k, d, d).t());
            for (j, &pos) in fwd.index.ptr_positions.iter().enumerate() {
                let mut row = dh.row_mut(pos);
                row += &drows.row(j);
            }
        }

        let mut dx = {
            let (gpart, rest) = grad.split_at_mut(lay.lnf_b);
            layer_norm_backward(
                &dh,
                &fwd.lnf,
                vec_of(v, lay.lnf_g, d),
                &mut gpart[lay.lnf_g..lay.lnf_g + d],
                &mut rest[..d],
            )
        };

        for (lo, c) in lay.layers.iter().zip(&fwd.layers).rev() {
            // MLP branch
            {
                let dmlp = &dx;
                let mut g_bp = vec![0.0; d];
                for row in dmlp.axis_iter(Axis(0)) {
                    for k in 0..d {
                        g_bp[k] += row[k];
                    }
                }
                for k in 0..d {
                    grad[lo.b_proj + k] += g_bp[k];
                }
                general_mat_mul(1.0, &c.g.t(), dmlp, 1.0, &mut mat_mut(&mut grad, lo.w_proj, f, d));
                let dg = dmlp.dot(&mat(v, lo.w_proj, f, d).t());
                let mut df = dg;
                ndarray::Zip::from(&mut df).and(&c.f).for_each(|g, &x| *g *= gelu_grad(x));
                for row in df.axis_iter(Axis(0)) {
                    for k in 0..f {
                        grad[lo.b_fc + k] += row[k];
                    }
                }
                general_mat_mul(1.0, &c.m.t(), &df, 1.0, &mut mat_mut(&mut grad, lo.w_fc, d, f));
                let dm = df.dot(&mat(v, lo.w_fc, d, f).t());
                let mut dg2 = vec![0.0; d];
                let mut db2 = vec![0.0; d];
                let dres = layer_norm_backward(&dm, &c.ln2, vec_of(v, lo.ln2_g, d), &mut dg2, &mut db2);
                for k in 0..d {
                    grad[lo.ln2_g + k] += dg2[k];
                    grad[lo.ln2_b + k] += db2[k];
                }
                dx += &dres;
            }
            // attention branch
            {
                let dout = &dx;
                for row in dout.axis_iter(Axis(0)) {
                    for k in 0..d {
                        grad[lo.b_o + k] += row[k];
                    }
                }
                general_mat_mul(1.0, &c.attn.t(), dout, 1.0, &mut mat_mut(&mut grad, lo.w_o, d, d));
                let dattn = dout.dot(&mat(v, lo.w_o, d, d).t());
                let mut dqkv = Array2::<f64>::zeros((t_len, 3 * d));
                for h in 0..nh {
                    let q = c.qkv.slice(s![.., h * dh_w..(h + 1) * dh_w]);
                    let k = c.qkv.slice(s![.., d + h * dh_w..d + (h + 1) * dh_w]);
                    let val = c.qkv.slice(s![.., 2 * d + h * dh_w..2 * d + (h + 1) * dh_w]);
                    let p = &c.probs[h];
                    let d_o = dattn.slice(s![.., h * dh_w..(h + 1) * dh_w]);
                    let dp = d_o.dot(&val.t());
                    let dv = p.t().dot(&d_o);
                    let mut ds = Array2::<f64>::zeros((t_len, t_len));
                    for i in 0..t_len {
                        let mut dot = 0.0;
                        for j in 0..=i {
                            dot += dp[[i, j]] * p[[i, j]];
                        }
                        for j in 0..=i {
                            ds[[i, j]] = p[[i, j]] * (dp[[i, j]] - dot) * scale;
                        }
                    }
                    let dq = ds.dot(&k);
                    let dk = ds.t().dot(&q);
                    dqkv.slice_mut(s![.., h * dh_w..(h + 1) * dh_w]).assign(&dq);
                    dqkv.slice_mut(s![.., d + h * dh_w..d + (h + 1) * dh_w]).assign(&dk);
                    dqkv.slice_mut(s![.., 2 * d + h * dh_w..2 * d + (h + 1) * dh_w]).assign(&dv);
                }
                for row in dqkv.axis_iter(Axis(0)) {
                    for k in 0..3 * d {
                        grad[lo.b_qkv + k] += row[k];
                    }
                }
                general_mat_mul(1.0, &c.a.t(), &dqkv, 1.0, &mut mat_mut(&mut grad, lo.w_qkv, d, 3 * d));
                let da = dqkv.dot(&mat(v, lo.w_qkv, d, 3 * d).t());
                let mut dg1 = vec![0.0; d];
                let mut db1 = vec![0.0; d];
                let dres = layer_norm_backward(&da, &c.ln1, vec_of(v, lo.ln1_g, d), &mut dg1, &mut db1);
                for k in 0..d {
                    grad[lo.ln1_g + k] += dg1[k];
                    grad[lo.ln1_b + k] += db1[k];
                }
                dx += &dres;
            }
        }

        // input stem
        let (prev_rows, partner_rows) = self.neighbor_rows(&fwd.tokens, p_len);
        general_mat_mul(1.0, &prev_rows.t(), &dx, 1.0, &mut mat_mut(&mut grad, lay.prev_mix, d, d));
        general_mat_mul(1.0, &partner_rows.t(), &dx, 1.0, &mut mat_mut(&mut grad, lay.partner_mix, d, d));
        let dprev = dx.dot(&mat(v, lay.prev_mix, d, d).t());
        let dpartner = dx.dot(&mat(v, lay.partner_mix, d, d).t());
        let off = self.arch.max_prompt_len - p_len;
        for t in 0..t_len {
            let tok = fwd.tokens[t] as usize;
            for k in 0..d {
                grad[lay.tok_emb + tok * d + k] += dx[[t, k]];
                grad[lay.pos_emb + (off + t) * d + k] += dx[[t, k]];
            }
            if t >= 1 {
                let pt = fwd.tokens[t - 1] as usize;
                for k in 0..d {
                    grad[lay.tok_emb + pt * d + k] += dprev[[t, k]];
                }
            }
            if let Some(j) = partner_position(&fwd.tokens, p_len, t) {
                let nt = fwd.tokens[j] as usize;
                for k in 0..d {
                    grad[lay.tok_emb + nt * d + k] += dpartner[[t, k]];
                }
            }
        }
        grad
    }

    /// Run the prompt once and return an incremental decoder positioned after it.
    pub fn prefill(&self, prompt: &[TokenId]) -> Result<Decoder> {
        let fwd = self.forward(prompt, prompt.len())?;
        let d = self.arch.width;
        let layers = fwd
            .layers
            .iter()
            .map(|c| KvCache {
                keys: c.qkv.slice(s![.., d..2 * d]).iter().copied().collect(),
                values: c.qkv.slice(s![.., 2 * d..3 * d]).iter().copied().collect(),
            })
            .collect();
        let head = fwd.heads[0].clone();
        Ok(Decoder {
            prompt_len: prompt.len(),
            tokens: prompt.to_vec(),
            layers,
            ptr_keys: fwd.ptr_keys,
            index: fwd.index,
            head,
        })
    }

    /// Single-token forward for the decoder.
    fn decode_step(&self, dec: &mut Decoder, token: TokenId) -> Result<()> {
        let total = dec.tokens.len() + 1;
        self.check_lengths(dec.prompt_len, total)?;
        self.check_tokens(&[token])?;
        let d = self.arch.width;
        let f = self.arch.ff_width;
        let nh = self.arch.heads;
        let dh = d / nh;
        let v = &self.values;
        let lay = &self.layout;
        let t = dec.tokens.len();
        let scale = 1.0 / (dh as f64).sqrt();
        let emb = mat(v, lay.tok_emb, self.arch.vocab().size(), d);
        let off = self.arch.max_prompt_len - dec.prompt_len;
        let prev = emb.row(*dec.tokens.last().expect("non-empty prompt") as usize);
        let mut x: Array1<f64> = prev.dot(&mat(v, lay.prev_mix, d, d));
        x += &emb.row(token as usize);
        x += &mat(v, lay.pos_emb, self.arch.context_len(), d).row(off + t);
        dec.tokens.push(token);

        let norm = |x: &Array1<f64>, g: usize, b: usize| -> Array1<f64> {
            let mean = x.sum() / d as f64;
            let var = x.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            x.mapv(|a| (a - mean) * r) * vec_of(v, g, d) + vec_of(v, b, d)
        };
        for (lo, cache) in lay.layers.iter().zip(dec.layers.iter_mut()) {
            let a = norm(&x, lo.ln1_g, lo.ln1_b);
            let qkv = a.dot(&mat(v, lo.w_qkv, d, 3 * d)) + vec_of(v, lo.b_qkv, 3 * d);
            cache.keys.extend(qkv.slice(s![d..2 * d]).iter());
            cache.values.extend(qkv.slice(s![2 * d..3 * d]).iter());
            let n = t + 1;
            let keys = ArrayView2::from_shape((n, d), &cache.keys).expect("cache rows");
            let vals = ArrayView2::from_shape((n, d), &cache.values).expect("cache rows");
            let mut attn = Array1::<f64>::zeros(d);
            for h in 0..nh {
                let q = qkv.slice(s![h * dh..(h + 1) * dh]);
                let kh = keys.slice(s![.., h * dh..(h + 1) * dh]);
                let mut sc: Vec<f64> = kh.dot(&q).iter().map(|x| x * scale).collect();
                let m = sc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for s_ in sc.iter_mut() {
                    *s_ = (*s_ - m).exp();
                    z += *s_;
                }
                let p = Array1::from_iter(sc.iter().map(|x| x / z));
                let o = vals.slice(s![.., h * dh..(h + 1) * dh]).t().dot(&p);
                attn.slice_mut(s![h * dh..(h + 1) * dh]).assign(&o);
            }
            x += &(attn.dot(&mat(v, lo.w_o, d, d)) + vec_of(v, lo.b_o, d));
            let m = norm(&x, lo.ln2_g, lo.ln2_b);
            let g = (m.dot(&mat(v, lo.w_fc, d, f)) + vec_of(v, lo.b_fc, f)).mapv(gelu);
            x += &(g.dot(&mat(v, lo.w_proj, f, d)) + vec_of(v, lo.b_proj, d));
        }
        let h = norm(&x, lay.lnf_g, lay.lnf_b);
        dec.head = self.head(h.view(), &dec.ptr_keys, &dec.index);
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct KvCache {
    keys: Vec<f64>,
    values: Vec<f64>,
}

/// Incremental decoding state for one sequence.
#[derive(Debug, Clone)]
pub struct Decoder {
    prompt_len: usize,
    tokens: Vec<TokenId>,
    layers: Vec<KvCache>,
    ptr_keys: Array2<f64>,
    pub index: PromptIndex,
    head: HeadState,
}

impl Decoder {
    /// Log-probabilities of the next token over `index.support`.
    pub fn logp(&self) -> &[f64] {
        &self.head.logp
    }

    pub fn response(&self) -> &[TokenId] {
        &self.tokens[self.prompt_len..]
    }

    pub fn push(&mut self, params: &PolicyParams, token: TokenId) -> Result<()> {
        params.decode_step(self, token)
    }

    /// Append a token that will never be conditioned on (the last one).
    pub fn push_final(&mut self, token: TokenId) {
        self.tokens.push(token);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::vocab::{DST, SEP, SRC};

    pub(crate) fn tiny_arch() -> ArchDescriptor {
        ArchDescriptor {
            label_min: 2,
            label_max: 7,
            width: 4,
            layers: 1,
            heads: 2,
            ff_width: 4,
            max_prompt_len: 12,
            max_response_len: 5,
        }
    }

    fn prompt(v: &Vocab) -> Vec<TokenId> {
        let n = |l| v.node(l).unwrap();
        vec![n(3), n(5), SEP, n(3), n(6), SEP, SRC, n(3), DST, n(6)]
    }

    #[test]
    fn distributions_normalise() {
        let p = PolicyParams::init(tiny_arch(), 3, 0.7).unwrap();
        let pr = prompt(&p.vocab());
        let mut toks = pr.clone();
        toks.extend([ANS, p.vocab().node(3).unwrap()]);
        let fwd = p.forward(&toks, pr.len()).unwrap();
        assert_eq!(fwd.heads.len(), 3);
        for h in &fwd.heads {
            let total: f64 = h.logp.iter().map(|l| l.exp()).sum();
            assert!((total - 1.0).abs() < 1e-12, "{total}");
        }
        assert_eq!(fwd.index.support.len(), 5);
    }

    #[test]
    fn decoder_matches_full_forward() {
        let p = PolicyParams::init(tiny_arch(), 5, 0.8).unwrap();
        let pr = prompt(&p.vocab());
        let resp = [p.vocab().node(5).unwrap(), ANS, p.vocab().node(3).unwrap()];
        let mut dec = p.prefill(&pr).unwrap();
        let mut toks = pr.clone();
        for &r in &resp {
            dec.push(&p, r).unwrap();
            toks.push(r);
        }
        let fwd = p.forward(&toks, pr.len()).unwrap();
        for (a, b) in dec.logp().iter().zip(fwd.logp(resp.len())) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn length_contracts() {
        let p = PolicyParams::init(tiny_arch(), 1, 0.1).unwrap();
        let pr = prompt(&p.vocab());
        let mut toks = pr.clone();
        toks.extend([ANS; 6]);
        assert!(matches!(p.forward(&toks, pr.len()), Err(Error::Contract(_))));
        assert!(p.forward(&[SEP; 13], 13).is_err());
    }

    #[test]
    fn arch_mismatch_names_field() {
        let a = tiny_arch();
        let mut b = a.clone();
        b.heads = 4;
        match a.check_matches(&b) {
            Err(Error::ArchMismatch { field, .. }) => assert_eq!(field, "heads"),
            other => panic!("{other:?}"),
        }
        assert!(a.check_matches(&a).is_ok());
    }
}
