//! Autoregressive policies over a finite vocabulary.
//!
//! Two architectures share one interface: a W-gram tabular softmax policy
//! (exact, enumerable, one logit row per visited context) and a one-hidden-
//! layer tanh network over a W-token context window (small enough to verify
//! by finite differences). Temperature always divides the logits right
//! before the softmax; it is never baked into stored parameters.
//!
//! The next-token distribution is the same object everywhere (sampling,
//! log-probabilities, gradients): softmax over the logits with the PAD
//! token's entry forced to -inf. PAD is context filler only and never a
//! legal output.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::math;

pub type TokenId = usize;

/// Reserved symbol spellings appended to every vocabulary.
pub const BOS_SYMBOL: &str = "<bos>";
pub const EOS_SYMBOL: &str = "<eos>";
pub const PAD_SYMBOL: &str = "<pad>";

/// A finite ordered token set with reserved BOS/EOS/PAD ids.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    bos: TokenId,
    eos: TokenId,
    pad: TokenId,
}

impl Vocabulary {
    /// Build a vocabulary from user symbols; BOS, EOS and PAD are appended.
    pub fn new<S: AsRef<str>>(symbols: &[S]) -> Result<Self> {
        let mut tokens: Vec<String> = Vec::with_capacity(symbols.len() + 3);
        for s in symbols {
            let s = s.as_ref();
            if tokens.iter().any(|t| t == s) {
                return Err(Error::Config(format!("duplicate vocabulary symbol {s:?}")));
            }
            if [BOS_SYMBOL, EOS_SYMBOL, PAD_SYMBOL].contains(&s) {
                return Err(Error::Config(format!("symbol {s:?} is reserved")));
            }
            tokens.push(s.to_string());
        }
        let bos = tokens.len();
        tokens.push(BOS_SYMBOL.to_string());
        let eos = tokens.len();
        tokens.push(EOS_SYMBOL.to_string());
        let pad = tokens.len();
        tokens.push(PAD_SYMBOL.to_string());
        Ok(Self { tokens, bos, eos, pad })
    }

    /// Rebuild from checkpoint fields, validating the invariants.
    pub fn from_parts(tokens: Vec<String>, bos: TokenId, eos: TokenId, pad: TokenId) -> Result<Self> {
        let v = tokens.len();
        if bos >= v || eos >= v || pad >= v {
            return Err(Error::Config("reserved ids out of range".into()));
        }
        if bos == eos || bos == pad || eos == pad {
            return Err(Error::Config("reserved ids must be pairwise distinct".into()));
        }
        let mut seen = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if seen.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary symbol {t:?}")));
            }
        }
        Ok(Self { tokens, bos, eos, pad })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    /// Number of tokens that may appear in outputs (everything except PAD).
    pub fn legal_output_count(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn bos(&self) -> TokenId {
        self.bos
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn pad(&self) -> TokenId {
        self.pad
    }

    pub fn id(&self, symbol: &str) -> Option<TokenId> {
        self.tokens.iter().position(|t| t == symbol)
    }

    pub fn symbol(&self, id: TokenId) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Input(format!("token id {id} out of range")))
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Which way `apply_update` moves along the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateDirection {
    Ascent,
    Descent,
}

/// Flat parameter gradient, indexed exactly like the policy's flat view.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    pub values: Vec<f64>,
}

impl GradientVector {
    pub fn zeros(len: usize) -> Self {
        Self { values: vec![0.0; len] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm2(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn norm_inf(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scale(&mut self, a: f64) {
        for v in &mut self.values {
            *v *= a;
        }
    }

    /// self += a * other.
    pub fn add_scaled(&mut self, a: f64, other: &GradientVector) -> Result<()> {
        if self.values.len() != other.values.len() {
            return Err(Error::Internal(format!(
                "gradient length mismatch: {} vs {}",
                self.values.len(),
                other.values.len()
            )));
        }
        for (x, y) in self.values.iter_mut().zip(&other.values) {
            *x += a * y;
        }
        Ok(())
    }
}

/// Per-token weights for gradient accumulation.
#[derive(Debug, Clone, Copy)]
pub enum TokenWeighting<'a> {
    /// Same weight on every output token.
    Uniform(f64),
    /// One weight per output token.
    PerToken(&'a [f64]),
}

impl TokenWeighting<'_> {
    fn at(&self, t: usize) -> f64 {
        match self {
            TokenWeighting::Uniform(w) => *w,
            TokenWeighting::PerToken(ws) => ws[t],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Tabular,
    Neural,
}

/// W-gram table: one logit row per materialized context key.
///
/// Rows live in insertion order, so the flat parameter layout is stable:
/// materializing a new context appends at the end and never shifts existing
/// indices. Unmaterialized contexts read as zero rows.
#[derive(Debug, Clone)]
pub struct TabularPolicy {
    contexts: Vec<Vec<TokenId>>,
    rows: Vec<Vec<f64>>,
    index: HashMap<Vec<TokenId>, usize>,
}

/// One-hidden-layer tanh network over embedded context tokens.
#[derive(Debug, Clone)]
pub struct NeuralPolicy {
    pub(crate) embed: Vec<f64>,    // V x d
    pub(crate) w_hidden: Vec<f64>, // d x (W*d)
    pub(crate) b_hidden: Vec<f64>, // d
    pub(crate) w_out: Vec<f64>,    // V x d
    pub(crate) b_out: Vec<f64>,    // V
}

#[derive(Debug, Clone)]
enum PolicyInner {
    Tabular(TabularPolicy),
    Neural(NeuralPolicy),
}

/// All learnable parameters of one policy plus its vocabulary and window.
#[derive(Debug, Clone)]
pub struct PolicyParams {
    inner: PolicyInner,
    vocab: Vocabulary,
    window: usize,
    hidden_dim: usize,
    seed_lineage: Vec<u64>,
}

/// Deterministic policy construction.
///
/// Tabular policies start empty (every conditional is uniform over legal
/// tokens); neural policies draw all parameters uniformly from
/// [-0.1/sqrt(d), 0.1/sqrt(d)].
pub fn init_policy(
    kind: PolicyKind,
    vocab: Vocabulary,
    window: usize,
    hidden_dim: usize,
    seed: u64,
) -> Result<PolicyParams> {
    if window < 1 {
        return Err(Error::Config("context window must be >= 1".into()));
    }
    let inner = match kind {
        PolicyKind::Tabular => PolicyInner::Tabular(TabularPolicy {
            contexts: Vec::new(),
            rows: Vec::new(),
            index: HashMap::new(),
        }),
        PolicyKind::Neural => {
            if hidden_dim < 1 {
                return Err(Error::Config("hidden_dim must be >= 1 for neural policies".into()));
            }
            let v = vocab.size();
            let d = hidden_dim;
            let scale = 0.1 / (d as f64).sqrt();
            let mut rng = crate::rng::RngStream::new(seed, 0x706f_6c69);
            let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.next_symmetric(scale)).collect() };
            PolicyInner::Neural(NeuralPolicy {
                embed: draw(v * d),
                w_hidden: draw(d * window * d),
                b_hidden: draw(d),
                w_out: draw(v * d),
                b_out: draw(v),
            })
        }
    };
    Ok(PolicyParams {
        inner,
        vocab,
        window,
        hidden_dim: match kind {
            PolicyKind::Tabular => 0,
            PolicyKind::Neural => hidden_dim,
        },
        seed_lineage: vec![seed],
    })
}

impl PolicyParams {
    pub fn kind(&self) -> PolicyKind {
        match self.inner {
            PolicyInner::Tabular(_) => PolicyKind::Tabular,
            PolicyInner::Neural(_) => PolicyKind::Neural,
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn seed_lineage(&self) -> &[u64] {
        &self.seed_lineage
    }

    /// Record a seed that influenced this parameter lineage.
    pub fn push_seed(&mut self, seed: u64) {
        self.seed_lineage.push(seed);
    }

    /// Total scalar parameter count of the current flat view.
    pub fn param_count(&self) -> usize {
        match &self.inner {
            PolicyInner::Tabular(t) => t.rows.len() * self.vocab.size(),
            PolicyInner::Neural(n) => {
                n.embed.len() + n.w_hidden.len() + n.b_hidden.len() + n.w_out.len() + n.b_out.len()
            }
        }
    }

    /// Copy of the flat parameter view.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        match &self.inner {
            PolicyInner::Tabular(t) => {
                for row in &t.rows {
                    out.extend_from_slice(row);
                }
            }
            PolicyInner::Neural(n) => {
                out.extend_from_slice(&n.embed);
                out.extend_from_slice(&n.w_hidden);
                out.extend_from_slice(&n.b_hidden);
                out.extend_from_slice(&n.w_out);
                out.extend_from_slice(&n.b_out);
            }
        }
        out
    }

    /// Overwrite the flat view with exact values (checkpoint restore).
    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::Internal(format!(
                "flat view has {} parameters, got {}",
                self.param_count(),
                values.len()
            )));
        }
        let mut offset = 0;
        match &mut self.inner {
            PolicyInner::Tabular(t) => {
                for row in &mut t.rows {
                    for x in row.iter_mut() {
                        *x = values[offset];
                        offset += 1;
                    }
                }
            }
            PolicyInner::Neural(n) => {
                for seg in [&mut n.embed, &mut n.w_hidden, &mut n.b_hidden, &mut n.w_out, &mut n.b_out] {
                    for x in seg.iter_mut() {
                        *x = values[offset];
                        offset += 1;
                    }
                }
            }
        }
        Ok(())
    }

    /// Clone with one flat parameter nudged by `delta` (finite differences).
    pub fn perturbed(&self, flat_index: usize, delta: f64) -> Result<PolicyParams> {
        let mut p = self.clone();
        p.flat_add(flat_index, delta)?;
        Ok(p)
    }

    fn flat_add(&mut self, i: usize, delta: f64) -> Result<()> {
        let count = self.param_count();
        if i >= count {
            return Err(Error::Internal(format!("flat index {i} out of range {count}")));
        }
        match &mut self.inner {
            PolicyInner::Tabular(t) => {
                let v = self.vocab.size();
                t.rows[i / v][i % v] += delta;
            }
            PolicyInner::Neural(n) => {
                let segs: [&mut [f64]; 5] = [
                    &mut n.embed,
                    &mut n.w_hidden,
                    &mut n.b_hidden,
                    &mut n.w_out,
                    &mut n.b_out,
                ];
                let mut rem = i;
                for seg in segs {
                    if rem < seg.len() {
                        seg[rem] += delta;
                        return Ok(());
                    }
                    rem -= seg.len();
                }
            }
        }
        Ok(())
    }

    /// FNV-1a hash of the structure and every parameter bit pattern.
    /// Used to check that evaluation never mutates parameters.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        eat(&(self.vocab.size() as u64).to_le_bytes());
        eat(&(self.window as u64).to_le_bytes());
        if let PolicyInner::Tabular(t) = &self.inner {
            for ctx in &t.contexts {
                for &id in ctx {
                    eat(&(id as u64).to_le_bytes());
                }
            }
        }
        for x in self.flat() {
            eat(&x.to_bits().to_le_bytes());
        }
        h
    }

    fn check_tokens(&self, seq: &[TokenId]) -> Result<()> {
        let v = self.vocab.size();
        for &id in seq {
            if id >= v {
                return Err(Error::Input(format!("token id {id} out of range for V={v}")));
            }
        }
        Ok(())
    }

    /// Last W tokens of `prefix`, left-padded with PAD.
    pub fn context_key(&self, prefix: &[TokenId]) -> Vec<TokenId> {
        let w = self.window;
        let mut key = Vec::with_capacity(w);
        if prefix.len() < w {
            key.resize(w - prefix.len(), self.vocab.pad());
        }
        let start = prefix.len().saturating_sub(w);
        key.extend_from_slice(&prefix[start..]);
        key
    }

    /// Raw logits for the next token after `prefix`.
    ///
    /// Pure function of (params, last W tokens). Unmaterialized tabular
    /// contexts read as the zero row.
    pub fn logits(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        self.check_tokens(prefix)?;
        let key = self.context_key(prefix);
        Ok(match &self.inner {
            PolicyInner::Tabular(t) => match t.index.get(&key) {
                Some(&r) => t.rows[r].clone(),
                None => vec![0.0; self.vocab.size()],
            },
            PolicyInner::Neural(n) => self.neural_forward(n, &key).logits,
        })
    }

    /// Next-token probabilities at temperature `tau` (PAD carries zero mass).
    pub fn next_token_dist(&self, prefix: &[TokenId], tau: f64) -> Result<Vec<f64>> {
        check_tau(tau)?;
        let z = self.logits(prefix)?;
        Ok(math::masked_softmax_t(&z, tau, Some(self.vocab.pad())))
    }

    /// Total and per-token log-probability of `output` given `prompt`.
    pub fn sequence_logprob(
        &self,
        prompt: &[TokenId],
        output: &[TokenId],
        tau: f64,
    ) -> Result<(f64, Vec<f64>)> {
        check_tau(tau)?;
        if output.is_empty() {
            return Err(Error::Input("output must be nonempty".into()));
        }
        self.check_tokens(prompt)?;
        self.check_tokens(output)?;
        if output.contains(&self.vocab.pad()) {
            return Err(Error::Input("PAD is not a legal output token".into()));
        }
        let mut prefix = prompt.to_vec();
        let mut per_token = Vec::with_capacity(output.len());
        for &tok in output {
            let z = self.logits(&prefix)?;
            let lp = math::masked_log_softmax_t(&z, tau, Some(self.vocab.pad()));
            per_token.push(lp[tok]);
            prefix.push(tok);
        }
        Ok((per_token.iter().sum(), per_token))
    }

    /// Gradient of sum_t log pi(o_t | q, o_<t; tau) with respect to the
    /// flat parameters.
    pub fn logprob_gradient(
        &self,
        prompt: &[TokenId],
        output: &[TokenId],
        tau: f64,
    ) -> Result<GradientVector> {
        let mut grad = GradientVector::zeros(self.param_count());
        self.accumulate_logprob_gradient(prompt, output, tau, TokenWeighting::Uniform(1.0), &mut grad)?;
        Ok(grad)
    }

    /// Add `w_t * grad(log pi(o_t))` into `grad` for each output token.
    ///
    /// Tabular contexts visited by the pair must already be materialized
    /// (see `ensure_contexts`); gradients need a slot in the flat view.
    pub fn accumulate_logprob_gradient(
        &self,
        prompt: &[TokenId],
        output: &[TokenId],
        tau: f64,
        weights: TokenWeighting<'_>,
        grad: &mut GradientVector,
    ) -> Result<()> {
        check_tau(tau)?;
        if output.is_empty() {
            return Err(Error::Input("output must be nonempty".into()));
        }
        if let TokenWeighting::PerToken(ws) = weights {
            if ws.len() != output.len() {
                return Err(Error::Internal("per-token weight length mismatch".into()));
            }
        }
        self.check_tokens(prompt)?;
        self.check_tokens(output)?;
        if output.contains(&self.vocab.pad()) {
            return Err(Error::Input("PAD is not a legal output token".into()));
        }
        if grad.len() != self.param_count() {
            return Err(Error::Internal(format!(
                "gradient length {} does not match param_count {}",
                grad.len(),
                self.param_count()
            )));
        }
        let pad = self.vocab.pad();
        let v = self.vocab.size();
        let mut prefix = prompt.to_vec();
        for (t, &tok) in output.iter().enumerate() {
            let w = weights.at(t);
            if w == 0.0 {
                prefix.push(tok);
                continue;
            }
            let key = self.context_key(&prefix);
            match &self.inner {
                PolicyInner::Tabular(tab) => {
                    let row = *tab.index.get(&key).ok_or_else(|| {
                        Error::Internal("context row not materialized; call ensure_contexts before taking gradients".into())
                    })?;
                    let p = math::masked_softmax_t(&tab.rows[row], tau, Some(pad));
                    let base = row * v;
                    for k in 0..v {
                        let e = if k == tok { 1.0 } else { 0.0 };
                        grad.values[base + k] += w * (e - p[k]) / tau;
                    }
                }
                PolicyInner::Neural(n) => {
                    self.neural_backward(n, &key, tok, tau, w, grad);
                }
            }
            prefix.push(tok);
        }
        Ok(())
    }

    /// Materialize the tabular rows a (prompt, output) pair will touch.
    /// No-op for neural policies. New rows start at zero, which leaves
    /// every distribution unchanged.
    pub fn ensure_contexts(&mut self, prompt: &[TokenId], output: &[TokenId]) -> Result<()> {
        self.check_tokens(prompt)?;
        self.check_tokens(output)?;
        let window = self.window;
        let pad = self.vocab.pad();
        let v = self.vocab.size();
        let PolicyInner::Tabular(tab) = &mut self.inner else {
            return Ok(());
        };
        let mut prefix = prompt.to_vec();
        for &tok in output {
            let key = context_key_of(&prefix, window, pad);
            if !tab.index.contains_key(&key) {
                tab.index.insert(key.clone(), tab.rows.len());
                tab.contexts.push(key);
                tab.rows.push(vec![0.0; v]);
            }
            prefix.push(tok);
        }
        Ok(())
    }

    /// Overwrite (materializing if needed) one tabular logit row.
    pub fn set_tabular_row(&mut self, context: &[TokenId], logits: Vec<f64>) -> Result<()> {
        let v = self.vocab.size();
        if logits.len() != v {
            return Err(Error::Input(format!("logit row must have length {v}")));
        }
        self.check_tokens(context)?;
        let key = context_key_of(context, self.window, self.vocab.pad());
        let PolicyInner::Tabular(tab) = &mut self.inner else {
            return Err(Error::Input("set_tabular_row requires a tabular policy".into()));
        };
        match tab.index.get(&key) {
            Some(&r) => tab.rows[r] = logits,
            None => {
                tab.index.insert(key.clone(), tab.rows.len());
                tab.contexts.push(key);
                tab.rows.push(logits);
            }
        }
        Ok(())
    }

    /// Materialized tabular context keys in flat-layout (insertion) order.
    pub fn tabular_contexts(&self) -> Result<&[Vec<TokenId>]> {
        match &self.inner {
            PolicyInner::Tabular(t) => Ok(&t.contexts),
            PolicyInner::Neural(_) => Err(Error::Input("not a tabular policy".into())),
        }
    }

    /// new params = old +/- step_size * grad. The old value is unchanged.
    pub fn apply_update(
        &self,
        grad: &GradientVector,
        step_size: f64,
        direction: UpdateDirection,
    ) -> Result<PolicyParams> {
        if step_size <= 0.0 {
            return Err(Error::Config("step_size must be positive".into()));
        }
        if grad.len() != self.param_count() {
            return Err(Error::Internal(format!(
                "update length {} does not match param_count {}",
                grad.len(),
                self.param_count()
            )));
        }
        let sign = match direction {
            UpdateDirection::Ascent => 1.0,
            UpdateDirection::Descent => -1.0,
        };
        let mut out = self.clone();
        let mut offset = 0;
        match &mut out.inner {
            PolicyInner::Tabular(t) => {
                for row in &mut t.rows {
                    for x in row.iter_mut() {
                        *x += sign * step_size * grad.values[offset];
                        offset += 1;
                    }
                }
            }
            PolicyInner::Neural(n) => {
                for seg in [&mut n.embed, &mut n.w_hidden, &mut n.b_hidden, &mut n.w_out, &mut n.b_out] {
                    for x in seg.iter_mut() {
                        *x += sign * step_size * grad.values[offset];
                        offset += 1;
                    }
                }
            }
        }
        Ok(out)
    }

    fn neural_forward(&self, n: &NeuralPolicy, key: &[TokenId]) -> NeuralActivations {
        let d = self.hidden_dim;
        let w = self.window;
        let v = self.vocab.size();
        let mut x = Vec::with_capacity(w * d);
        for &tok in key {
            x.extend_from_slice(&n.embed[tok * d..(tok + 1) * d]);
        }
        let mut h = vec![0.0; d];
        for j in 0..d {
            let row = &n.w_hidden[j * w * d..(j + 1) * w * d];
            let pre: f64 = row.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() + n.b_hidden[j];
            h[j] = pre.tanh();
        }
        let mut logits = vec![0.0; v];
        for k in 0..v {
            let row = &n.w_out[k * d..(k + 1) * d];
            logits[k] = row.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>() + n.b_out[k];
        }
        NeuralActivations { x, h, logits }
    }

    fn neural_backward(
        &self,
        n: &NeuralPolicy,
        key: &[TokenId],
        tok: TokenId,
        tau: f64,
        weight: f64,
        grad: &mut GradientVector,
    ) {
        let d = self.hidden_dim;
        let w = self.window;
        let v = self.vocab.size();
        let acts = self.neural_forward(n, key);
        let p = math::masked_softmax_t(&acts.logits, tau, Some(self.vocab.pad()));

        // d logp / d z = (e_tok - p) / tau
        let dz: Vec<f64> = (0..v)
            .map(|k| {
                let e = if k == tok { 1.0 } else { 0.0 };
                weight * (e - p[k]) / tau
            })
            .collect();

        let emb_off = 0;
        let wh_off = emb_off + v * d;
        let bh_off = wh_off + d * w * d;
        let wo_off = bh_off + d;
        let bo_off = wo_off + v * d;

        // output layer
        let mut dh = vec![0.0; d];
        for k in 0..v {
            let g = dz[k];
            if g == 0.0 {
                continue;
            }
            grad.values[bo_off + k] += g;
            let row = &n.w_out[k * d..(k + 1) * d];
            for j in 0..d {
                grad.values[wo_off + k * d + j] += g * acts.h[j];
                dh[j] += g * row[j];
            }
        }

        // hidden layer through tanh
        for j in 0..d {
            let dpre = dh[j] * (1.0 - acts.h[j] * acts.h[j]);
            if dpre == 0.0 {
                continue;
            }
            grad.values[bh_off + j] += dpre;
            let row_off = wh_off + j * w * d;
            for i in 0..w * d {
                grad.values[row_off + i] += dpre * acts.x[i];
            }
        }

        // embeddings: dx = W_hidden^T dpre, routed to each context slot
        let mut dx = vec![0.0; w * d];
        for j in 0..d {
            let dpre = dh[j] * (1.0 - acts.h[j] * acts.h[j]);
            if dpre == 0.0 {
                continue;
            }
            let row = &n.w_hidden[j * w * d..(j + 1) * w * d];
            for i in 0..w * d {
                dx[i] += dpre * row[i];
            }
        }
        for (slot, &tok_in) in key.iter().enumerate() {
            let base = emb_off + tok_in * d;
            for j in 0..d {
                grad.values[base + j] += dx[slot * d + j];
            }
        }
    }
}

struct NeuralActivations {
    x: Vec<f64>,
    h: Vec<f64>,
    logits: Vec<f64>,
}

fn context_key_of(prefix: &[TokenId], window: usize, pad: TokenId) -> Vec<TokenId> {
    let mut key = Vec::with_capacity(window);
    if prefix.len() < window {
        key.resize(window - prefix.len(), pad);
    }
    let start = prefix.len().saturating_sub(window);
    key.extend_from_slice(&prefix[start..]);
    key
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!("temperature must be positive and finite, got {tau}")));
    }
    Ok(())
}
