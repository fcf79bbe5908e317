//! Synthetic verifiable tasks with exact reward functions.
//!
//! Every prompt has exactly one canonical answer, so reward is an exact
//! token match and never needs a learned grader. Prompts and answers use
//! one token per digit or symbol (no multi-digit merging), which keeps the
//! vocabulary small enough for tabular policies.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{TokenId, Vocabulary};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// "a+b=" -> (a+b) mod p, with a, b in [0, p).
    ModularAdd,
    /// "s1..sL=" -> the sequence reversed.
    SequenceReverse,
    /// "s1..sL=" -> the sequence sorted ascending.
    SortedCopy,
}

/// Declarative task description; `Task::new` turns it into a runnable task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Modulus p for ModularAdd.
    #[serde(default)]
    pub modulus: usize,
    /// Sequence length L for SequenceReverse / SortedCopy.
    #[serde(default)]
    pub seq_len: usize,
    /// Digit alphabet size for SequenceReverse / SortedCopy.
    #[serde(default)]
    pub alphabet: usize,
}

impl TaskSpec {
    pub fn modular_add(modulus: usize) -> Self {
        Self { kind: TaskKind::ModularAdd, modulus, seq_len: 0, alphabet: 0 }
    }

    pub fn sequence_reverse(seq_len: usize, alphabet: usize) -> Self {
        Self { kind: TaskKind::SequenceReverse, modulus: 0, seq_len, alphabet }
    }

    pub fn sorted_copy(seq_len: usize, alphabet: usize) -> Self {
        Self { kind: TaskKind::SortedCopy, modulus: 0, seq_len, alphabet }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            TaskKind::ModularAdd => {
                if !(2..=99).contains(&self.modulus) {
                    return Err(Error::Config(format!(
                        "modular_add requires 2 <= modulus <= 99, got {}",
                        self.modulus
                    )));
                }
            }
            TaskKind::SequenceReverse | TaskKind::SortedCopy => {
                if self.seq_len < 1 || self.seq_len > 8 {
                    return Err(Error::Config(format!("seq_len must be in 1..=8, got {}", self.seq_len)));
                }
                if !(2..=10).contains(&self.alphabet) {
                    return Err(Error::Config(format!("alphabet must be in 2..=10, got {}", self.alphabet)));
                }
            }
        }
        Ok(())
    }
}

/// Verifier outcome: reward 1 iff the parsed answer equals the canonical
/// answer exactly. Malformed outputs score 0, never an error.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifierResult {
    pub reward: f64,
    pub parsed_answer: Option<Vec<TokenId>>,
}

/// Prompts drawn from the instance space.
#[derive(Debug, Clone)]
pub struct PromptSet {
    pub prompts: Vec<Vec<TokenId>>,
    /// Set when `count` exceeded the instance space and sampling used
    /// replacement.
    pub with_replacement: bool,
}

/// A runnable task: spec, vocabulary and cached separator ids.
#[derive(Debug, Clone)]
pub struct Task {
    spec: TaskSpec,
    vocab: Vocabulary,
    digit_ids: Vec<TokenId>,
    plus_id: Option<TokenId>,
    eq_id: TokenId,
}

impl Task {
    pub fn new(spec: TaskSpec) -> Result<Self> {
        spec.validate()?;
        let mut symbols: Vec<String> = Vec::new();
        let digit_count = match spec.kind {
            TaskKind::ModularAdd => 10,
            TaskKind::SequenceReverse | TaskKind::SortedCopy => spec.alphabet,
        };
        for d in 0..digit_count {
            symbols.push(d.to_string());
        }
        if spec.kind == TaskKind::ModularAdd {
            symbols.push("+".to_string());
        }
        symbols.push("=".to_string());
        let vocab = Vocabulary::new(&symbols)?;
        let digit_ids = (0..digit_count)
            .map(|d| vocab.id(&d.to_string()).expect("digit in vocab"))
            .collect();
        let plus_id = vocab.id("+");
        let eq_id = vocab.id("=").expect("= in vocab");
        Ok(Self { spec, vocab, digit_ids, plus_id, eq_id })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Number of distinct prompts.
    pub fn instance_count(&self) -> usize {
        match self.spec.kind {
            TaskKind::ModularAdd => self.spec.modulus * self.spec.modulus,
            TaskKind::SequenceReverse | TaskKind::SortedCopy => {
                self.spec.alphabet.pow(self.spec.seq_len as u32)
            }
        }
    }

    /// Context window wide enough that the canonical mapping is a function
    /// of the visible context at every answer step.
    pub fn recommended_window(&self) -> usize {
        match self.spec.kind {
            TaskKind::ModularAdd => {
                let digits = digits_of(self.spec.modulus - 1).len();
                // prompt tail plus previously emitted answer digits
                (2 * digits + 2) + (self.max_answer_len() - 1)
            }
            TaskKind::SequenceReverse | TaskKind::SortedCopy => 2 * self.spec.seq_len,
        }
    }

    pub fn max_answer_len(&self) -> usize {
        match self.spec.kind {
            TaskKind::ModularAdd => digits_of(self.spec.modulus - 1).len(),
            TaskKind::SequenceReverse | TaskKind::SortedCopy => self.spec.seq_len,
        }
    }

    /// Generous generation cap: answer plus EOS plus slack for wrong turns.
    pub fn recommended_max_len(&self) -> usize {
        self.max_answer_len() + 3
    }

    /// All prompts in deterministic lexicographic order.
    pub fn enumerate_prompts(&self) -> Vec<Vec<TokenId>> {
        match self.spec.kind {
            TaskKind::ModularAdd => {
                let p = self.spec.modulus;
                let mut out = Vec::with_capacity(p * p);
                for a in 0..p {
                    for b in 0..p {
                        out.push(self.encode_add_prompt(a, b));
                    }
                }
                out
            }
            TaskKind::SequenceReverse | TaskKind::SortedCopy => {
                let a = self.spec.alphabet;
                let l = self.spec.seq_len;
                let mut out = Vec::with_capacity(a.pow(l as u32));
                let mut seq = vec![0usize; l];
                loop {
                    let mut prompt: Vec<TokenId> = seq.iter().map(|&d| self.digit_ids[d]).collect();
                    prompt.push(self.eq_id);
                    out.push(prompt);
                    // odometer increment
                    let mut i = l;
                    loop {
                        if i == 0 {
                            return out;
                        }
                        i -= 1;
                        seq[i] += 1;
                        if seq[i] < a {
                            break;
                        }
                        seq[i] = 0;
                    }
                }
            }
        }
    }

    /// Draw `count` prompts. Unique while `count` fits in the instance
    /// space; beyond that, sampled with replacement and flagged.
    pub fn gen_prompts(&self, count: usize, rng: &mut RngStream) -> Result<PromptSet> {
        if count < 1 {
            return Err(Error::Input("prompt count must be >= 1".into()));
        }
        let all = self.enumerate_prompts();
        if count <= all.len() {
            let mut order: Vec<usize> = (0..all.len()).collect();
            rng.shuffle(&mut order);
            let prompts = order[..count].iter().map(|&i| all[i].clone()).collect();
            Ok(PromptSet { prompts, with_replacement: false })
        } else {
            let prompts = (0..count).map(|_| all[rng.gen_range(all.len())].clone()).collect();
            Ok(PromptSet { prompts, with_replacement: true })
        }
    }

    fn encode_add_prompt(&self, a: usize, b: usize) -> Vec<TokenId> {
        let mut prompt: Vec<TokenId> = digits_of(a).iter().map(|&d| self.digit_ids[d]).collect();
        prompt.push(self.plus_id.expect("+ in modular_add vocab"));
        prompt.extend(digits_of(b).iter().map(|&d| self.digit_ids[d]));
        prompt.push(self.eq_id);
        prompt
    }

    /// Canonical answer tokens (without EOS) for a well-formed prompt.
    pub fn canonical_answer(&self, prompt: &[TokenId]) -> Result<Vec<TokenId>> {
        match self.spec.kind {
            TaskKind::ModularAdd => {
                let (a, b) = self.parse_add_prompt(prompt)?;
                let ans = (a + b) % self.spec.modulus;
                Ok(digits_of(ans).iter().map(|&d| self.digit_ids[d]).collect())
            }
            TaskKind::SequenceReverse => {
                let seq = self.parse_seq_prompt(prompt)?;
                Ok(seq.into_iter().rev().collect())
            }
            TaskKind::SortedCopy => {
                let mut seq = self.parse_seq_prompt(prompt)?;
                seq.sort_unstable();
                Ok(seq)
            }
        }
    }

    fn parse_add_prompt(&self, prompt: &[TokenId]) -> Result<(usize, usize)> {
        let plus = self.plus_id.expect("modular_add vocab has +");
        if prompt.last() != Some(&self.eq_id) {
            return Err(Error::Input("prompt must end with '='".into()));
        }
        let body = &prompt[..prompt.len() - 1];
        let split = body
            .iter()
            .position(|&t| t == plus)
            .ok_or_else(|| Error::Input("prompt is missing '+'".into()))?;
        let a = self.decode_number(&body[..split])?;
        let b = self.decode_number(&body[split + 1..])?;
        if a >= self.spec.modulus || b >= self.spec.modulus {
            return Err(Error::Input("operand out of range".into()));
        }
        Ok((a, b))
    }

    fn parse_seq_prompt(&self, prompt: &[TokenId]) -> Result<Vec<TokenId>> {
        if prompt.last() != Some(&self.eq_id) {
            return Err(Error::Input("prompt must end with '='".into()));
        }
        let body = &prompt[..prompt.len() - 1];
        if body.len() != self.spec.seq_len {
            return Err(Error::Input("prompt body has wrong length".into()));
        }
        for &t in body {
            if !self.digit_ids.contains(&t) {
                return Err(Error::Input("prompt contains a non-digit token".into()));
            }
        }
        Ok(body.to_vec())
    }

    fn decode_number(&self, tokens: &[TokenId]) -> Result<usize> {
        if tokens.is_empty() {
            return Err(Error::Input("empty number".into()));
        }
        let mut n = 0usize;
        for &t in tokens {
            let d = self
                .digit_ids
                .iter()
                .position(|&id| id == t)
                .ok_or_else(|| Error::Input("non-digit token in number".into()))?;
            n = n * 10 + d;
        }
        Ok(n)
    }

    /// Exact-match reward. A single trailing EOS is stripped before the
    /// comparison, so truncated-but-correct outputs still score 1.
    pub fn verify(&self, prompt: &[TokenId], output: &[TokenId]) -> VerifierResult {
        let canonical = match self.canonical_answer(prompt) {
            Ok(c) => c,
            Err(_) => return VerifierResult { reward: 0.0, parsed_answer: None },
        };
        let stripped = match output.last() {
            Some(&t) if t == self.vocab.eos() => &output[..output.len() - 1],
            _ => output,
        };
        let reward = if stripped == canonical.as_slice() { 1.0 } else { 0.0 };
        VerifierResult { reward, parsed_answer: Some(stripped.to_vec()) }
    }

    /// Answer tokens with EOS appended, as used in training pairs.
    pub fn canonical_output(&self, prompt: &[TokenId]) -> Result<Vec<TokenId>> {
        let mut out = self.canonical_answer(prompt)?;
        out.push(self.vocab.eos());
        Ok(out)
    }

    /// Noisy supervised corpus: fraction (1 - noise_rate) of pairs carry the
    /// canonical answer; the rest carry an answer drawn uniformly from the
    /// non-canonical answers.
    pub fn build_pretrain_corpus(
        &self,
        size: usize,
        noise_rate: f64,
        rng: &mut RngStream,
    ) -> Result<Vec<(Vec<TokenId>, Vec<TokenId>)>> {
        if !(0.0..1.0).contains(&noise_rate) {
            return Err(Error::Config(format!("noise_rate must be in [0, 1), got {noise_rate}")));
        }
        let all = self.enumerate_prompts();
        let mut pairs = Vec::with_capacity(size);
        for _ in 0..size {
            let prompt = all[rng.gen_range(all.len())].clone();
            let canonical = self.canonical_answer(&prompt)?;
            let answer = if rng.next_f64() < noise_rate {
                self.wrong_answer(&prompt, &canonical, rng)?
            } else {
                canonical
            };
            let mut output = answer;
            output.push(self.vocab.eos());
            pairs.push((prompt, output));
        }
        Ok(pairs)
    }

    fn wrong_answer(
        &self,
        prompt: &[TokenId],
        canonical: &[TokenId],
        rng: &mut RngStream,
    ) -> Result<Vec<TokenId>> {
        match self.spec.kind {
            TaskKind::ModularAdd => {
                let p = self.spec.modulus;
                let (a, b) = self.parse_add_prompt(prompt)?;
                let correct = (a + b) % p;
                let wrong = (correct + 1 + rng.gen_range(p - 1)) % p;
                Ok(digits_of(wrong).iter().map(|&d| self.digit_ids[d]).collect())
            }
            TaskKind::SequenceReverse | TaskKind::SortedCopy => loop {
                let cand: Vec<TokenId> = (0..self.spec.seq_len)
                    .map(|_| self.digit_ids[rng.gen_range(self.spec.alphabet)])
                    .collect();
                if cand != canonical {
                    return Ok(cand);
                }
            },
        }
    }

    /// FNV-1a fingerprint of the spec, for tagging exported instances.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(&self.spec).expect("spec serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }

    /// Line-delimited JSON export of task instances.
    pub fn export_instances<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        #[derive(Serialize)]
        struct InstanceRecord<'a> {
            prompt: &'a [TokenId],
            canonical: Vec<TokenId>,
            fingerprint: &'a str,
        }
        let fp = self.fingerprint();
        for prompt in self.enumerate_prompts() {
            let rec = InstanceRecord {
                prompt: &prompt,
                canonical: self.canonical_answer(&prompt)?,
                fingerprint: &fp,
            };
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn digits_of(n: usize) -> Vec<usize> {
    if n == 0 {
        return vec![0];
    }
    let mut digits = Vec::new();
    let mut m = n;
    while m > 0 {
        digits.push(m % 10);
        m /= 10;
    }
    digits.reverse();
    digits
}
