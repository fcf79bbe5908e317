//! Gradient-dynamics verification lab.
//!
//! Exact (enumeration) and Monte Carlo expected gradients for the
//! sample-then-train loop, the score-function identity, the decoupled-
//! temperature closed form, and regime classification.
//!
//! The algebra under test: with logits z, training distribution
//! p_t = softmax(z/tau_t) and sampling distribution p_s = softmax(z/tau_s),
//! the gradient of the expected negative log-likelihood over samples drawn
//! at tau_s is
//!
//! ```text
//! grad_z L = (1/tau_t) (p_t - p_s)
//! ```
//!
//! so coupled temperatures give a null expected update, tau_s < tau_t
//! pushes the argmax logit up under descent, and tau_s > tau_t pushes it
//! down. Raw logit rows (one-token tabular policies, where the Jacobian is
//! the identity) isolate this distribution algebra; full policies are
//! checked through enumeration and sampling.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_indexed, ExecMode};
use crate::math;
use crate::policy::{GradientVector, PolicyParams, TokenId, TokenWeighting};
use crate::rng::RngStream;
use crate::sampling;

// ---------------------------------------------------------------------------
// Raw logit-row probes (identity Jacobian)
// ---------------------------------------------------------------------------

/// ||E_{o ~ p_tau}[grad_z log p_tau(o)]||_inf by full enumeration.
/// The score-function identity says this is exactly zero.
pub fn score_identity_residual(logits: &[f64], tau: f64) -> f64 {
    let p = math::softmax_t(logits, tau);
    let mut acc = vec![0.0; logits.len()];
    for (o, &po) in p.iter().enumerate() {
        for k in 0..logits.len() {
            let e = if k == o { 1.0 } else { 0.0 };
            acc[k] += po * (e - p[k]) / tau;
        }
    }
    acc.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// grad_z of the expected NLL, computed outcome by outcome:
/// sum_o p_s(o) * (p_t - e_o)/tau_t, with p_s frozen.
pub fn enumerated_nll_grad_row(logits: &[f64], tau_sample: f64, tau_train: f64) -> Vec<f64> {
    let ps = math::softmax_t(logits, tau_sample);
    let pt = math::softmax_t(logits, tau_train);
    let mut acc = vec![0.0; logits.len()];
    for (o, &po) in ps.iter().enumerate() {
        for k in 0..logits.len() {
            let e = if k == o { 1.0 } else { 0.0 };
            acc[k] += po * (pt[k] - e) / tau_train;
        }
    }
    acc
}

/// The closed form (1/tau_t)(p_t - p_s).
pub fn closed_form_nll_grad_row(logits: &[f64], tau_sample: f64, tau_train: f64) -> Vec<f64> {
    let ps = math::softmax_t(logits, tau_sample);
    let pt = math::softmax_t(logits, tau_train);
    ps.iter().zip(&pt).map(|(s, t)| (t - s) / tau_train).collect()
}

/// ||enumerated - closed form||_inf for one logit row.
pub fn verify_eq7(logits: &[f64], tau_sample: f64, tau_train: f64) -> f64 {
    let lhs = enumerated_nll_grad_row(logits, tau_sample, tau_train);
    let rhs = closed_form_nll_grad_row(logits, tau_sample, tau_train);
    lhs.iter()
        .zip(&rhs)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    /// tau_s == tau_t: null expected update.
    Coupled,
    /// tau_s < tau_t: expected descent reinforces the argmax.
    Stable,
    /// tau_s > tau_t: expected descent erodes the argmax.
    Inverted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeVerdict {
    pub tau_s: f64,
    pub tau_t: f64,
    pub regime: Regime,
    /// ||expected descent update||_2 on the probe row at unit step size.
    pub expected_update_norm: f64,
    /// Signed change of the argmax logit under one expected descent step.
    pub argmax_logit_delta: f64,
}

/// Classify the temperature pair and measure the exact expected update on a
/// probe logit row (default [1, 0, 0]).
pub fn classify_regime(tau_s: f64, tau_t: f64, probe_logits: Option<&[f64]>) -> RegimeVerdict {
    let default_probe = [1.0, 0.0, 0.0];
    let probe = probe_logits.unwrap_or(&default_probe);
    let grad = enumerated_nll_grad_row(probe, tau_s, tau_t);
    let delta: Vec<f64> = grad.iter().map(|g| -g).collect(); // unit descent step
    let argmax = math::argmax_tiebreak_lowest(probe, None);
    let regime = if (tau_s - tau_t).abs() < 1e-12 {
        Regime::Coupled
    } else if tau_s < tau_t {
        Regime::Stable
    } else {
        Regime::Inverted
    };
    RegimeVerdict {
        tau_s,
        tau_t,
        regime,
        expected_update_norm: delta.iter().map(|d| d * d).sum::<f64>().sqrt(),
        argmax_logit_delta: delta[argmax],
    }
}

// ---------------------------------------------------------------------------
// Full-policy expected gradients
// ---------------------------------------------------------------------------

/// Clone with every context reachable within `max_len` materialized, so
/// gradients have a stable flat layout. No-op clone for neural policies.
pub fn materialize_reachable(params: &PolicyParams, prompt: &[TokenId], max_len: usize) -> Result<PolicyParams> {
    let mut out = params.clone();
    let outputs = sampling::enumerate_outputs(params, prompt, 1.0, max_len)?;
    for (o, _) in &outputs {
        out.ensure_contexts(prompt, o)?;
    }
    Ok(out)
}

/// E_{o ~ pi(.|q; tau_sample)}[grad log pi(o|q; tau_train)] by exact
/// enumeration of the output space (no sampling). With max_len = 1 the
/// output space is exactly the legal vocabulary.
pub fn exact_expected_grad(
    params: &PolicyParams,
    prompt: &[TokenId],
    tau_sample: f64,
    tau_train: f64,
    max_len: usize,
) -> Result<GradientVector> {
    let outputs = sampling::enumerate_outputs(params, prompt, tau_sample, max_len)?;
    let mut grad = GradientVector::zeros(params.param_count());
    for (o, p) in &outputs {
        params.accumulate_logprob_gradient(prompt, o, tau_train, TokenWeighting::Uniform(*p), &mut grad)?;
    }
    Ok(grad)
}

/// Gradient of the enumeration-exact expected NLL (the descent objective).
pub fn exact_expected_nll_grad(
    params: &PolicyParams,
    prompt: &[TokenId],
    tau_sample: f64,
    tau_train: f64,
    max_len: usize,
) -> Result<GradientVector> {
    let mut g = exact_expected_grad(params, prompt, tau_sample, tau_train, max_len)?;
    g.scale(-1.0);
    Ok(g)
}

/// Probability that generation visits each materialized context, under
/// sampling at `tau` (enumeration, no sampling).
pub fn context_visit_probs(
    params: &PolicyParams,
    prompt: &[TokenId],
    tau: f64,
    max_len: usize,
) -> Result<HashMap<Vec<TokenId>, f64>> {
    let outputs = sampling::enumerate_outputs(params, prompt, tau, max_len)?;
    let mut visits: HashMap<Vec<TokenId>, f64> = HashMap::new();
    for (o, p) in &outputs {
        let mut prefix = prompt.to_vec();
        for &tok in o {
            *visits.entry(params.context_key(&prefix)).or_insert(0.0) += p;
            prefix.push(tok);
        }
    }
    Ok(visits)
}

/// Monte Carlo estimate of E[grad log pi(o; tau_train)] over rollouts at
/// tau_sample, with per-coordinate standard errors.
#[derive(Debug, Clone)]
pub struct McGradEstimate {
    pub mean: GradientVector,
    pub se: Vec<f64>,
    /// l2 norm of the per-coordinate standard errors.
    pub aggregate_se: f64,
    pub samples: usize,
}

const MC_CHUNK: usize = 1024;

pub fn mc_expected_grad(
    params: &PolicyParams,
    prompt: &[TokenId],
    tau_sample: f64,
    tau_train: f64,
    num_samples: usize,
    max_len: usize,
    base: &RngStream,
) -> Result<McGradEstimate> {
    mc_expected_grad_with(ExecMode::default(), params, prompt, tau_sample, tau_train, num_samples, max_len, base)
}

#[allow(clippy::too_many_arguments)]
pub fn mc_expected_grad_with(
    mode: ExecMode,
    params: &PolicyParams,
    prompt: &[TokenId],
    tau_sample: f64,
    tau_train: f64,
    num_samples: usize,
    max_len: usize,
    base: &RngStream,
) -> Result<McGradEstimate> {
    if num_samples < 100 {
        return Err(Error::Input("mc_expected_grad needs at least 100 samples".into()));
    }
    let dim = params.param_count();
    let chunks = num_samples.div_ceil(MC_CHUNK);
    // fixed chunk boundaries and a sequential fold keep the result
    // bit-identical across execution modes
    let partials: Vec<Result<(Vec<f64>, Vec<f64>)>> = map_indexed(mode, chunks, |c| {
        let lo = c * MC_CHUNK;
        let hi = ((c + 1) * MC_CHUNK).min(num_samples);
        let mut sum = vec![0.0; dim];
        let mut sumsq = vec![0.0; dim];
        for i in lo..hi {
            let mut rng = base.substream(i as u64);
            let r = sampling::rollout(params, prompt, tau_sample, max_len, &mut rng)?;
            let g = params.logprob_gradient(&r.prompt, &r.output, tau_train)?;
            for (k, &v) in g.values.iter().enumerate() {
                sum[k] += v;
                sumsq[k] += v * v;
            }
        }
        Ok((sum, sumsq))
    });
    let mut sum = vec![0.0; dim];
    let mut sumsq = vec![0.0; dim];
    for p in partials {
        let (s, q) = p?;
        for k in 0..dim {
            sum[k] += s[k];
            sumsq[k] += q[k];
        }
    }
    let n = num_samples as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let se: Vec<f64> = (0..dim)
        .map(|k| {
            let var = ((sumsq[k] / n) - mean[k] * mean[k]).max(0.0) * n / (n - 1.0);
            (var / n).sqrt()
        })
        .collect();
    let aggregate_se = se.iter().map(|s| s * s).sum::<f64>().sqrt();
    Ok(McGradEstimate { mean: GradientVector { values: mean }, se, aggregate_se, samples: num_samples })
}

/// Central finite differences of an arbitrary scalar function of the
/// parameters. Independent oracle for analytic gradients.
pub fn fd_gradient<F>(params: &PolicyParams, f: F, h: f64) -> Result<GradientVector>
where
    F: Fn(&PolicyParams) -> Result<f64>,
{
    let mut grad = GradientVector::zeros(params.param_count());
    for i in 0..params.param_count() {
        let up = f(&params.perturbed(i, h)?)?;
        let dn = f(&params.perturbed(i, -h)?)?;
        grad.values[i] = (up - dn) / (2.0 * h);
    }
    Ok(grad)
}

/// Finite-difference gradient of the sequence log-probability.
pub fn fd_logprob_gradient(
    params: &PolicyParams,
    prompt: &[TokenId],
    output: &[TokenId],
    tau: f64,
    h: f64,
) -> Result<GradientVector> {
    fd_gradient(params, |p| Ok(p.sequence_logprob(prompt, output, tau)?.0), h)
}

/// Richardson-extrapolated central differences (h and h/2), for oracles
/// that need residuals below the plain-FD truncation error.
pub fn fd_logprob_gradient_refined(
    params: &PolicyParams,
    prompt: &[TokenId],
    output: &[TokenId],
    tau: f64,
    h: f64,
) -> Result<GradientVector> {
    let coarse = fd_logprob_gradient(params, prompt, output, tau, h)?;
    let fine = fd_logprob_gradient(params, prompt, output, tau, h / 2.0)?;
    let values = coarse
        .values
        .iter()
        .zip(&fine.values)
        .map(|(c, f)| (4.0 * f - c) / 3.0)
        .collect();
    Ok(GradientVector { values })
}

// ---------------------------------------------------------------------------
// Check grid
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub vocab_sizes: Vec<usize>,
    pub vectors_per_size: usize,
    /// Temperatures for the coupled identity check.
    pub taus: Vec<f64>,
    /// (tau_s, tau_t) pairs for the decoupled checks.
    pub tau_pairs: Vec<(f64, f64)>,
    /// Logits are drawn uniformly from [-logit_scale, logit_scale].
    pub logit_scale: f64,
    pub seed: u64,
}

impl Default for GridSpec {
    fn default() -> Self {
        let taus = vec![0.3, 0.6, 1.0, 1.5];
        let mut tau_pairs = Vec::new();
        for &a in &taus {
            for &b in &taus {
                tau_pairs.push((a, b));
            }
        }
        Self {
            vocab_sizes: vec![2, 3, 5, 17],
            vectors_per_size: 20,
            taus,
            tau_pairs,
            logit_scale: 5.0,
            seed: 0,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_sizes.is_empty()
            || self.vectors_per_size == 0
            || self.taus.is_empty()
            || self.tau_pairs.is_empty()
        {
            return Err(Error::Input("empty grid".into()));
        }
        if self.vocab_sizes.iter().any(|&v| v < 2) {
            return Err(Error::Input("vocab sizes must be >= 2".into()));
        }
        for &t in self.taus.iter().chain(self.tau_pairs.iter().flat_map(|(a, b)| [a, b])) {
            if !(t > 0.0) {
                return Err(Error::Input(format!("temperatures must be positive, got {t}")));
            }
        }
        Ok(())
    }

    fn random_rows(&self) -> Vec<Vec<f64>> {
        let mut rng = RngStream::new(self.seed, 0x67726964);
        let mut rows = Vec::new();
        for &v in &self.vocab_sizes {
            for _ in 0..self.vectors_per_size {
                rows.push((0..v).map(|_| rng.next_symmetric(self.logit_scale)).collect());
            }
        }
        rows
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    pub max_residual: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VerificationReport {
    pub checks: Vec<CheckResult>,
    pub notes: Vec<String>,
}

impl VerificationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "{:<28} cases={:<6} max_residual={:<12.3e} tol={:<9.1e} {}\n",
                c.name,
                c.cases,
                c.max_residual,
                c.tolerance,
                if c.passed { "PASS" } else { "FAIL" }
            ));
        }
        for n in &self.notes {
            out.push_str(&format!("note: {n}\n"));
        }
        out
    }
}

/// Run the verification grid. `inject_fault` corrupts the closed form (test
/// hook for the failure path).
pub fn run_grid(spec: &GridSpec, inject_fault: bool) -> Result<VerificationReport> {
    spec.validate()?;
    let rows = spec.random_rows();
    let mut report = VerificationReport::default();

    // score-function identity at coupled temperatures
    {
        let mut max_residual = 0.0f64;
        let mut cases = 0;
        for row in &rows {
            for &tau in &spec.taus {
                max_residual = max_residual.max(score_identity_residual(row, tau));
                cases += 1;
            }
        }
        let tolerance = 1e-14;
        report.checks.push(CheckResult {
            name: "score_function_identity".into(),
            cases,
            max_residual,
            tolerance,
            passed: max_residual <= tolerance,
        });
    }

    // decoupled closed form
    {
        let mut max_residual = 0.0f64;
        let mut cases = 0;
        let fault = if inject_fault { -1.0 } else { 1.0 };
        for row in &rows {
            for &(ts, tt) in &spec.tau_pairs {
                let lhs = enumerated_nll_grad_row(row, ts, tt);
                let rhs = closed_form_nll_grad_row(row, ts, tt);
                let residual = lhs
                    .iter()
                    .zip(&rhs)
                    .fold(0.0f64, |m, (a, b)| m.max((a - fault * b).abs()));
                max_residual = max_residual.max(residual);
                cases += 1;
            }
        }
        let tolerance = 1e-10;
        report.checks.push(CheckResult {
            name: "decoupled_closed_form".into(),
            cases,
            max_residual,
            tolerance,
            passed: max_residual <= tolerance,
        });
    }

    // regime directions on every random row with a unique argmax
    {
        let mut coupled_residual = 0.0f64;
        let mut directions_ok = true;
        let mut cases = 0;
        for row in &rows {
            let argmax = math::argmax_tiebreak_lowest(row, None);
            for &(ts, tt) in &spec.tau_pairs {
                let verdict = classify_regime(ts, tt, Some(row));
                cases += 1;
                match verdict.regime {
                    Regime::Coupled => coupled_residual = coupled_residual.max(verdict.argmax_logit_delta.abs()),
                    Regime::Stable => directions_ok &= verdict.argmax_logit_delta > 0.0,
                    Regime::Inverted => directions_ok &= verdict.argmax_logit_delta < 0.0,
                }
                let _ = argmax;
            }
        }
        let tolerance = 1e-14;
        report.checks.push(CheckResult {
            name: "regime_directions".into(),
            cases,
            max_residual: coupled_residual,
            tolerance,
            passed: directions_ok && coupled_residual <= tolerance,
        });
    }

    // sign structure of p_t - p_s in the stable regime
    {
        let mut zero_sum_residual = 0.0f64;
        let mut argmax_sign_ok = true;
        let mut cases = 0;
        let mut off_argmax_total = 0usize;
        let mut off_argmax_negative = 0usize;
        for row in &rows {
            let argmax = math::argmax_tiebreak_lowest(row, None);
            for &(ts, tt) in &spec.tau_pairs {
                if ts >= tt {
                    continue;
                }
                let ps = math::softmax_t(row, ts);
                let pt = math::softmax_t(row, tt);
                let diff: Vec<f64> = pt.iter().zip(&ps).map(|(t, s)| t - s).collect();
                zero_sum_residual = zero_sum_residual.max(diff.iter().sum::<f64>().abs());
                argmax_sign_ok &= diff[argmax] < 0.0;
                for (k, &d) in diff.iter().enumerate() {
                    if k != argmax {
                        off_argmax_total += 1;
                        if d < 0.0 {
                            off_argmax_negative += 1;
                        }
                    }
                }
                cases += 1;
            }
        }
        let tolerance = 1e-12;
        report.checks.push(CheckResult {
            name: "stable_sign_structure".into(),
            cases,
            max_residual: zero_sum_residual,
            tolerance,
            passed: argmax_sign_ok && zero_sum_residual <= tolerance,
        });
        if off_argmax_total > 0 {
            report.notes.push(format!(
                "off-argmax coordinates of p_t - p_s negative in {off_argmax_negative}/{off_argmax_total} cases \
                 (the coordinate-wise sign is not universal; only the argmax sign and the zero sum are)",
            ));
        }
    }

    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{init_policy, PolicyKind, UpdateDirection, Vocabulary};

    /// One-token tabular policy whose legal tokens carry exactly `row`.
    fn probe_policy(row: &[f64]) -> PolicyParams {
        assert!(row.len() >= 2);
        let symbols: Vec<String> = (0..row.len() - 2).map(|i| format!("s{i}")).collect();
        let vocab = Vocabulary::new(&symbols).unwrap();
        let mut p = init_policy(PolicyKind::Tabular, vocab, 1, 0, 0).unwrap();
        let mut full = row.to_vec();
        full.push(0.0); // PAD slot, masked anyway
        assert_eq!(full.len(), p.vocab().size());
        p.set_tabular_row(&[0], full).unwrap();
        p
    }

    #[test]
    fn score_identity_holds_on_random_rows() {
        let mut rng = RngStream::new(1, 1);
        for v in [2usize, 3, 5, 17] {
            for _ in 0..10 {
                let row: Vec<f64> = (0..v).map(|_| rng.next_symmetric(5.0)).collect();
                for tau in [0.3, 0.6, 1.0, 1.5] {
                    assert!(score_identity_residual(&row, tau) <= 1e-14);
                }
            }
        }
    }

    #[test]
    fn eq7_residual_is_tiny_and_degenerate_cases_vanish() {
        let mut rng = RngStream::new(2, 1);
        for _ in 0..50 {
            let row: Vec<f64> = (0..5).map(|_| rng.next_symmetric(5.0)).collect();
            let ts = 0.1 + 1.9 * rng.next_f64();
            let tt = 0.1 + 1.9 * rng.next_f64();
            assert!(verify_eq7(&row, ts, tt) <= 1e-10);
        }
        // coupled: both sides are zero
        let row = [1.0, -0.5, 0.3];
        assert!(verify_eq7(&row, 0.7, 0.7) <= 1e-14);
        let grad = enumerated_nll_grad_row(&row, 0.7, 0.7);
        assert!(grad.iter().all(|g| g.abs() <= 1e-14));
        // uniform logits: softmax is uniform at every temperature
        let uniform = [0.4, 0.4, 0.4, 0.4];
        let grad = enumerated_nll_grad_row(&uniform, 0.5, 1.3);
        assert!(grad.iter().all(|g| g.abs() <= 1e-15));
    }

    #[test]
    fn eq7_closed_form_cross_checked_by_finite_differences() {
        // independent route: numerically differentiate the enumerated loss
        let row = [1.2, -0.7, 0.4];
        let (ts, tt) = (0.6, 1.0);
        let ps = math::softmax_t(&row, ts);
        let loss = |z: &[f64]| -> f64 {
            let lp = math::log_softmax_t(z, tt);
            ps.iter().zip(&lp).map(|(p, l)| -p * l).sum()
        };
        let h = 1e-6;
        let closed = closed_form_nll_grad_row(&row, ts, tt);
        for k in 0..row.len() {
            let mut up = row.to_vec();
            up[k] += h;
            let mut dn = row.to_vec();
            dn[k] -= h;
            let fd = (loss(&up) - loss(&dn)) / (2.0 * h);
            assert!((fd - closed[k]).abs() < 1e-8, "coord {k}: fd {fd} vs closed {}", closed[k]);
        }
    }

    #[test]
    fn regime_probe_directions() {
        let stable = classify_regime(0.6, 1.0, None);
        assert_eq!(stable.regime, Regime::Stable);
        assert!(stable.argmax_logit_delta > 0.0);

        let coupled = classify_regime(1.0, 1.0, None);
        assert_eq!(coupled.regime, Regime::Coupled);
        assert!(coupled.argmax_logit_delta.abs() <= 1e-14);
        assert!(coupled.expected_update_norm <= 1e-14);

        let inverted = classify_regime(1.5, 1.0, None);
        assert_eq!(inverted.regime, Regime::Inverted);
        assert!(inverted.argmax_logit_delta < 0.0);
    }

    #[test]
    fn exact_expected_grad_is_null_when_coupled_on_a_real_policy() {
        let params = probe_policy(&[0.8, -0.3, 0.1]);
        let params = materialize_reachable(&params, &[0], 1).unwrap();
        for tau in [0.3, 0.6, 1.0, 1.5] {
            let g = exact_expected_grad(&params, &[0], tau, tau, 1).unwrap();
            assert!(g.norm_inf() <= 1e-14, "tau {tau}: {}", g.norm_inf());
        }
    }

    #[test]
    fn expected_descent_step_sharpens_or_diffuses_the_argmax() {
        // probe with 3 legal tokens and logits [1, 0, 0]
        let params = probe_policy(&[1.0, 0.0, 0.0]);
        let params = materialize_reachable(&params, &[0], 1).unwrap();

        // stable pair: expected descent increases logit 0 and its tau=1 prob
        let g = exact_expected_nll_grad(&params, &[0], 0.6, 1.0, 1).unwrap();
        let before_logit = params.logits(&[0]).unwrap()[0];
        let before_prob = params.next_token_dist(&[0], 1.0).unwrap()[0];
        let updated = params.apply_update(&g, 1.0, UpdateDirection::Descent).unwrap();
        assert!(updated.logits(&[0]).unwrap()[0] > before_logit);
        assert!(updated.next_token_dist(&[0], 1.0).unwrap()[0] > before_prob);

        // z-gradient of the expected ascent objective at the argmax matches
        // (1/tau_t)(p_s(0) - p_t(0)) > 0
        let ascent = exact_expected_grad(&params, &[0], 0.6, 1.0, 1).unwrap();
        let row3 = [1.0, 0.0, 0.0];
        let expect = (math::softmax_t(&row3, 0.6)[0] - math::softmax_t(&row3, 1.0)[0]) / 1.0;
        assert!((ascent.values[0] - expect).abs() < 1e-12);
        assert!(expect > 0.0);

        // inverted pair: the argmax entry moves down under descent
        let g = exact_expected_nll_grad(&params, &[0], 1.5, 1.0, 1).unwrap();
        let updated = params.apply_update(&g, 1.0, UpdateDirection::Descent).unwrap();
        assert!(updated.logits(&[0]).unwrap()[0] < before_logit);

        // coupled pair: no movement at all
        let g = exact_expected_nll_grad(&params, &[0], 1.0, 1.0, 1).unwrap();
        assert!(g.norm_inf() <= 1e-14);
    }

    #[test]
    fn mc_estimate_agrees_with_enumeration() {
        let params = probe_policy(&[0.5, -0.2, 0.9]);
        let params = materialize_reachable(&params, &[0], 2).unwrap();
        let exact = exact_expected_grad(&params, &[0], 0.6, 1.0, 2).unwrap();
        let mc = mc_expected_grad(&params, &[0], 0.6, 1.0, 20_000, 2, &RngStream::new(3, 0)).unwrap();
        let mut diff = mc.mean.clone();
        diff.add_scaled(-1.0, &exact).unwrap();
        assert!(
            diff.norm2() <= 4.0 * mc.aggregate_se,
            "diff {} vs 4se {}",
            diff.norm2(),
            4.0 * mc.aggregate_se
        );
    }

    #[test]
    fn mc_standard_error_shrinks_like_inverse_sqrt_n() {
        let params = probe_policy(&[0.5, -0.2, 0.9]);
        let params = materialize_reachable(&params, &[0], 1).unwrap();
        let a = mc_expected_grad(&params, &[0], 1.0, 1.0, 4_000, 1, &RngStream::new(5, 0)).unwrap();
        let b = mc_expected_grad(&params, &[0], 1.0, 1.0, 8_000, 1, &RngStream::new(5, 1)).unwrap();
        let shrink = b.aggregate_se / a.aggregate_se;
        let expect = 1.0 / 2.0f64.sqrt();
        assert!((shrink - expect).abs() <= 0.2 * expect, "shrink {shrink}");
    }

    #[test]
    fn mc_requires_a_minimum_sample_count() {
        let params = probe_policy(&[0.0, 0.0]);
        let params = materialize_reachable(&params, &[0], 1).unwrap();
        assert!(mc_expected_grad(&params, &[0], 1.0, 1.0, 50, 1, &RngStream::new(0, 0)).is_err());
    }

    #[test]
    fn multi_token_rows_match_visit_weighted_closed_form() {
        // two-step policy: each visited row's expected NLL gradient is
        // visit_prob * (p_t - p_s) / tau_t
        let symbols = ["x", "y"].map(String::from);
        let vocab = Vocabulary::new(&symbols).unwrap();
        let mut params = init_policy(PolicyKind::Tabular, vocab, 1, 0, 0).unwrap();
        let v = params.vocab().size();
        let mut rng = RngStream::new(8, 0);
        for ctx in 0..v - 1 {
            let row: Vec<f64> = (0..v).map(|_| rng.next_symmetric(1.0)).collect();
            params.set_tabular_row(&[ctx], row).unwrap();
        }
        let params = materialize_reachable(&params, &[0], 2).unwrap();
        let (ts, tt) = (0.5, 1.0);
        let exact = exact_expected_nll_grad(&params, &[0], ts, tt, 2).unwrap();
        let visits = context_visit_probs(&params, &[0], ts, 2).unwrap();
        let pad = params.vocab().pad();
        let contexts = params.tabular_contexts().unwrap().to_vec();
        for (r, ctx) in contexts.iter().enumerate() {
            let visit = visits.get(ctx).copied().unwrap_or(0.0);
            // a full context key passed as the prefix selects its own row
            let row = params.logits(ctx).unwrap();
            let ps = math::masked_softmax_t(&row, ts, Some(pad));
            let pt = math::masked_softmax_t(&row, tt, Some(pad));
            for k in 0..v {
                let expect = visit * (pt[k] - ps[k]) / tt;
                let got = exact.values[r * v + k];
                assert!((got - expect).abs() < 1e-12, "row {r} coord {k}: {got} vs {expect}");
            }
        }
    }

    #[test]
    fn default_grid_passes_and_fault_injection_fails() {
        let report = run_grid(&GridSpec::default(), false).unwrap();
        assert!(report.all_passed(), "{}", report.render());
        // at least 500 decoupled combinations
        let eq7 = report.checks.iter().find(|c| c.name == "decoupled_closed_form").unwrap();
        assert!(eq7.cases >= 500);
        let corrupted = run_grid(&GridSpec::default(), true).unwrap();
        assert!(!corrupted.all_passed());
    }

    #[test]
    fn empty_grid_is_an_error() {
        let spec = GridSpec { vectors_per_size: 0, ..GridSpec::default() };
        let err = run_grid(&spec, false).unwrap_err();
        assert!(err.to_string().contains("empty grid"));
    }

    #[test]
    fn fd_oracle_matches_tabular_gradient_to_tight_tolerance() {
        let params = probe_policy(&[0.4, -1.0, 0.2, 0.8]);
        let params = materialize_reachable(&params, &[0], 2).unwrap();
        let output = vec![1, params.vocab().eos()];
        let analytic = params.logprob_gradient(&[0], &output, 0.7).unwrap();
        let fd = fd_logprob_gradient_refined(&params, &[0], &output, 0.7, 1e-4).unwrap();
        let mut diff = analytic.clone();
        diff.add_scaled(-1.0, &fd).unwrap();
        let rel = diff.norm2() / fd.norm2();
        assert!(rel <= 1e-10, "relative error {rel}");
    }
}
