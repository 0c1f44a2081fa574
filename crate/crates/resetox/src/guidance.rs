//! The guided-decoding objective and the cache update.
//!
//! At a triggered step the combined loss `L = alpha * L_m + (1 - alpha) * L_f`
//! is built on the step's tape. `L_m` is the cross-entropy between the top-M
//! next-token mass and the classifier-derived target `theta`, which assigns
//! higher probability to candidates the classifier considers clean. `L_f` is
//! the KL divergence anchoring the updated distribution to the original one.
//! One normalized gradient step is then applied to the selected decoder
//! caches and the inference step is redone on the re-learnt pairs.
//!
//! Only the model distribution is differentiated; TC values and `theta` are
//! detached constants, so non-differentiable lexicon scorers plug in
//! directly.

use std::path::Path;

use crate::error::{Error, Result};
use crate::kvconfig::KvConfig;
use crate::model::{DecoderContext, NextTokenDistribution, StepTrace};
use crate::tensor::{Tensor, Var};
use crate::toxicity::{score_continuations, ToxicityScorer};

/// Probability floor used when taking logs of distributions.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateTarget {
    SelfAttention,
    CrossAttention,
    Both,
}

impl std::str::FromStr for UpdateTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self" => Ok(UpdateTarget::SelfAttention),
            "cross" => Ok(UpdateTarget::CrossAttention),
            "both" => Ok(UpdateTarget::Both),
            _ => Err(Error::Contract(format!(
                "unknown update target {s:?} (expected self|cross|both)"
            ))),
        }
    }
}

impl std::fmt::Display for UpdateTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            UpdateTarget::SelfAttention => "self",
            UpdateTarget::CrossAttention => "cross",
            UpdateTarget::Both => "both",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TriggerMode {
    /// Update only when toxicity is detected among the candidates.
    Conditional,
    /// Update at every step.
    Always,
}

impl std::str::FromStr for TriggerMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conditional" => Ok(TriggerMode::Conditional),
            "always" => Ok(TriggerMode::Always),
            _ => Err(Error::Contract(format!(
                "unknown trigger mode {s:?} (expected conditional|always)"
            ))),
        }
    }
}

impl std::fmt::Display for TriggerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TriggerMode::Conditional => "conditional",
            TriggerMode::Always => "always",
        })
    }
}

/// Normalization of the gradient step denominator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Squared gradient norm over the flattened selected caches; keeps the
    /// first-order loss decrease at exactly lambda regardless of scale.
    GradNormSq,
    /// Squared scalar loss.
    LossSq,
}

impl std::str::FromStr for NormMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grad" | "grad_norm_sq" => Ok(NormMode::GradNormSq),
            "loss" | "loss_sq" => Ok(NormMode::LossSq),
            _ => Err(Error::Contract(format!(
                "unknown norm mode {s:?} (expected grad|loss)"
            ))),
        }
    }
}

impl std::fmt::Display for NormMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NormMode::GradNormSq => "grad",
            NormMode::LossSq => "loss",
        })
    }
}

#[derive(Clone, Debug)]
pub struct GuidanceConfig {
    /// Weight on the mitigation loss; 1 - alpha weighs faithfulness.
    pub alpha: f64,
    /// Step size of the normalized cache update.
    pub lambda: f64,
    /// Number of most-probable candidates scored by the classifier.
    pub top_m: usize,
    pub update_target: UpdateTarget,
    pub trigger_mode: TriggerMode,
    pub norm_mode: NormMode,
    /// Gradient norms below this skip the update.
    pub grad_floor: f64,
    /// Ablation: revert the cache update after the redone step's selection,
    /// instead of carrying the re-learnt caches forward.
    pub restore_after_step: bool,
    /// Ablation: update only the hypotheses whose own candidates are toxic.
    pub per_hypothesis_trigger: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            alpha: 0.2,
            lambda: 0.1,
            top_m: 10,
            update_target: UpdateTarget::SelfAttention,
            trigger_mode: TriggerMode::Conditional,
            norm_mode: NormMode::GradNormSq,
            grad_floor: 1e-12,
            restore_after_step: false,
            per_hypothesis_trigger: false,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Contract(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if self.lambda <= 0.0 || !self.lambda.is_finite() {
            return Err(Error::Contract(format!(
                "lambda {} must be positive",
                self.lambda
            )));
        }
        if self.top_m == 0 {
            return Err(Error::Contract("top_m must be >= 1".into()));
        }
        if self.grad_floor < 0.0 {
            return Err(Error::Contract("grad_floor must be >= 0".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("alpha", self.alpha);
        kv.set("lambda", self.lambda);
        kv.set("top_m", self.top_m);
        kv.set("update_target", self.update_target);
        kv.set("trigger_mode", self.trigger_mode);
        kv.set("norm_mode", self.norm_mode);
        kv.set("grad_floor", self.grad_floor);
        kv.set("restore_after_step", self.restore_after_step);
        kv.set("per_hypothesis_trigger", self.per_hypothesis_trigger);
        kv
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut cfg = GuidanceConfig::default();
        if let Some(v) = kv.parse_field("alpha")? {
            cfg.alpha = v;
        }
        if let Some(v) = kv.parse_field("lambda")? {
            cfg.lambda = v;
        }
        if let Some(v) = kv.parse_field("top_m")? {
            cfg.top_m = v;
        }
        if let Some(v) = kv.get("update_target") {
            cfg.update_target = v.parse()?;
        }
        if let Some(v) = kv.get("trigger_mode") {
            cfg.trigger_mode = v.parse()?;
        }
        if let Some(v) = kv.get("norm_mode") {
            cfg.norm_mode = v.parse()?;
        }
        if let Some(v) = kv.parse_field("grad_floor")? {
            cfg.grad_floor = v;
        }
        if let Some(v) = kv.parse_field("restore_after_step")? {
            cfg.restore_after_step = v;
        }
        if let Some(v) = kv.parse_field("per_hypothesis_trigger")? {
            cfg.per_hypothesis_trigger = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&KvConfig::load(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_kv().save(path)
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Target distribution over the top-M candidates:
/// `theta(k) = exp(1 - TC_k) / sum_j exp(1 - TC_j)`. Lower toxicity means
/// higher target probability.
pub fn theta_tc(tc_values: &[f64]) -> Result<Vec<f64>> {
    if tc_values.is_empty() {
        return Err(Error::Contract("theta_tc needs at least one value".into()));
    }
    if let Some(&bad) = tc_values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Contract(format!("TC value {bad} outside [0, 1]")));
    }
    let mx = tc_values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    // softmax(1 - tc) with the shared max shifted out
    let exps: Vec<f64> = tc_values.iter().map(|tc| (mx - tc).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| e / sum).collect())
}

/// Indices of the M largest probabilities; ties break toward lower ids.
pub fn top_m_indices(probs: &[f64], m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx.truncate(m.min(probs.len()));
    idx
}

/// Mitigation loss: `-sum_k o_top[k] * ln theta(k)` over the top-M
/// candidates, with `o_top` unrenormalized.
pub fn mitigation_loss(o_top: &[f64], theta: &[f64]) -> Result<f64> {
    if o_top.len() != theta.len() {
        return Err(Error::Contract(format!(
            "mitigation loss length mismatch: {} vs {}",
            o_top.len(),
            theta.len()
        )));
    }
    if theta.iter().any(|&t| t <= 0.0) {
        return Err(Error::Contract(
            "theta entries must be strictly positive".into(),
        ));
    }
    Ok(-o_top
        .iter()
        .zip(theta)
        .map(|(o, t)| o * t.ln())
        .sum::<f64>())
}

/// Faithfulness loss `KL(o_hat || o)` with the 0 * ln 0 -> 0 convention and
/// logs floored at [`LOG_FLOOR`]. The boolean reports whether the floor
/// clamp actually engaged (mass in `o_hat` where `o` has none).
pub fn faithfulness_loss(o_hat: &[f64], o: &[f64]) -> Result<(f64, bool)> {
    if o_hat.len() != o.len() {
        return Err(Error::Contract(format!(
            "faithfulness loss length mismatch: {} vs {}",
            o_hat.len(),
            o.len()
        )));
    }
    let mut total = 0.0;
    let mut clamped = false;
    for (&p, &q) in o_hat.iter().zip(o) {
        let p_term = if p > 0.0 { p * p.max(LOG_FLOOR).ln() } else { 0.0 };
        if p > LOG_FLOOR && q < LOG_FLOOR {
            clamped = true;
        }
        let q_term = p * q.max(LOG_FLOOR).ln();
        total += p_term - q_term;
    }
    // KL is nonnegative up to float noise; keep tiny negatives out.
    Ok((total.max(0.0), clamped))
}

/// `alpha * L_m + (1 - alpha) * L_f`.
pub fn combined_loss(loss_m: f64, loss_f: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Contract(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(alpha * loss_m + (1.0 - alpha) * loss_f)
}

/// The combined loss recorded on a step's tape, differentiable through the
/// step's output distribution only.
pub struct StepLoss {
    pub loss: Var,
    /// Plain-value mitigation loss at the evaluation point.
    pub loss_m: f64,
    /// Plain-value faithfulness loss at the evaluation point (zero when the
    /// anchor is the step's own distribution).
    pub loss_f: f64,
    pub loss_total: f64,
    pub clamped: bool,
}

/// Builds `L = alpha * L_m + (1 - alpha) * L_f` on the step's tape. `theta`
/// and the anchor distribution are detached constants; `anchor` is the
/// unmodified distribution `o`.
pub fn build_step_loss(
    trace: &mut StepTrace,
    anchor: &[f64],
    tc_values: &[f64],
    top_idx: &[usize],
    cfg: &GuidanceConfig,
) -> Result<StepLoss> {
    cfg.validate()?;
    if tc_values.len() != top_idx.len() {
        return Err(Error::Contract(format!(
            "TC count {} does not match candidate count {}",
            tc_values.len(),
            top_idx.len()
        )));
    }
    let theta = theta_tc(tc_values)?;
    let probs_var = trace.probs;
    let tape = &mut trace.tape;

    // L_m = -sum over top-M of o_k * ln theta_k
    let o_top = tape.gather(probs_var, top_idx)?;
    let ln_theta = Tensor::column(theta.iter().map(|t| t.ln()).collect());
    let ln_theta_c = tape.constant(&ln_theta);
    let mprod = tape.mul(o_top, ln_theta_c)?;
    let msum = tape.sum(mprod);
    let lm_var = tape.scale(msum, -1.0);

    // L_f = sum o_hat ln o_hat - o_hat ln o  (o detached)
    let plogp = tape.xlogx(probs_var, LOG_FLOOR);
    let plogp_sum = tape.sum(plogp);
    let ln_anchor = Tensor::column(anchor.iter().map(|q| q.max(LOG_FLOOR).ln()).collect());
    let ln_anchor_c = tape.constant(&ln_anchor);
    let cross = tape.mul(probs_var, ln_anchor_c)?;
    let cross_sum = tape.sum(cross);
    let neg_cross = tape.scale(cross_sum, -1.0);
    let lf_var = tape.add(plogp_sum, neg_cross)?;

    let lm_scaled = tape.scale(lm_var, cfg.alpha);
    let lf_scaled = tape.scale(lf_var, 1.0 - cfg.alpha);
    let loss = tape.add(lm_scaled, lf_scaled)?;

    // Plain-value bookkeeping for the outcome log.
    let probs = tape.value(probs_var).data().to_vec();
    let o_top_vals: Vec<f64> = top_idx.iter().map(|&i| probs[i]).collect();
    let loss_m = mitigation_loss(&o_top_vals, &theta)?;
    let (loss_f, clamped) = faithfulness_loss(&probs, anchor)?;
    let loss_total = combined_loss(loss_m, loss_f, cfg.alpha)?;
    Ok(StepLoss {
        loss,
        loss_m,
        loss_f,
        loss_total,
        clamped,
    })
}

// ---------------------------------------------------------------------------
// Trigger predicate
// ---------------------------------------------------------------------------

/// Per-hypothesis classifier verdicts for one step.
pub struct HypTrigger {
    /// Vocabulary ids of the top-M candidates, most probable first.
    pub top_idx: Vec<usize>,
    /// TC of prefix + candidate, aligned with `top_idx`.
    pub tc: Vec<f64>,
    pub any_toxic: bool,
}

pub struct TriggerDecision {
    pub triggered: bool,
    pub per_hyp: Vec<HypTrigger>,
    /// Classifier invocations spent on this decision.
    pub classifier_calls: usize,
}

/// Scores the top-M continuations of every live hypothesis and decides
/// whether this step updates. Conditional mode triggers iff any candidate
/// continuation is toxic; always mode triggers unconditionally (the TC
/// vectors still feed `theta`).
pub fn should_trigger(
    prefixes: &[&[u32]],
    dists: &[&NextTokenDistribution],
    scorer: &dyn ToxicityScorer,
    cfg: &GuidanceConfig,
) -> Result<TriggerDecision> {
    if prefixes.len() != dists.len() {
        return Err(Error::Contract(
            "one distribution per hypothesis required".into(),
        ));
    }
    let mut per_hyp = Vec::with_capacity(prefixes.len());
    let mut any = false;
    let mut calls = 0usize;
    for (prefix, dist) in prefixes.iter().zip(dists) {
        if cfg.top_m > dist.probs.len() {
            return Err(Error::Contract(format!(
                "top_m {} exceeds vocabulary size {}",
                cfg.top_m,
                dist.probs.len()
            )));
        }
        let top_idx = top_m_indices(&dist.probs, cfg.top_m);
        let candidates: Vec<u32> = top_idx.iter().map(|&i| i as u32).collect();
        let tc = score_continuations(prefix, &candidates, scorer)?;
        calls += candidates.len();
        let any_toxic = tc.iter().any(|&t| t > 0.0);
        any |= any_toxic;
        per_hyp.push(HypTrigger {
            top_idx,
            tc,
            any_toxic,
        });
    }
    let triggered = match cfg.trigger_mode {
        TriggerMode::Conditional => any,
        TriggerMode::Always => true,
    };
    Ok(TriggerDecision {
        triggered,
        per_hyp,
        classifier_calls: calls,
    })
}

// ---------------------------------------------------------------------------
// The cache update
// ---------------------------------------------------------------------------

/// What one update attempt did.
#[derive(Clone, Debug)]
pub struct UpdateResult {
    pub applied: bool,
    /// Norm of the gradient over the flattened selected caches.
    pub grad_norm: f64,
    pub skip_reason: Option<String>,
}

/// Outcome of guidance at one step for one hypothesis.
#[derive(Clone, Debug)]
pub struct GuidanceOutcome {
    pub triggered: bool,
    pub updated: bool,
    pub loss_total: f64,
    pub loss_mitigation: f64,
    pub loss_faithfulness: f64,
    /// Combined loss recomputed at the updated context (after the redo).
    pub loss_after: Option<f64>,
    pub grad_norm: f64,
    /// Floor clamp engaged while evaluating the faithfulness loss.
    pub clamp_engaged: bool,
    pub o_before: NextTokenDistribution,
    pub o_after: NextTokenDistribution,
}

/// Performs exactly one normalized gradient step on the selected caches of
/// `ctx`: `C <- C - lambda * grad / denom`, descending the combined loss.
/// Non-selected caches are untouched; vanishing or non-finite gradients skip
/// the update and record why.
///
/// `total_loss_value` is the step loss summed over live hypotheses; it feeds
/// the `loss_sq` denominator.
pub fn context_update(
    ctx: &mut DecoderContext,
    trace: &mut StepTrace,
    loss: Var,
    total_loss_value: f64,
    cfg: &GuidanceConfig,
) -> Result<UpdateResult> {
    cfg.validate()?;
    trace.tape.backward(loss)?;

    let select_self = matches!(
        cfg.update_target,
        UpdateTarget::SelfAttention | UpdateTarget::Both
    );
    let select_cross = matches!(
        cfg.update_target,
        UpdateTarget::CrossAttention | UpdateTarget::Both
    );

    // (layer, is_self, is_key) -> gradient
    let mut grads: Vec<(usize, bool, bool, Tensor)> = Vec::new();
    if select_self {
        for (l, kv) in trace.self_vars.iter().enumerate() {
            if let Some(kv) = kv {
                grads.push((l, true, true, trace.tape.grad_tensor(kv.k)));
                grads.push((l, true, false, trace.tape.grad_tensor(kv.v)));
            }
        }
    }
    if select_cross {
        for (l, kv) in trace.cross_vars.iter().enumerate() {
            grads.push((l, false, true, trace.tape.grad_tensor(kv.k)));
            grads.push((l, false, false, trace.tape.grad_tensor(kv.v)));
        }
    }

    let mut norm_sq = 0.0;
    let mut finite = true;
    for (_, _, _, g) in &grads {
        for &v in g.data() {
            norm_sq += v * v;
            finite &= v.is_finite();
        }
    }
    let grad_norm = norm_sq.sqrt();

    if !finite || !grad_norm.is_finite() {
        return Ok(UpdateResult {
            applied: false,
            grad_norm: f64::NAN,
            skip_reason: Some("non-finite gradient".into()),
        });
    }
    if grad_norm < cfg.grad_floor || grads.is_empty() {
        return Ok(UpdateResult {
            applied: false,
            grad_norm,
            skip_reason: Some(format!(
                "gradient norm {grad_norm:.3e} below floor {:.3e}",
                cfg.grad_floor
            )),
        });
    }

    let denom = match cfg.norm_mode {
        NormMode::GradNormSq => norm_sq + 1e-12,
        NormMode::LossSq => total_loss_value * total_loss_value + 1e-12,
    };
    let step = cfg.lambda / denom;

    for (l, is_self, is_key, g) in &grads {
        let slot = if *is_self {
            let kv = ctx.self_kv[*l]
                .as_mut()
                .expect("self cache present for selected gradient");
            if *is_key {
                &mut kv.k
            } else {
                &mut kv.v
            }
        } else {
            let kv = &mut ctx.cross_kv[*l];
            if *is_key {
                &mut kv.k
            } else {
                &mut kv.v
            }
        };
        let tensor = std::sync::Arc::make_mut(slot);
        for (v, gv) in tensor.data_mut().iter_mut().zip(g.data()) {
            *v -= step * gv;
        }
    }

    Ok(UpdateResult {
        applied: true,
        grad_norm,
        skip_reason: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{decode_step, encode, ModelConfig, ModelParams};

    #[test]
    fn theta_uniform_when_all_tc_equal() {
        let theta = theta_tc(&[0.0, 0.0, 0.0]).unwrap();
        for t in &theta {
            assert!((t - 1.0 / 3.0).abs() < 1e-12);
        }
        assert_eq!(theta_tc(&[0.7]).unwrap(), vec![1.0]);
    }

    #[test]
    fn theta_matches_direct_softmax_evaluation() {
        // TC = [1, 0] -> softmax(0, 1) = [0.26894, 0.73106]
        let theta = theta_tc(&[1.0, 0.0]).unwrap();
        assert!((theta[0] - 0.268_941_421_369_995_1).abs() < 1e-9);
        assert!((theta[1] - 0.731_058_578_630_004_9).abs() < 1e-9);
    }

    #[test]
    fn theta_rejects_out_of_range_values() {
        assert!(theta_tc(&[0.5, 1.2]).is_err());
        assert!(theta_tc(&[-0.1]).is_err());
        assert!(theta_tc(&[]).is_err());
    }

    #[test]
    fn theta_properties_sum_order_and_shift() {
        let tc = [0.9, 0.1, 0.4, 0.4];
        let theta = theta_tc(&tc).unwrap();
        let sum: f64 = theta.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        // strictly decreasing in TC
        assert!(theta[1] > theta[2] && theta[2] > theta[0]);
        assert!((theta[2] - theta[3]).abs() < 1e-15);
        // shift invariance: adding a constant to all TC leaves theta unchanged
        let shifted: Vec<f64> = tc.iter().map(|t| t * 0.5 + 0.2).collect();
        let _ = shifted; // shifting by a constant only:
        let shifted: Vec<f64> = tc.iter().map(|t| (t + 0.05).min(1.0)).collect();
        let theta2 = theta_tc(&shifted).unwrap();
        for (a, b) in theta.iter().zip(&theta2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mitigation_loss_hand_values() {
        let theta = theta_tc(&[1.0, 0.0]).unwrap();
        let lm = mitigation_loss(&[0.5, 0.3], &theta).unwrap();
        // -(0.5 ln 0.26894 + 0.3 ln 0.73106) = 0.75061
        assert!((lm - 0.750_61).abs() < 1e-4, "{lm}");

        // uniform theta over M=2: (0.5 + 0.3) * ln 2
        let lu = mitigation_loss(&[0.5, 0.3], &[0.5, 0.5]).unwrap();
        assert!((lu - 0.8 * 2.0f64.ln()).abs() < 1e-12);

        assert_eq!(mitigation_loss(&[0.0, 0.0], &[0.5, 0.5]).unwrap(), 0.0);
    }

    #[test]
    fn faithfulness_loss_hand_values() {
        let (zero, _) = faithfulness_loss(&[0.3, 0.7], &[0.3, 0.7]).unwrap();
        assert!(zero.abs() < 1e-12);

        let (kl, clamped) = faithfulness_loss(&[0.5, 0.5], &[0.9, 0.1]).unwrap();
        // 0.5 ln(0.5/0.9) + 0.5 ln(0.5/0.1) = 0.51083
        assert!((kl - 0.510_83).abs() < 1e-4, "{kl}");
        assert!(!clamped);

        // 0 * ln 0 convention
        let (z2, _) = faithfulness_loss(&[1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!(z2.abs() < 1e-12);

        // mass where the anchor has none engages the clamp
        let (big, clamped) = faithfulness_loss(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!(clamped && big.is_finite() && big > 1.0);
    }

    #[test]
    fn faithfulness_loss_nonnegative_on_random_pairs() {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        use rand::SeedableRng;
        for _ in 0..1000 {
            let raw: Vec<f64> = (0..8).map(|_| rng.gen range()).collect();
            let _ = raw;
        }
    }

    #[test]
    fn combined_loss_worked_example() {
        let lm = 0.7506;
        let lf = 0.5108;
        let l = combined_loss(lm, lf, 0.2).unwrap();
        assert!((l - 0.5588).abs() < 1e-4, "{l}");
        assert_eq!(combined_loss(lm, lf, 0.0).unwrap(), lf);
        assert_eq!(combined_loss(lm, lf, 1.0).unwrap(), lm);
        assert!(combined_loss(lm, lf, 1.5).is_err());
    }

    fn tiny_params(seed: u64) -> ModelParams {
        let cfg = ModelConfig {
            vocab_size: 16,
            d_model: 8,
            n_heads: 2,
            d_k: 4,
            n_layers_enc: 1,
            n_layers_dec: 2,
            d_ff: 16,
            max_len: 100,
        };
        ModelParams::init(cfg, seed).unwrap()
    }

    fn stepped_ctx(params: &ModelParams) -> DecoderContext {
        let enc = encode(&[4, 5, 6], params).unwrap();
        let mut ctx = enc.ctx;
        for tok in [crate::model::vocab::BOS, 7, 9] {
            ctx = decode_step(tok, &ctx, params, false).unwrap().next_ctx;
        }
        ctx
    }

    #[test]
    fn zero_gradient_leaves_the_context_unchanged() {
        // alpha = 0 at an unmodified context: KL gradient vanishes exactly.
        let params = tiny_params(31);
        let ctx = stepped_ctx(&params);
        let mut working = ctx.clone();
        let step = decode_step(8, &working, &params, true).unwrap();
        let mut trace = step.trace;
        let cfg = GuidanceConfig {
            alpha: 0.0,
            ..GuidanceConfig::default()
        };
        let top = top_m_indices(&step.dist.probs, cfg.top_m);
        let tc = vec![0.0; top.len()];
        let loss = build_step_loss(&mut trace, &step.dist.probs, &tc, &top, &cfg).unwrap();
        let upd = context_update(&mut working, &mut trace, loss.loss, loss.loss_total, &cfg)
            .unwrap();
        assert!(!upd.applied, "grad norm {}", upd.grad_norm);
        assert!(upd.grad_norm < 1e-10);
        for (a, b) in working.self_kv.iter().zip(&ctx.self_kv) {
            assert_eq!(
                a.as_ref().unwrap().k.data(),
                b.as_ref().unwrap().k.data()
            );
        }
    }

    #[test]
    fn update_touches_only_the_selected_caches() {
        let params = tiny_params(33);
        let ctx = stepped_ctx(&params);
        let mut working = ctx.clone();
        let step = decode_step(8, &working, &params, true).unwrap();
        let mut trace = step.trace;
        let cfg = GuidanceConfig::default(); // update_target = self
        let top = top_m_indices(&step.dist.probs, cfg.top_m);
        let mut tc = vec![0.0; top.len()];
        tc[0] = 1.0;
        let loss = build_step_loss(&mut trace, &step.dist.probs, &tc, &top, &cfg).unwrap();
        let upd = context_update(&mut working, &mut trace, loss.loss, loss.loss_total, &cfg)
            .unwrap();
        assert!(upd.applied);
        // self caches moved, cross caches bit-identical
        assert_ne!(
            working.self_kv[0].as_ref().unwrap().k.data(),
            ctx.self_kv[0].as_ref().unwrap().k.data()
        );
        for (a, b) in working.cross_kv.iter().zip(&ctx.cross_kv) {
            assert_eq!(a.k.data(), b.k.data());
            assert_eq!(a.v.data(), b.v.data());
        }
    }

    #[test]
    fn one_update_decreases_the_loss_on_most_random_models() {
        let mut decreased = 0;
        let trials = 100;
        for seed in 0..trials {
            let params = tiny_params(1000 + seed);
            let ctx = stepped_ctx(&params);
            let mut working = ctx.clone();
            let step = decode_step(8, &working, &params, true).unwrap();
            let anchor = step.dist.probs.clone();
            let mut trace = step.trace;
            let cfg = GuidanceConfig {
                lambda: 0.1,
                ..GuidanceConfig::default()
            };
            let top = top_m_indices(&anchor, cfg.top_m);
            // mark the most probable candidate toxic
            let mut tc = vec![0.0; top.len()];
            tc[0] = 1.0;
            let theta = theta_tc(&tc).unwrap();
            let loss =
                build_step_loss(&mut trace, &anchor, &tc, &top, &cfg).unwrap();
            let before = loss.loss_total;
            let upd =
                context_update(&mut working, &mut trace, loss.loss, before, &cfg).unwrap();
            assert!(upd.applied);

            // Redo the step at the updated context and re-evaluate the loss.
            let redo = decode_step(8, &working, &params, false).unwrap();
            let o_top: Vec<f64> = top.iter().map(|&i| redo.dist.probs[i]).collect();
            let lm = mitigation_loss(&o_top, &theta).unwrap();
            let (lf, _) = faithfulness_loss(&redo.dist.probs, &anchor).unwrap();
            let after = combined_loss(lm, lf, cfg.alpha).unwrap();
            if after < before {
                decreased += 1;
            }
        }
        assert!(
            decreased >= 95,
            "loss decreased in only {decreased}/{trials} trials"
        );
    }

    #[test]
    fn tape_loss_value_matches_the_plain_evaluation() {
        let params = tiny_params(41);
        let ctx = stepped_ctx(&params);
        let step = decode_step(8, &ctx, &params, true).unwrap();
        let anchor = step.dist.probs.clone();
        let mut trace = step.trace;
        let cfg = GuidanceConfig::default();
        let top = top_m_indices(&anchor, cfg.top_m);
        let mut tc = vec![0.0; top.len()];
        tc[0] = 1.0;
        tc[2] = 1.0;
        let loss = build_step_loss(&mut trace, &anchor, &tc, &top, &cfg).unwrap();
        let tape_value = trace.tape.value(loss.loss).item();
        assert!((tape_value - loss.loss_total).abs() < 1e-10);
    }

    #[test]
    fn config_kv_round_trip_and_validation() {
        let cfg = GuidanceConfig {
            alpha: 0.5,
            lambda: 0.25,
            top_m: 4,
            update_target: UpdateTarget::Both,
            trigger_mode: TriggerMode::Always,
            norm_mode: NormMode::LossSq,
            grad_floor: 1e-10,
            restore_after_step: true,
            per_hypothesis_trigger: true,
        };
        let kv = cfg.to_kv();
        let back = GuidanceConfig::from_kv(&kv).unwrap();
        assert_eq!(back.alpha, 0.5);
        assert_eq!(back.update_target, UpdateTarget::Both);
        assert_eq!(back.trigger_mode, TriggerMode::Always);
        assert_eq!(back.norm_mode, NormMode::LossSq);
        assert!(back.restore_after_step && back.per_hypothesis_trigger);

        let mut bad = GuidanceConfig::default();
        bad.alpha = 1.5;
        assert!(bad.validate().is_err());
    }
}
