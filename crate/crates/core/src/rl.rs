//! Stage-2 rank tuning with group-relative advantages.
//!
//! For each stage-2 sample the current encoder ranks the candidate group;
//! each candidate earns a piecewise reward (noise penalty scaled by how high
//! it ranks, zero for trailing noise, and base + absolute-position +
//! relative-order terms for relevant candidates). Advantages standardize the
//! rewards within the group, and the policy objective pushes the group
//! softmax of query-candidate cosines toward high-advantage candidates with
//! an exact KL leash against the frozen stage-1 reference.

use serde::Serialize;

use crate::encoder::{encode_forward, EncoderParams, ForwardCache, Tensors};
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::model::Corpus;
use crate::pairs::{PairSide, Stage2Sample};
use crate::rng::Stream;
use crate::sft::{softmax, OptimizerState};

#[derive(Debug, Clone)]
pub struct RewardConfig {
    /// Penalty scale for noise ranked above relevant candidates; negative.
    pub c_pen: f64,
    /// Base reward multiplier: R_base = base_mult * M.
    pub base_mult: f64,
    pub eps_adv: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            c_pen: -5.0,
            base_mult: 3.0,
            eps_adv: 1e-8,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c_pen >= 0.0 {
            return Err(Error::validation("c_pen must be negative"));
        }
        Ok(())
    }

    pub fn r_base(&self, m: usize) -> f64 {
        self.base_mult * m as f64
    }
}

/// A scored candidate group for one query.
#[derive(Debug, Clone)]
pub struct RankedGroup {
    pub query: PairSide,
    /// Candidates in ground-truth order (position j has ground-truth rank
    /// j + 1); the first `m` are the relevant set.
    pub cands: Vec<PairSide>,
    /// Cosine of the query against each candidate, by candidate index.
    pub sims: Vec<f64>,
    /// Candidate indices sorted by descending similarity, ties by index.
    pub predicted: Vec<usize>,
    pub m: usize,
}

impl RankedGroup {
    pub fn g(&self) -> usize {
        self.cands.len()
    }

    /// Predicted rank (1-based) of a candidate index.
    pub fn predicted_rank(&self, cand: usize) -> usize {
        self.predicted.iter().position(|&c| c == cand).expect("candidate in group") + 1
    }

    /// Ground-truth rank (1-based) of a candidate index. Noise candidates
    /// keep their list position so the mapping is total; the reward cases
    /// for noise never read it.
    pub fn gt_rank(&self, cand: usize) -> usize {
        cand + 1
    }

    pub fn is_relevant(&self, cand: usize) -> bool {
        cand < self.m
    }
}

/// Ranks the sample's candidate group with the current encoder. `g` must
/// match the sample's list length.
pub fn select_candidates(
    sample: &Stage2Sample,
    params: &EncoderParams,
    corpus: &Corpus,
    g: usize,
) -> Result<RankedGroup> {
    if g != sample.g() {
        return Err(Error::validation(format!(
            "G = {g} does not match |L_rank| = {}",
            sample.g()
        )));
    }
    if sample.m >= g {
        return Err(Error::validation("group must satisfy G > M"));
    }
    let query_side = PairSide::Sub(sample.query.clone());
    let q = crate::encoder::encode(params, query_side.encode_input(corpus)?)?;
    let mut sims = Vec::with_capacity(g);
    for cand in &sample.l_rank {
        let c = crate::encoder::encode(params, cand.encode_input(corpus)?)?;
        sims.push(crate::encoder::cosine(&q, &c)?);
    }
    let mut predicted: Vec<usize> = (0..g).collect();
    predicted.sort_by(|&a, &b| {
        sims[b]
            .partial_cmp(&sims[a])
            .expect("finite similarity")
            .then(a.cmp(&b))
    });
    Ok(RankedGroup {
        query: query_side,
        cands: sample.l_rank.clone(),
        sims,
        predicted,
        m: sample.m,
    })
}

/// Absolute-position reward: 1 - |predicted - ground truth| / G.
pub fn reward_abs(pred_pos: usize, gt_pos: usize, g: usize) -> Result<f64> {
    if pred_pos < 1 || pred_pos > g || gt_pos < 1 || gt_pos > g {
        return Err(Error::validation(format!(
            "positions must lie in 1..={g}: pred {pred_pos}, gt {gt_pos}"
        )));
    }
    Ok(1.0 - (pred_pos as f64 - gt_pos as f64).abs() / g as f64)
}

/// Relative-order reward: fraction of other relevant candidates whose
/// predicted order agrees with the ground-truth order (concordant pairs).
/// Defined as 1 when the candidate is the only relevant one.
pub fn reward_rel(cand: usize, group: &RankedGroup) -> Result<f64> {
    if !group.is_relevant(cand) {
        return Err(Error::validation(format!(
            "candidate {cand} is not in the relevant set"
        )));
    }
    if group.m == 1 {
        return Ok(1.0);
    }
    let pred_i = group.predicted_rank(cand) as i64;
    let gt_i = group.gt_rank(cand) as i64;
    let mut concordant = 0usize;
    for other in 0..group.m {
        if other == cand {
            continue;
        }
        let pred_j = group.predicted_rank(other) as i64;
        let gt_j = group.gt_rank(other) as i64;
        if (pred_i - pred_j) * (gt_i - gt_j) > 0 {
            concordant += 1;
        }
    }
    Ok(concordant as f64 / (group.m - 1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardCase {
    PenalizedNoise,
    IgnoredNoise,
    Relevant,
}

#[derive(Debug, Clone, Serialize)]
pub struct RewardEntry {
    /// Candidate index occupying this predicted position.
    pub cand: usize,
    pub case: RewardCase,
    pub penalty: f64,
    pub base: f64,
    pub abs_term: f64,
    pub rel_term: f64,
    pub total: f64,
}

/// Per-candidate rewards in predicted-position order (entry i is the
/// candidate ranked at position i + 1).
#[derive(Debug, Clone)]
pub struct RewardBreakdown {
    pub entries: Vec<RewardEntry>,
}

impl RewardBreakdown {
    pub fn totals(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.total).collect()
    }

    pub fn sum(&self) -> f64 {
        self.entries.iter().map(|e| e.total).sum()
    }
}

/// Piecewise reward over the predicted ranking: noise above any relevant
/// candidate is penalized harder the higher it sits; trailing noise scores
/// zero; relevant candidates earn base + absolute + relative terms.
pub fn reward(group: &RankedGroup, cfg: &RewardConfig) -> Result<RewardBreakdown> {
    cfg.validate()?;
    let g = group.g();
    let mut entries = Vec::with_capacity(g);
    for (pos0, &cand) in group.predicted.iter().enumerate() {
        let i = pos0 + 1;
        let entry = if group.is_relevant(cand) {
            let base = cfg.r_base(group.m);
            let abs_term = reward_abs(i, group.gt_rank(cand), g)?;
            let rel_term = reward_rel(cand, group)?;
            RewardEntry {
                cand,
                case: RewardCase::Relevant,
                penalty: 0.0,
                base,
                abs_term,
                rel_term,
                total: base + abs_term + rel_term,
            }
        } else {
            let relevant_below = group.predicted[pos0 + 1..]
                .iter()
                .any(|&c| group.is_relevant(c));
            if relevant_below {
                let penalty = cfg.c_pen * (1.0 + (g - i) as f64 / g as f64);
                RewardEntry {
                    cand,
                    case: RewardCase::PenalizedNoise,
                    penalty,
                    base: 0.0,
                    abs_term: 0.0,
                    rel_term: 0.0,
                    total: penalty,
                }
            } else {
                RewardEntry {
                    cand,
                    case: RewardCase::IgnoredNoise,
                    penalty: 0.0,
                    base: 0.0,
                    abs_term: 0.0,
                    rel_term: 0.0,
                    total: 0.0,
                }
            }
        };
        entries.push(entry);
    }
    Ok(RewardBreakdown { entries })
}

/// Group-standardized advantages with population (divisor G) deviation.
pub fn advantages(rewards: &[f64], eps_adv: f64) -> Vec<f64> {
    let g = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / g;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / g;
    let denom = var.sqrt() + eps_adv;
    rewards.iter().map(|r| (r - mean) / denom).collect()
}

#[derive(Debug, Clone)]
pub struct GrpoConfig {
    /// KL leash coefficient against the frozen reference.
    pub beta: f64,
    /// Group softmax temperature for the policy distribution.
    pub tau_rl: f64,
    /// Candidate group size; 0 selects 2M per sample.
    pub group_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub epochs: usize,
    pub reward: RewardConfig,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            beta: 0.01,
            tau_rl: 0.05,
            group_size: 0,
            lr: 2e-4,
            seed: 0,
            epochs: 1,
            reward: RewardConfig::default(),
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 {
            return Err(Error::validation("beta must be >= 0"));
        }
        if self.tau_rl <= 0.0 {
            return Err(Error::validation("tau_rl must be > 0"));
        }
        self.reward.validate()
    }
}

#[derive(Debug, Clone)]
pub struct GrpoEval {
    pub loss: f64,
    pub kl: f64,
    pub objective: f64,
}

/// Policy loss and exact gradient for one group. The policy is the group
/// softmax of query-candidate cosines at `tau_rl`; rewards are treated as
/// constants. Returns (evaluation, gradient of the loss).
pub fn grpo_loss(
    group: &RankedGroup,
    rewards: &[f64],
    params: &EncoderParams,
    ref_params: &EncoderParams,
    corpus: &Corpus,
    cfg: &GrpoConfig,
) -> Result<(GrpoEval, Tensors)> {
    cfg.validate()?;
    let g = group.g();
    if rewards.len() != g {
        return Err(Error::validation("rewards length must equal G"));
    }
    let adv = advantages(rewards, cfg.reward.eps_adv);
    // Advantage by candidate index: adv[i] belongs to predicted position i+1.
    let mut adv_by_cand = vec![0.0; g];
    for (pos0, &cand) in group.predicted.iter().enumerate() {
        adv_by_cand[cand] = adv[pos0];
    }

    let d_full = params.d_out();
    let q_cache = encode_forward(params, group.query.encode_input(corpus)?)?;
    let cand_caches: Vec<ForwardCache> = group
        .cands
        .iter()
        .map(|c| encode_forward(params, c.encode_input(corpus)?))
        .collect::<Result<_>>()?;
    let nq = q_cache.prefix_norm(d_full);
    if nq < 1e-12 {
        return Err(Error::numeric("zero query norm"));
    }
    let mut cosines = Vec::with_capacity(g);
    let mut ncs = Vec::with_capacity(g);
    for c in &cand_caches {
        let nc = c.prefix_norm(d_full);
        if nc < 1e-12 {
            return Err(Error::numeric("zero candidate norm"));
        }
        cosines.push(dot(&q_cache.y, &c.y) / (nq * nc));
        ncs.push(nc);
    }
    let pi = softmax(&cosines, cfg.tau_rl)?;

    // Frozen reference policy over the same group.
    let ref_pi = {
        let q_ref = crate::encoder::encode(ref_params, group.query.encode_input(corpus)?)?;
        let mut ref_cos = Vec::with_capacity(g);
        for c in &group.cands {
            let e = crate::encoder::encode(ref_params, c.encode_input(corpus)?)?;
            ref_cos.push(crate::encoder::cosine(&q_ref, &e)?);
        }
        softmax(&ref_cos, cfg.tau_rl)?
    };

    let log_pi: Vec<f64> = pi.iter().map(|p| p.ln()).collect();
    let kl: f64 = pi
        .iter()
        .zip(ref_pi.iter())
        .map(|(p, r)| p * (p.ln() - r.ln()))
        .sum();
    let adv_sum: f64 = adv_by_cand.iter().sum();
    let objective = adv_by_cand
        .iter()
        .zip(log_pi.iter())
        .map(|(a, lp)| a * lp)
        .sum::<f64>()
        / g as f64
        - cfg.beta * kl;
    let loss = -objective;
    if !loss.is_finite() {
        return Err(Error::numeric("non-finite policy loss"));
    }

    // dJ/du_c with u = cos / tau_rl.
    let mut dl_du = vec![0.0; g];
    for c in 0..g {
        let dj = (adv_by_cand[c] - adv_sum * pi[c]) / g as f64
            - cfg.beta * pi[c] * ((pi[c].ln() - ref_pi[c].ln()) - kl);
        dl_du[c] = -dj;
    }

    let mut dl_dy_q = vec![0.0; d_full];
    let mut grad = params.t.zeros_like();
    for c in 0..g {
        let gcos = dl_du[c] / cfg.tau_rl;
        if gcos == 0.0 {
            continue;
        }
        let nc = ncs[c];
        let cosv = cosines[c];
        let cy = &cand_caches[c].y;
        let mut dl_dy_c = vec![0.0; d_full];
        for j in 0..d_full {
            let qh = q_cache.y[j] / nq;
            let ch = cy[j] / nc;
            dl_dy_c[j] = gcos * (qh - cosv * ch) / nc;
            dl_dy_q[j] += gcos * (ch - cosv * qh) / nq;
        }
        crate::encoder::backward_into(params, &cand_caches[c], &dl_dy_c, &mut grad);
    }
    crate::encoder::backward_into(params, &q_cache, &dl_dy_q, &mut grad);

    Ok((
        GrpoEval {
            loss,
            kl,
            objective,
        },
        grad,
    ))
}

#[derive(Debug, Clone)]
pub struct RlCurveRow {
    pub step: usize,
    pub mean_reward: f64,
    pub kl: f64,
    pub loss: f64,
}

pub struct RlOutcome {
    pub params: EncoderParams,
    pub curve: Vec<RlCurveRow>,
}

/// Stage-2 training loop: per sample, rank with the current encoder, score
/// the ranking, standardize, and take one Adam step on the policy loss. The
/// stage-1 checkpoint stays frozen as the KL reference.
pub fn train_rl(
    samples: &[Stage2Sample],
    corpus: &Corpus,
    sft_params: &EncoderParams,
    cfg: &GrpoConfig,
) -> Result<RlOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::validation("no stage-2 samples"));
    }
    let ref_params = sft_params.clone();
    let mut params = sft_params.clone();
    let mut opt = OptimizerState::new(&params, cfg.lr, 0.0);
    let mut curve = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs.max(1) {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        Stream::new(cfg.seed, "rl-order", &[epoch as u64]).shuffle(&mut order);
        for &idx in &order {
            let sample = &samples[idx];
            let g = if cfg.group_size == 0 {
                sample.g()
            } else {
                cfg.group_size
            };
            let group = select_candidates(sample, &params, corpus, g)?;
            let breakdown = reward(&group, &cfg.reward)?;
            let totals = breakdown.totals();
            let (eval, grad) = grpo_loss(&group, &totals, &params, &ref_params, corpus, cfg)?;
            if !eval.loss.is_finite() {
                return Err(Error::numeric(format!("policy loss diverged at step {step}")));
            }
            opt.apply(&mut params, &grad, 1.0);
            curve.push(RlCurveRow {
                step,
                mean_reward: breakdown.sum() / g as f64,
                kl: eval.kl,
                loss: eval.loss,
            });
            step += 1;
        }
    }
    Ok(RlOutcome { params, curve })
}

/// Reward-curve CSV: step, mean_reward, kl, loss.
pub fn write_rl_curve_csv(path: &std::path::Path, rows: &[RlCurveRow]) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "step,mean_reward,kl,loss")?;
    for r in rows {
        writeln!(
            w,
            "{},{:.9},{:.9},{:.9}",
            r.step, r.mean_reward, r.kl, r.loss
        )?;
    }
    w.flush()?;
    Ok(())
}
