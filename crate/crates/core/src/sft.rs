//! Stage-1 contrastive distillation.
//!
//! For each pair, the teacher distribution Q is a softmax over the soft
//! supervision scores (positive anchored at 1.0); the student distribution
//! P^(k) is a softmax over embedding cosines at each nested dimension k. The
//! objective is the Jensen-Shannon divergence between P^(k) and Q summed over
//! the nested dims and averaged over the batch. Gradients are analytic end to
//! end and verified against central finite differences.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::encoder::{encode_forward, EncoderParams, ForwardCache, Tensors};
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::model::Corpus;
use crate::pairs::{PairSide, TrainingPair};
use crate::rng::Stream;

/// Probability floor applied inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct SoftmaxDist {
    pub probs: Vec<f64>,
    pub temperature: f64,
}

/// Numerically stable softmax of scores / tau.
pub fn softmax(scores: &[f64], tau: f64) -> Result<Vec<f64>> {
    if tau <= 0.0 {
        return Err(Error::validation(format!("temperature must be > 0, got {tau}")));
    }
    if scores.is_empty() {
        return Err(Error::validation("softmax over empty support"));
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| ((s - max) / tau).exp()).collect();
    let z: f64 = exps.iter().sum();
    if !z.is_finite() || z <= 0.0 {
        return Err(Error::numeric("softmax normalizer is not finite"));
    }
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// Candidate support of a pair under a validity mask: the positive first,
/// then every unmasked negative.
fn support<'a>(
    pair: &'a TrainingPair,
    mask: Option<&[bool]>,
) -> Result<(Vec<&'a PairSide>, Vec<f64>)> {
    if let Some(m) = mask {
        if m.len() != pair.negatives.len() {
            return Err(Error::validation(format!(
                "mask length {} != negatives {}",
                m.len(),
                pair.negatives.len()
            )));
        }
    }
    let mut sides = vec![&pair.positive];
    let mut scores = vec![1.0];
    for (i, neg) in pair.negatives.iter().enumerate() {
        if mask.map_or(true, |m| m[i]) {
            sides.push(&neg.cand);
            scores.push(neg.score);
        }
    }
    Ok((sides, scores))
}

/// Teacher distribution over the candidate set: softmax of soft scores at
/// temperature tau, positive anchored at score 1.0.
pub fn dist_q(pair: &TrainingPair, mask: Option<&[bool]>, tau: f64) -> Result<SoftmaxDist> {
    let (_, scores) = support(pair, mask)?;
    Ok(SoftmaxDist {
        probs: softmax(&scores, tau)?,
        temperature: tau,
    })
}

/// Student distribution at nested dim k: softmax of cosine similarities of
/// the query against every candidate, all truncated to k.
pub fn dist_p(
    pair: &TrainingPair,
    mask: Option<&[bool]>,
    params: &EncoderParams,
    corpus: &Corpus,
    tau: f64,
    k: usize,
) -> Result<SoftmaxDist> {
    if !params.dims.contains(k) {
        return Err(Error::validation(format!("dim {k} not in nested set")));
    }
    let (sides, _) = support(pair, mask)?;
    let q = crate::encoder::encode(params, pair.query.encode_input(corpus)?)?;
    let qk = crate::encoder::truncate(&q, k, &params.dims)?;
    let mut cosines = Vec::with_capacity(sides.len());
    for side in sides {
        let c = crate::encoder::encode(params, side.encode_input(corpus)?)?;
        let ck = crate::encoder::truncate(&c, k, &params.dims)?;
        cosines.push(crate::encoder::cosine(&qk, &ck)?);
    }
    Ok(SoftmaxDist {
        probs: softmax(&cosines, tau)?,
        temperature: tau,
    })
}

fn floored(x: f64) -> f64 {
    x.max(PROB_FLOOR)
}

/// Jensen-Shannon divergence against the mixture M = (P + Q) / 2, natural
/// logarithm, probabilities floored at 1e-12 inside the logs. Symmetric,
/// non-negative, bounded by ln 2.
fn js_core(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..p.len() {
        let m = 0.5 * (p[i] + q[i]);
        acc += 0.5 * p[i] * (floored(p[i]).ln() - floored(m).ln());
        acc += 0.5 * q[i] * (floored(q[i]).ln() - floored(m).ln());
    }
    acc
}

/// d js_core / d p_i with the flooring accounted for exactly.
fn js_grad_p(p: &[f64], q: &[f64], out: &mut Vec<f64>) {
    out.clear();
    for i in 0..p.len() {
        let m = 0.5 * (p[i] + q[i]);
        let mut g = 0.5 * (floored(p[i]).ln() - floored(m).ln());
        if p[i] > PROB_FLOOR {
            g += 0.5;
        }
        if m > PROB_FLOOR {
            g -= 0.5;
        }
        out.push(g);
    }
}

/// Public JS divergence with support/validity checks.
pub fn js_div(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::validation(format!(
            "js_div support mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    if p.is_empty() {
        return Err(Error::validation("js_div over empty support"));
    }
    for dist in [p, q] {
        let sum: f64 = dist.iter().sum();
        if dist.iter().any(|&x| x < 0.0) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::validation("js_div input is not a distribution"));
        }
    }
    Ok(js_core(p, q))
}

#[derive(Debug, Clone)]
pub struct LossReport {
    /// Mean over pairs of the summed per-dim JS terms.
    pub total: f64,
    /// (dim, mean-over-pairs JS at that dim); total equals the sum.
    pub per_dim: Vec<(usize, f64)>,
    /// Per-pair loss (summed over dims).
    pub per_pair: Vec<f64>,
}

struct PairComputation {
    loss: f64,
    per_dim: Vec<f64>,
    grad: Option<Tensors>,
}

/// Forward (and optionally backward) pass for one pair.
fn pair_pass(
    pair: &TrainingPair,
    mask: Option<&[bool]>,
    params: &EncoderParams,
    corpus: &Corpus,
    tau: f64,
    want_grad: bool,
) -> Result<PairComputation> {
    let (sides, scores) = support(pair, mask)?;
    let q_dist = softmax(&scores, tau)?;
    let dims = params.dims.as_slice();
    let d_full = params.d_out();

    let q_cache = encode_forward(params, pair.query.encode_input(corpus)?)?;
    let cand_caches: Vec<ForwardCache> = sides
        .iter()
        .map(|s| encode_forward(params, s.encode_input(corpus)?))
        .collect::<Result<_>>()?;

    // Cumulative dot products query x candidate, so every nested dim reads
    // off one prefix value.
    let n_c = cand_caches.len();
    let mut cumdots: Vec<Vec<f64>> = vec![Vec::with_capacity(dims.len()); n_c];
    for (i, c) in cand_caches.iter().enumerate() {
        let mut acc = 0.0;
        let mut next_dim = 0;
        for j in 0..d_full {
            acc += q_cache.y[j] * c.y[j];
            if next_dim < dims.len() && j + 1 == dims[next_dim] {
                cumdots[i].push(acc);
                next_dim += 1;
            }
        }
    }

    let mut dl_dy_q = vec![0.0; d_full];
    let mut dl_dy_c: Vec<Vec<f64>> = vec![vec![0.0; d_full]; n_c];
    let mut loss = 0.0;
    let mut per_dim = Vec::with_capacity(dims.len());
    let mut grad_buf = Vec::new();
    for (ki, &k) in dims.iter().enumerate() {
        let nq = q_cache.prefix_norm(k);
        if nq < 1e-12 {
            return Err(Error::numeric("zero query prefix norm"));
        }
        let mut cosines = Vec::with_capacity(n_c);
        let mut ncs = Vec::with_capacity(n_c);
        for i in 0..n_c {
            let nc = cand_caches[i].prefix_norm(k);
            if nc < 1e-12 {
                return Err(Error::numeric("zero candidate prefix norm"));
            }
            ncs.push(nc);
            // No clamp here: keeps the objective smooth for the
            // finite-difference checks; |cos| <= 1 + O(eps) is harmless in
            // the softmax.
            cosines.push(cumdots[i][ki] / (nq * nc));
        }
        let p_dist = softmax(&cosines, tau)?;
        let js_k = js_core(&p_dist, &q_dist);
        loss += js_k;
        per_dim.push(js_k);

        if want_grad {
            js_grad_p(&p_dist, &q_dist, &mut grad_buf);
            let inner = dot(&p_dist, &grad_buf);
            for i in 0..n_c {
                let gu = p_dist[i] * (grad_buf[i] - inner);
                let gcos = gu / tau;
                if gcos == 0.0 {
                    continue;
                }
                let nc = ncs[i];
                let cosv = cosines[i];
                let cy = &cand_caches[i].y;
                for j in 0..k {
                    let qh = q_cache.y[j] / nq;
                    let ch = cy[j] / nc;
                    dl_dy_c[i][j] += gcos * (qh - cosv * ch) / nc;
                    dl_dy_q[j] += gcos * (ch - cosv * qh) / nq;
                }
            }
        }
    }

    let grad = if want_grad {
        let mut g = params.t.zeros_like();
        crate::encoder::backward_into(params, &q_cache, &dl_dy_q, &mut g);
        for (i, c) in cand_caches.iter().enumerate() {
            crate::encoder::backward_into(params, c, &dl_dy_c[i], &mut g);
        }
        Some(g)
    } else {
        None
    };
    if !loss.is_finite() {
        return Err(Error::numeric("non-finite pair loss"));
    }
    Ok(PairComputation {
        loss,
        per_dim,
        grad,
    })
}

fn batch_pass(
    pairs: &[&TrainingPair],
    masks: Option<&[Vec<bool>]>,
    params: &EncoderParams,
    corpus: &Corpus,
    tau: f64,
    want_grad: bool,
) -> Result<(LossReport, Option<Tensors>)> {
    if pairs.is_empty() {
        return Err(Error::validation("empty batch"));
    }
    if let Some(m) = masks {
        if m.len() != pairs.len() {
            return Err(Error::validation("masks length != pairs length"));
        }
    }
    let comps: Result<Vec<PairComputation>> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            pair_pass(
                pair,
                masks.map(|m| m[i].as_slice()),
                params,
                corpus,
                tau,
                want_grad,
            )
        })
        .collect();
    let comps = comps?;
    let n = comps.len() as f64;
    let dims = params.dims.as_slice();
    let mut per_dim = vec![0.0; dims.len()];
    let mut per_pair = Vec::with_capacity(comps.len());
    let mut grad = want_grad.then(|| params.t.zeros_like());
    for c in &comps {
        per_pair.push(c.loss);
        for (acc, v) in per_dim.iter_mut().zip(c.per_dim.iter()) {
            *acc += v / n;
        }
        if let (Some(g), Some(cg)) = (grad.as_mut(), c.grad.as_ref()) {
            g.axpy(1.0 / n, cg);
        }
    }
    let total: f64 = per_dim.iter().sum();
    if !total.is_finite() {
        return Err(Error::numeric("non-finite batch loss"));
    }
    Ok((
        LossReport {
            total,
            per_dim: dims.iter().copied().zip(per_dim).collect(),
            per_pair,
        },
        grad,
    ))
}

/// Batch loss: mean over pairs of the JS terms summed across nested dims.
pub fn sft_loss(
    pairs: &[&TrainingPair],
    masks: Option<&[Vec<bool>]>,
    params: &EncoderParams,
    corpus: &Corpus,
    tau: f64,
) -> Result<LossReport> {
    batch_pass(pairs, masks, params, corpus, tau, false).map(|(r, _)| r)
}

/// Exact analytic gradient of [`sft_loss`] with respect to all encoder
/// parameters (the teacher Q is constant).
pub fn backward(
    pairs: &[&TrainingPair],
    masks: Option<&[Vec<bool>]>,
    params: &EncoderParams,
    corpus: &Corpus,
    tau: f64,
) -> Result<(LossReport, Tensors)> {
    batch_pass(pairs, masks, params, corpus, tau, true)
        .map(|(r, g)| (r, g.expect("gradient requested")))
}

/// AdamW optimizer state; moment shapes mirror the encoder parameters.
pub struct OptimizerState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: Tensors,
    pub v: Tensors,
}

impl OptimizerState {
    pub fn new(params: &EncoderParams, lr: f64, weight_decay: f64) -> Self {
        OptimizerState {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: params.t.zeros_like(),
            v: params.t.zeros_like(),
        }
    }

    /// One AdamW update. `lr_scale` multiplies the base rate (warmup).
    pub fn apply(&mut self, params: &mut EncoderParams, grad: &Tensors, lr_scale: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let lr = self.lr * lr_scale;
        for (((p, g), m), v) in params
            .t
            .iter_mut()
            .zip(grad.iter())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *p);
        }
    }

    /// Sidecar format: magic `UNO1`, u64 step, five f64 hyperparameters,
    /// then the first and second moment arrays as f64 little-endian.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(b"UNO1")?;
        w.write_all(&self.step.to_le_bytes())?;
        for v in [self.lr, self.beta1, self.beta2, self.eps, self.weight_decay] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in self.m.iter().chain(self.v.iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path, params: &EncoderParams) -> Result<OptimizerState> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"UNO1" {
            return Err(Error::validation("bad optimizer sidecar magic"));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let step = u64::from_le_bytes(b8);
        let mut fields = [0.0f64; 5];
        for f in fields.iter_mut() {
            r.read_exact(&mut b8)?;
            *f = f64::from_le_bytes(b8);
        }
        let mut state = OptimizerState {
            step,
            lr: fields[0],
            beta1: fields[1],
            beta2: fields[2],
            eps: fields[3],
            weight_decay: fields[4],
            m: params.t.zeros_like(),
            v: params.t.zeros_like(),
        };
        for v in state.m.iter_mut().chain(state.v.iter_mut()) {
            r.read_exact(&mut b8)?;
            *v = f64::from_le_bytes(b8);
        }
        Ok(state)
    }
}

#[derive(Debug, Clone)]
pub struct SftConfig {
    pub dims: Vec<usize>,
    pub d_hid: usize,
    pub tau: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            dims: vec![8, 32, 64, 128],
            d_hid: 64,
            tau: 0.02,
            steps: 2000,
            batch_size: 32,
            lr: 1e-3,
            warmup_ratio: 0.1,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CurveRow {
    pub step: usize,
    pub total: f64,
    pub per_dim: Vec<f64>,
}

pub struct SftOutcome {
    pub params: EncoderParams,
    pub curve: Vec<CurveRow>,
}

/// Runs stage-1 training: AdamW with linear warmup over the first
/// `warmup_ratio` fraction of steps, deterministic epoch shuffling, NaN
/// divergence detection. `on_checkpoint` is invoked every `ckpt_every` steps
/// when set.
pub fn train_sft(
    corpus: &Corpus,
    pairs: &[TrainingPair],
    cfg: &SftConfig,
    mut on_checkpoint: Option<(usize, &mut dyn FnMut(usize, &EncoderParams, &OptimizerState) -> Result<()>)>,
) -> Result<SftOutcome> {
    if pairs.is_empty() {
        return Err(Error::validation("no training pairs"));
    }
    if cfg.batch_size == 0 || cfg.steps == 0 {
        return Err(Error::validation("steps and batch_size must be >= 1"));
    }
    let dims = crate::encoder::NestedDims::new(cfg.dims.clone())?;
    let mut params = EncoderParams::init(corpus.d_raw, cfg.d_hid, dims, cfg.seed);
    let mut opt = OptimizerState::new(&params, cfg.lr, cfg.weight_decay);
    let warmup_steps = ((cfg.steps as f64 * cfg.warmup_ratio).ceil() as usize).max(1);

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut epoch = 0u64;
    Stream::new(cfg.seed, "order", &[epoch]).shuffle(&mut order);
    let mut cursor = 0usize;
    let mut curve = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut batch: Vec<&TrainingPair> = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                epoch += 1;
                Stream::new(cfg.seed, "order", &[epoch]).shuffle(&mut order);
                cursor = 0;
            }
            batch.push(&pairs[order[cursor]]);
            cursor += 1;
        }
        let (report, grad) = backward(&batch, None, &params, corpus, cfg.tau)?;
        if !report.total.is_finite() {
            return Err(Error::numeric(format!(
                "training diverged at step {step}: loss {}",
                report.total
            )));
        }
        let lr_scale = ((step + 1) as f64 / warmup_steps as f64).min(1.0);
        opt.apply(&mut params, &grad, lr_scale);
        curve.push(CurveRow {
            step,
            total: report.total,
            per_dim: report.per_dim.iter().map(|(_, v)| *v).collect(),
        });
        if let Some((every, sink)) = on_checkpoint.as_mut() {
            if *every > 0 && (step + 1) % *every == 0 {
                sink(step + 1, &params, &opt)?;
            }
        }
    }
    Ok(SftOutcome { params, curve })
}

/// Loss-curve CSV: step, total, then one column per nested dim.
pub fn write_curve_csv(path: &Path, dims: &[usize], rows: &[CurveRow]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> = std::iter::once("step".to_string())
        .chain(std::iter::once("total_loss".to_string()))
        .chain(dims.iter().map(|d| format!("js_{d}")))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for r in rows {
        let mut cols = vec![r.step.to_string(), format!("{:.9}", r.total)];
        cols.extend(r.per_dim.iter().map(|v| format!("{v:.9}")));
        writeln!(w, "{}", cols.join(","))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub flat_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub entries: Vec<GradCheckEntry>,
}

/// Relative error with a floor on the denominator: below the floor the
/// comparison is effectively absolute, matching the truncation noise of
/// central differences at step h.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Central-difference check of the analytic gradient on sampled coordinates.
pub fn grad_check(
    params: &EncoderParams,
    pairs: &[&TrainingPair],
    corpus: &Corpus,
    tau: f64,
    h: f64,
    tolerance: f64,
    n_coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if h <= 0.0 {
        return Err(Error::validation("finite-difference step h must be > 0"));
    }
    let (_, grad) = backward(pairs, None, params, corpus, tau)?;
    let total = params.t.len();
    let mut s = Stream::new(seed, "gradcheck", &[]);
    let mut entries = Vec::with_capacity(n_coords);
    let mut max_rel: f64 = 0.0;
    for _ in 0..n_coords {
        let idx = s.index(total);
        let analytic = grad.get_flat(idx);
        let mut plus = params.clone();
        plus.t.set_flat(idx, plus.t.get_flat(idx) + h);
        let mut minus = params.clone();
        minus.t.set_flat(idx, minus.t.get_flat(idx) - h);
        let lp = sft_loss(pairs, None, &plus, corpus, tau)?.total;
        let lm = sft_loss(pairs, None, &minus, corpus, tau)?.total;
        let numeric = (lp - lm) / (2.0 * h);
        let rel = relative_error(analytic, numeric);
        max_rel = max_rel.max(rel);
        entries.push(GradCheckEntry {
            flat_index: idx,
            analytic,
            numeric,
            rel_err: rel,
        });
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        tolerance,
        pass: max_rel < tolerance,
        entries,
    })
}
