//! l-infinity gradient attacks: PGD, APGD, targeted attacks, the two-stage
//! threshold-filtered protocol, multi-encoder ensemble attacks and
//! cross-model transfer evaluation.
//!
//! The low-level optimizers (`pgd_on_loss`, `apgd_on_loss`) work on a bare
//! scalar loss closure, which is what closed-form oracle tests drive. Batch
//! entry points take anything implementing [`Pipeline`] and fan out over
//! samples on the shared worker pool; per-sample results are collected in
//! ascending sample order, and per-sample seeds derive from the config seed
//! plus the sample's position, so runs are reproducible bit for bit.
//!
//! Every batch attack validates the feasibility invariant before returning:
//! `max|x_adv - x0| <= eps + 1e-6` and all pixels in `[0,1]`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::Tensor;
use crate::thread_pool;

pub const FEASIBILITY_TOLERANCE: f32 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackFamily {
    Pgd,
    Apgd,
}

impl AttackFamily {
    pub fn name(&self) -> &'static str {
        match self {
            AttackFamily::Pgd => "pgd",
            AttackFamily::Apgd => "apgd",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pgd" => Ok(AttackFamily::Pgd),
            "apgd" => Ok(AttackFamily::Apgd),
            other => Err(Error::InvalidArgument(format!("unknown attack family '{other}'"))),
        }
    }
}

/// Which scalar the attack optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossSelector {
    /// Cross-entropy of the zero-shot logits against the class.
    CrossEntropy,
    /// Negative cosine similarity to the true class embedding (untargeted).
    NegCosineToClass,
    /// Negative cosine similarity to the target class embedding (targeted).
    NegCosineToTarget,
}

impl LossSelector {
    pub fn name(&self) -> &'static str {
        match self {
            LossSelector::CrossEntropy => "cross-entropy",
            LossSelector::NegCosineToClass => "neg-cosine-class",
            LossSelector::NegCosineToTarget => "neg-cosine-target",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cross-entropy" => Ok(LossSelector::CrossEntropy),
            "neg-cosine-class" => Ok(LossSelector::NegCosineToClass),
            "neg-cosine-target" => Ok(LossSelector::NegCosineToTarget),
            other => Err(Error::InvalidArgument(format!("unknown loss selector '{other}'"))),
        }
    }
}

/// The two loss computations a pipeline must expose; the selector above maps
/// onto these plus a class index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    NegCosine,
}

#[derive(Debug, Clone)]
pub struct AttackConfig {
    pub family: AttackFamily,
    /// l-infinity radius as a fraction of the [0,1] pixel range.
    pub eps: f32,
    pub iterations: usize,
    /// PGD step size (default `2.5 * eps / iterations`) or APGD initial
    /// step (default `2 * eps`).
    pub step_size: Option<f32>,
    pub targeted: bool,
    pub target: Option<usize>,
    pub loss: LossSelector,
    pub seed: u64,
    pub random_start: bool,
}

impl AttackConfig {
    pub fn untargeted(family: AttackFamily, eps: f32, iterations: usize) -> Self {
        AttackConfig {
            family,
            eps,
            iterations,
            step_size: None,
            targeted: false,
            target: None,
            loss: LossSelector::CrossEntropy,
            seed: 0,
            random_start: false,
        }
    }

    pub fn targeted(family: AttackFamily, eps: f32, iterations: usize, target: usize) -> Self {
        AttackConfig {
            family,
            eps,
            iterations,
            step_size: None,
            targeted: true,
            target: Some(target),
            loss: LossSelector::NegCosineToTarget,
            seed: 0,
            random_start: false,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_loss(mut self, loss: LossSelector) -> Self {
        self.loss = loss;
        self
    }

    pub fn with_step(mut self, step: f32) -> Self {
        self.step_size = Some(step);
        self
    }

    /// Effective PGD step / APGD initial step.
    pub fn effective_step(&self) -> f32 {
        match self.step_size {
            Some(s) => s,
            None => match self.family {
                AttackFamily::Pgd => {
                    if self.iterations == 0 {
                        0.0
                    } else {
                        2.5 * self.eps / self.iterations as f32
                    }
                }
                AttackFamily::Apgd => 2.0 * self.eps,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eps < 0.0 {
            return Err(Error::InvalidArgument("eps must be >= 0".into()));
        }
        if self.iterations > 0 && self.eps > 0.0 && self.effective_step() <= 0.0 {
            return Err(Error::InvalidArgument("step size must be > 0".into()));
        }
        match (self.targeted, self.loss) {
            (true, LossSelector::NegCosineToClass) => {
                return Err(Error::InvalidArgument(
                    "targeted attacks use cross-entropy or neg-cosine-target".into(),
                ))
            }
            (false, LossSelector::NegCosineToTarget) => {
                return Err(Error::InvalidArgument(
                    "neg-cosine-target requires a targeted attack".into(),
                ))
            }
            _ => {}
        }
        if self.targeted && self.target.is_none() {
            return Err(Error::InvalidArgument("targeted attack without a target".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub adversarial: Vec<Tensor>,
    /// Best loss so far after each iterate, per sample (length
    /// `iterations + 1`, starting at the clean point).
    pub best_loss_trace: Vec<Vec<f32>>,
    /// Targeted: prediction equals the target. Untargeted: prediction
    /// differs from the true label.
    pub success: Vec<bool>,
    pub iterations_used: usize,
}

/// A differentiable classification pipeline an attack can drive.
pub trait Pipeline: Sync {
    fn input_shape(&self) -> &[usize];
    fn n_classes(&self) -> usize;
    /// Zero-shot logits for an image.
    fn logits(&self, image: &Tensor) -> Result<Tensor>;
    /// Scalar loss of `kind` at `class`, plus its gradient w.r.t. the image.
    fn loss_and_grad(&self, image: &Tensor, class: usize, kind: LossKind)
        -> Result<(f32, Tensor)>;

    fn predict(&self, image: &Tensor) -> Result<usize> {
        Ok(argmax(self.logits(image)?.data()))
    }
}

pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Low-level single-sample optimizers over a bare loss closure.
// ---------------------------------------------------------------------------

/// Loss closure: image -> (loss, d loss / d image).
pub type LossFn<'a> = dyn Fn(&Tensor) -> Result<(f32, Tensor)> + Sync + 'a;

pub struct SingleAttack {
    pub adversarial: Tensor,
    pub best_loss_trace: Vec<f32>,
}

struct Box01 {
    lo: Vec<f32>,
    hi: Vec<f32>,
}

impl Box01 {
    fn around(x0: &Tensor, eps: f32) -> Self {
        Box01 {
            lo: x0.data().iter().map(|&v| (v - eps).max(0.0)).collect(),
            hi: x0.data().iter().map(|&v| (v + eps).min(1.0)).collect(),
        }
    }

    fn project(&self, x: &mut [f32]) {
        for (v, (&lo, &hi)) in x.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            *v = v.clamp(lo, hi);
        }
    }
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Objective ascent direction: +1 maximizes the loss (untargeted), -1
/// minimizes it (targeted).
fn direction(cfg: &AttackConfig) -> f32 {
    if cfg.targeted {
        -1.0
    } else {
        1.0
    }
}

fn random_start(x0: &Tensor, eps: f32, seed: u64, container: &Box01) -> Result<Tensor> {
    use rand::Rng;
    let mut stream = rng_for(seed, &[0x7261]);
    let mut data: Vec<f32> = x0
        .data()
        .iter()
        .map(|&v| v + stream.gen_range(-eps..=eps))
        .collect();
    container.project(&mut data);
    Tensor::new(x0.shape().to_vec(), data)
}

/// Plain projected sign-gradient ascent/descent; returns the best-loss
/// iterate over the whole trajectory (the clean point included).
pub fn pgd_on_loss(loss: &LossFn, x0: &Tensor, cfg: &AttackConfig, seed: u64) -> Result<SingleAttack> {
    cfg.validate()?;
    let dir = direction(cfg);
    let container = Box01::around(x0, cfg.eps);
    let step = cfg.effective_step();

    let mut x = if cfg.random_start && cfg.eps > 0.0 && cfg.iterations > 0 {
        random_start(x0, cfg.eps, seed, &container)?
    } else {
        x0.clone()
    };

    let (f0, mut grad) = loss(&x)?;
    let mut best_obj = dir * f0;
    let mut best_x = x.clone();
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    trace.push(dir * best_obj);

    for _ in 0..cfg.iterations {
        let mut data = x.clone().into_data();
        for (v, g) in data.iter_mut().zip(grad.data()) {
            *v += dir * step * sign(*g);
        }
        container.project(&mut data);
        x = Tensor::new(x0.shape().to_vec(), data)?;
        let (f, g) = loss(&x)?;
        grad = g;
        if dir * f > best_obj {
            best_obj = dir * f;
            best_x = x.clone();
        }
        trace.push(dir * best_obj);
    }

    Ok(SingleAttack {
        adversarial: best_x,
        best_loss_trace: trace,
    })
}

/// APGD: momentum steps with checkpointed step-size halving and best-point
/// restarts. Checkpoint fractions follow p0 = 0, p1 = 0.22,
/// p_{j+1} = p_j + max(p_j - p_{j-1} - 0.03, 0.06); at a checkpoint the step
/// halves when fewer than rho = 0.75 of the window's iterations improved the
/// objective, or when both the step and the best objective are unchanged
/// since the previous checkpoint. After halving, the search restarts from
/// the best point found so far. Momentum coefficient alpha = 0.75 after the
/// first iteration.
pub fn apgd_on_loss(loss: &LossFn, x0: &Tensor, cfg: &AttackConfig, seed: u64) -> Result<SingleAttack> {
    cfg.validate()?;
    let dir = direction(cfg);
    let container = Box01::around(x0, cfg.eps);
    let alpha = 0.75f32;
    let rho = 0.75f32;

    let start = if cfg.random_start && cfg.eps > 0.0 && cfg.iterations > 0 {
        random_start(x0, cfg.eps, seed, &container)?
    } else {
        x0.clone()
    };

    let (f_start, mut grad) = loss(&start)?;
    let mut best_obj = dir * f_start;
    let mut best_x = start.clone();
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    trace.push(dir * best_obj);
    if cfg.iterations == 0 {
        return Ok(SingleAttack {
            adversarial: best_x,
            best_loss_trace: trace,
        });
    }

    let checkpoints = apgd_checkpoints(cfg.iterations);
    let mut eta = cfg.effective_step();
    let mut x_prev = start.clone();
    let mut x = start;
    let mut obj_prev = dir * f_start;

    // Per-window progress accounting.
    let mut window_start = 0usize;
    let mut improvements = 0usize;
    let mut eta_at_last_checkpoint = eta;
    let mut best_at_last_checkpoint = best_obj;
    let mut next_checkpoint = 0usize;

    for k in 0..cfg.iterations {
        // z = P(x + eta * sign(grad)) in the ascent direction.
        let mut z = x.clone().into_data();
        for (v, g) in z.iter_mut().zip(grad.data()) {
            *v += dir * eta * sign(*g);
        }
        container.project(&mut z);

        let new_x = if k == 0 {
            Tensor::new(x0.shape().to_vec(), z)?
        } else {
            // x_{k+1} = P(x_k + alpha (z - x_k) + (1 - alpha)(x_k - x_{k-1}))
            let mut data: Vec<f32> = x
                .data()
                .iter()
                .zip(z.iter())
                .zip(x_prev.data())
                .map(|((&xk, &zk), &xkm1)| xk + alpha * (zk - xk) + (1.0 - alpha) * (xk - xkm1))
                .collect();
            container.project(&mut data);
            Tensor::new(x0.shape().to_vec(), data)?
        };

        let (f, g) = loss(&new_x)?;
        let obj = dir * f;
        if obj > obj_prev {
            improvements += 1;
        }
        if obj > best_obj {
            best_obj = obj;
            best_x = new_x.clone();
        }
        trace.push(dir * best_obj);

        x_prev = x;
        x = new_x;
        grad = g;
        obj_prev = obj;

        // Checkpoint logic (skips the synthetic checkpoint at iteration 0).
        while next_checkpoint < checkpoints.len() && checkpoints[next_checkpoint] == k + 1 {
            let window = (k + 1) - window_start;
            let too_few = (improvements as f32) < rho * window as f32;
            let stalled =
                eta == eta_at_last_checkpoint && best_obj == best_at_last_checkpoint;
            if too_few || stalled {
                eta *= 0.5;
                x = best_x.clone();
                x_prev = best_x.clone();
                let (f_best, g_best) = loss(&x)?;
                obj_prev = dir * f_best;
                grad = g_best;
            }
            eta_at_last_checkpoint = eta;
            best_at_last_checkpoint = best_obj;
            window_start = k + 1;
            improvements = 0;
            next_checkpoint += 1;
        }
    }

    Ok(SingleAttack {
        adversarial: best_x,
        best_loss_trace: trace,
    })
}

/// Iteration indices (1-based counts of completed iterations) at which APGD
/// re-evaluates its step size.
pub fn apgd_checkpoints(iterations: usize) -> Vec<usize> {
    let n = iterations as f64;
    let mut ps = vec![0.0f64, 0.22];
    while *ps.last().expect("non-empty") < 1.0 {
        let j = ps.len();
        let next = ps[j - 1] + (ps[j - 1] - ps[j - 2] - 0.03).max(0.06);
        ps.push(next);
    }
    let mut out = Vec::new();
    for &p in &ps[1..] {
        let w = (p * n).ceil() as usize;
        if w >= 1 && w <= iterations && out.last() != Some(&w) {
            out.push(w);
        }
    }
    out
}

fn run_single(loss: &LossFn, x0: &Tensor, cfg: &AttackConfig, seed: u64) -> Result<SingleAttack> {
    match cfg.family {
        AttackFamily::Pgd => pgd_on_loss(loss, x0, cfg, seed),
        AttackFamily::Apgd => apgd_on_loss(loss, x0, cfg, seed),
    }
}

// ---------------------------------------------------------------------------
// Batch attacks over a pipeline.
// ---------------------------------------------------------------------------

/// The class an attack's loss is evaluated at, given the config.
fn attack_class(cfg: &AttackConfig, label: usize) -> usize {
    if cfg.targeted {
        cfg.target.expect("validated")
    } else {
        label
    }
}

fn loss_kind(cfg: &AttackConfig) -> LossKind {
    match cfg.loss {
        LossSelector::CrossEntropy => LossKind::CrossEntropy,
        LossSelector::NegCosineToClass | LossSelector::NegCosineToTarget => LossKind::NegCosine,
    }
}

fn check_inputs(pipeline: &dyn Pipeline, images: &[Tensor], labels: &[usize]) -> Result<()> {
    if images.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    for (i, image) in images.iter().enumerate() {
        if image.shape() != pipeline.input_shape() {
            return Err(Error::ShapeMismatch {
                context: format!("attack input {i}"),
                expected: pipeline.input_shape().to_vec(),
                actual: image.shape().to_vec(),
            });
        }
        if image.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidArgument(format!(
                "attack input {i} has pixels outside [0,1]"
            )));
        }
    }
    for (i, &label) in labels.iter().enumerate() {
        if label >= pipeline.n_classes() {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range at sample {i}"
            )));
        }
    }
    Ok(())
}

/// Feasibility invariant, asserted on every AttackResult.
pub fn check_feasible(originals: &[Tensor], result: &AttackResult, eps: f32) -> Result<()> {
    for (i, (x0, adv)) in originals.iter().zip(&result.adversarial).enumerate() {
        let dist = x0.linf_distance(adv)?;
        if dist > eps + FEASIBILITY_TOLERANCE {
            return Err(Error::Invariant(format!(
                "sample {i}: ||x_adv - x0||_inf = {dist} exceeds eps = {eps}"
            )));
        }
        if adv.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Invariant(format!(
                "sample {i}: adversarial pixels escape [0,1]"
            )));
        }
    }
    Ok(())
}

/// Run the configured attack on every sample. Per-sample seeds derive from
/// `cfg.seed` and the sample position; samples are independent and run on
/// the worker pool, with results gathered in ascending sample order.
pub fn attack(
    pipeline: &dyn Pipeline,
    images: &[Tensor],
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    check_inputs(pipeline, images, labels)?;
    if let Some(target) = cfg.target {
        if target >= pipeline.n_classes() {
            return Err(Error::InvalidArgument(format!("target {target} out of range")));
        }
    }
    let kind = loss_kind(cfg);

    let singles: Result<Vec<(SingleAttack, bool)>> = thread_pool().install(|| {
        images
            .par_iter()
            .zip(labels.par_iter())
            .enumerate()
            .map(|(i, (image, &label))| {
                let class = attack_class(cfg, label);
                let loss = |x: &Tensor| pipeline.loss_and_grad(x, class, kind);
                let single = run_single(&loss, image, cfg, crate::rng::derive_seed(cfg.seed, &[i as u64]))?;
                let prediction = pipeline.predict(&single.adversarial)?;
                let success = if cfg.targeted {
                    prediction == class
                } else {
                    prediction != label
                };
                Ok((single, success))
            })
            .collect()
    });
    let singles = singles?;

    let result = AttackResult {
        adversarial: singles.iter().map(|(s, _)| s.adversarial.clone()).collect(),
        best_loss_trace: singles.iter().map(|(s, _)| s.best_loss_trace.clone()).collect(),
        success: singles.iter().map(|(_, ok)| *ok).collect(),
        iterations_used: cfg.iterations,
    };
    check_feasible(images, &result, cfg.eps)?;
    Ok(result)
}

pub fn pgd(
    pipeline: &dyn Pipeline,
    images: &[Tensor],
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    let cfg = AttackConfig {
        family: AttackFamily::Pgd,
        ..cfg.clone()
    };
    attack(pipeline, images, labels, &cfg)
}

pub fn apgd(
    pipeline: &dyn Pipeline,
    images: &[Tensor],
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    let cfg = AttackConfig {
        family: AttackFamily::Apgd,
        ..cfg.clone()
    };
    attack(pipeline, images, labels, &cfg)
}

/// Targeted attack: minimize the loss toward `target`; success means the
/// prediction lands on the target.
pub fn targeted_attack(
    pipeline: &dyn Pipeline,
    images: &[Tensor],
    target: usize,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    let mut cfg = cfg.clone();
    cfg.targeted = true;
    cfg.target = Some(target);
    if cfg.loss == LossSelector::NegCosineToClass {
        cfg.loss = LossSelector::NegCosineToTarget;
    }
    // Labels are irrelevant for a targeted objective; pass the target so
    // range checks stay honest.
    let labels = vec![target; images.len()];
    attack(pipeline, &images.to_vec(), &labels, &cfg)
}

#[derive(Debug, Clone)]
pub struct TwoStageResult {
    pub stage1: AttackResult,
    /// Indices (into the input batch) that survived stage 1 and were
    /// re-attacked.
    pub survivors: Vec<usize>,
    pub stage2: Option<AttackResult>,
    pub stage1_scores: Vec<f32>,
    /// Per-sample `min(stage1 score, stage2 score where run)`.
    pub final_scores: Vec<f32>,
    /// Per-sample image achieving the final score.
    pub final_images: Vec<Tensor>,
}

/// Two-stage protocol: a cheap first attack on every sample; samples whose
/// post-attack score drops below `threshold` are finalized, the rest get a
/// second, bigger-budget round. Scores are "higher is better for the model",
/// so the combined protocol can only push them down.
pub fn two_stage_attack(
    pipeline: &dyn Pipeline,
    images: &[Tensor],
    labels: &[usize],
    stage1: &AttackConfig,
    stage2: &AttackConfig,
    score_fn: &(dyn Fn(usize, &Tensor) -> Result<f32> + Sync),
    threshold: f32,
) -> Result<TwoStageResult> {
    if stage2.iterations < stage1.iterations {
        return Err(Error::InvalidArgument(
            "stage 2 budget must be >= stage 1 budget".into(),
        ));
    }
    let first = attack(pipeline, images, labels, stage1)?;
    let mut stage1_scores = Vec::with_capacity(images.len());
    for (i, adv) in first.adversarial.iter().enumerate() {
        stage1_scores.push(score_fn(i, adv)?);
    }

    let survivors: Vec<usize> = (0..images.len())
        .filter(|&i| stage1_scores[i] >= threshold)
        .collect();

    let mut final_scores = stage1_scores.clone();
    let mut final_images = first.adversarial.clone();
    let stage2_result = if survivors.is_empty() {
        None
    } else {
        let sub_images: Vec<Tensor> = survivors.iter().map(|&i| images[i].clone()).collect();
        let sub_labels: Vec<usize> = survivors.iter().map(|&i| labels[i]).collect();
        let second = attack(pipeline, &sub_images, &sub_labels, stage2)?;
        for (pos, &i) in survivors.iter().enumerate() {
            let score = score_fn(i, &second.adversarial[pos])?;
            if score < final_scores[i] {
                final_scores[i] = score;
                final_images[i] = second.adversarial[pos].clone();
            }
        }
        Some(second)
    };

    Ok(TwoStageResult {
        stage1: first,
        survivors,
        stage2: stage2_result,
        stage1_scores,
        final_scores,
        final_images,
    })
}

/// Weighted-average-loss ensemble of pipelines. Weights are normalized to
/// sum to one, so a single member degenerates to that member exactly.
pub struct EnsemblePipeline<'a> {
    members: Vec<(&'a dyn Pipeline, f32)>,
}

impl<'a> EnsemblePipeline<'a> {
    pub fn new(members: Vec<(&'a dyn Pipeline, f32)>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::InvalidArgument("ensemble needs at least one member".into()));
        }
        if members.iter().any(|(_, w)| *w <= 0.0) {
            return Err(Error::InvalidArgument("ensemble weights must be positive".into()));
        }
        let (shape, classes) = (members[0].0.input_shape().to_vec(), members[0].0.n_classes());
        for (m, _) in &members[1..] {
            if m.input_shape() != shape.as_slice() || m.n_classes() != classes {
                return Err(Error::ShapeMismatch {
                    context: "ensemble member".into(),
                    expected: shape,
                    actual: m.input_shape().to_vec(),
                });
            }
        }
        let total: f32 = members.iter().map(|(_, w)| w).sum();
        let members = members
            .into_iter()
            .map(|(m, w)| (m, w / total))
            .collect();
        Ok(EnsemblePipeline { members })
    }
}

impl Pipeline for EnsemblePipeline<'_> {
    fn input_shape(&self) -> &[usize] {
        self.members[0].0.input_shape()
    }

    fn n_classes(&self) -> usize {
        self.members[0].0.n_classes()
    }

    fn logits(&self, image: &Tensor) -> Result<Tensor> {
        let mut acc = vec![0.0f32; self.n_classes()];
        for (member, weight) in &self.members {
            let logits = member.logits(image)?;
            for (a, &l) in acc.iter_mut().zip(logits.data()) {
                *a += weight * l;
            }
        }
        Tensor::new(vec![acc.len()], acc)
    }

    fn loss_and_grad(
        &self,
        image: &Tensor,
        class: usize,
        kind: LossKind,
    ) -> Result<(f32, Tensor)> {
        let mut total_loss = 0.0f32;
        let mut total_grad = vec![0.0f32; image.numel()];
        for (member, weight) in &self.members {
            let (loss, grad) = member.loss_and_grad(image, class, kind)?;
            total_loss += weight * loss;
            for (a, &g) in total_grad.iter_mut().zip(grad.data()) {
                *a += weight * g;
            }
        }
        Ok((total_loss, Tensor::new(image.shape().to_vec(), total_grad)?))
    }
}

/// Attack the weighted-average loss of several pipelines at once.
pub fn ensemble_attack(
    members: &[(&dyn Pipeline, f32)],
    images: &[Tensor],
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    let ensemble = EnsemblePipeline::new(members.to_vec())?;
    attack(&ensemble, images, labels, cfg)
}

/// Cross-model transfer matrix. Entry `(i, j)` is target `j`'s accuracy on
/// adversarial examples crafted against surrogate `i`; the diagonal is the
/// white-box score.
pub fn transfer_eval(
    surrogates: &[&dyn Pipeline],
    targets: &[&dyn Pipeline],
    images: &[Tensor],
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<Vec<Vec<f32>>> {
    let mut matrix = Vec::with_capacity(surrogates.len());
    for surrogate in surrogates {
        let crafted = attack(*surrogate, images, labels, cfg)?;
        let mut row = Vec::with_capacity(targets.len());
        for target in targets {
            let mut correct = 0usize;
            for (adv, &label) in crafted.adversarial.iter().zip(labels) {
                if target.predict(adv)? == label {
                    correct += 1;
                }
            }
            row.push(correct as f32 / labels.len().max(1) as f32);
        }
        matrix.push(row);
    }
    Ok(matrix)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// loss(x) = w . x — the closed-form l-infinity case.
    fn linear_loss(w: Vec<f32>) -> impl Fn(&Tensor) -> Result<(f32, Tensor)> + Sync {
        move |x: &Tensor| {
            let loss: f32 = x.data().iter().zip(&w).map(|(a, b)| a * b).sum();
            Ok((loss, Tensor::new(x.shape().to_vec(), w.clone())?))
        }
    }

    /// Concave quadratic with maximum at `c`: f(x) = -sum a_i (x_i - c_i)^2.
    fn quadratic_loss(a: Vec<f32>, c: Vec<f32>) -> impl Fn(&Tensor) -> Result<(f32, Tensor)> + Sync {
        move |x: &Tensor| {
            let mut loss = 0.0f32;
            let mut grad = vec![0.0f32; x.numel()];
            for i in 0..x.numel() {
                let d = x.data()[i] - c[i];
                loss -= a[i] * d * d;
                grad[i] = -2.0 * a[i] * d;
            }
            Ok((loss, Tensor::new(x.shape().to_vec(), grad)?))
        }
    }

    #[test]
    fn zero_eps_and_zero_iterations_return_input() {
        let x0 = Tensor::vector(&[0.2, 0.8, 0.5]).unwrap();
        let loss = linear_loss(vec![1.0, -1.0, 0.3]);

        for family in [AttackFamily::Pgd, AttackFamily::Apgd] {
            let cfg = AttackConfig::untargeted(family, 0.0, 10);
            let out = run_single(&loss, &x0, &cfg, 1).unwrap();
            assert_eq!(out.adversarial.data(), x0.data());

            let cfg = AttackConfig::untargeted(family, 0.1, 0);
            let out = run_single(&loss, &x0, &cfg, 1).unwrap();
            assert_eq!(out.adversarial.data(), x0.data());
            assert_eq!(out.best_loss_trace.len(), 1);
        }
    }

    #[test]
    fn one_step_pgd_matches_linf_maximizer_bitwise() {
        let x0 = Tensor::vector(&[0.3, 0.6, 0.01, 0.99]).unwrap();
        let w = vec![2.0, -1.0, -0.5, 0.25];
        let eps = 8.0 / 255.0;
        let cfg = AttackConfig::untargeted(AttackFamily::Pgd, eps, 1).with_step(eps);
        let out = pgd_on_loss(&linear_loss(w.clone()), &x0, &cfg, 0).unwrap();

        let expected: Vec<f32> = x0
            .data()
            .iter()
            .zip(&w)
            .map(|(&v, &wi)| {
                let stepped = v + eps * sign(wi);
                stepped.clamp((v - eps).max(0.0), (v + eps).min(1.0))
            })
            .collect();
        let got: Vec<u32> = out.adversarial.data().iter().map(|v| v.to_bits()).collect();
        let want: Vec<u32> = expected.iter().map(|v| v.to_bits()).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn apgd_first_iterate_is_a_pgd_step_at_twice_eps() {
        let x0 = Tensor::vector(&[0.4, 0.5, 0.6]).unwrap();
        let loss = linear_loss(vec![1.0, -2.0, 0.5]);
        let eps = 0.05;
        let apgd_cfg = AttackConfig::untargeted(AttackFamily::Apgd, eps, 1);
        let pgd_cfg = AttackConfig::untargeted(AttackFamily::Pgd, eps, 1).with_step(2.0 * eps);
        let a = apgd_on_loss(&loss, &x0, &apgd_cfg, 0).unwrap();
        let p = pgd_on_loss(&loss, &x0, &pgd_cfg, 0).unwrap();
        assert_eq!(a.adversarial.data(), p.adversarial.data());
    }

    #[test]
    fn best_loss_trace_is_monotone_nondecreasing() {
        let x0 = Tensor::vector(&[0.5; 6]).unwrap();
        let loss = quadratic_loss(vec![1.0, 2.0, 0.5, 3.0, 1.5, 0.25], vec![0.52; 6]);
        for family in [AttackFamily::Pgd, AttackFamily::Apgd] {
            let cfg = AttackConfig::untargeted(family, 0.04, 40);
            let out = run_single(&loss, &x0, &cfg, 3).unwrap();
            for pair in out.best_loss_trace.windows(2) {
                assert!(pair[1] >= pair[0], "{family:?} trace decreased: {pair:?}");
            }
            assert_eq!(out.best_loss_trace.len(), 41);
        }
    }

    #[test]
    fn apgd_beats_pgd_on_most_concave_quadratics() {
        use rand::Rng;
        let mut wins = 0u64;
        let trials = 20u64;
        for t in 0..trials {
            let mut stream = crate::rng::rng_for(77, &[t]);
            let dim = 8;
            let a: Vec<f32> = (0..dim).map(|_| stream.gen_range(0.5..4.0)).collect();
            let c: Vec<f32> = (0..dim).map(|_| stream.gen_range(0.45..0.55)).collect();
            let x0 = Tensor::vector(&vec![0.5; dim]).unwrap();
            let loss = quadratic_loss(a, c);
            let eps = 0.1;
            let apgd_out = apgd_on_loss(
                &loss,
                &x0,
                &AttackConfig::untargeted(AttackFamily::Apgd, eps, 100),
                t,
            )
            .unwrap();
            let pgd_out = pgd_on_loss(
                &loss,
                &x0,
                &AttackConfig::untargeted(AttackFamily::Pgd, eps, 100),
                t,
            )
            .unwrap();
            if apgd_out.best_loss_trace.last() >= pgd_out.best_loss_trace.last() {
                wins += 1;
            }
        }
        assert!(wins * 10 >= trials * 9, "APGD won only {wins}/{trials}");
    }

    #[test]
    fn monotone_budget_for_fixed_step_pgd() {
        let x0 = Tensor::vector(&[0.5; 4]).unwrap();
        let loss = quadratic_loss(vec![1.0, 0.5, 2.0, 1.5], vec![0.53, 0.47, 0.58, 0.5]);
        let short = pgd_on_loss(
            &loss,
            &x0,
            &AttackConfig::untargeted(AttackFamily::Pgd, 0.06, 10).with_step(0.01),
            0,
        )
        .unwrap();
        let long = pgd_on_loss(
            &loss,
            &x0,
            &AttackConfig::untargeted(AttackFamily::Pgd, 0.06, 20).with_step(0.01),
            0,
        )
        .unwrap();
        assert!(long.best_loss_trace.last() >= short.best_loss_trace.last());
    }

    #[test]
    fn attacks_are_deterministic_under_seed() {
        let x0 = Tensor::vector(&[0.5; 5]).unwrap();
        let loss = quadratic_loss(vec![1.0; 5], vec![0.55, 0.45, 0.5, 0.6, 0.4]);
        let mut cfg = AttackConfig::untargeted(AttackFamily::Apgd, 0.08, 25);
        cfg.random_start = true;
        cfg.seed = 42;
        let a = apgd_on_loss(&loss, &x0, &cfg, 9).unwrap();
        let b = apgd_on_loss(&loss, &x0, &cfg, 9).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.adversarial), bits(&b.adversarial));
    }

    #[test]
    fn config_validation_catches_mismatches() {
        let mut cfg = AttackConfig::untargeted(AttackFamily::Pgd, 0.1, 10);
        cfg.loss = LossSelector::NegCosineToTarget;
        assert!(cfg.validate().is_err());

        let mut cfg = AttackConfig::targeted(AttackFamily::Pgd, 0.1, 10, 3);
        cfg.loss = LossSelector::NegCosineToClass;
        assert!(cfg.validate().is_err());

        let mut cfg = AttackConfig::untargeted(AttackFamily::Pgd, -0.5, 10);
        cfg.eps = -0.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn checkpoint_schedule_matches_reference_prefix() {
        // Fractions 0, .22, .41, .57, .70, .80, .87, .93, .99 scaled by 100.
        let ws = apgd_checkpoints(100);
        assert_eq!(ws, vec![22, 41, 58, 70, 80, 87, 93, 99]);
    }
}
