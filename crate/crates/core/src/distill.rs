//! The two-space distillation step and every loss term inside it.
//!
//! Input-space distillation drives the generator toward samples on which
//! the frozen local teachers are individually confident (low entropy) yet
//! mutually divergent (high Jensen-Shannon divergence), with per-node
//! discriminators keeping the samples close to each local data
//! distribution. Output-space distillation trains the central student to
//! mimic an importance-weighted ensemble of teacher logits, while the
//! generator is simultaneously pushed toward samples the student has not
//! mastered yet.

use rand_chacha::ChaCha8Rng;

use crate::data::{class_prior_ratio, local_weight, PartitionSpec};
use crate::error::{Error, Result};
use crate::nets::{sample_noise, Network, NoiseSpec};
use crate::privacy::{sanitize, DpConfig};
use crate::tensor::{cosine_lr, AdamState, Graph, NodeId, Tensor};

/// Realized loss values for one distillation step.
#[derive(Debug, Clone)]
pub struct LossBundle {
    pub l_gan_per_node: Vec<f64>,
    pub l_conf: f64,
    pub l_unique: f64,
    pub l_mimic: f64,
    pub step_index: u64,
}

impl LossBundle {
    fn new(l_gan_per_node: Vec<f64>, l_conf: f64, l_unique: f64, l_mimic: f64, step_index: u64) -> Result<Self> {
        let all = l_gan_per_node
            .iter()
            .chain([&l_conf, &l_unique, &l_mimic]);
        for v in all {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("loss at step {step_index}")));
            }
        }
        if l_conf < -1e-9 || l_mimic < 0.0 || l_unique > 1e-9 {
            return Err(Error::Value(format!(
                "loss signs violated at step {step_index}: conf={l_conf} unique={l_unique} mimic={l_mimic}"
            )));
        }
        Ok(Self { l_gan_per_node, l_conf, l_unique, l_mimic, step_index })
    }

    pub fn csv_header(nodes: usize) -> String {
        let gans: Vec<String> = (0..nodes).map(|k| format!("l_gan_{k}")).collect();
        format!("step,{},l_conf,l_unique,l_mimic", gans.join(","))
    }

    pub fn csv_row(&self) -> String {
        let gans: Vec<String> = self.l_gan_per_node.iter().map(|v| format!("{v}")).collect();
        format!(
            "{},{},{},{},{}",
            self.step_index,
            gans.join(","),
            self.l_conf,
            self.l_unique,
            self.l_mimic
        )
    }
}

/// Per-sample, per-class convex weights over nodes, and the unnormalized
/// products they came from. Layout is `[batch, node, class]`, row-major.
#[derive(Debug, Clone)]
pub struct ImportanceWeights {
    pub pi: Vec<f64>,
    pub unnormalized: Vec<f64>,
    pub batch: usize,
    pub nodes: usize,
    pub classes: usize,
}

impl ImportanceWeights {
    pub fn pi_at(&self, b: usize, k: usize, c: usize) -> f64 {
        self.pi[(b * self.nodes + k) * self.classes + c]
    }
}

fn validate_prob_row(q: &[f64], tol: f64) -> Result<()> {
    if q.iter().any(|&v| !(0.0..=1.0 + tol).contains(&v)) {
        return Err(Error::Value("probability entries must lie in [0, 1]".into()));
    }
    let sum: f64 = q.iter().sum();
    if (sum - 1.0).abs() > tol {
        return Err(Error::Value(format!("probabilities sum to {sum}, not 1")));
    }
    Ok(())
}

fn validate_weights(pi: &[f64]) -> Result<()> {
    if pi.iter().any(|&v| v < 0.0) {
        return Err(Error::Value("weights must be nonnegative".into()));
    }
    let sum: f64 = pi.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Value(format!("weights sum to {sum}, not 1")));
    }
    Ok(())
}

/// Shannon entropy of a probability vector, natural log, `0 log 0 := 0`.
pub fn shannon_entropy(q: &[f64]) -> Result<f64> {
    validate_prob_row(q, 1e-6)?;
    Ok(q.iter().map(|&v| if v > 0.0 { -v * v.ln() } else { 0.0 }).sum())
}

/// Confidence loss: batch mean of the data-size-weighted sum of per-teacher
/// prediction entropies on the generated batch.
pub fn loss_conf(teacher_probs: &[Vec<Vec<f64>>], pi: &[f64]) -> Result<f64> {
    if teacher_probs.len() != pi.len() {
        return Err(Error::Value(format!(
            "{} teachers but {} weights",
            teacher_probs.len(),
            pi.len()
        )));
    }
    validate_weights(pi)?;
    let batch = teacher_probs
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Value("need at least one teacher".into()))?;
    let mut acc = 0.0;
    for (probs_k, &w) in teacher_probs.iter().zip(pi) {
        if probs_k.len() != batch {
            return Err(Error::Shape("teacher batch sizes differ".into()));
        }
        for q in probs_k {
            acc += w * shannon_entropy(q)?;
        }
    }
    Ok(acc / batch as f64)
}

/// Weighted multi-distribution Jensen-Shannon divergence,
/// `H(q_bar) - sum_k pi_k H(q_k)` with `q_bar` the weighted mixture.
pub fn jsd(probs: &[Vec<f64>], pi: &[f64]) -> Result<f64> {
    if probs.len() != pi.len() {
        return Err(Error::Value(format!("{} rows but {} weights", probs.len(), pi.len())));
    }
    validate_weights(pi)?;
    let classes = probs.first().map(Vec::len).ok_or_else(|| Error::Value("jsd of no rows".into()))?;
    let mut mixture = vec![0.0; classes];
    let mut weighted_entropy = 0.0;
    for (q, &w) in probs.iter().zip(pi) {
        if q.len() != classes {
            return Err(Error::Shape("probability rows differ in length".into()));
        }
        weighted_entropy += w * shannon_entropy(q)?;
        for (m, &v) in mixture.iter_mut().zip(q) {
            *m += w * v;
        }
    }
    Ok((shannon_entropy(&mixture)? - weighted_entropy).max(0.0))
}

/// Diversity loss: batch mean of the negated JSD across teacher predictions.
pub fn loss_unique(teacher_probs: &[Vec<Vec<f64>>], pi: &[f64]) -> Result<f64> {
    let batch = teacher_probs
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Value("need at least one teacher".into()))?;
    let mut acc = 0.0;
    for b in 0..batch {
        let rows: Vec<Vec<f64>> = teacher_probs.iter().map(|probs_k| probs_k[b].clone()).collect();
        acc -= jsd(&rows, pi)?;
    }
    Ok(acc / batch as f64)
}

fn clamped_ln(v: f64) -> f64 {
    v.max(crate::tensor::LOG_CLAMP).ln()
}

/// Non-saturating GAN losses for one node from raw scores in `(0, 1)`:
/// the discriminator minimizes `-mean log d_real - mean log(1 - d_fake)`,
/// the generator's contribution is `-pi_k * mean log d_fake`.
pub fn gan_losses(d_real: &[f64], d_fake: &[f64], pi_k: f64) -> Result<(f64, f64)> {
    for &s in d_real.iter().chain(d_fake) {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::Value(format!("discriminator score {s} outside [0, 1]")));
        }
    }
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(Error::Value("gan losses need nonempty score batches".into()));
    }
    let mean_log_real: f64 = d_real.iter().map(|&s| clamped_ln(s)).sum::<f64>() / d_real.len() as f64;
    let mean_log_one_minus_fake: f64 =
        d_fake.iter().map(|&s| clamped_ln(1.0 - s)).sum::<f64>() / d_fake.len() as f64;
    let mean_log_fake: f64 = d_fake.iter().map(|&s| clamped_ln(s)).sum::<f64>() / d_fake.len() as f64;
    Ok((-mean_log_real - mean_log_one_minus_fake, -pi_k * mean_log_fake))
}

/// Per-sample, per-class node weights: class prior ratio times the
/// discriminator realness ratio `d_k(x) / running_mean(d_k(real))`,
/// normalized over nodes for every `(sample, class)`.
pub fn importance_weights(
    spec: &PartitionSpec,
    d_scalar: &[Vec<f64>],
    d_real_running: &[f64],
) -> Result<ImportanceWeights> {
    let nodes = spec.nodes();
    let classes = spec.label_histogram[0].len();
    let mut priors = Vec::with_capacity(nodes);
    for k in 0..nodes {
        priors.push((0..classes).map(|c| class_prior_ratio(spec, k, c)).collect::<Result<_>>()?);
    }
    importance_weights_from_parts(&priors, d_scalar, d_real_running)
}

fn importance_weights_from_parts(
    priors: &[Vec<f64>],
    d_scalar: &[Vec<f64>],
    d_real_running: &[f64],
) -> Result<ImportanceWeights> {
    let nodes = priors.len();
    if d_scalar.len() != nodes || d_real_running.len() != nodes {
        return Err(Error::Value("one score column and one running mean per node required".into()));
    }
    if let Some(&bad) = d_real_running.iter().find(|&&v| v <= 0.0) {
        return Err(Error::Value(format!("running real-score mean must be positive, got {bad}")));
    }
    let batch = d_scalar.first().map(Vec::len).unwrap_or(0);
    if d_scalar.iter().any(|col| col.len() != batch) {
        return Err(Error::Shape("discriminator score columns differ in length".into()));
    }
    let classes = priors[0].len();

    let mut unnormalized = vec![0.0; batch * nodes * classes];
    let mut pi = vec![0.0; batch * nodes * classes];
    for b in 0..batch {
        for k in 0..nodes {
            let ratio = d_scalar[k][b] / d_real_running[k];
            for c in 0..classes {
                unnormalized[(b * nodes + k) * classes + c] = priors[k][c] * ratio;
            }
        }
        for c in 0..classes {
            let denom: f64 = (0..nodes).map(|k| unnormalized[(b * nodes + k) * classes + c]).sum();
            if denom <= 0.0 {
                return Err(Error::Value(format!(
                    "no node contributes weight for class {c}; check partition and scores"
                )));
            }
            for k in 0..nodes {
                let idx = (b * nodes + k) * classes + c;
                pi[idx] = unnormalized[idx] / denom;
            }
        }
    }
    Ok(ImportanceWeights { pi, unnormalized, batch, nodes, classes })
}

/// Importance-weighted ensemble of teacher logits: per class, a convex
/// combination over nodes.
pub fn aggregate_logits(z: &[Tensor], iw: &ImportanceWeights) -> Result<Tensor> {
    if z.len() != iw.nodes {
        return Err(Error::Shape(format!("{} logit blocks but {} nodes", z.len(), iw.nodes)));
    }
    for zk in z {
        if zk.shape() != [iw.batch, iw.classes] {
            return Err(Error::Shape(format!(
                "teacher logits must be [{}, {}], got {:?}",
                iw.batch,
                iw.classes,
                zk.shape()
            )));
        }
    }
    let mut out = vec![0.0; iw.batch * iw.classes];
    for b in 0..iw.batch {
        for c in 0..iw.classes {
            out[b * iw.classes + c] = (0..iw.nodes)
                .map(|k| iw.pi_at(b, k, c) * z[k].values()[b * iw.classes + c])
                .sum();
        }
    }
    Tensor::from_vec(vec![iw.batch, iw.classes], out)
}

/// Mimic loss: batch mean of the squared L2 distance between student logits
/// and the aggregated teacher logits.
pub fn loss_mimic(student_logits: &Tensor, aggregated: &Tensor) -> Result<f64> {
    if student_logits.shape() != aggregated.shape() {
        return Err(Error::Shape(format!(
            "logit shapes differ: {:?} vs {:?}",
            student_logits.shape(),
            aggregated.shape()
        )));
    }
    let batch = student_logits.shape()[0];
    let sq: f64 = student_logits
        .values()
        .iter()
        .zip(aggregated.values())
        .map(|(s, a)| (s - a) * (s - a))
        .sum();
    Ok(sq / batch as f64)
}

/// Hyperparameters for one distillation run.
#[derive(Debug, Clone)]
pub struct DistillHp {
    pub batch: usize,
    pub tau: f64,
    pub lr_generator: f64,
    pub lr_student: f64,
    pub lr_discriminator: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lambda_conf: f64,
    pub lambda_unique: f64,
    pub lambda_mimic: f64,
    pub lambda_gan: f64,
    pub ema_decay: f64,
    /// When set, all three learning rates follow the cosine schedule from
    /// their base value to 0 over this many steps.
    pub anneal_steps: Option<u64>,
}

impl Default for DistillHp {
    fn default() -> Self {
        Self {
            batch: 64,
            tau: 1.0,
            lr_generator: 1e-3,
            lr_student: 1e-3,
            lr_discriminator: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lambda_conf: 1.0,
            lambda_unique: 1.0,
            lambda_mimic: 1.0,
            lambda_gan: 1.0,
            ema_decay: 0.9,
            anneal_steps: None,
        }
    }
}

/// Values released by the nodes during one step, in transmission order;
/// the federation layer logs (and optionally sanitizes) these.
#[derive(Debug, Clone)]
pub struct StepPayloads {
    /// Server -> node broadcast, `[batch, d]`.
    pub generated: Tensor,
    /// Node -> server teacher logits, one `[batch, classes]` block per node.
    pub logits: Vec<Tensor>,
    /// Node -> server per-sample discriminator scores, length `batch` each.
    pub disc_scores: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub losses: LossBundle,
    pub payloads: StepPayloads,
}

/// Mutable cross-step state for one distillation run: class priors, data
/// weights, per-node running means of real discriminator scores, optimizer
/// moments, and the step counter.
pub struct DistillEngine {
    pub noise: NoiseSpec,
    priors: Vec<Vec<f64>>,
    pi: Vec<f64>,
    d_real_ema: Vec<f64>,
    generator_state: AdamState,
    student_state: AdamState,
    disc_states: Vec<AdamState>,
    step: u64,
}

impl DistillEngine {
    pub fn new(spec: &PartitionSpec, noise_dim: usize) -> Result<Self> {
        let nodes = spec.nodes();
        let classes = spec.label_histogram[0].len();
        let mut priors = Vec::with_capacity(nodes);
        for k in 0..nodes {
            priors.push((0..classes).map(|c| class_prior_ratio(spec, k, c)).collect::<Result<_>>()?);
        }
        let pi = (0..nodes).map(|k| local_weight(spec, k)).collect();
        Ok(Self {
            noise: NoiseSpec { dim: noise_dim },
            priors,
            pi,
            d_real_ema: vec![0.0; nodes],
            generator_state: AdamState::new(),
            student_state: AdamState::new(),
            disc_states: (0..nodes).map(|_| AdamState::new()).collect(),
            step: 0,
        })
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn local_weights(&self) -> &[f64] {
        &self.pi
    }

    pub fn d_real_running(&self) -> &[f64] {
        &self.d_real_ema
    }

    fn lr(&self, base: f64, hp: &DistillHp) -> f64 {
        match hp.anneal_steps {
            Some(total) => cosine_lr(base, self.step, total),
            None => base,
        }
    }

    /// Per-row entropy `[batch]` of a `[batch, classes]` probability node.
    fn entropy_rows(g: &mut Graph, q: NodeId) -> Result<NodeId> {
        let lq = g.log_clamped(q)?;
        let qlq = g.mul(q, lq)?;
        let s = g.sum_axis(qlq, 1)?;
        g.neg(s)
    }

    /// Discriminator loss nodes for one node's real batch against a fake
    /// batch already on the tape.
    fn disc_loss_nodes(g: &mut Graph, disc: &Network, bound: &crate::nets::BoundNet, real: NodeId, fake: NodeId) -> Result<(NodeId, NodeId)> {
        let d_real = disc.forward(g, bound, real)?;
        let d_fake = disc.forward(g, bound, fake)?;
        let log_real = g.log_clamped(d_real)?;
        let mean_real = g.mean_all(log_real)?;
        let one = g.constant_scalar(1.0);
        let one_minus_fake = g.sub(one, d_fake)?;
        let log_omf = g.log_clamped(one_minus_fake)?;
        let mean_omf = g.mean_all(log_omf)?;
        let sum = g.add(mean_real, mean_omf)?;
        let loss_d = g.neg(sum)?;
        Ok((loss_d, d_real))
    }

    /// Builds the joint generator/student tape: generated batch, teacher
    /// logits and entropies, adversarial realism, importance-weighted
    /// aggregation, mimic loss, and the combined generator objective.
    /// Teachers and discriminators enter as constants.
    #[allow(clippy::too_many_arguments)]
    fn joint_loss_tape(
        &self,
        g: &mut Graph,
        generator: &Network,
        student: &Network,
        teachers: &[Network],
        discriminators: &[Network],
        d_real_ema: &[f64],
        w: &Tensor,
        hp: &DistillHp,
    ) -> Result<JointTape> {
        let nodes = self.pi.len();
        let w_node = g.constant(w);
        let bound_gen = generator.bind(g);
        let x = generator.forward(g, &bound_gen, w_node)?;

        let classes = teachers[0].output_dim();
        let mut z_nodes = Vec::with_capacity(nodes);
        let mut weighted_entropy: Option<NodeId> = None;
        let mut mixture: Option<NodeId> = None;
        for (k, teacher) in teachers.iter().enumerate() {
            let bt = teacher.bind_frozen_view(g);
            let z = teacher.forward(g, &bt, x)?;
            let q = g.softmax_tau(z, hp.tau)?;
            z_nodes.push(z);

            let ent = Self::entropy_rows(g, q)?;
            let went = g.scale(ent, self.pi[k])?;
            weighted_entropy = Some(match weighted_entropy {
                Some(acc) => g.add(acc, went)?,
                None => went,
            });
            let wq = g.scale(q, self.pi[k])?;
            mixture = Some(match mixture {
                Some(acc) => g.add(acc, wq)?,
                None => wq,
            });
        }
        let weighted_entropy = weighted_entropy.expect("at least one node");
        let mixture = mixture.expect("at least one node");

        let l_conf = g.mean_all(weighted_entropy)?;
        let mixture_entropy = Self::entropy_rows(g, mixture)?;
        // -JSD per sample = weighted entropy - mixture entropy
        let neg_jsd = g.sub(weighted_entropy, mixture_entropy)?;
        let l_unique = g.mean_all(neg_jsd)?;

        let mut loss_g_adv: Option<NodeId> = None;
        let mut pi_hat_nodes = Vec::with_capacity(nodes);
        let mut score_nodes = Vec::with_capacity(nodes);
        for (k, disc) in discriminators.iter().enumerate() {
            let bd = disc.bind_frozen_view(g);
            let d_fake = disc.forward(g, &bd, x)?;

            let log_fake = g.log_clamped(d_fake)?;
            let mean_lf = g.mean_all(log_fake)?;
            let term = g.scale(mean_lf, -self.pi[k])?;
            loss_g_adv = Some(match loss_g_adv {
                Some(acc) => g.add(acc, term)?,
                None => term,
            });

            let d_scalar = g.mean_axis(d_fake, 1)?;
            score_nodes.push(d_scalar);
            let ratio = g.scale(d_scalar, 1.0 / d_real_ema[k])?;
            let prior_rows: Vec<f64> = (0..hp.batch)
                .flat_map(|_| self.priors[k].iter().copied())
                .collect();
            let prior = g.constant(&Tensor::from_vec(vec![hp.batch, classes], prior_rows)?);
            pi_hat_nodes.push(g.scale_rows(prior, ratio)?);
        }
        let loss_g_adv = loss_g_adv.expect("at least one node");

        let mut denom = pi_hat_nodes[0];
        for &ph in &pi_hat_nodes[1..] {
            denom = g.add(denom, ph)?;
        }
        let mut aggregated: Option<NodeId> = None;
        for (k, &ph) in pi_hat_nodes.iter().enumerate() {
            let pi_k = g.div(ph, denom)?;
            let weighted = g.mul(pi_k, z_nodes[k])?;
            aggregated = Some(match aggregated {
                Some(acc) => g.add(acc, weighted)?,
                None => weighted,
            });
        }
        let aggregated = aggregated.expect("at least one node");

        let bound_student = student.bind(g);
        let s_logits = student.forward(g, &bound_student, x)?;
        let diff = g.sub(s_logits, aggregated)?;
        let sq = g.square(diff)?;
        let per_sample = g.sum_axis(sq, 1)?;
        let l_mimic = g.mean_all(per_sample)?;

        // generator objective: confidence + diversity + adversarial realism,
        // minus the mimic term (hard-to-mimic samples)
        let conf_term = g.scale(l_conf, hp.lambda_conf)?;
        let unique_term = g.scale(l_unique, hp.lambda_unique)?;
        let adv_term = g.scale(loss_g_adv, hp.lambda_gan)?;
        let mimic_term = g.scale(l_mimic, -hp.lambda_mimic)?;
        let partial = g.add(conf_term, unique_term)?;
        let partial = g.add(partial, adv_term)?;
        let g_objective = g.add(partial, mimic_term)?;

        Ok(JointTape {
            bound_gen,
            bound_student,
            x,
            s_logits,
            z_nodes,
            score_nodes,
            l_conf,
            l_unique,
            l_mimic,
            loss_g_adv,
            g_objective,
        })
    }

    /// One full step: every discriminator takes an optimizer step on its own
    /// GAN loss against this step's generated batch, then the generator and
    /// student step simultaneously on losses computed with the updated
    /// discriminators. Teachers are never written to.
    #[allow(clippy::too_many_arguments)]
    pub fn distill_step(
        &mut self,
        generator: &mut Network,
        student: &mut Network,
        teachers: &[Network],
        discriminators: &mut [Network],
        real_batches: &[Tensor],
        rng: &mut ChaCha8Rng,
        hp: &DistillHp,
        dp: &mut DpConfig,
    ) -> Result<DistillOutcome> {
        let nodes = self.pi.len();
        if teachers.len() != nodes || discriminators.len() != nodes || real_batches.len() != nodes {
            return Err(Error::Value("teachers, discriminators and real batches must match node count".into()));
        }
        if let Some(bad) = teachers.iter().position(|t| !t.frozen()) {
            return Err(Error::Value(format!("teacher {bad} is not frozen")));
        }

        let w = sample_noise(&self.noise, hp.batch, rng)?;
        let x_detached = generator.forward_values(&w)?;

        // discriminator updates against the detached fake batch
        let mut l_gan_per_node = Vec::with_capacity(nodes);
        let lr_d = self.lr(hp.lr_discriminator, hp);
        for k in 0..nodes {
            let mut g = Graph::new();
            let bound = discriminators[k].bind(&mut g);
            let real = g.constant(&real_batches[k]);
            let fake = g.constant(&x_detached);
            let (loss_d, d_real) = Self::disc_loss_nodes(&mut g, &discriminators[k], &bound, real, fake)?;

            g.backward(loss_d)?;
            discriminators[k].zero_grads();
            discriminators[k].accumulate_grads(&g, &bound)?;
            discriminators[k].apply_adam(&mut self.disc_states[k], lr_d, hp.beta1, hp.beta2, hp.eps)?;
            l_gan_per_node.push(g.scalar_value(loss_d)?);

            // running mean of real scores, observed before this update
            let mean_real_score =
                g.values(d_real).iter().sum::<f64>() / g.values(d_real).len() as f64;
            self.d_real_ema[k] = if self.d_real_ema[k] == 0.0 {
                mean_real_score
            } else {
                hp.ema_decay * self.d_real_ema[k] + (1.0 - hp.ema_decay) * mean_real_score
            }
            .max(1e-6);
        }

        // joint tape for generator and student losses, updated discriminators
        // and teachers entering as constants
        let mut g = Graph::new();
        let ema = self.d_real_ema.clone();
        let tape = self.joint_loss_tape(&mut g, generator, student, teachers, discriminators, &ema, &w, hp)?;
        let classes = teachers[0].output_dim();

        // With the sanitizer on, nodes release clipped+noised logits and
        // scores; the student's mimic target is rebuilt from those released
        // values only. The generator-side losses keep the tape path, which
        // stands in for node-computed gradients.
        let mut released_logits: Vec<Tensor> = Vec::with_capacity(nodes);
        let mut released_scores: Vec<Tensor> = Vec::with_capacity(nodes);
        let mut s_target = None;
        if dp.enabled {
            for k in 0..nodes {
                let z = sanitize(g.values(tape.z_nodes[k]), dp)?;
                released_logits.push(Tensor::from_vec(vec![hp.batch, classes], z)?);
                let sc = sanitize(g.values(tape.score_nodes[k]), dp)?;
                released_scores.push(Tensor::from_vec(vec![hp.batch], sc)?);
            }
            // released scores may leave (0,1) after noising; the server
            // clamps before computing weights
            let d_scalar: Vec<Vec<f64>> = released_scores
                .iter()
                .map(|t| t.values().iter().map(|v| v.clamp(1e-6, 1.0)).collect())
                .collect();
            let iw = importance_weights_from_parts(&self.priors, &d_scalar, &self.d_real_ema)?;
            s_target = Some(aggregate_logits(&released_logits, &iw)?);
        } else {
            for k in 0..nodes {
                released_logits.push(g.tensor(tape.z_nodes[k]));
                released_scores.push(g.tensor(tape.score_nodes[k]));
            }
        }
        let l_mimic_student = match &s_target {
            Some(target) => {
                let tnode = g.constant(target);
                let d = g.sub(tape.s_logits, tnode)?;
                let sq = g.square(d)?;
                let rows = g.sum_axis(sq, 1)?;
                g.mean_all(rows)?
            }
            None => tape.l_mimic,
        };

        g.backward(tape.g_objective)?;
        generator.zero_grads();
        generator.accumulate_grads(&g, &tape.bound_gen)?;

        g.zero_grad();
        g.backward(l_mimic_student)?;
        student.zero_grads();
        student.accumulate_grads(&g, &tape.bound_student)?;

        let lr_g = self.lr(hp.lr_generator, hp);
        let lr_s = self.lr(hp.lr_student, hp);
        generator.apply_adam(&mut self.generator_state, lr_g, hp.beta1, hp.beta2, hp.eps)?;
        student.apply_adam(&mut self.student_state, lr_s, hp.beta1, hp.beta2, hp.eps)?;

        let losses = LossBundle::new(
            l_gan_per_node,
            g.scalar_value(tape.l_conf)?,
            g.scalar_value(tape.l_unique)?,
            g.scalar_value(l_mimic_student)?,
            self.step,
        )?;
        let payloads = StepPayloads {
            generated: g.tensor(tape.x),
            logits: released_logits,
            disc_scores: released_scores,
        };
        self.step += 1;
        Ok(DistillOutcome { losses, payloads })
    }
}


struct JointTape {
    bound_gen: crate::nets::BoundNet,
    bound_student: crate::nets::BoundNet,
    x: NodeId,
    s_logits: NodeId,
    z_nodes: Vec<NodeId>,
    score_nodes: Vec<NodeId>,
    l_conf: NodeId,
    l_unique: NodeId,
    l_mimic: NodeId,
    loss_g_adv: NodeId,
    g_objective: NodeId,
}

/// Loss values and the analytic parameter gradients one step would use,
/// captured without touching any state; for diagnostics and gradient
/// checking against finite differences.
#[derive(Debug, Clone)]
pub struct LossProbe {
    pub l_gan_per_node: Vec<f64>,
    /// Gradient of each node's GAN loss w.r.t. that discriminator's
    /// flattened parameters.
    pub disc_grads: Vec<Vec<f64>>,
    pub l_conf: f64,
    pub l_unique: f64,
    pub l_mimic: f64,
    pub l_gan_generator: f64,
    pub g_objective: f64,
    pub gen_grad_objective: Vec<f64>,
    pub gen_grad_conf: Vec<f64>,
    pub gen_grad_unique: Vec<f64>,
    pub gen_grad_mimic: Vec<f64>,
    pub gen_grad_gan: Vec<f64>,
    pub student_grad_mimic: Vec<f64>,
}

impl DistillEngine {
    fn flat_grads(g: &Graph, bound: &crate::nets::BoundNet) -> Vec<f64> {
        let mut out = Vec::new();
        for &id in bound.param_ids() {
            out.extend_from_slice(g.grad(id).expect("trainable parameter has a gradient"));
        }
        out
    }

    /// Evaluates every loss and its parameter gradients at the current
    /// parameter values, on a caller-supplied noise batch, with no optimizer
    /// updates and no state mutation.
    #[allow(clippy::too_many_arguments)]
    pub fn probe_losses(
        &self,
        generator: &Network,
        student: &Network,
        teachers: &[Network],
        discriminators: &[Network],
        real_batches: &[Tensor],
        w: &Tensor,
        hp: &DistillHp,
    ) -> Result<LossProbe> {
        let nodes = self.pi.len();
        let x_detached = generator.forward_values(w)?;

        let mut l_gan_per_node = Vec::with_capacity(nodes);
        let mut disc_grads = Vec::with_capacity(nodes);
        let mut ema = self.d_real_ema.clone();
        for k in 0..nodes {
            let mut g = Graph::new();
            let bound = discriminators[k].bind(&mut g);
            let real = g.constant(&real_batches[k]);
            let fake = g.constant(&x_detached);
            let (loss_d, d_real) = Self::disc_loss_nodes(&mut g, &discriminators[k], &bound, real, fake)?;
            g.backward(loss_d)?;
            l_gan_per_node.push(g.scalar_value(loss_d)?);
            disc_grads.push(Self::flat_grads(&g, &bound));
            if ema[k] == 0.0 {
                ema[k] = (g.values(d_real).iter().sum::<f64>() / g.values(d_real).len() as f64).max(1e-6);
            }
        }

        let mut g = Graph::new();
        let tape = self.joint_loss_tape(&mut g, generator, student, teachers, discriminators, &ema, w, hp)?;

        g.backward(tape.g_objective)?;
        let gen_grad_objective = Self::flat_grads(&g, &tape.bound_gen);
        g.zero_grad();
        g.backward(tape.l_conf)?;
        let gen_grad_conf = Self::flat_grads(&g, &tape.bound_gen);
        g.zero_grad();
        g.backward(tape.l_unique)?;
        let gen_grad_unique = Self::flat_grads(&g, &tape.bound_gen);
        g.zero_grad();
        g.backward(tape.l_mimic)?;
        let gen_grad_mimic = Self::flat_grads(&g, &tape.bound_gen);
        let student_grad_mimic = Self::flat_grads(&g, &tape.bound_student);
        g.zero_grad();
        g.backward(tape.loss_g_adv)?;
        let gen_grad_gan = Self::flat_grads(&g, &tape.bound_gen);

        Ok(LossProbe {
            l_gan_per_node,
            disc_grads,
            l_conf: g.scalar_value(tape.l_conf)?,
            l_unique: g.scalar_value(tape.l_unique)?,
            l_mimic: g.scalar_value(tape.l_mimic)?,
            l_gan_generator: g.scalar_value(tape.loss_g_adv)?,
            g_objective: g.scalar_value(tape.g_objective)?,
            gen_grad_objective,
            gen_grad_conf,
            gen_grad_unique,
            gen_grad_mimic,
            gen_grad_gan,
            student_grad_mimic,
        })
    }
}
