//! Node/server orchestration over a simulated in-process channel: the
//! two-stage generate-and-distill protocol, the parameter-averaging and
//! standalone/centralized baselines, and byte-exact communication
//! accounting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{local_weight, Dataset, PartitionSpec};
use crate::distill::{DistillEngine, DistillHp, LossBundle};
use crate::error::{Error, Result};
use crate::nets::{build, Activation, Network, Role};
use crate::privacy::DpConfig;
use crate::tensor::{AdamState, Graph, Tensor};

pub const BYTES_PER_ELEMENT: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    Server,
    Node(usize),
}

impl std::fmt::Display for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Endpoint::Server => write!(f, "server"),
            Endpoint::Node(k) => write!(f, "node{k}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    ModelParams,
    Logits,
    DiscScores,
    LabelCounts,
    GeneratedBatch,
    Gradient,
}

impl PayloadKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PayloadKind::ModelParams => "model_params",
            PayloadKind::Logits => "logits",
            PayloadKind::DiscScores => "disc_scores",
            PayloadKind::LabelCounts => "label_counts",
            PayloadKind::GeneratedBatch => "generated_batch",
            PayloadKind::Gradient => "gradient",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommRecord {
    pub sender: Endpoint,
    pub receiver: Endpoint,
    pub payload: PayloadKind,
    pub bytes: u64,
    pub round: u64,
    pub sanitized: bool,
}

/// Append-only record of every simulated message; fp64 accounting, 8 bytes
/// per element.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CommLedger {
    records: Vec<CommRecord>,
}

impl CommLedger {
    pub fn log(
        &mut self,
        sender: Endpoint,
        receiver: Endpoint,
        payload: PayloadKind,
        elements: u64,
        round: u64,
        sanitized: bool,
    ) {
        self.records.push(CommRecord {
            sender,
            receiver,
            payload,
            bytes: BYTES_PER_ELEMENT * elements,
            round,
            sanitized,
        });
    }

    pub fn records(&self) -> &[CommRecord] {
        &self.records
    }

    pub fn total_bytes(&self, kind: PayloadKind) -> u64 {
        self.records.iter().filter(|r| r.payload == kind).map(|r| r.bytes).sum()
    }

    pub fn total_bytes_all(&self) -> u64 {
        self.records.iter().map(|r| r.bytes).sum()
    }

    pub fn sanitized_count(&self) -> u64 {
        self.records.iter().filter(|r| r.sanitized).count() as u64
    }

    /// Byte totals per payload kind, in a stable order.
    pub fn totals_by_kind(&self) -> Vec<(PayloadKind, u64)> {
        let kinds = [
            PayloadKind::ModelParams,
            PayloadKind::Logits,
            PayloadKind::DiscScores,
            PayloadKind::LabelCounts,
            PayloadKind::GeneratedBatch,
            PayloadKind::Gradient,
        ];
        kinds.into_iter().map(|k| (k, self.total_bytes(k))).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("sender,receiver,payload_kind,bytes,round,sanitized\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.sender,
                r.receiver,
                r.payload.as_str(),
                r.bytes,
                r.round,
                r.sanitized
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    LocalTraining,
    Distillation,
    Done,
}

/// One participant: its shard (an index view into the shared dataset), its
/// task model, its discriminator, and its private rng stream.
pub struct LocalNode {
    pub id: usize,
    pub shard: Vec<usize>,
    pub teacher: Network,
    pub discriminator: Network,
    pub label_counts: Vec<usize>,
    pub rng: ChaCha8Rng,
}

impl LocalNode {
    /// Draws `batch` sample indices from the shard with replacement.
    fn sample_batch(&mut self, batch: usize) -> Vec<usize> {
        (0..batch).map(|_| self.shard[self.rng.random_range(0..self.shard.len())]).collect()
    }
}

/// Architectures and seed for constructing a federation.
#[derive(Debug, Clone)]
pub struct FedSetup {
    /// One full layer-size list per node.
    pub teacher_archs: Vec<Vec<usize>>,
    pub student_arch: Vec<usize>,
    pub generator_arch: Vec<usize>,
    pub disc_arch: Vec<usize>,
    pub activation: Activation,
    pub noise_dim: usize,
    pub seed: u64,
}

/// Server plus nodes plus the channel between them.
pub struct FederationState {
    pub nodes: Vec<LocalNode>,
    pub generator: Network,
    pub student: Network,
    pub ledger: CommLedger,
    pub round: u64,
    pub phase: Phase,
    pub train: Dataset,
    pub test: Dataset,
    pub partition: PartitionSpec,
}

/// Hyperparameters for local task-model training.
#[derive(Debug, Clone)]
pub struct LocalHp {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for LocalHp {
    fn default() -> Self {
        Self { epochs: 100, batch: 32, lr: 5e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalTrainLog {
    pub node: usize,
    pub epochs: usize,
    pub final_train_accuracy: f64,
}

/// Accuracy checkpoints over a run; x is the step/round/epoch index.
pub type AccuracySeries = Vec<(u64, f64)>;

#[derive(Debug, Clone)]
pub struct FediodRun {
    pub accuracy: AccuracySeries,
    pub losses: Vec<LossBundle>,
    pub final_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct FedavgRun {
    pub accuracy: AccuracySeries,
    pub final_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct StandaloneRun {
    pub per_node: Vec<LocalTrainLog>,
    pub test_accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl FederationState {
    pub fn build(train: Dataset, test: Dataset, partition: PartitionSpec, setup: &FedSetup) -> Result<Self> {
        let nodes_n = partition.nodes();
        if setup.teacher_archs.len() != nodes_n {
            return Err(Error::Value(format!(
                "{} teacher architectures for {nodes_n} nodes",
                setup.teacher_archs.len()
            )));
        }
        let mut nodes = Vec::with_capacity(nodes_n);
        for k in 0..nodes_n {
            nodes.push(LocalNode {
                id: k,
                shard: partition.node_indices[k].clone(),
                teacher: build(Role::Teacher, &setup.teacher_archs[k], setup.activation, setup.seed.wrapping_add(1000 + k as u64))?,
                discriminator: build(Role::Discriminator, &setup.disc_arch, setup.activation, setup.seed.wrapping_add(2000 + k as u64))?,
                label_counts: partition.label_histogram[k].clone(),
                rng: ChaCha8Rng::seed_from_u64(setup.seed.wrapping_add(3000 + k as u64)),
            });
        }
        Ok(Self {
            nodes,
            generator: build(Role::Generator, &setup.generator_arch, setup.activation, setup.seed.wrapping_add(500))?,
            student: build(Role::Student, &setup.student_arch, setup.activation, setup.seed.wrapping_add(600))?,
            ledger: CommLedger::default(),
            round: 0,
            phase: Phase::LocalTraining,
            train,
            test,
            partition,
        })
    }

    /// Stage one: every node trains its task model on its own shard, then
    /// freezes it. Nothing crosses the channel.
    pub fn run_local_training(&mut self, hp: &LocalHp) -> Result<Vec<LocalTrainLog>> {
        if self.phase != Phase::LocalTraining {
            return Err(Error::Value(format!("local training already completed (phase {:?})", self.phase)));
        }
        let mut logs = Vec::with_capacity(self.nodes.len());
        for node in &mut self.nodes {
            logs.push(local_train(node, &self.train, hp)?);
        }
        self.phase = Phase::Distillation;
        Ok(logs)
    }

    /// Stage two: the generate-and-distill loop. Per step the server
    /// broadcasts a generated batch to every node and each node returns its
    /// teacher logits and discriminator scores; label counts cross once at
    /// the start. Model parameters never cross the channel.
    pub fn run_fediod(
        &mut self,
        distill_steps: u64,
        hp: &DistillHp,
        eval_interval: u64,
        dp: &mut DpConfig,
    ) -> Result<FediodRun> {
        if self.phase != Phase::Distillation {
            return Err(Error::Value(format!(
                "distillation requires completed local training (phase {:?})",
                self.phase
            )));
        }
        if let Some(bad) = self.nodes.iter().position(|n| !n.teacher.frozen()) {
            return Err(Error::Value(format!("teacher at node {bad} is not frozen")));
        }
        let classes = self.train.classes;
        let d = self.train.dim();

        let noise_dim = self.generator.input_dim();
        let mut engine = DistillEngine::new(&self.partition, noise_dim)?;
        let mut server_rng = ChaCha8Rng::seed_from_u64(self.partition.seed.wrapping_add(0xfed));

        for node in &self.nodes {
            self.ledger.log(
                Endpoint::Node(node.id),
                Endpoint::Server,
                PayloadKind::LabelCounts,
                classes as u64,
                0,
                false,
            );
        }

        let mut accuracy = Vec::new();
        let mut losses = Vec::with_capacity(distill_steps as usize);
        let mut teachers: Vec<Network> = Vec::with_capacity(self.nodes.len());
        let mut discs: Vec<Network> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            teachers.push(node.teacher.clone());
            discs.push(node.discriminator.clone());
        }

        for step in 0..distill_steps {
            let mut real_batches = Vec::with_capacity(self.nodes.len());
            for node in &mut self.nodes {
                let idx = node.sample_batch(hp.batch);
                real_batches.push(self.train.gather(&idx)?);
            }

            let outcome = engine.distill_step(
                &mut self.generator,
                &mut self.student,
                &teachers,
                &mut discs,
                &real_batches,
                &mut server_rng,
                hp,
                dp,
            )?;

            for node in &self.nodes {
                self.ledger.log(
                    Endpoint::Server,
                    Endpoint::Node(node.id),
                    PayloadKind::GeneratedBatch,
                    (hp.batch * d) as u64,
                    step,
                    false,
                );
                self.ledger.log(
                    Endpoint::Node(node.id),
                    Endpoint::Server,
                    PayloadKind::Logits,
                    (hp.batch * classes) as u64,
                    step,
                    dp.enabled,
                );
                self.ledger.log(
                    Endpoint::Node(node.id),
                    Endpoint::Server,
                    PayloadKind::DiscScores,
                    hp.batch as u64,
                    step,
                    dp.enabled,
                );
            }
            losses.push(outcome.losses);

            if (step + 1) % eval_interval == 0 || step + 1 == distill_steps {
                accuracy.push((step + 1, evaluate(&self.student, &self.test)?));
            }
            self.round = step + 1;
        }

        // write trained discriminators back to their nodes
        for (node, disc) in self.nodes.iter_mut().zip(discs) {
            node.discriminator = disc;
        }
        self.phase = Phase::Done;
        let final_accuracy = accuracy.last().map(|&(_, a)| a).unwrap_or(0.0);
        Ok(FediodRun { accuracy, losses, final_accuracy })
    }

    /// Parameter-averaging baseline: per round the server broadcasts its
    /// task-model parameters, nodes run local SGD epochs, upload their
    /// parameters, and the server takes the data-size-weighted average.
    /// Requires one shared architecture across every node.
    pub fn run_fedavg(&mut self, rounds: u64, local_epochs: usize, batch: usize, lr: f64) -> Result<FedavgRun> {
        let arch = self.student.arch();
        for node in &self.nodes {
            if node.teacher.arch() != arch {
                return Err(Error::Value(format!(
                    "parameter averaging requires identical architectures; node {} has {:?} but the server has {:?}",
                    node.id,
                    node.teacher.arch(),
                    arch
                )));
            }
        }
        let param_count = self.student.param_count() as u64;
        let classes = self.train.classes;
        let weights: Vec<f64> = (0..self.nodes.len()).map(|k| local_weight(&self.partition, k)).collect();

        let mut accuracy = Vec::new();
        for round in 0..rounds {
            let mut locals: Vec<Network> = Vec::with_capacity(self.nodes.len());
            for node in &mut self.nodes {
                self.ledger.log(
                    Endpoint::Server,
                    Endpoint::Node(node.id),
                    PayloadKind::ModelParams,
                    param_count,
                    round,
                    false,
                );
                let mut model = self.student.clone();
                for _ in 0..local_epochs {
                    sgd_epoch(&mut model, &self.train, &node.shard, batch, lr, classes, &mut node.rng)?;
                }
                self.ledger.log(
                    Endpoint::Node(node.id),
                    Endpoint::Server,
                    PayloadKind::ModelParams,
                    param_count,
                    round,
                    false,
                );
                locals.push(model);
            }

            // weighted parameter average
            for p in self.student.params_mut() {
                p.values_mut().iter_mut().for_each(|v| *v = 0.0);
            }
            for (model, &w) in locals.iter().zip(&weights) {
                let mut server_params = self.student.params_mut();
                for (sp, lp) in server_params.iter_mut().zip(model.params()) {
                    for (sv, lv) in sp.values_mut().iter_mut().zip(lp.values()) {
                        *sv += w * lv;
                    }
                }
            }
            accuracy.push((round + 1, evaluate(&self.student, &self.test)?));
            self.round = round + 1;
        }
        self.phase = Phase::Done;
        let final_accuracy = accuracy.last().map(|&(_, a)| a).unwrap_or(0.0);
        Ok(FedavgRun { accuracy, final_accuracy })
    }

    /// Baseline: each node trains alone on its shard and is evaluated on the
    /// global test set. Nothing crosses the channel.
    pub fn run_standalone(&mut self, hp: &LocalHp) -> Result<StandaloneRun> {
        let mut per_node = Vec::with_capacity(self.nodes.len());
        let mut test_accuracies = Vec::with_capacity(self.nodes.len());
        for node in &mut self.nodes {
            per_node.push(local_train(node, &self.train, hp)?);
            test_accuracies.push(evaluate(&node.teacher, &self.test)?);
        }
        let n = test_accuracies.len() as f64;
        let mean = test_accuracies.iter().sum::<f64>() / n;
        let var = test_accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        self.phase = Phase::Done;
        Ok(StandaloneRun { per_node, test_accuracies, mean, std: var.sqrt() })
    }
}

/// Cross-entropy on one batch: `-mean log softmax(z)[label]`.
fn cross_entropy_node(
    g: &mut Graph,
    net: &Network,
    bound: &crate::nets::BoundNet,
    x: crate::tensor::NodeId,
    labels: &[usize],
    classes: usize,
) -> Result<crate::tensor::NodeId> {
    let z = net.forward(g, bound, x)?;
    let q = g.softmax_tau(z, 1.0)?;
    let lq = g.log_clamped(q)?;
    let mut mask = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        mask[i * classes + l] = 1.0;
    }
    let mask = g.constant(&Tensor::from_vec(vec![labels.len(), classes], mask)?);
    let picked = g.mul(lq, mask)?;
    let row = g.sum_axis(picked, 1)?;
    let mean = g.mean_all(row)?;
    g.neg(mean)
}

/// Trains a node's task model by cross-entropy on its shard with Adam, then
/// freezes it. No communication.
pub fn local_train(node: &mut LocalNode, ds: &Dataset, hp: &LocalHp) -> Result<LocalTrainLog> {
    if node.shard.is_empty() {
        return Err(Error::Value(format!("node {} has an empty shard", node.id)));
    }
    if node.teacher.frozen() {
        return Err(Error::Value(format!("node {} teacher is already frozen", node.id)));
    }
    let classes = ds.classes;
    let mut state = AdamState::new();
    let mut shard = node.shard.clone();
    for _ in 0..hp.epochs {
        use rand::seq::SliceRandom;
        shard.shuffle(&mut node.rng);
        for chunk in shard.chunks(hp.batch.max(1)) {
            let x = ds.gather(chunk)?;
            let labels = ds.labels_at(chunk);
            let mut g = Graph::new();
            let bound = node.teacher.bind(&mut g);
            let xn = g.constant(&x);
            let loss = cross_entropy_node(&mut g, &node.teacher, &bound, xn, &labels, classes)?;
            g.backward(loss)?;
            node.teacher.zero_grads();
            node.teacher.accumulate_grads(&g, &bound)?;
            node.teacher.apply_adam(&mut state, hp.lr, hp.beta1, hp.beta2, hp.eps)?;
        }
    }
    let train_x = ds.gather(&node.shard)?;
    let train_labels = ds.labels_at(&node.shard);
    let final_train_accuracy = accuracy_on(&node.teacher, &train_x, &train_labels)?;
    node.teacher.freeze();
    Ok(LocalTrainLog { node: node.id, epochs: hp.epochs, final_train_accuracy })
}

/// One shuffled pass of plain SGD minimizing cross-entropy over a shard.
fn sgd_epoch(
    model: &mut Network,
    ds: &Dataset,
    shard: &[usize],
    batch: usize,
    lr: f64,
    classes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if shard.is_empty() {
        return Err(Error::Value("cannot train on an empty shard".into()));
    }
    let mut order = shard.to_vec();
    if batch < shard.len() {
        use rand::seq::SliceRandom;
        order.shuffle(rng);
    }
    for chunk in order.chunks(batch.max(1)) {
        let x = ds.gather(chunk)?;
        let labels = ds.labels_at(chunk);
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let xn = g.constant(&x);
        let loss = cross_entropy_node(&mut g, model, &bound, xn, &labels, classes)?;
        g.backward(loss)?;
        model.zero_grads();
        model.accumulate_grads(&g, &bound)?;
        model.apply_sgd(lr)?;
    }
    Ok(())
}

fn accuracy_on(model: &Network, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let logits = model.forward_values(x)?;
    let classes = logits.shape()[1];
    let mut correct = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits.values()[i * classes..(i + 1) * classes];
        let mut best = 0;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// Fraction of argmax-correct predictions on a test set; argmax ties break
/// toward the lowest class index.
pub fn evaluate(model: &Network, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Value("cannot evaluate on an empty test set".into()));
    }
    let all: Vec<usize> = (0..test.len()).collect();
    let x = test.gather(&all)?;
    accuracy_on(model, &x, &test.labels)
}

/// Upper-bound baseline: one model trained on the pooled training set.
pub fn run_centralized(
    train: &Dataset,
    test: &Dataset,
    arch: &[usize],
    activation: Activation,
    hp: &LocalHp,
    eval_interval: usize,
    seed: u64,
) -> Result<(AccuracySeries, f64, Network)> {
    let mut model = build(Role::Student, arch, activation, seed.wrapping_add(600))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0xce47));
    let mut state = AdamState::new();
    let all: Vec<usize> = (0..train.len()).collect();
    let classes = train.classes;
    let mut series = Vec::new();
    for epoch in 0..hp.epochs {
        use rand::seq::SliceRandom;
        let mut order = all.clone();
        order.shuffle(&mut rng);
        for chunk in order.chunks(hp.batch.max(1)) {
            let x = train.gather(chunk)?;
            let labels = train.labels_at(chunk);
            let mut g = Graph::new();
            let bound = model.bind(&mut g);
            let xn = g.constant(&x);
            let loss = cross_entropy_node(&mut g, &model, &bound, xn, &labels, classes)?;
            g.backward(loss)?;
            model.zero_grads();
            model.accumulate_grads(&g, &bound)?;
            model.apply_adam(&mut state, hp.lr, hp.beta1, hp.beta2, hp.eps)?;
        }
        if (epoch + 1) % eval_interval.max(1) == 0 || epoch + 1 == hp.epochs {
            series.push(((epoch + 1) as u64, evaluate(&model, test)?));
        }
    }
    let final_accuracy = series.last().map(|&(_, a)| a).unwrap_or(0.0);
    Ok((series, final_accuracy, model))
}

/// Closed-form ledger prediction for a full distillation run.
pub fn expected_fediod_bytes(nodes: u64, batch: u64, d: u64, classes: u64, steps: u64) -> u64 {
    let per_step = nodes * BYTES_PER_ELEMENT * (batch * (d + classes + 1));
    steps * per_step + nodes * BYTES_PER_ELEMENT * classes
}

/// Closed-form ledger prediction for a parameter-averaging run.
pub fn expected_fedavg_bytes(nodes: u64, param_count: u64, rounds: u64) -> u64 {
    rounds * 2 * nodes * BYTES_PER_ELEMENT * param_count
}
