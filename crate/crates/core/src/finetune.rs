//! Toy-scale fine-tuning: a linear classification head on the sentence-token
//! state, trained together with the encoder by plain or momentum SGD.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::contribution::{similarity_profile, ContributionError};
use crate::encoder::{
    batch_examples, EncoderError, EncoderModel, EncoderWeights, Example, Scalar, TokenBatch,
};
use crate::strategies::{select_by_threshold, DropPlan, PlanError, Strategy};
use crate::surgery::{apply_plan, SurgeryError};
use crate::tensorstore::Checkpoint;
use crate::topology::{infer_topology, NamingScheme, TopologyError};

#[derive(Debug, thiserror::Error)]
pub enum FinetuneError {
    #[error("non-finite loss at step {step} (learning rate {learning_rate})")]
    NonFiniteLoss { step: usize, learning_rate: f64 },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("gradual dropping of {layers} layers needs at least {needed} epochs, got {epochs}")]
    TooFewEpochs {
        layers: usize,
        needed: usize,
        epochs: usize,
    },
    #[error("strategy comparison needs at least two seeds")]
    TooFewSeeds,
    #[error("model and task are incompatible: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Surgery(#[from] SurgeryError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Contribution(#[from] ContributionError),
}

pub type Result<T> = std::result::Result<T, FinetuneError>;

/// Linear head over the sentence-token state. `weight` is `classes × d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead<T> {
    pub num_classes: usize,
    pub d_model: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ClassifierHead<T> {
    pub fn random(d_model: usize, num_classes: usize, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, 1.0 / (d_model as f64).sqrt()).unwrap();
        Self {
            num_classes,
            d_model,
            weight: (0..num_classes * d_model)
                .map(|_| T::of(dist.sample(rng)))
                .collect(),
            bias: vec![T::zero(); num_classes],
        }
    }

    pub fn logits(&self, h: &[T]) -> Vec<T> {
        (0..self.num_classes)
            .map(|c| {
                let row = &self.weight[c * self.d_model..(c + 1) * self.d_model];
                row.iter().zip(h).fold(self.bias[c], |acc, (&w, &x)| acc + w * x)
            })
            .collect()
    }

    pub fn predict(&self, h: &[T]) -> usize {
        argmax(&self.logits(h))
    }
}

fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Cross-entropy of one example and its gradient with respect to the logits
/// (softmax minus one-hot).
pub fn loss_and_logit_grad<T: Scalar>(logits: &[T], label: usize) -> (T, Vec<T>) {
    let p = crate::encoder::softmax(logits);
    let loss = -p[label].ln();
    let grad = p
        .iter()
        .enumerate()
        .map(|(c, &pc)| if c == label { pc - T::one() } else { pc })
        .collect();
    (loss, grad)
}

/// Encoder plus classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<T> {
    pub encoder: EncoderModel<T>,
    pub head: ClassifierHead<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierGrads<T> {
    pub encoder: EncoderWeights<T>,
    pub head_weight: Vec<T>,
    pub head_bias: Vec<T>,
}

impl<T: Scalar> ClassifierGrads<T> {
    fn slices(&self) -> Vec<&[T]> {
        let mut out = self.encoder.slices();
        out.push(&self.head_weight);
        out.push(&self.head_bias);
        out
    }
}

impl<T: Scalar> Classifier<T> {
    pub fn new(encoder: EncoderModel<T>, num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = ClassifierHead::random(encoder.config.d_model, num_classes, &mut rng);
        Self { encoder, head }
    }

    /// Every parameter with its checkpoint name, encoder first, then head.
    pub fn named_params(&self, scheme: &NamingScheme) -> Vec<(String, Vec<usize>, &[T])> {
        let mut out = self.encoder.weights.named(&self.encoder.config, scheme);
        out.push((
            "classifier.weight".into(),
            vec![self.head.num_classes, self.head.d_model],
            &self.head.weight,
        ));
        out.push((
            "classifier.bias".into(),
            vec![self.head.num_classes],
            &self.head.bias,
        ));
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = self.encoder.weights.slices_mut();
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn num_params(&self) -> usize {
        self.encoder.weights.num_params() + self.head.weight.len() + self.head.bias.len()
    }

    pub fn to_checkpoint(&self, scheme: &NamingScheme) -> Checkpoint {
        let mut c = Checkpoint::new();
        for (name, shape, values) in self.named_params(scheme) {
            T::insert(&mut c, name, shape, values).expect("parameter names are unique");
        }
        c
    }

    /// Mean cross-entropy over a labelled batch.
    pub fn loss(&self, batch: &TokenBatch) -> Result<T> {
        Ok(self.loss_and_grads(batch, false)?.0)
    }

    /// Mean cross-entropy and its exact gradient with respect to every parameter.
    pub fn loss_and_grads(
        &self,
        batch: &TokenBatch,
        want_grads: bool,
    ) -> Result<(T, Option<ClassifierGrads<T>>, usize)> {
        batch.validate(&self.encoder.config)?;
        let labels = batch
            .labels
            .as_ref()
            .ok_or_else(|| FinetuneError::InvalidTask("batch has no labels".into()))?;
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.head.num_classes) {
            return Err(FinetuneError::Incompatible(format!(
                "label {bad} but the head has {} classes",
                self.head.num_classes
            )));
        }
        let d = self.encoder.config.d_model;
        let cls = self.encoder.config.cls_index;
        let scale = T::one() / T::from_usize(batch.len()).unwrap();
        let mut grads = want_grads.then(|| ClassifierGrads {
            encoder: self.encoder.weights.zeros_like(),
            head_weight: vec![T::zero(); self.head.weight.len()],
            head_bias: vec![T::zero(); self.head.bias.len()],
        });
        let mut total = T::zero();
        let mut correct = 0;
        let none = BTreeSet::new();
        for ((tokens, mask), &label) in batch.token_ids.iter().zip(&batch.mask).zip(labels) {
            let trace = self.encoder.trace_example(tokens, mask, &none, None);
            let h = trace.cls_row(d, cls);
            let logits = self.head.logits(h);
            if argmax(&logits) == label {
                correct += 1;
            }
            let (loss, dlogits) = loss_and_logit_grad(&logits, label);
            total = total + loss;
            if let Some(g) = grads.as_mut() {
                let mut d_out = vec![T::zero(); trace.output.len()];
                for (c, &dl) in dlogits.iter().enumerate() {
                    let dl = dl * scale;
                    g.head_bias[c] = g.head_bias[c] + dl;
                    let row = &self.head.weight[c * d..(c + 1) * d];
                    for j in 0..d {
                        g.head_weight[c * d + j] = g.head_weight[c * d + j] + dl * h[j];
                        d_out[cls * d + j] = d_out[cls * d + j] + dl * row[j];
                    }
                }
                self.encoder.backward(&trace, &d_out, &mut g.encoder);
            }
        }
        Ok((total * scale, grads, correct))
    }

    /// (mean loss, accuracy) over labelled examples.
    pub fn evaluate(&self, examples: &[Example]) -> Result<(f64, f64)> {
        if examples.is_empty() {
            return Err(FinetuneError::InvalidTask("no examples to evaluate".into()));
        }
        let mut loss = 0.0;
        let mut correct = 0;
        for batch in batch_examples(examples, 64)? {
            let (l, _, c) = self.loss_and_grads(&batch, false)?;
            loss += l.as_f64() * batch.len() as f64;
            correct += c;
        }
        let n = examples.len() as f64;
        Ok((loss / n, correct as f64 / n))
    }

    /// Same parameters in double precision.
    pub fn widen(&self) -> Classifier<f64> {
        let scheme = NamingScheme::bert();
        let enc = self.encoder.to_checkpoint(&scheme);
        let mut encoder = EncoderModel::<f64>::load(&enc, &self.encoder.config, &scheme)
            .expect("round trip of own checkpoint");
        for (i, bypassed) in self.encoder.bypassed_layers().into_iter().enumerate() {
            if bypassed {
                encoder.bypass_layer(i);
            }
        }
        Classifier {
            encoder,
            head: ClassifierHead {
                num_classes: self.head.num_classes,
                d_model: self.head.d_model,
                weight: self.head.weight.iter().map(|v| v.as_f64()).collect(),
                bias: self.head.bias.iter().map(|v| v.as_f64()).collect(),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Optimizer {
    Sgd,
    SgdMomentum { momentum: f64 },
}

fn default_epochs() -> usize {
    3
}

fn default_lr() -> f64 {
    0.01
}

fn default_batch() -> usize {
    16
}

fn default_optimizer() -> Optimizer {
    Optimizer::SgdMomentum { momentum: 0.9 }
}

/// Training hyperparameters. The defaults are toy-scale choices, not values
/// taken from any published setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_optimizer")]
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            learning_rate: default_lr(),
            batch_size: default_batch(),
            seed: 0,
            optimizer: default_optimizer(),
        }
    }
}

impl TrainConfig {
    /// A zero learning rate is accepted and leaves every parameter unchanged.
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(FinetuneError::InvalidConfig("epochs must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(FinetuneError::InvalidConfig(
                "learning rate must be finite and non-negative".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(FinetuneError::InvalidConfig("batch size must be positive".into()));
        }
        if let Optimizer::SgdMomentum { momentum } = self.optimizer {
            if !(0.0..1.0).contains(&momentum) {
                return Err(FinetuneError::InvalidConfig("momentum must lie in [0, 1)".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum TaskRule {
    /// Label is the token at `position` modulo the class count.
    TokenAt { position: usize },
    /// Label is the sum of all non-CLS tokens modulo the class count.
    SumModulo,
}

/// Generator for a labelled synthetic classification task. Every sequence
/// starts with the sentence token 0; other tokens are drawn from 1..vocab.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTask {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub num_classes: usize,
    pub rule: TaskRule,
    pub train_size: usize,
    pub dev_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticTask {
    pub fn label(&self, tokens: &[u32]) -> usize {
        match self.rule {
            TaskRule::TokenAt { position } => tokens[position] as usize % self.num_classes,
            TaskRule::SumModulo => tokens[1..].iter().map(|&t| t as usize).sum::<usize>() % self.num_classes,
        }
    }

    /// Disjoint (train, dev) example sets.
    pub fn generate(&self) -> Result<(Vec<Example>, Vec<Example>)> {
        if self.num_classes < 2 {
            return Err(FinetuneError::InvalidTask("need at least two classes".into()));
        }
        if self.vocab_size < 2 || self.seq_len < 2 {
            return Err(FinetuneError::InvalidTask(
                "vocabulary and sequence length must be at least 2".into(),
            ));
        }
        if let TaskRule::TokenAt { position } = self.rule {
            if position == 0 || position >= self.seq_len {
                return Err(FinetuneError::InvalidTask(format!(
                    "label position {position} must lie in 1..{}",
                    self.seq_len
                )));
            }
        }
        let needed = self.train_size + self.dev_size;
        let space = ((self.vocab_size - 1) as f64).powi(self.seq_len as i32 - 1);
        if (needed as f64) > space / 2.0 {
            return Err(FinetuneError::InvalidTask(format!(
                "{needed} distinct sequences requested from a space of {space}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut seen = HashSet::new();
        let mut all = Vec::with_capacity(needed);
        while all.len() < needed {
            let mut tokens = vec![0u32];
            tokens.extend((1..self.seq_len).map(|_| rng.gen_range(1..self.vocab_size as u32)));
            if seen.insert(tokens.clone()) {
                let label = Some(self.label(&tokens));
                all.push(Example { tokens, label });
            }
        }
        let dev = all.split_off(self.train_size);
        Ok((all, dev))
    }
}

/// Task plus training settings, as stored in a task spec file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task: SyntheticTask,
    #[serde(default)]
    pub train: TrainConfig,
}

impl TaskSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| FinetuneError::InvalidTask(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| FinetuneError::InvalidTask(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: String,
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub step: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    /// Accuracy on the training batches as they were seen during the epoch.
    pub accuracy: f64,
    pub dev_accuracy: f64,
    pub layers: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub initial_dev_accuracy: f64,
    pub final_dev_accuracy: f64,
    pub final_layers: usize,
    /// Epochs after which a layer was removed, with the original 1-based index.
    pub drops: Vec<(usize, usize)>,
}

impl Metrics {
    /// Line-delimited JSON: one record per step and epoch, then a summary.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            let mut v = serde_json::to_value(s).unwrap();
            v["kind"] = "step".into();
            out.push_str(&v.to_string());
            out.push('\n');
        }
        for e in &self.epochs {
            let mut v = serde_json::to_value(e).unwrap();
            v["kind"] = "epoch".into();
            out.push_str(&v.to_string());
            out.push('\n');
        }
        let summary = serde_json::json!({
            "kind": "summary",
            "initial_dev_accuracy": self.initial_dev_accuracy,
            "final_dev_accuracy": self.final_dev_accuracy,
            "final_layers": self.final_layers,
            "drops": self.drops,
            "steps": self.steps.len(),
        });
        out.push_str(&summary.to_string());
        out.push('\n');
        out
    }

    pub fn loss_curve(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }
}

/// Stateful SGD loop. One RNG drives every shuffle, so a run is a pure
/// function of its inputs.
struct Trainer<'a, T> {
    model: Classifier<T>,
    cfg: &'a TrainConfig,
    train: &'a [Example],
    dev: &'a [Example],
    rng: ChaCha8Rng,
    velocity: Option<Vec<Vec<T>>>,
    step: usize,
    epoch: usize,
    /// Original 1-based index of each current encoder layer.
    original_layers: Vec<usize>,
    scheme: NamingScheme,
    metrics: Metrics,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    fn new(
        model: Classifier<T>,
        cfg: &'a TrainConfig,
        train: &'a [Example],
        dev: &'a [Example],
    ) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() || dev.is_empty() {
            return Err(FinetuneError::InvalidTask(
                "train and dev sets must be non-empty".into(),
            ));
        }
        let layers = model.encoder.num_layers();
        let mut trainer = Self {
            model,
            cfg,
            train,
            dev,
            // distinct stream from the head initializer, which also uses cfg.seed
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5348_5546_464c_4531),
            velocity: None,
            step: 0,
            epoch: 0,
            original_layers: (1..=layers).collect(),
            scheme: NamingScheme::bert(),
            metrics: Metrics::default(),
        };
        trainer.metrics.initial_dev_accuracy = trainer.model.evaluate(dev)?.1;
        trainer.metrics.final_dev_accuracy = trainer.metrics.initial_dev_accuracy;
        trainer.metrics.final_layers = layers;
        Ok(trainer)
    }

    fn run_epoch(&mut self, stage: &str) -> Result<()> {
        self.epoch += 1;
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.rng);
        let lr = T::of(self.cfg.learning_rate);
        let (mut loss_sum, mut seen, mut correct) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(self.cfg.batch_size) {
            let examples: Vec<Example> = chunk.iter().map(|&i| self.train[i].clone()).collect();
            let batch = batch_examples(&examples, examples.len())?.remove(0);
            let (loss, grads, c) = self.model.loss_and_grads(&batch, true)?;
            self.step += 1;
            let loss = loss.as_f64();
            if !loss.is_finite() {
                return Err(FinetuneError::NonFiniteLoss {
                    step: self.step,
                    learning_rate: self.cfg.learning_rate,
                });
            }
            self.apply_update(&grads.expect("gradients requested"), lr);
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
            correct += c;
            self.metrics.steps.push(StepRecord {
                stage: stage.to_string(),
                epoch: self.epoch,
                step: self.step,
                loss,
            });
        }
        let dev_accuracy = self.model.evaluate(self.dev)?.1;
        self.metrics.final_dev_accuracy = dev_accuracy;
        self.metrics.epochs.push(EpochRecord {
            stage: stage.to_string(),
            epoch: self.epoch,
            step: self.step,
            loss: loss_sum / seen as f64,
            accuracy: correct as f64 / seen as f64,
            dev_accuracy,
            layers: self.model.encoder.num_layers(),
        });
        Ok(())
    }

    fn apply_update(&mut self, grads: &ClassifierGrads<T>, lr: T) {
        let grads = grads.slices();
        match self.cfg.optimizer {
            Optimizer::Sgd => {
                for (p, g) in self.model.slices_mut().into_iter().zip(grads) {
                    for (p, &g) in p.iter_mut().zip(g) {
                        *p = *p - lr * g;
                    }
                }
            }
            Optimizer::SgdMomentum { momentum } => {
                let mu = T::of(momentum);
                let velocity = self
                    .velocity
                    .get_or_insert_with(|| grads.iter().map(|g| vec![T::zero(); g.len()]).collect());
                for ((p, g), v) in self
                    .model
                    .slices_mut()
                    .into_iter()
                    .zip(grads)
                    .zip(velocity.iter_mut())
                {
                    for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                        *v = mu * *v + g;
                        *p = *p - lr * *v;
                    }
                }
            }
        }
    }

    /// Remove layers by checkpoint surgery. `plan` is relative to the current
    /// encoder. Optimizer state is reset because the parameter set changed.
    fn drop_layers(&mut self, plan: &DropPlan) -> Result<()> {
        if plan.dropped.is_empty() {
            return Ok(());
        }
        let enc = &self.model.encoder;
        let ckpt = enc.to_checkpoint(&self.scheme);
        let topo = infer_topology(&ckpt, &self.scheme)?;
        let pruned = apply_plan(&ckpt, &topo, plan)?;
        let cfg = enc.config.with_layers(plan.layers_after());
        self.model.encoder = EncoderModel::load(&pruned, &cfg, &self.scheme)?;
        self.original_layers = plan.kept.iter().map(|&i| self.original_layers[i - 1]).collect();
        self.velocity = None;
        self.metrics.final_layers = plan.layers_after();
        Ok(())
    }

    fn finish(self) -> (Classifier<T>, Metrics) {
        (self.model, self.metrics)
    }
}

fn check_compatible<T: Scalar>(m: &EncoderModel<T>, task: &SyntheticTask) -> Result<()> {
    if task.vocab_size > m.config.vocab_size {
        return Err(FinetuneError::Incompatible(format!(
            "task vocabulary {} exceeds model vocabulary {}",
            task.vocab_size, m.config.vocab_size
        )));
    }
    if task.seq_len > m.config.max_positions {
        return Err(FinetuneError::Incompatible(format!(
            "task sequence length {} exceeds model positions {}",
            task.seq_len, m.config.max_positions
        )));
    }
    if m.config.cls_index != 0 {
        return Err(FinetuneError::Incompatible(
            "synthetic tasks place the sentence token at position 0".into(),
        ));
    }
    Ok(())
}

fn start<'a, T: Scalar>(
    m: EncoderModel<T>,
    task: &SyntheticTask,
    cfg: &'a TrainConfig,
    train: &'a [Example],
    dev: &'a [Example],
) -> Result<Trainer<'a, T>> {
    check_compatible(&m, task)?;
    let model = Classifier::new(m, task.num_classes, cfg.seed);
    Trainer::new(model, cfg, train, dev)
}

/// Attach a fresh head and fine-tune encoder and head for `cfg.epochs`.
pub fn finetune<T: Scalar>(
    m: EncoderModel<T>,
    task: &SyntheticTask,
    cfg: &TrainConfig,
) -> Result<(Classifier<T>, Metrics)> {
    let (train, dev) = task.generate()?;
    let mut trainer = start(m, task, cfg, &train, &dev)?;
    for _ in 0..cfg.epochs {
        trainer.run_epoch("finetune")?;
    }
    Ok(trainer.finish())
}

/// Fine-tune, drop the plan's layers from the trained model, then fine-tune
/// again for `cfg.epochs`. With an empty plan this is one uninterrupted run of
/// twice the epochs.
pub fn drop_after_finetune<T: Scalar>(
    m: EncoderModel<T>,
    task: &SyntheticTask,
    plan: &DropPlan,
    cfg: &TrainConfig,
) -> Result<(Classifier<T>, Metrics)> {
    if plan.num_layers != m.num_layers() {
        return Err(SurgeryError::LayerCountMismatch {
            plan: plan.num_layers,
            topology: m.num_layers(),
        }
        .into());
    }
    let (train, dev) = task.generate()?;
    let mut trainer = start(m, task, cfg, &train, &dev)?;
    for _ in 0..cfg.epochs {
        trainer.run_epoch("before-drop")?;
    }
    trainer.drop_layers(plan)?;
    if !plan.dropped.is_empty() {
        let epoch = trainer.epoch;
        trainer
            .metrics
            .drops
            .extend(plan.dropped.iter().map(|&i| (epoch, i)));
    }
    for _ in 0..cfg.epochs {
        trainer.run_epoch("after-drop")?;
    }
    Ok(trainer.finish())
}

/// Fine-tune while removing the plan's layers one at a time, highest index
/// first, after every second epoch.
pub fn gradual_drop_finetune<T: Scalar>(
    m: EncoderModel<T>,
    task: &SyntheticTask,
    plan: &DropPlan,
    cfg: &TrainConfig,
) -> Result<(Classifier<T>, Metrics)> {
    if plan.num_layers != m.num_layers() {
        return Err(SurgeryError::LayerCountMismatch {
            plan: plan.num_layers,
            topology: m.num_layers(),
        }
        .into());
    }
    if plan.kept.is_empty() {
        return Err(SurgeryError::EmptyEncoder.into());
    }
    let needed = 2 * plan.k();
    if cfg.epochs < needed {
        return Err(FinetuneError::TooFewEpochs {
            layers: plan.k(),
            needed,
            epochs: cfg.epochs,
        });
    }
    let (train, dev) = task.generate()?;
    let mut trainer = start(m, task, cfg, &train, &dev)?;
    let mut pending: Vec<usize> = plan.dropped.iter().copied().collect();
    for epoch in 1..=cfg.epochs {
        trainer.run_epoch("gradual")?;
        if epoch % 2 == 0 {
            if let Some(original) = pending.pop() {
                let pos = trainer
                    .original_layers
                    .iter()
                    .position(|&o| o == original)
                    .expect("pending layers are still present");
                let step = DropPlan::new(Strategy::Custom, trainer.original_layers.len(), [pos + 1])?;
                trainer.drop_layers(&step)?;
                trainer.metrics.drops.push((epoch, original));
            }
        }
    }
    Ok(trainer.finish())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_parameter: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Denominator floor of the relative error. Some gradients are exactly zero
/// (key biases cancel inside the softmax), and for those the finite
/// difference is pure rounding noise; below the floor the comparison is
/// effectively absolute.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

/// Central-difference step used by the acceptance checks.
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Compare reverse-mode gradients with central finite differences on every
/// parameter. Differences are taken on a double-precision copy of the model
/// with step `h`, so single-precision models are checked against the same
/// function evaluated without single-precision noise.
pub fn gradient_check<T: Scalar>(
    model: &Classifier<T>,
    batch: &TokenBatch,
    h: f64,
) -> Result<GradCheckReport> {
    let (_, grads, _) = model.loss_and_grads(batch, true)?;
    let grads = grads.expect("gradients requested");
    let analytic: Vec<Vec<f64>> = grads
        .slices()
        .into_iter()
        .map(|s| s.iter().map(|v| v.as_f64()).collect())
        .collect();

    let scheme = NamingScheme::bert();
    let names: Vec<String> = model
        .named_params(&scheme)
        .into_iter()
        .map(|(n, _, _)| n)
        .collect();
    let mut probe = model.widen();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_parameter: String::new(),
        worst_index: 0,
        checked: 0,
    };
    for (p, name) in names.iter().enumerate() {
        let len = analytic[p].len();
        for i in 0..len {
            let orig = probe.slices_mut()[p][i];
            probe.slices_mut()[p][i] = orig + h;
            let plus = probe.loss(batch)?;
            probe.slices_mut()[p][i] = orig - h;
            let minus = probe.loss(batch)?;
            probe.slices_mut()[p][i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[p][i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            report.checked += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst_parameter = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

/// How a compared plan is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum StrategyChoice {
    Positional {
        strategy: Strategy,
    },
    /// Contribution-based selection; the profile is computed on the task's
    /// training examples and K is ignored.
    Threshold {
        tau: f64,
    },
}

impl StrategyChoice {
    pub fn label(&self) -> String {
        match self {
            StrategyChoice::Positional { strategy } => strategy.name().to_string(),
            StrategyChoice::Threshold { tau } => format!("contribution@{tau}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyRow {
    pub strategy: String,
    pub dropped: Vec<usize>,
    pub dev_accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator).
    pub std: f64,
}

pub fn mean_and_sample_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Prune `m` under each strategy and fine-tune once per seed; the seed is
/// the training seed (head initialization and shuffling).
pub fn compare_strategies<T: Scalar>(
    m: &EncoderModel<T>,
    task: &SyntheticTask,
    k: usize,
    strategies: &[StrategyChoice],
    seeds: &[u64],
    cfg: &TrainConfig,
) -> Result<Vec<StrategyRow>> {
    if seeds.len() < 2 {
        return Err(FinetuneError::TooFewSeeds);
    }
    let layers = m.num_layers();
    let scheme = NamingScheme::bert();
    let ckpt = m.to_checkpoint(&scheme);
    let topo = infer_topology(&ckpt, &scheme)?;
    let (train, _) = task.generate()?;
    let mut rows = Vec::with_capacity(strategies.len());
    for choice in strategies {
        let plan = match *choice {
            StrategyChoice::Positional { strategy } => {
                if k == 0 {
                    DropPlan::identity(layers)
                } else {
                    strategy.plan(layers, k)?
                }
            }
            StrategyChoice::Threshold { tau } => {
                let batches = batch_examples(&train, 64)?;
                let profile = similarity_profile(m, &batches)?;
                select_by_threshold(&profile, tau)?
            }
        };
        let pruned = apply_plan(&ckpt, &topo, &plan)?;
        let model = EncoderModel::<T>::load(&pruned, &m.config.with_layers(plan.layers_after()), &scheme)?;
        let mut accs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let run_cfg = TrainConfig { seed, ..cfg.clone() };
            let (_, metrics) = finetune(model.clone(), task, &run_cfg)?;
            accs.push(metrics.final_dev_accuracy);
        }
        let (mean, std) = mean_and_sample_std(&accs);
        rows.push(StrategyRow {
            strategy: choice.label(),
            dropped: plan.dropped_vec(),
            dev_accuracies: accs,
            mean,
            std,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::strategies::plan_top;

    fn cfg(layers: usize) -> EncoderConfig {
        EncoderConfig {
            num_layers: layers,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 10,
            max_positions: 6,
            ln_epsilon: 1e-12,
            cls_index: 0,
        }
    }

    fn task() -> SyntheticTask {
        SyntheticTask {
            vocab_size: 10,
            seq_len: 4,
            num_classes: 2,
            rule: TaskRule::TokenAt { position: 1 },
            train_size: 48,
            dev_size: 16,
            seed: 3,
        }
    }

    fn train_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            learning_rate: 0.05,
            batch_size: 8,
            seed: 1,
            optimizer: Optimizer::SgdMomentum { momentum: 0.9 },
        }
    }

    #[test]
    fn equal_logits_give_softmax_minus_onehot() {
        let (loss, grad) = loss_and_logit_grad(&[0.7f64; 4], 2);
        assert!((loss - 4f64.ln()).abs() < 1e-15);
        assert_eq!(grad, vec![0.25, 0.25, -0.75, 0.25]);
        // a batch with every class once has zero mean gradient on the logits
        let total: Vec<f64> = (0..4)
            .map(|l| loss_and_logit_grad(&[0.7f64; 4], l).1)
            .fold(vec![0.0; 4], |acc, g| {
                acc.iter().zip(g).map(|(a, b)| a + b).collect()
            });
        assert!(total.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn synthetic_task_is_disjoint_and_deterministic() {
        let t = task();
        let (train, dev) = t.generate().unwrap();
        assert_eq!(train.len(), 48);
        assert_eq!(dev.len(), 16);
        let train_set: HashSet<_> = train.iter().map(|e| e.tokens.clone()).collect();
        assert!(dev.iter().all(|e| !train_set.contains(&e.tokens)));
        assert!(train.iter().all(|e| e.label == Some(e.tokens[1] as usize % 2)));
        assert_eq!(t.generate().unwrap(), (train, dev));
        let bad = SyntheticTask {
            rule: TaskRule::TokenAt { position: 4 },
            ..task()
        };
        assert!(bad.generate().is_err());
        let crowded = SyntheticTask {
            train_size: 5000,
            ..task()
        };
        assert!(crowded.generate().is_err());
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let m = EncoderModel::<f64>::random(&cfg(2), 4).unwrap();
        let tc = TrainConfig {
            learning_rate: 0.0,
            ..train_cfg(2)
        };
        let (trained, metrics) = finetune(m.clone(), &task(), &tc).unwrap();
        assert_eq!(trained.encoder, m);
        let untrained = Classifier::new(m, 2, tc.seed);
        assert_eq!(trained.head, untrained.head);
        assert_eq!(metrics.final_dev_accuracy, metrics.initial_dev_accuracy);
    }

    #[test]
    fn runs_are_bitwise_reproducible() {
        let m = EncoderModel::<f32>::random(&cfg(2), 4).unwrap();
        let (_, a) = finetune(m.clone(), &task(), &train_cfg(2)).unwrap();
        let (_, b) = finetune(m, &task(), &train_cfg(2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.steps.len(), 12);
        assert_eq!(a.epochs.len(), 2);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let m = EncoderModel::<f32>::random(&cfg(2), 4).unwrap();
        for bad in [
            TrainConfig {
                epochs: 0,
                ..train_cfg(1)
            },
            TrainConfig {
                learning_rate: -1.0,
                ..train_cfg(1)
            },
            TrainConfig {
                batch_size: 0,
                ..train_cfg(1)
            },
        ] {
            assert!(matches!(
                finetune(m.clone(), &task(), &bad),
                Err(FinetuneError::InvalidConfig(_))
            ));
        }
    }

    #[test]
    fn divergence_is_reported() {
        let m = EncoderModel::<f32>::random(&cfg(2), 4).unwrap();
        let tc = TrainConfig {
            learning_rate: 1e30,
            ..train_cfg(2)
        };
        match finetune(m, &task(), &tc) {
            Err(FinetuneError::NonFiniteLoss { step, learning_rate }) => {
                assert!(step >= 1);
                assert_eq!(learning_rate, 1e30);
            }
            other => panic!("expected divergence, got {:?}", other.map(|r| r.1)),
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let m = EncoderModel::<f64>::random(&cfg(2), 7).unwrap();
        let c = Classifier::new(m, 3, 2);
        let batch = TokenBatch::from_sequences(&[vec![0, 4, 2, 9], vec![0, 1, 3]])
            .unwrap()
            .with_labels(vec![2, 0])
            .unwrap();
        let r = gradient_check(&c, &batch, 1e-5).unwrap();
        assert_eq!(r.checked, c.num_params());
        assert!(r.max_relative_error < 1e-6, "{r:?}");
    }

    #[test]
    fn drop_after_finetune_with_empty_plan_is_longer_training() {
        let m = EncoderModel::<f32>::random(&cfg(3), 4).unwrap();
        let (_, staged) =
            drop_after_finetune(m.clone(), &task(), &DropPlan::identity(3), &train_cfg(2)).unwrap();
        let (_, plain) = finetune(m, &task(), &train_cfg(4)).unwrap();
        assert_eq!(staged.loss_curve(), plain.loss_curve());
        assert_eq!(staged.final_dev_accuracy, plain.final_dev_accuracy);
    }

    #[test]
    fn drop_after_finetune_prunes_trained_model() {
        let m = EncoderModel::<f32>::random(&cfg(4), 4).unwrap();
        let plan = plan_top(4, 1).unwrap();
        let (trained, metrics) = drop_after_finetune(m.clone(), &task(), &plan, &train_cfg(1)).unwrap();
        assert_eq!(trained.encoder.num_layers(), 3);
        assert_eq!(metrics.final_layers, 3);
        assert_eq!(metrics.epochs.last().unwrap().layers, 3);
        let again = drop_after_finetune(m, &task(), &plan, &train_cfg(1)).unwrap().1;
        assert_eq!(metrics, again);
        let ckpt = trained.to_checkpoint(&NamingScheme::bert());
        assert!(!ckpt.names().any(|n| n.starts_with("encoder.layer.3.")));
    }

    #[test]
    fn gradual_schedule() {
        let m = EncoderModel::<f32>::random(&cfg(4), 4).unwrap();
        let plan = DropPlan::new(Strategy::Custom, 4, [2, 3]).unwrap();
        let (trained, metrics) = gradual_drop_finetune(m.clone(), &task(), &plan, &train_cfg(6)).unwrap();
        assert_eq!(metrics.drops, vec![(2, 3), (4, 2)]);
        let layers: Vec<usize> = metrics.epochs.iter().map(|e| e.layers).collect();
        // records are written before the drop that follows an epoch
        assert_eq!(layers, vec![4, 4, 3, 3, 2, 2]);
        assert_eq!(trained.encoder.num_layers(), 2);

        let one = plan_top(4, 1).unwrap();
        assert!(matches!(
            gradual_drop_finetune(m.clone(), &task(), &one, &train_cfg(1)),
            Err(FinetuneError::TooFewEpochs { .. })
        ));
        let (_, plain) = finetune(m.clone(), &task(), &train_cfg(2)).unwrap();
        let (_, empty) = gradual_drop_finetune(m, &task(), &DropPlan::identity(4), &train_cfg(2)).unwrap();
        assert_eq!(plain.loss_curve(), empty.loss_curve());
    }

    #[test]
    fn gradual_keeps_surviving_weights() {
        // the layers left after gradual dropping are the original 1 and 4
        let m = EncoderModel::<f64>::random(&cfg(4), 4).unwrap();
        let plan = DropPlan::new(Strategy::Custom, 4, [2, 3]).unwrap();
        let tc = TrainConfig {
            learning_rate: 0.0,
            ..train_cfg(4)
        };
        let (trained, _) = gradual_drop_finetune(m.clone(), &task(), &plan, &tc).unwrap();
        assert_eq!(trained.encoder.weights.layers[0], m.weights.layers[0]);
        assert_eq!(trained.encoder.weights.layers[1], m.weights.layers[3]);
    }

    #[test]
    fn comparison_table_shape() {
        let m = EncoderModel::<f32>::random(&cfg(4), 4).unwrap();
        let strategies = [
            StrategyChoice::Positional {
                strategy: Strategy::Top,
            },
            StrategyChoice::Positional {
                strategy: Strategy::Bottom,
            },
            StrategyChoice::Positional {
                strategy: Strategy::EvenAlternate,
            },
        ];
        let rows = compare_strategies(&m, &task(), 0, &strategies, &[1, 2], &train_cfg(1)).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.dev_accuracies == rows[0].dev_accuracies));
        assert!(matches!(
            compare_strategies(&m, &task(), 1, &strategies, &[1], &train_cfg(1)),
            Err(FinetuneError::TooFewSeeds)
        ));
        let rows = compare_strategies(&m, &task(), 1, &strategies[..2], &[1, 2], &train_cfg(1)).unwrap();
        assert_eq!(rows[0].dropped, vec![4]);
        assert_eq!(rows[1].dropped, vec![1]);
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_and_sample_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - 1.290_994_448_735_805_6).abs() < 1e-12);
    }

    #[test]
    fn metrics_json_lines() {
        let m = EncoderModel::<f32>::random(&cfg(2), 4).unwrap();
        let (_, metrics) = finetune(m, &task(), &train_cfg(1)).unwrap();
        let text = metrics.to_json_lines();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 6 + 1 + 1);
        assert_eq!(lines.last().unwrap()["kind"], "summary");
        assert!(lines[0]["loss"].is_number());
    }
}
