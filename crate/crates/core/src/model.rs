//! Shared recurrent body with a policy head and a classifier head.
//!
//! An LSTM reads the sequence one element at a time. At every step its
//! hidden state feeds two single-hidden-layer ReLU networks with softmax
//! outputs: the policy over `{wait, stop}` and the classifier over the
//! `C` classes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Elements, Sample};
use crate::diffcore::{ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Index of the "wait" action in a policy distribution.
pub const WAIT: usize = 0;
/// Index of the "stop and classify" action.
pub const STOP: usize = 1;

/// Rows per tape when tracing many samples at once.
const TRACE_CHUNK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputMode {
    /// Each element is a real vector of `feature_dim` entries.
    Dense { feature_dim: usize },
    /// Each element is a token id below `vocab`. Id `vocab` is the pad token.
    Tokens { vocab: usize, embed_dim: usize },
}

impl InputMode {
    /// Width of the vector the LSTM consumes per step.
    pub fn lstm_input_dim(&self) -> usize {
        match *self {
            InputMode::Dense { feature_dim } => feature_dim,
            InputMode::Tokens { embed_dim, .. } => embed_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input: InputMode,
    pub hidden_dim: usize,
    pub head_hidden_dim: usize,
    pub num_classes: usize,
    pub t_end: usize,
    /// Bias of the policy head's output layer as `(wait, stop)`.
    #[serde(default)]
    pub policy_bias_init: [f64; 2],
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn dense(
        feature_dim: usize,
        hidden_dim: usize,
        head_hidden_dim: usize,
        num_classes: usize,
        t_end: usize,
    ) -> Self {
        ModelConfig {
            input: InputMode::Dense { feature_dim },
            hidden_dim,
            head_hidden_dim,
            num_classes,
            t_end,
            policy_bias_init: [0.0, 0.0],
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims_ok = match self.input {
            InputMode::Dense { feature_dim } => feature_dim > 0,
            InputMode::Tokens { vocab, embed_dim } => vocab > 0 && embed_dim > 0,
        };
        if !dims_ok || self.hidden_dim == 0 || self.head_hidden_dim == 0 || self.t_end == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("a classifier needs at least 2 classes"));
        }
        if self.policy_bias_init.iter().any(|b| !b.is_finite()) {
            return Err(Error::config("policy bias must be finite"));
        }
        Ok(())
    }
}

/// Slot indices of every tensor inside the model's [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub embedding: Option<usize>,
    pub lstm_w: usize,
    pub lstm_u: usize,
    pub lstm_b: usize,
    pub policy_w1: usize,
    pub policy_b1: usize,
    pub policy_w2: usize,
    pub policy_b2: usize,
    pub classifier_w1: usize,
    pub classifier_b1: usize,
    pub classifier_w2: usize,
    pub classifier_b2: usize,
}

impl Layout {
    pub fn for_config(config: &ModelConfig) -> Self {
        let off = matches!(config.input, InputMode::Tokens { .. }) as usize;
        Layout {
            embedding: (off == 1).then_some(0),
            lstm_w: off,
            lstm_u: off + 1,
            lstm_b: off + 2,
            policy_w1: off + 3,
            policy_b1: off + 4,
            policy_w2: off + 5,
            policy_b2: off + 6,
            classifier_w1: off + 7,
            classifier_b1: off + 8,
            classifier_w2: off + 9,
            classifier_b2: off + 10,
        }
    }

    pub fn policy_slots(&self) -> [usize; 4] {
        [
            self.policy_w1,
            self.policy_b1,
            self.policy_w2,
            self.policy_b2,
        ]
    }

    pub fn classifier_slots(&self) -> [usize; 4] {
        [
            self.classifier_w1,
            self.classifier_b1,
            self.classifier_w2,
            self.classifier_b2,
        ]
    }

    pub fn body_slots(&self) -> Vec<usize> {
        self.embedding
            .into_iter()
            .chain([self.lstm_w, self.lstm_u, self.lstm_b])
            .collect()
    }
}

/// All learnable weights of one model together with its configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: ParamSet,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (rows as f64).sqrt();
    let values = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::raw(vec![rows, cols], values)
}

/// Deterministic initialization from `config.seed`.
///
/// Weight matrices are uniform in `±1/sqrt(fan_in)`, biases are zero except
/// the policy output bias, which is set to `config.policy_bias_init`.
pub fn init_model(config: &ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (h, hh, c) = (
        config.hidden_dim,
        config.head_hidden_dim,
        config.num_classes,
    );
    let d = config.input.lstm_input_dim();
    let mut p = ParamSet::new();
    if let InputMode::Tokens { vocab, embed_dim } = config.input {
        // one extra row for the pad token
        p.push("embedding", uniform(&mut rng, vocab + 1, embed_dim));
    }
    p.push("lstm.w", uniform(&mut rng, d, 4 * h));
    p.push("lstm.u", uniform(&mut rng, h, 4 * h));
    p.push("lstm.b", Tensor::zeros(1, 4 * h));
    p.push("policy.w1", uniform(&mut rng, h, hh));
    p.push("policy.b1", Tensor::zeros(1, hh));
    p.push("policy.w2", uniform(&mut rng, hh, 2));
    p.push(
        "policy.b2",
        Tensor::raw(vec![1, 2], config.policy_bias_init.to_vec()),
    );
    p.push("classifier.w1", uniform(&mut rng, h, hh));
    p.push("classifier.b1", Tensor::zeros(1, hh));
    p.push("classifier.w2", uniform(&mut rng, hh, c));
    p.push("classifier.b2", Tensor::zeros(1, c));
    Ok(ModelParams {
        config: config.clone(),
        tensors: p,
    })
}

impl ModelParams {
    pub fn layout(&self) -> Layout {
        Layout::for_config(&self.config)
    }

    /// Checks that every tensor has the shape the configuration implies.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let reference = init_model(&ModelConfig {
            seed: 0,
            ..self.config.clone()
        })?;
        if reference.tensors.len() != self.tensors.len() {
            return Err(Error::config(
                "parameter count does not match the model configuration",
            ));
        }
        for ((rn, rt), (n, t)) in reference.tensors.iter().zip(self.tensors.iter()) {
            if rn != n || rt.shape() != t.shape() {
                return Err(Error::config(format!(
                    "parameter {n} {:?} does not match expected {rn} {:?}",
                    t.shape(),
                    rt.shape()
                )));
            }
        }
        Ok(())
    }

    /// Prediction trace of one sample.
    pub fn forward_trace(&self, sample: &Sample) -> Result<PredictionTrace> {
        Ok(self.trace_batch(std::slice::from_ref(sample))?.remove(0))
    }

    /// Prediction traces for many samples, evaluated in row chunks.
    pub fn trace_batch(&self, samples: &[Sample]) -> Result<Vec<PredictionTrace>> {
        let refs: Vec<&Sample> = samples.iter().collect();
        self.trace_refs(&refs)
    }

    pub fn trace_refs(&self, samples: &[&Sample]) -> Result<Vec<PredictionTrace>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(TRACE_CHUNK) {
            let mut tape = Tape::new();
            let model = BoundModel::bind(&mut tape, self);
            let trace = model.forward(&mut tape, chunk)?;
            out.extend(trace.extract(&tape));
        }
        Ok(out)
    }
}

/// Model parameters recorded on a tape.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub config: ModelConfig,
    pub layout: Layout,
    pub vars: Vec<Var>,
}

/// Per-step head outputs for a batch: `yhat[t]` is `[B, C]`, `pi[t]` is `[B, 2]`.
#[derive(Debug, Clone)]
pub struct BatchTrace {
    pub yhat: Vec<Var>,
    pub pi: Vec<Var>,
    pub batch: usize,
}

impl BatchTrace {
    pub fn t_end(&self) -> usize {
        self.yhat.len()
    }

    /// Copies the head outputs off the tape, one trace per batch row.
    pub fn extract(&self, tape: &Tape) -> Vec<PredictionTrace> {
        let mut traces: Vec<PredictionTrace> = (0..self.batch)
            .map(|_| PredictionTrace {
                yhat: Vec::with_capacity(self.t_end()),
                pi: Vec::with_capacity(self.t_end()),
            })
            .collect();
        for (y, p) in self.yhat.iter().zip(&self.pi) {
            let (yv, pv) = (tape.value(*y), tape.value(*p));
            for (b, trace) in traces.iter_mut().enumerate() {
                trace.yhat.push(yv.row(b).to_vec());
                let pr = pv.row(b);
                trace.pi.push([pr[WAIT], pr[STOP]]);
            }
        }
        traces
    }
}

impl BoundModel {
    pub fn bind(tape: &mut Tape, params: &ModelParams) -> Self {
        BoundModel {
            config: params.config.clone(),
            layout: params.layout(),
            vars: tape.bind(&params.tensors),
        }
    }

    fn v(&self, slot: usize) -> Var {
        self.vars[slot]
    }

    /// One LSTM step. `x` is `[B, d]`, `h` and `c` are `[B, hidden]`.
    ///
    /// Gate columns are ordered input, forget, cell candidate, output.
    pub fn lstm_step(&self, tape: &mut Tape, h: Var, c: Var, x: Var) -> Result<(Var, Var)> {
        let hd = self.config.hidden_dim;
        let xw = tape.matmul(x, self.v(self.layout.lstm_w))?;
        let hu = tape.matmul(h, self.v(self.layout.lstm_u))?;
        let pre = tape.add(xw, hu)?;
        let gates = tape.add_row(pre, self.v(self.layout.lstm_b))?;
        let i = tape.slice_cols(gates, 0, hd)?;
        let i = tape.sigmoid(i)?;
        let f = tape.slice_cols(gates, hd, 2 * hd)?;
        let f = tape.sigmoid(f)?;
        let g = tape.slice_cols(gates, 2 * hd, 3 * hd)?;
        let g = tape.tanh(g)?;
        let o = tape.slice_cols(gates, 3 * hd, 4 * hd)?;
        let o = tape.sigmoid(o)?;
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, g)?;
        let c_next = tape.add(keep, write)?;
        let squashed = tape.tanh(c_next)?;
        let h_next = tape.mul(o, squashed)?;
        Ok((h_next, c_next))
    }

    fn head(&self, tape: &mut Tape, h: Var, slots: [usize; 4]) -> Result<Var> {
        let z = tape.matmul(h, self.v(slots[0]))?;
        let z = tape.add_row(z, self.v(slots[1]))?;
        let z = tape.relu(z)?;
        let z = tape.matmul(z, self.v(slots[2]))?;
        let z = tape.add_row(z, self.v(slots[3]))?;
        tape.softmax_rows(z)
    }

    pub fn policy_head(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        self.head(tape, h, self.layout.policy_slots())
    }

    pub fn classifier_head(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        self.head(tape, h, self.layout.classifier_slots())
    }

    /// Records the LSTM input for step `t` (0-based) of every sample.
    fn step_input(&self, tape: &mut Tape, batch: &[&Sample], t: usize) -> Result<Var> {
        match self.config.input {
            InputMode::Dense { feature_dim } => {
                let mut values = Vec::with_capacity(batch.len() * feature_dim);
                for s in batch {
                    match &s.elements {
                        Elements::Dense(rows) => values.extend_from_slice(&rows[t]),
                        Elements::Tokens(_) => unreachable!("validated"),
                    }
                }
                Ok(tape.constant(Tensor::raw(vec![batch.len(), feature_dim], values)))
            }
            InputMode::Tokens { .. } => {
                let ids = batch
                    .iter()
                    .map(|s| match &s.elements {
                        Elements::Tokens(ids) => ids[t],
                        Elements::Dense(_) => unreachable!("validated"),
                    })
                    .collect();
                let table = self.v(self.layout.embedding.expect("token mode has an embedding"));
                tape.gather_rows(table, ids)
            }
        }
    }

    fn check_sample(&self, s: &Sample) -> Result<()> {
        let t_end = self.config.t_end;
        if s.len() != t_end {
            return Err(Error::invalid(format!(
                "sample has {} elements but the model expects T_end = {t_end}",
                s.len()
            )));
        }
        if s.label >= self.config.num_classes {
            return Err(Error::invalid(format!("label {} out of range", s.label)));
        }
        match (&s.elements, self.config.input) {
            (Elements::Dense(rows), InputMode::Dense { feature_dim }) => {
                if rows.iter().any(|r| r.len() != feature_dim) {
                    return Err(Error::invalid(format!(
                        "dense elements must have {feature_dim} features"
                    )));
                }
            }
            (Elements::Tokens(ids), InputMode::Tokens { vocab, .. }) => {
                if ids.iter().any(|&id| id > vocab) {
                    return Err(Error::invalid(format!("token id above pad id {vocab}")));
                }
            }
            _ => {
                return Err(Error::invalid(
                    "sample element kind does not match the model input mode",
                ))
            }
        }
        Ok(())
    }

    /// Runs the recurrence over a batch once, evaluating both heads at
    /// every step.
    pub fn forward(&self, tape: &mut Tape, batch: &[&Sample]) -> Result<BatchTrace> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        for s in batch {
            self.check_sample(s)?;
        }
        let b = batch.len();
        let mut h = tape.constant(Tensor::zeros(b, self.config.hidden_dim));
        let mut c = tape.constant(Tensor::zeros(b, self.config.hidden_dim));
        let mut trace = BatchTrace {
            yhat: Vec::with_capacity(self.config.t_end),
            pi: Vec::with_capacity(self.config.t_end),
            batch: b,
        };
        for t in 0..self.config.t_end {
            let x = self.step_input(tape, batch, t)?;
            (h, c) = self.lstm_step(tape, h, c, x)?;
            trace.yhat.push(self.classifier_head(tape, h)?);
            trace.pi.push(self.policy_head(tape, h)?);
        }
        Ok(trace)
    }
}

/// Head outputs of one sample at every step `t = 1..=T_end` (stored 0-based).
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTrace {
    pub yhat: Vec<Vec<f64>>,
    /// `[wait, stop]` probabilities.
    pub pi: Vec<[f64; 2]>,
}

impl PredictionTrace {
    pub fn t_end(&self) -> usize {
        self.yhat.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.yhat.is_empty() || self.yhat.len() != self.pi.len() {
            return Err(Error::invalid(
                "trace heads must be non-empty and equally long",
            ));
        }
        let is_dist = |row: &[f64]| {
            row.iter().all(|&p| p.is_finite() && p >= 0.0)
                && (row.iter().sum::<f64>() - 1.0).abs() <= 1e-9
        };
        if !self.yhat.iter().all(|r| is_dist(r)) || !self.pi.iter().all(|r| is_dist(r)) {
            return Err(Error::invalid(
                "trace rows must be probability distributions",
            ));
        }
        Ok(())
    }

    /// Cross-entropy of the classifier against `label` at every step.
    pub fn cross_entropies(&self, label: usize) -> Vec<f64> {
        self.yhat
            .iter()
            .map(|row| -row[label].max(crate::diffcore::LOG_CLAMP).ln())
            .collect()
    }
}
