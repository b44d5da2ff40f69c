//! Mini-batch training for [`MlpModel`].

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Activation, MlpModel, OutputKind};
use crate::error::{Error, Result};
use crate::matrix::RowMatrix;

/// Loss attached to the model's output kind.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    SquaredError,
    /// Pinball losses at `lo` and `hi` for a two-output quantile pair.
    Pinball { lo: f64, hi: f64 },
    CrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimizerKind {
    pub fn adam_default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::SquaredError,
            epochs: 100,
            batch_size: 128,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::adam_default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self, model: &MlpModel, targets: &RowMatrix) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be > 0".into()));
        }
        match self.loss {
            LossKind::SquaredError => {
                if targets.cols() != model.output_dim() {
                    return Err(Error::DimensionMismatch(format!(
                        "targets have {} columns, model outputs {}",
                        targets.cols(),
                        model.output_dim()
                    )));
                }
            }
            LossKind::Pinball { lo, hi } => {
                if !(0.0 < lo && lo < hi && hi < 1.0) {
                    return Err(Error::InvalidConfig(format!(
                        "pinball levels must satisfy 0 < lo < hi < 1, got ({lo}, {hi})"
                    )));
                }
                if targets.cols() != 1 || model.output_dim() != 2 {
                    return Err(Error::DimensionMismatch(
                        "pinball loss needs scalar targets and a two-output model".into(),
                    ));
                }
            }
            LossKind::CrossEntropy => {
                let classes = match model.output_kind() {
                    OutputKind::Logits { classes } => classes,
                    _ => {
                        return Err(Error::InvalidConfig(
                            "cross-entropy needs a logits model".into(),
                        ))
                    }
                };
                if targets.cols() != 1 {
                    return Err(Error::DimensionMismatch(
                        "cross-entropy needs a single label column".into(),
                    ));
                }
                for i in 0..targets.rows() {
                    let raw = targets.get(i, 0);
                    if raw.fract() != 0.0 || raw < 0.0 || (raw as usize) >= classes {
                        return Err(Error::LabelOutOfRange {
                            label: raw as usize,
                            classes,
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

struct Scratch {
    pres: Vec<Vec<f64>>,
    posts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
    grad_w: Vec<Vec<f64>>,
    grad_b: Vec<Vec<f64>>,
}

impl Scratch {
    fn new(model: &MlpModel) -> Self {
        Self {
            pres: model.layers.iter().map(|l| vec![0.0; l.out_dim]).collect(),
            posts: model.layers.iter().map(|l| vec![0.0; l.out_dim]).collect(),
            delta: Vec::new(),
            delta_prev: Vec::new(),
            grad_w: model
                .layers
                .iter()
                .map(|l| vec![0.0; l.weights.len()])
                .collect(),
            grad_b: model.layers.iter().map(|l| vec![0.0; l.out_dim]).collect(),
        }
    }

    fn zero_grads(&mut self) {
        for g in &mut self.grad_w {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        for g in &mut self.grad_b {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

struct AdamState {
    m_w: Vec<Vec<f64>>,
    v_w: Vec<Vec<f64>>,
    m_b: Vec<Vec<f64>>,
    v_b: Vec<Vec<f64>>,
    t: u64,
}

/// Train a copy of `model` on `(features, targets)` and return it.
///
/// Deterministic given `config.seed`: the per-epoch shuffle and nothing else
/// consumes randomness. `epochs = 0` returns the input model unchanged.
pub fn train(
    model: &MlpModel,
    features: &RowMatrix,
    targets: &RowMatrix,
    config: &TrainConfig,
) -> Result<MlpModel> {
    if features.rows() == 0 {
        return Err(Error::Empty("training fold".into()));
    }
    if features.rows() != targets.rows() {
        return Err(Error::DimensionMismatch(format!(
            "{} feature rows vs {} target rows",
            features.rows(),
            targets.rows()
        )));
    }
    if features.cols() != model.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "features have {} columns, model expects {}",
            features.cols(),
            model.input_dim()
        )));
    }
    config.validate(model, targets)?;

    let mut trained = model.clone();
    if config.epochs == 0 {
        return Ok(trained);
    }

    let n = features.rows();
    let mut scratch = Scratch::new(&trained);
    let mut adam = match config.optimizer {
        OptimizerKind::Adam { .. } => Some(AdamState {
            m_w: trained
                .layers
                .iter()
                .map(|l| vec![0.0; l.weights.len()])
                .collect(),
            v_w: trained
                .layers
                .iter()
                .map(|l| vec![0.0; l.weights.len()])
                .collect(),
            m_b: trained.layers.iter().map(|l| vec![0.0; l.out_dim]).collect(),
            v_b: trained.layers.iter().map(|l| vec![0.0; l.out_dim]).collect(),
            t: 0,
        }),
        OptimizerKind::Sgd => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            scratch.zero_grads();
            for &i in batch {
                epoch_loss += backprop_sample(
                    &trained,
                    features.row(i),
                    targets.row(i),
                    config.loss,
                    &mut scratch,
                );
            }
            let scale = 1.0 / batch.len() as f64;
            apply_step(&mut trained, &scratch, config, adam.as_mut(), scale);
        }
        if !epoch_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
    }
    Ok(trained)
}

/// Forward + backward for one sample; accumulates gradients, returns the loss.
fn backprop_sample(
    model: &MlpModel,
    x: &[f64],
    target: &[f64],
    loss: LossKind,
    s: &mut Scratch,
) -> f64 {
    let Scratch {
        pres,
        posts,
        delta,
        delta_prev,
        grad_w,
        grad_b,
    } = s;

    // Forward, keeping pre- and post-activations per layer.
    for (l, layer) in model.layers.iter().enumerate() {
        let (earlier, rest) = posts.split_at_mut(l);
        let input: &[f64] = if l == 0 { x } else { &earlier[l - 1] };
        let pre = &mut pres[l];
        let post = &mut rest[0];
        for o in 0..layer.out_dim {
            let z = layer.bias[o] + crate::matrix::dot(layer.weight_row(o), input);
            pre[o] = z;
            post[o] = layer.activation.apply(z);
        }
    }
    let prediction: &[f64] = posts.last().unwrap();

    // Loss and dL/d(prediction).
    delta.clear();
    let loss_value = match loss {
        LossKind::SquaredError => {
            let mut acc = 0.0;
            for (p, y) in prediction.iter().zip(target) {
                let r = p - y;
                acc += r * r;
                delta.push(2.0 * r);
            }
            acc
        }
        LossKind::Pinball { lo, hi } => {
            let y = target[0];
            let mut acc = 0.0;
            for (&q, &tau) in prediction.iter().zip(&[lo, hi]) {
                let u = y - q;
                acc += if u >= 0.0 { tau * u } else { (tau - 1.0) * u };
                delta.push(if u > 0.0 { -tau } else { 1.0 - tau });
            }
            acc
        }
        LossKind::CrossEntropy => {
            let label = target[0] as usize;
            let max = prediction.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max
                + prediction
                    .iter()
                    .map(|z| (z - max).exp())
                    .sum::<f64>()
                    .ln();
            for (k, &z) in prediction.iter().enumerate() {
                let p = (z - lse).exp();
                delta.push(p - if k == label { 1.0 } else { 0.0 });
            }
            lse - prediction[label]
        }
    };

    // Backward sweep. The final layer is identity, so delta already matches
    // its pre-activation gradient; earlier layers apply their own masks.
    for l in (0..model.layers.len()).rev() {
        let layer = &model.layers[l];
        if layer.activation == Activation::Relu {
            for (d, &z) in delta.iter_mut().zip(&pres[l]) {
                *d *= layer.activation.derivative(z);
            }
        }
        let input: &[f64] = if l == 0 { x } else { &posts[l - 1] };
        let gw = &mut grad_w[l];
        for (o, &d) in delta.iter().enumerate() {
            grad_b[l][o] += d;
            if d == 0.0 {
                continue;
            }
            let row = &mut gw[o * layer.in_dim..(o + 1) * layer.in_dim];
            for (g, &v) in row.iter_mut().zip(input) {
                *g += d * v;
            }
        }
        if l > 0 {
            delta_prev.clear();
            delta_prev.resize(layer.in_dim, 0.0);
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = layer.weight_row(o);
                for (dp, &w) in delta_prev.iter_mut().zip(row) {
                    *dp += d * w;
                }
            }
            std::mem::swap(delta, delta_prev);
        }
    }
    loss_value
}

fn apply_step(
    model: &mut MlpModel,
    s: &Scratch,
    config: &TrainConfig,
    adam: Option<&mut AdamState>,
    scale: f64,
) {
    let lr = config.learning_rate;
    match (config.optimizer, adam) {
        (OptimizerKind::Sgd, _) => {
            for (l, layer) in model.layers.iter_mut().enumerate() {
                for (w, g) in layer.weights.iter_mut().zip(&s.grad_w[l]) {
                    *w -= lr * g * scale;
                }
                for (b, g) in layer.bias.iter_mut().zip(&s.grad_b[l]) {
                    *b -= lr * g * scale;
                }
            }
        }
        (
            OptimizerKind::Adam {
                beta1,
                beta2,
                epsilon,
            },
            Some(state),
        ) => {
            state.t += 1;
            let bc1 = 1.0 - beta1.powi(state.t as i32);
            let bc2 = 1.0 - beta2.powi(state.t as i32);
            for (l, layer) in model.layers.iter_mut().enumerate() {
                adam_update(
                    &mut layer.weights,
                    &s.grad_w[l],
                    &mut state.m_w[l],
                    &mut state.v_w[l],
                    scale,
                    lr,
                    beta1,
                    beta2,
                    epsilon,
                    bc1,
                    bc2,
                );
                adam_update(
                    &mut layer.bias,
                    &s.grad_b[l],
                    &mut state.m_b[l],
                    &mut state.v_b[l],
                    scale,
                    lr,
                    beta1,
                    beta2,
                    epsilon,
                    bc1,
                    bc2,
                );
            }
        }
        (OptimizerKind::Adam { .. }, None) => unreachable!("adam state allocated with adam"),
    }
}

#[allow(clippy::too_many_arguments)]
fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    scale: f64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    bc1: f64,
    bc2: f64,
) {
    for i in 0..params.len() {
        let g = grads[i] * scale;
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        params[i] -= lr * mhat / (vhat.sqrt() + epsilon);
    }
}
