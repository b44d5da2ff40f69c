//! Minimal multilayer-perceptron engine.
//!
//! A network is an ordered list of affine+activation layers with a designated
//! split index: layers before the split form the feature map `h`, layers from
//! the split onward form the prediction head `g`, so the full network is
//! `f = g ∘ h`. The split is what the conformal methods key on — they need
//! the feature vector `h(x)` and the Jacobian of `g` at that feature.
//!
//! Everything is `f64`; the Jacobian acceptance checks are finite-difference
//! based and need the headroom.

mod serialize;
mod train;

pub use train::{train, LossKind, OptimizerKind, TrainConfig};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::dot;

/// Element-wise activation applied after a layer's affine transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative at pre-activation `z`. ReLU takes subgradient 0 at z == 0.
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }
}

/// What the final layer's outputs mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputKind {
    /// `dim` real-valued regression outputs.
    Regression { dim: usize },
    /// Two outputs interpreted as (lower, upper) conditional quantiles of a
    /// scalar response. The shared trunk with a two-row final affine layer is
    /// the same thing as two affine heads on one feature map.
    QuantilePair,
    /// `classes` unnormalized logits.
    Logits { classes: usize },
}

impl OutputKind {
    pub fn output_dim(self) -> usize {
        match self {
            OutputKind::Regression { dim } => dim,
            OutputKind::QuantilePair => 2,
            OutputKind::Logits { classes } => classes,
        }
    }
}

/// One dense layer: `y = activation(W x + b)`, weights row-major `out×in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub(crate) weights: Vec<f64>,
    pub(crate) bias: Vec<f64>,
    pub(crate) activation: Activation,
    pub(crate) in_dim: usize,
    pub(crate) out_dim: usize,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weight_row(&self, o: usize) -> &[f64] {
        &self.weights[o * self.in_dim..(o + 1) * self.in_dim]
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    fn forward_into(&self, input: &[f64], pre: &mut Vec<f64>, post: &mut Vec<f64>) {
        pre.clear();
        post.clear();
        for o in 0..self.out_dim {
            let z = self.bias[o] + dot(self.weight_row(o), input);
            pre.push(z);
            post.push(self.activation.apply(z));
        }
    }
}

/// A layered network with a feature/head split.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layers: Vec<Layer>,
    split_index: usize,
    output_kind: OutputKind,
}

/// All intermediate state of one forward pass.
#[derive(Debug, Clone)]
pub struct FeatureView {
    pub input: Vec<f64>,
    /// Post-activation vector of every layer, in order.
    pub activations: Vec<Vec<f64>>,
    /// Value at the split: `activations[split-1]`, or the input when split = 0.
    pub feature: Vec<f64>,
    pub prediction: Vec<f64>,
}

/// Jacobian of the prediction head at a feature point, with per-row norms.
#[derive(Debug, Clone)]
pub struct HeadJacobian {
    /// Row-major `d_y × d_v`; row j is the gradient of output j.
    pub rows: Vec<f64>,
    pub out_dim: usize,
    pub feature_dim: usize,
    /// Euclidean norm of each row.
    pub row_norms: Vec<f64>,
}

impl HeadJacobian {
    pub fn row(&self, j: usize) -> &[f64] {
        &self.rows[j * self.feature_dim..(j + 1) * self.feature_dim]
    }

    /// Frobenius norm of the whole Jacobian.
    pub fn frobenius_norm(&self) -> f64 {
        self.rows.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Build a model with seeded Glorot-uniform weights (`±sqrt(6/(fan_in+fan_out))`)
/// and zero biases. Identical `(dims, activations, seed)` give a bit-identical
/// model.
pub fn mlp_init(
    layer_dims: &[usize],
    activations: &[Activation],
    split_index: usize,
    output_kind: OutputKind,
    seed: u64,
) -> Result<MlpModel> {
    if layer_dims.len() < 2 {
        return Err(Error::InvalidConfig(
            "need at least an input and an output dimension".into(),
        ));
    }
    if layer_dims.iter().any(|&d| d == 0) {
        return Err(Error::InvalidConfig("layer dimensions must be > 0".into()));
    }
    let n_layers = layer_dims.len() - 1;
    if activations.len() != n_layers {
        return Err(Error::DimensionMismatch(format!(
            "{} activations for {} layers",
            activations.len(),
            n_layers
        )));
    }
    if activations[n_layers - 1] != Activation::Identity {
        return Err(Error::InvalidConfig(
            "final layer must use the identity activation".into(),
        ));
    }
    if split_index > n_layers {
        return Err(Error::InvalidConfig(format!(
            "split_index {split_index} out of range 0..={n_layers}"
        )));
    }
    let out_dim = *layer_dims.last().unwrap();
    if output_kind.output_dim() != out_dim {
        return Err(Error::DimensionMismatch(format!(
            "output kind expects {} outputs, final layer has {out_dim}",
            output_kind.output_dim()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let (fan_in, fan_out) = (layer_dims[l], layer_dims[l + 1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weights = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        layers.push(Layer {
            weights,
            bias: vec![0.0; fan_out],
            activation: activations[l],
            in_dim: fan_in,
            out_dim: fan_out,
        });
    }
    Ok(MlpModel {
        layers,
        split_index,
        output_kind,
    })
}

impl MlpModel {
    /// ReLU hidden layers, identity output layer.
    pub fn with_relu_hidden(
        layer_dims: &[usize],
        split_index: usize,
        output_kind: OutputKind,
        seed: u64,
    ) -> Result<Self> {
        let n = layer_dims.len().saturating_sub(1);
        let mut acts = vec![Activation::Relu; n];
        if let Some(last) = acts.last_mut() {
            *last = Activation::Identity;
        }
        mlp_init(layer_dims, &acts, split_index, output_kind, seed)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn split_index(&self) -> usize {
        self.split_index
    }

    pub fn output_kind(&self) -> OutputKind {
        self.output_kind
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    /// Dimension of the feature vector at the split.
    pub fn feature_dim(&self) -> usize {
        if self.split_index == 0 {
            self.input_dim()
        } else {
            self.layers[self.split_index - 1].out_dim
        }
    }

    /// Same weights, different feature/head split.
    pub fn with_split_index(&self, split_index: usize) -> Result<Self> {
        if split_index > self.layers.len() {
            return Err(Error::InvalidConfig(format!(
                "split_index {split_index} out of range 0..={}",
                self.layers.len()
            )));
        }
        let mut m = self.clone();
        m.split_index = split_index;
        Ok(m)
    }

    /// Full forward pass keeping every intermediate activation.
    pub fn forward(&self, x: &[f64]) -> Result<FeatureView> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "input has {} entries, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("forward input".into()));
        }
        let mut activations = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::new();
        let mut post = Vec::new();
        let mut cur: &[f64] = x;
        for layer in &self.layers {
            layer.forward_into(cur, &mut pre, &mut post);
            activations.push(post.clone());
            cur = activations.last().unwrap();
        }
        let feature = if self.split_index == 0 {
            x.to_vec()
        } else {
            activations[self.split_index - 1].clone()
        };
        let prediction = activations.last().unwrap().clone();
        Ok(FeatureView {
            input: x.to_vec(),
            activations,
            feature,
            prediction,
        })
    }

    /// Apply only the head layers (those at or after the split) to a feature
    /// vector. With split 0 this is the whole network.
    pub fn head_forward(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.feature_dim() {
            return Err(Error::DimensionMismatch(format!(
                "feature has {} entries, head expects {}",
                v.len(),
                self.feature_dim()
            )));
        }
        let mut pre = Vec::new();
        let mut post = Vec::new();
        let mut cur = v.to_vec();
        for layer in &self.layers[self.split_index..] {
            layer.forward_into(&cur, &mut pre, &mut post);
            std::mem::swap(&mut cur, &mut post);
        }
        Ok(cur)
    }

    /// Jacobian of the head at the feature of `x`, i.e. at `h(x)`.
    pub fn head_jacobian(&self, x: &[f64]) -> Result<HeadJacobian> {
        let view = self.forward(x)?;
        self.head_jacobian_at(&view.feature)
    }

    /// Jacobian of the head at an arbitrary feature vector.
    ///
    /// Reverse-mode sweep over the head layers only. ReLU units contribute
    /// subgradient 0 at exactly-zero pre-activations.
    pub fn head_jacobian_at(&self, v: &[f64]) -> Result<HeadJacobian> {
        let d_v = self.feature_dim();
        if v.len() != d_v {
            return Err(Error::DimensionMismatch(format!(
                "feature has {} entries, head expects {d_v}",
                v.len()
            )));
        }
        let head = &self.layers[self.split_index..];

        // Forward through the head, recording pre-activations.
        let mut pres: Vec<Vec<f64>> = Vec::with_capacity(head.len());
        let mut post = Vec::new();
        let mut pre = Vec::new();
        let mut cur = v.to_vec();
        for layer in head {
            layer.forward_into(&cur, &mut pre, &mut post);
            pres.push(pre.clone());
            std::mem::swap(&mut cur, &mut post);
        }

        let d_y = if head.is_empty() { d_v } else { cur.len() };

        // Reverse accumulation: carry M = dg/d(layer input), starting from the
        // output side. Row-major d_y × (current layer's input dim).
        let mut mat: Vec<f64> = {
            // Identity of size d_y over the last layer's OUTPUT.
            let mut m = vec![0.0; d_y * d_y];
            for j in 0..d_y {
                m[j * d_y + j] = 1.0;
            }
            m
        };
        let mut width = d_y;
        for (layer, pre) in head.iter().zip(&pres).rev() {
            // Column-scale by activation derivative, then multiply by W.
            let mut next = vec![0.0; d_y * layer.in_dim];
            for j in 0..d_y {
                let mrow = &mat[j * width..(j + 1) * width];
                let out = &mut next[j * layer.in_dim..(j + 1) * layer.in_dim];
                for o in 0..layer.out_dim {
                    let scale = mrow[o] * layer.activation.derivative(pre[o]);
                    if scale == 0.0 {
                        continue;
                    }
                    let wrow = layer.weight_row(o);
                    for (dst, w) in out.iter_mut().zip(wrow) {
                        *dst += scale * w;
                    }
                }
            }
            mat = next;
            width = layer.in_dim;
        }

        let row_norms = (0..d_y)
            .map(|j| dot(&mat[j * d_v..(j + 1) * d_v], &mat[j * d_v..(j + 1) * d_v]).sqrt())
            .collect();
        Ok(HeadJacobian {
            rows: mat,
            out_dim: d_y,
            feature_dim: d_v,
            row_norms,
        })
    }

    /// Convenience: prediction only.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.prediction)
    }

    /// Smallest |pre-activation| over the head's ReLU units at feature `v`,
    /// +∞ when the head has none. Finite-difference verification uses this
    /// to reject near-kink points where a subgradient is not a derivative.
    pub fn head_min_relu_margin(&self, v: &[f64]) -> Result<f64> {
        if v.len() != self.feature_dim() {
            return Err(Error::DimensionMismatch(format!(
                "feature has {} entries, head expects {}",
                v.len(),
                self.feature_dim()
            )));
        }
        let mut margin = f64::INFINITY;
        let mut pre = Vec::new();
        let mut post = Vec::new();
        let mut cur = v.to_vec();
        for layer in &self.layers[self.split_index..] {
            layer.forward_into(&cur, &mut pre, &mut post);
            if layer.activation == Activation::Relu {
                for z in &pre {
                    margin = margin.min(z.abs());
                }
            }
            std::mem::swap(&mut cur, &mut post);
        }
        Ok(margin)
    }

    /// Overwrite one layer's parameters. Panics on shape mismatch; this is
    /// for hand-built fixture models, not a data path.
    pub fn set_layer_params(&mut self, layer: usize, weights: &[f64], bias: &[f64]) {
        let l = &mut self.layers[layer];
        assert_eq!(weights.len(), l.weights.len(), "weight count mismatch");
        assert_eq!(bias.len(), l.bias.len(), "bias count mismatch");
        l.weights.copy_from_slice(weights);
        l.bias.copy_from_slice(bias);
    }

    /// Copy of the model with the final affine layer (weights and bias)
    /// multiplied by `c`.
    pub fn with_scaled_final_layer(&self, c: f64) -> Self {
        let mut m = self.clone();
        let last = m.layers.last_mut().unwrap();
        last.weights.iter_mut().for_each(|w| *w *= c);
        last.bias.iter_mut().for_each(|b| *b *= c);
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_head_model(w: &[f64], b: f64) -> MlpModel {
        // Single layer, identity activation, split 0 so the head is everything.
        let mut m = mlp_init(
            &[w.len(), 1],
            &[Activation::Identity],
            0,
            OutputKind::Regression { dim: 1 },
            0,
        )
        .unwrap();
        m.layers[0].weights.copy_from_slice(w);
        m.layers[0].bias[0] = b;
        m
    }

    #[test]
    fn init_is_deterministic() {
        let a = MlpModel::with_relu_hidden(&[100, 64, 64, 64, 1], 2, OutputKind::Regression { dim: 1 }, 42)
            .unwrap();
        let b = MlpModel::with_relu_hidden(&[100, 64, 64, 64, 1], 2, OutputKind::Regression { dim: 1 }, 42)
            .unwrap();
        assert_eq!(a, b);
        let c = MlpModel::with_relu_hidden(&[100, 64, 64, 64, 1], 2, OutputKind::Regression { dim: 1 }, 43)
            .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_default_architecture_splits() {
        let m = MlpModel::with_relu_hidden(&[100, 64, 64, 64, 1], 2, OutputKind::Regression { dim: 1 }, 7)
            .unwrap();
        assert_eq!(m.n_layers(), 4);
        assert_eq!(m.split_index(), 2);
        assert_eq!(m.feature_dim(), 64);
    }

    #[test]
    fn init_rejects_bad_split_and_activation() {
        assert!(MlpModel::with_relu_hidden(&[3, 3], 3, OutputKind::Regression { dim: 3 }, 0).is_err());
        assert!(mlp_init(
            &[3, 3],
            &[Activation::Relu],
            0,
            OutputKind::Regression { dim: 3 },
            0
        )
        .is_err());
        assert!(mlp_init(
            &[3, 2],
            &[Activation::Identity],
            0,
            OutputKind::Regression { dim: 3 },
            0
        )
        .is_err());
    }

    #[test]
    fn forward_hand_computed_linear() {
        let m = linear_head_model(&[3.0, 4.0], 0.0);
        let view = m.forward(&[1.0, 1.0]).unwrap();
        assert_eq!(view.prediction, vec![7.0]);
        assert_eq!(view.feature, vec![1.0, 1.0]);
    }

    #[test]
    fn forward_is_pure() {
        let m = MlpModel::with_relu_hidden(&[4, 8, 2], 1, OutputKind::Regression { dim: 2 }, 3).unwrap();
        let x = [0.3, -0.2, 0.9, 0.1];
        let a = m.forward(&x).unwrap();
        let b = m.forward(&x).unwrap();
        assert_eq!(a.prediction, b.prediction);
        assert_eq!(a.activations, b.activations);
    }

    #[test]
    fn forward_rejects_bad_input() {
        let m = linear_head_model(&[1.0, 2.0], 0.0);
        assert!(m.forward(&[1.0]).is_err());
        assert!(m.forward(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn head_forward_degenerate_split_equals_forward() {
        let m = MlpModel::with_relu_hidden(&[4, 8, 2], 0, OutputKind::Regression { dim: 2 }, 3).unwrap();
        let x = [0.3, -0.2, 0.9, 0.1];
        assert_eq!(
            m.head_forward(&x).unwrap(),
            m.forward(&x).unwrap().prediction
        );
    }

    #[test]
    fn head_forward_consistent_with_forward_feature() {
        for split in 0..=3 {
            let m = MlpModel::with_relu_hidden(&[5, 8, 6, 2], split, OutputKind::Regression { dim: 2 }, 9)
                .unwrap();
            let x = [0.1, 0.5, -0.4, 0.2, 0.8];
            let view = m.forward(&x).unwrap();
            // Split consistency must be bit-exact: the head applies the same
            // layers to the same intermediate values.
            assert_eq!(m.head_forward(&view.feature).unwrap(), view.prediction);
        }
    }

    #[test]
    fn jacobian_identity_head() {
        // Split at the last layer: head is the identity on the outputs.
        let m = MlpModel::with_relu_hidden(&[3, 4, 2], 2, OutputKind::Regression { dim: 2 }, 1).unwrap();
        let j = m.head_jacobian(&[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(j.out_dim, 2);
        assert_eq!(j.feature_dim, 2);
        for a in 0..2 {
            for b in 0..2 {
                let expect = if a == b { 1.0 } else { 0.0 };
                assert_eq!(j.row(a)[b], expect);
            }
        }
        assert_eq!(j.row_norms, vec![1.0, 1.0]);
    }

    #[test]
    fn jacobian_linear_head() {
        let m = linear_head_model(&[3.0, 4.0], 0.0);
        let j = m.head_jacobian(&[1.0, 1.0]).unwrap();
        assert_eq!(j.row(0), &[3.0, 4.0]);
        assert_eq!(j.row_norms[0], 5.0);
    }

    #[test]
    fn jacobian_matches_finite_differences_on_relu_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        while checked < 20 {
            let m = MlpModel::with_relu_hidden(
                &[6, 8, 5, 2],
                1,
                OutputKind::Regression { dim: 2 },
                rng.gen(),
            )
            .unwrap();
            let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let view = m.forward(&x).unwrap();
            if !kink_free(&m, &view.feature, 1e-3) {
                continue;
            }
            let jac = m.head_jacobian_at(&view.feature).unwrap();
            let fd = finite_difference_jacobian(&m, &view.feature, 1e-5);
            for (a, b) in jac.rows.iter().zip(&fd) {
                let denom = a.abs().max(b.abs()).max(1e-8);
                assert!(
                    (a - b).abs() / denom < 1e-4,
                    "jacobian entry {a} vs finite difference {b}"
                );
            }
            checked += 1;
        }
    }

    #[test]
    fn chain_rule_full_network_jacobian() {
        // d f/d x computed as (head Jacobian at v̂) × (Jacobian of h at x) must
        // match end-to-end finite differences of the whole network.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        while checked < 10 {
            let m = MlpModel::with_relu_hidden(
                &[4, 6, 5, 2],
                1,
                OutputKind::Regression { dim: 2 },
                rng.gen(),
            )
            .unwrap();
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let view = m.forward(&x).unwrap();
            // h as a network of its own: same layers, split 0, head = everything.
            let h_only = MlpModel {
                layers: m.layers[..m.split_index].to_vec(),
                split_index: 0,
                output_kind: OutputKind::Regression {
                    dim: m.feature_dim(),
                },
            };
            if !kink_free(&h_only, &x, 1e-3) || !kink_free(&m, &view.feature, 1e-3) {
                continue;
            }
            let jg = m.head_jacobian_at(&view.feature).unwrap();
            let jh = h_only.head_jacobian_at(&x).unwrap();
            // Compose: (d_y × d_v) × (d_v × d_x).
            let (dy, dv, dx) = (jg.out_dim, jg.feature_dim, x.len());
            let mut composed = vec![0.0; dy * dx];
            for a in 0..dy {
                for b in 0..dv {
                    let g = jg.row(a)[b];
                    if g == 0.0 {
                        continue;
                    }
                    for c in 0..dx {
                        composed[a * dx + c] += g * jh.row(b)[c];
                    }
                }
            }
            let full = MlpModel {
                layers: m.layers.clone(),
                split_index: 0,
                output_kind: m.output_kind,
            };
            let fd = finite_difference_jacobian(&full, &x, 1e-5);
            for (a, b) in composed.iter().zip(&fd) {
                let denom = a.abs().max(b.abs()).max(1e-6);
                assert!((a - b).abs() / denom < 1e-3, "chain {a} vs end-to-end {b}");
            }
            checked += 1;
        }
    }

    /// True when every ReLU pre-activation along the head is safely away from 0.
    pub(crate) fn kink_free(m: &MlpModel, v: &[f64], margin: f64) -> bool {
        let mut pre = Vec::new();
        let mut post = Vec::new();
        let mut cur = v.to_vec();
        for layer in &m.layers[m.split_index..] {
            layer.forward_into(&cur, &mut pre, &mut post);
            if layer.activation == Activation::Relu && pre.iter().any(|z| z.abs() < margin) {
                return false;
            }
            std::mem::swap(&mut cur, &mut post);
        }
        true
    }

    /// Central finite differences of `head_forward` at `v`, row-major d_y × d_v.
    pub(crate) fn finite_difference_jacobian(m: &MlpModel, v: &[f64], step: f64) -> Vec<f64> {
        let d_v = v.len();
        let d_y = m.output_dim();
        let mut out = vec![0.0; d_y * d_v];
        let mut vp = v.to_vec();
        for k in 0..d_v {
            vp[k] = v[k] + step;
            let hi = m.head_forward(&vp).unwrap();
            vp[k] = v[k] - step;
            let lo = m.head_forward(&vp).unwrap();
            vp[k] = v[k];
            for j in 0..d_y {
                out[j * d_v + k] = (hi[j] - lo[j]) / (2.0 * step);
            }
        }
        out
    }
}
