//! Learnable networks: the conditional velocity field, the condition
//! embedder whose output conditions it, and the discriminator used in
//! adversarial fine-tuning.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{concat_cols, embed_rows, DropoutMask, RngStream, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Gelu,
    Tanh,
}

impl Activation {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Activation::Gelu => x.gelu(),
            Activation::Tanh => x.tanh(),
        }
    }
}

/// One dense layer, weight `[in, out]` and bias `[out]`.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl DenseLayer {
    /// He-style init: weights N(0, sqrt(2/fan_in)), zero bias.
    fn init(stream: &mut RngStream, fan_in: usize, fan_out: usize) -> Result<Self> {
        let scale = (2.0 / fan_in as f64).sqrt();
        let w = Tensor::standard_normal(stream, &[fan_in, fan_out])?.mul_scalar(scale)?;
        Ok(DenseLayer { weight: w, bias: Tensor::zeros(&[fan_out]) })
    }

    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        DenseLayer { weight: Tensor::zeros(&[fan_in, fan_out]), bias: Tensor::zeros(&[fan_out]) }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.affine(&self.weight, &self.bias)
    }

    fn map(&self, f: &mut impl FnMut(&Tensor) -> Result<Tensor>) -> Result<Self> {
        Ok(DenseLayer { weight: f(&self.weight)?, bias: f(&self.bias)? })
    }
}

/// Sinusoidal features of a time batch: `[sin(w_k t), cos(w_k t)]` with
/// frequencies geometric from 1 to 100 over half the width.
pub fn time_features(t: &Tensor, width: usize) -> Result<Tensor> {
    if width == 0 || width % 2 != 0 {
        return Err(Error::Config(format!("time embedding width {width} must be even and positive")));
    }
    if t.shape().len() != 1 {
        return Err(Error::shape("time_features", format!("expected [batch], got {:?}", t.shape())));
    }
    let half = width / 2;
    let batch = t.numel();
    let mut data = Vec::with_capacity(batch * width);
    for &tv in t.data() {
        for k in 0..half {
            let freq = if half == 1 {
                1.0
            } else {
                f64::powf(100.0, k as f64 / (half - 1) as f64)
            };
            data.push((freq * tv).sin());
        }
        for k in 0..half {
            let freq = if half == 1 {
                1.0
            } else {
                f64::powf(100.0, k as f64 / (half - 1) as f64)
            };
            data.push((freq * tv).cos());
        }
    }
    Tensor::new(data, &[batch, width])
}

/// Shared dropout masks, one per hidden layer, for one training step.
#[derive(Debug, Clone)]
pub struct MaskSet {
    masks: Vec<DropoutMask>,
}

impl MaskSet {
    pub fn masks(&self) -> &[DropoutMask] {
        &self.masks
    }

    pub fn ids(&self) -> Vec<u64> {
        self.masks.iter().map(|m| m.id()).collect()
    }
}

/// Records which masks an evaluation actually applied, in order.
#[derive(Debug, Default, Clone)]
pub struct EvalTrace {
    pub applied_mask_ids: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VectorFieldConfig {
    #[serde(default = "default_data_dim")]
    pub data_dim: usize,
    #[serde(default = "default_hidden_layers")]
    pub hidden_layers: usize,
    #[serde(default = "default_hidden_width")]
    pub hidden_width: usize,
    #[serde(default = "default_time_dim")]
    pub time_embed_dim: usize,
    #[serde(default = "default_cond_dim")]
    pub cond_embed_dim: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
}

fn default_data_dim() -> usize {
    2
}
fn default_hidden_layers() -> usize {
    3
}
fn default_hidden_width() -> usize {
    128
}
fn default_time_dim() -> usize {
    16
}
fn default_cond_dim() -> usize {
    8
}
fn default_activation() -> Activation {
    Activation::Gelu
}
fn default_dropout() -> f64 {
    0.05
}

impl Default for VectorFieldConfig {
    fn default() -> Self {
        VectorFieldConfig {
            data_dim: default_data_dim(),
            hidden_layers: default_hidden_layers(),
            hidden_width: default_hidden_width(),
            time_embed_dim: default_time_dim(),
            cond_embed_dim: default_cond_dim(),
            activation: default_activation(),
            dropout_rate: default_dropout(),
        }
    }
}

/// Anything that evaluates a velocity field; trained nets and closed-form
/// test fields share this surface so losses and the sampler accept both.
pub trait VelocityModel {
    fn velocity(
        &self,
        t: &Tensor,
        x: &Tensor,
        cond: &Tensor,
        masks: Option<&MaskSet>,
        track: bool,
        trace: Option<&mut EvalTrace>,
    ) -> Result<Tensor>;
}

impl VelocityModel for VectorFieldNet {
    fn velocity(
        &self,
        t: &Tensor,
        x: &Tensor,
        cond: &Tensor,
        masks: Option<&MaskSet>,
        track: bool,
        trace: Option<&mut EvalTrace>,
    ) -> Result<Tensor> {
        VectorFieldNet::velocity(self, t, x, cond, masks, track, trace)
    }
}

/// Conditional velocity field `v(t, x, cond) -> dx/dt`, an MLP over
/// `[x | time features | condition embedding]` with a zero-initialized
/// output head (a fresh net predicts zero velocity everywhere).
#[derive(Debug, Clone)]
pub struct VectorFieldNet {
    pub config: VectorFieldConfig,
    hidden: Vec<DenseLayer>,
    head: DenseLayer,
}

impl VectorFieldNet {
    pub fn init(config: VectorFieldConfig, stream: &mut RngStream) -> Result<Self> {
        if config.hidden_layers == 0 {
            return Err(Error::Config("vector field needs at least one hidden layer".into()));
        }
        let in_dim = config.data_dim + config.time_embed_dim + config.cond_embed_dim;
        let mut hidden = Vec::with_capacity(config.hidden_layers);
        let mut prev = in_dim;
        for _ in 0..config.hidden_layers {
            hidden.push(DenseLayer::init(stream, prev, config.hidden_width)?);
            prev = config.hidden_width;
        }
        let head = DenseLayer::zeros(prev, config.data_dim);
        Ok(VectorFieldNet { config, hidden, head })
    }

    /// Evaluate the velocity at `(t, x)` under condition embedding `cond`.
    ///
    /// With `track` off, parameters and inputs are detached first, so the
    /// evaluation participates in no tape — this is the stop-gradient pass.
    /// `masks`, when given, must hold one mask per hidden layer; the same set
    /// passed to two calls yields the shared-dropout contract.
    pub fn velocity(
        &self,
        t: &Tensor,
        x: &Tensor,
        cond: &Tensor,
        masks: Option<&MaskSet>,
        track: bool,
        mut trace: Option<&mut EvalTrace>,
    ) -> Result<Tensor> {
        let batch = match x.shape() {
            [b, d] if *d == self.config.data_dim => *b,
            other => {
                return Err(Error::shape(
                    "velocity",
                    format!("x {:?}, expected [batch, {}]", other, self.config.data_dim),
                ))
            }
        };
        if t.shape() != [batch] {
            return Err(Error::shape("velocity", format!("t {:?}, expected [{batch}]", t.shape())));
        }
        if cond.shape() != [batch, self.config.cond_embed_dim] {
            return Err(Error::shape(
                "velocity",
                format!("cond {:?}, expected [{batch}, {}]", cond.shape(), self.config.cond_embed_dim),
            ));
        }
        if let Some(set) = masks {
            if set.masks().len() != self.hidden.len() {
                return Err(Error::shape(
                    "velocity",
                    format!("{} masks for {} hidden layers", set.masks().len(), self.hidden.len()),
                ));
            }
        }

        let net;
        let (net_ref, x_in, cond_in) = if track {
            (self, x.clone(), cond.clone())
        } else {
            net = self.detached();
            (&net, x.detach(), cond.detach())
        };

        let tf = time_features(&t.detach(), net_ref.config.time_embed_dim)?;
        let mut h = concat_cols(&[&x_in, &tf, &cond_in])?;
        for (l, layer) in net_ref.hidden.iter().enumerate() {
            h = net_ref.config.activation.apply(&layer.forward(&h)?)?;
            if let Some(set) = masks {
                let mask = &set.masks()[l];
                h = mask.apply(&h)?;
                if let Some(tr) = trace.as_deref_mut() {
                    tr.applied_mask_ids.push(mask.id());
                }
            }
        }
        net_ref.head.forward(&h)
    }

    /// Sample one dropout mask per hidden layer for a batch of this size.
    pub fn sample_masks(&self, stream: &mut RngStream, batch: usize) -> Result<MaskSet> {
        let mut masks = Vec::with_capacity(self.hidden.len());
        for _ in 0..self.hidden.len() {
            masks.push(DropoutMask::sample(
                stream,
                &[batch, self.config.hidden_width],
                self.config.dropout_rate,
            )?);
        }
        Ok(MaskSet { masks })
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.hidden.iter().enumerate() {
            out.push((format!("hidden{i}.weight"), l.weight.clone()));
            out.push((format!("hidden{i}.bias"), l.bias.clone()));
        }
        out.push(("head.weight".into(), self.head.weight.clone()));
        out.push(("head.bias".into(), self.head.bias.clone()));
        out
    }

    /// Replace parameters, in `named_parameters` order.
    pub fn set_parameters(&mut self, params: &[Tensor]) -> Result<()> {
        let expect = self.hidden.len() * 2 + 2;
        if params.len() != expect {
            return Err(Error::Contract(format!("expected {expect} parameters, got {}", params.len())));
        }
        for (i, l) in self.hidden.iter_mut().enumerate() {
            l.weight = params[2 * i].clone();
            l.bias = params[2 * i + 1].clone();
        }
        self.head.weight = params[expect - 2].clone();
        self.head.bias = params[expect - 1].clone();
        Ok(())
    }

    fn map_params(&self, f: &mut impl FnMut(&Tensor) -> Result<Tensor>) -> Result<Self> {
        Ok(VectorFieldNet {
            config: self.config.clone(),
            hidden: self.hidden.iter().map(|l| l.map(f)).collect::<Result<_>>()?,
            head: self.head.map(f)?,
        })
    }

    /// Tracked view: every parameter registered as a leaf on `tape`.
    pub fn watched(&self, tape: &Tape) -> Result<Self> {
        self.map_params(&mut |t| tape.watch(t))
    }

    /// Untracked view of the same values (the stop-gradient parameters).
    pub fn detached(&self) -> Self {
        self.map_params(&mut |t| Ok(t.detach())).expect("detach cannot fail")
    }

    pub fn parameter_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Maps condition labels to embedding vectors; the trainable stand-in for an
/// upstream encoder. When frozen, it is excluded from optimization entirely.
#[derive(Debug, Clone)]
pub struct ConditionEmbedder {
    pub table: Tensor,
    pub frozen: bool,
}

impl ConditionEmbedder {
    pub fn init(n_conditions: usize, dim: usize, stream: &mut RngStream) -> Result<Self> {
        if n_conditions == 0 || dim == 0 {
            return Err(Error::Config("embedder needs n_conditions >= 1 and dim >= 1".into()));
        }
        let table = Tensor::standard_normal(stream, &[n_conditions, dim])?.mul_scalar(0.5)?;
        Ok(ConditionEmbedder { table, frozen: false })
    }

    pub fn embed(&self, labels: &[usize]) -> Result<Tensor> {
        embed_rows(&self.table, labels)
    }

    pub fn embedding_dim(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        vec![("table".into(), self.table.clone())]
    }

    pub fn set_parameters(&mut self, params: &[Tensor]) -> Result<()> {
        if params.len() != 1 {
            return Err(Error::Contract(format!("expected 1 parameter, got {}", params.len())));
        }
        self.table = params[0].clone();
        Ok(())
    }

    pub fn watched(&self, tape: &Tape) -> Result<Self> {
        Ok(ConditionEmbedder { table: tape.watch(&self.table)?, frozen: self.frozen })
    }

    pub fn parameter_count(&self) -> usize {
        self.table.numel()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    #[serde(default = "default_disc_layers")]
    pub layers: usize,
    #[serde(default = "default_disc_width")]
    pub width: usize,
    #[serde(default = "default_disc_slope")]
    pub leaky_slope: f64,
}

fn default_disc_layers() -> usize {
    3
}
fn default_disc_width() -> usize {
    64
}
fn default_disc_slope() -> f64 {
    0.2
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            layers: default_disc_layers(),
            width: default_disc_width(),
            leaky_slope: default_disc_slope(),
        }
    }
}

/// Dense least-squares discriminator with per-layer feature access. The
/// scalar head is unsquashed and zero-initialized.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    hidden: Vec<DenseLayer>,
    head: DenseLayer,
}

impl Discriminator {
    pub fn init(config: DiscriminatorConfig, data_dim: usize, stream: &mut RngStream) -> Result<Self> {
        if config.layers == 0 {
            return Err(Error::Config("discriminator needs at least one layer".into()));
        }
        let mut hidden = Vec::with_capacity(config.layers);
        let mut prev = data_dim;
        for _ in 0..config.layers {
            hidden.push(DenseLayer::init(stream, prev, config.width)?);
            prev = config.width;
        }
        let head = DenseLayer::zeros(prev, 1);
        Ok(Discriminator { config, hidden, head })
    }

    /// Score `[batch, 1]` plus the L intermediate feature maps D^1..D^L.
    pub fn eval(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut features = Vec::with_capacity(self.hidden.len());
        let mut h = x.clone();
        for layer in &self.hidden {
            h = layer.forward(&h)?.leaky_relu(self.config.leaky_slope)?;
            features.push(h.clone());
        }
        let score = self.head.forward(&h)?;
        Ok((score, features))
    }

    pub fn n_feature_maps(&self) -> usize {
        self.hidden.len()
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.hidden.iter().enumerate() {
            out.push((format!("hidden{i}.weight"), l.weight.clone()));
            out.push((format!("hidden{i}.bias"), l.bias.clone()));
        }
        out.push(("head.weight".into(), self.head.weight.clone()));
        out.push(("head.bias".into(), self.head.bias.clone()));
        out
    }

    pub fn set_parameters(&mut self, params: &[Tensor]) -> Result<()> {
        let expect = self.hidden.len() * 2 + 2;
        if params.len() != expect {
            return Err(Error::Contract(format!("expected {expect} parameters, got {}", params.len())));
        }
        for (i, l) in self.hidden.iter_mut().enumerate() {
            l.weight = params[2 * i].clone();
            l.bias = params[2 * i + 1].clone();
        }
        self.head.weight = params[expect - 2].clone();
        self.head.bias = params[expect - 1].clone();
        Ok(())
    }

    pub fn watched(&self, tape: &Tape) -> Result<Self> {
        Ok(Discriminator {
            config: self.config.clone(),
            hidden: self
                .hidden
                .iter()
                .map(|l| l.map(&mut |t| tape.watch(t)))
                .collect::<Result<_>>()?,
            head: self.head.map(&mut |t| tape.watch(t))?,
        })
    }

    pub fn detached(&self) -> Self {
        Discriminator {
            config: self.config.clone(),
            hidden: self.hidden.iter().map(|l| l.map(&mut |t| Ok(t.detach())).unwrap()).collect(),
            head: self.head.map(&mut |t| Ok(t.detach())).unwrap(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> VectorFieldConfig {
        VectorFieldConfig {
            data_dim: 2,
            hidden_layers: 2,
            hidden_width: 8,
            time_embed_dim: 4,
            cond_embed_dim: 3,
            activation: Activation::Gelu,
            dropout_rate: 0.1,
        }
    }

    fn batch_inputs(stream: &mut RngStream, b: usize) -> (Tensor, Tensor, Tensor) {
        let t = Tensor::new((0..b).map(|i| i as f64 / b as f64).collect(), &[b]).unwrap();
        let x = Tensor::standard_normal(stream, &[b, 2]).unwrap();
        let cond = Tensor::standard_normal(stream, &[b, 3]).unwrap();
        (t, x, cond)
    }

    #[test]
    fn fresh_net_outputs_zero_velocity() {
        let mut s = RngStream::new(1);
        let net = VectorFieldNet::init(small_config(), &mut s).unwrap();
        let (t, x, cond) = batch_inputs(&mut s, 5);
        let v = net.velocity(&t, &x, &cond, None, true, None).unwrap();
        assert_eq!(v.shape(), &[5, 2]);
        assert!(v.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn velocity_is_deterministic_with_same_masks() {
        let mut s = RngStream::new(2);
        let net = VectorFieldNet::init(small_config(), &mut s).unwrap();
        let (t, x, cond) = batch_inputs(&mut s, 4);
        let masks = net.sample_masks(&mut s.child(1), 4).unwrap();
        let a = net.velocity(&t, &x, &cond, Some(&masks), true, None).unwrap();
        let b = net.velocity(&t, &x, &cond, Some(&masks), true, None).unwrap();
        assert!(a.bitwise_eq(&b));
    }

    #[test]
    fn shared_masks_are_traced_identically_across_passes() {
        let mut s = RngStream::new(3);
        let net = VectorFieldNet::init(small_config(), &mut s).unwrap();
        let (t, x, cond) = batch_inputs(&mut s, 4);
        let masks = net.sample_masks(&mut s.child(1), 4).unwrap();
        let mut tr1 = EvalTrace::default();
        let mut tr2 = EvalTrace::default();
        net.velocity(&t, &x, &cond, Some(&masks), true, Some(&mut tr1)).unwrap();
        net.velocity(&t.add_scalar(0.01).unwrap(), &x, &cond, Some(&masks), false, Some(&mut tr2))
            .unwrap();
        assert_eq!(tr1.applied_mask_ids, tr2.applied_mask_ids);
        assert_eq!(tr1.applied_mask_ids, masks.ids());
        assert_eq!(tr1.applied_mask_ids.len(), 2);
    }

    #[test]
    fn untracked_eval_leaves_tape_unchanged() {
        let mut s = RngStream::new(4);
        let net = VectorFieldNet::init(small_config(), &mut s).unwrap();
        let tape = Tape::new();
        let watched = net.watched(&tape).unwrap();
        let before = tape.len();
        let (t, x, cond) = batch_inputs(&mut s, 4);
        watched.velocity(&t, &x, &cond, None, false, None).unwrap();
        assert_eq!(tape.len(), before);
        watched.velocity(&t, &x, &cond, None, true, None).unwrap();
        assert!(tape.len() > before);
    }

    #[test]
    fn parameter_count_is_reported() {
        let mut s = RngStream::new(5);
        let net = VectorFieldNet::init(small_config(), &mut s).unwrap();
        // in = 2+4+3 = 9: (9*8+8) + (8*8+8) + (8*2+2) = 170
        assert_eq!(net.parameter_count(), 170);
    }

    #[test]
    fn embedder_rows_and_freeze_flag() {
        let mut s = RngStream::new(6);
        let emb = ConditionEmbedder::init(4, 3, &mut s).unwrap();
        let out = emb.embed(&[2, 0, 2]).unwrap();
        assert_eq!(out.shape(), &[3, 3]);
        assert_eq!(out.row(0), out.row(2));
        assert!(!emb.frozen);
    }

    #[test]
    fn discriminator_zero_head_scores_zero_with_l_features() {
        let mut s = RngStream::new(7);
        let disc = Discriminator::init(DiscriminatorConfig::default(), 2, &mut s).unwrap();
        let x = Tensor::standard_normal(&mut s, &[6, 2]).unwrap();
        let (score, features) = disc.eval(&x).unwrap();
        assert_eq!(score.shape(), &[6, 1]);
        assert!(score.data().iter().all(|&v| v == 0.0));
        assert_eq!(features.len(), 3);
        assert_eq!(features.len(), disc.n_feature_maps());
    }

    #[test]
    fn velocity_rejects_mismatched_masks() {
        let mut s = RngStream::new(8);
        let net = VectorFieldNet::init(small_config(), &mut s).unwrap();
        let (t, x, cond) = batch_inputs(&mut s, 4);
        let masks = net.sample_masks(&mut s, 3).unwrap(); // wrong batch size
        assert!(net.velocity(&t, &x, &cond, Some(&masks), true, None).is_err());
    }

    #[test]
    fn time_features_shape_and_range() {
        let t = Tensor::new(vec![0.0, 0.5, 1.0], &[3]).unwrap();
        let tf = time_features(&t, 8).unwrap();
        assert_eq!(tf.shape(), &[3, 8]);
        assert!(tf.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        // t = 0 row: sines 0, cosines 1.
        assert_eq!(&tf.row(0)[..4], &[0.0, 0.0, 0.0, 0.0]);
        assert_eq!(&tf.row(0)[4..], &[1.0, 1.0, 1.0, 1.0]);
    }
}
