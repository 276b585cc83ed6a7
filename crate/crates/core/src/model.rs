//! Layered feed-forward model with named parameter tensors and explicit
//! output-channel structure, plus optional fake-quantization state attached
//! per layer.

use crate::error::{Error, Result};
use crate::quant::{PactQuant, WeightQuant};
use crate::rng::{fingerprint_f64, substream};
use crate::tensor::Tensor;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    /// Fully connected: weight [out, in], optional bias [out].
    Dense { in_dim: usize, out_dim: usize },
    /// 2-D convolution, stride 1, zero padding preserving H and W.
    /// Weight [out_c, in_c, kh, kw], optional bias [out_c]. Kernel dims odd.
    Conv2d {
        in_c: usize,
        out_c: usize,
        kh: usize,
        kw: usize,
    },
    Relu,
    MaxPool2x2,
    Flatten,
}

impl LayerKind {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerKind::Dense { .. } | LayerKind::Conv2d { .. })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Layer {
    pub id: String,
    pub kind: LayerKind,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
    /// Per-channel weight fake-quantization, set by policy application.
    pub weight_quant: Option<WeightQuant>,
    /// PACT activation fake-quantization; only meaningful on Relu layers.
    pub act_quant: Option<PactQuant>,
}

impl Layer {
    fn bare(id: impl Into<String>, kind: LayerKind) -> Self {
        Layer {
            id: id.into(),
            kind,
            weight: None,
            bias: None,
            weight_quant: None,
            act_quant: None,
        }
    }

    /// Output channels of the weight tensor (conv output channels / dense rows).
    pub fn out_channels(&self) -> usize {
        match self.kind {
            LayerKind::Dense { out_dim, .. } => out_dim,
            LayerKind::Conv2d { out_c, .. } => out_c,
            _ => 0,
        }
    }

    /// Weight elements per output channel.
    pub fn channel_elements(&self) -> usize {
        match self.kind {
            LayerKind::Dense { in_dim, .. } => in_dim,
            LayerKind::Conv2d { in_c, kh, kw, .. } => in_c * kh * kw,
            _ => 0,
        }
    }
}

/// Loss attached after the last layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum LossHead {
    /// Mean softmax cross-entropy over the batch.
    SoftmaxCrossEntropy { classes: usize },
    /// Mean of ½ aᵀ A a per sample; `matrix` is square [d, d]. Used by the
    /// curvature test fixtures where the Hessian is known in closed form.
    Quadratic { matrix: Tensor },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    pub layers: Vec<Layer>,
    pub head: LossHead,
    /// Per-sample input shape, e.g. [16] or [1, 28, 28].
    pub input_shape: Vec<usize>,
}

/// Identity of one weight channel: layer id plus output-channel index.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ChannelKey {
    pub layer: String,
    pub channel: usize,
}

impl Model {
    pub fn new(layers: Vec<Layer>, head: LossHead, input_shape: Vec<usize>) -> Result<Self> {
        let m = Model {
            layers,
            head,
            input_shape,
        };
        m.infer_shapes()?; // validates layer compatibility
        Ok(m)
    }

    /// Per-layer output shapes (per sample), starting with the input shape.
    /// Index i is the input shape of layer i; the last entry feeds the head.
    pub fn infer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        let mut cur = self.input_shape.clone();
        for layer in &self.layers {
            cur = match layer.kind {
                LayerKind::Dense { in_dim, out_dim } => {
                    if cur != vec![in_dim] {
                        return Err(Error::shape(
                            format!("layer {}", layer.id),
                            format!("[{in_dim}]"),
                            format!("{cur:?}"),
                        ));
                    }
                    let w = layer.weight.as_ref().ok_or_else(|| {
                        Error::Invalid(format!("layer {} has no weight", layer.id))
                    })?;
                    if w.shape() != [out_dim, in_dim] {
                        return Err(Error::shape(
                            format!("layer {} weight", layer.id),
                            format!("[{out_dim}, {in_dim}]"),
                            format!("{:?}", w.shape()),
                        ));
                    }
                    vec![out_dim]
                }
                LayerKind::Conv2d { in_c, out_c, kh, kw } => {
                    if cur.len() != 3 || cur[0] != in_c {
                        return Err(Error::shape(
                            format!("layer {}", layer.id),
                            format!("[{in_c}, H, W]"),
                            format!("{cur:?}"),
                        ));
                    }
                    let w = layer.weight.as_ref().ok_or_else(|| {
                        Error::Invalid(format!("layer {} has no weight", layer.id))
                    })?;
                    if w.shape() != [out_c, in_c, kh, kw] {
                        return Err(Error::shape(
                            format!("layer {} weight", layer.id),
                            format!("[{out_c}, {in_c}, {kh}, {kw}]"),
                            format!("{:?}", w.shape()),
                        ));
                    }
                    vec![out_c, cur[1], cur[2]]
                }
                LayerKind::Relu => cur,
                LayerKind::MaxPool2x2 => {
                    if cur.len() != 3 {
                        return Err(Error::shape(
                            format!("layer {}", layer.id),
                            "[C, H, W]",
                            format!("{cur:?}"),
                        ));
                    }
                    vec![cur[0], cur[1] / 2, cur[2] / 2]
                }
                LayerKind::Flatten => vec![cur.iter().product()],
            };
            shapes.push(cur.clone());
        }
        Ok(shapes)
    }

    pub fn layer_index(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    /// Total parameter count (weights + biases).
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                l.weight.as_ref().map_or(0, Tensor::numel)
                    + l.bias.as_ref().map_or(0, Tensor::numel)
            })
            .sum()
    }

    /// Total weight-tensor element count (biases excluded); the element base
    /// used by channel masks, bit ratios and compression accounting.
    pub fn weight_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_ref().map_or(0, Tensor::numel))
            .sum()
    }

    /// Weight channels in layer order: (layer index, channel index, elements).
    pub fn weight_channels(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            if layer.kind.has_params() {
                let per = layer.channel_elements();
                for c in 0..layer.out_channels() {
                    out.push((li, c, per));
                }
            }
        }
        out
    }

    /// Flatten all parameters (weights then bias, in layer order) into one vector.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            if let Some(w) = &l.weight {
                v.extend_from_slice(w.data());
            }
            if let Some(b) = &l.bias {
                v.extend_from_slice(b.data());
            }
        }
        v
    }

    /// Write a flat parameter vector back; inverse of [`flatten_params`].
    pub fn unflatten_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape(
                "unflatten_params",
                self.param_count(),
                flat.len(),
            ));
        }
        let mut off = 0;
        for l in &mut self.layers {
            if let Some(w) = &mut l.weight {
                let n = w.numel();
                w.data_mut().copy_from_slice(&flat[off..off + n]);
                off += n;
            }
            if let Some(b) = &mut l.bias {
                let n = b.numel();
                b.data_mut().copy_from_slice(&flat[off..off + n]);
                off += n;
            }
        }
        Ok(())
    }

    /// (flat offset of weight tensor, element count) per layer index, over the
    /// parameter flattening.
    pub fn param_layout(&self) -> Vec<ParamSpan> {
        let mut spans = Vec::new();
        let mut off = 0;
        for (li, l) in self.layers.iter().enumerate() {
            let w = l.weight.as_ref().map_or(0, Tensor::numel);
            let b = l.bias.as_ref().map_or(0, Tensor::numel);
            if w + b > 0 {
                spans.push(ParamSpan {
                    layer_index: li,
                    weight_offset: off,
                    weight_len: w,
                    bias_offset: off + w,
                    bias_len: b,
                });
            }
            off += w + b;
        }
        spans
    }

    /// Fingerprint over parameters and quant state; detects stale caches.
    pub fn fingerprint(&self) -> u64 {
        let params = self.layers.iter().flat_map(|l| {
            l.weight
                .iter()
                .chain(l.bias.iter())
                .flat_map(|t| t.data().iter().copied())
        });
        let alphas = self
            .layers
            .iter()
            .flat_map(|l| l.act_quant.iter().flat_map(|q| q.alphas.iter().copied()));
        fingerprint_f64(params.chain(alphas))
    }

    /// Number of classes predicted by the head (softmax-CE models).
    pub fn classes(&self) -> Option<usize> {
        match self.head {
            LossHead::SoftmaxCrossEntropy { classes } => Some(classes),
            LossHead::Quadratic { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ParamSpan {
    pub layer_index: usize,
    pub weight_offset: usize,
    pub weight_len: usize,
    pub bias_offset: usize,
    pub bias_len: usize,
}

/// He-normal initialization for a weight tensor with the given fan-in.
fn he_init(shape: &[usize], fan_in: usize, rng: &mut impl rand::Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data agree")
}

pub struct ModelBuilder {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    counts: std::collections::BTreeMap<&'static str, usize>,
}

impl ModelBuilder {
    pub fn new(input_shape: Vec<usize>) -> Self {
        ModelBuilder {
            layers: Vec::new(),
            input_shape,
            counts: Default::default(),
        }
    }

    fn next_id(&mut self, prefix: &'static str) -> String {
        let c = self.counts.entry(prefix).or_insert(0);
        *c += 1;
        format!("{prefix}{c}")
    }

    pub fn dense(mut self, in_dim: usize, out_dim: usize, rng: &mut impl rand::Rng) -> Self {
        let id = self.next_id("dense");
        let mut l = Layer::bare(id, LayerKind::Dense { in_dim, out_dim });
        l.weight = Some(he_init(&[out_dim, in_dim], in_dim, rng));
        l.bias = Some(Tensor::zeros(&[out_dim]));
        self.layers.push(l);
        self
    }

    pub fn conv2d(
        mut self,
        in_c: usize,
        out_c: usize,
        kh: usize,
        kw: usize,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let id = self.next_id("conv");
        let mut l = Layer::bare(id, LayerKind::Conv2d { in_c, out_c, kh, kw });
        l.weight = Some(he_init(&[out_c, in_c, kh, kw], in_c * kh * kw, rng));
        l.bias = Some(Tensor::zeros(&[out_c]));
        self.layers.push(l);
        self
    }

    pub fn relu(mut self) -> Self {
        let id = self.next_id("relu");
        self.layers.push(Layer::bare(id, LayerKind::Relu));
        self
    }

    pub fn maxpool(mut self) -> Self {
        let id = self.next_id("pool");
        self.layers.push(Layer::bare(id, LayerKind::MaxPool2x2));
        self
    }

    pub fn flatten(mut self) -> Self {
        let id = self.next_id("flatten");
        self.layers.push(Layer::bare(id, LayerKind::Flatten));
        self
    }

    pub fn softmax_ce(self, classes: usize) -> Result<Model> {
        Model::new(
            self.layers,
            LossHead::SoftmaxCrossEntropy { classes },
            self.input_shape,
        )
    }

    pub fn quadratic(self, matrix: Tensor) -> Result<Model> {
        Model::new(self.layers, LossHead::Quadratic { matrix }, self.input_shape)
    }
}

/// MLP-S: input → 128 → classes, dense + relu.
pub fn mlp_s(input_dim: usize, classes: usize, seed: u64) -> Model {
    let mut rng = substream(seed, "init", &[]);
    ModelBuilder::new(vec![input_dim])
        .dense(input_dim, 128, &mut rng)
        .relu()
        .dense(128, classes, &mut rng)
        .softmax_ce(classes)
        .expect("mlp-s shapes are consistent")
}

/// ConvNet-S for 1×28×28 inputs:
/// conv 1→8 3×3, relu, pool, conv 8→16 3×3, relu, pool, flatten,
/// dense 784→64, relu, dense 64→classes. 98 weight channels at 10 classes.
pub fn convnet_s(classes: usize, seed: u64) -> Model {
    let mut rng = substream(seed, "init", &[]);
    ModelBuilder::new(vec![1, 28, 28])
        .conv2d(1, 8, 3, 3, &mut rng)
        .relu()
        .maxpool()
        .conv2d(8, 16, 3, 3, &mut rng)
        .relu()
        .maxpool()
        .flatten()
        .dense(16 * 7 * 7, 64, &mut rng)
        .relu()
        .dense(64, classes, &mut rng)
        .softmax_ce(classes)
        .expect("convnet-s shapes are consistent")
}

pub fn build_named(name: &str, input_shape: &[usize], classes: usize, seed: u64) -> Result<Model> {
    match name {
        "mlp-s" => {
            if input_shape.len() != 1 {
                return Err(Error::Config(format!(
                    "mlp-s expects a flat input, got {input_shape:?}"
                )));
            }
            Ok(mlp_s(input_shape[0], classes, seed))
        }
        "convnet-s" => {
            if input_shape != [1, 28, 28] {
                return Err(Error::Config(format!(
                    "convnet-s expects [1, 28, 28] input, got {input_shape:?}"
                )));
            }
            Ok(convnet_s(classes, seed))
        }
        other => Err(Error::Config(format!("unknown model '{other}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn convnet_s_channel_structure() {
        let m = convnet_s(10, 0);
        let channels = m.weight_channels();
        assert_eq!(channels.len(), 8 + 16 + 64 + 10);
        let shapes = m.infer_shapes().unwrap();
        assert_eq!(shapes.last().unwrap(), &vec![10]);
        // flatten feeds 16*7*7 = 784 into dense1
        let flat_idx = m.layer_index("flatten1").unwrap();
        assert_eq!(shapes[flat_idx + 1], vec![784]);
    }

    #[test]
    fn flatten_unflatten_roundtrip() {
        let mut m = mlp_s(16, 10, 3);
        let flat = m.flatten_params();
        assert_eq!(flat.len(), 16 * 128 + 128 + 128 * 10 + 10);
        let mut flat2 = flat.clone();
        flat2[0] += 1.0;
        m.unflatten_params(&flat2).unwrap();
        assert_eq!(m.flatten_params(), flat2);
    }

    #[test]
    fn shape_mismatch_reports_layer() {
        let mut rng = substream(0, "init", &[]);
        let err = ModelBuilder::new(vec![4])
            .dense(5, 3, &mut rng)
            .softmax_ce(3)
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("dense1"), "{msg}");
    }

    #[test]
    fn fingerprint_changes_on_mutation() {
        let mut m = mlp_s(4, 3, 1);
        let f0 = m.fingerprint();
        m.layers[0].weight.as_mut().unwrap().data_mut()[0] += 1e-9;
        assert_ne!(f0, m.fingerprint());
    }
}
