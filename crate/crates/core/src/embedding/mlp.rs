//! Dense ReLU networks with hand-written backpropagation, and the
//! three-headed encoder used for contrastive training.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::data::{read_f64, read_u32};
use crate::error::{Error, Result};
use crate::rng::{derive_named, rng_from_seed};

/// Fully connected layer, `y = W x + b` with `W` of shape `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: DMatrix::zeros(output, input),
            bias: DVector::zeros(output),
        }
    }

    /// He-uniform weights, zero bias.
    pub fn he_uniform<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = (6.0 / input as f64).sqrt();
        Self {
            weight: DMatrix::from_fn(output, input, |_, _| rng.random_range(-bound..bound)),
            bias: DVector::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    /// Row-batched affine map: `X Wᵀ + 1 bᵀ`.
    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x * self.weight.transpose();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            col.add_scalar_mut(self.bias[j]);
        }
        out
    }
}

/// Stack of dense layers with ReLU between layers and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Per-layer activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `inputs[k]` is the (post-activation) input fed to layer `k`.
    inputs: Vec<DMatrix<f64>>,
}

/// Parameter gradients, laid out like the layers they belong to.
#[derive(Debug, Clone)]
pub struct MlpGrad {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// `sizes = [in, h1, …, out]`, He-uniform initialised.
    pub fn new<R: Rng>(sizes: &[usize], rng: &mut R) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| Dense::he_uniform(w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::output_dim)
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("network has no layers"));
        }
        for w in self.layers.windows(2) {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(Error::invalid("layer shapes do not chain"));
            }
        }
        for l in &self.layers {
            if l.bias.len() != l.output_dim() {
                return Err(Error::invalid("bias length does not match layer output"));
            }
            if l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::invalid("non-finite parameter"));
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.forward_traced(x).0
    }

    pub fn forward_traced(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, Trace) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut next = layer.apply(&cur);
            if k < last {
                next.apply(|v| *v = v.max(0.0));
            }
            inputs.push(cur);
            cur = next;
        }
        (cur, Trace { inputs })
    }

    /// Backpropagates `d_out` (gradient w.r.t. the network output); returns
    /// parameter gradients and the gradient w.r.t. the network input.
    pub fn backward(&self, trace: &Trace, d_out: &DMatrix<f64>) -> (MlpGrad, DMatrix<f64>) {
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        let mut delta = d_out.clone();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.inputs[k];
            let weight = delta.transpose() * input;
            let bias = DVector::from_iterator(
                delta.ncols(),
                delta.column_iter().map(|c| c.sum()),
            );
            grads.push(Dense { weight, bias });
            let mut d_in = &delta * &layer.weight;
            if k > 0 {
                // input[k] = relu(pre-activation of layer k-1)
                d_in.zip_apply(input, |d, a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            delta = d_in;
        }
        grads.reverse();
        (MlpGrad { layers: grads }, delta)
    }
}

impl MlpGrad {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Dense::zeros(l.input_dim(), l.output_dim()))
                .collect(),
        }
    }

    pub fn norm_squared(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weight.norm_squared() + l.bias.norm_squared())
            .sum()
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weight *= factor;
            l.bias *= factor;
        }
    }
}

/// Architecture of the contrastive encoder and its two heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub input_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub embed_dim: usize,
    pub projector_hidden: Vec<usize>,
    pub projection_dim: usize,
    pub classifier_hidden: Vec<usize>,
    pub n_classes: usize,
}

impl Architecture {
    /// Four hidden layers of width 48, 4-d embedding and projection, and
    /// single-hidden-layer (width 32) heads.
    pub fn standard(input_dim: usize, n_classes: usize) -> Self {
        Self {
            input_dim,
            encoder_hidden: vec![48; 4],
            embed_dim: 4,
            projector_hidden: vec![32],
            projection_dim: 4,
            classifier_hidden: vec![32],
            n_classes,
        }
    }

    pub fn with_embed_dim(mut self, d: usize) -> Self {
        self.embed_dim = d;
        self
    }
}

fn chain(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut v = vec![input];
    v.extend_from_slice(hidden);
    v.push(output);
    v
}

/// Encoder `f` (input → embedding), projection head `g` (embedding →
/// contrastive space) and classifier head (embedding → logits).
#[derive(Debug, Clone, PartialEq)]
pub struct MlpEncoder {
    pub encoder: Mlp,
    pub projector: Mlp,
    pub classifier: Mlp,
}

/// Outputs of one forward pass through all three networks.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub embeddings: DMatrix<f64>,
    pub projections: DMatrix<f64>,
    pub logits: DMatrix<f64>,
}

pub(crate) struct ForwardTrace {
    pub out: ForwardOutput,
    encoder: Trace,
    projector: Trace,
    classifier: Trace,
}

/// Gradients for all three networks.
#[derive(Debug, Clone)]
pub struct EncoderGrad {
    pub encoder: MlpGrad,
    pub projector: MlpGrad,
    pub classifier: MlpGrad,
}

impl MlpEncoder {
    pub fn new(arch: &Architecture, seed: u64) -> Self {
        let mut rng = rng_from_seed(derive_named(seed, "init"));
        let encoder = Mlp::new(&chain(arch.input_dim, &arch.encoder_hidden, arch.embed_dim), &mut rng);
        let projector = Mlp::new(
            &chain(arch.embed_dim, &arch.projector_hidden, arch.projection_dim),
            &mut rng,
        );
        let classifier = Mlp::new(
            &chain(arch.embed_dim, &arch.classifier_hidden, arch.n_classes),
            &mut rng,
        );
        Self {
            encoder,
            projector,
            classifier,
        }
    }

    pub fn from_parts(encoder: Mlp, projector: Mlp, classifier: Mlp) -> Result<Self> {
        let enc = Self {
            encoder,
            projector,
            classifier,
        };
        enc.validate()?;
        Ok(enc)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.projector.validate()?;
        self.classifier.validate()?;
        let d = self.embed_dim();
        if self.projector.input_dim() != d || self.classifier.input_dim() != d {
            return Err(Error::invalid("heads do not consume the embedding dimension"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn n_classes(&self) -> usize {
        self.classifier.output_dim()
    }

    pub fn n_params(&self) -> usize {
        self.encoder.n_params() + self.projector.n_params() + self.classifier.n_params()
    }

    fn check_input(&self, batch: &DMatrix<f64>) -> Result<()> {
        if batch.ncols() != self.input_dim() {
            return Err(Error::invalid(format!(
                "batch has {} columns, encoder expects {}",
                batch.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Embeddings `h = f(x)`, projections `z = g(h)` (unnormalised) and logits.
    pub fn forward(&self, batch: &DMatrix<f64>) -> Result<ForwardOutput> {
        self.check_input(batch)?;
        let embeddings = self.encoder.forward(batch);
        let projections = self.projector.forward(&embeddings);
        let logits = self.classifier.forward(&embeddings);
        Ok(ForwardOutput {
            embeddings,
            projections,
            logits,
        })
    }

    /// Embeddings only; heads are not evaluated.
    pub fn embed(&self, batch: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_input(batch)?;
        Ok(self.encoder.forward(batch))
    }

    pub(crate) fn forward_traced(&self, batch: &DMatrix<f64>) -> Result<ForwardTrace> {
        self.check_input(batch)?;
        let (embeddings, encoder) = self.encoder.forward_traced(batch);
        let (projections, projector) = self.projector.forward_traced(&embeddings);
        let (logits, classifier) = self.classifier.forward_traced(&embeddings);
        Ok(ForwardTrace {
            out: ForwardOutput {
                embeddings,
                projections,
                logits,
            },
            encoder,
            projector,
            classifier,
        })
    }

    pub(crate) fn backward(
        &self,
        trace: &ForwardTrace,
        d_projections: &DMatrix<f64>,
        d_logits: &DMatrix<f64>,
    ) -> EncoderGrad {
        let (projector, d_h1) = self.projector.backward(&trace.projector, d_projections);
        let (classifier, d_h2) = self.classifier.backward(&trace.classifier, d_logits);
        let (encoder, _) = self.encoder.backward(&trace.encoder, &(d_h1 + d_h2));
        EncoderGrad {
            encoder,
            projector,
            classifier,
        }
    }

    fn sections(&self) -> [&Mlp; 3] {
        [&self.encoder, &self.projector, &self.classifier]
    }

    /// Binary checkpoint: `NVEN`, version, then for each of encoder,
    /// projector and classifier a layer count followed by
    /// `{rows, cols, weights row-major, biases}` per layer.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for net in self.sections() {
            w.write_all(&(net.layers.len() as u32).to_le_bytes())?;
            for l in &net.layers {
                w.write_all(&(l.weight.nrows() as u32).to_le_bytes())?;
                w.write_all(&(l.weight.ncols() as u32).to_le_bytes())?;
                for i in 0..l.weight.nrows() {
                    for j in 0..l.weight.ncols() {
                        w.write_all(&l.weight[(i, j)].to_le_bytes())?;
                    }
                }
                for b in l.bias.iter() {
                    w.write_all(&b.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not an NVEN checkpoint".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut nets = Vec::with_capacity(3);
        for _ in 0..3 {
            let n_layers = read_u32(&mut r)? as usize;
            let mut layers = Vec::with_capacity(n_layers);
            for _ in 0..n_layers {
                let rows = read_u32(&mut r)? as usize;
                let cols = read_u32(&mut r)? as usize;
                let mut flat = Vec::with_capacity(rows * cols);
                for _ in 0..rows * cols {
                    flat.push(read_f64(&mut r)?);
                }
                let mut bias = Vec::with_capacity(rows);
                for _ in 0..rows {
                    bias.push(read_f64(&mut r)?);
                }
                layers.push(Dense {
                    weight: DMatrix::from_row_slice(rows, cols, &flat),
                    bias: DVector::from_vec(bias),
                });
            }
            nets.push(Mlp { layers });
        }
        let classifier = nets.pop().unwrap_or(Mlp { layers: vec![] });
        let projector = nets.pop().unwrap_or(Mlp { layers: vec![] });
        let encoder = nets.pop().unwrap_or(Mlp { layers: vec![] });
        Self::from_parts(encoder, projector, classifier)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"NVEN";
const CHECKPOINT_VERSION: u32 = 1;

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_batch(n: usize, d: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, d, |i, j| ((i * 7 + j * 3) as f64 * 0.37).sin())
    }

    #[test]
    fn zero_network_embeds_to_zero() {
        let arch = Architecture::standard(3, 2);
        let mut enc = MlpEncoder::new(&arch, 1);
        for l in enc.encoder.layers.iter_mut() {
            l.weight.fill(0.0);
        }
        let out = enc.forward(&sample_batch(5, 3)).unwrap();
        assert!(out.embeddings.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = Mlp {
            layers: vec![Dense {
                weight: DMatrix::identity(3, 3),
                bias: DVector::zeros(3),
            }],
        };
        let x = sample_batch(4, 3);
        assert_eq!(net.forward(&x), x);
    }

    #[test]
    fn duplicated_rows_stay_duplicated() {
        let enc = MlpEncoder::new(&Architecture::standard(3, 4), 2);
        let mut x = sample_batch(4, 3);
        let row = x.row(1).clone_owned();
        x.row_mut(3).copy_from(&row);
        let out = enc.forward(&x).unwrap();
        for m in [&out.embeddings, &out.projections, &out.logits] {
            assert_eq!(m.row(1), m.row(3));
        }
        assert!(enc.forward(&sample_batch(2, 5)).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = rng_from_seed(4);
        let net = Mlp::new(&[3, 5, 4, 2], &mut rng);
        let x = sample_batch(6, 3);
        // scalar objective: sum of output * fixed weights
        let c = DMatrix::from_fn(6, 2, |i, j| 0.1 * (i as f64) - 0.2 * (j as f64) + 0.3);
        let objective = |n: &Mlp| n.forward(&x).component_mul(&c).sum();
        let (_, trace) = net.forward_traced(&x);
        let (grad, _) = net.backward(&trace, &c);
        let h = 1e-6;
        for (k, layer) in net.layers.iter().enumerate() {
            for idx in 0..layer.weight.len() {
                let mut plus = net.clone();
                plus.layers[k].weight[idx] += h;
                let mut minus = net.clone();
                minus.layers[k].weight[idx] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                assert!((fd - grad.layers[k].weight[idx]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let enc = MlpEncoder::new(&Architecture::standard(7, 3).with_embed_dim(5), 9);
        let mut buf = Vec::new();
        enc.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"NVEN");
        let back = MlpEncoder::read_from(&buf[..]).unwrap();
        assert_eq!(back, enc);
        assert_eq!(back.embed_dim(), 5);
        buf[0] = b'Z';
        assert!(MlpEncoder::read_from(&buf[..]).is_err());
    }
}
