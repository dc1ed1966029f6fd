//! The anomaly-score classifier: fully connected layers with batch norm,
//! ReLU and inverted dropout, ending in a single sigmoid unit.
//!
//! Hidden layer k computes `dropout(relu(bn(a · W_kᵀ + b_k)))`; the output
//! layer is `sigmoid(a · W_outᵀ + b_out)`. Everything is generic over
//! `f32`/`f64` so gradient checks can run in double precision.

mod checkpoint;
pub mod layers;

use std::fmt::Debug;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, NdFloat};
use num_traits::FromPrimitive;
use rand::distr::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use layers::BatchNormCache;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_expecting, save_checkpoint,
    MILC_MAGIC, MILC_VERSION,
};

/// Working precision of the network.
pub trait Real: NdFloat + FromPrimitive + Debug {}
impl Real for f32 {}
impl Real for f64 {}

pub const DEFAULT_WIDTHS: [usize; 6] = [528, 512, 256, 128, 32, 1];

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    /// Input width first, then every layer's output width; must end in 1.
    pub widths: Vec<usize>,
    pub dropout: f32,
    pub bn_momentum: f32,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            widths: DEFAULT_WIDTHS.to_vec(),
            dropout: 0.6,
            bn_momentum: 0.1,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Config("need at least input and output widths".into()));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config(format!("zero width in {:?}", self.widths)));
        }
        if *self.widths.last().unwrap() != 1 {
            return Err(Error::Config("output width must be 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::Config(format!(
                "bn_momentum must be in (0, 1], got {}",
                self.bn_momentum
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLayer<F> {
    /// (out, in)
    pub weight: Array2<F>,
    pub bias: Array1<F>,
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
}

#[derive(Debug, Clone)]
pub struct ClassifierParams<F> {
    pub widths: Vec<usize>,
    pub hidden: Vec<HiddenLayer<F>>,
    /// (1, last hidden width)
    pub out_weight: Array2<F>,
    pub out_bias: Array1<F>,
    pub dropout: f32,
    pub bn_momentum: f32,
    /// Rows per batch-norm batch used in training; 0 if unrecorded.
    pub bn_group: u32,
    version: u64,
}

impl<F: PartialEq> PartialEq for ClassifierParams<F> {
    fn eq(&self, other: &Self) -> bool {
        self.widths == other.widths
            && self.hidden == other.hidden
            && self.out_weight == other.out_weight
            && self.out_bias == other.out_bias
            && self.dropout.to_bits() == other.dropout.to_bits()
            && self.bn_momentum.to_bits() == other.bn_momentum.to_bits()
            && self.bn_group == other.bn_group
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One dropout mask per hidden layer, each shaped (batch, width).
#[derive(Debug, Clone)]
pub struct DropoutMasks<F>(pub Vec<Array2<F>>);

struct HiddenTape<F> {
    input: Array2<F>,
    bn: BatchNormCache<F>,
    relu_out: Array2<F>,
    mask: Option<Array2<F>>,
}

/// Everything backward needs from one forward call.
pub struct ForwardTape<F> {
    mode: Mode,
    version: u64,
    hidden: Vec<HiddenTape<F>>,
    last_input: Array2<F>,
    /// Unclamped sigmoid outputs.
    sigmoid: Array1<F>,
}

impl<F: Real> ForwardTape<F> {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn batch_size(&self) -> usize {
        self.last_input.nrows()
    }

    /// (batch mean, biased batch variance) per hidden layer, TRAIN tapes only.
    pub fn batch_stats(&self) -> impl Iterator<Item = Option<&(Array1<F>, Array1<F>)>> {
        self.hidden.iter().map(|h| h.bn.batch_stats.as_ref())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
}

/// Gradients for every trainable tensor, laid out like [`ClassifierParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads<F> {
    pub hidden: Vec<LayerGrads<F>>,
    pub out_weight: Array2<F>,
    pub out_bias: Array1<F>,
}

impl<F: Real> ParamGrads<F> {
    pub fn zeros_like(params: &ClassifierParams<F>) -> Self {
        ParamGrads {
            hidden: params
                .hidden
                .iter()
                .map(|h| LayerGrads {
                    weight: Array2::zeros(h.weight.raw_dim()),
                    bias: Array1::zeros(h.bias.len()),
                    gamma: Array1::zeros(h.gamma.len()),
                    beta: Array1::zeros(h.beta.len()),
                })
                .collect(),
            out_weight: Array2::zeros(params.out_weight.raw_dim()),
            out_bias: Array1::zeros(1),
        }
    }

    pub fn tensors(&self) -> Vec<&[F]> {
        let mut out = Vec::with_capacity(self.hidden.len() * 4 + 2);
        for h in &self.hidden {
            out.push(h.weight.as_slice().unwrap());
            out.push(h.bias.as_slice().unwrap());
            out.push(h.gamma.as_slice().unwrap());
            out.push(h.beta.as_slice().unwrap());
        }
        out.push(self.out_weight.as_slice().unwrap());
        out.push(self.out_bias.as_slice().unwrap());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        let mut out = Vec::with_capacity(self.hidden.len() * 4 + 2);
        for h in &mut self.hidden {
            out.push(h.weight.as_slice_mut().unwrap());
            out.push(h.bias.as_slice_mut().unwrap());
            out.push(h.gamma.as_slice_mut().unwrap());
            out.push(h.beta.as_slice_mut().unwrap());
        }
        out.push(self.out_weight.as_slice_mut().unwrap());
        out.push(self.out_bias.as_slice_mut().unwrap());
        out
    }

    pub fn add_assign(&mut self, other: &ParamGrads<F>) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: F) {
        for t in self.tensors_mut() {
            for x in t {
                *x *= factor;
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|&v| v == F::zero()))
    }
}

/// Xavier-uniform weights, zero biases, identity batch norm. Pure in `seed`.
pub fn init<F: Real>(seed: u64, config: &NetConfig) -> Result<ClassifierParams<F>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xavier = |fan_out: usize, fan_in: usize| -> Array2<F> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
        Array2::from_shape_simple_fn((fan_out, fan_in), || F::from_f64(dist.sample(&mut rng)).unwrap())
    };
    let w = &config.widths;
    let n_hidden = w.len() - 2;
    let hidden = (0..n_hidden)
        .map(|k| HiddenLayer {
            weight: xavier(w[k + 1], w[k]),
            bias: Array1::zeros(w[k + 1]),
            gamma: Array1::ones(w[k + 1]),
            beta: Array1::zeros(w[k + 1]),
            running_mean: Array1::zeros(w[k + 1]),
            running_var: Array1::ones(w[k + 1]),
        })
        .collect();
    let out_weight = xavier(1, w[n_hidden]);
    Ok(ClassifierParams {
        widths: w.clone(),
        hidden,
        out_weight,
        out_bias: Array1::zeros(1),
        dropout: config.dropout,
        bn_momentum: config.bn_momentum,
        bn_group: 0,
        version: 0,
    })
}

impl<F: Real> ClassifierParams<F> {
    /// A network whose weights and biases are all zero; it scores 0.5 everywhere.
    pub fn zeroed(config: &NetConfig) -> Result<Self> {
        let mut p = init::<F>(0, config)?;
        for h in &mut p.hidden {
            h.weight.fill(F::zero());
        }
        p.out_weight.fill(F::zero());
        Ok(p)
    }

    pub fn config(&self) -> NetConfig {
        NetConfig {
            widths: self.widths.clone(),
            dropout: self.dropout,
            bn_momentum: self.bn_momentum,
        }
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    /// Generation counter of the trainable parameters; bumps on every update.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn cast<G: Real>(&self) -> ClassifierParams<G> {
        let c1 = |a: &Array1<F>| a.mapv(|v| G::from_f64(v.to_f64().unwrap()).unwrap());
        let c2 = |a: &Array2<F>| a.mapv(|v| G::from_f64(v.to_f64().unwrap()).unwrap());
        ClassifierParams {
            widths: self.widths.clone(),
            hidden: self
                .hidden
                .iter()
                .map(|h| HiddenLayer {
                    weight: c2(&h.weight),
                    bias: c1(&h.bias),
                    gamma: c1(&h.gamma),
                    beta: c1(&h.beta),
                    running_mean: c1(&h.running_mean),
                    running_var: c1(&h.running_var),
                })
                .collect(),
            out_weight: c2(&self.out_weight),
            out_bias: c1(&self.out_bias),
            dropout: self.dropout,
            bn_momentum: self.bn_momentum,
            bn_group: self.bn_group,
            version: self.version,
        }
    }

    /// All stored tensors in checkpoint order.
    pub fn tensors(&self) -> Vec<&[F]> {
        let mut out = Vec::with_capacity(self.hidden.len() * 6 + 2);
        for h in &self.hidden {
            out.push(h.weight.as_slice().unwrap());
            out.push(h.bias.as_slice().unwrap());
            out.push(h.gamma.as_slice().unwrap());
            out.push(h.beta.as_slice().unwrap());
            out.push(h.running_mean.as_slice().unwrap());
            out.push(h.running_var.as_slice().unwrap());
        }
        out.push(self.out_weight.as_slice().unwrap());
        out.push(self.out_bias.as_slice().unwrap());
        out
    }

    /// Trainable tensors in [`ParamGrads::tensors`] order. Taking them counts
    /// as an update: outstanding tapes become stale.
    pub fn trainable_mut(&mut self) -> Vec<&mut [F]> {
        self.version += 1;
        let mut out = Vec::with_capacity(self.hidden.len() * 4 + 2);
        for h in &mut self.hidden {
            out.push(h.weight.as_slice_mut().unwrap());
            out.push(h.bias.as_slice_mut().unwrap());
            out.push(h.gamma.as_slice_mut().unwrap());
            out.push(h.beta.as_slice_mut().unwrap());
        }
        out.push(self.out_weight.as_slice_mut().unwrap());
        out.push(self.out_bias.as_slice_mut().unwrap());
        out
    }

    pub fn sample_masks<R: Rng + ?Sized>(&self, rng: &mut R, batch: usize) -> DropoutMasks<F> {
        DropoutMasks(
            self.widths[1..self.widths.len() - 1]
                .iter()
                .map(|&w| layers::dropout_mask(rng, (batch, w), self.dropout as f64))
                .collect(),
        )
    }

    /// Pure forward pass. TRAIN uses batch statistics and `masks` (B >= 2);
    /// EVAL uses running statistics and no dropout. Running statistics are
    /// not touched; see [`ClassifierParams::commit_running_stats`].
    pub fn forward(
        &self,
        x: ArrayView2<F>,
        mode: Mode,
        masks: Option<&DropoutMasks<F>>,
    ) -> Result<(Array1<F>, ForwardTape<F>)> {
        let batch = x.nrows();
        if x.ncols() != self.input_width() {
            return Err(Error::Shape(format!(
                "input has {} features, network expects {}",
                x.ncols(),
                self.input_width()
            )));
        }
        if batch == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        if mode == Mode::Train && batch < 2 {
            return Err(Error::Shape("TRAIN mode needs a batch of at least 2".into()));
        }
        if let Some(m) = masks {
            let ok = m.0.len() == self.hidden.len()
                && m.0
                    .iter()
                    .zip(&self.hidden)
                    .all(|(mask, h)| mask.dim() == (batch, h.bias.len()));
            if !ok {
                return Err(Error::Shape("dropout masks do not match batch/widths".into()));
            }
        }
        let check = |a: &Array2<F>, layer: usize| -> Result<()> {
            if a.iter().all(|v| v.is_finite()) {
                Ok(())
            } else {
                Err(Error::NonFiniteActivation { layer })
            }
        };

        let mut tapes = Vec::with_capacity(self.hidden.len());
        let mut a = x.to_owned();
        for (k, layer) in self.hidden.iter().enumerate() {
            let z = layers::affine_forward(a.view(), layer.weight.view(), layer.bias.view());
            let (y, bn) = match mode {
                Mode::Train => layers::batchnorm_train(z.view(), layer.gamma.view(), layer.beta.view()),
                Mode::Eval => layers::batchnorm_eval(
                    z.view(),
                    layer.gamma.view(),
                    layer.beta.view(),
                    layer.running_mean.view(),
                    layer.running_var.view(),
                ),
            };
            let relu_out = layers::relu(y.view());
            let mask = match mode {
                Mode::Train => masks.map(|m| m.0[k].clone()),
                Mode::Eval => None,
            };
            let next = match &mask {
                Some(m) => &relu_out * m,
                None => relu_out.clone(),
            };
            check(&next, k + 1)?;
            tapes.push(HiddenTape {
                input: std::mem::replace(&mut a, next),
                bn,
                relu_out,
                mask,
            });
        }
        let z = layers::affine_forward(a.view(), self.out_weight.view(), self.out_bias.view());
        check(&z, self.hidden.len() + 1)?;
        let sigmoid: Array1<F> = z.column(0).mapv(layers::sigmoid);
        let lo = F::min_positive_value();
        let hi = F::one() - F::epsilon() / F::from_f64(2.0).unwrap();
        let scores = sigmoid.mapv(|s| s.max(lo).min(hi));
        Ok((
            scores,
            ForwardTape {
                mode,
                version: self.version,
                hidden: tapes,
                last_input: a,
                sigmoid,
            },
        ))
    }

    /// Folds a TRAIN tape's batch statistics into the running estimates:
    /// `running = (1 - m) running + m batch`, variance unbiased and floored.
    pub fn commit_running_stats(&mut self, tape: &ForwardTape<F>) {
        let m = F::from_f32(self.bn_momentum).unwrap();
        let b = tape.batch_size();
        let unbias = if b > 1 {
            F::from_usize(b).unwrap() / F::from_usize(b - 1).unwrap()
        } else {
            F::one()
        };
        let floor = F::from_f64(layers::BN_EPS).unwrap();
        for (layer, stats) in self.hidden.iter_mut().zip(tape.batch_stats()) {
            if let Some((mean, var)) = stats {
                layer.running_mean.zip_mut_with(mean, |r, &v| *r = (F::one() - m) * *r + m * v);
                layer
                    .running_var
                    .zip_mut_with(var, |r, &v| *r = ((F::one() - m) * *r + m * v * unbias).max(floor));
            }
        }
    }

    /// TRAIN forward that samples its own masks and updates running statistics.
    pub fn forward_train<R: Rng + ?Sized>(
        &mut self,
        x: ArrayView2<F>,
        rng: &mut R,
    ) -> Result<(Array1<F>, ForwardTape<F>)> {
        let masks = self.sample_masks(rng, x.nrows());
        let (scores, tape) = self.forward(x, Mode::Train, Some(&masks))?;
        self.commit_running_stats(&tape);
        Ok((scores, tape))
    }

    /// EVAL-mode scores; no state is touched.
    pub fn predict(&self, x: ArrayView2<F>) -> Result<Array1<F>> {
        Ok(self.forward(x, Mode::Eval, None)?.0)
    }

    /// Reverse-mode gradients of `Σ upstream[i] · score[i]` with respect to
    /// every trainable parameter and the input batch.
    pub fn backward(&self, tape: ForwardTape<F>, upstream: ArrayView1<F>) -> Result<(ParamGrads<F>, Array2<F>)> {
        let (g, dx) = self.backward_inner(tape, upstream, true)?;
        Ok((g, dx.expect("input gradient requested")))
    }

    /// [`ClassifierParams::backward`] without the input-batch gradient.
    pub fn backward_params(&self, tape: ForwardTape<F>, upstream: ArrayView1<F>) -> Result<ParamGrads<F>> {
        Ok(self.backward_inner(tape, upstream, false)?.0)
    }

    fn backward_inner(
        &self,
        tape: ForwardTape<F>,
        upstream: ArrayView1<F>,
        want_dx: bool,
    ) -> Result<(ParamGrads<F>, Option<Array2<F>>)> {
        if tape.version != self.version {
            return Err(Error::StaleTape {
                tape: tape.version,
                params: self.version,
            });
        }
        if upstream.len() != tape.batch_size() {
            return Err(Error::Shape(format!(
                "upstream gradient has {} entries for a batch of {}",
                upstream.len(),
                tape.batch_size()
            )));
        }
        let dz: Array1<F> = upstream.to_owned() * &tape.sigmoid.mapv(|s| s * (F::one() - s));
        let dz = dz.insert_axis(ndarray::Axis(1));
        let out = layers::affine_backward(tape.last_input.view(), self.out_weight.view(), dz.view());
        let mut da = out.dx;
        let mut hidden_grads = Vec::with_capacity(self.hidden.len());
        for (layer, t) in self.hidden.iter().zip(tape.hidden).rev() {
            let dr = match &t.mask {
                Some(m) => da * m,
                None => da,
            };
            let dy = layers::relu_backward(dr.view(), t.relu_out.view());
            let (dzk, dgamma, dbeta) = layers::batchnorm_backward(dy.view(), &t.bn, layer.gamma.view());
            let first = hidden_grads.len() + 1 == self.hidden.len();
            if first && !want_dx {
                hidden_grads.push(LayerGrads {
                    weight: dzk.t().dot(&t.input),
                    bias: dzk.sum_axis(ndarray::Axis(0)),
                    gamma: dgamma,
                    beta: dbeta,
                });
                da = Array2::zeros((0, 0));
                continue;
            }
            let aff = layers::affine_backward(t.input.view(), layer.weight.view(), dzk.view());
            hidden_grads.push(LayerGrads {
                weight: aff.dw,
                bias: aff.db,
                gamma: dgamma,
                beta: dbeta,
            });
            da = aff.dx;
        }
        hidden_grads.reverse();
        let grads = ParamGrads {
            hidden: hidden_grads,
            out_weight: out.dw,
            out_bias: out.db,
        };
        Ok((grads, want_dx.then_some(da)))
    }
}
