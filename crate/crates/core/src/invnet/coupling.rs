//! Additive coupling over channel halves.
//!
//! Forward: `(x1, x2) → (x2, x1 + F(x2))`; inverse: `(y1, y2) → (y2 − F(y1), y1)`,
//! with `F = conv3×3 → relu → conv3×3`. The backward passes rebuild the
//! block input from its output instead of storing activations.

use super::NetError;
use crate::numeric::{ops, Parameter, RngStream, Tape, Tensor, Var};

pub const PARAMS_PER_BLOCK: usize = 4;

#[derive(Debug, Clone)]
pub struct CouplingBlock {
    conv1_weight: Parameter,
    conv1_bias: Parameter,
    conv2_weight: Parameter,
    conv2_bias: Parameter,
}

/// How to draw the initial residual weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// He-normal first convolution, zero second convolution: the block starts
    /// as a pure channel swap.
    NearIdentity,
    /// Both convolutions and biases random.
    Random { bias_std: f64 },
}

pub(crate) fn split_halves(x: &Tensor) -> Result<(Tensor, Tensor), NetError> {
    let &[c, h, w] = x.shape() else {
        return Err(NetError::OddChannels(x.shape().to_vec()));
    };
    if c % 2 != 0 {
        return Err(NetError::OddChannels(x.shape().to_vec()));
    }
    let half = c / 2 * h * w;
    let (a, b) = x.data().split_at(half);
    Ok((
        Tensor::new(&[c / 2, h, w], a.to_vec())?,
        Tensor::new(&[c / 2, h, w], b.to_vec())?,
    ))
}

pub(crate) fn join_halves(a: &Tensor, b: &Tensor) -> Result<Tensor, NetError> {
    b.expect_shape("coupling halves", a.shape())?;
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let mut data = Vec::with_capacity(a.len() * 2);
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Ok(Tensor::new(&[2 * c, h, w], data)?)
}

fn normal_tensor(rng: &mut RngStream, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, rng.normals(n).into_iter().map(|v| v * std).collect()).expect("sized by shape")
}

/// Running fingerprint of relu activity, used to detect kinks between
/// nearby evaluations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Signature(pub u64);

impl Signature {
    pub fn absorb_signs(&mut self, values: &[f64]) {
        for chunk in values.chunks(64) {
            let bits = chunk
                .iter()
                .enumerate()
                .fold(0u64, |acc, (k, &v)| acc | (u64::from(v > 0.0) << k));
            self.0 = crate::numeric::mix64(self.0 ^ bits).wrapping_add(chunk.len() as u64);
        }
    }
}

impl CouplingBlock {
    /// Block over `channels` channels (even) with `hidden` channels inside F.
    pub fn new(channels: usize, hidden: usize, init: Init, rng: &mut RngStream) -> Self {
        assert!(channels.is_multiple_of(2), "coupling needs an even channel count");
        let half = channels / 2;
        let he = (2.0 / (half * 9) as f64).sqrt();
        let conv1_weight = normal_tensor(rng, &[hidden, half, 3, 3], he);
        let (conv1_bias, conv2_weight, conv2_bias) = match init {
            Init::NearIdentity => (
                Tensor::zeros(&[hidden]),
                Tensor::zeros(&[half, hidden, 3, 3]),
                Tensor::zeros(&[half]),
            ),
            Init::Random { bias_std } => (
                normal_tensor(rng, &[hidden], bias_std),
                normal_tensor(rng, &[half, hidden, 3, 3], (1.0 / (hidden * 9) as f64).sqrt()),
                normal_tensor(rng, &[half], bias_std),
            ),
        };
        Self {
            conv1_weight: Parameter::new(conv1_weight),
            conv1_bias: Parameter::new(conv1_bias),
            conv2_weight: Parameter::new(conv2_weight),
            conv2_bias: Parameter::new(conv2_bias),
        }
    }

    /// Block whose residual function is identically zero.
    pub fn zeroed(channels: usize, hidden: usize) -> Self {
        let half = channels / 2;
        Self {
            conv1_weight: Parameter::new(Tensor::zeros(&[hidden, half, 3, 3])),
            conv1_bias: Parameter::new(Tensor::zeros(&[hidden])),
            conv2_weight: Parameter::new(Tensor::zeros(&[half, hidden, 3, 3])),
            conv2_bias: Parameter::new(Tensor::zeros(&[half])),
        }
    }

    pub fn channels(&self) -> usize {
        2 * self.conv1_weight.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.conv1_weight.shape()[0]
    }

    /// Parameters in a fixed order: conv1 weight, conv1 bias, conv2 weight, conv2 bias.
    pub fn parameters(&self) -> [&Parameter; PARAMS_PER_BLOCK] {
        [&self.conv1_weight, &self.conv1_bias, &self.conv2_weight, &self.conv2_bias]
    }

    pub fn parameters_mut(&mut self) -> [&mut Parameter; PARAMS_PER_BLOCK] {
        [
            &mut self.conv1_weight,
            &mut self.conv1_bias,
            &mut self.conv2_weight,
            &mut self.conv2_bias,
        ]
    }

    pub const PARAM_NAMES: [&'static str; PARAMS_PER_BLOCK] =
        ["conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias"];

    fn residual(&self, x2: &Tensor, signature: Option<&mut Signature>) -> Result<Tensor, NetError> {
        let pre = ops::conv2d(x2, &self.conv1_weight.value, &self.conv1_bias.value)?;
        if let Some(sig) = signature {
            sig.absorb_signs(pre.data());
        }
        let hidden = ops::relu(&pre);
        Ok(ops::conv2d(&hidden, &self.conv2_weight.value, &self.conv2_bias.value)?)
    }

    /// Records F(x2) on a fresh tape; returns the tape, the input handle, the
    /// output handle and the parameter handles.
    fn residual_recorded(&self, x2: Tensor) -> Result<(Tape<'_>, Var, Var, [Var; PARAMS_PER_BLOCK]), NetError> {
        let mut tape = Tape::new();
        let input = tape.leaf(x2);
        let params = self.parameters().map(|p| tape.leaf_ref(&p.value));
        let pre = tape.conv2d(input, params[0], params[1])?;
        let hidden = tape.relu(pre)?;
        let out = tape.conv2d(hidden, params[2], params[3])?;
        Ok((tape, input, out, params))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NetError> {
        self.forward_signed(x, None)
    }

    pub(crate) fn forward_signed(&self, x: &Tensor, sig: Option<&mut Signature>) -> Result<Tensor, NetError> {
        self.check_channels(x)?;
        let (x1, x2) = split_halves(x)?;
        let f = self.residual(&x2, sig)?;
        join_halves(&x2, &ops::add(&x1, &f)?)
    }

    pub fn inverse(&self, y: &Tensor) -> Result<Tensor, NetError> {
        self.inverse_signed(y, None)
    }

    pub(crate) fn inverse_signed(&self, y: &Tensor, sig: Option<&mut Signature>) -> Result<Tensor, NetError> {
        self.check_channels(y)?;
        let (y1, y2) = split_halves(y)?;
        let f = self.residual(&y1, sig)?;
        join_halves(&ops::sub(&y2, &f)?, &y1)
    }

    fn check_channels(&self, x: &Tensor) -> Result<(), NetError> {
        match x.shape() {
            [c, _, _] if *c == self.channels() => Ok(()),
            _ => Err(NetError::ChannelMismatch {
                expected: self.channels(),
                found: x.shape().to_vec(),
            }),
        }
    }

    /// Backward through [`forward`](Self::forward) given its output `y` and
    /// `dL/dy`. Returns the reconstructed input and `dL/dx`, and adds the
    /// parameter gradients to `grads` (in [`parameters`](Self::parameters) order).
    pub fn backward_forward(&self, y: &Tensor, grad_y: &Tensor, grads: &mut [Tensor]) -> Result<(Tensor, Tensor), NetError> {
        self.check_channels(y)?;
        let (y1, y2) = split_halves(y)?;
        let (g1, g2) = split_halves(grad_y)?;
        let (tape, input, out, params) = self.residual_recorded(y1)?;
        let x1 = ops::sub(&y2, tape.value(out)?)?;
        let mut tg = tape.backward(out, &g2)?;
        accumulate(grads, &mut tg, &params)?;
        let gf = tg.take(input).expect("input feeds the residual");
        let x2 = tape.value(input)?;
        Ok((join_halves(&x1, x2)?, join_halves(&g2, &ops::add(&g1, &gf)?)?))
    }

    /// Backward through [`inverse`](Self::inverse) given its output `x` and
    /// `dL/dx`. Returns the reconstructed latent-side input and its gradient.
    pub fn backward_inverse(&self, x: &Tensor, grad_x: &Tensor, grads: &mut [Tensor]) -> Result<(Tensor, Tensor), NetError> {
        self.check_channels(x)?;
        let (x1, x2) = split_halves(x)?;
        let (h1, h2) = split_halves(grad_x)?;
        let (tape, input, out, params) = self.residual_recorded(x2)?;
        let y2 = ops::add(&x1, tape.value(out)?)?;
        let mut tg = tape.backward(out, &ops::scale(&h1, -1.0))?;
        accumulate(grads, &mut tg, &params)?;
        let gf = tg.take(input).expect("input feeds the residual");
        let y1 = tape.value(input)?;
        Ok((join_halves(y1, &y2)?, join_halves(&ops::add(&h2, &gf)?, &h1)?))
    }
}

fn accumulate(
    grads: &mut [Tensor],
    tg: &mut crate::numeric::Gradients,
    params: &[Var; PARAMS_PER_BLOCK],
) -> Result<(), NetError> {
    assert_eq!(grads.len(), PARAMS_PER_BLOCK);
    for (acc, &v) in grads.iter_mut().zip(params) {
        if let Some(g) = tg.take(v) {
            acc.add_assign(&g)?;
        }
    }
    Ok(())
}
