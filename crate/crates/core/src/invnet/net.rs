use super::coupling::{CouplingBlock, Init, Signature, PARAMS_PER_BLOCK};
use super::psi::{psi_forward, psi_inverse};
use super::NetError;
use crate::chemdata::{CELLS, CHANNEL_SHAPE};
use crate::numeric::{Parameter, RngStream, Tensor};

/// Number of space-to-depth stages: 16×16 → 8×8 → 4×4 → 2×2 → 1×1.
pub const STAGES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    pub blocks_per_stage: usize,
    /// Upper bound on the hidden width of each residual function; the width
    /// is otherwise half the stage's channel count.
    pub hidden_cap: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            blocks_per_stage: 2,
            hidden_cap: 64,
        }
    }
}

impl NetConfig {
    /// Channel count inside stage `s`.
    pub fn stage_channels(s: usize) -> usize {
        CHANNEL_SHAPE[0] * 4usize.pow(s as u32 + 1)
    }

    pub fn stage_hidden(&self, s: usize) -> usize {
        (Self::stage_channels(s) / 2).min(self.hidden_cap)
    }
}

/// Bijection between the `[4, 16, 16]` bond channels and a length-1024 latent.
#[derive(Debug, Clone)]
pub struct InvertibleNet {
    config: NetConfig,
    blocks: Vec<CouplingBlock>,
}

/// Gradients for every parameter of a net, in [`InvertibleNet::parameters`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads(Vec<Tensor>);

impl ParamGrads {
    pub fn zeros_like(net: &InvertibleNet) -> Self {
        Self(net.parameters().map(|p| Tensor::zeros(p.shape())).collect())
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.0
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.0
    }

    pub fn add_assign(&mut self, other: &ParamGrads) -> Result<(), NetError> {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.0 {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(Tensor::is_finite)
    }

    fn block_mut(&mut self, k: usize) -> &mut [Tensor] {
        &mut self.0[k * PARAMS_PER_BLOCK..(k + 1) * PARAMS_PER_BLOCK]
    }
}

fn build(config: NetConfig, mut make: impl FnMut(usize, usize) -> CouplingBlock) -> InvertibleNet {
    let blocks = (0..STAGES)
        .flat_map(|s| std::iter::repeat_n(s, config.blocks_per_stage))
        .map(|s| make(NetConfig::stage_channels(s), config.stage_hidden(s)))
        .collect();
    let mut net = InvertibleNet { config, blocks };
    net.snap_to_f32();
    net
}

impl InvertibleNet {
    /// Training initialisation: every block starts as a channel swap.
    pub fn new(config: NetConfig, rng: &mut RngStream) -> Self {
        build(config, |c, h| CouplingBlock::new(c, h, Init::NearIdentity, rng))
    }

    /// All weights and biases random.
    pub fn random(config: NetConfig, rng: &mut RngStream) -> Self {
        build(config, |c, h| CouplingBlock::new(c, h, Init::Random { bias_std: 0.1 }, rng))
    }

    pub fn zeroed(config: NetConfig) -> Self {
        build(config, CouplingBlock::zeroed)
    }

    pub fn config(&self) -> NetConfig {
        self.config
    }

    pub fn blocks(&self) -> &[CouplingBlock] {
        &self.blocks
    }

    pub fn parameters(&self) -> impl Iterator<Item = &Parameter> {
        self.blocks.iter().flat_map(|b| b.parameters())
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.blocks.iter_mut().flat_map(|b| b.parameters_mut())
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().map(|p| p.value.len()).sum()
    }

    /// Dotted names such as `stage2.block1.conv1.weight`, in parameter order.
    pub fn parameter_names(&self) -> Vec<String> {
        let bps = self.config.blocks_per_stage;
        (0..self.blocks.len())
            .flat_map(|k| {
                CouplingBlock::PARAM_NAMES
                    .iter()
                    .map(move |n| format!("stage{}.block{}.{n}", k / bps, k % bps))
            })
            .collect()
    }

    /// Rounds every parameter to the nearest f32 so that checkpoints are exact.
    pub fn snap_to_f32(&mut self) {
        for p in self.parameters_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = f64::from(*v as f32));
        }
    }

    fn stage_blocks(&self, s: usize) -> &[CouplingBlock] {
        let bps = self.config.blocks_per_stage;
        &self.blocks[s * bps..(s + 1) * bps]
    }

    fn check_input(x: &Tensor) -> Result<(), NetError> {
        if x.shape() == CHANNEL_SHAPE {
            Ok(())
        } else {
            Err(NetError::InputShape(x.shape().to_vec()))
        }
    }

    fn latent_tensor(latent: &[f64]) -> Result<Tensor, NetError> {
        if latent.len() != CELLS {
            return Err(NetError::LatentLength(latent.len()));
        }
        Ok(Tensor::new(&[CELLS, 1, 1], latent.to_vec())?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Vec<f64>, NetError> {
        self.forward_impl(x, None)
    }

    pub fn inverse(&self, latent: &[f64]) -> Result<Tensor, NetError> {
        self.inverse_impl(latent, None)
    }

    /// Forward pass that also returns a fingerprint of which relu units fired.
    pub fn forward_signature(&self, x: &Tensor) -> Result<(Vec<f64>, Signature), NetError> {
        let mut sig = Signature::default();
        let out = self.forward_impl(x, Some(&mut sig))?;
        Ok((out, sig))
    }

    pub fn inverse_signature(&self, latent: &[f64]) -> Result<(Tensor, Signature), NetError> {
        let mut sig = Signature::default();
        let out = self.inverse_impl(latent, Some(&mut sig))?;
        Ok((out, sig))
    }

    fn forward_impl(&self, x: &Tensor, mut sig: Option<&mut Signature>) -> Result<Vec<f64>, NetError> {
        Self::check_input(x)?;
        let mut h = x.clone();
        for s in 0..STAGES {
            h = psi_forward(&h)?;
            for block in self.stage_blocks(s) {
                h = block.forward_signed(&h, sig.as_deref_mut())?;
            }
        }
        Ok(h.into_data())
    }

    fn inverse_impl(&self, latent: &[f64], mut sig: Option<&mut Signature>) -> Result<Tensor, NetError> {
        let mut h = Self::latent_tensor(latent)?;
        for s in (0..STAGES).rev() {
            for block in self.stage_blocks(s).iter().rev() {
                h = block.inverse_signed(&h, sig.as_deref_mut())?;
            }
            h = psi_inverse(&h)?;
        }
        Ok(h)
    }

    /// Backpropagates `grad_latent` through [`forward`](Self::forward) without
    /// stored activations: inputs are rebuilt from `latent`, the forward output.
    /// Parameter gradients are added to `grads`; the input gradient is returned.
    pub fn backward_forward(&self, latent: &[f64], grad_latent: &[f64], grads: &mut ParamGrads) -> Result<Tensor, NetError> {
        let mut y = Self::latent_tensor(latent)?;
        let mut g = Self::latent_tensor(grad_latent)?;
        let bps = self.config.blocks_per_stage;
        for s in (0..STAGES).rev() {
            for b in (0..bps).rev() {
                let k = s * bps + b;
                (y, g) = self.blocks[k].backward_forward(&y, &g, grads.block_mut(k))?;
            }
            y = psi_inverse(&y)?;
            g = psi_inverse(&g)?;
        }
        Ok(g)
    }

    /// Backpropagates `grad_x` through [`inverse`](Self::inverse) given its
    /// output `x`. Returns the gradient with respect to the latent.
    pub fn backward_inverse(&self, x: &Tensor, grad_x: &Tensor, grads: &mut ParamGrads) -> Result<Vec<f64>, NetError> {
        Self::check_input(x)?;
        Self::check_input(grad_x)?;
        let (mut h, mut g) = (x.clone(), grad_x.clone());
        let bps = self.config.blocks_per_stage;
        for s in 0..STAGES {
            h = psi_forward(&h)?;
            g = psi_forward(&g)?;
            for b in 0..bps {
                let k = s * bps + b;
                (h, g) = self.blocks[k].backward_inverse(&h, &g, grads.block_mut(k))?;
            }
        }
        Ok(g.into_data())
    }
}
