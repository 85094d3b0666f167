//! Training objective: distance-aware BCE on the predicted code plus
//! penalties on the structure reconstructed from (code, sampled z).

use rayon::prelude::*;
use thiserror::Error;

use crate::chemdata::{is_placement_cell, DatasetRow, SpectrumCode, CHANNELS, CHANNEL_SHAPE, CODE_BITS, GRID};
use crate::invnet::{merge_latent, split_latent, InvertibleNet, NetError, ParamGrads, Signature, Y_DIM, Z_DIM};
use crate::numeric::{ops, RngStream, Tensor};

/// Smearing kernel indexed by offset −2..=2.
pub const SMEAR_KERNEL: [f64; 5] = [0.25, 0.5, 1.0, 0.5, 0.25];
pub const POSITIVE_WEIGHT: f64 = 4.0;
/// Samples per unit of parallel work; reduction runs over units in order.
const CHUNK: usize = 4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("{what} has length {found}, expected {expected}")]
    Length {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("loss weight {name} = {value} must be finite and non-negative")]
    BadWeight { name: &'static str, value: f64 },
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Net(#[from] NetError),
}

impl From<crate::numeric::NumericError> for LossError {
    fn from(e: crate::numeric::NumericError) -> Self {
        Self::Net(NetError::Numeric(e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w_y: f64,
    pub w_range: f64,
    pub w_sparse: f64,
    pub w_forbidden: f64,
    pub w_zfree: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_y: 1.0,
            w_range: 1.0,
            w_sparse: 0.1,
            w_forbidden: 0.1,
            w_zfree: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, value) in self.named() {
            if !value.is_finite() || value < 0.0 {
                return Err(LossError::BadWeight { name, value });
            }
        }
        Ok(())
    }

    pub fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("w_y", self.w_y),
            ("w_range", self.w_range),
            ("w_sparse", self.w_sparse),
            ("w_forbidden", self.w_forbidden),
            ("w_zfree", self.w_zfree),
        ]
    }
}

/// Batch-averaged loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub bce: f64,
    pub range: f64,
    pub sparsity: f64,
    pub forbidden: f64,
    pub zfree: f64,
}

impl LossBreakdown {
    fn from_terms(terms: [f64; 5], w: &LossWeights) -> Self {
        let [bce, range, sparsity, forbidden, zfree] = terms;
        Self {
            total: w.w_y * bce + w.w_range * range + w.w_sparse * sparsity + w.w_forbidden * forbidden + w.w_zfree * zfree,
            bce,
            range,
            sparsity,
            forbidden,
            zfree,
        }
    }

    /// Forward-direction loss (the unweighted BCE).
    pub fn loss_y(&self) -> f64 {
        self.bce
    }

    /// Weighted sum of the three reconstruction penalties.
    pub fn loss_x(&self, w: &LossWeights) -> f64 {
        w.w_range * self.range + w.w_sparse * self.sparsity + w.w_forbidden * self.forbidden
    }
}

fn check_len(what: &'static str, expected: usize, found: usize) -> Result<(), LossError> {
    if expected == found {
        Ok(())
    } else {
        Err(LossError::Length { what, expected, found })
    }
}

/// `t̃_i = max_d target_{i+d} · k_d` over offsets −2..=2, clipped at the ends.
pub fn smear_target(target: &SpectrumCode) -> [f64; CODE_BITS] {
    let mut out = [0.0f64; CODE_BITS];
    for i in target.ones() {
        for (k, &w) in SMEAR_KERNEL.iter().enumerate() {
            let Some(j) = (i + k).checked_sub(2).filter(|&j| j < CODE_BITS) else {
                continue;
            };
            out[j] = out[j].max(w);
        }
    }
    out
}

/// Mean over bits of the weighted BCE between `sigmoid(pred)` and the smeared target.
pub fn distance_aware_bce(pred: &[f64], target: &SpectrumCode) -> Result<f64, LossError> {
    check_len("prediction", CODE_BITS, pred.len())?;
    let t = smear_target(target);
    let sum: f64 = pred
        .iter()
        .zip(&t)
        .map(|(&p, &t)| POSITIVE_WEIGHT * t * ops::softplus(-p) + (1.0 - t) * ops::softplus(p))
        .sum();
    Ok(sum / CODE_BITS as f64)
}

pub fn distance_aware_bce_grad(pred: &[f64], target: &SpectrumCode) -> Result<Vec<f64>, LossError> {
    check_len("prediction", CODE_BITS, pred.len())?;
    let t = smear_target(target);
    Ok(pred
        .iter()
        .zip(&t)
        .map(|(&p, &t)| {
            (-POSITIVE_WEIGHT * t * ops::sigmoid_scalar(-p) + (1.0 - t) * ops::sigmoid_scalar(p)) / CODE_BITS as f64
        })
        .collect())
}

pub fn range_penalty(x: &Tensor) -> f64 {
    let n = x.len().max(1) as f64;
    x.data().iter().map(|&v| (v - v.clamp(0.0, 1.0)).powi(2)).sum::<f64>() / n
}

pub fn range_penalty_grad(x: &Tensor) -> Tensor {
    let n = x.len().max(1) as f64;
    x.map(|v| 2.0 * (v - v.clamp(0.0, 1.0)) / n)
}

pub fn sparsity_penalty(x: &Tensor) -> f64 {
    x.l1_norm() / x.len().max(1) as f64
}

pub fn sparsity_penalty_grad(x: &Tensor) -> Tensor {
    let n = x.len().max(1) as f64;
    x.map(|v| ops::Unary::Abs.derivative(v) / n)
}

/// Cells outside the upper-triangle placement region, over all channels.
pub fn forbidden_cells() -> impl Iterator<Item = usize> {
    (0..CHANNELS).flat_map(|c| {
        (0..GRID * GRID)
            .filter(|&k| !is_placement_cell(k / GRID, k % GRID))
            .map(move |k| c * GRID * GRID + k)
    })
}

pub fn forbidden_cell_count() -> usize {
    forbidden_cells().count()
}

fn check_channels(x: &Tensor) -> Result<(), LossError> {
    if x.shape() == CHANNEL_SHAPE {
        Ok(())
    } else {
        Err(LossError::Net(NetError::InputShape(x.shape().to_vec())))
    }
}

pub fn forbidden_region_penalty(x: &Tensor) -> Result<f64, LossError> {
    check_channels(x)?;
    let d = x.data();
    Ok(forbidden_cells().map(|k| d[k] * d[k]).sum::<f64>() / forbidden_cell_count() as f64)
}

pub fn forbidden_region_penalty_grad(x: &Tensor) -> Result<Tensor, LossError> {
    check_channels(x)?;
    let n = forbidden_cell_count() as f64;
    let mut g = Tensor::zeros(x.shape());
    for k in forbidden_cells() {
        g.data_mut()[k] = 2.0 * x.data()[k] / n;
    }
    Ok(g)
}

fn moments(z: &[f64]) -> (f64, f64) {
    let n = z.len() as f64;
    let mean = z.iter().sum::<f64>() / n;
    let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `mean(z)² + (std(z) − 1)²` with the population standard deviation.
pub fn zfree_moment_penalty(z: &[f64]) -> f64 {
    if z.is_empty() {
        return 1.0;
    }
    let (mean, std) = moments(z);
    mean * mean + (std - 1.0).powi(2)
}

pub fn zfree_moment_penalty_grad(z: &[f64]) -> Vec<f64> {
    if z.is_empty() {
        return Vec::new();
    }
    let n = z.len() as f64;
    let (mean, std) = moments(z);
    z.iter()
        .map(|&v| {
            let spread = if std > 0.0 { 2.0 * (std - 1.0) * (v - mean) / (n * std) } else { 0.0 };
            2.0 * mean / n + spread
        })
        .collect()
}

/// Network input and target of one row.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Tensor,
    pub code: SpectrumCode,
}

impl Sample {
    pub fn from_row(row: &DatasetRow) -> Self {
        Self {
            x: row.channels().into_tensor(),
            code: row.code(),
        }
    }
}

pub fn samples(rows: &[DatasetRow]) -> Vec<Sample> {
    rows.iter().map(Sample::from_row).collect()
}

/// Free latent used to reconstruct batch item `k`.
pub fn batch_zfree(rng: &RngStream, k: usize) -> Vec<f64> {
    rng.substream(k as u64).normals(Z_DIM)
}

/// Latent inverted for the reconstruction terms: the target code as 0/1 values
/// followed by a prior draw.
pub fn reconstruction_latent(code: &SpectrumCode, z: &[f64]) -> Result<Vec<f64>, LossError> {
    Ok(merge_latent(&code.as_f64(), z)?)
}

struct ItemOutput {
    terms: [f64; 5],
    grads: Option<ParamGrads>,
}

fn item(
    net: &InvertibleNet,
    sample: &Sample,
    z_prior: &[f64],
    w: &LossWeights,
    scale: f64,
    grads: Option<&mut ParamGrads>,
) -> Result<[f64; 5], LossError> {
    let latent = net.forward(&sample.x)?;
    let (y, z) = split_latent(&latent)?;
    let bce = distance_aware_bce(y, &sample.code)?;
    let zfree = zfree_moment_penalty(z);

    let x_hat = net.inverse(&reconstruction_latent(&sample.code, z_prior)?)?;
    let range = range_penalty(&x_hat);
    let sparsity = sparsity_penalty(&x_hat);
    let forbidden = forbidden_region_penalty(&x_hat)?;

    if let Some(grads) = grads {
        if w.w_y != 0.0 || w.w_zfree != 0.0 {
            let mut g: Vec<f64> = distance_aware_bce_grad(y, &sample.code)?
                .into_iter()
                .map(|v| v * w.w_y * scale)
                .collect();
            g.extend(zfree_moment_penalty_grad(z).into_iter().map(|v| v * w.w_zfree * scale));
            debug_assert_eq!(g.len(), Y_DIM + Z_DIM);
            net.backward_forward(&latent, &g, grads)?;
        }
        if w.w_range != 0.0 || w.w_sparse != 0.0 || w.w_forbidden != 0.0 {
            let mut g = ops::scale(&range_penalty_grad(&x_hat), w.w_range * scale);
            g.add_assign(&ops::scale(&sparsity_penalty_grad(&x_hat), w.w_sparse * scale))?;
            g.add_assign(&ops::scale(&forbidden_region_penalty_grad(&x_hat)?, w.w_forbidden * scale))?;
            net.backward_inverse(&x_hat, &g, grads)?;
        }
    }
    Ok([bce, range, sparsity, forbidden, zfree])
}

fn run(
    net: &InvertibleNet,
    batch: &[Sample],
    weights: &LossWeights,
    rng: &RngStream,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<ParamGrads>), LossError> {
    weights.validate()?;
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let scale = 1.0 / batch.len() as f64;
    let chunks: Vec<ItemOutput> = batch
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut grads = with_grad.then(|| ParamGrads::zeros_like(net));
            let mut terms = [0.0; 5];
            for (offset, sample) in chunk.iter().enumerate() {
                let z = batch_zfree(rng, c * CHUNK + offset);
                let t = item(net, sample, &z, weights, scale, grads.as_mut())?;
                terms.iter_mut().zip(t).for_each(|(a, b)| *a += b);
            }
            Ok(ItemOutput { terms, grads })
        })
        .collect::<Result<_, LossError>>()?;

    let mut terms = [0.0; 5];
    let mut grads: Option<ParamGrads> = None;
    for out in chunks {
        terms.iter_mut().zip(out.terms).for_each(|(a, b)| *a += b);
        match (&mut grads, out.grads) {
            (Some(acc), Some(g)) => acc.add_assign(&g)?,
            (slot @ None, g) => *slot = g,
            _ => {}
        }
    }
    terms.iter_mut().for_each(|t| *t *= scale);
    Ok((LossBreakdown::from_terms(terms, weights), grads))
}

/// Batch loss. Item `k` reconstructs from `rng.substream(k)`.
pub fn total_loss(net: &InvertibleNet, batch: &[Sample], weights: &LossWeights, rng: &RngStream) -> Result<LossBreakdown, LossError> {
    Ok(run(net, batch, weights, rng, false)?.0)
}

/// [`total_loss`] together with its gradient for every parameter.
pub fn total_loss_with_grad(
    net: &InvertibleNet,
    batch: &[Sample],
    weights: &LossWeights,
    rng: &RngStream,
) -> Result<(LossBreakdown, ParamGrads), LossError> {
    let (loss, grads) = run(net, batch, weights, rng, true)?;
    Ok((loss, grads.expect("requested")))
}

/// Fingerprint of every non-smooth point the loss passes through: relu
/// activity in both directions and the clamp/abs region of each
/// reconstructed cell. Equal fingerprints at two parameter values mean the
/// loss is smooth on the segment between them up to kinks crossed twice.
pub fn kink_signature(net: &InvertibleNet, batch: &[Sample], rng: &RngStream) -> Result<u64, LossError> {
    let mut sig = Signature::default();
    for (k, sample) in batch.iter().enumerate() {
        let (_, s) = net.forward_signature(&sample.x)?;
        sig.0 = crate::numeric::mix64(sig.0 ^ s.0);
        let (x_hat, s) = net.inverse_signature(&reconstruction_latent(&sample.code, &batch_zfree(rng, k))?)?;
        sig.0 = crate::numeric::mix64(sig.0 ^ s.0);
        let below: Vec<f64> = x_hat.data().iter().map(|&v| if v < 0.0 { 1.0 } else { 0.0 }).collect();
        let above: Vec<f64> = x_hat.data().iter().map(|&v| if v > 1.0 { 1.0 } else { 0.0 }).collect();
        sig.absorb_signs(&below);
        sig.absorb_signs(&above);
    }
    Ok(sig.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chemdata::{synth_dataset, CELLS};
    use crate::invnet::NetConfig;

    fn code(bits: &[usize]) -> SpectrumCode {
        SpectrumCode::from_positions(bits.iter().copied()).unwrap()
    }

    fn confident(at: &[usize]) -> Vec<f64> {
        let mut p = vec![-30.0; CODE_BITS];
        for &i in at {
            p[i] = 30.0;
        }
        p
    }

    /// Per-bit smeared BCE on a toy vector, written out directly.
    fn toy_bce(pred: &[f64], smeared: &[f64]) -> f64 {
        let s = |x: f64| 1.0 / (1.0 + (-x).exp());
        pred.iter()
            .zip(smeared)
            .map(|(&p, &t)| -(4.0 * t * s(p).ln() + (1.0 - t) * (1.0 - s(p)).ln()))
            .sum::<f64>()
            / pred.len() as f64
    }

    #[test]
    fn smearing_example() {
        let t = smear_target(&code(&[5]));
        assert_eq!(&t[3..8], &[0.25, 0.5, 1.0, 0.5, 0.25]);
        assert_eq!(t.iter().sum::<f64>(), 2.5);
        let edge = smear_target(&code(&[0, 127]));
        assert_eq!(&edge[..3], &[1.0, 0.5, 0.25]);
        assert_eq!(&edge[125..], &[0.25, 0.5, 1.0]);
        let pair = smear_target(&code(&[10, 11]));
        assert_eq!(&pair[9..13], &[0.5, 1.0, 1.0, 0.5]);
    }

    #[test]
    fn nearer_prediction_scores_lower() {
        let target = code(&[1]);
        let near = distance_aware_bce(&confident(&[2]), &target).unwrap();
        let far = distance_aware_bce(&confident(&[3]), &target).unwrap();
        assert!(near < far);
        assert!(distance_aware_bce(&confident(&[1]), &target).unwrap() < near);
    }

    #[test]
    fn toy_vector_by_hand() {
        // 12-bit toy: target at 5, predictions at 7 and 9, logits ±4.
        let mut smeared = vec![0.0; 12];
        smeared[3..8].copy_from_slice(&SMEAR_KERNEL);
        let at = |i: usize| {
            let mut p = vec![-4.0; 12];
            p[i] = 4.0;
            p
        };
        let l7 = toy_bce(&at(7), &smeared);
        let l9 = toy_bce(&at(9), &smeared);
        assert!(l7 < l9);
        // Same quantities through the library, padded to 128 bits.
        let pad = |mut p: Vec<f64>| {
            p.resize(CODE_BITS, -4.0);
            p
        };
        let lib7 = distance_aware_bce(&pad(at(7)), &code(&[5])).unwrap();
        let lib9 = distance_aware_bce(&pad(at(9)), &code(&[5])).unwrap();
        let rest = (CODE_BITS - 12) as f64 * ops::softplus(-4.0);
        assert!((lib7 * 128.0 - (l7 * 12.0 + rest)).abs() < 1e-9);
        assert!((lib9 * 128.0 - (l9 * 12.0 + rest)).abs() < 1e-9);
    }

    #[test]
    fn bce_length_checked() {
        assert!(matches!(distance_aware_bce(&[0.0; 3], &code(&[])), Err(LossError::Length { .. })));
    }

    #[test]
    fn range_examples() {
        let mut x = Tensor::full(&[10], 0.5);
        assert_eq!(range_penalty(&x), 0.0);
        x.data_mut()[3] = 1.5;
        assert!((range_penalty(&x) - 0.025).abs() < 1e-15);
        let mirrored = x.map(|v| 1.0 - v);
        assert_eq!(range_penalty(&mirrored), range_penalty(&x));
    }

    #[test]
    fn sparsity_examples() {
        assert_eq!(sparsity_penalty(&Tensor::zeros(&[8])), 0.0);
        let mut x = Tensor::zeros(&[8]);
        x.data_mut()[2] = 1.0;
        assert_eq!(sparsity_penalty(&x), 0.125);
        assert!((sparsity_penalty(&Tensor::full(&[100], -0.0643)) - 0.0643).abs() < 1e-15);
    }

    #[test]
    fn forbidden_examples() {
        assert_eq!(forbidden_cell_count(), 480);
        for row in synth_dataset(20, 1) {
            assert_eq!(forbidden_region_penalty(row.channels().tensor()).unwrap(), 0.0);
            assert_eq!(range_penalty(row.channels().tensor()), 0.0);
        }
        let mut x = Tensor::zeros(&CHANNEL_SHAPE);
        x.data_mut()[GRID] = 1.0; // row 1, col 0
        assert_eq!(forbidden_region_penalty(&x).unwrap(), 1.0 / 480.0);
        assert_eq!(forbidden_region_penalty(&Tensor::full(&CHANNEL_SHAPE, 0.5)).unwrap(), 0.25);
        assert!(forbidden_region_penalty(&Tensor::zeros(&[4, 8, 8])).is_err());
    }

    #[test]
    fn zfree_examples() {
        assert_eq!(zfree_moment_penalty(&[0.0; 896]), 1.0);
        let unit: Vec<f64> = (0..896).map(|k| if k % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert_eq!(zfree_moment_penalty(&unit), 0.0);
        let scaled: Vec<f64> = unit.iter().map(|v| 0.0858 + 0.5861 * v).collect();
        assert!((zfree_moment_penalty(&scaled) - 0.178_7).abs() < 1e-4);
    }

    #[test]
    fn zero_weights_give_zero_total() {
        let rows = synth_dataset(3, 2);
        let net = InvertibleNet::new(NetConfig::default(), &mut RngStream::new(1));
        let w = LossWeights {
            w_y: 0.0,
            w_range: 0.0,
            w_sparse: 0.0,
            w_forbidden: 0.0,
            w_zfree: 0.0,
        };
        let l = total_loss(&net, &samples(&rows), &w, &RngStream::new(5)).unwrap();
        assert_eq!(l.total, 0.0);
        assert!(l.bce > 0.0 && l.sparsity > 0.0);
    }

    #[test]
    fn total_is_weighted_sum_and_grad_agrees() {
        let rows = synth_dataset(6, 3);
        let net = InvertibleNet::random(
            NetConfig {
                blocks_per_stage: 1,
                hidden_cap: 4,
            },
            &mut RngStream::new(2),
        );
        let w = LossWeights {
            w_zfree: 0.5,
            ..LossWeights::default()
        };
        let rng = RngStream::new(9);
        let batch = samples(&rows);
        let l = total_loss(&net, &batch, &w, &rng).unwrap();
        let (lg, g) = total_loss_with_grad(&net, &batch, &w, &rng).unwrap();
        assert_eq!(l, lg);
        let expect = l.bce + l.range + 0.1 * l.sparsity + 0.1 * l.forbidden + 0.5 * l.zfree;
        assert!((l.total - expect).abs() < 1e-12);
        assert!(g.is_finite());
        assert_eq!(g.tensors().len(), net.parameters().count());
    }

    #[test]
    fn bad_inputs_rejected() {
        let net = InvertibleNet::zeroed(NetConfig::default());
        let rng = RngStream::new(0);
        assert_eq!(total_loss(&net, &[], &LossWeights::default(), &rng), Err(LossError::EmptyBatch));
        let w = LossWeights {
            w_range: -1.0,
            ..LossWeights::default()
        };
        let batch = samples(&synth_dataset(1, 0));
        assert!(matches!(total_loss(&net, &batch, &w, &rng), Err(LossError::BadWeight { .. })));
        assert_eq!(CELLS, Y_DIM + Z_DIM);
    }
}
