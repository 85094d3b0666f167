//! Metrics: bitwise F1, round-trip error, free-latent statistics,
//! perturbation sensitivity of the inverse, count correlations and the
//! real-versus-predicted code table.

use std::fmt::Write as _;

use thiserror::Error;

use crate::chemdata::{SpectrumCode, AROMATIC_CHANNEL, CODE_BITS, GRID};
use crate::invnet::{merge_latent, split_latent, InvertibleNet, NetError, Z_DIM};
use crate::loss::{reconstruction_latent, LossError, Sample};
use crate::numeric::{mix64, ops, RngStream};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("{what}: {left} predictions for {right} targets")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("{what} needs at least {needed} rows, found {found}")]
    TooFewRows {
        what: &'static str,
        needed: usize,
        found: usize,
    },
    #[error("{what} has zero variance")]
    ZeroVariance { what: &'static str },
    #[error("reconstructions have zero mean l1 mass")]
    ZeroDenominator,
    #[error("invalid perturbation settings: {0}")]
    Config(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// Code from logits: a bit is set iff `sigmoid(logit) > threshold`.
pub fn binarize(logits: &[f64], threshold: f64) -> SpectrumCode {
    let positions = logits
        .iter()
        .enumerate()
        .filter(|(_, &p)| ops::sigmoid_scalar(p) > threshold)
        .map(|(k, _)| k);
    SpectrumCode::from_positions(positions).expect("logit index within code length")
}

/// Predicted code logits (the first 128 latent values) for every sample.
pub fn predict_logits(net: &InvertibleNet, set: &[Sample]) -> Result<Vec<Vec<f64>>, EvalError> {
    set.iter()
        .map(|s| Ok(net.forward(&s.x)?[..CODE_BITS].to_vec()))
        .collect()
}

pub fn predict_codes(net: &InvertibleNet, set: &[Sample]) -> Result<Vec<SpectrumCode>, EvalError> {
    Ok(predict_logits(net, set)?.iter().map(|p| binarize(p, 0.5)).collect())
}

/// Micro-averaged F1 over every bit of every sample; 0 when neither side has
/// a positive.
pub fn f1_codes(pred: &[SpectrumCode], target: &[SpectrumCode]) -> Result<f64, EvalError> {
    if pred.len() != target.len() {
        return Err(EvalError::LengthMismatch {
            what: "f1",
            left: pred.len(),
            right: target.len(),
        });
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (p, t) in pred.iter().zip(target) {
        for (&a, &b) in p.bits().iter().zip(t.bits()) {
            match (a, b) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
    }
    Ok(f1_from_counts(tp, fp, fneg))
}

fn f1_from_counts(tp: usize, fp: usize, fneg: usize) -> f64 {
    let denom = 2 * tp + fp + fneg;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// F1 of logit predictions binarized at `threshold` after the sigmoid.
pub fn f1_bits(pred_logits: &[Vec<f64>], target: &[SpectrumCode], threshold: f64) -> Result<f64, EvalError> {
    let codes: Vec<SpectrumCode> = pred_logits.iter().map(|p| binarize(p, threshold)).collect();
    f1_codes(&codes, target)
}

/// F1 of a predictor that emits independent ones at rate `density` against
/// targets of the same density, over `bits` simulated bits.
pub fn simulate_random_f1(density: f64, bits: usize, seed: u64) -> f64 {
    let mut rng = RngStream::new(seed);
    let (mut tp, mut fp, mut fneg) = (0, 0, 0);
    for _ in 0..bits {
        let t = rng.uniform() < density;
        let p = rng.uniform() < density;
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    f1_from_counts(tp, fp, fneg)
}

/// Fraction of set bits over a list of codes.
pub fn code_density(codes: &[SpectrumCode]) -> f64 {
    let ones: usize = codes.iter().map(SpectrumCode::count_ones).sum();
    ones as f64 / (codes.len() * CODE_BITS).max(1) as f64
}

/// Mean over rows of the per-row mean absolute round-trip error, and the
/// largest absolute error seen.
pub fn reconstruction_error(net: &InvertibleNet, set: &[Sample]) -> Result<(f64, f64), EvalError> {
    let (mut mean_sum, mut max) = (0.0, 0.0f64);
    for s in set {
        let back = net.inverse(&net.forward(&s.x)?)?;
        let errs: Vec<f64> = back.data().iter().zip(s.x.data()).map(|(a, b)| (a - b).abs()).collect();
        mean_sum += errs.iter().sum::<f64>() / errs.len() as f64;
        max = errs.iter().fold(max, |m, &e| m.max(e));
    }
    Ok((mean_sum / set.len().max(1) as f64, max))
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-sample mean and standard deviation of the free latent, summarised by
/// their mean and standard deviation across the set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZfreeStats {
    pub mean_of_means: f64,
    pub std_of_means: f64,
    pub mean_of_stds: f64,
    pub std_of_stds: f64,
}

pub fn zfree_stats(net: &InvertibleNet, set: &[Sample]) -> Result<ZfreeStats, EvalError> {
    if set.len() < 2 {
        return Err(EvalError::TooFewRows {
            what: "free-latent statistics",
            needed: 2,
            found: set.len(),
        });
    }
    let mut means = Vec::with_capacity(set.len());
    let mut stds = Vec::with_capacity(set.len());
    for s in set {
        let latent = net.forward(&s.x)?;
        let (m, sd) = mean_std(split_latent(&latent)?.1);
        means.push(m);
        stds.push(sd);
    }
    let (mean_of_means, std_of_means) = mean_std(&means);
    let (mean_of_stds, std_of_stds) = mean_std(&stds);
    Ok(ZfreeStats {
        mean_of_means,
        std_of_means,
        mean_of_stds,
        std_of_stds,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationConfig {
    pub epsilon: f64,
    pub n_noise: usize,
    pub n_prior: usize,
    pub seed: u64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            n_noise: 8,
            n_prior: 8,
            seed: 0,
        }
    }
}

impl PerturbationConfig {
    fn validate(&self) -> Result<(), EvalError> {
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(EvalError::Config(format!("epsilon {} must be finite and non-negative", self.epsilon)));
        }
        if self.n_noise == 0 || self.n_prior == 0 {
            return Err(EvalError::Config("draw counts must be at least 1".into()));
        }
        Ok(())
    }
}

/// Monte-Carlo mean with the standard error of all pooled draws.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub draws: usize,
}

impl McEstimate {
    fn from_values(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        let n = values.len();
        let sample_std = if n > 1 { std * (n as f64 / (n - 1) as f64).sqrt() } else { 0.0 };
        Self {
            mean,
            std_error: sample_std / (n as f64).sqrt(),
            draws: n,
        }
    }
}

/// Stable key of a sample's content, so that random draws follow the row
/// rather than its position in the set.
pub fn sample_key(s: &Sample) -> u64 {
    let mut h = 0x6a09_e667_f3bc_c909u64;
    for &v in s.x.data() {
        h = mix64(h ^ v.to_bits());
    }
    for (k, &b) in s.code.bits().iter().enumerate() {
        if b {
            h = mix64(h ^ (k as u64 + 1));
        }
    }
    h
}

const LOCAL_KEY: u64 = 11;
const PRIOR_KEY: u64 = 12;
const PRIOR_NOISE_KEY: u64 = 13;

fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn perturbed(z: &[f64], xi: &[f64], eps: f64) -> Vec<f64> {
    z.iter().zip(xi).map(|(a, b)| a + eps * b).collect()
}

fn require_rows(what: &'static str, set: &[Sample]) -> Result<(), EvalError> {
    if set.is_empty() {
        Err(EvalError::TooFewRows { what, needed: 1, found: 0 })
    } else {
        Ok(())
    }
}

/// `E_i E_ξ ‖f⁻¹(y_i, z_i + εξ) − f⁻¹(y_i, z_i)‖₁` with `(y_i, z_i)` from the
/// forward pass of each sample.
pub fn cd_local(net: &InvertibleNet, set: &[Sample], cfg: &PerturbationConfig) -> Result<McEstimate, EvalError> {
    cfg.validate()?;
    require_rows("local perturbation", set)?;
    let root = RngStream::new(cfg.seed).substream(LOCAL_KEY);
    let mut values = Vec::with_capacity(set.len() * cfg.n_noise);
    for s in set {
        let latent = net.forward(&s.x)?;
        let (y, z) = split_latent(&latent)?;
        let base = net.inverse(&latent)?;
        let row = root.substream(sample_key(s));
        for d in 0..cfg.n_noise {
            let xi = row.substream(d as u64).normals(Z_DIM);
            let moved = net.inverse(&merge_latent(y, &perturbed(z, &xi, cfg.epsilon))?)?;
            values.push(l1_distance(moved.data(), base.data()));
        }
    }
    Ok(McEstimate::from_values(&values))
}

/// As [`cd_local`] but around `n_prior` fresh prior draws of `z` per sample,
/// each perturbed `n_noise` times.
pub fn cd_prior(net: &InvertibleNet, set: &[Sample], cfg: &PerturbationConfig) -> Result<McEstimate, EvalError> {
    cfg.validate()?;
    require_rows("prior perturbation", set)?;
    let root = RngStream::new(cfg.seed);
    let mut values = Vec::with_capacity(set.len() * cfg.n_noise * cfg.n_prior);
    for s in set {
        let latent = net.forward(&s.x)?;
        let y = split_latent(&latent)?.0;
        let key = sample_key(s);
        for p in 0..cfg.n_prior {
            let z = root.substream(PRIOR_KEY).substream(key).substream(p as u64).normals(Z_DIM);
            let base = net.inverse(&merge_latent(y, &z)?)?;
            let noise = root.substream(PRIOR_NOISE_KEY).substream(key).substream(p as u64);
            for d in 0..cfg.n_noise {
                let xi = noise.substream(d as u64).normals(Z_DIM);
                let moved = net.inverse(&merge_latent(y, &perturbed(&z, &xi, cfg.epsilon))?)?;
                values.push(l1_distance(moved.data(), base.data()));
            }
        }
    }
    Ok(McEstimate::from_values(&values))
}

/// Mean l1 mass of the unperturbed reconstructions `f⁻¹(f(x_i))`.
pub fn reconstruction_mass(net: &InvertibleNet, set: &[Sample]) -> Result<f64, EvalError> {
    require_rows("reconstruction mass", set)?;
    let mut total = 0.0;
    for s in set {
        total += net.inverse(&net.forward(&s.x)?)?.l1_norm();
    }
    Ok(total / set.len() as f64)
}

/// Perturbation distance relative to the typical reconstruction mass.
pub fn rcd(cd_value: f64, net: &InvertibleNet, set: &[Sample]) -> Result<f64, EvalError> {
    let denom = reconstruction_mass(net, set)?;
    if denom <= 0.0 {
        return Err(EvalError::ZeroDenominator);
    }
    Ok(cd_value / denom)
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch {
            what: "correlation",
            left: a.len(),
            right: b.len(),
        });
    }
    let (ma, sa) = mean_std(a);
    let (mb, sb) = mean_std(b);
    if sa == 0.0 {
        return Err(EvalError::ZeroVariance { what: "reconstructed counts" });
    }
    if sb == 0.0 {
        return Err(EvalError::ZeroVariance { what: "real counts" });
    }
    let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / a.len() as f64;
    Ok((cov / (sa * sb)).clamp(-1.0, 1.0))
}

fn count_ones(x: &[f64], channel: Option<usize>) -> f64 {
    let plane = GRID * GRID;
    let cells = match channel {
        Some(c) => &x[c * plane..(c + 1) * plane],
        None => x,
    };
    cells.iter().filter(|&&v| v > 0.5).count() as f64
}

/// Pearson correlation between the number of ones in each real input and in
/// its reconstruction from (code, prior draw), optionally within one channel.
pub fn count_correlation(net: &InvertibleNet, set: &[Sample], rng: &RngStream, channel: Option<usize>) -> Result<f64, EvalError> {
    if set.len() < 3 {
        return Err(EvalError::TooFewRows {
            what: "count correlation",
            needed: 3,
            found: set.len(),
        });
    }
    let mut real = Vec::with_capacity(set.len());
    let mut recon = Vec::with_capacity(set.len());
    for s in set {
        let z = rng.substream(sample_key(s)).normals(Z_DIM);
        let x_hat = net.inverse(&reconstruction_latent(&s.code, &z)?)?;
        real.push(count_ones(s.x.data(), channel));
        recon.push(count_ones(x_hat.data(), channel));
    }
    pearson(&recon, &real)
}

fn positions(code: &SpectrumCode) -> String {
    code.ones().iter().map(usize::to_string).collect::<Vec<_>>().join(", ")
}

/// Aligned table of set-bit positions in the real and predicted code for the
/// first `k` samples.
pub fn code_report(net: &InvertibleNet, set: &[Sample], ids: &[u64], k: usize) -> Result<String, EvalError> {
    if ids.len() != set.len() {
        return Err(EvalError::LengthMismatch {
            what: "report ids",
            left: ids.len(),
            right: set.len(),
        });
    }
    if k > set.len() {
        return Err(EvalError::TooFewRows {
            what: "code report",
            needed: k,
            found: set.len(),
        });
    }
    let predicted = predict_codes(net, &set[..k])?;
    let rows: Vec<[String; 3]> = (0..k)
        .map(|i| [ids[i].to_string(), positions(&set[i].code), positions(&predicted[i])])
        .collect();
    let header = ["molecule", "real", "predicted"];
    let width = |c: usize| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0);
    let (w0, w1) = (width(0), width(1));
    let mut out = String::new();
    for r in std::iter::once(header.map(str::to_owned)).chain(rows) {
        let line = format!("{:<w0$}  {:<w1$}  {}", r[0], r[1], r[2]);
        writeln!(out, "{}", line.trim_end()).expect("writing to a string");
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub f1: f64,
    pub recon_mean: f64,
    pub recon_max: f64,
    pub zfree_mean_of_means: f64,
    pub zfree_std_of_means: f64,
    pub zfree_mean_of_stds: f64,
    pub zfree_std_of_stds: f64,
    pub cd_local: f64,
    pub cd_prior: f64,
    pub rcd_local: f64,
    pub rcd_prior: f64,
    pub corr_total: f64,
    pub corr_aromatic: f64,
}

impl MetricReport {
    pub fn fields(&self) -> [(&'static str, f64); 13] {
        [
            ("f1", self.f1),
            ("recon_mean", self.recon_mean),
            ("recon_max", self.recon_max),
            ("zfree_mean_of_means", self.zfree_mean_of_means),
            ("zfree_std_of_means", self.zfree_std_of_means),
            ("zfree_mean_of_stds", self.zfree_mean_of_stds),
            ("zfree_std_of_stds", self.zfree_std_of_stds),
            ("cd_local", self.cd_local),
            ("cd_prior", self.cd_prior),
            ("rcd_local", self.rcd_local),
            ("rcd_prior", self.rcd_prior),
            ("corr_total", self.corr_total),
            ("corr_aromatic", self.corr_aromatic),
        ]
    }

    pub fn to_key_value(&self) -> String {
        self.fields().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn to_csv(&self) -> String {
        let f = self.fields();
        let header: Vec<&str> = f.iter().map(|(k, _)| *k).collect();
        let values: Vec<String> = f.iter().map(|(_, v)| v.to_string()).collect();
        format!("{}\n{}\n", header.join(","), values.join(","))
    }
}

const CORRELATION_KEY: u64 = 21;

/// Every metric on one set.
pub fn evaluate(net: &InvertibleNet, set: &[Sample], cfg: &PerturbationConfig) -> Result<MetricReport, EvalError> {
    let targets: Vec<SpectrumCode> = set.iter().map(|s| s.code.clone()).collect();
    let f1 = f1_codes(&predict_codes(net, set)?, &targets)?;
    let (recon_mean, recon_max) = reconstruction_error(net, set)?;
    let z = zfree_stats(net, set)?;
    let local = cd_local(net, set, cfg)?.mean;
    let prior = cd_prior(net, set, cfg)?.mean;
    let corr_rng = RngStream::new(cfg.seed).substream(CORRELATION_KEY);
    Ok(MetricReport {
        f1,
        recon_mean,
        recon_max,
        zfree_mean_of_means: z.mean_of_means,
        zfree_std_of_means: z.std_of_means,
        zfree_mean_of_stds: z.mean_of_stds,
        zfree_std_of_stds: z.std_of_stds,
        cd_local: local,
        cd_prior: prior,
        rcd_local: rcd(local, net, set)?,
        rcd_prior: rcd(prior, net, set)?,
        corr_total: count_correlation(net, set, &corr_rng, None)?,
        corr_aromatic: count_correlation(net, set, &corr_rng, Some(AROMATIC_CHANNEL))?,
    })
}
