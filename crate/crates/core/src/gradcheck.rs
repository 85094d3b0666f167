//! Finite-difference verification of every hand-written backward pass.
//!
//! Each component is reduced to a scalar `L = Σ r ⊙ f(inputs)` with a random
//! weighting `r`, and the analytic gradient is compared with central
//! differences. Coordinates whose ±h evaluation crosses a relu, abs or clamp
//! kink are skipped and counted.

use crate::chemdata::{synth_dataset, CHANNEL_SHAPE, CODE_BITS};
use crate::invnet::{psi_forward, psi_inverse, CouplingBlock, Init, InvertibleNet, NetConfig, ParamGrads, Signature};
use crate::loss::{self, LossError, LossWeights, Sample};
use crate::numeric::{central_difference_at, ops, relative_error, RngStream, Tape, Tensor, FD_STEP};

/// Acceptance threshold on the worst relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Coordinates sampled per parameter tensor of the full loss.
    pub coords_per_tensor: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            coords_per_tensor: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentCheck {
    pub component: String,
    pub worst: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl ComponentCheck {
    pub fn passed(&self) -> bool {
        self.worst <= TOLERANCE && self.checked > 0
    }
}

#[derive(Default)]
struct Accumulator {
    worst: f64,
    checked: usize,
    skipped: usize,
}

impl Accumulator {
    fn compare(&mut self, analytic: f64, numeric: f64) {
        self.worst = self.worst.max(relative_error(analytic, numeric));
        self.checked += 1;
    }

    fn finish(self, component: impl Into<String>) -> ComponentCheck {
        ComponentCheck {
            component: component.into(),
            worst: self.worst,
            checked: self.checked,
            skipped: self.skipped,
        }
    }
}

fn normal(rng: &mut RngStream, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, rng.normals(n)).expect("sized by shape")
}

/// Normal draws moved at least `margin` away from each kink.
fn away_from(rng: &mut RngStream, shape: &[usize], kinks: &[f64], margin: f64) -> Tensor {
    let mut t = normal(rng, shape);
    for v in t.data_mut() {
        while kinks.iter().any(|k| (*v - k).abs() < margin) {
            *v = rng.normal();
        }
    }
    t
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Compares `analytic` against central differences of `f` at every coordinate of `point`.
fn check_all(acc: &mut Accumulator, point: &Tensor, analytic: &Tensor, mut f: impl FnMut(&Tensor) -> f64) {
    let shape = point.shape().to_vec();
    for k in 0..point.len() {
        let numeric = central_difference_at(
            |p| f(&Tensor::new(&shape, p.to_vec()).expect("same shape")),
            point.data(),
            k,
            FD_STEP,
        );
        acc.compare(analytic.data()[k], numeric);
    }
}

fn conv_checks(rng: &mut RngStream) -> Result<Vec<ComponentCheck>, LossError> {
    let input = normal(rng, &[2, 4, 4]);
    let kernel = normal(rng, &[3, 2, 3, 3]);
    let bias = normal(rng, &[3]);
    let r = normal(rng, &[3, 4, 4]);
    let g = ops::conv2d_backward(&input, &kernel, &r)?;
    let l = |i: &Tensor, k: &Tensor, b: &Tensor| dot(ops::conv2d(i, k, b).expect("valid").data(), r.data());

    let mut out = Vec::new();
    let mut acc = Accumulator::default();
    check_all(&mut acc, &input, &g.input, |p| l(p, &kernel, &bias));
    out.push(acc.finish("conv2d.input"));
    let mut acc = Accumulator::default();
    check_all(&mut acc, &kernel, &g.kernel, |p| l(&input, p, &bias));
    out.push(acc.finish("conv2d.kernel"));
    let mut acc = Accumulator::default();
    check_all(&mut acc, &bias, &g.bias, |p| l(&input, &kernel, p));
    out.push(acc.finish("conv2d.bias"));
    Ok(out)
}

fn unary_checks(rng: &mut RngStream) -> Result<Vec<ComponentCheck>, LossError> {
    let mut out = Vec::new();
    for kind in ops::Unary::ALL {
        let x = away_from(rng, &[2, 3, 3], kind.kinks(), 10.0 * FD_STEP);
        let r = normal(rng, &[2, 3, 3]);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = tape.unary(kind, xv)?;
        let analytic = tape.backward(y, &r)?.take(xv).expect("leaf feeds output");
        let mut acc = Accumulator::default();
        check_all(&mut acc, &x, &analytic, |p| dot(ops::unary(kind, p).data(), r.data()));
        out.push(acc.finish(kind.name()));
    }
    Ok(out)
}

fn binary_checks(rng: &mut RngStream) -> Result<Vec<ComponentCheck>, LossError> {
    let a = normal(rng, &[3, 2, 2]);
    let b = normal(rng, &[3, 2, 2]);
    let r = normal(rng, &[3, 2, 2]);
    let s = rng.normal();
    let mut out = Vec::new();

    type Build = fn(&mut Tape<'_>, crate::numeric::Var, crate::numeric::Var, f64) -> crate::numeric::Var;
    let cases: [(&str, Build, fn(&Tensor, &Tensor, f64) -> Tensor); 3] = [
        ("add", |t, x, y, _| t.add(x, y).expect("same shape"), |x, y, _| ops::add(x, y).expect("same shape")),
        ("sub", |t, x, y, _| t.sub(x, y).expect("same shape"), |x, y, _| ops::sub(x, y).expect("same shape")),
        ("scale", |t, x, _, s| t.scale(x, s).expect("recorded"), |x, _, s| ops::scale(x, s)),
    ];
    for (name, build, eval) in cases {
        let mut tape = Tape::new();
        let (av, bv) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
        let y = build(&mut tape, av, bv, s);
        let mut grads = tape.backward(y, &r)?;
        let ga = grads.take(av).expect("a feeds every case");
        let mut acc = Accumulator::default();
        check_all(&mut acc, &a, &ga, |p| dot(eval(p, &b, s).data(), r.data()));
        if let Some(gb) = grads.take(bv) {
            check_all(&mut acc, &b, &gb, |p| dot(eval(&a, p, s).data(), r.data()));
        }
        out.push(acc.finish(name));
    }

    // Composite graph through the tape: sum(relu(conv(x)) - x·s).
    let x = normal(rng, &[2, 3, 3]);
    let k = normal(rng, &[2, 2, 3, 3]);
    let bias = normal(rng, &[2]);
    let f = |x: &Tensor| {
        let h = ops::relu(&ops::conv2d(x, &k, &bias).expect("valid"));
        ops::sub(&h, &ops::scale(x, s)).expect("same shape").sum()
    };
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let (kv, bv) = (tape.leaf_ref(&k), tape.leaf_ref(&bias));
    let c = tape.conv2d(xv, kv, bv)?;
    let pre = tape.value(c)?.clone();
    let h = tape.relu(c)?;
    let sx = tape.scale(xv, s)?;
    let d = tape.sub(h, sx)?;
    let total = tape.sum(d)?;
    let analytic = tape.backward(total, &Tensor::full(&[], 1.0))?.take(xv).expect("leaf");
    let mut acc = Accumulator::default();
    let pattern = |x: &Tensor| ops::conv2d(x, &k, &bias).expect("valid").map(|v| f64::from(u8::from(v > 0.0)));
    let base = pattern(&x);
    debug_assert_eq!(base, pre.map(|v| f64::from(u8::from(v > 0.0))));
    for i in 0..x.len() {
        let shifted = |sign: f64| {
            let mut p = x.clone();
            p.data_mut()[i] += sign * FD_STEP;
            pattern(&p)
        };
        if shifted(1.0) != base || shifted(-1.0) != base {
            acc.skipped += 1;
            continue;
        }
        let numeric = central_difference_at(|p| f(&Tensor::new(x.shape(), p.to_vec()).expect("shape")), x.data(), i, FD_STEP);
        acc.compare(analytic.data()[i], numeric);
    }
    out.push(acc.finish("tape_composite"));
    Ok(out)
}

fn psi_check(rng: &mut RngStream) -> Result<ComponentCheck, LossError> {
    let x = normal(rng, &[2, 4, 4]);
    let r = normal(rng, &[8, 2, 2]);
    let analytic = psi_inverse(&r)?;
    let mut acc = Accumulator::default();
    check_all(&mut acc, &x, &analytic, |p| dot(psi_forward(p).expect("even").data(), r.data()));
    Ok(acc.finish("psi"))
}

/// Checks one direction of a coupling block, for the input and every parameter.
fn coupling_check(rng: &mut RngStream, inverse: bool) -> Result<ComponentCheck, LossError> {
    let block = CouplingBlock::new(6, 4, Init::Random { bias_std: 0.5 }, rng);
    let x = normal(rng, &[6, 4, 4]);
    let r = normal(rng, &[6, 4, 4]);
    let apply = |b: &CouplingBlock, x: &Tensor| {
        let mut sig = Signature::default();
        let y = if inverse {
            b.inverse_signed(x, Some(&mut sig))
        } else {
            b.forward_signed(x, Some(&mut sig))
        }
        .expect("valid shapes");
        (dot(y.data(), r.data()), sig)
    };
    let y = if inverse { block.inverse(&x)? } else { block.forward(&x)? };
    let mut grads: Vec<Tensor> = block.parameters().iter().map(|p| Tensor::zeros(p.shape())).collect();
    let (_, gx) = if inverse {
        block.backward_inverse(&y, &r, &mut grads)?
    } else {
        block.backward_forward(&y, &r, &mut grads)?
    };

    let mut acc = Accumulator::default();
    let base = apply(&block, &x).1;
    for i in 0..x.len() {
        let at = |sign: f64| {
            let mut p = x.clone();
            p.data_mut()[i] += sign * FD_STEP;
            apply(&block, &p)
        };
        let (hi, lo) = (at(1.0), at(-1.0));
        if hi.1 != base || lo.1 != base {
            acc.skipped += 1;
            continue;
        }
        acc.compare(gx.data()[i], (hi.0 - lo.0) / (2.0 * FD_STEP));
    }
    for (t, g) in grads.iter().enumerate() {
        for i in 0..g.len() {
            let at = |sign: f64| {
                let mut b = block.clone();
                b.parameters_mut()[t].value.data_mut()[i] += sign * FD_STEP;
                apply(&b, &x)
            };
            let (hi, lo) = (at(1.0), at(-1.0));
            if hi.1 != base || lo.1 != base {
                acc.skipped += 1;
                continue;
            }
            acc.compare(g.data()[i], (hi.0 - lo.0) / (2.0 * FD_STEP));
        }
    }
    Ok(acc.finish(if inverse { "coupling.inverse" } else { "coupling.forward" }))
}

fn penalty_checks(rng: &mut RngStream) -> Result<Vec<ComponentCheck>, LossError> {
    let mut out = Vec::new();

    let pred = Tensor::new(&[CODE_BITS], rng.normals(CODE_BITS).into_iter().map(|v| 3.0 * v).collect())?;
    let positions: Vec<usize> = (0..CODE_BITS).filter(|_| rng.uniform() < 0.1).collect();
    let code = crate::chemdata::SpectrumCode::from_positions(positions).expect("in range");
    let g = Tensor::new(&[CODE_BITS], loss::distance_aware_bce_grad(pred.data(), &code)?)?;
    let mut acc = Accumulator::default();
    check_all(&mut acc, &pred, &g, |p| loss::distance_aware_bce(p.data(), &code).expect("length"));
    out.push(acc.finish("distance_aware_bce"));

    let x = away_from(rng, &CHANNEL_SHAPE, &[0.0, 1.0], 10.0 * FD_STEP);
    let mut acc = Accumulator::default();
    check_all(&mut acc, &x, &loss::range_penalty_grad(&x), loss::range_penalty);
    out.push(acc.finish("range_penalty"));
    let mut acc = Accumulator::default();
    check_all(&mut acc, &x, &loss::sparsity_penalty_grad(&x), loss::sparsity_penalty);
    out.push(acc.finish("sparsity_penalty"));
    let mut acc = Accumulator::default();
    check_all(&mut acc, &x, &loss::forbidden_region_penalty_grad(&x)?, |p| {
        loss::forbidden_region_penalty(p).expect("shape")
    });
    out.push(acc.finish("forbidden_region_penalty"));

    let z = Tensor::new(&[64], rng.normals(64).into_iter().map(|v| 0.3 + 0.6 * v).collect())?;
    let g = Tensor::new(&[64], loss::zfree_moment_penalty_grad(z.data()))?;
    let mut acc = Accumulator::default();
    check_all(&mut acc, &z, &g, |p| loss::zfree_moment_penalty(p.data()));
    out.push(acc.finish("zfree_moment_penalty"));
    Ok(out)
}

/// Full objective on a 2-sample batch with every term switched on.
fn total_loss_check(rng: &mut RngStream, coords: usize) -> Result<ComponentCheck, LossError> {
    let config = NetConfig {
        blocks_per_stage: 1,
        hidden_cap: 4,
    };
    let net = InvertibleNet::random(config, rng);
    let batch: Vec<Sample> = loss::samples(&synth_dataset(2, rng.below(1 << 30) as u64));
    let weights = LossWeights {
        w_y: 1.0,
        w_range: 1.0,
        w_sparse: 1.0,
        w_forbidden: 1.0,
        w_zfree: 1.0,
    };
    let noise = rng.substream(0xba7c);
    let (_, grads) = loss::total_loss_with_grad(&net, &batch, &weights, &noise)?;
    let base = loss::kink_signature(&net, &batch, &noise)?;

    let eval = |t: usize, i: usize, delta: f64| -> Result<(f64, u64), LossError> {
        let mut n = net.clone();
        n.parameters_mut().nth(t).expect("index in range").value.data_mut()[i] += delta;
        Ok((
            loss::total_loss(&n, &batch, &weights, &noise)?.total,
            loss::kink_signature(&n, &batch, &noise)?,
        ))
    };

    let mut acc = Accumulator::default();
    for (t, g) in ParamGrads::tensors(&grads).iter().enumerate() {
        let largest = (0..g.len())
            .max_by(|&a, &b| g.data()[a].abs().total_cmp(&g.data()[b].abs()))
            .expect("non-empty tensor");
        let mut candidates = vec![largest];
        candidates.extend((0..coords * 4).map(|_| rng.below(g.len())));
        let mut done = 0;
        for i in candidates {
            if done >= coords {
                break;
            }
            let (hi, s_hi) = eval(t, i, FD_STEP)?;
            let (lo, s_lo) = eval(t, i, -FD_STEP)?;
            if s_hi != base || s_lo != base {
                acc.skipped += 1;
                continue;
            }
            acc.compare(g.data()[i], (hi - lo) / (2.0 * FD_STEP));
            done += 1;
        }
    }
    Ok(acc.finish("total_loss"))
}

/// Runs every check; the order of the result is fixed.
pub fn run_gradchecks(config: &GradcheckConfig) -> Result<Vec<ComponentCheck>, LossError> {
    let root = RngStream::new(config.seed);
    let mut out = conv_checks(&mut root.substream(1))?;
    out.extend(unary_checks(&mut root.substream(2))?);
    out.extend(binary_checks(&mut root.substream(3))?);
    out.push(psi_check(&mut root.substream(4))?);
    out.push(coupling_check(&mut root.substream(5), false)?);
    out.push(coupling_check(&mut root.substream(6), true)?);
    out.extend(penalty_checks(&mut root.substream(7))?);
    out.push(total_loss_check(&mut root.substream(8), config.coords_per_tensor)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn away_from_respects_margin() {
        let t = away_from(&mut RngStream::new(1), &[500], &[0.0, 1.0], 0.3);
        assert!(t.data().iter().all(|v| v.abs() >= 0.3 && (v - 1.0).abs() >= 0.3));
    }

    #[test]
    fn accumulator_tracks_worst() {
        let mut acc = Accumulator::default();
        acc.compare(1.0, 1.0);
        acc.compare(1.0, 0.5);
        let c = acc.finish("x");
        assert_eq!((c.worst, c.checked), (0.5, 2));
        assert!(!c.passed());
    }
}
