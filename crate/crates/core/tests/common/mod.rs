#![allow(dead_code)]

use divis::{Graph, Result, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, &mut rng(seed))
}

/// Relative error with a small floor so entries near zero compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| rel_err(*x, *y)).fold(0.0, f64::max)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Compare reverse-mode gradients of a scalar function of several inputs
/// against central differences. Returns the largest relative error.
pub fn grad_check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, &vars).unwrap();
        g.value(out).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
    let out = f(&mut g, &vars).unwrap();
    g.backward(out).unwrap();
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}

/// Direct nested-loop cross-correlation with zero padding.
pub fn reference_conv(x: &Tensor, k: &Tensor, bias: Option<&[f64]>, stride: usize, pad: usize) -> Tensor {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ko, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; b * ko * oh * ow];
    for bi in 0..b {
        for o in 0..ko {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = bias.map_or(0.0, |bs| bs[o]);
                    for ci in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let yy = (y * stride + i) as isize - pad as isize;
                                let xx = (xo * stride + j) as isize - pad as isize;
                                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                let xv = x.data()[((bi * c + ci) * h + yy as usize) * w + xx as usize];
                                let kv = k.data()[((o * c + ci) * kh + i) * kw + j];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((bi * ko + o) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    Tensor::new(&[b, ko, oh, ow], out).unwrap()
}

/// Reduce any output to a scalar with fixed random weights so every entry
/// contributes to the gradient.
pub fn weigh(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let w = randn(g.shape(v), seed);
    let w = g.constant(w);
    g.dot(v, w)
}

/// Push entries away from zero so ReLU kinks stay out of the difference
/// stencil.
pub fn away_from_zero(t: Tensor, gap: f64) -> Tensor {
    t.map(|v| if v.abs() >= gap { v } else if v >= 0.0 { gap } else { -gap })
}

/// Central-difference check of every differentiable op, the prior and the
/// full synthesis objective. Returns (name, max relative error).
pub fn fd_suite() -> Vec<(&'static str, f64)> {
    use divis::gabor::GaborParams;
    use divis::prior::PriorModel;
    use divis::synthesis::{diversity_term, DiversityMode};
    use divis::units::{EnergyCell, HubelWieselCell, HubelWieselParams, Unit};
    use divis::PoolKind;

    let mut out: Vec<(&'static str, f64)> = Vec::new();
    let a = randn(&[2, 3, 4], 1);
    let b = randn(&[2, 3, 4], 2);
    let tail = randn(&[3, 4], 3);
    out.push(("add", grad_check(&[a.clone(), tail.clone()], |g, v| {
        let s = g.add(v[0], v[1])?;
        weigh(g, s, 10)
    })));
    out.push(("sub", grad_check(&[a.clone(), b.clone()], |g, v| {
        let s = g.sub(v[0], v[1])?;
        weigh(g, s, 11)
    })));
    out.push(("mul", grad_check(&[a.clone(), tail.clone()], |g, v| {
        let s = g.mul(v[0], v[1])?;
        weigh(g, s, 12)
    })));
    out.push(("scale", grad_check(std::slice::from_ref(&a), |g, v| {
        let s = g.scale(v[0], -2.5);
        weigh(g, s, 13)
    })));
    let kinked = away_from_zero(a.clone(), 0.01);
    out.push(("relu", grad_check(&[kinked], |g, v| {
        let s = g.relu(v[0]);
        weigh(g, s, 14)
    })));
    out.push(("square", grad_check(std::slice::from_ref(&a), |g, v| {
        let s = g.square(v[0]);
        weigh(g, s, 15)
    })));
    out.push(("sum", grad_check(std::slice::from_ref(&a), |g, v| {
        let s = g.square(v[0]);
        Ok(g.sum(s))
    })));
    out.push(("mean", grad_check(std::slice::from_ref(&a), |g, v| {
        let s = g.square(v[0]);
        Ok(g.mean(s))
    })));
    out.push(("sum_items", grad_check(std::slice::from_ref(&a), |g, v| {
        let s = g.sum_items(v[0])?;
        weigh(g, s, 16)
    })));
    out.push(("dot", grad_check(&[a.clone(), b.clone()], |g, v| g.dot(v[0], v[1]))));
    out.push(("l2norm", grad_check(std::slice::from_ref(&a), |g, v| Ok(g.l2norm(v[0])))));
    out.push(("reshape", grad_check(std::slice::from_ref(&a), |g, v| {
        let s = g.reshape(v[0], &[4, 6])?;
        weigh(g, s, 17)
    })));
    let x = randn(&[2, 2, 7, 6], 4);
    let k = randn(&[3, 2, 3, 2], 5);
    let bias = randn(&[3], 6);
    out.push(("conv2d", grad_check(&[x.clone(), k, bias], |g, v| {
        let s = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
        weigh(g, s, 18)
    })));
    out.push(("max_pool", grad_check(std::slice::from_ref(&x), |g, v| {
        let s = g.pool2d(v[0], PoolKind::Max, 2, 2)?;
        weigh(g, s, 19)
    })));
    out.push(("avg_pool", grad_check(std::slice::from_ref(&x), |g, v| {
        let s = g.pool2d(v[0], PoolKind::Avg, 3, 2)?;
        weigh(g, s, 20)
    })));
    out.push(("crop", grad_check(std::slice::from_ref(&x), |g, v| {
        let s = g.crop(v[0], 1, 2, 4, 3)?;
        weigh(g, s, 21)
    })));
    let single = randn(&[1, 2, 6, 7], 7);
    out.push(("unfold", grad_check(&[single], |g, v| {
        let s = g.unfold(v[0], 3, 2)?;
        weigh(g, s, 22)
    })));
    out.push(("channel", grad_check(std::slice::from_ref(&x), |g, v| {
        let s = g.channel(v[0], 1)?;
        weigh(g, s, 23)
    })));
    out.push(("row", grad_check(std::slice::from_ref(&a), |g, v| {
        let s = g.row(v[0], 1)?;
        weigh(g, s, 24)
    })));
    let feats = randn(&[5, 6], 8);
    out.push(("pairwise_distances", grad_check(std::slice::from_ref(&feats), |g, v| {
        let s = g.pairwise_distances(v[0])?;
        weigh(g, s, 25)
    })));
    out.push(("min", grad_check(&[feats], |g, v| {
        let d = g.pairwise_distances(v[0])?;
        g.min(d)
    })));
    let img = randn(&[1, 1, 6, 6], 9);
    let kern = randn(&[1, 1, 3, 3], 26);
    let mut probe = Graph::new();
    let (xi, ki) = (probe.constant(img.clone()), probe.constant(kern.clone()));
    let pre = probe.conv2d(xi, ki, None, 1, 0).unwrap();
    assert!(probe.value(pre).data().iter().all(|v| v.abs() > 1e-6), "conv output too close to the ReLU kink");
    out.push(("conv2d_relu_sum", grad_check(&[img], move |g, v| {
        let k = g.constant(kern.clone());
        let c = g.conv2d(v[0], k, None, 1, 0)?;
        let r = g.relu(c);
        Ok(g.sum(r))
    })));
    out.push(("smoothness_prior", grad_check(&[randn(&[2, 1, 6, 6], 27)], |g, v| {
        PriorModel::Smoothness.log_prob_batch(g, v[0])
    })));
    let objective = |unit: &dyn Unit, mode: DiversityMode| {
        let batch = randn(&[4, 1, 16, 16], 28);
        grad_check(&[batch], move |g, v| {
            let o = unit.forward(g, v[0])?;
            let act = g.sum(o.activation);
            let lp = PriorModel::Smoothness.log_prob_batch(g, v[0])?;
            let lp = g.scale(lp, 0.0005);
            let div = diversity_term(g, o.features, mode)?;
            let div = g.scale(div, 2.0);
            let s = g.add(act, lp)?;
            g.add(s, div)
        })
    };
    let energy = EnergyCell::new(GaborParams::default()).unwrap();
    out.push(("objective_energy_min", objective(&energy, DiversityMode::Min)));
    out.push(("objective_energy_average", objective(&energy, DiversityMode::Average)));
    let hw = HubelWieselCell::new(HubelWieselParams { k: 16, ..Default::default() }).unwrap();
    out.push(("objective_hubel_wiesel_min", objective(&hw, DiversityMode::Min)));
    out
}
