//! Analytic gradients against central finite differences for every tape
//! operation and for both policy network architectures.
//!
//! Errors are norm-wise: `‖a − n‖ / max(‖a‖, ‖n‖)` over one input tensor or
//! one parameter block.

use crate::autodiff::{Axes, Graph, ReduceOp, Rng, Tensor, Var};
use crate::nets::{build_ballcatch_nets, build_lava_nets, GaussianNet};

pub const STEP: f64 = 1e-5;
pub const TRIALS: u64 = 100;

/// Worst relative error seen for one named check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub trials: u64,
    pub max_rel_err: f64,
}

pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, b)| a - b));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    diff / scale.max(1e-12)
}

fn random(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(lo, hi)).collect()).expect("valid shape")
}

/// Contracts a non-scalar output with fixed weights so every output element
/// contributes to the checked scalar.
fn contract(g: &mut Graph, out: Var, weights: &Tensor) -> Var {
    let shaped = weights.clone().reshape(g.shape(out).to_vec()).expect("matching size");
    let w = g.constant(shaped);
    let p = g.mul(out, w).expect("same shape");
    g.sum(p).expect("sum")
}

/// Worst error over the inputs of `f`, the scalar being `Σ w ∘ f(inputs)`
/// for random weights drawn from `seed`.
pub fn check_op<F>(inputs: &[Tensor], seed: u64, f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |xs: &[Tensor], weights: Option<&Tensor>| -> (f64, Vec<Tensor>, Tensor) {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
        let out = f(&mut g, &vars);
        let w = match weights {
            Some(w) => w.clone(),
            None => random(&mut Rng::new(seed), &[g.value(out).numel()], -1.0, 1.0),
        };
        let loss = contract(&mut g, out, &w);
        let value = g.value(loss).data()[0];
        let grads = g.backward(loss).expect("scalar loss");
        let gs = vars.iter().zip(xs).map(|(v, x)| grads.get_or_zeros(*v, x)).collect();
        (value, gs, w)
    };
    let (_, analytic, w) = eval(inputs, None);
    let mut worst = 0.0f64;
    for (k, x) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; x.numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[i] += STEP;
            let up = eval(&xs, Some(&w)).0;
            xs[k].data_mut()[i] -= 2.0 * STEP;
            let down = eval(&xs, Some(&w)).0;
            *slot = (up - down) / (2.0 * STEP);
        }
        worst = worst.max(rel_err(analytic[k].data(), &numeric));
    }
    worst
}

/// Worst error over the parameter blocks of `net` for the scalar
/// `Σ w₁·mean + Σ w₂·log_std`.
pub fn check_net(net: &GaussianNet, primary: &Tensor, extra: &Tensor, seed: u64) -> f64 {
    let loss_of = |net: &GaussianNet, train: bool| -> (f64, Vec<Tensor>) {
        let mut g = Graph::new();
        let vars = net.bind(&mut g, train);
        let p = g.constant(primary.clone());
        let e = g.constant(extra.clone());
        let head = net.forward(&mut g, &vars, p, Some(e)).expect("forward");
        let both = g.concat(&[head.mean, head.log_std]).expect("concat");
        let w = random(&mut Rng::new(seed), &[g.value(both).numel()], -1.0, 1.0);
        let loss = contract(&mut g, both, &w);
        let value = g.value(loss).data()[0];
        if !train {
            return (value, Vec::new());
        }
        let grads = g.backward(loss).expect("scalar loss");
        let blocks = net.blocks("");
        let gs = vars.iter().zip(&blocks).map(|(v, (_, t))| grads.get_or_zeros(*v, t)).collect();
        (value, gs)
    };
    let (_, analytic) = loss_of(net, true);
    let mut work = net.clone();
    let sizes: Vec<usize> = net.blocks("").iter().map(|(_, t)| t.numel()).collect();
    let mut worst = 0.0f64;
    for (b, &size) in sizes.iter().enumerate() {
        let mut numeric = vec![0.0; size];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = work.blocks_mut("")[b].1.data()[i];
            work.blocks_mut("")[b].1.data_mut()[i] = orig + STEP;
            let up = loss_of(&work, false).0;
            work.blocks_mut("")[b].1.data_mut()[i] = orig - STEP;
            let down = loss_of(&work, false).0;
            work.blocks_mut("")[b].1.data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * STEP);
        }
        worst = worst.max(rel_err(analytic[b].data(), &numeric));
    }
    worst
}

type Body = fn(&mut Rng, u64, &mut dyn FnMut(&str, f64));

fn binary(rng: &mut Rng, seed: u64, out: &mut dyn FnMut(&str, f64)) {
    let a = random(rng, &[3, 4], -2.0, 2.0);
    let b = random(rng, &[3, 4], -2.0, 2.0);
    let s = random(rng, &[], -2.0, 2.0);
    let ab = [a.clone(), b];
    out("add", check_op(&ab, seed, |g, v| g.add(v[0], v[1]).unwrap()));
    out("sub", check_op(&ab, seed, |g, v| g.sub(v[0], v[1]).unwrap()));
    out("mul", check_op(&ab, seed, |g, v| g.mul(v[0], v[1]).unwrap()));
    out("mul broadcast", check_op(&[a, s], seed, |g, v| g.mul(v[0], v[1]).unwrap()));
}

fn unary(rng: &mut Rng, seed: u64, out: &mut dyn FnMut(&str, f64)) {
    let a = random(rng, &[2, 5], -2.0, 2.0);
    let pos = random(rng, &[2, 5], 0.2, 3.0);
    let c = rng.uniform(-3.0, 3.0);
    let one = [a.clone()];
    out("neg", check_op(&one, seed, |g, v| g.neg(v[0])));
    out("exp", check_op(&one, seed, |g, v| g.exp(v[0])));
    out("log", check_op(&[pos], seed, |g, v| g.log(v[0]).unwrap()));
    out("tanh", check_op(&one, seed, |g, v| g.tanh(v[0])));
    out("square", check_op(&one, seed, |g, v| g.square(v[0])));
    out("scale", check_op(&one, seed, |g, v| g.scale(v[0], c)));
    // Kinks at 0 and at the clamp bounds are kept clear of the probe step.
    let away = |x: f64, k: f64| if (x - k).abs() < 1e-3 { k + 0.1 } else { x };
    let mut e = a.clone();
    e.data_mut().iter_mut().for_each(|x| *x = away(*x, 0.0));
    out("elu", check_op(&[e], seed, |g, v| g.elu(v[0])));
    let mut cl = a;
    cl.data_mut().iter_mut().for_each(|x| *x = away(away(*x, -1.0), 1.0));
    out("clamp", check_op(&[cl], seed, |g, v| g.clamp(v[0], -1.0, 1.0)));
}

fn linear(rng: &mut Rng, seed: u64, out: &mut dyn FnMut(&str, f64)) {
    let a = random(rng, &[3, 4], -1.0, 1.0);
    let b = random(rng, &[4, 2], -1.0, 1.0);
    let bias = random(rng, &[2], -1.0, 1.0);
    out("matmul", check_op(&[a, b], seed, |g, v| g.matmul(v[0], v[1]).unwrap()));
    let ab = random(rng, &[3, 2], -1.0, 1.0);
    out("bias_add", check_op(&[ab, bias], seed, |g, v| g.bias_add(v[0], v[1]).unwrap()));
}

fn reductions(rng: &mut Rng, seed: u64, out: &mut dyn FnMut(&str, f64)) {
    let a = [random(rng, &[3, 4], -2.0, 2.0)];
    for op in [ReduceOp::Sum, ReduceOp::Mean, ReduceOp::LogSumExp, ReduceOp::Max] {
        for axes in [Axes::All, Axes::Dim(0), Axes::Dim(1)] {
            let err = check_op(&a, seed, |g, v| g.reduce(op, v[0], axes).unwrap());
            out(&format!("{op:?} {axes:?}"), err);
        }
    }
}

fn convolution(rng: &mut Rng, seed: u64, out: &mut dyn FnMut(&str, f64)) {
    let x = random(rng, &[2, 7, 7], -1.0, 1.0);
    let k = random(rng, &[3, 2, 3, 3], -1.0, 1.0);
    let b = random(rng, &[3], -1.0, 1.0);
    let stride = 1 + (seed % 2) as usize;
    out(
        "conv2d",
        check_op(&[x, k.clone(), b], seed, |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride).unwrap()),
    );
    let xb = random(rng, &[2, 2, 6, 6], -1.0, 1.0);
    out(
        "conv2d batched",
        check_op(&[xb, k], seed, |g, v| g.conv2d(v[0], v[1], None, 2).unwrap()),
    );
}

fn logprob(rng: &mut Rng, seed: u64, out: &mut dyn FnMut(&str, f64)) {
    let x = random(rng, &[4, 3], -2.0, 2.0);
    let m = random(rng, &[4, 3], -2.0, 2.0);
    let s = random(rng, &[4, 3], -1.5, 1.0);
    out(
        "gaussian_logprob",
        check_op(&[x, m, s], seed, |g, v| g.gaussian_logprob(v[0], v[1], v[2]).unwrap()),
    );
}

fn structural(rng: &mut Rng, seed: u64, out: &mut dyn FnMut(&str, f64)) {
    let a = random(rng, &[3, 2], -1.0, 1.0);
    let b = random(rng, &[3, 4], -1.0, 1.0);
    out("concat", check_op(&[a, b.clone()], seed, |g, v| g.concat(&[v[0], v[1]]).unwrap()));
    let one = [b];
    out("slice", check_op(&one, seed, |g, v| g.slice(v[0], 1, 2).unwrap()));
    out("reshape", check_op(&one, seed, |g, v| g.reshape(v[0], vec![4, 3]).unwrap()));
    let idx = [2, 0, 2, 1];
    out("gather_rows", check_op(&one, seed, |g, v| g.gather_rows(v[0], &idx).unwrap()));
}

fn mlp_net(rng: &mut Rng, seed: u64, out: &mut dyn FnMut(&str, f64)) {
    let p = build_lava_nets(2, 5, &mut Rng::new(seed)).expect("valid sizes");
    let y = random(rng, &[3, 2], -1.0, 5.0);
    let prev = random(rng, &[3, 2], -1.0, 1.0);
    out("mlp network", check_net(p.q_at((seed % 5) as usize), &y, &prev, seed));
}

fn conv_net(rng: &mut Rng, seed: u64, out: &mut dyn FnMut(&str, f64)) {
    let p = build_ballcatch_nets(16, 8, &mut Rng::new(seed)).expect("valid sizes");
    let img = random(rng, &[1, 3, 16, 16], 0.0, 1.0);
    let prev = random(rng, &[1, 8], -1.0, 1.0);
    out("conv network", check_net(p.q_at(0), &img, &prev, seed));
}

/// Check groups by name, in suite order.
pub const GROUPS: [&str; 9] = [
    "binary", "unary", "linear", "reductions", "conv2d", "logprob", "structural", "mlp net", "conv net",
];

fn body(group: &str) -> Option<Body> {
    Some(match group {
        "binary" => binary,
        "unary" => unary,
        "linear" => linear,
        "reductions" => reductions,
        "conv2d" => convolution,
        "logprob" => logprob,
        "structural" => structural,
        "mlp net" => mlp_net,
        "conv net" => conv_net,
        _ => return None,
    })
}

/// Runs one group over `trials` seeded trials; `None` for an unknown group.
pub fn run_group(group: &str, trials: u64) -> Option<Vec<CheckResult>> {
    let f = body(group)?;
    let mut results: Vec<CheckResult> = Vec::new();
    for trial in 0..trials {
        let seed = 1000 * trial + group.len() as u64;
        let mut rng = Rng::new(seed);
        f(&mut rng, seed, &mut |name, err| match results.iter_mut().find(|r| r.name == name) {
            Some(r) => {
                r.trials += 1;
                r.max_rel_err = r.max_rel_err.max(err);
            }
            None => results.push(CheckResult {
                name: name.to_string(),
                trials: 1,
                max_rel_err: err,
            }),
        });
    }
    Some(results)
}

/// Every group over `trials` trials.
pub fn run_suite(trials: u64) -> Vec<CheckResult> {
    GROUPS
        .iter()
        .flat_map(|g| run_group(g, trials).expect("known group"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_is_normwise() {
        assert_eq!(rel_err(&[3.0, 4.0], &[3.0, 4.0]), 0.0);
        assert!((rel_err(&[3.0, 4.0], &[3.0, 3.0]) - 0.2).abs() < 1e-15);
        assert_eq!(rel_err(&[0.0], &[0.0]), 0.0);
    }

    #[test]
    fn a_wrong_gradient_is_detected() {
        // `sum(x ∘ stop(x))` has gradient x, not 2x, so against the
        // differences of x² the error is ½.
        let x = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let err = check_op(&[x], 3, |g, v| {
            let c = g.constant(g.value(v[0]).clone());
            g.mul(v[0], c).unwrap()
        });
        assert!(err > 0.3, "{err}");
    }

    #[test]
    fn single_trial_passes() {
        for r in run_group("linear", 1).unwrap() {
            assert!(r.max_rel_err < 1e-6, "{r:?}");
        }
        assert!(run_group("nope", 1).is_none());
    }
}
