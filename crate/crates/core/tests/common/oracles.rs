//! Finite-difference and numeric-maximization checks shared by the unit
//! level tests and the acceptance run. Each returns its worst error instead
//! of asserting so callers choose the tolerance.

use hamiltonian_control::autodiff::{Tape, Tensor, Var};
use hamiltonian_control::nn::{Layer, MlpParams, MlpSpec};
use hamiltonian_control::problems::{
    legendre_numeric, Example1, Example2, LegendreOptions, Problem, Setup,
};
use hamiltonian_control::sde::{rollout, sample_increments, StepControls, TimeGrid};
use hamiltonian_control::solver::alg1::loss_alg1;
use rand::Rng;

use super::{central_diff, rng, uniform, worst_rel};

pub const TRIALS: usize = 100;
pub const H: f64 = 1e-5;

#[derive(Clone, Copy)]
pub enum Domain {
    Range(f64, f64),
    /// `|x|` in the range, random sign; keeps samples off a kink at zero.
    AwayFromZero(f64, f64),
}

fn draw(rng: &mut impl Rng, shape: &[usize], domain: Domain) -> Tensor {
    match domain {
        Domain::Range(lo, hi) => uniform(rng, shape, lo, hi),
        Domain::AwayFromZero(lo, hi) => {
            let mut t = uniform(rng, shape, lo, hi);
            for v in t.data_mut() {
                if rng.random_bool(0.5) {
                    *v = -*v;
                }
            }
            t
        }
    }
}

fn weights_for(out: &Tensor) -> Tensor {
    let data = (0..out.len()).map(|i| 0.3 + (i as f64 * 0.7).sin()).collect();
    Tensor::new(out.shape().to_vec(), data).unwrap()
}

/// `sum(w * op(inputs))` and its gradient.
fn forward<F>(op: &F, inputs: &[Tensor], weights: Option<&Tensor>) -> (f64, Vec<Tensor>, Tensor)
where
    F: for<'t> Fn(&[Var<'t>]) -> Var<'t> + ?Sized,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = op(&vars);
    let out_value = out.to_tensor();
    let w = weights.cloned().unwrap_or_else(|| weights_for(&out_value));
    let loss = out.mul(tape.constant(w)).unwrap().sum();
    let value = loss.value().item().unwrap();
    let grads = tape.gradient(loss, &vars).unwrap();
    (value, grads, out_value)
}

/// Worst relative gradient error of `op` over [`TRIALS`] random inputs.
pub fn primitive_error<F>(name: &str, shapes: &[Vec<usize>], domain: Domain, op: &F) -> f64
where
    F: for<'t> Fn(&[Var<'t>]) -> Var<'t> + ?Sized,
{
    let mut r = rng(name.len() as u64 * 7919);
    let mut worst = 0.0f64;
    for _ in 0..TRIALS {
        let inputs: Vec<Tensor> = shapes.iter().map(|s| draw(&mut r, s, domain)).collect();
        let (_, grads, out) = forward(op, &inputs, None);
        let w = weights_for(&out);
        let numeric = central_diff(|x| forward(op, x, Some(&w)).0, &inputs, H);
        worst = worst.max(worst_rel(&grads, &numeric, 1e-8));
    }
    worst
}

pub type Op = Box<dyn for<'t> Fn(&[Var<'t>]) -> Var<'t>>;

pub struct PrimitiveCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub domain: Domain,
    pub op: Op,
}

fn case(
    name: &'static str,
    shapes: &[&[usize]],
    domain: Domain,
    op: impl for<'t> Fn(&[Var<'t>]) -> Var<'t> + 'static,
) -> PrimitiveCase {
    PrimitiveCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        domain,
        op: Box::new(op),
    }
}

/// Every differentiable tape operation.
pub fn primitive_cases() -> Vec<PrimitiveCase> {
    const M: &[usize] = &[3, 4];
    let any = Domain::Range(-2.0, 2.0);
    vec![
        case("add", &[M, M], any, |v| v[0].add(v[1]).unwrap()),
        case("sub", &[M, M], any, |v| v[0].sub(v[1]).unwrap()),
        case("mul", &[M, M], any, |v| v[0].mul(v[1]).unwrap()),
        case("mul_self", &[M], any, |v| v[0].mul(v[0]).unwrap()),
        case("neg", &[M], any, |v| v[0].neg()),
        case("scale", &[M], any, |v| v[0].scale(-2.5)),
        case("add_scalar", &[M], any, |v| v[0].add_scalar(0.75)),
        case("square", &[M], any, |v| v[0].square()),
        case("elu", &[M], Domain::AwayFromZero(0.01, 2.0), |v| v[0].elu()),
        case("cos", &[M], any, |v| v[0].cos()),
        case("sin", &[M], any, |v| v[0].sin()),
        case("tan", &[M], Domain::Range(-1.2, 1.2), |v| v[0].tan()),
        case("exp", &[M], any, |v| v[0].exp()),
        case("ln", &[M], Domain::Range(0.2, 3.0), |v| v[0].ln().unwrap()),
        case("recip", &[M], Domain::AwayFromZero(0.3, 2.0), |v| v[0].recip().unwrap()),
        case("matmul", &[&[3, 4], &[4, 5]], any, |v| v[0].matmul(v[1]).unwrap()),
        case("matmul_t", &[&[3, 4], &[5, 4]], any, |v| v[0].matmul_transposed(v[1]).unwrap()),
        case("add_row", &[&[3, 4], &[4]], any, |v| v[0].add_row(v[1]).unwrap()),
        case("affine", &[&[3, 4], &[5, 4], &[5]], any, |v| v[0].affine(v[1], v[2]).unwrap()),
        case("batch_matvec", &[&[3, 4, 2], &[3, 2]], any, |v| v[0].batch_matvec(v[1]).unwrap()),
        case("sum_last", &[M], any, |v| v[0].sum_last().unwrap()),
        case("sum", &[M], any, |v| v[0].sum()),
        case("mean", &[M], any, |v| v[0].mean()),
        case("logsumexp", &[M], Domain::Range(-5.0, 5.0), |v| v[0].logsumexp_last().unwrap()),
        case("softmax", &[M], Domain::Range(-3.0, 3.0), |v| v[0].softmax_last().unwrap()),
        case("inner", &[M, M], any, |v| v[0].inner(v[1]).unwrap()),
        case("square_norm", &[M], any, |v| v[0].square_norm().unwrap()),
        case("broadcast", &[&[3]], any, |v| v[0].broadcast_last(4)),
        case("concat", &[&[3, 2], &[3, 4]], any, |v| v[0].concat_last(v[1]).unwrap()),
        case("reshape", &[M], any, |v| v[0].reshape(&[2, 6]).unwrap()),
    ]
}

pub fn control_net(n: usize, seed: u64) -> MlpParams {
    MlpParams::init(&MlpSpec::control(n, n).with_hidden(vec![6, 6]), &mut rng(seed)).unwrap()
}

fn flat_to_params(template: &MlpParams, flat: &[Tensor]) -> MlpParams {
    MlpParams {
        spec: template.spec.clone(),
        layers: flat
            .chunks(2)
            .map(|c| Layer {
                weight: c[0].clone(),
                bias: c[1].clone(),
            })
            .collect(),
    }
}

/// Worst relative error of the terminal cost and of the full explicit-cost
/// loss through a 3-step rollout (n = 2), differentiated with respect to
/// both control networks, for Examples 1 and 2.
pub fn rollout_gradient_errors() -> Vec<(String, f64)> {
    let cases: Vec<Box<dyn Problem>> = vec![
        Box::new(Example1::from_setup(Setup::new(2, 0.1, vec![1.0, 0.5]).unwrap(), 0.3).unwrap()),
        Box::new(Example2::from_setup(Setup::new(2, 0.1, vec![1.0, 0.8]).unwrap())),
    ];
    let mut out = Vec::new();
    for (k, p) in cases.iter().enumerate() {
        let grid = TimeGrid::uniform(0.1, 3).unwrap();
        let batch = sample_increments(&grid, 4, p.brownian_dim(), 10 + k as u64).unwrap();
        let (u, v) = (control_net(2, 3), control_net(2, 4));
        let nu = u.tensors().len();
        let objective = |flat: &[Tensor], full: bool, grads: bool| -> (f64, Vec<Tensor>) {
            let (uu, vv) = (flat_to_params(&u, &flat[..nu]), flat_to_params(&v, &flat[nu..]));
            let tape = Tape::new();
            let (bu, bv) = (uu.bind(&tape, true), vv.bind(&tape, true));
            let path = rollout(p.as_ref(), &tape, &grid, &batch, |_, t, x| {
                Ok(StepControls {
                    u: bu.forward(t, x)?,
                    v: bv.forward(t, x)?,
                    y: None,
                    z: None,
                })
            })
            .unwrap();
            let loss = if full {
                loss_alg1(p.as_ref(), &path, &grid).unwrap()
            } else {
                p.terminal(path.x[3]).unwrap().mean()
            };
            let value = loss.value().item().unwrap();
            let g = if grads {
                let mut vars = bu.vars();
                vars.extend(bv.vars());
                tape.gradient(loss, &vars).unwrap()
            } else {
                Vec::new()
            };
            (value, g)
        };
        let flat: Vec<Tensor> = u.tensors().into_iter().chain(v.tensors()).cloned().collect();
        for full in [false, true] {
            let (_, analytic) = objective(&flat, full, true);
            let numeric = central_diff(|f| objective(f, full, false).0, &flat, 1e-6);
            let label = if full { "loss" } else { "terminal" };
            out.push((format!("{} {label}", p.name()), worst_rel(&analytic, &numeric, 1e-12)));
        }
    }
    out
}

/// States whose components keep `|cos|` and `|sin|` above `margin`.
pub fn trig_safe(r: &mut impl Rng, shape: &[usize], margin: f64) -> Tensor {
    let mut t = uniform(r, shape, -3.0, 3.0);
    for v in t.data_mut() {
        while v.cos().abs() < margin || v.sin().abs() < margin {
            *v = r.random_range(-3.0..3.0);
        }
    }
    t
}

pub struct LegendreError {
    pub problem: &'static str,
    pub value: f64,
    pub maximizer: f64,
}

/// Numeric inner maximization against the explicit cost and maximizer of
/// Examples 1 and 2 (n = 3) at `points` random `(x, u, v)` each.
pub fn legendre_errors(points: usize) -> Vec<LegendreError> {
    let mut r = rng(10);
    let opts = LegendreOptions::default();
    let cases: Vec<Box<dyn Problem>> = vec![
        Box::new(Example1::new(3, 0.4).unwrap()),
        Box::new(Example2::new(3).unwrap()),
    ];
    let mut out = Vec::new();
    for p in cases {
        let mut worst = LegendreError {
            problem: p.name(),
            value: 0.0,
            maximizer: 0.0,
        };
        for _ in 0..points {
            let x = trig_safe(&mut r, &[3], 0.1).into_data();
            let u = uniform(&mut r, &[3], -1.5, 1.5).into_data();
            let v = uniform(&mut r, &[3], -1.5, 1.5).into_data();
            let res = legendre_numeric(p.as_ref(), 0.0, &x, &u, &v, opts).unwrap();
            let tape = Tape::new();
            let c = |s: &[f64]| tape.constant(Tensor::repeat_row(s, 1));
            let f = p.running_cost(0.0, c(&x), c(&u), c(&v)).unwrap().value().data()[0];
            worst.value = worst.value.max((res.value - f).abs());
            let (ys, zs) = p.maximizer(0.0, c(&x), c(&u), c(&v)).unwrap().unwrap();
            let (ys, zs) = (ys.to_tensor(), zs.to_tensor());
            for (a, b) in res.y.iter().zip(ys.data()).chain(res.z.iter().zip(zs.data())) {
                worst.maximizer = worst.maximizer.max((a - b).abs());
            }
        }
        out.push(worst);
    }
    out
}

/// Max-norm gap between `K_0` from RK4 (10^4 steps) and from the
/// eigendecomposition, on random `(n <= 20, lambda in [0, 1])` instances.
pub fn riccati_cross_oracle(instances: usize, horizon: f64) -> Vec<(usize, f64, f64)> {
    use hamiltonian_control::riccati::{riccati_closed_form, solve_riccati_rk4, terminal_weight};
    let mut r = rng(31);
    (0..instances)
        .map(|_| {
            let n = r.random_range(1..=20);
            let lambda = r.random_range(0.0..=1.0);
            let q = terminal_weight(n, lambda);
            let rk = solve_riccati_rk4(&q, horizon, 10_000, false).unwrap();
            let cf = riccati_closed_form(&q, horizon).unwrap();
            (n, lambda, (&rk.k0 - &cf.k0).amax())
        })
        .collect()
}
