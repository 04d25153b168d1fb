//! Central-difference gradient checking.

use super::{Rng, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of
    /// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_relative_error: f64,
    pub worst_coordinate: usize,
    /// Tape and central-difference derivatives at the worst coordinate.
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
}

fn eval<F>(f: &F, point: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), false);
    let y = f(&mut tape, x)?;
    tape.value(y).item()
}

/// Checks the tape gradient of the scalar function `f` at `point` against
/// central differences with step `eps`, on all coordinates.
pub fn finite_diff_check<F>(f: F, point: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..point.numel()).collect();
    Ok(finite_diff_check_coords(f, point, eps, &coords)?.max_relative_error)
}

/// Like [`finite_diff_check`] but only on the listed flat coordinates.
pub fn finite_diff_check_coords<F>(f: F, point: &Tensor<f64>, eps: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let y = f(&mut tape, x)?;
    let f0 = tape.value(y).item()?;
    let grads = tape.backward(y)?;
    let analytic = grads.get(x).expect("leaf requires grad").to_vec();
    drop(tape);

    let again = eval(&f, point)?;
    if again.to_bits() != f0.to_bits() {
        return Err(Error::Contract(format!(
            "function is not deterministic: {f0} then {again} at the same point"
        )));
    }

    let base = point.to_vec();
    let mut report = GradCheckReport { max_relative_error: 0.0, worst_coordinate: 0, worst_analytic: 0.0, worst_numeric: 0.0, checked: 0 };
    for &c in coords {
        if c >= base.len() {
            return Err(Error::Contract(format!("coordinate {c} out of range {}", base.len())));
        }
        let mut probe = base.clone();
        probe[c] = base[c] + eps;
        let plus = eval(&f, &Tensor::from_vec(point.shape().to_vec(), probe.clone())?)?;
        probe[c] = base[c] - eps;
        let minus = eval(&f, &Tensor::from_vec(point.shape().to_vec(), probe)?)?;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[c];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > report.max_relative_error || report.checked == 0 {
            report.max_relative_error = rel;
            report.worst_coordinate = c;
            report.worst_analytic = a;
            report.worst_numeric = numeric;
        }
        report.checked += 1;
    }
    Ok(report)
}

/// `count` distinct coordinates below `n`, drawn with `rng` (all of them
/// when `count >= n`).
pub fn sample_coordinates(n: usize, count: usize, rng: &mut Rng) -> Vec<usize> {
    let mut all: Vec<usize> = (0..n).collect();
    let take = count.min(n);
    for i in 0..take {
        let j = i + rng.below((n - i) as u64) as usize;
        all.swap(i, j);
    }
    all.truncate(take);
    all
}

type CaseFn = Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>;

/// One differentiable op wrapped as a scalar function of a random point.
pub struct OpCase {
    pub name: &'static str,
    pub shape: Vec<usize>,
    /// Sampling interval for the point's coordinates.
    pub range: (f64, f64),
    f: CaseFn,
}

impl OpCase {
    fn new(
        name: &'static str,
        shape: &[usize],
        range: (f64, f64),
        f: impl Fn(&mut Tape<f64>, Var) -> Result<Var> + 'static,
    ) -> Self {
        OpCase { name, shape: shape.to_vec(), range, f: Box::new(f) }
    }

    pub fn eval(&self, tape: &mut Tape<f64>, x: Var) -> Result<Var> {
        (self.f)(tape, x)
    }
}

/// Reduces `y` to a scalar with fixed pseudo-random weights, so every output
/// coordinate contributes with a distinct sensitivity.
pub fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let mut rng = Rng::new(seed);
    let n = super::numel(&shape);
    // weights of magnitude in [0.5, 1.5] keep linear ops away from zero gradients
    let w: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.uniform(0.5, 1.5);
            if rng.next_u64() & 1 == 0 { m } else { -m }
        })
        .collect();
    let w = tape.constant(Tensor::from_vec(shape, w)?);
    let p = tape.mul(y, w)?;
    Ok(tape.sum_all(p))
}

/// Splits the leading axis of `x` into two operands of shape `shape`.
fn halves(tape: &mut Tape<f64>, x: Var, shape: &[usize]) -> Result<(Var, Var)> {
    let a = tape.slice(x, 0, 0, 1)?;
    let b = tape.slice(x, 0, 1, 1)?;
    Ok((tape.reshape(a, shape)?, tape.reshape(b, shape)?))
}

/// Every differentiable tensor op, each as a scalar function for
/// [`finite_diff_check`].
pub fn op_suite() -> Vec<OpCase> {
    let sym = (-2.0, 2.0);
    let pos = (0.5, 2.0);
    vec![
        OpCase::new("add", &[2, 3, 4], sym, |t, x| {
            let (a, b) = halves(t, x, &[3, 4])?;
            let y = t.add(a, b)?;
            project(t, y, 1)
        }),
        OpCase::new("add_broadcast", &[2, 3, 4], sym, |t, x| {
            let (a, b) = halves(t, x, &[3, 4])?;
            let a = t.reshape(a, &[1, 3, 4])?;
            let b = t.slice(b, 0, 0, 1)?;
            let b = t.reshape(b, &[1, 1, 4])?;
            let y = t.add(a, b)?;
            project(t, y, 2)
        }),
        OpCase::new("sub", &[2, 5], sym, |t, x| {
            let (a, b) = halves(t, x, &[5])?;
            let y = t.sub(a, b)?;
            project(t, y, 3)
        }),
        OpCase::new("mul_broadcast", &[2, 2, 3, 2], sym, |t, x| {
            let (a, b) = halves(t, x, &[2, 3, 2])?;
            let b = t.slice(b, 1, 0, 1)?;
            let y = t.mul(a, b)?;
            project(t, y, 4)
        }),
        OpCase::new("div", &[2, 6], pos, |t, x| {
            let (a, b) = halves(t, x, &[6])?;
            let y = t.div(a, b)?;
            project(t, y, 5)
        }),
        OpCase::new("scale_add_scalar", &[5], sym, |t, x| {
            let y = t.scale(x, -1.7);
            let y = t.add_scalar(y, 0.3);
            project(t, y, 6)
        }),
        OpCase::new("square_neg", &[6], sym, |t, x| {
            let y = t.square(x);
            let y = t.neg(y);
            project(t, y, 35)
        }),
        OpCase::new("exp", &[6], sym, |t, x| {
            let y = t.exp(x)?;
            project(t, y, 7)
        }),
        OpCase::new("log", &[6], pos, |t, x| {
            let y = t.log(x)?;
            project(t, y, 8)
        }),
        OpCase::new("sigmoid", &[6], sym, |t, x| {
            let y = t.sigmoid(x);
            project(t, y, 9)
        }),
        OpCase::new("leaky_relu", &[8], sym, |t, x| {
            let y = t.leaky_relu(x, 0.01);
            project(t, y, 10)
        }),
        OpCase::new("relu", &[8], sym, |t, x| {
            let y = t.relu(x);
            project(t, y, 11)
        }),
        OpCase::new("gelu", &[8], sym, |t, x| {
            let y = t.gelu(x);
            project(t, y, 12)
        }),
        OpCase::new("clamp", &[6], (-0.9, 0.9), |t, x| {
            let y = t.clamp(x, -1.0, 1.0);
            project(t, y, 13)
        }),
        OpCase::new("matmul", &[2, 2, 3, 3], sym, |t, x| {
            let (a, b) = halves(t, x, &[2, 3, 3])?;
            let y = t.matmul(a, b)?;
            project(t, y, 14)
        }),
        OpCase::new("matmul_broadcast", &[2, 12], sym, |t, x| {
            let (a, b) = halves(t, x, &[12])?;
            let a = t.reshape(a, &[2, 2, 3])?;
            let b = t.slice(b, 0, 0, 6)?;
            let b = t.reshape(b, &[3, 2])?;
            let y = t.matmul(a, b)?;
            project(t, y, 15)
        }),
        OpCase::new("linear", &[3, 4, 3], sym, |t, x| {
            let inp = t.slice(x, 0, 0, 1)?;
            let inp = t.reshape(inp, &[2, 2, 3])?;
            let w = t.slice(x, 0, 1, 1)?;
            let w = t.reshape(w, &[4, 3])?;
            let b = t.slice(x, 0, 2, 1)?;
            let b = t.slice(b, 2, 0, 1)?;
            let b = t.reshape(b, &[4])?;
            let y = t.linear(inp, w, Some(b))?;
            project(t, y, 16)
        }),
        OpCase::new("reshape_permute", &[2, 3, 4], sym, |t, x| {
            let y = t.permute(x, &[2, 0, 1])?;
            let y = t.reshape(y, &[8, 3])?;
            project(t, y, 17)
        }),
        OpCase::new("concat", &[2, 3, 2], sym, |t, x| {
            let (a, b) = halves(t, x, &[3, 2])?;
            let y = t.concat(&[a, b, a], 1)?;
            project(t, y, 18)
        }),
        OpCase::new("slice_pad", &[3, 4], sym, |t, x| {
            let y = t.slice(x, 1, 1, 2)?;
            let y = t.pad(y, &[(1, 0), (2, 1)])?;
            project(t, y, 19)
        }),
        OpCase::new("sum_mean", &[2, 3, 4], sym, |t, x| {
            let s = t.sum(x, &[0, 2])?;
            let m = t.mean(x, &[1])?;
            let a = project(t, s, 20)?;
            let b = project(t, m, 21)?;
            t.add(a, b)
        }),
        OpCase::new("softmax", &[3, 4], sym, |t, x| {
            let a = t.softmax(x, 1)?;
            let b = t.softmax(x, 0)?;
            let a = project(t, a, 22)?;
            let b = project(t, b, 23)?;
            t.add(a, b)
        }),
        OpCase::new("conv3d", &[1, 2, 4, 4, 4], sym, |t, x| {
            let w = Tensor::build(super::Init::Normal { mean: 0.0, std: 0.5 }, [3, 2, 3, 3, 3], Some(&mut Rng::new(24)))?;
            let w = t.constant(w);
            let y = t.conv3d(x, w, None, 1, 1)?;
            project(t, y, 25)
        }),
        OpCase::new("conv3d_weight_bias_strided", &[1, 1, 3, 3, 3], sym, |t, x| {
            let inp = Tensor::build(super::Init::Normal { mean: 0.0, std: 1.0 }, [2, 1, 5, 4, 6], Some(&mut Rng::new(26)))?;
            let inp = t.constant(inp);
            let b = t.slice(x, 4, 0, 1)?;
            let b = t.slice(b, 3, 0, 1)?;
            let b = t.slice(b, 2, 0, 1)?;
            let b = t.reshape(b, &[1])?;
            let y = t.conv3d(inp, x, Some(b), 2, 1)?;
            project(t, y, 27)
        }),
        OpCase::new("upsample_trilinear", &[1, 2, 2, 3, 2], sym, |t, x| {
            let y = t.upsample2(x, super::ResampleMode::Trilinear)?;
            project(t, y, 28)
        }),
        OpCase::new("resample_nearest", &[1, 1, 2, 2, 3], sym, |t, x| {
            let y = t.resample(x, super::ResampleMode::Nearest, [4, 3, 6])?;
            project(t, y, 29)
        }),
        OpCase::new("instance_norm3d", &[2, 2, 2, 2, 3], sym, |t, x| {
            let g = t.constant(Tensor::from_f64([2], &[1.3, -0.7])?);
            let b = t.constant(Tensor::from_f64([2], &[0.1, 0.2])?);
            let y = t.instance_norm3d(x, g, b, 1e-5)?;
            project(t, y, 30)
        }),
        OpCase::new("group_norm_affine", &[2, 4], sym, |t, x| {
            let inp = Tensor::build(super::Init::Normal { mean: 0.0, std: 1.0 }, [2, 4, 1, 2, 1], Some(&mut Rng::new(31)))?;
            let inp = t.constant(inp);
            let g = t.slice(x, 0, 0, 1)?;
            let g = t.reshape(g, &[4])?;
            let b = t.slice(x, 0, 1, 1)?;
            let b = t.reshape(b, &[4])?;
            let y = t.group_norm(inp, g, b, 2, 1e-5)?;
            project(t, y, 32)
        }),
        OpCase::new("group_norm_input", &[2, 4, 1, 1, 1], sym, |t, x| {
            let g = t.constant(Tensor::from_f64([4], &[1.0, 0.5, -1.5, 2.0])?);
            let b = t.constant(Tensor::from_f64([4], &[0.0, 0.1, 0.2, 0.3])?);
            let y = t.group_norm(x, g, b, 1, 1e-5)?;
            project(t, y, 33)
        }),
        OpCase::new("layer_norm", &[3, 5], sym, |t, x| {
            let g = t.constant(Tensor::from_f64([5], &[1.0, 0.5, -1.5, 2.0, 0.7])?);
            let b = t.constant(Tensor::from_f64([5], &[0.0, 0.1, 0.2, 0.3, 0.4])?);
            let y = t.layer_norm(x, g, b, 1e-5)?;
            project(t, y, 34)
        }),
    ]
}

/// Runs every case of [`op_suite`] on `instances` random points and returns
/// the worst relative error per op.
pub fn run_op_suite(instances: usize, seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = Rng::new(seed);
    op_suite()
        .into_iter()
        .map(|case| {
            let mut worst = 0.0f64;
            for _ in 0..instances {
                let (lo, hi) = case.range;
                let point = Tensor::build(super::Init::Uniform { lo, hi }, case.shape.clone(), Some(&mut rng))?;
                worst = worst.max(finite_diff_check(|t, x| case.eval(t, x), &point, 1e-5)?);
            }
            Ok((case.name, worst))
        })
        .collect()
}
