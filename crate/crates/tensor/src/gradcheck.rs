//! Central finite-difference gradient verification.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Denominator floor for the relative error, so that near-zero gradients are
/// compared in absolute terms.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest elementwise relative error per parameter tensor.
    pub max_relative_error: Vec<f64>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_relative_error.iter().copied().fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Analytic gradients of the scalar built by `f` at `params`.
pub fn analytic_gradients<F>(f: &F, params: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let mut grads = g.backward(out)?;
    Ok(vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect())
}

/// Central differences `(f(x + h) − f(x − h)) / 2h` for every entry.
pub fn numeric_gradients<F>(f: &F, params: &[Tensor], h: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut work: Vec<Tensor> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut grad = vec![0.0; params[pi].len()];
        for (j, slot) in grad.iter_mut().enumerate() {
            let orig = params[pi].data()[j];
            work[pi].data_mut()[j] = orig + h;
            let up = evaluate(f, &work)?;
            work[pi].data_mut()[j] = orig - h;
            let down = evaluate(f, &work)?;
            work[pi].data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        out.push(Tensor::new(params[pi].shape().to_vec(), grad)?);
    }
    Ok(out)
}

pub fn compare(analytic: &[Tensor], numeric: &[Tensor], tol: f64) -> GradCheckReport {
    let max_relative_error: Vec<f64> = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            a.data()
                .iter()
                .zip(n.data())
                .map(|(x, y)| relative_error(*x, *y))
                .fold(0.0, f64::max)
        })
        .collect();
    let passed = max_relative_error.iter().all(|&e| e <= tol);
    GradCheckReport {
        max_relative_error,
        tolerance: tol,
        passed,
    }
}

/// Checks backward against central differences with step `h`.
pub fn gradient_check<F>(f: F, params: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let a = analytic_gradients(&f, params)?;
    let n = numeric_gradients(&f, params, h)?;
    Ok(compare(&a, &n, tol))
}

/// Result of checking one op on one random instance.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: &'static str,
    pub report: GradCheckReport,
}

/// Random matrix whose entries stay clear of the ReLU and |x| kinks.
pub fn away_from_zero<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.5);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

/// `sum(x * w)` with `w` drawn once, so every output entry receives a
/// distinct upstream gradient.
fn projector<R: Rng + ?Sized>(rng: &mut R) -> impl Fn(&mut Graph, Var) -> Result<Var> {
    let draws: Vec<f64> = (0..4096).map(|_| rng.random_range(-1.0..1.0)).collect();
    move |g: &mut Graph, x: Var| {
        let t = g.value(x);
        let w = Tensor::new(t.shape().to_vec(), draws[..t.len()].to_vec())?;
        let w = g.constant(w);
        let p = g.mul(x, w)?;
        g.sum(p)
    }
}

/// Gradient-checks every differentiable op of [`Graph`] on one random
/// `rows x cols` instance (`cols` even exercises `gather_blocks`).
pub fn check_ops<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, h: f64, tol: f64) -> Result<Vec<OpCheck>> {
    let (r, c) = (rows, cols);
    let a = away_from_zero(rng, r, c);
    let b = away_from_zero(rng, r, c);
    let m = away_from_zero(rng, c, r + 1);
    let mt = away_from_zero(rng, r + 1, c);
    let row = away_from_zero(rng, 1, c).reshape(&[c])?;
    let index: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
    let picks: Vec<usize> = (0..r + 2).map(|_| rng.random_range(0..r)).collect();
    let mask: Vec<bool> = (0..r * c).map(|i| i == 0 || rng.random_bool(0.6)).collect();
    let project = projector(rng);
    let p = &project;
    let mut out = Vec::new();
    let mut check = |op: &'static str, f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>, params: &[Tensor]| -> Result<()> {
        let report = gradient_check(f, params, h, tol)?;
        out.push(OpCheck { op, report });
        Ok(())
    };
    check("matmul", &|g, v| { let y = g.matmul(v[0], v[1])?; p(g, y) }, &[a.clone(), m])?;
    check("matmul_t", &|g, v| { let y = g.matmul_t(v[0], v[1])?; p(g, y) }, &[a.clone(), mt])?;
    check("add", &|g, v| { let y = g.add(v[0], v[1])?; p(g, y) }, &[a.clone(), b.clone()])?;
    check("add_row", &|g, v| { let y = g.add(v[0], v[1])?; p(g, y) }, &[a.clone(), row])?;
    check("sub", &|g, v| { let y = g.sub(v[0], v[1])?; p(g, y) }, &[a.clone(), b.clone()])?;
    check("mul", &|g, v| { let y = g.mul(v[0], v[1])?; p(g, y) }, &[a.clone(), b.clone()])?;
    check("scale", &|g, v| { let y = g.scale(v[0], -1.7)?; p(g, y) }, &[a.clone()])?;
    check("relu", &|g, v| { let y = g.relu(v[0])?; p(g, y) }, &[a.clone()])?;
    check("square", &|g, v| { let y = g.square(v[0])?; p(g, y) }, &[a.clone()])?;
    check("transpose", &|g, v| { let y = g.transpose(v[0])?; p(g, y) }, &[a.clone()])?;
    for axis in 0..2 {
        check("log_softmax", &|g, v| { let y = g.log_softmax(v[0], axis)?; p(g, y) }, &[a.clone()])?;
        check("logsumexp", &|g, v| { let y = g.logsumexp(v[0], axis)?; p(g, y) }, &[a.clone()])?;
        check("sum_axis", &|g, v| { let y = g.sum_axis(v[0], axis)?; p(g, y) }, &[a.clone()])?;
        check("l1_norm", &|g, v| { let y = g.l1_norm(v[0], axis)?; p(g, y) }, &[a.clone()])?;
    }
    check("mean", &|g, v| g.mean(v[0]), &[a.clone()])?;
    check("sum", &|g, v| g.sum(v[0]), &[a.clone()])?;
    check("masked_logsumexp", &|g, v| g.masked_logsumexp(v[0], mask.clone()), &[a.clone()])?;
    check("gather", &|g, v| { let y = g.gather(v[0], index.clone())?; p(g, y) }, &[a.clone()])?;
    check("gather_rows", &|g, v| { let y = g.gather_rows(v[0], picks.clone())?; p(g, y) }, &[a.clone()])?;
    if c % 2 == 0 {
        let blocks: Vec<usize> = (0..r).map(|i| i % 2).collect();
        check("gather_blocks", &|g, v| { let y = g.gather_blocks(v[0], blocks.clone(), c / 2)?; p(g, y) }, &[a.clone()])?;
    }
    check("cosine_similarity", &|g, v| { let y = g.cosine_similarity(v[0], v[1])?; p(g, y) }, &[a.clone(), b])?;
    check("l2_normalize_rows", &|g, v| { let y = g.l2_normalize_rows(v[0])?; p(g, y) }, &[a])?;
    Ok(out)
}
