use super::{Tape, Tensor, Var};
use crate::error::Result;

/// A scalar function of a parameter set with a claimed analytic gradient.
pub trait Differentiable {
    fn value(&self, params: &[Tensor]) -> Result<f64>;
    fn gradient(&self, params: &[Tensor]) -> Result<Vec<Vec<f64>>>;
}

/// Adapts a closure that records a scalar loss on a tape.
pub struct TapeProgram<F>(pub F);

impl<F> Differentiable for TapeProgram<F>
where
    F: for<'a> Fn(&mut Tape<'a>, &[Var]) -> Result<Var>,
{
    fn value(&self, params: &[Tensor]) -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf_ref(p, false)).collect();
        let loss = (self.0)(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    }

    fn gradient(&self, params: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf_ref(p, true)).collect();
        let loss = (self.0)(&mut tape, &vars)?;
        let grads = tape.backward(loss)?;
        Ok(vars.iter().map(|&v| grads.wrt(v)).collect())
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    /// `max_i |analytic_i - numeric_i| / max(max|analytic|, max|numeric|)`
    pub max_rel_err: f64,
    pub finite: bool,
}

impl ParamCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.finite && self.max_rel_err < tol
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed(self.tol))
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| {
            let ka = if a.finite { a.max_rel_err } else { f64::INFINITY };
            let kb = if b.finite { b.max_rel_err } else { f64::INFINITY };
            ka.total_cmp(&kb)
        })
    }

    pub fn failures(&self) -> Vec<&str> {
        self.params.iter().filter(|p| !p.passed(self.tol)).map(|p| p.name.as_str()).collect()
    }
}

const SCALE_FLOOR: f64 = 1e-10;

/// Compares the analytic gradient against central differences with `step`
/// on every element of every parameter.
pub fn grad_check(
    f: &dyn Differentiable,
    names: &[String],
    params: &[Tensor],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let analytic = f.gradient(params)?;
    let mut work = params.to_vec();
    let mut report = Vec::with_capacity(params.len());
    for (p, name) in names.iter().enumerate() {
        let a = &analytic[p];
        if a.iter().any(|v| !v.is_finite()) {
            report.push(ParamCheck { name: name.clone(), max_rel_err: f64::INFINITY, finite: false });
            continue;
        }
        let mut numeric = vec![0.0; a.len()];
        for i in 0..a.len() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + step;
            let plus = f.value(&work)?;
            work[p].data_mut()[i] = orig - step;
            let minus = f.value(&work)?;
            work[p].data_mut()[i] = orig;
            numeric[i] = (plus - minus) / (2.0 * step);
        }
        let scale = a
            .iter()
            .chain(&numeric)
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(SCALE_FLOOR);
        let diff = a.iter().zip(&numeric).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        report.push(ParamCheck { name: name.clone(), max_rel_err: diff / scale, finite: true });
    }
    Ok(GradCheckReport { params: report, tol })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn quadratic_bowl_passes_tight() {
        let prog = TapeProgram(|tape: &mut Tape<'_>, v: &[Var]| {
            let sq = tape.mul(v[0], v[0])?;
            Ok(tape.sum(sq))
        });
        let p = vec![Tensor::new(&[4], vec![0.3, -1.5, 2.0, 0.01]).unwrap()];
        let r = grad_check(&prog, &names(1), &p, 1e-5, 1e-8).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    struct Corrupted;
    impl Differentiable for Corrupted {
        fn value(&self, p: &[Tensor]) -> Result<f64> {
            Ok(p[0].data().iter().map(|x| x * x).sum())
        }
        fn gradient(&self, p: &[Tensor]) -> Result<Vec<Vec<f64>>> {
            // wrong rule: d/dx x^2 taken as x
            Ok(vec![p[0].data().to_vec()])
        }
    }

    struct NonFinite;
    impl Differentiable for NonFinite {
        fn value(&self, _: &[Tensor]) -> Result<f64> {
            Ok(0.0)
        }
        fn gradient(&self, p: &[Tensor]) -> Result<Vec<Vec<f64>>> {
            Ok(vec![vec![f64::NAN; p[0].numel()]])
        }
    }

    #[test]
    fn corrupted_backward_fails() {
        let p = vec![Tensor::new(&[3], vec![0.5, 1.0, -2.0]).unwrap()];
        let r = grad_check(&Corrupted, &names(1), &p, 1e-5, 1e-4).unwrap();
        assert!(!r.passed());
        let r = grad_check(&NonFinite, &["weights".to_string()], &p, 1e-5, 1e-4).unwrap();
        assert_eq!(r.failures(), vec!["weights"]);
    }

    #[test]
    fn matmul_sum_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (m, k, n) in [(2, 3, 4), (1, 5, 1), (4, 4, 2)] {
            let prog = TapeProgram(|tape: &mut Tape<'_>, v: &[Var]| {
                let c = tape.matmul(v[0], v[1])?;
                Ok(tape.sum(c))
            });
            let p = vec![random(&mut rng, &[m, k]), random(&mut rng, &[k, n])];
            let r = grad_check(&prog, &names(2), &p, 1e-5, 1e-6).unwrap();
            assert!(r.passed(), "{r:?}");

            let prog = TapeProgram(|tape: &mut Tape<'_>, v: &[Var]| {
                let c = tape.matmul_nt(v[0], v[1])?;
                let c2 = tape.mul(c, c)?;
                Ok(tape.sum(c2))
            });
            let p = vec![random(&mut rng, &[m, k]), random(&mut rng, &[n, k])];
            let r = grad_check(&prog, &names(2), &p, 1e-5, 1e-6).unwrap();
            assert!(r.passed(), "{r:?}");
        }
    }

    /// Weighted sum so the gradient of row-normalizing ops is not trivially zero.
    fn weighted(tape: &mut Tape<'_>, x: Var, w: &Tensor) -> Result<Var> {
        let wv = tape.leaf(w.clone(), false);
        let p = tape.mul(x, wv)?;
        Ok(tape.sum(p))
    }

    #[test]
    fn elementwise_and_row_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for shape in [[1usize, 3], [2, 5], [4, 2]] {
            let w = random(&mut rng, &shape);
            let d = shape[1];

            let prog = TapeProgram(|tape: &mut Tape<'_>, v: &[Var]| {
                let y = tape.layer_norm(v[0], v[1], v[2])?;
                weighted(tape, y, &w)
            });
            let p = vec![random(&mut rng, &shape), random(&mut rng, &[d]), random(&mut rng, &[d])];
            let r = grad_check(&prog, &names(3), &p, 1e-5, 1e-6).unwrap();
            assert!(r.passed(), "layer_norm {shape:?} {r:?}");

            let prog = TapeProgram(|tape: &mut Tape<'_>, v: &[Var]| {
                let y = tape.gelu(v[0]);
                weighted(tape, y, &w)
            });
            let p = vec![random(&mut rng, &shape)];
            let r = grad_check(&prog, &names(1), &p, 1e-5, 1e-6).unwrap();
            assert!(r.passed(), "gelu {shape:?} {r:?}");

            let prog = TapeProgram(|tape: &mut Tape<'_>, v: &[Var]| {
                let y = tape.softmax(v[0]);
                weighted(tape, y, &w)
            });
            let r = grad_check(&prog, &names(1), &p, 1e-5, 1e-6).unwrap();
            assert!(r.passed(), "softmax {shape:?} {r:?}");

            let targets: Vec<usize> = (0..shape[0]).map(|i| i % d).collect();
            let prog = TapeProgram(|tape: &mut Tape<'_>, v: &[Var]| tape.cross_entropy(v[0], &targets));
            let r = grad_check(&prog, &names(1), &p, 1e-5, 1e-6).unwrap();
            assert!(r.passed(), "cross_entropy {shape:?} {r:?}");
        }
    }

    #[test]
    fn attention_and_row_plumbing() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let segments = [(0usize, 3usize), (3, 1), (4, 4)];
        let w = random(&mut rng, &[8, 6]);
        let prog = TapeProgram(|tape: &mut Tape<'_>, v: &[Var]| {
            let o = tape.causal_attention(v[0], v[1], v[2], 2, &segments)?;
            let r = tape.replace_row(o, 2, v[3])?;
            let s = tape.select_rows(r, &[7, 2, 2, 0])?;
            let e = tape.embedding(v[4], &[1, 0, 1, 1])?;
            let t = tape.add(s, e)?;
            let full = tape.embedding(t, &[0, 1, 2, 3, 0, 1, 2, 3])?;
            weighted(tape, full, &w)
        });
        let p = vec![
            random(&mut rng, &[8, 6]),
            random(&mut rng, &[8, 6]),
            random(&mut rng, &[8, 6]),
            random(&mut rng, &[1, 6]),
            random(&mut rng, &[2, 6]),
        ];
        let r = grad_check(&prog, &names(5), &p, 1e-5, 1e-6).unwrap();
        assert!(r.passed(), "{r:?}");
    }
}
