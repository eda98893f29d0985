use rand::seq::index::sample;
use rand::Rng;

use super::tape::set_backward_fault;
use super::{LstmWeights, ParamStore, Primitive, Tape, Tensor, Var};
use crate::{Error, Result};

/// Minimum number of coordinates probed per parameter tensor.
pub const COORDS_PER_TENSOR: usize = 32;

fn evaluate<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let mut tape = Tape::new(store);
    let out = f(&mut tape)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::shape("grad_check", format!("objective of shape {:?}", v.shape())));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    Ok(v)
}

/// Compares reverse-mode gradients of the scalar `f` against central finite
/// differences `(f(θ+ε) − f(θ−ε)) / 2ε`, coordinate-wise on up to
/// [`COORDS_PER_TENSOR`] random coordinates of every parameter tensor (all of
/// them for smaller tensors). Returns the maximum relative error
/// `|a − n| / max(|a|, |n|, 1e−8)`.
pub fn grad_check<F, R>(store: &ParamStore, f: F, epsilon: f64, rng: &mut R) -> Result<f64>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
    R: Rng + ?Sized,
{
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    evaluate(store, &f)?;
    let analytic = {
        let mut tape = Tape::new(store);
        let out = f(&mut tape)?;
        tape.backward(out)?
    };
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for id in store.ids() {
        let n = store.value(id).len();
        let coords: Vec<usize> = if n <= COORDS_PER_TENSOR {
            (0..n).collect()
        } else {
            sample(rng, n, COORDS_PER_TENSOR).into_vec()
        };
        for k in coords {
            let original = store.value(id).data()[k];
            probe.value_mut(id).data_mut()[k] = original + epsilon;
            let plus = evaluate(&probe, &f)?;
            probe.value_mut(id).data_mut()[k] = original - epsilon;
            let minus = evaluate(&probe, &f)?;
            probe.value_mut(id).data_mut()[k] = original;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[k]);
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

/// Outcome of checking one primitive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrimitiveCheck {
    pub primitive: Primitive,
    pub max_relative_error: f64,
}

fn dims<R: Rng + ?Sized>(rng: &mut R) -> usize {
    rng.random_range(1..=8)
}

fn uniform<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

/// Objective `Σ r ⊙ out` with a fixed `r`.
fn project(tape: &mut Tape<'_>, out: Var, weights: &Tensor) -> Result<Var> {
    let r = tape.constant(weights.clone());
    let prod = tape.mul(out, r)?;
    Ok(tape.sum(prod))
}

type Objective = Box<dyn Fn(&mut Tape<'_>) -> Result<Var>>;

/// Random well-conditioned instance of `primitive`: inputs are parameters of
/// the returned store and the objective projects the output on fixed random
/// weights. Shapes are drawn from 1..=8 per dimension.
fn instance<R: Rng + ?Sized>(
    primitive: Primitive,
    rng: &mut R,
) -> Result<(ParamStore, Objective)> {
    let mut store = ParamStore::new();
    type Build = Box<dyn Fn(&mut Tape<'_>, &[Var]) -> Result<Var>>;
    let mut inputs: Vec<Tensor> = Vec::new();
    let build: Build = match primitive {
        Primitive::MatMul => {
            let (m, k, n) = (dims(rng), dims(rng), dims(rng));
            match rng.random_range(0..3) {
                0 => inputs.extend([uniform(&[m, k], rng), uniform(&[k, n], rng)]),
                1 => inputs.extend([uniform(&[m, k], rng), uniform(&[k], rng)]),
                _ => inputs.extend([uniform(&[k], rng), uniform(&[k, n], rng)]),
            }
            Box::new(|t, v| t.matmul(v[0], v[1]))
        }
        Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Maximum => {
            let shape = if rng.random_bool(0.5) {
                vec![dims(rng)]
            } else {
                vec![dims(rng), dims(rng)]
            };
            let a = uniform(&shape, rng);
            let b = if primitive == Primitive::Maximum {
                // keep every pair at least 0.1 apart so ±ε never crosses the kink
                let mut b = a.clone();
                for v in b.data_mut() {
                    let gap = rng.random_range(0.1..1.0);
                    *v += if rng.random_bool(0.5) { gap } else { -gap };
                }
                b
            } else {
                uniform(&shape, rng)
            };
            inputs.extend([a, b]);
            match primitive {
                Primitive::Add => Box::new(|t, v| t.add(v[0], v[1])),
                Primitive::Sub => Box::new(|t, v| t.sub(v[0], v[1])),
                Primitive::Mul => Box::new(|t, v| t.mul(v[0], v[1])),
                _ => Box::new(|t, v| t.maximum(v[0], v[1])),
            }
        }
        Primitive::AddRow => {
            let (r, c) = (dims(rng), dims(rng));
            inputs.extend([uniform(&[r, c], rng), uniform(&[c], rng)]);
            Box::new(|t, v| t.add_row(v[0], v[1]))
        }
        Primitive::Scale => {
            let s = rng.random_range(-2.0..2.0);
            inputs.push(uniform(&[dims(rng)], rng));
            Box::new(move |t, v| Ok(t.scale(v[0], s)))
        }
        Primitive::Tanh => {
            inputs.push(uniform(&[dims(rng), dims(rng)], rng));
            Box::new(|t, v| Ok(t.tanh(v[0])))
        }
        Primitive::Sigmoid => {
            inputs.push(uniform(&[dims(rng)], rng));
            Box::new(|t, v| Ok(t.sigmoid(v[0])))
        }
        Primitive::Concat => {
            let parts = rng.random_range(1..=3);
            for _ in 0..parts {
                inputs.push(uniform(&[dims(rng)], rng));
            }
            Box::new(|t, v| t.concat(v))
        }
        Primitive::StackRows => {
            let (rows, n) = (rng.random_range(1..=4), dims(rng));
            for _ in 0..rows {
                inputs.push(uniform(&[n], rng));
            }
            Box::new(|t, v| t.stack_rows(v))
        }
        Primitive::Row => {
            let (r, c) = (dims(rng), dims(rng));
            let i = rng.random_range(0..r);
            inputs.push(uniform(&[r, c], rng));
            Box::new(move |t, v| t.row(v[0], i))
        }
        Primitive::Slice => {
            let n = dims(rng);
            let start = rng.random_range(0..n);
            let len = rng.random_range(1..=n - start);
            inputs.push(uniform(&[n], rng));
            Box::new(move |t, v| t.slice(v[0], start, len))
        }
        Primitive::Transpose => {
            inputs.push(uniform(&[dims(rng), dims(rng)], rng));
            Box::new(|t, v| t.transpose(v[0]))
        }
        Primitive::Conv1d => {
            let (len, dim, filters) = (dims(rng), rng.random_range(1..=4), dims(rng));
            let window = rng.random_range(1..=5);
            inputs.extend([
                uniform(&[len, dim], rng),
                uniform(&[filters, window * dim], rng),
                uniform(&[filters], rng),
            ]);
            Box::new(move |t, v| t.conv1d(v[0], v[1], v[2], window))
        }
        Primitive::MaxOverTime => {
            let (r, c) = (dims(rng), dims(rng));
            // distinct values 0.1 apart in each column
            let mut data = vec![0.0; r * c];
            for j in 0..c {
                let order = sample(rng, r, r).into_vec();
                for (i, o) in order.into_iter().enumerate() {
                    data[i * c + j] = 0.1 * o as f64 + rng.random_range(0.0..0.01);
                }
            }
            inputs.push(Tensor::matrix(r, c, data)?);
            Box::new(|t, v| t.max_over_time(v[0]))
        }
        Primitive::Softmax | Primitive::LogSoftmax => {
            let n = dims(rng);
            let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
            let keep = rng.random_range(0..n);
            mask[keep] = true;
            let use_mask = rng.random_bool(0.5);
            inputs.push(uniform(&[n], rng));
            let log = primitive == Primitive::LogSoftmax;
            Box::new(move |t, v| {
                let m = use_mask.then_some(mask.as_slice());
                if log {
                    t.log_softmax(v[0], m)
                } else {
                    t.softmax(v[0], m)
                }
            })
        }
        Primitive::LstmCell => {
            let (input, hidden) = (dims(rng), dims(rng));
            let w = LstmWeights::init(&mut store, "lstm", input, hidden, 0.5, rng)?;
            // give the zero-initialized bias some spread
            *store.value_mut(w.bias) = uniform(&[4 * hidden], rng);
            inputs.extend([uniform(&[input], rng), uniform(&[hidden], rng), uniform(&[hidden], rng)]);
            Box::new(move |t, v| {
                let (h, c) = t.lstm_cell(v[0], v[1], v[2], &w)?;
                t.concat(&[h, c])
            })
        }
        Primitive::GatherRows => {
            let (rows, dim, n) = (dims(rng), dims(rng), dims(rng));
            let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..rows)).collect();
            inputs.push(uniform(&[rows, dim], rng));
            Box::new(move |t, v| t.gather_rows(v[0], &ids))
        }
        Primitive::Pick => {
            let n = dims(rng);
            let i = rng.random_range(0..n);
            inputs.push(uniform(&[n], rng));
            Box::new(move |t, v| t.pick(v[0], i))
        }
        Primitive::Sum => {
            inputs.push(uniform(&[dims(rng)], rng));
            Box::new(|t, v| Ok(t.sum(v[0])))
        }
        Primitive::Dot => {
            let n = dims(rng);
            inputs.extend([uniform(&[n], rng), uniform(&[n], rng)]);
            Box::new(|t, v| t.dot(v[0], v[1]))
        }
    };
    let ids: Vec<_> = inputs
        .into_iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("in{i}"), t))
        .collect::<Result<_>>()?;
    // output shape, to draw projection weights once
    let out_shape = {
        let mut tape = Tape::new(&store);
        let vars: Vec<Var> = ids.iter().map(|id| tape.param(*id)).collect();
        let out = build(&mut tape, &vars)?;
        tape.shape(out).to_vec()
    };
    let weights = uniform(&out_shape, rng);
    let f = move |tape: &mut Tape<'_>| -> Result<Var> {
        let vars: Vec<Var> = ids.iter().map(|id| tape.param(*id)).collect();
        let out = build(tape, &vars)?;
        project(tape, out, &weights)
    };
    Ok((store, Box::new(f)))
}

/// Gradient-checks every primitive on `trials` random instances each and
/// reports the worst relative error per primitive.
pub fn primitive_checks<R: Rng + ?Sized>(trials: usize, epsilon: f64, rng: &mut R) -> Result<Vec<PrimitiveCheck>> {
    Primitive::ALL
        .iter()
        .map(|&primitive| {
            let mut worst = 0.0f64;
            for _ in 0..trials {
                let (store, f) = instance(primitive, rng)?;
                worst = worst.max(grad_check(&store, f, epsilon, rng)?);
            }
            Ok(PrimitiveCheck {
                primitive,
                max_relative_error: worst,
            })
        })
        .collect()
}

/// Fault injection for exercising the gradient checker itself.
pub mod testing {
    use super::*;

    /// While alive, the backward rule of one primitive returns negated
    /// gradients on the current thread.
    #[must_use]
    pub struct FaultGuard {
        previous: Option<Primitive>,
    }

    pub fn inject_backward_fault(primitive: Primitive) -> FaultGuard {
        FaultGuard {
            previous: set_backward_fault(Some(primitive)),
        }
    }

    impl Drop for FaultGuard {
        fn drop(&mut self) {
            set_backward_fault(self.previous);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn sum_of_squares_matches_closed_form() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let id = store.add("theta", Tensor::uniform(&[10], 2.0, &mut rng)).unwrap();
        let f = move |t: &mut Tape<'_>| {
            let x = t.param(id);
            t.dot(x, x)
        };
        let err = grad_check(&store, &f, 1e-4, &mut rng).unwrap();
        assert!(err < 1e-5, "{err}");
        // and the analytic gradient is 2θ
        let mut tape = Tape::new(&store);
        let out = f(&mut tape).unwrap();
        let g = tape.backward(out).unwrap();
        for (a, b) in g.get(id).unwrap().data().iter().zip(store.value(id).data()) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_objective_has_zero_error() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        store.add("unused", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let err = grad_check(&store, |t: &mut Tape<'_>| Ok(t.constant(Tensor::scalar(3.0))), 1e-4, &mut rng).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let store = ParamStore::new();
        let r = grad_check(&store, |t: &mut Tape<'_>| Ok(t.constant(Tensor::scalar(f64::NAN))), 1e-4, &mut rng);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn every_primitive_passes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for check in primitive_checks(10, 1e-4, &mut rng).unwrap() {
            assert!(
                check.max_relative_error < 1e-4,
                "{}: {}",
                check.primitive.name(),
                check.max_relative_error
            );
        }
    }

    #[test]
    fn sign_flip_is_detected() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for p in [Primitive::Tanh, Primitive::LstmCell, Primitive::Conv1d] {
            let _guard = testing::inject_backward_fault(p);
            let checks = primitive_checks(2, 1e-4, &mut rng).unwrap();
            let hit = checks.iter().find(|c| c.primitive == p).unwrap();
            assert!(hit.max_relative_error > 1.0, "{}", p.name());
        }
    }
}
