//! Central finite-difference verification of reverse-mode gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Element, Parameter, Result, Tensor, TensorError};

/// How many elements of each parameter to probe; `All` is exact but costs
/// two forward passes per element.
#[derive(Debug, Clone, Copy)]
pub enum SamplePlan {
    All,
    PerParameter(usize),
}

/// Compares the analytic gradient of `f` against central finite differences
/// and returns the maximum relative error over all probed elements:
/// |analytic - cd| / (|analytic| + |cd| + 1e-12).
///
/// `f` must be deterministic; this is checked by running it twice and
/// comparing the results bitwise.
pub fn grad_check<E: Element>(
    f: impl Fn() -> Result<Tensor<E>>,
    params: &[Parameter<E>],
    eps: f64,
    plan: SamplePlan,
    seed: u64,
) -> Result<f64> {
    assert!(
        (1e-7..=1e-2).contains(&eps),
        "grad_check eps {eps} outside [1e-7, 1e-2]"
    );

    let first = f()?;
    let second = f()?;
    if first.to_vec().iter().zip(second.to_vec()).any(|(a, b)| *a != b) {
        return Err(TensorError::NonDeterministic);
    }
    if first.numel() != 1 {
        return Err(TensorError::NonScalarBackward(first.shape().to_vec()));
    }

    super::zero_grad(params);
    let loss = f()?;
    loss.backward()?;
    let analytic: Vec<Vec<E>> = params
        .iter()
        .map(|p| {
            p.grad()
                .ok_or_else(|| TensorError::MissingGrad(p.name().to_string()))
        })
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = 0.0f64;
    for (p, grads) in params.iter().zip(&analytic) {
        let n = p.numel();
        let indices: Vec<usize> = match plan {
            SamplePlan::All => (0..n).collect(),
            SamplePlan::PerParameter(k) if k >= n => (0..n).collect(),
            SamplePlan::PerParameter(k) => {
                rand::seq::index::sample(&mut rng, n, k).into_vec()
            }
        };
        for idx in indices {
            let original = p.tensor().data()[idx];
            let step = E::from_f64(eps);

            set_element(p.tensor(), idx, original + step);
            let plus = f()?.item().to_f64();
            set_element(p.tensor(), idx, original - step);
            let minus = f()?.item().to_f64();
            set_element(p.tensor(), idx, original);

            let cd = (plus - minus) / (2.0 * eps);
            let a = grads[idx].to_f64();
            let rel = (a - cd).abs() / (a.abs() + cd.abs() + 1e-12);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

fn set_element<E: Element>(t: &Tensor<E>, idx: usize, value: E) {
    t.inner_data_mut()[idx] = value;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact() {
        let w = Parameter::new("w", vec![1.5f64, -0.5, 2.0], &[3]);
        let x = Tensor::from_vec(vec![0.3, 0.7, -1.1], &[3]);
        let err = grad_check(
            || Ok(w.tensor().mul(&x)?.sum()),
            &[w.clone()],
            1e-6,
            SamplePlan::All,
            0,
        )
        .unwrap();
        assert!(err < 1e-10, "relative error {err}");
    }

    #[test]
    fn conv_gelu_stack() {
        let xs: Vec<f64> = (0..2 * 3 * 4 * 4).map(|i| ((i as f64) * 0.13).sin()).collect();
        let input = Parameter::new("input", xs, &[2, 3, 4, 4]);
        let ws: Vec<f64> = (0..4 * 3 * 3 * 3).map(|i| ((i as f64) * 0.07).cos() * 0.3).collect();
        let w = Parameter::new("w", ws, &[4, 3, 3, 3]);
        let b = Parameter::new("b", vec![0.1, -0.2, 0.05, 0.0], &[4]);
        let err = grad_check(
            || {
                let y = input
                    .tensor()
                    .conv2d(w.tensor(), Some(b.tensor()), 1, 1, 1)?
                    .gelu();
                Ok(y.mean())
            },
            &[input.clone(), w.clone(), b.clone()],
            1e-5,
            SamplePlan::All,
            0,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        use std::cell::Cell;
        let counter = Cell::new(0.0f64);
        let err = grad_check(
            || {
                counter.set(counter.get() + 1.0);
                Ok(Tensor::<f64>::scalar(counter.get()))
            },
            &[],
            1e-5,
            SamplePlan::All,
            0,
        );
        assert!(matches!(err, Err(TensorError::NonDeterministic)));
    }
}
