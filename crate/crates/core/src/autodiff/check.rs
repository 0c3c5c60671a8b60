use super::tensor::Tensor;

/// Worst relative error between analytic gradients and central finite
/// differences of `f` over every coordinate of every parameter.
///
/// `f` must be a pure function of the parameter values. The relative error of
/// a coordinate is `|a - n| / max(|a|, |n|, 1e-6)`; coordinates where both
/// sides are below `1e-10` count as zero error.
pub fn finite_diff_check<F>(mut f: F, params: &[Tensor], analytic: &[Tensor], step: f64) -> f64
where
    F: FnMut(&[Tensor]) -> f64,
{
    assert_eq!(
        params.len(),
        analytic.len(),
        "finite_diff_check: {} params but {} gradients",
        params.len(),
        analytic.len()
    );
    let mut scratch: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0_f64;
    for pi in 0..params.len() {
        assert_eq!(params[pi].shape(), analytic[pi].shape());
        for ci in 0..params[pi].len() {
            let orig = scratch[pi].data()[ci];
            scratch[pi].data_mut()[ci] = orig + step;
            let plus = f(&scratch);
            scratch[pi].data_mut()[ci] = orig - step;
            let minus = f(&scratch);
            scratch[pi].data_mut()[ci] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let exact = analytic[pi].data()[ci];
            if numeric.abs() < 1e-10 && exact.abs() < 1e-10 {
                continue;
            }
            let rel = (numeric - exact).abs() / numeric.abs().max(exact.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::tape::Tape;

    #[test]
    fn linear_function_is_exact() {
        // f(w) = 3*w0 - 2*w1 + w2
        let coeffs = [3.0, -2.0, 1.0];
        let params = vec![Tensor::from_vec(1, 3, vec![0.4, -1.1, 2.2])];
        let analytic = vec![Tensor::from_vec(1, 3, coeffs.to_vec())];
        let err = finite_diff_check(
            |p| p[0].data().iter().zip(coeffs).map(|(x, c)| x * c).sum(),
            &params,
            &analytic,
            1e-5,
        );
        assert!(err < 1e-9, "relative error {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let params = vec![Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0])];
        let analytic = vec![Tensor::zeros(2, 2)];
        let err = finite_diff_check(|_| 42.0, &params, &analytic, 1e-5);
        assert_eq!(err, 0.0);
    }

    #[test]
    fn two_layer_composition_matches_backward() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(11);
        let w1 = Tensor::from_vec(3, 4, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect());
        let w2 = Tensor::from_vec(4, 1, (0..4).map(|_| rng.random_range(-1.0..1.0)).collect());
        let x = Tensor::from_vec(2, 3, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect());
        let params = vec![w1, w2];

        let run = |p: &[Tensor]| -> f64 {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let w1v = tape.param(p[0].clone());
            let w2v = tape.param(p[1].clone());
            let h = tape.matmul(xv, w1v);
            let h = tape.elu(h);
            let o = tape.matmul(h, w2v);
            let o = tape.sigmoid(o);
            // Reduce to a scalar: sum via matmul with ones.
            let ones = tape.constant(Tensor::from_vec(1, 2, vec![1.0, 1.0]));
            let s = tape.matmul(ones, o);
            tape.value(s).item()
        };

        // Analytic gradients from one taped run.
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let w1v = tape.param(params[0].clone());
        let w2v = tape.param(params[1].clone());
        let h = tape.matmul(xv, w1v);
        let h = tape.elu(h);
        let o = tape.matmul(h, w2v);
        let o = tape.sigmoid(o);
        let ones = tape.constant(Tensor::from_vec(1, 2, vec![1.0, 1.0]));
        let s = tape.matmul(ones, o);
        let grads = tape.backward(s).unwrap();
        let analytic = vec![
            grads.get(w1v).unwrap().clone(),
            grads.get(w2v).unwrap().clone(),
        ];

        let err = finite_diff_check(run, &params, &analytic, 1e-5);
        assert!(err < 1e-4, "relative error {err}");
    }
}
