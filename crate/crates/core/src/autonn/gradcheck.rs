use super::{NnError, Tape, Tensor, Var};

/// Compares reverse-mode gradients of a scalar function against central
/// differences `(f(θ+h) − f(θ−h)) / 2h` over every coordinate of `params`.
///
/// `f` receives a fresh tape and one leaf per parameter tensor, in order.
/// Returns the maximum relative error, using `max(|analytic|, |numeric|, 1e-8)`
/// as the denominator.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> Result<f64, NnError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NnError>,
{
    if !(1e-6..=1e-3).contains(&h) {
        return Err(NnError::InvalidStep(h));
    }

    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|p| tape.leaf(p.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic = vars
        .iter()
        .zip(params)
        .map(|(v, p)| grads.get_or_zeros(*v, p))
        .collect::<Result<Vec<_>, _>>()?;

    let eval = |point: &[Tensor]| -> Result<f64, NnError> {
        let mut tape = Tape::new();
        let vars = point
            .iter()
            .map(|p| tape.leaf(p.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let out = f(&mut tape, &vars)?;
        let value = tape.value(out)?.item();
        if !value.is_finite() {
            return Err(NnError::NonFinite { op: "grad_check" });
        }
        Ok(value)
    };

    let mut point = params.to_vec();
    let mut worst: f64 = 0.0;
    for (t, grad) in analytic.iter().enumerate() {
        for i in 0..point[t].len() {
            let orig = point[t].data()[i];
            point[t].data_mut()[i] = orig + h;
            let plus = eval(&point)?;
            point[t].data_mut()[i] = orig - h;
            let minus = eval(&point)?;
            point[t].data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let exact = grad.data()[i];
            let denom = exact.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((exact - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn quadratic_form_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, vec![4, 4]);
        let x = random(&mut rng, vec![1, 4]);
        // xᵀ A x written as sum(x ⊙ (x Aᵀ))
        let err = grad_check(
            |tape, v| {
                let ax = tape.linear(v[1], v[0], None)?;
                let prod = tape.mul(v[1], ax)?;
                tape.sum(prod)
            },
            &[a, x],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-9, "relative error {err}");
    }

    #[test]
    fn elu_mlp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = vec![
            random(&mut rng, vec![6, 5]),
            random(&mut rng, vec![6]),
            random(&mut rng, vec![3, 6]),
            random(&mut rng, vec![3]),
            random(&mut rng, vec![4, 5]),
        ];
        let err = grad_check(
            |tape, v| {
                let h = tape.linear(v[4], v[0], Some(v[1]))?;
                let h = tape.elu(h)?;
                let o = tape.linear(h, v[2], Some(v[3]))?;
                let o = tape.elu(o)?;
                let sq = tape.mul(o, o)?;
                tape.sum(sq)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn rejects_step_outside_range() {
        let p = [Tensor::scalar(1.0)];
        let f = |tape: &mut Tape, v: &[Var]| tape.sum(v[0]);
        assert_eq!(grad_check(f, &p, 1e-2), Err(NnError::InvalidStep(1e-2)));
        assert_eq!(grad_check(f, &p, 1e-8), Err(NnError::InvalidStep(1e-8)));
    }

    #[test]
    fn every_op_type_matches_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = vec![
                random(&mut rng, vec![5, 3]),
                random(&mut rng, vec![4, 6]),
                random(&mut rng, vec![4]),
            ];
            let err = grad_check(
                |tape, v| {
                    let g = tape.gather_rows(v[0], vec![Some(0), Some(3), None, Some(4), Some(1), Some(1)], 2)?;
                    let l = tape.linear(g, v[1], Some(v[2]))?;
                    let e = tape.elu(l)?;
                    let s = tape.segment_sum(e, vec![0usize, 1, 0], 2)?;
                    let n = tape.layer_norm(s, 1e-5)?;
                    let m = tape.segment_mean(n, vec![0usize, 0], 1)?;
                    let sc = tape.scale(m, 0.7)?;
                    let ce = tape.cross_entropy(sc, &[2])?;
                    let flat = tape.segment_mean(e, vec![0usize, 0, 0], 1)?;
                    let pooled = tape.gather_rows(flat, vec![Some(0)], 1)?;
                    let w = tape.leaf(Tensor::matrix(1, 4, vec![0.3, -0.2, 0.5, 0.1]).unwrap())?;
                    let pred = tape.linear(pooled, w, None)?;
                    let l1 = tape.l1(pred, &[10.0])?;
                    tape.add(ce, l1)
                },
                &params,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: relative error {err}");
        }
    }
}
