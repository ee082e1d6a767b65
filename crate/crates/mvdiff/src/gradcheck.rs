//! Central finite-difference check against tape gradients.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Builds a scalar graph from leaf inputs. Called repeatedly with perturbed
/// inputs, so it must not capture tape state.
pub type ScalarFn<'a> = &'a dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

/// max over all elements of |g_fd - g_ad| / (|g_fd| + |g_ad| + 1e-8).
pub fn grad_check(f: ScalarFn, inputs: &[Tensor], eps: f64) -> Result<f64> {
    if !(1e-5..=1e-3).contains(&eps) {
        return Err(Error::Validation(format!("eps {} outside [1e-5, 1e-3]", eps)));
    }
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.numel() != 1 {
            return Err(Error::Dim("grad_check target must be scalar".into()));
        }
        if !v.item().is_finite() {
            return Err(Error::Numeric("non-finite function value".into()));
        }
        Ok(v.item())
    };
    // analytic gradients
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).item().is_finite() {
        return Err(Error::Numeric("non-finite function value".into()));
    }
    let grads = tape.backward(out)?;

    let mut max_rel = 0f64;
    for (vi, input) in inputs.iter().enumerate() {
        let ad = grads.get_or_zeros(vars[vi], input.shape());
        for e in 0..input.numel() {
            // step scaled to the element's magnitude
            let h = eps * input.data()[e].abs().max(1.0);
            let mut plus = inputs.to_vec();
            plus[vi].data_mut()[e] += h;
            let mut minus = inputs.to_vec();
            minus[vi].data_mut()[e] -= h;
            let fd = ((eval(&plus)? as f64 - eval(&minus)? as f64) / (2.0 * h as f64)) as f64;
            let g = ad.data()[e];
            let rel = (fd - g).abs() / (fd.abs() + g.abs() + 1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_stream;
    use rand::Rng;

    #[test]
    fn sum_of_squares() {
        let mut rng = rng_stream(1, "gradcheck");
        let x = Tensor::from_fn(&[3, 3], |_| rng.gen::<f64>() * 2.0 - 1.0);
        let err = grad_check(
            &|t, vars| {
                let sq = t.mul(vars[0], vars[0])?;
                Ok(t.sum_all(sq))
            },
            &[x],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-5, "rel err {}", err);
    }

    #[test]
    fn eps_bounds_enforced() {
        let x = Tensor::ones(&[2]);
        let f: crate::gradcheck::ScalarFn = &|t, vars| Ok(t.sum_all(vars[0]));
        assert!(grad_check(f, &[x.clone()], 1e-6).is_err());
        assert!(grad_check(f, &[x], 1e-2).is_err());
    }

    #[test]
    fn attention_grads() {
        let mut rng = rng_stream(2, "gradcheck");
        let q = Tensor::from_fn(&[3, 8], |_| rng.gen::<f64>() - 0.5);
        let k = Tensor::from_fn(&[4, 8], |_| rng.gen::<f64>() - 0.5);
        let v = Tensor::from_fn(&[4, 8], |_| rng.gen::<f64>() - 0.5);
        let err = grad_check(
            &|t, vars| {
                let o = t.attention(vars[0], vars[1], vars[2], None, 2)?;
                let sq = t.mul(o, o)?;
                Ok(t.mean_all(sq))
            },
            &[q, k, v],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {}", err);
    }

    #[test]
    fn layernorm_softmax_sigmoid_gelu_grads() {
        let mut rng = rng_stream(3, "gradcheck");
        let x = Tensor::from_fn(&[2, 6], |_| rng.gen::<f64>() * 2.0 - 1.0);
        for op in 0..4usize {
            let err = grad_check(
                &|t, vars| {
                    let y = match op {
                        0 => t.layernorm_last(vars[0], 1e-5),
                        1 => t.softmax_last(vars[0]),
                        2 => t.sigmoid(vars[0]),
                        _ => t.gelu(vars[0]),
                    };
                    // weigh elements unevenly so symmetric errors cannot cancel
                    let w = Tensor::from_fn(&[2, 6], |i| 0.1 * (i as f64 + 1.0));
                    let wc = t.constant(w);
                    let p = t.mul(y, wc)?;
                    Ok(t.sum_all(p))
                },
                &[x.clone()],
                1e-3,
            )
            .unwrap();
            assert!(err < 1e-4, "op {} rel err {}", op, err);
        }
    }

    #[test]
    fn matmul_conv_pool_grads() {
        let mut rng = rng_stream(4, "gradcheck");
        let a = Tensor::from_fn(&[3, 4], |_| rng.gen::<f64>() - 0.5);
        let b = Tensor::from_fn(&[4, 2], |_| rng.gen::<f64>() - 0.5);
        let err = grad_check(
            &|t, vars| {
                let m = t.matmul(vars[0], vars[1])?;
                let sq = t.mul(m, m)?;
                Ok(t.sum_all(sq))
            },
            &[a, b],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "matmul rel err {}", err);

        let x = Tensor::from_fn(&[1, 2, 5, 5], |_| rng.gen::<f64>() - 0.5);
        let w = Tensor::from_fn(&[3, 2, 3, 3], |_| rng.gen::<f64>() - 0.5);
        let bias = Tensor::from_fn(&[3], |_| rng.gen::<f64>() - 0.5);
        let err = grad_check(
            &|t, vars| {
                let c = t.conv2d(vars[0], vars[1], Some(vars[2]), 2, 1)?;
                let sq = t.mul(c, c)?;
                Ok(t.sum_all(sq))
            },
            &[x, w, bias],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "conv rel err {}", err);

        let p = Tensor::from_fn(&[1, 4, 4, 2], |_| rng.gen::<f64>() - 0.5);
        let err = grad_check(
            &|t, vars| {
                let y = t.avgpool_patch(vars[0], 2)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum_all(sq))
            },
            &[p],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "pool rel err {}", err);

        let r = Tensor::from_fn(&[1, 2, 3, 5], |_| rng.gen::<f64>() - 0.5);
        let err = grad_check(
            &|t, vars| {
                let y = t.bilinear_resize(vars[0], 6, 10)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum_all(sq))
            },
            &[r],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "bilinear rel err {}", err);
    }
}
