use super::params::{GradientMap, ParameterStore};
use super::tape::{Bindings, Tape, Var};
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
    pub analytic: GradientMap,
}

/// Analytic gradient of `f` at `point`, every parameter trainable.
pub fn analytic_gradient<F>(f: &F, point: &ParameterStore) -> Result<(f64, GradientMap)>
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var>,
{
    let mut tape = Tape::new();
    let b = tape.bind(point, |_, _| true);
    let loss = f(&mut tape, &b)?;
    let grads = tape.backward(loss)?;
    Ok((tape.scalar(loss), b.collect(&tape, &grads)))
}

fn evaluate<F>(f: &F, point: &ParameterStore) -> Result<f64>
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var>,
{
    let mut tape = Tape::new();
    let b = tape.bind(point, |_, _| false);
    let loss = f(&mut tape, &b)?;
    let v = tape.scalar(loss);
    if !v.is_finite() {
        return Err(Error::Evaluation(format!("objective evaluated to {v}")));
    }
    Ok(v)
}

/// Denominator floor of the relative error.
pub const GRAD_FLOOR: f64 = 1e-8;

/// Five-point central-difference check of every coordinate of `point`.
///
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn check_gradients<F>(f: F, point: &ParameterStore, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var>,
{
    let (_, analytic) = analytic_gradient(&f, point)?;
    let mut worst = None;
    let mut max_rel_error = 0.0;
    let mut coordinates = 0;
    let mut probe = point.clone();
    for (name, param) in point.iter() {
        let grad = analytic
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no gradient for `{name}`")))?;
        for idx in 0..param.value.len() {
            let base = param.value.data()[idx];
            let mut at = |offset: f64| {
                probe.value_mut(name).expect("cloned").data_mut()[idx] = base + offset;
                evaluate(&f, &probe)
            };
            let (p2, p1, m1, m2) = (at(2.0 * h)?, at(h)?, at(-h)?, at(-2.0 * h)?);
            probe.value_mut(name).expect("cloned").data_mut()[idx] = base;

            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            let a = grad.data()[idx];
            let denom = a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            let rel = (a - numeric).abs() / denom;
            coordinates += 1;
            if rel > max_rel_error {
                max_rel_error = rel;
                worst = Some((name.clone(), idx));
            }
        }
    }
    Ok(GradCheck {
        max_rel_error,
        worst,
        coordinates,
        analytic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{Array, Partition};

    fn store(values: &[(&str, Array)]) -> ParameterStore {
        let mut s = ParameterStore::new();
        for (n, v) in values {
            s.insert(*n, v.clone(), Partition::Shared);
        }
        s
    }

    #[test]
    fn quadratic_is_exact_to_1e7() {
        let point = store(&[("w", Array::vector(vec![0.7, -1.3, 2.1]))]);
        let report = check_gradients(
            |t, b| {
                let w = b.get("w")?;
                let sq = t.mul(w, w)?;
                let s = t.sum(sq);
                Ok(t.affine(s, 1.5, 0.2))
            },
            &point,
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-7, "{report:?}");
        assert_eq!(report.coordinates, 3);
    }

    #[test]
    fn composite_chain_matches() {
        let point = store(&[
            ("w", Array::from_rows(&[vec![0.3, -0.2], vec![0.5, 0.9], vec![-0.4, 0.1]]).unwrap()),
            ("x", Array::vector(vec![0.2, -0.7, 1.1])),
            ("t", Array::vector(vec![0.25, 0.75])),
        ]);
        let report = check_gradients(
            |t, b| {
                let y = t.matmul(b.get("x")?, b.get("w")?)?;
                let y = t.tanh(y);
                let y = t.softmax(y)?;
                let kl = t.kl_divergence(b.get("t")?, y)?;
                let d = t.l2_distance(y, b.get("t")?)?;
                t.add(kl, d)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-6, "{report:?}");
    }

    #[test]
    fn sharpen_gradient_matches() {
        let point = store(&[(
            "c",
            Array::from_rows(&[vec![0.2, 0.5, 0.3], vec![0.6, 0.1, 0.3], vec![0.3, 0.3, 0.4]])
                .unwrap(),
        )]);
        let weights = Array::from_rows(&[vec![1.0, -2.0, 0.5], vec![0.3, 0.7, -1.0], vec![2.0, 0.1, 0.4]])
            .unwrap();
        let report = check_gradients(
            |t, b| {
                let s = t.sharpen(b.get("c")?)?;
                let w = t.constant(weights.clone());
                let prod = t.mul(s, w)?;
                Ok(t.sum(prod))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-6, "{report:?}");
    }

    #[test]
    fn relu_nudged_off_kink_reports_finite_error() {
        let point = store(&[("x", Array::vector(vec![1e-3, -1e-3, 0.5]))]);
        let report = check_gradients(
            |t, b| {
                let r = t.relu(b.get("x")?);
                Ok(t.sum(r))
            },
            &point,
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_error.is_finite());
        assert!(report.max_rel_error < 1e-8);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let point = store(&[("x", Array::vector(vec![1.0]))]);
        let res = check_gradients(
            |t, b| {
                let x = b.get("x")?;
                let s = t.sum(x);
                Ok(t.affine(s, f64::INFINITY, 0.0))
            },
            &point,
            1e-4,
        );
        assert!(res.is_err());
    }
}
