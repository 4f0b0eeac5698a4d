use crate::element::Element;
use crate::error::{AutodiffError, Result};
use crate::graph::{Graph, PrimitiveSet, Var};
use crate::params::{BoundParams, GradSet};
use crate::tensor::Tensor;

/// A primal value paired with a tangent of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct DualTensor<T> {
    primal: Tensor<T>,
    tangent: Tensor<T>,
}

impl<T: Element> DualTensor<T> {
    pub fn new(primal: Tensor<T>, tangent: Tensor<T>) -> Result<Self> {
        if primal.shape() != tangent.shape() {
            return Err(AutodiffError::shape("dual", primal.shape(), tangent.shape()));
        }
        Ok(DualTensor { primal, tangent })
    }

    pub fn primal(&self) -> &Tensor<T> {
        &self.primal
    }

    pub fn tangent(&self) -> &Tensor<T> {
        &self.tangent
    }

    pub fn into_parts(self) -> (Tensor<T>, Tensor<T>) {
        (self.primal, self.tangent)
    }
}

fn check_pairs<T: Element>(inputs: &[Tensor<T>], tangents: &[Tensor<T>]) -> Result<()> {
    if inputs.len() != tangents.len() {
        return Err(AutodiffError::invalid(
            "jvp",
            format!("{} inputs but {} tangents", inputs.len(), tangents.len()),
        ));
    }
    for (x, t) in inputs.iter().zip(tangents) {
        if x.shape() != t.shape() {
            return Err(AutodiffError::shape("jvp", x.shape(), t.shape()));
        }
    }
    Ok(())
}

/// Evaluate `f` at `inputs` and its directional derivative along `tangents`
/// in one pass. `f` receives a fresh graph and the input handles; any
/// parameters it needs should be bound as constants.
pub fn jvp<T, F>(f: F, inputs: &[Tensor<T>], tangents: &[Tensor<T>]) -> Result<DualTensor<T>>
where
    T: Element,
    F: FnOnce(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    jvp_with(PrimitiveSet::all(), f, inputs, tangents)
}

/// [`jvp`] on a graph restricted to `prims`.
pub fn jvp_with<T, F>(prims: PrimitiveSet, f: F, inputs: &[Tensor<T>], tangents: &[Tensor<T>]) -> Result<DualTensor<T>>
where
    T: Element,
    F: FnOnce(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    check_pairs(inputs, tangents)?;
    let mut g = Graph::with_primitives(prims);
    let vars = inputs
        .iter()
        .zip(tangents)
        .map(|(x, t)| g.input(x.clone(), Some(t.clone())))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    let primal = g.value(out).clone();
    let tangent = g.tangent_or_zeros(out);
    DualTensor::new(primal, tangent)
}

/// Central difference `(f(x + h v) - f(x - h v)) / 2h`.
pub fn finite_diff_jvp<F>(f: F, inputs: &[Tensor<f64>], tangents: &[Tensor<f64>], h: f64) -> Result<Tensor<f64>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check_pairs(inputs, tangents)?;
    if !(h > 0.0 && h.is_finite()) {
        return Err(AutodiffError::invalid("finite_diff_jvp", format!("step must be positive, got {h}")));
    }
    let eval = |sign: f64| -> Result<Tensor<f64>> {
        let mut g = Graph::new();
        let vars = inputs
            .iter()
            .zip(tangents)
            .map(|(x, t)| Ok(g.constant(x.axpy(sign * h, t)?)))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).clone())
    };
    let plus = eval(1.0)?;
    let minus = eval(-1.0)?;
    plus.sub(&minus)?.scale(0.5 / h)
}

/// Gradients of the scalar `loss` for every bound parameter.
pub fn backward<T: Element>(graph: &Graph<T>, loss: Var, params: &BoundParams) -> Result<GradSet<T>> {
    let grads = graph.backward(loss)?;
    Ok(GradSet::from_gradients(graph, params, &grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_square() {
        let x = Tensor::<f64>::new(vec![2], vec![2.0, 3.0]).unwrap();
        let v = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        let d = jvp(|_, xs| Ok(xs[0]), &[x.clone()], &[v.clone()]).unwrap();
        assert_eq!(d.tangent(), &v);
        let d = jvp(|g, xs| g.square(xs[0]), &[x], &[v]).unwrap();
        assert_eq!(d.tangent().data(), &[4.0, 6.0]);
    }

    #[test]
    fn fd_of_sin_at_zero_is_one() {
        let x = Tensor::<f64>::zeros(&[1]);
        let v = Tensor::ones(&[1]);
        let fd = finite_diff_jvp(|g, xs| g.sin(xs[0]), &[x], &[v], 1e-4).unwrap();
        assert!((fd.data()[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn rejects_bad_step() {
        let x = Tensor::<f64>::zeros(&[1]);
        assert!(finite_diff_jvp(|_, xs| Ok(xs[0]), &[x.clone()], &[x], 0.0).is_err());
    }
}
