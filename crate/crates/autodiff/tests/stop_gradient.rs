use meanflow_autodiff::{backward, jvp, Graph, ParamSet, Result, Tensor, Var};
use proptest::prelude::*;

fn vec_tensor(v: Vec<f64>) -> Tensor<f64> {
    let n = v.len();
    Tensor::new(vec![n], v).unwrap()
}

#[test]
fn value_passes_through_and_gradient_is_zero() {
    let mut p = ParamSet::new();
    p.insert("x", vec_tensor(vec![1.0, 2.0, 3.0])).unwrap();
    let mut g = Graph::new();
    let b = p.bind(&mut g);
    let x = b.get("x").unwrap();
    let y = g.stop_gradient(x).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);
    let loss = g.sum_all(y).unwrap();
    let grads = backward(&g, loss, &b).unwrap();
    assert_eq!(grads.get("x").unwrap().data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn tangent_through_stop_gradient_is_zero() {
    let x = vec_tensor(vec![0.5, -1.0]);
    let v = vec_tensor(vec![3.0, 4.0]);
    let d = jvp(|g, xs| g.stop_gradient(xs[0]), &[x], &[v]).unwrap();
    assert_eq!(d.tangent().data(), &[0.0, 0.0]);
}

#[test]
fn residual_against_stopped_self_has_zero_gradient() {
    let mut p = ParamSet::new();
    p.insert("w", Tensor::new(vec![2, 2], vec![0.3, -0.2, 1.1, 0.7]).unwrap()).unwrap();
    let mut g = Graph::<f64>::new();
    let b = p.bind(&mut g);
    let x = g.constant(Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap());
    let f = g.matmul(x, b.get("w").unwrap()).unwrap();
    let f = g.silu(f).unwrap();
    let target = g.stop_gradient(f).unwrap();
    let r = g.sub(f, target).unwrap();
    let sq = g.square(r).unwrap();
    let loss = g.sum_all(sq).unwrap();
    let grads = backward(&g, loss, &b).unwrap();
    assert!(grads.get("w").unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn stopped_operand_gets_no_gradient() {
    // loss = sum((a - sg(b))^2): dL/da = 2(a - b), dL/db = 0
    let mut p = ParamSet::new();
    p.insert("a", vec_tensor(vec![1.0, 4.0])).unwrap();
    p.insert("b", vec_tensor(vec![3.0, 1.0])).unwrap();
    let mut g = Graph::new();
    let bound = p.bind(&mut g);
    let sb = g.stop_gradient(bound.get("b").unwrap()).unwrap();
    let r = g.sub(bound.get("a").unwrap(), sb).unwrap();
    let sq = g.square(r).unwrap();
    let loss = g.sum_all(sq).unwrap();
    let grads = backward(&g, loss, &bound).unwrap();
    assert_eq!(grads.get("a").unwrap().data(), &[-4.0, 6.0]);
    assert_eq!(grads.get("b").unwrap().data(), &[0.0, 0.0]);
}

fn small_net(g: &mut Graph<f64>, x: &[Var]) -> Result<Var> {
    let w = g.constant(Tensor::new(vec![3, 3], vec![0.5, -0.3, 0.8, 0.1, 0.9, -0.6, -0.4, 0.2, 0.7])?);
    let x2 = g.reshape(x[0], &[1, 3])?;
    let h = g.matmul(x2, w)?;
    let h = g.silu(h)?;
    let s = g.sin(h)?;
    let n = g.rms_normalize(s, 1e-6)?;
    g.softmax(n)
}

proptest! {
    #[test]
    fn stop_gradient_value_is_bit_identical(v in prop::collection::vec(-1e6f64..1e6, 1..16)) {
        let mut g = Graph::new();
        let x = g.constant(vec_tensor(v.clone()));
        let y = g.stop_gradient(x).unwrap();
        prop_assert_eq!(g.value(y).data(), v.as_slice());
    }

    #[test]
    fn jvp_is_linear_in_the_tangent(
        x in prop::collection::vec(-2.0f64..2.0, 3),
        u in prop::collection::vec(-2.0f64..2.0, 3),
        w in prop::collection::vec(-2.0f64..2.0, 3),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let xt = vec_tensor(x);
        let (ut, wt) = (vec_tensor(u), vec_tensor(w));
        let combo = ut.scale(a).unwrap().axpy(b, &wt).unwrap();
        let ju = jvp(small_net, &[xt.clone()], &[ut]).unwrap();
        let jw = jvp(small_net, &[xt.clone()], &[wt]).unwrap();
        let jc = jvp(small_net, &[xt], &[combo]).unwrap();
        let expect = ju.tangent().scale(a).unwrap().axpy(b, jw.tangent()).unwrap();
        prop_assert!(jc.tangent().max_abs_diff(&expect) <= 1e-12 * (1.0 + expect.max_abs()));
    }

    #[test]
    fn repeated_evaluation_is_bit_identical(x in prop::collection::vec(-2.0f64..2.0, 3)) {
        let xt = vec_tensor(x);
        let v = Tensor::ones(&[3]);
        let a = jvp(small_net, &[xt.clone()], &[v.clone()]).unwrap();
        let b = jvp(small_net, &[xt], &[v]).unwrap();
        prop_assert_eq!(a, b);
    }
}
