use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use rowquant::{Error, Graph, Tensor, Var};

fn rng(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

fn random(r: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
            }
        }
    }
    c
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let i = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
    let b = g.constant(Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap()).unwrap();
    let y = g.matmul(i, b).unwrap();
    assert_eq!(g.value(y).data(), &[3.0, 4.0, 5.0, 6.0]);

    let a = g.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap()).unwrap();
    let c = g.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap()).unwrap();
    let y = g.matmul(a, c).unwrap();
    assert_eq!(g.value(y).data(), &[11.0]);

    let mut r = rng(1);
    let (p, q) = (random(&mut r, &[4, 4]), random(&mut r, &[4, 4]));
    let (pv, qv) = (g.constant(p.clone()).unwrap(), g.constant(q.clone()).unwrap());
    let y = g.matmul(pv, qv).unwrap();
    for (x, o) in g.value(y).data().iter().zip(naive_matmul(&p, &q)) {
        assert!((x - o).abs() < 1e-12);
    }
}

#[test]
fn matmul_shape_mismatch() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    assert!(matches!(g.matmul(a, b), Err(Error::Shape(_))));
}

#[test]
fn conv_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0)).unwrap();
    let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0)).unwrap();
    let y = g.conv2d(x, w, 1, 0).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
    assert_eq!(g.value(y).data(), &[9.0]);

    let mut r = rng(2);
    let img = random(&mut r, &[1, 1, 4, 5]);
    let mut delta = vec![0.0; 9];
    delta[4] = 1.0;
    let x = g.constant(img.clone()).unwrap();
    let w = g.constant(Tensor::new(vec![1, 1, 3, 3], delta).unwrap()).unwrap();
    let y = g.conv2d(x, w, 1, 1).unwrap();
    assert_eq!(g.value(y), &img);
}

#[test]
fn conv_matches_im2col_oracle() {
    let mut r = rng(3);
    let x = random(&mut r, &[1, 2, 5, 5]);
    let w = random(&mut r, &[3, 2, 3, 3]);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()).unwrap(), g.constant(w.clone()).unwrap());
        let y = g.conv2d(xv, wv, stride, pad).unwrap();
        let oh = (5 + 2 * pad - 3) / stride + 1;
        // Patch matrix built directly from the definition.
        let mut cols = vec![0.0; 18 * oh * oh];
        for c in 0..2 {
            for ki in 0..3 {
                for kj in 0..3 {
                    for oy in 0..oh {
                        for ox in 0..oh {
                            let iy = (oy * stride + ki) as isize - pad as isize;
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                cols[((c * 3 + ki) * 3 + kj) * oh * oh + oy as usize * oh + ox] =
                                    x.data()[(c * 5 + iy as usize) * 5 + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        let wm = Tensor::matrix(3, 18, w.data().to_vec()).unwrap();
        let cm = Tensor::matrix(18, oh * oh, cols).unwrap();
        let want = naive_matmul(&wm, &cm);
        assert_eq!(g.value(y).shape(), &[1, 3, oh, oh]);
        for (a, b) in g.value(y).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_rejects_bad_geometry() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 1, 2, 2])).unwrap();
    let w = g.constant(Tensor::zeros(&[1, 1, 3, 3])).unwrap();
    assert!(g.conv2d(x, w, 1, 0).is_err());
    let w2 = g.constant(Tensor::zeros(&[1, 2, 1, 1])).unwrap();
    assert!(g.conv2d(x, w2, 1, 0).is_err());
    let w3 = g.constant(Tensor::zeros(&[1, 1, 1, 1])).unwrap();
    assert!(g.conv2d(x, w3, 0, 0).is_err());
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let w = g.param(Tensor::vector(vec![0.3, -1.0, 2.0])).unwrap();
    let s = g.sum(w).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(w).unwrap().data(), &[1.0, 1.0, 1.0]);
    g.backward(s).unwrap();
    assert_eq!(g.grad(w).unwrap().data(), &[2.0, 2.0, 2.0]);
    g.zero_grad();
    assert!(g.grad(w).is_none());

    let mut g = Graph::new();
    let w = g.param(Tensor::scalar(3.0)).unwrap();
    let sq = g.dot(w, w).unwrap();
    g.backward(sq).unwrap();
    assert_eq!(g.grad(w).unwrap().data(), &[6.0]);
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::new();
    let w = g.param(Tensor::vector(vec![1.0, 2.0])).unwrap();
    assert!(matches!(g.backward(w), Err(Error::NotScalar(_))));
}

#[test]
fn non_finite_values_rejected() {
    let mut g = Graph::new();
    assert!(matches!(g.constant(Tensor::scalar(f64::NAN)), Err(Error::NonFinite(_))));
    let big = g.constant(Tensor::scalar(1e300)).unwrap();
    assert!(matches!(g.dot(big, big), Err(Error::NonFinite(_))));
}

struct Mlp {
    x: Tensor,
    labels: Vec<usize>,
}

impl Mlp {
    fn loss(&self, g: &mut Graph, params: &[Var]) -> Var {
        let x = g.constant(self.x.clone()).unwrap();
        let h = g.matmul_t(x, params[0], false, true).unwrap();
        let h = g.add_bias(h, params[1]).unwrap();
        let h = g.relu(h).unwrap();
        let o = g.matmul_t(h, params[2], false, true).unwrap();
        let o = g.add_bias(o, params[3]).unwrap();
        g.softmax_cross_entropy(o, &self.labels).unwrap()
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-12)
}

fn finite_difference(f: &mut dyn FnMut(&[Tensor]) -> f64, params: &[Tensor], h: f64) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for i in 0..params.len() {
        let mut gi = Vec::new();
        for j in 0..params[i].len() {
            let mut p = params.to_vec();
            p[i].data_mut()[j] += h;
            let up = f(&p);
            p[i].data_mut()[j] -= 2.0 * h;
            let down = f(&p);
            gi.push((up - down) / (2.0 * h));
        }
        out.push(gi);
    }
    out
}

#[test]
fn mlp_gradients_match_finite_differences() {
    let mut r = rng(4);
    let mlp = Mlp {
        x: random(&mut r, &[5, 4]),
        labels: vec![0, 2, 1, 2, 0],
    };
    let params = vec![
        random(&mut r, &[6, 4]),
        random(&mut r, &[6]),
        random(&mut r, &[3, 6]),
        random(&mut r, &[3]),
    ];
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone()).unwrap()).collect();
    let loss = mlp.loss(&mut g, &vars);
    g.backward(loss).unwrap();
    let mut f = |p: &[Tensor]| {
        let mut g = Graph::new();
        let v: Vec<Var> = p.iter().map(|t| g.constant(t.clone()).unwrap()).collect();
        let l = mlp.loss(&mut g, &v);
        g.value(l).item().unwrap()
    };
    let fd = finite_difference(&mut f, &params, 1e-5);
    for (v, n) in vars.iter().zip(&fd) {
        let e = rel_err(g.grad(*v).unwrap().data(), n);
        assert!(e <= 1e-6, "relative error {e}");
    }
}

#[test]
fn cnn_gradients_match_finite_differences() {
    let mut r = rng(5);
    let x = random(&mut r, &[2, 1, 6, 6]);
    let labels = [1usize, 0];
    let params = vec![
        random(&mut r, &[3, 1, 3, 3]),
        random(&mut r, &[3]),
        random(&mut r, &[2, 27]),
        random(&mut r, &[2]),
        Tensor::vector(vec![1.3, 0.7, 0.9]),
        Tensor::vector(vec![0.1, -0.2, 0.05]),
    ];
    let build = |g: &mut Graph, v: &[Var]| {
        let xv = g.constant(x.clone()).unwrap();
        let h = g.conv2d(xv, v[0], 1, 1).unwrap();
        let h = g.add_bias(h, v[1]).unwrap();
        let h = g
            .batch_norm(h, v[4], v[5], &[0.1, -0.1, 0.0], &[1.5, 0.5, 2.0], 1e-5)
            .unwrap();
        let h = g.relu(h).unwrap();
        let h = g.max_pool2(h).unwrap();
        let h = g.flatten(h).unwrap();
        let o = g.matmul_t(h, v[2], false, true).unwrap();
        let o = g.add_bias(o, v[3]).unwrap();
        g.softmax_cross_entropy(o, &labels).unwrap()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone()).unwrap()).collect();
    let loss = build(&mut g, &vars);
    let grads = g.gradients(loss).unwrap();
    let mut f = |p: &[Tensor]| {
        let mut g = Graph::new();
        let v: Vec<Var> = p.iter().map(|t| g.constant(t.clone()).unwrap()).collect();
        let l = build(&mut g, &v);
        g.value(l).item().unwrap()
    };
    let fd = finite_difference(&mut f, &params, 1e-5);
    for (v, n) in vars.iter().zip(&fd) {
        let e = rel_err(grads.get(*v).unwrap().data(), n);
        assert!(e <= 1e-6, "relative error {e}");
    }
}

fn half_quadratic(g: &mut Graph, w: Var, a: &Tensor) -> Var {
    let n = a.shape()[0];
    let av = g.constant(a.clone()).unwrap();
    let wc = g.reshape(w, &[n, 1]).unwrap();
    let aw = g.matmul(av, wc).unwrap();
    let q = g.dot(wc, aw).unwrap();
    g.scale(q, 0.5).unwrap()
}

#[test]
fn hvp_diagonal_quadratic() {
    let a = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 3.0]).unwrap();
    let mut g = Graph::new();
    let w = g.param(Tensor::vector(vec![0.4, -0.3, 1.1])).unwrap();
    let l = half_quadratic(&mut g, w, &a);
    let hv = g.grad_of_grad(l, w, &Tensor::vector(vec![1.0, 1.0, 1.0])).unwrap();
    assert_eq!(hv.data(), &[1.0, 2.0, 3.0]);
}

#[test]
fn hvp_random_symmetric() {
    let mut r = rng(6);
    let m = random(&mut r, &[3, 3]);
    let mut sym = vec![0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            sym[i * 3 + j] = m.data()[i * 3 + j] + m.data()[j * 3 + i];
        }
    }
    let a = Tensor::matrix(3, 3, sym).unwrap();
    let v = random(&mut r, &[3]);
    let mut g = Graph::new();
    let w = g.param(random(&mut r, &[3])).unwrap();
    let l = half_quadratic(&mut g, w, &a);
    let hv = g.grad_of_grad(l, w, &v).unwrap();
    let want = naive_matmul(&a, &v.reshape(&[3, 1]).unwrap());
    for (x, y) in hv.data().iter().zip(want) {
        assert!((x - y).abs() < 1e-10);
    }
}

#[test]
fn hvp_of_linear_loss_is_zero() {
    let mut g = Graph::new();
    let w = g.param(Tensor::vector(vec![1.0, 2.0])).unwrap();
    let c = g.constant(Tensor::vector(vec![3.0, -1.0])).unwrap();
    let l = g.dot(w, c).unwrap();
    let hv = g.grad_of_grad(l, w, &Tensor::vector(vec![0.5, 0.5])).unwrap();
    assert_eq!(hv.data(), &[0.0, 0.0]);
}

#[test]
fn hvp_vector_shape_checked() {
    let mut g = Graph::new();
    let w = g.param(Tensor::vector(vec![1.0, 2.0])).unwrap();
    let l = g.dot(w, w).unwrap();
    assert!(matches!(g.grad_of_grad(l, w, &Tensor::vector(vec![1.0])), Err(Error::Shape(_))));
}

#[test]
fn cnn_hessian_is_symmetric() {
    let mut r = rng(7);
    let x = random(&mut r, &[3, 2, 6, 6]);
    let labels = [0usize, 2, 1];
    let w1 = random(&mut r, &[4, 2, 3, 3]);
    let w2 = random(&mut r, &[3, 36]);
    let mut g = Graph::new();
    let xv = g.constant(x).unwrap();
    let wv = g.param(w1.clone()).unwrap();
    let w2v = g.param(w2).unwrap();
    let h = g.conv2d(xv, wv, 1, 1).unwrap();
    let h = g.relu(h).unwrap();
    let h = g.max_pool2(h).unwrap();
    let h = g.flatten(h).unwrap();
    let o = g.matmul_t(h, w2v, false, true).unwrap();
    let l = g.softmax_cross_entropy(o, &labels).unwrap();
    let gw = g.grad_graph(l, &[wv, w2v]).unwrap();
    for trial in 0..5 {
        let (target, shape) = if trial % 2 == 0 { (wv, w1.shape().to_vec()) } else { (w2v, vec![3, 36]) };
        let idx = if trial % 2 == 0 { 0 } else { 1 };
        let u = random(&mut r, &shape);
        let v = random(&mut r, &shape);
        let gv = gw[idx].unwrap();
        let hu = g.vjp(&[(gv, &u)]).unwrap().take(target).unwrap();
        let hv = g.vjp(&[(gv, &v)]).unwrap().take(target).unwrap();
        let vhu: f64 = v.data().iter().zip(hu.data()).map(|(a, b)| a * b).sum();
        let uhv: f64 = u.data().iter().zip(hv.data()).map(|(a, b)| a * b).sum();
        assert!((vhu - uhv).abs() < 1e-9, "{vhu} vs {uhv}");
    }
}

#[test]
fn hvp_matches_gradient_finite_difference() {
    // H·v ≈ (∇L(w + εv) − ∇L(w − εv)) / 2ε on a smooth two-layer net.
    let mut r = rng(8);
    let x = random(&mut r, &[4, 3]);
    let labels = [0usize, 1, 1, 0];
    let w1 = random(&mut r, &[5, 3]);
    let w2 = random(&mut r, &[2, 5]);
    let v = random(&mut r, &[5, 3]);
    let grad_at = |w: &Tensor| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let wv = g.param(w.clone()).unwrap();
        let w2v = g.constant(w2.clone()).unwrap();
        let h = g.matmul_t(xv, wv, false, true).unwrap();
        let o = g.matmul_t(h, w2v, false, true).unwrap();
        let l = g.softmax_cross_entropy(o, &labels).unwrap();
        (g, wv, l)
    };
    let (mut g, wv, l) = grad_at(&w1);
    let hv = g.grad_of_grad(l, wv, &v).unwrap();
    let eps = 1e-5;
    let shifted = |s: f64| {
        let w = Tensor::new(
            w1.shape().to_vec(),
            w1.data().iter().zip(v.data()).map(|(a, b)| a + s * b).collect(),
        )
        .unwrap();
        let (g, wv, l) = grad_at(&w);
        g.gradients(l).unwrap().take(wv).unwrap()
    };
    let (up, down) = (shifted(eps), shifted(-eps));
    let fd: Vec<f64> = up.data().iter().zip(down.data()).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
    assert!(rel_err(hv.data(), &fd) < 1e-6);
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut r = rng(9);
        let mut g = Graph::new();
        let x = g.constant(random(&mut r, &[2, 3, 8, 8])).unwrap();
        let w = g.constant(random(&mut r, &[4, 3, 3, 3])).unwrap();
        let y = g.conv2d(x, w, 1, 1).unwrap();
        let y = g.max_pool2(y).unwrap();
        g.value(y).clone()
    };
    let (a, b) = (run(), run());
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}
