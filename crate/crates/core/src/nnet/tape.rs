//! Reverse-mode automatic differentiation over channel-major real tensors.
//!
//! Every value on the tape is a `[channels, height, width]` buffer; scalars
//! are `[1, 1, 1]`. Nodes are appended in evaluation order, so a single
//! reverse sweep over the node list is a valid topological order.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::real::Real;

use super::conv;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub type Shape = [usize; 3];

pub const SCALAR: Shape = [1, 1, 1];

/// A real linear operator that equals its own transpose. On complex data in
/// the two-plane layout this is exactly a Hermitian operator.
pub trait SelfAdjoint<T: Real>: Send + Sync {
    fn apply(&self, x: &[T], shape: Shape) -> Vec<T>;
}

impl<T: Real, F> SelfAdjoint<T> for F
where
    F: Fn(&[T], Shape) -> Vec<T> + Send + Sync,
{
    fn apply(&self, x: &[T], shape: Shape) -> Vec<T> {
        self(x, shape)
    }
}

enum Op<T: Real> {
    Leaf,
    Conv { x: Var, w: Var, b: Var, k: usize, col: Vec<T> },
    Silu(Var),
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Var, Var),
    Slice { x: Var, start: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, T),
    /// `a + sign * s * b`, with `s` a scalar node; `a` may be absent.
    Axpy { a: Option<Var>, s: Var, b: Var, sign: T },
    Dot(Var, Var),
    Div(Var, Var),
    Exp(Var),
    Linear(Var, Arc<dyn SelfAdjoint<T>>),
}

struct Node<T: Real> {
    value: Vec<T>,
    shape: Shape,
    op: Op<T>,
}

#[derive(Default)]
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one scalar (or seeded) output with respect to every node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `v`; `None` if `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn numel(s: Shape) -> usize {
    s[0] * s[1] * s[2]
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    /// Scalar value of a `[1,1,1]` node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, value: Vec<T>, shape: Shape, op: Op<T>) -> Var {
        debug_assert_eq!(value.len(), numel(shape));
        self.nodes.push(Node { value, shape, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Vec<T>, shape: Shape) -> Result<Var> {
        if value.len() != numel(shape) {
            return Err(Error::Shape(format!(
                "leaf of shape {shape:?} needs {} values, got {}",
                numel(shape),
                value.len()
            )));
        }
        Ok(self.push(value, shape, Op::Leaf))
    }

    pub fn scalar_leaf(&mut self, v: T) -> Var {
        self.push(vec![v], SCALAR, Op::Leaf)
    }

    fn expect_same(&self, a: Var, b: Var, what: &str) -> Result<Shape> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(sa)
    }

    fn expect_scalar(&self, s: Var, what: &str) -> Result<()> {
        if self.shape(s) != SCALAR {
            return Err(Error::Shape(format!("{what}: expected a scalar node")));
        }
        Ok(())
    }

    /// Same-padded 2-D convolution. `w` has shape `[cout, cin*k*k, 1]`,
    /// `b` has shape `[cout, 1, 1]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, k: usize) -> Result<Var> {
        let [cin, h, wd] = self.shape(x);
        let [cout, kk, _] = self.shape(w);
        if kk != cin * k * k || self.shape(b) != [cout, 1, 1] || k.is_multiple_of(2) {
            return Err(Error::Shape(format!(
                "conv2d: input {:?}, weight {:?}, bias {:?}, kernel {k}",
                self.shape(x),
                self.shape(w),
                self.shape(b)
            )));
        }
        let col = if k == 1 { Vec::new() } else { conv::im2col(self.value(x), cin, h, wd, k) };
        let colref: &[T] = if k == 1 { self.value(x) } else { &col };
        let out = conv::conv_forward(colref, self.value(w), self.value(b), cout, cin * k * k, h * wd);
        Ok(self.push(out, [cout, h, wd], Op::Conv { x, w, b, k, col }))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v * sigmoid(v)).collect();
        let s = self.shape(x);
        self.push(out, s, Op::Silu(x))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let [c, h, w] = self.shape(x);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("avg_pool2 needs even sides, got {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x);
        let quarter = T::from_f64_lossy(0.25);
        let mut out = vec![T::zero(); c * ho * wo];
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let base = ch * h * w;
                    let s = xv[base + 2 * i * w + 2 * j]
                        + xv[base + 2 * i * w + 2 * j + 1]
                        + xv[base + (2 * i + 1) * w + 2 * j]
                        + xv[base + (2 * i + 1) * w + 2 * j + 1];
                    out[ch * ho * wo + i * wo + j] = s * quarter;
                }
            }
        }
        Ok(self.push(out, [c, ho, wo], Op::AvgPool2(x)))
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let [c, h, w] = self.shape(x);
        let (ho, wo) = (2 * h, 2 * w);
        let xv = self.value(x);
        let mut out = vec![T::zero(); c * ho * wo];
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    out[ch * ho * wo + i * wo + j] = xv[ch * h * w + (i / 2) * w + j / 2];
                }
            }
        }
        self.push(out, [c, ho, wo], Op::Upsample2(x))
    }

    /// Channel-wise concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1..] != sb[1..] {
            return Err(Error::Shape(format!("concat: spatial shapes {sa:?} and {sb:?} differ")));
        }
        let mut out = self.value(a).to_vec();
        out.extend_from_slice(self.value(b));
        Ok(self.push(out, [sa[0] + sb[0], sa[1], sa[2]], Op::Concat(a, b)))
    }

    /// Channels `start..start+len`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [c, h, w] = self.shape(x);
        if start + len > c {
            return Err(Error::Shape(format!("slice {start}+{len} of {c} channels")));
        }
        let out = self.value(x)[start * h * w..(start + len) * h * w].to_vec();
        Ok(self.push(out, [len, h, w], Op::Slice { x, start }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.expect_same(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        Ok(self.push(out, s, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.expect_same(a, b, "sub")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        Ok(self.push(out, s, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let s = self.shape(x);
        self.push(out, s, Op::Scale(x, c))
    }

    /// `s * b` for a scalar node `s`.
    pub fn scale_by(&mut self, b: Var, s: Var) -> Result<Var> {
        self.axpy_impl(None, s, b, T::one())
    }

    /// `a + s * b`.
    pub fn axpy(&mut self, a: Var, s: Var, b: Var) -> Result<Var> {
        self.axpy_impl(Some(a), s, b, T::one())
    }

    /// `a - s * b`.
    pub fn axmy(&mut self, a: Var, s: Var, b: Var) -> Result<Var> {
        self.axpy_impl(Some(a), s, b, -T::one())
    }

    fn axpy_impl(&mut self, a: Option<Var>, s: Var, b: Var, sign: T) -> Result<Var> {
        self.expect_scalar(s, "axpy")?;
        let shape = self.shape(b);
        if let Some(a) = a {
            self.expect_same(a, b, "axpy")?;
        }
        let f = sign * self.scalar(s);
        let out = match a {
            Some(a) => self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + f * y).collect(),
            None => self.value(b).iter().map(|&y| f * y).collect(),
        };
        Ok(self.push(out, shape, Op::Axpy { a, s, b, sign }))
    }

    /// Real inner product, as a scalar node.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_same(a, b, "dot")?;
        let v = dot(self.value(a), self.value(b));
        Ok(self.push(vec![v], SCALAR, Op::Dot(a, b)))
    }

    /// Scalar division.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_scalar(a, "div")?;
        self.expect_scalar(b, "div")?;
        let v = self.scalar(a) / self.scalar(b);
        Ok(self.push(vec![v], SCALAR, Op::Div(a, b)))
    }

    /// Scalar exponential.
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.expect_scalar(a, "exp")?;
        let v = self.scalar(a).exp();
        Ok(self.push(vec![v], SCALAR, Op::Exp(a)))
    }

    /// Applies a fixed self-adjoint linear operator.
    pub fn linear(&mut self, x: Var, op: Arc<dyn SelfAdjoint<T>>) -> Result<Var> {
        let s = self.shape(x);
        let out = op.apply(self.value(x), s);
        if out.len() != numel(s) {
            return Err(Error::Shape("linear operator changed the tensor size".into()));
        }
        Ok(self.push(out, s, Op::Linear(x, op)))
    }

    /// Reverse sweep from `output`, seeded with `seed` (same shape as the output).
    pub fn backward(&self, output: Var, seed: &[T]) -> Result<Gradients<T>> {
        if seed.len() != self.nodes[output.0].value.len() {
            return Err(Error::Shape(format!(
                "seed gradient has {} values, output has {}",
                seed.len(),
                self.nodes[output.0].value.len()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(seed.to_vec());
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv { x, w, b, k, col } => {
                    let [cin, h, wd] = self.shape(*x);
                    let cout = node.shape[0];
                    let kk = cin * k * k;
                    let n = h * wd;
                    let colref: &[T] = if *k == 1 { self.value(*x) } else { col };
                    let (dw, db) = conv::conv_backward_weights(colref, &g, cout, kk, n);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                    let dcol = conv::conv_backward_col(self.value(*w), &g, cout, kk, n);
                    let dx = if *k == 1 { dcol } else { conv::col2im(&dcol, cin, h, wd, *k) };
                    accumulate(&mut grads, *x, dx);
                }
                Op::Silu(x) => {
                    let dx = self
                        .value(*x)
                        .iter()
                        .zip(&g)
                        .map(|(&v, &gv)| {
                            let s = sigmoid(v);
                            gv * (s + v * s * (T::one() - s))
                        })
                        .collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::AvgPool2(x) => {
                    let [c, h, w] = self.shape(*x);
                    let (ho, wo) = (h / 2, w / 2);
                    let quarter = T::from_f64_lossy(0.25);
                    let mut dx = vec![T::zero(); c * h * w];
                    for ch in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                dx[ch * h * w + i * w + j] = g[ch * ho * wo + (i / 2) * wo + j / 2] * quarter;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Upsample2(x) => {
                    let [c, h, w] = self.shape(*x);
                    let (ho, wo) = (2 * h, 2 * w);
                    let mut dx = vec![T::zero(); c * h * w];
                    for ch in 0..c {
                        for i in 0..ho {
                            for j in 0..wo {
                                dx[ch * h * w + (i / 2) * w + j / 2] =
                                    dx[ch * h * w + (i / 2) * w + j / 2] + g[ch * ho * wo + i * wo + j];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Concat(a, b) => {
                    let na = self.value(*a).len();
                    accumulate(&mut grads, *a, g[..na].to_vec());
                    accumulate(&mut grads, *b, g[na..].to_vec());
                }
                Op::Slice { x, start } => {
                    let [c, h, w] = self.shape(*x);
                    let mut dx = vec![T::zero(); c * h * w];
                    dx[start * h * w..start * h * w + g.len()].copy_from_slice(&g);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    let neg = g.iter().map(|&v| -v).collect();
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *b, neg);
                }
                Op::Scale(x, c) => {
                    let dx = g.iter().map(|&v| v * *c).collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::Axpy { a, s, b, sign } => {
                    let sv = self.scalar(*s);
                    let ds = *sign * dot(&g, self.value(*b));
                    accumulate(&mut grads, *s, vec![ds]);
                    let f = *sign * sv;
                    accumulate(&mut grads, *b, g.iter().map(|&v| v * f).collect());
                    if let Some(a) = a {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Dot(a, b) => {
                    let gs = g[0];
                    let da = self.value(*b).iter().map(|&v| v * gs).collect();
                    let db = self.value(*a).iter().map(|&v| v * gs).collect();
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Div(a, b) => {
                    let (av, bv) = (self.scalar(*a), self.scalar(*b));
                    accumulate(&mut grads, *a, vec![g[0] / bv]);
                    accumulate(&mut grads, *b, vec![-g[0] * av / (bv * bv)]);
                }
                Op::Exp(a) => {
                    accumulate(&mut grads, *a, vec![g[0] * node.value[0]]);
                }
                Op::Linear(x, op) => {
                    let dx = op.apply(&g, node.shape);
                    accumulate(&mut grads, *x, dx);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(g) {
                *e = *e + x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Central-difference check of `d<seed, f(inputs)>/d inputs[which]`.
    fn check<F>(inputs: Vec<(Vec<f64>, Shape)>, f: F)
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let vars: Vec<Var> =
            inputs.iter().map(|(v, s)| tape.leaf(v.clone(), *s).unwrap()).collect();
        let out = f(&mut tape, &vars);
        let seed = rand_vec(tape.value(out).len(), &mut rng);
        let grads = tape.backward(out, &seed).unwrap();
        let eval = |inputs: &[(Vec<f64>, Shape)]| -> f64 {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs.iter().map(|(v, s)| t.leaf(v.clone(), *s).unwrap()).collect();
            let o = f(&mut t, &vs);
            dot(t.value(o), &seed)
        };
        let h = 1e-5;
        for (which, v) in vars.iter().enumerate() {
            let g = grads.get(*v).map(|g| g.to_vec()).unwrap_or(vec![0.0; inputs[which].0.len()]);
            for i in 0..inputs[which].0.len() {
                let mut plus = inputs.clone();
                plus[which].0[i] += h;
                let mut minus = inputs.clone();
                minus[which].0[i] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let err = (fd - g[i]).abs() / (1e-6 + fd.abs().max(g[i].abs()));
                assert!(err < 1e-5, "input {which} elem {i}: fd {fd} vs ad {}", g[i]);
            }
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in [1usize, 3] {
            let x = rand_vec(2 * 4 * 6, &mut rng);
            let w = rand_vec(3 * 2 * k * k, &mut rng);
            let b = rand_vec(3, &mut rng);
            check(
                vec![(x, [2, 4, 6]), (w, [3, 2 * k * k, 1]), (b, [3, 1, 1])],
                |t, v| t.conv2d(v[0], v[1], v[2], k).unwrap(),
            );
        }
    }

    #[test]
    fn pointwise_and_resampling_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_vec(2 * 4 * 4, &mut rng);
        check(vec![(x.clone(), [2, 4, 4])], |t, v| t.silu(v[0]));
        check(vec![(x.clone(), [2, 4, 4])], |t, v| t.avg_pool2(v[0]).unwrap());
        check(vec![(x.clone(), [2, 4, 4])], |t, v| t.upsample2(v[0]));
        check(vec![(x.clone(), [2, 4, 4])], |t, v| t.slice_channels(v[0], 1, 1).unwrap());
        let y = rand_vec(2 * 4 * 4, &mut rng);
        check(vec![(x.clone(), [2, 4, 4]), (y.clone(), [2, 4, 4])], |t, v| {
            let c = t.concat(v[0], v[1]).unwrap();
            let s = t.sub(c, c).unwrap();
            let a = t.add(c, s).unwrap();
            t.scale(a, 0.7)
        });
    }

    #[test]
    fn scalar_algebra_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_vec(8, &mut rng);
        let b = rand_vec(8, &mut rng);
        check(
            vec![(a, [2, 2, 2]), (b, [2, 2, 2]), (vec![0.3], SCALAR)],
            |t, v| {
                let lam = t.exp(v[2]).unwrap();
                let d = t.dot(v[0], v[1]).unwrap();
                let n = t.dot(v[0], v[0]).unwrap();
                let q = t.div(d, n).unwrap();
                let x = t.axpy(v[0], q, v[1]).unwrap();
                let y = t.axmy(x, lam, v[0]).unwrap();
                t.scale_by(y, lam).unwrap()
            },
        );
    }

    #[test]
    fn linear_op_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_vec(6, &mut rng);
        // symmetric tridiagonal
        let op: Arc<dyn SelfAdjoint<f64>> = Arc::new(|v: &[f64], _s: Shape| {
            (0..v.len())
                .map(|i| {
                    2.0 * v[i] + if i > 0 { 0.5 * v[i - 1] } else { 0.0 }
                        + if i + 1 < v.len() { 0.5 * v[i + 1] } else { 0.0 }
                })
                .collect::<Vec<_>>()
        });
        check(vec![(x, [1, 2, 3])], move |t, v| t.linear(v[0], op.clone()).unwrap());
    }

    #[test]
    fn shape_errors() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(vec![0.0; 4], [1, 2, 2]).unwrap();
        let b = t.leaf(vec![0.0; 6], [1, 2, 3]).unwrap();
        assert!(t.add(a, b).is_err());
        assert!(t.dot(a, b).is_err());
        assert!(t.leaf(vec![0.0; 3], [1, 2, 2]).is_err());
        assert!(t.backward(a, &[1.0]).is_err());
        let odd = t.leaf(vec![0.0; 9], [1, 3, 3]).unwrap();
        assert!(t.avg_pool2(odd).is_err());
    }
}
