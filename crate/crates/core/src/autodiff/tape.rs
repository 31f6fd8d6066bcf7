use super::dual::{Dual, Scalar};
use super::AdError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(u32);

impl Var {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Input,
    Const,
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Div(u32, u32),
    Neg(u32),
    Scale(u32, f64),
    Shift(u32, f64),
    Powf(u32, f64),
    Exp(u32),
    Ln(u32),
    Sqrt(u32),
    Tanh(u32),
    Silu(u32),
    Sin(u32),
    Cos(u32),
    Acos(u32),
    LeakyRelu(u32, f64),
    /// bounds live in `coef[c]`, `coef[c + 1]`
    Clamp(u32, u32),
    /// `args[start..start + len]`
    Sum(u32, u32),
    /// pairs `args[start + 2k], args[start + 2k + 1]`, `k < len`
    Dot(u32, u32),
    /// `coef[c] + Σ coef[c + 1 + k] · args[start + k]`
    Lin(u32, u32, u32),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Const => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::Powf(..) => "pow",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Tanh(..) => "tanh",
            Op::Silu(..) => "silu",
            Op::Sin(..) => "sin",
            Op::Cos(..) => "cos",
            Op::Acos(..) => "acos",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Clamp(..) => "clamp",
            Op::Sum(..) => "sum",
            Op::Dot(..) => "dot",
            Op::Lin(..) => "lin",
        }
    }
}

/// Append-only scalar tape for reverse-mode differentiation.
///
/// Nodes are recorded in evaluation order, so every node's operands
/// precede it. Values are computed eagerly while recording.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    ops: Vec<Op>,
    vals: Vec<f64>,
    args: Vec<u32>,
    coef: Vec<f64>,
}

/// Adjoints of every node with respect to the seeded output(s).
#[derive(Clone, Debug)]
pub struct Adjoints(Vec<f64>);

impl Adjoints {
    #[inline]
    pub fn get(&self, v: Var) -> f64 {
        self.0[v.index()]
    }

    pub fn collect(&self, vars: &[Var]) -> Vec<f64> {
        vars.iter().map(|&v| self.get(v)).collect()
    }
}

/// Result of a forward-over-reverse sweep: the gradient and the
/// Hessian-vector product along the seeded input tangent.
#[derive(Clone, Debug)]
pub struct SecondOrder(Vec<Dual>);

impl SecondOrder {
    #[inline]
    pub fn grad(&self, v: Var) -> f64 {
        self.0[v.index()].primal
    }

    #[inline]
    pub fn hvp(&self, v: Var) -> f64 {
        self.0[v.index()].tangent
    }

    pub fn grads(&self, vars: &[Var]) -> Vec<f64> {
        vars.iter().map(|&v| self.grad(v)).collect()
    }

    pub fn hvps(&self, vars: &[Var]) -> Vec<f64> {
        vars.iter().map(|&v| self.hvp(v)).collect()
    }
}

#[inline]
fn u(v: Var) -> u32 {
    v.0
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(nodes: usize) -> Self {
        Tape {
            ops: Vec::with_capacity(nodes),
            vals: Vec::with_capacity(nodes),
            args: Vec::with_capacity(nodes),
            coef: Vec::new(),
        }
    }

    /// Drops all nodes, keeping allocations.
    pub fn clear(&mut self) {
        self.ops.clear();
        self.vals.clear();
        self.args.clear();
        self.coef.clear();
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> f64 {
        self.vals[v.index()]
    }

    pub fn values(&self, vars: &[Var]) -> Vec<f64> {
        vars.iter().map(|&v| self.value(v)).collect()
    }

    #[inline]
    fn push(&mut self, op: Op, val: f64) -> Var {
        let idx = self.ops.len() as u32;
        self.ops.push(op);
        self.vals.push(val);
        Var(idx)
    }

    pub fn input(&mut self, v: f64) -> Var {
        self.push(Op::Input, v)
    }

    pub fn inputs(&mut self, vs: &[f64]) -> Vec<Var> {
        vs.iter().map(|&v| self.input(v)).collect()
    }

    pub fn constant(&mut self, v: f64) -> Var {
        self.push(Op::Const, v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(Op::Add(u(a), u(b)), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(Op::Sub(u(a), u(b)), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(Op::Mul(u(a), u(b)), v)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) / self.value(b);
        self.push(Op::Div(u(a), u(b)), v)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = -self.value(a);
        self.push(Op::Neg(u(a)), v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(Op::Scale(u(a), c), v)
    }

    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(Op::Shift(u(a), c), v)
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let v = self.value(a).powf(p);
        self.push(Op::Powf(u(a), p), v)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).exp();
        self.push(Op::Exp(u(a)), v)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).ln();
        self.push(Op::Ln(u(a)), v)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).sqrt();
        self.push(Op::Sqrt(u(a)), v)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).tanh();
        self.push(Op::Tanh(u(a)), v)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.push(Op::Silu(u(a)), x / (1.0 + (-x).exp()))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let v = self.value(a).sin();
        self.push(Op::Sin(u(a)), v)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let v = self.value(a).cos();
        self.push(Op::Cos(u(a)), v)
    }

    pub fn acos(&mut self, a: Var) -> Var {
        let v = self.value(a).acos();
        self.push(Op::Acos(u(a)), v)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let x = self.value(a);
        self.push(Op::LeakyRelu(u(a), slope), if x > 0.0 { x } else { slope * x })
    }

    /// Clamps to `[lo, hi]`; the derivative is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let c = self.coef.len() as u32;
        self.coef.push(lo);
        self.coef.push(hi);
        let v = self.value(a).clamp(lo, hi);
        self.push(Op::Clamp(u(a), c), v)
    }

    pub fn sum(&mut self, xs: &[Var]) -> Var {
        if xs.is_empty() {
            return self.constant(0.0);
        }
        let start = self.args.len() as u32;
        let mut v = 0.0;
        for &x in xs {
            self.args.push(x.0);
            v += self.value(x);
        }
        self.push(Op::Sum(start, xs.len() as u32), v)
    }

    /// `Σ a_k b_k` with both operands on the tape.
    pub fn dot(&mut self, a: &[Var], b: &[Var]) -> Var {
        assert_eq!(a.len(), b.len(), "dot operands differ in length");
        if a.is_empty() {
            return self.constant(0.0);
        }
        let start = self.args.len() as u32;
        let mut v = 0.0;
        for (&x, &y) in a.iter().zip(b) {
            self.args.push(x.0);
            self.args.push(y.0);
            v += self.value(x) * self.value(y);
        }
        self.push(Op::Dot(start, a.len() as u32), v)
    }

    /// `bias + Σ w_k x_k` with constant coefficients.
    pub fn lin(&mut self, bias: f64, w: &[f64], xs: &[Var]) -> Var {
        assert_eq!(w.len(), xs.len(), "lin operands differ in length");
        let start = self.args.len() as u32;
        let c = self.coef.len() as u32;
        self.coef.push(bias);
        let mut v = bias;
        for (&wk, &x) in w.iter().zip(xs) {
            self.args.push(x.0);
            self.coef.push(wk);
            v += wk * self.value(x);
        }
        self.push(Op::Lin(start, xs.len() as u32, c), v)
    }

    /// Dense `W x` with `W` given row-major on the tape.
    pub fn matvec(&mut self, w: &[Var], x: &[Var]) -> Vec<Var> {
        let cols = x.len();
        assert!(cols > 0 && w.len().is_multiple_of(cols), "matvec shape");
        w.chunks_exact(cols).map(|row| self.dot(row, x)).collect()
    }

    /// Dense `W x + b` with constant `W` (row-major) and `b`.
    pub fn matvec_const(&mut self, w: &[f64], b: &[f64], x: &[Var]) -> Vec<Var> {
        let cols = x.len();
        assert_eq!(w.len(), b.len() * cols, "matvec_const shape");
        w.chunks_exact(cols).zip(b).map(|(row, &bias)| self.lin(bias, row, x)).collect()
    }

    pub fn gather(&self, xs: &[Var], idx: &[usize]) -> Vec<Var> {
        idx.iter().map(|&i| xs[i]).collect()
    }

    /// `out[t] = Σ_{k: idx[k] = t} values[k]` over `n` targets.
    pub fn scatter_add(&mut self, values: &[Var], idx: &[usize], n: usize) -> Vec<Var> {
        let mut buckets: Vec<Vec<Var>> = vec![Vec::new(); n];
        for (&v, &t) in values.iter().zip(idx) {
            buckets[t].push(v);
        }
        buckets.iter().map(|b| self.sum(b)).collect()
    }

    /// First non-finite recorded value, if any.
    pub fn check_finite(&self) -> Result<(), AdError> {
        match self.vals.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(AdError::NonFinite { op_index: i, op: self.ops[i].name() }),
        }
    }

    #[inline]
    fn eval<T: Scalar>(&self, op: Op, v: &[T]) -> T {
        let g = |i: u32| v[i as usize];
        match op {
            Op::Input | Op::Const => unreachable!("leaf nodes are not evaluated"),
            Op::Add(a, b) => g(a) + g(b),
            Op::Sub(a, b) => g(a) - g(b),
            Op::Mul(a, b) => g(a) * g(b),
            Op::Div(a, b) => g(a) / g(b),
            Op::Neg(a) => -g(a),
            Op::Scale(a, c) => g(a).mul_f(c),
            Op::Shift(a, c) => g(a) + T::cst(c),
            Op::Powf(a, p) => g(a).powf(p),
            Op::Exp(a) => g(a).exp(),
            Op::Ln(a) => g(a).ln(),
            Op::Sqrt(a) => g(a).sqrt(),
            Op::Tanh(a) => g(a).tanh(),
            Op::Silu(a) => g(a) * g(a).sigmoid(),
            Op::Sin(a) => g(a).sin(),
            Op::Cos(a) => g(a).cos(),
            Op::Acos(a) => g(a).acos(),
            Op::LeakyRelu(a, s) => {
                let x = g(a);
                if x.primal() > 0.0 {
                    x
                } else {
                    x.mul_f(s)
                }
            }
            Op::Clamp(a, c) => {
                let (lo, hi) = (self.coef[c as usize], self.coef[c as usize + 1]);
                let x = g(a);
                if x.primal() < lo {
                    T::cst(lo)
                } else if x.primal() > hi {
                    T::cst(hi)
                } else {
                    x
                }
            }
            Op::Sum(s, n) => {
                let mut acc = T::cst(0.0);
                for &i in &self.args[s as usize..(s + n) as usize] {
                    acc += g(i);
                }
                acc
            }
            Op::Dot(s, n) => {
                let mut acc = T::cst(0.0);
                for p in self.args[s as usize..(s + 2 * n) as usize].chunks_exact(2) {
                    acc += g(p[0]) * g(p[1]);
                }
                acc
            }
            Op::Lin(s, n, c) => {
                let c = c as usize;
                let mut acc = T::cst(self.coef[c]);
                for (k, &i) in self.args[s as usize..(s + n) as usize].iter().enumerate() {
                    acc += g(i).mul_f(self.coef[c + 1 + k]);
                }
                acc
            }
        }
    }

    fn reverse<T: Scalar>(&self, v: &[T], adj: &mut [T]) {
        for i in (0..self.ops.len()).rev() {
            let a = adj[i];
            if a.is_zero() {
                continue;
            }
            match self.ops[i] {
                Op::Input | Op::Const => {}
                Op::Add(x, y) => {
                    adj[x as usize] += a;
                    adj[y as usize] += a;
                }
                Op::Sub(x, y) => {
                    adj[x as usize] += a;
                    adj[y as usize] += -a;
                }
                Op::Mul(x, y) => {
                    let (vx, vy) = (v[x as usize], v[y as usize]);
                    adj[x as usize] += a * vy;
                    adj[y as usize] += a * vx;
                }
                Op::Div(x, y) => {
                    let vy = v[y as usize];
                    adj[x as usize] += a / vy;
                    adj[y as usize] += -(a * v[i] / vy);
                }
                Op::Neg(x) => adj[x as usize] += -a,
                Op::Scale(x, c) => adj[x as usize] += a.mul_f(c),
                Op::Shift(x, _) => adj[x as usize] += a,
                Op::Powf(x, p) => {
                    let d = if p == 0.0 { T::cst(0.0) } else { v[x as usize].powf(p - 1.0).mul_f(p) };
                    adj[x as usize] += a * d;
                }
                Op::Exp(x) => adj[x as usize] += a * v[i],
                Op::Ln(x) => adj[x as usize] += a / v[x as usize],
                Op::Sqrt(x) => adj[x as usize] += (a / v[i]).mul_f(0.5),
                Op::Tanh(x) => {
                    let t = v[i];
                    adj[x as usize] += a * (T::cst(1.0) - t * t);
                }
                Op::Silu(x) => {
                    let vx = v[x as usize];
                    let s = vx.sigmoid();
                    adj[x as usize] += a * s * (T::cst(1.0) + vx * (T::cst(1.0) - s));
                }
                Op::Sin(x) => adj[x as usize] += a * v[x as usize].cos(),
                Op::Cos(x) => adj[x as usize] += -(a * v[x as usize].sin()),
                Op::Acos(x) => {
                    let vx = v[x as usize];
                    adj[x as usize] += -(a / (T::cst(1.0) - vx * vx).sqrt());
                }
                Op::LeakyRelu(x, s) => {
                    adj[x as usize] += if v[x as usize].primal() > 0.0 { a } else { a.mul_f(s) };
                }
                Op::Clamp(x, c) => {
                    let (lo, hi) = (self.coef[c as usize], self.coef[c as usize + 1]);
                    let px = v[x as usize].primal();
                    if px >= lo && px <= hi {
                        adj[x as usize] += a;
                    }
                }
                Op::Sum(s, n) => {
                    for &k in &self.args[s as usize..(s + n) as usize] {
                        adj[k as usize] += a;
                    }
                }
                Op::Dot(s, n) => {
                    for p in self.args[s as usize..(s + 2 * n) as usize].chunks_exact(2) {
                        let (x, y) = (p[0] as usize, p[1] as usize);
                        let (vx, vy) = (v[x], v[y]);
                        adj[x] += a * vy;
                        adj[y] += a * vx;
                    }
                }
                Op::Lin(s, n, c) => {
                    let c = c as usize;
                    for (k, &x) in self.args[s as usize..(s + n) as usize].iter().enumerate() {
                        adj[x as usize] += a.mul_f(self.coef[c + 1 + k]);
                    }
                }
            }
        }
    }

    /// Reverse sweep from a single output.
    pub fn gradient(&self, out: Var) -> Result<Adjoints, AdError> {
        self.gradient_seeded(&[(out, 1.0)])
    }

    /// Reverse sweep of `Σ w_k · out_k`.
    pub fn gradient_seeded(&self, seeds: &[(Var, f64)]) -> Result<Adjoints, AdError> {
        self.check_finite()?;
        let mut adj = vec![0.0; self.ops.len()];
        for &(v, w) in seeds {
            adj[v.index()] += w;
        }
        self.reverse::<f64>(&self.vals, &mut adj);
        Ok(Adjoints(adj))
    }

    /// Forward-over-reverse sweep: gradient of `out` plus the product of
    /// its Hessian with the input-space direction `dir`.
    pub fn hvp(&self, out: Var, dir: &[(Var, f64)]) -> Result<SecondOrder, AdError> {
        self.hvp_seeded(&[(out, 1.0)], dir)
    }

    pub fn hvp_seeded(&self, seeds: &[(Var, f64)], dir: &[(Var, f64)]) -> Result<SecondOrder, AdError> {
        let seeds: Vec<(Var, Dual)> = seeds.iter().map(|&(v, w)| (v, Dual::new(w, 0.0))).collect();
        self.second_order(&seeds, dir)
    }

    /// Forward-over-reverse sweep with dual-valued output seeds. A seed
    /// `(1, b)` on output `y` adds `b · ∇y` to the tangent part, which lets
    /// one sweep combine a Hessian-vector product with a weighted gradient.
    pub fn second_order(&self, seeds: &[(Var, Dual)], dir: &[(Var, f64)]) -> Result<SecondOrder, AdError> {
        self.check_finite()?;
        let n = self.ops.len();
        let mut tangent = vec![0.0; n];
        for &(v, t) in dir {
            debug_assert!(matches!(self.ops[v.index()], Op::Input), "tangent seeded on a non-input node");
            tangent[v.index()] += t;
        }
        let mut duals: Vec<Dual> = Vec::with_capacity(n);
        for i in 0..n {
            let d = match self.ops[i] {
                Op::Input | Op::Const => Dual::new(self.vals[i], tangent[i]),
                op => Dual::new(self.vals[i], self.eval::<Dual>(op, &duals).tangent),
            };
            duals.push(d);
        }
        drop(tangent);
        let mut adj = vec![Dual::default(); n];
        for &(v, w) in seeds {
            adj[v.index()] += w;
        }
        self.reverse::<Dual>(&duals, &mut adj);
        Ok(SecondOrder(adj))
    }

    /// Forward-mode directional derivative of every node along the input
    /// direction `dir`.
    pub fn jvp(&self, dir: &[(Var, f64)]) -> Result<Vec<f64>, AdError> {
        self.check_finite()?;
        let n = self.ops.len();
        let mut seed = vec![0.0; n];
        for &(v, t) in dir {
            debug_assert!(matches!(self.ops[v.index()], Op::Input), "tangent seeded on a non-input node");
            seed[v.index()] += t;
        }
        let mut duals: Vec<Dual> = Vec::with_capacity(n);
        for i in 0..n {
            let d = match self.ops[i] {
                Op::Input | Op::Const => Dual::new(self.vals[i], seed[i]),
                op => Dual::new(self.vals[i], self.eval::<Dual>(op, &duals).tangent),
            };
            duals.push(d);
        }
        Ok(duals.into_iter().map(|d| d.tangent).collect())
    }

    /// Recomputes every non-leaf value after leaf values were changed.
    pub fn set_leaf(&mut self, v: Var, value: f64) {
        assert!(matches!(self.ops[v.index()], Op::Input | Op::Const));
        self.vals[v.index()] = value;
    }

    pub fn recompute(&mut self) {
        for i in 0..self.ops.len() {
            let op = self.ops[i];
            if !matches!(op, Op::Input | Op::Const) {
                let v = self.eval::<f64>(op, &self.vals);
                self.vals[i] = v;
            }
        }
    }
}
