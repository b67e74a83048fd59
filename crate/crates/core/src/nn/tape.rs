//! The tape. A [`Tape`] records every op of one forward pass; [`Tape::backward`]
//! walks it once in reverse and accumulates adjoints. Tensors are `ArrayD<f64>`:
//! scalars are 0-d, vectors (n), matrices (m, k), feature maps (c, h, w).
//!
//! Tapes are cheap and short-lived: build one per training step, read the
//! gradients, drop it. Ops assert shapes eagerly; a shape bug should die at
//! the op, not three layers later in a gemm.

use ndarray::{ArrayD, ArrayViewD, Axis, Ix1, Ix2, Ix3, IxDyn, Slice};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Recip(Var),
    Sqrt(Var),
    Log(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    /// x: (c, h, w) plus per-channel bias (c).
    AddBias(Var, Var),
    /// x: (c, h, w) scaled per channel by (c).
    MulChan(Var, Var),
    /// x: (c, h, w) gated by a single-channel map (1, h, w).
    MulMap(Var, Var),
    /// (m, k) x (k, n).
    Matmul(Var, Var),
    /// (m, k) x (k,) -> (m,).
    MatVec(Var, Var),
    SumAll(Var),
    MeanAll(Var),
    /// (c, h, w) -> (c,): mean over the spatial axes.
    SpatialMean(Var),
    /// (c, h, w) -> (1, h, w): mean over channels.
    ChanMean(Var),
    /// (c, h, w) -> (1, h, w): max over channels, first index wins.
    ChanMax(Var),
    Concat(Vec<Var>, usize),
    Narrow {
        src: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    /// (c, h, w) -> (c, 2h, 2w), bilinear, align_corners = false.
    UpBilinear2(Var),
    /// Bilinear warp with zero outside; m maps output (x, y) to input coords.
    Affine(Var, [f64; 6]),
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints from one backward pass, indexed by the `Var`s of the same tape.
pub struct Grads {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient, materialized as zeros when the var never influenced the loss.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> ArrayD<f64> {
        match self.grads[v.0].as_ref() {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(shape)),
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.len(), 1, "expected scalar, got shape {:?}", val.shape());
        *val.first().unwrap()
    }

    /// Differentiable input (a parameter or anything needing a gradient).
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shapes");
        let v = self.value(a) + self.value(b);
        let g = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shapes");
        let v = self.value(a) - self.value(b);
        let g = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shapes");
        let v = self.value(a) * self.value(b);
        let g = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), g)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| -x);
        let g = self.needs(a);
        self.push(v, Op::Neg(a), g)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).mapv(|x| k * x);
        let g = self.needs(a);
        self.push(v, Op::Scale(a, k), g)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).mapv(|x| x + k);
        let g = self.needs(a);
        self.push(v, Op::AddScalar(a), g)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 / x);
        let g = self.needs(a);
        self.push(v, Op::Recip(a), g)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        debug_assert!(self.value(a).iter().all(|&x| x >= 0.0), "sqrt of negative");
        let v = self.value(a).mapv(f64::sqrt);
        let g = self.needs(a);
        self.push(v, Op::Sqrt(a), g)
    }

    pub fn log(&mut self, a: Var) -> Var {
        debug_assert!(self.value(a).iter().all(|&x| x > 0.0), "log of non-positive");
        let v = self.value(a).mapv(f64::ln);
        let g = self.needs(a);
        self.push(v, Op::Log(a), g)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::abs);
        let g = self.needs(a);
        self.push(v, Op::Abs(a), g)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        let g = self.needs(a);
        self.push(v, Op::Clamp(a, lo, hi), g)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let g = self.needs(a);
        self.push(v, Op::Sigmoid(a), g)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        let g = self.needs(a);
        self.push(v, Op::Tanh(a), g)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).mapv(|x| if x >= 0.0 { x } else { slope * x });
        let g = self.needs(a);
        self.push(v, Op::LeakyRelu(a, slope), g)
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 3, "add_bias expects (c,h,w)");
        assert_eq!(self.value(b).shape(), [xs[0]], "bias per channel");
        let mut v = self.value(x).clone();
        {
            let bv = self.value(b);
            for c in 0..xs[0] {
                let bc = bv[[c]];
                v.index_axis_mut(Axis(0), c).mapv_inplace(|x| x + bc);
            }
        }
        let g = self.needs(x) || self.needs(b);
        self.push(v, Op::AddBias(x, b), g)
    }

    pub fn mul_chan(&mut self, x: Var, k: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 3, "mul_chan expects (c,h,w)");
        assert_eq!(self.value(k).shape(), [xs[0]], "scale per channel");
        let mut v = self.value(x).clone();
        {
            let kv = self.value(k);
            for c in 0..xs[0] {
                let kc = kv[[c]];
                v.index_axis_mut(Axis(0), c).mapv_inplace(|x| x * kc);
            }
        }
        let g = self.needs(x) || self.needs(k);
        self.push(v, Op::MulChan(x, k), g)
    }

    pub fn mul_map(&mut self, x: Var, m: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ms = self.value(m).shape().to_vec();
        assert_eq!(xs.len(), 3, "mul_map expects (c,h,w)");
        assert_eq!(ms, [1, xs[1], xs[2]], "map is (1,h,w)");
        let mut v = self.value(x).clone();
        {
            let mv = self.value(m);
            let plane = mv.index_axis(Axis(0), 0);
            for c in 0..xs[0] {
                let mut ch = v.index_axis_mut(Axis(0), c);
                ch.zip_mut_with(&plane, |x, &m| *x *= m);
            }
        }
        let g = self.needs(x) || self.needs(m);
        self.push(v, Op::MulMap(x, m), g)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dims");
        let v = av.dot(&bv).into_dyn();
        let g = self.needs(a) || self.needs(b);
        self.push(v, Op::Matmul(a, b), g)
    }

    pub fn matvec(&mut self, a: Var, x: Var) -> Var {
        let av = self.value(a).view().into_dimensionality::<Ix2>().unwrap();
        let xv = self.value(x).view().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(av.ncols(), xv.len(), "matvec inner dims");
        let v = av.dot(&xv).into_dyn();
        let g = self.needs(a) || self.needs(x);
        self.push(v, Op::MatVec(a, x), g)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = ArrayD::from_elem(IxDyn(&[]), self.value(a).sum());
        let g = self.needs(a);
        self.push(v, Op::SumAll(a), g)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        assert!(n > 0, "mean of empty tensor");
        let v = ArrayD::from_elem(IxDyn(&[]), self.value(a).sum() / n as f64);
        let g = self.needs(a);
        self.push(v, Op::MeanAll(a), g)
    }

    pub fn spatial_mean(&mut self, a: Var) -> Var {
        let s = self.value(a).shape().to_vec();
        assert_eq!(s.len(), 3, "spatial_mean expects (c,h,w)");
        let hw = (s[1] * s[2]) as f64;
        let mut out = ArrayD::zeros(IxDyn(&[s[0]]));
        for c in 0..s[0] {
            out[[c]] = self.value(a).index_axis(Axis(0), c).sum() / hw;
        }
        let g = self.needs(a);
        self.push(out, Op::SpatialMean(a), g)
    }

    pub fn chan_mean(&mut self, a: Var) -> Var {
        let s = self.value(a).shape().to_vec();
        assert_eq!(s.len(), 3, "chan_mean expects (c,h,w)");
        let v = self
            .value(a)
            .mean_axis(Axis(0))
            .unwrap()
            .insert_axis(Axis(0))
            .into_dyn();
        let g = self.needs(a);
        self.push(v.as_standard_layout().to_owned(), Op::ChanMean(a), g)
    }

    pub fn chan_max(&mut self, a: Var) -> Var {
        let s = self.value(a).shape().to_vec();
        assert_eq!(s.len(), 3, "chan_max expects (c,h,w)");
        let mut out = ArrayD::from_elem(IxDyn(&[1, s[1], s[2]]), f64::NEG_INFINITY);
        {
            let av = self.value(a);
            for c in 0..s[0] {
                for y in 0..s[1] {
                    for x in 0..s[2] {
                        let v = av[[c, y, x]];
                        if v > out[[0, y, x]] {
                            out[[0, y, x]] = v;
                        }
                    }
                }
            }
        }
        let g = self.needs(a);
        self.push(out, Op::ChanMax(a), g)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let views: Vec<ArrayViewD<f64>> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let g = parts.iter().any(|p| self.needs(*p));
        self.push(
            v.as_standard_layout().to_owned(),
            Op::Concat(parts.to_vec(), axis),
            g,
        )
    }

    pub fn narrow(&mut self, src: Var, axis: usize, start: usize, len: usize) -> Var {
        let s = self.value(src).shape().to_vec();
        assert!(axis < s.len() && start + len <= s[axis], "narrow bounds");
        let v = self
            .value(src)
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        let g = self.needs(src);
        self.push(
            v.as_standard_layout().to_owned(),
            Op::Narrow {
                src,
                axis,
                start,
                len,
            },
            g,
        )
    }

    /// Crop rows y0..y0+h and cols x0..x0+w of a (c, H, W) map.
    pub fn crop(&mut self, src: Var, y0: usize, x0: usize, h: usize, w: usize) -> Var {
        let rows = self.narrow(src, 1, y0, h);
        self.narrow(rows, 2, x0, w)
    }

    pub fn reshape(&mut self, src: Var, shape: &[usize]) -> Var {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.value(src).len(), "reshape element count");
        let data: Vec<f64> = self.value(src).iter().copied().collect();
        let v = ArrayD::from_shape_vec(IxDyn(shape), data).unwrap();
        let g = self.needs(src);
        self.push(v, Op::Reshape(src), g)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 3, "conv input (c,h,w)");
        assert_eq!(ws.len(), 4, "conv weight (co,ci,kh,kw)");
        assert_eq!(xs[0], ws[1], "conv channels");
        assert!(stride >= 1);
        let v = conv2d_forward(self.value(x), self.value(w), stride, pad);
        let g = self.needs(x) || self.needs(w);
        self.push(v, Op::Conv2d { x, w, stride, pad }, g)
    }

    pub fn upsample_bilinear_2x(&mut self, x: Var) -> Var {
        let s = self.value(x).shape().to_vec();
        assert_eq!(s.len(), 3, "upsample input (c,h,w)");
        let v = up2_forward(self.value(x));
        let g = self.needs(x);
        self.push(v, Op::UpBilinear2(x), g)
    }

    /// `m = [a, b, c, d, e, f]` maps output pixel (x, y) to input
    /// (a x + b y + c, d x + e y + f); samples bilinearly, zero outside.
    pub fn affine_warp(&mut self, x: Var, m: [f64; 6]) -> Var {
        let s = self.value(x).shape().to_vec();
        assert_eq!(s.len(), 3, "warp input (c,h,w)");
        let v = affine_forward(self.value(x), m);
        let g = self.needs(x);
        self.push(v, Op::Affine(x, m), g)
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(
            self.value(loss).len(),
            1,
            "backward needs a scalar loss, got {:?}",
            self.value(loss).shape()
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(ArrayD::from_elem(self.value(loss).raw_dim(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                grads[i] = Some(gout);
                continue;
            }
            self.accumulate(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Grads { grads }
    }

    fn accumulate(&self, i: usize, gout: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        // Adds `gout` transformed by the op's adjoint into each input slot that
        // wants gradient.
        let mut bump = |v: Var, g: ArrayD<f64>| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => *acc += &g,
                slot @ None => *slot = Some(g),
            }
        };

        match &self.nodes[i].op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                bump(*a, gout.clone());
                bump(*b, gout.clone());
            }
            Op::Sub(a, b) => {
                bump(*a, gout.clone());
                bump(*b, gout.mapv(|g| -g));
            }
            Op::Mul(a, b) => {
                bump(*a, gout * self.value(*b));
                bump(*b, gout * self.value(*a));
            }
            Op::Neg(a) => bump(*a, gout.mapv(|g| -g)),
            Op::Scale(a, k) => bump(*a, gout.mapv(|g| g * k)),
            Op::AddScalar(a) => bump(*a, gout.clone()),
            Op::Recip(a) => {
                let x = self.value(*a);
                bump(*a, gout * &x.mapv(|x| -1.0 / (x * x)));
            }
            Op::Sqrt(a) => {
                let y = &self.nodes[i].value;
                bump(*a, gout * &y.mapv(|y| 0.5 / y));
            }
            Op::Log(a) => {
                let x = self.value(*a);
                bump(*a, gout * &x.mapv(|x| 1.0 / x));
            }
            Op::Abs(a) => {
                let x = self.value(*a);
                bump(*a, gout * &x.mapv(|x| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 }));
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a);
                let mask = x.mapv(|x| if x > *lo && x < *hi { 1.0 } else { 0.0 });
                bump(*a, gout * &mask);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                bump(*a, gout * &y.mapv(|y| y * (1.0 - y)));
            }
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                bump(*a, gout * &y.mapv(|y| 1.0 - y * y));
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a);
                let s = *slope;
                bump(*a, gout * &x.mapv(|x| if x >= 0.0 { 1.0 } else { s }));
            }
            Op::AddBias(x, b) => {
                bump(*x, gout.clone());
                if self.needs(*b) {
                    let c = gout.shape()[0];
                    let mut gb = ArrayD::zeros(IxDyn(&[c]));
                    for ci in 0..c {
                        gb[[ci]] = gout.index_axis(Axis(0), ci).sum();
                    }
                    bump(*b, gb);
                }
            }
            Op::MulChan(x, k) => {
                let c = gout.shape()[0];
                if self.needs(*x) {
                    let mut gx = gout.clone();
                    let kv = self.value(*k);
                    for ci in 0..c {
                        let kc = kv[[ci]];
                        gx.index_axis_mut(Axis(0), ci).mapv_inplace(|g| g * kc);
                    }
                    bump(*x, gx);
                }
                if self.needs(*k) {
                    let xv = self.value(*x);
                    let mut gk = ArrayD::zeros(IxDyn(&[c]));
                    for ci in 0..c {
                        gk[[ci]] = (&gout.index_axis(Axis(0), ci) * &xv.index_axis(Axis(0), ci)).sum();
                    }
                    bump(*k, gk);
                }
            }
            Op::MulMap(x, m) => {
                let (c, h, w) = {
                    let s = gout.shape();
                    (s[0], s[1], s[2])
                };
                if self.needs(*x) {
                    let mut gx = gout.clone();
                    let mv = self.value(*m);
                    let plane = mv.index_axis(Axis(0), 0);
                    for ci in 0..c {
                        gx.index_axis_mut(Axis(0), ci)
                            .zip_mut_with(&plane, |g, &m| *g *= m);
                    }
                    bump(*x, gx);
                }
                if self.needs(*m) {
                    let xv = self.value(*x);
                    let mut gm = ArrayD::zeros(IxDyn(&[1, h, w]));
                    for ci in 0..c {
                        let prod = &gout.index_axis(Axis(0), ci) * &xv.index_axis(Axis(0), ci);
                        gm.index_axis_mut(Axis(0), 0)
                            .zip_mut_with(&prod, |g, &p| *g += p);
                    }
                    bump(*m, gm);
                }
            }
            Op::Matmul(a, b) => {
                let g2 = gout.view().into_dimensionality::<Ix2>().unwrap();
                if self.needs(*a) {
                    let bv = self.value(*b).view().into_dimensionality::<Ix2>().unwrap();
                    bump(*a, g2.dot(&bv.t()).into_dyn());
                }
                if self.needs(*b) {
                    let av = self.value(*a).view().into_dimensionality::<Ix2>().unwrap();
                    bump(*b, av.t().dot(&g2).into_dyn());
                }
            }
            Op::MatVec(a, x) => {
                let g1 = gout.view().into_dimensionality::<Ix1>().unwrap();
                if self.needs(*a) {
                    let xv = self.value(*x).view().into_dimensionality::<Ix1>().unwrap();
                    let m = g1.len();
                    let k = xv.len();
                    let mut ga = ndarray::Array2::<f64>::zeros((m, k));
                    for r in 0..m {
                        let gr = g1[r];
                        for c in 0..k {
                            ga[[r, c]] = gr * xv[c];
                        }
                    }
                    bump(*a, ga.into_dyn());
                }
                if self.needs(*x) {
                    let av = self.value(*a).view().into_dimensionality::<Ix2>().unwrap();
                    bump(*x, av.t().dot(&g1).into_dyn());
                }
            }
            Op::SumAll(a) => {
                let g = *gout.first().unwrap();
                bump(*a, ArrayD::from_elem(self.value(*a).raw_dim(), g));
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).len() as f64;
                let g = *gout.first().unwrap() / n;
                bump(*a, ArrayD::from_elem(self.value(*a).raw_dim(), g));
            }
            Op::SpatialMean(a) => {
                let s = self.value(*a).shape().to_vec();
                let hw = (s[1] * s[2]) as f64;
                let mut gx = ArrayD::zeros(IxDyn(&s));
                for c in 0..s[0] {
                    let gc = gout[[c]] / hw;
                    gx.index_axis_mut(Axis(0), c).fill(gc);
                }
                bump(*a, gx);
            }
            Op::ChanMean(a) => {
                let s = self.value(*a).shape().to_vec();
                let cn = s[0] as f64;
                let mut gx = ArrayD::zeros(IxDyn(&s));
                let gp = gout.index_axis(Axis(0), 0);
                for c in 0..s[0] {
                    gx.index_axis_mut(Axis(0), c)
                        .zip_mut_with(&gp, |g, &go| *g = go / cn);
                }
                bump(*a, gx);
            }
            Op::ChanMax(a) => {
                let av = self.value(*a);
                let s = av.shape().to_vec();
                let mut gx = ArrayD::zeros(IxDyn(&s));
                for y in 0..s[1] {
                    for x in 0..s[2] {
                        let mut best = 0usize;
                        let mut bv = f64::NEG_INFINITY;
                        for c in 0..s[0] {
                            let v = av[[c, y, x]];
                            if v > bv {
                                bv = v;
                                best = c;
                            }
                        }
                        gx[[best, y, x]] = gout[[0, y, x]];
                    }
                }
                bump(*a, gx);
            }
            Op::Concat(parts, axis) => {
                let mut start = 0usize;
                for p in parts {
                    let len = self.value(*p).shape()[*axis];
                    let gp = gout
                        .slice_axis(Axis(*axis), Slice::from(start..start + len))
                        .to_owned();
                    bump(*p, gp.as_standard_layout().to_owned());
                    start += len;
                }
            }
            Op::Narrow {
                src,
                axis,
                start,
                len,
            } => {
                let mut gx = ArrayD::zeros(self.value(*src).raw_dim());
                gx.slice_axis_mut(Axis(*axis), Slice::from(*start..start + len))
                    .assign(gout);
                bump(*src, gx);
            }
            Op::Reshape(src) => {
                let data: Vec<f64> = gout.iter().copied().collect();
                let g = ArrayD::from_shape_vec(self.value(*src).raw_dim(), data).unwrap();
                bump(*src, g);
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (gx, gw) = conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    gout,
                    *stride,
                    *pad,
                    self.needs(*x),
                    self.needs(*w),
                );
                if let Some(gx) = gx {
                    bump(*x, gx);
                }
                if let Some(gw) = gw {
                    bump(*w, gw);
                }
            }
            Op::UpBilinear2(x) => bump(*x, up2_backward(self.value(*x), gout)),
            Op::Affine(x, m) => bump(*x, affine_backward(self.value(*x), gout, *m)),
        }
    }
}

fn conv_out_dim(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

/// im2col: (ci, h, w) -> (ci*kh*kw, oh*ow) with zero padding.
fn im2col(
    x: &ArrayD<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> ndarray::Array2<f64> {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    let mut cols = ndarray::Array2::<f64>::zeros((ci * kh * kw, oh * ow));
    let xv = x.view().into_dimensionality::<Ix3>().unwrap();
    for c in 0..ci {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[[row, oy * ow + ox]] = xv[[c, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    cols: &ndarray::Array2<f64>,
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> ArrayD<f64> {
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    let mut x = ArrayD::zeros(IxDyn(&[ci, h, w]));
    for c in 0..ci {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[[c, iy as usize, ix as usize]] += cols[[row, oy * ow + ox]];
                    }
                }
            }
        }
    }
    x
}

fn conv2d_forward(x: &ArrayD<f64>, w: &ArrayD<f64>, stride: usize, pad: usize) -> ArrayD<f64> {
    let (co, ci, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (h, wd) = (x.shape()[1], x.shape()[2]);
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(wd, kw, stride, pad);
    let cols = im2col(x, kh, kw, stride, pad);
    let wmat = w
        .view()
        .into_shape_with_order((co, ci * kh * kw))
        .unwrap()
        .to_owned();
    let out = wmat.dot(&cols); // (co, oh*ow)
    out.into_shape_with_order((co, oh, ow)).unwrap().into_dyn()
}

fn conv2d_backward(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    gout: &ArrayD<f64>,
    stride: usize,
    pad: usize,
    need_x: bool,
    need_w: bool,
) -> (Option<ArrayD<f64>>, Option<ArrayD<f64>>) {
    let (co, ci, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (h, wd) = (x.shape()[1], x.shape()[2]);
    let (oh, ow) = (gout.shape()[1], gout.shape()[2]);
    let gmat = gout
        .view()
        .into_shape_with_order((co, oh * ow))
        .unwrap()
        .to_owned();

    let gw = if need_w {
        let cols = im2col(x, kh, kw, stride, pad);
        let gwmat = gmat.dot(&cols.t()); // (co, ci*kh*kw)
        Some(
            gwmat
                .into_shape_with_order((co, ci, kh, kw))
                .unwrap()
                .into_dyn(),
        )
    } else {
        None
    };

    let gx = if need_x {
        let wmat = w
            .view()
            .into_shape_with_order((co, ci * kh * kw))
            .unwrap()
            .to_owned();
        let gcols = wmat.t().dot(&gmat); // (ci*kh*kw, oh*ow)
        Some(col2im(&gcols, ci, h, wd, kh, kw, stride, pad))
    } else {
        None
    };

    (gx, gw)
}

/// Source taps for one output row/col of the 2x bilinear upsample.
/// align_corners = false: src = (dst + 0.5) / 2 - 0.5, edges clamped.
fn up2_taps(dst: usize, n: usize) -> (usize, usize, f64) {
    let src = (dst as f64 + 0.5) / 2.0 - 0.5;
    let lo = src.floor();
    let t = src - lo;
    let i0 = (lo.max(0.0)) as usize;
    let i1 = ((lo + 1.0).min(n as f64 - 1.0).max(0.0)) as usize;
    (i0.min(n - 1), i1, t)
}

fn up2_forward(x: &ArrayD<f64>) -> ArrayD<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = ArrayD::zeros(IxDyn(&[c, 2 * h, 2 * w]));
    for oy in 0..2 * h {
        let (y0, y1, ty) = up2_taps(oy, h);
        for ox in 0..2 * w {
            let (x0, x1, tx) = up2_taps(ox, w);
            for ci in 0..c {
                let v00 = x[[ci, y0, x0]];
                let v01 = x[[ci, y0, x1]];
                let v10 = x[[ci, y1, x0]];
                let v11 = x[[ci, y1, x1]];
                out[[ci, oy, ox]] = (1.0 - ty) * ((1.0 - tx) * v00 + tx * v01)
                    + ty * ((1.0 - tx) * v10 + tx * v11);
            }
        }
    }
    out
}

fn up2_backward(x: &ArrayD<f64>, gout: &ArrayD<f64>) -> ArrayD<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut gx = ArrayD::zeros(IxDyn(&[c, h, w]));
    for oy in 0..2 * h {
        let (y0, y1, ty) = up2_taps(oy, h);
        for ox in 0..2 * w {
            let (x0, x1, tx) = up2_taps(ox, w);
            for ci in 0..c {
                let g = gout[[ci, oy, ox]];
                gx[[ci, y0, x0]] += (1.0 - ty) * (1.0 - tx) * g;
                gx[[ci, y0, x1]] += (1.0 - ty) * tx * g;
                gx[[ci, y1, x0]] += ty * (1.0 - tx) * g;
                gx[[ci, y1, x1]] += ty * tx * g;
            }
        }
    }
    gx
}

fn affine_forward(x: &ArrayD<f64>, m: [f64; 6]) -> ArrayD<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = ArrayD::zeros(IxDyn(&[c, h, w]));
    for oy in 0..h {
        for ox in 0..w {
            let sx = m[0] * ox as f64 + m[1] * oy as f64 + m[2];
            let sy = m[3] * ox as f64 + m[4] * oy as f64 + m[5];
            let x0 = sx.floor();
            let y0 = sy.floor();
            let tx = sx - x0;
            let ty = sy - y0;
            for (dy, wy) in [(0i64, 1.0 - ty), (1, ty)] {
                if wy == 0.0 {
                    continue;
                }
                let iy = y0 as i64 + dy;
                if iy < 0 || iy >= h as i64 {
                    continue;
                }
                for (dx, wx) in [(0i64, 1.0 - tx), (1, tx)] {
                    if wx == 0.0 {
                        continue;
                    }
                    let ix = x0 as i64 + dx;
                    if ix < 0 || ix >= w as i64 {
                        continue;
                    }
                    let wgt = wy * wx;
                    for ci in 0..c {
                        out[[ci, oy, ox]] += wgt * x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    out
}

fn affine_backward(x: &ArrayD<f64>, gout: &ArrayD<f64>, m: [f64; 6]) -> ArrayD<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut gx = ArrayD::zeros(IxDyn(&[c, h, w]));
    for oy in 0..h {
        for ox in 0..w {
            let sx = m[0] * ox as f64 + m[1] * oy as f64 + m[2];
            let sy = m[3] * ox as f64 + m[4] * oy as f64 + m[5];
            let x0 = sx.floor();
            let y0 = sy.floor();
            let tx = sx - x0;
            let ty = sy - y0;
            for (dy, wy) in [(0i64, 1.0 - ty), (1, ty)] {
                if wy == 0.0 {
                    continue;
                }
                let iy = y0 as i64 + dy;
                if iy < 0 || iy >= h as i64 {
                    continue;
                }
                for (dx, wx) in [(0i64, 1.0 - tx), (1, tx)] {
                    if wx == 0.0 {
                        continue;
                    }
                    let ix = x0 as i64 + dx;
                    if ix < 0 || ix >= w as i64 {
                        continue;
                    }
                    let wgt = wy * wx;
                    for ci in 0..c {
                        gx[[ci, iy as usize, ix as usize]] += wgt * gout[[ci, oy, ox]];
                    }
                }
            }
        }
    }
    gx
}
