//! Scalar type, dense tensors, and the numeric kernels shared by the
//! forward evaluator and the gradient tape.

/// Scalar used throughout the pipeline. Defaults to `f64` so tests and
/// checkpoints are deterministic; the `float32` feature switches the whole
/// build to single precision (disk formats stay f64).
#[cfg(not(feature = "float32"))]
pub type Real = f64;
#[cfg(feature = "float32")]
pub type Real = f32;

#[cfg(not(feature = "float32"))]
pub const PI: Real = std::f64::consts::PI;
#[cfg(feature = "float32")]
pub const PI: Real = std::f32::consts::PI;

pub type Vec3 = [Real; 3];

pub fn dot(a: Vec3, b: Vec3) -> Real {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm(a: Vec3) -> Real {
    dot(a, a).sqrt()
}

pub fn scale(a: Vec3, s: Real) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

/// Numerically stable softplus, `ln(1 + e^x)`.
pub fn softplus(x: Real) -> Real {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Derivative of softplus.
pub fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-major dense matrix. Column vectors are `(n, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Real>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<Real>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor shape/data mismatch");
        Tensor { rows, cols, data }
    }

    pub fn scalar(v: Real) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, r: usize, c: usize) -> Real {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: Real) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[Real] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [Real] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Dot product with a fixed four-lane summation tree. The lane split keeps
/// the reduction order deterministic while letting the compiler vectorize.
#[inline]
fn dot_slices(a: &[Real], b: &[Real]) -> Real {
    let mut lanes = [0.0 as Real; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (pa, pb) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += pa[l] * pb[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ta.iter().zip(tb) {
        tail += x * y;
    }
    let half = [lanes[0] + lanes[4], lanes[1] + lanes[5], lanes[2] + lanes[6], lanes[3] + lanes[7]];
    ((half[0] + half[1]) + (half[2] + half[3])) + tail
}

/// `y[i] += a · x[i]`.
#[inline]
fn axpy(y: &mut [Real], a: Real, x: &[Real]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * *xi;
    }
}

/// `y = x · Wᵀ + b` for a batch of row vectors: `w` is `(out, in)`,
/// `b` is `(out, 1)`, `x` is `(n, in)`, result `(n, out)`.
pub fn dense_forward(w: &Tensor, b: &Tensor, x: &Tensor) -> Tensor {
    debug_assert_eq!(w.cols, x.cols, "dense: input width mismatch");
    debug_assert_eq!(w.rows, b.rows, "dense: bias length mismatch");
    let (n, out, inp) = (x.rows, w.rows, w.cols);
    let mut y = Tensor::zeros(n, out);
    for r in 0..n {
        let xr = x.row(r);
        let yr = y.row_mut(r);
        for o in 0..out {
            yr[o] = b.data[o] + dot_slices(&w.data[o * inp..(o + 1) * inp], xr);
        }
    }
    y
}

/// Weight/bias half of the dense backward, for inputs that need no
/// gradient.
pub fn dense_backward_params_only(
    w: &Tensor,
    x: &Tensor,
    dy: &Tensor,
    dw: &mut Tensor,
    db: &mut Tensor,
) {
    let (n, out, inp) = (x.rows, w.rows, w.cols);
    debug_assert_eq!(dy.rows, n);
    debug_assert_eq!(dy.cols, out);
    for r in 0..n {
        let xr = x.row(r);
        let gyr = dy.row(r);
        for o in 0..out {
            let g = gyr[o];
            if g == 0.0 {
                continue;
            }
            db.data[o] += g;
            axpy(&mut dw.data[o * inp..(o + 1) * inp], g, xr);
        }
    }
}

/// Backward of [`dense_forward`]: given `dy`, accumulates `dw`, `db` and
/// returns `dx`.
pub fn dense_backward(
    w: &Tensor,
    x: &Tensor,
    dy: &Tensor,
    dw: &mut Tensor,
    db: &mut Tensor,
) -> Tensor {
    let (n, out, inp) = (x.rows, w.rows, w.cols);
    debug_assert_eq!(dy.rows, n);
    debug_assert_eq!(dy.cols, out);
    let mut dx = Tensor::zeros(n, inp);
    for r in 0..n {
        let xr = x.row(r);
        let gyr = dy.row(r);
        let dxr = dx.row_mut(r);
        for o in 0..out {
            let g = gyr[o];
            if g == 0.0 {
                continue;
            }
            db.data[o] += g;
            axpy(dxr, g, &w.data[o * inp..(o + 1) * inp]);
            axpy(&mut dw.data[o * inp..(o + 1) * inp], g, xr);
        }
    }
    dx
}

/// Deterministic 64-bit mix used to derive independent RNG streams from a
/// base seed and structural indices (epoch, step, ray, pixel). SplitMix64
/// finalizer.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e3779b97f4a7c15;
    for &p in parts {
        let mut z = p.wrapping_add(0x9e3779b97f4a7c15).wrapping_add(h);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        h = z ^ (z >> 31);
    }
    h
}
