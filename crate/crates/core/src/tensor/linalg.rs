use super::tape::{GradSink, Op, Tape, Var};
use super::value::Tensor;
use crate::error::{Error, Result};

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a> MatRef<'a> {
    pub(crate) fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub(crate) fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn maybe_t(self, flag: bool) -> Self {
        if flag {
            self.t()
        } else {
            self
        }
    }
}

/// `c = a * b + beta * c` with `c` row-major `a.rows x b.cols`.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    assert_eq!(a.cols, b.rows);
    assert_eq!(c.len(), a.rows * b.cols);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    // SAFETY: the views cover their slices (checked by construction) and `c`
    // has exactly m*n row-major slots.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::invalid(op, format!("expected a 2-D tensor, got {:?}", t.shape()))),
    }
}

impl Tape {
    /// Matrix product `A[m x k] * B[k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(A) * op(B)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (ra, ca) = dims2("matmul", va)?;
        let (rb, cb) = dims2("matmul", vb)?;
        let am = MatRef::row_major(va.data(), ra, ca).maybe_t(ta);
        let bm = MatRef::row_major(vb.data(), rb, cb).maybe_t(tb);
        if am.cols != bm.rows {
            let sa = if ta { vec![ca, ra] } else { vec![ra, ca] };
            let sb = if tb { vec![cb, rb] } else { vec![rb, cb] };
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let mut out = vec![0.0; am.rows * bm.cols];
        gemm(am, bm, 0.0, &mut out);
        let t = Tensor::new([am.rows, bm.cols], out)?;
        Ok(self.push(t, Op::MatMul { a: ia, b: ib, ta, tb }, &[ia, ib]))
    }

    /// `x W + b` applied to the last axis of `x` (rows flattened).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| Error::invalid("linear", "scalar input"))?;
        let rows = shape.iter().product::<usize>() / c;
        let x2 = if shape.len() == 2 { x } else { self.reshape(x, &[rows, c])? };
        let mut y = self.matmul(x2, w)?;
        if let Some(b) = b {
            y = self.add_bias(y, b)?;
        }
        if shape.len() != 2 {
            let mut out_shape = shape;
            *out_shape.last_mut().unwrap() = self.shape(y)[1];
            y = self.reshape(y, &out_shape)?;
        }
        Ok(y)
    }
}

pub(super) fn matmul_backward(a: usize, b: usize, ta: bool, tb: bool, g: &[f64], sink: &mut GradSink<'_>) {
    let va = sink.value(a);
    let vb = sink.value(b);
    let (ra, ca) = (va.shape()[0], va.shape()[1]);
    let (rb, cb) = (vb.shape()[0], vb.shape()[1]);
    let am = MatRef::row_major(va.data(), ra, ca).maybe_t(ta);
    let bm = MatRef::row_major(vb.data(), rb, cb).maybe_t(tb);
    let gm = MatRef::row_major(g, am.rows, bm.cols);
    if let Some(da) = sink.slot(a) {
        if ta {
            gemm(bm, gm.t(), 1.0, da);
        } else {
            gemm(gm, bm.t(), 1.0, da);
        }
    }
    if let Some(db) = sink.slot(b) {
        if tb {
            gemm(gm.t(), am, 1.0, db);
        } else {
            gemm(am.t(), gm, 1.0, db);
        }
    }
}
