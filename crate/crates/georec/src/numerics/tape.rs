//! Reverse-mode gradient tape.
//!
//! A [`Tape`] records primitive operations during a forward pass and replays
//! them in exact reverse order to compute the gradient of one scalar output
//! with respect to any recorded value. Gradients accumulate additively when a
//! value feeds multiple operations. A tape is confined to one thread;
//! parallelism happens across tapes (one per sample) with a fixed-order
//! reduction outside.

use super::tensor::{self, Tensor};
use super::NumericsError;

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValId(usize);

/// Numeric mode for a run. `F32` rounds every forward result to 32-bit
/// storage precision (accumulation stays in f64); `F64` is the default and
/// the mode all gradient tests use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(ValId, ValId),
    Add(ValId, ValId),
    Sub(ValId, ValId),
    Scale(ValId, f64),
    AddConst(ValId),
    MulElem(ValId, ValId),
    Transpose(ValId),
    RowSoftmax(ValId),
    RowLogSoftmax(ValId),
    RmsNorm { x: ValId, gain: ValId, eps: f64 },
    Sigmoid(ValId),
    Silu(ValId),
    Softplus(ValId),
    ScaleRows { x: ValId, scales: ValId },
    TileRows { v: ValId, n: usize },
    AddRowVec { x: ValId, v: ValId },
    ConcatCols(ValId, ValId),
    StackRows(Vec<ValId>),
    SelectRows { table: ValId, idx: Vec<usize> },
    SliceRow { x: ValId, row: usize },
    SliceCols { x: ValId, from: usize, to: usize },
    Pick { x: ValId, row: usize, col: usize },
    SumAll(ValId),
    Neg(ValId),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients of one scalar output with respect to every recorded value.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `id`, if any path reached it.
    pub fn wrt(&self, id: ValId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: ValId) -> Option<Tensor> {
        self.grads[id.0].take()
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), precision: Precision::F64 }
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self { nodes: Vec::new(), precision }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, mut value: Tensor) -> ValId {
        if self.precision == Precision::F32 {
            for v in value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
        self.nodes.push(Node { op, value });
        ValId(self.nodes.len() - 1)
    }

    /// Record an input or parameter value.
    pub fn leaf(&mut self, value: Tensor) -> ValId {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: ValId, b: ValId) -> Result<ValId, NumericsError> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    pub fn add(&mut self, a: ValId, b: ValId) -> Result<ValId, NumericsError> {
        let out = elementwise(self.value(a), self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn sub(&mut self, a: ValId, b: ValId) -> Result<ValId, NumericsError> {
        let out = elementwise(self.value(a), self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), out))
    }

    pub fn scale(&mut self, a: ValId, c: f64) -> ValId {
        let mut out = self.value(a).clone();
        out.scale_in_place(c);
        self.push(Op::Scale(a, c), out)
    }

    pub fn neg(&mut self, a: ValId) -> ValId {
        let mut out = self.value(a).clone();
        out.scale_in_place(-1.0);
        self.push(Op::Neg(a), out)
    }

    /// Add an untracked constant tensor (e.g. an attention mask).
    pub fn add_const(&mut self, a: ValId, c: &Tensor) -> Result<ValId, NumericsError> {
        let out = elementwise(self.value(a), c, "add_const", |x, y| x + y)?;
        Ok(self.push(Op::AddConst(a), out))
    }

    pub fn mul_elem(&mut self, a: ValId, b: ValId) -> Result<ValId, NumericsError> {
        let out = elementwise(self.value(a), self.value(b), "mul_elem", |x, y| x * y)?;
        Ok(self.push(Op::MulElem(a, b), out))
    }

    pub fn transpose(&mut self, a: ValId) -> ValId {
        let out = self.value(a).transposed();
        self.push(Op::Transpose(a), out)
    }

    pub fn row_softmax(&mut self, a: ValId) -> ValId {
        let out = tensor::row_softmax(self.value(a));
        self.push(Op::RowSoftmax(a), out)
    }

    pub fn row_log_softmax(&mut self, a: ValId) -> ValId {
        let out = tensor::row_log_softmax(self.value(a));
        self.push(Op::RowLogSoftmax(a), out)
    }

    pub fn rms_norm(&mut self, x: ValId, gain: ValId, eps: f64) -> Result<ValId, NumericsError> {
        let out = tensor::rms_norm(self.value(x), self.value(gain), eps)?;
        Ok(self.push(Op::RmsNorm { x, gain, eps }, out))
    }

    pub fn sigmoid(&mut self, a: ValId) -> ValId {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            *v = tensor::sigmoid(*v);
        }
        self.push(Op::Sigmoid(a), out)
    }

    pub fn silu(&mut self, a: ValId) -> ValId {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            *v *= tensor::sigmoid(*v);
        }
        self.push(Op::Silu(a), out)
    }

    pub fn softplus(&mut self, a: ValId) -> ValId {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            *v = tensor::softplus(*v);
        }
        self.push(Op::Softplus(a), out)
    }

    /// out[i][j] = scales[i][0] * x[i][j]; `scales` is n x 1.
    pub fn scale_rows(&mut self, x: ValId, scales: ValId) -> Result<ValId, NumericsError> {
        let (xs, ss) = (self.value(x), self.value(scales));
        if ss.cols() != 1 || ss.rows() != xs.rows() {
            return Err(NumericsError::Shape(format!(
                "scale_rows needs {}x1 scales, got {}x{}",
                xs.rows(),
                ss.rows(),
                ss.cols()
            )));
        }
        let mut out = xs.clone();
        for i in 0..out.rows() {
            let s = ss.get(i, 0);
            for j in 0..out.cols() {
                out.set(i, j, out.get(i, j) * s);
            }
        }
        Ok(self.push(Op::ScaleRows { x, scales }, out))
    }

    /// Repeat a 1 x d row vector n times into an n x d matrix.
    pub fn tile_rows(&mut self, v: ValId, n: usize) -> Result<ValId, NumericsError> {
        let vt = self.value(v);
        if vt.rows() != 1 {
            return Err(NumericsError::Shape("tile_rows expects a 1xd row vector".into()));
        }
        let mut out = Tensor::zeros(n, vt.cols());
        for i in 0..n {
            for j in 0..vt.cols() {
                out.set(i, j, vt.get(0, j));
            }
        }
        Ok(self.push(Op::TileRows { v, n }, out))
    }

    /// Broadcast-add a 1 x d row vector to every row of an n x d matrix.
    pub fn add_row_vec(&mut self, x: ValId, v: ValId) -> Result<ValId, NumericsError> {
        let (xs, vs) = (self.value(x), self.value(v));
        if vs.rows() != 1 || vs.cols() != xs.cols() {
            return Err(NumericsError::Shape(format!(
                "add_row_vec needs 1x{} vector, got {}x{}",
                xs.cols(),
                vs.rows(),
                vs.cols()
            )));
        }
        let mut out = xs.clone();
        for i in 0..out.rows() {
            for j in 0..out.cols() {
                out.set(i, j, out.get(i, j) + vs.get(0, j));
            }
        }
        Ok(self.push(Op::AddRowVec { x, v }, out))
    }

    pub fn concat_cols(&mut self, a: ValId, b: ValId) -> Result<ValId, NumericsError> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.rows() != bt.rows() {
            return Err(NumericsError::Shape(format!(
                "concat_cols row mismatch: {} vs {}",
                at.rows(),
                bt.rows()
            )));
        }
        let mut out = Tensor::zeros(at.rows(), at.cols() + bt.cols());
        for i in 0..at.rows() {
            for j in 0..at.cols() {
                out.set(i, j, at.get(i, j));
            }
            for j in 0..bt.cols() {
                out.set(i, at.cols() + j, bt.get(i, j));
            }
        }
        Ok(self.push(Op::ConcatCols(a, b), out))
    }

    /// Stack 1 x d row vectors into an n x d matrix.
    pub fn stack_rows(&mut self, rows: &[ValId]) -> Result<ValId, NumericsError> {
        if rows.is_empty() {
            return Err(NumericsError::Shape("stack_rows: no rows".into()));
        }
        let d = self.value(rows[0]).cols();
        let mut out = Tensor::zeros(rows.len(), d);
        for (i, &r) in rows.iter().enumerate() {
            let rt = self.value(r);
            if rt.rows() != 1 || rt.cols() != d {
                return Err(NumericsError::Shape(format!(
                    "stack_rows expects 1x{d} rows, got {}x{}",
                    rt.rows(),
                    rt.cols()
                )));
            }
            for j in 0..d {
                out.set(i, j, rt.get(0, j));
            }
        }
        Ok(self.push(Op::StackRows(rows.to_vec()), out))
    }

    /// Gather rows of `table` by index; gradients scatter-add back.
    pub fn select_rows(&mut self, table: ValId, idx: &[usize]) -> Result<ValId, NumericsError> {
        let t = self.value(table);
        if idx.is_empty() {
            return Err(NumericsError::Shape("select_rows: empty index list".into()));
        }
        let mut out = Tensor::zeros(idx.len(), t.cols());
        for (i, &r) in idx.iter().enumerate() {
            if r >= t.rows() {
                return Err(NumericsError::Index(format!(
                    "select_rows: row {r} out of {}",
                    t.rows()
                )));
            }
            for j in 0..t.cols() {
                out.set(i, j, t.get(r, j));
            }
        }
        Ok(self.push(Op::SelectRows { table, idx: idx.to_vec() }, out))
    }

    pub fn slice_row(&mut self, x: ValId, row: usize) -> Result<ValId, NumericsError> {
        let xt = self.value(x);
        if row >= xt.rows() {
            return Err(NumericsError::Index(format!("slice_row: row {row} out of {}", xt.rows())));
        }
        let out = Tensor::row(xt.row_slice(row));
        Ok(self.push(Op::SliceRow { x, row }, out))
    }

    pub fn slice_cols(&mut self, x: ValId, from: usize, to: usize) -> Result<ValId, NumericsError> {
        let xt = self.value(x);
        if from >= to || to > xt.cols() {
            return Err(NumericsError::Index(format!(
                "slice_cols: [{from}, {to}) out of {} cols",
                xt.cols()
            )));
        }
        let mut out = Tensor::zeros(xt.rows(), to - from);
        for i in 0..xt.rows() {
            for j in from..to {
                out.set(i, j - from, xt.get(i, j));
            }
        }
        Ok(self.push(Op::SliceCols { x, from, to }, out))
    }

    /// Extract one element as a 1 x 1 scalar.
    pub fn pick(&mut self, x: ValId, row: usize, col: usize) -> Result<ValId, NumericsError> {
        let xt = self.value(x);
        if row >= xt.rows() || col >= xt.cols() {
            return Err(NumericsError::Index(format!(
                "pick: ({row},{col}) out of {}x{}",
                xt.rows(),
                xt.cols()
            )));
        }
        let out = Tensor::scalar(xt.get(row, col));
        Ok(self.push(Op::Pick { x, row, col }, out))
    }

    pub fn sum_all(&mut self, x: ValId) -> ValId {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Op::SumAll(x), Tensor::scalar(s))
    }

    /// Backward pass from a scalar output. Visits nodes in exact reverse
    /// order of recording; replaying twice yields bit-identical gradients.
    pub fn backward(&self, out: ValId) -> Result<Gradients, NumericsError> {
        let out_t = self.value(out);
        if out_t.len() != 1 {
            return Err(NumericsError::Shape(format!(
                "backward requires a scalar output, got {}x{}",
                out_t.rows(),
                out_t.cols()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Tensor::scalar(1.0));

        for i in (0..=out.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.apply_vjp(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn apply_vjp(
        &self,
        node: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<(), NumericsError> {
        let val = |id: ValId| &self.nodes[id.0].value;
        let out = &self.nodes[node].value;
        match &self.nodes[node].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = tensor::matmul(g, &val(*b).transposed())?;
                let db = tensor::matmul(&val(*a).transposed(), g)?;
                accumulate(grads, *a, da)?;
                accumulate(grads, *b, db)?;
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone())?;
                let mut ng = g.clone();
                ng.scale_in_place(-1.0);
                accumulate(grads, *b, ng)?;
            }
            Op::Scale(a, c) => {
                let mut d = g.clone();
                d.scale_in_place(*c);
                accumulate(grads, *a, d)?;
            }
            Op::Neg(a) => {
                let mut d = g.clone();
                d.scale_in_place(-1.0);
                accumulate(grads, *a, d)?;
            }
            Op::AddConst(a) => {
                accumulate(grads, *a, g.clone())?;
            }
            Op::MulElem(a, b) => {
                let da = elementwise(g, val(*b), "mul_elem", |x, y| x * y)?;
                let db = elementwise(g, val(*a), "mul_elem", |x, y| x * y)?;
                accumulate(grads, *a, da)?;
                accumulate(grads, *b, db)?;
            }
            Op::Transpose(a) => {
                accumulate(grads, *a, g.transposed())?;
            }
            Op::RowSoftmax(a) => {
                // dx = y * (g - <g, y>) per row
                let y = out;
                let mut d = Tensor::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let dot: f64 =
                        (0..y.cols()).map(|j| g.get(i, j) * y.get(i, j)).sum();
                    for j in 0..y.cols() {
                        d.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                    }
                }
                accumulate(grads, *a, d)?;
            }
            Op::RowLogSoftmax(a) => {
                // dx = g - softmax(x) * sum(g) per row
                let y = out;
                let mut d = Tensor::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let gsum: f64 = (0..y.cols()).map(|j| g.get(i, j)).sum();
                    for j in 0..y.cols() {
                        d.set(i, j, g.get(i, j) - y.get(i, j).exp() * gsum);
                    }
                }
                accumulate(grads, *a, d)?;
            }
            Op::RmsNorm { x, gain, eps } => {
                let xt = val(*x);
                let gt = val(*gain);
                let d = xt.cols() as f64;
                let mut dx = Tensor::zeros(xt.rows(), xt.cols());
                let mut dgain = Tensor::zeros(1, xt.cols());
                for i in 0..xt.rows() {
                    let mean_sq =
                        xt.row_slice(i).iter().map(|v| v * v).sum::<f64>() / d;
                    let r = (mean_sq + eps).sqrt();
                    let inner: f64 = (0..xt.cols())
                        .map(|j| g.get(i, j) * gt.get(0, j) * xt.get(i, j))
                        .sum();
                    for j in 0..xt.cols() {
                        let term = g.get(i, j) * gt.get(0, j) / r
                            - xt.get(i, j) * inner / (d * r * r * r);
                        dx.set(i, j, term);
                        dgain.set(0, j, dgain.get(0, j) + g.get(i, j) * xt.get(i, j) / r);
                    }
                }
                accumulate(grads, *x, dx)?;
                accumulate(grads, *gain, dgain)?;
            }
            Op::Sigmoid(a) => {
                let y = out;
                let d = elementwise(g, y, "sigmoid", |gv, yv| gv * yv * (1.0 - yv))?;
                accumulate(grads, *a, d)?;
            }
            Op::Silu(a) => {
                let xt = val(*a);
                let d = elementwise(g, xt, "silu", |gv, xv| {
                    let s = tensor::sigmoid(xv);
                    gv * s * (1.0 + xv * (1.0 - s))
                })?;
                accumulate(grads, *a, d)?;
            }
            Op::Softplus(a) => {
                let xt = val(*a);
                let d = elementwise(g, xt, "softplus", |gv, xv| gv * tensor::sigmoid(xv))?;
                accumulate(grads, *a, d)?;
            }
            Op::ScaleRows { x, scales } => {
                let xt = val(*x);
                let st = val(*scales);
                let mut dx = Tensor::zeros(xt.rows(), xt.cols());
                let mut ds = Tensor::zeros(xt.rows(), 1);
                for i in 0..xt.rows() {
                    let s = st.get(i, 0);
                    let mut acc = 0.0;
                    for j in 0..xt.cols() {
                        dx.set(i, j, s * g.get(i, j));
                        acc += xt.get(i, j) * g.get(i, j);
                    }
                    ds.set(i, 0, acc);
                }
                accumulate(grads, *x, dx)?;
                accumulate(grads, *scales, ds)?;
            }
            Op::TileRows { v, n } => {
                let d = val(*v).cols();
                let mut dv = Tensor::zeros(1, d);
                for i in 0..*n {
                    for j in 0..d {
                        dv.set(0, j, dv.get(0, j) + g.get(i, j));
                    }
                }
                accumulate(grads, *v, dv)?;
            }
            Op::AddRowVec { x, v } => {
                accumulate(grads, *x, g.clone())?;
                let d = val(*v).cols();
                let mut dv = Tensor::zeros(1, d);
                for i in 0..g.rows() {
                    for j in 0..d {
                        dv.set(0, j, dv.get(0, j) + g.get(i, j));
                    }
                }
                accumulate(grads, *v, dv)?;
            }
            Op::ConcatCols(a, b) => {
                let (ac, bc) = (val(*a).cols(), val(*b).cols());
                let mut da = Tensor::zeros(g.rows(), ac);
                let mut db = Tensor::zeros(g.rows(), bc);
                for i in 0..g.rows() {
                    for j in 0..ac {
                        da.set(i, j, g.get(i, j));
                    }
                    for j in 0..bc {
                        db.set(i, j, g.get(i, ac + j));
                    }
                }
                accumulate(grads, *a, da)?;
                accumulate(grads, *b, db)?;
            }
            Op::StackRows(rows) => {
                for (i, r) in rows.iter().enumerate() {
                    accumulate(grads, *r, Tensor::row(g.row_slice(i)))?;
                }
            }
            Op::SelectRows { table, idx } => {
                let t = val(*table);
                let mut dt = Tensor::zeros(t.rows(), t.cols());
                for (i, &r) in idx.iter().enumerate() {
                    for j in 0..t.cols() {
                        dt.set(r, j, dt.get(r, j) + g.get(i, j));
                    }
                }
                accumulate(grads, *table, dt)?;
            }
            Op::SliceRow { x, row } => {
                let xt = val(*x);
                let mut dx = Tensor::zeros(xt.rows(), xt.cols());
                for j in 0..xt.cols() {
                    dx.set(*row, j, g.get(0, j));
                }
                accumulate(grads, *x, dx)?;
            }
            Op::SliceCols { x, from, to } => {
                let xt = val(*x);
                let mut dx = Tensor::zeros(xt.rows(), xt.cols());
                for i in 0..xt.rows() {
                    for j in *from..*to {
                        dx.set(i, j, g.get(i, j - from));
                    }
                }
                accumulate(grads, *x, dx)?;
            }
            Op::Pick { x, row, col } => {
                let xt = val(*x);
                let mut dx = Tensor::zeros(xt.rows(), xt.cols());
                dx.set(*row, *col, g.get(0, 0));
                accumulate(grads, *x, dx)?;
            }
            Op::SumAll(x) => {
                let xt = val(*x);
                let dx = Tensor::full(xt.rows(), xt.cols(), g.get(0, 0));
                accumulate(grads, *x, dx)?;
            }
        }
        Ok(())
    }
}

fn accumulate(
    grads: &mut [Option<Tensor>],
    id: ValId,
    delta: Tensor,
) -> Result<(), NumericsError> {
    match &mut grads[id.0] {
        Some(g) => g.axpy(1.0, &delta),
        slot @ None => {
            *slot = Some(delta);
            Ok(())
        }
    }
}

fn elementwise(
    a: &Tensor,
    b: &Tensor,
    what: &str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor, NumericsError> {
    if a.shape() != b.shape() {
        return Err(NumericsError::Shape(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = a.clone();
    for (o, &bv) in out.data_mut().iter_mut().zip(b.data().iter()) {
        *o = f(*o, bv);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(2, 2));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn gradients_accumulate_across_fanout() {
        // f = sum(x * x) with x used twice: grad = 2x
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(&[1.0, -3.0]));
        let sq = t.mul_elem(x, x).unwrap();
        let s = t.sum_all(sq);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[2.0, -6.0]);
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut t = Tape::new();
        let a = t.leaf(Tensor::randn(&mut rng, 3, 3, 1.0));
        let b = t.leaf(Tensor::randn(&mut rng, 3, 3, 1.0));
        let c = t.matmul(a, b).unwrap();
        let sm = t.row_softmax(c);
        let s = t.sum_all(sm);
        let g1 = t.backward(s).unwrap();
        let g2 = t.backward(s).unwrap();
        assert_eq!(g1.wrt(a).unwrap().data(), g2.wrt(a).unwrap().data());
        assert_eq!(g1.wrt(b).unwrap().data(), g2.wrt(b).unwrap().data());
    }

    #[test]
    fn f32_mode_rounds_forward_values() {
        let mut t = Tape::with_precision(Precision::F32);
        let x = t.leaf(Tensor::scalar(0.1));
        assert_eq!(t.value(x).data()[0], 0.1f32 as f64);
    }
}
