use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Handle to a tensor living on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    /// a · bᵀ, with a: m×k and b: n×k. Saves an explicit transpose in
    /// attention score computation.
    MatmulNT { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    /// x: n×d plus a 1×d row added to every row of x.
    AddRowBroadcast { x: TensorId, v: TensorId },
    Scale { x: TensorId, c: f64 },
    SoftmaxRows { x: TensorId },
    LayerNorm { x: TensorId, gain: TensorId, bias: TensorId, mean: Vec<f64>, rstd: Vec<f64> },
    Gelu { x: TensorId },
    SliceCols { x: TensorId, start: usize },
    ConcatCols { xs: Vec<TensorId> },
    SelectRow { x: TensorId, row: usize },
    Dot { a: TensorId, b: TensorId },
    Sum { x: TensorId },
    LogSumExpRow { x: TensorId },
}

struct Node {
    tensor: Tensor,
    op: Op,
    grad: Option<Vec<f64>>,
}

/// Computation tape: an append-only arena of tensors where every
/// non-leaf records the operation that produced it. Inputs always
/// precede outputs, so reverse iteration is a valid reverse
/// topological order for backpropagation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a leaf tensor (parameter or input constant).
    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        self.push(tensor, Op::Leaf)
    }

    /// Record a leaf that never receives gradients.
    pub fn constant(&mut self, mut tensor: Tensor) -> TensorId {
        tensor.requires_grad = false;
        self.push(tensor, Op::Leaf)
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].tensor.data
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn shape(&self, id: TensorId) -> (usize, usize) {
        let t = &self.nodes[id.0].tensor;
        (t.rows(), t.cols())
    }

    pub fn value(&self, id: TensorId) -> Result<f64> {
        let t = &self.nodes[id.0].tensor;
        if !t.is_scalar() {
            return Err(Error::Usage(format!(
                "value() needs a scalar, got shape {:?}",
                t.shape
            )));
        }
        Ok(t.data[0])
    }

    /// Gradient of a node, if backward produced one.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> TensorId {
        self.nodes.push(Node { tensor, op, grad: None });
        TensorId(self.nodes.len() - 1)
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].tensor.requires_grad
    }

    fn result(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> TensorId {
        let tensor = Tensor { shape, data, requires_grad };
        self.push(tensor, op)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                detail: format!("{m}x{k} times {k2}x{n}"),
            });
        }
        let mut out = vec![0.0; m * n];
        let da = self.data(a);
        let db = self.data(b);
        for i in 0..m {
            for p in 0..k {
                let aip = da[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &db[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.result(vec![m, n], out, rg, Op::Matmul { a, b }))
    }

    /// a · bᵀ where a: m×k, b: n×k → m×n.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul_nt",
                detail: format!("{m}x{k} times transpose of {n}x{k2}"),
            });
        }
        let mut out = vec![0.0; m * n];
        let da = self.data(a);
        let db = self.data(b);
        for i in 0..m {
            let arow = &da[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &db[j * k..(j + 1) * k];
                out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.result(vec![m, n], out, rg, Op::MatmulNT { a, b }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Error::Dimension {
                op: "add",
                detail: format!("{sa:?} vs {sb:?}"),
            });
        }
        let data: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let rg = self.requires(a) || self.requires(b);
        let shape = self.nodes[a.0].tensor.shape.clone();
        Ok(self.result(shape, data, rg, Op::Add { a, b }))
    }

    /// Add row vector v (1×d) to every row of x (n×d).
    pub fn add_row_broadcast(&mut self, x: TensorId, v: TensorId) -> Result<TensorId> {
        let (n, d) = self.shape(x);
        let (vr, vd) = self.shape(v);
        if vr != 1 || vd != d {
            return Err(Error::Dimension {
                op: "add_row_broadcast",
                detail: format!("x is {n}x{d}, v is {vr}x{vd}"),
            });
        }
        let dv = self.data(v).to_vec();
        let data: Vec<f64> = self
            .data(x)
            .chunks(d)
            .flat_map(|row| row.iter().zip(&dv).map(|(a, b)| a + b))
            .collect();
        let rg = self.requires(x) || self.requires(v);
        Ok(self.result(vec![n, d], data, rg, Op::AddRowBroadcast { x, v }))
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.data(x).iter().map(|v| v * c).collect();
        let rg = self.requires(x);
        let shape = self.nodes[x.0].tensor.shape.clone();
        self.result(shape, data, rg, Op::Scale { x, c })
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        if self.data(x).iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidInput("softmax_rows: NaN input".into()));
        }
        let (n, d) = self.shape(x);
        let mut data = Vec::with_capacity(n * d);
        for row in self.data(x).chunks(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|e| e / sum));
        }
        let rg = self.requires(x);
        Ok(self.result(vec![n, d], data, rg, Op::SoftmaxRows { x }))
    }

    /// Per-row standardization with affine; epsilon 1e-5 inside the sqrt.
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId) -> Result<TensorId> {
        const EPS: f64 = 1e-5;
        let (n, d) = self.shape(x);
        let (gr, gd) = self.shape(gain);
        let (br, bd) = self.shape(bias);
        if d < 2 || gr != 1 || br != 1 || gd != d || bd != d {
            return Err(Error::Dimension {
                op: "layer_norm",
                detail: format!("x {n}x{d}, gain {gr}x{gd}, bias {br}x{bd}"),
            });
        }
        let g = self.data(gain).to_vec();
        let b = self.data(bias).to_vec();
        let mut data = Vec::with_capacity(n * d);
        let mut means = Vec::with_capacity(n);
        let mut rstds = Vec::with_capacity(n);
        for row in self.data(x).chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + EPS).sqrt();
            means.push(mean);
            rstds.push(rstd);
            for j in 0..d {
                data.push((row[j] - mean) * rstd * g[j] + b[j]);
            }
        }
        let rg = self.requires(x) || self.requires(gain) || self.requires(bias);
        Ok(self.result(
            vec![n, d],
            data,
            rg,
            Op::LayerNorm { x, gain, bias, mean: means, rstd: rstds },
        ))
    }

    /// Elementwise tanh-approximation GELU.
    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.data(x).iter().map(|&v| gelu_scalar(v)).collect();
        let rg = self.requires(x);
        let shape = self.nodes[x.0].tensor.shape.clone();
        self.result(shape, data, rg, Op::Gelu { x })
    }

    /// Columns [start, start+len) of x.
    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (n, d) = self.shape(x);
        if start + len > d || len == 0 {
            return Err(Error::Dimension {
                op: "slice_cols",
                detail: format!("cols [{start}, {}) of {n}x{d}", start + len),
            });
        }
        let data: Vec<f64> = self
            .data(x)
            .chunks(d)
            .flat_map(|row| row[start..start + len].to_vec())
            .collect();
        let rg = self.requires(x);
        Ok(self.result(vec![n, len], data, rg, Op::SliceCols { x, start }))
    }

    /// Concatenate along columns; all inputs must share a row count.
    pub fn concat_cols(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(Error::InvalidInput("concat_cols: empty input list".into()));
        }
        let n = self.shape(xs[0]).0;
        if xs.iter().any(|&x| self.shape(x).0 != n) {
            return Err(Error::Dimension {
                op: "concat_cols",
                detail: "row counts differ".into(),
            });
        }
        let total: usize = xs.iter().map(|&x| self.shape(x).1).sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for &x in xs {
                let d = self.shape(x).1;
                data.extend_from_slice(&self.data(x)[i * d..(i + 1) * d]);
            }
        }
        let rg = xs.iter().any(|&x| self.requires(x));
        Ok(self.result(vec![n, total], data, rg, Op::ConcatCols { xs: xs.to_vec() }))
    }

    /// Row `row` of x as a 1×d tensor (CLS pooling is select_row 0).
    pub fn select_row(&mut self, x: TensorId, row: usize) -> Result<TensorId> {
        let (n, d) = self.shape(x);
        if row >= n {
            return Err(Error::Dimension {
                op: "select_row",
                detail: format!("row {row} of {n}x{d}"),
            });
        }
        let data = self.data(x)[row * d..(row + 1) * d].to_vec();
        let rg = self.requires(x);
        Ok(self.result(vec![1, d], data, rg, Op::SelectRow { x, row }))
    }

    /// Inner product of two 1×d tensors → scalar.
    pub fn dot(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb || sa.0 != 1 {
            return Err(Error::Dimension {
                op: "dot",
                detail: format!("{sa:?} vs {sb:?}"),
            });
        }
        let v: f64 = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).sum();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.result(vec![1, 1], vec![v], rg, Op::Dot { a, b }))
    }

    /// Sum of all entries → scalar.
    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let v: f64 = self.data(x).iter().sum();
        let rg = self.requires(x);
        self.result(vec![1, 1], vec![v], rg, Op::Sum { x })
    }

    /// log Σ exp over a single row (1×n), max-subtracted → scalar.
    pub fn logsumexp_row(&mut self, x: TensorId) -> Result<TensorId> {
        let (n, _) = self.shape(x);
        if n != 1 {
            return Err(Error::Dimension {
                op: "logsumexp_row",
                detail: format!("expected a single row, got {n} rows"),
            });
        }
        let row = self.data(x);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let v = max + row.iter().map(|&s| (s - max).exp()).sum::<f64>().ln();
        let rg = self.requires(x);
        Ok(self.result(vec![1, 1], vec![v], rg, Op::LogSumExpRow { x }))
    }

    /// Reverse-mode accumulation from a scalar root. Gradients land only
    /// on nodes whose tensors require them; leaves with
    /// requires_grad=false never get one allocated.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if !self.nodes[root.0].tensor.is_scalar() {
            return Err(Error::Usage(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].tensor.shape
            )));
        }
        if !self.nodes[root.0].tensor.requires_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else { continue };
            self.propagate(i, &g);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    /// Add `delta` into the gradient buffer of `id` if it requires grad.
    fn accum(&mut self, id: TensorId, delta: &[f64]) {
        let node = &mut self.nodes[id.0];
        if !node.tensor.requires_grad {
            return;
        }
        let grad = node.grad.get_or_insert_with(|| vec![0.0; node.tensor.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = self.shape(a);
                let n = self.shape(b).1;
                if self.requires(a) {
                    // dA = G · Bᵀ
                    let db = self.data(b);
                    let mut da = vec![0.0; m * k];
                    for i2 in 0..m {
                        for p in 0..k {
                            let brow = &db[p * n..(p + 1) * n];
                            da[i2 * k + p] = g[i2 * n..(i2 + 1) * n]
                                .iter()
                                .zip(brow)
                                .map(|(x, y)| x * y)
                                .sum();
                        }
                    }
                    self.accum(a, &da);
                }
                if self.requires(b) {
                    // dB = Aᵀ · G
                    let dat = self.data(a);
                    let mut dbg = vec![0.0; k * n];
                    for i2 in 0..m {
                        for p in 0..k {
                            let aip = dat[i2 * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let grow = &g[i2 * n..(i2 + 1) * n];
                            let drow = &mut dbg[p * n..(p + 1) * n];
                            for j in 0..n {
                                drow[j] += aip * grow[j];
                            }
                        }
                    }
                    self.accum(b, &dbg);
                }
            }
            Op::MatmulNT { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = self.shape(a);
                let n = self.shape(b).0;
                if self.requires(a) {
                    // dA = G · B
                    let db = self.data(b);
                    let mut da = vec![0.0; m * k];
                    for i2 in 0..m {
                        for j in 0..n {
                            let gij = g[i2 * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let brow = &db[j * k..(j + 1) * k];
                            let arow = &mut da[i2 * k..(i2 + 1) * k];
                            for p in 0..k {
                                arow[p] += gij * brow[p];
                            }
                        }
                    }
                    self.accum(a, &da);
                }
                if self.requires(b) {
                    // dB = Gᵀ · A
                    let dat = self.data(a);
                    let mut db = vec![0.0; n * k];
                    for i2 in 0..m {
                        let arow = &dat[i2 * k..(i2 + 1) * k];
                        for j in 0..n {
                            let gij = g[i2 * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let brow = &mut db[j * k..(j + 1) * k];
                            for p in 0..k {
                                brow[p] += gij * arow[p];
                            }
                        }
                    }
                    self.accum(b, &db);
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.accum(a, g);
                self.accum(b, g);
            }
            Op::AddRowBroadcast { x, v } => {
                let (x, v) = (*x, *v);
                let d = self.shape(v).1;
                self.accum(x, g);
                if self.requires(v) {
                    let mut dv = vec![0.0; d];
                    for row in g.chunks(d) {
                        for (acc, gv) in dv.iter_mut().zip(row) {
                            *acc += gv;
                        }
                    }
                    self.accum(v, &dv);
                }
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.accum(x, &dx);
            }
            Op::SoftmaxRows { x } => {
                let x = *x;
                let (n, d) = self.shape(x);
                let y = &self.nodes[i].tensor.data;
                let mut dx = vec![0.0; n * d];
                for r in 0..n {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let dotp: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = yr[j] * (gr[j] - dotp);
                    }
                }
                self.accum(x, &dx);
            }
            Op::LayerNorm { x, gain, bias, mean, rstd } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let (mean, rstd) = (mean.clone(), rstd.clone());
                let (n, d) = self.shape(x);
                let xv = self.data(x).to_vec();
                let gv = self.data(gain).to_vec();
                if self.requires(x) {
                    let mut dx = vec![0.0; n * d];
                    for r in 0..n {
                        let xr = &xv[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let (m, rs) = (mean[r], rstd[r]);
                        // dxhat_j = g_j * gain_j
                        let dxhat: Vec<f64> =
                            gr.iter().zip(&gv).map(|(a, b)| a * b).collect();
                        let xhat: Vec<f64> = xr.iter().map(|&v| (v - m) * rs).collect();
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f64 =
                            dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dx[r * d + j] = rs / d as f64
                                * (d as f64 * dxhat[j]
                                    - sum_dxhat
                                    - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                    self.accum(x, &dx);
                }
                if self.requires(gain) {
                    let mut dg = vec![0.0; d];
                    for r in 0..n {
                        let xr = &xv[r * d..(r + 1) * d];
                        let (m, rs) = (mean[r], rstd[r]);
                        for j in 0..d {
                            dg[j] += g[r * d + j] * (xr[j] - m) * rs;
                        }
                    }
                    self.accum(gain, &dg);
                }
                if self.requires(bias) {
                    let mut db = vec![0.0; d];
                    for row in g.chunks(d) {
                        for (acc, gv2) in db.iter_mut().zip(row) {
                            *acc += gv2;
                        }
                    }
                    self.accum(bias, &db);
                }
            }
            Op::Gelu { x } => {
                let x = *x;
                let dx: Vec<f64> = self
                    .data(x)
                    .iter()
                    .zip(g)
                    .map(|(&v, gv)| gv * gelu_grad_scalar(v))
                    .collect();
                self.accum(x, &dx);
            }
            Op::SliceCols { x, start } => {
                let (x, start) = (*x, *start);
                let (n, d) = self.shape(x);
                let len = self.nodes[i].tensor.cols();
                let mut dx = vec![0.0; n * d];
                for r in 0..n {
                    dx[r * d + start..r * d + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.accum(x, &dx);
            }
            Op::ConcatCols { xs } => {
                let xs = xs.clone();
                let n = self.shape(xs[0]).0;
                let total = self.nodes[i].tensor.cols();
                let mut offset = 0;
                for x in xs {
                    let d = self.shape(x).1;
                    if self.requires(x) {
                        let mut dx = vec![0.0; n * d];
                        for r in 0..n {
                            dx[r * d..(r + 1) * d].copy_from_slice(
                                &g[r * total + offset..r * total + offset + d],
                            );
                        }
                        self.accum(x, &dx);
                    }
                    offset += d;
                }
            }
            Op::SelectRow { x, row } => {
                let (x, row) = (*x, *row);
                let (n, d) = self.shape(x);
                let mut dx = vec![0.0; n * d];
                dx[row * d..(row + 1) * d].copy_from_slice(g);
                self.accum(x, &dx);
            }
            Op::Dot { a, b } => {
                let (a, b) = (*a, *b);
                let gv = g[0];
                let da: Vec<f64> = self.data(b).iter().map(|v| v * gv).collect();
                let db: Vec<f64> = self.data(a).iter().map(|v| v * gv).collect();
                self.accum(a, &da);
                self.accum(b, &db);
            }
            Op::Sum { x } => {
                let x = *x;
                let n = self.nodes[x.0].tensor.len();
                let dx = vec![g[0]; n];
                self.accum(x, &dx);
            }
            Op::LogSumExpRow { x } => {
                let x = *x;
                let out = self.nodes[i].tensor.data[0];
                let gv = g[0];
                let dx: Vec<f64> =
                    self.data(x).iter().map(|&v| gv * (v - out).exp()).collect();
                self.accum(x, &dx);
            }
        }
    }
}

fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
