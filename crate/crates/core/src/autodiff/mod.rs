//! Reverse-mode automatic differentiation over 2-D `f64` arrays.
//!
//! Every tensor on the tape is a row-major `[rows x cols]` matrix; scalars are
//! `[1 x 1]`. The tape is a Wengert list: ops append nodes in creation order
//! and `backward` walks the list in reverse. Single-threaded and fully
//! deterministic, which is what the bitwise-reproducibility tests rely on.

pub mod nn;
pub mod opt;

use std::cell::RefCell;

use ndarray::{Array2, Axis};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    AddBias(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulColVec(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Exp(usize),
    Sqrt(usize),
    Tanh(usize),
    Silu(usize),
    Sigmoid(usize),
    Square(usize),
    Clamp(usize, f64, f64),
    SoftmaxRows(usize),
    LayerNorm(usize, usize, usize),
    SumAll(usize),
    RowSum(usize),
    ColSum(usize),
    Reshape(usize),
    ConcatRows(Vec<usize>),
    SliceRows(usize, usize, usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize, usize),
    GatherRows(usize, Vec<usize>),
    SubRowMean(usize),
    DivScalarVar(usize, usize),
    MulScalarVar(usize, usize),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Wengert-list tape. Create one per forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var(nodes.len() - 1)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    fn any_needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.needs(i))
    }

    /// Insert a value that does not require gradients.
    pub fn constant(&self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_scalar(&self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// Insert a value whose gradient will be tracked.
    pub fn leaf(&self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> Array2<f64> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let nodes = self.nodes.borrow();
        let a = &nodes[v.0].value;
        debug_assert_eq!(a.len(), 1);
        a[(0, 0)]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let nodes = self.nodes.borrow();
        let d = nodes[v.0].value.dim();
        (d.0, d.1)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let v = {
            let n = self.nodes.borrow();
            assert_eq!(n[a.0].value.dim(), n[b.0].value.dim(), "add: shape mismatch");
            &n[a.0].value + &n[b.0].value
        };
        let ng = self.any_needs(&[a.0, b.0]);
        self.push(v, Op::Add(a.0, b.0), ng)
    }

    /// `a [n,d] + bias [1,d]`, broadcast over rows.
    pub fn add_bias(&self, a: Var, bias: Var) -> Var {
        let v = {
            let n = self.nodes.borrow();
            assert_eq!(n[bias.0].value.nrows(), 1, "add_bias: bias must have one row");
            assert_eq!(n[a.0].value.ncols(), n[bias.0].value.ncols(), "add_bias: col mismatch");
            &n[a.0].value + &n[bias.0].value
        };
        let ng = self.any_needs(&[a.0, bias.0]);
        self.push(v, Op::AddBias(a.0, bias.0), ng)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let v = {
            let n = self.nodes.borrow();
            assert_eq!(n[a.0].value.dim(), n[b.0].value.dim(), "sub: shape mismatch");
            &n[a.0].value - &n[b.0].value
        };
        let ng = self.any_needs(&[a.0, b.0]);
        self.push(v, Op::Sub(a.0, b.0), ng)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let v = {
            let n = self.nodes.borrow();
            assert_eq!(n[a.0].value.dim(), n[b.0].value.dim(), "mul: shape mismatch");
            &n[a.0].value * &n[b.0].value
        };
        let ng = self.any_needs(&[a.0, b.0]);
        self.push(v, Op::Mul(a.0, b.0), ng)
    }

    /// `a [n,d] * v [n,1]`, the column vector broadcast across columns.
    pub fn mul_colvec(&self, a: Var, col: Var) -> Var {
        let v = {
            let n = self.nodes.borrow();
            assert_eq!(n[col.0].value.ncols(), 1, "mul_colvec: expected column vector");
            assert_eq!(n[a.0].value.nrows(), n[col.0].value.nrows(), "mul_colvec: row mismatch");
            &n[a.0].value * &n[col.0].value
        };
        let ng = self.any_needs(&[a.0, col.0]);
        self.push(v, Op::MulColVec(a.0, col.0), ng)
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let v = self.nodes.borrow()[a.0].value.mapv(|x| x * c);
        let ng = self.needs(a.0);
        self.push(v, Op::Scale(a.0, c), ng)
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let v = self.nodes.borrow()[a.0].value.mapv(|x| x + c);
        let ng = self.needs(a.0);
        self.push(v, Op::AddScalar(a.0), ng)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let v = {
            let n = self.nodes.borrow();
            assert_eq!(
                n[a.0].value.ncols(),
                n[b.0].value.nrows(),
                "matmul: inner dimension mismatch"
            );
            n[a.0].value.dot(&n[b.0].value)
        };
        let ng = self.any_needs(&[a.0, b.0]);
        self.push(v, Op::MatMul(a.0, b.0), ng)
    }

    pub fn transpose(&self, a: Var) -> Var {
        let v = self.nodes.borrow()[a.0].value.t().to_owned();
        let ng = self.needs(a.0);
        self.push(v, Op::Transpose(a.0), ng)
    }

    pub fn exp(&self, a: Var) -> Var {
        let v = self.nodes.borrow()[a.0].value.mapv(f64::exp);
        let ng = self.needs(a.0);
        self.push(v, Op::Exp(a.0), ng)
    }

    pub fn sqrt(&self, a: Var) -> Var {
        let v = self.nodes.borrow()[a.0].value.mapv(f64::sqrt);
        let ng = self.needs(a.0);
        self.push(v, Op::Sqrt(a.0), ng)
    }

    pub fn tanh(&self, a: Var) -> Var {
        let v = self.nodes.borrow()[a.0].value.mapv(f64::tanh);
        let ng = self.needs(a.0);
        self.push(v, Op::Tanh(a.0), ng)
    }

    pub fn silu(&self, a: Var) -> Var {
        let v = self.nodes.borrow()[a.0].value.mapv(|x| x * sigmoid(x));
        let ng = self.needs(a.0);
        self.push(v, Op::Silu(a.0), ng)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let v = self.nodes.borrow()[a.0].value.mapv(sigmoid);
        let ng = self.needs(a.0);
        self.push(v, Op::Sigmoid(a.0), ng)
    }

    pub fn square(&self, a: Var) -> Var {
        let v = self.nodes.borrow()[a.0].value.mapv(|x| x * x);
        let ng = self.needs(a.0);
        self.push(v, Op::Square(a.0), ng)
    }

    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.nodes.borrow()[a.0].value.mapv(|x| x.clamp(lo, hi));
        let ng = self.needs(a.0);
        self.push(v, Op::Clamp(a.0, lo, hi), ng)
    }

    /// Softmax over each row.
    pub fn softmax_rows(&self, a: Var) -> Var {
        let v = {
            let n = self.nodes.borrow();
            softmax_rows_value(&n[a.0].value)
        };
        let ng = self.needs(a.0);
        self.push(v, Op::SoftmaxRows(a.0), ng)
    }

    /// Per-row layer normalization: `gamma * (x - mean) / sqrt(var + eps) + beta`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Var {
        let v = {
            let n = self.nodes.borrow();
            let xa = &n[x.0].value;
            let g = &n[gamma.0].value;
            let b = &n[beta.0].value;
            assert_eq!(g.dim(), (1, xa.ncols()), "layer_norm: gamma shape");
            assert_eq!(b.dim(), (1, xa.ncols()), "layer_norm: beta shape");
            let mut out = xa.clone();
            for mut row in out.rows_mut() {
                let d = row.len() as f64;
                let mean = row.sum() / d;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                for v in row.iter_mut() {
                    *v = (*v - mean) * inv;
                }
            }
            &out * g + b
        };
        let ng = self.any_needs(&[x.0, gamma.0, beta.0]);
        self.push(v, Op::LayerNorm(x.0, gamma.0, beta.0), ng)
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.nodes.borrow()[a.0].value.sum());
        let ng = self.needs(a.0);
        self.push(v, Op::SumAll(a.0), ng)
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let len = self.nodes.borrow()[a.0].value.len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / len)
    }

    /// Per-row sum over columns, `[n,d] -> [n,1]`.
    pub fn row_sum(&self, a: Var) -> Var {
        let v = {
            let n = self.nodes.borrow();
            let s = n[a.0].value.sum_axis(Axis(1));
            s.insert_axis(Axis(1))
        };
        let ng = self.needs(a.0);
        self.push(v, Op::RowSum(a.0), ng)
    }

    /// Per-column sum over rows, `[n,d] -> [1,d]`.
    pub fn col_sum(&self, a: Var) -> Var {
        let v = {
            let n = self.nodes.borrow();
            let s = n[a.0].value.sum_axis(Axis(0));
            s.insert_axis(Axis(0))
        };
        let ng = self.needs(a.0);
        self.push(v, Op::ColSum(a.0), ng)
    }

    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Var {
        let v = {
            let n = self.nodes.borrow();
            assert_eq!(n[a.0].value.len(), rows * cols, "reshape: element count mismatch");
            let flat: Vec<f64> = n[a.0].value.iter().copied().collect();
            Array2::from_shape_vec((rows, cols), flat).expect("reshape")
        };
        let ng = self.needs(a.0);
        self.push(v, Op::Reshape(a.0), ng)
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: empty input");
        let v = {
            let n = self.nodes.borrow();
            let cols = n[parts[0].0].value.ncols();
            let total: usize = parts.iter().map(|p| n[p.0].value.nrows()).sum();
            let mut out = Array2::zeros((total, cols));
            let mut row = 0;
            for p in parts {
                let a = &n[p.0].value;
                assert_eq!(a.ncols(), cols, "concat_rows: col mismatch");
                out.slice_mut(ndarray::s![row..row + a.nrows(), ..]).assign(a);
                row += a.nrows();
            }
            out
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let ng = self.any_needs(&ids);
        self.push(v, Op::ConcatRows(ids), ng)
    }

    pub fn slice_rows(&self, a: Var, start: usize, end: usize) -> Var {
        let v = {
            let n = self.nodes.borrow();
            assert!(end <= n[a.0].value.nrows() && start <= end, "slice_rows: out of range");
            n[a.0].value.slice(ndarray::s![start..end, ..]).to_owned()
        };
        let ng = self.needs(a.0);
        self.push(v, Op::SliceRows(a.0, start, end), ng)
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: empty input");
        let v = {
            let n = self.nodes.borrow();
            let rows = n[parts[0].0].value.nrows();
            let total: usize = parts.iter().map(|p| n[p.0].value.ncols()).sum();
            let mut out = Array2::zeros((rows, total));
            let mut col = 0;
            for p in parts {
                let a = &n[p.0].value;
                assert_eq!(a.nrows(), rows, "concat_cols: row mismatch");
                out.slice_mut(ndarray::s![.., col..col + a.ncols()]).assign(a);
                col += a.ncols();
            }
            out
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let ng = self.any_needs(&ids);
        self.push(v, Op::ConcatCols(ids), ng)
    }

    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Var {
        let v = {
            let n = self.nodes.borrow();
            assert!(end <= n[a.0].value.ncols() && start <= end, "slice_cols: out of range");
            n[a.0].value.slice(ndarray::s![.., start..end]).to_owned()
        };
        let ng = self.needs(a.0);
        self.push(v, Op::SliceCols(a.0, start, end), ng)
    }

    /// Select rows by index, in order. Indices may repeat; gradients scatter-add.
    pub fn gather_rows(&self, a: Var, indices: &[usize]) -> Var {
        let v = {
            let n = self.nodes.borrow();
            let src = &n[a.0].value;
            let mut out = Array2::zeros((indices.len(), src.ncols()));
            for (i, &idx) in indices.iter().enumerate() {
                assert!(idx < src.nrows(), "gather_rows: index out of range");
                out.row_mut(i).assign(&src.row(idx));
            }
            out
        };
        let ng = self.needs(a.0);
        self.push(v, Op::GatherRows(a.0, indices.to_vec()), ng)
    }

    /// Subtract each row's mean: `y = x - mean_cols(x)` per row.
    pub fn sub_row_mean(&self, a: Var) -> Var {
        let v = {
            let n = self.nodes.borrow();
            let x = &n[a.0].value;
            let mut out = x.clone();
            for mut row in out.rows_mut() {
                let mean = row.sum() / row.len() as f64;
                row.mapv_inplace(|v| v - mean);
            }
            out
        };
        let ng = self.needs(a.0);
        self.push(v, Op::SubRowMean(a.0), ng)
    }

    /// Divide by a `[1,1]` scalar variable.
    pub fn div_scalar_var(&self, a: Var, s: Var) -> Var {
        let v = {
            let n = self.nodes.borrow();
            assert_eq!(n[s.0].value.len(), 1, "div_scalar_var: divisor must be scalar");
            let d = n[s.0].value[(0, 0)];
            n[a.0].value.mapv(|x| x / d)
        };
        let ng = self.any_needs(&[a.0, s.0]);
        self.push(v, Op::DivScalarVar(a.0, s.0), ng)
    }

    /// Multiply by a `[1,1]` scalar variable.
    pub fn mul_scalar_var(&self, a: Var, s: Var) -> Var {
        let v = {
            let n = self.nodes.borrow();
            assert_eq!(n[s.0].value.len(), 1, "mul_scalar_var: factor must be scalar");
            let m = n[s.0].value[(0, 0)];
            n[a.0].value.mapv(|x| x * m)
        };
        let ng = self.any_needs(&[a.0, s.0]);
        self.push(v, Op::MulScalarVar(a.0, s.0), ng)
    }

    /// Mean squared error between two same-shape tensors, as a `[1,1]` scalar.
    pub fn mse(&self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.square(d);
        self.mean_all(sq)
    }

    /// Run reverse-mode accumulation from a `[1,1]` root.
    pub fn backward(&self, root: Var) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.0].value.len(), 1, "backward: root must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; nodes.len()];
        grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));

        for id in (0..=root.0).rev() {
            let Some(gy) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                grads[id] = Some(gy);
                continue;
            }
            let restore = gy.clone();
            macro_rules! acc {
                ($pid:expr, $g:expr) => {{
                    let pid = $pid;
                    if nodes[pid].needs_grad {
                        let g = $g;
                        match &mut grads[pid] {
                            Some(existing) => *existing += &g,
                            slot @ None => *slot = Some(g),
                        }
                    }
                }};
            }
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc!(*a, gy.clone());
                    acc!(*b, gy.clone());
                }
                Op::AddBias(a, b) => {
                    acc!(*a, gy.clone());
                    acc!(*b, gy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::Sub(a, b) => {
                    acc!(*a, gy.clone());
                    acc!(*b, gy.mapv(|v| -v));
                }
                Op::Mul(a, b) => {
                    acc!(*a, &gy * &nodes[*b].value);
                    acc!(*b, &gy * &nodes[*a].value);
                }
                Op::MulColVec(a, c) => {
                    acc!(*a, &gy * &nodes[*c].value);
                    acc!(*c, {
                        let prod = &gy * &nodes[*a].value;
                        prod.sum_axis(Axis(1)).insert_axis(Axis(1))
                    });
                }
                Op::Scale(a, c) => acc!(*a, gy.mapv(|v| v * c)),
                Op::AddScalar(a) => acc!(*a, gy.clone()),
                Op::MatMul(a, b) => {
                    acc!(*a, gy.dot(&nodes[*b].value.t()));
                    acc!(*b, nodes[*a].value.t().dot(&gy));
                }
                Op::Transpose(a) => acc!(*a, gy.t().to_owned()),
                Op::Exp(a) => acc!(*a, &gy * &node.value),
                Op::Sqrt(a) => acc!(*a, {
                    let mut g = gy.clone();
                    g.zip_mut_with(&node.value, |g, &y| *g *= 0.5 / y.max(1e-300));
                    g
                }),
                Op::Tanh(a) => acc!(*a, {
                    let mut g = gy.clone();
                    g.zip_mut_with(&node.value, |g, &y| *g *= 1.0 - y * y);
                    g
                }),
                Op::Silu(a) => acc!(*a, {
                    let mut g = gy.clone();
                    g.zip_mut_with(&nodes[*a].value, |g, &x| {
                        let s = sigmoid(x);
                        *g *= s * (1.0 + x * (1.0 - s));
                    });
                    g
                }),
                Op::Sigmoid(a) => acc!(*a, {
                    let mut g = gy.clone();
                    g.zip_mut_with(&node.value, |g, &y| *g *= y * (1.0 - y));
                    g
                }),
                Op::Square(a) => acc!(*a, {
                    let mut g = gy.clone();
                    g.zip_mut_with(&nodes[*a].value, |g, &x| *g *= 2.0 * x);
                    g
                }),
                Op::Clamp(a, lo, hi) => acc!(*a, {
                    let mut g = gy.clone();
                    g.zip_mut_with(&nodes[*a].value, |g, &x| {
                        if x < *lo || x > *hi {
                            *g = 0.0;
                        }
                    });
                    g
                }),
                Op::SoftmaxRows(a) => acc!(*a, {
                    let y = &node.value;
                    let mut g = &gy * y;
                    let dots = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    g = (&gy - &dots) * y;
                    g
                }),
                Op::LayerNorm(x, gamma, beta) => {
                    let xa = &nodes[*x].value;
                    let g = &nodes[*gamma].value;
                    let d = xa.ncols() as f64;
                    let mut xhat = xa.clone();
                    let mut inv_std = Vec::with_capacity(xa.nrows());
                    for mut row in xhat.rows_mut() {
                        let mean = row.sum() / d;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        inv_std.push(inv);
                        for v in row.iter_mut() {
                            *v = (*v - mean) * inv;
                        }
                    }
                    acc!(*beta, gy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc!(*gamma, (&gy * &xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc!(*x, {
                        let gyg = &gy * g;
                        let mean_gyg = gyg.sum_axis(Axis(1)).insert_axis(Axis(1)) / d;
                        let mean_gyg_xhat =
                            (&gyg * &xhat).sum_axis(Axis(1)).insert_axis(Axis(1)) / d;
                        let mut dx = &gyg - &mean_gyg - &(&xhat * &mean_gyg_xhat);
                        for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
                            let inv = inv_std[i];
                            row.mapv_inplace(|v| v * inv);
                        }
                        dx
                    });
                }
                Op::SumAll(a) => acc!(*a, {
                    let s = gy[(0, 0)];
                    Array2::from_elem(nodes[*a].value.dim(), s)
                }),
                Op::RowSum(a) => acc!(*a, {
                    let src = &nodes[*a].value;
                    let mut g = Array2::zeros(src.dim());
                    for (i, mut row) in g.rows_mut().into_iter().enumerate() {
                        row.fill(gy[(i, 0)]);
                    }
                    g
                }),
                Op::ColSum(a) => acc!(*a, {
                    let src = &nodes[*a].value;
                    let mut g = Array2::zeros(src.dim());
                    for mut row in g.rows_mut() {
                        row.assign(&gy.row(0));
                    }
                    g
                }),
                Op::Reshape(a) => acc!(*a, {
                    let dim = nodes[*a].value.dim();
                    let flat: Vec<f64> = gy.iter().copied().collect();
                    Array2::from_shape_vec(dim, flat).expect("reshape backward")
                }),
                Op::ConcatRows(parts) => {
                    let mut row = 0;
                    for &p in parts {
                        let nrows = nodes[p].value.nrows();
                        acc!(p, gy.slice(ndarray::s![row..row + nrows, ..]).to_owned());
                        row += nrows;
                    }
                }
                Op::SliceRows(a, start, end) => acc!(*a, {
                    let mut g = Array2::zeros(nodes[*a].value.dim());
                    g.slice_mut(ndarray::s![*start..*end, ..]).assign(&gy);
                    g
                }),
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for &p in parts {
                        let ncols = nodes[p].value.ncols();
                        acc!(p, gy.slice(ndarray::s![.., col..col + ncols]).to_owned());
                        col += ncols;
                    }
                }
                Op::SliceCols(a, start, end) => acc!(*a, {
                    let mut g = Array2::zeros(nodes[*a].value.dim());
                    g.slice_mut(ndarray::s![.., *start..*end]).assign(&gy);
                    g
                }),
                Op::GatherRows(a, indices) => acc!(*a, {
                    let mut g = Array2::zeros(nodes[*a].value.dim());
                    for (i, &idx) in indices.iter().enumerate() {
                        let mut dst = g.row_mut(idx);
                        dst += &gy.row(i);
                    }
                    g
                }),
                Op::SubRowMean(a) => acc!(*a, {
                    let d = gy.ncols() as f64;
                    let means = gy.sum_axis(Axis(1)).insert_axis(Axis(1)) / d;
                    &gy - &means
                }),
                Op::DivScalarVar(a, s) => {
                    let sv = nodes[*s].value[(0, 0)];
                    acc!(*a, gy.mapv(|v| v / sv));
                    acc!(*s, {
                        let num = (&gy * &nodes[*a].value).sum();
                        Array2::from_elem((1, 1), -num / (sv * sv))
                    });
                }
                Op::MulScalarVar(a, s) => {
                    let sv = nodes[*s].value[(0, 0)];
                    acc!(*a, gy.mapv(|v| v * sv));
                    acc!(*s, {
                        let num = (&gy * &nodes[*a].value).sum();
                        Array2::from_elem((1, 1), num)
                    });
                }
            }
            grads[id] = Some(restore);
        }
        Grads { grads }
    }
}

/// Gradients collected by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of the given shape if it never received one.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Array2::zeros(shape),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows_value(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}
