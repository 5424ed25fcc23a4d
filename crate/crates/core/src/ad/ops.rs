//! Forward operations. Each records itself on the tape of its first operand.
//!
//! Elementwise binary ops accept equal shapes, or a `[n, d]` matrix paired
//! with a `[d]` row vector broadcast over the leading dimension. Any other
//! mismatch is a [`AdError::Shape`].

use super::sparsemax::sparsemax;
use super::tape::{cholesky_logdet_forward, sigmoid, Op, Var};
use super::tensor::{gemm, Tensor};
use super::AdError;

type R<'t> = Result<Var<'t>, AdError>;

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>, AdError> {
    match (a.len(), b.len()) {
        _ if a == b => Ok(a.to_vec()),
        (2, 1) if a[1] == b[0] => Ok(a.to_vec()),
        (1, 2) if b[1] == a[0] => Ok(b.to_vec()),
        _ => Err(AdError::Shape(format!("cannot broadcast {a:?} with {b:?}"))),
    }
}

impl<'t> Var<'t> {
    fn unary(&self, name: &str, op: Op, f: impl Fn(f64) -> f64) -> R<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
        };
        self.wrap(value, op, &[self.id], name)
    }

    fn wrap(&self, value: Tensor, op: Op, inputs: &[usize], name: &str) -> R<'t> {
        let id = self.tape.push(value, op, inputs, name)?;
        Ok(Var { tape: self.tape, id })
    }

    fn with_value<T>(&self, f: impl FnOnce(&Tensor) -> T) -> T {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    fn binary(&self, other: &Var<'t>, name: &str, op: Op, f: impl Fn(f64, f64) -> f64) -> R<'t> {
        assert!(std::ptr::eq(self.tape, other.tape), "operands on different tapes");
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let shape = broadcast_shape(a.shape(), b.shape())?;
            let n: usize = shape.iter().product();
            let (ad, bd) = (a.data(), b.data());
            let data = (0..n).map(|i| f(ad[i % ad.len()], bd[i % bd.len()])).collect();
            Tensor::from_parts(shape, data)
        };
        self.wrap(value, op, &[self.id, other.id], name)
    }

    pub fn add(&self, other: &Var<'t>) -> R<'t> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'t>) -> R<'t> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var<'t>) -> R<'t> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn matmul(&self, other: &Var<'t>) -> R<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows() {
                return Err(AdError::Shape(format!("matmul {:?} x {:?}", a.shape(), b.shape())));
            }
            let data = gemm(
                a.data(),
                (a.rows(), a.cols()),
                false,
                b.data(),
                (b.rows(), b.cols()),
                false,
            );
            Tensor::from_parts(vec![a.rows(), b.cols()], data)
        };
        self.wrap(value, Op::MatMul(self.id, other.id), &[self.id, other.id], "matmul")
    }

    pub fn transpose(&self) -> R<'t> {
        let value = self.with_value(|a| {
            if a.rank() != 2 {
                return Err(AdError::Shape(format!("transpose of {:?}", a.shape())));
            }
            let (r, c) = (a.rows(), a.cols());
            let mut data = vec![0.0; a.len()];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = a.data()[i * c + j];
                }
            }
            Ok(Tensor::from_parts(vec![c, r], data))
        })?;
        self.wrap(value, Op::Transpose(self.id), &[self.id], "transpose")
    }

    pub fn exp(&self) -> R<'t> {
        self.unary("exp", Op::Exp(self.id), f64::exp)
    }

    pub fn log(&self) -> R<'t> {
        self.unary("log", Op::Log(self.id), f64::ln)
    }

    pub fn neg(&self) -> R<'t> {
        self.unary("neg", Op::Neg(self.id), |v| -v)
    }

    pub fn tanh(&self) -> R<'t> {
        self.unary("tanh", Op::Tanh(self.id), f64::tanh)
    }

    pub fn square(&self) -> R<'t> {
        self.unary("square", Op::Square(self.id), |v| v * v)
    }

    /// Multiplies by a constant.
    pub fn scale(&self, c: f64) -> R<'t> {
        self.unary("scale", Op::Scale(self.id, c), |v| v * c)
    }

    /// Adds a constant to every element.
    pub fn add_scalar(&self, c: f64) -> R<'t> {
        self.unary("add_scalar", Op::AddScalar(self.id), |v| v + c)
    }

    pub fn relu(&self) -> R<'t> {
        self.unary("relu", Op::Relu(self.id), |v| v.max(0.0))
    }

    /// `max(x, 0)`; same rule as [`Var::relu`] under the name used for margin losses.
    pub fn hinge(&self) -> R<'t> {
        self.unary("hinge", Op::Relu(self.id), |v| v.max(0.0))
    }

    pub fn softplus(&self) -> R<'t> {
        self.unary("softplus", Op::Softplus(self.id), softplus)
    }

    pub fn sigmoid(&self) -> R<'t> {
        self.unary("sigmoid", Op::Sigmoid(self.id), sigmoid)
    }

    /// `x·log(x + tiny)`, the entropy integrand with `0·log 0 = 0` up to a `tiny`-sized bias.
    pub fn xlogx(&self, tiny: f64) -> R<'t> {
        if self.with_value(|a| a.data().iter().any(|&v| v + tiny <= 0.0)) {
            return Err(AdError::Contract("xlogx needs nonnegative input".into()));
        }
        self.unary("xlogx", Op::XLogX(self.id, tiny), |v| v * (v + tiny).ln())
    }

    fn check_axis(&self, axis: Option<usize>) -> Result<(), AdError> {
        let rank = self.with_value(Tensor::rank);
        match axis {
            Some(a) if a >= rank.max(1) => Err(AdError::Shape(format!("axis {a} on rank {rank}"))),
            _ => Ok(()),
        }
    }

    fn reduce(&self, axis: Option<usize>, init: f64, f: impl Fn(f64, f64) -> f64) -> (Tensor, Vec<usize>) {
        self.with_value(|a| {
            let (r, c) = (a.rows(), a.cols());
            let d = a.data();
            let mut arg = Vec::new();
            let mut fold = |idx: &mut dyn Iterator<Item = usize>| {
                let mut acc = init;
                let mut best = usize::MAX;
                for i in idx {
                    let next = f(acc, d[i]);
                    if next != acc || best == usize::MAX {
                        best = i;
                    }
                    acc = next;
                }
                arg.push(best);
                acc
            };
            match (a.rank(), axis) {
                (_, None) | (0, _) | (1, Some(_)) => {
                    let v = fold(&mut (0..d.len()));
                    (Tensor::from_parts(vec![], vec![v]), arg)
                }
                (_, Some(0)) => {
                    let v = (0..c).map(|j| fold(&mut (0..r).map(move |i| i * c + j))).collect();
                    (Tensor::from_parts(vec![c], v), arg)
                }
                _ => {
                    let v = (0..r).map(|i| fold(&mut (i * c..(i + 1) * c))).collect();
                    (Tensor::from_parts(vec![r], v), arg)
                }
            }
        })
    }

    /// Sum over `axis`, or over everything when `None`.
    pub fn sum(&self, axis: Option<usize>) -> R<'t> {
        self.check_axis(axis)?;
        let (value, _) = self.reduce(axis, 0.0, |a, b| a + b);
        self.wrap(value, Op::Sum(self.id, axis), &[self.id], "sum")
    }

    pub fn sum_all(&self) -> R<'t> {
        self.sum(None)
    }

    pub fn mean(&self, axis: Option<usize>) -> R<'t> {
        self.check_axis(axis)?;
        let (sum, _) = self.reduce(axis, 0.0, |a, b| a + b);
        let count = (self.with_value(Tensor::len) / sum.len().max(1)) as f64;
        let value = sum.map(|v| v / count)?;
        self.wrap(value, Op::Mean(self.id, axis), &[self.id], "mean")
    }

    /// Maximum over `axis`; the gradient flows to the first maximal entry.
    pub fn max(&self, axis: Option<usize>) -> R<'t> {
        self.check_axis(axis)?;
        if self.with_value(Tensor::is_empty) {
            return Err(AdError::Shape("max of an empty tensor".into()));
        }
        let (value, arg) = self.reduce(axis, f64::NEG_INFINITY, f64::max);
        self.wrap(value, Op::Max(self.id, arg), &[self.id], "max")
    }

    fn row_map(&self, name: &str, op: Op, f: impl Fn(&[f64], &mut Vec<f64>)) -> R<'t> {
        let value = self.with_value(|a| {
            let c = a.cols();
            let mut data = Vec::with_capacity(a.len());
            for row in a.data().chunks(c.max(1)) {
                f(row, &mut data);
            }
            Tensor::from_parts(a.shape().to_vec(), data)
        });
        self.wrap(value, op, &[self.id], name)
    }

    /// Softmax along the last axis.
    pub fn softmax(&self) -> R<'t> {
        self.row_map("softmax", Op::Softmax(self.id), |row, out| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            out.extend(e.iter().map(|v| v / s));
        })
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&self) -> R<'t> {
        self.row_map("log_softmax", Op::LogSoftmax(self.id), |row, out| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        })
    }

    /// Sparsemax along the last axis.
    pub fn sparsemax(&self) -> R<'t> {
        self.row_map("sparsemax", Op::Sparsemax(self.id), |row, out| {
            out.extend(sparsemax(row))
        })
    }

    fn norm_rows(&self, name: &str, op: Op, f: impl Fn(&[f64]) -> f64) -> R<'t> {
        let value = self.with_value(|a| {
            if a.rank() != 2 {
                return Err(AdError::Shape(format!("{name} needs a matrix, got {:?}", a.shape())));
            }
            let c = a.cols();
            let v = (0..a.rows()).map(|i| f(&a.data()[i * c..(i + 1) * c])).collect();
            Ok(Tensor::from_parts(vec![a.rows()], v))
        })?;
        self.wrap(value, op, &[self.id], name)
    }

    /// Euclidean norm of every row, `[n, d] → [n]`.
    pub fn l2_norm_rows(&self) -> R<'t> {
        self.norm_rows("l2_norm_rows", Op::L2NormRows(self.id), |r| {
            r.iter().map(|v| v * v).sum::<f64>().sqrt()
        })
    }

    /// Manhattan norm of every row, `[n, d] → [n]`.
    pub fn l1_norm_rows(&self) -> R<'t> {
        self.norm_rows("l1_norm_rows", Op::L1NormRows(self.id), |r| {
            r.iter().map(|v| v.abs()).sum()
        })
    }

    /// `log det M` for a symmetric positive-definite matrix via Cholesky.
    pub fn cholesky_logdet(&self) -> R<'t> {
        let (logdet, inv) = self.with_value(cholesky_logdet_forward)?;
        self.wrap(
            Tensor::from_parts(vec![], vec![logdet]),
            Op::CholeskyLogdet(self.id, inv),
            &[self.id],
            "cholesky_logdet",
        )
    }

    /// Scales row `i` of a `[n, d]` matrix by `v[i]`.
    pub fn mul_rows(&self, v: &Var<'t>) -> R<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, s) = (&nodes[self.id].value, &nodes[v.id].value);
            if a.rank() != 2 || s.shape() != [a.rows()] {
                return Err(AdError::Shape(format!("mul_rows {:?} by {:?}", a.shape(), s.shape())));
            }
            let c = a.cols();
            let data = a.data().iter().enumerate().map(|(i, x)| x * s.data()[i / c]).collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        };
        self.wrap(value, Op::MulRows(self.id, v.id), &[self.id, v.id], "mul_rows")
    }

    /// Divides by a scalar node.
    pub fn div_scalar(&self, s: &Var<'t>) -> R<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, sv) = (&nodes[self.id].value, &nodes[s.id].value);
            if sv.len() != 1 {
                return Err(AdError::Shape(format!("divisor has shape {:?}", sv.shape())));
            }
            let d = sv.item();
            Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|x| x / d).collect())
        };
        self.wrap(value, Op::DivScalar(self.id, s.id), &[self.id, s.id], "div_scalar")
    }

    /// Gathers columns of a matrix (or entries of a vector treated as one row).
    pub fn select_cols(&self, cols: &[usize]) -> R<'t> {
        let value = self.with_value(|a| {
            let c = a.cols();
            if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
                return Err(AdError::Shape(format!("column {bad} out of range for {:?}", a.shape())));
            }
            let mut data = Vec::with_capacity(a.rows() * cols.len());
            for i in 0..a.rows() {
                data.extend(cols.iter().map(|&j| a.data()[i * c + j]));
            }
            Ok(Tensor::from_parts(vec![a.rows(), cols.len()], data))
        })?;
        self.wrap(value, Op::SelectCols(self.id, cols.to_vec()), &[self.id], "select_cols")
    }

    /// `[n, a] ++ [n, b] → [n, a + b]`.
    pub fn concat_cols(&self, other: &Var<'t>) -> R<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.rank() != 2 || b.rank() != 2 || a.rows() != b.rows() {
                return Err(AdError::Shape(format!("concat {:?} with {:?}", a.shape(), b.shape())));
            }
            let mut data = Vec::with_capacity(a.len() + b.len());
            for i in 0..a.rows() {
                data.extend_from_slice(a.row(i));
                data.extend_from_slice(b.row(i));
            }
            Tensor::from_parts(vec![a.rows(), a.cols() + b.cols()], data)
        };
        self.wrap(
            value,
            Op::ConcatCols(self.id, other.id),
            &[self.id, other.id],
            "concat_cols",
        )
    }

    /// Clamps column `j` into `[lo[j], hi[j]]`; the gradient is zero where clamping is active.
    pub fn clamp_cols(&self, lo: &[f64], hi: &[f64]) -> R<'t> {
        let value = self.with_value(|a| {
            let c = a.cols();
            if lo.len() != c || hi.len() != c {
                return Err(AdError::Shape(format!("{} bounds for {c} columns", lo.len())));
            }
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, x)| x.max(lo[i % c]).min(hi[i % c]))
                .collect();
            Ok(Tensor::from_parts(a.shape().to_vec(), data))
        })?;
        self.wrap(
            value,
            Op::Clamp(self.id, lo.to_vec(), hi.to_vec()),
            &[self.id],
            "clamp_cols",
        )
    }
}

/// Numerically stable `log(1 + eˣ)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
