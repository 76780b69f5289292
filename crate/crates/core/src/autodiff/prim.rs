use super::kernels;
use super::{Activation, Tensor};
use crate::error::{Error, Result};

/// A differentiable primitive. Inputs are positional; see each variant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Prim {
    /// `[x, w, b]`
    Affine,
    /// `[x, w]`
    Linear,
    /// `[x, w, b]`, activation applied to the affine output.
    Dense(Activation),
    Act(Activation),
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddScalar(f64),
    Square,
    Exp,
    Ln,
    Sqrt,
    Sum,
    RowSum,
    RowNorm,
    /// Any number of inputs sharing the row count.
    ConcatCols,
    SliceCols { start: usize, len: usize },
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::dim(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ))
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|x| f(*x)).collect())
}

fn affine_shapes(op: &'static str, x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Vec<usize>> {
    if w.shape().len() != 2 {
        return Err(Error::dim(op, format!("weight must be rank 2, got {:?}", w.shape())));
    }
    let (n_out, n_in) = (w.shape()[0], w.shape()[1]);
    if x.shape().len() > 2 || x.cols() != n_in {
        return Err(Error::dim(
            op,
            format!("input {:?} does not match weight {:?}", x.shape(), w.shape()),
        ));
    }
    if let Some(b) = b {
        if b.len() != n_out {
            return Err(Error::dim(
                op,
                format!("bias {:?} does not match weight {:?}", b.shape(), w.shape()),
            ));
        }
    }
    Ok(match x.shape().len() {
        2 => vec![x.rows(), n_out],
        _ => vec![n_out],
    })
}

impl Prim {
    fn arity(&self) -> Option<usize> {
        match self {
            Prim::Affine | Prim::Dense(_) => Some(3),
            Prim::Linear | Prim::Add | Prim::Sub | Prim::Mul | Prim::Div => Some(2),
            Prim::ConcatCols => None,
            _ => Some(1),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Prim::Affine => "affine",
            Prim::Linear => "linear",
            Prim::Dense(_) => "dense",
            Prim::Act(_) => "activation",
            Prim::Add => "add",
            Prim::Sub => "sub",
            Prim::Mul => "mul",
            Prim::Div => "div",
            Prim::Scale(_) => "scale",
            Prim::AddScalar(_) => "add_scalar",
            Prim::Square => "square",
            Prim::Exp => "exp",
            Prim::Ln => "ln",
            Prim::Sqrt => "sqrt",
            Prim::Sum => "sum",
            Prim::RowSum => "row_sum",
            Prim::RowNorm => "row_norm",
            Prim::ConcatCols => "concat_cols",
            Prim::SliceCols { .. } => "slice_cols",
        }
    }

    /// Evaluates the primitive.
    pub fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        match self.arity() {
            Some(n) if n != inputs.len() => {
                return Err(Error::Contract(format!(
                    "{} takes {} inputs, got {}",
                    self.name(),
                    n,
                    inputs.len()
                )))
            }
            None if inputs.is_empty() => {
                return Err(Error::Contract(format!("{} needs at least one input", self.name())))
            }
            _ => {}
        }
        let out = match *self {
            Prim::Affine | Prim::Linear | Prim::Dense(_) => {
                let (x, w) = (inputs[0], inputs[1]);
                let b = if matches!(self, Prim::Linear) { None } else { Some(inputs[2]) };
                let shape = affine_shapes(self.name(), x, w, b)?;
                let (n_out, n_in) = (w.shape()[0], w.shape()[1]);
                let mut y = kernels::affine(x.data(), x.rows(), n_in, w.data(), n_out, b.map(Tensor::data));
                if let Prim::Dense(act) = self {
                    kernels::activate_in_place(*act, &mut y);
                }
                Tensor::from_parts(shape, y)
            }
            Prim::Act(kind) => {
                let mut data = inputs[0].data().to_vec();
                kernels::activate_in_place(kind, &mut data);
                Tensor::from_parts(inputs[0].shape().to_vec(), data)
            }
            Prim::Add => {
                same_shape("add", inputs[0], inputs[1])?;
                zip_map(inputs[0], inputs[1], |a, b| a + b)
            }
            Prim::Sub => {
                same_shape("sub", inputs[0], inputs[1])?;
                zip_map(inputs[0], inputs[1], |a, b| a - b)
            }
            Prim::Mul => {
                same_shape("mul", inputs[0], inputs[1])?;
                zip_map(inputs[0], inputs[1], |a, b| a * b)
            }
            Prim::Div => {
                same_shape("div", inputs[0], inputs[1])?;
                zip_map(inputs[0], inputs[1], |a, b| a / b)
            }
            Prim::Scale(c) => map(inputs[0], |x| x * c),
            Prim::AddScalar(c) => map(inputs[0], |x| x + c),
            Prim::Square => map(inputs[0], |x| x * x),
            Prim::Exp => map(inputs[0], kernels::exp),
            Prim::Ln => map(inputs[0], f64::ln),
            Prim::Sqrt => map(inputs[0], f64::sqrt),
            Prim::Sum => Tensor::scalar(inputs[0].data().iter().sum()),
            Prim::RowSum => {
                let x = inputs[0];
                Tensor::from_parts(vec![x.rows(), 1], kernels::row_sum(x.data(), x.rows(), x.cols()))
            }
            Prim::RowNorm => {
                let x = inputs[0];
                Tensor::from_parts(vec![x.rows(), 1], kernels::row_norm(x.data(), x.rows(), x.cols()))
            }
            Prim::ConcatCols => {
                let rows = inputs[0].rows();
                if let Some(bad) = inputs.iter().find(|t| t.rows() != rows || t.shape().len() != 2) {
                    return Err(Error::dim(
                        "concat_cols",
                        format!("expected rank-2 inputs with {} rows, got {:?}", rows, bad.shape()),
                    ));
                }
                let parts: Vec<(&[f64], usize)> = inputs.iter().map(|t| (t.data(), t.cols())).collect();
                let cols = parts.iter().map(|p| p.1).sum();
                Tensor::from_parts(vec![rows, cols], kernels::concat_cols(&parts, rows))
            }
            Prim::SliceCols { start, len } => {
                let x = inputs[0];
                if x.shape().len() != 2 || start + len > x.cols() {
                    return Err(Error::dim(
                        "slice_cols",
                        format!("columns {}..{} out of {:?}", start, start + len, x.shape()),
                    ));
                }
                let c = x.cols();
                let mut data = Vec::with_capacity(x.rows() * len);
                for r in 0..x.rows() {
                    data.extend_from_slice(&x.data()[r * c + start..r * c + start + len]);
                }
                Tensor::from_parts(vec![x.rows(), len], data)
            }
        };
        Ok(out)
    }

    /// Propagates the output gradient `gy` into `grads[k]` for each input `k`
    /// whose slot is `Some`.
    pub(crate) fn backward(
        &self,
        inputs: &[&Tensor],
        y: &Tensor,
        gy: &[f64],
        grads: &mut [Option<&mut [f64]>],
    ) {
        fn acc(g: &mut Option<&mut [f64]>, f: impl Fn(usize) -> f64) {
            if let Some(g) = g.as_deref_mut() {
                for (i, gi) in g.iter_mut().enumerate() {
                    *gi += f(i);
                }
            }
        }
        match *self {
            Prim::Affine | Prim::Linear | Prim::Dense(_) => {
                let (x, w) = (inputs[0], inputs[1]);
                let (n_out, n_in) = (w.shape()[0], w.shape()[1]);
                let local;
                let dy: &[f64] = if let Prim::Dense(act) = self {
                    local = kernels::activate_grad_mul(*act, gy, y.data());
                    &local
                } else {
                    gy
                };
                let (gx, rest) = grads.split_at_mut(1);
                let (gw, gb) = rest.split_at_mut(1);
                kernels::affine_backward(
                    dy,
                    x.data(),
                    w.data(),
                    x.rows(),
                    n_in,
                    n_out,
                    gx[0].as_deref_mut(),
                    gw[0].as_deref_mut(),
                    gb.get_mut(0).and_then(|g| g.as_deref_mut()),
                );
            }
            Prim::Act(kind) => {
                if let Some(g) = grads[0].as_deref_mut() {
                    for (gi, d) in g.iter_mut().zip(kernels::activate_grad_mul(kind, gy, y.data())) {
                        *gi += d;
                    }
                }
            }
            Prim::Add => {
                acc(&mut grads[0], |i| gy[i]);
                acc(&mut grads[1], |i| gy[i]);
            }
            Prim::Sub => {
                acc(&mut grads[0], |i| gy[i]);
                acc(&mut grads[1], |i| -gy[i]);
            }
            Prim::Mul => {
                let (a, b) = (inputs[0].data(), inputs[1].data());
                acc(&mut grads[0], |i| gy[i] * b[i]);
                acc(&mut grads[1], |i| gy[i] * a[i]);
            }
            Prim::Div => {
                let (b, yd) = (inputs[1].data(), y.data());
                acc(&mut grads[0], |i| gy[i] / b[i]);
                acc(&mut grads[1], |i| -gy[i] * yd[i] / b[i]);
            }
            Prim::Scale(c) => acc(&mut grads[0], |i| gy[i] * c),
            Prim::AddScalar(_) => acc(&mut grads[0], |i| gy[i]),
            Prim::Square => {
                let a = inputs[0].data();
                acc(&mut grads[0], |i| 2.0 * a[i] * gy[i]);
            }
            Prim::Exp => {
                let yd = y.data();
                acc(&mut grads[0], |i| gy[i] * yd[i]);
            }
            Prim::Ln => {
                let a = inputs[0].data();
                acc(&mut grads[0], |i| gy[i] / a[i]);
            }
            Prim::Sqrt => {
                let yd = y.data();
                acc(&mut grads[0], |i| if yd[i] > 0.0 { gy[i] / (2.0 * yd[i]) } else { 0.0 });
            }
            Prim::Sum => acc(&mut grads[0], |_| gy[0]),
            Prim::RowSum => {
                let c = inputs[0].cols();
                acc(&mut grads[0], |i| gy[i / c]);
            }
            Prim::RowNorm => {
                let (a, yd, c) = (inputs[0].data(), y.data(), inputs[0].cols());
                acc(&mut grads[0], |i| {
                    let n = yd[i / c];
                    if n > 0.0 { gy[i / c] * a[i] / n } else { 0.0 }
                });
            }
            Prim::ConcatCols => {
                let total = y.cols();
                let mut offset = 0;
                for (k, t) in inputs.iter().enumerate() {
                    let c = t.cols();
                    acc(&mut grads[k], |i| gy[(i / c) * total + offset + i % c]);
                    offset += c;
                }
            }
            Prim::SliceCols { start, len } => {
                if let Some(g) = grads[0].as_deref_mut() {
                    let c = inputs[0].cols();
                    for r in 0..inputs[0].rows() {
                        for j in 0..len {
                            g[r * c + start + j] += gy[r * len + j];
                        }
                    }
                }
            }
        }
    }
}
