use crate::error::{Error, Result};

use super::graph::{slot, Node, Op};
use super::{Graph, Scalar, Var};

impl<T: Scalar> Graph<T> {
    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        self.value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let y = self.zip_with(a, b, |x, y| x + y);
        self.push(self.shape(a).to_vec(), y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let y = self.zip_with(a, b, |x, y| x - y);
        self.push(self.shape(a).to_vec(), y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let y = self.zip_with(a, b, |x, y| x * y);
        self.push(self.shape(a).to_vec(), y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let y = self.value(x).iter().map(|&v| v * c).collect();
        self.push(self.shape(x).to_vec(), y, Op::Scale { x, c })
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -T::one())
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().copied().sum::<T>();
        self.push(vec![], vec![s], Op::Sum { x })
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(Error::usage("mean of an empty tensor"));
        }
        let m = v.iter().copied().sum::<T>() / T::from_usize(v.len());
        self.push(vec![], vec![m], Op::Mean { x })
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).iter().map(|&v| v * v).collect();
        self.push(self.shape(x).to_vec(), y, Op::Square { x })
    }

    /// `sqrt(x + eps)`; `eps > 0` keeps the derivative finite at zero.
    pub fn sqrt_eps(&mut self, x: Var, eps: T) -> Result<Var> {
        if let Some(v) = self.value(x).iter().find(|&&v| v + eps < T::zero()) {
            return Err(Error::Numeric(format!("sqrt_eps of negative value {v}")));
        }
        let y = self.value(x).iter().map(|&v| (v + eps).sqrt()).collect();
        self.push(self.shape(x).to_vec(), y, Op::SqrtEps { x })
    }

    /// `x - mean(x)` over all elements.
    pub fn center(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(Error::usage("center of an empty tensor"));
        }
        let m = v.iter().copied().sum::<T>() / T::from_usize(v.len());
        let y = v.iter().map(|&e| e - m).collect();
        self.push(self.shape(x).to_vec(), y, Op::Center { x })
    }

    /// Column means of `[N, D]`, shaped `[1, D]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] == 0 {
            return Err(Error::dim(format!("mean_rows: input {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let v = self.value(x);
        let n = T::from_usize(rows);
        let y = (0..cols)
            .map(|c| (0..rows).map(|r| v[r * cols + c]).sum::<T>() / n)
            .collect();
        self.push(vec![1, cols], y, Op::MeanRows { x })
    }

    /// `out[b, n] = sum_d (a[b, d] - p[n, d])^2` for `a: [B, D]`, `p: [N, D]`.
    pub fn pairwise_sq_dist(&mut self, a: Var, p: Var) -> Result<Var> {
        let (sa, sp) = (self.shape(a), self.shape(p));
        if sa.len() != 2 || sp.len() != 2 || sa[1] != sp[1] {
            return Err(Error::dim(format!("pairwise_sq_dist: features {sa:?}, points {sp:?}")));
        }
        let (rows, n, d) = (sa[0], sp[0], sa[1]);
        let (av, pv) = (self.value(a), self.value(p));
        let mut y = Vec::with_capacity(rows * n);
        for r in 0..rows {
            let ar = &av[r * d..(r + 1) * d];
            for k in 0..n {
                let pk = &pv[k * d..(k + 1) * d];
                let mut s = T::zero();
                for (&u, &w) in ar.iter().zip(pk) {
                    let diff = u - w;
                    s = s + diff * diff;
                }
                y.push(s);
            }
        }
        self.push(vec![rows, n], y, Op::PairwiseSqDist { a, b: p })
    }

    /// `out[r] = x[r, idx[r]]`.
    pub fn pick_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != idx.len() {
            return Err(Error::dim(format!("pick_rows: input {s:?} with {} indices", idx.len())));
        }
        let cols = s[1];
        if let Some(&bad) = idx.iter().find(|&&c| c >= cols) {
            return Err(Error::usage(format!("pick_rows: column {bad} out of {cols}")));
        }
        let v = self.value(x);
        let y = idx.iter().enumerate().map(|(r, &c)| v[r * cols + c]).collect();
        self.push(vec![idx.len()], y, Op::PickRows { x, idx: idx.to_vec() })
    }

    /// Row-wise `log(sum(exp(x)))`, computed after subtracting the row maximum.
    pub fn logsumexp_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[1] == 0 {
            return Err(Error::dim(format!("logsumexp_rows: input {s:?}")));
        }
        let cols = s[1];
        let y = self
            .value(x)
            .chunks(cols)
            .map(|row| {
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
            })
            .collect();
        self.push(vec![s[0]], y, Op::LogSumExpRows { x })
    }
}

pub(crate) fn pairwise_sq_dist_backward<T: Scalar>(
    adj: &mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    a: Var,
    p: Var,
    av: &[T],
    pv: &[T],
    d: usize,
    g: &[T],
) {
    let rows = av.len() / d;
    let n = pv.len() / d;
    let two = T::from_f64(2.0);
    if let Some(ga) = slot(adj, nodes, a) {
        for r in 0..rows {
            for k in 0..n {
                let c = two * g[r * n + k];
                for j in 0..d {
                    ga[r * d + j] = ga[r * d + j] + c * (av[r * d + j] - pv[k * d + j]);
                }
            }
        }
    }
    if let Some(gp) = slot(adj, nodes, p) {
        for r in 0..rows {
            for k in 0..n {
                let c = two * g[r * n + k];
                for j in 0..d {
                    gp[k * d + j] = gp[k * d + j] - c * (av[r * d + j] - pv[k * d + j]);
                }
            }
        }
    }
}
