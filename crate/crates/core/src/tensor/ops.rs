//! Elementwise, reduction and mixing operations on the tape.

use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

impl<T: Scalar> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(out, &[a, b], |args| {
            vec![Some(args.grad.clone()), Some(args.grad.clone())]
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(out, &[a, b], |args| {
            vec![Some(args.grad.clone()), Some(args.grad.map(|v| -v))]
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(out, &[a, b], |args| {
            let ga = args
                .needs[0]
                .then(|| args.grad.zip_map(args.inputs[1], |g, y| g * y).unwrap());
            let gb = args
                .needs[1]
                .then(|| args.grad.zip_map(args.inputs[0], |g, x| g * x).unwrap());
            vec![ga, gb]
        })
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * factor);
        self.push(out, &[a], move |args| vec![Some(args.grad.map(|g| g * factor))])
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, &[a], move |args| {
            vec![Some(Tensor::full(&shape, args.grad.item()))]
        })
    }

    /// `Σ_i w_i · x_i` for a fixed constant tensor `w` (random projections).
    pub fn dot_const(&mut self, a: Var, weights: &Tensor<T>) -> Result<Var> {
        self.value(a).check_same_shape(weights)?;
        let s: T = self
            .value(a)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&x, &w)| x * w)
            .sum();
        let w = weights.clone();
        self.push(Tensor::scalar(s), &[a], move |args| {
            let g = args.grad.item();
            vec![Some(w.map(|v| v * g))]
        })
    }

    /// Elementwise sum of several same-shaped tensors, as one node.
    pub fn sum_n(&mut self, terms: &[Var]) -> Result<Var> {
        let first = *terms
            .first()
            .ok_or_else(|| Error::invalid("sum_n of zero terms"))?;
        if terms.len() == 1 {
            return Ok(first);
        }
        let mut out = self.value(first).clone();
        out.requires_grad = false;
        for &t in &terms[1..] {
            out.add_assign(self.value(t))?;
        }
        let n = terms.len();
        self.push(out, terms, move |args| {
            (0..n)
                .map(|i| args.needs[i].then(|| args.grad.clone()))
                .collect()
        })
    }

    /// `Σ_j weights[index_j] · x_j`: the weighted mixture used by relaxed
    /// operator and path choices. `weights` is any tensor; entries are
    /// addressed by flat index.
    pub fn mix(&mut self, weights: Var, terms: &[(usize, Var)]) -> Result<Var> {
        let (_, first) = *terms
            .first()
            .ok_or_else(|| Error::invalid("mix of zero terms"))?;
        let shape = self.shape(first).to_vec();
        let wn = self.value(weights).numel();
        let mut out = Tensor::zeros(&shape);
        for &(k, x) in terms {
            if k >= wn {
                return Err(Error::invalid(format!("mix weight index {k} out of {wn}")));
            }
            let w = self.value(weights).data()[k];
            let xv = self.value(x);
            if xv.shape() != shape.as_slice() {
                return Err(Error::shape(format!(
                    "mix term {:?} vs {:?}",
                    xv.shape(),
                    shape
                )));
            }
            for (o, &v) in out.data_mut().iter_mut().zip(xv.data()) {
                *o += w * v;
            }
        }
        let mut parents = Vec::with_capacity(terms.len() + 1);
        parents.push(weights);
        parents.extend(terms.iter().map(|&(_, x)| x));
        let idx: Vec<usize> = terms.iter().map(|&(k, _)| k).collect();
        self.push(out, &parents, move |args| {
            let wt = args.inputs[0];
            let mut grads = Vec::with_capacity(idx.len() + 1);
            let gw = args.needs[0].then(|| {
                let mut gw = Tensor::zeros(wt.shape());
                for (j, &k) in idx.iter().enumerate() {
                    let x = args.inputs[j + 1];
                    let s: T = args
                        .grad
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&g, &v)| g * v)
                        .sum();
                    gw.data_mut()[k] += s;
                }
                gw
            });
            grads.push(gw);
            for (j, &k) in idx.iter().enumerate() {
                let w = wt.data()[k];
                grads.push(args.needs[j + 1].then(|| args.grad.map(|g| g * w)));
            }
            grads
        })
    }

    /// Softmax over consecutive groups of `group` entries. Entries with
    /// `mask[i] == false` receive exactly zero weight; a fully masked group
    /// yields all zeros.
    pub fn softmax_groups(&mut self, logits: Var, group: usize, mask: Option<&[bool]>) -> Result<Var> {
        let x = self.value(logits);
        let n = x.numel();
        if group == 0 || n % group != 0 {
            return Err(Error::shape(format!("{n} logits not divisible into groups of {group}")));
        }
        if let Some(m) = mask {
            if m.len() != n {
                return Err(Error::shape(format!("mask length {} vs {n}", m.len())));
            }
        }
        if !x.all_finite() {
            return Err(Error::NonFinite("softmax logits".into()));
        }
        let keep = |i: usize| mask.is_none_or(|m| m[i]);
        let mut out = Tensor::zeros(x.shape());
        for g in 0..n / group {
            let base = g * group;
            let mut mx = T::neg_infinity();
            for i in base..base + group {
                if keep(i) {
                    mx = mx.max(x.data()[i]);
                }
            }
            if mx == T::neg_infinity() {
                continue;
            }
            let mut z = T::zero();
            for i in base..base + group {
                if keep(i) {
                    let e = (x.data()[i] - mx).exp();
                    out.data_mut()[i] = e;
                    z += e;
                }
            }
            for i in base..base + group {
                out.data_mut()[i] /= z;
            }
        }
        self.push(out, &[logits], move |args| {
            let y = args.output;
            let mut gx = Tensor::zeros(y.shape());
            for g in 0..y.numel() / group {
                let base = g * group;
                let dot: T = (base..base + group)
                    .map(|i| args.grad.data()[i] * y.data()[i])
                    .sum();
                for i in base..base + group {
                    gx.data_mut()[i] = y.data()[i] * (args.grad.data()[i] - dot);
                }
            }
            vec![Some(gx)]
        })
    }
}
