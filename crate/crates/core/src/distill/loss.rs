//! Row-wise distillation and language-modelling losses as fused tape ops.

use crate::error::{Error, Result};
use crate::numerics::{r, CustomOp, Real, Tape, Tensor, Var};

fn log_softmax_row<T: Real>(row: &[T], out: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - lse;
    }
}

fn check_finite<T: Real>(t: &Tensor<T>, what: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Per-row log-probabilities.
fn log_probs<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let mut out = logits.clone();
    let (rows, _) = logits.dims2();
    for i in 0..rows {
        log_softmax_row(logits.row(i), out.row_mut(i));
    }
    out
}

/// `mean_t Σ_v p′(v) (log p′(v) − log p(v))` with `p′` from the teacher.
pub fn kl_loss<T: Real>(teacher: &Tensor<T>, student: &Tensor<T>) -> Result<T> {
    Ok(kl_parts(teacher, student)?.0)
}

/// Mean KL and the per-row log-probabilities of both sides.
fn kl_parts<T: Real>(teacher: &Tensor<T>, student: &Tensor<T>) -> Result<(T, Tensor<T>, Tensor<T>, Vec<T>)> {
    if teacher.shape() != student.shape() || teacher.shape().len() != 2 {
        return Err(Error::dim("kl_loss", teacher.shape(), student.shape()));
    }
    check_finite(teacher, "teacher logits")?;
    check_finite(student, "student logits")?;
    let lt = log_probs(teacher);
    let ls = log_probs(student);
    let rows = teacher.rows();
    let per_row: Vec<T> = (0..rows)
        .map(|i| {
            let kl = lt
                .row(i)
                .iter()
                .zip(ls.row(i))
                .map(|(&a, &b)| a.exp() * (a - b))
                .sum::<T>();
            // Rounding can push an exact zero slightly negative.
            kl.max(T::zero())
        })
        .collect();
    let mean = per_row.iter().copied().sum::<T>() / r(rows as f64);
    Ok((mean, lt, ls, per_row))
}

struct KlOp<T> {
    lt: Tensor<T>,
    ls: Tensor<T>,
    per_row: Vec<T>,
}

impl<T: Real> CustomOp<T> for KlOp<T> {
    fn name(&self) -> &'static str {
        "kl_loss"
    }

    fn backward(
        &self,
        _: &[&Tensor<T>],
        _: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let g = grad.data()[0] / r(self.lt.rows() as f64);
        let (rows, cols) = self.lt.dims2();
        let teacher = needs[0].then(|| {
            let mut d = Tensor::zeros(&[rows, cols]);
            for i in 0..rows {
                let kl = self.per_row[i];
                for ((o, &a), &b) in d.row_mut(i).iter_mut().zip(self.lt.row(i)).zip(self.ls.row(i)) {
                    *o = g * a.exp() * ((a - b) - kl);
                }
            }
            d
        });
        let student = needs[1].then(|| {
            let mut d = Tensor::zeros(&[rows, cols]);
            for i in 0..rows {
                for ((o, &a), &b) in d.row_mut(i).iter_mut().zip(self.lt.row(i)).zip(self.ls.row(i)) {
                    *o = g * (b.exp() - a.exp());
                }
            }
            d
        });
        Ok(vec![teacher, student])
    }
}

/// KL(teacher ‖ student) on a tape. Gradients flow into whichever side is tracked.
pub fn kl_loss_tape<T: Real>(tape: &mut Tape<T>, teacher: Var, student: Var) -> Result<Var> {
    let (mean, lt, ls, per_row) = kl_parts(tape.value(teacher), tape.value(student))?;
    let op = KlOp { lt, ls, per_row };
    Ok(tape.custom(&[teacher, student], Tensor::scalar(mean), Box::new(op)))
}

/// Mean negative log-likelihood of `targets[i]` under row `i` of `logits`.
pub fn ce_loss<T: Real>(logits: &Tensor<T>, targets: &[usize]) -> Result<T> {
    Ok(ce_parts(logits, targets)?.0)
}

fn ce_parts<T: Real>(logits: &Tensor<T>, targets: &[usize]) -> Result<(T, Tensor<T>)> {
    let (rows, vocab) = logits.dims2();
    if targets.len() != rows {
        return Err(Error::dim("ce_loss", logits.shape(), &[targets.len()]));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= vocab) {
        return Err(Error::Token { token: t, vocab });
    }
    check_finite(logits, "logits")?;
    let lp = log_probs(logits);
    let total: T = targets.iter().enumerate().map(|(i, &t)| -lp.at(i, t)).sum();
    Ok((total / r(rows as f64), lp))
}

struct CeOp<T> {
    lp: Tensor<T>,
    targets: Vec<usize>,
}

impl<T: Real> CustomOp<T> for CeOp<T> {
    fn name(&self) -> &'static str {
        "ce_loss"
    }

    fn backward(
        &self,
        _: &[&Tensor<T>],
        _: &Tensor<T>,
        grad: &Tensor<T>,
        _: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let g = grad.data()[0] / r(self.lp.rows() as f64);
        let mut d = self.lp.map(|x| x.exp() * g);
        for (i, &t) in self.targets.iter().enumerate() {
            d.set(i, t, d.at(i, t) - g);
        }
        Ok(vec![Some(d)])
    }
}

pub fn ce_loss_tape<T: Real>(tape: &mut Tape<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    let (mean, lp) = ce_parts(tape.value(logits), targets)?;
    let op = CeOp {
        lp,
        targets: targets.to_vec(),
    };
    Ok(tape.custom(&[logits], Tensor::scalar(mean), Box::new(op)))
}
