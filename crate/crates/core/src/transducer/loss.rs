//! Exact transducer loss over the `T × (U+1)` alignment lattice.
//!
//! Indices are 0-based: the lattice starts at `(0, 0)` and every complete
//! alignment ends with a blank emitted at `(T-1, U)`. A blank at `(t, u)`
//! moves to `(t+1, u)`; label `y_{u+1}` at `(t, u)` moves to `(t, u+1)`.

use crate::error::{Error, Result};
use crate::frontend::TokenSequence;
use crate::tensor::{lse2, Tensor, Var};

/// Largest `T + U` the brute-force enumerator accepts.
pub const BRUTE_FORCE_MAX: usize = 12;

/// Forward/backward log variables of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Lattice {
    /// `alpha[t, u]`: log mass of partial alignments reaching `(t, u)`.
    pub alpha: Tensor,
    /// `beta[t, u]`: log mass of completions from `(t, u)`, final blank included.
    pub beta: Tensor,
    pub log_likelihood: f64,
}

/// Posterior arc occupancies (the negated gradients w.r.t. log-probabilities).
#[derive(Clone, Debug, PartialEq)]
pub struct LatticeGrad {
    pub blank_arcs: Tensor,
    pub label_arcs: Tensor,
}

/// Log-probabilities of blank and of the next label at each lattice node.
struct ArcLogProbs {
    t: usize,
    u1: usize,
    blank: Vec<f64>,
    label: Vec<f64>,
    softmax: Vec<f64>,
}

fn validate(logits: &Tensor, labels: &[usize]) -> Result<(usize, usize, usize)> {
    if logits.rank() != 3 {
        return Err(Error::dim(format!(
            "transducer logits must be T x (U+1) x (V+1), got {:?}",
            logits.shape()
        )));
    }
    let (t, u1, v1) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
    if u1 != labels.len() + 1 {
        return Err(Error::dim(format!(
            "logits cover U = {} labels, sequence has {}",
            u1 - 1,
            labels.len()
        )));
    }
    if v1 < 2 {
        return Err(Error::dim("vocabulary needs blank plus at least one label"));
    }
    if let Some(bad) = labels.iter().find(|&&l| l == 0 || l >= v1) {
        return Err(Error::Input(format!("label {bad} outside 1..{v1}")));
    }
    if t == 0 {
        return Err(Error::Input(format!(
            "infeasible: {} labels over zero encoder frames (loss = +inf)",
            labels.len()
        )));
    }
    if logits.data().iter().any(|x| x.is_nan()) {
        return Err(Error::Input("NaN in transducer logits".into()));
    }
    Ok((t, u1, v1))
}

fn arc_log_probs(logits: &Tensor, labels: &[usize]) -> Result<ArcLogProbs> {
    let (t, u1, v1) = validate(logits, labels)?;
    let mut blank = vec![0.0; t * u1];
    let mut label = vec![f64::NEG_INFINITY; t * u1];
    let mut softmax = vec![0.0; t * u1 * v1];
    for (n, row) in logits.data().chunks(v1).enumerate() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        for (j, x) in row.iter().enumerate() {
            softmax[n * v1 + j] = (x - z).exp();
        }
        blank[n] = row[0] - z;
        let u = n % u1;
        if u < labels.len() {
            label[n] = row[labels[u]] - z;
        }
    }
    Ok(ArcLogProbs {
        t,
        u1,
        blank,
        label,
        softmax,
    })
}

fn forward_backward(lp: &ArcLogProbs) -> Result<Lattice> {
    let (t_len, u1) = (lp.t, lp.u1);
    let idx = |t: usize, u: usize| t * u1 + u;
    let mut alpha = vec![f64::NEG_INFINITY; t_len * u1];
    alpha[0] = 0.0;
    for t in 0..t_len {
        for u in 0..u1 {
            if t == 0 && u == 0 {
                continue;
            }
            let from_blank = if t > 0 {
                alpha[idx(t - 1, u)] + lp.blank[idx(t - 1, u)]
            } else {
                f64::NEG_INFINITY
            };
            let from_label = if u > 0 {
                alpha[idx(t, u - 1)] + lp.label[idx(t, u - 1)]
            } else {
                f64::NEG_INFINITY
            };
            alpha[idx(t, u)] = lse2(from_blank, from_label);
        }
    }
    let mut beta = vec![f64::NEG_INFINITY; t_len * u1];
    for t in (0..t_len).rev() {
        for u in (0..u1).rev() {
            beta[idx(t, u)] = if t == t_len - 1 && u == u1 - 1 {
                lp.blank[idx(t, u)]
            } else {
                let via_blank = if t + 1 < t_len {
                    beta[idx(t + 1, u)] + lp.blank[idx(t, u)]
                } else {
                    f64::NEG_INFINITY
                };
                let via_label = if u + 1 < u1 {
                    beta[idx(t, u + 1)] + lp.label[idx(t, u)]
                } else {
                    f64::NEG_INFINITY
                };
                lse2(via_blank, via_label)
            };
        }
    }
    let ll = alpha[idx(t_len - 1, u1 - 1)] + lp.blank[idx(t_len - 1, u1 - 1)];
    if !ll.is_finite() {
        return Err(Error::Input(format!(
            "log-likelihood is {ll}; logits must be finite"
        )));
    }
    Ok(Lattice {
        alpha: Tensor::from_vec(vec![t_len, u1], alpha)?,
        beta: Tensor::from_vec(vec![t_len, u1], beta)?,
        log_likelihood: ll,
    })
}

/// Lattice for `logits: T × (U+1) × (V+1)` (index 0 is blank) and labels `y`.
pub fn rnnt_lattice(logits: &Tensor, labels: &[usize]) -> Result<Lattice> {
    forward_backward(&arc_log_probs(logits, labels)?)
}

/// Gradient of `-log P(y|e)` w.r.t. the logits. Label-arc occupancies are
/// scaled by `1 + fastemit` before being pushed through the log-softmax.
pub fn lattice_gradient(
    logits: &Tensor,
    labels: &[usize],
    fastemit: f64,
) -> Result<(Lattice, Tensor, LatticeGrad)> {
    let lp = arc_log_probs(logits, labels)?;
    let lat = forward_backward(&lp)?;
    let (t_len, u1) = (lp.t, lp.u1);
    let v1 = logits.shape()[2];
    let ll = lat.log_likelihood;
    let alpha = lat.alpha.data();
    let beta = lat.beta.data();
    let mut blank_arcs = vec![0.0; t_len * u1];
    let mut label_arcs = vec![0.0; t_len * u1];
    let mut grad = vec![0.0; t_len * u1 * v1];
    for t in 0..t_len {
        for u in 0..u1 {
            let n = t * u1 + u;
            let next_blank = if t + 1 < t_len {
                beta[(t + 1) * u1 + u]
            } else if u + 1 == u1 {
                0.0
            } else {
                f64::NEG_INFINITY
            };
            let gb = (alpha[n] + lp.blank[n] + next_blank - ll).exp();
            let gy = if u + 1 < u1 {
                (alpha[n] + lp.label[n] + beta[n + 1] - ll).exp()
            } else {
                0.0
            };
            blank_arcs[n] = gb;
            label_arcs[n] = gy;
            let gy = gy * (1.0 + fastemit);
            let total = gb + gy;
            let row = &mut grad[n * v1..(n + 1) * v1];
            for (j, g) in row.iter_mut().enumerate() {
                *g = lp.softmax[n * v1 + j] * total;
            }
            row[0] -= gb;
            if u + 1 < u1 {
                row[labels[u]] -= gy;
            }
        }
    }
    Ok((
        lat,
        Tensor::from_vec(logits.shape().to_vec(), grad)?,
        LatticeGrad {
            blank_arcs: Tensor::from_vec(vec![t_len, u1], blank_arcs)?,
            label_arcs: Tensor::from_vec(vec![t_len, u1], label_arcs)?,
        },
    ))
}

/// `-log P(y|e)` recorded on the tape with the FastEmit-scaled gradient.
/// The forward value does not depend on `lambda_fe`.
pub fn fastemit_rnnt_loss<'t>(
    logits: Var<'t>,
    y: &TokenSequence,
    lambda_fe: f64,
) -> Result<(Var<'t>, Lattice)> {
    if !(lambda_fe >= 0.0) {
        return Err(Error::Input(format!(
            "FastEmit weight must be >= 0, got {lambda_fe}"
        )));
    }
    let (lat, grad, _) = lattice_gradient(&logits.value(), y.ids(), lambda_fe)?;
    let loss = logits
        .tape()
        .custom_scalar(logits, -lat.log_likelihood, grad)?;
    Ok((loss, lat))
}

/// `-log P(y|e)` over all alignments, recorded on the tape.
pub fn rnnt_loss<'t>(logits: Var<'t>, y: &TokenSequence) -> Result<(Var<'t>, Lattice)> {
    fastemit_rnnt_loss(logits, y, 0.0)
}

/// Explicit sum over every alignment path. Returns the loss and the number
/// of paths enumerated. Refuses lattices with `T + U > 12`.
pub fn brute_force_loss(logits: &Tensor, labels: &[usize]) -> Result<(f64, usize)> {
    let (t_len, u1, v1) = validate(logits, labels)?;
    if t_len + labels.len() > BRUTE_FORCE_MAX {
        return Err(Error::Contract(format!(
            "brute force refused: T + U = {} > {BRUTE_FORCE_MAX}",
            t_len + labels.len()
        )));
    }
    let logp = |t: usize, u: usize, k: usize| -> f64 {
        let row = &logits.data()[(t * u1 + u) * v1..(t * u1 + u + 1) * v1];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
        row[k] - m - z.ln()
    };
    let mut paths = Vec::new();
    fn walk(
        t: usize,
        u: usize,
        acc: f64,
        dims: (usize, usize),
        labels: &[usize],
        logp: &dyn Fn(usize, usize, usize) -> f64,
        out: &mut Vec<f64>,
    ) {
        let (t_len, u1) = dims;
        if t == t_len - 1 && u == u1 - 1 {
            out.push(acc + logp(t, u, 0));
            return;
        }
        if t + 1 < t_len {
            walk(t + 1, u, acc + logp(t, u, 0), dims, labels, logp, out);
        }
        if u + 1 < u1 {
            walk(t, u + 1, acc + logp(t, u, labels[u]), dims, labels, logp, out);
        }
    }
    walk(0, 0, 0.0, (t_len, u1), labels, &logp, &mut paths);
    let m = paths.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total = m + paths.iter().map(|p| (p - m).exp()).sum::<f64>().ln();
    Ok((-total, paths.len()))
}
