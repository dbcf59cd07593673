//! Loss values together with their gradients with respect to logits or
//! features, for whole batches.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::LossWeights;
use crate::corpus::Label;
use crate::diffcore::{log_softmax, softmax};
use crate::error::{Error, Result};

/// Mean softmax cross-entropy over the rows that have a target.
///
/// Returns the loss and `d loss / d logits`; rows without a target get a
/// zero gradient. With no targets at all the loss is 0.
pub fn cross_entropy(logits: ArrayView2<f64>, targets: &[Option<usize>]) -> Result<(f64, Array2<f64>)> {
    if logits.nrows() != targets.len() {
        return Err(Error::dim("cross-entropy targets", logits.nrows(), targets.len()));
    }
    let classes = logits.ncols();
    let mut grad = Array2::zeros(logits.raw_dim());
    let count = targets.iter().flatten().count();
    if count == 0 {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / count as f64;
    let mut loss = 0.0;
    for (i, t) in targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        if t >= classes {
            return Err(Error::InvalidInput(format!("target {t} outside 0..{classes}")));
        }
        let row = logits.row(i).to_vec();
        loss -= log_softmax(&row)[t];
        let p = softmax(&row);
        for (c, pc) in p.iter().enumerate() {
            grad[[i, c]] = scale * (pc - if c == t { 1.0 } else { 0.0 });
        }
    }
    Ok((loss * scale, grad))
}

/// Negotiation loss on labeled real rows, from the three classifiers'
/// logits. Returns the value and gradients for text, visual and cross logits.
pub fn negotiation(
    logits_t: ArrayView2<f64>,
    logits_v: ArrayView2<f64>,
    logits_c: ArrayView2<f64>,
    labels: &[Option<Label>],
) -> Result<(f64, [Array2<f64>; 3])> {
    let n = labels.len();
    for l in [&logits_t, &logits_v, &logits_c] {
        if l.nrows() != n {
            return Err(Error::dim("negotiation logits", n, l.nrows()));
        }
    }
    let mut grads = [
        Array2::zeros(logits_t.raw_dim()),
        Array2::zeros(logits_v.raw_dim()),
        Array2::zeros(logits_c.raw_dim()),
    ];
    let anchors: Vec<usize> = (0..n).filter(|&i| labels[i] == Some(Label::Real)).collect();
    if anchors.is_empty() {
        return Ok((0.0, grads));
    }
    let scale = 1.0 / (2.0 * anchors.len() as f64);
    let mut value = 0.0;
    for &i in &anchors {
        let pc = softmax(&logits_c.row(i).to_vec());
        let mut dpc = vec![0.0; pc.len()];
        for (k, uni) in [logits_t, logits_v].into_iter().enumerate() {
            let pu = softmax(&uni.row(i).to_vec());
            let (js, dpu, dpc_part) = js_with_grad(&pu, &pc);
            value += js;
            for (a, b) in dpc.iter_mut().zip(dpc_part) {
                *a += b;
            }
            let g = softmax_backward(&pu, &dpu);
            for (c, gc) in g.into_iter().enumerate() {
                grads[k][[i, c]] = scale * gc;
            }
        }
        for (c, gc) in softmax_backward(&pc, &dpc).into_iter().enumerate() {
            grads[2][[i, c]] = scale * gc;
        }
    }
    Ok((value * scale, grads))
}

/// JS(p‖q) and its partial derivatives in `p` and `q`.
fn js_with_grad(p: &[f64], q: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let mut value = 0.0;
    let mut dp = vec![0.0; p.len()];
    let mut dq = vec![0.0; q.len()];
    for k in 0..p.len() {
        let m = 0.5 * (p[k] + q[k]);
        if m == 0.0 {
            continue;
        }
        // d/dp of ½p·log(p/m) + ½q·log(q/m) collapses to ½·log(p/m)
        if p[k] > 0.0 {
            let lr = (p[k] / m).ln();
            value += 0.5 * p[k] * lr;
            dp[k] = 0.5 * lr;
        }
        if q[k] > 0.0 {
            let lr = (q[k] / m).ln();
            value += 0.5 * q[k] * lr;
            dq[k] = 0.5 * lr;
        }
    }
    (value, dp, dq)
}

/// Pulls a gradient on softmax outputs back to the logits.
pub(crate) fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    p.iter().zip(dp).map(|(pk, gk)| pk * (gk - dot)).collect()
}

/// Output of [`contrastive`].
#[derive(Clone, Debug)]
pub struct ContrastiveGrad {
    pub value: f64,
    pub anchors: usize,
    pub grad_t: Array2<f64>,
    pub grad_v: Array2<f64>,
}

/// Contrastive loss over the labeled rows of a batch with gradients for the
/// text and visual alignment features (before normalisation).
///
/// `weights[i][j]` is the negative weight between rows `i` and `j`. Rows
/// without a label take part neither as anchors nor as negatives.
pub fn contrastive(
    x_t: ArrayView2<f64>,
    x_v: ArrayView2<f64>,
    labels: &[Option<Label>],
    weights: &[Vec<f64>],
    w: &LossWeights,
) -> Result<ContrastiveGrad> {
    let b = labels.len();
    if x_t.nrows() != b || x_v.nrows() != b || weights.len() != b {
        return Err(Error::dim("contrastive batch", b, x_t.nrows()));
    }
    if x_t.ncols() != x_v.ncols() {
        return Err(Error::dim("contrastive feature width", x_t.ncols(), x_v.ncols()));
    }
    let (u, norm_t) = normalize_rows(x_t, w.normalize_contrastive);
    let (v, norm_v) = normalize_rows(x_v, w.normalize_contrastive);
    let labeled: Vec<usize> = (0..b).filter(|&i| labels[i].is_some()).collect();
    let anchors: Vec<usize> = (0..b).filter(|&i| labels[i] == Some(Label::Real)).collect();

    let mut gu = Array2::<f64>::zeros(u.raw_dim());
    let mut gv = Array2::<f64>::zeros(v.raw_dim());
    if anchors.is_empty() {
        return Ok(ContrastiveGrad {
            value: 0.0,
            anchors: 0,
            grad_t: gu,
            grad_v: gv,
        });
    }
    let scale = 1.0 / anchors.len() as f64;
    let mut value = 0.0;
    for &i in &anchors {
        let ui = u.row(i);
        // (row, weight, logit); the positive pair carries weight 1
        let mut terms = vec![(i, 1.0, ui.dot(&v.row(i)) / w.tau)];
        for &j in labeled.iter().filter(|&&j| j != i) {
            let wij = weights[i][j];
            if wij > 0.0 {
                terms.push((j, wij, ui.dot(&v.row(j)) / w.tau));
            }
        }
        let shift = terms.iter().map(|t| t.2).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = terms.iter().map(|&(_, wt, s)| wt * (s - shift).exp()).sum();
        value += shift + z.ln() - terms[0].2;
        for (n, &(j, wt, s)) in terms.iter().enumerate() {
            let mut ds = wt * (s - shift).exp() / z;
            if n == 0 {
                ds -= 1.0;
            }
            let ds = ds * scale / w.tau;
            gu.row_mut(i).scaled_add(ds, &v.row(j));
            gv.row_mut(j).scaled_add(ds, &u.row(i));
        }
    }
    let grad_t = if w.normalize_contrastive { normalize_backward(&u, &norm_t, gu) } else { gu };
    let grad_v = if w.normalize_contrastive { normalize_backward(&v, &norm_v, gv) } else { gv };
    Ok(ContrastiveGrad {
        value: value * scale,
        anchors: anchors.len(),
        grad_t,
        grad_v,
    })
}

/// Unit-normalises rows when asked; zero rows stay zero.
fn normalize_rows(x: ArrayView2<f64>, normalize: bool) -> (Array2<f64>, Array1<f64>) {
    let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let mut out = x.to_owned();
    if normalize {
        for (mut row, &n) in out.rows_mut().into_iter().zip(&norms) {
            if n > 0.0 {
                row /= n;
            }
        }
    }
    (out, norms)
}

/// Gradient through `u = x / ‖x‖`: `(g - (g·u) u) / ‖x‖`.
fn normalize_backward(u: &Array2<f64>, norms: &Array1<f64>, mut g: Array2<f64>) -> Array2<f64> {
    for ((mut gr, ur), &n) in g.rows_mut().into_iter().zip(u.rows()).zip(norms) {
        if n == 0.0 {
            gr.fill(0.0);
            continue;
        }
        let proj = gr.dot(&ur);
        gr.scaled_add(-proj, &ur);
        gr /= n;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{contrastive_loss, negative_weights, negotiation_loss};
    use ndarray::array;

    fn fd<F: Fn(&Array2<f64>) -> f64>(x: &Array2<f64>, f: F) -> Array2<f64> {
        let h = 1e-6;
        let mut g = Array2::zeros(x.raw_dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[[r, c]] += h;
            let mut xm = x.clone();
            xm[[r, c]] -= h;
            g[[r, c]] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())), "{a:?}\nvs\n{b:?}");
        }
    }

    #[test]
    fn cross_entropy_gradient() {
        let z = array![[0.3, -1.0, 2.0], [0.1, 0.2, 0.3], [1.0, 1.0, -1.0]];
        let t = [Some(2), None, Some(0)];
        let (_, g) = cross_entropy(z.view(), &t).unwrap();
        close(&g, &fd(&z, |x| cross_entropy(x.view(), &t).unwrap().0), 1e-7);
        assert!(g.row(1).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn negotiation_matches_value_function_and_gradient() {
        let lt = array![[0.3, -0.4], [1.0, 0.5], [-2.0, 0.1]];
        let lv = array![[1.3, 0.4], [0.0, 0.5], [0.7, 0.1]];
        let lc = array![[-0.3, 0.9], [0.2, -0.5], [0.0, 1.1]];
        let labels = [Some(Label::Real), Some(Label::Fake), Some(Label::Real)];
        let probs = |l: &Array2<f64>| {
            l.rows().into_iter().map(|r| {
                let p = softmax(&r.to_vec());
                [p[0], p[1]]
            }).collect::<Vec<_>>()
        };
        let (v, g) = negotiation(lt.view(), lv.view(), lc.view(), &labels).unwrap();
        let reference = negotiation_loss(&probs(&lt), &probs(&lv), &probs(&lc), &labels).unwrap();
        assert!((v - reference).abs() < 1e-12);
        let f = |a: &Array2<f64>, b: &Array2<f64>, c: &Array2<f64>| {
            negotiation(a.view(), b.view(), c.view(), &labels).unwrap().0
        };
        close(&g[0], &fd(&lt, |x| f(x, &lv, &lc)), 1e-6);
        close(&g[1], &fd(&lv, |x| f(&lt, x, &lc)), 1e-6);
        close(&g[2], &fd(&lc, |x| f(&lt, &lv, x)), 1e-6);
    }

    #[test]
    fn contrastive_matches_value_function_and_gradient() {
        let xt = array![[0.5, -1.0, 0.2], [1.5, 0.3, -0.7], [0.1, 0.9, 0.4], [-0.6, 0.2, 1.0]];
        let xv = array![[0.2, -0.8, 0.9], [1.0, 1.3, -0.2], [-0.4, 0.5, 0.6], [0.3, -0.2, 0.7]];
        let hv = vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.1, 0.8], vec![0.2, 0.6, 0.2], vec![0.6, 0.3, 0.1]];
        let labels = [Some(Label::Real), Some(Label::Fake), None, Some(Label::Real)];
        for normalize in [true, false] {
            let w = LossWeights { normalize_contrastive: normalize, ..LossWeights::default() };
            let weights = negative_weights(&hv, w.beta);
            let out = contrastive(xt.view(), xv.view(), &labels, &weights, &w).unwrap();
            let keep = [0usize, 1, 3];
            let rows = |m: &Array2<f64>| keep.iter().map(|&i| m.row(i).to_vec()).collect::<Vec<_>>();
            let reference = contrastive_loss(
                &rows(&xt),
                &rows(&xv),
                &[Label::Real, Label::Fake, Label::Real],
                &keep.iter().map(|&i| hv[i].clone()).collect::<Vec<_>>(),
                &w,
            )
            .unwrap();
            assert!((out.value - reference.value).abs() < 1e-12);
            assert_eq!(out.anchors, 2);
            let f = |a: &Array2<f64>, b: &Array2<f64>| contrastive(a.view(), b.view(), &labels, &weights, &w).unwrap().value;
            close(&out.grad_t, &fd(&xt, |x| f(x, &xv)), 1e-6);
            close(&out.grad_v, &fd(&xv, |x| f(&xt, x)), 1e-6);
            assert!(out.grad_t.row(2).iter().all(|v| *v == 0.0));
        }
    }
}
