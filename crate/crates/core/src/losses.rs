//! Training objectives for the three phases of the schedule.
//!
//! `||a - b||_1` is the mean absolute difference over all elements. The
//! gradient term `||∇a - ∇b||_1` is the mean over both the x and y
//! forward-difference tensors (each C×H×W, zero in the last column/row).
//! Every loss has an exact vector-Jacobian product next to it; `sign(0)` is
//! taken as 0.

use num_traits::Float;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Disparity maxima below this are floored before normalizing gradients.
pub const DISPARITY_MAX_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda: [f64; 9],
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: [0.80, 0.20, 0.85, 0.15, 0.25, 0.05, 0.50, 0.13, 0.035],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (i, &l) in self.lambda.iter().enumerate() {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "lambda{i} must be non-negative, got {l}"
                )));
            }
        }
        Ok(())
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = *self;
        for l in &mut out.lambda {
            *l *= s;
        }
        out
    }
}

/// Loss value with its weighted per-term contributions, for logging.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown<T> {
    pub total: T,
    pub terms: Vec<(&'static str, T)>,
}

impl<T: Float> LossBreakdown<T> {
    fn from_terms(terms: Vec<(&'static str, T)>) -> Self {
        let total = terms.iter().fold(T::zero(), |acc, &(_, v)| acc + v);
        LossBreakdown { total, terms }
    }
}

#[inline]
fn sign<T: Float>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

#[inline]
fn c<T: Float>(v: f64) -> T {
    T::from(v).unwrap()
}

/// Forward differences along x and y; the last column (resp. row) is zero.
pub fn image_gradient<T: Float>(t: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let s = t.shape();
    let mut gx = Tensor::zeros(s);
    let mut gy = Tensor::zeros(s);
    for ch in 0..s.channels {
        for y in 0..s.height {
            let row = t.row(ch, y);
            let out = gx.row_mut(ch, y);
            for x in 0..s.width.saturating_sub(1) {
                out[x] = row[x + 1] - row[x];
            }
            if y + 1 < s.height {
                let next = t.row(ch, y + 1);
                let out = gy.row_mut(ch, y);
                for x in 0..s.width {
                    out[x] = next[x] - row[x];
                }
            }
        }
    }
    (gx, gy)
}

/// Adjoint of [`image_gradient`].
pub fn image_gradient_backward<T: Float>(gx: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    let s = gx.shape();
    let mut out = Tensor::zeros(s);
    for ch in 0..s.channels {
        for y in 0..s.height {
            for x in 0..s.width.saturating_sub(1) {
                let g = gx.get(ch, y, x);
                out.set(ch, y, x + 1, out.get(ch, y, x + 1) + g);
                out.set(ch, y, x, out.get(ch, y, x) - g);
            }
            if y + 1 < s.height {
                for x in 0..s.width {
                    let g = gy.get(ch, y, x);
                    out.set(ch, y + 1, x, out.get(ch, y + 1, x) + g);
                    out.set(ch, y, x, out.get(ch, y, x) - g);
                }
            }
        }
    }
    out
}

/// `mean|a - b|` and its gradient with respect to `a` (the gradient for `b` is the negation).
fn l1<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    let diff = a.zip_map(b, |x, y| x - y)?;
    let n = c::<T>(diff.shape().len() as f64);
    let val = diff.data().iter().fold(T::zero(), |s, &d| s + d.abs()) / n;
    Ok((val, diff.map(|d| sign(d) / n)))
}

/// `||∇a - ∇b||_1` and its gradient with respect to `a`.
fn gradient_l1<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    let diff = a.zip_map(b, |x, y| x - y)?;
    if diff.height() < 2 || diff.width() < 2 {
        return Err(Error::InvalidArgument(format!(
            "gradient loss needs at least 2x2 images, got {}",
            diff.shape()
        )));
    }
    let (gx, gy) = image_gradient(&diff);
    let n = c::<T>(2.0 * diff.shape().len() as f64);
    let val = gx
        .data()
        .iter()
        .chain(gy.data())
        .fold(T::zero(), |s, &d| s + d.abs())
        / n;
    let back = image_gradient_backward(&gx.map(|d| sign(d) / n), &gy.map(|d| sign(d) / n));
    Ok((val, back))
}

fn axpy<T: Float>(acc: &mut Tensor<T>, a: T, x: &Tensor<T>) {
    for (o, &v) in acc.data_mut().iter_mut().zip(x.data()) {
        *o = *o + a * v;
    }
}

fn expect_all(
    op: &'static str,
    reference: &Tensor<impl Float>,
    others: &[&Tensor<impl Float>],
) -> Result<()> {
    for t in others {
        if t.shape() != reference.shape() {
            return Err(Error::shape(op, reference.shape(), t.shape()));
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Phase1Grads<T> {
    pub l: Tensor<T>,
    pub r: Tensor<T>,
    pub l_dbp: Tensor<T>,
    pub r_dbp: Tensor<T>,
}

/// Photometric and gradient l1 of both DBP predictions against their targets.
pub fn loss_phase1_grad<T: Float>(
    l: &Tensor<T>,
    r: &Tensor<T>,
    l_dbp: &Tensor<T>,
    r_dbp: &Tensor<T>,
    w: &LossWeights,
) -> Result<(LossBreakdown<T>, Phase1Grads<T>)> {
    expect_all("loss_phase1", l, &[r, l_dbp, r_dbp])?;
    let (l0, l1w) = (c::<T>(w.lambda[0]), c::<T>(w.lambda[1]));
    let (pl, gpl) = l1(l_dbp, l)?;
    let (pr, gpr) = l1(r_dbp, r)?;
    let (gl, ggl) = gradient_l1(l_dbp, l)?;
    let (gr, ggr) = gradient_l1(r_dbp, r)?;

    let mut g_l_dbp = Tensor::zeros(l.shape());
    axpy(&mut g_l_dbp, l0, &gpl);
    axpy(&mut g_l_dbp, l1w, &ggl);
    let mut g_r_dbp = Tensor::zeros(l.shape());
    axpy(&mut g_r_dbp, l0, &gpr);
    axpy(&mut g_r_dbp, l1w, &ggr);

    let breakdown = LossBreakdown::from_terms(vec![
        ("photometric", l0 * (pl + pr)),
        ("gradient", l1w * (gl + gr)),
    ]);
    Ok((
        breakdown,
        Phase1Grads {
            l: g_l_dbp.map(|v| -v),
            r: g_r_dbp.map(|v| -v),
            l_dbp: g_l_dbp,
            r_dbp: g_r_dbp,
        },
    ))
}

pub fn loss_phase1<T: Float>(
    l: &Tensor<T>,
    r: &Tensor<T>,
    l_dbp: &Tensor<T>,
    r_dbp: &Tensor<T>,
    w: &LossWeights,
) -> Result<LossBreakdown<T>> {
    Ok(loss_phase1_grad(l, r, l_dbp, r_dbp, w)?.0)
}

/// `2 / max(d)` with the max floored; treated as a constant by the gradients.
pub fn disparity_gradient_scale<T: Float>(d: &Tensor<T>) -> T {
    c::<T>(2.0) / d.max_value().max(c(DISPARITY_MAX_FLOOR))
}

/// `mean|scale * ∇d - ∇target|` over both axes, d broadcast over target channels.
fn structure_term<T: Float>(
    d: &Tensor<T>,
    target: &Tensor<T>,
    scale: T,
) -> Result<(T, Tensor<T>, Tensor<T>)> {
    if d.channels() != 1 {
        return Err(Error::shape(
            "loss_phase2",
            "1-channel disparity",
            d.shape(),
        ));
    }
    d.expect_same_grid("loss_phase2", target)?;
    let (dx, dy) = image_gradient(d);
    let (tx, ty) = image_gradient(target);
    let n = c::<T>(2.0 * target.shape().len() as f64);
    let plane = d.shape().plane();
    let mut val = T::zero();
    let mut sx = Tensor::zeros(target.shape());
    let mut sy = Tensor::zeros(target.shape());
    for ch in 0..target.channels() {
        let off = ch * plane;
        for i in 0..plane {
            let ex = scale * dx.data()[i] - tx.data()[off + i];
            let ey = scale * dy.data()[i] - ty.data()[off + i];
            val = val + ex.abs() + ey.abs();
            sx.data_mut()[off + i] = sign(ex) / n;
            sy.data_mut()[off + i] = sign(ey) / n;
        }
    }
    // target side: -∇ᵀ(sign); disparity side: scale * ∇ᵀ(sum over channels of sign)
    let g_target = image_gradient_backward(&sx, &sy).map(|v| -v);
    let mut ssx = Tensor::zeros(d.shape());
    let mut ssy = Tensor::zeros(d.shape());
    for ch in 0..target.channels() {
        for i in 0..plane {
            ssx.data_mut()[i] = ssx.data()[i] + sx.data()[ch * plane + i];
            ssy.data_mut()[i] = ssy.data()[i] + sy.data()[ch * plane + i];
        }
    }
    let g_d = image_gradient_backward(&ssx, &ssy).scale(scale);
    Ok((val / n, g_d, g_target))
}

#[derive(Clone, Debug)]
pub struct Phase2Grads<T> {
    pub l: Tensor<T>,
    pub r: Tensor<T>,
    pub l_dbp: Tensor<T>,
    pub r_dbp: Tensor<T>,
    pub d_lr: Tensor<T>,
    pub d_rl: Tensor<T>,
}

/// Phase-II objective with explicit (detached) normalization scales.
///
/// `scale_rl` multiplies `∇d_RL` (compared with `∇L`), `scale_lr` multiplies
/// `∇d_LR` (compared with `∇R`).
#[allow(clippy::too_many_arguments)]
pub fn loss_phase2_scaled_grad<T: Float>(
    l: &Tensor<T>,
    r: &Tensor<T>,
    l_dbp: &Tensor<T>,
    r_dbp: &Tensor<T>,
    d_lr: &Tensor<T>,
    d_rl: &Tensor<T>,
    scale_lr: T,
    scale_rl: T,
    w: &LossWeights,
) -> Result<(LossBreakdown<T>, Phase2Grads<T>)> {
    expect_all("loss_phase2", l, &[r, l_dbp, r_dbp])?;
    d_lr.expect_shape("loss_phase2", d_rl.shape())?;
    let (l2, l3) = (c::<T>(w.lambda[2]), c::<T>(w.lambda[3]));
    let (sl, g_drl, g_l_struct) = structure_term(d_rl, l, scale_rl)?;
    let (sr, g_dlr, g_r_struct) = structure_term(d_lr, r, scale_lr)?;
    let (pl, gpl) = l1(l_dbp, l)?;
    let (pr, gpr) = l1(r_dbp, r)?;

    let mut g_l = Tensor::zeros(l.shape());
    axpy(&mut g_l, l2, &g_l_struct);
    axpy(&mut g_l, -l3, &gpl);
    let mut g_r = Tensor::zeros(l.shape());
    axpy(&mut g_r, l2, &g_r_struct);
    axpy(&mut g_r, -l3, &gpr);

    let breakdown = LossBreakdown::from_terms(vec![
        ("structure", l2 * (sl + sr)),
        ("photometric", l3 * (pl + pr)),
    ]);
    Ok((
        breakdown,
        Phase2Grads {
            l: g_l,
            r: g_r,
            l_dbp: gpl.scale(l3),
            r_dbp: gpr.scale(l3),
            d_lr: g_dlr.scale(l2),
            d_rl: g_drl.scale(l2),
        },
    ))
}

pub fn loss_phase2_grad<T: Float>(
    l: &Tensor<T>,
    r: &Tensor<T>,
    l_dbp: &Tensor<T>,
    r_dbp: &Tensor<T>,
    d_lr: &Tensor<T>,
    d_rl: &Tensor<T>,
    w: &LossWeights,
) -> Result<(LossBreakdown<T>, Phase2Grads<T>)> {
    loss_phase2_scaled_grad(
        l,
        r,
        l_dbp,
        r_dbp,
        d_lr,
        d_rl,
        disparity_gradient_scale(d_lr),
        disparity_gradient_scale(d_rl),
        w,
    )
}

pub fn loss_phase2<T: Float>(
    l: &Tensor<T>,
    r: &Tensor<T>,
    l_dbp: &Tensor<T>,
    r_dbp: &Tensor<T>,
    d_lr: &Tensor<T>,
    d_rl: &Tensor<T>,
    w: &LossWeights,
) -> Result<LossBreakdown<T>> {
    Ok(loss_phase2_grad(l, r, l_dbp, r_dbp, d_lr, d_rl, w)?.0)
}

/// Per-branch outputs that enter the phase-III objective.
#[derive(Clone, Copy, Debug)]
pub struct BranchTerms<'a, T> {
    pub refined: &'a Tensor<T>,
    pub blended: &'a Tensor<T>,
    pub v: &'a Tensor<T>,
    /// Consistency confidence of this branch's disparity.
    pub c: &'a Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct BranchGrads<T> {
    pub refined: Tensor<T>,
    pub blended: Tensor<T>,
    pub v: Tensor<T>,
    pub c: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Phase3Grads<T> {
    pub l: Tensor<T>,
    pub r: Tensor<T>,
    /// Branch synthesizing the right view from the left input.
    pub lr: BranchGrads<T>,
    /// Branch synthesizing the left view from the right input.
    pub rl: BranchGrads<T>,
}

struct BranchLoss<T> {
    refine: T,
    refine_grad: T,
    fin: T,
    fin_grad: T,
    conf: T,
    grads: BranchGrads<T>,
    target: Tensor<T>,
}

fn branch_phase3<T: Float>(
    target: &Tensor<T>,
    b: &BranchTerms<'_, T>,
    w: &LossWeights,
) -> Result<BranchLoss<T>> {
    expect_all("loss_phase3", target, &[b.refined, b.blended])?;
    b.v.expect_shape("loss_phase3", b.c.shape())?;
    if b.v.channels() != 1 {
        return Err(Error::shape(
            "loss_phase3",
            "1-channel confidence",
            b.v.shape(),
        ));
    }
    target.expect_same_grid("loss_phase3", b.v)?;
    let lam = |i: usize| c::<T>(w.lambda[i]);

    let (refine, g_ref_p) = l1(b.refined, target)?;
    let (refine_grad, g_ref_g) = gradient_l1(b.refined, target)?;
    let (fin, g_fin_p) = l1(b.blended, target)?;
    let (fin_grad, g_fin_g) = gradient_l1(b.blended, target)?;
    let one_minus_c = b.c.map(|v| T::one() - v);
    let (conf, g_v) = l1(b.v, &one_minus_c)?;

    let mut g_ref = Tensor::zeros(target.shape());
    axpy(&mut g_ref, lam(4), &g_ref_p);
    axpy(&mut g_ref, lam(5), &g_ref_g);
    let mut g_fin = Tensor::zeros(target.shape());
    axpy(&mut g_fin, lam(6), &g_fin_p);
    axpy(&mut g_fin, lam(7), &g_fin_g);
    let mut g_target = g_ref.map(|v| -v);
    axpy(&mut g_target, -T::one(), &g_fin);

    let g_v = g_v.scale(lam(8));
    Ok(BranchLoss {
        refine: lam(4) * refine,
        refine_grad: lam(5) * refine_grad,
        fin: lam(6) * fin,
        fin_grad: lam(7) * fin_grad,
        conf: lam(8) * conf,
        // d/dC of |V - (1 - C)| equals d/dV
        grads: BranchGrads {
            refined: g_ref,
            blended: g_fin,
            c: g_v.clone(),
            v: g_v,
        },
        target: g_target,
    })
}

/// Phase-III objective: refiner, final-prediction and confidence-regression terms.
pub fn loss_phase3_grad<T: Float>(
    l: &Tensor<T>,
    r: &Tensor<T>,
    lr: &BranchTerms<'_, T>,
    rl: &BranchTerms<'_, T>,
    w: &LossWeights,
) -> Result<(LossBreakdown<T>, Phase3Grads<T>)> {
    l.expect_shape("loss_phase3", r.shape())?;
    let a = branch_phase3(r, lr, w)?;
    let b = branch_phase3(l, rl, w)?;
    let breakdown = LossBreakdown::from_terms(vec![
        ("refiner", a.refine + b.refine),
        ("refiner_gradient", a.refine_grad + b.refine_grad),
        ("final", a.fin + b.fin),
        ("final_gradient", a.fin_grad + b.fin_grad),
        ("confidence", a.conf + b.conf),
    ]);
    Ok((
        breakdown,
        Phase3Grads {
            l: b.target,
            r: a.target,
            lr: a.grads,
            rl: b.grads,
        },
    ))
}

pub fn loss_phase3<T: Float>(
    l: &Tensor<T>,
    r: &Tensor<T>,
    lr: &BranchTerms<'_, T>,
    rl: &BranchTerms<'_, T>,
    w: &LossWeights,
) -> Result<LossBreakdown<T>> {
    Ok(loss_phase3_grad(l, r, lr, rl, w)?.0)
}
