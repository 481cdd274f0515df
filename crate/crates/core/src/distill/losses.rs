use rand_distr::{Distribution, Normal};

use super::heads::BoundHintHead;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{softmax, Scalar, Tensor, Var};

fn batch_of<T: Scalar>(z: &Var<'_, T>, op: &'static str) -> Result<usize> {
    match z.shape()[..] {
        [b, _] => Ok(b),
        ref s => Err(Error::dim(op, "rank", 2, s.len())),
    }
}

fn same_shape(op: &'static str, what: &str, want: &[usize], got: &[usize]) -> Result<()> {
    if want != got {
        return Err(Error::dim(op, what.to_string(), format!("{want:?}"), format!("{got:?}")));
    }
    Ok(())
}

/// `−Σ_j p_j log σ_j(z/τ)`, averaged over the batch. `target` is constant.
pub fn soft_cross_entropy<'t, T: Scalar>(z: Var<'t, T>, target: &Tensor<T>, tau: f64) -> Result<Var<'t, T>> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("temperature must be > 0, got {tau}")));
    }
    let b = batch_of(&z, "soft_cross_entropy")?;
    same_shape("soft_cross_entropy", "target", &z.shape(), target.shape())?;
    let logp = z.scale(1.0 / tau).log_softmax()?;
    Ok(logp
        .mul(z.tape().constant(target.clone()))?
        .sum()
        .scale(-1.0 / b.max(1) as f64))
}

/// Cross-entropy against one-hot rows, averaged over the batch.
pub fn loss_ce<'t, T: Scalar>(z_s: Var<'t, T>, y: &Tensor<T>) -> Result<Var<'t, T>> {
    if y.ndim() == 2 {
        for (i, row) in y.rows().enumerate() {
            let ones = row.iter().filter(|&&v| v == T::one()).count();
            let zeros = row.iter().filter(|&&v| v == T::zero()).count();
            if ones != 1 || ones + zeros != row.len() {
                return Err(Error::Contract(format!("label row {i} is not one-hot")));
            }
        }
    }
    soft_cross_entropy(z_s, y, 1.0)
}

/// `−τ² Σ_j σ_j(z_t/τ) log σ_j(z_s/τ)`, averaged over the batch. This is
/// the teacher-to-student cross-entropy; it differs from the KL divergence
/// by the teacher entropy, a constant, so the gradients coincide.
pub fn loss_kl<'t, T: Scalar>(z_s: Var<'t, T>, z_t: &Tensor<T>, tau: f64) -> Result<Var<'t, T>> {
    let p = softmax(z_t, tau)?;
    Ok(soft_cross_entropy(z_s, &p, tau)?.scale(tau * tau))
}

/// `½‖f_t − r(f_s)‖²` summed over feature elements and averaged over the
/// batch. `f_t` is constant.
pub fn loss_hint<'t, T: Scalar>(
    f_s: Var<'t, T>,
    f_t: &Tensor<T>,
    head: &BoundHintHead<'t, T>,
) -> Result<Var<'t, T>> {
    let mapped = head.apply(f_s)?;
    if mapped.shape() != f_t.shape() {
        return Err(Error::Contract(format!(
            "hint head maps to {:?} but the teacher feature is {:?}",
            mapped.shape(),
            f_t.shape()
        )));
    }
    let b = f_t.shape().first().copied().unwrap_or(1).max(1);
    let diff = mapped.sub(f_s.tape().constant(f_t.clone()))?;
    Ok(diff.mul(diff)?.sum().scale(0.5 / b as f64))
}

/// The critic `h(a,b) = e^{a·b/τ} / (e^{a·b/τ} + N/M)` at a given dot product.
pub fn crd_critic(dot: f64, tau: f64, n: usize, m: usize) -> f64 {
    1.0 / (1.0 + (n as f64 / m as f64) * (-dot / tau).exp())
}

/// Contrastive loss `−log h(s, t⁺) − Σ_j log(1 − h(s, t⁻_j))`, averaged over
/// the batch. `s_emb` and `t_pos` are `B×d`; `t_negs` holds the `N`
/// negatives of anchor `i` in rows `i·N .. (i+1)·N`. `m` is the training-set
/// size.
///
/// Evaluated as softplus terms, which is exact and finite for any inputs:
/// `−log h = softplus(ln(N/M) − d/τ)`, `−log(1 − h) = softplus(d/τ − ln(N/M))`.
pub fn loss_crd<'t, T: Scalar>(
    s_emb: Var<'t, T>,
    t_pos: Var<'t, T>,
    t_negs: Var<'t, T>,
    tau: f64,
    m: usize,
) -> Result<Var<'t, T>> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("CRD temperature must be > 0, got {tau}")));
    }
    let b = batch_of(&s_emb, "loss_crd")?;
    same_shape("loss_crd", "t_pos", &s_emb.shape(), &t_pos.shape())?;
    let neg_shape = t_negs.shape();
    let d = s_emb.shape()[1];
    if b == 0 || neg_shape.len() != 2 || neg_shape[1] != d || neg_shape[0] == 0 || !neg_shape[0].is_multiple_of(b) {
        return Err(Error::dim(
            "loss_crd",
            "t_negs",
            format!("[B·N, {d}] with B = {b}"),
            format!("{neg_shape:?}"),
        ));
    }
    let n = neg_shape[0] / b;
    if m == 0 {
        return Err(Error::Parameter("training-set size M must be >= 1".into()));
    }
    let c = (n as f64 / m as f64).ln();
    let pos = s_emb.mul(t_pos)?.sum_rows()?;
    let neg = s_emb.repeat_rows(n)?.mul(t_negs)?.sum_rows()?;
    let pull = pos.scale(-1.0 / tau).add_scalar(c).softplus().sum();
    let push = neg.scale(1.0 / tau).add_scalar(-c).softplus().sum();
    Ok(pull.add(push)?.scale(1.0 / b as f64))
}

/// Crafted soft targets: `softmax((y + ε)/τ)` with `ε ~ N(0, noise_sd²)`.
pub fn make_pseudo_soft_labels<T: Scalar>(
    y: &Tensor<T>,
    noise_sd: f64,
    tau: f64,
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    let noisy = if noise_sd > 0.0 {
        let normal = Normal::new(0.0, noise_sd)
            .map_err(|e| Error::Parameter(format!("noise_sd: {e}")))?;
        let data = y
            .data()
            .iter()
            .map(|&v| v + T::from_f64_lossy(normal.sample(rng)))
            .collect();
        Tensor::new(y.shape().to_vec(), data)?
    } else {
        y.clone()
    };
    softmax(&noisy, tau)
}
