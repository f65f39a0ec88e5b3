use crate::tensor::Array;

/// Compare analytic gradients against central finite differences.
///
/// `loss_fn` must be deterministic given the parameters (freeze any
/// sampling with fixed noise before calling). Returns the maximum over all
/// parameter components of |analytic - fd| / max(1, |fd|).
pub fn grad_check<L>(
    mut loss_fn: L,
    params: &[Array],
    analytic: &[Array],
    fd_step: f64,
) -> f64
where
    L: FnMut(&[Array]) -> f64,
{
    assert_eq!(params.len(), analytic.len());
    let mut work: Vec<Array> = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        for j in 0..p.numel() {
            let orig = p.data()[j];
            work[pi].data_mut()[j] = orig + fd_step;
            let up = loss_fn(&work);
            work[pi].data_mut()[j] = orig - fd_step;
            let down = loss_fn(&work);
            work[pi].data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * fd_step);
            let a = analytic[pi].data()[j];
            let rel = (a - fd).abs() / fd.abs().max(1.0);
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}
