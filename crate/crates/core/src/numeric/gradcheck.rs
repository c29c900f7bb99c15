use super::optim::Parameterized;
use super::tensor::Tensor2D;
use crate::error::{CpscError, Result};

/// Central-difference gradient of `loss_fn` w.r.t. every parameter entry of
/// `target`. Values are restored exactly after each probe.
pub fn finite_diff_grad<T, F>(target: &mut T, mut loss_fn: F, h: f64) -> Result<Vec<Tensor2D>>
where
    T: Parameterized,
    F: FnMut(&T) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(CpscError::Config(format!("step size must be positive, got {h}")));
    }
    let shapes: Vec<(usize, usize)> = target.params().iter().map(|p| p.value.shape()).collect();
    let mut grads = Vec::with_capacity(shapes.len());
    for (b, &(r, c)) in shapes.iter().enumerate() {
        let mut g = Tensor2D::zeros(r, c);
        for i in 0..r * c {
            let orig = target.params()[b].value.data()[i];
            target.params_mut()[b].value.data_mut()[i] = orig + h;
            let up = loss_fn(target);
            target.params_mut()[b].value.data_mut()[i] = orig - h;
            let down = loss_fn(target);
            target.params_mut()[b].value.data_mut()[i] = orig;
            g.data_mut()[i] = (up? - down?) / (2.0 * h);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// `‖a − b‖ / max(‖a‖ + ‖b‖, floor)`. The floor keeps all-zero blocks from
/// producing 0/0.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt()
        + b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / scale.max(floor)
}
