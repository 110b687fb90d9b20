use super::state::{Gradients, ModelState};
use crate::error::{shape_err, Result};
use crate::tensor::Element;

/// Hyperparameters of one SGD step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// `v <- momentum*v + grad + weight_decay*w`, then `w <- w - lr*v`.
pub fn sgd_step<T: Element>(state: &mut ModelState<T>, grads: &Gradients<T>, sgd: Sgd) -> Result<()> {
    if grads.layers.len() != state.layers.len() {
        return Err(shape_err!("gradients cover {} layers, state has {}", grads.layers.len(), state.layers.len()));
    }
    let lr = T::from_f64(sgd.lr);
    let mu = T::from_f64(sgd.momentum);
    let wd = T::from_f64(sgd.weight_decay);
    for (i, (layer, g)) in state.layers.iter_mut().zip(&grads.layers).enumerate() {
        if g.len() != layer.params.len() {
            return Err(shape_err!("layer {i}: {} gradients for {} parameters", g.len(), layer.params.len()));
        }
        for ((w, v), g) in layer.params.iter_mut().zip(&mut layer.velocity).zip(g) {
            if w.shape() != g.shape() {
                return Err(shape_err!("layer {i}: gradient {:?} vs parameter {:?}", g.shape(), w.shape()));
            }
            for ((w, v), &g) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *v = mu * *v + g + wd * *w;
                *w = *w - lr * *v;
            }
        }
    }
    Ok(())
}
