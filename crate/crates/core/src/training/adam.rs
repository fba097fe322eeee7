use crate::selector::{Gradients, LoraAdapters, SelectorParams, Trainables};

/// Adam with bias correction. Only tensors named by the supplied
/// [`Trainables`] are touched.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Gradients,
    v: Gradients,
    t: i32,
}

impl Adam {
    pub fn new(params: &SelectorParams, adapters: Option<&LoraAdapters>) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Gradients::zeros(params, adapters),
            v: Gradients::zeros(params, adapters),
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(
        &mut self,
        params: &mut SelectorParams,
        adapters: Option<&mut LoraAdapters>,
        grads: &Gradients,
        trainables: Trainables,
        lr: f64,
    ) {
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);

        let mut weights = params.tensors_mut();
        if let Some(a) = adapters {
            weights.extend(a.tensors_mut());
        }
        let mut ms = self.m.params.tensors_mut();
        if let Some(a) = self.m.adapters.as_mut() {
            ms.extend(a.tensors_mut());
        }
        let mut vs = self.v.params.tensors_mut();
        if let Some(a) = self.v.adapters.as_mut() {
            vs.extend(a.tensors_mut());
        }
        let gs = grads.tensors();
        for ((((name, mut w), (_, mut m)), (_, mut v)), (gname, g)) in weights.into_iter().zip(ms).zip(vs).zip(gs) {
            debug_assert_eq!(name, gname);
            if !trainables.contains(&name) {
                continue;
            }
            ndarray::Zip::from(&mut w)
                .and(&mut m)
                .and(&mut v)
                .and(&g)
                .for_each(|w, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}
