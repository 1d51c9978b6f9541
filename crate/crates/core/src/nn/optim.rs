use serde::{Deserialize, Serialize};

use super::{Gradients, Layer, Mlp, NnError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Applied,
    /// Gradients contained NaN or infinity; parameters and moments untouched.
    Skipped { reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Layer>,
    v: Vec<Layer>,
    t: u64,
}

impl Adam {
    pub fn new(net: &Mlp, lr: f64) -> Self {
        let zeros: Vec<Layer> = net.layers.iter().map(Layer::zeros_like).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One descent step on `net` (gradients are of a loss to minimize).
    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) -> Result<StepOutcome, NnError> {
        check_shapes(net, grads)?;
        if !grads.is_finite() {
            return Ok(StepOutcome::Skipped { reason: "non-finite gradient".into() });
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (lr, eps) = (self.lr, self.eps);
        for ((layer, g), (m, v)) in net.layers.iter_mut().zip(&grads.layers).zip(self.m.iter_mut().zip(&mut self.v)) {
            let params = layer.weight.iter_mut().chain(layer.bias.iter_mut());
            let gs = g.weight.iter().chain(g.bias.iter());
            let ms = m.weight.iter_mut().chain(m.bias.iter_mut());
            let vs = v.weight.iter_mut().chain(v.bias.iter_mut());
            for (((p, g), m), v) in params.zip(gs).zip(ms).zip(vs) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        net.touch();
        debug_assert!(net.is_finite());
        Ok(StepOutcome::Applied)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Adam(Adam),
    Sgd { lr: f64 },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, net: &Mlp, lr: f64) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(net, lr)),
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
        }
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) -> Result<StepOutcome, NnError> {
        match self {
            Optimizer::Adam(adam) => adam.step(net, grads),
            Optimizer::Sgd { lr } => {
                check_shapes(net, grads)?;
                if !grads.is_finite() {
                    return Ok(StepOutcome::Skipped { reason: "non-finite gradient".into() });
                }
                for (layer, g) in net.layers.iter_mut().zip(&grads.layers) {
                    layer.weight.scaled_add(-*lr, &g.weight);
                    layer.bias.scaled_add(-*lr, &g.bias);
                }
                net.touch();
                Ok(StepOutcome::Applied)
            }
        }
    }
}

fn check_shapes(net: &Mlp, grads: &Gradients) -> Result<(), NnError> {
    let ok = net.layers.len() == grads.layers.len()
        && net
            .layers
            .iter()
            .zip(&grads.layers)
            .all(|(l, g)| l.weight.dim() == g.weight.dim() && l.bias.len() == g.bias.len());
    if ok {
        Ok(())
    } else {
        Err(NnError::Shape("gradients do not match the network".into()))
    }
}

/// Polyak averaging: `target <- tau * online + (1 - tau) * target`.
pub fn soft_update(target: &mut Mlp, online: &Mlp, tau: f64) -> Result<(), NnError> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(NnError::Shape(format!("tau must be in (0, 1], got {tau}")));
    }
    let same = target.layers.len() == online.layers.len()
        && target.layers.iter().zip(&online.layers).all(|(a, b)| a.weight.dim() == b.weight.dim());
    if !same {
        return Err(NnError::Shape("target and online networks differ in shape".into()));
    }
    for (t, o) in target.layers.iter_mut().zip(&online.layers) {
        if tau == 1.0 {
            t.weight.assign(&o.weight);
            t.bias.assign(&o.bias);
        } else {
            t.weight.zip_mut_with(&o.weight, |t, o| *t = tau * o + (1.0 - tau) * *t);
            t.bias.zip_mut_with(&o.bias, |t, o| *t = tau * o + (1.0 - tau) * *t);
        }
    }
    target.touch();
    Ok(())
}
