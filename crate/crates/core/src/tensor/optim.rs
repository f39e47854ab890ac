use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
}

/// Stable handle of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered, named parameter set owned by one model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Parameter {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Registers every parameter as a graph leaf. Frozen bindings never
    /// receive gradients.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    graph.variable(p.value.clone())
                } else {
                    graph.constant(p.value.clone())
                }
            })
            .collect()
    }

    /// Zero-filled gradient buffers matching every parameter.
    pub fn zero_grads(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect()
    }
}

fn check_grads(params: &ParamStore, grads: &[Tensor]) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(Error::shape("optimizer step", p.value.shape(), g.shape()));
        }
        if g.has_non_finite() {
            return Err(Error::Numerical(format!(
                "non-finite gradient for parameter '{}'",
                p.name
            )));
        }
    }
    Ok(())
}

/// Plain gradient descent with L2 weight decay: `p -= lr * (g + wd * p)`.
pub fn sgd_step(params: &mut ParamStore, grads: &[Tensor], lr: f64, weight_decay: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Domain(format!("learning rate must be positive, got {lr}")));
    }
    check_grads(params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        for (v, gv) in p.value.data_mut().iter_mut().zip(g.data()) {
            *v -= lr * (gv + weight_decay * *v);
        }
    }
    Ok(())
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Domain(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        check_grads(params, grads)?;
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, gv)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gv;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gv * gv;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= self.lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * *w);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_params() {
        let mut ps = ParamStore::new();
        ps.add("w", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let before = ps.clone();
        let zeros = ps.zero_grads();
        sgd_step(&mut ps, &zeros, 0.1, 0.0).unwrap();
        assert_eq!(ps, before);
    }

    #[test]
    fn unit_gradient_step() {
        let mut ps = ParamStore::new();
        let id = ps.add("w", Tensor::scalar(1.0));
        sgd_step(&mut ps, &[Tensor::scalar(1.0)], 0.1, 0.0).unwrap();
        assert!((ps.get(id).data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut ps = ParamStore::new();
        ps.add("w", Tensor::scalar(1.0));
        let err = sgd_step(&mut ps, &[Tensor::scalar(f64::NAN)], 0.1, 0.0).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
        assert!(err.to_string().contains("'w'"));
        let mut adam = AdamW::new(0.1, 0.0);
        assert!(adam.step(&mut ps, &[Tensor::scalar(f64::INFINITY)]).is_err());
        assert_eq!(ps.get(ParamId(0)).data()[0], 1.0);
    }

    #[test]
    fn sgd_converges_on_quadratic() {
        // f(w) = 0.5 * sum (w - target)^2, optimum at target.
        let target = [3.0, -1.5];
        let mut ps = ParamStore::new();
        let id = ps.add("w", Tensor::zeros(&[2]));
        for _ in 0..100 {
            let g: Vec<f64> = ps.get(id).data().iter().zip(target).map(|(w, t)| w - t).collect();
            sgd_step(&mut ps, &[Tensor::new(&[2], g).unwrap()], 0.5, 0.0).unwrap();
        }
        for (w, t) in ps.get(id).data().iter().zip(target) {
            assert!((w - t).abs() < 1e-6);
        }
    }

    #[test]
    fn adamw_is_deterministic_and_descends() {
        let run = || {
            let mut ps = ParamStore::new();
            let id = ps.add("w", Tensor::new(&[2], vec![2.0, -2.0]).unwrap());
            let mut opt = AdamW::new(0.05, 1e-7);
            for _ in 0..400 {
                let g = ps.get(id).map(|w| 2.0 * (w - 0.5));
                opt.step(&mut ps, &[g]).unwrap();
            }
            ps.get(id).clone()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.data().iter().all(|w| (w - 0.5).abs() < 1e-2), "{a:?}");
    }
}
