use serde::{Deserialize, Serialize};

use crate::archive::AnyTensor;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with one moment pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T: Real> {
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    pub step: u64,
    pub lr: f64,
    pub cfg: AdamConfig,
}

impl<T: Real> OptimState<T> {
    pub fn new(params: &ParamStore<T>, lr: f64, cfg: AdamConfig) -> Self {
        let zeros = |_: ()| {
            let mut s = ParamStore::new();
            for (k, t) in params.iter() {
                s.insert(k.clone(), Tensor::zeros(t.shape()));
            }
            s
        };
        Self {
            m: zeros(()),
            v: zeros(()),
            step: 0,
            lr,
            cfg,
        }
    }

    /// One update of every parameter. Fails without touching anything if a
    /// gradient is missing, misshapen, or non-finite.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>) -> Result<()> {
        for (name, p) in params.iter() {
            let g = grads.get(name)?;
            if g.shape() != p.shape() {
                return Err(Error::Shape(format!(
                    "gradient {:?} for parameter `{name}` {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let (b1, b2) = (T::of_f64(c.beta1), T::of_f64(c.beta2));
        let bc1 = T::of_f64(1.0 - c.beta1.powi(t));
        let bc2 = T::of_f64(1.0 - c.beta2.powi(t));
        let (lr, eps) = (T::of_f64(self.lr), T::of_f64(c.eps));
        let one = T::one();
        for (name, p) in params.iter_mut() {
            let g = grads.get(name)?;
            let m = self.m.get_mut(name).expect("moment per parameter");
            let v = self.v.get_mut(name).expect("moment per parameter");
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((w, &gi), (mi, vi)) in it {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn to_tensors(&self) -> Vec<(String, AnyTensor)> {
        let mut out = Vec::new();
        for (prefix, store) in [("adam.m.", &self.m), ("adam.v.", &self.v)] {
            for (k, t) in store.iter() {
                out.push((format!("{prefix}{k}"), AnyTensor::from_tensor(t)));
            }
        }
        out
    }

    pub fn from_tensors(
        tensors: &[(String, AnyTensor)],
        params: &ParamStore<T>,
        step: u64,
        lr: f64,
        cfg: AdamConfig,
    ) -> Result<Self> {
        let mut state = Self::new(params, lr, cfg);
        state.step = step;
        for (name, t) in tensors {
            let (store, key) = if let Some(k) = name.strip_prefix("adam.m.") {
                (&mut state.m, k)
            } else if let Some(k) = name.strip_prefix("adam.v.") {
                (&mut state.v, k)
            } else {
                continue;
            };
            let slot = store
                .get_mut(key)
                .ok_or_else(|| Error::Format(format!("optimizer moment for unknown parameter `{key}`")))?;
            if slot.shape() != t.shape() {
                return Err(Error::Format(format!("optimizer moment `{name}` has the wrong shape")));
            }
            *slot = t.to();
        }
        Ok(state)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlateauConfig {
    pub patience: usize,
    pub factor: f64,
    /// Minimum relative decrease that counts as an improvement.
    pub rel_tol: f64,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            patience: 5,
            factor: 0.8,
            rel_tol: 1e-3,
            min_lr: 1e-6,
        }
    }
}

impl PlateauConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 {
            return Err(Error::Config("plateau patience must be positive".into()));
        }
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(Error::Config("plateau factor must lie in (0, 1)".into()));
        }
        if !(self.rel_tol >= 0.0 && self.min_lr > 0.0) {
            return Err(Error::Config("plateau rel_tol must be >= 0 and min_lr > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlateauEvent {
    Improved,
    Waiting,
    Reduced,
    /// A plateau was reached while the learning rate sat at its floor.
    Exhausted,
}

/// Reduce-on-plateau learning-rate schedule on a minimized metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauState {
    pub cfg: PlateauConfig,
    pub lr: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

impl PlateauState {
    pub fn new(lr: f64, cfg: PlateauConfig) -> Self {
        Self {
            cfg,
            lr: lr.max(cfg.min_lr),
            best: None,
            bad_epochs: 0,
        }
    }

    pub fn update(&mut self, metric: f64) -> PlateauEvent {
        let improved = match self.best {
            None => true,
            Some(b) => metric < b - self.cfg.rel_tol * b.abs(),
        };
        if improved {
            self.best = Some(metric);
            self.bad_epochs = 0;
            return PlateauEvent::Improved;
        }
        self.bad_epochs += 1;
        if self.bad_epochs < self.cfg.patience {
            return PlateauEvent::Waiting;
        }
        self.bad_epochs = 0;
        if self.lr <= self.cfg.min_lr {
            return PlateauEvent::Exhausted;
        }
        self.lr = (self.lr * self.cfg.factor).max(self.cfg.min_lr);
        PlateauEvent::Reduced
    }
}
