use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

use super::params::{ArrayRole, Grads, ParamArray, ParamStore, PartitionTag};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    /// Heavy-ball momentum: `v ← μ·v + g; θ ← θ − lr·v`.
    Momentum { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn momentum(lr: f64, momentum: f64) -> Self {
        OptimizerConfig::Momentum { lr, momentum }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Momentum { lr, .. } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    pub fn with_lr(self, lr: f64) -> Self {
        match self {
            OptimizerConfig::Momentum { momentum, .. } => OptimizerConfig::Momentum { lr, momentum },
            OptimizerConfig::Adam { beta1, beta2, eps, .. } => OptimizerConfig::Adam { lr, beta1, beta2, eps },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Momentum { lr, momentum } => lr >= 0.0 && (0.0..1.0).contains(&momentum),
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                lr >= 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// First-order optimizer with its per-array moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<T> {
    pub config: OptimizerConfig,
    pub steps: u64,
    /// `<array>.m` / `<array>.v` for Adam, `<array>.velocity` for momentum.
    pub state: ParamStore<T>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer {
            config,
            steps: 0,
            state: ParamStore::new(),
        }
    }

    fn buffer(state: &mut ParamStore<T>, name: String, len: usize) -> &mut Vec<T> {
        if !state.contains(&name) {
            state.insert(
                name.clone(),
                ParamArray {
                    shape: vec![len],
                    data: vec![T::zero(); len],
                    tag: PartitionTag::Solver,
                    role: ArrayRole::Weight,
                },
            );
        }
        &mut state.get_mut(&name).expect("inserted above").data
    }

    /// Applies one update to every array that has a gradient.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        for (name, g) in grads.iter() {
            let p = params.get_mut(name)?;
            if p.data.len() != g.len() {
                return Err(Error::shape(format!("gradient length mismatch for `{name}`")));
            }
            match self.config {
                OptimizerConfig::Momentum { lr, momentum } => {
                    let (lr, mu) = (lit::<T>(lr), lit::<T>(momentum));
                    let v = Self::buffer(&mut self.state, format!("{name}.velocity"), g.len());
                    for ((w, vel), &gi) in p.data.iter_mut().zip(v.iter_mut()).zip(g) {
                        *vel = mu * *vel + gi;
                        *w -= lr * *vel;
                    }
                }
                OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let step = lit::<T>(lr * c2.sqrt() / c1);
                    let (b1, b2, e) = (lit::<T>(beta1), lit::<T>(beta2), lit::<T>(eps * c2.sqrt()));
                    {
                        let m = Self::buffer(&mut self.state, format!("{name}.m"), g.len());
                        for (mi, &gi) in m.iter_mut().zip(g) {
                            *mi = b1 * *mi + (T::one() - b1) * gi;
                        }
                    }
                    {
                        let v = Self::buffer(&mut self.state, format!("{name}.v"), g.len());
                        for (vi, &gi) in v.iter_mut().zip(g) {
                            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                        }
                    }
                    let m = &self.state.get(&format!("{name}.m"))?.data;
                    let v = &self.state.get(&format!("{name}.v"))?.data;
                    for ((w, &mi), &vi) in p.data.iter_mut().zip(m).zip(v) {
                        *w -= step * mi / (vi.sqrt() + e);
                    }
                }
            }
        }
        Ok(())
    }
}
