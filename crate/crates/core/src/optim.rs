//! Momentum SGD and Adam over named variables, with archivable state.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{Error, Result};
use crate::nets::archive::ParamArchive;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 3.5e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// `v <- momentum * v + (g + wd * p)`, `p <- p - lr * v`.
pub struct Sgd {
    pub config: SgdConfig,
    vars: Vec<(String, Var)>,
    velocity: BTreeMap<String, Tensor>,
}

/// Bias-corrected Adam.
pub struct Adam {
    pub config: AdamConfig,
    vars: Vec<(String, Var)>,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    pub steps: u64,
}

impl Sgd {
    pub fn new(vars: Vec<(String, Var)>, config: SgdConfig) -> Self {
        Sgd {
            config,
            vars,
            velocity: BTreeMap::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Variables without a gradient keep their value and velocity.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        let c = self.config;
        for (name, var) in &self.vars {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // Stored state must not keep the autograd graph alive.
            let g = g.detach();
            let g = if c.weight_decay != 0.0 {
                (g + (var.as_tensor().detach() * c.weight_decay)?)?
            } else {
                g
            };
            let v = match self.velocity.get(name) {
                Some(prev) => ((prev * c.momentum)? + g)?,
                None => g,
            };
            var.set(&(var.as_tensor() - (&v * c.lr)?)?)?;
            self.velocity.insert(name.clone(), v);
        }
        Ok(())
    }

    pub fn export(&self, prefix: &str, archive: &mut ParamArchive) {
        for (name, v) in &self.velocity {
            archive.insert(format!("{prefix}.velocity.{name}"), v.clone());
        }
        archive.set_meta(&format!("{prefix}.lr"), self.config.lr);
    }

    pub fn import(&mut self, prefix: &str, archive: &mut ParamArchive) -> Result<()> {
        self.velocity = take_slots(archive, &format!("{prefix}.velocity."), &self.vars)?;
        self.config.lr = archive.meta_value(&format!("{prefix}.lr"))?;
        Ok(())
    }
}

impl Adam {
    pub fn new(vars: Vec<(String, Var)>, config: AdamConfig) -> Self {
        Adam {
            config,
            vars,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            steps: 0,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        let c = self.config;
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, var) in &self.vars {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let g = &g;
            let m = match self.m.get(name) {
                Some(prev) => ((prev * c.beta1)? + (g * (1.0 - c.beta1))?)?,
                None => (g * (1.0 - c.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(prev) => ((prev * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?,
                None => (g.sqr()? * (1.0 - c.beta2))?,
            };
            let m_hat = (&m / bc1)?;
            let denom = ((&v / bc2)?.sqrt()? + c.eps)?;
            var.set(&(var.as_tensor() - ((m_hat / denom)? * c.lr)?)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }

    pub fn export(&self, prefix: &str, archive: &mut ParamArchive) {
        for (name, t) in &self.m {
            archive.insert(format!("{prefix}.m.{name}"), t.clone());
        }
        for (name, t) in &self.v {
            archive.insert(format!("{prefix}.v.{name}"), t.clone());
        }
        archive.set_meta(&format!("{prefix}.lr"), self.config.lr);
        archive.set_meta(&format!("{prefix}.steps"), self.steps);
    }

    pub fn import(&mut self, prefix: &str, archive: &mut ParamArchive) -> Result<()> {
        self.m = take_slots(archive, &format!("{prefix}.m."), &self.vars)?;
        self.v = take_slots(archive, &format!("{prefix}.v."), &self.vars)?;
        self.config.lr = archive.meta_value(&format!("{prefix}.lr"))?;
        self.steps = archive.meta_value(&format!("{prefix}.steps"))?;
        Ok(())
    }
}

fn take_slots(archive: &mut ParamArchive, prefix: &str, vars: &[(String, Var)]) -> Result<BTreeMap<String, Tensor>> {
    let names: Vec<String> = archive.names().filter(|n| n.starts_with(prefix)).cloned().collect();
    let mut out = BTreeMap::new();
    for full in names {
        let name = &full[prefix.len()..];
        let Some((_, var)) = vars.iter().find(|(n, _)| n == name) else {
            return Err(Error::State(format!("optimizer slot {full} has no matching variable")));
        };
        let t = archive.remove(&full).expect("name listed above");
        if t.dims() != var.dims() {
            return Err(Error::State(format!("optimizer slot {full} has shape {:?}", t.dims())));
        }
        out.insert(name.to_string(), t);
    }
    Ok(out)
}
