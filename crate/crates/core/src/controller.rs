use nalgebra::DVector;

use crate::error::Result;
use crate::lds::LdcPolicy;

/// An online controller: observe `y_t`, return `u_t`, learn internally.
pub trait Controller: Send {
    fn name(&self) -> &str;

    fn act(&mut self, y: &DVector<f64>) -> Result<DVector<f64>>;
}

/// Always plays zero.
#[derive(Debug, Clone)]
pub struct ZeroController {
    n: usize,
}

impl ZeroController {
    pub fn new(n: usize) -> Self {
        ZeroController { n }
    }
}

impl Controller for ZeroController {
    fn name(&self) -> &str {
        "zero"
    }

    fn act(&mut self, _y: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(DVector::zeros(self.n))
    }
}

/// A fixed LDC comparator.
#[derive(Debug, Clone)]
pub struct LdcController {
    name: String,
    policy: LdcPolicy,
}

impl LdcController {
    pub fn new(name: impl Into<String>, policy: LdcPolicy) -> Self {
        LdcController {
            name: name.into(),
            policy,
        }
    }
}

impl Controller for LdcController {
    fn name(&self) -> &str {
        &self.name
    }

    fn act(&mut self, y: &DVector<f64>) -> Result<DVector<f64>> {
        self.policy.step(y)
    }
}
