use crate::error::{AutodiffError, Result};

/// Dense row-major array of finite `f64` values with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn check_finite(op: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(AutodiffError::NonFinite { op })
    }
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, values: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let expected = numel(&shape);
        if expected != values.len() {
            return Err(AutodiffError::ValueCount {
                shape,
                expected,
                found: values.len(),
            });
        }
        check_finite("tensor", &values)?;
        Ok(Self {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self {
            shape,
            values: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(Vec::new(), vec![value])
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Adds `delta` into the gradient slot, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.values.len() {
            return Err(AutodiffError::ValueCount {
                shape: self.shape.clone(),
                expected: self.values.len(),
                found: delta.len(),
            });
        }
        let grad = self
            .grad
            .get_or_insert_with(|| vec![0.0; delta.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Replaces the stored values, keeping shape and gradient slot.
    pub fn set_values(&mut self, values: Vec<f64>) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(AutodiffError::ValueCount {
                shape: self.shape.clone(),
                expected: self.values.len(),
                found: values.len(),
            });
        }
        check_finite("tensor", &values)?;
        self.values = values;
        Ok(())
    }

    pub fn reshaped(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.values.len() {
            return Err(AutodiffError::InvalidShape {
                op: "reshape",
                shape,
                reason: format!("cannot hold {} values", self.values.len()),
            });
        }
        self.shape = shape;
        if let Some(g) = &self.grad {
            debug_assert_eq!(g.len(), self.values.len());
        }
        Ok(self)
    }
}
