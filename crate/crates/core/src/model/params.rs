use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered, named collection of parameter arrays.
///
/// Two sets with the same architecture yield their arrays in the same order,
/// which is what the optimizer, the EMA update and checkpointing rely on.
pub trait ParamSet {
    fn arrays(&self) -> Vec<(String, ArrayViewD<'_, f64>)>;
    fn arrays_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>>;

    fn num_params(&self) -> usize {
        self.arrays().iter().map(|(_, a)| a.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.arrays()
            .iter()
            .all(|(_, a)| a.iter().all(|v| v.is_finite()))
    }

    /// Euclidean norm over every element of every array.
    fn l2_norm(&self) -> f64 {
        self.arrays()
            .iter()
            .map(|(_, a)| a.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

pub(crate) fn check_same_shapes(a: &impl ParamSet, b: &impl ParamSet) -> Result<()> {
    let sa = a.arrays();
    let sb = b.arrays();
    if sa.len() != sb.len() {
        return Err(Error::shape(format!(
            "parameter sets hold {} and {} arrays",
            sa.len(),
            sb.len()
        )));
    }
    for ((na, va), (_, vb)) in sa.iter().zip(&sb) {
        if va.shape() != vb.shape() {
            return Err(Error::shape(format!(
                "`{na}` has shape {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
    }
    Ok(())
}

/// Fully connected layer `y = x W + b` with `W` of shape `(in, out)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    /// Weights uniform in `±sqrt(3 / fan_in)` (unit-variance fan-in scaling), zero bias.
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let a = (3.0 / fan_in as f64).sqrt();
        Self {
            weight: Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-a..a)),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.fan_in(), self.fan_out())
    }
}

impl ParamSet for Dense {
    fn arrays(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        vec![
            ("weight".into(), self.weight.view().into_dyn()),
            ("bias".into(), self.bias.view().into_dyn()),
        ]
    }

    fn arrays_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        vec![
            self.weight.view_mut().into_dyn(),
            self.bias.view_mut().into_dyn(),
        ]
    }
}

/// `target <- target + scale * source`, array by array.
pub fn axpy<P: ParamSet>(target: &mut P, scale: f64, source: &P) {
    for (mut t, (_, s)) in target.arrays_mut().into_iter().zip(source.arrays()) {
        Zip::from(&mut t).and(&s).for_each(|t, &s| *t += scale * s);
    }
}

/// Multiply every element by `scale`.
pub fn scale_params<P: ParamSet>(target: &mut P, scale: f64) {
    for mut t in target.arrays_mut() {
        t.mapv_inplace(|v| v * scale);
    }
}
