//! Scalar abstraction: training runs in f32, verification suites in f64.

use ndarray::NdFloat;

pub trait Real: NdFloat {
    /// Tag stored in checkpoints.
    const DTYPE_TAG: u8;

    fn from_f(x: f64) -> Self;
    fn to_f(self) -> f64;
}

impl Real for f32 {
    const DTYPE_TAG: u8 = 1;

    fn from_f(x: f64) -> Self {
        x as f32
    }

    fn to_f(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const DTYPE_TAG: u8 = 2;

    fn from_f(x: f64) -> Self {
        x
    }

    fn to_f(self) -> f64 {
        self
    }
}
