use ndarray::NdFloat;

/// Floating-point element type for all tensors in the crate.
///
/// Production code runs on `f32` (the checkpoint format stores 32-bit
/// floats); gradient-checking tests instantiate the same code on `f64`
/// so central differences have enough precision to be meaningful.
pub trait Real: NdFloat + std::iter::Sum {
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
