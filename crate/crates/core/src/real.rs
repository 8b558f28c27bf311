//! Scalar abstraction so every pipeline runs in either f32 or f64.

/// Floating-point scalar used throughout the crate.
///
/// Everything numeric is generic over this trait; tests and oracles run in
/// `f64`, the single-precision mode is selected by instantiating with `f32`.
/// Conversions go through `f64` so constants and RNG streams are identical
/// across precisions.
pub trait Real: nalgebra::RealField + Copy + Default {
    /// NumPy dtype descriptor for array files (`<f4` / `<f8`).
    const NPY_DESCR: &'static str;
    /// Size of one element in bytes.
    const BYTES: usize;

    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    /// Reads one value from a little-endian byte slice of length `BYTES`.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const NPY_DESCR: &'static str = "<f4";
    const BYTES: usize = 4;

    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte slice"))
    }
}

impl Real for f64 {
    const NPY_DESCR: &'static str = "<f8";
    const BYTES: usize = 8;

    fn of_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte slice"))
    }
}
