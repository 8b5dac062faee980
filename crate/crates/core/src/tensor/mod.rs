//! Dense row-major tensors and the reverse-mode tape that differentiates
//! programs built from a fixed set of primitives.

mod tape;

pub mod gradcheck;

pub use tape::{Op, Tape, Var};

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense multi-dimensional array, row-major, cheap to clone.
///
/// A tensor with no tape attachment is immutable after construction and safe
/// to share across threads; gradients live on the [`Tape`], not here.
#[derive(Debug, Clone)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<S>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} implies {} elements, got {}", shape, numel(&shape), data.len()),
            ));
        }
        Ok(Self { shape, data: Arc::new(data) })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self { shape, data: Arc::new(vec![S::zero(); n]) }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: S) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self { shape, data: Arc::new(vec![value; n]) }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: S) -> Self {
        Self { shape: vec![], data: Arc::new(vec![value]) }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> S) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self { shape, data: Arc::new((0..n).map(&mut f).collect()) }
    }

    /// I.i.d. standard-normal entries drawn from `rng`.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| S::standard_normal(rng))
    }

    /// I.i.d. uniform entries in [-1, 1).
    pub fn rand_sym<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| S::uniform_sym(rng))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    /// The single value of a rank-0 / one-element tensor.
    pub fn item(&self) -> Result<S> {
        if !self.is_scalar() {
            return Err(Error::shape("item", format!("expected scalar, got shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| f(x)).collect()),
        }
    }

    fn zip(&self, other: &Self, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(op, format!("shapes {:?} and {:?} differ", self.shape, other.shape)));
        }
        let data = self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape.clone(), data: Arc::new(data) })
    }

    pub fn add_t(&self, other: &Self) -> Result<Self> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub_t(&self, other: &Self) -> Result<Self> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul_t(&self, other: &Self) -> Result<Self> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: S) -> Self {
        self.map(|x| x * c)
    }

    /// self + c * other, the workhorse of the reverse-process updates.
    pub fn add_scaled(&self, c: S, other: &Self) -> Result<Self> {
        self.zip(other, "add_scaled", |a, b| a + c * b)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Slice `[start, start+len)` of the last axis, copying.
    pub fn slice_last(&self, start: usize, len: usize) -> Result<Self> {
        let rank = self.shape.len();
        if rank == 0 {
            return Err(Error::shape("slice_last", "cannot slice a scalar".to_string()));
        }
        let t = self.shape[rank - 1];
        if start + len > t {
            return Err(Error::shape(
                "slice_last",
                format!("range {}..{} out of bounds for axis length {}", start, start + len, t),
            ));
        }
        let rows = self.data.len() / t;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            let base = r * t + start;
            out.extend_from_slice(&self.data[base..base + len]);
        }
        let mut shape = self.shape.clone();
        shape[rank - 1] = len;
        Tensor::from_vec(shape, out)
    }

    /// Mutable access to the underlying buffer (clones if shared). Used by
    /// the optimizer; tensors on a tape are never mutated.
    pub fn data_mut(&mut self) -> &mut [S] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    /// Write as raw little-endian f32 in `<base>.f32` with the shape header
    /// in the `<base>.shape` sidecar.
    pub fn save(&self, base: &Path) -> Result<()> {
        let dims: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
        std::fs::write(base.with_extension("shape"), format!("shape: {}\n", dims.join(",")))?;
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for x in self.data.iter() {
            bytes.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
        let mut f = std::fs::File::create(base.with_extension("f32"))?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(base: &Path) -> Result<Self> {
        let header = std::fs::read_to_string(base.with_extension("shape"))?;
        let line = header.lines().next().unwrap_or("");
        let rest = line
            .strip_prefix("shape:")
            .ok_or_else(|| Error::Data(format!("{}: missing 'shape:' header", base.display())))?
            .trim();
        let shape: Vec<usize> = if rest.is_empty() {
            vec![]
        } else {
            rest.split(',')
                .map(|d| {
                    d.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Data(format!("{}: bad dimension '{}'", base.display(), d)))
                })
                .collect::<Result<_>>()?
        };
        let mut bytes = Vec::new();
        std::fs::File::open(base.with_extension("f32"))?.read_to_end(&mut bytes)?;
        let expect = numel(&shape);
        if bytes.len() != expect * 4 {
            return Err(Error::Data(format!(
                "{}: expected {} f32 values ({} bytes), file has {} bytes",
                base.display(),
                expect,
                expect * 4,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| S::of_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        Tensor::from_vec(shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn from_vec_rejects_length_mismatch() {
        assert!(Tensor::<f64>::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn slice_last_takes_time_suffix() {
        let t = Tensor::<f64>::from_vec(vec![2, 4], (0..8).map(|x| x as f64).collect()).unwrap();
        let s = t.slice_last(2, 2).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = std::env::temp_dir().join(format!("stgcast-tensor-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = Tensor::<f32>::randn(vec![3, 5], &mut rng);
        let base = dir.join("w");
        t.save(&base).unwrap();
        let u = Tensor::<f32>::load(&base).unwrap();
        assert_eq!(t.shape(), u.shape());
        assert_eq!(t.data(), u.data());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn scalar_save_load() {
        let dir = std::env::temp_dir().join(format!("stgcast-scalar-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let t = Tensor::<f64>::scalar(1.5);
        let base = dir.join("s");
        t.save(&base).unwrap();
        let u = Tensor::<f64>::load(&base).unwrap();
        assert!(u.is_scalar());
        assert_eq!(u.item().unwrap(), 1.5);
        std::fs::remove_dir_all(&dir).ok();
    }
}
