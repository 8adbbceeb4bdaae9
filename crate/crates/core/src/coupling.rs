//! Feature coupling: spatial attention maps pool the CNN feature map into the
//! retrieval descriptor.

use crate::backbone;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Var};

/// `[k, h, w]` maps from the fused map `m: [d, h, w]` through a bias-free 1x1 kernel `[k, d, 1, 1]`.
pub fn attention_project<T: Scalar>(t: &mut Tape<T>, m: Var, kernel: Var) -> Result<Var> {
    backbone::project(t, m, kernel, None)
}

/// Frobenius products of every feature channel with every attention map.
/// Output is `[k * c]`, attention-major: entry `i * c + ch` pairs map `i` with channel `ch`.
pub fn couple<T: Scalar>(t: &mut Tape<T>, f: Var, a: Var) -> Result<Var> {
    let [c, h, w] = t.value(f).dims3("couple")?;
    let [k, ha, wa] = t.value(a).dims3("couple")?;
    if (h, w) != (ha, wa) {
        return Err(Error::shape("couple", t.shape(f), t.shape(a)));
    }
    let f2 = t.reshape(f, &[c, h * w])?;
    let a2 = t.reshape(a, &[k, h * w])?;
    let prod = t.matmul_nt(a2, f2)?;
    t.reshape(prod, &[k * c])
}

/// Unit-length copy of `f`; a zero vector is rejected.
pub fn normalize<T: Scalar>(t: &mut Tape<T>, f: Var) -> Result<Var> {
    t.normalize_rows(f)
}

/// Plain-vector version of [`normalize`].
pub fn normalized<T: Scalar>(f: &[T]) -> Result<Vec<T>> {
    let n = f.iter().map(|&v| v * v).sum::<T>().sqrt();
    if !(n > T::zero()) || !n.is_finite() {
        return Err(Error::DegenerateDescriptor);
    }
    Ok(f.iter().map(|&v| v / n).collect())
}
