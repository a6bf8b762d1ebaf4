//! Fully connected layer: `y = x·w + b` with `w: (in, out)`.

use ndarray::{Array1, Array2, ArrayBase, Axis, Data, Ix1, Ix2};

use crate::Real;

pub fn dense_forward<R, Sx, Sw, Sb>(
    x: &ArrayBase<Sx, Ix2>,
    w: &ArrayBase<Sw, Ix2>,
    b: &ArrayBase<Sb, Ix1>,
) -> Array2<R>
where
    R: Real,
    Sx: Data<Elem = R>,
    Sw: Data<Elem = R>,
    Sb: Data<Elem = R>,
{
    let mut y = x.dot(w);
    y += &b.view().insert_axis(Axis(0));
    y
}

pub struct DenseGrads<R: Real> {
    pub dx: Array2<R>,
    pub dw: Option<Array2<R>>,
    pub db: Option<Array1<R>>,
}

pub fn dense_backward<R, Sx, Sw, Sy>(
    x: &ArrayBase<Sx, Ix2>,
    w: &ArrayBase<Sw, Ix2>,
    dy: &ArrayBase<Sy, Ix2>,
    param_grads: bool,
) -> DenseGrads<R>
where
    R: Real,
    Sx: Data<Elem = R>,
    Sw: Data<Elem = R>,
    Sy: Data<Elem = R>,
{
    let dx = dy.dot(&w.t());
    let (dw, db) = if param_grads {
        (Some(x.t().dot(dy)), Some(dy.sum_axis(Axis(0))))
    } else {
        (None, None)
    };
    DenseGrads { dx, dw, db }
}
