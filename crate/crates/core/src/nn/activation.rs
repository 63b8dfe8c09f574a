use super::tensor::{Scalar, Tensor4};

/// Leaky rectifier: identity for `v >= 0`, `slope * v` below.
pub fn leaky_relu<T: Scalar>(t: &Tensor4<T>, slope: T) -> Tensor4<T> {
    t.map(|v| if v >= T::ZERO { v } else { slope * v })
}

pub fn leaky_relu_in_place<T: Scalar>(t: &mut Tensor4<T>, slope: T) {
    for v in t.data_mut() {
        if *v < T::ZERO {
            *v *= slope;
        }
    }
}

/// Gradient through [`leaky_relu`], given its output.
///
/// The sign of the output equals the sign of the input for positive slopes,
/// so the pre-activation need not be kept.
pub fn leaky_relu_backward<T: Scalar>(output: &Tensor4<T>, grad: &mut Tensor4<T>, slope: T) {
    assert_eq!(output.dims(), grad.dims());
    for (g, &y) in grad.data_mut().iter_mut().zip(output.data()) {
        if y < T::ZERO {
            *g *= slope;
        }
    }
}
