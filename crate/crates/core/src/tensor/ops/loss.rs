use crate::error::{Error, Result};
use crate::tensor::tape::Op;
use crate::tensor::{Element, Tape, Tensor, Var};

/// `-[y log s(z) + (1 - y) log(1 - s(z))]` in the form `max(z, 0) - z y + log(1 + e^-|z|)`.
#[inline]
pub fn bce_term(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn bce_with_logits_value<T: Element>(logits: &[T], targets: &[T]) -> f64 {
    let total: f64 = logits.iter().zip(targets).map(|(z, y)| bce_term(z.as_f64(), y.as_f64())).sum();
    total / logits.len() as f64
}

pub(crate) fn bce_with_logits_backward<T: Element>(logits: &[T], targets: &[T], g: T) -> Vec<T> {
    let scale = g.as_f64() / logits.len() as f64;
    logits.iter().zip(targets).map(|(z, y)| T::from_f64((sigmoid(z.as_f64()) - y.as_f64()) * scale)).collect()
}

impl<T: Element> Tape<T> {
    /// Mean binary cross-entropy between `logits` and probability `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        if self.shape(logits) != targets.shape() {
            return Err(Error::Shape(format!("bce: logits {:?} vs targets {:?}", self.shape(logits), targets.shape())));
        }
        if targets.numel() == 0 {
            return Err(Error::Shape("bce over an empty tensor".into()));
        }
        if let Some(bad) = targets.data().iter().find(|y| !(y.as_f64() >= 0.0 && y.as_f64() <= 1.0)) {
            return Err(Error::Invalid(format!("bce target {bad:?} outside [0, 1]")));
        }
        let value = bce_with_logits_value(self.value(logits).data(), targets.data());
        self.push(
            Tensor::scalar(T::from_f64(value)),
            Op::BceWithLogits { logits: logits.0, targets: targets.data().to_vec() },
            "bce_with_logits",
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bce(z: f64, y: f64) -> f64 {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::from_f64(&[1], &[z]).unwrap());
        let t = Tensor::from_f64(&[1], &[y]).unwrap();
        let v = tape.bce_with_logits(l, &t).unwrap();
        tape.value(v).item()
    }

    #[test]
    fn reference_values() {
        assert!((bce(0.0, 0.5) - std::f64::consts::LN_2).abs() < 1e-12);
        let sat = bce(20.0, 1.0);
        assert!(sat.is_finite() && (sat - 2.061153620314381e-9).abs() < 1e-17);
        // Direct evaluation of the textbook formula.
        let s = 1.0 / (1.0 + (-1.5f64).exp());
        let direct = -(0.2 * s.ln() + 0.8 * (1.0 - s).ln());
        assert!((bce(1.5, 0.2) - direct).abs() < 1e-12);
        assert!((bce(1.5, 0.2) - 1.401413).abs() < 5e-7);
    }

    #[test]
    fn f32_saturation_stays_finite() {
        let mut tape = Tape::<f32>::new();
        let l = tape.constant(Tensor::new(&[2], vec![20.0, -20.0]).unwrap());
        let t = Tensor::new(&[2], vec![1.0, 0.0]).unwrap();
        let v = tape.bce_with_logits(l, &t).unwrap();
        let loss = tape.value(v).item();
        assert!(loss.is_finite() && (0.0..1e-8).contains(&loss));
    }

    #[test]
    fn out_of_range_target_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let l = tape.constant(Tensor::zeros(&[2]));
        let t = Tensor::new(&[2], vec![0.5, 1.5]).unwrap();
        assert!(matches!(tape.bce_with_logits(l, &t), Err(Error::Invalid(_))));
    }

    #[test]
    fn gradient_is_sigmoid_minus_target_over_numel() {
        let mut tape = Tape::<f64>::new();
        let l = tape.param(Tensor::from_f64(&[4], &[-2.0, 0.0, 1.0, 3.0]).unwrap());
        let t = Tensor::from_f64(&[4], &[0.0, 0.5, 1.0, 0.25]).unwrap();
        let v = tape.bce_with_logits(l, &t).unwrap();
        tape.backward(v).unwrap();
        let g = tape.grad(l).unwrap();
        for ((gv, z), y) in g.data().iter().zip([-2.0, 0.0, 1.0, 3.0]).zip([0.0, 0.5, 1.0, 0.25]) {
            assert!((gv - (sigmoid(z) - y) / 4.0).abs() < 1e-15);
        }
    }
}
