use crate::error::{Error, Result};

use super::{Tape, Tensor, Var};

fn same_shape(tape: &Tape, a: Var, b: Var, op: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::Dimension(format!(
            "{op}: shapes {:?} and {:?} differ",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

impl Tape {
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let out = Tensor::new(xt.shape(), xt.data().iter().map(|&v| v.max(0.0)).collect())?;
        self.record(
            "relu",
            out,
            &[x],
            Box::new(|ctx| {
                let g = ctx
                    .grad_out
                    .iter()
                    .zip(ctx.inputs[0].data())
                    .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "add")?;
        let (at, bt) = (self.value(a), self.value(b));
        let data = at.data().iter().zip(bt.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(at.shape(), data)?;
        self.record(
            "add",
            out,
            &[a, b],
            Box::new(|ctx| {
                let pass = |need: bool| need.then(|| ctx.grad_out.to_vec());
                vec![pass(ctx.needs[0]), pass(ctx.needs[1])]
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mul")?;
        let (at, bt) = (self.value(a), self.value(b));
        let data = at.data().iter().zip(bt.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(at.shape(), data)?;
        self.record(
            "mul",
            out,
            &[a, b],
            Box::new(|ctx| {
                let scaled = |other: &Tensor| -> Vec<f64> {
                    ctx.grad_out
                        .iter()
                        .zip(other.data())
                        .map(|(g, o)| g * o)
                        .collect()
                };
                vec![
                    ctx.needs[0].then(|| scaled(ctx.inputs[1])),
                    ctx.needs[1].then(|| scaled(ctx.inputs[0])),
                ]
            }),
        )
    }

    /// Natural log; every input must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        if let Some((i, v)) = xt.data().iter().enumerate().find(|(_, v)| **v <= 0.0) {
            return Err(Error::Domain(format!(
                "log of non-positive value {v} at index {i}"
            )));
        }
        let out = Tensor::new(xt.shape(), xt.data().iter().map(|v| v.ln()).collect())?;
        self.record(
            "log",
            out,
            &[x],
            Box::new(|ctx| {
                let g = ctx
                    .grad_out
                    .iter()
                    .zip(ctx.inputs[0].data())
                    .map(|(g, v)| g / v)
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let out = Tensor::new(xt.shape(), xt.data().iter().map(|v| v.exp()).collect())?;
        self.record(
            "exp",
            out,
            &[x],
            Box::new(|ctx| {
                let g = ctx
                    .grad_out
                    .iter()
                    .zip(ctx.output.data())
                    .map(|(g, y)| g * y)
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let xt = self.value(x);
        let out = Tensor::new(xt.shape(), xt.data().iter().map(|v| v * factor).collect())?;
        self.record(
            "scale",
            out,
            &[x],
            Box::new(move |ctx| vec![Some(ctx.grad_out.iter().map(|g| g * factor).collect())]),
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        self.record(
            "sum",
            Tensor::scalar(total),
            &[x],
            Box::new(|ctx| vec![Some(vec![ctx.grad_out[0]; ctx.inputs[0].numel()])]),
        )
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::Dimension("mean of an empty tensor".into()));
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Adds a per-channel bias of shape `[C]` to an `[N,C,H,W]` tensor.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("add_channel_bias input")?;
        if self.shape(bias) != [c] {
            return Err(Error::Dimension(format!(
                "bias shape {:?} does not match {c} channels of input {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let plane = h * w;
        let mut data = self.value(x).data().to_vec();
        let b = self.value(bias).data();
        for (i, chunk) in data.chunks_mut(plane).enumerate() {
            let bc = b[i % c];
            chunk.iter_mut().for_each(|v| *v += bc);
        }
        let out = Tensor::new(&[n, c, h, w], data)?;
        self.record(
            "add_channel_bias",
            out,
            &[x, bias],
            Box::new(move |ctx| {
                let gb = ctx.needs[1].then(|| {
                    let mut gb = vec![0.0; c];
                    for (i, chunk) in ctx.grad_out.chunks(plane).enumerate() {
                        gb[i % c] += chunk.iter().sum::<f64>();
                    }
                    gb
                });
                vec![ctx.needs[0].then(|| ctx.grad_out.to_vec()), gb]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn log_exp_inverse() {
        let xs: Vec<f64> = (0..=100).map(|i| -5.0 + 0.1 * i as f64).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[xs.len()], xs.clone()).unwrap());
        let e = tape.exp(x).unwrap();
        let l = tape.log(e).unwrap();
        for (a, b) in tape.value(l).data().iter().zip(&xs) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2], vec![1.0, 0.0]).unwrap());
        assert!(matches!(tape.log(x), Err(Error::Domain(_))));
    }

    #[test]
    fn product_rule() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::scalar(3.0));
        let b = tape.param(Tensor::scalar(4.0));
        let y = tape.mul(a, b).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[4.0]);
        assert_eq!(tape.grad(b).unwrap(), &[3.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.7));
        let y = tape.add(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn overflow_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(1000.0));
        assert!(matches!(tape.exp(x), Err(Error::NonFinite { op: "exp" })));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let y = tape.mul(a, c).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[5.0]);
        assert!(tape.grad(c).is_none());
    }
}
