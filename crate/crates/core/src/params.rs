//! Named parameter arrays shared by the model, optimizer and checkpoints.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub values: Vec<Vec<f64>>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter and returns its index.
    pub fn push(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>) -> usize {
        assert_eq!(shape.iter().product::<usize>(), values.len(), "{name}");
        assert!(self.index(name).is_none(), "duplicate parameter {name}");
        self.names.push(name.to_string());
        self.shapes.push(shape);
        self.values.push(values);
        self.names.len() - 1
    }

    pub fn push_uniform<R: Rng>(&mut self, name: &str, shape: Vec<usize>, scale: f64, rng: &mut R) -> usize {
        let n = shape.iter().product();
        let values = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
        self.push(name, shape, values)
    }

    pub fn push_const(&mut self, name: &str, shape: Vec<usize>, v: f64) -> usize {
        let n = shape.iter().product();
        self.push(name, shape, vec![v; n])
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn tensor(&self, i: usize) -> Tensor {
        Tensor {
            shape: self.shapes[i].clone(),
            values: self.values[i].clone(),
            grad: None,
        }
    }

    /// Places every parameter on the tape, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        (0..self.len())
            .map(|i| {
                let t = self.tensor(i);
                if trainable {
                    tape.param(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect()
    }

    /// Gradients of bound parameters after `backward`; zeros where the loss
    /// did not reach a parameter.
    pub fn grads(&self, tape: &Tape, vars: &[Var]) -> Vec<Vec<f64>> {
        vars.iter()
            .zip(&self.values)
            .map(|(&v, p)| match tape.grad(v) {
                Some(g) => g.to_vec(),
                None => vec![0.0; p.len()],
            })
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_scalars());
        let mut off = 0;
        for v in self.values.iter_mut() {
            let n = v.len();
            v.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }
}
