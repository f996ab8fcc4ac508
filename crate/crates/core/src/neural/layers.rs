use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `uniform(-a, a)` weights with `a = 1/sqrt(fan_in)`, zero bias.
pub fn init_linear<T: Real>(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> (Tensor<T>, Tensor<T>) {
    let a = 1.0 / (fan_in.max(1) as f64).sqrt();
    let w = Tensor::from_fn(fan_in, fan_out, |_, _| T::from_f64(rng.random_range(-a..a)));
    (w, Tensor::zeros(1, fan_out))
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let (w, b) = init_linear::<T>(fan_in, fan_out, rng);
        let weight = store.add(format!("{name}.weight"), w);
        let bias = bias.then(|| store.add(format!("{name}.bias"), b));
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    /// Output width of each head; heads share the final hidden layer.
    pub heads: Vec<usize>,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() {
            return Err(Error::Config("an MLP needs at least one hidden layer".into()));
        }
        if self.hidden.contains(&0) || self.heads.contains(&0) {
            return Err(Error::Config("MLP layer and head widths must be >= 1".into()));
        }
        Ok(())
    }

    pub fn output_width(&self) -> usize {
        self.heads.iter().sum()
    }
}

struct Hidden {
    linear: Linear,
    gain: ParamId,
    shift: ParamId,
}

/// Hidden layers of `Linear -> SiLU -> LayerNorm`, then a linear output whose
/// columns are the concatenated heads.
pub struct Mlp {
    pub spec: MlpSpec,
    hidden: Vec<Hidden>,
    pub output: Linear,
}

impl Mlp {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, spec: MlpSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut hidden = Vec::with_capacity(spec.hidden.len());
        let mut fan_in = spec.input;
        for (i, &w) in spec.hidden.iter().enumerate() {
            let linear = Linear::new(store, &format!("{name}.hidden{i}"), fan_in, w, true, rng);
            let gain = store.add(format!("{name}.norm{i}.gain"), Tensor::filled(1, w, T::one()));
            let shift = store.add(format!("{name}.norm{i}.bias"), Tensor::zeros(1, w));
            hidden.push(Hidden { linear, gain, shift });
            fan_in = w;
        }
        let output = Linear::new(store, &format!("{name}.out"), fan_in, spec.output_width(), true, rng);
        Ok(Mlp { spec, hidden, output })
    }

    /// Raw (pre-softmax) head outputs, `rows x output_width`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        if tape.value(x).cols() != self.spec.input {
            return Err(Error::Shape(format!(
                "MLP expects width {}, got {}",
                self.spec.input,
                tape.value(x).cols()
            )));
        }
        let mut h = x;
        for layer in &self.hidden {
            h = layer.linear.forward(tape, store, h)?;
            h = tape.silu(h);
            let g = tape.param(store, layer.gain);
            let b = tape.param(store, layer.shift);
            h = tape.layer_norm(h, g, b)?;
        }
        self.output.forward(tape, store, h)
    }

    pub fn zero_output(&self, store: &mut ParamStore<impl Real>) {
        store.value_mut(self.output.weight).data_mut().fill(num_traits::Zero::zero());
        if let Some(b) = self.output.bias {
            store.value_mut(b).data_mut().fill(num_traits::Zero::zero());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::softmax_rows_in_place;

    #[test]
    fn zero_head_gives_zero_output() {
        let mut rng = crate::rng::stream(0, "mlp");
        let mut store = ParamStore::<f32>::new();
        let mlp = Mlp::new(
            &mut store,
            "m",
            MlpSpec { input: 3, hidden: vec![8, 8], heads: vec![1, 3] },
            &mut rng,
        )
        .unwrap();
        mlp.zero_output(&mut store);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_fn(5, 3, |r, c| (r * 3 + c) as f32 - 4.0));
        let y = mlp.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(y).shape(), (5, 4));
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let mut probs = tape.value(y).clone();
        softmax_rows_in_place(&mut probs, 1, 3);
        assert!((probs.get(0, 2) - 1.0 / 3.0).abs() < 1e-7);
    }

    #[test]
    fn layer_norm_of_constant_row_is_bias() {
        let mut store = ParamStore::<f64>::new();
        let g = store.add("g", Tensor::row_vector(vec![2.0, 3.0, 4.0]));
        let b = store.add("b", Tensor::row_vector(vec![0.5, -1.0, 0.25]));
        let mut tape = Tape::new();
        let x = tape.input(Tensor::filled(2, 3, 7.0));
        let (gv, bv) = (tape.param(&store, g), tape.param(&store, b));
        let y = tape.layer_norm(x, gv, bv).unwrap();
        for r in 0..2 {
            assert_eq!(tape.value(y).row(r), &[0.5, -1.0, 0.25]);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut rng = crate::rng::stream(0, "mlp");
        let mut store = ParamStore::<f32>::new();
        let mlp = Mlp::new(
            &mut store,
            "m",
            MlpSpec { input: 3, hidden: vec![4], heads: vec![2] },
            &mut rng,
        )
        .unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(2, 5));
        assert!(matches!(mlp.forward(&mut tape, &store, x), Err(Error::Shape(_))));
        assert!(MlpSpec { input: 3, hidden: vec![], heads: vec![1] }.validate().is_err());
    }
}
