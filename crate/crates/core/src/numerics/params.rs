use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::tape::{Gradients, Tape, Var};
use crate::error::{Error, Result};

/// Learning-rate group of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Wcb,
    Other,
}

impl ParamGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Wcb => "wcb",
            ParamGroup::Other => "other",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Matrix,
    pub grad: Matrix,
}

/// Named trainable matrices with gradient accumulators.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, group: ParamGroup, value: Matrix) -> ParamId {
        let name = name.into();
        let grad = Matrix::zeros(value.rows(), value.cols());
        if let Some(&i) = self.by_name.get(&name) {
            self.params[i] = Param {
                name,
                group,
                value,
                grad,
            };
            return ParamId(i);
        }
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            group,
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        Ok(&self.params[self.id(name)?.0])
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Records the named parameter as a leaf on `tape`.
    pub fn var(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        let id = self.id(name)?;
        Ok(tape.param_leaf(id, &self.params[id.0].value))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Matrix::zeros(p.value.rows(), p.value.cols());
        }
    }

    /// Adds the tape gradients of every parameter leaf into the accumulators.
    pub fn accumulate(&mut self, tape: &Tape, grads: &Gradients) {
        for (id, var) in tape.param_vars() {
            self.params[id.0].grad.add_assign(grads.wrt(var));
        }
    }

    pub fn grads_finite(&self) -> bool {
        self.params.iter().all(|p| p.grad.is_finite())
    }
}

fn mlp_param_names(name: &str) -> [String; 4] {
    [
        format!("{name}.w1"),
        format!("{name}.b1"),
        format!("{name}.w2"),
        format!("{name}.b2"),
    ]
}

/// Registers a two-layer perceptron `input -> hidden -> output` with
/// uniform Glorot initialization and zero biases.
pub fn init_mlp<R: Rng>(
    store: &mut ParamStore,
    name: &str,
    input: usize,
    hidden: usize,
    output: usize,
    group: ParamGroup,
    rng: &mut R,
) {
    let mut glorot = |fan_in: usize, fan_out: usize| {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Matrix::new(fan_in, fan_out, data).expect("sized by construction")
    };
    let [w1, b1, w2, b2] = mlp_param_names(name);
    let w1_value = glorot(input, hidden);
    let w2_value = glorot(hidden, output);
    store.insert(w1, group, w1_value);
    store.insert(b1, group, Matrix::zeros(1, hidden));
    store.insert(w2, group, w2_value);
    store.insert(b2, group, Matrix::zeros(1, output));
}

/// Registers an MLP with explicit weights.
pub fn set_mlp(
    store: &mut ParamStore,
    name: &str,
    group: ParamGroup,
    layers: [Matrix; 4],
) -> Result<()> {
    let [w1, b1, w2, b2] = layers;
    if b1.shape() != (1, w1.cols()) || w2.rows() != w1.cols() || b2.shape() != (1, w2.cols()) {
        return Err(Error::shape(
            "set_mlp",
            format!(
                "w1 {:?} b1 {:?} w2 {:?} b2 {:?}",
                w1.shape(),
                b1.shape(),
                w2.shape(),
                b2.shape()
            ),
        ));
    }
    let names = mlp_param_names(name);
    for (n, m) in names.into_iter().zip([w1, b1, w2, b2]) {
        store.insert(n, group, m);
    }
    Ok(())
}

/// `relu(x W1 + b1) W2 + b2`, row-wise over `x`.
pub fn mlp_forward(tape: &mut Tape, x: Var, store: &ParamStore, name: &str) -> Result<Var> {
    let [w1, b1, w2, b2] = mlp_param_names(name);
    if !store.contains(&w1) {
        return Err(Error::UnknownParam(name.to_string()));
    }
    let expected = store.get(&w1)?.value.rows();
    let width = tape.value(x).cols();
    if width != expected {
        return Err(Error::shape(
            "mlp_forward",
            format!("MLP `{name}` expects width {expected}, got {width}"),
        ));
    }
    let (w1, b1) = (store.var(tape, &w1)?, store.var(tape, &b1)?);
    let (w2, b2) = (store.var(tape, &w2)?, store.var(tape, &b2)?);
    let h = tape.matmul(x, w1)?;
    let h = tape.add_bias(h, b1)?;
    let h = tape.relu(h)?;
    let y = tape.matmul(h, w2)?;
    tape.add_bias(y, b2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_mlp_annihilates() {
        let mut store = ParamStore::new();
        set_mlp(
            &mut store,
            "m",
            ParamGroup::Other,
            [
                Matrix::zeros(3, 4),
                Matrix::zeros(1, 4),
                Matrix::zeros(4, 2),
                Matrix::zeros(1, 2),
            ],
        )
        .unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::from_rows(&[[1.0, -2.0, 3.0], [0.5, 0.5, 9.0]]).unwrap());
        let y = mlp_forward(&mut tape, x, &store, "m").unwrap();
        assert_eq!(tape.value(y), &Matrix::zeros(2, 2));
    }

    #[test]
    fn identity_mlp_passes_nonnegative_input() {
        let mut store = ParamStore::new();
        set_mlp(
            &mut store,
            "id",
            ParamGroup::Wcb,
            [
                Matrix::identity(3),
                Matrix::zeros(1, 3),
                Matrix::identity(3),
                Matrix::zeros(1, 3),
            ],
        )
        .unwrap();
        let input = Matrix::from_rows(&[[0.1, 2.0, 0.0], [3.0, 0.25, 7.0]]).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone());
        let y = mlp_forward(&mut tape, x, &store, "id").unwrap();
        assert_eq!(tape.value(y), &input);
    }

    #[test]
    fn unknown_mlp_and_width_mismatch() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        init_mlp(&mut store, "m", 4, 4, 4, ParamGroup::Other, &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::zeros(1, 3));
        assert!(matches!(
            mlp_forward(&mut tape, x, &store, "nope"),
            Err(Error::UnknownParam(_))
        ));
        assert!(matches!(
            mlp_forward(&mut tape, x, &store, "m"),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn every_param_has_a_group_and_matching_grad_shape() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        init_mlp(&mut store, "a", 6, 3, 2, ParamGroup::Wcb, &mut rng);
        init_mlp(&mut store, "b", 2, 3, 2, ParamGroup::Other, &mut rng);
        assert_eq!(store.len(), 8);
        for p in store.iter() {
            assert_eq!(p.grad.shape(), p.value.shape());
        }
        assert_eq!(store.get("a.w1").unwrap().group, ParamGroup::Wcb);
        assert_eq!(store.get("b.b2").unwrap().group, ParamGroup::Other);
    }
}
