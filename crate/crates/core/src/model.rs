//! Item embedder and identity classifier head.
//!
//! The embedder is a fully connected network with ReLU hidden layers and a
//! linear output layer producing the `d`-dimensional item embedding. The
//! head is a bias-free `C x d` matrix whose rows are the identity context
//! vectors; logits are raw dot products with them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

pub const HEAD_PARAM: &str = "head.context";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedderConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub num_identities: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            hidden_dims: vec![64, 64],
            embed_dim: 16,
            num_identities: 60,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.num_identities < 2 {
            return Err(Error::Config(format!(
                "num_identities must be at least 2, got {}",
                self.num_identities
            )));
        }
        Ok(())
    }

    /// `(in, out)` of every dense layer, input to embedding.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in self
            .hidden_dims
            .iter()
            .chain(std::iter::once(&self.embed_dim))
        {
            dims.push((prev, h));
            prev = h;
        }
        dims
    }
}

fn weight_name(layer: usize) -> String {
    format!("embed.{layer}.weight")
}

fn bias_name(layer: usize) -> String {
    format!("embed.{layer}.bias")
}

/// Context matrix whose `k`-th row is identity `k`'s context vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    rows: usize,
    cols: usize,
    context: Vec<f64>,
}

impl ClassifierHead {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.len() < 2 || cols == 0 || rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim(
                "classifier head",
                "needs >= 2 equal-length rows",
            ));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            context: rows.concat(),
        })
    }

    pub fn from_params(params: &ParamStore) -> Result<Self> {
        let t = params.get(HEAD_PARAM)?;
        let crate::Shape::Matrix(rows, cols) = t.shape() else {
            return Err(Error::dim("classifier head", "context is not a matrix"));
        };
        Ok(Self {
            rows,
            cols,
            context: t.data().to_vec(),
        })
    }

    pub fn num_identities(&self) -> usize {
        self.rows
    }

    pub fn embed_dim(&self) -> usize {
        self.cols
    }

    pub fn context(&self, k: usize) -> &[f64] {
        &self.context[k * self.cols..(k + 1) * self.cols]
    }
}

/// Logit `k` is `z . c_k`.
pub fn logits(z: &[f64], head: &ClassifierHead) -> Result<Vec<f64>> {
    if z.len() != head.cols {
        return Err(Error::dim(
            "logits",
            format!(
                "embedding of length {} against head width {}",
                z.len(),
                head.cols
            ),
        ));
    }
    Ok((0..head.rows)
        .map(|k| head.context(k).iter().zip(z).map(|(c, v)| c * v).sum())
        .collect())
}

/// Graph outputs for every item of a mini-batch, in batch order.
#[derive(Debug, Clone)]
pub struct BatchForward {
    pub embeddings: Vec<Var>,
    pub logits: Vec<Var>,
}

/// The embedding network `f` plus the classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: EmbedderConfig,
}

impl Model {
    pub fn new(config: EmbedderConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    /// Glorot-uniform weights, zero biases, seeded from `seed`.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut rng = rng::stream(seed, "init", 0);
        let mut store = ParamStore::new(seed);
        for (layer, (fan_in, fan_out)) in self.config.layer_dims().into_iter().enumerate() {
            store.insert_glorot(weight_name(layer), fan_out, fan_in, &mut rng)?;
            store.insert(bias_name(layer), Tensor::vector(vec![0.0; fan_out]))?;
        }
        store.insert_glorot(
            HEAD_PARAM,
            self.config.num_identities,
            self.config.embed_dim,
            &mut rng,
        )?;
        Ok(store)
    }

    /// Checks that `params` has exactly the tensors this architecture needs.
    pub fn check_params(&self, params: &ParamStore) -> Result<()> {
        let fresh = self.init_params(0)?;
        if fresh.len() != params.len() {
            return Err(Error::Contract(format!(
                "expected {} parameters, found {}",
                fresh.len(),
                params.len()
            )));
        }
        for (name, t) in fresh.iter() {
            let found = params.shape_of(name)?;
            if found != t.shape() {
                return Err(Error::dim(
                    "check_params",
                    format!("`{name}` is {found}, expected {}", t.shape()),
                ));
            }
        }
        Ok(())
    }

    fn layers(&self) -> usize {
        self.config.hidden_dims.len() + 1
    }

    /// Differentiable embedding of one item.
    pub fn embed(&self, g: &mut Graph, bound: &Bindings, item: Var) -> Result<Var> {
        let mut h = item;
        let last = self.layers() - 1;
        for layer in 0..self.layers() {
            let w = bound.get(&weight_name(layer))?;
            let b = bound.get(&bias_name(layer))?;
            let pre = g.matvec(w, h)?;
            h = g.add(pre, b)?;
            if layer != last {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    pub fn logits(&self, g: &mut Graph, bound: &Bindings, z: Var) -> Result<Var> {
        let head = bound.get(HEAD_PARAM)?;
        g.matvec(head, z)
    }

    /// Embeds and classifies every item of `sets` (set-major order).
    pub fn embed_batch<S: AsRef<[Vec<f64>]>>(
        &self,
        g: &mut Graph,
        bound: &Bindings,
        sets: &[S],
    ) -> Result<BatchForward> {
        let total: usize = sets.iter().map(|s| s.as_ref().len()).sum();
        let mut embeddings = Vec::with_capacity(total);
        let mut logits = Vec::with_capacity(total);
        for set in sets {
            for item in set.as_ref() {
                self.check_input(item)?;
                let x = g.constant(Tensor::vector(item.clone()));
                let z = self.embed(g, bound, x)?;
                logits.push(self.logits(g, bound, z)?);
                embeddings.push(z);
            }
        }
        Ok(BatchForward { embeddings, logits })
    }

    fn check_input(&self, item: &[f64]) -> Result<()> {
        if item.len() != self.config.input_dim {
            return Err(Error::dim(
                "embed",
                format!(
                    "item of length {} for input_dim {}",
                    item.len(),
                    self.config.input_dim
                ),
            ));
        }
        if item.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite input feature".into()));
        }
        Ok(())
    }

    /// Gradient-free embedding, same arithmetic as [`Model::embed`].
    pub fn embed_item(&self, params: &ParamStore, item: &[f64]) -> Result<Vec<f64>> {
        self.check_input(item)?;
        let mut h = item.to_vec();
        let last = self.layers() - 1;
        for layer in 0..self.layers() {
            let w = params.get(&weight_name(layer))?;
            let b = params.get(&bias_name(layer))?;
            let crate::Shape::Matrix(rows, cols) = w.shape() else {
                return Err(Error::dim("embed", "weight is not a matrix"));
            };
            if cols != h.len() || b.len() != rows {
                return Err(Error::dim(
                    "embed",
                    format!("layer {layer} does not fit its input"),
                ));
            }
            let wd = w.data();
            h = (0..rows)
                .map(|r| {
                    let dot: f64 = wd[r * cols..(r + 1) * cols]
                        .iter()
                        .zip(&h)
                        .map(|(a, x)| a * x)
                        .sum();
                    let v = dot + b.data()[r];
                    if layer != last && !(v > 0.0) {
                        0.0
                    } else {
                        v
                    }
                })
                .collect();
        }
        Ok(h)
    }
}

/// Random finite parameters with the right shapes; used by tests and examples.
pub fn random_params<R: Rng>(model: &Model, rng: &mut R, scale: f64) -> Result<ParamStore> {
    let template = model.init_params(0)?;
    let mut store = ParamStore::new(0);
    for (name, t) in template.iter() {
        let data = (0..t.len())
            .map(|_| rng.random_range(-scale..=scale))
            .collect();
        store.insert(name, Tensor::from_shape(t.shape(), data)?)?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> Model {
        Model::new(EmbedderConfig {
            input_dim: 5,
            hidden_dims: vec![7],
            embed_dim: 3,
            num_identities: 4,
        })
        .unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = EmbedderConfig::default();
        assert!(c.validate().is_ok());
        c.num_identities = 1;
        assert!(c.validate().is_err());
        let c = EmbedderConfig {
            hidden_dims: vec![8, 0],
            ..EmbedderConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_weights_give_zero_embedding() {
        let model = small();
        let mut params = model.init_params(1).unwrap();
        let names: Vec<String> = params.names().map(str::to_owned).collect();
        for n in names {
            params
                .get_mut(&n)
                .unwrap()
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        let z = model
            .embed_item(&params, &[1.0, -2.0, 3.0, 0.5, 9.0])
            .unwrap();
        assert_eq!(z, vec![0.0; 3]);
    }

    #[test]
    fn graph_and_plain_embeddings_agree() {
        let model = small();
        let params = model.init_params(9).unwrap();
        let item = vec![0.3, -1.2, 0.8, 2.0, -0.1];
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let fwd = model
            .embed_batch(&mut g, &b, &[vec![item.clone(), item.clone()]])
            .unwrap();
        let plain = model.embed_item(&params, &item).unwrap();
        assert_eq!(g.value(fwd.embeddings[0]).data(), plain.as_slice());
        assert_eq!(g.value(fwd.embeddings[0]), g.value(fwd.embeddings[1]));
    }

    #[test]
    fn input_dimension_checked() {
        let model = small();
        let params = model.init_params(0).unwrap();
        assert!(matches!(
            model.embed_item(&params, &[1.0]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn logits_examples() {
        let head = ClassifierHead::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(logits(&[3.0, -1.0], &head).unwrap(), vec![3.0, -1.0]);

        let head =
            ClassifierHead::new(vec![vec![1.0, 1.0], vec![2.0, 2.0], vec![-1.0, -1.0]]).unwrap();
        assert_eq!(logits(&[1.0, -1.0], &head).unwrap(), vec![0.0; 3]);
        assert!(logits(&[1.0], &head).is_err());
    }

    #[test]
    fn logits_match_scalar_dot_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..5).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let z: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let head = ClassifierHead::new(rows.clone()).unwrap();
        let got = logits(&z, &head).unwrap();
        for (k, row) in rows.iter().enumerate() {
            let mut dot = 0.0;
            for i in 0..5 {
                dot += row[i] * z[i];
            }
            assert!((got[k] - dot).abs() < 1e-12);
        }
        // bilinear in z
        let scaled: Vec<f64> = z.iter().map(|v| 2.5 * v).collect();
        let got2 = logits(&scaled, &head).unwrap();
        for (a, b) in got.iter().zip(&got2) {
            assert!((2.5 * a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn check_params_detects_shape_changes() {
        let model = small();
        let params = model.init_params(0).unwrap();
        assert!(model.check_params(&params).is_ok());
        let other = Model::new(EmbedderConfig {
            embed_dim: 4,
            ..model.config().clone()
        })
        .unwrap();
        assert!(other.check_params(&params).is_err());
    }
}
