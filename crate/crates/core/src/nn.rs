//! Named parameter storage, the per-forward context and the basic layers.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use genconvit_tensor::init::kaiming_uniform;
use genconvit_tensor::{Activation, Float, Gradients, Graph, NormMode, RunningStats, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// All learnable tensors by canonical name, in registration order, plus
/// batch-norm running statistics.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F: Float> {
    names: Vec<String>,
    index: HashMap<String, usize>,
    values: Vec<Arc<Tensor<F>>>,
    stats: BTreeMap<String, RunningStats<F>>,
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            index: HashMap::new(),
            values: Vec::new(),
            stats: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(Arc::new(value));
        Ok(())
    }

    pub fn insert_stats(&mut self, name: impl Into<String>, stats: RunningStats<F>) {
        self.stats.insert(name.into(), stats);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.position(name).map(|i| &*self.values[i])
    }

    pub fn shared(&self, i: usize) -> &Arc<Tensor<F>> {
        &self.values[i]
    }

    pub fn values(&self) -> impl Iterator<Item = &Tensor<F>> {
        self.values.iter().map(|v| &**v)
    }

    /// Mutable access for the optimizer; copies any tensor still shared
    /// with a live graph.
    pub fn values_mut(&mut self) -> Vec<&mut Tensor<F>> {
        self.values.iter_mut().map(Arc::make_mut).collect()
    }

    pub fn replace(&mut self, name: &str, value: Tensor<F>) -> Result<()> {
        let i = self.position(name).ok_or_else(|| Error::UnknownParam(name.into()))?;
        if value.shape() != self.values[i].shape() {
            return Err(Error::Shape {
                what: "parameter",
                expected: self.values[i].shape().to_vec(),
                got: value.shape().to_vec(),
            });
        }
        self.values[i] = Arc::new(value);
        Ok(())
    }

    pub fn stats(&self) -> &BTreeMap<String, RunningStats<F>> {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut BTreeMap<String, RunningStats<F>> {
        &mut self.stats
    }

    /// Total number of learnable scalars.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    /// Keeps only parameters whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> Self {
        let mut out = ParamStore::new();
        for (n, v) in self.names.iter().zip(&self.values) {
            if n.starts_with(prefix) {
                out.index.insert(n.clone(), out.names.len());
                out.names.push(n.clone());
                out.values.push(v.clone());
            }
        }
        out.stats = self
            .stats
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(n, s)| (n.clone(), s.clone()))
            .collect();
        out
    }

    pub fn cast<G: Float>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            index: self.index.clone(),
            values: self.values.iter().map(|v| Arc::new(v.cast())).collect(),
            stats: self
                .stats
                .iter()
                .map(|(n, s)| {
                    let c = |v: &[F]| v.iter().map(|x| G::of(x.as_f64())).collect();
                    (n.clone(), RunningStats { mean: c(&s.mean), var: c(&s.var) })
                })
                .collect(),
        }
    }
}

/// Registers parameters with deterministic initialization. Each tensor
/// draws from its own ChaCha stream, so adding a parameter never perturbs
/// the values of the others.
pub struct Initializer<'a, F: Float> {
    pub store: &'a mut ParamStore<F>,
    seed: u64,
    dry: bool,
}

impl<'a, F: Float> Initializer<'a, F> {
    pub fn new(store: &'a mut ParamStore<F>, seed: u64) -> Self {
        Initializer { store, seed, dry: false }
    }

    /// Registers zero tensors instead of random draws. Zeroed allocations
    /// stay untouched, so even the full-size layout costs little memory.
    pub fn dry(store: &'a mut ParamStore<F>) -> Self {
        Initializer { store, seed: 0, dry: true }
    }

    fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.store.len() as u64);
        rng
    }

    pub fn kaiming(&mut self, name: String, shape: &[usize], fan_in: usize) -> Result<()> {
        if self.dry {
            return self.zeros(name, shape);
        }
        let t = kaiming_uniform(shape, fan_in, &mut self.rng());
        self.store.insert(name, t)
    }

    pub fn zeros(&mut self, name: String, shape: &[usize]) -> Result<()> {
        self.store.insert(name, Tensor::zeros(shape))
    }

    pub fn conv(&mut self, prefix: &str, out: usize, inp: usize, k: usize) -> Result<()> {
        self.kaiming(format!("{prefix}.weight"), &[out, inp, k, k], inp * k * k)?;
        self.zeros(format!("{prefix}.bias"), &[out])
    }

    /// Transposed convolution, weight laid out `[in, out, k, k]`.
    pub fn conv_t(&mut self, prefix: &str, inp: usize, out: usize, k: usize) -> Result<()> {
        self.kaiming(format!("{prefix}.weight"), &[inp, out, k, k], out * k * k)?;
        self.zeros(format!("{prefix}.bias"), &[out])
    }

    pub fn linear(&mut self, prefix: &str, out: usize, inp: usize, bias: bool) -> Result<()> {
        self.kaiming(format!("{prefix}.weight"), &[out, inp], inp)?;
        if bias {
            self.zeros(format!("{prefix}.bias"), &[out])?;
        }
        Ok(())
    }

    pub fn norm(&mut self, prefix: &str, dim: usize) -> Result<()> {
        self.store.insert(format!("{prefix}.weight"), Tensor::ones(&[dim]))?;
        self.zeros(format!("{prefix}.bias"), &[dim])
    }

    pub fn batch_norm(&mut self, prefix: &str, ch: usize) -> Result<()> {
        self.norm(prefix, ch)?;
        self.store.insert_stats(prefix, RunningStats::new(ch));
        Ok(())
    }
}

/// Everything a forward pass needs: the tape, read-only parameters bound
/// lazily onto it, and the batch-norm mode.
pub struct Ctx<'a, F: Float> {
    pub g: &'a mut Graph<F>,
    store: &'a ParamStore<F>,
    bound: Vec<Option<Var>>,
    mode: NormMode,
    trainable: bool,
    stats: BTreeMap<String, RunningStats<F>>,
}

/// What a forward pass leaves behind besides its outputs.
pub struct Bound<F: Float> {
    vars: Vec<Option<Var>>,
    /// Running statistics updated in train mode.
    pub stats: BTreeMap<String, RunningStats<F>>,
}

impl<F: Float> Bound<F> {
    /// Gradients in store order; `None` for parameters the loss never
    /// touched.
    pub fn gradients(&self, grads: &mut Gradients<F>) -> Vec<Option<Tensor<F>>> {
        self.vars.iter().map(|v| v.and_then(|v| grads.take(v))).collect()
    }

    pub fn var(&self, i: usize) -> Option<Var> {
        self.vars[i]
    }
}

impl<'a, F: Float> Ctx<'a, F> {
    /// Parameters enter the tape as trainable leaves.
    pub fn train(g: &'a mut Graph<F>, store: &'a ParamStore<F>) -> Self {
        Self::build(g, store, NormMode::Train, true)
    }

    /// Parameters enter as constants and batch norm uses running statistics.
    pub fn eval(g: &'a mut Graph<F>, store: &'a ParamStore<F>) -> Self {
        Self::build(g, store, NormMode::Eval, false)
    }

    pub fn build(g: &'a mut Graph<F>, store: &'a ParamStore<F>, mode: NormMode, trainable: bool) -> Self {
        Ctx {
            g,
            store,
            bound: vec![None; store.len()],
            mode,
            trainable,
            stats: BTreeMap::new(),
        }
    }

    /// Uses caller-created variables for every parameter, in store order.
    pub fn with_vars(mut self, vars: &[Var]) -> Self {
        self.bound = vars.iter().map(|&v| Some(v)).collect();
        self
    }

    pub fn mode(&self) -> NormMode {
        self.mode
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.position(name).is_some()
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        let i = self
            .store
            .position(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if let Some(v) = self.bound[i] {
            return Ok(v);
        }
        let value = self.store.shared(i).clone();
        let v = if self.trainable {
            self.g.param(value)
        } else {
            self.g.constant_shared(value)
        };
        self.bound[i] = Some(v);
        Ok(v)
    }

    pub fn finish(self) -> Bound<F> {
        Bound {
            vars: self.bound,
            stats: self.stats,
        }
    }

    pub fn conv(&mut self, x: Var, prefix: &str, stride: usize, padding: usize, groups: usize) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        Ok(self.g.conv2d(x, w, Some(b), stride, padding, groups)?)
    }

    pub fn conv_t(&mut self, x: Var, prefix: &str, stride: usize) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        Ok(self.g.conv_transpose2d(x, w, Some(b), stride)?)
    }

    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let bias = format!("{prefix}.bias");
        let b = if self.has(&bias) { Some(self.p(&bias)?) } else { None };
        Ok(self.g.linear(x, w, b)?)
    }

    pub fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        Ok(self.g.layer_norm(x, w, b)?)
    }

    /// Layer norm over the channel axis of an NCHW tensor.
    pub fn channel_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let y = self.g.permute(x, &[0, 2, 3, 1])?;
        let y = self.layer_norm(y, prefix)?;
        Ok(self.g.permute(y, &[0, 3, 1, 2])?)
    }

    pub fn batch_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        let stats = match self.stats.get_mut(prefix) {
            Some(s) => s,
            None => {
                let s = self
                    .store
                    .stats()
                    .get(prefix)
                    .cloned()
                    .ok_or_else(|| Error::UnknownParam(format!("{prefix} (running stats)")))?;
                self.stats.entry(prefix.to_string()).or_insert(s)
            }
        };
        Ok(self.g.batch_norm2d(x, w, b, stats, self.mode)?)
    }

    pub fn act(&mut self, x: Var, kind: Activation) -> Var {
        self.g.activation(x, kind)
    }
}
