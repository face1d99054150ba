//! The ST-MLP network: calendar and spatial codebook embeddings, the data
//! embedding, cascaded MLP modules A/B/C with residual blocks, the forecast
//! head, and the ablation variants (parallel concatenation instead of the
//! cascade, channel-mixing instead of channel independence).
//!
//! Every operation acts on the trailing (temporal/embedding) dimension only,
//! so in eval mode each node's forecast depends on nothing but that node's
//! own history and the shared parameters.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::graph::GraphMatrix;
use crate::tape::{BatchStats, Mode, Tape, TensorId};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    Layer,
    Batch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Structure {
    /// Sequential fusion: temporal -> spatial -> data through modules A/B/C.
    Cascaded,
    /// One-shot concat of all embeddings straight into the forecast head.
    ParallelConcat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mixing {
    /// Channel-independent: no operation crosses the node axis.
    Ci,
    /// Channel-mixing variant: an N->N affine over nodes before the head.
    Cm,
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub n_nodes: usize,
    pub input_len: usize,
    pub horizon: usize,
    /// Time-of-day slots per day (288 for 5-minute data).
    pub slots_per_day: usize,
    pub days_per_week: usize,
    pub d_td: usize,
    pub d_dw: usize,
    pub d_sp: usize,
    pub d_su: usize,
    pub d_d: usize,
    pub n_a: usize,
    pub n_b: usize,
    pub n_c: usize,
    pub norm: NormKind,
    pub norm_eps: f64,
    pub bn_momentum: f64,
    pub dropout_p: f64,
    pub structure: Structure,
    pub mixing: Mixing,
    pub use_td: bool,
    pub use_dw: bool,
    pub use_sp: bool,
    pub use_su: bool,
    /// Apply the block normalization before the affine instead of after it.
    pub pre_norm: bool,
    /// Join the residual before dropout (dropout then acts on the sum).
    pub residual_before_dropout: bool,
}

impl ModelConfig {
    /// Hyperparameter defaults shared by all benchmark datasets; callers
    /// override the per-dataset deviations (d_dw, normalization kind).
    pub fn defaults(n_nodes: usize) -> Self {
        ModelConfig {
            n_nodes,
            input_len: 12,
            horizon: 12,
            slots_per_day: 288,
            days_per_week: 7,
            d_td: 32,
            d_dw: 32,
            d_sp: 32,
            d_su: 32,
            d_d: 96,
            n_a: 1,
            n_b: 1,
            n_c: 3,
            norm: NormKind::Layer,
            norm_eps: 1e-5,
            bn_momentum: 0.1,
            dropout_p: 0.15,
            structure: Structure::Cascaded,
            mixing: Mixing::Ci,
            use_td: true,
            use_dw: true,
            use_sp: true,
            use_su: true,
            pre_norm: false,
            residual_before_dropout: false,
        }
    }

    /// Temporal embedding width `d_t`.
    pub fn d_t(&self) -> usize {
        (if self.use_td { self.d_td } else { 0 }) + (if self.use_dw { self.d_dw } else { 0 })
    }

    /// Spatial embedding width `d_s`.
    pub fn d_s(&self) -> usize {
        (if self.use_sp { self.d_sp } else { 0 }) + (if self.use_su { self.d_su } else { 0 })
    }

    /// Spatio-temporal width `d_st = d_t + d_s`.
    pub fn d_st(&self) -> usize {
        self.d_t() + self.d_s()
    }

    /// Full embedding width `d = d_st + d_d`; the forecast head maps
    /// `d -> horizon`.
    pub fn d(&self) -> usize {
        self.d_st() + self.d_d
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_nodes", self.n_nodes),
            ("input_len", self.input_len),
            ("horizon", self.horizon),
            ("slots_per_day", self.slots_per_day),
            ("days_per_week", self.days_per_week),
            ("d_d", self.d_d),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be >= 1")));
            }
        }
        if self.use_td && self.d_td == 0 {
            return Err(Error::Config("d_td must be >= 1 when the TD embedding is enabled".into()));
        }
        if self.use_dw && self.d_dw == 0 {
            return Err(Error::Config("d_dw must be >= 1 when the DW embedding is enabled".into()));
        }
        if self.use_sp && self.d_sp == 0 {
            return Err(Error::Config("d_sp must be >= 1 when the graph embedding is enabled".into()));
        }
        if self.use_su && self.d_su == 0 {
            return Err(Error::Config("d_su must be >= 1 when the latent embedding is enabled".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p {} outside [0, 1)", self.dropout_p)));
        }
        if self.norm_eps <= 0.0 {
            return Err(Error::Config("norm_eps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || self.bn_momentum == 0.0 {
            return Err(Error::Config("bn_momentum must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// One named parameter tensor.
#[derive(Debug, Clone)]
pub struct Param<S: Scalar> {
    pub name: String,
    pub tensor: Tensor<S>,
    /// Learnable tensors feed the optimizer; the rest (batch-norm running
    /// statistics) are state carried through checkpoints.
    pub learnable: bool,
}

/// All model state in one flat, canonically ordered list. Every learnable
/// tensor appears exactly once; the checkpoint writes entries in this order.
#[derive(Debug, Clone)]
pub struct ParamSet<S: Scalar> {
    entries: Vec<Param<S>>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn from_entries(entries: Vec<Param<S>>) -> Self {
        ParamSet { entries }
    }

    fn push(&mut self, name: String, tensor: Tensor<S>, learnable: bool) {
        debug_assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        let mut tensor = tensor;
        tensor.requires_grad = learnable;
        self.entries.push(Param { name, tensor, learnable });
    }

    pub fn entries(&self) -> &[Param<S>] {
        &self.entries
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Param<S>> {
        self.entries.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<S>> {
        self.entries.iter_mut().find(|p| p.name == name)
    }

    pub fn at(&self, idx: usize) -> &Param<S> {
        &self.entries[idx]
    }

    pub fn at_mut(&mut self, idx: usize) -> &mut Param<S> {
        &mut self.entries[idx]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn learnable_indices(&self) -> Vec<usize> {
        (0..self.entries.len()).filter(|&i| self.entries[i].learnable).collect()
    }

    pub fn learnable_elems(&self) -> usize {
        self.entries.iter().filter(|p| p.learnable).map(|p| p.tensor.numel()).sum()
    }
}

/// Output of one recorded forward pass. The tape is still open: the caller
/// appends the loss and runs backward on it.
pub struct ForwardPass<S: Scalar> {
    pub tape: Tape<S>,
    /// Prediction in normalized units, `[B, N, Q]`.
    pub pred: TensorId,
    /// Tape ids of registered parameters, indexed like `ParamSet::entries`.
    pub param_ids: Vec<Option<TensorId>>,
    /// Batch statistics gathered by train-mode batch norm, as
    /// `(mean entry index, var entry index, stats)`.
    pub bn_updates: Vec<(usize, usize, BatchStats<S>)>,
}

pub struct Model<S: Scalar> {
    pub config: ModelConfig,
    /// Scaled adjacency, `[N, N]`; present iff the graph embedding is on.
    pub graph: Option<Tensor<S>>,
    pub params: ParamSet<S>,
}

const BN_COUNTER: &str = "bn_batches";

impl<S: Scalar> Model<S> {
    /// Builds a model with freshly initialized parameters. Codebooks and
    /// affine weights draw uniform from `(-1/sqrt(fan_in), 1/sqrt(fan_in))`;
    /// norm scales start at 1, shifts at 0.
    pub fn new(config: ModelConfig, graph: Option<&GraphMatrix>, seed: u64) -> Result<Self> {
        config.validate()?;
        let graph = if config.use_sp {
            let g = graph.ok_or_else(|| {
                Error::Config("graph embedding enabled but no adjacency supplied".into())
            })?;
            if g.n_nodes() != config.n_nodes {
                return Err(Error::Config(format!(
                    "adjacency is {0}x{0}, model wants {1} nodes",
                    g.n_nodes(),
                    config.n_nodes
                )));
            }
            Some(Tensor::from_f64_slice(vec![config.n_nodes, config.n_nodes], g.values())?)
        } else {
            None
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet { entries: Vec::new() };
        let mut uniform = |shape: Vec<usize>, fan_in: usize| -> Tensor<S> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data: Vec<S> = (0..n)
                .map(|_| S::from_f64((rng.gen::<f64>() * 2.0 - 1.0) * bound))
                .collect();
            Tensor::new(shape, data).expect("init shape")
        };

        let c = &config;
        if c.use_td {
            params.push("b_td".into(), uniform(vec![c.slots_per_day, c.d_td], c.d_td), true);
        }
        if c.use_dw {
            params.push("b_dw".into(), uniform(vec![c.days_per_week, c.d_dw], c.d_dw), true);
        }
        if c.use_sp {
            params.push("b_sp".into(), uniform(vec![c.n_nodes, c.d_sp], c.d_sp), true);
        }
        if c.use_su {
            params.push("b_su".into(), uniform(vec![c.n_nodes, c.d_su], c.d_su), true);
        }
        params.push("data.w".into(), uniform(vec![3 * c.input_len, c.d_d], 3 * c.input_len), true);
        params.push("data.b".into(), uniform(vec![c.d_d], 3 * c.input_len), true);

        if c.structure == Structure::Cascaded {
            let mut has_bn = false;
            for (tag, count, width) in [
                ("a", c.n_a, c.d_t()),
                ("b", c.n_b, c.d_st()),
                ("c", c.n_c, c.d()),
            ] {
                if width == 0 {
                    continue;
                }
                for i in 0..count {
                    let prefix = format!("mod_{tag}.{i}");
                    params.push(format!("{prefix}.w"), uniform(vec![width, width], width), true);
                    params.push(format!("{prefix}.b"), uniform(vec![width], width), true);
                    params.push(format!("{prefix}.gamma"), Tensor::full(vec![width], S::one()), true);
                    params.push(format!("{prefix}.beta"), Tensor::zeros(vec![width]), true);
                    if c.norm == NormKind::Batch {
                        has_bn = true;
                        params.push(format!("{prefix}.bn_mean"), Tensor::zeros(vec![width]), false);
                        params.push(
                            format!("{prefix}.bn_var"),
                            Tensor::full(vec![width], S::one()),
                            false,
                        );
                    }
                }
            }
            if has_bn {
                params.push(BN_COUNTER.into(), Tensor::zeros(vec![1]), false);
            }
        }

        params.push("head.w".into(), uniform(vec![c.d(), c.horizon], c.d()), true);
        params.push("head.b".into(), uniform(vec![c.horizon], c.d()), true);

        if c.mixing == Mixing::Cm {
            params.push("mix.m".into(), uniform(vec![c.n_nodes, c.n_nodes], c.n_nodes), true);
            params.push("mix.c".into(), uniform(vec![c.n_nodes], c.n_nodes), true);
        }

        Ok(Model { config, graph, params })
    }

    /// Rebuilds a model around an existing parameter set (checkpoint load).
    pub fn from_parts(
        config: ModelConfig,
        graph: Option<&GraphMatrix>,
        params: ParamSet<S>,
    ) -> Result<Self> {
        let template = Model::new(config.clone(), graph, 0)?;
        if template.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count {} does not match configuration ({} expected)",
                params.len(),
                template.params.len()
            )));
        }
        for (have, want) in params.entries().iter().zip(template.params.entries()) {
            if have.name != want.name || have.tensor.shape() != want.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} {:?} does not match configuration ({} {:?} expected)",
                    have.name,
                    have.tensor.shape(),
                    want.name,
                    want.tensor.shape()
                )));
            }
        }
        Ok(Model { graph: template.graph, config, params })
    }

    /// Records the full forward pass for one batch on a fresh tape.
    pub fn forward(
        &self,
        batch: &Batch<S>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardPass<S>> {
        let c = &self.config;
        if batch.n_nodes != c.n_nodes || batch.input_len != c.input_len {
            return Err(Error::Shape(format!(
                "batch is {}x{} (nodes x steps), model wants {}x{}",
                batch.n_nodes, batch.input_len, c.n_nodes, c.input_len
            )));
        }
        if c.norm == NormKind::Batch && mode == Mode::Eval && c.structure == Structure::Cascaded {
            let count = self
                .params
                .get(BN_COUNTER)
                .map(|p| p.tensor.data()[0].as_f64())
                .unwrap_or(1.0);
            if count == 0.0 {
                return Err(Error::UninitializedStats);
            }
        }

        let mut fwd = ForwardBuilder {
            model: self,
            tape: Tape::new(),
            param_ids: vec![None; self.params.len()],
            bn_updates: Vec::new(),
            mode,
            rng,
        };
        let pred = fwd.run(batch)?;
        Ok(ForwardPass {
            tape: fwd.tape,
            pred,
            param_ids: fwd.param_ids,
            bn_updates: fwd.bn_updates,
        })
    }

    /// Folds train-mode batch statistics into the running estimates:
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn apply_bn_updates(&mut self, updates: &[(usize, usize, BatchStats<S>)]) {
        if updates.is_empty() {
            return;
        }
        let momentum = S::from_f64(self.config.bn_momentum);
        let keep = S::one() - momentum;
        for (mean_idx, var_idx, stats) in updates {
            for (slot, &batch) in
                self.params.at_mut(*mean_idx).tensor.data_mut().iter_mut().zip(&stats.mean)
            {
                *slot = keep * *slot + momentum * batch;
            }
            for (slot, &batch) in
                self.params.at_mut(*var_idx).tensor.data_mut().iter_mut().zip(&stats.var)
            {
                *slot = keep * *slot + momentum * batch;
            }
        }
        if let Some(idx) = self.params.index_of(BN_COUNTER) {
            let v = self.params.at_mut(idx).tensor.data_mut();
            v[0] += S::one();
        }
    }

    /// Gradients for every learnable entry after a backward pass, zeros for
    /// parameters the loss did not reach.
    pub fn collect_grads(&self, fwd: &ForwardPass<S>) -> Vec<Vec<S>> {
        self.params
            .learnable_indices()
            .into_iter()
            .map(|idx| match fwd.param_ids[idx].and_then(|id| fwd.tape.grad(id)) {
                Some(g) => g.to_vec(),
                None => vec![S::zero(); self.params.at(idx).tensor.numel()],
            })
            .collect()
    }
}

/// Per-forward state threaded through the stage builders.
struct ForwardBuilder<'a, S: Scalar> {
    model: &'a Model<S>,
    tape: Tape<S>,
    param_ids: Vec<Option<TensorId>>,
    bn_updates: Vec<(usize, usize, BatchStats<S>)>,
    mode: Mode,
    rng: &'a mut ChaCha8Rng,
}

impl<S: Scalar> ForwardBuilder<'_, S> {
    fn param(&mut self, name: &str) -> Result<TensorId> {
        let idx = self
            .model
            .params
            .index_of(name)
            .ok_or_else(|| Error::Config(format!("model has no parameter {name}")))?;
        if let Some(id) = self.param_ids[idx] {
            return Ok(id);
        }
        let id = self.tape.param(&self.model.params.at(idx).tensor);
        self.param_ids[idx] = Some(id);
        Ok(id)
    }

    fn run(&mut self, batch: &Batch<S>) -> Result<TensorId> {
        let c = &self.model.config;
        let b = batch.size;
        let n = c.n_nodes;

        // temporal embedding: codebook rows for the window's final indices,
        // replicated across nodes
        let mut temporal_parts = Vec::new();
        if c.use_td {
            let table = self.param("b_td")?;
            let rows = self.tape.gather_rows(table, &batch.td_last())?;
            temporal_parts.push(self.tape.expand_axis(rows, 1, n)?);
        }
        if c.use_dw {
            let table = self.param("b_dw")?;
            let rows = self.tape.gather_rows(table, &batch.dw_last())?;
            temporal_parts.push(self.tape.expand_axis(rows, 1, n)?);
        }
        let e_t = match temporal_parts.len() {
            0 => None,
            _ => Some(self.tape.concat_last(&temporal_parts)?),
        };

        // spatial embedding: graph-projected codebook next to the free one
        let mut spatial_parts = Vec::new();
        if c.use_sp {
            let a = self.tape.constant(self.model.graph.as_ref().expect("graph present").clone());
            let b_sp = self.param("b_sp")?;
            spatial_parts.push(self.tape.matmul(a, b_sp)?);
        }
        if c.use_su {
            spatial_parts.push(self.param("b_su")?);
        }
        let e_s = match spatial_parts.len() {
            0 => None,
            _ => {
                let joined = self.tape.concat_last(&spatial_parts)?;
                Some(self.tape.expand_axis(joined, 0, b)?)
            }
        };

        // data embedding: history next to [0,1)-scaled calendar sequences
        let e_d = {
            let t = c.input_len;
            let mut td_frac = vec![S::zero(); b * n * t];
            let mut dw_frac = vec![S::zero(); b * n * t];
            for bi in 0..b {
                for step in 0..t {
                    let tdv =
                        S::from_f64(batch.td_idx[bi * t + step] as f64 / c.slots_per_day as f64);
                    let dwv =
                        S::from_f64(batch.dw_idx[bi * t + step] as f64 / c.days_per_week as f64);
                    for node in 0..n {
                        td_frac[(bi * n + node) * t + step] = tdv;
                        dw_frac[(bi * n + node) * t + step] = dwv;
                    }
                }
            }
            let x = self.tape.constant(batch.x.clone());
            let td = self.tape.constant(Tensor::new(vec![b, n, t], td_frac)?);
            let dw = self.tape.constant(Tensor::new(vec![b, n, t], dw_frac)?);
            let joined = self.tape.concat_last(&[x, td, dw])?;
            let w = self.param("data.w")?;
            let bias = self.param("data.b")?;
            self.tape.affine(joined, w, bias)?
        };

        let embedding = match c.structure {
            Structure::Cascaded => {
                let stage1 = match e_t {
                    Some(t) => Some(self.module(t, "a", c.n_a)?),
                    None => None,
                };
                let stage2_in: Vec<TensorId> = [stage1, e_s].into_iter().flatten().collect();
                let stage2 = match stage2_in.len() {
                    0 => None,
                    _ => {
                        let joined = self.tape.concat_last(&stage2_in)?;
                        Some(self.module(joined, "b", c.n_b)?)
                    }
                };
                let stage3_in: Vec<TensorId> = [stage2, Some(e_d)].into_iter().flatten().collect();
                let joined = self.tape.concat_last(&stage3_in)?;
                self.module(joined, "c", c.n_c)?
            }
            Structure::ParallelConcat => {
                let parts: Vec<TensorId> = [e_t, e_s, Some(e_d)].into_iter().flatten().collect();
                self.tape.concat_last(&parts)?
            }
        };

        let mixed = match c.mixing {
            Mixing::Ci => embedding,
            Mixing::Cm => {
                let m = self.param("mix.m")?;
                let shift = self.param("mix.c")?;
                self.tape.node_mix(embedding, m, shift)?
            }
        };

        let head_w = self.param("head.w")?;
        let head_b = self.param("head.b")?;
        self.tape.affine(mixed, head_w, head_b)
    }

    /// One MLP module: `count` residual blocks of
    /// affine -> norm -> relu -> dropout, dimension preserved.
    fn module(&mut self, input: TensorId, tag: &str, count: usize) -> Result<TensorId> {
        let c = &self.model.config;
        let mut h = input;
        for i in 0..count {
            let prefix = format!("mod_{tag}.{i}");
            let w = self.param(&format!("{prefix}.w"))?;
            let b = self.param(&format!("{prefix}.b"))?;
            let gamma = self.param(&format!("{prefix}.gamma"))?;
            let beta = self.param(&format!("{prefix}.beta"))?;

            let branch = if c.pre_norm {
                let normed = self.norm(h, gamma, beta, &prefix)?;
                self.tape.affine(normed, w, b)?
            } else {
                let lin = self.tape.affine(h, w, b)?;
                self.norm(lin, gamma, beta, &prefix)?
            };
            let branch = self.tape.relu(branch)?;
            h = if c.residual_before_dropout {
                let joined = self.tape.add(h, branch)?;
                self.tape.dropout(joined, c.dropout_p, self.mode, self.rng)?
            } else {
                let dropped = self.tape.dropout(branch, c.dropout_p, self.mode, self.rng)?;
                self.tape.add(h, dropped)?
            };
        }
        Ok(h)
    }

    fn norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        prefix: &str,
    ) -> Result<TensorId> {
        let c = &self.model.config;
        match c.norm {
            NormKind::Layer => self.tape.layer_norm(x, gamma, beta, c.norm_eps),
            NormKind::Batch => {
                let mean_idx = self
                    .model
                    .params
                    .index_of(&format!("{prefix}.bn_mean"))
                    .ok_or_else(|| Error::Config(format!("{prefix}.bn_mean missing")))?;
                let var_idx = self
                    .model
                    .params
                    .index_of(&format!("{prefix}.bn_var"))
                    .ok_or_else(|| Error::Config(format!("{prefix}.bn_var missing")))?;
                match self.mode {
                    Mode::Train => {
                        let (out, stats) = self.tape.batch_norm_train(x, gamma, beta, c.norm_eps)?;
                        self.bn_updates.push((mean_idx, var_idx, stats));
                        Ok(out)
                    }
                    Mode::Eval => {
                        let mean = self.model.params.at(mean_idx).tensor.data().to_vec();
                        let var = self.model.params.at(var_idx).tensor.data().to_vec();
                        self.tape.batch_norm_eval(x, gamma, beta, &mean, &var, c.norm_eps)
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_sinusoid, Dataset};

    fn eval_rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    fn toy_batch(n_nodes: usize, seed: u64) -> (Dataset, Batch<f64>) {
        let series = synthetic_sinusoid(n_nodes, 80, 5, seed);
        let ds = Dataset::build(series, 12, 12, (1.0, 0.0, 0.0)).unwrap();
        let batch = ds.batch(&[0, 7]);
        (ds, batch)
    }

    fn toy_config(n_nodes: usize) -> ModelConfig {
        let mut c = ModelConfig::defaults(n_nodes);
        c.d_td = 4;
        c.d_dw = 4;
        c.d_sp = 4;
        c.d_su = 4;
        c.d_d = 8;
        c.n_c = 2;
        c.dropout_p = 0.0;
        c
    }

    #[test]
    fn table_defaults_dimension_contract() {
        let c = ModelConfig::defaults(170);
        assert_eq!(c.d_t(), 64);
        assert_eq!(c.d_s(), 64);
        assert_eq!(c.d_st(), 128);
        assert_eq!(c.d(), 224);
        let model = Model::<f64>::new(c, Some(&GraphMatrix::identity(170)), 1).unwrap();
        let head = model.params.get("head.w").unwrap();
        assert_eq!(head.tensor.shape(), &[224, 12]);
    }

    #[test]
    fn dimension_bookkeeping_for_every_flag_combination() {
        for bits in 0..16u8 {
            let mut c = toy_config(3);
            c.use_td = bits & 1 != 0;
            c.use_dw = bits & 2 != 0;
            c.use_sp = bits & 4 != 0;
            c.use_su = bits & 8 != 0;
            let expect_t = if c.use_td { 4 } else { 0 } + if c.use_dw { 4 } else { 0 };
            let expect_s = if c.use_sp { 4 } else { 0 } + if c.use_su { 4 } else { 0 };
            assert_eq!(c.d_t(), expect_t);
            assert_eq!(c.d_s(), expect_s);
            assert_eq!(c.d_st(), expect_t + expect_s);
            assert_eq!(c.d(), expect_t + expect_s + 8);
            let graph = GraphMatrix::identity(3);
            let model = Model::<f64>::new(c.clone(), Some(&graph), 3).unwrap();
            let head = model.params.get("head.w").unwrap();
            assert_eq!(head.tensor.shape(), &[c.d(), 12]);
            // disabled codebooks are not allocated at all
            assert_eq!(model.params.get("b_td").is_some(), c.use_td);
            assert_eq!(model.params.get("b_dw").is_some(), c.use_dw);
            assert_eq!(model.params.get("b_sp").is_some(), c.use_sp);
            assert_eq!(model.params.get("b_su").is_some(), c.use_su);
            // forward produces the right output shape for every combination
            let (_, batch) = toy_batch(3, 5);
            let fwd = model.forward(&batch, Mode::Eval, &mut eval_rng()).unwrap();
            assert_eq!(fwd.tape.value(fwd.pred).shape(), &[2, 3, 12]);
        }
    }

    #[test]
    fn codebook_row_selection_and_gradient_locality() {
        // identity codebook: every node row equals the one-hot of the index
        let mut c = toy_config(3);
        c.use_dw = false;
        c.use_sp = false;
        c.use_su = false;
        c.d_td = 6;
        c.slots_per_day = 6;
        c.n_a = 0;
        c.n_b = 0;
        c.n_c = 0;
        let mut model = Model::<f64>::new(c, None, 2).unwrap();
        model.params.get_mut("b_td").unwrap().tensor = Tensor::eye(6);

        let series = synthetic_sinusoid(3, 40, 240, 8); // 6 slots/day
        let ds = Dataset::build(series, 12, 12, (1.0, 0.0, 0.0)).unwrap();
        let batch: Batch<f64> = ds.batch(&[0]);
        let td_last = batch.td_last()[0];

        let mut fwd = model.forward(&batch, Mode::Eval, &mut eval_rng()).unwrap();
        let s = fwd.tape.sum(fwd.pred).unwrap();
        fwd.tape.backward(s).unwrap();
        let idx = model.params.index_of("b_td").unwrap();
        let grad = fwd.tape.grad(fwd.param_ids[idx].unwrap()).unwrap();
        for row in 0..6 {
            let touched = grad[row * 6..(row + 1) * 6].iter().any(|&g| g != 0.0);
            assert_eq!(touched, row == td_last, "row {row}");
        }
    }

    #[test]
    fn spatial_embedding_matches_hand_product() {
        // A = [[0,-1],[-1,0]], B_sp = I -> E_sp = A
        let mut c = toy_config(2);
        c.use_td = false;
        c.use_dw = false;
        c.use_su = false;
        c.d_sp = 2;
        c.n_b = 0;
        c.n_c = 0;
        c.d_d = 2;
        let graph = GraphMatrix::new(2, vec![0.0, -1.0, -1.0, 0.0]).unwrap();
        let mut model = Model::<f64>::new(c, Some(&graph), 4).unwrap();
        model.params.get_mut("b_sp").unwrap().tensor = Tensor::eye(2);
        let (_, batch) = toy_batch(2, 6);
        let mut fwd = model.forward(&batch, Mode::Eval, &mut eval_rng()).unwrap();
        // recompute E_sp on the same tape for inspection
        let a = fwd.tape.constant(model.graph.as_ref().unwrap().clone());
        let idx = model.params.index_of("b_sp").unwrap();
        let e_sp = fwd.tape.matmul(a, fwd.param_ids[idx].unwrap()).unwrap();
        assert_eq!(fwd.tape.value(e_sp).data(), &[0.0, -1.0, -1.0, 0.0]);
    }

    #[test]
    fn data_embedding_bias_only() {
        let mut c = toy_config(2);
        c.use_td = false;
        c.use_dw = false;
        c.use_sp = false;
        c.use_su = false;
        c.n_c = 0;
        let mut model = Model::<f64>::new(c, None, 5).unwrap();
        // zero data affine weights, bias 0.25; head picks lane 0 only
        model.params.get_mut("data.w").unwrap().tensor = Tensor::zeros(vec![36, 8]);
        model.params.get_mut("data.b").unwrap().tensor = Tensor::full(vec![8], 0.25);
        model.params.get_mut("head.w").unwrap().tensor = {
            // lane 0 of E_d feeds every horizon slot
            let mut t = Tensor::zeros(vec![8, 12]);
            for q in 0..12 {
                t.data_mut()[q] = 1.0;
            }
            t
        };
        model.params.get_mut("head.b").unwrap().tensor = Tensor::zeros(vec![12]);
        let (_, batch) = toy_batch(2, 9);
        let fwd = model.forward(&batch, Mode::Eval, &mut eval_rng()).unwrap();
        for &v in fwd.tape.value(fwd.pred).data() {
            assert_eq!(v, 0.25);
        }
    }

    #[test]
    fn zero_affine_block_passes_residual_through() {
        // one block whose affine and beta are zero: the branch normalizes a
        // constant row to beta = 0, relu keeps 0, residual passes through
        let mut c2 = toy_config(2);
        c2.use_td = true;
        c2.use_dw = false;
        c2.use_sp = false;
        c2.use_su = false;
        c2.n_a = 1;
        c2.n_b = 0;
        c2.n_c = 0;
        let mut model = Model::<f64>::new(c2, None, 7).unwrap();
        model.params.get_mut("mod_a.0.w").unwrap().tensor = Tensor::zeros(vec![4, 4]);
        model.params.get_mut("mod_a.0.b").unwrap().tensor = Tensor::zeros(vec![4]);
        model.params.get_mut("head.w").unwrap().tensor = Tensor::zeros(vec![12, 12]);
        model.params.get_mut("head.b").unwrap().tensor = Tensor::full(vec![12], 1.5);
        let (_, batch) = toy_batch(2, 10);
        let fwd = model.forward(&batch, Mode::Eval, &mut eval_rng()).unwrap();
        for &v in fwd.tape.value(fwd.pred).data() {
            assert_eq!(v, 1.5);
        }
    }

    #[test]
    fn mlp_block_hand_trace() {
        // single block, eval mode, temporal lanes [1, 3]:
        // affine I + [0.5, -0.5] -> [1.5, 2.5]; layer norm -> [-1, 1];
        // relu -> [0, 1]; residual -> [1, 4]
        let mut c = toy_config(1);
        c.use_td = true;
        c.use_dw = false;
        c.use_sp = false;
        c.use_su = false;
        c.d_td = 2;
        c.n_a = 1;
        c.n_b = 0;
        c.n_c = 0;
        c.norm_eps = 1e-12;
        let mut model = Model::<f64>::new(c, None, 8).unwrap();
        let single =
            Dataset::build(synthetic_sinusoid(1, 40, 5, 11), 12, 12, (1.0, 0.0, 0.0)).unwrap();
        let one: Batch<f64> = single.batch(&[0]);
        let td_last = one.td_last()[0];
        {
            let t = &mut model.params.get_mut("b_td").unwrap().tensor;
            *t = Tensor::zeros(vec![288, 2]);
            t.data_mut()[td_last * 2] = 1.0;
            t.data_mut()[td_last * 2 + 1] = 3.0;
        }
        model.params.get_mut("mod_a.0.w").unwrap().tensor = Tensor::eye(2);
        model.params.get_mut("mod_a.0.b").unwrap().tensor =
            Tensor::new(vec![2], vec![0.5, -0.5]).unwrap();
        // head exposes the two temporal lanes on horizon slots 0 and 1
        let mut head = Tensor::zeros(vec![4, 12]);
        head.data_mut()[0] = 1.0;
        head.data_mut()[12 + 1] = 1.0;
        model.params.get_mut("head.w").unwrap().tensor = head;
        model.params.get_mut("head.b").unwrap().tensor = Tensor::zeros(vec![12]);
        model.params.get_mut("data.w").unwrap().tensor = Tensor::zeros(vec![36, 8]);
        model.params.get_mut("data.b").unwrap().tensor = Tensor::zeros(vec![8]);

        let fwd = model.forward(&one, Mode::Eval, &mut eval_rng()).unwrap();
        let out = fwd.tape.value(fwd.pred).data();
        assert!((out[0] - 1.0).abs() < 1e-6, "slot 0 = {}", out[0]);
        assert!((out[1] - 4.0).abs() < 1e-6, "slot 1 = {}", out[1]);
    }

    #[test]
    fn full_forward_hand_trace_one_node() {
        // 1 node, T = Q = 1, zero blocks: the model is a pure concat + head
        let mut c = ModelConfig::defaults(1);
        c.input_len = 1;
        c.horizon = 1;
        c.slots_per_day = 4;
        c.d_td = 1;
        c.d_dw = 1;
        c.d_sp = 1;
        c.d_su = 1;
        c.d_d = 1;
        c.n_a = 0;
        c.n_b = 0;
        c.n_c = 0;
        c.dropout_p = 0.0;
        let graph = GraphMatrix::new(1, vec![0.5]).unwrap();
        let mut model = Model::<f64>::new(c, Some(&graph), 9).unwrap();
        let set = |m: &mut Model<f64>, name: &str, shape: Vec<usize>, data: Vec<f64>| {
            m.params.get_mut(name).unwrap().tensor = Tensor::new(shape, data).unwrap();
        };
        set(&mut model, "b_td", vec![4, 1], vec![10.0, 20.0, 30.0, 40.0]);
        set(&mut model, "b_dw", vec![7, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        set(&mut model, "b_sp", vec![1, 1], vec![2.0]);
        set(&mut model, "b_su", vec![1, 1], vec![3.0]);
        set(&mut model, "data.w", vec![3, 1], vec![0.5, 0.25, 0.125]);
        set(&mut model, "data.b", vec![1], vec![0.1]);
        set(&mut model, "head.w", vec![5, 1], vec![0.1, 0.2, 0.3, 0.4, 1.0]);
        set(&mut model, "head.b", vec![1], vec![0.05]);

        let batch = Batch::<f64> {
            size: 1,
            n_nodes: 1,
            input_len: 1,
            horizon: 1,
            x: Tensor::new(vec![1, 1, 1], vec![-1.0]).unwrap(),
            y_raw: vec![0.0],
            td_idx: vec![2],
            dw_idx: vec![4],
            starts: vec![0],
        };
        let fwd = model.forward(&batch, Mode::Eval, &mut eval_rng()).unwrap();
        // e_t = [30, 5]; e_s = [0.5*2, 3] = [1, 3];
        // e_d = -1*0.5 + (2/4)*0.25 + (4/7)*0.125 + 0.1
        let e_d = -0.5 + 0.125 + (4.0 / 7.0) * 0.125 + 0.1;
        let expect = 0.1 * 30.0 + 0.2 * 5.0 + 0.3 * 1.0 + 0.4 * 3.0 + 1.0 * e_d + 0.05;
        let got = fwd.tape.value(fwd.pred).data()[0];
        assert!((got - expect).abs() < 1e-12, "got {got}, expected {expect}");
    }

    #[test]
    fn parallel_variant_has_fewer_parameters_and_same_head() {
        let graph = GraphMatrix::identity(4);
        let cascaded =
            Model::<f64>::new(ModelConfig::defaults(4), Some(&graph), 3).unwrap();
        let parallel = Model::<f64>::new(
            {
                let mut c = ModelConfig::defaults(4);
                c.structure = Structure::ParallelConcat;
                c
            },
            Some(&graph),
            3,
        )
        .unwrap();
        assert_eq!(parallel.params.get("head.w").unwrap().tensor.shape(), &[224, 12]);
        assert!(parallel.params.learnable_elems() < cascaded.params.learnable_elems());
        assert!(parallel.params.index_of("mod_c.0.w").is_none());
    }

    #[test]
    fn cm_with_identity_mixing_equals_ci_forward() {
        let graph = GraphMatrix::identity(3);
        let ci_cfg = toy_config(3);
        let mut cm_cfg = ci_cfg.clone();
        cm_cfg.mixing = Mixing::Cm;
        let ci = Model::<f64>::new(ci_cfg, Some(&graph), 12).unwrap();
        let mut cm = Model::<f64>::new(cm_cfg, Some(&graph), 12).unwrap();
        for p in ci.params.entries() {
            cm.params.get_mut(&p.name).unwrap().tensor = p.tensor.clone();
        }
        cm.params.get_mut("mix.m").unwrap().tensor = Tensor::eye(3);
        cm.params.get_mut("mix.c").unwrap().tensor = Tensor::zeros(vec![3]);
        let (_, batch) = toy_batch(3, 13);
        let f_ci = ci.forward(&batch, Mode::Eval, &mut eval_rng()).unwrap();
        let f_cm = cm.forward(&batch, Mode::Eval, &mut eval_rng()).unwrap();
        assert!(f_ci.tape.value(f_ci.pred).bits_eq(f_cm.tape.value(f_cm.pred)));
    }

    #[test]
    fn cm_with_random_mixing_couples_nodes() {
        let graph = GraphMatrix::identity(3);
        let mut cfg = toy_config(3);
        cfg.mixing = Mixing::Cm;
        let model = Model::<f64>::new(cfg, Some(&graph), 14).unwrap();
        let (ds, _) = toy_batch(3, 15);
        let batch: Batch<f64> = ds.batch(&[0]);
        let mut perturbed = batch.clone();
        for step in 0..12 {
            // perturb node 2's history only
            perturbed.x.data_mut()[2 * 12 + step] += 1.0;
        }
        let a = model.forward(&batch, Mode::Eval, &mut eval_rng()).unwrap();
        let b = model.forward(&perturbed, Mode::Eval, &mut eval_rng()).unwrap();
        let pa = a.tape.value(a.pred).data();
        let pb = b.tape.value(b.pred).data();
        // node 0's forecast moves because mixing crosses the node axis
        let dev: f64 = (0..12).map(|q| (pa[q] - pb[q]).abs()).fold(0.0, f64::max);
        assert!(dev > 0.0, "expected channel mixing to couple nodes");
    }

    #[test]
    fn eval_is_channel_independent_bitwise() {
        for norm in [NormKind::Layer, NormKind::Batch] {
            let graph = GraphMatrix::identity(4);
            let mut cfg = toy_config(4);
            cfg.norm = norm;
            let mut model = Model::<f64>::new(cfg, Some(&graph), 16).unwrap();
            let (ds, _) = toy_batch(4, 17);
            let batch: Batch<f64> = ds.batch(&[0]);
            if norm == NormKind::Batch {
                // batch norm needs running stats before eval
                let mut rng = ChaCha8Rng::seed_from_u64(99);
                let fwd = model.forward(&batch, Mode::Train, &mut rng).unwrap();
                model.apply_bn_updates(&fwd.bn_updates);
            }
            let base = model.forward(&batch, Mode::Eval, &mut eval_rng()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1234);
            for _ in 0..5 {
                let mut noisy = batch.clone();
                for node in 1..4 {
                    for step in 0..12 {
                        noisy.x.data_mut()[node * 12 + step] = rng.gen::<f64>() * 10.0 - 5.0;
                    }
                }
                let out = model.forward(&noisy, Mode::Eval, &mut eval_rng()).unwrap();
                let pa = base.tape.value(base.pred).data();
                let pb = out.tape.value(out.pred).data();
                for q in 0..12 {
                    assert_eq!(pa[q].to_bits(), pb[q].to_bits(), "node 0 forecast moved");
                }
            }
        }
    }

    #[test]
    fn batch_norm_eval_requires_stats() {
        let graph = GraphMatrix::identity(3);
        let mut cfg = toy_config(3);
        cfg.norm = NormKind::Batch;
        let model = Model::<f64>::new(cfg, Some(&graph), 18).unwrap();
        let (_, batch) = toy_batch(3, 19);
        match model.forward(&batch, Mode::Eval, &mut eval_rng()) {
            Err(Error::UninitializedStats) => {}
            other => panic!("expected UninitializedStats, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn momentum_one_adopts_last_batch_stats() {
        let graph = GraphMatrix::identity(3);
        let mut cfg = toy_config(3);
        cfg.norm = NormKind::Batch;
        cfg.bn_momentum = 1.0;
        let mut model = Model::<f64>::new(cfg, Some(&graph), 20).unwrap();
        let (_, batch) = toy_batch(3, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fwd = model.forward(&batch, Mode::Train, &mut rng).unwrap();
        let (mean_idx, var_idx, stats) = &fwd.bn_updates[0];
        let expect_mean = stats.mean.clone();
        let expect_var = stats.var.clone();
        let (mean_idx, var_idx) = (*mean_idx, *var_idx);
        model.apply_bn_updates(&fwd.bn_updates);
        assert_eq!(model.params.at(mean_idx).tensor.data(), &expect_mean[..]);
        assert_eq!(model.params.at(var_idx).tensor.data(), &expect_var[..]);
    }

    #[test]
    fn missing_graph_rejected_when_graph_embedding_enabled() {
        let cfg = toy_config(3);
        assert!(Model::<f64>::new(cfg, None, 22).is_err());
    }
}
