//! The sequential recommender: item embedding, stacked MHAR layers and the
//! item-scoring head.

pub mod attention;
mod checkpoint;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use attention::{compute_pi, compute_ti};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, TensorEntry};

use self::attention::{absolute_head, relative_head, HeadInput, Projections, Relative};
use crate::data::{Batch, PAD};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};

/// Which context a head injects into its attention scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    AbsTime,
    AbsPos,
    RelTime,
    RelPos,
    /// Plain content self-attention.
    Content,
}

impl HeadKind {
    pub const MHAR: [HeadKind; 4] = [HeadKind::AbsTime, HeadKind::AbsPos, HeadKind::RelTime, HeadKind::RelPos];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Hidden size `d`.
    pub hidden: usize,
    pub layers: usize,
    /// Sequence length `n`.
    pub max_len: usize,
    /// Time-interval clip `k_t` (days).
    pub kt: usize,
    /// Position-interval clip `k_p`.
    pub kp: usize,
    pub dropout: f64,
    pub heads: Vec<HeadKind>,
    /// Add a learned absolute position embedding to the input.
    pub input_position: bool,
    pub layer_norm_eps: f64,
    /// Std-dev and symmetric cut-off of the truncated-normal initializer.
    pub init_std: f64,
    pub init_bound: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            layers: 2,
            max_len: 50,
            kt: 256,
            kp: 2,
            dropout: 0.2,
            heads: HeadKind::MHAR.to_vec(),
            input_position: false,
            layer_norm_eps: 1e-6,
            init_std: 0.02,
            init_bound: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.heads.is_empty() {
            return fail("model.heads must not be empty".into());
        }
        if self.hidden == 0 || self.hidden % self.heads.len() != 0 {
            return fail(format!(
                "model.hidden ({}) must be a positive multiple of the head count ({})",
                self.hidden,
                self.heads.len()
            ));
        }
        if self.kt < 1 {
            return fail("model.kt must be >= 1".into());
        }
        if self.kp < 1 {
            return fail("model.kp must be >= 1".into());
        }
        if self.max_len < 2 {
            return fail("model.max_len must be >= 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("model.dropout must lie in [0, 1)".into());
        }
        if !(self.init_std > 0.0 && self.init_bound > 0.0) {
            return fail("model.init_std and model.init_bound must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads.len()
    }

    fn uses(&self, kind: HeadKind) -> bool {
        self.heads.contains(&kind)
    }
}

/// Index of a parameter tensor inside [`TemProxRec::params`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
struct HeadParams {
    kind: HeadKind,
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    /// Relative heads only: interval projection and the two biases.
    relative: Option<(ParamId, ParamId, ParamId)>,
}

#[derive(Clone, Debug)]
struct LayerParams {
    heads: Vec<HeadParams>,
    w_o: ParamId,
    ln1: (ParamId, ParamId),
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
struct Layout {
    item_table: ParamId,
    time_table: Option<ParamId>,
    pos_table: Option<ParamId>,
    rel_time_table: Option<ParamId>,
    rel_pos_table: Option<ParamId>,
    layers: Vec<LayerParams>,
    out_w: ParamId,
    out_b: ParamId,
    out_ln: (ParamId, ParamId),
    item_bias: ParamId,
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

struct Builder<'a, T: Scalar, R: Rng> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    rng: &'a mut R,
    normal: Normal<f64>,
    bound: f64,
}

impl<T: Scalar, R: Rng> Builder<'_, T, R> {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> ParamId {
        let tensor = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, T::one()),
            Init::Normal => Tensor::from_fn(shape, |_| loop {
                let v = self.normal.sample(self.rng);
                if v.abs() <= self.bound {
                    break T::lit(v);
                }
            }),
        };
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }
}

/// Hidden states and per-layer, per-head attention weights of one pass.
pub struct Forward {
    /// `[B·n × d]`
    pub hidden: Var,
    /// `attention[layer][head]` is `[B×n×n]`.
    pub attention: Vec<Vec<Var>>,
}

/// Model parameters plus the wiring that reads them.
#[derive(Clone, Debug)]
pub struct TemProxRec<T: Scalar> {
    config: ModelConfig,
    vocab_rows: usize,
    num_days: usize,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    layout: Layout,
}

impl<T: Scalar> TemProxRec<T> {
    /// `vocab_rows` counts PAD and MASK; `num_days` sizes the time table.
    pub fn new<R: Rng>(config: ModelConfig, vocab_rows: usize, num_days: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if vocab_rows < 3 || num_days == 0 {
            return Err(Error::Config(format!(
                "need at least one item and one day (vocab_rows={vocab_rows}, num_days={num_days})"
            )));
        }
        let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::Config(e.to_string()))?;
        let mut b = Builder {
            names: Vec::new(),
            tensors: Vec::new(),
            rng,
            normal,
            bound: config.init_bound,
        };
        let d = config.hidden;
        let dh = config.head_dim();
        let item_table = b.add("item_table".into(), &[vocab_rows, d], Init::Normal);
        let time_table = config
            .uses(HeadKind::AbsTime)
            .then(|| b.add("time_table".into(), &[num_days, d], Init::Normal));
        let pos_table = (config.uses(HeadKind::AbsPos) || config.input_position)
            .then(|| b.add("pos_table".into(), &[config.max_len, d], Init::Normal));
        let rel_time_table = config
            .uses(HeadKind::RelTime)
            .then(|| b.add("rel_time_table".into(), &[config.kt + 1, d], Init::Normal));
        let rel_pos_table = config
            .uses(HeadKind::RelPos)
            .then(|| b.add("rel_pos_table".into(), &[2 * config.kp + 1, d], Init::Normal));

        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let mut heads = Vec::with_capacity(config.heads.len());
            for (h, &kind) in config.heads.iter().enumerate() {
                let p = format!("layer{l}.head{h}");
                let w_q = b.add(format!("{p}.w_q"), &[d, dh], Init::Normal);
                let w_k = b.add(format!("{p}.w_k"), &[d, dh], Init::Normal);
                let w_v = b.add(format!("{p}.w_v"), &[d, dh], Init::Normal);
                let relative = matches!(kind, HeadKind::RelTime | HeadKind::RelPos).then(|| {
                    (
                        b.add(format!("{p}.w_r"), &[d, dh], Init::Normal),
                        b.add(format!("{p}.u"), &[dh], Init::Normal),
                        b.add(format!("{p}.w"), &[dh], Init::Normal),
                    )
                });
                heads.push(HeadParams {
                    kind,
                    w_q,
                    w_k,
                    w_v,
                    relative,
                });
            }
            let p = format!("layer{l}");
            layers.push(LayerParams {
                heads,
                w_o: b.add(format!("{p}.w_o"), &[d, d], Init::Normal),
                ln1: (
                    b.add(format!("{p}.ln1.gamma"), &[d], Init::Ones),
                    b.add(format!("{p}.ln1.beta"), &[d], Init::Zeros),
                ),
                w1: b.add(format!("{p}.ffn.w1"), &[d, 4 * d], Init::Normal),
                b1: b.add(format!("{p}.ffn.b1"), &[4 * d], Init::Zeros),
                w2: b.add(format!("{p}.ffn.w2"), &[4 * d, d], Init::Normal),
                b2: b.add(format!("{p}.ffn.b2"), &[d], Init::Zeros),
                ln2: (
                    b.add(format!("{p}.ln2.gamma"), &[d], Init::Ones),
                    b.add(format!("{p}.ln2.beta"), &[d], Init::Zeros),
                ),
            });
        }
        let out_w = b.add("out.w".into(), &[d, d], Init::Normal);
        let out_b = b.add("out.b".into(), &[d], Init::Zeros);
        let out_ln = (
            b.add("out.ln.gamma".into(), &[d], Init::Ones),
            b.add("out.ln.beta".into(), &[d], Init::Zeros),
        );
        let item_bias = b.add("out.item_bias".into(), &[vocab_rows], Init::Zeros);

        Ok(Self {
            config,
            vocab_rows,
            num_days,
            names: b.names,
            params: b.tensors,
            layout: Layout {
                item_table,
                time_table,
                pos_table,
                rel_time_table,
                rel_pos_table,
                layers,
                out_w,
                out_b,
                out_ln,
                item_bias,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab_rows(&self) -> usize {
        self.vocab_rows
    }

    pub fn mask_token(&self) -> usize {
        self.vocab_rows - 1
    }

    pub fn num_days(&self) -> usize {
        self.num_days
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.params[i])
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Index of the item table among [`Self::params`].
    pub fn item_table_index(&self) -> usize {
        self.layout.item_table.0
    }

    /// Places every parameter on `tape`, in [`Self::params`] order.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                let mut p = p.clone();
                p.clear_grad();
                p.set_requires_grad(trainable);
                tape.leaf(p)
            })
            .collect()
    }

    /// Item lookup `H⁽⁰⁾ = M_I[items]`, `[len × d]`.
    pub fn embed_items(&self, tape: &mut Tape<T>, vars: &[Var], items: &[usize]) -> Result<Var> {
        tape.gather_rows(vars[self.layout.item_table.0], items)
    }

    /// Full encoder pass: item embedding followed by every MHAR layer.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        batch: &Batch,
        training: bool,
        rng: &mut R,
    ) -> Result<Forward> {
        let (bsz, n) = (batch.batch_size, batch.seq_len);
        if n != self.config.max_len {
            return Err(Error::Shape(format!(
                "batch sequence length {n} differs from model max_len {}",
                self.config.max_len
            )));
        }
        let mut h = self.embed_items(tape, vars, &batch.items)?;
        if self.config.input_position {
            let pos = self.position_embedding(tape, vars, batch)?;
            h = tape.add(h, pos)?;
        }
        let ctx = BatchContext::new(self, batch);
        let mut attention = Vec::with_capacity(self.config.layers);
        for l in 0..self.config.layers {
            let (next, weights) = self.mhar_layer(tape, vars, l, h, &ctx, training, rng)?;
            h = next;
            attention.push(weights);
        }
        debug_assert_eq!(tape.shape(h), &[bsz * n, self.config.hidden]);
        Ok(Forward { hidden: h, attention })
    }

    fn position_embedding(&self, tape: &mut Tape<T>, vars: &[Var], batch: &Batch) -> Result<Var> {
        let table = self.layout.pos_table.expect("position table");
        let rows: Vec<usize> = batch.positions.iter().map(|&p| p - 1).collect();
        tape.gather_rows(vars[table.0], &rows)
    }

    fn time_embedding(&self, tape: &mut Tape<T>, vars: &[Var], batch: &Batch) -> Result<Var> {
        let table = self.layout.time_table.expect("time table");
        let last = self.num_days as i64 - 1;
        let rows: Vec<usize> = batch.days.iter().map(|&d| d.clamp(0, last) as usize).collect();
        tape.gather_rows(vars[table.0], &rows)
    }

    /// One transformer layer: parallel heads, `W^O`, then post-norm residual
    /// blocks around the attention and the GELU feed-forward network.
    #[allow(clippy::too_many_arguments)]
    pub fn mhar_layer<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        layer: usize,
        h: Var,
        ctx: &BatchContext,
        training: bool,
        rng: &mut R,
    ) -> Result<(Var, Vec<Var>)> {
        let lp = &self.layout.layers[layer];
        let input = HeadInput {
            h,
            batch: ctx.batch.batch_size,
            seq_len: ctx.batch.seq_len,
            key_mask: &ctx.batch.pad_mask,
        };
        let mut outs = Vec::with_capacity(lp.heads.len());
        let mut weights = Vec::with_capacity(lp.heads.len());
        for hp in &lp.heads {
            let proj = Projections {
                w_q: vars[hp.w_q.0],
                w_k: vars[hp.w_k.0],
                w_v: vars[hp.w_v.0],
            };
            let head = match hp.kind {
                HeadKind::Content => absolute_head(tape, &input, None, proj)?,
                HeadKind::AbsTime => {
                    let e = self.time_embedding(tape, vars, ctx.batch)?;
                    absolute_head(tape, &input, Some(e), proj)?
                }
                HeadKind::AbsPos => {
                    let e = self.position_embedding(tape, vars, ctx.batch)?;
                    absolute_head(tape, &input, Some(e), proj)?
                }
                HeadKind::RelTime | HeadKind::RelPos => {
                    let (w_r, u, w) = hp.relative.expect("relative head params");
                    let (table, index) = if hp.kind == HeadKind::RelTime {
                        (self.layout.rel_time_table, ctx.ti_index.clone())
                    } else {
                        (self.layout.rel_pos_table, ctx.pi_index.clone())
                    };
                    let rel = Relative {
                        table: vars[table.expect("relative table").0],
                        w_r: vars[w_r.0],
                        u: vars[u.0],
                        w: vars[w.0],
                        index: index.expect("interval index"),
                    };
                    relative_head(tape, &input, &rel, proj)?
                }
            };
            outs.push(head.out);
            weights.push(head.weights);
        }
        let rate = self.config.dropout;
        let eps = T::lit(self.config.layer_norm_eps);
        let cat = tape.concat_cols(&outs)?;
        let attn = tape.matmul(cat, vars[lp.w_o.0])?;
        let attn = tape.dropout(attn, rate, rng, training)?;
        let res = tape.add(h, attn)?;
        let z = tape.layer_norm(res, vars[lp.ln1.0 .0], vars[lp.ln1.1 .0], eps)?;

        let f = tape.matmul(z, vars[lp.w1.0])?;
        let f = tape.add_bias(f, vars[lp.b1.0])?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, vars[lp.w2.0])?;
        let f = tape.add_bias(f, vars[lp.b2.0])?;
        let f = tape.dropout(f, rate, rng, training)?;
        let res = tape.add(z, f)?;
        let out = tape.layer_norm(res, vars[lp.ln2.0 .0], vars[lp.ln2.1 .0], eps)?;
        Ok((out, weights))
    }

    /// Item scores for hidden rows `[M×d]`: `LN(GELU(xW + b))·M_Iᵀ + bias`,
    /// `[M × vocab_rows]`. PAD and MASK columns are real numbers here; losses
    /// exclude them and [`Self::rank_scores`] sets them to −∞.
    pub fn output_logits(&self, tape: &mut Tape<T>, vars: &[Var], rows: Var) -> Result<Var> {
        let l = &self.layout;
        let x = tape.matmul(rows, vars[l.out_w.0])?;
        let x = tape.add_bias(x, vars[l.out_b.0])?;
        let x = tape.gelu(x);
        let x = tape.layer_norm(x, vars[l.out_ln.0 .0], vars[l.out_ln.1 .0], T::lit(self.config.layer_norm_eps))?;
        let logits = tape.matmul_bt(x, vars[l.item_table.0])?;
        tape.add_bias(logits, vars[l.item_bias.0])
    }

    /// Columns that never receive probability mass.
    pub fn excluded_columns(&self) -> [usize; 2] {
        [PAD, self.mask_token()]
    }

    /// Eval-mode encoding of `batch`, `[B·n × d]`.
    pub fn encode(&self, batch: &Batch) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let fwd = self.forward(&mut tape, &vars, batch, false, &mut NoRng)?;
        Ok(tape.value(fwd.hidden).clone())
    }

    /// Eval-mode ranking scores at `(row, position)` pairs of `batch`.
    /// PAD and MASK columns are −∞.
    pub fn rank_scores(&self, batch: &Batch, at: &[(usize, usize)]) -> Result<Vec<Vec<T>>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let fwd = self.forward(&mut tape, &vars, batch, false, &mut NoRng)?;
        let flat: Vec<usize> = at.iter().map(|&(b, p)| b * batch.seq_len + p).collect();
        let rows = tape.gather_rows(fwd.hidden, &flat)?;
        let logits = self.output_logits(&mut tape, &vars, rows)?;
        let v = tape.value(logits);
        Ok((0..at.len())
            .map(|r| {
                let mut row = v.row(r).to_vec();
                for c in self.excluded_columns() {
                    row[c] = T::neg_infinity();
                }
                row
            })
            .collect())
    }

    pub(crate) fn from_parts(config: ModelConfig, vocab_rows: usize, num_days: usize, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        // Rebuild the layout, then overwrite every tensor by name.
        let mut model = Self::new(config, vocab_rows, num_days, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        if tensors.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                tensors.len()
            )));
        }
        for (name, t) in tensors {
            let slot = model
                .param_by_name_mut(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
            if slot.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(model)
    }
}

/// Interval indices shared by every layer of one pass.
pub struct BatchContext<'a> {
    pub batch: &'a Batch,
    ti_index: Option<Arc<[u32]>>,
    pi_index: Option<Arc<[u32]>>,
}

impl<'a> BatchContext<'a> {
    pub fn new<T: Scalar>(model: &TemProxRec<T>, batch: &'a Batch) -> Self {
        let cfg = &model.config;
        let (b, n) = (batch.batch_size, batch.seq_len);
        Self {
            batch,
            ti_index: cfg
                .uses(HeadKind::RelTime)
                .then(|| attention::ti_table_index(&batch.days, b, n, cfg.kt)),
            pi_index: cfg.uses(HeadKind::RelPos).then(|| attention::pi_table_index(n, cfg.kp)),
        }
    }
}

/// Stand-in rng for eval passes, where dropout never draws.
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("eval pass drew randomness")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("eval pass drew randomness")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("eval pass drew randomness")
    }
    fn try_fill_bytes(&mut self, _: &mut [u8]) -> std::result::Result<(), rand::Error> {
        unreachable!("eval pass drew randomness")
    }
}
