//! TDNN speaker encoder with statistics pooling and a projection head.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::numerics::{BatchStats, Scalar, SeqLayout, Tape, Tensor, Var};
use crate::rng;

/// Kernel and dilation of the five frame-level layers.
pub const TDNN_GEOMETRY: [(usize, usize); 5] = [(5, 1), (3, 2), (3, 3), (1, 1), (1, 1)];

/// Frames consumed by the convolution stack (receptive field minus one).
pub const CONTEXT: usize = {
    let mut c = 0;
    let mut i = 0;
    while i < TDNN_GEOMETRY.len() {
        c += (TDNN_GEOMETRY[i].0 - 1) * TDNN_GEOMETRY[i].1;
        i += 1;
    }
    c
};

/// Shortest chunk the encoder accepts.
pub const MIN_FRAMES: usize = CONTEXT + 1;

pub const RUNNING_STATS_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub channels: [usize; 5],
    pub embed_dim: usize,
    pub proj_dim: usize,
}

impl EncoderConfig {
    pub fn tdnn_paper() -> Self {
        Self {
            input_dim: 30,
            channels: [512, 512, 512, 512, 1500],
            embed_dim: 512,
            proj_dim: 512,
        }
    }

    pub fn tdnn_tiny() -> Self {
        Self {
            input_dim: 30,
            channels: [32, 32, 32, 32, 96],
            embed_dim: 128,
            proj_dim: 128,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tdnn-paper" => Ok(Self::tdnn_paper()),
            "tdnn-tiny" => Ok(Self::tdnn_tiny()),
            other => Err(Error::Config(format!(
                "unknown architecture `{other}` (expected tdnn-paper or tdnn-tiny)"
            ))),
        }
    }

    /// Width of the pooled mean‖std vector.
    pub fn pooled_dim(&self) -> usize {
        2 * self.channels[4]
    }

    /// Parameter names and shapes in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut c_in = self.input_dim;
        for (i, (&(k, _), &c)) in TDNN_GEOMETRY.iter().zip(&self.channels).enumerate() {
            let l = i + 1;
            out.push((format!("conv{l}.weight"), vec![k * c_in, c]));
            out.push((format!("conv{l}.bias"), vec![c]));
            out.push((format!("conv{l}.bn.gamma"), vec![c]));
            out.push((format!("conv{l}.bn.beta"), vec![c]));
            c_in = c;
        }
        let (e, p) = (self.embed_dim, self.proj_dim);
        out.push(("embed.weight".into(), vec![self.pooled_dim(), e]));
        out.push(("embed.bias".into(), vec![e]));
        out.push(("head1.weight".into(), vec![e, p]));
        out.push(("head1.bias".into(), vec![p]));
        out.push(("head1.bn.gamma".into(), vec![p]));
        out.push(("head1.bn.beta".into(), vec![p]));
        out.push(("head2.weight".into(), vec![p, p]));
        out.push(("head2.bias".into(), vec![p]));
        out
    }

    /// Batch-norm layer names, in forward order.
    pub fn norm_layers(&self) -> Vec<String> {
        let mut out: Vec<String> = (1..=5).map(|l| format!("conv{l}.bn")).collect();
        out.push("head1.bn".into());
        out
    }

    fn norm_widths(&self) -> Vec<usize> {
        let mut out = self.channels.to_vec();
        out.push(self.proj_dim);
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in every batch-norm.
    Train,
    /// Running statistics; deterministic.
    Eval,
}

/// Running mean and variance of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Trainable weights plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T: Scalar = f32> {
    config: EncoderConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    running: Vec<RunningStats<T>>,
}

/// Handles to the encoder's outputs on a tape.
pub struct Encoded<T> {
    pub pooled: Var,
    pub embedding: Var,
    pub projection: Var,
    /// Observed batch statistics, one per norm layer (train mode only).
    pub batch_stats: Vec<BatchStats<T>>,
}

/// Embedding used for scoring and unit-norm projection used by the losses.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingPair {
    pub embedding: Vec<f32>,
    pub projection: Vec<f32>,
}

impl<T: Scalar> EncoderParams<T> {
    /// Random initialization: uniform weights with unit-variance fan-in
    /// scaling, zero biases, identity batch-norm.
    pub fn init(config: EncoderConfig, seed: u64) -> Self {
        let mut r = rng::stream(seed, &[rng::tag("encoder-init")]);
        let shapes = config.param_shapes();
        let mut names = Vec::with_capacity(shapes.len());
        let mut tensors = Vec::with_capacity(shapes.len());
        for (name, shape) in shapes {
            let t = if name.ends_with(".weight") {
                let bound = (3.0 / shape[0] as f64).sqrt();
                let n = shape.iter().product();
                let data = (0..n)
                    .map(|_| T::from_f64(r.random_range(-bound..bound)))
                    .collect();
                Tensor::new(shape, data).expect("shape from config")
            } else if name.ends_with(".gamma") {
                Tensor::filled(&shape, T::ONE)
            } else {
                Tensor::zeros(&shape)
            };
            names.push(name);
            tensors.push(t);
        }
        let running = config
            .norm_widths()
            .into_iter()
            .map(|w| RunningStats {
                mean: vec![T::ZERO; w],
                var: vec![T::ONE; w],
            })
            .collect();
        Self {
            config,
            names,
            tensors,
            running,
        }
    }

    /// Rebuilds parameters from named tensors, as written by [`Self::named`].
    pub fn from_named(config: EncoderConfig, named: &[(String, Tensor<T>)]) -> Result<Self> {
        let find = |name: &str| {
            named
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
        };
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in config.param_shapes() {
            let t = find(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, architecture expects {shape:?}",
                    t.shape()
                )));
            }
            names.push(name);
            tensors.push(t);
        }
        let mut running = Vec::new();
        for (layer, w) in config.norm_layers().iter().zip(config.norm_widths()) {
            let mean = find(&format!("{layer}.running_mean"))?.into_data();
            let var = find(&format!("{layer}.running_var"))?.into_data();
            if mean.len() != w || var.len() != w {
                return Err(Error::Checkpoint(format!("running stats of `{layer}` have the wrong width")));
            }
            running.push(RunningStats { mean, var });
        }
        Ok(Self {
            config,
            names,
            tensors,
            running,
        })
    }

    /// Parameters followed by running statistics, all named.
    pub fn named(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = self
            .names
            .iter()
            .cloned()
            .zip(self.tensors.iter().cloned())
            .collect();
        for (layer, rs) in self.config.norm_layers().iter().zip(&self.running) {
            out.push((format!("{layer}.running_mean"), Tensor::from_vec(rs.mean.clone())));
            out.push((format!("{layer}.running_var"), Tensor::from_vec(rs.var.clone())));
        }
        out
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn running(&self) -> &[RunningStats<T>] {
        &self.running
    }

    pub fn num_weights(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> EncoderParams<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64(x.to_f64())).collect();
        EncoderParams {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            running: self
                .running
                .iter()
                .map(|r| RunningStats {
                    mean: conv(&r.mean),
                    var: conv(&r.var),
                })
                .collect(),
        }
    }

    /// Puts every parameter on `tape`, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    /// Runs the encoder over packed frames `[rows, input_dim]`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        frames: Var,
        layout: &SeqLayout,
        mode: Mode,
    ) -> Result<Encoded<T>> {
        if vars.len() != self.tensors.len() {
            return Err(Error::Contract(format!(
                "{} bound parameters for an encoder with {}",
                vars.len(),
                self.tensors.len()
            )));
        }
        let (_, dim) = tape.value(frames).expect_2d("encoder")?;
        if dim != self.config.input_dim {
            return Err(Error::shape(
                "encoder",
                format!("{dim}-dim frames, encoder expects {}", self.config.input_dim),
            ));
        }
        if let Some(short) = layout.lengths().into_iter().find(|&l| l < MIN_FRAMES) {
            return Err(Error::Contract(format!(
                "chunk of {short} frames is shorter than the {MIN_FRAMES}-frame receptive field"
            )));
        }
        let mut stats = Vec::new();
        let mut norm_idx = 0;
        let mut norm = |tape: &mut Tape<T>, x: Var, g: Var, b: Var| -> Result<Var> {
            let out = match mode {
                Mode::Train => {
                    let (y, s) = tape.batch_norm(x, g, b)?;
                    stats.push(s);
                    y
                }
                Mode::Eval => {
                    let rs = &self.running[norm_idx];
                    tape.frozen_norm(x, g, b, &rs.mean, &rs.var)?
                }
            };
            norm_idx += 1;
            Ok(out)
        };

        let mut x = frames;
        let mut lay = layout.clone();
        let mut p = vars.iter().copied();
        let mut next = || p.next().expect("parameter count checked above");
        for &(k, d) in &TDNN_GEOMETRY {
            let (w, b, g, beta) = (next(), next(), next(), next());
            let (y, l) = tape.conv1d(x, w, b, &lay, k, d)?;
            let y = tape.relu(y);
            x = norm(tape, y, g, beta)?;
            lay = l;
        }
        let pooled = tape.stats_pool(x, &lay)?;
        let (ew, eb) = (next(), next());
        let e = tape.matmul(pooled, ew)?;
        let embedding = tape.add_row(e, eb)?;

        let (w1, b1, g1, be1, w2, b2) = (next(), next(), next(), next(), next(), next());
        let h = tape.matmul(embedding, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = norm(tape, h, g1, be1)?;
        let h = tape.relu(h);
        let h = tape.matmul(h, w2)?;
        let h = tape.add_row(h, b2)?;
        let projection = tape.l2_normalize(h)?;
        Ok(Encoded {
            pooled,
            embedding,
            projection,
            batch_stats: stats,
        })
    }

    /// Folds observed batch statistics into the running estimates.
    pub fn update_running(&mut self, stats: &[BatchStats<T>], momentum: f64) -> Result<()> {
        if stats.len() != self.running.len() {
            return Err(Error::Contract(format!(
                "{} batch statistics for {} norm layers",
                stats.len(),
                self.running.len()
            )));
        }
        let m = T::from_f64(momentum);
        for (rs, s) in self.running.iter_mut().zip(stats) {
            for (r, &v) in rs.mean.iter_mut().zip(&s.mean) {
                *r = (T::ONE - m) * *r + m * v;
            }
            for (r, &v) in rs.var.iter_mut().zip(&s.var) {
                *r = (T::ONE - m) * *r + m * v;
            }
        }
        Ok(())
    }

    /// Encodes a list of chunks without recording gradients.
    pub fn encode(&self, chunks: &[&Tensor<T>], mode: Mode) -> Result<Vec<EmbeddingPair>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let (packed, layout) = pack(chunks)?;
        let x = tape.constant(packed);
        let out = self.forward(&mut tape, &vars, x, &layout, mode)?;
        let (e, p) = (tape.value(out.embedding), tape.value(out.projection));
        Ok((0..chunks.len())
            .map(|i| EmbeddingPair {
                embedding: e.row(i).iter().map(|v| v.to_f64() as f32).collect(),
                projection: p.row(i).iter().map(|v| v.to_f64() as f32).collect(),
            })
            .collect())
    }
}

/// Stacks `[T_i, F]` chunks into one `[Σ T_i, F]` matrix.
pub fn pack<T: Scalar>(chunks: &[&Tensor<T>]) -> Result<(Tensor<T>, SeqLayout)> {
    let first = chunks
        .first()
        .ok_or_else(|| Error::Contract("cannot encode an empty batch".into()))?;
    let (_, f) = first.expect_2d("pack")?;
    let mut lengths = Vec::with_capacity(chunks.len());
    let mut data = Vec::with_capacity(chunks.iter().map(|c| c.len()).sum());
    for c in chunks {
        let (t, cf) = c.expect_2d("pack")?;
        if cf != f {
            return Err(Error::shape("pack", format!("{cf}-dim chunk in a batch of {f}-dim chunks")));
        }
        lengths.push(t);
        data.extend_from_slice(c.data());
    }
    let layout = SeqLayout::from_lengths(&lengths);
    Ok((Tensor::new(vec![layout.total_rows(), f], data)?, layout))
}

/// Momentum update `θ_k ← m·θ_k + (1−m)·θ_q`, evaluated in double precision.
/// Batch-norm running statistics are copied from the query encoder.
pub fn ema_update(key: &mut EncoderParams<f32>, query: &EncoderParams<f32>, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Contract(format!("EMA momentum {m} outside [0, 1]")));
    }
    if key.config != query.config
        || key
            .tensors
            .iter()
            .zip(&query.tensors)
            .any(|(a, b)| a.shape() != b.shape())
    {
        return Err(Error::Contract("EMA between encoders of different shapes".into()));
    }
    for (k, q) in key.tensors.iter_mut().zip(&query.tensors) {
        for (kv, &qv) in k.data_mut().iter_mut().zip(q.data()) {
            *kv = (m * *kv as f64 + (1.0 - m) * qv as f64) as f32;
        }
    }
    key.running = query.running.clone();
    Ok(())
}
