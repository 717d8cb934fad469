//! Co-attention interaction between the entity and relation streams.
//!
//! One layer builds the word-pair grid `Q[i, j] = [h_i^ner; h_j^re; d(j - i)]`,
//! convolves it into the shared grid, scores every cell with a small
//! feed-forward net to get `A`, and lets each stream attend over the other:
//!
//! ```text
//! alpha = softmax_rows(A)      g^ner = h^ner + alpha . h^re
//! beta  = softmax_rows(A^T)    g^re  = h^re  + beta  . h^ner
//! ```
//!
//! Layers are stacked with independent parameters. The shared grid of the
//! last layer also feeds the classifier heads.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::config::CareConfig;
use crate::encoder::EMBED_INIT_STD;
use crate::error::{Error, Result};
use crate::layers::Mlp2;
use crate::optim::{init_normal, init_uniform, ParamId, ParamStore};
use crate::tape::{Graph, Var};

/// Entity-specific and relation-specific token representations, `[n, d_task]` each.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskReps {
    pub ner: Var,
    pub re: Var,
}

/// Raw scores `A` (`[n, n]`) and both row-stochastic attention maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionPair {
    pub scores: Var,
    pub alpha: Var,
    pub beta: Var,
}

/// Index into the distance table for pair `(i, j)`: `clamp(j - i, -k, k) + k`.
pub fn distance_bucket(i: usize, j: usize, k: usize) -> usize {
    let offset = j as i64 - i as i64;
    (offset.clamp(-(k as i64), k as i64) + k as i64) as usize
}

/// The two task-specific MLPs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskProjection {
    pub ner: Mlp2,
    pub re: Mlp2,
}

impl TaskProjection {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, d_model: usize, d_task: usize) -> Result<Self> {
        Ok(Self {
            ner: Mlp2::new(store, rng, "project.ner", d_model, d_task, d_task)?,
            re: Mlp2::new(store, rng, "project.re", d_model, d_task, d_task)?,
        })
    }

    pub fn project(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<TaskReps> {
        Ok(TaskReps {
            ner: self.ner.forward(g, store, h)?,
            re: self.re.forward(g, store, h)?,
        })
    }
}

/// Builds the `[n, n, 2*d_task + d_dist]` pair grid. `distance` is the
/// embedding table and clamp radius, or `None` to omit the distance slice.
pub fn build_pair_grid(g: &mut Graph, reps: TaskReps, distance: Option<(Var, usize)>) -> Result<Var> {
    let n = g.shape(reps.ner)[0];
    let rows = g.grid_rows(reps.ner)?;
    let cols = g.grid_cols(reps.re)?;
    match distance {
        None => g.concat(&[rows, cols]),
        Some((table, k)) => {
            let idx: Vec<usize> = (0..n * n).map(|c| distance_bucket(c / n, c % n, k)).collect();
            let d = g.embedding(table, &idx)?;
            let width = g.shape(d)[1];
            let d = g.reshape(d, &[n, n, width])?;
            g.concat(&[rows, cols, d])
        }
    }
}

/// `relu(conv2d(q, kernel) + bias)`.
pub fn shared_conv(g: &mut Graph, q: Var, kernel: Var, bias: Var) -> Result<Var> {
    let y = g.conv2d(q, kernel)?;
    let y = g.add_bias(y, bias)?;
    Ok(g.relu(y))
}

/// Row softmax of `A` and of `A^T`.
pub fn attention_from_scores(g: &mut Graph, scores: Var) -> Result<AttentionPair> {
    let alpha = g.softmax(scores);
    let transposed = g.transpose(scores)?;
    let beta = g.softmax(transposed);
    Ok(AttentionPair { scores, alpha, beta })
}

/// Scores each shared cell to one scalar and normalizes both ways.
pub fn attention_scores(g: &mut Graph, store: &ParamStore, shared: Var, ffnn: &Mlp2) -> Result<AttentionPair> {
    let n = g.shape(shared)[0];
    let a = ffnn.forward(g, store, shared)?;
    let a = g.reshape(a, &[n, n])?;
    attention_from_scores(g, a)
}

/// Skip-connected cross-task update.
pub fn coattention_update(g: &mut Graph, reps: TaskReps, att: AttentionPair) -> Result<TaskReps> {
    if g.shape(reps.ner) != g.shape(reps.re) {
        return Err(Error::ShapeMismatch {
            op: "coattention_update",
            lhs: g.shape(reps.ner).to_vec(),
            rhs: g.shape(reps.re).to_vec(),
        });
    }
    let from_re = g.matmul(att.alpha, reps.re)?;
    let from_ner = g.matmul(att.beta, reps.ner)?;
    Ok(TaskReps {
        ner: g.add(reps.ner, from_re)?,
        re: g.add(reps.re, from_ner)?,
    })
}

/// Parameters of one interaction layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoAttentionLayer {
    pub distance: Option<ParamId>,
    /// `[k, k, grid_channels, d_share]`.
    pub conv_weight: ParamId,
    pub conv_bias: ParamId,
    /// Absent when co-attention is ablated.
    pub attention: Option<Mlp2>,
}

impl CoAttentionLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, config: &CareConfig, index: usize) -> Result<Self> {
        let prefix = format!("stack.{index}");
        let dd = config.effective_d_dist();
        let distance = if dd > 0 {
            Some(store.add(
                format!("{prefix}.distance"),
                init_normal(rng, &[config.distance_buckets(), dd], EMBED_INIT_STD),
            )?)
        } else {
            None
        };
        let k = config.kernel_size;
        let cin = config.grid_channels();
        let fan_in = k * k * cin;
        let conv_weight = store.add(
            format!("{prefix}.conv.weight"),
            init_uniform(rng, &[k, k, cin, config.d_share], fan_in),
        )?;
        let conv_bias = store.add(format!("{prefix}.conv.bias"), init_uniform(rng, &[config.d_share], fan_in))?;
        let attention = if config.use_coattention {
            Some(Mlp2::new(
                store,
                rng,
                &format!("{prefix}.attention"),
                config.d_share,
                config.d_share,
                1,
            )?)
        } else {
            None
        };
        Ok(Self {
            distance,
            conv_weight,
            conv_bias,
            attention,
        })
    }

    /// Pair grid followed by the shared convolution.
    pub fn shared_grid(&self, g: &mut Graph, store: &ParamStore, reps: TaskReps, k: usize) -> Result<Var> {
        let distance = self.distance.map(|id| (g.param(store, id), k));
        let q = build_pair_grid(g, reps, distance)?;
        let w = g.param(store, self.conv_weight);
        let b = g.param(store, self.conv_bias);
        shared_conv(g, q, w, b)
    }
}

/// Output of [`CoAttentionStack::run`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackOutput {
    pub reps: TaskReps,
    /// Shared grid of the last layer; `None` only when nothing consumes it.
    pub shared: Option<Var>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoAttentionStack {
    pub projection: TaskProjection,
    pub layers: Vec<CoAttentionLayer>,
    pub clamp_k: usize,
    pub use_coattention: bool,
    pub use_shared_in_classifier: bool,
}

impl CoAttentionStack {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, config: &CareConfig) -> Result<Self> {
        if config.n_layers < 1 {
            return Err(Error::InvalidConfig("n_layers must be at least 1".into()));
        }
        let projection = TaskProjection::new(store, rng, config.d_model, config.d_task)?;
        let layers = (0..config.n_layers)
            .map(|l| CoAttentionLayer::new(store, rng, config, l))
            .collect::<Result<_>>()?;
        Ok(Self {
            projection,
            layers,
            clamp_k: config.distance_clamp_k,
            use_coattention: config.use_coattention,
            use_shared_in_classifier: config.use_shared_in_classifier,
        })
    }

    pub fn run(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<StackOutput> {
        let mut reps = self.projection.project(g, store, h)?;
        let mut shared = None;
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            // Without attention the streams never change, so only the final
            // layer's grid can reach the output.
            if !self.use_coattention && (l != last || !self.use_shared_in_classifier) {
                continue;
            }
            let grid = layer.shared_grid(g, store, reps, self.clamp_k)?;
            if let Some(ffnn) = &layer.attention {
                let att = attention_scores(g, store, grid, ffnn)?;
                reps = coattention_update(g, reps, att)?;
            }
            shared = Some(grid);
        }
        Ok(StackOutput { reps, shared })
    }
}
