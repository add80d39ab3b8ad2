//! The shared label decoder.
//!
//! Each label is a node with a `d`-dimensional state, initialized from a
//! learnable embedding. Every decoder layer first injects latent information
//! (attention from label nodes to the latent samples), then passes messages
//! between labels with masked multi-head self-attention over the label graph.
//! A per-label readout turns final node states into probabilities.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{normal_matrix, Linear, Norm};
use crate::numerics::{Mask, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphMode {
    Complete,
    Prior,
}

impl std::str::FromStr for GraphMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "complete" => Ok(GraphMode::Complete),
            "prior" => Ok(GraphMode::Prior),
            other => Err(Error::Parameter(format!("unknown graph mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for GraphMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GraphMode::Complete => "complete",
            GraphMode::Prior => "prior",
        })
    }
}

/// Undirected label graph without self-loops. `adjacency[i * L + j]` is
/// true iff `j` is a neighbor of `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelGraph {
    labels: usize,
    adjacency: Vec<bool>,
    mode: GraphMode,
}

impl LabelGraph {
    pub fn complete(labels: usize) -> Self {
        let adjacency = (0..labels * labels)
            .map(|k| k / labels != k % labels)
            .collect();
        Self {
            labels,
            adjacency,
            mode: GraphMode::Complete,
        }
    }

    pub fn from_adjacency(labels: usize, adjacency: Vec<bool>, mode: GraphMode) -> Result<Self> {
        if adjacency.len() != labels * labels {
            return Err(Error::shape("label graph", &[labels, labels], &[adjacency.len()]));
        }
        for i in 0..labels {
            if adjacency[i * labels + i] {
                return Err(Error::Validation(format!("self-loop on label {i}")));
            }
            for j in 0..i {
                if adjacency[i * labels + j] != adjacency[j * labels + i] {
                    return Err(Error::Validation(format!("asymmetric edge {i}-{j}")));
                }
            }
        }
        Ok(Self {
            labels,
            adjacency,
            mode,
        })
    }

    pub fn from_edges(labels: usize, edges: &[(usize, usize)], mode: GraphMode) -> Result<Self> {
        let mut adjacency = vec![false; labels * labels];
        for &(i, j) in edges {
            if i >= labels || j >= labels {
                return Err(Error::Validation(format!("edge {i}-{j} out of range")));
            }
            adjacency[i * labels + j] = true;
            adjacency[j * labels + i] = true;
        }
        Self::from_adjacency(labels, adjacency, mode)
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn mode(&self) -> GraphMode {
        self.mode
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.labels + j]
    }

    pub fn adjacency(&self) -> &[bool] {
        &self.adjacency
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.labels).filter(move |&j| self.has_edge(i, j))
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().filter(|&&e| e).count() / 2
    }

    /// Label-to-label attention mask. A node with no neighbors attends to
    /// itself only, so its softmax row is never empty.
    pub fn attention_mask(&self) -> Mask {
        let l = self.labels;
        let mut allowed = self.adjacency.clone();
        for i in 0..l {
            if !allowed[i * l..(i + 1) * l].iter().any(|&a| a) {
                allowed[i * l + i] = true;
            }
        }
        Mask::new(l, l, allowed).expect("square mask")
    }
}

/// Co-occurrence graph: labels `i != j` are connected iff some sample has
/// both. `labels` is a binary `[N, L]` matrix.
pub fn build_prior_graph(labels: &Tensor) -> Result<LabelGraph> {
    let s = labels.shape();
    if s.len() != 2 || s[0] == 0 {
        return Err(Error::DegenerateGraph("need at least one sample".into()));
    }
    let l = s[1];
    if l < 2 {
        return Err(Error::DegenerateGraph(format!("{l} labels")));
    }
    let mut adjacency = vec![false; l * l];
    for n in 0..s[0] {
        let row = labels.row(n);
        let on: Vec<usize> = (0..l).filter(|&k| row[k] > 0.5).collect();
        for &i in &on {
            for &j in &on {
                if i != j {
                    adjacency[i * l + j] = true;
                }
            }
        }
    }
    LabelGraph::from_adjacency(l, adjacency, GraphMode::Prior)
}

/// Whether latent information is injected at every decoder layer or only
/// the first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Injection {
    PerLayer,
    First,
}

impl std::str::FromStr for Injection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-layer" | "per_layer" => Ok(Injection::PerLayer),
            "first" => Ok(Injection::First),
            other => Err(Error::Parameter(format!("unknown inject mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for Injection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Injection::PerLayer => "per-layer",
            Injection::First => "first",
        })
    }
}

/// One attention sublayer plus its feed-forward sublayer.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: ParamId,
    pub attn_norm: Norm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub ff_norm: Norm,
}

impl AttentionBlock {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        let mut mat = |suffix: &str, rng: &mut R| {
            store.add(format!("{name}.{suffix}"), normal_matrix(rng, d, d, std))
        };
        let query = mat("query", rng);
        let key = mat("key", rng);
        let value = mat("value", rng);
        let output = mat("output", rng);
        let attn_norm = Norm::new(store, &format!("{name}.attn_norm"), d);
        let ff_in = Linear::new(store, &format!("{name}.ff_in"), d, 2 * d, 2.0, rng);
        let ff_out = Linear::new(store, &format!("{name}.ff_out"), 2 * d, d, 1.0, rng);
        let ff_norm = Norm::new(store, &format!("{name}.ff_norm"), d);
        Self {
            query,
            key,
            value,
            output,
            attn_norm,
            ff_in,
            ff_out,
            ff_norm,
        }
    }
}

/// Latent-to-label block and label-to-label block of one decoder layer.
/// Blocks are not tied across layers.
#[derive(Debug, Clone)]
pub struct DecoderLayerParams {
    pub feature_to_label: AttentionBlock,
    pub label_to_label: AttentionBlock,
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub labels: usize,
    pub dim: usize,
    pub heads: usize,
    /// `[L, d]`, the initial node states.
    pub label_embedding: ParamId,
    /// `[L, d]`, one readout row per label.
    pub readout: ParamId,
    pub layers: Vec<DecoderLayerParams>,
}

impl DecoderParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        labels: usize,
        dim: usize,
        heads: usize,
        layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Parameter(format!("d={dim} not divisible by h={heads}")));
        }
        if layers == 0 {
            return Err(Error::Parameter("decoder needs at least one layer".into()));
        }
        let std = 1.0 / (dim as f64).sqrt();
        let label_embedding = store.add("decoder.label_embedding", normal_matrix(rng, labels, dim, std));
        let layers = (0..layers)
            .map(|t| DecoderLayerParams {
                feature_to_label: AttentionBlock::new(store, &format!("decoder.layer{t}.fy"), dim, rng),
                label_to_label: AttentionBlock::new(store, &format!("decoder.layer{t}.yy"), dim, rng),
            })
            .collect();
        let readout = store.add("decoder.readout", normal_matrix(rng, labels, dim, std));
        Ok(Self {
            labels,
            dim,
            heads,
            label_embedding,
            readout,
            layers,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }
}

/// Runtime switches for one decoder evaluation.
#[derive(Debug, Clone, Copy)]
pub struct DecodeOptions {
    pub inject: Injection,
    pub dropout: f64,
    pub training: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            inject: Injection::PerLayer,
            dropout: 0.0,
            training: false,
        }
    }
}

/// Outputs of one decoder run.
#[derive(Debug, Clone)]
pub struct DecoderTrace {
    /// Final probabilities `[batch, L]`.
    pub probs: Var,
    /// Readouts of node states after layers `1..n-1`, each `[batch, L]`.
    pub intermediates: Vec<Var>,
    /// Label-to-label attention weights per layer, `[batch, heads, L, L]`.
    pub attention: Vec<Var>,
}

/// Multi-head attention from `queries [B, M, d]` to `keys [B, P, d]`, then
/// residual add and layer norm. Returns the normalized states and the
/// attention weights `[B, h, M, P]`.
#[allow(clippy::too_many_arguments)]
pub fn attention_pass<R: Rng + ?Sized>(
    tape: &mut Tape,
    store: &ParamStore,
    block: &AttentionBlock,
    heads: usize,
    queries: Var,
    keys: Var,
    mask: Option<&Mask>,
    opts: &DecodeOptions,
    rng: &mut R,
) -> Result<(Var, Var)> {
    let qs = tape.value(queries).shape().to_vec();
    let ks = tape.value(keys).shape().to_vec();
    if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] {
        return Err(Error::shape("attention_pass", &qs, &ks));
    }
    let (b, m, d) = (qs[0], qs[1], qs[2]);
    let p = ks[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::Parameter(format!("d={d} not divisible by h={heads}")));
    }
    let dh = d / heads;

    let wq = tape.param(store, block.query);
    let wk = tape.param(store, block.key);
    let wv = tape.param(store, block.value);
    let wo = tape.param(store, block.output);

    let split = |tape: &mut Tape, x: Var, w: Var, rows: usize| -> Result<Var> {
        let y = tape.matmul(x, w)?;
        let y = tape.reshape(y, &[b, rows, heads, dh])?;
        tape.permute_0213(y)
    };
    let q = split(tape, queries, wq, m)?;
    let k = split(tape, keys, wk, p)?;
    let v = split(tape, keys, wv, p)?;

    let scores = tape.batch_matmul(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let alpha = tape.softmax(scores, mask)?;
    let mixed = tape.batch_matmul(alpha, v, false)?;
    let mixed = tape.permute_0213(mixed)?;
    let mixed = tape.reshape(mixed, &[b, m, d])?;
    let projected = tape.matmul(mixed, wo)?;
    let projected = tape.dropout(projected, opts.dropout, opts.training, rng)?;
    let residual = tape.add(queries, projected)?;
    let out = block.attn_norm.forward(tape, store, residual)?;
    Ok((out, alpha))
}

/// `layer_norm(x + MLP(x))` with a `d -> 2d -> d` ReLU perceptron.
pub fn feed_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    store: &ParamStore,
    block: &AttentionBlock,
    x: Var,
    opts: &DecodeOptions,
    rng: &mut R,
) -> Result<Var> {
    let h = block.ff_in.forward(tape, store, x)?;
    let h = tape.relu(h)?;
    let h = block.ff_out.forward(tape, store, h)?;
    let h = tape.dropout(h, opts.dropout, opts.training, rng)?;
    let r = tape.add(x, h)?;
    block.ff_norm.forward(tape, store, r)
}

/// One decoder layer: optional latent injection into `u [B, L, d]` from
/// `latents [B, J, d]`, then masked label-to-label message passing.
/// Returns the new node states and the label-to-label attention weights.
#[allow(clippy::too_many_arguments)]
pub fn decoder_layer<R: Rng + ?Sized>(
    tape: &mut Tape,
    store: &ParamStore,
    layer: &DecoderLayerParams,
    heads: usize,
    u: Var,
    latents: Var,
    mask: &Mask,
    inject: bool,
    opts: &DecodeOptions,
    rng: &mut R,
) -> Result<(Var, Var)> {
    let mut state = u;
    if inject {
        let fy = &layer.feature_to_label;
        let (m, _) = attention_pass(tape, store, fy, heads, state, latents, None, opts, rng)?;
        state = feed_forward(tape, store, fy, m, opts, rng)?;
    }
    let yy = &layer.label_to_label;
    let (m, alpha) = attention_pass(tape, store, yy, heads, state, state, Some(mask), opts, rng)?;
    let next = feed_forward(tape, store, yy, m, opts, rng)?;
    Ok((next, alpha))
}

/// Per-label readout: `sigmoid(<readout_i, u_i>)` for each label `i`.
pub fn readout(tape: &mut Tape, u: Var, readout_weights: Var) -> Result<Var> {
    let prod = tape.mul_broadcast(u, readout_weights)?;
    let logits = tape.sum_last(prod)?;
    tape.sigmoid(logits)
}

/// Runs the full decoder on latent samples `latents [B, J, d]`.
pub fn decode<R: Rng + ?Sized>(
    tape: &mut Tape,
    store: &ParamStore,
    params: &DecoderParams,
    latents: Var,
    graph: &LabelGraph,
    opts: &DecodeOptions,
    rng: &mut R,
) -> Result<DecoderTrace> {
    let n = params.depth();
    if n < 1 {
        return Err(Error::Parameter("decoder needs at least one layer".into()));
    }
    if graph.labels() != params.labels {
        return Err(Error::shape("decode", &[graph.labels()], &[params.labels]));
    }
    let ls = tape.value(latents).shape().to_vec();
    if ls.len() != 3 || ls[2] != params.dim {
        return Err(Error::shape("decode", &ls, &[params.dim]));
    }
    let batch = ls[0];
    let mask = graph.attention_mask();
    let embed = tape.param(store, params.label_embedding);
    let w_out = tape.param(store, params.readout);

    let mut u = tape.expand(embed, batch)?;
    let mut intermediates = Vec::with_capacity(n - 1);
    let mut attention = Vec::with_capacity(n);
    for (t, layer) in params.layers.iter().enumerate() {
        let inject = t == 0 || opts.inject == Injection::PerLayer;
        let (next, alpha) =
            decoder_layer(tape, store, layer, params.heads, u, latents, &mask, inject, opts, rng)?;
        u = next;
        attention.push(alpha);
        if t + 1 < n {
            intermediates.push(readout(tape, u, w_out)?);
        }
    }
    let probs = readout(tape, u, w_out)?;
    Ok(DecoderTrace {
        probs,
        intermediates,
        attention,
    })
}

/// Default head count for an embedding width.
pub fn default_heads(dim: usize) -> usize {
    let h = if dim < 64 { 2 } else { 4 };
    if dim.is_multiple_of(h) {
        h
    } else {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn labels(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn prior_graph_from_cooccurrence() {
        let g = build_prior_graph(&labels(&[&[1.0, 1.0, 0.0], &[0.0, 1.0, 1.0]])).unwrap();
        assert!(g.has_edge(0, 1) && g.has_edge(1, 2));
        assert!(!g.has_edge(0, 2));
        assert_eq!(g.edge_count(), 2);

        let g = build_prior_graph(&labels(&[&[1.0, 1.0, 0.0], &[1.0, 0.0, 1.0], &[0.0, 1.0, 1.0]]))
            .unwrap();
        assert_eq!(g, LabelGraph::from_adjacency(3, LabelGraph::complete(3).adjacency, GraphMode::Prior).unwrap());

        let g = build_prior_graph(&labels(&[&[0.0, 0.0, 0.0], &[0.0, 0.0, 0.0]])).unwrap();
        assert_eq!(g.edge_count(), 0);

        assert!(matches!(
            build_prior_graph(&labels(&[&[1.0]])),
            Err(Error::DegenerateGraph(_))
        ));
    }

    #[test]
    fn graph_validation() {
        assert!(LabelGraph::from_adjacency(2, vec![true, false, false, false], GraphMode::Prior).is_err());
        assert!(LabelGraph::from_adjacency(2, vec![false, true, false, false], GraphMode::Prior).is_err());
        let c = LabelGraph::complete(4);
        assert_eq!(c.edge_count(), 6);
        assert!(!c.has_edge(2, 2));
    }

    #[test]
    fn isolated_node_attends_to_itself() {
        let g = LabelGraph::from_edges(3, &[(0, 1)], GraphMode::Prior).unwrap();
        let m = g.attention_mask();
        assert!(m.allows(2, 2));
        assert!(!m.allows(2, 0) && !m.allows(0, 0));
    }

    fn block_and_store(d: usize, seed: u64) -> (ParamStore, AttentionBlock) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block = AttentionBlock::new(&mut store, "b", d, &mut rng);
        (store, block)
    }

    #[test]
    fn zero_value_path_is_residual_only() {
        let d = 4;
        let (mut store, block) = block_and_store(d, 1);
        store.value_mut(block.value).data_mut().fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let q = tape.constant(normal_matrix(&mut rng, 3, d, 1.0).reshaped(vec![1, 3, d]).unwrap());
        let k = tape.constant(normal_matrix(&mut rng, 5, d, 1.0).reshaped(vec![1, 5, d]).unwrap());
        let opts = DecodeOptions::default();
        let (out, _) = attention_pass(&mut tape, &store, &block, 2, q, k, None, &opts, &mut rng).unwrap();
        let g = tape.constant(Tensor::full(&[d], 1.0));
        let b = tape.constant(Tensor::zeros(&[d]));
        let expect = tape.layer_norm(q, g, b).unwrap();
        assert_eq!(tape.value(out), tape.value(expect));
    }

    #[test]
    fn equal_scores_give_uniform_attention() {
        let d = 4;
        let (store, block) = block_and_store(d, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::new();
        let q = tape.constant(normal_matrix(&mut rng, 2, d, 1.0).reshaped(vec![1, 2, d]).unwrap());
        let row: Vec<f64> = normal_matrix(&mut rng, 1, d, 1.0).into_data();
        let keys: Vec<f64> = row.iter().cycle().take(4 * d).copied().collect();
        let k = tape.constant(Tensor::new(vec![1, 4, d], keys).unwrap());
        let opts = DecodeOptions::default();
        let (_, alpha) = attention_pass(&mut tape, &store, &block, 1, q, k, None, &opts, &mut rng).unwrap();
        for &a in tape.value(alpha).data() {
            assert!((a - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn readout_examples() {
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::zeros(&[1, 3, 2]));
        let w = tape.constant(Tensor::full(&[3, 2], 0.7));
        let p = readout(&mut tape, u, w).unwrap();
        assert_eq!(tape.value(p).data(), &[0.5, 0.5, 0.5]);

        let s = std::f64::consts::SQRT_2 / 2.0_f64.sqrt();
        let u = tape.constant(Tensor::new(vec![1, 1, 2], vec![s, 1.0]).unwrap());
        let w = tape.constant(Tensor::new(vec![1, 2], vec![s, 1.0]).unwrap());
        let p = readout(&mut tape, u, w).unwrap();
        assert!((tape.value(p).item() - 0.880_797_077_977_882_4).abs() < 1e-15);
    }

    #[test]
    fn decode_rejects_mismatched_graph() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = DecoderParams::new(&mut store, 3, 4, 2, 1, &mut rng).unwrap();
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[1, 1, 4]));
        let g = LabelGraph::complete(4);
        assert!(decode(&mut tape, &store, &params, z, &g, &DecodeOptions::default(), &mut rng).is_err());
        assert!(DecoderParams::new(&mut store, 3, 5, 2, 1, &mut rng).is_err());
        assert!(DecoderParams::new(&mut store, 3, 4, 2, 0, &mut rng).is_err());
    }

    #[test]
    fn zero_readout_gives_half() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = DecoderParams::new(&mut store, 3, 8, 2, 2, &mut rng).unwrap();
        store.value_mut(params.readout).data_mut().fill(0.0);
        let mut tape = Tape::new();
        let z = tape.constant(normal_matrix(&mut rng, 2, 8, 1.0).reshaped(vec![2, 1, 8]).unwrap());
        let tr = decode(&mut tape, &store, &params, z, &LabelGraph::complete(3), &DecodeOptions::default(), &mut rng)
            .unwrap();
        assert!(tape.value(tr.probs).data().iter().all(|&p| p == 0.5));
        assert_eq!(tr.intermediates.len(), 1);
        assert_eq!(tr.attention.len(), 2);
    }
}
