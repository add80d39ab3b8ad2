use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label_decoder::{decode, DecodeOptions, DecoderParams, DecoderTrace, Injection, LabelGraph};
use crate::losses::{total_loss, LossTerms, LossWeights};
use crate::numerics::{Exec, ParamStore, Tape, Tensor};
use crate::vae_align::{collapse, encode, kl_aligned, reparameterize, Branch, EncoderParams};

/// Rows per forward pass at inference.
const PREDICT_CHUNK: usize = 256;

/// Architecture of a model; enough to rebuild its parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub labels: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub hidden: Vec<usize>,
    pub inject: Injection,
}

#[derive(Debug, Clone)]
pub struct HotVae {
    pub spec: ModelSpec,
    pub graph: LabelGraph,
    pub store: ParamStore,
    pub feature_encoder: EncoderParams,
    pub label_encoder: EncoderParams,
    pub decoder: DecoderParams,
    pub exec: Exec,
}

/// Tape handles produced by one training forward pass.
#[derive(Debug, Clone)]
pub struct TrainForward {
    pub feature: DecoderTrace,
    pub label: DecoderTrace,
    pub loss: LossTerms,
}

impl HotVae {
    /// Initializes all parameters from `ChaCha8Rng::seed_from_u64(seed)`.
    pub fn new(spec: ModelSpec, graph: LabelGraph, seed: u64) -> Result<Self> {
        if graph.labels() != spec.labels {
            return Err(Error::shape("model graph", &[graph.labels()], &[spec.labels]));
        }
        if spec.input_dim == 0 || spec.labels == 0 {
            return Err(Error::Parameter("model needs features and labels".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let feature_encoder = EncoderParams::new(
            &mut store,
            Branch::Feature,
            spec.input_dim,
            &spec.hidden,
            1,
            spec.dim,
            &mut rng,
        );
        let label_encoder =
            EncoderParams::new(&mut store, Branch::Label, spec.labels, &spec.hidden, 1, spec.dim, &mut rng);
        let decoder = DecoderParams::new(&mut store, spec.labels, spec.dim, spec.heads, spec.layers, &mut rng)?;
        Ok(Self {
            spec,
            graph,
            store,
            feature_encoder,
            label_encoder,
            decoder,
            exec: Exec::default(),
        })
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    /// Two-branch forward pass with the full loss on `tape`. `kl` in the
    /// returned terms is unweighted; `weights.beta` multiplies it in `total`.
    pub fn forward_train<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        y: &Tensor,
        weights: &LossWeights,
        dropout: f64,
        rng: &mut R,
    ) -> Result<TrainForward> {
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let store = &self.store;
        let fe = encode(tape, store, &self.feature_encoder, xv, dropout, true, rng)?;
        let le = encode(tape, store, &self.label_encoder, yv, dropout, true, rng)?;
        let zf = reparameterize(tape, &fe, rng)?;
        let zl = reparameterize(tape, &le, rng)?;
        let cf = collapse(tape, &fe)?;
        let cl = collapse(tape, &le)?;
        let kl = kl_aligned(tape, &cf, &cl, 1.0)?;
        let opts = DecodeOptions {
            inject: self.spec.inject,
            dropout,
            training: true,
        };
        let feature = decode(tape, store, &self.decoder, zf, &self.graph, &opts, rng)?;
        let label = decode(tape, store, &self.decoder, zl, &self.graph, &opts, rng)?;
        let loss = total_loss(tape, yv, &feature, &label, kl, weights)?;
        Ok(TrainForward { feature, label, loss })
    }

    /// Feature-branch inference with `z` set to the posterior mean and
    /// dropout off. Returns `[N, L]` probabilities.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 2 || s[1] != self.spec.input_dim {
            return Err(Error::shape("predict", s, &[self.spec.input_dim]));
        }
        let (n, l) = (s[0], self.spec.labels);
        let mut out = Vec::with_capacity(n * l);
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let opts = DecodeOptions {
            inject: self.spec.inject,
            dropout: 0.0,
            training: false,
        };
        for start in (0..n).step_by(PREDICT_CHUNK) {
            let end = (start + PREDICT_CHUNK).min(n);
            let rows: Vec<usize> = (start..end).collect();
            let chunk = crate::data::gather_rows(x, &rows);
            let mut tape = Tape::with_exec(self.exec);
            let xv = tape.constant(chunk);
            let enc = encode(&mut tape, &self.store, &self.feature_encoder, xv, 0.0, false, &mut unused)?;
            let z = collapse(&mut tape, &enc)?.mean;
            let tr = decode(&mut tape, &self.store, &self.decoder, z, &self.graph, &opts, &mut unused)?;
            out.extend_from_slice(tape.value(tr.probs).data());
        }
        Tensor::new(vec![n, l], out)
    }
}
