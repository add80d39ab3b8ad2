//! Feature/label encoders producing diagonal-Gaussian latent subspaces,
//! reparameterized sampling, subspace collapse, and the closed-form KL
//! alignment between the two branches.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::numerics::{ParamStore, Tape, Tensor, Var};

/// Which side of the two-branch model an encoder belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    /// Encodes features `x`.
    Feature,
    /// Encodes label vectors `y`.
    Label,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Feature => "feature",
            Branch::Label => "label",
        }
    }
}

/// Batched set of diagonal Gaussians, both tensors shaped `[batch, count, d]`.
#[derive(Debug, Clone, Copy)]
pub struct GaussianSubspaces {
    pub mean: Var,
    pub variance: Var,
}

impl GaussianSubspaces {
    /// `(batch, count, d)`
    pub fn dims(&self, tape: &Tape) -> (usize, usize, usize) {
        let s = tape.value(self.mean).shape();
        (s[0], s[1], s[2])
    }
}

/// Three-layer MLP encoder: two ReLU hidden layers, then mean and
/// log-variance heads of width `count * d`.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub branch: Branch,
    pub input_dim: usize,
    pub count: usize,
    pub dim: usize,
    pub hidden: Vec<Linear>,
    pub mean_head: Linear,
    pub logvar_head: Linear,
}

impl EncoderParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        branch: Branch,
        input_dim: usize,
        hidden_widths: &[usize],
        count: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let prefix = format!("{}_encoder", branch.name());
        let mut hidden = Vec::with_capacity(hidden_widths.len());
        let mut fan_in = input_dim;
        for (i, &w) in hidden_widths.iter().enumerate() {
            hidden.push(Linear::new(store, &format!("{prefix}.hidden{i}"), fan_in, w, 2.0, rng));
            fan_in = w;
        }
        let mean_head = Linear::new(store, &format!("{prefix}.mean"), fan_in, count * dim, 1.0, rng);
        let logvar_head =
            Linear::new(store, &format!("{prefix}.logvar"), fan_in, count * dim, 1.0, rng);
        Self {
            branch,
            input_dim,
            count,
            dim,
            hidden,
            mean_head,
            logvar_head,
        }
    }
}

/// Runs the encoder on a `[batch, input_dim]` input. Variances are
/// `exp(log-variance head)`, hence strictly positive.
pub fn encode<R: Rng + ?Sized>(
    tape: &mut Tape,
    store: &ParamStore,
    enc: &EncoderParams,
    input: Var,
    dropout: f64,
    training: bool,
    rng: &mut R,
) -> Result<GaussianSubspaces> {
    let shape = tape.value(input).shape().to_vec();
    if shape.len() != 2 || shape[1] != enc.input_dim {
        return Err(Error::shape("encode", &shape, &[enc.input_dim]));
    }
    let batch = shape[0];
    let mut h = input;
    for layer in &enc.hidden {
        h = layer.forward(tape, store, h)?;
        h = tape.relu(h)?;
        h = tape.dropout(h, dropout, training, rng)?;
    }
    let mean = enc.mean_head.forward(tape, store, h)?;
    let logvar = enc.logvar_head.forward(tape, store, h)?;
    let mean = tape.reshape(mean, &[batch, enc.count, enc.dim])?;
    let logvar = tape.reshape(logvar, &[batch, enc.count, enc.dim])?;
    let variance = tape.exp(logvar)?;
    Ok(GaussianSubspaces { mean, variance })
}

/// `z = mean + sqrt(variance) * eps` with `eps ~ N(0, I)` held constant.
pub fn reparameterize<R: Rng + ?Sized>(
    tape: &mut Tape,
    subspaces: &GaussianSubspaces,
    rng: &mut R,
) -> Result<Var> {
    let shape = tape.value(subspaces.mean).shape().to_vec();
    let n: usize = shape.iter().product();
    let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let eps = tape.constant(Tensor::new(shape, eps)?);
    let std = tape.sqrt(subspaces.variance)?;
    let noise = tape.mul(std, eps)?;
    tape.add(subspaces.mean, noise)
}

/// Averages the `count` subspaces into one: mean of means and mean of
/// variances, per sample.
pub fn collapse(tape: &mut Tape, subspaces: &GaussianSubspaces) -> Result<GaussianSubspaces> {
    let (batch, count, d) = subspaces.dims(tape);
    if count == 0 {
        return Err(Error::EmptyAxis { op: "collapse" });
    }
    let mean = tape.mean_axis1(subspaces.mean)?;
    let variance = tape.mean_axis1(subspaces.variance)?;
    Ok(GaussianSubspaces {
        mean: tape.reshape(mean, &[batch, 1, d])?,
        variance: tape.reshape(variance, &[batch, 1, d])?,
    })
}

/// Per-sample `beta * [sum log(var_f / var_l) - d + sum var_l / var_f
/// + sum (mu_f - mu_l)^2 / var_f]`, i.e. twice `KL(label || feature)` scaled
/// by `beta`. Returns a `[batch]` tensor.
pub fn kl_aligned(
    tape: &mut Tape,
    feature: &GaussianSubspaces,
    label: &GaussianSubspaces,
    beta: f64,
) -> Result<Var> {
    let fd = feature.dims(tape);
    let ld = label.dims(tape);
    if fd.1 != 1 || ld.1 != 1 {
        return Err(Error::Contract(format!(
            "kl_aligned needs collapsed subspaces, got counts {} and {}",
            fd.1, ld.1
        )));
    }
    if fd != ld {
        return Err(Error::shape("kl_aligned", &[fd.0, fd.1, fd.2], &[ld.0, ld.1, ld.2]));
    }
    let log_f = tape.ln(feature.variance)?;
    let log_l = tape.ln(label.variance)?;
    let log_ratio = tape.sub(log_f, log_l)?;
    let var_ratio = tape.div(label.variance, feature.variance)?;
    let diff = tape.sub(feature.mean, label.mean)?;
    let sq = tape.square(diff)?;
    let maha = tape.div(sq, feature.variance)?;
    let terms = tape.add(log_ratio, var_ratio)?;
    let terms = tape.add(terms, maha)?;
    let terms = tape.add_scalar(terms, -1.0)?;
    let per_sample = tape.sum_last(terms)?;
    let per_sample = tape.reshape(per_sample, &[fd.0])?;
    tape.scale(per_sample, beta)
}
