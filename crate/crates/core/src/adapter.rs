//! Temporal adapter: self-attention across the frame axis.
//!
//! Features of a clip are reshaped so that every frame becomes one token,
//! projected to queries, keys and values, attended with
//! `softmax(Q Kᵀ / √d) V`, projected back and added to the input. The output
//! projection starts at zero, so a freshly injected adapter is the identity.

use ndarray::{Array2, Array5, ArrayD, IxDyn};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{AdapterMode, Binder, ModelConfig, Path, Stage};
use crate::rng;
use crate::scalar::Scalar;
use crate::store::ParameterStore;

pub const ADAPTER_PREFIX: &str = "adapter.";

pub fn is_adapter_param(name: &str) -> bool {
    name.starts_with(ADAPTER_PREFIX)
}

/// Name prefix of the adapter at the end of `stage` on `path`.
pub fn site_prefix(path: Path, stage: Stage) -> String {
    format!("{ADAPTER_PREFIX}{}.{}", path.name(), stage.name())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterConfig {
    pub site: Stage,
    pub token_dim: usize,
    pub proj_dim: usize,
    pub mode: AdapterMode,
}

impl AdapterConfig {
    pub fn for_site(config: &ModelConfig, site: Stage) -> Self {
        AdapterConfig {
            site,
            token_dim: config.adapter_token_dim(site),
            proj_dim: config.adapter_proj_dim,
            mode: config.adapter_mode,
        }
    }
}

/// Projection matrices of one adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterWeights<T> {
    pub w_q: Array2<T>,
    pub w_k: Array2<T>,
    pub w_v: Array2<T>,
    pub w_o: Array2<T>,
}

impl<T: Scalar> AdapterWeights<T> {
    /// Fan-in uniform Q/K/V, zero output projection.
    pub fn init(cfg: &AdapterConfig, seed: u64, label: &str) -> Self {
        let (n, d) = (cfg.token_dim, cfg.proj_dim);
        let bound = 1.0 / (n as f64).sqrt();
        let draw = |which: &str| {
            let mut r = rng::derived_rng(seed, &format!("{label}.{which}"));
            rng::uniform_array::<T>(&mut r, &[n, d], bound)
                .into_dimensionality()
                .expect("rank 2")
        };
        AdapterWeights {
            w_q: draw("w_q"),
            w_k: draw("w_k"),
            w_v: draw("w_v"),
            w_o: Array2::zeros((d, n)),
        }
    }

    pub fn from_store(store: &ParameterStore<T>, prefix: &str) -> Result<Self> {
        let get = |n: &str| -> Result<Array2<T>> {
            store
                .require(&format!("{prefix}.{n}"))?
                .clone()
                .into_dimensionality()
                .map_err(|e| Error::shape(format!("{prefix}.{n}: {e}")))
        };
        Ok(AdapterWeights {
            w_q: get("w_q")?,
            w_k: get("w_k")?,
            w_v: get("w_v")?,
            w_o: get("w_o")?,
        })
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, ArrayD<T>)> {
        [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v), ("w_o", &self.w_o)]
            .into_iter()
            .map(|(n, a)| (format!("{prefix}.{n}"), a.clone().into_dyn()))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.w_q.len() + self.w_k.len() + self.w_v.len() + self.w_o.len()
    }
}

/// Records the adapter on `g` for folded features `(B·F, C, H, W)`.
pub(crate) fn adapter_graph<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    frames: usize,
    mode: AdapterMode,
    weights: [Var; 4],
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 || !shape[0].is_multiple_of(frames) {
        return Err(Error::shape(format!("adapter input {shape:?} with {frames} frames")));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let b = n / frames;
    let [wq, wk, wv, wo] = weights;
    let d = g.shape(wq)[1];
    let tokens = match mode {
        AdapterMode::Literal => g.reshape(x, &[b, frames, c * h * w])?,
        AdapterMode::SpatialShared => {
            let v = g.reshape(x, &[b, frames, c, h, w])?;
            let p = g.permute(v, &[0, 3, 4, 1, 2]);
            g.reshape(p, &[b * h * w, frames, c])?
        }
    };
    let q = g.linear(tokens, wq, None)?;
    let k = g.linear(tokens, wk, None)?;
    let v = g.linear(tokens, wv, None)?;
    let attended = g.attention(q, k, v, T::of(1.0 / (d as f64).sqrt()))?;
    let out = g.linear(attended, wo, None)?;
    let out = match mode {
        AdapterMode::Literal => g.reshape(out, &[n, c, h, w])?,
        AdapterMode::SpatialShared => {
            let o = g.reshape(out, &[b, h, w, frames, c])?;
            let p = g.permute(o, &[0, 3, 4, 1, 2]);
            g.reshape(p, &[n, c, h, w])?
        }
    };
    g.add(x, out)
}

pub(crate) fn apply_site<T: Scalar>(
    g: &mut Graph<T>,
    binder: &Binder<'_, T>,
    x: Var,
    frames: usize,
    mode: AdapterMode,
    prefix: &str,
) -> Result<Var> {
    let weights = [
        binder.bind(g, &format!("{prefix}.w_q"))?,
        binder.bind(g, &format!("{prefix}.w_k"))?,
        binder.bind(g, &format!("{prefix}.w_v"))?,
        binder.bind(g, &format!("{prefix}.w_o"))?,
    ];
    adapter_graph(g, x, frames, mode, weights)
}

/// Applies one adapter to features `(B, F, C, H, W)`.
pub fn adapter_forward<T: Scalar>(
    weights: &AdapterWeights<T>,
    mode: AdapterMode,
    features: &Array5<T>,
) -> Result<Array5<T>> {
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("adapter input has non-finite entries".into()));
    }
    let (b, f, c, h, w) = features.dim();
    let token_dim = match mode {
        AdapterMode::Literal => c * h * w,
        AdapterMode::SpatialShared => c,
    };
    if weights.w_q.nrows() != token_dim {
        return Err(Error::shape(format!(
            "adapter expects token width {}, features give {token_dim}",
            weights.w_q.nrows()
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(
        features
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(&[b * f, c, h, w]))
            .expect("contiguous"),
    );
    let ws = [&weights.w_q, &weights.w_k, &weights.w_v, &weights.w_o].map(|m| g.constant(m.clone().into_dyn()));
    let y = adapter_graph(&mut g, x, f, mode, ws)?;
    Ok(g.value(y)
        .clone()
        .into_shape_with_order((b, f, c, h, w))
        .expect("same element count"))
}
