//! Text-conditioned super-resolution UNet.
//!
//! Layout (per stage `s` of 2x, 4x, 8x, 16x):
//!
//! ```text
//! conv_in ─ down.s: stride-2 conv → res blocks [→ cross-attn] [→ adapter] ─┐ skip
//!                                                              mid.res     │
//! out.conv ← up.s: concat(skip) → res blocks [→ cross-attn] [→ adapter] → upsample
//! ```
//!
//! Video clips are folded to `(B·F, C, H, W)` and pushed through the same
//! kernels as images; only the temporal adapters look across frames.

use ndarray::{Array2, ArrayD, IxDyn};

use crate::adapter::{self, AdapterConfig, AdapterWeights};
use crate::autograd::{Graph, Var};
use crate::batch::{fold_frames, unfold_frames, ImageBatch, TextTokens, VideoBatch};
use crate::error::{Error, Result};
use crate::model::config::{ModelConfig, Path, Stage};
use crate::rng;
use crate::scalar::Scalar;
use crate::store::ParameterStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in ±1/√fan_in.
    FanIn(usize),
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

pub const EMBEDDING_STD: f64 = 1.0;

struct Layout<'a> {
    config: &'a ModelConfig,
    specs: Vec<ParamSpec>,
}

impl Layout<'_> {
    fn push(&mut self, name: String, shape: &[usize], init: Init) {
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            init,
        });
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize) {
        self.push(format!("{prefix}.weight"), &[cout, cin, k, k], Init::FanIn(cin * k * k));
        self.push(format!("{prefix}.bias"), &[cout], Init::Zeros);
    }

    fn linear(&mut self, prefix: &str, din: usize, dout: usize, bias: bool) {
        self.push(format!("{prefix}.weight"), &[din, dout], Init::FanIn(din));
        if bias {
            self.push(format!("{prefix}.bias"), &[dout], Init::Zeros);
        }
    }

    fn norm(&mut self, prefix: &str, c: usize) {
        self.push(format!("{prefix}.gamma"), &[c], Init::Ones);
        self.push(format!("{prefix}.beta"), &[c], Init::Zeros);
    }

    fn res_block(&mut self, prefix: &str, cin: usize, cout: usize) {
        self.norm(&format!("{prefix}.norm1"), cin);
        self.conv(&format!("{prefix}.conv1"), cin, cout, 3);
        self.linear(&format!("{prefix}.temb"), self.config.time_embed_dim(), cout, true);
        self.norm(&format!("{prefix}.norm2"), cout);
        self.conv(&format!("{prefix}.conv2"), cout, cout, 3);
        if cin != cout {
            self.conv(&format!("{prefix}.skip"), cin, cout, 1);
        }
    }

    fn cross_attention(&mut self, prefix: &str, c: usize) {
        let d = self.config.text_embed_dim;
        self.norm(&format!("{prefix}.norm"), c);
        self.linear(&format!("{prefix}.q"), c, c, false);
        self.linear(&format!("{prefix}.k"), d, c, false);
        self.linear(&format!("{prefix}.v"), d, c, false);
        self.linear(&format!("{prefix}.o"), c, c, true);
    }

    fn stage_body(&mut self, path: Path, stage: Stage, cin: usize) {
        let c = self.config.stage_channels(stage);
        for i in 0..self.config.res_blocks_per_stage {
            let from = if i == 0 { cin } else { c };
            self.res_block(&format!("{}.{}.res.{i}", path.name(), stage.name()), from, c);
            if self.config.has_cross_attention(stage) {
                self.cross_attention(&format!("{}.{}.attn.{i}", path.name(), stage.name()), c);
            }
        }
    }
}

/// Every image-model parameter with its shape and initializer.
pub fn image_param_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    let mut l = Layout {
        config,
        specs: Vec::new(),
    };
    let base = config.base_channels;
    let temb = config.time_embed_dim();
    l.linear("time.mlp.0", base, temb, true);
    l.linear("time.mlp.1", temb, temb, true);
    l.push(
        "text.embedding".into(),
        &[config.vocab_size, config.text_embed_dim],
        Init::Normal(EMBEDDING_STD),
    );
    l.conv("conv_in", config.in_channels(), base, 3);
    let mut prev = base;
    for stage in Stage::ALL {
        l.conv(&format!("down.{}.sample", stage.name()), prev, prev, 3);
        l.stage_body(Path::Down, stage, prev);
        prev = config.stage_channels(stage);
    }
    l.res_block("mid.res.0", prev, prev);
    for stage in Stage::ALL.into_iter().rev() {
        let c = config.stage_channels(stage);
        l.stage_body(Path::Up, stage, prev + c);
        l.conv(&format!("up.{}.sample", stage.name()), c, c, 3);
        prev = c;
    }
    l.norm("out.norm", prev + base);
    l.conv("out.conv", prev + base, config.out_channels(), 3);
    l.specs
}

/// Adapter parameter shapes, one adapter per site on both paths.
pub fn adapter_param_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    for stage in Stage::ALL.into_iter().filter(|s| config.has_adapter(*s)) {
        let cfg = AdapterConfig::for_site(config, stage);
        for path in [Path::Down, Path::Up] {
            let prefix = adapter::site_prefix(path, stage);
            for (n, shape, init) in [
                ("w_q", [cfg.token_dim, cfg.proj_dim], Init::FanIn(cfg.token_dim)),
                ("w_k", [cfg.token_dim, cfg.proj_dim], Init::FanIn(cfg.token_dim)),
                ("w_v", [cfg.token_dim, cfg.proj_dim], Init::FanIn(cfg.token_dim)),
                ("w_o", [cfg.proj_dim, cfg.token_dim], Init::Zeros),
            ] {
                specs.push(ParamSpec {
                    name: format!("{prefix}.{n}"),
                    shape: shape.to_vec(),
                    init,
                });
            }
        }
    }
    specs
}

fn init_param<T: Scalar>(spec: &ParamSpec, seed: u64) -> ArrayD<T> {
    let mut r = rng::derived_rng(seed, &spec.name);
    match spec.init {
        Init::FanIn(fan_in) => rng::uniform_array(&mut r, &spec.shape, 1.0 / (fan_in as f64).sqrt()),
        Init::Zeros => ArrayD::zeros(IxDyn(&spec.shape)),
        Init::Ones => ArrayD::ones(IxDyn(&spec.shape)),
        Init::Normal(std) => rng::normal_array::<T>(&mut r, &spec.shape).mapv(|v| v * T::of(std)),
    }
}

/// Deterministically initialized image-model parameters (no adapters).
pub fn build_image_unet<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ParameterStore<T>> {
    config.validate()?;
    let mut store = ParameterStore::new(config.image_fingerprint());
    for spec in image_param_specs(config) {
        let v = init_param(&spec, seed);
        store.insert(spec.name, v)?;
    }
    Ok(store)
}

/// Fresh adapter weights for every site, keyed by parameter name.
pub fn init_adapters<T: Scalar>(config: &ModelConfig, seed: u64) -> Vec<(String, ArrayD<T>)> {
    let mut out = Vec::new();
    for stage in Stage::ALL.into_iter().filter(|s| config.has_adapter(*s)) {
        let cfg = AdapterConfig::for_site(config, stage);
        for path in [Path::Down, Path::Up] {
            let prefix = adapter::site_prefix(path, stage);
            out.extend(AdapterWeights::<T>::init(&cfg, seed, &prefix).named(&prefix));
        }
    }
    out
}

/// Random-init video model: image weights from `seed`, fresh adapters.
pub fn build_video_unet<T: Scalar>(config: &ModelConfig, seed: u64, adapter_seed: u64) -> Result<ParameterStore<T>> {
    let mut store = build_image_unet(config, seed)?;
    store.fingerprint = config.fingerprint();
    for (name, v) in init_adapters(config, adapter_seed) {
        store.insert(name, v)?;
    }
    Ok(store)
}

/// Binds named parameters into a graph, marking which ones are trainable.
pub struct Binder<'a, T> {
    params: &'a ParameterStore<T>,
    trainable: &'a (dyn Fn(&str) -> bool + Sync),
}

fn frozen(_: &str) -> bool {
    false
}

impl<'a, T: Scalar> Binder<'a, T> {
    pub fn new(params: &'a ParameterStore<T>, trainable: &'a (dyn Fn(&str) -> bool + Sync)) -> Self {
        Binder { params, trainable }
    }

    pub fn frozen(params: &'a ParameterStore<T>) -> Self {
        Binder {
            params,
            trainable: &frozen,
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        let value = self.params.require(name)?;
        Ok(g.param(name, value, (self.trainable)(name)))
    }
}

/// Sinusoidal embedding of diffusion steps, `(N, dim)`.
pub fn timestep_embedding<T: Scalar>(t: &[usize], dim: usize) -> Array2<T> {
    let half = dim / 2;
    Array2::from_shape_fn((t.len(), dim), |(n, j)| {
        let i = j % half;
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t[n] as f64 * freq;
        T::of(if j < half { arg.sin() } else { arg.cos() })
    })
}

/// The UNet bound to a parameter store.
pub struct UNet<'a, T> {
    pub config: &'a ModelConfig,
    binder: Binder<'a, T>,
    adapters: bool,
}

impl<'a, T: Scalar> UNet<'a, T> {
    pub fn new(config: &'a ModelConfig, binder: Binder<'a, T>, adapters: bool) -> Self {
        UNet {
            config,
            binder,
            adapters,
        }
    }

    pub fn adapters_enabled(&self) -> bool {
        self.adapters
    }

    fn p(&self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        self.binder.bind(g, name)
    }

    fn conv(&self, g: &mut Graph<T>, prefix: &str, x: Var, stride: usize) -> Result<Var> {
        let w = self.p(g, &format!("{prefix}.weight"))?;
        let b = self.p(g, &format!("{prefix}.bias"))?;
        let k = g.shape(w)[2];
        g.conv2d(x, w, Some(b), stride, k / 2)
    }

    fn norm(&self, g: &mut Graph<T>, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.p(g, &format!("{prefix}.gamma"))?;
        let beta = self.p(g, &format!("{prefix}.beta"))?;
        g.group_norm(x, gamma, beta, self.config.norm_groups)
    }

    fn linear(&self, g: &mut Graph<T>, prefix: &str, x: Var, bias: bool) -> Result<Var> {
        let w = self.p(g, &format!("{prefix}.weight"))?;
        let b = if bias {
            Some(self.p(g, &format!("{prefix}.bias"))?)
        } else {
            None
        };
        g.linear(x, w, b)
    }

    fn res_block(&self, g: &mut Graph<T>, prefix: &str, x: Var, temb: Var) -> Result<Var> {
        let h = self.norm(g, &format!("{prefix}.norm1"), x)?;
        let h = g.silu(h);
        let h = self.conv(g, &format!("{prefix}.conv1"), h, 1)?;
        let t = self.linear(g, &format!("{prefix}.temb"), temb, true)?;
        let h = g.add_channel(h, t)?;
        let h = self.norm(g, &format!("{prefix}.norm2"), h)?;
        let h = g.silu(h);
        let h = self.conv(g, &format!("{prefix}.conv2"), h, 1)?;
        let skip = if self.binder.params.contains(&format!("{prefix}.skip.weight")) {
            self.conv(g, &format!("{prefix}.skip"), x, 1)?
        } else {
            x
        };
        g.add(skip, h)
    }

    fn cross_attention(&self, g: &mut Graph<T>, prefix: &str, x: Var, context: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let hn = self.norm(g, &format!("{prefix}.norm"), x)?;
        let tokens = g.permute(hn, &[0, 2, 3, 1]);
        let tokens = g.reshape(tokens, &[n, h * w, c])?;
        let q = self.linear(g, &format!("{prefix}.q"), tokens, false)?;
        let k = self.linear(g, &format!("{prefix}.k"), context, false)?;
        let v = self.linear(g, &format!("{prefix}.v"), context, false)?;
        let a = g.attention(q, k, v, T::of(1.0 / (c as f64).sqrt()))?;
        let o = self.linear(g, &format!("{prefix}.o"), a, true)?;
        let o = g.reshape(o, &[n, h, w, c])?;
        let o = g.permute(o, &[0, 3, 1, 2]);
        g.add(x, o)
    }

    fn stage_body(
        &self,
        g: &mut Graph<T>,
        path: Path,
        stage: Stage,
        mut h: Var,
        temb: Var,
        context: &mut dyn FnMut(&mut Graph<T>) -> Result<Var>,
        frames: usize,
    ) -> Result<Var> {
        for i in 0..self.config.res_blocks_per_stage {
            h = self.res_block(g, &format!("{}.{}.res.{i}", path.name(), stage.name()), h, temb)?;
            if self.config.has_cross_attention(stage) {
                let ctx = context(g)?;
                h = self.cross_attention(g, &format!("{}.{}.attn.{i}", path.name(), stage.name()), h, ctx)?;
            }
        }
        if self.adapters && self.config.has_adapter(stage) {
            h = adapter::apply_site(
                g,
                &self.binder,
                h,
                frames,
                self.config.adapter_mode,
                &adapter::site_prefix(path, stage),
            )?;
        }
        Ok(h)
    }

    /// ε-prediction for a folded batch `(B·F, in_channels, H, W)`.
    ///
    /// `t` and `text` hold one entry per folded image; `frames` is the clip
    /// length used by the temporal adapters.
    pub fn forward_folded(&self, g: &mut Graph<T>, x: Var, t: &[usize], text: &TextTokens, frames: usize) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.config.in_channels() {
            return Err(Error::shape(format!(
                "denoiser input {s:?}: expected (N, {}, H, W)",
                self.config.in_channels()
            )));
        }
        if !s[2].is_multiple_of(16) || !s[3].is_multiple_of(16) || s[2] == 0 || s[3] == 0 {
            return Err(Error::shape(format!("spatial size {}x{} is not divisible by 16", s[2], s[3])));
        }
        if t.len() != s[0] || text.batch() != s[0] {
            return Err(Error::shape(format!(
                "{} images but {} timesteps and {} captions",
                s[0],
                t.len(),
                text.batch()
            )));
        }
        if text.len() > self.config.max_text_len {
            return Err(Error::shape(format!(
                "captions of {} tokens exceed max_text_len {}",
                text.len(),
                self.config.max_text_len
            )));
        }
        let base = self.config.base_channels;

        let temb = g.constant(timestep_embedding::<T>(t, base).into_dyn());
        let temb = self.linear(g, "time.mlp.0", temb, true)?;
        let temb = g.silu(temb);
        let temb = self.linear(g, "time.mlp.1", temb, true)?;

        let mut context_var = None;
        let ids: Vec<usize> = text.ids.iter().map(|&i| i as usize).collect();
        let ids_shape = [text.batch(), text.len()];
        let mut context = |g: &mut Graph<T>| -> Result<Var> {
            if let Some(v) = context_var {
                return Ok(v);
            }
            let table = self.p(g, "text.embedding")?;
            let v = g.embedding(table, &ids, &ids_shape)?;
            context_var = Some(v);
            Ok(v)
        };

        let h0 = self.conv(g, "conv_in", x, 1)?;
        let mut h = h0;
        let mut skips = Vec::with_capacity(4);
        for stage in Stage::ALL {
            h = self.conv(g, &format!("down.{}.sample", stage.name()), h, 2)?;
            h = self.stage_body(g, Path::Down, stage, h, temb, &mut context, frames)?;
            skips.push(h);
        }
        h = self.res_block(g, "mid.res.0", h, temb)?;
        for stage in Stage::ALL.into_iter().rev() {
            let skip = skips.pop().expect("one skip per stage");
            h = g.concat(&[h, skip], 1)?;
            h = self.stage_body(g, Path::Up, stage, h, temb, &mut context, frames)?;
            h = g.upsample2x(h)?;
            h = self.conv(g, &format!("up.{}.sample", stage.name()), h, 1)?;
        }
        h = g.concat(&[h, h0], 1)?;
        h = self.norm(g, "out.norm", h)?;
        h = g.silu(h);
        self.conv(g, "out.conv", h, 1)
    }

    /// ε-prediction for clips `(B, F, in_channels, H, W)`; `t` and `text` per clip.
    pub fn forward_clips(&self, g: &mut Graph<T>, v: Var, t: &[usize], text: &TextTokens) -> Result<Var> {
        let s = g.shape(v).to_vec();
        if s.len() != 5 {
            return Err(Error::shape(format!("expected a rank-5 clip batch, got {s:?}")));
        }
        let (b, f) = (s[0], s[1]);
        if t.len() != b || text.batch() != b {
            return Err(Error::shape(format!("{b} clips but {} timesteps and {} captions", t.len(), text.batch())));
        }
        let folded = g.reshape(v, &[b * f, s[2], s[3], s[4]])?;
        let t_folded: Vec<usize> = t.iter().flat_map(|&ti| std::iter::repeat_n(ti, f)).collect();
        let y = self.forward_folded(g, folded, &t_folded, &text.repeat_rows(f), f)?;
        let ys = g.shape(y).to_vec();
        g.reshape(y, &[b, f, ys[1], ys[2], ys[3]])
    }
}

/// Per-image ε-prediction of the image model.
pub fn forward_image<T: Scalar>(
    params: &ParameterStore<T>,
    config: &ModelConfig,
    x: &ImageBatch<T>,
    t: &[usize],
    text: &TextTokens,
) -> Result<ImageBatch<T>> {
    let unet = UNet::new(config, Binder::frozen(params), false);
    let mut g = Graph::new();
    let xv = g.constant(x.data.clone().into_dyn());
    let y = unet.forward_folded(&mut g, xv, t, text, 1)?;
    ImageBatch::new(g.value(y).clone().into_dimensionality().expect("rank 4"))
}

/// Per-frame ε-prediction of the video model, frames folded through shared weights.
pub fn forward_video<T: Scalar>(
    params: &ParameterStore<T>,
    config: &ModelConfig,
    v: &VideoBatch<T>,
    t: &[usize],
    text: &TextTokens,
    adapters_enabled: bool,
) -> Result<VideoBatch<T>> {
    if adapters_enabled {
        let missing: Vec<String> = adapter_param_specs(config)
            .into_iter()
            .filter(|s| !params.contains(&s.name))
            .map(|s| s.name)
            .collect();
        if !missing.is_empty() {
            return Err(Error::Parameter(format!("missing adapter parameters: {}", missing.join(", "))));
        }
    }
    let frames = v.frames();
    if t.len() != v.batch() {
        return Err(Error::shape(format!("{} clips but {} timesteps", v.batch(), t.len())));
    }
    let unet = UNet::new(config, Binder::frozen(params), adapters_enabled);
    let mut g = Graph::new();
    let x = g.constant(fold_frames(v).data.into_dyn());
    let t_folded: Vec<usize> = t.iter().flat_map(|&ti| std::iter::repeat_n(ti, frames)).collect();
    let y = unet.forward_folded(&mut g, x, &t_folded, &text.repeat_rows(frames), frames)?;
    let images = ImageBatch::new(g.value(y).clone().into_dimensionality().expect("rank 4"))?;
    unfold_frames(&images, frames)
}
