//! Depth-5 UNet with a fixed-grid self-attention bottleneck.
//!
//! Layout for the default configuration (`c` = 8, 16, 32, 64, 128):
//!
//! ```text
//! stem      conv3x3 1->8, conv3x3 8->8                      (skip 0, full res)
//! down i    conv kxk stride k (k = factor), conv3x3, conv3x3 (skip i+1)
//! attention resize to 6x6, 36 tokens + positions, 8-head MHA, resize back, residual
//! up i      bilinear x factor, concat skip i, conv3x3, conv3x3
//! head      conv1x1 8->3   (0 = region, 1 = vessel, 2 = fovea)
//! ```
//!
//! Every conv except the head is followed by batch norm and ReLU.

mod config;

pub use config::ModelConfig;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::tensor::ops::{AttentionParams, Pads};
use crate::tensor::{Element, Mode, Tape, Tensor, Var};

const CONFIG_ENTRY: &str = "meta.config_json";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Channel {
    Region = 0,
    Vessel = 1,
    Fovea = 2,
}

#[derive(Clone, Debug)]
struct ConvBn {
    name: String,
    weight: usize,
    gamma: usize,
    beta: usize,
    stats: usize,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Debug)]
struct Attention {
    proj: [usize; 8],
    pos: Option<usize>,
}

#[derive(Clone, Debug)]
struct Layout {
    stem: Vec<ConvBn>,
    down: Vec<Vec<ConvBn>>,
    attention: Attention,
    up: Vec<Vec<ConvBn>>,
    head_weight: usize,
    head_bias: usize,
}

/// Batch-norm running statistics, stored in f32 so checkpoints are exact.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub name: String,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Element = f32> {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    stats: Vec<RunningStats>,
    layout: Layout,
}

/// Batch statistics observed by one training-mode forward pass, in layer order.
pub type BatchStats = Vec<(Vec<f64>, Vec<f64>)>;

pub struct ForwardOutput {
    /// `[N, out_channels, H, W]`.
    pub logits: Var,
    /// Spatial size of the bottleneck before resizing to the attention grid.
    pub bottleneck_grid: (usize, usize),
    /// Number of tokens the attention layer operated on.
    pub tokens: usize,
    pub attention: Var,
    pub batch_stats: BatchStats,
}

struct Builder<'a, T: Element> {
    rng: &'a mut ChaCha8Rng,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    stats: Vec<RunningStats>,
}

impl<T: Element> Builder<'_, T> {
    fn push(&mut self, name: String, t: Tensor<T>) -> usize {
        self.names.push(name);
        self.params.push(t);
        self.params.len() - 1
    }

    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> usize {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(self.rng.random_range(-bound..=bound))).collect();
        self.push(name, Tensor::new(shape, data).expect("shape matches data"))
    }

    fn conv_weight(&mut self, name: String, cout: usize, cin: usize, k: usize) -> usize {
        let fan_in = (cin * k * k) as f64;
        self.uniform(name, &[cout, cin, k, k], (6.0 / fan_in).sqrt())
    }

    fn conv_bn(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> ConvBn {
        let weight = self.conv_weight(format!("{name}.weight"), cout, cin, k);
        let gamma = self.push(format!("{name}.bn.gamma"), Tensor::full(&[cout], T::one()));
        let beta = self.push(format!("{name}.bn.beta"), Tensor::zeros(&[cout]));
        self.stats.push(RunningStats { name: format!("{name}.bn"), mean: vec![0.0; cout], var: vec![1.0; cout] });
        ConvBn { name: name.to_string(), weight, gamma, beta, stats: self.stats.len() - 1, stride, pad }
    }
}

fn layer_error(e: Error, layer: &str) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("layer {layer}: {what}")),
        other => other,
    }
}

impl<T: Element> Model<T> {
    /// Builds a model with He-uniform conv weights and zero biases.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder { rng: &mut rng, names: Vec::new(), params: Vec::new(), stats: Vec::new() };
        let filters = config.filters();
        let base = config.base_filters;

        let stem = vec![
            b.conv_bn("stem.0", config.in_channels, base, 3, 1, 1),
            b.conv_bn("stem.1", base, base, 3, 1, 1),
        ];
        // Channels of each skip, full resolution first.
        let mut skips = vec![base];
        let mut down = Vec::new();
        let mut cin = base;
        for (i, (&f, &c)) in config.down_factors.iter().zip(&filters).enumerate() {
            down.push(vec![
                b.conv_bn(&format!("down{i}.pool"), cin, c, f, f, 0),
                b.conv_bn(&format!("down{i}.conv0"), c, c, 3, 1, 1),
                b.conv_bn(&format!("down{i}.conv1"), c, c, 3, 1, 1),
            ]);
            skips.push(c);
            cin = c;
        }
        skips.pop();

        let c = config.bottleneck_channels();
        let bound = (6.0 / (2 * c) as f64).sqrt();
        let mut proj = [0; 8];
        for (j, part) in ["q", "k", "v", "o"].iter().enumerate() {
            proj[2 * j] = b.uniform(format!("attn.w{part}"), &[c, c], bound);
            proj[2 * j + 1] = b.push(format!("attn.b{part}"), Tensor::zeros(&[c]));
        }
        let tokens = config.attention_grid * config.attention_grid;
        let pos = config.positional_embedding.then(|| b.uniform("attn.pos".into(), &[tokens, c], 0.02));

        let mut up = Vec::new();
        let mut cur = c;
        for i in (0..config.depth).rev() {
            let skip = skips[i];
            up.push(vec![
                b.conv_bn(&format!("up{i}.conv0"), cur + skip, skip, 3, 1, 1),
                b.conv_bn(&format!("up{i}.conv1"), skip, skip, 3, 1, 1),
            ]);
            cur = skip;
        }
        let head_weight = b.conv_weight("head.weight".into(), config.out_channels, cur, 1);
        let head_bias = b.push("head.bias".into(), Tensor::zeros(&[config.out_channels]));

        let layout = Layout { stem, down, attention: Attention { proj, pos }, up, head_weight, head_bias };
        Ok(Model { config: config.clone(), names: b.names, params: b.params, stats: b.stats, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    /// `(name, tensor)` in registration order.
    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.params)
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

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.stats
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.stats
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
            stats: self.stats.clone(),
            layout: self.layout.clone(),
        }
    }

    /// Registers every parameter on the tape, trainable or not.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone(), trainable)).collect()
    }

    /// Folds batch statistics into the running statistics.
    pub fn update_running_stats(&mut self, batch: &BatchStats) -> Result<()> {
        if batch.len() != self.stats.len() {
            return Err(Error::Shape(format!("{} batch statistics for {} norms", batch.len(), self.stats.len())));
        }
        let m = self.config.bn_momentum;
        for (rs, (mean, var)) in self.stats.iter_mut().zip(batch) {
            for (r, &b) in rs.mean.iter_mut().zip(mean) {
                *r = ((1.0 - m) * *r as f64 + m * b) as f32;
            }
            for (r, &b) in rs.var.iter_mut().zip(var) {
                *r = ((1.0 - m) * *r as f64 + m * b) as f32;
            }
        }
        Ok(())
    }

    fn conv_bn(&self, tape: &mut Tape<T>, vars: &[Var], x: Var, l: &ConvBn, mode: Mode, stats: &mut BatchStats) -> Result<Var> {
        let run = |tape: &mut Tape<T>, stats: &mut BatchStats| -> Result<Var> {
            let y = tape.conv2d(x, vars[l.weight], None, l.stride, l.pad)?;
            let y = match mode {
                Mode::Train => {
                    let (y, mean, var) = tape.batch_norm_train(y, vars[l.gamma], vars[l.beta], self.config.bn_eps)?;
                    let count = {
                        let s = tape.shape(y);
                        (s[0] * s[2] * s[3]) as f64
                    };
                    let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                    stats.push((mean, var.iter().map(|v| v * unbiased).collect()));
                    y
                }
                Mode::Eval => {
                    let rs = &self.stats[l.stats];
                    let mean: Vec<f64> = rs.mean.iter().map(|&v| v as f64).collect();
                    let var: Vec<f64> = rs.var.iter().map(|&v| v as f64).collect();
                    tape.batch_norm_eval(y, vars[l.gamma], vars[l.beta], &mean, &var, self.config.bn_eps)?
                }
            };
            tape.relu(y)
        };
        run(tape, stats).map_err(|e| layer_error(e, &l.name))
    }

    /// Fixed-grid attention with optional positions and residual.
    /// Returns `(output, attention node, tokens)`.
    pub fn ra_attention(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<(Var, Var, usize)> {
        let [_, c, h, w] = tape.value(x).dims4()?;
        let g = self.config.attention_grid;
        let a = &self.layout.attention;
        let run = |tape: &mut Tape<T>| -> Result<(Var, Var, usize)> {
            let grid = tape.resize_bilinear(x, g, g)?;
            let mut tokens = tape.to_tokens(grid)?;
            if let Some(pos) = a.pos {
                tokens = tape.add_tiled(tokens, vars[pos])?;
            }
            let n_tokens = tape.shape(tokens)[1];
            let p = AttentionParams {
                wq: vars[a.proj[0]],
                bq: vars[a.proj[1]],
                wk: vars[a.proj[2]],
                bk: vars[a.proj[3]],
                wv: vars[a.proj[4]],
                bv: vars[a.proj[5]],
                wo: vars[a.proj[6]],
                bo: vars[a.proj[7]],
            };
            if c % self.config.attention_heads != 0 {
                return Err(Error::Config(format!("{c} channels not divisible by {} heads", self.config.attention_heads)));
            }
            let q = tape.linear(tokens, p.wq, p.bq)?;
            let k = tape.linear(tokens, p.wk, p.bk)?;
            let v = tape.linear(tokens, p.wv, p.bv)?;
            let attn = tape.scaled_dot_product_attention(q, k, v, self.config.attention_heads)?;
            let out = tape.linear(attn, p.wo, p.bo)?;
            let out = tape.from_tokens(out, g, g)?;
            let out = tape.resize_bilinear(out, h, w)?;
            let out = if self.config.attention_residual { tape.add(out, x)? } else { out };
            Ok((out, attn, n_tokens))
        };
        run(tape).map_err(|e| layer_error(e, "attention"))
    }

    /// Full forward pass on `[N, in_channels, H, W]`; any H, W is accepted
    /// via reflect padding to a multiple of 128 and cropping back.
    pub fn forward(&self, tape: &mut Tape<T>, vars: &[Var], input: Var, mode: Mode) -> Result<ForwardOutput> {
        let [_, cin, h, w] = tape.value(input).dims4()?;
        if cin != self.config.in_channels {
            return Err(Error::Shape(format!("model expects {} input channels, got {cin}", self.config.in_channels)));
        }
        if vars.len() != self.params.len() {
            return Err(Error::Shape(format!("{} vars bound for {} parameters", vars.len(), self.params.len())));
        }
        let m = self.config.stride_product();
        let (ph, pw) = (h.div_ceil(m) * m - h, w.div_ceil(m) * m - w);
        let pads = Pads { top: ph / 2, bottom: ph - ph / 2, left: pw / 2, right: pw - pw / 2 };
        let mut x = if ph + pw > 0 { tape.reflect_pad(input, pads)? } else { input };

        let mut stats = Vec::with_capacity(self.stats.len());
        for l in &self.layout.stem {
            x = self.conv_bn(tape, vars, x, l, mode, &mut stats)?;
        }
        let mut skips = vec![x];
        for block in &self.layout.down {
            for l in block {
                x = self.conv_bn(tape, vars, x, l, mode, &mut stats)?;
            }
            skips.push(x);
        }
        skips.pop();
        let [_, _, bh, bw] = tape.value(x).dims4()?;
        let (out, attention, tokens) = self.ra_attention(tape, vars, x)?;
        x = out;

        for block in &self.layout.up {
            let skip = skips.pop().ok_or_else(|| Error::Shape("decoder deeper than encoder".into()))?;
            let [_, _, sh, sw] = tape.value(skip).dims4()?;
            x = tape.resize_bilinear(x, sh, sw)?;
            x = tape.concat_channels(x, skip)?;
            for l in block {
                x = self.conv_bn(tape, vars, x, l, mode, &mut stats)?;
            }
        }
        let head = |tape: &mut Tape<T>| -> Result<Var> {
            tape.conv2d(x, vars[self.layout.head_weight], Some(vars[self.layout.head_bias]), 1, 0)
        };
        let mut logits = head(tape).map_err(|e| layer_error(e, "head"))?;
        if ph + pw > 0 {
            logits = tape.crop(logits, pads.top, pads.left, h, w)?;
        }
        Ok(ForwardOutput { logits, bottleneck_grid: (bh, bw), tokens, attention, batch_stats: stats })
    }

    /// Eval-mode logits for a batch, without gradient bookkeeping.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(input.clone());
        let out = self.forward(&mut tape, &vars, x, Mode::Eval)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Checkpoint entries: configuration, parameters, running statistics.
    pub fn to_entries(&self) -> Result<Vec<(String, Tensor<f32>)>> {
        let json = serde_json::to_vec(&self.config)?;
        let mut entries = vec![(
            CONFIG_ENTRY.to_string(),
            Tensor::new(&[json.len()], json.iter().map(|&b| b as f32).collect())?,
        )];
        for (name, p) in self.named_params() {
            entries.push((name.to_string(), p.cast()));
        }
        for s in &self.stats {
            entries.push((format!("{}.running_mean", s.name), Tensor::new(&[s.mean.len()], s.mean.clone())?));
            entries.push((format!("{}.running_var", s.name), Tensor::new(&[s.var.len()], s.var.clone())?));
        }
        Ok(entries)
    }

    pub fn from_entries(entries: &[(String, Tensor<f32>)]) -> Result<Self> {
        let find = |name: &str| -> Result<&Tensor<f32>> {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Invalid(format!("checkpoint lacks entry {name}")))
        };
        let bytes: Vec<u8> = find(CONFIG_ENTRY)?
            .data()
            .iter()
            .map(|&v| if (0.0..=255.0).contains(&v) && v.fract() == 0.0 { Ok(v as u8) } else { Err(()) })
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Invalid("corrupt configuration entry".into()))?;
        let config: ModelConfig =
            serde_json::from_slice(&bytes).map_err(|e| Error::Invalid(format!("configuration entry: {e}")))?;
        let mut model = Model::<T>::build(&config, 0)?;
        let expected = 1 + model.params.len() + 2 * model.stats.len();
        if entries.len() != expected {
            return Err(Error::Invalid(format!("checkpoint has {} entries, model needs {expected}", entries.len())));
        }
        for (name, p) in model.names.iter().zip(model.params.iter_mut()) {
            let t = find(name)?;
            if t.shape() != p.shape() {
                return Err(Error::Invalid(format!("{name}: shape {:?}, expected {:?}", t.shape(), p.shape())));
            }
            *p = t.cast();
        }
        for s in &mut model.stats {
            for (suffix, dst) in [("running_mean", &mut s.mean), ("running_var", &mut s.var)] {
                let t = find(&format!("{}.{suffix}", s.name))?;
                if t.numel() != dst.len() {
                    return Err(Error::Invalid(format!("{}.{suffix}: wrong length", s.name)));
                }
                dst.copy_from_slice(t.data());
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_entries()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let entries = checkpoint::load(path)?;
        Self::from_entries(&entries).map_err(|e| match e {
            Error::Invalid(reason) => Error::Validation { path: path.to_path_buf(), reason },
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig { base_filters: 2, ..Default::default() }
    }

    #[test]
    fn build_is_deterministic() {
        let a = Model::<f32>::build(&tiny(), 3).unwrap();
        let b = Model::<f32>::build(&tiny(), 3).unwrap();
        assert_eq!(a.params, b.params);
        let c = Model::<f32>::build(&tiny(), 4).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn names_are_unique() {
        let m = Model::<f32>::build(&ModelConfig::default(), 0).unwrap();
        let mut names: Vec<&String> = m.names.iter().collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), m.names.len());
    }

    #[test]
    fn padded_input_is_cropped_back() {
        let m = Model::<f32>::build(&tiny(), 0).unwrap();
        let x = Tensor::full(&[1, 1, 130, 125], 0.1f32);
        let y = m.predict(&x).unwrap();
        assert_eq!(y.shape(), &[1, 3, 130, 125]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = ModelConfig { down_factors: vec![2, 2, 2, 2, 4], ..Default::default() };
        assert!(matches!(Model::<f32>::build(&bad, 0), Err(Error::Config(_))));
        let bad = ModelConfig { attention_heads: 7, ..Default::default() };
        assert!(matches!(Model::<f32>::build(&bad, 0), Err(Error::Config(_))));
    }

    #[test]
    fn wrong_input_channels_are_rejected() {
        let m = Model::<f32>::build(&tiny(), 0).unwrap();
        assert!(m.predict(&Tensor::zeros(&[1, 2, 128, 128])).is_err());
    }
}
