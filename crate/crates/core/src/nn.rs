//! Small layer toolkit over candle tensors: seeded parameter creation,
//! linear / layer-norm / MLP blocks, masked multi-head attention, and the
//! sinusoidal 2D position encoding.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Additive attention bias for masked keys. `exp` of it underflows to exactly
/// zero in f32, so masked keys get exactly zero weight.
pub const MASK_BIAS: f64 = -1e9;

/// Named trainable parameters, kept in sorted name order.
#[derive(Clone, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites every parameter from `values`, which must carry exactly the
    /// same names and shapes.
    pub fn assign(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        if values.len() != self.vars.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.vars.len(),
                values.len()
            )));
        }
        for (name, var) in &self.vars {
            let value = values
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if value.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, model expects {:?}",
                    value.dims(),
                    var.dims()
                )));
            }
            var.set(&value.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }
}

/// Creates parameters under a dotted name prefix, drawing initial values
/// from one seeded generator so a model is reproducible from its seed.
#[derive(Clone)]
pub struct Builder {
    vars: Arc<Mutex<BTreeMap<String, Var>>>,
    rng: Arc<Mutex<ChaCha8Rng>>,
    prefix: String,
    device: Device,
}

impl Builder {
    pub fn new(seed: u64) -> Self {
        Self {
            vars: Arc::default(),
            rng: Arc::new(Mutex::new(ChaCha8Rng::seed_from_u64(seed))),
            prefix: String::new(),
            device: Device::Cpu,
        }
    }

    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Self {
            prefix,
            ..self.clone()
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&self, name: &str, values: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        let full = self.pp(name).prefix;
        let var = Var::from_tensor(&Tensor::from_vec(values, shape, &self.device)?)?;
        let tensor = var.as_tensor().clone();
        let mut vars = self.vars.lock().expect("parameter lock poisoned");
        if vars.insert(full.clone(), var).is_some() {
            return Err(Error::Shape(format!("duplicate parameter `{full}`")));
        }
        Ok(tensor)
    }

    /// Glorot-uniform weight of shape `(fan_out, fan_in)`.
    pub fn weight(&self, name: &str, fan_out: usize, fan_in: usize) -> Result<Tensor> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
        let values = {
            let mut rng = self.rng.lock().expect("rng lock poisoned");
            (0..fan_out * fan_in)
                .map(|_| rng.random_range(-bound..=bound))
                .collect()
        };
        self.insert(name, values, &[fan_out, fan_in])
    }

    /// Glorot-uniform weight multiplied by `scale`.
    pub fn scaled_weight(&self, name: &str, fan_out: usize, fan_in: usize, scale: f32) -> Result<Tensor> {
        let w = self.weight(name, fan_out, fan_in)?;
        let var = {
            let vars = self.vars.lock().expect("parameter lock poisoned");
            vars[&self.pp(name).prefix].clone()
        };
        var.set(&(&w * scale as f64)?)?;
        Ok(var.as_tensor().clone())
    }

    pub fn constant(&self, name: &str, len: usize, value: f32) -> Result<Tensor> {
        self.insert(name, vec![value; len], &[len])
    }

    pub fn finish(self) -> ParamStore {
        let vars = self.vars.lock().expect("parameter lock poisoned").clone();
        ParamStore { vars }
    }
}

/// Per-forward-pass state: training mode and the dropout generator.
pub struct Ctx {
    dropout_rng: Option<Mutex<ChaCha8Rng>>,
}

impl Ctx {
    pub fn eval() -> Self {
        Self { dropout_rng: None }
    }

    pub fn train(seed: u64) -> Self {
        Self {
            dropout_rng: Some(Mutex::new(ChaCha8Rng::seed_from_u64(seed))),
        }
    }

    pub fn is_train(&self) -> bool {
        self.dropout_rng.is_some()
    }

    /// Inverted dropout; identity in eval mode or when `rate` is zero.
    pub fn dropout(&self, x: &Tensor, rate: f64) -> Result<Tensor> {
        let Some(rng) = &self.dropout_rng else {
            return Ok(x.clone());
        };
        if rate <= 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - rate;
        let scale = (1.0 / keep) as f32;
        let mask: Vec<f32> = {
            let mut rng = rng.lock().expect("rng lock poisoned");
            (0..x.elem_count())
                .map(|_| if rng.random_bool(keep) { scale } else { 0.0 })
                .collect()
        };
        let mask = Tensor::from_vec(mask, x.dims(), x.device())?;
        Ok(x.mul(&mask)?)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(b: &Builder, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Self {
            weight: b.weight("weight", fan_out, fan_in)?,
            bias: b.constant("bias", fan_out, 0.0)?,
        })
    }

    /// Linear layer whose initial weights are shrunk by `scale`.
    pub fn new_scaled(b: &Builder, fan_in: usize, fan_out: usize, scale: f32) -> Result<Self> {
        Ok(Self {
            weight: b.scaled_weight("weight", fan_out, fan_in, scale)?,
            bias: b.constant("bias", fan_out, 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let (fan_out, fan_in) = self.weight.dims2()?;
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let y = x
            .reshape((rows, fan_in))?
            .matmul(&self.weight.t()?)?
            .broadcast_add(&self.bias)?;
        let mut out_dims = dims;
        *out_dims.last_mut().expect("non-scalar input") = fan_out;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    const EPS: f64 = 1e-5;

    pub fn new(b: &Builder, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.constant("gamma", dim, 1.0)?,
            beta: b.constant("beta", dim, 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + Self::EPS)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.gamma)?
            .broadcast_add(&self.beta)?)
    }
}

/// Linear layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`.
    pub fn new(b: &Builder, dims: &[usize]) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&b.pp(format!("l{i}")), w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// Like [`Mlp::new`] with the output layer's initial weights shrunk by
    /// `scale`, so the block starts close to emitting zeros.
    pub fn with_small_output(b: &Builder, dims: &[usize], scale: f32) -> Result<Self> {
        let n = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let lb = b.pp(format!("l{i}"));
                if i + 1 == n {
                    Linear::new_scaled(&lb, w[0], w[1], scale)
                } else {
                    Linear::new(&lb, w[0], w[1])
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.relu()?;
            }
        }
        Ok(h)
    }
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Turns a `{0,1}` key mask `[B, .., Lk]` into an additive attention bias.
pub fn mask_to_bias(mask: &Tensor) -> Result<Tensor> {
    Ok(((mask.ones_like()? - mask)? * MASK_BIAS)?)
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(b: &Builder, dim: usize, heads: usize) -> Result<Self> {
        if dim % heads != 0 {
            return Err(Error::Shape(format!(
                "model dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(&b.pp("q"), dim, dim)?,
            k: Linear::new(&b.pp("k"), dim, dim)?,
            v: Linear::new(&b.pp("v"), dim, dim)?,
            out: Linear::new(&b.pp("out"), dim, dim)?,
            heads,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, d) = x.dims3()?;
        Ok(x
            .reshape((b, l, self.heads, d / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `query [B, Lq, D]`, `key`/`value [B, Lk, D]`, `bias [B, Lq | 1, Lk]`.
    pub fn forward(
        &self,
        query: &Tensor,
        key: &Tensor,
        value: &Tensor,
        bias: Option<&Tensor>,
    ) -> Result<Tensor> {
        let (b, lq, d) = query.dims3()?;
        let q = self.split(&self.q.forward(query)?)?;
        let k = self.split(&self.k.forward(key)?)?;
        let v = self.split(&self.v.forward(value)?)?;
        let scale = 1.0 / ((d / self.heads) as f64).sqrt();
        let mut scores = (q.matmul(&k.t()?)? * scale)?;
        if let Some(bias) = bias {
            scores = scores.broadcast_add(&bias.unsqueeze(1)?)?;
        }
        let weights = softmax_last(&scores)?;
        let o = weights
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, lq, d))?;
        self.out.forward(&o)
    }
}

/// Sinusoidal encoding of 2D positions `[.., 2]` into `[.., dim]`: the first
/// half encodes x, the second y, each as interleaved `sin, cos` pairs over a
/// geometric frequency ladder (1 rad/m down to 1/10000 rad/m).
pub fn sine_position_encoding(pos: &Tensor, dim: usize) -> Result<Tensor> {
    if dim % 4 != 0 {
        return Err(Error::Shape(format!(
            "position encoding dim {dim} must be divisible by 4"
        )));
    }
    let per_axis = dim / 2;
    let n_freq = per_axis / 2;
    let freqs: Vec<f32> = (0..n_freq)
        .map(|i| (1.0 / 10000f64.powf(2.0 * i as f64 / per_axis as f64)) as f32)
        .collect();
    let freqs = Tensor::from_vec(freqs, n_freq, pos.device())?.to_dtype(pos.dtype())?;
    let last = pos.rank() - 1;
    let mut halves = Vec::with_capacity(2);
    for axis in 0..2 {
        let coord = pos.narrow(last, axis, 1)?;
        let arg = coord.broadcast_mul(&freqs)?;
        let pairs = Tensor::stack(&[arg.sin()?, arg.cos()?], last + 1)?;
        let mut dims = pairs.dims().to_vec();
        dims.truncate(last);
        dims.push(per_axis);
        halves.push(pairs.reshape(dims)?);
    }
    Ok(Tensor::cat(&halves, last)?)
}

pub fn to_f32_tensor(values: &[f64], shape: &[usize]) -> Result<Tensor> {
    let v: Vec<f32> = values.iter().map(|&x| x as f32).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?)
}

pub fn mask_tensor(values: &[bool], shape: &[usize]) -> Result<Tensor> {
    let v: Vec<f32> = values.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?)
}

pub fn dtype() -> DType {
    DType::F32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_names_and_seed_determinism() {
        let make = || {
            let b = Builder::new(3);
            let lin = Linear::new(&b.pp("enc").pp("proj"), 4, 2).unwrap();
            (lin, b.finish())
        };
        let (_, store) = make();
        let names: Vec<&String> = store.iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["enc.proj.bias", "enc.proj.weight"]);
        let (_, again) = make();
        let w1 = store.get("enc.proj.weight").unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let w2 = again.get("enc.proj.weight").unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(w1, w2);
    }

    #[test]
    fn linear_handles_batched_input() {
        let b = Builder::new(0);
        let lin = Linear::new(&b, 3, 5).unwrap();
        let x = Tensor::ones((2, 4, 3), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(lin.forward(&x).unwrap().dims(), &[2, 4, 5]);
    }

    #[test]
    fn layer_norm_normalizes() {
        let b = Builder::new(0);
        let ln = LayerNorm::new(&b, 4).unwrap();
        let x = Tensor::new(&[[1f32, 2., 3., 4.]], &Device::Cpu).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f32>().unwrap();
        let mean: f32 = y[0].iter().sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6);
    }

    #[test]
    fn masked_keys_get_zero_weight() {
        let b = Builder::new(1);
        let attn = MultiHeadAttention::new(&b, 8, 2).unwrap();
        let dev = Device::Cpu;
        let q = Tensor::randn(0f32, 1., (1, 2, 8), &dev).unwrap();
        let k = Tensor::randn(0f32, 1., (1, 3, 8), &dev).unwrap();
        let mask = Tensor::new(&[[[1f32, 1., 0.]]], &dev).unwrap();
        let bias = mask_to_bias(&mask).unwrap();
        let a = attn.forward(&q, &k, &k, Some(&bias)).unwrap();
        // Replacing the masked key changes nothing.
        let k2 = Tensor::cat(&[k.narrow(1, 0, 2).unwrap(), (k.narrow(1, 2, 1).unwrap() * 50.0).unwrap()], 1).unwrap();
        let b2 = attn.forward(&q, &k2, &k2, Some(&bias)).unwrap();
        let diff = (a - b2).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn position_encoding_layout() {
        let pos = Tensor::new(&[[0.5f32, -2.0]], &Device::Cpu).unwrap();
        let pe = sine_position_encoding(&pos, 8).unwrap().to_vec2::<f32>().unwrap();
        let f1 = 1.0 / 10000f32.powf(0.5);
        let expected = [
            0.5f32.sin(),
            0.5f32.cos(),
            (0.5 * f1).sin(),
            (0.5 * f1).cos(),
            (-2.0f32).sin(),
            (-2.0f32).cos(),
            (-2.0 * f1).sin(),
            (-2.0 * f1).cos(),
        ];
        for (a, b) in pe[0].iter().zip(expected) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(sine_position_encoding(&pos, 6).is_err());
    }

    #[test]
    fn softmax_sums_to_one() {
        let x = Tensor::new(&[[1f32, 2., 3.], [-1e9, 0., 0.]], &Device::Cpu).unwrap();
        let s = softmax_last(&x).unwrap().to_vec2::<f32>().unwrap();
        for row in &s {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        assert_eq!(s[1][0], 0.0);
        let ls = log_softmax_last(&x).unwrap().to_vec2::<f32>().unwrap();
        assert!((ls[0][2].exp() - s[0][2]).abs() < 1e-6);
    }
}
