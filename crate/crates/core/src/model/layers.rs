use rand::Rng;

use crate::autodiff::{Binding, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let weight = store.add_linear_weight(format!("{name}.weight"), fan_in, fan_out, rng);
        let bound = (1.0 / fan_in as f64).sqrt();
        let bias = store.add(format!("{name}.bias"), Tensor::uniform(&[fan_out], bound, rng));
        Linear { weight, bias }
    }

    pub fn apply(&self, tape: &Tape, p: &Binding, x: Var) -> Result<Var> {
        tape.add_row(tape.matmul(x, p.var(self.weight))?, p.var(self.bias))
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Norm {
            gain: store.add(format!("{name}.gain"), Tensor::filled(&[width], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[width])),
        }
    }

    pub fn apply(&self, tape: &Tape, p: &Binding, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(self.gain), p.var(self.bias), LN_EPS)
    }
}

/// Stack of linear maps with GELU between them.
#[derive(Clone, Debug)]
pub(crate) struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut R) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| Linear::new(store, &format!("{name}.{i}"), d[0], d[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn apply(&self, tape: &Tape, p: &Binding, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = tape.gelu(h)?;
            }
            h = layer.apply(tape, p, h)?;
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Linear::params).collect()
    }
}

/// Position-wise feed-forward block.
#[derive(Clone, Debug)]
pub(crate) struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, width: usize, hidden: usize, rng: &mut R) -> Self {
        FeedForward {
            up: Linear::new(store, &format!("{name}.up"), width, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, width, rng),
        }
    }

    pub fn apply(&self, tape: &Tape, p: &Binding, x: Var) -> Result<Var> {
        let h = tape.gelu(self.up.apply(tape, p, x)?)?;
        self.down.apply(tape, p, h)
    }
}

/// Post-norm encoder layer with windowed multi-head self-attention.
#[derive(Clone, Debug)]
pub(crate) struct EncoderLayer {
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    ffn: FeedForward,
    norm_attn: Norm,
    norm_ffn: Norm,
}

impl EncoderLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, width: usize, ffn_dim: usize, rng: &mut R) -> Self {
        EncoderLayer {
            query: Linear::new(store, &format!("{name}.attn.query"), width, width, rng),
            key: Linear::new(store, &format!("{name}.attn.key"), width, width, rng),
            value: Linear::new(store, &format!("{name}.attn.value"), width, width, rng),
            out: Linear::new(store, &format!("{name}.attn.out"), width, width, rng),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), width, ffn_dim, rng),
            norm_attn: Norm::new(store, &format!("{name}.norm_attn"), width),
            norm_ffn: Norm::new(store, &format!("{name}.norm_ffn"), width),
        }
    }

    pub fn apply(&self, tape: &Tape, p: &Binding, x: Var, heads: usize, window: usize) -> Result<Var> {
        let q = self.query.apply(tape, p, x)?;
        let k = self.key.apply(tape, p, x)?;
        let v = self.value.apply(tape, p, x)?;
        let weights = tape.attention_probs(q, k, heads, Some(window))?;
        let attended = tape.attention_apply(weights, v, Some(window))?;
        let h = self.norm_attn.apply(tape, p, tape.add(x, self.out.apply(tape, p, attended)?)?)?;
        let f = self.ffn.apply(tape, p, h)?;
        self.norm_ffn.apply(tape, p, tape.add(h, f)?)
    }
}

/// Attention sublayer for the two query streams.
///
/// Weights come from the summed streams; each stream aggregates its own values
/// and keeps its own output projection and norm.
#[derive(Clone, Debug)]
struct DualAttention {
    query: Linear,
    key: Linear,
    value_act: Linear,
    value_pos: Linear,
    out_act: Linear,
    out_pos: Linear,
    norm_act: Norm,
    norm_pos: Norm,
}

impl DualAttention {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, width: usize, rng: &mut R) -> Self {
        let lin = |store: &mut ParamStore, part: &str, rng: &mut R| {
            Linear::new(store, &format!("{name}.{part}"), width, width, rng)
        };
        DualAttention {
            query: lin(store, "query", rng),
            key: lin(store, "key", rng),
            value_act: lin(store, "value_act", rng),
            value_pos: lin(store, "value_pos", rng),
            out_act: lin(store, "out_act", rng),
            out_pos: lin(store, "out_pos", rng),
            norm_act: Norm::new(store, &format!("{name}.norm_act"), width),
            norm_pos: Norm::new(store, &format!("{name}.norm_pos"), width),
        }
    }

    /// `keys` feeds the key projection; `src_act`/`src_pos` feed the two value projections.
    #[allow(clippy::too_many_arguments)]
    fn apply(
        &self,
        tape: &Tape,
        p: &Binding,
        act: Var,
        pos: Var,
        keys: Var,
        src_act: Var,
        src_pos: Var,
        heads: usize,
    ) -> Result<(Var, Var)> {
        let q = self.query.apply(tape, p, tape.add(act, pos)?)?;
        let k = self.key.apply(tape, p, keys)?;
        let weights = tape.attention_probs(q, k, heads, None)?;
        let va = self.value_act.apply(tape, p, src_act)?;
        let vp = self.value_pos.apply(tape, p, src_pos)?;
        let oa = self.out_act.apply(tape, p, tape.attention_apply(weights, va, None)?)?;
        let op = self.out_pos.apply(tape, p, tape.attention_apply(weights, vp, None)?)?;
        let act = self.norm_act.apply(tape, p, tape.add(act, oa)?)?;
        let pos = self.norm_pos.apply(tape, p, tape.add(pos, op)?)?;
        Ok((act, pos))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct DecoderLayer {
    self_attn: DualAttention,
    cross_attn: DualAttention,
    ffn_act: FeedForward,
    ffn_pos: FeedForward,
    norm_ffn_act: Norm,
    norm_ffn_pos: Norm,
}

/// Encoder memory as seen by every decoder layer.
pub(crate) struct Memory {
    pub act: Var,
    pub pos: Var,
    /// `act + pos`, the key input for cross-attention.
    pub keys: Var,
}

impl DecoderLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, width: usize, ffn_dim: usize, rng: &mut R) -> Self {
        DecoderLayer {
            self_attn: DualAttention::new(store, &format!("{name}.self_attn"), width, rng),
            cross_attn: DualAttention::new(store, &format!("{name}.cross_attn"), width, rng),
            ffn_act: FeedForward::new(store, &format!("{name}.ffn_act"), width, ffn_dim, rng),
            ffn_pos: FeedForward::new(store, &format!("{name}.ffn_pos"), width, ffn_dim, rng),
            norm_ffn_act: Norm::new(store, &format!("{name}.norm_ffn_act"), width),
            norm_ffn_pos: Norm::new(store, &format!("{name}.norm_ffn_pos"), width),
        }
    }

    pub fn apply(
        &self,
        tape: &Tape,
        p: &Binding,
        act: Var,
        pos: Var,
        memory: &Memory,
        heads: usize,
    ) -> Result<(Var, Var)> {
        let both = tape.add(act, pos)?;
        let (act, pos) = self.self_attn.apply(tape, p, act, pos, both, act, pos, heads)?;
        let (act, pos) =
            self.cross_attn
                .apply(tape, p, act, pos, memory.keys, memory.act, memory.pos, heads)?;
        let fa = self.ffn_act.apply(tape, p, act)?;
        let fp = self.ffn_pos.apply(tape, p, pos)?;
        let act = self.norm_ffn_act.apply(tape, p, tape.add(act, fa)?)?;
        let pos = self.norm_ffn_pos.apply(tape, p, tape.add(pos, fp)?)?;
        Ok((act, pos))
    }
}

/// Fixed sinusoidal encoding of frame order, `[t × width]`.
pub(crate) fn sinusoidal_encoding(t: usize, width: usize) -> Tensor {
    let mut data = vec![0.0; t * width];
    for pos in 0..t {
        for i in 0..width {
            let pair = (i / 2) as f64;
            let freq = 1.0 / 10_000f64.powf(2.0 * pair / width as f64);
            let angle = pos as f64 * freq;
            data[pos * width + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(&[t, width], data).expect("shape matches")
}
