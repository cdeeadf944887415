//! Encoder, query selection, decoder and prediction heads.
//!
//! The encoder scores every frame with the shared heads, the `Q` most
//! confident frames seed the decoder queries, and each decoder layer emits a
//! set of `Q` (probability, interval) predictions. Counting thresholds the
//! final layer's probabilities.

mod checkpoint;
mod config;
mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use config::ModelConfig;

use crate::autodiff::{Binding, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::Interval;
use layers::{sinusoidal_encoding, DecoderLayer, EncoderLayer, Linear, Memory, Mlp};

/// Which stage produced a prediction set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerTag {
    /// Shared heads applied to every encoder frame.
    Encoder,
    /// An intermediate decoder layer (0-based).
    Decoder(usize),
    /// The last decoder layer.
    Final,
}

/// Per-query repetitive-class probabilities and intervals.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub probs: Vec<f64>,
    pub locations: Vec<Interval>,
    pub tag: LayerTag,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Head outputs on the tape together with their values.
#[derive(Clone, Debug)]
pub struct HeadOutput {
    pub probs: Var,
    pub mid: Var,
    pub dur: Var,
    pub set: PredictionSet,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    pub act: Var,
    pub pos: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub final_preds: HeadOutput,
    /// One entry per decoder layer except the last, in layer order.
    pub layer_preds: Vec<HeadOutput>,
    /// Heads applied to all `T` encoder frames.
    pub encoder_preds: HeadOutput,
    /// Action-stream features of the last decoder layer, `[Q × C]`.
    pub decoder_act: Var,
    /// Encoder frames chosen as queries, in ranking order.
    pub selected: Vec<usize>,
    /// Selected encoder action rows `E^act`.
    pub selected_act: Var,
    /// Action queries entering the first decoder layer.
    pub initial_act_queries: Var,
}

/// Normalized position of the center of frame `t`.
pub fn frame_center(t: usize, seq_len: usize) -> f64 {
    (t as f64 + 0.5) / seq_len as f64
}

/// Ranks frames by confidence (ties to the earlier frame) and keeps the first `q`.
pub fn select_top(probs: &[f64], q: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order.truncate(q);
    order
}

/// Number of queries whose probability strictly exceeds `alpha`.
pub fn count(probs: &[f64], alpha: f64) -> usize {
    probs.iter().filter(|&&p| p > alpha).count()
}

#[derive(Clone, Debug)]
pub struct QueryModel {
    config: ModelConfig,
    params: ParamStore,
    input: Linear,
    encoder: Vec<EncoderLayer>,
    act_proj: Linear,
    pos_proj: Linear,
    action_head: Mlp,
    position_head: Mlp,
    static_act_queries: Option<ParamId>,
    pos_queries: ParamId,
    decoder: Vec<DecoderLayer>,
}

impl QueryModel {
    /// Builds a model with parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let c = config.width;
        let input = Linear::new(&mut params, "input", config.input_dim, c, &mut rng);
        let encoder = (0..config.encoder_layers)
            .map(|i| EncoderLayer::new(&mut params, &format!("encoder.{i}"), c, config.ffn_dim, &mut rng))
            .collect();
        let act_proj = Linear::new(&mut params, "encoder.act_proj", c, c, &mut rng);
        let pos_proj = Linear::new(&mut params, "encoder.pos_proj", c, c, &mut rng);
        let h = config.head_hidden;
        let action_head = Mlp::new(&mut params, "head.action", &[c, h, h, 2], &mut rng);
        let position_head = Mlp::new(&mut params, "head.position", &[c, h, h, 2], &mut rng);
        let q = config.queries;
        let bound = (1.0 / c as f64).sqrt();
        let static_act_queries = (!config.use_daq)
            .then(|| params.add("decoder.act_queries", Tensor::uniform(&[q, c], bound, &mut rng)));
        let pos_queries = params.add("decoder.pos_queries", Tensor::uniform(&[q, c], bound, &mut rng));
        let decoder = (0..config.decoder_layers)
            .map(|i| DecoderLayer::new(&mut params, &format!("decoder.{i}"), c, config.ffn_dim, &mut rng))
            .collect();
        Ok(QueryModel {
            config,
            params,
            input,
            encoder,
            act_proj,
            pos_proj,
            action_head,
            position_head,
            static_act_queries,
            pos_queries,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.numel()
    }

    /// Parameters of the action and position heads, shared by every stage.
    pub fn head_params(&self) -> Vec<ParamId> {
        let mut ids = self.action_head.params();
        ids.extend(self.position_head.params());
        ids
    }

    /// Static action-query table, present only when dynamic queries are off.
    pub fn static_act_queries(&self) -> Option<ParamId> {
        self.static_act_queries
    }

    pub fn pos_queries(&self) -> ParamId {
        self.pos_queries
    }

    fn check_input(&self, features: &Tensor) -> Result<(usize, usize)> {
        let (t, c_in) = features
            .dims2()
            .ok_or_else(|| Error::Contract(format!("features must be a matrix, got {:?}", features.shape())))?;
        if c_in != self.config.input_dim {
            return Err(Error::Contract(format!(
                "feature width {c_in} does not match model input width {}",
                self.config.input_dim
            )));
        }
        if t < self.config.queries {
            return Err(Error::Contract(format!(
                "{t} frames cannot supply {} queries",
                self.config.queries
            )));
        }
        Ok((t, c_in))
    }

    /// Linear projection of the input plus a sinusoidal encoding of frame order.
    pub fn embed_input(&self, tape: &Tape, p: &Binding, features: &Tensor) -> Result<Var> {
        let (t, _) = self.check_input(features)?;
        let x = tape.constant(features.clone());
        let projected = self.input.apply(tape, p, x)?;
        let pe = tape.constant(sinusoidal_encoding(t, self.config.width));
        tape.add(projected, pe)
    }

    pub fn encode(&self, tape: &Tape, p: &Binding, embedded: Var) -> Result<EncoderOutput> {
        let mut h = embedded;
        for layer in &self.encoder {
            h = layer.apply(tape, p, h, self.config.heads, self.config.window)?;
        }
        Ok(EncoderOutput {
            act: self.act_proj.apply(tape, p, h)?,
            pos: self.pos_proj.apply(tape, p, h)?,
        })
    }

    /// Shared action and position heads over `n` rows of features.
    ///
    /// `reference[i]` is the normalized frame position row `i` originates
    /// from; the midpoint head predicts a logit offset from it.
    #[allow(clippy::too_many_arguments)]
    pub fn predict_heads(
        &self,
        tape: &Tape,
        p: &Binding,
        act: Var,
        pos: Var,
        reference: &[f64],
        seq_len: usize,
        tag: LayerTag,
    ) -> Result<HeadOutput> {
        let logits = self.action_head.apply(tape, p, act)?;
        let probs = tape.column(tape.softmax(logits, 1)?, 1)?;
        let raw = self.position_head.apply(tape, p, pos)?;
        let ref_logit = tape.constant(Tensor::vector(reference.iter().map(|&r| (r / (1.0 - r)).ln()).collect()));
        let mid = tape.sigmoid(tape.add(tape.column(raw, 0)?, ref_logit)?)?;
        // durations live in [1/T, 1)
        let floor = 1.0 / seq_len as f64;
        let dur = tape.add_scalar(tape.scale(tape.sigmoid(tape.column(raw, 1)?)?, 1.0 - floor)?, floor)?;

        let set = {
            let pv = tape.value(probs).data().to_vec();
            let mv = tape.value(mid);
            let dv = tape.value(dur);
            let locations = mv
                .data()
                .iter()
                .zip(dv.data())
                .map(|(&m, &d)| Interval::new(m, d))
                .collect::<Result<Vec<_>>>()?;
            PredictionSet {
                probs: pv,
                locations,
                tag,
            }
        };
        Ok(HeadOutput { probs, mid, dur, set })
    }

    /// Scores all frames and gathers the `Q` most confident rows of both streams.
    pub fn select_queries(
        &self,
        tape: &Tape,
        p: &Binding,
        enc: &EncoderOutput,
        seq_len: usize,
    ) -> Result<(Var, Var, HeadOutput, Vec<usize>)> {
        let frames: Vec<f64> = (0..seq_len).map(|t| frame_center(t, seq_len)).collect();
        let aux = self.predict_heads(tape, p, enc.act, enc.pos, &frames, seq_len, LayerTag::Encoder)?;
        let selected = select_top(&aux.set.probs, self.config.queries);
        let act = tape.gather_rows(enc.act, &selected)?;
        let pos = tape.gather_rows(enc.pos, &selected)?;
        Ok((act, pos, aux, selected))
    }

    /// Runs the decoder; returns the initial action queries and `(D^act, D^pos)` per layer.
    pub fn decode(
        &self,
        tape: &Tape,
        p: &Binding,
        selected_act: Var,
        selected_pos: Var,
        memory: &EncoderOutput,
    ) -> Result<(Var, Vec<(Var, Var)>)> {
        let init_act = match self.static_act_queries {
            None => selected_act,
            Some(table) => p.var(table),
        };
        let init_pos = tape.add(p.var(self.pos_queries), selected_pos)?;
        let mem = Memory {
            act: memory.act,
            pos: memory.pos,
            keys: tape.add(memory.act, memory.pos)?,
        };
        let mut act = init_act;
        let mut pos = init_pos;
        let mut outputs = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            (act, pos) = layer.apply(tape, p, act, pos, &mem, self.config.heads)?;
            outputs.push((act, pos));
        }
        Ok((init_act, outputs))
    }

    pub fn forward(&self, tape: &Tape, p: &Binding, features: &Tensor) -> Result<ForwardOutput> {
        let (t, _) = self.check_input(features)?;
        let embedded = self.embed_input(tape, p, features)?;
        let enc = self.encode(tape, p, embedded)?;
        let (sel_act, sel_pos, encoder_preds, selected) = self.select_queries(tape, p, &enc, t)?;
        let (initial_act_queries, layers) = self.decode(tape, p, sel_act, sel_pos, &enc)?;

        let reference: Vec<f64> = selected.iter().map(|&i| frame_center(i, t)).collect();
        let last = layers.len() - 1;
        let mut layer_preds = Vec::with_capacity(last);
        let mut final_preds = None;
        for (i, &(act, pos)) in layers.iter().enumerate() {
            let tag = if i == last { LayerTag::Final } else { LayerTag::Decoder(i) };
            let out = self.predict_heads(tape, p, act, pos, &reference, t, tag)?;
            if i == last {
                final_preds = Some(out);
            } else {
                layer_preds.push(out);
            }
        }
        Ok(ForwardOutput {
            final_preds: final_preds.expect("at least one decoder layer"),
            layer_preds,
            encoder_preds,
            decoder_act: layers[last].0,
            selected,
            selected_act: sel_act,
            initial_act_queries,
        })
    }

    /// Inference pass on a fresh tape; returns the final prediction set.
    pub fn predict(&self, features: &Tensor) -> Result<PredictionSet> {
        let tape = Tape::new();
        let binding = self.params.bind_frozen(&tape);
        Ok(self.forward(&tape, &binding, features)?.final_preds.set)
    }

    /// Predicted count at the configured threshold.
    pub fn count(&self, features: &Tensor) -> Result<usize> {
        Ok(count(&self.predict(features)?.probs, self.config.alpha))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            seq_len: 24,
            input_dim: 4,
            width: 8,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 2,
            queries: 4,
            window: 3,
            ffn_dim: 8,
            head_hidden: 8,
            alpha: 0.2,
            use_daq: true,
            use_icl: true,
        }
    }

    fn random_features(t: usize, c: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..t * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::matrix(t, c, data).unwrap()
    }

    #[test]
    fn count_is_strict() {
        assert_eq!(count(&[0.9, 0.1, 0.6, 0.05], 0.2), 2);
        assert_eq!(count(&[0.1, 0.05], 0.2), 0);
        assert_eq!(count(&[0.5], 0.5), 0);
    }

    #[test]
    fn selection_ranks_and_breaks_ties_early() {
        assert_eq!(select_top(&[0.1, 0.99, 0.1, 0.1], 1), vec![1]);
        assert_eq!(select_top(&[0.3, 0.5, 0.3, 0.7], 4), vec![3, 1, 0, 2]);
    }

    #[test]
    fn forward_shapes_and_fixed_set_size() {
        let cfg = tiny_config();
        let model = QueryModel::new(cfg.clone(), 1).unwrap();
        let tape = Tape::new();
        let p = model.params().bind(&tape);
        let out = model.forward(&tape, &p, &random_features(24, 4, 2)).unwrap();
        assert_eq!(out.final_preds.set.len(), cfg.queries);
        assert_eq!(out.layer_preds.len(), cfg.decoder_layers - 1);
        assert_eq!(out.encoder_preds.set.len(), 24);
        assert_eq!(tape.shape(out.decoder_act), vec![cfg.queries, cfg.width]);
        for set in [&out.final_preds.set, &out.encoder_preds.set] {
            assert!(set.probs.iter().all(|p| (0.0..=1.0).contains(p)));
            assert!(set.locations.iter().all(|l| l.dur() > 0.0 && l.dur() < 1.0));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let model = QueryModel::new(tiny_config(), 7).unwrap();
        let f = random_features(24, 4, 3);
        let a = model.predict(&f).unwrap();
        let b = QueryModel::new(tiny_config(), 7).unwrap().predict(&f).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let model = QueryModel::new(tiny_config(), 1).unwrap();
        assert!(matches!(model.predict(&random_features(24, 5, 0)), Err(Error::Contract(_))));
    }

    #[test]
    fn embedding_of_zero_input_is_bias_plus_encoding() {
        let model = QueryModel::new(tiny_config(), 1).unwrap();
        let tape = Tape::new();
        let p = model.params().bind(&tape);
        let e = model.embed_input(&tape, &p, &Tensor::zeros(&[24, 4])).unwrap();
        let pe = sinusoidal_encoding(24, 8);
        let bias = model.params().get(model.input.bias).clone();
        let v = tape.value(e);
        for t in 0..24 {
            for c in 0..8 {
                assert!((v.at(t, c) - pe.at(t, c) - bias.data()[c]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn identical_frames_embed_differently_at_different_times() {
        let model = QueryModel::new(tiny_config(), 1).unwrap();
        let tape = Tape::new();
        let p = model.params().bind(&tape);
        let f = Tensor::filled(&[24, 4], 0.3);
        let e = model.embed_input(&tape, &p, &f).unwrap();
        let v = tape.value(e);
        assert_ne!(v.row(0), v.row(5));
    }

    #[test]
    fn dynamic_queries_copy_selected_rows() {
        let model = QueryModel::new(tiny_config(), 5).unwrap();
        let tape = Tape::new();
        let p = model.params().bind(&tape);
        let out = model.forward(&tape, &p, &random_features(24, 4, 9)).unwrap();
        assert_eq!(out.initial_act_queries, out.selected_act);
        assert_eq!(*tape.value(out.initial_act_queries), *tape.value(out.selected_act));
    }

    #[test]
    fn static_queries_without_daq() {
        let mut cfg = tiny_config();
        cfg.use_daq = false;
        let model = QueryModel::new(cfg, 5).unwrap();
        let table = model.static_act_queries().expect("static table");
        let tape = Tape::new();
        let p = model.params().bind(&tape);
        let out = model.forward(&tape, &p, &random_features(24, 4, 9)).unwrap();
        assert_eq!(out.initial_act_queries, p.var(table));
    }
}
