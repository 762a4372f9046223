//! Lift → iterate → project operator stack with a swappable token mixer.

pub mod checkpoint;

pub use checkpoint::{read_container, write_container, Container};

use std::sync::Arc;

use ndarray::{s, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamVars, Real, Tape, Unary, Var};
use crate::error::{MnoError, Result};
use crate::field::{Extent, GridField};
use crate::mixers::{
    init_uniform, inverse_permutation, AttentionParams, CrossS6BlockParams, DivisorMode, MergeReduction, S6BlockParams,
    ScanLayout,
};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MixerKind {
    #[default]
    MambaBidirectional,
    CrossMambaBidirectional,
    SoftmaxAttention,
    GalerkinAttention,
}

impl MixerKind {
    pub const ALL: [MixerKind; 4] = [
        MixerKind::MambaBidirectional,
        MixerKind::CrossMambaBidirectional,
        MixerKind::SoftmaxAttention,
        MixerKind::GalerkinAttention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MixerKind::MambaBidirectional => "mamba_bidirectional",
            MixerKind::CrossMambaBidirectional => "cross_mamba_bidirectional",
            MixerKind::SoftmaxAttention => "softmax_attention",
            MixerKind::GalerkinAttention => "galerkin_attention",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Rollout {
    SingleStepAutoregressive,
    #[default]
    OneShot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Which pair of traversals the SSM mixers use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScanPaths {
    #[default]
    RowBidirectional,
    ColumnBidirectional,
}

/// Per-channel affine normalisation of inputs and outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalizer {
    pub in_mean: Vec<f64>,
    pub in_std: Vec<f64>,
    pub out_mean: Vec<f64>,
    pub out_std: Vec<f64>,
}

impl Normalizer {
    /// Channel statistics over every cell of every field. Channels with
    /// (near) zero spread get unit scale.
    pub fn fit(inputs: &[&GridField], targets: &[&GridField]) -> Result<Self> {
        let (in_mean, in_std) = channel_stats(inputs)?;
        let (out_mean, out_std) = channel_stats(targets)?;
        Ok(Normalizer { in_mean, in_std, out_mean, out_std })
    }
}

fn channel_stats(fields: &[&GridField]) -> Result<(Vec<f64>, Vec<f64>)> {
    let first = fields.first().ok_or_else(|| MnoError::invalid("normaliser needs at least one field"))?;
    let c = first.channels();
    let mut sum = vec![0.0; c];
    let mut sq = vec![0.0; c];
    let mut count = 0usize;
    for f in fields {
        if f.channels() != c {
            return Err(MnoError::invalid("normaliser fields disagree on channel count"));
        }
        for cell in f.data.lanes(Axis(2)) {
            for (k, &v) in cell.iter().enumerate() {
                sum[k] += v;
                sq[k] += v * v;
            }
        }
        count += f.cells();
    }
    let n = count as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| {
            let var = (q / n - m * m).max(0.0);
            if var.sqrt() < 1e-12 {
                1.0
            } else {
                var.sqrt()
            }
        })
        .collect();
    Ok((mean, std))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Input channels (`d_a`), excluding coordinates.
    pub in_channels: usize,
    /// Output channels (`d_u`).
    pub out_channels: usize,
    pub d_v: usize,
    pub depth: usize,
    pub mixer_kind: MixerKind,
    /// 0 or 2: whether normalised `(x, y)` are appended to the lift input.
    pub coord_dim: usize,
    pub rollout: Rollout,
    pub input_window: usize,
    pub precision: Precision,
    /// SSM state size `N`.
    pub d_state: usize,
    /// SSM expansion factor, `E = expand · d_v`.
    pub expand: usize,
    /// Cross-S6 mixing ratio.
    pub q: f64,
    pub scan_paths: ScanPaths,
    pub merge: MergeReduction,
    /// Attention key width; 0 means `d_v`.
    pub d_k: usize,
    pub divisor_mode: DivisorMode,
    pub activation: Unary,
    pub residual: bool,
    pub gated: bool,
    pub inner_activation: Unary,
    /// Hidden width of the lift MLP; 0 gives a single linear map.
    pub lift_hidden: usize,
    /// Hidden width of the projection MLP; 0 gives a single linear map.
    pub proj_hidden: usize,
    /// Offset added to query coordinates.
    pub query_shift: f64,
    pub normalization: Option<Normalizer>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            out_channels: 1,
            d_v: 32,
            depth: 3,
            mixer_kind: MixerKind::MambaBidirectional,
            coord_dim: 2,
            rollout: Rollout::OneShot,
            input_window: 10,
            precision: Precision::F32,
            d_state: 8,
            expand: 2,
            q: 0.5,
            scan_paths: ScanPaths::RowBidirectional,
            merge: MergeReduction::Mean,
            d_k: 0,
            divisor_mode: DivisorMode::SeqLen,
            activation: Unary::Gelu,
            residual: true,
            gated: true,
            inner_activation: Unary::Silu,
            lift_hidden: 32,
            proj_hidden: 64,
            query_shift: 0.0,
            normalization: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(MnoError::invalid(format!("{field}: {why}")));
        if self.depth == 0 {
            return bad("depth", "at least one operator layer is required");
        }
        if self.d_v == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return bad("d_v", "widths and channel counts must be positive");
        }
        if self.coord_dim != 0 && self.coord_dim != 2 {
            return bad("coord_dim", "must be 0 or 2");
        }
        if matches!(self.mixer_kind, MixerKind::MambaBidirectional | MixerKind::CrossMambaBidirectional)
            && (self.d_state == 0 || self.expand == 0)
        {
            return bad("d_state", "state size and expansion must be positive");
        }
        if !(self.q >= 0.0) || !self.q.is_finite() {
            return bad("q", "must be finite and non-negative");
        }
        if self.input_window == 0 {
            return bad("input_window", "must be positive");
        }
        if !self.query_shift.is_finite() {
            return bad("query_shift", "must be finite");
        }
        if let Some(n) = &self.normalization {
            if n.in_mean.len() != self.in_channels
                || n.in_std.len() != self.in_channels
                || n.out_mean.len() != self.out_channels
                || n.out_std.len() != self.out_channels
            {
                return bad("normalization", "statistics do not match channel counts");
            }
            if n.in_std.iter().chain(&n.out_std).any(|s| !(*s > 0.0) || !s.is_finite()) {
                return bad("normalization", "scales must be positive and finite");
            }
        }
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        if self.d_k == 0 {
            self.d_v
        } else {
            self.d_k
        }
    }

    pub fn layout(&self, height: usize, width: usize) -> ScanLayout {
        let mut layout = match self.scan_paths {
            ScanPaths::RowBidirectional => ScanLayout::bidirectional(height, width),
            ScanPaths::ColumnBidirectional => ScanLayout::column_bidirectional(height, width),
        };
        layout.merge = self.merge;
        layout
    }

    fn n_paths(&self) -> usize {
        2
    }
}

/// Pointwise MLP: linear layers with the activation between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<(ParamId, ParamId)>,
    pub activation: Unary,
}

impl Mlp {
    fn init<T: Real>(store: &mut ParamStore<T>, prefix: &str, widths: &[usize], activation: Unary, rng: &mut ChaCha8Rng) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let weight = store.add(format!("{prefix}.{k}.w"), init_uniform(rng, w[0], w[1], w[0]));
                let bias = store.add(format!("{prefix}.{k}.b"), Array2::zeros((1, w[1])));
                (weight, bias)
            })
            .collect();
        Mlp { layers, activation }
    }

    fn forward<T: Real>(&self, tape: &mut Tape<T>, pv: &ParamVars, mut x: Var) -> Var {
        for (k, &(w, b)) in self.layers.iter().enumerate() {
            if k > 0 {
                x = tape.unary(x, self.activation);
            }
            x = tape.matmul(x, pv.get(w));
            x = tape.add_row(x, pv.get(b));
        }
        x
    }
}

#[derive(Clone, Debug)]
pub enum MixerParams {
    /// One S6 block per scan path.
    Mamba(Vec<S6BlockParams>),
    /// One cross-S6 block per scan path.
    CrossMamba(Vec<CrossS6BlockParams>),
    Softmax(AttentionParams),
    Galerkin(AttentionParams),
}

/// `out = σ(W v + b + K(v)) (+ v)`.
#[derive(Clone, Debug)]
pub struct OperatorLayer {
    pub w_local: ParamId,
    pub b_local: ParamId,
    pub mixer: MixerParams,
    pub activation: Unary,
    pub uses_residual: bool,
}

/// Intermediate feature maps recorded during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TapKind {
    /// After the linear-plus-mixer update, before the activation.
    Operator,
    /// The layer output.
    Mlp,
}

#[derive(Clone, Debug)]
pub struct Tap {
    pub layer: usize,
    pub kind: TapKind,
    /// `(index + 1) / (2L)` in `(0, 1]`.
    pub depth: f64,
    pub field: GridField,
}

/// Graph handles produced by [`OperatorModel::record`].
pub struct Recorded {
    pub output: Var,
    pub taps: Vec<(usize, TapKind, Var)>,
}

#[derive(Clone, Debug)]
pub struct OperatorModel<T: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub lift: Mlp,
    pub layers: Vec<OperatorLayer>,
    pub proj: Mlp,
}

impl<T: Real> OperatorModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d_v = config.d_v;
        let lift_in = config.in_channels + config.coord_dim;
        let lift_widths: Vec<usize> = if config.lift_hidden == 0 {
            vec![lift_in, d_v]
        } else {
            vec![lift_in, config.lift_hidden, d_v]
        };
        let lift = Mlp::init(&mut params, "lift", &lift_widths, Unary::Gelu, &mut rng);
        let mut layers = Vec::with_capacity(config.depth);
        for l in 0..config.depth {
            let prefix = format!("layer{l}");
            let w_local = params.add(format!("{prefix}.w"), init_uniform(&mut rng, d_v, d_v, d_v));
            let b_local = params.add(format!("{prefix}.b"), Array2::zeros((1, d_v)));
            let e = config.expand * d_v;
            let mixer = match config.mixer_kind {
                MixerKind::MambaBidirectional => MixerParams::Mamba(
                    (0..config.n_paths())
                        .map(|p| {
                            let mut b =
                                S6BlockParams::init(&mut params, &format!("{prefix}.s6.{p}"), d_v, e, config.d_state, &mut rng);
                            b.gated = config.gated;
                            b.inner_activation = config.inner_activation;
                            b
                        })
                        .collect(),
                ),
                MixerKind::CrossMambaBidirectional => MixerParams::CrossMamba(
                    (0..config.n_paths())
                        .map(|p| {
                            let mut b = CrossS6BlockParams::init(
                                &mut params,
                                &format!("{prefix}.xs6.{p}"),
                                d_v,
                                e,
                                config.d_state,
                                config.q,
                                &mut rng,
                            )?;
                            b.gated = config.gated;
                            b.inner_activation = config.inner_activation;
                            Ok(b)
                        })
                        .collect::<Result<_>>()?,
                ),
                MixerKind::SoftmaxAttention => MixerParams::Softmax(AttentionParams::init(
                    &mut params,
                    &format!("{prefix}.attn"),
                    d_v,
                    config.d_k(),
                    d_v,
                    config.divisor_mode,
                    &mut rng,
                )),
                MixerKind::GalerkinAttention => MixerParams::Galerkin(AttentionParams::init(
                    &mut params,
                    &format!("{prefix}.attn"),
                    d_v,
                    config.d_k(),
                    d_v,
                    config.divisor_mode,
                    &mut rng,
                )),
            };
            layers.push(OperatorLayer {
                w_local,
                b_local,
                mixer,
                activation: config.activation,
                uses_residual: config.residual,
            });
        }
        let proj_widths: Vec<usize> = if config.proj_hidden == 0 {
            vec![d_v, config.out_channels]
        } else {
            vec![d_v, config.proj_hidden, config.out_channels]
        };
        let proj = Mlp::init(&mut params, "proj", &proj_widths, Unary::Gelu, &mut rng);
        Ok(OperatorModel { config, params, lift, layers, proj })
    }

    /// Same architecture and values in another scalar type.
    pub fn cast<U: Real>(&self) -> OperatorModel<U> {
        OperatorModel {
            config: self.config.clone(),
            params: self.params.cast(),
            lift: self.lift.clone(),
            layers: self.layers.clone(),
            proj: self.proj.clone(),
        }
    }

    /// Lift-input tokens: normalised channels followed by (shifted) unit
    /// coordinates, `H·W × (d_a + coord_dim)`.
    pub fn input_tokens(&self, a: &GridField) -> Result<Array2<T>> {
        if a.channels() != self.config.in_channels {
            return Err(MnoError::invalid(format!(
                "input has {} channels, model expects {}",
                a.channels(),
                self.config.in_channels
            )));
        }
        let (h, w) = (a.height(), a.width());
        let c = self.config.in_channels;
        let mut tok = Array2::<T>::zeros((h * w, c + self.config.coord_dim));
        let raw = a.to_tokens();
        for (r, row) in raw.rows().into_iter().enumerate() {
            for k in 0..c {
                let v = match &self.config.normalization {
                    Some(n) => (row[k] - n.in_mean[k]) / n.in_std[k],
                    None => row[k],
                };
                tok[[r, k]] = T::of(v);
            }
        }
        if self.config.coord_dim == 2 {
            let coords = GridField::unit_coordinates(h, w).to_tokens();
            for r in 0..h * w {
                tok[[r, c]] = T::of(coords[[r, 0]] + self.config.query_shift);
                tok[[r, c + 1]] = T::of(coords[[r, 1]] + self.config.query_shift);
            }
        }
        Ok(tok)
    }

    /// Record lift → layers → projection on `tape`, returning the
    /// (de-normalised) prediction tokens and the per-layer taps.
    pub fn record(&self, tape: &mut Tape<T>, pv: &ParamVars, a: &GridField) -> Result<Recorded> {
        let tokens = self.input_tokens(a)?;
        let layout = self.config.layout(a.height(), a.width());
        let perms: Vec<Arc<Vec<usize>>> = layout.permutations()?.into_iter().map(Arc::new).collect();
        let x = tape.constant(tokens);
        let v0 = self.lift.forward(tape, pv, x);
        let mut v = v0;
        let mut taps = Vec::with_capacity(2 * self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let (pre, out) = self.layer_forward(tape, pv, layer, v, v0, &perms, layout.merge);
            taps.push((l, TapKind::Operator, pre));
            taps.push((l, TapKind::Mlp, out));
            v = out;
        }
        let mut out = self.proj.forward(tape, pv, v);
        if let Some(n) = &self.config.normalization {
            let scale = tape.constant(row_of(&n.out_std));
            let shift = tape.constant(row_of(&n.out_mean));
            out = tape.mul_row(out, scale);
            out = tape.add_row(out, shift);
        }
        Ok(Recorded { output: out, taps })
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_forward(
        &self,
        tape: &mut Tape<T>,
        pv: &ParamVars,
        layer: &OperatorLayer,
        v: Var,
        v0: Var,
        perms: &[Arc<Vec<usize>>],
        merge: MergeReduction,
    ) -> (Var, Var) {
        let local = tape.matmul(v, pv.get(layer.w_local));
        let local = tape.add_row(local, pv.get(layer.b_local));
        let mixed = match &layer.mixer {
            MixerParams::Mamba(blocks) => {
                let outs: Vec<Var> = blocks
                    .iter()
                    .zip(perms)
                    .map(|(b, p)| {
                        let seq = tape.permute_rows(v, p.clone());
                        let y = b.forward(tape, pv, seq);
                        tape.permute_rows(y, Arc::new(inverse_permutation(p)))
                    })
                    .collect();
                reduce(tape, &outs, merge)
            }
            MixerParams::CrossMamba(blocks) => {
                let outs: Vec<Var> = blocks
                    .iter()
                    .zip(perms)
                    .map(|(b, p)| {
                        let seq = tape.permute_rows(v, p.clone());
                        let ctx = tape.permute_rows(v0, p.clone());
                        let y = b.forward(tape, pv, seq, ctx);
                        tape.permute_rows(y, Arc::new(inverse_permutation(p)))
                    })
                    .collect();
                reduce(tape, &outs, merge)
            }
            MixerParams::Softmax(a) => a.forward_softmax(tape, pv, v),
            MixerParams::Galerkin(a) => a.forward_galerkin(tape, pv, v),
        };
        let pre = tape.add(local, mixed);
        let act = tape.unary(pre, layer.activation);
        let out = if layer.uses_residual { tape.add(v, act) } else { act };
        (pre, out)
    }

    fn check_grid(&self, a: &GridField) -> Result<()> {
        if matches!(self.config.mixer_kind, MixerKind::GalerkinAttention) && a.cells() < 2 {
            return Err(MnoError::invalid("Galerkin attention needs at least two cells"));
        }
        Ok(())
    }

    /// Prediction `u = proj(layers(lift(a, coords)))`.
    pub fn forward(&self, a: &GridField) -> Result<GridField> {
        Ok(self.forward_with_taps(a)?.0)
    }

    /// Prediction plus the `2L` intermediate feature maps.
    pub fn forward_with_taps(&self, a: &GridField) -> Result<(GridField, Vec<Tap>)> {
        self.check_grid(a)?;
        let mut tape = Tape::new();
        let pv = tape.bind_params(&self.params);
        let rec = self.record(&mut tape, &pv, a)?;
        let (h, w) = (a.height(), a.width());
        let pred = to_field(tape.value(rec.output), h, w, a.extent)?;
        let n_taps = rec.taps.len() as f64;
        let taps = rec
            .taps
            .iter()
            .enumerate()
            .map(|(k, &(layer, kind, var))| {
                Ok(Tap { layer, kind, depth: (k + 1) as f64 / n_taps, field: to_field(tape.value(var), h, w, a.extent)? })
            })
            .collect::<Result<_>>()?;
        Ok((pred, taps))
    }

    /// The pointwise lift `v_0 = P(a, coords)` with explicitly supplied
    /// coordinates.
    pub fn lift(&self, a: &GridField, coords: &GridField) -> Result<GridField> {
        if coords.channels() != self.config.coord_dim {
            return Err(MnoError::invalid(format!(
                "coordinate field has {} channels, model expects {}",
                coords.channels(),
                self.config.coord_dim
            )));
        }
        if a.height() != coords.height() || a.width() != coords.width() {
            return Err(MnoError::invalid("input and coordinate grids differ in shape"));
        }
        let mut tokens = self.input_tokens(a)?;
        let c = self.config.in_channels;
        let ct = coords.to_tokens();
        for r in 0..tokens.nrows() {
            for k in 0..self.config.coord_dim {
                tokens[[r, c + k]] = T::of(ct[[r, k]]);
            }
        }
        let mut tape = Tape::new();
        let pv = tape.bind_params(&self.params);
        let x = tape.constant(tokens);
        let v = self.lift.forward(&mut tape, &pv, x);
        to_field(tape.value(v), a.height(), a.width(), a.extent)
    }

    /// One operator layer on a lifted field. `context` is the second stream
    /// (the lifted input) for cross-SSM layers and ignored otherwise.
    pub fn operator_layer_apply(&self, layer: usize, v: &GridField, context: Option<&GridField>) -> Result<GridField> {
        let lay = self
            .layers
            .get(layer)
            .ok_or_else(|| MnoError::invalid(format!("layer {layer} out of range")))?;
        if v.channels() != self.config.d_v {
            return Err(MnoError::invalid(format!("layer input has {} channels, expected {}", v.channels(), self.config.d_v)));
        }
        self.check_grid(v)?;
        let mut tape = Tape::new();
        let pv = tape.bind_params(&self.params);
        let vv = tape.constant(v.to_tokens().mapv(T::of));
        let ctx = match (&lay.mixer, context) {
            (MixerParams::CrossMamba(_), None) => {
                return Err(MnoError::invalid("cross-SSM layers need a context stream"));
            }
            (_, Some(c)) => {
                if !c.same_shape(v) {
                    return Err(MnoError::invalid("context stream shape differs from the layer input"));
                }
                tape.constant(c.to_tokens().mapv(T::of))
            }
            (_, None) => vv,
        };
        let layout = self.config.layout(v.height(), v.width());
        let perms: Vec<Arc<Vec<usize>>> = layout.permutations()?.into_iter().map(Arc::new).collect();
        let (_, out) = self.layer_forward(&mut tape, &pv, lay, vv, ctx, &perms, layout.merge);
        let out = tape.value(out);
        if let Some(pos) = out.iter().position(|x| !x.is_finite()) {
            return Err(MnoError::Divergence { step: 0, what: format!("layer {layer} output non-finite at index {pos}") });
        }
        to_field(out, v.height(), v.width(), v.extent)
    }

    /// Predict future frames from `history` (each a `components`-channel
    /// field). OneShot emits all frames in one pass; autoregressive mode
    /// slides the window one predicted frame at a time for `n_steps` steps.
    pub fn rollout(&self, history: &[GridField], n_steps: usize) -> Result<Vec<GridField>> {
        let window = self.config.input_window;
        if history.len() < window {
            return Err(MnoError::invalid(format!(
                "history has {} frames but the input window is {window}",
                history.len()
            )));
        }
        let comp = history[0].channels();
        if history.iter().any(|f| f.channels() != comp || !f.same_shape(&history[0])) {
            return Err(MnoError::invalid("history frames differ in shape"));
        }
        if self.config.in_channels != window * comp {
            return Err(MnoError::invalid(format!(
                "model takes {} channels but window × components = {}",
                self.config.in_channels,
                window * comp
            )));
        }
        let mut frames: Vec<GridField> = history[history.len() - window..].to_vec();
        match self.config.rollout {
            Rollout::OneShot => {
                if !self.config.out_channels.is_multiple_of(comp) {
                    return Err(MnoError::invalid("output channels are not a whole number of frames"));
                }
                let pred = self.forward(&stack_frames(&frames)?)?;
                let mut out = split_frames(&pred, comp)?;
                out.truncate(n_steps);
                Ok(out)
            }
            Rollout::SingleStepAutoregressive => {
                if self.config.out_channels != comp {
                    return Err(MnoError::invalid("autoregressive models must emit exactly one frame"));
                }
                let mut out = Vec::with_capacity(n_steps);
                for _ in 0..n_steps {
                    let next = self.forward(&stack_frames(&frames)?)?;
                    frames.remove(0);
                    frames.push(next.clone());
                    out.push(next);
                }
                Ok(out)
            }
        }
    }

    /// Overwrite weights so every map is the identity: lift, local linear
    /// and projection become `I`, biases and mixer outputs vanish, and the
    /// activation becomes the identity. Requires `d_a = d_v = d_u`, no
    /// coordinates and single-linear lift/projection.
    pub fn pin_identity(&mut self) -> Result<()> {
        let c = &self.config;
        if c.in_channels != c.d_v || c.out_channels != c.d_v || c.coord_dim != 0 || c.lift_hidden != 0 || c.proj_hidden != 0
        {
            return Err(MnoError::invalid("identity pinning needs equal widths, no coordinates and linear lift/projection"));
        }
        let eye = Array2::<T>::eye(c.d_v);
        for (w, b) in self.lift.layers.iter().chain(&self.proj.layers) {
            *self.params.get_mut(*w) = eye.clone();
            self.params.get_mut(*b).fill(T::zero());
        }
        for layer in &mut self.layers {
            *self.params.get_mut(layer.w_local) = eye.clone();
            self.params.get_mut(layer.b_local).fill(T::zero());
            layer.activation = Unary::Identity;
            layer.uses_residual = false;
            let outs: Vec<ParamId> = match &layer.mixer {
                MixerParams::Mamba(b) => b.iter().map(|b| b.w_out).collect(),
                MixerParams::CrossMamba(b) => b.iter().map(|b| b.w_out).collect(),
                MixerParams::Softmax(a) | MixerParams::Galerkin(a) => vec![a.w_o],
            };
            for id in outs {
                self.params.get_mut(id).fill(T::zero());
            }
        }
        self.config.activation = Unary::Identity;
        self.config.residual = false;
        Ok(())
    }
}

fn reduce<T: Real>(tape: &mut Tape<T>, outs: &[Var], merge: MergeReduction) -> Var {
    let mut acc = outs[0];
    for &o in &outs[1..] {
        acc = tape.add(acc, o);
    }
    match merge {
        MergeReduction::Sum => acc,
        MergeReduction::Mean => tape.scale(acc, T::of(1.0 / outs.len() as f64)),
    }
}

fn row_of<T: Real>(v: &[f64]) -> Array2<T> {
    Array2::from_shape_fn((1, v.len()), |(_, k)| T::of(v[k]))
}

fn to_field<T: Real>(tokens: &Array2<T>, h: usize, w: usize, extent: Extent) -> Result<GridField> {
    if let Some(pos) = tokens.iter().position(|x| !x.is_finite()) {
        return Err(MnoError::Divergence { step: 0, what: format!("non-finite activation at flat index {pos}") });
    }
    GridField::from_tokens(tokens.mapv(|x| x.f64()), h, w, extent)
}

/// Concatenate frames along channels, frame-major.
pub fn stack_frames(frames: &[GridField]) -> Result<GridField> {
    let first = frames.first().ok_or_else(|| MnoError::invalid("no frames to stack"))?;
    let (h, w, c) = first.data.dim();
    let mut data = Array3::zeros((h, w, c * frames.len()));
    for (t, f) in frames.iter().enumerate() {
        if f.data.dim() != (h, w, c) {
            return Err(MnoError::invalid("frames differ in shape"));
        }
        data.slice_mut(s![.., .., t * c..(t + 1) * c]).assign(&f.data);
    }
    GridField::new(data, first.extent, first.dt)
}

/// Inverse of [`stack_frames`].
pub fn split_frames(field: &GridField, components: usize) -> Result<Vec<GridField>> {
    if components == 0 || !field.channels().is_multiple_of(components) {
        return Err(MnoError::invalid(format!(
            "{} channels do not split into frames of {components}",
            field.channels()
        )));
    }
    (0..field.channels() / components)
        .map(|t| {
            GridField::new(
                field.data.slice(s![.., .., t * components..(t + 1) * components]).to_owned(),
                field.extent,
                field.dt,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixers::{scan_expand, scan_merge};
    use rand::Rng;

    fn small_config(kind: MixerKind) -> ModelConfig {
        ModelConfig {
            in_channels: 2,
            out_channels: 1,
            d_v: 6,
            depth: 2,
            mixer_kind: kind,
            d_state: 3,
            lift_hidden: 5,
            proj_hidden: 7,
            ..ModelConfig::default()
        }
    }

    fn random_field(seed: u64, h: usize, w: usize, c: usize) -> GridField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GridField::new(Array3::from_shape_fn((h, w, c), |_| rng.random_range(-1.0..1.0)), Extent::UNIT, None).unwrap()
    }

    fn max_abs_diff(a: &GridField, b: &GridField) -> f64 {
        (&a.data - &b.data).iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    #[test]
    fn zero_depth_rejected() {
        let cfg = ModelConfig { depth: 0, ..small_config(MixerKind::MambaBidirectional) };
        assert!(OperatorModel::<f64>::new(cfg, 0).is_err());
    }

    #[test]
    fn zero_lift_weights_give_zero_field() {
        let mut m = OperatorModel::<f64>::new(small_config(MixerKind::MambaBidirectional), 1).unwrap();
        for &(w, b) in &m.lift.layers {
            m.params.get_mut(w).fill(0.0);
            m.params.get_mut(b).fill(0.0);
        }
        let a = random_field(2, 4, 4, 2);
        let v = m.lift(&a, &GridField::unit_coordinates(4, 4)).unwrap();
        assert!(v.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn lift_is_pointwise() {
        let m = OperatorModel::<f64>::new(small_config(MixerKind::MambaBidirectional), 3).unwrap();
        let mut a = random_field(4, 4, 4, 2);
        let coords = GridField::zeros(4, 4, 2);
        for k in 0..2 {
            a.data[[3, 1, k]] = a.data[[0, 2, k]];
        }
        let v = m.lift(&a, &coords).unwrap();
        for k in 0..6 {
            assert_eq!(v.data[[3, 1, k]], v.data[[0, 2, k]]);
        }
    }

    #[test]
    fn single_cell_lift_matches_direct_mlp() {
        let m = OperatorModel::<f64>::new(small_config(MixerKind::SoftmaxAttention), 5).unwrap();
        let a = random_field(6, 1, 1, 2);
        let coords = GridField::new(Array3::from_elem((1, 1, 2), 0.25), Extent::UNIT, None).unwrap();
        let v = m.lift(&a, &coords).unwrap();
        let x = ndarray::arr1(&[a.data[[0, 0, 0]], a.data[[0, 0, 1]], 0.25, 0.25]);
        let (w0, b0) = m.lift.layers[0];
        let (w1, b1) = m.lift.layers[1];
        let gelu = |z: f64| 0.5 * z * (1.0 + (GELU_SQRT_2_OVER_PI * (z + 0.044715 * z * z * z)).tanh());
        let hidden = (x.dot(m.params.get(w0)) + m.params.get(b0).row(0)).mapv(gelu);
        let out = hidden.dot(m.params.get(w1)) + m.params.get(b1).row(0);
        for k in 0..6 {
            assert!((v.data[[0, 0, k]] - out[k]).abs() <= 1e-12);
        }
    }

    const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

    #[test]
    fn identity_layer_is_identity() {
        let cfg = ModelConfig {
            in_channels: 4,
            out_channels: 4,
            d_v: 4,
            depth: 1,
            coord_dim: 0,
            lift_hidden: 0,
            proj_hidden: 0,
            d_state: 2,
            ..ModelConfig::default()
        };
        let mut m = OperatorModel::<f64>::new(cfg, 7).unwrap();
        m.pin_identity().unwrap();
        let v = random_field(8, 3, 5, 4);
        assert_eq!(m.operator_layer_apply(0, &v, None).unwrap(), v);
        assert_eq!(m.forward(&v).unwrap(), v);
    }

    #[test]
    fn layer_matches_hand_composition_on_2x2() {
        let cfg = ModelConfig { residual: false, ..small_config(MixerKind::MambaBidirectional) };
        let m = OperatorModel::<f64>::new(cfg, 9).unwrap();
        let v = random_field(10, 2, 2, 6);
        let got = m.operator_layer_apply(0, &v, None).unwrap();

        let layout = ScanLayout::bidirectional(2, 2);
        let seqs = scan_expand(&v, &layout).unwrap();
        let MixerParams::Mamba(blocks) = &m.layers[0].mixer else { unreachable!() };
        let processed: Vec<Array2<f64>> =
            seqs.iter().zip(blocks).map(|(s, b)| b.apply(&m.params, s).unwrap()).collect();
        let mixed = scan_merge(&processed, &layout).unwrap().to_tokens();
        let local = v.to_tokens().dot(m.params.get(m.layers[0].w_local)) + m.params.get(m.layers[0].b_local);
        let gelu = |z: f64| 0.5 * z * (1.0 + (GELU_SQRT_2_OVER_PI * (z + 0.044715 * z * z * z)).tanh());
        let expect = GridField::from_tokens((local + mixed).mapv(gelu), 2, 2, Extent::UNIT).unwrap();
        assert!(max_abs_diff(&got, &expect) <= 1e-12);
    }

    #[test]
    fn single_layer_forward_is_composition() {
        let cfg = ModelConfig { depth: 1, ..small_config(MixerKind::GalerkinAttention) };
        let m = OperatorModel::<f64>::new(cfg, 11).unwrap();
        let a = random_field(12, 3, 4, 2);
        let v0 = m.lift(&a, &GridField::unit_coordinates(3, 4)).unwrap();
        let v1 = m.operator_layer_apply(0, &v0, None).unwrap();
        let mut tape = Tape::new();
        let pv = tape.bind_params(&m.params);
        let x = tape.constant(v1.to_tokens());
        let u = m.proj.forward(&mut tape, &pv, x);
        let expect = to_field(tape.value(u), 3, 4, Extent::UNIT).unwrap();
        assert!(max_abs_diff(&m.forward(&a).unwrap(), &expect) <= 1e-12);
    }

    #[test]
    fn every_mixer_kind_shares_shapes_and_scales_with_resolution() {
        for kind in MixerKind::ALL {
            let m = OperatorModel::<f64>::new(small_config(kind), 13).unwrap();
            for n in [4, 8] {
                let out = m.forward(&random_field(14, n, n, 2)).unwrap();
                assert_eq!(out.data.dim(), (n, n, 1), "{kind:?}");
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let a = random_field(15, 5, 5, 2);
        let m1 = OperatorModel::<f32>::new(small_config(MixerKind::CrossMambaBidirectional), 16).unwrap();
        let m2 = OperatorModel::<f32>::new(small_config(MixerKind::CrossMambaBidirectional), 16).unwrap();
        assert_eq!(m1.forward(&a).unwrap(), m2.forward(&a).unwrap());
    }

    #[test]
    fn taps_count_and_depths() {
        let m = OperatorModel::<f64>::new(small_config(MixerKind::SoftmaxAttention), 17).unwrap();
        let (_, taps) = m.forward_with_taps(&random_field(18, 4, 4, 2)).unwrap();
        assert_eq!(taps.len(), 4);
        assert_eq!(taps.iter().map(|t| t.depth).collect::<Vec<_>>(), vec![0.25, 0.5, 0.75, 1.0]);
        assert_eq!(taps[0].kind, TapKind::Operator);
        assert_eq!(taps[3].kind, TapKind::Mlp);
    }

    #[test]
    fn wrong_channel_count_rejected() {
        let m = OperatorModel::<f64>::new(small_config(MixerKind::MambaBidirectional), 19).unwrap();
        assert!(m.forward(&random_field(20, 4, 4, 3)).is_err());
        assert!(m.lift(&random_field(20, 4, 4, 2), &GridField::unit_coordinates(4, 5)).is_err());
    }

    fn window_model(rollout: Rollout, out_frames: usize) -> OperatorModel<f64> {
        let cfg = ModelConfig {
            in_channels: 3,
            out_channels: out_frames,
            d_v: 4,
            depth: 1,
            input_window: 3,
            rollout,
            coord_dim: 0,
            lift_hidden: 0,
            proj_hidden: 0,
            d_state: 2,
            ..ModelConfig::default()
        };
        OperatorModel::new(cfg, 21).unwrap()
    }

    #[test]
    fn one_shot_emits_all_frames() {
        let m = window_model(Rollout::OneShot, 5);
        let hist: Vec<GridField> = (0..3).map(|t| random_field(t, 4, 4, 1)).collect();
        let out = m.rollout(&hist, 5).unwrap();
        assert_eq!(out.len(), 5);
        assert!(out.iter().all(|f| f.channels() == 1));
        assert!(m.rollout(&hist[..2], 5).is_err());
    }

    #[test]
    fn autoregressive_identity_on_last_frame_is_constant() {
        let mut m = window_model(Rollout::SingleStepAutoregressive, 1);
        let (lw, lb) = m.lift.layers[0];
        let mut w = Array2::zeros((3, 4));
        w[[2, 0]] = 1.0;
        *m.params.get_mut(lw) = w;
        m.params.get_mut(lb).fill(0.0);
        let mut p = Array2::zeros((4, 1));
        p[[0, 0]] = 1.0;
        *m.params.get_mut(m.proj.layers[0].0) = p;
        m.params.get_mut(m.proj.layers[0].1).fill(0.0);
        let layer = &mut m.layers[0];
        *m.params.get_mut(layer.w_local) = Array2::eye(4);
        layer.activation = Unary::Identity;
        layer.uses_residual = false;
        let MixerParams::Mamba(blocks) = &layer.mixer else { unreachable!() };
        for b in blocks.clone() {
            m.params.get_mut(b.w_out).fill(0.0);
        }
        let hist: Vec<GridField> = (0..3).map(|t| random_field(30 + t, 4, 4, 1)).collect();
        let out = m.rollout(&hist, 4).unwrap();
        assert!(out.iter().all(|f| *f == hist[2]));
    }

    #[test]
    fn autoregressive_matches_manual_loop() {
        let m = window_model(Rollout::SingleStepAutoregressive, 1);
        let hist: Vec<GridField> = (0..3).map(|t| random_field(40 + t, 4, 4, 1)).collect();
        let out = m.rollout(&hist, 3).unwrap();
        let mut window = hist.clone();
        for expect in &out {
            let next = m.forward(&stack_frames(&window).unwrap()).unwrap();
            assert_eq!(&next, expect);
            window.remove(0);
            window.push(next);
        }
    }

    #[test]
    fn stack_split_round_trip() {
        let frames: Vec<GridField> = (0..4).map(|t| random_field(50 + t, 3, 3, 2)).collect();
        let stacked = stack_frames(&frames).unwrap();
        assert_eq!(stacked.channels(), 8);
        assert_eq!(split_frames(&stacked, 2).unwrap(), frames);
    }

    #[test]
    fn normaliser_round_trips_statistics() {
        let f = random_field(60, 4, 4, 2);
        let t = random_field(62, 4, 4, 1);
        let n = Normalizer::fit(&[&f], &[&t]).unwrap();
        let cfg = ModelConfig { normalization: Some(n.clone()), ..small_config(MixerKind::MambaBidirectional) };
        let m = OperatorModel::<f64>::new(cfg, 61).unwrap();
        let tok = m.input_tokens(&f).unwrap();
        for k in 0..2 {
            let col = tok.column(k);
            assert!(col.mean().unwrap().abs() < 1e-12);
            assert!((col.mapv(|v| v * v).mean().unwrap() - 1.0).abs() < 1e-12);
        }
    }
}
