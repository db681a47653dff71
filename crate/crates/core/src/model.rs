//! Static node classifier, temporal forecaster, and a plain graph
//! convolution baseline, plus their JSON checkpoint format.

use std::collections::BTreeMap;
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::adr::{self, AdrLayerParams, Ctx, DiffusionScheme, LayerConfig, LayerStages, Terms};
use crate::cg::CgSettings;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::{Linear, ParamGroup, ParamStore};
use crate::rng::rng_from_seed;
use crate::tape::{Tape, Var};
use crate::tensor::Matrix;

pub const DEFAULT_FREQUENCIES: usize = 10;

fn default_terms() -> Terms {
    Terms::ALL
}

fn validate_common(layers: usize, h: f64, dropout: f64, hidden: usize, allow_unstable: bool) -> Result<()> {
    if layers < 1 {
        return Err(Error::invalid("model needs at least one layer"));
    }
    if hidden < 1 {
        return Err(Error::invalid("hidden width must be positive"));
    }
    if !(h > 0.0 && h <= 1.0) && !(allow_unstable && h > 0.0 && h.is_finite()) {
        return Err(Error::invalid(format!("step size h = {h} must lie in (0, 1]")));
    }
    if !(0.0..1.0).contains(&dropout) {
        return Err(Error::invalid(format!("dropout {dropout} outside [0, 1)")));
    }
    Ok(())
}

fn validate_dropout(p: Option<f64>) -> Result<()> {
    match p {
        Some(p) if !(0.0..1.0).contains(&p) => Err(Error::invalid(format!("hidden dropout {p} outside [0, 1)"))),
        _ => Ok(()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaticConfig {
    pub in_channels: usize,
    pub hidden: usize,
    pub out_channels: usize,
    pub layers: usize,
    pub h: f64,
    pub dropout: f64,
    /// Dropout on hidden states between layers; `None` reuses `dropout`.
    #[serde(default)]
    pub hidden_dropout: Option<f64>,
    pub batch_norm: bool,
    #[serde(default)]
    pub cg: CgSettings,
    #[serde(default = "default_terms")]
    pub terms: Terms,
    #[serde(default)]
    pub scheme: DiffusionScheme,
    #[serde(default)]
    pub allow_unstable: bool,
}

impl StaticConfig {
    pub fn new(in_channels: usize, hidden: usize, out_channels: usize, layers: usize) -> Self {
        Self {
            in_channels,
            hidden,
            out_channels,
            layers,
            h: 0.5,
            dropout: 0.5,
            hidden_dropout: None,
            batch_norm: false,
            cg: CgSettings::default(),
            terms: Terms::ALL,
            scheme: DiffusionScheme::Implicit,
            allow_unstable: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_common(self.layers, self.h, self.dropout, self.hidden, self.allow_unstable)?;
        validate_dropout(self.hidden_dropout)?;
        if self.in_channels < 1 || self.out_channels < 1 {
            return Err(Error::invalid("input and output widths must be positive"));
        }
        Ok(())
    }

    fn layer_config(&self) -> LayerConfig {
        LayerConfig { h: self.h, cg: self.cg, terms: self.terms, scheme: self.scheme }
    }

    /// `c_in c + c` (embedding) + `L (9c² + 8c [+ 2c])` (layers, batch norm
    /// adds scale and shift) + `c c_out + c_out` (head).
    pub fn param_count(&self) -> usize {
        let (ci, c, co) = (self.in_channels, self.hidden, self.out_channels);
        ci * c + c + self.layers * layer_param_count(c, self.batch_norm) + c * co + co
    }
}

/// Advection `4c² + 2c`, diffusion `c`, reaction `3c² + 3c` (+`2c`).
fn layer_param_count(c: usize, batch_norm: bool) -> usize {
    let bn = if batch_norm { 2 * c } else { 0 };
    4 * c * c + 2 * c + c + 3 * c * c + 3 * c + bn
}

/// Hidden features after the embedding and after each layer, plus the
/// intermediate stages of every layer.
#[derive(Clone, Debug)]
pub struct StaticOutput {
    pub logits: Var,
    pub hidden: Vec<Var>,
    pub stages: Vec<LayerStages>,
}

#[derive(Clone, Debug)]
pub struct AdrGnnStatic {
    pub config: StaticConfig,
    pub store: ParamStore,
    embed: Linear,
    layers: Vec<AdrLayerParams>,
    head: Linear,
}

impl AdrGnnStatic {
    pub fn new(config: StaticConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let mut store = ParamStore::new();
        let c = config.hidden;
        let embed = Linear::new(&mut store, "embed", ParamGroup::Embedding, config.in_channels, c, true, &mut rng);
        let layers = (0..config.layers)
            .map(|l| AdrLayerParams::new(&mut store, &format!("layer{l}"), c, config.batch_norm, &mut rng))
            .collect();
        let head = Linear::output(&mut store, "head", ParamGroup::Embedding, c, config.out_channels, &mut rng);
        Ok(Self { config, store, embed, layers, head })
    }

    pub fn layers(&self) -> &[AdrLayerParams] {
        &self.layers
    }

    pub fn forward<'g>(&self, tape: &mut Tape<'g>, graph: &'g Graph, x: &Matrix, ctx: &mut Ctx<'_>) -> Result<StaticOutput> {
        self.forward_with(&self.store, tape, graph, x, ctx)
    }

    /// Forward pass reading parameter values from `store`, which must share
    /// this model's layout.
    pub fn forward_with<'g>(
        &self,
        store: &ParamStore,
        tape: &mut Tape<'g>,
        graph: &'g Graph,
        x: &Matrix,
        ctx: &mut Ctx<'_>,
    ) -> Result<StaticOutput> {
        if x.shape() != (graph.n_nodes(), self.config.in_channels) {
            return Err(Error::shape(
                "forward_static",
                format!("features {:?}, expected ({}, {})", x.shape(), graph.n_nodes(), self.config.in_channels),
            ));
        }
        let p = self.config.dropout;
        let ph = self.config.hidden_dropout.unwrap_or(p);
        let cfg = self.config.layer_config();
        let x = tape.constant(x.clone());
        let x = tape.dropout(x, p, ctx.train, ctx.rng)?;
        let u0 = self.embed.forward(tape, store, x)?;
        let mut u = u0;
        let mut hidden = vec![u0];
        let mut stages = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let ud = tape.dropout(u, ph, ctx.train, ctx.rng)?;
            let st = adr::adr_layer(tape, store, graph, ud, u0, ud, layer, &cfg, ctx)?;
            u = st.output;
            hidden.push(u);
            stages.push(st);
        }
        let u = tape.dropout(u, p, ctx.train, ctx.rng)?;
        let logits = self.head.forward(tape, store, u)?;
        Ok(StaticOutput { logits, hidden, stages })
    }

    /// Evaluation-mode logits.
    pub fn predict(&self, graph: &Graph, x: &Matrix) -> Result<Matrix> {
        let mut rng = rng_from_seed(0);
        let mut ctx = Ctx::eval(&mut rng);
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, graph, x, &mut ctx)?;
        Ok(tape.value(out.logits).clone())
    }
}

// ----------------------------------------------------------------- temporal

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalConfig {
    pub in_channels: usize,
    pub hidden: usize,
    pub out_channels: usize,
    pub tau_in: usize,
    pub tau_out: usize,
    pub layers: usize,
    pub h: f64,
    pub dropout: f64,
    #[serde(default)]
    pub hidden_dropout: Option<f64>,
    pub batch_norm: bool,
    pub n_frequencies: usize,
    #[serde(default)]
    pub cg: CgSettings,
    #[serde(default = "default_terms")]
    pub terms: Terms,
    #[serde(default)]
    pub scheme: DiffusionScheme,
    #[serde(default)]
    pub allow_unstable: bool,
}

impl TemporalConfig {
    pub fn new(in_channels: usize, hidden: usize, tau_in: usize, tau_out: usize, layers: usize) -> Self {
        Self {
            in_channels,
            hidden,
            out_channels: 1,
            tau_in,
            tau_out,
            layers,
            h: 0.5,
            dropout: 0.0,
            hidden_dropout: None,
            batch_norm: false,
            n_frequencies: DEFAULT_FREQUENCIES,
            cg: CgSettings::default(),
            terms: Terms::ALL,
            scheme: DiffusionScheme::Implicit,
            allow_unstable: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_common(self.layers, self.h, self.dropout, self.hidden, self.allow_unstable)?;
        validate_dropout(self.hidden_dropout)?;
        if self.tau_in < 1 || self.tau_out < 1 {
            return Err(Error::invalid("window lengths must be at least one frame"));
        }
        if self.in_channels < 1 || self.out_channels < 1 || self.n_frequencies < 1 {
            return Err(Error::invalid("channel counts and frequencies must be positive"));
        }
        Ok(())
    }

    /// Time-embedding width per frame.
    pub fn time_channels(&self) -> usize {
        2 * self.n_frequencies
    }

    fn layer_config(&self) -> LayerConfig {
        LayerConfig { h: self.h, cg: self.cg, terms: self.terms, scheme: self.scheme }
    }

    /// Time projection `τ_in c_t c + c`, state and history embeddings, per
    /// layer ADR terms plus the `3c → c` history update, and the
    /// `c → τ_out c_out` head.
    pub fn param_count(&self) -> usize {
        let c = self.hidden;
        let ci = self.in_channels;
        let time = self.tau_in * self.time_channels() * c + c;
        let state = (ci + c) * c + c;
        let hist = (self.tau_in * ci + c) * c + c;
        let per_layer = layer_param_count(c, self.batch_norm) + 3 * c * c + c;
        let out = self.tau_out * self.out_channels;
        time + state + hist + self.layers * per_layer + c * out + out
    }
}

#[derive(Clone, Debug)]
pub struct TemporalOutput {
    pub predictions: Var,
    pub states: Vec<Var>,
    pub histories: Vec<Var>,
    pub stages: Vec<LayerStages>,
}

#[derive(Clone, Debug)]
pub struct AdrGnnTemporal {
    pub config: TemporalConfig,
    pub store: ParamStore,
    time_embed: Linear,
    in_state: Linear,
    in_hist: Linear,
    layers: Vec<AdrLayerParams>,
    hist_updates: Vec<Linear>,
    head: Linear,
}

impl AdrGnnTemporal {
    pub fn new(config: TemporalConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let mut store = ParamStore::new();
        let c = config.hidden;
        let g = ParamGroup::Embedding;
        let time_width = config.tau_in * config.time_channels();
        let time_embed = Linear::new(&mut store, "time_embed", g, time_width, c, true, &mut rng);
        let in_state = Linear::new(&mut store, "embed_state", g, config.in_channels + c, c, true, &mut rng);
        let in_hist = Linear::new(&mut store, "embed_hist", g, config.tau_in * config.in_channels + c, c, true, &mut rng);
        let mut layers = Vec::with_capacity(config.layers);
        let mut hist_updates = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            layers.push(AdrLayerParams::new(&mut store, &format!("layer{l}"), c, config.batch_norm, &mut rng));
            hist_updates.push(Linear::new(&mut store, &format!("layer{l}.hist"), g, 3 * c, c, true, &mut rng));
        }
        let head =
            Linear::new(&mut store, "head", g, c, config.tau_out * config.out_channels, true, &mut rng);
        Ok(Self { config, store, time_embed, in_state, in_hist, layers, hist_updates, head })
    }

    pub fn layers(&self) -> &[AdrLayerParams] {
        &self.layers
    }

    /// `x` is `n × τ_in c_in` with frames in chronological order; `t_emb` is
    /// `n × τ_in c_t`.
    pub fn forward<'g>(
        &self,
        tape: &mut Tape<'g>,
        graph: &'g Graph,
        x: &Matrix,
        t_emb: &Matrix,
        ctx: &mut Ctx<'_>,
    ) -> Result<TemporalOutput> {
        self.forward_with(&self.store, tape, graph, x, t_emb, ctx)
    }

    pub fn forward_with<'g>(
        &self,
        store: &ParamStore,
        tape: &mut Tape<'g>,
        graph: &'g Graph,
        x: &Matrix,
        t_emb: &Matrix,
        ctx: &mut Ctx<'_>,
    ) -> Result<TemporalOutput> {
        let cfg = &self.config;
        let n = graph.n_nodes();
        if x.shape() != (n, cfg.tau_in * cfg.in_channels) || t_emb.shape() != (n, cfg.tau_in * cfg.time_channels()) {
            return Err(Error::shape(
                "forward_temporal",
                format!(
                    "window {:?} and time embedding {:?}, expected ({n}, {}) and ({n}, {})",
                    x.shape(),
                    t_emb.shape(),
                    cfg.tau_in * cfg.in_channels,
                    cfg.tau_in * cfg.time_channels()
                ),
            ));
        }
        let p = cfg.dropout;
        let ph = cfg.hidden_dropout.unwrap_or(p);
        let layer_cfg = cfg.layer_config();
        let x = tape.constant(x.clone());
        let x = tape.dropout(x, p, ctx.train, ctx.rng)?;
        let t = tape.constant(t_emb.clone());
        let t = self.time_embed.forward(tape, store, t)?;
        let width = cfg.tau_in * cfg.in_channels;
        let last = tape.slice_cols(x, width - cfg.in_channels, width)?;
        let state_in = tape.concat_cols(&[last, t])?;
        let hist_in = tape.concat_cols(&[x, t])?;
        let mut state = self.in_state.forward(tape, store, state_in)?;
        let hist0 = self.in_hist.forward(tape, store, hist_in)?;
        let mut hist = hist0;
        let mut states = vec![state];
        let mut histories = vec![hist];
        let mut stages = Vec::with_capacity(self.layers.len());
        for (layer, update) in self.layers.iter().zip(&self.hist_updates) {
            let sd = tape.dropout(state, ph, ctx.train, ctx.rng)?;
            let st = adr::adr_layer(tape, store, graph, sd, hist0, hist, layer, &layer_cfg, ctx)?;
            state = st.output;
            let joined = tape.concat_cols(&[hist, state, t])?;
            hist = update.forward(tape, store, joined)?;
            states.push(state);
            histories.push(hist);
            stages.push(st);
        }
        let state = tape.dropout(state, p, ctx.train, ctx.rng)?;
        let predictions = self.head.forward(tape, store, state)?;
        Ok(TemporalOutput { predictions, states, histories, stages })
    }

    pub fn predict(&self, graph: &Graph, x: &Matrix, t_emb: &Matrix) -> Result<Matrix> {
        let mut rng = rng_from_seed(0);
        let mut ctx = Ctx::eval(&mut rng);
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, graph, x, t_emb, &mut ctx)?;
        Ok(tape.value(out.predictions).clone())
    }
}

/// Sinusoidal features of the frame times: for each frame, `sin(ω_k t)` for
/// every `k`, then `cos(ω_k t)`, with `ω_k = 10000^(-k / n_frequencies)`.
pub fn time_embedding(frame_times: &[f64], n_frequencies: usize) -> Result<Vec<f64>> {
    if n_frequencies < 1 {
        return Err(Error::invalid("time embedding needs at least one frequency"));
    }
    let omegas: Vec<f64> =
        (0..n_frequencies).map(|k| 10000f64.powf(-(k as f64) / n_frequencies as f64)).collect();
    let mut out = Vec::with_capacity(frame_times.len() * 2 * n_frequencies);
    for &t in frame_times {
        out.extend(omegas.iter().map(|w| (w * t).sin()));
        out.extend(omegas.iter().map(|w| (w * t).cos()));
    }
    Ok(out)
}

/// [`time_embedding`] broadcast to `n` identical rows.
pub fn time_embedding_matrix(frame_times: &[f64], n_frequencies: usize, n: usize) -> Result<Matrix> {
    let row = time_embedding(frame_times, n_frequencies)?;
    let width = row.len();
    let data = (0..n).flat_map(|_| row.iter().copied()).collect();
    Matrix::from_vec(n, width, data)
}

// --------------------------------------------------------------------- GCN

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcnConfig {
    pub in_channels: usize,
    pub hidden: usize,
    pub out_channels: usize,
    pub layers: usize,
    pub dropout: f64,
}

impl GcnConfig {
    pub fn validate(&self) -> Result<()> {
        validate_common(self.layers, 1.0, self.dropout, self.hidden, false)?;
        if self.in_channels < 1 || self.out_channels < 1 {
            return Err(Error::invalid("input and output widths must be positive"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let c = self.hidden;
        self.in_channels * c + c + self.layers * (c * c + c) + c * self.out_channels + self.out_channels
    }
}

#[derive(Clone, Debug)]
pub struct GcnOutput {
    pub logits: Var,
    pub hidden: Vec<Var>,
}

/// Embedding, `L` layers `ReLU(Â H W + b)` with `Â = D̃^{-1/2}(A + I)D̃^{-1/2}`,
/// then a linear classifier.
#[derive(Clone, Debug)]
pub struct GcnBaseline {
    pub config: GcnConfig,
    pub store: ParamStore,
    embed: Linear,
    convs: Vec<Linear>,
    head: Linear,
}

impl GcnBaseline {
    pub fn new(config: GcnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let mut store = ParamStore::new();
        let g = ParamGroup::Embedding;
        let c = config.hidden;
        let embed = Linear::new(&mut store, "embed", g, config.in_channels, c, true, &mut rng);
        let convs = (0..config.layers)
            .map(|l| Linear::new(&mut store, &format!("conv{l}"), g, c, c, true, &mut rng))
            .collect();
        let head = Linear::output(&mut store, "head", g, c, config.out_channels, &mut rng);
        Ok(Self { config, store, embed, convs, head })
    }

    pub fn convs(&self) -> &[Linear] {
        &self.convs
    }

    pub fn forward<'g>(&self, tape: &mut Tape<'g>, graph: &'g Graph, x: &Matrix, ctx: &mut Ctx<'_>) -> Result<GcnOutput> {
        self.forward_with(&self.store, tape, graph, x, ctx)
    }

    pub fn forward_with<'g>(
        &self,
        store: &ParamStore,
        tape: &mut Tape<'g>,
        graph: &'g Graph,
        x: &Matrix,
        ctx: &mut Ctx<'_>,
    ) -> Result<GcnOutput> {
        if x.shape() != (graph.n_nodes(), self.config.in_channels) {
            return Err(Error::shape("forward_gcn", format!("features {:?}", x.shape())));
        }
        let p = self.config.dropout;
        let x = tape.constant(x.clone());
        let x = tape.dropout(x, p, ctx.train, ctx.rng)?;
        let mut h = self.embed.forward(tape, store, x)?;
        let mut hidden = vec![h];
        for conv in &self.convs {
            let hd = tape.dropout(h, p, ctx.train, ctx.rng)?;
            h = gcn_layer(tape, store, graph, hd, conv)?;
            hidden.push(h);
        }
        let h = tape.dropout(h, p, ctx.train, ctx.rng)?;
        let logits = self.head.forward(tape, store, h)?;
        Ok(GcnOutput { logits, hidden })
    }

    pub fn predict(&self, graph: &Graph, x: &Matrix) -> Result<Matrix> {
        let mut rng = rng_from_seed(0);
        let mut ctx = Ctx::eval(&mut rng);
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, graph, x, &mut ctx)?;
        Ok(tape.value(out.logits).clone())
    }
}

/// `Â H` with self loops and symmetric normalization.
pub fn normalized_adjacency_apply<'g>(tape: &mut Tape<'g>, graph: &'g Graph, h: Var) -> Result<Var> {
    let (n, c) = tape.value(h).shape();
    if n != graph.n_nodes() {
        return Err(Error::shape("normalized_adjacency", format!("{n} rows for {} nodes", graph.n_nodes())));
    }
    let mut scale = Matrix::zeros(n, c);
    for i in 0..n {
        scale.row_mut(i).fill(1.0 / ((graph.degree(i) + 1) as f64).sqrt());
    }
    let scale = Rc::new(scale);
    let s = tape.mask(h, scale.clone())?;
    let from = tape.gather(s, graph.sources().into())?;
    let agg = tape.segment_sum(from, graph.targets().into(), n)?;
    let with_self = tape.add(agg, s)?;
    tape.mask(with_self, scale)
}

pub fn gcn_layer<'g>(tape: &mut Tape<'g>, store: &ParamStore, graph: &'g Graph, h: Var, weights: &Linear) -> Result<Var> {
    let agg = normalized_adjacency_apply(tape, graph, h)?;
    let z = weights.forward(tape, store, agg)?;
    Ok(tape.relu(z))
}

// -------------------------------------------------------------- checkpoint

const CHECKPOINT_FORMAT: &str = "adrgnn-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", content = "config", rename_all = "lowercase")]
pub enum ModelConfig {
    Static(StaticConfig),
    Temporal(TemporalConfig),
    Gcn(GcnConfig),
}

#[derive(Clone, Debug)]
pub enum Model {
    Static(AdrGnnStatic),
    Temporal(AdrGnnTemporal),
    Gcn(GcnBaseline),
}

const BINARY_MAGIC: &[u8; 8] = b"ADRGNNCK";

#[derive(Serialize, Deserialize)]
struct BinaryEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct BinaryHeader {
    #[serde(flatten)]
    model: ModelConfig,
    params: Vec<BinaryEntry>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    model: ModelConfig,
    params: BTreeMap<String, Matrix>,
}

impl Model {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        Ok(match config {
            ModelConfig::Static(c) => Model::Static(AdrGnnStatic::new(c, seed)?),
            ModelConfig::Temporal(c) => Model::Temporal(AdrGnnTemporal::new(c, seed)?),
            ModelConfig::Gcn(c) => Model::Gcn(GcnBaseline::new(c, seed)?),
        })
    }

    pub fn config(&self) -> ModelConfig {
        match self {
            Model::Static(m) => ModelConfig::Static(m.config.clone()),
            Model::Temporal(m) => ModelConfig::Temporal(m.config.clone()),
            Model::Gcn(m) => ModelConfig::Gcn(m.config.clone()),
        }
    }

    pub fn store(&self) -> &ParamStore {
        match self {
            Model::Static(m) => &m.store,
            Model::Temporal(m) => &m.store,
            Model::Gcn(m) => &m.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::Static(m) => &mut m.store,
            Model::Temporal(m) => &mut m.store,
            Model::Gcn(m) => &mut m.store,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: self.config(),
            params: self.store().to_named(),
        };
        serde_json::to_string(&file).map_err(|e| Error::format("checkpoint", e.to_string()))
    }

    /// Rebuilds the model from its stored configuration and loads every
    /// parameter, rejecting missing, extra, or mis-shaped arrays.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile =
            serde_json::from_str(text).map_err(|e| Error::format("checkpoint", e.to_string()))?;
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
            return Err(Error::format(
                "checkpoint",
                format!("unsupported checkpoint {} v{}", file.format, file.version),
            ));
        }
        let mut model = Model::build(file.model, 0)?;
        model.store_mut().load_named(&file.params)?;
        Ok(model)
    }

    /// Binary container: the magic bytes, a little-endian `u32` version and
    /// `u64` header length, a JSON header with the configuration and the
    /// `(name, rows, cols, offset)` of every array, then the arrays as
    /// little-endian `f64`.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut data = Vec::new();
        for (name, m) in self.store().to_named() {
            entries.push(BinaryEntry { name, rows: m.rows(), cols: m.cols(), offset: data.len() as u64 });
            for v in m.as_slice() {
                data.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = BinaryHeader { model: self.config(), params: entries };
        let header = serde_json::to_vec(&header).map_err(|e| Error::format("checkpoint", e.to_string()))?;
        let mut out = Vec::with_capacity(BINARY_MAGIC.len() + 12 + header.len() + data.len());
        out.extend_from_slice(BINARY_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |msg: String| Error::format("checkpoint", msg);
        let m = BINARY_MAGIC.len();
        if bytes.len() < m + 12 || &bytes[..m] != BINARY_MAGIC {
            return Err(fail("not a binary checkpoint".into()));
        }
        let version = u32::from_le_bytes(bytes[m..m + 4].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(fail(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[m + 4..m + 12].try_into().expect("8 bytes")) as usize;
        let start = m + 12;
        let body = start.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| fail("truncated header".into()))?;
        let header: BinaryHeader =
            serde_json::from_slice(&bytes[start..body]).map_err(|e| fail(format!("header: {e}")))?;
        let data = &bytes[body..];
        let mut params = BTreeMap::new();
        for e in header.params {
            let len = e.rows.checked_mul(e.cols).and_then(|n| n.checked_mul(8)).ok_or_else(|| fail("bad shape".into()))?;
            let lo = e.offset as usize;
            let chunk = lo
                .checked_add(len)
                .filter(|&hi| hi <= data.len())
                .map(|hi| &data[lo..hi])
                .ok_or_else(|| fail(format!("array {} runs past the end of the file", e.name)))?;
            let values = chunk.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
            params.insert(e.name, Matrix::from_vec(e.rows, e.cols, values)?);
        }
        let mut model = Model::build(header.model, 0)?;
        model.store_mut().load_named(&params)?;
        Ok(model)
    }

    /// Writes JSON when the extension is `.json`, the binary container
    /// otherwise.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = if path.extension().is_some_and(|e| e == "json") {
            self.to_json()?.into_bytes()
        } else {
            self.to_bytes()?
        };
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Reads either container, detected from the leading bytes.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let loaded = if bytes.starts_with(BINARY_MAGIC) {
            Self::from_bytes(&bytes)
        } else {
            std::str::from_utf8(&bytes)
                .map_err(|_| Error::format("checkpoint", "neither binary nor UTF-8 JSON"))
                .and_then(Self::from_json)
        };
        loaded.map_err(|e| match e {
            Error::Format { msg, .. } => Error::format(path.display().to_string(), msg),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_embedding_at_zero() {
        let e = time_embedding(&[0.0], 10).unwrap();
        assert_eq!(e.len(), 20);
        assert!(e[..10].iter().all(|&s| s == 0.0));
        assert!(e[10..].iter().all(|&c| c == 1.0));
    }

    #[test]
    fn time_embedding_range() {
        let e = time_embedding(&[3.0, 17.5, 1e4], 10).unwrap();
        assert_eq!(e.len(), 60);
        assert!(e.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(time_embedding(&[1.0], 0).is_err());
    }

    #[test]
    fn configs_validate() {
        let mut c = StaticConfig::new(3, 4, 2, 2);
        assert!(c.validate().is_ok());
        c.h = 1.5;
        assert!(c.validate().is_err());
        c.allow_unstable = true;
        assert!(c.validate().is_ok());
        c.layers = 0;
        assert!(c.validate().is_err());
        let mut t = TemporalConfig::new(1, 4, 4, 1, 2);
        assert_eq!(t.time_channels(), 20);
        t.tau_out = 0;
        assert!(t.validate().is_err());
    }

    #[test]
    fn param_counts_match_stores() {
        for bn in [false, true] {
            let mut c = StaticConfig::new(7, 5, 3, 3);
            c.batch_norm = bn;
            assert_eq!(AdrGnnStatic::new(c.clone(), 1).unwrap().store.count(), c.param_count());
            let mut t = TemporalConfig::new(2, 6, 4, 3, 2);
            t.batch_norm = bn;
            assert_eq!(AdrGnnTemporal::new(t.clone(), 1).unwrap().store.count(), t.param_count());
        }
        let g = GcnConfig { in_channels: 9, hidden: 4, out_channels: 2, layers: 3, dropout: 0.0 };
        assert_eq!(GcnBaseline::new(g.clone(), 1).unwrap().store.count(), g.param_count());
    }

    #[test]
    fn gcn_isolated_node_is_relu() {
        let g = Graph::build(&[], 1, true).unwrap();
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(0);
        let lin = Linear::new(&mut store, "w", ParamGroup::Embedding, 3, 3, true, &mut rng);
        *store.value_mut(lin.weight) = Matrix::identity(3);
        let mut t = Tape::new();
        let x = t.constant(Matrix::row_vector(&[0.5, -1.0, 2.0]));
        let y = gcn_layer(&mut t, &store, &g, x, &lin).unwrap();
        assert_eq!(t.value(y), &Matrix::row_vector(&[0.5, 0.0, 2.0]));
    }
}
