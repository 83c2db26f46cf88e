//! Assembles the configurable architecture variants into one
//! forward/backward/predict interface over context windows.
//!
//! Variant ladder: a plain ReLU DNN baseline, single- or two-layer BLSTM,
//! DNN-BLSTM, BLSTM-DNN, DNN-BLSTM-DNN, and the time-convolved
//! TC-DNN-BLSTM-DNN. All recurrent variants end in the concatenated
//! terminal-state context feeding the classifier head.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::layers::{
    affine_backward, affine_forward, blstm_context, blstm_context_backward, blstm_sequence,
    blstm_sequence_backward, tc_window_batch, Activation, AffineCache, AffineLayer, BlstmCache,
    LstmParams, TimeConvSpec,
};
use crate::tensor::{argmax_rows, cross_entropy, softmax_rows, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Dnn,
    Blstm,
    DnnBlstm,
    BlstmDnn,
    DnnBlstmDnn,
    TcDnnBlstmDnn,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Dnn,
        Variant::Blstm,
        Variant::DnnBlstm,
        Variant::BlstmDnn,
        Variant::DnnBlstmDnn,
        Variant::TcDnnBlstmDnn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Dnn => "dnn",
            Variant::Blstm => "blstm",
            Variant::DnnBlstm => "dnn_blstm",
            Variant::BlstmDnn => "blstm_dnn",
            Variant::DnnBlstmDnn => "dnn_blstm_dnn",
            Variant::TcDnnBlstmDnn => "tc_dnn_blstm_dnn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                Err::<Self, _>(Error::Config(format!(
                    "unknown variant '{s}' (expected one of: {})",
                    Variant::ALL.map(|v| v.as_str()).join(", ")
                )))
                .unwrap_err()
            })
    }

    pub fn tag(self) -> u8 {
        match self {
            Variant::Dnn => 0,
            Variant::Blstm => 1,
            Variant::DnnBlstm => 2,
            Variant::BlstmDnn => 3,
            Variant::DnnBlstmDnn => 4,
            Variant::TcDnnBlstmDnn => 5,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.tag() == tag)
            .ok_or_else(|| Error::Format(format!("unknown variant tag {tag}")))
    }

    pub fn is_recurrent(self) -> bool {
        !matches!(self, Variant::Dnn)
    }

    pub fn has_input_dnn(self) -> bool {
        matches!(
            self,
            Variant::Dnn | Variant::DnnBlstm | Variant::DnnBlstmDnn | Variant::TcDnnBlstmDnn
        )
    }

    pub fn has_output_dnn(self) -> bool {
        matches!(
            self,
            Variant::BlstmDnn | Variant::DnnBlstmDnn | Variant::TcDnnBlstmDnn
        )
    }

    pub fn uses_tc(self) -> bool {
        matches!(self, Variant::TcDnnBlstmDnn)
    }
}

/// Declarative description of one architecture variant.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub feat_dim: usize,
    pub tc: TimeConvSpec,
    pub input_dnn_layers: Vec<usize>,
    pub cell_dim: usize,
    pub blstm_layers: usize,
    pub output_dnn_layers: Vec<usize>,
    pub num_classes: usize,
    pub seed: u64,
    /// half-width of the uniform LSTM weight initialization
    pub lstm_init_range: f64,
    /// standard deviation of the Gaussian DNN weight initialization
    pub dnn_init_std: f64,
}

pub const DEFAULT_LSTM_INIT_RANGE: f64 = 0.01;
pub const DEFAULT_DNN_INIT_STD: f64 = 0.001;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.tc.validate()?;
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.feat_dim == 0 {
            return Err(Error::Config("feat_dim must be positive".to_string()));
        }
        if self.input_dnn_layers.iter().any(|&w| w == 0)
            || self.output_dnn_layers.iter().any(|&w| w == 0)
        {
            return Err(Error::Config("dnn layer widths must be positive".to_string()));
        }
        let v = self.variant;
        if v.has_input_dnn() && self.input_dnn_layers.is_empty() {
            return Err(Error::Config(format!(
                "variant {} requires nonempty input_dnn_layers",
                v.as_str()
            )));
        }
        if !v.has_input_dnn() && !self.input_dnn_layers.is_empty() {
            return Err(Error::Config(format!(
                "variant {} requires empty input_dnn_layers",
                v.as_str()
            )));
        }
        if v.has_output_dnn() && self.output_dnn_layers.is_empty() {
            return Err(Error::Config(format!(
                "variant {} requires nonempty output_dnn_layers",
                v.as_str()
            )));
        }
        if !v.has_output_dnn() && !self.output_dnn_layers.is_empty() {
            return Err(Error::Config(format!(
                "variant {} requires empty output_dnn_layers",
                v.as_str()
            )));
        }
        if v.is_recurrent() {
            if self.cell_dim == 0 {
                return Err(Error::Config("cell_dim must be positive".to_string()));
            }
            if !(1..=2).contains(&self.blstm_layers) {
                return Err(Error::Config(format!(
                    "blstm_layers must be 1 or 2, got {}",
                    self.blstm_layers
                )));
            }
        }
        if !(self.lstm_init_range > 0.0) || !(self.dnn_init_std > 0.0) {
            return Err(Error::Config(
                "initialization scales must be positive".to_string(),
            ));
        }
        Ok(())
    }

    /// Flattened width of one context window.
    pub fn window_width(&self) -> usize {
        self.tc.context_frames * self.feat_dim
    }

    /// Recurrent timestep count: TC variants slide sub-windows, everything
    /// else consumes the window frame by frame.
    pub fn timesteps(&self) -> usize {
        if self.variant.uses_tc() {
            self.tc.timesteps()
        } else {
            self.tc.context_frames
        }
    }

    /// Width of one recurrent step input before the input DNN.
    pub fn step_input_width(&self) -> usize {
        if self.variant.uses_tc() {
            self.tc.tc_width * self.feat_dim
        } else {
            self.feat_dim
        }
    }

    /// Tiny fixture used by the gradient-check suite. Initialization scales
    /// are enlarged so pre-activations sit far from the ReLU kink relative
    /// to the finite-difference step.
    pub fn tiny_for_checks(variant: Variant) -> Self {
        let dnn = vec![4usize];
        Self {
            variant,
            feat_dim: 3,
            tc: TimeConvSpec::new(7, 3, true).expect("static spec"),
            input_dnn_layers: if variant.has_input_dnn() { dnn.clone() } else { vec![] },
            cell_dim: 4,
            blstm_layers: 1,
            output_dnn_layers: if variant.has_output_dnn() { dnn } else { vec![] },
            num_classes: 3,
            seed: 48,
            lstm_init_range: 0.4,
            dnn_init_std: 0.3,
        }
    }
}

/// One named trainable block.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamBlock<F = f32> {
    Affine(AffineLayer<F>),
    Lstm(LstmParams<F>),
}

impl<F: Scalar> ParamBlock<F> {
    pub fn param_count(&self) -> usize {
        match self {
            ParamBlock::Affine(a) => a.param_count(),
            ParamBlock::Lstm(l) => l.param_count(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            ParamBlock::Affine(a) => {
                ParamBlock::Affine(AffineLayer::zeros(a.in_dim(), a.out_dim(), a.activation))
            }
            ParamBlock::Lstm(l) => ParamBlock::Lstm(l.zeros_like()),
        }
    }

    pub fn to_precision<G: Scalar>(&self) -> ParamBlock<G> {
        match self {
            ParamBlock::Affine(a) => ParamBlock::Affine(a.to_precision()),
            ParamBlock::Lstm(l) => ParamBlock::Lstm(l.to_precision()),
        }
    }
}

/// Ordered, named collection of parameter blocks. Also used as the carrier
/// for gradients, which share the same block structure.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams<F = f32> {
    blocks: Vec<(String, ParamBlock<F>)>,
}

impl<F: Scalar> ModelParams<F> {
    pub fn new() -> Self {
        Self { blocks: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, block: ParamBlock<F>) -> Result<()> {
        let name = name.into();
        if self.blocks.iter().any(|(n, _)| *n == name) {
            return Err(Error::Config(format!("duplicate parameter block '{name}'")));
        }
        self.blocks.push((name, block));
        Ok(())
    }

    pub fn blocks(&self) -> &[(String, ParamBlock<F>)] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [(String, ParamBlock<F>)] {
        &mut self.blocks
    }

    pub fn get(&self, name: &str) -> Result<&ParamBlock<F>> {
        self.blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b)
            .ok_or_else(|| Error::Shape(format!("no parameter block named '{name}'")))
    }

    pub fn affine(&self, name: &str) -> Result<&AffineLayer<F>> {
        match self.get(name)? {
            ParamBlock::Affine(a) => Ok(a),
            ParamBlock::Lstm(_) => Err(Error::Shape(format!(
                "block '{name}' is an lstm, expected affine"
            ))),
        }
    }

    pub fn lstm(&self, name: &str) -> Result<&LstmParams<F>> {
        match self.get(name)? {
            ParamBlock::Lstm(l) => Ok(l),
            ParamBlock::Affine(_) => Err(Error::Shape(format!(
                "block '{name}' is affine, expected lstm"
            ))),
        }
    }

    pub fn total_parameter_count(&self) -> usize {
        self.blocks.iter().map(|(_, b)| b.param_count()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            blocks: self
                .blocks
                .iter()
                .map(|(n, b)| (n.clone(), b.zeros_like()))
                .collect(),
        }
    }

    pub fn to_precision<G: Scalar>(&self) -> ModelParams<G> {
        ModelParams {
            blocks: self
                .blocks
                .iter()
                .map(|(n, b)| (n.clone(), b.to_precision()))
                .collect(),
        }
    }

    /// Every weight matrix with its fully qualified name, in canonical
    /// order. This order defines the flattening and both file/wire layouts.
    pub fn named_matrices(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        for (name, block) in &self.blocks {
            match block {
                ParamBlock::Affine(a) => {
                    out.push((format!("{name}.weight"), &a.weight));
                    out.push((format!("{name}.bias"), &a.bias));
                }
                ParamBlock::Lstm(l) => {
                    for (m_name, m) in l.matrices() {
                        out.push((format!("{name}.{m_name}"), m));
                    }
                }
            }
        }
        out
    }

    pub fn named_matrices_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out = Vec::new();
        for (name, block) in &mut self.blocks {
            match block {
                ParamBlock::Affine(a) => {
                    out.push((format!("{name}.weight"), &mut a.weight));
                    out.push((format!("{name}.bias"), &mut a.bias));
                }
                ParamBlock::Lstm(l) => {
                    for (m_name, m) in l.matrices_mut() {
                        out.push((format!("{name}.{m_name}"), m));
                    }
                }
            }
        }
        out
    }

    /// Concatenation of every matrix in canonical order.
    pub fn flatten(&self) -> Vec<F> {
        let mut flat = Vec::with_capacity(self.total_parameter_count());
        for (_, m) in self.named_matrices() {
            flat.extend_from_slice(m.data());
        }
        flat
    }

    /// Rebuilds a parameter set with this collection's structure from a
    /// flat vector. Flattening then unflattening is the identity.
    pub fn unflatten(&self, flat: &[F]) -> Result<Self> {
        if flat.len() != self.total_parameter_count() {
            return Err(Error::Shape(format!(
                "unflatten expected {} values, got {}",
                self.total_parameter_count(),
                flat.len()
            )));
        }
        let mut out = self.clone();
        let mut offset = 0usize;
        for (_, m) in out.named_matrices_mut() {
            let len = m.len();
            m.data_mut().copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        Ok(out)
    }

    /// Per-matrix f64 views in flattening order, for block-wise gradient
    /// comparison.
    pub fn flat_block_views(&self) -> Vec<(String, Vec<f64>)> {
        self.named_matrices()
            .into_iter()
            .map(|(n, m)| (n, m.data().iter().map(|v| v.as_f64()).collect()))
            .collect()
    }

    /// FNV-1a over names, shapes and raw f32 bit patterns; used for
    /// bitwise-reproducibility assertions and snapshot consistency checks.
    pub fn checksum(&self) -> u64 {
        let mut hash = 0xcbf29ce484222325u64;
        let mut eat = |byte: u8| {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        };
        for (name, m) in self.named_matrices() {
            for b in name.as_bytes() {
                eat(*b);
            }
            for b in (m.rows() as u32).to_le_bytes() {
                eat(b);
            }
            for b in (m.cols() as u32).to_le_bytes() {
                eat(b);
            }
            for v in m.data() {
                for b in v.as_f32().to_bits().to_le_bytes() {
                    eat(b);
                }
            }
        }
        hash
    }

    /// Verifies the other collection has identical block names, kinds and
    /// matrix shapes; errors name the first offending block.
    pub fn check_structure(&self, other: &Self) -> Result<()> {
        let a = self.named_matrices();
        let b = other.named_matrices();
        if a.len() != b.len() {
            return Err(Error::Shape(format!(
                "parameter collections differ: {} vs {} matrices",
                a.len(),
                b.len()
            )));
        }
        for ((name_a, ma), (name_b, mb)) in a.iter().zip(b.iter()) {
            if name_a != name_b {
                return Err(Error::Shape(format!(
                    "matrix name mismatch: '{name_a}' vs '{name_b}'"
                )));
            }
            if ma.shape() != mb.shape() {
                return Err(Error::Shape(format!(
                    "matrix '{name_a}' shape mismatch: {}x{} vs {}x{}",
                    ma.rows(),
                    ma.cols(),
                    mb.rows(),
                    mb.cols()
                )));
            }
        }
        Ok(())
    }

    /// `self += scale * other`, block by block. Shape mismatches name the
    /// offending block.
    pub fn add_assign_scaled(&mut self, other: &Self, scale: F) -> Result<()> {
        if self.blocks.len() != other.blocks.len() {
            return Err(Error::Shape(format!(
                "parameter collections differ: {} vs {} blocks",
                self.blocks.len(),
                other.blocks.len()
            )));
        }
        for ((name_a, block_a), (name_b, block_b)) in
            self.blocks.iter_mut().zip(other.blocks.iter())
        {
            if name_a != name_b {
                return Err(Error::Shape(format!(
                    "parameter block order differs: '{name_a}' vs '{name_b}'"
                )));
            }
            let result = match (block_a, block_b) {
                (ParamBlock::Affine(a), ParamBlock::Affine(b)) => a
                    .weight
                    .add_assign_scaled(&b.weight, scale)
                    .and_then(|_| a.bias.add_assign_scaled(&b.bias, scale)),
                (ParamBlock::Lstm(a), ParamBlock::Lstm(b)) => {
                    let mut r = Ok(());
                    for ((_, ma), (_, mb)) in a.matrices_mut().into_iter().zip(b.matrices()) {
                        r = r.and_then(|_| ma.add_assign_scaled(mb, scale));
                        if r.is_err() {
                            break;
                        }
                    }
                    r
                }
                _ => Err(Error::Shape("block kind mismatch".to_string())),
            };
            result.map_err(|e| Error::Shape(format!("block '{name_a}': {e}")))?;
        }
        Ok(())
    }
}

fn block_names(config: &ModelConfig) -> Vec<(String, BlockSpec)> {
    enum Stage {
        InputDnn,
        Blstm,
        Head,
    }
    let mut out = Vec::new();
    let v = config.variant;
    if v == Variant::Dnn {
        let mut in_dim = config.window_width();
        for (i, &w) in config.input_dnn_layers.iter().enumerate() {
            out.push((
                format!("input_dnn.{i}"),
                BlockSpec::Affine(in_dim, w, Activation::Relu),
            ));
            in_dim = w;
        }
        out.push((
            "classifier".to_string(),
            BlockSpec::Affine(in_dim, config.num_classes, Activation::Linear),
        ));
        return out;
    }
    let mut step_width = config.step_input_width();
    for stage in [Stage::InputDnn, Stage::Blstm, Stage::Head] {
        match stage {
            Stage::InputDnn => {
                if v.has_input_dnn() {
                    if config.tc.tied_columns || !v.uses_tc() {
                        let mut in_dim = step_width;
                        for (i, &w) in config.input_dnn_layers.iter().enumerate() {
                            out.push((
                                format!("input_dnn.{i}"),
                                BlockSpec::Affine(in_dim, w, Activation::Relu),
                            ));
                            in_dim = w;
                        }
                    } else {
                        for t in 0..config.timesteps() {
                            let mut in_dim = step_width;
                            for (i, &w) in config.input_dnn_layers.iter().enumerate() {
                                out.push((
                                    format!("input_dnn.t{t}.{i}"),
                                    BlockSpec::Affine(in_dim, w, Activation::Relu),
                                ));
                                in_dim = w;
                            }
                        }
                    }
                    step_width = *config.input_dnn_layers.last().unwrap();
                }
            }
            Stage::Blstm => {
                let mut in_dim = step_width;
                for l in 0..config.blstm_layers {
                    out.push((
                        format!("blstm.{l}.fwd"),
                        BlockSpec::Lstm(in_dim, config.cell_dim),
                    ));
                    out.push((
                        format!("blstm.{l}.bwd"),
                        BlockSpec::Lstm(in_dim, config.cell_dim),
                    ));
                    in_dim = 2 * config.cell_dim;
                }
            }
            Stage::Head => {
                let mut in_dim = 2 * config.cell_dim;
                for (i, &w) in config.output_dnn_layers.iter().enumerate() {
                    out.push((
                        format!("output_dnn.{i}"),
                        BlockSpec::Affine(in_dim, w, Activation::Relu),
                    ));
                    in_dim = w;
                }
                out.push((
                    "classifier".to_string(),
                    BlockSpec::Affine(in_dim, config.num_classes, Activation::Linear),
                ));
            }
        }
    }
    out
}

enum BlockSpec {
    Affine(usize, usize, Activation),
    Lstm(usize, usize),
}

/// The parameter structure of a config with every matrix zeroed; the
/// skeleton used when loading checkpoints or receiving wire snapshots.
pub fn zeros_params<F: Scalar>(config: &ModelConfig) -> Result<ModelParams<F>> {
    config.validate()?;
    let mut params = ModelParams::new();
    for (name, spec) in block_names(config) {
        let block = match spec {
            BlockSpec::Affine(in_dim, out_dim, act) => {
                ParamBlock::Affine(AffineLayer::zeros(in_dim, out_dim, act))
            }
            BlockSpec::Lstm(in_dim, cell) => ParamBlock::Lstm(LstmParams::zeros(in_dim, cell)),
        };
        params.push(name, block)?;
    }
    Ok(params)
}

/// Draws a fresh parameter collection: LSTM matrices i.i.d. uniform on
/// [-lstm_init_range, lstm_init_range], DNN weights i.i.d. Gaussian with
/// standard deviation dnn_init_std, DNN biases zero. Deterministic given
/// the config seed; draws happen in f64 and convert to the target scalar.
pub fn init_params<F: Scalar>(config: &ModelConfig) -> Result<ModelParams<F>> {
    config.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0f64, config.dnn_init_std)
        .map_err(|e| Error::Config(format!("bad dnn_init_std: {e}")))?;
    let uniform = Uniform::new_inclusive(-config.lstm_init_range, config.lstm_init_range);

    let mut params = ModelParams::new();
    for (name, spec) in block_names(config) {
        let block = match spec {
            BlockSpec::Affine(in_dim, out_dim, act) => {
                let weight =
                    Tensor::from_fn(in_dim, out_dim, |_, _| F::from_f64(normal.sample(&mut rng)));
                ParamBlock::Affine(AffineLayer::new(weight, Tensor::zeros(1, out_dim), act)?)
            }
            BlockSpec::Lstm(in_dim, cell) => {
                let mut draw =
                    |rows: usize, cols: usize| Tensor::from_fn(rows, cols, |_, _| {
                        F::from_f64(uniform.sample(&mut rng))
                    });
                ParamBlock::Lstm(LstmParams::new(
                    draw(in_dim, cell),
                    draw(cell, cell),
                    draw(in_dim, cell),
                    draw(cell, cell),
                    draw(in_dim, cell),
                    draw(cell, cell),
                    draw(in_dim, cell),
                    draw(cell, cell),
                    F::from_f64(crate::layers::DEFAULT_CELL_CLIP),
                )?)
            }
        };
        params.push(name, block)?;
    }
    Ok(params)
}

/// Per-stage caches retained by a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<F = f32> {
    train: bool,
    /// per-timestep caches of the input DNN: [timestep][layer]
    input_dnn: Vec<Vec<AffineCache<F>>>,
    blstm: Vec<BlstmCache<F>>,
    /// output DNN plus classifier, in forward order (also carries the flat
    /// DNN stack for the non-recurrent variant)
    head: Vec<AffineCache<F>>,
    posteriors: Tensor<F>,
}

impl<F: Scalar> ForwardCache<F> {
    pub fn posteriors(&self) -> &Tensor<F> {
        &self.posteriors
    }
}

fn input_dnn_block_name(config: &ModelConfig, t: usize, layer: usize) -> String {
    if config.variant.uses_tc() && !config.tc.tied_columns {
        format!("input_dnn.t{t}.{layer}")
    } else {
        format!("input_dnn.{layer}")
    }
}

/// Runs the variant's stage pipeline over a batch of flattened context
/// windows (batch x context_frames*feat_dim) and returns per-row class
/// posteriors. With `train_mode` the cache retains what backward needs.
pub fn forward<F: Scalar>(
    params: &ModelParams<F>,
    config: &ModelConfig,
    batch: &Tensor<F>,
    train_mode: bool,
) -> Result<(Tensor<F>, ForwardCache<F>)> {
    if batch.cols() != config.window_width() {
        return Err(Error::Shape(format!(
            "expected window width {}, got {}x{}",
            config.window_width(),
            batch.rows(),
            batch.cols()
        )));
    }

    let mut cache = ForwardCache {
        train: train_mode,
        input_dnn: Vec::new(),
        blstm: Vec::new(),
        head: Vec::new(),
        posteriors: Tensor::zeros(0, 0),
    };

    let pre_logits = if config.variant == Variant::Dnn {
        let mut h = batch.clone();
        for i in 0..config.input_dnn_layers.len() {
            let layer = params.affine(&format!("input_dnn.{i}"))?;
            let (y, c) = affine_forward(layer, &h)?;
            if train_mode {
                cache.head.push(c);
            }
            h = y;
        }
        h
    } else {
        // per-timestep inputs: TC slices or raw frames
        let step_inputs: Vec<Tensor<F>> = if config.variant.uses_tc() {
            tc_window_batch(&config.tc, batch, config.feat_dim)?
        } else {
            (0..config.tc.context_frames)
                .map(|t| batch.slice_cols(t * config.feat_dim, config.feat_dim))
                .collect::<Result<_>>()?
        };

        let mut seq = step_inputs;
        if config.variant.has_input_dnn() {
            let mut transformed = Vec::with_capacity(seq.len());
            for (t, x) in seq.iter().enumerate() {
                let mut h = x.clone();
                let mut step_caches = Vec::new();
                for i in 0..config.input_dnn_layers.len() {
                    let layer = params.affine(&input_dnn_block_name(config, t, i))?;
                    let (y, c) = affine_forward(layer, &h)?;
                    if train_mode {
                        step_caches.push(c);
                    }
                    h = y;
                }
                if train_mode {
                    cache.input_dnn.push(step_caches);
                }
                transformed.push(h);
            }
            seq = transformed;
        }

        let mut context = None;
        for l in 0..config.blstm_layers {
            let fwd = params.lstm(&format!("blstm.{l}.fwd"))?;
            let bwd = params.lstm(&format!("blstm.{l}.bwd"))?;
            if l + 1 < config.blstm_layers {
                let (outputs, c) = blstm_sequence(fwd, bwd, &seq)?;
                if train_mode {
                    cache.blstm.push(c);
                }
                seq = outputs;
            } else {
                let (ctx, c) = blstm_context(fwd, bwd, &seq)?;
                if train_mode {
                    cache.blstm.push(c);
                }
                context = Some(ctx);
            }
        }
        let mut h = context.expect("recurrent variant always has a final blstm layer");
        for i in 0..config.output_dnn_layers.len() {
            let layer = params.affine(&format!("output_dnn.{i}"))?;
            let (y, c) = affine_forward(layer, &h)?;
            if train_mode {
                cache.head.push(c);
            }
            h = y;
        }
        h
    };

    let classifier = params.affine("classifier")?;
    let (logits, c) = affine_forward(classifier, &pre_logits)?;
    if train_mode {
        cache.head.push(c);
    }
    let posteriors = softmax_rows(&logits);
    cache.posteriors = posteriors.clone();
    Ok((posteriors, cache))
}

fn add_affine_grads<F: Scalar>(
    grads: &mut ModelParams<F>,
    name: &str,
    gw: Tensor<F>,
    gb: Tensor<F>,
) -> Result<()> {
    for (block_name, block) in grads.blocks_mut() {
        if block_name == name {
            if let ParamBlock::Affine(a) = block {
                a.weight.add_assign_scaled(&gw, F::one())?;
                a.bias.add_assign_scaled(&gb, F::one())?;
                return Ok(());
            }
        }
    }
    Err(Error::Shape(format!("no affine gradient block '{name}'")))
}

fn add_lstm_grads<F: Scalar>(
    grads: &mut ModelParams<F>,
    name: &str,
    g: &LstmParams<F>,
) -> Result<()> {
    for (block_name, block) in grads.blocks_mut() {
        if block_name == name {
            if let ParamBlock::Lstm(l) = block {
                for ((_, ma), (_, mb)) in l.matrices_mut().into_iter().zip(g.matrices()) {
                    ma.add_assign_scaled(mb, F::one())?;
                }
                return Ok(());
            }
        }
    }
    Err(Error::Shape(format!("no lstm gradient block '{name}'")))
}

/// Mean cross-entropy over the batch plus exact gradients for every named
/// block. Requires a cache produced with `train_mode` set.
pub fn backward<F: Scalar>(
    params: &ModelParams<F>,
    config: &ModelConfig,
    cache: &ForwardCache<F>,
    targets: &[usize],
) -> Result<(F, ModelParams<F>)> {
    if !cache.train {
        return Err(Error::Usage(
            "backward requires a cache from forward with train_mode set".to_string(),
        ));
    }
    let (loss, grad_logits) = cross_entropy(&cache.posteriors, targets)?;
    let mut grads = params.zeros_like();

    // head stack in reverse: classifier last
    let mut grad = grad_logits;
    let head_names: Vec<String> = if config.variant == Variant::Dnn {
        (0..config.input_dnn_layers.len())
            .map(|i| format!("input_dnn.{i}"))
            .chain(std::iter::once("classifier".to_string()))
            .collect()
    } else {
        (0..config.output_dnn_layers.len())
            .map(|i| format!("output_dnn.{i}"))
            .chain(std::iter::once("classifier".to_string()))
            .collect()
    };
    debug_assert_eq!(head_names.len(), cache.head.len());
    for (name, layer_cache) in head_names.iter().zip(cache.head.iter()).rev() {
        let layer = params.affine(name)?;
        let (gx, gw, gb) = affine_backward(layer, layer_cache, &grad)?;
        add_affine_grads(&mut grads, name, gw, gb)?;
        grad = gx;
    }

    if config.variant == Variant::Dnn {
        return Ok((loss, grads));
    }

    // recurrent stages in reverse: final blstm layer consumed the context
    // gradient, lower layers take per-timestep gradients
    let mut grad_seq: Vec<Tensor<F>> = Vec::new();
    for l in (0..config.blstm_layers).rev() {
        let fwd = params.lstm(&format!("blstm.{l}.fwd"))?;
        let bwd = params.lstm(&format!("blstm.{l}.bwd"))?;
        let layer_cache = &cache.blstm[l];
        let (gf, gb, gx) = if l + 1 == config.blstm_layers {
            blstm_context_backward(fwd, bwd, layer_cache, &grad)?
        } else {
            blstm_sequence_backward(fwd, bwd, layer_cache, &grad_seq)?
        };
        add_lstm_grads(&mut grads, &format!("blstm.{l}.fwd"), &gf)?;
        add_lstm_grads(&mut grads, &format!("blstm.{l}.bwd"), &gb)?;
        grad_seq = gx;
    }

    if config.variant.has_input_dnn() {
        for (t, step_caches) in cache.input_dnn.iter().enumerate() {
            let mut grad = grad_seq[t].clone();
            for (i, layer_cache) in step_caches.iter().enumerate().rev() {
                let name = input_dnn_block_name(config, t, i);
                let layer = params.affine(&name)?;
                let (gx, gw, gb) = affine_backward(layer, layer_cache, &grad)?;
                add_affine_grads(&mut grads, &name, gw, gb)?;
                grad = gx;
            }
        }
    }

    Ok((loss, grads))
}

/// Index of the max posterior per row; ties break toward the lowest index.
pub fn predict<F: Scalar>(
    params: &ModelParams<F>,
    config: &ModelConfig,
    batch: &Tensor<F>,
) -> Result<Vec<usize>> {
    let (posteriors, _) = forward(params, config, batch, false)?;
    Ok(argmax_rows(&posteriors))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig::tiny_for_checks(variant)
    }

    fn random_batch(config: &ModelConfig, rows: usize, seed: u64) -> Tensor<f32> {
        let mut state = seed;
        Tensor::from_fn(rows, config.window_width(), |_, _| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f32 / (1u64 << 31) as f32) - 1.0
        })
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        for variant in Variant::ALL {
            let config = tiny(variant);
            let a: ModelParams<f32> = init_params(&config).unwrap();
            let b: ModelParams<f32> = init_params(&config).unwrap();
            assert_eq!(a, b, "{}", variant.as_str());
            let mut other = config.clone();
            other.seed += 1;
            let c: ModelParams<f32> = init_params(&other).unwrap();
            assert_ne!(a, c);
        }
    }

    #[test]
    fn lstm_init_bounded_by_range() {
        let mut config = tiny(Variant::Blstm);
        config.lstm_init_range = DEFAULT_LSTM_INIT_RANGE;
        config.cell_dim = 24;
        let params: ModelParams<f32> = init_params(&config).unwrap();
        let mut seen = 0;
        for (name, m) in params.named_matrices() {
            if name.contains("blstm") {
                seen += m.len();
                for &v in m.data() {
                    assert!(v.abs() <= 0.01 + f32::EPSILON, "{name}: {v}");
                }
            }
        }
        assert!(seen > 1000);
    }

    #[test]
    fn dnn_init_std_near_spec_value() {
        let mut config = tiny(Variant::Dnn);
        config.dnn_init_std = DEFAULT_DNN_INIT_STD;
        config.input_dnn_layers = vec![128];
        let params: ModelParams<f32> = init_params(&config).unwrap();
        let w = &params.affine("input_dnn.0").unwrap().weight;
        assert!(w.len() >= 2048, "need a big draw, got {}", w.len());
        let mean: f64 = w.data().iter().map(|&v| v as f64).sum::<f64>() / w.len() as f64;
        let var: f64 = w
            .data()
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / w.len() as f64;
        let std = var.sqrt();
        assert!(
            (std - 0.001).abs() / 0.001 < 0.2,
            "sample std {std} vs 0.001"
        );
        // biases start at zero
        assert_eq!(
            params.affine("input_dnn.0").unwrap().bias,
            Tensor::zeros(1, 128)
        );
    }

    #[test]
    fn invalid_configs_name_the_violation() {
        let mut c = tiny(Variant::BlstmDnn);
        c.input_dnn_layers = vec![8];
        let err = c.validate().unwrap_err();
        assert!(err.to_string().contains("empty input_dnn_layers"), "{err}");

        let mut c = tiny(Variant::Dnn);
        c.input_dnn_layers.clear();
        assert!(c.validate().is_err());

        let mut c = tiny(Variant::Blstm);
        c.num_classes = 1;
        assert!(c.validate().is_err());

        let mut c = tiny(Variant::Blstm);
        c.blstm_layers = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zeroed_output_stage_gives_uniform_posteriors() {
        let config = tiny(Variant::TcDnnBlstmDnn);
        let mut params: ModelParams<f32> = init_params(&config).unwrap();
        for (name, block) in params.blocks_mut() {
            if name == "classifier" {
                *block = block.zeros_like();
            }
        }
        let batch = random_batch(&config, 4, 7);
        let (posteriors, _) = forward(&params, &config, &batch, false).unwrap();
        for r in 0..4 {
            for c in 0..config.num_classes {
                assert!((posteriors.get(r, c) - 1.0 / 3.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn posterior_rows_sum_to_one_for_every_variant() {
        for variant in Variant::ALL {
            let config = tiny(variant);
            let params: ModelParams<f32> = init_params(&config).unwrap();
            let batch = random_batch(&config, 5, 11);
            let (posteriors, _) = forward(&params, &config, &batch, false).unwrap();
            for r in 0..5 {
                let s: f32 = posteriors.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-6, "{}: {s}", variant.as_str());
            }
        }
    }

    #[test]
    fn dnn_variant_ignores_tc_width() {
        let mut a = tiny(Variant::Dnn);
        a.tc = TimeConvSpec::new(7, 3, true).unwrap();
        let mut b = a.clone();
        b.tc = TimeConvSpec::new(7, 5, true).unwrap();
        let params: ModelParams<f32> = init_params(&a).unwrap();
        let batch = random_batch(&a, 3, 3);
        let (pa, _) = forward(&params, &a, &batch, false).unwrap();
        let (pb, _) = forward(&params, &b, &batch, false).unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn tc_width_one_equals_plain_variant_bitwise() {
        let mut tc_config = tiny(Variant::TcDnnBlstmDnn);
        tc_config.tc = TimeConvSpec::new(7, 1, true).unwrap();
        let mut plain_config = tc_config.clone();
        plain_config.variant = Variant::DnnBlstmDnn;

        let tc_params: ModelParams<f32> = init_params(&tc_config).unwrap();
        let plain_params: ModelParams<f32> = init_params(&plain_config).unwrap();
        assert_eq!(tc_params, plain_params);

        let batch = random_batch(&tc_config, 4, 21);
        let (pa, _) = forward(&tc_params, &tc_config, &batch, false).unwrap();
        let (pb, _) = forward(&plain_params, &plain_config, &batch, false).unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn parameter_count_matches_hand_computation() {
        // dnn_blstm_dnn, feat 3, context 7, input [4], cell 4, output [4],
        // classes 3:
        //   input_dnn.0: 3*4 + 4            = 16
        //   blstm fwd:   4*(4*4) + 4*(4*4)  = 128  (x-side + h-side)
        //   blstm bwd:                        128
        //   output_dnn.0: 8*4 + 4           = 36
        //   classifier:   4*3 + 3           = 15
        let config = tiny(Variant::DnnBlstmDnn);
        let params: ModelParams<f32> = init_params(&config).unwrap();
        assert_eq!(params.total_parameter_count(), 16 + 128 + 128 + 36 + 15);
    }

    #[test]
    fn flatten_unflatten_is_identity() {
        let config = tiny(Variant::TcDnnBlstmDnn);
        let params: ModelParams<f32> = init_params(&config).unwrap();
        let flat = params.flatten();
        assert_eq!(flat.len(), params.total_parameter_count());
        let rebuilt = params.unflatten(&flat).unwrap();
        assert_eq!(params, rebuilt);
    }

    #[test]
    fn backward_requires_train_mode_cache() {
        let config = tiny(Variant::Blstm);
        let params: ModelParams<f32> = init_params(&config).unwrap();
        let batch = random_batch(&config, 2, 5);
        let (_, cache) = forward(&params, &config, &batch, false).unwrap();
        let err = backward(&params, &config, &cache, &[0, 1]).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn duplicated_rows_leave_loss_and_grads_unchanged() {
        let config = tiny(Variant::DnnBlstmDnn);
        let params: ModelParams<f32> = init_params(&config).unwrap();
        let batch = random_batch(&config, 3, 17);
        let targets = vec![0usize, 1, 2];

        let (_, cache) = forward(&params, &config, &batch, true).unwrap();
        let (loss, grads) = backward(&params, &config, &cache, &targets).unwrap();

        let mut doubled_data = batch.data().to_vec();
        doubled_data.extend_from_slice(batch.data());
        let doubled = Tensor::new(6, config.window_width(), doubled_data).unwrap();
        let mut doubled_targets = targets.clone();
        doubled_targets.extend_from_slice(&targets);

        let (_, cache2) = forward(&params, &config, &doubled, true).unwrap();
        let (loss2, grads2) = backward(&params, &config, &cache2, &doubled_targets).unwrap();
        assert!((loss - loss2).abs() < 1e-6, "{loss} vs {loss2}");
        for ((na, ma), (_, mb)) in grads
            .named_matrices()
            .into_iter()
            .zip(grads2.named_matrices())
        {
            for (a, b) in ma.data().iter().zip(mb.data().iter()) {
                assert!((a - b).abs() < 1e-6, "{na}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn predict_matches_recomputed_argmax() {
        let config = tiny(Variant::BlstmDnn);
        let params: ModelParams<f32> = init_params(&config).unwrap();
        let batch = random_batch(&config, 6, 23);
        let classes = predict(&params, &config, &batch).unwrap();
        let (posteriors, _) = forward(&params, &config, &batch, false).unwrap();
        for (r, &cls) in classes.iter().enumerate() {
            let row = posteriors.row(r);
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .unwrap()
                .0;
            assert_eq!(cls, best);
        }
    }
}
