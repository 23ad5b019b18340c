//! Sparse volumetric VAE.
//!
//! The encoder embeds occupancy with a 1×1×1 stem, runs three (residual
//! block → stride-2 conv) stages so the lattice coarsens 8× per axis, adds
//! sinusoidal position codes to the surviving sites, refines them with
//! windowed attention, and regresses per-token μ and log σ². The decoder
//! mirrors this: a linear lift, attention, three (transposed conv → residual
//! block) stages back to stride 1, and a 1×1×1 head producing occupancy
//! logits. Decoder support is exactly the 8³ dilation of the latent
//! coordinates clipped to the grid, which always covers the encoder input's
//! active set.
//!
//! Connectivity (kernel maps, window groups, the dilated support) depends
//! only on coordinates, so it is planned once per sample and reused across
//! optimization steps; only features flow through the tape.

use crate::attention::{attention_block_apply, positional_encoding, AttnNodes};
use crate::autodiff::{NodeId, ParamStore, Tape};
use crate::error::{SvxError, SvxResult};
use crate::matrix::{Matrix, Real};
use crate::sparse_conv::{
    build_kernel_map_coords, conv_apply, doubled_coords, effective_groups, halved_coords,
    offsets_cube2, offsets_cube3, res_block_apply, ConvNodes, KernelMap, NormNodes, ResBlockNodes,
    StrideRatio,
};
use crate::voxel::{window_partition_coords, Coordinate, Dims, VoxelGrid, WindowGroups};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::collections::HashMap;

/// Downsampling stages; each halves the lattice, so the token lattice is
/// 2³ = 8× coarser per axis.
pub const STAGES: usize = 3;
/// Stride of the token lattice relative to the voxel grid.
pub const LATENT_STRIDE: u32 = 1 << STAGES as u32;
/// Probability assigned to a true voxel the decoder support failed to cover.
pub const MISS_FLOOR: f64 = 1e-7;
/// Bounds applied to the regressed log-variance before it reaches the KL
/// term or the sampler.
pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;

/// How the per-voxel reconstruction terms are reduced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ReconReduction {
    /// Average over the supervised set. Decouples the learning rate from the
    /// mask size.
    #[default]
    Mean,
    /// Plain sum over the supervised set.
    Sum,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Channel widths of the three conv stages.
    pub widths: [usize; 3],
    /// Token width used by attention and the latent heads.
    pub d_model: usize,
    pub heads: usize,
    /// Attention blocks in the encoder and, separately, in the decoder.
    pub attn_blocks_per_side: usize,
    /// Latent channels per token.
    pub latent_channels: usize,
    /// Weight of the KL term in the total loss.
    pub beta: f64,
    /// Cubic window edge, in token-lattice units, for windowed attention.
    pub window_extent: u32,
    /// Preferred group count for the group norms inside residual blocks.
    pub gn_groups: usize,
    pub recon_reduction: ReconReduction,
}

impl ModelConfig {
    /// Small configuration that trains on a CPU in minutes.
    pub fn desk() -> ModelConfig {
        ModelConfig {
            widths: [16, 32, 64],
            d_model: 48,
            heads: 8,
            attn_blocks_per_side: 3,
            latent_channels: 2,
            beta: 1e-4,
            window_extent: 8,
            gn_groups: 8,
            recon_reduction: ReconReduction::Mean,
        }
    }

    /// Full-size configuration (384-wide tokens, 8 heads). Provided for
    /// completeness; nothing in the test suite trains it.
    pub fn paper_scale() -> ModelConfig {
        ModelConfig {
            widths: [96, 192, 384],
            d_model: 384,
            heads: 8,
            attn_blocks_per_side: 3,
            latent_channels: 2,
            beta: 1e-4,
            window_extent: 8,
            gn_groups: 8,
            recon_reduction: ReconReduction::Mean,
        }
    }

    pub fn validate(&self) -> SvxResult<()> {
        let bad = |detail: String| Err(SvxError::BadConfig { detail });
        if self.widths.iter().any(|&w| w == 0) {
            return bad(format!("stage widths must be positive, got {:?}", self.widths));
        }
        if self.d_model == 0 || self.d_model % 6 != 0 {
            return bad(format!("d_model {} not divisible by 6", self.d_model));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("{} heads do not divide d_model {}", self.heads, self.d_model));
        }
        if self.attn_blocks_per_side == 0 {
            return bad("need at least one attention block per side".to_string());
        }
        if self.latent_channels == 0 {
            return bad("latent_channels must be at least 1".to_string());
        }
        if self.window_extent == 0 {
            return Err(SvxError::ZeroWindowExtent);
        }
        if self.gn_groups == 0 {
            return bad("gn_groups must be at least 1".to_string());
        }
        for &w in &self.widths {
            let g = effective_groups(w, self.gn_groups);
            if w % g != 0 {
                return bad(format!("width {w} not divisible by its {g} norm groups"));
            }
        }
        Ok(())
    }

    /// Serialize as `key=value` lines (the form stored inside checkpoints).
    pub fn to_text(&self) -> String {
        let reduction = match self.recon_reduction {
            ReconReduction::Mean => "mean",
            ReconReduction::Sum => "sum",
        };
        format!(
            "widths={},{},{}\nd_model={}\nheads={}\nattn_blocks_per_side={}\n\
             latent_channels={}\nbeta={}\nwindow_extent={}\ngn_groups={}\nrecon_reduction={}\n",
            self.widths[0],
            self.widths[1],
            self.widths[2],
            self.d_model,
            self.heads,
            self.attn_blocks_per_side,
            self.latent_channels,
            self.beta,
            self.window_extent,
            self.gn_groups,
            reduction,
        )
    }

    pub fn from_text(text: &str) -> SvxResult<ModelConfig> {
        let bad = |detail: String| SvxError::BadConfig { detail };
        let mut map = HashMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key=value, got {line:?}")))?;
            if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(bad(format!("duplicate key {k:?}")));
            }
        }
        let mut take = |k: &str| map.remove(k).ok_or_else(|| bad(format!("missing key {k:?}")));
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> SvxResult<T> {
            v.parse().map_err(|_| SvxError::BadConfig { detail: format!("bad value for {k}: {v:?}") })
        }
        let widths_text = take("widths")?;
        let parts: Vec<&str> = widths_text.split(',').collect();
        if parts.len() != 3 {
            return Err(bad(format!("widths needs 3 entries, got {widths_text:?}")));
        }
        let widths = [
            num("widths", parts[0].trim())?,
            num("widths", parts[1].trim())?,
            num("widths", parts[2].trim())?,
        ];
        let cfg = ModelConfig {
            widths,
            d_model: num("d_model", &take("d_model")?)?,
            heads: num("heads", &take("heads")?)?,
            attn_blocks_per_side: num("attn_blocks_per_side", &take("attn_blocks_per_side")?)?,
            latent_channels: num("latent_channels", &take("latent_channels")?)?,
            beta: num("beta", &take("beta")?)?,
            window_extent: num("window_extent", &take("window_extent")?)?,
            gn_groups: num("gn_groups", &take("gn_groups")?)?,
            recon_reduction: match take("recon_reduction")?.as_str() {
                "mean" => ReconReduction::Mean,
                "sum" => ReconReduction::Sum,
                other => return Err(bad(format!("bad recon_reduction {other:?}"))),
            },
        };
        if let Some(k) = map.keys().next() {
            return Err(bad(format!("unknown key {k:?}")));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Per-token Gaussian posterior over the latent code.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPosterior {
    /// Token coordinates on the stride-8 lattice, canonical order.
    pub coords: Vec<Coordinate>,
    pub mu: Matrix<f32>,
    pub logvar: Matrix<f32>,
    pub dims: Dims,
}

/// A sampled (or otherwise chosen) latent code.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub coords: Vec<Coordinate>,
    pub z: Matrix<f32>,
    pub dims: Dims,
    pub stride: u32,
}

/// Decoder output: occupancy probabilities on its dilated support.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseRecon {
    /// Stride-1 coordinates, canonical order.
    pub coords: Vec<Coordinate>,
    /// One probability per coordinate, strictly inside (0, 1).
    pub probs: Matrix<f32>,
    pub dims: Dims,
}

impl SparseRecon {
    /// Dense mask thresholded at 0.5; everything off-support is background.
    pub fn binarize(&self) -> VoxelGrid {
        let mut g = VoxelGrid::new(self.dims);
        for (i, &c) in self.coords.iter().enumerate() {
            if self.probs.get(i, 0) >= 0.5 {
                g.set_coord(c, 1);
            }
        }
        g
    }
}

// ---------------------------------------------------------------------------
// Parameter registry

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamInit {
    /// Uniform in ±1/√fan_in.
    UniformFanIn(usize),
    Zeros,
    Ones,
}

/// Name, shape, and init of one parameter matrix. The enumeration order of
/// `param_specs` fixes both the store layout and the RNG draw order.
#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: ParamInit,
    /// True when the parameter's gradient is identically zero by
    /// construction: a conv bias feeding a group norm whose groups hold one
    /// channel each gets subtracted right back out. Finite-difference
    /// checks must treat such parameters as constants (0/0 noise otherwise).
    pub dead_under_norm: bool,
}

fn spec(name: String, rows: usize, cols: usize, init: ParamInit) -> ParamSpec {
    ParamSpec { name, rows, cols, init, dead_under_norm: false }
}

fn res_specs(out: &mut Vec<ParamSpec>, prefix: &str, width: usize, gn_groups: usize) {
    let k = offsets_cube3().len();
    // One channel per group means the norm absorbs per-channel shifts
    // exactly; wider groups leave the bias live (it still moves a channel
    // relative to its group mean).
    let dead = effective_groups(width, gn_groups) == width;
    for conv in ["conv1", "conv2"] {
        out.push(spec(
            format!("{prefix}.{conv}.w"),
            k * width,
            width,
            ParamInit::UniformFanIn(k * width),
        ));
        let mut b = spec(format!("{prefix}.{conv}.b"), 1, width, ParamInit::Zeros);
        b.dead_under_norm = dead;
        out.push(b);
        let gn = if conv == "conv1" { "gn1" } else { "gn2" };
        out.push(spec(format!("{prefix}.{gn}.g"), 1, width, ParamInit::Ones));
        out.push(spec(format!("{prefix}.{gn}.b"), 1, width, ParamInit::Zeros));
    }
}

fn attn_specs(out: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    for w in ["wq", "wk", "wv", "wo"] {
        out.push(spec(format!("{prefix}.{w}"), d, d, ParamInit::UniformFanIn(d)));
    }
    out.push(spec(format!("{prefix}.mlp.w1"), d, 4 * d, ParamInit::UniformFanIn(d)));
    out.push(spec(format!("{prefix}.mlp.b1"), 1, 4 * d, ParamInit::Zeros));
    out.push(spec(format!("{prefix}.mlp.w2"), 4 * d, d, ParamInit::UniformFanIn(4 * d)));
    out.push(spec(format!("{prefix}.mlp.b2"), 1, d, ParamInit::Zeros));
    for ln in ["ln1", "ln2"] {
        out.push(spec(format!("{prefix}.{ln}.g"), 1, d, ParamInit::Ones));
        out.push(spec(format!("{prefix}.{ln}.b"), 1, d, ParamInit::Zeros));
    }
}

/// Every parameter of the architecture, in a fixed order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let [w0, w1, w2] = cfg.widths;
    let (d, c) = (cfg.d_model, cfg.latent_channels);
    let k2 = offsets_cube2().len();
    let mut out = Vec::new();

    out.push(spec("enc.stem.w".to_string(), 1, w0, ParamInit::UniformFanIn(1)));
    out.push(spec("enc.stem.b".to_string(), 1, w0, ParamInit::Zeros));
    for (s, &w) in cfg.widths.iter().enumerate() {
        res_specs(&mut out, &format!("enc.stage{s}.res"), w, cfg.gn_groups);
        let next = if s + 1 < STAGES { cfg.widths[s + 1] } else { d };
        out.push(spec(
            format!("enc.stage{s}.down.w"),
            k2 * w,
            next,
            ParamInit::UniformFanIn(k2 * w),
        ));
        out.push(spec(format!("enc.stage{s}.down.b"), 1, next, ParamInit::Zeros));
    }
    for i in 0..cfg.attn_blocks_per_side {
        attn_specs(&mut out, &format!("enc.attn{i}"), d);
    }
    for head in ["mu", "logvar"] {
        out.push(spec(format!("enc.{head}.w"), d, c, ParamInit::UniformFanIn(d)));
        out.push(spec(format!("enc.{head}.b"), 1, c, ParamInit::Zeros));
    }

    out.push(spec("dec.lift.w".to_string(), c, d, ParamInit::UniformFanIn(c)));
    out.push(spec("dec.lift.b".to_string(), 1, d, ParamInit::Zeros));
    for i in 0..cfg.attn_blocks_per_side {
        attn_specs(&mut out, &format!("dec.attn{i}"), d);
    }
    let up_in = [d, w2, w1];
    let up_out = [w2, w1, w0];
    for s in 0..STAGES {
        out.push(spec(
            format!("dec.stage{s}.up.w"),
            k2 * up_in[s],
            up_out[s],
            ParamInit::UniformFanIn(k2 * up_in[s]),
        ));
        out.push(spec(format!("dec.stage{s}.up.b"), 1, up_out[s], ParamInit::Zeros));
        res_specs(&mut out, &format!("dec.stage{s}.res"), up_out[s], cfg.gn_groups);
    }
    out.push(spec("dec.head.w".to_string(), w0, 1, ParamInit::UniformFanIn(w0)));
    out.push(spec("dec.head.b".to_string(), 1, 1, ParamInit::Zeros));
    out
}

/// Freshly initialized parameters; a given seed always produces the same
/// values because draws follow the `param_specs` order.
pub fn build_params<T: Real>(cfg: &ModelConfig, seed: u64) -> SvxResult<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for s in param_specs(cfg) {
        let m = match s.init {
            ParamInit::UniformFanIn(fan) => {
                let bound = 1.0 / (fan as f64).sqrt();
                let data: Vec<T> = (0..s.rows * s.cols)
                    .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
                    .collect();
                Matrix::from_vec(s.rows, s.cols, data)?
            }
            ParamInit::Zeros => Matrix::zeros(s.rows, s.cols),
            ParamInit::Ones => Matrix::full(s.rows, s.cols, T::one()),
        };
        store.insert(&s.name, m)?;
    }
    Ok(store)
}

/// Standard-normal matrix drawn as f64 then converted, so a seed identifies
/// the same noise regardless of the compute type.
pub fn standard_normal_matrix<T: Real, R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix<T> {
    let data: Vec<T> =
        (0..rows * cols).map(|_| T::from_f64(rng.sample::<f64, _>(StandardNormal))).collect();
    Matrix::from_vec(rows, cols, data).expect("sized above")
}

// ---------------------------------------------------------------------------
// Plans

/// One encoder stage: a same-lattice residual block followed by a stride-2
/// downsampling conv.
pub struct EncStagePlan {
    pub res_map: KernelMap,
    pub down_map: KernelMap,
}

/// One decoder stage: a stride-halving transposed conv followed by a
/// same-lattice residual block.
pub struct DecStagePlan {
    pub up_map: KernelMap,
    pub res_map: KernelMap,
}

/// Connectivity of one encoder pass, reusable across optimization steps.
pub struct EncodePlan {
    pub dims: Dims,
    pub input_rows: usize,
    pub stages: Vec<EncStagePlan>,
    pub latent_coords: Vec<Coordinate>,
    pub windows: WindowGroups,
}

/// Connectivity of one decoder pass.
pub struct DecodePlan {
    pub dims: Dims,
    pub latent_coords: Vec<Coordinate>,
    pub windows: WindowGroups,
    pub stages: Vec<DecStagePlan>,
    /// Stride-1 dilated support, canonical order.
    pub support: Vec<Coordinate>,
}

pub fn encode_plan(x: &VoxelGrid, cfg: &ModelConfig) -> SvxResult<EncodePlan> {
    let mut cur = x.active_coords();
    if cur.is_empty() {
        return Err(SvxError::EmptyMask);
    }
    let input_rows = cur.len();
    let k3 = offsets_cube3();
    let k2 = offsets_cube2();
    let mut stages = Vec::with_capacity(STAGES);
    for _ in 0..STAGES {
        let res_map = build_kernel_map_coords(&cur, &cur, &k3, StrideRatio::Same)?;
        let next = halved_coords(&cur);
        let down_map = build_kernel_map_coords(&cur, &next, &k2, StrideRatio::Down)?;
        stages.push(EncStagePlan { res_map, down_map });
        cur = next;
    }
    let windows = window_partition_coords(&cur, cfg.window_extent)?;
    Ok(EncodePlan { dims: x.dims(), input_rows, stages, latent_coords: cur, windows })
}

pub fn decode_plan(
    latent_coords: &[Coordinate],
    dims: Dims,
    cfg: &ModelConfig,
) -> SvxResult<DecodePlan> {
    if latent_coords.is_empty() {
        return Err(SvxError::EmptyLatent);
    }
    for (i, w) in latent_coords.windows(2).enumerate() {
        if w[0] >= w[1] {
            return Err(SvxError::UnsortedCoordinates { index: i + 1 });
        }
    }
    for &c in latent_coords {
        if !dims.contains(c, LATENT_STRIDE) {
            return Err(SvxError::CoordinateOutOfBounds {
                coord: (c.x, c.y, c.z),
                stride: LATENT_STRIDE,
                dims: dims.as_tuple(),
            });
        }
    }
    let windows = window_partition_coords(latent_coords, cfg.window_extent)?;
    let k3 = offsets_cube3();
    let k2 = offsets_cube2();
    let mut cur = latent_coords.to_vec();
    let mut stride = LATENT_STRIDE;
    let mut stages = Vec::with_capacity(STAGES);
    for _ in 0..STAGES {
        let child_stride = stride / 2;
        let next = doubled_coords(&cur, dims, child_stride);
        let up_map = build_kernel_map_coords(&cur, &next, &k2, StrideRatio::Up)?;
        let res_map = build_kernel_map_coords(&next, &next, &k3, StrideRatio::Same)?;
        stages.push(DecStagePlan { up_map, res_map });
        cur = next;
        stride = child_stride;
    }
    Ok(DecodePlan {
        dims,
        latent_coords: latent_coords.to_vec(),
        windows,
        stages,
        support: cur,
    })
}

// ---------------------------------------------------------------------------
// Graph construction

/// Where graph builders get their parameter nodes: a store (inference and
/// training) or an externally supplied name→node map (finite-difference
/// harnesses that need to own the leaves).
pub enum ParamSource<'a, T: Real> {
    Store(&'a ParamStore<T>),
    Nodes(&'a HashMap<String, NodeId>),
}

impl<T: Real> ParamSource<'_, T> {
    pub fn node(&self, tape: &mut Tape<T>, name: &str) -> SvxResult<NodeId> {
        match self {
            ParamSource::Store(store) => {
                let id = store.require(name)?;
                Ok(tape.param(store, id))
            }
            ParamSource::Nodes(map) => map
                .get(name)
                .copied()
                .ok_or_else(|| SvxError::MissingParameter { name: name.to_string() }),
        }
    }
}

fn conv_nodes<T: Real>(
    tape: &mut Tape<T>,
    src: &ParamSource<T>,
    prefix: &str,
) -> SvxResult<ConvNodes> {
    Ok(ConvNodes {
        w: src.node(tape, &format!("{prefix}.w"))?,
        b: src.node(tape, &format!("{prefix}.b"))?,
    })
}

fn res_nodes<T: Real>(
    tape: &mut Tape<T>,
    src: &ParamSource<T>,
    prefix: &str,
) -> SvxResult<ResBlockNodes> {
    Ok(ResBlockNodes {
        conv1: conv_nodes(tape, src, &format!("{prefix}.conv1"))?,
        gn1: NormNodes {
            gain: src.node(tape, &format!("{prefix}.gn1.g"))?,
            bias: src.node(tape, &format!("{prefix}.gn1.b"))?,
        },
        conv2: conv_nodes(tape, src, &format!("{prefix}.conv2"))?,
        gn2: NormNodes {
            gain: src.node(tape, &format!("{prefix}.gn2.g"))?,
            bias: src.node(tape, &format!("{prefix}.gn2.b"))?,
        },
        proj: None,
    })
}

fn attn_nodes<T: Real>(
    tape: &mut Tape<T>,
    src: &ParamSource<T>,
    prefix: &str,
) -> SvxResult<AttnNodes> {
    Ok(AttnNodes {
        wq: src.node(tape, &format!("{prefix}.wq"))?,
        wk: src.node(tape, &format!("{prefix}.wk"))?,
        wv: src.node(tape, &format!("{prefix}.wv"))?,
        wo: src.node(tape, &format!("{prefix}.wo"))?,
        mlp_w1: src.node(tape, &format!("{prefix}.mlp.w1"))?,
        mlp_b1: src.node(tape, &format!("{prefix}.mlp.b1"))?,
        mlp_w2: src.node(tape, &format!("{prefix}.mlp.w2"))?,
        mlp_b2: src.node(tape, &format!("{prefix}.mlp.b2"))?,
        ln1_gain: src.node(tape, &format!("{prefix}.ln1.g"))?,
        ln1_bias: src.node(tape, &format!("{prefix}.ln1.b"))?,
        ln2_gain: src.node(tape, &format!("{prefix}.ln2.g"))?,
        ln2_bias: src.node(tape, &format!("{prefix}.ln2.b"))?,
    })
}

/// Emit the encoder onto the tape. Returns (μ, log σ²) nodes, the latter
/// already clamped to [LOGVAR_MIN, LOGVAR_MAX].
pub fn encode_on_tape<T: Real>(
    tape: &mut Tape<T>,
    src: &ParamSource<T>,
    cfg: &ModelConfig,
    plan: &EncodePlan,
) -> SvxResult<(NodeId, NodeId)> {
    let ones = tape.leaf(Matrix::full(plan.input_rows, 1, T::one()));
    let stem = conv_nodes(tape, src, "enc.stem")?;
    let mut h = tape.matmul(ones, stem.w)?;
    h = tape.row_add(h, stem.b)?;
    for (s, stage) in plan.stages.iter().enumerate() {
        let rn = res_nodes(tape, src, &format!("enc.stage{s}.res"))?;
        h = res_block_apply(tape, h, rn, &stage.res_map, cfg.gn_groups)?;
        let dn = conv_nodes(tape, src, &format!("enc.stage{s}.down"))?;
        h = conv_apply(tape, h, dn, &stage.down_map, stage.down_map.out_rows())?;
    }
    let pe = tape.leaf(positional_encoding(&plan.latent_coords, cfg.d_model)?);
    let mut t = tape.add(h, pe)?;
    for i in 0..cfg.attn_blocks_per_side {
        let an = attn_nodes(tape, src, &format!("enc.attn{i}"))?;
        t = attention_block_apply(tape, t, &plan.windows, an, cfg.heads)?;
    }
    let mu_head = conv_nodes(tape, src, "enc.mu")?;
    let mut mu = tape.matmul(t, mu_head.w)?;
    mu = tape.row_add(mu, mu_head.b)?;
    let lv_head = conv_nodes(tape, src, "enc.logvar")?;
    let mut lv = tape.matmul(t, lv_head.w)?;
    lv = tape.row_add(lv, lv_head.b)?;
    let lv = tape.clamp(lv, T::from_f64(LOGVAR_MIN), T::from_f64(LOGVAR_MAX));
    Ok((mu, lv))
}

/// Emit the decoder onto the tape. `z` holds one row per latent coordinate;
/// the returned node holds one occupancy logit per support coordinate.
pub fn decode_on_tape<T: Real>(
    tape: &mut Tape<T>,
    src: &ParamSource<T>,
    cfg: &ModelConfig,
    plan: &DecodePlan,
    z: NodeId,
) -> SvxResult<NodeId> {
    let (rows, cols) = tape.shape(z);
    if rows != plan.latent_coords.len() || cols != cfg.latent_channels {
        return Err(SvxError::ShapeMismatch {
            op: "decode",
            expected: format!("{}x{} latent", plan.latent_coords.len(), cfg.latent_channels),
            got: format!("{rows}x{cols}"),
        });
    }
    let lift = conv_nodes(tape, src, "dec.lift")?;
    let mut h = tape.matmul(z, lift.w)?;
    h = tape.row_add(h, lift.b)?;
    let pe = tape.leaf(positional_encoding(&plan.latent_coords, cfg.d_model)?);
    h = tape.add(h, pe)?;
    for i in 0..cfg.attn_blocks_per_side {
        let an = attn_nodes(tape, src, &format!("dec.attn{i}"))?;
        h = attention_block_apply(tape, h, &plan.windows, an, cfg.heads)?;
    }
    for (s, stage) in plan.stages.iter().enumerate() {
        let un = conv_nodes(tape, src, &format!("dec.stage{s}.up"))?;
        h = conv_apply(tape, h, un, &stage.up_map, stage.up_map.out_rows())?;
        let rn = res_nodes(tape, src, &format!("dec.stage{s}.res"))?;
        h = res_block_apply(tape, h, rn, &stage.res_map, cfg.gn_groups)?;
    }
    let head = conv_nodes(tape, src, "dec.head")?;
    let mut logits = tape.matmul(h, head.w)?;
    logits = tape.row_add(logits, head.b)?;
    Ok(logits)
}

/// Ground-truth occupancy over a decoder support, plus how many true voxels
/// the support failed to cover.
pub struct BceTargets {
    pub on_support: Vec<bool>,
    pub missed: usize,
}

pub fn bce_targets(x: &VoxelGrid, support: &[Coordinate]) -> SvxResult<BceTargets> {
    let dims = x.dims();
    let mut hits = 0usize;
    let mut on_support = Vec::with_capacity(support.len());
    for &c in support {
        if !dims.contains(c, 1) {
            return Err(SvxError::CoordinateOutOfBounds {
                coord: (c.x, c.y, c.z),
                stride: 1,
                dims: dims.as_tuple(),
            });
        }
        let active = x.get_coord(c) == 1;
        hits += active as usize;
        on_support.push(active);
    }
    Ok(BceTargets { on_support, missed: x.active_count() - hits })
}

/// Emit the reconstruction term: binary cross-entropy against the support
/// targets, plus −ln(MISS_FLOOR) for every uncovered true voxel (a constant:
/// no gradient reaches voxels the support skipped), reduced over
/// |support| + missed.
pub fn recon_loss_on_tape<T: Real>(
    tape: &mut Tape<T>,
    reduction: ReconReduction,
    logits: NodeId,
    targets: &BceTargets,
) -> SvxResult<NodeId> {
    let (rows, cols) = tape.shape(logits);
    if cols != 1 || rows != targets.on_support.len() {
        return Err(SvxError::ShapeMismatch {
            op: "recon_loss",
            expected: format!("{}x1 logits", targets.on_support.len()),
            got: format!("{rows}x{cols}"),
        });
    }
    let omega = rows + targets.missed;
    if omega == 0 {
        return Err(SvxError::EmptyOmega);
    }
    let tm = Matrix::from_vec(
        rows,
        1,
        targets.on_support.iter().map(|&a| if a { T::one() } else { T::zero() }).collect(),
    )?;
    let mut sum = tape.bce_with_logits_sum(logits, tm)?;
    if targets.missed > 0 {
        let penalty = targets.missed as f64 * -MISS_FLOOR.ln();
        let p = tape.leaf(Matrix::full(1, 1, T::from_f64(penalty)));
        sum = tape.add(sum, p)?;
    }
    Ok(match reduction {
        ReconReduction::Mean => tape.scale(sum, T::from_f64(1.0 / omega as f64)),
        ReconReduction::Sum => sum,
    })
}

/// Emit the KL divergence to a standard normal, averaged over tokens:
/// (1/N) Σ ½(μ² + e^logvar − logvar − 1).
pub fn kl_loss_on_tape<T: Real>(
    tape: &mut Tape<T>,
    mu: NodeId,
    logvar: NodeId,
) -> SvxResult<NodeId> {
    let (n, c) = tape.shape(mu);
    if n == 0 {
        return Err(SvxError::EmptyLatent);
    }
    let musq = tape.mul(mu, mu)?;
    let s_musq = tape.sum_all(musq);
    let ev = tape.exp(logvar);
    let s_ev = tape.sum_all(ev);
    let s_lv = tape.sum_all(logvar);
    let mut t = tape.add(s_musq, s_ev)?;
    t = tape.sub(t, s_lv)?;
    let count = tape.leaf(Matrix::full(1, 1, T::from_f64((n * c) as f64)));
    t = tape.sub(t, count)?;
    Ok(tape.scale(t, T::from_f64(0.5 / n as f64)))
}

/// Nodes of one full autoencoding pass.
pub struct GraphOutputs {
    pub mu: NodeId,
    pub logvar: NodeId,
    pub z: NodeId,
    pub logits: NodeId,
    pub recon: NodeId,
    pub kl: NodeId,
    pub total: NodeId,
}

/// Emit encode → sample → decode → recon + β·KL onto one tape. `eps` is the
/// standard-normal draw for the sampler; gradients flow to μ and log σ²
/// through z = μ + e^{logvar/2} ⊙ ε but never to ε itself.
pub fn total_loss_on_tape<T: Real>(
    tape: &mut Tape<T>,
    src: &ParamSource<T>,
    cfg: &ModelConfig,
    enc: &EncodePlan,
    dec: &DecodePlan,
    targets: &BceTargets,
    eps: &Matrix<T>,
) -> SvxResult<GraphOutputs> {
    if enc.latent_coords != dec.latent_coords {
        return Err(SvxError::ShapeMismatch {
            op: "total_loss",
            expected: format!("decoder planned on the encoder's {} tokens", enc.latent_coords.len()),
            got: format!("{} tokens", dec.latent_coords.len()),
        });
    }
    if eps.shape() != (enc.latent_coords.len(), cfg.latent_channels) {
        return Err(SvxError::ShapeMismatch {
            op: "reparameterize",
            expected: format!("{}x{} noise", enc.latent_coords.len(), cfg.latent_channels),
            got: format!("{}x{}", eps.rows(), eps.cols()),
        });
    }
    let (mu, logvar) = encode_on_tape(tape, src, cfg, enc)?;
    let half = tape.scale(logvar, T::from_f64(0.5));
    let sd = tape.exp(half);
    let eps_leaf = tape.leaf(eps.clone());
    let noise = tape.mul(sd, eps_leaf)?;
    let z = tape.add(mu, noise)?;
    let logits = decode_on_tape(tape, src, cfg, dec, z)?;
    let recon = recon_loss_on_tape(tape, cfg.recon_reduction, logits, targets)?;
    let kl = kl_loss_on_tape(tape, mu, logvar)?;
    let weighted = tape.scale(kl, T::from_f64(cfg.beta));
    let total = tape.add(recon, weighted)?;
    Ok(GraphOutputs { mu, logvar, z, logits, recon, kl, total })
}

// ---------------------------------------------------------------------------
// Concrete operations

pub fn encode(
    x: &VoxelGrid,
    cfg: &ModelConfig,
    params: &ParamStore<f32>,
) -> SvxResult<LatentPosterior> {
    cfg.validate()?;
    let plan = encode_plan(x, cfg)?;
    let mut tape: Tape<f32> = Tape::new();
    let src = ParamSource::Store(params);
    let (mu, logvar) = encode_on_tape(&mut tape, &src, cfg, &plan)?;
    Ok(LatentPosterior {
        coords: plan.latent_coords,
        mu: tape.value(mu).clone(),
        logvar: tape.value(logvar).clone(),
        dims: plan.dims,
    })
}

/// Draw z = μ + σ ⊙ ε with ε standard normal from the seeded generator.
pub fn reparameterize(post: &LatentPosterior, seed: u64) -> LatentCode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps: Matrix<f32> = standard_normal_matrix(&mut rng, post.mu.rows(), post.mu.cols());
    let sd = post.logvar.map(|lv| (0.5 * lv).exp());
    let z = post
        .mu
        .zip_map(&sd.zip_map(&eps, |s, e| s * e).expect("shapes match"), |m, n| m + n)
        .expect("shapes match");
    LatentCode { coords: post.coords.clone(), z, dims: post.dims, stride: LATENT_STRIDE }
}

pub fn decode(
    code: &LatentCode,
    cfg: &ModelConfig,
    params: &ParamStore<f32>,
) -> SvxResult<SparseRecon> {
    cfg.validate()?;
    if code.stride != LATENT_STRIDE {
        return Err(SvxError::StrideMismatch { expected: LATENT_STRIDE, got: code.stride });
    }
    if code.z.rows() != code.coords.len() {
        return Err(SvxError::ShapeMismatch {
            op: "decode",
            expected: format!("{} feature rows", code.coords.len()),
            got: format!("{}", code.z.rows()),
        });
    }
    let plan = decode_plan(&code.coords, code.dims, cfg)?;
    let mut tape: Tape<f32> = Tape::new();
    let src = ParamSource::Store(params);
    let z = tape.leaf(code.z.clone());
    let logits = decode_on_tape(&mut tape, &src, cfg, &plan, z)?;
    let probs_node = tape.sigmoid(logits);
    // Large magnitudes round to exactly 0.0/1.0 in f32; nudge inside the
    // open interval so downstream logs stay finite.
    let lo = MISS_FLOOR as f32;
    let probs = tape.value(probs_node).map(|p| p.clamp(lo, 1.0 - lo));
    Ok(SparseRecon { coords: plan.support, probs, dims: plan.dims })
}

/// Cross-entropy between the mask and the reconstruction over
/// Ω = support ∪ active(x). True voxels outside the support are scored at
/// probability MISS_FLOOR.
pub fn recon_loss(
    x: &VoxelGrid,
    recon: &SparseRecon,
    reduction: ReconReduction,
) -> SvxResult<f64> {
    if x.dims() != recon.dims {
        return Err(SvxError::DimsMismatch {
            left: x.dims().as_tuple(),
            right: recon.dims.as_tuple(),
        });
    }
    if recon.probs.rows() != recon.coords.len() || recon.probs.cols() != 1 {
        return Err(SvxError::ShapeMismatch {
            op: "recon_loss",
            expected: format!("{}x1 probabilities", recon.coords.len()),
            got: format!("{}x{}", recon.probs.rows(), recon.probs.cols()),
        });
    }
    for (i, w) in recon.coords.windows(2).enumerate() {
        if w[0] >= w[1] {
            return Err(SvxError::UnsortedCoordinates { index: i + 1 });
        }
    }
    let mut sum = 0.0f64;
    let mut hits = 0usize;
    for (i, &c) in recon.coords.iter().enumerate() {
        if !recon.dims.contains(c, 1) {
            return Err(SvxError::CoordinateOutOfBounds {
                coord: (c.x, c.y, c.z),
                stride: 1,
                dims: recon.dims.as_tuple(),
            });
        }
        let p = (recon.probs.get(i, 0) as f64).clamp(MISS_FLOOR, 1.0 - MISS_FLOOR);
        if x.get_coord(c) == 1 {
            hits += 1;
            sum -= p.ln();
        } else {
            sum -= (1.0 - p).ln();
        }
    }
    let missed = x.active_count() - hits;
    sum += missed as f64 * -MISS_FLOOR.ln();
    let omega = recon.coords.len() + missed;
    if omega == 0 {
        return Err(SvxError::EmptyOmega);
    }
    Ok(match reduction {
        ReconReduction::Mean => sum / omega as f64,
        ReconReduction::Sum => sum,
    })
}

/// KL divergence of the posterior from a standard normal, averaged over
/// tokens. Zero exactly when μ=0 and logvar=0; never negative.
pub fn kl_loss(post: &LatentPosterior) -> f64 {
    debug_assert_eq!(post.mu.shape(), post.logvar.shape());
    let n = post.mu.rows();
    if n == 0 {
        return 0.0;
    }
    let mut sum = 0.0f64;
    for (&m, &lv) in post.mu.data().iter().zip(post.logvar.data()) {
        let (m, lv) = (m as f64, lv as f64);
        sum += 0.5 * (m * m + lv.exp() - lv - 1.0);
    }
    sum / n as f64
}

pub fn total_loss(
    x: &VoxelGrid,
    recon: &SparseRecon,
    post: &LatentPosterior,
    beta: f64,
    reduction: ReconReduction,
) -> SvxResult<f64> {
    let total = recon_loss(x, recon, reduction)? + beta * kl_loss(post);
    if !total.is_finite() {
        return Err(SvxError::NonFinite { label: "total_loss" });
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Compression accounting

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompressionReport {
    /// Per-axis shrink factor of the token lattice.
    pub spatial_ratio: (u32, u32, u32),
    /// Dense voxel count over dense latent scalar count: 512 / channels.
    pub volumetric_ratio: f64,
    pub active_voxels: usize,
    pub latent_tokens: usize,
    pub latent_extent: Dims,
}

/// Ratios derivable from the grid header alone; nothing is allocated.
pub fn compression_ratios(dims: Dims, channels: usize) -> SvxResult<(f64, Dims)> {
    if channels == 0 {
        return Err(SvxError::BadConfig { detail: "latent_channels must be at least 1".to_string() });
    }
    if !dims.divisible_by(LATENT_STRIDE) {
        return Err(SvxError::DimsNotDivisibleBy8 { dims: dims.as_tuple() });
    }
    let latent = dims.extent_at(LATENT_STRIDE);
    let r = dims.voxels() as f64 / (latent.voxels() as f64 * channels as f64);
    Ok((r, latent))
}

pub fn compression_report(
    x: &VoxelGrid,
    post: &LatentPosterior,
    channels: usize,
) -> SvxResult<CompressionReport> {
    let (volumetric_ratio, latent_extent) = compression_ratios(x.dims(), channels)?;
    let s = LATENT_STRIDE;
    Ok(CompressionReport {
        spatial_ratio: (s, s, s),
        volumetric_ratio,
        active_voxels: x.active_count(),
        latent_tokens: post.coords.len(),
        latent_extent,
    })
}
