use std::fmt;
use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type SvxResult<T> = Result<T, SvxError>;

/// Errors emitted by the voxel containers, model, training loop, and metrics.
#[derive(Clone, Debug, PartialEq)]
pub enum SvxError {
    /// An operation received tensors or matrices of incompatible shapes.
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    /// A sparse tensor was constructed with the same coordinate twice.
    DuplicateCoordinate { coord: (u32, u32, u32) },
    /// Coordinates handed to a canonical constructor were not in ascending
    /// lexicographic order.
    UnsortedCoordinates { index: usize },
    /// A coordinate lies outside the grid bounds at the tensor's stride.
    CoordinateOutOfBounds {
        coord: (u32, u32, u32),
        stride: u32,
        dims: (u32, u32, u32),
    },
    /// Channel index past the feature width.
    ChannelOutOfRange { channel: usize, width: usize },
    /// Window partitioning requires a positive window extent.
    ZeroWindowExtent,
    /// Occupancy data contained a value other than 0 or 1.
    NotBinary { index: usize, value: u8 },
    /// Grid data length does not match H*W*D.
    DataLength { expected: usize, got: usize },
    /// backward() requires a 1x1 loss node.
    NonScalarLoss { rows: usize, cols: usize },
    /// A non-finite value surfaced where finite math was required.
    NonFinite { label: &'static str },
    /// Group normalization requires the channel count to divide evenly.
    BadGroupCount { channels: usize, groups: usize },
    /// Kernel map construction got an unsupported stride ratio combination.
    BadStrideRatio { detail: String },
    /// Upsampling below stride 1 is impossible.
    StrideFloor,
    /// The tensor stride does not match what the operation expects.
    StrideMismatch { expected: u32, got: u32 },
    /// Encoder input mask has no active voxels.
    EmptyMask,
    /// Decoder was handed an empty latent.
    EmptyLatent,
    /// Reconstruction loss support is empty.
    EmptyOmega,
    /// Grid dims must be divisible by 8 for the 3-stage architecture.
    DimsNotDivisibleBy8 { dims: (u32, u32, u32) },
    /// Model configuration violates an architectural invariant.
    BadConfig { detail: String },
    /// A named parameter expected by the architecture is missing.
    MissingParameter { name: String },
    /// Two parameters registered under the same name.
    DuplicateParameter { name: String },
    /// Gradient for a parameter became non-finite during training.
    NonFiniteGradient { param: String },
    /// Loss became non-finite during training.
    NonFiniteLoss { step: u64 },
    /// Synthetic generator parameters cannot produce a valid sample.
    DegenerateTreeParams { detail: String },
    /// Stenosis placement kept disconnecting the mask.
    StenosisFailed { attempts: usize },
    /// Connected-components got an unsupported connectivity constant.
    BadConnectivity { got: usize },
    /// Grids being compared must share dims.
    DimsMismatch {
        left: (u32, u32, u32),
        right: (u32, u32, u32),
    },
    /// Classifier training needs at least two classes.
    SingleClass,
    /// PCA component count exceeds what the data supports.
    BadComponentCount { k: usize, max: usize },
    /// Mismatched prediction/label lengths.
    LengthMismatch { left: usize, right: usize },
    /// Empty input where at least one element is required.
    EmptyInput(&'static str),
    /// File format violation; carries the offending file's role.
    Format(FormatError),
    /// Filesystem failure wrapped with the path involved.
    Io { path: PathBuf, detail: String },
}

/// Violations detected while parsing the binary file formats.
#[derive(Clone, Debug, PartialEq)]
pub enum FormatError {
    BadMagic { expected: &'static str, found: Vec<u8> },
    Truncated { need: usize, have: usize },
    TrailingData { extra: usize },
    UnsortedCoords { index: usize },
    CoordOutOfRange { index: usize, coord: (u32, u32, u32) },
    NonFiniteValue { field: &'static str, index: usize },
    EmptyLatent,
    BadName { detail: String },
    DuplicateEntry { name: String },
    Oversized { detail: String },
    ShapeDisagreement { name: String, expected: String, got: String },
    BadConfigLine { line: String },
}

impl fmt::Display for SvxError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SvxError::ShapeMismatch { op, expected, got } => {
                write!(f, "{op}: shape mismatch, expected {expected}, got {got}")
            }
            SvxError::DuplicateCoordinate { coord } => {
                write!(f, "duplicate coordinate ({}, {}, {})", coord.0, coord.1, coord.2)
            }
            SvxError::UnsortedCoordinates { index } => {
                write!(f, "coordinates not in canonical order at row {index}")
            }
            SvxError::CoordinateOutOfBounds { coord, stride, dims } => write!(
                f,
                "coordinate ({}, {}, {}) at stride {} outside grid {}x{}x{}",
                coord.0, coord.1, coord.2, stride, dims.0, dims.1, dims.2
            ),
            SvxError::ChannelOutOfRange { channel, width } => {
                write!(f, "channel {channel} out of range for width {width}")
            }
            SvxError::ZeroWindowExtent => write!(f, "window extent must be at least 1"),
            SvxError::NotBinary { index, value } => {
                write!(f, "occupancy value {value} at index {index} is not 0 or 1")
            }
            SvxError::DataLength { expected, got } => {
                write!(f, "grid data length mismatch: expected {expected}, got {got}")
            }
            SvxError::NonScalarLoss { rows, cols } => {
                write!(f, "loss node must be 1x1, got {rows}x{cols}")
            }
            SvxError::NonFinite { label } => write!(f, "non-finite value in {label}"),
            SvxError::BadGroupCount { channels, groups } => {
                write!(f, "{channels} channels not divisible by {groups} groups")
            }
            SvxError::BadStrideRatio { detail } => write!(f, "bad stride ratio: {detail}"),
            SvxError::StrideFloor => write!(f, "tensor already at stride 1, cannot upsample"),
            SvxError::StrideMismatch { expected, got } => {
                write!(f, "stride mismatch: expected {expected}, got {got}")
            }
            SvxError::EmptyMask => write!(f, "empty mask"),
            SvxError::EmptyLatent => write!(f, "empty latent"),
            SvxError::EmptyOmega => write!(f, "reconstruction loss support is empty"),
            SvxError::DimsNotDivisibleBy8 { dims } => write!(
                f,
                "grid dims {}x{}x{} not divisible by 8 (use pad8)",
                dims.0, dims.1, dims.2
            ),
            SvxError::BadConfig { detail } => write!(f, "bad model config: {detail}"),
            SvxError::MissingParameter { name } => write!(f, "missing parameter {name}"),
            SvxError::DuplicateParameter { name } => {
                write!(f, "parameter {name} registered twice")
            }
            SvxError::NonFiniteGradient { param } => {
                write!(f, "non-finite gradient for parameter {param}")
            }
            SvxError::NonFiniteLoss { step } => write!(f, "non-finite loss at step {step}"),
            SvxError::DegenerateTreeParams { detail } => {
                write!(f, "degenerate tree params: {detail}")
            }
            SvxError::StenosisFailed { attempts } => {
                write!(f, "stenosis kept disconnecting the mask after {attempts} attempts")
            }
            SvxError::BadConnectivity { got } => {
                write!(f, "connectivity must be 6 or 26, got {got}")
            }
            SvxError::DimsMismatch { left, right } => write!(
                f,
                "dims mismatch: {}x{}x{} vs {}x{}x{}",
                left.0, left.1, left.2, right.0, right.1, right.2
            ),
            SvxError::SingleClass => write!(f, "training set contains a single class"),
            SvxError::BadComponentCount { k, max } => {
                write!(f, "requested {k} components, at most {max} supported")
            }
            SvxError::LengthMismatch { left, right } => {
                write!(f, "length mismatch: {left} vs {right}")
            }
            SvxError::EmptyInput(label) => write!(f, "{label} must not be empty"),
            SvxError::Format(e) => write!(f, "{e}"),
            SvxError::Io { path, detail } => {
                write!(f, "io error on {}: {detail}", path.display())
            }
        }
    }
}

impl fmt::Display for FormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FormatError::BadMagic { expected, found } => {
                write!(f, "bad magic: expected {expected:?}, found {found:?}")
            }
            FormatError::Truncated { need, have } => {
                write!(f, "truncated file: need {need} more bytes, have {have}")
            }
            FormatError::TrailingData { extra } => {
                write!(f, "{extra} trailing bytes after payload")
            }
            FormatError::UnsortedCoords { index } => {
                write!(f, "coordinates not strictly increasing at index {index}")
            }
            FormatError::CoordOutOfRange { index, coord } => write!(
                f,
                "coordinate ({}, {}, {}) at index {index} out of range",
                coord.0, coord.1, coord.2
            ),
            FormatError::NonFiniteValue { field, index } => {
                write!(f, "non-finite {field} value at index {index}")
            }
            FormatError::EmptyLatent => write!(f, "empty latent"),
            FormatError::BadName { detail } => write!(f, "bad entry name: {detail}"),
            FormatError::DuplicateEntry { name } => write!(f, "duplicate entry name {name}"),
            FormatError::Oversized { detail } => write!(f, "declared size implausible: {detail}"),
            FormatError::ShapeDisagreement { name, expected, got } => {
                write!(f, "entry {name}: shape {got} disagrees with expected {expected}")
            }
            FormatError::BadConfigLine { line } => write!(f, "bad config line: {line:?}"),
        }
    }
}

impl std::error::Error for SvxError {}
impl std::error::Error for FormatError {}

impl From<FormatError> for SvxError {
    fn from(e: FormatError) -> Self {
        SvxError::Format(e)
    }
}
