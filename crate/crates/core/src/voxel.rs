use crate::error::{SvxError, SvxResult};
use crate::matrix::{Matrix, Real};
use std::collections::HashMap;

/// Full-resolution grid extents (H, W, D) in voxels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims {
    pub h: u32,
    pub w: u32,
    pub d: u32,
}

impl Dims {
    pub fn new(h: u32, w: u32, d: u32) -> Dims {
        Dims { h, w, d }
    }

    pub fn as_tuple(self) -> (u32, u32, u32) {
        (self.h, self.w, self.d)
    }

    pub fn voxels(self) -> u64 {
        self.h as u64 * self.w as u64 * self.d as u64
    }

    /// Lattice extent per axis at the given stride: smallest box whose
    /// coordinates satisfy p*stride < dim.
    pub fn extent_at(self, stride: u32) -> Dims {
        let up = |v: u32| v.div_ceil(stride);
        Dims::new(up(self.h), up(self.w), up(self.d))
    }

    pub fn contains(self, c: Coordinate, stride: u32) -> bool {
        (c.x as u64) * stride as u64 <= (self.h as u64).saturating_sub(1)
            && (c.y as u64) * stride as u64 <= (self.w as u64).saturating_sub(1)
            && (c.z as u64) * stride as u64 <= (self.d as u64).saturating_sub(1)
            && self.voxels() > 0
    }

    pub fn divisible_by(self, m: u32) -> bool {
        self.h % m == 0 && self.w % m == 0 && self.d % m == 0
    }

    pub fn padded_to_multiple(self, m: u32) -> Dims {
        let up = |v: u32| v.div_ceil(m) * m;
        Dims::new(up(self.h), up(self.w), up(self.d))
    }
}

/// Lattice position at a tensor's own stride. Derived ordering is ascending
/// lexicographic on (x, y, z), the canonical order everywhere in this crate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Coordinate {
    pub x: u32,
    pub y: u32,
    pub z: u32,
}

impl Coordinate {
    pub fn new(x: u32, y: u32, z: u32) -> Coordinate {
        Coordinate { x, y, z }
    }

    pub fn as_tuple(self) -> (u32, u32, u32) {
        (self.x, self.y, self.z)
    }
}

/// Dense binary occupancy grid, x-fastest layout: index = x + H*(y + W*z).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoxelGrid {
    dims: Dims,
    data: Vec<u8>,
}

impl VoxelGrid {
    pub fn new(dims: Dims) -> VoxelGrid {
        VoxelGrid { dims, data: vec![0u8; dims.voxels() as usize] }
    }

    pub fn from_data(dims: Dims, data: Vec<u8>) -> SvxResult<VoxelGrid> {
        if data.len() as u64 != dims.voxels() {
            return Err(SvxError::DataLength {
                expected: dims.voxels() as usize,
                got: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|&v| v > 1) {
            return Err(SvxError::NotBinary { index: i, value: data[i] });
        }
        Ok(VoxelGrid { dims, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn linear_index(&self, x: u32, y: u32, z: u32) -> usize {
        debug_assert!(x < self.dims.h && y < self.dims.w && z < self.dims.d);
        x as usize + self.dims.h as usize * (y as usize + self.dims.w as usize * z as usize)
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32, z: u32) -> u8 {
        self.data[self.linear_index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, z: u32, v: u8) {
        debug_assert!(v <= 1);
        let i = self.linear_index(x, y, z);
        self.data[i] = v;
    }

    pub fn get_coord(&self, c: Coordinate) -> u8 {
        self.get(c.x, c.y, c.z)
    }

    pub fn set_coord(&mut self, c: Coordinate, v: u8) {
        self.set(c.x, c.y, c.z, v);
    }

    pub fn active_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Active positions in canonical (lexicographic) order.
    pub fn active_coords(&self) -> Vec<Coordinate> {
        let mut out = Vec::new();
        for x in 0..self.dims.h {
            for y in 0..self.dims.w {
                for z in 0..self.dims.d {
                    if self.get(x, y, z) == 1 {
                        out.push(Coordinate::new(x, y, z));
                    }
                }
            }
        }
        out
    }

    /// Copy into a grid whose dims are rounded up to a multiple of m,
    /// zero-filling the new margin.
    pub fn padded_to_multiple(&self, m: u32) -> VoxelGrid {
        let nd = self.dims.padded_to_multiple(m);
        if nd == self.dims {
            return self.clone();
        }
        let mut out = VoxelGrid::new(nd);
        for z in 0..self.dims.d {
            for y in 0..self.dims.w {
                for x in 0..self.dims.h {
                    if self.get(x, y, z) == 1 {
                        out.set(x, y, z, 1);
                    }
                }
            }
        }
        out
    }

    /// Keep only the [0, sub) corner region.
    pub fn cropped_to(&self, sub: Dims) -> SvxResult<VoxelGrid> {
        if sub.h > self.dims.h || sub.w > self.dims.w || sub.d > self.dims.d {
            return Err(SvxError::DimsMismatch {
                left: sub.as_tuple(),
                right: self.dims.as_tuple(),
            });
        }
        let mut out = VoxelGrid::new(sub);
        for z in 0..sub.d {
            for y in 0..sub.w {
                for x in 0..sub.h {
                    if self.get(x, y, z) == 1 {
                        out.set(x, y, z, 1);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Dense scalar field over the lattice extent of some stride, same x-fastest
/// layout as VoxelGrid. Produced by to_dense, consumed by oracles and tests.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseField<T> {
    pub extent: Dims,
    pub data: Vec<T>,
}

impl<T: Real> DenseField<T> {
    pub fn zeros(extent: Dims) -> DenseField<T> {
        DenseField { extent, data: vec![T::zero(); extent.voxels() as usize] }
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32, z: u32) -> T {
        self.data[x as usize
            + self.extent.h as usize * (y as usize + self.extent.w as usize * z as usize)]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, z: u32, v: T) {
        let i = x as usize
            + self.extent.h as usize * (y as usize + self.extent.w as usize * z as usize);
        self.data[i] = v;
    }
}

/// Coordinates plus per-site feature rows at a given stride. Always canonical:
/// coords strictly ascending lexicographic, one feature row per coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseTensor<T> {
    coords: Vec<Coordinate>,
    features: Matrix<T>,
    stride: u32,
    dims: Dims,
}

impl<T: Real> SparseTensor<T> {
    /// Strict constructor: rejects unsorted or duplicate coordinates rather
    /// than fixing them. Use canonical_sort when order is unknown.
    pub fn new(
        coords: Vec<Coordinate>,
        features: Matrix<T>,
        stride: u32,
        dims: Dims,
    ) -> SvxResult<SparseTensor<T>> {
        if stride == 0 {
            return Err(SvxError::BadStrideRatio { detail: "stride 0".to_string() });
        }
        if features.rows() != coords.len() {
            return Err(SvxError::ShapeMismatch {
                op: "SparseTensor::new",
                expected: format!("{} feature rows", coords.len()),
                got: format!("{}", features.rows()),
            });
        }
        for (i, pair) in coords.windows(2).enumerate() {
            if pair[0] >= pair[1] {
                if pair[0] == pair[1] {
                    return Err(SvxError::DuplicateCoordinate { coord: pair[0].as_tuple() });
                }
                return Err(SvxError::UnsortedCoordinates { index: i + 1 });
            }
        }
        for &c in &coords {
            if !dims.contains(c, stride) {
                return Err(SvxError::CoordinateOutOfBounds {
                    coord: c.as_tuple(),
                    stride,
                    dims: dims.as_tuple(),
                });
            }
        }
        Ok(SparseTensor { coords, features, stride, dims })
    }

    /// Build the sparse view of a binary grid: one row of constant 1.0 per
    /// active voxel, stride 1.
    pub fn from_grid(grid: &VoxelGrid) -> SparseTensor<T> {
        let coords = grid.active_coords();
        let features = Matrix::full(coords.len(), 1, T::one());
        SparseTensor { coords, features, stride: 1, dims: grid.dims() }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.features.cols()
    }

    pub fn coords(&self) -> &[Coordinate] {
        &self.coords
    }

    pub fn features(&self) -> &Matrix<T> {
        &self.features
    }

    pub fn stride(&self) -> u32 {
        self.stride
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn into_parts(self) -> (Vec<Coordinate>, Matrix<T>, u32, Dims) {
        (self.coords, self.features, self.stride, self.dims)
    }

    /// Same coordinates, new feature rows.
    pub fn with_features(&self, features: Matrix<T>) -> SvxResult<SparseTensor<T>> {
        if features.rows() != self.coords.len() {
            return Err(SvxError::ShapeMismatch {
                op: "with_features",
                expected: format!("{} rows", self.coords.len()),
                got: format!("{}", features.rows()),
            });
        }
        Ok(SparseTensor {
            coords: self.coords.clone(),
            features,
            stride: self.stride,
            dims: self.dims,
        })
    }

    /// One channel scattered onto the dense lattice at this tensor's stride.
    pub fn to_dense(&self, channel: usize) -> SvxResult<DenseField<T>> {
        if channel >= self.channels() {
            return Err(SvxError::ChannelOutOfRange {
                channel,
                width: self.channels(),
            });
        }
        let mut field = DenseField::zeros(self.dims.extent_at(self.stride));
        for (row, &c) in self.coords.iter().enumerate() {
            field.set(c.x, c.y, c.z, self.features.get(row, channel));
        }
        Ok(field)
    }

    /// Binarize one channel back into a stride-1 grid. Only meaningful for
    /// stride-1 tensors (decoder output).
    pub fn to_grid(&self, channel: usize, threshold: T) -> SvxResult<VoxelGrid> {
        if self.stride != 1 {
            return Err(SvxError::StrideMismatch { expected: 1, got: self.stride });
        }
        if channel >= self.channels() {
            return Err(SvxError::ChannelOutOfRange {
                channel,
                width: self.channels(),
            });
        }
        let mut grid = VoxelGrid::new(self.dims);
        for (row, &c) in self.coords.iter().enumerate() {
            if self.features.get(row, channel) > threshold {
                grid.set_coord(c, 1);
            }
        }
        Ok(grid)
    }

    /// Lookup-only map from coordinate to row index. Never iterate it into
    /// anything ordered; iteration order is not deterministic.
    pub fn build_index(&self) -> CoordIndex {
        CoordIndex::from_coords(&self.coords)
    }

    /// Group rows into axis-aligned cubic windows of the given extent (in
    /// this tensor's lattice units).
    pub fn window_partition(&self, window_extent: u32) -> SvxResult<WindowGroups> {
        window_partition_coords(&self.coords, window_extent)
    }
}

/// Window partition over a raw coordinate list (row i = coords[i]).
pub fn window_partition_coords(
    coords: &[Coordinate],
    window_extent: u32,
) -> SvxResult<WindowGroups> {
    if window_extent == 0 {
        return Err(SvxError::ZeroWindowExtent);
    }
    // Coords are lex-sorted, but window keys are not monotone in that order
    // (e.g. (0,0,9) sorts before (1,0,0) yet its extent-8 key (0,0,1) sorts
    // after (0,0,0)), so collect then sort keys.
    let mut by_key: std::collections::BTreeMap<Coordinate, Vec<usize>> =
        std::collections::BTreeMap::new();
    for (i, &c) in coords.iter().enumerate() {
        let key = Coordinate::new(c.x / window_extent, c.y / window_extent, c.z / window_extent);
        by_key.entry(key).or_default().push(i);
    }
    let groups: Vec<(Coordinate, Vec<usize>)> = by_key.into_iter().collect();
    Ok(WindowGroups { window_extent, groups })
}

/// Restore canonical order on raw parts: sort rows lexicographically by
/// coordinate, permuting feature rows in lock-step.
pub fn canonical_sort<T: Real>(
    coords: Vec<Coordinate>,
    features: Matrix<T>,
    stride: u32,
    dims: Dims,
) -> SvxResult<SparseTensor<T>> {
    if features.rows() != coords.len() {
        return Err(SvxError::ShapeMismatch {
            op: "canonical_sort",
            expected: format!("{} feature rows", coords.len()),
            got: format!("{}", features.rows()),
        });
    }
    let mut order: Vec<usize> = (0..coords.len()).collect();
    order.sort_by_key(|&i| coords[i]);
    for pair in order.windows(2) {
        if coords[pair[0]] == coords[pair[1]] {
            return Err(SvxError::DuplicateCoordinate { coord: coords[pair[0]].as_tuple() });
        }
    }
    let sorted_coords: Vec<Coordinate> = order.iter().map(|&i| coords[i]).collect();
    let mut sorted_rows = Vec::with_capacity(coords.len() * features.cols());
    for &i in &order {
        sorted_rows.extend_from_slice(features.row(i));
    }
    let sorted_features = Matrix::from_vec(coords.len(), features.cols(), sorted_rows)?;
    SparseTensor::new(sorted_coords, sorted_features, stride, dims)
}

/// Coordinate -> row index map for a canonical tensor.
pub struct CoordIndex {
    map: HashMap<Coordinate, usize>,
}

impl CoordIndex {
    pub fn from_coords(coords: &[Coordinate]) -> CoordIndex {
        let mut map = HashMap::with_capacity(coords.len());
        for (i, &c) in coords.iter().enumerate() {
            map.insert(c, i);
        }
        CoordIndex { map }
    }

    pub fn lookup(&self, c: Coordinate) -> Option<usize> {
        self.map.get(&c).copied()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Partition of row indices into cubic windows, keys sorted lexicographically,
/// members ascending within each window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowGroups {
    pub window_extent: u32,
    pub groups: Vec<(Coordinate, Vec<usize>)>,
}

impl WindowGroups {
    /// Row indices flattened in group order plus each group's length, the
    /// gather order used by windowed attention.
    pub fn flatten(&self) -> (Vec<usize>, Vec<usize>) {
        let mut rows = Vec::new();
        let mut lens = Vec::new();
        for (_, members) in &self.groups {
            rows.extend_from_slice(members);
            lens.push(members.len());
        }
        (rows, lens)
    }
}
