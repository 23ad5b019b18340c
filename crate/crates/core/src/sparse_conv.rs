//! Sparse 3D convolutions driven by explicit kernel maps.
//!
//! A kernel map lists which (input row, output row) pairs interact through
//! which kernel offset; convolution is then gather-matmul-scatter over those
//! pairs. Coordinate arithmetic happens here, feature arithmetic on the tape,
//! so the training path and the standalone ops share one code path.

use crate::autodiff::{NodeId, OffsetPairs, Tape};
use crate::error::{SvxError, SvxResult};
use crate::matrix::{Matrix, Real};
use crate::voxel::{CoordIndex, Coordinate, SparseTensor};
use rand::Rng;
use std::rc::Rc;

/// 3×3×3 kernel offsets in lexicographic order; index 13 is the center.
pub fn offsets_cube3() -> Vec<[i32; 3]> {
    let mut out = Vec::with_capacity(27);
    for dx in -1..=1 {
        for dy in -1..=1 {
            for dz in -1..=1 {
                out.push([dx, dy, dz]);
            }
        }
    }
    out
}

/// 2×2×2 kernel offsets {0,1}³ in lexicographic order.
pub fn offsets_cube2() -> Vec<[i32; 3]> {
    let mut out = Vec::with_capacity(8);
    for dx in 0..=1 {
        for dy in 0..=1 {
            for dz in 0..=1 {
                out.push([dx, dy, dz]);
            }
        }
    }
    out
}

/// How output lattice coordinates relate to input lattice coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StrideRatio {
    /// Same lattice: input = output + offset.
    Same,
    /// Stride-2 downsample: input = 2·output + offset.
    Down,
    /// Stride-2 transposed upsample: output = 2·input + offset.
    Up,
}

/// Sparse connection table. Triples (input-row, output-row, offset-index)
/// sorted by (output-row, offset-index, input-row); `pairs` regroups the same
/// triples by offset for the fused tape op.
pub struct KernelMap {
    pub triples: Vec<(u32, u32, u16)>,
    pub offset_count: usize,
    pairs: OffsetPairs,
    out_rows: usize,
}

impl KernelMap {
    pub fn pairs(&self) -> OffsetPairs {
        Rc::clone(&self.pairs)
    }

    pub fn out_rows(&self) -> usize {
        self.out_rows
    }
}

fn offset_coord(c: Coordinate, o: [i32; 3], ratio: StrideRatio) -> Option<Coordinate> {
    match ratio {
        StrideRatio::Same => {
            let x = c.x as i64 + o[0] as i64;
            let y = c.y as i64 + o[1] as i64;
            let z = c.z as i64 + o[2] as i64;
            if x < 0 || y < 0 || z < 0 {
                None
            } else {
                Some(Coordinate::new(x as u32, y as u32, z as u32))
            }
        }
        StrideRatio::Down => Some(Coordinate::new(
            2 * c.x + o[0] as u32,
            2 * c.y + o[1] as u32,
            2 * c.z + o[2] as u32,
        )),
        StrideRatio::Up => {
            let x = c.x as i64 - o[0] as i64;
            let y = c.y as i64 - o[1] as i64;
            let z = c.z as i64 - o[2] as i64;
            if x < 0 || y < 0 || z < 0 || x % 2 != 0 || y % 2 != 0 || z % 2 != 0 {
                None
            } else {
                Some(Coordinate::new((x / 2) as u32, (y / 2) as u32, (z / 2) as u32))
            }
        }
    }
}

/// Enumerate every (input-row, output-row, offset) interaction. Both
/// coordinate lists must be canonical. Down expects offsets {0,1}³; Up
/// inverts the Down geometry.
pub fn build_kernel_map<T: Real>(
    input: &SparseTensor<T>,
    out_coords: &[Coordinate],
    offsets: &[[i32; 3]],
    ratio: StrideRatio,
) -> SvxResult<KernelMap> {
    build_kernel_map_coords(input.coords(), out_coords, offsets, ratio)
}

/// Coordinate-only variant for callers that plan connectivity before any
/// features exist.
pub fn build_kernel_map_coords(
    in_coords: &[Coordinate],
    out_coords: &[Coordinate],
    offsets: &[[i32; 3]],
    ratio: StrideRatio,
) -> SvxResult<KernelMap> {
    if matches!(ratio, StrideRatio::Down | StrideRatio::Up)
        && offsets.iter().any(|o| o.iter().any(|&v| v != 0 && v != 1))
    {
        return Err(SvxError::BadStrideRatio {
            detail: "stride-2 kernels use offsets from {0,1}^3".to_string(),
        });
    }
    let index = CoordIndex::from_coords(in_coords);
    let mut triples = Vec::new();
    let mut pairs: Vec<Vec<(u32, u32)>> = vec![Vec::new(); offsets.len()];
    for (j, &oc) in out_coords.iter().enumerate() {
        for (k, &o) in offsets.iter().enumerate() {
            let Some(ic) = offset_coord(oc, o, ratio) else { continue };
            if let Some(i) = index.lookup(ic) {
                triples.push((i as u32, j as u32, k as u16));
                pairs[k].push((i as u32, j as u32));
            }
        }
    }
    // built in (j, k) order with a unique i per (j, k): already sorted by
    // (output, offset, input)
    Ok(KernelMap {
        triples,
        offset_count: offsets.len(),
        pairs: Rc::new(pairs),
        out_rows: out_coords.len(),
    })
}

/// Kernel weights laid out (K·Cin)×Cout (row k·Cin+c holds offset k, input
/// channel c) plus a 1×Cout bias.
#[derive(Clone, Debug)]
pub struct ConvParams<T> {
    pub weights: Matrix<T>,
    pub bias: Matrix<T>,
}

impl<T: Real> ConvParams<T> {
    pub fn cin(&self, offset_count: usize) -> usize {
        self.weights.rows() / offset_count.max(1)
    }

    pub fn cout(&self) -> usize {
        self.bias.cols()
    }
}

/// Centered-uniform fan-in init: weights ±1/√(K·Cin), bias zero.
pub fn init_conv_params<T: Real, R: Rng>(
    rng: &mut R,
    offset_count: usize,
    cin: usize,
    cout: usize,
) -> ConvParams<T> {
    let bound = 1.0 / ((offset_count * cin) as f64).sqrt();
    let data: Vec<T> = (0..offset_count * cin * cout)
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    ConvParams {
        weights: Matrix::from_vec(offset_count * cin, cout, data).expect("sized above"),
        bias: Matrix::zeros(1, cout),
    }
}

/// Tape-side weight/bias handles for one convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvNodes {
    pub w: NodeId,
    pub b: NodeId,
}

/// Tape-side gain/bias handles for one normalization layer.
#[derive(Clone, Copy, Debug)]
pub struct NormNodes {
    pub gain: NodeId,
    pub bias: NodeId,
}

/// Emit one sparse convolution onto the tape.
pub fn conv_apply<T: Real>(
    tape: &mut Tape<T>,
    x: NodeId,
    nodes: ConvNodes,
    map: &KernelMap,
    out_rows: usize,
) -> SvxResult<NodeId> {
    let y = tape.gather_matmul_scatter(x, nodes.w, map.pairs(), out_rows)?;
    tape.row_add(y, nodes.b)
}

fn check_cin<T: Real>(
    op: &'static str,
    st: &SparseTensor<T>,
    params: &ConvParams<T>,
    offset_count: usize,
) -> SvxResult<()> {
    if params.weights.rows() != offset_count * st.channels()
        || params.weights.cols() != params.bias.cols()
    {
        return Err(SvxError::ShapeMismatch {
            op,
            expected: format!("{}x{} weights", offset_count * st.channels(), params.bias.cols()),
            got: format!("{}x{}", params.weights.rows(), params.weights.cols()),
        });
    }
    Ok(())
}

/// Sparsity-preserving 3³ convolution: outputs only at existing input sites.
pub fn submanifold_conv<T: Real>(
    st: &SparseTensor<T>,
    params: &ConvParams<T>,
) -> SvxResult<SparseTensor<T>> {
    let offsets = offsets_cube3();
    check_cin("submanifold_conv", st, params, offsets.len())?;
    let map = build_kernel_map(st, st.coords(), &offsets, StrideRatio::Same)?;
    let mut tape = Tape::new();
    let x = tape.leaf(st.features().clone());
    let w = tape.leaf(params.weights.clone());
    let b = tape.leaf(params.bias.clone());
    let y = conv_apply(&mut tape, x, ConvNodes { w, b }, &map, st.len())?;
    st.with_features(tape.value(y).clone())
}

/// Unique floor-halved output coordinates of a coordinate list, canonical.
pub fn halved_coords(coords: &[Coordinate]) -> Vec<Coordinate> {
    let mut out: Vec<Coordinate> = coords
        .iter()
        .map(|c| Coordinate::new(c.x / 2, c.y / 2, c.z / 2))
        .collect();
    // halving is monotone per axis but not lex-monotone: (0,0,3) < (0,1,0)
    // yet their halves compare the other way
    out.sort();
    out.dedup();
    out
}

/// Children 2q+o of each input coordinate, clipped to the grid, canonical.
pub fn doubled_coords(
    coords: &[Coordinate],
    dims: crate::voxel::Dims,
    child_stride: u32,
) -> Vec<Coordinate> {
    let mut out = Vec::with_capacity(coords.len() * 8);
    for &q in coords {
        for o in offsets_cube2() {
            let c = Coordinate::new(
                2 * q.x + o[0] as u32,
                2 * q.y + o[1] as u32,
                2 * q.z + o[2] as u32,
            );
            if dims.contains(c, child_stride) {
                out.push(c);
            }
        }
    }
    // children of distinct parents never collide, but interleaved parents can
    // emit out of order
    out.sort();
    out
}

/// Kernel-2 stride-2 downsampling conv; output stride doubles.
pub fn down_conv<T: Real>(
    st: &SparseTensor<T>,
    params: &ConvParams<T>,
) -> SvxResult<SparseTensor<T>> {
    let offsets = offsets_cube2();
    check_cin("down_conv", st, params, offsets.len())?;
    let out_coords = halved_coords(st.coords());
    let map = build_kernel_map(st, &out_coords, &offsets, StrideRatio::Down)?;
    let mut tape = Tape::new();
    let x = tape.leaf(st.features().clone());
    let w = tape.leaf(params.weights.clone());
    let b = tape.leaf(params.bias.clone());
    let y = conv_apply(&mut tape, x, ConvNodes { w, b }, &map, out_coords.len())?;
    SparseTensor::new(out_coords, tape.value(y).clone(), st.stride() * 2, st.dims())
}

/// Kernel-2 stride-2 transposed conv; output stride halves, support dilates
/// to the 2³ children of every input site.
pub fn up_conv<T: Real>(
    st: &SparseTensor<T>,
    params: &ConvParams<T>,
) -> SvxResult<SparseTensor<T>> {
    if st.stride() == 1 {
        return Err(SvxError::StrideFloor);
    }
    if st.stride() % 2 != 0 {
        return Err(SvxError::BadStrideRatio {
            detail: format!("stride {} not even", st.stride()),
        });
    }
    let offsets = offsets_cube2();
    check_cin("up_conv", st, params, offsets.len())?;
    let child_stride = st.stride() / 2;
    let out_coords = doubled_coords(st.coords(), st.dims(), child_stride);
    let map = build_kernel_map(st, &out_coords, &offsets, StrideRatio::Up)?;
    let mut tape = Tape::new();
    let x = tape.leaf(st.features().clone());
    let w = tape.leaf(params.weights.clone());
    let b = tape.leaf(params.bias.clone());
    let y = conv_apply(&mut tape, x, ConvNodes { w, b }, &map, out_coords.len())?;
    SparseTensor::new(out_coords, tape.value(y).clone(), child_stride, st.dims())
}

/// GroupNorm groups: preferred count clamped to the channel width.
pub fn effective_groups(channels: usize, preferred: usize) -> usize {
    preferred.min(channels).max(1)
}

/// Normalize features over all active voxels per channel group, then apply
/// gain/bias. An empty tensor passes through unchanged (no statistics exist).
pub fn group_norm<T: Real>(
    st: &SparseTensor<T>,
    gain: &Matrix<T>,
    bias: &Matrix<T>,
    groups: usize,
) -> SvxResult<SparseTensor<T>> {
    if st.is_empty() {
        return Ok(st.clone());
    }
    let mut tape = Tape::new();
    let x = tape.leaf(st.features().clone());
    let g = tape.leaf(gain.clone());
    let b = tape.leaf(bias.clone());
    let y = tape.group_norm(x, g, b, groups)?;
    st.with_features(tape.value(y).clone())
}

/// Parameters of one residual block: two 3³ convs with group norms, plus an
/// optional 1×1×1 projection when the widths differ.
#[derive(Clone, Debug)]
pub struct ResBlockParams<T> {
    pub conv1: ConvParams<T>,
    pub gn1_gain: Matrix<T>,
    pub gn1_bias: Matrix<T>,
    pub conv2: ConvParams<T>,
    pub gn2_gain: Matrix<T>,
    pub gn2_bias: Matrix<T>,
    pub proj: Option<ConvParams<T>>,
    pub groups: usize,
}

/// Tape-side handles mirroring ResBlockParams.
#[derive(Clone, Copy, Debug)]
pub struct ResBlockNodes {
    pub conv1: ConvNodes,
    pub gn1: NormNodes,
    pub conv2: ConvNodes,
    pub gn2: NormNodes,
    pub proj: Option<ConvNodes>,
}

/// Emit out = ReLU(skip(x) + GN(conv3(ReLU(GN(conv3(x)))))) onto the tape.
/// `map` is the same-lattice 3³ kernel map of the block's support; the
/// projection, when present, uses only the map's center offset semantics
/// (1×1×1), so it is a plain matmul plus bias.
pub fn res_block_apply<T: Real>(
    tape: &mut Tape<T>,
    x: NodeId,
    nodes: ResBlockNodes,
    map: &KernelMap,
    groups: usize,
) -> SvxResult<NodeId> {
    let rows = tape.shape(x).0;
    let c1 = conv_apply(tape, x, nodes.conv1, map, rows)?;
    let g1 = effective_groups(tape.shape(c1).1, groups);
    let n1 = tape.group_norm(c1, nodes.gn1.gain, nodes.gn1.bias, g1)?;
    let a1 = tape.relu(n1);
    let c2 = conv_apply(tape, a1, nodes.conv2, map, rows)?;
    let g2 = effective_groups(tape.shape(c2).1, groups);
    let n2 = tape.group_norm(c2, nodes.gn2.gain, nodes.gn2.bias, g2)?;
    let skip = match nodes.proj {
        Some(p) => {
            let lifted = tape.matmul(x, p.w)?;
            tape.row_add(lifted, p.b)?
        }
        None => x,
    };
    let sum = tape.add(skip, n2)?;
    Ok(tape.relu(sum))
}

/// Standalone residual block on a sparse tensor; sparsity preserved.
pub fn res_sparse_block<T: Real>(
    st: &SparseTensor<T>,
    params: &ResBlockParams<T>,
) -> SvxResult<SparseTensor<T>> {
    let offsets = offsets_cube3();
    check_cin("res_sparse_block", st, &params.conv1, offsets.len())?;
    if params.proj.is_none() && params.conv2.cout() != st.channels() {
        return Err(SvxError::ShapeMismatch {
            op: "res_sparse_block",
            expected: format!("{} output channels or a projection", st.channels()),
            got: format!("{}", params.conv2.cout()),
        });
    }
    let map = build_kernel_map(st, st.coords(), &offsets, StrideRatio::Same)?;
    let mut tape = Tape::new();
    let x = tape.leaf(st.features().clone());
    let nodes = ResBlockNodes {
        conv1: ConvNodes {
            w: tape.leaf(params.conv1.weights.clone()),
            b: tape.leaf(params.conv1.bias.clone()),
        },
        gn1: NormNodes {
            gain: tape.leaf(params.gn1_gain.clone()),
            bias: tape.leaf(params.gn1_bias.clone()),
        },
        conv2: ConvNodes {
            w: tape.leaf(params.conv2.weights.clone()),
            b: tape.leaf(params.conv2.bias.clone()),
        },
        gn2: NormNodes {
            gain: tape.leaf(params.gn2_gain.clone()),
            bias: tape.leaf(params.gn2_bias.clone()),
        },
        proj: params.proj.as_ref().map(|p| ConvNodes {
            w: tape.leaf(p.weights.clone()),
            b: tape.leaf(p.bias.clone()),
        }),
    };
    let groups = effective_groups(params.conv1.cout(), params.groups);
    let y = res_block_apply(&mut tape, x, nodes, &map, groups)?;
    st.with_features(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::{Dims, VoxelGrid};
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn random_sparse(
        rng: &mut StdRng,
        dims: Dims,
        stride: u32,
        max_active: usize,
        channels: usize,
    ) -> SparseTensor<f64> {
        let ext = dims.extent_at(stride);
        let mut grid = VoxelGrid::new(ext);
        let target = rng.gen_range(1..=max_active);
        for _ in 0..target {
            grid.set(
                rng.gen_range(0..ext.h),
                rng.gen_range(0..ext.w),
                rng.gen_range(0..ext.d),
                1,
            );
        }
        let coords = grid.active_coords();
        let feats: Vec<f64> =
            (0..coords.len() * channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
        SparseTensor::new(
            coords.clone(),
            Matrix::from_vec(coords.len(), channels, feats).unwrap(),
            stride,
            dims,
        )
        .unwrap()
    }

    fn random_conv(rng: &mut StdRng, k: usize, cin: usize, cout: usize) -> ConvParams<f64> {
        let mut p = init_conv_params::<f64, _>(rng, k, cin, cout);
        let bias: Vec<f64> = (0..cout).map(|_| rng.gen_range(-0.5..0.5)).collect();
        p.bias = Matrix::from_vec(1, cout, bias).unwrap();
        p
    }

    /// Dense reference: evaluate the convolution by direct coordinate
    /// arithmetic over zero-filled dense fields, no kernel maps involved.
    fn dense_oracle(
        st: &SparseTensor<f64>,
        params: &ConvParams<f64>,
        offsets: &[[i32; 3]],
        ratio: StrideRatio,
        out_coords: &[Coordinate],
    ) -> Matrix<f64> {
        let cin = st.channels();
        let cout = params.cout();
        let ext = st.dims().extent_at(st.stride());
        let mut dense = vec![0.0f64; (ext.voxels() as usize) * cin];
        for (row, &c) in st.coords().iter().enumerate() {
            for ch in 0..cin {
                let idx = (c.x as usize
                    + ext.h as usize * (c.y as usize + ext.w as usize * c.z as usize))
                    * cin
                    + ch;
                dense[idx] = st.features().get(row, ch);
            }
        }
        let fetch = |c: Coordinate, ch: usize| -> f64 {
            if (c.x as u64) < ext.h as u64 && (c.y as u64) < ext.w as u64 && (c.z as u64) < ext.d as u64 {
                dense[(c.x as usize
                    + ext.h as usize * (c.y as usize + ext.w as usize * c.z as usize))
                    * cin
                    + ch]
            } else {
                0.0
            }
        };
        let mut out = Matrix::zeros(out_coords.len(), cout);
        for (j, &oc) in out_coords.iter().enumerate() {
            for co in 0..cout {
                let mut acc = params.bias.get(0, co);
                for (k, &o) in offsets.iter().enumerate() {
                    let Some(ic) = offset_coord(oc, o, ratio) else { continue };
                    for ci in 0..cin {
                        acc += fetch(ic, ci) * params.weights.get(k * cin + ci, co);
                    }
                }
                out.set(j, co, acc);
            }
        }
        out
    }

    #[test]
    fn kernel_map_single_coord_center_only() {
        let st = SparseTensor::<f64>::new(
            vec![Coordinate::new(2, 2, 2)],
            Matrix::zeros(1, 1),
            1,
            Dims::new(5, 5, 5),
        )
        .unwrap();
        let map =
            build_kernel_map(&st, st.coords(), &offsets_cube3(), StrideRatio::Same).unwrap();
        assert_eq!(map.triples, vec![(0, 0, 13)]);
    }

    #[test]
    fn kernel_map_down_floor_membership() {
        let st = SparseTensor::<f64>::new(
            vec![Coordinate::new(0, 0, 0), Coordinate::new(1, 1, 1)],
            Matrix::zeros(2, 1),
            1,
            Dims::new(4, 4, 4),
        )
        .unwrap();
        let out = vec![Coordinate::new(0, 0, 0)];
        let map = build_kernel_map(&st, &out, &offsets_cube2(), StrideRatio::Down).unwrap();
        // offset index of (0,0,0) is 0, of (1,1,1) is 7
        assert_eq!(map.triples, vec![(0, 0, 0), (1, 0, 7)]);
    }

    #[test]
    fn kernel_map_matches_brute_force() {
        let mut rng = StdRng::seed_from_u64(21);
        for _ in 0..10 {
            let st = random_sparse(&mut rng, Dims::new(16, 16, 16), 1, 64, 1);
            let offsets = offsets_cube3();
            let map =
                build_kernel_map(&st, st.coords(), &offsets, StrideRatio::Same).unwrap();
            let mut brute = Vec::new();
            for (j, &oc) in st.coords().iter().enumerate() {
                for (k, &o) in offsets.iter().enumerate() {
                    for (i, &ic) in st.coords().iter().enumerate() {
                        if offset_coord(oc, o, StrideRatio::Same) == Some(ic) {
                            brute.push((i as u32, j as u32, k as u16));
                        }
                    }
                }
            }
            brute.sort_by_key(|&(i, j, k)| (j, k, i));
            assert_eq!(map.triples, brute);
            for w in map.triples.windows(2) {
                let a = (w[0].1, w[0].2, w[0].0);
                let b = (w[1].1, w[1].2, w[1].0);
                assert!(a < b, "triples out of order");
            }
        }
    }

    #[test]
    fn submanifold_single_voxel_center_weight() {
        let mut rng = StdRng::seed_from_u64(3);
        let params = random_conv(&mut rng, 27, 2, 3);
        let st = SparseTensor::new(
            vec![Coordinate::new(1, 1, 1)],
            Matrix::from_vec(1, 2, vec![0.5, -2.0]).unwrap(),
            1,
            Dims::new(4, 4, 4),
        )
        .unwrap();
        let out = submanifold_conv(&st, &params).unwrap();
        for co in 0..3 {
            let expect = params.bias.get(0, co)
                + 0.5 * params.weights.get(13 * 2, co)
                - 2.0 * params.weights.get(13 * 2 + 1, co);
            assert!((out.features().get(0, co) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn submanifold_distant_voxels_independent() {
        let mut rng = StdRng::seed_from_u64(4);
        let params = random_conv(&mut rng, 27, 1, 2);
        let a = SparseTensor::new(
            vec![Coordinate::new(0, 0, 0)],
            Matrix::from_vec(1, 1, vec![1.5]).unwrap(),
            1,
            Dims::new(8, 8, 8),
        )
        .unwrap();
        let both = SparseTensor::new(
            vec![Coordinate::new(0, 0, 0), Coordinate::new(4, 4, 4)],
            Matrix::from_vec(2, 1, vec![1.5, -0.7]).unwrap(),
            1,
            Dims::new(8, 8, 8),
        )
        .unwrap();
        let oa = submanifold_conv(&a, &params).unwrap();
        let ob = submanifold_conv(&both, &params).unwrap();
        for co in 0..2 {
            assert_eq!(oa.features().get(0, co), ob.features().get(0, co));
        }
    }

    #[test]
    fn conv_flavors_match_dense_oracle() {
        let mut rng = StdRng::seed_from_u64(9);
        for trial in 0..15 {
            let dims = Dims::new(
                rng.gen_range(4..=16),
                rng.gen_range(4..=16),
                rng.gen_range(4..=16),
            );
            let cin = rng.gen_range(1..4);
            let cout = rng.gen_range(1..4);

            // submanifold
            let st = random_sparse(&mut rng, dims, 1, 64, cin);
            let p = random_conv(&mut rng, 27, cin, cout);
            let got = submanifold_conv(&st, &p).unwrap();
            let want = dense_oracle(&st, &p, &offsets_cube3(), StrideRatio::Same, st.coords());
            assert!(
                got.features().max_abs_diff(&want).unwrap() <= 1e-5,
                "submanifold trial {trial}"
            );
            assert_eq!(got.coords(), st.coords(), "sparsity must be preserved");

            // down
            let p2 = random_conv(&mut rng, 8, cin, cout);
            let down = down_conv(&st, &p2).unwrap();
            let want =
                dense_oracle(&st, &p2, &offsets_cube2(), StrideRatio::Down, down.coords());
            assert!(
                down.features().max_abs_diff(&want).unwrap() <= 1e-5,
                "down trial {trial}"
            );
            assert_eq!(down.stride(), 2);
            let expect_coords = halved_coords(st.coords());
            assert_eq!(down.coords(), expect_coords.as_slice());

            // up (build an even-strided input first)
            let st2 = random_sparse(&mut rng, dims, 2, 32, cin);
            let p3 = random_conv(&mut rng, 8, cin, cout);
            let up = up_conv(&st2, &p3).unwrap();
            let want = dense_oracle(&st2, &p3, &offsets_cube2(), StrideRatio::Up, up.coords());
            assert!(
                up.features().max_abs_diff(&want).unwrap() <= 1e-5,
                "up trial {trial}"
            );
            assert_eq!(up.stride(), 1);
        }
    }

    #[test]
    fn down_floor_examples() {
        let mut rng = StdRng::seed_from_u64(5);
        let p = random_conv(&mut rng, 8, 1, 1);
        let st = SparseTensor::new(
            vec![Coordinate::new(5, 4, 7)],
            Matrix::from_vec(1, 1, vec![1.0]).unwrap(),
            1,
            Dims::new(8, 8, 8),
        )
        .unwrap();
        let down = down_conv(&st, &p).unwrap();
        assert_eq!(down.coords(), &[Coordinate::new(2, 2, 3)]);

        let st = SparseTensor::new(
            vec![Coordinate::new(0, 0, 0), Coordinate::new(1, 1, 1)],
            Matrix::from_vec(2, 1, vec![2.0, 3.0]).unwrap(),
            1,
            Dims::new(8, 8, 8),
        )
        .unwrap();
        let down = down_conv(&st, &p).unwrap();
        assert_eq!(down.coords(), &[Coordinate::new(0, 0, 0)]);
        let expect = p.bias.get(0, 0) + 2.0 * p.weights.get(0, 0) + 3.0 * p.weights.get(7, 0);
        assert!((down.features().get(0, 0) - expect).abs() < 1e-12);
    }

    #[test]
    fn up_dilates_and_never_collides() {
        let mut rng = StdRng::seed_from_u64(6);
        let p = random_conv(&mut rng, 8, 1, 1);
        let st = SparseTensor::new(
            vec![Coordinate::new(0, 0, 0)],
            Matrix::from_vec(1, 1, vec![1.0]).unwrap(),
            2,
            Dims::new(8, 8, 8),
        )
        .unwrap();
        let up = up_conv(&st, &p).unwrap();
        assert_eq!(up.len(), 8);

        let st = SparseTensor::new(
            vec![Coordinate::new(0, 0, 0), Coordinate::new(1, 0, 0)],
            Matrix::from_vec(2, 1, vec![1.0, 2.0]).unwrap(),
            2,
            Dims::new(8, 8, 8),
        )
        .unwrap();
        let up = up_conv(&st, &p).unwrap();
        assert_eq!(up.len(), 16);
        // each child receives exactly its parent's contribution through one offset
        for (j, &c) in up.coords().iter().enumerate() {
            let parent = Coordinate::new(c.x / 2, c.y / 2, c.z / 2);
            let prow = st.coords().iter().position(|&q| q == parent).unwrap();
            let k = ((c.x % 2) * 4 + (c.y % 2) * 2 + (c.z % 2)) as usize;
            let expect = p.bias.get(0, 0) + st.features().get(prow, 0) * p.weights.get(k, 0);
            assert!((up.features().get(j, 0) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn up_after_down_support_superset() {
        let mut rng = StdRng::seed_from_u64(8);
        for _ in 0..10 {
            let st = random_sparse(&mut rng, Dims::new(16, 16, 16), 2, 64, 1);
            let pd = random_conv(&mut rng, 8, 1, 1);
            let pu = random_conv(&mut rng, 8, 1, 1);
            let down = down_conv(&st, &pd).unwrap();
            let up = up_conv(&down, &pu).unwrap();
            let support = up.build_index();
            for &c in st.coords() {
                assert!(support.lookup(c).is_some(), "lost input coord {c:?}");
            }
        }
    }

    #[test]
    fn up_conv_at_stride_one_rejected() {
        let mut rng = StdRng::seed_from_u64(10);
        let p = random_conv(&mut rng, 8, 1, 1);
        let st = SparseTensor::new(
            vec![Coordinate::new(0, 0, 0)],
            Matrix::from_vec(1, 1, vec![1.0]).unwrap(),
            1,
            Dims::new(4, 4, 4),
        )
        .unwrap();
        assert!(matches!(up_conv(&st, &p), Err(SvxError::StrideFloor)));
    }

    #[test]
    fn group_norm_constant_features_give_bias() {
        let st = SparseTensor::new(
            vec![Coordinate::new(0, 0, 0), Coordinate::new(1, 1, 1)],
            Matrix::from_vec(2, 4, vec![3.0f64; 8]).unwrap(),
            1,
            Dims::new(4, 4, 4),
        )
        .unwrap();
        let gain = Matrix::from_vec(1, 4, vec![2.0, 2.0, 2.0, 2.0]).unwrap();
        let bias = Matrix::from_vec(1, 4, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let out = group_norm(&st, &gain, &bias, 2).unwrap();
        for r in 0..2 {
            for c in 0..4 {
                assert!((out.features().get(r, c) - bias.get(0, c)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn group_norm_statistics_oracle() {
        let mut rng = StdRng::seed_from_u64(12);
        let st = random_sparse(&mut rng, Dims::new(12, 12, 12), 1, 50, 8);
        let gain = Matrix::full(1, 8, 1.0);
        let bias = Matrix::zeros(1, 8);
        let out = group_norm(&st, &gain, &bias, 4).unwrap();
        let n = out.len();
        for grp in 0..4 {
            let mut vals = Vec::new();
            for r in 0..n {
                for c in grp * 2..(grp + 1) * 2 {
                    vals.push(out.features().get(r, c));
                }
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() <= 1e-5, "group {grp} mean {m}");
            assert!((v - 1.0).abs() <= 1e-3, "group {grp} var {v}");
        }
    }

    #[test]
    fn group_norm_empty_passthrough() {
        let st = SparseTensor::<f64>::new(Vec::new(), Matrix::zeros(0, 4), 1, Dims::new(4, 4, 4))
            .unwrap();
        let out = group_norm(&st, &Matrix::full(1, 4, 1.0), &Matrix::zeros(1, 4), 2).unwrap();
        assert_eq!(out.len(), 0);
    }

    #[test]
    fn res_block_zero_weights_is_relu() {
        let c = 4;
        let zero_conv = || ConvParams::<f64> {
            weights: Matrix::zeros(27 * c, c),
            bias: Matrix::zeros(1, c),
        };
        let params = ResBlockParams {
            conv1: zero_conv(),
            gn1_gain: Matrix::full(1, c, 1.0),
            gn1_bias: Matrix::zeros(1, c),
            conv2: zero_conv(),
            gn2_gain: Matrix::full(1, c, 1.0),
            gn2_bias: Matrix::zeros(1, c),
            proj: None,
            groups: 2,
        };
        let mut rng = StdRng::seed_from_u64(13);
        let st = random_sparse(&mut rng, Dims::new(8, 8, 8), 1, 20, c);
        let out = res_sparse_block(&st, &params).unwrap();
        for r in 0..st.len() {
            for ch in 0..c {
                let x = st.features().get(r, ch);
                assert_eq!(out.features().get(r, ch), x.max(0.0));
            }
        }
    }

    #[test]
    fn res_block_grad_check() {
        // Central differences lie in two situations: a ReLU input within eps
        // of its kink, and a structurally-zero gradient. With groups ==
        // channels (the case here: c = 2, groups = 2) each group holds one
        // channel, so the norm subtracts exactly the per-channel shift a conv
        // bias adds and the bias gradient is identically zero; finite
        // differences then measure pure rounding noise against the 1e-8
        // denominator floor. (Multi-channel groups do not absorb the bias:
        // it still moves channels relative to their group mean.) So: screen
        // candidate instances for kink clearance, and differentiate only the
        // live parameters, keeping the dead conv biases as constants.
        let c = 2;
        let margin = 5e-3;
        let mut seed = 14u64;
        let (st, params) = loop {
            let mut rng = StdRng::seed_from_u64(seed);
            let st = random_sparse(&mut rng, Dims::new(4, 4, 4), 1, 6, c);
            let params = ResBlockParams {
                conv1: init_conv_params::<f64, _>(&mut rng, 27, c, c),
                gn1_gain: Matrix::full(1, c, 1.0),
                gn1_bias: Matrix::zeros(1, c),
                conv2: init_conv_params::<f64, _>(&mut rng, 27, c, c),
                gn2_gain: Matrix::full(1, c, 1.0),
                gn2_bias: Matrix::zeros(1, c),
                proj: None,
                groups: 2,
            };
            let pre1 = group_norm(
                &submanifold_conv(&st, &params.conv1).unwrap(),
                &params.gn1_gain,
                &params.gn1_bias,
                2,
            )
            .unwrap();
            let a1 = pre1.with_features(pre1.features().map(|v| v.max(0.0))).unwrap();
            let pre2 = group_norm(
                &submanifold_conv(&a1, &params.conv2).unwrap(),
                &params.gn2_gain,
                &params.gn2_bias,
                2,
            )
            .unwrap();
            let final_pre = st.features().zip_map(pre2.features(), |a, b| a + b).unwrap();
            let min_abs = pre1
                .features()
                .data()
                .iter()
                .chain(final_pre.data())
                .fold(f64::INFINITY, |m, &v| m.min(v.abs()));
            if min_abs > margin {
                break (st, params);
            }
            seed += 1;
        };
        let map = build_kernel_map(&st, st.coords(), &offsets_cube3(), StrideRatio::Same).unwrap();
        let inputs = vec![
            st.features().clone(),
            params.conv1.weights.clone(),
            params.gn1_gain.clone(),
            params.gn1_bias.clone(),
            params.conv2.weights.clone(),
            params.gn2_gain.clone(),
            params.gn2_bias.clone(),
        ];
        let cb1 = params.conv1.bias.clone();
        let cb2 = params.conv2.bias.clone();
        let err = crate::autodiff::grad_check(
            move |t, ids| {
                let b1 = t.leaf(cb1.clone());
                let b2 = t.leaf(cb2.clone());
                let nodes = ResBlockNodes {
                    conv1: ConvNodes { w: ids[1], b: b1 },
                    gn1: NormNodes { gain: ids[2], bias: ids[3] },
                    conv2: ConvNodes { w: ids[4], b: b2 },
                    gn2: NormNodes { gain: ids[5], bias: ids[6] },
                    proj: None,
                };
                let y = res_block_apply(t, ids[0], nodes, &map, 2)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum_all(sq))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "res block grad err {err} (seed {seed})");
    }
}
