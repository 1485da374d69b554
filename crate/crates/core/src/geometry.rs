//! Image ↔ token-sequence geometry.
//!
//! Token layout convention used everywhere in this crate: a grid of
//! `h × w` positions with `e` channels is a row-major `[h·w, e]` matrix, so
//! an `h×w×e` image and a token sequence share one buffer layout. Inside a
//! soft-split token the `k×k` window is flattened row-major with each
//! pixel's `e` channels contiguous, giving width `e·k²`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Patch size `k`, overlap `s` and zero padding `p` of one unfold or fold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SoftSplitSpec {
    pub k: usize,
    pub s: usize,
    pub p: usize,
}

impl SoftSplitSpec {
    pub fn new(k: usize, s: usize, p: usize) -> Result<Self> {
        let spec = SoftSplitSpec { k, s, p };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k <= self.s {
            return Err(Error::InvalidSpec(format!(
                "overlap s={} must be smaller than patch size k={}",
                self.s, self.k
            )));
        }
        Ok(())
    }

    /// A stage that must shrink the token grid needs `s < k - 1`.
    pub fn validate_reducing(&self) -> Result<()> {
        self.validate()?;
        if self.s + 1 >= self.k {
            return Err(Error::InvalidSpec(format!(
                "stride k-s = {} does not reduce token length",
                self.k - self.s
            )));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.k - self.s
    }
}

/// Encoder soft-split schedule, `k = [7,3,3]`, `s = [3,1,1]`, `p = [2,1,1]`.
pub const ENCODER_SCHEDULE: [SoftSplitSpec; 3] = [
    SoftSplitSpec { k: 7, s: 3, p: 2 },
    SoftSplitSpec { k: 3, s: 1, p: 1 },
    SoftSplitSpec { k: 3, s: 1, p: 1 },
];

/// Decoder RT2T schedule, `k = [3,3,7]`, `s = [1,1,3]`, `p = [1,1,3]`.
pub const RT2T_SCHEDULE: [SoftSplitSpec; 3] = [
    SoftSplitSpec { k: 3, s: 1, p: 1 },
    SoftSplitSpec { k: 3, s: 1, p: 1 },
    SoftSplitSpec { k: 7, s: 3, p: 3 },
];

/// Output grid size along one axis: `⌊(h + 2p − k)/(k − s)⌋ + 1`.
pub fn ss_length(h_in: usize, spec: SoftSplitSpec) -> Result<usize> {
    spec.validate()?;
    let padded = h_in + 2 * spec.p;
    if padded < spec.k {
        return Err(Error::InvalidSpec(format!(
            "padded extent {padded} is smaller than the patch size {}",
            spec.k
        )));
    }
    Ok((padded - spec.k) / spec.stride() + 1)
}

/// A token sequence together with the grid it tiles.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSeq {
    tokens: Tensor,
    grid: (usize, usize),
}

impl TokenSeq {
    pub fn new(tokens: Tensor, grid: (usize, usize)) -> Result<Self> {
        let (l, _) = tokens.as_matrix("TokenSeq")?;
        if grid.0 == 0 || grid.1 == 0 || l != grid.0 * grid.1 {
            return Err(Error::dim("TokenSeq", tokens.shape(), &[grid.0, grid.1]));
        }
        Ok(TokenSeq { tokens, grid })
    }

    /// Wraps an `h×w×e` image as an `h·w`-token sequence.
    pub fn from_image(image: &Tensor) -> Result<Self> {
        match image.shape() {
            &[h, w, e] => TokenSeq::new(image.reshape([h * w, e])?, (h, w)),
            &[h, w] => TokenSeq::new(image.reshape([h * w, 1])?, (h, w)),
            other => Err(Error::Contract(format!(
                "expected an h×w×e image, got {other:?}"
            ))),
        }
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn len(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.cols()
    }

    /// Views the sequence as an `h×w×e` image.
    pub fn to_image(&self) -> Tensor {
        self.tokens
            .reshape([self.grid.0, self.grid.1, self.width()])
            .expect("grid matches token count")
    }
}

pub(crate) fn unfold_raw(
    src: &[f64],
    image: (usize, usize),
    channels: usize,
    spec: SoftSplitSpec,
) -> Result<(Vec<f64>, (usize, usize))> {
    let (h, w) = image;
    let gh = ss_length(h, spec)?;
    let gw = ss_length(w, spec)?;
    let (k, e) = (spec.k, channels);
    let width = e * k * k;
    let stride = spec.stride() as isize;
    let pad = spec.p as isize;
    let mut out = vec![0.0; gh * gw * width];
    for gi in 0..gh {
        for gj in 0..gw {
            let token = &mut out[(gi * gw + gj) * width..(gi * gw + gj + 1) * width];
            let y0 = gi as isize * stride - pad;
            let x0 = gj as isize * stride - pad;
            for ki in 0..k {
                let y = y0 + ki as isize;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for kj in 0..k {
                    let x = x0 + kj as isize;
                    if x < 0 || x >= w as isize {
                        continue;
                    }
                    let src_off = (y as usize * w + x as usize) * e;
                    let dst_off = (ki * k + kj) * e;
                    token[dst_off..dst_off + e].copy_from_slice(&src[src_off..src_off + e]);
                }
            }
        }
    }
    Ok((out, (gh, gw)))
}

pub(crate) fn fold_raw(
    src: &[f64],
    grid: (usize, usize),
    channels: usize,
    spec: SoftSplitSpec,
    target: (usize, usize),
) -> Result<Vec<f64>> {
    spec.validate()?;
    let (gh, gw) = grid;
    let (th, tw) = target;
    let (k, e) = (spec.k, channels);
    for (g, t, axis) in [(gh, th, "height"), (gw, tw, "width")] {
        let needed = (g.saturating_sub(1)) * spec.stride() + k;
        if t + 2 * spec.p < needed {
            return Err(Error::TargetGrid(format!(
                "{axis}: canvas {} (target {t} + 2·{}) cannot hold {g} patches of size {k} at stride {}",
                t + 2 * spec.p,
                spec.p,
                spec.stride()
            )));
        }
    }
    let width = e * k * k;
    let stride = spec.stride() as isize;
    let pad = spec.p as isize;
    let mut out = vec![0.0; th * tw * e];
    for gi in 0..gh {
        for gj in 0..gw {
            let token = &src[(gi * gw + gj) * width..(gi * gw + gj + 1) * width];
            let y0 = gi as isize * stride - pad;
            let x0 = gj as isize * stride - pad;
            for ki in 0..k {
                let y = y0 + ki as isize;
                if y < 0 || y >= th as isize {
                    continue;
                }
                for kj in 0..k {
                    let x = x0 + kj as isize;
                    if x < 0 || x >= tw as isize {
                        continue;
                    }
                    let dst_off = (y as usize * tw + x as usize) * e;
                    let src_off = (ki * k + kj) * e;
                    for c in 0..e {
                        out[dst_off + c] += token[src_off + c];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Overlapping unfold of an `h×w×e` image into `e·k²`-wide tokens.
pub fn soft_split(image: &Tensor, spec: SoftSplitSpec) -> Result<TokenSeq> {
    let seq = TokenSeq::from_image(image)?;
    let (data, grid) = unfold_raw(seq.tokens.data(), seq.grid, seq.width(), spec)?;
    let width = seq.width() * spec.k * spec.k;
    TokenSeq::new(Tensor::new([grid.0 * grid.1, width], data)?, grid)
}

/// Reverse T2T: scatters every token as a `k×k×e` patch onto a
/// `(h+2p)×(w+2p)` canvas at stride `k−s`, summing overlaps, then crops the
/// padding. Returns an `h×w×e` image.
pub fn rt2t_fold(
    seq: &TokenSeq,
    spec: SoftSplitSpec,
    target: (usize, usize),
    channels_out: usize,
) -> Result<Tensor> {
    if seq.width() != channels_out * spec.k * spec.k {
        return Err(Error::dim(
            "rt2t_fold",
            seq.tokens.shape(),
            &[seq.len(), channels_out * spec.k * spec.k],
        ));
    }
    let data = fold_raw(seq.tokens.data(), seq.grid, channels_out, spec, target)?;
    Tensor::new([target.0, target.1, channels_out], data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeKind {
    Spatial2d,
    Depth,
    Combined3d,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositionEncoding {
    pub table: Tensor,
    pub kind: PeKind,
}

/// Inverse frequency `1/10000^(2m/dim)`.
fn inv_freq(m: usize, dim: usize) -> f64 {
    1.0 / 10000f64.powf(2.0 * m as f64 / dim as f64)
}

/// 2D sinusoidal encoding of a grid: per axis `d/4` sines followed by `d/4`
/// cosines, x (column) block first, then y (row) block.
pub fn spatial_pe_2d(grid: (usize, usize), d: usize) -> Result<PositionEncoding> {
    if d == 0 || !d.is_multiple_of(4) {
        return Err(Error::Config(format!(
            "spatial encoding width {d} must be a positive multiple of 4"
        )));
    }
    let quarter = d / 4;
    let half = d / 2;
    let (h, w) = grid;
    let mut data = Vec::with_capacity(h * w * d);
    for i in 0..h {
        for j in 0..w {
            for pos in [j as f64, i as f64] {
                for m in 0..quarter {
                    data.push((pos * inv_freq(m, half)).sin());
                }
                for m in 0..quarter {
                    data.push((pos * inv_freq(m, half)).cos());
                }
            }
        }
    }
    Ok(PositionEncoding {
        table: Tensor::new([h * w, d], data)?,
        kind: PeKind::Spatial2d,
    })
}

/// A depth map normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    values: Tensor,
}

impl DepthMap {
    /// Wraps an `h×w` map whose entries already lie in `[0, 1]`.
    pub fn new(values: Tensor) -> Result<Self> {
        values.as_matrix("DepthMap")?;
        if values.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Contract("depth values must lie in [0, 1]".into()));
        }
        Ok(DepthMap { values })
    }

    /// Min-max normalizes a raw `h×w` map; a constant map becomes all zeros.
    pub fn normalize(raw: &Tensor) -> Result<Self> {
        raw.as_matrix("DepthMap")?;
        let lo = raw.data().iter().copied().fold(f64::INFINITY, f64::min);
        let hi = raw.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let values = if span > 0.0 {
            raw.map(|v| (v - lo) / span)
        } else {
            raw.map(|_| 0.0)
        };
        Ok(DepthMap { values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.values.shape()[0], self.values.shape()[1])
    }
}

/// Nearest-neighbour resize of an `h×w` map, sampling source index
/// `⌊i·h/h'⌋`.
pub fn resize_nearest(map: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let (h, w) = map.as_matrix("resize_nearest")?;
    let (th, tw) = target;
    let mut out = Vec::with_capacity(th * tw);
    for i in 0..th {
        let si = i * h / th;
        for j in 0..tw {
            let sj = j * w / tw;
            out.push(map.get(si, sj));
        }
    }
    Tensor::new([th, tw], out)
}

/// Discrete depth `⌈d·h_i⌉` for every grid position after resizing.
pub fn discretize_depth(depth: &DepthMap, grid: (usize, usize)) -> Result<Vec<f64>> {
    let resized = resize_nearest(depth.values(), grid)?;
    Ok(resized
        .data()
        .iter()
        .map(|v| (v * grid.0 as f64).ceil())
        .collect())
}

/// Unscaled depth encoding: `sin(dep/10000^(2m/d_model))` in channel `2m`
/// and the matching cosine in `2m+1`.
pub fn depth_pe_table(depth: &DepthMap, grid: (usize, usize), d_model: usize) -> Result<Tensor> {
    if d_model == 0 || !d_model.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "depth encoding width {d_model} must be a positive even number"
        )));
    }
    let deps = discretize_depth(depth, grid)?;
    let mut data = Vec::with_capacity(deps.len() * d_model);
    for dep in deps {
        for m in 0..d_model / 2 {
            let arg = dep * inv_freq(m, d_model);
            data.push(arg.sin());
            data.push(arg.cos());
        }
    }
    Tensor::new([grid.0 * grid.1, d_model], data)
}

/// Depth position encoding scaled by the level factor `z`.
pub fn depth_pe(
    depth: &DepthMap,
    grid: (usize, usize),
    d_model: usize,
    z: f64,
) -> Result<PositionEncoding> {
    Ok(PositionEncoding {
        table: depth_pe_table(depth, grid, d_model)?.scale(z),
        kind: PeKind::Depth,
    })
}

/// Channel-wise concatenation, spatial part first.
pub fn combine_3d(
    spatial: &PositionEncoding,
    depth: &PositionEncoding,
    d: usize,
) -> Result<PositionEncoding> {
    let (ls, ds) = spatial.table.as_matrix("combine_3d")?;
    let (lz, dz) = depth.table.as_matrix("combine_3d")?;
    if ls != lz {
        return Err(Error::dim(
            "combine_3d",
            spatial.table.shape(),
            depth.table.shape(),
        ));
    }
    if ds + dz != d {
        return Err(Error::Config(format!(
            "channel budget {ds} + {dz} does not equal {d}"
        )));
    }
    let mut data = Vec::with_capacity(ls * d);
    for r in 0..ls {
        data.extend_from_slice(spatial.table.row(r));
        data.extend_from_slice(depth.table.row(r));
    }
    Ok(PositionEncoding {
        table: Tensor::new([ls, d], data)?,
        kind: PeKind::Combined3d,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(k: usize, s: usize, p: usize) -> SoftSplitSpec {
        SoftSplitSpec::new(k, s, p).unwrap()
    }

    #[test]
    fn encoder_schedule_lengths_at_224() {
        let mut h = 224;
        let mut seen = vec![];
        for s in ENCODER_SCHEDULE {
            h = ss_length(h, s).unwrap();
            seen.push(h);
        }
        assert_eq!(seen, vec![56, 28, 14]);
    }

    #[test]
    fn schedule_lengths_at_64() {
        let mut h = 64;
        let mut seen = vec![];
        for s in ENCODER_SCHEDULE {
            h = ss_length(h, s).unwrap();
            seen.push(h);
        }
        assert_eq!(seen, vec![16, 8, 4]);
    }

    #[test]
    fn single_patch_length() {
        assert_eq!(ss_length(5, spec(5, 2, 0)).unwrap(), 1);
    }

    #[test]
    fn invalid_specs() {
        assert!(matches!(
            SoftSplitSpec::new(3, 3, 0),
            Err(Error::InvalidSpec(_))
        ));
        assert!(ss_length(2, spec(5, 0, 1)).is_err());
        assert!(spec(3, 2, 1).validate_reducing().is_err());
        assert!(spec(3, 1, 1).validate_reducing().is_ok());
    }

    #[test]
    fn soft_split_single_window_is_flattened_image() {
        let img = Tensor::new([2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let seq = soft_split(&img, spec(2, 0, 0)).unwrap();
        assert_eq!(seq.grid(), (1, 1));
        assert_eq!(seq.tokens().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn soft_split_zero_image() {
        let seq = soft_split(&Tensor::zeros([8, 8, 3]), spec(3, 1, 1)).unwrap();
        assert_eq!(seq.tokens().shape(), &[16, 27]);
        assert!(seq.tokens().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn soft_split_ramp_corner_window() {
        // 4×4 ramp with value r*4+c; k=3, s=1, p=1 gives a 2-stride 2×2
        // grid... (4+2-3)/2+1 = 2. Corner window origin is (-1,-1).
        let img = Tensor::new([4, 4, 1], (0..16).map(f64::from).collect::<Vec<_>>()).unwrap();
        let seq = soft_split(&img, spec(3, 1, 1)).unwrap();
        assert_eq!(seq.grid(), (2, 2));
        let corner = seq.tokens().row(0);
        assert_eq!(corner, &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 4.0, 5.0]);
        let last = seq.tokens().row(3);
        assert_eq!(last, &[5.0, 6.0, 7.0, 9.0, 10.0, 11.0, 13.0, 14.0, 15.0]);
    }

    #[test]
    fn fold_inverts_non_overlapping_split() {
        let img = Tensor::new(
            [4, 6, 2],
            (0..48).map(|v| v as f64 * 0.5).collect::<Vec<_>>(),
        )
        .unwrap();
        let s = spec(2, 0, 0);
        let seq = soft_split(&img, s).unwrap();
        let back = rt2t_fold(&seq, s, (4, 6), 2).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn one_hot_token_placement() {
        // 2×2 grid of 3×3 patches (k=3,s=1,p=1) folded onto 4×4: token (1,0)
        // has origin (1,-1) so its patch lands on rows 1..=3, cols 0..=1.
        let s = spec(3, 1, 1);
        let mut data = vec![0.0; 4 * 9];
        for (i, v) in data[2 * 9..3 * 9].iter_mut().enumerate() {
            *v = (i + 1) as f64;
        }
        let seq = TokenSeq::new(Tensor::new([4, 9], data).unwrap(), (2, 2)).unwrap();
        let out = rt2t_fold(&seq, s, (4, 4), 1).unwrap();
        let expected = [
            0.0, 0.0, 0.0, 0.0, //
            2.0, 3.0, 0.0, 0.0, //
            5.0, 6.0, 0.0, 0.0, //
            8.0, 9.0, 0.0, 0.0,
        ];
        assert_eq!(out.data(), &expected);
    }

    #[test]
    fn fold_rejects_small_canvas() {
        let seq = TokenSeq::new(Tensor::zeros([16, 9]), (4, 4)).unwrap();
        let err = rt2t_fold(&seq, spec(3, 1, 1), (4, 4), 1).unwrap_err();
        assert!(matches!(err, Error::TargetGrid(_)));
    }

    #[test]
    fn fold_to_known_encoder_grid() {
        // 14 → 28 with (3,1,1): the naive inverse gives 27, the caller
        // supplies 28.
        let seq = TokenSeq::new(Tensor::full([14 * 14, 9], 1.0), (14, 14)).unwrap();
        let out = rt2t_fold(&seq, spec(3, 1, 1), (28, 28), 1).unwrap();
        assert_eq!(out.shape(), &[28, 28, 1]);
    }

    #[test]
    fn spatial_pe_origin_and_range() {
        let pe = spatial_pe_2d((5, 7), 16).unwrap();
        assert_eq!(pe.kind, PeKind::Spatial2d);
        let row0 = pe.table.row(0);
        for axis in 0..2 {
            let base = axis * 8;
            assert!(row0[base..base + 4].iter().all(|&v| v == 0.0));
            assert!(row0[base + 4..base + 8].iter().all(|&v| v == 1.0));
        }
        assert!(pe.table.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(matches!(spatial_pe_2d((2, 2), 6), Err(Error::Config(_))));
    }

    #[test]
    fn spatial_pe_injective_on_16x16() {
        for d in [4, 8, 32] {
            let pe = spatial_pe_2d((16, 16), d).unwrap();
            for a in 0..256 {
                for b in a + 1..256 {
                    let diff: f64 = pe
                        .table
                        .row(a)
                        .iter()
                        .zip(pe.table.row(b))
                        .map(|(x, y)| (x - y).abs())
                        .sum();
                    assert!(diff > 1e-9, "rows {a} and {b} coincide for d={d}");
                }
            }
        }
    }

    #[test]
    fn depth_pe_constant_zero() {
        let depth = DepthMap::new(Tensor::zeros([8, 8])).unwrap();
        let pe = depth_pe(&depth, (4, 4), 6, 0.7).unwrap();
        for r in 0..16 {
            assert_eq!(pe.table.row(r), &[0.0, 0.7, 0.0, 0.7, 0.0, 0.7]);
        }
    }

    #[test]
    fn depth_pe_half_depth_on_8_grid() {
        let depth = DepthMap::new(Tensor::full([16, 16], 0.5)).unwrap();
        let d_model = 8;
        let pe = depth_pe(&depth, (8, 8), d_model, 1.0).unwrap();
        let mut expected = vec![];
        for m in 0..4 {
            let arg = 4.0 / 10000f64.powf(2.0 * m as f64 / 8.0);
            expected.push(arg.sin());
            expected.push(arg.cos());
        }
        for r in 0..64 {
            assert_eq!(pe.table.row(r), expected.as_slice());
        }
        assert_eq!(discretize_depth(&depth, (8, 8)).unwrap()[0], 4.0);
    }

    #[test]
    fn depth_pe_zero_scale_is_zero() {
        let depth = DepthMap::new(Tensor::full([4, 4], 0.3)).unwrap();
        let pe = depth_pe(&depth, (4, 4), 4, 0.0).unwrap();
        assert!(pe.table.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn depth_map_rejects_unnormalized() {
        assert!(matches!(
            DepthMap::new(Tensor::full([2, 2], 1.5)),
            Err(Error::Contract(_))
        ));
        let n = DepthMap::normalize(&Tensor::new([1, 3], vec![2.0, 4.0, 6.0]).unwrap()).unwrap();
        assert_eq!(n.values().data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn combine_shapes_and_rows() {
        let sp = spatial_pe_2d((2, 3), 8).unwrap();
        let depth = DepthMap::new(Tensor::full([2, 3], 0.25)).unwrap();
        let dp = depth_pe(&depth, (2, 3), 8, 1.0).unwrap();
        let c = combine_3d(&sp, &dp, 16).unwrap();
        assert_eq!(c.table.shape(), &[6, 16]);
        assert_eq!(c.kind, PeKind::Combined3d);
        for r in 0..6 {
            assert_eq!(&c.table.row(r)[..8], sp.table.row(r));
            assert_eq!(&c.table.row(r)[8..], dp.table.row(r));
        }
        let zero = depth_pe(&depth, (2, 3), 8, 0.0).unwrap();
        let cz = combine_3d(&sp, &zero, 16).unwrap();
        assert!(cz
            .table
            .data()
            .chunks(16)
            .all(|r| r[8..].iter().all(|&v| v == 0.0)));
        assert!(matches!(combine_3d(&sp, &dp, 12), Err(Error::Config(_))));
    }

    #[test]
    fn resize_nearest_doubles_by_replication() {
        let m = Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let up = resize_nearest(&m, (4, 4)).unwrap();
        assert_eq!(
            up.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }
}
