//! Spatial patch partitioning of videos and the chunk-level foreground matrix
//! derived from a segmentation map.

use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::pgm;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A video split into equally sized spatial patches, row-major over positions.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid<T: Scalar = f64> {
    pub patches: Vec<Tensor<T>>,
    /// (rows, cols) of patch positions.
    pub grid: (usize, usize),
    pub patch_size: usize,
    /// `[C, D, H, W]` of the tensor the grid reassembles into.
    pub source_shape: [usize; 4],
}

fn video_dims(shape: &[usize], op: &'static str) -> Result<[usize; 4]> {
    match shape {
        [c, d, h, w] => Ok([*c, *d, *h, *w]),
        _ => Err(Error::dim(op, format!("expected C×D×H×W, got {shape:?}"))),
    }
}

/// Flat gather indices taking a `C×D×H×W` video to `P×C×D×ph×pw` patches,
/// patches ordered row-major over the `rows×cols` grid.
pub fn partition_index(shape: [usize; 4], rows: usize, cols: usize) -> Vec<Option<usize>> {
    let [c, d, h, w] = shape;
    let (ph, pw) = (h / rows, w / cols);
    let mut idx = Vec::with_capacity(c * d * h * w);
    for r in 0..rows {
        for q in 0..cols {
            for ci in 0..c {
                for di in 0..d {
                    for y in 0..ph {
                        for x in 0..pw {
                            let (yy, xx) = (r * ph + y, q * pw + x);
                            idx.push(Some(((ci * d + di) * h + yy) * w + xx));
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Inverse of [`partition_index`]: gather indices taking `P×C×D×ph×pw`
/// patches back to the tiled `C×D×(rows·ph)×(cols·pw)` grid.
pub fn assemble_index(patch: [usize; 4], rows: usize, cols: usize) -> Vec<Option<usize>> {
    let [c, d, ph, pw] = patch;
    let (h, w) = (rows * ph, cols * pw);
    let per_patch = c * d * ph * pw;
    let mut idx = Vec::with_capacity(per_patch * rows * cols);
    for ci in 0..c {
        for di in 0..d {
            for yy in 0..h {
                for xx in 0..w {
                    let (r, y) = (yy / ph, yy % ph);
                    let (q, x) = (xx / pw, xx % pw);
                    let p = r * cols + q;
                    idx.push(Some(p * per_patch + ((ci * d + di) * ph + y) * pw + x));
                }
            }
        }
    }
    idx
}

fn apply_index<T: Scalar>(src: &[T], idx: &[Option<usize>]) -> Vec<T> {
    idx.iter().map(|i| i.map_or(T::zero(), |j| src[j])).collect()
}

/// Splits `x` (`C×D×H×W`) into `p×p` spatial patches.
pub fn partition_patches<T: Scalar>(x: &Tensor<T>, p: usize) -> Result<PatchGrid<T>> {
    let shape = video_dims(x.shape(), "partition_patches")?;
    let [c, d, h, w] = shape;
    if p == 0 || h % p != 0 || w % p != 0 {
        let up = |v: usize| if p == 0 { v } else { v.div_ceil(p) * p };
        return Err(Error::dim(
            "partition_patches",
            format!(
                "frame {h}×{w} is not divisible by patch size {p}; resize to {}×{}",
                up(h),
                up(w)
            ),
        ));
    }
    let (rows, cols) = (h / p, w / p);
    let flat = apply_index(x.data(), &partition_index(shape, rows, cols));
    let per = c * d * p * p;
    let patches = flat
        .chunks(per)
        .map(|ch| Tensor::from_parts(vec![c, d, p, p], ch.to_vec()))
        .collect();
    Ok(PatchGrid {
        patches,
        grid: (rows, cols),
        patch_size: p,
        source_shape: shape,
    })
}

/// Common `C×D×ph×pw` shape of every patch in the grid.
pub fn homogeneous_patch_shape<T: Scalar>(g: &PatchGrid<T>) -> Result<[usize; 4]> {
    let (rows, cols) = g.grid;
    if g.patches.len() != rows * cols {
        return Err(Error::Contract(format!(
            "grid {rows}×{cols} needs {} patches, has {}",
            rows * cols,
            g.patches.len()
        )));
    }
    let first = video_dims(g.patches[0].shape(), "merge_patches")?;
    if g.patches.iter().any(|p| p.shape() != first) {
        return Err(Error::Contract("patches in one grid have differing shapes".into()));
    }
    Ok(first)
}

/// Reassembles patches into one tensor in their original arrangement.
pub fn merge_patches<T: Scalar>(g: &PatchGrid<T>) -> Result<Tensor<T>> {
    let ps = homogeneous_patch_shape(g)?;
    let (rows, cols) = g.grid;
    let mut flat = Vec::with_capacity(ps.iter().product::<usize>() * rows * cols);
    for p in &g.patches {
        flat.extend_from_slice(p.data());
    }
    let out = apply_index(&flat, &assemble_index(ps, rows, cols));
    Ok(Tensor::from_parts(vec![ps[0], ps[1], rows * ps[2], cols * ps[3]], out))
}

/// Binary foreground mask, either one map per video (`H×W`) or per frame (`D×H×W`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegMap {
    frames: Option<usize>,
    height: usize,
    width: usize,
    mask: Vec<bool>,
}

impl SegMap {
    pub fn new(height: usize, width: usize, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != height * width || height == 0 || width == 0 {
            return Err(Error::dim("seg_map", format!("{} values for {height}×{width}", mask.len())));
        }
        Ok(Self {
            frames: None,
            height,
            width,
            mask,
        })
    }

    pub fn per_frame(frames: usize, height: usize, width: usize, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != frames * height * width || frames == 0 {
            return Err(Error::dim(
                "seg_map",
                format!("{} values for {frames}×{height}×{width}", mask.len()),
            ));
        }
        Ok(Self {
            frames: Some(frames),
            height,
            width,
            mask,
        })
    }

    /// From numeric values that must each be exactly 0 or 1.
    pub fn from_values(height: usize, width: usize, values: &[f64]) -> Result<Self> {
        let mask = values
            .iter()
            .map(|&v| {
                if v == 0.0 {
                    Ok(false)
                } else if v == 1.0 {
                    Ok(true)
                } else {
                    Err(Error::Contract(format!("segmentation value {v} is not 0 or 1")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(height, width, mask)
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            frames: None,
            height,
            width,
            mask: vec![value; height * width],
        }
    }

    pub fn frames(&self) -> Option<usize> {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn at(&self, frame: usize, y: usize, x: usize) -> bool {
        let f = if self.frames.is_some() { frame } else { 0 };
        self.mask[(f * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, frame: usize, y: usize, x: usize, on: bool) {
        let f = if self.frames.is_some() { frame } else { 0 };
        self.mask[(f * self.height + y) * self.width + x] = on;
    }

    pub fn is_background(&self) -> bool {
        !self.mask.iter().any(|&m| m)
    }

    pub fn foreground_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Collapses a per-frame map to one map by OR across frames.
    pub fn union(&self) -> SegMap {
        let Some(d) = self.frames else { return self.clone() };
        let n = self.height * self.width;
        let mask = (0..n).map(|i| (0..d).any(|f| self.mask[f * n + i])).collect();
        SegMap {
            frames: None,
            height: self.height,
            width: self.width,
            mask,
        }
    }

    /// Mask as a `[D, H, W]` tensor of 0/1 (static maps repeat over `depth`).
    pub fn to_tensor<T: Scalar>(&self, depth: usize) -> Tensor<T> {
        let (h, w) = (self.height, self.width);
        Tensor::from_fn(&[depth, h, w], |i| {
            let f = i / (h * w);
            let r = i % (h * w);
            if self.at(f, r / w, r % w) {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    /// Loads a P2/P5 graymap, foreground where `value / maxval >= 0.5`.
    pub fn from_pgm_bytes(bytes: &[u8]) -> Result<Self> {
        let g = pgm::parse(bytes)?;
        let thr = g.maxval as f64 * 0.5;
        let mask = g.pixels.iter().map(|&p| p as f64 >= thr).collect();
        Self::new(g.height, g.width, mask)
    }

    pub fn load_pgm(path: &Path) -> Result<Self> {
        Self::from_pgm_bytes(&std::fs::read(path)?)
    }

    /// CSV with one row per image row, values 0 or 1.
    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let row = line
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Parse(format!("bad segmentation value `{v}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Parse("ragged segmentation CSV".into()));
        }
        let flat: Vec<f64> = rows.concat();
        Self::from_values(rows.len(), width, &flat)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        Self::from_csv_str(&std::fs::read_to_string(path)?)
    }

    /// 8-bit P5 encoding of the (static) map: 255 foreground, 0 background.
    pub fn to_pgm_bytes(&self) -> Result<Vec<u8>> {
        let m = self.union();
        let px: Vec<u8> = m.mask.iter().map(|&b| if b { 255 } else { 0 }).collect();
        pgm::encode_p5(m.width, m.height, &px)
    }
}

/// Tiling of a segmentation map into chunks: `depth × rows × cols` regions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChunkLayout {
    pub depth: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ChunkLayout {
    pub fn spatial(rows: usize, cols: usize) -> Self {
        Self { depth: 1, rows, cols }
    }

    pub fn count(&self) -> usize {
        self.depth * self.rows * self.cols
    }

    pub fn index(&self, d: usize, r: usize, c: usize) -> usize {
        (d * self.rows + r) * self.cols + c
    }
}

/// The `Nc × E` zero/one matrix marking chunks that contain foreground.
///
/// Rows are constant, so only one flag per chunk is stored.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegPatchMatrix {
    flags: Vec<bool>,
    width: usize,
    layout: ChunkLayout,
}

impl SegPatchMatrix {
    pub fn from_flags(flags: Vec<bool>, width: usize, layout: ChunkLayout) -> Result<Self> {
        if flags.len() != layout.count() {
            return Err(Error::dim(
                "seg_patch_matrix",
                format!("{} flags for layout {layout:?}", flags.len()),
            ));
        }
        Ok(Self { flags, width, layout })
    }

    pub fn nc(&self) -> usize {
        self.flags.len()
    }

    pub fn e(&self) -> usize {
        self.width
    }

    pub fn layout(&self) -> ChunkLayout {
        self.layout
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn matrix<T: Scalar>(&self) -> Tensor<T> {
        let e = self.width;
        Tensor::from_fn(&[self.nc(), e], |i| if self.flags[i / e] { T::one() } else { T::zero() })
    }

    /// Rows selected by `chunk_of_token`, as a `[tokens, E]` tensor.
    pub fn rows_for<T: Scalar>(&self, chunk_of_token: &[usize]) -> Result<Tensor<T>> {
        let e = self.width;
        let mut data = Vec::with_capacity(chunk_of_token.len() * e);
        for &c in chunk_of_token {
            if c >= self.nc() {
                return Err(Error::Bounds { index: c, len: self.nc() });
            }
            let v = if self.flags[c] { T::one() } else { T::zero() };
            data.extend(std::iter::repeat_n(v, e));
        }
        Tensor::new(vec![chunk_of_token.len(), e], data)
    }
}

/// Builds the chunk matrix: a chunk's row is all ones when more than
/// `min_fraction` of its pixels are foreground (any pixel when 0).
pub fn patchify_segmap(seg: &SegMap, layout: ChunkLayout, e: usize, min_fraction: f64) -> Result<SegPatchMatrix> {
    let (h, w) = (seg.height(), seg.width());
    if layout.rows == 0 || layout.cols == 0 || h % layout.rows != 0 || w % layout.cols != 0 {
        return Err(Error::Contract(format!(
            "chunk grid {}×{} does not tile a {h}×{w} map",
            layout.rows, layout.cols
        )));
    }
    let frames = seg.frames().unwrap_or(1);
    let per_frame = seg.frames().is_some();
    if layout.depth == 0 || (per_frame && !frames.is_multiple_of(layout.depth)) {
        return Err(Error::Contract(format!(
            "{} depth chunks do not tile {frames} frames",
            layout.depth
        )));
    }
    let (ch, cw) = (h / layout.rows, w / layout.cols);
    let fpc = if per_frame { frames / layout.depth } else { 1 };
    let mut flags = Vec::with_capacity(layout.count());
    for d in 0..layout.depth {
        for r in 0..layout.rows {
            for c in 0..layout.cols {
                let mut on = 0usize;
                let mut total = 0usize;
                for f in 0..fpc {
                    let frame = if per_frame { d * fpc + f } else { 0 };
                    for y in r * ch..(r + 1) * ch {
                        for x in c * cw..(c + 1) * cw {
                            total += 1;
                            on += seg.at(frame, y, x) as usize;
                        }
                    }
                }
                let frac = on as f64 / total as f64;
                flags.push(on > 0 && frac >= min_fraction);
            }
        }
    }
    SegPatchMatrix::from_flags(flags, e, layout)
}

/// Row `chunk_index` of the matrix.
pub fn sample_m1<T: Scalar>(m: &SegPatchMatrix, chunk_index: usize) -> Result<Tensor<T>> {
    let flag = *m.flags.get(chunk_index).ok_or(Error::Bounds {
        index: chunk_index,
        len: m.nc(),
    })?;
    Ok(Tensor::full(&[m.width], if flag { T::one() } else { T::zero() }))
}

/// Re-bins onto a coarser tiling made of whole chunks and re-broadcasts to
/// `new_e`. A merged row is ones iff any constituent row was.
pub fn rescale_m1(m: &SegPatchMatrix, target: ChunkLayout, new_e: usize) -> Result<SegPatchMatrix> {
    let src = m.layout;
    let nested = |a: usize, b: usize| b > 0 && b <= a && a.is_multiple_of(b);
    if !(nested(src.depth, target.depth) && nested(src.rows, target.rows) && nested(src.cols, target.cols)) {
        return Err(Error::Contract(format!(
            "layout {target:?} is not a whole-chunk merge of {src:?}"
        )));
    }
    let (fd, fr, fc) = (src.depth / target.depth, src.rows / target.rows, src.cols / target.cols);
    let mut flags = vec![false; target.count()];
    for d in 0..src.depth {
        for r in 0..src.rows {
            for c in 0..src.cols {
                if m.flags[src.index(d, r, c)] {
                    flags[target.index(d / fd, r / fr, c / fc)] = true;
                }
            }
        }
    }
    SegPatchMatrix::from_flags(flags, new_e, target)
}

/// Maps each token of a `D×H×W` token grid to its chunk in `layout`, where
/// the chunk grid evenly divides the token grid.
pub fn chunk_of_tokens(grid: [usize; 3], layout: ChunkLayout) -> Result<Arc<[usize]>> {
    let [d, h, w] = grid;
    if d % layout.depth != 0 || h % layout.rows != 0 || w % layout.cols != 0 {
        return Err(Error::dim(
            "chunk_of_tokens",
            format!("token grid {grid:?} not divisible by chunk layout {layout:?}"),
        ));
    }
    let (sd, sh, sw) = (d / layout.depth, h / layout.rows, w / layout.cols);
    let mut out = Vec::with_capacity(d * h * w);
    for di in 0..d {
        for hi in 0..h {
            for wi in 0..w {
                out.push(layout.index(di / sd, hi / sh, wi / sw));
            }
        }
    }
    Ok(out.into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pixel_rule() {
        let mut seg = SegMap::filled(4, 4, false);
        seg.set(0, 0, 0, true);
        let m = patchify_segmap(&seg, ChunkLayout::spatial(2, 2), 3, 0.0).unwrap();
        let mat = m.matrix::<f64>();
        assert_eq!(
            mat.data(),
            &[1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]
        );
        assert_eq!(sample_m1::<f64>(&m, 0).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert!(matches!(sample_m1::<f64>(&m, 4), Err(Error::Bounds { index: 4, len: 4 })));
    }

    #[test]
    fn all_foreground_saturates_and_zero_matrix_samples_zero() {
        let seg = SegMap::filled(8, 8, true);
        let m = patchify_segmap(&seg, ChunkLayout::spatial(4, 4), 5, 0.0).unwrap();
        assert!(m.matrix::<f64>().data().iter().all(|&v| v == 1.0));
        let z = patchify_segmap(&SegMap::filled(8, 8, false), ChunkLayout::spatial(4, 4), 5, 0.0).unwrap();
        for i in 0..z.nc() {
            assert!(sample_m1::<f64>(&z, i).unwrap().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn min_fraction_threshold() {
        let mut seg = SegMap::filled(4, 4, false);
        seg.set(0, 0, 0, true);
        let m = patchify_segmap(&seg, ChunkLayout::spatial(2, 2), 1, 0.5).unwrap();
        assert!(!m.flags()[0]);
    }

    #[test]
    fn rescale_pairs() {
        let m = SegPatchMatrix::from_flags(vec![true, false, false, false], 2, ChunkLayout::spatial(1, 4)).unwrap();
        let r = rescale_m1(&m, ChunkLayout::spatial(1, 2), 6).unwrap();
        assert_eq!(r.flags(), &[true, false]);
        assert_eq!(r.e(), 6);
        assert_eq!(rescale_m1(&m, m.layout(), 2).unwrap(), m);
        assert!(matches!(
            rescale_m1(&m, ChunkLayout::spatial(1, 3), 2),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn non_binary_map_rejected() {
        assert!(matches!(
            SegMap::from_values(1, 2, &[0.0, 0.5]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn per_frame_chunks_or_across_frames() {
        let mut seg = SegMap::per_frame(4, 2, 2, vec![false; 16]).unwrap();
        seg.set(3, 1, 1, true);
        let m = patchify_segmap(&seg, ChunkLayout { depth: 2, rows: 1, cols: 1 }, 1, 0.0).unwrap();
        assert_eq!(m.flags(), &[false, true]);
    }

    #[test]
    fn indivisible_partition_suggests_resize() {
        let x = Tensor::<f64>::zeros(&[3, 2, 10, 12]);
        let err = partition_patches(&x, 4).unwrap_err().to_string();
        assert!(err.contains("12×12"), "{err}");
    }

    #[test]
    fn missing_patch_is_contract_error() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 4, 4], |i| i as f64);
        let mut g = partition_patches(&x, 2).unwrap();
        g.patches.pop();
        assert!(matches!(merge_patches(&g), Err(Error::Contract(_))));
    }

    #[test]
    fn csv_and_pgm_loaders() {
        let s = SegMap::from_csv_str("0,1\n1,0\n").unwrap();
        assert_eq!(s.mask(), &[false, true, true, false]);
        let p = SegMap::from_pgm_bytes(b"P2\n2 2\n10\n0 5\n4 10\n").unwrap();
        assert_eq!(p.mask(), &[false, true, false, true]);
        let round = SegMap::from_pgm_bytes(&s.to_pgm_bytes().unwrap()).unwrap();
        assert_eq!(round, s);
        assert!(SegMap::from_csv_str("0,2\n").is_err());
    }
}
