//! Spatial bags: a segment's cuboid cut into a grid of square cells.
//!
//! Instance `i` of a bag is grid cell `(i / cols, i % cols)`; the time axis
//! is never split.

use ndarray::{s, Array4};

use crate::error::{Error, Result};
use crate::feature_store::{Dims, FeatureCuboid, VideoLabel};

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub cell_row: usize,
    pub cell_col: usize,
    /// (C, T, cell, cell), copied out of the parent cuboid.
    pub data: Array4<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BagLabel {
    Positive,
    Negative,
}

impl From<VideoLabel> for BagLabel {
    fn from(label: VideoLabel) -> Self {
        match label {
            VideoLabel::Anomalous => BagLabel::Positive,
            VideoLabel::Normal => BagLabel::Negative,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub video_id: String,
    pub segment_index: u32,
    pub label: BagLabel,
    pub instances: Vec<Instance>,
}

impl Bag {
    pub fn from_cuboid(cuboid: &FeatureCuboid, label: VideoLabel, cell_size: usize) -> Result<Self> {
        Ok(Bag {
            video_id: cuboid.video_id.clone(),
            segment_index: cuboid.segment_index,
            label: label.into(),
            instances: split_cuboid(cuboid, cell_size)?,
        })
    }

    pub fn reassemble(&self, dims: Dims, cell_size: usize) -> Result<FeatureCuboid> {
        Ok(FeatureCuboid {
            video_id: self.video_id.clone(),
            segment_index: self.segment_index,
            data: reassemble(&self.instances, dims, cell_size)?,
        })
    }
}

/// Grid shape (rows, cols) for `dims` cut into `cell_size` squares.
pub fn grid_shape(dims: Dims, cell_size: usize) -> Result<(usize, usize)> {
    if cell_size == 0 {
        return Err(Error::Config("cell size must be positive".into()));
    }
    for (dim, size) in [("H", dims.height), ("W", dims.width)] {
        if size % cell_size != 0 {
            return Err(Error::NotDivisible {
                dim,
                size,
                cell: cell_size,
            });
        }
    }
    Ok((dims.height / cell_size, dims.width / cell_size))
}

pub fn split_cuboid(cuboid: &FeatureCuboid, cell_size: usize) -> Result<Vec<Instance>> {
    let (rows, cols) = grid_shape(cuboid.dims(), cell_size)?;
    let cs = cell_size;
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push(Instance {
                cell_row: r,
                cell_col: c,
                data: cuboid
                    .data
                    .slice(s![.., .., r * cs..(r + 1) * cs, c * cs..(c + 1) * cs])
                    .to_owned(),
            });
        }
    }
    Ok(out)
}

/// Inverse of [`split_cuboid`]. Placement follows each instance's cell tags,
/// not its position in the slice.
pub fn reassemble(instances: &[Instance], dims: Dims, cell_size: usize) -> Result<Array4<f32>> {
    let (rows, cols) = grid_shape(dims, cell_size)?;
    if instances.len() != rows * cols {
        return Err(Error::CountMismatch {
            expected: rows * cols,
            got: instances.len(),
        });
    }
    let cs = cell_size;
    let mut filled = vec![false; rows * cols];
    let mut out = Array4::<f32>::zeros(dims.as_tuple());
    for inst in instances {
        let (r, c) = (inst.cell_row, inst.cell_col);
        if r >= rows || c >= cols {
            return Err(Error::OutOfGrid {
                row: r,
                col: c,
                rows,
                cols,
            });
        }
        if inst.data.dim() != (dims.channels, dims.time, cs, cs) {
            return Err(Error::Shape(format!(
                "instance ({r}, {c}) has shape {:?}",
                inst.data.dim()
            )));
        }
        if std::mem::replace(&mut filled[r * cols + c], true) {
            return Err(Error::GridCollision { row: r, col: c });
        }
        out.slice_mut(s![.., .., r * cs..(r + 1) * cs, c * cs..(c + 1) * cs])
            .assign(&inst.data);
    }
    Ok(out)
}

/// Mapping between the feature grid and frame pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridGeometry {
    /// Square frame side in pixels.
    pub frame_size: u32,
    /// Spatial side of the feature map.
    pub feature_spatial: u32,
    /// Cell side in feature units.
    pub cell_size: u32,
}

impl Default for GridGeometry {
    fn default() -> Self {
        GridGeometry {
            frame_size: 224,
            feature_spatial: 14,
            cell_size: 2,
        }
    }
}

impl GridGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.frame_size == 0 || self.feature_spatial == 0 || self.cell_size == 0 {
            return Err(Error::Config("grid geometry values must be positive".into()));
        }
        if !self.frame_size.is_multiple_of(self.feature_spatial) {
            return Err(Error::Config(format!(
                "frame size {} not divisible by feature size {}",
                self.frame_size, self.feature_spatial
            )));
        }
        if !self.feature_spatial.is_multiple_of(self.cell_size) {
            return Err(Error::Config(format!(
                "feature size {} not divisible by cell size {}",
                self.feature_spatial, self.cell_size
            )));
        }
        Ok(())
    }

    pub fn cells_per_side(&self) -> u32 {
        self.feature_spatial / self.cell_size
    }

    pub fn cell_pixels(&self) -> u32 {
        self.frame_size / self.feature_spatial * self.cell_size
    }
}

/// Half-open pixel rectangle `[x_min, x_max) x [y_min, y_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PixelRegion {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl PixelRegion {
    pub fn intersects(&self, other: &PixelRegion) -> bool {
        self.x_min < other.x_max
            && other.x_min < self.x_max
            && self.y_min < other.y_max
            && other.y_min < self.y_max
    }

    pub fn area(&self) -> u64 {
        (self.x_max - self.x_min) as u64 * (self.y_max - self.y_min) as u64
    }
}

/// Pixel footprint of a grid cell; rows run along y, columns along x.
pub fn cell_to_pixel_region(cell_row: usize, cell_col: usize, geom: &GridGeometry) -> Result<PixelRegion> {
    geom.validate()?;
    let n = geom.cells_per_side() as usize;
    if cell_row >= n || cell_col >= n {
        return Err(Error::OutOfGrid {
            row: cell_row,
            col: cell_col,
            rows: n,
            cols: n,
        });
    }
    let side = geom.cell_pixels();
    let (x0, y0) = (cell_col as u32 * side, cell_row as u32 * side);
    Ok(PixelRegion {
        x_min: x0,
        y_min: y0,
        x_max: x0 + side,
        y_max: y0 + side,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use proptest::prelude::*;

    fn cuboid(data: Array4<f32>) -> FeatureCuboid {
        FeatureCuboid {
            video_id: "v".into(),
            segment_index: 0,
            data,
        }
    }

    #[test]
    fn default_dims_give_49_instances() {
        let c = cuboid(Array4::zeros((528, 4, 14, 14)));
        let inst = split_cuboid(&c, 2).unwrap();
        assert_eq!(inst.len(), 49);
        assert!(inst.iter().all(|i| i.data.dim() == (528, 4, 2, 2)));
        assert_eq!((inst[25].cell_row, inst[25].cell_col), (3, 4));
    }

    #[test]
    fn whole_cuboid_cell() {
        let c = cuboid(Array::from_shape_fn((3, 2, 4, 4), |(a, b, h, w)| (a * 100 + b * 10 + h * 4 + w) as f32));
        let inst = split_cuboid(&c, 4).unwrap();
        assert_eq!(inst.len(), 1);
        assert_eq!(inst[0].data, c.data);
    }

    #[test]
    fn position_index_split() {
        // value = spatial position h*W + w, replicated over channels
        let c = cuboid(Array::from_shape_fn((2, 1, 4, 4), |(_, _, h, w)| (h * 4 + w) as f32));
        let inst = split_cuboid(&c, 2).unwrap();
        assert_eq!(inst.len(), 4);
        for (i, instance) in inst.iter().enumerate() {
            let (r, col) = (i / 2, i % 2);
            for ch in 0..2 {
                for dh in 0..2 {
                    for dw in 0..2 {
                        let expected = ((r * 2 + dh) * 4 + col * 2 + dw) as f32;
                        assert_eq!(instance.data[[ch, 0, dh, dw]], expected);
                    }
                }
            }
        }
    }

    #[test]
    fn non_divisible_names_dimension() {
        let c = cuboid(Array4::zeros((1, 1, 14, 15)));
        match split_cuboid(&c, 2) {
            Err(Error::NotDivisible { dim: "W", size: 15, .. }) => {}
            other => panic!("{other:?}"),
        }
        let c = cuboid(Array4::zeros((1, 1, 7, 8)));
        assert!(matches!(split_cuboid(&c, 2), Err(Error::NotDivisible { dim: "H", .. })));
    }

    #[test]
    fn reassemble_errors() {
        let dims = Dims::new(2, 1, 4, 4);
        let c = cuboid(Array::from_shape_fn(dims.as_tuple(), |(a, _, h, w)| (a + h * w) as f32));
        let mut inst = split_cuboid(&c, 2).unwrap();
        assert!(matches!(
            reassemble(&inst[..3], dims, 2),
            Err(Error::CountMismatch { expected: 4, got: 3 })
        ));
        inst[3].cell_row = 0;
        inst[3].cell_col = 0;
        assert!(matches!(reassemble(&inst, dims, 2), Err(Error::GridCollision { row: 0, col: 0 })));
        inst[3].cell_row = 5;
        assert!(matches!(reassemble(&inst, dims, 2), Err(Error::OutOfGrid { .. })));
    }

    #[test]
    fn permuted_instances_reassemble() {
        let dims = Dims::new(3, 2, 6, 6);
        let c = cuboid(Array::from_shape_fn(dims.as_tuple(), |(a, b, h, w)| (a * 1000 + b * 100 + h * 10 + w) as f32));
        let mut inst = split_cuboid(&c, 2).unwrap();
        inst.reverse();
        inst.swap(1, 4);
        assert_eq!(reassemble(&inst, dims, 2).unwrap(), c.data);
    }

    #[test]
    fn pixel_regions_defaults() {
        let g = GridGeometry::default();
        let r = cell_to_pixel_region(0, 0, &g).unwrap();
        assert_eq!((r.x_min, r.y_min, r.x_max, r.y_max), (0, 0, 32, 32));
        let r = cell_to_pixel_region(6, 6, &g).unwrap();
        assert_eq!((r.x_min, r.y_min, r.x_max, r.y_max), (192, 192, 224, 224));
        let r = cell_to_pixel_region(2, 5, &g).unwrap();
        assert_eq!((r.x_min, r.y_min), (160, 64));
        let whole = GridGeometry { cell_size: 14, ..g };
        let r = cell_to_pixel_region(0, 0, &whole).unwrap();
        assert_eq!((r.x_min, r.y_min, r.x_max, r.y_max), (0, 0, 224, 224));
        assert!(matches!(cell_to_pixel_region(7, 0, &g), Err(Error::OutOfGrid { .. })));
    }

    #[test]
    fn pixel_regions_tile_frame() {
        for (frame, feat, cell) in [(224u32, 14u32, 2u32), (224, 14, 7), (64, 8, 1), (30, 6, 3)] {
            let g = GridGeometry {
                frame_size: frame,
                feature_spatial: feat,
                cell_size: cell,
            };
            let n = g.cells_per_side() as usize;
            let mut cover = vec![0u8; (frame * frame) as usize];
            for r in 0..n {
                for c in 0..n {
                    let reg = cell_to_pixel_region(r, c, &g).unwrap();
                    for y in reg.y_min..reg.y_max {
                        for x in reg.x_min..reg.x_max {
                            cover[(y * frame + x) as usize] += 1;
                        }
                    }
                }
            }
            assert!(cover.iter().all(|&k| k == 1));
        }
    }

    #[test]
    fn half_open_neighbours_do_not_intersect() {
        let g = GridGeometry::default();
        let a = cell_to_pixel_region(3, 3, &g).unwrap();
        let b = cell_to_pixel_region(3, 4, &g).unwrap();
        assert!(!a.intersects(&b));
        assert!(a.intersects(&a));
    }

    fn arb_config() -> impl Strategy<Value = (Dims, usize, u64)> {
        (1usize..4, 1usize..3, 1usize..5, 1usize..5, 1usize..4, any::<u64>())
            .prop_map(|(c, t, gh, gw, cell, seed)| (Dims::new(c, t, gh * cell, gw * cell), cell, seed))
    }

    fn seeded(dims: Dims, seed: u64) -> Array4<f32> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_fn(dims.as_tuple(), |_| rng.random_range(-5.0f32..5.0))
    }

    proptest! {
        #[test]
        fn split_tiles_and_inverts((dims, cell, seed) in arb_config()) {
            let c = cuboid(seeded(dims, seed));
            let inst = split_cuboid(&c, cell).unwrap();
            let (rows, cols) = grid_shape(dims, cell).unwrap();
            let mut cover = vec![0u8; dims.height * dims.width];
            for i in &inst {
                for h in i.cell_row * cell..(i.cell_row + 1) * cell {
                    for w in i.cell_col * cell..(i.cell_col + 1) * cell {
                        cover[h * dims.width + w] += 1;
                    }
                }
            }
            prop_assert!(cover.iter().all(|&k| k == 1));
            prop_assert_eq!(inst.len(), rows * cols);
            let back = reassemble(&inst, dims, cell).unwrap();
            prop_assert!(back.iter().zip(c.data.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }

        #[test]
        fn split_is_linear((dims, cell, seed) in arb_config()) {
            let a = seeded(dims, seed);
            let b = seeded(dims, seed.wrapping_add(1));
            let sa = split_cuboid(&cuboid(a.clone()), cell).unwrap();
            let sb = split_cuboid(&cuboid(b.clone()), cell).unwrap();
            let sab = split_cuboid(&cuboid(&a + &b), cell).unwrap();
            for ((x, y), z) in sa.iter().zip(&sb).zip(&sab) {
                prop_assert_eq!(&(&x.data + &y.data), &z.data);
            }
        }
    }
}
