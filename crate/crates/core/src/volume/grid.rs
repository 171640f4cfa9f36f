use crate::error::{Error, Result};

/// Scalar types that can live in a [`VoxelGrid`].
pub trait Voxel: Copy + Default + PartialEq + Send + Sync + std::fmt::Debug + 'static {
    /// Whether the value is admissible as grid data (floats must be finite).
    fn is_admissible(self) -> bool {
        true
    }
}

impl Voxel for f32 {
    fn is_admissible(self) -> bool {
        self.is_finite()
    }
}

impl Voxel for u8 {}
impl Voxel for u32 {}

/// Grid extent in voxels along (x, y, z).
pub type Dims = [usize; 3];
/// Physical voxel size in millimetres along (x, y, z).
pub type Spacing = [f64; 3];

/// A dense 3D scalar field with physical spacing.
///
/// Data is stored flat in x-fastest order: the voxel `(x, y, z)` lives at
/// `x + nx * (y + ny * z)`. Axis 0 (x) is the sagittal axis.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid<T> {
    dims: Dims,
    spacing: Spacing,
    data: Vec<T>,
}

impl<T: Voxel> VoxelGrid<T> {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<T>) -> Result<Self> {
        check_geometry(dims, spacing)?;
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::invalid(format!(
                "grid data has {} values, dims {:?} need {}",
                data.len(),
                dims,
                n
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_admissible()) {
            return Err(Error::invalid(format!("non-finite value at voxel {i}")));
        }
        Ok(Self {
            dims,
            spacing,
            data,
        })
    }

    pub fn filled(dims: Dims, spacing: Spacing, value: T) -> Result<Self> {
        check_geometry(dims, spacing)?;
        Self::new(dims, spacing, vec![value; dims[0] * dims[1] * dims[2]])
    }

    pub fn from_fn(
        dims: Dims,
        spacing: Spacing,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Result<Self> {
        check_geometry(dims, spacing)?;
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, spacing, data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(x, y, z)]
    }

    /// Same dims and spacing.
    pub fn same_geometry<U>(&self, other: &VoxelGrid<U>) -> bool {
        self.dims == other.dims && self.spacing == other.spacing
    }

    /// Builds a grid of another type with identical geometry.
    pub fn map<U: Voxel>(&self, f: impl FnMut(T) -> U) -> VoxelGrid<U> {
        VoxelGrid {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().copied().map(f).collect(),
        }
    }

    /// Replaces the data, keeping geometry. Length and admissibility are checked.
    pub fn with_data<U: Voxel>(&self, data: Vec<U>) -> Result<VoxelGrid<U>> {
        VoxelGrid::new(self.dims, self.spacing, data)
    }
}

pub(crate) fn check_geometry(dims: Dims, spacing: Spacing) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::invalid(format!(
            "dims must be positive, got {dims:?}"
        )));
    }
    check_spacing(spacing)
}

pub(crate) fn check_spacing(spacing: Spacing) -> Result<()> {
    if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::invalid(format!(
            "spacing must be positive and finite, got {spacing:?}"
        )));
    }
    Ok(())
}
