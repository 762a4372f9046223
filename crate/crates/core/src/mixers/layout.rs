use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{MnoError, Result};
use crate::field::{Extent, GridField};

/// Order in which a path visits grid cells. Cell `(i, j)` has row-major index
/// `i * W + j`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanPath {
    RowMajor { reverse: bool },
    ColMajor { reverse: bool },
    /// `order[j]` is the row-major index of the cell visited `j`-th.
    Custom(Vec<usize>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeReduction {
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanLayout {
    pub height: usize,
    pub width: usize,
    pub paths: Vec<ScanPath>,
    pub merge: MergeReduction,
}

impl ScanLayout {
    pub fn new(height: usize, width: usize, paths: Vec<ScanPath>, merge: MergeReduction) -> Result<Self> {
        if paths.is_empty() {
            return Err(MnoError::invalid("a scan layout needs at least one path"));
        }
        let layout = ScanLayout { height, width, paths, merge };
        layout.permutations()?;
        Ok(layout)
    }

    /// Row-major forward plus row-major reverse, averaged on merge.
    pub fn bidirectional(height: usize, width: usize) -> Self {
        ScanLayout {
            height,
            width,
            paths: vec![ScanPath::RowMajor { reverse: false }, ScanPath::RowMajor { reverse: true }],
            merge: MergeReduction::Mean,
        }
    }

    /// Column-major forward plus column-major reverse.
    pub fn column_bidirectional(height: usize, width: usize) -> Self {
        ScanLayout {
            height,
            width,
            paths: vec![ScanPath::ColMajor { reverse: false }, ScanPath::ColMajor { reverse: true }],
            merge: MergeReduction::Mean,
        }
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// Visiting order of every path, validated to be a bijection on cells.
    pub fn permutations(&self) -> Result<Vec<Vec<usize>>> {
        self.paths.iter().map(|p| self.path_order(p)).collect()
    }

    fn path_order(&self, path: &ScanPath) -> Result<Vec<usize>> {
        let (h, w) = (self.height, self.width);
        let mut order: Vec<usize> = match path {
            ScanPath::RowMajor { .. } => (0..h * w).collect(),
            ScanPath::ColMajor { .. } => (0..w).flat_map(|j| (0..h).map(move |i| i * w + j)).collect(),
            ScanPath::Custom(order) => order.clone(),
        };
        if matches!(path, ScanPath::RowMajor { reverse: true } | ScanPath::ColMajor { reverse: true }) {
            order.reverse();
        }
        if order.len() != h * w {
            return Err(MnoError::invalid(format!("path visits {} cells but the grid has {}", order.len(), h * w)));
        }
        let mut seen = vec![false; h * w];
        for &c in &order {
            if c >= h * w || std::mem::replace(&mut seen[c], true) {
                return Err(MnoError::invalid(format!("path is not a bijection on grid cells (cell {c})")));
            }
        }
        Ok(order)
    }
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (j, &p) in perm.iter().enumerate() {
        inv[p] = j;
    }
    inv
}

/// Serialise a field along every path of `layout`; sequence `p` row `j` is
/// the channel vector of the cell visited `j`-th by path `p`.
pub fn scan_expand(field: &GridField, layout: &ScanLayout) -> Result<Vec<Array2<f64>>> {
    if field.height() != layout.height || field.width() != layout.width {
        return Err(MnoError::invalid(format!(
            "field is {}x{} but layout is {}x{}",
            field.height(),
            field.width(),
            layout.height,
            layout.width
        )));
    }
    let tokens = field.to_tokens();
    let perms = layout.permutations()?;
    Ok(perms
        .iter()
        .map(|perm| {
            let mut seq = Array2::zeros(tokens.dim());
            for (j, &cell) in perm.iter().enumerate() {
                seq.row_mut(j).assign(&tokens.row(cell));
            }
            seq
        })
        .collect())
}

/// Undo each path's ordering and reduce cellwise. The mean is accumulated
/// as a running mean, so identical copies merge back exactly.
pub fn scan_merge(sequences: &[Array2<f64>], layout: &ScanLayout) -> Result<GridField> {
    let perms = layout.permutations()?;
    if sequences.len() != perms.len() {
        return Err(MnoError::invalid(format!("{} sequences for {} paths", sequences.len(), perms.len())));
    }
    let cells = layout.cells();
    let channels = sequences[0].ncols();
    for s in sequences {
        if s.dim() != (cells, channels) {
            return Err(MnoError::invalid(format!("sequence shape {:?}, expected {:?}", s.dim(), (cells, channels))));
        }
    }
    let mut acc = Array2::<f64>::zeros((cells, channels));
    for (p, (seq, perm)) in sequences.iter().zip(&perms).enumerate() {
        for (j, &cell) in perm.iter().enumerate() {
            let mut row = acc.row_mut(cell);
            match layout.merge {
                MergeReduction::Sum => row += &seq.row(j),
                MergeReduction::Mean => {
                    let k = (p + 1) as f64;
                    row.zip_mut_with(&seq.row(j), |m, &v| *m += (v - *m) / k);
                }
            }
        }
    }
    let data: Array3<f64> = acc.into_shape_with_order((layout.height, layout.width, channels)).expect("grid reshape");
    GridField::new(data, Extent::UNIT, None)
}
