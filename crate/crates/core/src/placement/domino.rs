//! Placement as a tiling of a 2-D device mesh by `tmp x dp` rectangles.
//!
//! Each rectangle ("domino") holds one pipeline stage's ranks. In the upright
//! orientation the rectangle is `tmp` rows by `dp` columns: a column is a TMP
//! group and a row is a DP group. A transposed domino is `dp` rows by `tmp`
//! columns with the roles swapped. Stages are numbered in the order dominos
//! are laid down (first uncovered cell in row-major order).

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PlanError, Result};
use crate::scalar::Scalar;
use crate::types::{Cluster, ParallelismDegrees, Placement};

/// Search-node budget for the backtracking sampler.
const MAX_STEPS: usize = 200_000;

/// Devices laid out row-major on a `rows x cols` mesh.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceGrid {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<usize>,
}

impl DeviceGrid {
    #[inline]
    pub fn at(&self, row: usize, col: usize) -> usize {
        self.cells[row * self.cols + col]
    }
}

/// Most-square factorisation `rows x cols` with `rows <= cols`.
pub fn square_shape(n: usize) -> (usize, usize) {
    let mut rows = 1;
    let mut r = 1;
    while r * r <= n {
        if n.is_multiple_of(r) {
            rows = r;
        }
        r += 1;
    }
    (rows, n / rows)
}

/// Lays devices out so node-mates are adjacent: whole rows per node when node
/// size equals the row length, whole columns when it equals the column
/// height, otherwise a row-wise snake over devices sorted by node.
pub fn device_grid<T: Scalar>(cluster: &Cluster<T>) -> DeviceGrid {
    let (rows, cols) = square_shape(cluster.num_devices());
    let nodes = cluster.nodes();
    let order: Vec<usize> = nodes.iter().flatten().copied().collect();
    let mut cells = vec![0; rows * cols];
    if nodes.iter().all(|n| n.len() == cols) {
        cells.copy_from_slice(&order);
    } else if nodes.iter().all(|n| n.len() == rows) {
        for (i, &dev) in order.iter().enumerate() {
            let (col, row) = (i / rows, i % rows);
            cells[row * cols + col] = dev;
        }
    } else {
        for (i, &dev) in order.iter().enumerate() {
            let (row, k) = (i / cols, i % cols);
            let col = if row % 2 == 0 { k } else { cols - 1 - k };
            cells[row * cols + col] = dev;
        }
    }
    DeviceGrid { rows, cols, cells }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Orientation {
    /// `tmp` rows by `dp` columns.
    Upright,
    /// `dp` rows by `tmp` columns.
    Transposed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Domino {
    pub row: usize,
    pub col: usize,
    pub orientation: Orientation,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DominoTiling {
    pub rows: usize,
    pub cols: usize,
    pub degrees: ParallelismDegrees,
    /// One domino per pipeline stage, in stage order.
    pub dominos: Vec<Domino>,
}

fn extent(d: ParallelismDegrees, o: Orientation) -> (usize, usize) {
    match o {
        Orientation::Upright => (d.tmp, d.dp),
        Orientation::Transposed => (d.dp, d.tmp),
    }
}

impl DominoTiling {
    /// Grid cells `(row, col)` of the rank `(replica, shard)` inside a domino.
    fn cell(&self, dom: &Domino, replica: usize, shard: usize) -> (usize, usize) {
        match dom.orientation {
            Orientation::Upright => (dom.row + shard, dom.col + replica),
            Orientation::Transposed => (dom.row + replica, dom.col + shard),
        }
    }

    /// Checks disjointness, exact cover, domino count and sizes.
    pub fn check(&self) -> std::result::Result<(), String> {
        let d = self.degrees;
        if self.rows * self.cols != d.world_size() {
            return Err(format!(
                "grid {}x{} does not hold {} ranks",
                self.rows,
                self.cols,
                d.world_size()
            ));
        }
        if self.dominos.len() != d.pp {
            return Err(format!("{} dominos for pp = {}", self.dominos.len(), d.pp));
        }
        let mut covered = vec![false; self.rows * self.cols];
        for dom in &self.dominos {
            let (h, w) = extent(d, dom.orientation);
            if dom.row + h > self.rows || dom.col + w > self.cols {
                return Err(format!(
                    "domino at ({}, {}) leaves the grid",
                    dom.row, dom.col
                ));
            }
            for r in dom.row..dom.row + h {
                for c in dom.col..dom.col + w {
                    if std::mem::replace(&mut covered[r * self.cols + c], true) {
                        return Err(format!("cell ({r}, {c}) covered twice"));
                    }
                }
            }
        }
        if covered.iter().all(|&c| c) {
            Ok(())
        } else {
            Err("tiling leaves cells uncovered".into())
        }
    }

    pub fn to_placement(&self, grid: &DeviceGrid) -> Placement {
        let d = self.degrees;
        let mut rank_to_device = vec![usize::MAX; d.world_size()];
        for (stage, dom) in self.dominos.iter().enumerate() {
            for replica in 0..d.dp {
                for shard in 0..d.tmp {
                    let (r, c) = self.cell(dom, replica, shard);
                    rank_to_device[d.rank_index(stage, replica, shard)] = grid.at(r, c);
                }
            }
        }
        Placement::new(rank_to_device)
    }
}

struct Sampler<'r, R> {
    rows: usize,
    cols: usize,
    degrees: ParallelismDegrees,
    orientations: Vec<Orientation>,
    covered: Vec<bool>,
    placed: Vec<Domino>,
    steps: usize,
    rng: &'r mut R,
}

impl<R: Rng> Sampler<'_, R> {
    fn fits(&self, row: usize, col: usize, o: Orientation) -> bool {
        let (h, w) = extent(self.degrees, o);
        if row + h > self.rows || col + w > self.cols {
            return false;
        }
        (row..row + h).all(|r| (col..col + w).all(|c| !self.covered[r * self.cols + c]))
    }

    fn mark(&mut self, row: usize, col: usize, o: Orientation, value: bool) {
        let (h, w) = extent(self.degrees, o);
        for r in row..row + h {
            for c in col..col + w {
                self.covered[r * self.cols + c] = value;
            }
        }
    }

    fn search(&mut self, from: usize) -> bool {
        let Some(first) = (from..self.covered.len()).find(|&i| !self.covered[i]) else {
            return true;
        };
        self.steps += 1;
        if self.steps > MAX_STEPS {
            return false;
        }
        let (row, col) = (first / self.cols, first % self.cols);
        let mut options = self.orientations.clone();
        options.shuffle(self.rng);
        for o in options {
            if !self.fits(row, col, o) {
                continue;
            }
            self.mark(row, col, o, true);
            self.placed.push(Domino {
                row,
                col,
                orientation: o,
            });
            if self.search(first + 1) {
                return true;
            }
            self.placed.pop();
            self.mark(row, col, o, false);
        }
        false
    }
}

/// Random valid tiling by randomized backtracking; deterministic for a given RNG state.
pub fn sample_domino_tiling<R: Rng>(
    degrees: ParallelismDegrees,
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> Result<DominoTiling> {
    if rows * cols != degrees.world_size() {
        return Err(PlanError::Infeasible(format!(
            "{rows}x{cols} grid cannot hold {} ranks",
            degrees.world_size()
        )));
    }
    let mut orientations = vec![Orientation::Upright];
    if degrees.tmp != degrees.dp {
        orientations.push(Orientation::Transposed);
    }
    let mut sampler = Sampler {
        rows,
        cols,
        degrees,
        orientations,
        covered: vec![false; rows * cols],
        placed: Vec::with_capacity(degrees.pp),
        steps: 0,
        rng,
    };
    if sampler.search(0) {
        Ok(DominoTiling {
            rows,
            cols,
            degrees,
            dominos: sampler.placed,
        })
    } else {
        Err(PlanError::Infeasible(format!(
            "no tiling of a {rows}x{cols} grid by {}x{} dominos",
            degrees.tmp, degrees.dp
        )))
    }
}
