//! Square grid worlds with 2x2 obstacle blobs and 8-connected shortest paths.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

/// `(row, col)` grid coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell(pub usize, pub usize);

impl Cell {
    pub fn row(&self) -> usize {
        self.0
    }

    pub fn col(&self) -> usize {
        self.1
    }

    /// `row * size + col`.
    pub fn rasterize(&self, size: usize) -> usize {
        self.0 * size + self.1
    }

    pub fn from_raster(index: usize, size: usize) -> Self {
        Cell(index / size, index % size)
    }

    /// True when the two cells touch, diagonals included.
    pub fn is_adjacent(&self, other: &Cell) -> bool {
        let dr = self.0.abs_diff(other.0);
        let dc = self.1.abs_diff(other.1);
        dr <= 1 && dc <= 1 && (dr, dc) != (0, 0)
    }
}

/// Neighbour order used for BFS expansion: N, NE, E, SE, S, SW, W, NW.
pub const NEIGHBOURS: [(isize, isize); 8] = [
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
    (0, -1),
    (-1, -1),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grid {
    size: usize,
    blobs: Vec<Cell>,
    occupied: Vec<bool>,
}

impl Grid {
    pub fn empty(size: usize) -> Self {
        Self {
            size,
            blobs: Vec::new(),
            occupied: vec![false; size * size],
        }
    }

    /// Each blob marks the 2x2 block whose top-left corner it names,
    /// clipped at the grid boundary.
    pub fn with_blobs(size: usize, blobs: &[Cell]) -> Self {
        let mut grid = Self::empty(size);
        for &b in blobs {
            grid.add_blob(b);
        }
        grid
    }

    pub fn add_blob(&mut self, blob: Cell) {
        for dr in 0..2 {
            for dc in 0..2 {
                let (r, c) = (blob.0 + dr, blob.1 + dc);
                if r < self.size && c < self.size {
                    self.occupied[r * self.size + c] = true;
                }
            }
        }
        self.blobs.push(blob);
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn blobs(&self) -> &[Cell] {
        &self.blobs
    }

    pub fn contains(&self, cell: Cell) -> bool {
        cell.0 < self.size && cell.1 < self.size
    }

    pub fn is_occupied(&self, cell: Cell) -> bool {
        self.occupied[cell.rasterize(self.size)]
    }

    fn neighbours(&self, cell: Cell) -> impl Iterator<Item = Cell> + '_ {
        NEIGHBOURS.iter().filter_map(move |&(dr, dc)| {
            let r = cell.0.checked_add_signed(dr)?;
            let c = cell.1.checked_add_signed(dc)?;
            let next = Cell(r, c);
            (self.contains(next) && !self.is_occupied(next)).then_some(next)
        })
    }

    /// Breadth-first search over 8-connected free cells. Returns a shortest
    /// path including both endpoints, or `None` when `to` is unreachable or
    /// either endpoint is blocked.
    pub fn shortest_path(&self, from: Cell, to: Cell) -> Option<Vec<Cell>> {
        if !self.contains(from) || !self.contains(to) || self.is_occupied(from) || self.is_occupied(to)
        {
            return None;
        }
        let n = self.size * self.size;
        let mut parent = vec![usize::MAX; n];
        let start = from.rasterize(self.size);
        parent[start] = start;
        let mut queue = VecDeque::from([from]);
        while let Some(cell) = queue.pop_front() {
            if cell == to {
                break;
            }
            for next in self.neighbours(cell) {
                let idx = next.rasterize(self.size);
                if parent[idx] == usize::MAX {
                    parent[idx] = cell.rasterize(self.size);
                    queue.push_back(next);
                }
            }
        }
        let goal = to.rasterize(self.size);
        if parent[goal] == usize::MAX {
            return None;
        }
        let mut path = vec![to];
        let mut cur = goal;
        while cur != start {
            cur = parent[cur];
            path.push(Cell::from_raster(cur, self.size));
        }
        path.reverse();
        Some(path)
    }

    /// BFS distances (in moves) from `from` to every cell; `None` when unreachable.
    pub fn distances(&self, from: Cell) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.size * self.size];
        if !self.contains(from) || self.is_occupied(from) {
            return dist;
        }
        dist[from.rasterize(self.size)] = Some(0);
        let mut queue = VecDeque::from([from]);
        while let Some(cell) = queue.pop_front() {
            let d = dist[cell.rasterize(self.size)].unwrap();
            for next in self.neighbours(cell) {
                let idx = next.rasterize(self.size);
                if dist[idx].is_none() {
                    dist[idx] = Some(d + 1);
                    queue.push_back(next);
                }
            }
        }
        dist
    }

    /// Checks that `path` runs from `from` to `to` through free, pairwise
    /// adjacent cells.
    pub fn is_valid_path(&self, path: &[Cell], from: Cell, to: Cell) -> bool {
        path.first() == Some(&from)
            && path.last() == Some(&to)
            && path.iter().all(|&c| self.contains(c) && !self.is_occupied(c))
            && path.windows(2).all(|w| w[0].is_adjacent(&w[1]))
    }
}
