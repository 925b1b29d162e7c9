use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::geom::Cell;

/// Boolean walkability lattice used by every planner.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NavGrid {
    width: i32,
    height: i32,
    walkable: Vec<bool>,
}

impl NavGrid {
    pub fn new(width: i32, height: i32) -> NavGrid {
        NavGrid {
            width,
            height,
            walkable: vec![false; (width.max(0) * height.max(0)) as usize],
        }
    }

    /// Parses rows of `.` (free) and `#` (blocked); any other glyph is free.
    pub fn from_ascii(rows: &[&str]) -> NavGrid {
        let height = rows.len() as i32;
        let width = rows.iter().map(|r| r.len()).max().unwrap_or(0) as i32;
        let mut g = NavGrid::new(width, height);
        for (y, row) in rows.iter().enumerate() {
            for (x, ch) in row.chars().enumerate() {
                g.set(Cell::new(x as i32, y as i32), ch != '#');
            }
        }
        g
    }

    pub fn width(&self) -> i32 {
        self.width
    }

    pub fn height(&self) -> i32 {
        self.height
    }

    pub fn in_bounds(&self, c: Cell) -> bool {
        c.x >= 0 && c.y >= 0 && c.x < self.width && c.y < self.height
    }

    pub fn index(&self, c: Cell) -> usize {
        (c.y * self.width + c.x) as usize
    }

    pub fn is_free(&self, c: Cell) -> bool {
        self.in_bounds(c) && self.walkable[self.index(c)]
    }

    pub fn set(&mut self, c: Cell, free: bool) {
        if self.in_bounds(c) {
            let i = self.index(c);
            self.walkable[i] = free;
        }
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.height).flat_map(move |y| (0..self.width).map(move |x| Cell::new(x, y)))
    }

    pub fn free_cells(&self) -> impl Iterator<Item = Cell> + '_ {
        self.cells().filter(|&c| self.is_free(c))
    }

    /// 4-connected breadth-first distances from `start`; `None` for unreachable cells.
    pub fn distances_from(&self, start: Cell) -> Vec<Option<u32>> {
        let mut dist = vec![None; self.walkable.len()];
        if !self.is_free(start) {
            return dist;
        }
        let mut queue = VecDeque::new();
        dist[self.index(start)] = Some(0);
        queue.push_back(start);
        while let Some(c) = queue.pop_front() {
            let d = dist[self.index(c)].unwrap_or(0);
            for n in c.neighbors4() {
                if self.is_free(n) && dist[self.index(n)].is_none() {
                    dist[self.index(n)] = Some(d + 1);
                    queue.push_back(n);
                }
            }
        }
        dist
    }

    /// True when blocking `c` would disconnect two of its free neighbours.
    pub fn is_cut(&self, c: Cell) -> bool {
        let around: Vec<Cell> = c.neighbors4().into_iter().filter(|&n| self.is_free(n)).collect();
        if around.len() < 2 {
            return false;
        }
        let mut without = self.clone();
        without.set(c, false);
        let dist = without.distances_from(around[0]);
        around[1..].iter().any(|&n| dist[self.index(n)].is_none())
    }

    pub fn distance(&self, from: Cell, to: Cell) -> Option<u32> {
        if !self.is_free(to) {
            return None;
        }
        self.distances_from(from)[self.index(to)]
    }

    /// A shortest 4-connected cell path from `from` to `to`, inclusive of both ends.
    ///
    /// Neighbours are expanded North, East, South, West, so the result is deterministic.
    pub fn path(&self, from: Cell, to: Cell) -> Option<Vec<Cell>> {
        if !self.is_free(from) || !self.is_free(to) {
            return None;
        }
        let mut parent: Vec<Option<Cell>> = vec![None; self.walkable.len()];
        let mut seen = vec![false; self.walkable.len()];
        let mut queue = VecDeque::new();
        seen[self.index(from)] = true;
        queue.push_back(from);
        while let Some(c) = queue.pop_front() {
            if c == to {
                break;
            }
            for n in c.neighbors4() {
                if self.is_free(n) && !seen[self.index(n)] {
                    seen[self.index(n)] = true;
                    parent[self.index(n)] = Some(c);
                    queue.push_back(n);
                }
            }
        }
        if !seen[self.index(to)] {
            return None;
        }
        let mut path = vec![to];
        let mut cur = to;
        while cur != from {
            cur = parent[self.index(cur)]?;
            path.push(cur);
        }
        path.reverse();
        Some(path)
    }
}
