use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid cell; one unit is 0.25 m.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "[i32; 2]", into = "[i32; 2]")]
pub struct Cell {
    pub x: i32,
    pub y: i32,
}

impl Cell {
    pub const fn new(x: i32, y: i32) -> Cell {
        Cell { x, y }
    }

    pub fn offset(self, dx: i32, dy: i32) -> Cell {
        Cell::new(self.x + dx, self.y + dy)
    }

    pub fn dist(self, other: Cell) -> f64 {
        (self.dist_sq(other) as f64).sqrt()
    }

    pub fn dist_sq(self, other: Cell) -> i64 {
        let dx = (self.x - other.x) as i64;
        let dy = (self.y - other.y) as i64;
        dx * dx + dy * dy
    }

    pub fn neighbors4(self) -> [Cell; 4] {
        [
            self.offset(0, -1),
            self.offset(1, 0),
            self.offset(0, 1),
            self.offset(-1, 0),
        ]
    }
}

impl From<[i32; 2]> for Cell {
    fn from([x, y]: [i32; 2]) -> Cell {
        Cell { x, y }
    }
}

impl From<Cell> for [i32; 2] {
    fn from(c: Cell) -> [i32; 2] {
        [c.x, c.y]
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

/// Inclusive axis-aligned rectangle of cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[i32; 4]", into = "[i32; 4]")]
pub struct Rect {
    pub x0: i32,
    pub y0: i32,
    pub x1: i32,
    pub y1: i32,
}

impl Rect {
    pub fn point(c: Cell) -> Rect {
        Rect {
            x0: c.x,
            y0: c.y,
            x1: c.x,
            y1: c.y,
        }
    }

    pub fn contains(&self, c: Cell) -> bool {
        c.x >= self.x0 && c.x <= self.x1 && c.y >= self.y0 && c.y <= self.y1
    }

    pub fn is_valid(&self) -> bool {
        self.x0 <= self.x1 && self.y0 <= self.y1
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (self.y0..=self.y1).flat_map(move |y| (self.x0..=self.x1).map(move |x| Cell::new(x, y)))
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.x0 <= other.x1 && other.x0 <= self.x1 && self.y0 <= other.y1 && other.y0 <= self.y1
    }
}

impl From<[i32; 4]> for Rect {
    fn from([x0, y0, x1, y1]: [i32; 4]) -> Rect {
        Rect { x0, y0, x1, y1 }
    }
}

impl From<Rect> for [i32; 4] {
    fn from(r: Rect) -> [i32; 4] {
        [r.x0, r.y0, r.x1, r.y1]
    }
}

/// Heading in degrees. North is `-y`, East is `+x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "i32", into = "i32")]
pub enum Heading {
    North,
    East,
    South,
    West,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::North, Heading::East, Heading::South, Heading::West];

    pub fn degrees(self) -> i32 {
        self.quarter() as i32 * 90
    }

    pub fn quarter(self) -> u8 {
        match self {
            Heading::North => 0,
            Heading::East => 1,
            Heading::South => 2,
            Heading::West => 3,
        }
    }

    pub fn from_quarter(q: i32) -> Heading {
        Heading::ALL[q.rem_euclid(4) as usize]
    }

    pub fn from_degrees(deg: i32) -> Result<Heading> {
        if deg.rem_euclid(90) != 0 {
            return Err(Error::Domain(format!("rotation {deg} is not a multiple of 90")));
        }
        Ok(Heading::from_quarter(deg / 90))
    }

    pub fn right(self) -> Heading {
        Heading::from_quarter(self.quarter() as i32 + 1)
    }

    pub fn left(self) -> Heading {
        Heading::from_quarter(self.quarter() as i32 + 3)
    }

    /// Unit step `(dx, dy)` along this heading.
    pub fn vector(self) -> (i32, i32) {
        match self {
            Heading::North => (0, -1),
            Heading::East => (1, 0),
            Heading::South => (0, 1),
            Heading::West => (-1, 0),
        }
    }

    /// Clockwise rotation in degrees taking `self` to `to`, in `{0, 90, 180, 270}`.
    pub fn delta_to(self, to: Heading) -> u16 {
        ((to.quarter() as i32 - self.quarter() as i32).rem_euclid(4) * 90) as u16
    }

    pub fn rotated(self, delta_degrees: u16) -> Heading {
        Heading::from_quarter(self.quarter() as i32 + delta_degrees as i32 / 90)
    }

    /// Heading whose direction best matches `(dx, dy)`; ties prefer the lowest quarter.
    pub fn facing(dx: i32, dy: i32) -> Heading {
        let mut best = Heading::North;
        let mut best_dot = i32::MIN;
        for h in Heading::ALL {
            let (hx, hy) = h.vector();
            let dot = hx * dx + hy * dy;
            if dot > best_dot {
                best = h;
                best_dot = dot;
            }
        }
        best
    }
}

impl TryFrom<i32> for Heading {
    type Error = Error;

    fn try_from(deg: i32) -> Result<Heading> {
        match deg {
            0 | 90 | 180 | 270 => Heading::from_degrees(deg),
            _ => Err(Error::Domain(format!("rotation {deg} not in {{0, 90, 180, 270}}"))),
        }
    }
}

impl From<Heading> for i32 {
    fn from(h: Heading) -> i32 {
        h.degrees()
    }
}

/// Camera pitch. Negative looks down.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "i32", into = "i32")]
pub enum Pitch {
    Down,
    Level,
    Up,
}

impl Pitch {
    pub fn degrees(self) -> i32 {
        match self {
            Pitch::Down => -30,
            Pitch::Level => 0,
            Pitch::Up => 30,
        }
    }

    pub fn raised(self) -> Pitch {
        match self {
            Pitch::Down => Pitch::Level,
            _ => Pitch::Up,
        }
    }

    pub fn lowered(self) -> Pitch {
        match self {
            Pitch::Up => Pitch::Level,
            _ => Pitch::Down,
        }
    }
}

impl TryFrom<i32> for Pitch {
    type Error = Error;

    fn try_from(deg: i32) -> Result<Pitch> {
        match deg {
            -30 => Ok(Pitch::Down),
            0 => Ok(Pitch::Level),
            30 => Ok(Pitch::Up),
            _ => Err(Error::Domain(format!("pitch {deg} not in {{-30, 0, 30}}"))),
        }
    }
}

impl From<Pitch> for i32 {
    fn from(p: Pitch) -> i32 {
        p.degrees()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pose {
    pub x: i32,
    pub y: i32,
    pub rot: Heading,
    #[serde(default = "level")]
    pub pitch: Pitch,
}

fn level() -> Pitch {
    Pitch::Level
}

impl Pose {
    pub fn new(x: i32, y: i32, rot: Heading) -> Pose {
        Pose {
            x,
            y,
            rot,
            pitch: Pitch::Level,
        }
    }

    pub fn cell(&self) -> Cell {
        Cell::new(self.x, self.y)
    }
}

/// Agent capability `(nav, mani, hei)`; `hei` is true for the tall (~0.9 m) body.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CapabilityVector {
    pub nav: bool,
    pub mani: bool,
    pub hei: bool,
}

impl CapabilityVector {
    pub const fn new(nav: bool, mani: bool, hei: bool) -> Self {
        CapabilityVector { nav, mani, hei }
    }

    pub fn as_bits(&self) -> [f64; 3] {
        [self.nav as u8 as f64, self.mani as u8 as f64, self.hei as u8 as f64]
    }
}

impl fmt::Display for CapabilityVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.nav as u8, self.mani as u8, self.hei as u8)
    }
}
