use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::EnvError;

/// A grid cell; `y` grows southwards.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub x: i32,
    pub y: i32,
}

impl Cell {
    pub const fn new(x: i32, y: i32) -> Self {
        Cell { x, y }
    }

    pub fn manhattan(self, other: Cell) -> u32 {
        self.x.abs_diff(other.x) + self.y.abs_diff(other.y)
    }

    pub fn chebyshev(self, other: Cell) -> u32 {
        self.x.abs_diff(other.x).max(self.y.abs_diff(other.y))
    }
}

/// Static world layout: walls and one cell per object category.
///
/// Objects sit on free cells and do not block movement.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    walls: Vec<bool>,
    objects: BTreeMap<u8, Cell>,
    pub num_categories: usize,
}

/// A grid plus the optional start and point goal markers of the text map
/// format.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MapFixture {
    pub spec: GridSpec,
    pub start: Option<Cell>,
    pub point_goal: Option<Cell>,
}

impl GridSpec {
    pub fn empty(width: usize, height: usize, num_categories: usize) -> Self {
        GridSpec { width, height, walls: vec![false; width * height], objects: BTreeMap::new(), num_categories }
    }

    pub fn in_bounds(&self, c: Cell) -> bool {
        c.x >= 0 && c.y >= 0 && (c.x as usize) < self.width && (c.y as usize) < self.height
    }

    pub fn index(&self, c: Cell) -> usize {
        c.y as usize * self.width + c.x as usize
    }

    pub fn cell_at(&self, index: usize) -> Cell {
        Cell::new((index % self.width) as i32, (index / self.width) as i32)
    }

    pub fn is_wall(&self, c: Cell) -> bool {
        self.in_bounds(c) && self.walls[self.index(c)]
    }

    /// In bounds and not a wall.
    pub fn is_free(&self, c: Cell) -> bool {
        self.in_bounds(c) && !self.walls[self.index(c)]
    }

    pub fn set_wall(&mut self, c: Cell, wall: bool) -> Result<(), EnvError> {
        if !self.in_bounds(c) {
            return Err(EnvError::InvalidSpec(format!("wall {c:?} outside the grid")));
        }
        if wall && self.objects.values().any(|&o| o == c) {
            return Err(EnvError::InvalidSpec(format!("wall {c:?} on an object")));
        }
        let i = self.index(c);
        self.walls[i] = wall;
        Ok(())
    }

    pub fn place_object(&mut self, category: u8, c: Cell) -> Result<(), EnvError> {
        if category as usize >= self.num_categories {
            return Err(EnvError::InvalidSpec(format!("category {category} outside vocabulary")));
        }
        if !self.is_free(c) {
            return Err(EnvError::InvalidSpec(format!("object {category} on non-free cell {c:?}")));
        }
        self.objects.insert(category, c);
        Ok(())
    }

    pub fn object(&self, category: u8) -> Option<Cell> {
        self.objects.get(&category).copied()
    }

    pub fn objects(&self) -> impl Iterator<Item = (u8, Cell)> + '_ {
        self.objects.iter().map(|(k, v)| (*k, *v))
    }

    pub fn object_at(&self, c: Cell) -> Option<u8> {
        self.objects.iter().find(|(_, &v)| v == c).map(|(k, _)| *k)
    }

    pub fn free_cells(&self) -> Vec<Cell> {
        (0..self.width * self.height).filter(|&i| !self.walls[i]).map(|i| self.cell_at(i)).collect()
    }

    pub fn neighbors(&self, c: Cell) -> impl Iterator<Item = Cell> + '_ {
        [(0, -1), (1, 0), (0, 1), (-1, 0)]
            .into_iter()
            .map(move |(dx, dy)| Cell::new(c.x + dx, c.y + dy))
            .filter(move |n| self.is_free(*n))
    }

    /// Multi-source BFS over 4-connected free cells. Unreachable cells hold
    /// `u32::MAX`.
    pub fn distance_field(&self, sources: &[Cell]) -> Vec<u32> {
        let mut dist = vec![u32::MAX; self.width * self.height];
        let mut queue = VecDeque::new();
        for &s in sources {
            if self.is_free(s) && dist[self.index(s)] == u32::MAX {
                dist[self.index(s)] = 0;
                queue.push_back(s);
            }
        }
        while let Some(c) = queue.pop_front() {
            let d = dist[self.index(c)];
            for n in self.neighbors(c) {
                let i = self.index(n);
                if dist[i] == u32::MAX {
                    dist[i] = d + 1;
                    queue.push_back(n);
                }
            }
        }
        dist
    }

    /// Parses the text map format: `#` wall, `.` free, `A` start, `G` point
    /// goal, digits object categories. Every row must have the same width.
    pub fn parse_map(text: &str) -> Result<MapFixture, EnvError> {
        let rows: Vec<&str> = text.lines().collect();
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.chars().count());
        if height == 0 || width == 0 {
            return Err(EnvError::Parse { line: 1, msg: "empty map".into() });
        }
        let mut walls = vec![false; width * height];
        let mut objects = BTreeMap::new();
        let (mut start, mut goal) = (None, None);
        for (y, row) in rows.iter().enumerate() {
            let chars: Vec<char> = row.chars().collect();
            if chars.len() != width {
                return Err(EnvError::Parse { line: y + 1, msg: format!("expected {width} columns, got {}", chars.len()) });
            }
            for (x, ch) in chars.into_iter().enumerate() {
                let c = Cell::new(x as i32, y as i32);
                let dup = |what: &str| EnvError::Parse { line: y + 1, msg: format!("second {what}") };
                match ch {
                    '#' => walls[y * width + x] = true,
                    '.' => {}
                    'A' => {
                        if start.replace(c).is_some() {
                            return Err(dup("start marker"));
                        }
                    }
                    'G' => {
                        if goal.replace(c).is_some() {
                            return Err(dup("goal marker"));
                        }
                    }
                    '0'..='9' => {
                        let cat = ch as u8 - b'0';
                        if objects.insert(cat, c).is_some() {
                            return Err(dup(&format!("object {cat}")));
                        }
                    }
                    other => {
                        return Err(EnvError::Parse { line: y + 1, msg: format!("unknown character {other:?}") });
                    }
                }
            }
        }
        let num_categories = objects.keys().max().map_or(0, |m| *m as usize + 1);
        Ok(MapFixture {
            spec: GridSpec { width, height, walls, objects, num_categories },
            start,
            point_goal: goal,
        })
    }

    /// Renders the text map format, one `\n`-terminated line per row.
    pub fn render_map(&self, start: Option<Cell>, point_goal: Option<Cell>) -> String {
        let mut out = String::with_capacity((self.width + 1) * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let c = Cell::new(x as i32, y as i32);
                let ch = if self.walls[self.index(c)] {
                    '#'
                } else if start == Some(c) {
                    'A'
                } else if point_goal == Some(c) {
                    'G'
                } else if let Some(cat) = self.object_at(c) {
                    (b'0' + cat) as char
                } else {
                    '.'
                };
                out.push(ch);
            }
            out.push('\n');
        }
        out
    }
}

impl MapFixture {
    pub fn render(&self) -> String {
        self.spec.render_map(self.start, self.point_goal)
    }
}

impl std::fmt::Display for GridSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut s = String::new();
        write!(s, "{}", self.render_map(None, None))?;
        f.write_str(&s)
    }
}
