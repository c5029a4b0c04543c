use super::{AgentPose, Cell, Goal, GridSpec, TaskInstance, TaskKind};

pub const CH_WALL: usize = 0;
pub const CH_OOB: usize = 1;
const CH_OBJECTS: usize = 2;

/// Egocentric view: a `window × window` grid of channel vectors, row 0 is the
/// farthest row ahead of the agent, the agent sits in the center cell.
///
/// Channels are wall, out-of-bounds, one per object category and, for
/// PointNav, a goal channel marking the goal cell clipped to the window.
/// PointNav also carries `displacement = [right, forward]` to the goal,
/// normalized by `max(width, height) - 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub window: usize,
    pub channels: usize,
    pub grid: Vec<f64>,
    pub displacement: Option<[f64; 2]>,
}

impl Observation {
    pub fn at(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.grid[(row * self.window + col) * self.channels + ch]
    }

    /// Flat model input: the grid followed by the displacement, if any.
    pub fn features(&self) -> Vec<f64> {
        let mut f = self.grid.clone();
        if let Some(d) = self.displacement {
            f.extend_from_slice(&d);
        }
        f
    }
}

pub fn observation_dim(kind: TaskKind, window: usize, num_categories: usize) -> usize {
    let goal = usize::from(kind == TaskKind::PointNav);
    window * window * (CH_OBJECTS + num_categories + goal) + 2 * goal
}

/// Agent-frame offset of `c`: `(forward, right)`.
fn egocentric(pose: &AgentPose, c: Cell) -> (i32, i32) {
    let (hx, hy) = pose.heading.delta();
    let (rx, ry) = pose.heading.right().delta();
    let (dx, dy) = (c.x - pose.cell.x, c.y - pose.cell.y);
    (dx * hx + dy * hy, dx * rx + dy * ry)
}

pub fn render_observation(spec: &GridSpec, pose: &AgentPose, task: &TaskInstance, window: usize) -> Observation {
    let point = match task.goal {
        Goal::Point(c) => Some(c),
        Goal::Object(_) => None,
    };
    let channels = CH_OBJECTS + spec.num_categories + usize::from(point.is_some());
    let mut grid = vec![0.0; window * window * channels];
    let half = (window / 2) as i32;
    let (hx, hy) = pose.heading.delta();
    let (rx, ry) = pose.heading.right().delta();
    for row in 0..window {
        for col in 0..window {
            let fwd = half - row as i32;
            let right = col as i32 - half;
            let c = Cell::new(pose.cell.x + fwd * hx + right * rx, pose.cell.y + fwd * hy + right * ry);
            let base = (row * window + col) * channels;
            if !spec.in_bounds(c) {
                grid[base + CH_OOB] = 1.0;
            } else if spec.is_wall(c) {
                grid[base + CH_WALL] = 1.0;
            } else if let Some(cat) = spec.object_at(c) {
                grid[base + CH_OBJECTS + cat as usize] = 1.0;
            }
        }
    }
    let displacement = point.map(|g| {
        let (fwd, right) = egocentric(pose, g);
        let row = (half - fwd.clamp(-half, half)) as usize;
        let col = (right.clamp(-half, half) + half) as usize;
        grid[(row * window + col) * channels + channels - 1] = 1.0;
        let scale = (spec.width.max(spec.height) - 1).max(1) as f64;
        [right as f64 / scale, fwd as f64 / scale]
    });
    Observation { window, channels, grid, displacement }
}
