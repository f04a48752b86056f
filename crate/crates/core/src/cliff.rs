//! CliffCircular: a 12x12 grid with a central 4x4 cliff block. The agent earns
//! +1 each time its projection onto the 20-cell ring around the block lands on a
//! ring cell for the first time, and -100 (episode over) when it steps onto a
//! cliff. It only sees the 5x5 cliff mask around itself, never which ring cells
//! it has already covered.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::env::{Action, Env, EnvError, EnvSpec, Observation, StepResult};
use crate::rng::{self, Rng};

pub const WIDTH: i32 = 12;
pub const HEIGHT: i32 = 12;
pub const BLOCK_MIN: i32 = 4;
pub const BLOCK_MAX: i32 = 7;
pub const TRACK_LEN: usize = 20;
pub const WINDOW: i32 = 5;
pub const OBS_DIM: usize = (WINDOW * WINDOW) as usize;
pub const N_ACTIONS: usize = 5;
pub const RANDOM_CLIFFS: usize = 2;
pub const TIME_LIMIT: usize = 128;
pub const CLIFF_REWARD: f64 = -100.0;

/// Row, column. Signed so that window offsets can leave the grid.
pub type Cell = (i32, i32);

/// Grid moves in action order: noop, up, right, down, left.
pub const MOVES: [Cell; N_ACTIONS] = [(0, 0), (-1, 0), (0, 1), (1, 0), (0, -1)];

pub fn in_grid((r, c): Cell) -> bool {
    (0..HEIGHT).contains(&r) && (0..WIDTH).contains(&c)
}

pub fn row_major((r, c): Cell) -> usize {
    (r * WIDTH + c) as usize
}

pub fn is_static_cliff((r, c): Cell) -> bool {
    (BLOCK_MIN..=BLOCK_MAX).contains(&r) && (BLOCK_MIN..=BLOCK_MAX).contains(&c)
}

/// The ring of cells immediately surrounding the block, clockwise from its
/// top-left corner.
pub fn track_cells() -> Vec<Cell> {
    let (lo, hi) = (BLOCK_MIN - 1, BLOCK_MAX + 1);
    let mut ring = Vec::with_capacity(TRACK_LEN);
    ring.extend((lo..=hi).map(|c| (lo, c)));
    ring.extend((lo + 1..=hi).map(|r| (r, hi)));
    ring.extend((lo..hi).rev().map(|c| (hi, c)));
    ring.extend((lo + 1..hi).rev().map(|r| (r, lo)));
    ring
}

/// Index into [`track_cells`] of the ring cell nearest to `cell` (Euclidean on
/// cell centers, ties to the smallest row-major index).
pub fn project(cell: Cell, ring: &[Cell]) -> usize {
    let mut best = 0;
    let mut best_key = (i32::MAX, usize::MAX);
    for (i, &t) in ring.iter().enumerate() {
        let d = (t.0 - cell.0).pow(2) + (t.1 - cell.1).pow(2);
        let key = (d, row_major(t));
        if key < best_key {
            best_key = key;
            best = i;
        }
    }
    best
}

pub const fn episode_max_reward() -> f64 {
    TRACK_LEN as f64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridLayout {
    pub track_cells: Vec<Cell>,
    pub random_cliff_cells: Vec<Cell>,
    pub start: Cell,
}

impl GridLayout {
    /// Draws the agent start uniformly over walkable cells, then two extra
    /// cliffs uniformly over walkable cells that are neither on the ring nor
    /// the start.
    pub fn build(rng: &mut Rng) -> Self {
        let track_cells = track_cells();
        let walkable: Vec<Cell> = all_cells().filter(|&c| !is_static_cliff(c)).collect();
        let start = walkable[rng.random_range(0..walkable.len())];
        let mut candidates: Vec<Cell> = walkable
            .into_iter()
            .filter(|c| *c != start && !track_cells.contains(c))
            .collect();
        let mut random_cliff_cells = Vec::with_capacity(RANDOM_CLIFFS);
        for _ in 0..RANDOM_CLIFFS {
            let k = rng.random_range(0..candidates.len());
            random_cliff_cells.push(candidates.swap_remove(k));
        }
        GridLayout { track_cells, random_cliff_cells, start }
    }

    /// Static block or one of the random cliffs. Cells outside the grid are
    /// not cliffs here; the observation treats them separately.
    pub fn is_cliff(&self, cell: Cell) -> bool {
        is_static_cliff(cell) || self.random_cliff_cells.contains(&cell)
    }
}

fn all_cells() -> impl Iterator<Item = Cell> {
    (0..HEIGHT).flat_map(|r| (0..WIDTH).map(move |c| (r, c)))
}

/// 5x5 row-major window centered on `agent`: 1.0 for a cliff or off-grid cell.
pub fn observe(layout: &GridLayout, agent: Cell) -> Observation {
    let half = WINDOW / 2;
    let mut v = Vec::with_capacity(OBS_DIM);
    for dr in -half..=half {
        for dc in -half..=half {
            let cell = (agent.0 + dr, agent.1 + dc);
            let blocked = !in_grid(cell) || layout.is_cliff(cell);
            v.push(if blocked { 1.0 } else { 0.0 });
        }
    }
    Observation(v)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CliffState {
    pub agent_cell: Cell,
    pub visited_track: Vec<bool>,
    pub steps_elapsed: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CliffCircular {
    spec: EnvSpec,
    layout: GridLayout,
    state: CliffState,
    /// Set once the episode has ended.
    finished: bool,
    rng: Rng,
}

impl Default for CliffCircular {
    fn default() -> Self {
        Self::new()
    }
}

impl CliffCircular {
    /// A fresh environment on an entropy-seeded stream. Call `reset` before
    /// stepping.
    pub fn new() -> Self {
        let mut rng = rng::from_entropy();
        let layout = GridLayout::build(&mut rng);
        Self::from_parts(layout, rng)
    }

    /// Places the agent at `layout.start` with nothing visited.
    pub fn from_parts(layout: GridLayout, rng: Rng) -> Self {
        let state = CliffState {
            agent_cell: layout.start,
            visited_track: vec![false; TRACK_LEN],
            steps_elapsed: 0,
        };
        CliffCircular {
            spec: EnvSpec {
                observation_dim: OBS_DIM,
                action_branch_cardinalities: vec![N_ACTIONS],
                max_episode_steps: TIME_LIMIT,
            },
            layout,
            state,
            finished: false,
            rng,
        }
    }

    pub fn layout(&self) -> &GridLayout {
        &self.layout
    }

    pub fn state(&self) -> &CliffState {
        &self.state
    }

    pub fn agent(&self) -> Cell {
        self.state.agent_cell
    }

    pub fn visited_count(&self) -> usize {
        self.state.visited_track.iter().filter(|&&v| v).count()
    }

    pub fn projection(&self) -> usize {
        project(self.state.agent_cell, &self.layout.track_cells)
    }

    pub fn observe(&self) -> Observation {
        observe(&self.layout, self.state.agent_cell)
    }

    /// ASCII view: `#` cliff, `.` open, `o` unvisited ring, `+` visited ring,
    /// `A` agent.
    pub fn render_ascii(&self) -> String {
        let mut s = String::new();
        for r in 0..HEIGHT {
            for c in 0..WIDTH {
                let cell = (r, c);
                let ch = if cell == self.state.agent_cell {
                    'A'
                } else if self.layout.is_cliff(cell) {
                    '#'
                } else if let Some(i) = self.layout.track_cells.iter().position(|&t| t == cell) {
                    if self.state.visited_track[i] { '+' } else { 'o' }
                } else {
                    '.'
                };
                s.push(ch);
            }
            s.push('\n');
        }
        s
    }
}

impl Env for CliffCircular {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: Option<u64>) -> Observation {
        if let Some(seed) = seed {
            self.rng = rng::stream(seed, "cliff-circular");
        }
        let layout = GridLayout::build(&mut self.rng);
        let rng = self.rng.clone();
        *self = Self::from_parts(layout, rng);
        self.observe()
    }

    fn step(&mut self, action: &Action) -> Result<StepResult, EnvError> {
        if self.finished {
            return Err(EnvError::EpisodeFinished);
        }
        action.validate(&self.spec.action_branch_cardinalities)?;
        let (dr, dc) = MOVES[action.0[0]];
        let (r, c) = self.state.agent_cell;
        let next = (r + dr, c + dc);
        if in_grid(next) {
            self.state.agent_cell = next;
        }
        self.state.steps_elapsed += 1;

        let (reward, terminated) = if self.layout.is_cliff(self.state.agent_cell) {
            (CLIFF_REWARD, true)
        } else {
            let p = self.projection();
            if self.state.visited_track[p] {
                (0.0, false)
            } else {
                self.state.visited_track[p] = true;
                (1.0, self.visited_count() == TRACK_LEN)
            }
        };
        self.finished = terminated;
        Ok(StepResult { observation: self.observe(), reward, terminated, truncated: false })
    }
}
