//! Grid tabletop environment.
//!
//! A bounded grid of cells with a single gripper and a handful of cube-like
//! objects that can be pushed (dragged while held), lifted, rotated in 90°
//! quanta and stacked. All transitions are deterministic; randomness only
//! enters through [`GridEnv::reset`], which takes an explicit seed.

use std::f64::consts::FRAC_PI_2;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::goal::{object_at_goal, Goal, MatchTolerance};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid world state: {0}")]
    InvalidState(String),
    #[error("object count mismatch: state has {state}, goal has {goal}")]
    CountMismatch { state: usize, goal: usize },
}

/// Axis-aligned block of cells, `[x0, x0 + width) × [y0, y0 + height)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellRect {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

impl CellRect {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x0 + self.width && y >= self.y0 && y < self.y0 + self.height
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }

    /// Row-major cell at linear index `i`.
    pub fn cell(&self, i: usize) -> (usize, usize) {
        (self.x0 + i % self.width, self.y0 + i / self.width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub width: usize,
    pub height: usize,
    /// Edge length of one cell in meters.
    pub cell_size: f64,
    pub max_objects: usize,
    pub placement_area: CellRect,
    pub max_stack_height: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self::square(5)
    }
}

impl GridConfig {
    /// `n × n` grid whose placement area covers the whole table.
    pub fn square(n: usize) -> Self {
        GridConfig {
            width: n,
            height: n,
            cell_size: 0.05,
            max_objects: 2,
            placement_area: CellRect { x0: 0, y0: 0, width: n, height: n },
            max_stack_height: 3,
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.width < 3 || self.height < 3 {
            return Err(EnvError::Config(format!("grid must be at least 3x3, got {}x{}", self.width, self.height)));
        }
        if self.max_objects < 1 {
            return Err(EnvError::Config("max_objects must be >= 1".into()));
        }
        if self.max_stack_height < 1 {
            return Err(EnvError::Config("max_stack_height must be >= 1".into()));
        }
        if !(self.cell_size > 0.0) {
            return Err(EnvError::Config("cell_size must be positive".into()));
        }
        let p = &self.placement_area;
        if p.width == 0 || p.height == 0 || p.x0 + p.width > self.width || p.y0 + p.height > self.height {
            return Err(EnvError::Config(format!("placement area {p:?} exceeds the grid")));
        }
        Ok(())
    }

    pub fn in_bounds(&self, x: usize, y: usize) -> bool {
        x < self.width && y < self.height
    }

    /// Half extent used to normalize positions and offsets into `[-1, 1]`.
    fn half_extent(&self) -> (f64, f64) {
        ((self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0)
    }
}

/// Object yaw in quarter turns: 0 → 0°, 1 → 90°, 2 → 180°, 3 → 270°.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Orientation(u8);

impl Orientation {
    pub const ALL: [Orientation; 4] = [Orientation(0), Orientation(1), Orientation(2), Orientation(3)];

    pub fn from_quarters(q: i64) -> Self {
        Orientation(q.rem_euclid(4) as u8)
    }

    pub fn quarters(self) -> u8 {
        self.0
    }

    pub fn degrees(self) -> u32 {
        self.0 as u32 * 90
    }

    pub fn cw(self) -> Self {
        Self::from_quarters(self.0 as i64 + 1)
    }

    pub fn ccw(self) -> Self {
        Self::from_quarters(self.0 as i64 - 1)
    }

    /// Quarter turns needed to go from `self` to `other`, in `0..4`.
    pub fn delta_to(self, other: Orientation) -> u8 {
        ((other.0 as i64 - self.0 as i64).rem_euclid(4)) as u8
    }

    /// Minimal rotation angle between two orientations, in radians.
    pub fn angle_to(self, other: Orientation) -> f64 {
        let d = self.delta_to(other);
        d.min(4 - d) as f64 * FRAC_PI_2
    }

    fn is_valid(self) -> bool {
        self.0 < 4
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectState {
    pub x: usize,
    pub y: usize,
    /// 0 on the table, k when resting on k objects; a held object carries the gripper height.
    pub level: usize,
    pub orientation: Orientation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GripperState {
    pub x: usize,
    pub y: usize,
    /// 0 = lowered, 1 = raised.
    pub z: u8,
    pub holding: Option<usize>,
}

impl GripperState {
    pub fn raised(&self) -> bool {
        self.z == 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldState {
    pub gripper: GripperState,
    pub objects: Vec<ObjectState>,
    pub step_count: u64,
}

/// Version of the canonical text form produced by [`WorldState::to_canonical`].
pub const WORLD_STATE_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VersionedState {
    version: u32,
    state: WorldState,
}

impl WorldState {
    pub fn n_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn is_held(&self, i: usize) -> bool {
        self.gripper.holding == Some(i)
    }

    /// Whether object `i` is lifted off everything: held by a raised gripper.
    pub fn in_air(&self, i: usize) -> bool {
        self.is_held(i) && self.gripper.raised()
    }

    /// Number of resting (non-held) objects at a cell.
    pub fn stack_height(&self, x: usize, y: usize) -> usize {
        self.objects.iter().enumerate().filter(|&(i, o)| !self.is_held(i) && o.x == x && o.y == y).count()
    }

    /// Index of the topmost resting object at a cell.
    pub fn top_object(&self, x: usize, y: usize) -> Option<usize> {
        self.objects
            .iter()
            .enumerate()
            .filter(|&(i, o)| !self.is_held(i) && o.x == x && o.y == y)
            .max_by_key(|(_, o)| o.level)
            .map(|(i, _)| i)
    }

    /// Field-ordered, versioned single-line JSON used in checkpoints, dumps and hashing.
    pub fn to_canonical(&self) -> String {
        serde_json::to_string(&VersionedState { version: WORLD_STATE_FORMAT_VERSION, state: self.clone() })
            .expect("world state serializes")
    }

    pub fn from_canonical(s: &str) -> Result<WorldState, EnvError> {
        let v: VersionedState = serde_json::from_str(s).map_err(|e| EnvError::InvalidState(format!("parse: {e}")))?;
        if v.version != WORLD_STATE_FORMAT_VERSION {
            return Err(EnvError::InvalidState(format!("unsupported state version {}", v.version)));
        }
        Ok(v.state)
    }

    /// Checks every structural invariant against `config`.
    pub fn validate(&self, config: &GridConfig) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::InvalidState(m));
        let n = self.objects.len();
        if n == 0 || n > config.max_objects {
            return bad(format!("object count {n} outside 1..={}", config.max_objects));
        }
        let g = &self.gripper;
        if !config.in_bounds(g.x, g.y) || g.z > 1 {
            return bad(format!("gripper out of bounds: {g:?}"));
        }
        if let Some(h) = g.holding {
            if h >= n {
                return bad(format!("gripper holds nonexistent object {h}"));
            }
            let o = &self.objects[h];
            if (o.x, o.y) != (g.x, g.y) || o.level != g.z as usize {
                return bad(format!("held object {h} detached from gripper"));
            }
        }
        for (i, o) in self.objects.iter().enumerate() {
            if !config.in_bounds(o.x, o.y) {
                return bad(format!("object {i} off the grid at ({}, {})", o.x, o.y));
            }
            if !o.orientation.is_valid() {
                return bad(format!("object {i} has invalid orientation"));
            }
            if self.is_held(i) {
                continue;
            }
            if o.level >= config.max_stack_height {
                return bad(format!("object {i} at level {} exceeds max stack height", o.level));
            }
            for (j, p) in self.objects.iter().enumerate() {
                if j != i && !self.is_held(j) && (p.x, p.y, p.level) == (o.x, o.y, o.level) {
                    return bad(format!("objects {i} and {j} overlap at ({}, {}, {})", o.x, o.y, o.level));
                }
            }
            if o.level > 0 {
                let supported = self
                    .objects
                    .iter()
                    .enumerate()
                    .any(|(j, p)| j != i && !self.is_held(j) && p.x == o.x && p.y == o.y && p.level == o.level - 1);
                if !supported {
                    return bad(format!("object {i} floats at level {} with nothing beneath", o.level));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Move {
    North,
    East,
    South,
    West,
    Stay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerticalGrip {
    Raise,
    Lower,
    ToggleGrip,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotateHeld {
    Cw,
    Ccw,
    None,
}

impl Move {
    pub const ALL: [Move; 5] = [Move::North, Move::East, Move::South, Move::West, Move::Stay];
}

impl VerticalGrip {
    pub const ALL: [VerticalGrip; 4] =
        [VerticalGrip::Raise, VerticalGrip::Lower, VerticalGrip::ToggleGrip, VerticalGrip::None];
}

impl RotateHeld {
    pub const ALL: [RotateHeld; 3] = [RotateHeld::Cw, RotateHeld::Ccw, RotateHeld::None];
}

/// Sizes of the three action factors: move, vertical/grip, rotate.
pub const ACTION_FACTOR_SIZES: [usize; 3] = [5, 4, 3];
/// Number of joint actions.
pub const N_ACTIONS: usize = 60;

/// One factored action. All 60 combinations are legal; ineffective parts are no-ops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action {
    pub mv: Move,
    pub vertical: VerticalGrip,
    pub rotate: RotateHeld,
}

impl Action {
    pub const NOOP: Action = Action { mv: Move::Stay, vertical: VerticalGrip::None, rotate: RotateHeld::None };

    pub fn new(mv: Move, vertical: VerticalGrip, rotate: RotateHeld) -> Self {
        Action { mv, vertical, rotate }
    }

    /// Per-factor category indices.
    pub fn indices(&self) -> [usize; 3] {
        [
            Move::ALL.iter().position(|m| *m == self.mv).unwrap(),
            VerticalGrip::ALL.iter().position(|m| *m == self.vertical).unwrap(),
            RotateHeld::ALL.iter().position(|m| *m == self.rotate).unwrap(),
        ]
    }

    pub fn from_indices(idx: [usize; 3]) -> Option<Self> {
        Some(Action {
            mv: *Move::ALL.get(idx[0])?,
            vertical: *VerticalGrip::ALL.get(idx[1])?,
            rotate: *RotateHeld::ALL.get(idx[2])?,
        })
    }

    /// Flat index in `0..60`, move-major.
    pub fn to_flat(&self) -> usize {
        let [m, v, r] = self.indices();
        (m * 4 + v) * 3 + r
    }

    pub fn from_flat(i: usize) -> Option<Self> {
        if i >= N_ACTIONS {
            return None;
        }
        Self::from_indices([i / 12, (i / 3) % 4, i % 3])
    }

    pub fn all() -> impl Iterator<Item = Action> {
        (0..N_ACTIONS).map(|i| Action::from_flat(i).unwrap())
    }
}

/// Applies one action. Pure: the successor depends only on the arguments.
pub fn transition(config: &GridConfig, state: &WorldState, action: Action) -> WorldState {
    let mut s = state.clone();

    // 1. planar move, clamped at the edges; a held object follows
    let g = &mut s.gripper;
    match action.mv {
        Move::North => g.y = (g.y + 1).min(config.height - 1),
        Move::South => g.y = g.y.saturating_sub(1),
        Move::East => g.x = (g.x + 1).min(config.width - 1),
        Move::West => g.x = g.x.saturating_sub(1),
        Move::Stay => {}
    }
    if let Some(h) = s.gripper.holding {
        s.objects[h].x = s.gripper.x;
        s.objects[h].y = s.gripper.y;
    }

    // 2. vertical motion and grip
    match action.vertical {
        VerticalGrip::Raise | VerticalGrip::Lower => {
            s.gripper.z = u8::from(action.vertical == VerticalGrip::Raise);
            if let Some(h) = s.gripper.holding {
                s.objects[h].level = s.gripper.z as usize;
            }
        }
        VerticalGrip::ToggleGrip => {
            let (x, y) = (s.gripper.x, s.gripper.y);
            match s.gripper.holding {
                Some(h) => {
                    let height = s.stack_height(x, y);
                    if height < config.max_stack_height {
                        s.objects[h].level = height;
                        s.gripper.holding = None;
                    }
                }
                None if s.gripper.z == 0 => {
                    if let Some(top) = s.top_object(x, y) {
                        s.gripper.holding = Some(top);
                        s.objects[top].level = 0;
                    }
                }
                None => {}
            }
        }
        VerticalGrip::None => {}
    }

    // 3. rotate whatever is held
    if let Some(h) = s.gripper.holding {
        let o = &mut s.objects[h];
        match action.rotate {
            RotateHeld::Cw => o.orientation = o.orientation.cw(),
            RotateHeld::Ccw => o.orientation = o.orientation.ccw(),
            RotateHeld::None => {}
        }
    }

    s.step_count += 1;
    s
}

/// Samples a fresh initial state: objects on distinct placement cells at level 0,
/// uniform orientations, and a raised empty gripper at a uniform cell.
pub fn sample_initial_state<R: Rng + ?Sized>(
    config: &GridConfig,
    rng: &mut R,
    n_objects: usize,
) -> Result<WorldState, EnvError> {
    if n_objects < 1 || n_objects > config.max_objects {
        return Err(EnvError::Config(format!("n_objects = {n_objects} outside 1..={}", config.max_objects)));
    }
    let area = config.placement_area;
    if n_objects > area.area() {
        return Err(EnvError::Config(format!("{n_objects} objects do not fit in {} placement cells", area.area())));
    }
    let cells = index::sample(rng, area.area(), n_objects);
    let objects = cells
        .iter()
        .map(|c| {
            let (x, y) = area.cell(c);
            ObjectState { x, y, level: 0, orientation: Orientation::from_quarters(rng.gen_range(0..4)) }
        })
        .collect();
    let gripper =
        GripperState { x: rng.gen_range(0..config.width), y: rng.gen_range(0..config.height), z: 1, holding: None };
    Ok(WorldState { gripper, objects, step_count: 0 })
}

/// Per-object observation width.
pub const OBJECT_FEATURES: usize = 19;
/// Gripper observation width.
pub const GRIPPER_FEATURES: usize = 4;

/// First goal-derived column in an object's feature row; everything from here on is
/// zero when no goal is supplied.
pub const GOAL_FEATURES_START: usize = 10;

/// Network input: gripper features plus one fixed-width row per object.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation<T> {
    pub gripper: [T; GRIPPER_FEATURES],
    /// Row-major `n_objects × OBJECT_FEATURES`.
    pub objects: Vec<T>,
}

impl<T: Scalar> Observation<T> {
    pub fn n_objects(&self) -> usize {
        self.objects.len() / OBJECT_FEATURES
    }

    pub fn object(&self, i: usize) -> &[T] {
        &self.objects[i * OBJECT_FEATURES..(i + 1) * OBJECT_FEATURES]
    }

    /// Reorders object rows: row `k` of the result is row `perm[k]` of `self`.
    pub fn permute_objects(&self, perm: &[usize]) -> Self {
        let mut objects = Vec::with_capacity(self.objects.len());
        for &p in perm {
            objects.extend_from_slice(self.object(p));
        }
        Observation { gripper: self.gripper, objects }
    }
}

/// Builds the observation of `state`, conditioned on `goal` when given.
///
/// Object row layout:
/// `[px, py, level, orient×4, held, grip_dx, grip_dy | goal_dx, goal_dy, goal_dlevel,
///   dorient×4, goal_in_air, at_goal]`; columns after the bar are zero without a goal.
pub fn observe<T: Scalar>(
    config: &GridConfig,
    state: &WorldState,
    goal: Option<&Goal>,
    tol: &MatchTolerance,
) -> Result<Observation<T>, EnvError> {
    if let Some(g) = goal {
        if g.targets.len() != state.objects.len() {
            return Err(EnvError::CountMismatch { state: state.objects.len(), goal: g.targets.len() });
        }
    }
    let (hx, hy) = config.half_extent();
    let stack = config.max_stack_height as f64;
    let gr = &state.gripper;
    let gripper = [
        T::of((gr.x as f64 - hx) / hx),
        T::of((gr.y as f64 - hy) / hy),
        T::of(gr.z as f64),
        T::of(if gr.holding.is_some() { 1.0 } else { 0.0 }),
    ];
    let mut objects = vec![T::zero(); state.objects.len() * OBJECT_FEATURES];
    for (i, o) in state.objects.iter().enumerate() {
        let row = &mut objects[i * OBJECT_FEATURES..(i + 1) * OBJECT_FEATURES];
        row[0] = T::of((o.x as f64 - hx) / hx);
        row[1] = T::of((o.y as f64 - hy) / hy);
        row[2] = T::of(o.level as f64 / stack);
        row[3 + o.orientation.quarters() as usize] = T::one();
        row[7] = T::of(if state.is_held(i) { 1.0 } else { 0.0 });
        row[8] = T::of((o.x as f64 - gr.x as f64) / hx);
        row[9] = T::of((o.y as f64 - gr.y as f64) / hy);
        if let Some(g) = goal {
            let t = &g.targets[i];
            row[10] = T::of((t.x as f64 - o.x as f64) / hx);
            row[11] = T::of((t.y as f64 - o.y as f64) / hy);
            row[12] = T::of((t.level as f64 - o.level as f64) / stack);
            row[13 + o.orientation.delta_to(t.orientation) as usize] = T::one();
            row[17] = T::of(if t.in_air { 1.0 } else { 0.0 });
            let at = object_at_goal(config, state, i, t, g.rotation_weight, tol);
            row[18] = T::of(if at { 1.0 } else { 0.0 });
        }
    }
    Ok(Observation { gripper, objects })
}

/// Single-owner environment instance wrapping [`transition`].
#[derive(Debug, Clone)]
pub struct GridEnv {
    config: GridConfig,
    tolerance: MatchTolerance,
    state: WorldState,
}

impl GridEnv {
    pub fn new(config: GridConfig) -> Result<Self, EnvError> {
        Self::with_tolerance(config, MatchTolerance::default())
    }

    pub fn with_tolerance(config: GridConfig, tolerance: MatchTolerance) -> Result<Self, EnvError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let state = sample_initial_state(&config, &mut rng, 1)?;
        Ok(GridEnv { config, tolerance, state })
    }

    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    pub fn tolerance(&self) -> &MatchTolerance {
        &self.tolerance
    }

    pub fn state(&self) -> &WorldState {
        &self.state
    }

    pub fn reset(&mut self, seed: u64, n_objects: usize) -> Result<&WorldState, EnvError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.reset_with(&mut rng, n_objects)
    }

    pub fn reset_with<R: Rng + ?Sized>(&mut self, rng: &mut R, n_objects: usize) -> Result<&WorldState, EnvError> {
        self.state = sample_initial_state(&self.config, rng, n_objects)?;
        Ok(&self.state)
    }

    pub fn reset_to(&mut self, state: &WorldState) -> Result<&WorldState, EnvError> {
        state.validate(&self.config)?;
        self.state = state.clone();
        Ok(&self.state)
    }

    pub fn step(&mut self, action: Action) -> &WorldState {
        self.state = transition(&self.config, &self.state, action);
        &self.state
    }

    pub fn observe<T: Scalar>(&self, goal: Option<&Goal>) -> Result<Observation<T>, EnvError> {
        observe(&self.config, &self.state, goal, &self.tolerance)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::goal::Goal;

    fn held_state() -> WorldState {
        WorldState {
            gripper: GripperState { x: 2, y: 2, z: 1, holding: Some(0) },
            objects: vec![
                ObjectState { x: 2, y: 2, level: 1, orientation: Orientation::default() },
                ObjectState { x: 4, y: 4, level: 0, orientation: Orientation::from_quarters(1) },
            ],
            step_count: 0,
        }
    }

    #[test]
    fn reset_is_deterministic_and_places_on_distinct_cells() {
        let mut env = GridEnv::new(GridConfig::square(5)).unwrap();
        let a = env.reset(7, 2).unwrap().clone();
        let b = env.reset(7, 2).unwrap().clone();
        assert_eq!(a, b);
        assert!(a.objects.iter().all(|o| o.level == 0));
        assert_ne!((a.objects[0].x, a.objects[0].y), (a.objects[1].x, a.objects[1].y));
        assert!(a.gripper.raised() && a.gripper.holding.is_none());
    }

    #[test]
    fn reset_rejects_too_many_objects() {
        let mut cfg = GridConfig::square(3);
        cfg.max_objects = 12;
        let mut env = GridEnv::new(cfg).unwrap();
        assert!(matches!(env.reset(1, 10), Err(EnvError::Config(_))));
        assert!(env.reset(1, 9).is_ok());
    }

    #[test]
    fn move_drags_held_object() {
        let cfg = GridConfig::square(5);
        let s = transition(&cfg, &held_state(), Action::new(Move::East, VerticalGrip::None, RotateHeld::None));
        assert_eq!((s.gripper.x, s.gripper.y), (3, 2));
        assert_eq!((s.objects[0].x, s.objects[0].y), (3, 2));
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn move_is_clamped_at_edges() {
        let cfg = GridConfig::square(5);
        let mut s = held_state();
        s.gripper = GripperState { x: 0, y: 4, z: 1, holding: None };
        let w = transition(&cfg, &s, Action::new(Move::West, VerticalGrip::None, RotateHeld::None));
        assert_eq!(w.gripper.x, 0);
        let n = transition(&cfg, &s, Action::new(Move::North, VerticalGrip::None, RotateHeld::None));
        assert_eq!(n.gripper.y, 4);
    }

    #[test]
    fn release_stacks_and_regrasp_takes_top() {
        let cfg = GridConfig::square(5);
        let mut s = held_state();
        // carry object 0 over object 1 and drop it
        s.gripper = GripperState { x: 4, y: 4, z: 1, holding: Some(0) };
        s.objects[0].x = 4;
        s.objects[0].y = 4;
        let dropped = transition(&cfg, &s, Action::new(Move::Stay, VerticalGrip::ToggleGrip, RotateHeld::None));
        assert_eq!(dropped.gripper.holding, None);
        assert_eq!(dropped.objects[0].level, 1);
        dropped.validate(&cfg).unwrap();
        let lowered = transition(&cfg, &dropped, Action::new(Move::Stay, VerticalGrip::Lower, RotateHeld::None));
        let grasped = transition(&cfg, &lowered, Action::new(Move::Stay, VerticalGrip::ToggleGrip, RotateHeld::None));
        assert_eq!(grasped.gripper.holding, Some(0));
    }

    #[test]
    fn release_refused_on_full_stack() {
        let mut cfg = GridConfig::square(5);
        cfg.max_stack_height = 1;
        let mut s = held_state();
        s.gripper = GripperState { x: 4, y: 4, z: 1, holding: Some(0) };
        s.objects[0].x = 4;
        s.objects[0].y = 4;
        let t = transition(&cfg, &s, Action::new(Move::Stay, VerticalGrip::ToggleGrip, RotateHeld::None));
        assert_eq!(t.gripper.holding, Some(0));
    }

    #[test]
    fn grasp_needs_lowered_gripper_and_rotation_needs_object() {
        let cfg = GridConfig::square(5);
        let mut s = held_state();
        s.gripper = GripperState { x: 4, y: 4, z: 1, holding: None };
        s.objects[0].level = 0;
        s.objects[0].x = 0;
        let t = transition(&cfg, &s, Action::new(Move::Stay, VerticalGrip::ToggleGrip, RotateHeld::Cw));
        assert_eq!(t.gripper.holding, None);
        assert_eq!(t.objects, s.objects);
    }

    #[test]
    fn reset_to_rejects_floating_object() {
        let mut env = GridEnv::new(GridConfig::square(5)).unwrap();
        let mut s = held_state();
        s.gripper.holding = None;
        s.objects[0].level = 2;
        assert!(matches!(env.reset_to(&s), Err(EnvError::InvalidState(_))));
        let ok = held_state();
        assert_eq!(env.reset_to(&ok).unwrap(), &ok);
    }

    #[test]
    fn canonical_form_round_trips() {
        let s = held_state();
        let text = s.to_canonical();
        assert!(text.starts_with("{\"version\":1,"));
        assert_eq!(WorldState::from_canonical(&text).unwrap(), s);
    }

    #[test]
    fn action_flat_index_is_a_bijection() {
        let mut seen = [false; N_ACTIONS];
        for a in Action::all() {
            let i = a.to_flat();
            assert!(!seen[i]);
            seen[i] = true;
            assert_eq!(Action::from_flat(i), Some(a));
        }
        assert!(Action::from_indices([5, 0, 0]).is_none());
    }

    #[test]
    fn alice_observation_has_zero_goal_features() {
        let cfg = GridConfig::square(5);
        let obs: Observation<f64> = observe(&cfg, &held_state(), None, &MatchTolerance::default()).unwrap();
        for i in 0..obs.n_objects() {
            assert!(obs.object(i)[GOAL_FEATURES_START..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn observation_at_goal_has_flags_and_zero_offsets() {
        let cfg = GridConfig::square(5);
        let s = held_state();
        let g = Goal::from_state(&s);
        let obs: Observation<f64> = observe(&cfg, &s, Some(&g), &MatchTolerance::default()).unwrap();
        for i in 0..obs.n_objects() {
            let row = obs.object(i);
            assert_eq!(row[18], 1.0);
            assert_eq!(&row[10..13], &[0.0, 0.0, 0.0]);
            assert_eq!(row[13], 1.0);
        }
    }

    #[test]
    fn gripper_relative_offset_is_normalized_by_half_extent() {
        let cfg = GridConfig::square(9);
        let s = WorldState {
            gripper: GripperState { x: 0, y: 0, z: 1, holding: None },
            objects: vec![ObjectState { x: 3, y: 4, level: 0, orientation: Orientation::default() }],
            step_count: 0,
        };
        let obs: Observation<f64> = observe(&cfg, &s, None, &MatchTolerance::default()).unwrap();
        assert_eq!(&obs.object(0)[8..10], &[0.75, 1.0]);
        assert_eq!(&obs.gripper[..2], &[-1.0, -1.0]);
    }

    #[test]
    fn observe_rejects_goal_count_mismatch() {
        let cfg = GridConfig::square(5);
        let s = held_state();
        let mut g = Goal::from_state(&s);
        g.targets.pop();
        let r: Result<Observation<f64>, _> = observe(&cfg, &s, Some(&g), &MatchTolerance::default());
        assert_eq!(r.unwrap_err(), EnvError::CountMismatch { state: 2, goal: 1 });
    }
}
