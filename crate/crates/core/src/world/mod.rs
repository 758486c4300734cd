//! Synthetic bird's-eye-view driving world.
//!
//! Coordinates: world `x` runs along grid rows (row 0 at the bottom), world
//! `y` along grid columns, both in meters from the grid corner. Headings are
//! counter-clockwise from `+x`, so a left turn increases `y`.

mod dataset;
mod gen;
mod render;
mod sim;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

pub use dataset::{decode_episodes, encode_episodes, read_dataset, write_dataset, DWEP_VERSION};
pub use gen::{derive_seed, generate_dataset, generate_episode};
pub use render::{render_frame, render_ppm, Overlay, EXPERT_COLOR, PREDICTED_COLOR};
pub use sim::{
    footprint, footprints_overlap, open_loop_metrics, open_loop_metrics_at, rollout, route_progress, score_pdm,
    OpenLoopMetrics, OPEN_LOOP_HORIZONS,
};

pub const CLASS_FREE: u8 = 0;
pub const CLASS_DRIVABLE: u8 = 1;
pub const CLASS_AGENT: u8 = 2;
pub const CLASS_EGO: u8 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Meters per cell.
    pub cell_size: f64,
    pub n_classes: usize,
    pub horizon_hist: usize,
    pub horizon_fut: usize,
    /// Seconds per frame.
    pub dt: f64,
    pub n_agents: usize,
    pub seed: u64,
    /// Time-to-collision threshold in units of `dt`.
    pub ttc_dt_multiple: f64,
    /// m/s²
    pub max_accel: f64,
    /// rad/s
    pub max_yaw_rate: f64,
    pub road_half_width: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    pub max_retries: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            grid_h: 32,
            grid_w: 32,
            cell_size: 0.5,
            n_classes: 4,
            horizon_hist: 4,
            horizon_fut: 8,
            dt: 0.5,
            n_agents: 3,
            seed: 0,
            ttc_dt_multiple: 2.0,
            max_accel: 4.0,
            max_yaw_rate: 1.0,
            road_half_width: 1.5,
            speed_min: 0.8,
            speed_max: 2.0,
            max_retries: 64,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.grid_h == 0 || self.grid_w == 0 {
            return bad("grid dimensions must be positive");
        }
        if self.horizon_fut == 0 {
            return bad("horizon_fut must be at least 1");
        }
        if self.dt.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return bad("dt must be positive");
        }
        if self.cell_size.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return bad("cell_size must be positive");
        }
        if self.n_classes != 4 {
            return bad("n_classes must be 4 (free, drivable, agent, ego)");
        }
        if !(self.speed_min > 0.0 && self.speed_max >= self.speed_min) {
            return bad("speed range must satisfy 0 < speed_min <= speed_max");
        }
        if self.max_retries == 0 {
            return bad("max_retries must be positive");
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn n_frames(&self) -> usize {
        self.horizon_hist + 1 + self.horizon_fut
    }

    pub fn ttc_threshold(&self) -> f64 {
        self.ttc_dt_multiple * self.dt
    }

    /// Whether two configs describe the same episode layout.
    pub fn same_layout(&self, other: &WorldConfig) -> bool {
        self.grid_h == other.grid_h
            && self.grid_w == other.grid_w
            && self.n_classes == other.n_classes
            && self.horizon_hist == other.horizon_hist
            && self.horizon_fut == other.horizon_fut
            && self.cell_size == other.cell_size
            && self.dt == other.dt
    }
}

/// Pose and speed of a vehicle. The ego and the agents share this type.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
}

pub type EgoState = VehicleState;

impl VehicleState {
    pub fn new(x: f64, y: f64, heading: f64, speed: f64) -> Self {
        Self {
            x,
            y,
            heading: wrap_angle(heading),
            speed,
        }
    }

    pub fn pos(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn velocity(&self) -> [f64; 2] {
        [self.speed * self.heading.cos(), self.speed * self.heading.sin()]
    }

    /// Constant-velocity extrapolation by `tau` seconds.
    pub fn advanced(&self, tau: f64) -> Self {
        let [vx, vy] = self.velocity();
        Self {
            x: self.x + vx * tau,
            y: self.y + vy * tau,
            ..*self
        }
    }

    /// World point for a point given in this state's body frame.
    pub fn to_world(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]]
    }

    /// Body-frame coordinates of a world point.
    pub fn to_body(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        let (dx, dy) = (p[0] - self.x, p[1] - self.y);
        [c * dx + s * dy, -s * dx + c * dy]
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Left,
    Straight,
    Right,
}

impl Command {
    pub fn index(self) -> usize {
        match self {
            Command::Left => 0,
            Command::Straight => 1,
            Command::Right => 2,
        }
    }

    pub fn from_index(i: u8) -> Result<Self> {
        match i {
            0 => Ok(Command::Left),
            1 => Ok(Command::Straight),
            2 => Ok(Command::Right),
            _ => Err(Error::Format(format!("bad command byte {i}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    /// Row-major class raster, `grid_h × grid_w`.
    pub bev: Vec<u8>,
    pub ego: EgoState,
    pub agents: Vec<VehicleState>,
    pub time_index: usize,
}

/// Future waypoints in the ego frame at the current time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub waypoints: Vec<[f64; 2]>,
}

impl Trajectory {
    pub fn new(waypoints: Vec<[f64; 2]>) -> Self {
        Self { waypoints }
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            waypoints: vec![[0.0, 0.0]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    pub fn check(&self, horizon: usize) -> Result<()> {
        if self.waypoints.len() != horizon {
            return Err(dim_err!(
                "trajectory has {} waypoints, expected {horizon}",
                self.waypoints.len()
            ));
        }
        if self.waypoints.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite waypoint".into()));
        }
        Ok(())
    }

    /// `1 × 2n` row: `[x0, y0, x1, y1, ...]`.
    pub fn to_row(&self) -> Tensor {
        let flat: Vec<f64> = self.waypoints.iter().flatten().copied().collect();
        Tensor::row(&flat)
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        Self {
            waypoints: flat.chunks(2).map(|c| [c[0], c[1]]).collect(),
        }
    }

    /// Waypoints scaled about the ego origin.
    pub fn scaled(&self, f: f64) -> Self {
        Self {
            waypoints: self.waypoints.iter().map(|p| [p[0] * f, p[1] * f]).collect(),
        }
    }

    pub fn shifted(&self, dx: f64, dy: f64) -> Self {
        Self {
            waypoints: self.waypoints.iter().map(|p| [p[0] + dx, p[1] + dy]).collect(),
        }
    }

    pub fn mse(&self, other: &Trajectory) -> f64 {
        let n = (2 * self.waypoints.len()).max(1) as f64;
        self.waypoints
            .iter()
            .zip(&other.waypoints)
            .map(|(a, b)| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2))
            .sum::<f64>()
            / n
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    /// Layout the episode was generated with.
    pub cfg: WorldConfig,
    /// Static drivable-area mask (1 = drivable), same layout as the rasters.
    pub road: Vec<u8>,
    pub frames: Vec<Frame>,
    pub expert: Trajectory,
    pub command: Command,
    pub seed: u64,
}

impl Episode {
    pub fn current_index(&self) -> usize {
        self.cfg.horizon_hist
    }

    pub fn future_index(&self) -> usize {
        self.cfg.horizon_hist + self.cfg.horizon_fut
    }

    pub fn current(&self) -> &Frame {
        &self.frames[self.current_index()]
    }

    pub fn frame(&self, idx: usize) -> Result<&Frame> {
        self.frames
            .get(idx)
            .ok_or_else(|| Error::Range(format!("frame {idx} of {}", self.frames.len())))
    }

    /// Past ego positions `idx-hist .. idx-1` in the ego frame at `idx`.
    pub fn history_waypoints(&self, idx: usize) -> Result<Vec<[f64; 2]>> {
        let hist = self.cfg.horizon_hist;
        if idx < hist || idx >= self.frames.len() {
            return Err(Error::Range(format!(
                "history of frame {idx} needs frames {}..{idx}",
                idx as i64 - hist as i64
            )));
        }
        let origin = self.frames[idx].ego;
        Ok((idx - hist..idx)
            .map(|j| origin.to_body(self.frames[j].ego.pos()))
            .collect())
    }

    /// Raster at frame `idx` as class ids.
    pub fn raster(&self, idx: usize) -> Result<&[u8]> {
        Ok(&self.frame(idx)?.bev)
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.cfg;
        if self.frames.len() != c.n_frames() {
            return Err(Error::Format(format!(
                "{} frames, expected {}",
                self.frames.len(),
                c.n_frames()
            )));
        }
        if self.road.len() != c.n_cells() {
            return Err(Error::Format("road mask size".into()));
        }
        for f in &self.frames {
            if f.bev.len() != c.n_cells() || f.bev.iter().any(|&v| v as usize >= c.n_classes) {
                return Err(Error::Format("raster size or class id".into()));
            }
        }
        self.expert.check(c.horizon_fut)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub nc: f64,
    pub dac: f64,
    pub ttc: f64,
    pub ep: f64,
    pub comfort: f64,
    pub pdms: f64,
}

impl ScoreBreakdown {
    /// Penalty product times the 5:5:2 weighted mean of EP, TTC and comfort.
    pub fn compose(nc: f64, dac: f64, ttc: f64, ep: f64, comfort: f64) -> Self {
        let pdms = nc * dac * (5.0 * ep + 5.0 * ttc + 2.0 * comfort) / 12.0;
        Self {
            nc,
            dac,
            ttc,
            ep,
            comfort,
            pdms,
        }
    }
}

/// Grid cell containing a world point (may lie outside the grid).
pub fn cell_of(cfg: &WorldConfig, p: [f64; 2]) -> (i64, i64) {
    (
        (p[0] / cfg.cell_size).floor() as i64,
        (p[1] / cfg.cell_size).floor() as i64,
    )
}

pub fn in_grid(cfg: &WorldConfig, cell: (i64, i64)) -> bool {
    cell.0 >= 0 && cell.1 >= 0 && (cell.0 as usize) < cfg.grid_h && (cell.1 as usize) < cfg.grid_w
}

pub fn cell_index(cfg: &WorldConfig, cell: (i64, i64)) -> Option<usize> {
    in_grid(cfg, cell).then(|| cell.0 as usize * cfg.grid_w + cell.1 as usize)
}

/// Class raster from the road mask and vehicles, with priority
/// ego > agent > drivable > free. Independent of agent order.
pub fn rasterize(cfg: &WorldConfig, road: &[u8], ego: &EgoState, agents: &[VehicleState]) -> Vec<u8> {
    let mut r: Vec<u8> = road
        .iter()
        .map(|&m| if m != 0 { CLASS_DRIVABLE } else { CLASS_FREE })
        .collect();
    for a in agents {
        for c in footprint(cfg, a) {
            if let Some(i) = cell_index(cfg, c) {
                r[i] = CLASS_AGENT;
            }
        }
    }
    for c in footprint(cfg, ego) {
        if let Some(i) = cell_index(cfg, c) {
            r[i] = CLASS_EGO;
        }
    }
    r
}
