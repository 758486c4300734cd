//! Episode generation: road layout, scripted traffic and the expert.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::sim::{footprints_overlap, rollout, score_pdm};
use super::{
    cell_of, in_grid, rasterize, wrap_angle, Command, EgoState, Episode, Frame, Trajectory, VehicleState, WorldConfig,
};
use crate::error::{Error, Result};

const ROAD_STEP: f64 = 0.05;
const ROAD_START_X: f64 = -2.0;
const ROAD_LENGTH: f64 = 60.0;
/// Expert longitudinal acceleration limit, m/s².
const EXPERT_ACCEL: f64 = 1.5;
/// Fractions of the desired speed tried in order by the expert.
const SPEED_FRACTIONS: [f64; 5] = [1.0, 0.75, 0.5, 0.25, 0.0];

/// Lane centerline sampled at a fixed arc-length step.
struct Road {
    pts: Vec<[f64; 2]>,
    heads: Vec<f64>,
}

impl Road {
    /// Straight section up to `turn_at`, then an arc of `radius` bending by
    /// at most a right angle towards `side` (+1 left, -1 right), then straight.
    fn new(y0: f64, turn_at: f64, radius: f64, side: f64) -> Self {
        let n = (ROAD_LENGTH / ROAD_STEP) as usize + 1;
        let mut pts = Vec::with_capacity(n);
        let mut heads = Vec::with_capacity(n);
        let (mut x, mut y) = (ROAD_START_X, y0);
        let heading_at = |s: f64| {
            if side == 0.0 || s <= turn_at {
                0.0
            } else {
                side * ((s - turn_at) / radius).min(FRAC_PI_2)
            }
        };
        for i in 0..n {
            let s = i as f64 * ROAD_STEP;
            pts.push([x, y]);
            heads.push(heading_at(s));
            let mid = heading_at(s + 0.5 * ROAD_STEP);
            x += ROAD_STEP * mid.cos();
            y += ROAD_STEP * mid.sin();
        }
        Self { pts, heads }
    }

    fn pose(&self, s: f64) -> ([f64; 2], f64) {
        let u = (s / ROAD_STEP).clamp(0.0, (self.pts.len() - 1) as f64);
        let i = (u.floor() as usize).min(self.pts.len() - 2);
        let f = u - i as f64;
        let (a, b) = (self.pts[i], self.pts[i + 1]);
        let h = self.heads[i] + f * (self.heads[i + 1] - self.heads[i]);
        ([a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])], h)
    }

    /// Point `lateral` meters to the left of the centerline at `s`.
    fn offset(&self, s: f64, lateral: f64) -> ([f64; 2], f64) {
        let (p, h) = self.pose(s);
        ([p[0] - lateral * h.sin(), p[1] + lateral * h.cos()], h)
    }

    fn mask(&self, cfg: &WorldConfig) -> Vec<u8> {
        let cs = cfg.cell_size;
        let r2 = cfg.road_half_width * cfg.road_half_width;
        let mut m = vec![0u8; cfg.n_cells()];
        for i in 0..cfg.grid_h {
            for j in 0..cfg.grid_w {
                let c = [(i as f64 + 0.5) * cs, (j as f64 + 0.5) * cs];
                let near = self.pts.iter().any(|p| {
                    let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
                    dx * dx + dy * dy <= r2
                });
                m[i * cfg.grid_w + j] = near as u8;
            }
        }
        m
    }
}

/// Mixes an index into a base seed (splitmix64 finalizer).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_episode(cfg: &WorldConfig, seed: u64) -> Result<Episode> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cfg.max_retries {
        if let Some(mut ep) = attempt(cfg, &mut rng)? {
            ep.seed = seed;
            return Ok(ep);
        }
    }
    Err(Error::Generation(format!(
        "no valid scene for seed {seed} after {} attempts",
        cfg.max_retries
    )))
}

/// `n` episodes from seeds derived from `base`; seeds whose generation fails
/// are skipped in order.
pub fn generate_dataset(cfg: &WorldConfig, n: usize, base: u64) -> Result<Vec<Episode>> {
    let mut out = Vec::with_capacity(n);
    let mut idx = 0u64;
    while out.len() < n {
        if idx > 16 * n as u64 + 64 {
            return Err(Error::Generation(format!(
                "only {} of {n} episodes after {idx} seeds",
                out.len()
            )));
        }
        match generate_episode(cfg, derive_seed(base, idx)) {
            Ok(ep) => out.push(ep),
            Err(Error::Generation(_)) => {}
            Err(e) => return Err(e),
        }
        idx += 1;
    }
    Ok(out)
}

fn agent_at(a: &VehicleState, frames_from_t: f64, dt: f64) -> VehicleState {
    a.advanced(frames_from_t * dt)
}

fn sample_agent(cfg: &WorldConfig, road: &Road, road_mask: &[u8], s_t: f64, rng: &mut ChaCha8Rng) -> VehicleState {
    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    match rng.random_range(0..4u32) {
        0 => {
            // Slower vehicle ahead in the lane.
            let (p, h) = road.pose(s_t + rng.random_range(3.0..8.0));
            VehicleState::new(p[0], p[1], h, rng.random_range(0.0..1.2))
        }
        1 => {
            // Parked on the shoulder.
            let (p, h) = road.offset(s_t + rng.random_range(-1.0..8.0), side * rng.random_range(1.1..1.4));
            VehicleState::new(p[0], p[1], h, 0.0)
        }
        2 => {
            // Oncoming in the other lane.
            let (p, h) = road.offset(s_t + rng.random_range(5.0..14.0), side * 1.2);
            VehicleState::new(p[0], p[1], h + PI, rng.random_range(0.3..1.2))
        }
        _ => {
            // Slow vehicle somewhere off the road.
            let (hm, wm) = (cfg.grid_h as f64 * cfg.cell_size, cfg.grid_w as f64 * cfg.cell_size);
            let mut p = [rng.random_range(0.0..hm), rng.random_range(0.0..wm)];
            for _ in 0..16 {
                let c = cell_of(cfg, p);
                if in_grid(cfg, c) && road_mask[c.0 as usize * cfg.grid_w + c.1 as usize] == 0 {
                    break;
                }
                p = [rng.random_range(0.0..hm), rng.random_range(0.0..wm)];
            }
            let h = rng.random_range(-PI..PI);
            VehicleState::new(p[0], p[1], h, rng.random_range(0.0..0.8))
        }
    }
}

/// Arc positions of the expert under an acceleration-limited approach to `target`.
fn speed_profile(v0: f64, target: f64, s_t: f64, n: usize, dt: f64) -> Vec<f64> {
    let mut v = v0;
    let mut s = s_t;
    (0..n)
        .map(|_| {
            v += (target - v).clamp(-EXPERT_ACCEL * dt, EXPERT_ACCEL * dt);
            v = v.max(0.0);
            s += v * dt;
            s
        })
        .collect()
}

fn attempt(cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> Result<Option<Episode>> {
    let (hist, fut, dt) = (cfg.horizon_hist, cfg.horizon_fut, cfg.dt);
    let v0 = rng.random_range(cfg.speed_min..=cfg.speed_max);
    let s0 = rng.random_range(3.0..4.0);
    let s_t = s0 + hist as f64 * v0 * dt;

    let command = match rng.random_range(0..3u32) {
        0 => Command::Left,
        1 => Command::Straight,
        _ => Command::Right,
    };
    let side = match command {
        Command::Left => 1.0,
        Command::Straight => 0.0,
        Command::Right => -1.0,
    };
    let y0 = 0.5 * cfg.grid_w as f64 * cfg.cell_size + rng.random_range(-1.0..1.0);
    let road = Road::new(y0, s_t + rng.random_range(0.0..3.0), rng.random_range(6.0..10.0), side);
    let road_mask = road.mask(cfg);

    let ego_at = |s: f64, speed: f64| {
        let (p, h) = road.pose(s);
        VehicleState::new(p[0], p[1], h, speed)
    };
    let history: Vec<EgoState> = (0..=hist)
        .map(|j| ego_at(s_t - (hist - j) as f64 * v0 * dt, v0))
        .collect();
    let ego_t = history[hist];

    let agents_t: Vec<VehicleState> = (0..cfg.n_agents)
        .map(|_| sample_agent(cfg, &road, &road_mask, s_t, rng))
        .collect();
    let agents_at = |j: usize| -> Vec<VehicleState> {
        agents_t
            .iter()
            .map(|a| agent_at(a, j as f64 - hist as f64, dt))
            .collect()
    };
    for (j, e) in history.iter().enumerate() {
        if agents_at(j).iter().any(|a| footprints_overlap(cfg, e, a)) {
            return Ok(None);
        }
    }

    let v_des = rng.random_range(cfg.speed_min..=cfg.speed_max);
    for frac in SPEED_FRACTIONS {
        let arcs = speed_profile(v0, frac * v_des, s_t, fut, dt);
        let expert = Trajectory::new(arcs.iter().map(|&s| ego_t.to_body(road.pose(s).0)).collect());
        // Frames are completed after the future ego states are known.
        let mut frames: Vec<Frame> = (0..cfg.n_frames())
            .map(|j| Frame {
                bev: Vec::new(),
                ego: if j <= hist { history[j] } else { ego_t },
                agents: agents_at(j),
                time_index: j,
            })
            .collect();
        let mut ep = Episode {
            cfg: cfg.clone(),
            road: road_mask.clone(),
            frames: std::mem::take(&mut frames),
            expert,
            command,
            seed: 0,
        };
        let future = rollout(&ep, &ep.expert)?;
        for (k, st) in future.iter().enumerate() {
            ep.frames[hist + 1 + k].ego = *st;
        }
        let all_in_grid = ep
            .frames
            .iter()
            .all(|f| super::sim::footprint(cfg, &f.ego).iter().all(|c| in_grid(cfg, *c)));
        if !all_in_grid {
            continue;
        }
        let s = score_pdm(&ep, &ep.expert)?;
        if s.nc == 1.0 && s.dac == 1.0 && s.ttc == 1.0 && s.comfort == 1.0 {
            for f in &mut ep.frames {
                f.bev = rasterize(cfg, &ep.road, &f.ego, &f.agents);
                f.ego.heading = wrap_angle(f.ego.heading);
            }
            return Ok(Some(ep));
        }
    }
    Ok(None)
}
