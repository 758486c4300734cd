//! Trajectory execution, closed-loop scoring and open-loop metrics.

use super::{
    cell_index, cell_of, in_grid, wrap_angle, EgoState, Episode, ScoreBreakdown, Trajectory, VehicleState, WorldConfig,
};
use crate::error::{Error, Result};

/// Segments shorter than this keep the previous heading.
const MIN_HEADING_SEGMENT: f64 = 0.05;
/// Below this much expert progress the episode is treated as a stop and EP is 1.
const MIN_EXPERT_PROGRESS: f64 = 0.5;
const TTC_SAMPLES: usize = 4;
/// Length of the ray that extends the route past the last expert waypoint.
const ROUTE_EXTENSION: f64 = 1.0e3;

pub const OPEN_LOOP_HORIZONS: [f64; 3] = [1.0, 2.0, 3.0];

/// The two cells covered by a vehicle: those containing the points half a
/// cell ahead of and behind its center. They may coincide.
pub fn footprint(cfg: &WorldConfig, s: &VehicleState) -> [(i64, i64); 2] {
    let h = 0.5 * cfg.cell_size;
    let (sin, cos) = s.heading.sin_cos();
    [
        cell_of(cfg, [s.x + h * cos, s.y + h * sin]),
        cell_of(cfg, [s.x - h * cos, s.y - h * sin]),
    ]
}

pub fn footprints_overlap(cfg: &WorldConfig, a: &VehicleState, b: &VehicleState) -> bool {
    let fa = footprint(cfg, a);
    let fb = footprint(cfg, b);
    fa.iter().any(|c| fb.contains(c))
}

/// Ego states at frames `t+1 ..= t+horizon_fut` when the ego is placed on
/// each waypoint in turn.
pub fn rollout(ep: &Episode, traj: &Trajectory) -> Result<Vec<EgoState>> {
    traj.check(ep.cfg.horizon_fut)?;
    let origin = ep.current().ego;
    let dt = ep.cfg.dt;
    let mut prev = origin.pos();
    let mut heading = origin.heading;
    let mut out = Vec::with_capacity(traj.len());
    for wp in &traj.waypoints {
        let p = origin.to_world(*wp);
        let (dx, dy) = (p[0] - prev[0], p[1] - prev[1]);
        let len = dx.hypot(dy);
        if len >= MIN_HEADING_SEGMENT {
            heading = wrap_angle(dy.atan2(dx));
        }
        out.push(VehicleState {
            x: p[0],
            y: p[1],
            heading,
            speed: len / dt,
        });
        prev = p;
    }
    Ok(out)
}

/// Arc length of the projection of `q` onto the polyline `route`, which is
/// extended past its end by a ray along the last non-degenerate segment.
/// Ties in distance go to the earlier segment.
pub fn route_progress(route: &[[f64; 2]], q: [f64; 2]) -> f64 {
    if route.is_empty() {
        return 0.0;
    }
    let mut pts = route.to_vec();
    if let Some(dir) = route
        .windows(2)
        .rev()
        .map(|w| [w[1][0] - w[0][0], w[1][1] - w[0][1]])
        .find(|d| d[0].hypot(d[1]) > 0.0)
    {
        let n = dir[0].hypot(dir[1]);
        let last = route[route.len() - 1];
        pts.push([
            last[0] + dir[0] / n * ROUTE_EXTENSION,
            last[1] + dir[1] / n * ROUTE_EXTENSION,
        ]);
    }
    if pts.len() == 1 {
        return 0.0;
    }
    let mut best = (f64::INFINITY, 0.0);
    let mut cum = 0.0;
    for w in pts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let d = [b[0] - a[0], b[1] - a[1]];
        let len2 = d[0] * d[0] + d[1] * d[1];
        let len = len2.sqrt();
        let t = if len2 > 0.0 {
            (((q[0] - a[0]) * d[0] + (q[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let p = [a[0] + t * d[0], a[1] + t * d[1]];
        let dist = (q[0] - p[0]).hypot(q[1] - p[1]);
        if dist < best.0 {
            best = (dist, cum + t * len);
        }
        cum += len;
    }
    best.1
}

fn polyline_length(pts: &[[f64; 2]]) -> f64 {
    pts.windows(2)
        .map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]))
        .sum()
}

fn collides_at(ep: &Episode, k: usize, ego: &EgoState) -> bool {
    ep.frames[ep.current_index() + k]
        .agents
        .iter()
        .any(|a| footprints_overlap(&ep.cfg, ego, a))
}

/// Closed-loop score of executing `traj` in the episode.
pub fn score_pdm(ep: &Episode, traj: &Trajectory) -> Result<ScoreBreakdown> {
    let cfg = &ep.cfg;
    let states = rollout(ep, traj)?;
    let origin = ep.current().ego;

    let nc = if (1..=states.len()).any(|k| collides_at(ep, k, &states[k - 1])) {
        0.0
    } else {
        1.0
    };

    let on_road = |c: (i64, i64)| cell_index(cfg, c).is_some_and(|i| ep.road[i] != 0);
    let dac = if states
        .iter()
        .all(|s| footprint(cfg, s).iter().all(|c| in_grid(cfg, *c) && on_road(*c)))
    {
        1.0
    } else {
        0.0
    };

    let thr = cfg.ttc_threshold();
    let mut ttc = 1.0;
    'outer: for (k, s) in states.iter().enumerate() {
        let agents = &ep.frames[ep.current_index() + k + 1].agents;
        for j in 1..=TTC_SAMPLES {
            let tau = j as f64 * thr / TTC_SAMPLES as f64;
            let e = s.advanced(tau);
            if agents.iter().any(|a| footprints_overlap(cfg, &e, &a.advanced(tau))) {
                ttc = 0.0;
                break 'outer;
            }
        }
    }

    let mut route = vec![origin.pos()];
    route.extend(ep.expert.waypoints.iter().map(|w| origin.to_world(*w)));
    let expert_progress = polyline_length(&route);
    let ep_score = if expert_progress < MIN_EXPERT_PROGRESS {
        1.0
    } else {
        let last = states.last().expect("horizon_fut >= 1").pos();
        (route_progress(&route, last) / expert_progress).clamp(0.0, 1.0)
    };

    let dt2 = cfg.dt * cfg.dt;
    let mut pts = vec![origin.pos()];
    pts.extend(states.iter().map(|s| s.pos()));
    let max_acc = pts
        .windows(3)
        .map(|w| {
            let ax = w[2][0] - 2.0 * w[1][0] + w[0][0];
            let ay = w[2][1] - 2.0 * w[1][1] + w[0][1];
            ax.hypot(ay) / dt2
        })
        .fold(0.0, f64::max);
    let mut prev_h = origin.heading;
    let mut max_yaw = 0.0f64;
    for s in &states {
        max_yaw = max_yaw.max(wrap_angle(s.heading - prev_h).abs() / cfg.dt);
        prev_h = s.heading;
    }
    let comfort = if max_acc <= cfg.max_accel && max_yaw <= cfg.max_yaw_rate {
        1.0
    } else {
        0.0
    };

    Ok(ScoreBreakdown::compose(nc, dac, ttc, ep_score, comfort))
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpenLoopMetrics {
    pub horizons: Vec<f64>,
    pub l2: Vec<f64>,
    pub collision: Vec<bool>,
}

/// L2 error and collision flags at 1 s, 2 s and 3 s.
pub fn open_loop_metrics(pred: &Trajectory, gt: &Trajectory, ep: &Episode) -> Result<OpenLoopMetrics> {
    open_loop_metrics_at(pred, gt, ep, &OPEN_LOOP_HORIZONS)
}

/// As [`open_loop_metrics`] at arbitrary horizons in seconds.
pub fn open_loop_metrics_at(
    pred: &Trajectory,
    gt: &Trajectory,
    ep: &Episode,
    horizons: &[f64],
) -> Result<OpenLoopMetrics> {
    let cfg = &ep.cfg;
    gt.check(cfg.horizon_fut)?;
    let states = rollout(ep, pred)?;
    let mut l2 = Vec::with_capacity(horizons.len());
    let mut collision = Vec::with_capacity(horizons.len());
    for &h in horizons {
        let steps = (h / cfg.dt).round();
        let max_h = cfg.horizon_fut as f64 * cfg.dt;
        if !(steps >= 1.0 && steps <= cfg.horizon_fut as f64 && h <= max_h * (1.0 + 1e-12)) {
            return Err(Error::Range(format!("horizon {h} s outside (0, {max_h}] s")));
        }
        let idx = steps as usize;
        let (a, b) = (pred.waypoints[idx - 1], gt.waypoints[idx - 1]);
        l2.push((a[0] - b[0]).hypot(a[1] - b[1]));
        collision.push((1..=idx).any(|k| collides_at(ep, k, &states[k - 1])));
    }
    Ok(OpenLoopMetrics {
        horizons: horizons.to_vec(),
        l2,
        collision,
    })
}
