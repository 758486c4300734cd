//! Second scorer written directly from the metric definitions, sharing no
//! code with the library beyond the episode data.

use dwva_core::world::{Episode, ScoreBreakdown, Trajectory};

type P = (f64, f64);

fn cell(cs: f64, p: P) -> (i64, i64) {
    ((p.0 / cs).floor() as i64, (p.1 / cs).floor() as i64)
}

fn cells(cs: f64, x: f64, y: f64, h: f64) -> Vec<(i64, i64)> {
    let d = cs / 2.0;
    vec![
        cell(cs, (x + d * h.cos(), y + d * h.sin())),
        cell(cs, (x - d * h.cos(), y - d * h.sin())),
    ]
}

fn hit(a: &[(i64, i64)], b: &[(i64, i64)]) -> bool {
    a.iter().any(|c| b.iter().any(|d| c == d))
}

fn wrap(a: f64) -> f64 {
    let mut a = a;
    while a > std::f64::consts::PI {
        a -= 2.0 * std::f64::consts::PI;
    }
    while a <= -std::f64::consts::PI {
        a += 2.0 * std::f64::consts::PI;
    }
    a
}

fn world(ep: &Episode, w: [f64; 2]) -> P {
    let e = ep.current().ego;
    (
        e.x + w[0] * e.heading.cos() - w[1] * e.heading.sin(),
        e.y + w[0] * e.heading.sin() + w[1] * e.heading.cos(),
    )
}

fn project(route: &[P], q: P) -> f64 {
    let mut best_d = f64::MAX;
    let mut best_s = 0.0;
    let mut acc = 0.0;
    for i in 0..route.len() - 1 {
        let (a, b) = (route[i], route[i + 1]);
        let l = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
        let u = if l == 0.0 {
            0.0
        } else {
            (((q.0 - a.0) * (b.0 - a.0) + (q.1 - a.1) * (b.1 - a.1)) / (l * l)).clamp(0.0, 1.0)
        };
        let p = (a.0 + u * (b.0 - a.0), a.1 + u * (b.1 - a.1));
        let d = ((q.0 - p.0).powi(2) + (q.1 - p.1).powi(2)).sqrt();
        if d < best_d {
            best_d = d;
            best_s = acc + u * l;
        }
        acc += l;
    }
    best_s
}

/// Sub-scores in the order nc, dac, ttc, ep, comfort, then the composite.
pub fn score(ep: &Episode, traj: &Trajectory) -> [f64; 6] {
    let cfg = &ep.cfg;
    let cs = cfg.cell_size;
    let t = cfg.horizon_hist;
    let e0 = ep.current().ego;
    let mut pos = vec![(e0.x, e0.y)];
    let mut head = vec![e0.heading];
    let mut speed = vec![e0.speed];
    for w in &traj.waypoints {
        let p = world(ep, *w);
        let q = *pos.last().unwrap();
        let len = ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt();
        let h = if len >= 0.05 {
            (p.1 - q.1).atan2(p.0 - q.0)
        } else {
            *head.last().unwrap()
        };
        pos.push(p);
        head.push(wrap(h));
        speed.push(len / cfg.dt);
    }
    let n = traj.waypoints.len();
    let mut nc = 1.0;
    let mut dac = 1.0;
    let mut ttc = 1.0;
    for k in 1..=n {
        let mine = cells(cs, pos[k].0, pos[k].1, head[k]);
        for c in &mine {
            let ok = c.0 >= 0
                && c.1 >= 0
                && (c.0 as usize) < cfg.grid_h
                && (c.1 as usize) < cfg.grid_w
                && ep.road[c.0 as usize * cfg.grid_w + c.1 as usize] == 1;
            if !ok {
                dac = 0.0;
            }
        }
        for a in &ep.frames[t + k].agents {
            if hit(&mine, &cells(cs, a.x, a.y, a.heading)) {
                nc = 0.0;
            }
            for j in 1..=4 {
                let tau = j as f64 * cfg.ttc_dt_multiple * cfg.dt / 4.0;
                let ex = pos[k].0 + speed[k] * head[k].cos() * tau;
                let ey = pos[k].1 + speed[k] * head[k].sin() * tau;
                let ax = a.x + a.speed * a.heading.cos() * tau;
                let ay = a.y + a.speed * a.heading.sin() * tau;
                if hit(&cells(cs, ex, ey, head[k]), &cells(cs, ax, ay, a.heading)) {
                    ttc = 0.0;
                }
            }
        }
    }
    let mut route = vec![(e0.x, e0.y)];
    route.extend(ep.expert.waypoints.iter().map(|w| world(ep, *w)));
    let total: f64 = route
        .windows(2)
        .map(|w| ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt())
        .sum();
    let mut ext = route.clone();
    let m = route.len();
    if m >= 2 {
        let (a, b) = (route[m - 2], route[m - 1]);
        let l = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
        if l > 0.0 {
            ext.push((b.0 + (b.0 - a.0) / l * 1e3, b.1 + (b.1 - a.1) / l * 1e3));
        }
    }
    let epv = if total < 0.5 {
        1.0
    } else {
        (project(&ext, pos[n]) / total).clamp(0.0, 1.0)
    };
    let mut comfort = 1.0;
    for k in 1..n {
        let ax = pos[k + 1].0 - 2.0 * pos[k].0 + pos[k - 1].0;
        let ay = pos[k + 1].1 - 2.0 * pos[k].1 + pos[k - 1].1;
        if (ax * ax + ay * ay).sqrt() / (cfg.dt * cfg.dt) > cfg.max_accel {
            comfort = 0.0;
        }
    }
    for k in 1..=n {
        if wrap(head[k] - head[k - 1]).abs() / cfg.dt > cfg.max_yaw_rate {
            comfort = 0.0;
        }
    }
    let total = if nc == 0.0 || dac == 0.0 {
        0.0
    } else {
        (5.0 * epv + 5.0 * ttc + 2.0 * comfort) / 12.0
    };
    [nc, dac, ttc, epv, comfort, total]
}

#[allow(dead_code)]
pub fn pdms(ep: &Episode, traj: &Trajectory) -> f64 {
    score(ep, traj)[5]
}

/// Largest absolute disagreement with the library's breakdown.
pub fn max_diff(s: &ScoreBreakdown, r: &[f64; 6]) -> f64 {
    [s.nc, s.dac, s.ttc, s.ep, s.comfort, s.pdms]
        .iter()
        .zip(r)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}
