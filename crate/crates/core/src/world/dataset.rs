//! Binary episode files.
//!
//! Little-endian. Header: magic `DWEP`, `u32` version, `u32` episode count.
//! Each episode is a `u32`-length-prefixed record holding the seed, the
//! config echo as JSON, the command byte, the road mask, every frame
//! (time index, raster, ego and agent states) and the expert waypoints.

use std::path::Path;

use super::{Command, Episode, Frame, Trajectory, VehicleState, WorldConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DWEP";
pub const DWEP_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_state(out: &mut Vec<u8>, s: &VehicleState) {
    for v in [s.x, s.y, s.heading, s.speed] {
        put_f64(out, v);
    }
}

fn encode_record(ep: &Episode) -> Result<Vec<u8>> {
    ep.validate()?;
    let mut r = Vec::new();
    r.extend_from_slice(&ep.seed.to_le_bytes());
    let cfg = serde_json::to_vec(&ep.cfg)?;
    put_u32(&mut r, cfg.len() as u32);
    r.extend_from_slice(&cfg);
    r.push(ep.command.index() as u8);
    r.extend_from_slice(&ep.road);
    for f in &ep.frames {
        put_u32(&mut r, f.time_index as u32);
        r.extend_from_slice(&f.bev);
        put_state(&mut r, &f.ego);
        put_u32(&mut r, f.agents.len() as u32);
        for a in &f.agents {
            put_state(&mut r, a);
        }
    }
    for w in &ep.expert.waypoints {
        put_f64(&mut r, w[0]);
        put_f64(&mut r, w[1]);
    }
    Ok(r)
}

pub fn encode_episodes(eps: &[Episode]) -> Result<Vec<u8>> {
    let mut out = MAGIC.to_vec();
    put_u32(&mut out, DWEP_VERSION);
    put_u32(&mut out, eps.len() as u32);
    for ep in eps {
        let rec = encode_record(ep)?;
        put_u32(&mut out, rec.len() as u32);
        out.extend_from_slice(&rec);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("truncated episode data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn state(&mut self) -> Result<VehicleState> {
        Ok(VehicleState {
            x: self.f64()?,
            y: self.f64()?,
            heading: self.f64()?,
            speed: self.f64()?,
        })
    }
}

fn decode_record(buf: &[u8]) -> Result<Episode> {
    let mut r = Reader { buf, pos: 0 };
    let seed = r.u64()?;
    let n = r.u32()? as usize;
    let cfg: WorldConfig =
        serde_json::from_slice(r.take(n)?).map_err(|e| Error::Format(format!("config echo: {e}")))?;
    cfg.validate().map_err(|e| Error::Format(format!("config echo: {e}")))?;
    let command = Command::from_index(r.u8()?)?;
    let road = r.take(cfg.n_cells())?.to_vec();
    let mut frames = Vec::with_capacity(cfg.n_frames());
    for _ in 0..cfg.n_frames() {
        let time_index = r.u32()? as usize;
        let bev = r.take(cfg.n_cells())?.to_vec();
        let ego = r.state()?;
        let na = r.u32()? as usize;
        if na > 1 << 16 {
            return Err(Error::Format(format!("implausible agent count {na}")));
        }
        let agents = (0..na).map(|_| r.state()).collect::<Result<_>>()?;
        frames.push(Frame {
            bev,
            ego,
            agents,
            time_index,
        });
    }
    let waypoints = (0..cfg.horizon_fut)
        .map(|_| Ok([r.f64()?, r.f64()?]))
        .collect::<Result<_>>()?;
    if r.pos != buf.len() {
        return Err(Error::Format("trailing bytes in episode record".into()));
    }
    let ep = Episode {
        cfg,
        road,
        frames,
        expert: Trajectory::new(waypoints),
        command,
        seed,
    };
    ep.validate().map_err(|e| match e {
        Error::Format(_) => e,
        other => Error::Format(other.to_string()),
    })?;
    Ok(ep)
}

pub fn decode_episodes(buf: &[u8]) -> Result<Vec<Episode>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Format("not an episode file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != DWEP_VERSION {
        return Err(Error::Format(format!(
            "episode file version {version}, expected {DWEP_VERSION}"
        )));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        out.push(decode_record(r.take(len)?)?);
    }
    if r.pos != buf.len() {
        return Err(Error::Format("trailing bytes after last episode".into()));
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, eps: &[Episode]) -> Result<()> {
    std::fs::write(path, encode_episodes(eps)?)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<Episode>> {
    decode_episodes(&std::fs::read(path)?)
}
