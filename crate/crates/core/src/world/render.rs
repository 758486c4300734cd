//! Binary PPM rendering of class rasters with trajectory overlays.

use std::path::Path;

use super::{cell_index, cell_of, Frame, WorldConfig};
use crate::error::{Error, Result};

const PALETTE: [[u8; 3]; 4] = [
    [32, 32, 32],    // free
    [128, 128, 128], // drivable
    [220, 60, 60],   // agent
    [60, 120, 230],  // ego
];

pub const EXPERT_COLOR: [u8; 3] = [40, 200, 80];
pub const PREDICTED_COLOR: [u8; 3] = [250, 210, 40];

/// World-frame points drawn as markers in the cells containing them.
#[derive(Clone, Debug, PartialEq)]
pub struct Overlay {
    pub points: Vec<[f64; 2]>,
    pub color: [u8; 3],
}

/// P6 image of a raster. Forward (+x) points up and +y points left, so the
/// image looks like a driver's view from above. Each cell is `scale` pixels
/// wide; overlay markers fill the middle of their cell.
pub fn render_ppm(cfg: &WorldConfig, raster: &[u8], overlays: &[Overlay], scale: usize) -> Result<Vec<u8>> {
    if raster.len() != cfg.n_cells() {
        return Err(Error::Dimension(format!(
            "raster has {} cells, expected {}",
            raster.len(),
            cfg.n_cells()
        )));
    }
    if scale == 0 {
        return Err(Error::Value("render scale must be positive".into()));
    }
    let mut cells: Vec<[u8; 3]> = raster
        .iter()
        .map(|&c| {
            PALETTE
                .get(c as usize)
                .copied()
                .ok_or_else(|| Error::Value(format!("class id {c} has no color")))
        })
        .collect::<Result<_>>()?;
    let mut marked = vec![false; cells.len()];
    for o in overlays {
        for p in &o.points {
            if let Some(i) = cell_index(cfg, cell_of(cfg, *p)) {
                cells[i] = o.color;
                marked[i] = true;
            }
        }
    }
    let (w, h) = (cfg.grid_w * scale, cfg.grid_h * scale);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * w * h);
    let inset = if scale >= 3 { scale / 4 } else { 0 };
    for r in 0..h {
        let i = cfg.grid_h - 1 - r / scale;
        for c in 0..w {
            let j = cfg.grid_w - 1 - c / scale;
            let k = i * cfg.grid_w + j;
            let (dr, dc) = (r % scale, c % scale);
            let inside = dr >= inset && dr < scale - inset && dc >= inset && dc < scale - inset;
            let px = if marked[k] && !inside {
                PALETTE[raster[k] as usize]
            } else {
                cells[k]
            };
            out.extend_from_slice(&px);
        }
    }
    Ok(out)
}

pub fn render_frame(cfg: &WorldConfig, frame: &Frame, overlays: &[Overlay], scale: usize, path: &Path) -> Result<()> {
    let bytes = render_ppm(cfg, &frame.bev, overlays, scale)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::VehicleState;
    use super::*;

    fn tiny() -> WorldConfig {
        WorldConfig {
            grid_h: 4,
            grid_w: 4,
            cell_size: 1.0,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn uniform_drivable_scene() {
        let cfg = WorldConfig::default();
        let img = render_ppm(&cfg, &vec![1u8; cfg.n_cells()], &[], 2).unwrap();
        let header = b"P6\n64 64\n255\n";
        assert_eq!(&img[..header.len()], header);
        assert!(img[header.len()..].chunks(3).all(|p| p == PALETTE[1]));
    }

    #[test]
    fn hand_built_golden() {
        // Rows bottom to top; row 0 is nearest the viewer.
        let raster = [
            0, 1, 1, 0, //
            0, 1, 3, 0, //
            0, 2, 1, 0, //
            1, 1, 1, 1, //
        ];
        let overlay = Overlay {
            points: vec![[3.5, 0.5]],
            color: [1, 2, 3],
        };
        let img = render_ppm(&tiny(), &raster, &[overlay], 1).unwrap();
        let mut golden = b"P6\n4 4\n255\n".to_vec();
        let (f, d, a, e, o) = ([32, 32, 32], [128, 128, 128], [220, 60, 60], [60, 120, 230], [1, 2, 3]);
        // Image rows are grid rows top-down, columns mirrored.
        for px in [[d, d, d, o], [f, d, a, f], [f, e, d, f], [f, d, d, f]]
            .iter()
            .flatten()
        {
            golden.extend_from_slice(px);
        }
        assert_eq!(img, golden);
    }

    #[test]
    fn rerender_is_identical_and_written() {
        let cfg = tiny();
        let frame = Frame {
            bev: vec![1; 16],
            ego: VehicleState::new(0.5, 0.5, 0.0, 0.0),
            agents: vec![],
            time_index: 0,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.ppm");
        render_frame(&cfg, &frame, &[], 3, &p).unwrap();
        let a = std::fs::read(&p).unwrap();
        render_frame(&cfg, &frame, &[], 3, &p).unwrap();
        assert_eq!(a, std::fs::read(&p).unwrap());
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let cfg = tiny();
        let frame = Frame {
            bev: vec![1; 16],
            ego: VehicleState::new(0.5, 0.5, 0.0, 0.0),
            agents: vec![],
            time_index: 0,
        };
        let r = render_frame(&cfg, &frame, &[], 1, Path::new("/nonexistent/dir/x.ppm"));
        assert!(matches!(r, Err(Error::Io(_))));
    }
}
