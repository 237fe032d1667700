//! BEV rasterization, the toy forward camera, and point projection onto both.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{in_any, Point};
use crate::scenario::Scene;
use crate::tensor::Tensor;

pub const SEG_BACKGROUND: usize = 0;
pub const SEG_DRIVABLE: usize = 1;
pub const SEG_OCCUPIED: usize = 2;

/// BEV grid geometry. Row 0 is the far edge ahead of the ego, column 0 the
/// far left; the ego origin sits `rows_behind` rows above the bottom edge,
/// centered laterally.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RasterConfig {
    pub rows: usize,
    pub cols: usize,
    pub meters_per_cell: f64,
    pub rows_behind: usize,
    /// World position of the ego reference point.
    pub origin_m: Point,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            rows: 64,
            cols: 64,
            meters_per_cell: 0.5,
            rows_behind: 8,
            origin_m: [0.0, 0.0],
        }
    }
}

impl RasterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.meters_per_cell > 0.0 && self.meters_per_cell.is_finite()) {
            return Err(Error::invalid("meters_per_cell must be positive"));
        }
        if self.rows == 0 || self.cols == 0 || self.rows_behind >= self.rows {
            return Err(Error::invalid(
                "raster grid must be non-empty and cover the ego origin",
            ));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn x_max(&self) -> f64 {
        self.origin_m[0] + (self.rows - self.rows_behind) as f64 * self.meters_per_cell
    }

    pub fn y_max(&self) -> f64 {
        self.origin_m[1] + self.cols as f64 / 2.0 * self.meters_per_cell
    }

    /// Continuous `(row, col)` coordinate; cell `(r, c)` spans `[r, r+1) x [c, c+1)`.
    pub fn world_to_grid(&self, p: Point) -> [f64; 2] {
        [
            (self.x_max() - p[0]) / self.meters_per_cell,
            (self.y_max() - p[1]) / self.meters_per_cell,
        ]
    }

    pub fn cell_center(&self, r: usize, c: usize) -> Point {
        [
            self.x_max() - (r as f64 + 0.5) * self.meters_per_cell,
            self.y_max() - (c as f64 + 0.5) * self.meters_per_cell,
        ]
    }

    /// Integer cell containing `p`, if inside the grid.
    pub fn cell_of(&self, p: Point) -> Option<(usize, usize)> {
        let [r, c] = self.world_to_grid(p);
        if r >= 0.0 && c >= 0.0 && r < self.rows as f64 && c < self.cols as f64 {
            Some((r.floor() as usize, c.floor() as usize))
        } else {
            None
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraConfig {
    pub width_px: usize,
    pub height_px: usize,
    pub focal_px: f64,
    pub mount_height_m: f64,
    pub near_m: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            width_px: 64,
            height_px: 32,
            focal_px: 32.0,
            mount_height_m: 1.5,
            near_m: 0.5,
        }
    }
}

impl CameraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.focal_px == 0.0 || !self.focal_px.is_finite() {
            return Err(Error::invalid("camera focal length must be non-zero"));
        }
        if self.width_px == 0 || self.height_px == 0 {
            return Err(Error::invalid("camera image must be non-empty"));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.width_px * self.height_px
    }

    fn cx(&self) -> f64 {
        self.width_px as f64 / 2.0
    }

    fn cy(&self) -> f64 {
        self.height_px as f64 / 2.0
    }

    /// `(row, col)` pixel coordinate of a point at height `z` in the ego frame.
    pub fn project(&self, p: Point, z: f64) -> Option<[f64; 2]> {
        if p[0] <= self.near_m {
            return None;
        }
        let u = self.cx() - self.focal_px * p[1] / p[0];
        let v = self.cy() + self.focal_px * (self.mount_height_m - z) / p[0];
        let inside = u >= 0.0 && v >= 0.0 && u < self.width_px as f64 && v < self.height_px as f64;
        inside.then_some([v, u])
    }
}

#[derive(Clone, Copy, Debug)]
pub enum ProjectionTarget<'a> {
    Bev(&'a RasterConfig),
    Camera(&'a CameraConfig),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projected {
    /// `(row, col)` in grid cells or image pixels.
    pub coord: [f64; 2],
    pub valid: bool,
}

/// Projects `(x, y, heading)` points (on the ground plane) onto a target.
pub fn project_points(points: &[[f64; 3]], target: ProjectionTarget) -> Result<Vec<Projected>> {
    match target {
        ProjectionTarget::Bev(cfg) => {
            cfg.validate()?;
            Ok(points
                .iter()
                .map(|p| {
                    let coord = cfg.world_to_grid([p[0], p[1]]);
                    let valid = coord[0] >= 0.0
                        && coord[1] >= 0.0
                        && coord[0] < cfg.rows as f64
                        && coord[1] < cfg.cols as f64;
                    Projected { coord, valid }
                })
                .collect())
        }
        ProjectionTarget::Camera(cam) => {
            cam.validate()?;
            Ok(points
                .iter()
                .map(|p| match cam.project([p[0], p[1]], 0.0) {
                    Some(coord) => Projected { coord, valid: true },
                    None => Projected {
                        coord: [f64::NAN, f64::NAN],
                        valid: false,
                    },
                })
                .collect())
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BevRaster {
    pub rows: usize,
    pub cols: usize,
    pub meters_per_cell: f64,
    /// Row-major `rows * cols`.
    pub occupancy: Vec<f64>,
    pub drivable: Vec<f64>,
}

impl BevRaster {
    /// `[cells, 2]` input features: occupancy, drivable.
    pub fn features(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.occupancy.len() * 2);
        for (o, d) in self.occupancy.iter().zip(&self.drivable) {
            data.push(*o);
            data.push(*d);
        }
        Tensor::new(vec![self.occupancy.len(), 2], data).expect("raster feature shape")
    }

    /// Per-cell segmentation class; occupancy takes precedence over drivable.
    pub fn seg_labels(&self) -> Vec<usize> {
        self.occupancy
            .iter()
            .zip(&self.drivable)
            .map(|(o, d)| {
                if *o > 0.5 {
                    SEG_OCCUPIED
                } else if *d > 0.5 {
                    SEG_DRIVABLE
                } else {
                    SEG_BACKGROUND
                }
            })
            .collect()
    }
}

/// Cell-center sampling of agent footprints (at `t = 0`) and drivable area.
pub fn rasterize_scene(scene: &Scene, cfg: &RasterConfig) -> Result<BevRaster> {
    cfg.validate()?;
    let boxes: Vec<_> = scene.agents.iter().map(|a| a.footprint_at(0.0)).collect();
    let n = cfg.cells();
    let mut occupancy = vec![0.0; n];
    let mut drivable = vec![0.0; n];
    for r in 0..cfg.rows {
        for c in 0..cfg.cols {
            let p = cfg.cell_center(r, c);
            let i = r * cfg.cols + c;
            if boxes.iter().any(|b| b.contains(p)) {
                occupancy[i] = 1.0;
            }
            if in_any(&scene.drivable, p) {
                drivable[i] = 1.0;
            }
        }
    }
    Ok(BevRaster {
        rows: cfg.rows,
        cols: cfg.cols,
        meters_per_cell: cfg.meters_per_cell,
        occupancy,
        drivable,
    })
}

/// Number of channels produced by [`render_front_view`].
pub const IMAGE_CHANNELS: usize = 4;

/// Toy forward-camera image, `[pixels, 4]` row-major with channels
/// drivable ground, agent silhouette, inverse depth, sky.
pub fn render_front_view(scene: &Scene, cam: &CameraConfig) -> Result<Tensor> {
    cam.validate()?;
    let (w, h) = (cam.width_px, cam.height_px);
    let mut img = vec![0.0; w * h * IMAGE_CHANNELS];

    struct Silhouette {
        depth: f64,
        u0: f64,
        u1: f64,
        v_top: f64,
        v_bottom: f64,
    }
    let mut sil: Vec<Silhouette> = Vec::new();
    for a in &scene.agents {
        let corners = a.footprint_at(0.0).corners();
        let front: Vec<Point> = corners
            .iter()
            .copied()
            .filter(|c| c[0] > cam.near_m)
            .collect();
        if front.is_empty() {
            continue;
        }
        let depth = front.iter().map(|c| c[0]).fold(f64::INFINITY, f64::min);
        let us: Vec<f64> = front
            .iter()
            .map(|c| cam.cx() - cam.focal_px * c[1] / c[0])
            .collect();
        let u0 = us.iter().copied().fold(f64::INFINITY, f64::min);
        let u1 = us.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let v_bottom = cam.cy() + cam.focal_px * cam.mount_height_m / depth;
        let v_top = cam.cy() + cam.focal_px * (cam.mount_height_m - a.class.height_m()) / depth;
        sil.push(Silhouette {
            depth,
            u0,
            u1,
            v_top,
            v_bottom,
        });
    }
    // nearest silhouette wins
    sil.sort_by(|a, b| a.depth.total_cmp(&b.depth));

    for v in 0..h {
        for u in 0..w {
            let (pv, pu) = (v as f64 + 0.5, u as f64 + 0.5);
            let px = &mut img[(v * w + u) * IMAGE_CHANNELS..(v * w + u + 1) * IMAGE_CHANNELS];
            if let Some(s) = sil
                .iter()
                .find(|s| pu >= s.u0 && pu <= s.u1 && pv >= s.v_top && pv <= s.v_bottom)
            {
                px[1] = 1.0;
                px[2] = (1.0 / s.depth).min(1.0);
                continue;
            }
            if pv <= cam.cy() {
                px[3] = 1.0;
                continue;
            }
            let x = cam.focal_px * cam.mount_height_m / (pv - cam.cy());
            let y = -(pu - cam.cx()) * x / cam.focal_px;
            px[2] = (1.0 / x).min(1.0);
            if in_any(&scene.drivable, [x, y]) {
                px[0] = 1.0;
            }
        }
    }
    Tensor::new(vec![w * h, IMAGE_CHANNELS], img)
}
