//! Procedural pinhole renderer for the docking-port marker.
//!
//! The camera frame coincides with the chaser body frame: boresight along
//! body +z, image columns along body +x and rows along body +y. Pixel
//! `(row, col)` covers `[col, col+1) × [row, row+1)` in image coordinates.

use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::dynamics::ChaserState;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraModel {
    /// Focal length, px.
    pub f: f64,
    pub cx: f64,
    pub cy: f64,
    pub h: usize,
    pub w: usize,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self { f: 60.0, cx: 32.0, cy: 24.0, h: 48, w: 64 }
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.f > 0.0) || !self.f.is_finite() {
            return Err(Error::config("camera.f", format!("must be positive, got {}", self.f)));
        }
        if self.h == 0 || self.w == 0 {
            return Err(Error::config("camera.h/w", "image dimensions must be non-zero"));
        }
        if !(0.0..self.w as f64).contains(&self.cx) {
            return Err(Error::config("camera.cx", format!("must lie in [0, {}), got {}", self.w, self.cx)));
        }
        if !(0.0..self.h as f64).contains(&self.cy) {
            return Err(Error::config("camera.cy", format!("must lie in [0, {}), got {}", self.h, self.cy)));
        }
        Ok(())
    }
}

/// Docking-port target: a camera-facing disc plus two cross-bars lying
/// along the LVLH x and z axes through the port.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Marker {
    /// Disc radius, m.
    pub radius: f64,
    /// Half length of each cross-bar, m. Zero disables the bars.
    pub bar_half_length: f64,
    pub bar_half_width: f64,
    /// Range below which the marker is drawn at full intensity, m.
    pub full_intensity_range: f64,
}

impl Default for Marker {
    fn default() -> Self {
        Self {
            radius: 0.5,
            bar_half_length: 1.0,
            bar_half_width: 0.06,
            full_intensity_range: 5.0,
        }
    }
}

/// Single-channel image with intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self { h, w, data: vec![0.0; h * w] }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.w + col]
    }

    /// Intensity-weighted centroid `(u, v)` using pixel centres, or `None`
    /// for a blank image.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let mut total = 0.0;
        let (mut su, mut sv) = (0.0, 0.0);
        for row in 0..self.h {
            for col in 0..self.w {
                let p = self.get(row, col);
                total += p;
                su += p * (col as f64 + 0.5);
                sv += p * (row as f64 + 0.5);
            }
        }
        (total > 0.0).then(|| (su / total, sv / total))
    }

    /// Binary 8-bit PGM.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(self.data.len() + 32);
        write!(out, "P5\n{} {}\n255\n", self.w, self.h).expect("in-memory write");
        out.extend(self.data.iter().map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Pinhole projection of a camera-frame point; `None` when behind the camera.
pub fn project(p: &Vector3<f64>, cam: &CameraModel) -> Option<[f64; 2]> {
    (p.z > 0.0).then(|| [cam.cx + cam.f * p.x / p.z, cam.cy + cam.f * p.y / p.z])
}

fn to_camera(state: &ChaserState, lvlh: &Vector3<f64>) -> Vector3<f64> {
    state.q.inverse_transform_vector(&(lvlh - state.r))
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (ex, ey) = (p[0] - a[0] - t * dx, p[1] - a[1] - t * dy);
    (ex * ex + ey * ey).sqrt()
}

const SUBSAMPLES: [f64; 2] = [0.25, 0.75];

/// Render the marker as seen from `state`. Pure function of its inputs.
pub fn render(state: &ChaserState, cam: &CameraModel, marker: &Marker) -> Image {
    let mut img = Image::zeros(cam.h, cam.w);
    let center = to_camera(state, &Vector3::zeros());
    let dist = center.norm();
    let Some(c_px) = project(&center, cam) else {
        return img;
    };
    if dist < 1e-9 {
        return img;
    }
    let radius_px = cam.f * marker.radius / dist;
    let intensity = (marker.full_intensity_range / dist).clamp(0.2, 1.0);

    let mut bars: Vec<([f64; 2], [f64; 2])> = Vec::new();
    if marker.bar_half_length > 0.0 {
        for axis in [Vector3::x(), Vector3::z()] {
            let a = to_camera(state, &(axis * marker.bar_half_length));
            let b = to_camera(state, &(-axis * marker.bar_half_length));
            if let (Some(pa), Some(pb)) = (project(&a, cam), project(&b, cam)) {
                bars.push((pa, pb));
            }
        }
    }
    let bar_px = cam.f * marker.bar_half_width / dist;

    for row in 0..cam.h {
        for col in 0..cam.w {
            let mut hits = 0u32;
            for sv in SUBSAMPLES {
                for su in SUBSAMPLES {
                    let p = [col as f64 + su, row as f64 + sv];
                    let (du, dv) = (p[0] - c_px[0], p[1] - c_px[1]);
                    let inside = du * du + dv * dv <= radius_px * radius_px
                        || bars.iter().any(|&(a, b)| segment_distance(p, a, b) <= bar_px);
                    hits += inside as u32;
                }
            }
            if hits > 0 {
                img.data[row * cam.w + col] = intensity * hits as f64 / 4.0;
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::look_along;

    fn facing_port(r: Vector3<f64>) -> ChaserState {
        ChaserState { r, q: look_along(&(-r)), ..Default::default() }
    }

    fn disc_only() -> Marker {
        Marker { bar_half_length: 0.0, ..Default::default() }
    }

    fn apparent_radius(img: &Image, marker: &Marker, dist: f64) -> f64 {
        let intensity = (marker.full_intensity_range / dist).clamp(0.2, 1.0);
        let area: f64 = img.data.iter().sum::<f64>() / intensity;
        (area / std::f64::consts::PI).sqrt()
    }

    #[test]
    fn projection_examples() {
        let cam = CameraModel { f: 100.0, cx: 32.0, cy: 24.0, h: 48, w: 64 };
        assert_eq!(project(&Vector3::new(0.0, 0.0, 7.0), &cam), Some([32.0, 24.0]));
        assert_eq!(project(&Vector3::new(1.0, 2.0, 10.0), &cam), Some([42.0, 44.0]));
        assert_eq!(project(&Vector3::new(0.0, 0.0, -5.0), &cam), None);
    }

    #[test]
    fn nominal_pose_centres_marker() {
        let cam = CameraModel::default();
        let img = render(&facing_port(Vector3::new(0.0, -25.0, 0.0)), &cam, &Marker::default());
        let (u, v) = img.centroid().unwrap();
        assert!((u - cam.cx).abs() < 1.0 && (v - cam.cy).abs() < 1.0, "({u}, {v})");
        let img = render(&facing_port(Vector3::new(0.7, -24.3, -0.4)), &cam, &Marker::default());
        let (u, v) = img.centroid().unwrap();
        assert!((u - cam.cx).abs() < 1.0 && (v - cam.cy).abs() < 1.0, "({u}, {v})");
    }

    #[test]
    fn target_behind_camera_is_blank() {
        let r = Vector3::new(0.0, -25.0, 0.0);
        let state = ChaserState { r, q: look_along(&r), ..Default::default() };
        let img = render(&state, &CameraModel::default(), &Marker::default());
        assert!(img.data.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn apparent_radius_scales_with_range() {
        let cam = CameraModel::default();
        let marker = disc_only();
        for d in [2.0, 3.0, 5.0, 8.0, 12.0, 20.0, 25.0, 30.0] {
            let img = render(&facing_port(Vector3::new(0.0, -d, 0.0)), &cam, &marker);
            let measured = apparent_radius(&img, &marker, d);
            let expected = cam.f * marker.radius / d;
            assert!((measured - expected).abs() < 1.0, "d={d}: {measured} vs {expected}");
        }
        let far = apparent_radius(&render(&facing_port(Vector3::new(0.0, -8.0, 0.0)), &cam, &marker), &marker, 8.0);
        let near = apparent_radius(&render(&facing_port(Vector3::new(0.0, -4.0, 0.0)), &cam, &marker), &marker, 4.0);
        assert!((near - 2.0 * far).abs() < 1.0);
    }

    #[test]
    fn render_is_pure_and_bounded() {
        let cam = CameraModel::default();
        let s = facing_port(Vector3::new(0.3, -3.0, 0.2));
        let a = render(&s, &cam, &Marker::default());
        let b = render(&s, &cam, &Marker::default());
        assert_eq!(a, b);
        assert!(a.data.iter().all(|p| (0.0..=1.0).contains(p)));
        assert!(a.data.iter().any(|&p| p == 1.0));
    }

    #[test]
    fn camera_validation() {
        assert!(CameraModel::default().validate().is_ok());
        let bad = CameraModel { cx: 64.0, ..Default::default() };
        assert!(bad.validate().unwrap_err().to_string().contains("camera.cx"));
    }

    #[test]
    fn pgm_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let img = render(&facing_port(Vector3::new(0.0, -5.0, 0.0)), &CameraModel::default(), &Marker::default());
        img.write_pgm(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n64 48\n255\n"));
        assert_eq!(bytes.len(), 13 + 64 * 48);
    }
}
